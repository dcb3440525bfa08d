//! Trainable-parameter ratios of attention, MLP and combined mask placement.

use mft::analysis::{ratio_table_text, trainable_ratio_table};
use mft::model::ModelConfig;

fn main() -> mft::Result<()> {
    let cfg = ModelConfig::default();
    println!(
        "d = {}, hidden = {}, layers = {}, base parameters = {}\n",
        cfg.embed_dim,
        cfg.mlp_hidden_dim,
        cfg.num_layers,
        cfg.parameter_count()
    );
    print!("{}", ratio_table_text(&trainable_ratio_table(&cfg)?));
    Ok(())
}
