//! Saves a masked model, reloads it and confirms outputs and bytes match.

use mft::masking::{GradMode, MaskSpec};
use mft::model::{Batch, ModelConfig, PlacementPolicy, ToyVlm};
use mft::Checkpoint;

fn main() -> mft::Result<()> {
    let mut model = ToyVlm::build(&ModelConfig::default(), 5)?;
    model.apply_placement(&PlacementPolicy::mlp(), &MaskSpec::soft(5.0, 1.3, GradMode::Ste)?, 9)?;
    let ck = Checkpoint::frozen(model);

    let dir = std::env::temp_dir().join("mft-roundtrip");
    std::fs::create_dir_all(&dir).map_err(|e| mft::Error::io(&dir, e))?;
    let path = dir.join("model.mftc");
    let sum = ck.save(&path)?;
    let back = Checkpoint::load(&path)?;

    let tokens = vec![b"log: tide".iter().map(|&b| b as usize).collect::<Vec<_>>()];
    let a = ck.model.forward(Batch::text(&tokens))?;
    let b = back.model.forward(Batch::text(&tokens))?;
    println!("checksum        {sum:016x}");
    println!("file size       {} bytes", std::fs::metadata(&path).map_err(|e| mft::Error::io(&path, e))?.len());
    println!("logits equal    {}", a == b);
    println!("bytes equal     {}", back.to_bytes()? == ck.to_bytes()?);

    let mut bytes = std::fs::read(&path).map_err(|e| mft::Error::io(&path, e))?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    println!("flipped byte    {}", Checkpoint::from_bytes(&bytes).unwrap_err());
    Ok(())
}
