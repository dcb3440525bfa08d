//! Command-line front end: argument parsing and the six commands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{self, BoundInputs};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::model::TrainRegime;
use crate::runspec::{config_differences, load_corpus, RunSpec};
use crate::training::sweep::{self, GridPoint, SweepAxis};
use crate::training::{self, metrics_table, Method};

pub const BASE_FILE: &str = "base.mftc";
pub const ADAPTED_FILE: &str = "adapted.mftc";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const SWEEP_FILE: &str = "sweep.tsv";

#[derive(Debug, Parser)]
#[command(name = "mft", version, about = "Mask fine-tuning on a toy vision-language model")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run specification (TOML).
    #[arg(long, global = true)]
    pub spec: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy base model on the pretraining corpus.
    Pretrain,
    /// Adapt a base checkpoint with the spec's method.
    Finetune(FinetuneArgs),
    /// Held-out loss and perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Mask and parameter reports.
    Analyze(AnalyzeArgs),
    /// Encoding-length bound comparison.
    Bound(BoundArgs),
    /// Grid sweep of fine-tuning runs.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Base checkpoint; defaults to the spec's `finetune.base`.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Hard-mask pruned fraction.
    #[arg(long, conflicts_with = "sparsity_from")]
    pub sparsity: Option<f64>,
    /// Takes the hard-mask fraction from an emergent-sparsity report.
    #[arg(long)]
    pub sparsity_from: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus source; defaults to the spec's fine-tuning corpus.
    #[arg(long)]
    pub corpus: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, required_unless_present = "layerwise")]
    pub checkpoint: Option<PathBuf>,
    /// Near-zero proportions with this threshold.
    #[arg(long)]
    pub near_zero: Option<f64>,
    /// Emergent sparsity with this threshold.
    #[arg(long)]
    pub emergent_sparsity: Option<f64>,
    #[arg(long)]
    pub trainable_ratio: bool,
    /// Aggregates layer-range rows from the sweep tables under this directory.
    #[arg(long)]
    pub layerwise: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    /// TOML file with the bound inputs; flags override its values.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Suppressed fraction; sets z = round(p·d).
    #[arg(long, conflicts_with = "z")]
    pub p: Option<f64>,
    #[arg(long)]
    pub z: Option<u64>,
    #[arg(long)]
    pub d: Option<u64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub loss_fft: Option<f64>,
    #[arg(long)]
    pub loss_mft: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// init_temperature, learning_rate, data_fraction or layer_range.
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated values for learning_rate / data_fraction.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub inits: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub temperatures: Vec<f64>,
    #[arg(long)]
    pub layer_width: Option<usize>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Context::new(&cli.global)?;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&ctx),
        Command::Finetune(a) => cmd_finetune(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Analyze(a) => cmd_analyze(&ctx, a),
        Command::Bound(a) => cmd_bound(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
    }
}

struct Context {
    spec: RunSpec,
    spec_dir: PathBuf,
    out: PathBuf,
    threads: usize,
}

impl Context {
    fn new(g: &GlobalArgs) -> Result<Self> {
        let (mut spec, spec_dir) = match &g.spec {
            Some(p) => (
                RunSpec::load(p)?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (RunSpec::default(), PathBuf::from(".")),
        };
        if let Some(s) = g.seed {
            spec.seed = Some(s);
        }
        if g.threads == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        Ok(Context {
            spec,
            spec_dir,
            out: g.out.clone(),
            threads: g.threads,
        })
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(&self.out)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.out_dir()?.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn corpus(&self, source: Option<&str>, field: &str) -> Result<crate::corpus::Corpus> {
        let src = source.ok_or_else(|| Error::config(field, "no corpus given"))?;
        load_corpus(src, self.spec.window(), &self.spec_dir)
    }

    fn base(&self, flag: Option<&PathBuf>) -> Result<Checkpoint> {
        let path = flag
            .cloned()
            .or_else(|| self.spec.finetune.base.as_ref().map(|p| self.spec_dir.join(p)))
            .ok_or_else(|| Error::config("base", "no base checkpoint given"))?;
        let base = Checkpoint::load(&path)?;
        let want = self.spec.model_config()?;
        let diff = config_differences(&want, &base.model.config);
        if !diff.is_empty() {
            return Err(Error::config(
                "model",
                format!("base checkpoint does not match the spec: {}", diff.join("; ")),
            ));
        }
        Ok(base)
    }
}

fn cmd_pretrain(ctx: &Context) -> Result<()> {
    let cfg = ctx.spec.pretrain_config()?;
    let model = ctx.spec.model_config()?;
    let corpus = ctx.corpus(ctx.spec.data.pretrain_corpus.as_deref(), "data.pretrain_corpus")?;
    ctx.out_dir()?;
    ctx.spec.echo_resolved(&ctx.out)?;
    let outcome = training::pretrain_toy(&model, &cfg, &corpus, ctx.spec.seed())?;
    let path = ctx.out.join(BASE_FILE);
    let sum = outcome.checkpoint.save(&path)?;
    ctx.write(METRICS_FILE, &metrics_table(&outcome.metrics))?;
    let eval = training::evaluate(&outcome.checkpoint, &corpus)?;
    println!("checkpoint\t{}", path.display());
    println!("checksum\t{sum:016x}");
    println!("eval_loss\t{:.6}", eval.loss);
    Ok(())
}

/// Reads `p` from an emergent-sparsity report written by `analyze`.
fn read_sparsity_report(path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .find_map(|l| l.strip_prefix("p\t"))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Spec {
            path: path.to_path_buf(),
            message: "no `p` line in sparsity report".into(),
        })
}

fn cmd_finetune(ctx: &Context, a: &FinetuneArgs) -> Result<()> {
    let mut spec = ctx.spec.clone();
    let k = match (&a.sparsity, &a.sparsity_from) {
        (Some(k), _) => Some(*k),
        (None, Some(p)) => Some(read_sparsity_report(p)?),
        _ => None,
    };
    if let Some(k) = k {
        if spec.finetune.method != Some(Method::Hmft) {
            return Err(Error::config("sparsity", "only used by method hmft"));
        }
        spec.finetune.sparsity = Some(k);
    }
    let cfg = spec.finetune_config()?;
    let base = ctx.base(a.base.as_ref())?;
    let corpus = ctx.corpus(spec.data.finetune_corpus.as_deref(), "data.finetune_corpus")?;
    ctx.out_dir()?;
    spec.echo_resolved(&ctx.out)?;
    if let Some(MaskSpec::Hard { sparsity }) = cfg.mask_spec {
        println!("sparsity\t{sparsity}");
    }
    let mut outcome = training::finetune(&base, &cfg, &corpus)?;
    if let Some(fault) = &a.inject_fault {
        inject_fault(&mut outcome.checkpoint, fault)?;
    }
    if cfg.method != Method::Fft {
        training::verify_frozen(&base.model.frozen_hashes(), &outcome.checkpoint.model)?;
    }
    let path = ctx.out.join(ADAPTED_FILE);
    let sum = outcome.checkpoint.save(&path)?;
    ctx.write(METRICS_FILE, &metrics_table(&outcome.metrics))?;
    let eval = training::evaluate(&outcome.checkpoint, &corpus)?;
    println!("checkpoint\t{}", path.display());
    println!("checksum\t{sum:016x}");
    println!("best_step\t{}", outcome.best_step);
    println!("eval_loss\t{:.6}", eval.loss);
    Ok(())
}

/// Perturbs one frozen tensor; used to exercise the frozen-weight check.
fn inject_fault(ck: &mut Checkpoint, what: &str) -> Result<()> {
    if what != "frozen" {
        return Err(Error::config("inject_fault", format!("unknown fault `{what}`")));
    }
    let mut done = false;
    ck.model.visit_mut(&mut |_, role, t| {
        if !done && role == crate::model::ParamRole::Base {
            t.data_mut()[0] += 1.0;
            done = true;
        }
    });
    Ok(())
}

fn cmd_eval(ctx: &Context, a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let source = a.corpus.as_deref().or(ctx.spec.data.finetune_corpus.as_deref());
    let window = ck
        .train_config
        .as_ref()
        .map_or(ctx.spec.window(), |c| c.context_length);
    let src = source.ok_or_else(|| Error::config("corpus", "no corpus given"))?;
    let corpus = load_corpus(src, window, &ctx.spec_dir)?;
    let r = training::evaluate(&ck, &corpus)?;
    let text = format!("loss\t{:.6}\nperplexity\t{:.6}\n", r.loss, r.perplexity);
    print!("{text}");
    ctx.write("eval.tsv", &text)?;
    Ok(())
}

fn cmd_analyze(ctx: &Context, a: &AnalyzeArgs) -> Result<()> {
    let mut did = false;
    if let Some(dir) = &a.layerwise {
        let tables = collect_sweep_tables(dir)?;
        let rows = analysis::aggregate_layerwise(&tables)?;
        let text = analysis::layerwise_table_text(&rows);
        print!("{text}");
        ctx.write("layerwise.tsv", &text)?;
        did = true;
    }
    let ck = match &a.checkpoint {
        Some(p) => Checkpoint::load(p)?,
        None if did => return Ok(()),
        None => return Err(Error::config("checkpoint", "required")),
    };
    if let Some(eps) = a.near_zero {
        let r = analysis::near_zero_report(&ck.model, eps)?;
        let text = r.to_table();
        print!("{text}");
        ctx.write("near_zero.tsv", &text)?;
        ctx.write("near_zero.csv", &r.to_csv())?;
        did = true;
    }
    if let Some(eps) = a.emergent_sparsity {
        let s = training::extract_emergent_sparsity(&ck.model, eps)?;
        let mut text = format!("epsilon\t{}\np\t{}\n", s.epsilon, s.p);
        for (name, p) in &s.per_layer {
            text.push_str(&format!("{name}\t{p}\n"));
        }
        print!("{text}");
        ctx.write("emergent_sparsity.tsv", &text)?;
        did = true;
    }
    if a.trainable_ratio {
        let regime = ck.regime;
        if regime == TrainRegime::Frozen {
            return Err(Error::invalid("a frozen checkpoint has no trainable parameters"));
        }
        let c = ck.model.count_trainable(regime);
        let label = ck.method.map_or("-", Method::name);
        let text = format!(
            "method\ttrainable\ttotal\tratio\n{label}\t{}\t{}\t{:.2}\n",
            c.trainable,
            c.total,
            c.ratio()
        );
        print!("{text}");
        ctx.write("trainable_ratio.tsv", &text)?;
        did = true;
    }
    if !did {
        return Err(Error::config(
            "analyze",
            "choose --near-zero, --emergent-sparsity, --trainable-ratio or --layerwise",
        ));
    }
    Ok(())
}

/// Every `sweep.tsv` under `dir`, in sorted path order.
fn collect_sweep_tables(dir: &Path) -> Result<Vec<String>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == SWEEP_FILE) {
                found.push(p);
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::Spec {
            path: dir.to_path_buf(),
            message: format!("no {SWEEP_FILE} found"),
        });
    }
    found
        .iter()
        .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
        .collect()
}

fn cmd_bound(ctx: &Context, a: &BoundArgs) -> Result<()> {
    let mut inputs = match &a.input {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<BoundInputs>(&text).map_err(|e| Error::Spec {
                path: p.clone(),
                message: e.to_string(),
            })?
        }
        None => BoundInputs {
            b: 8.0,
            d: 1_000_000,
            z: 0,
            n: None,
            delta: None,
            train_loss_fft: None,
            train_loss_mft: None,
        },
    };
    if let Some(b) = a.b {
        inputs.b = b;
    }
    if let Some(d) = a.d {
        inputs.d = d;
    }
    if let Some(z) = a.z {
        inputs.z = z;
    }
    if let Some(p) = a.p {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config("p", format!("{p} is outside [0, 1]")));
        }
        inputs.z = (p * inputs.d as f64).round() as u64;
    }
    inputs.n = a.n.or(inputs.n);
    inputs.delta = a.delta.or(inputs.delta);
    inputs.train_loss_fft = a.loss_fft.or(inputs.train_loss_fft);
    inputs.train_loss_mft = a.loss_mft.or(inputs.train_loss_mft);
    let report = analysis::bound_comparison(&inputs)?;
    let text = report.to_text();
    print!("{text}");
    ctx.write("bound.txt", &text)?;
    Ok(())
}

fn cmd_sweep(ctx: &Context, a: &SweepArgs) -> Result<()> {
    let mut section = ctx.spec.sweep.clone();
    if let Some(axis) = &a.axis {
        let axis: SweepAxis = axis.parse()?;
        section = Some(crate::runspec::SweepSection {
            axis,
            inits: a.inits.clone(),
            temperatures: a.temperatures.clone(),
            values: a.values.clone(),
            layer_width: a.layer_width,
        });
    }
    let section = section.ok_or_else(|| Error::config("sweep", "no axis given"))?;
    let mut spec = ctx.spec.clone();
    spec.sweep = Some(section.clone());
    let cfg = spec.finetune_config()?;
    let model = spec.model_config()?;
    let grid: Vec<GridPoint> = section.grid(model.num_layers)?;
    let base = ctx.base(a.base.as_ref())?;
    let corpus = ctx.corpus(spec.data.finetune_corpus.as_deref(), "data.finetune_corpus")?;
    ctx.out_dir()?;
    spec.echo_resolved(&ctx.out)?;
    let table = sweep::sweep(&base, &cfg, &grid, &corpus, ctx.threads)?;
    let cells = ctx.out.join("cells");
    std::fs::create_dir_all(&cells).map_err(|e| Error::io(&cells, e))?;
    for (i, c) in table.cells.iter().enumerate() {
        if let Ok(s) = &c.result {
            s.outcome.checkpoint.save(&cells.join(format!("cell_{i:03}.mftc")))?;
        }
    }
    let text = table.to_tsv();
    print!("{text}");
    ctx.write(SWEEP_FILE, &text)?;
    if table.succeeded() == 0 {
        return Err(Error::TrainingAborted {
            step: 0,
            reason: "every sweep cell failed".into(),
        });
    }
    Ok(())
}
