//! Subcommands of the `slayr` binary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slayr_core::conditioning::{ConditionRequest, DEFAULT_LAMBDA};
use slayr_core::dataset::{read_scenes, write_scenes, Scene};
use slayr_core::embedding::{EmbeddingTable, PcaProjector, Vocabulary};
use slayr_core::flow::{
    derive_seed, Activation, Checkpoint, Optimizer, Schedule, TrainConfig, VelocityNetConfig, DEFAULT_STEPS,
};
use slayr_core::metrics::{evaluate, group_scenes, EvalConfig, VarianceMode};
use slayr_core::pipeline;
use slayr_core::synth::{generate_dataset, synthetic_table, SceneGrammar};

use crate::server::{serve, AppState, ServerConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] slayr_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "slayr", version, about = "Scene-layout generation with rectified flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample scenes from a grammar.
    Synth(SynthArgs),
    /// Fit a PCA projector to an embedding table.
    Pca(PcaArgs),
    /// Train a velocity network and write a checkpoint.
    Train(TrainArgs),
    /// Generate layouts from a checkpoint.
    Sample(SampleArgs),
    /// Compare generated layouts with a reference set.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Nearest labels of a reduced embedding.
    Decode(DecodeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Grammar file, or one of the bundled names room, street, beach. Repeatable.
    #[arg(long, required = true)]
    pub grammar: Vec<String>,
    /// Scenes per grammar.
    #[arg(long)]
    pub n: usize,
    /// Defaults to the first grammar's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a synthetic embedding table covering every label and category.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActivationArg {
    Silu,
    Gelu,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    /// Fitted projector; fitted from the table with `--d` when omitted.
    #[arg(long)]
    pub projector: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    /// Tokens per layout.
    #[arg(long, default_value_t = slayr_core::layout::DEFAULT_TOKENS)]
    pub j: usize,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.0005)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    pub optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Constant)]
    pub schedule: ScheduleArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines step log; stdout when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Required unless `--partial` names one.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "T", default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Conditioned-generation request (JSON). Its seed and T are replaced by
    /// the command-line values.
    #[arg(long)]
    pub partial: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VarianceArg {
    PerLayout,
    Pooled,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub cv_seed: u64,
    #[arg(long, value_enum, default_value_t = VarianceArg::PerLayout)]
    pub variance: VarianceArg,
    #[arg(long, default_value_t = slayr_core::layout::DEFAULT_TOKENS)]
    pub max_count: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, env = "SLAYR_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long = "T", default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 4)]
    pub max_concurrent: usize,
    /// Allowed CORS origin; any origin when omitted. Repeatable.
    #[arg(long)]
    pub cors_origin: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Checkpoint holding the vocabulary; alternatively `--table` and `--projector`.
    #[arg(long, conflicts_with_all = ["table", "projector"])]
    pub ckpt: Option<PathBuf>,
    #[arg(long, requires = "projector")]
    pub table: Option<PathBuf>,
    #[arg(long, requires = "table")]
    pub projector: Option<PathBuf>,
    /// Comma-separated reduced embedding.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub embedding: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

fn output(path: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

/// Serializes everything first so a failure leaves no partial file.
fn write_all(path: &Option<PathBuf>, bytes: &[u8]) -> CliResult<()> {
    let mut w = output(path)?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

fn scenes_bytes(scenes: &[Scene]) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_scenes(&mut buf, scenes)?;
    Ok(buf)
}

fn load_grammar(spec: &str) -> CliResult<SceneGrammar> {
    if Path::new(spec).exists() {
        Ok(SceneGrammar::load(spec)?)
    } else {
        Ok(SceneGrammar::bundled(spec)?)
    }
}

fn synth(a: &SynthArgs) -> CliResult<()> {
    let grammars = a.grammar.iter().map(|g| load_grammar(g)).collect::<CliResult<Vec<_>>>()?;
    let seed = a.seed.unwrap_or(grammars[0].seed);
    let mut scenes = Vec::new();
    for (i, g) in grammars.iter().enumerate() {
        scenes.extend(generate_dataset(g, a.n, derive_seed(seed, i * a.n))?);
    }
    if let Some(path) = &a.table {
        let labels: Vec<String> = grammars.iter().flat_map(|g| g.label_names()).collect();
        let prompts: Vec<String> = grammars.iter().map(|g| g.category.clone()).collect();
        synthetic_table(&labels, &prompts, a.dim, a.rank, seed)?.save(path)?;
    }
    write_all(&a.out, &scenes_bytes(&scenes)?)
}

fn pca(a: &PcaArgs) -> CliResult<()> {
    let table = EmbeddingTable::load(&a.table)?;
    let p = PcaProjector::fit(&table, a.d)?;
    log::info!("explained variance ratio {:.6}", p.explained_variance_ratio);
    p.save(&a.out)?;
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let table = EmbeddingTable::load(&a.table)?;
    let projector = match &a.projector {
        Some(p) => PcaProjector::load(p)?,
        None => PcaProjector::fit(&table, a.d)?,
    };
    let vocab = Vocabulary::new(table, projector)?;
    let mut cfg = match a.preset {
        Preset::Desk => VelocityNetConfig::desk(vocab.d(), a.j, vocab.full_dim()),
        Preset::Full => VelocityNetConfig { d: vocab.d(), j: a.j, ..VelocityNetConfig::full(vocab.full_dim()) },
    };
    cfg.seed = a.seed;
    if let Some(b) = a.blocks {
        cfg.blocks = b;
    }
    if let Some(h) = a.heads {
        cfg.heads = h;
    }
    if let Some(w) = a.width {
        cfg.model_width = w;
    }
    if let Some(act) = a.activation {
        cfg.activation = match act {
            ActivationArg::Silu => Activation::Silu,
            ActivationArg::Gelu => Activation::Gelu,
        };
    }
    let tc = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::Adam,
        },
        schedule: match a.schedule {
            ScheduleArg::Constant => Schedule::Constant,
            ScheduleArg::Cosine => Schedule::Cosine,
        },
    };
    let scenes = read_scenes(&a.data)?;
    let mut log_out = output(&a.log)?;
    let mut log_err = None;
    let ckpt = pipeline::train(&scenes, vocab, cfg, tc, &mut |s| {
        if log_err.is_none() {
            let line = serde_json::to_string(&s)
                .map_err(CliError::from)
                .and_then(|l| writeln!(log_out, "{l}").map_err(CliError::from));
            log_err = line.err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    log_out.flush()?;
    ckpt.save(&a.out)?;
    Ok(())
}

fn sample(a: &SampleArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    if a.steps == 0 {
        return Err(CliError::Invalid("--T must be at least 1".into()));
    }
    let scenes = match &a.partial {
        Some(path) => {
            let mut req: ConditionRequest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            if let Some(p) = &a.prompt {
                req.prompt = p.clone();
            }
            req.steps = Some(a.steps);
            (0..a.n)
                .map(|i| {
                    let mut r = req.clone();
                    r.seed = Some(derive_seed(a.seed, i));
                    ckpt.generate_conditioned(&r, a.steps, a.lambda)
                })
                .collect::<slayr_core::Result<Vec<_>>>()?
        }
        None => {
            let prompt = a.prompt.as_deref().ok_or_else(|| CliError::Invalid("--prompt is required".into()))?;
            ckpt.generate(prompt, a.n, a.seed, a.steps)?
        }
    };
    write_all(&a.out, &scenes_bytes(&scenes)?)
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let generated = group_scenes(&read_scenes(&a.generated)?);
    let reference = group_scenes(&read_scenes(&a.reference)?);
    let cfg = EvalConfig {
        cv_seed: a.cv_seed,
        max_count: a.max_count,
        variance_mode: match a.variance {
            VarianceArg::PerLayout => VarianceMode::PerLayout,
            VarianceArg::Pooled => VarianceMode::Pooled,
        },
        ..EvalConfig::default()
    };
    let report = evaluate(&generated, &reference, &cfg)?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    write_all(&a.report, &json)
}

fn decode(a: &DecodeArgs) -> CliResult<()> {
    let vocab = match (&a.ckpt, &a.table, &a.projector) {
        (Some(c), _, _) => Checkpoint::load(c)?.vocab,
        (None, Some(t), Some(p)) => Vocabulary::new(EmbeddingTable::load(t)?, PcaProjector::load(p)?)?,
        _ => return Err(CliError::Invalid("give --ckpt or both --table and --projector".into())),
    };
    let labels: Vec<serde_json::Value> = vocab
        .nearest(&a.embedding, a.k)?
        .into_iter()
        .map(|(label, similarity)| serde_json::json!({"label": label, "similarity": similarity}))
        .collect();
    let mut json = serde_json::to_vec(&serde_json::json!({ "labels": labels }))?;
    json.push(b'\n');
    write_all(&None, &json)
}

fn serve_cmd(a: &ServeArgs) -> CliResult<()> {
    if a.steps == 0 {
        return Err(CliError::Invalid("--T must be at least 1".into()));
    }
    let bytes = std::fs::read(&a.ckpt)?;
    let config = ServerConfig {
        addr: a.addr.clone(),
        default_steps: a.steps,
        default_lambda: a.lambda,
        max_concurrent: a.max_concurrent,
        cors_origins: a.cors_origin.clone(),
    };
    let state = Arc::new(AppState::from_bytes(&bytes, config)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(state))?;
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Pca(a) => pca(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Decode(a) => decode(a),
    }
}
