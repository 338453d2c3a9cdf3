//! `stpt`: generate the synthetic corpus, run the three training stages,
//! evaluate checkpoints and probe gradient similarity.
//!
//! Log verbosity is read from `STPT_LOG` (`error`, `warn`, `info`, `debug`;
//! default `info`).

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use stpt::analysis;
use stpt::config::RunConfig;
use stpt::data::{gen_corpus, Corpus, Pool};
use stpt::eval;
use stpt::model::{ArchitectureVariant, StptModel};
use stpt::tasks::SslLoss;
use stpt::train::{
    average_checkpoints, run_stage1_t2t, run_stage2_joint, run_stage3_finetune, Checkpoint, StageOutput, LOG_HEADER,
};

const LOG_ENV: &str = "STPT_LOG";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const RUN_LOG: &str = "run.log";
const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "stpt", version, about = "Joint speech-text pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into --out.
    GenData(Common),
    /// Stage 1: text-to-text pre-training.
    PretrainT2t(StageArgs),
    /// Stage 2: joint pre-training on all four subtasks.
    PretrainJoint(StageArgs),
    /// Stage 3: fine-tuning on text-to-text and speech-to-text.
    Finetune(StageArgs),
    /// Decode held-out splits and score them.
    Eval(EvalArgs),
    /// Gradient-similarity probe of a checkpoint.
    GradSim(ProbeArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply to missing keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Corpus directory, overriding `data_dir`.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Ablations; may be repeated.
    #[arg(long, value_enum)]
    ablate: Vec<Ablate>,
    /// Self-supervised objective.
    #[arg(long, value_enum)]
    loss: Option<Loss>,
    /// Encoder wiring.
    #[arg(long, value_enum)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to start from (a fresh initialization if omitted; stage 1
    /// only).
    #[arg(long, value_name = "PATH")]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate; repeat to evaluate their parameter average.
    #[arg(long = "checkpoint", value_name = "PATH", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Splits to decode.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["dev", "test"])]
    split: Vec<Split>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablate {
    SkipT2tPt,
    DropS2t,
    DropJointPt,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Kl,
    Contrastive,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Fse,
    Pse,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Dev,
    Test,
}

impl Split {
    fn pool(self) -> Pool {
        match self {
            Split::Dev => Pool::Dev,
            Split::Test => Pool::Test,
        }
    }
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse(&text).with_context(|| format!("invalid config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.data {
        cfg.data_dir = dir.clone();
    }
    if let Some(v) = common.variant {
        cfg.model.variant = match v {
            Variant::Fse => ArchitectureVariant::Fse,
            Variant::Pse => ArchitectureVariant::Pse,
        };
    }
    if let Some(l) = common.loss {
        cfg.train.ssl_loss = match l {
            Loss::Kl => SslLoss::Kl,
            Loss::Contrastive => SslLoss::Contrastive,
        };
    }
    for a in &common.ablate {
        match a {
            Ablate::SkipT2tPt => cfg.train.ablation.skip_t2t_pretrain = true,
            Ablate::DropS2t => cfg.train.ablation.drop_s2t = true,
            Ablate::DropJointPt => cfg.train.ablation.drop_joint_pretrain = true,
        }
    }
    let cfg = cfg.normalize()?;
    log::debug!("normalized configuration:\n{}", cfg.to_toml()?);
    Ok(cfg)
}

/// Adds the normalized run configuration under `config`.
fn with_config(mut value: serde_json::Value, cfg: &RunConfig) -> Result<serde_json::Value> {
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("config".into(), serde_json::to_value(cfg.to_table()?)?);
    }
    Ok(value)
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = Corpus::read(&cfg.data_dir)
        .with_context(|| format!("reading corpus from {} (run gen-data first)", cfg.data_dir.display()))?;
    if corpus.config != cfg.data || corpus.seed != cfg.data_seed() {
        bail!(
            "corpus in {} was generated from a different data section or seed; regenerate it with gen-data",
            cfg.data_dir.display()
        );
    }
    Ok(corpus)
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ck.model.config() != &cfg.model {
        bail!(
            "checkpoint {} was trained with a different model section (variant {}, configured {})",
            path.display(),
            ck.model.config().variant,
            cfg.model.variant
        );
    }
    Ok(ck)
}

/// Appends to `run.log`; a new log starts with the header and the run
/// configuration as a `#config` comment.
fn append_log(out: &Path, cfg: &RunConfig, lines: &[String]) -> Result<()> {
    let path = out.join(RUN_LOG);
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{LOG_HEADER}")?;
        writeln!(f, "#config\t{}", serde_json::to_string(&cfg.to_table()?)?)?;
    }
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = run_config(common)?;
    let corpus = gen_corpus(&cfg.data, cfg.layout(), cfg.data_seed())?;
    corpus.write(&common.out)?;
    prepare_out(&common.out, &cfg)?;
    log::info!(
        "wrote corpus to {}: {} unlabeled, {} supervised, {} text, {} dev, {} test",
        common.out.display(),
        corpus.pool(Pool::Unlabeled).len(),
        corpus.pool(Pool::Supervised).len(),
        corpus.pool(Pool::Text).len(),
        corpus.pool(Pool::Dev).len(),
        corpus.pool(Pool::Test).len()
    );
    Ok(())
}

type StageFn = fn(&stpt::train::TrainConfig, &Corpus, Checkpoint) -> stpt::Result<StageOutput>;

fn stage(args: &StageArgs, run: StageFn, fresh_allowed: bool) -> Result<()> {
    let cfg = run_config(&args.common)?;
    let corpus = load_corpus(&cfg)?;
    let init = match &args.init {
        Some(p) => load_checkpoint(p, &cfg)?,
        None if fresh_allowed => Checkpoint::init(StptModel::new(cfg.model.clone(), cfg.init_seed())?),
        None => bail!("--init is required for this stage"),
    };
    let init = init.with_run(Some(cfg.to_table()?));
    let out = &args.common.out;
    prepare_out(out, &cfg)?;
    let result = run(&cfg.train, &corpus, init)?;
    result.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    append_log(out, &cfg, &result.log.iter().map(|r| r.to_tsv()).collect::<Vec<_>>())?;
    log::info!(
        "{} updates; checkpoint written to {}",
        result.log.len(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn evaluate(args: &EvalArgs) -> Result<()> {
    let cfg = run_config(&args.common)?;
    let corpus = load_corpus(&cfg)?;
    let cks = args
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let ck = if cks.len() == 1 {
        cks.into_iter().next().unwrap()
    } else {
        log::info!("averaging {} checkpoints", cks.len());
        average_checkpoints(&cks)?
    };
    let pools: Vec<Pool> = args.split.iter().map(|s| s.pool()).collect();
    let report = eval::evaluate(&ck.model, &corpus, &pools, &cfg.eval)?;
    let out = &args.common.out;
    prepare_out(out, &cfg)?;
    let json = serde_json::to_string_pretty(&with_config(serde_json::to_value(&report)?, &cfg)?)?;
    fs::write(out.join("eval.json"), format!("{json}\n"))?;
    append_log(out, &cfg, &[format!("#eval\t{}", serde_json::to_string(&report)?)])?;
    for (split, m) in &report.splits {
        log::info!(
            "{split}: TER {:.4} WER {:.4} BLEU {:.2} ({} samples, {} truncated)",
            m.token_error_rate,
            m.word_error_rate,
            m.bleu,
            m.n_samples,
            m.truncated
        );
    }
    println!("{json}");
    Ok(())
}

fn grad_sim(args: &ProbeArgs) -> Result<()> {
    let cfg = run_config(&args.common)?;
    let corpus = load_corpus(&cfg)?;
    let ck = load_checkpoint(&args.checkpoint, &cfg)?;
    let id = args.checkpoint.display().to_string();
    let report = analysis::probe(&id, &ck.model, &corpus, &cfg.probe, &cfg.train, cfg.probe_seed())?;
    prepare_out(&args.common.out, &cfg)?;
    let files = analysis::export_report(&report, &args.common.out)?;
    let summary = args.common.out.join("summary.json");
    let value = serde_json::from_str(&fs::read_to_string(&summary)?)?;
    fs::write(&summary, format!("{}\n", serde_json::to_string_pretty(&with_config(value, &cfg)?)?))?;
    if report.degenerate {
        log::warn!("every layer group is degenerate (fewer than two usable gradients)");
    }
    log::info!("wrote {} files to {}", files.len(), args.common.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::PretrainT2t(a) => stage(a, run_stage1_t2t, true),
        Command::PretrainJoint(a) => stage(a, run_stage2_joint, false),
        Command::Finetune(a) => stage(a, run_stage3_finetune, false),
        Command::Eval(a) => evaluate(a),
        Command::GradSim(a) => grad_sim(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
