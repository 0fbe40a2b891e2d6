use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sltrain::harness::{
    analyze_model, evaluate_checkpoint, finetune_model, ingest, restore, run_ablation, synthetic_text, AblateConfig,
    Checkpoint, CorpusFormat, DataSplit, EstimateConfig, TrainConfig, Trainer, VERSION,
};
use sltrain::model::Model;
use sltrain::optim::Adam;
use sltrain::{Error, Result};

#[derive(Parser)]
#[command(name = "sltrain", version = VERSION, about = "Sparse plus low-rank language model pretraining toolkit")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the initialization and batch-order seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics and the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Auto,
    Bytes,
    Tokens,
}

impl From<Format> for CorpusFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Auto => CorpusFormat::Auto,
            Format::Bytes => CorpusFormat::Bytes,
            Format::Tokens => CorpusFormat::Tokens,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model.
    Train(RunArgs),
    /// Fine-tune adapters on top of a pretrained checkpoint.
    Finetune(RunArgs),
    /// Validation perplexity of a checkpoint.
    Eval {
        /// Training config; evaluates its checkpoint on its validation split.
        #[arg(long, required_unless_present = "corpus")]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate over this whole corpus instead.
        #[arg(long, conflicts_with = "config", requires = "checkpoint")]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "auto")]
        format: Format,
    },
    /// Print a training memory table.
    EstimateMem {
        #[arg(long)]
        config: PathBuf,
        /// Also write memory.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spectra and residual distributions of checkpoint projections.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Projection name glob, e.g. `blocks.*.attn.q`; repeatable.
        #[arg(long = "select")]
        select: Vec<String>,
        /// Rank of the approximation removed before the residual distribution.
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain dense, then compare residual pruning against sparse training.
    Ablate(RunArgs),
    /// Write a synthetic text corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads a training config and applies command-line overrides.
fn load_train(args: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_toml(&read(&args.config)?)?;
    cfg.resolve_paths(&base_dir(&args.config));
    apply_overrides(&mut cfg, args.seed, args.out.as_deref());
    Ok(cfg)
}

fn apply_overrides(cfg: &mut TrainConfig, seed: Option<u64>, out: Option<&Path>) {
    if let Some(s) = seed {
        cfg.set_seed(s);
        if let Some(f) = &mut cfg.finetune {
            f.seed = s;
        }
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o.to_path_buf());
        if cfg.checkpoint.is_none() {
            cfg.checkpoint = Some(o.join("checkpoint.bin"));
        }
    }
}

fn print_counts(model: &Model) {
    let counts: Vec<String> = model.count_by_kind().iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("mode {} trainable {} ({})", model.config().mode.as_str(), model.trainable_count(), counts.join(" "));
}

fn train_loop(mut trainer: Trainer) -> Result<()> {
    print_counts(trainer.model());
    let ppl = trainer.run()?;
    let (loss, _) = trainer.evaluate()?;
    println!("step {} val_loss {loss} ppl {ppl}", trainer.global_step());
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = load_train(args)?;
    let data = DataSplit::load(&cfg)?;
    train_loop(Trainer::new(cfg, data)?)
}

fn cmd_finetune(args: &RunArgs) -> Result<()> {
    let mut cfg = load_train(args)?;
    let model = finetune_model(&cfg)?;
    cfg.model = model.config().clone();
    cfg.freeze.embedding = true;
    cfg.freeze.norms = true;
    cfg.freeze.head = true;
    let data = DataSplit::load(&cfg)?;
    let opt = Adam::new(cfg.optim);
    train_loop(Trainer::from_state(cfg, model, opt, data)?)
}

fn cmd_eval(config: Option<&Path>, checkpoint: Option<&Path>, corpus: Option<&Path>, format: Format) -> Result<()> {
    if let Some(c) = corpus {
        let ckpt = checkpoint.expect("clap requires --checkpoint with --corpus");
        let data = ingest(c, format.into())?;
        let ppl = evaluate_checkpoint(ckpt, &data.tokens, data.vocab)?;
        println!("tokens {} ppl {ppl}", data.tokens.len());
        return Ok(());
    }
    let config = config.expect("clap requires --config without --corpus");
    let mut cfg = TrainConfig::from_toml(&read(config)?)?;
    cfg.resolve_paths(&base_dir(config));
    let path = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| Error::Config("no checkpoint given and none in config".into()))?;
    let (model, _, _) = restore(&Checkpoint::load(&path)?)?;
    let data = DataSplit::load(&cfg)?;
    let v = &data.val;
    let stream = match cfg.eval_max_tokens {
        Some(n) if n >= 2 && n < v.len() => &v[..n],
        _ => &v[..],
    };
    if data.vocab > model.config().vocab {
        return Err(Error::Config(format!(
            "corpus vocab {} exceeds model vocab {}",
            data.vocab,
            model.config().vocab
        )));
    }
    let (sum, count) = model.stream_loss(stream)?;
    let loss = sum / count as f64;
    println!("val_loss {loss} ppl {}", loss.exp());
    Ok(())
}

fn cmd_estimate(config: &Path, out: Option<&Path>) -> Result<()> {
    let table = EstimateConfig::from_toml(&read(config)?)?.table()?;
    print!("{}", table.text());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        let p = dir.join("memory.csv");
        std::fs::write(&p, table.csv()).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn cmd_analyze(checkpoint: &Path, select: &[String], rank: Option<usize>, out: &Path) -> Result<()> {
    let (model, _, _) = restore(&Checkpoint::load(checkpoint)?)?;
    let rank = rank.unwrap_or(model.config().rank);
    let report = analyze_model(&model, select, rank)?;
    report.write(out)?;
    println!("analyzed {} matrices into {}", report.spectra.len(), out.display());
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let mut cfg = AblateConfig::from_toml(&read(&args.config)?)?;
    cfg.pretrain.resolve_paths(&base_dir(&args.config));
    let pre_out = args.out.as_ref().map(|o| o.join("pretrain"));
    apply_overrides(&mut cfg.pretrain, args.seed, pre_out.as_deref());
    let data = DataSplit::load(&cfg.pretrain)?;
    let (_, report) = run_ablation(&cfg, &data)?;
    print!("{}", report.text());
    if let Some(dir) = &args.out {
        let p = dir.join("ablate.csv");
        std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        std::fs::write(&p, report.csv()).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    }
    if !report.ordering_holds() {
        eprintln!("warning: pruning/training ordering does not hold for this run");
    }
    Ok(())
}

fn cmd_gen_corpus(out: &Path, bytes: usize, seed: u64) -> Result<()> {
    if bytes == 0 {
        return Err(Error::InvalidArgument("--bytes must be positive".into()));
    }
    std::fs::write(out, synthetic_text(bytes, seed)).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Eval {
            config,
            checkpoint,
            corpus,
            format,
        } => cmd_eval(config.as_deref(), checkpoint.as_deref(), corpus.as_deref(), format),
        Command::EstimateMem { config, out } => cmd_estimate(&config, out.as_deref()),
        Command::Analyze {
            checkpoint,
            select,
            rank,
            out,
        } => cmd_analyze(&checkpoint, &select, rank, &out),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::GenCorpus { out, bytes, seed } => cmd_gen_corpus(&out, bytes, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NumericalFailure { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
