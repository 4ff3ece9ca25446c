//! `bindlab`: generate the benchmark, train fusion variants, evaluate and
//! compare them.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bindlab_core::experiment::{
    cmd_compare, cmd_eval, cmd_gen, cmd_repro, cmd_train, run_gradcheck, validate_data, ExperimentConfig,
    ScorerSource, GRADCHECK_TOLERANCE,
};
use bindlab_core::fusion::Variant;
use bindlab_core::pools::PoolMode;
use bindlab_core::training::LossKind;

const DATA_ENV: &str = "COLA_DATA_DIR";
const DEFAULT_DATA_DIR: &str = "data";
const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Parser, Debug)]
#[command(name = "bindlab", version, about = "Attribute-binding retrieval experiments on a synthetic benchmark")]
struct Cli {
    /// JSON experiment config; missing keys take defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Training loss, overriding the config.
    #[arg(long, global = true, value_name = "bce|nce")]
    loss: Option<LossKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArg {
    /// Benchmark directory. Falls back to the config, then $COLA_DATA_DIR, then ./data.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write scenes, queries, quadruplets, splits and a hashed manifest.
    Gen {
        /// Output directory; defaults to the data directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train one variant; writes a checkpoint, a JSONL log and a run summary.
    Train {
        /// Variant name, e.g. MM_ADAPTER or mm-adapter.
        #[arg(long, value_name = "NAME")]
        variant: Variant,
        #[command(flatten)]
        data: DataArg,
        /// Run directory; defaults to <out_dir>/<VARIANT>.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, `frozen` (pooled cosine) or `oracle`.
    Eval {
        /// Checkpoint file, or a built-in scorer.
        #[arg(long, value_name = "PATH|frozen|oracle")]
        model: String,
        #[command(flatten)]
        data: DataArg,
        /// Report directory; defaults to the checkpoint's directory or <out_dir>/<MODEL>.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Pool whose MAP is printed.
        #[arg(long, default_value = "or", value_name = "or|and|all")]
        pool: PoolMode,
    },
    /// Merge report files (or run directories) into one sorted table.
    Compare {
        #[arg(required = true, value_name = "REPORT")]
        reports: Vec<PathBuf>,
        /// Where compare.md and compare.csv go; defaults to <out_dir>.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the core variants under both losses.
    Gradcheck {
        /// Restrict to these variants.
        #[arg(long, value_name = "NAME")]
        variant: Vec<Variant>,
        /// Bias one variant's analytic gradient (fault injection).
        #[arg(long, hide = true, value_name = "NAME")]
        corrupt: Option<Variant>,
    },
    /// Re-check every benchmark invariant on generated files.
    Validate {
        #[command(flatten)]
        data: DataArg,
    },
    /// gen, train every variant, eval each plus the frozen scorer, compare.
    Repro {
        #[command(flatten)]
        data: DataArg,
        /// Root for every run and the table; data goes to <DIR>/data unless --data is given.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

/// Config file, then flag overrides.
fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(loss) = cli.loss {
        cfg.training.loss = loss;
    }
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn data_dir(flag: &DataArg, cfg: &ExperimentConfig) -> PathBuf {
    flag.data
        .clone()
        .or_else(|| cfg.data_dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

fn out_dir(flag: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Gen { out } => {
            let dir = out.clone().unwrap_or_else(|| data_dir(&DataArg { data: None }, &cfg));
            let manifest = cmd_gen(&cfg, &dir).with_context(|| format!("generating into {}", dir.display()))?;
            for f in &manifest.files {
                println!("{:<18} {:>7} records  {}", f.name, f.records, f.sha256);
            }
            println!("data_hash {}", manifest.data_hash);
        }
        Command::Train { variant, data, out } => {
            let run_dir = out.clone().unwrap_or_else(|| out_dir(&None, &cfg).join(variant.name()));
            let dir = data_dir(data, &cfg);
            let outcome = cmd_train(&cfg, &dir, *variant, &run_dir)
                .with_context(|| format!("training {variant} on {}", dir.display()))?;
            for e in &outcome.history.epochs {
                let loss = e.loss.map_or_else(|| "-".to_string(), |l| format!("{l:.5}"));
                let t2i = e.val_metrics.get("val_multiobj_t2i").copied().unwrap_or(f64::NAN);
                println!("epoch {:>3}  loss {loss}  val t2i {t2i:.2}%", e.epoch);
            }
            println!("wrote {}", run_dir.display());
        }
        Command::Eval { model, data, out, pool } => {
            let source = ScorerSource::parse(model);
            let dest = out.clone().unwrap_or_else(|| match &source {
                ScorerSource::Checkpoint(p) => p.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
                ScorerSource::Frozen => out_dir(&None, &cfg).join("FROZEN"),
                ScorerSource::Oracle => out_dir(&None, &cfg).join("ORACLE"),
            });
            let dir = data_dir(data, &cfg);
            let report = cmd_eval(&cfg, &dir, &source, &dest).with_context(|| format!("evaluating {model}"))?;
            let maps = match pool {
                PoolMode::Or => &report.cola_map,
                PoolMode::And => &report.query_all_map,
                PoolMode::All => &report.overall_map,
            };
            println!(
                "{} {pool} map all {:.4} ({} queries), seen {:.4} ({}), unseen {:.4} ({})",
                report.meta.model,
                maps.all.map,
                maps.all.queries,
                maps.seen.map,
                maps.seen.queries,
                maps.unseen.map,
                maps.unseen.queries
            );
            println!(
                "multi-object t2i {:.2}%  i2t {:.2}%",
                report.multiobj_t2i, report.multiobj_i2t
            );
            println!("wrote {}", dest.display());
        }
        Command::Compare { reports, out } => {
            let dest = out_dir(out, &cfg);
            let table = cmd_compare(&cfg.compare, reports, &dest)?;
            print!("{}", table.to_markdown());
        }
        Command::Gradcheck { variant, corrupt } => {
            let variants = if variant.is_empty() { Variant::CORE.to_vec() } else { variant.clone() };
            let results = run_gradcheck(cfg.seed, &variants, *corrupt)?;
            let mut failed = 0;
            for r in &results {
                println!(
                    "{:<12} {}  max_rel_err {:.3e}  worst {}  {}",
                    r.variant.name(),
                    r.loss.short_name(),
                    r.max_relative_error,
                    r.worst.as_deref().unwrap_or("-"),
                    if r.passed { "PASS" } else { "FAIL" }
                );
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                bail!("{failed} gradient checks exceeded {GRADCHECK_TOLERANCE:e}");
            }
        }
        Command::Validate { data } => {
            let dir = data_dir(data, &cfg);
            let s = validate_data(&dir, &cfg.vocabulary).with_context(|| format!("validating {}", dir.display()))?;
            println!(
                "ok: {} train scenes, {} test scenes, {} queries ({} seen, {} unseen), {} quadruplets",
                s.train_scenes, s.test_scenes, s.queries, s.seen, s.unseen, s.quadruplets
            );
        }
        Command::Repro { data, out } => {
            let dest = out_dir(out, &cfg);
            let dir = data.data.clone().unwrap_or_else(|| dest.join("data"));
            let outcome = cmd_repro(&cfg, &dir, &dest, |line| eprintln!("{line}"))?;
            print!("{}", outcome.table.to_markdown());
            println!("repro finished in {:.1}s", outcome.seconds);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
