use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use grads::baselines::QueryAggregate;
use grads::pipeline::{self, Baseline, Method, RunConfig};
use grads::selector::Strategy;
use grads::tinylm::ExtractMode;

/// Gradient-aware training-data selection.
#[derive(Parser, Debug)]
#[command(name = "grads", version, about)]
struct Cli {
    /// Run configuration (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Gradient extraction mode.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<ExtractMode>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write per-instance gradient records for the training pool.
    Extract,
    /// Select a subset with a gradient strategy.
    Select {
        #[arg(long, value_parser = parse_strategy, default_value = "grads")]
        strategy: Strategy,
        /// Percentage of the pool to keep.
        #[arg(long)]
        fraction: Option<f64>,
        /// Gradient records to select from.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Select a subset with a comparison baseline.
    Baseline {
        #[arg(long, value_parser = parse_baseline)]
        strategy: Baseline,
        #[arg(long)]
        fraction: Option<f64>,
        /// BM25: take the best query instead of the mean.
        #[arg(long)]
        max_query: bool,
    },
    /// Fine-tune a fresh model on a selection (or the whole pool).
    Train {
        #[arg(long)]
        selection: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Base-model loss and accuracy per gradient decile.
    Pilot,
    /// Fine-tune and evaluate every strategy at every fraction.
    Compare {
        #[arg(long, value_parser = parse_method, value_delimiter = ',')]
        strategy: Vec<Method>,
        #[arg(long, value_delimiter = ',')]
        fraction: Vec<f64>,
        #[arg(long)]
        records: Option<PathBuf>,
        /// Use records even if they were made from different data.
        #[arg(long)]
        force: bool,
    },
    /// Write the labelled synthetic corpus.
    Synth,
}

fn parse_mode(s: &str) -> Result<ExtractMode, String> {
    match s {
        "online" => Ok(ExtractMode::Online),
        "frozen" => Ok(ExtractMode::Frozen),
        _ => Err(format!("expected online or frozen, got {s:?}")),
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: grads::Error| e.to_string())
}

fn parse_baseline(s: &str) -> Result<Baseline, String> {
    s.parse().map_err(|e: grads::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: grads::Error| e.to_string())
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = cli.mode {
        cfg.extract.mode = m;
    }
    Ok(cfg)
}

fn fmt_score(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Extract => {
            let (prep, ext) = pipeline::cmd_extract(&cfg)?;
            println!(
                "wrote {} records for {} instances to {}",
                ext.records.len(),
                prep.train.len(),
                cfg.out_dir.join(pipeline::RECORDS_FILE).display()
            );
        }
        Command::Select {
            strategy,
            fraction,
            records,
            force,
        } => {
            cfg.records = records.or(cfg.records);
            cfg.force |= force;
            let pct = fraction.unwrap_or(cfg.fraction);
            cfg.fraction = pct;
            cfg.validate()?;
            let method = Method::Gradient(strategy);
            let sel = pipeline::cmd_select(&cfg, method, pct)?;
            println!(
                "{strategy}@{pct}%: selected {} of {} -> {}",
                sel.len(),
                sel.candidates,
                cfg.out_dir.join(format!("{}.jsonl", pipeline::selection_stem(method, pct))).display()
            );
        }
        Command::Baseline {
            strategy,
            fraction,
            max_query,
        } => {
            if max_query {
                cfg.baseline.bm25.aggregate = QueryAggregate::Max;
            }
            let pct = fraction.unwrap_or(cfg.fraction);
            cfg.fraction = pct;
            cfg.validate()?;
            let method = Method::Baseline(strategy);
            let sel = pipeline::cmd_select(&cfg, method, pct)?;
            println!("{}@{pct}%: selected {} of {}", strategy.name(), sel.len(), sel.candidates);
        }
        Command::Train { selection } => {
            let log = pipeline::cmd_train(&cfg, selection.as_deref())?;
            for e in &log.epochs {
                println!(
                    "epoch {}: loss {:.4} bleu {:.4} rouge_l {:.4} meteor {:.4}",
                    e.epoch, e.train_loss, e.bleu, e.rouge_l, e.meteor
                );
            }
        }
        Command::Eval { model } => {
            let s = pipeline::cmd_eval(&cfg, &model)?;
            println!(
                "bleu {:.4} rouge_l {:.4} meteor {:.4}",
                s.bleu.corpus_score, s.rouge_l.corpus_score, s.meteor.corpus_score
            );
        }
        Command::Pilot => {
            let report = pipeline::cmd_pilot(&cfg)?;
            print!("{}", report.to_csv());
        }
        Command::Compare {
            strategy,
            fraction,
            records,
            force,
        } => {
            if !strategy.is_empty() {
                cfg.strategies = strategy.iter().map(|m| m.name().to_string()).collect();
            }
            if !fraction.is_empty() {
                cfg.fractions = fraction;
            }
            cfg.records = records.or(cfg.records);
            cfg.force |= force;
            cfg.validate()?;
            let report = pipeline::cmd_compare(&cfg)?;
            println!("{:<10} {:>6} {:>6} {:>8} {:>8} {:>8}", "row", "N%", "n", "bleu", "rouge_l", "meteor");
            for r in &report.rows {
                println!(
                    "{:<10} {:>6} {:>6} {:>8} {:>8} {:>8}{}",
                    r.label,
                    r.fraction_percent.map_or_else(|| "-".into(), |f| f.to_string()),
                    r.n_train,
                    fmt_score(r.bleu),
                    fmt_score(r.rouge_l),
                    fmt_score(r.meteor),
                    r.error.as_ref().map_or_else(String::new, |e| format!("  error: {e}"))
                );
            }
        }
        Command::Synth => {
            let path = pipeline::cmd_synth(&cfg)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
