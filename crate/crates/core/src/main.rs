use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use retedit::config::Config;
use retedit::pipeline::{
    stage_build_index, stage_complete, stage_evaluate, stage_ingest, stage_report, stage_synth,
    stage_train_editor, stage_train_retriever, PipelineError,
};

#[derive(Parser)]
#[command(name = "retedit", version, about = "Retrieve-and-edit sequence predictor")]
struct Cli {
    /// Path to a `key = value` configuration file (`#` starts a comment).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set kappa=300`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// If set, editor training also reports validation loss (no early stopping).
    #[arg(long, global = true, value_name = "N")]
    dev_eval_every: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus into the data directory.
    Synth {
        /// Write the raw corpus here instead of `<data_dir>/raw.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter, deduplicate, and split the raw corpus; build the vocabulary.
    Ingest {
        /// Read this raw corpus instead of `<data_dir>/raw.jsonl`.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Train the retrieval encoder-decoder.
    TrainRetriever,
    /// Embed the training set and persist the search index store.
    BuildIndex,
    /// Train the editor, or with `--mode seq2seq` the no-retrieval baseline.
    TrainEditor {
        #[arg(long, value_enum, default_value_t = Mode::Edit)]
        mode: Mode,
    },
    /// Score every trained system on a split and write the report files.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: String,
        /// Proceed even if artifacts were built from different training data.
        #[arg(long)]
        force: bool,
    },
    /// Complete one input record and print the top candidates.
    Complete {
        #[arg(long, default_value = "test")]
        split: String,
        /// Zero-based record number within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        /// Exclude the record's own entry from retrieval.
        #[arg(long)]
        train_mode: bool,
    },
    /// Re-render the last written evaluation report as a text table.
    Report,
}

#[derive(Copy, Clone, ValueEnum)]
enum Mode {
    Edit,
    Seq2seq,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(cli: &Cli) -> Result<Config, PipelineError> {
    let usage = |e: retedit::config::ConfigError| PipelineError::BadArgument(e.to_string());
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path).map_err(usage)?,
        None => Config::default(),
    };
    let pairs: Vec<(String, String)> = cli
        .overrides
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| {
                    PipelineError::BadArgument(format!("override `{s}` is not KEY=VALUE"))
                })
        })
        .collect::<Result<_, _>>()?;
    cfg.apply_overrides(&pairs).map_err(usage)?;
    if let Some(n) = cli.dev_eval_every {
        cfg.dev_eval_every = n;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn log_training(stage: &str, log: &retedit::embednet::TrainLog) {
    if let (Some(first), Some(last)) = (log.0.first(), log.0.last()) {
        eprintln!(
            "[{stage}] {} iterations, loss {:.4} -> {:.4} ({:.1}s)",
            log.0.len(),
            first.loss,
            last.loss,
            last.wallclock_ms as f64 / 1000.0
        );
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::Synth { out } => {
            let n = stage_synth(&cfg, out.as_deref())?;
            eprintln!(
                "[synth] task={} templates={} instances={} seed={} -> {n} examples",
                cfg.task, cfg.template_count, cfg.instances_per_template, cfg.seed_data
            );
        }
        Cmd::Ingest { raw } => {
            let c = stage_ingest(&cfg, raw.as_deref())?;
            println!("loaded {}", c.loaded);
            println!("length-filtered {}", c.after_length_filter);
            println!("deduplicated {}", c.after_dedup);
            println!("train {}", c.train);
            println!("validation {}", c.validation);
            println!("test {}", c.test);
        }
        Cmd::TrainRetriever => {
            let log = stage_train_retriever(&cfg)?;
            log_training("train-retriever", &log);
        }
        Cmd::BuildIndex => {
            let n = stage_build_index(&cfg)?;
            eprintln!("[build-index] embedded {n} training examples");
        }
        Cmd::TrainEditor { mode } => {
            let seq2seq = matches!(mode, Mode::Seq2seq);
            let (log, dev_nll) = stage_train_editor(&cfg, seq2seq)?;
            let stage = if seq2seq { "train-seq2seq" } else { "train-editor" };
            log_training(stage, &log);
            if let Some(nll) = dev_nll {
                eprintln!("[{stage}] validation nll {nll:.4}");
            }
        }
        Cmd::Evaluate { split, force } => {
            let out = stage_evaluate(&cfg, split, *force)?;
            eprintln!(
                "[evaluate] split={split} wrote {} and {}",
                out.json_path.display(),
                out.csv_path.display()
            );
            print!("{}", out.text);
        }
        Cmd::Complete {
            split,
            index,
            topk,
            train_mode,
        } => {
            let c = stage_complete(&cfg, split, *index, *topk, *train_mode)?;
            println!(
                "input {} retrieved {} distance {:.6}",
                c.input_id, c.retrieved_id, c.distance
            );
            for (rank, (tokens, logp)) in c.candidates.iter().enumerate() {
                println!("{} {:.4} {}", rank + 1, logp, tokens.join(" "));
            }
        }
        Cmd::Report => {
            print!("{}", stage_report(&cfg)?);
        }
    }
    Ok(())
}
