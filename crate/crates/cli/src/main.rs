//! Command-line front end: data generation, training, routed inference and
//! evaluation reports.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pacda::checkpoint::{load_checkpoint, save_checkpoint};
use pacda::config::Config;
use pacda::datagen::Split;
use pacda::evaluation::{
    cross_mask_matrix, domain_accuracy, forgetting_delta, pruning_curve, pruning_table, AccuracyMatrix,
};
use pacda::metrics::append_jsonl;
use pacda::network::Network;
use pacda::router::{argmax_rows, predict_with_domain_id, route_batch};
use pacda::trainer::{adapt_domain, run_sequence, source_pretrain, train_source};
use pacda::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "pacda", version, about = "Continual domain adaptation with parameter masks and batch-norm routing")]
struct Cli {
    /// TOML configuration; the built-in default suite when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, data, logs and reports.
    #[arg(long, global = true, default_value = "pacda-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write every domain's train and test split as columnar files.
    GenData,
    /// Train, prune and fine-tune the source model.
    TrainSource,
    /// Adapt the checkpoint to the next domain in the sequence.
    Adapt,
    /// Source training followed by every target domain.
    RunSequence {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Predict batch by batch, routing each batch to a stored domain.
    Infer {
        /// Columnar data file; defaults to the test split of `--domain`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Test split of this configured domain.
        #[arg(long, default_value_t = 0)]
        domain: usize,
        /// Skip routing and use this domain's mask and batch norm.
        #[arg(long)]
        domain_id: Option<usize>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Checkpoint path; defaults to the one in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-mask accuracy matrix and forgetting table.
    EvalMatrix {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy of the source model against pruned fraction.
    PruningCurve {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99])]
        fractions: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(cli: &Cli, explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| cli.out.join("checkpoint.ckpt"))
}

fn write_report(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    fs::create_dir_all(&cli.out)?;
    let metrics = cli.out.join("metrics.jsonl");
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(&cli)?;
            let dir = cli.out.join("data");
            fs::create_dir_all(&dir)?;
            for (t, d) in cfg.generate()?.iter().enumerate() {
                d.train.write(&dir.join(format!("domain{t}_train.bin")))?;
                d.test.write(&dir.join(format!("domain{t}_test.bin")))?;
            }
            println!("wrote {} domains to {}", cfg.data.domains.len(), dir.display());
        }
        Command::TrainSource => {
            let cfg = load_config(&cli)?;
            let data = cfg.generate()?;
            let mut log = Vec::new();
            let net = Network::init(&cfg.architecture, cfg.seed)?;
            let p0 = cfg.training.fractions(data.len())[0];
            let mut state = train_source(net, &data[0].train, p0, &cfg.training, cfg.seed, &mut log)?;
            let acc = domain_accuracy(&mut state.net, &state.ledger, &state.bank, 0, &data[0].test)?;
            state.accuracy_after.push(acc);
            append_jsonl(&metrics, &log)?;
            save_checkpoint(&checkpoint_path(&cli, None), &state, &cfg)?;
            println!("source accuracy {:.1}", 100.0 * acc);
        }
        Command::Adapt => {
            let path = checkpoint_path(&cli, None);
            let (mut state, cfg) = load_checkpoint(&path)?;
            let data = cfg.generate()?;
            let t = state.next_domain();
            if t >= data.len() {
                return Err(Error::Config(format!("all {} domains are already trained", data.len())));
            }
            let p = cfg.training.fractions(data.len())[t];
            let mut log = Vec::new();
            adapt_domain(&mut state, &data[t].train.inputs, p, &cfg.training, cfg.seed, &mut log)?;
            let acc = domain_accuracy(&mut state.net, &state.ledger, &state.bank, t, &data[t].test)?;
            state.accuracy_after.push(acc);
            append_jsonl(&metrics, &log)?;
            save_checkpoint(&path, &state, &cfg)?;
            println!("domain {t} accuracy {:.1}", 100.0 * acc);
        }
        Command::RunSequence { resume } => {
            let path = checkpoint_path(&cli, None);
            let (resume_state, cfg) = if *resume {
                let (s, c) = load_checkpoint(&path)?;
                (Some(s), c)
            } else {
                (None, load_config(&cli)?)
            };
            let data = cfg.generate()?;
            let result = run_sequence(&cfg, &data, resume_state, None)?;
            append_jsonl(&metrics, &result.records)?;
            save_checkpoint(&path, &result.state, &cfg)?;
            for (t, a) in result.state.accuracy_after.iter().enumerate() {
                println!("domain {t} accuracy {:.1}", 100.0 * a);
            }
        }
        Command::Infer {
            data,
            domain,
            domain_id,
            batch_size,
            checkpoint,
        } => {
            if *batch_size < 2 && domain_id.is_none() {
                return Err(Error::Contract("routing needs batches of at least 2 samples".into()));
            }
            let (mut state, cfg) = load_checkpoint(&checkpoint_path(&cli, checkpoint.as_ref()))?;
            let split = match data {
                Some(p) => Split::read(p)?,
                None => {
                    let all = cfg.generate()?;
                    all.into_iter()
                        .nth(*domain)
                        .ok_or_else(|| Error::Config(format!("no configured domain {domain}")))?
                        .test
                }
            };
            let mut stdout = io::stdout().lock();
            for (i, b) in split.chunks(*batch_size).enumerate() {
                let line = match domain_id {
                    Some(d) => {
                        let logits = predict_with_domain_id(&b.inputs, *d, &mut state.net, &state.ledger, &state.bank)?;
                        serde_json::json!({ "batch": i, "chosen_domain": d, "predictions": argmax_rows(&logits) })
                    }
                    None => {
                        let decision = route_batch(&b.inputs, &mut state.net, &state.ledger, &state.bank)?;
                        let mut v = serde_json::to_value(&decision).map_err(|e| Error::Format(e.to_string()))?;
                        v["batch"] = i.into();
                        v
                    }
                };
                writeln!(stdout, "{line}")?;
            }
        }
        Command::EvalMatrix { checkpoint } => {
            let (mut state, cfg) = load_checkpoint(&checkpoint_path(&cli, checkpoint.as_ref()))?;
            let data = cfg.generate()?;
            let tests: Vec<Split> = data.into_iter().take(state.next_domain()).map(|d| d.test).collect();
            let matrix = cross_mask_matrix(&mut state.net, &state.ledger, &state.bank, &tests)?;
            let end: Vec<f64> = (0..tests.len()).map(|t| matrix.values[t][t]).collect();
            let forgetting = AccuracyMatrix::new(
                vec!["after training".into(), "end of sequence".into()],
                matrix.cols.clone(),
                vec![state.accuracy_after.clone(), end.clone()],
            )?;
            println!("{}", matrix.to_table("mask \\ data"));
            println!("{}", forgetting.to_table(""));
            let deltas: Vec<f64> = end
                .iter()
                .zip(&state.accuracy_after)
                .map(|(e, a)| 100.0 * forgetting_delta(*e, *a))
                .collect();
            println!("forgetting (points): {}", deltas.iter().map(|d| format!("{d:+.1}")).collect::<Vec<_>>().join(" "));
            println!("diagonal dominant: {}", matrix.diagonal_dominant());
            write_report(
                &cli.out.join("eval_matrix.json"),
                &serde_json::json!({
                    "cross_mask": matrix,
                    "accuracy_after": state.accuracy_after,
                    "accuracy_end": end,
                    "forgetting_points": deltas,
                }),
            )?;
        }
        Command::PruningCurve { fractions } => {
            let cfg = load_config(&cli)?;
            let data = cfg.generate()?;
            let mut log = Vec::new();
            let mut net = Network::init(&cfg.architecture, cfg.seed)?;
            source_pretrain(&mut net, &data[0].train, &cfg.training, cfg.seed, &mut log)?;
            append_jsonl(&metrics, &log)?;
            let points = pruning_curve(&net, &data[0].train, &data[0].test, fractions, &cfg.training, cfg.seed)?;
            print!("{}", pruning_table(&points));
            let value = serde_json::to_value(&points).map_err(|e| Error::Format(e.to_string()))?;
            write_report(&cli.out.join("pruning_curve.json"), &value)?;
        }
    }
    Ok(())
}
