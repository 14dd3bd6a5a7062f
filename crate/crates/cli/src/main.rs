use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use eiven_core::experiment::{markdown_table, run_grid, summarize, Cell};
use eiven_core::synthdata::{gen_dataset, load_dataset, read_ppm, Dataset, Split};
use eiven_core::task::{evaluate, predict, Corpus};
use eiven_core::train::{fit, split_indices, FitInput};
use eiven_core::RunConfig;

#[derive(Parser)]
#[command(name = "eiven", version, about = "Toy multimodal attribute value extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training and decoding seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into --out.
    GenData(Common),
    /// Train and write a checkpoint plus run manifest into --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (defaults to data.dir of the config).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the decoding seed stored in the checkpoint.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Answer one attribute question about one product.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PPM image of the product.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "")]
        text: String,
        #[arg(long)]
        attribute: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the component and strategy ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Fold linear adapters into the base weights.
    MergeAdapter {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn threads() -> Result<usize> {
    match std::env::var("EIVEN_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .with_context(|| format!("EIVEN_THREADS={v:?} is not a count"))?;
            if n == 0 {
                bail!("EIVEN_THREADS must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let cfg = match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<(PathBuf, Dataset)> {
    let dir = flag
        .clone()
        .or_else(|| cfg.data.dir.clone())
        .context("no dataset: pass --data or set data.dir in the config")?;
    let data = load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok((dir, data))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let threads = threads()?;
    match cli.command {
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            let schemas = cfg.data.generate.schemas()?;
            let data = gen_dataset(&schemas, &cfg.data.generate, &common.out)?;
            write_json(
                &common.out.join("run.json"),
                &json!({ "command": "gen-data", "config": cfg.resolved_json(), "seed": cfg.data.generate.seed }),
            )?;
            println!("wrote {} instances to {}", data.instances.len(), common.out.display());
        }
        Command::Train { common, data } => {
            let mut cfg = load_config(&common)?;
            let (dir, data) = dataset(&data, &cfg)?;
            cfg.data.dir = Some(dir);
            let mut model = cfg.build_model()?;
            let corpus = Corpus::encode(&model.vision, &data)?;
            let input = FitInput {
                corpus: &corpus,
                modalities: cfg.modalities(),
                decode: &cfg.decode,
            };
            let report = fit(&mut model, &input, &cfg.train, |e| {
                eprintln!(
                    "epoch {:>3}  steps {:>5}  loss {:.4}  val {}  {:.1}s",
                    e.epoch,
                    e.steps,
                    e.train_loss,
                    e.val_micro_f1.map_or("-".to_string(), |f| format!("{:.4}", f)),
                    e.seconds
                )
            })?;
            fs::create_dir_all(&common.out)?;
            cfg.save_checkpoint(&model, &common.out.join("model.ckpt"))?;
            write_json(
                &common.out.join("run.json"),
                &json!({
                    "command": "train",
                    "config": cfg.resolved_json(),
                    "seed": cfg.train.seed,
                    "threads": threads,
                    "trainable_parameters": model.count_trainable(),
                    "total_parameters": model.total_parameters(),
                    "fit": report,
                }),
            )?;
            println!(
                "best val micro-F1 {:.4} at epoch {}; checkpoint in {}",
                report.best_val_micro_f1,
                report.best_epoch,
                common.out.display()
            );
        }
        Command::Eval {
            checkpoint,
            split,
            data,
            out,
            seed,
        } => {
            let (mut cfg, model) = RunConfig::load_checkpoint(&checkpoint)?;
            if let Some(s) = seed {
                cfg.decode.seed = s;
            }
            let (dir, data) = dataset(&data, &cfg)?;
            let corpus = Corpus::encode(&model.vision, &data)?;
            let indices = split_indices(&corpus, split);
            if indices.is_empty() {
                bail!("split {} of {} is empty", split.name(), dir.display());
            }
            let (report, judgements, generations) = evaluate(&model, &corpus, &indices, cfg.modalities(), &cfg.decode)?;
            let records: Vec<_> = indices
                .iter()
                .zip(judgements.iter().zip(&generations))
                .map(|(&i, (j, g))| {
                    json!({ "id": corpus.instances[i].id, "attribute": j.attribute, "gold": j.gold,
                            "prediction": j.prediction, "generated": g })
                })
                .collect();
            eiven_core::decode_eval::write_report(
                &out,
                &report,
                json!({
                    "command": "eval",
                    "checkpoint": checkpoint,
                    "split": split.name(),
                    "data": dir,
                    "config": cfg.resolved_json(),
                    "seed": cfg.decode.seed,
                }),
            )?;
            let lines: String = records.iter().map(|r| r.to_string() + "\n").collect();
            fs::write(out.join("predictions.jsonl"), lines)?;
            println!(
                "{} micro-F1 {:.4} (P {:.4}, R {:.4}) over {} instances",
                split.name(),
                report.overall.f1,
                report.overall.precision,
                report.overall.recall,
                indices.len()
            );
        }
        Command::Predict {
            checkpoint,
            image,
            text,
            attribute,
            seed,
        } => {
            let (mut cfg, model) = RunConfig::load_checkpoint(&checkpoint)?;
            if let Some(s) = seed {
                cfg.decode.seed = s;
            }
            let img = read_ppm(&image)?;
            let (raw, value) = predict(&model, &img, &text, &attribute, &cfg.decode)?;
            match value {
                Some(v) => println!("{v}"),
                None => {
                    eprintln!("no prediction (generated {raw:?})");
                    println!();
                }
            }
        }
        Command::Ablate { common, data, seeds } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let mut cfg = load_config(&common)?;
            let (dir, data) = dataset(&data, &cfg)?;
            cfg.data.dir = Some(dir);
            let first = cfg.train.seed;
            let seed_list: Vec<u64> = (first..first + seeds).collect();
            let mut cells = Cell::components();
            cells.extend(Cell::strategies());
            let results = run_grid(
                &cfg,
                &data,
                &cells,
                &seed_list,
                |r| eprintln!("seed {}  {:<20} test micro-F1 {:.4}", r.seed, r.label, r.test_micro_f1),
                |label, seed, e| {
                    eprintln!(
                        "seed {seed}  {label:<20} epoch {:>3}  loss {:.4}",
                        e.epoch, e.train_loss
                    )
                },
            )?;
            let summary = summarize(&results);
            let component_rows: Vec<_> = summary
                .iter()
                .filter(|s| !s.label.starts_with("LBC_") && s.label != "w/o LBC")
                .cloned()
                .collect();
            let strategy_rows: Vec<_> = summary
                .iter()
                .filter(|s| s.label.starts_with("LBC_") || s.label == "w/o LBC")
                .cloned()
                .collect();
            fs::create_dir_all(&common.out)?;
            let table = format!(
                "## Components\n\n{}\n## Comparison strategies\n\n{}",
                markdown_table(&component_rows),
                markdown_table(&strategy_rows)
            );
            fs::write(common.out.join("results.md"), &table)?;
            write_json(
                &common.out.join("results.json"),
                &json!({
                    "command": "ablate",
                    "config": cfg.resolved_json(),
                    "seeds": seed_list,
                    "threads": threads,
                    "summary": summary,
                    "runs": results,
                }),
            )?;
            print!("{table}");
        }
        Command::MergeAdapter { checkpoint, out } => {
            let (cfg, model) = RunConfig::load_checkpoint(&checkpoint)?;
            if model.config.merged {
                bail!("{} is already merged", checkpoint.display());
            }
            let merged = model.merged()?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            cfg.save_checkpoint(&merged, &out)?;
            println!("merged {} adapters into {}", model.lm.adapters.len(), out.display());
        }
    }
    Ok(())
}
