//! The ablation grid: component removals and comparison strategies, each
//! trained and tested over several seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, RunConfig};
use crate::error::Result;
use crate::lbc::LbcStrategy;
use crate::model::EivenModel;
use crate::synthdata::{Dataset, Split};
use crate::task::{evaluate, Corpus, Modalities};
use crate::train::{fit, split_indices, EpochLog, FitInput, FitReport};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub label: &'static str,
    pub ablation: Ablation,
    pub strategy: LbcStrategy,
}

const FULL: Ablation = Ablation {
    use_mgvf: true,
    drop_image: false,
    drop_text: false,
};

impl Cell {
    const fn new(label: &'static str, ablation: Ablation, strategy: LbcStrategy) -> Self {
        Cell {
            label,
            ablation,
            strategy,
        }
    }

    pub fn eiven() -> Self {
        Cell::new("EIVEN", FULL, LbcStrategy::JudgeLast)
    }

    /// Neither multi-granularity features nor comparison prompts.
    pub fn base() -> Self {
        Cell::new(
            "EIVEN-Base",
            Ablation {
                use_mgvf: false,
                ..FULL
            },
            LbcStrategy::None,
        )
    }

    pub fn lbc(strategy: LbcStrategy) -> Self {
        let label = match strategy {
            LbcStrategy::JudgeLast => "LBC_Judge_Last",
            LbcStrategy::JudgeFirst => "LBC_Judge_First",
            LbcStrategy::BetterInstance => "LBC_Better_Instance",
            LbcStrategy::None => "w/o LBC",
        };
        Cell::new(label, FULL, strategy)
    }

    /// Rows of the component table.
    pub fn components() -> Vec<Cell> {
        vec![
            Cell::eiven(),
            Cell::new(
                "- MGVF",
                Ablation {
                    use_mgvf: false,
                    ..FULL
                },
                LbcStrategy::JudgeLast,
            ),
            Cell::base(),
            Cell::new(
                "- Image",
                Ablation {
                    drop_image: true,
                    ..FULL
                },
                LbcStrategy::JudgeLast,
            ),
            Cell::new(
                "- Text Context",
                Ablation {
                    drop_text: true,
                    ..FULL
                },
                LbcStrategy::JudgeLast,
            ),
        ]
    }

    /// Rows of the strategy table.
    pub fn strategies() -> Vec<Cell> {
        LbcStrategy::ALL.into_iter().map(Cell::lbc).collect()
    }

    /// Cells with equal settings share one training run.
    fn key(&self) -> (bool, bool, bool, &'static str) {
        (
            self.ablation.use_mgvf,
            self.ablation.drop_image,
            self.ablation.drop_text,
            self.strategy.name(),
        )
    }

    pub fn config(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.clone().with_seed(seed);
        c.ablation = self.ablation;
        c.train.lbc_strategy = self.strategy;
        c
    }
}

/// Label of the evaluation-only row that drops both modalities from the
/// full model.
pub const DROP_BOTH: &str = "- Image & Text";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub seed: u64,
    pub test_micro_f1: f64,
    pub fit: FitReport,
}

/// Trains and tests every distinct cell once per seed. The full model is
/// additionally tested with both modalities removed when it is in `cells`.
pub fn run_grid(
    base: &RunConfig,
    data: &Dataset,
    cells: &[Cell],
    seeds: &[u64],
    mut on_result: impl FnMut(&CellResult),
    mut on_epoch: impl FnMut(&str, u64, &EpochLog),
) -> Result<Vec<CellResult>> {
    let mut corpora: BTreeMap<Vec<usize>, Corpus<f32>> = BTreeMap::new();
    let mut out: Vec<CellResult> = Vec::new();
    for &seed in seeds {
        let mut done: Vec<((bool, bool, bool, &str), usize)> = Vec::new();
        for cell in cells {
            if let Some(&(_, at)) = done.iter().find(|(k, _)| *k == cell.key()) {
                let shared = CellResult {
                    label: cell.label.to_string(),
                    ..out[at].clone()
                };
                on_result(&shared);
                out.push(shared);
                continue;
            }
            let cfg = cell.config(base, seed);
            cfg.validate()?;
            let model_cfg = cfg.resolved_model();
            let mut model = EivenModel::<f32>::new(&model_cfg, seed)?;
            let layers = model_cfg.vision.extraction_layers.clone();
            if !corpora.contains_key(&layers) {
                corpora.insert(layers.clone(), Corpus::encode(&model.vision, data)?);
            }
            let corpus = &corpora[&layers];
            let input = FitInput {
                corpus,
                modalities: cfg.modalities(),
                decode: &cfg.decode,
            };
            let report = fit(&mut model, &input, &cfg.train, |e| on_epoch(cell.label, seed, e))?;
            let test = split_indices(corpus, Split::Test);
            let (r, _, _) = evaluate(&model, corpus, &test, cfg.modalities(), &cfg.decode)?;
            let result = CellResult {
                label: cell.label.to_string(),
                seed,
                test_micro_f1: r.overall.f1,
                fit: report.clone(),
            };
            on_result(&result);
            done.push((cell.key(), out.len()));
            out.push(result);

            if *cell == Cell::eiven() {
                let both = Modalities {
                    drop_image: true,
                    drop_text: true,
                };
                let (r, _, _) = evaluate(&model, corpus, &test, both, &cfg.decode)?;
                let result = CellResult {
                    label: DROP_BOTH.to_string(),
                    seed,
                    test_micro_f1: r.overall.f1,
                    fit: report,
                };
                on_result(&result);
                out.push(result);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub runs: usize,
    /// Micro-F1 in points (0–100).
    pub mean: f64,
    pub stdev: f64,
}

/// Mean and sample standard deviation per label, in first-seen order.
pub fn summarize(results: &[CellResult]) -> Vec<Summary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let xs: Vec<f64> = results
                .iter()
                .filter(|r| r.label == label)
                .map(|r| 100.0 * r.test_micro_f1)
                .collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let stdev = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Summary {
                label: label.to_string(),
                runs: xs.len(),
                mean,
                stdev,
            }
        })
        .collect()
}

pub fn mean_of(summaries: &[Summary], label: &str) -> Option<f64> {
    summaries.iter().find(|s| s.label == label).map(|s| s.mean)
}

/// Markdown table of test micro-F1, mean ± stdev over seeds.
pub fn markdown_table(summaries: &[Summary]) -> String {
    let mut s = String::from("| Setting | Test micro-F1 | Seeds |\n|---|---|---|\n");
    for r in summaries {
        let _ = writeln!(s, "| {} | {:.2} ± {:.2} | {} |", r.label, r.mean, r.stdev, r.runs);
    }
    s
}
