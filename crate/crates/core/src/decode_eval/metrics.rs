//! Exact-match micro-F1 and per-attribute confusion matrices.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EivenError, Result};
use crate::lbc::normalize;

/// Column label for queries without a prediction.
pub const NO_PREDICTION: &str = "∅";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Score {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Score {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    fn add(&mut self, correct: bool, predicted: bool) {
        if correct {
            self.tp += 1;
        } else {
            self.fn_ += 1;
            if predicted {
                self.fp += 1;
            }
        }
        *self = Score::from_counts(self.tp, self.fp, self.fn_);
    }
}

/// Rows are gold values; columns are predicted values followed by `∅`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub gold: Vec<String>,
    pub predicted: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn to_csv(&self) -> String {
        let cell = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut out = String::from("gold");
        for p in &self.predicted {
            out.push(',');
            out.push_str(&cell(p));
        }
        out.push('\n');
        for (g, row) in self.gold.iter().zip(&self.counts) {
            out.push_str(&cell(g));
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Score,
    pub per_attribute: BTreeMap<String, Score>,
    pub confusion: BTreeMap<String, Confusion>,
}

/// One evaluated query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub attribute: String,
    pub gold: String,
    pub prediction: Option<String>,
}

/// Micro-F1 over a flat list of predictions; `None` is "no prediction".
pub fn micro_f1(predictions: &[Option<String>], golds: &[String]) -> Result<EvalReport> {
    if predictions.len() != golds.len() {
        return Err(EivenError::Input(format!(
            "{} predictions for {} gold values",
            predictions.len(),
            golds.len()
        )));
    }
    let records: Vec<Judgement> = predictions
        .iter()
        .zip(golds)
        .map(|(p, g)| Judgement {
            attribute: String::new(),
            gold: g.clone(),
            prediction: p.clone(),
        })
        .collect();
    Ok(report(&records))
}

pub fn report(records: &[Judgement]) -> EvalReport {
    let mut overall = Score::default();
    let mut per_attribute: BTreeMap<String, Score> = BTreeMap::new();
    let mut cells: BTreeMap<String, BTreeMap<(String, String), usize>> = BTreeMap::new();
    for r in records {
        let gold = normalize(&r.gold);
        let pred = r.prediction.as_deref().map(normalize).filter(|p| !p.is_empty());
        let correct = pred.as_deref() == Some(gold.as_str());
        overall.add(correct, pred.is_some());
        per_attribute
            .entry(r.attribute.clone())
            .or_default()
            .add(correct, pred.is_some());
        let col = pred.unwrap_or_else(|| NO_PREDICTION.to_string());
        *cells
            .entry(r.attribute.clone())
            .or_default()
            .entry((gold, col))
            .or_default() += 1;
    }
    let confusion = cells
        .into_iter()
        .map(|(attr, c)| {
            let gold: Vec<String> = c
                .keys()
                .map(|(g, _)| g.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let mut predicted: Vec<String> = c
                .keys()
                .map(|(_, p)| p.clone())
                .chain(gold.iter().cloned())
                .filter(|p| p != NO_PREDICTION)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            predicted.push(NO_PREDICTION.to_string());
            let counts = gold
                .iter()
                .map(|g| {
                    predicted
                        .iter()
                        .map(|p| c.get(&(g.clone(), p.clone())).copied().unwrap_or(0))
                        .collect()
                })
                .collect();
            (
                attr,
                Confusion {
                    gold,
                    predicted,
                    counts,
                },
            )
        })
        .collect();
    EvalReport {
        overall,
        per_attribute,
        confusion,
    }
}

/// Writes `report.json` plus one `confusion_<attribute>.csv` per attribute.
pub fn write_report(dir: &Path, report: &EvalReport, extra: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EivenError::io(dir, e))?;
    let mut json = serde_json::to_value(report)?;
    if let (Some(obj), serde_json::Value::Object(more)) = (json.as_object_mut(), extra) {
        obj.extend(more);
    }
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&json)? + "\n").map_err(|e| EivenError::io(&path, e))?;
    for (attr, c) in &report.confusion {
        let name = if attr.is_empty() {
            "all".to_string()
        } else {
            attr.to_lowercase()
        };
        let path = dir.join(format!("confusion_{name}.csv"));
        std::fs::write(&path, c.to_csv()).map_err(|e| EivenError::io(&path, e))?;
    }
    Ok(())
}
