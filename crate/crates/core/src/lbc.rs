//! Learning-by-Comparison: partner sampling, prompt templates and answer
//! parsing.
//!
//! All template strings live here. Evaluation always uses the single-product
//! template regardless of the strategy a model was trained with.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EivenError, Result};
use crate::synthdata::ProductInstance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbcStrategy {
    JudgeLast,
    JudgeFirst,
    BetterInstance,
    None,
}

impl LbcStrategy {
    pub const ALL: [LbcStrategy; 4] = [
        LbcStrategy::JudgeLast,
        LbcStrategy::JudgeFirst,
        LbcStrategy::BetterInstance,
        LbcStrategy::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LbcStrategy::JudgeLast => "judge_last",
            LbcStrategy::JudgeFirst => "judge_first",
            LbcStrategy::BetterInstance => "better_instance",
            LbcStrategy::None => "none",
        }
    }

    pub fn is_pairwise(self) -> bool {
        self != LbcStrategy::None
    }
}

impl std::str::FromStr for LbcStrategy {
    type Err = EivenError;
    fn from_str(s: &str) -> Result<Self> {
        LbcStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EivenError::config("lbc_strategy", format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct ComparisonPair<'a> {
    pub first: &'a ProductInstance,
    pub second: &'a ProductInstance,
    pub same: bool,
}

impl<'a> ComparisonPair<'a> {
    pub fn new(first: &'a ProductInstance, second: &'a ProductInstance) -> Result<Self> {
        if first.attribute != second.attribute {
            return Err(EivenError::Input(format!(
                "cannot compare {} with {}",
                first.attribute, second.attribute
            )));
        }
        Ok(ComparisonPair {
            first,
            second,
            same: normalize(&first.value) == normalize(&second.value),
        })
    }

    pub fn attribute(&self) -> &str {
        &self.first.attribute
    }
}

/// Uniformly picks a position in `candidates` other than `anchor`.
///
/// `candidates` are indices of same-attribute training instances; `anchor`
/// may or may not be among them.
pub fn sample_partner(anchor: usize, candidates: &[usize], rng: &mut impl Rng) -> Result<usize> {
    let own = candidates.iter().position(|&c| c == anchor);
    let available = candidates.len() - usize::from(own.is_some());
    if available == 0 {
        return Err(EivenError::PairingUnavailable(format!(
            "instance {anchor} has no other instance of its attribute"
        )));
    }
    let mut j = rng.gen_range(0..available);
    if let Some(p) = own {
        if j >= p {
            j += 1;
        }
    }
    Ok(candidates[j])
}

/// Samples a comparison partner for `anchor` among the same-attribute
/// members of `pool`, never the anchor itself (matched by id).
pub fn sample_pair<'a>(
    anchor: &'a ProductInstance,
    pool: &'a [ProductInstance],
    rng: &mut impl Rng,
) -> Result<ComparisonPair<'a>> {
    let candidates: Vec<usize> = (0..pool.len())
        .filter(|&i| pool[i].attribute == anchor.attribute && pool[i].id != anchor.id)
        .collect();
    if candidates.is_empty() {
        return Err(EivenError::PairingUnavailable(format!(
            "no other {} instance to compare {} with",
            anchor.attribute, anchor.id
        )));
    }
    let pick = candidates[rng.gen_range(0..candidates.len())];
    ComparisonPair::new(anchor, &pool[pick])
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub question: String,
    pub answer: String,
}

pub fn single_question(attribute: &str) -> String {
    format!("What is the {attribute} of this product?")
}

pub fn build_single(inst: &ProductInstance) -> Prompt {
    Prompt {
        question: single_question(&inst.attribute),
        answer: inst.value.clone(),
    }
}

/// Comparison prompt for a pairwise strategy. `None` falls back to the
/// single-product prompt of the first instance.
pub fn build_pair(pair: &ComparisonPair<'_>, strategy: LbcStrategy) -> Prompt {
    let a = pair.attribute();
    let (v1, v2) = (&pair.first.value, &pair.second.value);
    let verdict = if pair.same { "Same" } else { "Different" };
    match strategy {
        LbcStrategy::None => build_single(pair.first),
        LbcStrategy::JudgeLast => Prompt {
            question: format!("What is the {a} of each product, and is it the same?"),
            answer: format!("First: {v1}; Second: {v2}; {verdict}"),
        },
        LbcStrategy::JudgeFirst => Prompt {
            question: format!("Is the {a} of the two products the same, and what is each?"),
            answer: format!("{verdict}; First: {v1}; Second: {v2}"),
        },
        LbcStrategy::BetterInstance => {
            let second_wins = pair.second.evidence.shows_image() && !pair.first.evidence.shows_image();
            Prompt {
                question: format!("Which product shows its {a} more clearly, and what is it?"),
                answer: if second_wins {
                    format!("Second: {v2}")
                } else {
                    format!("First: {v1}")
                },
            }
        }
    }
}

/// Text fed to the model before the answer: question, then each context on
/// its own line, then the answer cue.
pub fn prompt_text(question: &str, contexts: &[&str]) -> String {
    format!("{question}\n{}\nAnswer: ", contexts.join("\n"))
}

/// Lowercase, trim, collapse whitespace, strip trailing punctuation.
pub fn normalize(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Extracts the predicted value from a generation; `None` means no
/// prediction. Comparison-formatted output yields its "First:" field.
pub fn parse_answer(generated: &str) -> Option<String> {
    let lower = generated.to_lowercase();
    let field = |key: &str| {
        lower
            .find(key)
            .map(|at| lower[at + key.len()..].split(';').next().unwrap_or("").to_string())
    };
    let raw = field("first:")
        .or_else(|| {
            lower
                .trim_start()
                .starts_with("second:")
                .then(|| field("second:"))
                .flatten()
        })
        .unwrap_or(lower);
    let v = normalize(&raw);
    (!v.is_empty()).then_some(v)
}
