//! Generation and exact-match evaluation.

mod decode;
mod metrics;

pub use decode::{generate, generate_batch, generate_batch_offset, nucleus, query_rng, top_p_sample, DecodeConfig};
pub use metrics::{micro_f1, report, write_report, Confusion, EvalReport, Judgement, Score, NO_PREDICTION};
