//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! stderr and then asserts on the same condition.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use common::{gradcheck, param, probe_loss, randn, rng};
use eiven_core::autograd::{self as ag, no_grad, Scalar, Tensor};
use eiven_core::decode_eval::{
    generate_batch, micro_f1, nucleus, query_rng, report, top_p_sample, DecodeConfig, Judgement,
};
use eiven_core::experiment::{mean_of, run_grid, summarize, Cell, DROP_BOTH};
use eiven_core::lbc::LbcStrategy;
use eiven_core::lm::tokenizer::EOS;
use eiven_core::lm::{AdapterKind, AdapterSpec, DecoderConfig, PromptSequence};
use eiven_core::projection::ProjectionConfig;
use eiven_core::synthdata::{
    gen_dataset, generate, verify_implicitness, AttributeSchema, Dataset, DatasetConfig, Split,
};
use eiven_core::task::{eval_prompt, evaluate, train_prompt, Corpus, Modalities};
use eiven_core::train::{batch_loss, fit, train_step, AdamW, FitInput, TrainConfig};
use eiven_core::vision::VisionConfig;
use eiven_core::{EivenModel, ModelConfig, RunConfig};
use rand::Rng;

/// Serializes the criteria so wall-clock budgets are not skewed by tests
/// sharing the CPU.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// The harness captures both print macros and `io::stderr`; the device file
/// is not captured, so these lines always reach the log.
fn emit(line: &str) {
    match std::fs::OpenOptions::new().append(true).open("/dev/stderr") {
        Ok(mut f) => {
            let _ = f.write_all(line.as_bytes());
        }
        Err(_) => eprint!("{line}"),
    }
}

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {name}: {} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    emit(&line);
    assert!(ok, "criterion {n} {name} failed: {detail}");
}

fn small_data(samples_per_value: usize) -> Dataset {
    let cfg = DatasetConfig {
        samples_per_value,
        ..DatasetConfig::default()
    };
    generate(&cfg.schemas().unwrap(), &cfg).unwrap()
}

fn tiny_model_config(kind: AdapterKind) -> ModelConfig {
    ModelConfig {
        vision: VisionConfig {
            width: 16,
            layers: 2,
            heads: 2,
            mlp_hidden: 16,
            extraction_layers: vec![1, 2],
            ..VisionConfig::default()
        },
        lm: DecoderConfig {
            width: 16,
            layers: 2,
            heads: 2,
            mlp_hidden: 16,
            context: 256,
            ..DecoderConfig::default()
        },
        projection: ProjectionConfig { hidden: 8 },
        adapter: AdapterSpec { kind, r: 4, groups: 2 },
        ..ModelConfig::default()
    }
}

// ---------------------------------------------------------------------------
// 1. gradients

fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(10_000 + seed);
    let s = seed;
    let mut out = Vec::new();

    let (a, b) = (param(&mut r, &[5, 4], 1.0), param(&mut r, &[4, 3], 1.0));
    out.push((
        "matmul",
        gradcheck(&[a.clone(), b.clone()], || probe_loss(&ag::matmul(&a, &b).unwrap(), s)),
    ));

    let (x, w, bias) = (
        param(&mut r, &[6, 5], 1.0),
        param(&mut r, &[5, 7], 0.5),
        param(&mut r, &[7], 0.5),
    );
    out.push((
        "linear",
        gradcheck(&[x.clone(), w.clone(), bias.clone()], || {
            probe_loss(&ag::linear(&x, &w, Some(&bias)).unwrap(), s)
        }),
    ));

    let x = param(&mut r, &[3, 8], 2.0);
    out.push((
        "silu_gate",
        gradcheck(&[x.clone()], || probe_loss(&ag::silu_gate(&x).unwrap(), s)),
    ));
    out.push(("silu", gradcheck(&[x.clone()], || probe_loss(&ag::silu(&x), s))));

    let x = param(&mut r, &[6, 16], 1.5);
    let (g, b) = (param(&mut r, &[16], 1.0), param(&mut r, &[16], 1.0));
    out.push((
        "layer_norm",
        gradcheck(&[x.clone(), g.clone(), b.clone()], || {
            probe_loss(&ag::layer_norm(&x, &g, &b).unwrap(), s)
        }),
    ));

    let logits = param(&mut r, &[4, 10], 2.0);
    let targets = [(s as usize) % 10, 3, 9, 0];
    let mask = [true, s % 2 == 0, true, false];
    out.push((
        "cross_entropy_masked",
        gradcheck(&[logits.clone()], || {
            ag::cross_entropy_masked(&logits, &targets, &mask).unwrap()
        }),
    ));
    let weights = [0.5, 0.25, 0.0, 1.0];
    out.push((
        "cross_entropy_weighted",
        gradcheck(&[logits.clone()], || {
            ag::cross_entropy_weighted(&logits, &targets, &weights).unwrap()
        }),
    ));

    let qkv = param(&mut r, &[7, 24], 1.0);
    for causal in [true, false] {
        let name = if causal { "attention (causal)" } else { "attention" };
        out.push((
            name,
            gradcheck(&[qkv.clone()], || {
                probe_loss(&ag::attention(&qkv, &[0..3, 3..7], 2, causal).unwrap(), s)
            }),
        ));
    }

    let (x, w) = (param(&mut r, &[5, 8], 1.0), param(&mut r, &[4, 2, 3], 1.0));
    out.push((
        "block_diag_linear",
        gradcheck(&[x.clone(), w.clone()], || {
            probe_loss(&ag::block_diag_linear(&x, &w).unwrap(), s)
        }),
    ));

    let (base, part) = (param(&mut r, &[6, 4], 1.0), param(&mut r, &[2, 4], 1.0));
    out.push((
        "scatter_add_rows/select_rows",
        gradcheck(&[base.clone(), part.clone()], || {
            let placed = ag::scatter_add_rows(&base, &[(part.clone(), vec![4, 1])]).unwrap();
            probe_loss(&ag::select_rows(&placed, &[1, 1, 5, 0]).unwrap(), s)
        }),
    ));

    let (a, b, bias) = (
        param(&mut r, &[3, 3], 1.0),
        param(&mut r, &[3, 3], 1.0),
        param(&mut r, &[3], 1.0),
    );
    out.push((
        "add/add_bias/mul/scale/sum/mean",
        gradcheck(&[a.clone(), b.clone(), bias.clone()], || {
            let m = ag::mul(&a, &ag::add(&a, &ag::add_bias(&b, &bias).unwrap()).unwrap()).unwrap();
            ag::add(&ag::sum(&ag::scale(&m, -1.7)), &ag::mean(&b)).unwrap()
        }),
    ));
    out
}

/// Whole-model loss on a batch holding one single-product and one comparison
/// prompt, checked against every trainable tensor.
fn end_to_end_error(seed: u64) -> f64 {
    let kind = AdapterKind::ALL[seed as usize % 3];
    let model = EivenModel::<f64>::new(&tiny_model_config(kind), seed).unwrap();
    // Nonzero up maps so that gradients reach the down maps too.
    let mut r = rng(20_000 + seed);
    for (_, t) in model.trainable_tensors() {
        t.assign(&randn(&mut r, t.numel(), 0.2)).unwrap();
    }
    let data = small_data(2);
    let corpus = Corpus::encode(&model.vision, &data).unwrap();
    let strategy = [
        LbcStrategy::JudgeLast,
        LbcStrategy::JudgeFirst,
        LbcStrategy::BetterInstance,
    ][seed as usize % 3];
    let modalities = Modalities {
        drop_image: false,
        drop_text: seed % 4 == 3,
    };
    // Same attribute, different values: instance 0 and instance 2.
    let params: Vec<Tensor<f64>> = model.trainable_tensors().into_iter().map(|(_, t)| t).collect();
    gradcheck(&params, || {
        let batch = vec![
            train_prompt(&model, &corpus, 1, None, LbcStrategy::None, modalities).unwrap(),
            train_prompt(&model, &corpus, 0, Some(2), strategy, modalities).unwrap(),
        ];
        batch_loss(&model.lm, &batch).unwrap()
    })
}

#[test]
fn c01_gradient_suite() {
    let _g = serial();
    let t = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut instances: BTreeMap<&str, usize> = BTreeMap::new();
    for seed in 0..10 {
        for (name, err) in op_errors(seed) {
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(err);
            *instances.entry(name).or_default() += 1;
        }
    }
    let mut e2e: f64 = 0.0;
    for seed in 0..10 {
        e2e = e2e.max(end_to_end_error(seed));
    }
    let secs = t.elapsed().as_secs_f64();
    let ops_ok = worst.values().all(|&e| e < 1e-4) && instances.values().all(|&n| n >= 10);
    let (worst_op, worst_err) = worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (*k, *v))
        .unwrap();
    verdict(
        1,
        "gradient suite",
        ops_ok && e2e < 1e-3 && secs < 120.0,
        &format!(
            "{} ops x 10 instances, worst op {worst_op} {worst_err:.2e} (< 1e-4); end-to-end worst {e2e:.2e} over 10 instances (< 1e-3); {secs:.1}s (< 120s)",
            worst.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. adapter identity

#[test]
fn c02_adapter_identity_at_init() {
    let _g = serial();
    let data = small_data(2);
    let mut details = Vec::new();
    let mut ok = true;
    for kind in AdapterKind::ALL {
        let cfg = ModelConfig {
            adapter: AdapterSpec {
                kind,
                ..AdapterSpec::default()
            },
            ..ModelConfig::default()
        };
        let model = EivenModel::<f32>::new(&cfg, 3).unwrap();
        let bare = model.lm.without_adapters();
        let corpus = Corpus::encode(&model.vision, &data).unwrap();
        let mut identical = 0;
        for i in 0..corpus.len() {
            let p = eval_prompt(&model, &corpus, i, Modalities::default()).unwrap();
            let with = no_grad(|| model.lm.forward(&p)).unwrap().to_vec();
            let without = no_grad(|| bare.forward(&p)).unwrap().to_vec();
            let same =
                with.len() == without.len() && with.iter().zip(&without).all(|(a, b)| a.to_bits() == b.to_bits());
            identical += usize::from(same);
        }
        ok &= identical == corpus.len() && !model.lm.adapters.is_empty();
        details.push(format!("{}: {identical}/{} bit-identical", kind.name(), corpus.len()));
    }
    verdict(2, "adapter identity at init", ok, &details.join(", "));
}

// ---------------------------------------------------------------------------
// 3. merge equivalence

fn train_steps<T: Scalar>(
    model: &EivenModel<T>,
    corpus: &Corpus<T>,
    indices: &[usize],
    steps: usize,
    lr: f64,
    batch: usize,
) {
    let tc = TrainConfig {
        lr,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(model.trainable_tensors(), tc.adamw()).unwrap();
    for step in 0..steps {
        let batch: Vec<_> = (0..batch)
            .map(|k| indices[(step * batch + k) % indices.len()])
            .map(|i| train_prompt(model, corpus, i, None, LbcStrategy::None, Modalities::default()).unwrap())
            .collect();
        let loss = batch_loss(&model.lm, &batch).unwrap();
        train_step(&loss, &mut opt).unwrap();
    }
}

#[test]
fn c03_merged_logits_match_live() {
    let _g = serial();
    let data = small_data(8);
    let mut details = Vec::new();
    let mut ok = true;
    for kind in [AdapterKind::RepLinearSparse, AdapterKind::MlpLinearDense] {
        let cfg = ModelConfig {
            adapter: AdapterSpec {
                kind,
                ..AdapterSpec::default()
            },
            ..ModelConfig::default()
        };
        // f64 so that the comparison measures the fold, not f32 rounding of
        // logits in the tens.
        let model = EivenModel::<f64>::new(&cfg, 1).unwrap();
        let corpus = Corpus::encode(&model.vision, &data).unwrap();
        let train: Vec<usize> = (0..corpus.len()).collect();
        train_steps(&model, &corpus, &train, 200, 5e-3, 16);
        let merged = model.merged().unwrap();
        let mut worst = 0.0f64;
        let mut moved = 0.0f64;
        let bare = model.lm.without_adapters();
        for i in 0..50 {
            let p = eval_prompt(&model, &corpus, i, Modalities::default()).unwrap();
            let live = no_grad(|| model.lm.forward(&p)).unwrap().to_vec();
            let folded = no_grad(|| merged.lm.forward(&p)).unwrap().to_vec();
            let base = no_grad(|| bare.forward(&p)).unwrap().to_vec();
            for ((a, b), c) in live.iter().zip(&folded).zip(&base) {
                worst = worst.max((a - b).abs());
                moved = moved.max((a - c).abs());
            }
        }
        // The adapters must have actually learned something for the check to mean anything.
        ok &= worst < 1e-5 && moved > 1e-3 && merged.lm.adapters.is_empty();
        details.push(format!(
            "{}: max |live - merged| {worst:.2e} (adapter effect {moved:.2e})",
            kind.name()
        ));
    }
    verdict(
        3,
        "merge equivalence after 200 steps, 50 prompts",
        ok,
        &details.join(", "),
    );
}

// ---------------------------------------------------------------------------
// 4. frozen backbones

#[test]
fn c04_backbones_unchanged_by_fit() {
    let _g = serial();
    let data = small_data(8);
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 2;
    let mut model = cfg.build_model().unwrap();
    let (lm_before, vision_before) = (model.lm_digest(), model.vision_digest());
    let trainable_before: Vec<Vec<f32>> = model.trainable_tensors().iter().map(|(_, t)| t.to_vec()).collect();
    let corpus = Corpus::encode(&model.vision, &data).unwrap();
    let input = FitInput {
        corpus: &corpus,
        modalities: cfg.modalities(),
        decode: &cfg.decode,
    };
    let report = fit(&mut model, &input, &cfg.train, |_| {}).unwrap();
    let trainable_after: Vec<Vec<f32>> = model.trainable_tensors().iter().map(|(_, t)| t.to_vec()).collect();
    let ok = model.lm_digest() == lm_before
        && model.vision_digest() == vision_before
        && report.lm_digest == lm_before
        && report.vision_digest == vision_before
        && trainable_after != trainable_before;
    verdict(
        4,
        "frozen backbone digests",
        ok,
        &format!(
            "lm {}…, vision {}… after {} steps",
            &lm_before[..12],
            &vision_before[..12],
            report.steps
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. parameter efficiency

#[test]
fn c05_trainable_count_closed_form() {
    let _g = serial();
    let mut details = Vec::new();
    let mut ok = true;
    for kind in AdapterKind::ALL {
        let cfg = ModelConfig {
            adapter: AdapterSpec {
                kind,
                ..AdapterSpec::default()
            },
            ..ModelConfig::default()
        };
        let model = EivenModel::<f32>::new(&cfg, 0).unwrap();
        let (dv, d, h) = (cfg.vision.width, cfg.lm.width, cfg.projection.hidden);
        let (r, g) = (cfg.adapter.r, cfg.adapter.groups);
        // SwiGLU projection: [dv -> 2h] then [h -> d], both with bias.
        let projection = dv * 2 * h + 2 * h + h * d + d;
        let up = if kind == AdapterKind::RepLinearSparse {
            g * (r / g) * (d / g)
        } else {
            r * d
        };
        let adapter = d * r + r + up + d;
        let expected = projection + cfg.lm.layers * adapter;
        let counted = model.count_trainable();
        let ratio = counted as f64 / model.total_parameters() as f64;
        ok &= counted == expected && ratio < 0.10;
        details.push(format!(
            "{}: {counted} == {expected}, {:.2}% of {}",
            kind.name(),
            100.0 * ratio,
            model.total_parameters()
        ));
    }
    verdict(5, "trainable count and fraction", ok, &details.join("; "));
}

// ---------------------------------------------------------------------------
// 6. overfit

#[test]
fn c06_overfit_64_samples() {
    let _g = serial();
    let data = small_data(8);
    let model = EivenModel::<f32>::new(&ModelConfig::default(), 0).unwrap();
    let corpus = Corpus::encode(&model.vision, &data).unwrap();
    // 64 of the 96 instances, spread over every attribute and value.
    let picked: Vec<usize> = (0..corpus.len()).filter(|i| i % 3 != 2).collect();
    assert_eq!(picked.len(), 64);
    let tc = TrainConfig {
        lr: 2e-2,
        lbc_strategy: LbcStrategy::None,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(model.trainable_tensors(), tc.adamw()).unwrap();
    let decode = DecodeConfig::default();
    let t = Instant::now();
    let (mut em, mut at) = (0.0, 0);
    for step in 1..=500 {
        let batch: Vec<_> = picked
            .iter()
            .map(|&i| train_prompt(&model, &corpus, i, None, LbcStrategy::None, Modalities::default()).unwrap())
            .collect();
        let loss = batch_loss(&model.lm, &batch).unwrap();
        train_step(&loss, &mut opt).unwrap();
        if step % 50 == 0 {
            let (_, judgements, _) = evaluate(&model, &corpus, &picked, Modalities::default(), &decode).unwrap();
            let hits = judgements
                .iter()
                .filter(|j| j.prediction.as_deref() == Some(j.gold.as_str()))
                .count();
            em = hits as f64 / picked.len() as f64;
            at = step;
            if em >= 0.95 {
                break;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        6,
        "overfit 64 samples",
        em >= 0.95 && secs < 300.0,
        &format!(
            "train exact match {:.1}% at step {at} (>= 95% within 500), {secs:.0}s (< 300s)",
            100.0 * em
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. ablation directions

#[test]
fn c07_ablation_directions() {
    let _g = serial();
    let t = Instant::now();
    let data = small_data(200);
    let mut base = RunConfig::default();
    base.train.val_every = 3;
    let cells = [
        Cell::eiven(),
        Cell::base(),
        Cell::lbc(LbcStrategy::None),
        Cell::lbc(LbcStrategy::JudgeLast),
        Cell::lbc(LbcStrategy::JudgeFirst),
        Cell::lbc(LbcStrategy::BetterInstance),
    ];
    let results = run_grid(
        &base,
        &data,
        &cells,
        &[0, 1, 2],
        |r| {
            let line = format!(
                "  seed {} {:<20} test micro-F1 {:.4}\n",
                r.seed, r.label, r.test_micro_f1
            );
            emit(&line);
        },
        |_, _, _| {},
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    let summary = summarize(&results);
    let m = |label: &str| mean_of(&summary, label).unwrap_or_else(|| panic!("no runs for {label}"));
    let full = m(Cell::eiven().label);
    let eiven_base = m(Cell::base().label);
    let none = m(Cell::lbc(LbcStrategy::None).label);
    let strategies: Vec<(&str, f64)> = [
        LbcStrategy::JudgeLast,
        LbcStrategy::JudgeFirst,
        LbcStrategy::BetterInstance,
    ]
    .into_iter()
    .map(|s| {
        let label = Cell::lbc(s).label;
        (label, m(label))
    })
    .collect();
    let both = m(DROP_BOTH);
    let judge_last = strategies[0].1;

    let a = full >= eiven_base;
    let b = strategies.iter().all(|&(_, v)| v >= none - 0.5) && judge_last > none;
    let c = both <= full - 10.0;
    let budget = secs < 2.0 * 3600.0;
    let table: Vec<String> = summary
        .iter()
        .map(|s| format!("{} {:.2}±{:.2}", s.label, s.mean, s.stdev))
        .collect();
    emit(&format!("  means: {}\n", table.join(", ")));
    let line = |ok: bool| if ok { "ok" } else { "NOT MET" };
    verdict(
        7,
        "ablation directions",
        a && b && c && budget,
        &format!(
            "(a) EIVEN {full:.2} >= EIVEN-Base {eiven_base:.2}: {}; (b) strategies {:?} vs w/o LBC {none:.2}: {}; \
             (c) drop-both {both:.2} <= EIVEN - 10: {}; {:.0} min (< 120): {}",
            line(a),
            strategies
                .iter()
                .map(|(l, v)| format!("{l} {v:.2}"))
                .collect::<Vec<_>>(),
            line(b),
            line(c),
            secs / 60.0,
            line(budget)
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. decoding

fn greedy(model: &EivenModel<f64>, prompt: &PromptSequence<f64>, max_new: usize) -> String {
    let mut seq = prompt.clone();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = no_grad(|| model.lm.forward(&seq)).unwrap();
        let v = logits.cols();
        let all = logits.to_vec();
        let last = &all[all.len() - v..];
        let mut best = 0;
        for (i, &x) in last.iter().enumerate() {
            if x > last[best] {
                best = i;
            }
        }
        if best as u32 == EOS {
            break;
        }
        out.push(best as u8);
        seq.token_ids.push(best as u32);
    }
    String::from_utf8_lossy(&out).into_owned()
}

/// Independent nucleus: softmax at temperature, keep the most likely tokens
/// until their mass reaches top_p, renormalize.
fn oracle_nucleus(logits: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut idx: Vec<usize> = (0..e.len()).collect();
    idx.sort_by(|&a, &b| e[b].partial_cmp(&e[a]).unwrap());
    let mut keep = vec![false; e.len()];
    let mut mass = 0.0;
    for &i in &idx {
        keep[i] = true;
        mass += e[i] / z;
        if mass >= top_p {
            break;
        }
    }
    let kz: f64 = (0..e.len()).filter(|&i| keep[i]).map(|i| e[i]).sum();
    (0..e.len()).map(|i| if keep[i] { e[i] / kz } else { 0.0 }).collect()
}

#[test]
fn c08_decoding() {
    let _g = serial();
    let data = small_data(9);
    // f64 keeps packed and single-sequence logits equal to ~1e-12. The model
    // is briefly trained: an untrained LM is full of top-2 gaps below the
    // temperature, where top-p legitimately keeps two tokens.
    let model = EivenModel::<f64>::new(&ModelConfig::default(), 2).unwrap();
    let corpus = Corpus::encode(&model.vision, &data).unwrap();
    let all: Vec<usize> = (0..corpus.len()).collect();
    train_steps(&model, &corpus, &all, 100, 5e-3, 16);
    let prompts: Vec<PromptSequence<f64>> = (0..100)
        .map(|i| eval_prompt(&model, &corpus, i, Modalities::default()).unwrap())
        .collect();
    let cold = DecodeConfig {
        temperature: 1e-4,
        max_new_tokens: 8,
        ..DecodeConfig::default()
    };
    let sampled = generate_batch(&model.lm, &prompts, &cold).unwrap();
    let greedy_hits = prompts
        .iter()
        .zip(&sampled)
        .filter(|(p, s)| greedy(&model, p, cold.max_new_tokens) == **s)
        .count();

    let warm = DecodeConfig {
        temperature: 1.0,
        top_p: 0.9,
        max_new_tokens: 8,
        seed: 11,
    };
    let first = generate_batch(&model.lm, &prompts[..20], &warm).unwrap();
    let second = generate_batch(&model.lm.clone(), &prompts[..20], &warm).unwrap();
    let stable = first == second;

    let mut r = rng(77);
    let logits = randn(&mut r, 24, 1.5);
    let cfg = DecodeConfig {
        temperature: 0.8,
        top_p: 0.85,
        ..DecodeConfig::default()
    };
    let expected = oracle_nucleus(&logits, cfg.temperature, cfg.top_p);
    let kept = nucleus(&logits, &cfg).unwrap();
    let draws = 100_000usize;
    let mut counts = vec![0usize; logits.len()];
    let mut sampler = query_rng(5, 0);
    for _ in 0..draws {
        counts[top_p_sample(&logits, &cfg, &mut sampler).unwrap() as usize] += 1;
    }
    let mut worst_z: f64 = 0.0;
    let mut outside = 0;
    for (c, &p) in counts.iter().zip(&expected) {
        if p == 0.0 {
            outside += c;
            continue;
        }
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        worst_z = worst_z.max((*c as f64 - draws as f64 * p).abs() / sd.max(1e-12));
    }
    let support_ok = kept.len() == expected.iter().filter(|&&p| p > 0.0).count();

    verdict(
        8,
        "decoding",
        greedy_hits == 100 && stable && worst_z <= 3.0 && outside == 0 && support_ok,
        &format!(
            "temperature 1e-4 == greedy on {greedy_hits}/100 prompts; fixed-seed rerun identical: {stable}; \
             nucleus of {} tokens, worst |z| {worst_z:.2} (<= 3) over {draws} draws, {outside} draws outside",
            kept.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. micro-F1

fn brute_force_f1(preds: &[Option<String>], golds: &[String]) -> (usize, usize, usize, f64) {
    let mut tp = 0;
    let mut predicted = 0;
    for (p, g) in preds.iter().zip(golds) {
        if let Some(p) = p {
            predicted += 1;
            if p == g {
                tp += 1;
            }
        }
    }
    let precision = if predicted == 0 {
        0.0
    } else {
        tp as f64 / predicted as f64
    };
    let recall = if golds.is_empty() {
        0.0
    } else {
        tp as f64 / golds.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (tp, predicted - tp, golds.len() - tp, f1)
}

#[test]
fn c09_micro_f1_oracle() {
    let _g = serial();
    let values = ["red", "blue", "green", "striped", "solid"];
    let mut r = rng(9);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.gen_range(0..30);
        let golds: Vec<String> = (0..n)
            .map(|_| values[r.gen_range(0..values.len())].to_string())
            .collect();
        let preds: Vec<Option<String>> = (0..n)
            .map(|_| {
                r.gen_bool(0.8)
                    .then(|| values[r.gen_range(0..values.len())].to_string())
            })
            .collect();
        let got = micro_f1(&preds, &golds).unwrap().overall;
        let (tp, fp, fn_, f1) = brute_force_f1(&preds, &golds);
        // Per-attribute scores must add up to the overall one as well.
        let records: Vec<Judgement> = preds
            .iter()
            .zip(&golds)
            .enumerate()
            .map(|(i, (p, g))| Judgement {
                attribute: format!("a{}", i % 3),
                gold: g.clone(),
                prediction: p.clone(),
            })
            .collect();
        let rep = report(&records);
        let tp_sum: usize = rep.per_attribute.values().map(|s| s.tp).sum();
        if (got.tp, got.fp, got.fn_) != (tp, fp, fn_) || got.f1 != f1 || rep.overall.f1 != f1 || tp_sum != tp {
            mismatches += 1;
        }
    }
    let hand = micro_f1(
        &[Some("a".into()), Some("b".into()), None],
        &["a".into(), "c".into(), "c".into()],
    )
    .unwrap()
    .overall
    .f1;
    verdict(
        9,
        "micro-F1 oracle",
        mismatches == 0 && (hand - 0.4).abs() < 1e-12,
        &format!("{mismatches} mismatches over 1000 random sets; hand case F1 = {hand}"),
    );
}

// ---------------------------------------------------------------------------
// 10. dataset invariants

fn files(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn c10_dataset_invariants() {
    let _g = serial();
    let mut violations = 0;
    let mut split_errors = Vec::new();
    let mut cap_errors = 0;
    let configs = [
        DatasetConfig::default(),
        DatasetConfig {
            samples_per_value: 37,
            seed: 5,
            split_ratios: [0.6, 0.2, 0.2],
            ..DatasetConfig::default()
        },
        DatasetConfig {
            samples_per_value: 11,
            cap: 11,
            seed: 9,
            evidence_mix: [0.0, 0.5, 0.5],
            ..DatasetConfig::default()
        },
    ];
    for cfg in &configs {
        let schemas: Vec<AttributeSchema> = cfg.schemas().unwrap();
        let data = generate(&schemas, cfg).unwrap();
        violations += verify_implicitness(&data.instances, &schemas).len();
        let mut per_value: BTreeMap<(String, String), [usize; 3]> = BTreeMap::new();
        for inst in &data.instances {
            let slot = match inst.split {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            };
            per_value
                .entry((inst.attribute.clone(), inst.value.clone()))
                .or_default()[slot] += 1;
        }
        for ((a, v), counts) in &per_value {
            let n: usize = counts.iter().sum();
            if n > cfg.cap {
                cap_errors += 1;
            }
            for k in 0..3 {
                let target = n as f64 * cfg.split_ratios[k];
                if (counts[k] as f64 - target).abs() > 1.0 {
                    split_errors.push(format!("{a}/{v} split {k}: {} vs {target:.1}", counts[k]));
                }
            }
        }
    }
    let over_cap = DatasetConfig {
        samples_per_value: 12,
        cap: 11,
        ..DatasetConfig::default()
    };
    let cap_enforced = generate(&over_cap.schemas().unwrap(), &over_cap).is_err();

    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        samples_per_value: 20,
        seed: 3,
        ..DatasetConfig::default()
    };
    let schemas = cfg.schemas().unwrap();
    gen_dataset(&schemas, &cfg, &dir.path().join("a")).unwrap();
    gen_dataset(&schemas, &cfg, &dir.path().join("b")).unwrap();
    let (a, b) = (files(&dir.path().join("a")), files(&dir.path().join("b")));
    let identical = !a.is_empty() && a == b;

    verdict(
        10,
        "dataset invariants",
        violations == 0 && split_errors.is_empty() && cap_errors == 0 && cap_enforced && identical,
        &format!(
            "{violations} implicitness violations; {} split counts off by more than 1 {:?}; cap exceeded {cap_errors} times, \
             over-cap config rejected: {cap_enforced}; regeneration of {} files byte-identical: {identical}",
            split_errors.len(),
            split_errors.iter().take(3).collect::<Vec<_>>(),
            a.len()
        ),
    );
}
