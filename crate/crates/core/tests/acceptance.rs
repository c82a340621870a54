//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Criterion 9 is reported only. Criterion 4 contains a check that cannot
//! hold for the published numbers; see `HR_KNOWN_INCONSISTENT`.

use std::collections::HashSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;
use sgg_core::config::RunConfig;
use sgg_core::decoder::{
    count_parameters, parallel_task_decode, DecoderConfig, DecoderLayer, DecoderStack, PredictionHeads,
    RelationFusion, TripletAttention, TripletDecoder, TripletPredictions, VariantTag,
};
use sgg_core::encoder::{EncoderConfig, EncoderLayer, ImageBatch, ImageEncoder, ImageFeatures};
use sgg_core::graph::{BBox, Entity, SceneGraph, Triplet};
use sgg_core::matching::{assignment_cost, hungarian, one_to_many_match, triplet_loss, CostMatrix, LossConfig};
use sgg_core::decoder::{LayerPredictions, TaskOutput};
use sgg_core::metrics::harmonic_recall;
use sgg_core::model::SggModel;
use sgg_core::nn::{AttnMask, FeedForward, Init, LayerNorm, Linear, Mlp, Module, MultiHeadAttention, PosEncoding};
use sgg_core::rng::{seeded, uniform_vec};
use sgg_core::runner::{evaluate_split, load_model, save_report, train, Data, Trainer, CHECKPOINT_FILE, TRAIN_LOG_FILE};
use sgg_core::tensor::gradcheck::{finite_diff_check, GradCheckConfig};
use sgg_core::{DType, Result, Tensor};

#[path = "support/metric_oracle.rs"]
mod oracle;

enum Status {
    Pass,
    Fail,
    /// Fails only on the documented inconsistent inputs.
    KnownRed,
    Report,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn gate(ok: bool, detail: impl Into<String>) -> Self {
        Self {
            status: if ok { Status::Pass } else { Status::Fail },
            detail: detail.into(),
        }
    }
}

fn rand_t(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::new(uniform_vec(&mut seeded(seed), shape.iter().product(), -1.0, 1.0), shape).unwrap()
}

fn init(seed: u64) -> Init {
    Init::new(seeded(seed), DType::F64)
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn features(seed: u64, bs: usize, hw: usize, d: usize) -> ImageFeatures {
    ImageFeatures {
        tokens: rand_t(seed, &[bs, hw, d]),
        pe: PosEncoding(rand_t(seed + 1, &[bs, hw, d])),
        h: 1,
        w: hw,
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

/// Worst relative error of `forward`'s weighted readout over `module`'s parameters.
fn grad_error<M: Module + Clone>(module: &M, seed: u64, coords: usize, forward: impl Fn(&M) -> Result<Tensor>) -> f64 {
    let params = module.params();
    let f = |ps: &[Tensor]| -> Result<Tensor> {
        let mut m = module.clone();
        m.set_params(ps)?;
        let out = forward(&m)?;
        let w = Tensor::new(uniform_vec(&mut seeded(seed ^ 0x5eed), out.numel(), -1.0, 1.0), out.shape())?;
        Ok(out.mul(&w)?.sum())
    };
    let cfg = GradCheckConfig {
        seed,
        max_coords_per_param: Some(coords),
        ..GradCheckConfig::default()
    };
    finite_diff_check(f, &params, &cfg).unwrap().max_rel_error
}

/// Copy of `m` with every parameter redrawn, so biases are non-trivial.
fn randomized<M: Module + Clone>(m: &M, seed: u64) -> M {
    let mut out = m.clone();
    let ps: Vec<Tensor> = m
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| p.replaced(uniform_vec(&mut seeded(seed * 1000 + i as u64), p.numel(), -0.5, 0.5)).unwrap())
        .collect();
    out.set_params(&ps).unwrap();
    out
}

fn sts_decoder_cfg() -> DecoderConfig {
    let mut cfg = DecoderConfig::for_variant(VariantTag::Sts, 32, 2, 4, 64);
    cfg.queries = 4;
    cfg.entity_classes = 4;
    cfg.predicate_classes = 3;
    cfg
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..10u64 {
        let x = rand_t(seed + 10, &[2, 3, 8]);
        let kv = rand_t(seed + 20, &[2, 5, 8]);
        note("linear", grad_error(&randomized(&Linear::new(&mut init(seed), 8, 5), seed), seed, 24, |m| m.forward(&x)));
        note("layer_norm", grad_error(&randomized(&LayerNorm::new(&mut init(seed), 8), seed), seed, 24, |m| m.forward(&x)));
        note("mlp", grad_error(&randomized(&Mlp::new(&mut init(seed), &[8, 12, 6]).unwrap(), seed), seed, 24, |m| m.forward(&x)));
        note("feed_forward", grad_error(&randomized(&FeedForward::new(&mut init(seed), 8, 16), seed), seed, 24, |m| m.forward(&x)));
        let mha = randomized(&MultiHeadAttention::new(&mut init(seed), 8, 2).unwrap(), seed);
        note("attention", grad_error(&mha, seed, 24, |m| m.forward(&x, &kv, &kv, None)));
        let mask = AttnMask::block_diagonal(3, 1);
        note("masked_attention", grad_error(&mha, seed, 24, |m| m.forward(&x, &x, &x, Some(&mask))));
        let pe = rand_t(seed + 30, &[2, 3, 8]);
        let enc_layer = randomized(&EncoderLayer::new(&mut init(seed), 8, 2, 16).unwrap(), seed);
        note("encoder_layer", grad_error(&enc_layer, seed, 12, |m| m.forward(&x, &pe)));
        let feat = features(seed + 40, 2, 5, 8);
        let dec_layer = randomized(&DecoderLayer::new(&mut init(seed), 8, 2, 16).unwrap(), seed);
        note("decoder_layer", grad_error(&dec_layer, seed, 12, |m| Ok(m.forward(&x, &pe, &feat, None)?.0)));
        let q: Vec<Tensor> = (0..3).map(|i| rand_t(seed + 50 + i, &[2, 3, 8])).collect();
        let fusion = randomized(&RelationFusion::new(&mut init(seed), 8).unwrap(), seed);
        note("relation_fusion", grad_error(&fusion, seed, 12, |m| {
            let o = m.forward([&q[0], &q[1], &q[2]])?;
            Tensor::concat(&[&o[0], &o[1], &o[2]], 2)
        }));
        let tsa = randomized(&TripletAttention::new(&mut init(seed), 8, 2).unwrap(), seed);
        note("triplet_attention", grad_error(&tsa, seed, 12, |m| {
            let o = m.forward([&q[0], &q[1], &q[2]], [&pe, &pe, &pe])?;
            Tensor::concat(&[&o[0], &o[1], &o[2]], 2)
        }));
        let mut hcfg = DecoderConfig::for_variant(VariantTag::Sts, 8, 1, 2, 16);
        hcfg.entity_classes = 4;
        hcfg.predicate_classes = 3;
        let heads = randomized(&PredictionHeads::new(&mut init(seed), &hcfg).unwrap(), seed);
        note("prediction_heads", grad_error(&heads, seed, 12, |m| {
            let o = m.forward([&q[0], &q[1], &q[2]])?;
            let parts: Vec<&Tensor> = o.tasks().into_iter().flat_map(|t| [&t.logits, &t.boxes]).collect();
            Tensor::concat(&parts, 2)
        }));
        let ecfg = EncoderConfig {
            patch: 4,
            channels: 8,
            d: 16,
            heads: 2,
            layers: 1,
            ffn: 32,
        };
        let enc = ImageEncoder::new(&mut init(seed), &ecfg).unwrap();
        let img = ImageBatch::new(rand_t(seed + 60, &[1, 3, 8, 8]).add_scalar(1.0).scale(0.5)).unwrap();
        note("image_encoder", grad_error(&enc, seed, 6, |m| Ok(m.forward(&img)?.tokens)));

        let dcfg = sts_decoder_cfg();
        let dec = TripletDecoder::new(&mut init(100 + seed), &dcfg).unwrap();
        let dec = randomized(&dec, seed).clone();
        let feat = features(200 + seed, 1, 4, 32);
        note("sts_decoder", grad_error(&dec, seed, 6, |m| {
            let p = m.forward(&feat)?;
            let parts: Vec<&Tensor> = p
                .layers
                .iter()
                .flat_map(|l| l.tasks().into_iter().flat_map(|t| [&t.logits, &t.boxes]))
                .collect();
            let flat: Vec<Tensor> = parts.iter().map(|t| t.reshape(&[t.numel()])).collect::<Result<_>>()?;
            Tensor::concat(&flat.iter().collect::<Vec<_>>(), 0)
        }));
        note("matching_loss", loss_grad_error(seed));
    }
    let elapsed = t0.elapsed();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let failing: Vec<String> = worst.iter().filter(|(_, e)| *e >= 1e-4).map(|(n, e)| format!("{n}={e:.2e}")).collect();
    Outcome::gate(
        failing.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} blocks x 10 seeds, max relative error {max:.2e}{}, {:.1}s",
            worst.len(),
            if failing.is_empty() { String::new() } else { format!(" (over 1e-4: {})", failing.join(", ")) },
            elapsed.as_secs_f64()
        ),
    )
}

fn graph(seed: u64, m: usize) -> SceneGraph {
    let mut rng = seeded(seed);
    let mut bbox = || BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4));
    let triplets = (0..m)
        .map(|i| Triplet {
            subject: Entity { label: i % 4, bbox: bbox() },
            object: Entity { label: (i + 1) % 4, bbox: bbox() },
            predicate: i % 3,
        })
        .collect();
    SceneGraph { triplets }
}

fn loss_grad_error(seed: u64) -> f64 {
    let gt = vec![graph(100 + seed, 2), graph(200 + seed, 3)];
    let (bs, kn) = (2, 8);
    let mut r = seeded(300 + seed);
    let mut p = |shape: &[usize]| Tensor::param(uniform_vec(&mut r, shape.iter().product(), -1.5, 1.5), shape, DType::F64).unwrap();
    let params: Vec<Tensor> = vec![p(&[bs, kn, 5]), p(&[bs, kn, 4]), p(&[bs, kn, 5]), p(&[bs, kn, 4]), p(&[bs, kn, 4]), p(&[bs, kn, 4])];
    let build = |ps: &[Tensor]| {
        let task = |l: &Tensor, b: &Tensor| TaskOutput { logits: l.clone(), boxes: b.sigmoid() };
        let layer = LayerPredictions {
            subject: task(&ps[0], &ps[1]),
            object: task(&ps[2], &ps[3]),
            predicate: task(&ps[4], &ps[5]),
        };
        TripletPredictions {
            layers: vec![layer.clone(), layer],
            groups: 2,
            per_group: 4,
        }
    };
    let cfg = LossConfig {
        predicate_weights: Some(vec![1.0, 2.5, 0.7]),
        ..LossConfig::default()
    };
    let asg = one_to_many_match(&build(&params).detach(), &gt, &cfg.cost).unwrap();
    let f = |ps: &[Tensor]| -> Result<Tensor> { Ok(triplet_loss(&build(ps), &gt, &asg, &cfg)?.total) };
    finite_diff_check(f, &params, &GradCheckConfig { seed, ..GradCheckConfig::default() }).unwrap().max_rel_error
}

// ---------------------------------------------------------------------------
// 2. Hungarian oracle

fn brute_force_min(cost: &CostMatrix, m: usize, n: usize) -> f64 {
    fn go(cost: &CostMatrix, j: usize, m: usize, n: usize, used: &mut Vec<bool>, asg: &mut Vec<usize>, best: &mut f64) {
        if j == m {
            *best = best.min(assignment_cost(cost, asg));
            return;
        }
        for q in 0..n {
            if !used[q] {
                used[q] = true;
                asg.push(q);
                go(cost, j + 1, m, n, used, asg, best);
                asg.pop();
                used[q] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, m, n, &mut vec![false; n], &mut Vec::new(), &mut best);
    best
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = seeded(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=7);
        let m = rng.gen_range(1..=n);
        let data: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let cost = CostMatrix::new(n, m, data).unwrap();
        let asg = hungarian(&cost).unwrap();
        if assignment_cost(&cost, &asg) != brute_force_min(&cost, m, n) {
            mismatches += 1;
        }
    }
    let elapsed = t0.elapsed();
    Outcome::gate(
        mismatches == 0 && elapsed < Duration::from_secs(60),
        format!("1000 matrices up to 7x7, {mismatches} cost mismatches, {:.1}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------
// 3. Parameter identity

fn criterion_3() -> Outcome {
    let mut problems = Vec::new();
    for (d, layers, heads, ffn) in [(16, 1, 2, 32), (32, 2, 4, 64), (64, 2, 4, 256), (128, 3, 8, 512), (256, 6, 8, 2048)] {
        for (rq, tsa) in [(false, false), (true, false), (false, true), (true, true)] {
            let mk = |v| {
                let mut c = DecoderConfig::for_variant(v, d, layers, heads, ffn);
                c.relation_queries = rq;
                c.triplet_attention = tsa;
                count_parameters(&c).total()
            };
            let delta = mk(VariantTag::Tts) as i64 - mk(VariantTag::Sts) as i64;
            let stack = DecoderStack::param_count(d, ffn, layers) as i64;
            if delta != 2 * stack {
                problems.push(format!("d={d} rq={rq} tsa={tsa}: delta {delta} != 2 x {stack}"));
            }
        }
    }
    // symbolic counts agree with built models
    for v in VariantTag::ALL {
        let mut cfg = DecoderConfig::for_variant(v, 32, 2, 4, 64);
        cfg.queries = 5;
        cfg.groups = 2;
        let built = TripletDecoder::new(&mut init(1), &cfg).unwrap().num_params();
        if built != count_parameters(&cfg).total() {
            problems.push(format!("{v}: built {built} != symbolic {}", count_parameters(&cfg).total()));
        }
    }
    let stack = DecoderStack::param_count(256, 2048, 6);
    let delta = 2 * stack;
    let published = 84.2e6 - 65.3e6;
    let rel = (delta as f64 - published).abs() / published;
    let in_band = (9.0e6..=9.9e6).contains(&(stack as f64));
    Outcome::gate(
        problems.is_empty() && in_band && rel <= 0.10,
        format!(
            "TTS-STS = 2 x stack at 20 configs{}; full-size stack {stack}, delta {delta} vs 18.9M ({:.2}% off)",
            if problems.is_empty() { String::new() } else { format!(" FAILED: {}", problems.join("; ")) },
            100.0 * rel
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Harmonic recall against published rows

/// Published rows: mR, R and hR at 20/50/100 (None where not reported).
#[rustfmt::skip]
const PUBLISHED: [(&str, [Option<f64>; 9]); 19] = [
    ("IMP",             [Some(2.8), Some(4.2), Some(5.3), Some(18.1), Some(25.9), Some(31.2), Some(4.8), Some(7.2), Some(9.1)]),
    ("MOTIFS",          [Some(4.1), Some(5.5), Some(6.8), Some(25.1), Some(32.1), Some(36.9), Some(7.0), Some(9.4), Some(11.5)]),
    ("RelDN",           [None, Some(6.0), Some(7.3), None, Some(31.4), Some(35.9), None, Some(10.1), Some(12.1)]),
    ("VCTree",          [Some(5.4), Some(7.4), Some(8.7), Some(24.5), Some(31.9), Some(36.2), Some(8.8), Some(12.0), Some(12.1)]),
    ("GPS-Net",         [None, Some(6.7), Some(8.6), None, Some(31.1), Some(35.9), None, Some(11.0), Some(13.9)]),
    ("G-RCNN",          [None, Some(5.8), Some(6.6), None, Some(29.7), Some(32.8), None, Some(9.7), Some(11.0)]),
    ("MOTIFS+TDE",      [Some(5.8), Some(8.2), Some(9.8), Some(12.4), Some(16.9), Some(20.3), Some(7.9), Some(11.0), Some(13.2)]),
    ("MOTIFS+GCL",      [None, Some(16.8), Some(19.3), None, Some(18.4), Some(22.0), None, Some(17.6), Some(20.6)]),
    ("VCTree+TDE",      [Some(6.9), Some(9.3), Some(11.1), Some(14.0), Some(19.4), Some(23.2), Some(9.2), Some(12.6), Some(15.0)]),
    ("VCTree+GCL",      [None, Some(15.2), Some(17.5), None, Some(17.4), Some(20.7), None, Some(16.2), Some(18.9)]),
    ("CV-SGG",          [None, Some(14.8), Some(17.1), None, Some(27.8), Some(32.0), None, Some(19.2), Some(22.0)]),
    ("BGNN",            [Some(7.5), Some(10.7), Some(12.6), Some(23.3), Some(31.0), Some(35.8), Some(11.3), Some(15.9), Some(18.6)]),
    ("HOTR",            [None, Some(9.4), Some(12.0), None, Some(23.5), Some(27.7), None, Some(13.4), Some(16.7)]),
    ("Relationformer",  [Some(4.6), Some(9.3), Some(10.7), Some(22.2), Some(28.4), Some(31.3), Some(8.0), Some(14.0), Some(16.0)]),
    ("SGTR",            [None, Some(12.0), Some(15.2), None, Some(24.6), Some(28.4), None, Some(16.1), Some(19.8)]),
    ("IterSG",          [None, Some(8.0), Some(8.8), None, Some(29.7), Some(32.1), None, Some(12.6), Some(13.8)]),
    ("IterSG-reweight", [Some(11.3), Some(16.7), Some(21.4), Some(19.7), Some(28.5), Some(34.3), Some(14.4), Some(21.1), Some(26.4)]),
    ("TripletQuery",    [Some(6.3), Some(8.5), Some(9.6), Some(25.2), Some(30.5), Some(33.2), Some(10.2), Some(13.3), Some(14.9)]),
    ("TripletQuery-rw", [Some(11.3), Some(16.8), Some(21.1), Some(20.1), Some(30.0), Some(36.2), Some(14.5), Some(21.5), Some(26.7)]),
];

/// Cells whose printed hR is not the harmonic mean of the printed R and mR
/// (beyond rounding); no formula reproduces all of them.
const HR_KNOWN_INCONSISTENT: [(&str, usize); 7] = [
    ("VCTree", 100),
    ("VCTree+GCL", 100),
    ("CV-SGG", 50),
    ("CV-SGG", 100),
    ("Relationformer", 20),
    ("Relationformer", 100),
    ("TripletQuery", 20),
];

fn criterion_4() -> Outcome {
    let examples = [(25.1, 4.1, 7.0), (30.5, 8.5, 13.3)];
    let examples_ok = examples.iter().all(|&(r, mr, h)| (harmonic_recall(r, mr) - h).abs() <= 0.05);
    let mut checked = 0;
    let mut off = Vec::new();
    for (name, row) in PUBLISHED {
        for (i, k) in [20, 50, 100].into_iter().enumerate() {
            if let (Some(mr), Some(r), Some(h)) = (row[i], row[3 + i], row[6 + i]) {
                checked += 1;
                let got = harmonic_recall(r, mr);
                if (got - h).abs() > 0.05 {
                    off.push((name, k, got, h));
                }
            }
        }
    }
    let listed: Vec<String> = off.iter().map(|(n, k, g, h)| format!("{n}@{k} {g:.3} vs {h}")).collect();
    let as_documented = off.len() == HR_KNOWN_INCONSISTENT.len()
        && off.iter().all(|(n, k, _, _)| HR_KNOWN_INCONSISTENT.contains(&(*n, *k)));
    let detail = format!(
        "worked examples {}; {}/{checked} published cells within 0.05{}",
        if examples_ok { "reproduced" } else { "NOT reproduced" },
        checked - off.len(),
        if off.is_empty() { String::new() } else { format!("; off: {}", listed.join(", ")) }
    );
    let status = match (examples_ok, off.is_empty(), as_documented) {
        (true, true, _) => Status::Pass,
        (true, false, true) => Status::KnownRed,
        _ => Status::Fail,
    };
    Outcome { status, detail }
}

// ---------------------------------------------------------------------------
// 5. Metric oracle equivalence

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let mut errors = Vec::new();
    let mut nontrivial = 0;
    for seed in 0..200 {
        match oracle::compare_with_reference(seed) {
            Ok(nt) => nontrivial += nt as usize,
            Err(e) => errors.push(e),
        }
    }
    let elapsed = t0.elapsed();
    Outcome::gate(
        errors.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "200 random cases, {} disagreements ({nontrivial} with partial recall), {:.1}s{}",
            errors.len(),
            elapsed.as_secs_f64(),
            errors.first().map_or(String::new(), |e| format!("; first: {e}"))
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Desk-scale overfit

fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.variant = VariantTag::Sts;
    cfg.d = 64;
    cfg.enc_layers = 2;
    cfg.dec_layers = 2;
    cfg.queries = 20;
    cfg.groups = 1;
    cfg.train_scenes = 20;
    cfg.steps = 2000;
    cfg
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let cfg = overfit_config();
    let data = Data::new(&cfg).unwrap();
    let seen = data.train.label_triples();
    let mut trainer = Trainer::new(&cfg, &data, None).unwrap();
    let mut recall = 0.0;
    while trainer.step < cfg.steps && recall < 90.0 {
        for _ in 0..100 {
            trainer.step().unwrap();
        }
        recall = evaluate_split(&trainer.model, &data.train, &data.train_images, &seen, &cfg)
            .unwrap()
            .get("R@20")
            .unwrap();
    }
    // score the saved checkpoint through the evaluation path
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&path).unwrap();
    let (loaded_cfg, model) = load_model(&path, None, &[]).unwrap();
    let report = evaluate_split(&model, &data.train, &data.train_images, &seen, &loaded_cfg).unwrap();
    let r20 = report.get("R@20").unwrap();
    let elapsed = t0.elapsed();
    Outcome::gate(
        r20 >= 90.0 && trainer.step <= 2000 && elapsed <= Duration::from_secs(15 * 60),
        format!(
            "training-set R@20 {:.1}% after {} steps, {:.0}s",
            r20,
            trainer.step,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. One-to-many contract

fn criterion_7() -> Outcome {
    let mut cfg = RunConfig::desk();
    cfg.groups = 3;
    cfg.steps = 50;
    let data = Data::new(&cfg).unwrap();
    let mut bad = Vec::new();
    let mut total = 0;
    let log = train(&cfg, &data, None, &mut |_| {}).unwrap().log;
    for s in &log {
        total += s.pairs;
        let gts: Vec<usize> = s.scenes.iter().map(|id| data.train.scenes.iter().find(|x| x.id == *id).unwrap().graph.len()).collect();
        let per_group_ok = s.assignment.images.iter().zip(&gts).all(|(groups, &m)| {
            groups.len() == 3
                && groups.iter().all(|g| {
                    let distinct: HashSet<_> = g.iter().collect();
                    g.len() == m && distinct.len() == m && g.iter().all(|&q| q < cfg.queries)
                })
        });
        if s.pairs != 3 * s.gt || !per_group_ok {
            bad.push(s.step);
        }
    }
    Outcome::gate(
        bad.is_empty() && log.len() == 50,
        format!("{} batches, {total} pairs, violations at steps {bad:?}", log.len()),
    )
}

// ---------------------------------------------------------------------------
// 8. Structural invariants

fn toy_decoder(variant: VariantTag, groups: usize, seed: u64) -> TripletDecoder {
    let mut cfg = DecoderConfig::for_variant(variant, 16, 2, 4, 32);
    cfg.queries = 4;
    cfg.groups = groups;
    cfg.entity_classes = 5;
    cfg.predicate_classes = 3;
    let mut dec = TripletDecoder::new(&mut init(seed), &cfg).unwrap();
    for (i, c) in dec.queries.content.iter_mut().enumerate() {
        *c = c.replaced(rand_t(seed * 31 + i as u64, c.shape()).to_vec()).unwrap();
    }
    dec
}

fn outputs(p: &TripletPredictions) -> Vec<Tensor> {
    p.layers
        .iter()
        .flat_map(|l| l.tasks().into_iter().flat_map(|t| [t.logits.clone(), t.boxes.clone()]))
        .collect()
}

fn perturb_rows(t: &Tensor, rows: std::ops::Range<usize>, seed: u64) -> Tensor {
    let d = *t.shape().last().unwrap();
    let mut v = t.to_vec();
    let noise = uniform_vec(&mut seeded(seed), v.len(), -0.5, 0.5);
    for i in rows.start * d..rows.end * d {
        v[i] += noise[i];
    }
    t.replaced(v).unwrap()
}

fn row_bits(t: &Tensor, b: usize, i: usize) -> Vec<u64> {
    let (n, d) = (t.shape()[1], t.shape()[2]);
    bits(t)[(b * n + i) * d..(b * n + i + 1) * d].to_vec()
}

fn triplet_locality() -> std::result::Result<(), String> {
    let fuse = RelationFusion::new(&mut init(4), 8).unwrap();
    let tsa = TripletAttention::new(&mut init(5), 8, 2).unwrap();
    let q: Vec<Tensor> = (0..3).map(|i| rand_t(50 + i, &[2, 6, 8])).collect();
    let pe: Vec<Tensor> = (0..3).map(|i| rand_t(60 + i, &[2, 6, 8])).collect();
    let run = |q: &[Tensor]| {
        let f = fuse.forward([&q[0], &q[1], &q[2]]).unwrap();
        tsa.forward([&f[0], &f[1], &f[2]], [&pe[0], &pe[1], &pe[2]]).unwrap()
    };
    let base = run(&q);
    for j in 0..6 {
        let qp: Vec<Tensor> = q.iter().enumerate().map(|(t, x)| perturb_rows(x, j..j + 1, 70 + t as u64)).collect();
        let out = run(&qp);
        for i in (0..6).filter(|&i| i != j) {
            for t in 0..3 {
                if row_bits(&out[t], 0, i) != row_bits(&base[t], 0, i) || row_bits(&out[t], 1, i) != row_bits(&base[t], 1, i) {
                    return Err(format!("triplet {i} changed when triplet {j} was perturbed"));
                }
            }
        }
    }
    Ok(())
}

fn group_isolation() -> std::result::Result<(), String> {
    for variant in VariantTag::ALL {
        let dec = toy_decoder(variant, 3, 12);
        let feat = features(13, 2, 6, 16);
        let base = dec.forward(&feat).unwrap();
        let mut other = dec.clone();
        for t in other.queries.content.iter_mut().chain(other.queries.pos.iter_mut()) {
            *t = perturb_rows(t, 4..8, 14);
        }
        let changed = other.forward(&feat).unwrap();
        for g in [0, 2] {
            let a = outputs(&base.group(g).unwrap());
            let b = outputs(&changed.group(g).unwrap());
            if a.iter().zip(&b).any(|(x, y)| bits(x) != bits(y)) {
                return Err(format!("{variant}: group {g} changed when group 1 was perturbed"));
            }
        }
    }
    Ok(())
}

fn batch_transparency() -> std::result::Result<(), String> {
    let dec = toy_decoder(VariantTag::Sts, 2, 10);
    let layer = &dec.stacks[0].layers[0];
    let feat = features(11, 2, 5, 16);
    let q: Vec<Tensor> = (0..3).map(|i| rand_t(12 + i, &[2, 8, 16])).collect();
    let pe: Vec<Tensor> = (0..3).map(|i| rand_t(20 + i, &[2, 8, 16])).collect();
    let mask = dec.group_mask();
    let (joint, _) = parallel_task_decode(layer, [&q[0], &q[1], &q[2]], [&pe[0], &pe[1], &pe[2]], &feat, mask.as_ref()).unwrap();
    for t in 0..3 {
        let (alone, _) = layer.forward(&q[t], &pe[t], &feat, mask.as_ref()).unwrap();
        if bits(&joint[t]) != bits(&alone) {
            return Err(format!("stream {t} differs between joint and separate decoding"));
        }
    }
    // image batching: each image decodes as if alone
    let full = dec.forward(&feat).unwrap();
    for b in 0..2 {
        let single = ImageFeatures {
            tokens: feat.tokens.narrow(0, b, 1).unwrap(),
            pe: PosEncoding(feat.pe.0.narrow(0, b, 1).unwrap()),
            h: feat.h,
            w: feat.w,
        };
        let alone = dec.forward(&single).unwrap();
        for (x, y) in outputs(&full).iter().zip(outputs(&alone)) {
            if bits(&x.narrow(0, b, 1).unwrap()) != bits(&y) {
                return Err(format!("image {b} differs when decoded alone"));
            }
        }
    }
    Ok(())
}

fn permutation_equivariance() -> std::result::Result<f64, String> {
    let mut worst = 0.0f64;
    for variant in VariantTag::ALL {
        let dec = toy_decoder(variant, 2, 15);
        let feat = features(16, 2, 6, 16);
        let perm = [2, 0, 3, 1, 5, 7, 4, 6];
        let mut permuted = dec.clone();
        for t in permuted.queries.content.iter_mut().chain(permuted.queries.pos.iter_mut()) {
            *t = t.replaced(t.index_select(0, &perm).unwrap().to_vec()).unwrap();
        }
        let a = dec.forward(&feat).unwrap();
        let b = permuted.forward(&feat).unwrap();
        for (x, y) in outputs(&a).iter().zip(outputs(&b)) {
            let xp = x.index_select(1, &perm).unwrap();
            for (u, v) in xp.data().iter().zip(y.data()) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    if worst < 1e-12 {
        Ok(worst)
    } else {
        Err(format!("permuted outputs differ by {worst:.2e}"))
    }
}

fn criterion_8() -> Outcome {
    let mut msgs = Vec::new();
    let mut ok = true;
    for (name, r) in [
        ("triplet locality", triplet_locality()),
        ("cross-group isolation", group_isolation()),
        ("batch-concatenation transparency", batch_transparency()),
    ] {
        match r {
            Ok(()) => msgs.push(format!("{name} bit-exact")),
            Err(e) => {
                ok = false;
                msgs.push(format!("{name} FAILED: {e}"));
            }
        }
    }
    match permutation_equivariance() {
        Ok(w) => msgs.push(format!("permutation equivariance (max deviation {w:.1e})")),
        Err(e) => {
            ok = false;
            msgs.push(format!("permutation equivariance FAILED: {e}"));
        }
    }
    Outcome::gate(ok, msgs.join("; "))
}

// ---------------------------------------------------------------------------
// 9. Directional ablation (reported)

const ABLATION_SEEDS: u64 = 5;
const ABLATION_STEPS: usize = 200;

fn criterion_9() -> Outcome {
    let t0 = Instant::now();
    let mut means = Vec::new();
    for variant in [VariantTag::Sts, VariantTag::Sta] {
        let mut sum = 0.0;
        for seed in 0..ABLATION_SEEDS {
            let mut cfg = RunConfig::desk();
            cfg.variant = variant;
            cfg.steps = ABLATION_STEPS;
            cfg.seed = seed;
            let data = Data::new(&cfg).unwrap();
            let model = train(&cfg, &data, None, &mut |_| {}).unwrap().model;
            let seen = data.train.label_triples();
            sum += evaluate_split(&model, &data.train, &data.train_images, &seen, &cfg).unwrap().get("R@20").unwrap();
        }
        means.push(sum / ABLATION_SEEDS as f64);
    }
    let holds = means[0] >= means[1] - 2.0;
    Outcome {
        status: Status::Report,
        detail: format!(
            "mean training-set R@20 over {ABLATION_SEEDS} seeds at {ABLATION_STEPS} steps: STS {:.1}, STA {:.1}; STS >= STA - 2.0 {}; {:.0}s",
            means[0],
            means[1],
            if holds { "holds" } else { "does not hold" },
            t0.elapsed().as_secs_f64()
        ),
    }
}

// ---------------------------------------------------------------------------
// 10. Determinism

fn criterion_10() -> Outcome {
    let mut cfg = RunConfig::desk();
    cfg.steps = 30;
    cfg.groups = 2;
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let data = Data::new(&cfg).unwrap();
        train(&cfg, &data, Some(dir.path()), &mut |_| {}).unwrap();
        let (c, model) = load_model(&dir.path().join(CHECKPOINT_FILE), None, &[]).unwrap();
        let seen = data.train.label_triples();
        let report = evaluate_split(&model, &data.test, &data.test_images, &seen, &c).unwrap();
        let path = save_report(dir.path(), "test", &report).unwrap();
        let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
        (read(CHECKPOINT_FILE), read(TRAIN_LOG_FILE), std::fs::read(path).unwrap())
    };
    let (a, b) = (run(), run());
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2];
    let model = SggModel::new(&cfg.model(), cfg.seed).unwrap();
    let again = SggModel::new(&cfg.model(), cfg.seed).unwrap();
    let init_same = model.to_checkpoint("").to_bytes() == again.to_checkpoint("").to_bytes();
    Outcome::gate(
        same.iter().all(|&s| s) && init_same,
        format!(
            "checkpoint {} ({} bytes), training log {}, metric report {}, initialization {}",
            if same[0] { "identical" } else { "DIFFERS" },
            a.0.len(),
            if same[1] { "identical" } else { "DIFFERS" },
            if same[2] { "identical" } else { "DIFFERS" },
            if init_same { "identical" } else { "DIFFERS" },
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", criterion_1),
        ("assignment oracle", criterion_2),
        ("parameter identity", criterion_3),
        ("harmonic recall vs published rows", criterion_4),
        ("metric oracle equivalence", criterion_5),
        ("desk-scale overfit", criterion_6),
        ("one-to-many contract", criterion_7),
        ("structural invariants", criterion_8),
        ("directional ablation (soft)", criterion_9),
        ("determinism", criterion_10),
    ];
    let filter: Option<Vec<usize>> = std::env::var("SGG_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if filter.as_ref().is_some_and(|f| !f.contains(&n)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::gate(false, format!("panicked: {msg}"))
        });
        let tag = match outcome.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed.push(n);
                "FAIL"
            }
            Status::KnownRed => "FAIL (unattainable, documented)",
            Status::Report => "REPORT",
        };
        writeln!(out, "criterion {n:>2} {tag}: {name}: {}", outcome.detail).unwrap();
        out.flush().unwrap();
    }
    if !failed.is_empty() {
        writeln!(out, "failed criteria: {failed:?}").unwrap();
        std::process::exit(1);
    }
}
