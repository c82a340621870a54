//! Brute-force metric reference and random evaluation cases, shared by the
//! metric tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::Rng;
use sgg_core::graph::{BBox, Entity, SceneGraph, Triplet};
use sgg_core::metrics::{evaluate, EvalSettings, ImageEval, LabelTriple, QueryOutput};
use sgg_core::rng::{seeded, SeededRng};

pub const ENT: usize = 3;
pub const PRED: usize = 3;

// ---------------------------------------------------------------------------
// Independent reference.

pub fn r_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ax2, ay1, ay2) = (a.cx - a.w / 2.0, a.cx + a.w / 2.0, a.cy - a.h / 2.0, a.cy + a.h / 2.0);
    let (bx1, bx2, by1, by2) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0, b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    let inter = if iw > 0.0 && ih > 0.0 { iw * ih } else { 0.0 };
    inter / (a.w * a.h + b.w * b.h - inter)
}

#[derive(Clone, Copy)]
pub struct Cand {
    pub q: usize,
    pub s: usize,
    pub o: usize,
    pub p: usize,
    pub sb: BBox,
    pub ob: BBox,
    pub score: f64,
}

pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn r_candidates(qs: &[QueryOutput], top_k: usize) -> Vec<Cand> {
    let mut out = Vec::new();
    for (q, o) in qs.iter().enumerate() {
        let s = argmax_first(&o.probs[0][..ENT]);
        let ob = argmax_first(&o.probs[1][..ENT]);
        let mut avail: Vec<Option<f64>> = o.probs[2][..PRED].iter().map(|&p| Some(p)).collect();
        for _ in 0..top_k.min(PRED) {
            let mut best: Option<usize> = None;
            for (i, v) in avail.iter().enumerate() {
                if let Some(v) = v {
                    if best.is_none_or(|b| *v > avail[b].unwrap()) {
                        best = Some(i);
                    }
                }
            }
            let p = best.unwrap();
            avail[p] = None;
            out.push(Cand {
                q,
                s,
                o: ob,
                p,
                sb: o.boxes[0],
                ob: o.boxes[1],
                score: o.probs[0][s] * o.probs[1][ob] * o.probs[2][p],
            });
        }
    }
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    out
}

pub fn r_constrained(c: &[Cand]) -> Vec<Cand> {
    let mut keep: Vec<Cand> = Vec::new();
    for x in c {
        match keep.iter().position(|y| y.q == x.q) {
            Some(i) if keep[i].score >= x.score => {}
            Some(i) => keep[i] = *x,
            None => keep.push(*x),
        }
    }
    keep.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    keep
}

/// Per GT, whether it is consumed by the top-`k` prefix.
pub fn r_hits(c: &[Cand], gt: &[Triplet], k: usize) -> Vec<bool> {
    let mut used = vec![false; gt.len()];
    for x in c.iter().take(k) {
        for (j, t) in gt.iter().enumerate() {
            if !used[j]
                && (x.s, x.p, x.o) == (t.subject.label, t.predicate, t.object.label)
                && r_iou(&x.sb, &t.subject.bbox) >= 0.5
                && r_iou(&x.ob, &t.object.bbox) >= 0.5
            {
                used[j] = true;
                break;
            }
        }
    }
    used
}

/// Every candidate of the `k` best pairs; budget no longer applies.
pub fn r_ng(c: &[Cand], k: usize) -> Vec<Cand> {
    let top: Vec<usize> = r_constrained(c).iter().take(k).map(|x| x.q).collect();
    c.iter().filter(|x| top.contains(&x.q)).copied().collect()
}

pub fn r_recall(cands: &[Vec<Cand>], gts: &[Vec<Triplet>], k: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for (c, g) in cands.iter().zip(gts) {
        if g.is_empty() {
            continue;
        }
        let h = r_hits(c, g, k);
        sum += h.iter().filter(|&&x| x).count() as f64 / g.len() as f64;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn r_mean_recall(cands: &[Vec<Cand>], gts: &[Vec<Triplet>], k: usize) -> Option<f64> {
    let mut per = Vec::new();
    for cls in 0..PRED {
        let mut sum = 0.0;
        let mut n = 0;
        for (c, g) in cands.iter().zip(gts) {
            let h = r_hits(c, g, k);
            let idx: Vec<usize> = (0..g.len()).filter(|&j| g[j].predicate == cls).collect();
            if idx.is_empty() {
                continue;
            }
            sum += idx.iter().filter(|&&j| h[j]).count() as f64 / idx.len() as f64;
            n += 1;
        }
        if n > 0 {
            per.push(sum / n as f64);
        }
    }
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

pub fn r_zero_shot(cands: &[Vec<Cand>], gts: &[Vec<Triplet>], seen: &HashSet<LabelTriple>, k: usize) -> Option<f64> {
    let filtered: Vec<Vec<Triplet>> = gts
        .iter()
        .map(|g| {
            g.iter()
                .filter(|t| !seen.contains(&(t.subject.label, t.predicate, t.object.label)))
                .copied()
                .collect()
        })
        .collect();
    r_recall(cands, &filtered, k)
}

pub fn r_ap(qs: &[Vec<QueryOutput>], gts: &[Vec<Triplet>]) -> Option<f64> {
    // detections and NMS
    let mut kept: Vec<Vec<(usize, f64, BBox)>> = Vec::new();
    for img in qs {
        let mut d: Vec<(usize, f64, BBox)> = Vec::new();
        for o in img {
            for t in 0..2 {
                let c = argmax_first(&o.probs[t][..ENT]);
                d.push((c, o.probs[t][c], o.boxes[t]));
            }
        }
        d.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut k: Vec<(usize, f64, BBox)> = Vec::new();
        for x in d {
            if k.iter().all(|y| y.0 != x.0 || r_iou(&y.2, &x.2) < 0.5) {
                k.push(x);
            }
        }
        kept.push(k);
    }
    let ents: Vec<Vec<Entity>> = gts
        .iter()
        .map(|g| {
            let mut e: Vec<Entity> = Vec::new();
            for t in g {
                for x in [t.subject, t.object] {
                    if !e.iter().any(|y| *y == x) {
                        e.push(x);
                    }
                }
            }
            e
        })
        .collect();
    let mut aps = Vec::new();
    for cls in 0..ENT {
        let npos: usize = ents.iter().map(|e| e.iter().filter(|x| x.label == cls).count()).sum();
        if npos == 0 {
            continue;
        }
        let mut pool: Vec<(f64, usize, BBox)> = Vec::new();
        for (i, k) in kept.iter().enumerate() {
            for x in k.iter().filter(|x| x.0 == cls) {
                pool.push((x.1, i, x.2));
            }
        }
        pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut used: Vec<Vec<bool>> = ents.iter().map(|e| vec![false; e.len()]).collect();
        let mut tp = Vec::new();
        for (_, img, b) in &pool {
            let mut best: Option<(usize, f64)> = None;
            for (j, e) in ents[*img].iter().enumerate() {
                if e.label != cls {
                    continue;
                }
                let v = r_iou(b, &e.bbox);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            let hit = matches!(best, Some((j, v)) if v >= 0.5 && !used[*img][j]);
            if hit {
                used[*img][best.unwrap().0] = true;
            }
            tp.push(hit);
        }
        let mut sum = 0.0;
        let mut hits = 0;
        let prec: Vec<f64> = tp
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                hits += t as usize;
                hits as f64 / (i + 1) as f64
            })
            .collect();
        for i in 0..tp.len() {
            if tp[i] {
                sum += prec[i..].iter().cloned().fold(0.0, f64::max);
            }
        }
        aps.push(sum / npos as f64);
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

// ---------------------------------------------------------------------------
// Random cases.

pub fn rand_box(rng: &mut SeededRng) -> BBox {
    BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4))
}

pub fn jitter(rng: &mut SeededRng, b: BBox, s: f64) -> BBox {
    BBox::new(
        b.cx + rng.gen_range(-s..s) * b.w,
        b.cy + rng.gen_range(-s..s) * b.h,
        b.w * rng.gen_range(1.0 - s..1.0 + s),
        b.h * rng.gen_range(1.0 - s..1.0 + s),
    )
}

pub fn probs(rng: &mut SeededRng, n: usize, boost: Option<usize>) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n + 1).map(|_| rng.gen_range(0.01..1.0)).collect();
    if let Some(c) = boost {
        v[c] += rng.gen_range(0.0..3.0);
    }
    let z: f64 = v.iter().sum();
    v.iter().map(|x| x / z).collect()
}

pub struct Case {
    pub queries: Vec<Vec<QueryOutput>>,
    pub gts: Vec<SceneGraph>,
    pub seen: HashSet<LabelTriple>,
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = seeded(seed);
    let images = rng.gen_range(1..=5);
    let mut queries = Vec::new();
    let mut gts = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..images {
        let m = if rng.gen_bool(0.15) { 0 } else { rng.gen_range(1..=6) };
        let mut pool: Vec<Entity> = (0..rng.gen_range(2..=4))
            .map(|_| Entity {
                label: rng.gen_range(0..ENT),
                bbox: rand_box(&mut rng),
            })
            .collect();
        pool.dedup();
        let triplets: Vec<Triplet> = (0..m)
            .map(|_| Triplet {
                subject: pool[rng.gen_range(0..pool.len())],
                object: pool[rng.gen_range(0..pool.len())],
                predicate: rng.gen_range(0..PRED),
            })
            .collect();
        for t in &triplets {
            if rng.gen_bool(0.5) {
                seen.insert(t.label_triple());
            }
        }
        let nq = rng.gen_range(3..=12);
        let qs = (0..nq)
            .map(|_| {
                let src = (!triplets.is_empty() && rng.gen_bool(0.75)).then(|| triplets[rng.gen_range(0..triplets.len())]);
                let (sb, ob, hint) = match src {
                    Some(t) => (
                        jitter(&mut rng, t.subject.bbox, 0.2),
                        jitter(&mut rng, t.object.bbox, 0.2),
                        Some((t.subject.label, t.object.label, t.predicate)),
                    ),
                    None => (rand_box(&mut rng), rand_box(&mut rng), None),
                };
                let pb = sb.hull(&ob);
                QueryOutput {
                    probs: [
                        probs(&mut rng, ENT, hint.map(|h| h.0)),
                        probs(&mut rng, ENT, hint.map(|h| h.1)),
                        probs(&mut rng, PRED, hint.map(|h| h.2)),
                    ],
                    boxes: [sb, ob, pb],
                }
            })
            .collect();
        queries.push(qs);
        gts.push(SceneGraph { triplets });
    }
    Case { queries, gts, seen }
}

/// Compares `evaluate` with the reference on random case `seed`. Returns
/// whether the case had a recall strictly between 0 and 100.
pub fn compare_with_reference(seed: u64) -> Result<bool, String> {
    let ks = [3, 8, 20];
    let case = random_case(seed);
    let cfg = EvalSettings {
        ks: ks.to_vec(),
        predicate_classes: PRED,
        iou: 0.5,
    };
    let images: Vec<ImageEval> = case
        .queries
        .iter()
        .zip(&case.gts)
        .map(|(q, g)| ImageEval::from_queries(q, g.clone(), 3).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let rep = evaluate(&images, &case.seen, &cfg);

    let ng: Vec<Vec<Cand>> = case.queries.iter().map(|q| r_candidates(q, 3)).collect();
    let gc: Vec<Vec<Cand>> = ng.iter().map(|c| r_constrained(c)).collect();
    let gts: Vec<Vec<Triplet>> = case.gts.iter().map(|g| g.triplets.clone()).collect();
    let pct = |v: Option<f64>| v.map(|x| 100.0 * x);
    let check = |key: String, want: Option<f64>| -> Result<(), String> {
        match rep.get(&key) == want {
            true => Ok(()),
            false => Err(format!("seed {seed} {key}: {:?} vs reference {want:?}", rep.get(&key))),
        }
    };
    let mut nontrivial = false;
    for k in ks {
        let r = pct(r_recall(&gc, &gts, k));
        let mr = pct(r_mean_recall(&gc, &gts, k));
        check(format!("R@{k}"), r)?;
        check(format!("mR@{k}"), mr)?;
        check(format!("zs-R@{k}"), pct(r_zero_shot(&gc, &gts, &case.seen, k)))?;
        let ngk: Vec<Vec<Cand>> = ng.iter().map(|c| r_ng(c, k)).collect();
        check(format!("ng-R@{k}"), pct(r_recall(&ngk, &gts, usize::MAX)))?;
        check(format!("ng-mR@{k}"), pct(r_mean_recall(&ngk, &gts, usize::MAX)))?;
        if let (Some(r), Some(mr)) = (r, mr) {
            let h = rep.get(&format!("hR@{k}")).ok_or("missing hR")?;
            if (h - if r + mr == 0.0 { 0.0 } else { 2.0 * r * mr / (r + mr) }).abs() >= 1e-12 {
                return Err(format!("seed {seed} hR@{k} = {h}"));
            }
            nontrivial |= r > 0.0 && r < 100.0;
        }
    }
    check("AP50".into(), pct(r_ap(&case.queries, &gts)))?;

    let get = |k: &str| rep.get(k).unwrap_or(0.0);
    if !(get("R@3") <= get("R@8") && get("R@8") <= get("R@20")) {
        return Err(format!("seed {seed}: recall not monotone in K"));
    }
    for k in ks {
        if get(&format!("ng-R@{k}")) < get(&format!("R@{k}")) {
            return Err(format!("seed {seed}: ng-R@{k} below R@{k}"));
        }
    }
    Ok(nontrivial)
}
