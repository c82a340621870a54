//! Scene-graph evaluation: recall variants and entity AP.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use crate::decoder::LayerPredictions;
use crate::error::{contract_err, Result};
use crate::graph::{BBox, SceneGraph};

pub const IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];

/// `(subject, predicate, object)` label triple.
pub type LabelTriple = (usize, usize, usize);

/// Class probabilities and boxes decoded from one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    /// Softmax over `classes + 1`, per task.
    pub probs: [Vec<f64>; 3],
    pub boxes: [BBox; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredTriplet {
    /// Index of the query that produced the candidate.
    pub query: usize,
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    /// Subject, object and predicate boxes.
    pub boxes: [BBox; 3],
    pub score: f64,
}

impl ScoredTriplet {
    pub fn label_triple(&self) -> LabelTriple {
        (self.subject, self.predicate, self.object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub label: usize,
    pub score: f64,
    pub bbox: BBox,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Per image, the decoded outputs of every query in `layer`.
pub fn decode_queries(layer: &LayerPredictions) -> Result<Vec<Vec<QueryOutput>>> {
    let shape = layer.subject.logits.shape();
    if shape.len() != 3 {
        return contract_err(format!("logits must be (bs, queries, classes), got {shape:?}"));
    }
    let (bs, nq) = (shape[0], shape[1]);
    let tasks = layer.tasks();
    for t in tasks {
        if t.logits.shape()[..2] != [bs, nq] || t.boxes.shape() != [bs, nq, 4] {
            return contract_err("task outputs disagree on batch or query count");
        }
    }
    let widths = tasks.map(|t| t.logits.shape()[2]);
    let out = (0..bs)
        .map(|b| {
            (0..nq)
                .map(|q| {
                    let row = b * nq + q;
                    let probs = std::array::from_fn(|i| {
                        let c = widths[i];
                        softmax_row(&tasks[i].logits.data()[row * c..(row + 1) * c])
                    });
                    let boxes = std::array::from_fn(|i| {
                        let v = &tasks[i].boxes.data()[row * 4..row * 4 + 4];
                        BBox::new(v[0], v[1], v[2], v[3])
                    });
                    QueryOutput { probs, boxes }
                })
                .collect()
        })
        .collect();
    Ok(out)
}

/// Most likely non-∅ class and its probability; ties go to the lower index.
fn best_class(probs: &[f64]) -> (usize, f64) {
    let mut best = (0, probs[0]);
    for (c, &p) in probs[..probs.len() - 1].iter().enumerate().skip(1) {
        if p > best.1 {
            best = (c, p);
        }
    }
    best
}

/// Candidate triplets from one image's queries, ranked by descending score.
///
/// Every query contributes one candidate per each of its `top_k` most likely
/// non-∅ predicates. The sort is stable, so equal scores keep query order.
pub fn score_queries(queries: &[QueryOutput], top_k: usize) -> Result<Vec<ScoredTriplet>> {
    if top_k == 0 {
        return contract_err("top_k_predicates must be at least 1");
    }
    let mut out = Vec::with_capacity(queries.len() * top_k);
    for (q, o) in queries.iter().enumerate() {
        let (s, ps) = best_class(&o.probs[0]);
        let (ob, po) = best_class(&o.probs[1]);
        let pp = &o.probs[2];
        let mut order: Vec<usize> = (0..pp.len() - 1).collect();
        order.sort_by(|&a, &b| pp[b].total_cmp(&pp[a]));
        for &p in order.iter().take(top_k) {
            out.push(ScoredTriplet {
                query: q,
                subject: s,
                object: ob,
                predicate: p,
                boxes: o.boxes,
                score: ps * po * pp[p],
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Ranked candidates for every image of the final decoder layer.
pub fn score_triplets(layer: &LayerPredictions, top_k: usize) -> Result<Vec<Vec<ScoredTriplet>>> {
    decode_queries(layer)?.iter().map(|q| score_queries(q, top_k)).collect()
}

/// Keeps the best-scoring predicate of each query (one per subject-object pair).
pub fn graph_constrained(cands: &[ScoredTriplet]) -> Vec<ScoredTriplet> {
    let mut seen = HashSet::new();
    cands.iter().filter(|c| seen.insert(c.query)).copied().collect()
}

/// Unconstrained candidates at budget `k`: every predicate candidate of the
/// `k` best pairs, in score order. This is a superset of the graph-constrained
/// top-`k`, so unconstrained recall is never lower.
pub fn unconstrained_top_k(cands: &[ScoredTriplet], k: usize) -> Vec<ScoredTriplet> {
    let pairs: HashSet<usize> = graph_constrained(cands).iter().take(k).map(|c| c.query).collect();
    cands.iter().filter(|c| pairs.contains(&c.query)).copied().collect()
}

/// Subject and object detections of every query, pooled.
pub fn entity_detections(queries: &[QueryOutput]) -> Vec<Detection> {
    let mut out = Vec::with_capacity(queries.len() * 2);
    for o in queries {
        for task in 0..2 {
            let (label, score) = best_class(&o.probs[task]);
            out.push(Detection {
                label,
                score,
                bbox: o.boxes[task],
            });
        }
    }
    out
}

fn triplet_hit(c: &ScoredTriplet, gt: &crate::graph::Triplet, iou: f64) -> bool {
    c.label_triple() == gt.label_triple()
        && c.boxes[0].iou(&gt.subject.bbox) >= iou
        && c.boxes[1].iou(&gt.object.bbox) >= iou
}

/// For each GT triplet, the rank of the candidate that consumed it.
///
/// Candidates are visited in rank order and each takes the first unconsumed
/// GT it matches, so a GT counts as recalled at K iff its rank is below K.
pub fn match_triplets(cands: &[ScoredTriplet], gt: &SceneGraph, iou: f64) -> Vec<Option<usize>> {
    let mut hit = vec![None; gt.len()];
    let mut left = gt.len();
    for (rank, c) in cands.iter().enumerate() {
        if left == 0 {
            break;
        }
        if let Some(j) = (0..gt.len()).find(|&j| hit[j].is_none() && triplet_hit(c, &gt.triplets[j], iou)) {
            hit[j] = Some(rank);
            left -= 1;
        }
    }
    hit
}

fn within(rank: Option<usize>, k: usize) -> bool {
    rank.is_some_and(|r| r < k)
}

/// Mean over images with at least one GT of the recalled fraction.
/// `None` when no image has GT.
pub fn recall_at_k(hits: &[Vec<Option<usize>>], k: usize) -> Option<f64> {
    let per: Vec<f64> = hits
        .iter()
        .filter(|h| !h.is_empty())
        .map(|h| h.iter().filter(|&&r| within(r, k)).count() as f64 / h.len() as f64)
        .collect();
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

/// Per-class recall: for each predicate class, the mean over images
/// containing it of that class's recalled fraction.
pub fn per_class_recall(hits: &[Vec<Option<usize>>], gts: &[SceneGraph], classes: usize, k: usize) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; classes];
    let mut images = vec![0usize; classes];
    for (h, gt) in hits.iter().zip(gts) {
        let mut tot = vec![0usize; classes];
        let mut got = vec![0usize; classes];
        for (t, &r) in gt.triplets.iter().zip(h) {
            tot[t.predicate] += 1;
            got[t.predicate] += within(r, k) as usize;
        }
        for c in 0..classes {
            if tot[c] > 0 {
                sum[c] += got[c] as f64 / tot[c] as f64;
                images[c] += 1;
            }
        }
    }
    (0..classes).map(|c| (images[c] > 0).then(|| sum[c] / images[c] as f64)).collect()
}

/// Mean of the per-class recalls over classes present in the GT.
pub fn mean_recall_at_k(hits: &[Vec<Option<usize>>], gts: &[SceneGraph], classes: usize, k: usize) -> Option<f64> {
    let present: Vec<f64> = per_class_recall(hits, gts, classes, k).into_iter().flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn harmonic_recall(r: f64, mr: f64) -> f64 {
    if r + mr == 0.0 {
        0.0
    } else {
        2.0 * r * mr / (r + mr)
    }
}

/// Recall over GT triplets whose label triple never occurs in training.
/// `None` when there are none.
pub fn zero_shot_recall(
    hits: &[Vec<Option<usize>>],
    gts: &[SceneGraph],
    seen: &HashSet<LabelTriple>,
    k: usize,
) -> Option<f64> {
    let restricted: Vec<Vec<Option<usize>>> = hits
        .iter()
        .zip(gts)
        .map(|(h, gt)| {
            gt.triplets
                .iter()
                .zip(h)
                .filter(|(t, _)| !seen.contains(&t.label_triple()))
                .map(|(_, &r)| r)
                .collect()
        })
        .collect();
    recall_at_k(&restricted, k)
}

/// Class-wise greedy suppression: a detection is dropped if a kept,
/// higher-ranked detection of the same class overlaps it with IoU ≥ `iou`.
pub fn suppress(dets: &[Detection], iou: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if !kept.iter().any(|k| k.label == d.label && k.bbox.iou(&d.bbox) >= iou) {
            kept.push(d);
        }
    }
    kept
}

/// Distinct entities of a graph, in first-appearance order.
pub fn gt_entities(gt: &SceneGraph) -> Vec<crate::graph::Entity> {
    let mut out: Vec<crate::graph::Entity> = Vec::new();
    for t in &gt.triplets {
        for e in [t.subject, t.object] {
            if !out.contains(&e) {
                out.push(e);
            }
        }
    }
    out
}

/// Entity AP at IoU `iou`, all-points interpolated and averaged over the
/// classes present in the GT. Detections are suppressed per image first.
/// `None` when the GT has no entities.
pub fn ap_entities(dets: &[Vec<Detection>], gts: &[SceneGraph], iou: f64) -> Option<f64> {
    let gt_ents: Vec<_> = gts.iter().map(gt_entities).collect();
    let kept: Vec<Vec<Detection>> = dets.iter().map(|d| suppress(d, iou)).collect();
    let mut classes: BTreeMap<usize, usize> = BTreeMap::new();
    for e in gt_ents.iter().flatten() {
        *classes.entry(e.label).or_default() += 1;
    }
    if classes.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for (&c, &npos) in &classes {
        let mut pool: Vec<(usize, Detection)> = kept
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(|d| d.label == c).map(move |d| (i, *d)))
            .collect();
        pool.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut used: Vec<Vec<bool>> = gt_ents.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = Vec::with_capacity(pool.len());
        for (img, d) in &pool {
            let best = gt_ents[*img]
                .iter()
                .enumerate()
                .filter(|(_, e)| e.label == c)
                .map(|(j, e)| (j, d.bbox.iou(&e.bbox)))
                .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                    Some(a) if a.1 >= x.1 => Some(a),
                    _ => Some(x),
                });
            let ok = match best {
                Some((j, v)) if v >= iou && !used[*img][j] => {
                    used[*img][j] = true;
                    true
                }
                _ => false,
            };
            tp.push(ok);
        }
        total += average_precision(&tp, npos);
    }
    Some(total / classes.len() as f64)
}

/// All-points interpolated AP of a ranked TP/FP sequence.
pub fn average_precision(tp: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut prec: Vec<f64> = tp
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            hits += t as usize;
            hits as f64 / (i + 1) as f64
        })
        .collect();
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    // recall steps by exactly 1/npos at every true positive
    let sum: f64 = tp.iter().zip(&prec).filter(|(&t, _)| t).map(|(_, p)| p).sum();
    sum / npos as f64
}

/// Everything needed to evaluate one image.
#[derive(Debug, Clone)]
pub struct ImageEval {
    /// Ranked candidates with the full top-k predicate expansion.
    pub candidates: Vec<ScoredTriplet>,
    pub detections: Vec<Detection>,
    pub gt: SceneGraph,
}

impl ImageEval {
    pub fn from_queries(queries: &[QueryOutput], gt: SceneGraph, top_k: usize) -> Result<Self> {
        Ok(Self {
            candidates: score_queries(queries, top_k)?,
            detections: entity_detections(queries),
            gt,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub predicate_classes: usize,
    pub iou: f64,
}

impl EvalSettings {
    pub fn new(predicate_classes: usize) -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            predicate_classes,
            iou: IOU_THRESHOLD,
        }
    }
}

/// Metric values in percent. Missing values mean "not applicable".
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, Option<f64>)>,
}

impl MetricReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).and_then(|(_, v)| *v)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _)| k == key)
    }

    /// One `key=value` line per metric, 4 decimals, `NA` when undefined.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            match v {
                Some(v) => writeln!(s, "{k}={v:.4}"),
                None => writeln!(s, "{k}=NA"),
            }
            .expect("writing to a String");
        }
        s
    }
}

/// Evaluates graph-constrained and unconstrained recalls, mean and harmonic
/// recall, zero-shot recall and entity AP.
pub fn evaluate(images: &[ImageEval], seen: &HashSet<LabelTriple>, cfg: &EvalSettings) -> MetricReport {
    let gts: Vec<SceneGraph> = images.iter().map(|i| i.gt.clone()).collect();
    let gc: Vec<Vec<Option<usize>>> = images
        .iter()
        .map(|i| match_triplets(&graph_constrained(&i.candidates), &i.gt, cfg.iou))
        .collect();
    let pct = |v: Option<f64>| v.map(|x| 100.0 * x);
    let mut e = Vec::new();
    for &k in &cfg.ks {
        let r = pct(recall_at_k(&gc, k));
        let mr = pct(mean_recall_at_k(&gc, &gts, cfg.predicate_classes, k));
        let hr = r.zip(mr).map(|(a, b)| harmonic_recall(a, b));
        e.push((format!("R@{k}"), r));
        e.push((format!("mR@{k}"), mr));
        e.push((format!("hR@{k}"), hr));
    }
    for &k in &cfg.ks {
        e.push((format!("zs-R@{k}"), pct(zero_shot_recall(&gc, &gts, seen, k))));
    }
    for &k in &cfg.ks {
        let ng: Vec<Vec<Option<usize>>> = images
            .iter()
            .map(|i| match_triplets(&unconstrained_top_k(&i.candidates, k), &i.gt, cfg.iou))
            .collect();
        e.push((format!("ng-R@{k}"), pct(recall_at_k(&ng, usize::MAX))));
        e.push((format!("ng-mR@{k}"), pct(mean_recall_at_k(&ng, &gts, cfg.predicate_classes, usize::MAX))));
    }
    let dets: Vec<Vec<Detection>> = images.iter().map(|i| i.detections.clone()).collect();
    e.push(("AP50".into(), pct(ap_entities(&dets, &gts, cfg.iou))));
    if let Some(&kmax) = cfg.ks.iter().max() {
        for (c, v) in per_class_recall(&gc, &gts, cfg.predicate_classes, kmax).into_iter().enumerate() {
            e.push((format!("R@{kmax}/predicate_{c}"), pct(v)));
        }
    }
    MetricReport { entries: e }
}
