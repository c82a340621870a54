//! Set-prediction matching and training loss.
//!
//! For every image and query group, per-layer triplet costs are summed over
//! decoder layers and solved once with the Hungarian algorithm; the result
//! is reused for the loss of every layer. Matching sees plain numbers only,
//! so gradients flow through the loss alone.

use crate::decoder::{LayerPredictions, TripletPredictions};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::graph::{SceneGraph, MIN_EXTENT};
use crate::tensor::Tensor;

/// Differentiable GIoU between matching rows of two `(M, 4)` box tensors in
/// `(cx, cy, w, h)` form. Returns `(M,)`.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.rank() != 2 || a.shape()[1] != 4 {
        return dim_err(format!("giou expects two (M, 4) tensors, got {:?} and {:?}", a.shape(), b.shape()));
    }
    let col = |t: &Tensor, i: usize| -> Result<Tensor> {
        let m = t.shape()[0];
        t.narrow(1, i, 1)?.reshape(&[m])
    };
    let corners = |t: &Tensor| -> Result<[Tensor; 4]> {
        let (cx, cy) = (col(t, 0)?, col(t, 1)?);
        let hw = col(t, 2)?.clamp_min(MIN_EXTENT).scale(0.5);
        let hh = col(t, 3)?.clamp_min(MIN_EXTENT).scale(0.5);
        Ok([cx.sub(&hw)?, cy.sub(&hh)?, cx.add(&hw)?, cy.add(&hh)?])
    };
    let [a1, b1, a2, b2] = corners(a)?;
    let [c1, d1, c2, d2] = corners(b)?;
    let area = |x1: &Tensor, y1: &Tensor, x2: &Tensor, y2: &Tensor| x2.sub(x1)?.mul(&y2.sub(y1)?);
    let iw = a2.minimum(&c2)?.sub(&a1.maximum(&c1)?)?.clamp_min(0.0);
    let ih = b2.minimum(&d2)?.sub(&b1.maximum(&d1)?)?.clamp_min(0.0);
    let inter = iw.mul(&ih)?;
    let union = area(&a1, &b1, &a2, &b2)?.add(&area(&c1, &d1, &c2, &d2)?)?.sub(&inter)?;
    let hull = area(&a1.minimum(&c1)?, &b1.minimum(&d1)?, &a2.maximum(&c2)?, &b2.maximum(&d2)?)?;
    inter.div(&union)?.sub(&hull.sub(&union)?.div(&hull)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostCoef {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostCoef {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Cost coefficients for the subject, object and predicate terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostWeights {
    pub tasks: [CostCoef; 3],
}

impl CostWeights {
    pub fn uniform(coef: CostCoef) -> Self {
        Self { tasks: [coef; 3] }
    }
}

/// Dense `rows x cols` matrix, row-major. Rows are queries, columns ground
/// truth triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(format!("{} entries for a {rows}x{cols} cost matrix", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Cost of assigning each query in `queries` of image `image` to each GT
/// triplet, summed over subject, object and predicate.
pub fn triplet_cost_matrix(
    layer: &LayerPredictions,
    image: usize,
    queries: std::ops::Range<usize>,
    gt: &SceneGraph,
    w: &CostWeights,
) -> Result<CostMatrix> {
    let n = queries.len();
    let m = gt.len();
    let mut data = vec![0.0; n * m];
    for (task, out) in layer.tasks().into_iter().enumerate() {
        let coef = w.tasks[task];
        let (bs, kn, c) = match out.logits.shape() {
            &[bs, kn, c] => (bs, kn, c),
            s => return dim_err(format!("logits must be (bs, KN, C), got {s:?}")),
        };
        if image >= bs || queries.end > kn {
            return contract_err(format!("image {image} / queries {queries:?} outside predictions ({bs}, {kn})"));
        }
        for (r, q) in queries.clone().enumerate() {
            let base = image * kn + q;
            let probs = softmax_row(&out.logits.data()[base * c..(base + 1) * c]);
            let b = &out.boxes.data()[base * 4..(base + 1) * 4];
            let pred = crate::graph::BBox::new(b[0], b[1], b[2], b[3]);
            for (j, t) in gt.triplets.iter().enumerate() {
                let e = t.entity(task);
                if e.label + 1 >= c {
                    return contract_err(format!("label {} outside {} classes", e.label, c - 1));
                }
                let g = e.bbox.to_array();
                let l1: f64 = b.iter().zip(g).map(|(p, g)| (p - g).abs()).sum();
                data[r * m + j] += -coef.cls * probs[e.label] + coef.l1 * l1 + coef.giou * (1.0 - pred.giou(&e.bbox));
            }
        }
    }
    CostMatrix::new(n, m, data)
}

/// Elementwise sum of per-layer cost matrices.
pub fn aggregate_layer_costs(costs: &[CostMatrix]) -> Result<CostMatrix> {
    let first = costs.first().ok_or_else(|| Error::Contract("no cost matrices to aggregate".into()))?;
    let mut out = first.clone();
    for c in &costs[1..] {
        if c.rows != out.rows || c.cols != out.cols {
            return dim_err(format!("cost matrix {}x{} vs {}x{}", c.rows, c.cols, out.rows, out.cols));
        }
        for (o, v) in out.data.iter_mut().zip(&c.data) {
            *o += v;
        }
    }
    Ok(out)
}

/// Minimum-cost assignment of every row of an `n x m` matrix (`n <= m`) to
/// a distinct column. Returns the column per row.
fn solve_rows(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal cost of assigning `rows` to distinct columns from `cols`.
fn sub_optimum(t: &[f64], m_all: usize, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let sub: Vec<f64> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| t[r * m_all + c]))
        .collect();
    let sol = solve_rows(&sub, rows.len(), cols.len());
    let total = rows.iter().zip(&sol).map(|(&r, &c)| t[r * m_all + cols[c]]).sum();
    (total, sol.into_iter().map(|c| cols[c]).collect())
}

/// Minimum-cost injective assignment of all GT columns to queries.
///
/// Returns, for each GT index, the matched query row. Among optimal
/// assignments the lexicographically smallest `(GT, query)` sequence wins:
/// GT 0 takes the lowest query that still admits an optimal completion,
/// then GT 1, and so on.
pub fn hungarian(cost: &CostMatrix) -> Result<Vec<usize>> {
    let (n, m) = (cost.rows, cost.cols);
    if let Some(i) = cost.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite cost {} at ({}, {})",
            cost.data[i],
            i / m.max(1),
            i % m.max(1)
        )));
    }
    if n < m {
        return contract_err(format!("{n} queries cannot cover {m} ground-truth triplets"));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    // transpose to GT rows x query columns
    let t: Vec<f64> = (0..m).flat_map(|j| (0..n).map(move |i| (i, j))).map(|(i, j)| cost.get(i, j)).collect();
    let all_rows: Vec<usize> = (0..m).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let (best, mut current) = sub_optimum(&t, n, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + best.abs());

    let mut fixed_cost = 0.0;
    let mut free_cols = all_cols;
    for g in 0..m {
        let rest: Vec<usize> = (g + 1..m).collect();
        let mut chosen = current[g];
        for &q in free_cols.iter().take_while(|&&q| q < current[g]) {
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != q).collect();
            let (tail, sol) = sub_optimum(&t, n, &rest, &cols);
            if fixed_cost + t[g * n + q] + tail <= best + tol {
                chosen = q;
                current[g + 1..].copy_from_slice(&sol);
                break;
            }
        }
        current[g] = chosen;
        fixed_cost += t[g * n + chosen];
        free_cols.retain(|&c| c != chosen);
    }
    Ok(current)
}

/// Sum of the matched entries, accumulated in GT order.
pub fn assignment_cost(cost: &CostMatrix, asg: &[usize]) -> f64 {
    asg.iter().enumerate().map(|(j, &q)| cost.get(q, j)).sum()
}

/// `images[b][g][j]` is the query (within group `g`) matched to GT `j` of
/// image `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub groups: usize,
    pub per_group: usize,
    pub images: Vec<Vec<Vec<usize>>>,
}

impl Assignment {
    pub fn pair_count(&self) -> usize {
        self.images.iter().flatten().map(Vec::len).sum()
    }

    /// `(image, global query index, gt index)` for every matched pair.
    pub fn pairs(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (b, groups) in self.images.iter().enumerate() {
            for (g, asg) in groups.iter().enumerate() {
                for (j, &q) in asg.iter().enumerate() {
                    out.push((b, g * self.per_group + q, j));
                }
            }
        }
        out
    }
}

/// Independent matching per image and query group, on costs summed over
/// all decoder layers.
pub fn one_to_many_match(preds: &TripletPredictions, gt: &[SceneGraph], w: &CostWeights) -> Result<Assignment> {
    if preds.groups == 0 {
        return contract_err("at least one query group required");
    }
    if gt.len() != preds.batch() {
        return dim_err(format!("{} ground-truth graphs for a batch of {}", gt.len(), preds.batch()));
    }
    let n = preds.per_group;
    let images = gt
        .iter()
        .enumerate()
        .map(|(b, g)| {
            (0..preds.groups)
                .map(|k| {
                    let per_layer = preds
                        .layers
                        .iter()
                        .map(|l| triplet_cost_matrix(l, b, k * n..(k + 1) * n, g, w))
                        .collect::<Result<Vec<_>>>()?;
                    hungarian(&aggregate_layer_costs(&per_layer)?)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Assignment {
        groups: preds.groups,
        per_group: n,
        images,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub cost: CostWeights,
    pub eos_coef: f64,
    pub l1: f64,
    pub giou: f64,
    /// Per-predicate CE weights (no entry for "no relation").
    pub predicate_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cost: CostWeights::default(),
            eos_coef: 0.1,
            l1: 5.0,
            giou: 2.0,
            predicate_weights: None,
        }
    }
}

/// Normalized loss terms of one task, already scaled by their coefficients.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TaskLoss {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl TaskLoss {
    pub fn sum(&self) -> f64 {
        self.class + self.l1 + self.giou
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub tasks: [TaskLoss; 3],
    pub matches: usize,
}

/// Cross-entropy on matched labels (no-relation for the rest, scaled by
/// `eos_coef`) plus L1 and GIoU box terms for matched queries, summed over
/// layers and groups and divided by the number of matched pairs.
pub fn triplet_loss(
    preds: &TripletPredictions,
    gt: &[SceneGraph],
    asg: &Assignment,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let bs = preds.batch();
    let kn = preds.groups * preds.per_group;
    if gt.len() != bs || asg.images.len() != bs || asg.per_group != preds.per_group || asg.groups != preds.groups {
        return contract_err("assignment does not fit predictions");
    }
    let pairs = asg.pairs();
    for &(b, q, j) in &pairs {
        if q >= kn || j >= gt[b].len() {
            return contract_err(format!("assignment entry (image {b}, query {q}, gt {j}) out of range"));
        }
    }
    for (b, groups) in asg.images.iter().enumerate() {
        for asg_g in groups {
            let mut seen = asg_g.clone();
            seen.sort_unstable();
            seen.dedup();
            if asg_g.len() != gt[b].len() || seen.len() != asg_g.len() || seen.last().is_some_and(|&q| q >= asg.per_group) {
                return contract_err(format!("assignment for image {b} is not injective over its ground truth"));
            }
        }
    }
    let norm = pairs.len().max(1) as f64;
    let rows: Vec<usize> = pairs.iter().map(|&(b, q, _)| b * kn + q).collect();

    let mut total = Tensor::scalar(0.0);
    let mut tasks = [TaskLoss::default(); 3];
    for layer in &preds.layers {
        for (task, out) in layer.tasks().into_iter().enumerate() {
            let c = out.logits.shape()[2];
            let none = c - 1;
            let mut target = vec![none; bs * kn];
            let mut weight = vec![cfg.eos_coef; bs * kn];
            for (&row, &(b, _, j)) in rows.iter().zip(&pairs) {
                let label = gt[b].triplets[j].entity(task).label;
                if label >= none {
                    return contract_err(format!("label {label} outside {none} classes"));
                }
                target[row] = label;
                weight[row] = match (&cfg.predicate_weights, task) {
                    (Some(w), 2) => *w.get(label).ok_or_else(|| {
                        Error::Contract(format!("no class weight for predicate {label}"))
                    })?,
                    _ => 1.0,
                };
            }
            let logp = out.logits.reshape(&[bs * kn, c])?.log_softmax(1)?.gather_last(&target)?;
            let ce = logp.mul(&Tensor::new(weight, &[bs * kn])?)?.sum().scale(-1.0 / norm);

            let mut term = ce.clone();
            let mut l1_val = 0.0;
            let mut giou_val = 0.0;
            if !pairs.is_empty() {
                let pred_boxes = out.boxes.reshape(&[bs * kn, 4])?.index_select(0, &rows)?;
                let gt_boxes: Vec<f64> = pairs
                    .iter()
                    .flat_map(|&(b, _, j)| gt[b].triplets[j].entity(task).bbox.to_array())
                    .collect();
                let gt_boxes = Tensor::new(gt_boxes, &[pairs.len(), 4])?;
                let l1 = pred_boxes.sub(&gt_boxes)?.abs().sum().scale(cfg.l1 / norm);
                let gl = giou_tensor(&pred_boxes, &gt_boxes)?
                    .neg()
                    .add_scalar(1.0)
                    .sum()
                    .scale(cfg.giou / norm);
                l1_val = l1.item()?;
                giou_val = gl.item()?;
                term = term.add(&l1)?.add(&gl)?;
            }
            tasks[task].class += ce.item()?;
            tasks[task].l1 += l1_val;
            tasks[task].giou += giou_val;
            total = total.add(&term)?;
        }
    }
    Ok(LossBreakdown {
        total,
        tasks,
        matches: pairs.len(),
    })
}

/// `w_c = min(max((alpha / f_c)^beta, 1), cap)`; classes never seen in
/// training (`f_c = 0`) get `cap`.
pub fn predicate_class_weights(freqs: &[f64], alpha: f64, beta: f64, cap: f64) -> Vec<f64> {
    freqs
        .iter()
        .map(|&f| {
            if f <= 0.0 {
                cap
            } else {
                (alpha / f).powf(beta).max(1.0).min(cap)
            }
        })
        .collect()
}
