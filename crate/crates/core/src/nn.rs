//! Transformer building blocks over [`Tensor`].
//!
//! Weights are stored input-major (`[in, out]`) so a layer is `x @ W + b`.
//! Projections use Xavier-uniform initialization and zero biases. Dropout is
//! not implemented.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::rng::SeededRng;
use crate::tensor::{DType, Tensor};

/// Depth-first walk over named parameters.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t.clone()));
        out
    }

    /// Replaces parameters in visiting order; shapes must agree.
    fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        self.visit_mut("", &mut |name, t| {
            match values.get(i) {
                Some(v) if v.shape() == t.shape() => *t = v.clone(),
                Some(v) if err.is_none() => {
                    err = Some(format!("{name}: expected {:?}, got {:?}", t.shape(), v.shape()))
                }
                None if err.is_none() => err = Some(format!("missing value for {name}")),
                _ => {}
            }
            i += 1;
        });
        if let Some(e) = err {
            return dim_err(e);
        }
        if i != values.len() {
            return dim_err(format!("{} values for {i} parameters", values.len()));
        }
        Ok(())
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<M: Module> Module for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

/// Parameter factory: seeded draws in a fixed dtype.
pub struct Init {
    pub rng: SeededRng,
    pub dtype: DType,
}

impl Init {
    pub fn new(rng: SeededRng, dtype: DType) -> Self {
        Self { rng, dtype }
    }

    pub fn uniform(&mut self, shape: &[usize], limit: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-limit..limit)).collect();
        Tensor::param(data, shape, self.dtype).expect("valid shape")
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::param(vec![value; n], shape, self.dtype).expect("valid shape")
    }

    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(&[fan_in, fan_out], limit)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(init: &mut Init, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: init.xavier(fan_in, fan_out),
            bias: init.constant(&[fan_out], 0.0),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().last() != Some(&self.in_width()) {
            return dim_err(format!(
                "linear expects trailing width {}, got {:?}",
                self.in_width(),
                x.shape()
            ));
        }
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, d: usize) -> Self {
        Self {
            gamma: init.constant(&[d], 1.0),
            beta: init.constant(&[d], 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn param_count(d: usize) -> usize {
        2 * d
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Boolean "allowed" pattern for attention, either shared by every batch
/// entry (`[Lq, Lk]`) or given per entry (`[B, Lq, Lk]`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    allowed: Vec<bool>,
    batch: Option<usize>,
    lq: usize,
    lk: usize,
}

impl AttnMask {
    pub fn shared(lq: usize, lk: usize, allowed: Vec<bool>) -> Result<Self> {
        Self::build(None, lq, lk, allowed)
    }

    pub fn batched(batch: usize, lq: usize, lk: usize, allowed: Vec<bool>) -> Result<Self> {
        Self::build(Some(batch), lq, lk, allowed)
    }

    fn build(batch: Option<usize>, lq: usize, lk: usize, allowed: Vec<bool>) -> Result<Self> {
        let rows = batch.unwrap_or(1) * lq;
        if allowed.len() != rows * lk {
            return dim_err(format!(
                "mask has {} entries, expected {}",
                allowed.len(),
                rows * lk
            ));
        }
        if let Some(r) = (0..rows).find(|&r| !allowed[r * lk..(r + 1) * lk].iter().any(|&a| a)) {
            return contract_err(format!("attention mask row {r} allows no key"));
        }
        Ok(Self {
            allowed,
            batch,
            lq,
            lk,
        })
    }

    /// Queries attend only within their own block of `size` consecutive
    /// positions (`groups` blocks in total).
    pub fn block_diagonal(groups: usize, size: usize) -> Self {
        let l = groups * size;
        let allowed = (0..l * l).map(|i| (i / l) / size == (i % l) / size).collect();
        Self::shared(l, l, allowed).expect("every block row allows itself")
    }

    pub fn is_allowed(&self, b: usize, q: usize, k: usize) -> bool {
        let b = if self.batch.is_some() { b } else { 0 };
        self.allowed[(b * self.lq + q) * self.lk + k]
    }

    /// Additive bias (0 or -inf) broadcastable against `[B, h, Lq, Lk]`.
    fn bias(&self, batch: usize, heads: usize, lq: usize, lk: usize) -> Result<Tensor> {
        if self.lq != lq || self.lk != lk || self.batch.is_some_and(|b| b != batch) {
            return dim_err(format!(
                "mask {:?}x{}x{} does not fit attention {batch}x{lq}x{lk}",
                self.batch, self.lq, self.lk
            ));
        }
        let val = |a: bool| if a { 0.0 } else { f64::NEG_INFINITY };
        match self.batch {
            None => Tensor::new(self.allowed.iter().map(|&a| val(a)).collect(), &[lq, lk]),
            Some(b) => {
                let mut data = Vec::with_capacity(b * heads * lq * lk);
                for bi in 0..b {
                    let block = &self.allowed[bi * lq * lk..(bi + 1) * lq * lk];
                    for _ in 0..heads {
                        data.extend(block.iter().map(|&a| val(a)));
                    }
                }
                Tensor::new(data, &[b, heads, lq, lk])
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return contract_err(format!("width {d} not divisible by {heads} heads"));
        }
        Ok(Self {
            heads,
            q_proj: Linear::new(init, d, d),
            k_proj: Linear::new(init, d, d),
            v_proj: Linear::new(init, d, d),
            out_proj: Linear::new(init, d, d),
        })
    }

    pub fn width(&self) -> usize {
        self.q_proj.in_width()
    }

    pub fn param_count(d: usize) -> usize {
        4 * Linear::param_count(d, d)
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
        Ok(self.forward_with_weights(q, k, v, mask)?.0)
    }

    /// Returns the output `[B, Lq, d]` and the per-head attention weights
    /// `[B, h, Lq, Lk]`.
    pub fn forward_with_weights(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&AttnMask>,
    ) -> Result<(Tensor, Tensor)> {
        let d = self.width();
        let h = self.heads;
        let dh = d / h;
        let (b, lq, lk) = match (q.shape(), k.shape(), v.shape()) {
            ([b, lq, dq], [bk, lk, dk], [bv, lv, dv])
                if *dq == d && *dk == d && *dv == d && b == bk && b == bv && lk == lv =>
            {
                (*b, *lq, *lk)
            }
            _ => {
                return dim_err(format!(
                    "attention width {d}: q {:?}, k {:?}, v {:?}",
                    q.shape(),
                    k.shape(),
                    v.shape()
                ))
            }
        };
        let qh = self
            .q_proj
            .forward(q)?
            .reshape(&[b, lq, h, dh])?
            .permute(&[0, 2, 1, 3])?;
        let kh = self
            .k_proj
            .forward(k)?
            .reshape(&[b, lk, h, dh])?
            .permute(&[0, 2, 3, 1])?;
        let vh = self
            .v_proj
            .forward(v)?
            .reshape(&[b, lk, h, dh])?
            .permute(&[0, 2, 1, 3])?;
        let mut scores = qh.matmul(&kh)?.scale(1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = scores.add(&m.bias(b, h, lq, lk)?)?;
        }
        let weights = scores.softmax(3)?;
        let ctx = weights
            .matmul(&vh)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, lq, d])?;
        Ok((self.out_proj.forward(&ctx)?, weights))
    }
}

impl Module for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.q_proj.visit(&join(prefix, "q"), f);
        self.k_proj.visit(&join(prefix, "k"), f);
        self.v_proj.visit(&join(prefix, "v"), f);
        self.out_proj.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q_proj.visit_mut(&join(prefix, "q"), f);
        self.k_proj.visit_mut(&join(prefix, "k"), f);
        self.v_proj.visit_mut(&join(prefix, "v"), f);
        self.out_proj.visit_mut(&join(prefix, "out"), f);
    }
}

/// Linear layers with ReLU between them and none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(init: &mut Init, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return contract_err("an MLP needs at least input and output widths");
        }
        let layers = widths.windows(2).map(|w| Linear::new(init, w[0], w[1])).collect();
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| Linear::param_count(w[0], w[1])).sum()
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.layers.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.layers.visit_mut(prefix, f);
    }
}

/// Position-wise feed-forward block `d -> hidden -> d` with ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(init, d, hidden),
            down: Linear::new(init, hidden, d),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu())
    }

    pub fn param_count(d: usize, hidden: usize) -> usize {
        Linear::param_count(d, hidden) + Linear::param_count(hidden, d)
    }
}

impl Module for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

/// Positional encoding with the same shape as the tensor it is added to.
#[derive(Debug, Clone)]
pub struct PosEncoding(pub Tensor);

/// Fixed 2-D sine/cosine encoding of shape `(d, h*w)`. The first `d/2`
/// channels encode the row, the rest the column; within each half even
/// channels are sines and odd channels cosines over geometric frequencies.
pub fn sinusoidal_pe_2d(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return contract_err(format!("positional width {d} must be a positive multiple of 4"));
    }
    if h == 0 || w == 0 {
        return contract_err("empty positional grid");
    }
    let half = d / 2;
    let freq: Vec<f64> = (0..half)
        .map(|k| 10000f64.powf((2 * (k / 2)) as f64 / half as f64))
        .collect();
    let mut data = vec![0.0; d * h * w];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let y = (r + 1) as f64 / h as f64 * 2.0 * PI;
            let x = (c + 1) as f64 / w as f64 * 2.0 * PI;
            for k in 0..half {
                let (ay, ax) = (y / freq[k], x / freq[k]);
                let (vy, vx) = if k % 2 == 0 {
                    (ay.sin(), ax.sin())
                } else {
                    (ay.cos(), ax.cos())
                };
                data[k * h * w + p] = vy;
                data[(half + k) * h * w + p] = vx;
            }
        }
    }
    Tensor::new(data, &[d, h * w])
}
