//! Triplet decoder with task-specific queries.
//!
//! Three variants share the same building blocks:
//!
//! * `Sts`: one decoder whose layers process the subject, object and
//!   predicate query streams in parallel with shared weights. Each layer may
//!   first fuse a triplet's three queries through per-task MLPs and run
//!   self-attention over the three queries of every triplet.
//! * `Tts`: one independent decoder stack per task.
//! * `Sta`: a single task-agnostic query set feeding all prediction heads.
//!
//! Queries are laid out as `K` groups of `N`; rows `[g*N, (g+1)*N)` belong
//! to group `g`. With `K > 1` task self-attention is confined to a group.

use std::fmt;
use std::str::FromStr;

use crate::encoder::ImageFeatures;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::nn::{
    join, AttnMask, FeedForward, Init, LayerNorm, Linear, Mlp, Module, MultiHeadAttention,
};
use crate::tensor::Tensor;

pub const TASKS: [&str; 3] = ["subject", "object", "predicate"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantTag {
    Sta,
    Sts,
    Tts,
}

impl VariantTag {
    pub const ALL: [VariantTag; 3] = [VariantTag::Sta, VariantTag::Sts, VariantTag::Tts];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantTag::Sta => "sta",
            VariantTag::Sts => "sts",
            VariantTag::Tts => "tts",
        }
    }

    fn query_sets(self) -> usize {
        match self {
            VariantTag::Sta => 1,
            _ => 3,
        }
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sta" => Ok(VariantTag::Sta),
            "sts" => Ok(VariantTag::Sts),
            "tts" => Ok(VariantTag::Tts),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected sta, sts or tts)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub variant: VariantTag,
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Queries per group (`N`).
    pub queries: usize,
    /// Query groups (`K`).
    pub groups: usize,
    pub entity_classes: usize,
    pub predicate_classes: usize,
    /// Per-layer fusion of each triplet's queries.
    pub relation_queries: bool,
    /// Per-layer self-attention inside each triplet.
    pub triplet_attention: bool,
}

impl DecoderConfig {
    /// Default switches per variant: STS uses both, TTS only the fusion MLP,
    /// STA neither.
    pub fn for_variant(variant: VariantTag, d: usize, layers: usize, heads: usize, ffn: usize) -> Self {
        Self {
            variant,
            layers,
            d,
            heads,
            ffn,
            queries: 20,
            groups: 1,
            entity_classes: 12,
            predicate_classes: 6,
            relation_queries: variant != VariantTag::Sta,
            triplet_attention: variant == VariantTag::Sts,
        }
    }

    pub fn total_queries(&self) -> usize {
        self.groups * self.queries
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d", self.d),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("queries", self.queries),
            ("groups", self.groups),
            ("entity_classes", self.entity_classes),
            ("predicate_classes", self.predicate_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.variant == VariantTag::Sta && (self.relation_queries || self.triplet_attention) {
            return Err(Error::Config(
                "the sta variant has a single query set; relation fusion and triplet attention need three".into(),
            ));
        }
        Ok(())
    }
}

/// Learned content queries and positional embeddings, one pair per task
/// (or a single pair for STA), each `(K*N, d)`.
#[derive(Debug, Clone)]
pub struct TaskQuerySet {
    pub content: Vec<Tensor>,
    pub pos: Vec<Tensor>,
    pub groups: usize,
    pub per_group: usize,
}

impl TaskQuerySet {
    pub fn new(init: &mut Init, sets: usize, groups: usize, per_group: usize, d: usize) -> Self {
        let rows = groups * per_group;
        let content = (0..sets).map(|_| init.constant(&[rows, d], 0.0)).collect();
        let pos = (0..sets).map(|_| init.uniform(&[rows, d], 1.0)).collect();
        Self {
            content,
            pos,
            groups,
            per_group,
        }
    }
}

impl Module for TaskQuerySet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        let names = set_names(self.content.len());
        for (i, n) in names.iter().enumerate() {
            f(&join(prefix, &format!("content.{n}")), &self.content[i]);
            f(&join(prefix, &format!("pos.{n}")), &self.pos[i]);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let names = set_names(self.content.len());
        for (i, n) in names.iter().enumerate() {
            f(&join(prefix, &format!("content.{n}")), &mut self.content[i]);
            f(&join(prefix, &format!("pos.{n}")), &mut self.pos[i]);
        }
    }
}

fn set_names(n: usize) -> Vec<&'static str> {
    if n == 1 {
        vec!["shared"]
    } else {
        TASKS.to_vec()
    }
}

/// Adds `MLP_x([q_s; q_o; q_p])` to each task query, triplet by triplet.
#[derive(Debug, Clone)]
pub struct RelationFusion {
    pub mlps: Vec<Mlp>,
}

impl RelationFusion {
    pub fn new(init: &mut Init, d: usize) -> Result<Self> {
        let mlps = (0..3)
            .map(|_| Mlp::new(init, &Self::widths(d)))
            .collect::<Result<_>>()?;
        Ok(Self { mlps })
    }

    pub fn widths(d: usize) -> [usize; 4] {
        [3 * d, d, d, d]
    }

    pub fn param_count(d: usize) -> usize {
        3 * Mlp::param_count(&Self::widths(d))
    }

    pub fn forward(&self, q: [&Tensor; 3]) -> Result<[Tensor; 3]> {
        if q[0].shape() != q[1].shape() || q[0].shape() != q[2].shape() {
            return dim_err(format!(
                "task query shapes differ: {:?}, {:?}, {:?}",
                q[0].shape(),
                q[1].shape(),
                q[2].shape()
            ));
        }
        let cat = Tensor::concat(&q, q[0].rank() - 1)?;
        let out = |i: usize| q[i].add(&self.mlps[i].forward(&cat)?);
        Ok([out(0)?, out(1)?, out(2)?])
    }
}

impl Module for RelationFusion {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (m, n) in self.mlps.iter().zip(TASKS) {
            m.visit(&join(prefix, n), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (m, n) in self.mlps.iter_mut().zip(TASKS) {
            m.visit_mut(&join(prefix, n), f);
        }
    }
}

/// Self-attention over the length-3 sequence `(s, o, p)` of every triplet.
#[derive(Debug, Clone)]
pub struct TripletAttention {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl TripletAttention {
    pub fn new(init: &mut Init, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(init, d, heads)?,
            norm: LayerNorm::new(init, d),
        })
    }

    pub fn param_count(d: usize) -> usize {
        MultiHeadAttention::param_count(d) + LayerNorm::param_count(d)
    }

    pub fn forward(&self, q: [&Tensor; 3], pe: [&Tensor; 3]) -> Result<[Tensor; 3]> {
        let (x, shape) = to_triplets(q)?;
        let (p, _) = to_triplets(pe)?;
        let qk = x.add(&p)?;
        let y = self.norm.forward(&x.add(&self.attn.forward(&qk, &qk, &x, None)?)?)?;
        from_triplets(&y, &shape)
    }
}

/// `3 x (bs, KN, d)` to `(bs*KN, 3, d)`.
pub fn to_triplets(q: [&Tensor; 3]) -> Result<(Tensor, Vec<usize>)> {
    let shape = q[0].shape().to_vec();
    if shape.len() != 3 || q.iter().any(|t| t.shape() != shape.as_slice()) {
        return dim_err("triplet streams must share a (bs, KN, d) shape");
    }
    let x = Tensor::stack(&q, 2)?.reshape(&[shape[0] * shape[1], 3, shape[2]])?;
    Ok((x, shape))
}

/// Inverse of [`to_triplets`].
pub fn from_triplets(x: &Tensor, shape: &[usize]) -> Result<[Tensor; 3]> {
    let y = x.reshape(&[shape[0], shape[1], 3, shape[2]])?;
    let take = |i: usize| y.narrow(2, i, 1)?.reshape(shape);
    Ok([take(0)?, take(1)?, take(2)?])
}

impl Module for TripletAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Post-norm layer: query self-attention, cross-attention to image tokens,
/// feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(init: &mut Init, d: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(init, d, heads)?,
            norm1: LayerNorm::new(init, d),
            cross_attn: MultiHeadAttention::new(init, d, heads)?,
            norm2: LayerNorm::new(init, d),
            ffn: FeedForward::new(init, d, ffn),
            norm3: LayerNorm::new(init, d),
        })
    }

    pub fn param_count(d: usize, ffn: usize) -> usize {
        2 * MultiHeadAttention::param_count(d)
            + FeedForward::param_count(d, ffn)
            + 3 * LayerNorm::param_count(d)
    }

    /// Returns the updated queries and the head-averaged cross-attention
    /// weights `(B, Lq, HW)`.
    pub fn forward(
        &self,
        x: &Tensor,
        pe: &Tensor,
        memory: &ImageFeatures,
        mask: Option<&AttnMask>,
    ) -> Result<(Tensor, Tensor)> {
        let qk = x.add(pe)?;
        let x = self.norm1.forward(&x.add(&self.self_attn.forward(&qk, &qk, x, mask)?)?)?;
        let keys = memory.tokens.add(&memory.pe.0)?;
        let (ctx, w) = self
            .cross_attn
            .forward_with_weights(&x.add(pe)?, &keys, &memory.tokens, None)?;
        let x = self.norm2.forward(&x.add(&ctx)?)?;
        let x = self.norm3.forward(&x.add(&self.ffn.forward(&x)?)?)?;
        let heads = self.cross_attn.heads;
        let avg = w.detach().sum_axis(1)?.scale(1.0 / heads as f64);
        Ok((x, avg))
    }
}

impl Module for DecoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.norm3.visit(&join(prefix, "norm3"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.norm3.visit_mut(&join(prefix, "norm3"), f);
    }
}

/// `L` decoder layers plus the output norm applied before the heads.
#[derive(Debug, Clone)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
}

impl DecoderStack {
    pub fn new(init: &mut Init, cfg: &DecoderConfig) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|_| DecoderLayer::new(init, cfg.d, cfg.heads, cfg.ffn))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(init, cfg.d),
        })
    }

    pub fn param_count(d: usize, ffn: usize, layers: usize) -> usize {
        layers * DecoderLayer::param_count(d, ffn) + LayerNorm::param_count(d)
    }
}

impl Module for DecoderStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.layers.visit(&join(prefix, "layers"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.layers.visit_mut(&join(prefix, "layers"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Runs one shared layer over the three task streams at once by stacking
/// them along the batch axis.
pub fn parallel_task_decode(
    layer: &DecoderLayer,
    q: [&Tensor; 3],
    pe: [&Tensor; 3],
    feat: &ImageFeatures,
    mask: Option<&AttnMask>,
) -> Result<([Tensor; 3], [Tensor; 3])> {
    let bs = q[0].shape()[0];
    if feat.tokens.shape()[0] != bs || feat.width() != layer.self_attn.width() {
        return dim_err(format!(
            "features {:?} do not fit queries {:?}",
            feat.tokens.shape(),
            q[0].shape()
        ));
    }
    let x = Tensor::concat(&q, 0)?;
    let p = Tensor::concat(&pe, 0)?;
    let (y, w) = layer.forward(&x, &p, &feat.tiled(3)?, mask)?;
    let split = |t: &Tensor, i: usize| t.narrow(0, i * bs, bs);
    Ok((
        [split(&y, 0)?, split(&y, 1)?, split(&y, 2)?],
        [split(&w, 0)?, split(&w, 1)?, split(&w, 2)?],
    ))
}

#[derive(Debug, Clone)]
pub struct TaskOutput {
    /// `(bs, KN, classes + 1)`; the last class is "no relation".
    pub logits: Tensor,
    /// `(bs, KN, 4)` normalized `(cx, cy, w, h)`.
    pub boxes: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerPredictions {
    pub subject: TaskOutput,
    pub object: TaskOutput,
    pub predicate: TaskOutput,
}

impl LayerPredictions {
    pub fn tasks(&self) -> [&TaskOutput; 3] {
        [&self.subject, &self.object, &self.predicate]
    }

    fn map(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let t = |o: &TaskOutput| -> Result<TaskOutput> {
            Ok(TaskOutput {
                logits: f(&o.logits)?,
                boxes: f(&o.boxes)?,
            })
        };
        Ok(Self {
            subject: t(&self.subject)?,
            object: t(&self.object)?,
            predicate: t(&self.predicate)?,
        })
    }
}

/// Predictions after every decoder layer; the last entry is the final one.
#[derive(Debug, Clone)]
pub struct TripletPredictions {
    pub layers: Vec<LayerPredictions>,
    pub groups: usize,
    pub per_group: usize,
}

impl TripletPredictions {
    pub fn last(&self) -> &LayerPredictions {
        self.layers.last().expect("at least one layer")
    }

    pub fn batch(&self) -> usize {
        self.last().subject.logits.shape()[0]
    }

    /// Predictions of query group `g` only.
    pub fn group(&self, g: usize) -> Result<TripletPredictions> {
        if g >= self.groups {
            return contract_err(format!("group {g} out of {}", self.groups));
        }
        let n = self.per_group;
        let layers = self
            .layers
            .iter()
            .map(|l| l.map(|t| t.narrow(1, g * n, n)))
            .collect::<Result<_>>()?;
        Ok(TripletPredictions {
            layers,
            groups: 1,
            per_group: n,
        })
    }

    pub fn detach(&self) -> TripletPredictions {
        let layers = self
            .layers
            .iter()
            .map(|l| l.map(|t| Ok(t.detach())).expect("detach cannot fail"))
            .collect();
        TripletPredictions {
            layers,
            groups: self.groups,
            per_group: self.per_group,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictionHeads {
    pub entity: Linear,
    /// Separate object classifier, only used by the single-stream variant.
    pub object: Option<Linear>,
    pub predicate: Linear,
    pub boxes: Vec<Mlp>,
}

impl PredictionHeads {
    pub fn new(init: &mut Init, cfg: &DecoderConfig) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            entity: Linear::new(init, d, cfg.entity_classes + 1),
            object: (cfg.variant == VariantTag::Sta)
                .then(|| Linear::new(init, d, cfg.entity_classes + 1)),
            predicate: Linear::new(init, d, cfg.predicate_classes + 1),
            boxes: (0..3)
                .map(|_| Mlp::new(init, &Self::box_widths(d)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn box_widths(d: usize) -> [usize; 4] {
        [d, d, d, 4]
    }

    pub fn forward(&self, z: [&Tensor; 3]) -> Result<LayerPredictions> {
        let object_head = self.object.as_ref().unwrap_or(&self.entity);
        let task = |i: usize, head: &Linear| -> Result<TaskOutput> {
            Ok(TaskOutput {
                logits: head.forward(z[i])?,
                boxes: self.boxes[i].forward(z[i])?.sigmoid(),
            })
        };
        Ok(LayerPredictions {
            subject: task(0, &self.entity)?,
            object: task(1, object_head)?,
            predicate: task(2, &self.predicate)?,
        })
    }
}

impl Module for PredictionHeads {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.entity.visit(&join(prefix, "entity"), f);
        self.object.visit(&join(prefix, "object"), f);
        self.predicate.visit(&join(prefix, "predicate"), f);
        for (m, n) in self.boxes.iter().zip(TASKS) {
            m.visit(&join(prefix, &format!("box.{n}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.entity.visit_mut(&join(prefix, "entity"), f);
        self.object.visit_mut(&join(prefix, "object"), f);
        self.predicate.visit_mut(&join(prefix, "predicate"), f);
        for (m, n) in self.boxes.iter_mut().zip(TASKS) {
            m.visit_mut(&join(prefix, &format!("box.{n}")), f);
        }
    }
}

/// Last-layer cross-attention, one `(bs, KN, HW)` map per query stream.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub cross_attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TripletDecoder {
    pub cfg: DecoderConfig,
    pub queries: TaskQuerySet,
    pub fusion: Vec<RelationFusion>,
    pub triplet_attn: Vec<TripletAttention>,
    pub stacks: Vec<DecoderStack>,
    pub heads: PredictionHeads,
}

impl TripletDecoder {
    pub fn new(init: &mut Init, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let sets = cfg.variant.query_sets();
        let queries = TaskQuerySet::new(init, sets, cfg.groups, cfg.queries, cfg.d);
        let fusion = if cfg.relation_queries {
            (0..cfg.layers)
                .map(|_| RelationFusion::new(init, cfg.d))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let triplet_attn = if cfg.triplet_attention {
            (0..cfg.layers)
                .map(|_| TripletAttention::new(init, cfg.d, cfg.heads))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let n_stacks = if cfg.variant == VariantTag::Tts { 3 } else { 1 };
        let stacks = (0..n_stacks)
            .map(|_| DecoderStack::new(init, cfg))
            .collect::<Result<_>>()?;
        let heads = PredictionHeads::new(init, cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            queries,
            fusion,
            triplet_attn,
            stacks,
            heads,
        })
    }

    pub fn group_mask(&self) -> Option<AttnMask> {
        (self.cfg.groups > 1).then(|| AttnMask::block_diagonal(self.cfg.groups, self.cfg.queries))
    }

    pub fn forward(&self, feat: &ImageFeatures) -> Result<TripletPredictions> {
        Ok(self.forward_traced(feat)?.0)
    }

    pub fn forward_traced(&self, feat: &ImageFeatures) -> Result<(TripletPredictions, AttentionTrace)> {
        if feat.width() != self.cfg.d {
            return dim_err(format!(
                "feature width {} does not match decoder width {}",
                feat.width(),
                self.cfg.d
            ));
        }
        if self.queries.content.len() != self.cfg.variant.query_sets() {
            return contract_err(format!(
                "{} variant expects {} query sets, found {}",
                self.cfg.variant,
                self.cfg.variant.query_sets(),
                self.queries.content.len()
            ));
        }
        let bs = feat.tokens.shape()[0];
        let expand = |ts: &[Tensor]| -> Result<Vec<Tensor>> {
            ts.iter().map(|t| t.expand_leading(bs)).collect()
        };
        let mut q = expand(&self.queries.content)?;
        let pe = expand(&self.queries.pos)?;
        let mask = self.group_mask();
        let mut layers = Vec::with_capacity(self.cfg.layers);
        let mut trace = Vec::new();

        for l in 0..self.cfg.layers {
            if self.cfg.variant == VariantTag::Sta {
                let stack = &self.stacks[0];
                let (y, w) = stack.layers[l].forward(&q[0], &pe[0], feat, mask.as_ref())?;
                let z = stack.norm.forward(&y)?;
                layers.push(self.heads.forward([&z, &z, &z])?);
                q[0] = y;
                trace = vec![w];
                continue;
            }
            if let Some(fuse) = self.fusion.get(l) {
                q = fuse.forward([&q[0], &q[1], &q[2]])?.to_vec();
            }
            if let Some(tsa) = self.triplet_attn.get(l) {
                q = tsa.forward([&q[0], &q[1], &q[2]], [&pe[0], &pe[1], &pe[2]])?.to_vec();
            }
            let (y, w) = match self.cfg.variant {
                VariantTag::Sts => {
                    let (y, w) = parallel_task_decode(
                        &self.stacks[0].layers[l],
                        [&q[0], &q[1], &q[2]],
                        [&pe[0], &pe[1], &pe[2]],
                        feat,
                        mask.as_ref(),
                    )?;
                    (y.to_vec(), w.to_vec())
                }
                _ => {
                    let mut ys = Vec::with_capacity(3);
                    let mut ws = Vec::with_capacity(3);
                    for (i, stack) in self.stacks.iter().enumerate() {
                        let (y, w) = stack.layers[l].forward(&q[i], &pe[i], feat, mask.as_ref())?;
                        ys.push(y);
                        ws.push(w);
                    }
                    (ys, ws)
                }
            };
            let z = (0..3)
                .map(|i| self.stacks[i.min(self.stacks.len() - 1)].norm.forward(&y[i]))
                .collect::<Result<Vec<_>>>()?;
            layers.push(self.heads.forward([&z[0], &z[1], &z[2]])?);
            q = y;
            trace = w;
        }
        Ok((
            TripletPredictions {
                layers,
                groups: self.cfg.groups,
                per_group: self.cfg.queries,
            },
            AttentionTrace {
                cross_attention: trace,
            },
        ))
    }
}

impl Module for TripletDecoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.queries.visit(&join(prefix, "queries"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.triplet_attn.visit(&join(prefix, "triplet_attn"), f);
        self.stacks.visit(&join(prefix, "stacks"), f);
        self.heads.visit(&join(prefix, "heads"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.queries.visit_mut(&join(prefix, "queries"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.triplet_attn.visit_mut(&join(prefix, "triplet_attn"), f);
        self.stacks.visit_mut(&join(prefix, "stacks"), f);
        self.heads.visit_mut(&join(prefix, "heads"), f);
    }
}

/// Parameter counts per component, computed from the configuration alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTable {
    pub rows: Vec<(String, usize)>,
}

impl ParamTable {
    pub fn get(&self, name: &str) -> usize {
        self.rows
            .iter()
            .find(|(n, _)| n == name)
            .map_or(0, |(_, v)| *v)
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(|(_, v)| v).sum()
    }
}

pub fn count_parameters(cfg: &DecoderConfig) -> ParamTable {
    let d = cfg.d;
    let sets = cfg.variant.query_sets();
    let stacks = if cfg.variant == VariantTag::Tts { 3 } else { 1 };
    let embed = sets * cfg.total_queries() * d;
    let mut rows = vec![
        ("query_content".to_string(), embed),
        ("query_pos".to_string(), embed),
        (
            "relation_fusion".to_string(),
            if cfg.relation_queries {
                cfg.layers * RelationFusion::param_count(d)
            } else {
                0
            },
        ),
        (
            "triplet_attention".to_string(),
            if cfg.triplet_attention {
                cfg.layers * TripletAttention::param_count(d)
            } else {
                0
            },
        ),
        (
            "decoder_stacks".to_string(),
            stacks * DecoderStack::param_count(d, cfg.ffn, cfg.layers),
        ),
        (
            "entity_head".to_string(),
            Linear::param_count(d, cfg.entity_classes + 1),
        ),
        (
            "predicate_head".to_string(),
            Linear::param_count(d, cfg.predicate_classes + 1),
        ),
        (
            "box_heads".to_string(),
            3 * Mlp::param_count(&PredictionHeads::box_widths(d)),
        ),
    ];
    if cfg.variant == VariantTag::Sta {
        rows.push((
            "object_head".to_string(),
            Linear::param_count(d, cfg.entity_classes + 1),
        ));
    }
    ParamTable { rows }
}
