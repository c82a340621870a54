//! Synthetic relational-shapes scenes and an annotation-file loader.
//!
//! # Annotation schema
//!
//! ```json
//! {
//!   "entity_classes": ["person", "cup", ...],
//!   "predicate_classes": ["on", "holding", ...],
//!   "images": [
//!     {
//!       "id": 7, "width": 640, "height": 480, "file": "7.jpg",
//!       "triplets": [
//!         { "subject": { "label": 0, "box": [x1, y1, x2, y2] },
//!           "object":  { "label": 1, "box": [x1, y1, x2, y2] },
//!           "predicate": 1 }
//!       ]
//!     }
//!   ]
//! }
//! ```
//!
//! Boxes are pixel corners. `file` and a per-image `seed` (synthetic scenes
//! only) are optional.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::graph::{BBox, Entity, SceneGraph, Triplet};
use crate::metrics::LabelTriple;
use crate::rng::derive;
use crate::Tensor;

pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [1.0, 0.2, 0.2]),
    ("green", [0.2, 0.9, 0.3]),
    ("blue", [0.25, 0.35, 1.0]),
    ("yellow", [0.95, 0.9, 0.2]),
    ("magenta", [0.9, 0.3, 0.9]),
    ("cyan", [0.3, 0.9, 0.95]),
];
pub const PREDICATES: [&str; 6] = ["left of", "right of", "above", "below", "inside", "larger than"];

/// Area ratio required by "larger than".
pub const LARGER_RATIO: f64 = 1.5;

const SCENE_RETRIES: usize = 200;
const SPLIT_RETRIES: u64 = 10_000;
const TEST_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub shapes: usize,
    pub colors: usize,
    pub predicates: usize,
    pub image_size: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    /// Side lengths in pixels.
    pub min_extent: usize,
    pub max_extent: usize,
    /// Normalized center offset required by the directional predicates.
    pub gap: f64,
    pub max_triplets: usize,
    /// Geometric ratio of predicate sampling weights; `None` is uniform.
    pub skew: Option<f64>,
    pub held_out: Vec<LabelTriple>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shapes: 3,
            colors: 4,
            predicates: 6,
            image_size: 64,
            min_entities: 2,
            max_entities: 5,
            min_extent: 10,
            max_extent: 28,
            gap: 0.15,
            max_triplets: 5,
            skew: None,
            held_out: vec![(0, 0, 4), (5, 1, 2), (7, 2, 9), (10, 3, 3), (2, 0, 11), (8, 1, 6)],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn entity_classes(&self) -> usize {
        self.shapes * self.colors
    }

    pub fn entity_name(&self, label: usize) -> String {
        format!("{} {}", COLORS[label % self.colors].0, SHAPES[label / self.colors])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.shapes == 0 || self.shapes > SHAPES.len() {
            return bad("shapes must be in 1..=3");
        }
        if self.colors == 0 || self.colors > COLORS.len() {
            return bad("colors must be in 1..=6");
        }
        if self.predicates == 0 || self.predicates > PREDICATES.len() {
            return bad("predicates must be in 1..=6");
        }
        if self.min_entities < 2 || self.max_entities < self.min_entities {
            return bad("need 2 <= min_entities <= max_entities");
        }
        if self.min_extent < 2 || self.max_extent < self.min_extent || self.max_extent > self.image_size {
            return bad("need 2 <= min_extent <= max_extent <= image_size");
        }
        if self.max_triplets == 0 {
            return bad("max_triplets must be positive");
        }
        if self.skew.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return bad("skew ratio must be positive");
        }
        let (e, p) = (self.entity_classes(), self.predicates);
        if let Some(t) = self.held_out.iter().find(|t| t.0 >= e || t.2 >= e || t.1 >= p) {
            return Err(Error::Config(format!("held-out triple {t:?} outside the vocabulary")));
        }
        Ok(())
    }

    fn predicate_weight(&self, p: usize) -> f64 {
        self.skew.map_or(1.0, |r| r.powi(p as i32))
    }
}

/// Whether predicate `p` holds between subject box `s` and object box `o`.
pub fn predicate_holds(p: usize, s: &BBox, o: &BBox, gap: f64) -> bool {
    match p {
        0 => o.cx - s.cx > gap,
        1 => s.cx - o.cx > gap,
        2 => o.cy - s.cy > gap,
        3 => s.cy - o.cy > gap,
        4 => o.contains(s) && s != o,
        5 => s.area() > LARGER_RATIO * o.area(),
        _ => false,
    }
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    shape: usize,
    color: usize,
    // pixel corners, x2/y2 exclusive
    x1: usize,
    y1: usize,
    x2: usize,
    y2: usize,
}

impl Placed {
    fn bbox(&self, size: usize) -> BBox {
        let s = size as f64;
        BBox::from_corners(self.x1 as f64 / s, self.y1 as f64 / s, self.x2 as f64 / s, self.y2 as f64 / s)
    }

    fn overlaps(&self, o: &Placed) -> bool {
        self.x1 < o.x2 && o.x1 < self.x2 && self.y1 < o.y2 && o.y1 < self.y2
    }

    fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (w, h) = ((self.x2 - self.x1) as f64, (self.y2 - self.y1) as f64);
        let (cx, cy) = (self.x1 as f64 + w / 2.0, self.y1 as f64 + h / 2.0);
        match self.shape {
            0 => px >= self.x1 as f64 && px < self.x2 as f64 && py >= self.y1 as f64 && py < self.y2 as f64,
            1 => {
                let (dx, dy) = ((px - cx) / (w / 2.0), (py - cy) / (h / 2.0));
                dx * dx + dy * dy <= 1.0
            }
            _ => {
                let t = (py - self.y1 as f64) / h;
                (0.0..=1.0).contains(&t) && (px - cx).abs() <= t * w / 2.0
            }
        }
    }
}

fn place(spec: &SyntheticSpec, rng: &mut impl Rng) -> Option<Vec<Placed>> {
    let size = spec.image_size;
    let n = rng.gen_range(spec.min_entities..=spec.max_entities);
    let mut out: Vec<Placed> = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = rng.gen_range(0..spec.shapes);
        let mut color = rng.gen_range(0..spec.colors);
        let parent = out
            .iter()
            .copied()
            .filter(|p| p.x2 - p.x1 >= spec.min_extent + 6 && p.y2 - p.y1 >= spec.min_extent + 6)
            .find(|_| rng.gen_bool(0.3));
        let placed = match parent {
            Some(p) => {
                if spec.colors > 1 && color == p.color {
                    color = (color + 1) % spec.colors;
                }
                let w = rng.gen_range(spec.min_extent..=(p.x2 - p.x1 - 6));
                let h = rng.gen_range(spec.min_extent..=(p.y2 - p.y1 - 6));
                let x1 = rng.gen_range(p.x1 + 1..=p.x2 - 1 - w);
                let y1 = rng.gen_range(p.y1 + 1..=p.y2 - 1 - h);
                let c = Placed {
                    shape,
                    color,
                    x1,
                    y1,
                    x2: x1 + w,
                    y2: y1 + h,
                };
                // only the parent may be overlapped
                (!out.iter().any(|o| o.overlaps(&c) && !(o.x1 == p.x1 && o.y1 == p.y1 && o.x2 == p.x2 && o.y2 == p.y2)))
                    .then_some(c)
            }
            None => (0..50).find_map(|_| {
                let w = rng.gen_range(spec.min_extent..=spec.max_extent);
                let h = rng.gen_range(spec.min_extent..=spec.max_extent);
                let x1 = rng.gen_range(0..=size - w);
                let y1 = rng.gen_range(0..=size - h);
                let c = Placed {
                    shape,
                    color,
                    x1,
                    y1,
                    x2: x1 + w,
                    y2: y1 + h,
                };
                (!out.iter().any(|o| o.overlaps(&c))).then_some(c)
            }),
        };
        out.push(placed?);
    }
    Some(out)
}

fn rasterize(spec: &SyntheticSpec, placed: &[Placed]) -> Result<Tensor> {
    let s = spec.image_size;
    let mut img = vec![0.0; 3 * s * s];
    // larger shapes first so nested ones stay visible
    let mut order: Vec<&Placed> = placed.iter().collect();
    order.sort_by_key(|p| std::cmp::Reverse((p.x2 - p.x1) * (p.y2 - p.y1)));
    for p in order {
        let rgb = COLORS[p.color].1;
        for y in p.y1..p.y2 {
            for x in p.x1..p.x2 {
                if p.covers(x, y) {
                    for (c, v) in rgb.iter().enumerate() {
                        img[c * s * s + y * s + x] = *v;
                    }
                }
            }
        }
    }
    Tensor::new(img, &[3, s, s])
}

fn entities(spec: &SyntheticSpec, placed: &[Placed]) -> Vec<Entity> {
    placed
        .iter()
        .map(|p| Entity {
            label: p.shape * spec.colors + p.color,
            bbox: p.bbox(spec.image_size),
        })
        .collect()
}

fn relations(spec: &SyntheticSpec, ents: &[Entity], rng: &mut impl Rng) -> SceneGraph {
    let mut cands: Vec<Triplet> = Vec::new();
    for (i, s) in ents.iter().enumerate() {
        for (j, o) in ents.iter().enumerate() {
            if i == j {
                continue;
            }
            for p in 0..spec.predicates {
                if predicate_holds(p, &s.bbox, &o.bbox, spec.gap) {
                    cands.push(Triplet {
                        subject: *s,
                        object: *o,
                        predicate: p,
                    });
                }
            }
        }
    }
    let mut triplets = Vec::new();
    while triplets.len() < spec.max_triplets && !cands.is_empty() {
        let total: f64 = cands.iter().map(|t| spec.predicate_weight(t.predicate)).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = cands.len() - 1;
        for (k, t) in cands.iter().enumerate() {
            u -= spec.predicate_weight(t.predicate);
            if u < 0.0 {
                pick = k;
                break;
            }
        }
        triplets.push(cands.remove(pick));
    }
    SceneGraph { triplets }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// `(3, S, S)` RGB in [0, 1]; background is 0.
    pub image: Tensor,
    pub graph: SceneGraph,
    /// Every drawn entity, including those in no triplet.
    pub entities: Vec<Entity>,
}

pub fn generate_scene(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = derive(spec.seed, seed);
    for _ in 0..SCENE_RETRIES {
        let Some(placed) = place(spec, &mut rng) else { continue };
        let entities = entities(spec, &placed);
        let graph = relations(spec, &entities, &mut rng);
        if graph.is_empty() {
            continue;
        }
        return Ok(SyntheticScene {
            image: rasterize(spec, &placed)?,
            graph,
            entities,
        });
    }
    Err(Error::Generation(format!(
        "no scene with at least one relation after {SCENE_RETRIES} attempts (seed {seed})"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub file: Option<String>,
    /// Generator seed of a synthetic scene.
    pub seed: Option<u64>,
    pub graph: SceneGraph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub entity_classes: Vec<String>,
    pub predicate_classes: Vec<String>,
    pub scenes: Vec<Scene>,
    /// Relative predicate frequencies of this split.
    pub predicate_freq: Vec<f64>,
}

impl DatasetSplit {
    pub fn new(name: &str, entity_classes: Vec<String>, predicate_classes: Vec<String>, scenes: Vec<Scene>) -> Self {
        let mut counts = vec![0usize; predicate_classes.len()];
        for t in scenes.iter().flat_map(|s| &s.graph.triplets) {
            counts[t.predicate] += 1;
        }
        let total: usize = counts.iter().sum();
        let predicate_freq = counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect();
        Self {
            name: name.to_string(),
            entity_classes,
            predicate_classes,
            scenes,
            predicate_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn graphs(&self) -> Vec<SceneGraph> {
        self.scenes.iter().map(|s| s.graph.clone()).collect()
    }

    /// Every `(subject, predicate, object)` label triple of the split.
    pub fn label_triples(&self) -> HashSet<LabelTriple> {
        self.scenes.iter().flat_map(|s| s.graph.triplets.iter().map(|t| t.label_triple())).collect()
    }

    /// Regenerates the images of synthetic scenes.
    pub fn images(&self, spec: &SyntheticSpec) -> Result<Vec<Tensor>> {
        self.scenes
            .iter()
            .map(|s| {
                let seed = s.seed.ok_or_else(|| Error::Contract(format!("scene {} has no generator seed", s.id)))?;
                let scene = generate_scene(spec, seed)?;
                if scene.graph != s.graph {
                    return contract_err(format!("scene {} does not match its generator spec", s.id));
                }
                Ok(scene.image)
            })
            .collect()
    }

    /// Reads each scene's `file` as a tensor container holding an `image`
    /// tensor of shape (3, height, width). Paths resolve against `base`.
    pub fn load_images(&self, base: &Path) -> Result<Vec<Tensor>> {
        self.scenes
            .iter()
            .map(|s| {
                let file = s.file.as_ref().ok_or_else(|| Error::Contract(format!("scene {} has no image file", s.id)))?;
                let ck = crate::tensor::checkpoint::Checkpoint::load(base.join(file))?;
                let image = ck
                    .get("image")
                    .ok_or_else(|| Error::Checkpoint(format!("{file}: no `image` tensor")))?;
                if image.shape() != [3, s.height, s.width] {
                    return Err(Error::Checkpoint(format!(
                        "{file}: image shape {:?}, annotation says (3, {}, {})",
                        image.shape(),
                        s.height,
                        s.width
                    )));
                }
                Ok(image.clone())
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = AnnotationDoc {
            entity_classes: self.entity_classes.clone(),
            predicate_classes: self.predicate_classes.clone(),
            images: self
                .scenes
                .iter()
                .map(|s| {
                    let (w, h) = (s.width as f64, s.height as f64);
                    let corners = |b: &BBox| [(b.cx - b.w / 2.0) * w, (b.cy - b.h / 2.0) * h, (b.cx + b.w / 2.0) * w, (b.cy + b.h / 2.0) * h];
                    let side = |e: &Entity| RawEntity {
                        label: e.label,
                        bbox: corners(&e.bbox),
                    };
                    RawImage {
                        id: s.id,
                        width: s.width,
                        height: s.height,
                        file: s.file.clone(),
                        seed: s.seed,
                        triplets: s
                            .graph
                            .triplets
                            .iter()
                            .map(|t| RawTriplet {
                                subject: side(&t.subject),
                                object: side(&t.object),
                                predicate: t.predicate,
                            })
                            .collect(),
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))
    }
}

#[derive(Clone, Copy, PartialEq)]
enum HeldOut {
    Excluded,
    Required,
    Allowed,
}

impl HeldOut {
    fn admits(self, graph: &SceneGraph, held: &HashSet<LabelTriple>) -> bool {
        let has = graph.triplets.iter().any(|t| held.contains(&t.label_triple()));
        match self {
            HeldOut::Excluded => !has,
            HeldOut::Required => has,
            HeldOut::Allowed => true,
        }
    }
}

fn synthetic_split(spec: &SyntheticSpec, name: &str, scenes: Vec<Scene>) -> DatasetSplit {
    let ent = (0..spec.entity_classes()).map(|l| spec.entity_name(l)).collect();
    let pred = PREDICATES[..spec.predicates].iter().map(|s| s.to_string()).collect();
    DatasetSplit::new(name, ent, pred, scenes)
}

/// Train and test splits from disjoint seed ranges.
///
/// Train scenes never contain a held-out triple. Every fourth test scene is
/// required to contain one, so zero-shot recall is defined.
pub fn build_splits(spec: &SyntheticSpec, n_train: usize, n_test: usize) -> Result<(DatasetSplit, DatasetSplit)> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return contract_err("split sizes must be at least 1");
    }
    let held: HashSet<LabelTriple> = spec.held_out.iter().copied().collect();
    let draw = |seed0: u64, id: usize, rule: HeldOut, next: &mut u64| -> Result<Scene> {
        for _ in 0..SPLIT_RETRIES {
            let seed = seed0 + *next;
            *next += 1;
            let graph = generate_scene(spec, seed)?.graph;
            if rule.admits(&graph, &held) {
                return Ok(Scene {
                    id: id as u64,
                    width: spec.image_size,
                    height: spec.image_size,
                    file: None,
                    seed: Some(seed),
                    graph,
                });
            }
        }
        Err(Error::Generation(format!("no admissible scene within {SPLIT_RETRIES} seeds")))
    };
    let mut next = 0;
    let train = (0..n_train).map(|i| draw(0, i, HeldOut::Excluded, &mut next)).collect::<Result<Vec<_>>>()?;
    let mut next = 0;
    let test = (0..n_test)
        .map(|i| {
            let rule = if !held.is_empty() && i % 4 == 0 { HeldOut::Required } else { HeldOut::Allowed };
            draw(TEST_STREAM, n_train + i, rule, &mut next)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((synthetic_split(spec, "train", train), synthetic_split(spec, "test", test)))
}

#[derive(Debug, Serialize, Deserialize)]
struct RawEntity {
    label: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTriplet {
    subject: RawEntity,
    object: RawEntity,
    predicate: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawImage {
    id: u64,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    triplets: Vec<RawTriplet>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationDoc {
    entity_classes: Vec<String>,
    predicate_classes: Vec<String>,
    images: Vec<RawImage>,
}

/// Result of loading an annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub split: DatasetSplit,
    /// Boxes that extended past the image and were clamped.
    pub clamped: usize,
}

pub fn load_annotations(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("annotations");
    parse_annotations(&text, name)
}

pub fn parse_annotations(text: &str, name: &str) -> Result<Loaded> {
    let doc: AnnotationDoc = serde_json::from_str(text)
        .map_err(|e| Error::Parse(format!("line {} column {}: {e}", e.line(), e.column())))?;
    let (ne, np) = (doc.entity_classes.len(), doc.predicate_classes.len());
    if ne == 0 || np == 0 {
        return Err(Error::Validation("empty class vocabulary".into()));
    }
    let mut clamped = 0;
    let mut seen_ids = BTreeSet::new();
    let mut scenes = Vec::with_capacity(doc.images.len());
    for img in doc.images {
        if !seen_ids.insert(img.id) {
            return Err(Error::Validation(format!("duplicate image id {}", img.id)));
        }
        if img.width == 0 || img.height == 0 {
            return Err(Error::Validation(format!("image {} has zero size", img.id)));
        }
        let (w, h) = (img.width as f64, img.height as f64);
        let mut entity = |e: &RawEntity| -> Result<Entity> {
            if e.label >= ne {
                return Err(Error::Validation(format!(
                    "image {}: unknown entity label id {} ({ne} classes)",
                    img.id, e.label
                )));
            }
            let [x1, y1, x2, y2] = e.bbox;
            if !e.bbox.iter().all(|v| v.is_finite()) || x2 <= x1 || y2 <= y1 {
                return Err(Error::Validation(format!("image {}: degenerate box {:?}", img.id, e.bbox)));
            }
            let c = [x1.clamp(0.0, w), y1.clamp(0.0, h), x2.clamp(0.0, w), y2.clamp(0.0, h)];
            if c != e.bbox {
                clamped += 1;
                if c[2] <= c[0] || c[3] <= c[1] {
                    return Err(Error::Validation(format!("image {}: box {:?} lies outside the image", img.id, e.bbox)));
                }
            }
            Ok(Entity {
                label: e.label,
                bbox: BBox::from_corners(c[0] / w, c[1] / h, c[2] / w, c[3] / h),
            })
        };
        let mut triplets = Vec::with_capacity(img.triplets.len());
        for t in &img.triplets {
            if t.predicate >= np {
                return Err(Error::Validation(format!(
                    "image {}: unknown predicate label id {} ({np} classes)",
                    img.id, t.predicate
                )));
            }
            triplets.push(Triplet {
                subject: entity(&t.subject)?,
                object: entity(&t.object)?,
                predicate: t.predicate,
            });
        }
        scenes.push(Scene {
            id: img.id,
            width: img.width,
            height: img.height,
            file: img.file,
            seed: img.seed,
            graph: SceneGraph { triplets },
        });
    }
    if clamped > 0 {
        log::warn!("{name}: clamped {clamped} out-of-bounds boxes");
    }
    Ok(Loaded {
        split: DatasetSplit::new(name, doc.entity_classes, doc.predicate_classes, scenes),
        clamped,
    })
}
