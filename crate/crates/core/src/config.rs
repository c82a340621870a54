//! Run configuration as flat `key=value` text.
//!
//! Blank lines and `#` comments are ignored. Later assignments override
//! earlier ones, so command-line overrides are applied after the file.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::datasets::SyntheticSpec;
use crate::decoder::{DecoderConfig, VariantTag};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::matching::{CostCoef, CostWeights, LossConfig};
use crate::metrics::LabelTriple;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::DType;

/// A switch that may follow the variant's default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Switch {
    Auto,
    On,
    Off,
}

impl Switch {
    fn resolve(self, default: bool) -> bool {
        match self {
            Switch::Auto => default,
            Switch::On => true,
            Switch::Off => false,
        }
    }
}

impl FromStr for Switch {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(Switch::Auto),
            "on" | "true" => Ok(Switch::On),
            "off" | "false" => Ok(Switch::Off),
            _ => Err(format!("expected auto, on or off, got '{s}'")),
        }
    }
}

impl Display for Switch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Switch::Auto => "auto",
            Switch::On => "on",
            Switch::Off => "off",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: VariantTag,
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    pub patch: usize,
    pub channels: usize,
    pub queries: usize,
    pub groups: usize,
    pub relation_queries: Switch,
    pub triplet_attention: Switch,
    /// Class counts; 0 takes them from the synthetic vocabulary.
    pub entity_classes: usize,
    pub predicate_classes: usize,
    pub dtype: DType,

    pub cost_class: f64,
    pub cost_l1: f64,
    pub cost_giou: f64,
    pub eos_coef: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
    pub reweight: bool,
    pub alpha: f64,
    pub beta: f64,
    pub weight_cap: f64,
    pub top_k_predicates: usize,

    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,

    pub seed: u64,
    pub data_seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub image_size: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub max_triplets: usize,
    pub skew: Option<f64>,
    pub held_out: Vec<LabelTriple>,

    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key}: {e}")))
}

fn parse_triples(v: &str) -> Result<Vec<LabelTriple>> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|t| {
            let p: Vec<&str> = t.trim().split(':').collect();
            match p[..] {
                [s, r, o] => Ok((parse("held_out", s)?, parse("held_out", r)?, parse("held_out", o)?)),
                _ => Err(Error::Config(format!("held_out: expected subject:predicate:object, got '{t}'"))),
            }
        })
        .collect()
}

impl RunConfig {
    /// Small CPU configuration on the synthetic shapes data.
    pub fn desk() -> Self {
        let spec = SyntheticSpec::default();
        Self {
            variant: VariantTag::Sts,
            d: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn: 256,
            patch: 8,
            channels: 32,
            queries: 20,
            groups: 1,
            relation_queries: Switch::Auto,
            triplet_attention: Switch::Auto,
            entity_classes: 0,
            predicate_classes: 0,
            dtype: DType::F64,
            cost_class: 1.0,
            cost_l1: 5.0,
            cost_giou: 2.0,
            eos_coef: 0.1,
            loss_l1: 5.0,
            loss_giou: 2.0,
            reweight: false,
            alpha: 0.07,
            beta: 0.75,
            weight_cap: 100.0,
            top_k_predicates: 3,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: 0.1,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            data_seed: 0,
            train_scenes: 20,
            test_scenes: 20,
            image_size: spec.image_size,
            min_entities: spec.min_entities,
            max_entities: spec.max_entities,
            max_triplets: spec.max_triplets,
            skew: spec.skew,
            held_out: spec.held_out,
            out: PathBuf::from("runs/desk"),
        }
    }

    /// Full-size model dimensions (for parameter accounting).
    pub fn paper() -> Self {
        Self {
            d: 256,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            ffn: 2048,
            patch: 32,
            channels: 2048,
            queries: 300,
            groups: 3,
            entity_classes: 150,
            predicate_classes: 50,
            reweight: true,
            lr: 1e-4,
            out: PathBuf::from("runs/paper"),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset '{name}' (expected desk or paper)"))),
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "variant" => self.variant = v.parse()?,
            "d" => self.d = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "enc_layers" => self.enc_layers = parse(key, v)?,
            "dec_layers" => self.dec_layers = parse(key, v)?,
            "ffn" => self.ffn = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "queries" => self.queries = parse(key, v)?,
            "groups" => self.groups = parse(key, v)?,
            "relation_queries" => self.relation_queries = parse(key, v)?,
            "triplet_attention" => self.triplet_attention = parse(key, v)?,
            "entity_classes" => self.entity_classes = parse(key, v)?,
            "predicate_classes" => self.predicate_classes = parse(key, v)?,
            "dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("dtype: expected f32 or f64, got '{v}'"))),
                }
            }
            "cost_class" => self.cost_class = parse(key, v)?,
            "cost_l1" => self.cost_l1 = parse(key, v)?,
            "cost_giou" => self.cost_giou = parse(key, v)?,
            "eos_coef" => self.eos_coef = parse(key, v)?,
            "loss_l1" => self.loss_l1 = parse(key, v)?,
            "loss_giou" => self.loss_giou = parse(key, v)?,
            "reweight" => self.reweight = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "weight_cap" => self.weight_cap = parse(key, v)?,
            "top_k_predicates" => self.top_k_predicates = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "test_scenes" => self.test_scenes = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "min_entities" => self.min_entities = parse(key, v)?,
            "max_entities" => self.max_entities = parse(key, v)?,
            "max_triplets" => self.max_triplets = parse(key, v)?,
            "skew" => self.skew = if v == "none" { None } else { Some(parse(key, v)?) },
            "held_out" => self.held_out = parse_triples(v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` assignments.
    pub fn apply<'a>(&mut self, assignments: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for a in assignments {
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{a}'")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses a config document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply([line]).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Starts from the preset named by a `preset=` line, if any.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut preset = "desk";
        let mut body = String::new();
        for line in text.lines() {
            match line.trim().strip_prefix("preset=") {
                Some(p) => preset = p.trim(),
                None => {
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
        let mut cfg = Self::preset(preset)?;
        cfg.apply_text(&body)?;
        Ok(cfg)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let triples = if self.held_out.is_empty() {
            "none".to_string()
        } else {
            self.held_out.iter().map(|(s, p, o)| format!("{s}:{p}:{o}")).collect::<Vec<_>>().join(",")
        };
        vec![
            ("variant", self.variant.to_string()),
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("ffn", self.ffn.to_string()),
            ("patch", self.patch.to_string()),
            ("channels", self.channels.to_string()),
            ("queries", self.queries.to_string()),
            ("groups", self.groups.to_string()),
            ("relation_queries", self.relation_queries.to_string()),
            ("triplet_attention", self.triplet_attention.to_string()),
            ("entity_classes", self.entity_classes.to_string()),
            ("predicate_classes", self.predicate_classes.to_string()),
            ("dtype", self.dtype.to_string()),
            ("cost_class", self.cost_class.to_string()),
            ("cost_l1", self.cost_l1.to_string()),
            ("cost_giou", self.cost_giou.to_string()),
            ("eos_coef", self.eos_coef.to_string()),
            ("loss_l1", self.loss_l1.to_string()),
            ("loss_giou", self.loss_giou.to_string()),
            ("reweight", self.reweight.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("weight_cap", self.weight_cap.to_string()),
            ("top_k_predicates", self.top_k_predicates.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("test_scenes", self.test_scenes.to_string()),
            ("image_size", self.image_size.to_string()),
            ("min_entities", self.min_entities.to_string()),
            ("max_entities", self.max_entities.to_string()),
            ("max_triplets", self.max_triplets.to_string()),
            ("skew", self.skew.map_or("none".into(), |s| s.to_string())),
            ("held_out", triples),
            ("out", self.out.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("train_scenes", self.train_scenes),
            ("test_scenes", self.test_scenes),
            ("top_k_predicates", self.top_k_predicates),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        let reals = [
            ("lr", self.lr),
            ("eos_coef", self.eos_coef),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("weight_cap", self.weight_cap),
        ];
        if let Some((k, _)) = reals.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        let nonneg = [
            ("cost_class", self.cost_class),
            ("cost_l1", self.cost_l1),
            ("cost_giou", self.cost_giou),
            ("loss_l1", self.loss_l1),
            ("loss_giou", self.loss_giou),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
        ];
        if let Some((k, _)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{k} must be non-negative")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        self.spec().validate()?;
        self.model().validate()
    }

    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.image_size,
            min_entities: self.min_entities,
            max_entities: self.max_entities,
            max_triplets: self.max_triplets,
            skew: self.skew,
            held_out: self.held_out.clone(),
            seed: self.data_seed,
            ..SyntheticSpec::default()
        }
    }

    pub fn model(&self) -> ModelConfig {
        let spec = self.spec();
        let mut dec = DecoderConfig::for_variant(self.variant, self.d, self.dec_layers, self.heads, self.ffn);
        dec.queries = self.queries;
        dec.groups = self.groups;
        dec.relation_queries = self.relation_queries.resolve(dec.relation_queries);
        dec.triplet_attention = self.triplet_attention.resolve(dec.triplet_attention);
        dec.entity_classes = if self.entity_classes == 0 { spec.entity_classes() } else { self.entity_classes };
        dec.predicate_classes = if self.predicate_classes == 0 { spec.predicates } else { self.predicate_classes };
        ModelConfig {
            encoder: EncoderConfig {
                patch: self.patch,
                channels: self.channels,
                d: self.d,
                heads: self.heads,
                layers: self.enc_layers,
                ffn: self.ffn,
            },
            decoder: dec,
            dtype: self.dtype,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            cost: CostWeights::uniform(CostCoef {
                cls: self.cost_class,
                l1: self.cost_l1,
                giou: self.cost_giou,
            }),
            eos_coef: self.eos_coef,
            l1: self.loss_l1,
            giou: self.loss_giou,
            predicate_weights: None,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }
}
