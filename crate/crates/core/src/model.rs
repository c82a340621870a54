//! Encoder plus triplet decoder, with checkpoint I/O.

use crate::decoder::{AttentionTrace, DecoderConfig, TripletDecoder, TripletPredictions};
use crate::encoder::{EncoderConfig, ImageBatch, ImageEncoder};
use crate::error::{Error, Result};
use crate::nn::{join, Init, Module};
use crate::rng::derive;
use crate::tensor::checkpoint::{Checkpoint, VERSION};
use crate::{DType, Tensor};

/// First metadata line of a model checkpoint.
pub const MODEL_FORMAT: &str = "sgg-model 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub dtype: DType,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        let e = &self.encoder;
        if e.d != self.decoder.d {
            return Err(Error::Config(format!("encoder width {} differs from decoder width {}", e.d, self.decoder.d)));
        }
        if [e.patch, e.channels, e.heads, e.layers, e.ffn].contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if e.d % e.heads != 0 {
            return Err(Error::Config(format!("d = {} is not divisible by {} heads", e.d, e.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SggModel {
    pub cfg: ModelConfig,
    pub encoder: ImageEncoder,
    pub decoder: TripletDecoder,
}

impl SggModel {
    /// Encoder and decoder draw from separate streams of `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = ImageEncoder::new(&mut Init::new(derive(seed, 1), cfg.dtype), &cfg.encoder)?;
        let decoder = TripletDecoder::new(&mut Init::new(derive(seed, 2), cfg.dtype), &cfg.decoder)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
        })
    }

    pub fn forward(&self, img: &ImageBatch) -> Result<TripletPredictions> {
        self.decoder.forward(&self.encoder.forward(img)?)
    }

    pub fn forward_traced(&self, img: &ImageBatch) -> Result<(TripletPredictions, AttentionTrace)> {
        self.decoder.forward_traced(&self.encoder.forward(img)?)
    }

    /// Parameters in checkpoint order with the given metadata appended to the
    /// format line.
    pub fn to_checkpoint(&self, metadata: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(format!("{MODEL_FORMAT}\n{metadata}"));
        for (name, t) in self.named_params() {
            ck.push(name, &t);
        }
        ck
    }

    /// Loads parameters into a freshly built model of configuration `cfg`.
    pub fn from_checkpoint(cfg: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.metadata.lines().next() != Some(MODEL_FORMAT) {
            return Err(Error::Checkpoint(format!(
                "container v{VERSION}: not a model checkpoint (expected '{MODEL_FORMAT}')"
            )));
        }
        let mut model = Self::new(cfg, 0)?;
        let mut values = Vec::new();
        for (name, t) in model.named_params() {
            let stored = ck.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("{MODEL_FORMAT}: parameter {name} is missing for this configuration"))
            })?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{MODEL_FORMAT}: parameter {name} has shape {:?}, configuration expects {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            values.push(stored.replaced(stored.to_vec())?);
        }
        if values.len() != ck.entries.len() {
            return Err(Error::Checkpoint(format!(
                "{MODEL_FORMAT}: checkpoint has {} tensors, configuration expects {}",
                ck.entries.len(),
                values.len()
            )));
        }
        model.set_params(&values)?;
        Ok(model)
    }
}

impl Module for SggModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}
