//! Image to feature-token encoder.
//!
//! The backbone is a small stand-in for a CNN: a non-overlapping patch
//! convolution, ReLU and one 3x3 convolution. Both convolutions are carried
//! out as `unfold2d` followed by a linear map.

use crate::error::{contract_err, dim_err, Result};
use crate::nn::{
    join, sinusoidal_pe_2d, FeedForward, Init, LayerNorm, Linear, Module, MultiHeadAttention,
    PosEncoding,
};
use crate::tensor::Tensor;

/// Images of shape `(bs, 3, H0, W0)` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch(pub Tensor);

impl ImageBatch {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 || t.shape()[1] != 3 {
            return dim_err(format!("image batch must be (bs, 3, H, W), got {:?}", t.shape()));
        }
        Ok(Self(t))
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Encoded tokens `(bs, H*W, d)` with their positional encoding, expanded
/// to the same shape.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    pub tokens: Tensor,
    pub pe: PosEncoding,
    pub h: usize,
    pub w: usize,
}

impl ImageFeatures {
    pub fn width(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Tokens repeated `n` times along the batch axis (image-major blocks).
    pub fn tiled(&self, n: usize) -> Result<ImageFeatures> {
        let copies = vec![&self.tokens; n];
        let pes = vec![&self.pe.0; n];
        Ok(ImageFeatures {
            tokens: Tensor::concat(&copies, 0)?,
            pe: PosEncoding(Tensor::concat(&pes, 0)?),
            h: self.h,
            w: self.w,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub patch: usize,
    pub channels: usize,
    pub patch_conv: Linear,
    pub conv3: Linear,
}

impl Backbone {
    pub fn new(init: &mut Init, patch: usize, channels: usize) -> Result<Self> {
        if patch == 0 || channels == 0 {
            return contract_err("patch size and channel count must be positive");
        }
        Ok(Self {
            patch,
            channels,
            patch_conv: Linear::new(init, 3 * patch * patch, channels),
            conv3: Linear::new(init, 9 * channels, channels),
        })
    }

    pub fn param_count(patch: usize, channels: usize) -> usize {
        Linear::param_count(3 * patch * patch, channels) + Linear::param_count(9 * channels, channels)
    }

    /// `(bs, 3, H0, W0)` to `(bs, C, H0/patch, W0/patch)`.
    pub fn forward(&self, img: &ImageBatch) -> Result<Tensor> {
        let (bs, h0, w0) = (img.0.shape()[0], img.0.shape()[2], img.0.shape()[3]);
        if h0 % self.patch != 0 || w0 % self.patch != 0 {
            return contract_err(format!(
                "image {h0}x{w0} is not divisible by patch {}",
                self.patch
            ));
        }
        let (h, w, c) = (h0 / self.patch, w0 / self.patch, self.channels);
        let x = img.0.unfold2d(self.patch, self.patch, 0)?;
        let x = self.patch_conv.forward(&x)?.relu();
        let x = x.permute(&[0, 2, 1])?.reshape(&[bs, c, h, w])?;
        let x = self.conv3.forward(&x.unfold2d(3, 1, 1)?)?;
        x.permute(&[0, 2, 1])?.reshape(&[bs, c, h, w])
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.patch_conv.visit(&join(prefix, "patch_conv"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_conv.visit_mut(&join(prefix, "patch_conv"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
    }
}

/// 1x1 projection `C -> d` and flattening to tokens, with the sine PE
/// attached.
pub fn project_and_flatten(x: &Tensor, proj: &Linear) -> Result<ImageFeatures> {
    let (bs, c, h, w) = match x.shape() {
        &[bs, c, h, w] => (bs, c, h, w),
        s => return dim_err(format!("feature map must be (bs, C, H, W), got {s:?}")),
    };
    let tokens = x.permute(&[0, 2, 3, 1])?.reshape(&[bs, h * w, c])?;
    let tokens = proj.forward(&tokens)?;
    let d = proj.out_width();
    let pe = sinusoidal_pe_2d(h, w, d)?.transpose(0, 1)?.expand_leading(bs)?;
    Ok(ImageFeatures {
        tokens,
        pe: PosEncoding(pe.detach()),
        h,
        w,
    })
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(init: &mut Init, d: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(init, d, heads)?,
            norm1: LayerNorm::new(init, d),
            ffn: FeedForward::new(init, d, ffn),
            norm2: LayerNorm::new(init, d),
        })
    }

    pub fn param_count(d: usize, ffn: usize) -> usize {
        MultiHeadAttention::param_count(d) + FeedForward::param_count(d, ffn) + 2 * LayerNorm::param_count(d)
    }

    pub fn forward(&self, x: &Tensor, pe: &Tensor) -> Result<Tensor> {
        let qk = x.add(pe)?;
        let x = self.norm1.forward(&x.add(&self.self_attn.forward(&qk, &qk, x, None)?)?)?;
        self.norm2.forward(&x.add(&self.ffn.forward(&x)?)?)
    }
}

impl Module for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

/// Runs the encoder stack; PE goes into queries and keys only.
pub fn encode(feat: &ImageFeatures, layers: &[EncoderLayer]) -> Result<ImageFeatures> {
    if layers.is_empty() {
        return contract_err("encoder needs at least one layer");
    }
    let mut x = feat.tokens.clone();
    for layer in layers {
        x = layer.forward(&x, &feat.pe.0)?;
    }
    Ok(ImageFeatures {
        tokens: x,
        pe: feat.pe.clone(),
        h: feat.h,
        w: feat.w,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub patch: usize,
    pub channels: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
}

impl EncoderConfig {
    pub fn param_count(&self) -> usize {
        Backbone::param_count(self.patch, self.channels)
            + Linear::param_count(self.channels, self.d)
            + self.layers * EncoderLayer::param_count(self.d, self.ffn)
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub backbone: Backbone,
    pub input_proj: Linear,
    pub layers: Vec<EncoderLayer>,
}

impl ImageEncoder {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Result<Self> {
        if cfg.layers == 0 {
            return contract_err("encoder needs at least one layer");
        }
        let backbone = Backbone::new(init, cfg.patch, cfg.channels)?;
        let input_proj = Linear::new(init, cfg.channels, cfg.d);
        let layers = (0..cfg.layers)
            .map(|_| EncoderLayer::new(init, cfg.d, cfg.heads, cfg.ffn))
            .collect::<Result<_>>()?;
        Ok(Self {
            backbone,
            input_proj,
            layers,
        })
    }

    pub fn forward(&self, img: &ImageBatch) -> Result<ImageFeatures> {
        let x = self.backbone.forward(img)?;
        encode(&project_and_flatten(&x, &self.input_proj)?, &self.layers)
    }
}

impl Module for ImageEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.input_proj.visit(&join(prefix, "input_proj"), f);
        self.layers.visit(&join(prefix, "layers"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.input_proj.visit_mut(&join(prefix, "input_proj"), f);
        self.layers.visit_mut(&join(prefix, "layers"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::DType;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            patch: 8,
            channels: 16,
            d: 32,
            heads: 4,
            layers: 2,
            ffn: 128,
        }
    }

    #[test]
    fn grid_arithmetic() {
        let mut init = Init::new(seeded(1), DType::F64);
        let enc = ImageEncoder::new(&mut init, &cfg()).unwrap();
        let img = ImageBatch::new(Tensor::full(&[2, 3, 64, 64], 0.5)).unwrap();
        let x = enc.backbone.forward(&img).unwrap();
        assert_eq!(x.shape(), &[2, 16, 8, 8]);
        let feat = enc.forward(&img).unwrap();
        assert_eq!(feat.tokens.shape(), &[2, 64, 32]);
        assert_eq!(feat.pe.0.shape(), feat.tokens.shape());
        assert_eq!((feat.h, feat.w), (8, 8));
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let mut init = Init::new(seeded(1), DType::F64);
        let bb = Backbone::new(&mut init, 8, 4).unwrap();
        let img = ImageBatch::new(Tensor::zeros(&[1, 3, 60, 64])).unwrap();
        assert!(matches!(bb.forward(&img), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn param_count_matches_modules() {
        let mut init = Init::new(seeded(1), DType::F64);
        let c = cfg();
        let enc = ImageEncoder::new(&mut init, &c).unwrap();
        assert_eq!(enc.num_params(), c.param_count());
        assert_eq!(enc.backbone.num_params(), 3 * 64 * 16 + 16 + 9 * 16 * 16 + 16);
    }
}
