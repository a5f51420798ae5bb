//! A small CLIPSeg-shaped vision-language segmentation model: ViT image
//! encoder, causal text encoder and a FiLM-conditioned mask decoder that
//! reads the activations of a fixed set of encoder layers.

mod layers;
mod tokenizer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::EncoderAdapters;
use crate::autodiff::{concat, Parameter, Tensor, TensorError};
use crate::error::{Error, Result};
use crate::rng;

pub use layers::{Block, LayerNorm, Linear};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub n_layers_v: usize,
    pub n_layers_t: usize,
    pub n_heads: usize,
    pub proj_dim: usize,
    /// 1-based encoder layers whose outputs feed the decoder; strictly increasing.
    pub extract_layers: Vec<usize>,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub decoder_dim: usize,
    #[serde(default = "default_decoder_layers")]
    pub decoder_layers: usize,
}

fn default_decoder_layers() -> usize {
    2
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default: 64² images in 4-pixel patches.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 4,
            d_v: 64,
            d_t: 64,
            n_layers_v: 9,
            n_layers_t: 9,
            n_heads: 4,
            proj_dim: 64,
            extract_layers: vec![3, 6, 9],
            vocab_size: 512,
            max_text_len: 16,
            decoder_dim: 64,
            decoder_layers: 2,
        }
    }

    /// Small enough for finite-difference checks of the whole model.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            d_v: 8,
            d_t: 8,
            n_layers_v: 3,
            n_layers_t: 3,
            n_heads: 2,
            proj_dim: 4,
            extract_layers: vec![1, 2, 3],
            vocab_size: 32,
            max_text_len: 6,
            decoder_dim: 8,
            decoder_layers: 1,
        }
    }

    /// `L_T`: the deepest extracted layer.
    pub fn max_extract_layer(&self) -> usize {
        self.extract_layers.last().copied().unwrap_or(0)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image tokens including the class token.
    pub fn image_seq_len(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::config(format!("model.{field}"), reason));
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("n_layers_v", self.n_layers_v),
            ("n_layers_t", self.n_layers_t),
            ("n_heads", self.n_heads),
            ("proj_dim", self.proj_dim),
            ("decoder_dim", self.decoder_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        if self.image_size % self.patch_size != 0 {
            return bad(
                "patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            );
        }
        for (field, d) in [("d_v", self.d_v), ("d_t", self.d_t), ("decoder_dim", self.decoder_dim)] {
            if d % self.n_heads != 0 {
                return bad(field, format!("{d} is not divisible by n_heads {}", self.n_heads));
            }
        }
        if self.extract_layers.is_empty() {
            return bad("extract_layers", "must name at least one layer".into());
        }
        if self.extract_layers[0] == 0 {
            return bad("extract_layers", "layer indices are 1-based".into());
        }
        if self.extract_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("extract_layers", format!("{:?} is not strictly increasing", self.extract_layers));
        }
        let top = self.max_extract_layer();
        if top > self.n_layers_v {
            return bad("extract_layers", format!("layer {top} exceeds n_layers_v {}", self.n_layers_v));
        }
        if top > self.n_layers_t {
            return bad("extract_layers", format!("layer {top} exceeds n_layers_t {}", self.n_layers_t));
        }
        if self.vocab_size <= 3 {
            return bad("vocab_size", "must exceed the 3 reserved ids".into());
        }
        if self.max_text_len < 2 {
            return bad("max_text_len", "must fit at least BOS and EOS".into());
        }
        Ok(())
    }
}

/// What an encoder hands to the decoder.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Output of the last block, `[seq, width]`.
    pub output: Tensor,
    /// Output of each extracted block, keyed by 1-based layer index.
    pub extracted: BTreeMap<usize, Tensor>,
}

fn run_blocks(
    blocks: &[Block],
    mut x: Tensor,
    extract: &[usize],
    adapters: Option<&EncoderAdapters>,
) -> Result<EncoderTrace> {
    let mut extracted = BTreeMap::new();
    for (i, block) in blocks.iter().enumerate() {
        let layer = i + 1;
        x = block.forward(&x, adapters.and_then(|a| a.dense.get(i)))?;
        if let Some(a) = adapters.and_then(|a| a.shallow.get(&layer)) {
            x = a.forward(&x)?;
        }
        if extract.contains(&layer) {
            extracted.insert(layer, x.clone());
        }
    }
    Ok(EncoderTrace { output: x, extracted })
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub patch: Linear,
    pub class_token: Parameter,
    pub position: Parameter,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token: Parameter,
    pub position: Parameter,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub projection: Linear,
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    /// One per extracted layer, deepest first.
    pub reduces: Vec<Linear>,
    pub film_mul: Linear,
    pub film_add: Linear,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

/// The frozen backbone.
#[derive(Debug, Clone)]
pub struct Vlsm {
    pub config: ModelConfig,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub decoder: MaskDecoder,
}

impl Vlsm {
    /// Random initialization, fully determined by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut r = rng::derived(seed, 1);
        let patch_in = 3 * c.patch_size * c.patch_size;
        let vision = VisionEncoder {
            patch: Linear::new(&mut r, "vision.patch", patch_in, c.d_v, false),
            class_token: layers::embedding(&mut r, "vision.class_token".into(), &[1, c.d_v]),
            position: layers::embedding(&mut r, "vision.position".into(), &[c.image_seq_len(), c.d_v]),
            blocks: (1..=c.n_layers_v)
                .map(|l| Block::new(&mut r, &format!("vision.blocks.{l}"), c.d_v, c.n_heads, false))
                .collect(),
        };
        let text = TextEncoder {
            token: layers::embedding(&mut r, "text.token".into(), &[c.vocab_size, c.d_t]),
            position: layers::embedding(&mut r, "text.position".into(), &[c.max_text_len, c.d_t]),
            blocks: (1..=c.n_layers_t)
                .map(|l| Block::new(&mut r, &format!("text.blocks.{l}"), c.d_t, c.n_heads, true))
                .collect(),
            ln_final: LayerNorm::new("text.ln_final", c.d_t),
            projection: Linear::new(&mut r, "text.projection", c.d_t, c.proj_dim, false),
        };
        let decoder = MaskDecoder {
            reduces: c
                .extract_layers
                .iter()
                .rev()
                .map(|l| Linear::new(&mut r, &format!("decoder.reduce.{l}"), c.d_v, c.decoder_dim, true))
                .collect(),
            film_mul: Linear::new(&mut r, "decoder.film_mul", c.proj_dim, c.decoder_dim, true),
            film_add: Linear::new(&mut r, "decoder.film_add", c.proj_dim, c.decoder_dim, true),
            blocks: (1..=c.decoder_layers)
                .map(|l| Block::new(&mut r, &format!("decoder.blocks.{l}"), c.decoder_dim, c.n_heads, false))
                .collect(),
            head: Linear::new(
                &mut r,
                "decoder.head",
                c.decoder_dim,
                c.patch_size * c.patch_size,
                true,
            ),
        };
        Ok(Vlsm { config, vision, text, decoder })
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.config.vocab_size)
    }

    /// `image` is `[H, W, 3]` with values in `[0, 1]`.
    pub fn encode_image(&self, image: &Tensor, adapters: Option<&EncoderAdapters>) -> Result<EncoderTrace> {
        let c = &self.config;
        let (size, p, g) = (c.image_size, c.patch_size, c.grid());
        if image.shape() != [size, size, 3] {
            return Err(TensorError::Shape {
                op: "encode_image",
                detail: format!("expected image [{size}, {size}, 3], got {:?}", image.shape()),
            }
            .into());
        }
        let patches = image
            .reshape(&[g, p, g, p, 3])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[g * g, p * p * 3])?;
        let tokens = self.vision.patch.forward(&patches)?;
        let x = concat(&[self.vision.class_token.tensor().clone(), tokens], 0)?
            .add(self.vision.position.tensor())?;
        run_blocks(&self.vision.blocks, x, &c.extract_layers, adapters)
    }

    /// Clips an id sequence to `max_text_len`, keeping the final EOS.
    pub fn truncate_ids(&self, ids: &[usize]) -> Vec<usize> {
        let max = self.config.max_text_len;
        if ids.len() <= max {
            return ids.to_vec();
        }
        log::warn!("prompt of {} tokens truncated to max_text_len {max}", ids.len());
        let mut out = ids[..max - 1].to_vec();
        out.push(EOS);
        out
    }

    /// Returns the text trace and the conditioning embedding `[proj_dim]`
    /// read at the last (EOS) position.
    pub fn encode_text(
        &self,
        ids: &[usize],
        adapters: Option<&EncoderAdapters>,
    ) -> Result<(EncoderTrace, Tensor)> {
        let c = &self.config;
        if ids.is_empty() {
            return Err(TensorError::Contract("empty token sequence".into()).into());
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
            return Err(TensorError::Contract(format!("token id {bad} >= vocab_size {}", c.vocab_size)).into());
        }
        let ids = self.truncate_ids(ids);
        let n = ids.len();
        let x = self
            .text
            .token
            .tensor()
            .embedding_lookup(&ids)?
            .add(&self.text.position.tensor().narrow(0, 0, n)?)?;
        let trace = run_blocks(&self.text.blocks, x, &c.extract_layers, adapters)?;
        let last = trace.output.narrow(0, n - 1, 1)?;
        let cond = self
            .text
            .projection
            .forward(&self.text.ln_final.forward(&last)?)?
            .reshape(&[c.proj_dim])?;
        Ok((trace, cond))
    }

    /// Logits `[H, W]` from an image trace and a conditioning vector. The
    /// reduced activations are summed, then scaled and shifted by the
    /// conditioning before the decoder blocks.
    pub fn decode(&self, trace: &EncoderTrace, cond: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if cond.shape() != [c.proj_dim] {
            return Err(TensorError::Shape {
                op: "decode",
                detail: format!("conditioning must be [{}], got {:?}", c.proj_dim, cond.shape()),
            }
            .into());
        }
        let cond = cond.reshape(&[1, c.proj_dim])?;
        let mut fused: Option<Tensor> = None;
        for (reduce, layer) in self.decoder.reduces.iter().zip(c.extract_layers.iter().rev()) {
            let act = trace.extracted.get(layer).ok_or_else(|| {
                TensorError::Contract(format!("trace is missing extracted layer {layer}"))
            })?;
            let r = reduce.forward(act)?;
            fused = Some(match fused {
                None => r,
                Some(a) => a.add(&r)?,
            });
        }
        let mut a = fused
            .expect("extract_layers is non-empty")
            .mul(&self.decoder.film_mul.forward(&cond)?)?
            .add(&self.decoder.film_add.forward(&cond)?)?;
        for block in &self.decoder.blocks {
            a = block.forward(&a, None)?;
        }
        let (g, p) = (c.grid(), c.patch_size);
        let tokens = a.narrow(0, 1, g * g)?;
        let pixels = self.decoder.head.forward(&tokens)?;
        Ok(pixels
            .reshape(&[g, g, p, p])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[c.image_size, c.image_size])?)
    }

    /// Unadapted forward pass.
    pub fn forward(&self, image: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let trace = self.encode_image(image, None)?;
        let (_, cond) = self.encode_text(ids, None)?;
        self.decode(&trace, &cond)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = self.vision.patch.params();
        v.push(&self.vision.class_token);
        v.push(&self.vision.position);
        v.extend(self.vision.blocks.iter().flat_map(Block::params));
        v.push(&self.text.token);
        v.push(&self.text.position);
        v.extend(self.text.blocks.iter().flat_map(Block::params));
        v.extend(self.text.ln_final.params());
        v.extend(self.text.projection.params());
        v.extend(self.decoder.reduces.iter().flat_map(Linear::params));
        v.extend(self.decoder.film_mul.params());
        v.extend(self.decoder.film_add.params());
        v.extend(self.decoder.blocks.iter().flat_map(Block::params));
        v.extend(self.decoder.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.vision.patch.params_mut();
        v.push(&mut self.vision.class_token);
        v.push(&mut self.vision.position);
        v.extend(self.vision.blocks.iter_mut().flat_map(Block::params_mut));
        v.push(&mut self.text.token);
        v.push(&mut self.text.position);
        v.extend(self.text.blocks.iter_mut().flat_map(Block::params_mut));
        v.extend(self.text.ln_final.params_mut());
        v.extend(self.text.projection.params_mut());
        v.extend(self.decoder.reduces.iter_mut().flat_map(Linear::params_mut));
        v.extend(self.decoder.film_mul.params_mut());
        v.extend(self.decoder.film_add.params_mut());
        v.extend(self.decoder.blocks.iter_mut().flat_map(Block::params_mut));
        v.extend(self.decoder.head.params_mut());
        v
    }

    /// Marks every backbone parameter frozen.
    pub fn freeze_backbone(&mut self) {
        for p in self.params_mut() {
            p.set_trainable(false);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid_and_shapes_follow() {
        let c = ModelConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.image_seq_len(), 257);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn validation_names_offending_field() {
        let mut c = ModelConfig::toy();
        c.extract_layers = vec![3, 6, 12];
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.extract_layers"),
            other => panic!("unexpected {other:?}"),
        }
        let mut c = ModelConfig::toy();
        c.patch_size = 5;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "model.patch_size"));
        let mut c = ModelConfig::toy();
        c.d_v = 66;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "model.d_v"));
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = Vlsm::new(ModelConfig::tiny(), 0).unwrap();
        let mut names: Vec<_> = m.params().iter().map(|p| p.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(m.params().len(), m.clone().params_mut().len());
    }

    #[test]
    fn shape_arithmetic_for_spec_example() {
        let mut c = ModelConfig::toy();
        c.image_size = 32;
        c.patch_size = 8;
        c.d_v = 32;
        let m = Vlsm::new(c, 0).unwrap();
        let img = Tensor::full(&[32, 32, 3], 0.5);
        let trace = m.encode_image(&img, None).unwrap();
        assert_eq!(trace.extracted.len(), 3);
        for t in trace.extracted.values() {
            assert_eq!(t.shape(), &[17, 32]);
        }
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let m = Vlsm::new(ModelConfig::tiny(), 0).unwrap();
        let err = m.encode_image(&Tensor::zeros(&[4, 4, 3]), None).unwrap_err();
        assert!(matches!(err, Error::Tensor(TensorError::Shape { .. })));
    }

    #[test]
    fn overlong_prompt_is_truncated_keeping_eos() {
        let m = Vlsm::new(ModelConfig::tiny(), 0).unwrap();
        let ids: Vec<usize> = std::iter::once(BOS).chain([5; 10]).chain([EOS]).collect();
        let t = m.truncate_ids(&ids);
        assert_eq!(t.len(), 6);
        assert_eq!(*t.last().unwrap(), EOS);
        let (_, cond) = m.encode_text(&ids, None).unwrap();
        assert_eq!(cond.shape(), &[4]);
    }

    #[test]
    fn missing_extracted_layer_is_contract_error() {
        let m = Vlsm::new(ModelConfig::tiny(), 0).unwrap();
        let mut trace = m.encode_image(&Tensor::zeros(&[8, 8, 3]), None).unwrap();
        trace.extracted.remove(&2);
        let cond = Tensor::zeros(&[4]);
        assert!(matches!(m.decode(&trace, &cond), Err(Error::Tensor(TensorError::Contract(_)))));
    }
}
