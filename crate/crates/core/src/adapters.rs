//! Bottleneck adapters for a frozen vision-language segmentation backbone.
//!
//! An adapter maps `f -> f + σ(ψ(f·W1 + b1)·W2 + b2)` with `W1: d×d'` and
//! `W2: d'×d`, so it keeps the width of whatever it wraps. Two placements
//! are supported:
//!
//! * **Shallow**: one adapter on the output of each skip-connection layer
//!   (the layers the decoder reads), in both encoders.
//! * **Dense**: two adapters per transformer block for blocks `1..=L_T`, one
//!   on the attention output and one on the MLP output, each applied before
//!   its residual addition.
//!
//! Variants choose the encoders: `V` adapts the image encoder, `VL` adds the
//! text encoder, `VLC` additionally adapts the conditioning embedding.
//! [`count_trainable`] gives the closed-form parameter budget of a plan.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tensor, TensorError};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Vlsm};
use crate::rng::{self, trunc_normal, SeededRng};

/// Std of the truncated-normal draw for `W1`; `W2`, `b1`, `b2` start at zero.
pub const W1_INIT_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Identity => x.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdapterBlock {
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
    pub psi: Activation,
    pub sigma: Activation,
    d: usize,
    d_prime: usize,
}

impl AdapterBlock {
    /// Zero-output initialization: the block starts as the identity.
    pub fn new(prefix: &str, d: usize, d_prime: usize, rng: &mut SeededRng) -> Result<Self> {
        if d_prime == 0 || d_prime > d {
            return Err(Error::config(
                "adapter.d_prime",
                format!("bottleneck width {d_prime} must be in 1..={d} at {prefix}"),
            ));
        }
        let w1 = Tensor::new(trunc_normal(rng, d * d_prime, W1_INIT_STD), &[d, d_prime])?;
        Ok(AdapterBlock {
            w1: Parameter::new(format!("{prefix}.w1"), w1, true),
            b1: Parameter::new(format!("{prefix}.b1"), Tensor::zeros(&[d_prime]), true),
            w2: Parameter::new(format!("{prefix}.w2"), Tensor::zeros(&[d_prime, d]), true),
            b2: Parameter::new(format!("{prefix}.b2"), Tensor::zeros(&[d]), true),
            psi: Activation::Gelu,
            sigma: Activation::Gelu,
            d,
            d_prime,
        })
    }

    /// Builds a block from explicit weights (`w1: [d, d']`, `b1: [d']`,
    /// `w2: [d', d]`, `b2: [d]`).
    pub fn from_weights(prefix: &str, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let (d, d_prime) = match w1.shape() {
            [d, dp] => (*d, *dp),
            s => {
                return Err(TensorError::Shape { op: "adapter", detail: format!("W1 must be rank 2, got {s:?}") }.into())
            }
        };
        let ok = b1.shape() == [d_prime] && w2.shape() == [d_prime, d] && b2.shape() == [d];
        if !ok || d_prime > d {
            return Err(TensorError::Shape {
                op: "adapter",
                detail: format!(
                    "inconsistent adapter weights W1 {:?}, b1 {:?}, W2 {:?}, b2 {:?}",
                    w1.shape(),
                    b1.shape(),
                    w2.shape(),
                    b2.shape()
                ),
            }
            .into());
        }
        Ok(AdapterBlock {
            w1: Parameter::new(format!("{prefix}.w1"), w1, true),
            b1: Parameter::new(format!("{prefix}.b1"), b1, true),
            w2: Parameter::new(format!("{prefix}.w2"), w2, true),
            b2: Parameter::new(format!("{prefix}.b2"), b2, true),
            psi: Activation::Gelu,
            sigma: Activation::Gelu,
            d,
            d_prime,
        })
    }

    pub fn with_activations(mut self, psi: Activation, sigma: Activation) -> Self {
        self.psi = psi;
        self.sigma = sigma;
        self
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn bottleneck(&self) -> usize {
        self.d_prime
    }

    /// `f + σ(ψ(f·W1 + b1)·W2 + b2)` over the trailing axis of `f`.
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        if f.shape().last() != Some(&self.d) {
            return Err(TensorError::Shape {
                op: "adapter",
                detail: format!("input {:?} does not end in adapter width {}", f.shape(), self.d),
            }
            .into());
        }
        let hidden = self.psi.apply(&f.matmul_last(self.w1.tensor())?.add(self.b1.tensor())?);
        let delta = self.sigma.apply(&hidden.matmul_last(self.w2.tensor())?.add(self.b2.tensor())?);
        Ok(f.add(&delta)?)
    }

    pub fn params(&self) -> [&Parameter; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// `d·d' + d' + d'·d + d`.
    pub fn param_count(d: usize, d_prime: usize) -> u64 {
        (2 * d * d_prime + d_prime + d) as u64
    }
}

impl Tensor {
    /// `[.., d] @ [d, e]` for inputs of any rank, including rank 1.
    fn matmul_last(&self, w: &Tensor) -> std::result::Result<Tensor, TensorError> {
        if self.rank() >= 2 {
            return self.matmul(w);
        }
        let d = self.shape()[0];
        let e = *w.shape().last().expect("rank >= 1");
        self.reshape(&[1, d])?.matmul(w)?.reshape(&[e])
    }
}

/// Adapters attached to one encoder.
#[derive(Debug, Clone, Default)]
pub struct EncoderAdapters {
    /// Index `i` wraps block `i + 1`.
    pub dense: Vec<DensePair>,
    /// Keyed by 1-based layer; applied to that block's output.
    pub shallow: BTreeMap<usize, AdapterBlock>,
}

impl EncoderAdapters {
    pub fn blocks(&self) -> impl Iterator<Item = &AdapterBlock> {
        self.dense.iter().flat_map(|p| [&p.attn, &p.mlp]).chain(self.shallow.values())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut AdapterBlock> {
        self.dense
            .iter_mut()
            .flat_map(|p| [&mut p.attn, &mut p.mlp])
            .chain(self.shallow.values_mut())
    }

    pub fn is_empty(&self) -> bool {
        self.dense.is_empty() && self.shallow.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DensePair {
    pub attn: AdapterBlock,
    pub mlp: AdapterBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    V,
    VL,
    VLC,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::V, Variant::VL, Variant::VLC];

    pub fn adapts_text(self) -> bool {
        self != Variant::V
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::V => "V",
            Variant::VL => "VL",
            Variant::VLC => "VLC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Shallow,
    Dense,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::Shallow => "shallow",
            AdapterKind::Dense => "dense",
        })
    }
}

/// Where adapters go and how wide their bottleneck is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterPlan {
    pub variant: Variant,
    pub kind: AdapterKind,
    pub d_prime: usize,
    /// Shallow sites; defaults to the model's extract layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shallow_layers: Option<Vec<usize>>,
    /// `L_T` for dense placement; defaults to the deepest extract layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_max_layer: Option<usize>,
    /// Adds the conditioning adapter; always on for `VLC`.
    #[serde(default)]
    pub include_conditioning: bool,
}

impl AdapterPlan {
    pub fn new(variant: Variant, kind: AdapterKind, d_prime: usize) -> Self {
        AdapterPlan {
            variant,
            kind,
            d_prime,
            shallow_layers: None,
            dense_max_layer: None,
            include_conditioning: variant == Variant::VLC,
        }
    }

    pub fn conditioning(&self) -> bool {
        self.include_conditioning || self.variant == Variant::VLC
    }
}

/// Widths and depths needed to place and count adapters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SiteDims {
    pub image_width: usize,
    pub text_width: usize,
    pub cond_width: usize,
    pub n_layers_v: usize,
    pub n_layers_t: usize,
    pub extract_layers: Vec<usize>,
}

impl SiteDims {
    /// CLIP ViT-B/16 widths: image 768 and text 512 over 12 layers each,
    /// 512-wide joint embedding, skip layers {3, 6, 9}.
    pub fn clip_b() -> Self {
        SiteDims {
            image_width: 768,
            text_width: 512,
            cond_width: 512,
            n_layers_v: 12,
            n_layers_t: 12,
            extract_layers: vec![3, 6, 9],
        }
    }

    pub fn from_config(c: &ModelConfig) -> Self {
        SiteDims {
            image_width: c.d_v,
            text_width: c.d_t,
            cond_width: c.proj_dim,
            n_layers_v: c.n_layers_v,
            n_layers_t: c.n_layers_t,
            extract_layers: c.extract_layers.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    Vision,
    Text,
}

impl Encoder {
    fn prefix(self) -> &'static str {
        match self {
            Encoder::Vision => "vision",
            Encoder::Text => "text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "site", rename_all = "snake_case")]
pub enum Site {
    DenseAttn { encoder: Encoder, layer: usize },
    DenseMlp { encoder: Encoder, layer: usize },
    Shallow { encoder: Encoder, layer: usize },
    Conditioning,
}

impl Site {
    /// Dotted prefix of the block's parameter names.
    pub fn path(&self) -> String {
        match self {
            Site::DenseAttn { encoder, layer } => format!("adapters.{}.dense.{layer}.attn", encoder.prefix()),
            Site::DenseMlp { encoder, layer } => format!("adapters.{}.dense.{layer}.mlp", encoder.prefix()),
            Site::Shallow { encoder, layer } => format!("adapters.{}.shallow.{layer}", encoder.prefix()),
            Site::Conditioning => "adapters.conditioning".to_string(),
        }
    }
}

/// One planned adapter with its input width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlannedSite {
    #[serde(flatten)]
    pub site: Site,
    pub width: usize,
    pub params: u64,
}

/// Expands a plan into its adapter sites, checking it against `dims`.
pub fn plan_sites(plan: &AdapterPlan, dims: &SiteDims) -> Result<Vec<PlannedSite>> {
    if plan.d_prime == 0 {
        return Err(Error::config("adapter.d_prime", "must be positive"));
    }
    let mut encoders = vec![(Encoder::Vision, dims.image_width, dims.n_layers_v)];
    if plan.variant.adapts_text() {
        encoders.push((Encoder::Text, dims.text_width, dims.n_layers_t));
    }
    let mut sites = Vec::new();
    match plan.kind {
        AdapterKind::Shallow => {
            let layers = plan.shallow_layers.as_ref().unwrap_or(&dims.extract_layers);
            if layers.is_empty() {
                return Err(Error::config("adapter.shallow_layers", "no layers listed"));
            }
            for (encoder, width, depth) in &encoders {
                for &layer in layers {
                    if layer == 0 || layer > *depth {
                        return Err(Error::config(
                            "adapter.shallow_layers",
                            format!("layer {layer} outside 1..={depth} of the {} encoder", encoder.prefix()),
                        ));
                    }
                    sites.push((Site::Shallow { encoder: *encoder, layer }, *width));
                }
            }
        }
        AdapterKind::Dense => {
            let top = plan.dense_max_layer.unwrap_or_else(|| dims.extract_layers.last().copied().unwrap_or(0));
            for (encoder, width, depth) in &encoders {
                if top == 0 || top > *depth {
                    return Err(Error::config(
                        "adapter.dense_max_layer",
                        format!("L_T = {top} outside 1..={depth} of the {} encoder", encoder.prefix()),
                    ));
                }
                for layer in 1..=top {
                    sites.push((Site::DenseAttn { encoder: *encoder, layer }, *width));
                    sites.push((Site::DenseMlp { encoder: *encoder, layer }, *width));
                }
            }
        }
    }
    if plan.conditioning() {
        sites.push((Site::Conditioning, dims.cond_width));
    }
    sites
        .into_iter()
        .map(|(site, width)| {
            if plan.d_prime > width {
                return Err(Error::config(
                    "adapter.d_prime",
                    format!("{} exceeds width {width} at {}", plan.d_prime, site.path()),
                ));
            }
            Ok(PlannedSite { site, width, params: AdapterBlock::param_count(width, plan.d_prime) })
        })
        .collect()
}

/// Closed-form trainable-parameter total of a plan.
pub fn count_trainable(plan: &AdapterPlan, dims: &SiteDims) -> Result<u64> {
    Ok(plan_sites(plan, dims)?.iter().map(|s| s.params).sum())
}

/// A frozen backbone with adapters attached.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub backbone: Vlsm,
    pub plan: AdapterPlan,
    pub vision: EncoderAdapters,
    pub text: EncoderAdapters,
    pub conditioning: Option<AdapterBlock>,
}

impl AdaptedModel {
    /// Builds every adapter the plan calls for and freezes the backbone.
    /// Adapter weights are drawn from a stream derived from `seed`.
    pub fn attach(plan: AdapterPlan, mut backbone: Vlsm, seed: u64) -> Result<Self> {
        let sites = plan_sites(&plan, &SiteDims::from_config(&backbone.config))?;
        let mut rng = rng::derived(seed, 2);
        let mut vision = EncoderAdapters::default();
        let mut text = EncoderAdapters::default();
        let mut conditioning = None;
        let mut pending_attn: Option<AdapterBlock> = None;
        for s in &sites {
            let block = AdapterBlock::new(&s.site.path(), s.width, plan.d_prime, &mut rng)?;
            let slot = |e: Encoder| match e {
                Encoder::Vision => 0,
                Encoder::Text => 1,
            };
            let encs = [&mut vision, &mut text];
            match s.site {
                Site::DenseAttn { .. } => pending_attn = Some(block),
                Site::DenseMlp { encoder, .. } => {
                    let attn = pending_attn.take().expect("attn site precedes mlp site");
                    encs[slot(encoder)].dense.push(DensePair { attn, mlp: block });
                }
                Site::Shallow { encoder, layer } => {
                    encs[slot(encoder)].shallow.insert(layer, block);
                }
                Site::Conditioning => conditioning = Some(block),
            }
        }
        backbone.freeze_backbone();
        Ok(AdaptedModel { backbone, plan, vision, text, conditioning })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    fn text_adapters(&self) -> Option<&EncoderAdapters> {
        (!self.text.is_empty()).then_some(&self.text)
    }

    /// Logits `[H, W]` for an image `[H, W, 3]` and token ids.
    pub fn forward(&self, image: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let trace = self.backbone.encode_image(image, Some(&self.vision))?;
        let cond = self.condition(ids)?;
        self.backbone.decode(&trace, &cond)
    }

    /// Conditioning embedding, after the conditioning adapter when present.
    pub fn condition(&self, ids: &[usize]) -> Result<Tensor> {
        let (_, cond) = self.backbone.encode_text(ids, self.text_adapters())?;
        match &self.conditioning {
            Some(a) => a.forward(&cond),
            None => Ok(cond),
        }
    }

    pub fn adapter_blocks(&self) -> Vec<&AdapterBlock> {
        self.vision.blocks().chain(self.text.blocks()).chain(self.conditioning.as_ref()).collect()
    }

    pub fn adapter_blocks_mut(&mut self) -> Vec<&mut AdapterBlock> {
        self.vision
            .blocks_mut()
            .chain(self.text.blocks_mut())
            .chain(self.conditioning.as_mut())
            .collect()
    }

    pub fn adapter_params(&self) -> Vec<&Parameter> {
        self.adapter_blocks().into_iter().flat_map(|b| b.params()).collect()
    }

    pub fn adapter_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.adapter_blocks_mut().into_iter().flat_map(|b| b.params_mut()).collect()
    }

    /// Backbone first, then adapters, in a fixed order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = self.backbone.params();
        v.extend(self.adapter_params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let AdaptedModel { backbone, vision, text, conditioning, .. } = self;
        let mut v = backbone.params_mut();
        v.extend(vision.blocks_mut().chain(text.blocks_mut()).chain(conditioning.as_mut()).flat_map(|b| b.params_mut()));
        v
    }

    /// Live census of trainable scalars.
    pub fn trainable_count(&self) -> u64 {
        self.params().iter().filter(|p| p.trainable()).map(|p| p.numel() as u64).sum()
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }
}
