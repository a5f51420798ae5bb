use crate::adapters::DensePair;
use crate::autodiff::{attention, Parameter, Tensor};
use crate::error::Result;
use crate::rng::{trunc_normal, SeededRng};

pub(crate) const MLP_RATIO: usize = 4;

fn weight(rng: &mut SeededRng, name: String, shape: &[usize], std: f64) -> Parameter {
    let n = shape.iter().product();
    let t = Tensor::new(trunc_normal(rng, n, std), shape).expect("positive extents");
    Parameter::new(name, t, true)
}

fn constant(name: String, shape: &[usize], v: f64) -> Parameter {
    Parameter::new(name, Tensor::full(shape, v), true)
}

/// Embedding-style table drawn from N(0, 0.02²), truncated.
pub(crate) fn embedding(rng: &mut SeededRng, name: String, shape: &[usize]) -> Parameter {
    weight(rng, name, shape, 0.02)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    /// Fan-in scaled init: std = 1/sqrt(d_in), so activations keep unit scale
    /// through a stack of frozen random layers.
    pub(crate) fn new(rng: &mut SeededRng, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            weight: weight(rng, format!("{prefix}.weight"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt()),
            bias: bias.then(|| constant(format!("{prefix}.bias"), &[d_out], 0.0)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(self.weight.tensor())?;
        Ok(match &self.bias {
            Some(b) => y.add(b.tensor())?,
            None => y,
        })
    }

    pub(crate) fn params(&self) -> Vec<&Parameter> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Parameter> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl LayerNorm {
    pub(crate) fn new(prefix: &str, d: usize) -> Self {
        LayerNorm {
            gamma: constant(format!("{prefix}.gamma"), &[d], 1.0),
            beta: constant(format!("{prefix}.beta"), &[d], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(self.gamma.tensor(), self.beta.tensor())?)
    }

    pub(crate) fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Pre-LayerNorm transformer block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl Block {
    pub(crate) fn new(rng: &mut SeededRng, prefix: &str, d: usize, heads: usize, causal: bool) -> Self {
        Block {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), d),
            qkv: Linear::new(rng, &format!("{prefix}.attn.qkv"), d, 3 * d, true),
            out: Linear::new(rng, &format!("{prefix}.attn.out"), d, d, true),
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), d),
            fc1: Linear::new(rng, &format!("{prefix}.mlp.fc1"), d, MLP_RATIO * d, true),
            fc2: Linear::new(rng, &format!("{prefix}.mlp.fc2"), MLP_RATIO * d, d, true),
            heads,
            causal,
        }
    }

    /// With `dense`, each sublayer output passes through its adapter before
    /// the residual addition.
    pub fn forward(&self, x: &Tensor, dense: Option<&DensePair>) -> Result<Tensor> {
        let d = *x.shape().last().expect("rank >= 1");
        let h = self.ln1.forward(x)?;
        let qkv = self.qkv.forward(&h)?;
        let q = qkv.narrow(1, 0, d)?;
        let k = qkv.narrow(1, d, d)?;
        let v = qkv.narrow(1, 2 * d, d)?;
        let mut a = self.out.forward(&attention(&q, &k, &v, self.heads, self.causal)?)?;
        if let Some(pair) = dense {
            a = pair.attn.forward(&a)?;
        }
        let x = x.add(&a)?;
        let h = self.ln2.forward(&x)?;
        let mut m = self.fc2.forward(&self.fc1.forward(&h)?.gelu())?;
        if let Some(pair) = dense {
            m = pair.mlp.forward(&m)?;
        }
        Ok(x.add(&m)?)
    }

    pub(crate) fn params(&self) -> Vec<&Parameter> {
        let mut v = self.ln1.params();
        v.extend(self.qkv.params());
        v.extend(self.out.params());
        v.extend(self.ln2.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.ln1.params_mut();
        v.extend(self.qkv.params_mut());
        v.extend(self.out.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}
