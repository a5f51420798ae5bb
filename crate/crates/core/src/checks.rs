//! Finite-difference gradient checks over every differentiable op, the
//! adapter block, the training loss and a tiny adapted model.

use rand::Rng;

use crate::adapters::{AdaptedModel, AdapterBlock, AdapterKind, AdapterPlan, Variant};
use crate::autodiff::{attention, concat, grad_check, GradCheckReport, Tensor, TensorError};
use crate::error::Result;
use crate::model::{ModelConfig, Vlsm};
use crate::rng::{self, SeededRng};
use crate::train;

/// Relative tolerance for single ops, the adapter block and the loss.
pub const OP_TOL: f64 = 1e-6;
/// Relative tolerance for the whole model.
pub const MODEL_TOL: f64 = 1e-5;
pub const EPS: f64 = 1e-6;

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Result<Tensor, TensorError>>);

fn uniform(r: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| r.random_range(lo..hi)).collect(), shape).expect("positive extents")
}

/// Values bounded away from zero, for kinks and divisors.
fn away_from_zero(r: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = r.random_range(0.2..1.5);
            if r.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(v, shape).expect("positive extents")
}

/// A weighted sum turns any output into a scalar while exercising every element.
fn probe(y: &Tensor) -> Result<Tensor, TensorError> {
    let w: Vec<f64> = (0..y.numel()).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    Ok(y.mul(&Tensor::new(w, y.shape())?)?.sum())
}

fn op_cases(r: &mut SeededRng) -> Vec<Case> {
    let mut c: Vec<Case> = Vec::new();
    let x23 = || [2usize, 3];
    c.push(("add (broadcast bias)", vec![uniform(r, &x23(), -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)], Box::new(|v| probe(&v[0].add(&v[1])?))));
    c.push(("add (broadcast column)", vec![uniform(r, &x23(), -1.0, 1.0), uniform(r, &[2, 1], -1.0, 1.0)], Box::new(|v| probe(&v[0].add(&v[1])?))));
    c.push(("sub", vec![uniform(r, &x23(), -1.0, 1.0), uniform(r, &x23(), -1.0, 1.0)], Box::new(|v| probe(&v[0].sub(&v[1])?))));
    c.push(("mul (broadcast)", vec![uniform(r, &[2, 2, 3], -1.0, 1.0), uniform(r, &[2, 1, 3], -1.0, 1.0)], Box::new(|v| probe(&v[0].mul(&v[1])?))));
    c.push(("div", vec![uniform(r, &x23(), -1.0, 1.0), away_from_zero(r, &[3])], Box::new(|v| probe(&v[0].div(&v[1])?))));
    c.push(("scale", vec![uniform(r, &x23(), -1.0, 1.0)], Box::new(|v| probe(&v[0].scale(-2.5)))));
    c.push(("add_scalar", vec![uniform(r, &x23(), -1.0, 1.0)], Box::new(|v| probe(&v[0].add_scalar(0.7)))));
    c.push(("gelu", vec![uniform(r, &[4, 5], -3.0, 3.0)], Box::new(|v| probe(&v[0].gelu()))));
    c.push(("sigmoid", vec![uniform(r, &[4, 5], -4.0, 4.0)], Box::new(|v| probe(&v[0].sigmoid()))));
    c.push(("relu", vec![away_from_zero(r, &[4, 5])], Box::new(|v| probe(&v[0].relu()))));
    c.push(("sum", vec![uniform(r, &x23(), -1.0, 1.0)], Box::new(|v| Ok(v[0].sum()))));
    c.push(("mean", vec![uniform(r, &x23(), -1.0, 1.0)], Box::new(|v| Ok(v[0].mean()))));
    c.push(("sum_axis", vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], Box::new(|v| probe(&v[0].sum_axis(1)?))));
    c.push(("mean_axis", vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], Box::new(|v| probe(&v[0].mean_axis(2)?))));
    c.push(("reshape", vec![uniform(r, &[2, 6], -1.0, 1.0)], Box::new(|v| probe(&v[0].reshape(&[3, 4])?))));
    c.push(("permute", vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], Box::new(|v| probe(&v[0].permute(&[2, 0, 1])?))));
    c.push(("transpose", vec![uniform(r, &[3, 4], -1.0, 1.0)], Box::new(|v| probe(&v[0].transpose(0, 1)?))));
    c.push(("narrow", vec![uniform(r, &[3, 5], -1.0, 1.0)], Box::new(|v| probe(&v[0].narrow(1, 1, 3)?))));
    c.push(("concat", vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 2], -1.0, 1.0)], Box::new(|v| probe(&concat(&[v[0].clone(), v[1].clone()], 1)?))));
    c.push(("embedding_lookup", vec![uniform(r, &[5, 3], -1.0, 1.0)], Box::new(|v| probe(&v[0].embedding_lookup(&[4, 0, 4, 2])?))));
    c.push(("matmul", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], Box::new(|v| probe(&v[0].matmul(&v[1])?))));
    c.push(("matmul (batched, broadcast)", vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[1, 4, 2], -1.0, 1.0)], Box::new(|v| probe(&v[0].matmul(&v[1])?))));
    c.push(("softmax", vec![uniform(r, &[3, 4], -2.0, 2.0)], Box::new(|v| probe(&v[0].softmax()?))));
    c.push((
        "layer_norm",
        vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[5], 0.5, 1.5), uniform(r, &[5], -0.5, 0.5)],
        Box::new(|v| probe(&v[0].layer_norm(&v[1], &v[2])?)),
    ));
    c.push(("bce_with_logits", vec![uniform(r, &[3, 4], -3.0, 3.0)], {
        let t = Tensor::new((0..12).map(|i| f64::from(i % 3 == 0)).collect(), &[3, 4]).expect("shape");
        Box::new(move |v| v[0].bce_with_logits(&t))
    }));
    for (name, causal) in [("attention", false), ("attention (causal)", true)] {
        c.push((
            name,
            vec![uniform(r, &[4, 6], -1.0, 1.0), uniform(r, &[4, 6], -1.0, 1.0), uniform(r, &[4, 6], -1.0, 1.0)],
            Box::new(move |v| probe(&attention(&v[0], &v[1], &v[2], 2, causal)?)),
        ));
    }
    c
}

fn adapter_case(r: &mut SeededRng) -> Case {
    // Nonzero W2 and b2 so every weight receives gradient.
    let inputs = vec![
        uniform(r, &[3, 6], -1.0, 1.0),
        uniform(r, &[6, 2], -0.5, 0.5),
        uniform(r, &[2], -0.5, 0.5),
        uniform(r, &[2, 6], -0.5, 0.5),
        uniform(r, &[6], -0.5, 0.5),
    ];
    (
        "adapter block",
        inputs,
        Box::new(|v| {
            let b = AdapterBlock::from_weights("check", v[1].clone(), v[2].clone(), v[3].clone(), v[4].clone())
                .map_err(|e| TensorError::Contract(e.to_string()))?;
            probe(&b.forward(&v[0]).map_err(|e| TensorError::Contract(e.to_string()))?)
        }),
    )
}

fn loss_case(r: &mut SeededRng) -> Case {
    let mask = Tensor::new((0..64).map(|i| f64::from((i / 8 + i % 8) % 3 == 0)).collect(), &[8, 8]).expect("shape");
    (
        "dice + bce loss (8x8)",
        vec![uniform(r, &[8, 8], -2.0, 2.0)],
        Box::new(move |v| train::loss(&v[0], &mask, 1.5, 1.0).map_err(|e| TensorError::Contract(e.to_string()))),
    )
}

/// The tiny model with randomized adapters (so no gradient is trivially zero),
/// checked with respect to every adapter weight and the input image.
fn model_case(r: &mut SeededRng, variant: Variant, kind: AdapterKind) -> Result<Case> {
    let config = ModelConfig::tiny();
    let mut model = AdaptedModel::attach(AdapterPlan::new(variant, kind, 2), Vlsm::new(config.clone(), 11)?, 11)?;
    for p in model.adapter_params_mut() {
        let shape = p.shape().to_vec();
        p.assign(uniform(r, &shape, -0.3, 0.3).to_vec());
    }
    let size = config.image_size;
    let image = uniform(r, &[size, size, 3], 0.0, 1.0);
    let mask = Tensor::new((0..size * size).map(|i| f64::from(i % 5 < 2)).collect(), &[size, size])?;
    let ids = model.backbone.tokenizer().encode("the red circle");
    let mut inputs: Vec<Tensor> = model.adapter_params().iter().map(|p| p.tensor().detach()).collect();
    inputs.push(image);
    let label = match (variant, kind) {
        (Variant::VLC, AdapterKind::Dense) => "tiny model, VLC dense",
        (Variant::VLC, AdapterKind::Shallow) => "tiny model, VLC shallow",
        _ => "tiny model",
    };
    Ok((
        label,
        inputs,
        Box::new(move |v| {
            let mut m = model.clone();
            let n = v.len() - 1;
            for (p, t) in m.adapter_params_mut().into_iter().zip(&v[..n]) {
                p.set_tensor(t.clone())?;
            }
            let logits = m.forward(&v[n], &ids).map_err(|e| TensorError::Contract(e.to_string()))?;
            train::loss(&logits, &mask, 1.5, 1.0).map_err(|e| TensorError::Contract(e.to_string()))
        }),
    ))
}

/// Runs every check. Op-level checks use [`OP_TOL`], model checks [`MODEL_TOL`].
pub fn run_suite() -> Result<Vec<GradCheckReport>> {
    let mut r = rng::seeded(2024);
    let mut cases: Vec<(Case, f64)> = op_cases(&mut r).into_iter().map(|c| (c, OP_TOL)).collect();
    cases.push((adapter_case(&mut r), OP_TOL));
    cases.push((loss_case(&mut r), OP_TOL));
    for kind in [AdapterKind::Dense, AdapterKind::Shallow] {
        cases.push((model_case(&mut r, Variant::VLC, kind)?, MODEL_TOL));
    }
    let mut reports = Vec::with_capacity(cases.len());
    for ((label, inputs, f), tol) in cases {
        let report = grad_check(label, f, &inputs, EPS, tol)?;
        log::debug!("{label}: worst relative error {:.3e}", report.worst());
        reports.push(report);
    }
    Ok(reports)
}
