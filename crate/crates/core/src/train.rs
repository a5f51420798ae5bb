//! Fine-tuning loop: Dice + BCE objective, AdamW on adapter weights only,
//! plateau learning-rate decay on validation loss and early stopping on
//! validation DSC.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptedModel, AdapterKind};
use crate::autodiff::{no_grad, Parameter, Tensor, TensorError};
use crate::data::{self, DatasetSplits, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, Mask};
use crate::rng;

/// Dice smoothing on numerator and denominator.
pub const DICE_EPS: f64 = 1.0;
/// A validation quantity must beat its best by more than this to count.
pub const IMPROVEMENT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub lambda_d: f64,
    pub lambda_ce: f64,
    pub seed: u64,
    pub max_epochs: usize,
    /// Binarization threshold on `sigmoid(logits)` for validation DSC.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-3,
            plateau_factor: 0.3,
            plateau_patience: 5,
            early_stop_patience: 20,
            lambda_d: 1.5,
            lambda_ce: 1.0,
            seed: 0,
            max_epochs: 200,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    /// Recipe defaults with the initial learning rate for `kind`.
    pub fn for_kind(kind: AdapterKind) -> Self {
        let lr = match kind {
            AdapterKind::Dense => 1e-3,
            AdapterKind::Shallow => 3e-4,
        };
        TrainConfig { lr, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::config(format!("train.{field}"), reason));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor", format!("{} is not in (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience", "must be at least 1".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience", "must be at least 1".into());
        }
        if !(self.lambda_d >= 0.0) {
            return bad("lambda_d", format!("{} is negative", self.lambda_d));
        }
        if !(self.lambda_ce >= 0.0) {
            return bad("lambda_ce", format!("{} is negative", self.lambda_ce));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} is not a positive learning rate", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("{} is negative", self.weight_decay));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", format!("{} is not in (0, 1)", self.threshold));
        }
        Ok(())
    }
}

/// `λ_d · Dice + λ_ce · BCE` for logits `[H, W]` against a binary mask.
pub fn loss(logits: &Tensor, mask: &Tensor, lambda_d: f64, lambda_ce: f64) -> Result<Tensor> {
    if logits.shape() != mask.shape() {
        return Err(TensorError::Shape {
            op: "loss",
            detail: format!("logits {:?} vs mask {:?}", logits.shape(), mask.shape()),
        }
        .into());
    }
    if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(TensorError::Contract(format!("mask value {v} is not binary")).into());
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::Contract("logits are not finite".into()).into());
    }
    let p = logits.sigmoid();
    let inter = p.mul(mask)?.sum();
    let denom = p.sum().add_scalar(mask.data().iter().sum::<f64>() + DICE_EPS);
    let dice = inter.scale(2.0).add_scalar(DICE_EPS).div(&denom)?.scale(-1.0).add_scalar(1.0);
    let bce = logits.bce_with_logits(mask)?;
    Ok(dice.scale(lambda_d).add(&bce.scale(lambda_ce))?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments, one buffer per parameter, plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&mut Parameter]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update with weight decay decoupled from the gradient:
/// `w <- w - lr*wd*w`, then the bias-corrected Adam step.
pub fn adamw_step(
    params: &mut [&mut Parameter],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    wd: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(TensorError::Contract(format!(
            "adamw: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        ))
        .into());
    }
    for (i, p) in params.iter().enumerate() {
        if !p.trainable() {
            return Err(TensorError::Contract(format!("adamw: {} is frozen", p.name)).into());
        }
        if grads[i].len() != p.numel() || state.m[i].len() != p.numel() || state.v[i].len() != p.numel() {
            return Err(TensorError::Contract(format!("adamw: buffer size mismatch for {}", p.name)).into());
        }
    }
    state.step += 1;
    let AdamHyper { beta1, beta2, eps } = hyper;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut w = p.data().to_vec();
        for j in 0..w.len() {
            let g = grads[i][j];
            w[j] -= lr * wd * w[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            w[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
        }
        p.assign(w);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dsc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Kept out of the epoch log so logs of identical runs compare equal.
    #[serde(skip)]
    pub wall_time_s: f64,
    /// Present on the final record only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: Option<StopReason>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
}

impl RunHistory {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.epochs {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    /// Wall-clock seconds per epoch, one JSON object per line.
    pub fn write_timing(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.epochs {
            writeln!(f, "{{\"epoch\":{},\"wall_time_s\":{:.3}}}", r.epoch, r.wall_time_s)
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Every lr change is a single multiplication by `factor`, never an increase.
    pub fn lr_schedule_is_valid(&self, factor: f64) -> bool {
        self.epochs.windows(2).all(|w| w[1].lr == w[0].lr || w[1].lr == w[0].lr * factor)
    }
}

/// Validation loss and DSC for the current weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValSignal {
    pub loss: f64,
    pub dsc: f64,
}

/// Mean loss and DSC over `samples`, each scored with its first prompt.
pub fn validate(model: &AdaptedModel, samples: &[Sample], cfg: &TrainConfig) -> Result<ValSignal> {
    if samples.is_empty() {
        return Err(Error::config("data.val", "validation split is empty"));
    }
    let tok = model.backbone.tokenizer();
    no_grad(|| {
        let (mut loss_sum, mut dsc_sum) = (0.0, 0.0);
        for s in samples {
            let logits = model.forward(&s.image_tensor(), &tok.encode(&s.prompts[0]))?;
            loss_sum += loss(&logits, &s.mask_tensor(), cfg.lambda_d, cfg.lambda_ce)?.item();
            let pred = Mask::from_logits(s.size(), s.size(), logits.data(), cfg.threshold)?;
            dsc_sum += metrics::dsc(&pred, &s.mask)?;
        }
        let n = samples.len() as f64;
        Ok(ValSignal { loss: loss_sum / n, dsc: dsc_sum / n })
    })
}

/// Trains the adapters of `model` and leaves it holding the best-validation-DSC
/// weights. Frozen parameters are never written.
pub fn train(model: &mut AdaptedModel, data: &DatasetSplits, cfg: &TrainConfig) -> Result<RunHistory> {
    train_with(model, data, cfg, |m, _| validate(m, &data.val, cfg))
}

/// Like [`train`], with the validation signal supplied by `val`
/// (called once per epoch with the 1-based epoch number).
pub fn train_with(
    model: &mut AdaptedModel,
    data: &DatasetSplits,
    cfg: &TrainConfig,
    mut val: impl FnMut(&AdaptedModel, usize) -> Result<ValSignal>,
) -> Result<RunHistory> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("data.train", "training split is empty"));
    }
    let tok = model.backbone.tokenizer();
    let mut state = AdamState::new(&model.adapter_params_mut());
    let mut order_rng = rng::derived(cfg.seed, 3);
    let mut lr = cfg.lr;
    let mut history = RunHistory { best_val_dsc: f64::NEG_INFINITY, ..RunHistory::default() };
    let mut best_loss = f64::INFINITY;
    let (mut since_loss, mut since_dsc) = (0usize, 0usize);
    let mut best_weights: Option<Vec<Vec<f64>>> = None;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.zero_grad();
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &data.train[i];
                let ids = tok.encode(data::sample_prompt(s, &mut order_rng));
                let logits = model.forward(&s.image_tensor(), &ids)?;
                let l = loss(&logits, &s.mask_tensor(), cfg.lambda_d, cfg.lambda_ce).map_err(|e| match e {
                    Error::Tensor(TensorError::Contract(msg)) if msg.contains("finite") => Error::Numerical(format!(
                        "non-finite logits at epoch {epoch}, batch {b}, seed {}",
                        cfg.seed
                    )),
                    e => e,
                })?;
                if !l.item().is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss is {} at epoch {epoch}, batch {b}, seed {}",
                        l.item(),
                        cfg.seed
                    )));
                }
                loss_sum += l.item();
                l.scale(inv).backward()?;
            }
            let mut params = model.adapter_params_mut();
            let grads: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, batch {b}, seed {}",
                    cfg.seed
                )));
            }
            adamw_step(&mut params, &grads, &mut state, lr, cfg.weight_decay, AdamHyper::default())?;
        }
        let train_loss = loss_sum / data.train.len() as f64;
        let signal = val(model, epoch)?;
        let mut record = EpochRecord {
            epoch,
            train_loss,
            val_loss: signal.loss,
            val_dsc: signal.dsc,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
            stop: None,
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.4} val {:.4} dsc {:.2} lr {lr:.3e} ({:.1}s)",
            signal.loss,
            signal.dsc,
            record.wall_time_s
        );

        if signal.loss < best_loss - IMPROVEMENT_TOL {
            best_loss = signal.loss;
            since_loss = 0;
        } else {
            since_loss += 1;
            if since_loss >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                since_loss = 0;
                log::info!("validation loss plateaued; lr -> {lr:.3e}");
            }
        }
        if signal.dsc > history.best_val_dsc + IMPROVEMENT_TOL {
            history.best_val_dsc = signal.dsc;
            history.best_epoch = epoch;
            since_dsc = 0;
            best_weights = Some(model.adapter_params().iter().map(|p| p.data().to_vec()).collect());
        } else {
            since_dsc += 1;
        }
        let stop = if since_dsc >= cfg.early_stop_patience {
            Some(StopReason::EarlyStop)
        } else if epoch == cfg.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        };
        record.stop = stop;
        history.epochs.push(record);
        if stop.is_some() {
            history.stop_reason = stop;
            break;
        }
    }
    if let Some(best) = best_weights {
        for (p, w) in model.adapter_params_mut().into_iter().zip(best) {
            p.assign(w);
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let m = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let logits = Tensor::new(vec![40.0, -40.0, -40.0, 40.0], &[2, 2]).unwrap();
        assert!(loss(&logits, &m, 1.5, 1.0).unwrap().item() < 1e-6);
    }

    #[test]
    fn non_binary_mask_is_contract_error() {
        let m = Tensor::new(vec![0.5; 4], &[2, 2]).unwrap();
        let err = loss(&Tensor::zeros(&[2, 2]), &m, 1.5, 1.0).unwrap_err();
        assert!(matches!(err, Error::Tensor(TensorError::Contract(_))));
    }

    #[test]
    fn config_validation_names_fields() {
        let cfg = TrainConfig { plateau_factor: 1.0, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "train.plateau_factor"));
        let cfg = TrainConfig { early_stop_patience: 0, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "train.early_stop_patience"));
        assert_eq!(TrainConfig::for_kind(AdapterKind::Shallow).lr, 3e-4);
    }

    #[test]
    fn frozen_param_rejected_by_adamw() {
        let mut p = Parameter::new("w", Tensor::zeros(&[1]), false);
        let mut params = [&mut p];
        let mut st = AdamState { m: vec![vec![0.0]], v: vec![vec![0.0]], step: 0 };
        let err = adamw_step(&mut params, &[vec![1.0]], &mut st, 1e-3, 0.0, AdamHyper::default());
        assert!(err.is_err());
    }

    #[test]
    fn epoch_log_omits_wall_time() {
        let r = EpochRecord {
            epoch: 1,
            train_loss: 1.0,
            val_loss: 1.0,
            val_dsc: 50.0,
            lr: 1e-3,
            wall_time_s: 3.0,
            stop: None,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(!s.contains("wall") && !s.contains("stop"));
    }
}
