//! Contrastive pretraining loop.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{derive_seed, PreparedDataset};
use crate::encoders::{init_encoder, Encoder, EncoderCheckpoint, EncoderConfig};
use crate::error::{Result, WspError};
use crate::exec;
use crate::losses::{contrastive_loss, BatchMeta, LossConfig, ViewMeta};
use crate::sampling::{make_views, plan_epoch, AugmentConfig, BatchSpec, SampledSlice, SamplingMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// First/second-moment method with bias correction and decoupled decay.
    AdaptiveMoments,
    /// Heavy-ball SGD, momentum 0.9.
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineGranularity {
    Iteration,
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub cosine_granularity: CosineGranularity,
    pub augment: AugmentConfig,
    /// Steps per epoch when the fallback sampler is active.
    pub fallback_steps: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            optimizer: OptimizerKind::AdaptiveMoments,
            epochs: 30,
            batch_size: 32,
            loss: LossConfig::default(),
            seed: 0,
            cosine_granularity: CosineGranularity::Iteration,
            augment: AugmentConfig::default(),
            fallback_steps: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(WspError::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(WspError::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(WspError::Config("epochs must be >= 1".into()));
        }
        if self.fallback_steps == Some(0) {
            return Err(WspError::Config("fallback_steps must be >= 1".into()));
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;

/// `α · ½(1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, alpha: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(WspError::Contract(format!("schedule step {t} outside [0, {total}]")));
    }
    if t == total {
        return Ok(0.0);
    }
    Ok(alpha * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// Per-parameter optimizer buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        OptimizerState {
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One update of every parameter. `names` labels parameters in errors.
pub fn optimizer_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    names: &[String],
    state: &mut OptimizerState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(WspError::Dimension(format!(
            "{} parameters, {} gradients, {} state buffers",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(WspError::Dimension(format!(
                "parameter {k}: shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(WspError::NonFinite {
                step: state.steps as usize,
                location: names.get(k).cloned().unwrap_or_else(|| format!("param{k}")),
                detail: format!("gradient element {pos} is {}", g.data()[pos]),
            });
        }
    }
    state.steps += 1;
    let t = state.steps as i32;
    let decay = 1.0 - lr * cfg.weight_decay;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[k].data_mut();
        let p = p.data_mut();
        match cfg.optimizer {
            OptimizerKind::AdaptiveMoments => {
                let v = state.second[k].data_mut();
                for i in 0..p.len() {
                    let gi = g.data()[i];
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                    p[i] = p[i] * decay - lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                }
            }
            OptimizerKind::SgdMomentum => {
                for i in 0..p.len() {
                    m[i] = MOMENTUM * m[i] + g.data()[i];
                    p[i] = p[i] * decay - lr * m[i];
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: EncoderCheckpoint,
    pub curve: Vec<EpochLoss>,
    /// True when strict sampling was infeasible and the fallback ran.
    pub used_fallback: bool,
}

/// Stack two augmented views per sampled slice, interleaved `[a0, b0, a1, b1, ...]`.
fn build_batch(
    ds: &PreparedDataset,
    batch: &[SampledSlice],
    augment: &AugmentConfig,
    seed: u64,
) -> Result<(Tensor, BatchMeta)> {
    let views = exec::map_indexed(batch.len(), |i| {
        let s = &batch[i];
        let slice = &ds.patients[s.patient].slices[s.slice];
        make_views(&slice.pixels, augment, derive_seed(seed, &[i as u64]))
    });
    let hw = ds.height * ds.width;
    let mut data = Vec::with_capacity(2 * batch.len() * hw);
    let mut meta = Vec::with_capacity(2 * batch.len());
    for (s, v) in batch.iter().zip(views) {
        let (a, b) = v?;
        data.extend_from_slice(&a);
        data.extend_from_slice(&b);
        let patient = &ds.patients[s.patient];
        let slice = &patient.slices[s.slice];
        let m = ViewMeta {
            y: patient.y_weak as i64,
            d: slice.d,
            slice_id: slice.slice_id,
            patient_id: patient.index,
        };
        meta.push(m);
        meta.push(m);
    }
    let x = Tensor::new(vec![2 * batch.len(), 1, ds.height, ds.width], data)?;
    Ok((x, BatchMeta::new(meta)?))
}

fn describe_batch(meta: &BatchMeta) -> String {
    let ids: Vec<String> = meta.views.iter().step_by(2).map(|v| v.slice_id.to_string()).collect();
    format!("batch slice ids [{}]", ids.join(","))
}

/// Most slices used for the data-dependent initialization.
pub const INIT_BATCH: usize = 256;

/// Random draw for `enc_cfg.seed`, then (if enabled) data-dependent
/// initialization on up to [`INIT_BATCH`] slices spread evenly over `ds`.
pub fn initial_encoder(ds: &PreparedDataset, enc_cfg: &EncoderConfig) -> Result<Encoder> {
    let mut encoder = init_encoder(enc_cfg)?;
    if !enc_cfg.data_init {
        return Ok(encoder);
    }
    let all: Vec<&[f64]> = ds.patients.iter().flat_map(|p| p.slices.iter().map(|s| &s.pixels[..])).collect();
    if all.is_empty() {
        return Err(WspError::Contract("data-dependent initialization needs at least one slice".into()));
    }
    let n = all.len().min(INIT_BATCH);
    let mut data = Vec::with_capacity(n * ds.height * ds.width);
    for i in 0..n {
        data.extend_from_slice(all[i * all.len() / n]);
    }
    let batch = Tensor::new(vec![n, 1, ds.height, ds.width], data)?;
    encoder.data_dependent_init(&batch)?;
    Ok(encoder)
}

/// Train `encoder ∘ projection` with the configured contrastive loss.
///
/// Deterministic given `enc_cfg.seed`, `cfg.seed` and the dataset.
pub fn pretrain(ds: &PreparedDataset, enc_cfg: &EncoderConfig, cfg: &OptimConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    if enc_cfg.input_shape != [1, ds.height, ds.width] {
        return Err(WspError::Dimension(format!(
            "encoder input {:?} vs dataset slices {}x{}",
            enc_cfg.input_shape, ds.height, ds.width
        )));
    }
    let mut encoder = initial_encoder(ds, enc_cfg)?;
    let names = encoder.parameter_names();
    let mut state = OptimizerState::new(encoder.params());

    let spec_for = |epoch: usize, mode| BatchSpec::new(cfg.batch_size, mode, derive_seed(cfg.seed, &[1]), epoch as u64);
    let (mode, first_plan) = match plan_epoch(ds, &spec_for(0, SamplingMode::OneSlicePerPatient), None) {
        Ok(plan) => (SamplingMode::OneSlicePerPatient, plan),
        Err(WspError::FallbackRequired { .. }) => {
            let spec = spec_for(0, SamplingMode::FallbackBalanced);
            (SamplingMode::FallbackBalanced, plan_epoch(ds, &spec, cfg.fallback_steps)?)
        }
        Err(e) => return Err(e),
    };
    let steps_per_epoch = first_plan.len();
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut plan = Some(first_plan);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = match plan.take() {
            Some(p) => p,
            None => plan_epoch(ds, &spec_for(epoch, mode), cfg.fallback_steps)?,
        };
        let epoch_lr = match cfg.cosine_granularity {
            CosineGranularity::Iteration => cosine_lr(step, total_steps, cfg.lr)?,
            CosineGranularity::Epoch => cosine_lr(epoch, cfg.epochs, cfg.lr)?,
        };
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let view_seed = derive_seed(cfg.seed, &[2, epoch as u64, b as u64]);
            let (x, meta) = build_batch(ds, batch, &cfg.augment, view_seed)?;
            let tape = Tape::new();
            let params = encoder.bind(&tape, true);
            let xv = tape.constant(x);
            let r = encoder.encode_var(&tape, &params, xv)?;
            let z = encoder.project_var(&tape, &params, r)?;
            let loss = contrastive_loss(&tape, z, &meta, &cfg.loss)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(WspError::NonFinite {
                    step,
                    location: "loss".into(),
                    detail: format!("loss {value} at epoch {epoch}, {}", describe_batch(&meta)),
                });
            }
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
            let lr = match cfg.cosine_granularity {
                CosineGranularity::Iteration => cosine_lr(step, total_steps, cfg.lr)?,
                CosineGranularity::Epoch => epoch_lr,
            };
            optimizer_step(encoder.params_mut(), &grads, &names, &mut state, cfg, lr).map_err(|e| match e {
                WspError::NonFinite { location, detail, .. } => WspError::NonFinite {
                    step,
                    location,
                    detail: format!("{detail}; {}", describe_batch(&meta)),
                },
                other => other,
            })?;
            total += value;
            step += 1;
        }
        curve.push(EpochLoss {
            epoch: epoch + 1,
            mean_loss: total / batches.len() as f64,
            lr: epoch_lr,
        });
    }
    Ok(PretrainOutput {
        checkpoint: EncoderCheckpoint {
            encoder,
            step: step as u64,
            loss_kind: Some(cfg.loss.kind),
        },
        curve,
        used_fallback: mode == SamplingMode::FallbackBalanced,
    })
}

pub fn write_loss_curve(path: &Path, curve: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for e in curve {
        out.push_str(&format!("{},{:.17e},{:.17e}\n", e.epoch, e.mean_loss, e.lr));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| WspError::io(path, e))
}
