//! Patient-balanced batch construction and view augmentation.
//!
//! Strict mode draws one slice from each of `N` distinct patients, with
//! per-class counts within one of each other. An epoch is a sequence of
//! `⌈patients/N⌉` batches filled from per-class shuffled queues, so on a
//! class-balanced cohort every patient appears once before any appears
//! twice. Cohorts too small for that use the fallback sampler, which keeps
//! the class balance but lets patients repeat.

use std::collections::{BTreeMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{rng_for, PreparedDataset};
use crate::error::{Result, WspError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    OneSlicePerPatient,
    FallbackBalanced,
}

/// Which label the sampler balances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceLabel {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub mode: SamplingMode,
    pub seed: u64,
    pub epoch: u64,
    pub balance: BalanceLabel,
}

impl BatchSpec {
    pub fn new(batch_size: usize, mode: SamplingMode, seed: u64, epoch: u64) -> Self {
        BatchSpec {
            batch_size,
            mode,
            seed,
            epoch,
            balance: BalanceLabel::Weak,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(WspError::Config(format!(
                "batch size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// One sampled slice: indices into `PreparedDataset::patients` and the
/// patient's slice list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampledSlice {
    pub patient: usize,
    pub slice: usize,
}

fn class_groups(ds: &PreparedDataset, label: BalanceLabel) -> Result<BTreeMap<i64, Vec<usize>>> {
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (k, p) in ds.patients.iter().enumerate() {
        if p.slices.is_empty() {
            continue;
        }
        let y = match label {
            BalanceLabel::Weak => p.y_weak as i64,
            BalanceLabel::Strong => p
                .y_strong
                .ok_or_else(|| WspError::Contract(format!("patient {} has no strong label", p.patient_id)))?
                as i64,
        };
        groups.entry(y).or_default().push(k);
    }
    if groups.is_empty() {
        return Err(WspError::Contract("dataset has no slices to sample".into()));
    }
    Ok(groups)
}

/// Per-class slot counts for batch `b`: `N/K` each, with the `N mod K`
/// extra slots rotating over `order` from batch to batch.
fn quotas(b: usize, n: usize, order: &[usize]) -> Vec<usize> {
    let k = order.len();
    let (base, rem) = (n / k, n % k);
    let mut q = vec![base; k];
    for j in 0..rem {
        q[order[(b * rem + j) % k]] += 1;
    }
    q
}

fn pick_slices(ds: &PreparedDataset, spec: &BatchSpec, b: usize, patients: &[usize]) -> Vec<SampledSlice> {
    let mut rng = rng_for(spec.seed, &[spec.epoch, b as u64]);
    patients
        .iter()
        .map(|&p| SampledSlice {
            patient: p,
            slice: rng.gen_range(0..ds.patients[p].slices.len()),
        })
        .collect()
}

/// All batches of one epoch. `fallback_steps` sets the batch count in
/// fallback mode (default `⌈patients/N⌉`).
pub fn plan_epoch(
    ds: &PreparedDataset,
    spec: &BatchSpec,
    fallback_steps: Option<usize>,
) -> Result<Vec<Vec<SampledSlice>>> {
    spec.validate()?;
    let groups = class_groups(ds, spec.balance)?;
    let classes: Vec<Vec<usize>> = groups.into_values().collect();
    let n_patients: usize = classes.iter().map(Vec::len).sum();
    let n = spec.batch_size;
    let mut rng = rng_for(spec.seed, &[spec.epoch, u64::MAX]);
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.shuffle(&mut rng);

    match spec.mode {
        SamplingMode::OneSlicePerPatient => {
            if n_patients < n {
                return Err(WspError::FallbackRequired {
                    needed: n,
                    available: n_patients,
                    detail: "patients".into(),
                });
            }
            let max_quota = n.div_ceil(classes.len());
            if let Some((c, members)) = classes.iter().enumerate().find(|(_, m)| m.len() < max_quota.min(n)) {
                return Err(WspError::FallbackRequired {
                    needed: max_quota,
                    available: members.len(),
                    detail: format!("patients in class #{c}"),
                });
            }
            let mut queues: Vec<VecDeque<usize>> = classes
                .iter()
                .map(|m| {
                    let mut v = m.clone();
                    v.shuffle(&mut rng);
                    v.into()
                })
                .collect();
            let steps = n_patients.div_ceil(n);
            let mut batches = Vec::with_capacity(steps);
            for b in 0..steps {
                let q = quotas(b, n, &order);
                let mut chosen = Vec::with_capacity(n);
                let mut in_batch = HashSet::new();
                for (c, &want) in q.iter().enumerate() {
                    let mut deferred = Vec::new();
                    let mut got = 0;
                    while got < want {
                        if queues[c].is_empty() {
                            let mut refill = classes[c].clone();
                            refill.shuffle(&mut rng);
                            queues[c].extend(refill);
                        }
                        let p = queues[c].pop_front().expect("refilled");
                        if in_batch.insert(p) {
                            chosen.push(p);
                            got += 1;
                        } else {
                            deferred.push(p);
                        }
                    }
                    for p in deferred.into_iter().rev() {
                        queues[c].push_front(p);
                    }
                }
                batches.push(pick_slices(ds, spec, b, &chosen));
            }
            Ok(batches)
        }
        SamplingMode::FallbackBalanced => {
            let steps = fallback_steps.unwrap_or_else(|| n_patients.div_ceil(n)).max(1);
            let mut batches = Vec::with_capacity(steps);
            for b in 0..steps {
                let q = quotas(b, n, &order);
                let mut chosen = Vec::with_capacity(n);
                for (c, &want) in q.iter().enumerate() {
                    for _ in 0..want {
                        chosen.push(*classes[c].choose(&mut rng).expect("non-empty class"));
                    }
                }
                batches.push(pick_slices(ds, spec, b, &chosen));
            }
            Ok(batches)
        }
    }
}

/// Batch `index` of the epoch described by `spec`, strict mode.
pub fn sample_batch(ds: &PreparedDataset, spec: &BatchSpec, index: usize) -> Result<Vec<SampledSlice>> {
    let spec = BatchSpec {
        mode: SamplingMode::OneSlicePerPatient,
        ..*spec
    };
    let mut epoch = plan_epoch(ds, &spec, None)?;
    if index >= epoch.len() {
        return Err(WspError::Contract(format!("batch {index} beyond epoch of {}", epoch.len())));
    }
    Ok(epoch.swap_remove(index))
}

/// Batch `index` of a fallback epoch: balanced classes, patients may repeat.
pub fn sample_batch_fallback(ds: &PreparedDataset, spec: &BatchSpec, index: usize) -> Result<Vec<SampledSlice>> {
    let spec = BatchSpec {
        mode: SamplingMode::FallbackBalanced,
        ..*spec
    };
    let mut epoch = plan_epoch(ds, &spec, Some(index + 1))?;
    Ok(epoch.swap_remove(index))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// When false, views are the unmodified input.
    pub enabled: bool,
    /// Rotation drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Crop area fraction range; the crop is resized back to full size.
    pub crop_scale: [f64; 2],
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            rotation_deg: 15.0,
            crop_scale: [0.7, 1.0],
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(WspError::Config(format!("crop scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale)));
        }
        if self.rotation_deg < 0.0 || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(WspError::Config("rotation range must be >= 0 and flip probability in [0,1]".into()));
        }
        Ok(())
    }
}

pub fn flip_horizontal(pixels: &[f64], width: usize) -> Vec<f64> {
    pixels
        .chunks(width)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

fn bilinear(img: &[f64], size: usize, y: f64, x: f64) -> f64 {
    let max = (size - 1) as f64;
    let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(size - 1), (x0 + 1).min(size - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| img[r * size + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Flip, rotate (bilinear, edge padding) and crop-resize a square image.
/// The same `draw_seed` always yields the same output.
pub fn augment(pixels: &[f64], cfg: &AugmentConfig, draw_seed: u64) -> Result<Vec<f64>> {
    let size = (pixels.len() as f64).sqrt().round() as usize;
    if size * size != pixels.len() || size == 0 {
        return Err(WspError::Dimension(format!("augment needs a square image, got {} pixels", pixels.len())));
    }
    if !cfg.enabled {
        return Ok(pixels.to_vec());
    }
    cfg.validate()?;
    let mut rng = rng_for(draw_seed, &[]);
    let flip = rng.gen_bool(cfg.flip_prob);
    let angle = if cfg.rotation_deg > 0.0 {
        rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians()
    } else {
        0.0
    };
    let [lo, hi] = cfg.crop_scale;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let n = size as f64;
    let side = scale.sqrt() * n;
    let ox = rng.gen_range(0.0..=n - side);
    let oy = rng.gen_range(0.0..=n - side);
    let center = (n - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::with_capacity(pixels.len());
    for i in 0..size {
        for j in 0..size {
            // output pixel → point of the rotated image under the crop
            let qx = ox + (j as f64 + 0.5) * side / n - 0.5;
            let qy = oy + (i as f64 + 0.5) * side / n - 0.5;
            // rotated image → flipped source
            let (dx, dy) = (qx - center, qy - center);
            let mut ux = cos * dx + sin * dy + center;
            let uy = -sin * dx + cos * dy + center;
            if flip {
                ux = n - 1.0 - ux;
            }
            out.push(bilinear(pixels, size, uy, ux));
        }
    }
    Ok(out)
}

/// Two independently augmented views of one slice.
pub fn make_views(pixels: &[f64], cfg: &AugmentConfig, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((
        augment(pixels, cfg, crate::data::derive_seed(seed, &[0]))?,
        augment(pixels, cfg, crate::data::derive_seed(seed, &[1]))?,
    ))
}
