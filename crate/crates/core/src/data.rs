//! Volumetric dataset model, preprocessing, the synthetic phantom generator
//! and the on-disk format.
//!
//! On disk a dataset is a directory holding `manifest.json` plus one binary
//! volume file per record:
//!
//! ```text
//! "WSPV" | u16 version=1 | u32 H | u32 W | u32 n_slices | u32 V_max
//! per slice: u32 p | H·W × f32 (little-endian, row-major)
//! ```

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::ByteReader;
use crate::error::{Result, WspError};
use crate::exec;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const VOLUME_MAGIC: &[u8; 4] = b"WSPV";
const VOLUME_VERSION: u16 = 1;

pub const CLIP_LO: f64 = -100.0;
pub const CLIP_HI: f64 = 400.0;
pub const CENTRAL_FRACTION: f64 = 0.7;

/// `d = p / V_max`.
pub fn normalize_depth(p: i64, v_max: i64) -> Result<f64> {
    if v_max <= 0 {
        return Err(WspError::Domain(format!("V_max must be > 0, got {v_max}")));
    }
    if p < 0 || p > v_max {
        return Err(WspError::Domain(format!("depth {p} outside [0, {v_max}]")));
    }
    Ok(p as f64 / v_max as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    /// Integer depth coordinate.
    pub p: u32,
    /// Normalized depth `p / V_max`.
    pub d: f64,
    /// Raw intensities, row-major `H·W`.
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub volume_id: String,
    pub patient_id: String,
    pub v_max: u32,
    pub height: usize,
    pub width: usize,
    /// Ordered by strictly increasing `p`.
    pub slices: Vec<Slice>,
    pub y_weak: u8,
    pub y_strong: Option<u8>,
    /// Generator-internal severity, kept for audit.
    pub latent_severity: Option<f64>,
}

impl Volume {
    pub fn validate(&self) -> Result<()> {
        if self.v_max == 0 {
            return Err(WspError::Contract(format!("volume {}: V_max is 0", self.volume_id)));
        }
        let mut prev: Option<u32> = None;
        for s in &self.slices {
            if s.p > self.v_max || prev.is_some_and(|q| s.p <= q) {
                return Err(WspError::Contract(format!(
                    "volume {}: slice depths must increase strictly within [0, {}]",
                    self.volume_id, self.v_max
                )));
            }
            if s.pixels.len() != self.height * self.width {
                return Err(WspError::Contract(format!(
                    "volume {}: slice at p={} has {} pixels, expected {}",
                    self.volume_id,
                    s.p,
                    s.pixels.len(),
                    self.height * self.width
                )));
            }
            prev = Some(s.p);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(22 + self.slices.len() * (4 + 4 * self.height * self.width));
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        for v in [self.height as u32, self.width as u32, self.slices.len() as u32, self.v_max] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.slices {
            out.extend_from_slice(&s.p.to_le_bytes());
            for px in &s.pixels {
                out.extend_from_slice(&px.to_le_bytes());
            }
        }
        out
    }

    /// Parse a volume file. Labels and ids come from the manifest record.
    pub fn from_bytes(bytes: &[u8], record: &VolumeRecord) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != VOLUME_MAGIC {
            return Err(WspError::format(0, "bad volume magic"));
        }
        let version = r.u16()?;
        if version != VOLUME_VERSION {
            return Err(WspError::format(4, format!("unsupported volume version {version}")));
        }
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let n = r.u32()? as usize;
        let v_max = r.u32()?;
        if v_max == 0 {
            return Err(WspError::format(18, "V_max is 0"));
        }
        if v_max != record.v_max {
            return Err(WspError::format(
                18,
                format!("V_max {v_max} disagrees with manifest value {}", record.v_max),
            ));
        }
        let per_slice = 4 + 4 * height * width;
        if r.remaining() != n * per_slice {
            return Err(WspError::format(
                r.pos as u64,
                format!("expected {} bytes of slice data, found {}", n * per_slice, r.remaining()),
            ));
        }
        let mut slices = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.pos as u64;
            let p = r.u32()?;
            let d = normalize_depth(p as i64, v_max as i64).map_err(|e| WspError::format(at, e.to_string()))?;
            let pixels = (0..height * width).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            slices.push(Slice { p, d, pixels });
        }
        let v = Volume {
            volume_id: record.id.clone(),
            patient_id: record.patient_id.clone(),
            v_max,
            height,
            width,
            slices,
            y_weak: record.y_weak,
            y_strong: record.y_strong,
            latent_severity: record.latent_severity,
        };
        v.validate().map_err(|e| WspError::format(22, e.to_string()))?;
        Ok(v)
    }
}

/// Keep `round(fraction·n)` (at least one) slices from the middle of the
/// stack: `floor((n−k)/2)` are dropped from the start, the rest from the end.
pub fn central_window(n: usize, fraction: f64) -> Result<std::ops::Range<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(WspError::Contract(format!("central fraction must be in (0,1], got {fraction}")));
    }
    if n == 0 {
        return Err(WspError::Contract("empty volume".into()));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let start = (n - k) / 2;
    Ok(start..start + k)
}

pub fn select_central_slices(v: &Volume, fraction: f64) -> Result<Volume> {
    let window = central_window(v.slices.len(), fraction)?;
    Ok(Volume {
        slices: v.slices[window].to_vec(),
        ..v.clone()
    })
}

/// Clamp to `[lo, hi]`, then map affinely onto `[0, 1]`.
pub fn clip_intensity(pixels: &[f32], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if lo >= hi {
        return Err(WspError::Contract(format!("clip range [{lo}, {hi}] is empty")));
    }
    Ok(pixels
        .iter()
        .map(|&v| ((v as f64).clamp(lo, hi) - lo) / (hi - lo))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_volumes: usize,
    pub slices_per_volume: usize,
    pub height: usize,
    pub width: usize,
    /// Probability mass of each severity bin; also fixes the number of
    /// weak classes.
    pub class_priors: Vec<f64>,
    /// Weak-label flip rate ρ; the strong label flips at ρ/2.
    pub label_noise: f64,
    /// Relative contour irregularity per true severity bin.
    pub irregularity: Vec<f64>,
    /// Change of organ radius per unit depth, relative to half the image.
    pub depth_gain: f64,
    /// Gaussian pixel noise, in raw intensity units.
    pub pixel_noise: f64,
    /// Half-width of the per-patient organ intensity offset.
    pub intensity_jitter: f64,
    /// Per-patient noise std is `pixel_noise * (1 ± noise_jitter)`.
    pub noise_jitter: f64,
    /// Amplitude of a per-patient striped texture inside the organ.
    pub texture: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_volumes: 60,
            slices_per_volume: 24,
            height: 32,
            width: 32,
            class_priors: vec![0.25; 4],
            label_noise: 0.1,
            irregularity: vec![0.0, 0.16, 0.32, 0.48],
            depth_gain: 0.5,
            pixel_noise: 20.0,
            intensity_jitter: 80.0,
            noise_jitter: 0.8,
            texture: 80.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WspError::Config(m));
        if self.n_volumes == 0 || self.slices_per_volume == 0 {
            return bad("need at least one volume and one slice".into());
        }
        if self.height < 4 || self.width < 4 {
            return bad(format!("image {}x{} too small", self.height, self.width));
        }
        let total: f64 = self.class_priors.iter().sum();
        if self.class_priors.is_empty() || self.class_priors.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("class priors {:?} must be non-negative and sum to 1", self.class_priors));
        }
        if self.irregularity.len() != self.class_priors.len() || self.irregularity.iter().any(|&a| !(0.0..1.0).contains(&a)) {
            return bad(format!(
                "need one irregularity in [0,1) per class, got {:?}",
                self.irregularity
            ));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad(format!("label noise {} outside [0,1]", self.label_noise));
        }
        if !(0.0..1.0).contains(&self.depth_gain) || self.pixel_noise < 0.0 {
            return bad("depth gain must be in [0,1) and pixel noise >= 0".into());
        }
        if self.intensity_jitter < 0.0 || !(0.0..1.0).contains(&self.noise_jitter) || self.texture < 0.0 {
            return bad("nuisance amplitudes must be >= 0 and noise jitter below 1".into());
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.class_priors.len()
    }

    /// Severity bin of `u ∈ [0,1]` under the cumulative priors.
    pub fn severity_bin(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, p) in self.class_priors.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.class_priors.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEcho {
    #[serde(flatten)]
    pub config: GeneratorConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeRecord {
    pub id: String,
    pub file: String,
    pub patient_id: String,
    pub v_max: u32,
    pub y_weak: u8,
    pub y_strong: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_severity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub volumes: Vec<VolumeRecord>,
    pub generator: Option<GeneratorEcho>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub volumes: Vec<Volume>,
}

/// Independent per-item stream derived from a base seed.
pub(crate) fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

pub(crate) fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

// Raw intensities of the phantom, before clipping to [CLIP_LO, CLIP_HI].
const BACKGROUND_HU: f64 = -20.0;
const ORGAN_HU: f64 = 180.0;

struct Phantom {
    y_true: usize,
    severity: f64,
    scale: f64,
    center_jitter: (f64, f64),
    organ_hu: f64,
    phases: [f64; 2],
    noise_std: f64,
    // stripe frequency (rad/px), orientation and phase
    stripes: (f64, f64, f64),
}

fn render_slice(cfg: &GeneratorConfig, ph: &Phantom, d: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let half = h.min(w) / 2.0;
    let rx = half * ph.scale * (0.45 + cfg.depth_gain * (d - 0.5));
    let ry = 0.8 * rx;
    let cx = w / 2.0 + ph.center_jitter.0 + 0.12 * w * (d - 0.5);
    let cy = h / 2.0 + ph.center_jitter.1;
    let amp = cfg.irregularity[ph.y_true];
    // lobes drift slowly with depth so neighbouring slices look alike
    let (p1, p2) = (ph.phases[0] + 2.0 * d, ph.phases[1] - 3.0 * d);
    let noise = Normal::new(0.0, ph.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let (freq, angle, phase) = ph.stripes;
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut out = Vec::with_capacity(cfg.height * cfg.width);
    for i in 0..cfg.height {
        for j in 0..cfg.width {
            let (dx, dy) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
            let theta = dy.atan2(dx);
            let ellipse = 1.0 / ((theta.cos() / rx).powi(2) + (theta.sin() / ry).powi(2)).sqrt();
            let bumps = 0.6 * (7.0 * theta + p1).sin() + 0.4 * (11.0 * theta + p2).sin();
            let boundary = ellipse * (1.0 + amp * bumps);
            let rho = (dx * dx + dy * dy).sqrt();
            let inside = 1.0 / (1.0 + (-(boundary - rho) / 0.35).exp());
            let stripe = cfg.texture * (freq * (dx * ca + dy * sa) + phase).sin();
            let mut v = BACKGROUND_HU + (ph.organ_hu - BACKGROUND_HU + stripe) * inside;
            if ph.noise_std > 0.0 {
                v += noise.sample(rng);
            }
            out.push(v as f32);
        }
    }
    out
}

fn generate_volume(cfg: &GeneratorConfig, seed: u64, index: usize) -> (Volume, VolumeRecord) {
    let mut rng = rng_for(seed, &[index as u64]);
    let u: f64 = rng.gen_range(0.0..1.0);
    let y_true = cfg.severity_bin(u);
    let k = cfg.n_classes();
    let mut y_weak = y_true;
    if rng.gen_bool(cfg.label_noise) && k > 1 {
        y_weak = if y_true == 0 {
            1
        } else if y_true == k - 1 || rng.gen_bool(0.5) {
            y_true - 1
        } else {
            y_true + 1
        };
    }
    let mut y_strong = u8::from(u > 0.5);
    if rng.gen_bool(cfg.label_noise / 2.0) {
        y_strong = 1 - y_strong;
    }
    let ph = Phantom {
        y_true,
        severity: u,
        scale: rng.gen_range(0.9..1.1),
        center_jitter: (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
        organ_hu: ORGAN_HU + cfg.intensity_jitter * rng.gen_range(-1.0..1.0),
        phases: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
        noise_std: cfg.pixel_noise * (1.0 + cfg.noise_jitter * rng.gen_range(-1.0..1.0)),
        stripes: (rng.gen_range(0.6..1.6), rng.gen_range(0.0..PI), rng.gen_range(0.0..2.0 * PI)),
    };
    let n = cfg.slices_per_volume;
    let v_max = (n.max(2) - 1) as u32;
    let slices = (0..n as u32)
        .map(|p| {
            let d = normalize_depth(p as i64, v_max as i64).expect("p within V_max");
            Slice {
                p,
                d,
                pixels: render_slice(cfg, &ph, d, &mut rng),
            }
        })
        .collect();
    let id = format!("vol{index:04}");
    let patient_id = format!("pat{index:04}");
    let record = VolumeRecord {
        id: id.clone(),
        file: format!("volumes/{id}.wspv"),
        patient_id: patient_id.clone(),
        v_max,
        y_weak: y_weak as u8,
        y_strong: Some(y_strong),
        latent_severity: Some(ph.severity),
    };
    let volume = Volume {
        volume_id: id,
        patient_id,
        v_max,
        height: cfg.height,
        width: cfg.width,
        slices,
        y_weak: y_weak as u8,
        y_strong: Some(y_strong),
        latent_severity: Some(ph.severity),
    };
    (volume, record)
}

/// Ellipse phantoms whose size tracks depth and whose contour irregularity
/// tracks a latent severity. One volume per patient.
pub fn generate_synthetic_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let (volumes, records): (Vec<_>, Vec<_>) =
        exec::map_indexed(cfg.n_volumes, |i| generate_volume(cfg, seed, i)).into_iter().unzip();
    Ok(Dataset {
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            volumes: records,
            generator: Some(GeneratorEcho {
                config: cfg.clone(),
                seed,
            }),
        },
        volumes,
    })
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    for (rec, vol) in dataset.manifest.volumes.iter().zip(&dataset.volumes) {
        let path = dir.join(&rec.file);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| WspError::io(parent, e))?;
        }
        fs::write(&path, vol.to_bytes()).map_err(|e| WspError::io(&path, e))?;
    }
    let mut json = serde_json::to_string_pretty(&dataset.manifest).map_err(|source| WspError::Json {
        context: "manifest".into(),
        source,
    })?;
    json.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| WspError::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| WspError::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| WspError::Json {
        context: path.display().to_string(),
        source,
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(WspError::format(0, format!("unsupported manifest version {}", manifest.version)));
    }
    let mut seen = HashSet::new();
    for rec in &manifest.volumes {
        if !seen.insert(rec.id.as_str()) {
            return Err(WspError::Contract(format!("duplicate volume id '{}'", rec.id)));
        }
    }
    let volumes = manifest
        .volumes
        .iter()
        .map(|rec| {
            let file: PathBuf = dir.join(&rec.file);
            let bytes = fs::read(&file).map_err(|e| WspError::io(&file, e))?;
            Volume::from_bytes(&bytes, rec).map_err(|e| match e {
                WspError::Format { offset, message } => WspError::Format {
                    offset,
                    message: format!("{}: {message}", file.display()),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, volumes })
}

/// Slice ready for the encoder: clipped, rescaled, tagged.
#[derive(Debug, Clone)]
pub struct PreparedSlice {
    pub slice_id: u64,
    pub p: u32,
    pub d: f64,
    pub pixels: Arc<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Patient {
    pub patient_id: String,
    pub index: u64,
    pub y_weak: u8,
    pub y_strong: Option<u8>,
    pub slices: Vec<PreparedSlice>,
}

/// Central slices of every patient, intensity-normalized.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub height: usize,
    pub width: usize,
    pub patients: Vec<Patient>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    pub central_fraction: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            central_fraction: CENTRAL_FRACTION,
            clip_lo: CLIP_LO,
            clip_hi: CLIP_HI,
        }
    }
}

impl PreparedDataset {
    pub fn new(dataset: &Dataset, cfg: &PrepConfig) -> Result<Self> {
        let first = dataset
            .volumes
            .first()
            .ok_or_else(|| WspError::Contract("dataset has no volumes".into()))?;
        let (height, width) = (first.height, first.width);
        let mut by_patient: BTreeMap<&str, Vec<&Volume>> = BTreeMap::new();
        for v in &dataset.volumes {
            if (v.height, v.width) != (height, width) {
                return Err(WspError::Dimension(format!(
                    "volume {} is {}x{}, expected {height}x{width}",
                    v.volume_id, v.height, v.width
                )));
            }
            by_patient.entry(v.patient_id.as_str()).or_default().push(v);
        }
        let mut next_slice = 0u64;
        let mut patients = Vec::with_capacity(by_patient.len());
        for (index, (pid, vols)) in by_patient.into_iter().enumerate() {
            let mut slices = Vec::new();
            for v in &vols {
                let central = select_central_slices(v, cfg.central_fraction)?;
                for s in central.slices {
                    slices.push(PreparedSlice {
                        slice_id: next_slice,
                        p: s.p,
                        d: s.d,
                        pixels: Arc::new(clip_intensity(&s.pixels, cfg.clip_lo, cfg.clip_hi)?),
                    });
                    next_slice += 1;
                }
            }
            patients.push(Patient {
                patient_id: pid.to_string(),
                index: index as u64,
                y_weak: vols[0].y_weak,
                y_strong: vols[0].y_strong,
                slices,
            });
        }
        Ok(PreparedDataset {
            height,
            width,
            patients,
        })
    }

    pub fn slice_count(&self) -> usize {
        self.patients.iter().map(|p| p.slices.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            n_volumes: 6,
            slices_per_volume: 5,
            height: 8,
            width: 8,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn depth_normalization_examples() {
        assert_eq!(normalize_depth(50, 100).unwrap(), 0.5);
        assert_eq!(normalize_depth(0, 7).unwrap(), 0.0);
        assert_eq!(normalize_depth(7, 7).unwrap(), 1.0);
        assert_eq!(normalize_depth(1, 3).unwrap(), 1.0 / 3.0);
        assert!(matches!(normalize_depth(8, 7), Err(WspError::Domain(_))));
        assert!(normalize_depth(-1, 7).is_err());
        assert!(normalize_depth(0, 0).is_err());
    }

    #[test]
    fn depth_normalization_is_monotone() {
        let v: Vec<f64> = (0..=97).map(|p| normalize_depth(p, 97).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn central_window_examples() {
        assert_eq!(central_window(10, 0.7).unwrap(), 1..8);
        assert_eq!(central_window(10, 1.0).unwrap(), 0..10);
        assert_eq!(central_window(1, 0.7).unwrap(), 0..1);
        assert!(central_window(0, 0.7).is_err());
        assert!(central_window(5, 0.0).is_err());
    }

    #[test]
    fn central_window_count_exhaustive() {
        for n in 1..=100 {
            let w = central_window(n, 0.7).unwrap();
            assert_eq!(w.len(), ((0.7 * n as f64).round() as usize).max(1), "n={n}");
            assert!(w.end <= n);
            // symmetric trim: the start never drops more than the end
            assert!(w.start <= n - w.end && n - w.end - w.start <= 1);
        }
    }

    #[test]
    fn clip_examples() {
        let out = clip_intensity(&[-500.0, 400.0, 150.0, 1000.0], CLIP_LO, CLIP_HI).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.5, 1.0]);
        let inside = clip_intensity(&[-50.0, 0.0, 10.0, 300.0], CLIP_LO, CLIP_HI).unwrap();
        assert!(inside.windows(2).all(|w| w[0] < w[1]));
        assert!(clip_intensity(&[0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic_dataset(&tiny_cfg(), 7).unwrap();
        let b = generate_synthetic_dataset(&tiny_cfg(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&tiny_cfg(), 8).unwrap();
        assert_ne!(a.volumes[0].slices[0].pixels, c.volumes[0].slices[0].pixels);
    }

    #[test]
    fn noise_free_labels_follow_severity_bins() {
        let cfg = GeneratorConfig {
            label_noise: 0.0,
            n_volumes: 40,
            ..tiny_cfg()
        };
        let ds = generate_synthetic_dataset(&cfg, 3).unwrap();
        for v in &ds.volumes {
            let u = v.latent_severity.unwrap();
            assert_eq!(v.y_weak as usize, ((u * 4.0).floor() as usize).min(3));
            assert_eq!(v.y_strong, Some(u8::from(u > 0.5)));
        }
    }

    #[test]
    fn generated_volumes_are_valid() {
        let ds = generate_synthetic_dataset(&tiny_cfg(), 1).unwrap();
        for v in &ds.volumes {
            v.validate().unwrap();
            assert_eq!(v.v_max, 4);
            assert_eq!(v.slices.last().unwrap().d, 1.0);
        }
        assert!(generate_synthetic_dataset(&GeneratorConfig { n_volumes: 0, ..tiny_cfg() }, 1).is_err());
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(&tiny_cfg(), 5).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, ds);
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &loaded).unwrap();
        for rec in &ds.manifest.volumes {
            let a = fs::read(dir.path().join(&rec.file)).unwrap();
            let b = fs::read(dir2.path().join(&rec.file)).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(
            fs::read(dir.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(dir2.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn corrupted_and_missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(&tiny_cfg(), 5).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let target = dir.path().join(&ds.manifest.volumes[1].file);
        let mut bytes = fs::read(&target).unwrap();
        bytes[0] = b'Z';
        fs::write(&target, &bytes).unwrap();
        match load_dataset(dir.path()) {
            Err(WspError::Format { offset: 0, message }) => assert!(message.contains("vol0001")),
            other => panic!("expected format error, got {other:?}"),
        }
        bytes[0] = b'W';
        fs::write(&target, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(WspError::Format { .. })));
        fs::remove_file(&target).unwrap();
        match load_dataset(dir.path()) {
            Err(WspError::Io { path, .. }) => assert!(path.ends_with("vol0001.wspv")),
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn prepared_dataset_keeps_central_slices() {
        let ds = generate_synthetic_dataset(&GeneratorConfig { slices_per_volume: 10, ..tiny_cfg() }, 2).unwrap();
        let prep = PreparedDataset::new(&ds, &PrepConfig::default()).unwrap();
        assert_eq!(prep.patients.len(), 6);
        assert_eq!(prep.slice_count(), 6 * 7);
        let p = &prep.patients[0];
        assert_eq!(p.slices.iter().map(|s| s.p).collect::<Vec<_>>(), (1..8).collect::<Vec<_>>());
        assert!(p.slices[0].pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        let ids: HashSet<u64> = prep.patients.iter().flat_map(|p| p.slices.iter().map(|s| s.slice_id)).collect();
        assert_eq!(ids.len(), prep.slice_count());
    }
}
