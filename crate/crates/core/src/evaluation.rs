//! Linear-probe evaluation of frozen representations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{rng_for, PreparedDataset};
use crate::encoders::{EncoderCheckpoint, EncoderConfig};
use crate::error::{Result, WspError};
use crate::exec;
use crate::losses::LossKind;
use crate::tensor::Tensor;
use crate::trainer::{initial_encoder, pretrain, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub l2_strength: f64,
    pub max_iterations: usize,
    /// Stop once the objective gradient's max-norm drops below this.
    pub tolerance: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2_strength: 1.0,
            max_iterations: 100,
            tolerance: 1e-8,
            folds: 5,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(WspError::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if !(self.l2_strength >= 0.0 && self.l2_strength.is_finite()) {
            return Err(WspError::Config(format!("l2_strength must be >= 0, got {}", self.l2_strength)));
        }
        if self.max_iterations == 0 || !(self.tolerance > 0.0) {
            return Err(WspError::Config("max_iterations and tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprRow {
    pub patient_id: String,
    /// Position of the patient in the source dataset.
    pub patient: usize,
    pub slice_id: u64,
    pub d: f64,
    pub y_weak: u8,
    pub y_strong: Option<u8>,
}

/// Per-slice features with their provenance, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprTable {
    pub rows: Vec<ReprRow>,
    pub features: Tensor,
}

impl ReprTable {
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != self.rows.len() {
            return Err(WspError::Dimension(format!(
                "{:?} features for {} rows",
                features.shape(),
                self.rows.len()
            )));
        }
        Ok(ReprTable {
            rows: self.rows.clone(),
            features,
        })
    }
}

const EXTRACT_CHUNK: usize = 64;

/// Frozen representations of every retained slice, no augmentation.
pub fn extract_representations(ckpt: &EncoderCheckpoint, ds: &PreparedDataset) -> Result<ReprTable> {
    let cfg = ckpt.encoder.config();
    if cfg.input_shape != [1, ds.height, ds.width] {
        return Err(WspError::Dimension(format!(
            "checkpoint expects {:?}, dataset slices are {}x{}",
            cfg.input_shape, ds.height, ds.width
        )));
    }
    let mut rows = Vec::with_capacity(ds.slice_count());
    let mut pixels = Vec::with_capacity(ds.slice_count());
    for (k, p) in ds.patients.iter().enumerate() {
        for s in &p.slices {
            rows.push(ReprRow {
                patient_id: p.patient_id.clone(),
                patient: k,
                slice_id: s.slice_id,
                d: s.d,
                y_weak: p.y_weak,
                y_strong: p.y_strong,
            });
            pixels.push(s.pixels.clone());
        }
    }
    if rows.is_empty() {
        return Err(WspError::Contract("dataset has no slices".into()));
    }
    let chunks = exec::map_indexed(rows.len().div_ceil(EXTRACT_CHUNK), |c| {
        let part = &pixels[c * EXTRACT_CHUNK..((c + 1) * EXTRACT_CHUNK).min(pixels.len())];
        let data: Vec<f64> = part.iter().flat_map(|p| p.iter().copied()).collect();
        let x = Tensor::new(vec![part.len(), 1, ds.height, ds.width], data)?;
        ckpt.encoder.encode(&x)
    });
    let dim = cfg.repr_dim;
    let mut data = Vec::with_capacity(rows.len() * dim);
    for c in chunks {
        data.extend_from_slice(c?.data());
    }
    Ok(ReprTable {
        features: Tensor::new(vec![rows.len(), dim], data)?,
        rows,
    })
}

/// Logistic model on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Objective value after each accepted iteration, starting at the origin.
    pub objective_trace: Vec<f64>,
    pub gradient_norm: f64,
}

impl LogisticModel {
    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.rank() != 2 || x.shape()[1] != self.weights.len() {
            return Err(WspError::Dimension(format!(
                "features {:?} vs {} weights",
                x.shape(),
                self.weights.len()
            )));
        }
        Ok((0..x.shape()[0])
            .map(|i| {
                let z: f64 = x
                    .row(i)
                    .iter()
                    .zip(&self.weights)
                    .enumerate()
                    .map(|(j, (v, w))| (v - self.mean[j]) / self.scale[j] * w)
                    .sum();
                sigmoid(z + self.bias)
            })
            .collect())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean cross-entropy plus `(λ/n)·‖w‖²/2` and its gradient in `[w, b]` order.
fn objective(xa: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>, lambda: f64) -> (f64, DVector<f64>, DVector<f64>) {
    let n = xa.nrows() as f64;
    let d = theta.len() - 1;
    let z = xa * theta;
    let mut loss = 0.0;
    let mut resid = DVector::zeros(z.len());
    for i in 0..z.len() {
        // y·(−log σ(z)) + (1−y)·(−log(1−σ(z)))
        loss += softplus(z[i]) - y[i] * z[i];
        resid[i] = sigmoid(z[i]) - y[i];
    }
    let w = theta.rows(0, d);
    let mut grad = xa.tr_mul(&resid) / n;
    for j in 0..d {
        grad[j] += lambda / n * theta[j];
    }
    (loss / n + lambda / n * w.norm_squared() / 2.0, grad, z)
}

/// Regularized logistic regression by damped Newton iterations.
///
/// Features are standardized first (zero mean, unit variance per column);
/// the penalty acts on the standardized weights, the bias is unpenalized.
pub fn fit_logistic_probe(x: &Tensor, y: &[u8], cfg: &ProbeConfig) -> Result<LogisticModel> {
    cfg.validate()?;
    if x.rank() != 2 || x.shape()[0] != y.len() {
        return Err(WspError::Dimension(format!("features {:?} vs {} labels", x.shape(), y.len())));
    }
    if !(y.contains(&0) && y.contains(&1)) || y.iter().any(|&v| v > 1) {
        return Err(WspError::Contract("logistic probe needs both classes with labels in {0,1}".into()));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for i in 0..n {
        for (j, v) in x.row(i).iter().enumerate() {
            mean[j] += v / n as f64;
        }
    }
    for i in 0..n {
        for (j, v) in x.row(i).iter().enumerate() {
            scale[j] += (v - mean[j]).powi(2) / n as f64;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let xa = DMatrix::from_fn(n, d + 1, |i, j| if j == d { 1.0 } else { (x.at2(i, j) - mean[j]) / scale[j] });
    let yv = DVector::from_iterator(n, y.iter().map(|&v| v as f64));
    let lambda = cfg.l2_strength;

    let mut theta = DVector::zeros(d + 1);
    let (mut f, mut g, mut z) = objective(&xa, &yv, &theta, lambda);
    let mut trace = vec![f];
    for _ in 0..cfg.max_iterations {
        if g.amax() < cfg.tolerance {
            break;
        }
        // Hessian XᵀSX/n + (λ/n)·I on the weight block
        let mut xs = xa.clone();
        for i in 0..n {
            let p = sigmoid(z[i]);
            xs.row_mut(i).scale_mut((p * (1.0 - p)).sqrt());
        }
        let mut h = xs.tr_mul(&xs) / n as f64;
        for j in 0..d {
            h[(j, j)] += lambda / n as f64;
        }
        // a tiny ridge keeps the solve defined when λ = 0 on separable data
        for j in 0..=d {
            h[(j, j)] += 1e-12;
        }
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => h
                .lu()
                .solve(&g)
                .ok_or_else(|| WspError::Degenerate("singular probe Hessian".into()))?,
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &theta - &step * t;
            let (fc, gc, zc) = objective(&xa, &yv, &cand, lambda);
            if fc <= f {
                theta = cand;
                f = fc;
                g = gc;
                z = zc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(f);
    }
    if !theta.iter().all(|v| v.is_finite()) {
        return Err(WspError::NonFinite {
            step: trace.len(),
            location: "logistic probe".into(),
            detail: "non-finite weights".into(),
        });
    }
    Ok(LogisticModel {
        weights: theta.rows(0, d).iter().copied().collect(),
        bias: theta[d],
        mean,
        scale,
        objective_trace: trace,
        gradient_norm: g.amax(),
    })
}

/// Mean probability per patient, keyed by patient id.
pub fn aggregate_patient<K: Ord + Clone>(probs: &[f64], patients: &[K]) -> Result<BTreeMap<K, f64>> {
    if probs.len() != patients.len() {
        return Err(WspError::Dimension(format!("{} probabilities vs {} ids", probs.len(), patients.len())));
    }
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for (p, k) in probs.iter().zip(patients) {
        let e = acc.entry(k.clone()).or_default();
        e.0 += p;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect())
}

fn both_classes(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(WspError::Contract(format!("need both classes, got {pos} positive and {neg} negative")));
    }
    Ok((pos, neg))
}

/// Mann–Whitney statistic with midranks: `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(WspError::Dimension(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = both_classes(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(WspError::Domain("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `(sensitivity + specificity) / 2`.
pub fn balanced_accuracy(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(WspError::Dimension(format!("{} predictions vs {} labels", predictions.len(), labels.len())));
    }
    let (pos, neg) = both_classes(labels)?;
    let tp = predictions.iter().zip(labels).filter(|(&p, &l)| p && l).count();
    let tn = predictions.iter().zip(labels).filter(|(&p, &l)| !p && !l).count();
    Ok((tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0)
}

/// Fold index per patient, stratified by label.
///
/// Each class is shuffled and dealt round-robin; the dealing position carries
/// over between classes so fold sizes also differ by at most one.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(WspError::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut classes: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        classes.entry(y).or_default().push(i);
    }
    if let Some((y, members)) = classes.iter().find(|(_, m)| m.len() < k) {
        return Err(WspError::Contract(format!(
            "class {y} has {} patients, fewer than {k} folds",
            members.len()
        )));
    }
    let mut rng = rng_for(seed, &[]);
    let mut folds = vec![0; labels.len()];
    let mut offset = 0;
    for members in classes.values_mut() {
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            folds[i] = (offset + j) % k;
        }
        offset += members.len();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `n × modes`.
    pub coords: Tensor,
    /// Unit-norm principal axes, one per mode.
    pub components: Vec<Vec<f64>>,
    /// Fraction of total variance per mode.
    pub explained: Vec<f64>,
}

/// Projection of centered rows onto the leading covariance eigenvectors.
pub fn pca_project(x: &Tensor, modes: usize) -> Result<Pca> {
    if x.rank() != 2 {
        return Err(WspError::Dimension(format!("PCA needs a matrix, got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n < 3 {
        return Err(WspError::Contract(format!("PCA needs at least 3 rows, got {n}")));
    }
    if modes == 0 || modes > d {
        return Err(WspError::Config(format!("{modes} modes for {d} dimensions")));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.tr_mul(&centered) / (n - 1) as f64;
    let total: f64 = cov.trace();
    let max_abs = centered.amax();
    if !(total > 0.0) || total <= 1e-24 * (1.0 + max_abs * max_abs) {
        return Err(WspError::Degenerate("data has zero variance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(modes);
    let mut explained = Vec::with_capacity(modes);
    for &k in idx.iter().take(modes) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let lead = v.iter().copied().fold(0.0f64, |acc, a| if a.abs() > acc.abs() { a } else { acc });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        v.iter_mut().for_each(|a| *a *= sign / norm);
        components.push(v);
        explained.push(eig.eigenvalues[k].max(0.0) / total);
    }
    let coords = Tensor::from_fn(&[n, modes], |e| {
        let (i, c) = (e / modes, e % modes);
        centered.row(i).iter().zip(&components[c]).map(|(a, b)| a * b).sum()
    });
    Ok(Pca {
        coords,
        components,
        explained,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auc_patient: f64,
    pub auc_slice: f64,
    pub bacc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub method: String,
    pub sigma: Option<f64>,
    pub folds: Vec<FoldMetrics>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_bacc: f64,
    pub std_bacc: f64,
    /// Out-of-fold aggregated probability per patient id.
    pub patient_probabilities: BTreeMap<String, f64>,
    pub config: ProbeConfig,
}

/// Sample mean and standard deviation (`n − 1`).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn select_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = x.shape()[1];
    let data = rows.iter().flat_map(|&r| x.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data)
}

/// Stratified cross-validated probe with patient-level aggregation.
pub fn run_probe_protocol(table: &ReprTable, method: &str, sigma: Option<f64>, cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    if table.features.rank() != 2 || table.features.shape()[0] != table.rows.len() {
        return Err(WspError::Dimension("representation table rows and features disagree".into()));
    }
    // patients in order of first appearance
    let mut patient_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut patient_labels = Vec::new();
    let mut slice_patient = Vec::with_capacity(table.rows.len());
    for r in &table.rows {
        let y = r
            .y_strong
            .ok_or_else(|| WspError::Contract(format!("patient {} has no strong label", r.patient_id)))?;
        let next = patient_labels.len();
        let k = *patient_index.entry(r.patient_id.as_str()).or_insert(next);
        if k == next {
            patient_labels.push(y);
        }
        slice_patient.push(k);
    }
    let folds = stratified_kfold(&patient_labels, cfg.folds, cfg.seed)?;
    let results = exec::map_indexed(cfg.folds, |f| -> Result<(FoldMetrics, Vec<(usize, f64)>)> {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..table.rows.len()).partition(|&i| folds[slice_patient[i]] != f);
        let y_train: Vec<u8> = train.iter().map(|&i| patient_labels[slice_patient[i]]).collect();
        let model = fit_logistic_probe(&select_rows(&table.features, &train)?, &y_train, cfg)?;
        let probs = model.predict_proba(&select_rows(&table.features, &test)?)?;
        let slice_labels: Vec<bool> = test.iter().map(|&i| patient_labels[slice_patient[i]] == 1).collect();
        let test_patients: Vec<usize> = test.iter().map(|&i| slice_patient[i]).collect();
        let agg = aggregate_patient(&probs, &test_patients)?;
        let scores: Vec<f64> = agg.values().copied().collect();
        let labels: Vec<bool> = agg.keys().map(|&k| patient_labels[k] == 1).collect();
        let predictions: Vec<bool> = scores.iter().map(|&p| p >= 0.5).collect();
        Ok((
            FoldMetrics {
                fold: f,
                auc_patient: auc(&scores, &labels)?,
                auc_slice: auc(&probs, &slice_labels)?,
                bacc: balanced_accuracy(&predictions, &labels)?,
            },
            agg.into_iter().collect(),
        ))
    });
    let mut fold_metrics = Vec::with_capacity(cfg.folds);
    let mut by_index = BTreeMap::new();
    for r in results {
        let (m, probs) = r?;
        fold_metrics.push(m);
        by_index.extend(probs);
    }
    let names: BTreeMap<usize, &str> = patient_index.iter().map(|(&n, &k)| (k, n)).collect();
    let aucs: Vec<f64> = fold_metrics.iter().map(|m| m.auc_patient).collect();
    let baccs: Vec<f64> = fold_metrics.iter().map(|m| m.bacc).collect();
    let (mean_auc, std_auc) = mean_std(&aucs);
    let (mean_bacc, std_bacc) = mean_std(&baccs);
    Ok(ProbeReport {
        method: method.to_string(),
        sigma,
        folds: fold_metrics,
        mean_auc,
        std_auc,
        mean_bacc,
        std_bacc,
        patient_probabilities: by_index.into_iter().map(|(k, p)| (names[&k].to_string(), p)).collect(),
        config: *cfg,
    })
}

/// Pretraining method under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Untrained encoder with the same initialization seed.
    Random,
    Pretrained(LossKind),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Pretrained(k) => k.name(),
        }
    }
}

pub fn random_checkpoint(ds: &PreparedDataset, enc_cfg: &EncoderConfig) -> Result<EncoderCheckpoint> {
    Ok(EncoderCheckpoint::untrained(initial_encoder(ds, enc_cfg)?))
}

/// The checkpoint `method` produces under the given configs.
pub fn checkpoint_for(
    method: Method,
    ds: &PreparedDataset,
    enc_cfg: &EncoderConfig,
    optim: &OptimConfig,
) -> Result<EncoderCheckpoint> {
    match method {
        Method::Random => random_checkpoint(ds, enc_cfg),
        Method::Pretrained(kind) => {
            let cfg = OptimConfig {
                loss: optim.loss.with_kind(kind),
                ..optim.clone()
            };
            Ok(pretrain(ds, enc_cfg, &cfg)?.checkpoint)
        }
    }
}

/// Pretrain (or not) and probe.
pub fn evaluate_method(
    method: Method,
    ds: &PreparedDataset,
    enc_cfg: &EncoderConfig,
    optim: &OptimConfig,
    probe: &ProbeConfig,
) -> Result<ProbeReport> {
    let ckpt = checkpoint_for(method, ds, enc_cfg, optim)?;
    let table = extract_representations(&ckpt, ds)?;
    let sigma = match method {
        Method::Pretrained(k) if k.uses_sigma() => Some(optim.loss.sigma),
        _ => None,
    };
    run_probe_protocol(&table, method.name(), sigma, probe)
}

pub const DEFAULT_SWEEP_SIGMAS: [f64; 5] = [0.01, 0.1, 0.2, 0.3, 0.5];

/// WSP pretraining and probing at each bandwidth, sharing all seeds.
pub fn sigma_sweep(
    ds: &PreparedDataset,
    enc_cfg: &EncoderConfig,
    optim: &OptimConfig,
    sigmas: &[f64],
    probe: &ProbeConfig,
) -> Result<Vec<ProbeReport>> {
    if sigmas.is_empty() {
        return Err(WspError::Config("empty sigma list".into()));
    }
    exec::map_indexed(sigmas.len(), |i| {
        let mut cfg = optim.clone();
        cfg.loss.sigma = sigmas[i];
        evaluate_method(Method::Pretrained(LossKind::Wsp), ds, enc_cfg, &cfg, probe)
    })
    .into_iter()
    .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| WspError::io(path, e))
}

pub fn metrics_csv(reports: &[ProbeReport]) -> String {
    let mut out = String::from("method,sigma,fold,auc_patient,auc_slice,bacc\n");
    for r in reports {
        let sigma = r.sigma.map(|s| s.to_string()).unwrap_or_default();
        for f in &r.folds {
            let _ = writeln!(out, "{},{sigma},{},{},{},{}", r.method, f.fold, f.auc_patient, f.auc_slice, f.bacc);
        }
    }
    out
}

pub fn write_metrics_csv(path: &Path, reports: &[ProbeReport]) -> Result<()> {
    write_text(path, &metrics_csv(reports))
}

fn label_field(y: Option<u8>) -> String {
    y.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_embeddings_csv(path: &Path, table: &ReprTable) -> Result<()> {
    let dim = table.features.shape()[1];
    let mut out = String::from("patient_id,slice_id,d,y_weak,y_strong");
    for j in 0..dim {
        let _ = write!(out, ",r{j}");
    }
    out.push('\n');
    for (i, r) in table.rows.iter().enumerate() {
        let _ = write!(out, "{},{},{},{},{}", r.patient_id, r.slice_id, r.d, r.y_weak, label_field(r.y_strong));
        for v in table.features.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn pca_csv(table: &ReprTable, pca: &Pca) -> String {
    let fractions: Vec<String> = pca.explained.iter().map(|v| v.to_string()).collect();
    let mut out = format!("# explained_variance={}\npatient_id,slice_id,d,y_strong,pc1,pc2\n", fractions.join(";"));
    for (i, r) in table.rows.iter().enumerate() {
        let c = pca.coords.row(i);
        let pc2 = c.get(1).copied().unwrap_or(0.0);
        let _ = writeln!(out, "{},{},{},{},{},{pc2}", r.patient_id, r.slice_id, r.d, label_field(r.y_strong), c[0]);
    }
    out
}

pub fn write_pca_csv(path: &Path, table: &ReprTable, pca: &Pca) -> Result<()> {
    write_text(path, &pca_csv(table, pca))
}

/// Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
        let mut rng = rng_for(5, &[]);
        let scores: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
        let labels: Vec<bool> = (0..1000).map(|_| rng.gen()).collect();
        assert!((auc(&scores, &labels).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn auc_matches_pairwise_count_with_ties() {
        let mut rng = rng_for(9, &[]);
        for trial in 0..50 {
            let n = 2 + trial * 4;
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..7) as f64) / 7.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            labels[0] = true;
            labels[1] = false;
            assert!((auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[true, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[true; 4], &[true, true, false, false]).unwrap(), 0.5);
        let labels = [true, true, true, true, false, false];
        let preds = [true, true, true, false, true, false];
        assert_eq!(balanced_accuracy(&preds, &labels).unwrap(), 0.625);
        assert!(balanced_accuracy(&[true], &[false]).is_err());
    }

    #[test]
    fn aggregation() {
        let agg = aggregate_patient(&[0.2, 0.9, 0.4], &["a", "b", "a"]).unwrap();
        assert!((agg["a"] - 0.3).abs() < 1e-15);
        assert_eq!(agg["b"], 0.9);
        let swapped = aggregate_patient(&[0.4, 0.9, 0.2], &["a", "b", "a"]).unwrap();
        assert_eq!(agg, swapped);
    }

    #[test]
    fn fold_examples() {
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let folds = stratified_kfold(&labels, 5, 1).unwrap();
        for f in 0..5 {
            for c in 0..2u8 {
                let count = (0..20).filter(|&i| folds[i] == f && labels[i] == c).count();
                assert_eq!(count, 2);
            }
        }
        let labels: Vec<u8> = (0..21).map(|i| u8::from(i < 11)).collect();
        let folds = stratified_kfold(&labels, 5, 3).unwrap();
        for f in 0..5 {
            let pos = (0..21).filter(|&i| folds[i] == f && labels[i] == 1).count();
            assert!(pos == 2 || pos == 3);
        }
        assert_eq!(folds, stratified_kfold(&labels, 5, 3).unwrap());
        let err = stratified_kfold(&[0, 0, 0, 0, 0, 1, 1, 1], 5, 0).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }

    #[test]
    fn logistic_separable_pair_and_optimality() {
        let x = Tensor::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        let model = fit_logistic_probe(&x, &[0, 1], &ProbeConfig::default()).unwrap();
        let p = model.predict_proba(&x).unwrap();
        assert!(p[0] < 0.5 && p[1] > 0.5);
        assert!(model.gradient_norm < 1e-8);
        assert!(model.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(fit_logistic_probe(&x, &[1, 1], &ProbeConfig::default()).is_err());
    }

    #[test]
    fn heavy_penalty_predicts_the_prior() {
        let mut rng = rng_for(2, &[]);
        let x = Tensor::from_fn(&[40, 3], |_| rng.gen_range(-1.0..1.0));
        let y: Vec<u8> = (0..40).map(|i| u8::from(i % 4 == 0)).collect();
        let cfg = ProbeConfig {
            l2_strength: 1e6,
            ..ProbeConfig::default()
        };
        let model = fit_logistic_probe(&x, &y, &cfg).unwrap();
        let wn = model.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(wn < 1e-3, "{wn}");
        for p in model.predict_proba(&x).unwrap() {
            assert!((p - 0.25).abs() < 1e-3);
        }
    }

    #[test]
    fn pca_examples() {
        let line = Tensor::from_fn(&[20, 3], |e| {
            let t = (e / 3) as f64;
            [1.0, -2.0, 0.5][e % 3] * t + 3.0
        });
        let p = pca_project(&line, 2).unwrap();
        assert!(p.explained[0] >= 1.0 - 1e-9);
        let norm: f64 = p.components[0].iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        // leading coordinate of each axis is positive
        assert!(p.components[0][1] > 0.0);
        // mean row projects to the origin
        let mean_coord: f64 = (0..20).map(|i| p.coords.at2(i, 0)).sum::<f64>() / 20.0;
        assert!(mean_coord.abs() < 1e-9);

        let mut rng = rng_for(4, &[]);
        let iso = Tensor::from_fn(&[10_000, 2], |_| StandardNormal.sample(&mut rng));
        let p = pca_project(&iso, 2).unwrap();
        assert!((p.explained[0] - 0.5).abs() < 0.03 && (p.explained[1] - 0.5).abs() < 0.03);

        assert!(matches!(pca_project(&Tensor::zeros(&[5, 2]), 2), Err(WspError::Degenerate(_))));
        assert!(pca_project(&Tensor::zeros(&[2, 2]), 1).is_err());
    }

    #[test]
    fn pca_row_permutation_invariance() {
        let mut rng = rng_for(8, &[]);
        let x = Tensor::from_fn(&[30, 4], |e| rng.gen_range(-1.0..1.0) * (1 + e % 4) as f64);
        let a = pca_project(&x, 2).unwrap();
        let perm: Vec<usize> = (0..30).rev().collect();
        let b = pca_project(&select_rows(&x, &perm).unwrap(), 2).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..2 {
                assert!((b.coords.at2(i, c) - a.coords.at2(p, c)).abs() < 1e-9);
            }
        }
    }

    fn table(n_patients: usize, slices: usize, feature: impl Fn(usize, u8) -> Vec<f64>) -> ReprTable {
        let mut rows = Vec::new();
        let mut data = Vec::new();
        let mut dim = 0;
        for p in 0..n_patients {
            let y = (p % 2) as u8;
            for s in 0..slices {
                rows.push(ReprRow {
                    patient_id: format!("pat{p:04}"),
                    patient: p,
                    slice_id: (p * slices + s) as u64,
                    d: s as f64 / slices as f64,
                    y_weak: y,
                    y_strong: Some(y),
                });
                let f = feature(p * slices + s, y);
                dim = f.len();
                data.extend(f);
            }
        }
        let n = rows.len();
        ReprTable {
            rows,
            features: Tensor::new(vec![n, dim], data).unwrap(),
        }
    }

    #[test]
    fn planted_signal_gives_perfect_folds() {
        let t = table(20, 3, |i, y| vec![y as f64, ((i * 7) % 5) as f64]);
        let r = run_probe_protocol(&t, "planted", None, &ProbeConfig::default()).unwrap();
        assert_eq!(r.folds.len(), 5);
        assert!(r.folds.iter().all(|f| f.auc_patient == 1.0 && f.bacc == 1.0));
        assert_eq!(r.std_auc, 0.0);
        assert_eq!(r.patient_probabilities.len(), 20);
        let csv = metrics_csv(&[r]);
        assert!(csv.starts_with("method,sigma,fold,auc_patient,auc_slice,bacc\nplanted,,0,1,1,1\n"));
    }

    #[test]
    fn noise_features_give_chance_auc() {
        let mut means = Vec::new();
        for seed in 0..5 {
            let mut rng = rng_for(seed, &[]);
            let noise: Vec<Vec<f64>> = (0..40 * 4).map(|_| (0..4).map(|_| rng.gen()).collect()).collect();
            let t = table(40, 4, |i, _| noise[i].clone());
            let cfg = ProbeConfig {
                seed,
                ..ProbeConfig::default()
            };
            means.push(run_probe_protocol(&t, "noise", None, &cfg).unwrap().mean_auc);
        }
        let m = means.iter().sum::<f64>() / 5.0;
        assert!((0.35..=0.65).contains(&m), "{means:?}");
    }
}
