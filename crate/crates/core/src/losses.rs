//! Kernel-weighted contrastive losses over a batch of unit-norm latents.
//!
//! All four objectives share one evaluation path: a similarity matrix, a
//! weighted positive set per anchor, and a log-softmax over a denominator
//! set. They differ only in how positives are chosen and weighted:
//!
//! | kind          | positives of anchor `t`            | weight                     |
//! |---------------|------------------------------------|----------------------------|
//! | `Wsp`         | same weak label                    | depth Gaussian, normalized |
//! | `Supcon`      | same weak label                    | uniform                    |
//! | `DepthAware`  | every other view                   | depth Gaussian, normalized |
//! | `Infonce`     | the other view of the same slice   | uniform                    |

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, WspError};
use crate::kernels::{gaussian_weight, normalize_over_positives, DEFAULT_SIGMA};
use crate::tensor::Tensor;

/// Per-view metadata feeding the kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewMeta {
    pub y: i64,
    pub d: f64,
    pub slice_id: u64,
    pub patient_id: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchMeta {
    pub views: Vec<ViewMeta>,
}

impl BatchMeta {
    pub fn new(views: Vec<ViewMeta>) -> Result<Self> {
        let meta = BatchMeta { views };
        meta.validate()?;
        Ok(meta)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.views.iter().enumerate() {
            if !(0.0..=1.0).contains(&v.d) {
                return Err(WspError::Contract(format!("view {k}: depth {} outside [0,1]", v.d)));
            }
        }
        for (a, va) in self.views.iter().enumerate() {
            for vb in &self.views[a + 1..] {
                if va.slice_id == vb.slice_id && (va.y != vb.y || va.d != vb.d) {
                    return Err(WspError::Contract(format!(
                        "views of slice {} disagree on (y, d)",
                        va.slice_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Apply the same permutation `perm[new] = old` to the views.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        BatchMeta {
            views: perm.iter().map(|&k| self.views[k]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Wsp,
    Supcon,
    DepthAware,
    Infonce,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Wsp,
        LossKind::Supcon,
        LossKind::DepthAware,
        LossKind::Infonce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Wsp => "wsp",
            LossKind::Supcon => "supcon",
            LossKind::DepthAware => "depth_aware",
            LossKind::Infonce => "infonce",
        }
    }

    /// Whether the depth bandwidth influences this loss.
    pub fn uses_sigma(self) -> bool {
        matches!(self, LossKind::Wsp | LossKind::DepthAware)
    }
}

impl std::str::FromStr for LossKind {
    type Err = WspError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wsp" => Ok(LossKind::Wsp),
            "supcon" => Ok(LossKind::Supcon),
            "depth" | "depth_aware" => Ok(LossKind::DepthAware),
            "infonce" | "simclr" => Ok(LossKind::Infonce),
            other => Err(WspError::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// Which similarities enter the log-softmax denominator of the term for
/// anchor `t` and positive `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// `j ≠ t`: every other view, the positive included.
    #[default]
    ExcludeAnchor,
    /// `j ≠ i`: the anchor's self-similarity stays, the positive is dropped.
    ExcludePositive,
    /// `j ∉ {t, i}`. Undefined for two-view batches.
    ExcludeAnchorAndPositive,
}

impl Denominator {
    fn admits(self, t: usize, i: usize, j: usize) -> bool {
        match self {
            Denominator::ExcludeAnchor => j != t,
            Denominator::ExcludePositive => j != i,
            Denominator::ExcludeAnchorAndPositive => j != t && j != i,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub sigma: f64,
    pub kind: LossKind,
    pub denominator: Denominator,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            sigma: DEFAULT_SIGMA,
            kind: LossKind::Wsp,
            denominator: Denominator::ExcludeAnchor,
        }
    }
}

impl LossConfig {
    pub fn with_kind(mut self, kind: LossKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(WspError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(WspError::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Normalized positive weights of one contributing anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTerms {
    pub anchor: usize,
    pub positives: Vec<(usize, f64)>,
}

/// `P(t) = { i ≠ t : y_i = y_t }`.
pub fn positive_set(meta: &BatchMeta, t: usize) -> Vec<usize> {
    let y = meta.views[t].y;
    (0..meta.len())
        .filter(|&i| i != t && meta.views[i].y == y)
        .collect()
}

/// Positive sets and normalized weights for every anchor that contributes.
pub fn anchor_terms(meta: &BatchMeta, cfg: &LossConfig) -> Result<Vec<AnchorTerms>> {
    let mut out = Vec::with_capacity(meta.len());
    for t in 0..meta.len() {
        let vt = meta.views[t];
        let raw: Vec<(usize, f64)> = match cfg.kind {
            LossKind::Wsp => positive_set(meta, t)
                .into_iter()
                .map(|i| Ok((i, gaussian_weight(vt.d, meta.views[i].d, cfg.sigma)?)))
                .collect::<Result<_>>()?,
            LossKind::Supcon => positive_set(meta, t).into_iter().map(|i| (i, 1.0)).collect(),
            LossKind::DepthAware => (0..meta.len())
                .filter(|&i| i != t)
                .map(|i| Ok((i, gaussian_weight(vt.d, meta.views[i].d, cfg.sigma)?)))
                .collect::<Result<_>>()?,
            LossKind::Infonce => {
                let sib: Vec<_> = (0..meta.len())
                    .filter(|&i| i != t && meta.views[i].slice_id == vt.slice_id)
                    .map(|i| (i, 1.0))
                    .collect();
                if sib.is_empty() {
                    return Err(WspError::Contract(format!(
                        "infonce: view {t} (slice {}) has no sibling view",
                        vt.slice_id
                    )));
                }
                sib
            }
        };
        if let Some(positives) = normalize_over_positives(&raw) {
            out.push(AnchorTerms { anchor: t, positives });
        }
    }
    Ok(out)
}

/// `S[a,b] = z_a·z_b / τ` for unit-norm rows of `z`.
pub fn similarity_matrix(tape: &Tape, z: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(WspError::Config(format!("tau must be > 0, got {tau}")));
    }
    let zv = tape.value(z);
    if zv.rank() != 2 {
        return Err(WspError::Dimension(format!("latents of shape {:?}", zv.shape())));
    }
    for (r, row) in zv.data().chunks(zv.shape()[1]).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(WspError::Contract(format!("latent row {r} has norm {norm}, expected 1")));
        }
    }
    let zt = tape.transpose(z)?;
    let s = tape.matmul(z, zt)?;
    tape.mul_const(s, 1.0 / tau)
}

/// Loss from a precomputed `M×M` similarity matrix, mean over contributing
/// anchors. Returns a scalar node.
pub fn loss_from_similarity(tape: &Tape, s: Var, meta: &BatchMeta, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let m = meta.len();
    if m < 2 {
        return Err(WspError::Contract(format!("contrastive loss needs at least 2 views, got {m}")));
    }
    if tape.shape(s) != [m, m] {
        return Err(WspError::Dimension(format!(
            "similarity {:?} does not match {m} views",
            tape.shape(s)
        )));
    }
    let terms = anchor_terms(meta, cfg)?;
    if terms.is_empty() {
        return tape.weighted_sum(s, vec![0.0; m * m]);
    }
    let scale = 1.0 / terms.len() as f64;
    let mut rows = Vec::new();
    let mut picks = Vec::new();
    let mut weights = Vec::new();
    let mut mask = Vec::new();
    for term in &terms {
        let t = term.anchor;
        for &(i, w) in &term.positives {
            rows.push(t);
            picks.push((t, i));
            weights.push(w * scale);
            let before = mask.len();
            mask.extend((0..m).map(|j| cfg.denominator.admits(t, i, j)));
            if !mask[before..].iter().any(|&b| b) {
                return Err(WspError::Contract(format!(
                    "empty denominator for anchor {t}, positive {i} under {:?}",
                    cfg.denominator
                )));
            }
        }
    }
    let gathered = tape.gather_rows(s, rows)?;
    let lse = tape.masked_logsumexp(gathered, mask)?;
    let pos = tape.gather_elements(s, picks)?;
    let log_norm = tape.weighted_sum(lse, weights.clone())?;
    let neg_weights = weights.iter().map(|w| -w).collect();
    let attract = tape.weighted_sum(pos, neg_weights)?;
    tape.add(log_norm, attract)
}

/// The loss selected by `cfg.kind` on unit-norm latents `z: M×D`.
pub fn contrastive_loss(tape: &Tape, z: Var, meta: &BatchMeta, cfg: &LossConfig) -> Result<Var> {
    if tape.shape(z).first() != Some(&meta.len()) {
        return Err(WspError::Dimension(format!(
            "latents {:?} vs {} views",
            tape.shape(z),
            meta.len()
        )));
    }
    let s = similarity_matrix(tape, z, cfg.tau)?;
    loss_from_similarity(tape, s, meta, cfg)
}

pub fn wsp_loss(tape: &Tape, z: Var, meta: &BatchMeta, cfg: &LossConfig) -> Result<Var> {
    contrastive_loss(tape, z, meta, &cfg.with_kind(LossKind::Wsp))
}

pub fn supcon_loss(tape: &Tape, z: Var, meta: &BatchMeta, cfg: &LossConfig) -> Result<Var> {
    contrastive_loss(tape, z, meta, &cfg.with_kind(LossKind::Supcon))
}

pub fn depth_aware_loss(tape: &Tape, z: Var, meta: &BatchMeta, cfg: &LossConfig) -> Result<Var> {
    contrastive_loss(tape, z, meta, &cfg.with_kind(LossKind::DepthAware))
}

pub fn infonce_loss(tape: &Tape, z: Var, meta: &BatchMeta, cfg: &LossConfig) -> Result<Var> {
    contrastive_loss(tape, z, meta, &cfg.with_kind(LossKind::Infonce))
}

/// Loss value for a plain latent matrix.
pub fn loss_value(z: &Tensor, meta: &BatchMeta, cfg: &LossConfig) -> Result<f64> {
    let tape = Tape::new();
    let zv = tape.constant(z.clone());
    let l = contrastive_loss(&tape, zv, meta, cfg)?;
    tape.value(l).item()
}
