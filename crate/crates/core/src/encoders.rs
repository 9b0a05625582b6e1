//! Small encoders: a five-stage CNN and an MLP, each followed by a dense
//! representation layer and a two-layer projection head.
//!
//! The representation (`encode`) is what linear probes consume; the loss
//! consumes the unit-norm projection (`project ∘ encode`).

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, WspError};
use crate::losses::LossKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    TinyCnn,
    Mlp,
}

impl std::str::FromStr for Arch {
    type Err = WspError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny_cnn" => Ok(Arch::TinyCnn),
            "mlp" => Ok(Arch::Mlp),
            other => Err(WspError::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// How spatial resolution is reduced between conv stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsampling {
    /// Valid-padding convolutions with per-stage strides, then a global
    /// average pool.
    StridedConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub arch: Arch,
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
    pub conv_channels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub kernel_size: usize,
    pub downsampling: Downsampling,
    pub mlp_hidden: Vec<usize>,
    pub repr_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    /// Standardize every layer on a batch of training images after the
    /// random draw; see [`Encoder::data_dependent_init`].
    pub data_init: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            arch: Arch::TinyCnn,
            input_shape: [1, 32, 32],
            conv_channels: vec![16, 32, 64, 128, 256],
            conv_strides: vec![1, 1, 2, 2, 1],
            kernel_size: 3,
            downsampling: Downsampling::StridedConv,
            mlp_hidden: vec![128, 128],
            repr_dim: 256,
            proj_hidden: 256,
            proj_dim: 64,
            data_init: true,
            seed: 0,
        }
    }
}

pub const TINY_CNN_STAGES: usize = 5;

impl EncoderConfig {
    pub fn mlp(input_shape: [usize; 3]) -> Self {
        EncoderConfig {
            arch: Arch::Mlp,
            input_shape,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(WspError::Config(format!("input shape {:?}", self.input_shape)));
        }
        if !(self.repr_dim > self.proj_dim && self.proj_dim > 0) {
            return Err(WspError::Config(format!(
                "need repr_dim > proj_dim > 0, got {} and {}",
                self.repr_dim, self.proj_dim
            )));
        }
        if self.proj_hidden == 0 {
            return Err(WspError::Config("proj_hidden must be > 0".into()));
        }
        match self.arch {
            Arch::TinyCnn => {
                if self.conv_channels.len() != TINY_CNN_STAGES || self.conv_strides.len() != TINY_CNN_STAGES {
                    return Err(WspError::Config(format!(
                        "tiny_cnn needs {TINY_CNN_STAGES} conv stages, got {} channels and {} strides",
                        self.conv_channels.len(),
                        self.conv_strides.len()
                    )));
                }
                if self.conv_channels.contains(&0) || self.conv_strides.contains(&0) || self.kernel_size == 0 {
                    return Err(WspError::Config("zero channel, stride or kernel size".into()));
                }
                self.spatial_sizes()?;
            }
            Arch::Mlp => {
                if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
                    return Err(WspError::Config(format!("mlp hidden widths {:?}", self.mlp_hidden)));
                }
            }
        }
        Ok(())
    }

    /// `(h, w)` after each conv stage.
    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        let k = self.kernel_size;
        let mut out = Vec::new();
        for (stage, &s) in self.conv_strides.iter().enumerate() {
            if k > h || k > w {
                return Err(WspError::Config(format!(
                    "conv stage {stage}: kernel {k} exceeds {h}x{w} feature map"
                )));
            }
            h = (h - k) / s + 1;
            w = (w - k) / s + 1;
            out.push((h, w));
        }
        Ok(out)
    }

    /// Names and shapes of all parameters in declaration order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let features = match self.arch {
            Arch::TinyCnn => {
                let mut c_in = self.input_shape[0];
                for (i, &c) in self.conv_channels.iter().enumerate() {
                    out.push((format!("conv{i}.weight"), vec![c, c_in, self.kernel_size, self.kernel_size]));
                    out.push((format!("conv{i}.bias"), vec![c]));
                    c_in = c;
                }
                c_in
            }
            Arch::Mlp => {
                let mut f_in: usize = self.input_shape.iter().product();
                for (i, &h) in self.mlp_hidden.iter().enumerate() {
                    out.push((format!("mlp{i}.weight"), vec![f_in, h]));
                    out.push((format!("mlp{i}.bias"), vec![h]));
                    f_in = h;
                }
                f_in
            }
        };
        out.push(("repr.weight".into(), vec![features, self.repr_dim]));
        out.push(("repr.bias".into(), vec![self.repr_dim]));
        out.push(("proj0.weight".into(), vec![self.repr_dim, self.proj_hidden]));
        out.push(("proj0.bias".into(), vec![self.proj_hidden]));
        out.push(("proj1.weight".into(), vec![self.proj_hidden, self.proj_dim]));
        out.push(("proj1.bias".into(), vec![self.proj_dim]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Parameters plus the architecture that interprets them.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: Vec<Tensor>,
}

/// Fan-in of a weight tensor: everything but the output dimension.
fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[1] * shape[2] * shape[3],
        2 => shape[0],
        _ => 1,
    }
}

pub fn init_encoder(cfg: &EncoderConfig) -> Result<Encoder> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = cfg
        .parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                // He-uniform on fan-in, suited to rectifier stacks.
                let bound = (6.0 / fan_in(&shape) as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
            }
        })
        .collect();
    Ok(Encoder {
        config: cfg.clone(),
        params,
    })
}

impl Encoder {
    pub fn from_parts(config: EncoderConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        if shapes.len() != params.len() {
            return Err(WspError::Config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(WspError::Config(format!(
                    "parameter {name}: shape {:?}, config expects {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Encoder { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.config.parameter_shapes().into_iter().map(|(n, _)| n).collect()
    }

    /// Put every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.config.input_shape;
        let ok = match (self.config.arch, shape.len()) {
            (_, 4) => shape[1..] == [c, h, w],
            (Arch::Mlp, 2) => shape[1] == c * h * w,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(WspError::Dimension(format!(
                "input batch {shape:?} does not match encoder input {:?}",
                self.config.input_shape
            )))
        }
    }

    /// Representation vectors `B × repr_dim` for a batch node.
    pub fn encode_var(&self, tape: &Tape, params: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        self.check_input(&shape)?;
        let b = shape[0];
        let mut k = 0;
        let features = match self.config.arch {
            Arch::TinyCnn => {
                let mut h = x;
                for &stride in &self.config.conv_strides {
                    h = tape.conv2d(h, params[k], Some(params[k + 1]), stride)?;
                    h = tape.relu(h)?;
                    k += 2;
                }
                tape.global_avg_pool(h)?
            }
            Arch::Mlp => {
                let mut h = if shape.len() == 4 {
                    tape.reshape(x, &[b, shape[1..].iter().product()])?
                } else {
                    x
                };
                for _ in &self.config.mlp_hidden {
                    h = tape.affine(h, params[k], Some(params[k + 1]))?;
                    h = tape.relu(h)?;
                    k += 2;
                }
                h
            }
        };
        tape.affine(features, params[k], Some(params[k + 1]))
    }

    /// Unit-norm latents `B × proj_dim` from representations.
    pub fn project_var(&self, tape: &Tape, params: &[Var], repr: Var) -> Result<Var> {
        let shape = tape.shape(repr);
        if shape.len() != 2 || shape[1] != self.config.repr_dim {
            return Err(WspError::Dimension(format!(
                "representation {shape:?} vs repr_dim {}",
                self.config.repr_dim
            )));
        }
        let n = params.len();
        let h = tape.affine(repr, params[n - 4], Some(params[n - 3]))?;
        let h = tape.relu(h)?;
        let z = tape.affine(h, params[n - 2], Some(params[n - 1]))?;
        tape.l2_normalize(z)
    }

    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let x = tape.constant(batch.clone());
        let r = self.encode_var(&tape, &params, x)?;
        Ok((*tape.value(r)).clone())
    }

    pub fn project(&self, repr: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let r = tape.constant(repr.clone());
        let z = self.project_var(&tape, &params, r)?;
        Ok((*tape.value(z)).clone())
    }

    /// Data-dependent initialization: layer by layer, rescale each output
    /// channel's weights and shift its bias so that its pre-activation has
    /// zero mean and unit variance over `batch`.
    ///
    /// Without it a rectifier stack fed non-negative images produces
    /// latents that share one dominant direction, and contrastive training
    /// starts next to the collapsed solution.
    pub fn data_dependent_init(&mut self, batch: &Tensor) -> Result<()> {
        self.check_input(batch.shape())?;
        let mut h = batch.clone();
        let mut k = 0;
        match self.config.arch {
            Arch::TinyCnn => {
                for i in 0..self.config.conv_strides.len() {
                    let stride = self.config.conv_strides[i];
                    h = self.standardize_layer(k, &h, |t, x, w, b| t.conv2d(x, w, Some(b), stride))?;
                    h = h.map(|v| v.max(0.0));
                    k += 2;
                }
                let tape = Tape::new();
                let x = tape.constant(h);
                let pooled = tape.global_avg_pool(x)?;
                h = (*tape.value(pooled)).clone();
            }
            Arch::Mlp => {
                if h.rank() == 4 {
                    let b = h.shape()[0];
                    h = h.reshape(&[b, h.len() / b])?;
                }
                for _ in 0..self.config.mlp_hidden.len() {
                    h = self.standardize_layer(k, &h, |t, x, w, b| t.affine(x, w, Some(b)))?;
                    h = h.map(|v| v.max(0.0));
                    k += 2;
                }
            }
        }
        let affine = |t: &Tape, x: Var, w: Var, b: Var| t.affine(x, w, Some(b));
        h = self.standardize_layer(k, &h, affine)?;
        h = self.standardize_layer(k + 2, &h, affine)?;
        h = h.map(|v| v.max(0.0));
        self.standardize_layer(k + 4, &h, affine)?;
        Ok(())
    }

    /// Apply layer `k` (weight `params[k]`, bias `params[k + 1]`) to `input`,
    /// standardize its output channels in place and return the standardized
    /// pre-activation.
    fn standardize_layer(
        &mut self,
        k: usize,
        input: &Tensor,
        layer: impl Fn(&Tape, Var, Var, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(input.clone());
        let w = tape.constant(self.params[k].clone());
        let b = tape.constant(self.params[k + 1].clone());
        let out = layer(&tape, x, w, b)?;
        let mut pre = (*tape.value(out)).clone();
        // channels are axis 1 of a [B, C, ...] output
        let shape = pre.shape().to_vec();
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let count = (shape[0] * inner) as f64;
        let mut stats = vec![(0.0, 0.0); channels];
        for (i, &v) in pre.data().iter().enumerate() {
            let c = (i / inner) % channels;
            stats[c].0 += v;
            stats[c].1 += v * v;
        }
        let stats: Vec<(f64, f64)> = stats
            .into_iter()
            .map(|(s, ss)| {
                let mean = s / count;
                let var = (ss / count - mean * mean).max(0.0);
                // a dead channel keeps its scale and is only centred
                let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
                (mean, scale)
            })
            .collect();
        for (i, v) in pre.data_mut().iter_mut().enumerate() {
            let (mean, scale) = stats[(i / inner) % channels];
            *v = (*v - mean) * scale;
        }
        let weight = &mut self.params[k];
        if weight.rank() == 4 {
            // conv kernel [C_out, C_in, k, k]
            let per = weight.len() / channels;
            for (i, v) in weight.data_mut().iter_mut().enumerate() {
                *v *= stats[i / per].1;
            }
        } else {
            // dense weight [F_in, C_out]
            for (i, v) in weight.data_mut().iter_mut().enumerate() {
                *v *= stats[i % channels].1;
            }
        }
        for (c, v) in self.params[k + 1].data_mut().iter_mut().enumerate() {
            *v = (*v - stats[c].0) * stats[c].1;
        }
        Ok(pre)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"WSPC";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    encoder: EncoderConfig,
    step: u64,
    loss_kind: Option<LossKind>,
}

/// A trained (or freshly initialized) encoder with training provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCheckpoint {
    pub encoder: Encoder,
    pub step: u64,
    pub loss_kind: Option<LossKind>,
}

impl EncoderCheckpoint {
    pub fn untrained(encoder: Encoder) -> Self {
        EncoderCheckpoint {
            encoder,
            step: 0,
            loss_kind: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            encoder: self.encoder.config.clone(),
            step: self.step,
            loss_kind: self.loss_kind,
        };
        let json = serde_json::to_vec(&header).map_err(|source| WspError::Json {
            context: "checkpoint header".into(),
            source,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.encoder.params {
            out.push(p.rank() as u8);
            for &e in p.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(WspError::format(0, "bad checkpoint magic"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(WspError::format(4, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| WspError::format(at as u64, e.to_string()))?;
        let shapes = header.encoder.parameter_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        for (name, expected) in &shapes {
            let at = r.pos as u64;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            if &shape != expected {
                return Err(WspError::format(
                    at,
                    format!("parameter {name}: stored shape {shape:?}, config expects {expected:?}"),
                ));
            }
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(WspError::format(r.pos as u64, "trailing bytes after parameters"));
        }
        Ok(EncoderCheckpoint {
            encoder: Encoder::from_parts(header.encoder, params)?,
            step: header.step,
            loss_kind: header.loss_kind,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| WspError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| WspError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| WspError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Little-endian cursor that reports the failing offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(WspError::format(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_gradient, max_relative_error};
    use crate::losses::{contrastive_loss, BatchMeta, LossConfig, ViewMeta};

    fn random_batch(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    fn column_moments(t: &Tensor) -> Vec<(f64, f64)> {
        let (n, f) = (t.shape()[0], t.shape()[1]);
        (0..f)
            .map(|c| {
                let m = (0..n).map(|r| t.at2(r, c)).sum::<f64>() / n as f64;
                let v = (0..n).map(|r| (t.at2(r, c) - m).powi(2)).sum::<f64>() / n as f64;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn data_dependent_init_standardizes_the_representation() {
        for cfg in [small_cnn(), EncoderConfig::mlp([1, 6, 6])] {
            let mut enc = init_encoder(&cfg).unwrap();
            let [c, h, w] = cfg.input_shape;
            let batch = random_batch(&[40, c, h, w], 5);
            enc.data_dependent_init(&batch).unwrap();
            let repr = enc.encode(&batch).unwrap();
            for (m, v) in column_moments(&repr) {
                assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9, "mean {m} var {v}");
            }
            // the pre-normalization latents are centred, so they spread out
            let z = enc.project(&repr).unwrap();
            let mut cos = 0.0;
            for i in 0..40 {
                for j in 0..40 {
                    if i != j {
                        cos += z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            assert!(cos / (40.0 * 39.0) < 0.2);
        }
    }

    fn small_cnn() -> EncoderConfig {
        EncoderConfig {
            input_shape: [1, 16, 16],
            conv_channels: vec![2, 3, 3, 4, 4],
            conv_strides: vec![1, 1, 2, 1, 1],
            repr_dim: 8,
            proj_hidden: 6,
            proj_dim: 4,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn default_parameter_count_closed_form() {
        let cfg = EncoderConfig::default();
        // conv: F·C·9 + F per stage
        let conv = (16 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64) + (128 * 64 * 9 + 128) + (256 * 128 * 9 + 256);
        let dense = (256 * 256 + 256) + (256 * 256 + 256) + (256 * 64 + 64);
        assert_eq!(cfg.parameter_count(), conv + dense);
        assert_eq!(cfg.parameter_count(), 540_352);
        assert_eq!(cfg.spatial_sizes().unwrap(), vec![(30, 30), (28, 28), (13, 13), (6, 6), (4, 4)]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        cfg.conv_channels.pop();
        assert!(init_encoder(&cfg).is_err());
        let cfg = EncoderConfig {
            proj_dim: 256,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            conv_strides: vec![2, 2, 2, 2, 2],
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_encoder(&small_cnn()).unwrap();
        let b = init_encoder(&small_cnn()).unwrap();
        assert_eq!(a, b);
        let c = init_encoder(&EncoderConfig { seed: 1, ..small_cnn() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn default_encode_shapes() {
        let enc = init_encoder(&EncoderConfig::default()).unwrap();
        let x = random_batch(&[2, 1, 32, 32], 3);
        let r = enc.encode(&x).unwrap();
        assert_eq!(r.shape(), &[2, 256]);
        assert_eq!(r, enc.encode(&x).unwrap());
        let z = enc.project(&r).unwrap();
        assert_eq!(z.shape(), &[2, 64]);
        for row in z.data().chunks(64) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert!(enc.encode(&random_batch(&[2, 1, 30, 32], 3)).is_err());
    }

    #[test]
    fn mlp_accepts_flat_or_image_batches() {
        let enc = init_encoder(&EncoderConfig::mlp([1, 4, 4])).unwrap();
        let x = random_batch(&[3, 1, 4, 4], 5);
        let flat = x.reshape(&[3, 16]).unwrap();
        assert_eq!(enc.encode(&x).unwrap(), enc.encode(&flat).unwrap());
    }

    #[test]
    fn gradient_reaches_first_conv() {
        let enc = init_encoder(&small_cnn()).unwrap();
        let tape = Tape::new();
        let params = enc.bind(&tape, true);
        let x = tape.constant(random_batch(&[3, 1, 16, 16], 6));
        let r = enc.encode_var(&tape, &params, x).unwrap();
        let z = enc.project_var(&tape, &params, r).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        let g0 = g.wrt(params[0]);
        assert!(g0.data().iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn encoder_loss_gradient_matches_finite_differences() {
        let cfg = EncoderConfig {
            repr_dim: 6,
            proj_hidden: 5,
            proj_dim: 3,
            mlp_hidden: vec![5],
            ..EncoderConfig::mlp([1, 3, 3])
        };
        let enc = init_encoder(&cfg).unwrap();
        let x = random_batch(&[4, 9], 7);
        let meta = BatchMeta::new(
            [(0, 0.2, 0), (0, 0.2, 0), (0, 0.6, 1), (0, 0.6, 1)]
                .iter()
                .map(|&(y, d, s)| ViewMeta { y, d, slice_id: s, patient_id: s })
                .collect(),
        )
        .unwrap();
        let loss_cfg = LossConfig { tau: 0.5, ..LossConfig::default() };
        let eval = |params: &[Tensor]| -> Result<f64> {
            let e = Encoder::from_parts(cfg.clone(), params.to_vec())?;
            let tape = Tape::new();
            let pv = e.bind(&tape, false);
            let xv = tape.constant(x.clone());
            let r = e.encode_var(&tape, &pv, xv)?;
            let z = e.project_var(&tape, &pv, r)?;
            let l = contrastive_loss(&tape, z, &meta, &loss_cfg)?;
            tape.value(l).item()
        };
        let tape = Tape::new();
        let pv = enc.bind(&tape, true);
        let xv = tape.constant(x.clone());
        let r = enc.encode_var(&tape, &pv, xv).unwrap();
        let z = enc.project_var(&tape, &pv, r).unwrap();
        let l = contrastive_loss(&tape, z, &meta, &loss_cfg).unwrap();
        let g = tape.backward(l).unwrap();
        for (k, p) in enc.params().iter().enumerate() {
            let numeric = finite_diff_gradient(
                |t| {
                    let mut ps = enc.params().to_vec();
                    ps[k] = t.clone();
                    eval(&ps)
                },
                p,
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&g.wrt(pv[k]), &numeric, 1e-3);
            assert!(err < 1e-5, "param {k}: {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = init_encoder(&small_cnn()).unwrap();
        let ck = EncoderCheckpoint {
            encoder: enc,
            step: 42,
            loss_kind: Some(LossKind::Wsp),
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"WSPC");
        let back = EncoderCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let x = random_batch(&[2, 1, 16, 16], 9);
        assert_eq!(back.encoder.encode(&x).unwrap(), ck.encoder.encode(&x).unwrap());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EncoderCheckpoint::from_bytes(&bad), Err(WspError::Format { offset: 0, .. })));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(EncoderCheckpoint::from_bytes(truncated), Err(WspError::Format { .. })));
    }
}
