//! Per-document low-rank FFN adapters: construction, scaling, merging,
//! application and the `.pra` binary format.
//!
//! For a target matrix `W` of shape `rows x cols` an adapter holds
//! `A (rows x r)` and `B (cols x r)` and contributes `dW = s * A * B^T`, where
//! `s` is `alpha / r` or `alpha` depending on [`ScalingMode`]. Every layer's
//! `W_up` (`h x l`) and `W_down` (`l x h`) is targeted.

use std::io::{Cursor, Read};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::math::{gemm, Real, View, ViewMut};
use crate::model::{DenseDelta, EffectiveWeights, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"PRAGLORA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("cannot merge an empty adapter list")]
    EmptyList,
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
    #[error("bad magic: not an adapter file")]
    BadMagic,
    #[error("unsupported adapter format version {0}")]
    VersionUnsupported(u32),
    #[error("adapter payload is truncated")]
    TruncatedPayload,
    #[error("adapter checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
}

pub type Result<T, E = AdapterError> = std::result::Result<T, E>;

/// How `alpha` turns into the multiplier on `A * B^T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// `s = alpha / r`, the usual LoRA convention.
    #[default]
    AlphaOverR,
    /// `s = alpha`, the merged-update formula taken literally.
    AlphaPlain,
}

impl ScalingMode {
    fn to_byte(self) -> u8 {
        match self {
            ScalingMode::AlphaOverR => 0,
            ScalingMode::AlphaPlain => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ScalingMode::AlphaOverR),
            1 => Some(ScalingMode::AlphaPlain),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMatrix {
    FfnUp,
    FfnDown,
}

impl TargetMatrix {
    pub fn tag(self) -> u8 {
        match self {
            TargetMatrix::FfnUp => 0,
            TargetMatrix::FfnDown => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(TargetMatrix::FfnUp),
            1 => Some(TargetMatrix::FfnDown),
            _ => None,
        }
    }

    /// `(rows, cols)` of the base matrix this targets.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            TargetMatrix::FfnUp => (cfg.hidden, cfg.ffn_intermediate),
            TargetMatrix::FfnDown => (cfg.ffn_intermediate, cfg.hidden),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f32,
    #[serde(default)]
    pub scaling_mode: ScalingMode,
    /// Divide the merged sum by the number of adapters. Off by default.
    #[serde(default)]
    pub normalize_merge: bool,
}

impl Default for AdapterConfig {
    /// r = 2, alpha = 32, alpha/r scaling.
    fn default() -> Self {
        AdapterConfig { rank: 2, alpha: 32.0, scaling_mode: ScalingMode::AlphaOverR, normalize_merge: false }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f32 {
        match self.scaling_mode {
            ScalingMode::AlphaOverR => self.alpha / self.rank as f32,
            ScalingMode::AlphaPlain => self.alpha,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let max_rank = model.hidden.min(model.ffn_intermediate);
        if self.rank == 0 || self.rank > max_rank {
            return Err(AdapterError::InvalidConfig(format!("rank {} must be in 1..={max_rank}", self.rank)));
        }
        if self.rank > u16::MAX as usize {
            return Err(AdapterError::InvalidConfig(format!("rank {} does not fit the file format", self.rank)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(AdapterError::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One `(A, B)` pair for one target matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterMatrix {
    pub layer: u16,
    pub target: TargetMatrix,
    pub rows: usize,
    pub cols: usize,
    /// `rows x r`, row-major.
    pub a: Vec<f32>,
    /// `cols x r`, row-major.
    pub b: Vec<f32>,
}

/// The parametric representation of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub doc_id: u64,
    pub model_fingerprint: u64,
    pub config: AdapterConfig,
    /// Ordered by layer, `FfnUp` before `FfnDown`.
    pub matrices: Vec<AdapterMatrix>,
}

/// Low-rank factors for one block, in the model's precision.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<T> {
    pub up_a: Vec<T>,
    pub up_b: Vec<T>,
    pub down_a: Vec<T>,
    pub down_b: Vec<T>,
}

impl<T: Real> LoraLayer<T> {
    pub fn zeros_like(other: &Self) -> Self {
        LoraLayer {
            up_a: vec![T::zero(); other.up_a.len()],
            up_b: vec![T::zero(); other.up_b.len()],
            down_a: vec![T::zero(); other.down_a.len()],
            down_b: vec![T::zero(); other.down_b.len()],
        }
    }

    pub fn tensors(&self) -> [&Vec<T>; 4] {
        [&self.up_a, &self.up_b, &self.down_a, &self.down_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<T>; 4] {
        [&mut self.up_a, &mut self.up_b, &mut self.down_a, &mut self.down_b]
    }
}

/// Trainable view of an adapter: every layer's factors plus the scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraWeights<T> {
    pub rank: usize,
    pub scale: T,
    pub layers: Vec<LoraLayer<T>>,
}

impl<T: Real> LoraWeights<T> {
    pub fn flat_len(&self) -> usize {
        self.layers.iter().flat_map(|l| l.tensors()).map(Vec::len).sum()
    }

    /// All factors concatenated in layer order (`up_a, up_b, down_a, down_b`).
    pub fn flatten(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| l.tensors()).flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        let mut at = 0;
        for t in self.layers.iter_mut().flat_map(|l| l.tensors_mut()) {
            let n = t.len();
            t.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        assert_eq!(at, flat.len());
    }
}

impl LowRankAdapter {
    /// `A` uniform in `+-1/sqrt(rows)`, `B = 0`, so the initial delta is zero.
    pub fn new_random(config: AdapterConfig, model: &ModelParams, doc_id: u64, seed: u64) -> Result<Self> {
        Self::new_random_for(config, model.config(), model.fingerprint(), doc_id, seed)
    }

    pub fn new_random_for(config: AdapterConfig, model: &ModelConfig, fingerprint: u64, doc_id: u64, seed: u64) -> Result<Self> {
        config.validate(model)?;
        if model.n_layers > u16::MAX as usize {
            return Err(AdapterError::ShapeMismatch(format!("{} layers do not fit the file format", model.n_layers)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.rank;
        let mut matrices = Vec::with_capacity(2 * model.n_layers);
        for layer in 0..model.n_layers {
            for target in [TargetMatrix::FfnUp, TargetMatrix::FfnDown] {
                let (rows, cols) = target.shape(model);
                let bound = 1.0 / (rows as f32).sqrt();
                let a = (0..rows * r).map(|_| rng.random_range(-bound..bound)).collect();
                matrices.push(AdapterMatrix { layer: layer as u16, target, rows, cols, a, b: vec![0.0; cols * r] });
            }
        }
        Ok(LowRankAdapter { doc_id, model_fingerprint: fingerprint, config, matrices })
    }

    /// Trainable scalars: `2 n r (h + l)` for the standard target set.
    pub fn param_count(&self) -> usize {
        self.matrices.iter().map(|m| m.a.len() + m.b.len()).sum()
    }

    /// Bytes of fp32 tensor payload in the serialized form.
    pub fn tensor_payload_bytes(&self) -> usize {
        self.param_count() * 4
    }

    /// Checks that the matrices match `model`'s FFN shapes.
    pub fn check_shapes(&self, model: &ModelConfig) -> Result<()> {
        let r = self.config.rank;
        if self.matrices.len() != 2 * model.n_layers {
            return Err(AdapterError::ShapeMismatch(format!("{} matrices for {} layers", self.matrices.len(), model.n_layers)));
        }
        for (i, m) in self.matrices.iter().enumerate() {
            let want_target = if i % 2 == 0 { TargetMatrix::FfnUp } else { TargetMatrix::FfnDown };
            let (rows, cols) = want_target.shape(model);
            if m.layer as usize != i / 2 || m.target != want_target || (m.rows, m.cols) != (rows, cols) {
                return Err(AdapterError::ShapeMismatch(format!("matrix {i} is layer {} {:?} {}x{}", m.layer, m.target, m.rows, m.cols)));
            }
            if m.a.len() != rows * r || m.b.len() != cols * r {
                return Err(AdapterError::ShapeMismatch(format!("matrix {i} factor sizes do not match rank {r}")));
            }
        }
        Ok(())
    }

    pub fn to_weights<T: Real>(&self) -> LoraWeights<T> {
        let cast = |v: &[f32]| v.iter().map(|&x| T::from(x).unwrap()).collect::<Vec<T>>();
        let layers = self
            .matrices
            .chunks_exact(2)
            .map(|pair| LoraLayer { up_a: cast(&pair[0].a), up_b: cast(&pair[0].b), down_a: cast(&pair[1].a), down_b: cast(&pair[1].b) })
            .collect();
        LoraWeights { rank: self.config.rank, scale: T::from(self.config.scale()).unwrap(), layers }
    }

    /// Copies factors back from trained weights (rounded to fp32).
    pub fn set_weights<T: Real>(&mut self, w: &LoraWeights<T>) {
        let cast = |v: &[T]| v.iter().map(|x| x.to_f32().unwrap()).collect::<Vec<f32>>();
        for (pair, l) in self.matrices.chunks_exact_mut(2).zip(&w.layers) {
            pair[0].a = cast(&l.up_a);
            pair[0].b = cast(&l.up_b);
            pair[1].a = cast(&l.down_a);
            pair[1].b = cast(&l.down_b);
        }
    }

    /// Same factors, re-bound to another document id.
    pub fn with_doc_id(mut self, doc_id: u64) -> Self {
        self.doc_id = doc_id;
        self
    }
}

/// One dense `dW` for one target matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    pub layer: u16,
    pub target: TargetMatrix,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

/// Sum of one or more adapters' deltas, ready to plug into the FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedDelta {
    pub model_fingerprint: u64,
    pub matrices: Vec<DeltaMatrix>,
    pub source_doc_ids: Vec<u64>,
}

impl MergedDelta {
    /// An all-zero delta for `model`.
    pub fn zeros(model: &ModelParams) -> Self {
        let cfg = model.config();
        let matrices = (0..cfg.n_layers)
            .flat_map(|layer| {
                [TargetMatrix::FfnUp, TargetMatrix::FfnDown].map(|target| {
                    let (rows, cols) = target.shape(cfg);
                    DeltaMatrix { layer: layer as u16, target, rows, cols, data: vec![0.0; rows * cols] }
                })
            })
            .collect();
        MergedDelta { model_fingerprint: model.fingerprint(), matrices, source_doc_ids: Vec::new() }
    }

    pub fn get(&self, layer: usize, target: TargetMatrix) -> Option<&DeltaMatrix> {
        self.matrices.iter().find(|m| m.layer as usize == layer && m.target == target)
    }

    pub(crate) fn dense_view(&self, n_layers: usize) -> DenseDelta<'_, f32> {
        let pick = |t| (0..n_layers).map(|l| self.get(l, t).map(|m| m.data.as_slice())).collect();
        DenseDelta { up: pick(TargetMatrix::FfnUp), down: pick(TargetMatrix::FfnDown) }
    }
}

fn scaled_outer(m: &AdapterMatrix, r: usize, scale: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; m.rows * m.cols];
    gemm(scale, View::new(&m.a, m.rows, r), View::new(&m.b, m.cols, r).t(), 0.0, ViewMut::new(&mut out, m.rows, m.cols));
    out
}

/// `dW = s * A * B^T` for every target matrix.
pub fn delta_of(adapter: &LowRankAdapter) -> MergedDelta {
    let (r, s) = (adapter.config.rank, adapter.config.scale());
    let matrices =
        adapter.matrices.iter().map(|m| DeltaMatrix { layer: m.layer, target: m.target, rows: m.rows, cols: m.cols, data: scaled_outer(m, r, s) }).collect();
    MergedDelta { model_fingerprint: adapter.model_fingerprint, matrices, source_doc_ids: vec![adapter.doc_id] }
}

/// Sums `s_j * A_j * B_j^T` over `adapters` in the given (retrieval-rank)
/// order. Each adapter's own recorded scale is used; `config` only decides
/// whether the sum is divided by the count.
pub fn merge(adapters: &[LowRankAdapter], config: &AdapterConfig) -> Result<MergedDelta> {
    let first = adapters.first().ok_or(AdapterError::EmptyList)?;
    for a in &adapters[1..] {
        if a.model_fingerprint != first.model_fingerprint {
            return Err(AdapterError::FingerprintMismatch { expected: first.model_fingerprint, found: a.model_fingerprint });
        }
        let same_shapes = a.matrices.len() == first.matrices.len()
            && a.matrices.iter().zip(&first.matrices).all(|(x, y)| (x.layer, x.target, x.rows, x.cols) == (y.layer, y.target, y.rows, y.cols));
        if !same_shapes {
            return Err(AdapterError::ShapeMismatch(format!("adapter {:016x} targets differ from {:016x}", a.doc_id, first.doc_id)));
        }
    }
    let mut merged = delta_of(first);
    for a in &adapters[1..] {
        let (r, s) = (a.config.rank, a.config.scale());
        for (acc, m) in merged.matrices.iter_mut().zip(&a.matrices) {
            let term = scaled_outer(m, r, s);
            for (x, t) in acc.data.iter_mut().zip(term) {
                *x += t;
            }
        }
        merged.source_doc_ids.push(a.doc_id);
    }
    if config.normalize_merge && adapters.len() > 1 {
        let k = adapters.len() as f32;
        for m in &mut merged.matrices {
            m.data.iter_mut().for_each(|x| *x /= k);
        }
    }
    Ok(merged)
}

/// Pairs `base` with `delta`; the base weights are never touched.
pub fn apply<'a>(base: &'a ModelParams, delta: &'a MergedDelta) -> Result<EffectiveWeights<'a>> {
    if delta.model_fingerprint != base.fingerprint() {
        return Err(AdapterError::FingerprintMismatch { expected: base.fingerprint(), found: delta.model_fingerprint });
    }
    let cfg = base.config();
    for m in &delta.matrices {
        let (rows, cols) = m.target.shape(cfg);
        if m.layer as usize >= cfg.n_layers || (m.rows, m.cols) != (rows, cols) || m.data.len() != rows * cols {
            return Err(AdapterError::ShapeMismatch(format!("delta for layer {} {:?} is {}x{}", m.layer, m.target, m.rows, m.cols)));
        }
    }
    Ok(EffectiveWeights { base, delta: Some(delta) })
}

/// Encodes to the `.pra` layout: header, per-matrix blocks, trailing CRC32
/// over every preceding byte. All integers and floats little-endian.
pub fn serialize(adapter: &LowRankAdapter) -> Vec<u8> {
    let r = adapter.config.rank;
    let mut out = Vec::with_capacity(64 + adapter.tensor_payload_bytes() + adapter.matrices.len() * 11);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&adapter.doc_id.to_le_bytes());
    out.extend_from_slice(&adapter.model_fingerprint.to_le_bytes());
    out.push(adapter.config.scaling_mode.to_byte());
    out.extend_from_slice(&(r as u16).to_le_bytes());
    out.extend_from_slice(&adapter.config.alpha.to_le_bytes());
    out.extend_from_slice(&(adapter.matrices.len() as u32).to_le_bytes());
    for m in &adapter.matrices {
        out.extend_from_slice(&m.layer.to_le_bytes());
        out.push(m.target.tag());
        out.extend_from_slice(&(m.rows as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for v in m.a.iter().chain(&m.b) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf).map_err(|_| AdapterError::TruncatedPayload)?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let remaining = self.0.get_ref().len() - self.0.position() as usize;
        if n.checked_mul(4).is_none_or(|b| b > remaining) {
            return Err(AdapterError::TruncatedPayload);
        }
        (0..n).map(|_| Ok(f32::from_le_bytes(self.bytes()?))).collect()
    }
}

/// Decodes a `.pra` buffer. Structure is checked first (so a short file is
/// [`AdapterError::TruncatedPayload`]), then the checksum.
pub fn deserialize(bytes: &[u8]) -> Result<LowRankAdapter> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(AdapterError::BadMagic);
    }
    let mut rd = Reader(Cursor::new(bytes));
    rd.bytes::<8>()?;
    let version = rd.u32()?;
    if version != FORMAT_VERSION {
        return Err(AdapterError::VersionUnsupported(version));
    }
    let doc_id = rd.u64()?;
    let model_fingerprint = rd.u64()?;
    let mode_byte = rd.u8()?;
    let rank = rd.u16()? as usize;
    let alpha = f32::from_le_bytes(rd.bytes()?);
    let n = rd.u32()? as usize;
    let mut raw = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let layer = rd.u16()?;
        let tag = rd.u8()?;
        let rows = rd.u32()? as usize;
        let cols = rd.u32()? as usize;
        let a = rd.f32s(rows.saturating_mul(rank))?;
        let b = rd.f32s(cols.saturating_mul(rank))?;
        raw.push((layer, tag, rows, cols, a, b));
    }
    let body_end = rd.0.position() as usize;
    let stored = u32::from_le_bytes(rd.bytes()?);
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(AdapterError::ChecksumMismatch { stored, computed });
    }
    if body_end + 4 != bytes.len() {
        return Err(AdapterError::ShapeMismatch("trailing bytes after the checksum".into()));
    }

    let scaling_mode = ScalingMode::from_byte(mode_byte).ok_or_else(|| AdapterError::InvalidConfig(format!("unknown scaling mode {mode_byte}")))?;
    let matrices = raw
        .into_iter()
        .map(|(layer, tag, rows, cols, a, b)| {
            let target = TargetMatrix::from_tag(tag).ok_or_else(|| AdapterError::InvalidConfig(format!("unknown matrix tag {tag}")))?;
            Ok(AdapterMatrix { layer, target, rows, cols, a, b })
        })
        .collect::<Result<Vec<_>>>()?;
    let config = AdapterConfig { rank, alpha, scaling_mode, normalize_merge: false };
    Ok(LowRankAdapter { doc_id, model_fingerprint, config, matrices })
}

#[cfg(test)]
mod tests;
