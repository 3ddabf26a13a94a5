//! The three learnable element-wise modules of L-SR1: input encoder,
//! vector generator, and learning-rate generator. Each is the same MLP stack
//! (fc1, norm, PReLU, dropout, two basic blocks, fc2) applied independently
//! to every coordinate row, which is what makes one trained model serve any
//! problem dimension.
//!
//! Checkpoints use a small self-describing binary container (magic, version,
//! JSON metadata, layer manifest with shapes and offsets, little-endian f64
//! payload). The same container stores full training state.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::linalg::Matrix;
use crate::rng::Rng;

const MAGIC: &[u8; 8] = b"LSR1CKPT";
const FORMAT_VERSION: u32 = 1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad checkpoint metadata: {0}")]
    Metadata(String),
}

/// Which of the five iterate features (x, p, d, g, q) feed the encoder.
/// Column order is fixed to x, p, d, g, q regardless of the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMask {
    pub x: bool,
    pub p: bool,
    pub d: bool,
    pub g: bool,
    pub q: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self { x: true, p: true, d: true, g: true, q: true }
    }
}

impl FeatureMask {
    pub fn channel_count(&self) -> usize {
        [self.x, self.p, self.d, self.g, self.q].iter().filter(|&&b| b).count()
    }

    pub fn flags(&self) -> [bool; 5] {
        [self.x, self.p, self.d, self.g, self.q]
    }
}

/// Normalization inside every MLP stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// No normalization; forward passes are strictly row-independent.
    None,
    /// Normalize over the coordinate axis with current-call statistics only
    /// (no running averages), epsilon 1e-5.
    Coordinate,
}

/// Architecture and scaling hyperparameters; persisted in checkpoints.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub features: FeatureMask,
    pub norm: NormMode,
    pub dropout: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            features: FeatureMask::default(),
            norm: NormMode::Coordinate,
            dropout: 0.0,
            gamma1: 0.4,
            gamma2: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `out x in`, PyTorch layout.
    pub weight: Matrix,
    /// `1 x out`.
    pub bias: Matrix,
}

impl LinearParams {
    fn init(rng: &mut Rng, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = Matrix::from_vec(d_out, d_in, rng.uniform_vec(d_out * d_in, -bound, bound));
        let bias = Matrix::from_vec(1, d_out, rng.uniform_vec(d_out, -bound, bound));
        Self { weight, bias }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    /// `1 x features` scale, initialized to ones.
    pub gamma: Matrix,
    /// `1 x features` shift, initialized to zeros.
    pub beta: Matrix,
}

impl BatchNormParams {
    fn init(features: usize) -> Self {
        Self {
            gamma: Matrix::from_vec(1, features, vec![1.0; features]),
            beta: Matrix::zeros(1, features),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlockParams {
    pub fc1: LinearParams,
    pub bn1: BatchNormParams,
    /// `1 x 1` learnable PReLU slope.
    pub prelu: Matrix,
    pub fc2: LinearParams,
    pub bn2: BatchNormParams,
}

impl BasicBlockParams {
    fn init(rng: &mut Rng, d: usize) -> Self {
        Self {
            fc1: LinearParams::init(rng, d, d),
            bn1: BatchNormParams::init(d),
            prelu: Matrix::scalar(0.25),
            fc2: LinearParams::init(rng, d, d),
            bn2: BatchNormParams::init(d),
        }
    }
}

/// One MLP stack: fc1, bn1, PReLU, dropout, two basic blocks, fc2.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub bn1: BatchNormParams,
    pub prelu: Matrix,
    pub block1: BasicBlockParams,
    pub block2: BasicBlockParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    fn init(rng: &mut Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: LinearParams::init(rng, d_in, d_hidden),
            bn1: BatchNormParams::init(d_hidden),
            prelu: Matrix::scalar(0.25),
            block1: BasicBlockParams::init(rng, d_hidden),
            block2: BasicBlockParams::init(rng, d_hidden),
            fc2: LinearParams::init(rng, d_hidden, d_out),
        }
    }
}

/// Full parameter set of the learned optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct LsrOneModel {
    pub encoder: MlpParams,
    pub vector_gen: MlpParams,
    pub lr_gen: MlpParams,
    pub config: ModelConfig,
}

macro_rules! visit_mlp {
    ($prefix:expr, $mlp:expr, $f:expr) => {{
        $f(format!("{}.fc1.weight", $prefix), &$mlp.fc1.weight);
        $f(format!("{}.fc1.bias", $prefix), &$mlp.fc1.bias);
        $f(format!("{}.bn1.gamma", $prefix), &$mlp.bn1.gamma);
        $f(format!("{}.bn1.beta", $prefix), &$mlp.bn1.beta);
        $f(format!("{}.prelu.slope", $prefix), &$mlp.prelu);
        for (bi, block) in [&$mlp.block1, &$mlp.block2].into_iter().enumerate() {
            let bp = format!("{}.block{}", $prefix, bi + 1);
            $f(format!("{bp}.fc1.weight"), &block.fc1.weight);
            $f(format!("{bp}.fc1.bias"), &block.fc1.bias);
            $f(format!("{bp}.bn1.gamma"), &block.bn1.gamma);
            $f(format!("{bp}.bn1.beta"), &block.bn1.beta);
            $f(format!("{bp}.prelu.slope"), &block.prelu);
            $f(format!("{bp}.fc2.weight"), &block.fc2.weight);
            $f(format!("{bp}.fc2.bias"), &block.fc2.bias);
            $f(format!("{bp}.bn2.gamma"), &block.bn2.gamma);
            $f(format!("{bp}.bn2.beta"), &block.bn2.beta);
        }
        $f(format!("{}.fc2.weight", $prefix), &$mlp.fc2.weight);
        $f(format!("{}.fc2.bias", $prefix), &$mlp.fc2.bias);
    }};
}

impl LsrOneModel {
    /// Initialize with uniform fan-in scaled weights and biases, PReLU slopes
    /// at 0.25, and identity normalization affines. Deterministic under seed.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        assert!(config.hidden_dim >= 1, "hidden_dim must be >= 1");
        assert!(config.features.channel_count() >= 1, "feature mask must enable at least one channel");
        assert!(config.gamma1 > 0.0 && config.gamma2 > 0.0, "gamma1 and gamma2 must be positive");
        let mut rng = Rng::seed_from_u64(seed);
        let c = config.features.channel_count();
        let h = config.hidden_dim;
        Self {
            encoder: MlpParams::init(&mut rng, c, h, h),
            vector_gen: MlpParams::init(&mut rng, h, h, 1),
            lr_gen: MlpParams::init(&mut rng, h, h, 1),
            config,
        }
    }

    pub fn gamma1(&self) -> f64 {
        self.config.gamma1
    }

    pub fn gamma2(&self) -> f64 {
        self.config.gamma2
    }

    /// Parameters in a fixed, checkpoint-stable order.
    pub fn param_entries(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::with_capacity(3 * 19);
        {
            let mut push = |name: String, m: &Matrix| {
                // Safety of the borrow: entries reference distinct fields.
                out.push((name, unsafe { &*(m as *const Matrix) }));
            };
            visit_mlp!("encoder", self.encoder, push);
            visit_mlp!("vector_gen", self.vector_gen, push);
            visit_mlp!("lr_gen", self.lr_gen, push);
        }
        out
    }

    /// Mutable views over the same parameters in the same order.
    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        fn mlp<'a>(prefix: &str, m: &'a mut MlpParams, out: &mut Vec<(String, &'a mut Matrix)>) {
            out.push((format!("{prefix}.fc1.weight"), &mut m.fc1.weight));
            out.push((format!("{prefix}.fc1.bias"), &mut m.fc1.bias));
            out.push((format!("{prefix}.bn1.gamma"), &mut m.bn1.gamma));
            out.push((format!("{prefix}.bn1.beta"), &mut m.bn1.beta));
            out.push((format!("{prefix}.prelu.slope"), &mut m.prelu));
            for (bi, block) in [&mut m.block1, &mut m.block2].into_iter().enumerate() {
                let bp = format!("{prefix}.block{}", bi + 1);
                out.push((format!("{bp}.fc1.weight"), &mut block.fc1.weight));
                out.push((format!("{bp}.fc1.bias"), &mut block.fc1.bias));
                out.push((format!("{bp}.bn1.gamma"), &mut block.bn1.gamma));
                out.push((format!("{bp}.bn1.beta"), &mut block.bn1.beta));
                out.push((format!("{bp}.prelu.slope"), &mut block.prelu));
                out.push((format!("{bp}.fc2.weight"), &mut block.fc2.weight));
                out.push((format!("{bp}.fc2.bias"), &mut block.fc2.bias));
                out.push((format!("{bp}.bn2.gamma"), &mut block.bn2.gamma));
                out.push((format!("{bp}.bn2.beta"), &mut block.bn2.beta));
            }
            out.push((format!("{prefix}.fc2.weight"), &mut m.fc2.weight));
            out.push((format!("{prefix}.fc2.bias"), &mut m.fc2.bias));
        }
        let mut out = Vec::with_capacity(3 * 19);
        mlp("encoder", &mut self.encoder, &mut out);
        mlp("vector_gen", &mut self.vector_gen, &mut out);
        mlp("lr_gen", &mut self.lr_gen, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_entries().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let meta = serde_json::to_string(&self.config)
            .map_err(|e| ModelError::Metadata(e.to_string()))?;
        let entries = self.param_entries();
        let refs: Vec<(&str, &Matrix)> =
            entries.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        write_container(path, &meta, &refs)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let (meta, arrays) = read_container(path)?;
        let config: ModelConfig =
            serde_json::from_str(&meta).map_err(|e| ModelError::Metadata(e.to_string()))?;
        Self::from_arrays(config, &arrays)
    }

    /// Rebuild a model from named arrays, validating every shape against the
    /// architecture implied by `config`.
    pub fn from_arrays(
        config: ModelConfig,
        arrays: &[(String, Matrix)],
    ) -> Result<Self, ModelError> {
        let mut model = Self::init(config, 0);
        let expected: Vec<(String, (usize, usize))> = model
            .param_entries()
            .iter()
            .map(|(n, m)| (n.clone(), m.shape()))
            .collect();
        for (name, shape) in &expected {
            let found = arrays
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| ModelError::ShapeMismatch(format!("missing layer {name}")))?;
            if found.1.shape() != *shape {
                return Err(ModelError::ShapeMismatch(format!(
                    "layer {name}: expected {}x{}, found {}x{}",
                    shape.0,
                    shape.1,
                    found.1.shape().0,
                    found.1.shape().1
                )));
            }
        }
        for (name, target) in model.param_entries_mut() {
            let source = arrays.iter().find(|(n, _)| *n == name).expect("checked above");
            *target = source.1.clone();
        }
        Ok(model)
    }
}

// --- Forward passes on a tape ---

#[derive(Clone, Copy)]
struct TapedLinear {
    weight: Var,
    bias: Var,
}

#[derive(Clone, Copy)]
struct TapedBn {
    gamma: Var,
    beta: Var,
}

#[derive(Clone, Copy)]
struct TapedBlock {
    fc1: TapedLinear,
    bn1: TapedBn,
    prelu: Var,
    fc2: TapedLinear,
    bn2: TapedBn,
}

#[derive(Clone, Copy)]
struct TapedMlp {
    fc1: TapedLinear,
    bn1: TapedBn,
    prelu: Var,
    block1: TapedBlock,
    block2: TapedBlock,
    fc2: TapedLinear,
}

/// Model parameters recorded as tape leaves, plus the scaling constants.
pub struct TapedModel {
    encoder: TapedMlp,
    vector_gen: TapedMlp,
    lr_gen: TapedMlp,
    gamma1: f64,
    gamma2: f64,
    norm: NormMode,
    dropout: f64,
    channel_count: usize,
    params: Vec<Var>,
}

impl TapedModel {
    /// Record every parameter as a leaf. `trainable` leaves accumulate
    /// gradients; inference passes `false`.
    pub fn record(tape: &mut Tape, model: &LsrOneModel, trainable: bool) -> Self {
        let mut params = Vec::new();
        let mut leaf = |m: &Matrix| {
            let v = tape.leaf(m.clone(), trainable);
            params.push(v);
            v
        };
        let linear = |tape_leaf: &mut dyn FnMut(&Matrix) -> Var, l: &LinearParams| TapedLinear {
            weight: tape_leaf(&l.weight),
            bias: tape_leaf(&l.bias),
        };
        // Leaf order must equal `param_entries` order.
        let mut mlp = |m: &MlpParams| -> TapedMlp {
            let fc1 = linear(&mut leaf, &m.fc1);
            let bn1 = TapedBn { gamma: leaf(&m.bn1.gamma), beta: leaf(&m.bn1.beta) };
            let prelu = leaf(&m.prelu);
            let mut block = |b: &BasicBlockParams| TapedBlock {
                fc1: TapedLinear { weight: leaf(&b.fc1.weight), bias: leaf(&b.fc1.bias) },
                bn1: TapedBn { gamma: leaf(&b.bn1.gamma), beta: leaf(&b.bn1.beta) },
                prelu: leaf(&b.prelu),
                fc2: TapedLinear { weight: leaf(&b.fc2.weight), bias: leaf(&b.fc2.bias) },
                bn2: TapedBn { gamma: leaf(&b.bn2.gamma), beta: leaf(&b.bn2.beta) },
            };
            let block1 = block(&m.block1);
            let block2 = block(&m.block2);
            let fc2 = linear(&mut leaf, &m.fc2);
            TapedMlp { fc1, bn1, prelu, block1, block2, fc2 }
        };
        let encoder = mlp(&model.encoder);
        let vector_gen = mlp(&model.vector_gen);
        let lr_gen = mlp(&model.lr_gen);
        Self {
            encoder,
            vector_gen,
            lr_gen,
            gamma1: model.config.gamma1,
            gamma2: model.config.gamma2,
            norm: model.config.norm,
            dropout: model.config.dropout,
            channel_count: model.config.features.channel_count(),
            params,
        }
    }

    /// Leaf handles in `param_entries` order; gradients read back through these.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Assemble from existing leaves in `param_entries` order (25 per MLP,
    /// 75 total). Used when the caller owns the leaves, e.g. gradient checks
    /// probing individual parameter coordinates.
    pub fn from_vars(tape: &Tape, config: &ModelConfig, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 75, "expected 75 parameter leaves, got {}", vars.len());
        let _ = tape;
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let mlp = |next: &mut dyn FnMut() -> Var| -> TapedMlp {
            let fc1 = TapedLinear { weight: next(), bias: next() };
            let bn1 = TapedBn { gamma: next(), beta: next() };
            let prelu = next();
            let block = |next: &mut dyn FnMut() -> Var| TapedBlock {
                fc1: TapedLinear { weight: next(), bias: next() },
                bn1: TapedBn { gamma: next(), beta: next() },
                prelu: next(),
                fc2: TapedLinear { weight: next(), bias: next() },
                bn2: TapedBn { gamma: next(), beta: next() },
            };
            let block1 = block(next);
            let block2 = block(next);
            let fc2 = TapedLinear { weight: next(), bias: next() };
            TapedMlp { fc1, bn1, prelu, block1, block2, fc2 }
        };
        let encoder = mlp(&mut next);
        let vector_gen = mlp(&mut next);
        let lr_gen = mlp(&mut next);
        Self {
            encoder,
            vector_gen,
            lr_gen,
            gamma1: config.gamma1,
            gamma2: config.gamma2,
            norm: config.norm,
            dropout: config.dropout,
            channel_count: config.features.channel_count(),
            params: vars.to_vec(),
        }
    }

    fn linear(&self, tape: &mut Tape, l: TapedLinear, x: Var) -> Var {
        let n = tape.shape(x).0;
        let wt = tape.transpose(l.weight);
        let xw = tape.matmul(x, wt);
        let b = tape.broadcast_rows(l.bias, n);
        tape.add(xw, b)
    }

    fn batchnorm(&self, tape: &mut Tape, bn: TapedBn, x: Var) -> Var {
        match self.norm {
            NormMode::None => x,
            NormMode::Coordinate => {
                let n = tape.shape(x).0;
                let mu = tape.col_mean(x);
                let mu_b = tape.broadcast_rows(mu, n);
                let xc = tape.sub(x, mu_b);
                let sq = tape.mul(xc, xc);
                let var = tape.col_mean(sq);
                let var_eps = tape.add_scalar(var, BN_EPS);
                let sd = tape.sqrt(var_eps);
                let sd_b = tape.broadcast_rows(sd, n);
                let y = tape.div(xc, sd_b);
                let g = tape.broadcast_rows(bn.gamma, n);
                let b = tape.broadcast_rows(bn.beta, n);
                let yg = tape.mul(y, g);
                tape.add(yg, b)
            }
        }
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut Rng>) -> Var {
        if self.dropout == 0.0 {
            return x;
        }
        match rng {
            None => x, // inference: identity
            Some(rng) => {
                let (r, c) = tape.shape(x);
                let keep = 1.0 - self.dropout;
                let mask = Matrix::from_vec(
                    r,
                    c,
                    (0..r * c)
                        .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
                        .collect(),
                );
                let m = tape.constant(mask);
                tape.mul(x, m)
            }
        }
    }

    fn block(&self, tape: &mut Tape, b: TapedBlock, x: Var, mut rng: Option<&mut Rng>) -> Var {
        let h = self.linear(tape, b.fc1, x);
        let h = self.batchnorm(tape, b.bn1, h);
        let h = tape.prelu(h, b.prelu);
        let h = self.dropout(tape, h, rng.as_deref_mut());
        let h = self.linear(tape, b.fc2, h);
        let h = self.batchnorm(tape, b.bn2, h);
        self.dropout(tape, h, rng)
    }

    fn mlp(&self, tape: &mut Tape, m: TapedMlp, x: Var, mut rng: Option<&mut Rng>) -> Var {
        let h = self.linear(tape, m.fc1, x);
        let h = self.batchnorm(tape, m.bn1, h);
        let h = tape.prelu(h, m.prelu);
        let h = self.dropout(tape, h, rng.as_deref_mut());
        let h = self.block(tape, m.block1, h, rng.as_deref_mut());
        let h = self.block(tape, m.block2, h, rng.as_deref_mut());
        self.linear(tape, m.fc2, h)
    }

    /// Row-wise latent for an `N x C` feature matrix.
    pub fn encode(&self, tape: &mut Tape, features: Var, rng: Option<&mut Rng>) -> Var {
        let c = tape.shape(features).1;
        assert_eq!(
            c, self.channel_count,
            "encode: expected {} feature channels, got {c}",
            self.channel_count
        );
        self.mlp(tape, self.encoder, features, rng)
    }

    /// Generated vector `v_k`, an `N x 1` column.
    pub fn generate_vector(&self, tape: &mut Tape, latent: Var, rng: Option<&mut Rng>) -> Var {
        self.mlp(tape, self.vector_gen, latent, rng)
    }

    /// Coordinate-wise learning rates `gamma1 * exp(gamma2 * alpha_tilde)`,
    /// strictly positive.
    pub fn generate_lr(&self, tape: &mut Tape, latent: Var, rng: Option<&mut Rng>) -> Var {
        let alpha_tilde = self.mlp(tape, self.lr_gen, latent, rng);
        lr_transform(tape, alpha_tilde, self.gamma1, self.gamma2)
    }
}

/// `alpha = gamma1 * exp(gamma2 * alpha_tilde)`, applied elementwise.
pub fn lr_transform(tape: &mut Tape, alpha_tilde: Var, gamma1: f64, gamma2: f64) -> Var {
    let scaled = tape.scale(alpha_tilde, gamma2);
    let e = tape.exp(scaled);
    tape.scale(e, gamma1)
}

// --- Checkpoint container ---

/// Write a named-array container: magic, version, JSON metadata, manifest
/// (name, rows, cols, element offset), then the f64 payload, little-endian.
pub fn write_container(
    path: &Path,
    meta: &str,
    entries: &[(&str, &Matrix)],
) -> Result<(), ModelError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta_bytes = meta.as_bytes();
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_bytes);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset: u64 = 0;
    for (name, m) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += m.len() as u64;
    }
    buf.extend_from_slice(&offset.to_le_bytes());
    for (_, m) in entries {
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a container written by [`write_container`].
pub fn read_container(path: &Path) -> Result<(String, Vec<(String, Matrix)>), ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;

    let take = |pos: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *pos + n > bytes.len() {
            return Err(ModelError::Corrupt(format!(
                "truncated at byte {} (needed {n} more)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let meta = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
        .map_err(|e| ModelError::Corrupt(format!("metadata is not utf-8: {e}")))?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let mut manifest: Vec<(String, usize, usize, u64)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| ModelError::Corrupt(format!("layer name is not utf-8: {e}")))?;
        let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        manifest.push((name, rows, cols, offset));
    }
    let payload_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let payload = take(&mut pos, payload_len * 8)?;

    let mut arrays = Vec::with_capacity(count);
    for (name, rows, cols, offset) in manifest {
        let n = rows * cols;
        let start = offset as usize;
        if start + n > payload_len {
            return Err(ModelError::Corrupt(format!(
                "layer {name} extends past the payload ({} elements)",
                payload_len
            )));
        }
        let data: Vec<f64> = payload[start * 8..(start + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok((meta, arrays))
}

/// Manifest summary for `inspect`: metadata JSON plus (name, rows, cols) rows.
pub fn container_summary(path: &Path) -> Result<(String, Vec<(String, usize, usize)>), ModelError> {
    let (meta, arrays) = read_container(path)?;
    let manifest = arrays.into_iter().map(|(n, m)| (n, m.rows(), m.cols())).collect();
    Ok((meta, manifest))
}
