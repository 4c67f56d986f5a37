//! Learned hyperprior entropy model.
//!
//! The encoder maps a tile of occupancy bytes to an `M`-dimensional latent in
//! `[-1, 1]` (FC + BN + ELU blocks, FC + tanh head). The latent is scalar
//! quantized to `L` evenly spaced levels and the decoder (FC + BN + ELU
//! blocks, FC + softmax head) turns it into one 256-way symbol distribution
//! shared by every position of the tile.
//!
//! Parameters live in one flat vector so that the optimizer, the gradient
//! buffer and the weight file share a single layout. Batch-norm running
//! statistics are kept apart in `buffers`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Occupancy bytes per tile.
pub const TILE_LEN: usize = 512;
/// Latent code size.
pub const LATENT_DIM: usize = 8;
/// Number of quantization levels.
pub const LEVELS: usize = 64;
/// Softness of the differentiable quantizer.
pub const SIGMA_Q: f64 = 2.0;
pub const SYMBOLS: usize = 256;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

const MODEL_MAGIC: &[u8; 8] = b"LLECMDL\0";
const MODEL_FORMAT_VERSION: u32 = 1;

/// A block of occupancy bytes; positions at or past `valid_count` are zero padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    pub symbols: Vec<u8>,
    pub valid_count: usize,
}

impl Tile {
    pub fn full(symbols: Vec<u8>) -> Self {
        let valid_count = symbols.len();
        Self { symbols, valid_count }
    }

    /// Splits a byte sequence into tiles of `tile_len`, zero-padding the last one.
    pub fn split(bytes: &[u8], tile_len: usize) -> Vec<Tile> {
        bytes
            .chunks(tile_len)
            .map(|chunk| {
                let mut symbols = chunk.to_vec();
                symbols.resize(tile_len, 0);
                Tile { symbols, valid_count: chunk.len() }
            })
            .collect()
    }

    pub fn valid(&self) -> &[u8] {
        &self.symbols[..self.valid_count]
    }

    pub fn is_full(&self) -> bool {
        self.valid_count == self.symbols.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<F>(pub Vec<F>);

/// Level indices in `[0, L)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedLatent(pub Vec<u8>);

/// Probabilities over the 256 byte values.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolDistribution<F>(pub Vec<F>);

impl<F: Scalar> SymbolDistribution<F> {
    pub fn uniform() -> Self {
        Self(vec![F::one() / F::of(SYMBOLS as f64); SYMBOLS])
    }

    pub fn probs(&self) -> &[F] {
        &self.0
    }
}

/// Forward behaviour of the quantizer during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Soft quantizer in the forward pass and its exact gradient backward.
    #[default]
    Soft,
    /// Hard quantizer forward, soft-quantizer gradient backward.
    StraightThrough,
}

// ---------------------------------------------------------------------------
// Quantization

/// Level `j` of an `levels`-point grid on `[-1, 1]`.
///
/// Written as an integer numerator over `levels - 1` so the grid is exactly
/// symmetric around zero.
#[inline]
pub fn level_value<F: Scalar>(j: usize, levels: usize) -> F {
    let n = (levels - 1) as f64;
    F::of((2.0 * j as f64 - n) / n)
}

/// Nearest level index; ties resolve to the lower index.
pub fn quantize_scalar<F: Scalar>(z: F, levels: usize) -> u8 {
    if z.is_nan() {
        return 0;
    }
    let n = levels - 1;
    let pos = (z + F::one()) * F::of(n as f64 / 2.0);
    let lo = pos.floor().max(F::zero()).min(F::of((n - 1) as f64)).as_f64() as usize;
    let d_lo = (z - level_value::<F>(lo, levels)).abs();
    let d_hi = (z - level_value::<F>(lo + 1, levels)).abs();
    if d_hi < d_lo {
        (lo + 1) as u8
    } else {
        lo as u8
    }
}

pub fn quantize_hard<F: Scalar>(z: &LatentCode<F>) -> QuantizedLatent {
    QuantizedLatent(z.0.iter().map(|&v| quantize_scalar(v, LEVELS)).collect())
}

pub fn dequantize<F: Scalar>(q: &QuantizedLatent) -> Vec<F> {
    q.0.iter().map(|&j| level_value(j as usize, LEVELS)).collect()
}

/// Differentiable quantizer: softmax(-σ|z - l_j|)-weighted mean of the levels.
///
/// Returns the value and its derivative with respect to `z`.
pub fn soft_quantize_scalar<F: Scalar>(z: F, sigma: F, levels: usize) -> (F, F) {
    let mut dmin = F::infinity();
    for j in 0..levels {
        dmin = dmin.min((z - level_value::<F>(j, levels)).abs());
    }
    let (mut sw, mut swl, mut swa, mut swla) = (F::zero(), F::zero(), F::zero(), F::zero());
    for j in 0..levels {
        let l = level_value::<F>(j, levels);
        let diff = z - l;
        let w = (-sigma * (diff.abs() - dmin)).exp();
        // d/dz of -σ|z - l|
        let da = if diff > F::zero() {
            -sigma
        } else if diff < F::zero() {
            sigma
        } else {
            F::zero()
        };
        sw += w;
        swl += w * l;
        swa += w * da;
        swla += w * l * da;
    }
    let q = swl / sw;
    (q, swla / sw - q * (swa / sw))
}

pub fn quantize_soft<F: Scalar>(z: &LatentCode<F>, sigma: F) -> LatentCode<F> {
    LatentCode(z.0.iter().map(|&v| soft_quantize_scalar(v, sigma, LEVELS).0).collect())
}

// ---------------------------------------------------------------------------
// Rate

/// Code length in bits of the tile's valid symbols under `dist`.
pub fn tile_rate_loss<F: Scalar>(dist: &SymbolDistribution<F>, tile: &Tile) -> f64 {
    tile.valid().iter().map(|&s| -dist.0[s as usize].as_f64().log2()).sum()
}

pub fn tile_bits_per_symbol<F: Scalar>(dist: &SymbolDistribution<F>, tile: &Tile) -> f64 {
    if tile.valid_count == 0 {
        0.0
    } else {
        tile_rate_loss(dist, tile) / tile.valid_count as f64
    }
}

// ---------------------------------------------------------------------------
// Architecture and layout

/// Layer widths and quantizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub tile_len: usize,
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub symbols: usize,
    pub levels: usize,
    pub sigma_q: f64,
}

impl Default for Architecture {
    /// 512 → 64 → 32 → 8 encoder, 8 → 72 → 256 decoder.
    fn default() -> Self {
        Self {
            tile_len: TILE_LEN,
            encoder_hidden: vec![64, 32],
            latent_dim: LATENT_DIM,
            decoder_hidden: vec![72],
            symbols: SYMBOLS,
            levels: LEVELS,
            sigma_q: SIGMA_Q,
        }
    }
}

impl Architecture {
    /// Narrow variant used for gradient checks.
    pub fn reduced() -> Self {
        Self { tile_len: 8, encoder_hidden: vec![4], latent_dim: 2, decoder_hidden: vec![4], ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let widths_ok = self.tile_len > 0
            && self.latent_dim > 0
            && self.encoder_hidden.iter().chain(&self.decoder_hidden).all(|&w| w > 0);
        if !widths_ok
            || self.symbols != SYMBOLS
            || !(2..=64).contains(&self.levels)
            || self.sigma_q.is_nan()
            || self.sigma_q <= 0.0
        {
            return Err(Error::InvalidArgument(format!("unsupported architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    inputs: usize,
    outputs: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    width: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone)]
struct Stack {
    hidden: Vec<(Dense, Norm)>,
    head: Dense,
}

impl Stack {
    fn param_range(&self) -> std::ops::Range<usize> {
        let start = self.hidden.first().map(|(d, _)| d.weight).unwrap_or(self.head.weight);
        start..self.head.bias + self.head.outputs
    }

    fn macs(&self) -> usize {
        self.hidden.iter().map(|(d, _)| d.inputs * d.outputs).sum::<usize>() + self.head.inputs * self.head.outputs
    }
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Stack,
    decoder: Stack,
    params: usize,
    buffers: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut params = 0;
        let mut buffers = 0;
        let dense = |inputs, outputs, params: &mut usize| {
            let d = Dense { inputs, outputs, weight: *params, bias: *params + inputs * outputs };
            *params += inputs * outputs + outputs;
            d
        };
        let stack = |input: usize, hidden: &[usize], out: usize, params: &mut usize, buffers: &mut usize| {
            let mut width = input;
            let mut blocks = Vec::new();
            for &h in hidden {
                let d = dense(width, h, params);
                let n = Norm { width: h, gamma: *params, beta: *params + h, mean: *buffers, var: *buffers + h };
                *params += 2 * h;
                *buffers += 2 * h;
                blocks.push((d, n));
                width = h;
            }
            let head = dense(width, out, params);
            Stack { hidden: blocks, head }
        };
        let encoder = stack(arch.tile_len, &arch.encoder_hidden, arch.latent_dim, &mut params, &mut buffers);
        let decoder = stack(arch.latent_dim, &arch.decoder_hidden, arch.symbols, &mut params, &mut buffers);
        Self { encoder, decoder, params, buffers }
    }
}

/// Batch-norm statistics observed during one training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<F> {
    /// Per BN layer, in layout order: (batch mean, unbiased batch variance).
    pub layers: Vec<(Vec<F>, Vec<F>)>,
    pub batch_size: usize,
}

/// Result of [`HyperpriorModel::forward_backward`].
#[derive(Debug, Clone)]
pub struct TrainStep<F> {
    /// Mean bits per valid symbol over the batch.
    pub loss: F,
    /// Same layout as the model parameters.
    pub grads: Vec<F>,
    pub stats: BatchStats<F>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    architecture: Architecture,
    param_count: usize,
    buffer_count: usize,
    /// SHA-256 of the weight payload, hex.
    payload_sha256: String,
}

/// The hyperprior encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperpriorModel<F> {
    arch: Architecture,
    pub params: Vec<F>,
    pub buffers: Vec<F>,
}

// Per-layer activations of a training forward pass.
struct HiddenCache<F> {
    input: Vec<F>,
    xhat: Vec<F>,
    inv_std: Vec<F>,
    bn_out: Vec<F>,
}

struct StackCache<F> {
    hidden: Vec<HiddenCache<F>>,
    head_input: Vec<F>,
}

#[inline]
fn elu<F: Scalar>(u: F) -> F {
    if u > F::zero() {
        u
    } else {
        u.exp_m1()
    }
}

#[inline]
fn elu_grad<F: Scalar>(u: F) -> F {
    if u > F::zero() {
        F::one()
    } else {
        u.exp()
    }
}

impl<F: Scalar> HyperpriorModel<F> {
    fn layout(&self) -> Layout {
        Layout::new(&self.arch)
    }

    /// All weights and biases zero; BN scales one, shifts zero, running stats (0, 1).
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![F::zero(); layout.params];
        let mut buffers = vec![F::zero(); layout.buffers];
        for (_, n) in layout.encoder.hidden.iter().chain(&layout.decoder.hidden) {
            params[n.gamma..n.gamma + n.width].fill(F::one());
            buffers[n.var..n.var + n.width].fill(F::one());
        }
        Ok(Self { arch, params, buffers })
    }

    /// Uniform fan-in initialisation, `±1/sqrt(fan_in)` for weights and biases.
    pub fn initialized<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeroed(arch)?;
        let layout = model.layout();
        let denses = layout
            .encoder
            .hidden
            .iter()
            .map(|(d, _)| *d)
            .chain([layout.encoder.head])
            .chain(layout.decoder.hidden.iter().map(|(d, _)| *d))
            .chain([layout.decoder.head]);
        for d in denses {
            let bound = 1.0 / (d.inputs as f64).sqrt();
            for p in &mut model.params[d.weight..d.bias + d.outputs] {
                *p = F::of(rng.gen_range(-bound..bound));
            }
        }
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn encoder_param_count(&self) -> usize {
        self.layout().encoder.param_range().len()
    }

    pub fn decoder_param_count(&self) -> usize {
        self.layout().decoder.param_range().len()
    }

    /// Parameter index range belonging to the encoder.
    pub fn encoder_param_range(&self) -> std::ops::Range<usize> {
        self.layout().encoder.param_range()
    }

    pub fn decoder_param_range(&self) -> std::ops::Range<usize> {
        self.layout().decoder.param_range()
    }

    /// Multiply-accumulates of the fully connected layers per tile.
    pub fn encoder_macs(&self) -> usize {
        self.layout().encoder.macs()
    }

    pub fn decoder_macs(&self) -> usize {
        self.layout().decoder.macs()
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(Error::ModelCorrupt(format!("parameter {i} is not finite")));
        }
        if let Some(i) = self.buffers.iter().position(|p| !p.is_finite()) {
            return Err(Error::ModelCorrupt(format!("running statistic {i} is not finite")));
        }
        Ok(())
    }

    /// Rounds every parameter and statistic to `f32`, the stored precision.
    pub fn snap_to_storage(&mut self) {
        for p in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            *p = F::of(f64::from(p.to_storage()));
        }
    }

    fn input_vector(&self, symbols: &[u8]) -> Vec<F> {
        let scale = F::one() / F::of(255.0);
        symbols.iter().map(|&s| F::of(f64::from(s)) * scale).collect()
    }

    // Inference path of one stack for a single sample.
    fn stack_infer(&self, stack: &Stack, mut x: Vec<F>) -> Vec<F> {
        let eps = F::of(BN_EPS);
        for (d, n) in &stack.hidden {
            let y = self.dense_single(d, &x);
            x = (0..n.width)
                .map(|o| {
                    let mean = self.buffers[n.mean + o];
                    let var = self.buffers[n.var + o];
                    let u = (y[o] - mean) / (var + eps).sqrt() * self.params[n.gamma + o] + self.params[n.beta + o];
                    elu(u)
                })
                .collect();
        }
        self.dense_single(&stack.head, &x)
    }

    fn dense_single(&self, d: &Dense, x: &[F]) -> Vec<F> {
        (0..d.outputs)
            .map(|o| {
                let row = &self.params[d.weight + o * d.inputs..d.weight + (o + 1) * d.inputs];
                let mut acc = self.params[d.bias + o];
                for (w, v) in row.iter().zip(x) {
                    acc += *w * *v;
                }
                acc
            })
            .collect()
    }

    /// Latent code of one tile (BN in inference mode).
    pub fn encode_tile(&self, tile: &Tile) -> Result<LatentCode<F>> {
        if tile.symbols.len() != self.arch.tile_len {
            return Err(Error::InvalidArgument(format!(
                "tile has {} symbols, model expects {}",
                tile.symbols.len(),
                self.arch.tile_len
            )));
        }
        let layout = self.layout();
        let pre = self.stack_infer(&layout.encoder, self.input_vector(&tile.symbols));
        let z: Vec<F> = pre.into_iter().map(F::tanh).collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelCorrupt("encoder produced a non-finite latent".into()));
        }
        Ok(LatentCode(z))
    }

    pub fn quantize(&self, z: &LatentCode<F>) -> QuantizedLatent {
        QuantizedLatent(z.0.iter().map(|&v| quantize_scalar(v, self.arch.levels)).collect())
    }

    /// Symbol distribution for a quantized latent (BN in inference mode).
    pub fn decode_probs(&self, zq: &QuantizedLatent) -> Result<SymbolDistribution<F>> {
        let probs = softmax(&self.decode_logits(zq)?);
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::ModelCorrupt("decoder produced a non-finite probability".into()));
        }
        Ok(SymbolDistribution(probs))
    }

    fn decode_logits(&self, zq: &QuantizedLatent) -> Result<Vec<F>> {
        if zq.0.len() != self.arch.latent_dim {
            return Err(Error::InvalidArgument(format!(
                "latent has {} entries, model expects {}",
                zq.0.len(),
                self.arch.latent_dim
            )));
        }
        if let Some(&j) = zq.0.iter().find(|&&j| j as usize >= self.arch.levels) {
            return Err(Error::Range(format!("latent index {j} out of range")));
        }
        let values = zq.0.iter().map(|&j| level_value(j as usize, self.arch.levels)).collect();
        Ok(self.stack_infer(&self.layout().decoder, values))
    }

    /// Inference-path bits per valid symbol for one tile.
    ///
    /// Computed in log space, so a symbol whose probability underflows costs a
    /// large finite amount rather than infinity.
    pub fn tile_bits_per_symbol(&self, tile: &Tile) -> Result<f64> {
        if tile.valid_count == 0 {
            return Ok(0.0);
        }
        let zq = self.quantize(&self.encode_tile(tile)?);
        let logits: Vec<f64> = self.decode_logits(&zq)?.iter().map(|l| l.as_f64()).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let nats: f64 = tile.valid().iter().map(|&s| log_z - logits[s as usize]).sum();
        let bits = nats / std::f64::consts::LN_2 / tile.valid_count as f64;
        if bits.is_finite() {
            Ok(bits)
        } else {
            Err(Error::ModelCorrupt("decoder produced non-finite logits".into()))
        }
    }

    /// Mean inference-path bits per symbol over `tiles`.
    pub fn evaluate(&self, tiles: &[Tile]) -> Result<f64> {
        if tiles.is_empty() {
            return Err(Error::InvalidArgument("cannot evaluate an empty tile set".into()));
        }
        use rayon::prelude::*;
        let per_tile: Vec<f64> = tiles.par_iter().map(|t| self.tile_bits_per_symbol(t)).collect::<Result<_>>()?;
        Ok(per_tile.iter().sum::<f64>() / tiles.len() as f64)
    }

    // -----------------------------------------------------------------------
    // Training

    fn stack_forward_train(
        &self,
        stack: &Stack,
        mut x: Vec<F>,
        batch: usize,
        stats: &mut Vec<(Vec<F>, Vec<F>)>,
    ) -> (Vec<F>, StackCache<F>) {
        let eps = F::of(BN_EPS);
        let bf = F::of(batch as f64);
        let mut hidden = Vec::with_capacity(stack.hidden.len());
        for (d, n) in &stack.hidden {
            let y = dense_batch(&self.params, d, &x, batch);
            let w = n.width;
            let mut mean = vec![F::zero(); w];
            for row in y.chunks_exact(w) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += *v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= bf);
            let mut var = vec![F::zero(); w];
            for row in y.chunks_exact(w) {
                for o in 0..w {
                    let c = row[o] - mean[o];
                    var[o] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= bf);
            let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
            let mut xhat = vec![F::zero(); y.len()];
            let mut bn_out = vec![F::zero(); y.len()];
            let mut out = vec![F::zero(); y.len()];
            for b in 0..batch {
                for o in 0..w {
                    let i = b * w + o;
                    xhat[i] = (y[i] - mean[o]) * inv_std[o];
                    bn_out[i] = xhat[i] * self.params[n.gamma + o] + self.params[n.beta + o];
                    out[i] = elu(bn_out[i]);
                }
            }
            let unbiased =
                if batch > 1 { var.iter().map(|&v| v * bf / F::of((batch - 1) as f64)).collect() } else { var.clone() };
            stats.push((mean, unbiased));
            hidden.push(HiddenCache { input: x, xhat, inv_std, bn_out });
            x = out;
        }
        let head_out = dense_batch(&self.params, &stack.head, &x, batch);
        (head_out, StackCache { hidden, head_input: x })
    }

    fn stack_backward(
        &self,
        stack: &Stack,
        cache: &StackCache<F>,
        d_out: &[F],
        batch: usize,
        grads: &mut [F],
    ) -> Vec<F> {
        let mut dx = dense_backward(&self.params, &stack.head, &cache.head_input, d_out, batch, grads);
        let bf = F::of(batch as f64);
        for ((d, n), hc) in stack.hidden.iter().zip(&cache.hidden).rev() {
            let w = n.width;
            // through ELU
            for (g, u) in dx.iter_mut().zip(&hc.bn_out) {
                *g *= elu_grad(*u);
            }
            // through BN (batch statistics)
            let mut sum_dy = vec![F::zero(); w];
            let mut sum_dy_xhat = vec![F::zero(); w];
            for b in 0..batch {
                for o in 0..w {
                    let i = b * w + o;
                    sum_dy[o] += dx[i];
                    sum_dy_xhat[o] += dx[i] * hc.xhat[i];
                }
            }
            for o in 0..w {
                grads[n.gamma + o] += sum_dy_xhat[o];
                grads[n.beta + o] += sum_dy[o];
            }
            let mut dy = vec![F::zero(); dx.len()];
            for b in 0..batch {
                for o in 0..w {
                    let i = b * w + o;
                    let gamma = self.params[n.gamma + o];
                    dy[i] = gamma * hc.inv_std[o] / bf * (bf * dx[i] - sum_dy[o] - hc.xhat[i] * sum_dy_xhat[o]);
                }
            }
            dx = dense_backward(&self.params, d, &hc.input, &dy, batch, grads);
        }
        dx
    }

    /// Training-mode loss and gradients over a batch.
    ///
    /// BN layers use batch statistics; the observed statistics are returned
    /// so the caller can fold them into the running averages with
    /// [`Self::update_running_stats`]. The loss is the mean over tiles of
    /// bits per valid symbol.
    pub fn forward_backward(&self, batch: &[&Tile], mode: QuantMode) -> Result<TrainStep<F>> {
        let bsz = batch.len();
        if bsz == 0 {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let arch = &self.arch;
        let layout = self.layout();
        let mut x = Vec::with_capacity(bsz * arch.tile_len);
        for t in batch {
            if t.symbols.len() != arch.tile_len {
                return Err(Error::InvalidArgument(format!(
                    "tile has {} symbols, model expects {}",
                    t.symbols.len(),
                    arch.tile_len
                )));
            }
            x.extend(self.input_vector(&t.symbols));
        }
        let mut stats = Vec::new();
        let (z_pre, enc_cache) = self.stack_forward_train(&layout.encoder, x, bsz, &mut stats);
        let z: Vec<F> = z_pre.iter().map(|v| v.tanh()).collect();

        let sigma = F::of(arch.sigma_q);
        let mut q = Vec::with_capacity(z.len());
        let mut dq_dz = Vec::with_capacity(z.len());
        for &v in &z {
            let (soft, deriv) = soft_quantize_scalar(v, sigma, arch.levels);
            let fwd = match mode {
                QuantMode::Soft => soft,
                QuantMode::StraightThrough => level_value(quantize_scalar(v, arch.levels) as usize, arch.levels),
            };
            q.push(fwd);
            dq_dz.push(deriv);
        }

        let (logits, dec_cache) = self.stack_forward_train(&layout.decoder, q, bsz, &mut stats);

        // Loss and gradient w.r.t. logits.
        let ln2 = F::of(std::f64::consts::LN_2);
        let bf = F::of(bsz as f64);
        let mut loss = F::zero();
        let mut d_logits = vec![F::zero(); logits.len()];
        for (b, tile) in batch.iter().enumerate() {
            let row = &logits[b * SYMBOLS..(b + 1) * SYMBOLS];
            let drow = &mut d_logits[b * SYMBOLS..(b + 1) * SYMBOLS];
            if tile.valid_count == 0 {
                continue;
            }
            let mut counts = [0u32; SYMBOLS];
            for &s in tile.valid() {
                counts[s as usize] += 1;
            }
            let n = F::of(tile.valid_count as f64);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum: F = row.iter().map(|&l| (l - m).exp()).sum();
            let log_z = m + sum.ln();
            let mut nats = F::zero();
            for k in 0..SYMBOLS {
                let logp = row[k] - log_z;
                if counts[k] > 0 {
                    nats -= F::of(f64::from(counts[k])) * logp;
                }
                drow[k] = (logp.exp() - F::of(f64::from(counts[k])) / n) / (bf * ln2);
            }
            loss += nats / (n * ln2);
        }
        loss /= bf;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss}")));
        }

        let mut grads = vec![F::zero(); layout.params];
        let d_q = self.stack_backward(&layout.decoder, &dec_cache, &d_logits, bsz, &mut grads);
        let d_zpre: Vec<F> =
            d_q.iter().zip(&dq_dz).zip(&z).map(|((g, dq), zv)| *g * *dq * (F::one() - *zv * *zv)).collect();
        self.stack_backward(&layout.encoder, &enc_cache, &d_zpre, bsz, &mut grads);

        Ok(TrainStep { loss, grads, stats: BatchStats { layers: stats, batch_size: bsz } })
    }

    /// Exponential moving average of BN statistics with the given momentum.
    pub fn update_running_stats(&mut self, stats: &BatchStats<F>, momentum: F) {
        let layout = self.layout();
        let norms = layout.encoder.hidden.iter().chain(&layout.decoder.hidden).map(|(_, n)| n);
        for (n, (mean, var)) in norms.zip(&stats.layers) {
            for o in 0..n.width {
                let rm = &mut self.buffers[n.mean + o];
                *rm = (F::one() - momentum) * *rm + momentum * mean[o];
                if stats.batch_size > 1 {
                    let rv = &mut self.buffers[n.var + o];
                    *rv = (F::one() - momentum) * *rv + momentum * var[o];
                }
            }
        }
    }

    // -----------------------------------------------------------------------
    // Weight file

    /// Serializes to the weight file format: magic, JSON header, f32 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity((self.params.len() + self.buffers.len()) * 4);
        for v in self.params.iter().chain(&self.buffers) {
            payload.extend_from_slice(&v.to_storage().to_le_bytes());
        }
        let header = ModelHeader {
            format: "llec-hyperprior".into(),
            version: MODEL_FORMAT_VERSION,
            architecture: self.arch.clone(),
            param_count: self.params.len(),
            buffer_count: self.buffers.len(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MODEL_MAGIC {
            return Err(Error::Format("not an llec model file".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + hlen).ok_or_else(|| Error::Format("model header truncated".into()))?;
        let header: ModelHeader = serde_json::from_slice(json)?;
        if header.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", header.version)));
        }
        header.architecture.validate()?;
        let layout = Layout::new(&header.architecture);
        if header.param_count != layout.params || header.buffer_count != layout.buffers {
            return Err(Error::Format("model header counts do not match its architecture".into()));
        }
        let payload = &bytes[12 + hlen..];
        if payload.len() != 4 * (layout.params + layout.buffers) {
            return Err(Error::Format(format!("model payload has {} bytes", payload.len())));
        }
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(Error::ModelCorrupt("weight payload hash mismatch".into()));
        }
        let values: Vec<F> =
            payload.chunks_exact(4).map(|c| F::of(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))).collect();
        let (params, buffers) = values.split_at(layout.params);
        let model = Self { arch: header.architecture, params: params.to_vec(), buffers: buffers.to_vec() };
        model.check_finite()?;
        Ok(model)
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// 16-byte identifier: truncated SHA-256 of the serialized weight file.
    pub fn model_id(&self) -> [u8; 16] {
        let digest = Sha256::digest(self.to_bytes());
        digest[..16].try_into().expect("16 bytes")
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn dense_batch<F: Scalar>(params: &[F], d: &Dense, x: &[F], batch: usize) -> Vec<F> {
    let mut y = vec![F::zero(); batch * d.outputs];
    let weights = &params[d.weight..d.weight + d.inputs * d.outputs];
    let bias = &params[d.bias..d.bias + d.outputs];
    for b in 0..batch {
        let xb = &x[b * d.inputs..(b + 1) * d.inputs];
        let yb = &mut y[b * d.outputs..(b + 1) * d.outputs];
        for (o, row) in weights.chunks_exact(d.inputs).enumerate() {
            let mut acc = bias[o];
            for (w, v) in row.iter().zip(xb) {
                acc += *w * *v;
            }
            yb[o] = acc;
        }
    }
    y
}

/// Accumulates weight/bias gradients into `grads` and returns the input gradient.
fn dense_backward<F: Scalar>(params: &[F], d: &Dense, x: &[F], dy: &[F], batch: usize, grads: &mut [F]) -> Vec<F> {
    let mut dx = vec![F::zero(); batch * d.inputs];
    let weights = &params[d.weight..d.weight + d.inputs * d.outputs];
    let (gw, gb) = grads[d.weight..d.bias + d.outputs].split_at_mut(d.inputs * d.outputs);
    for b in 0..batch {
        let xb = &x[b * d.inputs..(b + 1) * d.inputs];
        let dyb = &dy[b * d.outputs..(b + 1) * d.outputs];
        let dxb = &mut dx[b * d.inputs..(b + 1) * d.inputs];
        for o in 0..d.outputs {
            let g = dyb[o];
            if g == F::zero() {
                continue;
            }
            gb[o] += g;
            let grow = &mut gw[o * d.inputs..(o + 1) * d.inputs];
            for (gwi, xi) in grow.iter_mut().zip(xb) {
                *gwi += g * *xi;
            }
            let wrow = &weights[o * d.inputs..(o + 1) * d.inputs];
            for (dxi, wi) in dxb.iter_mut().zip(wrow) {
                *dxi += g * *wi;
            }
        }
    }
    dx
}
