//! Tile dataset construction and Adam training of the hyperprior.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_io::EventStream;
use crate::hyperprior::{HyperpriorModel, QuantMode, Tile, BN_MOMENTUM, TILE_LEN};
use crate::octree::{build_occupancy, compute_depth};
use crate::preprocess::{segment_stream, PreprocessConfig, SegmentKey};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub train_tile_target: usize,
    pub rng_seed: u64,
    pub quant_mode: QuantMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 5,
            batch_size: 512,
            max_epochs: 100,
            early_stop_patience: 10,
            train_tile_target: 110_000,
            rng_seed: 0,
            quant_mode: QuantMode::Soft,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.lr_decay_factor > 0.0
            && self.lr_decay_every > 0
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.early_stop_patience > 0;
        if !positive {
            return Err(Error::InvalidArgument("training hyperparameters must be positive".into()));
        }
        Ok(())
    }

    /// Step schedule: `lr * decay^(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Where a training tile came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileOrigin {
    pub sequence: usize,
    pub segment: SegmentKey,
    pub tile_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TileDataset {
    pub tiles: Vec<Tile>,
    pub provenance: Vec<TileOrigin>,
}

impl TileDataset {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

fn segment_tiles(stream: &EventStream, cfg: &PreprocessConfig) -> Result<Vec<(SegmentKey, Vec<u8>)>> {
    let params = compute_depth(u64::from(stream.width), u64::from(stream.height), cfg.segment_len)?;
    segment_stream(stream, cfg)
        .segments
        .into_iter()
        .map(|seg| Ok((seg.key, build_occupancy(&seg.points, params)?.bytes)))
        .collect()
}

/// Samples segments at random across `streams` and collects their full tiles.
///
/// Segments are visited in a seeded random order; each contributes all of its
/// complete tiles (a trailing partial tile is dropped) until at least
/// `target` tiles are collected, and the result is truncated to `target`.
pub fn build_dataset(streams: &[EventStream], cfg: &PreprocessConfig, target: usize, seed: u64) -> Result<TileDataset> {
    cfg.validate()?;
    if streams.iter().all(EventStream::is_empty) {
        return Err(Error::InvalidArgument("no events to build a dataset from".into()));
    }
    let mut out = TileDataset::default();
    if target == 0 {
        return Ok(out);
    }
    let mut pool = Vec::new();
    for (sequence, stream) in streams.iter().enumerate() {
        let segs = segment_stream(stream, cfg).segments;
        pool.extend(segs.into_iter().map(|s| (sequence, s)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    for (sequence, seg) in pool {
        let stream = &streams[sequence];
        let params = compute_depth(u64::from(stream.width), u64::from(stream.height), cfg.segment_len)?;
        let bytes = build_occupancy(&seg.points, params)?.bytes;
        for (tile_index, chunk) in bytes.chunks_exact(TILE_LEN).enumerate() {
            out.tiles.push(Tile::full(chunk.to_vec()));
            out.provenance.push(TileOrigin { sequence, segment: seg.key, tile_index });
        }
        if out.tiles.len() >= target {
            out.tiles.truncate(target);
            out.provenance.truncate(target);
            return Ok(out);
        }
    }
    Err(Error::InsufficientData { requested: target, available: out.tiles.len() })
}

/// Every full tile of every stream, in stream/segment order.
pub fn collect_tiles(streams: &[EventStream], cfg: &PreprocessConfig) -> Result<TileDataset> {
    let mut out = TileDataset::default();
    for (sequence, stream) in streams.iter().enumerate() {
        for (key, bytes) in segment_tiles(stream, cfg)? {
            for (tile_index, chunk) in bytes.chunks_exact(TILE_LEN).enumerate() {
                out.tiles.push(Tile::full(chunk.to_vec()));
                out.provenance.push(TileOrigin { sequence, segment: key, tile_index });
            }
        }
    }
    Ok(out)
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub step: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1: F::of(beta1),
            beta2: F::of(beta2),
            eps: F::of(eps),
            step: 0,
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
        }
    }

    pub fn update(&mut self, params: &mut [F], grads: &[F], lr: F) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (F::one() - self.beta1) * g;
            *v = self.beta2 * *v + (F::one() - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Outcome of feeding one validation loss to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to beat the best loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if loss >= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, loss));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|r| r.val_loss).reduce(f64::min)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,learning_rate,train_loss,val_loss")?;
        for r in &self.epochs {
            writeln!(w, "{},{:e},{},{}", r.epoch, r.learning_rate, r.train_loss, r.val_loss)?;
        }
        Ok(())
    }
}

/// Training loop state; holds the model being optimized.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub cfg: TrainConfig,
    pub model: HyperpriorModel<F>,
    pub adam: Adam<F>,
    pub history: History,
    rng: ChaCha8Rng,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: HyperpriorModel<F>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.params.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        Ok(Self { cfg, model, adam, history: History::default(), rng })
    }

    /// One pass over `train`; returns the size-weighted mean training loss.
    pub fn run_epoch(&mut self, train: &[Tile], epoch: usize) -> Result<f64> {
        let lr = F::of(self.cfg.lr_at(epoch));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let momentum = F::of(BN_MOMENTUM);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            // a lone sample has no batch statistics
            if chunk.len() < 2 && train.len() > 1 {
                continue;
            }
            let batch: Vec<&Tile> = chunk.iter().map(|&i| &train[i]).collect();
            let step = self.model.forward_backward(&batch, self.cfg.quant_mode)?;
            if step.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient at epoch {epoch}")));
            }
            self.adam.update(&mut self.model.params, &step.grads, lr);
            self.model.update_running_stats(&step.stats, momentum);
            total += step.loss.as_f64() * batch.len() as f64;
            seen += batch.len();
        }
        self.model.check_finite().map_err(|e| Error::Training(format!("diverged at epoch {epoch}: {e}")))?;
        Ok(total / seen.max(1) as f64)
    }

    /// Trains until `max_epochs` or early stopping; returns the best-validation weights.
    pub fn fit(&mut self, train: &[Tile], val: &[Tile]) -> Result<HyperpriorModel<F>> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
        }
        let mut stopper = EarlyStopping::new(self.cfg.early_stop_patience);
        let mut best: Option<HyperpriorModel<F>> = None;
        for epoch in 0..self.cfg.max_epochs {
            let train_loss = self.run_epoch(train, epoch)?;
            let mut snapshot = self.model.clone();
            snapshot.snap_to_storage();
            let val_loss = snapshot.evaluate(val)?;
            if !train_loss.is_finite() || !val_loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged at epoch {epoch} (train {train_loss}, val {val_loss})"
                )));
            }
            let lr = self.cfg.lr_at(epoch);
            log::info!("epoch {epoch:3}  lr {lr:.1e}  train {train_loss:.4}  val {val_loss:.4} bits/symbol");
            self.history.epochs.push(EpochRecord { epoch, learning_rate: lr, train_loss, val_loss });
            match stopper.observe(epoch, val_loss) {
                StopDecision::Improved => {
                    self.history.best_epoch = Some(epoch);
                    best = Some(snapshot);
                }
                StopDecision::Continue => {}
                StopDecision::Stop => {
                    self.history.stopped_early = true;
                    break;
                }
            }
        }
        Ok(best.expect("at least one epoch ran"))
    }
}

/// Trains `model` and returns the best-validation weights with the loss history.
pub fn train<F: Scalar>(
    model: HyperpriorModel<F>,
    train_set: &TileDataset,
    val_set: &TileDataset,
    cfg: &TrainConfig,
) -> Result<(HyperpriorModel<F>, History)> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let best = trainer.fit(&train_set.tiles, &val_set.tiles)?;
    Ok((best, trainer.history))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LLECCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    epochs_done: usize,
    values: usize,
}

/// Serializes model weights followed by the Adam moment estimates.
pub fn save_checkpoint<F: Scalar>(trainer: &Trainer<F>) -> Vec<u8> {
    let model = trainer.model.to_bytes();
    let header = serde_json::to_vec(&OptimizerHeader {
        step: trainer.adam.step,
        epochs_done: trainer.history.epochs.len(),
        values: trainer.adam.m.len(),
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(model.len() as u64).to_le_bytes());
    out.extend_from_slice(&model);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in trainer.adam.m.iter().chain(&trainer.adam.v) {
        out.extend_from_slice(&v.to_storage().to_le_bytes());
    }
    out
}

/// Restores model weights and optimizer moments from [`save_checkpoint`] output.
pub fn load_checkpoint<F: Scalar>(bytes: &[u8], cfg: TrainConfig) -> Result<(Trainer<F>, usize)> {
    let bad = || Error::Format("truncated checkpoint".into());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an llec checkpoint".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let model_bytes = bytes.get(16..16 + mlen).ok_or_else(bad)?;
    let model = HyperpriorModel::<F>::from_bytes(model_bytes)?;
    let rest = &bytes[16 + mlen..];
    let hlen = u32::from_le_bytes(rest.get(..4).ok_or_else(bad)?.try_into().expect("4 bytes")) as usize;
    let header: OptimizerHeader = serde_json::from_slice(rest.get(4..4 + hlen).ok_or_else(bad)?)?;
    let values = &rest[4 + hlen..];
    if header.values != model.params.len() || values.len() != 8 * header.values {
        return Err(Error::Format("optimizer state does not match model".into()));
    }
    let floats: Vec<F> =
        values.chunks_exact(4).map(|c| F::of(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))).collect();
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.adam.step = header.step;
    trainer.adam.m = floats[..header.values].to_vec();
    trainer.adam.v = floats[header.values..].to_vec();
    Ok((trainer, header.epochs_done))
}
