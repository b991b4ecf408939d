//! Segmentation network over the autoencoder's encoder, its Dice + CE loss
//! and the momentum-SGD fine-tuning loop.
//!
//! Decoder layout, with `D` the encoder width and stride measured in voxels:
//!
//! ```text
//! final tokens  (stride 8, D)  -> conv3 -> GELU -> up x2 ─┐
//! middle block  (stride 8, D)  -> conv1 -> up x2 ─────────┴ concat -> conv3 -> GELU (stride 4)
//!   -> up x4 -> concat input intensities -> conv3 -> class logits (stride 1)
//! ```

use serde::{Deserialize, Serialize};

use crate::attention::{patch_embed, AttentionConfig, Linear, SwVit};
use crate::error::{contract, AsaError, Result};
use crate::optim::{sgd_step, SgdConfig};
use crate::params::{ParamId, ParamStore};
use crate::patching::{patchify, PatchGrid};
use crate::position::{EncodingKind, EncodingTable};
use crate::rng::derive_seed;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{xavier_uniform, Tensor};
use crate::volume::{augment, Volume};

pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub dims: [usize; 3],
    pub patch: usize,
    pub encoder: AttentionConfig,
    pub encoding: EncodingKind,
    pub n_classes: usize,
    /// Channels after the stride-8 stage.
    pub c1: usize,
    /// Channels after the stride-4 stage.
    pub c2: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            patch: 8,
            encoder: AttentionConfig::default(),
            encoding: EncodingKind::Spe,
            n_classes: 3,
            c1: 16,
            c2: 8,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        PatchGrid::for_dims(self.dims, self.patch)?;
        self.encoder.validate()?;
        if self.patch % 4 != 0 {
            return Err(AsaError::Config(format!("patch size {} must be a multiple of 4", self.patch)));
        }
        if self.n_classes < 2 || self.n_classes > 255 {
            return Err(AsaError::Config(format!("n_classes {} outside [2, 255]", self.n_classes)));
        }
        if self.c1 == 0 || self.c2 == 0 {
            return Err(AsaError::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, seed: u64) -> Result<Self> {
        let w = store.add(format!("{name}.w"), xavier_uniform(&[c_out, c_in, k, k, k], seed)?);
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![c_out]));
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv3d(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub cfg: SegConfig,
    pub grid: PatchGrid,
    pub store: ParamStore,
    pub embed: Linear,
    pub encoder: SwVit,
    pub table: EncodingTable,
    pub deep: Conv,
    pub skip: Conv,
    pub fuse: Conv,
    pub classify: Conv,
}

/// Parameter-name prefixes shared with [`crate::asa::AsaModel`].
pub const ENCODER_PREFIXES: [&str; 2] = ["patch_embed.", "encoder."];

impl SegModel {
    pub fn new(cfg: SegConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let grid = PatchGrid::for_dims(cfg.dims, cfg.patch)?;
        let d = cfg.encoder.dim;
        let mut store = ParamStore::new();
        let embed = Linear::new(&mut store, "patch_embed", grid.patch_len(), d, derive_seed(seed, &[0]))?;
        let encoder = SwVit::new(&mut store, "encoder", cfg.encoder, derive_seed(seed, &[1]))?;
        let deep = Conv::new(&mut store, "seg.deep", d, cfg.c1, 3, derive_seed(seed, &[2]))?;
        let skip = Conv::new(&mut store, "seg.skip", d, cfg.c1, 1, derive_seed(seed, &[3]))?;
        let fuse = Conv::new(&mut store, "seg.fuse", 2 * cfg.c1, cfg.c2, 3, derive_seed(seed, &[4]))?;
        let classify = Conv::new(&mut store, "seg.classify", cfg.c2 + 1, cfg.n_classes, 3, derive_seed(seed, &[5]))?;
        let table = EncodingTable::new(cfg.encoding, grid.grid, d)?;
        Ok(Self { cfg, grid, store, embed, encoder, table, deep, skip, fuse, classify })
    }

    /// Copies the patch embedding and encoder weights from a pretrained store.
    pub fn load_encoder(&mut self, pretrained: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for prefix in ENCODER_PREFIXES {
            n += self.store.load_matching(pretrained, prefix)?;
        }
        Ok(n)
    }

    /// Freezes or unfreezes the encoder.
    pub fn set_encoder_trainable(&mut self, trainable: bool) {
        for prefix in ENCODER_PREFIXES {
            self.store.set_trainable(prefix, trainable);
        }
    }

    /// Index of the block whose output feeds the skip path (0-based).
    pub fn tap_block(&self) -> Option<usize> {
        let depth = self.cfg.encoder.depth;
        (depth > 0).then(|| depth.div_ceil(2) - 1)
    }

    /// Class logits `[n_classes, T, H, W]`.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, v: &Volume) -> Result<Var> {
        if v.dims != self.cfg.dims {
            return Err(contract(format!("volume dims {:?} differ from model dims {:?}", v.dims, self.cfg.dims)));
        }
        let (_, patches) = patchify(v, self.cfg.patch)?;
        let n = self.grid.n_patches();
        let d = self.cfg.encoder.dim;
        let data = patches.iter().flat_map(|p| p.iter().map(|&x| x as f64)).collect();
        let x = tape.constant(Tensor::new(vec![n, self.grid.patch_len()], data));
        let tokens = patch_embed(tape, store, x, &self.embed)?;
        let pos = tape.constant(Tensor::new(vec![n, d], self.table.rows.clone()));
        let tokens = tape.add(tokens, pos);
        let out = self.encoder.forward_with_taps(tape, store, tokens)?;
        let mid = self.tap_block().map_or(out.tokens, |b| out.block_outputs[b]);

        let [gt, gh, gw] = self.grid.grid;
        let to_map = |tape: &mut Tape, t: Var| {
            let t = tape.transpose(t);
            tape.reshape(t, &[d, gt, gh, gw])
        };
        let deep = to_map(tape, out.tokens);
        let deep = self.deep.forward(tape, store, deep);
        let deep = tape.gelu(deep);
        let deep = tape.upsample(deep, 2);
        let skip = to_map(tape, mid);
        let skip = self.skip.forward(tape, store, skip);
        let skip = tape.upsample(skip, 2);
        let merged = tape.concat0(&[deep, skip]);
        let fused = self.fuse.forward(tape, store, merged);
        let fused = tape.gelu(fused);
        let full = tape.upsample(fused, self.cfg.patch / 2);
        let [t, h, w] = v.dims;
        let raw = tape.constant(Tensor::new(vec![1, t, h, w], v.voxels.iter().map(|&x| x as f64).collect()));
        let stacked = tape.concat0(&[full, raw]);
        Ok(self.classify.forward(tape, store, stacked))
    }

    pub fn forward(&self, tape: &mut Tape, v: &Volume) -> Result<Var> {
        self.forward_with(tape, &self.store, v)
    }

    /// Argmax labels per voxel (lowest class wins ties).
    pub fn predict(&self, v: &Volume) -> Result<Vec<u8>> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, v)?;
        Ok(argmax_labels(tape.data(logits), self.cfg.n_classes))
    }
}

/// Argmax over the leading class axis of `[C, voxels…]` logits.
pub fn argmax_labels(logits: &[f64], n_classes: usize) -> Vec<u8> {
    let n = logits.len() / n_classes;
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..n_classes {
                if logits[c * n + i] > logits[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Mean voxel cross-entropy plus `1 −` mean soft Dice over foreground
/// classes. `logits` is `[C, T, H, W]`.
///
/// A foreground class missing from both the labels and the argmax
/// prediction scores a Dice of exactly 1, so it adds nothing to the loss.
pub fn dice_ce_loss(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() < 2 {
        return Err(contract(format!("logits must be [C, ...], got {shape:?}")));
    }
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    if labels.len() != n {
        return Err(contract(format!("{} labels for {n} voxels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(contract(format!("label {bad} out of range for {c} classes")));
    }
    let predicted = argmax_labels(tape.data(logits), c);
    let mut onehot = vec![0.0; n * c];
    let mut counts = vec![0.0; c];
    let mut present = vec![false; c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l as usize] = 1.0;
        counts[l as usize] += 1.0;
        present[l as usize] = true;
        present[predicted[i] as usize] = true;
    }
    let flat = tape.reshape(logits, &[c, n]);
    let rows = tape.transpose(flat);
    let y = tape.constant(Tensor::new(vec![n, c], onehot));

    let logp = tape.log_softmax(rows, 1);
    let picked = tape.mul(logp, y);
    let total = tape.sum(picked);
    let ce = tape.scale(total, -1.0 / n as f64);
    if c < 2 {
        return Ok(ce);
    }

    let probs = tape.softmax(rows, 1);
    let inter = tape.mul(probs, y);
    let inter = tape.sum_axis(inter, 0);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_SMOOTH);
    let psum = tape.sum_axis(probs, 0);
    let ysum = tape.constant(Tensor::new(vec![c], counts));
    let den = tape.add(psum, ysum);
    let den = tape.add_scalar(den, DICE_SMOOTH);
    let dice = tape.div(num, den);
    let live: Vec<usize> = (1..c).filter(|&k| present[k]).collect();
    // absent classes contribute a Dice of 1 each
    let absent = (c - 1 - live.len()) as f64;
    let dice_sum = if live.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let kept = tape.gather_rows(dice, &live);
        tape.sum(kept)
    };
    let mean_dice = tape.add_scalar(dice_sum, absent);
    let mean_dice = tape.scale(mean_dice, 1.0 / (c - 1) as f64);
    let loss = tape.sub(ce, mean_dice);
    Ok(tape.add_scalar(loss, 1.0))
}

/// Momentum state carried between fine-tuning steps.
#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub sgd: SgdConfig,
    pub velocity: Vec<Vec<f64>>,
    /// Number of completed steps.
    pub step: usize,
    pub seed: u64,
    pub augment: bool,
}

impl FinetuneState {
    pub fn new(model: &SegModel, sgd: SgdConfig, seed: u64) -> Self {
        let velocity = model.store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self { sgd, velocity, step: 0, seed, augment: true }
    }
}

/// Loss and gradients of one labelled volume.
pub fn seg_volume_loss(model: &SegModel, v: &Volume) -> Result<(f64, Gradients)> {
    let Some(labels) = v.labels.as_ref() else {
        return Err(contract("fine-tuning needs labelled volumes"));
    };
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, v)?;
    let loss = dice_ce_loss(&mut tape, logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok((tape.item(loss), grads))
}

/// One momentum-SGD step on the mean loss over `batch`. Each volume is
/// augmented with a seed derived from `(state.seed, step, position)`.
pub fn finetune_step(model: &mut SegModel, state: &mut FinetuneState, batch: &[Volume]) -> Result<f64> {
    if batch.is_empty() {
        return Err(contract("fine-tuning batch is empty"));
    }
    let step = state.step;
    let scale = 1.0 / batch.len() as f64;
    model.store.zero_grad();
    let mut total = 0.0;
    for (j, v) in batch.iter().enumerate() {
        let input = if state.augment { augment(v, derive_seed(state.seed, &[step as u64, j as u64])) } else { v.clone() };
        let (loss, grads) = seg_volume_loss(model, &input)?;
        if !loss.is_finite() {
            return Err(AsaError::Training { step, detail: format!("loss {loss} on volume {j}") });
        }
        model.store.accumulate(&grads, scale);
        total += loss * scale;
    }
    let lr = state.sgd.lr_at(step);
    sgd_step(&mut model.store, &mut state.velocity, &state.sgd, lr)?;
    if model.store.iter().any(|p| !p.tensor.is_finite()) {
        return Err(AsaError::Training { step, detail: "parameters became non-finite".into() });
    }
    state.step += 1;
    Ok(total)
}
