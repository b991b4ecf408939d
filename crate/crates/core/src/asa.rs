//! The masked autoencoder: encoder over visible patches, a shared mask
//! token, decoder over the full patch sequence, and the informativeness
//! weighted reconstruction loss.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{patch_embed, AttentionConfig, Linear, SwVit};
use crate::error::{contract, AsaError, Result};
use crate::informativeness::{informativeness_weights, DEFAULT_BINS};
use crate::optim::{adamw_step, lr_at, AdamState, OptimizerConfig};
use crate::params::{ParamId, ParamStore};
use crate::patching::{make_mask_plan, patchify, unpatchify, MaskPlan, PatchGrid};
use crate::position::{EncodingKind, EncodingTable};
use crate::rng::{derive_seed, rng_from};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::volume::Volume;

/// How masked patches are weighted in the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Weights `p_i` from the gradient-orientation histograms.
    Attentive,
    /// `1/N` for every masked patch.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsaConfig {
    pub dims: [usize; 3],
    pub patch: usize,
    pub mask_ratio: f64,
    pub bins: usize,
    pub encoder: AttentionConfig,
    pub decoder: AttentionConfig,
    pub encoding: EncodingKind,
    pub loss: LossKind,
}

impl Default for AsaConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            patch: 8,
            mask_ratio: 0.75,
            bins: DEFAULT_BINS,
            encoder: AttentionConfig::default(),
            decoder: AttentionConfig { dim: 32, n_heads: 4, window: 16, depth: 2, mlp_ratio: 4 },
            encoding: EncodingKind::Spe,
            loss: LossKind::Attentive,
        }
    }
}

impl AsaConfig {
    pub fn validate(&self) -> Result<()> {
        PatchGrid::for_dims(self.dims, self.patch)?;
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(AsaError::Config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.bins < 2 {
            return Err(AsaError::Config(format!("bins {} must be at least 2", self.bins)));
        }
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.dim % 2 != 0 || self.decoder.dim % 2 != 0 {
            return Err(AsaError::Config("position encodings need even model dimensions".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::for_dims(self.dims, self.patch)
    }
}

/// Parameter handles plus the fixed position tables.
#[derive(Debug, Clone)]
pub struct AsaModel {
    pub cfg: AsaConfig,
    pub grid: PatchGrid,
    pub store: ParamStore,
    pub embed: Linear,
    pub encoder: SwVit,
    pub enc_to_dec: Linear,
    pub mask_token: ParamId,
    pub decoder: SwVit,
    pub head: Linear,
    /// Encoding added to patch embeddings (dimension `D`).
    pub enc_table: EncodingTable,
    /// Encoding added to mask tokens (dimension `D'`).
    pub dec_table: EncodingTable,
}

pub const MASK_TOKEN_STD: f64 = 0.02;

impl AsaModel {
    pub fn new(cfg: AsaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let (d, d2) = (cfg.encoder.dim, cfg.decoder.dim);
        let mut store = ParamStore::new();
        let embed = Linear::new(&mut store, "patch_embed", grid.patch_len(), d, derive_seed(seed, &[0]))?;
        let encoder = SwVit::new(&mut store, "encoder", cfg.encoder, derive_seed(seed, &[1]))?;
        let enc_to_dec = Linear::new(&mut store, "enc_to_dec", d, d2, derive_seed(seed, &[2]))?;
        let normal = Normal::new(0.0, MASK_TOKEN_STD).expect("valid std");
        let mut rng = rng_from(derive_seed(seed, &[3]));
        let token = (0..d2).map(|_| normal.sample(&mut rng)).collect();
        let mask_token = store.add("mask_token", Tensor::new(vec![d2], token));
        let decoder = SwVit::new(&mut store, "decoder", cfg.decoder, derive_seed(seed, &[4]))?;
        let head = Linear::new(&mut store, "head", d2, grid.patch_len(), derive_seed(seed, &[5]))?;
        let enc_table = EncodingTable::new(cfg.encoding, grid.grid, d)?;
        let dec_table = EncodingTable::new(cfg.encoding, grid.grid, d2)?;
        Ok(Self { cfg, grid, store, embed, encoder, enc_to_dec, mask_token, decoder, head, enc_table, dec_table })
    }

    fn check(&self, v: &Volume, plan: &MaskPlan) -> Result<Vec<Vec<f32>>> {
        if v.dims != self.cfg.dims {
            return Err(contract(format!("volume dims {:?} differ from model dims {:?}", v.dims, self.cfg.dims)));
        }
        if plan.n_patches() != self.grid.n_patches() {
            return Err(contract(format!(
                "plan covers {} patches, grid has {}",
                plan.n_patches(),
                self.grid.n_patches()
            )));
        }
        if plan.visible.is_empty() {
            return Err(contract("the encoder needs at least one visible patch"));
        }
        Ok(patchify(v, self.cfg.patch)?.1)
    }

    /// Reconstructions for every patch, `[n_patches, s³]`, on `tape`.
    /// Parameters are read from `store`, which must share this model's layout.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, v: &Volume, plan: &MaskPlan) -> Result<Var> {
        let patches = self.check(v, plan)?;
        let len = self.grid.patch_len();
        let (d, d2) = (self.cfg.encoder.dim, self.cfg.decoder.dim);
        let n_vis = plan.visible.len();

        let vis_data = plan.visible.iter().flat_map(|&i| patches[i].iter().map(|&x| x as f64)).collect();
        let vis = tape.constant(Tensor::new(vec![n_vis, len], vis_data));
        let tokens = patch_embed(tape, store, vis, &self.embed)?;
        let pos = tape.constant(Tensor::new(vec![n_vis, d], self.enc_table.gather(&plan.visible)));
        let tokens = tape.add(tokens, pos);
        let encoded = self.encoder.forward(tape, store, tokens)?;
        let projected = self.enc_to_dec.forward(tape, store, encoded);

        let mut parts = vec![projected];
        if !plan.masked.is_empty() {
            let n_mask = plan.masked.len();
            let pos = tape.constant(Tensor::new(vec![n_mask, d2], self.dec_table.gather(&plan.masked)));
            let token = tape.param(store, self.mask_token);
            parts.push(tape.add_bias(pos, token));
        }
        let stacked = tape.concat0(&parts);
        // `stacked` holds visible then masked rows; put them back in patch order.
        let mut slot = vec![0; self.grid.n_patches()];
        for (k, &p) in plan.visible.iter().chain(&plan.masked).enumerate() {
            slot[p] = k;
        }
        let full = tape.gather_rows(stacked, &slot);
        let decoded = self.decoder.forward(tape, store, full)?;
        Ok(self.head.forward(tape, store, decoded))
    }

    pub fn forward(&self, tape: &mut Tape, v: &Volume, plan: &MaskPlan) -> Result<Var> {
        self.forward_with(tape, &self.store, v, plan)
    }

    /// Per-patch reconstructions as plain vectors.
    pub fn reconstruct_patches(&self, v: &Volume, plan: &MaskPlan) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, v, plan)?;
        Ok(tape.data(out).chunks(self.grid.patch_len()).map(<[f64]>::to_vec).collect())
    }

    /// Loss weights over `plan.masked` for the configured loss kind.
    pub fn loss_weights(&self, v: &Volume, plan: &MaskPlan) -> Result<Vec<f64>> {
        loss_weights(self.cfg.loss, v, &self.grid, plan, self.cfg.bins)
    }
}

pub fn loss_weights(kind: LossKind, v: &Volume, grid: &PatchGrid, plan: &MaskPlan, bins: usize) -> Result<Vec<f64>> {
    match kind {
        LossKind::Attentive => Ok(informativeness_weights(v, grid, plan, bins)?.weights),
        LossKind::Uniform => {
            if plan.masked.is_empty() {
                return Err(contract("loss weights need at least one masked patch"));
            }
            Ok(vec![1.0 / plan.masked.len() as f64; plan.masked.len()])
        }
    }
}

fn check_weights(plan: &MaskPlan, weights: &[f64]) -> Result<()> {
    if weights.len() != plan.masked.len() {
        return Err(contract(format!("{} weights for {} masked patches", weights.len(), plan.masked.len())));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(contract(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// `Σ_{i∈masked} p_i · mean_j (X_ij − Y_ij)²` on the tape. `recon` is
/// `[n_patches, M]`; the weights enter as constants.
pub fn ar_loss(tape: &mut Tape, recon: Var, targets: &[Vec<f32>], plan: &MaskPlan, weights: &[f64]) -> Result<Var> {
    check_weights(plan, weights)?;
    let shape = tape.shape(recon).to_vec();
    if shape.len() != 2 || shape[0] != plan.n_patches() || targets.len() != shape[0] {
        return Err(contract(format!("reconstruction {shape:?} does not match plan/targets")));
    }
    let m = shape[1];
    if targets.iter().any(|t| t.len() != m) {
        return Err(contract("target patch length differs from reconstruction"));
    }
    let n = plan.masked.len();
    let x = tape.gather_rows(recon, &plan.masked);
    let y_data = plan.masked.iter().flat_map(|&i| targets[i].iter().map(|&v| v as f64)).collect();
    let y = tape.constant(Tensor::new(vec![n, m], y_data));
    let diff = tape.sub(x, y);
    let sq = tape.square(diff);
    let per_patch = tape.sum_axis(sq, 1);
    let mse = tape.scale(per_patch, 1.0 / m as f64);
    let p = tape.constant(Tensor::new(vec![n], weights.to_vec()));
    let weighted = tape.mul(mse, p);
    Ok(tape.sum(weighted))
}

/// Plain evaluation of the same loss, plus each masked patch's contribution.
pub fn ar_loss_values(recon: &[Vec<f64>], targets: &[Vec<f32>], plan: &MaskPlan, weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_weights(plan, weights)?;
    if recon.len() != plan.n_patches() || targets.len() != recon.len() {
        return Err(contract("reconstruction count does not match plan/targets"));
    }
    let mut parts = Vec::with_capacity(plan.masked.len());
    for (&i, &p) in plan.masked.iter().zip(weights) {
        let (x, y) = (&recon[i], &targets[i]);
        if x.len() != y.len() {
            return Err(contract("target patch length differs from reconstruction"));
        }
        let sse: f64 = x.iter().zip(y).map(|(a, &b)| (a - b as f64) * (a - b as f64)).sum();
        parts.push(p * sse / x.len() as f64);
    }
    Ok((parts.iter().sum(), parts))
}

/// Masked patches replaced by their reconstructions, visible patches copied.
pub fn reconstruct_volume(model: &AsaModel, v: &Volume, plan: &MaskPlan) -> Result<Volume> {
    let (grid, mut patches) = patchify(v, model.cfg.patch)?;
    if !plan.masked.is_empty() {
        let recon = model.reconstruct_patches(v, plan)?;
        for &i in &plan.masked {
            patches[i] = recon[i].iter().map(|&x| x as f32).collect();
        }
    } else {
        model.check(v, plan)?;
    }
    let mut out = unpatchify(&patches, &grid)?;
    out.labels = v.labels.clone();
    Ok(out)
}

/// Seed of the mask plan for volume `index` at `step`.
pub fn plan_seed(global: u64, step: usize, index: usize) -> u64 {
    derive_seed(global, &[step as u64, index as u64])
}

/// Optimizer state carried between pretraining steps.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub opt: OptimizerConfig,
    pub adam: AdamState,
    /// Number of completed steps.
    pub step: usize,
    pub seed: u64,
}

impl PretrainState {
    pub fn new(model: &AsaModel, opt: OptimizerConfig, seed: u64) -> Result<Self> {
        opt.validate()?;
        Ok(Self { opt, adam: AdamState::for_store(&model.store), step: 0, seed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Loss of `model` on one volume under `plan`, with its gradients.
pub fn volume_loss(model: &AsaModel, v: &Volume, plan: &MaskPlan) -> Result<(f64, crate::tape::Gradients)> {
    let weights = model.loss_weights(v, plan)?;
    let targets = patchify(v, model.cfg.patch)?.1;
    let mut tape = Tape::new();
    let recon = model.forward(&mut tape, v, plan)?;
    let loss = ar_loss(&mut tape, recon, &targets, plan, &weights)?;
    let grads = tape.backward(loss)?;
    Ok((tape.item(loss), grads))
}

/// One optimizer step on the mean loss over `batch`. The mask plan of each
/// volume is re-drawn from `(state.seed, step, position in batch)`.
pub fn pretrain_step(model: &mut AsaModel, state: &mut PretrainState, batch: &[Volume]) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(contract("pretraining batch is empty"));
    }
    let step = state.step;
    let scale = 1.0 / batch.len() as f64;
    model.store.zero_grad();
    let mut total = 0.0;
    for (j, v) in batch.iter().enumerate() {
        let plan = make_mask_plan(model.grid.n_patches(), model.cfg.mask_ratio, plan_seed(state.seed, step, j))?;
        let (loss, grads) = volume_loss(model, v, &plan)?;
        if !loss.is_finite() {
            return Err(AsaError::Training { step, detail: format!("loss {loss} on volume {j}") });
        }
        model.store.accumulate(&grads, scale);
        total += loss * scale;
    }
    let lr = lr_at(step, &state.opt);
    adamw_step(&mut model.store, &mut state.adam, &state.opt, lr, step + 1)?;
    if model.store.iter().any(|p| !p.tensor.is_finite()) {
        return Err(AsaError::Training { step, detail: "parameters became non-finite".into() });
    }
    state.step += 1;
    Ok(StepReport { step, lr, loss: total })
}

/// Volumes used at `step` when cycling through `data` in batches of `batch`.
pub fn batch_at(data: &[Volume], step: usize, batch: usize) -> Vec<Volume> {
    (0..batch).map(|j| data[(step * batch + j) % data.len()].clone()).collect()
}
