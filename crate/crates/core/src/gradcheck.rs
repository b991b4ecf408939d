//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Non-scalar outputs are reduced to `sum(out · R)` with a fixed random `R`
//! so every output element takes part in the check.

use rand::Rng;

use crate::asa::{ar_loss, AsaConfig, AsaModel, LossKind};
use crate::attention::{
    lw_msa, patch_embed, slw_msa, transformer_block, AttentionConfig, BlockWeights, Linear, MsaWeights, SwVit,
};
use crate::error::Result;
use crate::params::ParamStore;
use crate::patching::{make_mask_plan, patchify};
use crate::position::EncodingKind;
use crate::rng::{derive_seed, rng_from};
use crate::seg::{dice_ce_loss, SegConfig, SegModel};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::volume::Volume;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Denominator floor, so entries with a vanishing gradient compare absolutely.
    pub floor: f64,
    /// Entries sampled per tensor; 0 checks every entry.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-5, floor: 1e-6, max_entries: 0, seed: 0 }
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

impl GradCheck {
    fn project(&self, tape: &mut Tape, out: Var) -> Var {
        let r = random_tensor(tape.shape(out), derive_seed(self.seed, &[0x5052_4f4a]));
        let r = tape.constant(r);
        let prod = tape.mul(out, r);
        tape.sum(prod)
    }

    fn entries(&self, len: usize, salt: u64) -> Vec<usize> {
        if self.max_entries == 0 || len <= self.max_entries {
            return (0..len).collect();
        }
        let mut rng = rng_from(derive_seed(self.seed, &[salt]));
        let mut picked: Vec<usize> = (0..self.max_entries).map(|_| rng.random_range(0..len)).collect();
        picked.sort_unstable();
        picked.dedup();
        picked
    }

    /// Checks `f` with respect to each of `inputs`.
    pub fn check_fn(
        &self,
        name: &str,
        inputs: &[Tensor],
        f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) -> Result<GradReport> {
        let eval = |vals: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            let loss = self.project(&mut tape, out);
            Ok(tape.item(loss))
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = self.project(&mut tape, out);
        let grads = tape.backward(loss)?;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v);
            for i in self.entries(inputs[k].numel(), k as u64) {
                let mut vals = inputs.to_vec();
                vals[k].data[i] += self.eps;
                let up = eval(&vals)?;
                vals[k].data[i] -= 2.0 * self.eps;
                let down = eval(&vals)?;
                let numeric = (up - down) / (2.0 * self.eps);
                worst = worst.max(rel_err(analytic[i], numeric, self.floor));
                checked += 1;
            }
        }
        Ok(GradReport { name: name.into(), max_rel_err: worst, tolerance: 0.0, checked })
    }

    /// Checks `f` with respect to every trainable parameter of `store`.
    pub fn check_params(
        &self,
        name: &str,
        store: &ParamStore,
        f: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
    ) -> Result<GradReport> {
        let eval = |s: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new();
            let out = f(&mut tape, s)?;
            let loss = self.project(&mut tape, out);
            Ok(tape.item(loss))
        };
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        let loss = self.project(&mut tape, out);
        let grads = tape.backward(loss)?;
        let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for (id, g) in grads.params() {
            analytic[id.index()] = Some(g);
        }
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        let mut probe = store.clone();
        for id in store.ids() {
            if !store.get(id).requires_grad {
                continue;
            }
            let n = store.get(id).numel();
            let zeros = vec![0.0; n];
            let a = analytic[id.index()].as_ref().unwrap_or(&zeros);
            for i in self.entries(n, id.index() as u64) {
                let orig = store.get(id).data[i];
                probe.get_mut(id).data[i] = orig + self.eps;
                let up = eval(&probe)?;
                probe.get_mut(id).data[i] = orig - self.eps;
                let down = eval(&probe)?;
                probe.get_mut(id).data[i] = orig;
                let numeric = (up - down) / (2.0 * self.eps);
                worst = worst.max(rel_err(a[i], numeric, self.floor));
                checked += 1;
            }
        }
        Ok(GradReport { name: name.into(), max_rel_err: worst, tolerance: 0.0, checked })
    }
}

fn with_tol(r: Result<GradReport>, tol: f64) -> Result<GradReport> {
    r.map(|g| GradReport { tolerance: tol, ..g })
}

/// Tolerance for single primitives and layers.
pub const LAYER_TOL: f64 = 1e-4;
/// Tolerance for the full models.
pub const MODEL_TOL: f64 = 1e-3;

fn positive_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut t = random_tensor(shape, seed);
    t.data.iter_mut().for_each(|v| *v = 0.5 + v.abs());
    t
}

/// Every primitive on random inputs.
pub fn primitive_suite(gc: &GradCheck) -> Result<Vec<GradReport>> {
    let r = |shape: &[usize], k: u64| random_tensor(shape, derive_seed(gc.seed, &[k]));
    type Prim = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);
    let prims: Vec<Prim> = vec![
        ("add", vec![r(&[3, 4], 1), r(&[3, 4], 2)], Box::new(|t, v| Ok(t.add(v[0], v[1])))),
        ("sub", vec![r(&[3, 4], 1), r(&[3, 4], 2)], Box::new(|t, v| Ok(t.sub(v[0], v[1])))),
        ("mul", vec![r(&[3, 4], 1), r(&[3, 4], 2)], Box::new(|t, v| Ok(t.mul(v[0], v[1])))),
        ("div", vec![r(&[3, 4], 1), positive_tensor(&[3, 4], 2)], Box::new(|t, v| Ok(t.div(v[0], v[1])))),
        ("scale", vec![r(&[5], 1)], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", vec![r(&[5], 1)], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("add_bias", vec![r(&[3, 4], 1), r(&[4], 2)], Box::new(|t, v| Ok(t.add_bias(v[0], v[1])))),
        (
            "matmul_chain",
            vec![r(&[4, 3], 1), r(&[3, 5], 2), r(&[5, 2], 3)],
            Box::new(|t, v| {
                let ab = t.matmul(v[0], v[1]);
                Ok(t.matmul(ab, v[2]))
            }),
        ),
        ("transpose", vec![r(&[3, 5], 1)], Box::new(|t, v| Ok(t.transpose(v[0])))),
        ("reshape", vec![r(&[2, 6], 1)], Box::new(|t, v| Ok(t.reshape(v[0], &[3, 4])))),
        ("softmax_rows", vec![r(&[4, 5], 1)], Box::new(|t, v| Ok(t.softmax(v[0], 1)))),
        ("softmax_axis0", vec![r(&[3, 4, 2], 1)], Box::new(|t, v| Ok(t.softmax(v[0], 0)))),
        ("log_softmax", vec![r(&[4, 5], 1)], Box::new(|t, v| Ok(t.log_softmax(v[0], 1)))),
        (
            "layer_norm",
            vec![r(&[4, 6], 1), r(&[6], 2), r(&[6], 3)],
            Box::new(|t, v| Ok(t.layer_norm(v[0], v[1], v[2], 1e-5))),
        ),
        ("gelu", vec![r(&[8, 8], 1)], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("square", vec![r(&[6], 1)], Box::new(|t, v| Ok(t.square(v[0])))),
        ("sum", vec![r(&[2, 3], 1)], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![r(&[8, 8, 8], 1)], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("sum_axis", vec![r(&[3, 4, 2], 1)], Box::new(|t, v| Ok(t.sum_axis(v[0], 1)))),
        ("gather_rows", vec![r(&[5, 3], 1)], Box::new(|t, v| Ok(t.gather_rows(v[0], &[4, 0, 0, 2])))),
        ("slice_cols", vec![r(&[3, 6], 1)], Box::new(|t, v| Ok(t.slice_cols(v[0], 2, 3)))),
        ("concat0", vec![r(&[2, 3], 1), r(&[4, 3], 2)], Box::new(|t, v| Ok(t.concat0(&[v[0], v[1]])))),
        ("concat_cols", vec![r(&[3, 2], 1), r(&[3, 4], 2)], Box::new(|t, v| Ok(t.concat_cols(&[v[0], v[1]])))),
        (
            "conv3d",
            vec![r(&[2, 4, 3, 5], 1), r(&[3, 2, 3, 3, 3], 2), r(&[3], 3)],
            Box::new(|t, v| Ok(t.conv3d(v[0], v[1], v[2]))),
        ),
        (
            "conv3d_1x1",
            vec![r(&[3, 2, 2, 2], 1), r(&[2, 3, 1, 1, 1], 2), r(&[2], 3)],
            Box::new(|t, v| Ok(t.conv3d(v[0], v[1], v[2]))),
        ),
        ("upsample", vec![r(&[2, 2, 3, 2], 1)], Box::new(|t, v| Ok(t.upsample(v[0], 2)))),
        ("upsample_x4", vec![r(&[1, 2, 2, 2], 1)], Box::new(|t, v| Ok(t.upsample(v[0], 4)))),
    ];
    prims.into_iter().map(|(name, inputs, f)| with_tol(gc.check_fn(name, &inputs, f.as_ref()), LAYER_TOL)).collect()
}

/// Attention layers, the transformer block and the patch embedding.
pub fn layer_suite(gc: &GradCheck) -> Result<Vec<GradReport>> {
    let cfg = AttentionConfig { dim: 8, n_heads: 2, window: 4, depth: 2, mlp_ratio: 2 };
    let x = random_tensor(&[8, 8], derive_seed(gc.seed, &[10]));
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let embed = Linear::new(&mut store, "e", 6, 8, 1)?;
    let patches = random_tensor(&[5, 6], derive_seed(gc.seed, &[11]));
    let f = |t: &mut Tape, s: &ParamStore| {
        let p = t.constant(patches.clone());
        patch_embed(t, s, p, &embed)
    };
    out.push(with_tol(gc.check_params("patch_embed", &store, &f), LAYER_TOL)?);

    let mut store = ParamStore::new();
    let w = MsaWeights::new(&mut store, "a", 8, 2)?;
    for shifted in [false, true] {
        let name = if shifted { "slw_msa" } else { "lw_msa" };
        let run = |t: &mut Tape, s: &ParamStore, xv: Var| {
            if shifted {
                slw_msa(t, s, xv, &cfg, &w, None)
            } else {
                lw_msa(t, s, xv, &cfg, &w, None)
            }
        };
        let fx = |t: &mut Tape, v: &[Var]| run(t, &store, v[0]);
        out.push(with_tol(gc.check_fn(&format!("{name}/input"), std::slice::from_ref(&x), &fx), LAYER_TOL)?);
        let fp = |t: &mut Tape, s: &ParamStore| {
            let xv = t.constant(x.clone());
            run(t, s, xv)
        };
        out.push(with_tol(gc.check_params(&format!("{name}/params"), &store, &fp), LAYER_TOL)?);
    }

    let mut store = ParamStore::new();
    let b = BlockWeights::new(&mut store, "b", &cfg, 3)?;
    for shifted in [false, true] {
        let name = if shifted { "block_slw" } else { "block_lw" };
        let fx = |t: &mut Tape, v: &[Var]| transformer_block(t, &store, v[0], &cfg, &b, shifted, None);
        out.push(with_tol(gc.check_fn(&format!("{name}/input"), std::slice::from_ref(&x), &fx), LAYER_TOL)?);
        let fp = |t: &mut Tape, s: &ParamStore| {
            let xv = t.constant(x.clone());
            transformer_block(t, s, xv, &cfg, &b, shifted, None)
        };
        out.push(with_tol(gc.check_params(&format!("{name}/params"), &store, &fp), LAYER_TOL)?);
    }

    let mut store = ParamStore::new();
    let vit = SwVit::new(&mut store, "v", cfg, 4)?;
    let ragged = random_tensor(&[6, 8], derive_seed(gc.seed, &[12]));
    let fx = |t: &mut Tape, v: &[Var]| vit.forward(t, &store, v[0]);
    out.push(with_tol(gc.check_fn("swvit_padded/input", std::slice::from_ref(&ragged), &fx), LAYER_TOL)?);
    Ok(out)
}

fn tiny_volume(seed: u64) -> Volume {
    let mut rng = rng_from(seed);
    Volume::from_fn([8, 8, 8], |_, _, _| rng.random_range(0.0..1.0))
}

/// Full autoencoder and segmentation network on tiny configurations,
/// differentiated through their training losses.
pub fn model_suite(gc: &GradCheck) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    let v = tiny_volume(derive_seed(gc.seed, &[20]));
    let cfg = AsaConfig {
        dims: [8, 8, 8],
        patch: 4,
        mask_ratio: 0.75,
        bins: 4,
        encoder: AttentionConfig { dim: 8, n_heads: 2, window: 2, depth: 2, mlp_ratio: 2 },
        decoder: AttentionConfig { dim: 8, n_heads: 2, window: 4, depth: 2, mlp_ratio: 2 },
        encoding: EncodingKind::Spe,
        loss: LossKind::Attentive,
    };
    let model = AsaModel::new(cfg, derive_seed(gc.seed, &[21]))?;
    let plan = make_mask_plan(8, 0.75, derive_seed(gc.seed, &[22]))?;
    let weights = model.loss_weights(&v, &plan)?;
    let targets = patchify(&v, 4)?.1;
    let f = |t: &mut Tape, s: &ParamStore| {
        let recon = model.forward_with(t, s, &v, &plan)?;
        ar_loss(t, recon, &targets, &plan, &weights)
    };
    out.push(with_tol(gc.check_params("asa_tiny", &model.store, &f), MODEL_TOL)?);

    let mut rng = rng_from(derive_seed(gc.seed, &[23]));
    let labels: Vec<u8> = (0..512).map(|_| rng.random_range(0..3u8)).collect();
    let seg_cfg = SegConfig {
        dims: [8, 8, 8],
        patch: 4,
        encoder: AttentionConfig { dim: 8, n_heads: 2, window: 4, depth: 2, mlp_ratio: 2 },
        encoding: EncodingKind::Spe,
        n_classes: 3,
        c1: 4,
        c2: 3,
    };
    let seg = SegModel::new(seg_cfg, derive_seed(gc.seed, &[24]))?;
    let f = |t: &mut Tape, s: &ParamStore| {
        let logits = seg.forward_with(t, s, &v)?;
        dice_ce_loss(t, logits, &labels)
    };
    out.push(with_tol(gc.check_params("seg_tiny", &seg.store, &f), MODEL_TOL)?);
    Ok(out)
}

/// Primitives, layers and models together.
pub fn full_suite(seed: u64) -> Result<Vec<GradReport>> {
    let gc = GradCheck { seed, ..GradCheck::default() };
    let mut all = primitive_suite(&gc)?;
    all.extend(layer_suite(&gc)?);
    all.extend(model_suite(&GradCheck { max_entries: 24, ..gc })?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // d/dx of x·x computed through a detached copy halves the gradient.
        let gc = GradCheck::default();
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]);
        let f = |t: &mut Tape, v: &[Var]| {
            let c = t.constant(t.value(v[0]).clone());
            Ok(t.mul(v[0], c))
        };
        let r = gc.check_fn("detached", &[x], &f).unwrap();
        assert!(r.max_rel_err > 0.4);
    }

    #[test]
    fn primitives_pass() {
        for r in primitive_suite(&GradCheck::default()).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
