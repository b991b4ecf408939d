//! Gradient-orientation histograms (3D VHOG) and the per-patch
//! informativeness weights that drive the attentive reconstruction loss.
//!
//! Axis convention: `x` runs along W (fastest), `y` along H and `z` along T.
//! Each voxel's gradient comes from the `[-1, 0, 1]` filter with replicate
//! padding at the volume border. Its orientation is
//! `θ = acos(g_z / ‖g‖) ∈ [0, π]` and `φ = |atan2(g_y, g_x)| ∈ [0, π]`.

use std::f64::consts::PI;

use crate::error::{contract, Result};
use crate::patching::{MaskPlan, PatchGrid};
use crate::volume::Volume;

/// Default number of bins per angle axis.
pub const DEFAULT_BINS: usize = 8;

/// Below this total mean-histogram mass the weights fall back to uniform.
const DEGENERATE_MASS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub dims: [usize; 3],
    /// `(g_x, g_y, g_z)` per voxel.
    pub vectors: Vec<[f64; 3]>,
    pub magnitude: Vec<f64>,
    /// `(θ, φ)` per voxel; `None` where the gradient vanishes.
    pub angles: Vec<Option<(f64, f64)>>,
}

/// Per-patch histogram summary and weights over the masked set.
#[derive(Debug, Clone, PartialEq)]
pub struct InformativenessMap {
    pub bins: usize,
    /// Patch indices the weights refer to, in the order given.
    pub patches: Vec<usize>,
    /// L2-normalized `b × b` histogram per listed patch, row index from θ.
    pub histograms: Vec<Vec<f64>>,
    /// Mean of each normalized histogram.
    pub means: Vec<f64>,
    /// `p_i = mean_i / Σ mean`, or `1/N` when every mean vanishes.
    pub weights: Vec<f64>,
}

pub fn compute_gradient_field(v: &Volume) -> Result<GradientField> {
    let [t_n, h_n, w_n] = v.dims;
    if v.dims.iter().any(|&d| d < 3) {
        return Err(contract(format!("gradient field needs every axis >= 3, got {:?}", v.dims)));
    }
    let n = v.len();
    let mut vectors = Vec::with_capacity(n);
    let mut magnitude = Vec::with_capacity(n);
    let mut angles = Vec::with_capacity(n);
    let at = |t: usize, h: usize, w: usize| v.get(t, h, w) as f64;
    for t in 0..t_n {
        let (t0, t1) = (t.saturating_sub(1), (t + 1).min(t_n - 1));
        for h in 0..h_n {
            let (h0, h1) = (h.saturating_sub(1), (h + 1).min(h_n - 1));
            for w in 0..w_n {
                let (w0, w1) = (w.saturating_sub(1), (w + 1).min(w_n - 1));
                let gx = at(t, h, w1) - at(t, h, w0);
                let gy = at(t, h1, w) - at(t, h0, w);
                let gz = at(t1, h, w) - at(t0, h, w);
                let mag = (gx * gx + gy * gy + gz * gz).sqrt();
                vectors.push([gx, gy, gz]);
                magnitude.push(mag);
                angles.push(orientation(gx, gy, gz, mag));
            }
        }
    }
    Ok(GradientField { dims: v.dims, vectors, magnitude, angles })
}

fn orientation(gx: f64, gy: f64, gz: f64, mag: f64) -> Option<(f64, f64)> {
    (mag > 0.0).then(|| ((gz / mag).clamp(-1.0, 1.0).acos(), gy.atan2(gx).abs()))
}

/// Bin index of an angle in `[0, π]`; `π` itself lands in the last bin.
#[inline]
pub fn angle_bin(angle: f64, bins: usize) -> usize {
    ((angle / (PI / bins as f64)).floor() as usize).min(bins - 1)
}

/// Magnitude-weighted `b × b` histogram over `(θ, φ)` of the given voxels,
/// divided by its L2 norm. Gradient-free voxel sets give all zeros.
pub fn patch_histogram(field: &GradientField, voxels: impl IntoIterator<Item = usize>, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(contract(format!("need at least 2 bins per axis, got {bins}")));
    }
    let mut hist = vec![0.0; bins * bins];
    for k in voxels {
        if let Some((theta, phi)) = field.angles[k] {
            hist[angle_bin(theta, bins) * bins + angle_bin(phi, bins)] += field.magnitude[k];
        }
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        hist.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(hist)
}

/// Histograms, means and weights for an arbitrary list of patches.
///
/// The normalizing sum runs in ascending patch-index order, so the weights
/// do not depend on how `patches` is ordered.
pub fn weights_for_patches(
    field: &GradientField,
    grid: &PatchGrid,
    patches: &[usize],
    bins: usize,
) -> Result<InformativenessMap> {
    if patches.is_empty() {
        return Err(contract("informativeness needs at least one masked patch"));
    }
    if field.dims != grid.dims() {
        return Err(contract(format!("gradient field {:?} does not match grid {:?}", field.dims, grid.dims())));
    }
    if let Some(&bad) = patches.iter().find(|&&p| p >= grid.n_patches()) {
        return Err(contract(format!("patch {bad} out of range")));
    }
    let histograms = patches
        .iter()
        .map(|&p| patch_histogram(field, grid.voxel_indices(p), bins))
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = histograms.iter().map(|h| h.iter().sum::<f64>() / h.len() as f64).collect();
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.sort_by_key(|&i| patches[i]);
    let total: f64 = order.iter().map(|&i| means[i]).sum();
    let weights = if total < DEGENERATE_MASS {
        vec![1.0 / patches.len() as f64; patches.len()]
    } else {
        means.iter().map(|m| m / total).collect()
    };
    Ok(InformativenessMap { bins, patches: patches.to_vec(), histograms, means, weights })
}

/// Attention weights `p_i` over the masked patches of `plan`, computed on
/// the original (unmasked) volume.
pub fn informativeness_weights(v: &Volume, grid: &PatchGrid, plan: &MaskPlan, bins: usize) -> Result<InformativenessMap> {
    if plan.n_patches() != grid.n_patches() {
        return Err(contract(format!("plan covers {} patches, grid has {}", plan.n_patches(), grid.n_patches())));
    }
    let field = compute_gradient_field(v)?;
    weights_for_patches(&field, grid, &plan.masked, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn ramp_x() -> Volume {
        Volume::from_fn([8, 8, 8], |_, _, w| w as f32)
    }

    #[test]
    fn constant_volume_has_no_gradient() {
        let f = compute_gradient_field(&Volume::from_fn([4, 4, 4], |_, _, _| 0.3)).unwrap();
        assert!(f.magnitude.iter().all(|&m| m == 0.0));
        assert!(f.angles.iter().all(Option::is_none));
    }

    #[test]
    fn ramp_along_x() {
        let v = ramp_x();
        let f = compute_gradient_field(&v).unwrap();
        let k = v.index(3, 3, 3);
        assert_eq!(f.vectors[k], [2.0, 0.0, 0.0]);
        let (theta, phi) = f.angles[k].unwrap();
        assert_eq!(theta, FRAC_PI_2);
        assert_eq!(phi, 0.0);
    }

    #[test]
    fn ramp_along_z() {
        let v = Volume::from_fn([8, 8, 8], |t, _, _| t as f32);
        let f = compute_gradient_field(&v).unwrap();
        let k = v.index(4, 2, 2);
        assert_eq!(f.vectors[k], [0.0, 0.0, 2.0]);
        assert_eq!(f.angles[k].unwrap().0, 0.0);
    }

    #[test]
    fn ramp_histogram_is_a_single_bin() {
        let f = compute_gradient_field(&ramp_x()).unwrap();
        let h = patch_histogram(&f, 0..512, 8).unwrap();
        assert_eq!(h[4 * 8], 1.0);
        assert_eq!(h.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn angle_pi_clamps_to_last_bin() {
        assert_eq!(angle_bin(PI, 8), 7);
        assert_eq!(angle_bin(0.0, 8), 0);
        // g = (0, 0, -1): θ = π, φ = 0
        assert_eq!(orientation(0.0, 0.0, -1.0, 1.0), Some((PI, 0.0)));
    }

    #[test]
    fn too_few_bins_is_rejected() {
        let f = compute_gradient_field(&ramp_x()).unwrap();
        assert!(patch_histogram(&f, 0..8, 1).is_err());
    }

    #[test]
    fn uniform_weights_for_identical_patches_and_constant_volume() {
        let grid = PatchGrid::for_dims([8, 8, 8], 4).unwrap();
        let plan = MaskPlan::explicit(8, &[0, 3, 5, 6]).unwrap();
        let w = informativeness_weights(&ramp_x(), &grid, &plan, 8).unwrap();
        assert!(w.weights.iter().all(|p| (p - 0.25).abs() < 1e-15));
        let flat = Volume::from_fn([8, 8, 8], |_, _, _| 1.0);
        let w = informativeness_weights(&flat, &grid, &plan, 8).unwrap();
        assert_eq!(w.weights, vec![0.25; 4]);
    }

    #[test]
    fn empty_masked_set_is_rejected() {
        let grid = PatchGrid::for_dims([8, 8, 8], 4).unwrap();
        let plan = MaskPlan::explicit(8, &[]).unwrap();
        assert!(informativeness_weights(&ramp_x(), &grid, &plan, 8).is_err());
    }

    #[test]
    fn weights_ignore_enumeration_order() {
        let v = Volume::from_fn([8, 8, 8], |t, h, w| ((t * 7 + h * 3 + w * w) % 5) as f32);
        let grid = PatchGrid::for_dims([8, 8, 8], 4).unwrap();
        let field = compute_gradient_field(&v).unwrap();
        let a = weights_for_patches(&field, &grid, &[1, 2, 4, 7], 4).unwrap();
        let b = weights_for_patches(&field, &grid, &[7, 4, 2, 1], 4).unwrap();
        for (i, p) in [1, 2, 4, 7].iter().enumerate() {
            let j = b.patches.iter().position(|q| q == p).unwrap();
            assert_eq!(a.weights[i], b.weights[j]);
        }
    }
}
