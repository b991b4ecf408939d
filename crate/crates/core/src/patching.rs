//! Non-overlapping cubic patches and random mask plans.

use rand::seq::SliceRandom;

use crate::error::{contract, Result};
use crate::rng::rng_from;
use crate::volume::Volume;

/// Decomposition of a volume into `s³` patches, ordered row-major over the
/// patch coordinates `(t, h, w)` with `w` fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub s: usize,
    pub grid: [usize; 3],
}

impl PatchGrid {
    pub fn for_dims(dims: [usize; 3], s: usize) -> Result<Self> {
        if s == 0 {
            return Err(contract("patch size must be positive"));
        }
        let mut grid = [0; 3];
        for (a, name) in ["T", "H", "W"].iter().enumerate() {
            if dims[a] == 0 || dims[a] % s != 0 {
                return Err(contract(format!(
                    "axis {name} has extent {} which is not divisible by patch size {s}",
                    dims[a]
                )));
            }
            grid[a] = dims[a] / s;
        }
        Ok(Self { s, grid })
    }

    pub fn n_patches(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.s * self.s * self.s
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.grid[0] * self.s, self.grid[1] * self.s, self.grid[2] * self.s]
    }

    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.grid[1] + h) * self.grid[2] + w
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let w = idx % self.grid[2];
        let h = (idx / self.grid[2]) % self.grid[1];
        let t = idx / (self.grid[1] * self.grid[2]);
        [t, h, w]
    }

    /// Flat voxel indices of patch `idx`, in the patch's row-major order.
    pub fn voxel_indices(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let [pt, ph, pw] = self.coords(idx);
        let [_, h_n, w_n] = self.dims();
        let s = self.s;
        (0..s).flat_map(move |z| {
            (0..s).flat_map(move |y| {
                let row = ((pt * s + z) * h_n + ph * s + y) * w_n + pw * s;
                row..row + s
            })
        })
    }
}

/// Splits a volume into its patches. Each patch is its `s³` block flattened
/// row-major.
pub fn patchify(v: &Volume, s: usize) -> Result<(PatchGrid, Vec<Vec<f32>>)> {
    let grid = PatchGrid::for_dims(v.dims, s)?;
    let patches = (0..grid.n_patches())
        .map(|i| grid.voxel_indices(i).map(|k| v.voxels[k]).collect())
        .collect();
    Ok((grid, patches))
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[Vec<f32>], grid: &PatchGrid) -> Result<Volume> {
    if patches.len() != grid.n_patches() {
        return Err(contract(format!("expected {} patches, got {}", grid.n_patches(), patches.len())));
    }
    let mut out = Volume::zeros(grid.dims());
    for (i, p) in patches.iter().enumerate() {
        if p.len() != grid.patch_len() {
            return Err(contract(format!("patch {i} has {} voxels, expected {}", p.len(), grid.patch_len())));
        }
        for (k, v) in grid.voxel_indices(i).zip(p) {
            out.voxels[k] = *v;
        }
    }
    Ok(out)
}

/// Which patches are hidden from the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub mask_ratio: f64,
    /// Sorted masked patch indices.
    pub masked: Vec<usize>,
    /// Sorted visible patch indices.
    pub visible: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    /// A plan with an explicit masked set. Either side may be empty, which
    /// [`make_mask_plan`] never produces.
    pub fn explicit(n_patches: usize, masked: &[usize]) -> Result<Self> {
        let mut flags = vec![false; n_patches];
        for &m in masked {
            if m >= n_patches || flags[m] {
                return Err(contract(format!("masked index {m} is out of range or repeated")));
            }
            flags[m] = true;
        }
        let (masked, visible): (Vec<usize>, Vec<usize>) = (0..n_patches).partition(|&i| flags[i]);
        let mask_ratio = masked.len() as f64 / n_patches.max(1) as f64;
        Ok(Self { mask_ratio, masked, visible, seed: 0 })
    }
}

/// Uniformly random plan masking `round(mask_ratio · n_patches)` patches.
pub fn make_mask_plan(n_patches: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(contract(format!("mask ratio {mask_ratio} outside (0, 1)")));
    }
    let n_masked = (mask_ratio * n_patches as f64).round() as usize;
    if n_masked == 0 || n_masked >= n_patches {
        return Err(contract(format!(
            "mask ratio {mask_ratio} over {n_patches} patches leaves an empty masked or visible set"
        )));
    }
    let mut order: Vec<usize> = (0..n_patches).collect();
    order.shuffle(&mut rng_from(seed));
    let mut masked = order[..n_masked].to_vec();
    let mut visible = order[n_masked..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan { mask_ratio, masked, visible, seed })
}
