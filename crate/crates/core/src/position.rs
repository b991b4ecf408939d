//! Symmetric and vanilla sinusoidal position encodings over a patch grid.
//!
//! The symmetric encoding replaces the flat patch index with
//! `T²·t + H·h − |W/2 − w| + W/2`, which is unchanged under `w ↦ W − w`, so
//! left-right mirrored patches share one code. Frequency pair `k` (entries
//! `2k`, `2k+1`) uses exponent `i = k + 1`, i.e. divisor `10000^{2(k+1)/D}`.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    #[default]
    Spe,
    Vanilla,
}

fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 || dim % 2 != 0 {
        return Err(contract(format!("encoding dimension must be even and >= 2, got {dim}")));
    }
    Ok(())
}

/// The position numerator of the symmetric encoding. `W/2` is exact, so odd
/// widths give half-integers.
pub fn spe_numerator(t: usize, h: usize, w: usize, grid: [usize; 3]) -> f64 {
    let [tn, hn, wn] = grid.map(|g| g as f64);
    let half_w = wn / 2.0;
    tn * tn * t as f64 + hn * h as f64 - (half_w - w as f64).abs() + half_w
}

pub fn spe_vector(t: usize, h: usize, w: usize, grid: [usize; 3], dim: usize) -> Result<Vec<f64>> {
    check_dim(dim)?;
    if t >= grid[0] || h >= grid[1] || w >= grid[2] {
        return Err(contract(format!("position ({t}, {h}, {w}) outside grid {grid:?}")));
    }
    let num = spe_numerator(t, h, w, grid);
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let i = (k + 1) as f64;
        let pos = num / 10000f64.powf(2.0 * i / dim as f64);
        out.push(pos.sin());
        out.push(pos.cos());
    }
    Ok(out)
}

/// Standard transformer encoding of a flat index: pair `k` uses divisor
/// `10000^{2k/D}`.
pub fn vanilla_pe_vector(index: usize, dim: usize) -> Result<Vec<f64>> {
    check_dim(dim)?;
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let pos = index as f64 / 10000f64.powf(2.0 * k as f64 / dim as f64);
        out.push(pos.sin());
        out.push(pos.cos());
    }
    Ok(out)
}

/// One encoding row per patch, in patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingTable {
    pub grid: [usize; 3],
    pub dim: usize,
    pub kind: EncodingKind,
    /// `n_patches × dim`, row-major.
    pub rows: Vec<f64>,
}

impl EncodingTable {
    pub fn new(kind: EncodingKind, grid: [usize; 3], dim: usize) -> Result<Self> {
        check_dim(dim)?;
        let mut rows = Vec::with_capacity(grid.iter().product::<usize>() * dim);
        let mut idx = 0;
        for t in 0..grid[0] {
            for h in 0..grid[1] {
                for w in 0..grid[2] {
                    rows.extend(match kind {
                        EncodingKind::Spe => spe_vector(t, h, w, grid, dim)?,
                        EncodingKind::Vanilla => vanilla_pe_vector(idx, dim)?,
                    });
                    idx += 1;
                }
            }
        }
        Ok(Self { grid, dim, kind, rows })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.rows[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Rows for the given patch indices, stacked.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect()
    }
}

pub fn spe_table(grid: [usize; 3], dim: usize) -> Result<EncodingTable> {
    EncodingTable::new(EncodingKind::Spe, grid, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_numerators() {
        let g = [4, 4, 4];
        assert_eq!(spe_numerator(1, 2, 1, g), 25.0);
        assert_eq!(spe_numerator(1, 2, 3, g), 25.0);
        assert_eq!(spe_vector(1, 2, 1, g, 16).unwrap(), spe_vector(1, 2, 3, g, 16).unwrap());
    }

    #[test]
    fn time_offset_shifts_numerator_by_t_squared() {
        let g = [3, 5, 4];
        for dt in 1..3 {
            assert_eq!(spe_numerator(dt, 1, 2, g) - spe_numerator(0, 1, 2, g), 9.0 * dt as f64);
        }
    }

    #[test]
    fn odd_width_uses_half_integers() {
        let g = [2, 2, 5];
        assert_eq!(spe_numerator(0, 0, 1, g), -1.5 + 2.5);
        assert_eq!(spe_vector(0, 0, 1, g, 8).unwrap(), spe_vector(0, 0, 4, g, 8).unwrap());
    }

    #[test]
    fn vanilla_at_zero_alternates() {
        assert_eq!(vanilla_pe_vector(0, 6).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn bad_arguments() {
        assert!(spe_vector(4, 0, 0, [4, 4, 4], 16).is_err());
        assert!(spe_vector(0, 0, 0, [4, 4, 4], 15).is_err());
        assert!(vanilla_pe_vector(0, 0).is_err());
    }

    #[test]
    fn table_shape_and_mirror_rows() {
        let t = spe_table([4, 4, 4], 16).unwrap();
        assert_eq!(t.n_rows(), 64);
        assert_eq!(t.rows.len(), 64 * 16);
        assert_eq!(t.row(1), t.row(3));
        assert_eq!(t, spe_table([4, 4, 4], 16).unwrap());
        assert!(t.rows.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
