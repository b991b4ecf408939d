//! Dense loops behind the differentiable ops. All reductions run in a fixed
//! order, so results are bit-reproducible.

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

/// Geometry of a stride-1, same-padded 3D convolution over `[C, T, H, W]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub dims: [usize; 3],
    pub k: usize,
}

impl ConvGeom {
    fn vox(&self) -> usize {
        self.dims.iter().product()
    }

    /// Output range along one axis for kernel offset `o` (padding `k/2`):
    /// returns `(out_start, out_end, in_shift)` with `in = out + in_shift`.
    fn span(&self, axis: usize, o: usize) -> (usize, usize, isize) {
        let n = self.dims[axis] as isize;
        let shift = o as isize - (self.k / 2) as isize;
        let start = (-shift).max(0);
        let end = (n - shift).min(n);
        (start as usize, end.max(start) as usize, shift)
    }

    /// Visits every (kernel offset, aligned row pair) the convolution touches.
    /// `f(kernel_flat, out_row_start, in_row_start, row_len)`.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [_, h, w] = self.dims;
        let k = self.k;
        for kt in 0..k {
            let (t0, t1, st) = self.span(0, kt);
            for kh in 0..k {
                let (h0, h1, sh) = self.span(1, kh);
                for kw in 0..k {
                    let (w0, w1, sw) = self.span(2, kw);
                    if w1 <= w0 {
                        continue;
                    }
                    let kidx = (kt * k + kh) * k + kw;
                    for t in t0..t1 {
                        let ti = (t as isize + st) as usize;
                        for hh in h0..h1 {
                            let hi = (hh as isize + sh) as usize;
                            let out_row = (t * h + hh) * w + w0;
                            let in_row = (ti * h + hi) * w + (w0 as isize + sw) as usize;
                            f(kidx, out_row, in_row, w1 - w0);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward(x: &[f64], wt: &[f64], bias: &[f64], g: ConvGeom) -> Vec<f64> {
    let vox = g.vox();
    let kk = g.k * g.k * g.k;
    let mut out = vec![0.0; g.c_out * vox];
    for co in 0..g.c_out {
        let out_c = &mut out[co * vox..(co + 1) * vox];
        out_c.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..g.c_in {
            let x_c = &x[ci * vox..(ci + 1) * vox];
            let w_c = &wt[(co * g.c_in + ci) * kk..(co * g.c_in + ci + 1) * kk];
            g.for_each_row(|kidx, o, i, len| {
                let wv = w_c[kidx];
                for (ov, xv) in out_c[o..o + len].iter_mut().zip(&x_c[i..i + len]) {
                    *ov += wv * xv;
                }
            });
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for [`conv3d_forward`].
pub(crate) fn conv3d_backward(
    x: &[f64],
    wt: &[f64],
    dy: &[f64],
    g: ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let vox = g.vox();
    let kk = g.k * g.k * g.k;
    if let Some(db) = db {
        for co in 0..g.c_out {
            db[co] += dy[co * vox..(co + 1) * vox].iter().sum::<f64>();
        }
    }
    for co in 0..g.c_out {
        let dy_c = &dy[co * vox..(co + 1) * vox];
        for ci in 0..g.c_in {
            let wo = (co * g.c_in + ci) * kk;
            if let Some(dx) = dx.as_deref_mut() {
                let dx_c = &mut dx[ci * vox..(ci + 1) * vox];
                let w_c = &wt[wo..wo + kk];
                g.for_each_row(|kidx, o, i, len| {
                    let wv = w_c[kidx];
                    for (dv, gv) in dx_c[i..i + len].iter_mut().zip(&dy_c[o..o + len]) {
                        *dv += wv * gv;
                    }
                });
            }
            if let Some(dw) = dw.as_deref_mut() {
                let x_c = &x[ci * vox..(ci + 1) * vox];
                let dw_c = &mut dw[wo..wo + kk];
                g.for_each_row(|kidx, o, i, len| {
                    dw_c[kidx] += dy_c[o..o + len]
                        .iter()
                        .zip(&x_c[i..i + len])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                });
            }
        }
    }
}

/// Per-output-coordinate linear interpolation taps for upsampling an axis of
/// length `n` by `factor` (half-pixel centres, edge-clamped).
pub(crate) fn upsample_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Linear interpolation along the middle axis of an `[outer, n, inner]` layout.
pub(crate) fn interp_axis(
    x: &[f64],
    outer: usize,
    n: usize,
    inner: usize,
    taps: &[(usize, usize, f64, f64)],
) -> Vec<f64> {
    let m = taps.len();
    let mut out = vec![0.0; outer * m * inner];
    for o in 0..outer {
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let dst = &mut out[(o * m + j) * inner..(o * m + j + 1) * inner];
            let a = &x[(o * n + i0) * inner..(o * n + i0 + 1) * inner];
            let b = &x[(o * n + i1) * inner..(o * n + i1 + 1) * inner];
            for ((d, av), bv) in dst.iter_mut().zip(a).zip(b) {
                *d = w0 * av + w1 * bv;
            }
        }
    }
    out
}

/// Adjoint of [`interp_axis`].
pub(crate) fn interp_axis_adjoint(
    dy: &[f64],
    outer: usize,
    n: usize,
    inner: usize,
    taps: &[(usize, usize, f64, f64)],
) -> Vec<f64> {
    let m = taps.len();
    let mut dx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let src = &dy[(o * m + j) * inner..(o * m + j + 1) * inner];
            for (q, gv) in src.iter().enumerate() {
                dx[(o * n + i0) * inner + q] += w0 * gv;
                dx[(o * n + i1) * inner + q] += w1 * gv;
            }
        }
    }
    dx
}
