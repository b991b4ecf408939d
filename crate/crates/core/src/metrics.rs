//! Overlap and surface-distance metrics on label volumes.

use crate::error::{contract, Result};

/// `2|P∩R| / (|P|+|R|)` for class `c`; 1.0 when both are empty.
pub fn dice_metric(pred: &[u8], reference: &[u8], c: u8) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(contract("prediction and reference differ in size"));
    }
    let (mut p, mut r, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(reference) {
        let (ia, ib) = (a == c, b == c);
        p += ia as usize;
        r += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + r == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + r) as f64)
}

/// Foreground voxels with at least one 6-connected background neighbour.
/// Positions outside the volume count as background.
pub fn surface_voxels(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [t, h, w] = dims;
    let at = |a: usize, b: usize, c: usize| mask[(a * h + b) * w + c];
    let mut out = vec![false; mask.len()];
    for a in 0..t {
        for b in 0..h {
            for c in 0..w {
                if !at(a, b, c) {
                    continue;
                }
                let edge = a == 0 || b == 0 || c == 0 || a + 1 == t || b + 1 == h || c + 1 == w;
                out[(a * h + b) * w + c] = edge
                    || !at(a - 1, b, c)
                    || !at(a + 1, b, c)
                    || !at(a, b - 1, c)
                    || !at(a, b + 1, c)
                    || !at(a, b, c - 1)
                    || !at(a, b, c + 1);
            }
        }
    }
    out
}

/// Lower envelope of parabolas rooted at the finite entries of `f`.
fn edt_1d(f: &[f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let mut k: Option<usize> = None;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let Some(mut top) = k else {
            k = Some(0);
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        };
        loop {
            let p = v[top];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
            if s <= z[top] {
                // z[0] is -inf, so this never pops the last parabola
                top -= 1;
                continue;
            }
            top += 1;
            v[top] = q;
            z[top] = s;
            z[top + 1] = f64::INFINITY;
            break;
        }
        k = Some(top);
    }
    if k.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest `true`
/// voxel of `sites` (infinite when there are none).
pub fn squared_distance_transform(sites: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let n_max = *dims.iter().max().unwrap_or(&1);
    let (mut f, mut out) = (vec![0.0; n_max], vec![0.0; n_max]);
    let (mut v, mut z) = (vec![0usize; n_max], vec![0.0; n_max + 1]);
    let [t, h, w] = dims;
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let lines: Vec<usize> = (0..t * h * w).filter(|&i| (i / stride) % n == 0).collect();
        for start in lines {
            for k in 0..n {
                f[k] = d[start + k * stride];
            }
            edt_1d(&f[..n], &mut v[..n], &mut z[..n + 1], &mut out[..n]);
            for k in 0..n {
                d[start + k * stride] = out[k];
            }
        }
    }
    d
}

/// Nearest-rank percentile `q ∈ (0, 100]` of a non-empty sample.
pub fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * values.len() as f64).ceil().max(1.0) as usize;
    values[rank.min(values.len()) - 1]
}

/// Symmetric 95th-percentile surface distance for class `c`, in voxels.
///
/// Returns 0 when the class is absent from both volumes and `f64::INFINITY`
/// when it is absent from exactly one.
pub fn hd95_metric(pred: &[u8], reference: &[u8], dims: [usize; 3], c: u8) -> Result<f64> {
    let n: usize = dims.iter().product();
    if pred.len() != n || reference.len() != n {
        return Err(contract(format!("label volumes must have {n} voxels")));
    }
    let sp = surface_voxels(&pred.iter().map(|&x| x == c).collect::<Vec<_>>(), dims);
    let sr = surface_voxels(&reference.iter().map(|&x| x == c).collect::<Vec<_>>(), dims);
    let (np, nr) = (sp.iter().filter(|&&b| b).count(), sr.iter().filter(|&&b| b).count());
    match (np, nr) {
        (0, 0) => return Ok(0.0),
        (0, _) | (_, 0) => return Ok(f64::INFINITY),
        _ => {}
    }
    let directed = |from: &[bool], to: &[bool]| {
        let dt = squared_distance_transform(to, dims);
        let mut d: Vec<f64> = from.iter().zip(&dt).filter(|(&s, _)| s).map(|(_, &d2)| d2.sqrt()).collect();
        nearest_rank(&mut d, 95.0)
    };
    Ok(directed(&sp, &sr).max(directed(&sr, &sp)))
}

/// Per-class scores for the foreground classes `1..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    pub classes: Vec<u8>,
    pub dice: Vec<f64>,
    pub hd95: Vec<f64>,
}

impl SegMetrics {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len().max(1) as f64
    }

    /// Infinite if any class is infinite.
    pub fn mean_hd95(&self) -> f64 {
        self.hd95.iter().sum::<f64>() / self.hd95.len().max(1) as f64
    }

    /// Averages several reports class by class.
    pub fn average(reports: &[SegMetrics]) -> Result<SegMetrics> {
        let Some(first) = reports.first() else {
            return Err(contract("no reports to average"));
        };
        if reports.iter().any(|r| r.classes != first.classes) {
            return Err(contract("reports cover different classes"));
        }
        let n = reports.len() as f64;
        let avg = |get: fn(&SegMetrics) -> &Vec<f64>| {
            (0..first.classes.len()).map(|k| reports.iter().map(|r| get(r)[k]).sum::<f64>() / n).collect()
        };
        Ok(SegMetrics { classes: first.classes.clone(), dice: avg(|r| &r.dice), hd95: avg(|r| &r.hd95) })
    }

    /// `class,dice,hd95` rows plus a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,dice,hd95\n");
        for ((c, d), h) in self.classes.iter().zip(&self.dice).zip(&self.hd95) {
            s.push_str(&format!("{c},{d},{h}\n"));
        }
        s.push_str(&format!("mean,{},{}\n", self.mean_dice(), self.mean_hd95()));
        s
    }
}

pub fn evaluate(pred: &[u8], reference: &[u8], dims: [usize; 3], n_classes: u8) -> Result<SegMetrics> {
    let classes: Vec<u8> = (1..n_classes).collect();
    let dice = classes.iter().map(|&c| dice_metric(pred, reference, c)).collect::<Result<_>>()?;
    let hd95 = classes.iter().map(|&c| hd95_metric(pred, reference, dims, c)).collect::<Result<_>>()?;
    Ok(SegMetrics { classes, dice, hd95 })
}
