//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the op that produced it. [`Tape::backward`] walks the nodes in
//! reverse and returns the gradient of a scalar output with respect to every
//! tracked leaf (parameters and explicitly tracked inputs). A tape is built per
//! forward pass and dropped after its backward pass.
//!
//! Shape errors inside ops are programming errors and panic; the model-level
//! functions validate user-facing shapes and return [`AsaError`](crate::AsaError).

use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Concat0(Vec<Var>),
    ConcatCols(Vec<Var>),
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Upsample { x: Var, factor: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// The single value of a `[1]`-shaped node.
    pub fn item(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "item() on shape {:?}", t.shape);
        t.data[0]
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Tensor::new(t.shape, t.data), Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Tensor::new(t.shape, t.data), Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated binds return the same node.
    /// Parameters with `requires_grad == false` become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(Tensor::new(t.shape.clone(), t.data.clone()), Op::Leaf, t.requires_grad);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    fn unary(&mut self, a: Var, data: Vec<f64>, op: Op) -> Var {
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor::new(shape, data), op, tracked)
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| c * x).collect();
        self.unary(a, data, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x + c).collect();
        self.unary(a, data, Op::AddScalar(a))
    }

    /// `x + b`, with `b` of shape `[n]` broadcast over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = *self.shape(x).last().expect("add_bias on scalar");
        assert_eq!(self.shape(b), [n], "bias shape mismatch");
        let bias = self.data(b).to_vec();
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bias).map(|(v, c)| v + c))
            .collect();
        let tracked = self.tracked(x) || self.tracked(b);
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::AddBias(x, b), tracked)
    }

    /// 2D matrix product `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), tracked)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "transpose expects rank 2");
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let tracked = self.tracked(a);
        self.push(Tensor::new(vec![n, m], out), Op::Transpose(a), tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), self.value(a).numel(), "reshape size mismatch");
        let data = self.data(a).to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor::new(shape.to_vec(), data), Op::Reshape(a), tracked)
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[at(k)] /= total;
                }
            }
        }
        self.unary(x, out, Op::Softmax(x, axis))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|k| (src[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..n {
                    out[at(k)] = src[at(k)] - lse;
                }
            }
        }
        self.unary(x, out, Op::LogSoftmax(x, axis))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let d = *self.shape(x).last().expect("layer_norm on scalar");
        assert_eq!(self.shape(gain), [d]);
        assert_eq!(self.shape(bias), [d]);
        let (g, b) = (self.data(gain), self.data(bias));
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, tracked)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| gelu(v).0).collect();
        self.unary(x, data, Op::Gelu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v * v).collect();
        self.unary(x, data, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    /// Sums out `axis`; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + k) * inner + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let tracked = self.tracked(x);
        self.push(Tensor::new(new_shape, out), Op::SumAxis(x, axis), tracked)
    }

    /// Selects slices along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        let row: usize = shape[1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            assert!(i < shape[0], "row {i} out of range {}", shape[0]);
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        let tracked = self.tracked(x);
        self.push(Tensor::new(new_shape, out), Op::GatherRows(x, idx.to_vec()), tracked)
    }

    /// Columns `start..start+width` of a rank-2 node.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2);
        let (m, n) = (s[0], s[1]);
        assert!(start + width <= n);
        let src = self.data(x);
        let out = (0..m).flat_map(|i| src[i * n + start..i * n + start + width].iter().copied()).collect();
        let tracked = self.tracked(x);
        self.push(Tensor::new(vec![m, width], out), Op::SliceCols(x, start), tracked)
    }

    /// Concatenates along axis 0; trailing extents must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(self.shape(p)[1..], tail[..], "concat0 trailing shape mismatch");
            rows += self.shape(p)[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(Tensor::new(shape, out), Op::Concat0(parts.to_vec()), tracked)
    }

    /// Concatenates rank-2 nodes along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert!(s.len() == 2 && s[0] == m, "concat_cols row mismatch");
                s[1]
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut c0 = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for i in 0..m {
                out[i * n + c0..i * n + c0 + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            c0 += w;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(Tensor::new(vec![m, n], out), Op::ConcatCols(parts.to_vec()), tracked)
    }

    /// Same-padded, stride-1 3D convolution. `x: [C_in, T, H, W]`,
    /// `w: [C_out, C_in, k, k, k]` with odd `k`, `b: [C_out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (sx, sw) = (self.shape(x), self.shape(w));
        assert_eq!(sx.len(), 4, "conv3d input must be [C,T,H,W]");
        assert!(sw.len() == 5 && sw[1] == sx[0], "conv3d weight {sw:?} vs input {sx:?}");
        assert!(sw[2] % 2 == 1 && sw[2] == sw[3] && sw[3] == sw[4], "conv3d needs odd cubic kernel");
        assert_eq!(self.shape(b), [sw[0]]);
        let geom = ConvGeom { c_in: sx[0], c_out: sw[0], dims: [sx[1], sx[2], sx[3]], k: sw[2] };
        let out = kernels::conv3d_forward(self.data(x), self.data(w), self.data(b), geom);
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let shape = vec![geom.c_out, sx[1], sx[2], sx[3]];
        self.push(Tensor::new(shape, out), Op::Conv3d { x, w, b, geom }, tracked)
    }

    /// Trilinear upsampling of `[C, T, H, W]` by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample input must be [C,T,H,W]");
        let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
        let f = factor;
        let mut cur = self.data(x).to_vec();
        cur = kernels::interp_axis(&cur, c * t * h, w, 1, &kernels::upsample_taps(w, f));
        cur = kernels::interp_axis(&cur, c * t, h, w * f, &kernels::upsample_taps(h, f));
        cur = kernels::interp_axis(&cur, c, t, h * f * w * f, &kernels::upsample_taps(t, f));
        let tracked = self.tracked(x);
        self.push(Tensor::new(vec![c, t * f, h * f, w * f], cur), Op::Upsample { x, factor }, tracked)
    }

    /// Gradients of the scalar `out` with respect to every tracked leaf.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let n_out = self.value(out).numel();
        if n_out != 1 {
            return Err(contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        // Only leaves keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        let numels = self.nodes.iter().map(|n| n.value.numel()).collect();
        Ok(Gradients { grads, numels, params: self.param_order.clone() })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.tracked(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, d), o) in ga.iter_mut().zip(g).zip(vb) {
                        *x += d * o;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, d), o) in gb.iter_mut().zip(g).zip(va) {
                        *x += d * o;
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, d), q) in ga.iter_mut().zip(g).zip(vb) {
                        *x += d / q;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (k, x) in gb.iter_mut().enumerate() {
                        *x -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += c * d);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(v, d)| *v += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(v, d)| *v += d);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_bt_acc(g, self.data(*b), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_at_acc(self.data(*a), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = split_axis(&y.shape, *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y.data[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += y.data[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = split_axis(&y.shape, *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let total: f64 = (0..n).map(|k| g[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += g[at(k)] - y.data[at(k)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.shape(*gain)[0];
                let gv = self.data(*gain);
                if let Some(gg) = self.acc(grads, *gain) {
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row_g in g.chunks(d) {
                        gb.iter_mut().zip(row_g).for_each(|(v, dv)| *v += dv);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let rg = &g[r * d..(r + 1) * d];
                        let rh = &xhat[r * d..(r + 1) * d];
                        let gh: Vec<f64> = rg.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = gh.iter().sum::<f64>() / d as f64;
                        let m2 = gh.iter().zip(rh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += is * (gh[j] - m1 - rh[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((v, d), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *v += d * gelu(*xi).1;
                    }
                }
            }
            Op::Square(x) => {
                let xv = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((v, d), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *v += 2.0 * xi * d;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                gx[(o * n + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let row: usize = self.shape(*x)[1..].iter().product();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        for q in 0..row {
                            gx[src * row + q] += g[r * row + q];
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let n = self.shape(*x)[1];
                let (m, w) = (y.shape[0], y.shape[1]);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        for j in 0..w {
                            gx[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(v, d)| *v += d);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (y.shape[0], y.shape[1]);
                let mut c0 = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + c0 + j];
                            }
                        }
                    }
                    c0 += w;
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let (xv, wv) = (self.data(*x), self.data(*w));
                let mut dx = self.tracked(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.tracked(*w).then(|| vec![0.0; wv.len()]);
                let mut db = self.tracked(*b).then(|| vec![0.0; geom.c_out]);
                kernels::conv3d_backward(xv, wv, g, *geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let (Some(d), Some(acc)) = (d, self.acc(grads, v)) {
                        acc.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (c, t, h, w, f) = (s[0], s[1], s[2], s[3], *factor);
                if let Some(gx) = self.acc(grads, *x) {
                    let mut cur = kernels::interp_axis_adjoint(g, c, t, h * f * w * f, &kernels::upsample_taps(t, f));
                    cur = kernels::interp_axis_adjoint(&cur, c * t, h, w * f, &kernels::upsample_taps(h, f));
                    cur = kernels::interp_axis_adjoint(&cur, c * t * h, w, 1, &kernels::upsample_taps(w, f));
                    gx.iter_mut().zip(cur).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

/// Result of [`Tape::backward`]: gradients of every tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    numels: Vec<usize>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros when the leaf is unreachable
    /// from the output.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.numels[v.0]])
    }

    /// Gradients of every parameter bound on the tape, in bind order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Vec<f64>)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.wrt(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_derivative() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![1], vec![3.0]));
        let sq = tape.square(x);
        let y = tape.sum(sq);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), vec![6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.1]));
        let s = tape.softmax(x, 0);
        let y = tape.sum(s);
        let g = tape.backward(y).unwrap();
        assert!(g.wrt(x).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]));
        let sa = tape.softmax(a, 0);
        assert_eq!(tape.data(sa), [0.5, 0.5]);
        let b = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]));
        let sb = tape.softmax(b, 0);
        assert_eq!(tape.data(sb)[0], 1.0);
        assert!(tape.data(sb)[1] < 1e-300 && tape.data(sb)[1] >= 0.0);
        let c = tape.constant(Tensor::new(vec![2], vec![2f64.ln(), 0.0]));
        let sc = tape.softmax(c, 0);
        assert!((tape.data(sc)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.data(sc)[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_on_inner_axis_normalises_each_slice() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64 * 0.37).collect()));
        let s = tape.softmax(x, 1);
        let d = tape.data(s);
        for o in 0..2 {
            for i in 0..2 {
                let total: f64 = (0..3).map(|k| d[(o * 3 + k) * 2 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(vec![3], 1.0));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let x = tape.constant(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]));
        let y = tape.layer_norm(x, g, b, 1e-5);
        assert_eq!(tape.data(y), [0.0, 0.0, 0.0]);

        let g2 = tape.constant(Tensor::full(vec![2], 1.0));
        let b2 = tape.constant(Tensor::zeros(vec![2]));
        let x2 = tape.constant(Tensor::new(vec![2], vec![-1.0, 1.0]));
        let y2 = tape.layer_norm(x2, g2, b2, 1e-5);
        // var = 1, so the output is ±1/sqrt(1 + 1e-5).
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.data(y2)[0] + expect).abs() < 1e-15);
        assert!((tape.data(y2)[1] - expect).abs() < 1e-15);
        let delta = 1.0 - expect;
        assert!(delta > 4.9e-6 && delta < 5.1e-6);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(vec![2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![2], vec![1.0, 2.0]));
        let unused = tape.variable(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let y = tape.sum(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(unused), vec![0.0; 3]);
    }

    #[test]
    fn frozen_parameter_is_a_constant() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1], vec![2.0]));
        store.get_mut(id).requires_grad = false;
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let y = tape.sum(w);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(w), vec![0.0]);
    }
}
