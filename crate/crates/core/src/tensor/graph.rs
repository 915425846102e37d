use std::collections::BTreeMap;

use super::{numel, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Abs(Var),
    AbsPow(Var, f64),
    Clamp(Var, f64, f64),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv3x3 { x: Var, k: Var, b: Var },
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Bilinear { feat: Var, coords: Var },
    WrapAngle(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// A recording tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each flat index of `out`, the flat index into a broadcast input.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for ax in (0..rank).rev() {
        in_strides[ax] = if input[ax] == 1 { 0 } else { s };
        s *= input[ax];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&in_strides).map(|(i, st)| i * st).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1usize; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        st[ax] = st[ax + 1] * shape[ax + 1];
    }
    st
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[k, m] += a[m, k]^T-style helpers for backward.
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // out[k, n] += a[m, k]^T · g[m, n]
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // out[m, k] += g[m, n] · b[k, n]^T
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

struct BilinearTap {
    offsets: [usize; 4],
    weights: [f64; 4],
    du: [f64; 4],
    dv: [f64; 4],
}

/// Bilinear taps for a continuous (u, v) grid coordinate; `None` outside the grid.
fn bilinear_tap(u: f64, v: f64, h: usize, w: usize) -> Option<BilinearTap> {
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    if !(0.0..=wf).contains(&u) || !(0.0..=hf).contains(&v) {
        return None;
    }
    let u0 = if w == 1 { 0 } else { (u.floor() as usize).min(w - 2) };
    let v0 = if h == 1 { 0 } else { (v.floor() as usize).min(h - 2) };
    let u1 = (u0 + 1).min(w - 1);
    let v1 = (v0 + 1).min(h - 1);
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    // taps: (v0,u0), (v0,u1), (v1,u0), (v1,u1)
    Some(BilinearTap {
        offsets: [v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1],
        weights: [
            (1.0 - fv) * (1.0 - fu),
            (1.0 - fv) * fu,
            fv * (1.0 - fu),
            fv * fu,
        ],
        du: [-(1.0 - fv), 1.0 - fv, -fv, fv],
        dv: [-(1.0 - fu), -fu, 1.0 - fu, fu],
    })
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn ensure_live(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::GraphConsumed)
        } else {
            Ok(())
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn emit(&mut self, op_name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let rg = self.rg(inputs);
        Ok(self.push(value, rg, op))
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Copies the current value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| mismatch(name, sa, sb))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, sa);
            let mb = broadcast_map(&out_shape, sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok(Tensor::from_parts(out_shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.emit("add", t, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.emit("sub", t, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.emit("mul", t, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.ensure_live()?;
        let t = self.value(a).map(|v| v * s);
        self.emit("scale", t, &[a], Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.ensure_live()?;
        let t = self.value(a).map(|v| v + s);
        self.emit("add_scalar", t, &[a], Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::from_parts(vec![m, n], out);
        self.emit("matmul", t, &[a, b], Op::MatMul(a, b))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("batch_matmul", &sa, &sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            matmul_raw(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor::from_parts(vec![bs, m, n], out);
        self.emit("batch_matmul", t, &[a, b], Op::BatchMatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(invalid("transpose", format!("needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = Tensor::from_parts(vec![c, r], out);
        self.emit("transpose", t, &[a], Op::Transpose(a))
    }

    fn permute_raw(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
        let in_st = strides(shape);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let n = data.len();
        let mut out = Vec::with_capacity(n);
        let rank = shape.len();
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            let off: usize = (0..rank).map(|d| idx[d] * in_st[axes[d]]).sum();
            out.push(data[off]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        (out_shape, out)
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&ax| ax >= s.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(invalid("permute", format!("bad axes {axes:?} for shape {s:?}")));
        }
        let (shape, data) = Self::permute_raw(self.value(a).data(), &s, axes);
        let t = Tensor::from_parts(shape, data);
        self.emit("permute", t, &[a], Op::Permute(a, axes.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        let t = self.value(a).clone().reshape(shape)?;
        self.emit("reshape", t, &[a], Op::Reshape(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (d[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let t = Tensor::from_parts(s, out);
        self.emit("softmax", t, &[a], Op::Softmax(a, axis))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.ensure_live()?;
        let t = self.value(a).map(|v| v.max(0.0));
        self.emit("relu", t, &[a], Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.ensure_live()?;
        let t = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.emit("sigmoid", t, &[a], Op::Sigmoid(a))
    }

    /// Natural log; non-positive inputs surface as `NonFinite`.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.ensure_live()?;
        let t = self.value(a).map(f64::ln);
        self.emit("ln", t, &[a], Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.ensure_live()?;
        let t = self.value(a).map(f64::abs);
        self.emit("abs", t, &[a], Op::Abs(a))
    }

    /// `|x|^p` for `p >= 1`.
    pub fn abs_pow(&mut self, a: Var, p: f64) -> Result<Var> {
        self.ensure_live()?;
        if p < 1.0 {
            return Err(invalid("abs_pow", format!("exponent {p} < 1")));
        }
        let t = self.value(a).map(|v| v.abs().powf(p));
        self.emit("abs_pow", t, &[a], Op::AbsPow(a, p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.ensure_live()?;
        let t = self.value(a).map(|v| v.clamp(lo, hi));
        self.emit("clamp", t, &[a], Op::Clamp(a, lo, hi))
    }

    /// Normalizes over the last axis without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.ensure_live()?;
        if eps <= 0.0 {
            return Err(invalid("layer_norm", "eps must be positive"));
        }
        let s = self.shape(a).to_vec();
        let w = *s.last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        let d = self.value(a).data();
        let rows = d.len() / w;
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &d[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let t = Tensor::from_parts(s, xhat.clone());
        self.emit("layer_norm", t, &[a], Op::LayerNorm { x: a, xhat, inv_std })
    }

    /// 3x3 convolution with zero padding 1: `x[C_in,H,W]`, `k[C_out,C_in,3,3]`, `b[C_out]`.
    pub fn conv2d_3x3(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        self.ensure_live()?;
        let (sx, sk, sb) = (self.shape(x).to_vec(), self.shape(k).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(mismatch("conv2d_3x3", &sx, &sk));
        }
        if sk[1] != sx[0] {
            return Err(invalid(
                "conv2d_3x3",
                format!("channel mismatch: input has {}, kernel expects {}", sx[0], sk[1]),
            ));
        }
        if sb != [sk[0]] {
            return Err(mismatch("conv2d_3x3", &sk, &sb));
        }
        let (cin, h, w, cout) = (sx[0], sx[1], sx[2], sk[0]);
        let (dx, dk, db) = (self.value(x).data(), self.value(k).data(), self.value(b).data());
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            let plane = &mut out[co * h * w..(co + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = db[co]);
            for ci in 0..cin {
                let src = &dx[ci * h * w..(ci + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kv = dk[((co * cin + ci) * 3 + ky) * 3 + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                            let orow = &mut plane[y * w..(y + 1) * w];
                            let (lo, hi) = match kx {
                                0 => (1, w),
                                1 => (0, w),
                                _ => (0, w.saturating_sub(1)),
                            };
                            for xo in lo..hi {
                                orow[xo] += kv * srow[xo + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![cout, h, w], out);
        self.emit("conv2d_3x3", t, &[x, k, b], Op::Conv3x3 { x, k, b })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.ensure_live()?;
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        self.emit("sum", t, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.ensure_live()?;
        let v = self.value(a);
        let t = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64);
        self.emit("mean", t, &[a], Op::Mean(a))
    }

    /// Picks rows along axis 0: `out[i] = a[idx[i]]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(a).to_vec();
        if s.is_empty() || idx.is_empty() {
            return Err(invalid("gather_rows", "needs rank >= 1 and a nonempty index"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(invalid("gather_rows", format!("row {bad} out of range {}", s[0])));
        }
        let inner: usize = s[1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&d[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let t = Tensor::from_parts(shape, out);
        self.emit("gather_rows", t, &[a], Op::GatherRows(a, idx.to_vec()))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid("narrow", format!("[{start}, {start}+{len}) on axis {axis} of {s:?}")));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            out.extend_from_slice(&d[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::from_parts(shape, out);
        self.emit("narrow", t, &[a], Op::Narrow { x: a, axis, start })
    }

    /// Row `i` of the leading axis, without the leading axis.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.narrow(a, 0, i, 1)?;
        let shape = self.shape(a)[1..].to_vec();
        self.reshape(n, &shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.ensure_live()?;
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == s0.len() && (0..s0.len()).all(|d| d == axis || s[d] == s0[d]);
            if !ok {
                return Err(mismatch("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let ext = self.shape(*p)[axis];
                let d = self.value(*p).data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let t = Tensor::from_parts(shape, out);
        self.emit("concat", t, parts, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Stacks equally-shaped vars along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut shape = vec![1];
            shape.extend_from_slice(self.shape(p));
            lifted.push(self.reshape(p, &shape)?);
        }
        self.concat(&lifted, 0)
    }

    /// Samples `feat[C,H,W]` at continuous grid coordinates `coords[N,2]`
    /// given as (column, row). Points outside the grid sample zeros.
    pub fn bilinear_sample(&mut self, feat: Var, coords: Var) -> Result<Var> {
        self.ensure_live()?;
        let (sf, sc) = (self.shape(feat).to_vec(), self.shape(coords).to_vec());
        if sf.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(mismatch("bilinear_sample", &sf, &sc));
        }
        let (c, h, w, n) = (sf[0], sf[1], sf[2], sc[0]);
        let (df, dc) = (self.value(feat).data(), self.value(coords).data());
        let mut out = vec![0.0; n * c];
        for q in 0..n {
            if let Some(tap) = bilinear_tap(dc[2 * q], dc[2 * q + 1], h, w) {
                for ch in 0..c {
                    let plane = &df[ch * h * w..(ch + 1) * h * w];
                    out[q * c + ch] = (0..4).map(|t| tap.weights[t] * plane[tap.offsets[t]]).sum();
                }
            }
        }
        let t = Tensor::from_parts(vec![n, c], out);
        self.emit("bilinear_sample", t, &[feat, coords], Op::Bilinear { feat, coords })
    }

    /// Wraps column 6 (yaw) of a `[N, 9]` box tensor into `[-pi, pi)`; gradient passes through.
    pub fn wrap_yaw(&mut self, a: Var) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] != 9 {
            return Err(invalid("wrap_yaw", format!("needs [N, 9], got {s:?}")));
        }
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(9) {
            row[6] = wrap_angle(row[6]);
        }
        self.emit("wrap_yaw", t, &[a], Op::WrapAngle(a))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape: intermediate
    /// records are released and later calls fail with `GraphConsumed`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.ensure_live()?;
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, contrib: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| nodes[v.0].value.data();
            let shp = |v: Var| nodes[v.0].value.shape();
            let out_shape = node.value.shape();
            let y = node.value.data();

            let reduce_to = |g: &[f64], target: &[usize]| -> Vec<f64> {
                if target == out_shape {
                    return g.to_vec();
                }
                let map = broadcast_map(out_shape, target);
                let mut r = vec![0.0; numel(target)];
                for (gi, &ti) in g.iter().zip(&map) {
                    r[ti] += gi;
                }
                r
            };
            let expand = |g: &[f64], target: &[usize]| -> Vec<f64> {
                if target == out_shape {
                    return g.to_vec();
                }
                let map = broadcast_map(out_shape, target);
                let mut r = vec![0.0; map.len()];
                // only used for Mul: project a broadcast input to the output index space
                for (o, &ti) in r.iter_mut().zip(&map) {
                    *o = g[ti];
                }
                r
            };

            match &node.op {
                Op::Leaf => {
                    out.leaves
                        .insert(Var(idx), Tensor::from_parts(out_shape.to_vec(), g));
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    acc(a, reduce_to(&g, shp(a)));
                    acc(b, reduce_to(&g, shp(b)));
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    acc(a, reduce_to(&g, shp(a)));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc(b, reduce_to(&neg, shp(b)));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = expand(val(a), shp(a));
                    let bv = expand(val(b), shp(b));
                    let ga: Vec<f64> = g.iter().zip(&bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = g.iter().zip(&av).map(|(g, a)| g * a).collect();
                    acc(a, reduce_to(&ga, shp(a)));
                    acc(b, reduce_to(&gb, shp(b)));
                }
                Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
                Op::AddScalar(a) | Op::Reshape(a) | Op::WrapAngle(a) => acc(*a, g),
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (shp(a)[0], shp(a)[1]);
                    let n = shp(b)[1];
                    if nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        matmul_a_bt(&g, val(b), m, k, n, &mut ga);
                        acc(a, ga);
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        matmul_at_b(val(a), &g, m, k, n, &mut gb);
                        acc(b, gb);
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (bs, m, k) = (shp(a)[0], shp(a)[1], shp(a)[2]);
                    let n = shp(b)[2];
                    if nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; bs * m * k];
                        for i in 0..bs {
                            matmul_a_bt(
                                &g[i * m * n..(i + 1) * m * n],
                                &val(b)[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                        acc(a, ga);
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; bs * k * n];
                        for i in 0..bs {
                            matmul_at_b(
                                &val(a)[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut gb[i * k * n..(i + 1) * k * n],
                            );
                        }
                        acc(b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (shp(*a)[0], shp(*a)[1]);
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[j * r + i];
                        }
                    }
                    acc(*a, ga);
                }
                Op::Permute(a, axes) => {
                    let mut inverse = vec![0; axes.len()];
                    for (d, &ax) in axes.iter().enumerate() {
                        inverse[ax] = d;
                    }
                    let (_, ga) = Self::permute_raw(&g, out_shape, &inverse);
                    acc(*a, ga);
                }
                Op::Softmax(a, axis) => {
                    let (outer, len, inner) = split_axis(out_shape, *axis);
                    let mut ga = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                ga[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    acc(*a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.iter().zip(val(*a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                    acc(*a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                    acc(*a, ga);
                }
                Op::Ln(a) => {
                    let ga = g.iter().zip(val(*a)).map(|(g, x)| g / x).collect();
                    acc(*a, ga);
                }
                Op::Abs(a) => {
                    let ga = g
                        .iter()
                        .zip(val(*a))
                        .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                        .collect();
                    acc(*a, ga);
                }
                Op::AbsPow(a, p) => {
                    let p = *p;
                    let ga = g
                        .iter()
                        .zip(val(*a))
                        .map(|(g, &x)| {
                            if x == 0.0 {
                                0.0
                            } else {
                                g * p * x.abs().powf(p - 1.0) * x.signum()
                            }
                        })
                        .collect();
                    acc(*a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g
                        .iter()
                        .zip(val(*a))
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect();
                    acc(*a, ga);
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let w = *out_shape.last().unwrap();
                    let mut ga = vec![0.0; g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        let xr = &xhat[r * w..(r + 1) * w];
                        let mg = gr.iter().sum::<f64>() / w as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for j in 0..w {
                            ga[r * w + j] = is * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                    acc(*x, ga);
                }
                Op::Conv3x3 { x, k, b } => {
                    let (x, k, b) = (*x, *k, *b);
                    let (cin, h, w) = (shp(x)[0], shp(x)[1], shp(x)[2]);
                    let cout = shp(k)[0];
                    let (dx, dk) = (val(x), val(k));
                    let need_x = nodes[x.0].requires_grad;
                    let need_k = nodes[k.0].requires_grad;
                    let mut gx = vec![0.0; if need_x { cin * h * w } else { 0 }];
                    let mut gk = vec![0.0; if need_k { cout * cin * 9 } else { 0 }];
                    let mut gb = vec![0.0; cout];
                    for co in 0..cout {
                        let gplane = &g[co * h * w..(co + 1) * h * w];
                        gb[co] = gplane.iter().sum();
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let kidx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                    let kv = dk[kidx];
                                    let mut kacc = 0.0;
                                    for yo in 0..h {
                                        let sy = yo as isize + ky as isize - 1;
                                        if sy < 0 || sy >= h as isize {
                                            continue;
                                        }
                                        let sy = sy as usize;
                                        let (lo, hi) = match kx {
                                            0 => (1, w),
                                            1 => (0, w),
                                            _ => (0, w.saturating_sub(1)),
                                        };
                                        for xo in lo..hi {
                                            let go = gplane[yo * w + xo];
                                            let si = ci * h * w + sy * w + xo + kx - 1;
                                            if need_k {
                                                kacc += go * dx[si];
                                            }
                                            if need_x {
                                                gx[si] += go * kv;
                                            }
                                        }
                                    }
                                    if need_k {
                                        gk[kidx] = kacc;
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        acc(x, gx);
                    }
                    if need_k {
                        acc(k, gk);
                    }
                    acc(b, gb);
                }
                Op::Sum(a) => acc(*a, vec![g[0]; numel(shp(*a))]),
                Op::Mean(a) => {
                    let n = numel(shp(*a));
                    acc(*a, vec![g[0] / n as f64; n]);
                }
                Op::GatherRows(a, idx) => {
                    let inner: usize = out_shape[1..].iter().product();
                    let mut ga = vec![0.0; numel(shp(*a))];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..inner {
                            ga[src * inner + j] += g[r * inner + j];
                        }
                    }
                    acc(*a, ga);
                }
                Op::Narrow { x, axis, start } => {
                    let sx = shp(*x);
                    let (outer, ext, inner) = split_axis(sx, *axis);
                    let len = out_shape[*axis];
                    let mut ga = vec![0.0; numel(sx)];
                    for o in 0..outer {
                        let dst = o * ext * inner + start * inner;
                        ga[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(*x, ga);
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = split_axis(out_shape, *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let ext = shp(p)[*axis];
                        let mut gp = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gp.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        offset += ext;
                        acc(p, gp);
                    }
                }
                Op::Bilinear { feat, coords } => {
                    let (feat, coords) = (*feat, *coords);
                    let (c, h, w) = (shp(feat)[0], shp(feat)[1], shp(feat)[2]);
                    let n = shp(coords)[0];
                    let (df, dc) = (val(feat), val(coords));
                    let mut gf = vec![0.0; c * h * w];
                    let mut gc = vec![0.0; n * 2];
                    for q in 0..n {
                        let Some(tap) = bilinear_tap(dc[2 * q], dc[2 * q + 1], h, w) else { continue };
                        for ch in 0..c {
                            let go = g[q * c + ch];
                            let base = ch * h * w;
                            for t in 0..4 {
                                let fv = df[base + tap.offsets[t]];
                                gf[base + tap.offsets[t]] += go * tap.weights[t];
                                gc[2 * q] += go * tap.du[t] * fv;
                                gc[2 * q + 1] += go * tap.dv[t] * fv;
                            }
                        }
                    }
                    acc(feat, gf);
                    acc(coords, gc);
                }
            }
        }

        self.consumed = true;
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        Ok(out)
    }
}

/// `x[N, in] · w[in, out] + b[out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let out = g.shape(b)[0];
    let b2 = g.reshape(b, &[1, out])?;
    g.add(xw, b2)
}

/// Mean squared error over all elements.
pub fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(mismatch("mse", g.shape(a), g.shape(b)));
    }
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Mean absolute error over all elements.
pub fn l1(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(mismatch("l1", g.shape(a), g.shape(b)));
    }
    let d = g.sub(a, b)?;
    let ab = g.abs(d)?;
    g.mean(ab)
}
