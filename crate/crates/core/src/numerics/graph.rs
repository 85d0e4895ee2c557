//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs precede it, so the node list is
//! already a topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Element, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Silu(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
    Mse(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Conv2d(Box<ConvSaved<T>>),
    UpsampleNearest2(Var),
    AddChannel(Var, Var),
    BilinearSample { feat: Var, points: Vec<[f64; 2]> },
}

struct ConvSaved<T> {
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    cols: Vec<T>,
    geom: ConvGeom,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    leaf: bool,
}

/// A recording of tensor operations. Confined to one thread of execution.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Leading-dimension broadcast: `b` must equal `a`, or be a suffix of it.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, leaf: false });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf whose gradient will be reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, leaf: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, leaf: true });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let bd = bv.data();
        let bl = bd.len().max(1);
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % bl])).collect();
        Ok((Tensor::new(av.shape(), data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.nodes[a.0].value.map(f);
        let rg = self.rg(&[a]);
        self.push(v, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let last = *av
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut out = av.data().to_vec();
        if last > 0 {
            for row in out.chunks_mut(last) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x = *x / s;
                }
            }
        }
        let v = Tensor::new(av.shape(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Softmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let n = T::from_f64(av.len().max(1) as f64);
        let s = av.data().iter().copied().sum::<T>() / n;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `sum |a - b|`.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err("l1", av.shape(), bv.shape()));
        }
        let s = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::L1(a, b), rg))
    }

    /// `mean (a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err("mse", av.shape(), bv.shape()));
        }
        let n = T::from_f64(av.len().max(1) as f64);
        let s = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// Matrix product of 2-d operands, optionally transposing either side.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), rsa, csa, bv.data(), rsb, csb, T::zero(), &mut out);
        let v = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul { a, b, ta, tb, m, k, n }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let v = permute_tensor(av, perm)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let s0 = self.nodes[first.0].value.shape().to_vec();
        if axis >= s0.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != s0.len()
                || s[..axis] != s0[..axis]
                || s[axis + 1..] != s0[axis + 1..]
            {
                return Err(shape_err("concat", &s0, s));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let pv = &self.nodes[p.0].value;
                let block = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let v = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let s = av.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{end} on axis {axis} of {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&av.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        let v = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Slice { x: a, axis, start }, rg))
    }

    /// 2-d convolution. `x`: [N, Ci, H, W], `w`: [Co, Ci, kh, kw], `b`: [Co].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(shape_err("conv2d", xs, ws));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", xs, ws));
        }
        if let Some(b) = b {
            let bs = self.nodes[b.0].value.shape();
            if bs != [co] {
                return Err(shape_err("conv2d bias", ws, bs));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { n, ci, h, w: wd, co, kh, kw, ho, wo };
        let kk = ci * kh * kw;
        let hw = ho * wo;
        let mut cols = vec![T::zero(); n * kk * hw];
        for img in 0..n {
            im2col(
                &xv.data()[img * ci * h * wd..(img + 1) * ci * h * wd],
                &geom,
                stride,
                pad,
                &mut cols[img * kk * hw..(img + 1) * kk * hw],
            );
        }
        let mut out = vec![T::zero(); n * co * hw];
        for img in 0..n {
            T::gemm(
                co,
                kk,
                hw,
                T::one(),
                wv.data(),
                kk as isize,
                1,
                &cols[img * kk * hw..],
                hw as isize,
                1,
                T::zero(),
                &mut out[img * co * hw..(img + 1) * co * hw],
            );
        }
        if let Some(b) = b {
            let bd = self.nodes[b.0].value.data();
            for img in 0..n {
                for c in 0..co {
                    for o in &mut out[(img * co + c) * hw..(img * co + c + 1) * hw] {
                        *o += bd[c];
                    }
                }
            }
        }
        let v = Tensor::new(&[n, co, ho, wo], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(v, Op::Conv2d(Box::new(ConvSaved { x, w, b, stride, pad, cols, geom })), rg))
    }

    /// Nearest-neighbour 2x upsampling of [N, C, H, W].
    pub fn upsample_nearest2(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let s = av.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample expects 4-d input, got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![T::zero(); nc * 4 * h * w];
        let d = av.data();
        for p in 0..nc {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + x] = d[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let v = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::UpsampleNearest2(a), rg))
    }

    /// Adds a per-(image, channel) offset `b` [N, C] to `x` [N, C, H, W].
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let (xs, bs) = (xv.shape(), bv.shape());
        if xs.len() != 4 || bs != [xs[0], xs[1]] {
            return Err(shape_err("add_channel", xs, bs));
        }
        let hw = xs[2] * xs[3];
        let bd = bv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bd[i / hw]).collect();
        let v = Tensor::new(xs, data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(v, Op::AddChannel(x, b), rg))
    }

    /// Samples `feat` [C, H, W] at sub-pixel `points` (x, y), returning [P, C].
    /// Coordinates outside the map are clamped to the border.
    pub fn bilinear_sample(&mut self, feat: Var, points: &[[f64; 2]]) -> Result<Var> {
        let fv = &self.nodes[feat.0].value;
        let s = fv.shape();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Shape(format!("bilinear_sample expects [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = fv.data();
        let mut out = Vec::with_capacity(points.len() * c);
        for p in points {
            let taps = bilinear_taps(p[0], p[1], h, w);
            for ch in 0..c {
                let plane = &d[ch * h * w..];
                let mut acc = T::zero();
                for &(idx, wt) in &taps {
                    acc += plane[idx] * T::from_f64(wt);
                }
                out.push(acc);
            }
        }
        let v = Tensor::new(&[points.len(), c], out)?;
        let rg = self.rg(&[feat]);
        Ok(self.push(v, Op::BilinearSample { feat, points: points.to_vec() }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every `param` leaf it
    /// depends on; leaves it does not depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if node.leaf && node.requires_grad {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                    Some(Tensor::new(node.value.shape(), data).expect("gradient shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if wants(*a) {
                    accumulate(grads, *a, g.len(), |i| g[i]);
                }
                if wants(*b) {
                    let bl = val(*b).len();
                    let gb = grad_slot(grads, *b, bl);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % bl] += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let bl = bd.len();
                let div = matches!(node.op, Op::Div(..));
                if wants(*a) {
                    if div {
                        accumulate(grads, *a, g.len(), |i| g[i] / bd[i % bl]);
                    } else {
                        accumulate(grads, *a, g.len(), |i| g[i] * bd[i % bl]);
                    }
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, bl);
                    for (i, &gi) in g.iter().enumerate() {
                        let y = bd[i % bl];
                        gb[i % bl] += if div { -gi * ad[i] / (y * y) } else { gi * ad[i] };
                    }
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.len(), |i| g[i] * *c),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, g.len(), |i| g[i]),
            Op::Exp(a) => {
                let y = node.value.data();
                accumulate(grads, *a, g.len(), |i| g[i] * y[i]);
            }
            Op::Ln(a) => {
                let x = val(*a).data();
                accumulate(grads, *a, g.len(), |i| g[i] / x[i]);
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                let two = T::from_f64(2.0);
                accumulate(grads, *a, g.len(), |i| g[i] / (two * y[i]));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                accumulate(grads, *a, g.len(), |i| g[i] * y[i] * (T::one() - y[i]));
            }
            Op::Silu(a) => {
                let x = val(*a).data();
                accumulate(grads, *a, g.len(), |i| {
                    let s = sigmoid(x[i]);
                    g[i] * s * (T::one() + x[i] * (T::one() - s))
                });
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                accumulate(grads, *a, g.len(), |i| g[i] * signum0(x[i]));
            }
            Op::Square(a) => {
                let x = val(*a).data();
                let two = T::from_f64(2.0);
                accumulate(grads, *a, g.len(), |i| g[i] * two * x[i]);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let last = *node.value.shape().last().unwrap_or(&1);
                let ga = grad_slot(grads, *a, y.len());
                for r in 0..y.len() / last.max(1) {
                    let span = r * last..(r + 1) * last;
                    let dot: T = y[span.clone()].iter().zip(&g[span.clone()]).map(|(&p, &q)| p * q).sum();
                    for i in span {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                }
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, n, |_| g[0]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let s = g[0] / T::from_f64(n.max(1) as f64);
                accumulate(grads, *a, n, |_| s);
            }
            Op::L1(a, b) | Op::Mse(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let n = ad.len();
                let l1 = matches!(node.op, Op::L1(..));
                let c = if l1 { g[0] } else { g[0] * T::from_f64(2.0 / n.max(1) as f64) };
                let d = |i: usize| {
                    if l1 {
                        c * signum0(ad[i] - bd[i])
                    } else {
                        c * (ad[i] - bd[i])
                    }
                };
                if wants(*a) {
                    accumulate(grads, *a, n, d);
                }
                if wants(*b) {
                    accumulate(grads, *b, n, |i| -d(i));
                }
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (val(*a).data(), val(*b).data());
                // effective operand strides
                let (rsa, csa) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                if wants(*a) {
                    let ga = grad_slot(grads, *a, m * k);
                    if *ta {
                        // dA^T (k x m) = B_eff (k x n) @ dC^T (n x m)
                        T::gemm(k, n, m, T::one(), bd, rsb, csb, g, 1, n as isize, T::one(), ga);
                    } else {
                        // dA (m x k) = dC (m x n) @ B_eff^T (n x k)
                        T::gemm(m, n, k, T::one(), g, n as isize, 1, bd, csb, rsb, T::one(), ga);
                    }
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, k * n);
                    if *tb {
                        // dB^T (n x k) = dC^T (n x m) @ A_eff (m x k)
                        T::gemm(n, m, k, T::one(), g, 1, n as isize, ad, rsa, csa, T::one(), gb);
                    } else {
                        // dB (k x n) = A_eff^T (k x m) @ dC (m x n)
                        T::gemm(k, m, n, T::one(), ad, csa, rsa, g, n as isize, 1, T::one(), gb);
                    }
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                let back = permute_tensor(&gt, &inv)?;
                let bd = back.data();
                accumulate(grads, *a, bd.len(), |i| bd[i]);
            }
            Op::Concat(parts, axis) => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for p in parts {
                    let width = val(*p).shape()[*axis];
                    if wants(*p) {
                        let gp = grad_slot(grads, *p, outer * width * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + width) * inner];
                            for (d, &x) in gp[o * width * inner..(o + 1) * width * inner].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let width = node.value.shape()[*axis];
                let gx = grad_slot(grads, *x, val(*x).len());
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    for (d, &v) in gx[base..base + width * inner]
                        .iter_mut()
                        .zip(&g[o * width * inner..(o + 1) * width * inner])
                    {
                        *d += v;
                    }
                }
            }
            Op::Conv2d(saved) => self.conv_backward(saved, g, grads),
            Op::UpsampleNearest2(a) => {
                let s = val(*a).shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let ga = grad_slot(grads, *a, nc * h * w);
                for p in 0..nc {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            ga[(p * h + y / 2) * w + x / 2] += g[(p * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
            }
            Op::AddChannel(x, b) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                if wants(*x) {
                    accumulate(grads, *x, g.len(), |i| g[i]);
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, s[0] * s[1]);
                    for (i, &v) in g.iter().enumerate() {
                        gb[i / hw] += v;
                    }
                }
            }
            Op::BilinearSample { feat, points } => {
                let s = val(*feat).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let gf = grad_slot(grads, *feat, c * h * w);
                for (pi, p) in points.iter().enumerate() {
                    let taps = bilinear_taps(p[0], p[1], h, w);
                    for ch in 0..c {
                        let gv = g[pi * c + ch];
                        for &(idx, wt) in &taps {
                            gf[ch * h * w + idx] += gv * T::from_f64(wt);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn conv_backward(&self, saved: &ConvSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let geom = saved.geom;
        let kk = geom.ci * geom.kh * geom.kw;
        let hw = geom.ho * geom.wo;
        let wv = self.nodes[saved.w.0].value.data();
        if self.nodes[saved.w.0].requires_grad {
            let gw = grad_slot(grads, saved.w, geom.co * kk);
            for img in 0..geom.n {
                // dW (co x kk) += dOut (co x hw) @ cols^T (hw x kk)
                T::gemm(
                    geom.co,
                    hw,
                    kk,
                    T::one(),
                    &g[img * geom.co * hw..],
                    hw as isize,
                    1,
                    &saved.cols[img * kk * hw..],
                    1,
                    hw as isize,
                    T::one(),
                    gw,
                );
            }
        }
        if let Some(b) = saved.b {
            if self.nodes[b.0].requires_grad {
                let gb = grad_slot(grads, b, geom.co);
                for img in 0..geom.n {
                    for c in 0..geom.co {
                        gb[c] += g[(img * geom.co + c) * hw..(img * geom.co + c + 1) * hw]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                }
            }
        }
        if self.nodes[saved.x.0].requires_grad {
            let plane = geom.ci * geom.h * geom.w;
            let mut dcols = vec![T::zero(); kk * hw];
            let gx = grad_slot(grads, saved.x, geom.n * plane);
            for img in 0..geom.n {
                // dcols (kk x hw) = W^T (kk x co) @ dOut (co x hw)
                T::gemm(
                    kk,
                    geom.co,
                    hw,
                    T::one(),
                    wv,
                    1,
                    kk as isize,
                    &g[img * geom.co * hw..],
                    hw as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                );
                col2im(&dcols, &geom, saved.stride, saved.pad, &mut gx[img * plane..(img + 1) * plane]);
            }
        }
    }
}

fn signum0<T: Element>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn grad_slot<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl Fn(usize) -> T) {
    let slot = grad_slot(grads, v, len);
    for (i, s) in slot.iter_mut().enumerate() {
        *s += f(i);
    }
}

/// The (flat index, weight) taps of a border-clamped bilinear lookup.
pub(crate) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// Output columns `[lo, hi)` whose input column `ox * stride + k - pad` lies
/// inside `[0, w)`.
fn valid_cols(k: usize, stride: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if w + pad > k { (w + pad - k).div_ceil(stride).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, stride: usize, pad: usize, cols: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.ci {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * hw;
                let (lo, hi) = valid_cols(kj, stride, pad, g.w, g.wo);
                for oy in 0..g.ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * stride + kj - pad;
                        if stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            for (i, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[first + i * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, stride: usize, pad: usize, dx: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.ci {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * hw;
                let (lo, hi) = valid_cols(kj, stride, pad, g.w, g.wo);
                if lo >= hi {
                    continue;
                }
                let first = lo * stride + kj - pad;
                for oy in 0..g.ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w + first;
                    let src = &cols[row + oy * g.wo + lo..row + oy * g.wo + hi];
                    if stride == 1 {
                        for (d, &v) in dx[base..base + src.len()].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in src.iter().enumerate() {
                            dx[base + i * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn permute_tensor<T: Element>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let s = t.shape();
    let mut seen = vec![false; s.len()];
    if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Shape(format!("invalid permutation {perm:?} for {s:?}")));
    }
    let mut strides = vec![1usize; s.len()];
    for i in (0..s.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = t.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; s.len()];
    let src = t.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        data.push(src[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, data)
}
