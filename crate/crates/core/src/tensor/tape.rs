use alloc::format;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::map::SparseMap;
use super::{numel, Tensor};
use crate::{Error, Real, Result};

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
    Matmul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Map(Var, Arc<SparseMap<T>>),
    Concat(Vec<Var>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Abs(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Matmul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Reshape(..) => "reshape",
            Op::Map(..) => "map",
            Op::Concat(..) => "concat",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Ln(..) => "ln",
            Op::Abs(..) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed differentiable ops.
///
/// Values are appended in execution order and `backward` walks them in
/// exact reverse order. A tape is single-threaded; build one per forward
/// pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t.strip_grad(),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated into a leaf by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let shape: Vec<usize> = self.shape(a).into();
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(&shape, data, op, &[a])
    }

    fn broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(Error::shape(name, sa, sb));
        }
        let shape: Vec<usize> = sa.into();
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        let data = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % nb]))
            .collect();
        self.push(&shape, data, op, &[a, b])
    }

    /// `a + b`, with `b` broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise division of equal shapes.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("div", self.shape(a), self.shape(b)));
        }
        self.broadcast("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// `a[.., k] · b[k, n] -> [.., n]`; leading dims of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(sa) / k;
        let mut shape: Vec<usize> = sa.into();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(&shape, out, Op::Matmul(a, b), &[a, b])
    }

    /// Batched product over matching leading dims:
    /// `a[.., m, k] · b[.., k, n]`, or `a · bᵀ` with `b[.., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(Error::shape("bmm", sa, sb));
        }
        let groups = numel(&sa[..r - 2]);
        let mut shape: Vec<usize> = sa[..r - 2].into();
        shape.push(m);
        shape.push(n);
        let mut out = vec![T::zero(); groups * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for g in 0..groups {
            let ag = &da[g * m * k..(g + 1) * m * k];
            let bg = &db[g * k * n..(g + 1) * k * n];
            let cg = &mut out[g * m * n..(g + 1) * m * n];
            if trans_b {
                gemm_nt(ag, bg, cg, m, k, n);
            } else {
                gemm_nn(ag, bg, cg, m, k, n);
            }
        }
        self.push(&shape, out, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).numel() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        self.push(shape, data, Op::Reshape(a), &[a])
    }

    /// Applies a fixed linear map to the flattened value of `a`.
    pub fn map(&mut self, a: Var, map: Arc<SparseMap<T>>, shape: &[usize]) -> Result<Var> {
        if map.in_len() != self.value(a).numel() || map.out_len() != numel(shape) {
            return Err(Error::Shape {
                op: "map",
                lhs: self.shape(a).into(),
                rhs: shape.into(),
            });
        }
        let data = map.apply(self.data(a));
        self.push(shape, data, Op::Map(a, map), &[a])
    }

    /// Concatenation along the last dim; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let lead: Vec<usize> = {
            let s = self.shape(*first);
            s[..s.len() - 1].into()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", &lead, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(&shape, out, Op::Concat(parts.into()), parts)
    }

    /// Softmax over the last dim, with max-subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last dim where `allowed[i] == false` entries act as
    /// `-inf` logits and receive exactly zero weight.
    pub fn masked_softmax_lastdim(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(a).numel() {
            return Err(Error::Contract(format!(
                "mask length {} does not cover tensor {:?}",
                allowed.len(),
                self.shape(a)
            )));
        }
        self.softmax_impl(a, Some(allowed))
    }

    fn softmax_impl(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let shape: Vec<usize> = self.shape(a).into();
        let d = *shape.last().unwrap();
        let x = self.data(a);
        let mut out = vec![T::zero(); x.len()];
        for (r, (xr, or)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let ok = |j: usize| allowed.map_or(true, |m| m[r * d + j]);
            let mut mx = T::neg_infinity();
            for (j, &v) in xr.iter().enumerate() {
                if ok(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                return Err(Error::Contract(format!("softmax row {r} fully masked")));
            }
            let mut sum = T::zero();
            for (j, (&v, o)) in xr.iter().zip(or.iter_mut()).enumerate() {
                if ok(j) {
                    *o = (v - mx).exp();
                    sum += *o;
                }
            }
            for o in or.iter_mut() {
                *o /= sum;
            }
        }
        self.push(&shape, out, Op::Softmax(a), &[a])
    }

    /// Normalizes each row of the last dim to zero mean and unit variance
    /// (epsilon 1e-5 inside the square root), then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape: Vec<usize> = self.shape(x).into();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        let dn = T::c(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::c(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.push(
            &shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), |x| {
            let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
            T::c(0.5) * x * (T::one() + u.tanh())
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum::<T>();
        self.push(&[1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let s = d.iter().copied().sum::<T>() / T::c(d.len() as f64);
        self.push(&[1], vec![s], Op::Mean(a), &[a])
    }

    /// Resets every accumulated gradient to zero so another loss can be
    /// differentiated on the same recorded forward pass.
    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Reverse pass from a scalar. Every differentiable leaf reachable from
    /// `loss` has dLoss/dLeaf added into its gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("backward".into()));
                }
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    let nb = gb.len();
                    for (k, &gv) in g.iter().enumerate() {
                        if neg {
                            gb[k % nb] -= gv;
                        } else {
                            gb[k % nb] += gv;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                self.acc(grads, *a, |ga| {
                    for (k, v) in ga.iter_mut().enumerate() {
                        *v += g[k] * db[k % nb];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for (k, &gv) in g.iter().enumerate() {
                        gb[k % nb] += gv * da[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for (k, v) in ga.iter_mut().enumerate() {
                        *v += g[k] / db[k];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for (k, v) in gb.iter_mut().enumerate() {
                        *v -= g[k] * da[k] / (db[k] * db[k]);
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |ga| {
                for (v, &gv) in ga.iter_mut().zip(g) {
                    *v += gv * *c;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, |ga| add_into(ga, g)),
            Op::Matmul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n;
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| gemm_nt(g, db, ga, m, n, k));
                self.acc(grads, *b, |gb| gemm_tn(da, g, gb, k, m, n));
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = node.value.shape()[r - 1];
                let groups = g.len() / (m * n);
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bg = &db[gi * k * n..(gi + 1) * k * n];
                        let out = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            // b is [n, k]
                            gemm_nn(gg, bg, out, m, n, k);
                        } else {
                            gemm_nt(gg, bg, out, m, n, k);
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let ag = &da[gi * m * k..(gi + 1) * m * k];
                        let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gg, ag, out, n, m, k);
                        } else {
                            gemm_tn(ag, gg, out, k, m, n);
                        }
                    }
                });
            }
            Op::Map(a, map) => self.acc(grads, *a, |ga| map.apply_transpose_acc(g, ga)),
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.shape(p).last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    self.acc(grads, p, |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::Softmax(a) => {
                let d = *node.value.shape().last().unwrap();
                self.acc(grads, *a, |ga| {
                    for ((pr, gr), gar) in out.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: T = pr.iter().zip(gr).map(|(&p, &gv)| p * gv).sum();
                        for j in 0..d {
                            gar[j] += pr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.data(*gamma);
                let d = gm.len();
                self.acc(grads, *gamma, |gg| {
                    for (r, gr) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += gr[j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                self.acc(grads, *x, |gx| {
                    let dn = T::c(d as f64);
                    for (r, gr) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            gx[r * d + j] += rstd[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        let xv = x[k];
                        let u = T::c(GELU_K) * (xv + T::c(GELU_C) * xv * xv * xv);
                        let t = u.tanh();
                        let du = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * xv * xv);
                        let d = T::c(0.5) * (T::one() + t)
                            + T::c(0.5) * xv * (T::one() - t * t) * du;
                        ga[k] += g[k] * d;
                    }
                });
            }
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * out[k] * (T::one() - out[k]);
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * (T::one() - out[k] * out[k]);
                }
            }),
            Op::Ln(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] / x[k];
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        let s = if x[k] > T::zero() {
                            T::one()
                        } else if x[k] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        ga[k] += g[k] * s;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.data(*a);
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        if x[k] >= *lo && x[k] <= *hi {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => self.acc(grads, *a, |ga| {
                let s = g[0] / T::c(ga.len() as f64);
                ga.iter_mut().for_each(|v| *v += s);
            }),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t(&[2, 2], &[5.0, -1.0, 2.5, 7.0]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.data(y), tape.data(x));

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[0.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.data(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let p = tape.softmax_lastdim(x).unwrap();
        for &v in tape.data(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let p = tape.softmax_lastdim(x).unwrap();
        assert!((tape.data(p)[0] - 1.0).abs() < 1e-12);
        assert!(tape.data(p)[1].abs() < 1e-12);

        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let p = tape.softmax_lastdim(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, &v) in tape.data(p).iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_gives_exact_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[3.0, 9.0, 1.0, 1.0]));
        let p = tape
            .masked_softmax_lastdim(x, &[true, false, true, true])
            .unwrap();
        assert_eq!(tape.data(p)[0], 1.0);
        assert_eq!(tape.data(p)[1], 0.0);
        assert!(tape.masked_softmax_lastdim(x, &[false, false, true, true]).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(t(&[2], &[1.0, 1.0]));
        let zero = tape.constant(t(&[2], &[0.0, 0.0]));
        let c = tape.constant(t(&[2], &[4.0, 4.0]));
        let y = tape.layer_norm(c, one, zero).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0]);

        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, one, zero).unwrap();
        assert!((tape.data(y)[0] + 1.0).abs() < 1e-3);
        assert!((tape.data(y)[1] - 1.0).abs() < 1e-3);

        let beta = tape.constant(t(&[2], &[0.25, -2.0]));
        let y = tape.layer_norm(x, zero, beta).unwrap();
        assert_eq!(tape.data(y), &[0.25, -2.0]);
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_ignores_ops_recorded_after_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let later = tape.scale(x, 10.0).unwrap();
        let _ = tape.sum(later).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 1.0]));
        assert!(matches!(tape.ln(x), Err(Error::NonFinite(_))));
        let big = tape.constant(t(&[1], &[1e308]));
        assert!(tape.scale(big, 10.0).is_err());
    }
}
