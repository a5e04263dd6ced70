//! Wengert-list reverse mode.
//!
//! Every operation appends a node holding its output value and the handles
//! of its operands. `backward` walks the list in reverse once; intermediate
//! gradients are transient and only leaf gradients persist (and accumulate
//! across calls until `zero_grad`).

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Mask(Var, Vec<bool>),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    ClampMin(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// How the right operand of an elementwise op lines up with the left one.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
}

fn check_finite(name: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Accumulated gradient of a leaf that requires grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t.detached(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finish(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let rg = self.any_grad(parents);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::dim("matmul expects two matrices"));
        }
        let (n, k) = ta.dims2();
        let (k2, m) = tb.dims2();
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dims {k} vs {k2}")));
        }
        let out = matmul_raw(ta.data(), tb.data(), n, k, m);
        self.finish("matmul", vec![n, m], out, Op::MatMul(a, b), &[a, b])
    }

    fn broadcast_kind(&self, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(Broadcast::Same);
        }
        let cols = ta.cols();
        let row_like = matches!(tb.shape(), [n] if *n == cols) || matches!(tb.shape(), [1, n] if *n == cols);
        if ta.shape().len() == 2 && row_like {
            Ok(Broadcast::Row)
        } else {
            Err(Error::dim(format!(
                "shapes {:?} and {:?} do not conform",
                ta.shape(),
                tb.shape()
            )))
        }
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let kind = self.broadcast_kind(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let out: Vec<f64> = match kind {
            Broadcast::Same => ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect(),
            Broadcast::Row => ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| f(*x, tb.data()[i % cols]))
                .collect(),
        };
        let shape = ta.shape().to_vec();
        self.finish(name, shape, out, op, &[a, b])
    }

    /// `a + b`; `b` may be a row vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::MathDomain("division by zero".into()));
        }
        self.elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Entries where `keep` is false become exact zeros and receive no gradient.
    pub fn mask(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        if keep.len() != ta.numel() {
            return Err(Error::contract(format!(
                "mask of {} bits for tensor of {} values",
                keep.len(),
                ta.numel()
            )));
        }
        let out = ta
            .data()
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { 0.0 })
            .collect();
        let shape = ta.shape().to_vec();
        self.finish("mask", shape, out, Op::Mask(a, keep.to_vec()), &[a])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        self.finish(name, shape, out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::MathDomain(format!("log of nonpositive value {bad}")));
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        if exponent.fract() != 0.0 && self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::MathDomain("fractional power of negative value".into()));
        }
        self.unary("pow", a, |x| x.powf(exponent), Op::Pow(a, exponent))
    }

    /// `max(a, floor)`; gradient flows only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.finish("sum", Vec::new(), vec![total], Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.finish("mean", Vec::new(), vec![m], Op::MeanAll(a), &[a])
    }

    fn reduce_axis(&mut self, a: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let t = self.value(a);
        if t.shape().len() != 2 || axis > 1 {
            return Err(Error::dim(format!("axis {axis} reduction of shape {:?}", t.shape())));
        }
        let (r, c) = t.dims2();
        let d = t.data();
        Ok(if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += d[i * c + j];
                }
            }
            (vec![c], out)
        } else {
            (vec![r], (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect())
        })
    }

    /// Sum over `axis` of a matrix; the result is a vector.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis(a, axis)?;
        self.finish("sum_axis", shape, out, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.value(a).shape().get(axis).copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::contract("mean over empty axis"));
        }
        let (shape, mut out) = self.reduce_axis(a, axis)?;
        out.iter_mut().for_each(|v| *v /= n as f64);
        self.finish("mean_axis", shape, out, Op::MeanAxis(a, axis), &[a])
    }

    /// Row-wise softmax of a matrix (or of a single vector).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let out: Vec<f64> = t.data().chunks(c).flat_map(super::softmax_row).collect();
        let shape = t.shape().to_vec();
        self.finish("softmax", shape, out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let shape = t.shape().to_vec();
        self.finish("log_softmax", shape, out, Op::LogSoftmax(a), &[a])
    }

    /// Populates gradients of every differentiable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(pg),
                }
            }
        }
        for g in self.leaf_grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2();
                let m = self.value(*b).cols();
                let mut res = Vec::new();
                if wants(*a) {
                    // dA = G · Bᵀ
                    let bd = val(*b);
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        for j in 0..k {
                            let mut s = 0.0;
                            for c in 0..m {
                                s += g[r * m + c] * bd[j * m + c];
                            }
                            da[r * k + j] = s;
                        }
                    }
                    res.push((*a, da));
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let ad = val(*a);
                    let mut db = vec![0.0; k * m];
                    for r in 0..n {
                        for j in 0..k {
                            let x = ad[r * k + j];
                            if x == 0.0 {
                                continue;
                            }
                            let row = &mut db[j * m..(j + 1) * m];
                            for c in 0..m {
                                row[c] += x * g[r * m + c];
                            }
                        }
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let row = self.value(a).shape() != self.value(b).shape();
                let cols = self.value(a).cols();
                let (ad, bd) = (val(a), val(b));
                let bat = |idx: usize| if row { bd[idx % cols] } else { bd[idx] };
                let (da, db_full): (Vec<f64>, Vec<f64>) = match &node.op {
                    Op::Add(..) => (g.to_vec(), g.to_vec()),
                    Op::Sub(..) => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    Op::Mul(..) => (
                        g.iter().enumerate().map(|(i, x)| x * bat(i)).collect(),
                        g.iter().zip(ad).map(|(x, y)| x * y).collect(),
                    ),
                    Op::Div(..) => (
                        g.iter().enumerate().map(|(i, x)| x / bat(i)).collect(),
                        g.iter()
                            .enumerate()
                            .map(|(i, x)| -x * ad[i] / (bat(i) * bat(i)))
                            .collect(),
                    ),
                    _ => unreachable!(),
                };
                let db = if row {
                    let mut acc = vec![0.0; cols];
                    for (i, v) in db_full.iter().enumerate() {
                        acc[i % cols] += v;
                    }
                    acc
                } else {
                    db_full
                };
                vec![(a, da), (b, db)]
            }
            Op::Mask(a, keep) => vec![(
                *a,
                g.iter().zip(keep).map(|(x, &k)| if k { *x } else { 0.0 }).collect(),
            )],
            Op::Relu(a) => vec![(
                *a,
                g.iter().zip(val(*a)).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect(),
            )],
            Op::Exp(a) => vec![(*a, g.iter().zip(out).map(|(x, y)| x * y).collect())],
            Op::Log(a) => vec![(*a, g.iter().zip(val(*a)).map(|(x, v)| x / v).collect())],
            Op::Pow(a, p) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(x, v)| x * p * v.powf(p - 1.0))
                    .collect(),
            )],
            Op::ClampMin(a, floor) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(x, &v)| if v > *floor { *x } else { 0.0 })
                    .collect(),
            )],
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::SumAll(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (r, c) = self.value(*a).dims2();
                let scale = match node.op {
                    Op::MeanAxis(..) => 1.0 / if *axis == 0 { r } else { c } as f64,
                    _ => 1.0,
                };
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = scale * if *axis == 0 { g[j] } else { g[i] };
                    }
                }
                vec![(*a, da)]
            }
            Op::Softmax(a) => {
                let c = self.value(*a).cols();
                let mut da = vec![0.0; out.len()];
                for (r, (s, gr)) in out.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        da[r * c + j] = s[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, da)]
            }
            Op::LogSoftmax(a) => {
                let c = self.value(*a).cols();
                let mut da = vec![0.0; out.len()];
                for (r, (ls, gr)) in out.chunks(c).zip(g.chunks(c)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        da[r * c + j] = gr[j] - ls[j].exp() * total;
                    }
                }
                vec![(*a, da)]
            }
        }
    }
}

/// Row-major `(n,k)·(k,m)`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += x * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        for &v in tape.value(s).data() {
            assert_eq!(v, 1.0 / 3.0);
        }
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // exp(k)/Σexp evaluated independently of the stable implementation.
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let expected: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / z).collect();
        assert!((expected[0] - 0.09003).abs() < 1e-5);
        assert!((expected[1] - 0.24473).abs() < 1e-5);
        assert!((expected[2] - 0.66524).abs() < 1e-5);

        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let s = tape.softmax(x).unwrap();
        for (a, b) in tape.value(s).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let row_sum: f64 = tape.value(s).data().iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i3 = tape.constant(Tensor::identity(3));
        let v = tape.constant(t(&[3, 1], &[0.3, -2.0, 7.5]));
        let out = tape.matmul(i3, v).unwrap();
        assert_eq!(tape.value(out).data(), &[0.3, -2.0, 7.5]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
        let c = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.add(a, c), Err(Error::Dimension(_))));
        let row = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, row).is_ok());
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(a), Err(Error::MathDomain(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(tape.exp(a), Err(Error::NonFinite("exp"))));
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
        // a second call accumulates
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn cross_entropy_gradient_on_equal_logits() {
        let k = 4;
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::filled(&[1, k], 0.7).with_grad());
        let ls = tape.log_softmax(logits).unwrap();
        let mut onehot = vec![0.0; k];
        onehot[2] = 1.0;
        let q = tape.constant(t(&[1, k], &onehot));
        let prod = tape.mul(ls, q).unwrap();
        let s = tape.sum(prod).unwrap();
        let loss = tape.scale(s, -1.0).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        for (j, gv) in g.iter().enumerate() {
            let expected = 0.25 - onehot[j];
            assert!((gv - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn row_broadcast_gradient_sums_over_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(&t(&[2], &[0.5, -0.5]).with_grad());
        let y = tape.mul(x, b).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[9.0, 12.0]);
    }

    #[test]
    fn masked_entries_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[3], &[1.0, -2.0, 3.0]).with_grad());
        let m = tape.mask(w, &[true, false, true]).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 0.0, 3.0]);
        let sq = tape.mul(m, m).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 0.0, 6.0]);
    }
}
