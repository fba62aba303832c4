use super::{Tensor, COSINE_DELTA, PROB_CLAMP};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Discriminant of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Affine,
    Scale,
    DivScalar,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Pow,
    Floor,
    Softmax,
    Cosine,
    CircConv,
    Concat,
    Slice,
    Reshape,
    Outer,
    Sum,
    Bce,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<Self> {
        use OpKind::*;
        let all = [
            Leaf, MatMul, Add, Sub, Mul, Affine, Scale, DivScalar, Sigmoid, Tanh, Relu, Softplus,
            Pow, Floor, Softmax, Cosine, CircConv, Concat, Slice, Reshape, Outer, Sum, Bce,
        ];
        all.into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(name))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Scale { x: Var, s: Var },
    DivScalar { x: Var, s: Var },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Pow { x: Var, gamma: Var },
    Floor { x: Var, floor: f64 },
    Softmax(Var),
    Cosine { mem: Var, key: Var },
    CircConv { w: Var, s: Var },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    Outer(Var, Var),
    Sum(Var),
    Bce { pred: Var, target: Var, mask: Var, row_mask: bool },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Affine { .. } => OpKind::Affine,
            Op::Scale { .. } => OpKind::Scale,
            Op::DivScalar { .. } => OpKind::DivScalar,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Pow { .. } => OpKind::Pow,
            Op::Floor { .. } => OpKind::Floor,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Cosine { .. } => OpKind::Cosine,
            Op::CircConv { .. } => OpKind::CircConv,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Outer(..) => OpKind::Outer,
            Op::Sum(_) => OpKind::Sum,
            Op::Bce { .. } => OpKind::Bce,
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are only ever appended, so every node's inputs precede it. A tape is
/// built fresh for each forward pass and discarded afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    fault: Option<OpKind>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    /// Scales the upstream gradient of every node of `kind` by 1.5 during
    /// backward. Only used to prove that gradient checks catch a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records an input. Parameters and constants are both leaves; only the
    /// caller decides which leaf gradients it reads back.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn scalar_operand(&self, op: &'static str, x: Var, s: Var) -> Result<f64> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::dim(op, self.shape(x), sv.shape()));
        }
        Ok(sv.data()[0])
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect());
        self.push(op, out)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(op, out))
    }

    /// Matrix product. A rank-1 left operand is a row vector and a rank-1
    /// right operand a column vector; the result drops the unit dimension.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, a_vec) = match sa.len() {
            1 => (1, sa[0], true),
            2 => (sa[0], sa[1], false),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        let (k2, n, b_vec) = match sb.len() {
            1 => (sb[0], 1, true),
            2 => (sb[0], sb[1], false),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        if k != k2 || (a_vec && b_vec) {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (i, o) in out.iter_mut().enumerate() {
                let row = &da[i * k..(i + 1) * k];
                *o = row.iter().zip(db).map(|(x, y)| x * y).sum();
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = da[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    for (o, y) in orow.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                        *o += x * y;
                    }
                }
            }
        }
        let shape = if a_vec {
            vec![n]
        } else if b_vec {
            vec![m]
        } else {
            vec![m, n]
        };
        Ok(self.push(Op::MatMul { a, b, m, k, n }, Tensor::from_parts(shape, out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, Op::Affine { x, scale }, |a| scale * a + shift)
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    /// Multiplies every entry of `x` by the one-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_operand("scale", x, s)?;
        Ok(self.map(x, Op::Scale { x, s }, |a| a * sv))
    }

    /// Divides every entry of `x` by the one-element tensor `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_operand("div_scalar", x, s)?;
        Ok(self.map(x, Op::DivScalar { x, s }, |a| a / sv))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |a| a.max(0.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), softplus)
    }

    /// `x^gamma` for strictly positive `x` and a one-element exponent.
    pub fn pow_positive(&mut self, x: Var, gamma: Var) -> Result<Var> {
        let g = self.scalar_operand("pow_positive", x, gamma)?;
        if let Some(bad) = self.data(x).iter().find(|&&a| !(a > 0.0)) {
            return Err(Error::Domain {
                op: "pow_positive",
                detail: format!("base must be > 0, found {bad}"),
            });
        }
        Ok(self.map(x, Op::Pow { x, gamma }, |a| a.powf(g)))
    }

    /// `max(x, floor)`; gradient flows only where `x >= floor`.
    pub fn floor(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, Op::Floor { x, floor }, |a| a.max(floor))
    }

    /// Softmax over all entries, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let max = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.data().iter().map(|&a| (a - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out = Tensor::from_parts(v.shape().to_vec(), exps.into_iter().map(|e| e / total).collect());
        self.push(Op::Softmax(x), out)
    }

    /// Cosine similarity between `key` and every row of `mem` (`[N, M]` or a
    /// single `[M]` vector). Returns `[N]`.
    pub fn cosine_rows(&mut self, mem: Var, key: Var) -> Result<Var> {
        let (ms, ks) = (self.shape(mem), self.shape(key));
        let width = *ms.last().unwrap_or(&1);
        if ms.len() > 2 || ks.len() != 1 || ks[0] != width {
            return Err(Error::dim("cosine_similarity", ms, ks));
        }
        let rows = self.value(mem).len() / width;
        let kd = self.data(key);
        let knorm = norm(kd);
        let md = self.data(mem);
        let out: Vec<f64> = (0..rows)
            .map(|i| {
                let row = &md[i * width..(i + 1) * width];
                let dot: f64 = row.iter().zip(kd).map(|(a, b)| a * b).sum();
                dot / (knorm * norm(row) + COSINE_DELTA)
            })
            .collect();
        Ok(self.push(Op::Cosine { mem, key }, Tensor::from_parts(vec![rows], out)))
    }

    /// Scalar cosine similarity of two equal-length vectors.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.shape(u).len() != 1 {
            return Err(Error::dim("cosine_similarity", self.shape(u), self.shape(v)));
        }
        let s = self.cosine_rows(u, v)?;
        self.reshape(s, &[])
    }

    /// Circular convolution of a weighting with an odd-width shift kernel
    /// centred on shift zero: `out[i] = sum_j w[(i - j) mod N] * s[j + K/2]`.
    pub fn circular_convolve(&mut self, w: Var, s: Var) -> Result<Var> {
        let (ws, ss) = (self.shape(w), self.shape(s));
        if ws.len() != 1 || ss.len() != 1 {
            return Err(Error::dim("circular_convolve", ws, ss));
        }
        let (n, k) = (ws[0], ss[0]);
        if k % 2 == 0 || k > n {
            return Err(Error::config(format!(
                "shift kernel width must be odd and at most the slot count; got width {k} for {n} slots"
            )));
        }
        let half = (k / 2) as isize;
        let (wd, sd) = (self.data(w), self.data(s));
        let out: Vec<f64> = (0..n)
            .map(|i| {
                sd.iter()
                    .enumerate()
                    .map(|(jj, &sj)| {
                        let shift = jj as isize - half;
                        let src = (i as isize - shift).rem_euclid(n as isize) as usize;
                        wd[src] * sj
                    })
                    .sum()
            })
            .collect();
        Ok(self.push(Op::CircConv { w, s }, Tensor::from_parts(vec![n], out)))
    }

    /// Flat concatenation of the inputs into a 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|&p| self.value(p).len()).sum());
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let len = data.len();
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::from_parts(vec![len], data)))
    }

    /// Entries `[start, start + len)` of the flattened input as a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let total = self.value(x).len();
        if len == 0 || start + len > total {
            return Err(Error::dim("slice", self.shape(x), &[start, len]));
        }
        let data = self.data(x)[start..start + len].to_vec();
        Ok(self.push(Op::Slice { x, start }, Tensor::from_parts(vec![len], data)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel_of(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(Op::Reshape(x), Tensor::from_parts(shape.to_vec(), data)))
    }

    /// Outer product of two vectors, `[N] x [M] -> [N, M]`.
    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let (us, vs) = (self.shape(u), self.shape(v));
        if us.len() != 1 || vs.len() != 1 {
            return Err(Error::dim("outer", us, vs));
        }
        let (n, m) = (us[0], vs[0]);
        let (ud, vd) = (self.data(u), self.data(v));
        let mut out = Vec::with_capacity(n * m);
        for &a in ud {
            out.extend(vd.iter().map(|&b| a * b));
        }
        Ok(self.push(Op::Outer(u, v), Tensor::from_parts(vec![n, m], out)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Masked binary cross-entropy summed over scored entries.
    ///
    /// `mask` either matches `pred` entrywise or holds one weight per row of
    /// `pred`. Targets and mask are treated as constants.
    pub fn bce_loss(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        self.same_shape("bce_loss", pred, target)?;
        let (pv, tv, mv) = (self.value(pred), self.value(target), self.value(mask));
        let row_mask = if mv.len() == pv.len() {
            false
        } else if mv.len() == pv.rows() && pv.shape().len() == 2 {
            true
        } else {
            return Err(Error::dim("bce_loss", pv.shape(), mv.shape()));
        };
        let cols = pv.cols();
        let mut loss = 0.0;
        for (idx, (&p, &t)) in pv.data().iter().zip(tv.data()).enumerate() {
            let m = if row_mask { mv.data()[idx / cols] } else { mv.data()[idx] };
            if m == 0.0 {
                continue;
            }
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= m * (t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        }
        Ok(self.push(
            Op::Bce { pred, target, mask, row_mask },
            Tensor::scalar(loss),
        ))
    }

    /// Gradient of `v` after [`Tape::backward`]; `None` if `v` does not reach
    /// the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Reverse sweep from a one-element loss node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without reset_grads".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        let Tape { nodes, grads, fault, .. } = self;
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if *fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x *= 1.5);
            }
            propagate(nodes, grads, node, &g);
            if *fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x /= 1.5);
            }
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            let (da, db) = (val(a), val(b));
            // dA = G B^T
            let ga = accumulate(grads, a, m * k);
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &db[p * n..(p + 1) * n];
                    ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            // dB = A^T G
            let gb = accumulate(grads, b, k * n);
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = da[i * k + p];
                    for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                        *o += x * gv;
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            add_into(accumulate(grads, a, g.len()), g);
            add_into(accumulate(grads, b, g.len()), g);
        }
        &Op::Sub(a, b) => {
            add_into(accumulate(grads, a, g.len()), g);
            for (o, gv) in accumulate(grads, b, g.len()).iter_mut().zip(g) {
                *o -= gv;
            }
        }
        &Op::Mul(a, b) => {
            let (da, db) = (val(a), val(b));
            for ((o, gv), bv) in accumulate(grads, a, g.len()).iter_mut().zip(g).zip(db) {
                *o += gv * bv;
            }
            for ((o, gv), av) in accumulate(grads, b, g.len()).iter_mut().zip(g).zip(da) {
                *o += gv * av;
            }
        }
        &Op::Affine { x, scale } => {
            for (o, gv) in accumulate(grads, x, g.len()).iter_mut().zip(g) {
                *o += scale * gv;
            }
        }
        &Op::Scale { x, s } => {
            let sv = val(s)[0];
            let ds: f64 = g.iter().zip(val(x)).map(|(a, b)| a * b).sum();
            for (o, gv) in accumulate(grads, x, g.len()).iter_mut().zip(g) {
                *o += sv * gv;
            }
            accumulate(grads, s, 1)[0] += ds;
        }
        &Op::DivScalar { x, s } => {
            let sv = val(s)[0];
            let ds: f64 = -g.iter().zip(val(x)).map(|(a, b)| a * b).sum::<f64>() / (sv * sv);
            for (o, gv) in accumulate(grads, x, g.len()).iter_mut().zip(g) {
                *o += gv / sv;
            }
            accumulate(grads, s, 1)[0] += ds;
        }
        &Op::Sigmoid(x) => {
            for ((o, gv), yv) in accumulate(grads, x, g.len()).iter_mut().zip(g).zip(y) {
                *o += gv * yv * (1.0 - yv);
            }
        }
        &Op::Tanh(x) => {
            for ((o, gv), yv) in accumulate(grads, x, g.len()).iter_mut().zip(g).zip(y) {
                *o += gv * (1.0 - yv * yv);
            }
        }
        &Op::Relu(x) => {
            let xd = val(x);
            for ((o, gv), xv) in accumulate(grads, x, g.len()).iter_mut().zip(g).zip(xd) {
                if *xv > 0.0 {
                    *o += gv;
                }
            }
        }
        &Op::Softplus(x) => {
            let xd = val(x);
            for ((o, gv), xv) in accumulate(grads, x, g.len()).iter_mut().zip(g).zip(xd) {
                *o += gv * sigmoid(*xv);
            }
        }
        &Op::Pow { x, gamma } => {
            let gam = val(gamma)[0];
            let xd = val(x);
            let dgam: f64 = g
                .iter()
                .zip(y)
                .zip(xd)
                .map(|((gv, yv), xv)| gv * yv * xv.ln())
                .sum();
            for ((o, gv), xv) in accumulate(grads, x, g.len()).iter_mut().zip(g).zip(xd) {
                *o += gv * gam * xv.powf(gam - 1.0);
            }
            accumulate(grads, gamma, 1)[0] += dgam;
        }
        &Op::Floor { x, floor } => {
            let xd = val(x);
            for ((o, gv), xv) in accumulate(grads, x, g.len()).iter_mut().zip(g).zip(xd) {
                if *xv >= floor {
                    *o += gv;
                }
            }
        }
        &Op::Softmax(x) => {
            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
            for ((o, gv), yv) in accumulate(grads, x, g.len()).iter_mut().zip(g).zip(y) {
                *o += yv * (gv - dot);
            }
        }
        &Op::Cosine { mem, key } => {
            let md = val(mem);
            let kd = val(key);
            let width = kd.len();
            let knorm = norm(kd);
            let mut gkey = vec![0.0; width];
            {
                let gmem = accumulate(grads, mem, md.len());
                for (i, gv) in g.iter().enumerate() {
                    if *gv == 0.0 {
                        continue;
                    }
                    let row = &md[i * width..(i + 1) * width];
                    let rnorm = norm(row);
                    let dot: f64 = row.iter().zip(kd).map(|(a, b)| a * b).sum();
                    let denom = knorm * rnorm + COSINE_DELTA;
                    let coef = dot / (denom * denom);
                    // d/dk: row/D - dot/D^2 * |row| * k/|k|
                    let kfac = if knorm > 0.0 { coef * rnorm / knorm } else { 0.0 };
                    let rfac = if rnorm > 0.0 { coef * knorm / rnorm } else { 0.0 };
                    for j in 0..width {
                        gkey[j] += gv * (row[j] / denom - kfac * kd[j]);
                        gmem[i * width + j] += gv * (kd[j] / denom - rfac * row[j]);
                    }
                }
            }
            add_into(accumulate(grads, key, width), &gkey);
        }
        &Op::CircConv { w, s } => {
            let (wd, sd) = (val(w), val(s));
            let (n, k) = (wd.len(), sd.len());
            let half = (k / 2) as isize;
            let mut gw = vec![0.0; n];
            let mut gs = vec![0.0; k];
            for (i, gv) in g.iter().enumerate() {
                for (jj, sj) in sd.iter().enumerate() {
                    let src = (i as isize - (jj as isize - half)).rem_euclid(n as isize) as usize;
                    gw[src] += gv * sj;
                    gs[jj] += gv * wd[src];
                }
            }
            add_into(accumulate(grads, w, n), &gw);
            add_into(accumulate(grads, s, k), &gs);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                add_into(accumulate(grads, p, len), &g[offset..offset + len]);
                offset += len;
            }
        }
        &Op::Slice { x, start } => {
            let len = nodes[x.0].value.len();
            add_into(&mut accumulate(grads, x, len)[start..start + g.len()], g);
        }
        &Op::Reshape(x) => {
            add_into(accumulate(grads, x, g.len()), g);
        }
        &Op::Outer(u, v) => {
            let (ud, vd) = (val(u), val(v));
            let m = vd.len();
            let mut gu = vec![0.0; ud.len()];
            let mut gv = vec![0.0; m];
            for (i, uv) in ud.iter().enumerate() {
                let grow = &g[i * m..(i + 1) * m];
                gu[i] = grow.iter().zip(vd).map(|(a, b)| a * b).sum();
                for (o, gg) in gv.iter_mut().zip(grow) {
                    *o += gg * uv;
                }
            }
            add_into(accumulate(grads, u, ud.len()), &gu);
            add_into(accumulate(grads, v, m), &gv);
        }
        &Op::Sum(x) => {
            let len = nodes[x.0].value.len();
            let gx = accumulate(grads, x, len);
            for o in gx.iter_mut() {
                *o += g[0];
            }
        }
        &Op::Bce { pred, target, mask, row_mask } => {
            let pv = &nodes[pred.0].value;
            let cols = pv.cols();
            let (pd, td, mk) = (pv.data(), val(target), val(mask));
            let gp: Vec<f64> = pd
                .iter()
                .zip(td)
                .enumerate()
                .map(|(idx, (&p, &t))| {
                    let m = if row_mask { mk[idx / cols] } else { mk[idx] };
                    if m == 0.0 || p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                        0.0
                    } else {
                        g[0] * m * (-t / p + (1.0 - t) / (1.0 - p))
                    }
                })
                .collect();
            add_into(accumulate(grads, pred, pd.len()), &gp);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
