//! Recorded computation tape.
//!
//! Every operation appends one node holding its output value and whatever
//! it needs for the reverse sweep. Nodes only ever reference earlier nodes,
//! so the tape is topologically ordered by construction and `backward`
//! visits each node exactly once, in reverse.

use std::collections::HashMap;
use std::ops::Deref;

use super::{ParamId, ParamStore, Rng, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-element binary classification loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryLossKind {
    Bce,
    Focal { gamma: f64, alpha: f64 },
}

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

enum Buf<'a, S> {
    Owned(Vec<S>),
    Borrowed(&'a [S]),
}

impl<S> Deref for Buf<'_, S> {
    type Target = [S];

    fn deref(&self) -> &[S] {
        match self {
            Buf::Owned(v) => v,
            Buf::Borrowed(s) => s,
        }
    }
}

struct AttnSaved<S> {
    q: Var,
    k: Var,
    v: Var,
    sentinel: Option<Var>,
    /// `[batch, heads, lq, lk]`
    probs: Vec<S>,
    /// `[batch, lq]`: query rows with no admissible key.
    empty: Vec<bool>,
    batch: usize,
    lq: usize,
    lk: usize,
    dim: usize,
    heads: usize,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddSuffix(Var, Var),
    AddExpandMid { x: Var, y: Var, t: usize, d: usize },
    MaskRows { x: Var, mask: Vec<S>, d: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize },
    Conv1d { x: Var, w: Var, b: Var, col: Vec<S>, batch: usize, t: usize, cin: usize, cout: usize },
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<S>, inv_std: Vec<S>, d: usize },
    BatchNorm { x: Var, gain: Var, shift: Var, xhat: Vec<S>, inv_std: Vec<S>, valid: Vec<bool>, train: bool, c: usize },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax { x: Var, d: usize },
    Dropout { x: Var, mask: Vec<S> },
    Attention(Box<AttnSaved<S>>),
    GatherRows { x: Var, idx: Vec<usize>, d: usize },
    SetBlock { x: Var, src: Var, rows: Vec<usize>, col: usize, d: usize },
    ConcatMid { x: Var, y: Var, t: usize, d: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, include: Vec<bool>, probs: Vec<S>, count: usize, v: usize },
    Mse(Var, Var),
    BinaryLoss { p: Var, y: Vec<S>, present: Vec<bool>, kind: BinaryLossKind, count: usize },
}

struct Node<'a, S> {
    shape: Vec<usize>,
    value: Buf<'a, S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recorded forward computation. Borrows parameter storage for `'a`.
pub struct Tape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    param_leaves: HashMap<ParamId, Var>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of parameters bound with [`Tape::param`].
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[S])> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_f64(x: f64) -> (f64, f64) {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    (y, dy)
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

/// Loss value and derivative wrt `p` for one element.
fn binary_loss_elem(p: f64, y: f64, kind: BinaryLossKind) -> (f64, f64) {
    let (pc, clamped) = clamp_prob(p);
    let positive = y > 0.5;
    let (l, d) = match kind {
        BinaryLossKind::Bce => {
            if positive {
                (-pc.ln(), -1.0 / pc)
            } else {
                (-(1.0 - pc).ln(), 1.0 / (1.0 - pc))
            }
        }
        BinaryLossKind::Focal { gamma, alpha } => {
            if positive {
                let q = 1.0 - pc;
                let l = -alpha * q.powf(gamma) * pc.ln();
                let mut d = -alpha * q.powf(gamma) / pc;
                if gamma != 0.0 {
                    d += alpha * gamma * q.powf(gamma - 1.0) * pc.ln();
                }
                (l, d)
            } else {
                let q = 1.0 - pc;
                let l = -(1.0 - alpha) * pc.powf(gamma) * q.ln();
                let mut d = (1.0 - alpha) * pc.powf(gamma) / q;
                if gamma != 0.0 {
                    d -= (1.0 - alpha) * gamma * pc.powf(gamma - 1.0) * q.ln();
                }
                (l, d)
            }
        }
    };
    (l, if clamped { 0.0 } else { d })
}

impl<'a, S: Scalar> Default for Tape<'a, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool, name: &str) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric { op: name.to_string() });
        }
        self.nodes.push(Node {
            shape,
            value: Buf::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> S {
        self.value(v)[0]
    }

    /// Softmax weights saved by an attention node: `[batch, heads, lq, lk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention(a) => Some(&a.probs),
            _ => None,
        }
    }

    // ---- leaves ---------------------------------------------------------

    /// Leaf that takes part in differentiation iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Buf::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never receives a gradient).
    pub fn input(&mut self, mut t: Tensor<S>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Bind a named parameter. Repeated calls return the same leaf, so all
    /// uses of a parameter accumulate into one gradient.
    pub fn param(&mut self, store: &'a ParamStore<S>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        if let Some(&v) = self.param_leaves.get(&id) {
            return Ok(v);
        }
        let p = store.by_id(id);
        self.nodes.push(Node {
            shape: p.tensor.shape().to_vec(),
            value: Buf::Borrowed(p.tensor.data()),
            op: Op::Leaf,
            requires_grad: p.trainable(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(id, v);
        Ok(v)
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Vec<S> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = S::of(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg, "scale")
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s (bias rows, position tables).
    pub fn add_suffix(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(dim_err("add_suffix", xs, ys));
        }
        let ny = self.value(y).len();
        let yv = self.value(y);
        let out = self
            .value(x)
            .chunks(ny)
            .flat_map(|c| c.iter().zip(yv).map(|(&a, &b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(y);
        self.push(self.shape(x).to_vec(), out, Op::AddSuffix(x, y), rg, "add_suffix")
    }

    /// `x[b, t, :] + y[b, :]` for `x: [B, T, D]`, `y: [B, D]`.
    pub fn add_expand_mid(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if xs.len() != 3 || ys.len() != 2 || xs[0] != ys[0] || xs[2] != ys[1] {
            return Err(dim_err("add_expand_mid", &xs, &ys));
        }
        let (t, d) = (xs[1], xs[2]);
        let yv = self.value(y);
        let mut out = self.value(x).to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let b = r / t;
            for (o, &yy) in row.iter_mut().zip(&yv[b * d..(b + 1) * d]) {
                *o += yy;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        self.push(xs, out, Op::AddExpandMid { x, y, t, d }, rg, "add_expand_mid")
    }

    /// Multiply each row of the last axis by a per-row constant (0/1 masks).
    pub fn mask_rows(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        let rows = self.value(x).len() / d;
        if mask.len() != rows {
            return Err(dim_err("mask_rows", self.shape(x), &[mask.len()]));
        }
        let mask: Vec<S> = mask.iter().map(|&m| S::of(m)).collect();
        let out = self
            .value(x)
            .chunks(d)
            .zip(&mask)
            .flat_map(|(row, &m)| row.iter().map(move |&v| v * m))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::MaskRows { x, mask, d }, rg, "mask_rows")
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(dim_err("matmul", as_, bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(false, false, m, k, n, S::one(), self.value(a), self.value(b), S::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg, "matmul")
    }

    /// `x · w + b` over the last axis of `x`; `w: [din, dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != din {
            return Err(dim_err("linear", &xs, &ws));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(dim_err("linear.bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![S::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        S::gemm(false, false, rows, din, dout, S::one(), self.value(x), self.value(w), S::one(), &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(shape, out, Op::Linear { x, w, b, rows, din, dout }, rg, "linear")
    }

    /// Same-padded 1-D convolution over time, kernel size 3, stride 1.
    /// `x: [B, T, Cin]` (or `[T, Cin]`), `w: [Cout, Cin, 3]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, t, cin) = match xs.as_slice() {
            [t, c] => (1, *t, *c),
            [b, t, c] => (*b, *t, *c),
            _ => return Err(dim_err("conv1d", &xs, &ws)),
        };
        if ws.len() != 3 || ws[1] != cin || ws[2] != 3 {
            return Err(dim_err("conv1d", &xs, &ws));
        }
        let cout = ws[0];
        if self.shape(b) != [cout] {
            return Err(dim_err("conv1d.bias", &ws, self.shape(b)));
        }
        let xv = self.value(x);
        let kc = 3 * cin;
        let mut col = vec![S::zero(); batch * t * kc];
        for bi in 0..batch {
            for ti in 0..t {
                let dst = &mut col[(bi * t + ti) * kc..(bi * t + ti + 1) * kc];
                for k in 0..3 {
                    let src_t = ti as isize + k as isize - 1;
                    if src_t < 0 || src_t >= t as isize {
                        continue;
                    }
                    let s = (bi * t + src_t as usize) * cin;
                    dst[k * cin..(k + 1) * cin].copy_from_slice(&xv[s..s + cin]);
                }
            }
        }
        let wmat = conv_weight_matrix(self.value(w), cout, cin);
        let mut out = vec![S::zero(); batch * t * cout];
        let bv = self.value(b);
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bv);
        }
        S::gemm(false, false, batch * t, kc, cout, S::one(), &col, &wmat, S::one(), &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(shape, out, Op::Conv1d { x, w, b, col, batch, t, cin, cout }, rg, "conv1d")
    }

    // ---- normalisation --------------------------------------------------

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let (g, s) = (self.value(gain), self.value(shift));
        let rows = xv.len() / d;
        let mut xhat = vec![S::zero(); xv.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        let eps = S::of(eps);
        let dn = S::of(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + s[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, shift, xhat, inv_std, d }, rg, "layer_norm")
    }

    /// Batch normalisation over all leading axes of `x: [..., C]`.
    ///
    /// Only rows with `valid[r]` contribute to (and receive) normalisation;
    /// invalid rows come out as exact zeros. In train mode the batch
    /// statistics are returned as `(mean, biased variance)` for the caller
    /// to fold into running averages. Eval mode normalises with `running`.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        shift: Var,
        valid: &[bool],
        running: Option<(&[S], &[S])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(dim_err("batch_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let rows = xv.len() / c;
        if valid.len() != rows {
            return Err(dim_err("batch_norm.valid", self.shape(x), &[valid.len()]));
        }
        let eps_s = S::of(eps);
        let n_valid = valid.iter().filter(|&&v| v).count();
        let train = running.is_none();
        let (mean, var): (Vec<S>, Vec<S>) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                if n_valid > 0 {
                    let nv = S::of(n_valid as f64);
                    for r in (0..rows).filter(|&r| valid[r]) {
                        for j in 0..c {
                            mean[j] += xv[r * c + j];
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= nv);
                    for r in (0..rows).filter(|&r| valid[r]) {
                        for j in 0..c {
                            let dlt = xv[r * c + j] - mean[j];
                            var[j] += dlt * dlt;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= nv);
                }
                (mean, var)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps_s).sqrt()).collect();
        let (g, s) = (self.value(gain), self.value(shift));
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for r in (0..rows).filter(|&r| valid[r]) {
            for j in 0..c {
                let h = (xv[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + s[j];
            }
        }
        let stats = (train && n_valid > 0).then(|| {
            (
                mean.iter().map(|m| m.as_f64()).collect(),
                var.iter().map(|v| v.as_f64()).collect(),
            )
        });
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        let op = Op::BatchNorm {
            x,
            gain,
            shift,
            xhat,
            inv_std,
            valid: valid.to_vec(),
            train,
            c,
        };
        let v = self.push(self.shape(x).to_vec(), out, op, rg, "batch_norm")?;
        Ok((v, stats))
    }

    // ---- activations ----------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(S::zero())).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg, "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| S::of(gelu_f64(v.as_f64()).0)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg, "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .iter()
            .map(|&v| {
                let v = v.as_f64();
                // stable in both tails
                S::of(if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { v.exp() / (1.0 + v.exp()) })
            })
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg, "sigmoid")
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Softmax { x, d }, rg, "softmax")
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < p { S::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg, "dropout")
    }

    // ---- attention ------------------------------------------------------

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [B, Lq, D]`, `k, v: [B, Lk, D]`. `key_valid` (`[B, Lk]`) removes
    /// keys; `causal` additionally removes keys after the query position.
    /// Removed keys receive exactly zero weight. A query row left with no
    /// admissible key outputs `sentinel` (`[D]`), or zeros without one.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_valid: Option<&[bool]>,
        causal: bool,
        heads: usize,
        sentinel: Option<Var>,
    ) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(dim_err("attention", &qs, &ks));
        }
        let (batch, lq, dim) = (qs[0], qs[1], qs[2]);
        let lk = ks[1];
        if heads == 0 || dim % heads != 0 {
            return Err(dim_err("attention.heads", &qs, &[heads]));
        }
        if let Some(kv) = key_valid {
            if kv.len() != batch * lk {
                return Err(dim_err("attention.key_valid", &ks, &[kv.len()]));
            }
        }
        if let Some(s) = sentinel {
            if self.shape(s) != [dim] {
                return Err(dim_err("attention.sentinel", &qs, self.shape(s)));
            }
        }
        let dh = dim / heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let sv = sentinel.map(|s| self.value(s));
        let mut probs = vec![S::zero(); batch * heads * lq * lk];
        let mut empty = vec![false; batch * lq];
        let mut out = vec![S::zero(); batch * lq * dim];
        let mut scores = vec![S::zero(); lk];
        let mut allowed = vec![false; lk];
        for b in 0..batch {
            for i in 0..lq {
                let mut any = false;
                for j in 0..lk {
                    let ok = key_valid.is_none_or(|m| m[b * lk + j]) && (!causal || j <= i);
                    allowed[j] = ok;
                    any |= ok;
                }
                let orow = (b * lq + i) * dim;
                if !any {
                    empty[b * lq + i] = true;
                    if let Some(sv) = sv {
                        out[orow..orow + dim].copy_from_slice(sv);
                    }
                    continue;
                }
                for h in 0..heads {
                    let qrow = &qv[orow + h * dh..orow + (h + 1) * dh];
                    let mut max = S::neg_infinity();
                    for j in 0..lk {
                        if allowed[j] {
                            let krow = &kv[(b * lk + j) * dim + h * dh..(b * lk + j) * dim + (h + 1) * dh];
                            let s = dot(qrow, krow) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let prow = &mut probs[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                    let mut sum = S::zero();
                    for j in 0..lk {
                        if allowed[j] {
                            let e = (scores[j] - max).exp();
                            prow[j] = e;
                            sum += e;
                        }
                    }
                    let dst = &mut out[orow + h * dh..orow + (h + 1) * dh];
                    for j in 0..lk {
                        if allowed[j] {
                            prow[j] /= sum;
                            let p = prow[j];
                            let vrow = &vv[(b * lk + j) * dim + h * dh..(b * lk + j) * dim + (h + 1) * dh];
                            for (o, &x) in dst.iter_mut().zip(vrow) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || sentinel.is_some_and(|s| self.rg(s));
        let saved = AttnSaved {
            q,
            k,
            v,
            sentinel,
            probs,
            empty,
            batch,
            lq,
            lk,
            dim,
            heads,
        };
        self.push(qs, out, Op::Attention(Box::new(saved)), rg, "attention")
    }

    // ---- indexing and layout --------------------------------------------

    /// Rows of `x` viewed as `[N, D]` (D = last axis), in `idx` order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        let n = self.value(x).len() / d;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Index { op: "gather_rows", index: i, bound: n });
            }
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        if idx.is_empty() {
            return Err(Error::EmptyInput("gather_rows with no indices".into()));
        }
        let rg = self.rg(x);
        self.push(vec![idx.len(), d], out, Op::GatherRows { x, idx: idx.to_vec(), d }, rg, "gather_rows")
    }

    /// Embedding lookup: rows of `table: [V, D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Copy of `x` (viewed `[N, D]`) with `x[r, col..col+len(src)] = src` for `r in rows`.
    pub fn set_block(&mut self, x: Var, src: Var, rows: &[usize], col: usize) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        let w = self.value(src).len();
        let n = self.value(x).len() / d;
        if col + w > d {
            return Err(dim_err("set_block", self.shape(x), self.shape(src)));
        }
        let mut out = self.value(x).to_vec();
        let sv = self.value(src);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { op: "set_block", index: r, bound: n });
            }
            out[r * d + col..r * d + col + w].copy_from_slice(sv);
        }
        let rg = self.rg(x) || self.rg(src);
        let op = Op::SetBlock { x, src, rows: rows.to_vec(), col, d };
        self.push(self.shape(x).to_vec(), out, op, rg, "set_block")
    }

    /// Append `y: [B, D]` as an extra step after `x: [B, T, D]`.
    pub fn concat_mid(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if xs.len() != 3 || ys.len() != 2 || xs[0] != ys[0] || xs[2] != ys[1] {
            return Err(dim_err("concat_mid", &xs, &ys));
        }
        let (batch, t, d) = (xs[0], xs[1], xs[2]);
        let (xv, yv) = (self.value(x), self.value(y));
        let mut out = Vec::with_capacity(batch * (t + 1) * d);
        for b in 0..batch {
            out.extend_from_slice(&xv[b * t * d..(b + 1) * t * d]);
            out.extend_from_slice(&yv[b * d..(b + 1) * d]);
        }
        let rg = self.rg(x) || self.rg(y);
        self.push(vec![batch, t + 1, d], out, Op::ConcatMid { x, y, t, d }, rg, "concat_mid")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(dim_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(shape.to_vec(), out, Op::Reshape(x), rg, "reshape")
    }

    // ---- reductions and losses ------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = S::of(self.value(x).len() as f64);
        let s = self.value(x).iter().copied().sum::<S>() / n;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg, "mean")
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().map(|&v| v * v).sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::SumSquares(x), rg, "sum_squares")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [N, V]`, over rows with `include[r]` (all rows if `None`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], include: Option<&[bool]>) -> Result<Var> {
        let v = *self.shape(logits).last().unwrap();
        let n = self.value(logits).len() / v;
        if targets.len() != n {
            return Err(dim_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let include: Vec<bool> = match include {
            Some(m) if m.len() != n => return Err(dim_err("cross_entropy.include", &[n], &[m.len()])),
            Some(m) => m.to_vec(),
            None => vec![true; n],
        };
        let count = include.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::Usage("cross entropy over zero positions".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![S::zero(); n * v];
        let mut total = 0.0f64;
        for r in 0..n {
            if !include[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::Index { op: "cross_entropy", index: t, bound: v });
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            total += (lse - row[t]).as_f64();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = S::of(total / count as f64);
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            include,
            probs,
            count,
            v,
        };
        self.push(vec![1], vec![loss], op, rg, "cross_entropy")
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y).as_f64().powi(2))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![1], vec![S::of(s / n)], Op::Mse(a, b), rg, "mse")
    }

    /// Mean binary loss of probabilities `p: [N]` against 0/1 `targets`,
    /// over entries with `present[i]`. Probabilities are clamped first.
    pub fn binary_loss(&mut self, p: Var, targets: &[f64], present: &[bool], kind: BinaryLossKind) -> Result<Var> {
        let n = self.value(p).len();
        if targets.len() != n || present.len() != n {
            return Err(dim_err("binary_loss", self.shape(p), &[targets.len()]));
        }
        let count = present.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::Usage("binary loss with no present labels".into()));
        }
        let pv = self.value(p);
        let total: f64 = (0..n)
            .filter(|&i| present[i])
            .map(|i| binary_loss_elem(pv[i].as_f64(), targets[i], kind).0)
            .sum();
        let y = targets.iter().map(|&t| S::of(t)).collect();
        let rg = self.rg(p);
        let op = Op::BinaryLoss {
            p,
            y,
            present: present.to_vec(),
            kind,
            count,
        };
        self.push(vec![1], vec![S::of(total / count as f64)], op, rg, "binary_loss")
    }

    // ---- reverse sweep --------------------------------------------------

    /// Propagate from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        let mut params: Vec<(ParamId, Var)> = self.param_leaves.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_unstable_by_key(|&(id, _)| id);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, params });
        }
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node<'a, S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &[S] { &nodes[v.0].value };
        // zero-initialised gradient slot, or None for inputs without grad
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    let bv = val(*b);
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    let av = val(*a);
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x * *c);
                }
            }
            Op::AddSuffix(x, y) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
                if let Some(gy) = slot!(*y) {
                    let ny = gy.len();
                    for chunk in g.chunks(ny) {
                        add_into(gy, chunk);
                    }
                }
            }
            Op::AddExpandMid { x, y, t, d } => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
                if let Some(gy) = slot!(*y) {
                    for (r, row) in g.chunks(*d).enumerate() {
                        let b = r / t;
                        add_into(&mut gy[b * d..(b + 1) * d], row);
                    }
                }
            }
            Op::MaskRows { x, mask, d } => {
                if let Some(gx) = slot!(*x) {
                    for ((o, row), &m) in gx.chunks_mut(*d).zip(g.chunks(*d)).zip(mask) {
                        o.iter_mut().zip(row).for_each(|(o, &x)| *o += x * m);
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = slot!(*a) {
                    S::gemm(false, true, *m, *n, *k, S::one(), g, val(*b), S::one(), ga);
                }
                if let Some(gb) = slot!(*b) {
                    S::gemm(true, false, *k, *m, *n, S::one(), val(*a), g, S::one(), gb);
                }
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                if let Some(gx) = slot!(*x) {
                    S::gemm(false, true, *rows, *dout, *din, S::one(), g, val(*w), S::one(), gx);
                }
                if let Some(gw) = slot!(*w) {
                    S::gemm(true, false, *din, *rows, *dout, S::one(), val(*x), g, S::one(), gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = slot!(*b) {
                        for row in g.chunks(*dout) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, col, batch, t, cin, cout } => {
                let kc = 3 * cin;
                let rows = batch * t;
                if let Some(gw) = slot!(*w) {
                    let mut gwm = vec![S::zero(); kc * cout];
                    S::gemm(true, false, kc, rows, *cout, S::one(), col, g, S::zero(), &mut gwm);
                    for co in 0..*cout {
                        for ci in 0..*cin {
                            for k in 0..3 {
                                gw[(co * cin + ci) * 3 + k] += gwm[(k * cin + ci) * cout + co];
                            }
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for row in g.chunks(*cout) {
                        add_into(gb, row);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let wmat = conv_weight_matrix(val(*w), *cout, *cin);
                    let mut gcol = vec![S::zero(); rows * kc];
                    S::gemm(false, true, rows, *cout, kc, S::one(), g, &wmat, S::zero(), &mut gcol);
                    for bi in 0..*batch {
                        for ti in 0..*t {
                            let src = &gcol[(bi * t + ti) * kc..(bi * t + ti + 1) * kc];
                            for k in 0..3 {
                                let st = ti as isize + k as isize - 1;
                                if st < 0 || st >= *t as isize {
                                    continue;
                                }
                                let d0 = (bi * t + st as usize) * cin;
                                add_into(&mut gx[d0..d0 + cin], &src[k * cin..(k + 1) * cin]);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std, d } => {
                let gv = val(*gain);
                if let Some(gg) = slot!(*gain) {
                    for (row_g, row_h) in g.chunks(*d).zip(xhat.chunks(*d)) {
                        for j in 0..*d {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(gs) = slot!(*shift) {
                    for row in g.chunks(*d) {
                        add_into(gs, row);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let dn = S::of(*d as f64);
                    let mut dxhat = vec![S::zero(); *d];
                    for (r, (row_g, row_h)) in g.chunks(*d).zip(xhat.chunks(*d)).enumerate() {
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..*d {
                            dxhat[j] = row_g[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * row_h[j];
                        }
                        let inv = inv_std[r];
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..*d {
                            dst[j] += inv * (dxhat[j] - s1 / dn - row_h[j] * s2 / dn);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gain, shift, xhat, inv_std, valid, train, c } => {
                let gv = val(*gain);
                let c = *c;
                let rows = valid.len();
                if let Some(gg) = slot!(*gain) {
                    for r in (0..rows).filter(|&r| valid[r]) {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gs) = slot!(*shift) {
                    for r in (0..rows).filter(|&r| valid[r]) {
                        add_into(gs, &g[r * c..(r + 1) * c]);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    if *train {
                        let nv = valid.iter().filter(|&&v| v).count();
                        let nvs = S::of(nv as f64);
                        let mut s1 = vec![S::zero(); c];
                        let mut s2 = vec![S::zero(); c];
                        for r in (0..rows).filter(|&r| valid[r]) {
                            for j in 0..c {
                                let dxh = g[r * c + j] * gv[j];
                                s1[j] += dxh;
                                s2[j] += dxh * xhat[r * c + j];
                            }
                        }
                        for r in (0..rows).filter(|&r| valid[r]) {
                            for j in 0..c {
                                let dxh = g[r * c + j] * gv[j];
                                gx[r * c + j] += inv_std[j] * (dxh - s1[j] / nvs - xhat[r * c + j] * s2[j] / nvs);
                            }
                        }
                    } else {
                        for r in (0..rows).filter(|&r| valid[r]) {
                            for j in 0..c {
                                gx[r * c + j] += g[r * c + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((o, &gg), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if xv > S::zero() {
                            *o += gg;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((o, &gg), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        *o += gg * S::of(gelu_f64(xv.as_f64()).1);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((o, &gg), &y) in gx.iter_mut().zip(g).zip(node.value.iter()) {
                        *o += gg * y * (S::one() - y);
                    }
                }
            }
            Op::Softmax { x, d } => {
                if let Some(gx) = slot!(*x) {
                    for ((o, row_g), row_y) in gx.chunks_mut(*d).zip(g.chunks(*d)).zip(node.value.chunks(*d)) {
                        let dotp: S = row_g.iter().zip(row_y).map(|(&a, &b)| a * b).sum();
                        for j in 0..*d {
                            o[j] += row_y[j] * (row_g[j] - dotp);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = slot!(*x) {
                    for ((o, &gg), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gg * m;
                    }
                }
            }
            Op::Attention(a) => self.backprop_attention(a, g, grads),
            Op::GatherRows { x, idx, d } => {
                if let Some(gx) = slot!(*x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SetBlock { x, src, rows, col, d } => {
                let w = nodes[src.0].value.len();
                if let Some(gs) = slot!(*src) {
                    for &r in rows {
                        add_into(gs, &g[r * d + col..r * d + col + w]);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let mut gm = g.to_vec();
                    for &r in rows {
                        gm[r * d + col..r * d + col + w].fill(S::zero());
                    }
                    add_into(gx, &gm);
                }
            }
            Op::ConcatMid { x, y, t, d } => {
                let batch = g.len() / ((t + 1) * d);
                if let Some(gx) = slot!(*x) {
                    for b in 0..batch {
                        add_into(&mut gx[b * t * d..(b + 1) * t * d], &g[b * (t + 1) * d..b * (t + 1) * d + t * d]);
                    }
                }
                if let Some(gy) = slot!(*y) {
                    for b in 0..batch {
                        let s = b * (t + 1) * d + t * d;
                        add_into(&mut gy[b * d..(b + 1) * d], &g[s..s + d]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot!(*x) {
                    let s = g[0] / S::of(gx.len() as f64);
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::SumSquares(x) => {
                if let Some(gx) = slot!(*x) {
                    let two = S::of(2.0);
                    for (o, &xv) in gx.iter_mut().zip(val(*x)) {
                        *o += two * xv * g[0];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, include, probs, count, v } => {
                if let Some(gl) = slot!(*logits) {
                    let s = g[0] / S::of(*count as f64);
                    for (r, &inc) in include.iter().enumerate() {
                        if !inc {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for j in 0..*v {
                            row[j] += s * probs[r * v + j];
                        }
                        row[targets[r]] -= s;
                    }
                }
            }
            Op::Mse(a, b) => {
                let n = S::of(nodes[a.0].value.len() as f64);
                let diff: Vec<S> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(&x, &y)| S::of(2.0) * (x - y) / n * g[0])
                    .collect();
                if let Some(ga) = slot!(*a) {
                    add_into(ga, &diff);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(&diff).for_each(|(o, &x)| *o -= x);
                }
            }
            Op::BinaryLoss { p, y, present, kind, count } => {
                if let Some(gp) = slot!(*p) {
                    let pv = val(*p);
                    let s = g[0].as_f64() / *count as f64;
                    for i in 0..pv.len() {
                        if present[i] {
                            let d = binary_loss_elem(pv[i].as_f64(), y[i].as_f64(), *kind).1;
                            gp[i] += S::of(d * s);
                        }
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, a: &AttnSaved<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let (batch, lq, lk, dim, heads) = (a.batch, a.lq, a.lk, a.dim, a.heads);
        let dh = dim / heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (&nodes[a.q.0].value, &nodes[a.k.0].value, &nodes[a.v.0].value);
        let mut dq = vec![S::zero(); qv.len()];
        let mut dk = vec![S::zero(); kv.len()];
        let mut dv = vec![S::zero(); vv.len()];
        let mut ds_sent = vec![S::zero(); dim];
        let mut dp = vec![S::zero(); lk];
        for b in 0..batch {
            for i in 0..lq {
                let orow = (b * lq + i) * dim;
                if a.empty[b * lq + i] {
                    add_into(&mut ds_sent, &g[orow..orow + dim]);
                    continue;
                }
                for h in 0..heads {
                    let go = &g[orow + h * dh..orow + (h + 1) * dh];
                    let prow = &a.probs[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                    let mut sum = S::zero();
                    for j in 0..lk {
                        let p = prow[j];
                        if p == S::zero() {
                            dp[j] = S::zero();
                            continue;
                        }
                        let off = (b * lk + j) * dim + h * dh;
                        dp[j] = dot(go, &vv[off..off + dh]);
                        sum += p * dp[j];
                        for (o, &x) in dv[off..off + dh].iter_mut().zip(go) {
                            *o += p * x;
                        }
                    }
                    let qrow = orow + h * dh;
                    for j in 0..lk {
                        let p = prow[j];
                        if p == S::zero() {
                            continue;
                        }
                        let ds = p * (dp[j] - sum) * scale;
                        let off = (b * lk + j) * dim + h * dh;
                        for e in 0..dh {
                            dq[qrow + e] += ds * kv[off + e];
                            dk[off + e] += ds * qv[qrow + e];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(a.q, dq), (a.k, dk), (a.v, dv)] {
            if nodes[var.0].requires_grad {
                let len = buf.len();
                add_into(grads[var.0].get_or_insert_with(|| vec![S::zero(); len]), &buf);
            }
        }
        if let Some(s) = a.sentinel {
            if nodes[s.0].requires_grad {
                add_into(grads[s.0].get_or_insert_with(|| vec![S::zero(); dim]), &ds_sent);
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `[Cout, Cin, 3]` kernel as a `[3*Cin, Cout]` matrix whose row
/// `k*Cin + ci` multiplies input time offset `k - 1`.
fn conv_weight_matrix<S: Scalar>(w: &[S], cout: usize, cin: usize) -> Vec<S> {
    let mut m = vec![S::zero(); 3 * cin * cout];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..3 {
                m[(k * cin + ci) * cout + co] = w[(co * cin + ci) * 3 + k];
            }
        }
    }
    m
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Reference value of the binary loss for one element (no clamping of the
/// derivative, exposed for oracles and reporting).
pub fn binary_loss_value(p: f64, y: f64, kind: BinaryLossKind) -> f64 {
    binary_loss_elem(p, y, kind).0
}
