use std::rc::Rc;

use super::scalar::{gemm, MatView, Scalar};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulLastDim(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<S>,
    },
    Modulate {
        xn: Var,
        gb: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<S>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    Sum(Var),
    MaskedMse {
        pred: Var,
        target: Vec<S>,
        mask: Vec<bool>,
        denom: S,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<S>,
        denom: S,
    },
}

#[derive(Clone)]
struct AttnGeom {
    batch: usize,
    seq: usize,
    heads: usize,
    width: usize,
    /// `seq × seq`, true = attend-allowed.
    mask: Rc<[bool]>,
    /// `batch × seq`, false for padded keys.
    key_valid: Rc<[bool]>,
}

impl AttnGeom {
    #[inline]
    fn allowed(&self, b: usize, q: usize, k: usize) -> bool {
        self.mask[q * self.seq + k] && (q == k || self.key_valid[b * self.seq + k])
    }
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Tape of operations. Node order is a topological order.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Vec<S>>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, rest)) => (rest.iter().product(), c),
        None => (1, 1),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaf_grads: Vec::new(), grad_enabled: true }
    }

    /// A graph that records values only; nothing requires gradient.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), leaf_grads: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad: requires_grad && self.grad_enabled });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Snapshot of a node as a standalone tensor (gradient included for leaves).
    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape");
        if let Some(g) = self.grad(v) {
            t.add_grad(g);
        }
        t
    }

    /// Constant input; never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<S>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch { op: "constant", lhs: shape, rhs: vec![values.len()] });
        }
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    /// Leaf copied from `t`, tracking gradient when `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Adds this graph's gradient for `v` into `t`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<S>) {
        if let Some(g) = self.grad(v) {
            t.add_grad(g);
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * p];
        gemm(
            self.value(a),
            MatView::dense(m, n),
            self.value(b),
            MatView::dense(n, p),
            &mut out,
            MatView::dense(m, p),
            S::one(),
            S::zero(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, p], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    fn check_last_dim(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let (_, c) = rows_cols(self.shape(x));
        if self.shape(b) != [c] {
            return Err(Error::ShapeMismatch { op, lhs: self.shape(x).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(c)
    }

    /// `x + b` with `b` broadcast over the last dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.check_last_dim("add_bias", x, b)?;
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(bias).for_each(|(v, &b)| *v = *v + b);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, b), rg))
    }

    /// `x ⊙ g` with `g` broadcast over the last dimension.
    pub fn mul_last_dim(&mut self, x: Var, g: Var) -> Result<Var> {
        let c = self.check_last_dim("mul_last_dim", x, g)?;
        let gain = self.value(g);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(gain).for_each(|(v, &g)| *v = *v * g);
        }
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulLastDim(x, g), rg))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    /// `x·w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_fwd(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(S::zero())).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), rg)
    }

    pub fn softmax_last_dim(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_last_dim"));
        }
        let (_, c) = rows_cols(self.shape(x));
        if c == 0 {
            return Err(Error::Empty("softmax_last_dim: last dimension"));
        }
        let mut out = xs.to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg))
    }

    /// Normalizes each last-dimension slice to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let xs = self.value(x);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer_norm"));
        }
        let (r, c) = rows_cols(self.shape(x));
        if c == 0 {
            return Err(Error::Empty("layer_norm: last dimension"));
        }
        let mut out = vec![S::zero(); r * c];
        let mut rstd = vec![S::zero(); r];
        layer_norm_rows(xs, c, eps, &mut out, &mut rstd);
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, rstd }, rg))
    }

    /// `(1 + γ) ⊙ xn + β` where `gb = [γ | β]` row-wise, `gb: [n, 2d]`.
    pub fn modulate(&mut self, xn: Var, gb: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(xn));
        let (r2, c2) = rows_cols(self.shape(gb));
        if r != r2 || c2 != 2 * c {
            return Err(Error::ShapeMismatch { op: "modulate", lhs: self.shape(xn).to_vec(), rhs: self.shape(gb).to_vec() });
        }
        let (xs, gs) = (self.value(xn), self.value(gb));
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let g = &gs[i * c2..(i + 1) * c2];
            for j in 0..c {
                out[i * c + j] = (S::one() + g[j]) * xs[i * c + j] + g[c + j];
            }
        }
        let rg = self.rg(xn) || self.rg(gb);
        Ok(self.push(self.shape(xn).to_vec(), out, Op::Modulate { xn, gb }, rg))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq`. `q`, `k`, `v` are `[batch·seq, width]`, heads split the
    /// width evenly. A key is visible to a query when `mask[q·seq + k]` holds
    /// and the key is either the query itself or unpadded in `key_valid`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        mask: Rc<[bool]>,
        key_valid: Rc<[bool]>,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || shape[0] != batch * seq || self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::ShapeMismatch { op: "attention", lhs: shape, rhs: self.shape(k).to_vec() });
        }
        let width = shape[1];
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
        }
        if mask.len() != seq * seq || key_valid.len() != batch * seq {
            return Err(Error::ShapeMismatch { op: "attention mask", lhs: vec![seq, seq], rhs: vec![mask.len()] });
        }
        let geom = AttnGeom { batch, seq, heads, width, mask, key_valid };
        let dh = width / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); batch * seq * width];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * width + h * dh;
                let head_view = MatView { offset: off, rows: seq, cols: dh, row_stride: width, col_stride: 1 };
                let p_off = (b * heads + h) * seq * seq;
                let p = &mut probs[p_off..p_off + seq * seq];
                gemm(qs, head_view, ks, head_view.t(), p, MatView::dense(seq, seq), scale, S::zero());
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut mx = S::neg_infinity();
                    for (j, x) in row.iter().enumerate() {
                        if geom.allowed(b, i, j) && *x > mx {
                            mx = *x;
                        }
                    }
                    let mut sum = S::zero();
                    for (j, x) in row.iter_mut().enumerate() {
                        if geom.allowed(b, i, j) {
                            *x = (*x - mx).exp();
                            sum = sum + *x;
                        } else {
                            *x = S::zero();
                        }
                    }
                    for x in row.iter_mut() {
                        *x = *x / sum;
                    }
                }
                let p = &probs[p_off..p_off + seq * seq];
                gemm(p, MatView::dense(seq, seq), vs, head_view, &mut out, head_view, S::one(), S::zero());
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(shape, out, Op::Attention { q, k, v, geom, probs }, rg))
    }

    /// Post-softmax attention weights `[batch, heads, seq, seq]` of an
    /// attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[S], [usize; 4])> {
        match &self.nodes[v.0].op {
            Op::Attention { geom, probs, .. } => Some((probs, [geom.batch, geom.heads, geom.seq, geom.seq])),
            _ => None,
        }
    }

    /// Selects rows of `x` (viewed as `[rows, last]`).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch { op: "gather_rows", lhs: vec![r, c], rhs: vec![bad] });
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows { x, idx }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => rows_cols(self.shape(p)).1,
            None => return Err(Error::Empty("concat_rows")),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = rows_cols(self.shape(p));
            if pc != c {
                return Err(Error::ShapeMismatch { op: "concat_rows", lhs: vec![c], rhs: vec![pc] });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Inverted dropout with a caller-supplied keep mask (0 or 1 per element).
    pub fn dropout(&mut self, x: Var, keep: &[bool], rate: S) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch { op: "dropout", lhs: self.shape(x).to_vec(), rhs: vec![keep.len()] });
        }
        let s = S::one() / (S::one() - rate);
        let mask: Vec<S> = keep.iter().map(|&k| if k { s } else { S::zero() }).collect();
        let out = self.value(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    /// Mean squared error over the elements of unmasked rows.
    pub fn masked_mse(&mut self, pred: Var, target: Vec<S>, mask: Vec<bool>) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(pred));
        if target.len() != r * c || mask.len() != r {
            return Err(Error::ShapeMismatch { op: "masked_mse", lhs: vec![r, c], rhs: vec![target.len(), mask.len()] });
        }
        let live = mask.iter().filter(|&&m| m).count();
        if live == 0 {
            return Err(Error::AllMasked);
        }
        let denom = S::of((live * c) as f64);
        let p = self.value(pred);
        let mut acc = S::zero();
        for i in (0..r).filter(|&i| mask[i]) {
            for j in 0..c {
                let d = p[i * c + j] - target[i * c + j];
                acc = acc + d * d;
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(vec![], vec![acc / denom], Op::MaskedMse { pred, target, mask, denom }, rg))
    }

    /// Mean cross-entropy of row logits against class indices over unmasked rows.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: Vec<usize>, mask: Vec<bool>) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(logits));
        if targets.len() != r || mask.len() != r {
            return Err(Error::ShapeMismatch { op: "masked_cross_entropy", lhs: vec![r, c], rhs: vec![targets.len(), mask.len()] });
        }
        if let Some(&t) = targets.iter().zip(&mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!("class index {t} out of range for {c} classes")));
        }
        let live = mask.iter().filter(|&&m| m).count();
        if live == 0 {
            return Err(Error::AllMasked);
        }
        let denom = S::of(live as f64);
        let mut probs = self.value(logits).to_vec();
        let mut acc = S::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            softmax_in_place(row);
            if mask[i] {
                acc = acc - row[targets[i]].ln();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(vec![], vec![acc / denom], Op::MaskedCrossEntropy { logits, targets, mask, probs, denom }, rg))
    }

    // ---- backward ----

    /// Accumulates d`loss`/d`leaf` into every reachable leaf that requires
    /// gradient. Repeated calls add up until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        if !node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            if let Op::Leaf = self.nodes[i].op {
                match self.leaf_grads[i].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => self.leaf_grads[i] = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        // Zero-initialized gradient slot for an input node.
        fn slot<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var) -> &'a mut Vec<S> {
            grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()])
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let p = nodes[b.0].shape[1];
                if want(*a) {
                    let da = slot(grads, nodes, *a);
                    gemm(g, MatView::dense(m, p), &nodes[b.0].value, MatView::dense(n, p).t(), da, MatView::dense(m, n), S::one(), S::one());
                }
                if want(*b) {
                    let db = slot(grads, nodes, *b);
                    gemm(&nodes[a.0].value, MatView::dense(m, n).t(), g, MatView::dense(m, p), db, MatView::dense(n, p), S::one(), S::one());
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if want(*v) {
                        slot(grads, nodes, *v).iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if want(*a) {
                    let da = slot(grads, nodes, *a);
                    for j in 0..g.len() {
                        da[j] = da[j] + g[j] * bv[j];
                    }
                }
                if want(*b) {
                    let db = slot(grads, nodes, *b);
                    for j in 0..g.len() {
                        db[j] = db[j] + g[j] * av[j];
                    }
                }
            }
            Op::AddBias(x, b) => {
                let c = nodes[b.0].value.len();
                if want(*x) {
                    slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
                if want(*b) {
                    let db = slot(grads, nodes, *b);
                    for (j, &v) in g.iter().enumerate() {
                        db[j % c] = db[j % c] + v;
                    }
                }
            }
            Op::MulLastDim(x, w) => {
                let c = nodes[w.0].value.len();
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                if want(*x) {
                    let dx = slot(grads, nodes, *x);
                    for j in 0..g.len() {
                        dx[j] = dx[j] + g[j] * wv[j % c];
                    }
                }
                if want(*w) {
                    let dw = slot(grads, nodes, *w);
                    for j in 0..g.len() {
                        dw[j % c] = dw[j % c] + g[j] * xv[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                let dx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    dx[j] = dx[j] + g[j] * *s;
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                let dx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    dx[j] = dx[j] + g[j] * gelu_grad(xv[j]);
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                let dx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    if xv[j] > S::zero() {
                        dx[j] = dx[j] + g[j];
                    }
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let dx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    dx[j] = dx[j] + g[j] * (S::one() - y[j] * y[j]);
                }
            }
            Op::Softmax(x) => {
                let (_, c) = rows_cols(&node.shape);
                let y = &node.value;
                let dx = slot(grads, nodes, *x);
                for r in 0..y.len() / c {
                    let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: S = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = dx[r * c + j] + ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let (_, c) = rows_cols(&node.shape);
                let y = &node.value;
                let dx = slot(grads, nodes, *x);
                let n = S::of(c as f64);
                for (r, &rs) in rstd.iter().enumerate() {
                    let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let mean_g = gs.iter().copied().sum::<S>() / n;
                    let mean_gy = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum::<S>() / n;
                    for j in 0..c {
                        dx[r * c + j] = dx[r * c + j] + rs * (gs[j] - mean_g - ys[j] * mean_gy);
                    }
                }
            }
            Op::Modulate { xn, gb } => {
                let (r, c) = rows_cols(&node.shape);
                let (xs, gs) = (&nodes[xn.0].value, &nodes[gb.0].value);
                if want(*xn) {
                    let dx = slot(grads, nodes, *xn);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dx[i * c + j] + g[i * c + j] * (S::one() + gs[i * 2 * c + j]);
                        }
                    }
                }
                if want(*gb) {
                    let dg = slot(grads, nodes, *gb);
                    for i in 0..r {
                        for j in 0..c {
                            let go = g[i * c + j];
                            dg[i * 2 * c + j] = dg[i * 2 * c + j] + go * xs[i * c + j];
                            dg[i * 2 * c + c + j] = dg[i * 2 * c + c + j] + go;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, geom, probs } => {
                self.attention_backward(*q, *k, *v, geom, probs, g, grads);
            }
            Op::GatherRows { x, idx } => {
                let c = node.shape[1];
                let dx = slot(grads, nodes, *x);
                for (o, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] = dx[src * c + j] + g[o * c + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if want(*p) {
                        slot(grads, nodes, *p).iter_mut().zip(&g[off..off + n]).for_each(|(d, &v)| *d = *d + v);
                    }
                    off += n;
                }
            }
            Op::Dropout { x, mask } => {
                let dx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    dx[j] = dx[j] + g[j] * mask[j];
                }
            }
            Op::Sum(x) => {
                let dx = slot(grads, nodes, *x);
                dx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
            Op::MaskedMse { pred, target, mask, denom } => {
                let (_, c) = rows_cols(&nodes[pred.0].shape);
                let p = &nodes[pred.0].value;
                let two = S::of(2.0);
                let dp = slot(grads, nodes, *pred);
                for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for j in 0..c {
                        let idx = i * c + j;
                        dp[idx] = dp[idx] + g[0] * two * (p[idx] - target[idx]) / *denom;
                    }
                }
            }
            Op::MaskedCrossEntropy { logits, targets, mask, probs, denom } => {
                let (_, c) = rows_cols(&nodes[logits.0].shape);
                let dl = slot(grads, nodes, *logits);
                for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for j in 0..c {
                        let onehot = if j == targets[i] { S::one() } else { S::zero() };
                        dl[i * c + j] = dl[i * c + j] + g[0] * (probs[i * c + j] - onehot) / *denom;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: &AttnGeom,
        probs: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let nodes = &self.nodes;
        let (batch, seq, heads, width) = (geom.batch, geom.seq, geom.heads, geom.width);
        let dh = width / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qs, ks, vs) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let n = batch * seq * width;
        let mut dq = vec![S::zero(); n];
        let mut dk = vec![S::zero(); n];
        let mut dv = vec![S::zero(); n];
        let mut dp = vec![S::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * width + h * dh;
                let hv = MatView { offset: off, rows: seq, cols: dh, row_stride: width, col_stride: 1 };
                let p_off = (b * heads + h) * seq * seq;
                let p = &probs[p_off..p_off + seq * seq];
                let pv = MatView::dense(seq, seq);
                // dV = Pᵀ·dO
                gemm(p, pv.t(), g, hv, &mut dv, hv, S::one(), S::one());
                // dP = dO·Vᵀ
                gemm(g, hv, vs, hv.t(), &mut dp, pv, S::one(), S::zero());
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for i in 0..seq {
                    let row_p = &p[i * seq..(i + 1) * seq];
                    let row_d = &mut dp[i * seq..(i + 1) * seq];
                    let dot: S = row_p.iter().zip(row_d.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..seq {
                        row_d[j] = row_p[j] * (row_d[j] - dot);
                    }
                }
                gemm(&dp, pv, ks, hv, &mut dq, hv, scale, S::one());
                gemm(&dp, pv.t(), qs, hv, &mut dk, hv, scale, S::one());
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if nodes[var.0].requires_grad {
                match grads[var.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a = *a + b),
                    None => grads[var.0] = Some(d),
                }
            }
        }
    }
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

pub(crate) fn layer_norm_rows<S: Scalar>(xs: &[S], c: usize, eps: S, out: &mut [S], rstd: &mut [S]) {
    let n = S::of(c as f64);
    for (r, row) in xs.chunks(c).enumerate() {
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let rs = S::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (j, &v) in row.iter().enumerate() {
            out[r * c + j] = (v - mean) * rs;
        }
    }
}

/// `tanh` through one `exp`; saturates correctly at both ends.
fn exp_tanh<S: Scalar>(x: S) -> S {
    S::one() - S::of(2.0) / ((x + x).exp() + S::one())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    S::of(0.5) * x * (S::one() + exp_tanh(inner))
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    let t = exp_tanh(inner);
    let dinner = S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_A) * x * x);
    S::of(0.5) * (S::one() + t) + S::of(0.5) * x * (S::one() - t * t) * dinner
}
