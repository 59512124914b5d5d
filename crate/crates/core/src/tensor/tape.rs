use std::borrow::Cow;

use super::{check_shape, gemm, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    ScaleCols {
        x: Var,
        gate: Var,
    },
    ScaleRows {
        x: Var,
        w: Var,
    },
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        n: usize,
        d: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
        rows: usize,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order by
/// construction. Parameter leaves borrow their data from the store.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    bound: Vec<Option<Var>>,
    nodes: Vec<Node<'p>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("shape is never empty");
    (shape.iter().product::<usize>() / cols, cols)
}

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax of one contiguous slice.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; only leaves and constants.
    pub fn new() -> Self {
        Self {
            store: None,
            bound: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            bound: vec![None; store.len()],
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape nodes always hold consistent shapes")
    }

    /// Attention probabilities `[heads × n × n]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], usize, usize)> {
        match &self.node(v).op {
            Op::Attention { probs, heads, n, .. } => Some((probs, *heads, *n)),
            _ => None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape(format!(
                "leaf shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.leaf(shape, data, true)
    }

    pub fn tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Binds a parameter from the store, reusing the node if already bound.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            requires_grad: t.requires_grad(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    /// Var already bound for `id`, if the forward pass touched it.
    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(id.0).copied().flatten()
    }

    // ----- forward primitives -------------------------------------------------

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[k × n]`, `b` is `[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        let (rows, k) = rows_cols(&sx);
        if sw.len() != 2 || sw[0] != k {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw.to_vec(),
            });
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![n],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(rows, k, n, self.value(x), false, self.value(w), false, &mut out, beta);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(shape, out, rg, Op::Linear { x, w, b, rows, k, n }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale(x, s))
    }

    fn check_last_axis(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.shape(v) != [cols] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        Ok((rows, cols))
    }

    /// Adds `bias[n]` to every row of `x[.. × n]`; the one supported broadcast.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.check_last_axis("add_bias", x, bias)?;
        let bv = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % cols])
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::AddBias { x, bias }))
    }

    /// Multiplies column `j` of every row by `gate[j]`.
    pub fn scale_cols(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (_, cols) = self.check_last_axis("scale_cols", x, gate)?;
        let gv = self.value(gate);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv[i % cols])
            .collect();
        let rg = self.rg(&[x, gate]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::ScaleCols { x, gate }))
    }

    /// Multiplies row `r` of a rank-2 `x` by `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || self.shape(w) != [sx[0]] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: sx.to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let cols = sx[1];
        let wv = self.value(w);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * wv[i / cols])
            .collect();
        let rg = self.rg(&[x, w]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::ScaleRows { x, w }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Sigmoid(x))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (l, b) in buf.iter_mut().enumerate() {
                    *b = xv[base + l * inner];
                }
                softmax_in_place(&mut buf);
                for (l, b) in buf.iter().enumerate() {
                    out[base + l * inner] = *b;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(shape, out, rg, Op::Softmax { x, outer, len, inner }))
    }

    /// Layer normalization over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (rows, n) = self.check_last_axis("layer_norm gamma", x, gamma)?;
        self.check_last_axis("layer_norm beta", x, beta)?;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head scaled-dot-product self-attention.
    ///
    /// `qkv` is `[n × 3d]` holding queries, keys and values side by side;
    /// the result is `[n × d]`. Probabilities are kept for inspection.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv);
        if s.len() != 2 || !s[1].is_multiple_of(3) || heads == 0 || !(s[1] / 3).is_multiple_of(heads) {
            return Err(Error::InvalidShape(format!(
                "attention expects [n x 3d] with d divisible by {heads} heads, got {s:?}"
            )));
        }
        let (n, d) = (s[0], s[1] / 3);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.value(qkv);
        let stride = 3 * d;
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..n {
                let q = &x[i * stride + qo..i * stride + qo + dh];
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                for (j, pj) in p.iter_mut().enumerate() {
                    let k = &x[j * stride + ko..j * stride + ko + dh];
                    *pj = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(p);
                let o = &mut out[i * d + qo..i * d + qo + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let v = &x[j * stride + vo..j * stride + vo + dh];
                    for (oc, vc) in o.iter_mut().zip(v) {
                        *oc += pj * vc;
                    }
                }
            }
        }
        let rg = self.requires_grad(qkv);
        Ok(self.push(
            vec![n, d],
            out,
            rg,
            Op::Attention {
                qkv,
                heads,
                n,
                d,
                probs,
            },
        ))
    }

    /// Gathers rows of `table[V × d]` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::InvalidShape(format!(
                "embedding expects a [V x d] table and at least one id, got {s:?}"
            )));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::OutOfVocabulary { id: bad, size: v });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits[rows × c]` against target
    /// distributions (each row of `targets` sums to one).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || targets.len() != s[0] * s[1] {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (rows, c) = (s[0], s[1]);
        for row in targets.chunks_exact(c) {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|&t| t < 0.0) {
                return Err(Error::Config("cross_entropy targets must be probability rows".into()));
            }
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (r, p) in probs.chunks_exact_mut(c).enumerate() {
            let row = &self.value(logits)[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, t) in targets[r * c..(r + 1) * c].iter().enumerate() {
                if *t > 0.0 {
                    loss -= t * (row[j] - lse);
                }
            }
            softmax_in_place(p);
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![1],
            vec![loss / rows as f64],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                rows,
            },
        ))
    }

    /// Cross-entropy with integer class targets.
    pub fn cross_entropy_hard(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || classes.len() != s[0] || classes.iter().any(|&c| c >= s[1]) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_hard",
                lhs: s,
                rhs: vec![classes.len()],
            });
        }
        let mut t = vec![0.0; s[0] * s[1]];
        for (r, &c) in classes.iter().enumerate() {
            t[r * s[1] + c] = 1.0;
        }
        self.cross_entropy(logits, &t)
    }

    /// Mean binary cross-entropy with logits; `targets` in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        if targets.len() != self.value(logits).len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let xv = self.value(logits);
        let loss: f64 = xv
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let n = xv.len() as f64;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![1],
            vec![loss / n],
            rg,
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Concatenates rank-2 tensors along the token (first) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?;
        let cols = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, cols], out, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(Error::InvalidShape(format!(
                "slice {start}..{} out of range for {s:?}",
                start + len
            )));
        }
        let cols = s[1];
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(vec![len, cols], out, rg, Op::SliceRows { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], rg, Op::Mean(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::InvalidShape(format!("transpose needs rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = xv[i * cols + j];
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(vec![cols, rows], out, rg, Op::Transpose { x, rows, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, out, rg, Op::Reshape(x)))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape)?;
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(Error::InvalidShape(format!(
                "gather index does not fit shape {shape:?} / source of {n} values"
            )));
        }
        let xv = self.value(x);
        let out = index.iter().map(|&i| xv[i]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, out, rg, Op::Gather { x, index }))
    }

    /// Scales each row (last axis) to unit L2 norm; a zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(cols) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-300 {
                return Err(Error::ZeroNorm);
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let rg = self.requires_grad(x);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::L2NormalizeRows { x, norms }))
    }

    // ----- reverse pass -------------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every node that requires
    /// them. Contributions from fan-out are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_with_seed(loss, vec![1.0])
    }

    /// Vector-Jacobian product: propagates `seed` (same size as `out`).
    pub fn backward_with_seed(&self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(out).len() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                lhs: self.shape(out).to_vec(),
                rhs: vec![seed.len()],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.node(out).requires_grad {
            grads[out.0] = Some(seed);
        }
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.requires_grad => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.requires_grad(*a) {
                    let (buf, beta) = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, self.value(*b), true, buf, beta);
                }
                if self.requires_grad(*b) {
                    let (buf, beta) = slot(grads, *b, k * n);
                    gemm(k, m, n, self.value(*a), true, g, false, buf, beta);
                }
            }
            Op::Linear { x, w, b, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                if self.requires_grad(*x) {
                    let (buf, beta) = slot(grads, *x, rows * k);
                    gemm(rows, n, k, g, false, self.value(*w), true, buf, beta);
                }
                if self.requires_grad(*w) {
                    let (buf, beta) = slot(grads, *w, k * n);
                    gemm(k, rows, n, self.value(*x), true, g, false, buf, beta);
                }
                if let Some(b) = b.filter(|b| self.requires_grad(*b)) {
                    let buf = acc(grads, b, n);
                    for row in g.chunks_exact(n) {
                        buf.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_scaled(grads, *a, g, 1.0);
                self.acc_scaled(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_scaled(grads, *a, g, 1.0);
                self.acc_scaled(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(x) {
                        let yv = self.value(y);
                        let buf = acc(grads, x, g.len());
                        for ((o, gi), yi) in buf.iter_mut().zip(g).zip(yv) {
                            *o += gi * yi;
                        }
                    }
                }
            }
            Op::Scale(x, s) => self.acc_scaled(grads, *x, g, *s),
            Op::AddBias { x, bias } => {
                self.acc_scaled(grads, *x, g, 1.0);
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).len();
                    let buf = acc(grads, *bias, n);
                    for row in g.chunks_exact(n) {
                        buf.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::ScaleCols { x, gate } => {
                let gv = self.value(*gate);
                let n = gv.len();
                if self.requires_grad(*x) {
                    let buf = acc(grads, *x, g.len());
                    for (idx, (o, gi)) in buf.iter_mut().zip(g).enumerate() {
                        *o += gi * gv[idx % n];
                    }
                }
                if self.requires_grad(*gate) {
                    let xv = self.value(*x);
                    let buf = acc(grads, *gate, n);
                    for (idx, (gi, xi)) in g.iter().zip(xv).enumerate() {
                        buf[idx % n] += gi * xi;
                    }
                }
            }
            Op::ScaleRows { x, w } => {
                let wv = self.value(*w);
                let cols = g.len() / wv.len();
                if self.requires_grad(*x) {
                    let buf = acc(grads, *x, g.len());
                    for (idx, (o, gi)) in buf.iter_mut().zip(g).enumerate() {
                        *o += gi * wv[idx / cols];
                    }
                }
                if self.requires_grad(*w) {
                    let xv = self.value(*x);
                    let buf = acc(grads, *w, wv.len());
                    for (idx, (gi, xi)) in g.iter().zip(xv).enumerate() {
                        buf[idx / cols] += gi * xi;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let buf = acc(grads, *x, g.len());
                for ((o, gi), xi) in buf.iter_mut().zip(g).zip(xv) {
                    *o += gi * gelu_grad(*xi);
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let buf = acc(grads, *x, g.len());
                for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y.iter()) {
                    *o += gi * yi * (1.0 - yi);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = &node.value;
                let buf = acc(grads, *x, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|l| g[base + l * inner] * y[base + l * inner]).sum();
                        for l in 0..len {
                            let p = base + l * inner;
                            buf[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let n = gv.len();
                if self.requires_grad(*x) {
                    let buf = acc(grads, *x, g.len());
                    let mut dxhat = vec![0.0; n];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xr[j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            buf[r * n + j] += rs * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                }
                if self.requires_grad(*gamma) {
                    let buf = acc(grads, *gamma, n);
                    for (idx, (gi, hi)) in g.iter().zip(xhat).enumerate() {
                        buf[idx % n] += gi * hi;
                    }
                }
                if self.requires_grad(*beta) {
                    let buf = acc(grads, *beta, n);
                    for (idx, gi) in g.iter().enumerate() {
                        buf[idx % n] += gi;
                    }
                }
            }
            Op::Attention {
                qkv,
                heads,
                n,
                d,
                probs,
            } => self.attention_backward(*qkv, *heads, *n, *d, probs, g, grads),
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let len = self.value(*table).len();
                let buf = acc(grads, *table, len);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        buf[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                rows,
            } => {
                let s = g[0] / *rows as f64;
                let buf = acc(grads, *logits, probs.len());
                for ((o, p), t) in buf.iter_mut().zip(probs).zip(targets) {
                    *o += s * (p - t);
                }
            }
            Op::Bce { logits, targets } => {
                let xv = self.value(*logits);
                let s = g[0] / xv.len() as f64;
                let buf = acc(grads, *logits, xv.len());
                for ((o, x), t) in buf.iter_mut().zip(xv).zip(targets) {
                    *o += s * (sigmoid(*x) - t);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires_grad(p) {
                        self.acc_scaled(grads, p, &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.shape[1];
                let len = self.value(*x).len();
                let buf = acc(grads, *x, len);
                for (o, gi) in buf[start * cols..].iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                acc(grads, *x, len).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let s = g[0] / len as f64;
                acc(grads, *x, len).iter_mut().for_each(|o| *o += s);
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let buf = acc(grads, *x, rows * cols);
                for i in 0..rows {
                    for j in 0..cols {
                        buf[i * cols + j] += g[j * rows + i];
                    }
                }
            }
            Op::Reshape(x) => self.acc_scaled(grads, *x, g, 1.0),
            Op::Gather { x, index } => {
                let len = self.value(*x).len();
                let buf = acc(grads, *x, len);
                for (&src, gi) in index.iter().zip(g) {
                    buf[src] += gi;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let cols = g.len() / norms.len();
                let buf = acc(grads, *x, g.len());
                for (r, norm) in norms.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let yr = &y[span.clone()];
                    let gr = &g[span.clone()];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, o) in buf[span].iter_mut().enumerate() {
                        *o += (gr[j] - yr[j] * dot) / norm;
                    }
                }
            }
        }
    }

    fn acc_scaled(&self, grads: &mut [Option<Vec<f64>>], x: Var, g: &[f64], s: f64) {
        if !self.requires_grad(x) {
            return;
        }
        let buf = acc(grads, x, g.len());
        for (o, gi) in buf.iter_mut().zip(g) {
            *o += s * gi;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        qkv: Var,
        heads: usize,
        n: usize,
        d: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        if !self.requires_grad(qkv) {
            return;
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let stride = 3 * d;
        let x = self.value(qkv);
        let buf = acc(grads, qkv, n * stride);
        let mut dp = vec![0.0; n];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..n {
                let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                let go = &g[i * d + qo..i * d + qo + dh];
                for j in 0..n {
                    let v = &x[j * stride + vo..j * stride + vo + dh];
                    dp[j] = go.iter().zip(v).map(|(a, b)| a * b).sum();
                    // dV_j += p_ij * dO_i
                    let dv = &mut buf[j * stride + vo..j * stride + vo + dh];
                    for (o, gc) in dv.iter_mut().zip(go) {
                        *o += p[j] * gc;
                    }
                }
                let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        let qi = x[i * stride + qo + c];
                        let kj = x[j * stride + ko + c];
                        buf[i * stride + qo + c] += ds * kj;
                        buf[j * stride + ko + c] += ds * qi;
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Gradient buffer for `v` plus the gemm `beta` to use: a fresh buffer is
/// overwritten, an existing one accumulated into.
fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> (&mut [f64], f64) {
    let fresh = grads[v.0].is_none();
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    (buf, if fresh { 0.0 } else { 1.0 })
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, materializing zeros when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    /// Gradients for every trainable parameter bound on the tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.get(v)))
    }

    /// Moves parameter gradients into a sparse, owned form.
    pub fn into_param_grads(mut self) -> ParamGrads {
        let entries = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].take().map(|g| (id, g)))
            .collect();
        ParamGrads { entries }
    }
}

/// Owned per-parameter gradients from one reverse pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub entries: Vec<(ParamId, Vec<f64>)>,
}

impl ParamGrads {
    /// Adds these gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.entries {
            let buf = store.get_mut(*id).grad_mut();
            buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}
