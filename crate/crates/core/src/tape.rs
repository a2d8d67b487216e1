//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward sweep. `backward` walks the tape once in reverse
//! and deposits gradients into parameter tensors (via [`ParamSet`]), into
//! leaves created with `requires_grad`, and into nodes marked with
//! [`Tape::retain_grad`]. Gradients accumulate across calls until cleared.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{BatError, Result};
use crate::params::{ParamSet, ParamView};
use crate::rng::BatRng;
use crate::tensor::{axis_split, softmax_in_place, Real, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    AddRow(usize, usize),
    AddConst(usize),
    Mul(usize, usize),
    Scale(usize, T),
    MaskMul(usize, Vec<T>),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    SplitHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        dh: usize,
    },
    MergeHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        dh: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        d: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
        d: usize,
    },
    SelectRows {
        x: usize,
        rows: Vec<usize>,
        d: usize,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
        active: Vec<bool>,
        count: usize,
        classes: usize,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<String>,
    retain: bool,
}

#[derive(Debug)]
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(BatError::usage("variable is not recorded on this tape"));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let mut value = value;
        value.requires_grad = inputs.iter().any(|&i| self.nodes[i].value.requires_grad);
        self.push_raw(value, op, None)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, param: Option<String>) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            param,
            retain: false,
        });
        Var { tape: self.id, idx }
    }

    /// Records an input. Its `requires_grad` flag decides whether it
    /// receives a gradient.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut t = tensor;
        t.clear_grad();
        self.push_raw(t, Op::Leaf, None)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut t = tensor.detached();
        t.requires_grad = false;
        self.push_raw(t, Op::Leaf, None)
    }

    /// Leaf bound to a named parameter. Through a detached view the leaf is
    /// a plain constant.
    pub fn param(&mut self, view: ParamView<'_, T>, name: &str) -> Result<Var> {
        let src = view.params.require(name)?;
        let mut t = src.detached();
        if view.detached {
            return Ok(self.push_raw(t, Op::Leaf, None));
        }
        t.requires_grad = true;
        Ok(self.push_raw(t, Op::Leaf, Some(name.to_string())))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Accumulated gradient of a leaf or retained node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.idx(v).ok().and_then(|i| self.nodes[i].value.grad())
    }

    pub fn retain_grad(&mut self, v: Var) -> Result<()> {
        let i = self.idx(v)?;
        self.nodes[i].retain = true;
        Ok(())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v)
            .map(|i| self.nodes[i].value.requires_grad)
            .unwrap_or(false)
    }

    fn shape(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn data(&self, i: usize) -> &[T] {
        self.nodes[i].value.data()
    }

    // ----- operations -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ia, ib)?;
        let data = zip_map(self.data(ia), self.data(ib), |x, y| x + y);
        let t = Tensor::new(self.shape(ia).to_vec(), data)?;
        Ok(self.push(t, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ia, ib)?;
        let data = zip_map(self.data(ia), self.data(ib), |x, y| x * y);
        let t = Tensor::new(self.shape(ia).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(ia, ib), &[ia, ib]))
    }

    /// `x[..., d] + b[d]` broadcast over leading axes.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(b)?);
        let d = *self.shape(ix).last().unwrap_or(&0);
        if self.shape(ib) != [d] {
            return Err(self.dim_err("add_row", ix, ib));
        }
        let bias = self.data(ib).to_vec();
        let data = self
            .data(ix)
            .chunks(d)
            .flat_map(|row| row.iter().zip(&bias).map(|(&x, &b)| x + b))
            .collect();
        let t = Tensor::new(self.shape(ix).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(ix, ib), &[ix, ib]))
    }

    /// Adds a constant tensor; no gradient flows into the constant.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let ix = self.idx(x)?;
        if self.shape(ix) != c.shape() {
            return Err(BatError::Dimension {
                op: "add_const",
                lhs: self.shape(ix).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = zip_map(self.data(ix), c.data(), |x, y| x + y);
        let t = Tensor::new(self.shape(ix).to_vec(), data)?;
        Ok(self.push(t, Op::AddConst(ix), &[ix]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = T::lit(s);
        let data = self.data(ix).iter().map(|&v| v * s).collect();
        let t = Tensor::new(self.shape(ix).to_vec(), data)?;
        Ok(self.push(t, Op::Scale(ix, s), &[ix]))
    }

    /// Inverted dropout. Identity (same handle) when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut BatRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(BatError::config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let ix = self.idx(x)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.data(ix).len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = zip_map(self.data(ix), &mask, |x, m| x * m);
        let t = Tensor::new(self.shape(ix).to_vec(), data)?;
        Ok(self.push(t, Op::MaskMul(ix, mask), &[ix]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.shape(ia), self.shape(ib));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.dim_err("matmul", ia, ib));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.data(ia), self.data(ib), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a: ia, b: ib, m, k, n }, &[ia, ib]))
    }

    /// Batched product of `[batch, m, k]` with `[batch, k, n]`, or with
    /// `[batch, n, k]` transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.shape(ia), self.shape(ib));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.dim_err("bmm", ia, ib));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(self.dim_err("bmm", ia, ib));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.data(ia), self.data(ib));
        for bi in 0..batch {
            let a_s = &da[bi * m * k..(bi + 1) * m * k];
            let b_s = &db[bi * k * n..(bi + 1) * k * n];
            let o_s = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm_nt(a_s, b_s, o_s, m, k, n);
            } else {
                gemm_nn(a_s, b_s, o_s, m, k, n);
            }
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        let op = Op::Bmm {
            a: ia,
            b: ib,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.push(t, op, &[ia, ib]))
    }

    /// `[batch*seq, heads*dh]` to `[batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.shape(ix);
        if s.len() != 2 || s[0] != batch * seq || s[1] % heads != 0 {
            return Err(BatError::Dimension {
                op: "split_heads",
                lhs: s.to_vec(),
                rhs: vec![batch, seq, heads],
            });
        }
        let dh = s[1] / heads;
        let src = self.data(ix);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for l in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + l) * heads * dh + h * dh;
                    let to = ((b * heads + h) * seq + l) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let t = Tensor::new(vec![batch * heads, seq, dh], out)?;
        let op = Op::SplitHeads {
            x: ix,
            batch,
            seq,
            heads,
            dh,
        };
        Ok(self.push(t, op, &[ix]))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.shape(ix);
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(BatError::Dimension {
                op: "merge_heads",
                lhs: s.to_vec(),
                rhs: vec![batch, seq, heads],
            });
        }
        let dh = s[2];
        let src = self.data(ix);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for l in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + l) * heads * dh + h * dh;
                    let from = ((b * heads + h) * seq + l) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let t = Tensor::new(vec![batch * seq, heads * dh], out)?;
        let op = Op::MergeHeads {
            x: ix,
            batch,
            seq,
            heads,
            dh,
        };
        Ok(self.push(t, op, &[ix]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let shape = self.shape(ix).to_vec();
        if axis >= shape.len() {
            return Err(BatError::Index(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = self.data(ix).to_vec();
        softmax_in_place(&mut out, outer, n, inner);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x: ix, outer, n, inner }, &[ix]))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let d = *self.shape(ix).last().unwrap_or(&0);
        if self.shape(ig) != [d] || self.shape(ib) != [d] {
            return Err(self.dim_err("layer_norm", ix, ig));
        }
        if eps <= 0.0 {
            return Err(BatError::config("layer_norm eps must be positive"));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let (g, bt) = (self.data(ig).to_vec(), self.data(ib).to_vec());
        let src = self.data(ix);
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bt[j];
            }
        }
        let t = Tensor::new(self.shape(ix).to_vec(), out)?;
        let op = Op::LayerNorm {
            x: ix,
            gamma: ig,
            beta: ib,
            d,
            xhat,
            rstd,
        };
        Ok(self.push(t, op, &[ix, ig, ib]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let data = self.data(ix).iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.shape(ix).to_vec(), data)?;
        Ok(self.push(t, Op::Gelu(ix), &[ix]))
    }

    /// Rows of `table[V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let s = self.shape(it);
        if s.len() != 2 {
            return Err(BatError::Dimension {
                op: "gather",
                lhs: s.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(BatError::Index(format!(
                "id {bad} out of range for table with {rows} rows"
            )));
        }
        self.select_impl(it, ids, d, true)
    }

    /// Rows of a `[N, d]` value picked by index, giving `[rows.len(), d]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.shape(ix);
        if s.len() != 2 {
            return Err(BatError::Dimension {
                op: "select_rows",
                lhs: s.to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(BatError::Index(format!("row {bad} out of range for {n} rows")));
        }
        self.select_impl(ix, rows, d, false)
    }

    fn select_impl(&mut self, src: usize, rows: &[usize], d: usize, table: bool) -> Result<Var> {
        if rows.is_empty() {
            return Err(BatError::usage("empty row selection"));
        }
        let data = self.data(src);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&data[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        let op = if table {
            Op::Gather {
                table: src,
                ids: rows.to_vec(),
                d,
            }
        } else {
            Op::SelectRows {
                x: src,
                rows: rows.to_vec(),
                d,
            }
        };
        Ok(self.push(t, op, &[src]))
    }

    /// Mean negative log-likelihood over the rows of `logits[N, C]` whose
    /// `ignore` flag is unset. Zero when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], ignore: &[bool]) -> Result<Var> {
        let il = self.idx(logits)?;
        let s = self.shape(il);
        if s.len() != 2 || s[0] != labels.len() || labels.len() != ignore.len() {
            return Err(BatError::Dimension {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len(), ignore.len()],
            });
        }
        let (rows, classes) = (s[0], s[1]);
        for (r, (&y, &ign)) in labels.iter().zip(ignore).enumerate() {
            if !ign && y >= classes {
                return Err(BatError::Index(format!(
                    "label {y} at row {r} out of range for {classes} classes"
                )));
            }
        }
        let mut probs = self.data(il).to_vec();
        softmax_in_place(&mut probs, rows, classes, 1);
        let src = self.data(il);
        let active: Vec<bool> = ignore.iter().map(|&i| !i).collect();
        let count = active.iter().filter(|&&a| a).count();
        let mut total = T::zero();
        for r in (0..rows).filter(|&r| active[r]) {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[labels[r]];
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::lit(count as f64)
        };
        let t = Tensor::scalar(loss);
        let op = Op::CrossEntropy {
            logits: il,
            probs,
            labels: labels.to_vec(),
            active,
            count,
            classes,
        };
        Ok(self.push(t, op, &[il]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.data(ix).iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), &[ix]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = T::lit(self.data(ix).len() as f64);
        let s = self.data(ix).iter().copied().sum::<T>() / n;
        Ok(self.push(Tensor::scalar(s), Op::Mean(ix), &[ix]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.nodes[ix].value.detached().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(ix), &[ix]))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err(op, a, b));
        }
        Ok(())
    }

    fn dim_err(&self, op: &'static str, a: usize, b: usize) -> BatError {
        BatError::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ----- backward -----

    /// Back-propagates from a scalar `loss`. Parameter leaves deposit into
    /// `params`; other gradient-tracking leaves and retained nodes keep
    /// their gradient on the tape.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(BatError::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(il)
            )));
        }
        for node in &self.nodes[..=il] {
            if let Some(name) = &node.param {
                params.require(name)?;
            }
        }
        if !self.nodes[il].value.requires_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; il + 1];
        grads[il] = Some(vec![T::one()]);
        let mut deposits: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            let node = &self.nodes[i];
            let is_leaf = matches!(node.op, Op::Leaf);
            if (is_leaf && node.value.requires_grad) || node.retain {
                deposits.push((i, g));
            }
        }

        for (i, g) in deposits {
            let node = &mut self.nodes[i];
            match &node.param {
                Some(name) => params
                    .get_mut(name)
                    .expect("checked above")
                    .accumulate_grad(&g),
                None => node.value.accumulate_grad(&g),
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let wants = |j: usize| self.nodes[j].value.requires_grad;
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &j in [a, b] {
                    if wants(j) {
                        acc(grads, j, g.iter().copied());
                    }
                }
            }
            Op::AddRow(x, b) => {
                if wants(*x) {
                    acc(grads, *x, g.iter().copied());
                }
                if wants(*b) {
                    let d = self.nodes[*b].value.len();
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    acc(grads, *b, db);
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                if wants(*x) {
                    acc(grads, *x, g.iter().copied());
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if wants(*a) {
                    acc(grads, *a, g.iter().zip(db).map(|(&g, &y)| g * y));
                }
                if wants(*b) {
                    acc(grads, *b, g.iter().zip(da).map(|(&g, &x)| g * x));
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    acc(grads, *x, g.iter().map(|&v| v * *s));
                }
            }
            Op::MaskMul(x, mask) => {
                if wants(*x) {
                    acc(grads, *x, g.iter().zip(mask).map(|(&v, &m)| v * m));
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g, self.data(b), &mut da, m, n, k);
                    acc(grads, a, da);
                }
                if wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(self.data(a), g, &mut db, m, k, n);
                    acc(grads, b, db);
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                let (xa, xb) = (self.data(a), self.data(b));
                let mut da = wants(a).then(|| vec![T::zero(); batch * m * k]);
                let mut db = wants(b).then(|| vec![T::zero(); batch * k * n]);
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let a_s = &xa[bi * m * k..(bi + 1) * m * k];
                    let b_s = &xb[bi * k * n..(bi + 1) * k * n];
                    if let Some(da) = da.as_mut() {
                        let out = &mut da[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // b is [n, k]
                            gemm_nn(gs, b_s, out, m, n, k);
                        } else {
                            gemm_nt(gs, b_s, out, m, n, k);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let out = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gs, a_s, out, m, n, k);
                        } else {
                            gemm_tn(a_s, gs, out, m, k, n);
                        }
                    }
                }
                if let Some(da) = da {
                    acc(grads, a, da);
                }
                if let Some(db) = db {
                    acc(grads, b, db);
                }
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                dh,
            } => {
                if wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..*batch {
                        for l in 0..*seq {
                            for h in 0..*heads {
                                let to = (b * seq + l) * heads * dh + h * dh;
                                let from = ((b * heads + h) * seq + l) * dh;
                                dx[to..to + dh].copy_from_slice(&g[from..from + dh]);
                            }
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                dh,
            } => {
                if wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..*batch {
                        for l in 0..*seq {
                            for h in 0..*heads {
                                let from = (b * seq + l) * heads * dh + h * dh;
                                let to = ((b * heads + h) * seq + l) * dh;
                                dx[to..to + dh].copy_from_slice(&g[from..from + dh]);
                            }
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                if wants(*x) {
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..*outer {
                        for k in 0..*inner {
                            let at = |j: usize| o * n * inner + j * inner + k;
                            let dot: T = (0..*n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*n {
                                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                let gm = self.data(*gamma);
                if wants(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                    acc(grads, *gamma, dg);
                }
                if wants(*beta) {
                    let mut db = vec![T::zero(); d];
                    for grow in g.chunks(d) {
                        db.iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                    }
                    acc(grads, *beta, db);
                }
                if wants(*x) {
                    let dn = T::lit(d as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let xrow = &xhat[r * d..(r + 1) * d];
                        let dxh: Vec<T> = (0..d).map(|j| grow[j] * gm[j]).collect();
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = dxh.iter().zip(xrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = *rs / dn * (dn * dxh[j] - s1 - xrow[j] * s2);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let src = self.data(*x);
                    acc(
                        grads,
                        *x,
                        g.iter().zip(src).map(|(&gv, &v)| gv * gelu_grad(v)),
                    );
                }
            }
            Op::Gather { table: x, ids: rows, d } | Op::SelectRows { x, rows, d } => {
                if wants(*x) {
                    let mut dx = vec![T::zero(); self.nodes[*x].value.len()];
                    for (r, &src) in rows.iter().enumerate() {
                        let out = &mut dx[src * d..(src + 1) * d];
                        out.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, &v)| *a += v);
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                active,
                count,
                classes,
            } => {
                if wants(*logits) {
                    let mut dx = vec![T::zero(); probs.len()];
                    if *count > 0 {
                        let scale = g[0] / T::lit(*count as f64);
                        for r in (0..labels.len()).filter(|&r| active[r]) {
                            for c in 0..*classes {
                                let onehot = if c == labels[r] { T::one() } else { T::zero() };
                                dx[r * classes + c] = (probs[r * classes + c] - onehot) * scale;
                            }
                        }
                    }
                    acc(grads, *logits, dx);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let n = self.nodes[*x].value.len();
                    acc(grads, *x, std::iter::repeat(g[0]).take(n));
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = self.nodes[*x].value.len();
                    let v = g[0] / T::lit(n as f64);
                    acc(grads, *x, std::iter::repeat(v).take(n));
                }
            }
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], j: usize, g: impl IntoIterator<Item = T>) {
    match &mut grads[j] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        slot @ None => *slot = Some(g.into_iter().collect()),
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// `c[m, n] += a[m, k] * b[k, n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += av * b);
        }
    }
}

/// `c[m, n] += a[m, k] * b[n, k]^T`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: T = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[k, n] += a[m, k]^T * b[m, n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += av * b);
        }
    }
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
