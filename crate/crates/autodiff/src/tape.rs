use std::rc::Rc;

use crate::kernels::{gemm, gemm_a_bt, gemm_at_b, log_softmax_row, transpose};
use crate::{AutodiffError, Result, Tensor};

const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, batch: usize, n: usize, k: usize, m: usize },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Sum { a: Var },
    Tanh { a: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { a: Var, idx: Vec<usize> },
    SliceLast { a: Var, start: usize },
    ConcatLast { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Reshape { a: Var },
    MaskedFill { a: Var, mask: Rc<Vec<bool>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Entropy { logits: Var, weights: Vec<f64>, probs: Vec<f64>, logp: Vec<f64>, row_h: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, which is therefore a valid
/// topological order; [`Tape::backward`] visits each node once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of its shape when it does not influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = if cols == 0 { 0 } else { shape.iter().product::<usize>() / cols };
    (rows, cols)
}

fn gelu(x: f64) -> (f64, f64) {
    // tanh approximation; returns (value, derivative)
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (value, deriv)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Matrix product. `a` is `[..., n, k]`; `b` is either a `[k, m]` matrix
    /// shared across the leading dims of `a`, or `[..., k, m]` with the same
    /// leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(AutodiffError::shape("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(AutodiffError::shape("matmul", &sa, &sb));
            }
            let m = sb[1];
            let n = sa.iter().product::<usize>() / k.max(1);
            let mut out = vec![0.0; n * m];
            gemm(self.data(a), self.data(b), &mut out, n, k, m);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = m;
            let ng = self.any_grad(&[a, b]);
            return Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, ng));
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] || sb[sb.len() - 2] != k {
            return Err(AutodiffError::shape("matmul", &sa, &sb));
        }
        let n = sa[sa.len() - 2];
        let m = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * n * m];
        {
            let (da, db) = (self.data(a), self.data(b));
            for bi in 0..batch {
                gemm(
                    &da[bi * n * k..(bi + 1) * n * k],
                    &db[bi * k * m..(bi + 1) * k * m],
                    &mut out[bi * n * m..(bi + 1) * n * m],
                    n,
                    k,
                    m,
                );
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = m;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchMatMul { a, b, batch, n, k, m },
            ng,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(AutodiffError::invalid("transpose", format!("rank {} < 2", sa.len())));
        }
        let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch = sa.iter().product::<usize>() / (r * c).max(1);
        let mut out = vec![0.0; sa.iter().product()];
        let da = self.data(a);
        for bi in 0..batch {
            transpose(&da[bi * r * c..(bi + 1) * r * c], &mut out[bi * r * c..(bi + 1) * r * c], r, c);
        }
        let mut shape = sa;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let ng = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose { a }, ng))
    }

    /// `a + b`, where the shape of `b` must equal a suffix of the shape of `a`
    /// (broadcast over the leading dims of `a`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(AutodiffError::shape("add", sa, sb));
        }
        let shape = sa.to_vec();
        let db = self.data(b);
        let period = db.len();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + db[i % period])
            .collect();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, ng))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Scale { a, s }, ng)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), Op::Sum { a }, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Tanh { a }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| gelu(x).0).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Gelu { a }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = split_last(self.shape(a));
        let mut out = vec![0.0; rows * cols];
        let da = self.data(a);
        for r in 0..rows {
            log_softmax_row(&da[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        out.iter_mut().for_each(|v| *v = v.exp());
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Softmax { a }, ng)
    }

    /// Layer normalization over the last axis with learnable `gain` and `bias`
    /// (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = split_last(self.shape(x));
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(AutodiffError::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let dx = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &dx[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.any_grad(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// Selects rows (slices along the last axis) of `a` by index; also serves
    /// as embedding lookup when `a` is an embedding table.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = split_last(self.shape(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::invalid(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let da = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&da[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![idx.len(), cols], out)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::GatherRows { a, idx: idx.to_vec() }, ng))
    }

    /// Embedding lookup: rows of `table` (`[vocab, dim]`) for each index.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        if self.shape(table).len() != 2 {
            return Err(AutodiffError::invalid("embedding", "table must be 2-D"));
        }
        self.gather_rows(table, idx)
    }

    /// `a[..., start..start+len]`.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = split_last(self.shape(a));
        if start + len > cols {
            return Err(AutodiffError::invalid(
                "slice_last",
                format!("range {start}..{} exceeds last dim {cols}", start + len),
            ));
        }
        let da = self.data(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&da[r * cols + start..r * cols + start + len]);
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceLast { a, start }, ng))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::invalid("concat_last", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(AutodiffError::shape("concat_last", self.shape(*first), s));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.value(p).last_dim();
                out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatLast { parts: parts.to_vec() }, ng))
    }

    /// Stacks the rows of several `[r_i, c]` tensors into `[Σ r_i, c]`.
    /// Inputs of higher rank are viewed as rows of their last axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::invalid("concat_rows", "no inputs"))?;
        let cols = self.value(*first).last_dim();
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).last_dim() != cols {
                return Err(AutodiffError::shape("concat_rows", self.shape(*first), self.shape(p)));
            }
            out.extend_from_slice(self.data(p));
        }
        let rows = out.len() / cols.max(1);
        let ng = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows { parts: parts.to_vec() },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape { a }, ng))
    }

    /// Replaces entries where `mask` is true with `fill`. The mask covers the
    /// trailing elements of `a` and repeats over the remaining leading dims.
    pub fn masked_fill(&mut self, a: Var, mask: Rc<Vec<bool>>, fill: f64) -> Result<Var> {
        let len = self.value(a).len();
        if mask.is_empty() || len % mask.len() != 0 {
            return Err(AutodiffError::shape("masked_fill", self.shape(a), &[mask.len()]));
        }
        let period = mask.len();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % period] { fill } else { x })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::MaskedFill { a, mask }, ng))
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[targets_i])` over the rows of a
    /// `[N, C]` logits tensor. Rows with zero weight contribute nothing.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (rows, cols) = split_last(self.shape(logits));
        if targets.len() != rows || weights.len() != rows {
            return Err(AutodiffError::shape(
                "cross_entropy_from_logits",
                self.shape(logits),
                &[targets.len(), weights.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(AutodiffError::invalid(
                "cross_entropy_from_logits",
                format!("target {bad} out of range for {cols} classes"),
            ));
        }
        let dz = self.data(logits);
        let mut logp = vec![0.0; cols];
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for r in 0..rows {
            log_softmax_row(&dz[r * cols..(r + 1) * cols], &mut logp);
            for c in 0..cols {
                probs[r * cols + c] = logp[c].exp();
            }
            if weights[r] != 0.0 {
                total -= weights[r] * logp[targets[r]];
            }
        }
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `Σ_i w_i · H(softmax(logits_i))` over the rows of a `[N, C]` tensor.
    pub fn entropy_from_logits(&mut self, logits: Var, weights: &[f64]) -> Result<Var> {
        let (rows, cols) = split_last(self.shape(logits));
        if weights.len() != rows {
            return Err(AutodiffError::shape(
                "entropy_from_logits",
                self.shape(logits),
                &[weights.len()],
            ));
        }
        let dz = self.data(logits);
        let mut logp = vec![0.0; rows * cols];
        let mut probs = vec![0.0; rows * cols];
        let mut row_h = vec![0.0; rows];
        let mut total = 0.0;
        for r in 0..rows {
            let lp = &mut logp[r * cols..(r + 1) * cols];
            log_softmax_row(&dz[r * cols..(r + 1) * cols], lp);
            let mut h = 0.0;
            for c in 0..cols {
                let p = lp[c].exp();
                probs[r * cols + c] = p;
                if p > 0.0 {
                    h -= p * lp[c];
                }
            }
            row_h[r] = h;
            total += weights[r] * h;
        }
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Entropy {
                logits,
                weights: weights.to_vec(),
                probs,
                logp,
                row_h,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, m) = (sb[0], sb[1]);
                let n = g.len() / m.max(1);
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| gemm_a_bt(g, db, ga, n, m, k));
                self.accumulate(grads, *b, |gb| gemm_at_b(da, g, gb, n, k, m));
            }
            Op::BatchMatMul { a, b, batch, n, k, m } => {
                let (batch, n, k, m) = (*batch, *n, *k, *m);
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for bi in 0..batch {
                        gemm_a_bt(
                            &g[bi * n * m..(bi + 1) * n * m],
                            &db[bi * k * m..(bi + 1) * k * m],
                            &mut ga[bi * n * k..(bi + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for bi in 0..batch {
                        gemm_at_b(
                            &da[bi * n * k..(bi + 1) * n * k],
                            &g[bi * n * m..(bi + 1) * n * m],
                            &mut gb[bi * k * m..(bi + 1) * k * m],
                            n,
                            k,
                            m,
                        );
                    }
                });
            }
            Op::Transpose { a } => {
                // output is [.., c, r]; transposing it back gives [.., r, c]
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c).max(1);
                self.accumulate(grads, *a, |ga| {
                    let mut tmp = vec![0.0; r * c];
                    for bi in 0..batch {
                        transpose(&g[bi * r * c..(bi + 1) * r * c], &mut tmp, r, c);
                        for (x, t) in ga[bi * r * c..(bi + 1) * r * c].iter_mut().zip(&tmp) {
                            *x += t;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accumulate(grads, *b, |gb| {
                    let period = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % period] += y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * db[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * da[i];
                    }
                });
            }
            Op::Scale { a, s } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::Sum { a } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.data(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu(x[i]).1;
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let (rows, cols) = split_last(node.value.shape());
                self.accumulate(grads, *a, |ga| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (rows, cols) = split_last(node.value.shape());
                let gn = self.data(*gain);
                self.accumulate(grads, *gain, |gg| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            dxhat[c] = g[r * cols + c] * gn[c];
                            sum_d += dxhat[c];
                            sum_dx += dxhat[c] * xh[c];
                        }
                        let s = inv_std[r] / n;
                        for c in 0..cols {
                            gx[r * cols + c] += s * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                });
            }
            Op::GatherRows { a, idx } => {
                let cols = node.value.last_dim();
                self.accumulate(grads, *a, |ga| {
                    for (o, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            ga[i * cols + c] += g[o * cols + c];
                        }
                    }
                });
            }
            Op::SliceLast { a, start } => {
                let len = node.value.last_dim();
                let cols = self.value(*a).last_dim();
                let rows = g.len() / len.max(1);
                self.accumulate(grads, *a, |ga| {
                    for r in 0..rows {
                        for c in 0..len {
                            ga[r * cols + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatLast { parts } => {
                let total = node.value.last_dim();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).last_dim();
                    self.accumulate(grads, p, |gp| {
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |gp| {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y)
                    });
                    offset += len;
                }
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::MaskedFill { a, mask } => {
                let period = mask.len();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if !mask[i % period] {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let cols = self.value(*logits).last_dim();
                self.accumulate(grads, *logits, |gl| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = w * g[0];
                        for c in 0..cols {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * cols + c] += s * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
            Op::Entropy { logits, weights, probs, logp, row_h } => {
                let cols = self.value(*logits).last_dim();
                self.accumulate(grads, *logits, |gl| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = w * g[0];
                        for c in 0..cols {
                            let i = r * cols + c;
                            // dH/dz_c = −p_c (log p_c + H)
                            gl[i] -= s * probs[i] * (logp[i] + row_h[r]);
                        }
                    }
                });
            }
        }
    }
}
