//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node whose inputs were created earlier, so the
//! node vector is already in topological order and backward is a single
//! reverse sweep. Gradients for a node are accumulated in the order its
//! consumers appear on the tape; splitting a graph across two tapes at a cut
//! point therefore reproduces the same floating-point sums bit for bit.

use crate::tensor::{ensure_finite, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    AddScalar { x: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Concat { xs: Vec<Var> },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    SumAll { x: Var },
    MeanAll { x: Var },
    SumLast { x: Var },
    SubMeanLast { x: Var },
    Sqrt { x: Var },
    Recip { x: Var },
    ClampMin { x: Var, floor: f32 },
    MulRows { x: Var, s: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; move it between threads freely.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when nothing reached it.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f32> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shapes[v.0].clone(), self.get_or_zeros(v)).expect("gradient shape matches node shape")
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]` where `op` optionally transposes the
/// stored row-major operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides address exactly
    // the m×k, k×n and m×n row-major (or transposed) buffers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_parts(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn dim_err<T>(msg: String) -> Result<T> {
    Err(TensorError::Dimension(msg))
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it is differentiable when `requires_grad` is set on
    /// the tensor.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let rg = t.requires_grad();
        self.push_leaf(t, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push_leaf(t, false)
    }

    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        ensure_finite(t.data(), "leaf")?;
        let value = Tensor::new(t.shape().to_vec(), t.into_data())?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        ensure_finite(&data, name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::new(shape, data)?,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[.., m, k] · b[k, n]`, or batched `a[B, m, k] · b[B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 {
            return dim_err(format!("matmul lhs must have rank >= 2, got {sa:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let out_shape;
        let mut out;
        match sb.len() {
            2 => {
                if sb[0] != k {
                    return dim_err(format!("matmul inner dimensions {sa:?} x {sb:?}"));
                }
                let n = sb[1];
                let rows: usize = sa[..sa.len() - 1].iter().product();
                out = vec![0.0; rows * n];
                gemm(
                    rows,
                    k,
                    n,
                    self.value(a).data(),
                    false,
                    self.value(b).data(),
                    false,
                    &mut out,
                    false,
                );
                let mut s = sa[..sa.len() - 1].to_vec();
                s.push(n);
                out_shape = s;
            }
            3 => {
                if sa.len() != 3 || sa[0] != sb[0] || sb[1] != k {
                    return dim_err(format!("batched matmul shapes {sa:?} x {sb:?}"));
                }
                let (batch, n) = (sb[0], sb[2]);
                out = vec![0.0; batch * m * n];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
                out_shape = vec![batch, m, n];
            }
            _ => return dim_err(format!("matmul rhs must have rank 2 or 3, got {sb:?}")),
        }
        self.push(out_shape, out, Op::MatMul { a, b }, &[a, b], "matmul")
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape and is
    /// then repeated over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return dim_err(format!("add: {sb:?} is not a suffix of {sa:?}"));
        }
        let bv = self.value(b).data();
        let bn = bv.len();
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % bn])
            .collect();
        self.push(sa, out, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Sub { a, b }, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Mul { a, b }, &[a, b], "mul")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, c }, &[x], "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::AddScalar { x }, &[x], "add_scalar")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return dim_err(format!("transpose needs rank >= 2, got {s:?}"));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_last2(self.value(x).data(), r, c);
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        self.push(shape, out, Op::Transpose { x }, &[x], "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return dim_err(format!("reshape {:?} -> {shape:?}", self.shape(x)));
        }
        let data = self.value(x).data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape { x }, &[x], "reshape")
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = match xs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(TensorError::Contract("concat of zero tensors".into())),
        };
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if &s[..s.len() - 1] != lead {
                return dim_err(format!("concat leading dims {first:?} vs {s:?}"));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let d = self.value(v).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push(shape, out, Op::Concat { xs: xs.to_vec() }, xs, "concat")
    }

    /// Row lookup: `table[V, D]` gathered at `ids` gives `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return dim_err(format!("gather table must be 2-D, got {s:?}"));
        }
        let (rows, d) = (s[0], s[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index { index: id, size: rows });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "gather",
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = last_dim(self.value(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(format!(
                "layer_norm affine {:?}/{:?} for width {d}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (xv, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = row_stats(row);
            for j in 0..d {
                o[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            shape,
            out,
            Op::LayerNorm { x, gamma, beta },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| gelu_parts(v).0).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu { x }, &[x], "gelu")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let out = softmax_values(self.value(x).data(), &shape, axis);
        self.push(shape, out, Op::Softmax { x, axis }, &[x], "softmax")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[n, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return dim_err(format!("cross_entropy logits {s:?} for {} targets", targets.len()));
        }
        if s[0] == 0 {
            return Err(TensorError::Contract("cross_entropy over zero rows".into()));
        }
        let v = s[1];
        let lv = self.value(logits).data();
        let mut total = 0.0f32;
        for (row, &t) in lv.chunks(v).zip(targets) {
            if t >= v {
                return Err(TensorError::Index { index: t, size: v });
            }
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|&z| (z - m).exp()).sum();
            total += m + sum.ln() - row[t];
        }
        let loss = total / targets.len() as f32;
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = sum_f64(self.value(x).data()) as f32;
        self.push(vec![1], vec![s], Op::SumAll { x }, &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TensorError::Contract("mean of empty tensor".into()));
        }
        let s = (sum_f64(t.data()) / t.numel() as f64) as f32;
        self.push(vec![1], vec![s], Op::MeanAll { x }, &[x], "mean")
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(self.value(x));
        let out: Vec<f32> = self.value(x).data().chunks(d).map(|r| sum_f64(r) as f32).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(out_shape, out, Op::SumLast { x }, &[x], "sum_last")
    }

    /// Subtracts each last-axis slice's mean from that slice.
    pub fn sub_mean_last(&mut self, x: Var) -> Result<Var> {
        let d = last_dim(self.value(x));
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let m = (sum_f64(row) / d as f64) as f32;
            row.iter_mut().for_each(|v| *v -= m);
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::SubMeanLast { x }, &[x], "sub_mean_last")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::NonFinite("sqrt of negative value"));
        }
        let out = self.value(x).data().iter().map(|v| v.sqrt()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Sqrt { x }, &[x], "sqrt")
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| 1.0 / v).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Recip { x }, &[x], "recip")
    }

    pub fn clamp_min(&mut self, x: Var, floor: f32) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v.max(floor)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::ClampMin { x, floor }, &[x], "clamp_min")
    }

    /// Multiplies every last-axis slice of `x` by the matching entry of `s`,
    /// whose shape is `x`'s shape without the last axis.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if sx.len() < 2 || ss[..] != sx[..sx.len() - 1] {
            return dim_err(format!("mul_rows {sx:?} by {ss:?}"));
        }
        let d = sx[sx.len() - 1];
        let sv = self.value(s).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / d])
            .collect();
        self.push(sx, out, Op::MulRows { x, s }, &[x, s], "mul_rows")
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Backpropagates from arbitrary cotangents, e.g. a gradient received
    /// for a cut-point activation.
    pub fn backward_seeded(self, seeds: &[(Var, Vec<f32>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.len() != self.value(*v).numel() {
                return dim_err(format!(
                    "seed of length {} for node of shape {:?}",
                    g.len(),
                    self.shape(*v)
                ));
            }
            ensure_finite(g, "backward seed")?;
            accumulate(&mut grads[v.0], g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = sa[sa.len() - 1];
                if sb.len() == 2 {
                    let n = sb[1];
                    let rows = av.len() / k;
                    if self.wants(*a) {
                        let mut da = vec![0.0; av.len()];
                        gemm(rows, n, k, g, false, bv, true, &mut da, false);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.wants(*b) {
                        let mut db = vec![0.0; bv.len()];
                        gemm(k, rows, n, av, true, g, false, &mut db, false);
                        accumulate(&mut grads[b.0], db);
                    }
                } else {
                    let (batch, m, n) = (sa[0], sa[1], sb[2]);
                    if self.wants(*a) {
                        let mut da = vec![0.0; av.len()];
                        for t in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &bv[t * k * n..(t + 1) * k * n],
                                true,
                                &mut da[t * m * k..(t + 1) * m * k],
                                false,
                            );
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.wants(*b) {
                        let mut db = vec![0.0; bv.len()];
                        for t in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av[t * m * k..(t + 1) * m * k],
                                true,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &mut db[t * k * n..(t + 1) * k * n],
                                false,
                            );
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    let bn = self.value(*b).numel();
                    let mut db = vec![0.0; bn];
                    for chunk in g.chunks(bn) {
                        db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.iter().map(|v| v * c).collect());
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
            }
            Op::Transpose { x } => {
                if self.wants(*x) {
                    let s = node.value.shape();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    accumulate(&mut grads[x.0], transpose_last2(g, r, c));
                }
            }
            Op::Concat { xs } => {
                let total = last_dim(&node.value);
                let rows = g.len() / total;
                let mut offset = 0;
                for &v in xs {
                    let w = last_dim(self.value(v));
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dv.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[v.0], dv);
                    }
                    offset += w;
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![0.0; self.value(*table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(t, v)| *t += v);
                    }
                    accumulate(&mut grads[table.0], dt);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for ((row, gr), dxr) in xv.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let (mean, rstd) = row_stats(row);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= d as f32;
                    m2 /= d as f32;
                    for j in 0..d {
                        dxr[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], dg);
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], db);
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    accumulate(
                        &mut grads[x.0],
                        g.iter().zip(xv).map(|(gv, &v)| gv * gelu_parts(v).1).collect(),
                    );
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for c in 0..inner {
                            let base = o * len * inner + c;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += g[idx] * y[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                dx[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits).data();
                    let v = self.shape(*logits)[1];
                    let scale = g[0] / targets.len() as f32;
                    let mut dl = vec![0.0; lv.len()];
                    for ((row, drow), &t) in lv.chunks(v).zip(dl.chunks_mut(v)).zip(targets) {
                        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        let sum: f32 = row.iter().map(|&z| (z - m).exp()).sum();
                        for j in 0..v {
                            drow[j] = (row[j] - m).exp() / sum * scale;
                        }
                        drow[t] -= scale;
                    }
                    accumulate(&mut grads[logits.0], dl);
                }
            }
            Op::SumAll { x } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::MeanAll { x } => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads[x.0], vec![g[0] / n as f32; n]);
                }
            }
            Op::SumLast { x } => {
                if self.wants(*x) {
                    let d = last_dim(self.value(*x));
                    let mut dx = Vec::with_capacity(self.value(*x).numel());
                    for &gv in g {
                        dx.extend(std::iter::repeat_n(gv, d));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::SubMeanLast { x } => {
                if self.wants(*x) {
                    let d = last_dim(self.value(*x));
                    let mut dx = g.to_vec();
                    for row in dx.chunks_mut(d) {
                        let m = row.iter().sum::<f32>() / d as f32;
                        row.iter_mut().for_each(|v| *v -= m);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Sqrt { x } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    accumulate(
                        &mut grads[x.0],
                        g.iter()
                            .zip(y)
                            .map(|(gv, &yv)| if yv > 0.0 { gv * 0.5 / yv } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Op::Recip { x } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    accumulate(&mut grads[x.0], g.iter().zip(y).map(|(gv, yv)| -gv * yv * yv).collect());
                }
            }
            Op::ClampMin { x, floor } => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    accumulate(
                        &mut grads[x.0],
                        g.iter()
                            .zip(xv)
                            .map(|(gv, &v)| if v > *floor { *gv } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Op::MulRows { x, s } => {
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let d = last_dim(self.value(*x));
                if self.wants(*x) {
                    accumulate(
                        &mut grads[x.0],
                        g.iter().enumerate().map(|(i, gv)| gv * sv[i / d]).collect(),
                    );
                }
                if self.wants(*s) {
                    let ds = g
                        .chunks(d)
                        .zip(xv.chunks(d))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads[s.0], ds);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, contribution: Vec<f32>) {
    match slot {
        None => *slot = Some(contribution),
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
    }
}

fn row_stats(row: &[f32]) -> (f32, f32) {
    let d = row.len() as f32;
    let mean = row.iter().sum::<f32>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn transpose_last2(data: &[f32], r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    if r * c == 0 {
        return out;
    }
    for (src, dst) in data.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Reductions accumulate in f64 so large sums stay accurate.
fn sum_f64(values: &[f32]) -> f64 {
    values.iter().map(|&v| v as f64).sum()
}

pub(crate) fn softmax_values(data: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_layout(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for c in 0..inner {
            let base = o * len * inner + c;
            let m = (0..len)
                .map(|j| data[base + j * inner])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[base + j * inner] - m).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2)).unwrap();
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1., 2.])).unwrap();
        let b = tape.constant(t(&[2, 1], &[3., 4.])).unwrap();
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.]);
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let b = tape.constant(Tensor::ones(&[4, 5])).unwrap();
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(y), &[3, 5]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[1000., 1000.])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[0., 3f32.ln()])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-6 && (v[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_inner_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0., 5., 0., 5.])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v, &[0.5, 0.5, 0.5, 0.5]);
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let confident = tape.constant(t(&[1, 3], &[0., 50., 0.])).unwrap();
        let l = tape.cross_entropy(confident, &[1]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-6);

        let uniform = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
        let l = tape.cross_entropy(uniform, &[2]).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f32.ln()).abs() < 1e-6);

        let rows = tape.constant(t(&[2, 2], &[1., 0., 0., 3.])).unwrap();
        let a = tape.constant(t(&[1, 2], &[1., 0.])).unwrap();
        let b = tape.constant(t(&[1, 2], &[0., 3.])).unwrap();
        let both = tape.cross_entropy(rows, &[1, 0]).unwrap();
        let la = tape.cross_entropy(a, &[1]).unwrap();
        let lb = tape.cross_entropy(b, &[0]).unwrap();
        let expected = (tape.value(la).item().unwrap() + tape.value(lb).item().unwrap()) / 2.0;
        assert!((tape.value(both).item().unwrap() - expected).abs() < 1e-6);

        assert!(matches!(
            tape.cross_entropy(rows, &[0, 2]),
            Err(TensorError::Index { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::filled(&[2, 3], 0.7)).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., 2., 3.])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[0.0])).unwrap();
        assert!(matches!(tape.recip(x), Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn add_broadcasts_over_leading_dims_only() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 3, 4])).unwrap();
        let b = tape.param(Tensor::ones(&[3, 4])).unwrap();
        let c = tape.param(Tensor::ones(&[2, 4])).unwrap();
        assert!(tape.add(a, c).is_err());
        let y = tape.add(a, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap(), &[2.0; 12]);
    }

    /// Finite differences in f64 over small compositions of every primitive.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let base: Vec<f32> = (0..24).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.13).collect();
        let w: Vec<f32> = (0..24).map(|i| ((i * 5 % 13) as f32 - 6.0) * 0.07).collect();
        let build = |x: &[f32]| -> (Tape, Var, Var) {
            let mut tape = Tape::new();
            let xv = tape.param(t(&[2, 3, 4], x)).unwrap();
            let wv = tape.constant(t(&[4, 6], &w)).unwrap();
            let gamma = tape.constant(t(&[4], &[1.0, 0.5, -0.3, 2.0])).unwrap();
            let beta = tape.constant(t(&[4], &[0.1, 0.0, 0.2, -0.1])).unwrap();
            let ln = tape.layer_norm(xv, gamma, beta).unwrap();
            let h = tape.matmul(ln, wv).unwrap();
            let h = tape.gelu(h).unwrap();
            let ht = tape.transpose(h).unwrap();
            let sc = tape.matmul(h, ht).unwrap();
            let sm = tape.softmax(sc, 2).unwrap();
            let c = tape.concat(&[sm, xv]).unwrap();
            let r = tape.reshape(c, &[6, 7]).unwrap();
            let centered = tape.sub_mean_last(r).unwrap();
            let sq = tape.mul(centered, centered).unwrap();
            let norms = tape.sum_last(sq).unwrap();
            let norms = tape.add_scalar(norms, 1.0).unwrap();
            let nr = tape.sqrt(norms).unwrap();
            let nr = tape.clamp_min(nr, 1e-3).unwrap();
            let inv = tape.recip(nr).unwrap();
            let scaled = tape.mul_rows(r, inv).unwrap();
            let sel = tape.gather(scaled, &[0, 5, 2, 2]).unwrap();
            let ce = tape.cross_entropy(sel, &[1, 3, 6, 0]).unwrap();
            let m = tape.mean(scaled).unwrap();
            let m = tape.scale(m, 3.0).unwrap();
            let loss = tape.add(ce, m).unwrap();
            (tape, xv, loss)
        };
        let (tape, xv, loss) = build(&base);
        let g = tape.backward(loss).unwrap();
        let analytic = g.get(xv).unwrap().to_vec();
        let h = 1e-2f32;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            let (tp, _, lp) = build(&p);
            let mut m = base.clone();
            m[i] -= h;
            let (tm, _, lm) = build(&m);
            let fd = (tp.value(lp).item().unwrap() as f64 - tm.value(lm).item().unwrap() as f64) / (2.0 * h as f64);
            let err = (fd - analytic[i] as f64).abs() / fd.abs().max(analytic[i].abs() as f64).max(1e-1);
            assert!(err < 2e-2, "param {i}: fd {fd} vs autodiff {}", analytic[i]);
        }
    }

    #[test]
    fn batched_matmul_gradients() {
        let av: Vec<f32> = (0..12).map(|i| i as f32 * 0.1 - 0.5).collect();
        let bv: Vec<f32> = (0..12).map(|i| 0.3 - i as f32 * 0.05).collect();
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2, 3], &av)).unwrap();
        let b = tape.param(t(&[2, 3, 2], &bv)).unwrap();
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        // d/dA sum(A B) = 1 · Bᵀ: row i of batch t is the row sums of B_t.
        let da = g.get(a).unwrap();
        for batch in 0..2 {
            for k in 0..3 {
                let expected = bv[batch * 6 + k * 2] + bv[batch * 6 + k * 2 + 1];
                assert!((da[batch * 6 + k] - expected).abs() < 1e-6);
                assert!((da[batch * 6 + 3 + k] - expected).abs() < 1e-6);
            }
        }
    }
}
