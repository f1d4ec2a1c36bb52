use super::{shape_err, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Tape length snapshot; see [`Tape::rewind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mark(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// a [m,k] times transpose of b [n,k]
    MatMulNt {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        bias: usize,
        cols: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    AddScalar {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Log {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    LogSigmoid {
        a: usize,
    },
    Softmax {
        a: usize,
        cols: usize,
    },
    LogSoftmax {
        a: usize,
        cols: usize,
    },
    GatherRows {
        table: usize,
        idx: Vec<usize>,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    WeightedSum {
        a: usize,
        w: Vec<f64>,
    },
    SegmentSum {
        a: usize,
        segments: Vec<Vec<(usize, f64)>>,
    },
    CausalAttention {
        qkv: usize,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    PickLogProb {
        logits: usize,
        targets: Vec<usize>,
        cols: usize,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: usize,
        target: Vec<f64>,
        row_w: Vec<f64>,
        cols: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive evaluations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf that requires grad. `None` when the output does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape[..shape.len().saturating_sub(1)].iter().product();
    (rows, cols)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// c[m,n] = alpha * a * b + beta * c with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices sized for the given dimensions and strides;
    // c is row-major [m, n] and does not alias a or b.
    unsafe {
        matrixmultiply::dgemm(
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

    pub fn mark(&self) -> Mark {
        Mark(self.nodes.len())
    }

    /// Drops every node recorded after `mark`. Vars created after the mark
    /// become invalid.
    pub fn rewind(&mut self, mark: Mark) {
        self.nodes.truncate(mark.0);
    }

    /// Records a leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let (shape, data) = t.into_parts();
        self.push(shape, data, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape nodes hold valid tensors")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].requires_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(shape_err(
                op,
                format!("operands have shapes {sa:?} and {sb:?}"),
            ));
        }
        Ok(())
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]: inner dims differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].data,
            (k as isize, 1),
            &self.nodes[b.0].data,
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `a · bᵀ` for a [m,k] and b [n,k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err(
                "matmul_nt",
                format!("[{m}, {k}] x [{n}, {k2}]^T: inner dims differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].data,
            (k as isize, 1),
            &self.nodes[b.0].data,
            (1, k as isize),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMulNt {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    // ---- elementwise ----

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: Op,
    ) -> Result<Var, TensorError> {
        self.same_shape(op, a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, mk, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Adds `bias` (length = last dim of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(&self.nodes[a.0].shape);
        let bl = self.nodes[bias.0].data.len();
        if bl != cols {
            return Err(shape_err(
                "add_row",
                format!(
                    "bias has {bl} values, rows of {:?} have {cols}",
                    self.nodes[a.0].shape
                ),
            ));
        }
        let bias_data = &self.nodes[bias.0].data;
        let mut out = self.nodes[a.0].data.clone();
        for row in out.chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(bias_data) {
                *o += b;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, bias.0]);
        Ok(self.push(
            shape,
            out,
            Op::AddRow {
                a: a.0,
                bias: bias.0,
                cols,
            },
            rg,
        ))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, mk: Op) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, out, mk, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale { a: a.0, c })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log { a: a.0 })
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu { a: a.0 },
        )
    }

    /// Numerically stable `log σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid { a: a.0 })
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, cols) = rows_cols(&self.nodes[a.0].shape);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for (o, r) in out.chunks_mut(cols).zip(src.chunks(cols)) {
            softmax_row(r, o);
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, out, Op::Softmax { a: a.0, cols }, rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, cols) = rows_cols(&self.nodes[a.0].shape);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for (o, r) in out.chunks_mut(cols).zip(src.chunks(cols)) {
            log_softmax_row(r, o);
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, out, Op::LogSoftmax { a: a.0, cols }, rg)
    }

    // ---- indexing / normalisation ----

    /// Selects rows of a [rows, cols] table; output is [idx.len(), cols].
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.matrix_dims("gather_rows", table)?;
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            vec![idx.len(), cols],
            out,
            Op::GatherRows {
                table: table.0,
                idx: idx.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Normalises each row to zero mean and unit variance, then applies the
    /// per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (rows, cols) = rows_cols(&self.nodes[x.0].shape);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let l = self.nodes[v.0].data.len();
            if l != cols {
                return Err(shape_err(
                    "layer_norm",
                    format!("{name} has {l} values, rows have {cols}"),
                ));
            }
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                cols,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], Op::Sum { a: a.0 }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = &self.nodes[a.0].data;
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], Op::Mean { a: a.0 }, rg)
    }

    /// Scalar `Σ w_i a_i`.
    pub fn weighted_sum(&mut self, a: Var, w: &[f64]) -> Result<Var, TensorError> {
        let d = &self.nodes[a.0].data;
        if d.len() != w.len() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} weights for {} values", w.len(), d.len()),
            ));
        }
        let s = d.iter().zip(w).map(|(x, y)| x * y).sum();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![s],
            Op::WeightedSum {
                a: a.0,
                w: w.to_vec(),
            },
            rg,
        ))
    }

    /// Output element `s` is `Σ_(i, w) in segments[s] w · a_i`.
    pub fn segment_sum(
        &mut self,
        a: Var,
        segments: &[Vec<(usize, f64)>],
    ) -> Result<Var, TensorError> {
        let d = &self.nodes[a.0].data;
        if segments.is_empty() {
            return Err(shape_err("segment_sum", "no segments"));
        }
        let mut out = Vec::with_capacity(segments.len());
        for seg in segments {
            let mut s = 0.0;
            for &(i, w) in seg {
                let x = d.get(i).ok_or_else(|| {
                    shape_err(
                        "segment_sum",
                        format!("index {i} out of range for {} values", d.len()),
                    )
                })?;
                s += w * x;
            }
            out.push(s);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            vec![segments.len()],
            out,
            Op::SegmentSum {
                a: a.0,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    // ---- fused model primitives ----

    /// Multi-head causal self-attention over packed `[q | k | v]` rows.
    ///
    /// `qkv` is `[n_seq * seq_len, 3d]`; rows of each sequence are contiguous.
    /// Output is `[n_seq * seq_len, d]`.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let (rows, width) = self.matrix_dims("causal_attention", qkv)?;
        if width % 3 != 0 || heads == 0 || (width / 3) % heads != 0 {
            return Err(shape_err(
                "causal_attention",
                format!("packed width {width} is not 3 * heads({heads}) * head_dim"),
            ));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(shape_err(
                "causal_attention",
                format!("{rows} rows do not split into sequences of length {seq_len}"),
            ));
        }
        let d = width / 3;
        let hd = d / heads;
        let n_seq = rows / seq_len;
        let scale = 1.0 / (hd as f64).sqrt();
        let src = &self.nodes[qkv.0].data;
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
        let mut scores = vec![0.0; seq_len];
        for s in 0..n_seq {
            for h in 0..heads {
                let pbase = (s * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = &src[(s * seq_len + i) * width + h * hd..][..hd];
                    let mut max = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &src[(s * seq_len + j) * width + d + h * hd..][..hd];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        *sc = dot * scale;
                        max = max.max(*sc);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut().take(i + 1) {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let prow = &mut probs[pbase + i * seq_len..][..seq_len];
                    let orow = &mut out[(s * seq_len + i) * d + h * hd..][..hd];
                    for j in 0..=i {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vj = &src[(s * seq_len + j) * width + 2 * d + h * hd..][..hd];
                        for (o, &v) in orow.iter_mut().zip(vj) {
                            *o += p * v;
                        }
                    }
                }
            }
        }
        let rg = self.nodes[qkv.0].requires_grad;
        Ok(self.push(
            vec![rows, d],
            out,
            Op::CausalAttention {
                qkv: qkv.0,
                seq_len,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Per-row `log softmax(logits)[target]`; output is `[rows]`.
    pub fn pick_log_prob(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.matrix_dims("pick_log_prob", logits)?;
        if targets.len() != rows {
            return Err(shape_err(
                "pick_log_prob",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(shape_err(
                "pick_log_prob",
                format!("target {bad} out of range for {cols} classes"),
            ));
        }
        let src = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; rows * cols];
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let lp = &mut probs[r * cols..(r + 1) * cols];
            log_softmax_row(&src[r * cols..(r + 1) * cols], lp);
            out.push(lp[targets[r]]);
            for p in lp.iter_mut() {
                *p = p.exp();
            }
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![rows],
            out,
            Op::PickLogProb {
                logits: logits.0,
                targets: targets.to_vec(),
                cols,
                probs,
            },
            rg,
        ))
    }

    /// Scalar `Σ_r row_w[r] · Σ_c −target[r,c] · log softmax(logits)[r,c]`.
    ///
    /// `target` is treated as a constant distribution per row.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        target: &[f64],
        row_w: &[f64],
    ) -> Result<Var, TensorError> {
        let (rows, cols) = self.matrix_dims("soft_cross_entropy", logits)?;
        if target.len() != rows * cols || row_w.len() != rows {
            return Err(shape_err(
                "soft_cross_entropy",
                format!(
                    "logits [{rows}, {cols}] with {} target values and {} row weights",
                    target.len(),
                    row_w.len()
                ),
            ));
        }
        let src = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for r in 0..rows {
            let lp = &mut probs[r * cols..(r + 1) * cols];
            log_softmax_row(&src[r * cols..(r + 1) * cols], lp);
            if row_w[r] != 0.0 {
                let ce: f64 = lp
                    .iter()
                    .zip(&target[r * cols..(r + 1) * cols])
                    .map(|(l, t)| -t * l)
                    .sum();
                total += row_w[r] * ce;
            }
            for p in lp.iter_mut() {
                *p = p.exp();
            }
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![total],
            Op::SoftCrossEntropy {
                logits: logits.0,
                target: target.to_vec(),
                row_w: row_w.to_vec(),
                cols,
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----

    pub fn backward_scalar(&self, out: Var) -> Result<Gradients, TensorError> {
        self.backward(out, &[1.0])
    }

    /// Reverse sweep from `out` seeded with `seed`.
    pub fn backward(&self, out: Var, seed: &[f64]) -> Result<Gradients, TensorError> {
        let expected = self.nodes[out.0].data.len();
        if seed.len() != expected {
            return Err(TensorError::SeedShape {
                expected,
                got: seed.len(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed.to_vec());
        }
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        // only leaf gradients survive
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], idx: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[idx].requires_grad {
            return None;
        }
        let len = self.nodes[idx].data.len();
        Some(grads[idx].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let data = |i: usize| -> &[f64] { &self.nodes[i].data };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.acc(grads, a) {
                    // dA += dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        data(b),
                        (1, n as isize),
                        1.0,
                        ga,
                    );
                }
                if let Some(gb) = self.acc(grads, b) {
                    // dB += Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        data(a),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        1.0,
                        gb,
                    );
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if let Some(ga) = self.acc(grads, a) {
                    // dA += dC · B
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        data(b),
                        (k as isize, 1),
                        1.0,
                        ga,
                    );
                }
                if let Some(gb) = self.acc(grads, b) {
                    // dB += dCᵀ · A
                    gemm(
                        n,
                        m,
                        k,
                        g,
                        (1, n as isize),
                        data(a),
                        (k as isize, 1),
                        1.0,
                        gb,
                    );
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul { a, b } => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, y), bv) in ga.iter_mut().zip(g).zip(data(b)) {
                        *x += y * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((x, y), av) in gb.iter_mut().zip(g).zip(data(a)) {
                        *x += y * av;
                    }
                }
            }
            &Op::AddRow { a, bias, cols } => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, bias) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            &Op::AddScalar { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            &Op::Exp { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(&node.data) {
                        *x += y * o;
                    }
                }
            }
            &Op::Log { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(data(a)) {
                        *x += y / v;
                    }
                }
            }
            &Op::Gelu { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, y), &v) in ga.iter_mut().zip(g).zip(data(a)) {
                        let inner = GELU_C * (v + 0.044715 * v * v * v);
                        let t = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
                        *x += y * d;
                    }
                }
            }
            &Op::LogSigmoid { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, y), &v) in ga.iter_mut().zip(g).zip(data(a)) {
                        *x += y * sigmoid(-v);
                    }
                }
            }
            &Op::Softmax { a, cols } => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((gx, gy), p) in ga
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(node.data.chunks(cols))
                    {
                        let dot: f64 = gy.iter().zip(p).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[c] += p[c] * (gy[c] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a, cols } => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((gx, gy), lp) in ga
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(node.data.chunks(cols))
                    {
                        let s: f64 = gy.iter().sum();
                        for c in 0..cols {
                            gx[c] += gy[c] - lp[c].exp() * s;
                        }
                    }
                }
            }
            Op::GatherRows { table, idx, cols } => {
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut gt[i * cols..(i + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let gam = data(*gamma);
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gy, xh) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gy[c] * xh[c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gy in g.chunks(cols) {
                        gb.iter_mut().zip(gy).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxh = vec![0.0; cols];
                    for (r, (gy, xh)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            dxh[c] = gy[c] * gam[c];
                            m1 += dxh[c];
                            m2 += dxh[c] * xh[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] += rstd[r] * (dxh[c] - m1 - xh[c] * m2);
                        }
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::WeightedSum { a, w } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(w).for_each(|(x, wi)| *x += g[0] * wi);
                }
            }
            Op::SegmentSum { a, segments } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (seg, gs) in segments.iter().zip(g) {
                        for &(i, w) in seg {
                            ga[i] += gs * w;
                        }
                    }
                }
            }
            Op::CausalAttention {
                qkv,
                seq_len,
                heads,
                probs,
            } => {
                let Some(gq) = self.acc(grads, *qkv) else {
                    return;
                };
                let (t, heads) = (*seq_len, *heads);
                let src = data(*qkv);
                let width = src.len() / node.shape[0];
                let d = width / 3;
                let hd = d / heads;
                let n_seq = node.shape[0] / t;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dp = vec![0.0; t];
                for s in 0..n_seq {
                    for h in 0..heads {
                        let pbase = (s * heads + h) * t * t;
                        for i in 0..t {
                            let go = &g[(s * t + i) * d + h * hd..][..hd];
                            let prow = &probs[pbase + i * t..][..t];
                            let mut dot = 0.0;
                            for j in 0..=i {
                                let vj = &src[(s * t + j) * width + 2 * d + h * hd..][..hd];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += prow[j] * dp[j];
                                // dV_j += p_ij * dO_i
                                let gv = &mut gq[(s * t + j) * width + 2 * d + h * hd..][..hd];
                                gv.iter_mut().zip(go).for_each(|(x, y)| *x += prow[j] * y);
                            }
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let qi_off = (s * t + i) * width + h * hd;
                                let kj_off = (s * t + j) * width + d + h * hd;
                                for c in 0..hd {
                                    gq[qi_off + c] += ds * src[kj_off + c];
                                    gq[kj_off + c] += ds * src[qi_off + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::PickLogProb {
                logits,
                targets,
                cols,
                probs,
            } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let cols = *cols;
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let dst = &mut gl[r * cols..(r + 1) * cols];
                        for (x, p) in dst.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                            *x -= gr * p;
                        }
                        dst[t] += gr;
                    }
                }
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                row_w,
                cols,
                probs,
            } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let cols = *cols;
                    for (r, &w) in row_w.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = g[0] * w;
                        let tr = &target[r * cols..(r + 1) * cols];
                        let mass: f64 = tr.iter().sum();
                        let dst = &mut gl[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] += s * (mass * probs[r * cols + c] - tr[c]);
                        }
                    }
                }
            }
        }
    }
}
