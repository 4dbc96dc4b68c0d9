//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes in topological order; [`Tape::backward`] walks the tape in
//! reverse and accumulates (sums) gradients into every node that requires
//! them. Named parameters enter through [`Tape::bind`], which caches one leaf
//! per name so that repeated uses of a parameter accumulate into a single
//! gradient buffer.

use std::collections::BTreeMap;

use crate::error::{DtkError, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRowBroadcast { x: Var, row: Var },
    Scale { x: Var, c: F },
    ScaleByVar { x: Var, s: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: F },
    Gelu { x: Var },
    Exp { x: Var },
    Log { x: Var },
    MeanRows { x: Var },
    RowSum { x: Var },
    SumAll { x: Var },
    DiagPart { x: Var },
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatRows { xs: Vec<Var> },
    ConcatCols { xs: Vec<Var> },
    GatherRows { table: Var, ids: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Var },
    L2NormalizeRows { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node<F: Scalar> {
    data: Vec<F>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<F>,
}

/// Recorded forward pass plus, after [`Tape::backward`], its gradients.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    bindings: BTreeMap<String, Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw kernels ───────────────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n]
pub(crate) fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m×k] = A[m×n] · B[k×n]ᵀ
fn matmul_nt_raw<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// B[k×n] = A[m×k]ᵀ · C[m×n]
fn matmul_tn_raw<F: Scalar>(a: &[F], c: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != F::zero() {
                let o_row = &mut out[p * n..(p + 1) * n];
                for (ov, &cv) in o_row.iter_mut().zip(c_row) {
                    *ov += av * cv;
                }
            }
        }
    }
    out
}

fn transpose_raw<F: Scalar>(x: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn gelu_val<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let k3 = F::from_f64(0.134145); // 3 * 0.044715
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + k3 * x * x)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), bindings: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<F>, shape: Vec<usize>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node { data, shape, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was computed.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(DtkError::shape(op, format!("expected rank-2 tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── leaves ────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DtkError::shape(
                "constant",
                format!("shape {shape:?} implies {expected} elements, got {}", data.len()),
            ));
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    pub fn constant_tensor(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), false, Op::Leaf)
    }

    /// Leaf cached by parameter name: every use of a named parameter within
    /// one tape resolves to the same node, so gradient contributions from all
    /// uses sum into one buffer.
    pub fn bind(&mut self, name: &str, t: &Tensor<F>) -> Var {
        if let Some(&v) = self.bindings.get(name) {
            return v;
        }
        let v = self.leaf(t);
        self.bindings.insert(name.to_string(), v);
        v
    }

    /// (name, gradient) pairs for every bound parameter that received one.
    pub fn bound_grads(&self) -> Vec<(String, Vec<F>)> {
        self.bindings
            .iter()
            .filter_map(|(name, &v)| self.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    // ── operations ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rank2(a, "matmul")?;
        let (kb, n) = self.rank2(b, "matmul")?;
        if ka != kb {
            return Err(DtkError::shape(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = matmul_raw(self.value(a), self.value(b), m, ka, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(data, vec![m, n], rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rank2(x, "transpose")?;
        let data = transpose_raw(self.value(x), m, n);
        let rg = self.requires_grad(x);
        Ok(self.push(data, vec![n, m], rg, Op::Transpose { x }))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DtkError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(data, shape, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(data, shape, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(data, shape, rg, Op::Mul { a, b }))
    }

    /// `[m×n] + [1×n]` with the row repeated over every row of `x`.
    pub fn add_row_broadcast(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.rank2(x, "add_row_broadcast")?;
        let (rm, rn) = self.rank2(row, "add_row_broadcast")?;
        if rm != 1 || rn != n {
            return Err(DtkError::shape(
                "add_row_broadcast",
                format!("{:?} + {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let mut data = self.value(x).to_vec();
        let r = self.value(row).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(row);
        Ok(self.push(data, vec![m, n], rg, Op::AddRowBroadcast { x, row }))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let data: Vec<F> = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(data, shape, rg, Op::Scale { x, c })
    }

    /// Multiply every element of `x` by a single-element tensor `s`.
    /// Gradients flow to both `x` and `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(DtkError::shape(
                "scale_by",
                format!("scale must have one element, got shape {:?}", self.shape(s)),
            ));
        }
        let sv = self.value(s)[0];
        let data: Vec<F> = self.value(x).iter().map(|&v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(s);
        Ok(self.push(data, shape, rg, Op::ScaleByVar { x, s }))
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rank2(x, "softmax_rows")?;
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(DtkError::numeric("softmax_rows", "NaN in input"));
        }
        let xv = self.value(x);
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mx = row.iter().fold(F::neg_infinity(), |acc, &v| acc.max(v));
            let mut sum = F::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(data, vec![m, n], rg, Op::SoftmaxRows { x }))
    }

    /// Per-row normalization to zero mean / unit variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (m, n) = self.rank2(x, "layer_norm")?;
        if n == 0 {
            return Err(DtkError::shape("layer_norm", "zero-length row"));
        }
        let gn = self.value(gamma).len();
        let bn = self.value(beta).len();
        if gn != n || bn != n {
            return Err(DtkError::shape(
                "layer_norm",
                format!("gamma/beta lengths {gn}/{bn} vs row width {n}"),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let inv_n = F::from_f64(1.0 / n as f64);
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = F::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = (var + eps).sqrt().recip();
            for j in 0..n {
                data[i * n + j] = g[j] * (row[j] - mean) * inv_std + b[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(data, vec![m, n], rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<F> = self.value(x).iter().map(|&v| gelu_val(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(data, shape, rg, Op::Gelu { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data: Vec<F> = self.value(x).iter().map(|&v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(data, shape, rg, Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v <= F::zero()) {
            return Err(DtkError::numeric("log", "non-positive input"));
        }
        let data: Vec<F> = self.value(x).iter().map(|&v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(data, shape, rg, Op::Log { x }))
    }

    /// Mean over rows: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rank2(x, "mean_rows")?;
        if m == 0 {
            return Err(DtkError::shape("mean_rows", "no rows"));
        }
        let xv = self.value(x);
        let inv_m = F::from_f64(1.0 / m as f64);
        let mut data = vec![F::zero(); n];
        for i in 0..m {
            for j in 0..n {
                data[j] += xv[i * n + j];
            }
        }
        for d in data.iter_mut() {
            *d *= inv_m;
        }
        let rg = self.requires_grad(x);
        Ok(self.push(data, vec![1, n], rg, Op::MeanRows { x }))
    }

    /// Sum along each row: `[m×n] -> [m×1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rank2(x, "row_sum")?;
        let xv = self.value(x);
        let data: Vec<F> = (0..m)
            .map(|i| {
                let mut s = F::zero();
                for j in 0..n {
                    s += xv[i * n + j];
                }
                s
            })
            .collect();
        let rg = self.requires_grad(x);
        Ok(self.push(data, vec![m, 1], rg, Op::RowSum { x }))
    }

    /// Sum of all elements: `-> [1×1]`.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = F::zero();
        for &v in self.value(x) {
            s += v;
        }
        let rg = self.requires_grad(x);
        self.push(vec![s], vec![1, 1], rg, Op::SumAll { x })
    }

    /// Diagonal of a square matrix as a column: `[n×n] -> [n×1]`.
    pub fn diag_part(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rank2(x, "diag_part")?;
        if m != n {
            return Err(DtkError::shape("diag_part", format!("matrix not square: {m}x{n}")));
        }
        let xv = self.value(x);
        let data: Vec<F> = (0..n).map(|i| xv[i * n + i]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(data, vec![n, 1], rg, Op::DiagPart { x }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rank2(x, "slice_rows")?;
        if start + len > m {
            return Err(DtkError::shape(
                "slice_rows",
                format!("rows {start}..{} out of bounds for {m} rows", start + len),
            ));
        }
        let data = self.value(x)[start * n..(start + len) * n].to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(data, vec![len, n], rg, Op::SliceRows { x, start, len }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rank2(x, "slice_cols")?;
        if start + len > n {
            return Err(DtkError::shape(
                "slice_cols",
                format!("cols {start}..{} out of bounds for {n} cols", start + len),
            ));
        }
        let xv = self.value(x);
        let mut data = vec![F::zero(); m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(data, vec![m, len], rg, Op::SliceCols { x, start, len }))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(DtkError::shape("concat_rows", "empty input list"));
        }
        let (_, n) = self.rank2(xs[0], "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &x in xs {
            let (m, nx) = self.rank2(x, "concat_rows")?;
            if nx != n {
                return Err(DtkError::shape("concat_rows", format!("column mismatch: {nx} vs {n}")));
            }
            data.extend_from_slice(self.value(x));
            rows += m;
            rg |= self.requires_grad(x);
        }
        Ok(self.push(data, vec![rows, n], rg, Op::ConcatRows { xs: xs.to_vec() }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(DtkError::shape("concat_cols", "empty input list"));
        }
        let (m, _) = self.rank2(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0;
        let mut rg = false;
        for &x in xs {
            let (mx, nx) = self.rank2(x, "concat_cols")?;
            if mx != m {
                return Err(DtkError::shape("concat_cols", format!("row mismatch: {mx} vs {m}")));
            }
            widths.push(nx);
            total += nx;
            rg |= self.requires_grad(x);
        }
        let mut data = vec![F::zero(); m * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let xv = self.value(x).to_vec();
            for i in 0..m {
                data[i * total + off..i * total + off + w].copy_from_slice(&xv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(data, vec![m, total], rg, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// Row lookup into an embedding table: `table[V×D], ids[n] -> [n×D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.rank2(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(DtkError::Contract(format!("gather_rows: id {bad} out of range {v}")));
        }
        let tv = self.value(table);
        let mut data = vec![F::zero(); ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(data, vec![ids.len(), d], rg, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// 1-D convolution over time: `x[T×Cin], w[Cout×Cin×K], b[Cout] -> [T×Cout]`.
    /// Stride 1, zero same-padding; K must be odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t, cin) = self.rank2(x, "conv1d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 {
            return Err(DtkError::shape("conv1d", format!("weight must be rank 3, got {ws:?}")));
        }
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if wcin != cin {
            return Err(DtkError::shape("conv1d", format!("input channels {cin} vs weight {wcin}")));
        }
        if k % 2 == 0 {
            return Err(DtkError::Contract(format!("conv1d kernel must be odd for same padding, got {k}")));
        }
        if self.value(b).len() != cout {
            return Err(DtkError::shape(
                "conv1d",
                format!("bias length {} vs out channels {cout}", self.value(b).len()),
            ));
        }
        let pad = k / 2;
        let xv = self.value(x);
        let wv = self.value(w).to_vec();
        let bv = self.value(b).to_vec();
        let mut data = vec![F::zero(); t * cout];
        for ti in 0..t {
            for co in 0..cout {
                let mut acc = bv[co];
                for dk in 0..k {
                    let src = ti as isize + dk as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let x_row = &xv[src as usize * cin..(src as usize + 1) * cin];
                    let w_row = &wv[co * cin * k + dk..];
                    for ci in 0..cin {
                        acc += x_row[ci] * w_row[ci * k];
                    }
                }
                data[ti * cout + co] = acc;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(data, vec![t, cout], rg, Op::Conv1d { x, w, b }))
    }

    /// Rescale each row to unit L2 norm. Errors on (numerically) zero rows.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rank2(x, "l2_normalize_rows")?;
        let xv = self.value(x);
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut sq = F::zero();
            for &v in row {
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm <= F::from_f64(1e-30) {
                return Err(DtkError::numeric("l2_normalize_rows", format!("row {i} has zero norm")));
            }
            for j in 0..n {
                data[i * n + j] = row[j] / norm;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(data, vec![m, n], rg, Op::L2NormalizeRows { x }))
    }

    /// Softmax cross-entropy, mean over the batch: `logits[B×C] -> [1×1]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (bsz, c) = self.rank2(logits, "cross_entropy")?;
        if labels.len() != bsz {
            return Err(DtkError::Contract(format!(
                "cross_entropy: {} labels for batch of {bsz}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(DtkError::Contract(format!("cross_entropy: label {bad} out of range {c}")));
        }
        let lv = self.value(logits);
        let mut total = F::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().fold(F::neg_infinity(), |acc, &v| acc.max(v));
            let mut sum = F::zero();
            for &v in row {
                sum += (v - mx).exp();
            }
            total += mx + sum.ln() - row[y];
        }
        total *= F::from_f64(1.0 / bsz as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(vec![total], vec![1, 1], rg, Op::CrossEntropy { logits, labels: labels.to_vec() }))
    }

    // ── backward ──────────────────────────────────────────────────────

    fn add_grad(&mut self, v: Var, delta: &[F]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = self.grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].data.len()]);
        for (g, &d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Reverse pass from a scalar loss. Populates gradients for every node
    /// with `requires_grad`; frozen leaves receive none.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(DtkError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = self.grads[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if self.requires_grad(a) {
                        let da = matmul_nt_raw(&gout, self.value(b), m, n, k);
                        self.add_grad(a, &da);
                    }
                    if self.requires_grad(b) {
                        let db = matmul_tn_raw(self.value(a), &gout, m, k, n);
                        self.add_grad(b, &db);
                    }
                }
                Op::Transpose { x } => {
                    let (n, m) = (self.shape(Var(idx))[0], self.shape(Var(idx))[1]);
                    let dx = transpose_raw(&gout, n, m);
                    self.add_grad(x, &dx);
                }
                Op::Add { a, b } => {
                    self.add_grad(a, &gout);
                    self.add_grad(b, &gout);
                }
                Op::Sub { a, b } => {
                    self.add_grad(a, &gout);
                    let neg: Vec<F> = gout.iter().map(|&g| -g).collect();
                    self.add_grad(b, &neg);
                }
                Op::Mul { a, b } => {
                    if self.requires_grad(a) {
                        let da: Vec<F> = gout.iter().zip(self.value(b)).map(|(&g, &v)| g * v).collect();
                        self.add_grad(a, &da);
                    }
                    if self.requires_grad(b) {
                        let db: Vec<F> = gout.iter().zip(self.value(a)).map(|(&g, &v)| g * v).collect();
                        self.add_grad(b, &db);
                    }
                }
                Op::AddRowBroadcast { x, row } => {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    self.add_grad(x, &gout);
                    if self.requires_grad(row) {
                        let mut dr = vec![F::zero(); n];
                        for i in 0..m {
                            for j in 0..n {
                                dr[j] += gout[i * n + j];
                            }
                        }
                        self.add_grad(row, &dr);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<F> = gout.iter().map(|&g| g * c).collect();
                    self.add_grad(x, &dx);
                }
                Op::ScaleByVar { x, s } => {
                    let sv = self.value(s)[0];
                    if self.requires_grad(x) {
                        let dx: Vec<F> = gout.iter().map(|&g| g * sv).collect();
                        self.add_grad(x, &dx);
                    }
                    if self.requires_grad(s) {
                        let mut ds = F::zero();
                        for (&g, &xv) in gout.iter().zip(self.value(x)) {
                            ds += g * xv;
                        }
                        self.add_grad(s, &[ds]);
                    }
                }
                Op::SoftmaxRows { x } => {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let y = self.value(Var(idx)).to_vec();
                    let mut dx = vec![F::zero(); m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &gout[i * n..(i + 1) * n];
                        let mut dot = F::zero();
                        for j in 0..n {
                            dot += yr[j] * gr[j];
                        }
                        for j in 0..n {
                            dx[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let xv = self.value(x).to_vec();
                    let g = self.value(gamma).to_vec();
                    let inv_n = F::from_f64(1.0 / n as f64);
                    let mut dx = vec![F::zero(); m * n];
                    let mut dgamma = vec![F::zero(); n];
                    let mut dbeta = vec![F::zero(); n];
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let gr = &gout[i * n..(i + 1) * n];
                        let mut mean = F::zero();
                        for &v in row {
                            mean += v;
                        }
                        mean *= inv_n;
                        let mut var = F::zero();
                        for &v in row {
                            let d = v - mean;
                            var += d * d;
                        }
                        var *= inv_n;
                        let inv_std = (var + eps).sqrt().recip();
                        // dxhat, then the standard three-term input gradient
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xc = F::zero();
                        for j in 0..n {
                            let xc = row[j] - mean;
                            let xhat = xc * inv_std;
                            let dxhat = gr[j] * g[j];
                            dgamma[j] += gr[j] * xhat;
                            dbeta[j] += gr[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xc += dxhat * xc;
                        }
                        let dvar = sum_dxhat_xc * F::from_f64(-0.5) * inv_std * inv_std * inv_std;
                        let dmean = -inv_std * sum_dxhat;
                        let two_inv_n = F::from_f64(2.0 / n as f64);
                        for j in 0..n {
                            let xc = row[j] - mean;
                            let dxhat = gr[j] * g[j];
                            dx[i * n + j] = dxhat * inv_std + dvar * two_inv_n * xc + dmean * inv_n;
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gamma, &dgamma);
                    self.add_grad(beta, &dbeta);
                }
                Op::Gelu { x } => {
                    let dx: Vec<F> =
                        gout.iter().zip(self.value(x)).map(|(&g, &v)| g * gelu_grad(v)).collect();
                    self.add_grad(x, &dx);
                }
                Op::Exp { x } => {
                    let dx: Vec<F> =
                        gout.iter().zip(self.value(Var(idx))).map(|(&g, &y)| g * y).collect();
                    self.add_grad(x, &dx);
                }
                Op::Log { x } => {
                    let dx: Vec<F> =
                        gout.iter().zip(self.value(x)).map(|(&g, &v)| g / v).collect();
                    self.add_grad(x, &dx);
                }
                Op::MeanRows { x } => {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let inv_m = F::from_f64(1.0 / m as f64);
                    let mut dx = vec![F::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = gout[j] * inv_m;
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::RowSum { x } => {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut dx = vec![F::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = gout[i];
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::SumAll { x } => {
                    let dx = vec![gout[0]; self.value(x).len()];
                    self.add_grad(x, &dx);
                }
                Op::DiagPart { x } => {
                    let n = self.shape(x)[0];
                    let mut dx = vec![F::zero(); n * n];
                    for i in 0..n {
                        dx[i * n + i] = gout[i];
                    }
                    self.add_grad(x, &dx);
                }
                Op::SliceRows { x, start, len: _ } => {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut dx = vec![F::zero(); m * n];
                    dx[start * n..start * n + gout.len()].copy_from_slice(&gout);
                    self.add_grad(x, &dx);
                }
                Op::SliceCols { x, start, len } => {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut dx = vec![F::zero(); m * n];
                    for i in 0..m {
                        for j in 0..len {
                            dx[i * n + start + j] = gout[i * len + j];
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::ConcatRows { xs } => {
                    let n = self.shape(Var(idx))[1];
                    let mut off = 0;
                    for &x in &xs {
                        let m = self.shape(x)[0];
                        let part = gout[off * n..(off + m) * n].to_vec();
                        self.add_grad(x, &part);
                        off += m;
                    }
                }
                Op::ConcatCols { xs } => {
                    let (m, total) = (self.shape(Var(idx))[0], self.shape(Var(idx))[1]);
                    let mut off = 0;
                    for &x in &xs {
                        let w = self.shape(x)[1];
                        let mut part = vec![F::zero(); m * w];
                        for i in 0..m {
                            part[i * w..(i + 1) * w]
                                .copy_from_slice(&gout[i * total + off..i * total + off + w]);
                        }
                        self.add_grad(x, &part);
                        off += w;
                    }
                }
                Op::GatherRows { table, ids } => {
                    if self.requires_grad(table) {
                        let (v, d) = (self.shape(table)[0], self.shape(table)[1]);
                        let mut dt = vec![F::zero(); v * d];
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += gout[r * d + j];
                            }
                        }
                        self.add_grad(table, &dt);
                    }
                }
                Op::Conv1d { x, w, b } => {
                    let (t, cin) = (self.shape(x)[0], self.shape(x)[1]);
                    let ws = self.shape(w).to_vec();
                    let (cout, k) = (ws[0], ws[2]);
                    let pad = k / 2;
                    let xv = self.value(x).to_vec();
                    let wv = self.value(w).to_vec();
                    let need_x = self.requires_grad(x);
                    let need_w = self.requires_grad(w);
                    let need_b = self.requires_grad(b);
                    let mut dx = vec![F::zero(); t * cin];
                    let mut dw = vec![F::zero(); cout * cin * k];
                    let mut db = vec![F::zero(); cout];
                    for ti in 0..t {
                        for co in 0..cout {
                            let g = gout[ti * cout + co];
                            if need_b {
                                db[co] += g;
                            }
                            for dk in 0..k {
                                let src = ti as isize + dk as isize - pad as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                let s = src as usize;
                                for ci in 0..cin {
                                    if need_w {
                                        dw[co * cin * k + ci * k + dk] += g * xv[s * cin + ci];
                                    }
                                    if need_x {
                                        dx[s * cin + ci] += g * wv[co * cin * k + ci * k + dk];
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        self.add_grad(x, &dx);
                    }
                    if need_w {
                        self.add_grad(w, &dw);
                    }
                    if need_b {
                        self.add_grad(b, &db);
                    }
                }
                Op::L2NormalizeRows { x } => {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let xv = self.value(x).to_vec();
                    let y = self.value(Var(idx)).to_vec();
                    let mut dx = vec![F::zero(); m * n];
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &gout[i * n..(i + 1) * n];
                        let mut sq = F::zero();
                        for &v in row {
                            sq += v * v;
                        }
                        let norm = sq.sqrt();
                        let mut dot = F::zero();
                        for j in 0..n {
                            dot += yr[j] * gr[j];
                        }
                        for j in 0..n {
                            dx[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::CrossEntropy { logits, labels } => {
                    let (bsz, c) = (self.shape(logits)[0], self.shape(logits)[1]);
                    let lv = self.value(logits).to_vec();
                    let scale = gout[0] * F::from_f64(1.0 / bsz as f64);
                    let mut dl = vec![F::zero(); bsz * c];
                    for (i, &y) in labels.iter().enumerate() {
                        let row = &lv[i * c..(i + 1) * c];
                        let mx = row.iter().fold(F::neg_infinity(), |acc, &v| acc.max(v));
                        let mut sum = F::zero();
                        for &v in row {
                            sum += (v - mx).exp();
                        }
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / sum;
                            let indicator = if j == y { F::one() } else { F::zero() };
                            dl[i * c + j] = scale * (p - indicator);
                        }
                    }
                    self.add_grad(logits, &dl);
                }
            }
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }
}
