//! Reverse-mode gradients over a fixed set of layer operations.
//!
//! A `Tape` records every op of one forward pass; `backward` replays the
//! recording in reverse and accumulates gradients for every node, so callers
//! can read the gradient of any leaf they bound a parameter to. The op set is
//! exactly what the models in this crate need -- there is no general autograd.
//!
//! Values are immutable once recorded. Each op validates shapes up front and
//! checks its output for NaN/Inf, so numeric trouble is reported at the op
//! that caused it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, mul: f64, add: f64 },
    Matmul(Var, Var),
    Relu(Var),
    LeakyRelu { x: Var, slope: f64 },
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    BroadcastRow { v: Var, rows: usize },
    ConcatCols(Var, Var),
    Frame { x: Var, width: usize },
    Downsample2(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by `Var`, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Row-major matmul kernel, `[n,k] x [k,m] -> [n,m]`.
fn matmul_kernel(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += aik * brow[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, context: &str) -> Result<Var> {
        value.check_finite(context)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a constant or parameter value. The caller keeps the handle to
    /// read its gradient back after `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        self.leaf(Tensor::scalar(v))
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b), "add")
    }

    /// `[n,m] + [m]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(b).shape() != [m] {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {:?} does not match {m} columns",
                self.value(b).shape()
            )));
        }
        let xb = self.value(x).data();
        let bb = self.value(b).data();
        let mut data = xb.to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += bb[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(t, Op::AddBias(x, b), "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let t = self.value(x).map(|v| mul * v + add);
        self.push(t, Op::Affine { x, mul, add }, "affine")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, -1.0, 0.0)?;
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; n * m];
        matmul_kernel(self.value(a).data(), self.value(b).data(), n, k, m, &mut out);
        let t = Tensor::new(vec![n, m], out)?;
        self.push(t, Op::Matmul(a, b), "matmul")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x), "relu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu { x, slope }, "leaky_relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x), "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::ln);
        self.push(t, Op::Log(x), "log")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::abs);
        self.push(t, Op::Abs(x), "abs")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if m == 0 {
            return Err(Error::EmptyInput("softmax over zero columns".into()));
        }
        let xd = self.value(x).data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                data[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                data[i * m + j] /= z;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(t, Op::Softmax(x), "softmax")
    }

    /// Row-wise layer norm with affine parameters: `gamma * (x-mu)/sqrt(var+eps) + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let eps = 1e-5;
        let (n, m) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [m] || self.value(beta).shape() != [m] {
            return Err(Error::Dimension(format!(
                "layernorm: gamma/beta must be [{m}], got {:?}/{:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..m {
                data[i * m + j] = g[j] * (row[j] - mu) * inv + bt[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(t, Op::LayerNorm { x, gamma, beta, eps }, "layernorm")
    }

    /// Look up rows of `table` by token id: `[V,E] x ids -> [len(ids), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Contract(format!("token id {bad} >= vocab {v}")));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            data.extend_from_slice(&td[id * e..(id + 1) * e]);
        }
        let t = Tensor::new(vec![ids.len(), e], data)?;
        self.push(t, Op::Embedding { table, ids: ids.to_vec() }, "embedding")
    }

    /// 1-D convolution over time-major input: `x [T,Cin]`, `w [Cout,Cin,k]`,
    /// `b [Cout]` with zero padding. Output `[T_out, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (t_in, c_in) = self.value(x).dims2()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[1] != c_in {
            return Err(Error::Dimension(format!(
                "conv1d: weight shape {ws:?} does not match input channels {c_in}"
            )));
        }
        let (c_out, k) = (ws[0], ws[2]);
        if self.value(b).shape() != [c_out] {
            return Err(Error::Dimension(format!(
                "conv1d: bias shape {:?} vs out channels {c_out}",
                self.value(b).shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv1d: stride must be >= 1".into()));
        }
        if t_in + 2 * pad < k {
            return Err(Error::Dimension(format!(
                "conv1d: input length {t_in} + 2*{pad} shorter than kernel {k}"
            )));
        }
        let t_out = (t_in + 2 * pad - k) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut data = vec![0.0; t_out * c_out];
        for to in 0..t_out {
            for co in 0..c_out {
                let mut acc = bd[co];
                for ci in 0..c_in {
                    for j in 0..k {
                        let ti = (to * stride + j) as isize - pad as isize;
                        if ti >= 0 && (ti as usize) < t_in {
                            acc += wd[(co * c_in + ci) * k + j] * xd[ti as usize * c_in + ci];
                        }
                    }
                }
                data[to * c_out + co] = acc;
            }
        }
        let t = Tensor::new(vec![t_out, c_out], data)?;
        self.push(t, Op::Conv1d { x, w, b, stride, pad }, "conv1d")
    }

    /// Select rows of `x` by index (duplicates allowed). Used for duration
    /// expansion of unit embeddings.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if idx.is_empty() {
            return Err(Error::EmptyInput("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("gather_rows: index {bad} >= rows {n}")));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(&xd[i * m..(i + 1) * m]);
        }
        let t = Tensor::new(vec![idx.len(), m], data)?;
        self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, "gather_rows")
    }

    /// Repeat a vector as identical rows: `[c] -> [rows, c]`.
    pub fn broadcast_row(&mut self, v: Var, rows: usize) -> Result<Var> {
        let c = self.value(v).len();
        if self.value(v).shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "broadcast_row expects a vector, got {:?}",
                self.value(v).shape()
            )));
        }
        let vd = self.value(v).data();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(vd);
        }
        let t = Tensor::new(vec![rows, c], data)?;
        self.push(t, Op::BroadcastRow { v, rows }, "broadcast_row")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.value(a).dims2()?;
        let (n2, cb) = self.value(b).dims2()?;
        if n != n2 {
            return Err(Error::Dimension(format!("concat_cols: {n} rows vs {n2} rows")));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let t = Tensor::new(vec![n, ca + cb], data)?;
        self.push(t, Op::ConcatCols(a, b), "concat_cols")
    }

    /// View a flat signal as rows of `width` samples, zero-padding the tail:
    /// `[L] -> [ceil(L/width), width]`.
    pub fn frame(&mut self, x: Var, width: usize) -> Result<Var> {
        if width == 0 {
            return Err(Error::Contract("frame width must be >= 1".into()));
        }
        let l = self.value(x).len();
        if l == 0 {
            return Err(Error::EmptyInput("frame of empty signal".into()));
        }
        let rows = l.div_ceil(width);
        let mut data = vec![0.0; rows * width];
        data[..l].copy_from_slice(self.value(x).data());
        let t = Tensor::new(vec![rows, width], data)?;
        self.push(t, Op::Frame { x, width }, "frame")
    }

    /// Average adjacent sample pairs of a flat signal: `[L] -> [floor(L/2)]`.
    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let l = self.value(x).len();
        if l < 2 {
            return Err(Error::Dimension("downsample2 needs at least 2 samples".into()));
        }
        let xd = self.value(x).data();
        let data: Vec<f64> = (0..l / 2).map(|i| 0.5 * (xd[2 * i] + xd[2 * i + 1])).collect();
        let t = Tensor::vector(data);
        self.push(t, Op::Downsample2(x), "downsample2")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.value(x).shape(),
                shape
            )));
        }
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::EmptyInput("mean of empty tensor".into()));
        }
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::Mean(x), "mean")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate for every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.accumulate(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let add_to = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| {
            match &mut grads[v.0] {
                Some(g) => {
                    for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                        *gi += di;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, dy.clone());
                add_to(grads, *b, dy.clone());
            }
            Op::AddBias(x, b) => {
                let (n, m) = self.value(*x).dims2()?;
                add_to(grads, *x, dy.clone());
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        db[j] += dy.data()[i * m + j];
                    }
                }
                add_to(grads, *b, Tensor::vector(db));
            }
            Op::Mul(a, b) => {
                let da = Tensor::new(
                    dy.shape().to_vec(),
                    dy.data().iter().zip(self.value(*b).data()).map(|(d, v)| d * v).collect(),
                )?;
                let db = Tensor::new(
                    dy.shape().to_vec(),
                    dy.data().iter().zip(self.value(*a).data()).map(|(d, v)| d * v).collect(),
                )?;
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Affine { x, mul, .. } => {
                add_to(grads, *x, dy.map(|d| mul * d));
            }
            Op::Matmul(a, b) => {
                let (n, k) = self.value(*a).dims2()?;
                let (_, m) = self.value(*b).dims2()?;
                // dA = dY . B^T
                let bd = self.value(*b).data();
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for kk in 0..k {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += dy.data()[i * m + j] * bd[kk * m + j];
                        }
                        da[i * k + kk] = acc;
                    }
                }
                // dB = A^T . dY
                let ad = self.value(*a).data();
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    for kk in 0..k {
                        let aik = ad[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            db[kk * m + j] += aik * dy.data()[i * m + j];
                        }
                    }
                }
                add_to(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), da)?);
                add_to(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
            }
            Op::Relu(x) => {
                let dx = Tensor::new(
                    dy.shape().to_vec(),
                    dy.data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                        .collect(),
                )?;
                add_to(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let dx = Tensor::new(
                    dy.shape().to_vec(),
                    dy.data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(d, v)| if *v > 0.0 { *d } else { slope * *d })
                        .collect(),
                )?;
                add_to(grads, *x, dx);
            }
            Op::Exp(x) => {
                let y = &self.nodes[i].value;
                let dx = Tensor::new(
                    dy.shape().to_vec(),
                    dy.data().iter().zip(y.data()).map(|(d, v)| d * v).collect(),
                )?;
                add_to(grads, *x, dx);
            }
            Op::Log(x) => {
                let dx = Tensor::new(
                    dy.shape().to_vec(),
                    dy.data().iter().zip(self.value(*x).data()).map(|(d, v)| d / v).collect(),
                )?;
                add_to(grads, *x, dx);
            }
            Op::Abs(x) => {
                let dx = Tensor::new(
                    dy.shape().to_vec(),
                    dy.data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(d, v)| d * if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 })
                        .collect(),
                )?;
                add_to(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let (n, m) = y.dims2()?;
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let yr = &y.data()[r * m..(r + 1) * m];
                    let dr = &dy.data()[r * m..(r + 1) * m];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dx[r * m + j] = yr[j] * (dr[j] - dot);
                    }
                }
                add_to(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (n, m) = self.value(*x).dims2()?;
                let xd = self.value(*x).data();
                let g = self.value(*gamma).data();
                let mut dx = vec![0.0; n * m];
                let mut dg = vec![0.0; m];
                let mut db = vec![0.0; m];
                for r in 0..n {
                    let row = &xd[r * m..(r + 1) * m];
                    let dr = &dy.data()[r * m..(r + 1) * m];
                    let mu = row.iter().sum::<f64>() / m as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                    let dxh: Vec<f64> = dr.iter().zip(g).map(|(d, gj)| d * gj).collect();
                    let mean_dxh = dxh.iter().sum::<f64>() / m as f64;
                    let mean_dxh_xhat =
                        dxh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for j in 0..m {
                        dx[r * m + j] = (dxh[j] - mean_dxh - xhat[j] * mean_dxh_xhat) * inv;
                        dg[j] += dr[j] * xhat[j];
                        db[j] += dr[j];
                    }
                }
                add_to(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                add_to(grads, *gamma, Tensor::vector(dg));
                add_to(grads, *beta, Tensor::vector(db));
            }
            Op::Embedding { table, ids } => {
                let (v, e) = self.value(*table).dims2()?;
                let mut dt = vec![0.0; v * e];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        dt[id * e + j] += dy.data()[row * e + j];
                    }
                }
                add_to(grads, *table, Tensor::new(vec![v, e], dt)?);
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (t_in, c_in) = self.value(*x).dims2()?;
                let ws = self.value(*w).shape();
                let (c_out, k) = (ws[0], ws[2]);
                let t_out = (t_in + 2 * pad - k) / stride + 1;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut dx = vec![0.0; t_in * c_in];
                let mut dw = vec![0.0; c_out * c_in * k];
                let mut db = vec![0.0; c_out];
                for to in 0..t_out {
                    for co in 0..c_out {
                        let d = dy.data()[to * c_out + co];
                        if d == 0.0 {
                            continue;
                        }
                        db[co] += d;
                        for ci in 0..c_in {
                            for j in 0..k {
                                let ti = (to * stride + j) as isize - *pad as isize;
                                if ti >= 0 && (ti as usize) < t_in {
                                    let ti = ti as usize;
                                    dw[(co * c_in + ci) * k + j] += d * xd[ti * c_in + ci];
                                    dx[ti * c_in + ci] += d * wd[(co * c_in + ci) * k + j];
                                }
                            }
                        }
                    }
                }
                add_to(grads, *x, Tensor::new(vec![t_in, c_in], dx)?);
                add_to(grads, *w, Tensor::new(ws.to_vec(), dw)?);
                add_to(grads, *b, Tensor::vector(db));
            }
            Op::GatherRows { x, idx } => {
                let (n, m) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; n * m];
                for (row, &src) in idx.iter().enumerate() {
                    for j in 0..m {
                        dx[src * m + j] += dy.data()[row * m + j];
                    }
                }
                add_to(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
            }
            Op::BroadcastRow { v, rows } => {
                let c = self.value(*v).len();
                let mut dv = vec![0.0; c];
                for r in 0..*rows {
                    for j in 0..c {
                        dv[j] += dy.data()[r * c + j];
                    }
                }
                add_to(grads, *v, Tensor::vector(dv));
            }
            Op::ConcatCols(a, b) => {
                let (n, ca) = self.value(*a).dims2()?;
                let (_, cb) = self.value(*b).dims2()?;
                let mut da = vec![0.0; n * ca];
                let mut db = vec![0.0; n * cb];
                for r in 0..n {
                    let row = &dy.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                    da[r * ca..(r + 1) * ca].copy_from_slice(&row[..ca]);
                    db[r * cb..(r + 1) * cb].copy_from_slice(&row[ca..]);
                }
                add_to(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), da)?);
                add_to(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
            }
            Op::Frame { x, .. } => {
                let l = self.value(*x).len();
                let dx = dy.data()[..l].to_vec();
                add_to(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
            }
            Op::Downsample2(x) => {
                let l = self.value(*x).len();
                let mut dx = vec![0.0; l];
                for (i, d) in dy.data().iter().enumerate() {
                    dx[2 * i] += 0.5 * d;
                    dx[2 * i + 1] += 0.5 * d;
                }
                add_to(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
            }
            Op::Reshape(x) => {
                let dx = Tensor::new(self.value(*x).shape().to_vec(), dy.data().to_vec())?;
                add_to(grads, *x, dx);
            }
            Op::Sum(x) => {
                let d = dy.item()?;
                add_to(grads, *x, self.value(*x).map(|_| d));
            }
            Op::Mean(x) => {
                let d = dy.item()? / self.value(*x).len() as f64;
                add_to(grads, *x, self.value(*x).map(|_| d));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn softmax_symmetry_and_normalization() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1, 2], vec![0.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x2 = tape.leaf(t(vec![2, 3], vec![0.3, -1.0, 2.5, 10.0, 10.0, 10.0])).unwrap();
        let y2 = tape.softmax(x2).unwrap();
        for row in tape.value(y2).data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tape.leaf(t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = sum(w . w), w = [1, 2] -> grad = [2, 4]
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = tape.square(w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_constant_is_zero_everywhere() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let c = tape.scalar(5.0).unwrap();
        let grads = tape.backward(c).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(c).unwrap().data(), &[1.0]);
        let _ = w;
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_output_is_a_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0])).unwrap();
        assert!(matches!(tape.log(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 3], vec![0.0; 6])).unwrap();
        let b = tape.leaf(t(vec![3, 3], vec![0.0; 9])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
        assert!(matches!(tape.matmul(a, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv1d_length_arithmetic() {
        let mut tape = Tape::new();
        // kernel 5, stride 2, pad 2 halves the length, rounding up
        for t_in in [1usize, 2, 5, 50, 51] {
            let x = tape.leaf(Tensor::new(vec![t_in, 1], vec![1.0; t_in]).unwrap()).unwrap();
            let w = tape.leaf(Tensor::new(vec![1, 1, 5], vec![0.1; 5]).unwrap()).unwrap();
            let b = tape.leaf(Tensor::vector(vec![0.0])).unwrap();
            let y = tape.conv1d(x, w, b, 2, 2).unwrap();
            assert_eq!(tape.value(y).shape()[0], t_in.div_ceil(2));
        }
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut tape = Tape::new();
        let table = tape.leaf(t(vec![3, 2], vec![0.0; 6])).unwrap();
        assert!(matches!(tape.embedding(table, &[0, 3]), Err(Error::Contract(_))));
    }
}
