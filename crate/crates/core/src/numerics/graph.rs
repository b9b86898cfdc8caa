//! Recorded-tape reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and the inputs it was
//! computed from. [`Graph::backward`] walks the tape from the loss back to
//! the first node, so gradients are accumulated in a fixed order and are
//! bit-reproducible.

use std::sync::Arc;

use super::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row admissibility for [`Graph::masked_softmax`].
///
/// `allow` is row-major `rows x cols`. A row whose `active` flag is false
/// produces an all-zero output row instead of an error when it has no
/// admissible entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
    pub active: Vec<bool>,
}

impl RowMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        RowMask {
            rows,
            cols,
            allow: vec![true; rows * cols],
            active: vec![true; rows],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    RoutedMatMul {
        x: Var,
        ws: Vec<Var>,
        routes: Arc<[usize]>,
    },
    RoutedBias {
        x: Var,
        bs: Vec<Var>,
        routes: Arc<[usize]>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gains: Vec<Var>,
        biases: Vec<Var>,
        routes: Arc<[usize]>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var, Arc<RowMask>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
        head_dim: usize,
        pairs: usize,
    },
    Embed {
        tables: Vec<Var>,
        lookup: Vec<(usize, usize)>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// A tape of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let th = inner.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dinner = C * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner;
    (y, dy)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn accumulate_with(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let acc = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(acc.data_mut());
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// Graph that rejects any non-finite value produced by an operation.
    pub fn checked() -> Self {
        Graph {
            nodes: Vec::new(),
            checked: true,
        }
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NumericsError> {
        if self.checked && !value.all_finite() {
            return Err(NumericsError::NonFinite(name));
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn check(&self, v: Var) -> Result<(), NumericsError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NumericsError::UnknownVar(v.0))
        }
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.leaf_shared(Arc::new(t))
    }

    /// Leaf sharing storage with a parameter.
    pub fn leaf_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: vec![n, k],
                right: vec![k2, m],
            });
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::raw(n, m, out), Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                left: vec![n, k],
                right: vec![m, k2],
            });
        }
        let out = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::raw(n, m, out), Op::MatMulNT(a, b), "matmul_nt")
    }

    /// Row `r` of the result is `x[r] * ws[routes[r]]`.
    pub fn routed_matmul(
        &mut self,
        x: Var,
        ws: &[Var],
        routes: Arc<[usize]>,
    ) -> Result<Var, NumericsError> {
        self.check(x)?;
        let (n, k) = self.dims(x);
        if routes.len() != n || ws.is_empty() {
            return Err(NumericsError::RouteCount {
                rows: n,
                routes: routes.len(),
            });
        }
        let m = self.dims(ws[0]).1;
        for &w in ws {
            self.check(w)?;
            if self.dims(w) != (k, m) {
                return Err(NumericsError::ShapeMismatch {
                    op: "routed_matmul",
                    left: vec![n, k],
                    right: self.value(w).shape().to_vec(),
                });
            }
        }
        if let Some(&r) = routes.iter().find(|&&r| r >= ws.len()) {
            return Err(NumericsError::BadRoute(r));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for (i, &r) in routes.iter().enumerate() {
            let w = self.value(ws[r]).data();
            let prod = matmul_kernel(&xv[i * k..(i + 1) * k], w, 1, k, m);
            out[i * m..(i + 1) * m].copy_from_slice(&prod);
        }
        self.push(
            Tensor::raw(n, m, out),
            Op::RoutedMatMul {
                x,
                ws: ws.to_vec(),
                routes,
            },
            "routed_matmul",
        )
    }

    /// Adds the bias vector `bs[routes[r]]` to row `r`.
    pub fn routed_bias(
        &mut self,
        x: Var,
        bs: &[Var],
        routes: Arc<[usize]>,
    ) -> Result<Var, NumericsError> {
        self.check(x)?;
        let (n, m) = self.dims(x);
        if routes.len() != n || bs.is_empty() {
            return Err(NumericsError::RouteCount {
                rows: n,
                routes: routes.len(),
            });
        }
        for &b in bs {
            self.check(b)?;
            if self.value(b).len() != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "routed_bias",
                    left: vec![n, m],
                    right: self.value(b).shape().to_vec(),
                });
            }
        }
        if let Some(&r) = routes.iter().find(|&&r| r >= bs.len()) {
            return Err(NumericsError::BadRoute(r));
        }
        let mut out = self.value(x).data().to_vec();
        for (i, &r) in routes.iter().enumerate() {
            let b = self.value(bs[r]).data();
            for (o, bv) in out[i * m..(i + 1) * m].iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(
            Tensor::raw(n, m, out),
            Op::RoutedBias {
                x,
                bs: bs.to_vec(),
                routes,
            },
            "routed_bias",
        )
    }

    /// Adds a single bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let n = self.dims(x).0;
        self.routed_bias(x, &[b], vec![0; n].into())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || self.dims(a) != self.dims(b) {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Add(a, b), "add")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        self.check(x)?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Scale(x, c), "scale")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v).0).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Gelu(x), "gelu")
    }

    /// Row-wise normalization with population variance; row `r` uses the
    /// gain and bias indexed by `routes[r]`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gains: &[Var],
        biases: &[Var],
        routes: Arc<[usize]>,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        self.check(x)?;
        let (n, d) = self.dims(x);
        if routes.len() != n || gains.len() != biases.len() || gains.is_empty() {
            return Err(NumericsError::RouteCount {
                rows: n,
                routes: routes.len(),
            });
        }
        for &p in gains.iter().chain(biases) {
            self.check(p)?;
            if self.value(p).len() != d {
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    left: vec![n, d],
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        if let Some(&r) = routes.iter().find(|&&r| r >= gains.len()) {
            return Err(NumericsError::BadRoute(r));
        }
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            let g = self.value(gains[routes[i]]).data();
            let b = self.value(biases[routes[i]]).data();
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::raw(n, d, out),
            Op::LayerNorm {
                x,
                gains: gains.to_vec(),
                biases: biases.to_vec(),
                routes,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Row softmax over admissible entries, computed with max subtraction.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<RowMask>) -> Result<Var, NumericsError> {
        self.check(x)?;
        let (n, m) = self.dims(x);
        if mask.rows != n || mask.cols != m {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_softmax",
                left: vec![n, m],
                right: vec![mask.rows, mask.cols],
            });
        }
        let out = softmax_rows(self.value(x).data(), &mask)?;
        self.push(Tensor::raw(n, m, out), Op::MaskedSoftmax(x, mask), "masked_softmax")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        self.check(x)?;
        let (n, m) = self.dims(x);
        if len == 0 || start + len > m {
            return Err(NumericsError::BadSlice { start, len, cols: m });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xv[i * m + start..i * m + start + len]);
        }
        self.push(Tensor::raw(n, len, out), Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Ragged);
        }
        for &p in parts {
            self.check(p)?;
        }
        let n = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != n) {
            return Err(NumericsError::Ragged);
        }
        let m: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            Tensor::raw(n, m, out),
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        self.check(x)?;
        let (n, m) = self.dims(x);
        if idx.is_empty() {
            return Err(NumericsError::Ragged);
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: n });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        self.push(
            Tensor::raw(idx.len(), m, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Rotary encoding of each `head_dim`-wide block of every row.
    ///
    /// Row `t` is rotated by angles `s_hat[t] * omegas[j]` on coordinate
    /// pairs `(2j, 2j+1)` of each head block; the rest of the block passes
    /// through.
    pub fn rope(
        &mut self,
        x: Var,
        s_hat: &[f64],
        omegas: &[f64],
        head_dim: usize,
    ) -> Result<Var, NumericsError> {
        self.check(x)?;
        let (n, m) = self.dims(x);
        let pairs = omegas.len();
        if s_hat.len() != n || head_dim == 0 || m % head_dim != 0 || 2 * pairs > head_dim {
            return Err(NumericsError::ShapeMismatch {
                op: "rope",
                left: vec![n, m],
                right: vec![s_hat.len(), head_dim, 2 * pairs],
            });
        }
        let mut cos = Vec::with_capacity(n * pairs);
        let mut sin = Vec::with_capacity(n * pairs);
        for &s in s_hat {
            for &w in omegas {
                let (sv, cv) = (s * w).sin_cos();
                sin.push(sv);
                cos.push(cv);
            }
        }
        let mut out = self.value(x).data().to_vec();
        rotate_blocks(&mut out, n, m, head_dim, pairs, &cos, &sin, 1.0);
        self.push(
            Tensor::raw(n, m, out),
            Op::Rope {
                x,
                cos,
                sin,
                head_dim,
                pairs,
            },
            "rope",
        )
    }

    /// Row `r` is row `lookup[r].1` of table `tables[lookup[r].0]`.
    pub fn embed(
        &mut self,
        tables: &[Var],
        lookup: &[(usize, usize)],
    ) -> Result<Var, NumericsError> {
        if tables.is_empty() || lookup.is_empty() {
            return Err(NumericsError::Ragged);
        }
        for &t in tables {
            self.check(t)?;
        }
        let d = self.dims(tables[0]).1;
        if tables.iter().any(|&t| self.dims(t).1 != d) {
            return Err(NumericsError::Ragged);
        }
        let mut out = Vec::with_capacity(lookup.len() * d);
        for &(tab, id) in lookup {
            let t = tables.get(tab).ok_or(NumericsError::BadRoute(tab))?;
            let tv = self.value(*t);
            if id >= tv.rows() {
                return Err(NumericsError::IndexOutOfRange {
                    index: id,
                    len: tv.rows(),
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        self.push(
            Tensor::raw(lookup.len(), d, out),
            Op::Embed {
                tables: tables.to_vec(),
                lookup: lookup.to_vec(),
            },
            "embed",
        )
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]` as a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, NumericsError> {
        self.check(logits)?;
        let (n, v) = self.dims(logits);
        if targets.len() != n || weights.len() != n {
            return Err(NumericsError::RouteCount {
                rows: n,
                routes: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: v });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for i in 0..n {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p /= z;
            }
            if weights[i] != 0.0 {
                total += weights[i] * (z.ln() + max - row[targets[i]]);
            }
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x), "sum_squares")
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if loss.0 >= self.nodes.len() {
            return Err(NumericsError::NotRecorded);
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::new(shape, vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let gd = gy.data();
            match &node.op {
                Op::Leaf => {
                    // leaf gradients are kept for the caller
                    grads[id] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.dims(*a);
                    let m = self.dims(*b).1;
                    let ga = matmul_nt_kernel(gd, self.value(*b).data(), n, m, k);
                    let gb = matmul_tn_kernel(self.value(*a).data(), gd, n, k, m);
                    accumulate(&mut grads[a.0], Tensor::raw(n, k, ga));
                    accumulate(&mut grads[b.0], Tensor::raw(k, m, gb));
                }
                Op::MatMulNT(a, b) => {
                    let (n, k) = self.dims(*a);
                    let m = self.dims(*b).0;
                    let ga = matmul_kernel(gd, self.value(*b).data(), n, m, k);
                    let gb = matmul_tn_kernel(gd, self.value(*a).data(), n, m, k);
                    accumulate(&mut grads[a.0], Tensor::raw(n, k, ga));
                    accumulate(&mut grads[b.0], Tensor::raw(m, k, gb));
                }
                Op::RoutedMatMul { x, ws, routes } => {
                    let (n, k) = self.dims(*x);
                    let m = self.dims(ws[0]).1;
                    let xv = self.value(*x).data();
                    let mut gx = vec![0.0; n * k];
                    let mut gws: Vec<Option<Vec<f64>>> = vec![None; ws.len()];
                    for (i, &r) in routes.iter().enumerate() {
                        let g_row = &gd[i * m..(i + 1) * m];
                        let w = self.value(ws[r]).data();
                        let gxr = matmul_nt_kernel(g_row, w, 1, m, k);
                        gx[i * k..(i + 1) * k].copy_from_slice(&gxr);
                        let gw = gws[r].get_or_insert_with(|| vec![0.0; k * m]);
                        let x_row = &xv[i * k..(i + 1) * k];
                        for (p, &xp) in x_row.iter().enumerate() {
                            if xp == 0.0 {
                                continue;
                            }
                            for (o, &g) in gw[p * m..(p + 1) * m].iter_mut().zip(g_row) {
                                *o += xp * g;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::raw(n, k, gx));
                    for (w, gw) in ws.iter().zip(gws) {
                        if let Some(gw) = gw {
                            let shape = self.value(*w).shape().to_vec();
                            accumulate(&mut grads[w.0], Tensor::new(shape, gw)?);
                        }
                    }
                }
                Op::RoutedBias { x, bs, routes } => {
                    let m = self.dims(*x).1;
                    for (i, &r) in routes.iter().enumerate() {
                        let shape = self.value(bs[r]).shape().to_vec();
                        accumulate_with(&mut grads[bs[r].0], &shape, |acc| {
                            for (a, g) in acc.iter_mut().zip(&gd[i * m..(i + 1) * m]) {
                                *a += g;
                            }
                        });
                    }
                    accumulate(&mut grads[x.0], gy);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], gy.clone());
                    accumulate(&mut grads[a.0], gy);
                }
                Op::Scale(x, c) => {
                    let data = gd.iter().map(|g| g * c).collect();
                    let shape = gy.shape().to_vec();
                    accumulate(&mut grads[x.0], Tensor::new(shape, data)?);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let data = xv.iter().zip(gd).map(|(&v, g)| g * gelu(v).1).collect();
                    let shape = gy.shape().to_vec();
                    accumulate(&mut grads[x.0], Tensor::new(shape, data)?);
                }
                Op::LayerNorm {
                    x,
                    gains,
                    biases,
                    routes,
                    xhat,
                    inv_std,
                } => {
                    let (n, d) = self.dims(*x);
                    let mut gx = vec![0.0; n * d];
                    let mut dxhat = vec![0.0; d];
                    for (i, &r) in routes.iter().enumerate() {
                        let g = self.value(gains[r]).data();
                        let gy_row = &gd[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gy_row[j] * g[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[i * d + j] = inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                        let gshape = self.value(gains[r]).shape().to_vec();
                        accumulate_with(&mut grads[gains[r].0], &gshape, |acc| {
                            for j in 0..d {
                                acc[j] += gy_row[j] * xh[j];
                            }
                        });
                        let bshape = self.value(biases[r]).shape().to_vec();
                        accumulate_with(&mut grads[biases[r].0], &bshape, |acc| {
                            for j in 0..d {
                                acc[j] += gy_row[j];
                            }
                        });
                    }
                    accumulate(&mut grads[x.0], Tensor::raw(n, d, gx));
                }
                Op::MaskedSoftmax(x, mask) => {
                    let (n, m) = self.dims(*x);
                    let y = node.value.data();
                    let mut gx = vec![0.0; n * m];
                    for i in 0..n {
                        let yr = &y[i * m..(i + 1) * m];
                        let gr = &gd[i * m..(i + 1) * m];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            if mask.allow[i * m + j] {
                                gx[i * m + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::raw(n, m, gx));
                }
                Op::SliceCols { x, start } => {
                    let (n, m) = self.dims(*x);
                    let len = gy.cols();
                    let shape = self.value(*x).shape().to_vec();
                    accumulate_with(&mut grads[x.0], &shape, |acc| {
                        for i in 0..n {
                            for j in 0..len {
                                acc[i * m + start + j] += gd[i * len + j];
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let n = gy.rows();
                    let m = gy.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.dims(p).1;
                        let mut gp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            gp.extend_from_slice(&gd[i * m + off..i * m + off + w]);
                        }
                        off += w;
                        let shape = self.value(p).shape().to_vec();
                        accumulate(&mut grads[p.0], Tensor::new(shape, gp)?);
                    }
                }
                Op::GatherRows { x, idx } => {
                    let m = self.dims(*x).1;
                    let shape = self.value(*x).shape().to_vec();
                    accumulate_with(&mut grads[x.0], &shape, |acc| {
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..m {
                                acc[i * m + j] += gd[r * m + j];
                            }
                        }
                    });
                }
                Op::Rope {
                    x,
                    cos,
                    sin,
                    head_dim,
                    pairs,
                } => {
                    let (n, m) = self.dims(*x);
                    let mut gx = gd.to_vec();
                    rotate_blocks(&mut gx, n, m, *head_dim, *pairs, cos, sin, -1.0);
                    accumulate(&mut grads[x.0], Tensor::raw(n, m, gx));
                }
                Op::Embed { tables, lookup } => {
                    let d = gy.cols();
                    for (r, &(tab, id)) in lookup.iter().enumerate() {
                        let shape = self.value(tables[tab]).shape().to_vec();
                        accumulate_with(&mut grads[tables[tab].0], &shape, |acc| {
                            for j in 0..d {
                                acc[id * d + j] += gd[r * d + j];
                            }
                        });
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let (n, v) = self.dims(*logits);
                    let up = gd[0];
                    let mut gl = vec![0.0; n * v];
                    for i in 0..n {
                        let w = weights[i] * up;
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..v {
                            gl[i * v + j] = w * probs[i * v + j];
                        }
                        gl[i * v + targets[i]] -= w;
                    }
                    accumulate(&mut grads[logits.0], Tensor::raw(n, v, gl));
                }
                Op::Sum(x) => {
                    let up = gd[0];
                    let xv = self.value(*x);
                    let shape = xv.shape().to_vec();
                    accumulate(&mut grads[x.0], Tensor::new(shape, vec![up; xv.len()])?);
                }
                Op::SumSquares(x) => {
                    let up = gd[0];
                    let xv = self.value(*x);
                    let data = xv.data().iter().map(|v| 2.0 * v * up).collect();
                    let shape = xv.shape().to_vec();
                    accumulate(&mut grads[x.0], Tensor::new(shape, data)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[allow(clippy::too_many_arguments)]
fn rotate_blocks(
    data: &mut [f64],
    n: usize,
    m: usize,
    head_dim: usize,
    pairs: usize,
    cos: &[f64],
    sin: &[f64],
    sign: f64,
) {
    for i in 0..n {
        for h in 0..m / head_dim {
            let base = i * m + h * head_dim;
            for j in 0..pairs {
                let c = cos[i * pairs + j];
                let s = sign * sin[i * pairs + j];
                let x = data[base + 2 * j];
                let y = data[base + 2 * j + 1];
                data[base + 2 * j] = x * c - y * s;
                data[base + 2 * j + 1] = x * s + y * c;
            }
        }
    }
}

/// Masked row softmax on raw data; shared by the graph op and callers that
/// need probabilities without recording.
pub fn softmax_rows(x: &[f64], mask: &RowMask) -> Result<Vec<f64>, NumericsError> {
    let (n, m) = (mask.rows, mask.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let allow = &mask.allow[i * m..(i + 1) * m];
        let row = &x[i * m..(i + 1) * m];
        let max = row
            .iter()
            .zip(allow)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            if mask.active[i] {
                return Err(NumericsError::EmptyAttentionRow(i));
            }
            continue;
        }
        let orow = &mut out[i * m..(i + 1) * m];
        let mut z = 0.0;
        for j in 0..m {
            if allow[j] {
                orow[j] = (row[j] - max).exp();
                z += orow[j];
            }
        }
        for j in 0..m {
            if allow[j] {
                orow[j] /= z;
            }
        }
    }
    Ok(out)
}
