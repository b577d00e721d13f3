//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Forward ops append nodes to the tape and capture whatever values their
//! backward pass needs. Node ids grow monotonically, so parents always
//! precede children and a reverse id sweep is a valid reverse topological
//! order. Gradients accumulate into persistent per-node buffers: running
//! `backward` twice on the same loss doubles every gradient exactly.
//!
//! Recording is skipped for any node none of whose ancestors is a trainable
//! leaf, so frozen submodels cost no tape memory.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::param::ParamStore;
use super::scalar::{s, Scalar};
use super::tensor::{self, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<S> = Box<dyn Fn(&Tensor<S>) -> Vec<Tensor<S>>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    requires: bool,
    parents: Vec<usize>,
    /// Maps the upstream gradient to one gradient per parent, in order.
    back: Option<BackFn<S>>,
}

pub struct Graph<S: Scalar = f64> {
    nodes: RefCell<Vec<Node<S>>>,
    grads: RefCell<Vec<Option<Tensor<S>>>>,
    param_ids: RefCell<BTreeMap<String, usize>>,
    recording: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            param_ids: RefCell::new(BTreeMap::new()),
            recording: true,
        }
    }

    /// Graph that never records gradients, for decode and evaluation loops.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    fn push(&self, value: Tensor<S>, requires: bool, parents: Vec<usize>, back: Option<BackFn<S>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires,
            parents,
            back,
        });
        Var(nodes.len() - 1)
    }

    /// Untracked value; gradients never flow into a constant.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.push(value, false, Vec::new(), None)
    }

    /// Named leaf. Repeated insertion under one name returns the original
    /// node so shared parameters accumulate gradients in one place.
    pub fn leaf(&self, name: &str, value: Tensor<S>, trainable: bool) -> Var {
        if let Some(&id) = self.param_ids.borrow().get(name) {
            return Var(id);
        }
        let v = self.push(value, trainable && self.recording, Vec::new(), None);
        self.param_ids.borrow_mut().insert(name.to_string(), v.0);
        v
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires
    }

    /// Persistent accumulated gradient of a node, if any backward pass
    /// reached it.
    pub fn grad_of(&self, v: Var) -> Option<Tensor<S>> {
        self.grads.borrow().get(v.0).cloned().flatten()
    }

    fn record(
        &self,
        value: Tensor<S>,
        parents: &[Var],
        back: impl Fn(&Tensor<S>) -> Vec<Tensor<S>> + 'static,
    ) -> Var {
        let requires = parents.iter().any(|&p| self.requires(p));
        let ids = parents.iter().map(|p| p.0).collect();
        let back: Option<BackFn<S>> = if requires { Some(Box::new(back)) } else { None };
        self.push(value, requires, ids, back)
    }

    /// User-defined op: a precomputed forward value plus a closure producing
    /// one gradient per parent. Used by losses whose gradient is cheaper to
    /// derive analytically than to compose from primitives.
    pub fn custom(
        &self,
        parents: &[Var],
        value: Tensor<S>,
        back: impl Fn(&Tensor<S>) -> Vec<Tensor<S>> + 'static,
    ) -> Var {
        self.record(value, parents, back)
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        Ok(self.record(out, &[a, b], |g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y)?;
        Ok(self.record(out, &[a, b], |g| vec![g.clone(), g.map(|x| -x)]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.zip_map(&bv, |x, y| x * y)?;
        Ok(self.record(out, &[a, b], move |g| {
            vec![
                g.zip_map(&bv, |x, y| x * y).expect("recorded shapes"),
                g.zip_map(&av, |x, y| x * y).expect("recorded shapes"),
            ]
        }))
    }

    pub fn scale(&self, a: Var, factor: S) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.record(out, &[a], move |g| vec![g.map(|x| x * factor)])
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|x| if x > S::zero() { x } else { S::zero() });
        self.record(out, &[a], move |g| {
            vec![g
                .zip_map(&av, |gx, x| if x > S::zero() { gx } else { S::zero() })
                .expect("recorded shapes")]
        })
    }

    /// `a[m×n] + bias[n]`, broadcast over rows.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(bias);
        if av.rank() != 2 || bv.rank() != 1 || av.cols() != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = av.clone();
        for i in 0..m {
            for (o, &b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.record(out, &[a, bias], move |g| {
            let mut db = vec![S::zero(); n];
            for i in 0..m {
                for (d, &gx) in db.iter_mut().zip(g.row(i)) {
                    *d += gx;
                }
            }
            vec![
                g.clone(),
                Tensor::new(vec![n], db).expect("recorded shapes"),
            ]
        }))
    }

    // ---- matrix products ----

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let out = tensor::matmul(&av, &bv)?;
        Ok(self.record(out, &[a, b], move |g| {
            vec![
                tensor::matmul_nt(g, &bv).expect("recorded shapes"),
                tensor::matmul_tn(&av, g).expect("recorded shapes"),
            ]
        }))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the attention-score form.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let out = tensor::matmul_nt(&av, &bv)?;
        Ok(self.record(out, &[a, b], move |g| {
            vec![
                tensor::matmul(g, &bv).expect("recorded shapes"),
                tensor::matmul_tn(g, &av).expect("recorded shapes"),
            ]
        }))
    }

    // ---- row-wise nonlinearities ----

    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        debug_assert_eq!(av.rank(), 2);
        let (m, n) = (av.rows(), av.cols());
        let mut out = av.clone();
        for i in 0..m {
            softmax_in_place(out.row_mut(i));
        }
        let y = out.clone();
        self.record(out, &[a], move |g| {
            let mut dx = y.clone();
            for i in 0..m {
                let yr = y.row(i);
                let gr = g.row(i);
                let dot: S = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                for j in 0..n {
                    dx.row_mut(i)[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![dx]
        })
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        debug_assert_eq!(av.rank(), 2);
        let (m, n) = (av.rows(), av.cols());
        let mut out = av.clone();
        for i in 0..m {
            log_softmax_in_place(out.row_mut(i));
        }
        let y = out.clone();
        self.record(out, &[a], move |g| {
            let mut dx = y.clone();
            for i in 0..m {
                let yr = y.row(i);
                let gr = g.row(i);
                let gsum: S = gr.iter().copied().sum();
                for j in 0..n {
                    dx.row_mut(i)[j] = gr[j] - yr[j].exp() * gsum;
                }
            }
            vec![dx]
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let total: S = av.data().iter().copied().sum();
        self.record(Tensor::scalar(total), &[a], move |g| {
            vec![Tensor::full(&shape, g.item())]
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let n = s::<S>(av.numel() as f64);
        let total: S = av.data().iter().copied().sum();
        self.record(Tensor::scalar(total / n), &[a], move |g| {
            vec![Tensor::full(&shape, g.item() / n)]
        })
    }

    // ---- slicing and concatenation (2-D) ----

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || start + len > av.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let cols = av.cols();
        let data = av.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(vec![len, cols], data)?;
        let full = av.shape().to_vec();
        Ok(self.record(out, &[a], move |g| {
            let mut dx = Tensor::zeros(&full);
            dx.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
            vec![dx]
        }))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || start + len > av.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let (m, n) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.record(out, &[a], move |g| {
            let mut dx = Tensor::zeros(&[m, n]);
            for i in 0..m {
                dx.row_mut(i)[start..start + len].copy_from_slice(g.row(i));
            }
            vec![dx]
        }))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptySequence { op: "concat_rows" });
        }
        let values: Vec<Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = values[0].cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(values.len());
        for v in &values {
            if v.rank() != 2 || v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            row_counts.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let total: usize = row_counts.iter().sum();
        let out = Tensor::new(vec![total, cols], data)?;
        Ok(self.record(out, parts, move |g| {
            let mut grads = Vec::with_capacity(row_counts.len());
            let mut at = 0;
            for &r in &row_counts {
                let data = g.data()[at * cols..(at + r) * cols].to_vec();
                grads.push(Tensor::new(vec![r, cols], data).expect("recorded shapes"));
                at += r;
            }
            grads
        }))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptySequence { op: "concat_cols" });
        }
        let values: Vec<Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let m = values[0].rows();
        let mut col_counts = Vec::with_capacity(values.len());
        for v in &values {
            if v.rank() != 2 || v.rows() != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            col_counts.push(v.cols());
        }
        let total: usize = col_counts.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.record(out, parts, move |g| {
            let mut grads: Vec<Tensor<S>> = col_counts
                .iter()
                .map(|&c| Tensor::zeros(&[m, c]))
                .collect();
            for i in 0..m {
                let grow = g.row(i);
                let mut at = 0;
                for (part, &c) in grads.iter_mut().zip(&col_counts) {
                    part.row_mut(i).copy_from_slice(&grow[at..at + c]);
                    at += c;
                }
            }
            grads
        }))
    }

    // ---- lookups ----

    /// Row gather: `table[V×d]` indexed by `ids`, producing `[len(ids)×d]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: tv.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::VocabId { id, vocab_size: v });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ids = ids.to_vec();
        Ok(self.record(out, &[table], move |g| {
            let mut dt = Tensor::zeros(&[v, d]);
            for (i, &id) in ids.iter().enumerate() {
                for (slot, &gx) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                    *slot += gx;
                }
            }
            vec![dt]
        }))
    }

    // ---- normalization ----

    /// Per-row standardization with learned scale and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if xv.rank() != 2 || gv.shape() != [xv.cols()] || bv.shape() != [xv.cols()] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let (m, n) = (xv.rows(), xv.cols());
        let nf = s::<S>(n as f64);
        let mut out = Tensor::zeros(&[m, n]);
        let mut xhat = Tensor::zeros(&[m, n]);
        let mut inv_std = vec![S::zero(); m];
        for (i, istd_slot) in inv_std.iter_mut().enumerate() {
            let row = xv.row(i);
            let mean: S = row.iter().copied().sum::<S>() / nf;
            let var: S = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let istd = (var + eps).sqrt().recip();
            *istd_slot = istd;
            for (j, &xj) in row.iter().enumerate() {
                let xh = (xj - mean) * istd;
                xhat.row_mut(i)[j] = xh;
                out.row_mut(i)[j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        Ok(self.record(out, &[x, gamma, beta], move |g| {
            let mut dx = Tensor::zeros(&[m, n]);
            let mut dgamma = vec![S::zero(); n];
            let mut dbeta = vec![S::zero(); n];
            for (i, &istd) in inv_std.iter().enumerate() {
                let gr = g.row(i);
                let xh = xhat.row(i);
                // ghat = dL/dxhat; the two means fold in the mean and
                // variance paths.
                let ghat: Vec<S> = gr.iter().zip(gv.data()).map(|(&gx, &ga)| gx * ga).collect();
                let mean_g: S = ghat.iter().copied().sum::<S>() / nf;
                let mean_gx: S = ghat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>() / nf;
                for j in 0..n {
                    dx.row_mut(i)[j] = (ghat[j] - mean_g - xh[j] * mean_gx) * istd;
                    dgamma[j] += gr[j] * xh[j];
                    dbeta[j] += gr[j];
                }
            }
            vec![
                dx,
                Tensor::new(vec![n], dgamma).expect("recorded shapes"),
                Tensor::new(vec![n], dbeta).expect("recorded shapes"),
            ]
        }))
    }

    /// Per-feature standardization over the rows of `x[m×n]` using this
    /// batch's statistics. Also returns the batch mean and biased variance
    /// as plain tensors so callers can maintain running estimates.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    ) -> Result<(Var, Tensor<S>, Tensor<S>)> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if xv.rank() != 2 || gv.shape() != [xv.cols()] || bv.shape() != [xv.cols()] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let (m, n) = (xv.rows(), xv.cols());
        if m == 0 {
            return Err(Error::EmptySequence { op: "batch_norm" });
        }
        let mf = s::<S>(m as f64);
        let mut mean = vec![S::zero(); n];
        let mut var = vec![S::zero(); n];
        for i in 0..m {
            for (j, &v) in xv.row(i).iter().enumerate() {
                mean[j] += v;
            }
        }
        for mj in &mut mean {
            *mj /= mf;
        }
        for i in 0..m {
            for (j, &v) in xv.row(i).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        for vj in &mut var {
            *vj /= mf;
        }
        let inv_std: Vec<S> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut out = Tensor::zeros(&[m, n]);
        let mut xhat = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let xh = (xv.at2(i, j) - mean[j]) * inv_std[j];
                xhat.row_mut(i)[j] = xh;
                out.row_mut(i)[j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let mean_t = Tensor::new(vec![n], mean)?;
        let var_t = Tensor::new(vec![n], var)?;
        let var_out = self.record(out, &[x, gamma, beta], move |g| {
            let mut dx = Tensor::zeros(&[m, n]);
            let mut dgamma = vec![S::zero(); n];
            let mut dbeta = vec![S::zero(); n];
            // Column-wise means of ghat and ghat*xhat close over the batch
            // statistics' dependence on every row.
            let mut mean_g = vec![S::zero(); n];
            let mut mean_gx = vec![S::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    let gh = g.at2(i, j) * gv.data()[j];
                    mean_g[j] += gh;
                    mean_gx[j] += gh * xhat.at2(i, j);
                    dgamma[j] += g.at2(i, j) * xhat.at2(i, j);
                    dbeta[j] += g.at2(i, j);
                }
            }
            for j in 0..n {
                mean_g[j] /= mf;
                mean_gx[j] /= mf;
            }
            for i in 0..m {
                for j in 0..n {
                    let gh = g.at2(i, j) * gv.data()[j];
                    dx.row_mut(i)[j] = (gh - mean_g[j] - xhat.at2(i, j) * mean_gx[j]) * inv_std[j];
                }
            }
            vec![
                dx,
                Tensor::new(vec![n], dgamma).expect("recorded shapes"),
                Tensor::new(vec![n], dbeta).expect("recorded shapes"),
            ]
        });
        Ok((var_out, mean_t, var_t))
    }

    /// Batch normalization with fixed statistics; the affine transform is
    /// still differentiable.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<S>,
        var: &Tensor<S>,
        eps: S,
    ) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if xv.rank() != 2
            || gv.shape() != [xv.cols()]
            || bv.shape() != [xv.cols()]
            || mean.shape() != [xv.cols()]
            || var.shape() != [xv.cols()]
        {
            return Err(Error::ShapeMismatch {
                op: "batch_norm_eval",
                lhs: xv.shape().to_vec(),
                rhs: mean.shape().to_vec(),
            });
        }
        let (m, n) = (xv.rows(), xv.cols());
        let inv_std: Vec<S> = var.data().iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut out = Tensor::zeros(&[m, n]);
        let mut xhat = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for (j, &istd) in inv_std.iter().enumerate() {
                let xh = (xv.at2(i, j) - mean.data()[j]) * istd;
                xhat.row_mut(i)[j] = xh;
                out.row_mut(i)[j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        Ok(self.record(out, &[x, gamma, beta], move |g| {
            let mut dx = Tensor::zeros(&[m, n]);
            let mut dgamma = vec![S::zero(); n];
            let mut dbeta = vec![S::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    dx.row_mut(i)[j] = g.at2(i, j) * gv.data()[j] * inv_std[j];
                    dgamma[j] += g.at2(i, j) * xhat.at2(i, j);
                    dbeta[j] += g.at2(i, j);
                }
            }
            vec![
                dx,
                Tensor::new(vec![n], dgamma).expect("recorded shapes"),
                Tensor::new(vec![n], dbeta).expect("recorded shapes"),
            ]
        }))
    }

    // ---- temporal convolution ----

    /// 1-D convolution along rows of `x[T×d_in]` with kernel
    /// `w[k×d_in×d_out]`, zero padding and the given stride. Output length
    /// is `(T + 2·padding − k) / stride + 1`. Bias is applied separately
    /// via [`Graph::add_row`].
    pub fn conv1d(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() != 2 || wv.rank() != 3 || wv.shape()[1] != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let t = xv.rows();
        let (k, d_in, d_out) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if t + 2 * padding < k {
            return Err(Error::InvalidArgument(format!(
                "conv1d: {t} frames with padding {padding} cannot fit kernel {k}"
            )));
        }
        let out_t = (t + 2 * padding - k) / stride + 1;
        let mut out = Tensor::zeros(&[out_t, d_out]);
        for to in 0..out_t {
            let orow = out.row_mut(to);
            for dk in 0..k {
                let u = (to * stride + dk) as isize - padding as isize;
                if u < 0 || u as usize >= t {
                    continue;
                }
                let xrow = xv.row(u as usize);
                // w rows for tap dk occupy the flat range [dk·d_in, (dk+1)·d_in).
                for (c, &xc) in xrow.iter().enumerate() {
                    let wrow = &wv.data()[(dk * d_in + c) * d_out..(dk * d_in + c + 1) * d_out];
                    for (o, &wc) in orow.iter_mut().zip(wrow) {
                        *o += xc * wc;
                    }
                }
            }
        }
        Ok(self.record(out, &[x, w], move |g| {
            let mut dx = Tensor::zeros(&[t, d_in]);
            let mut dw = Tensor::zeros(&[k, d_in, d_out]);
            for to in 0..out_t {
                let grow = g.row(to);
                for dk in 0..k {
                    let u = (to * stride + dk) as isize - padding as isize;
                    if u < 0 || u as usize >= t {
                        continue;
                    }
                    let u = u as usize;
                    for c in 0..d_in {
                        let xc = xv.at2(u, c);
                        let base = (dk * d_in + c) * d_out;
                        let mut acc = S::zero();
                        for (o, &gx) in grow.iter().enumerate() {
                            dw.data_mut()[base + o] += xc * gx;
                            acc += wv.data()[base + o] * gx;
                        }
                        dx.row_mut(u)[c] += acc;
                    }
                }
            }
            vec![dx, dw]
        }))
    }

    // ---- losses ----

    /// Mean label-smoothed cross entropy over rows of `logits[m×V]`.
    /// The smoothed target distribution puts `1 − eps + eps/V` on the label
    /// and `eps/V` elsewhere.
    pub fn cross_entropy_label_smoothed(
        &self,
        logits: Var,
        targets: &[usize],
        eps: S,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if targets.is_empty() {
            return Err(Error::EmptySequence { op: "cross_entropy" });
        }
        let (m, v) = (lv.rows(), lv.cols());
        for &t in targets {
            if t >= v {
                return Err(Error::VocabId { id: t, vocab_size: v });
            }
        }
        let mf = s::<S>(m as f64);
        let vf = s::<S>(v as f64);
        let uniform = eps / vf;
        let on_label = S::one() - eps + uniform;
        let mut logp = lv.clone();
        for i in 0..m {
            log_softmax_in_place(logp.row_mut(i));
        }
        let mut total = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = logp.row(i);
            let mut row_loss = S::zero();
            for (j, &lp) in row.iter().enumerate() {
                let q = if j == t { on_label } else { uniform };
                row_loss -= q * lp;
            }
            total += row_loss;
        }
        let targets = targets.to_vec();
        Ok(self.record(
            Tensor::scalar(total / mf),
            &[logits],
            move |g| {
                let gs = g.item() / mf;
                let mut dl = Tensor::zeros(&[m, v]);
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let p = logp.at2(i, j).exp();
                        let q = if j == t { on_label } else { uniform };
                        dl.row_mut(i)[j] = (p - q) * gs;
                    }
                }
                vec![dl]
            },
        ))
    }

    // ---- backward ----

    /// Accumulates `d loss / d node` into the persistent per-node gradient
    /// buffers and returns one gradient per parameter in `store`: the
    /// accumulated gradient for trainable parameters reached by this graph,
    /// zeros for everything else.
    pub fn backward(&self, loss: Var, store: &ParamStore<S>) -> Result<BTreeMap<String, Tensor<S>>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NotScalar {
                op: "backward",
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        let mut local: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(Tensor::scalar(S::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            if node.requires {
                if let Some(back) = &node.back {
                    let contributions = back(&g);
                    debug_assert_eq!(contributions.len(), node.parents.len());
                    for (&pid, contrib) in node.parents.iter().zip(contributions) {
                        if !nodes[pid].requires {
                            continue;
                        }
                        match &mut local[pid] {
                            Some(acc) => acc.add_assign(&contrib),
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
                match &mut grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let param_ids = self.param_ids.borrow();
        let mut out = BTreeMap::new();
        for (name, param) in store.iter() {
            let grad = param_ids
                .get(name)
                .filter(|_| param.trainable)
                .and_then(|&id| grads[id].clone())
                .unwrap_or_else(|| Tensor::zeros(param.value.shape()));
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }
}

/// Stable in-place softmax (max-shifted).
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Stable in-place log-softmax (max-shifted).
pub fn log_softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    let logz = max + sum.ln();
    for v in row.iter_mut() {
        *v -= logz;
    }
}
