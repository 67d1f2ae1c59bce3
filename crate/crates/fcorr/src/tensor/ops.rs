//! Forward ops and their backward rules.
//!
//! Every op validates shapes, computes eagerly, checks the output for
//! non-finite values, and registers a backward closure when at least one
//! input requires gradients. Elementwise ops are strict about shapes; the
//! only broadcast form is scalar-with-tensor (`scale`, `add_scalar`).

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) mod kernels {
    /// Row-major matmul: a (m,k) @ b (k,n) -> out (m,n). `out` must be zeroed.
    pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
    }

    /// (m,n) -> (n,m)
    pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        out
    }
}

use kernels::{mm, transpose};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rg_parents(inputs: &[&Tensor]) -> Vec<Tensor> {
    inputs
        .iter()
        .filter(|t| t.requires_grad())
        .map(|t| (*t).clone())
        .collect()
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(x, y)| x + y)
            .collect();
        let parents = rg_parents(&[self, other]);
        if parents.is_empty() {
            return Tensor::from_op_const("add", self.shape().to_vec(), data);
        }
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            parents,
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    b.accumulate_grad(g);
                }
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(x, y)| x - y)
            .collect();
        let parents = rg_parents(&[self, other]);
        if parents.is_empty() {
            return Tensor::from_op_const("sub", self.shape().to_vec(), data);
        }
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            parents,
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    b.accumulate_grad(&neg);
                }
            }),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(x, y)| x * y)
            .collect();
        let parents = rg_parents(&[self, other]);
        if parents.is_empty() {
            return Tensor::from_op_const("mul", self.shape().to_vec(), data);
        }
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            parents,
            Box::new(move |g| {
                if a.requires_grad() {
                    let da: Vec<f64> = g.iter().zip(b.data()).map(|(gv, bv)| gv * bv).collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<f64> = g.iter().zip(a.data()).map(|(gv, av)| gv * av).collect();
                    b.accumulate_grad(&db);
                }
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        let parents = rg_parents(&[self]);
        if parents.is_empty() {
            return Tensor::from_op_const("scale", self.shape().to_vec(), data);
        }
        let a = self.clone();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            parents,
            Box::new(move |g| {
                let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                a.accumulate_grad(&da);
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|x| x + c).collect();
        let parents = rg_parents(&[self]);
        if parents.is_empty() {
            return Tensor::from_op_const("add_scalar", self.shape().to_vec(), data);
        }
        let a = self.clone();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            parents,
            Box::new(move |g| a.accumulate_grad(g)),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&x| x.max(0.0)).collect();
        let parents = rg_parents(&[self]);
        if parents.is_empty() {
            return Tensor::from_op_const("relu", self.shape().to_vec(), data);
        }
        let a = self.clone();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            parents,
            Box::new(move |g| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(a.data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                a.accumulate_grad(&da);
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let parents = rg_parents(&[self]);
        if parents.is_empty() {
            return Tensor::from_op_const("sigmoid", self.shape().to_vec(), data);
        }
        let a = self.clone();
        let y = data.clone();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            parents,
            Box::new(move |g| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&y)
                    .map(|(gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Softmax along `axis`; each line sums to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let line = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * line * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..line {
                    max = max.max(data[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..line {
                    let e = (data[base + l * inner] - max).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..line {
                    data[base + l * inner] /= sum;
                }
            }
        }
        let parents = rg_parents(&[self]);
        if parents.is_empty() {
            return Tensor::from_op_const("softmax", shape, data);
        }
        let a = self.clone();
        let y = data.clone();
        let (line_c, inner_c, outer_c) = (line, inner, outer);
        Tensor::from_op(
            "softmax",
            shape,
            data,
            parents,
            Box::new(move |g| {
                let mut da = vec![0.0; g.len()];
                for o in 0..outer_c {
                    for i in 0..inner_c {
                        let base = o * line_c * inner_c + i;
                        let mut dot = 0.0;
                        for l in 0..line_c {
                            let idx = base + l * inner_c;
                            dot += g[idx] * y[idx];
                        }
                        for l in 0..line_c {
                            let idx = base + l * inner_c;
                            da[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Normalize along `axis` with learned per-element scale and shift.
    /// `gamma`/`beta` must have shape `[self.shape()[axis]]`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "layer_norm",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let line = shape[axis];
        if gamma.shape() != [line] || beta.shape() != [line] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma/beta must be [{}], got {:?} and {:?}",
                    line,
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut data = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * line * inner + i;
                let mut mean = 0.0;
                for l in 0..line {
                    mean += x[base + l * inner];
                }
                mean /= line as f64;
                let mut var = 0.0;
                for l in 0..line {
                    let d = x[base + l * inner] - mean;
                    var += d * d;
                }
                var /= line as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = inv;
                for l in 0..line {
                    let idx = base + l * inner;
                    let xh = (x[idx] - mean) * inv;
                    xhat[idx] = xh;
                    data[idx] = gm[l] * xh + bt[l];
                }
            }
        }
        let parents = rg_parents(&[self, gamma, beta]);
        if parents.is_empty() {
            return Tensor::from_op_const("layer_norm", shape, data);
        }
        let (a, gt, bt_t) = (self.clone(), gamma.clone(), beta.clone());
        let (line_c, inner_c, outer_c) = (line, inner, outer);
        Tensor::from_op(
            "layer_norm",
            shape,
            data,
            parents,
            Box::new(move |g| {
                let gm = gt.data();
                let n = line_c as f64;
                if bt_t.requires_grad() {
                    let mut db = vec![0.0; line_c];
                    for o in 0..outer_c {
                        for i in 0..inner_c {
                            let base = o * line_c * inner_c + i;
                            for l in 0..line_c {
                                db[l] += g[base + l * inner_c];
                            }
                        }
                    }
                    bt_t.accumulate_grad(&db);
                }
                if gt.requires_grad() {
                    let mut dg = vec![0.0; line_c];
                    for o in 0..outer_c {
                        for i in 0..inner_c {
                            let base = o * line_c * inner_c + i;
                            for l in 0..line_c {
                                let idx = base + l * inner_c;
                                dg[l] += g[idx] * xhat[idx];
                            }
                        }
                    }
                    gt.accumulate_grad(&dg);
                }
                if a.requires_grad() {
                    let mut da = vec![0.0; g.len()];
                    for o in 0..outer_c {
                        for i in 0..inner_c {
                            let base = o * line_c * inner_c + i;
                            let inv = inv_std[o * inner_c + i];
                            let mut mean_dxhat = 0.0;
                            let mut mean_dxhat_xhat = 0.0;
                            for l in 0..line_c {
                                let idx = base + l * inner_c;
                                let dxh = g[idx] * gm[l];
                                mean_dxhat += dxh;
                                mean_dxhat_xhat += dxh * xhat[idx];
                            }
                            mean_dxhat /= n;
                            mean_dxhat_xhat /= n;
                            for l in 0..line_c {
                                let idx = base + l * inner_c;
                                let dxh = g[idx] * gm[l];
                                da[idx] = inv * (dxh - mean_dxhat - xhat[idx] * mean_dxhat_xhat);
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    /// Mean over all elements, producing a rank-0 scalar.
    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor".to_string()));
        }
        let n = self.numel() as f64;
        let value = self.data().iter().sum::<f64>() / n;
        let parents = rg_parents(&[self]);
        if parents.is_empty() {
            return Tensor::from_op_const("mean", Vec::new(), vec![value]);
        }
        let a = self.clone();
        Tensor::from_op(
            "mean",
            Vec::new(),
            vec![value],
            parents,
            Box::new(move |g| {
                let da = vec![g[0] / n; a.numel()];
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Sum over all elements, producing a rank-0 scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let value = self.data().iter().sum::<f64>();
        let parents = rg_parents(&[self]);
        if parents.is_empty() {
            return Tensor::from_op_const("sum", Vec::new(), vec![value]);
        }
        let a = self.clone();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![value],
            parents,
            Box::new(move |g| {
                let da = vec![g[0]; a.numel()];
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Euclidean norm along the last axis: (..., k) -> (...).
    /// The gradient at an exactly-zero norm is taken as zero.
    pub fn norm2_last(&self) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::shape("norm2_last", "rank-0 input".to_string()));
        }
        let k = *shape.last().unwrap();
        let rows = self.numel() / k;
        let x = self.data();
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let mut s = 0.0;
            for j in 0..k {
                let v = x[r * k + j];
                s += v * v;
            }
            data[r] = s.sqrt();
        }
        let out_shape = shape[..shape.len() - 1].to_vec();
        let parents = rg_parents(&[self]);
        if parents.is_empty() {
            return Tensor::from_op_const("norm2_last", out_shape, data);
        }
        let a = self.clone();
        let norms = data.clone();
        Tensor::from_op(
            "norm2_last",
            out_shape,
            data,
            parents,
            Box::new(move |g| {
                let x = a.data();
                let mut da = vec![0.0; x.len()];
                for r in 0..norms.len() {
                    if norms[r] > 0.0 {
                        let c = g[r] / norms[r];
                        for j in 0..k {
                            da[r * k + j] = c * x[r * k + j];
                        }
                    }
                }
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Matrix product. Supports (m,k)@(k,n) and batched (b,m,k)@(b,k,n).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k) = (sa[0], sa[1]);
                let (k2, n) = (sb[0], sb[1]);
                if k != k2 {
                    return Err(Error::shape(
                        "matmul",
                        format!("inner dims differ: {:?} @ {:?}", sa, sb),
                    ));
                }
                let mut data = vec![0.0; m * n];
                mm(self.data(), other.data(), m, k, n, &mut data);
                let parents = rg_parents(&[self, other]);
                if parents.is_empty() {
                    return Tensor::from_op_const("matmul", vec![m, n], data);
                }
                let (a, b) = (self.clone(), other.clone());
                Tensor::from_op(
                    "matmul",
                    vec![m, n],
                    data,
                    parents,
                    Box::new(move |g| {
                        if a.requires_grad() {
                            let bt = transpose(b.data(), k, n);
                            let mut da = vec![0.0; m * k];
                            mm(g, &bt, m, n, k, &mut da);
                            a.accumulate_grad(&da);
                        }
                        if b.requires_grad() {
                            let at = transpose(a.data(), m, k);
                            let mut db = vec![0.0; k * n];
                            mm(&at, g, k, m, n, &mut db);
                            b.accumulate_grad(&db);
                        }
                    }),
                )
            }
            (3, 3) => {
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let (bs2, k2, n) = (sb[0], sb[1], sb[2]);
                if bs != bs2 || k != k2 {
                    return Err(Error::shape(
                        "matmul",
                        format!("batched dims differ: {:?} @ {:?}", sa, sb),
                    ));
                }
                let mut data = vec![0.0; bs * m * n];
                for s in 0..bs {
                    mm(
                        &self.data()[s * m * k..(s + 1) * m * k],
                        &other.data()[s * k * n..(s + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut data[s * m * n..(s + 1) * m * n],
                    );
                }
                let parents = rg_parents(&[self, other]);
                if parents.is_empty() {
                    return Tensor::from_op_const("matmul", vec![bs, m, n], data);
                }
                let (a, b) = (self.clone(), other.clone());
                Tensor::from_op(
                    "matmul",
                    vec![bs, m, n],
                    data,
                    parents,
                    Box::new(move |g| {
                        if a.requires_grad() {
                            let mut da = vec![0.0; bs * m * k];
                            for s in 0..bs {
                                let bt = transpose(&b.data()[s * k * n..(s + 1) * k * n], k, n);
                                mm(
                                    &g[s * m * n..(s + 1) * m * n],
                                    &bt,
                                    m,
                                    n,
                                    k,
                                    &mut da[s * m * k..(s + 1) * m * k],
                                );
                            }
                            a.accumulate_grad(&da);
                        }
                        if b.requires_grad() {
                            let mut db = vec![0.0; bs * k * n];
                            for s in 0..bs {
                                let at = transpose(&a.data()[s * m * k..(s + 1) * m * k], m, k);
                                mm(
                                    &at,
                                    &g[s * m * n..(s + 1) * m * n],
                                    k,
                                    m,
                                    n,
                                    &mut db[s * k * n..(s + 1) * k * n],
                                );
                            }
                            b.accumulate_grad(&db);
                        }
                    }),
                )
            }
            _ => Err(Error::shape(
                "matmul",
                format!("unsupported ranks: {:?} @ {:?}", sa, sb),
            )),
        }
    }

    /// Affine map over the last axis: (..., k) @ (k, n) + bias (n).
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let sx = self.shape().to_vec();
        let sw = weight.shape();
        if sx.is_empty() || sw.len() != 2 || bias.shape().len() != 1 {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", sx, sw, bias.shape()),
            ));
        }
        let k = *sx.last().unwrap();
        let (kw, n) = (sw[0], sw[1]);
        if k != kw || bias.shape()[0] != n {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", sx, sw, bias.shape()),
            ));
        }
        let rows = self.numel() / k;
        let mut data = vec![0.0; rows * n];
        mm(self.data(), weight.data(), rows, k, n, &mut data);
        let bd = bias.data();
        for r in 0..rows {
            for j in 0..n {
                data[r * n + j] += bd[j];
            }
        }
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = n;
        let parents = rg_parents(&[self, weight, bias]);
        if parents.is_empty() {
            return Tensor::from_op_const("linear", out_shape, data);
        }
        let (x, w, b) = (self.clone(), weight.clone(), bias.clone());
        Tensor::from_op(
            "linear",
            out_shape,
            data,
            parents,
            Box::new(move |g| {
                if x.requires_grad() {
                    let wt = transpose(w.data(), k, n);
                    let mut dx = vec![0.0; rows * k];
                    mm(g, &wt, rows, n, k, &mut dx);
                    x.accumulate_grad(&dx);
                }
                if w.requires_grad() {
                    let xt = transpose(x.data(), rows, k);
                    let mut dw = vec![0.0; k * n];
                    mm(&xt, g, k, rows, n, &mut dw);
                    w.accumulate_grad(&dw);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(), shape),
            ));
        }
        let parents = rg_parents(&[self]);
        if parents.is_empty() {
            return Tensor::from_shared(shape, self.data_arc(), false);
        }
        let a = self.clone();
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            parents,
            Box::new(move |g| a.accumulate_grad(g)),
        )
    }

    /// Reorder axes. `perm` must be a permutation of 0..rank.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("perm {:?} invalid for shape {:?}", perm, shape),
            ));
        }
        let (out_shape, data) = permute_raw(&shape, perm, self.data());
        let parents = rg_parents(&[self]);
        if parents.is_empty() {
            return Tensor::from_op_const("permute", out_shape, data);
        }
        let a = self.clone();
        let inverse: Vec<usize> = {
            let mut inv = vec![0; rank];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            inv
        };
        let out_shape_c = out_shape.clone();
        Tensor::from_op(
            "permute",
            out_shape,
            data,
            parents,
            Box::new(move |g| {
                let (_, dg) = permute_raw(&out_shape_c, &inverse, g);
                a.accumulate_grad(&dg);
            }),
        )
    }
}

/// Raw axis reorder on a flat buffer.
pub(crate) fn permute_raw(shape: &[usize], perm: &[usize], data: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (i, &ix) in idx.iter().enumerate() {
            src += ix * in_strides[perm[i]];
        }
        *slot = data[src];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    (out_shape, out)
}

/// Concatenate along `axis`. All inputs must agree on every other dim.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat", "no inputs".to_string()));
    }
    let first = parts[0].shape().to_vec();
    let rank = first.len();
    if axis >= rank {
        return Err(Error::shape(
            "concat",
            format!("axis {} out of range for shape {:?}", axis, first),
        ));
    }
    let mut axis_total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != rank
            || s.iter()
                .enumerate()
                .any(|(i, &d)| i != axis && d != first[i])
        {
            return Err(Error::shape(
                "concat",
                format!("incompatible shapes {:?} vs {:?}", first, s),
            ));
        }
        axis_total += s[axis];
    }
    let mut out_shape = first.clone();
    out_shape[axis] = axis_total;
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * axis_total * inner];
    let mut offset = 0;
    for p in parts {
        let pa = p.shape()[axis];
        let block = pa * inner;
        let src = p.data();
        for o in 0..outer {
            let dst_base = (o * axis_total + offset) * inner;
            data[dst_base..dst_base + block].copy_from_slice(&src[o * block..(o + 1) * block]);
        }
        offset += pa;
    }
    let parent_refs: Vec<&Tensor> = parts.to_vec();
    let parents = rg_parents(&parent_refs);
    if parents.is_empty() {
        return Tensor::from_op_const("concat", out_shape, data);
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Tensor::from_op(
        "concat",
        out_shape,
        data,
        parents,
        Box::new(move |g| {
            let mut offset = 0;
            for (p, &pa) in owned.iter().zip(&sizes) {
                if p.requires_grad() {
                    let block = pa * inner;
                    let mut dp = vec![0.0; outer * block];
                    for o in 0..outer {
                        let src_base = (o * axis_total + offset) * inner;
                        dp[o * block..(o + 1) * block]
                            .copy_from_slice(&g[src_base..src_base + block]);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += pa;
            }
        }),
    )
}
