//! Differentiable primitives on [`Var`].
//!
//! Spatial maps are `[H, W, C]` row-major, token matrices are `[T, C]`.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{NomError, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

/// Gather index that reads as zero.
pub const ZERO_INDEX: usize = usize::MAX;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather indices that realise `permute(perm)` on a tensor of `shape`.
pub(crate) fn permute_indices(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = counter
            .iter()
            .zip(perm)
            .map(|(&c, &p)| c * in_strides[p])
            .sum();
        idx.push(off);
        for d in (0..counter.len()).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    (idx, out_shape)
}

impl Var {
    fn elementwise(
        &self,
        other: &Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        backward: impl Fn(&Tensor, &Tensor, &Tensor) -> (Tensor, Tensor) + 'static,
    ) -> Result<Var> {
        if self.shape() != other.shape() {
            return Err(NomError::shape(op, self.shape(), other.shape()));
        }
        let value = self.value().zip_map(other.value(), f)?;
        let (a, b) = (self.clone(), other.clone());
        Ok(Var::from_op(
            op,
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let (ga, gb) = backward(g, a.value(), b.value());
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "add", |a, b| a + b, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.elementwise(
            other,
            "sub",
            |a, b| a - b,
            |g, _, _| (g.clone(), g.map(|v| -v)),
        )
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.elementwise(
            other,
            "mul",
            |a, b| a * b,
            |g, a, b| {
                (
                    g.zip_map(b, |g, b| g * b).unwrap(),
                    g.zip_map(a, |g, a| g * a).unwrap(),
                )
            },
        )
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::from_op(
            "scale",
            self.value().map(|v| v * c),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.map(|v| v * c))]),
        )
    }

    fn check_last_axis(&self, v: &Var, op: &'static str) -> Result<usize> {
        let n = *self.shape().last().unwrap();
        if v.value().numel() != n {
            return Err(NomError::shape(op, self.shape(), v.shape()));
        }
        Ok(n)
    }

    /// `x + b` with `b` broadcast along the last axis.
    pub fn add_bias(&self, bias: &Var) -> Result<Var> {
        let n = self.check_last_axis(bias, "add_bias")?;
        let b = bias.value().data();
        let mut out = self.value().clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let bshape = bias.shape().to_vec();
        Ok(Var::from_op(
            "add_bias",
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![
                    Some(g.clone()),
                    Some(Tensor::from_parts(bshape.clone(), gb)),
                ]
            }),
        ))
    }

    /// `x * s` with `s` broadcast along the last axis.
    pub fn mul_bias(&self, scale: &Var) -> Result<Var> {
        let n = self.check_last_axis(scale, "mul_bias")?;
        let s = scale.value().data().to_vec();
        let mut out = self.value().clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &sv) in row.iter_mut().zip(&s) {
                *o *= sv;
            }
        }
        let x = self.clone();
        let sshape = scale.shape().to_vec();
        Ok(Var::from_op(
            "mul_bias",
            out,
            vec![self.clone(), scale.clone()],
            Box::new(move |g| {
                let mut gx = g.clone();
                for row in gx.data_mut().chunks_mut(n) {
                    for (o, &sv) in row.iter_mut().zip(&s) {
                        *o *= sv;
                    }
                }
                let mut gs = vec![0.0; n];
                for (grow, xrow) in g.data().chunks(n).zip(x.value().data().chunks(n)) {
                    for j in 0..n {
                        gs[j] += grow[j] * xrow[j];
                    }
                }
                vec![Some(gx), Some(Tensor::from_parts(sshape.clone(), gs))]
            }),
        ))
    }

    /// Scales row `r` of an `[R, C]` matrix by `w[r]`.
    pub fn mul_rows(&self, weights: &Var) -> Result<Var> {
        if self.value().rank() != 2 || weights.value().numel() != self.shape()[0] {
            return Err(NomError::shape("mul_rows", self.shape(), weights.shape()));
        }
        let c = self.shape()[1];
        let w = weights.value().data().to_vec();
        let mut out = self.value().clone();
        for (row, &wv) in out.data_mut().chunks_mut(c).zip(&w) {
            for o in row.iter_mut() {
                *o *= wv;
            }
        }
        let x = self.clone();
        let wshape = weights.shape().to_vec();
        Ok(Var::from_op(
            "mul_rows",
            out,
            vec![self.clone(), weights.clone()],
            Box::new(move |g| {
                let mut gx = g.clone();
                for (row, &wv) in gx.data_mut().chunks_mut(c).zip(&w) {
                    for o in row.iter_mut() {
                        *o *= wv;
                    }
                }
                let gw: Vec<f64> = g
                    .data()
                    .chunks(c)
                    .zip(x.value().data().chunks(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                vec![Some(gx), Some(Tensor::from_parts(wshape.clone(), gw))]
            }),
        ))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NomError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value().data(), other.value().data(), &mut out, m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Var::from_op(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), b.value().data(), &mut ga, m, n, k);
                    Tensor::from_parts(vec![m, k], ga)
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(a.value().data(), g.data(), &mut gb, m, k, n);
                    Tensor::from_parts(vec![k, n], gb)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched product `[B, m, k] · [B, k, n] → [B, m, n]`.
    pub fn bmm(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(NomError::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value().data(), other.value().data());
        for i in 0..bs {
            gemm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Var::from_op(
            "bmm",
            Tensor::from_parts(vec![bs, m, n], out),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let gd = g.data();
                let (ad, bd) = (a.value().data(), b.value().data());
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm_nt(
                            &gd[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    Tensor::from_parts(vec![bs, m, k], ga)
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm_tn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    Tensor::from_parts(vec![bs, k, n], gb)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched product with the second operand transposed:
    /// `[B, m, k] · [B, n, k]ᵀ → [B, m, n]`.
    pub fn bmm_nt(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(NomError::shape("bmm_nt", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value().data(), other.value().data());
        for i in 0..bs {
            gemm_nt(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Var::from_op(
            "bmm_nt",
            Tensor::from_parts(vec![bs, m, n], out),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let gd = g.data();
                let (ad, bd) = (a.value().data(), b.value().data());
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm_nn(
                            &gd[i * m * n..(i + 1) * m * n],
                            &bd[i * n * k..(i + 1) * n * k],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    Tensor::from_parts(vec![bs, m, k], ga)
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; bs * n * k];
                    for i in 0..bs {
                        gemm_tn(
                            &gd[i * m * n..(i + 1) * m * n],
                            &ad[i * m * k..(i + 1) * m * k],
                            &mut gb[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                    Tensor::from_parts(vec![bs, n, k], gb)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        let in_shape = self.shape().to_vec();
        Ok(Var::from_op(
            "reshape",
            value,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.reshape(&in_shape).unwrap())]),
        ))
    }

    /// `out[i] = x[indices[i]]` (or 0 for [`ZERO_INDEX`]), reshaped to `shape`.
    /// The backward pass scatter-adds, so repeated indices accumulate.
    pub fn gather(&self, indices: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return Err(NomError::invalid_shape(
                "gather",
                format!("{} indices for output shape {shape:?}", indices.len()),
            ));
        }
        let src = self.value().data();
        if let Some(&bad) = indices.iter().find(|&&i| i != ZERO_INDEX && i >= src.len()) {
            return Err(NomError::invalid_shape(
                "gather",
                format!("index {bad} out of range for {} values", src.len()),
            ));
        }
        let out: Vec<f64> = indices
            .iter()
            .map(|&i| if i == ZERO_INDEX { 0.0 } else { src[i] })
            .collect();
        let in_shape = self.shape().to_vec();
        let in_len = src.len();
        Ok(Var::from_op(
            "gather",
            Tensor::from_parts(shape.to_vec(), out),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; in_len];
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    if i != ZERO_INDEX {
                        gx[i] += gv;
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            }),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let rank = self.value().rank();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..rank).collect::<Vec<_>>() {
            return Err(NomError::invalid_shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let (idx, out_shape) = permute_indices(self.shape(), perm);
        self.gather(idx.into(), &out_shape)
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Var> {
        if self.value().rank() != 2 {
            return Err(NomError::invalid_shape(
                "transpose",
                format!("{:?}", self.shape()),
            ));
        }
        self.permute(&[1, 0])
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(NomError::invalid_shape(
                "slice",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                idx.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.gather(idx.into(), &out_shape)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NomError::InvalidArgument("concat of zero tensors".into()))?;
        let rank = first.value().rank();
        if axis >= rank {
            return Err(NomError::invalid_shape(
                "concat",
                format!("axis {axis} for rank {rank}"),
            ));
        }
        for p in parts {
            let ok = p.value().rank() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(NomError::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.value().data()[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total / inner;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(Var::from_op(
            "concat",
            Tensor::from_parts(out_shape, out),
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> = widths
                    .iter()
                    .map(|w| Vec::with_capacity(outer * w))
                    .collect();
                let gd = g.data();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &w) in grads.iter_mut().zip(&widths) {
                        gp.extend_from_slice(&gd[off..off + w]);
                        off += w;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
                    .collect()
            }),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(NomError::invalid_shape(
                "softmax",
                format!("axis {axis} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value().data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (x[at(a)] - max).exp();
                    y[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    y[at(a)] /= z;
                }
            }
        }
        let yt = Tensor::from_parts(shape.clone(), y);
        let saved = yt.clone();
        Ok(Var::from_op(
            "softmax",
            yt,
            vec![self.clone()],
            Box::new(move |g| {
                let (gd, yd) = (g.data(), saved.data());
                let mut gx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| gd[at(a)] * yd[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            }),
        ))
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&self, target: usize) -> Result<Var> {
        let z = self.value().data();
        if target >= z.len() {
            return Err(NomError::InvalidArgument(format!(
                "target class {target} for {} logits",
                z.len()
            )));
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let shape = self.shape().to_vec();
        Ok(Var::from_op(
            "cross_entropy",
            Tensor::scalar(lse - z[target]),
            vec![self.clone()],
            Box::new(move |g| {
                let s = g.item();
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                d[target] -= s;
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    /// Tanh-form GELU.
    pub fn gelu(&self) -> Var {
        let x = self.clone();
        Var::from_op(
            "gelu",
            self.value().map(gelu_scalar),
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.zip_map(x.value(), |g, x| g * gelu_grad_scalar(x))
                        .unwrap(),
                )]
            }),
        )
    }

    /// Normalises each last-axis vector to zero mean and unit variance, then
    /// applies `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let n = self.check_last_axis(gamma, "layer_norm")?;
        self.check_last_axis(beta, "layer_norm")?;
        let x = self.value().data();
        let rows = x.len() / n;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                xhat[r * n + j] = (row[j] - mean) * is;
            }
        }
        let gd = gamma.value().data().to_vec();
        let bd = beta.value().data();
        let mut y = xhat.clone();
        for row in y.chunks_mut(n) {
            for j in 0..n {
                row[j] = row[j] * gd[j] + bd[j];
            }
        }
        let shape = self.shape().to_vec();
        let (gshape, bshape) = (gamma.shape().to_vec(), beta.shape().to_vec());
        Ok(Var::from_op(
            "layer_norm",
            Tensor::from_parts(shape.clone(), y),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let g = g.data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let d = gr[j] * gd[j];
                        sum_d += d;
                        sum_dx += d * xr[j];
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let d = gr[j] * gd[j];
                        dx[r * n + j] = inv_std[r] / nf * (nf * d - sum_d - xr[j] * sum_dx);
                    }
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), dx)),
                    Some(Tensor::from_parts(gshape.clone(), dgamma)),
                    Some(Tensor::from_parts(bshape.clone(), dbeta)),
                ]
            }),
        ))
    }

    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        Var::from_op(
            "sum",
            Tensor::scalar(self.value().sum()),
            vec![self.clone()],
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        let shape = self.shape().to_vec();
        Var::from_op(
            "mean",
            Tensor::scalar(self.value().sum() / n),
            vec![self.clone()],
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.item() / n))]),
        )
    }

    /// Column means of an `[R, C]` matrix, shape `[C]`.
    pub fn mean_rows(&self) -> Result<Var> {
        if self.value().rank() != 2 {
            return Err(NomError::invalid_shape(
                "mean_rows",
                format!("{:?}", self.shape()),
            ));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0; c];
        for row in self.value().data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        Ok(Var::from_op(
            "mean_rows",
            Tensor::from_parts(vec![c], out),
            vec![self.clone()],
            Box::new(move |g| {
                let scaled: Vec<f64> = g.data().iter().map(|v| v / r as f64).collect();
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend_from_slice(&scaled);
                }
                vec![Some(Tensor::from_parts(vec![r, c], d))]
            }),
        ))
    }

    /// Channel-wise max over `size × size` windows of an `[H, W, C]` map.
    /// The gradient is routed to the first maximal element of each window.
    pub fn max_pool2d(&self, size: usize, stride: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 3 || size == 0 || stride == 0 || s[0] < size || s[1] < size {
            return Err(NomError::invalid_shape(
                "max_pool2d",
                format!("input {s:?} with window {size} stride {stride}"),
            ));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = ((h - size) / stride + 1, (w - size) / stride + 1);
        let x = self.value().data();
        let mut out = vec![0.0; ho * wo * c];
        let mut arg = vec![0usize; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..size {
                        for kx in 0..size {
                            let i = ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            if x[i] > best || (ky == 0 && kx == 0) {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (oy * wo + ox) * c + ch;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        let in_shape = s.to_vec();
        let in_len = x.len();
        Ok(Var::from_op(
            "max_pool2d",
            Tensor::from_parts(vec![ho, wo, c], out),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; in_len];
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    gx[i] += gv;
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            }),
        ))
    }

    /// Zero-padded cross-correlation of an `[H, W, Cin]` map with a
    /// `[kh, kw, Cin, Cout]` kernel, lowered to im2col + GEMM.
    pub fn conv2d(
        &self,
        kernel: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (s, k) = (self.shape(), kernel.shape());
        if s.len() != 3 || k.len() != 4 {
            return Err(NomError::shape("conv2d", s, k));
        }
        let (h, w, cin) = (s[0], s[1], s[2]);
        let (kh, kw, kcin, cout) = (k[0], k[1], k[2], k[3]);
        if kcin != cin {
            return Err(NomError::invalid_shape(
                "conv2d",
                format!("kernel expects {kcin} input channels, map has {cin}"),
            ));
        }
        if stride == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(NomError::invalid_shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let patch = kh * kw * cin;
        let cols = if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
            self.reshape(&[h * w, cin])?
        } else {
            let mut idx = Vec::with_capacity(ho * wo * patch);
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            let inside =
                                iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                            for ch in 0..cin {
                                idx.push(if inside {
                                    ((iy as usize) * w + ix as usize) * cin + ch
                                } else {
                                    ZERO_INDEX
                                });
                            }
                        }
                    }
                }
            }
            self.gather(idx.into(), &[ho * wo, patch])?
        };
        let mut y = cols.matmul(&kernel.reshape(&[patch, cout])?)?;
        if let Some(b) = bias {
            y = y.add_bias(b)?;
        }
        y.reshape(&[ho, wo, cout])
    }

    /// Forward value `hard`, gradient passed straight to `self`.
    pub fn straight_through(&self, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape() {
            return Err(NomError::shape(
                "straight_through",
                self.shape(),
                hard.shape(),
            ));
        }
        Ok(Var::from_op(
            "straight_through",
            hard,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.clone())]),
        ))
    }
}
