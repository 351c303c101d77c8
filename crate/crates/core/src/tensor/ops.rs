//! Tensor operations and their adjoint rules.
//!
//! Elementwise binary operations accept operands of identical shape, or one
//! operand with a single element, which is broadcast against the other.
//! Reductions and matrix products accumulate in `f64` and round once at the
//! end. Composite operations (softmax, cross-entropy, the GRU cell) are
//! built from primitives, so their gradients come from the tape rather than
//! hand-derived Jacobians.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

enum Pairing {
    Same,
    LeftScalar,
    RightScalar,
}

fn pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Pairing, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Pairing::Same, a.shape().to_vec()))
    } else if a.numel() == 1 {
        Ok((Pairing::LeftScalar, b.shape().to_vec()))
    } else if b.numel() == 1 {
        Ok((Pairing::RightScalar, a.shape().to_vec()))
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

/// `A[m,k] * B[k,n]` with `f64` accumulation.
fn mm(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += a[i * k + l] as f64 * b[l * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

/// `A[m,k] * B[n,k]^T`, yielding `[m,n]`.
fn mm_nt(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += a[i * k + l] as f64 * b[j * k + l] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

/// `A[k,m]^T * B[k,n]`, yielding `[m,n]`.
fn mm_tn(a: &[f32], k: usize, m: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += a[l * m + i] as f64 * b[l * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (pairing, shape) = pair("add", self, other)?;
        let n: usize = shape.iter().product();
        let (a, b) = (self.data(), other.data());
        let data: Vec<f32> = match pairing {
            Pairing::Same => (0..n).map(|i| a[i] + b[i]).collect(),
            Pairing::LeftScalar => (0..n).map(|i| a[0] + b[i]).collect(),
            Pairing::RightScalar => (0..n).map(|i| a[i] + b[0]).collect(),
        };
        let (la, lb) = (self.numel(), other.numel());
        Ok(Tensor::from_node(
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| vec![spread(g, la), spread(g, lb)]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (pairing, shape) = pair("sub", self, other)?;
        let n: usize = shape.iter().product();
        let (a, b) = (self.data(), other.data());
        let data: Vec<f32> = match pairing {
            Pairing::Same => (0..n).map(|i| a[i] - b[i]).collect(),
            Pairing::LeftScalar => (0..n).map(|i| a[0] - b[i]).collect(),
            Pairing::RightScalar => (0..n).map(|i| a[i] - b[0]).collect(),
        };
        let (la, lb) = (self.numel(), other.numel());
        Ok(Tensor::from_node(
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                vec![spread(g, la), spread(&neg, lb)]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (pairing, shape) = pair("mul", self, other)?;
        let n: usize = shape.iter().product();
        let (a, b) = (self.data(), other.data());
        let data: Vec<f32> = match pairing {
            Pairing::Same => (0..n).map(|i| a[i] * b[i]).collect(),
            Pairing::LeftScalar => (0..n).map(|i| a[0] * b[i]).collect(),
            Pairing::RightScalar => (0..n).map(|i| a[i] * b[0]).collect(),
        };
        let (sa, sb) = (self.clone(), other.clone());
        Ok(Tensor::from_node(
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let (a, b) = (sa.data(), sb.data());
                let da: Vec<f32> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * if b.len() == 1 { b[0] } else { b[i] })
                    .collect();
                let db: Vec<f32> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * if a.len() == 1 { a[0] } else { a[i] })
                    .collect();
                vec![spread(&da, a.len()), spread(&db, b.len())]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (pairing, shape) = pair("div", self, other)?;
        let n: usize = shape.iter().product();
        let (a, b) = (self.data(), other.data());
        let data: Vec<f32> = match pairing {
            Pairing::Same => (0..n).map(|i| a[i] / b[i]).collect(),
            Pairing::LeftScalar => (0..n).map(|i| a[0] / b[i]).collect(),
            Pairing::RightScalar => (0..n).map(|i| a[i] / b[0]).collect(),
        };
        let (sa, sb) = (self.clone(), other.clone());
        Ok(Tensor::from_node(
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let (a, b) = (sa.data(), sb.data());
                let at = |i: usize, s: &[f32]| if s.len() == 1 { s[0] } else { s[i] };
                let da: Vec<f32> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv / at(i, b))
                    .collect();
                let db: Vec<f32> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| {
                        let bv = at(i, b);
                        -gv * at(i, a) / (bv * bv)
                    })
                    .collect();
                vec![spread(&da, a.len()), spread(&db, b.len())]
            }),
        ))
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_node(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g| vec![g.to_vec()]),
        )
    }

    pub fn mul_scalar(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_node(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().map(|v| v * c).collect()]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|v| v.exp()).collect();
        let saved = out.clone();
        Tensor::from_node(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().zip(&saved).map(|(gv, ov)| gv * ov).collect()]),
        )
    }

    pub fn ln(&self) -> Tensor {
        let src = self.clone();
        let out = self.data().iter().map(|v| v.ln()).collect();
        Tensor::from_node(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g.iter().zip(src.data()).map(|(gv, x)| gv / x).collect()]
            }),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|v| v.sqrt()).collect();
        let saved = out.clone();
        Tensor::from_node(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&saved)
                    .map(|(gv, ov)| gv * 0.5 / ov)
                    .collect()]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f32> = self
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let saved = out.clone();
        Tensor::from_node(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&saved)
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect()]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|v| v.tanh()).collect();
        let saved = out.clone();
        Tensor::from_node(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&saved)
                    .map(|(gv, t)| gv * (1.0 - t * t))
                    .collect()]
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let src = self.clone();
        let out = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_node(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(src.data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect()]
            }),
        )
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient passes through the
    /// closed interval, including both endpoints, and is zero outside it.
    pub fn clamp(&self, lo: f32, hi: f32) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "clamp bounds are inverted: lo={lo}, hi={hi}"
            )));
        }
        let src = self.clone();
        let out = self.data().iter().map(|v| v.clamp(lo, hi)).collect();
        Ok(Tensor::from_node(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(src.data())
                    .map(|(gv, x)| if *x >= lo && *x <= hi { *gv } else { 0.0 })
                    .collect()]
            }),
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().map(|v| *v as f64).sum();
        let n = self.numel();
        Tensor::from_node(
            vec![],
            vec![total as f32],
            vec![self.clone()],
            Box::new(move |g| vec![vec![g[0]; n]]),
        )
    }

    /// Arithmetic mean of all elements, as a rank-0 tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let total: f64 = self.data().iter().map(|v| *v as f64).sum();
        Tensor::from_node(
            vec![],
            vec![(total / n as f64) as f32],
            vec![self.clone()],
            Box::new(move |g| vec![vec![g[0] / n as f32; n]]),
        )
    }

    /// Matrix product of two rank-2 tensors, `[m,k] * [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let data = mm(self.data(), m, k, other.data(), n);
        let (sa, sb) = (self.clone(), other.clone());
        Ok(Tensor::from_node(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da = mm_nt(g, m, n, sb.data(), k);
                let db = mm_tn(sa.data(), m, k, g, n);
                vec![da, db]
            }),
        ))
    }

    /// Matrix-vector product, `[m,k] * [k] -> [m]`.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || v.rank() != 1 || self.shape()[1] != v.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                left: self.shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let mut data = vec![0.0f32; m];
        for i in 0..m {
            let mut acc = 0.0f64;
            for j in 0..k {
                acc += self.data()[i * k + j] as f64 * v.data()[j] as f64;
            }
            data[i] = acc as f32;
        }
        let (sw, sv) = (self.clone(), v.clone());
        Ok(Tensor::from_node(
            vec![m],
            data,
            vec![self.clone(), v.clone()],
            Box::new(move |g| {
                let (w, x) = (sw.data(), sv.data());
                let mut dw = vec![0.0f32; m * k];
                let mut dx = vec![0.0f32; k];
                for i in 0..m {
                    for j in 0..k {
                        dw[i * k + j] = g[i] * x[j];
                        dx[j] += g[i] * w[i * k + j];
                    }
                }
                vec![dw, dx]
            }),
        ))
    }

    /// 2-d cross-correlation of a `[C,H,W]` input with `[F,C,kh,kw]` filters
    /// plus an optional `[F]` bias, using zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        if self.rank() != 3 || weight.rank() != 4 || self.shape()[0] != weight.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.shape().to_vec(),
                right: weight.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (f, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::BadShape {
                op: "conv2d",
                detail: format!(
                    "kernel {kh}x{kw} does not fit a {h}x{w} input with padding {padding}"
                ),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [f] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![f],
                    right: b.shape().to_vec(),
                });
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;

        let x = self.data();
        let k = weight.data();
        let mut out = vec![0.0f32; f * oh * ow];
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[(ci * h + iy as usize) * w + ix as usize] as f64
                                    * k[((fi * c + ci) * kh + ky) * kw + kx] as f64;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[fi] as f64;
                    }
                    out[(fi * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }

        let sx = self.clone();
        let sk = weight.clone();
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_node(
            vec![f, oh, ow],
            out,
            parents,
            Box::new(move |g| {
                let (x, k) = (sx.data(), sk.data());
                let mut dx = vec![0.0f32; c * h * w];
                let mut dk = vec![0.0f32; f * c * kh * kw];
                let mut db = vec![0.0f32; f];
                for fi in 0..f {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(fi * oh + oy) * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            db[fi] += gv;
                            for ci in 0..c {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (ci * h + iy as usize) * w + ix as usize;
                                        let ki = ((fi * c + ci) * kh + ky) * kw + kx;
                                        dx[xi] += gv * k[ki];
                                        dk[ki] += gv * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![dx, dk];
                if has_bias {
                    grads.push(db);
                }
                grads
            }),
        ))
    }

    /// Spatial mean per channel, `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::BadShape {
                op: "global_avg_pool",
                detail: format!("expected [C,H,W], got {:?}", self.shape()),
            });
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let plane = h * w;
        let mut out = vec![0.0f32; c];
        for ci in 0..c {
            let mut acc = 0.0f64;
            for i in 0..plane {
                acc += self.data()[ci * plane + i] as f64;
            }
            out[ci] = (acc / plane as f64) as f32;
        }
        Ok(Tensor::from_node(
            vec![c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0f32; c * plane];
                for ci in 0..c {
                    let share = g[ci] / plane as f32;
                    for i in 0..plane {
                        dx[ci * plane + i] = share;
                    }
                }
                vec![dx]
            }),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::BadShape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape(), shape),
            });
        }
        Ok(Tensor::from_node(
            shape,
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![g.to_vec()]),
        ))
    }

    /// Single element by flat index, as a rank-0 tensor.
    pub fn at(&self, index: usize) -> Result<Tensor> {
        if index >= self.numel() {
            return Err(Error::BadShape {
                op: "at",
                detail: format!("index {index} out of range for {} elements", self.numel()),
            });
        }
        let n = self.numel();
        Ok(Tensor::from_node(
            vec![],
            vec![self.data()[index]],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0f32; n];
                dx[index] = g[0];
                vec![dx]
            }),
        ))
    }

    /// Numerically stable softmax over a rank-1 tensor.
    ///
    /// The maximum is subtracted as a constant before exponentiation; the
    /// shift cancels in the normalized output, so treating it as constant
    /// leaves the gradient exact.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.rank() != 1 || self.numel() == 0 {
            return Err(Error::BadShape {
                op: "softmax",
                detail: format!("expected a non-empty vector, got {:?}", self.shape()),
            });
        }
        let max = self.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let e = self.add_scalar(-max).exp();
        let total = e.sum();
        e.div(&total)
    }

    /// `max(x, c)` elementwise against a constant.
    pub fn max_scalar(&self, c: f32) -> Tensor {
        let src = self.clone();
        let out = self.data().iter().map(|v| v.max(c)).collect();
        Tensor::from_node(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(src.data())
                    .map(|(gv, x)| if *x > c { *gv } else { 0.0 })
                    .collect()]
            }),
        )
    }
}

/// Adjoint helper: collapse a full-size adjoint onto a broadcast operand.
fn spread(g: &[f32], operand_len: usize) -> Vec<f32> {
    if operand_len == g.len() {
        g.to_vec()
    } else {
        debug_assert_eq!(operand_len, 1);
        vec![g.iter().sum()]
    }
}

/// Concatenate rank-1 tensors into one vector.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("concat of zero tensors".into()));
    }
    let mut data = Vec::new();
    let mut lens = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rank() != 1 {
            return Err(Error::BadShape {
                op: "concat",
                detail: format!("expected rank-1 operands, got {:?}", p.shape()),
            });
        }
        lens.push(p.numel());
        data.extend_from_slice(p.data());
    }
    let total = data.len();
    Ok(Tensor::from_node(
        vec![total],
        data,
        parts.iter().map(|p| (*p).clone()).collect(),
        Box::new(move |g| {
            let mut grads = Vec::with_capacity(lens.len());
            let mut offset = 0;
            for len in &lens {
                grads.push(g[offset..offset + len].to_vec());
                offset += len;
            }
            grads
        }),
    ))
}

/// Negative log-likelihood of the true class under a probability vector.
///
/// `probs` is expected to already sum to one (softmax output); a small
/// epsilon guards the logarithm against an exactly zero probability.
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<Tensor> {
    if probs.rank() != 1 {
        return Err(Error::BadShape {
            op: "cross_entropy",
            detail: format!("expected a probability vector, got {:?}", probs.shape()),
        });
    }
    if label >= probs.numel() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            probs.numel()
        )));
    }
    Ok(probs.at(label)?.add_scalar(1e-12).ln().neg())
}

/// Weights of a gated recurrent unit cell.
///
/// `w_*` act on the input, `u_*` on the previous hidden state; shapes are
/// `[hidden, input]`, `[hidden, hidden]`, and `[hidden]` respectively.
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

/// One GRU step.
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)        update gate
/// r  = sigmoid(W_r x + U_r h + b_r)        reset gate
/// hc = tanh(W_h x + U_h (r * h) + b_h)     candidate state
/// h' = (1 - z) * h + z * hc
/// ```
///
/// With zero input, zero state, and zero biases the candidate is zero and
/// the output collapses to zero regardless of the weight matrices.
pub fn gru_cell(x: &Tensor, h: &Tensor, p: &GruParams) -> Result<Tensor> {
    let z = p
        .w_z
        .matvec(x)?
        .add(&p.u_z.matvec(h)?)?
        .add(&p.b_z)?
        .sigmoid();
    let r = p
        .w_r
        .matvec(x)?
        .add(&p.u_r.matvec(h)?)?
        .add(&p.b_r)?
        .sigmoid();
    let hc = p
        .w_h
        .matvec(x)?
        .add(&p.u_h.matvec(&r.mul(h)?)?)?
        .add(&p.b_h)?
        .tanh();
    let keep = z.neg().add_scalar(1.0).mul(h)?;
    keep.add(&z.mul(&hc)?)
}
