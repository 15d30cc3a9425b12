//! Forward and backward kernels for the network layers.
//!
//! Spatial ops take `[C, H, W]` or batched `[B, C, H, W]` inputs; `dense`,
//! `softmax` and `l2_normalize` take `[M]` or `[B, ...]`.

use rand::Rng;

use super::{Op, Tape, Var};
use crate::tensor::{gemm, Result, Scalar, Tensor, TensorError};

/// `(batch, channels, height, width, batched)` of a spatial tensor.
fn spatial_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [b, c, h, w] => Ok((b, c, h, w, true)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            expected: "[C,H,W] or [B,C,H,W]".into(),
            found: format!("{shape:?}"),
        }),
    }
}

/// `(rows, row_len, batched)` view for row-wise ops.
fn row_dims(shape: &[usize]) -> (usize, usize, bool) {
    match shape {
        [] => (1, 1, false),
        [m] => (1, *m, false),
        [b, rest @ ..] => (*b, rest.iter().product(), true),
    }
}

/// Unfolds one `[C, H, W]` image into `[C*k*k, Ho*Wo]` patch columns.
fn im2col<T: Scalar>(
    img: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    img: &mut [T],
) {
    let plane = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation with `kernels: [C_out, C_in, k, k]` and `bias: [C_out]`,
    /// zero padding `pad` on every side, unit stride.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, pad: usize) -> Result<Var> {
        let (b, c, h, w, batched) = spatial_dims("conv2d", self.shape(input))?;
        let (o, k) = match *self.shape(kernels) {
            [o, ci, k, kk] if ci == c && k == kk => (o, k),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    expected: format!("kernels [C_out,{c},k,k]"),
                    found: format!("{:?}", self.shape(kernels)),
                })
            }
        };
        if self.shape(bias) != [o] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: format!("bias [{o}]"),
                found: format!("{:?}", self.shape(bias)),
            });
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                message: format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            });
        }
        let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
        let ckk = c * k * k;
        let plane = ho * wo;
        let x = self.data(input);
        let kw = self.data(kernels);
        let bv = self.data(bias);
        let mut out = vec![T::zero(); b * o * plane];
        let mut cols = vec![T::zero(); ckk * plane];
        for n in 0..b {
            im2col(
                &x[n * c * h * w..(n + 1) * c * h * w],
                (c, h, w),
                k,
                pad,
                (ho, wo),
                &mut cols,
            );
            let dst = &mut out[n * o * plane..(n + 1) * o * plane];
            gemm(
                false,
                false,
                o,
                plane,
                ckk,
                T::one(),
                kw,
                &cols,
                T::zero(),
                dst,
            );
            for (ch, row) in dst.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[ch]);
            }
        }
        let shape = if batched {
            vec![b, o, ho, wo]
        } else {
            vec![o, ho, wo]
        };
        self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernels,
                bias,
                pad,
            },
        )
    }

    /// Max pooling over non-overlapping `block x block` windows (stride equal
    /// to the block). Extents must be divisible by the block.
    pub fn maxpool(&mut self, input: Var, block: usize) -> Result<Var> {
        let (b, c, h, w, batched) = spatial_dims("maxpool", self.shape(input))?;
        if block == 0 || h % block != 0 || w % block != 0 {
            return Err(TensorError::InvalidArgument {
                op: "maxpool",
                message: format!("spatial extent {h}x{w} not divisible by block {block}"),
            });
        }
        let (ho, wo) = (h / block, w / block);
        let x = self.data(input);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * block * w + ox * block;
                    for dy in 0..block {
                        for dx in 0..block {
                            let idx = base + (oy * block + dy) * w + ox * block + dx;
                            // strict comparison keeps the first maximum on ties
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = if batched {
            vec![b, c, ho, wo]
        } else {
            vec![c, ho, wo]
        };
        self.push(Tensor::new(shape, out)?, Op::MaxPool { input, argmax })
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        self.maxpool(input, 2)
    }

    /// Affine map `weights · input + bias` with `weights: [P, M]`. Batched
    /// inputs `[B, ...]` are flattened to `[B, M]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (rows, m, batched) = row_dims(self.shape(input));
        let p = match *self.shape(weights) {
            [p, mm] if mm == m => p,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "dense",
                    expected: format!("weights [P,{m}]"),
                    found: format!("{:?}", self.shape(weights)),
                })
            }
        };
        if self.shape(bias) != [p] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                expected: format!("bias [{p}]"),
                found: format!("{:?}", self.shape(bias)),
            });
        }
        let mut out = vec![T::zero(); rows * p];
        gemm(
            false,
            true,
            rows,
            p,
            m,
            T::one(),
            self.data(input),
            self.data(weights),
            T::zero(),
            &mut out,
        );
        let bv = self.data(bias);
        for row in out.chunks_mut(p) {
            row.iter_mut().zip(bv).for_each(|(v, &b)| *v += b);
        }
        let shape = if batched { vec![rows, p] } else { vec![p] };
        self.push(
            Tensor::new(shape, out)?,
            Op::Dense {
                input,
                weights,
                bias,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let data = self
            .data(input)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let out = Tensor::new(self.shape(input).to_vec(), data)?;
        self.push(out, Op::Relu(input))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Inference mode (or `rate == 0`) returns `input` unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                message: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.data(input).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .data(input)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let out = Tensor::new(self.shape(input).to_vec(), data)?;
        self.push(out, Op::Dropout { input, mask })
    }

    /// Softmax over the last axis, computed with the row maximum subtracted.
    pub fn softmax(&mut self, scores: Var) -> Result<Var> {
        let (rows, k, _) = row_dims(self.shape(scores));
        let s = self.data(scores);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let mut out = Vec::with_capacity(rows * k);
        for row in s.chunks(k) {
            out.extend(softmax_row(row));
        }
        let out = Tensor::new(self.shape(scores).to_vec(), out)?;
        self.push(out, Op::Softmax(scores))
    }

    /// Projects each row onto the unit sphere.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let (_, n, _) = row_dims(self.shape(input));
        let x = self.data(input);
        let mut out = Vec::with_capacity(x.len());
        let mut norms = Vec::new();
        for (sample, row) in x.chunks(n).enumerate() {
            let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if norm <= L2_EPS {
                return Err(TensorError::NearZeroNorm { sample, norm });
            }
            out.extend(row.iter().map(|&v| T::of(v.as_f64() / norm)));
            norms.push(T::of(norm));
        }
        let out = Tensor::new(self.shape(input).to_vec(), out)?;
        self.push(out, Op::L2Normalize { input, norms })
    }
}

/// Rows with norm at or below this cannot be normalized.
pub const L2_EPS: f64 = 1e-12;

/// Shift-invariant softmax of one row, accumulated in `f64`.
pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| T::of(e / total)).collect()
}

pub(super) fn softmax_backward<T: Scalar>(out: &Tensor<T>, g: &[T]) -> Vec<T> {
    let (_, k, _) = row_dims(out.shape());
    let mut dx = Vec::with_capacity(g.len());
    for (y, gr) in out.data().chunks(k).zip(g.chunks(k)) {
        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        dx.extend(
            y.iter()
                .zip(gr)
                .map(|(&yi, &gi)| T::of(yi.as_f64() * (gi.as_f64() - dot))),
        );
    }
    dx
}

pub(super) fn l2_normalize_backward<T: Scalar>(out: &Tensor<T>, norms: &[T], g: &[T]) -> Vec<T> {
    let (_, n, _) = row_dims(out.shape());
    let mut dx = Vec::with_capacity(g.len());
    for ((y, gr), &norm) in out.data().chunks(n).zip(g.chunks(n)).zip(norms) {
        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let norm = norm.as_f64();
        dx.extend(
            y.iter()
                .zip(gr)
                .map(|(&yi, &gi)| T::of((gi.as_f64() - yi.as_f64() * dot) / norm)),
        );
    }
    dx
}

pub(super) fn conv2d_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    kernels: Var,
    bias: Var,
    pad: usize,
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (b, c, h, w, _) = spatial_dims("conv2d", tape.shape(input)).expect("checked in forward");
    let kshape = tape.shape(kernels);
    let (o, k) = (kshape[0], kshape[2]);
    let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let (ckk, plane) = (c * k * k, ho * wo);
    let x = tape.data(input);
    let kw = tape.data(kernels);

    let need_input = tape.requires_grad(input);
    let need_kernels = tape.requires_grad(kernels);
    let mut dk = vec![T::zero(); o * ckk];
    let mut db = vec![T::zero(); o];
    let mut dx = if need_input {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut cols = vec![T::zero(); ckk * plane];
    let mut dcols = vec![T::zero(); if need_input { ckk * plane } else { 0 }];
    for n in 0..b {
        let gout = &g[n * o * plane..(n + 1) * o * plane];
        for (ch, row) in gout.chunks(plane).enumerate() {
            db[ch] += row.iter().copied().sum::<T>();
        }
        let img = &x[n * c * h * w..(n + 1) * c * h * w];
        if need_kernels {
            im2col(img, (c, h, w), k, pad, (ho, wo), &mut cols);
            gemm(
                false,
                true,
                o,
                ckk,
                plane,
                T::one(),
                gout,
                &cols,
                T::one(),
                &mut dk,
            );
        }
        if need_input {
            gemm(
                true,
                false,
                ckk,
                plane,
                o,
                T::one(),
                kw,
                gout,
                T::zero(),
                &mut dcols,
            );
            col2im(
                &dcols,
                (c, h, w),
                k,
                pad,
                (ho, wo),
                &mut dx[n * c * h * w..(n + 1) * c * h * w],
            );
        }
    }
    let mut grads = vec![(kernels, dk), (bias, db)];
    if need_input {
        grads.push((input, dx));
    }
    grads
}

pub(super) fn dense_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    weights: Var,
    bias: Var,
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (rows, m, _) = row_dims(tape.shape(input));
    let p = tape.shape(weights)[0];
    let mut dw = vec![T::zero(); p * m];
    gemm(
        true,
        false,
        p,
        m,
        rows,
        T::one(),
        g,
        tape.data(input),
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); p];
    for row in g.chunks(p) {
        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
    }
    let mut grads = vec![(weights, dw), (bias, db)];
    if tape.requires_grad(input) {
        let mut dx = vec![T::zero(); rows * m];
        gemm(
            false,
            false,
            rows,
            m,
            p,
            T::one(),
            g,
            tape.data(weights),
            T::zero(),
            &mut dx,
        );
        grads.push((input, dx));
    }
    grads
}
