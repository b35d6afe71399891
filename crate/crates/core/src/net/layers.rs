//! Layer kernels: forward and backward passes over batched tensors.
//!
//! Convolution goes through an explicit patch-gather (im2col) matrix
//! multiply. Batches are processed sample-parallel; parameter gradients
//! are accumulated per fixed-size sample chunk and folded in chunk order,
//! so the result is bit-identical for any worker count.

use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::Rng;
use crate::tensor::{Scalar, TensorBase};

/// Samples per gradient-accumulation chunk. Fixed so the reduction order
/// never depends on the thread pool.
const GRAD_CHUNK: usize = 8;

pub(crate) struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv expects (n, c, h, w), got {input_shape:?}"
            )));
        }
        let (in_c, in_h, in_w) = (input_shape[1], input_shape[2], input_shape[3]);
        let padded_h = in_h + 2 * pad;
        let padded_w = in_w + 2 * pad;
        if padded_h < kernel || padded_w < kernel {
            return Err(Error::Shape("conv kernel larger than padded input".into()));
        }
        Ok(Self {
            in_c,
            in_h,
            in_w,
            filters,
            kernel,
            stride,
            pad,
            out_h: (padded_h - kernel) / stride + 1,
            out_w: (padded_w - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Gather conv patches of one sample into a (c*k*k, oh*ow) matrix.
fn im2col<T: Scalar>(geo: &ConvGeometry, sample: &[T], col: &mut [T]) {
    let k = geo.kernel;
    let cols = geo.col_cols();
    for c in 0..geo.in_c {
        let plane = &sample[c * geo.in_h * geo.in_w..(c + 1) * geo.in_h * geo.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out_row = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    for ox in 0..geo.out_w {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        out_row[oy * geo.out_w + ox] = if iy >= 0
                            && iy < geo.in_h as isize
                            && ix >= 0
                            && ix < geo.in_w as isize
                        {
                            plane[iy as usize * geo.in_w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back into one input-sample gradient.
fn col2im<T: Scalar>(geo: &ConvGeometry, col: &[T], sample_grad: &mut [T]) {
    let k = geo.kernel;
    let cols = geo.col_cols();
    for c in 0..geo.in_c {
        let plane = &mut sample_grad[c * geo.in_h * geo.in_w..(c + 1) * geo.in_h * geo.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.in_h as isize {
                        continue;
                    }
                    for ox in 0..geo.out_w {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix < 0 || ix >= geo.in_w as isize {
                            continue;
                        }
                        plane[iy as usize * geo.in_w + ix as usize] += src_row[oy * geo.out_w + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(
    input: &TensorBase<T>,
    weight: &TensorBase<T>,
    bias: &TensorBase<T>,
    geo: &ConvGeometry,
) -> TensorBase<T> {
    let n = input.shape()[0];
    let sample_in = geo.in_c * geo.in_h * geo.in_w;
    let sample_out = geo.filters * geo.col_cols();
    let rows = geo.col_rows();
    let cols = geo.col_cols();
    let w = weight.data();
    let b = bias.data();
    let input_data = input.data();
    let mut out = vec![T::zero(); n * sample_out];
    parallel::for_each_chunk_mut(&mut out, sample_out, |i, out_sample| {
        let mut col = vec![T::zero(); rows * cols];
        im2col(geo, &input_data[i * sample_in..(i + 1) * sample_in], &mut col);
        for f in 0..geo.filters {
            let out_row = &mut out_sample[f * cols..(f + 1) * cols];
            out_row.iter_mut().for_each(|v| *v = b[f]);
            let w_row = &w[f * rows..(f + 1) * rows];
            for (r, &wv) in w_row.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                let col_row = &col[r * cols..(r + 1) * cols];
                for (o, &cv) in out_row.iter_mut().zip(col_row) {
                    *o += wv * cv;
                }
            }
        }
    });
    TensorBase::from_vec_unchecked(vec![n, geo.filters, geo.out_h, geo.out_w], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: TensorBase<T>,
    pub weight: TensorBase<T>,
    pub bias: TensorBase<T>,
}

pub(crate) fn conv_backward<T: Scalar>(
    input: &TensorBase<T>,
    weight: &TensorBase<T>,
    geo: &ConvGeometry,
    grad_out: &TensorBase<T>,
) -> ConvGrads<T> {
    let n = input.shape()[0];
    let sample_in = geo.in_c * geo.in_h * geo.in_w;
    let cols = geo.col_cols();
    let rows = geo.col_rows();
    let sample_out = geo.filters * cols;
    let w = weight.data();
    let input_data = input.data();
    let grad_data = grad_out.data();

    // input gradient: per-sample, disjoint writes
    let mut grad_in = vec![T::zero(); n * sample_in];
    parallel::for_each_chunk_mut(&mut grad_in, sample_in, |i, gi| {
        let gout = &grad_data[i * sample_out..(i + 1) * sample_out];
        let mut dcol = vec![T::zero(); rows * cols];
        for f in 0..geo.filters {
            let g_row = &gout[f * cols..(f + 1) * cols];
            let w_row = &w[f * rows..(f + 1) * rows];
            for (r, &wv) in w_row.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                let d_row = &mut dcol[r * cols..(r + 1) * cols];
                for (d, &g) in d_row.iter_mut().zip(g_row) {
                    *d += wv * g;
                }
            }
        }
        col2im(geo, &dcol, gi);
    });

    // parameter gradients: chunked partial sums folded in fixed order
    let wlen = weight.len();
    let partial = parallel::fold_chunked(
        n,
        GRAD_CHUNK,
        |range| {
            let mut dw = vec![T::zero(); wlen];
            let mut db = vec![T::zero(); geo.filters];
            let mut col = vec![T::zero(); rows * cols];
            for i in range {
                im2col(geo, &input_data[i * sample_in..(i + 1) * sample_in], &mut col);
                let gout = &grad_data[i * sample_out..(i + 1) * sample_out];
                for f in 0..geo.filters {
                    let g_row = &gout[f * cols..(f + 1) * cols];
                    db[f] += g_row.iter().copied().sum::<T>();
                    let dw_row = &mut dw[f * rows..(f + 1) * rows];
                    for (r, dw_slot) in dw_row.iter_mut().enumerate() {
                        let col_row = &col[r * cols..(r + 1) * cols];
                        let mut acc = T::zero();
                        for (&g, &c) in g_row.iter().zip(col_row) {
                            acc += g * c;
                        }
                        *dw_slot += acc;
                    }
                }
            }
            (dw, db)
        },
        |(mut aw, mut ab), (bw, bb)| {
            aw.iter_mut().zip(&bw).for_each(|(a, b)| *a += *b);
            ab.iter_mut().zip(&bb).for_each(|(a, b)| *a += *b);
            (aw, ab)
        },
    )
    .unwrap_or_else(|| (vec![T::zero(); wlen], vec![T::zero(); geo.filters]));

    ConvGrads {
        input: TensorBase::from_vec_unchecked(input.shape().to_vec(), grad_in),
        weight: TensorBase::from_vec_unchecked(weight.shape().to_vec(), partial.0),
        bias: TensorBase::from_vec_unchecked(vec![geo.filters], partial.1),
    }
}

pub(crate) fn relu_forward<T: Scalar>(input: &TensorBase<T>) -> TensorBase<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Scalar>(
    input: &TensorBase<T>,
    grad_out: &TensorBase<T>,
) -> TensorBase<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    TensorBase::from_vec_unchecked(input.shape().to_vec(), data)
}

pub(crate) fn maxpool_forward<T: Scalar>(
    input: &TensorBase<T>,
    window: usize,
    stride: usize,
) -> Result<(TensorBase<T>, Vec<u32>)> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("maxpool expects (n, c, h, w), got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h < window || w < window {
        return Err(Error::Shape("pool window larger than input".into()));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let plane_in = h * w;
    let plane_out = oh * ow;
    let data = input.data();
    let mut out = vec![T::zero(); n * c * plane_out];
    let mut argmax = vec![0u32; n * c * plane_out];
    // channel-planes are independent; iterate them in parallel
    let pairs: Vec<(T, u32)> = parallel::map_indexed(n * c * plane_out, |idx| {
        let pc = idx / plane_out;
        let rest = idx % plane_out;
        let (oy, ox) = (rest / ow, rest % ow);
        let plane = &data[pc * plane_in..(pc + 1) * plane_in];
        let mut best = T::neg_infinity();
        let mut best_i = 0u32;
        for ky in 0..window {
            let iy = oy * stride + ky;
            for kx in 0..window {
                let ix = ox * stride + kx;
                let v = plane[iy * w + ix];
                // first max wins: deterministic tie-breaking
                if v > best {
                    best = v;
                    best_i = (iy * w + ix) as u32;
                }
            }
        }
        (best, best_i)
    });
    for (i, (v, a)) in pairs.into_iter().enumerate() {
        out[i] = v;
        argmax[i] = a;
    }
    Ok((
        TensorBase::from_vec_unchecked(vec![n, c, oh, ow], out),
        argmax,
    ))
}

pub(crate) fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &TensorBase<T>,
) -> TensorBase<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let plane_in = h * w;
    let plane_out = grad_out.shape()[2] * grad_out.shape()[3];
    let gout = grad_out.data();
    let mut grad_in = vec![T::zero(); input_shape.iter().product()];
    parallel::for_each_chunk_mut(&mut grad_in, plane_in, |pc, gi| {
        for o in 0..plane_out {
            let idx = pc * plane_out + o;
            gi[argmax[idx] as usize] += gout[idx];
        }
    });
    TensorBase::from_vec_unchecked(input_shape.to_vec(), grad_in)
}

/// Local response normalization across channels:
/// b_i = a_i * (k + alpha * sum_{j in window(i)} a_j^2)^(-beta).
pub(crate) fn lrn_forward<T: Scalar>(
    input: &TensorBase<T>,
    depth: usize,
    k: f32,
    alpha: f32,
    beta: f32,
) -> Result<(TensorBase<T>, Vec<T>)> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("lrn expects (n, c, h, w), got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let half = depth / 2;
    let (tk, ta, tb) = (T::from_f32(k), T::from_f32(alpha), T::from_f32(beta));
    let data = input.data();
    let mut out = vec![T::zero(); data.len()];
    let mut denom = vec![T::zero(); data.len()];
    for s in 0..n {
        for pos in 0..plane {
            for i in 0..c {
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(c - 1);
                let mut sum = T::zero();
                for j in lo..=hi {
                    let v = data[(s * c + j) * plane + pos];
                    sum += v * v;
                }
                let d = tk + ta * sum;
                let idx = (s * c + i) * plane + pos;
                denom[idx] = d;
                out[idx] = data[idx] * d.powf(-tb);
            }
        }
    }
    Ok((
        TensorBase::from_vec_unchecked(shape.to_vec(), out),
        denom,
    ))
}

pub(crate) fn lrn_backward<T: Scalar>(
    input: &TensorBase<T>,
    denom: &[T],
    depth: usize,
    alpha: f32,
    beta: f32,
    grad_out: &TensorBase<T>,
) -> TensorBase<T> {
    let shape = input.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let half = depth / 2;
    let (ta, tb) = (T::from_f32(alpha), T::from_f32(beta));
    let two = T::from_f32(2.0);
    let data = input.data();
    let gout = grad_out.data();
    let mut grad_in = vec![T::zero(); data.len()];
    for s in 0..n {
        for pos in 0..plane {
            for j in 0..c {
                let jdx = (s * c + j) * plane + pos;
                // direct term
                let mut g = gout[jdx] * denom[jdx].powf(-tb);
                // cross terms: every i whose window contains j
                let lo = j.saturating_sub(half);
                let hi = (j + half).min(c - 1);
                let mut cross = T::zero();
                for i in lo..=hi {
                    let idx = (s * c + i) * plane + pos;
                    cross += gout[idx] * data[idx] * denom[idx].powf(-tb - T::one());
                }
                g -= two * ta * tb * data[jdx] * cross;
                grad_in[jdx] = g;
            }
        }
    }
    TensorBase::from_vec_unchecked(shape.to_vec(), grad_in)
}

pub(crate) fn fc_forward<T: Scalar>(
    input_flat: &TensorBase<T>, // (n, in)
    weight: &TensorBase<T>,     // (units, in)
    bias: &TensorBase<T>,
) -> TensorBase<T> {
    let n = input_flat.shape()[0];
    let fin = input_flat.shape()[1];
    let units = weight.shape()[0];
    let x = input_flat.data();
    let w = weight.data();
    let b = bias.data();
    let mut out = vec![T::zero(); n * units];
    parallel::for_each_chunk_mut(&mut out, units, |i, row| {
        let xs = &x[i * fin..(i + 1) * fin];
        for (u, slot) in row.iter_mut().enumerate() {
            let wr = &w[u * fin..(u + 1) * fin];
            let mut acc = b[u];
            for (&xv, &wv) in xs.iter().zip(wr) {
                acc += xv * wv;
            }
            *slot = acc;
        }
    });
    TensorBase::from_vec_unchecked(vec![n, units], out)
}

pub(crate) struct FcGrads<T> {
    pub input: TensorBase<T>,
    pub weight: TensorBase<T>,
    pub bias: TensorBase<T>,
}

pub(crate) fn fc_backward<T: Scalar>(
    input_flat: &TensorBase<T>,
    weight: &TensorBase<T>,
    grad_out: &TensorBase<T>, // (n, units)
) -> FcGrads<T> {
    let n = input_flat.shape()[0];
    let fin = input_flat.shape()[1];
    let units = weight.shape()[0];
    let x = input_flat.data();
    let w = weight.data();
    let g = grad_out.data();

    let mut grad_in = vec![T::zero(); n * fin];
    parallel::for_each_chunk_mut(&mut grad_in, fin, |i, gi| {
        let gs = &g[i * units..(i + 1) * units];
        for (u, &gv) in gs.iter().enumerate() {
            if gv == T::zero() {
                continue;
            }
            let wr = &w[u * fin..(u + 1) * fin];
            for (slot, &wv) in gi.iter_mut().zip(wr) {
                *slot += gv * wv;
            }
        }
    });

    let partial = parallel::fold_chunked(
        n,
        GRAD_CHUNK,
        |range| {
            let mut dw = vec![T::zero(); units * fin];
            let mut db = vec![T::zero(); units];
            for i in range {
                let xs = &x[i * fin..(i + 1) * fin];
                let gs = &g[i * units..(i + 1) * units];
                for (u, &gv) in gs.iter().enumerate() {
                    db[u] += gv;
                    if gv == T::zero() {
                        continue;
                    }
                    let dw_row = &mut dw[u * fin..(u + 1) * fin];
                    for (slot, &xv) in dw_row.iter_mut().zip(xs) {
                        *slot += gv * xv;
                    }
                }
            }
            (dw, db)
        },
        |(mut aw, mut ab), (bw, bb)| {
            aw.iter_mut().zip(&bw).for_each(|(a, b)| *a += *b);
            ab.iter_mut().zip(&bb).for_each(|(a, b)| *a += *b);
            (aw, ab)
        },
    )
    .unwrap_or_else(|| (vec![T::zero(); units * fin], vec![T::zero(); units]));

    FcGrads {
        input: TensorBase::from_vec_unchecked(input_flat.shape().to_vec(), grad_in),
        weight: TensorBase::from_vec_unchecked(weight.shape().to_vec(), partial.0),
        bias: TensorBase::from_vec_unchecked(vec![units], partial.1),
    }
}

/// Inverted-scaling dropout: a kept unit is multiplied by 1/keep at train
/// time so evaluation needs no rescaling. The mask is drawn sequentially
/// from the rng for replayability.
pub(crate) fn dropout_mask<T: Scalar>(len: usize, keep: f32, rng: &mut Rng) -> Vec<T> {
    let scale = T::from_f32(1.0 / keep);
    (0..len)
        .map(|_| if rng.chance(keep) { scale } else { T::zero() })
        .collect()
}

pub(crate) fn apply_mask<T: Scalar>(input: &TensorBase<T>, mask: &[T]) -> TensorBase<T> {
    let data = input
        .data()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| v * m)
        .collect();
    TensorBase::from_vec_unchecked(input.shape().to_vec(), data)
}

/// Softmax over the trailing axis of a (n, k) tensor, max-subtracted.
pub(crate) fn softmax_rows<T: Scalar>(logits: &TensorBase<T>) -> TensorBase<T> {
    let n = logits.shape()[0];
    let k = logits.len() / n;
    let data = logits.data();
    let mut out = vec![T::zero(); data.len()];
    parallel::for_each_chunk_mut(&mut out, k, |i, row| {
        let xs = &data[i * k..(i + 1) * k];
        let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (slot, &x) in row.iter_mut().zip(xs) {
            let e = (x - max).exp();
            *slot = e;
            sum += e;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    });
    TensorBase::from_vec_unchecked(vec![n, k], out)
}

/// Softmax backward given the forward output:
/// dx_i = y_i * (g_i - sum_j g_j y_j).
pub(crate) fn softmax_backward<T: Scalar>(
    output: &TensorBase<T>,
    grad_out: &TensorBase<T>,
) -> TensorBase<T> {
    let n = output.shape()[0];
    let k = output.len() / n;
    let y = output.data();
    let g = grad_out.data();
    let mut grad_in = vec![T::zero(); y.len()];
    parallel::for_each_chunk_mut(&mut grad_in, k, |i, row| {
        let ys = &y[i * k..(i + 1) * k];
        let gs = &g[i * k..(i + 1) * k];
        let dot = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum::<T>();
        for ((slot, &yv), &gv) in row.iter_mut().zip(ys).zip(gs) {
            *slot = yv * (gv - dot);
        }
    });
    TensorBase::from_vec_unchecked(output.shape().to_vec(), grad_in)
}

/// Log-sum-exp over one row, for numerically stable cross-entropy.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = row.iter().map(|&v| (v - max).exp()).sum::<T>();
    max + sum.ln()
}
