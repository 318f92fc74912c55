//! Forward and backward kernels on raw tensors.
//!
//! Every reduction accumulates in a fixed sequential order, so results are
//! bitwise reproducible and the convolution matches a direct nested-loop
//! cross-correlation exactly.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// `c[m x n] += a[m x k] * b[k x n]`, summing each output over `k` in order.
///
/// Outputs are computed in register tiles; each tile element starts from `c`
/// and adds `a[i][kk] * b[kk][j]` for `kk = 0, 1, ...`, the same sequence a
/// naive triple loop performs.
pub fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let wide = n / 16 * 16;
    let narrow = n / 4 * 4;
    // Column panels outermost: one `k x NR` panel of `b` stays in cache
    // while every row block consumes it.
    for j0 in (0..wide).step_by(16) {
        rows::<T, 16>(m, k, n, a, b, c, j0);
    }
    for j0 in (wide..narrow).step_by(4) {
        rows::<T, 4>(m, k, n, a, b, c, j0);
    }
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        for j in narrow..n {
            let mut acc = c[r * n + j];
            for (kk, &av) in arow.iter().enumerate() {
                acc += av * b[kk * n + j];
            }
            c[r * n + j] = acc;
        }
    }
}

#[inline(always)]
fn rows<T: Scalar, const NR: usize>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], j0: usize) {
    let mut i = 0;
    while i + 8 <= m {
        tile::<T, 8, NR>(k, n, &a[i * k..(i + 8) * k], b, &mut c[i * n..(i + 8) * n], j0);
        i += 8;
    }
    while i + 4 <= m {
        tile::<T, 4, NR>(k, n, &a[i * k..(i + 4) * k], b, &mut c[i * n..(i + 4) * n], j0);
        i += 4;
    }
    while i < m {
        tile::<T, 1, NR>(k, n, &a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], j0);
        i += 1;
    }
}

#[inline(always)]
fn tile<T: Scalar, const MR: usize, const NR: usize>(k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], j0: usize) {
    let a: &[T] = &a[..MR * k];
    let mut acc = [[T::zero(); NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[r * n + j0..r * n + j0 + NR]);
    }
    for kk in 0..k {
        let brow: &[T; NR] = b[kk * n + j0..kk * n + j0 + NR].try_into().expect("NR columns");
        for (r, row) in acc.iter_mut().enumerate() {
            let av = a[r * k + kk];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[r * n + j0..r * n + j0 + NR].copy_from_slice(row);
    }
}

fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        if x.c != weight.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x,
                rhs: weight,
            });
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (kh, kw) = (weight.h, weight.w);
        if x.h + 2 * pad < kh || x.w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("zero-sized output: input {x}, kernel {weight}, pad {pad}"),
            ));
        }
        Ok(ConvGeometry {
            in_c: x.c,
            out_c: weight.n,
            kh,
            kw,
            stride,
            pad,
            h: x.h,
            w: x.w,
            oh: (x.h + 2 * pad - kh) / stride + 1,
            ow: (x.w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output columns `[lo, hi)` whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride).min(self.ow);
        let end = (self.w + self.pad).saturating_sub(kj); // first ox * stride at or past the right edge
        let hi = end.div_ceil(self.stride).clamp(lo, self.ow);
        (lo, hi)
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, unpadded: the input plane set already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let p = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = g.valid_cols(kj);
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, &v) in drow[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_acc<T: Scalar>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let p = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = g.valid_cols(kj);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kj - g.pad;
                    let srow = &src[oy * g.ow + lo..oy * g.ow + hi];
                    for (d, &v) in drow[first..].iter_mut().step_by(g.stride).zip(srow) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.out_c {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: weight.shape(),
                rhs: b.shape(),
            });
        }
    }
    let n = x.shape().n;
    let (kl, p) = (g.patch_len(), g.out_plane());
    let in_per = g.in_c * g.h * g.w;
    let out_per = g.out_c * p;
    let mut out = vec![T::zero(); n * out_per];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kl * p]
    };
    for s in 0..n {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut col);
            &col
        };
        let os = &mut out[s * out_per..(s + 1) * out_per];
        gemm_acc(g.out_c, kl, p, weight.data(), cols, os);
        if let Some(b) = bias {
            for (o, row) in os.chunks_exact_mut(p).enumerate() {
                let bv = b.data()[o];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_vec(Shape::new(n, g.out_c, g.oh, g.ow), out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Option<Tensor<T>>,
    pub dbias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (need_dx, need_dw, need_db) = need;
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, pad)?;
    let n = x.shape().n;
    let (kl, p) = (g.patch_len(), g.out_plane());
    let in_per = g.in_c * g.h * g.w;
    let out_per = g.out_c * p;

    let mut dx = need_dx.then(|| vec![T::zero(); n * in_per]);
    let mut wt = Vec::new();
    if need_dx {
        wt = vec![T::zero(); kl * g.out_c];
        transpose(g.out_c, kl, weight.data(), &mut wt);
    }
    let mut col = if need_dw && !g.is_pointwise() {
        vec![T::zero(); kl * p]
    } else {
        Vec::new()
    };
    // dW is accumulated transposed, as `col * dout^T`, so only `dout` needs transposing.
    let mut dwt = need_dw.then(|| vec![T::zero(); kl * g.out_c]);
    let mut ds_t = if need_dw {
        vec![T::zero(); p * g.out_c]
    } else {
        Vec::new()
    };
    let mut dcol = if need_dx { vec![T::zero(); kl * p] } else { Vec::new() };

    for s in 0..n {
        let ds = &dout.data()[s * out_per..(s + 1) * out_per];
        if let Some(dwt) = dwt.as_mut() {
            let xs = &x.data()[s * in_per..(s + 1) * in_per];
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(&g, xs, &mut col);
                &col
            };
            transpose(g.out_c, p, ds, &mut ds_t);
            gemm_acc(kl, p, g.out_c, cols, &ds_t, dwt);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            if g.is_pointwise() {
                gemm_acc(kl, g.out_c, p, &wt, ds, dxs);
            } else {
                dcol.fill(T::zero());
                gemm_acc(kl, g.out_c, p, &wt, ds, &mut dcol);
                col2im_acc(&g, &dcol, dxs);
            }
        }
    }

    let dbias = need_db.then(|| {
        let mut db = vec![T::zero(); g.out_c];
        for s in 0..n {
            let ds = &dout.data()[s * out_per..(s + 1) * out_per];
            for (o, row) in ds.chunks_exact(p).enumerate() {
                for &v in row {
                    db[o] += v;
                }
            }
        }
        Tensor::from_vec(Shape::new(g.out_c, 1, 1, 1), db).expect("bias shape")
    });

    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::from_vec(x.shape(), d).expect("dx shape")),
        dweight: dwt.map(|d| {
            let mut dw = vec![T::zero(); g.out_c * kl];
            transpose(kl, g.out_c, &d, &mut dw);
            Tensor::from_vec(weight.shape(), dw).expect("dw shape")
        }),
        dbias,
    })
}

fn check_window(op: &'static str, s: Shape, ph: usize, pw: usize) -> Result<()> {
    if ph == 0 || pw == 0 {
        return Err(Error::shape(op, "window must be positive"));
    }
    if !s.h.is_multiple_of(ph) || !s.w.is_multiple_of(pw) {
        return Err(Error::shape(
            op,
            format!("{}x{} is not divisible by window {ph}x{pw}", s.h, s.w),
        ));
    }
    Ok(())
}

/// Non-overlapping average pooling with stride equal to the window.
pub fn avg_pool2d_forward<T: Scalar>(x: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    check_window("avg_pool2d", s, ph, pw)?;
    let (oh, ow) = (s.h / ph, s.w / pw);
    let count = T::from_f64((ph * pw) as f64);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for plane in x.data().chunks_exact(s.plane()) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for y in oy * ph..(oy + 1) * ph {
                    for xx in ox * pw..(ox + 1) * pw {
                        acc += plane[y * s.w + xx];
                    }
                }
                out.push(acc / count);
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out)
}

pub fn avg_pool2d_backward<T: Scalar>(input: Shape, dout: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
    check_window("avg_pool2d", input, ph, pw)?;
    let count = T::from_f64((ph * pw) as f64);
    let scaled = dout.map(|v| v / count);
    upsample_nearest_forward(&scaled, ph, pw)
}

pub fn upsample_nearest_forward<T: Scalar>(x: &Tensor<T>, fh: usize, fw: usize) -> Result<Tensor<T>> {
    if fh == 0 || fw == 0 {
        return Err(Error::shape("upsample_nearest", "factors must be positive"));
    }
    let s = x.shape();
    let (oh, ow) = (s.h * fh, s.w * fw);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for plane in x.data().chunks_exact(s.plane()) {
        for y in 0..oh {
            let src = &plane[(y / fh) * s.w..(y / fh + 1) * s.w];
            for &v in src {
                for _ in 0..fw {
                    out.push(v);
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out)
}

/// Sums each `fh x fw` block of the upsampled gradient.
pub fn upsample_nearest_backward<T: Scalar>(dout: &Tensor<T>, fh: usize, fw: usize) -> Result<Tensor<T>> {
    let s = dout.shape();
    check_window("upsample_nearest backward", s, fh, fw)?;
    let (ih, iw) = (s.h / fh, s.w / fw);
    let mut out = Vec::with_capacity(s.n * s.c * ih * iw);
    for plane in dout.data().chunks_exact(s.plane()) {
        for iy in 0..ih {
            for ix in 0..iw {
                let mut acc = T::zero();
                for y in iy * fh..(iy + 1) * fh {
                    for x in ix * fw..(ix + 1) * fw {
                        acc += plane[y * s.w + x];
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, ih, iw), out)
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Per-pixel softmax cross-entropy. Returns the mean loss over counted
/// pixels, the softmax probabilities, and the counted pixel total.
pub fn softmax_cross_entropy_forward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    ignore: Option<u8>,
) -> Result<(T, Tensor<T>, usize)> {
    let s = logits.shape();
    let k = s.c;
    let plane = s.plane();
    if labels.len() != s.n * plane {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for logits {s}", labels.len()),
        ));
    }
    let mut probs = vec![T::zero(); s.numel()];
    // Compensated sum: finite-difference checks difference two nearly equal
    // losses, so the reduction's rounding must stay well below the signal.
    let (mut total, mut carry) = (0.0f64, 0.0f64);
    let mut count = 0usize;
    let data = logits.data();
    let mut z = vec![T::zero(); k];
    for n in 0..s.n {
        let base = n * k * plane;
        for p in 0..plane {
            let label = labels[n * plane + p];
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = data[base + c * plane + p];
            }
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for &zc in &z {
                sum += (zc - max).exp();
            }
            for (c, &zc) in z.iter().enumerate() {
                probs[base + c * plane + p] = (zc - max).exp() / sum;
            }
            if Some(label) == ignore {
                continue;
            }
            if label as usize >= k {
                return Err(Error::LabelOutOfRange {
                    label: label as usize,
                    n,
                    y: p / s.w,
                    x: p % s.w,
                    classes: k,
                });
            }
            let term = Scalar::to_f64(max + sum.ln() - z[label as usize]);
            let t = total + term;
            carry += if total.abs() >= term.abs() {
                (total - t) + term
            } else {
                (term - t) + total
            };
            total = t;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "softmax_cross_entropy: every pixel is ignored".into(),
        ));
    }
    let loss = T::from_f64((total + carry) / count as f64);
    Ok((loss, Tensor::from_vec(s, probs)?, count))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[u8],
    ignore: Option<u8>,
    count: usize,
    dloss: T,
) -> Tensor<T> {
    let s = probs.shape();
    let plane = s.plane();
    let scale = dloss / T::from_f64(count as f64);
    let mut grad = probs.clone();
    let g = grad.data_mut();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let label = labels[n * plane + p];
            if Some(label) == ignore {
                for c in 0..s.c {
                    g[base + c * plane + p] = T::zero();
                }
                continue;
            }
            for c in 0..s.c {
                let i = base + c * plane + p;
                let onehot = if c == label as usize { T::one() } else { T::zero() };
                g[i] = (g[i] - onehot) * scale;
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_including_ragged_rows() {
        let (m, k, n) = (6, 5, 300);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_acc(m, k, n, &a, &b, &mut c);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                assert_eq!(c[i * n + j], acc);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_empty_output() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros([2, 2, 3, 3]);
        let err = conv2d_forward(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("1x3x4x4") && err.contains("2x2x3x3"), "{err}");
        let x = Tensor::<f32>::zeros([1, 2, 1, 1]);
        assert!(conv2d_forward(&x, &w, None, 1, 0).is_err());
    }

    #[test]
    fn strided_conv_output_dims() {
        let x = Tensor::<f32>::zeros([2, 3, 9, 8]);
        let w = Tensor::<f32>::zeros([5, 3, 3, 3]);
        let y = conv2d_forward(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 5, 5, 4));
    }

    #[test]
    fn pool_rejects_non_dividing_window() {
        let x = Tensor::<f32>::zeros([1, 1, 6, 6]);
        assert!(avg_pool2d_forward(&x, 4, 4).is_err());
        assert!(avg_pool2d_forward(&x, 3, 2).is_ok());
    }

    #[test]
    fn ce_rejects_out_of_range_and_all_ignored() {
        let logits = Tensor::<f64>::zeros([1, 3, 2, 2]);
        let err = softmax_cross_entropy_forward(&logits, &[0, 1, 2, 3], None).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOutOfRange {
                label: 3,
                y: 1,
                x: 1,
                ..
            }
        ));
        assert!(softmax_cross_entropy_forward(&logits, &[7; 4], Some(7)).is_err());
        let (loss, _, count) = softmax_cross_entropy_forward(&logits, &[0, 7, 2, 1], Some(7)).unwrap();
        assert_eq!(count, 3);
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }
}
