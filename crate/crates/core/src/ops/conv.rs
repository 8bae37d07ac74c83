//! Convolution and transposed convolution kernels (im2col + GEMM).
//!
//! Weights follow the usual layouts: `[Cout, Cin, kh, kw]` for `conv2d` and
//! `[Cin, Cout, kh, kw]` for `conv_transpose2d`, so the same kernel tensor
//! drives a convolution and its adjoint.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real, Tensor};

/// Spatial geometry of one strided window pass over a `h x w` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn new(op: &'static str, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape(op, "stride must be at least 1"));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw {
            return Err(Error::shape(
                op,
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, span_h, span_w),
            ));
        }
        if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(Error::shape(
                op,
                format!(
                    "input {}x{} with kernel {}x{}, padding {} and stride {} does not tile evenly",
                    h, w, kh, kw, pad, stride
                ),
            ));
        }
        Ok(Window {
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (span_h - kh) / stride + 1,
            ow: (span_w - kw) / stride + 1,
        })
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// True when im2col is the identity and the input can be used directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[c, h, w]` sample into `[c*kh*kw, oh*ow]` columns.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, g: &Window, cols: &mut [T]) {
    let plane = g.out_plane();
    debug_assert_eq!(cols.len(), c * g.kh * g.kw * plane);
    for ch in 0..c {
        let src = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[c*kh*kw, oh*ow]` columns back onto a `[c, h, w]` sample, accumulating.
pub(crate) fn col2im<T: Real>(cols: &[T], c: usize, g: &Window, x: &mut [T]) {
    let plane = g.out_plane();
    for ch in 0..c {
        let dst = &mut x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Real>(op: &'static str, bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::shape(
            op,
            format!(
                "bias shape {:?} does not match {} output channels",
                bias.shape(),
                channels
            ),
        ));
    }
    Ok(())
}

/// Validated geometry of a `conv2d` call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub win: Window,
}

impl ConvGeom {
    pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = x.dims4("conv2d")?;
        let [cout, wcin, kh, kw] = weight.dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {} channels (dim 1) but kernel expects {} (dim 1 of {:?})",
                    cin,
                    wcin,
                    weight.shape()
                ),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel extents must be odd, got {}x{}", kh, kw),
            ));
        }
        let win = Window::new("conv2d", h, w, kh, kw, stride, pad)?;
        Ok(ConvGeom { n, cin, cout, win })
    }

    /// Geometry of a transposed convolution, expressed as the forward
    /// convolution it is the adjoint of (`win.h, win.w` is the output plane).
    pub fn conv_transpose2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = x.dims4("conv_transpose2d")?;
        let [wcin, cout, kh, kw] = weight.dims4("conv_transpose2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv_transpose2d",
                format!(
                    "input has {} channels (dim 1) but kernel expects {} (dim 0 of {:?})",
                    cin,
                    wcin,
                    weight.shape()
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv_transpose2d", "stride must be at least 1"));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if h == 0 || w == 0 || full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape(
                "conv_transpose2d",
                format!(
                    "input {}x{} with kernel {}x{}, stride {} and padding {} has empty output",
                    h, w, kh, kw, stride, pad
                ),
            ));
        }
        let win = Window::new(
            "conv_transpose2d",
            full_h - 2 * pad,
            full_w - 2 * pad,
            kh,
            kw,
            stride,
            pad,
        )?;
        debug_assert_eq!((win.oh, win.ow), (h, w));
        Ok(ConvGeom { n, cin, cout, win })
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Real>(dy: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut db = vec![0.0f64; c];
    for b in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let base = (b * c + ch) * plane;
            *acc += dy[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    db.into_iter().map(T::from_f64_lossy).collect()
}

/// Sums per-sample partial results in sample order so the reduction does not
/// depend on how samples were scheduled.
fn ordered_sum<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a = *a + v;
        }
    }
    acc
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::conv2d(x, weight, stride, pad)?;
    check_bias("conv2d", bias, g.cout)?;
    let win = g.win;
    let k = g.cin * win.kh * win.kw;
    let in_sample = g.cin * win.h * win.w;
    let plane = win.out_plane();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    out.par_chunks_mut(g.cout * plane).enumerate().for_each(|(b, o)| {
        let xs = &x.data()[b * in_sample..(b + 1) * in_sample];
        if win.is_pointwise() {
            gemm(Mat::new(weight.data(), g.cout, k), Mat::new(xs, k, plane), T::zero(), o);
        } else {
            let mut cols = vec![T::zero(); k * plane];
            im2col(xs, g.cin, &win, &mut cols);
            gemm(
                Mat::new(weight.data(), g.cout, k),
                Mat::new(&cols, k, plane),
                T::zero(),
                o,
            );
        }
        add_bias(o, bias.data(), plane);
    });
    Tensor::new(vec![g.n, g.cout, win.oh, win.ow], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::conv2d(x, weight, stride, pad)?;
    let win = g.win;
    let k = g.cin * win.kh * win.kw;
    let in_sample = g.cin * win.h * win.w;
    let plane = win.out_plane();
    if dy.shape() != [g.n, g.cout, win.oh, win.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient has shape {:?}", dy.shape()),
        ));
    }
    let mut dx = if need_input {
        vec![T::zero(); x.numel()]
    } else {
        Vec::new()
    };
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|b| {
            let xs = &x.data()[b * in_sample..(b + 1) * in_sample];
            let dys = &dy.data()[b * g.cout * plane..(b + 1) * g.cout * plane];
            let cols_owned;
            let cols: &[T] = if win.is_pointwise() {
                xs
            } else {
                let mut c = vec![T::zero(); k * plane];
                im2col(xs, g.cin, &win, &mut c);
                cols_owned = c;
                &cols_owned
            };
            let mut dw = vec![T::zero(); g.cout * k];
            gemm(Mat::new(dys, g.cout, plane), Mat::t(cols, plane, k), T::zero(), &mut dw);
            let dxs = need_input.then(|| {
                let mut dcols = vec![T::zero(); k * plane];
                gemm(
                    Mat::t(weight.data(), k, g.cout),
                    Mat::new(dys, g.cout, plane),
                    T::zero(),
                    &mut dcols,
                );
                if win.is_pointwise() {
                    dcols
                } else {
                    let mut d = vec![T::zero(); in_sample];
                    col2im(&dcols, g.cin, &win, &mut d);
                    d
                }
            });
            (dw, dxs)
        })
        .collect();
    let mut dw_parts = Vec::with_capacity(g.n);
    for (b, (dw, dxs)) in per_sample.into_iter().enumerate() {
        dw_parts.push(dw);
        if let Some(d) = dxs {
            dx[b * in_sample..(b + 1) * in_sample].copy_from_slice(&d);
        }
    }
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(x.shape().to_vec(), dx)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape().to_vec(), ordered_sum(dw_parts, g.cout * k))?,
        bias: Tensor::new(vec![g.cout], bias_grad(dy.data(), g.n, g.cout, plane))?,
    })
}

pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::conv_transpose2d(x, weight, stride, pad)?;
    check_bias("conv_transpose2d", bias, g.cout)?;
    let win = g.win;
    let k = g.cout * win.kh * win.kw;
    let in_plane = win.out_plane();
    let out_plane = win.h * win.w;
    let mut out = vec![T::zero(); g.n * g.cout * out_plane];
    out.par_chunks_mut(g.cout * out_plane).enumerate().for_each(|(b, o)| {
        let xs = &x.data()[b * g.cin * in_plane..(b + 1) * g.cin * in_plane];
        let mut cols = vec![T::zero(); k * in_plane];
        gemm(
            Mat::t(weight.data(), k, g.cin),
            Mat::new(xs, g.cin, in_plane),
            T::zero(),
            &mut cols,
        );
        col2im(&cols, g.cout, &win, o);
        add_bias(o, bias.data(), out_plane);
    });
    Tensor::new(vec![g.n, g.cout, win.h, win.w], out)
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::conv_transpose2d(x, weight, stride, pad)?;
    let win = g.win;
    let k = g.cout * win.kh * win.kw;
    let in_plane = win.out_plane();
    let out_plane = win.h * win.w;
    if dy.shape() != [g.n, g.cout, win.h, win.w] {
        return Err(Error::shape(
            "conv_transpose2d_backward",
            format!("upstream gradient has shape {:?}", dy.shape()),
        ));
    }
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|b| {
            let xs = &x.data()[b * g.cin * in_plane..(b + 1) * g.cin * in_plane];
            let dys = &dy.data()[b * g.cout * out_plane..(b + 1) * g.cout * out_plane];
            let mut cols = vec![T::zero(); k * in_plane];
            im2col(dys, g.cout, &win, &mut cols);
            let mut dw = vec![T::zero(); g.cin * k];
            gemm(
                Mat::new(xs, g.cin, in_plane),
                Mat::t(&cols, in_plane, k),
                T::zero(),
                &mut dw,
            );
            let dxs = need_input.then(|| {
                let mut d = vec![T::zero(); g.cin * in_plane];
                gemm(
                    Mat::new(weight.data(), g.cin, k),
                    Mat::new(&cols, k, in_plane),
                    T::zero(),
                    &mut d,
                );
                d
            });
            (dw, dxs)
        })
        .collect();
    let mut dx = if need_input {
        Vec::with_capacity(x.numel())
    } else {
        Vec::new()
    };
    let mut dw_parts = Vec::with_capacity(g.n);
    for (dw, dxs) in per_sample {
        dw_parts.push(dw);
        if let Some(d) = dxs {
            dx.extend_from_slice(&d);
        }
    }
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(x.shape().to_vec(), dx)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape().to_vec(), ordered_sum(dw_parts, g.cin * k))?,
        bias: Tensor::new(vec![g.cout], bias_grad(dy.data(), g.n, g.cout, out_plane))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims4("t").unwrap();
        let [cout, _, kh, kw] = w.dims4("t").unwrap();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn hand_computed_3x3() {
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(vec![1]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 45.0);
        assert_eq!(y.data()[0], 12.0);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(vec![2, 1, 5, 5], 1.0, &mut rng);
        let w = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(vec![1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(s, p, h) in &[(1usize, 1usize, 8usize), (2, 1, 7), (1, 0, 6)] {
            let x = Tensor::<f64>::randn(vec![2, 3, h, h], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(vec![4, 3, 3, 3], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(vec![4], 1.0, &mut rng);
            let fast = conv2d(&x, &w, &b, s, p).unwrap();
            let slow = naive_conv(&x, &w, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn transposed_stamps_disjointly() {
        let x = Tensor::<f64>::full(vec![1, 1, 2, 2], 1.0);
        let w = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let y = conv_transpose2d(&x, &w, &Tensor::zeros(vec![1]), 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![3, 5, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(vec![3]), 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2 channels") && msg.contains("expects 5"), "{msg}");
        let w = Tensor::<f32>::zeros(vec![3, 2, 3, 3]);
        assert!(conv2d(&x, &w, &Tensor::zeros(vec![4]), 1, 1).is_err());
        assert!(conv2d(&x, &w, &Tensor::zeros(vec![3]), 2, 0).is_err());
    }
}
