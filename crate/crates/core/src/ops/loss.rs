//! Numerically stable classification losses with mean reduction.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `softplus(x) = ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_target<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(
            "bce_with_logits",
            format!("logits {:?} vs target {:?}", logits.shape(), target.shape()),
        ));
    }
    if let Some(bad) = target.data().iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        return Err(Error::Domain {
            op: "bce_with_logits",
            detail: format!("target value {} outside [0, 1]", bad),
        });
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_target(logits, target)?;
    let n = logits.numel().max(1) as f64;
    Ok(logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&x, &t)| {
            let (x, t) = (x.as_f64(), t.as_f64());
            // x - x t + ln(1 + e^-x) = softplus(x) - x t
            softplus(x) - x * t
        })
        .sum::<f64>()
        / n)
}

pub fn bce_with_logits_backward<T: Real>(logits: &Tensor<T>, target: &Tensor<T>, upstream: f64) -> Tensor<T> {
    let n = logits.numel().max(1) as f64;
    let scale = upstream / n;
    let data = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&x, &t)| T::from_f64_lossy((sigmoid(x.as_f64()) - t.as_f64()) * scale))
        .collect();
    Tensor::new(logits.shape().to_vec(), data).expect("same shape as logits")
}

/// Channel softmax of an `N, C, H, W` tensor, computed in `f64`.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = logits.dims4("softmax")?;
    let plane = h * w;
    let mut out = vec![T::zero(); logits.numel()];
    let xs = logits.data();
    let mut buf = vec![0.0f64; c];
    for b in 0..n {
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                buf[ch] = xs[(b * c + ch) * plane + p].as_f64();
                max = max.max(buf[ch]);
            }
            let mut z = 0.0;
            for v in buf.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for ch in 0..c {
                out[(b * c + ch) * plane + p] = T::from_f64_lossy(buf[ch] / z);
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

fn check_classes<T: Real>(logits: &Tensor<T>, classes: &[usize]) -> Result<[usize; 4]> {
    let dims = logits.dims4("softmax_cross_entropy")?;
    let [n, c, h, w] = dims;
    if classes.len() != n * h * w {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} targets for {} pixels", classes.len(), n * h * w),
        ));
    }
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(Error::Domain {
            op: "softmax_cross_entropy",
            detail: format!("class index {} outside 0..{}", bad, c),
        });
    }
    Ok(dims)
}

/// Mean multi-class cross-entropy; `classes` holds one index per `(n, y, x)`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, classes: &[usize]) -> Result<f64> {
    let [n, c, h, w] = check_classes(logits, classes)?;
    let plane = h * w;
    let xs = logits.data();
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| xs[(b * c + ch) * plane + p].as_f64();
            let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|ch| (at(ch) - max).exp()).sum::<f64>().ln();
            total += lse - at(classes[b * plane + p]);
        }
    }
    Ok(total / (n * plane).max(1) as f64)
}

pub fn softmax_cross_entropy_backward<T: Real>(
    logits: &Tensor<T>,
    classes: &[usize],
    upstream: f64,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = check_classes(logits, classes)?;
    let plane = h * w;
    let mut grad = softmax_channels(logits)?;
    let scale = upstream / (n * plane).max(1) as f64;
    let g = grad.data_mut();
    for b in 0..n {
        for p in 0..plane {
            for ch in 0..c {
                let i = (b * c + ch) * plane + p;
                let hot = if classes[b * plane + p] == ch { 1.0 } else { 0.0 };
                g[i] = T::from_f64_lossy((g[i].as_f64() - hot) * scale);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_point_is_ln2() {
        let l = bce_with_logits(&Tensor::<f64>::scalar(0.0), &Tensor::scalar(0.5)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_is_stable() {
        let l = bce_with_logits(&Tensor::<f32>::scalar(20.0), &Tensor::scalar(1.0)).unwrap();
        let expect = (-20.0f64).exp().ln_1p();
        assert!((l - expect).abs() < 1e-15, "{l}");
        assert!((l - 2.06e-9).abs() < 1e-11);
        for x in [1e4f64, -1e4] {
            let l = bce_with_logits(&Tensor::<f64>::scalar(x), &Tensor::scalar(0.3)).unwrap();
            assert!(l.is_finite());
        }
    }

    #[test]
    fn target_out_of_range() {
        let err = bce_with_logits(&Tensor::<f32>::scalar(0.0), &Tensor::scalar(1.5)).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
    }

    #[test]
    fn two_class_softmax_matches_bce() {
        // softmax over [0, x] is sigmoid(x) on the second channel
        let logits = Tensor::new(vec![1, 2, 1, 3], vec![0.0f64, 0.0, 0.0, -1.5, 0.3, 4.0]).unwrap();
        let ce = softmax_cross_entropy(&logits, &[1, 0, 1]).unwrap();
        let bin = Tensor::new(vec![3], vec![-1.5, 0.3, 4.0]).unwrap();
        let bce = bce_with_logits(&bin, &Tensor::new(vec![3], vec![1.0, 0.0, 1.0]).unwrap()).unwrap();
        assert!((ce - bce).abs() < 1e-12);
    }
}
