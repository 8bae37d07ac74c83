//! Group normalization over `N, C, H, W` tensors.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-(sample, group) mean and reciprocal standard deviation.
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

fn check<T: Real>(x: &Tensor<T>, groups: usize, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<[usize; 4]> {
    let dims = x.dims4("group_norm")?;
    let c = dims[1];
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(
            "group_norm.groups",
            format!("{} channels are not divisible into {} groups", c, groups),
        ));
    }
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(
            "group_norm",
            format!(
                "scale {:?} / shift {:?} must both be [{}]",
                scale.shape(),
                shift.shape(),
                c
            ),
        ));
    }
    Ok(dims)
}

pub fn group_norm<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, GroupStats)> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::config("group_norm.eps", "must be positive"));
    }
    let [n, c, h, w] = check(x, groups, scale, shift)?;
    let per_group = c / groups;
    let plane = h * w;
    let len = per_group * plane;
    let mut stats = GroupStats {
        mean: Vec::with_capacity(n * groups),
        rstd: Vec::with_capacity(n * groups),
    };
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * per_group) * plane;
            let xs = &x.data()[start..start + len];
            let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / len as f64;
            let var = xs
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / len as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            for ci in 0..per_group {
                let ch = g * per_group + ci;
                let a = scale.data()[ch].as_f64();
                let sh = shift.data()[ch].as_f64();
                let off = ci * plane;
                for (o, v) in out[start + off..start + off + plane]
                    .iter_mut()
                    .zip(&xs[off..off + plane])
                {
                    *o = T::from_f64_lossy((v.as_f64() - mean) * rstd * a + sh);
                }
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, stats))
}

pub struct GroupNormGrads<T> {
    pub input: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

pub fn group_norm_backward<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    scale: &Tensor<T>,
    stats: &GroupStats,
    dy: &Tensor<T>,
) -> Result<GroupNormGrads<T>> {
    let [n, c, h, w] = x.dims4("group_norm_backward")?;
    if dy.shape() != x.shape() {
        return Err(Error::shape(
            "group_norm_backward",
            format!("upstream gradient {:?} vs input {:?}", dy.shape(), x.shape()),
        ));
    }
    let per_group = c / groups;
    let plane = h * w;
    let len = per_group * plane;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dscale = vec![0.0f64; c];
    let mut dshift = vec![0.0f64; c];
    let mut xhat = vec![0.0f64; len];
    let mut dxhat = vec![0.0f64; len];
    for b in 0..n {
        for g in 0..groups {
            let idx = b * groups + g;
            let (mean, rstd) = (stats.mean[idx], stats.rstd[idx]);
            let start = (b * c + g * per_group) * plane;
            let xs = &x.data()[start..start + len];
            let dys = &dy.data()[start..start + len];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in 0..per_group {
                let ch = g * per_group + ci;
                let a = scale.data()[ch].as_f64();
                for i in ci * plane..(ci + 1) * plane {
                    let xh = (xs[i].as_f64() - mean) * rstd;
                    let d = dys[i].as_f64();
                    xhat[i] = xh;
                    dxhat[i] = d * a;
                    dscale[ch] += d * xh;
                    dshift[ch] += d;
                    sum_dxhat += dxhat[i];
                    sum_dxhat_xhat += dxhat[i] * xh;
                }
            }
            let m = len as f64;
            for i in 0..len {
                dx[start + i] = T::from_f64_lossy(rstd / m * (m * dxhat[i] - sum_dxhat - xhat[i] * sum_dxhat_xhat));
            }
        }
    }
    Ok(GroupNormGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        scale: Tensor::new(vec![c], dscale.into_iter().map(T::from_f64_lossy).collect())?,
        shift: Tensor::new(vec![c], dshift.into_iter().map(T::from_f64_lossy).collect())?,
    })
}
