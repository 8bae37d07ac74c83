//! Sliding-window tiling with reflect padding and center-crop reassembly.
//!
//! Patch `(j, i)` has its top-left corner at `(j * stride - off,
//! i * stride - off)` with `off = (patch - stride) / 2` and owns the
//! central `stride x stride` window `[j * stride, (j + 1) * stride)`.
//! `ceil(H / stride)` rows of patches therefore cover every pixel, and each
//! pixel is owned by exactly one patch. Pixels outside the image are
//! mirrored back in.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mirror index into `0..n` (edge pixel not repeated); folds repeatedly for
/// offsets larger than the image.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn split_dims<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::shape(op, format!("need at least 2 dims, got {:?}", s)));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((t.numel() / (h * w).max(1), h, w))
}

/// Reflect-pads the last two dims at the bottom/right to the next multiple
/// of `multiple`.
pub fn pad_to_multiple<T: Real>(t: &Tensor<T>, multiple: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = split_dims(t, "pad_to_multiple")?;
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let mut shape = t.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = ph;
    shape[nd - 1] = pw;
    let d = t.data();
    let mut out = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        for y in 0..ph {
            let sy = reflect_index(y as isize, h);
            for x in 0..pw {
                out.push(d[(p * h + sy) * w + reflect_index(x as isize, w)]);
            }
        }
    }
    Tensor::new(shape, out)
}

/// Keeps the top-left `h x w` window of the last two dims.
pub fn crop<T: Real>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (planes, th, tw) = split_dims(t, "crop")?;
    if h > th || w > tw {
        return Err(Error::shape(
            "crop",
            format!("cannot crop {}x{} out of {}x{}", h, w, th, tw),
        ));
    }
    let mut shape = t.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = h;
    shape[nd - 1] = w;
    let d = t.data();
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            let row = (p * th + y) * tw;
            out.extend_from_slice(&d[row..row + w]);
        }
    }
    Tensor::new(shape, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize, stride: usize) -> Result<Self> {
        if patch == 0 || patch % 16 != 0 {
            return Err(Error::config(
                "data.patch_size",
                format!("must be a positive multiple of 16, got {}", patch),
            ));
        }
        if stride == 0 || stride > patch || (patch - stride) % 2 != 0 {
            return Err(Error::config(
                "data.patch_stride",
                format!("must be in 1..={} with patch - stride even, got {}", patch, stride),
            ));
        }
        if height == 0 || width == 0 {
            return Err(Error::shape("patch_grid", "empty image"));
        }
        Ok(PatchGrid {
            height,
            width,
            patch,
            stride,
            rows: height.div_ceil(stride),
            cols: width.div_ceil(stride),
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offset(&self) -> usize {
        (self.patch - self.stride) / 2
    }

    /// Top-left corner of patch `(j, i)` in image coordinates.
    pub fn origin(&self, j: usize, i: usize) -> (isize, isize) {
        let off = self.offset() as isize;
        ((j * self.stride) as isize - off, (i * self.stride) as isize - off)
    }

    /// Patch index and in-patch coordinates of the patch owning `(y, x)`.
    pub fn owner(&self, y: usize, x: usize) -> (usize, usize, usize) {
        let (j, i) = (y / self.stride, x / self.stride);
        let off = self.offset();
        (j * self.cols + i, y % self.stride + off, x % self.stride + off)
    }

    fn check<T: Real>(&self, t: &Tensor<T>, op: &'static str) -> Result<usize> {
        match t.shape() {
            &[c, h, w] if (h, w) == (self.height, self.width) => Ok(c),
            s => Err(Error::shape(
                op,
                format!("expected [C, {}, {}], got {:?}", self.height, self.width, s),
            )),
        }
    }

    /// Cuts `[C, H, W]` into `[C, patch, patch]` tiles in row-major order.
    pub fn extract<T: Real>(&self, t: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let c = self.check(t, "patch_extract")?;
        let (h, w, p) = (self.height, self.width, self.patch);
        let d = t.data();
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.rows {
            for i in 0..self.cols {
                let (oy, ox) = self.origin(j, i);
                let mut data = Vec::with_capacity(c * p * p);
                for ch in 0..c {
                    for y in 0..p {
                        let sy = reflect_index(oy + y as isize, h);
                        for x in 0..p {
                            data.push(d[(ch * h + sy) * w + reflect_index(ox + x as isize, w)]);
                        }
                    }
                }
                out.push(Tensor::new(vec![c, p, p], data)?);
            }
        }
        Ok(out)
    }

    /// Inverse of [`extract`](Self::extract): every pixel is taken from its
    /// owning patch.
    pub fn reassemble<T: Real>(&self, patches: &[Tensor<T>]) -> Result<Tensor<T>> {
        if patches.len() != self.len() {
            return Err(Error::shape(
                "patch_reassemble",
                format!("expected {} patches, got {}", self.len(), patches.len()),
            ));
        }
        let c = match patches[0].shape() {
            &[c, a, b] if a == self.patch && b == self.patch => c,
            s => {
                return Err(Error::shape(
                    "patch_reassemble",
                    format!("patch shape {:?} is not [C,{p},{p}]", s, p = self.patch),
                ))
            }
        };
        if let Some(bad) = patches.iter().find(|t| t.shape() != patches[0].shape()) {
            return Err(Error::shape(
                "patch_reassemble",
                format!("patch shapes differ: {:?} vs {:?}", bad.shape(), patches[0].shape()),
            ));
        }
        let (h, w, p) = (self.height, self.width, self.patch);
        let mut out = vec![T::zero(); c * h * w];
        for y in 0..h {
            for x in 0..w {
                let (k, ly, lx) = self.owner(y, x);
                let src = patches[k].data();
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = src[(ch * p + ly) * p + lx];
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_folds() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 3)).collect();
        assert_eq!(got, vec![0, 1, 2, 1, 0, 1, 2, 1, 0, 1, 2, 1]);
    }

    #[test]
    fn pad_then_crop() {
        let t = Tensor::from_fn(vec![2, 5, 7], |i| i as f32);
        let p = pad_to_multiple(&t, 16).unwrap();
        assert_eq!(p.shape(), &[2, 16, 16]);
        assert_eq!(crop(&p, 5, 7).unwrap(), t);
    }

    #[test]
    fn bad_grids() {
        assert!(PatchGrid::new(64, 64, 100, 50).is_err());
        assert!(PatchGrid::new(64, 64, 64, 0).is_err());
        assert!(PatchGrid::new(64, 64, 64, 33).is_err());
    }
}
