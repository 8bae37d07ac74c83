use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat input index that produced it. Ties resolve to
/// the first element in row-major window order.
pub fn maxpool2x2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = x.dims4("maxpool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial size {}x{} must be even in both dimensions", h, w),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let xs = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[i] > xs[best] {
                        best = i;
                    }
                }
                out.push(xs[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2x2_backward<T: Real>(input_shape: &[usize], argmax: &[u32], dy: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.numel() != argmax.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!("{} upstream values for {} windows", dy.numel(), argmax.len()),
        ));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i as usize] = d[i as usize] + g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_maximum() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let x = Tensor::<f64>::full(vec![1, 2, 4, 4], 0.5);
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        let dx = maxpool2x2_backward(x.shape(), &idx, &Tensor::full(vec![1, 2, 2, 2], 1.0)).unwrap();
        for plane in dx.data().chunks(16) {
            for (i, &v) in plane.iter().enumerate() {
                let (r, c) = (i / 4, i % 4);
                let expect = if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(v, expect);
            }
        }
    }

    #[test]
    fn odd_dims_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 3, 4]);
        assert!(matches!(maxpool2x2(&x), Err(Error::Shape { .. })));
    }
}
