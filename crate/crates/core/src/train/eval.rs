//! Per-iteration evaluation and whole-image inference.

use crate::data::metrics::{MetricsAccumulator, MetricsReport, DEFAULT_THRESHOLD};
use crate::data::patch::{crop, pad_to_multiple, PatchGrid};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::ops;
use crate::recurrent::{foreground_probability, RecurrentUNet};
use crate::tensor::{Real, Tensor};

use super::mask_classes;

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 8;

/// Sliding-window settings for inference on large images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tiling {
    pub patch: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    /// 1-based recurrence step.
    pub iteration: usize,
    pub report: MetricsReport,
    /// Mean over images of the per-pixel cross-entropy at this step.
    pub loss: f64,
}

fn stack_images<T: Real>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let casted: Vec<Tensor<T>> = images.iter().map(|t| t.cast::<T>()).collect();
    let refs: Vec<&Tensor<T>> = casted.iter().collect();
    Tensor::stack(&refs)
}

/// Splits `[B, ...]` into `B` tensors of shape `[1, ...]`.
fn unstack(t: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let b = t.shape()[0];
    let per = t.numel() / b.max(1);
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    t.data()
        .chunks(per)
        .map(|c| Tensor::new(shape.clone(), c.to_vec()).expect("chunk sized by shape"))
        .collect()
}

/// Logits `[1, K, H, W]` per image and step for equally sized images,
/// padded to the network's spatial multiple and cropped back.
fn predict_same_size<T: Real>(
    model: &RecurrentUNet<T>,
    images: &[&Tensor<f32>],
    iterations: usize,
) -> Result<Vec<Vec<Tensor<f32>>>> {
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
    let padded: Vec<Tensor<f32>> = images.iter().map(|t| pad_to_multiple(t, 16)).collect::<Result<_>>()?;
    let refs: Vec<&Tensor<f32>> = padded.iter().collect();
    let x = stack_images::<T>(&refs)?;
    let steps = model.predict(&x, iterations)?;
    let mut out = vec![Vec::with_capacity(iterations); images.len()];
    for logits in steps {
        let l = crop(&logits.cast::<f32>(), h, w)?;
        for (i, one) in unstack(&l).into_iter().enumerate() {
            out[i].push(one);
        }
    }
    Ok(out)
}

/// Logits `[1, K, H, W]` of one `[C, H, W]` image at each step, optionally
/// tiled into patches that are reassembled by center cropping.
pub fn predict_image<T: Real>(
    model: &RecurrentUNet<T>,
    image: &Tensor<f32>,
    iterations: usize,
    tiling: Option<Tiling>,
) -> Result<Vec<Tensor<f32>>> {
    let (h, w) = match image.shape() {
        &[_, h, w] => (h, w),
        s => return Err(Error::shape("predict_image", format!("expected [C,H,W], got {:?}", s))),
    };
    let Some(tl) = tiling else {
        return Ok(predict_same_size(model, &[image], iterations)?.remove(0));
    };
    let grid = PatchGrid::new(h, w, tl.patch, tl.stride)?;
    let patches = grid.extract(image)?;
    let mut per_step: Vec<Vec<Tensor<f32>>> = vec![Vec::with_capacity(grid.len()); iterations];
    for chunk in patches.chunks(EVAL_BATCH) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        for per_patch in predict_same_size(model, &refs, iterations)? {
            for (t, l) in per_patch.into_iter().enumerate() {
                let s = l.shape().to_vec();
                per_step[t].push(l.reshape(vec![s[1], s[2], s[3]])?);
            }
        }
    }
    per_step
        .into_iter()
        .map(|ps| {
            let full = grid.reassemble(&ps)?;
            let s = full.shape().to_vec();
            full.reshape(vec![1, s[0], s[1], s[2]])
        })
        .collect()
}

fn pixel_loss(logits: &Tensor<f32>, mask: &Tensor<f32>) -> Result<f64> {
    if logits.shape()[1] == 1 {
        ops::bce_with_logits(logits, mask)
    } else {
        ops::softmax_cross_entropy(logits, &mask_classes(mask))
    }
}

/// Metrics and loss at every recurrence step over `samples`. Confusion
/// counts are summed over all pixels before ratios are formed.
pub fn evaluate<T: Real>(
    model: &RecurrentUNet<T>,
    samples: &[Sample],
    iterations: usize,
    tiling: Option<Tiling>,
) -> Result<Vec<IterationMetrics>> {
    if samples.is_empty() {
        return Err(Error::config("data", "evaluation split is empty"));
    }
    let k = model.config.n_classes;
    let mut accs = vec![MetricsAccumulator::new(DEFAULT_THRESHOLD); iterations];
    let mut losses = vec![0.0f64; iterations];
    let mut score = |logits: &[Tensor<f32>], mask: &Tensor<f32>| -> Result<()> {
        let m4 = mask.clone().reshape({
            let s = mask.shape();
            vec![1, 1, s[1], s[2]]
        })?;
        for (t, l) in logits.iter().enumerate() {
            let p = foreground_probability(l, k)?;
            accs[t].add(p.data(), mask.data())?;
            losses[t] += pixel_loss(l, &m4)?;
        }
        Ok(())
    };
    match tiling {
        Some(_) => {
            for s in samples {
                let l = predict_image(model, &s.image, iterations, tiling)?;
                score(&l, &s.mask)?;
            }
        }
        None => {
            let mut i = 0;
            while i < samples.len() {
                let shape = samples[i].image.shape();
                let mut j = i + 1;
                while j < samples.len() && j - i < EVAL_BATCH && samples[j].image.shape() == shape {
                    j += 1;
                }
                let imgs: Vec<&Tensor<f32>> = samples[i..j].iter().map(|s| &s.image).collect();
                for (s, l) in samples[i..j].iter().zip(predict_same_size(model, &imgs, iterations)?) {
                    score(&l, &s.mask)?;
                }
                i = j;
            }
        }
    }
    let n = samples.len() as f64;
    Ok(accs
        .iter()
        .zip(&losses)
        .enumerate()
        .map(|(t, (a, &l))| IterationMetrics {
            iteration: t + 1,
            report: a.report(),
            loss: l / n,
        })
        .collect())
}
