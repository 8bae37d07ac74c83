//! Iteration-weighted loss, optimizer, training loop, evaluation and
//! checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod eval;
pub mod trainer;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use eval::{evaluate, predict_image, IterationMetrics, Tiling};
pub use trainer::{output_paths, train, EpochSummary, TrainConfig, TrainOutcome, METRICS_HEADER};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `alpha` raised to `k`, computed on the shortest decimal form of
/// `alpha` and rounded to `f64` once, so decimal inputs such as 0.4 give
/// the nearest double to the decimal power (0.16 rather than
/// 0.16000000000000003).
fn decimal_pow(alpha: f64, k: u32) -> f64 {
    let sci = format!("{:e}", alpha);
    let Some((mant, exp)) = sci.split_once('e') else {
        return alpha.powi(k as i32);
    };
    let Ok(exp) = exp.parse::<i64>() else {
        return alpha.powi(k as i32);
    };
    let frac = mant.split_once('.').map(|(_, f)| f.len()).unwrap_or(0) as i64;
    let Ok(digits) = mant.replace('.', "").parse::<u128>() else {
        return alpha.powi(k as i32);
    };
    match digits.checked_pow(k) {
        Some(m) => format!("{}e{}", m, (exp - frac) * k as i64)
            .parse()
            .unwrap_or_else(|_| alpha.powi(k as i32)),
        None => alpha.powi(k as i32),
    }
}

/// Per-iteration loss weights `w_t = alpha^(N - t)` for `t = 1..=N`.
pub fn iteration_weights(n: usize, alpha: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::config("model.iterations", "must be at least 1"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::config(
            "train.alpha",
            format!("must lie in (0, 1], got {}", alpha),
        ));
    }
    Ok((1..=n).map(|t| decimal_pow(alpha, (n - t) as u32)).collect())
}

/// Class index per pixel (`[N, H, W]` order) of a `[N, 1, H, W]` mask.
pub fn mask_classes<T: Real>(mask: &Tensor<T>) -> Vec<usize> {
    mask.data()
        .iter()
        .map(|&v| if v >= T::from_f64_lossy(0.5) { 1 } else { 0 })
        .collect()
}

/// Unweighted loss of one logit map: binary cross-entropy for one output
/// channel, softmax cross-entropy otherwise.
pub fn iteration_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &Tensor<T>,
    classes: Option<&[usize]>,
) -> Result<Var> {
    match classes {
        None => tape.bce_with_logits(logits, target),
        Some(c) => tape.softmax_cross_entropy(logits, c),
    }
}

/// `sum_t w_t * L_t`. Returns the total and the unweighted per-step
/// losses.
pub fn recurrent_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: &[Var],
    target: &Tensor<T>,
    weights: &[f64],
) -> Result<(Var, Vec<Var>)> {
    if logits.len() != weights.len() || logits.is_empty() {
        return Err(Error::shape(
            "recurrent_loss",
            format!("{} logit maps but {} weights", logits.len(), weights.len()),
        ));
    }
    let n_classes = tape.value(logits[0]).dims4("recurrent_loss")?[1];
    let classes = (n_classes > 1).then(|| mask_classes(target));
    let mut total: Option<Var> = None;
    let mut parts = Vec::with_capacity(logits.len());
    for (&l, &w) in logits.iter().zip(weights) {
        let li = iteration_loss(tape, l, target, classes.as_deref())?;
        parts.push(li);
        let wl = tape.scale(li, T::from_f64_lossy(w));
        total = Some(match total {
            None => wl,
            Some(t) => tape.add(t, wl)?,
        });
    }
    Ok((total.expect("non-empty"), parts))
}
