//! Binary segmentation metrics. Counts are summed over all pixels of all
//! images before any ratio is taken.

use crate::error::{Error, Result};

/// Threshold used for every metric except the P/R break-even point.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Number of thresholds `k / 255`, `k = 0..=255`, in the P/R sweep.
pub const PR_THRESHOLDS: usize = 256;

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// The same counts with background as the positive class.
    pub fn swapped(&self) -> Confusion {
        Confusion {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

/// Per-threshold metrics over one evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub threshold: f64,
    /// Mean of background and foreground IoU.
    pub miou: f64,
    /// Mean of background and foreground recall.
    pub mrec: f64,
    /// Mean of background and foreground precision.
    pub mprec: f64,
    /// Harmonic mean of `mprec` and `mrec`.
    pub f1: f64,
    pub fg_iou: f64,
    pub fg_precision: f64,
    pub fg_recall: f64,
    pub fg_f1: f64,
    /// Foreground precision where the precision and recall curves cross.
    pub pr_break_even: f64,
}

fn check_inputs(prob: &[f32], gt: &[f32]) -> Result<()> {
    if prob.len() != gt.len() {
        return Err(Error::shape(
            "compute_metrics",
            format!("prediction has {} pixels, ground truth {}", prob.len(), gt.len()),
        ));
    }
    if let Some(v) = gt.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain {
            op: "compute_metrics",
            detail: format!("ground truth must be binary, found {v}"),
        });
    }
    if let Some(v) = prob.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain {
            op: "compute_metrics",
            detail: format!("probabilities must lie in [0, 1], found {v}"),
        });
    }
    Ok(())
}

/// Highest sweep index `k` with `k / 255 <= p`.
fn sweep_bin(p: f32) -> usize {
    let p = p as f64;
    let mut k = ((p * 255.0).floor() as isize).clamp(0, 255) as usize;
    while k < 255 && ((k + 1) as f64) / 255.0 <= p {
        k += 1;
    }
    while k > 0 && (k as f64) / 255.0 > p {
        k -= 1;
    }
    k
}

/// Streaming accumulator; merging two accumulators equals accumulating the
/// concatenated data.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsAccumulator {
    pub threshold: f64,
    pub confusion: Confusion,
    fg_hist: Vec<u64>,
    bg_hist: Vec<u64>,
}

impl Default for MetricsAccumulator {
    fn default() -> Self {
        Self::new(DEFAULT_THRESHOLD)
    }
}

impl MetricsAccumulator {
    pub fn new(threshold: f64) -> Self {
        MetricsAccumulator {
            threshold,
            confusion: Confusion::default(),
            fg_hist: vec![0; PR_THRESHOLDS],
            bg_hist: vec![0; PR_THRESHOLDS],
        }
    }

    /// Adds one probability map and its ground truth (same length).
    pub fn add(&mut self, prob: &[f32], gt: &[f32]) -> Result<()> {
        check_inputs(prob, gt)?;
        for (&p, &g) in prob.iter().zip(gt) {
            let pos = p as f64 >= self.threshold;
            let c = &mut self.confusion;
            match (pos, g == 1.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
            let bin = sweep_bin(p);
            if g == 1.0 {
                self.fg_hist[bin] += 1;
            } else {
                self.bg_hist[bin] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.confusion.merge(&other.confusion);
        for (a, b) in self.fg_hist.iter_mut().zip(&other.fg_hist) {
            *a += b;
        }
        for (a, b) in self.bg_hist.iter_mut().zip(&other.bg_hist) {
            *a += b;
        }
    }

    /// Foreground `(precision, recall)` at each sweep threshold `k / 255`
    /// (a pixel is positive iff `p >= k / 255`).
    pub fn pr_curve(&self) -> Vec<(f64, f64)> {
        let positives: u64 = self.fg_hist.iter().sum();
        let mut out = vec![(0.0, 0.0); PR_THRESHOLDS];
        let (mut tp, mut fp) = (0u64, 0u64);
        for k in (0..PR_THRESHOLDS).rev() {
            tp += self.fg_hist[k];
            fp += self.bg_hist[k];
            out[k] = (ratio(tp, tp + fp), ratio(tp, positives));
        }
        out
    }

    pub fn report(&self) -> MetricsReport {
        let fg = self.confusion;
        let bg = fg.swapped();
        let mrec = 0.5 * (fg.recall() + bg.recall());
        let mprec = 0.5 * (fg.precision() + bg.precision());
        MetricsReport {
            confusion: fg,
            threshold: self.threshold,
            miou: 0.5 * (fg.iou() + bg.iou()),
            mrec,
            mprec,
            f1: harmonic(mprec, mrec),
            fg_iou: fg.iou(),
            fg_precision: fg.precision(),
            fg_recall: fg.recall(),
            fg_f1: harmonic(fg.precision(), fg.recall()),
            pr_break_even: break_even(&self.pr_curve()),
        }
    }
}

/// Value where the linearly interpolated precision and recall curves meet.
///
/// Computed as the maximum over the piecewise-linear curve of
/// `min(precision, recall)`: on a segment where `precision - recall`
/// changes sign that maximum is the crossing value, and elsewhere it is
/// the nearer endpoint.
pub fn break_even(curve: &[(f64, f64)]) -> f64 {
    let mut best: f64 = curve.first().map(|&(p, r)| p.min(r)).unwrap_or(0.0);
    for seg in curve.windows(2) {
        let ((p0, r0), (p1, r1)) = (seg[0], seg[1]);
        best = best.max(p1.min(r1));
        let (d0, d1) = (p0 - r0, p1 - r1);
        if d0 * d1 < 0.0 {
            let lam = d0 / (d0 - d1);
            best = best.max(p0 + lam * (p1 - p0));
        }
    }
    best
}

/// Metrics of a single probability map against its ground truth.
pub fn compute_metrics(prob: &[f32], gt: &[f32], threshold: f64) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(threshold);
    acc.add(prob, gt)?;
    Ok(acc.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let r = compute_metrics(&gt, &gt, 0.5).unwrap();
        assert_eq!((r.miou, r.f1, r.fg_f1), (1.0, 1.0, 1.0));
        assert_eq!(r.pr_break_even, 1.0);
    }

    #[test]
    fn overlapping_squares() {
        // 4x4 image; prediction covers rows 0-1, cols 0-1; ground truth
        // rows 0-1, cols 1-2. They share two pixels.
        let mut pred = [0.0f32; 16];
        let mut gt = [0.0f32; 16];
        for y in 0..2 {
            for x in 0..2 {
                pred[y * 4 + x] = 1.0;
                gt[y * 4 + x + 1] = 1.0;
            }
        }
        let r = compute_metrics(&pred, &gt, 0.5).unwrap();
        assert_eq!(
            r.confusion,
            Confusion {
                tp: 2,
                fp: 2,
                fn_: 2,
                tn: 10
            }
        );
        assert!((r.fg_iou - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!((r.fg_precision, r.fg_recall), (0.5, 0.5));
    }

    #[test]
    fn all_background_prediction() {
        let gt = [1.0, 0.0, 1.0, 0.0];
        let r = compute_metrics(&[0.0; 4], &gt, 0.5).unwrap();
        assert_eq!((r.fg_iou, r.fg_recall, r.fg_precision), (0.0, 0.0, 0.0));
    }

    #[test]
    fn input_errors() {
        assert!(compute_metrics(&[0.1], &[0.0, 1.0], 0.5).is_err());
        assert!(compute_metrics(&[0.1, 0.2], &[0.0, 0.5], 0.5).is_err());
        assert!(compute_metrics(&[1.5, 0.2], &[0.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn sweep_bins_respect_thresholds() {
        for i in 0..=1000 {
            let p = i as f32 / 1000.0;
            let b = sweep_bin(p);
            assert!(b as f64 / 255.0 <= p as f64);
            assert!(b == 255 || (b + 1) as f64 / 255.0 > p as f64);
        }
        assert_eq!(sweep_bin(0.0), 0);
        assert_eq!(sweep_bin(1.0), 255);
    }

    #[test]
    fn break_even_interpolates() {
        let curve = [(0.2, 1.0), (0.6, 0.4)];
        // d = 0.2 - 1.0 = -0.8 and 0.6 - 0.4 = 0.2: cross at lam = 0.8.
        assert!((break_even(&curve) - 0.52).abs() < 1e-12);
    }
}
