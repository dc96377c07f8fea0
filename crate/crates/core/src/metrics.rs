//! Pooled confusion counts, IoU / precision / recall / F1, and flip TTA.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Count valid pixels of `probs >= threshold` against `target > 0.5`.
    pub fn from_maps<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, valid: &Tensor<T>, threshold: f64) -> Result<Self> {
        if probs.shape() != target.shape() || probs.shape() != valid.shape() {
            return Err(Error::shape("confusion", probs.shape(), target.shape()));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Precondition(format!("threshold must be in (0,1), got {threshold}")));
        }
        let mut c = ConfusionCounts::default();
        for ((&p, &t), &v) in probs.data().iter().zip(target.data()).zip(valid.data()) {
            if v.f64() <= 0.5 {
                continue;
            }
            match (p.f64() >= threshold, t.f64() > 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricReport {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let mut degenerate = false;
        let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
        let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
        let iou = ratio(c.tp, c.tp + c.fp + c.fn_, &mut degenerate);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            degenerate = true;
            0.0
        };
        MetricReport {
            iou,
            precision,
            recall,
            f1,
            degenerate,
        }
    }

    pub const CSV_HEADER: &'static str = "split,iou,precision,recall,f1";

    pub fn csv_row(&self, split: &str) -> String {
        format!("{split},{},{},{},{}", self.iou, self.precision, self.recall, self.f1)
    }

    /// Parse a row written by [`MetricReport::csv_row`].
    pub fn parse_csv_row(line: &str) -> Result<(String, MetricReport)> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Config(format!("malformed metric row `{line}`"));
        if parts.len() != 5 {
            return Err(bad());
        }
        let v: Vec<f64> = parts[1..]
            .iter()
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        Ok((
            parts[0].to_string(),
            MetricReport {
                iou: v[0],
                precision: v[1],
                recall: v[2],
                f1: v[3],
                degenerate: false,
            },
        ))
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "IoU {:.4}  P {:.4}  R {:.4}  F1 {:.4}",
            self.iou, self.precision, self.recall, self.f1
        )
    }
}

pub fn compute_metrics<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, valid: &Tensor<T>, threshold: f64) -> Result<MetricReport> {
    Ok(MetricReport::from_counts(&ConfusionCounts::from_maps(probs, target, valid, threshold)?))
}

/// Flips of the spatial axes of an NCHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    Identity,
    Horizontal,
    Vertical,
    Both,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::Identity, Flip::Horizontal, Flip::Vertical, Flip::Both];

    /// Apply to a `[.., H, W]` tensor. Every flip is its own inverse.
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (x.ndim() - 2, x.ndim() - 1);
        match self {
            Flip::Identity => x.clone(),
            Flip::Horizontal => x.flip(w),
            Flip::Vertical => x.flip(h),
            Flip::Both => x.flip(h).flip(w),
        }
    }
}

/// Average of `sigmoid(predict(flip(img)))` flipped back, over `flips`.
pub fn tta_predict<T: Scalar>(
    predict: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    img: &Tensor<T>,
    flips: &[Flip],
) -> Result<Tensor<T>> {
    if flips.is_empty() {
        return Err(Error::Precondition("tta needs at least one flip".into()));
    }
    let mut acc: Option<Tensor<T>> = None;
    for &f in flips {
        let logits = predict(&f.apply(img))?;
        let probs = f.apply(&logits).map(crate::autodiff::sigmoid_scalar);
        match acc.as_mut() {
            Some(a) => a.add_assign(&probs),
            None => acc = Some(probs),
        }
    }
    Ok(acc.expect("non-empty").scale(T::c(1.0 / flips.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        let c = ConfusionCounts { tp: 6, fp: 2, fn_: 2, tn: 5 };
        let m = MetricReport::from_counts(&c);
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.75, 0.75, 0.75, 0.6));
        assert!(!m.degenerate);
    }

    #[test]
    fn perfect_and_empty() {
        let t = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::full(&[1, 1, 2, 2], 1.0);
        let m = compute_metrics(&t, &t, &v, 0.5).unwrap();
        assert_eq!((m.iou, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        let z = Tensor::zeros(&[1, 1, 2, 2]);
        let m = compute_metrics(&z, &z, &v, 0.5).unwrap();
        assert!(m.degenerate && m.iou == 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let m = MetricReport::from_counts(&ConfusionCounts { tp: 7, fp: 3, fn_: 1, tn: 0 });
        let (split, back) = MetricReport::parse_csv_row(&m.csv_row("val")).unwrap();
        assert_eq!(split, "val");
        assert_eq!((back.iou, back.precision, back.recall, back.f1), (m.iou, m.precision, m.recall, m.f1));
    }

    #[test]
    fn tta_of_identity_predictor_is_sigmoid() {
        let img = Tensor::<f64>::from_fn(&[1, 1, 3, 4], |i| i as f64 - 5.0);
        let p = tta_predict(|x| Ok(x.clone()), &img, &Flip::ALL).unwrap();
        let want = img.map(crate::autodiff::sigmoid_scalar);
        assert!(p.max_abs_diff(&want) < 1e-15);
    }
}
