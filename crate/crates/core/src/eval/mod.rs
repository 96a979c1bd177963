//! Metrics, the cross-domain similarity protocol, profiling and timing.

mod baseline;
mod profile;
mod similarity;

pub use baseline::PixelDenoiser;
pub use profile::{bench, count_flops, count_params, LayerCost, ProfileReport, TimingStats, FLOP_CONVENTION};
pub use similarity::{
    run_protocol,
    similarity, similarity_values, EmbeddingSource, PairValue, SimilarityReport, SIMILARITY_SEVERITY,
};

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `10·log10(1/MSE)` for signals in `[0, 1]`; `+∞` when identical.
pub fn psnr<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr operands differ in length");
    let mse = a.iter().zip(b).map(|(&p, &q)| (p.f64() - q.f64()).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Decibels with two decimals, or `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegMetrics {
    pub classes: usize,
    pub mean_iu: f64,
    pub pixel_acc: f64,
    pub mean_acc: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_iu: Vec<Option<f64>>,
    /// `confusion[gt][pred]`.
    pub confusion: Vec<Vec<u64>>,
}

impl SegMetrics {
    /// Confusion matrix as CSV, ground truth by row.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("gt\\pred");
        for k in 0..self.classes {
            out.push_str(&format!(",{k}"));
        }
        out.push('\n');
        for (g, row) in self.confusion.iter().enumerate() {
            out.push_str(&g.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for SegMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "meanIU {:.4}  pixelAcc {:.4}  meanAcc {:.4}", self.mean_iu, self.pixel_acc, self.mean_acc)
    }
}

/// Confusion-matrix metrics. Pixels labelled `ignore` in `gt` are skipped.
pub fn seg_metrics(pred: &[u8], gt: &[u8], classes: usize, ignore: Option<u8>) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::shape("seg_metrics", format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore {
            continue;
        }
        if g as usize >= classes || p as usize >= classes {
            return Err(Error::invalid("seg_metrics", format!("label {} outside {classes} classes", g.max(p))));
        }
        confusion[g as usize][p as usize] += 1;
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::invalid("seg_metrics", "no labelled pixels"));
    }
    let trace: u64 = (0..classes).map(|k| confusion[k][k]).sum();
    let mut per_class_iu = vec![None; classes];
    let (mut iu_sum, mut acc_sum, mut present) = (0.0, 0.0, 0usize);
    for k in 0..classes {
        let gt_k: u64 = confusion[k].iter().sum();
        if gt_k == 0 {
            continue;
        }
        let pred_k: u64 = (0..classes).map(|g| confusion[g][k]).sum();
        let tp = confusion[k][k] as f64;
        let iu = tp / (gt_k as f64 + pred_k as f64 - tp);
        per_class_iu[k] = Some(iu);
        iu_sum += iu;
        acc_sum += tp / gt_k as f64;
        present += 1;
    }
    Ok(SegMetrics {
        classes,
        mean_iu: iu_sum / present as f64,
        pixel_acc: trace as f64 / total as f64,
        mean_acc: acc_sum / present as f64,
        per_class_iu,
        confusion,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DepthMetrics {
    /// Percent of valid pixels with error > 3 px and > 5% of the truth.
    pub d1_all: f64,
    /// Percent of valid pixels with error > 3 px.
    pub thresh3: f64,
    pub valid: usize,
}

impl fmt::Display for DepthMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d1_all {:.2}%  thresh3 {:.2}%  valid {}", self.d1_all, self.thresh3, self.valid)
    }
}

pub fn depth_metrics<T: Scalar>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::shape("depth_metrics", format!("{} / {} / {} values", pred.len(), gt.len(), mask.len())));
    }
    let (mut valid, mut over3, mut d1) = (0usize, 0usize, 0usize);
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if !m {
            continue;
        }
        valid += 1;
        let err = (p.f64() - g.f64()).abs();
        if err > 3.0 {
            over3 += 1;
            if err > 0.05 * g.f64().abs() {
                d1 += 1;
            }
        }
    }
    if valid == 0 {
        return Err(Error::invalid("depth_metrics", "validity mask is empty"));
    }
    let pct = |k: usize| 100.0 * k as f64 / valid as f64;
    Ok(DepthMetrics { d1_all: pct(d1), thresh3: pct(over3), valid })
}
