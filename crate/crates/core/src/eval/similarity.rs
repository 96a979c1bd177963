use std::fmt;

use serde::Serialize;

use super::baseline::PixelDenoiser;
use crate::error::{Error, Result};
use crate::imaging::{corrupt, CorruptionKind, CorruptionSpec, Image};
use crate::space::EncoderModel;

/// Corruption severity used by the protocol.
pub const SIMILARITY_SEVERITY: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    NeuralSpace,
    PixelSpaceBaseline,
}

impl fmt::Display for EmbeddingSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingSource::NeuralSpace => "neural_space",
            EmbeddingSource::PixelSpaceBaseline => "pixel_space_baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairValue {
    pub image: usize,
    pub corruption: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub source: EmbeddingSource,
    pub pairs: Vec<PairValue>,
    /// Mean over pairs.
    pub avg_l1: f64,
    /// Median over pairs.
    pub med_l1: f64,
}

impl SimilarityReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let rec = serde_json::json!({"source": self.source, "image": p.image, "corruption": p.corruption, "value": p.value});
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for SimilarityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<22} pairs {:>4}  avg_l1 {:.6}  med_l1 {:.6}", self.source.to_string(), self.pairs.len(), self.avg_l1, self.med_l1)
    }
}

/// `mean|a − b| / (max a − min a)` per pair.
pub fn similarity_values(originals: &[Vec<f64>], shifted: &[Vec<f64>]) -> Result<Vec<f64>> {
    if originals.len() != shifted.len() {
        return Err(Error::shape("similarity", format!("{} originals for {} shifted", originals.len(), shifted.len())));
    }
    originals
        .iter()
        .zip(shifted)
        .map(|(a, b)| {
            if a.len() != b.len() || a.is_empty() {
                return Err(Error::shape("similarity", format!("embedding sizes {} and {}", a.len(), b.len())));
            }
            let (lo, hi) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let range = hi - lo;
            if !(range > 0.0) {
                return Err(Error::invalid("similarity", "original embedding is constant; range is zero"));
            }
            let l1 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            Ok(l1 / range)
        })
        .collect()
}

/// Builds a report from per-pair embeddings, labelled `(image, corruption)`.
pub fn similarity(
    source: EmbeddingSource,
    labels: &[(usize, String)],
    originals: &[Vec<f64>],
    shifted: &[Vec<f64>],
) -> Result<SimilarityReport> {
    let values = similarity_values(originals, shifted)?;
    if labels.len() != values.len() {
        return Err(Error::shape("similarity", "one label per pair required"));
    }
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let med_l1 = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let avg_l1 = values.iter().sum::<f64>() / n as f64;
    let pairs = labels.iter().zip(values).map(|((i, c), value)| PairValue { image: *i, corruption: c.clone(), value }).collect();
    Ok(SimilarityReport { source, pairs, avg_l1, med_l1 })
}

/// Runs every corruption at [`SIMILARITY_SEVERITY`] over `images` and
/// compares latent embeddings with pixel-baseline embeddings.
pub fn run_protocol(
    images: &[Image],
    encoder: &EncoderModel<f32>,
    baseline: &PixelDenoiser<f32>,
    seed: u64,
) -> Result<(SimilarityReport, SimilarityReport)> {
    if images.is_empty() {
        return Err(Error::Data("similarity protocol needs at least one image".into()));
    }
    let ns = |img: &Image| -> Result<Vec<f64>> { Ok(encoder.encode_image(img)?.features(0).iter().map(|&v| v as f64).collect()) };
    let ps = |img: &Image| -> Result<Vec<f64>> { Ok(baseline.embed(&img.to_tensor())?.data().iter().map(|&v| v as f64).collect()) };
    let (mut labels, mut ns_a, mut ns_b, mut ps_a, mut ps_b) = (vec![], vec![], vec![], vec![], vec![]);
    for (i, img) in images.iter().enumerate() {
        let (na, pa) = (ns(img)?, ps(img)?);
        for (k, kind) in CorruptionKind::ALL.into_iter().enumerate() {
            let spec = CorruptionSpec::new(kind, SIMILARITY_SEVERITY, seed.wrapping_add((i * 8 + k) as u64))?;
            let shifted = corrupt(img, &spec)?;
            labels.push((i, kind.name().to_string()));
            ns_a.push(na.clone());
            ns_b.push(ns(&shifted)?);
            ps_a.push(pa.clone());
            ps_b.push(ps(&shifted)?);
        }
    }
    Ok((
        similarity(EmbeddingSource::NeuralSpace, &labels, &ns_a, &ns_b)?,
        similarity(EmbeddingSource::PixelSpaceBaseline, &labels, &ps_a, &ps_b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_are_zero() {
        let a = vec![vec![0.0, 1.0, 3.0], vec![2.0, -1.0, 5.0]];
        assert_eq!(similarity_values(&a, &a).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn two_feature_toy() {
        let v = similarity_values(&[vec![0.0, 1.0]], &[vec![0.5, 1.0]]).unwrap();
        assert_eq!(v, vec![0.25]);
    }

    #[test]
    fn invariant_to_common_scaling() {
        let a = vec![vec![0.3, -1.2, 4.0, 2.2]];
        let b = vec![vec![0.1, -1.0, 3.5, 2.9]];
        let k = 7.5;
        let scale = |s: &[Vec<f64>]| s.iter().map(|v| v.iter().map(|x| x / k).collect()).collect::<Vec<Vec<f64>>>();
        let (x, y) = (similarity_values(&a, &b).unwrap()[0], similarity_values(&scale(&a), &scale(&b)).unwrap()[0]);
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn constant_original_rejected_and_aggregates() {
        assert!(similarity_values(&[vec![1.0, 1.0]], &[vec![0.0, 1.0]]).is_err());
        let labels: Vec<(usize, String)> = (0..4).map(|i| (i, "x".to_string())).collect();
        let a = vec![vec![0.0, 1.0]; 4];
        let b = vec![vec![0.0, 1.0], vec![0.1, 1.0], vec![0.2, 1.0], vec![0.9, 1.0]];
        let r = similarity(EmbeddingSource::NeuralSpace, &labels, &a, &b).unwrap();
        assert!((r.avg_l1 - 0.15).abs() < 1e-12);
        assert!((r.med_l1 - 0.075).abs() < 1e-12);
        assert_eq!(r.to_jsonl().lines().count(), 4);
    }
}
