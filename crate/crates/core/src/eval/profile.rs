use std::fmt;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::space::{Layer, Model};

pub const FLOP_CONVENTION: &str = "1 multiply-accumulate = 2 FLOPs; conv bias adds 1 FLOP per output";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileReport {
    pub model: String,
    pub height: usize,
    pub width: usize,
    pub params: usize,
    pub flops: u64,
    pub layers: Vec<LayerCost>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingStats>,
}

impl fmt::Display for ProfileReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# FLOP convention: {FLOP_CONVENTION}")?;
        writeln!(f, "model: {}", self.model)?;
        writeln!(f, "input: {}x{}", self.height, self.width)?;
        writeln!(f, "params: {}", self.params)?;
        writeln!(f, "flops: {}", self.flops)?;
        writeln!(f, "gflops: {:.4}", self.flops as f64 / 1e9)?;
        for l in &self.layers {
            writeln!(f, "  {:<20} params {:>9}  flops {:>12}", l.name, l.params, l.flops)?;
        }
        if let Some(t) = &self.timing {
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Parameter count from the model's layer list.
pub fn count_params<T: Scalar, M: Model<T> + ?Sized>(model: &M) -> Result<usize> {
    model
        .layers()
        .into_iter()
        .map(|l| match l {
            Layer::Conv(s) => Ok(s.param_count()),
            Layer::Correlation { .. } => Ok(0),
            Layer::Opaque { name } => Err(Error::invalid("count_params", format!("layer `{name}` has no cost model"))),
        })
        .sum()
}

/// Per-layer cost for a reference input of `height×width` pixels.
pub fn count_flops<T: Scalar, M: Model<T> + ?Sized>(model: &M, height: usize, width: usize) -> Result<ProfileReport> {
    let mut layers = Vec::new();
    for layer in model.layers() {
        layers.push(match layer {
            Layer::Conv(s) => LayerCost { params: s.param_count(), flops: s.flops(height, width), name: s.name },
            Layer::Correlation { name, channels, shifts, div } => {
                let plane = (height / div * (width / div)) as u64;
                LayerCost { name, params: 0, flops: 2 * (channels * shifts) as u64 * plane }
            }
            Layer::Opaque { name } => {
                return Err(Error::invalid("count_flops", format!("layer `{name}` has no cost model")));
            }
        });
    }
    Ok(ProfileReport {
        model: model.kind().to_string(),
        height,
        width,
        params: layers.iter().map(|l| l.params).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        layers,
        timing: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingStats {
    pub warmups: usize,
    /// Seconds per run, in run order.
    pub samples: Vec<f64>,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub fingerprint: String,
}

impl fmt::Display for TimingStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "runs: {} (after {} warmups)", self.samples.len(), self.warmups)?;
        writeln!(f, "median_s: {:.6}", self.median)?;
        writeln!(f, "p10_s: {:.6}", self.p10)?;
        writeln!(f, "p90_s: {:.6}", self.p90)?;
        writeln!(f, "environment: {}", self.fingerprint)
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn fingerprint() -> String {
    let threads = rayon::current_num_threads();
    format!(
        "{}-{} threads={} build={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        threads,
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}

/// Wall time of `run` after `warmups` untimed calls.
pub fn bench(mut run: impl FnMut() -> Result<()>, warmups: usize, runs: usize) -> Result<TimingStats> {
    if runs == 0 {
        return Err(Error::invalid("bench", "need at least one timed run"));
    }
    for _ in 0..warmups {
        run()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        run()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TimingStats {
        warmups,
        median: percentile(&sorted, 0.5),
        p10: percentile(&sorted, 0.1),
        p90: percentile(&sorted, 0.9),
        samples,
        fingerprint: fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{DenoiserHead, DepthHead, SegHead};
    use crate::space::{DecoderModel, EncoderModel, ModelKind, Network};

    #[test]
    fn params_agree_with_parameter_sets() {
        let e = EncoderModel::<f32>::new(3, 8, 2, 0).unwrap();
        let r = EncoderModel::<f32>::new(1, 8, 2, 0).unwrap();
        let d = DecoderModel::<f32>::new(8, 2, 0).unwrap();
        let n = DenoiserHead::<f32>::new(8, 0).unwrap();
        let s = SegHead::<f32>::new(8, 5, 0).unwrap();
        let z = DepthHead::<f32>::new(8, 16, 0).unwrap();
        let models: [&dyn Model<f32>; 6] = [&e, &r, &d, &n, &s, &z];
        for m in models {
            let rep = count_flops(m, 64, 64).unwrap();
            assert_eq!(rep.params, m.params().numel(), "{}", m.kind());
            assert_eq!(rep.flops, rep.layers.iter().map(|l| l.flops).sum::<u64>());
        }
        assert_eq!(count_params(&DenoiserHead::<f32>::new(64, 0).unwrap()).unwrap(), 443_136);
    }

    struct Fake(Network<f32>);

    impl Model<f32> for Fake {
        fn kind(&self) -> ModelKind {
            ModelKind::Seg
        }
        fn network(&self) -> &Network<f32> {
            &self.0
        }
        fn network_mut(&mut self) -> &mut Network<f32> {
            &mut self.0
        }
        fn layers(&self) -> Vec<Layer> {
            vec![Layer::Opaque { name: "mystery".into() }]
        }
    }

    #[test]
    fn single_convs_and_unknown_layers() {
        let mut net = Network::<f32>::new(0);
        net.add_conv("one", 1, 1, 1, 1, 1).unwrap();
        assert_eq!(net.convs()[0].param_count(), 2);
        assert!(count_flops(&Fake(net), 8, 8).is_err());
    }

    #[test]
    fn bench_records_every_run() {
        let stats = bench(|| Ok(()), 3, 20).unwrap();
        assert_eq!(stats.samples.len(), 20);
        assert!(stats.median < 1e-3);
        assert!(stats.p10 <= stats.median && stats.median <= stats.p90);
        assert!(bench(|| Ok(()), 0, 0).is_err());
    }
}
