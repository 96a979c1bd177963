use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::affine::AffineRanges;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    RgbAutoencoder,
    RawEncoder,
    Denoise,
    Seg,
    Depth,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::RgbAutoencoder, Stage::RawEncoder, Stage::Denoise, Stage::Seg, Stage::Depth];

    pub fn name(self) -> &'static str {
        match self {
            Stage::RgbAutoencoder => "rgb_autoencoder",
            Stage::RawEncoder => "raw_encoder",
            Stage::Denoise => "denoise",
            Stage::Seg => "seg",
            Stage::Depth => "depth",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}; expected one of rgb_autoencoder, raw_encoder, denoise, seg, depth")))
    }
}

/// Target of the denoiser's latent term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseTarget {
    /// `L2[F(E(clean)), F(E(noisy))]`.
    Literal,
    /// `L2[E(clean), F(E(noisy))]`.
    Clean,
}

impl FromStr for DenoiseTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(DenoiseTarget::Literal),
            "clean" => Ok(DenoiseTarget::Clean),
            other => Err(Error::Config(format!("denoise_target {other:?}; expected literal or clean"))),
        }
    }
}

impl fmt::Display for DenoiseTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenoiseTarget::Literal => "literal",
            DenoiseTarget::Clean => "clean",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub w_l1: f64,
    pub w_ssim: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub affine: AffineRanges,
    /// Noise std the denoiser is trained for; informational when data is loaded from disk.
    pub sigma: f64,
    pub channels: usize,
    pub blocks: usize,
    pub classes: usize,
    pub d_max: usize,
    pub denoise_target: DenoiseTarget,
    /// Initialize the RAW encoder from the RGB encoder.
    pub warm_start: bool,
    /// Held-out evaluation interval in steps; 0 evaluates only before and after.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(stage: Stage, seed: u64) -> Self {
        let (steps, batch) = match stage {
            Stage::RgbAutoencoder => (3000, 8),
            Stage::RawEncoder => (1500, 8),
            Stage::Denoise => (1500, 8),
            Stage::Seg => (1500, 8),
            Stage::Depth => (4000, 4),
        };
        TrainConfig {
            stage,
            seed,
            steps,
            batch,
            lr: 1e-3,
            w_l1: 0.85,
            w_ssim: 0.15,
            lambda: 1.0,
            alpha: 0.3,
            affine: AffineRanges::default(),
            sigma: 25.0 / 255.0,
            channels: 16,
            blocks: 2,
            classes: 5,
            d_max: 16,
            denoise_target: DenoiseTarget::Literal,
            warm_start: true,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [("w_l1", self.w_l1), ("w_ssim", self.w_ssim), ("lambda", self.lambda), ("alpha", self.alpha)];
        for (k, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} = {v}; weights must be finite and non-negative")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {}; must be positive", self.lr)));
        }
        if self.batch == 0 || self.channels == 0 {
            return Err(Error::Config("batch and channels must be positive".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma = {}; must be non-negative", self.sigma)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("classes = {}; need at least 2", self.classes)));
        }
        if self.d_max == 0 || self.d_max % 4 != 0 {
            return Err(Error::Config(format!("d_max = {}; must be a positive multiple of 4", self.d_max)));
        }
        self.affine.validate()
    }

    /// Parses `key = value` lines; `#` starts a comment. `stage` and `seed` are required.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let find = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let stage: Stage = find("stage").ok_or_else(|| Error::Config("missing required key `stage`".into()))?.parse()?;
        let seed = find("seed").ok_or_else(|| Error::Config("missing required key `seed`".into()))?;
        let mut cfg = TrainConfig::new(stage, value("seed", seed)?);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "stage" => self.stage = v.parse()?,
            "seed" => self.seed = value(key, v)?,
            "steps" => self.steps = value(key, v)?,
            "batch" => self.batch = value(key, v)?,
            "lr" => self.lr = value(key, v)?,
            "w_l1" => self.w_l1 = value(key, v)?,
            "w_ssim" => self.w_ssim = value(key, v)?,
            "lambda" => self.lambda = value(key, v)?,
            "alpha" => self.alpha = value(key, v)?,
            "max_degrees" => self.affine.max_degrees = value(key, v)?,
            "min_scale" => self.affine.min_scale = value(key, v)?,
            "max_scale" => self.affine.max_scale = value(key, v)?,
            "max_translation" => self.affine.max_translation = value(key, v)?,
            "sigma" => self.sigma = value(key, v)?,
            "channels" => self.channels = value(key, v)?,
            "blocks" => self.blocks = value(key, v)?,
            "classes" => self.classes = value(key, v)?,
            "d_max" => self.d_max = value(key, v)?,
            "denoise_target" => self.denoise_target = v.parse()?,
            "warm_start" => self.warm_start = value(key, v)?,
            "eval_every" => self.eval_every = value(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// The config in the same format [`TrainConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let a = &self.affine;
        let rows: Vec<(&str, String)> = vec![
            ("stage", self.stage.to_string()),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("w_l1", self.w_l1.to_string()),
            ("w_ssim", self.w_ssim.to_string()),
            ("lambda", self.lambda.to_string()),
            ("alpha", self.alpha.to_string()),
            ("max_degrees", a.max_degrees.to_string()),
            ("min_scale", a.min_scale.to_string()),
            ("max_scale", a.max_scale.to_string()),
            ("max_translation", a.max_translation.to_string()),
            ("sigma", self.sigma.to_string()),
            ("channels", self.channels.to_string()),
            ("blocks", self.blocks.to_string()),
            ("classes", self.classes.to_string()),
            ("d_max", self.d_max.to_string()),
            ("denoise_target", self.denoise_target.to_string()),
            ("warm_start", self.warm_start.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn value<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config(format!("cannot parse `{key}` value {v:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::new(Stage::Denoise, 42);
        cfg.lambda = 0.5;
        cfg.denoise_target = DenoiseTarget::Clean;
        cfg.affine.max_degrees = 12.5;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn seed_is_mandatory() {
        let err = TrainConfig::parse("stage = seg\nsteps = 3\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        assert!(TrainConfig::parse("seed = 1\n").is_err());
    }

    #[test]
    fn defaults_and_rejections() {
        let cfg = TrainConfig::parse("# run\nstage = depth\nseed = 7  # fixed\n").unwrap();
        assert_eq!((cfg.alpha, cfg.lambda, cfg.w_l1, cfg.w_ssim), (0.3, 1.0, 0.85, 0.15));
        assert!(TrainConfig::parse("stage = seg\nseed = 1\nalpha = -0.1\n").is_err());
        assert!(TrainConfig::parse("stage = seg\nseed = 1\nbogus = 3\n").is_err());
        assert!(TrainConfig::parse("stage = seg\nseed = 1\nmin_scale = 2\n").is_err());
        assert!(TrainConfig::parse("stage = seg\nseed = x\n").is_err());
    }
}
