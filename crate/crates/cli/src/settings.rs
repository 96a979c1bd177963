use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use nspace::training::{Stage, TrainConfig};
use nspace::{Error, Result};

use crate::args::Common;

/// `key = value` pairs from `--config`, in file order. `#` starts a comment.
fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
        pairs.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Command parameters resolved as flag, then config file, then default.
/// Config keys no command asked for are rejected by [`Settings::finish`].
pub struct Settings {
    pairs: Vec<(String, String)>,
    used: RefCell<BTreeSet<String>>,
    seed: Option<u64>,
}

impl Settings {
    pub fn load(common: &Common) -> Result<Self> {
        let pairs = match &common.config {
            Some(p) => read_pairs(p)?,
            None => Vec::new(),
        };
        Ok(Settings { pairs, used: RefCell::new(BTreeSet::new()), seed: common.seed })
    }

    fn lookup(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get<V: FromStr>(&self, key: &str, flag: Option<V>, default: V) -> Result<V> {
        Ok(self.opt(key, flag)?.unwrap_or(default))
    }

    pub fn opt<V: FromStr>(&self, key: &str, flag: Option<V>) -> Result<Option<V>> {
        let from_file = self.lookup(key);
        if flag.is_some() {
            return Ok(flag);
        }
        from_file
            .map(|v| v.parse().map_err(|_| Error::Config(format!("cannot parse `{key}` value {v:?}"))))
            .transpose()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed", self.seed, 0)
    }

    pub fn finish(self) -> Result<()> {
        let used = self.used.into_inner();
        match self.pairs.iter().find(|(k, _)| !used.contains(k)) {
            Some((k, _)) => Err(Error::Config(format!("unknown config key `{k}` for this command"))),
            None => Ok(()),
        }
    }
}

/// Training config for `stage`: defaults, then the config file, then flags.
pub fn train_config(stage: Stage, common: &Common, channels: Option<usize>, steps: Option<usize>) -> Result<TrainConfig> {
    let pairs = match &common.config {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    let mut cfg = TrainConfig::new(stage, 0);
    for (k, v) in &pairs {
        if k == "stage" {
            let s: Stage = v.parse()?;
            if s != stage {
                return Err(Error::Config(format!("config is for stage {s}, but this command trains {stage}")));
            }
        } else {
            cfg.set(k, v)?;
        }
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(c) = channels {
        cfg.channels = c;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_file(text: &str) -> (tempfile::TempDir, Common) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, text).unwrap();
        (dir, Common { seed: None, config: Some(p) })
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let (_d, common) = with_file("runs = 7\nd-max = 8 # dashes allowed\n");
        let s = Settings::load(&common).unwrap();
        assert_eq!(s.get("runs", Some(3usize), 1).unwrap(), 3);
        assert_eq!(s.get("d_max", None, 16usize).unwrap(), 8);
        assert_eq!(s.get("warmups", None, 2usize).unwrap(), 2);
        s.finish().unwrap();
    }

    #[test]
    fn unused_key_is_rejected() {
        let (_d, common) = with_file("bogus = 1\n");
        let s = Settings::load(&common).unwrap();
        assert!(matches!(s.finish(), Err(Error::Config(_))));
    }

    #[test]
    fn train_config_layers_and_stage_check() {
        let (_d, mut common) = with_file("seed = 5\nsteps = 10\nlambda = 0.5\n");
        common.seed = Some(9);
        let cfg = train_config(Stage::Denoise, &common, Some(8), None).unwrap();
        assert_eq!((cfg.seed, cfg.steps, cfg.lambda, cfg.channels), (9, 10, 0.5, 8));
        let (_d2, other) = with_file("stage = seg\n");
        assert!(train_config(Stage::Depth, &other, None, None).is_err());
    }
}
