//! Synthetic datasets on disk, described by a JSON-lines manifest.
//!
//! Each line of `manifest.jsonl` is one [`SampleRecord`]. Asset paths are
//! relative to the manifest's directory. Missing optional assets are
//! omitted from the line.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::io::{load_disparity, load_image, load_labels, save_disparity, save_image, save_labels};
use super::synth::{gen_noise_pair, gen_seg_scene, gen_stereo_pair, gen_texture_scene};
use super::{mosaic, BayerImage, Disparity, Image, LabelMap};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// RGB scene plus its Bayer mosaic.
    Texture,
    /// RGB scene plus label map.
    Seg,
    /// Left/right views plus left disparity.
    Stereo,
    /// Clean scene plus noisy copy.
    Noise,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Texture => "texture",
            DatasetKind::Seg => "seg",
            DatasetKind::Stereo => "stereo",
            DatasetKind::Noise => "noise",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "texture" => Ok(DatasetKind::Texture),
            "seg" => Ok(DatasetKind::Seg),
            "stereo" => Ok(DatasetKind::Stereo),
            "noise" => Ok(DatasetKind::Noise),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}; expected texture, seg, stereo or noise"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bayer: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disparity: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl SampleRecord {
    fn new(id: String, split: Split, seed: u64) -> Self {
        SampleRecord { id, split, seed, rgb: None, bayer: None, labels: None, right: None, disparity: None, noisy: None, sigma: None }
    }

    fn assets(&self) -> impl Iterator<Item = &PathBuf> {
        [&self.rgb, &self.bayer, &self.labels, &self.right, &self.disparity, &self.noisy].into_iter().flatten()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub train: usize,
    pub val: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Segmentation classes.
    pub classes: usize,
    /// Largest stereo disparity in pixels.
    pub d_max: usize,
    /// Noise std for noise pairs.
    pub sigma: f64,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, train: usize, val: usize, size: usize, seed: u64) -> Self {
        DatasetSpec { kind, train, val, height: size, width: size, seed, classes: 5, d_max: 16, sigma: 0.1 }
    }
}

/// Mixes a dataset seed and sample index into an independent per-sample seed.
fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Renders every sample into `dir` and writes the manifest.
pub fn generate_dataset(spec: &DatasetSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    if spec.train == 0 {
        return Err(Error::Data("dataset needs at least one training sample".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (spec.height, spec.width);
    let mut records = Vec::with_capacity(spec.train + spec.val);
    let splits = std::iter::repeat_n(Split::Train, spec.train).chain(std::iter::repeat_n(Split::Val, spec.val));
    for (i, split) in splits.enumerate() {
        let seed = sample_seed(spec.seed, i as u64);
        let id = format!("{}_{i:05}", spec.kind);
        let mut rec = SampleRecord::new(id.clone(), split, seed);
        let rel = |suffix: &str| PathBuf::from(format!("{id}_{suffix}.png"));
        match spec.kind {
            DatasetKind::Texture => {
                let rgb = gen_texture_scene(seed, h, w)?;
                save_image(&rgb, dir.join(rel("rgb")))?;
                save_image(&mosaic(&rgb)?.to_image(), dir.join(rel("bayer")))?;
                rec.rgb = Some(rel("rgb"));
                rec.bayer = Some(rel("bayer"));
            }
            DatasetKind::Seg => {
                let (rgb, labels) = gen_seg_scene(seed, spec.classes, h, w)?;
                save_image(&rgb, dir.join(rel("rgb")))?;
                save_labels(&labels, dir.join(rel("labels")))?;
                rec.rgb = Some(rel("rgb"));
                rec.labels = Some(rel("labels"));
            }
            DatasetKind::Stereo => {
                let pair = gen_stereo_pair(seed, spec.d_max, h, w)?;
                save_image(&pair.left, dir.join(rel("left")))?;
                save_image(&pair.right, dir.join(rel("right")))?;
                save_disparity(&pair.disparity, dir.join(rel("disp")))?;
                rec.rgb = Some(rel("left"));
                rec.right = Some(rel("right"));
                rec.disparity = Some(rel("disp"));
            }
            DatasetKind::Noise => {
                let (noisy, clean) = gen_noise_pair(seed, spec.sigma, h, w)?;
                save_image(&clean, dir.join(rel("rgb")))?;
                save_image(&noisy, dir.join(rel("noisy")))?;
                rec.rgb = Some(rel("rgb"));
                rec.noisy = Some(rel("noisy"));
                rec.sigma = Some(spec.sigma);
            }
        }
        records.push(rec);
    }
    let manifest = Manifest { root: dir.to_path_buf(), records };
    manifest.save()?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory that record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.path();
        let mut out = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads and validates a manifest. `path` may be the file or its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest { root, records };
        m.validate()?;
        Ok(m)
    }

    /// Every referenced asset exists and no id appears twice.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("sample id {:?} appears more than once", r.id)));
            }
            for a in r.assets() {
                let p = self.root.join(a);
                if !p.is_file() {
                    return Err(Error::Data(format!("sample {:?}: missing asset {}", r.id, p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    fn asset(&self, rec: &SampleRecord, p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        p.as_ref()
            .map(|p| self.root.join(p))
            .ok_or_else(|| Error::Data(format!("sample {:?} has no {what}", rec.id)))
    }

    pub fn rgb(&self, rec: &SampleRecord) -> Result<Image> {
        load_image(self.asset(rec, &rec.rgb, "rgb image")?)
    }

    pub fn bayer(&self, rec: &SampleRecord) -> Result<BayerImage> {
        BayerImage::from_image(&load_image(self.asset(rec, &rec.bayer, "bayer mosaic")?)?)
    }

    pub fn labels(&self, rec: &SampleRecord) -> Result<LabelMap> {
        load_labels(self.asset(rec, &rec.labels, "label map")?)
    }

    pub fn right(&self, rec: &SampleRecord) -> Result<Image> {
        load_image(self.asset(rec, &rec.right, "right view")?)
    }

    pub fn disparity(&self, rec: &SampleRecord) -> Result<Disparity> {
        load_disparity(self.asset(rec, &rec.disparity, "disparity")?)
    }

    pub fn noisy(&self, rec: &SampleRecord) -> Result<Image> {
        load_image(self.asset(rec, &rec.noisy, "noisy image")?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_every_kind() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [DatasetKind::Texture, DatasetKind::Seg, DatasetKind::Stereo, DatasetKind::Noise] {
            let sub = dir.path().join(kind.name());
            let m = generate_dataset(&DatasetSpec::new(kind, 3, 2, 32, 7), &sub).unwrap();
            let back = Manifest::load(&sub).unwrap();
            assert_eq!(back.records, m.records);
            assert_eq!((back.count(Split::Train), back.count(Split::Val)), (3, 2));
            let rec = &back.records[0];
            assert_eq!(back.rgb(rec).unwrap().height(), 32);
            match kind {
                DatasetKind::Texture => assert_eq!(back.bayer(rec).unwrap().width(), 32),
                DatasetKind::Seg => assert_eq!(back.labels(rec).unwrap().labels.len(), 32 * 32),
                DatasetKind::Stereo => {
                    back.right(rec).unwrap();
                    assert!(back.disparity(rec).unwrap().valid_count() > 0);
                }
                DatasetKind::Noise => assert_eq!(back.noisy(rec).unwrap().width(), 32),
            }
        }
    }

    #[test]
    fn missing_asset_and_duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&DatasetSpec::new(DatasetKind::Texture, 2, 0, 16, 1), dir.path()).unwrap();
        std::fs::remove_file(m.root.join(m.records[1].bayer.as_ref().unwrap())).unwrap();
        assert!(matches!(Manifest::load(dir.path()), Err(Error::Data(_))));

        let mut dup = generate_dataset(&DatasetSpec::new(DatasetKind::Texture, 2, 0, 16, 1), dir.path()).unwrap();
        dup.records[1].id = dup.records[0].id.clone();
        assert!(dup.validate().is_err());
    }

    #[test]
    fn sample_seeds_are_distinct() {
        let seeds: HashSet<u64> = (0..1000).map(|i| sample_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }

    #[test]
    fn empty_training_split_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(&DatasetSpec::new(DatasetKind::Seg, 0, 2, 16, 1), dir.path()).is_err());
    }
}
