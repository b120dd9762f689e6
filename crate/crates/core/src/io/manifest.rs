//! Dataset manifests and the in-memory datasets they describe.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stan_tensor::Tensor;

use super::{read_bytes, tensor_file, write_atomic};
use crate::{Result, StanError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Openness {
    Known,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    /// `0..K` for known classes, −1 for unknown.
    pub label: i64,
    pub split: Split,
    pub openness: Openness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub image_shape: [usize; 3],
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Number of known classes, i.e. one more than the largest known label.
    pub fn num_known_classes(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.openness == Openness::Known)
            .map(|e| e.label as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| StanError::Data(format!("manifest {}: {m}", self.name));
        if self.image_shape[0] != 3 || self.image_shape[1] == 0 || self.image_shape[2] == 0 {
            return Err(bad(format!("image_shape must be [3, H, W], got {:?}", self.image_shape)));
        }
        for (i, e) in self.entries.iter().enumerate() {
            match e.openness {
                Openness::Known if e.label < 0 => {
                    return Err(bad(format!("entry {i} ({}) is known but has label {}", e.path, e.label)))
                }
                Openness::Unknown if e.label != -1 => {
                    return Err(bad(format!("entry {i} ({}) is unknown but has label {}", e.path, e.label)))
                }
                Openness::Unknown if e.split != Split::Test => {
                    return Err(bad(format!(
                        "entry {i} ({}) is an unknown-class sample in the {:?} split",
                        e.path, e.split
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let m: Self = serde_json::from_slice(&bytes)
            .map_err(|e| StanError::format(path.display(), e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

/// One image and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub path: String,
    /// `None` for unknown-class samples.
    pub label: Option<usize>,
    pub image: Tensor<f32>,
}

impl Sample {
    pub fn label_code(&self) -> i64 {
        self.label.map_or(-1, |l| l as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub name: String,
    pub num_known_classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test_known: Vec<Sample>,
    pub test_unknown: Vec<Sample>,
}

impl Dataset {
    /// Loads every image a manifest lists, checking shapes and labels.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let m = DatasetManifest::load(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut ds = Dataset {
            name: m.name.clone(),
            num_known_classes: m.num_known_classes(),
            ..Default::default()
        };
        for e in &m.entries {
            let file = resolve(&base, &e.path);
            let image = tensor_file::read_tensor(&file)?;
            if image.shape() != m.image_shape {
                return Err(StanError::Data(format!(
                    "{} has shape {:?}, manifest declares {:?}",
                    e.path,
                    image.shape(),
                    m.image_shape
                )));
            }
            let sample = Sample {
                path: e.path.clone(),
                label: (e.openness == Openness::Known).then_some(e.label as usize),
                image,
            };
            match (e.split, e.openness) {
                (Split::Train, _) => ds.train.push(sample),
                (Split::Val, _) => ds.val.push(sample),
                (Split::Test, Openness::Known) => ds.test_known.push(sample),
                (Split::Test, Openness::Unknown) => ds.test_unknown.push(sample),
            }
        }
        Ok(ds)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
