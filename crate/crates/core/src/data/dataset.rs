//! Labeled/unlabeled/test splits, their on-disk layout and the split manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::phantom::{generate_phantom, PhantomConfig};
use super::transform::normalize;
use super::volume::{load_mask, load_volume, save_mask, save_volume, BinaryMask, Volume, VolumeKind};
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub image: Volume,
    pub label: BinaryMask,
}

impl LabeledCase {
    /// Pairs an image with its label; the label must match in shape and contain foreground.
    pub fn new(image: Volume, label: BinaryMask) -> Result<Self> {
        if image.shape() != label.shape() {
            return Err(Error::Shape(format!(
                "image {} vs label {}",
                image.shape(),
                label.shape()
            )));
        }
        if label.is_empty() {
            return Err(Error::Degenerate(format!("label of {:?} has no foreground", image.id)));
        }
        Ok(Self { image, label })
    }

    /// Crops and augmented views may legitimately lose all foreground.
    pub(crate) fn new_unchecked(image: Volume, label: BinaryMask) -> Self {
        debug_assert_eq!(image.shape(), label.shape());
        Self { image, label }
    }

    pub fn id(&self) -> &str {
        &self.image.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            labeled: 4,
            unlabeled: 16,
            test: 10,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub labeled: Vec<LabeledCase>,
    pub unlabeled: Vec<Volume>,
    pub test: Vec<LabeledCase>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(Error::Config("dataset needs at least one labeled case".into()));
        }
        let mut seen = HashSet::new();
        let ids = self
            .labeled
            .iter()
            .map(|c| c.id())
            .chain(self.unlabeled.iter().map(|v| v.id.as_str()))
            .chain(self.test.iter().map(|c| c.id()));
        for id in ids {
            if !seen.insert(id) {
                return Err(Error::Config(format!("duplicate case id {id:?}")));
            }
        }
        Ok(())
    }

    /// Generates and normalizes every case; a pure function of the phantom seed.
    ///
    /// Phantom indices run labeled, then unlabeled, then test, so every case is distinct.
    pub fn generate(cfg: &PhantomConfig, sizes: SplitSizes) -> Result<Self> {
        cfg.validate()?;
        let total = sizes.labeled + sizes.unlabeled + sizes.test;
        let cases = exec::map_indices(total, |i| -> Result<LabeledCase> {
            let raw = generate_phantom(cfg, i as u64)?;
            let (prefix, k) = if i < sizes.labeled {
                ("lab", i)
            } else if i < sizes.labeled + sizes.unlabeled {
                ("unl", i - sizes.labeled)
            } else {
                ("test", i - sizes.labeled - sizes.unlabeled)
            };
            let mut image = normalize(&raw.image)?;
            image.id = format!("{prefix}_{k:03}");
            LabeledCase::new(image, raw.label)
        });
        let mut split = DatasetSplit::default();
        for (i, case) in cases.into_iter().enumerate() {
            let case = case?;
            if i < sizes.labeled {
                split.labeled.push(case);
            } else if i < sizes.labeled + sizes.unlabeled {
                split.unlabeled.push(case.image);
            } else {
                split.test.push(case);
            }
        }
        split.validate()?;
        Ok(split)
    }
}

/// Split membership by id, stored as `manifest.json` in a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
}

/// Which parts of a dataset directory to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadScope {
    All,
    /// Labeled and unlabeled training data; test files are never opened.
    Training,
    /// Labeled training cases only; unlabeled and test files are never opened.
    LabeledOnly,
    TestOnly,
}

impl LoadScope {
    fn labeled(self) -> bool {
        self != LoadScope::TestOnly
    }

    fn unlabeled(self) -> bool {
        matches!(self, LoadScope::All | LoadScope::Training)
    }

    fn test(self) -> bool {
        matches!(self, LoadScope::All | LoadScope::TestOnly)
    }
}

/// A dataset on disk. Records every payload file it opens.
#[derive(Debug)]
pub struct DatasetDir {
    root: PathBuf,
    accessed: Mutex<Vec<PathBuf>>,
}

impl DatasetDir {
    pub const MANIFEST: &'static str = "manifest.json";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            accessed: Mutex::new(Vec::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}_image.raw"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}_label.raw"))
    }

    /// Files opened so far, in access order.
    pub fn accessed(&self) -> Vec<PathBuf> {
        self.accessed.lock().expect("access log").clone()
    }

    pub fn write(&self, split: &DatasetSplit, seed: u64) -> Result<Manifest> {
        split.validate()?;
        fs::create_dir_all(&self.root).map_err(|e| Error::io(format!("creating {}", self.root.display()), e))?;
        for case in split.labeled.iter().chain(&split.test) {
            save_volume(&case.image, VolumeKind::Image, &self.image_path(case.id()))?;
            save_mask(&case.label, case.image.spacing, case.id(), VolumeKind::Label, &self.label_path(case.id()))?;
        }
        for v in &split.unlabeled {
            save_volume(v, VolumeKind::Image, &self.image_path(&v.id))?;
        }
        let manifest = Manifest {
            seed,
            labeled: split.labeled.iter().map(|c| c.id().to_string()).collect(),
            unlabeled: split.unlabeled.iter().map(|v| v.id.clone()).collect(),
            test: split.test.iter().map(|c| c.id().to_string()).collect(),
        };
        let path = self.root.join(Self::MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(manifest)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.root.join(Self::MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    fn note(&self, p: &Path) {
        self.accessed.lock().expect("access log").push(p.to_path_buf());
    }

    fn load_image(&self, id: &str) -> Result<Volume> {
        let p = self.image_path(id);
        self.note(&p);
        let (v, kind) = load_volume(&p)?;
        if kind != VolumeKind::Image {
            return Err(Error::Corrupt {
                path: p,
                reason: format!("expected an image, sidecar says {kind:?}"),
            });
        }
        Ok(v)
    }

    fn load_case(&self, id: &str) -> Result<LabeledCase> {
        let image = self.load_image(id)?;
        let p = self.label_path(id);
        self.note(&p);
        let (label, _) = load_mask(&p)?;
        LabeledCase::new(image, label)
    }

    pub fn load(&self, scope: LoadScope) -> Result<DatasetSplit> {
        let m = self.manifest()?;
        let mut split = DatasetSplit::default();
        if scope.labeled() {
            split.labeled = m.labeled.iter().map(|id| self.load_case(id)).collect::<Result<_>>()?;
        }
        if scope.unlabeled() {
            split.unlabeled = m.unlabeled.iter().map(|id| self.load_image(id)).collect::<Result<_>>()?;
        }
        if scope.test() {
            split.test = m.test.iter().map(|id| self.load_case(id)).collect::<Result<_>>()?;
        }
        if scope.labeled() {
            split.validate()?;
        }
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig {
            shape: [16, 16, 16],
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_the_seed() {
        let sizes = SplitSizes {
            labeled: 2,
            unlabeled: 3,
            test: 2,
        };
        let a = DatasetSplit::generate(&small(), sizes).unwrap();
        let b = DatasetSplit::generate(&small(), sizes).unwrap();
        assert_eq!(a.labeled, b.labeled);
        assert_eq!(a.unlabeled, b.unlabeled);
        assert_eq!(a.test, b.test);
        for c in &a.labeled {
            let (m, s) = c.image.moments();
            assert!(m.abs() <= 1e-5 && (s - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut split = DatasetSplit::generate(
            &small(),
            SplitSizes {
                labeled: 1,
                unlabeled: 1,
                test: 0,
            },
        )
        .unwrap();
        split.unlabeled[0].id = split.labeled[0].id().to_string();
        assert!(split.validate().is_err());
        assert!(DatasetSplit::default().validate().is_err());
    }

    #[test]
    fn disk_round_trip_and_scoped_loading() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SplitSizes {
            labeled: 2,
            unlabeled: 2,
            test: 1,
        };
        let split = DatasetSplit::generate(&small(), sizes).unwrap();
        let ds = DatasetDir::new(dir.path());
        ds.write(&split, 9).unwrap();

        let all = DatasetDir::new(dir.path()).load(LoadScope::All).unwrap();
        assert_eq!(all.labeled, split.labeled);
        assert_eq!(all.unlabeled, split.unlabeled);

        let sup = DatasetDir::new(dir.path());
        let loaded = sup.load(LoadScope::LabeledOnly).unwrap();
        assert!(loaded.unlabeled.is_empty() && loaded.test.is_empty());
        assert!(sup
            .accessed()
            .iter()
            .all(|p| !p.file_name().unwrap().to_string_lossy().starts_with("unl_")));
    }

    #[test]
    fn empty_label_rejected() {
        let img = Volume::new(vec![0.0; 8], super::super::Shape3::new(2, 2, 2), [1.0; 3], "x").unwrap();
        let lab = BinaryMask::zeros(img.shape());
        assert!(LabeledCase::new(img, lab).is_err());
    }
}
