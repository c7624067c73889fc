//! Named parameter arrays and their on-disk checkpoint format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backbone::NetConfig;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Names and shapes of a parameter set, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint(pub Vec<(String, Vec<usize>)>);

/// An ordered collection of named parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(params: Vec<Param<T>>) -> Result<Self> {
        for p in &params {
            let n: usize = p.shape.iter().product();
            if n != p.data.len() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?} but {} values",
                    p.name,
                    p.shape,
                    p.data.len()
                )));
            }
        }
        let mut names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate parameter name {}", w[0])));
        }
        Ok(Self { params })
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint(self.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect())
    }

    pub fn check_compatible(&self, other: &ParamSet<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Fingerprint(format!(
                "{} vs {} parameter arrays",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Fingerprint(format!(
                    "{} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn by_index(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::from(v).expect("representable")).collect(),
                })
                .collect(),
        }
    }

    /// All values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// `manifest.json` of a parameter checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamManifest {
    pub dtype: String,
    pub net: NetConfig,
    pub step: usize,
    pub params: Vec<ParamEntry>,
}

pub const PARAM_MANIFEST: &str = "manifest.json";

/// Writes one little-endian f32 file per parameter plus a JSON manifest.
pub fn save_params(dir: &Path, params: &ParamSet<f32>, net: &NetConfig, step: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut entries = Vec::with_capacity(params.len());
    for p in params.iter() {
        let file = format!("{}.f32", p.name);
        let mut bytes = Vec::with_capacity(p.data.len() * 4);
        for v in &p.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            file,
        });
    }
    let manifest = ParamManifest {
        dtype: "f32".into(),
        net: net.clone(),
        step,
        params: entries,
    };
    let path = dir.join(PARAM_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("parameter manifest", e))?;
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_param_manifest(dir: &Path) -> Result<ParamManifest> {
    let path = dir.join(PARAM_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Loads a checkpoint directory. When `expect` is given, the stored network
/// configuration must match it exactly.
pub fn load_params(dir: &Path, expect: Option<&NetConfig>) -> Result<(ParamSet<f32>, ParamManifest)> {
    let manifest = read_param_manifest(dir)?;
    if manifest.dtype != "f32" {
        return Err(Error::Corrupt {
            path: dir.join(PARAM_MANIFEST),
            reason: format!("unsupported dtype {:?}", manifest.dtype),
        });
    }
    if let Some(cfg) = expect {
        if cfg != &manifest.net {
            return Err(Error::Fingerprint(format!(
                "checkpoint was written for {:?}, expected {:?}",
                manifest.net, cfg
            )));
        }
    }
    let mut params = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(format!("reading {}", path.display()), err))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Corrupt {
                path,
                reason: format!("expected {} bytes for shape {:?}, found {}", n * 4, e.shape, bytes.len()),
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {} in {}", e.name, dir.display())));
        }
        params.push(Param {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
    }
    let set = ParamSet::new(params)?;
    Ok((set, manifest))
}
