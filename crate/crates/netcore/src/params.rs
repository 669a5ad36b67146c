use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{NetError, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Owner of every trainable tensor of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    blob: String,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

const FORMAT: &str = "f64-le";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Writes `<stem>.json` (names, shapes, offsets) and `<stem>.bin`
    /// (all values as little-endian f64, concatenated in store order).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (json_path, bin_path) = checkpoint_paths(stem);
        let mut blob = Vec::with_capacity(self.num_scalars() * 8);
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for p in &self.params {
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            for v in p.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += p.value.numel();
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            blob: bin_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            params: entries,
        };
        fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)?;
        fs::write(&bin_path, blob)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (json_path, bin_path) = checkpoint_paths(stem);
        let manifest: Manifest = serde_json::from_slice(&fs::read(&json_path)?)?;
        let bad = |reason: String| NetError::Checkpoint {
            path: json_path.clone(),
            reason,
        };
        if manifest.format != FORMAT {
            return Err(bad(format!("unsupported format {}", manifest.format)));
        }
        let blob = fs::read(&bin_path)?;
        if blob.len() % 8 != 0 {
            return Err(bad("blob length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut store = ParamStore::new();
        let mut expected_offset = 0;
        for e in manifest.params {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + n > values.len() {
                return Err(bad(format!("parameter {} has a bad offset", e.name)));
            }
            let data = values[e.offset..e.offset + n].to_vec();
            store.add(e.name, Tensor::new(e.shape, data)?);
            expected_offset += n;
        }
        if expected_offset != values.len() {
            return Err(bad("trailing data in blob".into()));
        }
        Ok(store)
    }
}

fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Gradient buffer aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    values: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            values: store
                .params
                .iter()
                .map(|p| vec![0.0; p.value.numel()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero(&mut self) {
        for g in &mut self.values {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn is_zero(&self, id: ParamId) -> bool {
        self.values[id.0].iter().all(|&x| x == 0.0)
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        for (a, g) in self.values[id.0].iter_mut().zip(grad) {
            *a += g;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|x| x.is_finite())
    }
}
