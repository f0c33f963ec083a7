//! Named parameter storage with deterministic initialization and the
//! checkpoint directory format (IMDT tensors + `manifest.json`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use imd_core::{NdTensor, TensorData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Normal(f64),
}

struct Entry {
    var: Var,
    trainable: bool,
}

/// All parameters of a model, created in a fixed order from one seeded stream.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { device: Device::Cpu, dtype, entries: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn create(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        if self.entries.contains_key(name) {
            return Err(ModelError::Config(format!("parameter {name} defined twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::Normal(std) => (0..n).map(|_| self.rng.sample::<f64, _>(StandardNormal) * std).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = if trainable { var.as_tensor().clone() } else { var.as_tensor().detach() };
        self.entries.insert(name.to_string(), Entry { var, trainable });
        Ok(out)
    }

    /// A trainable parameter.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.create(name, shape, init, true)
    }

    /// A frozen parameter: saved with the checkpoint, never optimized, and
    /// detached so no gradient is accumulated for it.
    pub fn frozen(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.create(name, shape, init, false)
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries.values().filter(|e| e.trainable).map(|e| e.var.clone()).collect()
    }

    /// Named trainable variables, in name order.
    pub fn named_trainable(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.var.elem_count()).sum()
    }

    /// Writes every parameter as an IMDT file plus `manifest.json`.
    pub fn save(&self, dir: &Path, spec: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut layers = BTreeMap::new();
        for (name, e) in &self.entries {
            let file = format!("{}.imdt", name.replace('/', "."));
            let t = e.var.as_tensor();
            let shape = t.dims().to_vec();
            let flat = t.flatten_all()?;
            let nd = match self.dtype {
                DType::F64 => NdTensor::new(shape.clone(), TensorData::F64(flat.to_vec1::<f64>()?))?,
                _ => NdTensor::new(shape.clone(), TensorData::F32(flat.to_dtype(DType::F32)?.to_vec1::<f32>()?))?,
            };
            nd.write(dir.join(&file))?;
            layers.insert(name.clone(), LayerEntry { file, shape, trainable: e.trainable });
        }
        let manifest = Manifest { format: MANIFEST_FORMAT.into(), version: 1, spec, layers };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Overwrites parameter values from a checkpoint written by [`ParamStore::save`].
    ///
    /// The manifest's spec and layer table must match this store exactly; any
    /// difference is reported line by line.
    pub fn load(&self, dir: &Path, spec: &serde_json::Value) -> Result<()> {
        let manifest = read_manifest(dir)?;
        let mut diff = Vec::new();
        if &manifest.spec != spec {
            diff.extend(json_diff("spec", spec, &manifest.spec));
        }
        for (name, e) in &self.entries {
            match manifest.layers.get(name) {
                None => diff.push(format!("- {name}: missing from checkpoint")),
                Some(l) if l.shape != e.var.dims() => {
                    diff.push(format!("~ {name}: shape {:?} in checkpoint, {:?} expected", l.shape, e.var.dims()))
                }
                _ => {}
            }
        }
        for name in manifest.layers.keys() {
            if !self.entries.contains_key(name) {
                diff.push(format!("+ {name}: unknown to this model"));
            }
        }
        if !diff.is_empty() {
            return Err(ModelError::CheckpointMismatch(diff.join("\n")));
        }
        for (name, e) in &self.entries {
            let layer = &manifest.layers[name];
            let nd = NdTensor::read(dir.join(&layer.file))?;
            let t = Tensor::from_vec(nd.to_f64_vec(), nd.shape(), &self.device)?.to_dtype(self.dtype)?;
            e.var.set(&t)?;
        }
        Ok(())
    }
}

pub const MANIFEST_FORMAT: &str = "imd-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: serde_json::Value,
    pub layers: BTreeMap<String, LayerEntry>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(ModelError::CheckpointMismatch(format!("unknown manifest format {}", manifest.format)));
    }
    Ok(manifest)
}

fn json_diff(path: &str, want: &serde_json::Value, got: &serde_json::Value) -> Vec<String> {
    use serde_json::Value;
    match (want, got) {
        (Value::Object(a), Value::Object(b)) => {
            let mut out = Vec::new();
            for (k, va) in a {
                match b.get(k) {
                    Some(vb) => out.extend(json_diff(&format!("{path}.{k}"), va, vb)),
                    None => out.push(format!("- {path}.{k}: missing from checkpoint (expected {va})")),
                }
            }
            for k in b.keys().filter(|k| !a.contains_key(*k)) {
                out.push(format!("+ {path}.{k}: unexpected in checkpoint"));
            }
            out
        }
        _ if want == got => Vec::new(),
        _ => vec![format!("~ {path}: checkpoint has {got}, model expects {want}")],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut a = ParamStore::new(7, DType::F32);
        let mut b = ParamStore::new(7, DType::F32);
        let ta = a.param("w", &[3, 4], Init::FanIn(4)).unwrap();
        let tb = b.param("w", &[3, 4], Init::FanIn(4)).unwrap();
        assert_eq!(ta.to_vec2::<f32>().unwrap(), tb.to_vec2::<f32>().unwrap());
        let mut c = ParamStore::new(8, DType::F32);
        let tc = c.param("w", &[3, 4], Init::FanIn(4)).unwrap();
        assert_ne!(ta.to_vec2::<f32>().unwrap(), tc.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn frozen_params_are_not_optimized() {
        let mut s = ParamStore::new(0, DType::F32);
        s.param("a", &[2], Init::Ones).unwrap();
        s.frozen("b", &[2], Init::Ones).unwrap();
        assert_eq!(s.trainable_vars().len(), 1);
        assert!(s.param("a", &[2], Init::Ones).is_err());
    }

    #[test]
    fn save_load_round_trip_and_mismatch_diff() {
        let dir = tempfile::tempdir().unwrap();
        let spec = serde_json::json!({"width": 4});
        let mut s = ParamStore::new(1, DType::F32);
        let w = s.param("layer/w", &[2, 2], Init::Normal(1.0)).unwrap();
        s.save(dir.path(), spec.clone()).unwrap();

        let mut fresh = ParamStore::new(99, DType::F32);
        let w2 = fresh.param("layer/w", &[2, 2], Init::Zeros).unwrap();
        fresh.load(dir.path(), &spec).unwrap();
        assert_eq!(w.to_vec2::<f32>().unwrap(), w2.to_vec2::<f32>().unwrap());

        let err = fresh.load(dir.path(), &serde_json::json!({"width": 8})).unwrap_err();
        assert!(err.to_string().contains("spec.width"), "{err}");

        let mut other = ParamStore::new(0, DType::F32);
        other.param("layer/v", &[2, 2], Init::Zeros).unwrap();
        let err = other.load(dir.path(), &spec).unwrap_err().to_string();
        assert!(err.contains("- layer/v") && err.contains("+ layer/w"), "{err}");
    }
}
