//! Model snapshots: the architecture config plus every named parameter and buffer.
//!
//! On disk a checkpoint is one `.npz` archive. `config` holds the JSON config
//! as `uint8` bytes and every other entry is an `f64` array named by its
//! parameter path.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use ndarray_npy::{NpzReader, NpzWriter};

use crate::error::{Error, Result};
use crate::model::{CelnetConfig, CelnetModel};
use crate::nn::Module;

const CONFIG_ENTRY: &str = "config";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CelnetConfig,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture(model: &mut CelnetModel) -> Self {
        let mut params = BTreeMap::new();
        model.visit_params("", &mut |name, p| {
            params.insert(name.to_string(), (p.shape.clone(), p.value.clone()));
        });
        Checkpoint { config: model.config().clone(), params }
    }

    /// Copies values into `model`, which must share the config.
    pub fn restore(&self, model: &mut CelnetModel) -> Result<()> {
        if model.config() != &self.config {
            return Err(Error::Checkpoint("checkpoint config does not match the model".into()));
        }
        let mut problem = None;
        let mut seen = 0;
        model.visit_params("", &mut |name, p| match self.params.get(name) {
            Some((shape, value)) if shape == &p.shape && value.len() == p.value.len() => {
                p.value.copy_from_slice(value);
                seen += 1;
            }
            Some((shape, _)) => {
                problem.get_or_insert(format!("`{name}` has shape {shape:?}, model expects {:?}", p.shape));
            }
            None => {
                problem.get_or_insert(format!("missing parameter `{name}`"));
            }
        });
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        if seen != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} entries but the model has {seen}",
                self.params.len()
            )));
        }
        model.clear_cache();
        Ok(())
    }

    pub fn into_model(self) -> Result<CelnetModel> {
        let mut model = CelnetModel::build(self.config.clone(), 0)?;
        self.restore(&mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = |e: ndarray_npy::WriteNpzError| Error::Checkpoint(e.to_string());
        let mut npz = NpzWriter::new(BufWriter::new(File::create(path)?));
        let json = Array1::from(serde_json::to_vec(&self.config)?);
        npz.add_array(CONFIG_ENTRY, &json).map_err(ck)?;
        for (name, (shape, value)) in &self.params {
            let arr = ArrayD::from_shape_vec(IxDyn(shape), value.clone())
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            npz.add_array(name.as_str(), &arr).map_err(ck)?;
        }
        npz.finish().map_err(ck)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = |e: ndarray_npy::ReadNpzError| Error::Checkpoint(format!("{}: {e}", path.display()));
        let mut npz = NpzReader::new(BufReader::new(File::open(path)?)).map_err(ck)?;
        let names = npz.names().map_err(ck)?;
        if !names.iter().any(|n| n == CONFIG_ENTRY) {
            return Err(Error::Checkpoint(format!("{}: missing `{CONFIG_ENTRY}` entry", path.display())));
        }
        let json: Array1<u8> = npz.by_name(CONFIG_ENTRY).map_err(ck)?;
        let config: CelnetConfig = serde_json::from_slice(json.as_slice().unwrap_or(&json.to_vec()))?;
        config.validate()?;
        let mut params = BTreeMap::new();
        for name in names.into_iter().filter(|n| n != CONFIG_ENTRY) {
            let arr: ArrayD<f64> = npz.by_name(&name).map_err(ck)?;
            let shape = arr.shape().to_vec();
            params.insert(name, (shape, arr.into_raw_vec_and_offset().0));
        }
        Ok(Checkpoint { config, params })
    }
}

pub fn save_model(model: &mut CelnetModel, path: &Path) -> Result<()> {
    Checkpoint::capture(model).save(path)
}

pub fn load_model(path: &Path) -> Result<CelnetModel> {
    Checkpoint::load(path)?.into_model()
}
