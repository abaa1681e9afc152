//! Versioned JSON container for model parameters.
//!
//! A checkpoint holds a format tag, a schema version, a component tag, the
//! architecture config, named parameter matrices in `f64`, a few boolean
//! flags, and an optional training-state record used for resuming.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use spkanon_autograd::{Float, ParamSet, StoredMatrix};

use crate::error::{Error, Result};

pub const FORMAT: &str = "spkanon-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Encoder,
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedMatrix {
    name: String,
    value: StoredMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    component: Component,
    config: serde_json::Value,
    params: Vec<NamedMatrix>,
    #[serde(default)]
    flags: BTreeMap<String, bool>,
    #[serde(default)]
    training: Option<serde_json::Value>,
}

fn invalid(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn from_params<C: Serialize, F: Float>(
        component: Component,
        config: &C,
        params: &ParamSet<F>,
    ) -> Result<Self> {
        let config = serde_json::to_value(config)
            .map_err(|e| Error::InvalidConfig(format!("config not serializable: {e}")))?;
        Ok(Self {
            format: FORMAT.to_string(),
            version: VERSION,
            component,
            config,
            params: params
                .iter()
                .map(|(name, value)| NamedMatrix {
                    name: name.to_string(),
                    value: StoredMatrix::from_array(value),
                })
                .collect(),
            flags: BTreeMap::new(),
            training: None,
        })
    }

    pub fn component(&self) -> Component {
        self.component
    }

    pub fn with_flag(mut self, name: &str, value: bool) -> Self {
        self.flags.insert(name.to_string(), value);
        self
    }

    /// A missing flag reads as `false`.
    pub fn flag(&self, name: &str) -> bool {
        self.flags.get(name).copied().unwrap_or(false)
    }

    pub fn with_training<T: Serialize>(mut self, state: &T) -> Result<Self> {
        self.training = Some(
            serde_json::to_value(state)
                .map_err(|e| Error::InvalidConfig(format!("training state: {e}")))?,
        );
        Ok(self)
    }

    pub fn training<T: DeserializeOwned>(&self, path: &Path) -> Result<Option<T>> {
        self.training
            .clone()
            .map(|v| serde_json::from_value(v).map_err(|e| invalid(path, format!("training state: {e}"))))
            .transpose()
    }

    pub fn config<C: DeserializeOwned>(&self, path: &Path) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| invalid(path, format!("config: {e}")))
    }

    /// Overwrites `params` with the stored values, matching names and shapes.
    pub fn restore_into<F: Float>(&self, path: &Path, params: &mut ParamSet<F>) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(invalid(
                path,
                format!("{} stored parameters, model has {}", self.params.len(), params.len()),
            ));
        }
        for stored in &self.params {
            let id = params
                .id_of(&stored.name)
                .ok_or_else(|| invalid(path, format!("unknown parameter {}", stored.name)))?;
            let value = stored
                .value
                .to_array::<F>()
                .filter(|a| a.dim() == params.get(id).dim())
                .ok_or_else(|| invalid(path, format!("parameter {} has the wrong shape", stored.name)))?;
            *params.get_mut(id) = value;
        }
        Ok(())
    }

    /// Writes the checkpoint atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| invalid(path, e.to_string()))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint and checks its format, version and component.
    pub fn load(path: &Path, expected: Component) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| invalid(path, format!("not JSON: {e}")))?;
        if value.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
            return Err(invalid(path, "not a spkanon checkpoint"));
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == VERSION as u64 => {}
            other => {
                return Err(invalid(
                    path,
                    format!("unsupported schema version {other:?}, expected {VERSION}"),
                ))
            }
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| invalid(path, e.to_string()))?;
        if ckpt.component != expected {
            return Err(invalid(
                path,
                format!("holds a {:?}, expected a {expected:?}", ckpt.component),
            ));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn params() -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("a", Array2::from_elem((2, 3), 0.1 + 1e-17));
        p.add("b", Array2::from_shape_fn((1, 4), |(_, j)| j as f64 / 3.0));
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        let p = params();
        Checkpoint::from_params(Component::Generator, &vec![1, 2], &p)
            .unwrap()
            .with_flag("zeroed", true)
            .with_training(&42u64)
            .unwrap()
            .save(&path)
            .unwrap();
        let ckpt = Checkpoint::load(&path, Component::Generator).unwrap();
        let mut q = params();
        q.values_mut().iter_mut().for_each(|v| v.fill(0.0));
        ckpt.restore_into(&path, &mut q).unwrap();
        assert_eq!(q.fingerprint(), p.fingerprint());
        assert!(ckpt.flag("zeroed"));
        assert!(!ckpt.flag("missing"));
        assert_eq!(ckpt.training::<u64>(&path).unwrap(), Some(42));
        assert_eq!(ckpt.config::<Vec<i32>>(&path).unwrap(), vec![1, 2]);
    }

    #[test]
    fn schema_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        Checkpoint::from_params(Component::Encoder, &(), &params())
            .unwrap()
            .save(&path)
            .unwrap();
        assert!(Checkpoint::load(&path, Component::Generator).is_err());

        let text = fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":99");
        fs::write(&path, text).unwrap();
        let err = Checkpoint::load(&path, Component::Encoder).unwrap_err();
        assert!(err.to_string().contains("version"));

        fs::write(&path, "{}").unwrap();
        assert!(Checkpoint::load(&path, Component::Encoder).is_err());
        assert!(Checkpoint::load(&dir.path().join("nope.json"), Component::Encoder).is_err());
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        let ckpt = Checkpoint::from_params(Component::Encoder, &(), &params()).unwrap();
        let mut other = ParamSet::<f64>::new();
        other.add("a", Array2::zeros((3, 2)));
        other.add("b", Array2::zeros((1, 4)));
        assert!(ckpt.restore_into(&path, &mut other).is_err());
        let mut fewer = ParamSet::<f64>::new();
        fewer.add("a", Array2::zeros((2, 3)));
        assert!(ckpt.restore_into(&path, &mut fewer).is_err());
    }
}
