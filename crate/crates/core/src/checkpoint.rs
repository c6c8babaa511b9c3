//! Portable parameter snapshots: name → shape + flat values, tagged with a
//! fingerprint of the configuration that produced them.

use std::collections::BTreeMap;
use std::path::Path;

use diffcore::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_error, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub params: BTreeMap<String, StoredTensor>,
}

/// SHA-256 of the JSON form of a configuration.
pub fn fingerprint<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn capture<C: Serialize>(params: &ParamSet, config: &C) -> Result<Self> {
        let params = params
            .ids()
            .map(|id| {
                let v = params.value(id);
                (
                    params.name(id).to_owned(),
                    StoredTensor {
                        shape: v.shape().to_vec(),
                        values: v.data().to_vec(),
                    },
                )
            })
            .collect();
        Ok(Self {
            fingerprint: fingerprint(config)?,
            params,
        })
    }

    /// Copies stored values into `params` after checking the fingerprint,
    /// the parameter names and every shape.
    pub fn restore<C: Serialize>(&self, params: &mut ParamSet, config: &C) -> Result<()> {
        let expected = fingerprint(config)?;
        if self.fingerprint != expected {
            return Err(Error::Checkpoint(format!(
                "fingerprint {} does not match configuration {expected}",
                self.fingerprint
            )));
        }
        if self.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored tensors for {} parameters",
                self.params.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_owned();
            let stored = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if stored.shape != params.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    stored.shape,
                    params.value(id).shape()
                )));
            }
            let t = Tensor::new(stored.shape.clone(), stored.values.clone())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("{name}: non-finite values")));
            }
            *params.value_mut(id) = t;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(io_error(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w", Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 1e-7]).unwrap());
        p.add("b", Tensor::vector(vec![0.25]));
        p
    }

    #[test]
    fn round_trip_is_exact() {
        let p = set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::capture(&p, &"cfg").unwrap().save(&path).unwrap();
        let mut q = set();
        for id in q.ids().collect::<Vec<_>>() {
            q.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Checkpoint::load(&path).unwrap().restore(&mut q, &"cfg").unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let p = set();
        let ck = Checkpoint::capture(&p, &"cfg").unwrap();
        let mut q = set();
        assert!(matches!(ck.restore(&mut q, &"other"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = set();
        let mut ck = Checkpoint::capture(&p, &"cfg").unwrap();
        ck.params.get_mut("b").unwrap().shape = vec![1, 1];
        let mut q = set();
        assert!(ck.restore(&mut q, &"cfg").is_err());
    }
}
