use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{AutodiffError, Gradients, Result, Tape, Tensor, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Named collection of learnable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    params: BTreeMap<String, Tensor>,
}

/// Parameters of a [`ParamStore`] recorded as leaves on one tape.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    /// Gradient for every bound parameter (zeros where disconnected).
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.wrt(tape, v)))
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        BoundParams { vars }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            params: self.params.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(AutodiffError::CheckpointVersion(file.version));
        }
        for (name, t) in &file.params {
            if t.shape().iter().product::<usize>() != t.len() {
                return Err(AutodiffError::invalid(
                    "checkpoint",
                    format!("parameter `{name}` has shape {:?} but {} values", t.shape(), t.len()),
                ));
            }
        }
        Ok(Self {
            params: file.params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_rejects_inconsistent_shape() {
        let text = r#"{"version":1,"params":{"w":{"shape":[2,2],"values":[1.0,2.0,3.0]}}}"#;
        assert!(ParamStore::from_json(text).is_err());
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let text = r#"{"version":9,"params":{}}"#;
        assert!(matches!(
            ParamStore::from_json(text),
            Err(AutodiffError::CheckpointVersion(9))
        ));
    }

    #[test]
    fn awkward_floats_round_trip_bit_exactly() {
        let mut store = ParamStore::new();
        let values = vec![0.1 + 0.2, 1e-300, -2.2250738585072014e-308, 1.0 / 3.0, 6.02214076e23];
        store.insert("w", Tensor::vector(values.clone()));
        let back = ParamStore::from_json(&store.to_json().unwrap()).unwrap();
        let got = back.get("w").unwrap().data();
        for (a, b) in values.iter().zip(got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
