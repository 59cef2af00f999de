//! The JSON document used for target checkpoints and explainer parameters:
//! `{"config": {...}, "weights": {name: {"shape": [r, c], "data": [...]}}}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};
use crate::hetgraph::{read_file, write_file};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightFile<C> {
    pub config: C,
    pub weights: BTreeMap<String, Tensor>,
}

impl<C: Serialize + DeserializeOwned> WeightFile<C> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        write_file(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn take(&mut self, name: &str, shape: (usize, usize)) -> Result<Tensor> {
        let t = self
            .weights
            .remove(name)
            .ok_or_else(|| Error::Dimension(format!("weight {name:?} missing")))?;
        if t.shape() != shape {
            return Err(Error::Dimension(format!(
                "weight {name:?} is {}x{}, expected {}x{}",
                t.rows(),
                t.cols(),
                shape.0,
                shape.1
            )));
        }
        Ok(t)
    }
}
