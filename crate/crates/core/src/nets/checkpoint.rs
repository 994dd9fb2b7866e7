//! Model checkpoints: the network config plus every named parameter tensor.

use std::path::Path;

use crate::container;
use crate::error::{Error, Result};
use crate::scalar::Real;

use super::{Model, NetConfig};

const KIND: &str = "model";

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let meta = serde_json::to_value(model.config()).map_err(|e| Error::Serde(e.to_string()))?;
    let tensors: Vec<_> = model.params().iter().collect();
    container::save(path, KIND, meta, &tensors)
}

/// Loads a checkpoint; when `expected` is given its config must match exactly.
pub fn load_model<T: Real>(path: &Path, expected: Option<&NetConfig>) -> Result<Model<T>> {
    let c = container::load::<T>(path, KIND)?;
    let config: NetConfig = serde_json::from_value(c.meta).map_err(|e| Error::Corrupt {
        path: path.to_owned(),
        message: format!("bad network config: {e}"),
    })?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was built for {config:?}, expected {exp:?}"
            )));
        }
    }
    Model::from_tensors(config, c.tensors)
}
