//! Checkpoints: a `manifest.json` holding the graph and the tensor list,
//! plus one AXT1 file per parameter tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::graph::ModelGraph;
use crate::net::{Model, ParamKind};
use crate::tensor::{read_axt, write_axt};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub kind: ParamKind,
    pub frozen: bool,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub graph: ModelGraph,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Parameters that retraining leaves untouched.
pub fn is_frozen(kind: ParamKind) -> bool {
    matches!(kind, ParamKind::Router | ParamKind::Gateway | ParamKind::Buffer)
}

pub fn save_checkpoint(model: &Model, seed: u64, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (i, p) in model.params().into_iter().enumerate() {
        let file = format!("t{i:04}.axt");
        write_axt(&p.value, dir.join(&file))?;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            file,
            kind: p.kind,
            frozen: is_frozen(p.kind),
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        graph: model.graph().clone(),
        seed,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(MANIFEST);
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, Manifest)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut model = Model::from_graph(&manifest.graph, manifest.seed)?;
    let mut values = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let v = read_axt(dir.join(&t.file))?;
        if v.shape() != t.shape.as_slice() {
            bail!(Format, "tensor {} has shape {:?}, manifest says {:?}", t.name, v.shape(), t.shape);
        }
        values.push((t.name.clone(), v));
    }
    model.load_values(&values)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use crate::moe::substitute_moe;
    use crate::graph::Variant;

    #[test]
    fn round_trip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let g = substitute_moe(&arch::toy_cnn(vec![3, 8, 8], 4).unwrap(), Variant::Hard, 3).unwrap();
        let model = Model::from_graph(&g, 11).unwrap();
        let m = save_checkpoint(&model, 11, dir.path()).unwrap();
        assert!(m.tensors.iter().any(|t| t.frozen && t.kind == ParamKind::Router));
        let (back, _) = load_checkpoint(dir.path()).unwrap();
        let a: Vec<_> = model.params().into_iter().map(|p| p.value.clone()).collect();
        let b: Vec<_> = back.params().into_iter().map(|p| p.value.clone()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_checkpoint_is_io_error() {
        assert!(matches!(load_checkpoint("/nonexistent/ckpt"), Err(Error::Io { .. })));
    }
}
