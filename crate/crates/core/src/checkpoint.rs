//! Checkpoint directories: `manifest.json` plus one little-endian f32 `.bin` per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub component: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub components: Vec<String>,
    pub params: Vec<ParamEntry>,
    pub config: serde_json::Value,
}

/// Component of a parameter: the name prefix before the first dot.
pub fn component_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Parameters grouped by component, in registration order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub components: BTreeMap<String, ParamStore<f32>>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn component(&self, name: &str) -> Result<&ParamStore<f32>> {
        self.components
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no '{name}' component")))
    }

    /// Overwrite `target` with values from the checkpoint, looking every name up in its component.
    pub fn load_into(&self, target: &mut ParamStore<f32>) -> Result<()> {
        let mut merged = ParamStore::new();
        for (_, name, _) in target.iter() {
            let src = self.component(component_of(name))?;
            let id = src
                .id(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            merged.insert_raw(name, src.get(id).clone());
        }
        target.load_from(&merged)
    }
}

pub fn save_checkpoint(
    dir: &Path,
    stores: &[&ParamStore<f32>],
    config: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    let mut components: Vec<String> = Vec::new();
    for store in stores {
        for (_, name, value) in store.iter() {
            let component = component_of(name).to_string();
            if !components.contains(&component) {
                components.push(component.clone());
            }
            let file = format!("{name}.bin");
            let bytes: Vec<u8> = value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            params.push(ParamEntry {
                component,
                name: name.to_string(),
                shape: value.shape().to_vec(),
                dtype: "f32".into(),
                file,
            });
        }
    }
    io::write_json(
        &dir.join("manifest.json"),
        &Manifest {
            components,
            params,
            config,
        },
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::format(&manifest_path, "missing checkpoint manifest"));
    }
    let manifest: Manifest = io::read_json(&manifest_path)?;
    let mut components: BTreeMap<String, ParamStore<f32>> = BTreeMap::new();
    for p in &manifest.params {
        if p.dtype != "f32" {
            return Err(Error::format(
                &manifest_path,
                format!("unsupported dtype {} for {}", p.dtype, p.name),
            ));
        }
        let path = dir.join(&p.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n: usize = p.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::format(
                &path,
                format!("expected {} bytes, found {}", 4 * n, bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        components
            .entry(p.component.clone())
            .or_default()
            .insert_raw(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        components,
        config: manifest.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_by_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::<f32>::new();
        a.register("qbs.w", &[2, 3], Init::Normal { std: 1.0 }, &mut rng);
        a.register("stscls.b", &[4], Init::Normal { std: 1.0 }, &mut rng);
        let mut b = ParamStore::<f32>::new();
        b.register("lacls.x", &[1, 2], Init::Normal { std: 1.0 }, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &[&a, &b], serde_json::json!({"k": 1})).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(
            ck.components.keys().collect::<Vec<_>>(),
            ["lacls", "qbs", "stscls"]
        );
        assert_eq!(ck.config["k"], 1);
        let mut fresh = ParamStore::<f32>::new();
        fresh.register("qbs.w", &[2, 3], Init::Zeros, &mut rng);
        fresh.register("stscls.b", &[4], Init::Zeros, &mut rng);
        ck.load_into(&mut fresh).unwrap();
        for ((_, _, x), (_, _, y)) in fresh.iter().zip(a.iter()) {
            assert_eq!(x.data(), y.data());
        }
        let mut other = ParamStore::<f32>::new();
        other.register("missing.p", &[1], Init::Zeros, &mut rng);
        assert!(matches!(ck.load_into(&mut other), Err(Error::Config(_))));
    }
}
