//! Versioned on-disk formats.
//!
//! Weights persist as a JSON manifest (layer shapes + activation tags) next
//! to a flat little-endian `f64` payload, concatenated in layer order with
//! weights before biases. Format tag: `hmarl-weights-v1`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{Activation, Approximator, Layer};
use crate::{Error, Result};

pub const WEIGHTS_FORMAT: &str = "hmarl-weights-v1";

#[derive(Debug, Serialize, Deserialize)]
struct LayerManifest {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    #[serde(default = "bias_active_default")]
    bias_active: bool,
}

fn bias_active_default() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsManifest {
    format: String,
    layers: Vec<LayerManifest>,
    payload: String,
    #[serde(default)]
    tags: BTreeMap<String, String>,
}

/// Write `{name}.json` + `{name}.bin` under `dir`.
pub fn save_weights(
    dir: &Path,
    name: &str,
    net: &Approximator,
    tags: &BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = WeightsManifest {
        format: WEIGHTS_FORMAT.to_string(),
        layers: net
            .layers()
            .iter()
            .map(|l| LayerManifest {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                activation: l.activation,
                bias_active: l.bias_active,
            })
            .collect(),
        payload: format!("{name}.bin"),
        tags: tags.clone(),
    };
    let mut values = Vec::with_capacity(net.param_count());
    for l in net.layers() {
        values.extend_from_slice(&l.weights);
        values.extend_from_slice(&l.bias);
    }
    write_f64s(&dir.join(format!("{name}.bin")), &values)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(format!("{name}.json")), json)?;
    Ok(())
}

/// Load a network previously written by [`save_weights`].
pub fn load_weights(dir: &Path, name: &str) -> Result<(Approximator, BTreeMap<String, String>)> {
    let manifest: WeightsManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}.json")))?)?;
    if manifest.format != WEIGHTS_FORMAT {
        return Err(Error::Format(format!(
            "unsupported weights format {:?}, expected {WEIGHTS_FORMAT}",
            manifest.format
        )));
    }
    let values = read_f64s(&dir.join(&manifest.payload))?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut off = 0usize;
    for lm in &manifest.layers {
        let nw = lm.in_dim * lm.out_dim;
        let nb = lm.out_dim;
        if off + nw + nb > values.len() {
            return Err(Error::Format("weights payload shorter than manifest shapes".into()));
        }
        let mut l = Layer::zeros(lm.in_dim, lm.out_dim, lm.activation);
        l.bias_active = lm.bias_active;
        l.weights.copy_from_slice(&values[off..off + nw]);
        l.bias.copy_from_slice(&values[off + nw..off + nw + nb]);
        layers.push(l);
        off += nw + nb;
    }
    if off != values.len() {
        return Err(Error::Format("weights payload longer than manifest shapes".into()));
    }
    Ok((Approximator::from_layers(layers)?, manifest.tags))
}

pub fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() % 8 != 0 {
        return Err(Error::Format(format!("payload {} not a multiple of 8 bytes", path.display())));
    }
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Hex SHA-256 of a file, used for run manifests and determinism checks.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = fs::File::open(path)?;
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Hex SHA-256 of a network's parameters (canonical flat order); used for
/// the phase-2 freeze contract.
pub fn params_sha256(net: &Approximator) -> String {
    let mut hasher = Sha256::new();
    for l in net.layers() {
        for v in l.weights.iter().chain(l.bias.iter()) {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
