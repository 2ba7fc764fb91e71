//! Binary checkpoint format with a JSON manifest.
//!
//! Layout, all little-endian: the magic bytes `TC3L\x01`; ten `u32` header
//! fields (`d_in, c_f, h_f, w_f, c_d, k_classes, hidden, activation,
//! attention_mode, attention_reduction`); every model array as `f64` in
//! declaration order; the `K x c_d` centers; every attention array.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionMode, AttentionParams, ATTENTION_ARRAY_NAMES};
use crate::centers::ClassCenters;
use crate::error::{Error, Result};
use crate::model::{Activation, ModelConfig, ModelParams, MODEL_ARRAY_NAMES};
use crate::objective::Network;

pub const MAGIC: &[u8; 5] = b"TC3L\x01";
const HEADER_FIELDS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    pub centers: ClassCenters,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub model: ModelConfig,
    pub attention_mode: AttentionMode,
    pub attention_reduction: usize,
    pub arrays: Vec<ArrayEntry>,
    pub bytes: usize,
    pub sha256: String,
}

fn shapes(net: &Network) -> Vec<ArrayEntry> {
    let c = net.config();
    let (mid, feat, sq) = (c.c_mid(), c.feature_len(), net.attention.squeezed());
    let model_shapes = [
        vec![c.hidden, c.d_in],
        vec![c.hidden],
        vec![feat, c.hidden],
        vec![feat],
        vec![mid, c.c_f],
        vec![mid],
        vec![c.c_d, mid],
        vec![c.c_d],
        vec![c.k_classes, c.c_d],
        vec![c.k_classes],
    ];
    let attention_shapes = [
        vec![sq, c.c_d],
        vec![sq],
        vec![c.c_d, sq],
        vec![c.c_d],
        vec![c.c_d],
        vec![1],
    ];
    let entry = |name: &str, shape: Vec<usize>| ArrayEntry {
        name: name.to_string(),
        shape,
    };
    MODEL_ARRAY_NAMES
        .iter()
        .zip(model_shapes)
        .map(|(n, s)| entry(n, s))
        .chain(std::iter::once(entry("centers", vec![c.k_classes, c.c_d])))
        .chain(
            ATTENTION_ARRAY_NAMES
                .iter()
                .zip(attention_shapes)
                .map(|(n, s)| entry(n, s)),
        )
        .collect()
}

fn to_u32(v: usize) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(|x| x.to_le_bytes())
        .map_err(|_| Error::Checkpoint(format!("dimension {v} does not fit in 32 bits")))
}

pub fn encode(net: &Network, centers: &ClassCenters) -> Result<Vec<u8>> {
    let c = net.config();
    if centers.k() != c.k_classes || centers.dim() != c.c_d {
        return Err(Error::Checkpoint(format!(
            "centers are {}x{}, model expects {}x{}",
            centers.k(),
            centers.dim(),
            c.k_classes,
            c.c_d
        )));
    }
    let header = [
        c.d_in,
        c.c_f,
        c.h_f,
        c.w_f,
        c.c_d,
        c.k_classes,
        c.hidden,
        c.activation.code() as usize,
        net.attention_mode.code() as usize,
        net.attention.reduction,
    ];
    let mut out = MAGIC.to_vec();
    for v in header {
        out.extend_from_slice(&to_u32(v)?);
    }
    let arrays = net
        .model
        .arrays()
        .into_iter()
        .chain(std::iter::once(&centers.values))
        .chain(net.attention.arrays());
    for a in arrays {
        for v in a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn fill(&mut self, dst: &mut [f64]) -> Result<()> {
        for v in dst {
            let b = self.take(8)?;
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut h = [0usize; HEADER_FIELDS];
    for v in &mut h {
        *v = r.u32()?;
    }
    let activation = Activation::from_code(h[7] as u32)
        .ok_or_else(|| Error::Checkpoint(format!("unknown activation code {}", h[7])))?;
    let attention_mode = AttentionMode::from_code(h[8] as u32)
        .ok_or_else(|| Error::Checkpoint(format!("unknown attention mode code {}", h[8])))?;
    let config = ModelConfig {
        d_in: h[0],
        c_f: h[1],
        h_f: h[2],
        w_f: h[3],
        c_d: h[4],
        k_classes: h[5],
        hidden: h[6],
        activation,
    };
    let mut model = ModelParams::zeros(config)?;
    for a in model.arrays_mut() {
        r.fill(a)?;
    }
    let mut center_values = vec![0.0; config.k_classes * config.c_d];
    r.fill(&mut center_values)?;
    let mut attention = AttentionParams::zeros(config.c_d, h[9])?;
    for a in attention.arrays_mut() {
        r.fill(a)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let net = Network {
        model,
        attention,
        attention_mode,
    };
    if !net.model.is_finite() || net.attention.arrays().iter().any(|a| a.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("checkpoint parameters"));
    }
    let centers = ClassCenters::from_values(config.k_classes, config.c_d, center_values)?;
    Ok(Checkpoint { net, centers })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn manifest(net: &Network, bytes: &[u8]) -> Manifest {
    Manifest {
        format: "TC3L v1".into(),
        model: *net.config(),
        attention_mode: net.attention_mode,
        attention_reduction: net.attention.reduction,
        arrays: shapes(net),
        bytes: bytes.len(),
        sha256: sha256_hex(bytes),
    }
}

/// Path of the manifest that accompanies the checkpoint at `path`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the checkpoint and its manifest; returns the manifest path.
pub fn save(path: &Path, net: &Network, centers: &ClassCenters) -> Result<PathBuf> {
    let bytes = encode(net, centers)?;
    fs::write(path, &bytes)?;
    let mpath = manifest_path(path);
    let mut json = serde_json::to_string_pretty(&manifest(net, &bytes))?;
    json.push('\n');
    fs::write(&mpath, json)?;
    Ok(mpath)
}

/// Reads a checkpoint; when a manifest sits next to it, its checksum must match.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        let actual = sha256_hex(&bytes);
        if m.sha256 != actual {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: manifest {} vs file {actual}",
                m.sha256
            )));
        }
    }
    decode(&bytes)
}
