//! Checkpoint archive: a versioned magic string, a human-readable JSON
//! header (manifest + tensor index), then raw little-endian tensor bytes.
//! Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::layers::{ParamKind, Params};
use super::resnet::{ResNet, ResNetConfig};
use super::unet::{UNet, UNetConfig};

const MAGIC: &[u8; 8] = b"PXVCKPT1";

/// Network architecture plus its role in the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArchSpec {
    Transform(UNetConfig),
    Inverse(UNetConfig),
    Classifier(ResNetConfig),
}

impl ArchSpec {
    pub fn id(&self) -> String {
        match self {
            ArchSpec::Transform(c) => format!("transform-unet-w{}d{}", c.base_width, c.depth),
            ArchSpec::Inverse(c) => format!("inverse-unet-w{}d{}", c.base_width, c.depth),
            ArchSpec::Classifier(c) => format!(
                "classifier-resnet-w{}n{}c{}",
                c.base_width, c.blocks_per_stage, c.num_classes
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedInfo {
    pub init: u64,
    #[serde(default)]
    pub train: Option<u64>,
    #[serde(default)]
    pub split: Option<u64>,
}

/// Training provenance stored next to the weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub arch: ArchSpec,
    pub epoch: usize,
    #[serde(default)]
    pub val_loss: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub seeds: SeedInfo,
    #[serde(default)]
    pub dataset: Option<String>,
}

impl Manifest {
    pub fn new(arch: ArchSpec) -> Self {
        Manifest {
            arch,
            epoch: 0,
            val_loss: None,
            alpha: None,
            seeds: SeedInfo::default(),
            dataset: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    kind: String,
    shape: Vec<usize>,
    offset: usize,
    byte_len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    manifest: Manifest,
    tensors: Vec<TensorMeta>,
}

/// A network restored from disk, tagged by its role.
pub enum ModelHandle<T: Scalar> {
    Transform(UNet<T>),
    Inverse(UNet<T>),
    Classifier(ResNet<T>),
}

impl<T: Scalar> ModelHandle<T> {
    pub fn into_unet(self) -> Result<UNet<T>> {
        match self {
            ModelHandle::Transform(n) | ModelHandle::Inverse(n) => Ok(n),
            ModelHandle::Classifier(_) => Err(Error::Serialization(
                "checkpoint holds a classifier, expected an image-to-image network".into(),
            )),
        }
    }

    pub fn into_classifier(self) -> Result<ResNet<T>> {
        match self {
            ModelHandle::Classifier(n) => Ok(n),
            _ => Err(Error::Serialization(
                "checkpoint holds an image-to-image network, expected a classifier".into(),
            )),
        }
    }
}

pub fn save_checkpoint<T: Scalar>(
    net: &impl Params<T>,
    manifest: &Manifest,
    path: &Path,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    net.visit("", &mut |name, kind, view| {
        let offset = payload.len();
        let vals: Vec<T> = view.iter().cloned().collect();
        T::write_le_bytes(&vals, &mut payload);
        tensors.push(TensorMeta {
            name: name.to_string(),
            kind: match kind {
                ParamKind::Trainable => "trainable".into(),
                ParamKind::Buffer => "buffer".into(),
            },
            shape: view.shape().to_vec(),
            offset,
            byte_len: payload.len() - offset,
        });
    });
    let header = Header {
        format_version: 1,
        dtype: T::DTYPE.to_string(),
        manifest: manifest.clone(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Serialization(format!("manifest encode failed: {e}")))?;

    let mut file = fs::File::create(path)
        .map_err(|e| Error::File(format!("cannot create {}: {e}", path.display())))?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&payload)?;
    Ok(())
}

fn read_header(bytes: &[u8], path: &Path) -> Result<(Header, usize)> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Serialization(format!(
            "{} is truncated (no header)",
            path.display()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Serialization(format!(
            "{} is not a checkpoint archive (bad magic)",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16 + hlen;
    if bytes.len() < body_start {
        return Err(Error::Serialization(format!(
            "{} is truncated (header cut short)",
            path.display()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| Error::Serialization(format!("{}: bad header: {e}", path.display())))?;
    if header.format_version != 1 {
        return Err(Error::Serialization(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            header.format_version
        )));
    }
    Ok((header, body_start))
}

/// Read just the manifest without materializing a network.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes =
        fs::read(path).map_err(|e| Error::File(format!("cannot read {}: {e}", path.display())))?;
    Ok(read_header(&bytes, path)?.0.manifest)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelHandle<T>, Manifest)> {
    let bytes =
        fs::read(path).map_err(|e| Error::File(format!("cannot read {}: {e}", path.display())))?;
    let (header, body_start) = read_header(&bytes, path)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Serialization(format!(
            "{}: stored dtype {} does not match requested {}",
            path.display(),
            header.dtype,
            T::DTYPE
        )));
    }
    let payload = &bytes[body_start..];

    let mut handle = match &header.manifest.arch {
        ArchSpec::Transform(cfg) => ModelHandle::Transform(UNet::build(cfg, 0)?),
        ArchSpec::Inverse(cfg) => ModelHandle::Inverse(UNet::build(cfg, 0)?),
        ArchSpec::Classifier(cfg) => ModelHandle::Classifier(ResNet::build(cfg, 0)?),
    };

    let mut by_name: std::collections::HashMap<&str, &TensorMeta> = header
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();

    let mut fill_err: Option<Error> = None;
    {
        let net: &mut dyn Params<T> = match &mut handle {
            ModelHandle::Transform(n) | ModelHandle::Inverse(n) => n,
            ModelHandle::Classifier(n) => n,
        };
        net.visit_mut("", &mut |name, _, mut view| {
            if fill_err.is_some() {
                return;
            }
            let Some(meta) = by_name.remove(name) else {
                fill_err = Some(Error::Serialization(format!(
                    "{}: tensor {name} missing from archive",
                    path.display()
                )));
                return;
            };
            if meta.shape != view.shape() {
                fill_err = Some(Error::Serialization(format!(
                    "{}: tensor {name} has shape {:?}, expected {:?}",
                    path.display(),
                    meta.shape,
                    view.shape()
                )));
                return;
            }
            let end = meta.offset + meta.byte_len;
            if end > payload.len() {
                fill_err = Some(Error::Serialization(format!(
                    "{}: truncated payload for tensor {name}",
                    path.display()
                )));
                return;
            }
            match T::read_le_bytes(&payload[meta.offset..end]) {
                Some(vals) if vals.len() == view.len() => {
                    for (dst, src) in view.iter_mut().zip(vals) {
                        *dst = src;
                    }
                }
                _ => {
                    fill_err = Some(Error::Serialization(format!(
                        "{}: tensor {name} byte length mismatch",
                        path.display()
                    )));
                }
            }
        });
    }
    if let Some(e) = fill_err {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Serialization(format!(
            "{}: archive tensor {extra} does not exist in the rebuilt network",
            path.display()
        )));
    }
    Ok((handle, header.manifest))
}

/// SHA-256 of the whole archive, hex encoded. Used to pin which transform
/// network generated a set of attack pairs.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let bytes =
        fs::read(path).map_err(|e| Error::File(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

/// SHA-256 of a canonical serialization of any serde value, hex encoded.
pub fn config_digest<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
