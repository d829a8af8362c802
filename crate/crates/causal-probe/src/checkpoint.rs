//! Checkpoint container: a TOML metadata header followed by named
//! tensor blobs.
//!
//! Layout: magic `CPCK`, u32 LE header length, the header bytes, u32 LE
//! entry count, then per entry a u32 LE name length, the UTF-8 name,
//! and one tensor in the flat serialization format. All integers little
//! endian; read errors carry absolute byte offsets.
//!
//! The header embeds the owning spec, so loading rebuilds the object
//! from the spec and then checks every stored tensor against the shape
//! the spec demands. A checkpoint that disagrees with its own spec is
//! rejected, not coerced.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{AdversarialBatch, AttackConfig};
use crate::concept::{build_autoencoder, ConceptAutoencoder, ConceptSpec, LossWeights};
use crate::data::Labels;
use crate::error::{Error, Result};
use crate::net::{build_network, Network, NetworkSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CPCK";
pub const FORMAT_VERSION: u32 = 1;

/// One header shape for every checkpoint kind; unused sections stay
/// absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    init_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inits: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    network: Option<NetworkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    autoencoder: Option<ConceptSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambdas: Option<LossWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attack: Option<AttackEcho>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackEcho {
    method: String,
    labels: String,
    config: AttackConfig,
}

fn write_container(path: &Path, header: &Header, entries: &[(&str, &Tensor)]) -> Result<()> {
    let header_text =
        toml::to_string(header).map_err(|e| Error::contract(format!("header encode: {e}")))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&(header_text.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(header_text.as_bytes()).map_err(io)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        tensor.write_to(&mut w).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_container(path: &Path) -> Result<(Header, Vec<(String, Tensor)>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut offset: u64 = 0;
    let fmt = |offset: u64, message: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };
    fn read_exact<R: Read>(
        r: &mut R,
        path: &Path,
        buf: &mut [u8],
        offset: &mut u64,
    ) -> Result<()> {
        r.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    path: path.to_path_buf(),
                    offset: *offset,
                    message: "unexpected end of file".to_string(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        *offset += buf.len() as u64;
        Ok(())
    }

    let mut magic = [0u8; 4];
    read_exact(&mut r, path, &mut magic, &mut offset)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(fmt(0, format!("bad magic {magic:?}, want {CHECKPOINT_MAGIC:?}")));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, path, &mut word, &mut offset)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    let header_at = offset;
    read_exact(&mut r, path, &mut header_bytes, &mut offset)?;
    let header_text = String::from_utf8(header_bytes)
        .map_err(|e| fmt(header_at, format!("header is not UTF-8: {e}")))?;
    let header: Header = toml::from_str(&header_text)
        .map_err(|e| fmt(header_at, format!("header parse: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fmt(
            header_at,
            format!(
                "format version {} unsupported, want {FORMAT_VERSION}",
                header.format_version
            ),
        ));
    }

    read_exact(&mut r, path, &mut word, &mut offset)?;
    let count = u32::from_le_bytes(word) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        read_exact(&mut r, path, &mut word, &mut offset)?;
        let name_len = u32::from_le_bytes(word) as usize;
        let name_at = offset;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, path, &mut name_bytes, &mut offset)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| fmt(name_at, format!("entry name is not UTF-8: {e}")))?;
        let tensor = Tensor::read_from(&mut r, path, offset)?;
        offset += tensor.serialized_len();
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(fmt(name_at, format!("duplicate entry '{name}'")));
        }
        entries.push((name, tensor));
    }
    Ok((header, entries))
}

fn expect_kind(path: &Path, header: &Header, want: &str) -> Result<()> {
    if header.kind != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            message: format!("checkpoint kind '{}', want '{want}'", header.kind),
        });
    }
    Ok(())
}

fn init_tag(name: &str) -> Result<&'static str> {
    match name {
        "he_uniform" => Ok("he_uniform"),
        "xavier_uniform" => Ok("xavier_uniform"),
        "zeros" => Ok("zeros"),
        "identity" => Ok("identity"),
        other => Err(Error::contract(format!("unknown init tag '{other}'"))),
    }
}

/// Overwrite freshly built parameters with stored tensors, rejecting
/// missing, extra, or misshapen entries.
fn restore_params(
    path: &Path,
    params: &mut [crate::net::Param],
    entries: &[(String, Tensor)],
    inits: Option<&BTreeMap<String, String>>,
) -> Result<()> {
    if entries.len() != params.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!(
                "checkpoint stores {} tensors, the spec demands {}",
                entries.len(),
                params.len()
            ),
        });
    }
    for p in params.iter_mut() {
        let (_, stored) = entries
            .iter()
            .find(|(n, _)| *n == p.name)
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("missing tensor '{}'", p.name),
            })?;
        if stored.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint tensor",
                lhs: stored.shape().to_vec(),
                rhs: p.value.shape().to_vec(),
            });
        }
        p.value = stored.clone();
        if let Some(map) = inits {
            if let Some(tag) = map.get(&p.name) {
                p.init = init_tag(tag)?;
            }
        }
    }
    Ok(())
}

fn init_map(params: &[crate::net::Param]) -> BTreeMap<String, String> {
    params
        .iter()
        .map(|p| (p.name.clone(), p.init.to_string()))
        .collect()
}

pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    let header = Header {
        kind: "network".to_string(),
        format_version: FORMAT_VERSION,
        init_seed: Some(net.init_seed),
        inits: Some(init_map(&net.params)),
        network: Some(net.spec.clone()),
        autoencoder: None,
        lambdas: None,
        attack: None,
    };
    let entries: Vec<(&str, &Tensor)> = net
        .params
        .iter()
        .map(|p| (p.name.as_str(), &p.value))
        .collect();
    write_container(path, &header, &entries)
}

pub fn load_network(path: &Path) -> Result<Network> {
    let (header, entries) = read_container(path)?;
    expect_kind(path, &header, "network")?;
    let spec = header.network.clone().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset: 8,
        message: "network checkpoint without a network spec".to_string(),
    })?;
    let mut net = build_network(&spec, header.init_seed.unwrap_or(0))?;
    restore_params(path, &mut net.params, &entries, header.inits.as_ref())?;
    Ok(net)
}

/// Saves the autoencoder together with the loss weights it was trained
/// under; the insertion level travels inside the embedded spec.
pub fn save_autoencoder(
    path: &Path,
    ae: &ConceptAutoencoder,
    lambdas: &LossWeights,
) -> Result<()> {
    let header = Header {
        kind: "autoencoder".to_string(),
        format_version: FORMAT_VERSION,
        init_seed: Some(ae.init_seed),
        inits: Some(init_map(&ae.params)),
        network: None,
        autoencoder: Some(ae.spec.clone()),
        lambdas: Some(*lambdas),
        attack: None,
    };
    let entries: Vec<(&str, &Tensor)> = ae
        .params
        .iter()
        .map(|p| (p.name.as_str(), &p.value))
        .collect();
    write_container(path, &header, &entries)
}

pub fn load_autoencoder(path: &Path) -> Result<(ConceptAutoencoder, LossWeights)> {
    let (header, entries) = read_container(path)?;
    expect_kind(path, &header, "autoencoder")?;
    let spec = header.autoencoder.clone().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset: 8,
        message: "autoencoder checkpoint without a concept spec".to_string(),
    })?;
    let mut ae = build_autoencoder(&spec, header.init_seed.unwrap_or(0))?;
    restore_params(path, &mut ae.params, &entries, header.inits.as_ref())?;
    Ok((ae, header.lambdas.unwrap_or_default()))
}

fn labels_to_tensor(labels: &Labels) -> (String, Tensor) {
    match labels {
        Labels::Classes(cs) => {
            let data: Vec<f64> = cs.iter().map(|&c| c as f64).collect();
            (
                "classes".to_string(),
                Tensor::new(vec![cs.len()], data).expect("nonempty labels"),
            )
        }
        Labels::MultiHot(t) => ("multi_hot".to_string(), t.clone()),
    }
}

fn labels_from_tensor(path: &Path, kind: &str, tensor: Tensor) -> Result<Labels> {
    match kind {
        "classes" => {
            let mut out = Vec::with_capacity(tensor.numel());
            for &v in tensor.data() {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        offset: 0,
                        message: format!("class label {v} is not a nonnegative integer"),
                    });
                }
                out.push(v as usize);
            }
            Ok(Labels::Classes(out))
        }
        "multi_hot" => Ok(Labels::MultiHot(tensor)),
        other => Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("unknown label kind '{other}'"),
        }),
    }
}

pub fn save_adversarial_batch(path: &Path, batch: &AdversarialBatch) -> Result<()> {
    let (label_kind, label_tensor) = labels_to_tensor(&batch.labels);
    let success = Tensor::new(
        vec![batch.success.len()],
        batch
            .success
            .iter()
            .map(|&s| if s { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let header = Header {
        kind: "adversarial_batch".to_string(),
        format_version: FORMAT_VERSION,
        init_seed: None,
        inits: None,
        network: None,
        autoencoder: None,
        lambdas: None,
        attack: Some(AttackEcho {
            method: batch.method.clone(),
            labels: label_kind,
            config: batch.config.clone(),
        }),
    };
    let entries = [
        ("originals", &batch.originals),
        ("adversarials", &batch.adversarials),
        ("labels", &label_tensor),
        ("success", &success),
    ];
    write_container(path, &header, &entries)
}

pub fn load_adversarial_batch(path: &Path) -> Result<AdversarialBatch> {
    let (header, entries) = read_container(path)?;
    expect_kind(path, &header, "adversarial_batch")?;
    let echo = header.attack.ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset: 8,
        message: "adversarial checkpoint without an attack echo".to_string(),
    })?;
    let get = |name: &str| -> Result<Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("missing tensor '{name}'"),
            })
    };
    let originals = get("originals")?;
    let adversarials = get("adversarials")?;
    if originals.shape() != adversarials.shape() {
        return Err(Error::ShapeMismatch {
            op: "adversarial batch",
            lhs: originals.shape().to_vec(),
            rhs: adversarials.shape().to_vec(),
        });
    }
    let labels = labels_from_tensor(path, &echo.labels, get("labels")?)?;
    let success: Vec<bool> = get("success")?.data().iter().map(|&v| v != 0.0).collect();
    if success.len() != originals.shape()[0] || labels.len() != originals.shape()[0] {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "per-sample arrays disagree with the batch size".to_string(),
        });
    }
    Ok(AdversarialBatch {
        method: echo.method,
        originals,
        adversarials,
        labels,
        config: echo.config,
        success,
    })
}
