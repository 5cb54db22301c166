//! Versioned checkpoint files.
//!
//! A checkpoint is a UTF-8 header followed by raw little-endian `f32`
//! tensor data:
//!
//! ```text
//! VSPSR-CHECKPOINT
//! format_version = 1
//! [config]
//! scale = 4
//! ...
//! [meta]
//! epoch = 12
//! [adam]
//! step = 480
//! ...
//! [tensors]
//! basis.head.weight 32 1 3 3
//! ...
//! payload_bytes = 123456
//! payload_sha256 = 3f...
//! [payload]
//! ```
//!
//! Tensors appear in the order of the manifest; Adam moments, when present,
//! follow the parameters under the names `adam.m.<param>` and `adam.v.<param>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{VSpMConfig, VSpMModel};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Tensor};

pub const MAGIC: &str = "VSPSR-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;
const PAYLOAD_MARK: &[u8] = b"\n[payload]\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: VSpMConfig,
    pub params: Vec<Tensor<f32>>,
    pub adam: Option<AdamState<f32>>,
    /// Free-form training state (epoch, step, prior, ...).
    pub meta: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn kv_line(line: &str) -> Result<(&str, &str)> {
    line.split_once(" = ")
        .ok_or_else(|| bad(format!("malformed header line {line:?}")))
}

impl Checkpoint {
    pub fn from_model(model: &VSpMModel<f32>, adam: Option<&AdamState<f32>>, meta: BTreeMap<String, String>) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().to_vec(),
            adam: adam.cloned(),
            meta,
        }
    }

    pub fn model(&self) -> Result<VSpMModel<f32>> {
        VSpMModel::from_params(self.config.clone(), self.params.clone())
    }

    fn tensor_list(&self) -> Vec<(String, &Tensor<f32>)> {
        let names: Vec<String> = self.config.param_shapes().into_iter().map(|(n, _)| n).collect();
        let mut out: Vec<(String, &Tensor<f32>)> = names.iter().cloned().zip(&self.params).collect();
        if let Some(adam) = &self.adam {
            out.extend(names.iter().map(|n| format!("adam.m.{n}")).zip(&adam.first));
            out.extend(names.iter().map(|n| format!("adam.v.{n}")).zip(&adam.second));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for (k, v) in &self.meta {
            if k.contains([' ', '\n', '=']) || v.contains('\n') || k.is_empty() {
                return Err(bad(format!("meta entry {k:?} cannot be stored")));
            }
        }
        let mut payload = Vec::new();
        let mut manifest = String::new();
        for (name, t) in self.tensor_list() {
            manifest.push_str(&name);
            for d in t.shape() {
                let _ = write!(manifest, " {d}");
            }
            manifest.push('\n');
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut head = format!("{MAGIC}\nformat_version = {FORMAT_VERSION}\n[config]\n");
        for (k, v) in self.config.to_kv() {
            let _ = writeln!(head, "{k} = {v}");
        }
        head.push_str("[meta]\n");
        for (k, v) in &self.meta {
            let _ = writeln!(head, "{k} = {v}");
        }
        if let Some(adam) = &self.adam {
            let c = adam.config;
            let _ = write!(
                head,
                "[adam]\nstep = {}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\n",
                adam.step, c.beta1, c.beta2, c.eps
            );
        }
        head.push_str("[tensors]\n");
        head.push_str(&manifest);
        let _ = write!(
            head,
            "payload_bytes = {}\npayload_sha256 = {}",
            payload.len(),
            hex::encode(Sha256::digest(&payload))
        );
        let mut bytes = head.into_bytes();
        bytes.extend_from_slice(PAYLOAD_MARK);
        bytes.extend_from_slice(&payload);
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(PAYLOAD_MARK.len())
            .position(|w| w == PAYLOAD_MARK)
            .ok_or_else(|| bad("no payload marker; not a checkpoint or truncated"))?;
        let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let payload = &bytes[split + PAYLOAD_MARK.len()..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing checkpoint magic"));
        }
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("format_version = "))
            .ok_or_else(|| bad("missing format_version"))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }

        let mut section = "";
        let mut config_kv = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut adam_kv = BTreeMap::new();
        let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
        let mut trailer = BTreeMap::new();
        for line in lines {
            if line.starts_with('[') && line.ends_with(']') {
                section = match line {
                    "[config]" | "[meta]" | "[adam]" | "[tensors]" => line,
                    _ => return Err(bad(format!("unknown section {line}"))),
                };
                continue;
            }
            match section {
                "[config]" => {
                    let (k, v) = kv_line(line)?;
                    config_kv.insert(k.to_string(), v.to_string());
                }
                "[meta]" => {
                    let (k, v) = kv_line(line)?;
                    meta.insert(k.to_string(), v.to_string());
                }
                "[adam]" => {
                    let (k, v) = kv_line(line)?;
                    adam_kv.insert(k.to_string(), v.to_string());
                }
                "[tensors]" if line.contains(" = ") => {
                    let (k, v) = kv_line(line)?;
                    trailer.insert(k.to_string(), v.to_string());
                }
                "[tensors]" => {
                    let mut parts = line.split(' ');
                    let name = parts.next().unwrap_or_default().to_string();
                    let dims = parts
                        .map(|p| p.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad tensor entry {line:?}")))?;
                    manifest.push((name, dims));
                }
                _ => return Err(bad(format!("line outside any section: {line:?}"))),
            }
        }

        let config = VSpMConfig::from_kv(&config_kv).map_err(|e| bad(format!("stored config is invalid: {e}")))?;
        let expected_len: usize = trailer
            .get("payload_bytes")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing payload_bytes"))?;
        if payload.len() != expected_len {
            return Err(bad(format!(
                "payload is {} bytes, header says {expected_len}; file truncated or corrupt",
                payload.len()
            )));
        }
        let digest = trailer.get("payload_sha256").ok_or_else(|| bad("missing payload_sha256"))?;
        if *digest != hex::encode(Sha256::digest(payload)) {
            return Err(bad("payload digest mismatch; file is corrupt"));
        }

        let shapes = config.param_shapes();
        let mut expected: Vec<(String, Vec<usize>)> = shapes.clone();
        if !adam_kv.is_empty() {
            expected.extend(shapes.iter().map(|(n, s)| (format!("adam.m.{n}"), s.clone())));
            expected.extend(shapes.iter().map(|(n, s)| (format!("adam.v.{n}"), s.clone())));
        }
        if manifest != expected {
            let first = manifest
                .iter()
                .zip(&expected)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("stored {} {:?} vs expected {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("{} stored tensors vs {} expected", manifest.len(), expected.len()));
            return Err(bad(format!("config mismatch: tensors do not fit the stored config ({first})")));
        }

        let mut tensors = Vec::with_capacity(manifest.len());
        let mut offset = 0;
        for (_, dims) in &manifest {
            let n: usize = dims.iter().product();
            let end = offset + 4 * n;
            if end > payload.len() {
                return Err(bad("payload shorter than the manifest"));
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(dims, data)?);
            offset = end;
        }
        if offset != payload.len() {
            return Err(bad("payload longer than the manifest"));
        }

        let np = shapes.len();
        let adam = if adam_kv.is_empty() {
            None
        } else {
            let num = |k: &str| -> Result<f64> {
                adam_kv
                    .get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(format!("adam.{k} missing or invalid")))
            };
            let step = adam_kv
                .get("step")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("adam.step missing or invalid"))?;
            let config = AdamConfig {
                beta1: num("beta1")?,
                beta2: num("beta2")?,
                eps: num("eps")?,
            };
            let second = tensors.split_off(2 * np);
            let first = tensors.split_off(np);
            Some(AdamState {
                config,
                step,
                first,
                second,
            })
        };
        Ok(Self {
            config,
            params: tensors,
            adam,
            meta,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and additionally requires the stored architecture to equal
    /// `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &VSpMConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.config != expected {
            let diff: Vec<String> = ck
                .config
                .to_kv()
                .into_iter()
                .zip(expected.to_kv())
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("{} = {} (expected {})", a.0, a.1, b.1))
                .collect();
            return Err(bad(format!("config mismatch: {}", diff.join(", "))));
        }
        Ok(ck)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VSpMConfig {
        VSpMConfig {
            scale: 2,
            num_basis: 4,
            blocks: 1,
            width: 3,
            coeff_depth: 1,
            ..VSpMConfig::default()
        }
    }

    fn sample() -> Checkpoint {
        let model = VSpMModel::<f32>::init(tiny(), 0.4, 7).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), model.params());
        adam.step = 3;
        adam.first[0].data_mut()[0] = 0.25;
        let meta = BTreeMap::from([("epoch".to_string(), "2".to_string())]);
        Checkpoint::from_model(&model, Some(&adam), meta)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        assert_eq!(loaded, ck);
        assert_eq!(loaded.to_bytes().unwrap(), first);
    }

    #[test]
    fn edited_basis_count_is_a_config_mismatch() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        assert!(text.contains("num_basis = 4\n"));
        let edited = bytes
            .windows(14)
            .position(|w| w == b"num_basis = 4\n")
            .map(|i| {
                let mut b = bytes.clone();
                b[i + 12] = b'5';
                b
            })
            .unwrap();
        let err = Checkpoint::from_bytes(&edited).unwrap_err().to_string();
        assert!(err.contains("config mismatch"), "{err}");
    }

    #[test]
    fn load_expecting_rejects_other_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample().save(&p).unwrap();
        let other = VSpMConfig { num_basis: 8, ..tiny() };
        assert!(Checkpoint::load_expecting(&p, &tiny()).is_ok());
        let err = Checkpoint::load_expecting(&p, &other).unwrap_err().to_string();
        assert!(err.contains("num_basis"), "{err}");
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("digest"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut v9 = bytes.clone();
        let at = bytes.windows(18).position(|w| w == b"format_version = 1").unwrap();
        v9[at + 17] = b'9';
        assert!(Checkpoint::from_bytes(&v9).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn without_optimizer_state() {
        let mut ck = sample();
        ck.adam = None;
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }
}
