//! On-disk formats: binary checkpoints, JSON-lines run logs, atomically
//! rewritten JSON documents and fail-closed TOML configs.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"GFTCKPT"              7 bytes
//! format version          u32
//! header length           u64
//! header                  JSON {symbols, arch, params: [{name, shape}]}
//! parameter blob          f64 × Σ numel, in header order
//! content hash            32 bytes, SHA-256 of everything above
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParameterVector, Shape};
use crate::error::{Error, Result};
use crate::policy::{Architecture, Policy, Vocab};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"GFTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    symbols: Vec<String>,
    arch: Architecture,
    params: Vec<ParamMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamMeta {
    name: String,
    shape: Shape,
}

/// Serialized checkpoint bytes, hash included.
pub fn checkpoint_bytes(policy: &Policy) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        symbols: policy.vocab().content_symbols().to_vec(),
        arch: policy.arch(),
        params: policy
            .params()
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.shape,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(64 + header.len() + 8 * policy.params().flat_len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in policy.params().iter() {
        for x in &p.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Hex SHA-256 content hash of a policy's checkpoint.
pub fn checkpoint_hash(policy: &Policy) -> Result<String> {
    let bytes = checkpoint_bytes(policy)?;
    Ok(hex::encode(&bytes[bytes.len() - 32..]))
}

/// Writes a checkpoint atomically and returns its content hash.
pub fn save_checkpoint(path: &Path, policy: &Policy) -> Result<String> {
    let bytes = checkpoint_bytes(policy)?;
    write_atomic(path, &bytes)?;
    Ok(hex::encode(&bytes[bytes.len() - 32..]))
}

pub fn load_checkpoint(path: &Path) -> Result<Policy> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|detail| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    })
}

fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Policy, String> {
    let fixed = CHECKPOINT_MAGIC.len() + 4 + 8;
    if bytes.len() < fixed + 32 {
        return Err("file too short".into());
    }
    if &bytes[..7] != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let (body, hash) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != hash {
        return Err("content hash mismatch".into());
    }
    let header_len = u64::from_le_bytes(bytes[11..19].try_into().unwrap()) as usize;
    let header_end = fixed.checked_add(header_len).filter(|&e| e <= body.len()).ok_or("truncated header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(&body[fixed..header_end]).map_err(|e| format!("bad header: {e}"))?;
    let blob = &body[header_end..];
    let total: usize = header.params.iter().map(|p| p.shape.0 * p.shape.1).sum();
    if blob.len() != 8 * total {
        return Err(format!("blob holds {} bytes, header declares {} values", blob.len(), total));
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut params = ParameterVector::new();
    for meta in &header.params {
        let data: Vec<f64> = values.by_ref().take(meta.shape.0 * meta.shape.1).collect();
        params.push(meta.name.clone(), meta.shape, data).map_err(|e| e.to_string())?;
    }
    let vocab = Vocab::new(&header.symbols).map_err(|e| e.to_string())?;
    Policy::from_parts(vocab, header.arch, params).map_err(|e| e.to_string())
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON document, rewritten atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Appends one JSON object as a single line with one write call.
pub fn append_record<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines file. An unterminated, unparseable final line (a
/// write interrupted by a crash) is skipped with a warning; any other bad
/// line is an error.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) if i + 1 == lines.len() && !complete => {
                log::warn!("{}: ignoring partial final record ({e})", path.display());
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Parses a TOML config, rejecting unknown keys and reporting the key path
/// of the first offending field.
pub fn parse_toml<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::ConfigKey {
            path: path.to_path_buf(),
            key: if key == "." { String::new() } else { key },
            detail: e.into_inner().message().trim().to_string(),
        }
    })
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_toml(path, &text)
}

/// Hex SHA-256 of a value's canonical JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::RunRecord;

    fn policy() -> Policy {
        Policy::neural(Vocab::standard(), Architecture::neural_default(), 3).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = policy();
        let h = save_checkpoint(&path, &p).unwrap();
        assert_eq!(h, checkpoint_hash(&p).unwrap());
        let q = load_checkpoint(&path).unwrap();
        let a: Vec<u64> = p.params().flatten().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = q.params().flatten().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(q.vocab(), p.vocab());
        assert_eq!(q.arch(), p.arch());
    }

    #[test]
    fn corrupted_blob_fails_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&path, &policy()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 100] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint { detail, .. }) => assert!(detail.contains("hash")),
            other => panic!("expected hash error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_refused() {
        let mut bytes = checkpoint_bytes(&policy()).unwrap();
        bytes[7] = 9;
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(err.contains("version"), "{err}");
    }

    fn record(step: usize) -> RunRecord {
        RunRecord {
            step,
            stage: "s".into(),
            loss: 1.0,
            grad_norm: 2.0,
            mean_entropy: 0.5,
            kl_to_base: None,
            rectified_fraction: 0.25,
            eval_accuracy: Some(0.5),
            mean_reward: 0.5,
            trajectories: 8,
            wall_time: 0.01,
        }
    }

    #[test]
    fn thousand_records_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        for i in 0..1000 {
            append_record(&path, &record(i)).unwrap();
        }
        let back: Vec<RunRecord> = read_records(&path).unwrap();
        assert_eq!(back.len(), 1000);
        assert_eq!(back[999], record(999));
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1000);
    }

    #[test]
    fn partial_last_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        append_record(&path, &record(0)).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"step\": 1, \"sta").unwrap();
        let back: Vec<RunRecord> = read_records(&path).unwrap();
        assert_eq!(back.len(), 1);
        fs::write(&path, "{\"bad\n{}\n").unwrap();
        assert!(read_records::<RunRecord>(&path).is_err());
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    #[allow(dead_code)]
    struct Inner {
        tau: f64,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    #[allow(dead_code)]
    struct Outer {
        seed: u64,
        rect: Inner,
    }

    #[test]
    fn config_errors_name_the_key() {
        let p = Path::new("x.toml");
        let ok: Outer = parse_toml(p, "seed = 1\n[rect]\ntau = 0.7\n").unwrap();
        assert_eq!(ok.seed, 1);
        match parse_toml::<Outer>(p, "seed = 1\n[rect]\ntua = 0.7\n") {
            Err(Error::ConfigKey { key, .. }) => assert!(key.starts_with("rect"), "{key}"),
            other => panic!("{other:?}"),
        }
        match parse_toml::<Outer>(p, "seed = 1\n[rect]\ntau = \"high\"\n") {
            Err(Error::ConfigKey { key, .. }) => assert_eq!(key, "rect.tau"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_rewrite_is_atomic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        write_json(&path, &vec![1, 2]).unwrap();
        write_json(&path, &vec![3]).unwrap();
        assert_eq!(read_json::<Vec<i32>>(&path).unwrap(), vec![3]);
        assert!(!dir.path().join("m.json.tmp").exists());
    }
}
