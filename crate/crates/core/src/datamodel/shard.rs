//! Line-delimited shards with a sidecar manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{canonical_json, sha256_hex, DataError, Result, Sample};

/// Schema tag written into every manifest. The dataset layout is this
/// project's own format.
pub const SCHEMA_VERSION: &str = "vthinker-shard/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub shard: String,
    pub records: usize,
    pub digest: String,
    pub schema_version: String,
    /// Marks a full official benchmark release; loaders check its counts.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub official: bool,
}

/// `<shard>.manifest.json` next to the shard.
pub fn manifest_path(shard: &Path) -> PathBuf {
    let mut name = shard.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    shard.with_file_name(name)
}

/// Writes one canonical JSON record per line plus the manifest.
pub fn write_records<T: Serialize>(records: &[T], path: &Path) -> Result<ShardManifest> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut body = String::new();
    for record in records {
        body.push_str(&canonical_json(record)?);
        body.push('\n');
    }
    let mut file = BufWriter::new(fs::File::create(path)?);
    file.write_all(body.as_bytes())?;
    file.flush()?;
    let manifest = ShardManifest {
        shard: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        records: records.len(),
        digest: sha256_hex(body.as_bytes()),
        schema_version: SCHEMA_VERSION.to_string(),
        official: false,
    };
    fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Reads and parses records, optionally checking each one, then verifies the
/// manifest when present. Line numbers in errors are 1-based.
pub fn read_records<T, F>(path: &Path, mut check: F) -> Result<(Vec<T>, Option<ShardManifest>)>
where
    T: DeserializeOwned,
    F: FnMut(usize, &T) -> Result<()>,
{
    let bytes = fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        DataError::MalformedLine {
            line,
            message: "invalid UTF-8".into(),
        }
    })?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(line).map_err(|e| DataError::MalformedLine {
            line: idx + 1,
            message: e.to_string(),
        })?;
        check(idx + 1, &record)?;
        records.push(record);
    }

    let mpath = manifest_path(path);
    let manifest = if mpath.is_file() {
        let manifest: ShardManifest = serde_json::from_slice(&fs::read(&mpath)?).map_err(|e| {
            DataError::ManifestMismatch {
                path: mpath.display().to_string(),
                message: e.to_string(),
            }
        })?;
        let mismatch = |message: String| DataError::ManifestMismatch {
            path: path.display().to_string(),
            message,
        };
        if manifest.records != records.len() {
            return Err(mismatch(format!(
                "manifest lists {} records, shard has {}",
                manifest.records,
                records.len()
            )));
        }
        let digest = sha256_hex(&bytes);
        if manifest.digest != digest {
            return Err(mismatch(format!(
                "digest {} does not match shard digest {digest}",
                manifest.digest
            )));
        }
        Some(manifest)
    } else {
        None
    };
    Ok((records, manifest))
}

pub fn write_shard(samples: &[Sample], path: &Path) -> Result<ShardManifest> {
    write_records(samples, path)
}

/// Reads a sample shard, recomputing every record's content id.
pub fn read_shard(path: &Path) -> Result<Vec<Sample>> {
    let (samples, _) = read_records(path, |line, sample: &Sample| {
        let expected = sample.body.content_id()?;
        if expected != sample.id {
            return Err(DataError::IdMismatch {
                line,
                found: sample.id.clone(),
                expected,
            });
        }
        Ok(())
    })?;
    Ok(samples)
}
