//! Output directory layout, provenance headers and atomic writes.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::config::VERSION;
use crate::error::{CliError, Result};

/// An artifact's location under the output directory and the subcommand
/// that writes it.
#[derive(Debug, Clone, Copy)]
pub struct Artifact {
    pub rel: &'static str,
    pub producer: &'static str,
}

const fn art(rel: &'static str, producer: &'static str) -> Artifact {
    Artifact { rel, producer }
}

pub const SYNTH_TRAIN: Artifact = art("synth/train.json", "synth");
pub const SYNTH_PROBE: Artifact = art("synth/probe.json", "synth");
pub const SYNTH_STEER: Artifact = art("synth/steer.json", "synth");
pub const SYNTH_EVAL: Artifact = art("synth/eval.json", "synth");
pub const MODEL: Artifact = art("model/model.pblm", "train-lm");
pub const TRAIN_REPORT: Artifact = art("model/train_report.json", "train-lm");
pub const CAPTURE_PROBE: Artifact = art("capture/probe.jsonl", "capture");
pub const CAPTURE_STEER: Artifact = art("capture/steer.jsonl", "capture");
pub const CAPTURE_SUMMARY: Artifact = art("capture/summary.json", "capture");
pub const PROBE_CELLS: Artifact = art("probe/cells.csv", "probe");
pub const PROBE_HEATMAP: Artifact = art("probe/heatmap.csv", "probe");
pub const PROBE_CAPACITY: Artifact = art("probe/capacity.csv", "probe");
pub const PROBE_SUMMARY: Artifact = art("probe/summary.json", "probe");
pub const VECTORS_BIN: Artifact = art("steer/vectors.bin", "steer-build");
pub const VECTORS_META: Artifact = art("steer/vectors.json", "steer-build");
pub const GRID: Artifact = art("intervene/grid.csv", "intervene");
pub const BEST_PER_LAYER: Artifact = art("intervene/best_per_layer.csv", "intervene");
pub const PARETO: Artifact = art("intervene/pareto.json", "intervene");
pub const CASES: Artifact = art("intervene/cases.jsonl", "intervene");
pub const INTERVENE_SUMMARY: Artifact = art("intervene/summary.json", "intervene");
pub const REPORT_JSON: Artifact = art("report/summary.json", "report");
pub const REPORT_MD: Artifact = art("report/report.md", "report");

/// Provenance line shared by text headers and the checkpoint tag.
pub fn stamp(hash: &str) -> String {
    format!("config_hash={hash} version={VERSION}")
}

pub struct Store {
    root: PathBuf,
    hash: String,
    allow_mismatch: bool,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>, hash: String, allow_mismatch: bool) -> Self {
        Store {
            root: root.into(),
            hash,
            allow_mismatch,
        }
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Writes to a sibling temp file, then renames over the destination.
    pub fn write_bytes(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(rel);
        write_atomic(&path, bytes)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    pub fn write_csv(&self, rel: &str, body: &str) -> Result<PathBuf> {
        self.write_bytes(rel, format!("# {}\n{body}", stamp(&self.hash)).as_bytes())
    }

    /// Pretty JSON with `config_hash` and `version` merged into the object.
    pub fn write_json(&self, rel: &str, mut value: Value) -> Result<PathBuf> {
        let obj = value.as_object_mut().expect("artifact JSON is an object");
        obj.insert("config_hash".into(), json!(self.hash));
        obj.insert("version".into(), json!(VERSION));
        let mut s = serde_json::to_string_pretty(&value).expect("JSON serializes");
        s.push('\n');
        self.write_bytes(rel, s.as_bytes())
    }

    /// JSON lines behind a header object.
    pub fn write_jsonl(&self, rel: &str, body: &str) -> Result<PathBuf> {
        let header = json!({"config_hash": self.hash, "version": VERSION});
        self.write_bytes(rel, format!("{header}\n{body}").as_bytes())
    }

    pub fn write_svg(&self, rel: &str, svg: &str) -> Result<PathBuf> {
        self.write_bytes(rel, format!("<!-- {} -->\n{svg}", stamp(&self.hash)).as_bytes())
    }

    pub fn read_bytes(&self, a: Artifact) -> Result<Vec<u8>> {
        let path = self.path(a.rel);
        fs::read(&path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                CliError::MissingArtifact {
                    path,
                    producer: a.producer,
                }
            } else {
                CliError::Io { path, source }
            }
        })
    }

    pub fn read_string(&self, a: Artifact) -> Result<String> {
        String::from_utf8(self.read_bytes(a)?).map_err(|e| self.bad(a, e.to_string()))
    }

    pub fn read_json(&self, a: Artifact, strict: bool) -> Result<Value> {
        let v: Value =
            serde_json::from_str(&self.read_string(a)?).map_err(|e| self.bad(a, e.to_string()))?;
        let found = v.get("config_hash").and_then(Value::as_str).unwrap_or("<none>");
        self.check(a, found, strict)?;
        Ok(v)
    }

    /// Returns the body after the header line.
    pub fn read_jsonl(&self, a: Artifact, strict: bool) -> Result<String> {
        let raw = self.read_string(a)?;
        let (head, body) = raw.split_once('\n').unwrap_or((&raw, ""));
        let v: Value = serde_json::from_str(head).map_err(|e| self.bad(a, format!("header: {e}")))?;
        let found = v.get("config_hash").and_then(Value::as_str).unwrap_or("<none>");
        self.check(a, found, strict)?;
        Ok(body.to_string())
    }

    /// Compares an upstream hash with ours. Strict checks fail unless the
    /// override is set; lenient ones only warn.
    pub fn check(&self, a: Artifact, found: &str, strict: bool) -> Result<()> {
        if found == self.hash {
            return Ok(());
        }
        if strict && !self.allow_mismatch {
            return Err(CliError::HashMismatch {
                path: self.path(a.rel),
                expected: self.hash.clone(),
                found: found.to_string(),
            });
        }
        log::warn!(
            "{} was produced by config {found}, current config is {}",
            self.path(a.rel).display(),
            self.hash
        );
        Ok(())
    }

    pub fn bad(&self, a: Artifact, message: impl Into<String>) -> CliError {
        CliError::BadArtifact {
            path: self.path(a.rel),
            message: message.into(),
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers_carry_the_hash_and_reads_check_it() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path(), "abc".into(), false);
        store.write_json(PROBE_SUMMARY.rel, json!({"x": 1})).unwrap();
        store.write_jsonl(CAPTURE_PROBE.rel, "{\"a\":1}\n").unwrap();
        store.write_csv(PROBE_CELLS.rel, "a,b\n1,2\n").unwrap();

        assert_eq!(store.read_json(PROBE_SUMMARY, true).unwrap()["x"], 1);
        assert_eq!(store.read_jsonl(CAPTURE_PROBE, true).unwrap(), "{\"a\":1}\n");
        let csv = store.read_string(PROBE_CELLS).unwrap();
        assert_eq!(csv, format!("# {}\na,b\n1,2\n", stamp("abc")));

        let other = Store::new(dir.path(), "def".into(), false);
        assert!(matches!(
            other.read_json(PROBE_SUMMARY, true),
            Err(CliError::HashMismatch { .. })
        ));
        assert!(other.read_json(PROBE_SUMMARY, false).is_ok());
        let forced = Store::new(dir.path(), "def".into(), true);
        assert!(forced.read_jsonl(CAPTURE_PROBE, true).is_ok());
    }

    #[test]
    fn missing_artifacts_name_their_producer() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path(), "abc".into(), false);
        let err = store.read_bytes(VECTORS_BIN).unwrap_err();
        assert!(err.to_string().contains("posbias steer-build"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/c.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
