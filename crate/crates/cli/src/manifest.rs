//! Content hashing, stage completion markers for resume, and the run
//! manifest (config echo, version, per-stage hashes and wall-clock).

use crate::error::Result;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub fn version_string() -> String {
    format!("funavg-{}", env!("CARGO_PKG_VERSION"))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn walk_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.file_name().map(|n| n == STAGE_MARKER).unwrap_or(false) {
            continue;
        }
        if path.is_dir() {
            walk_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Hash of a directory's contents: sorted relative paths and file
/// bytes. Independent of creation order and timestamps.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    walk_files(dir, &mut files)?;
    let mut rels: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| {
            let rel = p
                .strip_prefix(dir)
                .expect("file under dir")
                .to_string_lossy()
                .replace('\\', "/");
            (rel, p)
        })
        .collect();
    rels.sort();
    let mut h = Sha256::new();
    for (rel, path) in rels {
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update(std::fs::read(&path)?);
        h.update([0xffu8]);
    }
    Ok(hex(&h.finalize()))
}

pub const STAGE_MARKER: &str = ".stage";

/// Completion marker written after a stage finishes; a later resumed
/// run skips the stage when the config hash still matches.
pub struct StageMark {
    pub name: String,
    pub config_hash: String,
    pub content_hash: String,
    pub wall_secs: f64,
}

pub fn write_stage_mark(dir: &Path, mark: &StageMark) -> Result<()> {
    let text = format!(
        "stage={}\nconfig_hash={}\ncontent_hash={}\nwall_secs={:.3}\n",
        mark.name, mark.config_hash, mark.content_hash, mark.wall_secs
    );
    std::fs::write(dir.join(STAGE_MARKER), text)?;
    Ok(())
}

pub fn read_stage_mark(dir: &Path) -> Option<StageMark> {
    let text = std::fs::read_to_string(dir.join(STAGE_MARKER)).ok()?;
    let mut name = None;
    let mut config_hash = None;
    let mut content_hash = None;
    let mut wall_secs = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("stage=") {
            name = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("config_hash=") {
            config_hash = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("content_hash=") {
            content_hash = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("wall_secs=") {
            wall_secs = v.parse::<f64>().ok();
        }
    }
    Some(StageMark {
        name: name?,
        config_hash: config_hash?,
        content_hash: content_hash?,
        wall_secs: wall_secs.unwrap_or(0.0),
    })
}

/// Whether a completed stage with this config hash already exists and
/// its content still matches the recorded hash.
pub fn stage_is_current(dir: &Path, name: &str, config_hash: &str) -> bool {
    match read_stage_mark(dir) {
        Some(mark) => {
            mark.name == name
                && mark.config_hash == config_hash
                && hash_dir(dir).map(|h| h == mark.content_hash).unwrap_or(false)
        }
        None => false,
    }
}

/// Accumulates the run manifest while stages execute.
#[derive(Default)]
pub struct RunManifest {
    pub stages: Vec<StageMark>,
}

impl RunManifest {
    pub fn add(&mut self, mark: StageMark) {
        self.stages.push(mark);
    }

    pub fn write(&self, path: &Path, config_echo: &str) -> Result<()> {
        let mut text = String::new();
        text.push_str(&format!("version={}\n", version_string()));
        text.push_str("# per-stage content hashes\n");
        for s in &self.stages {
            text.push_str(&format!(
                "stage.{}.content_hash={}\nstage.{}.wall_secs={:.3}\n",
                s.name, s.content_hash, s.name, s.wall_secs
            ));
        }
        text.push_str("# config echo\n");
        text.push_str(config_echo);
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_hash_ignores_marker_and_is_order_free() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), b"bbb").unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/a.txt"), b"aaa").unwrap();
        let h1 = hash_dir(dir.path()).unwrap();
        std::fs::write(dir.path().join(STAGE_MARKER), b"x").unwrap();
        let h2 = hash_dir(dir.path()).unwrap();
        assert_eq!(h1, h2);
        std::fs::write(dir.path().join("sub/a.txt"), b"mutated").unwrap();
        assert_ne!(hash_dir(dir.path()).unwrap(), h1);
    }

    #[test]
    fn stage_mark_round_trip_and_currency() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data.bin"), b"payload").unwrap();
        let content = hash_dir(dir.path()).unwrap();
        write_stage_mark(
            dir.path(),
            &StageMark {
                name: "generate".into(),
                config_hash: "cfg1".into(),
                content_hash: content,
                wall_secs: 0.5,
            },
        )
        .unwrap();
        assert!(stage_is_current(dir.path(), "generate", "cfg1"));
        assert!(!stage_is_current(dir.path(), "generate", "cfg2"));
        assert!(!stage_is_current(dir.path(), "train", "cfg1"));
        // content drift invalidates the mark
        std::fs::write(dir.path().join("data.bin"), b"tampered").unwrap();
        assert!(!stage_is_current(dir.path(), "generate", "cfg1"));
    }
}
