use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_wav_file, AudioError, Waveform};

/// Task labels of one clip; every field is optional per task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipLabels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genre: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arousal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valence: Option<f64>,
}

/// One manifest line: `{"path": ..., "labels": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    #[serde(default)]
    pub labels: ClipLabels,
}

impl ManifestRecord {
    /// Path resolved against the directory holding the manifest.
    pub fn resolve(&self, manifest_dir: &Path) -> PathBuf {
        let p = Path::new(&self.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_dir.join(p)
        }
    }

    pub fn clip_id(&self) -> String {
        Path::new(&self.path).file_stem().map_or_else(|| self.path.clone(), |s| s.to_string_lossy().into_owned())
    }
}

/// Reads newline-delimited JSON records; blank lines are ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, AudioError> {
    let text = std::fs::read_to_string(path).map_err(|source| AudioError::Io { path: path.display().to_string(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AudioError::Manifest {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), AudioError> {
    let io = |source| AudioError::Io { path: path.display().to_string(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("manifest records serialize");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Reads a manifest and every clip it lists, in manifest order.
pub fn load_clips(manifest: &Path) -> Result<Vec<(ManifestRecord, Waveform)>, AudioError> {
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let w = read_wav_file(&r.resolve(dir))?;
            Ok((r, w))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_labels_and_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(
            &p,
            "{\"path\":\"a.wav\",\"labels\":{\"genre\":\"rock\"}}\n\n{\"path\":\"/abs/b.wav\",\"labels\":{\"tags\":[\"x\"],\"arousal\":0.5}}\n",
        )
        .unwrap();
        let recs = read_manifest(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].labels.genre.as_deref(), Some("rock"));
        assert_eq!(recs[0].resolve(dir.path()), dir.path().join("a.wav"));
        assert_eq!(recs[1].resolve(dir.path()), PathBuf::from("/abs/b.wav"));
        assert_eq!(recs[1].clip_id(), "b");

        std::fs::write(&p, "{\"path\":\"a.wav\",\"bogus\":1}\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(AudioError::Manifest { line: 1, .. })));
    }
}
