//! Dataset manifest: one JSON-Lines record per synthesized example, with a
//! trailing config echo line. Paths are stored relative to the manifest file.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Clean,
    Weak,
    WeakSnr,
    WeakPos,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Clean => "clean",
            Variant::Weak => "weak",
            Variant::WeakSnr => "weak_snr",
            Variant::WeakPos => "weak_pos",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Variant::Clean),
            "weak" => Ok(Variant::Weak),
            "weak_snr" | "weak-snr" => Ok(Variant::WeakSnr),
            "weak_pos" | "weak-pos" => Ok(Variant::WeakPos),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub variant: Variant,
    /// Target clip duration t in seconds (ignored for the clean variant).
    pub target_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    pub sample_rate: u32,
    pub seed: u64,
    pub keyword_dir: PathBuf,
    pub noise_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_seconds <= 0.0 {
            return Err(Error::Config("target_seconds must be positive".into()));
        }
        match (self.variant, self.snr_db) {
            (Variant::WeakSnr, None) => {
                Err(Error::Config("weak_snr requires snr_db".into()))
            }
            (v, Some(_)) if v != Variant::WeakSnr => Err(Error::Config(
                "snr_db is only meaningful for the weak_snr variant".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub out_path: PathBuf,
    pub label: usize,
    pub split: Split,
    pub source_keyword: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_noise: Option<PathBuf>,
    pub offset_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    /// Gain applied to the noise during SNR mixing; lets the realized SNR
    /// be re-derived from the sources without re-running synthesis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_gain: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub config: SynthConfig,
}

#[derive(Serialize, Deserialize)]
struct ConfigLine {
    config: SynthConfig,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for rec in &self.records {
            serde_json::to_writer(&mut buf, rec).map_err(|e| Error::Format(e.to_string()))?;
            buf.push(b'\n');
        }
        serde_json::to_writer(
            &mut buf,
            &ConfigLine {
                config: self.config.clone(),
            },
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        buf.push(b'\n');
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(f);
        let mut records = Vec::new();
        let mut config = None;
        for line in reader.lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            if line.contains("\"config\"") {
                if let Ok(c) = serde_json::from_str::<ConfigLine>(&line) {
                    config = Some(c.config);
                    continue;
                }
            }
            let rec: SampleRecord =
                serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?;
            records.push(rec);
        }
        let config = config.ok_or_else(|| {
            Error::Format(format!("{}: missing trailing config line", path.display()))
        })?;
        Ok(DatasetManifest { records, config })
    }

    /// Absolute audio path for a record (records store paths relative to
    /// the manifest file).
    pub fn resolve(manifest_path: &Path, record: &SampleRecord) -> PathBuf {
        Self::resolve_path(manifest_path, &record.out_path)
    }

    /// Resolve any manifest-relative path (output clip, source keyword,
    /// source noise) against the manifest location.
    pub fn resolve_path(manifest_path: &Path, path: &Path) -> PathBuf {
        if path.is_absolute() {
            return path.to_path_buf();
        }
        match manifest_path.parent() {
            Some(dir) => dir.join(path),
            None => path.to_path_buf(),
        }
    }
}

/// Lexical relative path from `base` to `path` (both treated as-is, no
/// filesystem access). Falls back to `path` unchanged when the two share no
/// common prefix, e.g. different roots.
pub fn relative_to(base: &Path, path: &Path) -> PathBuf {
    use std::path::Component;
    let b: Vec<Component> = base.components().collect();
    let p: Vec<Component> = path.components().collect();
    let mut common = 0;
    while common < b.len() && common < p.len() && b[common] == p[common] {
        common += 1;
    }
    if common == 0 && path.is_absolute() != base.is_absolute() {
        return path.to_path_buf();
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &p[common..] {
        out.push(c);
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> SynthConfig {
        SynthConfig {
            variant: Variant::Weak,
            target_seconds: 3.0,
            snr_db: None,
            sample_rate: 16000,
            seed: 7,
            keyword_dir: "kw".into(),
            noise_dir: Some("noise".into()),
            out_dir: "out".into(),
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let m = DatasetManifest {
            records: vec![SampleRecord {
                out_path: "train/000000_yes.wav".into(),
                label: 0,
                split: Split::Train,
                source_keyword: "kw/yes/a.wav".into(),
                source_noise: Some("noise/n0.wav".into()),
                offset_samples: 123,
                snr_db: None,
                noise_gain: None,
                seed: 99,
            }],
            config: config(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.records.len(), 1);
        assert_eq!(back.records[0].offset_samples, 123);
        assert_eq!(back.config.seed, 7);
        // one JSON object per line, config last
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("{\"config\""));
    }

    #[test]
    fn snr_config_validation() {
        let mut c = config();
        c.variant = Variant::WeakSnr;
        assert!(c.validate().is_err());
        c.snr_db = Some(5.0);
        assert!(c.validate().is_ok());
        c.variant = Variant::Weak;
        assert!(c.validate().is_err());
    }

    #[test]
    fn relative_path_computation() {
        let rel = relative_to(Path::new("/a/b/data"), Path::new("/a/b/corpus/x.wav"));
        assert_eq!(rel, PathBuf::from("../corpus/x.wav"));
        let same = relative_to(Path::new("/a/b"), Path::new("/a/b"));
        assert_eq!(same, PathBuf::from("."));
        let below = relative_to(Path::new("/a"), Path::new("/a/b/c"));
        assert_eq!(below, PathBuf::from("b/c"));
        // resolving undoes relativization (lexically)
        let resolved =
            DatasetManifest::resolve_path(Path::new("/a/b/data/manifest.jsonl"), &rel);
        assert_eq!(resolved, PathBuf::from("/a/b/data/../corpus/x.wav"));
    }
}
