//! Run records: one JSON line per generation, enough to replay it.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{attribute, map_image, overlay_png, Attribution, GenerationConfig, VAMap};
use crate::diffusion::Model;
use crate::error::{Result, VadeError};
use crate::image::{encode_png, hex_string, BitDepth, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Counterfactual,
    Induce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    /// Path, scan id or `inline`.
    pub source: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRef {
    pub name: String,
    pub path: Option<String>,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub ssim: f64,
    pub localization: Option<f64>,
    pub mean_abs_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub kind: RunKind,
    pub config: GenerationConfig,
    pub input: InputRef,
    pub control: Option<InputRef>,
    pub outputs: Vec<OutputRef>,
    pub scores: RunScores,
    pub checkpoint_id: String,
}

impl RunRecord {
    pub fn output_hash(&self, name: &str) -> Option<&str> {
        self.outputs
            .iter()
            .find(|o| o.name == name)
            .map(|o| o.hash.as_str())
    }
}

pub fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

/// SHA-256 over the little-endian `f64` map values.
pub fn map_hash(map: &VAMap) -> String {
    let mut h = Sha256::new();
    h.update((map.width as u64).to_le_bytes());
    h.update((map.height as u64).to_le_bytes());
    for v in &map.values {
        h.update(v.to_le_bytes());
    }
    hex_string(&h.finalize())
}

/// Encoded artifacts of one attribution run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub attribution: Attribution,
    pub counterfactual_png: Vec<u8>,
    pub vamap_png: Vec<u8>,
    pub overlay_png: Vec<u8>,
}

impl RunArtifacts {
    pub fn output_refs(&self) -> Vec<OutputRef> {
        let r = |name: &str, hash: String| OutputRef {
            name: name.into(),
            path: None,
            hash,
        };
        vec![
            r(
                "counterfactual",
                self.attribution.counter.image.content_hash(),
            ),
            r(
                "counterfactual_unclamped",
                self.attribution.counter.unclamped.content_hash(),
            ),
            r("vamap", map_hash(&self.attribution.map)),
            r("counterfactual_png", bytes_hash(&self.counterfactual_png)),
            r("vamap_png", bytes_hash(&self.vamap_png)),
            r("overlay_png", bytes_hash(&self.overlay_png)),
        ]
    }

    pub fn scores(&self) -> RunScores {
        RunScores {
            ssim: self.attribution.ssim,
            localization: self.attribution.localization,
            mean_abs_map: self.attribution.map.mean_abs(),
        }
    }
}

pub fn run_attribution(
    model: &Model,
    image: &Image,
    cfg: &GenerationConfig,
    lesion_mask: Option<&Image>,
) -> Result<RunArtifacts> {
    let attribution = attribute(model, image, cfg, lesion_mask)?;
    Ok(RunArtifacts {
        counterfactual_png: encode_png(&attribution.counter.image, BitDepth::Sixteen)?,
        vamap_png: encode_png(&map_image(&attribution.map), BitDepth::Eight)?,
        overlay_png: overlay_png(image, &attribution.map)?,
        attribution,
    })
}

/// Re-runs a record's configuration on `image` and checks every output hash.
pub fn replay_matches(
    model: &Model,
    record: &RunRecord,
    image: &Image,
    control: Option<&Image>,
) -> Result<bool> {
    if image.content_hash() != record.input.hash {
        return Err(VadeError::InvalidParam(format!(
            "input does not match run {}",
            record.run_id
        )));
    }
    let cfg = GenerationConfig {
        control: control.cloned(),
        ..record.config.clone()
    };
    let art = run_attribution(model, image, &cfg, None)?;
    let got = art.output_refs();
    Ok(got
        .iter()
        .all(|o| record.output_hash(&o.name).is_none_or(|h| h == o.hash)))
}

/// Append-only JSONL log with monotonically increasing run ids.
#[derive(Debug)]
pub struct RunLog {
    path: PathBuf,
    next_id: u64,
}

impl RunLog {
    pub fn open(path: &Path) -> Result<Self> {
        let next_id = read_records(path)?
            .iter()
            .map(|r| r.run_id)
            .max()
            .map_or(1, |m| m + 1);
        Ok(RunLog {
            path: path.to_path_buf(),
            next_id,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Assigns the next run id and timestamp, then appends.
    pub fn append(&mut self, mut record: RunRecord) -> Result<RunRecord> {
        record.run_id = self.next_id;
        record.timestamp = now_secs();
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| VadeError::io(dir, e))?;
        }
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| VadeError::io(&self.path, e))?;
        f.write_all(line.as_bytes())
            .map_err(|e| VadeError::io(&self.path, e))?;
        self.next_id += 1;
        Ok(record)
    }

    pub fn records(&self) -> Result<Vec<RunRecord>> {
        read_records(&self.path)
    }

    pub fn get(&self, run_id: u64) -> Result<Option<RunRecord>> {
        Ok(self.records()?.into_iter().find(|r| r.run_id == run_id))
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let f = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(VadeError::io(path, e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| VadeError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> RunRecord {
        RunRecord {
            run_id: 0,
            timestamp: 0,
            kind: RunKind::Counterfactual,
            config: GenerationConfig::default(),
            input: InputRef {
                source: "inline".into(),
                hash: "00".into(),
            },
            control: None,
            outputs: vec![],
            scores: RunScores {
                ssim: 1.0,
                localization: None,
                mean_abs_map: 0.0,
            },
            checkpoint_id: "ck".into(),
        }
    }

    #[test]
    fn ids_are_monotonic_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.jsonl");
        let mut log = RunLog::open(&p).unwrap();
        assert_eq!(log.append(record()).unwrap().run_id, 1);
        assert_eq!(log.append(record()).unwrap().run_id, 2);
        let mut log = RunLog::open(&p).unwrap();
        assert_eq!(log.append(record()).unwrap().run_id, 3);
        assert_eq!(log.records().unwrap().len(), 3);
        assert_eq!(
            log.get(2).unwrap().unwrap().config,
            GenerationConfig::default()
        );
        assert!(log.get(9).unwrap().is_none());
    }
}
