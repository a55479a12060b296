//! End-to-end commands: ingest, synthetic data, label construction, training
//! and evaluation, with reproducible run configuration and file formats.

pub mod commands;
pub mod train;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::EvalError;
use crate::ingest::{parse_manifest_line, IngestError, MetadataRecord};
use crate::labels::{GridSpec, LabelConfig, LabelError};
use crate::loss::{LossError, LossKind};
use crate::model::{AdamConfig, ModelConfig, ModelError, Tensor};
use crate::prompt::PromptConfig;
use crate::synth::{SynthError, SyntheticSlice};

pub use commands::{
    cmd_build_labels, cmd_eval, cmd_ingest, cmd_synth, cmd_train, EvalCommand, IngestSummary,
};
pub use train::{train, Checkpoint, TrainOptions, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Ingest { path: String, source: IngestError },
    #[error("{path}:{line}: {message}")]
    MalformedDataset {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("record {0:?} has no label in the label space")]
    UnlabeledRecord(String),
    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },
}

impl PipelineError {
    /// 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Diverged { .. }
            | PipelineError::Model(ModelError::NonFiniteGradient)
            | PipelineError::Eval(EvalError::Model(ModelError::NonFiniteGradient)) => 3,
            PipelineError::Model(ModelError::Loss(LossError::NonUnitEmbedding { .. }))
            | PipelineError::Model(ModelError::Loss(LossError::NonPositiveTemperature(_))) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything that determines a training run, apart from file locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub loss: LossKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub shards: usize,
    /// Fraction of scans used for training; the rest are held out.
    pub train_fraction: f64,
    pub prompt: PromptConfig,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub probe_l2: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            loss: LossKind::SupCon,
            batch_size: 256,
            epochs: 20,
            shards: 1,
            train_fraction: 0.7,
            prompt: PromptConfig {
                dropout_prob: 0.2,
                ..PromptConfig::default()
            },
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            probe_l2: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Usage(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.shards == 0 {
            return bad("shard count must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train fraction must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.prompt.dropout_prob) {
            return bad("dropout probability must be in [0, 1]");
        }
        if self.prompt.vocab_size != self.model.vocab_size {
            return bad("prompt and model vocabulary sizes differ");
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// Label configuration from the `--grid`/`--kmeans`/`--numerical-only` flags.
pub fn label_config(
    grid: Option<&str>,
    kmeans: Option<usize>,
    seed: u64,
    numerical_only: bool,
) -> Result<LabelConfig> {
    let cfg = match (grid, kmeans) {
        (Some(_), Some(_)) => {
            return Err(PipelineError::Usage(
                "--grid and --kmeans are exclusive".into(),
            ))
        }
        (_, Some(n)) => LabelConfig::kmeans(n, seed),
        (g, None) => LabelConfig::grid(match g {
            Some(dims) => {
                GridSpec::parse_dims(dims).map_err(|e| PipelineError::Usage(e.to_string()))?
            }
            None => GridSpec::default(),
        }),
    };
    Ok(if numerical_only {
        cfg.numerical_only()
    } else {
        cfg
    })
}

/// Reads a JSON-lines file of metadata records (ingest output or synthetic
/// slices; extra keys are ignored).
pub fn read_records(path: &Path) -> Result<Vec<MetadataRecord>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            parse_manifest_line(line).map_err(|e| PipelineError::MalformedDataset {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    if out.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    Ok(out)
}

/// Reads a JSON-lines file of synthetic slices with features.
pub fn read_slices(path: &Path) -> Result<Vec<SyntheticSlice>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let slice: SyntheticSlice =
            serde_json::from_str(line).map_err(|e| PipelineError::MalformedDataset {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(slice);
    }
    if out.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    Ok(out)
}

pub fn slices_to_jsonl(slices: &[SyntheticSlice]) -> String {
    let mut s = String::new();
    for slice in slices {
        s.push_str(&serde_json::to_string(slice).expect("slice serializes"));
        s.push('\n');
    }
    s
}

/// Scan-level split: scans are shuffled with `seed` and the first
/// `train_fraction` of them go to training. Returns slice indices.
pub fn split_by_scan(scan_ids: &[u64], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut scans: Vec<u64> = scan_ids.to_vec();
    scans.sort_unstable();
    scans.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scans.shuffle(&mut rng);
    let n_train =
        ((scans.len() as f64 * train_fraction).round() as usize).clamp(1, scans.len().max(1));
    let mut train_scans = scans[..n_train].to_vec();
    train_scans.sort_unstable();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in scan_ids.iter().enumerate() {
        if train_scans.binary_search(s).is_ok() {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    (train, test)
}

/// Log-compresses raw signal features and standardizes each channel with
/// statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub offset: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    const OFFSET: f64 = 0.01;

    fn log(&self, v: f64) -> f64 {
        (v.max(0.0) + self.offset).ln()
    }

    pub fn fit(features: &[&[f64]]) -> Self {
        let d = features.first().map_or(0, |f| f.len());
        let n = features.len().max(1) as f64;
        let mut norm = FeatureNorm {
            offset: Self::OFFSET,
            mean: vec![0.0; d],
            std: vec![1.0; d],
        };
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f.iter()) {
                *m += norm.log(*v) / n;
            }
        }
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f.iter()).zip(&mean) {
                *s += (norm.log(*v) - m).powi(2) / n;
            }
        }
        norm.mean = mean;
        norm.std = var
            .iter()
            .map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        norm
    }

    pub fn apply(&self, features: &[&[f64]]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = features
            .iter()
            .map(|f| {
                f.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(v, (m, s))| (self.log(*v) - m) / s)
                    .collect()
            })
            .collect();
        if let Some(bad) = features.iter().find(|f| f.len() != self.mean.len()) {
            return Err(ModelError::ShapeMismatch {
                expected: vec![self.mean.len()],
                found: vec![bad.len()],
            }
            .into());
        }
        Ok(Tensor::from_rows(&rows)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_keeps_scans_together() {
        let scan_ids: Vec<u64> = (0..100).flat_map(|s| [s; 3]).collect();
        let (train, test) = split_by_scan(&scan_ids, 0.7, 4);
        assert_eq!(train.len(), 210);
        assert_eq!(test.len(), 90);
        let train_scans: std::collections::BTreeSet<u64> =
            train.iter().map(|&i| scan_ids[i]).collect();
        assert!(test.iter().all(|&i| !train_scans.contains(&scan_ids[i])));
        assert_eq!(split_by_scan(&scan_ids, 0.7, 4), (train, test));
    }

    #[test]
    fn feature_norm_standardizes_training_data() {
        let rows = [vec![0.1, 1.0], vec![0.3, 1.0], vec![0.9, 1.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let norm = FeatureNorm::fit(&refs);
        let t = norm.apply(&refs).unwrap();
        let mean0: f64 = (0..3).map(|i| t.row(i)[0]).sum::<f64>() / 3.0;
        let var0: f64 = (0..3).map(|i| t.row(i)[0].powi(2)).sum::<f64>() / 3.0;
        assert!(mean0.abs() < 1e-12 && (var0 - 1.0).abs() < 1e-12);
        assert!((0..3).all(|i| t.row(i)[1] == 0.0));
        assert!(norm.apply(&[&[1.0][..]]).is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Usage(String::new()).exit_code(), 1);
        assert_eq!(PipelineError::EmptyDataset.exit_code(), 2);
        assert_eq!(PipelineError::Diverged { step: 3 }.exit_code(), 3);
        assert_eq!(
            PipelineError::Model(ModelError::NonFiniteGradient).exit_code(),
            3
        );
    }
}
