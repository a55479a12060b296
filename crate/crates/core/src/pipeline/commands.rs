//! The command layer behind the CLI. Every command reads its inputs from
//! files, writes its outputs to files, and returns a summary value.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::{embed_with, labels_and_split};
use super::{read_file, read_records, read_slices, sha256_hex, slices_to_jsonl, write_file};
use super::{train, Checkpoint, PipelineError, Result, RunConfig, TrainOptions, TrainOutcome};
use crate::eval::{evaluate, transfer_eval, EvalOptions, EvalReport};
use crate::ingest::{parse_dicom_tags, parse_manifest_line, IngestError, MetadataRecord};
use crate::labels::{LabelConfig, LabelSpace};
use crate::synth::{default_protocols, generate_dataset, SynthConfig, SyntheticSlice, TissueSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub files: usize,
    pub accepted: usize,
    /// Error kind → number of rejected files or manifest lines.
    pub rejected: BTreeMap<String, usize>,
}

fn is_manifest(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl" | "json" | "ndjson")
    )
}

/// Files under each input, directories expanded recursively in name order.
fn collect_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let entries = fs::read_dir(input).map_err(|source| PipelineError::Io {
                path: input.clone(),
                source,
            })?;
            let mut children: Vec<PathBuf> =
                entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            children.sort();
            out.extend(collect_files(&children)?);
        } else {
            out.push(input.clone());
        }
    }
    Ok(out)
}

/// Parses DICOM files and JSON-lines manifests into canonical records and
/// writes them as JSON lines to `out`, with a summary alongside. A parse
/// error aborts the command unless `skip_bad` is set.
pub fn cmd_ingest(inputs: &[PathBuf], out: &Path, skip_bad: bool) -> Result<IngestSummary> {
    let files = collect_files(inputs)?;
    let mut summary = IngestSummary {
        files: files.len(),
        accepted: 0,
        rejected: BTreeMap::new(),
    };
    let mut records: Vec<MetadataRecord> = Vec::new();
    let mut handle = |r: std::result::Result<MetadataRecord, IngestError>,
                      origin: String,
                      records: &mut Vec<_>| {
        match r {
            Ok(rec) => {
                records.push(rec);
                Ok(())
            }
            Err(e) if skip_bad => {
                *summary.rejected.entry(e.kind().to_string()).or_insert(0) += 1;
                Ok(())
            }
            Err(source) => Err(PipelineError::Ingest {
                path: origin,
                source,
            }),
        }
    };
    for path in &files {
        let name = path
            .file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        if is_manifest(path) {
            for (i, line) in read_file(path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let parsed = parse_manifest_line(line).and_then(|r| r.validate().map(|_| r));
                handle(
                    parsed,
                    format!("{}:{}", path.display(), i + 1),
                    &mut records,
                )?;
            }
        } else {
            let bytes = fs::read(path).map_err(|source| PipelineError::Io {
                path: path.clone(),
                source,
            })?;
            let parsed = parse_dicom_tags(&bytes).map(|mut r| {
                r.source_id = name.clone();
                r
            });
            handle(parsed, path.display().to_string(), &mut records)?;
        }
    }
    summary.accepted = records.len();
    if records.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_file(out, text.as_bytes())?;
    write_file(
        &out.with_extension("summary.json"),
        serde_json::to_string_pretty(&summary)
            .expect("summary serializes")
            .as_bytes(),
    )?;
    Ok(summary)
}

/// Writes a synthetic dataset over the default protocol list laid out on a
/// `cells.0 × cells.1` TE×TR lattice.
pub fn cmd_synth(
    out: &Path,
    config: &SynthConfig,
    cells: (u32, u32),
) -> Result<Vec<SyntheticSlice>> {
    if cells.0 == 0 || cells.1 == 0 {
        return Err(PipelineError::Usage(
            "protocol lattice needs at least one cell".into(),
        ));
    }
    let slices = generate_dataset(
        &default_protocols(cells.0, cells.1),
        &TissueSet::default(),
        config,
    )?;
    write_file(out, slices_to_jsonl(&slices).as_bytes())?;
    Ok(slices)
}

pub fn cmd_build_labels(dataset: &Path, config: &LabelConfig, out: &Path) -> Result<LabelSpace> {
    let records = read_records(dataset)?;
    let (space, _) = LabelSpace::build(&records, config)?;
    write_file(out, space.to_json().as_bytes())?;
    Ok(space)
}

pub fn read_label_space(path: &Path) -> Result<LabelSpace> {
    Ok(LabelSpace::from_json(&read_file(path)?)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&read_file(path)?)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// Trains on the dataset's training split and writes `checkpoint.json` and
/// `train_log.jsonl` into `out_dir`. A resumed run appends to the log.
pub fn cmd_train(
    dataset: &Path,
    labels: &Path,
    config: &RunConfig,
    out_dir: &Path,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    let raw = read_file(dataset)?;
    let slices = read_slices(dataset)?;
    let space = read_label_space(labels)?;
    let resumed = options.resume.is_some();
    let outcome = train(
        config,
        &slices,
        &space,
        &sha256_hex(raw.as_bytes()),
        options,
    )?;
    write_file(
        &out_dir.join(CHECKPOINT_FILE),
        outcome.checkpoint.to_json().as_bytes(),
    )?;
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let mut log = if resumed {
        fs::read_to_string(&log_path).unwrap_or_default()
    } else {
        String::new()
    };
    log.push_str(&outcome.log_jsonl());
    write_file(&log_path, log.as_bytes())?;
    Ok(outcome)
}

#[derive(Debug, Clone, Default)]
pub struct EvalCommand {
    /// Gallery prompts keep only the numerical clauses.
    pub numerical_only: bool,
    /// Label-space file whose grid the evaluation is coarsened onto.
    pub transfer: Option<PathBuf>,
}

/// Evaluates a checkpoint. On the dataset it was trained on, the held-out
/// scans are evaluated and the linear probe is fit on the training scans; on
/// any other dataset every slice is evaluated and no probe is fit.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    labels: &Path,
    command: &EvalCommand,
) -> Result<EvalReport> {
    let ckpt = read_checkpoint(checkpoint)?;
    let raw = read_file(dataset)?;
    let slices = read_slices(dataset)?;
    let space = read_label_space(labels)?;
    let options = EvalOptions {
        prompt: crate::prompt::PromptConfig {
            numerical_only: command.numerical_only || ckpt.config.prompt.numerical_only,
            ..ckpt.config.prompt.clone()
        },
        probe_l2: ckpt.config.probe_l2,
        config_hash: ckpt.config_hash.clone(),
    };
    let (eval_idx, train_idx) = if sha256_hex(raw.as_bytes()) == ckpt.dataset_hash {
        let (_, train, test) = labels_and_split(&ckpt.config, &slices, &space)?;
        (test, Some(train))
    } else {
        ((0..slices.len()).collect(), None)
    };
    let pick = |idx: &[usize]| idx.iter().map(|&i| &slices[i]).collect::<Vec<_>>();
    let eval_set = embed_with(&ckpt.model, &ckpt.feature_norm, &pick(&eval_idx))?;
    let train_set = train_idx
        .map(|t| embed_with(&ckpt.model, &ckpt.feature_norm, &pick(&t)))
        .transpose()?;
    match &command.transfer {
        None => Ok(evaluate(
            &ckpt.model,
            &space,
            &eval_set,
            train_set.as_ref(),
            &options,
        )?),
        Some(path) => {
            let coarse = read_label_space(path)?;
            let grid = coarse.grid().ok_or_else(|| {
                PipelineError::Usage("transfer target must be a grid label space".into())
            })?;
            Ok(transfer_eval(
                &ckpt.model,
                &space,
                grid,
                &eval_set,
                train_set.as_ref(),
                &options,
            )?)
        }
    }
}
