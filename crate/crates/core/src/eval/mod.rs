//! Retrieval recalls, majority-vote scan retrieval, linear probing, per-tag
//! error rates and grid-transfer evaluation.

pub mod probe;
pub mod retrieval;
pub mod tags;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::MetadataRecord;
use crate::labels::{GridSpec, LabelError, LabelSpace};
use crate::model::{DualEncoder, ModelError, Tensor};
use crate::prompt::{render_prompt, PromptConfig};
pub use probe::{linear_probe, ProbeResult};
pub use retrieval::{
    nearest_labels, recall_at_k, scan_majority_vote, scan_rankings, scan_recall_at_k,
    text_to_image_recall, Gallery, ScanRanking,
};
pub use tags::{per_tag_error, TagErrors};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("empty gallery")]
    EmptyGallery,
    #[error("gallery label ids must be sorted, unique and match the embeddings")]
    InvalidGallery,
    #[error("empty image set")]
    EmptyImageSet,
    #[error("empty query set")]
    EmptyQuerySet,
    #[error("empty prediction list")]
    EmptyPredictionList,
    #[error("probe training set has a single class")]
    SingleClassTrainingSet,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("slices of scan {0} carry different labels")]
    InconsistentScanLabels(u64),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recalls {
    fn from_fn(mut f: impl FnMut(usize) -> Result<f64, EvalError>) -> Result<Self, EvalError> {
        Ok(Recalls {
            r1: f(RECALL_KS[0])?,
            r5: f(RECALL_KS[1])?,
            r10: f(RECALL_KS[2])?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRecalls {
    pub image_to_text: Recalls,
    pub scan_to_text: Recalls,
    pub text_to_image: Recalls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub label_space_hash: String,
    /// Grid dimensions such as "20x20", or "kmeans".
    pub grouping: String,
    pub num_labels: usize,
    pub num_slices: usize,
    pub num_scans: usize,
    pub recalls: TaskRecalls,
    pub probe_accuracy: Option<f64>,
    #[serde(flatten)]
    pub tags: TagErrors,
}

/// Image embeddings of an evaluation split with their metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSet {
    pub embeddings: Tensor,
    pub records: Vec<MetadataRecord>,
    pub scan_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOptions {
    /// Prompt settings for gallery texts; dropout is ignored.
    pub prompt: PromptConfig,
    pub probe_l2: f64,
    pub config_hash: String,
}

/// Gallery texts: the label representative rendered under `prompt` with
/// dropout disabled.
pub fn build_gallery(
    model: &DualEncoder,
    space: &LabelSpace,
    label_ids: &BTreeSet<usize>,
    prompt: &PromptConfig,
) -> Result<Gallery, EvalError> {
    let cfg = PromptConfig {
        dropout_prob: 0.0,
        ..prompt.clone()
    };
    let tokens = label_ids
        .iter()
        .map(|&l| Ok(render_prompt(&space.get(l)?.representative, &cfg).token_ids))
        .collect::<Result<Vec<_>, EvalError>>()?;
    let embeddings = model.encode_texts(&tokens)?;
    Gallery::new(label_ids.iter().copied().collect(), embeddings)
}

fn labels_of(space: &LabelSpace, records: &[MetadataRecord]) -> Result<Vec<usize>, EvalError> {
    records
        .iter()
        .map(|r| {
            space
                .label_of(r)?
                .ok_or(EvalError::Label(LabelError::LabelDecodeFailure(usize::MAX)))
        })
        .collect()
}

/// Evaluates `eval` against labels from `space`. When `probe_train` is
/// given, a linear probe is fit on it and scored on `eval`.
pub fn evaluate(
    model: &DualEncoder,
    space: &LabelSpace,
    eval: &EmbeddedSet,
    probe_train: Option<&EmbeddedSet>,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let eval_labels = labels_of(space, &eval.records)?;
    let probe_labels = probe_train
        .map(|t| labels_of(space, &t.records))
        .transpose()?;
    report(
        model,
        space,
        eval,
        &eval_labels,
        probe_train.zip(probe_labels.as_deref()),
        options,
    )
}

/// Relabels both splits under the coarser grid `coarse` and evaluates the
/// same embeddings against galleries built from the coarse labels.
pub fn transfer_eval(
    model: &DualEncoder,
    fine: &LabelSpace,
    coarse: &GridSpec,
    eval: &EmbeddedSet,
    probe_train: Option<&EmbeddedSet>,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let mut all = eval.records.clone();
    if let Some(t) = probe_train {
        all.extend(t.records.iter().cloned());
    }
    let (space, assignment) = fine.coarsened(coarse, &all)?;
    let (eval_labels, train_labels) = assignment.split_at(eval.records.len());
    let probe = probe_train.map(|t| (t, train_labels));
    report(model, &space, eval, eval_labels, probe, options)
}

fn report(
    model: &DualEncoder,
    space: &LabelSpace,
    eval: &EmbeddedSet,
    eval_labels: &[usize],
    probe: Option<(&EmbeddedSet, &[usize])>,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if eval_labels.is_empty() {
        return Err(EvalError::EmptyImageSet);
    }
    let present: BTreeSet<usize> = eval_labels.iter().copied().collect();
    let gallery = build_gallery(model, space, &present, &options.prompt)?;
    let emb = &eval.embeddings;

    let image_to_text = Recalls::from_fn(|k| recall_at_k(emb, eval_labels, &gallery, k))?;
    let rankings = scan_rankings(emb, eval_labels, &eval.scan_ids, &gallery)?;
    let scan_to_text = Recalls::from_fn(|k| scan_recall_at_k(&rankings, k))?;
    let text_to_image = Recalls::from_fn(|k| text_to_image_recall(&gallery, emb, eval_labels, k))?;

    let predicted: Vec<usize> = rankings.iter().map(|r| r.ranking[0]).collect();
    let truth: Vec<usize> = rankings.iter().map(|r| r.true_label).collect();
    let tags = per_tag_error(&predicted, &truth, space)?;

    let probe_accuracy = match probe {
        Some((train, labels)) => Some(
            linear_probe(
                &train.embeddings,
                labels,
                emb,
                eval_labels,
                options.probe_l2,
            )?
            .accuracy,
        ),
        None => None,
    };

    Ok(EvalReport {
        config_hash: options.config_hash.clone(),
        label_space_hash: space.content_hash(),
        grouping: space
            .grid()
            .map_or_else(|| "kmeans".to_string(), GridSpec::dims_label),
        num_labels: gallery.len(),
        num_slices: eval_labels.len(),
        num_scans: rankings.len(),
        recalls: TaskRecalls {
            image_to_text,
            scan_to_text,
            text_to_image,
        },
        probe_accuracy,
        tags,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text rendering: one row per retrieval task, then probe and
    /// per-tag figures.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let pct = |v: f64| format!("{:6.1}", 100.0 * v);
        let _ = writeln!(
            s,
            "grouping {}  labels {}  scans {}  slices {}",
            self.grouping, self.num_labels, self.num_scans, self.num_slices
        );
        let _ = writeln!(s, "{:<16}{:>7}{:>7}{:>7}", "task", "R@1", "R@5", "R@10");
        for (name, r) in [
            ("image->text", self.recalls.image_to_text),
            ("scan->text", self.recalls.scan_to_text),
            ("text->image", self.recalls.text_to_image),
        ] {
            let _ = writeln!(s, "{name:<16}{} {} {}", pct(r.r1), pct(r.r5), pct(r.r10));
        }
        if let Some(p) = self.probe_accuracy {
            let _ = writeln!(s, "{:<16}{}", "linear probe", pct(p));
        }
        let _ = writeln!(s, "per-tag error (%)");
        for (tag, e) in &self.tags.per_tag_error {
            let _ = writeln!(s, "  {tag:<18}{}", pct(*e));
        }
        if let (Some(b), Some(ms)) = (self.tags.te_bin_mae, self.tags.te_mae_ms) {
            let _ = writeln!(s, "TE bin MAE {b:.3} ({ms:.1} ms)");
        }
        if let (Some(b), Some(ms)) = (self.tags.tr_bin_mae, self.tags.tr_mae_ms) {
            let _ = writeln!(s, "TR bin MAE {b:.3} ({ms:.1} ms)");
        }
        let _ = writeln!(s, "config {}", self.config_hash);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelConfig;
    use crate::model::ModelConfig;
    use crate::synth::{default_protocols, generate_dataset, SynthConfig, TissueSet};

    fn setup() -> (DualEncoder, LabelSpace, EmbeddedSet) {
        let data = generate_dataset(
            &default_protocols(2, 2),
            &TissueSet::default(),
            &SynthConfig {
                scans: 40,
                slices_per_scan: 3,
                ..SynthConfig::default()
            },
        )
        .unwrap();
        let records: Vec<MetadataRecord> = data.iter().map(|s| s.record.clone()).collect();
        let (space, _) =
            LabelSpace::build(&records, &LabelConfig::grid(GridSpec::default())).unwrap();
        let model = DualEncoder::new(ModelConfig::default(), 1);
        let features =
            Tensor::from_rows(&data.iter().map(|s| s.feature.clone()).collect::<Vec<_>>()).unwrap();
        let set = EmbeddedSet {
            embeddings: model.encode_images(&features).unwrap(),
            records,
            scan_ids: data.iter().map(|s| s.scan_id).collect(),
        };
        (model, space, set)
    }

    #[test]
    fn report_invariants_hold() {
        let (model, space, set) = setup();
        let r = evaluate(&model, &space, &set, Some(&set), &EvalOptions::default()).unwrap();
        for rc in [
            r.recalls.image_to_text,
            r.recalls.scan_to_text,
            r.recalls.text_to_image,
        ] {
            assert!(0.0 <= rc.r1 && rc.r1 <= rc.r5 && rc.r5 <= rc.r10 && rc.r10 <= 1.0);
        }
        assert_eq!(r.num_scans, 40);
        assert!(r.probe_accuracy.is_some());
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in [
            "recalls",
            "probe_accuracy",
            "per_tag_error",
            "te_bin_mae",
            "tr_bin_mae",
            "config_hash",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert!(r.render_table().contains("scan->text"));
    }

    #[test]
    fn transfer_to_same_grid_matches_standard_eval() {
        let (model, space, set) = setup();
        let opts = EvalOptions::default();
        let direct = evaluate(&model, &space, &set, None, &opts).unwrap();
        let same = transfer_eval(&model, &space, space.grid().unwrap(), &set, None, &opts).unwrap();
        assert_eq!(direct.recalls, same.recalls);
        assert_eq!(direct.tags, same.tags);
    }

    #[test]
    fn transfer_rejects_mismatched_ranges() {
        let (model, space, set) = setup();
        let mut coarse = GridSpec::with_dims(5, 5);
        coarse.te_max_ms = 300.0;
        assert!(matches!(
            transfer_eval(&model, &space, &coarse, &set, None, &EvalOptions::default()),
            Err(EvalError::Label(LabelError::IncompatibleRanges))
        ));
    }
}
