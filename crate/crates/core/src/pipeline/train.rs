//! Minibatch training loop, checkpoints and the per-step log.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_by_scan, FeatureNorm, PipelineError, Result, RunConfig};
use crate::eval::EmbeddedSet;
use crate::labels::LabelSpace;
use crate::loss::ShardPlan;
use crate::model::{
    adam_step, DualEncoder, ModelError, OptimizerState, Param, Tensor, TEMPERATURE_MAX,
    TEMPERATURE_MIN,
};
use crate::prompt::{render_prompt, PromptConfig};
use crate::synth::SyntheticSlice;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Epoch `e` shuffles with stream `e + 1` of the run seed; the split uses
/// stream 0. Storing the seed and the next epoch is enough to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub config_hash: String,
    pub label_space_hash: String,
    pub dataset_hash: String,
    pub feature_norm: FeatureNorm,
    pub model: DualEncoder,
    pub optimizer: OptimizerState,
    pub epochs_completed: usize,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s).map_err(|e| {
            PipelineError::CheckpointMismatch(format!("unreadable checkpoint: {e}"))
        })?;
        if c.version != CHECKPOINT_VERSION {
            return Err(PipelineError::CheckpointMismatch(format!(
                "version {}",
                c.version
            )));
        }
        Ok(c)
    }

    /// Image embeddings of `slices` under this checkpoint's model.
    pub fn embed(&self, slices: &[&SyntheticSlice]) -> Result<EmbeddedSet> {
        embed_with(&self.model, &self.feature_norm, slices)
    }
}

pub fn embed_with(
    model: &DualEncoder,
    norm: &FeatureNorm,
    slices: &[&SyntheticSlice],
) -> Result<EmbeddedSet> {
    let feats: Vec<&[f64]> = slices.iter().map(|s| s.feature.as_slice()).collect();
    let x = norm.apply(&feats)?;
    Ok(EmbeddedSet {
        embeddings: model.encode_images(&x)?,
        records: slices.iter().map(|s| s.record.clone()).collect(),
        scan_ids: slices.iter().map(|s| s.scan_id).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr_eff: f64,
    pub tau: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete (defaults to the configured count).
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
            .collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dropout seed for the prompt of slice `index` at optimizer step `step`.
fn prompt_seed(base: u64, step: u64, index: usize) -> u64 {
    splitmix(base ^ splitmix(step ^ splitmix(index as u64)))
}

/// Training split indices and label ids for every slice.
pub fn labels_and_split(
    config: &RunConfig,
    slices: &[SyntheticSlice],
    space: &LabelSpace,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let labels = slices
        .iter()
        .map(|s| {
            space
                .label_of(&s.record)?
                .ok_or_else(|| PipelineError::UnlabeledRecord(s.record.source_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let scan_ids: Vec<u64> = slices.iter().map(|s| s.scan_id).collect();
    let (train, test) = split_by_scan(&scan_ids, config.train_fraction, config.seed);
    Ok((labels, train, test))
}

pub fn train(
    config: &RunConfig,
    slices: &[SyntheticSlice],
    space: &LabelSpace,
    dataset_hash: &str,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if slices.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let (labels, train_idx, _) = labels_and_split(config, slices, space)?;
    let train_feats: Vec<&[f64]> = train_idx
        .iter()
        .map(|&i| slices[i].feature.as_slice())
        .collect();

    let mut ckpt = match options.resume {
        Some(c) => {
            if c.config_hash != config.hash() {
                return Err(PipelineError::CheckpointMismatch(
                    "run configuration differs".into(),
                ));
            }
            if c.label_space_hash != space.content_hash() {
                return Err(PipelineError::CheckpointMismatch(
                    "label space differs".into(),
                ));
            }
            if c.dataset_hash != dataset_hash {
                return Err(PipelineError::CheckpointMismatch("dataset differs".into()));
            }
            c
        }
        None => {
            let model = DualEncoder::new(config.model.clone(), config.seed);
            Checkpoint {
                version: CHECKPOINT_VERSION,
                config: config.clone(),
                config_hash: config.hash(),
                label_space_hash: space.content_hash(),
                dataset_hash: dataset_hash.to_string(),
                feature_norm: FeatureNorm::fit(&train_feats),
                optimizer: OptimizerState::new(&model.params),
                model,
                epochs_completed: 0,
                rng: RngState {
                    seed: config.seed,
                    next_epoch: 0,
                },
            }
        }
    };
    let x_train = ckpt.feature_norm.apply(&train_feats)?;
    let decay = ckpt.model.decay_mask();
    let log_t_bounds = (TEMPERATURE_MIN.ln(), TEMPERATURE_MAX.ln());
    let stop = options
        .stop_after_epoch
        .unwrap_or(config.epochs)
        .min(config.epochs);
    let mut log = Vec::new();

    for epoch in ckpt.epochs_completed..stop {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train_idx.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let step = ckpt.optimizer.step + 1;
            let x = x_train.select_rows(batch);
            let tokens: Vec<Vec<u32>> = batch
                .iter()
                .enumerate()
                .map(|(pos, &b)| {
                    let cfg = PromptConfig {
                        seed: prompt_seed(config.prompt.seed, step, pos),
                        ..config.prompt.clone()
                    };
                    render_prompt(&slices[train_idx[b]].record, &cfg).token_ids
                })
                .collect();
            let y: Vec<usize> = batch.iter().map(|&b| labels[train_idx[b]]).collect();
            let plan = ShardPlan::even(batch.len(), config.shards);
            let tau = ckpt.model.temperature();
            let (loss, grads) =
                match ckpt
                    .model
                    .loss_and_gradients(&x, &tokens, &y, config.loss, &plan)
                {
                    Err(ModelError::NonFiniteGradient) => {
                        return Err(PipelineError::Diverged { step })
                    }
                    other => other?,
                };
            let grad_norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(PipelineError::Diverged { step });
            }
            let lr_eff = adam_step(
                &mut ckpt.model.params,
                &grads,
                &decay,
                &mut ckpt.optimizer,
                &config.optimizer,
            )?;
            let lt = &mut ckpt.model.param_mut(Param::LogTemperature).data[0];
            *lt = lt.clamp(log_t_bounds.0, log_t_bounds.1);
            if !ckpt.model.params.iter().all(Tensor::is_finite) {
                return Err(PipelineError::Diverged { step });
            }
            log.push(LogEntry {
                step,
                loss,
                lr_eff,
                tau,
                grad_norm,
            });
        }
        ckpt.epochs_completed = epoch + 1;
        ckpt.rng.next_epoch = epoch + 1;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
    })
}
