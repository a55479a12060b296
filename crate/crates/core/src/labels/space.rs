use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grid::{bin_ti, coarsen_assignment, quantize_te_tr, GridSpec};
use super::kmeans::{fit_kmeans, KMeansModel};
use super::LabelError;
use crate::ingest::MetadataRecord;
use crate::prompt::{render_prompt, PromptConfig, TEMPLATE_VERSION};

/// Metadata fields that may take part in a contrast label. Series description
/// is deliberately not representable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelField {
    Manufacturer,
    ScannerModel,
    Plane,
    FieldStrength,
    SequenceType,
    SequenceVariant,
    FlipAngle,
    TeBin,
    TrBin,
    TiBin,
}

impl LabelField {
    pub const ALL: [LabelField; 10] = [
        LabelField::Manufacturer,
        LabelField::ScannerModel,
        LabelField::Plane,
        LabelField::FieldStrength,
        LabelField::SequenceType,
        LabelField::SequenceVariant,
        LabelField::FlipAngle,
        LabelField::TeBin,
        LabelField::TrBin,
        LabelField::TiBin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelField::Manufacturer => "manufacturer",
            LabelField::ScannerModel => "scanner_model",
            LabelField::Plane => "plane",
            LabelField::FieldStrength => "field_strength",
            LabelField::SequenceType => "sequence_type",
            LabelField::SequenceVariant => "sequence_variant",
            LabelField::FlipAngle => "flip_angle",
            LabelField::TeBin => "te_bin",
            LabelField::TrBin => "tr_bin",
            LabelField::TiBin => "ti_bin",
        }
    }

    fn numeric(self) -> bool {
        matches!(
            self,
            LabelField::TeBin | LabelField::TrBin | LabelField::TiBin
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMode {
    Grid(GridSpec),
    KMeans { n_clusters: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub fields_in_label: BTreeSet<LabelField>,
    pub grouping_mode: GroupingMode,
}

impl LabelConfig {
    pub fn grid(spec: GridSpec) -> Self {
        LabelConfig {
            fields_in_label: LabelField::ALL.into_iter().collect(),
            grouping_mode: GroupingMode::Grid(spec),
        }
    }

    pub fn kmeans(n_clusters: usize, seed: u64) -> Self {
        LabelConfig {
            fields_in_label: LabelField::ALL.into_iter().collect(),
            grouping_mode: GroupingMode::KMeans { n_clusters, seed },
        }
    }

    /// Labels built from TE, TR and TI only.
    pub fn numerical_only(mut self) -> Self {
        self.fields_in_label = [LabelField::TeBin, LabelField::TrBin, LabelField::TiBin]
            .into_iter()
            .collect();
        self
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        if self.fields_in_label.is_empty() {
            return Err(LabelError::EmptyFieldSet);
        }
        match &self.grouping_mode {
            GroupingMode::Grid(spec) => spec.validate(),
            GroupingMode::KMeans { n_clusters: 0, .. } => Err(LabelError::TooFewDistinctPoints {
                needed: 0,
                found: 0,
            }),
            GroupingMode::KMeans { .. } => Ok(()),
        }
    }
}

/// One component of a label key: a categorical value or a bin/cluster index.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KeyPart {
    Bin(u32),
    Text(String),
}

pub type LabelKey = Vec<KeyPart>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastLabel {
    pub label_id: usize,
    pub key: LabelKey,
    /// Full-template prompt of the group's most common acquisition.
    pub canonical_text: String,
    pub representative: MetadataRecord,
}

/// The ordered set of contrast labels over a dataset, with everything needed
/// to label new records the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub template_version: u32,
    pub config: LabelConfig,
    #[serde(default)]
    pub kmeans: Option<KMeansModel>,
    pub labels: Vec<ContrastLabel>,
}

fn rounded(v: f64) -> String {
    format!("{v:.1}")
}

/// Positions of the key components, in key order.
pub fn key_layout(config: &LabelConfig) -> Vec<LabelField> {
    let kmeans = matches!(config.grouping_mode, GroupingMode::KMeans { .. });
    let mut out = Vec::new();
    let mut cluster_done = false;
    for f in &config.fields_in_label {
        if kmeans && f.numeric() {
            // one cluster index stands in for all numeric bins
            if !cluster_done {
                out.push(LabelField::TeBin);
                cluster_done = true;
            }
        } else {
            out.push(*f);
        }
    }
    out
}

fn record_key(
    record: &MetadataRecord,
    config: &LabelConfig,
    kmeans: Option<&KMeansModel>,
) -> Result<LabelKey, LabelError> {
    let mut key = Vec::new();
    let grid_bins = match &config.grouping_mode {
        GroupingMode::Grid(spec) => Some((
            quantize_te_tr(record.te_ms, record.tr_ms, spec)?,
            bin_ti(record.ti_ms, spec)?,
        )),
        GroupingMode::KMeans { .. } => None,
    };
    for field in key_layout(config) {
        let part = match field {
            LabelField::Manufacturer => KeyPart::Text(record.manufacturer.clone()),
            LabelField::ScannerModel => KeyPart::Text(record.scanner_model.clone()),
            LabelField::Plane => KeyPart::Text(
                record
                    .plane()
                    .map(|p| p.as_str().to_string())
                    .unwrap_or_else(|| crate::ingest::record::UNKNOWN.to_string()),
            ),
            LabelField::FieldStrength => KeyPart::Text(rounded(record.field_strength_tesla)),
            LabelField::SequenceType => KeyPart::Text(record.sequence_type.clone()),
            LabelField::SequenceVariant => KeyPart::Text(record.sequence_variant.clone()),
            LabelField::FlipAngle => KeyPart::Text(rounded(record.flip_angle_deg)),
            numeric => match (grid_bins, kmeans) {
                (Some(((te, tr), ti)), _) => KeyPart::Bin(match numeric {
                    LabelField::TeBin => te,
                    LabelField::TrBin => tr,
                    _ => ti,
                }),
                (None, Some(model)) => KeyPart::Bin(model.assign(record) as u32),
                (None, None) => return Err(LabelError::MissingKMeansModel),
            },
        };
        key.push(part);
    }
    Ok(key)
}

fn canonical_prompt_config() -> PromptConfig {
    PromptConfig::default()
}

impl LabelSpace {
    /// Groups `records` into labels. Ids are dense and follow sorted key order.
    pub fn build(
        records: &[MetadataRecord],
        config: &LabelConfig,
    ) -> Result<(LabelSpace, Vec<usize>), LabelError> {
        config.validate()?;
        if records.is_empty() {
            return Err(LabelError::EmptyDataset);
        }
        let kmeans = match &config.grouping_mode {
            GroupingMode::KMeans { n_clusters, seed } => {
                Some(fit_kmeans(records, *n_clusters, *seed)?)
            }
            GroupingMode::Grid(_) => None,
        };
        let keys = records
            .iter()
            .map(|r| record_key(r, config, kmeans.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_keys(config.clone(), kmeans, records, keys))
    }

    fn from_keys(
        config: LabelConfig,
        kmeans: Option<KMeansModel>,
        records: &[MetadataRecord],
        keys: Vec<LabelKey>,
    ) -> (LabelSpace, Vec<usize>) {
        let prompt_cfg = canonical_prompt_config();
        // key -> prompt text -> (count, first record index)
        let mut groups: BTreeMap<&LabelKey, BTreeMap<String, (usize, usize)>> = BTreeMap::new();
        for (i, (r, k)) in records.iter().zip(&keys).enumerate() {
            let text = render_prompt(r, &prompt_cfg).text;
            groups
                .entry(k)
                .or_default()
                .entry(text)
                .and_modify(|e| e.0 += 1)
                .or_insert((1, i));
        }
        let labels: Vec<ContrastLabel> = groups
            .into_iter()
            .enumerate()
            .map(|(label_id, (key, texts))| {
                // most common text; BTreeMap order breaks ties lexicographically
                let (text, (_, idx)) = texts
                    .into_iter()
                    .fold(
                        None::<(String, (usize, usize))>,
                        |best, (t, e)| match best {
                            Some(b) if b.1 .0 >= e.0 => Some(b),
                            _ => Some((t, e)),
                        },
                    )
                    .expect("groups are non-empty");
                let mut representative = records[idx].clone();
                representative.source_id.clear();
                ContrastLabel {
                    label_id,
                    key: key.clone(),
                    canonical_text: text,
                    representative,
                }
            })
            .collect();
        let space = LabelSpace {
            template_version: TEMPLATE_VERSION,
            config,
            kmeans,
            labels,
        };
        let assignment = keys
            .iter()
            .map(|k| space.id_of_key(k).expect("every key has a label"))
            .collect();
        (space, assignment)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn key_of(&self, record: &MetadataRecord) -> Result<LabelKey, LabelError> {
        record_key(record, &self.config, self.kmeans.as_ref())
    }

    pub fn id_of_key(&self, key: &LabelKey) -> Option<usize> {
        self.labels
            .binary_search_by(|l| l.key.as_slice().cmp(key.as_slice()))
            .ok()
    }

    /// Label of a record, or `None` when its key was not seen at build time.
    pub fn label_of(&self, record: &MetadataRecord) -> Result<Option<usize>, LabelError> {
        Ok(self.id_of_key(&self.key_of(record)?))
    }

    pub fn get(&self, label_id: usize) -> Result<&ContrastLabel, LabelError> {
        self.labels
            .get(label_id)
            .ok_or(LabelError::LabelDecodeFailure(label_id))
    }

    pub fn layout(&self) -> Vec<LabelField> {
        key_layout(&self.config)
    }

    pub fn grid(&self) -> Option<&GridSpec> {
        match &self.config.grouping_mode {
            GroupingMode::Grid(g) => Some(g),
            GroupingMode::KMeans { .. } => None,
        }
    }

    /// Relabels `records` under a different grid by coarsening their TE/TR
    /// bins; all other key components are carried over unchanged.
    pub fn coarsened(
        &self,
        coarse: &GridSpec,
        records: &[MetadataRecord],
    ) -> Result<(LabelSpace, Vec<usize>), LabelError> {
        let fine = self.grid().ok_or(LabelError::IncompatibleRanges)?;
        if fine.ti_bin_edges_ms != coarse.ti_bin_edges_ms {
            return Err(LabelError::IncompatibleRanges);
        }
        if records.is_empty() {
            return Err(LabelError::EmptyDataset);
        }
        let layout = self.layout();
        let te_at = layout.iter().position(|f| *f == LabelField::TeBin);
        let tr_at = layout.iter().position(|f| *f == LabelField::TrBin);
        let keys = records
            .iter()
            .map(|r| {
                let mut key = self.key_of(r)?;
                let bin_at = |k: &LabelKey, at: Option<usize>| match at.map(|i| &k[i]) {
                    Some(KeyPart::Bin(b)) => *b,
                    _ => 0,
                };
                let (te, tr) =
                    coarsen_assignment(fine, coarse, (bin_at(&key, te_at), bin_at(&key, tr_at)))?;
                if let Some(i) = te_at {
                    key[i] = KeyPart::Bin(te);
                }
                if let Some(i) = tr_at {
                    key[i] = KeyPart::Bin(tr);
                }
                Ok(key)
            })
            .collect::<Result<Vec<_>, LabelError>>()?;
        let config = LabelConfig {
            fields_in_label: self.config.fields_in_label.clone(),
            grouping_mode: GroupingMode::Grid(coarse.clone()),
        };
        Ok(Self::from_keys(config, None, records, keys))
    }

    /// SHA-256 of the serialized label space, hex encoded.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("label space serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("label space serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, LabelError> {
        serde_json::from_str(s).map_err(|e| LabelError::MalformedFile(e.to_string()))
    }
}
