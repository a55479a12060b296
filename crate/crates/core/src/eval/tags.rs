//! Per-field mismatch rates between predicted and true labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::labels::{KeyPart, LabelField, LabelSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagErrors {
    /// Field name → fraction of predictions that get the field wrong.
    pub per_tag_error: BTreeMap<String, f64>,
    /// Mean absolute TE/TR bin distance; absent for k-means label spaces.
    pub te_bin_mae: Option<f64>,
    pub tr_bin_mae: Option<f64>,
    pub te_mae_ms: Option<f64>,
    pub tr_mae_ms: Option<f64>,
}

fn bin(part: &KeyPart) -> u32 {
    match part {
        KeyPart::Bin(b) => *b,
        KeyPart::Text(_) => 0,
    }
}

pub fn per_tag_error(
    predicted: &[usize],
    truth: &[usize],
    space: &LabelSpace,
) -> Result<TagErrors, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    let layout = space.layout();
    let grid = space.grid();
    let mut mismatches = vec![0usize; layout.len()];
    let (mut te_abs, mut tr_abs) = (0u64, 0u64);
    for (&p, &t) in predicted.iter().zip(truth) {
        let pk = &space.get(p)?.key;
        let tk = &space.get(t)?.key;
        for (i, field) in layout.iter().enumerate() {
            if pk[i] != tk[i] {
                mismatches[i] += 1;
            }
            if grid.is_some() {
                let dist = u64::from(bin(&pk[i]).abs_diff(bin(&tk[i])));
                match field {
                    LabelField::TeBin => te_abs += dist,
                    LabelField::TrBin => tr_abs += dist,
                    _ => {}
                }
            }
        }
    }
    let n = predicted.len() as f64;
    let name = |f: LabelField| {
        if grid.is_none() && f == LabelField::TeBin {
            "cluster"
        } else {
            f.name()
        }
    };
    let per_tag_error = layout
        .iter()
        .zip(&mismatches)
        .map(|(f, &m)| (name(*f).to_string(), m as f64 / n))
        .collect();
    let has = |f: LabelField| grid.is_some() && layout.contains(&f);
    let te_bin_mae = has(LabelField::TeBin).then(|| te_abs as f64 / n);
    let tr_bin_mae = has(LabelField::TrBin).then(|| tr_abs as f64 / n);
    Ok(TagErrors {
        per_tag_error,
        te_bin_mae,
        tr_bin_mae,
        te_mae_ms: te_bin_mae.zip(grid).map(|(m, g)| m * g.te_width()),
        tr_mae_ms: tr_bin_mae.zip(grid).map(|(m, g)| m * g.tr_width()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::MetadataRecord;
    use crate::labels::{GridSpec, LabelConfig};

    fn rec(te: f64, tr: f64, fs: f64) -> MetadataRecord {
        MetadataRecord {
            manufacturer: "GE".into(),
            scanner_model: "X".into(),
            field_strength_tesla: fs,
            sequence_type: "SE".into(),
            sequence_variant: "SK".into(),
            series_description: None,
            flip_angle_deg: 90.0,
            te_ms: te,
            tr_ms: tr,
            ti_ms: None,
            voxel_spacing_mm: Some([1.0, 1.0, 3.0]),
            num_slices: None,
            source_id: String::new(),
        }
    }

    fn space() -> (LabelSpace, Vec<MetadataRecord>) {
        let records: Vec<MetadataRecord> = (0..6)
            .flat_map(|i| {
                [
                    rec(5.0 + 10.0 * f64::from(i), 800.0, 1.5),
                    rec(5.0 + 10.0 * f64::from(i), 800.0, 3.0),
                ]
            })
            .collect();
        let (s, _) = LabelSpace::build(&records, &LabelConfig::grid(GridSpec::default())).unwrap();
        (s, records)
    }

    #[test]
    fn perfect_predictions_have_no_error() {
        let (s, records) = space();
        let truth: Vec<usize> = records
            .iter()
            .map(|r| s.label_of(r).unwrap().unwrap())
            .collect();
        let e = per_tag_error(&truth, &truth, &s).unwrap();
        assert!(e.per_tag_error.values().all(|&v| v == 0.0));
        assert_eq!(e.te_bin_mae, Some(0.0));
        assert_eq!(e.per_tag_error.len(), 10);
    }

    #[test]
    fn off_by_one_te_bin() {
        let (s, _) = space();
        let label = |te: f64, fs: f64| s.label_of(&rec(te, 800.0, fs)).unwrap().unwrap();
        let truth: Vec<usize> = (0..5)
            .map(|i| label(5.0 + 10.0 * f64::from(i), 3.0))
            .collect();
        let pred: Vec<usize> = (0..5)
            .map(|i| label(15.0 + 10.0 * f64::from(i), 3.0))
            .collect();
        let e = per_tag_error(&pred, &truth, &s).unwrap();
        assert_eq!(e.per_tag_error["te_bin"], 1.0);
        assert_eq!(e.per_tag_error["field_strength"], 0.0);
        assert_eq!(e.per_tag_error["tr_bin"], 0.0);
        assert_eq!(e.te_bin_mae, Some(1.0));
        assert_eq!(e.te_mae_ms, Some(10.0));
        assert_eq!(e.tr_mae_ms, Some(0.0));
    }

    #[test]
    fn ms_error_is_bin_error_times_width() {
        let (s, records) = space();
        let ids: Vec<usize> = records
            .iter()
            .map(|r| s.label_of(r).unwrap().unwrap())
            .collect();
        let pred: Vec<usize> = ids.iter().rev().copied().collect();
        let e = per_tag_error(&pred, &ids, &s).unwrap();
        assert!(e.per_tag_error.values().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(e.te_mae_ms.unwrap(), e.te_bin_mae.unwrap() * 10.0);
        assert_eq!(e.tr_mae_ms.unwrap(), e.tr_bin_mae.unwrap() * 500.0);
    }

    #[test]
    fn unknown_label_fails_to_decode() {
        let (s, _) = space();
        assert!(matches!(
            per_tag_error(&[999], &[0], &s),
            Err(EvalError::Label(
                crate::labels::LabelError::LabelDecodeFailure(999)
            ))
        ));
    }
}
