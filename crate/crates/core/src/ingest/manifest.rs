use serde_json::{Map, Value};

use super::record::MetadataRecord;
use super::IngestError;

fn number(obj: &Map<String, Value>, key: &'static str) -> Result<Option<f64>, IngestError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n
            .as_f64()
            .filter(|v| v.is_finite())
            .map(Some)
            .ok_or_else(|| IngestError::MalformedNumeric {
                field: key,
                value: n.to_string(),
            }),
        // decimal strings are accepted the same way DICOM DS values are
        Some(Value::String(s)) => {
            super::dicom::parse_decimal_string(key, s).and_then(|v| match v[..] {
                [x] => Ok(Some(x)),
                _ => Err(IngestError::MalformedNumeric {
                    field: key,
                    value: s.clone(),
                }),
            })
        }
        Some(other) => Err(IngestError::MalformedNumeric {
            field: key,
            value: other.to_string(),
        }),
    }
}

fn string(obj: &Map<String, Value>, key: &'static str) -> Result<Option<String>, IngestError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(IngestError::MalformedJson(format!(
            "{key}: expected a string, got {other}"
        ))),
    }
}

fn spacing(obj: &Map<String, Value>) -> Result<Option<[f64; 3]>, IngestError> {
    const KEY: &str = "voxel_spacing_mm";
    let malformed = |v: &Value| IngestError::MalformedNumeric {
        field: KEY,
        value: v.to_string(),
    };
    match obj.get(KEY) {
        None | Some(Value::Null) => Ok(None),
        Some(v @ Value::Array(items)) if items.len() == 3 => {
            let mut out = [0.0; 3];
            for (slot, item) in out.iter_mut().zip(items) {
                *slot = item
                    .as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| malformed(v))?;
            }
            Ok(Some(out))
        }
        Some(v) => Err(malformed(v)),
    }
}

/// Parses one JSON-lines manifest entry. Unknown keys are ignored, explicit
/// `null` is treated as absent, and the record is canonicalized.
pub fn parse_manifest_line(line: &str) -> Result<MetadataRecord, IngestError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| IngestError::MalformedJson(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(IngestError::MalformedJson("expected a JSON object".into()));
    };
    let te_ms = number(&obj, "te_ms")?.ok_or(IngestError::MissingRequiredTag("TE"))?;
    let tr_ms = number(&obj, "tr_ms")?.ok_or(IngestError::MissingRequiredTag("TR"))?;
    let num_slices = match obj.get("num_slices") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .ok_or_else(|| IngestError::MalformedNumeric {
                    field: "num_slices",
                    value: v.to_string(),
                })?,
        ),
    };
    let record = MetadataRecord {
        manufacturer: string(&obj, "manufacturer")?.unwrap_or_default(),
        scanner_model: string(&obj, "scanner_model")?.unwrap_or_default(),
        field_strength_tesla: number(&obj, "field_strength_tesla")?.unwrap_or(0.0),
        sequence_type: string(&obj, "sequence_type")?.unwrap_or_default(),
        sequence_variant: string(&obj, "sequence_variant")?.unwrap_or_default(),
        series_description: string(&obj, "series_description")?,
        flip_angle_deg: number(&obj, "flip_angle_deg")?.unwrap_or(0.0),
        te_ms,
        tr_ms,
        ti_ms: number(&obj, "ti_ms")?,
        voxel_spacing_mm: spacing(&obj)?,
        num_slices,
        source_id: string(&obj, "source_id")?.unwrap_or_default(),
    }
    .canonicalize();
    record.validate()?;
    Ok(record)
}
