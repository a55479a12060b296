use serde::{Deserialize, Serialize};

use super::IngestError;

/// Acquisition metadata for one series, in canonical form.
///
/// String fields are trimmed and uppercased. `ti_ms` is `None` when the
/// acquisition has no inversion pulse; it is never encoded as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub manufacturer: String,
    pub scanner_model: String,
    pub field_strength_tesla: f64,
    pub sequence_type: String,
    pub sequence_variant: String,
    #[serde(default)]
    pub series_description: Option<String>,
    pub flip_angle_deg: f64,
    pub te_ms: f64,
    pub tr_ms: f64,
    #[serde(default)]
    pub ti_ms: Option<f64>,
    #[serde(default)]
    pub voxel_spacing_mm: Option<[f64; 3]>,
    #[serde(default)]
    pub num_slices: Option<u32>,
    #[serde(default)]
    pub source_id: String,
}

/// Placeholder for categorical tags that are absent from the source.
pub const UNKNOWN: &str = "UNKNOWN";

pub(crate) fn canonical_str(s: &str) -> String {
    let t = s.trim();
    if t.is_empty() {
        UNKNOWN.to_string()
    } else {
        t.to_uppercase()
    }
}

impl MetadataRecord {
    /// Trims and uppercases every categorical string. Idempotent.
    pub fn canonicalize(mut self) -> Self {
        self.manufacturer = canonical_str(&self.manufacturer);
        self.scanner_model = canonical_str(&self.scanner_model);
        self.sequence_type = canonical_str(&self.sequence_type);
        self.sequence_variant = canonical_str(&self.sequence_variant);
        self.series_description = self
            .series_description
            .as_deref()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_uppercase);
        self.source_id = self.source_id.trim().to_string();
        self
    }

    /// Range checks applied to every record accepted at ingest.
    pub fn validate(&self) -> Result<(), IngestError> {
        let invalid = |field: &'static str| Err(IngestError::InvalidValue { field });
        if !(self.te_ms.is_finite() && self.te_ms >= 0.0) {
            return invalid("te_ms");
        }
        if !(self.tr_ms.is_finite() && self.tr_ms >= 0.0) {
            return invalid("tr_ms");
        }
        if let Some(ti) = self.ti_ms {
            if !(ti.is_finite() && ti >= 0.0) {
                return invalid("ti_ms");
            }
        }
        if !(self.field_strength_tesla.is_finite() && self.field_strength_tesla >= 0.0) {
            return invalid("field_strength_tesla");
        }
        if !(self.flip_angle_deg.is_finite() && (0.0..360.0).contains(&self.flip_angle_deg)) {
            return invalid("flip_angle_deg");
        }
        if let Some(sp) = self.voxel_spacing_mm {
            if sp.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return invalid("voxel_spacing_mm");
            }
        }
        if self.num_slices == Some(0) {
            return invalid("num_slices");
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) fn sample_record() -> MetadataRecord {
    MetadataRecord {
        manufacturer: "SIEMENS".into(),
        scanner_model: "PRISMA".into(),
        field_strength_tesla: 3.0,
        sequence_type: "SE".into(),
        sequence_variant: "SK".into(),
        series_description: Some("T1 AX".into()),
        flip_angle_deg: 90.0,
        te_ms: 25.0,
        tr_ms: 1145.0,
        ti_ms: None,
        voxel_spacing_mm: Some([1.0, 1.0, 5.0]),
        num_slices: None,
        source_id: "a".into(),
    }
}
