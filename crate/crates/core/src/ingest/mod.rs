//! Acquisition metadata ingest from DICOM files and JSON-lines manifests,
//! plus the volume-level preprocessing rules (plane inference and slice
//! selection).

pub mod dicom;
pub mod manifest;
pub mod preprocess;
pub mod record;

use thiserror::Error;

pub use dicom::{parse_dicom_tags, write_fixture, DicomWriter, Tag};
pub use manifest::parse_manifest_line;
pub use preprocess::{infer_plane, select_slice_indices, Plane};
pub use record::MetadataRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IngestError {
    #[error("not a DICOM part-10 stream (no DICM marker)")]
    MissingMagic,
    #[error("element at offset {offset} runs past the end of the data")]
    TruncatedElement { offset: usize },
    #[error("malformed sequence at offset {offset}")]
    MalformedSequence { offset: usize },
    #[error("unsupported transfer syntax: {0}")]
    UnsupportedTransferSyntax(String),
    #[error("required tag {0} is missing")]
    MissingRequiredTag(&'static str),
    #[error("malformed numeric value for {field}: {value:?}")]
    MalformedNumeric { field: &'static str, value: String },
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("value out of range for {field}")]
    InvalidValue { field: &'static str },
    #[error("voxel spacing must be positive")]
    NonPositiveSpacing,
}

impl IngestError {
    /// Stable short name, used for rejection counts in ingest summaries.
    pub fn kind(&self) -> &'static str {
        match self {
            IngestError::MissingMagic => "MissingMagic",
            IngestError::TruncatedElement { .. } => "TruncatedElement",
            IngestError::MalformedSequence { .. } => "MalformedSequence",
            IngestError::UnsupportedTransferSyntax(_) => "UnsupportedTransferSyntax",
            IngestError::MissingRequiredTag(_) => "MissingRequiredTag",
            IngestError::MalformedNumeric { .. } => "MalformedNumeric",
            IngestError::MalformedJson(_) => "MalformedJson",
            IngestError::InvalidValue { .. } => "InvalidValue",
            IngestError::NonPositiveSpacing => "NonPositiveSpacing",
        }
    }
}

impl MetadataRecord {
    /// Plane inferred from voxel spacing, when spacing is known.
    pub fn plane(&self) -> Option<Plane> {
        self.voxel_spacing_mm.and_then(|s| infer_plane(s).ok())
    }
}
