//! Contrast-aware label construction: categorical grouping, TE×TR grid
//! quantization, TI binning, k-means grouping and grid coarsening.

pub mod grid;
pub mod kmeans;
pub mod space;

use thiserror::Error;

pub use grid::{bin_ti, coarsen_assignment, quantize_te_tr, GridSpec};
pub use kmeans::{fit_kmeans, KMeansModel};
pub use space::{
    ContrastLabel, GroupingMode, KeyPart, LabelConfig, LabelField, LabelKey, LabelSpace,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("non-finite TE/TR/TI value")]
    NonFiniteInput,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label must use at least one field")]
    EmptyFieldSet,
    #[error("k-means needs {needed} distinct points, found {found}")]
    TooFewDistinctPoints { needed: usize, found: usize },
    #[error("grids do not share TE/TR ranges or TI edges")]
    IncompatibleRanges,
    #[error("bin index outside the grid")]
    BinOutOfRange,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("k-means grouping requested without a fitted model")]
    MissingKMeansModel,
    #[error("label id {0} is not in the label space")]
    LabelDecodeFailure(usize),
    #[error("malformed label-space file: {0}")]
    MalformedFile(String),
}
