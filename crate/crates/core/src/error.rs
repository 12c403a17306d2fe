// SPDX-License-Identifier: Apache-2.0

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Precondition,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("CRS mismatch: source '{source_crs}' vs target '{target_crs}'")]
    CrsMismatch {
        source_crs: String,
        target_crs: String,
    },

    #[error("bilinear resampling requested for categorical data")]
    CategoricalBilinear,

    #[error("conflicting duplicate slice for {band} at {day}")]
    ConflictingSlice { day: String, band: String },

    #[error("tile format error: {0}")]
    Format(String),

    #[error("storage error: {0}")]
    Storage(String),

    #[error("duplicate product id '{0}'")]
    DuplicateProduct(String),

    #[error("unknown product '{0}'")]
    UnknownProduct(String),

    #[error("illegal flag transition for '{product}' step {step}: {from} -> {to}")]
    IllegalTransition {
        product: String,
        step: String,
        from: String,
        to: String,
    },

    #[error("invalid geometry ({context}): {reason}")]
    InvalidGeometry { context: String, reason: String },

    #[error("duplicate parcel id {0}")]
    DuplicateParcel(i32),

    #[error("insufficient valid points: need {need}, have {have}")]
    InsufficientPoints { need: usize, have: usize },

    #[error("empty series")]
    EmptySeries,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("unknown attribute '{0}'")]
    UnknownAttribute(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::UnknownAttribute(_) | Error::CategoricalBilinear => {
                ErrorKind::Usage
            }
            Error::Precondition(_)
            | Error::InsufficientPoints { .. }
            | Error::EmptySeries
            | Error::IllegalTransition { .. }
            | Error::UnknownProduct(_) => ErrorKind::Precondition,
            _ => ErrorKind::Data,
        }
    }
}
