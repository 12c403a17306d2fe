// SPDX-License-Identifier: Apache-2.0

//! Agriculture monitoring data cube.
//!
//! An embedded engine that indexes satellite image time-series into a dense
//! `(time, band, y, x)` cube, rasterizes parcel polygons into a label raster
//! for grouped zonal statistics, and offers time-series preparation,
//! phenology/feature extraction and a small parcel query language backed by a
//! file-based knowledge base.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod catalog;
pub mod error;
pub mod features;
pub mod grid;
pub mod masking;
pub mod parcels;
pub mod query;
pub mod sits;
pub mod time;
pub mod workflow;
pub mod zonal;

pub use error::{Error, ErrorKind, Result};
pub use grid::{BBox, BandId, CubeArray, GridSpec, Raster};
pub use time::{Day, Period};
