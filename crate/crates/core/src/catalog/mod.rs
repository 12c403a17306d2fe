// SPDX-License-Identifier: Apache-2.0

//! Product metadata, processing flags, tiled storage and the synthetic
//! scene generator.

pub mod cube;
pub mod store;
pub mod synth;
pub mod tiles;

pub use cube::TiledCube;
pub use store::{Catalog, Clock, FixedClock, FlagState, FlagStatus, ProductQuery, ProductRecord, Sensor, SystemClock, WriteFault};
pub use synth::{generate_synthetic_dataset, CropCurve, MismatchSpec, MowingSpec, ParcelTruth, SyntheticConfig, SyntheticDataset};
pub use tiles::{read_labels, read_mask, read_tiled, write_labels, write_mask, write_tiled, DType, TiledReader};
