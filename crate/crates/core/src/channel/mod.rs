//! Paired sub-6 GHz / mmWave CSI: synthetic generation from a shared
//! multipath geometry, measurement noise, delay-domain transforms and the
//! on-disk dataset format.

mod config;
mod dataset;
mod dft;
pub mod geometry;
mod matrix;
mod noise;
mod sample;

pub use config::{BandConfig, GeometryConfig, SystemConfig};
pub use dataset::{read_dataset, decode_dataset, encode_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use dft::{freq_to_time, time_to_freq};
pub use geometry::{steering_vector, PathComponent, PathSet};
pub use matrix::ComplexMatrix;
pub use noise::apply_awgn;
pub use sample::{derive_seed, generate_dataset, generate_sample, DualBandSample};
