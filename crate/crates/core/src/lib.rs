pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod episodes;
pub mod error;
pub mod geometry;
pub mod inference_eval;
pub mod losses;
pub mod network;
pub mod nn;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use config::FalconConfig;
pub use data_io::{Manifest, PatientVolume, SealedMasks, SourceDataset, Split};
pub use episodes::{InferenceTask, SourceEpisode, TargetTask};
pub use geometry::{BinaryMask, DistanceMap, HdSymmetry, ProbMap};
pub use inference_eval::{EvalConfig, MetricsReport, SegmentationResult};
pub use losses::{LossConfig, LossValue, Objective};
pub use network::{NetworkConfig, SegmentationNet};
pub use nn::Tensor;
pub use training::{TrainConfig, TrainState};
