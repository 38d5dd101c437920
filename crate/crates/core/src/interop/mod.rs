//! File formats: frame directories, the `STTA` tensor archive, the run
//! configuration and CSV reports.

pub mod archive;
pub mod config;
pub mod frames;
pub mod report;

pub use archive::{read_archive, write_archive, ArchiveEntry, TensorArchive};
pub use config::{NetworkConfig, RunConfig, TargetPaths};
pub use frames::{load_video, save_video, FrameFormat};
pub use report::{write_feature_csv, LossLogWriter};
