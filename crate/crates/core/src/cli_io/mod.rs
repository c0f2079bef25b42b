//! On-disk formats and the `dpq` command line.

pub mod artifact;
pub mod commands;
pub mod container;

pub use artifact::{load_artifact, CalibrationManifest, LayerEntry, LoadedArtifact, QuantManifest};
pub use commands::{run, Cli};
pub use container::{DType, TensorContainer, TensorWriter};
