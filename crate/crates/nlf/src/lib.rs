//! File formats and tools around [`nlf_core`]: scene manifests, PNG and
//! float-map images, checkpoints, training runs and evaluation.

pub mod checkpoint;
pub mod color;
pub mod error;
pub mod imageio;
pub mod manifest;
pub mod run;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use manifest::{load_scene, save_scene, SceneManifest};
