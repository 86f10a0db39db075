//! Binocular micro-cell encoder laboratory.
//!
//! The crate covers the whole pipeline from a rectified image pair to metric
//! reports:
//!
//! - [`tensor`]: dense arrays with a reverse-mode tape, sized for the encoder.
//! - [`fusion`]: pixel interleaving, the micro-cell token lattice and one-view masks.
//! - [`encoder`]: the transformer over fused tokens (row embedding, patch-phase rotary
//!   positions, de-positioned readout) and its checkpoint format.
//! - [`distill`]: masked EMA teacher/student training with centering and sharpening.
//! - [`synthbench`]: a deterministic dual-view benchmark with known disparity.
//! - [`stereo`]: the frozen descriptor probe (cosine cost volume, WTA, SGM, refinement,
//!   left-right check) and its metrics.
//! - [`mech`]: layerwise token-geometry metrics and counterfactual inputs.
//! - [`harness`]: experiment configuration, run manifests and the command implementations
//!   behind the `bino` binary.

pub mod distill;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod imageio;
pub mod mech;
pub mod stereo;
pub mod synthbench;
pub mod tensor;

pub use error::{BinoError, Result};
