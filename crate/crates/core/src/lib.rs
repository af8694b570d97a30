//! Response-aware gradient ascent pulse engineering for a single spin-1/2.
//!
//! Control waveforms pass through differentiable cascades of instrument
//! distortions (recursive filters, FIR kernels, amplifier saturation) before
//! they drive the spin. Fidelity gradients are chained back through every
//! stage by vector-Jacobian products, and robustness is obtained by averaging
//! over ensembles of resonance offsets, control power scales and distortion
//! parameters.

pub mod distortions;
pub mod error;
pub mod grape;
pub mod optimizer;
pub mod presets;
pub mod spin;

pub use error::{Error, Result};
