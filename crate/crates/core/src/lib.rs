//! Short-reach IM/DD optical link simulation with reference PAM receivers.
//!
//! * [`link`]: link parameters, Gray mapping and the end-to-end channel.
//! * [`dsp`]: RRC filtering, chromatic dispersion, detection, noise, chunking.
//! * [`data`]: epoch-based dataset generation and `.imdd`/`.csv` files.
//! * [`neuro`]: the spiking LIF receiver and its surrogate-gradient training.
//! * [`baseline`]: least-squares linear equalizer with hard decisions.
//! * [`bench`]: BER estimation with an error-count stopping rule, and sweeps.

pub mod baseline;
pub mod bench;
pub mod data;
pub mod dsp;
pub mod error;
pub(crate) mod io;
pub mod link;
pub mod neuro;

pub use error::{Error, Result};
pub use link::{ImddLink, LinkBlock, LinkParams, NoiseReference, SymbolAlphabet};
