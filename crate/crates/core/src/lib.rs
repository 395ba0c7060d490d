//! Taylor-monomial networks whose layers carry known physics as frozen
//! coefficients, plus the tooling around them: data generators, training,
//! safety-envelope command correction and a CLI.

pub mod cli;
pub mod datagen;
pub mod editing;
pub mod error;
pub mod io;
pub mod knowledge;
pub mod monomial;
pub mod network;
pub mod selfcorrect;
pub mod suppressor;
pub mod train;

pub use editing::{build_model, Activation, LayerSpec, PhnLayer, PhyTaylorModel};
pub use error::{Error, Result};
pub use knowledge::{EditedMasks, Entry, KnowledgeSpec};
pub use monomial::{ExponentVector, MonomialBasis};
pub use suppressor::{NoiseSign, SuppressorChannel, SuppressorConfig};
