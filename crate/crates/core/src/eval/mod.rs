//! Representation-quality evaluations.
//!
//! Energies and retrieval use the unit-normalized head outputs; the linear
//! and decoder probes use the pooled backbone features.

pub mod energy;
pub mod gradnorm;
pub mod landscape;
pub mod nrmse;
pub mod probe;
pub mod retrieval;

pub use energy::{hyperspherical_energy, EnergyReport, ENERGY_CONVENTION};
pub use gradnorm::{input_grad_norm_probe, input_grad_norms};
pub use landscape::{filter_normalized_direction, filter_norms, loss_landscape, LandscapeGrid, LandscapeSummary};
pub use nrmse::{nrmse, nrmse_probe, DecoderConfig, NrmseReport};
pub use probe::{linear_probe, LinearClassifier, ProbeConfig, ProbeReport};
pub use retrieval::{knn_retrieve, retrieve_all, MemoryBank, Neighbor, RetrievalResult};
