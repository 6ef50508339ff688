//! Plane-wave ultrasound reconstruction with a linear forward model and a
//! diffusion-style posterior sampler.
//!
//! Pipeline: a [`probe`] geometry and acquisition define the sparse forward
//! operator `H` ([`system`]) and the weighted matched filter `B`
//! ([`beamformer`]). The composite `BH` is factored by [`spectral`], and the
//! [`sampler`] runs restoration chains in that spectral space around a
//! [`denoise`] prior. [`simulator`] produces test data, [`metrics`] and
//! [`multisample`] evaluate results, and [`io`], [`render`], [`config`] and
//! [`pipeline`] handle files and orchestration.

pub mod beamformer;
pub mod config;
pub mod denoise;
pub mod error;
pub mod io;
pub mod metrics;
pub mod multisample;
pub mod picmus;
pub mod pipeline;
pub mod probe;
pub mod render;
pub mod sampler;
pub mod simulator;
pub mod sparse;
pub mod spectral;
pub mod system;

pub use beamformer::{build_beamformer, das, ApodizationSpec, ApodizationWeights, BeamformerMatrix, Window};
pub use config::{Config, Setup};
pub use denoise::{Denoiser, DenoiserSpec};
pub use error::{Error, ErrorKind, Result};
pub use io::{Container, Kind, RunManifest};
pub use metrics::MetricsReport;
pub use multisample::{Aggregate, SampleBundle};
pub use probe::{AcquisitionConfig, ImagingGrid, ProbeGeometry, PulseKernel};
pub use sampler::{Mode, SamplerConfig};
pub use simulator::{ChannelData, Phantom};
pub use spectral::{FactorizationRequest, SpectralFactorization};
pub use system::{build_system_matrix, SystemMatrix};
