//! End-to-end steps shared by the command-line tool and the tests: model
//! construction with on-disk caching, simulation, reconstruction and
//! evaluation.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beamformer::{apodization_weights, build_beamformer, BeamformerMatrix};
use crate::config::{canonical_hash, Config, RegionsSection, Setup};
use crate::denoise::Denoiser;
use crate::error::{check_len, Error, Result};
use crate::io::{self, Container, Kind};
use crate::metrics::{
    cnr, envelope, fwhm, gcnr, ks_rayleigh_pvalue, log_compress, speckle_snr, Axis, ContrastRow, MaskRole,
    MetricsReport, ResolutionRow, SpeckleRow, KS_PASS_MARK,
};
use crate::multisample::{aggregate, Aggregate, SampleBundle};
use crate::probe::{AcquisitionConfig, ImagingGrid};
use crate::sampler::{prepare, run_prepared, Mode};
use crate::simulator::{sample_scatterers, synthesize_channel_data, ChannelData, Phantom, ScattererField};
use crate::spectral::{compose_bh, factorize, SpectralFactorization};
use crate::system::{build_system_matrix, SystemMatrix};

pub struct Model {
    pub setup: Setup,
    pub h: SystemMatrix,
    pub b: BeamformerMatrix,
    pub h_key: String,
    pub b_key: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStatus {
    pub system_hit: bool,
    pub beamformer_hit: bool,
    pub factorization_hit: bool,
}

/// Cache keys for `H` and `B`.
pub fn model_keys(cfg: &Config, setup: &Setup) -> (String, String) {
    let h_key = canonical_hash(&(&setup.probe, &setup.acquisition, &setup.pulse, &setup.grid));
    let b_key = canonical_hash(&(&h_key, &cfg.apodization));
    (h_key, b_key)
}

fn cache_path(dir: &Path, prefix: &str, key: &str, ext: &str) -> PathBuf {
    dir.join(format!("{prefix}-{}.{ext}", &key[..16]))
}

/// Builds (or loads) `H` and `B` for `setup`.
pub fn build_model(cfg: &Config, setup: Setup, cache_dir: Option<&Path>) -> Result<(Model, CacheStatus)> {
    let (h_key, b_key) = model_keys(cfg, &setup);
    let mut status = CacheStatus::default();
    let budget = cfg.model.memory_budget_mb;
    let load_h = |p: &Path| -> Option<SystemMatrix> {
        io::read_system_matrix(p).ok().filter(|(_, k)| *k == h_key).map(|(h, _)| h)
    };
    let h_path = cache_dir.map(|d| cache_path(d, "h", &h_key, "usds"));
    let h = match h_path.as_deref().and_then(load_h) {
        Some(h) => {
            status.system_hit = true;
            h
        }
        None => {
            let h = build_system_matrix(&setup.probe, &setup.acquisition, &setup.grid, &setup.pulse, budget)?;
            if let Some(p) = &h_path {
                io::write_system_matrix(p, &h, &h_key)?;
            }
            h
        }
    };
    let b_path = cache_dir.map(|d| cache_path(d, "b", &b_key, "usds"));
    let cached_b = b_path
        .as_deref()
        .and_then(|p| io::read_beamformer(p).ok())
        .filter(|(_, k)| *k == b_key)
        .map(|(b, _)| b);
    let b = match cached_b {
        Some(b) => {
            status.beamformer_hit = true;
            b
        }
        None => {
            let w = apodization_weights(&setup.probe, &setup.grid, &cfg.apodization)?;
            let mut b = build_beamformer(&h, &w)?;
            b.provenance = b_key.clone();
            if let Some(p) = &b_path {
                io::write_beamformer(p, &b, &b_key)?;
            }
            b
        }
    };
    Ok((
        Model {
            setup,
            h,
            b,
            h_key,
            b_key,
        },
        status,
    ))
}

pub fn factorization_key(cfg: &Config, model: &Model) -> String {
    canonical_hash(&(&model.b_key, &cfg.model.factorization, cfg.model.residual_tol))
}

/// Spectral factorization of `BH` (identity in deno mode), cached by the
/// inputs that determine `BH`.
pub fn factorization(
    cfg: &Config,
    model: &Model,
    mode: Mode,
    cache_dir: Option<&Path>,
) -> Result<(SpectralFactorization, bool)> {
    if mode == Mode::Deno {
        let mut f = SpectralFactorization::identity(model.setup.grid.len());
        f.rank_tol = cfg.model.rank_tol;
        return Ok((f, false));
    }
    let key = factorization_key(cfg, model);
    let path = cache_dir.map(|d| cache_path(d, "svd", &key, "usdr"));
    if let Some(p) = &path {
        if let Ok(c) = Container::read(p) {
            if c.attr::<String>("key").ok().as_deref() == Some(key.as_str()) {
                let mut f = io::factorization_from_container(&c)?;
                f.rank_tol = cfg.model.rank_tol;
                return Ok((f, true));
            }
        }
    }
    let bh = compose_bh(&model.b, &model.h, cfg.model.memory_budget_mb)?;
    let mut f = factorize(&bh, &cfg.model.factorization, cfg.model.residual_tol)?;
    f.rank_tol = cfg.model.rank_tol;
    if let Some(p) = &path {
        io::factorization_container(&f, &key)?.write(p)?;
    }
    Ok((f, false))
}

pub struct Simulation {
    pub phantom: Phantom,
    pub field: ScattererField,
    pub channel: ChannelData,
    /// Ground-truth echogenicity on the imaging grid.
    pub echogenicity: Vec<f64>,
}

/// Scatterers come from stream 0 of `seed`; channel noise from `seed + 1`.
pub fn simulate(cfg: &Config, setup: &Setup, phantom: Phantom, seed: u64) -> Result<Simulation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = sample_scatterers(&phantom, cfg.simulation.density_per_mm2, &mut rng)?;
    let channel = synthesize_channel_data(
        &field,
        &setup.probe,
        &setup.acquisition,
        &setup.pulse,
        cfg.simulation.noise,
        seed.wrapping_add(1),
    )?;
    let echogenicity = phantom.echogenicity_map(&setup.grid);
    Ok(Simulation {
        phantom,
        field,
        channel,
        echogenicity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconMode {
    Das,
    Drus,
    Deno,
}

impl ReconMode {
    pub fn sampler_mode(self) -> Option<Mode> {
        match self {
            ReconMode::Das => None,
            ReconMode::Drus => Some(Mode::Drus),
            ReconMode::Deno => Some(Mode::Deno),
        }
    }
}

pub struct Reconstruction {
    pub das: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub aggregate: Option<Aggregate>,
    pub sigma_d: Option<f64>,
}

/// DAS image plus, for the diffusion modes, `cfg.sampler.samples` chains.
pub fn reconstruct(
    cfg: &Config,
    model: &Model,
    fact: Option<&SpectralFactorization>,
    y: &[f64],
    mode: ReconMode,
    denoiser: Option<&dyn Denoiser>,
) -> Result<Reconstruction> {
    let das = model.b.apply(y)?;
    let Some(smode) = mode.sampler_mode() else {
        return Ok(Reconstruction {
            das,
            samples: vec![],
            aggregate: None,
            sigma_d: None,
        });
    };
    let fact = fact.ok_or_else(|| Error::config("diffusion modes need a factorization"))?;
    let denoiser = denoiser.ok_or_else(|| Error::config("diffusion modes need a denoiser"))?;
    let mut scfg = cfg.sampler.clone();
    scfg.mode = smode;
    let prep = prepare(&scfg, fact, &das)?;
    use rayon::prelude::*;
    let samples: Vec<Vec<f64>> = (0..scfg.samples as u64)
        .into_par_iter()
        .map(|c| run_prepared(&prep, fact, denoiser, c, None))
        .collect::<Result<_>>()?;
    let aggregate = if samples.len() >= 2 {
        Some(aggregate(&SampleBundle::new(samples.clone(), scfg.seed, "")?)?)
    } else {
        None
    };
    Ok(Reconstruction {
        das,
        samples,
        aggregate,
        sigma_d: Some(prep.sigma_d),
    })
}

/// Image container with shape `[n_x, n_z]` (depth fastest).
pub fn image_container(grid: &ImagingGrid, values: Vec<f64>) -> Result<Container> {
    check_len("image container", grid.len(), values.len())?;
    Ok(Container::new(Kind::Image, vec![grid.n_x, grid.n_z], values)?.with_attr("grid", grid))
}

pub fn grid_of(c: &Container) -> Result<ImagingGrid> {
    let g: ImagingGrid = c.attr("grid")?;
    g.validate()?;
    Ok(g)
}

/// Channel container with shape `[L, K]` (time fastest).
pub fn channel_container(setup: &Setup, channel: &ChannelData) -> Result<Container> {
    Ok(
        Container::new(Kind::Channel, vec![channel.element_count, channel.sample_count], channel.data.clone())?
            .with_attr("acquisition", &setup.acquisition)
            .with_attr("probe", &setup.probe)
            .with_attr("pulse", &setup.pulse.bandwidth_ratio)
            .with_attr("center_frequency", setup.pulse.center_frequency)
            .with_attr("noise_std", channel.noise_std),
    )
}

/// Acquisition recorded in a channel container, checked against `setup`.
pub fn acquisition_of(c: &Container, setup: &Setup) -> Result<AcquisitionConfig> {
    let acq: AcquisitionConfig = c.attr("acquisition")?;
    match c.shape[..] {
        [l, k] if l == setup.probe.element_count && k == acq.sample_count => {}
        _ => {
            return Err(Error::ShapeMismatch {
                expected: vec![setup.probe.element_count, acq.sample_count],
                got: c.shape.clone(),
            })
        }
    }
    acq.validate(setup.pulse.center_frequency)?;
    Ok(acq)
}

/// Which signal a metric image represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSignal {
    /// Signed RF-like image: envelope-detected first.
    Rf,
    /// Already non-negative (envelope, or the square root of a variance).
    Amplitude,
}

/// Envelope (or absolute value) for a given signal type.
pub fn amplitude(image: &[f64], grid: &ImagingGrid, signal: ImageSignal) -> Result<Vec<f64>> {
    match signal {
        ImageSignal::Rf => envelope(image, grid.n_z, grid.n_x),
        ImageSignal::Amplitude => Ok(image.iter().map(|v| v.abs()).collect()),
    }
}

pub fn evaluate(
    image: &[f64],
    grid: &ImagingGrid,
    regions: &RegionsSection,
    signal: ImageSignal,
    image_id: &str,
) -> Result<MetricsReport> {
    let env = amplitude(image, grid, signal)?;
    let db = log_compress(&env, regions.dynamic_range_db)?;
    let mut report = MetricsReport {
        image_id: image_id.into(),
        ..Default::default()
    };
    report.settings.insert("signal".into(), format!("{signal:?}").to_lowercase());
    report.settings.insert("dynamic_range_db".into(), regions.dynamic_range_db.to_string());
    report.settings.insert("gcnr_bins".into(), regions.gcnr_bins.to_string());
    report.settings.insert("ks_pass_mark".into(), KS_PASS_MARK.to_string());
    for p in &regions.points {
        let w = |axis| fwhm(&db, grid, (p.x, p.z), axis, regions.fwhm_search_radius).ok();
        report.resolution.push(ResolutionRow {
            label: p.label.clone(),
            x_mm: p.x * 1e3,
            z_mm: p.z * 1e3,
            axial_mm: w(Axis::Axial),
            lateral_mm: w(Axis::Lateral),
        });
    }
    let masks = regions.masks(grid)?;
    for c in &regions.contrast {
        let find = |role| {
            masks
                .iter()
                .find(|m| m.label == c.label && m.role == role)
                .ok_or_else(|| Error::MissingRegion(c.label.clone()))
        };
        let (inn, out) = (find(MaskRole::TargetIn)?, find(MaskRole::ReferenceOut)?);
        report.contrast.push(ContrastRow {
            label: c.label.clone(),
            cnr_db: cnr(&env, &inn.mask, &out.mask)?,
            gcnr: gcnr(&env, &inn.mask, &out.mask, regions.gcnr_bins)?,
        });
    }
    for m in masks.iter().filter(|m| m.role == MaskRole::Roi) {
        let ks_p = ks_rayleigh_pvalue(&env, &m.mask)?;
        report.speckle.push(SpeckleRow {
            label: m.label.clone(),
            snr: speckle_snr(&env, &m.mask)?,
            ks_p,
            rayleigh_pass: ks_p > KS_PASS_MARK,
        });
    }
    Ok(report)
}
