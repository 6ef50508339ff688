//! TOML run configuration. Every section has defaults, so an empty file is a
//! valid config describing the standard L11-4v plane-wave setup.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beamformer::ApodizationSpec;
use crate::denoise::DenoiserSpec;
use crate::error::{Error, Result};
use crate::metrics::{MaskRole, RegionMask};
use crate::probe::{AcquisitionConfig, ImagingGrid, ProbeGeometry, PulseKernel};
use crate::sampler::SamplerConfig;
use crate::simulator::{Extent, NoiseLevel, Phantom, Shape};
use crate::spectral::{FactorizationRequest, DEFAULT_RANK_TOL};
use crate::system::required_sample_count;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub element_count: usize,
    pub pitch: f64,
    pub element_width: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            element_count: 128,
            pitch: 0.3e-3,
            element_width: 0.27e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSection {
    pub sound_speed: f64,
    pub sampling_rate: f64,
    pub start_time: f64,
    /// 0 selects the smallest window covering the grid.
    pub sample_count: usize,
    pub steering_angle: f64,
    pub noise_std: f64,
}

impl Default for AcquisitionSection {
    fn default() -> Self {
        Self {
            sound_speed: 1540.0,
            sampling_rate: 20.8e6,
            start_time: 0.0,
            sample_count: 0,
            steering_angle: 0.0,
            noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseSection {
    pub center_frequency: f64,
    pub bandwidth_ratio: f64,
}

impl Default for PulseSection {
    fn default() -> Self {
        Self {
            center_frequency: 5.208e6,
            bandwidth_ratio: 0.67,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub x: [f64; 2],
    pub z: [f64; 2],
    pub n_x: usize,
    pub n_z: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            x: [-18e-3, 18e-3],
            z: [10e-3, 46e-3],
            n_x: 64,
            n_z: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub memory_budget_mb: f64,
    pub factorization: FactorizationRequest,
    /// Relative Frobenius residual the factorization must reach.
    pub residual_tol: f64,
    pub rank_tol: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            memory_budget_mb: 4096.0,
            factorization: FactorizationRequest::Exact,
            residual_tol: 1e-10,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhantomSource {
    Preset(String),
    Custom(Phantom),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub phantom: PhantomSource,
    /// Scatterer box; defaults to the imaging grid enlarged by `margin`.
    pub extent: Option<Extent>,
    pub margin: f64,
    pub density_per_mm2: f64,
    pub noise: NoiseLevel,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            phantom: PhantomSource::Preset("sc-like".into()),
            extent: None,
            margin: 1e-3,
            density_per_mm2: 80.0,
            noise: NoiseLevel::SnrDb { value: 40.0 },
        }
    }
}

/// Shapes usable as metric masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum MaskShape {
    Disk { center: [f64; 2], radius: f64 },
    Rectangle { center: [f64; 2], size: [f64; 2] },
    Annulus { center: [f64; 2], inner: f64, outer: f64 },
}

impl MaskShape {
    /// Closed-set membership.
    pub fn contains(&self, x: f64, z: f64) -> bool {
        match *self {
            MaskShape::Disk { center, radius } => (x - center[0]).hypot(z - center[1]) <= radius,
            MaskShape::Rectangle { center, size } => {
                (x - center[0]).abs() <= 0.5 * size[0] && (z - center[1]).abs() <= 0.5 * size[1]
            }
            MaskShape::Annulus { center, inner, outer } => {
                let r = (x - center[0]).hypot(z - center[1]);
                r >= inner && r <= outer
            }
        }
    }

    pub fn rasterize(&self, grid: &ImagingGrid) -> Vec<bool> {
        (0..grid.len())
            .map(|n| {
                let (x, z) = grid.position(n);
                self.contains(x, z)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointTarget {
    pub label: String,
    pub x: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastRegion {
    pub label: String,
    pub inside: MaskShape,
    pub outside: MaskShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeckleRegion {
    pub label: String,
    pub roi: MaskShape,
    /// Keep every `stride`-th pixel along each axis, to thin out correlated
    /// neighbours before the KS test.
    #[serde(default)]
    pub stride: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionsSection {
    pub dynamic_range_db: f64,
    pub gcnr_bins: usize,
    pub fwhm_search_radius: usize,
    pub points: Vec<PointTarget>,
    pub contrast: Vec<ContrastRegion>,
    pub speckle: Vec<SpeckleRegion>,
}

impl Default for RegionsSection {
    fn default() -> Self {
        Self {
            dynamic_range_db: 60.0,
            gcnr_bins: 256,
            fwhm_search_radius: 3,
            points: vec![],
            contrast: vec![],
            speckle: vec![],
        }
    }
}

impl RegionsSection {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.contrast.is_empty() && self.speckle.is_empty()
    }

    /// Regions matching a phantom's layout: one FWHM target per point, one
    /// contrast pair per anechoic or hyperechoic disk, and a speckle ROI in
    /// the background when it is echogenic.
    pub fn from_phantom(phantom: &Phantom, grid: &ImagingGrid) -> Self {
        let mut out = RegionsSection::default();
        let mut lesion_disks = vec![];
        for (i, r) in phantom.regions.iter().enumerate() {
            match r.shape {
                Shape::Point { center } => out.points.push(PointTarget {
                    label: format!("p{i}"),
                    x: center[0],
                    z: center[1],
                }),
                Shape::Disk { center, radius } if r.echogenicity != phantom.background => {
                    lesion_disks.push((center, radius));
                    out.contrast.push(ContrastRegion {
                        label: format!("lesion{i}"),
                        inside: MaskShape::Disk {
                            center,
                            radius: 0.8 * radius,
                        },
                        outside: MaskShape::Annulus {
                            center,
                            inner: 1.2 * radius,
                            outer: 1.6 * radius,
                        },
                    })
                }
                _ => {}
            }
        }
        if phantom.background > 0.0 {
            // largest lesion-free band of rows across the grid
            let pad = lesion_disks.iter().map(|d| d.1).fold(0.0, f64::max) * 1.2;
            let blocked = |z: f64| lesion_disks.iter().any(|(c, r)| (z - c[1]).abs() < r + pad * 0.2);
            let mut best = (0.0, 0.0);
            let mut start: Option<f64> = None;
            let zs: Vec<f64> = (0..grid.n_z).map(|i| grid.z(i)).collect();
            for (i, &z) in zs.iter().enumerate() {
                let last = i + 1 == zs.len();
                if !blocked(z) {
                    start.get_or_insert(z);
                }
                if blocked(z) || last {
                    if let Some(s) = start.take() {
                        let end = if blocked(z) { zs[i - 1] } else { z };
                        if end - s > best.1 - best.0 {
                            best = (s, end);
                        }
                    }
                }
            }
            if best.1 > best.0 {
                let w = grid.x_max - grid.x_min;
                out.speckle.push(SpeckleRegion {
                    label: "background".into(),
                    roi: MaskShape::Rectangle {
                        center: [0.5 * (grid.x_min + grid.x_max), 0.5 * (best.0 + best.1)],
                        size: [0.9 * w, best.1 - best.0],
                    },
                    stride: None,
                });
            }
        }
        out
    }

    /// Masks for the contrast and speckle regions on `grid`; an empty mask
    /// is reported by name.
    pub fn masks(&self, grid: &ImagingGrid) -> Result<Vec<RegionMask>> {
        let mut out = vec![];
        let mut push = |label: String, role, mask: Vec<bool>| -> Result<()> {
            if !mask.iter().any(|m| *m) {
                return Err(Error::MissingRegion(label));
            }
            out.push(RegionMask { label, role, mask });
            Ok(())
        };
        for c in &self.contrast {
            push(c.label.clone(), MaskRole::TargetIn, c.inside.rasterize(grid))?;
            push(c.label.clone(), MaskRole::ReferenceOut, c.outside.rasterize(grid))?;
        }
        for s in &self.speckle {
            let mut m = s.roi.rasterize(grid);
            if let Some([sx, sz]) = s.stride {
                for (n, v) in m.iter_mut().enumerate() {
                    let (ix, iz) = grid.unflatten(n);
                    *v &= ix % sx.max(1) == 0 && iz % sz.max(1) == 0;
                }
            }
            push(s.label.clone(), MaskRole::Roi, m)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub probe: ProbeSection,
    pub acquisition: AcquisitionSection,
    pub pulse: PulseSection,
    pub grid: GridSection,
    pub apodization: ApodizationSpec,
    pub model: ModelSection,
    pub sampler: SamplerConfig,
    pub denoiser: DenoiserSpec,
    pub simulation: SimulationSection,
    pub regions: RegionsSection,
}

/// Validated objects derived from a [`Config`].
#[derive(Debug, Clone)]
pub struct Setup {
    pub probe: ProbeGeometry,
    pub acquisition: AcquisitionConfig,
    pub pulse: PulseKernel,
    pub grid: ImagingGrid,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Builds and validates geometry; `sample_count == 0` is resolved here.
    pub fn setup(&self) -> Result<Setup> {
        let probe = ProbeGeometry::linear(self.probe.element_count, self.probe.pitch, self.probe.element_width)?;
        let pulse = PulseKernel::new(
            self.pulse.center_frequency,
            self.pulse.bandwidth_ratio,
            self.acquisition.sampling_rate,
        )?;
        let g = &self.grid;
        let grid = ImagingGrid::new(g.x, g.z, g.n_x, g.n_z)?;
        let a = &self.acquisition;
        let mut acquisition = AcquisitionConfig {
            sound_speed: a.sound_speed,
            sampling_rate: a.sampling_rate,
            start_time: a.start_time,
            sample_count: a.sample_count.max(1),
            steering_angle: a.steering_angle,
            noise_std: a.noise_std,
        };
        acquisition.validate(pulse.center_frequency)?;
        if a.sample_count == 0 {
            acquisition.sample_count = required_sample_count(&probe, &acquisition, &grid, &pulse);
        }
        self.apodization.validate()?;
        self.sampler.validate()?;
        if !(self.model.memory_budget_mb > 0.0) {
            return Err(Error::config("memory budget must be positive"));
        }
        if !(self.model.rank_tol >= 0.0 && self.model.rank_tol < 1.0) {
            return Err(Error::config("rank_tol must lie in [0, 1)"));
        }
        Ok(Setup {
            probe,
            acquisition,
            pulse,
            grid,
        })
    }

    pub fn phantom(&self) -> Result<Phantom> {
        let ph = match &self.simulation.phantom {
            PhantomSource::Preset(name) => Phantom::preset(name, self.scatterer_extent())?,
            PhantomSource::Custom(p) => p.clone(),
        };
        ph.validate()?;
        Ok(ph)
    }

    pub fn scatterer_extent(&self) -> Extent {
        self.simulation.extent.clone().unwrap_or_else(|| {
            let m = self.simulation.margin;
            Extent {
                x: [self.grid.x[0] - m, self.grid.x[1] + m],
                z: [(self.grid.z[0] - m).max(1e-4), self.grid.z[1] + m],
            }
        })
    }
}

/// Hex sha256 of the canonical JSON form of `value` (object keys sorted).
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    let text = serde_json::to_string(&v).expect("json");
    hex::encode(Sha256::digest(text.as_bytes()))
}
