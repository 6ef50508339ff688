//! Phantoms, scatterer fields and direct time-domain channel synthesis.
//!
//! Synthesis sums the pulse at each scatterer's continuous delay and never
//! goes through the system matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{tof_unchecked, AcquisitionConfig, ImagingGrid, ProbeGeometry, PulseKernel};
use crate::system::band;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Disk { center: [f64; 2], radius: f64 },
    Rectangle { center: [f64; 2], size: [f64; 2] },
    Point { center: [f64; 2] },
}

impl Shape {
    /// Strict interior test; points have no interior.
    pub fn contains(&self, x: f64, z: f64) -> bool {
        match *self {
            Shape::Disk { center, radius } => (x - center[0]).powi(2) + (z - center[1]).powi(2) < radius * radius,
            Shape::Rectangle { center, size } => {
                (x - center[0]).abs() < 0.5 * size[0] && (z - center[1]).abs() < 0.5 * size[1]
            }
            Shape::Point { .. } => false,
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Disk { radius, .. } => std::f64::consts::PI * radius * radius,
            Shape::Rectangle { size, .. } => size[0] * size[1],
            Shape::Point { .. } => 0.0,
        }
    }

    pub fn center(&self) -> [f64; 2] {
        match *self {
            Shape::Disk { center, .. } | Shape::Rectangle { center, .. } | Shape::Point { center } => center,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(flatten)]
    pub shape: Shape,
    /// Linear amplitude; for points, the scatterer amplitude.
    pub echogenicity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x: [f64; 2],
    pub z: [f64; 2],
}

impl Extent {
    pub fn width(&self) -> f64 {
        self.x[1] - self.x[0]
    }

    pub fn height(&self) -> f64 {
        self.z[1] - self.z[0]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn of_grid(grid: &ImagingGrid) -> Self {
        Self {
            x: [grid.x_min, grid.x_max],
            z: [grid.z_min, grid.z_max],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub name: String,
    /// Echogenicity outside every region.
    pub background: f64,
    /// Scatterers are drawn inside this box.
    pub extent: Extent,
    /// Later regions override earlier ones where they overlap.
    #[serde(default)]
    pub regions: Vec<Region>,
}

pub const PRESETS: [&str; 4] = ["sr-like", "sc-like", "er-like", "ec-like"];

impl Phantom {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent.width() > 0.0 && self.extent.height() > 0.0) {
            return Err(Error::config("phantom extent must have positive width and height"));
        }
        if !(self.extent.z[0] > 0.0) {
            return Err(Error::config("phantom extent must lie at positive depth"));
        }
        if !(self.background >= 0.0) {
            return Err(Error::config("background echogenicity must be non-negative"));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if !(r.echogenicity >= 0.0) {
                return Err(Error::config(format!("region {i}: echogenicity must be non-negative")));
            }
            let [cx, cz] = r.shape.center();
            if cx < self.extent.x[0] || cx > self.extent.x[1] || cz < self.extent.z[0] || cz > self.extent.z[1] {
                return Err(Error::config(format!("region {i} lies outside the phantom extent")));
            }
        }
        Ok(())
    }

    /// Diffuse echogenicity at a point (point targets excluded).
    pub fn echogenicity_at(&self, x: f64, z: f64) -> f64 {
        self.regions
            .iter()
            .rev()
            .find(|r| r.shape.contains(x, z))
            .map_or(self.background, |r| r.echogenicity)
    }

    pub fn points(&self) -> impl Iterator<Item = (&Shape, f64)> {
        self.regions
            .iter()
            .filter(|r| matches!(r.shape, Shape::Point { .. }))
            .map(|r| (&r.shape, r.echogenicity))
    }

    /// Ground-truth echogenicity sampled on a grid; each point target sets
    /// its nearest pixel.
    pub fn echogenicity_map(&self, grid: &ImagingGrid) -> Vec<f64> {
        let mut p: Vec<f64> = (0..grid.len())
            .map(|n| {
                let (x, z) = grid.position(n);
                self.echogenicity_at(x, z)
            })
            .collect();
        for (shape, amp) in self.points() {
            let [x, z] = shape.center();
            if let Some(n) = grid.nearest(x, z) {
                p[n] = p[n].max(amp);
            }
        }
        p
    }

    /// Built-in layouts scaled to `extent`.
    pub fn preset(name: &str, extent: Extent) -> Result<Self> {
        let (w, h) = (extent.width(), extent.height());
        let at = |fx: f64, fz: f64| [extent.x[0] + fx * w, extent.z[0] + fz * h];
        let grid3 = [0.25, 0.5, 0.75];
        let points = |amp: f64| -> Vec<Region> {
            grid3
                .iter()
                .flat_map(|&fz| grid3.iter().map(move |&fx| (fx, fz)))
                .map(|(fx, fz)| Region {
                    shape: Shape::Point { center: at(fx, fz) },
                    echogenicity: amp,
                })
                .collect()
        };
        let (background, regions) = match name {
            "sr-like" => (0.0, points(1.0)),
            "sc-like" => {
                let r = 0.11 * w.min(h);
                let disks = grid3
                    .iter()
                    .flat_map(|&fz| grid3.iter().map(move |&fx| (fx, fz)))
                    .map(|(fx, fz)| Region {
                        shape: Shape::Disk { center: at(fx, fz), radius: r },
                        echogenicity: 0.0,
                    })
                    .collect();
                (1.0, disks)
            }
            "er-like" => {
                let mut regs = vec![Region {
                    shape: Shape::Disk {
                        center: at(0.5, 0.5),
                        radius: 0.15 * w.min(h),
                    },
                    echogenicity: 2.0,
                }];
                regs.extend(points(10.0).into_iter().filter(|r| r.shape.center() != at(0.5, 0.5)));
                (1.0, regs)
            }
            "ec-like" => {
                let r = 0.16 * w.min(h);
                let disks = [0.3, 0.7]
                    .iter()
                    .map(|&fz| Region {
                        shape: Shape::Disk { center: at(0.5, fz), radius: r },
                        echogenicity: 0.0,
                    })
                    .collect();
                (1.0, disks)
            }
            other => {
                return Err(Error::config(format!(
                    "unknown phantom preset '{other}'; available: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            background,
            extent,
            regions,
        })
    }
}

/// `o = D p` with `D` diagonal standard normal.
pub fn reflectivity_from_echogenicity(p: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if let Some(bad) = p.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::config(format!("echogenicity must be non-negative (pixel {bad})")));
    }
    Ok(p.iter()
        .map(|&v| {
            let d: f64 = rng.sample(StandardNormal);
            d * v
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScattererField {
    /// `(x, z)` in metres.
    pub positions: Vec<(f64, f64)>,
    pub amplitudes: Vec<f64>,
    pub density_per_mm2: f64,
}

impl ScattererField {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Approximate area of one resolution cell (axial pulse half-length times one
/// wavelength laterally), mm^2.
pub fn resolution_cell_mm2(pulse: &PulseKernel, sound_speed: f64) -> f64 {
    let axial = sound_speed / (2.0 * pulse.bandwidth_ratio * pulse.center_frequency);
    let lateral = sound_speed / pulse.center_frequency;
    axial * lateral * 1e6
}

/// Uniform scatterers over the extent (`round(density * area)` draws), with
/// anechoic draws discarded, plus one deterministic scatterer per point target.
pub fn sample_scatterers(phantom: &Phantom, density_per_mm2: f64, rng: &mut impl Rng) -> Result<ScattererField> {
    phantom.validate()?;
    let diffuse = phantom.background > 0.0 || phantom.regions.iter().any(|r| r.shape.area() > 0.0 && r.echogenicity > 0.0);
    if diffuse && !(density_per_mm2 > 0.0) {
        return Err(Error::config("scatterer density must be positive for echogenic regions"));
    }
    let ext = &phantom.extent;
    let count = (density_per_mm2.max(0.0) * ext.area() * 1e6).round() as usize;
    let mut positions = Vec::with_capacity(count);
    let mut amplitudes = Vec::with_capacity(count);
    for _ in 0..count {
        let x = ext.x[0] + rng.gen::<f64>() * ext.width();
        let z = ext.z[0] + rng.gen::<f64>() * ext.height();
        let g: f64 = rng.sample(StandardNormal);
        let e = phantom.echogenicity_at(x, z);
        if e > 0.0 {
            positions.push((x, z));
            amplitudes.push(e * g);
        }
    }
    for (shape, amp) in phantom.points() {
        let [x, z] = shape.center();
        positions.push((x, z));
        amplitudes.push(amp);
    }
    Ok(ScattererField {
        positions,
        amplitudes,
        density_per_mm2,
    })
}

/// Scatterers at pixel centres with the given amplitudes (zeros skipped).
pub fn on_grid_field(grid: &ImagingGrid, o: &[f64]) -> ScattererField {
    let mut positions = Vec::new();
    let mut amplitudes = Vec::new();
    for (n, &a) in o.iter().enumerate() {
        if a != 0.0 {
            positions.push(grid.position(n));
            amplitudes.push(a);
        }
    }
    ScattererField {
        positions,
        amplitudes,
        density_per_mm2: 0.0,
    }
}

/// RF data laid out element-major: sample `k` of element `j` at `j * K + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelData {
    pub element_count: usize,
    pub sample_count: usize,
    pub data: Vec<f64>,
    pub noise_std: f64,
}

impl ChannelData {
    pub fn channel(&self, j: usize) -> &[f64] {
        &self.data[j * self.sample_count..(j + 1) * self.sample_count]
    }
}

/// Noise level: a target channel SNR in dB, or a fixed standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseLevel {
    SnrDb { value: f64 },
    Std { value: f64 },
}

/// Noise-free synthesis of every channel.
pub fn synthesize_clean(
    field: &ScattererField,
    probe: &ProbeGeometry,
    config: &AcquisitionConfig,
    pulse: &PulseKernel,
) -> Result<Vec<f64>> {
    config.validate(pulse.center_frequency)?;
    let k_count = config.sample_count;
    let mut data = vec![0.0; k_count * probe.element_count];
    data.par_chunks_mut(k_count).enumerate().for_each(|(j, chan)| {
        let xj = probe.element_x(j);
        for (&(x, z), &a) in field.positions.iter().zip(&field.amplitudes) {
            let tau = tof_unchecked(config, xj, x, z);
            band(config, pulse, tau, |k, v| chan[k] += a * v);
        }
    });
    Ok(data)
}

/// Direct synthesis plus white Gaussian noise, one rng stream per channel.
pub fn synthesize_channel_data(
    field: &ScattererField,
    probe: &ProbeGeometry,
    config: &AcquisitionConfig,
    pulse: &PulseKernel,
    noise: NoiseLevel,
    seed: u64,
) -> Result<ChannelData> {
    let mut data = synthesize_clean(field, probe, config, pulse)?;
    let gamma = match noise {
        NoiseLevel::Std { value } if value >= 0.0 => value,
        NoiseLevel::SnrDb { value } if value.is_finite() => {
            let energy: f64 = data.iter().map(|v| v * v).sum();
            (energy / (data.len() as f64 * 10f64.powf(value / 10.0))).sqrt()
        }
        _ => return Err(Error::config("noise level must be a finite SNR or a non-negative std")),
    };
    if gamma > 0.0 {
        let k_count = config.sample_count;
        data.par_chunks_mut(k_count).enumerate().for_each(|(j, chan)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            for v in chan.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += gamma * z;
            }
        });
    }
    Ok(ChannelData {
        element_count: probe.element_count,
        sample_count: config.sample_count,
        data,
        noise_std: gamma,
    })
}
