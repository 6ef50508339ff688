//! Receive apodization and the weighted matched filter `B = (W ⊙ H)^T`.
//! A DAS image is the product `B y`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::probe::{ImagingGrid, ProbeGeometry};
use crate::sparse::Compressed;
use crate::system::SystemMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Window {
    /// Flat top with cosine tapers over the outer `taper` fraction.
    Tukey { taper: f64 },
    Rectangular,
    Hann,
}

impl Window {
    /// Window value at normalised lateral offset `u = |x - x_j| / half_width`.
    pub fn value(&self, u: f64) -> f64 {
        let u = u.abs();
        if u > 1.0 {
            return 0.0;
        }
        match *self {
            Window::Rectangular => 1.0,
            Window::Hann => 0.5 * (1.0 + (PI * u).cos()),
            Window::Tukey { taper } => {
                let flat = 1.0 - taper;
                if u <= flat {
                    1.0
                } else {
                    0.5 * (1.0 + (PI * (u - flat) / taper).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApodizationSpec {
    pub window: Window,
    /// `None` opens the full array for every pixel.
    pub f_number: Option<f64>,
}

impl Default for ApodizationSpec {
    fn default() -> Self {
        Self {
            window: Window::Tukey { taper: 0.25 },
            f_number: Some(1.4),
        }
    }
}

impl ApodizationSpec {
    pub fn full_aperture() -> Self {
        Self {
            window: Window::Rectangular,
            f_number: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.f_number {
            if !(f > 0.0) {
                return Err(Error::config("f-number must be positive"));
            }
        }
        if let Window::Tukey { taper } = self.window {
            if !(0.0..=1.0).contains(&taper) {
                return Err(Error::config("Tukey taper must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Per-pixel receive weights, `L` values per pixel (pixel-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ApodizationWeights {
    pub element_count: usize,
    pub values: Vec<f64>,
}

impl ApodizationWeights {
    pub fn pixel(&self, n: usize) -> &[f64] {
        &self.values[n * self.element_count..(n + 1) * self.element_count]
    }

    pub fn uniform(pixels: usize, element_count: usize, value: f64) -> Self {
        Self {
            element_count,
            values: vec![value; pixels * element_count],
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            element_count: self.element_count,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// f-number aperture rule: pixel at depth z uses elements within
/// `z / (2 F#)` laterally, weighted by the window.
pub fn apodization_weights(
    probe: &ProbeGeometry,
    grid: &ImagingGrid,
    spec: &ApodizationSpec,
) -> Result<ApodizationWeights> {
    spec.validate()?;
    let l = probe.element_count;
    let mut values = vec![0.0; grid.len() * l];
    let mut empty = Vec::new();
    for n in 0..grid.len() {
        let (x, z) = grid.position(n);
        let row = &mut values[n * l..(n + 1) * l];
        match spec.f_number {
            None => row.iter_mut().for_each(|w| *w = spec.window.value(0.0)),
            Some(f) => {
                let half = z / (2.0 * f);
                for (w, &xj) in row.iter_mut().zip(probe.element_positions()) {
                    *w = if half > 0.0 {
                        spec.window.value((x - xj).abs() / half)
                    } else {
                        0.0
                    };
                }
            }
        }
        if row.iter().all(|w| *w <= 0.0) {
            empty.push(n);
        }
    }
    if !empty.is_empty() {
        return Err(Error::EmptyAperture { pixels: empty });
    }
    Ok(ApodizationWeights {
        element_count: l,
        values,
    })
}

/// Row-compressed `N x KL` beamforming matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerMatrix {
    pub(crate) csr: Compressed,
    /// Hash of the inputs this matrix was built from (empty when unknown).
    pub provenance: String,
}

impl BeamformerMatrix {
    pub fn from_csr(csr: Compressed, provenance: String) -> Self {
        Self { csr, provenance }
    }

    pub fn rows(&self) -> usize {
        self.csr.outer_len
    }

    pub fn cols(&self) -> usize {
        self.csr.inner_len
    }

    pub fn nnz(&self) -> usize {
        self.csr.nnz()
    }

    pub fn row(&self, n: usize) -> (&[u32], &[f64]) {
        self.csr.lane(n)
    }

    pub fn storage(&self) -> &Compressed {
        &self.csr
    }

    /// `B y`.
    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("beamformer input", self.cols(), y.len())?;
        Ok(self.csr.lane_dots(y))
    }

    /// `B^T v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("beamformer transpose input", self.rows(), v.len())?;
        Ok(self.csr.scatter(v))
    }
}

/// Row `n` of `B` is column `n` of `H` with each element's band scaled by
/// `a_{j,n}`; zero-weight elements are dropped.
pub fn build_beamformer(h: &SystemMatrix, weights: &ApodizationWeights) -> Result<BeamformerMatrix> {
    check_len("apodization element count", h.element_count, weights.element_count)?;
    check_len(
        "apodization pixel count",
        h.cols() * h.element_count,
        weights.values.len(),
    )?;
    let k = h.sample_count;
    let lanes = (0..h.cols())
        .map(|n| {
            let a = weights.pixel(n);
            let (idx, val) = h.column(n);
            let mut li = Vec::with_capacity(idx.len());
            let mut lv = Vec::with_capacity(idx.len());
            for (&r, &v) in idx.iter().zip(val) {
                let w = a[r as usize / k];
                if w != 0.0 {
                    li.push(r);
                    lv.push(w * v);
                }
            }
            (li, lv)
        })
        .collect();
    Ok(BeamformerMatrix::from_csr(
        Compressed::from_lanes(h.rows(), lanes),
        String::new(),
    ))
}

/// Delay-and-sum image `B y`.
pub fn das(b: &BeamformerMatrix, y: &[f64]) -> Result<Vec<f64>> {
    b.apply(y)
}
