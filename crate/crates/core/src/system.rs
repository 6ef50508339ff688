//! Sparse forward operator `H` (KL x N) mapping a reflectivity image to RF
//! channel data, `y = H o`.
//!
//! Row `j * K + k` holds element `j`, time sample `k`. Column `n` holds, for
//! every element, the pulse delayed by the pixel's time of flight: one band of
//! `2w + 1` samples centred on `round((tau_j(r_n) - t_0) f_s)`.

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::probe::{tof_unchecked, AcquisitionConfig, ImagingGrid, ProbeGeometry, PulseKernel};
use crate::sparse::Compressed;

#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrix {
    /// Column-compressed, one lane per pixel.
    pub(crate) csc: Compressed,
    pub sample_count: usize,
    pub element_count: usize,
    column_norms_sq: Vec<f64>,
}

impl SystemMatrix {
    pub fn from_csc(csc: Compressed, sample_count: usize, element_count: usize) -> Result<Self> {
        check_len("system matrix rows", sample_count * element_count, csc.inner_len)?;
        let column_norms_sq = (0..csc.outer_len)
            .map(|n| csc.lane(n).1.iter().map(|v| v * v).sum())
            .collect();
        Ok(Self {
            csc,
            sample_count,
            element_count,
            column_norms_sq,
        })
    }

    pub fn rows(&self) -> usize {
        self.csc.inner_len
    }

    pub fn cols(&self) -> usize {
        self.csc.outer_len
    }

    pub fn nnz(&self) -> usize {
        self.csc.nnz()
    }

    /// Row indices and values of column `n`.
    pub fn column(&self, n: usize) -> (&[u32], &[f64]) {
        self.csc.lane(n)
    }

    pub fn column_norms_sq(&self) -> &[f64] {
        &self.column_norms_sq
    }

    pub fn storage(&self) -> &Compressed {
        &self.csc
    }

    pub fn apply_forward(&self, o: &[f64]) -> Result<Vec<f64>> {
        check_len("apply_forward input", self.cols(), o.len())?;
        Ok(self.csc.scatter(o))
    }

    pub fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("apply_adjoint input", self.rows(), y.len())?;
        Ok(self.csc.lane_dots(y))
    }
}

/// Upper bound on the bytes needed to hold `H` for this configuration.
pub fn estimated_bytes(probe: &ProbeGeometry, grid: &ImagingGrid, pulse: &PulseKernel) -> usize {
    let nnz = grid.len() * probe.element_count * pulse.band_len();
    nnz * 12 + (grid.len() + 1) * 8
}

/// Smallest sample count whose window contains every pixel's full band when
/// recording starts at `config.start_time`.
pub fn required_sample_count(
    probe: &ProbeGeometry,
    config: &AcquisitionConfig,
    grid: &ImagingGrid,
    pulse: &PulseKernel,
) -> usize {
    let mut max_tau: f64 = 0.0;
    // The latest echo comes from a corner of the grid.
    for &x in &[grid.x_min, grid.x_max] {
        for &xj in &[probe.element_x(0), probe.element_x(probe.element_count - 1)] {
            max_tau = max_tau.max(tof_unchecked(config, xj, x, grid.z_max));
        }
    }
    let last = ((max_tau - config.start_time) * config.sampling_rate).round() as i64
        + pulse.band_half_width as i64;
    (last.max(0) + 1) as usize
}

/// Sample indices (clipped to the window) and kernel values of one band.
#[inline]
pub(crate) fn band(
    config: &AcquisitionConfig,
    pulse: &PulseKernel,
    tau: f64,
    mut emit: impl FnMut(usize, f64),
) {
    let centre = ((tau - config.start_time) * config.sampling_rate).round() as i64;
    let w = pulse.band_half_width as i64;
    let k_lo = (centre - w).max(0);
    let k_hi = (centre + w).min(config.sample_count as i64 - 1);
    for k in k_lo..=k_hi {
        let v = pulse.waveform(config.sample_time(k as usize) - tau);
        if v != 0.0 {
            emit(k as usize, v);
        }
    }
}

pub fn build_system_matrix(
    probe: &ProbeGeometry,
    config: &AcquisitionConfig,
    grid: &ImagingGrid,
    pulse: &PulseKernel,
    memory_budget_mb: f64,
) -> Result<SystemMatrix> {
    grid.validate()?;
    config.validate(pulse.center_frequency)?;
    let needed = estimated_bytes(probe, grid, pulse) as f64 / (1024.0 * 1024.0);
    if needed > memory_budget_mb {
        return Err(Error::MemoryBudget {
            what: "system matrix",
            needed_mb: needed,
            budget_mb: memory_budget_mb,
        });
    }
    let k_count = config.sample_count;
    let lanes: Vec<(Vec<u32>, Vec<f64>)> = (0..grid.len())
        .into_par_iter()
        .map(|n| {
            let (x, z) = grid.position(n);
            let mut idx = Vec::with_capacity(probe.element_count * pulse.band_len());
            let mut val = Vec::with_capacity(idx.capacity());
            for (j, &xj) in probe.element_positions().iter().enumerate() {
                let tau = tof_unchecked(config, xj, x, z);
                band(config, pulse, tau, |k, v| {
                    idx.push((j * k_count + k) as u32);
                    val.push(v);
                });
            }
            (idx, val)
        })
        .collect();
    let csc = Compressed::from_lanes(k_count * probe.element_count, lanes);
    if csc.nnz() == 0 {
        return Err(Error::EmptyMatrix);
    }
    SystemMatrix::from_csc(csc, k_count, probe.element_count)
}
