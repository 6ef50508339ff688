//! Transducer geometry, plane-wave acquisition settings, imaging grid and the
//! two-way pulse kernel.
//!
//! Pixels are flattened depth-major: pixel `n = ix * n_z + iz`, so every axial
//! line is a contiguous run of `n_z` values. Every module shares this order.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear array, element centres symmetric about x = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGeometry {
    pub element_count: usize,
    pub pitch: f64,
    pub element_width: f64,
    element_positions: Vec<f64>,
}

impl ProbeGeometry {
    pub fn linear(element_count: usize, pitch: f64, element_width: f64) -> Result<Self> {
        if element_count < 2 {
            return Err(Error::config("probe needs at least two elements"));
        }
        if !(pitch > 0.0) || !(element_width > 0.0) {
            return Err(Error::config("pitch and element width must be positive"));
        }
        let mid = (element_count as f64 - 1.0) / 2.0;
        let element_positions = (0..element_count)
            .map(|j| (j as f64 - mid) * pitch)
            .collect();
        Ok(Self {
            element_count,
            pitch,
            element_width,
            element_positions,
        })
    }

    /// 128-element L11-4v geometry used by the PICMUS acquisitions.
    pub fn l11_4v() -> Self {
        Self::linear(128, 0.30e-3, 0.27e-3).expect("static geometry is valid")
    }

    pub fn element_positions(&self) -> &[f64] {
        &self.element_positions
    }

    pub fn element_x(&self, j: usize) -> f64 {
        self.element_positions[j]
    }

    /// Lateral half-extent of the array (outer element centres).
    pub fn half_aperture(&self) -> f64 {
        self.element_positions[self.element_count - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    /// m/s
    pub sound_speed: f64,
    /// Hz
    pub sampling_rate: f64,
    /// Time of sample 0, seconds. The transmitted wavefront crosses the array
    /// centre at t = 0.
    pub start_time: f64,
    pub sample_count: usize,
    /// Plane-wave steering angle, radians.
    pub steering_angle: f64,
    /// Standard deviation of the additive channel noise (RF units).
    pub noise_std: f64,
}

impl AcquisitionConfig {
    pub fn validate(&self, pulse_center_frequency: f64) -> Result<()> {
        if !(self.sound_speed > 0.0) {
            return Err(Error::config("sound speed must be positive"));
        }
        if !(self.sampling_rate > 2.0 * pulse_center_frequency) {
            return Err(Error::config(format!(
                "sampling rate {} Hz is below twice the pulse centre frequency {} Hz",
                self.sampling_rate, pulse_center_frequency
            )));
        }
        if self.sample_count == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise std must be non-negative"));
        }
        Ok(())
    }

    /// Time of sample `k`.
    #[inline]
    pub fn sample_time(&self, k: usize) -> f64 {
        self.start_time + k as f64 / self.sampling_rate
    }
}

/// Uniform pixel grid. Pixel centres include both range endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagingGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub n_x: usize,
    pub n_z: usize,
}

impl ImagingGrid {
    pub fn new(x_range: [f64; 2], z_range: [f64; 2], n_x: usize, n_z: usize) -> Result<Self> {
        let g = Self {
            x_min: x_range[0],
            x_max: x_range[1],
            z_min: z_range[0],
            z_max: z_range[1],
            n_x,
            n_z,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_z == 0 {
            return Err(Error::config("grid dimensions must be non-zero"));
        }
        if !(self.z_min > 0.0) {
            return Err(Error::config(format!(
                "grid must start below the transducer face (z_min = {} m)",
                self.z_min
            )));
        }
        if self.x_max < self.x_min || self.z_max < self.z_min {
            return Err(Error::config("grid ranges must be ordered min <= max"));
        }
        if (self.n_x > 1 && self.x_max == self.x_min) || (self.n_z > 1 && self.z_max == self.z_min) {
            return Err(Error::config("multi-pixel grid axis has zero extent"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_x * self.n_z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self) -> f64 {
        spacing(self.x_min, self.x_max, self.n_x)
    }

    pub fn dz(&self) -> f64 {
        spacing(self.z_min, self.z_max, self.n_z)
    }

    pub fn x(&self, ix: usize) -> f64 {
        coord(self.x_min, self.x_max, self.n_x, ix)
    }

    pub fn z(&self, iz: usize) -> f64 {
        coord(self.z_min, self.z_max, self.n_z, iz)
    }

    #[inline]
    pub fn index(&self, ix: usize, iz: usize) -> usize {
        ix * self.n_z + iz
    }

    /// (ix, iz) of flattened pixel `n`.
    #[inline]
    pub fn unflatten(&self, n: usize) -> (usize, usize) {
        (n / self.n_z, n % self.n_z)
    }

    /// Centre (x, z) of flattened pixel `n`, meters.
    pub fn position(&self, n: usize) -> (f64, f64) {
        let (ix, iz) = self.unflatten(n);
        (self.x(ix), self.z(iz))
    }

    /// Nearest pixel to (x, z), if it lies within half a pixel of the grid.
    pub fn nearest(&self, x: f64, z: f64) -> Option<usize> {
        let fx = if self.n_x > 1 { (x - self.x_min) / self.dx() } else { 0.0 };
        let fz = if self.n_z > 1 { (z - self.z_min) / self.dz() } else { 0.0 };
        let (ix, iz) = (fx.round(), fz.round());
        if ix < 0.0 || iz < 0.0 || ix as usize >= self.n_x || iz as usize >= self.n_z {
            return None;
        }
        Some(self.index(ix as usize, iz as usize))
    }
}

fn spacing(min: f64, max: f64, n: usize) -> f64 {
    if n > 1 {
        (max - min) / (n - 1) as f64
    } else {
        0.0
    }
}

fn coord(min: f64, max: f64, n: usize, i: usize) -> f64 {
    if n > 1 {
        min + i as f64 * (max - min) / (n - 1) as f64
    } else {
        0.5 * (min + max)
    }
}

/// Combined two-way pulse h = h_e * h_t as a single Gaussian-modulated cosine.
///
/// The envelope width is chosen so the -6 dB (half-amplitude) two-sided
/// spectral width equals `bandwidth_ratio * center_frequency`. The DC term of
/// the Gaussian is removed so the pulse integrates to zero, and the result is
/// rescaled so `h(0) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseKernel {
    pub center_frequency: f64,
    pub bandwidth_ratio: f64,
    pub sampling_rate: f64,
    /// Gaussian envelope standard deviation, seconds.
    pub sigma: f64,
    /// Half the number of samples in a band, minus one half: the kernel is
    /// nonzero on `|t| <= support_half_width`.
    pub band_half_width: usize,
    pub support_half_width: f64,
    dc_offset: f64,
    /// `h(k / f_s)` for `k = -band_half_width ..= band_half_width`.
    pub samples: Vec<f64>,
}

impl PulseKernel {
    pub fn new(center_frequency: f64, bandwidth_ratio: f64, sampling_rate: f64) -> Result<Self> {
        if !(center_frequency > 0.0) {
            return Err(Error::config("pulse centre frequency must be positive"));
        }
        if !(bandwidth_ratio > 0.0 && bandwidth_ratio <= 2.0) {
            return Err(Error::config("bandwidth ratio must lie in (0, 2]"));
        }
        if !(sampling_rate > 2.0 * center_frequency) {
            return Err(Error::config("sampling rate must exceed twice the centre frequency"));
        }
        // |H(fc +- df)| = 1/2 with df = BWR fc / 2 gives sigma = sqrt(2 ln 2) / (2 pi df).
        let half_band = 0.5 * bandwidth_ratio * center_frequency;
        let sigma = (2.0 * std::f64::consts::LN_2).sqrt() / (2.0 * PI * half_band);
        let band_half_width = (4.0 * sigma * sampling_rate).ceil() as usize;
        let support_half_width = (band_half_width as f64 + 0.5) / sampling_rate;
        let w = 2.0 * PI * center_frequency * sigma;
        let dc_offset = (-0.5 * w * w).exp();
        let mut k = Self {
            center_frequency,
            bandwidth_ratio,
            sampling_rate,
            sigma,
            band_half_width,
            support_half_width,
            dc_offset,
            samples: Vec::new(),
        };
        let bw = band_half_width as i64;
        k.samples = (-bw..=bw)
            .map(|i| k.waveform(i as f64 / sampling_rate))
            .collect();
        Ok(k)
    }

    /// Kernel amplitude at time offset `t` (seconds). Zero outside the support.
    #[inline]
    pub fn waveform(&self, t: f64) -> f64 {
        if t.abs() > self.support_half_width {
            return 0.0;
        }
        let g = (-0.5 * (t / self.sigma).powi(2)).exp();
        g * ((2.0 * PI * self.center_frequency * t).cos() - self.dc_offset) / (1.0 - self.dc_offset)
    }

    /// Samples per band (per element, per pixel) in the system matrix.
    pub fn band_len(&self) -> usize {
        2 * self.band_half_width + 1
    }
}

/// Free-function form of [`PulseKernel::waveform`].
pub fn kernel_waveform(pulse: &PulseKernel, t: f64) -> f64 {
    pulse.waveform(t)
}

/// Two-way propagation time from the plane-wave transmit to pixel (x, z) and
/// back to element `j`.
pub fn time_of_flight(
    config: &AcquisitionConfig,
    probe: &ProbeGeometry,
    pixel: (f64, f64),
    element: usize,
) -> Result<f64> {
    if element >= probe.element_count {
        return Err(Error::ElementIndex {
            index: element,
            count: probe.element_count,
        });
    }
    let (x, z) = pixel;
    if !(z > 0.0) {
        return Err(Error::NonPositiveDepth(z));
    }
    Ok(tof_unchecked(config, probe.element_x(element), x, z))
}

#[inline]
pub(crate) fn tof_unchecked(config: &AcquisitionConfig, element_x: f64, x: f64, z: f64) -> f64 {
    let a = config.steering_angle;
    let tx = if a == 0.0 { z } else { z * a.cos() + x * a.sin() };
    let dx = x - element_x;
    (tx + (dx * dx + z * z).sqrt()) / config.sound_speed
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn acq() -> AcquisitionConfig {
        AcquisitionConfig {
            sound_speed: 1540.0,
            sampling_rate: 20.8e6,
            start_time: 0.0,
            sample_count: 2000,
            steering_angle: 0.0,
            noise_std: 0.0,
        }
    }

    #[test]
    fn probe_positions_symmetric_and_uniform() {
        let p = ProbeGeometry::l11_4v();
        let pos = p.element_positions();
        for j in 0..pos.len() {
            assert!((pos[j] + pos[pos.len() - 1 - j]).abs() < 1e-12);
            if j + 1 < pos.len() {
                assert!((pos[j + 1] - pos[j] - p.pitch).abs() < 1e-12);
            }
        }
        assert!(ProbeGeometry::linear(1, 1e-3, 1e-3).is_err());
    }

    #[test]
    fn on_axis_round_trip() {
        let p = ProbeGeometry::linear(2, 1e-3, 1e-3).unwrap();
        let cfg = acq();
        let xj = p.element_x(1);
        let t = time_of_flight(&cfg, &p, (xj, 0.02), 1).unwrap();
        assert!((t - 2.0 * 0.02 / 1540.0).abs() < 1e-18);
        // 25.974 us by hand
        assert!((t * 1e6 - 25.974).abs() < 1e-3);
    }

    #[test]
    fn mirror_elements_have_equal_delay() {
        let p = ProbeGeometry::l11_4v();
        let t1 = time_of_flight(&acq(), &p, (0.0, 0.03), 10).unwrap();
        let t2 = time_of_flight(&acq(), &p, (0.0, 0.03), 117).unwrap();
        assert!((t1 - t2).abs() < 1e-18);
    }

    #[test]
    fn tof_errors() {
        let p = ProbeGeometry::l11_4v();
        assert!(matches!(
            time_of_flight(&acq(), &p, (0.0, 0.01), 128),
            Err(Error::ElementIndex { .. })
        ));
        assert!(matches!(
            time_of_flight(&acq(), &p, (0.0, 0.0), 0),
            Err(Error::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn tof_monotone_in_depth() {
        let p = ProbeGeometry::l11_4v();
        let mut prev = 0.0;
        for i in 1..200 {
            let t = time_of_flight(&acq(), &p, (3e-3, i as f64 * 1e-4), 20).unwrap();
            assert!(t > prev);
            prev = t;
        }
    }

    fn default_pulse() -> PulseKernel {
        PulseKernel::new(5.208e6, 0.67, 20.8e6).unwrap()
    }

    #[test]
    fn kernel_peak_and_support() {
        let k = default_pulse();
        assert_eq!(k.waveform(0.0), 1.0);
        assert_eq!(k.waveform(k.support_half_width * 1.0001), 0.0);
        assert!(k.support_half_width >= 4.0 * k.sigma);
        for &t in &[1e-8, 3.3e-8, 1.7e-7] {
            assert_eq!(k.waveform(t), k.waveform(-t));
        }
        assert_eq!(k, default_pulse());
    }

    #[test]
    fn kernel_is_zero_mean_and_compact() {
        let k = default_pulse();
        // Fine quadrature over a window much wider than the support.
        let dt = k.sigma / 200.0;
        let (mut sum, mut abs, mut inside, mut total) = (0.0, 0.0, 0.0, 0.0);
        let env = |t: f64| (-0.5 * (t / k.sigma).powi(2)).exp();
        for i in -4000..=4000 {
            let t = i as f64 * dt;
            let h = k.waveform(t);
            sum += h;
            abs += h.abs();
            // untruncated energy uses the closed form of the same expression
            let w = 2.0 * PI * k.center_frequency * t;
            let full = env(t) * (w.cos() - k.dc_offset) / (1.0 - k.dc_offset);
            total += full * full;
            inside += h * h;
        }
        assert!((sum / abs).abs() < 1e-3, "mean ratio {}", sum / abs);
        assert!((total - inside) / total < 1e-6);
    }

    #[test]
    fn kernel_bandwidth_matches_ratio() {
        let k = default_pulse();
        let fs = k.sampling_rate;
        let n = 1 << 16;
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let bw = k.band_half_width as i64;
        for i in -bw..=bw {
            buf[i.rem_euclid(n as i64) as usize].re = k.waveform(i as f64 / fs);
        }
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mag: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
        let (ipk, &pk) = mag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let half = 0.5 * pk;
        let lo = (0..ipk).rev().find(|&i| mag[i] < half).unwrap();
        let hi = (ipk..mag.len()).find(|&i| mag[i] < half).unwrap();
        let width = (hi - lo) as f64 * fs / n as f64;
        let expected = 0.67 * 5.208e6;
        assert!(
            (width - expected).abs() / expected < 0.05,
            "width {width} expected {expected}"
        );
    }

    #[test]
    fn grid_flattening_is_depth_major() {
        let g = ImagingGrid::new([-1e-3, 1e-3], [1e-3, 2e-3], 3, 5).unwrap();
        assert_eq!(g.index(1, 0), 5);
        assert_eq!(g.unflatten(7), (1, 2));
        let (x, z) = g.position(7);
        assert!((x - 0.0).abs() < 1e-15 && (z - 1.5e-3).abs() < 1e-15);
        assert!(ImagingGrid::new([-1e-3, 1e-3], [0.0, 2e-3], 3, 5).is_err());
    }
}
