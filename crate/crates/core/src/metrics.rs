//! Envelope detection, log compression and image-quality metrics.
//!
//! All statistics run on the linear envelope; dB images are for display and
//! for FWHM only.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::probe::ImagingGrid;

/// `20 log10(1/2)`: half amplitude.
pub const HALF_AMPLITUDE_DB: f64 = -6.020599913279624;

/// Magnitude of the analytic signal along each axial line of a depth-major
/// `n_z x n_x` image.
pub fn envelope(image: &[f64], n_z: usize, n_x: usize) -> Result<Vec<f64>> {
    check_len("envelope image", n_z * n_x, image.len())?;
    if n_z < 4 {
        return Err(Error::config(format!("envelope needs at least 4 axial samples, got {n_z}")));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n_z);
    let inv = planner.plan_fft_inverse(n_z);
    let mut out = Vec::with_capacity(image.len());
    let mut buf = vec![Complex::new(0.0, 0.0); n_z];
    for col in image.chunks_exact(n_z) {
        for (b, &v) in buf.iter_mut().zip(col) {
            *b = Complex::new(v, 0.0);
        }
        fwd.process(&mut buf);
        // one-sided spectrum: keep DC (and Nyquist), double positive bins
        let half = n_z / 2;
        for (k, b) in buf.iter_mut().enumerate() {
            let w = if k == 0 || (n_z % 2 == 0 && k == half) {
                1.0
            } else if k <= (n_z - 1) / 2 {
                2.0
            } else {
                0.0
            };
            *b *= w;
        }
        inv.process(&mut buf);
        let scale = 1.0 / n_z as f64;
        out.extend(buf.iter().map(|c| c.norm() * scale));
    }
    Ok(out)
}

/// `20 log10(env / max)`, clipped below at `-dynamic_range_db`.
pub fn log_compress(env: &[f64], dynamic_range_db: f64) -> Result<Vec<f64>> {
    if !(dynamic_range_db > 0.0) {
        return Err(Error::config("dynamic range must be positive"));
    }
    if let Some(i) = env.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::config(format!("envelope must be non-negative (pixel {i})")));
    }
    let max = env.iter().fold(0.0f64, |a, &b| a.max(b));
    if !(max > 0.0) {
        return Err(Error::Degenerate("cannot log-compress an all-zero image".into()));
    }
    Ok(env
        .iter()
        .map(|&v| (20.0 * (v / max).log10()).max(-dynamic_range_db))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Lateral,
}

/// -6 dB width, in mm, of the profile through the brightest pixel within
/// `search_radius` pixels of `seed = (x, z)`.
pub fn fwhm(db: &[f64], grid: &ImagingGrid, seed: (f64, f64), axis: Axis, search_radius: usize) -> Result<f64> {
    check_len("fwhm image", grid.len(), db.len())?;
    let s = grid
        .nearest(seed.0, seed.1)
        .ok_or_else(|| Error::config("fwhm seed outside the grid"))?;
    let (sx, sz) = grid.unflatten(s);
    let r = search_radius as i64;
    let mut best = s;
    for dix in -r..=r {
        for diz in -r..=r {
            let (ix, iz) = (sx as i64 + dix, sz as i64 + diz);
            if ix < 0 || iz < 0 || ix >= grid.n_x as i64 || iz >= grid.n_z as i64 {
                continue;
            }
            let n = grid.index(ix as usize, iz as usize);
            if db[n] > db[best] {
                best = n;
            }
        }
    }
    let (px, pz) = grid.unflatten(best);
    let (profile, pos, spacing): (Vec<f64>, usize, f64) = match axis {
        Axis::Axial => ((0..grid.n_z).map(|iz| db[grid.index(px, iz)]).collect(), pz, grid.dz()),
        Axis::Lateral => ((0..grid.n_x).map(|ix| db[grid.index(ix, pz)]).collect(), px, grid.dx()),
    };
    let level = profile[pos] + HALF_AMPLITUDE_DB;
    let crossing = |dir: i64| -> Option<f64> {
        let mut i = pos as i64;
        loop {
            let j = i + dir;
            if j < 0 || j >= profile.len() as i64 {
                return None;
            }
            let (a, b) = (profile[i as usize], profile[j as usize]);
            if b <= level {
                let frac = (a - level) / (a - b);
                return Some(i as f64 + dir as f64 * frac);
            }
            i = j;
        }
    };
    match (crossing(-1), crossing(1)) {
        (Some(l), Some(r)) => Ok((r - l) * spacing * 1e3),
        _ => Err(Error::Degenerate(format!(
            "-6 dB crossings of the {axis:?} profile not found inside the image"
        ))),
    }
}

fn masked<'a>(env: &'a [f64], mask: &'a [bool]) -> impl Iterator<Item = f64> + Clone + 'a {
    env.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v)
}

fn mean_var(v: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = v.clone().count();
    let mean = v.clone().sum::<f64>() / n as f64;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var, n)
}

fn check_masks(env: &[f64], a: &[bool], b: &[bool]) -> Result<()> {
    check_len("mask length", env.len(), a.len())?;
    check_len("mask length", env.len(), b.len())?;
    if !a.iter().any(|m| *m) || !b.iter().any(|m| *m) {
        return Err(Error::Degenerate("empty region mask".into()));
    }
    if a.iter().zip(b).any(|(x, y)| *x && *y) {
        return Err(Error::config("inside and outside masks overlap"));
    }
    Ok(())
}

/// `10 log10(|mu_in - mu_out|^2 / ((var_in + var_out) / 2))` with population
/// variances. Equal means give `-inf`.
pub fn cnr(env: &[f64], inside: &[bool], outside: &[bool]) -> Result<f64> {
    check_masks(env, inside, outside)?;
    let (mi, vi, _) = mean_var(masked(env, inside));
    let (mo, vo, _) = mean_var(masked(env, outside));
    let den = 0.5 * (vi + vo);
    if den == 0.0 {
        return Err(Error::Degenerate("CNR undefined for constant regions".into()));
    }
    let num = (mi - mo).powi(2);
    if num == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (num / den).log10())
}

/// Generalized CNR: one minus the overlap of the two normalized histograms
/// over their joint range.
pub fn gcnr(env: &[f64], inside: &[bool], outside: &[bool], bins: usize) -> Result<f64> {
    check_masks(env, inside, outside)?;
    if bins < 2 {
        return Err(Error::config("gCNR needs at least 2 bins"));
    }
    let all = masked(env, inside).chain(masked(env, outside));
    let lo = all.clone().fold(f64::INFINITY, f64::min);
    let hi = all.fold(f64::NEG_INFINITY, f64::max);
    let hist = |mask: &[bool]| {
        let mut h = vec![0u64; bins];
        for v in masked(env, mask) {
            let b = if hi > lo {
                (((v - lo) / (hi - lo)) * bins as f64).floor() as usize
            } else {
                0
            };
            h[b.min(bins - 1)] += 1;
        }
        let n: u64 = h.iter().sum();
        (h, n)
    };
    let ((a, na), (b, nb)) = (hist(inside), hist(outside));
    // integer cross-multiplication keeps the identical-regions case exact
    let shared: u128 = a
        .iter()
        .zip(&b)
        .map(|(&x, &y)| (x as u128 * nb as u128).min(y as u128 * na as u128))
        .sum();
    let overlap = shared as f64 / (na as f64 * nb as f64);
    Ok((1.0 - overlap).clamp(0.0, 1.0))
}

pub const MIN_ROI_PIXELS: usize = 100;

fn roi_values(env: &[f64], roi: &[bool]) -> Result<Vec<f64>> {
    check_len("roi length", env.len(), roi.len())?;
    let v: Vec<f64> = masked(env, roi).collect();
    if v.len() < MIN_ROI_PIXELS {
        return Err(Error::Degenerate(format!(
            "ROI has {} pixels, need at least {MIN_ROI_PIXELS}",
            v.len()
        )));
    }
    Ok(v)
}

/// Mean over standard deviation of a set of samples.
pub fn snr_of(values: &[f64]) -> Result<f64> {
    let (m, v, _) = mean_var(values.iter().copied());
    if v == 0.0 {
        return Err(Error::Degenerate("constant ROI has no speckle SNR".into()));
    }
    Ok(m / v.sqrt())
}

pub fn speckle_snr(env: &[f64], roi: &[bool]) -> Result<f64> {
    snr_of(&roi_values(env, roi)?)
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let p = if lambda < 1.18 {
        // complementary series converges fast for small lambda
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (0..50).map(|k| (-((2 * k + 1) as f64).powi(2) * c).exp()).sum();
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
            })
            .sum();
        2.0 * s
    };
    p.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub scale: f64,
}

/// KS test against a Rayleigh law whose scale is the ML fit
/// `sigma^2 = sum v^2 / 2n`. Uses the asymptotic distribution, which is
/// conservative when the scale is estimated from the same data.
pub fn ks_rayleigh(values: &[f64]) -> Result<KsResult> {
    if values.len() < MIN_ROI_PIXELS {
        return Err(Error::Degenerate(format!(
            "KS test needs at least {MIN_ROI_PIXELS} samples"
        )));
    }
    if values.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::config("Rayleigh samples must be non-negative"));
    }
    let n = values.len() as f64;
    let s2 = values.iter().map(|v| v * v).sum::<f64>() / (2.0 * n);
    if s2 == 0.0 {
        return Err(Error::Degenerate("all-zero ROI".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = 1.0 - (-x * x / (2.0 * s2)).exp();
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q(n.sqrt() * d),
        scale: s2.sqrt(),
    })
}

pub fn ks_rayleigh_pvalue(env: &[f64], roi: &[bool]) -> Result<f64> {
    Ok(ks_rayleigh(&roi_values(env, roi)?)?.p_value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskRole {
    TargetIn,
    ReferenceOut,
    Roi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub label: String,
    pub role: MaskRole,
    pub mask: Vec<bool>,
}

impl RegionMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRow {
    pub label: String,
    pub x_mm: f64,
    pub z_mm: f64,
    pub axial_mm: Option<f64>,
    pub lateral_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub label: String,
    pub cnr_db: f64,
    pub gcnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeckleRow {
    pub label: String,
    pub snr: f64,
    pub ks_p: f64,
    /// `ks_p > 0.05`.
    pub rayleigh_pass: bool,
}

pub const KS_PASS_MARK: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub image_id: String,
    pub resolution: Vec<ResolutionRow>,
    pub contrast: Vec<ContrastRow>,
    pub speckle: Vec<SpeckleRow>,
    pub settings: std::collections::BTreeMap<String, String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    /// One `key=value` line per measurement.
    pub fn to_lines(&self) -> String {
        let mut s = format!("image={}\n", self.image_id);
        for r in &self.resolution {
            s += &format!(
                "fwhm target={} x_mm={:.3} z_mm={:.3} axial_mm={} lateral_mm={}\n",
                r.label,
                r.x_mm,
                r.z_mm,
                fmt_opt(r.axial_mm),
                fmt_opt(r.lateral_mm)
            );
        }
        for c in &self.contrast {
            s += &format!("contrast lesion={} cnr_db={:.4} gcnr={:.4}\n", c.label, c.cnr_db, c.gcnr);
        }
        for k in &self.speckle {
            s += &format!(
                "speckle roi={} snr={:.4} ks_p={:.4} p_gt_0.05={}\n",
                k.label, k.snr, k.ks_p, k.rayleigh_pass
            );
        }
        s
    }

    /// Columns: `kind,label,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,label,metric,value\n");
        for r in &self.resolution {
            s += &format!("fwhm,{},axial_mm,{}\n", r.label, fmt_opt(r.axial_mm));
            s += &format!("fwhm,{},lateral_mm,{}\n", r.label, fmt_opt(r.lateral_mm));
        }
        for c in &self.contrast {
            s += &format!("contrast,{},cnr_db,{}\n", c.label, c.cnr_db);
            s += &format!("contrast,{},gcnr,{}\n", c.label, c.gcnr);
        }
        for k in &self.speckle {
            s += &format!("speckle,{},snr,{}\n", k.label, k.snr);
            s += &format!("speckle,{},ks_p,{}\n", k.label, k.ks_p);
            s += &format!("speckle,{},p_gt_0.05,{}\n", k.label, k.rayleigh_pass as u8);
        }
        s
    }
}
