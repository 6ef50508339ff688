//! Aggregation of independent chain outputs, the empirical variance model
//! `Var = p^(2 beta)`, and the fused mean/variance display.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBundle {
    pub images: Vec<Vec<f64>>,
    /// Chain index of each image; with the base seed this regenerates it.
    pub chains: Vec<u64>,
    pub seed: u64,
    pub config_hash: String,
}

impl SampleBundle {
    pub fn new(images: Vec<Vec<f64>>, seed: u64, config_hash: impl Into<String>) -> Result<Self> {
        let chains = (0..images.len() as u64).collect();
        let b = Self {
            images,
            chains,
            seed,
            config_hash: config_hash.into(),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::config("sample bundle is empty"))?;
        for im in &self.images {
            check_len("bundle image", first.len(), im.len())?;
        }
        check_len("bundle chain list", self.images.len(), self.chains.len())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.images.first().map_or(0, |i| i.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mean: Vec<f64>,
    /// Unbiased sample variance.
    pub variance: Vec<f64>,
    /// `sqrt(variance)`, the amplitude-like image that gets displayed.
    pub std: Vec<f64>,
}

fn sorted_column(images: &[Vec<f64>], n: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(images.iter().map(|im| im[n]));
    buf.sort_by(|a, b| a.total_cmp(b));
}

/// Pixelwise mean. Values are summed in sorted order so the result does not
/// depend on sample order.
pub fn mean(bundle: &SampleBundle) -> Result<Vec<f64>> {
    bundle.validate()?;
    let m = bundle.len() as f64;
    let mut buf = Vec::with_capacity(bundle.len());
    Ok((0..bundle.pixels())
        .map(|n| {
            sorted_column(&bundle.images, n, &mut buf);
            buf.iter().sum::<f64>() / m
        })
        .collect())
}

pub fn aggregate(bundle: &SampleBundle) -> Result<Aggregate> {
    bundle.validate()?;
    if bundle.len() < 2 {
        return Err(Error::config("variance needs at least 2 samples"));
    }
    let m = bundle.len() as f64;
    let n_pix = bundle.pixels();
    let mut mean = Vec::with_capacity(n_pix);
    let mut variance = Vec::with_capacity(n_pix);
    let mut buf = Vec::with_capacity(bundle.len());
    for n in 0..n_pix {
        sorted_column(&bundle.images, n, &mut buf);
        let mu = buf.iter().sum::<f64>() / m;
        let var = buf.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1.0);
        mean.push(mu);
        variance.push(var);
    }
    let std = variance.iter().map(|v| v.sqrt()).collect();
    Ok(Aggregate { mean, variance, std })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaFit {
    pub beta: f64,
    pub intercept: f64,
    /// RMS residual of the log-log fit.
    pub residual: f64,
    pub pixels: usize,
}

/// Least-squares fit of `log Var = 2 beta log p + c` over pixels whose `p`
/// lies above its 20th percentile.
pub fn beta_model_fit(bundle: &SampleBundle, p: &[f64]) -> Result<BetaFit> {
    if bundle.len() < 5 {
        return Err(Error::config("beta fit needs at least 5 samples"));
    }
    check_len("echogenicity map", bundle.pixels(), p.len())?;
    let agg = aggregate(bundle)?;
    let mut sorted: Vec<f64> = p.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let cut = sorted[((sorted.len() as f64 * 0.2).floor() as usize).min(sorted.len() - 1)];
    let pts: Vec<(f64, f64)> = p
        .iter()
        .zip(&agg.variance)
        .filter(|(&pi, &v)| pi > cut && pi > 0.0 && v > 0.0)
        .map(|(&pi, &v)| (pi.ln(), v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Degenerate("too few pixels above the echogenicity cut".into()));
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("echogenicity is constant on the fit support".into()));
    }
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts.iter().map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>() / n).sqrt();
    Ok(BetaFit {
        beta: slope / 2.0,
        intercept,
        residual,
        pixels: pts.len(),
    })
}

/// `Var^(1 / 2 beta)`.
pub fn echogenicity_from_variance(variance: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::config("beta must be positive"));
    }
    Ok(variance.iter().map(|v| v.max(0.0).powf(1.0 / (2.0 * beta))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    #[default]
    Jet,
}

impl Colormap {
    pub fn rgb(&self, t: f64) -> [f64; 3] {
        let t = t.clamp(0.0, 1.0);
        match self {
            Colormap::Jet => {
                let ch = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
                [ch(3.0), ch(2.0), ch(1.0)]
            }
        }
    }
}


const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

// exact inverse of the forward matrix so conversions round-trip tightly
fn xyz_to_rgb() -> &'static [[f64; 3]; 3] {
    static INV: std::sync::OnceLock<[[f64; 3]; 3]> = std::sync::OnceLock::new();
    INV.get_or_init(|| {
        let m = RGB_TO_XYZ;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let mut inv = [[0.0; 3]; 3];
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
            }
        }
        inv
    })
}

/// Reference white: the XYZ of sRGB (1, 1, 1), so grays map to a = b = 0.
fn white() -> [f64; 3] {
    RGB_TO_XYZ.map(|r| r[0] + r[1] + r[2])
}

fn mat3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    let d: f64 = 6.0 / 29.0;
    if t > d.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * d * d) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    let d: f64 = 6.0 / 29.0;
    if t > d {
        t.powi(3)
    } else {
        3.0 * d * d * (t - 4.0 / 29.0)
    }
}

/// sRGB (D65) to CIELAB.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [x, y, z] = mat3(&RGB_TO_XYZ, rgb.map(srgb_to_linear));
    let w = white();
    let (fx, fy, fz) = (lab_f(x / w[0]), lab_f(y / w[1]), lab_f(z / w[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIELAB to unclamped sRGB.
pub fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let w = white();
    let (x, y, z) = (w[0] * lab_f_inv(fx), w[1] * lab_f_inv(fy), w[2] * lab_f_inv(fz));
    mat3(xyz_to_rgb(), [x, y, z]).map(linear_to_srgb)
}

fn in_gamut(rgb: [f64; 3]) -> bool {
    rgb.iter().all(|c| (-1e-12..=1.0 + 1e-12).contains(c))
}

/// Largest chroma scale in `[0, 1]` keeping `(L, s a, s b)` inside sRGB.
fn fit_chroma(l: f64, a: f64, b: f64) -> [f64; 3] {
    if in_gamut(lab_to_srgb([l, a, b])) {
        return lab_to_srgb([l, a, b]).map(|c| c.clamp(0.0, 1.0));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if in_gamut(lab_to_srgb([l, mid * a, mid * b])) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lab_to_srgb([l, lo * a, lo * b]).map(|c| c.clamp(0.0, 1.0))
}

/// Gray level of a dB image: linear map of `[-DR, 0]` to `[0, 1]`.
pub fn gray_level(db: f64, dynamic_range_db: f64) -> f64 {
    ((db + dynamic_range_db) / dynamic_range_db).clamp(0.0, 1.0)
}

/// Fused display: lightness from the mean image's gray level, hue from the
/// colormap at the variance level, chroma growing with the variance level
/// and reduced as needed to stay in gamut. Returns `[r, g, b]` per pixel.
pub fn fuse_display(mean_db: &[f64], var_db: &[f64], dynamic_range_db: f64, cmap: Colormap) -> Result<Vec<[f64; 3]>> {
    check_len("fuse inputs", mean_db.len(), var_db.len())?;
    if !(dynamic_range_db > 0.0) {
        return Err(Error::config("dynamic range must be positive"));
    }
    let ok = |v: &f64| (-dynamic_range_db..=0.0).contains(v);
    if let Some(i) = mean_db.iter().chain(var_db).position(|v| !ok(v)) {
        return Err(Error::config(format!(
            "fuse input value at flat index {i} lies outside [-{dynamic_range_db}, 0] dB"
        )));
    }
    Ok(mean_db
        .iter()
        .zip(var_db)
        .map(|(&m, &v)| {
            let g = gray_level(m, dynamic_range_db);
            let l = srgb_to_lab([g; 3])[0];
            let t = gray_level(v, dynamic_range_db);
            if t == 0.0 {
                return [g; 3];
            }
            let [_, a, b] = srgb_to_lab(cmap.rgb(t));
            fit_chroma(l, t * a, t * b)
        })
        .collect())
}
