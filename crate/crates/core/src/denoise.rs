//! Denoisers used as the chain's prior: `(x_t, sigma_t) -> x_theta`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use faer::{Mat, MatRef, Side};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::spectral::DenseMatrix;

/// Pure map from a noisy pixel image and its noise level to a clean estimate.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>>;
}

/// Closure adapter, mostly for tests and oracles.
pub struct FnDenoiser<F>(pub F);

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>> + Send + Sync,
{
    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        (self.0)(x, sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Exponential,
    Gaussian,
}

impl Kernel {
    fn eval(&self, d: f64, length: f64) -> f64 {
        if length == 0.0 {
            return if d == 0.0 { 1.0 } else { 0.0 };
        }
        match self {
            Kernel::Exponential => (-d.abs() / length).exp(),
            Kernel::Gaussian => (-0.5 * (d / length).powi(2)).exp(),
        }
    }
}

#[derive(Debug, Clone)]
enum Prior {
    Diagonal(Vec<f64>),
    Separable {
        n_z: usize,
        n_x: usize,
        qz: Mat<f64>,
        qx: Mat<f64>,
        lz: Vec<f64>,
        lx: Vec<f64>,
    },
}

/// Exact MMSE denoiser `Sigma (Sigma + sigma^2 I)^{-1} x` for a zero-mean
/// Gaussian prior with diagonal or separable (`Sigma_x ⊗ Sigma_z`) covariance.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    prior: Prior,
}

fn eigen(m: &DenseMatrix, what: &str) -> Result<(Mat<f64>, Vec<f64>)> {
    let f = m.to_faer();
    for i in 0..m.rows {
        for j in 0..i {
            if (m.get(i, j) - m.get(j, i)).abs() > 1e-12 * (1.0 + m.get(i, j).abs()) {
                return Err(Error::config(format!("{what} covariance is not symmetric")));
            }
        }
    }
    let evd = f
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::NonConvergence(format!("{e:?}")))?;
    let vals: Vec<f64> = (0..m.rows).map(|i| evd.S()[i]).collect();
    let max = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if vals.iter().any(|&v| v < -1e-10 * max.max(f64::MIN_POSITIVE)) {
        return Err(Error::config(format!("{what} covariance is not positive semidefinite")));
    }
    Ok((evd.U().to_owned(), vals.into_iter().map(|v| v.max(0.0)).collect()))
}

impl GaussianDenoiser {
    pub fn diagonal(variances: Vec<f64>) -> Result<Self> {
        if variances.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("prior variances must be finite and non-negative"));
        }
        Ok(Self {
            prior: Prior::Diagonal(variances),
        })
    }

    /// `axial` is `n_z x n_z`, `lateral` is `n_x x n_x`.
    pub fn separable(axial: &DenseMatrix, lateral: &DenseMatrix) -> Result<Self> {
        let (qz, lz) = eigen(axial, "axial")?;
        let (qx, lx) = eigen(lateral, "lateral")?;
        Ok(Self {
            prior: Prior::Separable {
                n_z: axial.rows,
                n_x: lateral.rows,
                qz,
                qx,
                lz,
                lx,
            },
        })
    }

    /// Stationary separable prior on a regular grid with correlation lengths
    /// in metres.
    pub fn stationary(
        n_z: usize,
        n_x: usize,
        dz: f64,
        dx: f64,
        variance: f64,
        axial_length: f64,
        lateral_length: f64,
        kernel: Kernel,
    ) -> Result<Self> {
        if !(variance > 0.0) || axial_length < 0.0 || lateral_length < 0.0 {
            return Err(Error::config("stationary prior needs positive variance and non-negative lengths"));
        }
        let az = DenseMatrix::from_fn(n_z, n_z, |i, j| variance * kernel.eval((i as f64 - j as f64) * dz, axial_length));
        let ax = DenseMatrix::from_fn(n_x, n_x, |i, j| kernel.eval((i as f64 - j as f64) * dx, lateral_length));
        Self::separable(&az, &ax)
    }

    pub fn dim(&self) -> usize {
        match &self.prior {
            Prior::Diagonal(v) => v.len(),
            Prior::Separable { n_z, n_x, .. } => n_z * n_x,
        }
    }

    /// Explicit prior covariance (small grids only).
    pub fn covariance(&self) -> DenseMatrix {
        match &self.prior {
            Prior::Diagonal(v) => DenseMatrix::from_fn(v.len(), v.len(), |i, j| if i == j { v[i] } else { 0.0 }),
            Prior::Separable {
                n_z, qz, qx, lz, lx, ..
            } => {
                let sz = qz * Mat::from_fn(lz.len(), lz.len(), |i, j| if i == j { lz[i] } else { 0.0 }) * qz.transpose();
                let sx = qx * Mat::from_fn(lx.len(), lx.len(), |i, j| if i == j { lx[i] } else { 0.0 }) * qx.transpose();
                let n = self.dim();
                DenseMatrix::from_fn(n, n, |a, b| {
                    let (ia, za) = (a / n_z, a % n_z);
                    let (ib, zb) = (b / n_z, b % n_z);
                    sx[(ia, ib)] * sz[(za, zb)]
                })
            }
        }
    }
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_len("gaussian denoiser input", self.dim(), x.len())?;
        let s2 = sigma * sigma;
        let gain = |lam: f64| if lam == 0.0 { 0.0 } else { lam / (lam + s2) };
        match &self.prior {
            Prior::Diagonal(v) => Ok(x.iter().zip(v).map(|(xi, &l)| gain(l) * xi).collect()),
            Prior::Separable {
                n_z,
                n_x,
                qz,
                qx,
                lz,
                lx,
            } => {
                let xm = MatRef::from_column_major_slice(x, *n_z, *n_x);
                let mut t = qz.transpose() * xm * qx;
                for j in 0..*n_x {
                    for i in 0..*n_z {
                        t[(i, j)] *= gain(lz[i] * lx[j]);
                    }
                }
                let out = qz * t * qx.transpose();
                let mut v = Vec::with_capacity(x.len());
                for j in 0..*n_x {
                    for i in 0..*n_z {
                        v.push(out[(i, j)]);
                    }
                }
                Ok(v)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Wavelet {
    Haar,
    #[default]
    Db2,
}

impl Wavelet {
    fn lowpass(&self) -> Vec<f64> {
        match self {
            Wavelet::Haar => vec![std::f64::consts::FRAC_1_SQRT_2; 2],
            Wavelet::Db2 => {
                let s3 = 3f64.sqrt();
                let k = 4.0 * 2f64.sqrt();
                vec![(1.0 + s3) / k, (3.0 + s3) / k, (3.0 - s3) / k, (1.0 - s3) / k]
            }
        }
    }
}

struct Filters {
    h: Vec<f64>,
    g: Vec<f64>,
}

impl Filters {
    fn new(w: Wavelet) -> Self {
        let h = w.lowpass();
        let l = h.len();
        let g = (0..l).map(|k| if k % 2 == 0 { h[l - 1 - k] } else { -h[l - 1 - k] }).collect();
        Self { h, g }
    }

    /// Periodic analysis of `src` (len n, even) into `[approx | detail]`.
    fn forward(&self, src: &[f64], dst: &mut [f64]) {
        let n = src.len();
        let half = n / 2;
        for i in 0..half {
            let (mut a, mut d) = (0.0, 0.0);
            for k in 0..self.h.len() {
                let x = src[(2 * i + k) % n];
                a += self.h[k] * x;
                d += self.g[k] * x;
            }
            dst[i] = a;
            dst[half + i] = d;
        }
    }

    fn inverse(&self, src: &[f64], dst: &mut [f64]) {
        let n = src.len();
        let half = n / 2;
        dst.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..half {
            let (a, d) = (src[i], src[half + i]);
            for k in 0..self.h.len() {
                dst[(2 * i + k) % n] += self.h[k] * a + self.g[k] * d;
            }
        }
    }
}

/// Orthogonal 2-D wavelet shrinkage with soft thresholding at `k sigma`.
#[derive(Debug, Clone)]
pub struct WaveletDenoiser {
    pub n_z: usize,
    pub n_x: usize,
    pub levels: usize,
    pub threshold: f64,
    pub wavelet: Wavelet,
}

impl WaveletDenoiser {
    pub fn new(n_z: usize, n_x: usize, levels: usize, threshold: f64, wavelet: Wavelet) -> Result<Self> {
        let block = 1usize << levels;
        if levels == 0 || n_z % block != 0 || n_x % block != 0 {
            return Err(Error::config(format!(
                "grid {n_z}x{n_x} is not divisible by 2^{levels}"
            )));
        }
        if !(threshold >= 0.0) {
            return Err(Error::config("wavelet threshold must be non-negative"));
        }
        Ok(Self {
            n_z,
            n_x,
            levels,
            threshold,
            wavelet,
        })
    }

    // Image is column-major n_z x n_x: element (iz, ix) at ix * n_z + iz.
    fn pass(&self, img: &mut [f64], forward: bool) {
        let f = Filters::new(self.wavelet);
        let (nz, nx) = (self.n_z, self.n_x);
        let levels: Vec<usize> = if forward {
            (0..self.levels).collect()
        } else {
            (0..self.levels).rev().collect()
        };
        let mut buf_in = vec![0.0; nz.max(nx)];
        let mut buf_out = vec![0.0; nz.max(nx)];
        for lvl in levels {
            let (cz, cx) = (nz >> lvl, nx >> lvl);
            let mut axial = |img: &mut [f64]| {
                for ix in 0..cx {
                    let col = &mut img[ix * nz..ix * nz + cz];
                    buf_in[..cz].copy_from_slice(col);
                    if forward {
                        f.forward(&buf_in[..cz], &mut buf_out[..cz]);
                    } else {
                        f.inverse(&buf_in[..cz], &mut buf_out[..cz]);
                    }
                    col.copy_from_slice(&buf_out[..cz]);
                }
            };
            let lateral = |img: &mut [f64], bi: &mut [f64], bo: &mut [f64]| {
                for iz in 0..cz {
                    for ix in 0..cx {
                        bi[ix] = img[ix * nz + iz];
                    }
                    if forward {
                        f.forward(&bi[..cx], &mut bo[..cx]);
                    } else {
                        f.inverse(&bi[..cx], &mut bo[..cx]);
                    }
                    for ix in 0..cx {
                        img[ix * nz + iz] = bo[ix];
                    }
                }
            };
            let mut bi = vec![0.0; cx];
            let mut bo = vec![0.0; cx];
            if forward {
                axial(img);
                lateral(img, &mut bi, &mut bo);
            } else {
                lateral(img, &mut bi, &mut bo);
                axial(img);
            }
        }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        self.pass(&mut v, true);
        v
    }

    pub fn inverse_transform(&self, c: &[f64]) -> Vec<f64> {
        let mut v = c.to_vec();
        self.pass(&mut v, false);
        v
    }
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

impl Denoiser for WaveletDenoiser {
    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_len("wavelet denoiser input", self.n_z * self.n_x, x.len())?;
        let t = self.threshold * sigma;
        let mut c = self.transform(x);
        let (az, ax) = (self.n_z >> self.levels, self.n_x >> self.levels);
        for ix in 0..self.n_x {
            for iz in 0..self.n_z {
                if iz >= az || ix >= ax {
                    let k = ix * self.n_z + iz;
                    c[k] = soft(c[k], t);
                }
            }
        }
        Ok(self.inverse_transform(&c))
    }
}

pub const REQUEST_MAGIC: &[u8; 4] = b"DNZ1";
pub const RESPONSE_MAGIC: &[u8; 4] = b"DNZ2";

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_pixels(r: &mut impl Read, count: usize) -> std::io::Result<Vec<f64>> {
    let mut raw = vec![0u8; count * 8];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_pixels(w: &mut impl Write, pixels: &[f64]) -> std::io::Result<()> {
    for p in pixels {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Protocol(format!(
            "expected magic {:?}, got {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    Ok(())
}

pub fn write_request(w: &mut impl Write, n_z: usize, n_x: usize, sigma: f64, pixels: &[f64]) -> Result<()> {
    check_len("request pixels", n_z * n_x, pixels.len())?;
    w.write_all(REQUEST_MAGIC)?;
    w.write_all(&(n_z as u32).to_le_bytes())?;
    w.write_all(&(n_x as u32).to_le_bytes())?;
    w.write_all(&sigma.to_le_bytes())?;
    write_pixels(w, pixels)?;
    w.flush()?;
    Ok(())
}

/// Server side: `(n_z, n_x, sigma, pixels)`.
pub fn read_request(r: &mut impl Read) -> Result<(usize, usize, f64, Vec<f64>)> {
    expect_magic(r, REQUEST_MAGIC)?;
    let n_z = read_u32(r)? as usize;
    let n_x = read_u32(r)? as usize;
    let mut s = [0u8; 8];
    r.read_exact(&mut s)?;
    let pixels = read_pixels(r, n_z * n_x)?;
    Ok((n_z, n_x, f64::from_le_bytes(s), pixels))
}

pub fn write_response(w: &mut impl Write, n_z: usize, n_x: usize, pixels: &[f64]) -> Result<()> {
    check_len("response pixels", n_z * n_x, pixels.len())?;
    w.write_all(RESPONSE_MAGIC)?;
    w.write_all(&(n_z as u32).to_le_bytes())?;
    w.write_all(&(n_x as u32).to_le_bytes())?;
    write_pixels(w, pixels)?;
    w.flush()?;
    Ok(())
}

pub fn read_response(r: &mut impl Read) -> Result<(usize, usize, Vec<f64>)> {
    expect_magic(r, RESPONSE_MAGIC)?;
    let n_z = read_u32(r)? as usize;
    let n_x = read_u32(r)? as usize;
    let pixels = read_pixels(r, n_z * n_x)?;
    Ok((n_z, n_x, pixels))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "transport", rename_all = "lowercase")]
pub enum Endpoint {
    /// `host:port` of a listening server.
    Tcp { address: String },
    /// Child process speaking the protocol on stdin/stdout.
    Command {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

type Frame = Result<(usize, usize, Vec<f64>)>;

struct Connection {
    writer: Box<dyn Write + Send>,
    responses: Receiver<Frame>,
    child: Option<Child>,
    broken: bool,
}

/// Denoiser served by another process. Calls are serialized; a timeout or
/// protocol error leaves the connection unusable.
pub struct ExternalDenoiser {
    n_z: usize,
    n_x: usize,
    timeout: Duration,
    conn: Mutex<Connection>,
}

fn spawn_reader(mut r: impl Read + Send + 'static) -> Receiver<Frame> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || loop {
        let frame = read_response(&mut r);
        let stop = frame.is_err();
        if tx.send(frame).is_err() || stop {
            break;
        }
    });
    rx
}

impl ExternalDenoiser {
    pub fn connect(endpoint: &Endpoint, n_z: usize, n_x: usize, timeout_ms: u64) -> Result<Self> {
        let conn = match endpoint {
            Endpoint::Tcp { address } => {
                let stream = TcpStream::connect(address)?;
                stream.set_nodelay(true)?;
                let reader = BufReader::new(stream.try_clone()?);
                Connection {
                    writer: Box::new(BufWriter::new(stream)),
                    responses: spawn_reader(reader),
                    child: None,
                    broken: false,
                }
            }
            Endpoint::Command { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Connection {
                    writer: Box::new(BufWriter::new(stdin)),
                    responses: spawn_reader(BufReader::new(stdout)),
                    child: Some(child),
                    broken: false,
                }
            }
        };
        Ok(Self {
            n_z,
            n_x,
            timeout: Duration::from_millis(timeout_ms),
            conn: Mutex::new(conn),
        })
    }
}

impl Denoiser for ExternalDenoiser {
    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_len("external denoiser input", self.n_z * self.n_x, x.len())?;
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if conn.broken {
            return Err(Error::Protocol("connection unusable after an earlier failure".into()));
        }
        let result = (|| {
            write_request(&mut conn.writer, self.n_z, self.n_x, sigma, x)?;
            let (n_z, n_x, pixels) = match conn.responses.recv_timeout(self.timeout) {
                Ok(frame) => frame?,
                Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(self.timeout.as_millis() as u64)),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Protocol("denoiser closed the connection".into()))
                }
            };
            if (n_z, n_x) != (self.n_z, self.n_x) {
                return Err(Error::ShapeMismatch {
                    expected: vec![self.n_z, self.n_x],
                    got: vec![n_z, n_x],
                });
            }
            Ok(pixels)
        })();
        if result.is_err() {
            conn.broken = true;
        }
        result
    }
}

impl Drop for ExternalDenoiser {
    fn drop(&mut self) {
        if let Ok(conn) = self.conn.get_mut() {
            if let Some(child) = conn.child.as_mut() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorSpec {
    Diagonal {
        variance: f64,
    },
    Separable {
        variance: f64,
        axial_length: f64,
        lateral_length: f64,
        #[serde(default)]
        kernel: Kernel,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DenoiserSpec {
    GaussianAnalytic {
        prior: PriorSpec,
    },
    WaveletShrinkage {
        #[serde(default = "default_levels")]
        levels: usize,
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default)]
        wavelet: Wavelet,
    },
    External {
        endpoint: Endpoint,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_levels() -> usize {
    3
}

fn default_threshold() -> f64 {
    3.0
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::WaveletShrinkage {
            levels: default_levels(),
            threshold: default_threshold(),
            wavelet: Wavelet::default(),
        }
    }
}

impl DenoiserSpec {
    /// Instantiate for a grid of `n_z x n_x` pixels with spacing `dz`, `dx`.
    pub fn build(&self, n_z: usize, n_x: usize, dz: f64, dx: f64) -> Result<Box<dyn Denoiser>> {
        Ok(match self {
            DenoiserSpec::GaussianAnalytic { prior } => match prior {
                PriorSpec::Diagonal { variance } => Box::new(GaussianDenoiser::diagonal(vec![*variance; n_z * n_x])?),
                PriorSpec::Separable {
                    variance,
                    axial_length,
                    lateral_length,
                    kernel,
                } => Box::new(GaussianDenoiser::stationary(
                    n_z,
                    n_x,
                    dz,
                    dx,
                    *variance,
                    *axial_length,
                    *lateral_length,
                    *kernel,
                )?),
            },
            DenoiserSpec::WaveletShrinkage {
                levels,
                threshold,
                wavelet,
            } => Box::new(WaveletDenoiser::new(n_z, n_x, *levels, *threshold, *wavelet)?),
            DenoiserSpec::External { endpoint, timeout_ms } => {
                Box::new(ExternalDenoiser::connect(endpoint, n_z, n_x, *timeout_ms)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use faer::linalg::solvers::Solve;
    use std::net::TcpListener;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn energy(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum()
    }

    #[test]
    fn gaussian_limits() {
        let d = GaussianDenoiser::stationary(8, 4, 1e-4, 2e-4, 2.0, 3e-4, 4e-4, Kernel::Exponential).unwrap();
        let x = noise(32, 1);
        let near = d.denoise(&x, 1e-9).unwrap();
        assert!(x.iter().zip(&near).all(|(a, b)| (a - b).abs() < 1e-9));
        let far = d.denoise(&x, 1e9).unwrap();
        assert!(far.iter().all(|v| v.abs() < 1e-12));
        let id = GaussianDenoiser::diagonal(vec![1.0; 5]).unwrap();
        let out = id.denoise(&[2.0, -1.0, 0.0, 4.0, 1.0], 0.5).unwrap();
        assert_eq!(out[0], 2.0 / 1.25);
        assert_eq!(out[3], 4.0 / 1.25);
    }

    #[test]
    fn separable_matches_dense_formula() {
        let d = GaussianDenoiser::stationary(6, 5, 1.0, 1.0, 1.5, 2.0, 1.0, Kernel::Exponential).unwrap();
        let sigma: f64 = 0.7;
        let cov = d.covariance().to_faer();
        let n = 30;
        let x = noise(n, 2);
        let reg = &cov + Mat::<f64>::identity(n, n) * faer::Scale(sigma * sigma);
        let xm = Mat::from_fn(n, 1, |i, _| x[i]);
        let sol = reg.partial_piv_lu().solve(&xm);
        let expect = &cov * sol;
        let got = d.denoise(&x, sigma).unwrap();
        for i in 0..n {
            assert!((got[i] - expect[(i, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn non_psd_rejected() {
        let bad = DenseMatrix::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 2.0 });
        assert!(GaussianDenoiser::separable(&bad, &DenseMatrix::identity(2)).is_err());
        assert!(GaussianDenoiser::diagonal(vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn wavelet_round_trip_and_orthogonality() {
        for w in [Wavelet::Haar, Wavelet::Db2] {
            let d = WaveletDenoiser::new(16, 8, 3, 3.0, w).unwrap();
            let x = noise(128, 3);
            let c = d.transform(&x);
            assert!((energy(&c) - energy(&x)).abs() < 1e-10 * energy(&x));
            let back = d.denoise(&x, 0.0).unwrap();
            assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-10));
        }
        assert!(WaveletDenoiser::new(12, 8, 3, 3.0, Wavelet::Db2).is_err());
    }

    #[test]
    fn wavelet_suppresses_pure_noise() {
        let d = WaveletDenoiser::new(64, 64, 4, 10.0, Wavelet::Db2).unwrap();
        let x = noise(4096, 4);
        let out = d.denoise(&x, 1.0).unwrap();
        assert!(energy(&out) < 0.05 * energy(&x));
    }

    #[test]
    fn wavelet_reduces_mse_on_piecewise_constant() {
        let d = WaveletDenoiser::new(32, 32, 3, 3.0, Wavelet::Haar).unwrap();
        let truth: Vec<f64> = (0..1024)
            .map(|n| {
                let (ix, iz) = (n / 32, n % 32);
                if (8..24).contains(&ix) && (4..20).contains(&iz) {
                    4.0
                } else {
                    -1.0
                }
            })
            .collect();
        let sigma = 0.8;
        let nz = noise(1024, 5);
        let noisy: Vec<f64> = truth.iter().zip(&nz).map(|(t, e)| t + sigma * e).collect();
        let out = d.denoise(&noisy, sigma).unwrap();
        let mse = |v: &[f64]| v.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        assert!(mse(&out) < mse(&noisy));
    }

    fn serve(listener: TcpListener, reply: impl Fn(usize, usize, Vec<f64>) -> (usize, usize, Vec<f64>) + Send + 'static) {
        std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut r = BufReader::new(stream.try_clone().unwrap());
            let mut w = stream;
            while let Ok((nz, nx, _sigma, px)) = read_request(&mut r) {
                let (a, b, p) = reply(nz, nx, px);
                if write_response(&mut w, a, b, &p).is_err() {
                    break;
                }
            }
        });
    }

    #[test]
    fn echo_server_is_identity_and_bit_exact() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        serve(listener, |a, b, p| (a, b, p));
        let d = ExternalDenoiser::connect(&Endpoint::Tcp { address: addr }, 4, 3, 5000).unwrap();
        let mut x = noise(12, 6);
        x[0] = f64::MIN_POSITIVE;
        x[1] = -0.0;
        for _ in 0..3 {
            let out = d.denoise(&x, 0.25).unwrap();
            assert!(out.iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        serve(listener, |a, b, p| (b, a, p));
        let d = ExternalDenoiser::connect(&Endpoint::Tcp { address: addr }, 4, 3, 5000).unwrap();
        let err = d.denoise(&noise(12, 7), 0.1).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            std::thread::sleep(Duration::from_millis(1500));
            drop(s);
        });
        let d = ExternalDenoiser::connect(&Endpoint::Tcp { address: addr }, 2, 2, 100).unwrap();
        assert!(matches!(d.denoise(&[0.0; 4], 1.0).unwrap_err(), Error::Timeout(100)));
    }

    #[test]
    fn bad_magic_is_protocol_error() {
        let mut buf: &[u8] = b"XXXX\0\0\0\0";
        assert!(matches!(read_response(&mut buf).unwrap_err(), Error::Protocol(_)));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let text = r#"
kind = "gaussian-analytic"
[prior]
kind = "separable"
variance = 1.0
axial_length = 1e-4
lateral_length = 3e-4
"#;
        let spec: DenoiserSpec = toml::from_str(text).unwrap();
        let d = spec.build(8, 4, 1e-4, 1e-4).unwrap();
        assert_eq!(d.denoise(&[0.0; 32], 0.3).unwrap(), vec![0.0; 32]);
        let ext: DenoiserSpec = toml::from_str(
            "kind = \"external\"\n[endpoint]\ntransport = \"command\"\nprogram = \"cat\"\n",
        )
        .unwrap();
        assert!(matches!(ext, DenoiserSpec::External { timeout_ms: 30000, .. }));
    }
}
