//! Conditioned spectral-space diffusion chain.
//!
//! Each coordinate `i` of `xbar = V^T x` is updated as
//! `A xbar_t + B ybar + C xbar_theta + D z` with coefficients chosen so that
//! `A + B + C = 1` and `(A s_t)^2 + (B s_y)^2 + D^2 = s_{t-1}^2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoise::Denoiser;
use crate::error::{check_len, Error, Result};
use crate::spectral::{estimate_sigma_d, to_spectral_from_das, FactorMethod, SpectralFactorization, SpectralMeasurement};

/// Retained noise levels, strictly decreasing. The chain runs one step per
/// level and the final step lands on `sigma = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_full: usize,
    pub levels: Vec<f64>,
}

impl NoiseSchedule {
    pub fn it(&self) -> usize {
        self.levels.len()
    }

    pub fn sigma_max(&self) -> f64 {
        self.levels[0]
    }

    /// Noise level the step starting at `levels[k]` moves to.
    pub fn next_level(&self, k: usize) -> f64 {
        self.levels.get(k + 1).copied().unwrap_or(0.0)
    }
}

/// Geometric ladder of `t_full` levels from `sigma_max` down to `sigma_min`,
/// then a uniformly strided subsequence of length `it` keeping both ends.
pub fn make_schedule(t_full: usize, it: usize, sigma_min: f64, sigma_max: f64) -> Result<NoiseSchedule> {
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::config(format!(
            "schedule needs 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
        )));
    }
    if it == 0 || it > t_full {
        return Err(Error::config(format!("schedule needs 1 <= it <= T_full, got it={it}, T_full={t_full}")));
    }
    let ratio = (sigma_min / sigma_max).ln();
    let ladder = |k: usize| {
        if t_full == 1 {
            sigma_max
        } else {
            sigma_max * (ratio * k as f64 / (t_full - 1) as f64).exp()
        }
    };
    let levels = if it == 1 {
        vec![sigma_max]
    } else {
        (0..it)
            .map(|k| {
                let idx = (k as f64 * (t_full - 1) as f64 / (it - 1) as f64).round() as usize;
                ladder(idx)
            })
            .collect()
    };
    Ok(NoiseSchedule { t_full, levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// `s_i = 0` or below the rank threshold.
    Unobserved,
    /// Target level still below the measurement noise.
    Noisy,
    /// Target level at or above the measurement noise.
    Anchored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub branch: Branch,
}

impl StepCoefficients {
    /// `(A s_t)^2 + (B s_y)^2 + D^2`, with the `B` term dropped when unobserved.
    pub fn noise_variance(&self, sigma_t: f64, sigma_y: f64) -> f64 {
        let by = if self.branch == Branch::Unobserved {
            0.0
        } else {
            self.b * sigma_y
        };
        (self.a * sigma_t).powi(2) + by * by + self.d * self.d
    }
}

/// Coefficients for one coordinate from its singular value `s_i`.
pub fn step_coefficients(sigma_t: f64, sigma_prev: f64, s_i: f64, sigma_d: f64, eta: f64, eta_b: f64) -> StepCoefficients {
    let sigma_y = if s_i > 0.0 { sigma_d / s_i } else { f64::INFINITY };
    coefficients_for_noise(sigma_t, sigma_prev, sigma_y, eta, eta_b)
}

/// Same as [`step_coefficients`], keyed by `sigma_y = sigma_d / s_i`
/// (infinite for an unobserved coordinate).
pub fn coefficients_for_noise(sigma_t: f64, sigma_prev: f64, sigma_y: f64, eta: f64, eta_b: f64) -> StepCoefficients {
    debug_assert!(sigma_prev < sigma_t);
    if !sigma_y.is_finite() {
        let a = (1.0 - eta * eta).sqrt() * sigma_prev / sigma_t;
        StepCoefficients {
            a,
            b: 0.0,
            c: 1.0 - a,
            d: eta * sigma_prev,
            branch: Branch::Unobserved,
        }
    } else if sigma_prev < sigma_y {
        let b = (1.0 - eta * eta).sqrt() * sigma_prev / sigma_y;
        StepCoefficients {
            a: 0.0,
            b,
            c: 1.0 - b,
            d: eta * sigma_prev,
            branch: Branch::Noisy,
        }
    } else {
        let radicand = sigma_prev * sigma_prev - eta_b * eta_b * sigma_y * sigma_y;
        assert!(radicand >= 0.0, "negative radicand {radicand}");
        StepCoefficients {
            a: 0.0,
            b: eta_b,
            c: 1.0 - eta_b,
            d: radicand.sqrt(),
            branch: Branch::Anchored,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Drus,
    Deno,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Drus => "drus",
            Mode::Deno => "deno",
        }
    }
}

/// How raw data is brought to the sampler's unit scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Normalization {
    /// Scale so a quantile of `|B y|` maps to `s_1`, i.e. the image estimate
    /// `B y / s_1` peaks near one.
    Percentile { quantile: f64 },
    /// Multiply data by a fixed factor.
    Fixed { scale: f64 },
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::Percentile { quantile: 0.999 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub eta: f64,
    pub eta_b: f64,
    /// Noise level of `B y` in data units; estimated when absent.
    pub sigma_d: Option<f64>,
    pub it: usize,
    pub t_full: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
    pub mode: Mode,
    pub samples: usize,
    pub normalization: Normalization,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            eta: 0.85,
            eta_b: 1.0,
            sigma_d: None,
            it: 50,
            t_full: 1000,
            sigma_min: 1e-4,
            sigma_max: 1.0,
            seed: 0,
            mode: Mode::Drus,
            samples: 1,
            normalization: Normalization::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) || !(0.0..=1.0).contains(&self.eta_b) {
            return Err(Error::config("eta and eta_b must lie in [0, 1]"));
        }
        if let Some(s) = self.sigma_d {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config("sigma_d must be finite and non-negative"));
            }
        }
        if self.samples == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        match self.normalization {
            Normalization::Percentile { quantile } if !(quantile > 0.0 && quantile <= 1.0) => {
                return Err(Error::config("normalization quantile must lie in (0, 1]"))
            }
            Normalization::Fixed { scale } if !(scale > 0.0 && scale.is_finite()) => {
                return Err(Error::config("normalization scale must be positive"))
            }
            _ => {}
        }
        make_schedule(self.t_full, self.it, self.sigma_min, self.sigma_max).map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_full, self.it, self.sigma_min, self.sigma_max)
    }
}

pub struct ChainState {
    /// Index into the schedule of the current level; the chain is done when
    /// it reaches `schedule.it()`.
    pub t: usize,
    pub xbar: Vec<f64>,
    pub rng: ChaCha8Rng,
}

/// Rng for chain `chain` of a run seeded with `seed`.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

pub fn init_state(meas: &SpectralMeasurement, schedule: &NoiseSchedule, mut rng: ChaCha8Rng) -> ChainState {
    let st = schedule.sigma_max();
    let xbar = meas
        .ybar
        .iter()
        .zip(&meas.sigma_y)
        .zip(&meas.observed)
        .map(|((&yb, &sy), &obs)| {
            let z: f64 = rng.sample(StandardNormal);
            if obs && sy <= st {
                yb + (st * st - sy * sy).sqrt() * z
            } else {
                st * z
            }
        })
        .collect();
    ChainState { t: 0, xbar, rng }
}

/// What a step exposes to an observer.
pub struct StepTrace<'a> {
    pub step: usize,
    pub sigma_t: f64,
    pub sigma_prev: f64,
    pub sigma_y: &'a [f64],
    pub coefficients: &'a [StepCoefficients],
}

pub type TraceHook<'h> = &'h mut dyn FnMut(&StepTrace<'_>);

/// Everything a chain needs besides its rng: the scaled measurement, the
/// schedule and the scale that maps chain units back to data units.
#[derive(Debug, Clone)]
pub struct PreparedChain {
    pub measurement: SpectralMeasurement,
    pub schedule: NoiseSchedule,
    /// Data were multiplied by this before entering the chain.
    pub scale: f64,
    /// Noise level of `B y` in data units (given or estimated).
    pub sigma_d: f64,
    pub eta: f64,
    pub eta_b: f64,
    pub seed: u64,
}

fn quantile_abs(v: &[f64], q: f64) -> f64 {
    let mut a: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    a.sort_by(|x, y| x.total_cmp(y));
    let pos = q * (a.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    a[lo] + (a[hi] - a[lo]) * (pos - lo as f64)
}

/// Scale, estimate noise and project `B y` into the spectral domain.
pub fn prepare(config: &SamplerConfig, fact: &SpectralFactorization, by: &[f64]) -> Result<PreparedChain> {
    config.validate()?;
    check_len("sampler input image", fact.dim(), by.len())?;
    if config.mode == Mode::Deno && fact.method != FactorMethod::Identity {
        return Err(Error::config("deno mode requires the identity factorization"));
    }
    if by.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            count: by.iter().filter(|v| !v.is_finite()).count(),
        });
    }
    let sigma_d = match config.sigma_d {
        Some(s) => s,
        None => estimate_sigma_d(fact, by)?,
    };
    let s1 = fact.s.first().copied().unwrap_or(1.0);
    let scale = match config.normalization {
        Normalization::Fixed { scale } => scale,
        Normalization::Percentile { quantile } => {
            let q = quantile_abs(by, quantile);
            if !(q > 0.0) {
                return Err(Error::Degenerate("beamformed image is identically zero".into()));
            }
            s1 / q
        }
    };
    let scaled: Vec<f64> = by.iter().map(|v| v * scale).collect();
    let measurement = to_spectral_from_das(fact, &scaled, sigma_d * scale)?;
    Ok(PreparedChain {
        measurement,
        schedule: config.schedule()?,
        scale,
        sigma_d,
        eta: config.eta,
        eta_b: config.eta_b,
        seed: config.seed,
    })
}

fn count_non_finite(v: &[f64]) -> usize {
    v.iter().filter(|x| !x.is_finite()).count()
}

/// One transition `t -> t-1`.
pub fn sample_step(
    state: &mut ChainState,
    prep: &PreparedChain,
    fact: &SpectralFactorization,
    denoiser: &dyn Denoiser,
    trace: Option<TraceHook<'_>>,
) -> Result<()> {
    let k = state.t;
    if k >= prep.schedule.it() {
        return Err(Error::config("chain already finished"));
    }
    let sigma_t = prep.schedule.levels[k];
    let sigma_prev = prep.schedule.next_level(k);
    let x_t = fact.v.apply(&state.xbar);
    let x_theta = denoiser.denoise(&x_t, sigma_t)?;
    check_len("denoiser output", x_t.len(), x_theta.len())?;
    let bad = count_non_finite(&x_theta);
    if bad > 0 {
        return Err(Error::NonFinite { step: k, count: bad });
    }
    let xbar_theta = fact.v.apply_t(&x_theta);
    let meas = &prep.measurement;
    let coefficients: Vec<StepCoefficients> = meas
        .sigma_y
        .iter()
        .zip(&meas.observed)
        .map(|(&sy, &obs)| {
            let sy = if obs { sy } else { f64::INFINITY };
            coefficients_for_noise(sigma_t, sigma_prev, sy, prep.eta, prep.eta_b)
        })
        .collect();
    for (i, co) in coefficients.iter().enumerate() {
        let z: f64 = state.rng.sample(StandardNormal);
        let obs_term = if co.b != 0.0 { co.b * meas.ybar[i] } else { 0.0 };
        state.xbar[i] = co.a * state.xbar[i] + obs_term + co.c * xbar_theta[i] + co.d * z;
    }
    let bad = count_non_finite(&state.xbar);
    if bad > 0 {
        return Err(Error::NonFinite { step: k, count: bad });
    }
    if let Some(hook) = trace {
        hook(&StepTrace {
            step: k,
            sigma_t,
            sigma_prev,
            sigma_y: &meas.sigma_y,
            coefficients: &coefficients,
        });
    }
    state.t += 1;
    Ok(())
}

/// Full chain for one rng stream; returns the image in data units.
pub fn run_prepared(
    prep: &PreparedChain,
    fact: &SpectralFactorization,
    denoiser: &dyn Denoiser,
    chain: u64,
    mut trace: Option<TraceHook<'_>>,
) -> Result<Vec<f64>> {
    let mut state = init_state(&prep.measurement, &prep.schedule, chain_rng(prep.seed, chain));
    while state.t < prep.schedule.it() {
        let hook = trace.as_mut().map(|h| &mut **h as &mut dyn FnMut(&StepTrace<'_>));
        sample_step(&mut state, prep, fact, denoiser, hook)?;
    }
    let inv = 1.0 / prep.scale;
    Ok(fact.v.apply(&state.xbar).into_iter().map(|v| v * inv).collect())
}

/// Single-sample reconstruction from a beamformed image `B y`.
pub fn run_chain(
    config: &SamplerConfig,
    fact: &SpectralFactorization,
    by: &[f64],
    denoiser: &dyn Denoiser,
) -> Result<Vec<f64>> {
    let prep = prepare(config, fact, by)?;
    run_prepared(&prep, fact, denoiser, 0, None)
}

/// `config.samples` independent chains, in chain order.
pub fn run_chains(
    config: &SamplerConfig,
    fact: &SpectralFactorization,
    by: &[f64],
    denoiser: &dyn Denoiser,
) -> Result<Vec<Vec<f64>>> {
    let prep = prepare(config, fact, by)?;
    (0..config.samples as u64)
        .into_par_iter()
        .map(|c| run_prepared(&prep, fact, denoiser, c, None))
        .collect()
}
