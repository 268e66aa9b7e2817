//! Spin-relaxation analysis: stretched-exponential trace fitting, the
//! two-phonon background model for the intrinsic rate, the differential
//! fluctuation rate, and the regularized susceptibility-peak model.
//!
//! Rates are in kHz and delays in microseconds; the exponent argument is the
//! dimensionless (t * Gamma) with the kHz*us = 1e-3 factor applied
//! internally.

use crate::numfit::{self, FitOptions, FitResult, ResidualProblem};
use crate::odmr::Position;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// (t_us * Gamma_kHz) * KHZ_US = dimensionless decay argument.
const KHZ_US: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RelaxError {
    #[error("trace has {0} samples, need at least {1}")]
    TooFewSamples(usize, usize),
    #[error("trace shows no usable decay: {0}")]
    Initialization(String),
    #[error("series has {0} points, need at least {1}")]
    TooFewPoints(usize, usize),
    #[error("series has no bracketed peak (maximum sits at the boundary)")]
    NoPeak,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Fit(#[from] numfit::FitError),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceMeta {
    pub temperature_k: f64,
    pub field_g: f64,
    pub position: Position,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelaxationTrace {
    pub delays_us: Vec<f64>,
    pub signal: Vec<f64>,
    pub meta: TraceMeta,
}

#[derive(Debug, Clone)]
pub struct RelaxationFit {
    pub gamma_khz: f64,
    pub n_stretch: f64,
    pub amplitude: f64,
    pub fit: FitResult,
}

impl RelaxationFit {
    pub fn gamma_sigma_khz(&self) -> f64 {
        self.fit.std_error(1).unwrap_or(f64::INFINITY)
    }
}

pub fn stretched_exp(amplitude: f64, gamma_khz: f64, n: f64, t_us: f64) -> f64 {
    let u = gamma_khz * t_us * KHZ_US;
    if u <= 0.0 {
        return amplitude;
    }
    amplitude * (-u.powf(n)).exp()
}

/// signal(t) = amplitude * exp(-(t Gamma)^n) + Gaussian noise, deterministic
/// per seed.
pub fn synthesize_trace(
    gamma_khz: f64,
    n_stretch: f64,
    amplitude: f64,
    delays_us: &[f64],
    noise_sigma: f64,
    seed: u64,
    meta: TraceMeta,
) -> Result<RelaxationTrace, RelaxError> {
    if !(gamma_khz > 0.0) {
        return Err(RelaxError::InvalidInput(format!(
            "gamma must be > 0, got {gamma_khz} kHz"
        )));
    }
    if delays_us.is_empty()
        || delays_us[0] < 0.0
        || !delays_us.windows(2).all(|w| w[1] > w[0])
    {
        return Err(RelaxError::InvalidInput(
            "delays must be non-empty, nonnegative and strictly increasing".into(),
        ));
    }
    let mut signal: Vec<f64> = delays_us
        .iter()
        .map(|&t| stretched_exp(amplitude, gamma_khz, n_stretch, t))
        .collect();
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_sigma)
            .map_err(|e| RelaxError::InvalidInput(e.to_string()))?;
        for s in &mut signal {
            *s += noise.sample(&mut rng);
        }
    }
    Ok(RelaxationTrace {
        delays_us: delays_us.to_vec(),
        signal,
        meta: TraceMeta {
            seed: Some(seed),
            ..meta
        },
    })
}

/// Analytic Jacobian of the stretched-exponential residual model with
/// parameter order (amplitude, gamma, n) — or (amplitude, gamma) when the
/// exponent is fixed.
pub fn stretched_exp_jacobian(
    params: &[f64],
    delays_us: &[f64],
    fixed_n: Option<f64>,
) -> DMatrix<f64> {
    let n_params = if fixed_n.is_some() { 2 } else { 3 };
    let (amp, gamma) = (params[0], params[1]);
    let n = fixed_n.unwrap_or_else(|| params[2]);
    DMatrix::from_fn(delays_us.len(), n_params, |r, c| {
        let t = delays_us[r];
        let u = gamma * t * KHZ_US;
        if u <= 0.0 {
            return if c == 0 { 1.0 } else { 0.0 };
        }
        let un = u.powf(n);
        let e = (-un).exp();
        match c {
            0 => e,
            1 => -amp * e * n * un / gamma,
            _ => -amp * e * un * u.ln(),
        }
    })
}

/// Fit (amplitude, Gamma, n) — or (amplitude, Gamma) with `fix_n` — to a
/// trace. Initialization comes from a log-log regression of
/// ln(-ln(s/amplitude_guess)) against ln(t).
pub fn fit_trace(
    trace: &RelaxationTrace,
    fix_n: Option<f64>,
) -> Result<RelaxationFit, RelaxError> {
    let n_samples = trace.signal.len();
    if n_samples < 6 || n_samples != trace.delays_us.len() {
        return Err(RelaxError::TooFewSamples(n_samples, 6));
    }
    let amp_guess = trace
        .signal
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if amp_guess <= 0.0 {
        return Err(RelaxError::Initialization(
            "signal has no positive plateau".into(),
        ));
    }
    // log-log regression over the usable decaying portion
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&t, &s) in trace.delays_us.iter().zip(&trace.signal) {
        if t > 0.0 && s > 0.0 && s < 0.99 * amp_guess {
            xs.push((t * KHZ_US).ln());
            ys.push((-(s / amp_guess).ln()).ln());
        }
    }
    if xs.len() < 2 {
        return Err(RelaxError::Initialization(
            "fewer than two points in the decaying region".into(),
        ));
    }
    let nx = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / nx;
    let mean_y = ys.iter().sum::<f64>() / nx;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 1.0 };
    let n0 = fix_n.unwrap_or(slope.clamp(0.1, 2.0));
    let gamma0 = ((mean_y - slope * mean_x) / slope.max(0.1)).exp().clamp(1e-3, 1e6);

    let delays = &trace.delays_us;
    let signal = &trace.signal;
    let fit = match fix_n {
        Some(n_fixed) => {
            let problem = ResidualProblem::new(2, move |p: &[f64]| {
                delays
                    .iter()
                    .zip(signal)
                    .map(|(&t, &s)| stretched_exp(p[0], p[1], n_fixed, t) - s)
                    .collect()
            })
            .with_bounds(vec![0.0, 1e-9], vec![f64::INFINITY, f64::INFINITY])?
            .with_jacobian(move |p: &[f64]| stretched_exp_jacobian(p, delays, Some(n_fixed)));
            numfit::levenberg_marquardt(&problem, &[amp_guess, gamma0], &FitOptions::default())?
        }
        None => {
            let problem = ResidualProblem::new(3, move |p: &[f64]| {
                delays
                    .iter()
                    .zip(signal)
                    .map(|(&t, &s)| stretched_exp(p[0], p[1], p[2], t) - s)
                    .collect()
            })
            .with_bounds(
                vec![0.0, 1e-9, 1e-3],
                vec![f64::INFINITY, f64::INFINITY, 2.0],
            )?
            .with_jacobian(move |p: &[f64]| stretched_exp_jacobian(p, delays, None));
            numfit::levenberg_marquardt(
                &problem,
                &[amp_guess, gamma0, n0],
                &FitOptions::default(),
            )?
        }
    };
    Ok(RelaxationFit {
        amplitude: fit.params[0],
        gamma_khz: fit.params[1],
        n_stretch: fix_n.unwrap_or_else(|| fit.params[2]),
        fit,
    })
}

/// Two-phonon background parameters for the intrinsic rate
/// Gamma_r(T) = a + b / (exp(Delta/kT) - 1) + c T^5, with Delta stored as a
/// temperature Delta/k in K.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhononModelParams {
    pub a_khz: f64,
    pub b_khz: f64,
    pub c_khz_per_k5: f64,
    pub delta_over_k_k: f64,
}

impl Default for PhononModelParams {
    fn default() -> Self {
        // calibrated so the curve passes ~6.2 kHz at 296 K and ~22.1 kHz at 393 K
        Self {
            a_khz: 0.242,
            b_khz: 7.85,
            c_khz_per_k5: 2.1e-12,
            delta_over_k_k: 600.0,
        }
    }
}

impl PhononModelParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.a_khz < 0.0 || self.b_khz < 0.0 || self.c_khz_per_k5 < 0.0 {
            return Err("phonon coefficients must be nonnegative".into());
        }
        if !(self.delta_over_k_k > 0.0) {
            return Err("delta_over_k_k must be > 0".into());
        }
        Ok(())
    }

    /// Delta in meV for reporting; the fit itself works in Delta/k.
    pub fn delta_mev(&self) -> f64 {
        const K_B_MEV_PER_K: f64 = 8.617333262e-2;
        self.delta_over_k_k * K_B_MEV_PER_K
    }
}

/// Gamma_r(T) with saturating arithmetic; the flag reports overflow of the
/// T^5 term.
pub fn phonon_rate_checked(params: &PhononModelParams, temperature_k: f64) -> (f64, bool) {
    let bose = {
        let e = (params.delta_over_k_k / temperature_k).exp();
        if e.is_infinite() {
            0.0
        } else {
            params.b_khz / (e - 1.0)
        }
    };
    let t5 = params.c_khz_per_k5 * temperature_k.powi(5);
    let overflow = !t5.is_finite();
    let rate = params.a_khz + bose + if overflow { f64::MAX } else { t5 };
    (rate.min(f64::MAX), overflow)
}

pub fn phonon_rate(params: &PhononModelParams, temperature_k: f64) -> f64 {
    phonon_rate_checked(params, temperature_k).0
}

/// Weighted nonnegative-bounded fit of (a, b, c, Delta/k) to a
/// (T, Gamma_r, sigma) series.
pub fn fit_phonon_model(
    series: &[(f64, f64, f64)],
) -> Result<(PhononModelParams, FitResult), RelaxError> {
    if series.len() < 5 {
        return Err(RelaxError::TooFewPoints(series.len(), 5));
    }
    if series.iter().any(|&(t, _, _)| t <= 0.0) {
        return Err(RelaxError::InvalidInput("temperatures must be positive".into()));
    }
    let weights = series_weights(series);
    let mut sorted: Vec<(f64, f64, f64)> = series.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let t_lo = sorted[0].0;
    let t_hi = sorted[sorted.len() - 1].0;

    // the model is linear in (a, b, c) at fixed Delta, so initialize by
    // scanning Delta on a log grid and solving each linear subproblem exactly
    let solve_linear = |delta: f64| -> Option<([f64; 3], f64)> {
        let mut design = nalgebra::DMatrix::zeros(series.len(), 3);
        let mut rhs = nalgebra::DVector::zeros(series.len());
        for (row, (&(t, g, _), &w)) in series.iter().zip(&weights).enumerate() {
            design[(row, 0)] = w;
            design[(row, 1)] = w / ((delta / t).exp() - 1.0);
            design[(row, 2)] = w * t.powi(5);
            rhs[row] = w * g;
        }
        // column scaling keeps the T^5 column from swamping the SVD cutoff
        let col_norms: Vec<f64> = (0..3).map(|j| design.column(j).norm().max(1e-300)).collect();
        for (j, &norm) in col_norms.iter().enumerate() {
            design.column_mut(j).scale_mut(1.0 / norm);
        }
        let svd = nalgebra::SVD::new(design.clone(), true, true);
        let scaled = svd.solve(&rhs, 1e-12).ok()?;
        let resid = (design * &scaled - &rhs).norm();
        Some((
            [
                scaled[0] / col_norms[0],
                scaled[1] / col_norms[1],
                scaled[2] / col_norms[2],
            ],
            resid,
        ))
    };
    let mut best: Option<(f64, [f64; 3], f64)> = None;
    let n_grid = 120;
    let (lo, hi) = ((t_lo / 10.0).ln(), (t_hi * 50.0).ln());
    let step = (hi - lo) / (n_grid - 1) as f64;
    for k in 0..n_grid {
        let log_delta = lo + step * k as f64;
        if let Some((coef, resid)) = solve_linear(log_delta.exp()) {
            if best.as_ref().is_none_or(|b| resid < b.2) {
                best = Some((log_delta, coef, resid));
            }
        }
    }
    let (log_best, _, _) = best.ok_or_else(|| {
        RelaxError::InvalidInput("phonon initialization grid failed".into())
    })?;
    // golden-section refinement of Delta around the best grid point
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut xa, mut xb) = (log_best - step, log_best + step);
    let eval = |x: f64| solve_linear(x.exp()).map_or(f64::INFINITY, |(_, r)| r);
    let (mut x1, mut x2) = (xb - phi * (xb - xa), xa + phi * (xb - xa));
    let (mut f1, mut f2) = (eval(x1), eval(x2));
    for _ in 0..80 {
        if f1 < f2 {
            (xb, x2, f2) = (x2, x1, f1);
            x1 = xb - phi * (xb - xa);
            f1 = eval(x1);
        } else {
            (xa, x1, f1) = (x1, x2, f2);
            x2 = xa + phi * (xb - xa);
            f2 = eval(x2);
        }
    }
    let delta0 = (0.5 * (xa + xb)).exp();
    let linear = solve_linear(delta0)
        .ok_or_else(|| RelaxError::InvalidInput("phonon initialization grid failed".into()))?
        .0;
    let a0 = linear[0].max(0.0);
    let b0 = linear[1].max(1e-9);
    let c0 = linear[2].max(1e-30);

    let series_ref = series;
    let weights_ref = &weights;
    let problem = ResidualProblem::new(4, move |p: &[f64]| {
        let params = PhononModelParams {
            a_khz: p[0],
            b_khz: p[1],
            c_khz_per_k5: p[2],
            delta_over_k_k: p[3],
        };
        series_ref
            .iter()
            .zip(weights_ref)
            .map(|(&(t, g, _), &w)| (phonon_rate(&params, t) - g) * w)
            .collect()
    })
    .with_bounds(
        vec![0.0, 0.0, 0.0, 1.0],
        vec![f64::INFINITY; 4],
    )?;
    let fit = numfit::levenberg_marquardt(
        &problem,
        &[a0, b0, c0, delta0],
        &FitOptions::default(),
    )?;
    let params = PhononModelParams {
        a_khz: fit.params[0],
        b_khz: fit.params[1],
        c_khz_per_k5: fit.params[2],
        delta_over_k_k: fit.params[3],
    };
    Ok((params, fit))
}

fn series_weights(series: &[(f64, f64, f64)]) -> Vec<f64> {
    let mut sigmas: Vec<f64> = series.iter().map(|s| s.2).filter(|&s| s > 0.0).collect();
    sigmas.sort_by(f64::total_cmp);
    let fallback = if sigmas.is_empty() { 1.0 } else { sigmas[sigmas.len() / 2] };
    series
        .iter()
        .map(|s| 1.0 / if s.2 > 0.0 { s.2 } else { fallback })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct DifferentialRate {
    pub gamma_fgt_khz: f64,
    pub sigma_khz: f64,
    /// True when |Gamma_FGT| < 2 sigma, i.e. consistent with pure noise.
    pub noise_consistent: bool,
}

/// Signed Gamma_p - Gamma_r with quadrature uncertainty. Negative values are
/// preserved; clipping would bias the downstream peak fit.
pub fn differential_rate(
    gamma_p_khz: f64,
    gamma_r_khz: f64,
    sigma_p_khz: f64,
    sigma_r_khz: f64,
) -> DifferentialRate {
    let value = gamma_p_khz - gamma_r_khz;
    let sigma = (sigma_p_khz.powi(2) + sigma_r_khz.powi(2)).sqrt();
    DifferentialRate {
        gamma_fgt_khz: value,
        sigma_khz: sigma,
        noise_consistent: value.abs() < 2.0 * sigma,
    }
}

/// Regularized susceptibility-peak model for the fluctuation rate. With
/// x = |T - Tc|/Tc and w = width/Tc:
///   T <  Tc: A (x + w)^(-p_below)
///   T >= Tc: A w^(p_above - p_below) (x + w)^(-p_above)
/// Continuous at Tc with value A w^(-p_below), its single maximum;
/// phenomenological by design, the exponents and width are configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluctuationModel {
    pub amplitude_khz: f64,
    pub tc_k: f64,
    pub exponent_below: f64,
    pub exponent_above: f64,
    pub width_k: f64,
}

impl Default for FluctuationModel {
    fn default() -> Self {
        Self {
            amplitude_khz: 0.3,
            tc_k: 360.0,
            exponent_below: 1.0,
            exponent_above: 1.2,
            width_k: 8.0,
        }
    }
}

impl FluctuationModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.amplitude_khz < 0.0 {
            return Err("amplitude_khz must be >= 0".into());
        }
        if !(self.width_k > 0.0) {
            return Err("width_k must be > 0".into());
        }
        if !(self.tc_k > 0.0) {
            return Err("tc_k must be > 0".into());
        }
        Ok(())
    }
}

pub fn fluctuation_rate(model: &FluctuationModel, temperature_k: f64) -> f64 {
    let w = model.width_k / model.tc_k;
    let x = (temperature_k - model.tc_k).abs() / model.tc_k;
    if temperature_k < model.tc_k {
        model.amplitude_khz * (x + w).powf(-model.exponent_below)
    } else {
        model.amplitude_khz
            * w.powf(model.exponent_above - model.exponent_below)
            * (x + w).powf(-model.exponent_above)
    }
}

#[derive(Debug, Clone)]
pub struct FluctuationFit {
    pub model: FluctuationModel,
    pub peak_t_k: f64,
    pub fit: FitResult,
}

/// Weighted fit of the peak model to a (T, Gamma_FGT, sigma) series; the
/// reported peak temperature is the fitted Tc.
pub fn fit_fluctuation_model(series: &[(f64, f64, f64)]) -> Result<FluctuationFit, RelaxError> {
    if series.len() < 6 {
        return Err(RelaxError::TooFewPoints(series.len(), 6));
    }
    let mut sorted: Vec<(f64, f64, f64)> = series.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let peak_idx = sorted
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .unwrap();
    if peak_idx == 0 || peak_idx == sorted.len() - 1 {
        return Err(RelaxError::NoPeak);
    }
    let (t_min, t_max) = (sorted[0].0, sorted[sorted.len() - 1].0);
    let span = t_max - t_min;

    let weights = series_weights(&sorted);

    // Amplitude is linear in the model at fixed shape parameters, so profile
    // it in closed form over a (Tc, width, exponents) grid to seed LM.
    let profile = |tc: f64, pb: f64, pa: f64, w: f64| -> (f64, f64) {
        let model = FluctuationModel {
            amplitude_khz: 1.0,
            tc_k: tc,
            exponent_below: pb,
            exponent_above: pa,
            width_k: w,
        };
        let mut num = 0.0;
        let mut den = 0.0;
        for (&(t, g, _), &wt) in sorted.iter().zip(&weights) {
            let chi = fluctuation_rate(&model, t);
            num += chi * g * wt * wt;
            den += chi * chi * wt * wt;
        }
        let a = (num / den.max(1e-300)).max(0.0);
        let cost: f64 = sorted
            .iter()
            .zip(&weights)
            .map(|(&(t, g, _), &wt)| {
                let r = (a * fluctuation_rate(&model, t) - g) * wt;
                r * r
            })
            .sum();
        (a, cost)
    };
    // Best start per Tc grid cell, then LM from a handful of the lowest-cost
    // cells; the cost surface in Tc is multimodal under noise.
    let mut per_tc: Vec<(f64, [f64; 5])> = Vec::with_capacity(60);
    for i in 0..60 {
        let tc = t_min + span * (i as f64 + 0.5) / 60.0;
        let mut cell = (f64::INFINITY, [0.0_f64; 5]);
        for &w in &[span / 20.0, span / 10.0, span / 5.0] {
            for &pb in &[0.5, 1.0, 1.5] {
                for &pa in &[0.5, 1.0, 1.5] {
                    let (a, cost) = profile(tc, pb, pa, w);
                    if cost < cell.0 {
                        cell = (cost, [a, tc, pb, pa, w]);
                    }
                }
            }
        }
        per_tc.push(cell);
    }
    per_tc.sort_by(|a, b| a.0.total_cmp(&b.0));
    let starts: Vec<[f64; 5]> = per_tc.iter().take(5).map(|c| c.1).collect();
    let sorted_ref = &sorted;
    let weights_ref = &weights;
    let problem = ResidualProblem::new(5, move |p: &[f64]| {
        let model = FluctuationModel {
            amplitude_khz: p[0],
            tc_k: p[1],
            exponent_below: p[2],
            exponent_above: p[3],
            width_k: p[4],
        };
        sorted_ref
            .iter()
            .zip(weights_ref)
            .map(|(&(t, g, _), &w)| (fluctuation_rate(&model, t) - g) * w)
            .collect()
    })
    .with_bounds(
        vec![0.0, t_min, 0.1, 0.1, 1e-3],
        vec![f64::INFINITY, t_max, 5.0, 5.0, t_max - t_min],
    )?;
    let mut fit: Option<crate::numfit::FitResult> = None;
    for start in &starts {
        let candidate = numfit::levenberg_marquardt(&problem, start, &FitOptions::default());
        if let Ok(c) = candidate {
            if fit.as_ref().map_or(true, |f| c.residual_norm < f.residual_norm) {
                fit = Some(c);
            }
        }
    }
    let fit = fit.ok_or(RelaxError::NoPeak)?;
    let model = FluctuationModel {
        amplitude_khz: fit.params[0],
        tc_k: fit.params[1],
        exponent_below: fit.params[2],
        exponent_above: fit.params[3],
        width_k: fit.params[4],
    };
    Ok(FluctuationFit {
        peak_t_k: model.tc_k,
        model,
        fit,
    })
}

// ---------------------------------------------------------------------------
// CSV interfaces: trace `delay_us,signal`, rate series
// `temperature_k,rate_khz,sigma_khz`; metadata conventions match the odmr
// module (# key: value comments, optional key=value sidecar).
// ---------------------------------------------------------------------------

pub fn write_trace_csv(trace: &RelaxationTrace, path: &Path) -> Result<(), RelaxError> {
    let mut out = String::new();
    out.push_str(&format!("# temperature_k: {}\n", crate::io::fmt_num(trace.meta.temperature_k)));
    out.push_str(&format!("# field_g: {}\n", crate::io::fmt_num(trace.meta.field_g)));
    out.push_str(&format!("# position: {}\n", trace.meta.position));
    if let Some(seed) = trace.meta.seed {
        out.push_str(&format!("# seed: {seed}\n"));
    }
    out.push_str("delay_us,signal\n");
    for (t, s) in trace.delays_us.iter().zip(&trace.signal) {
        out.push_str(&format!("{},{}\n", crate::io::fmt_num(*t), crate::io::fmt_num(*s)));
    }
    std::fs::write(path, out).map_err(|source| RelaxError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_trace_csv(path: &Path) -> Result<RelaxationTrace, RelaxError> {
    let text = std::fs::read_to_string(path).map_err(|source| RelaxError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut meta_pairs = crate::io::read_sidecar_meta(path);
    let mut delays = Vec::new();
    let mut signal = Vec::new();
    let p = path.display().to_string();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once(':') {
                meta_pairs.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if line.starts_with("delay_us") {
            continue;
        }
        let mut parts = line.split(',');
        let mut parse = |what: &str| -> Result<f64, RelaxError> {
            parts
                .next()
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| RelaxError::Parse {
                    path: p.clone(),
                    line: lineno + 1,
                    message: format!("malformed {what} value"),
                })
        };
        delays.push(parse("delay_us")?);
        signal.push(parse("signal")?);
    }
    let get_f64 = |k: &str| meta_pairs.get(k).and_then(|v| v.parse::<f64>().ok());
    Ok(RelaxationTrace {
        delays_us: delays,
        signal,
        meta: TraceMeta {
            temperature_k: get_f64("temperature_k").unwrap_or(f64::NAN),
            field_g: get_f64("field_g").unwrap_or(f64::NAN),
            position: meta_pairs
                .get("position")
                .and_then(|v| v.parse().ok())
                .unwrap_or(Position::Reference),
            seed: meta_pairs.get("seed").and_then(|v| v.parse().ok()),
        },
    })
}

pub fn write_rate_series_csv(
    series: &[(f64, f64, f64)],
    path: &Path,
) -> Result<(), RelaxError> {
    let mut out = String::from("temperature_k,rate_khz,sigma_khz\n");
    for (t, g, s) in series {
        out.push_str(&format!(
            "{},{},{}\n",
            crate::io::fmt_num(*t),
            crate::io::fmt_num(*g),
            crate::io::fmt_num(*s)
        ));
    }
    std::fs::write(path, out).map_err(|source| RelaxError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_rate_series_csv(path: &Path) -> Result<Vec<(f64, f64, f64)>, RelaxError> {
    let text = std::fs::read_to_string(path).map_err(|source| RelaxError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let p = path.display().to_string();
    let mut series = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("temperature_k") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(RelaxError::Parse {
                path: p,
                line: lineno + 1,
                message: "expected temperature_k,rate_khz[,sigma_khz]".into(),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64, RelaxError> {
            s.parse::<f64>().map_err(|_| RelaxError::Parse {
                path: p.clone(),
                line: lineno + 1,
                message: format!("malformed {what} value"),
            })
        };
        series.push((
            parse(fields[0], "temperature_k")?,
            parse(fields[1], "rate_khz")?,
            if fields.len() > 2 { parse(fields[2], "sigma_khz")? } else { 0.0 },
        ));
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn meta() -> TraceMeta {
        TraceMeta {
            temperature_k: 296.0,
            field_g: 190.0,
            position: Position::Reference,
            seed: None,
        }
    }

    fn log_delays(n: usize, lo_us: f64, hi_us: f64) -> Vec<f64> {
        (0..n)
            .map(|i| lo_us * (hi_us / lo_us).powf(i as f64 / (n - 1) as f64))
            .collect()
    }

    #[test]
    fn synthesis_basics() {
        let mut delays = vec![0.0];
        delays.extend(log_delays(24, 1.0, 800.0));
        let trace =
            synthesize_trace(6.2, 1.0, 1.0, &delays, 0.0, 0, meta()).unwrap();
        assert_relative_eq!(trace.signal[0], 1.0);
        // at t = 1/Gamma the noise-free decay equals amplitude/e
        let t_e = 1.0 / (6.2 * KHZ_US);
        let s = stretched_exp(1.0, 6.2, 1.0, t_e);
        assert_relative_eq!(s, 1.0 / std::f64::consts::E, max_relative = 1e-12);
        let again = synthesize_trace(6.2, 1.0, 1.0, &delays, 0.01, 3, meta()).unwrap();
        let same = synthesize_trace(6.2, 1.0, 1.0, &delays, 0.01, 3, meta()).unwrap();
        assert_eq!(again.signal, same.signal);
    }

    #[test]
    fn fit_recovers_reference_rates() {
        let delays = log_delays(30, 0.5, 1000.0);
        for gamma in [6.2, 22.1] {
            let trace = synthesize_trace(gamma, 1.0, 1.0, &delays, 0.0, 0, meta()).unwrap();
            let fit = fit_trace(&trace, None).unwrap();
            assert!(fit.fit.converged);
            assert!(
                (fit.gamma_khz - gamma).abs() / gamma < 1e-3,
                "gamma {gamma}: got {}",
                fit.gamma_khz
            );
        }
    }

    #[test]
    fn fit_round_trip_over_gamma_and_stretch() {
        let delays = log_delays(30, 0.5, 2000.0);
        for gamma in [1.0, 6.2, 22.1, 50.0] {
            for n in [0.7, 1.0, 1.3] {
                let trace =
                    synthesize_trace(gamma, n, 1.0, &delays, 0.0, 0, meta()).unwrap();
                let fit = fit_trace(&trace, None).unwrap();
                let rel = (fit.gamma_khz - gamma).abs() / gamma;
                assert!(rel < 1e-3, "gamma {gamma}, n {n}: rel err {rel}");
                assert!((fit.n_stretch - n).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn fix_n_fit() {
        let delays = log_delays(20, 1.0, 600.0);
        let trace = synthesize_trace(10.0, 1.0, 0.9, &delays, 0.0, 0, meta()).unwrap();
        let fit = fit_trace(&trace, Some(1.0)).unwrap();
        assert_relative_eq!(fit.gamma_khz, 10.0, max_relative = 1e-6);
        assert_relative_eq!(fit.n_stretch, 1.0);
    }

    #[test]
    fn short_or_flat_traces_rejected() {
        let short = RelaxationTrace {
            delays_us: vec![1.0, 2.0, 3.0],
            signal: vec![1.0, 0.5, 0.2],
            meta: meta(),
        };
        assert!(matches!(fit_trace(&short, None), Err(RelaxError::TooFewSamples(3, 6))));
        let flat = RelaxationTrace {
            delays_us: (1..=10).map(|i| i as f64).collect(),
            signal: vec![-0.1; 10],
            meta: meta(),
        };
        assert!(matches!(fit_trace(&flat, None), Err(RelaxError::Initialization(_))));
    }

    #[test]
    fn phonon_rate_limits() {
        let constant = PhononModelParams {
            a_khz: 4.0,
            b_khz: 0.0,
            c_khz_per_k5: 0.0,
            delta_over_k_k: 500.0,
        };
        for t in [10.0, 296.0, 1000.0] {
            assert_relative_eq!(phonon_rate(&constant, t), 4.0);
        }
        let no_t5 = PhononModelParams { c_khz_per_k5: 0.0, ..Default::default() };
        // Bose term vanishes as T -> 0
        assert_relative_eq!(phonon_rate(&no_t5, 1e-3), no_t5.a_khz, max_relative = 1e-12);
    }

    #[test]
    fn default_phonon_params_hit_calibration_anchors() {
        let params = PhononModelParams::default();
        assert!((phonon_rate(&params, 296.0) - 6.2).abs() < 0.05);
        assert!((phonon_rate(&params, 393.0) - 22.1).abs() < 0.05);
    }

    #[test]
    fn phonon_rate_monotone_when_temperature_terms_present() {
        let params = PhononModelParams::default();
        let mut prev = 0.0;
        for i in 1..=50 {
            let t = 100.0 + i as f64 * 8.0;
            let g = phonon_rate(&params, t);
            assert!(g > prev);
            prev = g;
        }
    }

    #[test]
    fn phonon_fit_recovers_parameters() {
        let truth = PhononModelParams::default();
        let series: Vec<(f64, f64, f64)> = (0..10)
            .map(|i| {
                let t = 296.0 + i as f64 * (393.0 - 296.0) / 9.0;
                (t, phonon_rate(&truth, t), 0.0)
            })
            .collect();
        let (fitted, fit) = fit_phonon_model(&series).unwrap();
        assert!(fit.converged);
        assert!((fitted.a_khz - truth.a_khz).abs() / truth.a_khz < 0.01, "a = {}", fitted.a_khz);
        assert!((fitted.b_khz - truth.b_khz).abs() / truth.b_khz < 0.01, "b = {}", fitted.b_khz);
        assert!(
            (fitted.c_khz_per_k5 - truth.c_khz_per_k5).abs() / truth.c_khz_per_k5 < 0.01,
            "c = {}",
            fitted.c_khz_per_k5
        );
        assert!(
            (fitted.delta_over_k_k - truth.delta_over_k_k).abs() / truth.delta_over_k_k < 0.01,
            "delta = {}",
            fitted.delta_over_k_k
        );
    }

    #[test]
    fn phonon_fit_constant_series() {
        let series: Vec<(f64, f64, f64)> =
            (0..8).map(|i| (280.0 + 15.0 * i as f64, 5.0, 0.0)).collect();
        let (fitted, _) = fit_phonon_model(&series).unwrap();
        let residual: f64 = series
            .iter()
            .map(|&(t, g, _)| (phonon_rate(&fitted, t) - g).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(residual < 1e-6);
        assert!(fitted.a_khz > 4.9);
    }

    #[test]
    fn phonon_fit_too_few_points() {
        let series = vec![(300.0, 5.0, 0.0); 3];
        assert!(matches!(
            fit_phonon_model(&series),
            Err(RelaxError::TooFewPoints(3, 5))
        ));
    }

    #[test]
    fn differential_rate_contract() {
        let d = differential_rate(20.0, 6.2, 0.0, 0.0);
        assert_relative_eq!(d.gamma_fgt_khz, 13.8, max_relative = 1e-12);
        let z = differential_rate(5.0, 5.0, 0.3, 0.4);
        assert_relative_eq!(z.gamma_fgt_khz, 0.0);
        assert!(z.noise_consistent);
        let swapped = differential_rate(6.2, 20.0, 0.0, 0.0);
        assert_relative_eq!(swapped.gamma_fgt_khz, -13.8, max_relative = 1e-12);
        // slightly negative results preserved and flagged against sigma
        let small = differential_rate(5.0, 5.4, 0.3, 0.3);
        assert!(small.gamma_fgt_khz < 0.0);
        assert!(small.noise_consistent);
    }

    #[test]
    fn fluctuation_peak_shape() {
        let model = FluctuationModel::default();
        let peak = fluctuation_rate(&model, model.tc_k);
        // peak at Tc, continuous across it, decaying on both sides
        assert!(fluctuation_rate(&model, model.tc_k - 1e-9) <= peak + 1e-12);
        assert!(fluctuation_rate(&model, model.tc_k + 1e-9) <= peak + 1e-12);
        let mut maxima = 0;
        let grid: Vec<f64> = (0..200).map(|i| 300.0 + i as f64 * 0.6).collect();
        let vals: Vec<f64> = grid.iter().map(|&t| fluctuation_rate(&model, t)).collect();
        for i in 1..vals.len() - 1 {
            if vals[i] > vals[i - 1] && vals[i] > vals[i + 1] {
                maxima += 1;
                assert!((grid[i] - model.tc_k).abs() <= 0.6);
            }
        }
        assert_eq!(maxima, 1);
        assert!(fluctuation_rate(&model, 2000.0) < 0.05 * peak);
    }

    #[test]
    fn fluctuation_fit_localizes_peak() {
        let truth = FluctuationModel::default();
        let series: Vec<(f64, f64, f64)> = (0..14)
            .map(|i| {
                let t = 296.0 + i as f64 * (393.0 - 296.0) / 13.0;
                (t, fluctuation_rate(&truth, t), 0.05)
            })
            .collect();
        let result = fit_fluctuation_model(&series).unwrap();
        assert!((result.peak_t_k - 360.0).abs() < 1.0, "peak at {}", result.peak_t_k);
        assert!(result.fit.residual_norm < 1e-6);
    }

    #[test]
    fn monotone_series_has_no_peak() {
        let series: Vec<(f64, f64, f64)> =
            (0..8).map(|i| (300.0 + 10.0 * i as f64, i as f64, 0.1)).collect();
        assert!(matches!(fit_fluctuation_model(&series), Err(RelaxError::NoPeak)));
    }

    #[test]
    fn trace_csv_round_trip() {
        let delays = log_delays(12, 1.0, 500.0);
        let trace = synthesize_trace(6.2, 1.0, 1.0, &delays, 0.01, 5, meta()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&trace, &path).unwrap();
        let back = read_trace_csv(&path).unwrap();
        assert_eq!(back.delays_us.len(), trace.delays_us.len());
        assert_eq!(back.meta.position, Position::Reference);
        for (a, b) in back.signal.iter().zip(&trace.signal) {
            assert_relative_eq!(a, b, max_relative = 1e-8);
        }
    }

    #[test]
    fn stretched_exp_jacobian_matches_finite_differences() {
        let delays = log_delays(15, 0.5, 900.0);
        let params = [0.95, 8.0, 0.8];
        let delays_ref = &delays;
        let problem = ResidualProblem::new(3, move |p: &[f64]| {
            delays_ref
                .iter()
                .map(|&t| stretched_exp(p[0], p[1], p[2], t))
                .collect()
        });
        let analytic = stretched_exp_jacobian(&params, &delays, None);
        let numeric = numfit::finite_difference_jacobian(&problem, &params, 1e-6).unwrap();
        for r in 0..analytic.nrows() {
            for c in 0..analytic.ncols() {
                let diff = (analytic[(r, c)] - numeric[(r, c)]).abs();
                assert!(diff / numeric[(r, c)].abs().max(1e-8) < 1e-5);
            }
        }
    }
}
