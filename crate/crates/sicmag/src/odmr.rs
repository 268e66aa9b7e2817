//! Lock-in ODMR spectra: synthesis from the spin model, Lorentzian doublet
//! fitting, field extraction from the fitted splitting, and the differential
//! probe-minus-reference magnetometry step.

use crate::numfit::{self, FitOptions, FitResult, ResidualProblem};
use crate::spinmodel::{self, FieldVector, SensorSpinModel};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdmrError {
    #[error(transparent)]
    SpinModel(#[from] spinmodel::SpinModelError),
    #[error(transparent)]
    Fit(#[from] numfit::FitError),
    #[error("spectrum needs at least {needed} samples for {n_peaks} peaks, got {got}")]
    TooFewSamples {
        needed: usize,
        got: usize,
        n_peaks: usize,
    },
    #[error("peak detection found {found} candidate extrema, need {needed}; supply an initial guess")]
    Initialization { found: usize, needed: usize },
    #[error("frequency grid is empty or not strictly increasing")]
    BadGrid,
    #[error("n_peaks must be 1 or 2, got {0}")]
    BadPeakCount(usize),
    #[error("fit did not yield standard errors for the peak centers")]
    MissingUncertainty,
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

/// One Lorentzian line: `amplitude * (fwhm/2)^2 / ((f - center)^2 + (fwhm/2)^2)`.
/// Amplitude is signed lock-in contrast; dips are negative.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LorentzianPeak {
    pub center_mhz: f64,
    pub fwhm_mhz: f64,
    pub amplitude: f64,
}

impl LorentzianPeak {
    pub fn eval(&self, freq_mhz: f64) -> f64 {
        let hw = self.fwhm_mhz / 2.0;
        self.amplitude * hw * hw / ((freq_mhz - self.center_mhz).powi(2) + hw * hw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Probe,
    Reference,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Probe => write!(f, "probe"),
            Position::Reference => write!(f, "reference"),
        }
    }
}

impl std::str::FromStr for Position {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "probe" => Ok(Position::Probe),
            "reference" => Ok(Position::Reference),
            other => Err(format!("unknown position label '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumMeta {
    pub temperature_k: f64,
    pub field_g: f64,
    pub position: Position,
    pub seed: Option<u64>,
    /// Hysteresis branch label for field sweeps, free-form otherwise.
    pub branch: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdmrSpectrum {
    pub frequencies_mhz: Vec<f64>,
    pub signal: Vec<f64>,
    pub meta: SpectrumMeta,
    /// Set when a transition lands outside the grid by more than 3x fwhm;
    /// the fit is then unreliable but synthesis is not an error.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub start_mhz: f64,
    pub stop_mhz: f64,
    pub points: usize,
}

impl FrequencyGrid {
    pub fn sample(&self) -> Result<Vec<f64>, OdmrError> {
        if self.points < 2 || !(self.stop_mhz > self.start_mhz) {
            return Err(OdmrError::BadGrid);
        }
        let step = (self.stop_mhz - self.start_mhz) / (self.points - 1) as f64;
        Ok((0..self.points)
            .map(|i| self.start_mhz + step * i as f64)
            .collect())
    }
}

/// A field inverted from a fitted doublet, with its 1-standard-error
/// uncertainty and the center frequency as a D(T) cross-check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FieldEstimate {
    pub b_g: f64,
    pub sigma_b_g: f64,
    pub d_est_mhz: f64,
}

/// Baseline plus the two Zeeman-split Lorentzians at the model's transition
/// frequencies, with additive white Gaussian noise. Deterministic per seed.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_spectrum(
    model: &SensorSpinModel,
    field: &FieldVector,
    temperature_k: f64,
    grid: &FrequencyGrid,
    peak_fwhm_mhz: f64,
    contrast: f64,
    noise_sigma: f64,
    baseline: f64,
    seed: u64,
    meta: SpectrumMeta,
) -> Result<OdmrSpectrum, OdmrError> {
    if !(peak_fwhm_mhz > 0.0) || noise_sigma < 0.0 {
        return Err(OdmrError::BadGrid);
    }
    let frequencies = grid.sample()?;
    let (f_minus, f_plus) = spinmodel::transition_frequencies(model, field, temperature_k)?;
    let peaks = [
        LorentzianPeak {
            center_mhz: f_minus,
            fwhm_mhz: peak_fwhm_mhz,
            amplitude: contrast,
        },
        LorentzianPeak {
            center_mhz: f_plus,
            fwhm_mhz: peak_fwhm_mhz,
            amplitude: contrast,
        },
    ];
    let mut signal: Vec<f64> = frequencies
        .iter()
        .map(|&f| baseline + peaks.iter().map(|p| p.eval(f)).sum::<f64>())
        .collect();
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_sigma).expect("sigma validated above");
        for s in &mut signal {
            *s += noise.sample(&mut rng);
        }
    }
    let margin = 3.0 * peak_fwhm_mhz;
    let warning = peaks
        .iter()
        .find(|p| {
            p.center_mhz < grid.start_mhz - margin || p.center_mhz > grid.stop_mhz + margin
        })
        .map(|p| {
            format!(
                "transition at {:.3} MHz lies outside the grid [{}, {}] by more than 3x fwhm",
                p.center_mhz, grid.start_mhz, grid.stop_mhz
            )
        });
    Ok(OdmrSpectrum {
        frequencies_mhz: frequencies,
        signal,
        meta: SpectrumMeta {
            seed: Some(seed),
            temperature_k,
            ..meta
        },
        warning,
    })
}

#[derive(Debug, Clone)]
pub struct SpectrumFit {
    pub peaks: Vec<LorentzianPeak>,
    pub baseline: f64,
    pub fit: FitResult,
}

fn model_signal(params: &[f64], freq: f64, n_peaks: usize) -> f64 {
    let mut v = params[0];
    for k in 0..n_peaks {
        let p = LorentzianPeak {
            center_mhz: params[1 + 3 * k],
            fwhm_mhz: params[2 + 3 * k],
            amplitude: params[3 + 3 * k],
        };
        v += p.eval(freq);
    }
    v
}

/// Analytic Jacobian of the (baseline + n Lorentzians) residual model.
pub fn lorentzian_jacobian(params: &[f64], freqs: &[f64], n_peaks: usize) -> DMatrix<f64> {
    DMatrix::from_fn(freqs.len(), 1 + 3 * n_peaks, |r, c| {
        let f = freqs[r];
        if c == 0 {
            return 1.0;
        }
        let k = (c - 1) / 3;
        let center = params[1 + 3 * k];
        let fwhm = params[2 + 3 * k];
        let amp = params[3 + 3 * k];
        let hw = fwhm / 2.0;
        let df = f - center;
        let den = df * df + hw * hw;
        match (c - 1) % 3 {
            0 => amp * hw * hw * 2.0 * df / (den * den),
            1 => amp * hw * df * df / (den * den), // d/d(fwhm) = (1/2) d/d(hw)
            _ => hw * hw / den,
        }
    })
}

fn boxcar_smooth(signal: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let n = signal.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            signal[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Initial peak guesses: boxcar smoothing (width 5), then the most prominent
/// strict local extrema of the smoothed signal measured against the median.
pub fn detect_peaks(spectrum: &OdmrSpectrum, n_peaks: usize) -> Vec<LorentzianPeak> {
    let smoothed = boxcar_smooth(&spectrum.signal, 5);
    let base = median(&smoothed);
    let freqs = &spectrum.frequencies_mhz;
    let mut candidates: Vec<(usize, f64)> = Vec::new();
    // plateau-aware: a flat top from symmetric sampling still counts, the
    // left edge stands in for the extremum
    for i in 1..smoothed.len().saturating_sub(1) {
        let up = smoothed[i] > smoothed[i - 1] && smoothed[i] >= smoothed[i + 1];
        let down = smoothed[i] < smoothed[i - 1] && smoothed[i] <= smoothed[i + 1];
        if up || down {
            candidates.push((i, (smoothed[i] - base).abs()));
        }
    }
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    // greedy suppression: noise splits one line into several nearby extrema,
    // so later candidates within a linewidth of a kept one are duplicates
    let mut kept: Vec<(usize, f64)> = Vec::new();
    for &(i, prominence) in &candidates {
        if kept.len() >= n_peaks {
            break;
        }
        let width_i = half_crossing_width(&smoothed, freqs, base, i, prominence);
        if kept
            .iter()
            .all(|&(j, _)| (freqs[i] - freqs[j]).abs() > width_i)
        {
            kept.push((i, prominence));
        }
    }
    let mut candidates = kept;
    candidates.sort_by_key(|c| c.0);
    candidates
        .iter()
        .map(|&(i, prominence)| LorentzianPeak {
            center_mhz: freqs[i],
            fwhm_mhz: half_crossing_width(&smoothed, freqs, base, i, prominence),
            amplitude: smoothed[i] - base,
        })
        .collect()
}

/// Half-prominence crossing width around sample `i`, floored at 1% of span;
/// doubles as the fwhm guess and the duplicate-suppression radius.
fn half_crossing_width(
    smoothed: &[f64],
    freqs: &[f64],
    base: f64,
    i: usize,
    prominence: f64,
) -> f64 {
    let half = prominence / 2.0;
    let mut left = i;
    while left > 0 && (smoothed[left] - base).abs() > half {
        left -= 1;
    }
    let mut right = i;
    while right + 1 < smoothed.len() && (smoothed[right] - base).abs() > half {
        right += 1;
    }
    let span = freqs[freqs.len() - 1] - freqs[0];
    (freqs[right] - freqs[left]).max(span / 100.0)
}

/// Least-squares fit of baseline + `n_peaks` Lorentzians. Peaks come back
/// sorted by center. Without `init`, centers are seeded from
/// smoothed-extremum detection; too few candidates is an initialization
/// error rather than a silent bad fit.
pub fn fit_spectrum(
    spectrum: &OdmrSpectrum,
    n_peaks: usize,
    init: Option<&[LorentzianPeak]>,
) -> Result<SpectrumFit, OdmrError> {
    if !(1..=2).contains(&n_peaks) {
        return Err(OdmrError::BadPeakCount(n_peaks));
    }
    let n_samples = spectrum.signal.len();
    if n_samples < 8 * n_peaks || n_samples != spectrum.frequencies_mhz.len() {
        return Err(OdmrError::TooFewSamples {
            needed: 8 * n_peaks,
            got: n_samples,
            n_peaks,
        });
    }
    let guesses = match init {
        Some(peaks) if peaks.len() >= n_peaks => peaks[..n_peaks].to_vec(),
        Some(peaks) => {
            return Err(OdmrError::Initialization {
                found: peaks.len(),
                needed: n_peaks,
            })
        }
        None => {
            let detected = detect_peaks(spectrum, n_peaks);
            if detected.len() < n_peaks {
                return Err(OdmrError::Initialization {
                    found: detected.len(),
                    needed: n_peaks,
                });
            }
            detected
        }
    };

    let mut init_params = vec![median(&spectrum.signal)];
    for p in &guesses {
        init_params.extend_from_slice(&[p.center_mhz, p.fwhm_mhz, p.amplitude]);
    }
    let freqs = &spectrum.frequencies_mhz;
    let signal = &spectrum.signal;
    let span = freqs[freqs.len() - 1] - freqs[0];
    let mut lower = vec![f64::NEG_INFINITY; 1 + 3 * n_peaks];
    let mut upper = vec![f64::INFINITY; 1 + 3 * n_peaks];
    for k in 0..n_peaks {
        // centers stay on the grid (small slack for edge peaks), widths stay
        // between resolvable and the full span; otherwise a bad seed can send
        // one line off to infinity while the other absorbs both dips
        lower[1 + 3 * k] = freqs[0] - 0.1 * span;
        upper[1 + 3 * k] = freqs[freqs.len() - 1] + 0.1 * span;
        lower[2 + 3 * k] = span * 1e-6;
        upper[2 + 3 * k] = span;
        init_params[1 + 3 * k] = init_params[1 + 3 * k].clamp(lower[1 + 3 * k], upper[1 + 3 * k]);
        init_params[2 + 3 * k] = init_params[2 + 3 * k].clamp(lower[2 + 3 * k] * 2.0, span);
    }

    let problem = ResidualProblem::new(1 + 3 * n_peaks, move |p: &[f64]| {
        freqs
            .iter()
            .zip(signal)
            .map(|(&f, &y)| model_signal(p, f, n_peaks) - y)
            .collect()
    })
    .with_bounds(lower, upper)?
    .with_jacobian(move |p: &[f64]| lorentzian_jacobian(p, freqs, n_peaks));

    let fit = numfit::levenberg_marquardt(&problem, &init_params, &FitOptions::default())?;
    let baseline = fit.params[0];
    let mut order: Vec<usize> = (0..n_peaks).collect();
    order.sort_by(|&a, &b| fit.params[1 + 3 * a].total_cmp(&fit.params[1 + 3 * b]));
    let peaks = order
        .iter()
        .map(|&k| LorentzianPeak {
            center_mhz: fit.params[1 + 3 * k],
            fwhm_mhz: fit.params[2 + 3 * k],
            amplitude: fit.params[3 + 3 * k],
        })
        .collect();
    Ok(SpectrumFit {
        peaks,
        baseline,
        fit,
    })
}

/// Fit a doublet and invert the splitting into an axial field estimate.
/// A doublet that is not actually resolved (one extremum candidate, centers
/// closer than the linewidth, or a spurious second line fitting noise) is
/// reported as B = 0 with the resolution limit as its uncertainty, from a
/// single-peak fit; a two-line fit of a merged dip is noise-driven and can
/// place the phantom splitting anywhere.
pub fn extract_field(
    spectrum: &OdmrSpectrum,
    model: &SensorSpinModel,
) -> Result<FieldEstimate, OdmrError> {
    let fit = match fit_spectrum(spectrum, 2, None) {
        Ok(f) => f,
        Err(OdmrError::Initialization { found: 1, .. }) => {
            return merged_estimate(spectrum, model);
        }
        Err(e) => return Err(e),
    };
    let single = fit_spectrum(spectrum, 1, None)?;
    let (lo, hi) = (&fit.peaks[0], &fit.peaks[1]);
    let mean_fwhm = 0.5 * (lo.fwhm_mhz + hi.fwhm_mhz);
    let (amp_lo, amp_hi) = (lo.amplitude.abs(), hi.amplitude.abs());
    // beyond the geometric checks, the doublet must beat the single line by
    // a clear chi-square margin; splitting one dip in two always improves
    // the fit a little by absorbing noise
    let resolved = hi.center_mhz - lo.center_mhz > 0.75 * mean_fwhm
        && lo.amplitude * hi.amplitude > 0.0
        && amp_lo.min(amp_hi) > 0.2 * amp_lo.max(amp_hi)
        && single.fit.residual_norm.powi(2) > 1.3 * fit.fit.residual_norm.powi(2);
    if !resolved {
        return merged_estimate(spectrum, model);
    }
    let inversion = spinmodel::field_from_splitting(model, lo.center_mhz, hi.center_mhz)?;
    // center std errors live at parameter slots 1 and 4
    let sigma_b = match (fit.fit.std_error(1), fit.fit.std_error(4)) {
        (Some(s1), Some(s2)) => {
            (s1 * s1 + s2 * s2).sqrt() / (2.0 * model.gamma_mhz_per_g)
        }
        // singular covariance: uncertainty unbounded
        _ => f64::INFINITY,
    };
    Ok(FieldEstimate {
        b_g: inversion.field_g,
        sigma_b_g: sigma_b,
        d_est_mhz: inversion.center_mhz,
    })
}

fn merged_estimate(
    spectrum: &OdmrSpectrum,
    model: &SensorSpinModel,
) -> Result<FieldEstimate, OdmrError> {
    let fit = fit_spectrum(spectrum, 1, None)?;
    let peak = &fit.peaks[0];
    // splitting below the linewidth is unresolved; half a linewidth in field
    // units bounds what could hide inside the merged line
    Ok(FieldEstimate {
        b_g: 0.0,
        sigma_b_g: 0.5 * peak.fwhm_mhz / (2.0 * model.gamma_mhz_per_g),
        d_est_mhz: peak.center_mhz,
    })
}

/// B_FGT = |B_probe - B_reference| with quadrature-summed uncertainty.
pub fn differential_field(probe: &FieldEstimate, reference: &FieldEstimate) -> (f64, f64) {
    let b = (probe.b_g - reference.b_g).abs();
    let sigma = (probe.sigma_b_g.powi(2) + reference.sigma_b_g.powi(2)).sqrt();
    (b, sigma)
}

// ---------------------------------------------------------------------------
// CSV interface: `freq_mhz,signal` rows with `# key: value` metadata
// comments. A sidecar `<file>.meta` of key=value lines is also accepted on
// read; comments are what gets written.
// ---------------------------------------------------------------------------

pub fn write_spectrum_csv(spectrum: &OdmrSpectrum, path: &Path) -> Result<(), OdmrError> {
    let mut out = String::new();
    out.push_str(&format!("# temperature_k: {}\n", crate::io::fmt_num(spectrum.meta.temperature_k)));
    out.push_str(&format!("# field_g: {}\n", crate::io::fmt_num(spectrum.meta.field_g)));
    out.push_str(&format!("# position: {}\n", spectrum.meta.position));
    if let Some(seed) = spectrum.meta.seed {
        out.push_str(&format!("# seed: {seed}\n"));
    }
    if let Some(branch) = &spectrum.meta.branch {
        out.push_str(&format!("# branch: {branch}\n"));
    }
    if let Some(w) = &spectrum.warning {
        out.push_str(&format!("# warning: {w}\n"));
    }
    out.push_str("freq_mhz,signal\n");
    for (f, s) in spectrum.frequencies_mhz.iter().zip(&spectrum.signal) {
        out.push_str(&format!("{},{}\n", crate::io::fmt_num(*f), crate::io::fmt_num(*s)));
    }
    std::fs::write(path, out).map_err(|source| OdmrError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_spectrum_csv(path: &Path) -> Result<OdmrSpectrum, OdmrError> {
    let text = std::fs::read_to_string(path).map_err(|source| OdmrError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut meta_pairs = crate::io::read_sidecar_meta(path);
    let mut frequencies = Vec::new();
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
        if line.starts_with("freq_mhz") {
            continue;
        }
        let mut parts = line.split(',');
        let (f, s) = (parts.next(), parts.next());
        let parse = |v: Option<&str>, what: &str| -> Result<f64, OdmrError> {
            v.map(str::trim)
                .filter(|t| !t.is_empty())
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| OdmrError::Parse {
                    path: p.clone(),
                    line: lineno + 1,
                    message: format!("malformed {what} value"),
                })
        };
        frequencies.push(parse(f, "freq_mhz")?);
        signal.push(parse(s, "signal")?);
    }
    if frequencies.len() < 2 || !frequencies.windows(2).all(|w| w[1] > w[0]) {
        return Err(OdmrError::Parse {
            path: p,
            line: 0,
            message: "frequency column must be strictly increasing with >= 2 rows".into(),
        });
    }
    let get_f64 = |k: &str| meta_pairs.get(k).and_then(|v| v.parse::<f64>().ok());
    let position = meta_pairs
        .get("position")
        .and_then(|v| v.parse::<Position>().ok())
        .unwrap_or(Position::Probe);
    Ok(OdmrSpectrum {
        frequencies_mhz: frequencies,
        signal,
        meta: SpectrumMeta {
            temperature_k: get_f64("temperature_k").unwrap_or(f64::NAN),
            field_g: get_f64("field_g").unwrap_or(f64::NAN),
            position,
            seed: meta_pairs.get("seed").and_then(|v| v.parse().ok()),
            branch: meta_pairs.get("branch").cloned(),
        },
        warning: meta_pairs.get("warning").cloned(),
    })
}
