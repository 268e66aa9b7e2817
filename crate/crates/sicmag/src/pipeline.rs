//! Batch orchestration behind the CLI verbs: synthetic campaign generation,
//! spectrum/trace fitting over file sets, sweep analysis, and the
//! end-to-end `reproduce` run with its pass/fail table.
//!
//! Output layout: `out/odmr/`, `out/relax/`, `out/plots/`, `out/report.json`.
//! Reports carry no timestamps so identical inputs give identical bytes.

use crate::config::{derive_seed, ExperimentConfig};
use crate::magnet::{self, Branch};
use crate::odmr::{self, FieldEstimate, FrequencyGrid, OdmrSpectrum, Position, SpectrumMeta};
use crate::relaxometry::{self, FluctuationModel, PhononModelParams, TraceMeta};
use crate::spinmodel::{self, FieldVector, SensorSpinModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Odmr(#[from] odmr::OdmrError),
    #[error(transparent)]
    Relax(#[from] relaxometry::RelaxError),
    #[error(transparent)]
    Magnet(#[from] magnet::MagnetError),
    #[error(transparent)]
    SpinModel(#[from] spinmodel::SpinModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unpaired spectra: {0:?}")]
    Pairing(Vec<String>),
    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Run `f` on a rayon pool sized by `jobs` (0 = rayon default).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    if jobs == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool")
            .install(f)
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationManifest {
    pub odmr_files: Vec<PathBuf>,
    pub relax_files: Vec<PathBuf>,
}

struct SpectrumJob {
    path: PathBuf,
    field: FieldVector,
    temperature_k: f64,
    nominal_field_g: f64,
    position: Position,
    branch: Option<Branch>,
    seed_label: String,
}

/// Generate the synthetic measurement campaign: ODMR spectra per
/// (temperature, position) at the bias field, per (branch, field, position)
/// in the field sweep, and relaxation traces per (temperature, position).
/// Probe spectra include the magnet's stray field; reference spectra do not.
pub fn run_simulate(
    config: &ExperimentConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<SimulationManifest, PipelineError> {
    let odmr_dir = out_dir.join("odmr");
    let relax_dir = out_dir.join("relax");
    std::fs::create_dir_all(&odmr_dir).map_err(io_err(&odmr_dir))?;
    std::fs::create_dir_all(&relax_dir).map_err(io_err(&relax_dir))?;

    let mut jobs_list: Vec<SpectrumJob> = Vec::new();
    // temperature sweep at the bias field, ascending branch (saturated once)
    for (i, &t) in config.sweeps.temperatures_k.iter().enumerate() {
        let bias = config.sweeps.bias_field_g;
        let stray = magnet::signed_field_at_sensor(
            &config.magnet,
            &config.geometry,
            &config.placement,
            t,
            bias,
            Branch::Ascending,
        )?;
        for (position, bz) in [
            (Position::Reference, bias),
            (Position::Probe, bias + stray),
        ] {
            jobs_list.push(SpectrumJob {
                path: odmr_dir.join(format!("temp_{i:02}_{position}.csv")),
                field: FieldVector::axial(bz),
                temperature_k: t,
                nominal_field_g: bias,
                position,
                branch: None,
                seed_label: format!("odmr/temp/{i}/{position}"),
            });
        }
    }
    // field sweep at fixed temperature, both hysteresis branches
    let t_sweep = config.sweeps.field_sweep_temperature_k;
    for branch in [Branch::Ascending, Branch::Descending] {
        for (j, &h) in config.sweeps.fields_g.iter().enumerate() {
            let stray = magnet::signed_field_at_sensor(
                &config.magnet,
                &config.geometry,
                &config.placement,
                t_sweep,
                h,
                branch,
            )?;
            for (position, bz) in [(Position::Reference, h), (Position::Probe, h + stray)] {
                jobs_list.push(SpectrumJob {
                    path: odmr_dir.join(format!("field_{branch}_{j:02}_{position}.csv")),
                    field: FieldVector::axial(bz),
                    temperature_k: t_sweep,
                    nominal_field_g: h,
                    position,
                    branch: Some(branch),
                    seed_label: format!("odmr/field/{branch}/{j}/{position}"),
                });
            }
        }
    }

    let odmr_files: Vec<PathBuf> = with_jobs(jobs, || {
        jobs_list
            .par_iter()
            .map(|job| -> Result<PathBuf, PipelineError> {
                let spectrum = synthesize_job(config, job)?;
                odmr::write_spectrum_csv(&spectrum, &job.path)?;
                Ok(job.path.clone())
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    // relaxation traces: reference carries the phonon background, probe adds
    // the magnet's fluctuation rate
    let delays = config.relax.delays();
    let mut trace_jobs: Vec<(PathBuf, f64, Position, String)> = Vec::new();
    for (i, &t) in config.sweeps.temperatures_k.iter().enumerate() {
        let gamma_r = relaxometry::phonon_rate(&config.phonon, t);
        let gamma_p = gamma_r + relaxometry::fluctuation_rate(&config.fluctuation, t);
        trace_jobs.push((
            relax_dir.join(format!("temp_{i:02}_reference.csv")),
            gamma_r,
            Position::Reference,
            format!("relax/temp/{i}/reference"),
        ));
        trace_jobs.push((
            relax_dir.join(format!("temp_{i:02}_probe.csv")),
            gamma_p,
            Position::Probe,
            format!("relax/temp/{i}/probe"),
        ));
    }
    let temps = &config.sweeps.temperatures_k;
    let relax_files: Vec<PathBuf> = with_jobs(jobs, || {
        trace_jobs
            .par_iter()
            .map(|(path, gamma, position, label)| -> Result<PathBuf, PipelineError> {
                let i: usize = label
                    .split('/')
                    .nth(2)
                    .and_then(|s| s.parse().ok())
                    .expect("label carries the sweep index");
                let trace = relaxometry::synthesize_trace(
                    *gamma,
                    config.relax.n_stretch,
                    config.relax.amplitude,
                    &delays,
                    config.relax.noise_sigma,
                    derive_seed(config.master_seed, label),
                    TraceMeta {
                        temperature_k: temps[i],
                        field_g: config.sweeps.relax_field_g,
                        position: *position,
                        seed: None,
                    },
                )?;
                relaxometry::write_trace_csv(&trace, path)?;
                Ok(path.clone())
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    Ok(SimulationManifest {
        odmr_files,
        relax_files,
    })
}

fn synthesize_job(
    config: &ExperimentConfig,
    job: &SpectrumJob,
) -> Result<OdmrSpectrum, PipelineError> {
    let (f_minus, f_plus) =
        spinmodel::transition_frequencies(&config.sensor, &job.field, job.temperature_k)?;
    let grid = FrequencyGrid {
        start_mhz: f_minus.min(f_plus) - config.odmr.margin_mhz,
        stop_mhz: f_plus.max(f_minus) + config.odmr.margin_mhz,
        points: config.odmr.points,
    };
    let spectrum = odmr::synthesize_spectrum(
        &config.sensor,
        &job.field,
        job.temperature_k,
        &grid,
        config.odmr.fwhm_mhz,
        config.odmr.contrast,
        config.odmr.noise_sigma,
        config.odmr.baseline,
        derive_seed(config.master_seed, &job.seed_label),
        SpectrumMeta {
            temperature_k: job.temperature_k,
            field_g: job.nominal_field_g,
            position: job.position,
            seed: None,
            branch: job.branch.map(|b| b.to_string()),
        },
    )?;
    Ok(spectrum)
}

// ---------------------------------------------------------------------------
// fit-odmr
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdmrPairRow {
    pub temperature_k: f64,
    pub field_g: f64,
    pub branch: Option<String>,
    pub b_tot_g: f64,
    pub sigma_tot_g: f64,
    pub b_0_g: f64,
    pub sigma_0_g: f64,
    pub b_fgt_g: f64,
    pub sigma_fgt_g: f64,
    /// Center-frequency D(T) estimate from the reference pair, MHz.
    pub d_est_mhz: f64,
}

/// Fit every spectrum, pair probe/reference by (temperature, field, branch)
/// metadata, and compute per-pair B_tot, B_0 and B_FGT.
pub fn run_fit_odmr(
    inputs: &[PathBuf],
    sensor: &SensorSpinModel,
    jobs: usize,
) -> Result<Vec<OdmrPairRow>, PipelineError> {
    let spectra: Vec<(PathBuf, OdmrSpectrum)> = inputs
        .iter()
        .map(|p| odmr::read_spectrum_csv(p).map(|s| (p.clone(), s)))
        .collect::<Result<Vec<_>, _>>()?;

    let estimates: Vec<(PathBuf, SpectrumMeta, FieldEstimate)> = with_jobs(jobs, || {
        spectra
            .par_iter()
            .map(|(path, spectrum)| -> Result<_, PipelineError> {
                let estimate = odmr::extract_field(spectrum, sensor)?;
                Ok((path.clone(), spectrum.meta.clone(), estimate))
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    let mut groups: BTreeMap<String, Vec<(PathBuf, SpectrumMeta, FieldEstimate)>> =
        BTreeMap::new();
    for entry in estimates {
        let key = format!(
            "{:.6}|{:.6}|{}",
            entry.1.temperature_k,
            entry.1.field_g,
            entry.1.branch.as_deref().unwrap_or("-")
        );
        groups.entry(key).or_default().push(entry);
    }

    let mut rows = Vec::new();
    let mut orphans = Vec::new();
    for (_, group) in groups {
        let probe = group.iter().find(|g| g.1.position == Position::Probe);
        let reference = group.iter().find(|g| g.1.position == Position::Reference);
        match (probe, reference) {
            (Some(p), Some(r)) => {
                let (b_fgt, sigma_fgt) = odmr::differential_field(&p.2, &r.2);
                rows.push(OdmrPairRow {
                    temperature_k: p.1.temperature_k,
                    field_g: p.1.field_g,
                    branch: p.1.branch.clone(),
                    b_tot_g: p.2.b_g,
                    sigma_tot_g: p.2.sigma_b_g,
                    b_0_g: r.2.b_g,
                    sigma_0_g: r.2.sigma_b_g,
                    b_fgt_g: b_fgt,
                    sigma_fgt_g: sigma_fgt,
                    d_est_mhz: r.2.d_est_mhz,
                });
            }
            _ => orphans.extend(group.iter().map(|g| g.0.display().to_string())),
        }
    }
    if !orphans.is_empty() {
        return Err(PipelineError::Pairing(orphans));
    }
    rows.sort_by(|a, b| {
        (a.branch.clone(), a.temperature_k, a.field_g)
            .partial_cmp(&(b.branch.clone(), b.temperature_k, b.field_g))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(rows)
}

pub fn write_odmr_rows_csv(rows: &[OdmrPairRow], path: &Path) -> Result<(), PipelineError> {
    use crate::io::fmt_num as f;
    let mut out = String::from(
        "temperature_k,field_g,branch,b_tot_g,sigma_tot_g,b_0_g,sigma_0_g,b_fgt_g,sigma_fgt_g,d_est_mhz\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            f(r.temperature_k),
            f(r.field_g),
            r.branch.as_deref().unwrap_or("-"),
            f(r.b_tot_g),
            f(r.sigma_tot_g),
            f(r.b_0_g),
            f(r.sigma_0_g),
            f(r.b_fgt_g),
            f(r.sigma_fgt_g),
            f(r.d_est_mhz)
        ));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// The temperature-sweep rows as a (T, B_FGT, sigma) series.
pub fn bfgt_series(rows: &[OdmrPairRow]) -> Vec<(f64, f64, f64)> {
    rows.iter()
        .filter(|r| r.branch.is_none())
        .map(|r| (r.temperature_k, r.b_fgt_g, r.sigma_fgt_g))
        .collect()
}

pub fn write_bfgt_series_csv(
    series: &[(f64, f64, f64)],
    path: &Path,
) -> Result<(), PipelineError> {
    use crate::io::fmt_num as f;
    let mut out = String::from("temperature_k,b_fgt_g,sigma_g\n");
    for (t, b, s) in series {
        out.push_str(&format!("{},{},{}\n", f(*t), f(*b), f(*s)));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_bfgt_series_csv(path: &Path) -> Result<Vec<(f64, f64, f64)>, PipelineError> {
    // same three-column shape as the rate series
    Ok(relaxometry::read_rate_series_csv(path)?)
}

/// Coercive-field estimate from the field-sweep rows: on each branch the
/// signed differential sign(H) * (B_tot - B_0) flips where the magnet
/// switches; the estimate is the midpoint of the bracketing fields, averaged
/// over branches.
pub fn estimate_coercive_field(rows: &[OdmrPairRow]) -> Option<f64> {
    let mut estimates = Vec::new();
    for branch in ["ascending", "descending"] {
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.branch.as_deref() == Some(branch) && r.field_g != 0.0)
            .map(|r| (r.field_g, r.field_g.signum() * (r.b_tot_g - r.b_0_g)))
            .collect();
        if branch == "ascending" {
            pts.retain(|p| p.0 > 0.0);
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        } else {
            pts.retain(|p| p.0 < 0.0);
            pts.sort_by(|a, b| b.0.total_cmp(&a.0));
        }
        for w in pts.windows(2) {
            if w[0].1 * w[1].1 < 0.0 {
                estimates.push(0.5 * (w[0].0 + w[1].0).abs());
                break;
            }
        }
    }
    if estimates.is_empty() {
        None
    } else {
        Some(estimates.iter().sum::<f64>() / estimates.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// fit-relax / fit-phonon / fluctuation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateRow {
    pub temperature_k: f64,
    pub position: String,
    pub gamma_khz: f64,
    pub sigma_khz: f64,
    pub n_stretch: f64,
    pub converged: bool,
}

pub fn run_fit_relax(
    inputs: &[PathBuf],
    fix_n: Option<f64>,
    jobs: usize,
) -> Result<Vec<RateRow>, PipelineError> {
    let traces: Vec<_> = inputs
        .iter()
        .map(|p| relaxometry::read_trace_csv(p).map(|t| (p.clone(), t)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows: Vec<RateRow> = with_jobs(jobs, || {
        traces
            .par_iter()
            .map(|(path, trace)| -> Result<RateRow, PipelineError> {
                let fit = relaxometry::fit_trace(trace, fix_n).map_err(|e| {
                    PipelineError::Stage {
                        stage: format!("fit-relax {}", path.display()),
                        message: e.to_string(),
                    }
                })?;
                Ok(RateRow {
                    temperature_k: trace.meta.temperature_k,
                    position: trace.meta.position.to_string(),
                    gamma_khz: fit.gamma_khz,
                    sigma_khz: fit.gamma_sigma_khz(),
                    n_stretch: fit.n_stretch,
                    converged: fit.fit.converged,
                })
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    rows.sort_by(|a, b| {
        (a.position.clone(), a.temperature_k)
            .partial_cmp(&(b.position.clone(), b.temperature_k))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(rows)
}

pub fn write_rate_rows_csv(rows: &[RateRow], path: &Path) -> Result<(), PipelineError> {
    use crate::io::fmt_num as f;
    let mut out = String::from("temperature_k,position,gamma_khz,sigma_khz,n_stretch,converged\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f(r.temperature_k),
            r.position,
            f(r.gamma_khz),
            f(r.sigma_khz),
            f(r.n_stretch),
            r.converged
        ));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

fn rate_series(rows: &[RateRow], position: &str) -> Vec<(f64, f64, f64)> {
    let mut series: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter(|r| r.position == position)
        .map(|r| (r.temperature_k, r.gamma_khz, r.sigma_khz))
        .collect();
    series.sort_by(|a, b| a.0.total_cmp(&b.0));
    series
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluctuationReport {
    pub gamma_fgt: Vec<(f64, f64, f64)>,
    pub peak_t_k: f64,
    pub model: FluctuationModel,
    pub converged: bool,
}

/// Chained differential pipeline: probe and reference rate series in,
/// Gamma_FGT series and its susceptibility-peak fit out. Temperatures must
/// match pairwise; unpaired points are a pairing error.
pub fn run_fluctuation(
    probe: &[(f64, f64, f64)],
    reference: &[(f64, f64, f64)],
) -> Result<FluctuationReport, PipelineError> {
    let mut by_temp: BTreeMap<String, [Option<(f64, f64, f64)>; 2]> = BTreeMap::new();
    for &p in probe {
        by_temp.entry(format!("{:.6}", p.0)).or_default()[0] = Some(p);
    }
    for &r in reference {
        by_temp.entry(format!("{:.6}", r.0)).or_default()[1] = Some(r);
    }
    let mut series = Vec::new();
    let mut orphans = Vec::new();
    for (key, pair) in by_temp {
        match pair {
            [Some(p), Some(r)] => {
                let d = relaxometry::differential_rate(p.1, r.1, p.2, r.2);
                series.push((p.0, d.gamma_fgt_khz, d.sigma_khz));
            }
            _ => orphans.push(format!("T = {key} K")),
        }
    }
    if !orphans.is_empty() {
        return Err(PipelineError::Pairing(orphans));
    }
    let fit = relaxometry::fit_fluctuation_model(&series)?;
    Ok(FluctuationReport {
        gamma_fgt: series,
        peak_t_k: fit.peak_t_k,
        converged: fit.fit.converged,
        model: fit.model,
    })
}

// ---------------------------------------------------------------------------
// reproduce
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub master_seed: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub expected: f64,
    pub recovered: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(name: &str, expected: f64, recovered: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            expected,
            recovered,
            tolerance,
            pass: (recovered - expected).abs() <= tolerance,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TcSummary {
    pub tc_k: f64,
    pub beta_crit: f64,
    pub b0_scale_g: f64,
    pub dbdt_extremum_k: Option<f64>,
    pub extrapolation_warning: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub provenance: Provenance,
    pub odmr_pairs: Vec<OdmrPairRow>,
    pub tc_from_bfgt: Option<TcSummary>,
    pub coercive_field_g: Option<f64>,
    pub rates: Vec<RateRow>,
    pub phonon_fit: Option<PhononModelParams>,
    pub fluctuation: Option<FluctuationReport>,
    pub checks: Vec<CheckRow>,
}

impl AnalysisReport {
    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Full chain: simulate, fit every artifact, estimate Tc / Hc / rates, and
/// compare recovered values against the configured ground truth.
pub fn run_reproduce(
    config: &ExperimentConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<AnalysisReport, PipelineError> {
    fn stage(name: &'static str) -> impl Fn(PipelineError) -> PipelineError {
        move |e| PipelineError::Stage {
            stage: name.to_string(),
            message: e.to_string(),
        }
    }

    let manifest = run_simulate(config, out_dir, jobs).map_err(stage("simulate"))?;
    let plots_dir = out_dir.join("plots");
    std::fs::create_dir_all(&plots_dir).map_err(io_err(&plots_dir))?;

    // static magnetometry
    let odmr_rows =
        run_fit_odmr(&manifest.odmr_files, &config.sensor, jobs).map_err(stage("fit-odmr"))?;
    write_odmr_rows_csv(&odmr_rows, &out_dir.join("odmr_pairs.csv"))?;
    let series = bfgt_series(&odmr_rows);
    write_bfgt_series_csv(&series, &plots_dir.join("b_fgt_vs_t.csv"))?;
    let tc_estimate = magnet::estimate_tc(&series).map_err(|e| PipelineError::Stage {
        stage: "estimate-tc".into(),
        message: e.to_string(),
    })?;
    write_tc_curve_csv(&tc_estimate, &series, &plots_dir.join("tc_fit_curve.csv"))?;
    let coercive = estimate_coercive_field(&odmr_rows);
    write_hysteresis_csv(&odmr_rows, &plots_dir.join("b_fgt_vs_h.csv"))?;

    // relaxometry
    let rate_rows = run_fit_relax(&manifest.relax_files, None, jobs).map_err(stage("fit-relax"))?;
    write_rate_rows_csv(&rate_rows, &out_dir.join("rates.csv"))?;
    let reference_series = rate_series(&rate_rows, "reference");
    let probe_series = rate_series(&rate_rows, "probe");
    relaxometry::write_rate_series_csv(&reference_series, &plots_dir.join("gamma_r_vs_t.csv"))?;
    relaxometry::write_rate_series_csv(&probe_series, &plots_dir.join("gamma_p_vs_t.csv"))?;
    let (phonon_fit, _) =
        relaxometry::fit_phonon_model(&reference_series).map_err(|e| PipelineError::Stage {
            stage: "fit-phonon".into(),
            message: e.to_string(),
        })?;
    let fluctuation = run_fluctuation(&probe_series, &reference_series)
        .map_err(stage("fluctuation"))?;
    relaxometry::write_rate_series_csv(
        &fluctuation.gamma_fgt,
        &plots_dir.join("gamma_fgt_vs_t.csv"),
    )?;

    // pass/fail table against configured truth
    let tol = &config.tolerances;
    let mut checks = vec![
        CheckRow::new("tc_from_b_fgt_k", config.magnet.tc_k, tc_estimate.tc_k, tol.tc_k),
        CheckRow::new(
            "fluctuation_peak_k",
            config.fluctuation.tc_k,
            fluctuation.peak_t_k,
            tol.fluctuation_peak_k,
        ),
        CheckRow::new(
            "b_fgt_first_temperature_g",
            magnet::field_at_sensor(
                &config.magnet,
                &config.geometry,
                &config.placement,
                config.sweeps.temperatures_k[0],
                config.sweeps.bias_field_g,
                Branch::Ascending,
            )?,
            series.first().map(|s| s.1).unwrap_or(f64::NAN),
            tol.b_fgt_g,
        ),
    ];
    if let Some(hc) = coercive {
        checks.push(CheckRow::new("coercive_field_g", config.magnet.hc_g, hc, tol.hc_g));
    }
    for (t, gamma, _) in [reference_series.first(), reference_series.last()]
        .into_iter()
        .flatten()
    {
        let truth = relaxometry::phonon_rate(&config.phonon, *t);
        checks.push(CheckRow::new(
            &format!("gamma_r_at_{t:.1}_khz"),
            truth,
            *gamma,
            tol.rate_rel * truth,
        ));
    }

    let report = AnalysisReport {
        provenance: Provenance {
            config_sha256: config.sha256(),
            master_seed: config.master_seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        odmr_pairs: odmr_rows,
        tc_from_bfgt: Some(TcSummary {
            tc_k: tc_estimate.tc_k,
            beta_crit: tc_estimate.beta_crit,
            b0_scale_g: tc_estimate.b0_scale_g,
            dbdt_extremum_k: tc_estimate.dbdt_extremum_k,
            extrapolation_warning: tc_estimate.extrapolation_warning,
        }),
        coercive_field_g: coercive,
        rates: rate_rows,
        phonon_fit: Some(phonon_fit),
        fluctuation: Some(fluctuation),
        checks,
    };
    let report_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&report_path, json).map_err(io_err(&report_path))?;
    Ok(report)
}

pub fn write_tc_curve_csv(
    estimate: &magnet::TcEstimate,
    series: &[(f64, f64, f64)],
    path: &Path,
) -> Result<(), PipelineError> {
    use crate::io::fmt_num as f;
    let (t_min, t_max) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |acc, s| {
            (acc.0.min(s.0), acc.1.max(s.0))
        });
    let mut out = String::from("temperature_k,b_fgt_fit_g\n");
    for i in 0..200 {
        let t = t_min + (t_max - t_min) * i as f64 / 199.0;
        let b = estimate.b0_scale_g * (1.0 - t / estimate.tc_k).max(0.0).powf(estimate.beta_crit);
        out.push_str(&format!("{},{}\n", f(t), f(b)));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

fn write_hysteresis_csv(rows: &[OdmrPairRow], path: &Path) -> Result<(), PipelineError> {
    use crate::io::fmt_num as f;
    let mut out = String::from("branch,field_g,b_fgt_g,sigma_g,signed_delta_g\n");
    for r in rows.iter().filter(|r| r.branch.is_some()) {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.branch.as_deref().unwrap_or("-"),
            f(r.field_g),
            f(r.b_fgt_g),
            f(r.sigma_fgt_g),
            f(r.field_g.signum() * (r.b_tot_g - r.b_0_g)),
        ));
    }
    std::fs::write(path, out).map_err(io_err(path))
}
