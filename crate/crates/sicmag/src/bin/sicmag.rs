use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sicmag::config::ExperimentConfig;
use sicmag::pipeline;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "sicmag", version, about = "Divacancy-spin magnetometry simulator and fitter")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// TOML experiment configuration; defaults are used when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch stages (0 = automatic)
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Output directory root
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format for analysis results
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic ODMR and relaxometry campaign
    Simulate,
    /// Fit spectra and compute differential fields over probe/reference pairs
    FitOdmr {
        /// Spectrum CSV files (probe and reference)
        inputs: Vec<PathBuf>,
    },
    /// Fit the critical-scaling law to a B_FGT(T) series
    EstimateTc {
        /// CSV with columns temperature_k,b_fgt_g,sigma_g
        input: PathBuf,
    },
    /// Fit stretched-exponential decays to relaxation traces
    FitRelax {
        /// Trace CSV files
        inputs: Vec<PathBuf>,
        /// Hold the stretching exponent fixed at this value
        #[arg(long)]
        fix_n: Option<f64>,
    },
    /// Fit the phonon background model to a rate series
    FitPhonon {
        /// CSV with columns temperature_k,rate_khz,sigma_khz
        input: PathBuf,
    },
    /// Differential rates and susceptibility-peak fit from probe/reference series
    Fluctuation {
        probe: PathBuf,
        reference: PathBuf,
    },
    /// Full chain: simulate, analyze, and check recovered values against truth
    Reproduce,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn load_config(opts: &GlobalOpts) -> Result<ExperimentConfig> {
    let mut config = match &opts.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = opts.seed {
        config.master_seed = seed;
    }
    if let Some(out) = &opts.out {
        config.output_dir = out.display().to_string();
    }
    Ok(config)
}

fn emit<T: serde::Serialize>(format: Format, value: &T, csv: impl FnOnce() -> Result<()>) -> Result<()> {
    match format {
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
        Format::Csv => csv(),
    }
}

fn run(cli: Cli) -> Result<i32> {
    let config = load_config(&cli.global)?;
    let out_dir = PathBuf::from(&config.output_dir);
    let jobs = cli.global.jobs;
    match cli.command {
        Command::Simulate => {
            let manifest = pipeline::run_simulate(&config, &out_dir, jobs)?;
            println!(
                "wrote {} spectra and {} traces under {}",
                manifest.odmr_files.len(),
                manifest.relax_files.len(),
                out_dir.display()
            );
            Ok(0)
        }
        Command::FitOdmr { inputs } => {
            if inputs.is_empty() {
                bail!("no input spectra given");
            }
            let rows = pipeline::run_fit_odmr(&inputs, &config.sensor, jobs)?;
            emit(cli.global.format, &rows, || {
                std::fs::create_dir_all(&out_dir)?;
                let path = out_dir.join("odmr_pairs.csv");
                pipeline::write_odmr_rows_csv(&rows, &path)?;
                let series = pipeline::bfgt_series(&rows);
                if !series.is_empty() {
                    pipeline::write_bfgt_series_csv(&series, &out_dir.join("b_fgt_vs_t.csv"))?;
                }
                println!("wrote {} pairs to {}", rows.len(), path.display());
                Ok(())
            })?;
            if let Some(hc) = pipeline::estimate_coercive_field(&rows) {
                println!("coercive field estimate: {hc:.2} G");
            }
            Ok(0)
        }
        Command::EstimateTc { input } => {
            let series = pipeline::read_bfgt_series_csv(&input)?;
            let estimate = sicmag::magnet::estimate_tc(&series)?;
            let summary = pipeline::TcSummary {
                tc_k: estimate.tc_k,
                beta_crit: estimate.beta_crit,
                b0_scale_g: estimate.b0_scale_g,
                dbdt_extremum_k: estimate.dbdt_extremum_k,
                extrapolation_warning: estimate.extrapolation_warning,
            };
            emit(cli.global.format, &summary, || {
                std::fs::create_dir_all(&out_dir)?;
                let path = out_dir.join("tc_fit_curve.csv");
                pipeline::write_tc_curve_csv(&estimate, &series, &path)?;
                println!(
                    "Tc = {:.2} K, beta = {:.3}, B0 = {:.3} G (curve: {})",
                    estimate.tc_k,
                    estimate.beta_crit,
                    estimate.b0_scale_g,
                    path.display()
                );
                Ok(())
            })?;
            if estimate.extrapolation_warning {
                eprintln!("warning: Tc lies outside the sampled temperature range");
            }
            Ok(0)
        }
        Command::FitRelax { inputs, fix_n } => {
            if inputs.is_empty() {
                bail!("no input traces given");
            }
            let rows = pipeline::run_fit_relax(&inputs, fix_n, jobs)?;
            emit(cli.global.format, &rows, || {
                std::fs::create_dir_all(&out_dir)?;
                let path = out_dir.join("rates.csv");
                pipeline::write_rate_rows_csv(&rows, &path)?;
                println!("wrote {} rates to {}", rows.len(), path.display());
                Ok(())
            })?;
            Ok(0)
        }
        Command::FitPhonon { input } => {
            let series = sicmag::relaxometry::read_rate_series_csv(&input)?;
            let (params, fit) = sicmag::relaxometry::fit_phonon_model(&series)?;
            emit(cli.global.format, &params, || {
                println!(
                    "a = {:.4} kHz, b = {:.4} kHz, c = {:.4e} kHz/K^5, Delta = {:.2} meV ({} iterations)",
                    params.a_khz,
                    params.b_khz,
                    params.c_khz_per_k5,
                    params.delta_mev(),
                    fit.iterations
                );
                Ok(())
            })?;
            Ok(0)
        }
        Command::Fluctuation { probe, reference } => {
            let probe = sicmag::relaxometry::read_rate_series_csv(&probe)?;
            let reference = sicmag::relaxometry::read_rate_series_csv(&reference)?;
            let report = pipeline::run_fluctuation(&probe, &reference)?;
            emit(cli.global.format, &report, || {
                std::fs::create_dir_all(&out_dir)?;
                let path = out_dir.join("gamma_fgt_vs_t.csv");
                sicmag::relaxometry::write_rate_series_csv(&report.gamma_fgt, &path)?;
                println!(
                    "fluctuation peak at {:.2} K (series: {})",
                    report.peak_t_k,
                    path.display()
                );
                Ok(())
            })?;
            Ok(0)
        }
        Command::Reproduce => {
            let report = pipeline::run_reproduce(&config, &out_dir, jobs)?;
            print_checks(&report, &out_dir);
            Ok(if report.all_checks_pass() { 0 } else { 2 })
        }
    }
}

fn print_checks(report: &pipeline::AnalysisReport, out_dir: &Path) {
    for check in &report.checks {
        println!(
            "[{}] {}: recovered {:.4}, expected {:.4} (tolerance {:.4})",
            if check.pass { "pass" } else { "FAIL" },
            check.name,
            check.recovered,
            check.expected,
            check.tolerance
        );
    }
    println!("report: {}", out_dir.join("report.json").display());
}
