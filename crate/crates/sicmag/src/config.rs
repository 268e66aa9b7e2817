//! Experiment configuration: one TOML file drives synthesis and analysis.
//! All randomness flows from `master_seed` through a per-artifact label hash
//! so partial re-runs are stable.

use crate::magnet::{self, FlakeGeometry, MagnetizationModel, SensorPlacement};
use crate::relaxometry::{FluctuationModel, PhononModelParams};
use crate::spinmodel::SensorSpinModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Toml {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("invalid config at {path}: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// ODMR + relaxometry temperature sweep, K.
    pub temperatures_k: Vec<f64>,
    /// ODMR field sweep, G (both hysteresis branches are simulated).
    pub fields_g: Vec<f64>,
    /// Applied c-axis bias during the temperature sweep, G.
    pub bias_field_g: f64,
    /// Applied field during relaxometry, G.
    pub relax_field_g: f64,
    /// Temperature at which the field sweep runs, K.
    pub field_sweep_temperature_k: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let n = 12;
        let temperatures_k = (0..n)
            .map(|i| 296.0 + i as f64 * (390.0 - 296.0) / (n - 1) as f64)
            .collect();
        Self {
            temperatures_k,
            fields_g: vec![
                -455.0, -100.0, -30.0, -16.0, -12.0, -8.0, -4.0, 4.0, 8.0, 12.0, 16.0, 30.0,
                100.0, 455.0,
            ],
            bias_field_g: 200.0,
            relax_field_g: 190.0,
            field_sweep_temperature_k: 300.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdmrSettings {
    pub points: usize,
    /// Grid margin beyond the outermost transition, MHz.
    pub margin_mhz: f64,
    pub fwhm_mhz: f64,
    /// Signed lock-in contrast per line; dips are negative.
    pub contrast: f64,
    pub noise_sigma: f64,
    pub baseline: f64,
}

impl Default for OdmrSettings {
    fn default() -> Self {
        Self {
            points: 1200,
            margin_mhz: 80.0,
            fwhm_mhz: 12.0,
            contrast: -0.01,
            noise_sigma: 2.0e-4,
            baseline: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxSettings {
    pub delay_start_us: f64,
    pub delay_stop_us: f64,
    pub delay_points: usize,
    pub amplitude: f64,
    pub n_stretch: f64,
    pub noise_sigma: f64,
}

impl Default for RelaxSettings {
    fn default() -> Self {
        Self {
            delay_start_us: 0.5,
            delay_stop_us: 1500.0,
            delay_points: 30,
            amplitude: 1.0,
            n_stretch: 1.0,
            noise_sigma: 0.01,
        }
    }
}

impl RelaxSettings {
    pub fn delays(&self) -> Vec<f64> {
        let n = self.delay_points.max(2);
        (0..n)
            .map(|i| {
                self.delay_start_us
                    * (self.delay_stop_us / self.delay_start_us)
                        .powf(i as f64 / (n - 1) as f64)
            })
            .collect()
    }
}

/// Pass/fail thresholds for `reproduce`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceConfig {
    pub tc_k: f64,
    pub fluctuation_peak_k: f64,
    pub rate_rel: f64,
    pub hc_g: f64,
    pub b_fgt_g: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self {
            tc_k: 3.0,
            fluctuation_peak_k: 5.0,
            rate_rel: 0.05,
            hc_g: 3.0,
            b_fgt_g: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: String,
    pub sensor: SensorSpinModel,
    pub magnet: MagnetizationModel,
    pub geometry: FlakeGeometry,
    pub placement: SensorPlacement,
    pub sweeps: SweepConfig,
    pub odmr: OdmrSettings,
    pub relax: RelaxSettings,
    pub phonon: PhononModelParams,
    pub fluctuation: FluctuationModel,
    pub tolerances: ToleranceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let geometry = FlakeGeometry::default();
        let placement = SensorPlacement::default();
        let sweeps = SweepConfig::default();
        // calibrate M_sat so B_FGT at the first sweep temperature is 3.2 G
        let mut magnet = MagnetizationModel::default();
        if let Ok(m_sat) = magnet::calibrate_m_sat(
            &geometry,
            &placement,
            magnet.tc_k,
            magnet.beta_crit,
            sweeps.temperatures_k[0],
            3.2,
        ) {
            magnet.m_sat_a_per_m = m_sat;
        }
        Self {
            master_seed: 20260826,
            output_dir: "out".into(),
            sensor: SensorSpinModel::default(),
            magnet,
            geometry,
            placement,
            sweeps,
            odmr: OdmrSettings::default(),
            relax: RelaxSettings::default(),
            phonon: PhononModelParams::default(),
            fluctuation: FluctuationModel::default(),
            tolerances: ToleranceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|source| ConfigError::Toml {
                path: path.display().to_string(),
                source: Box::new(source),
            })?;
        config.validate().map_err(|message| ConfigError::Invalid {
            path: path.display().to_string(),
            message,
        })?;
        Ok(config)
    }

    /// Path-qualified validation across all sub-configs.
    pub fn validate(&self) -> Result<(), String> {
        self.sensor.validate().map_err(|e| format!("sensor: {e}"))?;
        self.magnet.validate().map_err(|e| format!("magnet: {e}"))?;
        self.geometry
            .validate()
            .map_err(|e| format!("geometry: {e}"))?;
        self.placement
            .validate()
            .map_err(|e| format!("placement: {e}"))?;
        self.phonon.validate().map_err(|e| format!("phonon: {e}"))?;
        self.fluctuation
            .validate()
            .map_err(|e| format!("fluctuation: {e}"))?;
        if self.sweeps.temperatures_k.is_empty() {
            return Err("sweeps.temperatures_k: must not be empty".into());
        }
        if self.sweeps.temperatures_k.iter().any(|&t| t <= 0.0) {
            return Err("sweeps.temperatures_k: temperatures must be positive".into());
        }
        if self.odmr.points < 16 {
            return Err("odmr.points: need at least 16 samples".into());
        }
        if !(self.odmr.fwhm_mhz > 0.0) {
            return Err("odmr.fwhm_mhz: must be > 0".into());
        }
        if self.odmr.noise_sigma < 0.0 {
            return Err("odmr.noise_sigma: must be >= 0".into());
        }
        if !(self.relax.delay_start_us > 0.0)
            || !(self.relax.delay_stop_us > self.relax.delay_start_us)
        {
            return Err("relax: delay_stop_us must exceed delay_start_us > 0".into());
        }
        if self.relax.delay_points < 6 {
            return Err("relax.delay_points: need at least 6".into());
        }
        if !(self.relax.n_stretch > 0.0 && self.relax.n_stretch <= 2.0) {
            return Err("relax.n_stretch: must be in (0, 2]".into());
        }
        Ok(())
    }

    /// Canonical hash over the config content; changes iff any field does.
    pub fn sha256(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config is serializable");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Stable per-artifact seed derivation: SHA-256 over the master seed and a
/// textual label, truncated to 64 bits.
pub fn derive_seed(master_seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
