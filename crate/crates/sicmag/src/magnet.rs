//! Phenomenological Fe3GaTe2 model: critical-power-law magnetization with a
//! rectangular hysteresis loop, the exact stray field of a uniformly
//! magnetized rectangular prism (surface-charge formulation), and Curie
//! temperature estimation from a B_FGT(T) series.
//!
//! Units: magnetization in A/m, fields in G, lengths in micrometers. The
//! A/m -> G conversion happens in exactly one place, inside the prism field
//! evaluation.

use crate::numfit::{self, FitOptions, FitResult, ResidualProblem};
use crate::spinmodel::FieldVector;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// B[G] = 1e4 * mu0 * H[A/m] with the 1/(4 pi) of the surface-charge kernel
/// folded in: 1e4 * (4 pi x 1e-7) / (4 pi).
const GAUSS_PER_AMPERE_PER_METER_OVER_4PI: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MagnetError {
    #[error("unknown branch label '{0}' (expected 'ascending' or 'descending')")]
    UnknownBranch(String),
    #[error("temperature must be positive, got {0} K")]
    NonPositiveTemperature(f64),
    #[error("evaluation point lies inside the prism")]
    PointInsidePrism,
    #[error("series has {0} points, need at least {1}")]
    TooFewPoints(usize, usize),
    #[error("series is identically zero: no transition to fit")]
    NoTransition,
    #[error(transparent)]
    Fit(#[from] numfit::FitError),
}

/// Field-sweep direction for the hysteresis rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Ascending,
    Descending,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Branch::Ascending => write!(f, "ascending"),
            Branch::Descending => write!(f, "descending"),
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = MagnetError;
    fn from_str(s: &str) -> Result<Self, MagnetError> {
        match s.trim() {
            "ascending" => Ok(Branch::Ascending),
            "descending" => Ok(Branch::Descending),
            other => Err(MagnetError::UnknownBranch(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagnetizationModel {
    /// Saturation magnetization at T = 0, A/m.
    pub m_sat_a_per_m: f64,
    /// Curie temperature, K.
    pub tc_k: f64,
    /// Critical exponent beta of (1 - T/Tc)^beta.
    pub beta_crit: f64,
    /// Coercive field, G.
    pub hc_g: f64,
    /// Paramagnetic susceptibility above Tc (M = chi * H), A/m per G.
    pub chi_para: f64,
    /// Optional linear high-field term below Tc, A/m per G. Off by default.
    pub chi_highfield: f64,
}

impl Default for MagnetizationModel {
    fn default() -> Self {
        Self {
            m_sat_a_per_m: 1.0e5,
            tc_k: 360.0,
            beta_crit: 0.5,
            hc_g: 10.0,
            chi_para: 0.0,
            chi_highfield: 0.0,
        }
    }
}

impl MagnetizationModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tc_k > 0.0) {
            return Err("tc_k must be > 0".into());
        }
        if !(self.beta_crit > 0.0 && self.beta_crit < 1.0) {
            return Err("beta_crit must be in (0, 1)".into());
        }
        if self.hc_g < 0.0 {
            return Err("hc_g must be >= 0".into());
        }
        if !(self.m_sat_a_per_m >= 0.0) {
            return Err("m_sat_a_per_m must be >= 0".into());
        }
        Ok(())
    }
}

/// Signed easy-axis magnetization. Below Tc the magnitude follows
/// M_sat (1 - T/Tc)^beta and the sign follows the rectangular hysteresis
/// rule: the ascending branch switches at H = +Hc, the descending branch at
/// H = -Hc. At and above Tc the response is the linear paramagnetic term.
pub fn magnetization(
    model: &MagnetizationModel,
    temperature_k: f64,
    h_applied_g: f64,
    branch: Branch,
) -> Result<f64, MagnetError> {
    if !(temperature_k > 0.0) {
        return Err(MagnetError::NonPositiveTemperature(temperature_k));
    }
    if temperature_k >= model.tc_k {
        return Ok(model.chi_para * h_applied_g);
    }
    let magnitude = model.m_sat_a_per_m * (1.0 - temperature_k / model.tc_k).powf(model.beta_crit);
    let sign = match branch {
        Branch::Ascending => {
            if h_applied_g >= model.hc_g {
                1.0
            } else {
                -1.0
            }
        }
        Branch::Descending => {
            if h_applied_g <= -model.hc_g {
                -1.0
            } else {
                1.0
            }
        }
    };
    Ok(sign * (magnitude + model.chi_highfield * h_applied_g.abs()))
}

/// Rectangular prism with half-extents in micrometers, magnetized uniformly
/// along `magnetization_direction` (unit vector, default +z).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlakeGeometry {
    pub half_extents_um: [f64; 3],
    pub center_um: [f64; 3],
    pub magnetization_direction: [f64; 3],
}

impl Default for FlakeGeometry {
    fn default() -> Self {
        Self {
            half_extents_um: [5.0, 5.0, 0.05],
            center_um: [0.0, 0.0, 0.05],
            magnetization_direction: [0.0, 0.0, 1.0],
        }
    }
}

impl FlakeGeometry {
    pub fn validate(&self) -> Result<(), String> {
        if self.half_extents_um.iter().any(|&h| !(h > 0.0)) {
            return Err("all half-extents must be > 0".into());
        }
        let norm2: f64 = self.magnetization_direction.iter().map(|c| c * c).sum();
        if (norm2 - 1.0).abs() > 1e-6 {
            return Err("magnetization_direction must be a unit vector".into());
        }
        Ok(())
    }
}

/// Sensor layer location: lateral offset from the flake center and implant
/// depth below the SiC surface (the prism's bottom face).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorPlacement {
    pub lateral_offset_um: [f64; 2],
    pub depth_nm: f64,
}

impl Default for SensorPlacement {
    fn default() -> Self {
        Self {
            lateral_offset_um: [4.5, 0.0],
            depth_nm: 40.0,
        }
    }
}

impl SensorPlacement {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.depth_nm > 0.0) {
            return Err("depth_nm must be > 0".into());
        }
        Ok(())
    }
}

/// Sensor point in prism coordinates: laterally offset from the flake
/// center, `depth_nm` below the prism's bottom face.
pub fn sensor_point(geometry: &FlakeGeometry, placement: &SensorPlacement) -> [f64; 3] {
    [
        geometry.center_um[0] + placement.lateral_offset_um[0],
        geometry.center_um[1] + placement.lateral_offset_um[1],
        geometry.center_um[2] - geometry.half_extents_um[2] - placement.depth_nm * 1e-3,
    ]
}

#[derive(Debug, Clone, Copy)]
pub struct StrayField {
    pub field: FieldVector,
    /// True when the point sits on a face or edge and singular terms were
    /// evaluated by the limiting convention (0/0 arctan terms taken as 0,
    /// log arguments floored at a tiny epsilon).
    pub boundary_flagged: bool,
}

// Charged-rectangle kernel. F(u,v,w) terms after differentiating the
// rectangle potential: Hx ~ -ln(v + r), Hy ~ -ln(u + r), Hz ~ atan(uv / wr).
fn rectangle_field(
    u: [f64; 2],
    v: [f64; 2],
    w: f64,
    flagged: &mut bool,
) -> (f64, f64, f64) {
    let mut hx = 0.0;
    let mut hy = 0.0;
    let mut hz = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        for (j, &vj) in v.iter().enumerate() {
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            let r = (ui * ui + vj * vj + w * w).sqrt();
            let ln_v = {
                let arg = vj + r;
                if arg <= 0.0 {
                    *flagged = true;
                    (f64::MIN_POSITIVE).ln()
                } else {
                    arg.ln()
                }
            };
            let ln_u = {
                let arg = ui + r;
                if arg <= 0.0 {
                    *flagged = true;
                    (f64::MIN_POSITIVE).ln()
                } else {
                    arg.ln()
                }
            };
            let at = {
                let num = ui * vj;
                let den = w * r;
                if den == 0.0 {
                    if num == 0.0 {
                        *flagged = true;
                        0.0
                    } else {
                        *flagged = true;
                        std::f64::consts::FRAC_PI_2 * num.signum()
                    }
                } else {
                    (num / den).atan()
                }
            };
            hx -= sign * ln_v;
            hy -= sign * ln_u;
            hz += sign * at;
        }
    }
    (hx, hy, hz)
}

// Field (in G) of a prism magnetized along +z with magnetization m, centered
// at the origin, evaluated at `p` (prism-relative coordinates).
fn prism_field_z(half: [f64; 3], m: f64, p: [f64; 3], flagged: &mut bool) -> [f64; 3] {
    let (a, b, c) = (half[0], half[1], half[2]);
    let u = [p[0] + a, p[0] - a];
    let v = [p[1] + b, p[1] - b];
    // top face at +c carries +m, bottom face at -c carries -m
    let (tx, ty, tz) = rectangle_field(u, v, p[2] - c, flagged);
    let (bx, by, bz) = rectangle_field(u, v, p[2] + c, flagged);
    let k = GAUSS_PER_AMPERE_PER_METER_OVER_4PI * m;
    [k * (tx - bx), k * (ty - by), k * (tz - bz)]
}

/// Exact analytic stray field (G) of the uniformly magnetized prism at an
/// exterior point, via the surface-charge formulation. `m_a_per_m` is the
/// signed magnetization along `geometry.magnetization_direction`.
pub fn stray_field(
    geometry: &FlakeGeometry,
    m_a_per_m: f64,
    point_um: [f64; 3],
) -> Result<StrayField, MagnetError> {
    let half = geometry.half_extents_um;
    let rel = [
        point_um[0] - geometry.center_um[0],
        point_um[1] - geometry.center_um[1],
        point_um[2] - geometry.center_um[2],
    ];
    if rel[0].abs() < half[0] && rel[1].abs() < half[1] && rel[2].abs() < half[2] {
        return Err(MagnetError::PointInsidePrism);
    }
    if m_a_per_m == 0.0 {
        return Ok(StrayField {
            field: FieldVector::zero(),
            boundary_flagged: false,
        });
    }
    let mut flagged = false;
    let dir = geometry.magnetization_direction;
    let mut total = [0.0; 3];
    // each Cartesian magnetization component reduces to the z-magnetized
    // solution under a coordinate permutation
    let perms: [([usize; 3], f64); 3] = [
        ([1, 2, 0], dir[0]), // x-magnetized: (x,y,z) -> (y,z,x)
        ([2, 0, 1], dir[1]), // y-magnetized
        ([0, 1, 2], dir[2]),
    ];
    for (perm, weight) in perms {
        if weight == 0.0 {
            continue;
        }
        let ph = [half[perm[0]], half[perm[1]], half[perm[2]]];
        let pp = [rel[perm[0]], rel[perm[1]], rel[perm[2]]];
        let f = prism_field_z(ph, m_a_per_m * weight, pp, &mut flagged);
        for axis in 0..3 {
            total[perm[axis]] += f[axis];
        }
    }
    Ok(StrayField {
        field: FieldVector::new(total[0], total[1], total[2]),
        boundary_flagged: flagged,
    })
}

/// Linear superposition over a multi-domain state given as (prism, signed M)
/// pairs.
pub fn stray_field_sum(
    domains: &[(FlakeGeometry, f64)],
    point_um: [f64; 3],
) -> Result<StrayField, MagnetError> {
    let mut field = FieldVector::zero();
    let mut flagged = false;
    for (geometry, m) in domains {
        let s = stray_field(geometry, *m, point_um)?;
        field = field + s.field;
        flagged |= s.boundary_flagged;
    }
    Ok(StrayField {
        field,
        boundary_flagged: flagged,
    })
}

/// |Bz| of the flake's stray field at the sensor layer, the quantity the
/// differential ODMR measurement reports as B_FGT.
pub fn field_at_sensor(
    model: &MagnetizationModel,
    geometry: &FlakeGeometry,
    placement: &SensorPlacement,
    temperature_k: f64,
    h_applied_g: f64,
    branch: Branch,
) -> Result<f64, MagnetError> {
    let m = magnetization(model, temperature_k, h_applied_g, branch)?;
    let s = stray_field(geometry, m, sensor_point(geometry, placement))?;
    Ok(s.field.bz.abs())
}

/// Signed sensor-layer Bz, used by the synthesis pipeline where the stray
/// field adds to the applied bias.
pub fn signed_field_at_sensor(
    model: &MagnetizationModel,
    geometry: &FlakeGeometry,
    placement: &SensorPlacement,
    temperature_k: f64,
    h_applied_g: f64,
    branch: Branch,
) -> Result<f64, MagnetError> {
    let m = magnetization(model, temperature_k, h_applied_g, branch)?;
    let s = stray_field(geometry, m, sensor_point(geometry, placement))?;
    Ok(s.field.bz)
}

/// Saturation magnetization that makes the sensor-layer |Bz| hit
/// `target_b_g` at `temperature_k` (stray field is linear in M).
pub fn calibrate_m_sat(
    geometry: &FlakeGeometry,
    placement: &SensorPlacement,
    tc_k: f64,
    beta_crit: f64,
    temperature_k: f64,
    target_b_g: f64,
) -> Result<f64, MagnetError> {
    let unit = stray_field(geometry, 1.0, sensor_point(geometry, placement))?
        .field
        .bz
        .abs();
    let reduced = (1.0 - temperature_k / tc_k).max(0.0).powf(beta_crit);
    if unit == 0.0 || reduced == 0.0 {
        return Err(MagnetError::NoTransition);
    }
    Ok(target_b_g / (unit * reduced))
}

#[derive(Debug, Clone)]
pub struct TcEstimate {
    pub tc_k: f64,
    pub beta_crit: f64,
    pub b0_scale_g: f64,
    pub fit: FitResult,
    /// Temperature of the steepest finite-difference dB/dT as a secondary
    /// estimator.
    pub dbdt_extremum_k: Option<f64>,
    /// Set when the fitted Tc falls outside the sampled temperature range.
    pub extrapolation_warning: bool,
}

/// Weighted fit of B_FGT(T) = B0 * max(0, 1 - T/Tc)^beta with beta held at
/// the mean-field value 0.5. Weights are 1/sigma^2; points with sigma = 0
/// get the median nonzero sigma. A free exponent roughly doubles the Tc
/// scatter on realistic noise, so fitting beta is opt-in via
/// [`estimate_tc_free_beta`].
pub fn estimate_tc(series: &[(f64, f64, f64)]) -> Result<TcEstimate, MagnetError> {
    estimate_tc_impl(series, Some(0.5))
}

/// Same fit with the critical exponent as a third free parameter.
pub fn estimate_tc_free_beta(series: &[(f64, f64, f64)]) -> Result<TcEstimate, MagnetError> {
    estimate_tc_impl(series, None)
}

fn estimate_tc_impl(
    series: &[(f64, f64, f64)],
    fix_beta: Option<f64>,
) -> Result<TcEstimate, MagnetError> {
    if series.len() < 5 {
        return Err(MagnetError::TooFewPoints(series.len(), 5));
    }
    if series.iter().all(|&(_, b, _)| b == 0.0) {
        return Err(MagnetError::NoTransition);
    }
    let mut sigmas: Vec<f64> = series.iter().map(|s| s.2).filter(|&s| s > 0.0).collect();
    sigmas.sort_by(f64::total_cmp);
    let fallback = if sigmas.is_empty() {
        1.0
    } else {
        sigmas[sigmas.len() / 2]
    };
    let weights: Vec<f64> = series
        .iter()
        .map(|s| 1.0 / if s.2 > 0.0 { s.2 } else { fallback })
        .collect();

    let mut sorted: Vec<(f64, f64, f64)> = series.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let t_min = sorted[0].0;
    let t_max = sorted[sorted.len() - 1].0;
    let (tc_lo, tc_hi) = (t_min * 0.2, t_max * 3.0);

    // B0 is linear in the model at fixed (Tc, beta), so seed the fit from a
    // profiled grid: solve B0 in closed form and keep the chi^2 minimum
    let profile = |tc: f64, beta: f64| -> (f64, f64) {
        let mut num = 0.0;
        let mut den = 0.0;
        for (&(t, b, _), &w) in series.iter().zip(&weights) {
            let m = (1.0 - t / tc).max(0.0).powf(beta);
            num += m * b * w * w;
            den += m * m * w * w;
        }
        let b0 = (num / den.max(1e-300)).max(0.0);
        let chi2 = series
            .iter()
            .zip(&weights)
            .map(|(&(t, b, _), &w)| {
                let m = b0 * (1.0 - t / tc).max(0.0).powf(beta);
                ((m - b) * w).powi(2)
            })
            .sum();
        (b0, chi2)
    };
    let betas: Vec<f64> = match fix_beta {
        Some(beta) => vec![beta],
        None => (0..20).map(|j| 0.05 + 0.95 * j as f64 / 19.0).collect(),
    };
    let mut seed = (f64::INFINITY, t_max, 0.5, 1e-12);
    for i in 0..400 {
        let tc = tc_lo + (tc_hi - tc_lo) * i as f64 / 399.0;
        for &beta in &betas {
            let (b0, chi2) = profile(tc, beta);
            if chi2 < seed.0 {
                seed = (chi2, tc, beta, b0.max(1e-12));
            }
        }
    }

    let series_ref = series;
    let weights_ref = &weights;
    let fit = match fix_beta {
        Some(beta) => {
            let model_b = move |p: &[f64], t: f64| p[0] * (1.0 - t / p[1]).max(0.0).powf(beta);
            let problem = ResidualProblem::new(2, move |p: &[f64]| {
                series_ref
                    .iter()
                    .zip(weights_ref)
                    .map(|(&(t, b, _), &w)| (model_b(p, t) - b) * w)
                    .collect()
            })
            .with_bounds(vec![0.0, tc_lo], vec![f64::INFINITY, tc_hi])?;
            let init = [seed.3, seed.1];
            numfit::levenberg_marquardt(&problem, &init, &FitOptions::default())?
        }
        None => {
            let model_b = |p: &[f64], t: f64| p[0] * (1.0 - t / p[1]).max(0.0).powf(p[2]);
            let problem = ResidualProblem::new(3, move |p: &[f64]| {
                series_ref
                    .iter()
                    .zip(weights_ref)
                    .map(|(&(t, b, _), &w)| (model_b(p, t) - b) * w)
                    .collect()
            })
            .with_bounds(vec![0.0, tc_lo, 0.05], vec![f64::INFINITY, tc_hi, 1.0])?;
            let init = [seed.3, seed.1, seed.2];
            numfit::levenberg_marquardt(&problem, &init, &FitOptions::default())?
        }
    };

    let dbdt_extremum_k = sorted
        .windows(2)
        .filter(|w| w[1].0 > w[0].0)
        .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0), 0.5 * (w[0].0 + w[1].0)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, t)| t);

    let tc_k = fit.params[1];
    Ok(TcEstimate {
        tc_k,
        beta_crit: fix_beta.unwrap_or_else(|| fit.params[2]),
        b0_scale_g: fit.params[0],
        dbdt_extremum_k,
        extrapolation_warning: tc_k < t_min || tc_k > t_max,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn magnetization_critical_form() {
        let model = MagnetizationModel::default();
        assert_relative_eq!(
            magnetization(&model, model.tc_k, 0.0, Branch::Ascending).unwrap(),
            0.0
        );
        let m = magnetization(&model, 0.5 * model.tc_k, 200.0, Branch::Ascending).unwrap();
        assert_relative_eq!(m, model.m_sat_a_per_m * 0.5_f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn square_loop_switches_at_coercive_field() {
        let model = MagnetizationModel::default(); // Hc = 10 G
        let t = 300.0;
        let below = magnetization(&model, t, 9.9, Branch::Ascending).unwrap();
        let above = magnetization(&model, t, 10.0, Branch::Ascending).unwrap();
        assert!(below < 0.0 && above > 0.0);
        let desc_hi = magnetization(&model, t, -9.9, Branch::Descending).unwrap();
        let desc_lo = magnetization(&model, t, -10.0, Branch::Descending).unwrap();
        assert!(desc_hi > 0.0 && desc_lo < 0.0);
        // loop area positive for Hc > 0
        let mut area = 0.0;
        let hs: Vec<f64> = (-40..=40).map(|i| i as f64).collect();
        for w in hs.windows(2) {
            let up = magnetization(&model, t, w[0], Branch::Ascending).unwrap();
            let down = magnetization(&model, t, w[0], Branch::Descending).unwrap();
            area += (down - up) * (w[1] - w[0]);
        }
        assert!(area > 0.0);
        let no_hc = MagnetizationModel { hc_g: 0.0, ..model };
        let up = magnetization(&no_hc, t, 5.0, Branch::Ascending).unwrap();
        let down = magnetization(&no_hc, t, 5.0, Branch::Descending).unwrap();
        assert_relative_eq!(up, down);
    }

    #[test]
    fn magnetization_above_tc_is_paramagnetic() {
        let model = MagnetizationModel {
            chi_para: 2.0,
            ..Default::default()
        };
        assert_relative_eq!(
            magnetization(&model, 380.0, 50.0, Branch::Ascending).unwrap(),
            100.0
        );
        let zero_chi = MagnetizationModel::default();
        assert_relative_eq!(
            magnetization(&zero_chi, 380.0, 50.0, Branch::Descending).unwrap(),
            0.0
        );
    }

    #[test]
    fn magnetization_monotone_below_tc() {
        let model = MagnetizationModel::default();
        let mut prev = f64::INFINITY;
        for i in 1..=100 {
            let t = model.tc_k * i as f64 / 101.0;
            let m = magnetization(&model, t, 200.0, Branch::Ascending).unwrap();
            assert!(m <= prev + 1e-9);
            prev = m;
        }
    }

    // brute-force surface-charge quadrature, midpoint rule per face
    fn brute_force_field(
        geometry: &FlakeGeometry,
        m: f64,
        point: [f64; 3],
        panels: usize,
    ) -> [f64; 3] {
        let [a, b, c] = geometry.half_extents_um;
        let mut h = [0.0_f64; 3];
        let da = (2.0 * a / panels as f64) * (2.0 * b / panels as f64);
        for (z0, sigma) in [(c, m), (-c, -m)] {
            for i in 0..panels {
                for j in 0..panels {
                    let sx = geometry.center_um[0] - a + (i as f64 + 0.5) * 2.0 * a / panels as f64;
                    let sy = geometry.center_um[1] - b + (j as f64 + 0.5) * 2.0 * b / panels as f64;
                    let sz = geometry.center_um[2] + z0;
                    let d = [point[0] - sx, point[1] - sy, point[2] - sz];
                    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    let r3 = r2 * r2.sqrt();
                    for k in 0..3 {
                        h[k] += sigma * da * d[k] / r3;
                    }
                }
            }
        }
        // same conversion constant as the analytic path, kernel 1/(4 pi)
        h.map(|v| v * GAUSS_PER_AMPERE_PER_METER_OVER_4PI / (4.0 * std::f64::consts::PI)
            * (4.0 * std::f64::consts::PI))
    }

    #[test]
    fn analytic_prism_matches_quadrature() {
        let geometry = FlakeGeometry {
            half_extents_um: [2.0, 1.5, 0.3],
            center_um: [0.0, 0.0, 0.0],
            magnetization_direction: [0.0, 0.0, 1.0],
        };
        let m = 1.0e5;
        let points = [
            [0.7, -0.4, 1.1],
            [2.8, 1.9, 0.9],
            [-1.2, 0.3, -1.5],
            [0.0, 0.0, 2.5],
        ];
        for p in points {
            let analytic = stray_field(&geometry, m, p).unwrap().field;
            let brute = brute_force_field(&geometry, m, p, 200);
            for (got, want) in [analytic.bx, analytic.by, analytic.bz].iter().zip(&brute) {
                let scale = brute.iter().map(|v| v.abs()).fold(0.0, f64::max);
                assert!(
                    (got - want).abs() / scale < 1e-4,
                    "point {p:?}: analytic {got}, quadrature {want}"
                );
            }
        }
    }

    #[test]
    fn far_field_matches_point_dipole() {
        let geometry = FlakeGeometry {
            half_extents_um: [1.0, 0.8, 0.2],
            center_um: [0.0, 0.0, 0.0],
            magnetization_direction: [0.0, 0.0, 1.0],
        };
        let m = 5.0e4;
        let volume = 8.0 * geometry.half_extents_um.iter().product::<f64>();
        // 10x the largest prism dimension (2 um)
        let r = 20.0;
        for p in [[0.0, 0.0, r], [r, 0.0, 0.0], [r / 1.7320508, r / 1.7320508, r / 1.7320508]] {
            let analytic = stray_field(&geometry, m, p).unwrap().field;
            let rn = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            let rhat = [p[0] / rn, p[1] / rn, p[2] / rn];
            let mdotr = rhat[2];
            let k = 1e-7 * 1e4 * m * volume / rn.powi(3);
            let dipole = [
                k * 3.0 * mdotr * rhat[0],
                k * 3.0 * mdotr * rhat[1],
                k * (3.0 * mdotr * rhat[2] - 1.0),
            ];
            let scale = dipole.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for (got, want) in [analytic.bx, analytic.by, analytic.bz].iter().zip(&dipole) {
                assert!(
                    (got - want).abs() / scale < 0.01,
                    "point {p:?}: analytic {got}, dipole {want}"
                );
            }
        }
    }

    #[test]
    fn symmetry_axis_has_no_transverse_field() {
        let geometry = FlakeGeometry::default();
        let s = stray_field(&geometry, 1.0e5, [0.0, 0.0, 3.0]).unwrap();
        assert!(s.field.bx.abs() < 1e-10);
        assert!(s.field.by.abs() < 1e-10);
        assert!(s.field.bz.abs() > 0.0);
    }

    #[test]
    fn field_odd_in_magnetization_and_zero_for_zero_m() {
        let geometry = FlakeGeometry::default();
        let p = [1.0, -2.0, 1.5];
        let plus = stray_field(&geometry, 2.0e4, p).unwrap().field;
        let minus = stray_field(&geometry, -2.0e4, p).unwrap().field;
        assert_relative_eq!(plus.bz, -minus.bz, max_relative = 1e-12);
        assert_relative_eq!(plus.bx, -minus.bx, max_relative = 1e-12);
        let zero = stray_field(&geometry, 0.0, p).unwrap().field;
        assert_eq!(zero, FieldVector::zero());
    }

    #[test]
    fn interior_point_rejected_boundary_flagged() {
        let geometry = FlakeGeometry {
            half_extents_um: [1.0, 1.0, 0.5],
            center_um: [0.0, 0.0, 0.0],
            magnetization_direction: [0.0, 0.0, 1.0],
        };
        assert!(matches!(
            stray_field(&geometry, 1.0e5, [0.0, 0.0, 0.0]),
            Err(MagnetError::PointInsidePrism)
        ));
        // point exactly on the top face edge
        let on_edge = stray_field(&geometry, 1.0e5, [1.0, 0.0, 0.5]).unwrap();
        assert!(on_edge.boundary_flagged);
    }

    #[test]
    fn sensor_field_scales_linearly_with_m_sat() {
        let geometry = FlakeGeometry::default();
        let placement = SensorPlacement::default();
        let model = MagnetizationModel::default();
        let doubled = MagnetizationModel {
            m_sat_a_per_m: 2.0 * model.m_sat_a_per_m,
            ..model
        };
        let b1 = field_at_sensor(&model, &geometry, &placement, 300.0, 200.0, Branch::Ascending)
            .unwrap();
        let b2 = field_at_sensor(&doubled, &geometry, &placement, 300.0, 200.0, Branch::Ascending)
            .unwrap();
        assert_relative_eq!(b2, 2.0 * b1, max_relative = 1e-12);
        // above Tc with chi_para = 0 the field vanishes
        let above =
            field_at_sensor(&model, &geometry, &placement, 380.0, 200.0, Branch::Ascending)
                .unwrap();
        assert_eq!(above, 0.0);
    }

    #[test]
    fn calibrated_sensor_field_hits_target_then_vanishes_at_tc() {
        let geometry = FlakeGeometry::default();
        let placement = SensorPlacement::default();
        let m_sat =
            calibrate_m_sat(&geometry, &placement, 360.0, 0.5, 295.8, 3.2).unwrap();
        let model = MagnetizationModel {
            m_sat_a_per_m: m_sat,
            ..Default::default()
        };
        let b_cal =
            field_at_sensor(&model, &geometry, &placement, 295.8, 200.0, Branch::Ascending)
                .unwrap();
        assert_relative_eq!(b_cal, 3.2, max_relative = 1e-10);
        let b_tc = field_at_sensor(&model, &geometry, &placement, 360.0, 200.0, Branch::Ascending)
            .unwrap();
        assert_eq!(b_tc, 0.0);
    }

    fn synthetic_series(tc: f64, b0: f64, noise: f64) -> Vec<(f64, f64, f64)> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        (0..12)
            .map(|i| {
                let t = 296.0 + i as f64 * (390.0 - 296.0) / 11.0;
                let b = b0 * (1.0 - t / tc).max(0.0).sqrt()
                    + if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                (t, b, noise)
            })
            .collect()
    }

    #[test]
    fn tc_recovered_from_noise_free_series() {
        let series = synthetic_series(360.0, 7.5, 0.0);
        let est = estimate_tc(&series).unwrap();
        assert_relative_eq!(est.tc_k, 360.0, epsilon = 1e-4);
        assert_relative_eq!(est.beta_crit, 0.5, epsilon = 1e-4);
        assert!(!est.extrapolation_warning);
    }

    #[test]
    fn tc_recovered_within_3k_with_noise() {
        let series = synthetic_series(360.0, 7.5, 0.1);
        let est = estimate_tc(&series).unwrap();
        assert!((est.tc_k - 360.0).abs() < 3.0, "tc = {}", est.tc_k);
    }

    #[test]
    fn tc_fit_invariant_under_series_rescaling() {
        let series = synthetic_series(360.0, 7.5, 0.1);
        let scaled: Vec<(f64, f64, f64)> =
            series.iter().map(|&(t, b, s)| (t, 5.0 * b, 5.0 * s)).collect();
        let a = estimate_tc(&series).unwrap();
        let b = estimate_tc(&scaled).unwrap();
        assert_relative_eq!(a.tc_k, b.tc_k, epsilon = 1e-6);
        assert_relative_eq!(a.beta_crit, b.beta_crit, epsilon = 1e-6);
        assert_relative_eq!(b.b0_scale_g, 5.0 * a.b0_scale_g, max_relative = 1e-6);
    }

    #[test]
    fn degenerate_series_rejected() {
        let zeros: Vec<(f64, f64, f64)> =
            (0..8).map(|i| (300.0 + i as f64 * 10.0, 0.0, 0.1)).collect();
        assert!(matches!(estimate_tc(&zeros), Err(MagnetError::NoTransition)));
        let short = vec![(300.0, 1.0, 0.1); 4];
        assert!(matches!(
            estimate_tc(&short),
            Err(MagnetError::TooFewPoints(4, 5))
        ));
    }

    #[test]
    fn multi_domain_superposition_is_linear() {
        let left = FlakeGeometry {
            half_extents_um: [1.0, 2.0, 0.1],
            center_um: [-1.0, 0.0, 0.0],
            magnetization_direction: [0.0, 0.0, 1.0],
        };
        let right = FlakeGeometry {
            center_um: [1.0, 0.0, 0.0],
            ..left
        };
        let p = [0.0, 0.0, -1.0];
        let sum = stray_field_sum(&[(left, 1.0e5), (right, -1.0e5)], p).unwrap().field;
        let a = stray_field(&left, 1.0e5, p).unwrap().field;
        let b = stray_field(&right, -1.0e5, p).unwrap().field;
        assert_relative_eq!(sum.bz, a.bz + b.bz, max_relative = 1e-12);
    }
}
