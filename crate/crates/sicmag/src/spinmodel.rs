//! Spin-1 divacancy (PL6) level structure: Hamiltonian construction,
//! transition frequencies from the m_s = 0 level, and inversion of an ODMR
//! splitting back to an axial magnetic field.
//!
//! Basis ordering is (|+1>, |0>, |-1>) throughout. Frequencies are in MHz,
//! fields in G, temperatures in K.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

type C = Complex<f64>;

/// Gyromagnetic ratio in MHz/G from the free-electron g-factor,
/// gamma = g * mu_B / h with g = 2.0023.
pub const GAMMA_DEFAULT_MHZ_PER_G: f64 = 2.8025;

/// Default zero-field splitting of PL6 at the reference temperature, MHz.
pub const PL6_ZFS_MHZ: f64 = 1351.0;

#[derive(Debug, Error)]
pub enum SpinModelError {
    #[error("zero-field splitting D(T) = {0} MHz is non-positive at T = {1} K")]
    ZfsOutOfRange(f64, f64),
    #[error("temperature must be positive, got {0} K")]
    NonPositiveTemperature(f64),
    #[error("no eigenstate has dominant m_s = 0 character (max weight {0:.3}); transition labeling is ambiguous")]
    DegenerateRegime(f64),
    #[error("negative splitting: f_plus = {f_plus} MHz < f_minus = {f_minus} MHz")]
    NegativeSplitting { f_minus: f64, f_plus: f64 },
    #[error("field component is not finite")]
    NonFiniteField,
}

/// PL6 sensor parameters. `dd_dt` defaults to 0; real temperature sweeps
/// self-calibrate D(T) from the reference-position spectrum instead of
/// trusting a slope (see the odmr module).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSpinModel {
    /// Zero-field splitting at `t_ref`, MHz.
    pub d0_mhz: f64,
    /// ZFS temperature slope, MHz/K.
    pub dd_dt_mhz_per_k: f64,
    /// Reference temperature for `d0_mhz`, K.
    pub t_ref_k: f64,
    /// Transverse zero-field splitting, MHz. Zero for the c-axis PL6 defect.
    pub e_mhz: f64,
    /// Gyromagnetic ratio, MHz/G.
    pub gamma_mhz_per_g: f64,
}

impl Default for SensorSpinModel {
    fn default() -> Self {
        Self {
            d0_mhz: PL6_ZFS_MHZ,
            dd_dt_mhz_per_k: 0.0,
            t_ref_k: 296.0,
            e_mhz: 0.0,
            gamma_mhz_per_g: GAMMA_DEFAULT_MHZ_PER_G,
        }
    }
}

impl SensorSpinModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.d0_mhz > 0.0) {
            return Err("d0_mhz must be > 0".into());
        }
        if !(self.gamma_mhz_per_g > 0.0) {
            return Err("gamma_mhz_per_g must be > 0".into());
        }
        if self.e_mhz < 0.0 || self.e_mhz >= self.d0_mhz {
            return Err("e_mhz must satisfy 0 <= E < D0".into());
        }
        if !(self.t_ref_k > 0.0) {
            return Err("t_ref_k must be > 0".into());
        }
        Ok(())
    }
}

/// Magnetic field vector in G; z is the defect / crystal c-axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldVector {
    pub bx: f64,
    pub by: f64,
    pub bz: f64,
}

impl FieldVector {
    pub fn new(bx: f64, by: f64, bz: f64) -> Self {
        Self { bx, by, bz }
    }

    pub fn axial(bz: f64) -> Self {
        Self::new(0.0, 0.0, bz)
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.bx.is_finite() && self.by.is_finite() && self.bz.is_finite()
    }
}

impl std::ops::Add for FieldVector {
    type Output = FieldVector;
    fn add(self, rhs: FieldVector) -> FieldVector {
        FieldVector::new(self.bx + rhs.bx, self.by + rhs.by, self.bz + rhs.bz)
    }
}

/// D(T) = D0 + dD/dT * (T - T_ref).
pub fn zfs_at(model: &SensorSpinModel, temperature_k: f64) -> Result<f64, SpinModelError> {
    if !(temperature_k > 0.0) {
        return Err(SpinModelError::NonPositiveTemperature(temperature_k));
    }
    let d = model.d0_mhz + model.dd_dt_mhz_per_k * (temperature_k - model.t_ref_k);
    if d <= 0.0 {
        return Err(SpinModelError::ZfsOutOfRange(d, temperature_k));
    }
    Ok(d)
}

fn spin1_operators() -> (Matrix3<C>, Matrix3<C>, Matrix3<C>) {
    let s = 1.0 / 2.0_f64.sqrt();
    let sx = Matrix3::new(
        C::new(0.0, 0.0), C::new(s, 0.0), C::new(0.0, 0.0),
        C::new(s, 0.0), C::new(0.0, 0.0), C::new(s, 0.0),
        C::new(0.0, 0.0), C::new(s, 0.0), C::new(0.0, 0.0),
    );
    let sy = Matrix3::new(
        C::new(0.0, 0.0), C::new(0.0, -s), C::new(0.0, 0.0),
        C::new(0.0, s), C::new(0.0, 0.0), C::new(0.0, -s),
        C::new(0.0, 0.0), C::new(0.0, s), C::new(0.0, 0.0),
    );
    let sz = Matrix3::from_diagonal(&Vector3::new(
        C::new(1.0, 0.0),
        C::new(0.0, 0.0),
        C::new(-1.0, 0.0),
    ));
    (sx, sy, sz)
}

/// H = D(T)(Sz^2 - 2/3 I) + E(Sx^2 - Sy^2) + gamma (Bx Sx + By Sy + Bz Sz),
/// a traceless Hermitian 3x3 matrix in MHz.
pub fn hamiltonian(
    model: &SensorSpinModel,
    field: &FieldVector,
    temperature_k: f64,
) -> Result<Matrix3<C>, SpinModelError> {
    if !field.is_finite() {
        return Err(SpinModelError::NonFiniteField);
    }
    let d = zfs_at(model, temperature_k)?;
    let (sx, sy, sz) = spin1_operators();
    let identity = Matrix3::identity();
    let g = model.gamma_mhz_per_g;
    let h = (sz * sz - identity * C::new(2.0 / 3.0, 0.0)) * C::new(d, 0.0)
        + (sx * sx - sy * sy) * C::new(model.e_mhz, 0.0)
        + sx * C::new(g * field.bx, 0.0)
        + sy * C::new(g * field.by, 0.0)
        + sz * C::new(g * field.bz, 0.0);
    Ok(h)
}

/// Sorted eigenvalues (ascending) and matching eigenvectors (columns).
pub fn eigensystem(h: &Matrix3<C>) -> (Vector3<f64>, Matrix3<C>) {
    let eig = nalgebra::SymmetricEigen::new(*h);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = Vector3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    let mut vectors = Matrix3::zeros();
    for (i, &o) in order.iter().enumerate() {
        vectors.set_column(i, &eig.eigenvectors.column(o));
    }
    (values, vectors)
}

/// The two transition frequencies from the dominantly m_s = 0 eigenstate to
/// the other two levels, sorted ascending. The m_s = 0 state is the one with
/// maximal overlap with the zero-field |0> basis vector; if no eigenstate
/// carries more than half that weight the labeling is ambiguous and a
/// degenerate-regime error is returned.
pub fn transition_frequencies(
    model: &SensorSpinModel,
    field: &FieldVector,
    temperature_k: f64,
) -> Result<(f64, f64), SpinModelError> {
    let h = hamiltonian(model, field, temperature_k)?;
    let (values, vectors) = eigensystem(&h);
    // |0> is basis index 1 in the (|+1>, |0>, |-1>) ordering
    let weights: Vec<f64> = (0..3).map(|i| vectors[(1, i)].norm_sqr()).collect();
    let (ms0_index, &max_weight) = weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    if max_weight < 0.5 {
        return Err(SpinModelError::DegenerateRegime(max_weight));
    }
    let mut freqs: Vec<f64> = (0..3)
        .filter(|&i| i != ms0_index)
        .map(|i| values[i] - values[ms0_index])
        .collect();
    freqs.sort_by(f64::total_cmp);
    Ok((freqs[0], freqs[1]))
}

/// An ODMR splitting inverted to an axial field, plus the center frequency
/// as a D(T) estimate for self-calibration.
#[derive(Debug, Clone, Copy)]
pub struct SplittingInversion {
    pub field_g: f64,
    pub center_mhz: f64,
}

/// Bz = (f_plus - f_minus) / (2 gamma); center = (f_plus + f_minus) / 2.
pub fn field_from_splitting(
    model: &SensorSpinModel,
    f_minus_mhz: f64,
    f_plus_mhz: f64,
) -> Result<SplittingInversion, SpinModelError> {
    if f_plus_mhz < f_minus_mhz {
        return Err(SpinModelError::NegativeSplitting {
            f_minus: f_minus_mhz,
            f_plus: f_plus_mhz,
        });
    }
    Ok(SplittingInversion {
        field_g: (f_plus_mhz - f_minus_mhz) / (2.0 * model.gamma_mhz_per_g),
        center_mhz: (f_plus_mhz + f_minus_mhz) / 2.0,
    })
}
