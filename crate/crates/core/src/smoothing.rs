//! Analytic smoothing `S_r` of periodic functions as a Fourier multiplier,
//! and the approximation sequence `f_j = S_{r_j} f`.

use crate::error::{KamError, Result};
use crate::lattice::norm2_sq;
use crate::stats::loglog_fit;
use crate::trigpoly::TrigPoly;
use num_complex::Complex64;

/// Errors at or below this level count as exact reproduction.
pub const EXACT_TOL: f64 = 1e-14;

/// Slack allowed between the fitted and the nominal rate.
pub const RATE_SLACK: f64 = 0.3;

/// Largest grid (total points) used for sup-norm errors; larger inputs fall
/// back to the coefficient majorant.
const MAX_SUP_GRID: usize = 1 << 22;

fn psi(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp()
    } else {
        0.0
    }
}

/// The bump `u0`: even, equal to 1 on `[-1/4, 1/4]`, zero outside `(-1, 1)`.
pub fn u0(t: f64) -> f64 {
    let a = t.abs();
    if a <= 0.25 {
        return 1.0;
    }
    if a >= 1.0 {
        return 0.0;
    }
    let p = psi(1.0 - a);
    p / (p + psi(a - 0.25))
}

/// Fourier multiplier of `S_r` at mode `k`: `u0(r^2 |k|_2^2)`.
pub fn multiplier(r: f64, k: &[i64]) -> f64 {
    u0(r * r * norm2_sq(k) as f64)
}

/// `S_r f`, applied coefficientwise.
pub fn smooth_periodic(f: &TrigPoly, r: f64) -> TrigPoly {
    f.map_modes(|k, c| c * Complex64::new(multiplier(r, k), 0.0))
}

#[derive(Clone, Debug)]
pub struct ApproxSequence {
    /// `r_j` for `j = 1..=J` (index 0 holds `r~`, the radius attached to `f_0 = 0`).
    pub radii: Vec<f64>,
    pub members: Vec<TrigPoly>,
    /// Strip majorant of `f_j - f_{j-1}` at radius `r_j`, for `j >= 1`.
    pub increments: Vec<f64>,
    /// Sup-norm distance `|f_j - f|` on the real torus, for `j >= 1`.
    pub errors: Vec<f64>,
}

/// `f_0 = 0`, `f_j = S_{r_j} f` with `r_j = r~ 3^{-j}`.
pub fn build_sequence(f: &TrigPoly, r_tilde: f64, levels: usize) -> Result<ApproxSequence> {
    if !(r_tilde > 0.0 && r_tilde <= 1.0) || levels == 0 {
        return Err(KamError::InvalidInput(format!(
            "need r~ in (0,1] and J >= 1, got r~={r_tilde}, J={levels}"
        )));
    }
    let mut radii = vec![r_tilde];
    let mut members = vec![TrigPoly::zero(f.n_angles(), f.shape()).with_real_flag(true)];
    let mut increments = Vec::with_capacity(levels);
    let mut errors = Vec::with_capacity(levels);
    for j in 1..=levels {
        let r = r_tilde * 3f64.powi(-(j as i32));
        let fj = smooth_periodic(f, r);
        increments.push(fj.sub(&members[j - 1]).strip_norm_bound(r).value);
        errors.push(sup_distance(&fj, f));
        radii.push(r);
        members.push(fj);
    }
    Ok(ApproxSequence {
        radii,
        members,
        increments,
        errors,
    })
}

/// Sup of `|a - b|` on a real grid resolving both, or the coefficient
/// majorant when that grid would be too large.
fn sup_distance(a: &TrigPoly, b: &TrigPoly) -> f64 {
    let d = a.sub(b);
    if d.is_zero() {
        return 0.0;
    }
    let reach = d
        .modes()
        .flat_map(|(k, _)| k.iter().map(|x| x.abs()))
        .max()
        .unwrap_or(0) as usize;
    let per_axis = (2 * reach + 2).next_power_of_two();
    let total = per_axis.saturating_pow(d.n_angles() as u32);
    if total > MAX_SUP_GRID {
        return d.strip_norm_bound(0.0).value;
    }
    d.to_grid(&vec![per_axis; d.n_angles()]).max_abs()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    pub slope: f64,
    /// `C` in the fitted law `error ~ C r^slope`.
    pub constant: f64,
    pub exact: bool,
    pub pass: bool,
}

/// Fit `ln error` against `ln r_j` and compare the slope with `l`.
pub fn rate_report(seq: &ApproxSequence, l: f64) -> Result<RateReport> {
    if seq.errors.len() < 3 {
        return Err(KamError::InvalidInput("rate_report needs at least 3 members".into()));
    }
    if seq.errors.iter().all(|&e| e <= EXACT_TOL) {
        return Ok(RateReport {
            slope: f64::NAN,
            constant: 0.0,
            exact: true,
            pass: true,
        });
    }
    let pairs: Vec<(f64, f64)> = seq.radii[1..]
        .iter()
        .zip(&seq.errors)
        .filter(|(_, &e)| e > 0.0)
        .map(|(&r, &e)| (r, e))
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let (slope, intercept) =
        loglog_fit(&x, &y).ok_or_else(|| KamError::InvalidInput("degenerate radii for rate fit".into()))?;
    Ok(RateReport {
        slope,
        constant: intercept.exp(),
        exact: false,
        pass: (slope - l).abs() <= RATE_SLACK,
    })
}

/// One-angle test function with `f^(+-k) = |k|^{-l-1}` for `1 <= |k| <= k_max`,
/// i.e. `2 sum_k k^{-l-1} cos(k phi)`.
pub fn decay_test_function(l: f64, k_max: i64) -> TrigPoly {
    TrigPoly::scalar(
        1,
        (1..=k_max).flat_map(|k| {
            let c = Complex64::new((k as f64).powf(-l - 1.0), 0.0);
            [(vec![k], c), (vec![-k], c)]
        }),
        true,
    )
    .expect("scalar modes")
}
