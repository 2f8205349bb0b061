//! Mode-by-mode solutions of the three homological equations
//!
//! ```text
//! d v0 . omega - A v0             = P1 Gamma_K u0
//! d v1 . omega + v1 A - A v1      = P1 (Gamma_K u1 - B diag(B^-1 u1^(0) B) B^-1)
//! d Phi . omega                   = P2 (Gamma_K w - w^(0))
//! ```
//!
//! with `A = B Lambda B^-1`, plus the Diophantine checks on the divisors
//! `i<k,omega> + <m,Lambda>`.

use crate::error::{KamError, Result};
use crate::lattice::{ball, dot, norm2, punctured_ball, shell};
use crate::schedule::ScheduleEntry;
use crate::trigpoly::{CMat, TrigPoly};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use std::collections::BTreeMap;

const I_UNIT: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Relative floor below which a divisor is treated as an exact resonance.
pub const UNDERFLOW_REL: f64 = 1e-14;

/// Stage-`nu` frequencies and eigenvalues.
#[derive(Clone, Debug)]
pub struct StageData {
    pub nu: usize,
    /// `omega^nu = col(eps^{q5} omega_1, omega_2)`.
    pub omega: Vec<f64>,
    /// Diagonal of `Lambda^nu = diag(eps^{q1} Lambda_1, eps^{q3} Lambda_2)`.
    pub lambda: Vec<Complex64>,
    pub b: CMat,
    pub b_inv: CMat,
    pub schedule: ScheduleEntry,
}

impl StageData {
    pub fn new(nu: usize, omega: Vec<f64>, lambda: Vec<Complex64>, b: CMat, schedule: ScheduleEntry) -> Result<Self> {
        let n1 = lambda.len();
        if b.shape() != (n1, n1) {
            return Err(KamError::InvalidInput(format!(
                "B must be {n1}x{n1}, got {:?}",
                b.shape()
            )));
        }
        let b_inv = b
            .clone()
            .try_inverse()
            .ok_or_else(|| KamError::Singular("similarity matrix B".into()))?;
        Ok(Self {
            nu,
            omega,
            lambda,
            b,
            b_inv,
            schedule,
        })
    }

    pub fn n1(&self) -> usize {
        self.lambda.len()
    }

    pub fn n2(&self) -> usize {
        self.omega.len()
    }

    /// `A = B Lambda B^-1`.
    pub fn a_matrix(&self) -> CMat {
        &self.b * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.lambda.clone())) * &self.b_inv
    }
}

/// `i<k,omega> + <m,Lambda>`.
pub fn small_divisor(k: &[i64], m: &[i64], stage: &StageData) -> Complex64 {
    let lam: Complex64 = m.iter().zip(&stage.lambda).map(|(&mj, l)| l * mj as f64).sum();
    I_UNIT * dot(k, &stage.omega) + lam
}

/// All `m` in `Z^{n1}` with `|m|_1 <= 2` and `sum m` in `{0, -1}`.
pub fn m_set(n1: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let mut cur = vec![-2i64; n1];
    loop {
        let l1: i64 = cur.iter().map(|x| x.abs()).sum();
        let s: i64 = cur.iter().sum();
        if l1 <= 2 && (s == 0 || s == -1) {
            out.push(cur.clone());
        }
        let mut axis = n1;
        loop {
            if axis == 0 {
                // order: zero first, then the rest lexicographically
                out.sort_by_key(|m| (m.iter().any(|&x| x != 0), m.clone()));
                return out;
            }
            axis -= 1;
            if cur[axis] < 2 {
                cur[axis] += 1;
                for c in cur.iter_mut().skip(axis + 1) {
                    *c = -2;
                }
                break;
            }
        }
    }
}

fn underflows(d: Complex64, k: &[i64], omega: &[f64]) -> bool {
    d.norm() < UNDERFLOW_REL * dot(k, omega).abs().max(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NonresonanceReport {
    pub pass: bool,
    pub worst_k: Vec<i64>,
    pub worst_m: Vec<i64>,
    pub divisor: Complex64,
    /// `|d| / (gamma eps^{q5} |k|^{-iota})` at the worst pair.
    pub ratio: f64,
}

/// Verify `|i<k,omega> + <m,Lambda>| >= margin gamma eps^{q5} |k|_2^{-iota}`
/// over `m` in the m-set and `k` in the shell `K_lo < |k|_2 <= K_hi`
/// (margin 1) or the full range `0 < |k|_2 <= K_hi` (smaller margins).
pub fn check_nonresonance(
    stage: &StageData,
    gamma: f64,
    iota: f64,
    eps_q5: f64,
    k_lo: f64,
    k_hi: f64,
    margin: f64,
) -> NonresonanceReport {
    let modes = if margin >= 1.0 {
        shell(stage.n2(), k_lo, k_hi)
    } else {
        punctured_ball(stage.n2(), k_hi)
    };
    let ms = m_set(stage.n1());
    let scale = gamma * eps_q5;
    let per_k: Vec<(f64, bool, usize, usize, Complex64)> = modes
        .par_iter()
        .enumerate()
        .map(|(ki, k)| {
            let thr = scale * norm2(k).powf(-iota);
            let mut best = (f64::INFINITY, false, ki, 0usize, Complex64::new(0.0, 0.0));
            for (mi, m) in ms.iter().enumerate() {
                let d = small_divisor(k, m, stage);
                let ratio = d.norm() / thr;
                if ratio < best.0 {
                    // ties go to k whose leading nonzero entry is positive
                    let neg = k.iter().find(|&&x| x != 0).is_some_and(|&x| x < 0);
                    best = (ratio, neg, ki, mi, d);
                }
            }
            best
        })
        .collect();
    let worst = per_k
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    match worst {
        None => NonresonanceReport {
            pass: true,
            worst_k: Vec::new(),
            worst_m: Vec::new(),
            divisor: Complex64::new(f64::INFINITY, 0.0),
            ratio: f64::INFINITY,
        },
        Some((ratio, _, ki, mi, d)) => NonresonanceReport {
            pass: ratio >= margin,
            worst_k: modes[ki].clone(),
            worst_m: ms[mi].clone(),
            divisor: d,
            ratio,
        },
    }
}

fn check_shape(f: &TrigPoly, shape: (usize, usize), n2: usize, what: &str) -> Result<()> {
    if f.shape() != shape || f.n_angles() != n2 {
        return Err(KamError::InvalidInput(format!(
            "{what}: expected shape {shape:?} on T^{n2}, got {:?} on T^{}",
            f.shape(),
            f.n_angles()
        )));
    }
    Ok(())
}

fn diag(v: &[f64]) -> CMat {
    DMatrix::from_fn(v.len(), v.len(), |i, j| {
        if i == j {
            Complex64::new(v[i], 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

fn finish(
    coeffs: BTreeMap<Vec<i64>, CMat>,
    n2: usize,
    shape: (usize, usize),
    k_plus: f64,
    real_input: bool,
) -> TrigPoly {
    let p = TrigPoly::from_modes(n2, shape, coeffs, false)
        .expect("consistent shapes")
        .with_declared_degree(k_plus);
    let real = real_input && p.hermitian_defect() <= 1e-12;
    p.with_real_flag(real)
}

/// `v0 = P1 sum_{|k| <= K+} B (i<k,omega> - Lambda)^-1 B^-1 u0^(k) e^{i<k,phi>}`.
pub fn solve_v0(u0: &TrigPoly, stage: &StageData, p1: &[f64], k_plus: f64) -> Result<TrigPoly> {
    let n1 = stage.n1();
    let n2 = stage.n2();
    check_shape(u0, (n1, 1), n2, "u0")?;
    let p1m = diag(p1);
    let mut coeffs = BTreeMap::new();
    for (k, c) in u0.truncate(k_plus).modes() {
        let y = &stage.b_inv * c;
        let mut z = y.clone();
        for j in 0..n1 {
            let mut m = vec![0; n1];
            m[j] = -1;
            let d = small_divisor(k, &m, stage);
            if underflows(d, k, &stage.omega) {
                return Err(KamError::Resonant {
                    k: k.clone(),
                    m,
                    magnitude: d.norm(),
                });
            }
            z[(j, 0)] = y[(j, 0)] / d;
        }
        coeffs.insert(k.clone(), &p1m * (&stage.b * z));
    }
    Ok(finish(coeffs, n2, (n1, 1), k_plus, u0.is_real()))
}

/// Returns `(v1, Lambda~)` with `Lambda~ = diag(B^-1 u1^(0) B)`.
pub fn solve_v1(u1: &TrigPoly, stage: &StageData, p1: &[f64], k_plus: f64) -> Result<(TrigPoly, Vec<Complex64>)> {
    let n1 = stage.n1();
    let n2 = stage.n2();
    check_shape(u1, (n1, n1), n2, "u1")?;
    let p1m = diag(p1);
    let zero_k = vec![0i64; n2];
    let u_mean = &stage.b_inv * u1.coeff_or_zero(&zero_k) * &stage.b;
    let lambda_update: Vec<Complex64> = (0..n1).map(|i| u_mean[(i, i)]).collect();
    let mut coeffs = BTreeMap::new();
    for (k, c) in u1.truncate(k_plus).modes() {
        let hat = &stage.b_inv * c * &stage.b;
        let is_zero = k.iter().all(|&x| x == 0);
        let mut v = DMatrix::from_element(n1, n1, Complex64::new(0.0, 0.0));
        for i in 0..n1 {
            for j in 0..n1 {
                if is_zero && i == j {
                    continue;
                }
                let mut m = vec![0; n1];
                m[j] += 1;
                m[i] -= 1;
                let d = small_divisor(k, &m, stage);
                if underflows(d, k, &stage.omega) {
                    return Err(KamError::Resonant {
                        k: k.clone(),
                        m,
                        magnitude: d.norm(),
                    });
                }
                v[(i, j)] = hat[(i, j)] / d;
            }
        }
        coeffs.insert(k.clone(), &p1m * (&stage.b * v * &stage.b_inv));
    }
    Ok((finish(coeffs, n2, (n1, n1), k_plus, u1.is_real()), lambda_update))
}

/// Returns `(Phi, omega~)` with `omega~ = Re w^(0)`.
pub fn solve_phi(w: &TrigPoly, stage: &StageData, p2: &[f64], k_plus: f64) -> Result<(TrigPoly, Vec<f64>)> {
    let n1 = stage.n1();
    let n2 = stage.n2();
    check_shape(w, (n2, 1), n2, "w")?;
    let p2m = diag(p2);
    let mean = w.mean();
    let omega_update: Vec<f64> = (0..n2).map(|i| mean[(i, 0)].re).collect();
    let mut coeffs = BTreeMap::new();
    for (k, c) in w.truncate(k_plus).modes() {
        if k.iter().all(|&x| x == 0) {
            continue;
        }
        let d = small_divisor(k, &vec![0; n1], stage);
        if underflows(d, k, &stage.omega) {
            return Err(KamError::Resonant {
                k: k.clone(),
                m: vec![0; n1],
                magnitude: d.norm(),
            });
        }
        coeffs.insert(k.clone(), &p2m * c / d);
    }
    Ok((finish(coeffs, n2, (n2, 1), k_plus, w.is_real()), omega_update))
}

/// Relative residuals of the three homological equations evaluated on a
/// product grid with `oversample` times the points needed for `K+`.
#[derive(Clone, Debug)]
pub struct HomologicalResiduals {
    pub v0: f64,
    pub v1: f64,
    pub phi: f64,
}

impl HomologicalResiduals {
    pub fn max(&self) -> f64 {
        self.v0.max(self.v1).max(self.phi)
    }
}

fn relative_grid_gap(lhs: &TrigPoly, rhs: &TrigPoly, dims: &[usize]) -> f64 {
    let gap = lhs.max_abs_diff_on_grid(rhs, dims);
    let scale = rhs.to_grid(dims).max_abs();
    if scale == 0.0 {
        gap
    } else {
        gap / scale
    }
}

#[allow(clippy::too_many_arguments)]
pub fn homological_residuals(
    u0: &TrigPoly,
    u1: &TrigPoly,
    w: &TrigPoly,
    v0: &TrigPoly,
    v1: &TrigPoly,
    phi: &TrigPoly,
    stage: &StageData,
    p1: &[f64],
    p2: &[f64],
    k_plus: f64,
    oversample: usize,
) -> HomologicalResiduals {
    let n2 = stage.n2();
    let n = (oversample * (2 * k_plus.ceil() as usize + 1)).next_power_of_two();
    let dims = vec![n; n2];
    let a = stage.a_matrix();
    let p1m = diag(p1);
    let p2m = diag(p2);

    let lhs0 = v0.directional_derivative(&stage.omega).sub(&v0.left_mul(&a));
    let rhs0 = u0.truncate(k_plus).left_mul(&p1m);

    let zero_k = vec![0i64; n2];
    let u_mean = &stage.b_inv * u1.coeff_or_zero(&zero_k) * &stage.b;
    let removable = &stage.b * DMatrix::from_diagonal(&u_mean.diagonal()) * &stage.b_inv;
    let lhs1 = v1
        .directional_derivative(&stage.omega)
        .add(&v1.right_mul(&a))
        .sub(&v1.left_mul(&a));
    let rhs1 = u1
        .truncate(k_plus)
        .sub(&TrigPoly::constant(n2, removable))
        .left_mul(&p1m);

    let lhsp = phi.directional_derivative(&stage.omega);
    let rhsp = w.truncate(k_plus).sub(&TrigPoly::constant(n2, w.mean())).left_mul(&p2m);

    HomologicalResiduals {
        v0: relative_grid_gap(&lhs0, &rhs0, &dims),
        v1: relative_grid_gap(&lhs1, &rhs1, &dims),
        phi: relative_grid_gap(&lhsp, &rhsp, &dims),
    }
}

/// Largest `|d|^{-1}` over the divisors a solve at `K+` would use.
pub fn max_amplification(stage: &StageData, k_plus: f64) -> f64 {
    let n1 = stage.n1();
    let mut worst: f64 = 0.0;
    for k in ball(stage.n2(), k_plus) {
        let is_zero = k.iter().all(|&x| x == 0);
        for m in m_set(n1) {
            // k = 0 with sum m = 0 is either unused or a spectral gap, which
            // the Diophantine margin does not control
            if is_zero && m.iter().sum::<i64>() == 0 {
                continue;
            }
            worst = worst.max(1.0 / small_divisor(&k, &m, stage).norm());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{schedule, ScheduleParams};

    const GOLDEN: f64 = 1.618_033_988_749_895;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sched() -> ScheduleEntry {
        schedule(
            0,
            &ScheduleParams {
                r_tilde: 0.5,
                l: 20.0,
                alpha: 1,
                iota: 1.5,
                n2: 2,
                n3: 2,
                c1: 1.0,
                gamma: 0.05,
                scale: 1.0,
            },
        )
    }

    fn stage(omega: Vec<f64>, lambda: Vec<Complex64>) -> StageData {
        let n1 = lambda.len();
        StageData::new(0, omega, lambda, DMatrix::identity(n1, n1), sched()).unwrap()
    }

    #[test]
    fn small_divisor_examples() {
        let s = stage(vec![1.0], vec![c(-1.0, 2.0)]);
        assert_eq!(small_divisor(&[0], &[0], &s), c(0.0, 0.0));
        assert_eq!(small_divisor(&[3], &[0], &s), c(0.0, 3.0));
        let s2 = stage(vec![2.0], vec![c(-1.0, 2.0)]);
        assert_eq!(small_divisor(&[1], &[1], &s2), c(-1.0, 4.0));
    }

    #[test]
    fn m_set_examples() {
        assert_eq!(m_set(1), vec![vec![0], vec![-1]]);
        let mut two = m_set(2);
        two.sort();
        let mut want = vec![vec![0, 0], vec![1, -1], vec![-1, 1], vec![-1, 0], vec![0, -1]];
        want.sort();
        assert_eq!(two, want);
        for n in 1..=4 {
            for m in m_set(n) {
                let l1: i64 = m.iter().map(|x| x.abs()).sum();
                let s: i64 = m.iter().sum();
                assert!(l1 <= 2 && (s == 0 || s == -1));
            }
        }
    }

    #[test]
    fn nonresonance_golden_passes() {
        let s = stage(vec![1.0, GOLDEN], vec![c(-1.0, 0.0)]);
        let rep = check_nonresonance(&s, 0.05, 1.5, 1.0, 0.0, 20.0, 0.25);
        assert!(rep.pass);
        // |<k,omega>| |k|^{1.5} is smallest at k = (1,0); (-1,1) gives 0.618 * 2^{0.75} ~ 1.04
        assert_eq!(rep.worst_m, vec![0]);
        assert_eq!(rep.worst_k, vec![1, 0]);
        assert!((rep.ratio - 20.0).abs() < 1e-12);
    }

    #[test]
    fn nonresonance_exact_resonance_fails() {
        let s = stage(vec![1.0, 1.0], vec![c(-1.0, 0.0)]);
        let rep = check_nonresonance(&s, 0.05, 1.5, 1.0, 0.0, 5.0, 1.0);
        assert!(!rep.pass);
        assert_eq!(rep.worst_k, vec![1, -1]);
        assert_eq!(rep.worst_m, vec![0]);
        assert!(rep.divisor.norm() < 1e-14);
    }

    #[test]
    fn nonresonance_skips_k_zero() {
        // equal eigenvalues would make m = (1,-1) resonant at k = 0
        let s = stage(vec![1.0, GOLDEN], vec![c(-1.0, 0.0), c(-1.0, 0.0)]);
        let rep = check_nonresonance(&s, 0.01, 1.5, 1.0, 0.0, 3.0, 0.25);
        assert!(rep.worst_k.iter().any(|&x| x != 0));
    }

    #[test]
    fn margin_one_uses_shell_only() {
        let s = stage(vec![1.0, 1.0], vec![c(-1.0, 0.0)]);
        // the resonance k=(1,-1) has |k| = sqrt 2 < 2, outside the shell (2, 4]
        let rep = check_nonresonance(&s, 0.05, 1.5, 1.0, 2.0, 4.0, 1.0);
        assert!(rep.worst_k.iter().map(|x| x * x).sum::<i64>() > 4);
    }

    #[test]
    fn v0_examples() {
        let s = stage(vec![0.7], vec![c(-1.0, 0.0)]);
        let u = TrigPoly::constant(1, DMatrix::from_element(1, 1, c(2.0, 0.0)));
        let v = solve_v0(&u, &s, &[0.3], 4.0).unwrap();
        // constant mode: (0 - Lambda)^{-1} = 1
        assert!((v.mean()[(0, 0)] - c(0.6, 0.0)).norm() < 1e-15);

        assert!(solve_v0(&TrigPoly::zero(1, (1, 1)), &s, &[1.0], 4.0).unwrap().is_zero());

        let s1 = stage(vec![1.0], vec![c(-1.0, 0.0)]);
        let u = TrigPoly::cosine(&[1], 1.0);
        let v = solve_v0(&u, &s1, &[0.5], 4.0).unwrap();
        assert!((v.coeff(&[1]).unwrap()[(0, 0)] - 0.5 * c(1.0, 1.0).inv() / 2.0).norm() < 1e-15);
        assert!((v.coeff(&[-1]).unwrap()[(0, 0)] - 0.5 * c(1.0, -1.0).inv() / 2.0).norm() < 1e-15);
        assert!(v.is_real());
        let r = homological_residuals(
            &u,
            &TrigPoly::zero(1, (1, 1)),
            &TrigPoly::zero(1, (1, 1)),
            &v,
            &TrigPoly::zero(1, (1, 1)),
            &TrigPoly::zero(1, (1, 1)),
            &s1,
            &[0.5],
            &[1.0],
            4.0,
            4,
        );
        assert!(r.v0 <= 1e-12);
    }

    #[test]
    fn v1_examples() {
        let s = stage(vec![0.9], vec![c(-1.0, 0.0), c(-2.0, 0.0)]);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(0.3, 0.0), c(-0.2, 0.0)]));
        let (v, lam) = solve_v1(&TrigPoly::constant(1, d), &s, &[1.0, 1.0], 3.0).unwrap();
        assert!(v.is_zero());
        assert_eq!(lam, vec![c(0.3, 0.0), c(-0.2, 0.0)]);

        let (v, lam) = solve_v1(&TrigPoly::zero(1, (2, 2)), &s, &[1.0, 1.0], 3.0).unwrap();
        assert!(v.is_zero() && lam.iter().all(|z| z.norm() == 0.0));

        let s1 = stage(vec![1.0], vec![c(-1.0, 0.0), c(-2.0, 0.0)]);
        let mut e12 = DMatrix::from_element(2, 2, c(0.0, 0.0));
        e12[(0, 1)] = c(1.0, 0.0);
        let u1 = TrigPoly::from_modes(1, (2, 2), [(vec![1], e12)], false).unwrap();
        let (v, _) = solve_v1(&u1, &s1, &[1.0, 1.0], 3.0).unwrap();
        assert!((v.coeff(&[1]).unwrap()[(0, 1)] - c(-1.0, 1.0).inv()).norm() < 1e-15);
        let z = |sh| TrigPoly::zero(1, sh);
        let r = homological_residuals(
            &z((2, 1)),
            &u1,
            &z((1, 1)),
            &z((2, 1)),
            &v,
            &z((1, 1)),
            &s1,
            &[1.0, 1.0],
            &[1.0],
            3.0,
            4,
        );
        assert!(r.v1 <= 1e-12, "{}", r.v1);
    }

    #[test]
    fn v1_mean_diagonal_removed() {
        let s = stage(vec![1.0, GOLDEN], vec![c(-1.0, 0.0), c(-1.6, 0.0)]);
        let mut m = DMatrix::from_element(2, 2, c(0.2, 0.0));
        m[(1, 1)] = c(-0.4, 0.0);
        let u1 = TrigPoly::constant(2, m).add(
            &TrigPoly::cosine(&[1, 0], 1.0)
                .left_mul(&DMatrix::from_element(2, 1, c(1.0, 0.0)))
                .right_mul(&DMatrix::from_element(1, 2, c(1.0, 0.0))),
        );
        let (v, lam) = solve_v1(&u1, &s, &[1.0, 1.0], 3.0).unwrap();
        let v_mean = v.mean();
        assert_eq!(v_mean[(0, 0)], c(0.0, 0.0));
        assert_eq!(v_mean[(1, 1)], c(0.0, 0.0));
        assert_eq!(lam, vec![c(0.2, 0.0), c(-0.4, 0.0)]);
    }

    #[test]
    fn phi_examples() {
        let s = stage(vec![1.0], vec![c(-1.0, 0.0)]);
        let (p, om) = solve_phi(&TrigPoly::cosine(&[1], 1.0), &s, &[1.0], 3.0).unwrap();
        let sine = TrigPoly::sine(&[1], 1.0);
        assert!(p.sub(&sine).max_coeff() < 1e-15);
        assert_eq!(om, vec![0.0]);

        let (p, om) = solve_phi(
            &TrigPoly::constant(1, DMatrix::from_element(1, 1, c(0.4, 0.0))),
            &s,
            &[1.0],
            3.0,
        )
        .unwrap();
        assert!(p.is_zero());
        assert_eq!(om, vec![0.4]);

        let s2 = stage(vec![1.0, GOLDEN], vec![c(-1.0, 0.0)]);
        let w = TrigPoly::column(&[TrigPoly::cosine(&[1, -1], 1.0), TrigPoly::zero(2, (1, 1))]).unwrap();
        let (p, _) = solve_phi(&w, &s2, &[1.0, 1.0], 3.0).unwrap();
        let want = (I_UNIT * (1.0 - GOLDEN)).inv() / 2.0;
        assert!((p.coeff(&[1, -1]).unwrap()[(0, 0)] - want).norm() < 1e-15);
        assert!((p.coeff(&[-1, 1]).unwrap()[(0, 0)] - want.conj()).norm() < 1e-15);
        let z = |sh| TrigPoly::zero(2, sh);
        let r = homological_residuals(
            &z((1, 1)),
            &z((1, 1)),
            &w,
            &z((1, 1)),
            &z((1, 1)),
            &p,
            &s2,
            &[1.0],
            &[1.0, 1.0],
            3.0,
            4,
        );
        assert!(r.phi <= 1e-12);
        assert!(p.mean().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn resonant_divisor_is_hard_error() {
        let s = stage(vec![1.0, 1.0], vec![c(-1.0, 0.0)]);
        let w = TrigPoly::column(&[TrigPoly::cosine(&[1, -1], 1.0), TrigPoly::zero(2, (1, 1))]).unwrap();
        match solve_phi(&w, &s, &[1.0, 1.0], 3.0) {
            Err(KamError::Resonant { k, m, magnitude }) => {
                assert!(k == vec![1, -1] || k == vec![-1, 1]);
                assert_eq!(m, vec![0]);
                assert!(magnitude < 1e-14);
            }
            other => panic!("expected resonance, got {other:?}"),
        }
    }

    #[test]
    fn amplification_bounded_under_margin() {
        let s = stage(vec![1.0, GOLDEN], vec![c(-1.0, 0.0)]);
        let k = 12.0;
        let rep = check_nonresonance(&s, 0.05, 1.5, 1.0, 0.0, k, 0.25);
        assert!(rep.pass);
        assert!(max_amplification(&s, k) <= 4.0 / 0.05 * k.powf(1.5));
    }
}
