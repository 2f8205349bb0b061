//! The system
//!
//! ```text
//! I1'   = eps^{q1} A1 I1 + eps^{q1+q2} g1
//! I2'   = eps^{q3} A2 I2 + eps^{q3+q4} g2
//! phi1' = eps^{q5} omega1 + eps^{q5+q6} g3
//! phi2' = omega2 + eps^{q7} g4
//! ```
//!
//! written as `I' = A0 I + P1 G1`, `phi' = omega0 + P2 G2` with
//! `G = eps^{q2} col(g1, g2, g3, g4)`.

use crate::error::{KamError, Result};
use crate::trigpoly::CMat;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// `xi, eps -> vector`.
pub type RealMap = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;
pub type ComplexMap = Arc<dyn Fn(&[f64], f64) -> Vec<Complex64> + Send + Sync>;
pub type MatrixMap = Arc<dyn Fn(&[f64], f64) -> CMat + Send + Sync>;
/// `(I, phi, xi, eps) -> col(g1, g2, g3, g4)`, length `n1 + n2`.
pub type FieldFn = Arc<dyn Fn(&[f64], &[f64], &[f64], f64) -> Vec<f64> + Send + Sync>;
/// `(I, phi, xi, eps) -> d col(g1..g4) / dI`, an `(n1 + n2) x n1` matrix.
pub type JacobianFn = Arc<dyn Fn(&[f64], &[f64], &[f64], f64) -> DMatrix<f64> + Send + Sync>;

/// Warn when the measured spectral gap falls below this value.
pub const SPECTRAL_GAP_WARN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n11: usize,
    pub n12: usize,
    pub n21: usize,
    pub n22: usize,
    pub n3: usize,
}

impl Dims {
    pub fn n1(&self) -> usize {
        self.n11 + self.n12
    }

    pub fn n2(&self) -> usize {
        self.n21 + self.n22
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q4: f64,
    pub q5: f64,
    pub q6: f64,
    pub q7: f64,
}

/// Perturbation callables. Functions must be pure and thread-safe.
#[derive(Clone)]
pub struct Perturbation {
    pub value: FieldFn,
    pub jacobian: Option<JacobianFn>,
    /// `false` routes the input through the smoothing pipeline.
    pub analytic: bool,
    pub label: String,
}

impl std::fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Perturbation")
            .field("label", &self.label)
            .field("analytic", &self.analytic)
            .field("exact_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

#[derive(Clone)]
pub struct SystemSpec {
    pub dims: Dims,
    pub exponents: Exponents,
    pub epsilon: f64,
    pub gamma: f64,
    pub iota: f64,
    pub alpha: u32,
    pub l: f64,
    pub param_box: Vec<[f64; 2]>,
    /// Unscaled `col(omega1, omega2)`.
    pub omega: RealMap,
    /// Unscaled `col(Lambda1, Lambda2)`.
    pub lambda: ComplexMap,
    /// Block-diagonal `diag(B1, B2)`.
    pub b: MatrixMap,
    pub perturbation: Perturbation,
}

impl std::fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemSpec")
            .field("dims", &self.dims)
            .field("exponents", &self.exponents)
            .field("epsilon", &self.epsilon)
            .field("perturbation", &self.perturbation)
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingMatrices {
    /// Diagonal of `P1`.
    pub p1: Vec<f64>,
    /// Diagonal of `P2`.
    pub p2: Vec<f64>,
    pub eps0: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub c0: f64,
    pub c1: f64,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl SystemSpec {
    pub fn n1(&self) -> usize {
        self.dims.n1()
    }

    pub fn n2(&self) -> usize {
        self.dims.n2()
    }

    pub fn scaling(&self) -> ScalingMatrices {
        let q = &self.exponents;
        let e = self.epsilon;
        let d = &self.dims;
        let mut p1 = vec![e.powf(q.q1); d.n11];
        p1.extend(vec![e.powf(q.q3 + q.q4 - q.q2); d.n12]);
        let mut p2 = vec![e.powf(q.q5 + q.q6 - q.q2); d.n21];
        p2.extend(vec![e.powf(q.q7 - q.q2); d.n22]);
        ScalingMatrices {
            p1,
            p2,
            eps0: e.powf(q.q2),
        }
    }

    /// `omega0 = col(eps^{q5} omega1, omega2)`.
    pub fn omega0(&self, xi: &[f64]) -> Vec<f64> {
        self.omega0_at(xi, self.epsilon)
    }

    pub fn omega0_at(&self, xi: &[f64], eps: f64) -> Vec<f64> {
        let mut w = (self.omega)(xi, eps);
        let s = eps.powf(self.exponents.q5);
        for x in w.iter_mut().take(self.dims.n21) {
            *x *= s;
        }
        w
    }

    /// Diagonal of `diag(eps^{q1} Lambda1, eps^{q3} Lambda2)`.
    pub fn lambda0(&self, xi: &[f64]) -> Vec<Complex64> {
        let mut l = (self.lambda)(xi, self.epsilon);
        let s1 = self.epsilon.powf(self.exponents.q1);
        let s3 = self.epsilon.powf(self.exponents.q3);
        for (i, x) in l.iter_mut().enumerate() {
            *x *= if i < self.dims.n11 { s1 } else { s3 };
        }
        l
    }

    pub fn b_matrix(&self, xi: &[f64]) -> CMat {
        (self.b)(xi, self.epsilon)
    }

    /// Real matrix `A0 = B Lambda0 B^-1`.
    pub fn a0(&self, xi: &[f64]) -> Result<DMatrix<f64>> {
        let b = self.b_matrix(xi);
        let b_inv = b.clone().try_inverse().ok_or_else(|| KamError::Singular("B".into()))?;
        let a = &b * DMatrix::from_diagonal(&DVector::from_vec(self.lambda0(xi))) * b_inv;
        let scale = a.iter().fold(1.0f64, |m, z| m.max(z.norm()));
        if a.iter().any(|z| z.im.abs() > 1e-10 * scale) {
            return Err(KamError::InvalidInput("A = B Lambda B^-1 is not real".into()));
        }
        Ok(a.map(|z| z.re))
    }

    /// `(G1, G2)` at one point, including the `eps^{q2}` factor.
    pub fn sample_g(&self, xi: &[f64], phi: &[f64], i: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = (self.perturbation.value)(i, phi, xi, self.epsilon);
        let n1 = self.n1();
        if g.len() != n1 + self.n2() {
            return Err(KamError::InvalidInput(format!(
                "perturbation returned {} components, expected {}",
                g.len(),
                n1 + self.n2()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(KamError::NonFinite {
                index: 0,
                detail: format!("perturbation at I={i:?}, phi={phi:?}"),
            });
        }
        let e0 = self.epsilon.powf(self.exponents.q2);
        let scaled: Vec<f64> = g.iter().map(|x| x * e0).collect();
        Ok((scaled[..n1].to_vec(), scaled[n1..].to_vec()))
    }

    /// `G` sampled on a list of angle points at a fixed `I`.
    pub fn sample_g_grid(&self, xi: &[f64], phis: &[Vec<f64>], i: &[f64]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        phis.iter()
            .enumerate()
            .map(|(p, phi)| {
                self.sample_g(xi, phi, i).map_err(|e| match e {
                    KamError::NonFinite { detail, .. } => KamError::NonFinite { index: p, detail },
                    other => other,
                })
            })
            .collect()
    }

    /// `d G / dI` at one point, `(n1 + n2) x n1`, including `eps^{q2}`.
    /// Central differences with `h = 1e-6 max(1, |I|)` unless an exact
    /// derivative is supplied.
    pub fn g_jacobian(&self, xi: &[f64], phi: &[f64], i: &[f64]) -> Result<DMatrix<f64>> {
        let n1 = self.n1();
        let rows = n1 + self.n2();
        let e0 = self.epsilon.powf(self.exponents.q2);
        let j = match &self.perturbation.jacobian {
            Some(jf) => jf(i, phi, xi, self.epsilon),
            None => {
                let scale = i.iter().fold(1.0f64, |m, x| m.max(x.abs()));
                let h = 1e-6 * scale;
                let mut j = DMatrix::zeros(rows, n1);
                for c in 0..n1 {
                    let mut ip = i.to_vec();
                    let mut im = i.to_vec();
                    ip[c] += h;
                    im[c] -= h;
                    let gp = (self.perturbation.value)(&ip, phi, xi, self.epsilon);
                    let gm = (self.perturbation.value)(&im, phi, xi, self.epsilon);
                    for r in 0..rows {
                        j[(r, c)] = (gp[r] - gm[r]) / (2.0 * h);
                    }
                }
                j
            }
        };
        if j.shape() != (rows, n1) {
            return Err(KamError::InvalidInput(format!(
                "perturbation Jacobian has shape {:?}",
                j.shape()
            )));
        }
        if j.iter().any(|x| !x.is_finite()) {
            return Err(KamError::NonFinite {
                index: 0,
                detail: format!("perturbation Jacobian at I={i:?}, phi={phi:?}"),
            });
        }
        Ok(j * e0)
    }

    /// Check the exponent conditions and measure `c0`, `c1` on a
    /// `density^{n3}` grid over the parameter box.
    pub fn validate(&self, density: usize) -> ValidationReport {
        let mut violations = Vec::new();
        let mut warnings = Vec::new();
        let q = &self.exponents;
        if !(q.q1 > q.q3) {
            violations.push("(H1): q1>q3 fails".to_string());
        }
        if !(q.q3 >= q.q5) {
            violations.push("(H1): q3>=q5 fails".to_string());
        }
        if !(q.q7 >= q.q2 + q.q5) {
            violations.push("(H1): q7>=q2+q5 fails".to_string());
        }
        if !(q.q2 > 0.0 && q.q2 <= q.q4.min(q.q6)) {
            violations.push("(H1): 0<q2<=min(q4,q6) fails".to_string());
        }
        let a = self.alpha as f64;
        if !(self.l > 2.0 * (a + 1.0) * (self.iota + 2.0) + a * self.iota) {
            violations.push("(H3): l>2(alpha+1)(iota+2)+alpha*iota fails".to_string());
        }
        if !(self.iota > a * self.n2() as f64 - 1.0) {
            violations.push("(H3): iota>alpha*n2-1 fails".to_string());
        }
        if self.n1() == 0 || self.n2() == 0 || self.dims.n3 == 0 {
            violations.push("dimensions: n1, n2, n3 must be positive".to_string());
        }
        if self.param_box.len() != self.dims.n3 || self.param_box.iter().any(|[lo, hi]| !(lo < hi)) {
            violations.push("param_box must have n3 nondegenerate intervals".to_string());
        }
        if !(self.epsilon > 0.0) {
            violations.push("epsilon must be positive".to_string());
        }
        if !violations.is_empty() {
            return ValidationReport {
                c0: f64::NAN,
                c1: f64::NAN,
                violations,
                warnings,
            };
        }

        let density = density.max(2);
        let mut c0 = f64::INFINITY;
        let mut c1: f64 = 0.0;
        let n11 = self.dims.n11;
        for xi in box_grid(&self.param_box, density) {
            let lam = (self.lambda)(&xi, self.epsilon);
            let om = (self.omega)(&xi, self.epsilon);
            let b = self.b_matrix(&xi);
            if lam.len() != self.n1() || om.len() != self.n2() || b.shape() != (self.n1(), self.n1()) {
                violations.push(format!("integrable maps return wrong sizes at xi={xi:?}"));
                break;
            }
            for (i, li) in lam.iter().enumerate() {
                c0 = c0.min(li.norm());
                for (j, lj) in lam.iter().enumerate().skip(i + 1) {
                    if (i < n11) == (j < n11) {
                        c0 = c0.min((li - lj).norm());
                    }
                }
            }
            for r in 0..self.n1() {
                for c in 0..self.n1() {
                    if (r < n11) != (c < n11) && b[(r, c)].norm() > 0.0 {
                        violations.push(format!("B is not block diagonal at xi={xi:?}"));
                    }
                }
            }
            match b.clone().try_inverse() {
                Some(bi) => c1 = c1.max(max_abs(&bi)),
                None => violations.push(format!("B singular at xi={xi:?}")),
            }
            c1 = c1
                .max(max_abs(&b))
                .max(lam.iter().fold(0.0, |m, z| m.max(z.norm())))
                .max(om.iter().fold(0.0, |m, z| m.max(z.abs())));
            if !violations.is_empty() {
                break;
            }
        }
        if !(c0 > 0.0) {
            violations.push(format!("(H2): spectral gap c0 = {c0:e} is not positive"));
        } else if c0 < SPECTRAL_GAP_WARN {
            warnings.push(format!("(H2): spectral gap c0 = {c0:e} below {SPECTRAL_GAP_WARN:e}"));
        }
        violations.dedup();
        ValidationReport {
            c0,
            c1,
            violations,
            warnings,
        }
    }
}

fn max_abs(m: &CMat) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// Tensor grid with `density` points per axis (endpoints included).
pub fn box_grid(param_box: &[[f64; 2]], density: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for &[lo, hi] in param_box {
        let mut next = Vec::with_capacity(out.len() * density);
        for p in &out {
            for t in 0..density {
                let mut q = p.clone();
                q.push(lo + (hi - lo) * t as f64 / (density - 1) as f64);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

pub mod config;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::SystemConfig;

    fn corollary() -> SystemSpec {
        let cfg: SystemConfig = serde_json::from_str(config::COROLLARY1_JSON).unwrap();
        cfg.build().unwrap()
    }

    #[test]
    fn corollary_validates() {
        let s = corollary();
        let rep = s.validate(5);
        assert!(rep.ok(), "{rep:?}");
        assert_eq!(rep.c0, 1.0);
        let p = s.scaling();
        assert_eq!(p.p1, vec![1.0]);
        assert_eq!(p.p2, vec![1.0, 1.0]);
        assert_eq!(p.eps0, 1e-3);
    }

    #[test]
    fn h1_boundary_flagged() {
        let mut s = corollary();
        s.exponents.q3 = s.exponents.q1;
        let rep = s.validate(3);
        assert!(rep.violations.iter().any(|v| v == "(H1): q1>q3 fails"));
    }

    #[test]
    fn small_gap_warns() {
        let mut s = corollary();
        s.dims = Dims {
            n11: 0,
            n12: 2,
            n21: 2,
            n22: 0,
            n3: 2,
        };
        s.lambda = Arc::new(|_, _| vec![Complex64::new(1.0, 0.0), Complex64::new(1.0 + 1e-9, 0.0)]);
        s.b = Arc::new(|_, _| DMatrix::identity(2, 2));
        let rep = s.validate(3);
        assert!(rep.ok());
        assert!((rep.c0 - 1e-9).abs() < 1e-15);
        assert!(!rep.warnings.is_empty());
    }

    #[test]
    fn scaling_blocks() {
        let mut s = corollary();
        s.dims = Dims {
            n11: 1,
            n12: 2,
            n21: 1,
            n22: 1,
            n3: 2,
        };
        s.exponents = Exponents {
            q1: 2.0,
            q2: 1.0,
            q3: 1.0,
            q4: 1.5,
            q5: 0.5,
            q6: 2.0,
            q7: 3.0,
        };
        s.epsilon = 0.1;
        let p = s.scaling();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(p.p1[0], 0.01));
        assert!(close(p.p1[1], 0.1f64.powf(1.5)) && close(p.p1[2], p.p1[1]));
        assert!(close(p.p2[0], 0.1f64.powf(1.5)));
        assert!(close(p.p2[1], 0.01));
        assert!(close(p.eps0, 0.1));
    }

    #[test]
    fn sample_g_scaling() {
        let s = corollary();
        let (g1, g2) = s.sample_g(&[1.0, 1.6], &[0.3, -0.2], &[0.0]).unwrap();
        assert!((g1[0] - 1e-3 * (0.1f64).cos()).abs() < 1e-18);
        assert!((g2[0] - 1e-3 * 0.3f64.sin()).abs() < 1e-18);
        assert_eq!(g2[1], 0.0);
        // doubling q2 scales every sample by another eps^{q2}
        let mut s2 = corollary();
        s2.exponents.q2 *= 2.0;
        let (h1, h2) = s2.sample_g(&[1.0, 1.6], &[0.3, -0.2], &[0.0]).unwrap();
        assert!((h1[0] / g1[0] - 1e-3).abs() < 1e-15);
        assert!((h2[0] / g2[0] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn zero_perturbation_samples() {
        let mut s = corollary();
        s.perturbation = config::builtin("zero", &s.dims, s.l).unwrap();
        let (g1, g2) = s.sample_g(&[1.0, 1.5], &[0.1, 0.2], &[0.3]).unwrap();
        assert!(g1.iter().chain(&g2).all(|&x| x == 0.0));
        assert!(s
            .g_jacobian(&[1.0, 1.5], &[0.1, 0.2], &[0.0])
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn jacobian_fd_and_exact_agree() {
        let mut s = corollary();
        let mut terms = config::corollary1_terms();
        terms.push(config::Term {
            component: 1,
            i_powers: vec![2],
            k: vec![0, 1],
            cos: 1.0,
            sin: 0.3,
        });
        s.perturbation = config::from_terms(terms, &s.dims, "with I").unwrap();
        let exact = s.g_jacobian(&[1.0, 1.6], &[0.4, 1.1], &[0.7]).unwrap();
        assert!(exact.amax() > 1e-4);
        let mut fd = s.clone();
        fd.perturbation.jacobian = None;
        let approx = fd.g_jacobian(&[1.0, 1.6], &[0.4, 1.1], &[0.7]).unwrap();
        assert!((exact - approx).amax() < 1e-8 * 1e-3);
    }

    #[test]
    fn jacobian_of_quadratic_vanishes_at_zero() {
        let mut s = corollary();
        s.perturbation = Perturbation {
            value: Arc::new(|i, phi, _, _| vec![i[0] * i[0] * phi[0].cos(), 0.0, 0.0]),
            jacobian: None,
            analytic: true,
            label: "quadratic".into(),
        };
        for h in [1e-2, 1e-4] {
            let j = s.g_jacobian(&[1.0, 1.6], &[0.0, 0.0], &[0.0]).unwrap();
            assert!(j.amax() < h);
        }
        let j = s.g_jacobian(&[1.0, 1.6], &[0.0, 0.0], &[0.5]).unwrap();
        assert!((j[(0, 0)] - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn non_finite_perturbation_rejected() {
        let mut s = corollary();
        s.perturbation.value = Arc::new(|_, phi, _, _| vec![if phi[0] > 1.0 { f64::NAN } else { 0.0 }, 0.0, 0.0]);
        let phis = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        match s.sample_g_grid(&[1.0, 1.6], &phis, &[0.0]) {
            Err(KamError::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grid_over_box() {
        let g = box_grid(&[[0.0, 1.0], [2.0, 4.0]], 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], vec![0.0, 2.0]);
        assert_eq!(g[8], vec![1.0, 4.0]);
    }
}
