//! JSON configuration and the builtin perturbations.

use super::{Dims, Exponents, FieldFn, JacobianFn, Perturbation, SystemSpec};
use crate::error::{KamError, Result};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Shipped two-frequency example: one hyperbolic action, two angles.
pub const COROLLARY1_JSON: &str = r#"{
  "dims": {"n11": 0, "n12": 1, "n21": 2, "n22": 0, "n3": 2},
  "exponents": {"q1": 1, "q2": 1, "q3": 0, "q4": 1, "q5": 0, "q6": 1, "q7": 1},
  "epsilon": 1e-3,
  "gamma": 0.05,
  "iota": 1.5,
  "alpha": 1,
  "l": 20,
  "param_box": [[0.5, 1.5], [1.0, 2.0]],
  "integrable": {
    "omega": {"offset": [0, 0], "matrix": [[1, 0], [0, 1]]},
    "Lambda": {"offset": [-1]}
  },
  "perturbation": {"kind": "builtin", "name": "corollary1"},
  "seed": 42,
  "xi": [1.0, 1.618033988749895],
  "tol": 1e-9
}"#;

/// A real number or an `[re, im]` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CNum {
    Real(f64),
    Pair([f64; 2]),
}

impl CNum {
    pub fn value(self) -> Complex64 {
        match self {
            CNum::Real(x) => Complex64::new(x, 0.0),
            CNum::Pair([re, im]) => Complex64::new(re, im),
        }
    }
}

/// `offset + matrix xi + eps * eps_slope`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Deserialize<'de>"))]
pub struct AffineMap<T> {
    pub offset: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_slope: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrableConfig {
    pub omega: AffineMap<f64>,
    #[serde(rename = "Lambda")]
    pub lambda: AffineMap<CNum>,
    /// Constant block-diagonal eigenvector matrix; identity when absent.
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<CNum>>>,
}

/// `prod_j I_j^{p_j} (cos * cos<k,phi> + sin * sin<k,phi>)` added to `g[component]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub component: usize,
    #[serde(default)]
    pub i_powers: Vec<u32>,
    pub k: Vec<i64>,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PerturbationConfig {
    Trigpoly { terms: Vec<Term> },
    Builtin { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub dims: Dims,
    pub exponents: Exponents,
    pub epsilon: f64,
    pub gamma: f64,
    pub iota: f64,
    pub alpha: u32,
    pub l: f64,
    pub param_box: Vec<[f64; 2]>,
    pub integrable: IntegrableConfig,
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_tilde: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
}

fn bad(msg: impl Into<String>) -> KamError {
    KamError::InvalidInput(msg.into())
}

fn check_matrix(m: &Option<Vec<Vec<f64>>>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if let Some(m) = m {
        if m.len() != rows || m.iter().any(|r| r.len() != cols) {
            return Err(bad(format!("{what}.matrix must be {rows}x{cols}")));
        }
    }
    Ok(())
}

fn affine<T: Copy + Into<Complex64>>(map: &AffineMap<T>, xi: &[f64], eps: f64) -> Vec<Complex64> {
    map.offset
        .iter()
        .enumerate()
        .map(|(r, &o)| {
            let mut v: Complex64 = o.into();
            if let Some(m) = &map.matrix {
                v += m[r].iter().zip(xi).map(|(a, x)| a * x).sum::<f64>();
            }
            if let Some(s) = &map.eps_slope {
                v += s[r].into() * eps;
            }
            v
        })
        .collect()
}

impl From<CNum> for Complex64 {
    fn from(c: CNum) -> Self {
        c.value()
    }
}

impl SystemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn corollary1() -> Self {
        Self::from_json(COROLLARY1_JSON).expect("shipped config parses")
    }

    pub fn build(&self) -> Result<SystemSpec> {
        let d = self.dims;
        let (n1, n2, n3) = (d.n1(), d.n2(), d.n3);
        let ig = &self.integrable;
        if ig.omega.offset.len() != n2 {
            return Err(bad(format!("omega.offset must have length n2 = {n2}")));
        }
        check_matrix(&ig.omega.matrix, n2, n3, "omega")?;
        if ig.omega.eps_slope.as_ref().is_some_and(|s| s.len() != n2) {
            return Err(bad("omega.eps_slope must have length n2"));
        }
        if ig.lambda.offset.len() != n1 {
            return Err(bad(format!("Lambda.offset must have length n1 = {n1}")));
        }
        check_matrix(&ig.lambda.matrix, n1, n3, "Lambda")?;
        if ig.lambda.eps_slope.as_ref().is_some_and(|s| s.len() != n1) {
            return Err(bad("Lambda.eps_slope must have length n1"));
        }
        let b = match &ig.b {
            None => DMatrix::identity(n1, n1),
            Some(rows) => {
                if rows.len() != n1 || rows.iter().any(|r| r.len() != n1) {
                    return Err(bad(format!("B must be {n1}x{n1}")));
                }
                DMatrix::from_fn(n1, n1, |r, c| rows[r][c].value())
            }
        };
        if let Some(xi) = &self.xi {
            if xi.len() != n3 {
                return Err(bad(format!("xi must have length n3 = {n3}")));
            }
        }
        let perturbation = match &self.perturbation {
            PerturbationConfig::Trigpoly { terms } => from_terms(terms.clone(), &d, "trigpoly")?,
            PerturbationConfig::Builtin { name } => builtin(name, &d, self.l)?,
        };
        let omega_map = ig.omega.clone();
        let lambda_map = ig.lambda.clone();
        Ok(SystemSpec {
            dims: d,
            exponents: self.exponents,
            epsilon: self.epsilon,
            gamma: self.gamma,
            iota: self.iota,
            alpha: self.alpha,
            l: self.l,
            param_box: self.param_box.clone(),
            omega: Arc::new(move |xi, eps| affine(&omega_map, xi, eps).into_iter().map(|z| z.re).collect()),
            lambda: Arc::new(move |xi, eps| affine(&lambda_map, xi, eps)),
            b: Arc::new(move |_, _| b.clone()),
            perturbation,
        })
    }
}

/// Perturbation given as a finite sum of monomial-times-trigonometric terms,
/// with its exact `I`-Jacobian.
pub fn from_terms(terms: Vec<Term>, dims: &Dims, label: &str) -> Result<Perturbation> {
    let (n1, n2) = (dims.n1(), dims.n2());
    let mut terms = terms;
    for t in &mut terms {
        if t.component >= n1 + n2 {
            return Err(bad(format!("term component {} out of range", t.component)));
        }
        if t.k.len() != n2 {
            return Err(bad(format!("term k must have length n2 = {n2}")));
        }
        if t.i_powers.len() > n1 {
            return Err(bad(format!("term i_powers longer than n1 = {n1}")));
        }
        t.i_powers.resize(n1, 0);
    }
    let terms = Arc::new(terms);
    let tv = terms.clone();
    let value: FieldFn = Arc::new(move |i, phi, _, _| {
        let mut g = vec![0.0; n1 + n2];
        for t in tv.iter() {
            let a: f64 = t.k.iter().zip(phi).map(|(&k, p)| k as f64 * p).sum();
            let mono: f64 = t.i_powers.iter().zip(i).map(|(&p, x)| x.powi(p as i32)).product();
            g[t.component] += mono * (t.cos * a.cos() + t.sin * a.sin());
        }
        g
    });
    let jacobian: JacobianFn = Arc::new(move |i, phi, _, _| {
        let mut j = DMatrix::zeros(n1 + n2, n1);
        for t in terms.iter() {
            let a: f64 = t.k.iter().zip(phi).map(|(&k, p)| k as f64 * p).sum();
            let trig = t.cos * a.cos() + t.sin * a.sin();
            for c in 0..n1 {
                let pc = t.i_powers[c];
                if pc == 0 {
                    continue;
                }
                let d: f64 = t
                    .i_powers
                    .iter()
                    .zip(i)
                    .enumerate()
                    .map(|(m, (&p, x))| {
                        if m == c {
                            p as f64 * x.powi(p as i32 - 1)
                        } else {
                            x.powi(p as i32)
                        }
                    })
                    .product();
                j[(t.component, c)] += d * trig;
            }
        }
        j
    });
    Ok(Perturbation {
        value,
        jacobian: Some(jacobian),
        analytic: true,
        label: label.to_string(),
    })
}

fn term(component: usize, i_powers: &[u32], k: &[i64], cos: f64, sin: f64) -> Term {
    Term {
        component,
        i_powers: i_powers.to_vec(),
        k: k.to_vec(),
        cos,
        sin,
    }
}

/// Terms of the shipped `corollary1` perturbation on `n1 = 1`, `n2 = 2`:
/// `g = (cos(phi1 + phi2), sin phi1, 0)`.
pub fn corollary1_terms() -> Vec<Term> {
    vec![term(0, &[], &[1, 1], 1.0, 0.0), term(1, &[], &[1, 0], 0.0, 1.0)]
}

/// Number of modes in the `decay` builtin.
const DECAY_MODES: i64 = 64;

/// Builtins: `zero`, `corollary1`, and `decay` (finitely smooth, Fourier
/// coefficients `k^{-l-1}` in the first angle).
pub fn builtin(name: &str, dims: &Dims, l: f64) -> Result<Perturbation> {
    let (n1, n2) = (dims.n1(), dims.n2());
    match name {
        "zero" => Ok(Perturbation {
            value: Arc::new(move |_, _, _, _| vec![0.0; n1 + n2]),
            jacobian: Some(Arc::new(move |_, _, _, _| DMatrix::zeros(n1 + n2, n1))),
            analytic: true,
            label: "zero".into(),
        }),
        "corollary1" => {
            if (n1, n2) != (1, 2) {
                return Err(bad("builtin corollary1 needs n1 = 1 and n2 = 2"));
            }
            from_terms(corollary1_terms(), dims, "corollary1")
        }
        "decay" => {
            let coeffs: Vec<f64> = (1..=DECAY_MODES).map(|k| (k as f64).powf(-l - 1.0)).collect();
            Ok(Perturbation {
                value: Arc::new(move |i, phi, _, _| {
                    let s: f64 = coeffs
                        .iter()
                        .enumerate()
                        .map(|(k, c)| c * ((k + 1) as f64 * phi[0]).cos())
                        .sum();
                    let i0 = i.first().copied().unwrap_or(0.0);
                    let mut g = vec![s; n1 + n2];
                    g[0] += 0.5 * i0 * s;
                    g
                }),
                jacobian: None,
                analytic: false,
                label: "decay".into(),
            })
        }
        other => Err(bad(format!("unknown builtin perturbation {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_round_trips() {
        let c = SystemConfig::corollary1();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(SystemConfig::from_json(&text).unwrap(), c);
        let s = c.build().unwrap();
        assert_eq!(s.omega0(&[1.0, 1.5]), vec![1.0, 1.5]);
        assert_eq!(s.lambda0(&[1.0, 1.5]), vec![Complex64::new(-1.0, 0.0)]);
        assert_eq!(s.a0(&[1.0, 1.5]).unwrap()[(0, 0)], -1.0);
    }

    #[test]
    fn complex_numbers_parse() {
        let v: Vec<CNum> = serde_json::from_str("[1.5, [0, -2]]").unwrap();
        assert_eq!(v[0].value(), Complex64::new(1.5, 0.0));
        assert_eq!(v[1].value(), Complex64::new(0.0, -2.0));
    }

    #[test]
    fn size_errors() {
        let mut c = SystemConfig::corollary1();
        c.integrable.omega.offset = vec![0.0];
        assert!(matches!(c.build(), Err(KamError::InvalidInput(_))));
        let mut c = SystemConfig::corollary1();
        c.perturbation = PerturbationConfig::Builtin { name: "nope".into() };
        assert!(c.build().is_err());
        let mut c = SystemConfig::corollary1();
        c.perturbation = PerturbationConfig::Trigpoly {
            terms: vec![term(5, &[], &[1, 0], 1.0, 0.0)],
        };
        assert!(c.build().is_err());
        assert!(SystemConfig::from_json(r#"{"dims": 3}"#).is_err());
    }

    #[test]
    fn eps_slope_enters_omega() {
        let mut c = SystemConfig::corollary1();
        c.integrable.omega.eps_slope = Some(vec![2.0, 0.0]);
        let s = c.build().unwrap();
        assert!((s.omega0_at(&[1.0, 1.5], 0.1)[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn term_jacobian_matches_fd() {
        let dims = Dims {
            n11: 1,
            n12: 1,
            n21: 1,
            n22: 0,
            n3: 1,
        };
        let p = from_terms(
            vec![term(0, &[2, 1], &[1], 1.0, 0.5), term(2, &[0, 3], &[2], 0.0, 1.0)],
            &dims,
            "t",
        )
        .unwrap();
        let i = [0.3, -0.7];
        let phi = [0.9];
        let j = (p.jacobian.as_ref().unwrap())(&i, &phi, &[0.0], 0.0);
        let h = 1e-6;
        for c in 0..2 {
            let mut ip = i;
            let mut im = i;
            ip[c] += h;
            im[c] -= h;
            let gp = (p.value)(&ip, &phi, &[0.0], 0.0);
            let gm = (p.value)(&im, &phi, &[0.0], 0.0);
            for r in 0..3 {
                assert!((j[(r, c)] - (gp[r] - gm[r]) / (2.0 * h)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn decay_is_flagged_non_analytic() {
        let d = SystemConfig::corollary1().dims;
        let p = builtin("decay", &d, 20.0).unwrap();
        assert!(!p.analytic);
        assert_eq!((p.value)(&[0.0], &[0.0, 0.0], &[1.0, 1.0], 1e-3).len(), 3);
    }
}
