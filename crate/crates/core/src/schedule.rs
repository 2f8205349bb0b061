//! Stage schedule: strip radii `r_nu`, truncation orders `K_nu`, parameter
//! margins `s_nu`, and the auxiliary sequences `chi_nu`, `delta_{nu mu}`.

use crate::stats::factorial;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleParams {
    pub r_tilde: f64,
    pub l: f64,
    pub alpha: u32,
    pub iota: f64,
    pub n2: usize,
    pub n3: usize,
    pub c1: f64,
    pub gamma: f64,
    /// The factor `C0 M eps0` multiplying every `delta_{nu mu}`.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleEntry {
    pub nu: usize,
    pub r: f64,
    /// `K_nu'` before rounding (0 at `nu = 0`).
    pub k_prime: f64,
    pub k: u64,
    pub s: f64,
    pub chi: f64,
    /// `delta_{nu mu}` for `mu = 0..=alpha`.
    pub delta: Vec<f64>,
    /// Running sum `X_nu = sum_{j <= nu} chi_j`.
    pub x_sum: f64,
}

/// `C~ = 24 n2! n2^{n2} e^{-n2}`.
pub fn c_tilde(n2: usize) -> f64 {
    let n = n2 as f64;
    24.0 * factorial(n2) * n.powi(n2 as i32) * (-n).exp()
}

/// `K_nu' = 3^nu r~^{-1} (ln C~ + (n2+1)|ln r~| + (l + (n2+1) nu - alpha) ln 3)`.
pub fn k_prime(nu: usize, p: &ScheduleParams) -> f64 {
    let n2p1 = p.n2 as f64 + 1.0;
    let nuf = nu as f64;
    3f64.powi(nu as i32) / p.r_tilde
        * (c_tilde(p.n2).ln() + n2p1 * p.r_tilde.ln().abs() + (p.l + n2p1 * nuf - p.alpha as f64) * 3f64.ln())
}

fn chi(r: f64, p: &ScheduleParams) -> f64 {
    let a = p.alpha as f64;
    r.powf(p.l - 2.0 * (a + 1.0) * (p.iota + 1.0) - a - 3.0)
}

pub fn schedule(nu: usize, p: &ScheduleParams) -> ScheduleEntry {
    let r = p.r_tilde * 3f64.powi(-(nu as i32));
    let (kp, k) = if nu == 0 {
        (0.0, 0)
    } else {
        let kp = k_prime(nu, p);
        (kp, kp.floor() as u64 + 1)
    };
    let s = if nu == 0 {
        p.gamma
    } else {
        p.gamma / (16.0 * p.c1 * p.n3 as f64 * (p.n2 as f64).sqrt() * (k as f64).powf(p.iota + 1.0))
    };
    let a = p.alpha as f64;
    let delta = (0..=p.alpha)
        .map(|mu| {
            let m = mu as f64;
            p.gamma.powf(-m - 1.0) * r.powf(p.l - (a + m + 2.0) * (p.iota + 1.0) - a - 3.0) * p.scale
        })
        .collect();
    let x_sum = (0..=nu).map(|j| chi(p.r_tilde * 3f64.powi(-(j as i32)), p)).sum();
    ScheduleEntry {
        nu,
        r,
        k_prime: kp,
        k,
        s,
        chi: chi(r, p),
        delta,
        x_sum,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ScheduleParams {
        ScheduleParams {
            r_tilde: 1.0,
            l: 30.0,
            alpha: 1,
            iota: 1.5,
            n2: 2,
            n3: 2,
            c1: 1.0,
            gamma: 0.05,
            scale: 1.0,
        }
    }

    #[test]
    fn c_tilde_value() {
        assert!((c_tilde(2) - 192.0 * (-2f64).exp()).abs() < 1e-12);
        assert!((c_tilde(2) - 25.98).abs() < 0.01);
    }

    #[test]
    fn stage_zero() {
        let p = params();
        let s = schedule(0, &p);
        assert_eq!((s.r, s.k, s.s), (1.0, 0, 0.05));
        assert_eq!(s.chi, 1.0);
        assert_eq!(s.x_sum, s.chi);
    }

    #[test]
    fn k1_plugin_value() {
        let p = params();
        let s = schedule(1, &p);
        let independent = 3.0 * ((192.0 * (-2f64).exp()).ln() + 32.0 * 3f64.ln());
        assert!((s.k_prime - independent).abs() < 1e-10);
        assert!((s.k_prime - 115.2).abs() < 0.05);
        assert_eq!(s.k, 116);
    }

    #[test]
    fn radii_ratio_and_s() {
        let mut p = params();
        p.r_tilde = 0.5;
        for nu in 0..6 {
            let a = schedule(nu, &p);
            let b = schedule(nu + 1, &p);
            assert!((b.r / a.r - 1.0 / 3.0).abs() < 1e-15);
            assert!(b.k > a.k);
            assert!((b.x_sum - a.x_sum - b.chi).abs() <= 1e-12 * b.x_sum);
        }
        let s2 = schedule(2, &p);
        let want = 0.05 / (16.0 * 2.0 * 2f64.sqrt() * (s2.k as f64).powf(2.5));
        assert!((s2.s - want).abs() < 1e-18);
    }

    #[test]
    fn delta_exponents() {
        let mut p = params();
        p.scale = 2.0;
        let s = schedule(1, &p);
        let r: f64 = 1.0 / 3.0;
        // mu = 0: gamma^{-1} r^{30 - 3 * 2.5 - 4}
        assert!((s.delta[0] / (2.0 / 0.05 * r.powf(18.5)) - 1.0).abs() < 1e-12);
        assert!((s.delta[1] / (2.0 / 0.0025 * r.powf(16.0)) - 1.0).abs() < 1e-12);
    }
}
