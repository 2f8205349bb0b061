//! Resonant zones, survivor sets and Monte-Carlo measure estimates, plus the
//! sublevel-set and nondegeneracy checks behind them.

use crate::error::{KamError, Result};
pub use crate::homological::m_set;
use crate::homological::{small_divisor, StageData};
use crate::lattice::{norm1, norm2, punctured_ball, shell};
use crate::model::SystemSpec;
use crate::schedule::{schedule, ScheduleParams};
use crate::stats::{binomial_ci95, factorial, loglog_fit};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Warn (and treat the measure estimates as inapplicable) below this `c2`.
pub const DEGENERACY_FLOOR: f64 = 1e-8;

const I_UNIT: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Clone, Debug, PartialEq)]
pub struct ZoneSpec {
    pub k: Vec<i64>,
    pub m: Vec<i64>,
    pub nu: usize,
    pub gamma: f64,
    pub iota: f64,
    pub eps_q5: f64,
}

impl ZoneSpec {
    /// `gamma eps^{q5} |k|_2^{-iota}`.
    pub fn threshold(&self) -> f64 {
        self.gamma * self.eps_q5 * norm2(&self.k).powf(-self.iota)
    }
}

/// Strict: `|i<k,omega> + <m,Lambda>| < gamma eps^{q5} |k|^{-iota}`.
pub fn zone_test(zone: &ZoneSpec, stage: &StageData) -> bool {
    small_divisor(&zone.k, &zone.m, stage).norm() < zone.threshold()
}

fn divisor(k: &[i64], m: &[i64], omega: &[f64], lambda: &[Complex64]) -> Complex64 {
    let lam: Complex64 = m.iter().zip(lambda).map(|(&mj, l)| l * mj as f64).sum();
    I_UNIT * crate::lattice::dot(k, omega) + lam
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeasureEstimate {
    pub excluded_fraction: f64,
    pub samples: usize,
    pub ci95: f64,
    pub analytic_bound: Option<f64>,
}

impl MeasureEstimate {
    fn from_count(hits: usize, samples: usize) -> Self {
        let p = hits as f64 / samples as f64;
        Self {
            excluded_fraction: p,
            samples,
            ci95: binomial_ci95(p, samples),
            analytic_bound: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleFlag {
    pub xi: Vec<f64>,
    pub excluded: bool,
    /// Stage at which the sample left the survivor set (0 = boundary collar).
    pub nu: Option<usize>,
    pub k: Option<Vec<i64>>,
    pub m: Option<Vec<i64>>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub gamma: f64,
    pub estimate: MeasureEstimate,
    pub flags: Vec<SampleFlag>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    pub samples: usize,
    pub seed: u64,
    /// `K_1, K_2, ...`: stage `nu` tests `K_{nu-1} < |k|_2 <= K_nu`.
    pub ladder: Vec<f64>,
}

/// The capped schedule orders `K_1..K_depth`, with repeats dropped.
pub fn default_ladder(spec: &SystemSpec, r_tilde: f64, max_degree: usize, depth: usize, c1: f64) -> Vec<f64> {
    let params = ScheduleParams {
        r_tilde,
        l: spec.l,
        alpha: spec.alpha,
        iota: spec.iota,
        n2: spec.n2(),
        n3: spec.dims.n3,
        c1,
        gamma: spec.gamma,
        scale: 1.0,
    };
    let mut out: Vec<f64> = Vec::new();
    for nu in 1..=depth {
        let k = schedule(nu, &params).k.min(max_degree as u64) as f64;
        if out.last().is_none_or(|&last| k > last) {
            out.push(k);
        }
    }
    out
}

/// Uniform samples in the box from a seeded stream.
pub fn sample_box(param_box: &[[f64; 2]], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            param_box
                .iter()
                .map(|[lo, hi]| lo + (hi - lo) * rng.gen::<f64>())
                .collect()
        })
        .collect()
}

fn in_collar(xi: &[f64], param_box: &[[f64; 2]], gamma: f64) -> bool {
    xi.iter()
        .zip(param_box)
        .any(|(x, [lo, hi])| x - lo < gamma || hi - x < gamma)
}

/// Monte-Carlo estimate of `meas(Pi \ Pi_depth) / meas(Pi)` using the
/// unperturbed maps `omega0(xi)`, `Lambda0(xi)` at every stage.
pub fn survivor_sweep(spec: &SystemSpec, gamma: f64, opts: &SweepOptions) -> Result<SweepResult> {
    if opts.samples < 100 {
        return Err(KamError::InvalidInput(
            "survivor_sweep needs at least 100 samples".into(),
        ));
    }
    let xis = sample_box(&spec.param_box, opts.samples, opts.seed);
    let ms = m_set(spec.n1());
    let eps_q5 = spec.epsilon.powf(spec.exponents.q5);
    let mut zones: Vec<(usize, Vec<i64>, f64)> = Vec::new();
    let mut lo = 0.0;
    for (i, &hi) in opts.ladder.iter().enumerate() {
        for k in shell(spec.n2(), lo, hi) {
            let thr = gamma * eps_q5 * norm2(&k).powf(-spec.iota);
            zones.push((i + 1, k, thr));
        }
        lo = hi;
    }
    let flags: Vec<SampleFlag> = xis
        .into_par_iter()
        .map(|xi| {
            if in_collar(&xi, &spec.param_box, gamma) {
                return SampleFlag {
                    xi,
                    excluded: true,
                    nu: Some(0),
                    k: None,
                    m: None,
                };
            }
            let omega = spec.omega0(&xi);
            let lambda = spec.lambda0(&xi);
            for (nu, k, thr) in &zones {
                for m in &ms {
                    if divisor(k, m, &omega, &lambda).norm() < *thr {
                        return SampleFlag {
                            xi,
                            excluded: true,
                            nu: Some(*nu),
                            k: Some(k.clone()),
                            m: Some(m.clone()),
                        };
                    }
                }
            }
            SampleFlag {
                xi,
                excluded: false,
                nu: None,
                k: None,
                m: None,
            }
        })
        .collect();
    let hits = flags.iter().filter(|f| f.excluded).count();
    Ok(SweepResult {
        gamma,
        estimate: MeasureEstimate::from_count(hits, flags.len()),
        flags,
    })
}

fn join(v: &[i64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn sweep_csv(result: &SweepResult, n3: usize) -> String {
    let mut out: String = (1..=n3).map(|i| format!("xi_{i},")).collect();
    out.push_str("excluded,first_offending_k,first_offending_m,nu\n");
    for f in &result.flags {
        for x in &f.xi {
            out.push_str(&format!("{x},"));
        }
        out.push_str(&format!(
            "{},{},{},{}\n",
            u8::from(f.excluded),
            f.k.as_deref().map(join).unwrap_or_default(),
            f.m.as_deref().map(join).unwrap_or_default(),
            f.nu.map(|n| n.to_string()).unwrap_or_default()
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub gamma: Vec<f64>,
    pub fraction: Vec<f64>,
    pub ci95: Vec<f64>,
    /// Log-log slope of fraction against gamma (nonzero fractions only).
    pub slope_fit: Option<f64>,
}

pub fn summarize(results: &[SweepResult]) -> SweepSummary {
    let gamma: Vec<f64> = results.iter().map(|r| r.gamma).collect();
    let fraction: Vec<f64> = results.iter().map(|r| r.estimate.excluded_fraction).collect();
    let ci95 = results.iter().map(|r| r.estimate.ci95).collect();
    let (x, y): (Vec<f64>, Vec<f64>) = gamma.iter().zip(&fraction).filter(|(_, &f)| f > 0.0).unzip();
    let slope_fit = if x.len() >= 2 {
        loglog_fit(&x, &y).map(|(s, _)| s)
    } else {
        None
    };
    SweepSummary {
        gamma,
        fraction,
        ci95,
        slope_fit,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SublevelReport {
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Finite-difference step for an order-`alpha` derivative on `[a, b]`.
fn fd_step(alpha: u32, width: f64) -> f64 {
    width * 10f64.powf(-4.0 / (alpha as f64 + 1.0))
}

/// Centered `alpha`-th difference quotient.
fn nth_difference(f: &(dyn Fn(f64) -> f64 + Sync), x: f64, alpha: u32, h: f64) -> f64 {
    let a = alpha as i64;
    let mut sum = 0.0;
    let mut binom = 1.0;
    for j in 0..=a {
        let sign = if (a - j) % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * binom * f(x + (j as f64 - a as f64 / 2.0) * h);
        binom = binom * (a - j) as f64 / (j + 1) as f64;
    }
    sum / h.powi(alpha as i32)
}

/// `meas{x in [a,b]: |f(x)| <= eps} <= 4 (alpha! eps / 2c)^{1/alpha}`, with
/// the measure taken on a midpoint grid of `grid_n` cells. Fails with
/// `Inapplicable` when `|f^(alpha)| >= c` does not hold on the grid.
pub fn lemma_a2_check(
    f: &(dyn Fn(f64) -> f64 + Sync),
    a: f64,
    b: f64,
    alpha: u32,
    c: f64,
    eps_level: f64,
    grid_n: usize,
) -> Result<SublevelReport> {
    if !(b > a) || alpha == 0 || !(c > 0.0) || grid_n == 0 {
        return Err(KamError::InvalidInput(
            "need a < b, alpha >= 1, c > 0, grid_n >= 1".into(),
        ));
    }
    let h = fd_step(alpha, b - a);
    let lo = a + alpha as f64 * h;
    let hi = b - alpha as f64 * h;
    let checks = 10_000usize;
    let worst = (0..=checks)
        .into_par_iter()
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / checks as f64;
            nth_difference(f, x, alpha, h).abs()
        })
        .reduce(|| f64::INFINITY, f64::min);
    if worst < c * (1.0 - 1e-6) {
        return Err(KamError::Inapplicable(format!(
            "|f^({alpha})| >= {c} fails on the grid (min {worst:e})"
        )));
    }
    let dx = (b - a) / grid_n as f64;
    let count = (0..grid_n)
        .into_par_iter()
        .filter(|&i| f(a + (i as f64 + 0.5) * dx).abs() <= eps_level)
        .count();
    let measured = count as f64 * dx;
    let bound = 4.0 * (factorial(alpha as usize) * eps_level / (2.0 * c)).powf(1.0 / alpha as f64);
    Ok(SublevelReport {
        measured,
        bound,
        pass: measured <= bound,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankReport {
    pub c2: f64,
    pub min_rank: usize,
    pub ranks: Vec<usize>,
    /// `32 c1 / c2 n3^{alpha/2}`, infinite when degenerate.
    pub k_star: f64,
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

/// All `alpha`-th order partial derivatives of `g` at `xi` (multi-indices
/// as ordered tuples), by nested central differences.
fn derivative_tensor(g: &(dyn Fn(&[f64]) -> Vec<f64> + Sync), xi: &[f64], order: u32) -> Vec<Vec<f64>> {
    let n = xi.len();
    let scale = xi.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let h = scale * f64::EPSILON.powf(1.0 / (order as f64 + 2.0));
    let mut out = Vec::new();
    let mut idx = vec![0usize; order as usize];
    loop {
        let mut acc: Option<Vec<f64>> = None;
        for signs in 0..(1u32 << order) {
            let mut p = xi.to_vec();
            let mut sgn = 1.0;
            for (t, &axis) in idx.iter().enumerate() {
                if signs >> t & 1 == 1 {
                    p[axis] += h;
                } else {
                    p[axis] -= h;
                    sgn = -sgn;
                }
            }
            let v = g(&p);
            let acc = acc.get_or_insert_with(|| vec![0.0; v.len()]);
            for (a, x) in acc.iter_mut().zip(v) {
                *a += sgn * x;
            }
        }
        let scale = (2.0 * h).powi(order as i32);
        out.push(acc.unwrap_or_default().into_iter().map(|x| x / scale).collect());
        let mut t = order as usize;
        loop {
            if t == 0 {
                return out;
            }
            t -= 1;
            if idx[t] + 1 < n {
                idx[t] += 1;
                for s in idx.iter_mut().skip(t + 1) {
                    *s = 0;
                }
                break;
            }
        }
    }
}

/// Unit vectors: equally spaced on the circle for `n = 2`, seeded uniform
/// directions otherwise.
fn sphere_samples(n: usize, count: usize) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![1.0], vec![-1.0]];
    }
    if n == 2 {
        return (0..count)
            .map(|j| {
                let t = 2.0 * std::f64::consts::PI * j as f64 / count as f64;
                vec![t.cos(), t.sin()]
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if r > 0.1 && r <= 1.0 {
            out.push(v.into_iter().map(|x| x / r).collect());
        }
    }
    out
}

/// `c2 = min_{xi, b} max_mu |D^mu <b, f(xi)>|` over the grid and sampled
/// unit `b`, with `mu` from 0 (`include_value`) or 1 up to `alpha`, and the
/// rank of `(f, D^beta f)` per grid point.
pub fn rank_nondegeneracy(
    f: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
    alpha: u32,
    xi_grid: &[Vec<f64>],
    b_samples: usize,
    include_value: bool,
    c1: f64,
) -> Result<RankReport> {
    if xi_grid.is_empty() || alpha == 0 {
        return Err(KamError::InvalidInput("need a nonempty grid and alpha >= 1".into()));
    }
    let n2 = f(&xi_grid[0]).len();
    let n3 = xi_grid[0].len();
    let bs = sphere_samples(n2, b_samples.max(8).div_ceil(8) * 8);
    let per_point: Vec<(f64, usize)> = xi_grid
        .par_iter()
        .map(|xi| {
            let value = f(xi);
            let tensors: Vec<Vec<Vec<f64>>> = (1..=alpha).map(|mu| derivative_tensor(f, xi, mu)).collect();
            let mut cols: Vec<Vec<f64>> = Vec::new();
            if include_value {
                cols.push(value.clone());
            }
            for t in &tensors {
                cols.extend(t.iter().cloned());
            }
            let mat = DMatrix::from_fn(n2, cols.len(), |r, c| cols[c][r]);
            let sv = mat.singular_values();
            let top = sv.iter().cloned().fold(0.0, f64::max);
            let rank = sv.iter().filter(|&&s| s > 1e-8 * top.max(1.0)).count();
            let score = |b: &[f64]| {
                let dot = |v: &[f64]| v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                let mut best: f64 = if include_value { dot(&value).abs() } else { 0.0 };
                for t in &tensors {
                    let norm = t.iter().map(|d| dot(d).powi(2)).sum::<f64>().sqrt();
                    best = best.max(norm);
                }
                best
            };
            let (arg, mut worst) = bs
                .iter()
                .enumerate()
                .map(|(j, b)| (j, score(b)))
                .fold((0, f64::INFINITY), |a, c| if c.1 < a.1 { c } else { a });
            if n2 == 2 {
                // golden-section refinement around the best sampled angle
                let step = 2.0 * std::f64::consts::PI / bs.len() as f64;
                let at = |t: f64| score(&[t.cos(), t.sin()]);
                let g = 0.5 * (5f64.sqrt() - 1.0);
                let (mut a, mut b) = (arg as f64 * step - step, arg as f64 * step + step);
                for _ in 0..60 {
                    let (x1, x2) = (b - g * (b - a), a + g * (b - a));
                    if at(x1) < at(x2) {
                        b = x2;
                    } else {
                        a = x1;
                    }
                }
                worst = worst.min(at(0.5 * (a + b)));
            }
            (worst, rank)
        })
        .collect();
    let c2 = per_point.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let ranks: Vec<usize> = per_point.iter().map(|p| p.1).collect();
    let min_rank = ranks.iter().copied().min().unwrap_or(0);
    let degenerate = c2 <= DEGENERACY_FLOOR || min_rank < n2;
    let mut warnings = Vec::new();
    if degenerate {
        warnings.push(format!(
            "degenerate frequency map: c2 = {c2:e}, min rank {min_rank} < {n2} or c2 <= {DEGENERACY_FLOOR:e}; measure estimates inapplicable"
        ));
    }
    let k_star = if c2 > DEGENERACY_FLOOR {
        32.0 * c1 / c2 * (n3 as f64).powf(alpha as f64 / 2.0)
    } else {
        f64::INFINITY
    };
    Ok(RankReport {
        c2,
        min_rank,
        ranks,
        k_star,
        degenerate,
        warnings,
    })
}

/// `omega~ = col(omega1(xi, 0), omega21(xi))`, with `omega21` from the
/// two-point difference `(omega2(eps) - omega2(eps/2)) / (eps^{q5} - (eps/2)^{q5})`.
pub fn omega_tilde(spec: &SystemSpec, xi: &[f64]) -> Result<Vec<f64>> {
    let n21 = spec.dims.n21;
    let e = spec.epsilon;
    let q5 = spec.exponents.q5;
    let mut out: Vec<f64> = (spec.omega)(xi, 0.0)[..n21].to_vec();
    if spec.dims.n22 > 0 {
        let denom = e.powf(q5) - (0.5 * e).powf(q5);
        if denom.abs() < 1e-300 {
            return Err(KamError::Inapplicable("omega21 needs q5 > 0".into()));
        }
        let hi = (spec.omega)(xi, e);
        let lo = (spec.omega)(xi, 0.5 * e);
        out.extend((n21..spec.n2()).map(|i| (hi[i] - lo[i]) / denom));
    }
    Ok(out)
}

/// Rank check of `omega~` on a `density^{n3}` grid over the box.
pub fn omega_tilde_rank(spec: &SystemSpec, density: usize, b_samples: usize, c1: f64) -> Result<RankReport> {
    omega_tilde(spec, &spec.param_box.iter().map(|[lo, _]| *lo).collect::<Vec<_>>())?;
    let grid = crate::model::box_grid(&spec.param_box, density);
    let f = |xi: &[f64]| omega_tilde(spec, xi).unwrap_or_default();
    rank_nondegeneracy(&f, spec.alpha, &grid, b_samples, spec.dims.n22 == 0, c1)
}

/// `m` in `Z^{n12}` with `1 <= |m|_1 <= 2` and `sum m` in `{0, -1}`.
pub fn lambda2_m_set(n12: usize) -> Vec<Vec<i64>> {
    m_set(n12).into_iter().filter(|m| m.iter().any(|&x| x != 0)).collect()
}

/// Fraction of samples with `|i<k, omega~0 + eps^{q5} omega~> + eps^{q3}<m, Lambda~2>|`
/// below `gamma eps^{q5} |k|^{-iota}` for some `0 < |k|_2 < k_max` and `m` in
/// the Lambda2-block set, per `gamma`. Should go to 0 with `gamma`.
pub fn zone_limit_check(
    spec: &SystemSpec,
    gammas: &[f64],
    k_max: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let d = spec.dims;
    let e = spec.epsilon;
    let eq5 = e.powf(spec.exponents.q5);
    let eq3 = e.powf(spec.exponents.q3);
    let ms = lambda2_m_set(d.n12);
    let ks: Vec<Vec<i64>> = punctured_ball(spec.n2(), k_max)
        .into_iter()
        .filter(|k| norm2(k) < k_max)
        .collect();
    let xis = sample_box(&spec.param_box, samples, seed);
    let data: Vec<(Vec<f64>, Vec<Complex64>)> = xis
        .iter()
        .map(|xi| {
            let wt = omega_tilde(spec, xi)?;
            let base = (spec.omega)(xi, 0.0);
            let full: Vec<f64> = (0..spec.n2())
                .map(|i| if i < d.n21 { eq5 * wt[i] } else { base[i] + eq5 * wt[i] })
                .collect();
            let lam = (spec.lambda)(xi, 0.0)[d.n11..].iter().map(|l| l * eq3).collect();
            Ok((full, lam))
        })
        .collect::<Result<_>>()?;
    Ok(gammas
        .iter()
        .map(|&g| {
            let hits = data
                .par_iter()
                .filter(|(w, lam)| {
                    ks.iter().any(|k| {
                        let thr = g * eq5 * norm2(k).powf(-spec.iota);
                        ms.iter().any(|m| divisor(k, m, w, lam).norm() < thr)
                    })
                })
                .count();
            (g, hits as f64 / samples as f64)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZoneMeasure {
    pub k: Vec<i64>,
    pub m: Vec<i64>,
    /// Monte-Carlo zone volume.
    pub measured: f64,
    pub ci95: f64,
    /// `(gamma |k|_2^{-iota-1})^{1/alpha}`.
    pub scale: f64,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZoneMeasureReport {
    pub zones: Vec<ZoneMeasure>,
    /// Log-log slope of measured volume against `scale` (expected 1).
    pub slope: Option<f64>,
    /// Largest `measured / (diam^{n3-1} scale)` seen.
    pub c5_fit: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZoneMeasureOptions {
    pub samples: usize,
    pub seed: u64,
    pub c1: f64,
    pub c2: f64,
}

/// Zone volumes `meas R_km(gamma)` under the unperturbed maps, checked
/// against the scaling `(gamma |k|^{-iota-1})^{1/alpha}`. Zones with
/// `|k|_2 < 16 c1 |m|_1 n3^{alpha/2} / c2` are skipped.
pub fn zone_measure_check(
    spec: &SystemSpec,
    zones: &[(Vec<i64>, Vec<i64>)],
    gamma: f64,
    opts: &ZoneMeasureOptions,
) -> ZoneMeasureReport {
    let alpha = spec.alpha as f64;
    let n3 = spec.dims.n3;
    let eps_q5 = spec.epsilon.powf(spec.exponents.q5);
    let volume: f64 = spec.param_box.iter().map(|[lo, hi]| hi - lo).product();
    let diam = spec
        .param_box
        .iter()
        .map(|[lo, hi]| (hi - lo).powi(2))
        .sum::<f64>()
        .sqrt();
    let xis = sample_box(&spec.param_box, opts.samples, opts.seed);
    let freqs: Vec<(Vec<f64>, Vec<Complex64>)> = xis.par_iter().map(|xi| (spec.omega0(xi), spec.lambda0(xi))).collect();
    let out: Vec<ZoneMeasure> = zones
        .iter()
        .map(|(k, m)| {
            let kn = norm2(k);
            let scale = (gamma * kn.powf(-spec.iota - 1.0)).powf(1.0 / alpha);
            let need = 16.0 / opts.c2 * opts.c1 * norm1(m) * (n3 as f64).powf(alpha / 2.0);
            if kn < need {
                return ZoneMeasure {
                    k: k.clone(),
                    m: m.clone(),
                    measured: f64::NAN,
                    ci95: f64::NAN,
                    scale,
                    skipped: Some(format!("|k|_2 = {kn} below hypothesis threshold {need}")),
                };
            }
            let thr = gamma * eps_q5 * kn.powf(-spec.iota);
            let hits = freqs
                .par_iter()
                .filter(|(w, l)| divisor(k, m, w, l).norm() < thr)
                .count();
            let est = MeasureEstimate::from_count(hits, opts.samples);
            ZoneMeasure {
                k: k.clone(),
                m: m.clone(),
                measured: est.excluded_fraction * volume,
                ci95: est.ci95 * volume,
                scale,
                skipped: None,
            }
        })
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = out
        .iter()
        .filter(|z| z.skipped.is_none() && z.measured > 0.0)
        .map(|z| (z.scale, z.measured))
        .unzip();
    let slope = if x.len() >= 2 {
        loglog_fit(&x, &y).map(|(s, _)| s)
    } else {
        None
    };
    let c5_fit = x
        .iter()
        .zip(&y)
        .map(|(s, m)| m / (diam.powi(n3 as i32 - 1) * s))
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    ZoneMeasureReport {
        zones: out,
        slope,
        c5_fit,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InclusionReport {
    pub samples: usize,
    /// Sample/zone pairs with `|m|_1 >= 1` that were hit.
    pub zone_hits: usize,
    /// Hits not covered by the `m = 0` test at threshold `2 gamma`.
    pub violations: usize,
}

/// Every `|m|_1 >= 1` zone hit must also satisfy
/// `|<k, omega>| < 2 gamma eps^{q5} |k|^{-iota}`.
pub fn zone_inclusion_check(spec: &SystemSpec, gamma: f64, k_max: f64, samples: usize, seed: u64) -> InclusionReport {
    let ms: Vec<Vec<i64>> = m_set(spec.n1())
        .into_iter()
        .filter(|m| m.iter().any(|&x| x != 0))
        .collect();
    let ks = punctured_ball(spec.n2(), k_max);
    let eps_q5 = spec.epsilon.powf(spec.exponents.q5);
    let xis = sample_box(&spec.param_box, samples, seed);
    let (hits, bad) = xis
        .par_iter()
        .map(|xi| {
            let w = spec.omega0(xi);
            let l = spec.lambda0(xi);
            let mut hits = 0usize;
            let mut bad = 0usize;
            for k in &ks {
                let thr = gamma * eps_q5 * norm2(k).powf(-spec.iota);
                for m in &ms {
                    if divisor(k, m, &w, &l).norm() < thr {
                        hits += 1;
                        if crate::lattice::dot(k, &w).abs() >= 2.0 * thr {
                            bad += 1;
                        }
                    }
                }
            }
            (hits, bad)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    InclusionReport {
        samples,
        zone_hits: hits,
        violations: bad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::SystemConfig;
    use crate::schedule::ScheduleEntry;

    const GOLDEN: f64 = 1.618_033_988_749_895;

    fn stage(omega: Vec<f64>, lambda: Vec<Complex64>) -> StageData {
        let n1 = lambda.len();
        let entry = ScheduleEntry {
            nu: 0,
            r: 1.0,
            k_prime: 0.0,
            k: 0,
            s: 0.05,
            chi: 1.0,
            delta: vec![1.0],
            x_sum: 1.0,
        };
        StageData::new(0, omega, lambda, DMatrix::identity(n1, n1), entry).unwrap()
    }

    fn zone(k: &[i64], gamma: f64) -> ZoneSpec {
        ZoneSpec {
            k: k.to_vec(),
            m: vec![0],
            nu: 1,
            gamma,
            iota: 1.5,
            eps_q5: 1.0,
        }
    }

    #[test]
    fn m_set_examples() {
        assert_eq!(m_set(1), vec![vec![0], vec![-1]]);
        let mut two = m_set(2);
        two.sort();
        let mut want = vec![vec![0, 0], vec![1, -1], vec![-1, 1], vec![-1, 0], vec![0, -1]];
        want.sort();
        assert_eq!(two, want);
        for n in 1..4 {
            for m in m_set(n) {
                let s: i64 = m.iter().sum();
                assert!(norm1(&m) <= 2.0 && (s == 0 || s == -1));
            }
        }
    }

    #[test]
    fn zone_examples() {
        let l = vec![Complex64::new(-1.0, 0.0)];
        assert!(zone_test(&zone(&[1, -1], 0.05), &stage(vec![1.0, 1.0], l.clone())));
        assert!(!zone_test(&zone(&[1, -1], 0.05), &stage(vec![1.0, GOLDEN], l.clone())));
        // divisor exactly at the threshold: |<(1,0),(1,x)>| = 1 = gamma * 1^{-iota}
        assert!(!zone_test(&zone(&[1, 0], 1.0), &stage(vec![1.0, GOLDEN], l)));
    }

    fn corollary() -> SystemSpec {
        SystemConfig::corollary1().build().unwrap()
    }

    fn opts(samples: usize) -> SweepOptions {
        SweepOptions {
            samples,
            seed: 42,
            ladder: vec![8.0, 16.0],
        }
    }

    #[test]
    fn tiny_gamma_excludes_almost_nothing() {
        let r = survivor_sweep(&corollary(), 1e-8, &opts(2000)).unwrap();
        assert!(r.estimate.excluded_fraction <= 3.0 / 2000.0);
    }

    #[test]
    fn constant_map_zones_all_or_nothing() {
        let mut s = corollary();
        s.omega = std::sync::Arc::new(|_, _| vec![1.0, 1.0]);
        let mut o = opts(500);
        o.ladder = vec![2.0];
        // shrink the collar away so only the zone decides
        let r = survivor_sweep(&s, 1e-12, &o).unwrap();
        assert_eq!(r.estimate.excluded_fraction, 1.0);
        assert!(r.flags.iter().all(|f| f.k.as_deref() == Some(&[-1, 1][..])));
    }

    #[test]
    fn sweep_monotone_in_gamma_and_deterministic() {
        let s = corollary();
        let a = survivor_sweep(&s, 1e-3, &opts(1000)).unwrap();
        let b = survivor_sweep(&s, 1e-2, &opts(1000)).unwrap();
        for (x, y) in a.flags.iter().zip(&b.flags) {
            assert_eq!(x.xi, y.xi);
            assert!(!x.excluded || y.excluded);
        }
        let again = survivor_sweep(&s, 1e-3, &opts(1000)).unwrap();
        assert_eq!(sweep_csv(&a, 2), sweep_csv(&again, 2));
    }

    #[test]
    fn depth_zero_is_the_collar() {
        let s = corollary();
        let mut o = opts(4000);
        o.ladder.clear();
        let r = survivor_sweep(&s, 0.05, &o).unwrap();
        // box [0.5,1.5]x[1,2]: collar fraction 1 - 0.9^2
        assert!((r.estimate.excluded_fraction - 0.19).abs() <= r.estimate.ci95 + 0.01);
        assert!(r.flags.iter().all(|f| f.excluded == (f.nu == Some(0))));
    }

    #[test]
    fn sweep_rows() {
        let s = corollary();
        let r = survivor_sweep(&s, 0.05, &opts(200)).unwrap();
        let csv = sweep_csv(&r, 2);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("xi_1,xi_2,excluded,first_offending_k,first_offending_m,nu")
        );
        assert_eq!(lines.count(), 200);
        assert!(survivor_sweep(&s, 0.05, &opts(50)).is_err());
    }

    #[test]
    fn lemma_a2_examples() {
        let r = lemma_a2_check(&|x| x, 0.0, 1.0, 1, 1.0, 0.1, 100_000).unwrap();
        assert!((r.measured - 0.1).abs() < 1e-4 && (r.bound - 0.2).abs() < 1e-12 && r.pass);
        let r = lemma_a2_check(&|x| x * x, -1.0, 1.0, 2, 2.0, 0.01, 100_000).unwrap();
        assert!((r.measured - 0.2).abs() < 1e-4);
        assert!((r.bound - 4.0 * (0.005f64).sqrt()).abs() < 1e-12 && r.pass);
        let c = std::f64::consts::FRAC_PI_4.cos();
        for eps in [0.01, 0.05] {
            assert!(
                lemma_a2_check(&|x: f64| x.sin(), 0.0, std::f64::consts::FRAC_PI_4, 1, c, eps, 100_000)
                    .unwrap()
                    .pass
            );
        }
        assert!(matches!(
            lemma_a2_check(&|x: f64| x.sin(), 0.0, 3.0, 1, 0.5, 0.1, 1000),
            Err(KamError::Inapplicable(_))
        ));
    }

    #[test]
    fn rank_examples() {
        let grid = crate::model::box_grid(&[[1.0, 2.0], [1.0, 2.0]], 5);
        let id = rank_nondegeneracy(&|x: &[f64]| x.to_vec(), 1, &grid, 64, false, 2.0).unwrap();
        assert!(id.ranks.iter().all(|&r| r == 2));
        assert!((id.c2 - 1.0).abs() < 1e-6);
        assert!((id.k_star - 64.0 * 2f64.sqrt()).abs() < 1e-3);

        let flat = rank_nondegeneracy(&|x: &[f64]| vec![x[0], x[0]], 1, &grid, 64, true, 2.0).unwrap();
        assert!(flat.degenerate && flat.min_rank == 1);
        assert!(!flat.warnings.is_empty());

        let g = |x: &[f64]| vec![x[0], x[0] * x[0] + x[1]];
        let coarse = rank_nondegeneracy(&g, 1, &grid, 64, false, 2.0).unwrap();
        let fine = rank_nondegeneracy(
            &g,
            1,
            &crate::model::box_grid(&[[1.0, 2.0], [1.0, 2.0]], 9),
            256,
            false,
            2.0,
        )
        .unwrap();
        assert_eq!(coarse.min_rank, 2);
        assert!((coarse.c2 / fine.c2 - 1.0).abs() < 0.1);
    }

    #[test]
    fn second_derivatives() {
        let grid = [vec![0.3, 0.7]];
        let g = |x: &[f64]| vec![x[0] * x[0] * x[1]];
        let t = derivative_tensor(&g, &grid[0], 2);
        // (0,0), (0,1), (1,0), (1,1)
        let want = [2.0 * 0.7, 2.0 * 0.3, 2.0 * 0.3, 0.0];
        for (d, w) in t.iter().zip(want) {
            assert!((d[0] - w).abs() < 1e-5, "{d:?} vs {w}");
        }
    }

    #[test]
    fn corollary_omega_tilde_is_identity() {
        let s = corollary();
        assert_eq!(omega_tilde(&s, &[1.2, 1.7]).unwrap(), vec![1.2, 1.7]);
        let rep = omega_tilde_rank(&s, 5, 64, 2.0).unwrap();
        assert!(!rep.degenerate);
        assert!(rep.c2 >= 1.0 - 1e-6);
    }

    #[test]
    fn extrapolated_omega21() {
        let mut s = corollary();
        s.dims.n21 = 1;
        s.dims.n22 = 1;
        s.exponents.q5 = 0.5;
        s.omega = std::sync::Arc::new(|xi, e| vec![xi[0], 3.0 + e.sqrt() * xi[1] * xi[1]]);
        let wt = omega_tilde(&s, &[1.1, 1.5]).unwrap();
        assert!((wt[0] - 1.1).abs() < 1e-15);
        assert!((wt[1] - 2.25).abs() < 1e-12);
        s.exponents.q5 = 0.0;
        assert!(omega_tilde(&s, &[1.1, 1.5]).is_err());
    }

    #[test]
    fn slab_volume_for_identity_map() {
        let mut s = corollary();
        s.param_box = vec![[0.0, 1.0], [0.0, 1.0]];
        let gamma = 0.05;
        let o = ZoneMeasureOptions {
            samples: 200_000,
            seed: 7,
            c1: 1.0,
            c2: 1.0,
        };
        let rep = zone_measure_check(&s, &[(vec![1, -1], vec![0])], gamma, &o);
        let z = &rep.zones[0];
        // strip |x - y| < gamma 2^{-3/4} inside the unit square
        let h = gamma * 2f64.powf(-0.75);
        let exact = 1.0 - (1.0 - h) * (1.0 - h);
        assert!((z.measured - exact).abs() <= 2.0 * z.ci95, "{} vs {exact}", z.measured);
    }

    #[test]
    fn zone_measure_halves_with_gamma() {
        let s = corollary();
        let o = ZoneMeasureOptions {
            samples: 200_000,
            seed: 11,
            c1: 1.0,
            c2: 1.0,
        };
        let zones = vec![(vec![2, -1], vec![0])];
        let a = zone_measure_check(&s, &zones, 0.02, &o).zones[0].clone();
        let b = zone_measure_check(&s, &zones, 0.01, &o).zones[0].clone();
        let ratio = b.measured / a.measured;
        assert!(
            (ratio - 0.5).abs() <= 3.0 * (a.ci95 / a.measured + b.ci95 / b.measured) * 0.5,
            "{ratio}"
        );
    }

    #[test]
    fn zone_scaling_over_shells() {
        let s = corollary();
        let o = ZoneMeasureOptions {
            samples: 100_000,
            seed: 3,
            c1: 1.0,
            c2: 1.0,
        };
        let zones: Vec<(Vec<i64>, Vec<i64>)> = [[1, -1], [3, -2], [5, -3], [8, -5]]
            .iter()
            .map(|k| (k.to_vec(), vec![0]))
            .collect();
        let rep = zone_measure_check(&s, &zones, 0.05, &o);
        assert!(rep.zones.iter().all(|z| z.skipped.is_none()));
        assert!(rep.c5_fit.unwrap() > 0.0);
        let skipped = zone_measure_check(&s, &[(vec![1, 0], vec![-1])], 0.05, &o);
        assert!(skipped.zones[0].skipped.is_some());
    }

    #[test]
    fn inclusion_holds_for_small_eps() {
        let mut c = SystemConfig::corollary1();
        c.dims.n12 = 2;
        c.exponents.q1 = 2.0;
        c.exponents.q3 = 1.0;
        c.exponents.q5 = 0.0;
        c.integrable.lambda.offset = vec![
            crate::model::config::CNum::Pair([-1.0, 0.5]),
            crate::model::config::CNum::Pair([-1.0, -0.5]),
        ];
        c.perturbation = crate::model::config::PerturbationConfig::Builtin { name: "zero".into() };
        let s = c.build().unwrap();
        let rep = zone_inclusion_check(&s, 0.05, 10.0, 2000, 5);
        assert!(rep.zone_hits > 0);
        assert_eq!(rep.violations, 0);
    }

    #[test]
    fn limit_zones_vanish() {
        let s = corollary();
        let out = zone_limit_check(&s, &[1e-2, 1e-6], 10.0, 500, 1).unwrap();
        assert!(out.iter().all(|&(_, f)| f == 0.0));
        assert_eq!(lambda2_m_set(1), vec![vec![-1]]);
    }
}
