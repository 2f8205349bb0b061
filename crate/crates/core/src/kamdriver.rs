//! The KAM iteration. Each step solves the three homological equations,
//! updates `omega` and `Lambda`, composes the new transform onto
//!
//! ```text
//! T(rho, phi) = (W0(phi) + W1(phi) rho, phi + Psi(phi))
//! ```
//!
//! and re-derives `u0`, `u1`, `w` by pulling the original field back through
//! `T` on a grid.

use crate::error::{KamError, Result};
use crate::grid::{angles_at, GridSamples};
use crate::homological::{check_nonresonance, solve_phi, solve_v0, solve_v1, StageData};
use crate::model::config::SystemConfig;
use crate::model::{ScalingMatrices, SystemSpec};
use crate::schedule::{schedule, ScheduleEntry, ScheduleParams};
use crate::smoothing::smooth_periodic;
use crate::trigpoly::{CMat, TrigPoly};
use nalgebra::{DMatrix, DVector, Dim, Matrix, Storage};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

pub const DIAGNOSTICS_CSV_HEADER: &str = "nu,K,r,s,norm_u0,norm_u1,norm_w,residual,omega_drift,lambda_drift,status";

/// Largest per-axis grid used to sample a non-analytic perturbation.
const MAX_JET_GRID: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub max_steps: usize,
    pub tol: f64,
    pub r_tilde: f64,
    /// Cap on the truncation order; `K_nu` from the schedule is clipped here.
    pub max_degree: usize,
    /// Overrides the measured `c1` in the schedule.
    pub c1: Option<f64>,
    /// Overrides the config `gamma`.
    pub gamma: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_steps: 12,
            tol: 1e-9,
            r_tilde: 0.5,
            max_degree: 16,
            c1: None,
            gamma: None,
        }
    }
}

impl RunOptions {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        let d = Self::default();
        Self {
            max_steps: cfg.max_steps.unwrap_or(d.max_steps),
            tol: cfg.tol.unwrap_or(d.tol),
            r_tilde: cfg.r_tilde.unwrap_or(d.r_tilde),
            max_degree: cfg.max_degree.unwrap_or(d.max_degree),
            c1: cfg.c1,
            gamma: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Converged,
    ResonantHalt { k: Vec<i64>, m: Vec<i64>, divisor: f64 },
    Diverged(String),
    MaxSteps,
}

impl RunStatus {
    pub fn label(&self) -> &'static str {
        match self {
            RunStatus::Converged => "Converged",
            RunStatus::ResonantHalt { .. } => "ResonantHalt",
            RunStatus::Diverged(_) => "Diverged",
            RunStatus::MaxSteps => "MaxSteps",
        }
    }
}

/// `I = rho + v0 + v1 rho`, `phi = phi + Phi`.
#[derive(Clone, Debug)]
pub struct StepTransform {
    pub nu: usize,
    pub v0: TrigPoly,
    pub v1: TrigPoly,
    pub phi: TrigPoly,
    pub strip_radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub nu: usize,
    /// Truncation order used for this stage (after the cap).
    pub k: u64,
    /// Order requested by the schedule.
    pub k_schedule: u64,
    pub r: f64,
    pub s: f64,
    pub norm_u0: f64,
    pub norm_u1: f64,
    pub norm_w: f64,
    /// Grid sup of the torus invariance defect at this stage.
    pub residual: f64,
    pub omega_drift: f64,
    pub lambda_drift: f64,
    /// `max(|u0|, |w|)` over the previous stage's value.
    pub contraction: Option<f64>,
    pub status: String,
}

impl Diagnostics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            self.nu,
            self.k,
            self.r + 0.0,
            self.s + 0.0,
            self.norm_u0 + 0.0,
            self.norm_u1 + 0.0,
            self.norm_w + 0.0,
            self.residual + 0.0,
            self.omega_drift + 0.0,
            self.lambda_drift + 0.0,
            self.status
        )
    }

    pub fn majorant(&self) -> f64 {
        self.norm_u0.max(self.norm_w)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TorusResult {
    /// `I = V0(phi)`.
    pub v0: TrigPoly,
    /// `phi = phi^ + Psi(phi^)`.
    pub angle_shift: TrigPoly,
    pub omega_star: Vec<f64>,
    pub lambda_star: Vec<Complex64>,
    pub residual: f64,
}

impl TorusResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("torus serializes") + "\n"
    }
}

#[derive(Clone, Debug)]
pub struct KamRun {
    pub steps: Vec<(StepTransform, StageData)>,
    pub diagnostics: Vec<Diagnostics>,
    pub status: RunStatus,
    pub torus: Option<TorusResult>,
    /// The schedule asked for a higher order than `max_degree`.
    pub schedule_truncated: bool,
    /// Smallest `c` with block drifts bounded by `c eps^{q}`.
    pub drift_constant: f64,
    /// Total frequency drift is at most twice the largest single-step update.
    pub geometric_drift_ok: bool,
    /// `C` in `|w^1| <= C |w^0|^2 / (gamma eps^{q5} K_1^{-iota})`.
    pub truncation_constant: Option<f64>,
    /// Largest `max(|u0|, |w|) / delta_{nu 0}` seen.
    pub c0_tilde: f64,
    pub warnings: Vec<String>,
}

impl KamRun {
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from(DIAGNOSTICS_CSV_HEADER);
        out.push('\n');
        for d in &self.diagnostics {
            out.push_str(&d.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    pub fn final_omega(&self) -> Option<&[f64]> {
        self.torus.as_ref().map(|t| t.omega_star.as_slice())
    }
}

/// `u0 = Gamma_K G1(0,.)`, `u1 = Gamma_K d_I G1(0,.)`, `w = Gamma_K G2(0,.)`.
pub fn extract_lower_degree(
    g1: &GridSamples,
    dg1: &GridSamples,
    g2: &GridSamples,
    k: f64,
) -> Result<(TrigPoly, TrigPoly, TrigPoly)> {
    let grab = |s: &GridSamples| -> Result<TrigPoly> {
        let nyquist = s.dims().iter().map(|&d| d / 2).min().unwrap_or(0) as f64;
        if nyquist < k {
            return Err(KamError::InvalidInput(format!("grid Nyquist {nyquist} below K = {k}")));
        }
        Ok(TrigPoly::from_grid(s, true)?.truncate(k))
    };
    Ok((grab(g1)?, grab(dg1)?, grab(g2)?))
}

/// The accumulated transform.
#[derive(Clone, Debug)]
struct Frame {
    w0: TrigPoly,
    w1: TrigPoly,
    psi: TrigPoly,
}

struct FrameSamples {
    w0: GridSamples,
    dw0: Vec<GridSamples>,
    w1: GridSamples,
    dw1: Vec<GridSamples>,
    psi: GridSamples,
    dpsi: Vec<GridSamples>,
}

fn re(g: &GridSamples, p: usize) -> DMatrix<f64> {
    g.get(p).map(|z| z.re)
}

fn columns(parts: &[GridSamples], p: usize) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = parts.iter().map(|g| re(g, p).column(0).into_owned()).collect();
    DMatrix::from_columns(&cols)
}

impl Frame {
    fn identity(n1: usize, n2: usize) -> Self {
        Self {
            w0: TrigPoly::zero(n2, (n1, 1)).with_real_flag(true),
            w1: TrigPoly::constant(n2, DMatrix::identity(n1, n1)).with_real_flag(true),
            psi: TrigPoly::zero(n2, (n2, 1)).with_real_flag(true),
        }
    }

    fn samples(&self, dims: &[usize]) -> FrameSamples {
        let n2 = dims.len();
        let partials = |f: &TrigPoly| (0..n2).map(|j| f.partial(j).to_grid(dims)).collect::<Vec<_>>();
        FrameSamples {
            w0: self.w0.to_grid(dims),
            dw0: partials(&self.w0),
            w1: self.w1.to_grid(dims),
            dw1: partials(&self.w1),
            psi: self.psi.to_grid(dims),
            dpsi: partials(&self.psi),
        }
    }

    /// `T o S` with `S(rho, phi) = (v0 + (E + v1) rho, phi + Phi)`.
    fn compose(&self, step: &StepTransform, k: f64) -> Result<Self> {
        let n2 = self.psi.n_angles();
        let n1 = self.w0.shape().0;
        let dims = TrigPoly::canonical_dims(n2, k);
        let shift = step.phi.to_grid(&dims);
        let total: usize = dims.iter().product();
        let points: Vec<Vec<f64>> = (0..total)
            .map(|p| {
                angles_at(&dims, p)
                    .iter()
                    .enumerate()
                    .map(|(j, a)| a + shift.entry(j, 0)[p].re)
                    .collect()
            })
            .collect();
        let w0s = self.w0.evaluate_many(&points);
        let w1s = self.w1.evaluate_many(&points);
        let psis = self.psi.evaluate_many(&points);
        let v0 = step.v0.to_grid(&dims);
        let v1 = step.v1.to_grid(&dims);
        let eye = DMatrix::<Complex64>::identity(n1, n1);
        let mut w0n = Vec::with_capacity(total);
        let mut w1n = Vec::with_capacity(total);
        let mut psin = Vec::with_capacity(total);
        for p in 0..total {
            w0n.push(&w0s[p] + &w1s[p] * v0.get(p));
            w1n.push(&w1s[p] * (&eye + v1.get(p)));
            psin.push(&psis[p] + shift.get(p));
        }
        let back = |vals: &[CMat], shape| -> Result<TrigPoly> {
            Ok(TrigPoly::from_grid(&GridSamples::from_matrices(dims.clone(), shape, vals), true)?.truncate(k))
        };
        Ok(Self {
            w0: back(&w0n, (n1, 1))?,
            w1: back(&w1n, (n1, n1))?,
            psi: back(&psin, (n2, 1))?,
        })
    }
}

/// Where `G` comes from: the spec itself, or an `I`-linear smoothed jet.
enum FieldSource {
    Direct,
    Jet { g0: TrigPoly, jac: TrigPoly },
}

/// `S_r` applied to `G(0, .)` and `d_I G(0, .)`.
fn smoothed_jet(spec: &SystemSpec, xi: &[f64], r: f64) -> Result<FieldSource> {
    let n1 = spec.n1();
    let n2 = spec.n2();
    let per_axis = crate::grid::grid_size_for_degree((1.0 / r).ceil()).min(MAX_JET_GRID);
    let dims = vec![per_axis; n2];
    let total: usize = dims.iter().product();
    let zero = vec![0.0; n1];
    let rows: Vec<Result<(CMat, CMat)>> = (0..total)
        .into_par_iter()
        .map(|p| {
            let phi = angles_at(&dims, p);
            let (g1, g2) = spec.sample_g(xi, &phi, &zero)?;
            let j = spec.g_jacobian(xi, &phi, &zero)?;
            let g = DMatrix::from_iterator(n1 + n2, 1, g1.into_iter().chain(g2).map(|x| Complex64::new(x, 0.0)));
            Ok((g, j.map(|x| Complex64::new(x, 0.0))))
        })
        .collect();
    let mut gs = Vec::with_capacity(total);
    let mut js = Vec::with_capacity(total);
    for row in rows {
        let (g, j) = row?;
        gs.push(g);
        js.push(j);
    }
    let g0 = TrigPoly::from_grid(&GridSamples::from_matrices(dims.clone(), (n1 + n2, 1), &gs), true)?;
    let jac = TrigPoly::from_grid(&GridSamples::from_matrices(dims, (n1 + n2, n1), &js), true)?;
    Ok(FieldSource::Jet {
        g0: smooth_periodic(&g0, r),
        jac: smooth_periodic(&jac, r),
    })
}

struct Extraction {
    u0: TrigPoly,
    u1: TrigPoly,
    w: TrigPoly,
    residual: f64,
}

struct PointOut {
    u0: CMat,
    u1: CMat,
    w: CMat,
    residual: f64,
}

fn to_c<R: Dim, C: Dim, S: Storage<f64, R, C>>(m: &Matrix<f64, R, C, S>) -> CMat {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| Complex64::new(m[(i, j)], 0.0))
}

/// Context shared by every grid point of one pull-back.
struct PullBack<'a> {
    spec: &'a SystemSpec,
    xi: &'a [f64],
    a0: DMatrix<f64>,
    a_nu: DMatrix<f64>,
    omega0: DVector<f64>,
    omega_nu: DVector<f64>,
    p: &'a ScalingMatrices,
}

impl PullBack<'_> {
    fn g_at(
        &self,
        source: &FieldSource,
        jets: Option<(&CMat, &CMat)>,
        phi: &[f64],
        i: &[f64],
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n1 = self.spec.n1();
        match (source, jets) {
            (FieldSource::Jet { .. }, Some((g0, jac))) => {
                let g0 = g0.map(|z| z.re);
                let jac = jac.map(|z| z.re);
                let g = g0.column(0).into_owned() + &jac * DVector::from_column_slice(i);
                Ok((g, jac))
            }
            _ => {
                let (g1, g2) = self.spec.sample_g(self.xi, phi, i)?;
                let j = self.spec.g_jacobian(self.xi, phi, i)?;
                let mut g = DVector::zeros(n1 + g2.len());
                for (r, x) in g1.iter().chain(&g2).enumerate() {
                    g[r] = *x;
                }
                Ok((g, j))
            }
        }
    }

    fn point(&self, fs: &FrameSamples, p: usize, g: &DVector<f64>, jac: &DMatrix<f64>) -> Result<PointOut> {
        let n1 = self.spec.n1();
        let n2 = self.spec.n2();
        let p1 = &self.p.p1;
        let p2 = &self.p.p2;
        let w0 = re(&fs.w0, p).column(0).into_owned();
        let w1 = re(&fs.w1, p);
        let dw0 = columns(&fs.dw0, p);
        let m = DMatrix::<f64>::identity(n2, n2) + columns(&fs.dpsi, p);
        let lu = m.clone().lu();
        if !(lu.determinant() > 0.0) {
            return Err(KamError::Singular(format!(
                "angle map not invertible at grid point {p}"
            )));
        }
        let g1 = g.rows(0, n1).into_owned();
        let g2 = g.rows(n1, n2).into_owned();
        let j1 = jac.rows(0, n1).into_owned();
        let j2 = jac.rows(n1, n2).into_owned();
        let p1m = DMatrix::from_diagonal(&DVector::from_column_slice(p1));
        let p2m = DMatrix::from_diagonal(&DVector::from_column_slice(p2));

        let f_i = &self.a0 * &w0 + &p1m * g1;
        let f_phi = &self.omega0 + &p2m * g2;
        let y_phi = lu.solve(&f_phi).ok_or_else(|| KamError::Singular("E + dPsi".into()))?;
        let dy_phi = lu
            .solve(&(&p2m * &j2 * &w1))
            .ok_or_else(|| KamError::Singular("E + dPsi".into()))?;
        let w1_inv = w1
            .clone()
            .try_inverse()
            .ok_or_else(|| KamError::Singular(format!("W1 at grid point {p}")))?;
        let y_i = &w1_inv * (&f_i - &dw0 * &y_phi);
        let mut inner = (&self.a0 + &p1m * j1) * &w1 - &dw0 * &dy_phi;
        for j in 0..n2 {
            inner -= re(&fs.dw1[j], p) * y_phi[j];
        }
        let dy_i = &w1_inv * inner;

        let p1_inv = DMatrix::from_diagonal(&DVector::from_iterator(n1, p1.iter().map(|x| 1.0 / x)));
        let p2_inv = DMatrix::from_diagonal(&DVector::from_iterator(n2, p2.iter().map(|x| 1.0 / x)));
        let u0 = &p1_inv * &y_i;
        let u1 = &p1_inv * (dy_i - &self.a_nu);
        let w = &p2_inv * (&y_phi - &self.omega_nu);

        let r_i = &p1_inv * (&dw0 * &self.omega_nu - &f_i);
        let r_phi = &p2_inv * (&m * &self.omega_nu - &f_phi);
        let residual = r_i.amax().max(r_phi.amax());
        Ok(PointOut {
            u0: to_c(&u0),
            u1: to_c(&u1),
            w: to_c(&w),
            residual,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn pull_back(
    spec: &SystemSpec,
    xi: &[f64],
    source: &FieldSource,
    frame: &Frame,
    stage: &StageData,
    p: &ScalingMatrices,
    a0: &DMatrix<f64>,
    k: f64,
) -> Result<Extraction> {
    let n1 = spec.n1();
    let n2 = spec.n2();
    let dims = TrigPoly::canonical_dims(n2, k);
    let total: usize = dims.iter().product();
    let fs = frame.samples(&dims);
    let points: Vec<Vec<f64>> = (0..total)
        .map(|q| {
            angles_at(&dims, q)
                .iter()
                .enumerate()
                .map(|(j, a)| a + fs.psi.entry(j, 0)[q].re)
                .collect()
        })
        .collect();
    let jets = match source {
        FieldSource::Jet { g0, jac } => Some((g0.evaluate_many(&points), jac.evaluate_many(&points))),
        FieldSource::Direct => None,
    };
    let ctx = PullBack {
        spec,
        xi,
        a0: a0.clone(),
        a_nu: stage.a_matrix().map(|z| z.re),
        omega0: DVector::from_vec(spec.omega0(xi)),
        omega_nu: DVector::from_column_slice(&stage.omega),
        p,
    };
    let outs: Vec<Result<PointOut>> = (0..total)
        .into_par_iter()
        .map(|q| {
            let i: Vec<f64> = (0..n1).map(|r| fs.w0.entry(r, 0)[q].re).collect();
            let jet = jets.as_ref().map(|(g, j)| (&g[q], &j[q]));
            let (g, jac) = ctx.g_at(source, jet, &points[q], &i)?;
            ctx.point(&fs, q, &g, &jac)
        })
        .collect();
    let mut u0s = Vec::with_capacity(total);
    let mut u1s = Vec::with_capacity(total);
    let mut ws = Vec::with_capacity(total);
    let mut residual: f64 = 0.0;
    for (q, o) in outs.into_iter().enumerate() {
        let o = o.map_err(|e| match e {
            KamError::NonFinite { detail, .. } => KamError::NonFinite { index: q, detail },
            other => other,
        })?;
        residual = residual.max(o.residual);
        u0s.push(o.u0);
        u1s.push(o.u1);
        ws.push(o.w);
    }
    if !residual.is_finite() {
        return Err(KamError::NonFinite {
            index: 0,
            detail: "pulled-back field".into(),
        });
    }
    let (u0, u1, w) = extract_lower_degree(
        &GridSamples::from_matrices(dims.clone(), (n1, 1), &u0s),
        &GridSamples::from_matrices(dims.clone(), (n1, n1), &u1s),
        &GridSamples::from_matrices(dims, (n2, 1), &ws),
        k,
    )?;
    Ok(Extraction { u0, u1, w, residual })
}

/// Sup over a `grid_n^{n2}` grid of the `P`-scaled defects
/// `dV0 . omega* - F_I(V0, phi + Psi)` and `(E + dPsi) omega* - F_phi(V0, phi + Psi)`.
pub fn invariance_residual(torus: &TorusResult, spec: &SystemSpec, xi: &[f64], grid_n: usize) -> Result<f64> {
    let n1 = spec.n1();
    let n2 = spec.n2();
    let dims = vec![grid_n.max(2); n2];
    let frame = Frame {
        w0: torus.v0.clone(),
        w1: TrigPoly::constant(n2, DMatrix::identity(n1, n1)),
        psi: torus.angle_shift.clone(),
    };
    let fs = frame.samples(&dims);
    let a0 = spec.a0(xi)?;
    let p = spec.scaling();
    let omega0 = DVector::from_vec(spec.omega0(xi));
    let om = DVector::from_column_slice(&torus.omega_star);
    let total: usize = dims.iter().product();
    let vals: Vec<Result<f64>> = (0..total)
        .into_par_iter()
        .map(|q| {
            let theta = angles_at(&dims, q);
            let psi = re(&fs.psi, q);
            let phi: Vec<f64> = theta.iter().enumerate().map(|(j, a)| a + psi[(j, 0)]).collect();
            let v0 = re(&fs.w0, q).column(0).into_owned();
            let (g1, g2) = spec.sample_g(xi, &phi, v0.as_slice())?;
            let f_i = &a0 * &v0 + DVector::from_iterator(n1, g1.iter().zip(&p.p1).map(|(g, s)| g * s));
            let f_phi = &omega0 + DVector::from_iterator(n2, g2.iter().zip(&p.p2).map(|(g, s)| g * s));
            let r_i = columns(&fs.dw0, q) * &om - f_i;
            let r_phi = (DMatrix::<f64>::identity(n2, n2) + columns(&fs.dpsi, q)) * &om - f_phi;
            let a = r_i.iter().zip(&p.p1).map(|(r, s)| (r / s).abs()).fold(0.0, f64::max);
            let b = r_phi.iter().zip(&p.p2).map(|(r, s)| (r / s).abs()).fold(0.0, f64::max);
            Ok(a.max(b))
        })
        .collect();
    let mut worst: f64 = 0.0;
    for v in vals {
        worst = worst.max(v?);
    }
    Ok(worst)
}

fn max_abs_diff<T: Copy>(a: &[T], b: &[T], f: impl Fn(T, T) -> f64) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).fold(0.0, f64::max)
}

/// One step from stage `nu`: solve at order `k`, update frequencies and
/// eigenvalues, and return the transform with the next stage.
pub fn kam_step(
    stage: &StageData,
    u0: &TrigPoly,
    u1: &TrigPoly,
    w: &TrigPoly,
    p: &ScalingMatrices,
    k: f64,
    next_schedule: ScheduleEntry,
) -> Result<(StepTransform, StageData)> {
    let v0 = solve_v0(u0, stage, &p.p1, k)?;
    let (v1, lambda_tilde) = solve_v1(u1, stage, &p.p1, k)?;
    let (phi, omega_tilde) = solve_phi(w, stage, &p.p2, k)?;
    let omega: Vec<f64> = stage
        .omega
        .iter()
        .zip(&omega_tilde)
        .zip(&p.p2)
        .map(|((o, t), s)| o + s * t)
        .collect();
    let lambda: Vec<Complex64> = stage
        .lambda
        .iter()
        .zip(&lambda_tilde)
        .zip(&p.p1)
        .map(|((l, t), s)| l + t * *s)
        .collect();
    let strip_radius = 2.0 * next_schedule.r;
    let next = StageData::new(stage.nu + 1, omega, lambda, stage.b.clone(), next_schedule)?;
    Ok((
        StepTransform {
            nu: stage.nu,
            v0: v0.with_real_flag(true).real_part(),
            v1: v1.with_real_flag(true).real_part(),
            phi: phi.with_real_flag(true).real_part(),
            strip_radius,
        },
        next,
    ))
}

struct Runner<'a> {
    spec: &'a SystemSpec,
    xi: &'a [f64],
    opts: &'a RunOptions,
    params: ScheduleParams,
    p: ScalingMatrices,
    a0: DMatrix<f64>,
    omega0: Vec<f64>,
    lambda0: Vec<Complex64>,
}

impl Runner<'_> {
    fn capped(&self, nu: usize) -> (ScheduleEntry, f64, bool) {
        let e = schedule(nu, &self.params);
        let cap = self.opts.max_degree as u64;
        let truncated = e.k > cap;
        let k = e.k.min(cap) as f64;
        (e, k, truncated)
    }

    fn source(&self, nu: usize) -> Result<FieldSource> {
        if self.spec.perturbation.analytic {
            Ok(FieldSource::Direct)
        } else {
            smoothed_jet(self.spec, self.xi, self.opts.r_tilde * 3f64.powi(-(nu as i32 + 1)))
        }
    }

    fn diagnostics(&self, stage: &StageData, k: f64, ex: &Extraction, prev: Option<f64>) -> Diagnostics {
        let r = stage.schedule.r;
        let norm_u0 = ex.u0.strip_norm_bound(r).value;
        let norm_u1 = ex.u1.strip_norm_bound(r).value;
        let norm_w = ex.w.strip_norm_bound(r).value;
        let cur = norm_u0.max(norm_w);
        Diagnostics {
            nu: stage.nu,
            k: k as u64,
            k_schedule: stage.schedule.k,
            r,
            s: stage.schedule.s,
            norm_u0,
            norm_u1,
            norm_w,
            residual: ex.residual,
            omega_drift: max_abs_diff(&stage.omega, &self.omega0, |a, b| (a - b).abs()),
            lambda_drift: max_abs_diff(&stage.lambda, &self.lambda0, |a, b| (a - b).norm()),
            contraction: prev.map(|p| if p > 0.0 { cur / p } else { 0.0 }),
            status: "step".into(),
        }
    }

    /// `max` over blocks of `|drift| / eps^{q}` in the unscaled variables.
    fn drift_constant(&self, stage: &StageData) -> f64 {
        let d = &self.spec.dims;
        let q = &self.spec.exponents;
        let e = self.spec.epsilon;
        let block = |a: &[f64], b: &[f64], scale: f64| max_abs_diff(a, b, |x, y| (x - y).abs()) / scale;
        let cblock = |a: &[Complex64], b: &[Complex64], scale: f64| max_abs_diff(a, b, |x, y| (x - y).norm()) / scale;
        let w1 = block(&stage.omega[..d.n21], &self.omega0[..d.n21], e.powf(q.q5 + q.q6));
        let w2 = block(&stage.omega[d.n21..], &self.omega0[d.n21..], e.powf(q.q7));
        let l1 = cblock(&stage.lambda[..d.n11], &self.lambda0[..d.n11], e.powf(q.q1 + q.q2));
        let l2 = cblock(&stage.lambda[d.n11..], &self.lambda0[d.n11..], e.powf(q.q3 + q.q4));
        w1.max(w2).max(l1).max(l2)
    }

    /// The limit `omega*`, `Lambda*` absorb the last extracted means.
    fn finish(&self, stage: &StageData, frame: &Frame, ex: &Extraction, k: f64) -> Result<TorusResult> {
        let n2 = self.spec.n2();
        let wm = ex.w.mean();
        let omega_star: Vec<f64> = (0..n2).map(|i| stage.omega[i] + self.p.p2[i] * wm[(i, 0)].re).collect();
        let um = &stage.b_inv * ex.u1.mean() * &stage.b;
        let lambda_star: Vec<Complex64> = (0..stage.n1())
            .map(|i| stage.lambda[i] + um[(i, i)] * self.p.p1[i])
            .collect();
        let mut torus = TorusResult {
            v0: frame.w0.clone(),
            angle_shift: frame.psi.clone(),
            omega_star,
            lambda_star,
            residual: 0.0,
        };
        let grid_n = crate::grid::grid_size_for_degree(k);
        torus.residual = invariance_residual(&torus, self.spec, self.xi, grid_n)?;
        Ok(torus)
    }
}

/// Classify a step failure into a terminal status, or propagate it.
fn halt_status(e: KamError) -> Result<RunStatus> {
    match e {
        KamError::Resonant { k, m, magnitude } => Ok(RunStatus::ResonantHalt {
            k,
            m,
            divisor: magnitude,
        }),
        KamError::NonFinite { detail, .. } => Ok(RunStatus::Diverged(format!("non-finite values ({detail})"))),
        KamError::Singular(s) => Ok(RunStatus::Diverged(format!("singular transform ({s})"))),
        other => Err(other),
    }
}

/// Iterate until `max(|u0|, |w|) <= tol` or a halt.
pub fn run(spec: &SystemSpec, xi: &[f64], opts: &RunOptions) -> Result<KamRun> {
    let report = spec.validate(5);
    if !report.ok() {
        return Err(KamError::InvalidInput(report.violations.join("; ")));
    }
    if xi.len() != spec.dims.n3 {
        return Err(KamError::InvalidInput(format!("xi must have length {}", spec.dims.n3)));
    }
    if xi
        .iter()
        .zip(&spec.param_box)
        .any(|(x, [lo, hi])| !(lo <= x && x <= hi))
    {
        return Err(KamError::InvalidInput(format!("xi = {xi:?} outside the parameter box")));
    }
    if !(opts.tol > 0.0) || opts.max_degree == 0 || !(opts.r_tilde > 0.0 && opts.r_tilde <= 1.0) {
        return Err(KamError::InvalidInput(
            "need tol > 0, max_degree >= 1, r~ in (0, 1]".into(),
        ));
    }
    let gamma = opts.gamma.unwrap_or(spec.gamma);
    let p = spec.scaling();
    let params = ScheduleParams {
        r_tilde: opts.r_tilde,
        l: spec.l,
        alpha: spec.alpha,
        iota: spec.iota,
        n2: spec.n2(),
        n3: spec.dims.n3,
        c1: opts.c1.unwrap_or(report.c1),
        gamma,
        scale: p.eps0,
    };
    let runner = Runner {
        spec,
        xi,
        opts,
        params,
        a0: spec.a0(xi)?,
        omega0: spec.omega0(xi),
        lambda0: spec.lambda0(xi),
        p,
    };
    let mut warnings = report.warnings.clone();
    let eps_q5 = spec.epsilon.powf(spec.exponents.q5);

    let mut frame = Frame::identity(spec.n1(), spec.n2());
    let (_, k1, mut truncated) = runner.capped(1);
    let mut stage = StageData::new(
        0,
        runner.omega0.clone(),
        runner.lambda0.clone(),
        spec.b_matrix(xi),
        schedule(0, &runner.params),
    )?;
    let mut ex = pull_back(spec, xi, &runner.source(0)?, &frame, &stage, &runner.p, &runner.a0, k1)?;
    let mut diag = vec![runner.diagnostics(&stage, 0.0, &ex, None)];
    let mut steps = Vec::new();
    let mut k_prev = 0.0;
    let mut k_cur = k1;
    let mut rises = 0;
    let mut largest_update: f64 = 0.0;
    let mut truncation_constant = None;
    let mut c0_tilde = diag[0].majorant() / stage.schedule.delta[0];

    let status = loop {
        let cur = diag.last().unwrap().majorant();
        if cur <= opts.tol {
            break RunStatus::Converged;
        }
        if steps.len() >= opts.max_steps {
            break RunStatus::MaxSteps;
        }
        let shell = check_nonresonance(&stage, gamma, spec.iota, eps_q5, k_prev, k_cur, 1.0);
        let full = check_nonresonance(&stage, gamma, spec.iota, eps_q5, 0.0, k_cur, 0.25);
        if let Some(bad) = [&shell, &full].into_iter().find(|r| !r.pass) {
            break RunStatus::ResonantHalt {
                k: bad.worst_k.clone(),
                m: bad.worst_m.clone(),
                divisor: bad.divisor.norm(),
            };
        }
        let nu = stage.nu;
        let (next_sched, _, _) = runner.capped(nu + 1);
        let (transform, next) = match kam_step(&stage, &ex.u0, &ex.u1, &ex.w, &runner.p, k_cur, next_sched) {
            Ok(v) => v,
            Err(e) => break halt_status(e)?,
        };
        let (_, k_next, t) = runner.capped(nu + 2);
        truncated |= t;
        frame = match frame.compose(&transform, k_cur.max(k_next)) {
            Ok(f) => f,
            Err(e) => break halt_status(e)?,
        };
        let source = runner.source(nu + 1)?;
        ex = match pull_back(spec, xi, &source, &frame, &next, &runner.p, &runner.a0, k_next) {
            Ok(v) => v,
            Err(e) => break halt_status(e)?,
        };
        let d = runner.diagnostics(&next, k_cur, &ex, Some(cur));
        largest_update = largest_update.max(max_abs_diff(&next.omega, &stage.omega, |a, b| (a - b).abs()));
        if nu == 0 && diag[0].norm_w > 0.0 {
            let thr = gamma * eps_q5 * k_cur.powf(-spec.iota);
            truncation_constant = Some(d.norm_w * thr / (diag[0].norm_w * diag[0].norm_w));
        }
        c0_tilde = c0_tilde.max(d.majorant() / next.schedule.delta[0]);
        let contraction = d.contraction.unwrap_or(0.0);
        steps.push((transform, stage));
        stage = next;
        diag.push(d);
        k_prev = k_cur;
        k_cur = k_next;
        if !contraction.is_finite() {
            break RunStatus::Diverged("non-finite contraction".into());
        }
        rises = if contraction > 1.0 { rises + 1 } else { 0 };
        if rises >= 2 {
            break RunStatus::Diverged("contraction ratio above 1 for 2 consecutive steps".into());
        }
    };

    let mut status = status;
    let mut torus = None;
    if status == RunStatus::Converged {
        match runner.finish(&stage, &frame, &ex, k_cur) {
            Ok(t) if t.residual <= 10.0 * opts.tol => torus = Some(t),
            Ok(t) => {
                status = RunStatus::Diverged(format!(
                    "invariance residual {:e} above 10 tol after convergence",
                    t.residual
                ))
            }
            Err(e) => status = halt_status(e)?,
        }
    }
    if truncated {
        warnings.push(format!("schedule truncated at K = {}", opts.max_degree));
    }
    if let Some(last) = diag.last_mut() {
        last.status = status.label().to_string();
    }
    let total_drift = diag.last().map(|d| d.omega_drift).unwrap_or(0.0);
    let geometric_drift_ok = total_drift <= 2.0 * largest_update + 1e-15;
    Ok(KamRun {
        drift_constant: runner.drift_constant(&stage),
        steps,
        diagnostics: diag,
        status,
        torus,
        schedule_truncated: truncated,
        geometric_drift_ok,
        truncation_constant,
        c0_tilde,
        warnings,
    })
}

/// Run a config at its own `xi` (or the box centre).
pub fn run_config(cfg: &SystemConfig, opts: &RunOptions) -> Result<(SystemSpec, Vec<f64>, KamRun)> {
    let spec = cfg.build()?;
    let xi = cfg
        .xi
        .clone()
        .unwrap_or_else(|| spec.param_box.iter().map(|[lo, hi]| 0.5 * (lo + hi)).collect());
    let run = run(&spec, &xi, opts)?;
    Ok((spec, xi, run))
}
