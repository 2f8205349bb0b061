//! Multivariate trigonometric polynomials with matrix-valued coefficients.

use crate::error::{KamError, Result};
use crate::grid::{bins_at, fft_nd, grid_size_for_degree, Direction, GridSamples};
use crate::lattice::{dot, negate, norm1, norm2, within_radius};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type Mode = Vec<i64>;
pub type CMat = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const I_UNIT: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Coefficients whose magnitude falls below this fraction of the largest one
/// are dropped when converting grid samples (they are FFT round-off).
const GRID_PRUNE_REL: f64 = 1e-16;

/// A finitely supported Fourier series `sum_k c_k e^{i<k,phi>}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "TrigPolyJson", try_from = "TrigPolyJson")]
pub struct TrigPoly {
    n_angles: usize,
    shape: (usize, usize),
    coeffs: BTreeMap<Mode, CMat>,
    declared_degree: f64,
    real: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StripNorm {
    pub radius: f64,
    pub value: f64,
}

fn max_entry(m: &CMat) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

impl TrigPoly {
    pub fn zero(n_angles: usize, shape: (usize, usize)) -> Self {
        Self {
            n_angles,
            shape,
            coeffs: BTreeMap::new(),
            declared_degree: 0.0,
            real: true,
        }
    }

    /// Build from explicit modes. Repeated modes are summed; the declared
    /// degree is the largest `|k|_2` present.
    pub fn from_modes<I>(n_angles: usize, shape: (usize, usize), modes: I, real: bool) -> Result<Self>
    where
        I: IntoIterator<Item = (Mode, CMat)>,
    {
        let mut coeffs: BTreeMap<Mode, CMat> = BTreeMap::new();
        for (k, c) in modes {
            if k.len() != n_angles {
                return Err(KamError::InvalidInput(format!(
                    "mode {k:?} has length {}, expected {n_angles}",
                    k.len()
                )));
            }
            if c.shape() != shape {
                return Err(KamError::InvalidInput(format!(
                    "coefficient shape {:?} does not match {shape:?}",
                    c.shape()
                )));
            }
            match coeffs.get_mut(&k) {
                Some(existing) => *existing += c,
                None => {
                    coeffs.insert(k, c);
                }
            }
        }
        coeffs.retain(|_, c| max_entry(c) > 0.0);
        let degree = coeffs.keys().map(|k| norm2(k)).fold(0.0, f64::max);
        Ok(Self {
            n_angles,
            shape,
            coeffs,
            declared_degree: degree,
            real,
        })
    }

    /// Scalar polynomial from `(k, c_k)` pairs.
    pub fn scalar<I>(n_angles: usize, modes: I, real: bool) -> Result<Self>
    where
        I: IntoIterator<Item = (Mode, Complex64)>,
    {
        Self::from_modes(
            n_angles,
            (1, 1),
            modes.into_iter().map(|(k, c)| (k, DMatrix::from_element(1, 1, c))),
            real,
        )
    }

    /// `amplitude * cos<k,phi>`.
    pub fn cosine(k: &[i64], amplitude: f64) -> Self {
        let half = Complex64::new(amplitude / 2.0, 0.0);
        Self::scalar(k.len(), [(k.to_vec(), half), (negate(k), half)], true).expect("consistent lengths")
    }

    /// `amplitude * sin<k,phi>`.
    pub fn sine(k: &[i64], amplitude: f64) -> Self {
        let c = Complex64::new(0.0, -amplitude / 2.0);
        Self::scalar(k.len(), [(k.to_vec(), c), (negate(k), c.conj())], true).expect("consistent lengths")
    }

    pub fn constant(n_angles: usize, value: CMat) -> Self {
        let real = value.iter().all(|z| z.im == 0.0);
        let shape = value.shape();
        Self::from_modes(n_angles, shape, [(vec![0; n_angles], value)], real).expect("consistent shapes")
    }

    /// Stack scalar polynomials into an `m x 1` column.
    pub fn column(parts: &[TrigPoly]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| KamError::InvalidInput("column of zero parts".into()))?;
        let n = first.n_angles;
        let rows = parts.len();
        let mut coeffs: BTreeMap<Mode, CMat> = BTreeMap::new();
        for (i, p) in parts.iter().enumerate() {
            if p.shape != (1, 1) || p.n_angles != n {
                return Err(KamError::InvalidInput(
                    "column parts must be scalar with equal n_angles".into(),
                ));
            }
            for (k, c) in &p.coeffs {
                coeffs
                    .entry(k.clone())
                    .or_insert_with(|| DMatrix::from_element(rows, 1, ZERO))[(i, 0)] = c[(0, 0)];
            }
        }
        let degree = parts.iter().map(|p| p.declared_degree).fold(0.0, f64::max);
        Ok(Self {
            n_angles: n,
            shape: (rows, 1),
            coeffs,
            declared_degree: degree,
            real: parts.iter().all(|p| p.real),
        })
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn declared_degree(&self) -> f64 {
        self.declared_degree
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeff(&self, k: &[i64]) -> Option<&CMat> {
        self.coeffs.get(k)
    }

    /// Coefficient at `k`, zero if absent.
    pub fn coeff_or_zero(&self, k: &[i64]) -> CMat {
        self.coeffs
            .get(k)
            .cloned()
            .unwrap_or_else(|| DMatrix::from_element(self.shape.0, self.shape.1, ZERO))
    }

    pub fn modes(&self) -> impl Iterator<Item = (&Mode, &CMat)> {
        self.coeffs.iter()
    }

    /// Mean value (coefficient at `k = 0`).
    pub fn mean(&self) -> CMat {
        self.coeff_or_zero(&vec![0; self.n_angles])
    }

    /// Raise the declared degree (never lowers it below the support).
    pub fn with_declared_degree(mut self, k: f64) -> Self {
        let support = self.coeffs.keys().map(|m| norm2(m)).fold(0.0, f64::max);
        self.declared_degree = k.max(support);
        self
    }

    pub fn with_real_flag(mut self, real: bool) -> Self {
        self.real = real;
        self
    }

    /// `Gamma_K f`: keep modes with `|k|_2 <= K`.
    pub fn truncate(&self, k: f64) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .filter(|(m, _)| within_radius(m, k))
            .map(|(m, c)| (m.clone(), c.clone()))
            .collect();
        Self {
            n_angles: self.n_angles,
            shape: self.shape,
            coeffs,
            declared_degree: k.max(0.0),
            real: self.real,
        }
    }

    /// `(Id - Gamma_K) f`.
    pub fn tail(&self, k: f64) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .filter(|(m, _)| !within_radius(m, k))
            .map(|(m, c)| (m.clone(), c.clone()))
            .collect();
        Self { coeffs, ..self.clone() }
    }

    /// Drop coefficients with max-entry magnitude `<= tol`.
    pub fn prune(&self, tol: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.retain(|_, c| max_entry(c) > tol);
        out
    }

    /// Majorant `sum_k |c_k|_max e^{r |k|_1}` for the sup on the strip of
    /// half-width `r`.
    pub fn strip_norm_bound(&self, r: f64) -> StripNorm {
        let value = self
            .coeffs
            .iter()
            .map(|(k, c)| max_entry(c) * (r * norm1(k)).exp())
            .sum();
        StripNorm { radius: r, value }
    }

    /// Largest coefficient magnitude.
    pub fn max_coeff(&self) -> f64 {
        self.coeffs.values().map(max_entry).fold(0.0, f64::max)
    }

    /// Evaluate at a (possibly complex) angle vector.
    pub fn evaluate(&self, phi: &[Complex64]) -> CMat {
        assert_eq!(phi.len(), self.n_angles, "evaluate: wrong number of angles");
        let mut out = DMatrix::from_element(self.shape.0, self.shape.1, ZERO);
        for (k, c) in &self.coeffs {
            let arg: Complex64 = k.iter().zip(phi).map(|(&kj, &p)| p * kj as f64).sum();
            out += c * (I_UNIT * arg).exp();
        }
        out
    }

    pub fn evaluate_real(&self, phi: &[f64]) -> CMat {
        let z: Vec<Complex64> = phi.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.evaluate(&z)
    }

    /// Evaluate at many real points, reusing powers of `e^{i phi_j}`.
    pub fn evaluate_many(&self, points: &[Vec<f64>]) -> Vec<CMat> {
        let n = self.n_angles;
        let mut reach = vec![0i64; n];
        for k in self.coeffs.keys() {
            for j in 0..n {
                reach[j] = reach[j].max(k[j].abs());
            }
        }
        let entries: Vec<(&Mode, &CMat)> = self.coeffs.iter().collect();
        let (rows, cols) = self.shape;
        points
            .par_iter()
            .map(|p| {
                let powers: Vec<Vec<Complex64>> = (0..n)
                    .map(|j| {
                        let m = reach[j];
                        let base = Complex64::from_polar(1.0, p[j]);
                        let inv = base.conj();
                        let mut table = vec![ZERO; (2 * m + 1) as usize];
                        table[m as usize] = Complex64::new(1.0, 0.0);
                        for t in 1..=m as usize {
                            table[m as usize + t] = table[m as usize + t - 1] * base;
                            table[m as usize - t] = table[m as usize - t + 1] * inv;
                        }
                        table
                    })
                    .collect();
                let mut out = DMatrix::from_element(rows, cols, ZERO);
                for (k, c) in &entries {
                    let mut e = Complex64::new(1.0, 0.0);
                    for j in 0..n {
                        e *= powers[j][(k[j] + reach[j]) as usize];
                    }
                    out.zip_apply(*c, |o, ci| *o += ci * e);
                }
                out
            })
            .collect()
    }

    /// `d f . omega`: multiplies `c_k` by `i<k,omega>`.
    pub fn directional_derivative(&self, omega: &[f64]) -> Self {
        assert_eq!(omega.len(), self.n_angles);
        self.map_modes(|k, c| c * (I_UNIT * dot(k, omega)))
    }

    /// `d f / d phi_j`.
    pub fn partial(&self, j: usize) -> Self {
        self.map_modes(|k, c| c * (I_UNIT * k[j] as f64))
    }

    /// Apply a per-mode transformation; zero results are dropped.
    pub fn map_modes<F>(&self, f: F) -> Self
    where
        F: Fn(&Mode, &CMat) -> CMat,
    {
        let mut coeffs = BTreeMap::new();
        for (k, c) in &self.coeffs {
            let v = f(k, c);
            if max_entry(&v) > 0.0 {
                coeffs.insert(k.clone(), v);
            }
        }
        let shape = coeffs.values().next().map(|m: &CMat| m.shape()).unwrap_or(self.shape);
        Self {
            n_angles: self.n_angles,
            shape,
            coeffs,
            declared_degree: self.declared_degree,
            real: self.real,
        }
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let real = self.real && s.im == 0.0;
        self.map_modes(|_, c| c * s).with_real_flag(real)
    }

    pub fn scale_real(&self, s: f64) -> Self {
        self.map_modes(|_, c| c * Complex64::new(s, 0.0))
    }

    /// `M f` with a constant matrix on the left.
    pub fn left_mul(&self, m: &CMat) -> Self {
        let mut out = self.map_modes(|_, c| m * c);
        out.shape = (m.nrows(), self.shape.1);
        out.real = self.real && m.iter().all(|z| z.im == 0.0);
        out
    }

    /// `f M` with a constant matrix on the right.
    pub fn right_mul(&self, m: &CMat) -> Self {
        let mut out = self.map_modes(|_, c| c * m);
        out.shape = (self.shape.0, m.ncols());
        out.real = self.real && m.iter().all(|z| z.im == 0.0);
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape, other.shape, "add: shape mismatch");
        assert_eq!(self.n_angles, other.n_angles, "add: n_angles mismatch");
        let mut coeffs = self.coeffs.clone();
        for (k, c) in &other.coeffs {
            match coeffs.get_mut(k) {
                Some(e) => *e += c,
                None => {
                    coeffs.insert(k.clone(), c.clone());
                }
            }
        }
        coeffs.retain(|_, c| max_entry(c) > 0.0);
        Self {
            n_angles: self.n_angles,
            shape: self.shape,
            coeffs,
            declared_degree: self.declared_degree.max(other.declared_degree),
            real: self.real && other.real,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale_real(-1.0))
    }

    /// Scalar entry `(i, j)` as its own polynomial.
    pub fn entry(&self, i: usize, j: usize) -> Self {
        let mut out = self.map_modes(|_, c| DMatrix::from_element(1, 1, c[(i, j)]));
        out.shape = (1, 1);
        out
    }

    /// Sum over the selected entries of `(c_k)` after a per-entry map; helper
    /// for sub-blocks.
    pub fn block(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        let (r0, nr) = (rows.start, rows.len());
        let (c0, nc) = (cols.start, cols.len());
        let mut out = self.map_modes(|_, c| c.view((r0, c0), (nr, nc)).into_owned());
        out.shape = (nr, nc);
        out
    }

    /// Hermitian symmetrization: `c_k <- (c_k + conj(c_{-k})) / 2`.
    pub fn real_part(&self) -> Self {
        let mut coeffs: BTreeMap<Mode, CMat> = BTreeMap::new();
        let zero = DMatrix::from_element(self.shape.0, self.shape.1, ZERO);
        let mut keys: Vec<Mode> = self.coeffs.keys().cloned().collect();
        keys.extend(self.coeffs.keys().map(|k| negate(k)));
        keys.sort();
        keys.dedup();
        for k in keys {
            let a = self.coeffs.get(&k).unwrap_or(&zero);
            let b = self.coeffs.get(&negate(&k)).unwrap_or(&zero);
            let v = (a + b.map(|z| z.conj())) * Complex64::new(0.5, 0.0);
            if max_entry(&v) > 0.0 {
                coeffs.insert(k, v);
            }
        }
        Self {
            n_angles: self.n_angles,
            shape: self.shape,
            coeffs,
            declared_degree: self.declared_degree,
            real: true,
        }
    }

    /// Largest `|c_k - conj(c_{-k})|` relative to the largest coefficient.
    pub fn hermitian_defect(&self) -> f64 {
        let scale = self.max_coeff();
        if scale == 0.0 {
            return 0.0;
        }
        let zero = DMatrix::from_element(self.shape.0, self.shape.1, ZERO);
        let mut worst: f64 = 0.0;
        for (k, c) in &self.coeffs {
            let other = self.coeffs.get(&negate(k)).unwrap_or(&zero);
            worst = worst.max(max_entry(&(c - other.map(|z| z.conj()))));
        }
        worst / scale
    }

    /// Sample on a product grid via inverse FFT. Coefficients outside the
    /// grid's Nyquist box alias.
    pub fn to_grid(&self, dims: &[usize]) -> GridSamples {
        assert_eq!(dims.len(), self.n_angles);
        let total: usize = dims.iter().product();
        let (rows, cols) = self.shape;
        let mut out = GridSamples::zeros(dims.to_vec(), self.shape);
        for i in 0..rows {
            for j in 0..cols {
                let mut buf = vec![ZERO; total];
                for (k, c) in &self.coeffs {
                    buf[flat_bin(dims, k)] += c[(i, j)];
                }
                fft_nd(&mut buf, dims, Direction::Inverse);
                *out.entry_mut(i, j) = buf;
            }
        }
        out
    }

    /// Power-of-two grid large enough for products at degree `K`.
    pub fn canonical_dims(n_angles: usize, k: f64) -> Vec<usize> {
        vec![grid_size_for_degree(k); n_angles]
    }

    /// Discrete Fourier transform of grid samples. A Nyquist bin of an even
    /// axis is split evenly between `+N/2` and `-N/2`.
    pub fn from_grid(samples: &GridSamples, real: bool) -> Result<Self> {
        if let Some(p) = samples.first_non_finite() {
            return Err(KamError::NonFinite {
                index: p,
                detail: format!("angles {:?}", samples.angles(p)),
            });
        }
        let dims = samples.dims().to_vec();
        if dims.iter().any(|&d| d < 2) {
            return Err(KamError::InvalidInput("grid needs at least 2 points per angle".into()));
        }
        let n = dims.len();
        let total: usize = dims.iter().product();
        let (rows, cols) = samples.shape();
        let mut spectra = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let mut buf = samples.entry(i, j).to_vec();
                fft_nd(&mut buf, &dims, Direction::Forward);
                let inv = 1.0 / total as f64;
                buf.iter_mut().for_each(|z| *z *= inv);
                spectra.push(buf);
            }
        }
        let mut coeffs: BTreeMap<Mode, CMat> = BTreeMap::new();
        #[allow(clippy::needless_range_loop)]
        for p in 0..total {
            let bins = bins_at(&dims, p);
            let value = DMatrix::from_fn(rows, cols, |i, j| spectra[i * cols + j][p]);
            // representatives of each bin and their weights
            let mut reps: Vec<(Mode, f64)> = vec![(Vec::with_capacity(n), 1.0)];
            for (axis, &b) in bins.iter().enumerate() {
                let len = dims[axis];
                let b = b as i64;
                let l = len as i64;
                let options: Vec<(i64, f64)> = if len.is_multiple_of(2) && b == l / 2 {
                    vec![(b, 0.5), (-b, 0.5)]
                } else if 2 * b < l {
                    vec![(b, 1.0)]
                } else {
                    vec![(b - l, 1.0)]
                };
                reps = reps
                    .into_iter()
                    .flat_map(|(k, w)| {
                        options.iter().map(move |&(o, ow)| {
                            let mut k2 = k.clone();
                            k2.push(o);
                            (k2, w * ow)
                        })
                    })
                    .collect();
            }
            for (k, w) in reps {
                coeffs.insert(k, &value * Complex64::new(w, 0.0));
            }
        }
        let largest = coeffs.values().map(max_entry).fold(0.0, f64::max);
        coeffs.retain(|_, c| max_entry(c) > GRID_PRUNE_REL * largest);
        let nyquist = dims
            .iter()
            .map(|&d| {
                let h = (d / 2) as f64;
                h * h
            })
            .sum::<f64>()
            .sqrt();
        let poly = Self {
            n_angles: n,
            shape: (rows, cols),
            coeffs,
            declared_degree: nyquist,
            real,
        };
        Ok(if real { poly.real_part() } else { poly })
    }

    /// `f(phi + Phi(phi))` resampled on a grid fine enough for degree
    /// `K_out` and truncated there. Aliasing beyond `K_out` is accepted.
    pub fn compose_angle(&self, shift: &TrigPoly, k_out: f64) -> Result<Self> {
        if shift.shape != (self.n_angles, 1) || shift.n_angles != self.n_angles {
            return Err(KamError::InvalidInput(format!(
                "angle shift must be a {}-vector on the same torus",
                self.n_angles
            )));
        }
        let dims = Self::canonical_dims(self.n_angles, k_out);
        let shifted = shift.to_grid(&dims);
        let total: usize = dims.iter().product();
        let points: Vec<Vec<f64>> = (0..total)
            .map(|p| {
                let base = shifted.angles(p);
                base.iter()
                    .enumerate()
                    .map(|(j, a)| a + shifted.entry(j, 0)[p].re)
                    .collect()
            })
            .collect();
        let values = self.evaluate_many(&points);
        let grid = GridSamples::from_matrices(dims, self.shape, &values);
        Ok(Self::from_grid(&grid, self.real && shift.real)?.truncate(k_out))
    }

    /// Max relative grid discrepancy between `self` and `other` on `dims`.
    pub fn max_abs_diff_on_grid(&self, other: &Self, dims: &[usize]) -> f64 {
        let a = self.to_grid(dims);
        let b = other.to_grid(dims);
        let (r, c) = self.shape;
        let mut worst: f64 = 0.0;
        for i in 0..r {
            for j in 0..c {
                for (x, y) in a.entry(i, j).iter().zip(b.entry(i, j)) {
                    worst = worst.max((x - y).norm());
                }
            }
        }
        worst
    }
}

fn flat_bin(dims: &[usize], k: &[i64]) -> usize {
    let mut idx = 0usize;
    for (j, &kj) in k.iter().enumerate() {
        let len = dims[j] as i64;
        idx = idx * dims[j] + kj.rem_euclid(len) as usize;
    }
    idx
}

#[derive(Serialize, Deserialize)]
struct EntryJson {
    k: Vec<i64>,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TrigPolyJson {
    n_angles: usize,
    shape: [usize; 2],
    entries: Vec<EntryJson>,
}

impl From<TrigPoly> for TrigPolyJson {
    fn from(p: TrigPoly) -> Self {
        let (rows, cols) = p.shape;
        let entries = p
            .coeffs
            .iter()
            .map(|(k, c)| EntryJson {
                k: k.clone(),
                re: (0..rows).map(|i| (0..cols).map(|j| c[(i, j)].re).collect()).collect(),
                im: (0..rows).map(|i| (0..cols).map(|j| c[(i, j)].im).collect()).collect(),
            })
            .collect();
        Self {
            n_angles: p.n_angles,
            shape: [rows, cols],
            entries,
        }
    }
}

impl TryFrom<TrigPolyJson> for TrigPoly {
    type Error = KamError;

    fn try_from(j: TrigPolyJson) -> Result<Self> {
        let [rows, cols] = j.shape;
        let mut modes = Vec::with_capacity(j.entries.len());
        for e in j.entries {
            if e.re.len() != rows || e.im.len() != rows {
                return Err(KamError::InvalidInput(format!("entry {:?}: wrong row count", e.k)));
            }
            let mut m = DMatrix::from_element(rows, cols, ZERO);
            for i in 0..rows {
                if e.re[i].len() != cols || e.im[i].len() != cols {
                    return Err(KamError::InvalidInput(format!("entry {:?}: wrong column count", e.k)));
                }
                for c in 0..cols {
                    m[(i, c)] = Complex64::new(e.re[i][c], e.im[i][c]);
                }
            }
            modes.push((e.k, m));
        }
        let p = TrigPoly::from_modes(j.n_angles, (rows, cols), modes, false)?;
        let real = p.hermitian_defect() <= 1e-14;
        Ok(p.with_real_flag(real))
    }
}
