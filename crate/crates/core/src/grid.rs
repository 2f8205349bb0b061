//! Uniform product grids on the torus and the n-dimensional FFT used to move
//! between samples and Fourier coefficients.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// Matrix-valued samples on a product grid `prod_j {2 pi g / N_j}`.
///
/// Storage is entry-major: `values[r * cols + c][point]`, points in row-major
/// order over the grid (last angle fastest).
#[derive(Clone, Debug)]
pub struct GridSamples {
    dims: Vec<usize>,
    shape: (usize, usize),
    values: Vec<Vec<Complex64>>,
}

/// Smallest power of two `>= 4K + 1`, the default grid size per angle for a
/// polynomial of degree `K`.
pub fn grid_size_for_degree(k: f64) -> usize {
    let need = (4.0 * k.max(0.0).ceil() + 1.0) as usize;
    need.next_power_of_two().max(2)
}

impl GridSamples {
    pub fn zeros(dims: Vec<usize>, shape: (usize, usize)) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims,
            shape,
            values: vec![vec![Complex64::new(0.0, 0.0); n]; shape.0 * shape.1],
        }
    }

    /// Sample `f` at every grid point (in parallel, order preserving).
    pub fn from_fn<F>(dims: Vec<usize>, shape: (usize, usize), f: F) -> Self
    where
        F: Fn(&[f64]) -> DMatrix<Complex64> + Sync,
    {
        let n: usize = dims.iter().product();
        let samples: Vec<DMatrix<Complex64>> = (0..n).into_par_iter().map(|p| f(&angles_at(&dims, p))).collect();
        Self::from_matrices(dims, shape, &samples)
    }

    pub fn from_matrices(dims: Vec<usize>, shape: (usize, usize), samples: &[DMatrix<Complex64>]) -> Self {
        let mut out = Self::zeros(dims, shape);
        for (p, m) in samples.iter().enumerate() {
            out.set(p, m);
        }
        out
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn point_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn angles(&self, point: usize) -> Vec<f64> {
        angles_at(&self.dims, point)
    }

    pub fn get(&self, point: usize) -> DMatrix<Complex64> {
        let (r, c) = self.shape;
        DMatrix::from_fn(r, c, |i, j| self.values[i * c + j][point])
    }

    pub fn set(&mut self, point: usize, m: &DMatrix<Complex64>) {
        let (r, c) = self.shape;
        for i in 0..r {
            for j in 0..c {
                self.values[i * c + j][point] = m[(i, j)];
            }
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> &[Complex64] {
        &self.values[i * self.shape.1 + j]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut Vec<Complex64> {
        let c = self.shape.1;
        &mut self.values[i * c + j]
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0, |acc, z| acc.max(z.norm()))
    }

    /// First grid point holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        for v in &self.values {
            if let Some(p) = v.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Some(p);
            }
        }
        None
    }
}

/// Angles of a flat grid index (last axis fastest).
pub fn angles_at(dims: &[usize], mut point: usize) -> Vec<f64> {
    let mut out = vec![0.0; dims.len()];
    for j in (0..dims.len()).rev() {
        let g = point % dims[j];
        point /= dims[j];
        out[j] = 2.0 * PI * g as f64 / dims[j] as f64;
    }
    out
}

/// Multi-index of a flat grid index.
pub fn bins_at(dims: &[usize], mut point: usize) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for j in (0..dims.len()).rev() {
        out[j] = point % dims[j];
        point /= dims[j];
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Unnormalised in-place n-dimensional FFT over row-major data.
pub fn fft_nd(data: &mut [Complex64], dims: &[usize], direction: Direction) {
    let total: usize = dims.iter().product();
    assert_eq!(data.len(), total, "fft_nd: data length does not match dims");
    let mut planner = FftPlanner::<f64>::new();
    let mut stride = 1usize;
    for axis in (0..dims.len()).rev() {
        let len = dims[axis];
        if len > 1 {
            let fft = match direction {
                Direction::Forward => planner.plan_fft_forward(len),
                Direction::Inverse => planner.plan_fft_inverse(len),
            };
            let block = len * stride;
            let mut line = vec![Complex64::new(0.0, 0.0); len];
            for outer in 0..total / block {
                for inner in 0..stride {
                    let base = outer * block + inner;
                    for (t, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + t * stride];
                    }
                    fft.process(&mut line);
                    for (t, v) in line.iter().enumerate() {
                        data[base + t * stride] = *v;
                    }
                }
            }
        }
        stride *= len;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        assert_eq!(grid_size_for_degree(0.0), 2);
        assert_eq!(grid_size_for_degree(1.0), 8);
        assert_eq!(grid_size_for_degree(4.0), 32);
        assert_eq!(grid_size_for_degree(3.5), 32);
    }

    #[test]
    fn fft_roundtrip_2d() {
        let dims = [4usize, 8];
        let orig: Vec<Complex64> = (0..32)
            .map(|i| Complex64::new(i as f64, (i * i) as f64 * 0.1))
            .collect();
        let mut d = orig.clone();
        fft_nd(&mut d, &dims, Direction::Forward);
        fft_nd(&mut d, &dims, Direction::Inverse);
        for (a, b) in d.iter().zip(&orig) {
            assert!((a / 32.0 - b).norm() < 1e-12);
        }
    }

    #[test]
    fn fft_of_single_mode() {
        // e^{i(phi_1 + 2 phi_2)} on an 8x8 grid lands in bin (1, 2)
        let dims = vec![8usize, 8];
        let n = 64;
        let mut d: Vec<Complex64> = (0..n)
            .map(|p| {
                let a = angles_at(&dims, p);
                Complex64::from_polar(1.0, a[0] + 2.0 * a[1])
            })
            .collect();
        fft_nd(&mut d, &dims, Direction::Forward);
        for (p, v) in d.iter().enumerate() {
            let expected = if bins_at(&dims, p) == vec![1, 2] { 64.0 } else { 0.0 };
            assert!((v.re - expected).abs() < 1e-10 && v.im.abs() < 1e-10);
        }
    }
}
