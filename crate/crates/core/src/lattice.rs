//! Integer lattice helpers: norms of Fourier modes and enumeration of balls
//! and shells in `Z^n`.

/// Relative slack used when comparing an integer norm against a real radius.
const RADIUS_SLACK: f64 = 1e-12;

pub fn norm1(k: &[i64]) -> f64 {
    k.iter().map(|&x| x.unsigned_abs() as f64).sum()
}

pub fn norm2_sq(k: &[i64]) -> i64 {
    k.iter().map(|&x| x * x).sum()
}

pub fn norm2(k: &[i64]) -> f64 {
    (norm2_sq(k) as f64).sqrt()
}

pub fn norm_max(k: &[i64]) -> i64 {
    k.iter().map(|x| x.abs()).max().unwrap_or(0)
}

pub fn dot(k: &[i64], v: &[f64]) -> f64 {
    k.iter().zip(v).map(|(&a, &b)| a as f64 * b).sum()
}

pub fn negate(k: &[i64]) -> Vec<i64> {
    k.iter().map(|x| -x).collect()
}

/// `|k|_2 <= radius`, exact for integer radii.
pub fn within_radius(k: &[i64], radius: f64) -> bool {
    if radius < 0.0 {
        return false;
    }
    (norm2_sq(k) as f64) <= radius * radius * (1.0 + RADIUS_SLACK)
}

/// All `k` in `Z^n` with `|k|_2 <= radius`, in lexicographic order.
pub fn ball(n: usize, radius: f64) -> Vec<Vec<i64>> {
    let bound = if radius >= 0.0 {
        radius.floor() as i64
    } else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut current = vec![-bound; n];
    if n == 0 {
        return vec![Vec::new()];
    }
    loop {
        if within_radius(&current, radius) {
            out.push(current.clone());
        }
        // odometer increment
        let mut axis = n;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            if current[axis] < bound {
                current[axis] += 1;
                for c in current.iter_mut().skip(axis + 1) {
                    *c = -bound;
                }
                break;
            }
        }
    }
}

/// Nonzero `k` with `lo < |k|_2 <= hi`.
pub fn shell(n: usize, lo: f64, hi: f64) -> Vec<Vec<i64>> {
    ball(n, hi)
        .into_iter()
        .filter(|k| norm2_sq(k) > 0 && !within_radius(k, lo))
        .collect()
}

/// Nonzero `k` with `|k|_2 <= radius`.
pub fn punctured_ball(n: usize, radius: f64) -> Vec<Vec<i64>> {
    ball(n, radius).into_iter().filter(|k| norm2_sq(k) > 0).collect()
}
