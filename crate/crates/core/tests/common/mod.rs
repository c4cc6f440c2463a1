//! Helpers shared by the integration tests: seeded random markets and an
//! independent central-difference Jacobian.

#![allow(dead_code)]

use admissions_core::MarketParams;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs_diff_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Market with `n` schools, weights in `[0.2, 2)` and capacities averaging
/// `load / n`.
pub fn random_market(rng: &mut ChaCha8Rng, n: usize, load: f64) -> MarketParams {
    let gamma = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    let q = (0..n)
        .map(|_| rng.random_range(0.2..1.8) * load / n as f64)
        .collect();
    MarketParams::new(gamma, q).unwrap()
}

/// Cutoffs in `[margin, 1 - margin]` whose sorted gaps are all at least `gap`.
pub fn spread_cutoffs(rng: &mut ChaCha8Rng, n: usize, margin: f64, gap: f64) -> Vec<f64> {
    loop {
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(margin..1.0 - margin)).collect();
        let mut s = p.clone();
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|w| w[1] - w[0] >= gap) {
            return p;
        }
    }
}

/// Central differences `(f(x + h e_j) - f(x - h e_j)) / 2h` with
/// `h = rel * max(1, |x_j|)`; column `j` is the derivative in `x_j`.
pub fn central_difference(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], rel: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let mut out = DMatrix::zeros(m, x.len());
    for j in 0..x.len() {
        let h = rel * x[j].abs().max(1.0);
        let mut up = x.to_vec();
        let mut down = x.to_vec();
        up[j] += h;
        down[j] -= h;
        let (fu, fd) = (f(&up), f(&down));
        for i in 0..m {
            out[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    out
}
