//! Independent reference implementations used by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ensvis_core::codebook::GmmParams;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_gmm(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GmmParams<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    GmmParams {
        weights: Array1::from_iter(raw.iter().map(|w| w / s)),
        means: Array2::from_shape_fn((k, d), |_| rng.random_range(-1.0..1.0)),
        variances: Array2::from_shape_fn((k, d), |_| rng.random_range(0.4..1.6)),
    }
}

/// Mean log-density of the rows of `x`, from the plain mixture density.
pub fn mean_log_likelihood(w: &[f64], mu: &Array2<f64>, sigma: &Array2<f64>, x: &Array2<f64>) -> f64 {
    let (k, d) = mu.dim();
    let mut total = 0.0;
    for row in x.rows() {
        let mut p = 0.0;
        for c in 0..k {
            let mut dens = w[c];
            for j in 0..d {
                let s = sigma[[c, j]];
                let z = (row[j] - mu[[c, j]]) / s;
                dens *= (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            }
            p += dens;
        }
        total += p.ln();
    }
    total / x.nrows() as f64
}

/// Fisher Vector by central differences: d/dmu and d/dsigma of the mean log-likelihood,
/// scaled by sigma / sqrt(w) and sigma / sqrt(2w). Means first, then deviations.
pub fn finite_difference_fv(p: &GmmParams<f64>, x: &Array2<f64>, h: f64) -> Vec<f64> {
    let (k, d) = p.means.dim();
    let w: Vec<f64> = p.weights.to_vec();
    let sigma = p.variances.mapv(f64::sqrt);
    let mut out = vec![0.0; 2 * k * d];
    for c in 0..k {
        for j in 0..d {
            let mut plus = p.means.clone();
            let mut minus = p.means.clone();
            plus[[c, j]] += h;
            minus[[c, j]] -= h;
            let g = (mean_log_likelihood(&w, &plus, &sigma, x) - mean_log_likelihood(&w, &minus, &sigma, x)) / (2.0 * h);
            out[c * d + j] = g * sigma[[c, j]] / w[c].sqrt();

            let mut splus = sigma.clone();
            let mut sminus = sigma.clone();
            splus[[c, j]] += h;
            sminus[[c, j]] -= h;
            let g = (mean_log_likelihood(&w, &p.means, &splus, x) - mean_log_likelihood(&w, &p.means, &sminus, x))
                / (2.0 * h);
            out[k * d + c * d + j] = g * sigma[[c, j]] / (2.0 * w[c]).sqrt();
        }
    }
    out
}

/// Plurality by explicit counting; ties by summed decision values (in member order),
/// then lowest class.
pub fn brute_force_vote(votes: &[usize], conf: &[Vec<f64>], use_confidence: bool) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap();
    let tied: Vec<usize> = counts.iter().filter(|(_, &n)| n == best).map(|(&c, _)| c).collect();
    if tied.len() == 1 || !use_confidence {
        return tied[0];
    }
    let sums: Vec<f64> = tied.iter().map(|&c| conf.iter().map(|m| m[c]).sum()).collect();
    let top = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    tied[sums.iter().position(|&s| s == top).unwrap()]
}

/// Whether `levels[l][[r, c]]` differs from and lies strictly above or below all 26
/// neighbours in the 3x3x3 block.
pub fn brute_force_extremum(levels: &[Array2<f64>], l: usize, r: usize, c: usize) -> bool {
    let v = levels[l][[r, c]];
    let mut above = true;
    let mut below = true;
    for dl in [-1i64, 0, 1] {
        for dr in [-1i64, 0, 1] {
            for dc in [-1i64, 0, 1] {
                if dl == 0 && dr == 0 && dc == 0 {
                    continue;
                }
                let n = levels[(l as i64 + dl) as usize][[(r as i64 + dr) as usize, (c as i64 + dc) as usize]];
                above &= v > n;
                below &= v < n;
            }
        }
    }
    above || below
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}
