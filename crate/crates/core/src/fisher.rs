//! Fisher Vector encoding of a descriptor sample under a diagonal GMM.
//!
//! For each component k the encoder emits the gradient of the average log-likelihood
//! with respect to the means and standard deviations, each whitened by the analytic
//! diagonal Fisher information (w_k / var for means, 2 w_k / var for deviations):
//!
//! ```text
//! G_mu_k    = 1 / (T sqrt(w_k))   * sum_t gamma_t(k) (x_t - mu_k) / sigma_k
//! G_sigma_k = 1 / (T sqrt(2 w_k)) * sum_t gamma_t(k) [((x_t - mu_k) / sigma_k)^2 - 1]
//! ```
//!
//! Layout: all K mean blocks, then all K deviation blocks, each block D long.

use ndarray::{Array1, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use crate::codebook::{encode_gmm, responsibilities, GmmParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Posteriors below this are treated as exactly zero.
pub const GAMMA_FLOOR: f64 = 1e-12;
pub const POWER: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector<T> {
    pub values: Array1<T>,
    /// Provenance hash of the GMM the vector was encoded against.
    pub gmm_id: u64,
    pub normalized: bool,
}

impl<T: Scalar> FisherVector<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// First eight bytes of the SHA-256 of the serialized GMM.
pub fn gmm_id<T: Scalar>(params: &GmmParams<T>) -> u64 {
    let digest = Sha256::digest(encode_gmm(params));
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Row indices sorted lexicographically by value, so accumulation order does not depend on
/// the order descriptors arrive in.
fn canonical_order<T: Scalar>(x: &ArrayView2<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    idx.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b).iter())
            .map(|(p, q)| p.f64().total_cmp(&q.f64()))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Unnormalized Fisher Vector of `x` (T x D) under `params`.
pub fn encode_fv<T: Scalar>(params: &GmmParams<T>, x: ArrayView2<T>) -> Result<FisherVector<T>> {
    let (k, d) = params.means.dim();
    if x.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: x.ncols() });
    }
    if x.nrows() == 0 {
        return Err(Error::EmptySample);
    }
    let gamma = responsibilities(params, x)?.gamma;
    let order = canonical_order(&x);
    let sigma = params.variances.mapv(|v| v.f64().sqrt());

    let mut g_mu = vec![0.0f64; k * d];
    let mut g_sigma = vec![0.0f64; k * d];
    for &t in &order {
        let row = x.row(t);
        for c in 0..k {
            let g = gamma[[t, c]].f64();
            if g < GAMMA_FLOOR {
                continue;
            }
            let base = c * d;
            for j in 0..d {
                let z = (row[j].f64() - params.means[[c, j]].f64()) / sigma[[c, j]];
                g_mu[base + j] += g * z;
                g_sigma[base + j] += g * (z * z - 1.0);
            }
        }
    }
    let n = x.nrows() as f64;
    let mut values = Vec::with_capacity(2 * k * d);
    for (block, extra) in [(&g_mu, 1.0), (&g_sigma, 2.0)] {
        for c in 0..k {
            let scale = 1.0 / (n * (extra * params.weights[c].f64()).sqrt());
            values.extend(block[c * d..(c + 1) * d].iter().map(|v| T::of(v * scale)));
        }
    }
    Ok(FisherVector { values: Array1::from(values), gmm_id: gmm_id(params), normalized: false })
}

/// Signed square root followed by global L2 normalization. All-zero input stays zero.
pub fn normalize_fv<T: Scalar>(fv: &FisherVector<T>) -> Result<FisherVector<T>> {
    if let Some(pos) = fv.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(format!("non-finite Fisher Vector entry at {pos}")));
    }
    let powered: Vec<f64> = fv.values.iter().map(|v| v.f64().signum() * v.f64().abs().powf(POWER)).collect();
    let norm = powered.iter().map(|v| v * v).sum::<f64>().sqrt();
    let values = if norm > 0.0 {
        powered.iter().map(|v| T::of(v / norm)).collect()
    } else {
        Array1::zeros(fv.len())
    };
    Ok(FisherVector { values, gmm_id: fv.gmm_id, normalized: true })
}

/// Encodes and normalizes one descriptor set.
pub fn fisher_vector<T: Scalar>(params: &GmmParams<T>, x: ArrayView2<T>) -> Result<FisherVector<T>> {
    normalize_fv(&encode_fv(params, x)?)
}

/// Normalized Fisher Vectors for many descriptor sets, stacked row-wise.
pub fn encode_many<T: Scalar>(params: &GmmParams<T>, sets: &[ArrayView2<T>]) -> Result<ndarray::Array2<T>> {
    use rayon::prelude::*;
    let fvs: Vec<FisherVector<T>> = sets.par_iter().map(|x| fisher_vector(params, *x)).collect::<Result<_>>()?;
    let dim = 2 * params.components() * params.dim();
    let mut out = ndarray::Array2::zeros((fvs.len(), dim));
    for (mut row, fv) in out.axis_iter_mut(Axis(0)).zip(&fvs) {
        row.assign(&fv.values);
    }
    Ok(out)
}
