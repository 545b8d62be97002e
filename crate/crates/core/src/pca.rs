//! Principal component analysis for shrinking high-dimensional activations.
//!
//! Fitting uses the sample covariance (divisor N - 1). When there are fewer samples than
//! dimensions the N x N Gram matrix is decomposed instead and its eigenvectors are mapped
//! back through the centered data.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel<T> {
    pub mean: Array1<T>,
    /// q x D, rows are orthonormal principal axes.
    pub components: Array2<T>,
    /// Non-increasing, non-negative variances along each axis.
    pub eigenvalues: Array1<T>,
}

impl<T: Scalar> PcaModel<T> {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn project(&self, x: ArrayView1<T>) -> Result<Array1<T>> {
        project(self, x)
    }

    /// Projects every row.
    pub fn transform(&self, data: ArrayView2<T>) -> Result<Array2<T>> {
        if data.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: data.ncols() });
        }
        let centered = &data - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.components.t()))
    }

    pub fn reconstruct(&self, z: ArrayView1<T>) -> Result<Array1<T>> {
        if z.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), found: z.len() });
        }
        Ok(self.components.t().dot(&z) + &self.mean)
    }
}

/// Rejects targets outside 1..=min(N - 1, D).
pub fn check_target(n: usize, d: usize, q: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 samples, got {n}")));
    }
    let max = (n - 1).min(d);
    if q == 0 || q > max {
        return Err(Error::DimensionMismatch { expected: max, found: q });
    }
    Ok(())
}

/// Flips each axis so its largest-magnitude coordinate (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Fits a q-dimensional PCA on the rows of `data`.
pub fn fit_pca<T: Scalar>(data: ArrayView2<T>, q: usize) -> Result<PcaModel<T>> {
    let (n, d) = data.dim();
    check_target(n, d, q)?;
    let x = data.mapv(|v| v.f64());
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let xc = &x - &mean.view().insert_axis(Axis(0));
    let denom = (n - 1) as f64;

    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut eigenvalues = Vec::with_capacity(q);
    if n <= d {
        let gram = xc.dot(&xc.t()) / denom;
        let eig = SymmetricEigen::new(DMatrix::from_fn(n, n, |i, j| gram[[i, j]]));
        let top = top_indices(eig.eigenvalues.as_slice(), q);
        let u = Array2::from_shape_fn((n, q), |(i, c)| eig.eigenvectors[(i, top[c])]);
        let mut v = xc.t().dot(&u).reversed_axes().as_standard_layout().into_owned();
        // Mapped-back axes lose orthogonality for tiny eigenvalues; re-orthonormalize
        // with two passes of classical Gram-Schmidt.
        for i in 0..q {
            let (done, mut rest) = v.view_mut().split_at(Axis(0), i);
            let mut row = rest.row_mut(0);
            for _ in 0..2 {
                let coeffs = done.dot(&row);
                for (c, prev) in coeffs.iter().zip(done.rows()) {
                    row.scaled_add(-c, &prev);
                }
            }
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::NumericalFailure(format!(
                    "data has rank below the requested {q} components"
                )));
            }
            row /= norm;
        }
        axes = v.rows().into_iter().map(|r| r.to_vec()).collect();
        eigenvalues = top.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    } else {
        let cov = xc.t().dot(&xc) / denom;
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
        for idx in top_indices(eig.eigenvalues.as_slice(), q) {
            let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().cloned().collect();
            normalize(&mut v);
            axes.push(v);
            eigenvalues.push(eig.eigenvalues[idx].max(0.0));
        }
    }
    for a in axes.iter_mut() {
        fix_sign(a);
    }
    Ok(PcaModel {
        mean: mean.mapv(T::of),
        components: Array2::from_shape_fn((q, d), |(i, j)| T::of(axes[i][j])),
        eigenvalues: Array1::from_iter(eigenvalues.into_iter().map(T::of)),
    })
}

/// Indices of the `q` largest values, descending; ties by index.
fn top_indices(values: &[f64], q: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(q);
    idx
}

/// components . (x - mean)
pub fn project<T: Scalar>(model: &PcaModel<T>, x: ArrayView1<T>) -> Result<Array1<T>> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), found: x.len() });
    }
    Ok(model.components.dot(&(&x - &model.mean)))
}

const PCA_MAGIC: &[u8; 4] = b"PCA1";

pub fn encode_pca<T: Scalar>(model: &PcaModel<T>) -> Vec<u8> {
    let (q, d) = model.components.dim();
    let mut w = Writer::with_capacity(12 + 8 * (d + q * d + q));
    w.bytes(PCA_MAGIC);
    w.u32(d as u32);
    w.u32(q as u32);
    w.f64s(model.mean.iter().map(|v| v.f64()));
    w.f64s(model.components.iter().map(|v| v.f64()));
    w.f64s(model.eigenvalues.iter().map(|v| v.f64()));
    w.buf
}

pub fn decode_pca<T: Scalar>(bytes: &[u8]) -> Result<PcaModel<T>> {
    let mut r = Reader::new(bytes);
    r.magic(PCA_MAGIC)?;
    let d = r.u32()? as usize;
    let q = r.u32()? as usize;
    let expected = 12 + 8 * (d as u64 + (q as u64) * (d as u64) + q as u64);
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated { expected, found: bytes.len() as u64 });
    }
    let mean = Array1::from_iter(r.f64s(d)?.into_iter().map(T::of));
    let components = Array2::from_shape_vec((q, d), r.f64s(q * d)?.into_iter().map(T::of).collect())
        .expect("length matches shape");
    let eigenvalues = Array1::from_iter(r.f64s(q)?.into_iter().map(T::of));
    r.finish()?;
    Ok(PcaModel { mean, components, eigenvalues })
}

pub fn write_pca<T: Scalar>(model: &PcaModel<T>, path: &Path) -> Result<()> {
    Writer { buf: encode_pca(model) }.write_to(path)
}

pub fn read_pca<T: Scalar>(path: &Path) -> Result<PcaModel<T>> {
    decode_pca(&read_file(path)?)
}
