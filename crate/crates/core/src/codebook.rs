//! Diagonal-covariance Gaussian mixture: k-means++ initialization, EM fitting,
//! posteriors and log-likelihood.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const VARIANCE_FLOOR: f64 = 1e-4;
pub const DEFAULT_COMPONENTS: usize = 64;
pub const MAX_FIT_SAMPLES: usize = 200_000;
const KMEANS_ITERS: usize = 25;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams<T> {
    pub weights: Array1<T>,
    /// K x D.
    pub means: Array2<T>,
    /// K x D diagonal variances.
    pub variances: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities<T> {
    /// T x K posteriors.
    pub gamma: Array2<T>,
}

impl<T: Scalar> GmmParams<T> {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Checks shapes, weight normalization, positivity and the variance floor.
    pub fn validate(&self) -> Result<()> {
        let (k, d) = self.means.dim();
        if k == 0 || d == 0 || self.weights.len() != k || self.variances.dim() != (k, d) {
            return Err(Error::InvalidArgument(format!(
                "inconsistent GMM shapes: weights {}, means {:?}, variances {:?}",
                self.weights.len(),
                self.means.dim(),
                self.variances.dim()
            )));
        }
        let sum: f64 = self.weights.iter().map(|w| w.f64()).sum();
        if (sum - 1.0).abs() > 1e-6 || self.weights.iter().any(|w| w.f64().is_nan() || w.f64() <= 0.0) {
            return Err(Error::InvalidArgument(format!("GMM weights must be positive and sum to 1 (sum {sum})")));
        }
        if self.variances.iter().any(|v| v.f64() <= 0.0 || !v.is_finite()) || self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("GMM means must be finite and variances positive".into()));
        }
        Ok(())
    }

    fn check_dim(&self, data: &ArrayView2<T>) -> Result<()> {
        if data.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: data.ncols() });
        }
        Ok(())
    }

    /// Per-component constant log w_k - 0.5 * sum_d log(2 pi var_kd).
    fn log_norms(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(self.variances.rows())
            .map(|(w, var)| w.f64().ln() - 0.5 * var.iter().map(|v| LN_2PI + v.f64().ln()).sum::<f64>())
            .collect()
    }

    /// log(w_k N(x; mu_k, var_k)) for every component.
    fn joint_log_densities(&self, x: &[T], log_norms: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let mean = self.means.row(k);
            let var = self.variances.row(k);
            let mut q = 0.0;
            for ((xv, m), v) in x.iter().zip(mean.iter()).zip(var.iter()) {
                let diff = xv.f64() - m.f64();
                q += diff * diff / v.f64();
            }
            *o = log_norms[k] - 0.5 * q;
        }
    }

    pub fn cast<U: Scalar>(&self) -> GmmParams<U> {
        GmmParams {
            weights: self.weights.mapv(|v| U::of(v.f64())),
            means: self.means.mapv(|v| U::of(v.f64())),
            variances: self.variances.mapv(|v| U::of(v.f64())),
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise posteriors and per-row log-likelihoods, computed in parallel with ordered output.
fn e_step<T: Scalar>(params: &GmmParams<T>, data: &ArrayView2<T>) -> (Array2<f64>, Vec<f64>) {
    let k = params.components();
    let norms = params.log_norms();
    let rows: Vec<(Vec<f64>, f64)> = (0..data.nrows())
        .into_par_iter()
        .map(|t| {
            let x: Vec<T> = data.row(t).to_vec();
            let mut lj = vec![0.0; k];
            params.joint_log_densities(&x, &norms, &mut lj);
            let lse = log_sum_exp(&lj);
            let post = lj.iter().map(|l| (l - lse).exp()).collect();
            (post, lse)
        })
        .collect();
    let mut gamma = Array2::zeros((data.nrows(), k));
    let mut lls = Vec::with_capacity(data.nrows());
    for (t, (post, lse)) in rows.into_iter().enumerate() {
        gamma.row_mut(t).assign(&Array1::from(post));
        lls.push(lse);
    }
    (gamma, lls)
}

/// Posterior probabilities of each component for each row, via log-sum-exp.
pub fn responsibilities<T: Scalar>(params: &GmmParams<T>, data: ArrayView2<T>) -> Result<Responsibilities<T>> {
    params.check_dim(&data)?;
    let (gamma, _) = e_step(params, &data);
    Ok(Responsibilities { gamma: gamma.mapv(T::of) })
}

/// Sum over rows of log sum_k w_k N(x_t; mu_k, var_k).
pub fn log_likelihood<T: Scalar>(params: &GmmParams<T>, data: ArrayView2<T>) -> Result<T> {
    params.check_dim(&data)?;
    let (_, lls) = e_step(params, &data);
    Ok(T::of(lls.iter().sum()))
}

fn sq_dist<T: Scalar>(a: &[T], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, c)| (x.f64() - c).powi(2)).sum()
}

/// k-means++ seeding followed by at most 25 Lloyd iterations. Diagonal variances and weights
/// come from the final hard assignment.
pub fn init_kmeans<T: Scalar>(data: ArrayView2<T>, components: usize, seed: u64) -> Result<GmmParams<T>> {
    let (n, d) = data.dim();
    if components == 0 || d == 0 || n < components {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 1 <= K <= N and D >= 1 (K={components}, N={n}, D={d})"
        )));
    }
    let rows: Vec<Vec<T>> = data.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let to_f64 = |r: &[T]| r.iter().map(|v| v.f64()).collect::<Vec<f64>>();
    let mut centers: Vec<Vec<f64>> = vec![to_f64(&rows[rng.random_range(0..n)])];
    let mut nearest: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < components {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = to_f64(&rows[pick]);
        for (nd, r) in nearest.iter_mut().zip(&rows) {
            *nd = nd.min(sq_dist(r, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERS {
        let new_assign: Vec<usize> = rows
            .par_iter()
            .map(|r| {
                let mut best = (f64::INFINITY, 0);
                for (k, c) in centers.iter().enumerate() {
                    let dist = sq_dist(r, c);
                    if dist < best.0 {
                        best = (dist, k);
                    }
                }
                best.1
            })
            .collect();
        let changed = new_assign != assign;
        assign = new_assign;

        let mut sums = vec![vec![0.0; d]; components];
        let mut counts = vec![0usize; components];
        for (r, &k) in rows.iter().zip(&assign) {
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(r) {
                *s += v.f64();
            }
        }
        for k in 0..components {
            if counts[k] == 0 {
                // Re-seed from the point farthest from its own center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&rows[a], &centers[assign[a]])
                            .total_cmp(&sq_dist(&rows[b], &centers[assign[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("n >= 1");
                let old = assign[far];
                counts[old] -= 1;
                for (s, v) in sums[old].iter_mut().zip(&rows[far]) {
                    *s -= v.f64();
                }
                assign[far] = k;
                counts[k] = 1;
                sums[k] = to_f64(&rows[far]);
            }
        }
        for k in 0..components {
            centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
        }
        if !changed {
            break;
        }
    }

    let mut var = vec![vec![0.0; d]; components];
    let mut counts = vec![0usize; components];
    for (r, &k) in rows.iter().zip(&assign) {
        counts[k] += 1;
        for ((acc, v), c) in var[k].iter_mut().zip(r).zip(&centers[k]) {
            *acc += (v.f64() - c).powi(2);
        }
    }
    let weights = Array1::from_iter(counts.iter().map(|&c| T::of(c as f64 / n as f64)));
    let means = Array2::from_shape_fn((components, d), |(k, j)| T::of(centers[k][j]));
    let variances = Array2::from_shape_fn((components, d), |(k, j)| {
        T::of((var[k][j] / counts[k].max(1) as f64).max(VARIANCE_FLOOR))
    });
    Ok(GmmParams { weights, means, variances })
}

#[derive(Debug, Clone)]
pub struct EmFit<T> {
    pub params: GmmParams<T>,
    /// Total log-likelihood of the initial parameters followed by one entry per iteration.
    pub trace: Vec<f64>,
}

/// Runs EM from `init` until the per-point log-likelihood gain drops below `tol` or
/// `max_iter` iterations have run.
pub fn em_fit<T: Scalar>(data: ArrayView2<T>, init: &GmmParams<T>, max_iter: usize, tol: f64) -> Result<EmFit<T>> {
    init.validate()?;
    init.check_dim(&data)?;
    if max_iter < 1 {
        return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
    }
    let (n, d) = data.dim();
    let k = init.components();
    let mut params = init.clone();
    let (mut gamma, lls) = e_step(&params, &data);
    let mut ll: f64 = lls.iter().sum();
    if !ll.is_finite() {
        return Err(Error::NumericalFailure("non-finite log-likelihood at iteration 0".into()));
    }
    let mut trace = vec![ll];

    for iter in 1..=max_iter {
        // M-step with a fixed summation order over rows.
        let mut mass = vec![0.0; k];
        let mut sum_x = Array2::<f64>::zeros((k, d));
        let mut sum_xx = Array2::<f64>::zeros((k, d));
        for (t, row) in data.axis_iter(Axis(0)).enumerate() {
            for c in 0..k {
                let g = gamma[[t, c]];
                if g == 0.0 {
                    continue;
                }
                mass[c] += g;
                let mut sx = sum_x.row_mut(c);
                for (j, v) in row.iter().enumerate() {
                    sx[j] += g * v.f64();
                }
            }
        }
        let means = Array2::from_shape_fn((k, d), |(c, j)| {
            if mass[c] > 0.0 {
                sum_x[[c, j]] / mass[c]
            } else {
                params.means[[c, j]].f64()
            }
        });
        for (t, row) in data.axis_iter(Axis(0)).enumerate() {
            for c in 0..k {
                let g = gamma[[t, c]];
                if g == 0.0 {
                    continue;
                }
                let mut sxx = sum_xx.row_mut(c);
                for (j, v) in row.iter().enumerate() {
                    let diff = v.f64() - means[[c, j]];
                    sxx[j] += g * diff * diff;
                }
            }
        }
        // Components that lost all mass keep their parameters with a floored weight;
        // weights are renormalized afterwards.
        let raw_w: Vec<f64> = mass.iter().map(|&m| (m / n as f64).max(f64::MIN_POSITIVE)).collect();
        let wsum: f64 = raw_w.iter().sum();
        params = GmmParams {
            weights: Array1::from_iter(raw_w.iter().map(|w| T::of(w / wsum))),
            means: means.mapv(T::of),
            variances: Array2::from_shape_fn((k, d), |(c, j)| {
                if mass[c] > 0.0 {
                    T::of((sum_xx[[c, j]] / mass[c]).max(VARIANCE_FLOOR))
                } else {
                    params.variances[[c, j]]
                }
            }),
        };

        let (g, lls) = e_step(&params, &data);
        gamma = g;
        let new_ll: f64 = lls.iter().sum();
        if !new_ll.is_finite() {
            return Err(Error::NumericalFailure(format!("non-finite log-likelihood at iteration {iter}")));
        }
        trace.push(new_ll);
        let gain = (new_ll - ll) / n as f64;
        ll = new_ll;
        if gain < tol {
            break;
        }
    }
    Ok(EmFit { params, trace })
}

/// Uniform sample of at most `max` rows without replacement, in original order.
pub fn subsample_rows<T: Scalar>(data: ArrayView2<T>, max: usize, seed: u64) -> Array2<T> {
    let n = data.nrows();
    if n <= max {
        return data.to_owned();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    data.select(Axis(0), &idx)
}

/// k-means++ initialization followed by EM; the default recipe for codebook training.
pub fn train_codebook<T: Scalar>(
    data: ArrayView2<T>,
    components: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<EmFit<T>> {
    let sample = subsample_rows(data, MAX_FIT_SAMPLES, seed);
    let init = init_kmeans(sample.view(), components, seed)?;
    em_fit(sample.view(), &init, max_iter, tol)
}

const GMM_MAGIC: &[u8; 4] = b"GMM1";

pub fn encode_gmm<T: Scalar>(params: &GmmParams<T>) -> Vec<u8> {
    let (k, d) = params.means.dim();
    let mut w = Writer::with_capacity(12 + 8 * k * (2 * d + 1));
    w.bytes(GMM_MAGIC);
    w.u32(k as u32);
    w.u32(d as u32);
    w.f64s(params.weights.iter().map(|v| v.f64()));
    w.f64s(params.means.iter().map(|v| v.f64()));
    w.f64s(params.variances.iter().map(|v| v.f64()));
    w.buf
}

pub fn decode_gmm<T: Scalar>(bytes: &[u8]) -> Result<GmmParams<T>> {
    let mut r = Reader::new(bytes);
    r.magic(GMM_MAGIC)?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let expected = 12 + 8 * (k as u64) * (2 * d as u64 + 1);
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated { expected, found: bytes.len() as u64 });
    }
    let weights = Array1::from_iter(r.f64s(k)?.into_iter().map(T::of));
    let means = Array2::from_shape_vec((k, d), r.f64s(k * d)?.into_iter().map(T::of).collect())
        .expect("length matches shape");
    let variances = Array2::from_shape_vec((k, d), r.f64s(k * d)?.into_iter().map(T::of).collect())
        .expect("length matches shape");
    r.finish()?;
    let params = GmmParams { weights, means, variances };
    params.validate()?;
    Ok(params)
}

pub fn write_gmm<T: Scalar>(params: &GmmParams<T>, path: &Path) -> Result<()> {
    Writer { buf: encode_gmm(params) }.write_to(path)
}

pub fn read_gmm<T: Scalar>(path: &Path) -> Result<GmmParams<T>> {
    decode_gmm(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop_assert, proptest};
    use rand_distr::{Distribution, StandardNormal};

    fn two_clouds(n_each: usize, seed: u64) -> (Array2<f64>, [[f64; 2]; 2]) {
        let centers = [[-5.0, 0.0], [5.0, 3.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for c in &centers {
            for _ in 0..n_each {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                rows.extend([c[0] + a, c[1] + b]);
            }
        }
        (Array2::from_shape_vec((2 * n_each, 2), rows).unwrap(), centers)
    }

    fn naive_ll(p: &GmmParams<f64>, data: &Array2<f64>) -> f64 {
        data.rows()
            .into_iter()
            .map(|x| {
                let mut dens = 0.0;
                for k in 0..p.components() {
                    let mut v = p.weights[k];
                    for j in 0..p.dim() {
                        let var = p.variances[[k, j]];
                        v *= (-(x[j] - p.means[[k, j]]).powi(2) / (2.0 * var)).exp()
                            / (2.0 * std::f64::consts::PI * var).sqrt();
                    }
                    dens += v;
                }
                dens.ln()
            })
            .sum()
    }

    #[test]
    fn single_component_kmeans_is_sample_statistics() {
        let data = array![[1.0, 2.0], [3.0, 2.0], [5.0, 8.0]];
        let p: GmmParams<f64> = init_kmeans(data.view(), 1, 7).unwrap();
        assert_eq!(p.weights[0], 1.0);
        assert!((p.means[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((p.means[[0, 1]] - 4.0).abs() < 1e-12);
        assert!((p.variances[[0, 0]] - 8.0 / 3.0).abs() < 1e-12);
        assert!((p.variances[[0, 1]] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_finds_separated_clouds_deterministically() {
        let (data, centers) = two_clouds(500, 3);
        let p = init_kmeans(data.view(), 2, 11).unwrap();
        // Oracle: per-cloud sample means of the fixture.
        let oracle: Vec<[f64; 2]> = (0..2)
            .map(|c| {
                let block = data.slice(ndarray::s![c * 500..(c + 1) * 500, ..]);
                let m = block.mean_axis(Axis(0)).unwrap();
                [m[0], m[1]]
            })
            .collect();
        for o in &oracle {
            let best = (0..2)
                .map(|k| ((p.means[[k, 0]] - o[0]).powi(2) + (p.means[[k, 1]] - o[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "{best}");
        }
        let _ = centers;
        assert_eq!(p, init_kmeans(data.view(), 2, 11).unwrap());
    }

    #[test]
    fn duplicate_heavy_data_reseeds_empty_clusters() {
        let mut rows = vec![0.0; 40];
        rows.extend([10.0, 10.0]);
        let data = Array2::from_shape_vec((21, 2), rows).unwrap();
        let p: GmmParams<f64> = init_kmeans(data.view(), 3, 0).unwrap();
        assert!(p.weights.iter().all(|&w| w > 0.0));
        assert!((p.weights.sum() - 1.0).abs() < 1e-12);
        assert!(p.variances.iter().all(|&v| v >= VARIANCE_FLOOR));
    }

    #[test]
    fn em_recovers_two_clouds() {
        let (data, centers) = two_clouds(2000, 5);
        let init = init_kmeans(data.view(), 2, 1).unwrap();
        let fit = em_fit(data.view(), &init, 100, 1e-10).unwrap();
        for c in &centers {
            let k = (0..2)
                .min_by(|&a, &b| {
                    let da = (fit.params.means[[a, 0]] - c[0]).abs();
                    let db = (fit.params.means[[b, 0]] - c[0]).abs();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert!((fit.params.means[[k, 0]] - c[0]).abs() < 0.1);
            assert!((fit.params.means[[k, 1]] - c[1]).abs() < 0.1);
            assert!((fit.params.weights[k] - 0.5).abs() < 0.05);
        }
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }

    #[test]
    fn single_component_em_converges_in_one_iteration() {
        let (data, _) = two_clouds(50, 9);
        let init = GmmParams { weights: array![1.0], means: array![[0.0, 0.0]], variances: array![[1.0, 1.0]] };
        let fit = em_fit(data.view(), &init, 1, 0.0).unwrap();
        let mean = data.mean_axis(Axis(0)).unwrap();
        let var = data.var_axis(Axis(0), 0.0);
        for j in 0..2 {
            assert!((fit.params.means[[0, j]] - mean[j]).abs() < 1e-10);
            assert!((fit.params.variances[[0, j]] - var[j]).abs() < 1e-10);
        }
        let again = em_fit(data.view(), &fit.params, 5, 1e-12).unwrap();
        assert!((again.trace[1] - again.trace[0]).abs() < 1e-9);
    }

    #[test]
    fn log_likelihood_at_mean_of_unit_gaussian() {
        let d = 5;
        let p = GmmParams {
            weights: array![1.0],
            means: Array2::zeros((1, d)),
            variances: Array2::ones((1, d)),
        };
        let ll = log_likelihood(&p, Array2::zeros((1, d)).view()).unwrap();
        assert!((ll + d as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let two = log_likelihood(&p, Array2::zeros((2, d)).view()).unwrap();
        assert!((two - 2.0 * ll).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_matches_naive_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = GmmParams {
            weights: array![0.2, 0.5, 0.3],
            means: Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)),
            variances: Array2::from_shape_fn((3, 4), |_| rng.random_range(0.5..2.0)),
        };
        let data = Array2::from_shape_fn((16, 4), |_| rng.random_range(-2.0..2.0));
        let fast = log_likelihood(&p, data.view()).unwrap();
        let slow = naive_ll(&p, &data);
        assert!(((fast - slow) / slow).abs() < 1e-8);
    }

    #[test]
    fn posterior_concentrates_on_sharp_heavy_component() {
        let p = GmmParams {
            weights: array![0.98, 0.01, 0.01],
            means: array![[0.0, 0.0], [0.5, 0.5], [-0.5, 0.2]],
            variances: array![[1e-3, 1e-3], [1.0, 1.0], [1.0, 1.0]],
        };
        let g = responsibilities(&p, array![[0.0, 0.0]].view()).unwrap();
        assert!(g.gamma[[0, 0]] > 0.99);
        let single = GmmParams { weights: array![1.0], means: array![[3.0]], variances: array![[2.0]] };
        let g = responsibilities(&single, array![[0.0], [100.0]].view()).unwrap();
        assert!(g.gamma.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dimension_mismatch() {
        let p = GmmParams::<f64> { weights: array![1.0], means: array![[0.0, 0.0]], variances: array![[1.0, 1.0]] };
        assert!(matches!(
            log_likelihood(&p, array![[0.0]].view()),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn non_finite_data_is_a_numerical_failure() {
        let p = GmmParams::<f64> { weights: array![1.0], means: array![[0.0]], variances: array![[1.0]] };
        let err = em_fit(array![[f64::NAN], [1.0]].view(), &p, 3, 1e-6).unwrap_err();
        assert!(matches!(err, Error::NumericalFailure(msg) if msg.contains("iteration 0")));
    }

    #[test]
    fn gmm_blob_roundtrip_and_layout() {
        let p = GmmParams { weights: array![0.25, 0.75], means: array![[1.0], [2.0]], variances: array![[0.5], [0.25]] };
        let bytes = encode_gmm(&p);
        assert_eq!(&bytes[..4], b"GMM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 12 + 6 * 8);
        assert_eq!(f64::from_le_bytes(bytes[12..20].try_into().unwrap()), 0.25);
        assert_eq!(decode_gmm::<f64>(&bytes).unwrap(), p);
        assert!(decode_gmm::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn permuting_components_permutes_posteriors(seed in 0u64..1000, shift in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 3;
            let p = GmmParams {
                weights: array![0.2, 0.3, 0.5],
                means: Array2::from_shape_fn((k, 3), |_| rng.random_range(-2.0..2.0)),
                variances: Array2::from_shape_fn((k, 3), |_| rng.random_range(0.3..2.0)),
            };
            let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
            let q = GmmParams {
                weights: p.weights.select(Axis(0), &perm),
                means: p.means.select(Axis(0), &perm),
                variances: p.variances.select(Axis(0), &perm),
            };
            let data = Array2::from_shape_fn((8, 3), |_| rng.random_range(-3.0..3.0));
            let gp = responsibilities(&p, data.view()).unwrap().gamma;
            let gq = responsibilities(&q, data.view()).unwrap().gamma;
            for t in 0..8 {
                let row_sum: f64 = gp.row(t).sum();
                prop_assert!((row_sum - 1.0).abs() < 1e-9);
                for (i, &src) in perm.iter().enumerate() {
                    prop_assert!((gq[[t, i]] - gp[[t, src]]).abs() < 1e-12);
                }
            }
        }
    }
}
