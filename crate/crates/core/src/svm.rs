//! Linear L1-loss SVMs trained by dual coordinate descent, combined one-vs-rest.
//!
//! The bias is folded into the weight vector through a constant feature of value 1, so
//! each binary problem is
//!
//! ```text
//! max_a  sum_i a_i - 1/2 || sum_i a_i y_i [x_i; 1] ||^2    s.t. 0 <= a_i <= C
//! ```
//!
//! solved one coordinate at a time in a seeded random order per epoch.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_C: f64 = 1.0;
pub const DEFAULT_EPOCHS: usize = 1000;
pub const STOP_TOL: f64 = 1e-3;
pub const DEFAULT_C_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
const BIAS_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<T> {
    pub w: Array1<T>,
    pub b: T,
    /// Regularization trade-off used in training; zero when loaded from a model file.
    pub c: T,
    pub feature_tag: String,
}

impl<T: Scalar> LinearModel<T> {
    pub fn decision(&self, x: ArrayView1<T>) -> T {
        self.w.dot(&x) + self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassModel<T> {
    pub models: Vec<LinearModel<T>>,
    /// Class label for each binary model, in model order.
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { c: DEFAULT_C, epochs: DEFAULT_EPOCHS, seed: 0 }
    }
}

/// Full output of a binary training run.
#[derive(Debug, Clone)]
pub struct BinaryFit<T> {
    pub model: LinearModel<T>,
    pub alpha: Vec<f64>,
    /// Dual objective after each epoch, starting with the all-zero point.
    pub dual_objective: Vec<f64>,
    pub epochs_run: usize,
    pub converged: bool,
}

fn check_labels(y: &[i8]) -> Result<()> {
    if y.iter().any(|&v| v != 1 && v != -1) {
        return Err(Error::InvalidArgument("binary labels must be +1 or -1".into()));
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::DegenerateLabels(format!("{pos} positive of {} samples; both classes required", y.len())));
    }
    Ok(())
}

/// Dual coordinate descent with the full trace and final dual variables.
pub fn train_binary_detailed<T: Scalar>(data: ArrayView2<T>, y: &[i8], opts: &TrainOptions) -> Result<BinaryFit<T>> {
    let (n, d) = data.dim();
    if y.len() != n {
        return Err(Error::LengthMismatch { left: n, right: y.len() });
    }
    check_labels(y)?;
    if opts.c.is_nan() || opts.c <= 0.0 {
        return Err(Error::InvalidArgument(format!("C must be positive, got {}", opts.c)));
    }
    let c = opts.c;
    let x: Vec<Vec<f64>> = data.axis_iter(Axis(0)).map(|r| r.iter().map(|v| v.f64()).collect()).collect();
    let qii: Vec<f64> = x.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>() + BIAS_SCALE * BIAS_SCALE).collect();

    // w holds the D weights followed by the bias weight.
    let mut w = vec![0.0f64; d + 1];
    let mut alpha = vec![0.0f64; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dual = |alpha: &[f64], w: &[f64]| alpha.iter().sum::<f64>() - 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let mut trace = vec![0.0];
    let mut converged = false;
    let mut epochs_run = 0;

    for _ in 0..opts.epochs {
        epochs_run += 1;
        order.shuffle(&mut rng);
        let mut max_violation = 0.0f64;
        for &i in &order {
            let yi = y[i] as f64;
            let xi = &x[i];
            let wx: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d] * BIAS_SCALE;
            let g = yi * wx - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, c);
                let delta = (alpha[i] - old) * yi;
                if delta != 0.0 {
                    for (wj, xj) in w.iter_mut().zip(xi) {
                        *wj += delta * xj;
                    }
                    w[d] += delta * BIAS_SCALE;
                }
            }
        }
        trace.push(dual(&alpha, &w));
        if max_violation < STOP_TOL {
            converged = true;
            break;
        }
    }
    let model = LinearModel {
        w: Array1::from_iter(w[..d].iter().map(|&v| T::of(v))),
        b: T::of(w[d] * BIAS_SCALE),
        c: T::of(c),
        feature_tag: String::new(),
    };
    Ok(BinaryFit { model, alpha, dual_objective: trace, epochs_run, converged })
}

pub fn train_binary<T: Scalar>(data: ArrayView2<T>, y: &[i8], opts: &TrainOptions) -> Result<LinearModel<T>> {
    Ok(train_binary_detailed(data, y, opts)?.model)
}

/// One class-vs-rest model per entry of `classes`; `labels[i]` indexes into `classes`.
pub fn train_ovr<T: Scalar>(data: ArrayView2<T>, labels: &[usize], classes: &[u32], opts: &TrainOptions) -> Result<MulticlassModel<T>> {
    if labels.len() != data.nrows() {
        return Err(Error::LengthMismatch { left: data.nrows(), right: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
        return Err(Error::InvalidArgument(format!("label index {bad} outside class table of {}", classes.len())));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateLabels(format!("{} distinct class present; at least 2 required", distinct.len())));
    }
    let models = (0..classes.len())
        .into_par_iter()
        .map(|k| {
            let y: Vec<i8> = labels.iter().map(|&l| if l == k { 1 } else { -1 }).collect();
            let o = TrainOptions { seed: opts.seed.wrapping_add(k as u64), ..*opts };
            train_binary(data, &y, &o).map_err(|e| match e {
                Error::DegenerateLabels(m) => Error::DegenerateLabels(format!("class {}: {m}", classes[k])),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MulticlassModel { models, labels: classes.to_vec() })
}

impl<T: Scalar> MulticlassModel<T> {
    pub fn num_classes(&self) -> usize {
        self.models.len()
    }

    pub fn dim(&self) -> usize {
        self.models.first().map_or(0, |m| m.w.len())
    }

    pub fn with_tag(mut self, tag: &str) -> Self {
        for m in &mut self.models {
            m.feature_tag = tag.to_string();
        }
        self
    }
}

/// w_k . x + b_k for every class.
pub fn decision_values<T: Scalar>(model: &MulticlassModel<T>, x: ArrayView1<T>) -> Result<Vec<T>> {
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), found: x.len() });
    }
    Ok(model.models.iter().map(|m| m.decision(x)).collect())
}

/// Position of the first maximum.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Class index (into the label table) with the largest decision value; ties go to the
/// lowest index.
pub fn predict_index<T: Scalar>(model: &MulticlassModel<T>, x: ArrayView1<T>) -> Result<usize> {
    Ok(argmax(&decision_values(model, x)?))
}

pub fn predict<T: Scalar>(model: &MulticlassModel<T>, x: ArrayView1<T>) -> Result<u32> {
    Ok(model.labels[predict_index(model, x)?])
}

/// Scales every row to unit L2 norm; zero rows are left alone.
pub fn l2_normalize_rows<T: Scalar>(data: &mut Array2<T>) {
    for mut row in data.axis_iter_mut(Axis(0)) {
        let n = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if n > 0.0 {
            let inv = T::of(1.0 / n);
            row.mapv_inplace(|v| v * inv);
        }
    }
}

/// Picks C from `grid` by k-fold cross-validated accuracy; ties favour the smaller C.
pub fn select_c<T: Scalar>(
    data: ArrayView2<T>,
    labels: &[usize],
    classes: &[u32],
    grid: &[f64],
    folds: usize,
    opts: &TrainOptions,
) -> Result<f64> {
    let n = data.nrows();
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty C grid".into()));
    }
    if grid.len() == 1 || folds < 2 || n < folds {
        return Ok(grid[0]);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; n];
        for (pos, &i) in idx.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for &c in &sorted {
        let mut correct = 0usize;
        let mut total = 0usize;
        for f in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let xt = data.select(Axis(0), &train);
            let yt: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let model = match train_ovr(xt.view(), &yt, classes, &TrainOptions { c, ..*opts }) {
                Ok(m) => m,
                // A fold missing a class cannot score this C.
                Err(Error::DegenerateLabels(_)) => continue,
                Err(e) => return Err(e),
            };
            for &i in &test {
                total += 1;
                if predict_index(&model, data.row(i))? == labels[i] {
                    correct += 1;
                }
            }
        }
        let acc = if total > 0 { correct as f64 / total as f64 } else { f64::NEG_INFINITY };
        if acc > best.0 {
            best = (acc, c);
        }
    }
    Ok(best.1)
}

const SVM_MAGIC: &[u8; 4] = b"SVMK";

pub fn encode_svm<T: Scalar>(model: &MulticlassModel<T>) -> Vec<u8> {
    let (k, d) = (model.num_classes(), model.dim());
    let mut w = Writer::with_capacity(12 + 8 * k * (d + 1) + 4 * k);
    w.bytes(SVM_MAGIC);
    w.u32(k as u32);
    w.u32(d as u32);
    for m in &model.models {
        w.f64s(m.w.iter().map(|v| v.f64()));
        w.f64(m.b.f64());
    }
    for &l in &model.labels {
        w.u32(l);
    }
    w.buf
}

pub fn decode_svm<T: Scalar>(bytes: &[u8]) -> Result<MulticlassModel<T>> {
    let mut r = Reader::new(bytes);
    r.magic(SVM_MAGIC)?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let expected = 12 + 8 * (k as u64) * (d as u64 + 1) + 4 * k as u64;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated { expected, found: bytes.len() as u64 });
    }
    let mut models = Vec::with_capacity(k);
    for _ in 0..k {
        let w = Array1::from_iter(r.f64s(d)?.into_iter().map(T::of));
        let b = T::of(r.f64()?);
        models.push(LinearModel { w, b, c: T::zero(), feature_tag: String::new() });
    }
    let labels = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let mut seen = labels.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != labels.len() {
        return Err(Error::Format("duplicate class labels in SVMK table".into()));
    }
    Ok(MulticlassModel { models, labels })
}

pub fn write_svm<T: Scalar>(model: &MulticlassModel<T>, path: &Path) -> Result<()> {
    Writer { buf: encode_svm(model) }.write_to(path)
}

pub fn read_svm<T: Scalar>(path: &Path) -> Result<MulticlassModel<T>> {
    decode_svm(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    /// Two clouds separated by a slab of width 2 around x = 0.
    fn separable(n_each: usize, seed: u64) -> (Array2<f64>, Vec<i8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (sign, label) in [(1.0, 1i8), (-1.0, -1i8)] {
            for _ in 0..n_each {
                rows.push(sign * rng.random_range(1.05..3.0));
                rows.push(rng.random_range(-0.5..0.5));
                y.push(label);
            }
        }
        (Array2::from_shape_vec((2 * n_each, 2), rows).unwrap(), y)
    }

    fn three_class(seed: u64) -> (Array2<f64>, Vec<usize>) {
        let centers = [[0.0, 4.0], [4.0, -2.0], [-4.0, -2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (k, c) in centers.iter().enumerate() {
            for _ in 0..30 {
                rows.push(c[0] + rng.random_range(-1.0..1.0));
                rows.push(c[1] + rng.random_range(-1.0..1.0));
                labels.push(k);
            }
        }
        (Array2::from_shape_vec((90, 2), rows).unwrap(), labels)
    }

    #[test]
    fn separable_clouds_full_accuracy_and_margin() {
        let (x, y) = separable(40, 1);
        let opts = TrainOptions { c: 100.0, ..Default::default() };
        let fit = train_binary_detailed(x.view(), &y, &opts).unwrap();
        assert!(fit.converged);
        let m = &fit.model;
        let norm = m.w.dot(&m.w).sqrt();
        let mut min_margin = f64::INFINITY;
        for (row, &yi) in x.rows().into_iter().zip(&y) {
            let f = m.decision(row);
            assert!(f * yi as f64 > 0.0);
            min_margin = min_margin.min(f * yi as f64 / norm);
        }
        // Known gap between the clouds is 2.
        assert!(min_margin >= 1.0, "{min_margin}");
        for w in fit.dual_objective.windows(2) {
            assert!(w[1] >= w[0] - 1e-10);
        }
    }

    #[test]
    fn flipped_labels_negate_weights() {
        let (x, y) = separable(20, 2);
        let flipped: Vec<i8> = y.iter().map(|v| -v).collect();
        let opts = TrainOptions { seed: 9, ..Default::default() };
        let a = train_binary(x.view(), &y, &opts).unwrap();
        let b = train_binary(x.view(), &flipped, &opts).unwrap();
        for (p, q) in a.w.iter().zip(b.w.iter()) {
            assert!((p + q).abs() < 1e-6);
        }
        assert!((a.b + b.b).abs() < 1e-6);
        assert_eq!(a, train_binary(x.view(), &y, &opts).unwrap());
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = array![[1.0], [2.0]];
        assert!(matches!(train_binary(x.view(), &[1, 1], &TrainOptions::default()), Err(Error::DegenerateLabels(_))));
        assert!(train_binary(x.view(), &[1, -1], &TrainOptions { c: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn ovr_three_classes() {
        let (x, labels) = three_class(3);
        let m = train_ovr(x.view(), &labels, &[10, 20, 30], &TrainOptions::default()).unwrap();
        assert_eq!(m.num_classes(), 3);
        for (row, &l) in x.rows().into_iter().zip(&labels) {
            assert_eq!(predict_index(&m, row).unwrap(), l);
            assert_eq!(predict(&m, row).unwrap(), [10, 20, 30][l]);
        }
    }

    #[test]
    fn ovr_missing_class_is_degenerate() {
        let (x, labels) = three_class(3);
        let err = train_ovr(x.view(), &labels, &[0, 1, 2, 3], &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateLabels(m) if m.contains("class 3")));
    }

    #[test]
    fn decision_values_are_affine() {
        let m = MulticlassModel {
            models: (1..=3)
                .map(|b| LinearModel { w: array![0.0, 0.0], b: b as f64, c: 1.0, feature_tag: String::new() })
                .collect(),
            labels: vec![1, 2, 3],
        };
        assert_eq!(decision_values(&m, array![5.0, -1.0].view()).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(predict(&m, array![0.0, 0.0].view()).unwrap(), 3);
        assert!(decision_values(&m, array![1.0].view()).is_err());

        let lin = MulticlassModel {
            models: vec![
                LinearModel { w: array![1.0, 2.0], b: 0.0, c: 1.0, feature_tag: String::new() },
                LinearModel { w: array![-3.0, 0.5], b: 0.0, c: 1.0, feature_tag: String::new() },
            ],
            labels: vec![0, 1],
        };
        let x = array![0.3, -0.7];
        let v1: Vec<f64> = decision_values(&lin, x.view()).unwrap();
        let v2 = decision_values(&lin, (&x * 2.0).view()).unwrap();
        for (a, b) in v1.iter().zip(&v2) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_break_to_lowest_index_and_labels_permute() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let make = |labels: Vec<u32>| MulticlassModel {
            models: [0.5, 2.0, 1.0]
                .iter()
                .map(|&b| LinearModel { w: array![0.0], b, c: 1.0, feature_tag: String::new() })
                .collect(),
            labels,
        };
        assert_eq!(predict(&make(vec![7, 8, 9]), array![0.0].view()).unwrap(), 8);
        assert_eq!(predict(&make(vec![9, 7, 8]), array![0.0].view()).unwrap(), 7);
    }

    #[test]
    fn kkt_conditions_hold_at_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((80, 3), |_| rng.random_range(-1.0..1.0));
        let y: Vec<i8> = x.rows().into_iter().map(|r| if r[0] + 0.3 * r[1] > 0.1 { 1 } else { -1 }).collect();
        let fit = train_binary_detailed(x.view(), &y, &TrainOptions { c: 1.0, ..Default::default() }).unwrap();
        assert!(fit.converged);
        for (i, row) in x.rows().into_iter().enumerate() {
            let margin = y[i] as f64 * fit.model.decision(row);
            if fit.alpha[i] > 0.0 {
                assert!(margin <= 1.0 + 1e-2, "sv {i}: {margin}");
            } else {
                assert!(margin >= 1.0 - 1e-2, "non-sv {i}: {margin}");
            }
        }
    }

    #[test]
    fn c_selection_runs_over_grid() {
        let (x, labels) = three_class(5);
        let c = select_c(x.view(), &labels, &[0, 1, 2], &DEFAULT_C_GRID, 3, &TrainOptions::default()).unwrap();
        assert!(DEFAULT_C_GRID.contains(&c));
    }

    #[test]
    fn model_file_layout() {
        let (x, labels) = three_class(6);
        let m = train_ovr(x.view(), &labels, &[4, 5, 6], &TrainOptions::default()).unwrap();
        let bytes = encode_svm(&m);
        assert_eq!(&bytes[..4], b"SVMK");
        assert_eq!(bytes.len(), 12 + 3 * 3 * 8 + 3 * 4);
        assert_eq!(&bytes[bytes.len() - 4..], &6u32.to_le_bytes());
        let back: MulticlassModel<f64> = decode_svm(&bytes).unwrap();
        assert_eq!(back.labels, m.labels);
        for (a, b) in back.models.iter().zip(&m.models) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
    }
}
