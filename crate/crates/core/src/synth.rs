//! Synthetic images for tests, demos and smoke runs without the real corpus.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{write_batch, Image, Split, SIDE};
use crate::error::Result;

/// Class 0: a few soft blobs. Class 1: an oriented sinusoidal grating.
/// Both get mild pixel noise and random colors.
pub fn textured_image(class: u8, id: u32, rng: &mut ChaCha8Rng) -> Image {
    let noise = Normal::new(0.0, 6.0).expect("valid sigma");
    let fg: [f64; 3] = [rng.random_range(120.0..255.0), rng.random_range(120.0..255.0), rng.random_range(120.0..255.0)];
    let bg: [f64; 3] = [rng.random_range(0.0..80.0), rng.random_range(0.0..80.0), rng.random_range(0.0..80.0)];
    let mut field = Array2::<f64>::zeros((SIDE, SIDE));
    if class == 0 {
        let n = rng.random_range(2..5);
        for _ in 0..n {
            let cx = rng.random_range(6.0..26.0);
            let cy = rng.random_range(6.0..26.0);
            let s: f64 = rng.random_range(1.5..3.5);
            for ((y, x), v) in field.indexed_iter_mut() {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                *v += (-d2 / (2.0 * s * s)).exp();
            }
        }
        field.mapv_inplace(|v| v.min(1.0));
    } else {
        let theta = rng.random_range(0.0..PI);
        let period = rng.random_range(4.0..7.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let (c, s) = (theta.cos(), theta.sin());
        for ((y, x), v) in field.indexed_iter_mut() {
            let t = (x as f64 * c + y as f64 * s) * 2.0 * PI / period + phase;
            *v = 0.5 + 0.5 * t.sin();
        }
    }
    let px: Vec<[u8; 3]> = field
        .iter()
        .map(|&a| {
            let mut out = [0u8; 3];
            for ch in 0..3 {
                let v = bg[ch] + a * (fg[ch] - bg[ch]) + noise.sample(rng);
                out[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
            out
        })
        .collect();
    Image::from_rgb(id, class, |x, y| px[y * SIDE + x])
}

/// `per_class` images of each class, interleaved, ids starting at `first_id`.
pub fn textured_split(per_class: usize, seed: u64, first_id: u32) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2 * per_class).map(|i| textured_image((i % 2) as u8, first_id + i as u32, &mut rng)).collect()
}

/// Writes a two-class corpus in the CIFAR-10 binary layout: all training images in
/// `data_batch_1.bin`, the test images in `test_batch.bin`.
pub fn write_textured_corpus(dir: &Path, train_per_class: usize, test_per_class: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    write_batch(&dir.join(Split::Train.files()[0]), &textured_split(train_per_class, seed, 0))?;
    write_batch(&dir.join(Split::Test.files()[0]), &textured_split(test_per_class, seed ^ 0x9e37_79b9, 0))
}

/// Grayscale field of `blobs` Gaussian blobs with random centers, widths and signs on a
/// mid-gray background, values in [0, 1].
pub fn blob_field(size: usize, blobs: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = Array2::from_elem((size, size), 0.5);
    let margin = size as f64 * 0.15;
    for _ in 0..blobs {
        let cx = rng.random_range(margin..size as f64 - margin);
        let cy = rng.random_range(margin..size as f64 - margin);
        let s: f64 = rng.random_range(1.5..4.0);
        let amp = if rng.random_bool(0.5) { 0.4 } else { -0.4 } * rng.random_range(0.5..1.0);
        for ((y, x), v) in field.indexed_iter_mut() {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            *v += amp * (-d2 / (2.0 * s * s)).exp();
        }
    }
    field.mapv_inplace(|v| v.clamp(0.0, 1.0));
    field
}

/// Counter-clockwise quarter turn: `out[[r, c]] = a[[c, w - 1 - r]]`.
pub fn rotate90<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((w, h), |(r, c)| a[[c, w - 1 - r]].clone())
}

/// Where pixel-center coordinate `(x, y)` of a width-`w` image lands after [`rotate90`].
pub fn rotate90_point(x: f64, y: f64, w: usize) -> (f64, f64) {
    (y, (w - 1) as f64 - x)
}
