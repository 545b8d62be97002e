//! Scale-space keypoint detection and 128-d gradient-histogram descriptors.
//!
//! Octaves are built by repeated Gaussian blurring; extrema of the difference of
//! adjacent levels (DoG) are the keypoint candidates. Candidates are refined with a
//! quadratic fit, filtered for contrast and edge response, assigned up to two dominant
//! orientations, and described by a 4x4x8 orientation histogram in the rotated frame.
//!
//! Downsampling between octaves averages 2x2 blocks rather than dropping odd pixels, so a
//! 90-degree rotation of an even-sized image commutes exactly with the pyramid.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};

use crate::dataset::GrayImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DESCRIPTOR_LEN: usize = 128;
const GRID: usize = 4;
const ORI_BINS: usize = 8;
const HIST_BINS: usize = 36;
const ORI_PEAK_RATIO: f64 = 0.8;
const ORI_SIGMA_FACTOR: f64 = 1.5;
const DESCR_SCALE_FACTOR: f64 = 3.0;
const DESCR_CLIP: f64 = 0.2;
const REFINE_MAX_OFFSET: f64 = 0.5;
/// Blur already present in a native-resolution image.
const NOMINAL_BLUR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiftParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub sigma0: f64,
    pub contrast_thresh: f64,
    pub edge_ratio: f64,
    pub max_orientations: usize,
    /// Below this many descriptors, extraction switches to the dense grid.
    pub min_keypoints: usize,
    pub dense_stride: usize,
}

impl Default for SiftParams {
    fn default() -> Self {
        SiftParams {
            octaves: 4,
            scales_per_octave: 3,
            sigma0: 1.6,
            contrast_thresh: 0.03,
            edge_ratio: 10.0,
            max_orientations: 2,
            min_keypoints: 8,
            dense_stride: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Octave<T> {
    /// `s + 3` Gaussian levels.
    pub gaussians: Vec<Array2<T>>,
    /// `s + 2` difference levels, `dog[i] = gaussians[i + 1] - gaussians[i]`.
    pub dog: Vec<Array2<T>>,
}

impl<T: Scalar> Octave<T> {
    pub fn width(&self) -> usize {
        self.gaussians[0].ncols()
    }

    pub fn height(&self) -> usize {
        self.gaussians[0].nrows()
    }
}

#[derive(Debug, Clone)]
pub struct ScaleSpace<T> {
    pub octaves: Vec<Octave<T>>,
    pub sigma0: f64,
    pub scales_per_octave: usize,
    pub width: usize,
    pub height: usize,
}

impl<T> ScaleSpace<T> {
    /// Blur of level `level` (possibly fractional) relative to its octave's pixel grid.
    pub fn octave_sigma(&self, level: f64) -> f64 {
        self.sigma0 * 2f64.powf(level / self.scales_per_octave as f64)
    }

    /// Maps octave pixel coordinates back to input-image coordinates (pixel centers).
    pub fn to_input(octave: usize, coord: f64) -> f64 {
        (coord + 0.5) * (1u64 << octave) as f64 - 0.5
    }

    pub fn to_octave(octave: usize, coord: f64) -> f64 {
        (coord + 0.5) / (1u64 << octave) as f64 - 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint<T> {
    /// Sub-pixel position in input-image pixels.
    pub x: T,
    pub y: T,
    /// Blur scale in input-image pixels.
    pub scale: T,
    /// Radians in [0, 2pi).
    pub orientation: T,
    /// |DoG| at the refined position.
    pub response: T,
    pub octave: usize,
    /// DoG level index of the detected sample.
    pub level: usize,
    pub row: usize,
    pub col: usize,
    /// Fractional level offset from the quadratic fit.
    pub level_offset: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet<T> {
    /// T x 128, one row per keypoint in `keypoints`.
    pub descriptors: Array2<T>,
    pub keypoints: Vec<Keypoint<T>>,
    pub image_id: u32,
    /// Produced by the dense-grid fallback.
    pub dense: bool,
    /// Keypoints dropped because their position left the gradient-valid interior.
    pub skipped: usize,
    /// Sparse keypoints rejected for an all-zero gradient window.
    pub rejected_flat: usize,
    /// Dense rows with an all-zero gradient window, kept as zero vectors.
    pub zero_rows: usize,
}

impl<T: Scalar> DescriptorSet<T> {
    pub fn len(&self) -> usize {
        self.descriptors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> =
        (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur<T: Scalar>(img: ArrayView2<T>, sigma: f64) -> Array2<T> {
    let (h, w) = img.dim();
    let kernel: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::of).collect();
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut tmp = Array2::<T>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (k, &kv) in kernel.iter().enumerate() {
                acc = acc + kv * img[[y, clamp(x as isize + k as isize - r, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<T>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (k, &kv) in kernel.iter().enumerate() {
                acc = acc + kv * tmp[[clamp(y as isize + k as isize - r, h), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn downsample<T: Scalar>(img: &Array2<T>) -> Array2<T> {
    let (h, w) = img.dim();
    let quarter = T::of(0.25);
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| {
        let (y0, x0) = (2 * y, 2 * x);
        (img[[y0, x0]] + img[[y0, x0 + 1]] + img[[y0 + 1, x0]] + img[[y0 + 1, x0 + 1]]) * quarter
    })
}

/// Builds `octaves` octaves of `scales_per_octave + 3` Gaussian levels each.
pub fn build_scale_space<T: Scalar>(
    img: &GrayImage<T>,
    octaves: usize,
    scales_per_octave: usize,
    sigma0: f64,
) -> Result<ScaleSpace<T>> {
    if octaves < 1 || scales_per_octave < 2 || sigma0.is_nan() || sigma0 <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "scale space needs octaves >= 1, scales >= 2, sigma0 > 0 (got {octaves}, {scales_per_octave}, {sigma0})"
        )));
    }
    let (width, height) = (img.width(), img.height());
    let min_side = 1usize.checked_shl(octaves as u32).unwrap_or(usize::MAX);
    if width < min_side || height < min_side {
        return Err(Error::InsufficientResolution { width, height, octaves });
    }

    let s = scales_per_octave as f64;
    let input_blur = NOMINAL_BLUR * img.scale_factor as f64;
    let pre = (sigma0 * sigma0 - input_blur * input_blur).max(0.0).sqrt();
    let mut base = if pre > 0.01 { gaussian_blur(img.pixels.view(), pre) } else { img.pixels.clone() };

    let sigma_at = |i: usize| sigma0 * 2f64.powf(i as f64 / s);
    let mut out = Vec::with_capacity(octaves);
    for o in 0..octaves {
        let mut gaussians = Vec::with_capacity(scales_per_octave + 3);
        gaussians.push(base);
        for i in 1..scales_per_octave + 3 {
            let (prev, cur) = (sigma_at(i - 1), sigma_at(i));
            let inc = (cur * cur - prev * prev).sqrt();
            let next = gaussian_blur(gaussians[i - 1].view(), inc);
            gaussians.push(next);
        }
        let dog = gaussians.windows(2).map(|p| &p[1] - &p[0]).collect();
        base = if o + 1 < octaves {
            downsample(&gaussians[scales_per_octave])
        } else {
            Array2::zeros((0, 0))
        };
        out.push(Octave { gaussians, dog });
    }
    Ok(ScaleSpace { octaves: out, sigma0, scales_per_octave, width, height })
}

/// True when `dog[level][[row, col]]` is strictly greater or strictly smaller than all 26
/// neighbors in the 3x3x3 block around it.
pub fn is_strict_extremum<T: Scalar>(dog: &[Array2<T>], level: usize, row: usize, col: usize) -> bool {
    let v = dog[level][[row, col]];
    let (mut is_max, mut is_min) = (true, true);
    for plane in &dog[level - 1..=level + 1] {
        for y in row - 1..=row + 1 {
            for x in col - 1..=col + 1 {
                if std::ptr::eq(plane, &dog[level]) && y == row && x == col {
                    continue;
                }
                let n = plane[[y, x]];
                is_max &= v > n;
                is_min &= v < n;
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

/// Principal-curvature test on the 2x2 spatial Hessian: passes when tr^2 / det < (r+1)^2 / r.
pub fn passes_edge_test(dxx: f64, dyy: f64, dxy: f64, edge_ratio: f64) -> bool {
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    det > 0.0 && tr * tr * edge_ratio < (edge_ratio + 1.0).powi(2) * det
}

fn solve3(h: [[f64; 3]; 3], g: [f64; 3]) -> Option<[f64; 3]> {
    let det = h[0][0] * (h[1][1] * h[2][2] - h[1][2] * h[2][1])
        - h[0][1] * (h[1][0] * h[2][2] - h[1][2] * h[2][0])
        + h[0][2] * (h[1][0] * h[2][1] - h[1][1] * h[2][0]);
    if det.abs() < 1e-15 {
        return None;
    }
    let mut x = [0.0; 3];
    for (c, xc) in x.iter_mut().enumerate() {
        let mut m = h;
        for r in 0..3 {
            m[r][c] = g[r];
        }
        let dc = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        *xc = dc / det;
    }
    Some(x)
}

/// Finds contrast- and edge-filtered DoG extrema. Orientation is left at zero; see
/// [`compute_descriptors`].
pub fn detect_keypoints<T: Scalar>(ss: &ScaleSpace<T>, contrast_thresh: f64, edge_ratio: f64) -> Vec<Keypoint<T>> {
    let s = ss.scales_per_octave;
    let prefilter = 0.5 * contrast_thresh;
    let mut kps = Vec::new();
    for (o, oct) in ss.octaves.iter().enumerate() {
        let (h, w) = (oct.height(), oct.width());
        if h < 3 || w < 3 {
            continue;
        }
        let dog = &oct.dog;
        for level in 1..=s {
            for row in 1..h - 1 {
                for col in 1..w - 1 {
                    let v = dog[level][[row, col]].f64();
                    if v.abs() < prefilter || !is_strict_extremum(dog, level, row, col) {
                        continue;
                    }
                    let at = |l: usize, y: usize, x: usize| dog[l][[y, x]].f64();
                    let dx = 0.5 * (at(level, row, col + 1) - at(level, row, col - 1));
                    let dy = 0.5 * (at(level, row + 1, col) - at(level, row - 1, col));
                    let ds = 0.5 * (at(level + 1, row, col) - at(level - 1, row, col));
                    let dxx = at(level, row, col + 1) + at(level, row, col - 1) - 2.0 * v;
                    let dyy = at(level, row + 1, col) + at(level, row - 1, col) - 2.0 * v;
                    let dss = at(level + 1, row, col) + at(level - 1, row, col) - 2.0 * v;
                    let dxy = 0.25
                        * (at(level, row + 1, col + 1) - at(level, row + 1, col - 1) - at(level, row - 1, col + 1)
                            + at(level, row - 1, col - 1));
                    let dxs = 0.25
                        * (at(level + 1, row, col + 1) - at(level + 1, row, col - 1) - at(level - 1, row, col + 1)
                            + at(level - 1, row, col - 1));
                    let dys = 0.25
                        * (at(level + 1, row + 1, col) - at(level + 1, row - 1, col) - at(level - 1, row + 1, col)
                            + at(level - 1, row - 1, col));
                    let hess = [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]];
                    let Some(off) = solve3(hess, [-dx, -dy, -ds]) else { continue };
                    // The sample stays the verified extremum; larger shifts are discarded.
                    if off.iter().any(|o| o.abs() > REFINE_MAX_OFFSET) {
                        continue;
                    }
                    let refined = v + 0.5 * (dx * off[0] + dy * off[1] + ds * off[2]);
                    if refined.abs() < contrast_thresh || !passes_edge_test(dxx, dyy, dxy, edge_ratio) {
                        continue;
                    }
                    let xo = col as f64 + off[0];
                    let yo = row as f64 + off[1];
                    let level_f = level as f64 + off[2];
                    kps.push(Keypoint {
                        x: T::of(ScaleSpace::<T>::to_input(o, xo)),
                        y: T::of(ScaleSpace::<T>::to_input(o, yo)),
                        scale: T::of(ss.octave_sigma(level_f) * (1u64 << o) as f64),
                        orientation: T::zero(),
                        response: T::of(refined.abs()),
                        octave: o,
                        level,
                        row,
                        col,
                        level_offset: T::of(off[2]),
                    });
                }
            }
        }
    }
    kps
}

fn wrap_angle(a: f64) -> f64 {
    let t = a.rem_euclid(2.0 * PI);
    if t >= 2.0 * PI {
        0.0
    } else {
        t
    }
}

/// Gradient (dx, dy) by central differences; `None` outside the interior.
fn gradient<T: Scalar>(img: &Array2<T>, row: isize, col: isize) -> Option<(f64, f64)> {
    let (h, w) = img.dim();
    if row < 1 || col < 1 || row >= h as isize - 1 || col >= w as isize - 1 {
        return None;
    }
    let (r, c) = (row as usize, col as usize);
    let dx = img[[r, c + 1]].f64() - img[[r, c - 1]].f64();
    let dy = img[[r + 1, c]].f64() - img[[r - 1, c]].f64();
    Some((dx, dy))
}

/// Dominant orientations from a smoothed 36-bin histogram, strongest first.
fn orientations<T: Scalar>(img: &Array2<T>, row: f64, col: f64, sigma_oct: f64, max_peaks: usize) -> Vec<f64> {
    let sw = ORI_SIGMA_FACTOR * sigma_oct;
    let radius = (3.0 * sw).round() as isize;
    let (cr, cc) = (row.round() as isize, col.round() as isize);
    let mut hist = [0.0f64; HIST_BINS];
    for i in -radius..=radius {
        for j in -radius..=radius {
            let Some((dx, dy)) = gradient(img, cr + i, cc + j) else { continue };
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let weight = (-((i * i + j * j) as f64) / (2.0 * sw * sw)).exp();
            let theta = wrap_angle(dy.atan2(dx));
            let bin = ((theta / (2.0 * PI) * HIST_BINS as f64).round() as usize) % HIST_BINS;
            hist[bin] += weight * mag;
        }
    }
    let n = HIST_BINS;
    let smooth: Vec<f64> = (0..n)
        .map(|b| {
            (hist[(b + n - 2) % n] + hist[(b + 2) % n]) / 16.0
                + (hist[(b + n - 1) % n] + hist[(b + 1) % n]) * 4.0 / 16.0
                + hist[b] * 6.0 / 16.0
        })
        .collect();
    let max = smooth.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut peaks: Vec<(f64, f64)> = (0..n)
        .filter_map(|b| {
            let (l, c, r) = (smooth[(b + n - 1) % n], smooth[b], smooth[(b + 1) % n]);
            if c > l && c > r && c >= ORI_PEAK_RATIO * max {
                let interp = 0.5 * (l - r) / (l - 2.0 * c + r);
                Some((c, wrap_angle(2.0 * PI * (b as f64 + interp) / n as f64)))
            } else {
                None
            }
        })
        .collect();
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)));
    peaks.truncate(max_peaks);
    peaks.into_iter().map(|(_, a)| a).collect()
}

/// Normalizes to unit length, clips entries at 0.2 and renormalizes. Returns `false`
/// for an all-zero vector, which is left untouched.
pub fn normalize_and_clip(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x / norm).min(DESCR_CLIP);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// Raw (unnormalized) 4x4x8 histogram in the keypoint frame.
fn raw_descriptor<T: Scalar>(img: &Array2<T>, row: f64, col: f64, sigma_oct: f64, orientation: f64) -> [f64; DESCRIPTOR_LEN] {
    let hist_width = DESCR_SCALE_FACTOR * sigma_oct;
    let d = GRID as f64;
    let radius = (hist_width * std::f64::consts::SQRT_2 * (d + 1.0) * 0.5).round() as isize;
    let (cos_t, sin_t) = (orientation.cos(), orientation.sin());
    let (cr, cc) = (row.round() as isize, col.round() as isize);
    let (fr, fc) = (row - cr as f64, col - cc as f64);
    let weight_sigma = 0.5 * d;
    let mut hist = [0.0f64; DESCRIPTOR_LEN];
    for i in -radius..=radius {
        for j in -radius..=radius {
            // Offset from the sub-pixel center, rotated by -orientation into the keypoint frame.
            let (dy, dx) = (i as f64 - fr, j as f64 - fc);
            let u = (dx * cos_t + dy * sin_t) / hist_width;
            let v = (-dx * sin_t + dy * cos_t) / hist_width;
            let cbin = u + 0.5 * d - 0.5;
            let rbin = v + 0.5 * d - 0.5;
            if cbin <= -1.0 || cbin >= d || rbin <= -1.0 || rbin >= d {
                continue;
            }
            let Some((gx, gy)) = gradient(img, cr + i, cc + j) else { continue };
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let w = (-(u * u + v * v) / (2.0 * weight_sigma * weight_sigma)).exp() * mag;
            let obin = wrap_angle(gy.atan2(gx) - orientation) / (2.0 * PI) * ORI_BINS as f64;

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (dr, dc, dob) = (rbin - r0, cbin - c0, obin - o0);
            for (ri, wr) in [(r0 as isize, 1.0 - dr), (r0 as isize + 1, dr)] {
                if ri < 0 || ri >= GRID as isize {
                    continue;
                }
                for (ci, wc) in [(c0 as isize, 1.0 - dc), (c0 as isize + 1, dc)] {
                    if ci < 0 || ci >= GRID as isize {
                        continue;
                    }
                    for (oi, wo) in [(o0 as usize, 1.0 - dob), (o0 as usize + 1, dob)] {
                        let oi = oi % ORI_BINS;
                        let idx = (ri as usize * GRID + ci as usize) * ORI_BINS + oi;
                        hist[idx] += w * wr * wc * wo;
                    }
                }
            }
        }
    }
    hist
}

/// Assigns orientations (duplicating keypoints for secondary peaks) and computes
/// normalized descriptors. Keypoints in flat regions are rejected.
pub fn compute_descriptors<T: Scalar>(ss: &ScaleSpace<T>, kps: &[Keypoint<T>], max_orientations: usize) -> DescriptorSet<T> {
    let mut rows: Vec<[f64; DESCRIPTOR_LEN]> = Vec::new();
    let mut out_kps = Vec::new();
    let (mut skipped, mut rejected_flat) = (0, 0);
    for kp in kps {
        let Some(oct) = ss.octaves.get(kp.octave) else {
            skipped += 1;
            continue;
        };
        let img = &oct.gaussians[kp.level.min(oct.gaussians.len() - 1)];
        let row = ScaleSpace::<T>::to_octave(kp.octave, kp.y.f64());
        let col = ScaleSpace::<T>::to_octave(kp.octave, kp.x.f64());
        let (h, w) = img.dim();
        if row < 1.0 || col < 1.0 || row > h as f64 - 2.0 || col > w as f64 - 2.0 {
            skipped += 1;
            continue;
        }
        let sigma_oct = ss.octave_sigma(kp.level as f64 + kp.level_offset.f64());
        let oris = orientations(img, row, col, sigma_oct, max_orientations);
        if oris.is_empty() {
            rejected_flat += 1;
            continue;
        }
        for ori in oris {
            let mut d = raw_descriptor(img, row, col, sigma_oct, ori);
            if !normalize_and_clip(&mut d) {
                rejected_flat += 1;
                continue;
            }
            rows.push(d);
            out_kps.push(Keypoint { orientation: T::of(ori), ..kp.clone() });
        }
    }
    DescriptorSet {
        descriptors: to_matrix(&rows),
        keypoints: out_kps,
        image_id: 0,
        dense: false,
        skipped,
        rejected_flat,
        zero_rows: 0,
    }
}

fn to_matrix<T: Scalar>(rows: &[[f64; DESCRIPTOR_LEN]]) -> Array2<T> {
    Array2::from_shape_fn((rows.len(), DESCRIPTOR_LEN), |(r, c)| T::of(rows[r][c]))
}

/// Descriptors on a regular grid at the base scale with orientation fixed to 0. Flat
/// windows yield zero rows so the row count always equals the grid size.
pub fn dense_descriptors<T: Scalar>(ss: &ScaleSpace<T>, stride: usize) -> DescriptorSet<T> {
    let img = &ss.octaves[0].gaussians[0];
    let (h, w) = img.dim();
    let mut rows = Vec::new();
    let mut kps = Vec::new();
    let mut zero_rows = 0;
    for row in (stride / 2..h).step_by(stride) {
        for col in (stride / 2..w).step_by(stride) {
            let mut d = raw_descriptor(img, row as f64, col as f64, ss.sigma0, 0.0);
            if !normalize_and_clip(&mut d) {
                zero_rows += 1;
            }
            rows.push(d);
            kps.push(Keypoint {
                x: T::of_usize(col),
                y: T::of_usize(row),
                scale: T::of(ss.sigma0),
                orientation: T::zero(),
                response: T::zero(),
                octave: 0,
                level: 0,
                row,
                col,
                level_offset: T::zero(),
            });
        }
    }
    DescriptorSet {
        descriptors: to_matrix(&rows),
        keypoints: kps,
        image_id: 0,
        dense: true,
        skipped: 0,
        rejected_flat: 0,
        zero_rows,
    }
}

/// Full pipeline with dense fallback for low-texture images.
pub fn extract_sift<T: Scalar>(img: &GrayImage<T>, params: &SiftParams) -> Result<DescriptorSet<T>> {
    let ss = build_scale_space(img, params.octaves, params.scales_per_octave, params.sigma0)?;
    let kps = detect_keypoints(&ss, params.contrast_thresh, params.edge_ratio);
    let set = compute_descriptors(&ss, &kps, params.max_orientations);
    if set.len() < params.min_keypoints {
        return Ok(dense_descriptors(&ss, params.dense_stride));
    }
    Ok(set)
}
