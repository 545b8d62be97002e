//! CIFAR-10 binary corpus loading and SIFT preprocessing.
//!
//! A batch file is a flat sequence of 3073-byte records: one label byte followed by
//! 3072 pixel bytes stored channel-planar (1024 red, 1024 green, 1024 blue), each
//! plane row-major over the 32x32 grid.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SIDE: usize = 32;
pub const PIXELS: usize = SIDE * SIDE * 3;
pub const RECORD_LEN: usize = PIXELS + 1;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILES: [&str; 1] = ["test_batch.bin"];

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn files(self) -> &'static [&'static str] {
        match self {
            Split::Train => &TRAIN_FILES,
            Split::Test => &TEST_FILES,
        }
    }

    /// Size of the split in the complete corpus.
    pub fn standard_len(self) -> usize {
        match self {
            Split::Train => 50_000,
            Split::Test => 10_000,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    /// Channel-planar R, G, B planes, each 32x32 row-major.
    pub pixels: Box<[u8; PIXELS]>,
    pub label: u8,
    /// Position within the split, in file order.
    pub id: u32,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image").field("id", &self.id).field("label", &self.label).finish()
    }
}

impl Image {
    pub fn from_rgb(id: u32, label: u8, rgb: impl Fn(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Box::new([0u8; PIXELS]);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let [r, g, b] = rgb(x, y);
                let i = y * SIDE + x;
                pixels[i] = r;
                pixels[SIDE * SIDE + i] = g;
                pixels[2 * SIDE * SIDE + i] = b;
            }
        }
        Image { pixels, label, id }
    }

    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = y * SIDE + x;
        [self.pixels[i], self.pixels[SIDE * SIDE + i], self.pixels[2 * SIDE * SIDE + i]]
    }

    /// Serializes back into the 3073-byte record layout.
    pub fn to_record(&self) -> [u8; RECORD_LEN] {
        let mut rec = [0u8; RECORD_LEN];
        rec[0] = self.label;
        rec[1..].copy_from_slice(&self.pixels[..]);
        rec
    }
}

/// Parses one batch file's bytes; ids continue from `first_id`.
pub fn parse_batch(bytes: &[u8], first_id: u32, path: &Path) -> Result<Vec<Image>> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::MalformedCorpus { path: path.to_path_buf(), len: bytes.len() as u64 });
    }
    bytes
        .chunks_exact(RECORD_LEN)
        .enumerate()
        .map(|(index, rec)| {
            let label = rec[0];
            if label as usize >= NUM_CLASSES {
                return Err(Error::CorruptRecord { path: path.to_path_buf(), index, label });
            }
            let pixels: Box<[u8; PIXELS]> =
                rec[1..].to_vec().into_boxed_slice().try_into().expect("record length checked");
            Ok(Image { pixels, label, id: first_id + index as u32 })
        })
        .collect()
}

/// Loads every batch file of `split` present under `dir`, in canonical file order.
///
/// The complete corpus has 50,000 training and 10,000 test images; partial corpora
/// (a subset of the training batches) load without error.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Vec<Image>> {
    let mut images = Vec::new();
    let mut found = false;
    for name in split.files() {
        let path = dir.join(name);
        if !path.is_file() {
            continue;
        }
        found = true;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        images.extend(parse_batch(&bytes, images.len() as u32, &path)?);
    }
    if !found {
        return Err(Error::MissingCorpus { dir: dir.to_path_buf(), split: split.as_str() });
    }
    Ok(images)
}

/// Writes images as a single batch file in the CIFAR-10 binary layout.
pub fn write_batch(path: &Path, images: &[Image]) -> Result<()> {
    let mut buf = Vec::with_capacity(images.len() * RECORD_LEN);
    for img in images {
        buf.extend_from_slice(&img.to_record());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Resolves the dataset directory: explicit flag first, then `ENSVIS_DATA_DIR`.
pub fn resolve_data_dir(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os("ENSVIS_DATA_DIR").map(PathBuf::from))
}

/// First `per_class` images of each class, keeping file order.
pub fn subset_per_class(images: &[Image], per_class: usize) -> Vec<Image> {
    let mut taken = [0usize; NUM_CLASSES];
    images
        .iter()
        .filter(|img| {
            let slot = &mut taken[img.label as usize];
            *slot += 1;
            *slot <= per_class
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Upscale {
    X1 = 1,
    #[default]
    X2 = 2,
    X4 = 4,
}

impl Upscale {
    pub fn factor(self) -> usize {
        self as usize
    }
}

impl TryFrom<usize> for Upscale {
    type Error = Error;

    fn try_from(v: usize) -> Result<Self> {
        match v {
            1 => Ok(Upscale::X1),
            2 => Ok(Upscale::X2),
            4 => Ok(Upscale::X4),
            _ => Err(Error::InvalidArgument(format!("upscale must be 1, 2 or 4, got {v}"))),
        }
    }
}

/// Single-channel image with intensities in [0, 1], indexed `[[row, col]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage<T> {
    pub pixels: Array2<T>,
    pub scale_factor: usize,
}

impl<T: Scalar> GrayImage<T> {
    pub fn new(pixels: Array2<T>, scale_factor: usize) -> Self {
        GrayImage { pixels, scale_factor }
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }
}

/// BT.601 luma, scaled to [0, 1].
pub fn luminance<T: Scalar>(img: &Image) -> Array2<T> {
    let denom = T::of(255_000.0);
    Array2::from_shape_fn((SIDE, SIDE), |(y, x)| {
        let [r, g, b] = img.rgb(x, y);
        // Integer weights keep white at exactly 1 and pure red at exactly 0.299.
        let luma = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
        T::of(luma as f64) / denom
    })
}

/// Grayscale conversion followed by Catmull-Rom upsampling, clamped to [0, 1].
pub fn preprocess<T: Scalar>(img: &Image, upscale: Upscale) -> GrayImage<T> {
    let gray = luminance::<T>(img);
    let up = upsample_bicubic(&gray, upscale.factor());
    GrayImage { pixels: up.mapv(|v| v.max(T::zero()).min(T::one())), scale_factor: upscale.factor() }
}

fn catmull_rom<T: Scalar>(t: T) -> [T; 4] {
    // a = -0.5 cubic convolution weights for taps at offsets -1, 0, 1, 2.
    let half = T::of(0.5);
    let t2 = t * t;
    let t3 = t2 * t;
    [
        half * (-t3 + T::of(2.0) * t2 - t),
        half * (T::of(3.0) * t3 - T::of(5.0) * t2 + T::of(2.0)),
        half * (-T::of(3.0) * t3 + T::of(4.0) * t2 + t),
        half * (t3 - t2),
    ]
}

/// Pixel-center aligned bicubic resampling by an integer factor with edge clamping.
pub fn upsample_bicubic<T: Scalar>(src: &Array2<T>, factor: usize) -> Array2<T> {
    if factor == 1 {
        return src.clone();
    }
    let (h, w) = src.dim();
    let f = T::of_usize(factor);
    let half = T::of(0.5);
    let taps = |o: usize| -> (isize, [T; 4]) {
        let pos = (T::of_usize(o) + half) / f - half;
        let base = pos.floor();
        let weights = catmull_rom(pos - base);
        (base.to_isize().expect("finite coordinate"), weights)
    };
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    // Separable: columns first, then rows.
    let mut tmp = Array2::<T>::zeros((h, w * factor));
    for ox in 0..w * factor {
        let (bx, wx) = taps(ox);
        for y in 0..h {
            let mut acc = T::zero();
            for (k, wk) in wx.iter().enumerate() {
                acc = acc + *wk * src[[y, clamp(bx - 1 + k as isize, w)]];
            }
            tmp[[y, ox]] = acc;
        }
    }
    let mut out = Array2::<T>::zeros((h * factor, w * factor));
    for oy in 0..h * factor {
        let (by, wy) = taps(oy);
        for x in 0..w * factor {
            let mut acc = T::zero();
            for (k, wk) in wy.iter().enumerate() {
                acc = acc + *wk * tmp[[clamp(by - 1 + k as isize, h), x]];
            }
            out[[oy, x]] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(r: u8, g: u8, b: u8) -> Image {
        Image::from_rgb(0, 3, |_, _| [r, g, b])
    }

    #[test]
    fn batch_of_ten_thousand_records() {
        let bytes = vec![0u8; 10_000 * RECORD_LEN];
        assert_eq!(bytes.len(), 30_730_000);
        let imgs = parse_batch(&bytes, 0, Path::new("x")).unwrap();
        assert_eq!(imgs.len(), 10_000);
        assert_eq!(imgs[9_999].id, 9_999);
    }

    #[test]
    fn truncated_batch_is_malformed() {
        let err = parse_batch(&[0u8; 3072], 0, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::MalformedCorpus { len: 3072, .. }));
    }

    #[test]
    fn bad_label_is_corrupt() {
        let mut bytes = vec![0u8; 2 * RECORD_LEN];
        bytes[RECORD_LEN] = 10;
        let err = parse_batch(&bytes, 0, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::CorruptRecord { index: 1, label: 10, .. }));
    }

    #[test]
    fn record_layout_is_channel_planar() {
        let img = Image::from_rgb(0, 1, |x, y| [x as u8, y as u8, 7]);
        let rec = img.to_record();
        assert_eq!(rec[0], 1);
        // Red plane pixel (x=5, y=2).
        assert_eq!(rec[1 + 2 * 32 + 5], 5);
        // Green plane pixel (x=5, y=2).
        assert_eq!(rec[1 + 1024 + 2 * 32 + 5], 2);
        assert_eq!(rec[1 + 2048], 7);
        let back = parse_batch(&rec, 0, Path::new("x")).unwrap();
        assert_eq!(back[0], img);
    }

    #[test]
    fn black_white_red() {
        for up in [Upscale::X1, Upscale::X2, Upscale::X4] {
            let black = preprocess::<f64>(&solid(0, 0, 0), up);
            assert_eq!(black.width(), 32 * up.factor());
            assert!(black.pixels.iter().all(|&v| v == 0.0));

            let white = preprocess::<f64>(&solid(255, 255, 255), up);
            assert!(white.pixels.iter().all(|&v| v == 1.0));

            let red = preprocess::<f64>(&solid(255, 0, 0), up);
            assert!(red.pixels.iter().all(|&v| (v - 0.299).abs() < 1e-12), "{up:?}");
        }
    }

    #[test]
    fn grayscale_bounds_on_high_contrast() {
        // A checkerboard overshoots under cubic interpolation; output must stay clamped.
        let img = Image::from_rgb(0, 0, |x, y| if (x + y) % 2 == 0 { [255; 3] } else { [0; 3] });
        let g = preprocess::<f32>(&img, Upscale::X4);
        assert!(g.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(g.scale_factor, 4);
    }

    #[test]
    fn subset_takes_first_per_class() {
        let imgs: Vec<Image> = (0..30).map(|i| Image::from_rgb(i, (i % 3) as u8, |_, _| [0; 3])).collect();
        let sub = subset_per_class(&imgs, 2);
        let ids: Vec<u32> = sub.iter().map(|i| i.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn upscale_parsing() {
        assert_eq!(Upscale::try_from(2).unwrap(), Upscale::X2);
        assert!(Upscale::try_from(3).is_err());
    }
}
