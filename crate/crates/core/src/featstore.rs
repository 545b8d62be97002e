//! DFV1: the binary interchange format for externally computed feature matrices, plus
//! the registry that maps (model, layer) pairs to files on disk.
//!
//! Layout, little-endian, no padding:
//!
//! | field      | type            |
//! |------------|-----------------|
//! | magic      | `b"DFV1"`       |
//! | version    | u16 = 1         |
//! | name_len   | u8              |
//! | name       | name_len bytes  |
//! | layer_id   | u32             |
//! | dim        | u32             |
//! | count      | u64             |
//! | ids        | u64 x count     |
//! | rows       | f32 x count*dim |

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::binio::{Reader, Writer};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"DFV1";
pub const VERSION: u16 = 1;
pub const EXTENSION: &str = "dfv";

/// Known layer dimensions: (model, layer, raw dim, reduced dim).
pub const KNOWN_LAYERS: [(&str, u32, u32, u32); 6] = [
    ("alexnet", 4, 18_432, 2_500),
    ("alexnet", 5, 4_096, 1_000),
    ("alexnet", 7, 4_096, 1_000),
    ("vgg16", 5, 18_432, 2_500),
    ("vgg16", 6, 4_096, 1_000),
    ("vgg16", 7, 4_096, 1_000),
];

pub fn known_dims(model: &str, layer: u32) -> Option<(u32, u32)> {
    KNOWN_LAYERS.iter().find(|e| e.0 == model && e.1 == layer).map(|e| (e.2, e.3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub model_name: String,
    pub layer_id: u32,
    pub dim: u32,
    /// Row to image id, strictly increasing.
    pub ids: Vec<u64>,
    /// count x dim, row-major.
    pub rows: Vec<f32>,
}

/// Everything in a DFV1 file except the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureHeader {
    pub model_name: String,
    pub layer_id: u32,
    pub dim: u32,
    pub count: u64,
}

impl FeatureHeader {
    pub fn header_len(&self) -> u64 {
        header_len(self.model_name.len())
    }

    pub fn file_len(&self) -> u64 {
        self.header_len() + 8 * self.count + 4 * self.count * self.dim as u64
    }
}

fn header_len(name_len: usize) -> u64 {
    4 + 2 + 1 + name_len as u64 + 4 + 4 + 8
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= u8::MAX as usize
        && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b"-_.".contains(&b))
}

impl FeatureFile {
    pub fn new(model_name: &str, layer_id: u32, dim: u32, ids: Vec<u64>, rows: Vec<f32>) -> Result<Self> {
        let ff = FeatureFile { model_name: model_name.to_string(), layer_id, dim, ids, rows };
        ff.validate()?;
        Ok(ff)
    }

    pub fn from_matrix<T: Scalar>(model_name: &str, layer_id: u32, ids: Vec<u64>, data: &Array2<T>) -> Result<Self> {
        let rows = data.iter().map(|v| v.f64() as f32).collect();
        Self::new(model_name, layer_id, data.ncols() as u32, ids, rows)
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn header(&self) -> FeatureHeader {
        FeatureHeader {
            model_name: self.model_name.clone(),
            layer_id: self.layer_id,
            dim: self.dim,
            count: self.ids.len() as u64,
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.rows[i * d..(i + 1) * d]
    }

    pub fn to_matrix<T: Scalar>(&self) -> Array2<T> {
        Array2::from_shape_fn((self.count(), self.dim as usize), |(r, c)| T::of(self.rows[r * self.dim as usize + c] as f64))
    }

    pub fn validate(&self) -> Result<()> {
        if !valid_name(&self.model_name) {
            return Err(Error::Format(format!(
                "model name {:?} must be 1-255 bytes of [a-z0-9._-]",
                self.model_name
            )));
        }
        if self.rows.len() as u64 != self.ids.len() as u64 * self.dim as u64 {
            return Err(Error::Consistency(format!(
                "{} rows x dim {} does not match payload of {} values",
                self.ids.len(),
                self.dim,
                self.rows.len()
            )));
        }
        check_ids(&self.ids)
    }
}

fn check_ids(ids: &[u64]) -> Result<()> {
    if let Some(row) = ids.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::CorruptIndex { row: row + 1 });
    }
    Ok(())
}

pub fn encode_features(ff: &FeatureFile) -> Result<Vec<u8>> {
    ff.validate()?;
    let header = ff.header();
    let mut w = Writer::with_capacity(header.file_len() as usize);
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u8(ff.model_name.len() as u8);
    w.bytes(ff.model_name.as_bytes());
    w.u32(ff.layer_id);
    w.u32(ff.dim);
    w.u64(ff.ids.len() as u64);
    for &id in &ff.ids {
        w.u64(id);
    }
    for &v in &ff.rows {
        w.f32(v);
    }
    Ok(w.buf)
}

fn parse_header(r: &mut Reader<'_>) -> Result<FeatureHeader> {
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported DFV version {version}")));
    }
    let name_len = r.u8()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .ok()
        .filter(|n| valid_name(n))
        .ok_or_else(|| Error::Format("model name is not [a-z0-9._-]".into()))?
        .to_string();
    let layer_id = r.u32()?;
    let dim = r.u32()?;
    let count = r.u64()?;
    Ok(FeatureHeader { model_name: name, layer_id, dim, count })
}

fn check_size(header: &FeatureHeader, actual: u64) -> Result<()> {
    let expected = header
        .count
        .checked_mul(8 + 4 * header.dim as u64)
        .and_then(|p| p.checked_add(header.header_len()))
        .ok_or_else(|| Error::Format("size fields overflow".into()))?;
    match actual.cmp(&expected) {
        std::cmp::Ordering::Less => Err(Error::Truncated { expected, found: actual }),
        std::cmp::Ordering::Greater => Err(Error::TrailingBytes { expected, found: actual }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureFile> {
    let mut r = Reader::new(bytes);
    let header = parse_header(&mut r)?;
    check_size(&header, bytes.len() as u64)?;
    let count = header.count as usize;
    let ids = (0..count).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    check_ids(&ids)?;
    let n = count * header.dim as usize;
    let rows = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(FeatureFile { model_name: header.model_name, layer_id: header.layer_id, dim: header.dim, ids, rows })
}

pub fn write_features(ff: &FeatureFile, path: &Path) -> Result<()> {
    Writer { buf: encode_features(ff)? }.write_to(path)
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    decode_features(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads and size-checks only the header.
pub fn read_header(path: &Path) -> Result<FeatureHeader> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let actual = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut buf = vec![0u8; header_len(u8::MAX as usize) as usize];
    let mut filled = 0;
    loop {
        let got = f.read(&mut buf[filled..]).map_err(|e| Error::io(path, e))?;
        if got == 0 {
            break;
        }
        filled += got;
        if filled == buf.len() {
            break;
        }
    }
    let header = parse_header(&mut Reader::new(&buf[..filled]))?;
    check_size(&header, actual)?;
    Ok(header)
}

/// Canonical file name for a (model, layer, split) triple.
pub fn file_name(model: &str, layer: u32, split: Split) -> String {
    format!("{model}_{layer}_{split}.{EXTENSION}")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitPaths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

impl SplitPaths {
    pub fn get(&self, split: Split) -> Option<&Path> {
        match split {
            Split::Train => self.train.as_deref(),
            Split::Test => self.test.as_deref(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureRegistry {
    pub entries: BTreeMap<(String, u32), SplitPaths>,
}

impl FeatureRegistry {
    pub fn insert(&mut self, model: &str, layer: u32, split: Split, path: PathBuf) {
        let e = self.entries.entry((model.to_string(), layer)).or_default();
        match split {
            Split::Train => e.train = Some(path),
            Split::Test => e.test = Some(path),
        }
    }

    /// Registers every `{model}_{layer}_{split}.dfv` file in `dir`.
    pub fn scan(dir: &Path) -> Result<Self> {
        let mut reg = FeatureRegistry::default();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for path in paths {
            if path.extension().and_then(|e| e.to_str()) != Some(EXTENSION) {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let mut parts = stem.rsplitn(3, '_');
            let (Some(split), Some(layer), Some(model)) = (parts.next(), parts.next(), parts.next()) else {
                continue;
            };
            let (Ok(split), Ok(layer)) = (split.parse::<Split>(), layer.parse::<u32>()) else { continue };
            reg.insert(model, layer, split, path.clone());
        }
        Ok(reg)
    }

    pub fn path(&self, model: &str, layer: u32, split: Split) -> Result<&Path> {
        self.entries
            .get(&(model.to_string(), layer))
            .and_then(|e| e.get(split))
            .ok_or_else(|| Error::Registry {
                stream: format!("{model}:{layer}"),
                reason: format!("no {split} feature file registered"),
            })
    }

    pub fn load(&self, model: &str, layer: u32, split: Split) -> Result<FeatureFile> {
        let ff = read_features(self.path(model, layer, split)?)?;
        if ff.model_name != model || ff.layer_id != layer {
            return Err(Error::Registry {
                stream: format!("{model}:{layer}"),
                reason: format!("file header says {}:{}", ff.model_name, ff.layer_id),
            });
        }
        Ok(ff)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegistryReport {
    pub violations: Vec<String>,
    pub notes: Vec<String>,
}

impl RegistryReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks header readability, train/test dimension agreement, and known-layer dimensions.
pub fn validate_registry(reg: &FeatureRegistry) -> RegistryReport {
    let mut report = RegistryReport::default();
    for ((model, layer), paths) in &reg.entries {
        let tag = format!("{model}:{layer}");
        let mut dims = Vec::new();
        for split in [Split::Train, Split::Test] {
            match paths.get(split) {
                None => report.violations.push(format!("{tag}: missing {split} split")),
                Some(p) => match read_header(p) {
                    Ok(h) => {
                        if &h.model_name != model || h.layer_id != *layer {
                            report.violations.push(format!(
                                "{tag}: {split} file header says {}:{}",
                                h.model_name, h.layer_id
                            ));
                        }
                        dims.push((split, h.dim));
                    }
                    Err(e) => report.violations.push(format!("{tag}: {split} file unreadable: {e}")),
                },
            }
        }
        if let [(_, a), (_, b)] = dims[..] {
            if a != b {
                report.violations.push(format!("{tag}: train dim {a} != test dim {b}"));
            }
        }
        match known_dims(model, *layer) {
            Some((expected, _)) => {
                for (split, d) in &dims {
                    if *d != expected {
                        report.violations.push(format!("{tag}: {split} dim {d}, expected {expected}"));
                    }
                }
            }
            None => report.notes.push(format!("{tag}: unregistered dimension, accepted")),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureFile {
        FeatureFile::new("vgg16", 6, 3, vec![0, 4, 9], (0..9).map(|v| v as f32 * 0.5 - 1.0).collect()).unwrap()
    }

    #[test]
    fn empty_file_is_header_only() {
        let ff = FeatureFile::new("alexnet", 4, 18_432, vec![], vec![]).unwrap();
        let bytes = encode_features(&ff).unwrap();
        assert_eq!(bytes.len() as u64, 4 + 2 + 1 + 7 + 4 + 4 + 8);
        assert_eq!(bytes.len() as u64, ff.header().file_len());
        // dim field sits right after magic, version, name length, name and layer.
        let off = 4 + 2 + 1 + 7 + 4;
        assert_eq!(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), 18_432);
        assert_eq!(decode_features(&bytes).unwrap(), ff);
    }

    #[test]
    fn roundtrip() {
        let ff = sample();
        assert_eq!(decode_features(&encode_features(&ff).unwrap()).unwrap(), ff);
    }

    #[test]
    fn tampered_magic_and_truncation() {
        let mut bytes = encode_features(&sample()).unwrap();
        let n = bytes.len();
        assert!(matches!(decode_features(&bytes[..n - 1]), Err(Error::Truncated { .. })));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_features(&longer), Err(Error::TrailingBytes { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn non_monotone_ids() {
        let bad = FeatureFile { ids: vec![0, 4, 4], ..sample() };
        assert!(matches!(bad.validate(), Err(Error::CorruptIndex { row: 2 })));
        // Bypass the writer's validation to plant the bad index on disk.
        let mut bytes = encode_features(&sample()).unwrap();
        let ids_at = header_len(5) as usize;
        bytes[ids_at + 8..ids_at + 16].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(decode_features(&bytes), Err(Error::CorruptIndex { row: 1 })));
    }

    #[test]
    fn bad_names_rejected() {
        assert!(FeatureFile::new("", 1, 0, vec![], vec![]).is_err());
        assert!(FeatureFile::new("VGG", 1, 0, vec![], vec![]).is_err());
        assert!(FeatureFile::new("sift-fv", 0, 0, vec![], vec![]).is_ok());
    }

    #[test]
    fn registry_scan_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let write = |model: &str, layer: u32, split: Split, dim: u32| {
            let ff = FeatureFile::new(model, layer, dim, vec![0, 1], vec![0.0; 2 * dim as usize]).unwrap();
            write_features(&ff, &dir.path().join(file_name(model, layer, split))).unwrap();
        };
        write("vgg16", 6, Split::Train, 4096);
        write("vgg16", 6, Split::Test, 4096);
        write("resnet", 3, Split::Train, 10);
        write("resnet", 3, Split::Test, 10);
        write("vgg16", 7, Split::Train, 4000);
        write("vgg16", 7, Split::Test, 4000);
        fs::write(dir.path().join("notes.txt"), "x").unwrap();

        let reg = FeatureRegistry::scan(dir.path()).unwrap();
        assert_eq!(reg.entries.len(), 3);
        let report = validate_registry(&reg);
        assert_eq!(report.violations.len(), 2, "{report:?}");
        assert!(report.violations.iter().all(|v| v.starts_with("vgg16:7")));
        assert!(report.notes.iter().any(|n| n.contains("resnet:3") && n.contains("unregistered dimension")));
        assert_eq!(reg.load("vgg16", 6, Split::Test).unwrap().dim, 4096);
        assert!(matches!(reg.load("alexnet", 4, Split::Train), Err(Error::Registry { .. })));
    }

    #[test]
    fn split_dim_drift_is_a_violation() {
        let dir = tempfile::tempdir().unwrap();
        for (split, dim) in [(Split::Train, 8), (Split::Test, 9)] {
            let ff = FeatureFile::new("custom", 1, dim, vec![3], vec![1.0; dim as usize]).unwrap();
            write_features(&ff, &dir.path().join(file_name("custom", 1, split))).unwrap();
        }
        let report = validate_registry(&FeatureRegistry::scan(dir.path()).unwrap());
        assert!(report.violations.iter().any(|v| v.contains("train dim 8 != test dim 9")));
    }

    #[test]
    fn table_dims() {
        assert_eq!(known_dims("alexnet", 4), Some((18_432, 2_500)));
        assert_eq!(known_dims("vgg16", 6), Some((4_096, 1_000)));
        assert_eq!(known_dims("alexnet", 6), None);
    }
}
