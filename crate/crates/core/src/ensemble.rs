//! Per-feature classifiers combined by hard majority vote.
//!
//! Each member consumes one feature stream (a single layer, the SIFT Fisher Vectors, or
//! a PCA-reduced concatenation of several layers) and casts exactly one vote per image.
//! The ensemble decision is the class with the most votes; ties among the leading classes
//! are settled by the configured [`TieBreak`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::featstore::{FeatureFile, FeatureRegistry};
use crate::pca::{fit_pca, read_pca, write_pca, PcaModel};
use crate::scalar::{order_free_sum, Scalar};
use crate::svm::{self, decision_values, read_svm, select_c, train_ovr, write_svm, MulticlassModel, TrainOptions};

pub const SIFT_FV_MODEL: &str = "sift-fv";

/// One stored feature layer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerKey {
    pub model: String,
    pub layer: u32,
}

impl LayerKey {
    pub fn new(model: &str, layer: u32) -> Self {
        LayerKey { model: model.to_string(), layer }
    }

    pub fn sift_fv() -> Self {
        LayerKey::new(SIFT_FV_MODEL, 0)
    }
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.model == SIFT_FV_MODEL && self.layer == 0 {
            f.write_str(SIFT_FV_MODEL)
        } else {
            write!(f, "{}:{}", self.model, self.layer)
        }
    }
}

impl std::str::FromStr for LayerKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == SIFT_FV_MODEL {
            return Ok(LayerKey::sift_fv());
        }
        let (model, layer) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("layer key {s:?} is not model:layer")))?;
        let layer = layer.parse().map_err(|_| Error::InvalidArgument(format!("bad layer index in {s:?}")))?;
        if model.is_empty() {
            return Err(Error::InvalidArgument(format!("empty model name in {s:?}")));
        }
        Ok(LayerKey::new(model, layer))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StreamSource {
    SiftFv,
    Deep(LayerKey),
    /// Concatenation of several layers; always PCA-reduced.
    Fused(Vec<LayerKey>),
}

impl StreamSource {
    pub fn keys(&self) -> Vec<LayerKey> {
        match self {
            StreamSource::SiftFv => vec![LayerKey::sift_fv()],
            StreamSource::Deep(k) => vec![k.clone()],
            StreamSource::Fused(ks) => ks.clone(),
        }
    }

    pub fn is_deep(&self) -> bool {
        matches!(self, StreamSource::Deep(_))
    }
}

impl fmt::Display for StreamSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamSource::SiftFv => f.write_str(SIFT_FV_MODEL),
            StreamSource::Deep(k) => write!(f, "{k}"),
            StreamSource::Fused(ks) => {
                f.write_str("fused:")?;
                for (i, k) in ks.iter().enumerate() {
                    if i > 0 {
                        f.write_str("+")?;
                    }
                    write!(f, "{k}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::str::FromStr for StreamSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("fused:") {
            let keys = rest.split('+').map(str::parse).collect::<Result<Vec<LayerKey>>>()?;
            if keys.len() < 2 {
                return Err(Error::InvalidArgument(format!("fused stream {s:?} needs at least two layers")));
            }
            return Ok(StreamSource::Fused(keys));
        }
        let key: LayerKey = s.parse()?;
        Ok(if key == LayerKey::sift_fv() { StreamSource::SiftFv } else { StreamSource::Deep(key) })
    }
}

/// Human-readable model family name used in report rows.
pub fn family_name(model: &str) -> String {
    match model {
        "alexnet" => "AlexNet".into(),
        "vgg16" => "VGGNet".into(),
        "googlenet" => "GoogleNet".into(),
        other => other.to_string(),
    }
}

/// A configured (untrained) stream: its source and optional PCA target.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StreamSpec {
    pub source: StreamSource,
    pub reduce_to: Option<usize>,
}

impl StreamSpec {
    pub fn new(source: StreamSource, reduce_to: Option<usize>) -> Result<Self> {
        if matches!(source, StreamSource::Fused(_)) && reduce_to.is_none() {
            return Err(Error::InvalidArgument(format!("fused stream {source} requires a PCA target")));
        }
        if reduce_to == Some(0) {
            return Err(Error::InvalidArgument("PCA target must be positive".into()));
        }
        Ok(StreamSpec { source, reduce_to })
    }

    /// Unique identifier, also the config-file spelling.
    pub fn id(&self) -> String {
        match self.reduce_to {
            Some(q) => format!("{} pca={q}", self.source),
            None => self.source.to_string(),
        }
    }

    /// Report row name, e.g. `VGGNet (6)`; PCA variants share the row of their source.
    pub fn row_name(&self) -> String {
        match &self.source {
            StreamSource::SiftFv => "SIFT (FV)".into(),
            StreamSource::Deep(k) => format!("{} ({})", family_name(&k.model), k.layer),
            StreamSource::Fused(ks) => {
                let model = &ks[0].model;
                if ks.iter().all(|k| &k.model == model) {
                    let layers: String = ks.iter().map(|k| k.layer.to_string()).collect();
                    format!("{} ({layers})", family_name(model))
                } else {
                    format!("Fused ({})", ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("+"))
                }
            }
        }
    }
}

impl std::str::FromStr for StreamSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let source: StreamSource =
            parts.next().ok_or_else(|| Error::InvalidArgument("empty stream spec".into()))?.parse()?;
        let mut reduce_to = None;
        for opt in parts {
            let q = opt
                .strip_prefix("pca=")
                .and_then(|q| q.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("unknown stream option {opt:?}")))?;
            reduce_to = Some(q);
        }
        StreamSpec::new(source, reduce_to)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    LowestIndex,
    #[default]
    MaxConfidenceSum,
}

impl fmt::Display for TieBreak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TieBreak::LowestIndex => "lowest-index",
            TieBreak::MaxConfidenceSum => "max-confidence-sum",
        })
    }
}

impl std::str::FromStr for TieBreak {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowest-index" => Ok(TieBreak::LowestIndex),
            "max-confidence-sum" => Ok(TieBreak::MaxConfidenceSum),
            _ => Err(Error::InvalidArgument(format!("unknown tie policy {s:?}"))),
        }
    }
}

/// Named subset of streams that vote together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsembleDef {
    pub name: String,
    pub members: Vec<String>,
}

pub const DEEP_ENSEMBLE: &str = "Deep Ensemble";
pub const SIFT_DEEP_ENSEMBLE: &str = "SIFT + Deep Ensemble";

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub streams: Vec<StreamSpec>,
    /// Explicit ensembles; when empty, [`EnsembleConfig::ensembles`] derives the defaults.
    pub ensembles: Vec<EnsembleDef>,
    pub tie_break: TieBreak,
    pub c_grid: Vec<f64>,
    pub cv_folds: usize,
    pub seed: u64,
    pub gmm_components: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            streams: Vec::new(),
            ensembles: Vec::new(),
            tie_break: TieBreak::default(),
            c_grid: svm::DEFAULT_C_GRID.to_vec(),
            cv_folds: 3,
            seed: 0,
            gmm_components: crate::codebook::DEFAULT_COMPONENTS,
        }
    }
}

fn deep(model: &str, layer: u32, pca: Option<usize>) -> StreamSpec {
    StreamSpec::new(StreamSource::Deep(LayerKey::new(model, layer)), pca).expect("preset streams are valid")
}

fn fused(model: &str, layers: &[u32], q: usize) -> StreamSpec {
    let keys = layers.iter().map(|&l| LayerKey::new(model, l)).collect();
    StreamSpec::new(StreamSource::Fused(keys), Some(q)).expect("preset streams are valid")
}

pub const PRESETS: [&str; 7] =
    ["deep-ensemble", "sift-deep-ensemble", "sift-only", "vgg16-567", "alexnet-457", "alexnet-467", "all-streams"];

impl EnsembleConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let deep_members = || {
            vec![
                deep("vgg16", 7, None),
                deep("vgg16", 6, None),
                deep("vgg16", 5, None),
                deep("alexnet", 7, None),
                deep("alexnet", 6, None),
                deep("alexnet", 4, None),
            ]
        };
        let sift = StreamSpec { source: StreamSource::SiftFv, reduce_to: None };
        let streams = match name {
            "deep-ensemble" => deep_members(),
            "sift-deep-ensemble" => {
                let mut s = deep_members();
                s.push(sift);
                s
            }
            "sift-only" => vec![sift],
            "vgg16-567" => vec![fused("vgg16", &[5, 6, 7], 1000)],
            "alexnet-457" => vec![fused("alexnet", &[4, 5, 7], 1000)],
            "alexnet-467" => vec![fused("alexnet", &[4, 6, 7], 1000)],
            "all-streams" => {
                let mut s = deep_members();
                for (m, l) in [("vgg16", 7), ("vgg16", 6), ("vgg16", 5), ("alexnet", 7), ("alexnet", 6), ("alexnet", 4)] {
                    let q = crate::featstore::known_dims(m, l).map_or(1000, |(_, q)| q as usize);
                    s.push(deep(m, l, Some(q)));
                }
                s.push(fused("vgg16", &[5, 6, 7], 1000));
                s.push(fused("alexnet", &[4, 5, 7], 1000));
                s.push(sift);
                s
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown preset {name:?}; available: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(EnsembleConfig { streams, ..Default::default() })
    }

    /// Drops deep streams whose layers are not all present in `registry`.
    pub fn retain_available(&mut self, registry: &FeatureRegistry) {
        self.streams.retain(|s| {
            s.source.keys().iter().all(|k| {
                k == &LayerKey::sift_fv() || registry.entries.contains_key(&(k.model.clone(), k.layer))
            })
        });
    }

    /// Explicit ensembles, or: Deep Ensemble over the unreduced single-layer deep streams,
    /// and SIFT + Deep Ensemble adding the SIFT stream when both exist.
    pub fn ensembles(&self) -> Vec<EnsembleDef> {
        if !self.ensembles.is_empty() {
            return self.ensembles.clone();
        }
        let deep: Vec<String> =
            self.streams.iter().filter(|s| s.source.is_deep() && s.reduce_to.is_none()).map(StreamSpec::id).collect();
        let sift: Vec<String> = self
            .streams
            .iter()
            .filter(|s| s.source == StreamSource::SiftFv && s.reduce_to.is_none())
            .map(StreamSpec::id)
            .collect();
        let mut out = Vec::new();
        if !deep.is_empty() {
            out.push(EnsembleDef { name: DEEP_ENSEMBLE.into(), members: deep.clone() });
            if !sift.is_empty() {
                let mut members = deep;
                members.extend(sift);
                out.push(EnsembleDef { name: SIFT_DEEP_ENSEMBLE.into(), members });
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = EnsembleConfig::default();
        let mut streams_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Config { line: i + 1, reason };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "preset" => {
                    let p = EnsembleConfig::preset(value).map_err(|e| err(e.to_string()))?;
                    cfg.streams.extend(p.streams);
                    streams_set = true;
                }
                "stream" => {
                    cfg.streams.push(value.parse().map_err(|e: Error| err(e.to_string()))?);
                    streams_set = true;
                }
                "ensemble" => {
                    let (name, members) =
                        value.split_once(':').ok_or_else(|| err("expected ensemble = name: id, id".into()))?;
                    let members: Vec<String> = members.split(',').map(|m| m.trim().to_string()).collect();
                    cfg.ensembles.push(EnsembleDef { name: name.trim().to_string(), members });
                }
                "tie_policy" => cfg.tie_break = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "c_grid" => {
                    cfg.c_grid = value
                        .split(',')
                        .map(|c| c.trim().parse::<f64>().ok().filter(|c| *c > 0.0))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| err(format!("bad C grid {value:?}")))?;
                }
                "cv_folds" => cfg.cv_folds = value.parse().map_err(|_| err(format!("bad fold count {value:?}")))?,
                "seed" => cfg.seed = value.parse().map_err(|_| err(format!("bad seed {value:?}")))?,
                "gmm_components" => {
                    cfg.gmm_components = value.parse().map_err(|_| err(format!("bad component count {value:?}")))?
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        if !streams_set {
            return Err(Error::Config { line: 0, reason: "no streams configured".into() });
        }
        let mut ids: Vec<String> = cfg.streams.iter().map(StreamSpec::id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config { line: 0, reason: "duplicate stream".into() });
        }
        for e in &cfg.ensembles {
            if let Some(m) = e.members.iter().find(|m| !ids.contains(m)) {
                return Err(Error::Config { line: 0, reason: format!("ensemble {:?} names unknown stream {m:?}", e.name) });
            }
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for st in &self.streams {
            s.push_str(&format!("stream = {}\n", st.id()));
        }
        for e in &self.ensembles {
            s.push_str(&format!("ensemble = {}: {}\n", e.name, e.members.join(", ")));
        }
        s.push_str(&format!("tie_policy = {}\n", self.tie_break));
        let grid: Vec<String> = self.c_grid.iter().map(|c| c.to_string()).collect();
        s.push_str(&format!("c_grid = {}\n", grid.join(",")));
        s.push_str(&format!("cv_folds = {}\n", self.cv_folds));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("gmm_components = {}\n", self.gmm_components));
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Feature rows keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub ids: Vec<u64>,
    pub data: Array2<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn from_file(ff: &FeatureFile) -> Self {
        FeatureMatrix { ids: ff.ids.clone(), data: ff.to_matrix() }
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[u64], stream: &str) -> Result<Array2<T>> {
        let pos: HashMap<u64, usize> = self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let rows = ids
            .iter()
            .map(|id| pos.get(id).copied())
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| Error::IncompleteInput { stream: stream.to_string() })?;
        Ok(self.data.select(Axis(0), &rows))
    }
}

/// Supplies stored feature layers for a split.
pub trait FeatureSource<T> {
    fn features(&self, key: &LayerKey, split: Split) -> Result<FeatureMatrix<T>>;
}

impl<T: Scalar> FeatureSource<T> for FeatureRegistry {
    fn features(&self, key: &LayerKey, split: Split) -> Result<FeatureMatrix<T>> {
        Ok(FeatureMatrix::from_file(&self.load(&key.model, key.layer, split)?))
    }
}

/// In-memory feature source.
#[derive(Debug, Clone, Default)]
pub struct MemoryFeatures<T> {
    pub layers: HashMap<(LayerKey, Split), FeatureMatrix<T>>,
}

impl<T: Scalar> MemoryFeatures<T> {
    pub fn insert(&mut self, key: LayerKey, split: Split, m: FeatureMatrix<T>) {
        self.layers.insert((key, split), m);
    }
}

impl<T: Scalar> FeatureSource<T> for MemoryFeatures<T> {
    fn features(&self, key: &LayerKey, split: Split) -> Result<FeatureMatrix<T>> {
        self.layers.get(&(key.clone(), split)).cloned().ok_or_else(|| Error::Registry {
            stream: key.to_string(),
            reason: format!("no {split} features loaded"),
        })
    }
}

/// Features layered onto another source, checked first.
pub struct Overlay<'a, T> {
    pub top: &'a MemoryFeatures<T>,
    pub base: &'a dyn FeatureSource<T>,
}

impl<T: Scalar> FeatureSource<T> for Overlay<'_, T> {
    fn features(&self, key: &LayerKey, split: Split) -> Result<FeatureMatrix<T>> {
        match self.top.layers.get(&(key.clone(), split)) {
            Some(m) => Ok(m.clone()),
            None => self.base.features(key, split),
        }
    }
}

/// A trained stream: the source layers and the optional fitted reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream<T> {
    pub spec: StreamSpec,
    /// Concatenated input width before reduction.
    pub input_dim: usize,
    pub preprocessor: Option<PcaModel<T>>,
}

impl<T: Scalar> FeatureStream<T> {
    pub fn name(&self) -> String {
        self.spec.id()
    }

    /// Normalizes each layer, concatenates, reduces, and renormalizes.
    pub fn prepare_matrix(&self, layers: &[Array2<T>]) -> Result<Array2<T>> {
        let mut normed: Vec<Array2<T>> = layers.to_vec();
        for m in &mut normed {
            svm::l2_normalize_rows(m);
        }
        let views: Vec<_> = normed.iter().map(|m| m.view()).collect();
        let joined = concatenate(Axis(1), &views).map_err(|e| Error::Consistency(e.to_string()))?;
        if joined.ncols() != self.input_dim {
            return Err(Error::Consistency(format!(
                "stream {}: feature width {} differs from training width {}",
                self.name(),
                joined.ncols(),
                self.input_dim
            )));
        }
        match &self.preprocessor {
            None => Ok(joined),
            Some(pca) => {
                let mut reduced = pca.transform(joined.view())?;
                svm::l2_normalize_rows(&mut reduced);
                Ok(reduced)
            }
        }
    }

    pub fn prepare_one(&self, features: &ImageFeatures<T>) -> Result<Array1<T>> {
        let layers = self
            .spec
            .source
            .keys()
            .iter()
            .map(|k| {
                features
                    .get(k)
                    .map(|v| v.clone().insert_axis(Axis(0)))
                    .ok_or_else(|| Error::IncompleteInput { stream: self.name() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.prepare_matrix(&layers)?.row(0).to_owned())
    }
}

/// Raw per-layer feature vectors of one image.
pub type ImageFeatures<T> = BTreeMap<LayerKey, Array1<T>>;

fn load_layers<T: Scalar>(spec: &StreamSpec, source: &dyn FeatureSource<T>, split: Split, ids: &[u64]) -> Result<Vec<Array2<T>>> {
    spec.source
        .keys()
        .iter()
        .map(|k| {
            let m = source.features(k, split).map_err(|e| match e {
                Error::Registry { reason, .. } => Error::Registry { stream: spec.id(), reason },
                other => other,
            })?;
            m.select(ids, &spec.id())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member<T> {
    pub stream: FeatureStream<T>,
    pub classifier: MulticlassModel<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel<T> {
    pub members: Vec<Member<T>>,
    /// Class label table shared by all members.
    pub labels: Vec<u32>,
    pub tie_break: TieBreak,
}

/// Trains one classifier per configured stream on the images `ids` with class indices
/// `classes` (into `label_table`).
pub fn train_ensemble<T: Scalar>(
    config: &EnsembleConfig,
    source: &dyn FeatureSource<T>,
    ids: &[u64],
    classes: &[usize],
    label_table: &[u32],
) -> Result<EnsembleModel<T>> {
    if config.streams.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one stream".into()));
    }
    if ids.len() != classes.len() {
        return Err(Error::LengthMismatch { left: ids.len(), right: classes.len() });
    }
    let mut members = Vec::with_capacity(config.streams.len());
    for spec in &config.streams {
        let layers = load_layers(spec, source, Split::Train, ids)?;
        let input_dim = layers.iter().map(|l| l.ncols()).sum();
        let mut stream = FeatureStream { spec: spec.clone(), input_dim, preprocessor: None };
        let mut x = stream.prepare_matrix(&layers)?;
        if let Some(q) = spec.reduce_to {
            let pca = fit_pca(x.view(), q)?;
            stream.preprocessor = Some(pca);
            x = stream.prepare_matrix(&layers)?;
        }
        let opts = TrainOptions { seed: config.seed, ..Default::default() };
        let c = select_c(x.view(), classes, label_table, &config.c_grid, config.cv_folds, &opts)?;
        log::info!("stream {}: {} x {} features, C = {c}", spec.id(), x.nrows(), x.ncols());
        let classifier = train_ovr(x.view(), classes, label_table, &TrainOptions { c, ..opts })?.with_tag(&spec.id());
        members.push(Member { stream, classifier });
    }
    Ok(EnsembleModel { members, labels: label_table.to_vec(), tie_break: config.tie_break })
}

/// Hard majority vote over member votes (class indices). Ties among the most-voted classes
/// go to the largest decision-value sum under [`TieBreak::MaxConfidenceSum`], then to the
/// lowest class index.
pub fn majority_vote<T: Scalar>(votes: &[usize], confidences: &[Vec<T>], num_classes: usize, policy: TieBreak) -> Result<usize> {
    if votes.is_empty() {
        return Err(Error::DegenerateEnsemble);
    }
    if let Some(&bad) = votes.iter().find(|&&v| v >= num_classes) {
        return Err(Error::InvalidArgument(format!("vote {bad} outside {num_classes} classes")));
    }
    let mut counts = vec![0usize; num_classes];
    for &v in votes {
        counts[v] += 1;
    }
    let top = *counts.iter().max().expect("num_classes > 0");
    let tied: Vec<usize> = (0..num_classes).filter(|&k| counts[k] == top).collect();
    if tied.len() == 1 || policy == TieBreak::LowestIndex {
        return Ok(tied[0]);
    }
    if confidences.len() != votes.len() || confidences.iter().any(|c| c.len() != num_classes) {
        return Err(Error::InvalidArgument("confidences must hold one K-vector per vote".into()));
    }
    let mut best = (tied[0], T::neg_infinity());
    for &k in &tied {
        let mut col: Vec<T> = confidences.iter().map(|c| c[k]).collect();
        let sum = order_free_sum(&mut col);
        if sum > best.1 {
            best = (k, sum);
        }
    }
    Ok(best.0)
}

/// Per-image outputs of every member plus the ensemble decision.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPredictions<T> {
    pub ids: Vec<u64>,
    /// Member names, aligned with the inner vectors below.
    pub members: Vec<String>,
    /// votes[member][image], class indices.
    pub votes: Vec<Vec<usize>>,
    /// decisions[member][image] = K decision values.
    pub decisions: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> SplitPredictions<T> {
    /// Majority decision for each image over the given member positions.
    pub fn vote(&self, members: &[usize], num_classes: usize, policy: TieBreak) -> Result<Vec<usize>> {
        (0..self.ids.len())
            .map(|i| {
                let votes: Vec<usize> = members.iter().map(|&m| self.votes[m][i]).collect();
                let conf: Vec<Vec<T>> = members.iter().map(|&m| self.decisions[m][i].clone()).collect();
                majority_vote(&votes, &conf, num_classes, policy)
            })
            .collect()
    }
}

impl<T: Scalar> EnsembleModel<T> {
    pub fn member_names(&self) -> Vec<String> {
        self.members.iter().map(|m| m.stream.name()).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.members.iter().position(|m| m.stream.name() == name)
    }

    /// The ensemble restricted to the named members, in the given order.
    pub fn subset(&self, names: &[String]) -> Result<EnsembleModel<T>> {
        let members = names
            .iter()
            .map(|n| {
                self.position(n).map(|i| self.members[i].clone()).ok_or_else(|| Error::Registry {
                    stream: n.clone(),
                    reason: "not a trained member".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleModel { members, labels: self.labels.clone(), tie_break: self.tie_break })
    }

    /// Runs every member over the images `ids` of `split`.
    pub fn predict_split(&self, source: &dyn FeatureSource<T>, split: Split, ids: &[u64]) -> Result<SplitPredictions<T>> {
        let mut votes = Vec::new();
        let mut decisions = Vec::new();
        for m in &self.members {
            let layers = load_layers(&m.stream.spec, source, split, ids)?;
            let x = m.stream.prepare_matrix(&layers)?;
            let mut mv = Vec::with_capacity(ids.len());
            let mut md = Vec::with_capacity(ids.len());
            for row in x.rows() {
                let dv = decision_values(&m.classifier, row)?;
                mv.push(svm::argmax(&dv));
                md.push(dv);
            }
            votes.push(mv);
            decisions.push(md);
        }
        Ok(SplitPredictions { ids: ids.to_vec(), members: self.member_names(), votes, decisions })
    }
}

/// Predicts one image: every member votes, then [`majority_vote`] decides. Returns the label.
pub fn predict_ensemble<T: Scalar>(model: &EnsembleModel<T>, features: &ImageFeatures<T>) -> Result<u32> {
    let mut votes = Vec::with_capacity(model.members.len());
    let mut conf = Vec::with_capacity(model.members.len());
    for m in &model.members {
        let x = m.stream.prepare_one(features)?;
        let dv = decision_values(&m.classifier, x.view())?;
        votes.push(svm::argmax(&dv));
        conf.push(dv);
    }
    let k = majority_vote(&votes, &conf, model.labels.len(), model.tie_break)?;
    Ok(model.labels[k])
}

/// Single-member vote for `x` already in the member's prepared feature space.
pub fn member_vote<T: Scalar>(member: &Member<T>, x: ArrayView1<T>) -> Result<usize> {
    Ok(svm::argmax(&decision_values(&member.classifier, x)?))
}

const MANIFEST: &str = "manifest.txt";

/// Writes `manifest.txt` plus one SVMK (and optional PCA1) file per member into `dir`.
pub fn save_ensemble<T: Scalar>(model: &EnsembleModel<T>, ensembles: &[EnsembleDef], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("tie_policy = {}\n", model.tie_break));
    let labels: Vec<String> = model.labels.iter().map(|l| l.to_string()).collect();
    manifest.push_str(&format!("labels = {}\n", labels.join(",")));
    for (i, m) in model.members.iter().enumerate() {
        let svm_file = format!("member_{i}.svmk");
        write_svm(&m.classifier, &dir.join(&svm_file))?;
        let pca_file = match &m.stream.preprocessor {
            Some(p) => {
                let f = format!("member_{i}.pca");
                write_pca(p, &dir.join(&f))?;
                f
            }
            None => "-".into(),
        };
        manifest.push_str(&format!(
            "member = {} | {} | {} | {}\n",
            m.stream.spec.id(),
            m.stream.input_dim,
            svm_file,
            pca_file
        ));
    }
    for e in ensembles {
        manifest.push_str(&format!("ensemble = {}: {}\n", e.name, e.members.join(", ")));
    }
    fs::write(dir.join(MANIFEST), manifest).map_err(|e| Error::io(dir.join(MANIFEST), e))
}

pub fn load_ensemble<T: Scalar>(dir: &Path) -> Result<(EnsembleModel<T>, Vec<EnsembleDef>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut tie_break = TieBreak::default();
    let mut labels = Vec::new();
    let mut members = Vec::new();
    let mut ensembles = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |reason: String| Error::Config { line: i + 1, reason };
        let Some((key, value)) = line.split_once('=') else { continue };
        let value = value.trim();
        match key.trim() {
            "tie_policy" => tie_break = value.parse().map_err(|e: Error| err(e.to_string()))?,
            "labels" => {
                labels = value
                    .split(',')
                    .map(|l| l.trim().parse::<u32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(e.to_string()))?
            }
            "member" => {
                let parts: Vec<&str> = value.split('|').map(str::trim).collect();
                let [spec, input_dim, svm_file, pca_file] = parts[..] else {
                    return Err(err("member needs 4 fields".into()));
                };
                let spec: StreamSpec = spec.parse().map_err(|e: Error| err(e.to_string()))?;
                let input_dim = input_dim.parse().map_err(|_| err(format!("bad width {input_dim:?}")))?;
                let mut classifier: MulticlassModel<T> = read_svm(&dir.join(svm_file))?;
                classifier = classifier.with_tag(&spec.id());
                let preprocessor = if pca_file == "-" { None } else { Some(read_pca(&dir.join(pca_file))?) };
                members.push(Member { stream: FeatureStream { spec, input_dim, preprocessor }, classifier });
            }
            "ensemble" => {
                let (name, list) = value.split_once(':').ok_or_else(|| err("bad ensemble line".into()))?;
                ensembles.push(EnsembleDef {
                    name: name.trim().into(),
                    members: list.split(',').map(|m| m.trim().to_string()).collect(),
                });
            }
            other => return Err(err(format!("unknown manifest key {other:?}"))),
        }
    }
    if members.is_empty() {
        return Err(Error::Config { line: 0, reason: "manifest lists no members".into() });
    }
    if members.iter().any(|m: &Member<T>| m.classifier.labels != labels) {
        return Err(Error::Consistency("member label tables differ from the manifest".into()));
    }
    Ok((EnsembleModel { members, labels, tie_break }, ensembles))
}
