//! End-to-end run: load images, extract SIFT, fit the codebook, encode Fisher Vectors,
//! train the per-stream classifiers, vote, and write the report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::codebook::{train_codebook, GmmParams};
use crate::dataset::{load_cifar10, preprocess, subset_per_class, Image, Split, Upscale, CLASS_NAMES};
use crate::ensemble::{
    train_ensemble, EnsembleConfig, EnsembleDef, EnsembleModel, FeatureMatrix, FeatureSource, LayerKey, MemoryFeatures, Overlay,
    StreamSource,
};
use crate::error::{Error, Result};
use crate::featstore::{validate_registry, FeatureFile, FeatureRegistry};
use crate::fisher::fisher_vector;
use crate::report::{emit_report, evaluate, EvalReport, Timings, VoteLog};
use crate::scalar::Scalar;
use crate::sift::{extract_sift, DescriptorSet, SiftParams, DESCRIPTOR_LEN};

pub const SIFT_MODEL: &str = "sift";
pub const DEFAULT_EM_ITERS: usize = 100;
pub const DEFAULT_EM_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    /// Directory of stored deep features; needed only by deep streams.
    pub feat_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub ensemble: EnsembleConfig,
    /// First N training images per class.
    pub train_per_class: Option<usize>,
    /// First N test images per class.
    pub test_per_class: Option<usize>,
    pub sift: SiftParams,
    pub upscale: Upscale,
    pub em_iters: usize,
    pub em_tol: f64,
}

impl RunConfig {
    pub fn new(data_dir: PathBuf, out_dir: PathBuf, ensemble: EnsembleConfig) -> Self {
        RunConfig {
            data_dir,
            feat_dir: None,
            out_dir,
            ensemble,
            train_per_class: None,
            test_per_class: None,
            sift: SiftParams::default(),
            upscale: Upscale::default(),
            em_iters: DEFAULT_EM_ITERS,
            em_tol: DEFAULT_EM_TOL,
        }
    }
}

pub struct RunOutput {
    pub report: EvalReport,
    pub timings: Timings,
    pub model: EnsembleModel<f64>,
    pub codebook: Option<GmmParams<f64>>,
}

/// Loads a split and applies the per-class subset.
pub fn load_split(dir: &Path, split: Split, per_class: Option<usize>) -> Result<Vec<Image>> {
    let images = load_cifar10(dir, split)?;
    Ok(match per_class {
        Some(n) => subset_per_class(&images, n),
        None => images,
    })
}

/// SIFT descriptors for every image, in input order.
pub fn extract_descriptors<T: Scalar>(images: &[Image], params: &SiftParams, upscale: Upscale) -> Result<Vec<DescriptorSet<T>>> {
    images
        .par_iter()
        .map(|img| {
            let mut set = extract_sift(&preprocess::<T>(img, upscale), params)?;
            set.image_id = img.id;
            Ok(set)
        })
        .collect()
}

/// Packs descriptor sets into one feature file. Row id = image id << 32 | row index.
pub fn descriptors_to_file<T: Scalar>(sets: &[DescriptorSet<T>]) -> Result<FeatureFile> {
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut sorted: Vec<&DescriptorSet<T>> = sets.iter().collect();
    sorted.sort_by_key(|s| s.image_id);
    for set in sorted {
        for (i, row) in set.descriptors.rows().into_iter().enumerate() {
            ids.push((u64::from(set.image_id) << 32) | i as u64);
            rows.extend(row.iter().map(|v| v.f64() as f32));
        }
    }
    FeatureFile::new(SIFT_MODEL, 0, DESCRIPTOR_LEN as u32, ids, rows)
}

/// Splits a packed descriptor file back into (image id, descriptors) groups.
pub fn descriptors_from_file<T: Scalar>(ff: &FeatureFile) -> Result<Vec<(u32, Array2<T>)>> {
    if ff.dim as usize != DESCRIPTOR_LEN {
        return Err(Error::DimensionMismatch { expected: DESCRIPTOR_LEN, found: ff.dim as usize });
    }
    let m: Array2<T> = ff.to_matrix();
    let mut out: Vec<(u32, Array2<T>)> = Vec::new();
    let mut start = 0;
    while start < ff.ids.len() {
        let image = (ff.ids[start] >> 32) as u32;
        let mut end = start;
        while end < ff.ids.len() && (ff.ids[end] >> 32) as u32 == image {
            end += 1;
        }
        out.push((image, m.slice(ndarray::s![start..end, ..]).to_owned()));
        start = end;
    }
    Ok(out)
}

/// Fits the codebook on the stacked descriptors (subsampled if large).
pub fn fit_codebook<T: Scalar>(
    sets: &[ArrayView2<'_, T>],
    components: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<GmmParams<T>> {
    let stacked = ndarray::concatenate(Axis(0), sets).map_err(|_| Error::EmptySample)?;
    if stacked.nrows() == 0 {
        return Err(Error::EmptySample);
    }
    let fit = train_codebook(stacked.view(), components, max_iter, tol, seed)?;
    log::info!("codebook: {} EM log-likelihood entries, final {:?}", fit.trace.len(), fit.trace.last());
    Ok(fit.params)
}

/// Normalized Fisher Vectors keyed by image id.
pub fn encode_sets<T: Scalar>(gmm: &GmmParams<T>, sets: &[(u32, ArrayView2<'_, T>)]) -> Result<FeatureMatrix<T>> {
    let fvs: Vec<_> = sets.par_iter().map(|(_, x)| fisher_vector(gmm, *x)).collect::<Result<_>>()?;
    let dim = 2 * gmm.components() * gmm.dim();
    let mut data = Array2::zeros((fvs.len(), dim));
    for (mut row, fv) in data.axis_iter_mut(Axis(0)).zip(&fvs) {
        row.assign(&fv.values);
    }
    Ok(FeatureMatrix { ids: sets.iter().map(|(id, _)| u64::from(*id)).collect(), data })
}

/// Sorted distinct labels, and each image's index into that table.
pub fn label_table(images: &[Image]) -> (Vec<u32>, Vec<usize>) {
    let mut table: Vec<u32> = images.iter().map(|i| u32::from(i.label)).collect();
    table.sort_unstable();
    table.dedup();
    let classes = images.iter().map(|i| table.binary_search(&u32::from(i.label)).expect("label in table")).collect();
    (table, classes)
}

fn timed<R>(timings: &mut Timings, stage: &'static str, f: impl FnOnce() -> Result<R>) -> Result<R> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage));
    timings.push(stage, start.elapsed());
    log::info!("stage {stage} finished in {:.2?}", start.elapsed());
    out
}

/// Scores every member and every named ensemble of `model` on `images`.
pub fn evaluate_model(
    model: &EnsembleModel<f64>,
    ensembles: &[EnsembleDef],
    source: &dyn FeatureSource<f64>,
    split: Split,
    images: &[Image],
    seed: u64,
) -> Result<EvalReport> {
    let labels = &model.labels;
    let truth = images
        .iter()
        .map(|i| {
            labels
                .binary_search(&u32::from(i.label))
                .map_err(|_| Error::DegenerateLabels(format!("label {} never seen in training", i.label)))
        })
        .collect::<Result<Vec<usize>>>()?;
    let ids: Vec<u64> = images.iter().map(|i| u64::from(i.id)).collect();
    let preds = model.predict_split(source, split, &ids)?;
    let k = labels.len();
    let mut report = EvalReport {
        seed,
        class_names: labels
            .iter()
            .map(|&l| CLASS_NAMES.get(l as usize).map_or_else(|| l.to_string(), |s| s.to_string()))
            .collect(),
        ..Default::default()
    };
    for (m, member) in model.members.iter().enumerate() {
        let e = evaluate(&preds.votes[m], &truth, k)?;
        report.record(&member.stream.spec.row_name(), member.stream.spec.reduce_to.is_some(), e.accuracy);
        if model.members.len() == 1 {
            report.confusion = e.confusion;
            report.confusion_of = member.stream.spec.row_name();
        }
    }
    let mut headline = None;
    for def in ensembles {
        let positions = def
            .members
            .iter()
            .map(|n| model.position(n).ok_or_else(|| Error::Registry { stream: n.clone(), reason: "not trained".into() }))
            .collect::<Result<Vec<usize>>>()?;
        let decided = preds.vote(&positions, k, model.tie_break)?;
        let e = evaluate(&decided, &truth, k)?;
        report.record(&def.name, false, e.accuracy);
        report.confusion = e.confusion;
        report.confusion_of = def.name.clone();
        headline = Some(decided);
    }
    let all: Vec<usize> = (0..model.members.len()).collect();
    let decided = match headline {
        Some(d) => d,
        None => preds.vote(&all, k, model.tie_break)?,
    };
    report.votes = VoteLog {
        members: preds.members.clone(),
        rows: (0..ids.len())
            .map(|i| {
                (
                    ids[i],
                    labels[truth[i]],
                    all.iter().map(|&m| labels[preds.votes[m][i]]).collect(),
                    labels[decided[i]],
                )
            })
            .collect(),
    };
    Ok(report)
}

/// Runs the whole pipeline and writes the report into `cfg.out_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutput> {
    let mut timings = Timings::default();
    let ens = &cfg.ensemble;
    let (train, test) = timed(&mut timings, "load", || {
        Ok((
            load_split(&cfg.data_dir, Split::Train, cfg.train_per_class)?,
            load_split(&cfg.data_dir, Split::Test, cfg.test_per_class)?,
        ))
    })?;
    let (labels, train_classes) = label_table(&train);

    let mut memory = MemoryFeatures::<f64>::default();
    let mut codebook = None;
    if ens.streams.iter().any(|s| s.source == StreamSource::SiftFv) {
        let (train_sets, test_sets) = timed(&mut timings, "sift", || {
            Ok((
                extract_descriptors::<f64>(&train, &cfg.sift, cfg.upscale)?,
                extract_descriptors::<f64>(&test, &cfg.sift, cfg.upscale)?,
            ))
        })?;
        let gmm = timed(&mut timings, "codebook", || {
            let views: Vec<_> = train_sets.iter().map(|s| s.descriptors.view()).collect();
            fit_codebook(&views, ens.gmm_components, cfg.em_iters, cfg.em_tol, ens.seed)
        })?;
        timed(&mut timings, "fisher", || {
            for (split, sets) in [(Split::Train, &train_sets), (Split::Test, &test_sets)] {
                let views: Vec<_> = sets.iter().map(|s| (s.image_id, s.descriptors.view())).collect();
                memory.insert(LayerKey::sift_fv(), split, encode_sets(&gmm, &views)?);
            }
            Ok(())
        })?;
        codebook = Some(gmm);
    }

    let registry = match &cfg.feat_dir {
        Some(dir) => {
            let reg = FeatureRegistry::scan(dir).map_err(|e| e.in_stage("registry"))?;
            let check = validate_registry(&reg);
            for n in &check.notes {
                log::info!("registry: {n}");
            }
            for v in &check.violations {
                log::warn!("registry: {v}");
            }
            reg
        }
        None => FeatureRegistry::default(),
    };
    let source = Overlay { top: &memory, base: &registry as &dyn FeatureSource<f64> };

    let train_ids: Vec<u64> = train.iter().map(|i| u64::from(i.id)).collect();
    let model = timed(&mut timings, "train", || train_ensemble(ens, &source, &train_ids, &train_classes, &labels))?;

    let report = timed(&mut timings, "evaluate", || {
        evaluate_model(&model, &ens.ensembles(), &source, Split::Test, &test, ens.seed)
    })?;

    emit_report(&report, &cfg.out_dir).map_err(|e| e.in_stage("report"))?;
    timings.write(&cfg.out_dir.join("timings.txt")).map_err(|e| e.in_stage("report"))?;
    Ok(RunOutput { report, timings, model, codebook })
}
