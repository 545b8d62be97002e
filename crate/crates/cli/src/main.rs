use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ensvis_core::codebook::{read_gmm, train_codebook, write_gmm};
use ensvis_core::dataset::{Split, Upscale};
use ensvis_core::ensemble::{
    load_ensemble, save_ensemble, train_ensemble, EnsembleConfig, FeatureMatrix, LayerKey, SIFT_FV_MODEL,
};
use ensvis_core::featstore::{read_features, validate_registry, write_features, FeatureFile, FeatureRegistry};
use ensvis_core::pca::{fit_pca, write_pca};
use ensvis_core::pipeline::{
    descriptors_from_file, descriptors_to_file, encode_sets, evaluate_model, extract_descriptors, label_table,
    load_split, run_pipeline, RunConfig, DEFAULT_EM_ITERS, DEFAULT_EM_TOL,
};
use ensvis_core::report::{emit_report, read_report_csv, EvalReport, TableRow};
use ensvis_core::sift::SiftParams;
use ensvis_core::svm::{l2_normalize_rows, select_c, train_ovr, write_svm, TrainOptions};
use ensvis_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ensvis", version, about = "CIFAR-10 classification from SIFT Fisher Vectors and deep features")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long, env = "ENSVIS_DATA_DIR")]
    data_dir: PathBuf,
    /// Keep only the first N images per class.
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Args, Clone)]
struct EnsembleArgs {
    /// Ensemble configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: deep-ensemble, sift-deep-ensemble, sift-only, vgg16-567,
    /// alexnet-457, alexnet-467, all-streams.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-class corpus in the CIFAR-10 binary layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
    },
    /// Extract SIFT descriptors for one split into a feature file.
    ExtractSift {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 2)]
        upscale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the GMM codebook on extracted descriptors.
    TrainGmm {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long, default_value_t = 64)]
        components: usize,
        #[arg(long, default_value_t = DEFAULT_EM_ITERS)]
        iters: usize,
        #[arg(long, default_value_t = DEFAULT_EM_TOL)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode normalized Fisher Vectors, one row per image.
    EncodeFv {
        #[arg(long)]
        gmm: PathBuf,
        #[arg(long)]
        descriptors: PathBuf,
        /// Output file; `<feat-dir>/sift-fv_0_<split>.dfv` makes it visible to ensembles.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit PCA on a feature file.
    FitPca {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        components: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a one-vs-rest linear SVM on a feature file (rows are L2-normalized first).
    TrainSvm {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        features: PathBuf,
        /// Fixed C; otherwise chosen by cross-validation over the default grid.
        #[arg(long)]
        c: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every stream of an ensemble from stored features.
    TrainEnsemble {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ensemble: EnsembleArgs,
        #[arg(long, env = "ENSVIS_FEAT_DIR")]
        feat_dir: PathBuf,
        /// Output model directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained ensemble on the test split and write the report.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, env = "ENSVIS_FEAT_DIR")]
        feat_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the accuracy table stored in a report directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Check stored feature files against the known layer dimensions.
    Registry {
        #[arg(long, env = "ENSVIS_FEAT_DIR")]
        feat_dir: PathBuf,
    },
    /// Full pipeline: SIFT, codebook, Fisher Vectors, per-stream SVMs, voting, report.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ensemble: EnsembleArgs,
        #[arg(long, env = "ENSVIS_FEAT_DIR")]
        feat_dir: Option<PathBuf>,
        /// First N test images per class.
        #[arg(long)]
        test_subset: Option<usize>,
        #[arg(long, default_value_t = 2)]
        upscale: usize,
        /// Drop configured deep streams whose feature files are absent.
        #[arg(long)]
        available_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn ensemble_config(args: &EnsembleArgs, seed: u64) -> Result<EnsembleConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => EnsembleConfig::load(path)?,
        (None, Some(p)) => EnsembleConfig::preset(p)?,
        (None, None) => EnsembleConfig::preset("sift-deep-ensemble")?,
    };
    if args.config.is_none() {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Labels of `split` keyed by image id.
fn label_map(data: &DataArgs, split: Split) -> Result<HashMap<u64, u8>> {
    Ok(load_split(&data.data_dir, split, data.subset)?.into_iter().map(|i| (u64::from(i.id), i.label)).collect())
}

fn labelled_rows(ff: &FeatureFile, labels: &HashMap<u64, u8>) -> Result<(FeatureMatrix<f64>, Vec<u32>)> {
    let full = FeatureMatrix::<f64>::from_file(ff);
    let ids: Vec<u64> = ff.ids.iter().copied().filter(|id| labels.contains_key(id)).collect();
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no feature rows match the selected images".into()));
    }
    let data = full.select(&ids, &ff.model_name)?;
    let y = ids.iter().map(|id| u32::from(labels[id])).collect();
    Ok((FeatureMatrix { ids, data }, y))
}

fn print_rows(rows: &[TableRow]) {
    let mut r = EvalReport::default();
    for row in rows {
        if let Some(a) = row.svm {
            r.record(&row.name, false, a);
        }
        if let Some(a) = row.pca_svm {
            r.record(&row.name, true, a);
        }
    }
    print!("{}", r.table_text());
}

fn execute(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { out, train_per_class, test_per_class } => {
            ensvis_core::synth::write_textured_corpus(&out, train_per_class, test_per_class, seed)
                .map_err(|e| e.in_stage("synth"))?;
            println!("wrote {} training and {} test images to {}", 2 * train_per_class, 2 * test_per_class, out.display());
        }
        Command::ExtractSift { data, split, upscale, out } => {
            let stage = |e: Error| e.in_stage("extract-sift");
            let images = load_split(&data.data_dir, split, data.subset).map_err(stage)?;
            let upscale = Upscale::try_from(upscale).map_err(stage)?;
            let sets = extract_descriptors::<f64>(&images, &SiftParams::default(), upscale).map_err(stage)?;
            let dense = sets.iter().filter(|s| s.dense).count();
            let ff = descriptors_to_file(&sets).map_err(stage)?;
            write_features(&ff, &out).map_err(stage)?;
            println!("{} images, {} descriptors ({dense} dense fallbacks) -> {}", images.len(), ff.count(), out.display());
        }
        Command::TrainGmm { descriptors, components, iters, tol, out } => {
            let stage = |e: Error| e.in_stage("train-gmm");
            let ff = read_features(&descriptors).map_err(stage)?;
            let fit = train_codebook(ff.to_matrix::<f64>().view(), components, iters, tol, seed).map_err(stage)?;
            write_gmm(&fit.params, &out).map_err(stage)?;
            println!(
                "{components} components on {} descriptors, {} EM iterations, log-likelihood {:.6e}",
                ff.count(),
                fit.trace.len() - 1,
                fit.trace.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::EncodeFv { gmm, descriptors, out } => {
            let stage = |e: Error| e.in_stage("encode-fv");
            let gmm = read_gmm::<f64>(&gmm).map_err(stage)?;
            let groups = descriptors_from_file::<f64>(&read_features(&descriptors).map_err(stage)?).map_err(stage)?;
            let views: Vec<_> = groups.iter().map(|(id, m)| (*id, m.view())).collect();
            let fv = encode_sets(&gmm, &views).map_err(stage)?;
            let ff = FeatureFile::from_matrix(SIFT_FV_MODEL, 0, fv.ids, &fv.data).map_err(stage)?;
            write_features(&ff, &out).map_err(stage)?;
            println!("{} Fisher Vectors of length {} -> {}", ff.count(), ff.dim, out.display());
        }
        Command::FitPca { features, components, out } => {
            let stage = |e: Error| e.in_stage("fit-pca");
            let ff = read_features(&features).map_err(stage)?;
            let mut x = ff.to_matrix::<f64>();
            l2_normalize_rows(&mut x);
            let model = fit_pca(x.view(), components).map_err(stage)?;
            write_pca(&model, &out).map_err(stage)?;
            let kept: f64 = model.eigenvalues.sum();
            println!("{} -> {components} dimensions, retained variance {kept:.6}", ff.dim);
        }
        Command::TrainSvm { data, features, c, out } => {
            let stage = |e: Error| e.in_stage("train-svm");
            let labels = label_map(&data, Split::Train).map_err(stage)?;
            let ff = read_features(&features).map_err(stage)?;
            let (mut m, y) = labelled_rows(&ff, &labels).map_err(stage)?;
            l2_normalize_rows(&mut m.data);
            let mut table = y.clone();
            table.sort_unstable();
            table.dedup();
            let classes: Vec<usize> = y.iter().map(|l| table.binary_search(l).expect("label in table")).collect();
            let opts = TrainOptions { seed, ..Default::default() };
            let c = match c {
                Some(c) => c,
                None => select_c(m.data.view(), &classes, &table, &ensvis_core::svm::DEFAULT_C_GRID, 3, &opts)
                    .map_err(stage)?,
            };
            let model = train_ovr(m.data.view(), &classes, &table, &TrainOptions { c, ..opts }).map_err(stage)?;
            write_svm(&model, &out).map_err(stage)?;
            println!("{} classes on {} rows, C = {c}", table.len(), m.ids.len());
        }
        Command::TrainEnsemble { data, ensemble, feat_dir, out } => {
            let stage = |e: Error| e.in_stage("train-ensemble");
            let cfg = ensemble_config(&ensemble, seed).map_err(stage)?;
            let images = load_split(&data.data_dir, Split::Train, data.subset).map_err(stage)?;
            let (table, classes) = label_table(&images);
            let ids: Vec<u64> = images.iter().map(|i| u64::from(i.id)).collect();
            let registry = FeatureRegistry::scan(&feat_dir).map_err(stage)?;
            let model = train_ensemble::<f64>(&cfg, &registry, &ids, &classes, &table).map_err(stage)?;
            save_ensemble(&model, &cfg.ensembles(), &out).map_err(stage)?;
            println!("trained {} streams -> {}", model.members.len(), out.display());
        }
        Command::Evaluate { data, model, feat_dir, out } => {
            let stage = |e: Error| e.in_stage("evaluate");
            let (model, ensembles) = load_ensemble::<f64>(&model).map_err(stage)?;
            let images = load_split(&data.data_dir, Split::Test, data.subset).map_err(stage)?;
            let registry = FeatureRegistry::scan(&feat_dir).map_err(stage)?;
            let report = evaluate_model(&model, &ensembles, &registry, Split::Test, &images, seed).map_err(stage)?;
            emit_report(&report, &out).map_err(|e| e.in_stage("report"))?;
            print!("{}", report.to_text());
        }
        Command::Report { dir } => {
            let rows = read_report_csv(&dir.join("report.csv")).map_err(|e| e.in_stage("report"))?;
            print_rows(&rows);
        }
        Command::Registry { feat_dir } => {
            let registry = FeatureRegistry::scan(&feat_dir).map_err(|e| e.in_stage("registry"))?;
            let report = validate_registry(&registry);
            for (model, layer) in registry.entries.keys() {
                println!("{}", LayerKey::new(model, *layer));
            }
            for n in &report.notes {
                println!("note: {n}");
            }
            for v in &report.violations {
                println!("violation: {v}");
            }
            if !report.is_ok() {
                return Err(Error::Registry {
                    stream: feat_dir.display().to_string(),
                    reason: format!("{} violations", report.violations.len()),
                }
                .in_stage("registry"));
            }
        }
        Command::Run { data, ensemble, feat_dir, test_subset, upscale, available_only, out } => {
            let mut cfg = ensemble_config(&ensemble, seed).map_err(|e| e.in_stage("config"))?;
            if available_only {
                let registry = match &feat_dir {
                    Some(d) => FeatureRegistry::scan(d).map_err(|e| e.in_stage("registry"))?,
                    None => FeatureRegistry::default(),
                };
                cfg.retain_available(&registry);
                let ids: Vec<String> = cfg.streams.iter().map(|s| s.id()).collect();
                cfg.ensembles.retain(|e| e.members.iter().all(|m| ids.contains(m)));
                if cfg.streams.is_empty() {
                    return Err(Error::InvalidArgument("no configured stream has features available".into())
                        .in_stage("config"));
                }
            }
            let mut run = RunConfig::new(data.data_dir, out.clone(), cfg);
            run.feat_dir = feat_dir;
            run.train_per_class = data.subset;
            run.test_per_class = test_subset;
            run.upscale = Upscale::try_from(upscale).map_err(|e| e.in_stage("config"))?;
            let output = run_pipeline(&run)?;
            print!("{}", output.report.to_text());
            log::info!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: {msg}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let text = s.to_string();
                if !msg.contains(&text) {
                    eprintln!("  caused by: {text}");
                }
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
