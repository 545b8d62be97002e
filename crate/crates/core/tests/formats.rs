use ensvis_core::codebook::{read_gmm, write_gmm, GmmParams};
use ensvis_core::dataset::Split;
use ensvis_core::featstore::{file_name, read_header, write_features, FeatureFile};
use ensvis_core::pca::{fit_pca, read_pca, write_pca, PcaModel};
use ensvis_core::svm::{read_svm, train_ovr, write_svm, MulticlassModel, TrainOptions};
use ensvis_core::Error;
use ndarray::{array, Array2};

#[test]
fn model_files_roundtrip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let gmm = GmmParams { weights: array![0.25, 0.75], means: array![[0.0, 1.0], [2.0, -1.0]], variances: array![[1.0, 0.5], [0.25, 2.0]] };
    write_gmm(&gmm, &dir.path().join("g")).unwrap();
    assert_eq!(read_gmm::<f64>(&dir.path().join("g")).unwrap(), gmm);
    let bytes = std::fs::read(dir.path().join("g")).unwrap();
    assert_eq!(&bytes[..4], b"GMM1");
    assert_eq!(bytes.len(), 12 + 8 * (2 + 4 + 4));

    let x = Array2::from_shape_fn((12, 3), |(i, j)| ((i * 5 + j * 3) % 7) as f64);
    let pca: PcaModel<f64> = fit_pca(x.view(), 2).unwrap();
    write_pca(&pca, &dir.path().join("p")).unwrap();
    assert_eq!(read_pca::<f64>(&dir.path().join("p")).unwrap(), pca);

    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let svm: MulticlassModel<f64> = train_ovr(x.view(), &labels, &[4, 5, 6], &TrainOptions::default()).unwrap();
    write_svm(&svm, &dir.path().join("s")).unwrap();
    let back: MulticlassModel<f64> = read_svm(&dir.path().join("s")).unwrap();
    assert_eq!(back.labels, vec![4, 5, 6]);
    for (a, b) in back.models.iter().zip(&svm.models) {
        assert_eq!(a.w, b.w);
        assert_eq!(a.b, b.b);
    }
}

#[test]
fn header_read_checks_file_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(file_name("vgg16", 7, Split::Train));
    assert!(path.ends_with("vgg16_7_train.dfv"));
    let ff = FeatureFile::new("vgg16", 7, 2, vec![3, 8], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    write_features(&ff, &path).unwrap();
    let h = read_header(&path).unwrap();
    assert_eq!((h.model_name.as_str(), h.layer_id, h.dim, h.count), ("vgg16", 7, 2, 2));
    assert_eq!(h.file_len(), std::fs::metadata(&path).unwrap().len());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_header(&path), Err(Error::Truncated { .. })));
}
