use wastewise_core::classifier::History;
use wastewise_core::dataset::{load_corpus, preprocess_image, split_corpus, ImageSet, SplitManifest};
use wastewise_core::fixtures::{synthetic_image, write_corpus};
use wastewise_core::{
    export_portable, load_portable, ClassLabel, Classifier32, Classifier64, HeadConfig, SplitRatios, TrainConfig, WeightsSource,
};

#[test]
fn corpus_to_artifact_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_corpus(&data, 5, 50, 40).unwrap();
    let corpus = load_corpus(&data).unwrap();
    assert_eq!(corpus.report.per_class, [5; 6]);

    let splits = split_corpus(&corpus.images, SplitRatios::default(), 3, true).unwrap();
    assert_eq!((splits.train.len(), splits.test.len(), splits.validation.len()), (30, 0, 0));
    let splits = split_corpus(&corpus.images, SplitRatios::new(0.5, 0.2, 0.3), 3, true).unwrap();
    assert_eq!((splits.train.len(), splits.test.len(), splits.validation.len()), (18, 6, 6));
    let manifest_path = dir.path().join("split.json");
    splits.manifest().write(&manifest_path).unwrap();
    assert_eq!(SplitManifest::read(&manifest_path).unwrap().resolve(&data).unwrap(), splits);

    let mut model = Classifier32::build("mobilenet_v2", HeadConfig::default(), &WeightsSource::Random, 8).unwrap();
    let cfg = TrainConfig { max_epochs: 2, batch_size: 6, learning_rate: 1e-3, ..TrainConfig::default() };
    let history = model.train(&splits, &cfg).unwrap().clone();
    assert_eq!(history.len(), 2);
    assert!(history.epochs.iter().all(|e| e.val_loss.is_some() && e.train_loss.is_finite()));
    assert_eq!(History::from_csv(&history.to_csv()).unwrap().epochs, history.epochs);

    let ckpt = dir.path().join("ckpt");
    model.save(&ckpt).unwrap();
    let reloaded = Classifier32::load(&ckpt).unwrap();
    let widened = Classifier64::load(&ckpt).unwrap();
    assert_eq!(reloaded.history(), &history);

    let art = export_portable(&reloaded, dir.path().join("m.onnx")).unwrap();
    let portable = load_portable(&art.model_path).unwrap();
    let entry = model.backbone();
    let val = ImageSet::load(&splits.validation, entry).unwrap();
    assert_eq!(val.len(), 6);
    for label in ClassLabel::ALL {
        let img = image::DynamicImage::ImageRgb8(synthetic_image(label, 40, 70, 70));
        let a = model.predict(&preprocess_image(&img, entry)).unwrap();
        let b = reloaded.predict(&preprocess_image(&img, entry)).unwrap();
        let c = widened.predict(&preprocess_image::<f64>(&img, entry)).unwrap();
        let d = portable.predict(&portable.prepare(&img)).unwrap();
        assert_eq!(a, b);
        for k in 0..6 {
            assert!((a.to_f64()[k] - c.0[k]).abs() < 1e-4);
            assert!((a.to_f64()[k] - d.to_f64()[k]).abs() < 1e-3);
        }
        assert_eq!(a.label(), d.label());
    }
}
