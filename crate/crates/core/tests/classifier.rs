use std::collections::BTreeMap;

use candle_core::Tensor;
use octfew::attention::{self, AttentionConfig, AttentionVariant};
use octfew::classifier::{
    build_model, fine_tune, predict, BackboneConfig, Classifier, FreezePolicy, TrainConfig,
};
use octfew::dataset::{ClassLabel, DatasetManifest, ImageRecord};
use octfew::synth::{self, BlobSpec};
use octfew::Error;

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

fn params(model: &Classifier) -> BTreeMap<String, Vec<f32>> {
    model.store().snapshot().unwrap().iter().map(|(k, v)| (k.clone(), flat(v))).collect()
}

fn corpus(dir: &std::path::Path, per: usize, classes: &[ClassLabel], seed: u64) -> DatasetManifest {
    let counts: Vec<_> = classes.iter().map(|&c| (c, per)).collect();
    synth::write_blob_corpus(dir, &counts, seed, &BlobSpec::default()).unwrap()
}

fn quick(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: batch,
        learning_rate: 3e-3,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_builds_identical_models() {
    let a = build_model(&BackboneConfig { seed: 3, ..BackboneConfig::toy() }).unwrap();
    let b = build_model(&BackboneConfig { seed: 3, ..BackboneConfig::toy() }).unwrap();
    let c = build_model(&BackboneConfig { seed: 4, ..BackboneConfig::toy() }).unwrap();
    assert_eq!(params(&a), params(&b));
    assert_ne!(params(&a), params(&c));
}

#[test]
fn final_layers_only_leaves_trunk_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 4, &ClassLabel::ALL, 1);
    let model = build_model(&BackboneConfig::toy()).unwrap();
    let before = params(&model);
    let trained = fine_tune(model, &m, None, &quick(2, 8), FreezePolicy::FinalLayersOnly).unwrap();
    let after = params(&trained.model);
    for (name, v) in &before {
        let layer = name.split('.').next().unwrap();
        if ["features", "head"].contains(&layer) {
            assert_ne!(&after[name], v, "{name} did not move");
        } else {
            assert_eq!(&after[name], v, "{name} moved");
        }
    }
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 3, &ClassLabel::ALL, 2);
    let run = || {
        let model = build_model(&BackboneConfig::toy()).unwrap();
        let t = fine_tune(model, &m, None, &quick(1, 1), FreezePolicy::Full).unwrap();
        (params(&t.model), t.log)
    };
    assert_eq!(run(), run());
}

#[test]
fn overfits_ninety_images() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 10, &ClassLabel::ALL, 3);
    assert_eq!(m.len(), 90);
    let model = build_model(&BackboneConfig::toy()).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-2, weight_decay: 0.0, ..quick(50, 8) };
    let t = fine_tune(model, &m, None, &cfg, FreezePolicy::Full).unwrap();
    let preds = predict(&t.model, &m).unwrap();
    let right = preds.iter().zip(m.records()).filter(|(p, r)| p.predicted == r.label.index()).count();
    assert_eq!(right, 90, "final log {:?}", t.log.last());
}

#[test]
fn separates_two_classes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let train = corpus(&dir.path().join("train"), 30, &[ClassLabel::Normal, ClassLabel::Stargardt], 5);
    let test = corpus(&dir.path().join("test"), 30, &[ClassLabel::Normal, ClassLabel::Stargardt], 6);
    let model = build_model(&BackboneConfig::toy()).unwrap();
    let t = fine_tune(model, &train, None, &quick(10, 8), FreezePolicy::Full).unwrap();
    let preds = predict(&t.model, &test).unwrap();
    let right = preds.iter().zip(test.records()).filter(|(p, r)| p.predicted == r.label.index()).count();
    assert!(right as f64 / test.len() as f64 >= 0.99, "{right}/{}", test.len());
}

#[test]
fn probabilities_form_a_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 1, &ClassLabel::ALL, 7);
    let model = build_model(&BackboneConfig::toy()).unwrap();
    let preds = predict(&model, &m).unwrap();
    assert_eq!(preds.len(), 9);
    for p in &preds {
        assert_eq!(p.probabilities.len(), 9);
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let single = DatasetManifest::new(m.records()[..1].to_vec(), 0, "").unwrap();
    assert_eq!(predict(&model, &single).unwrap().len(), 1);
}

#[test]
fn unreadable_image_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.png");
    std::fs::write(&path, b"nope").unwrap();
    let m = DatasetManifest::new(vec![ImageRecord::real("broken-1", path, ClassLabel::Mh)], 0, "").unwrap();
    let model = build_model(&BackboneConfig::toy()).unwrap();
    let err = predict(&model, &m).unwrap_err();
    assert!(err.to_string().contains("broken"), "{err}");
}

#[test]
fn attention_adds_exactly_its_parameters() {
    let base = build_model(&BackboneConfig::toy()).unwrap().num_params();
    let with = |variant| {
        let cfg = BackboneConfig {
            attention: AttentionConfig {
                variant,
                reduction_ratio: 4,
                ..AttentionConfig::default()
            },
            ..BackboneConfig::toy()
        };
        build_model(&cfg).unwrap().num_params()
    };
    let widths = [8, 16, 32];
    let se: usize = widths.iter().map(|&c| attention::se_param_count(c, 4)).sum();
    assert_eq!(with(AttentionVariant::Se), base + se);
    assert_eq!(with(AttentionVariant::Cbam), base + se + 3 * 2 * 7 * 7);
}

#[test]
fn attention_at_unknown_site_is_rejected() {
    let cfg = BackboneConfig {
        attention: AttentionConfig {
            variant: AttentionVariant::Se,
            sites: vec!["stage9".into()],
            ..AttentionConfig::default()
        },
        ..BackboneConfig::toy()
    };
    assert!(matches!(build_model(&cfg), Err(Error::UnknownSite(s)) if s == "stage9"));
}

#[test]
fn pretrained_trunk_loads_and_head_stays_fresh() {
    let dir = tempfile::tempdir().unwrap();
    let donor = build_model(&BackboneConfig { seed: 11, ..BackboneConfig::toy() }).unwrap();
    donor.save(&dir.path().join("donor"), &[]).unwrap();
    let cfg = BackboneConfig {
        seed: 12,
        pretrained_weights: Some(dir.path().join("donor")),
        attention: AttentionConfig {
            variant: AttentionVariant::Se,
            ..AttentionConfig::default()
        },
        ..BackboneConfig::toy()
    };
    let model = build_model(&cfg).unwrap();
    let (d, m) = (params(&donor), params(&model));
    let fresh = params(&build_model(&BackboneConfig { pretrained_weights: None, ..cfg.clone() }).unwrap());
    for (name, v) in &m {
        let layer = name.split('.').next().unwrap();
        if layer == "head" || !d.contains_key(name) {
            assert_eq!(v, &fresh[name], "{name}");
        } else {
            assert_eq!(v, &d[name], "{name}");
        }
    }

    let wide = build_model(&BackboneConfig::inception(0.05)).unwrap();
    wide.save(&dir.path().join("other"), &[]).unwrap();
    let bad = BackboneConfig {
        pretrained_weights: Some(dir.path().join("other")),
        ..BackboneConfig::toy()
    };
    match build_model(&bad) {
        Err(Error::WeightSchema { missing, extra }) => {
            assert!(missing.iter().any(|n| n.starts_with("stage1")));
            assert!(!extra.is_empty());
        }
        other => panic!("expected schema mismatch, got {:?}", other.err()),
    }
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 1, &ClassLabel::ALL, 8);
    let model = build_model(&BackboneConfig::toy()).unwrap();
    model.save(&dir.path().join("model"), &[]).unwrap();
    let (back, log) = Classifier::load(&dir.path().join("model")).unwrap();
    assert!(log.is_empty());
    assert_eq!(params(&back), params(&model));
    assert_eq!(predict(&back, &m).unwrap(), predict(&model, &m).unwrap());
}
