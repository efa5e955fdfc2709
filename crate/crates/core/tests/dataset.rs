mod common;

use std::collections::BTreeMap;
use std::path::Path;

use octfew::dataset::{
    self, make_folds, read_manifest, sample_class, scan_directory, write_manifest, ClassLabel, ClassMapping,
    DatasetManifest, ImageRecord, Provenance,
};
use octfew::Error;
use proptest::prelude::*;

fn touch_png(path: &Path) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::RgbImage::from_pixel(4, 4, image::Rgb([9, 9, 9])).save(path).unwrap();
}

#[test]
fn scan_counts_each_class_directory() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..3 {
        touch_png(&dir.path().join(format!("NORMAL/n{i}.png")));
    }
    for i in 0..2 {
        touch_png(&dir.path().join(format!("CNV/c{i}.png")));
    }
    std::fs::write(dir.path().join("CNV/readme.txt"), "not an image").unwrap();
    let m = scan_directory(dir.path(), &ClassMapping::canonical()).unwrap();
    assert_eq!(m.len(), 5);
    assert_eq!(m.counts(), &BTreeMap::from([(ClassLabel::Normal, 3), (ClassLabel::Cnv, 2)]));
    assert!(m.records().iter().all(|r| r.provenance == Provenance::Real));
    let paths: Vec<_> = m.records().iter().map(|r| r.path.clone()).collect();
    let mut sorted = paths.clone();
    sorted.sort();
    assert_eq!(paths, sorted);
}

#[test]
fn empty_root_gives_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = scan_directory(dir.path(), &ClassMapping::canonical()).unwrap();
    assert!(m.is_empty());
}

#[test]
fn unmapped_directory_is_named_unless_ignored() {
    let dir = tempfile::tempdir().unwrap();
    touch_png(&dir.path().join("NORMAL/a.png"));
    touch_png(&dir.path().join("scratch/b.png"));
    match scan_directory(dir.path(), &ClassMapping::canonical()) {
        Err(Error::UnmappedDirectory(name)) => assert_eq!(name, "scratch"),
        other => panic!("expected unmapped directory error, got {other:?}"),
    }
    let m = scan_directory(dir.path(), &ClassMapping::canonical().ignoring("scratch")).unwrap();
    assert_eq!(m.len(), 1);
}

#[test]
fn undecodable_files_are_excluded_and_noted() {
    let dir = tempfile::tempdir().unwrap();
    touch_png(&dir.path().join("RP/good.png"));
    std::fs::write(dir.path().join("RP/bad.png"), b"definitely not a png").unwrap();
    let m = scan_directory(dir.path(), &ClassMapping::canonical()).unwrap();
    assert_eq!(m.len(), 1);
    assert!(m.notes().contains("excluded 1"), "{}", m.notes());
}

fn corpus(per_class: usize) -> DatasetManifest {
    let mut records = Vec::new();
    for label in ClassLabel::ALL {
        for i in 0..per_class {
            records.push(ImageRecord::real(
                format!("{}/{i}", label.name()),
                format!("/data/{}/{i}.png", label.name()),
                label,
            ));
        }
    }
    DatasetManifest::with_timestamp(records, 1, "fixture", "2020-01-01T00:00:00Z".into()).unwrap()
}

fn derived(parent: &ImageRecord, id: &str, provenance: Provenance, label: ClassLabel) -> ImageRecord {
    ImageRecord {
        id: id.into(),
        path: format!("/syn/{id}.png").into(),
        label,
        provenance,
        source_id: Some(parent.id.clone()),
        seed: Some(3),
    }
}

#[test]
fn manifest_round_trip_is_identity_and_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(3);
    let p = dir.path().join("m.json");
    write_manifest(&m, &p).unwrap();
    let back = read_manifest(&p).unwrap();
    assert_eq!(back, m);
    let q = dir.path().join("again.json");
    write_manifest(&back, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn hand_edited_duplicate_is_rejected() {
    let m = corpus(2);
    let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
    let records = v["records"].as_array_mut().unwrap();
    let first = records[0].clone();
    records[1] = first;
    let err = DatasetManifest::from_json(&v.to_string()).unwrap_err();
    assert!(err.to_string().contains("duplicate"), "{err}");
}

#[test]
fn newer_schema_is_a_versioned_error() {
    let m = corpus(1);
    let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
    v["schema_version"] = "9.0".into();
    match DatasetManifest::from_json(&v.to_string()) {
        Err(Error::SchemaVersion { found, expected }) => {
            assert_eq!(found, "9.0");
            assert_eq!(expected, m.schema_version());
        }
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn sample_class_is_exact_and_reproducible() {
    let m = corpus(40);
    let a = sample_class(&m, ClassLabel::Cnv, 25, 9).unwrap();
    let b = sample_class(&m, ClassLabel::Cnv, 25, 9).unwrap();
    let c = sample_class(&m, ClassLabel::Cnv, 25, 10).unwrap();
    let ids = |m: &DatasetManifest| m.records().iter().map(|r| r.id.clone()).collect::<Vec<_>>();
    assert_eq!(a.len(), 25);
    assert!(a.records().iter().all(|r| r.label == ClassLabel::Cnv));
    assert_eq!(ids(&a), ids(&b));
    assert_ne!(ids(&a), ids(&c));
    let mut unique = ids(&a);
    unique.dedup();
    assert_eq!(unique.len(), 25);
}

#[test]
fn ancestor_guard_holds_for_multi_level_lineage() {
    let base = corpus(10);
    let mut records = base.records().to_vec();
    let normals: Vec<ImageRecord> = base.of_class(ClassLabel::Normal).cloned().collect();
    let rares: Vec<ImageRecord> = base.of_class(ClassLabel::Rp).cloned().collect();
    for (i, n) in normals.iter().enumerate() {
        let g = derived(n, &format!("gen{i}"), Provenance::Generated, ClassLabel::Rp);
        let a = derived(&g, &format!("gen{i}-aug"), Provenance::Augmented, ClassLabel::Rp);
        records.push(g);
        records.push(a);
    }
    for (i, r) in rares.iter().enumerate() {
        records.push(derived(r, &format!("aug{i}"), Provenance::Augmented, ClassLabel::Rp));
    }
    let m = DatasetManifest::new(records, 1, "lineage").unwrap();
    for seed in 0..5 {
        let plan = make_folds(&m, 5, seed).unwrap();
        assert_eq!(common::split_violations(&m, &plan), Vec::<String>::new());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stratified_fold_sizes_differ_by_at_most_one(
        sizes in proptest::collection::vec(5usize..30, 9),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let mut records = Vec::new();
        for (label, &n) in ClassLabel::ALL.iter().zip(&sizes) {
            for i in 0..n {
                records.push(ImageRecord::real(format!("{label}{i}"), format!("/{label}/{i}.png"), *label));
            }
        }
        let m = DatasetManifest::new(records, 0, "").unwrap();
        let plan = make_folds(&m, k, seed).unwrap();
        let mut per: BTreeMap<(ClassLabel, usize), usize> = BTreeMap::new();
        let mut union = 0;
        for fold in 0..k {
            let test = plan.test_records(&m, fold);
            union += test.len();
            for r in test {
                *per.entry((r.label, fold)).or_default() += 1;
            }
        }
        prop_assert_eq!(union, m.len());
        for label in ClassLabel::ALL {
            let counts: Vec<usize> = (0..k).map(|f| per.get(&(label, f)).copied().unwrap_or(0)).collect();
            let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
            prop_assert!(spread <= 1, "{label}: {counts:?}");
        }
    }
}

#[test]
fn sample_shortfall_names_the_gap() {
    let m = corpus(4);
    let err = dataset::sample_class(&m, ClassLabel::Mh, 10, 0).unwrap_err();
    assert!(err.to_string().contains("short by 6"), "{err}");
}
