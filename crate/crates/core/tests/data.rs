use std::fs;

use fewmax::data::{extract_patches, load_dataset, subset_few_shot, write_dataset, FewShotSpec, PatchSpec, SampleRecord};
use fewmax::fixture::{complex_domain, image_domain, ComplexDomain, ImageDomain};
use fewmax::Error;
use ndarray::Array3;

#[test]
fn manifest_roundtrip_keeps_order_labels_and_bits() {
    let dir = tempfile::tempdir().unwrap();
    let records = image_domain(ImageDomain::B, "rt", 3, 4, 8, 0.5, 2).unwrap();
    let manifest = write_dataset(dir.path(), &records).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back, records);
}

#[test]
fn missing_tensor_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.tsv");
    fs::write(&manifest, "path\tlabel\tdomain\nnope.npy\t0\ta\n").unwrap();
    assert!(matches!(load_dataset(&manifest), Err(Error::Load { .. })));
    assert!(matches!(load_dataset(&dir.path().join("absent.tsv")), Err(Error::Load { .. })));
}

#[test]
fn malformed_manifest_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.tsv");
    fs::write(&manifest, "file\tclass\n").unwrap();
    assert!(matches!(load_dataset(&manifest), Err(Error::Schema(_))));
}

#[test]
fn mixed_channel_counts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = SampleRecord::new("a", Array3::zeros((4, 4, 1)), None, "x").unwrap();
    let b = SampleRecord::new("b", Array3::zeros((4, 4, 2)), None, "x").unwrap();
    let manifest = write_dataset(dir.path(), &[a, b]).unwrap();
    assert!(matches!(load_dataset(&manifest), Err(Error::Schema(_))));
}

#[test]
fn non_finite_samples_are_rejected() {
    let t = Array3::from_elem((2, 2, 1), f64::NAN);
    assert!(matches!(SampleRecord::new("bad", t, None, "x"), Err(Error::Data { .. })));
}

#[test]
fn few_shot_subset_sizes_and_stability() {
    let records = image_domain(ImageDomain::B, "pool", 5, 12, 8, 0.5, 0).unwrap();
    let spec = FewShotSpec {
        class_ids: vec![0, 2, 4],
        per_class: 10,
        seed: 7,
    };
    let subset = subset_few_shot(&records, &spec).unwrap();
    assert_eq!(subset.len(), 30);
    for c in [0, 2, 4] {
        assert_eq!(subset.iter().filter(|r| r.label == Some(c)).count(), 10);
    }
    assert_eq!(subset, subset_few_shot(&records, &spec).unwrap());
    // A class's draw does not depend on the other classes requested.
    let alone = subset_few_shot(&records, &FewShotSpec { class_ids: vec![2], ..spec.clone() }).unwrap();
    let within: Vec<_> = subset.iter().filter(|r| r.label == Some(2)).cloned().collect();
    assert_eq!(alone, within);
    let too_many = FewShotSpec { per_class: 13, ..spec };
    assert!(matches!(subset_few_shot(&records, &too_many), Err(Error::Capacity(_))));
}

#[test]
fn patches_stay_inside_complex_slices() {
    let slices = complex_domain(ComplexDomain::Knee, "t", 3, 32, 1).unwrap();
    let spec = PatchSpec {
        patch_size: 16,
        patches_per_slice: 5,
        seed: 0,
    };
    for s in &slices {
        let patches = extract_patches(s, &spec).unwrap();
        assert_eq!(patches.len(), 5);
        assert!(patches.iter().all(|p| p.tensor.dim() == (16, 16, 2) && p.is_complex()));
    }
    let big = PatchSpec { patch_size: 40, ..spec };
    assert!(matches!(extract_patches(&slices[0], &big), Err(Error::Dimension(_))));
}
