mod support;

use ssdet::data::{build_subset, SubsetSpec, TINY_CLASSES};

#[test]
fn subset_matrix_shapes_match_both_datasets() {
    let summary = support::protocol_shapes().unwrap();
    println!("{summary}");
}

#[test]
fn voc_sized_manifest_is_reproducible() {
    let a = support::voc_sized_manifest(1).to_json_bytes().unwrap();
    let b = support::voc_sized_manifest(1).to_json_bytes().unwrap();
    assert_eq!(a, b);
}

#[test]
fn different_seeds_draw_different_subsets() {
    let voc = support::voc_sized_manifest(2);
    let a = build_subset(&voc, &SubsetSpec::new(&TINY_CLASSES, 50, 1)).unwrap();
    let b = build_subset(&voc, &SubsetSpec::new(&TINY_CLASSES, 50, 2)).unwrap();
    assert_ne!(a.records, b.records);
}

#[test]
fn oversized_request_reports_capacity() {
    let voc = support::voc_sized_manifest(3);
    let err = build_subset(&voc, &SubsetSpec::new(&["sofa"], 5000, 1)).unwrap_err();
    assert!(err.to_string().contains("sofa"), "{err}");
}
