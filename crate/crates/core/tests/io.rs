//! Point-cloud files, manifests, images and synthetic shapes.

mod common;

use common::*;
use pointconv::data::{
    bar_images, classification_split, decode_pcb, decode_xyz, encode_pcb, encode_xyz, generate_shapes, image_to_pointcloud,
    load_cloud, save_cloud, segmentation_split, write_dataset, Image, Manifest, Shape, ShapeSpec, BAR_SIDE,
};
use pointconv::{Error, PointCloud, Task};
use std::path::Path;

fn labelled_cloud() -> PointCloud<f32> {
    let mut r = rng(1);
    let pos: Vec<f32> = uniform(&mut r, 10 * 3, -1.0, 1.0).iter().map(|&v| v as f32).collect();
    let feats: Vec<f32> = uniform(&mut r, 10 * 2, -1.0, 1.0).iter().map(|&v| v as f32).collect();
    let mut c = PointCloud::new(3, pos, 2, feats).unwrap();
    c.class_label = Some(3);
    c.point_labels = Some((0..10).map(|i| i % 3).collect());
    c
}

#[test]
fn pcb_round_trip_is_bitwise() {
    let c = labelled_cloud();
    let bytes = encode_pcb(&c);
    let back = decode_pcb::<f32>(&bytes, Path::new("a.pcb")).unwrap();
    assert_eq!(back.positions, c.positions);
    assert_eq!(back.features, c.features);
    assert_eq!(back.class_label, Some(3));
    assert_eq!(back.point_labels, c.point_labels);
    assert_eq!(encode_pcb(&back), bytes);
}

#[test]
fn pcb_without_labels_has_no_flag_byte() {
    let mut c = labelled_cloud();
    c.class_label = None;
    c.point_labels = None;
    let bytes = encode_pcb(&c);
    assert_eq!(bytes.len(), 16 + 4 * 10 * 5);
    let back = decode_pcb::<f32>(&bytes, Path::new("a.pcb")).unwrap();
    assert!(back.class_label.is_none() && back.point_labels.is_none());
}

#[test]
fn truncated_pcb_names_expected_and_actual_size() {
    let bytes = encode_pcb(&labelled_cloud());
    let cut = &bytes[..100];
    match decode_pcb::<f32>(cut, Path::new("cut.pcb")) {
        Err(Error::Truncated { expected, actual, .. }) => {
            assert_eq!(actual, 100);
            assert_eq!(expected, 16 + 4 * 10 * 5);
        }
        other => panic!("expected truncation error, got {other:?}"),
    }
    assert!(matches!(decode_pcb::<f32>(&bytes[..8], Path::new("h.pcb")), Err(Error::Truncated { expected: 16, actual: 8, .. })));
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    assert!(matches!(decode_pcb::<f32>(&bad, Path::new("m.pcb")), Err(Error::Format { .. })));
}

#[test]
fn xyz_with_three_columns_has_no_channels() {
    let text = "# comment\n0 0 0\n\n1 2 3\n-1.5 0.25 4\n";
    let c = decode_xyz::<f64>(text, Path::new("p.xyz")).unwrap();
    assert_eq!(c.len(), 3);
    assert_eq!(c.channels, 0);
    assert_eq!(c.position(2), &[-1.5, 0.25, 4.0]);
}

#[test]
fn xyz_rejects_ragged_and_bad_rows() {
    let p = Path::new("p.xyz");
    assert!(matches!(decode_xyz::<f64>("0 0 0 1\n0 0 0\n", p), Err(Error::Format { .. })));
    assert!(matches!(decode_xyz::<f64>("0 0\n", p), Err(Error::Format { .. })));
    assert!(matches!(decode_xyz::<f64>("0 x 0\n", p), Err(Error::Format { .. })));
    assert!(matches!(decode_xyz::<f64>("0 nan 0\n", p), Err(Error::Format { .. })));
    assert!(matches!(decode_xyz::<f64>("# empty\n", p), Err(Error::Format { .. })));
}

#[test]
fn xyz_round_trip_preserves_values() {
    let c = labelled_cloud();
    let back = decode_xyz::<f32>(&encode_xyz(&c).unwrap(), Path::new("a.xyz")).unwrap();
    assert_eq!(back.positions, c.positions);
    assert_eq!(back.features, c.features);
    let flat = PointCloud::<f32>::from_positions(2, vec![0.0; 4]).unwrap();
    assert!(encode_xyz(&flat).is_err());
}

#[test]
fn files_dispatch_on_extension() {
    let dir = tempfile::tempdir().unwrap();
    let c = labelled_cloud();
    for name in ["a.pcb", "a.xyz"] {
        let p = dir.path().join(name);
        save_cloud(&c, &p).unwrap();
        assert_eq!(load_cloud::<f32>(&p).unwrap().positions, c.positions);
    }
    assert!(matches!(save_cloud(&c, &dir.path().join("a.txt")), Err(Error::Format { .. })));
    assert!(matches!(load_cloud::<f32>(&dir.path().join("missing.pcb")), Err(Error::Io { .. })));
}

#[test]
fn manifest_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = classification_split::<f32>(6, 1, 32, 2).unwrap();
    let path = write_dataset(dir.path(), "train", &train, Some(Task::Classify), 4).unwrap();
    let manifest = Manifest::load(&path).unwrap();
    assert_eq!(manifest.classes, 4);
    assert_eq!(manifest.task, Some(Task::Classify));
    let loaded = manifest.load_clouds::<f32>(&path).unwrap();
    assert_eq!(loaded.len(), 6);
    for (a, b) in loaded.iter().zip(&train) {
        assert_eq!(a.positions, b.positions);
        assert_eq!(a.class_label, b.class_label);
    }
}

#[test]
fn manifest_label_overrides_file_label() {
    let dir = tempfile::tempdir().unwrap();
    save_cloud(&labelled_cloud(), &dir.path().join("c.pcb")).unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(&path, r#"{"classes": 8, "clouds": [{"path": "c.pcb", "label": 7}, {"path": "c.pcb"}]}"#).unwrap();
    let clouds = Manifest::load(&path).unwrap().load_clouds::<f32>(&path).unwrap();
    assert_eq!(clouds[0].class_label, Some(7));
    assert_eq!(clouds[1].class_label, Some(3));
}

#[test]
fn constant_image_gives_constant_features() {
    let img = Image::new(5, 5, 3, vec![51; 75]).unwrap();
    let c = image_to_pointcloud::<f64>(&img).unwrap();
    assert_eq!((c.len(), c.dim, c.channels), (25, 2, 3));
    assert!(c.features.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    assert!(Image::new(2, 2, 1, vec![0; 3]).is_err());
}

#[test]
fn image_grid_neighbors_are_pixel_neighbors() {
    let side = 6;
    let img = Image::new(side, side, 1, vec![0; side * side]).unwrap();
    let c = image_to_pointcloud::<f64>(&img).unwrap();
    let corner = c.positions.chunks(2).map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).fold(0.0, f64::max);
    assert!((corner - 1.0).abs() < 1e-12);
    let step = sq_dist(c.position(0), c.position(1)).sqrt();
    // Interior pixel: its four nearest points are exactly its 4-neighbours.
    let (r, col) = (2, 3);
    let i = r * side + col;
    let order = sorted_neighbors(c.position(i), &c.positions, 2);
    assert_eq!(order[0], i);
    let mut four = order[1..5].to_vec();
    four.sort_unstable();
    assert_eq!(four, vec![i - side, i - 1, i + 1, i + side]);
    for &j in &four {
        assert!((sq_dist(c.position(i), c.position(j)).sqrt() - step).abs() < 1e-12);
    }
    assert!(sq_dist(c.position(i), c.position(order[5])).sqrt() > step * 1.4);
}

#[test]
fn bar_images_are_balanced_and_bright() {
    let set = bar_images(10, BAR_SIDE, 4);
    assert_eq!(set.iter().filter(|(_, l)| *l == 0).count(), 5);
    for (img, _) in &set {
        assert!(img.data.iter().filter(|&&v| v >= 180).count() >= BAR_SIDE);
    }
}

#[test]
fn sphere_points_have_unit_norm() {
    let spec = ShapeSpec { shape: Shape::Sphere, n_points: 128, noise_sigma: 0.0, seed: 9, parts: false };
    let c = pointconv::data::sample_shape::<f64>(&spec).unwrap();
    for p in c.positions.chunks(3) {
        assert!((sq_dist(p, &[0.0; 3]).sqrt() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cube_points_lie_on_faces() {
    let spec = ShapeSpec { shape: Shape::Cube, n_points: 200, noise_sigma: 0.0, seed: 2, parts: false };
    let c = pointconv::data::sample_shape::<f64>(&spec).unwrap();
    let norms: Vec<f64> = c.positions.chunks(3).map(|p| p.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect();
    let scale = norms.iter().copied().fold(0.0, f64::max);
    for n in norms {
        assert!((n - scale).abs() < 1e-12);
    }
    // Corner distance is sqrt(3) before the unit-norm rescale.
    assert!((scale - 1.0 / 3f64.sqrt()).abs() < 0.05);
}

#[test]
fn generated_sets_have_requested_class_counts() {
    let all = generate_shapes::<f32>(&Shape::ALL, 3, 32, 0.01, false, 1).unwrap();
    for class in 0..4 {
        assert_eq!(all.iter().filter(|c| c.class_label == Some(class)).count(), 3);
    }
    let (train, test) = segmentation_split::<f32>(5, 3, 64, 1).unwrap();
    assert_eq!((train.len(), test.len()), (5, 3));
    for c in train.iter().chain(&test) {
        let labels = c.point_labels.as_ref().unwrap();
        assert_eq!(labels.len(), 64);
        assert!(labels.iter().all(|&l| l < 2));
    }
    assert_eq!(
        generate_shapes::<f32>(&Shape::ALL, 2, 32, 0.01, false, 5).unwrap()[0].positions,
        generate_shapes::<f32>(&Shape::ALL, 2, 32, 0.01, false, 5).unwrap()[0].positions
    );
}
