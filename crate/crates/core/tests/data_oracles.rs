//! Dataset-layer oracles: frozen facts about the MNIST distribution files,
//! IDX error handling on fabricated files, and a bilinear-rotation reference
//! computed with an independent implementation.

use std::io::Write as _;
use std::path::PathBuf;

use derbench_core::data::{
    apply_transform, load_idx, split_validation, Mnist, Split, Transform, IMAGE_PIXELS,
    IMAGE_SIDE,
};
use derbench_core::error::DataError;
use derbench_core::rng::SeedSplitter;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

#[test]
fn mnist_splits_match_frozen_facts() {
    let mnist = Mnist::load(data_dir()).expect("MNIST files present");
    assert_eq!(mnist.train.len(), 60000);
    assert_eq!(mnist.test.len(), 10000);
    assert_eq!(mnist.train.split, Split::Train);
    assert_eq!(mnist.test.split, Split::Test);

    // First training example: label 5, raw byte sum 27525, 166 nonzero pixels.
    assert_eq!(mnist.train.labels[0], 5);
    let img = mnist.train.image(0);
    let byte_sum: f64 = img.iter().map(|v| (v * 255.0).round()).sum();
    assert_eq!(byte_sum as u64, 27525);
    assert_eq!(img.iter().filter(|&&v| v > 0.0).count(), 166);
    assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));

    // First test example: label 7, raw byte sum 18454.
    assert_eq!(mnist.test.labels[0], 7);
    let byte_sum: f64 = mnist.test.image(0).iter().map(|v| (v * 255.0).round()).sum();
    assert_eq!(byte_sum as u64, 18454);

    let train_counts = mnist.train.class_counts(9);
    assert_eq!(
        train_counts,
        vec![5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
    );
    let test_counts = mnist.test.class_counts(9);
    assert_eq!(
        test_counts,
        vec![980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]
    );

    // Without the nines: the population the rotation protocol trains on.
    let non_nine_train: usize = train_counts[..9].iter().sum();
    let non_nine_test: usize = test_counts[..9].iter().sum();
    assert_eq!(non_nine_train, 54051);
    assert_eq!(non_nine_test, 8991);
}

#[test]
fn validation_split_is_stratified_and_exhaustive() {
    let mnist = Mnist::load(data_dir()).expect("MNIST files present");
    let splitter = SeedSplitter::new(17);
    let mut rng = splitter.derive("val-split");
    let (train, val) = split_validation(&mnist.train, 0.1, &mut rng);
    assert_eq!(train.len() + val.len(), 60000);
    // Per class: round(n_c · 0.1) examples go to validation; the per-class
    // rounds happen to sum to exactly 6000 on this label distribution.
    assert_eq!(val.len(), 6000);
    let full = mnist.train.class_counts(9);
    let val_counts = val.class_counts(9);
    for (c, (&n, &v)) in full.iter().zip(&val_counts).enumerate() {
        let expect = (n as f64 * 0.1).round() as usize;
        assert_eq!(v, expect, "class {c}");
    }
    assert_eq!(val.split, Split::Validation);
    assert_eq!(train.split, Split::Train);

    // Same seed reproduces the same membership.
    let mut rng2 = splitter.derive("val-split");
    let (_, val2) = split_validation(&mnist.train, 0.1, &mut rng2);
    assert_eq!(val.labels, val2.labels);
    assert_eq!(val.images.data()[..784], val2.images.data()[..784]);
}

#[test]
fn indices_of_classes_filters_in_order() {
    let mnist = Mnist::load(data_dir()).expect("MNIST files present");
    let idx = mnist.train.indices_of_classes(&[0, 1]);
    let expect = 5923 + 6742;
    assert_eq!(idx.len(), expect);
    assert!(idx.windows(2).all(|w| w[0] < w[1]), "ascending dataset order");
    assert!(idx
        .iter()
        .all(|&i| matches!(mnist.train.labels[i as usize], 0 | 1)));
}

/// Deterministic non-MNIST test pattern used for the rotation reference.
fn reference_pattern() -> Vec<f64> {
    (0..IMAGE_PIXELS)
        .map(|i| {
            let (r, c) = (i / IMAGE_SIDE, i % IMAGE_SIDE);
            ((r * 31 + c * 17) % 97) as f64 / 96.0
        })
        .collect()
}

#[test]
fn thirty_degree_rotation_matches_independent_reference() {
    // Spot values computed with an independent bilinear inverse-mapping
    // implementation (zero fill outside the grid, center 13.5).
    let img = reference_pattern();
    let out = apply_transform(&img, &Transform::Rotation(30f64.to_radians()));
    let frozen = [
        ((6usize, 6usize), 0.67723266552897099),
        ((6, 21), 0.60486804794410287),
        ((10, 14), 0.26604496135331579),
        ((13, 5), 0.62630901893023649),
        ((14, 14), 0.7555456000758457),
        ((17, 20), 0.37145378571658416),
        ((21, 7), 0.33199602092210856),
        ((21, 21), 0.44030359752497839),
        ((3, 14), 0.73761943486618509),
        ((24, 13), 0.51593805207986554),
    ];
    for ((r, c), want) in frozen {
        let got = out[r * IMAGE_SIDE + c];
        assert!(
            (got - want).abs() < 1e-9,
            "pixel ({r},{c}): got {got}, want {want}"
        );
    }
}

#[test]
fn rotation_approximately_preserves_mass_on_digits() {
    // MNIST digits live away from the border, so interpolating rotations
    // should keep total intensity within a few percent.
    let mnist = Mnist::load(data_dir()).expect("MNIST files present");
    let angle = 1.1;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let img = mnist.train.image(i);
        let before: f64 = img.iter().sum();
        let after: f64 = apply_transform(img, &Transform::Rotation(angle)).iter().sum();
        let rel = (after - before).abs() / before;
        worst = worst.max(rel);
    }
    assert!(worst < 0.03, "worst relative mass drift {worst}");
}

fn write_idx_images(path: &std::path::Path, magic: u32, n: u32, rows: u32, cols: u32, full: bool) {
    let mut f = std::fs::File::create(path).unwrap();
    f.write_all(&magic.to_be_bytes()).unwrap();
    f.write_all(&n.to_be_bytes()).unwrap();
    f.write_all(&rows.to_be_bytes()).unwrap();
    f.write_all(&cols.to_be_bytes()).unwrap();
    let body = (n * rows * cols) as usize;
    let take = if full { body } else { body.saturating_sub(1) };
    f.write_all(&vec![7u8; take]).unwrap();
}

fn write_idx_labels(path: &std::path::Path, magic: u32, n: u32, labels: &[u8]) {
    let mut f = std::fs::File::create(path).unwrap();
    f.write_all(&magic.to_be_bytes()).unwrap();
    f.write_all(&n.to_be_bytes()).unwrap();
    f.write_all(labels).unwrap();
}

#[test]
fn loader_reports_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img");
    let lbl = dir.path().join("lbl");

    // Wrong image magic.
    write_idx_images(&img, 0xdead_beef, 2, 28, 28, true);
    write_idx_labels(&lbl, 0x0000_0801, 2, &[1, 2]);
    match load_idx(&img, &lbl) {
        Err(DataError::BadMagic { found, expected, .. }) => {
            assert_eq!(found, 0xdead_beef);
            assert_eq!(expected, 0x0000_0803);
        }
        other => panic!("expected BadMagic, got {other:?}"),
    }

    // Non-28x28 geometry.
    write_idx_images(&img, 0x0000_0803, 2, 14, 28, true);
    assert!(matches!(
        load_idx(&img, &lbl),
        Err(DataError::BadGeometry { rows: 14, cols: 28, .. })
    ));

    // Truncated pixel payload.
    write_idx_images(&img, 0x0000_0803, 2, 28, 28, false);
    match load_idx(&img, &lbl) {
        Err(DataError::Truncated { needed, found, .. }) => {
            assert_eq!(needed, 16 + 2 * 784);
            assert_eq!(found, 16 + 2 * 784 - 1);
        }
        other => panic!("expected Truncated, got {other:?}"),
    }

    // Label magic wrong.
    write_idx_images(&img, 0x0000_0803, 2, 28, 28, true);
    write_idx_labels(&lbl, 0x0000_0802, 2, &[1, 2]);
    assert!(matches!(load_idx(&img, &lbl), Err(DataError::BadMagic { .. })));

    // Counts disagree between the two files.
    write_idx_labels(&lbl, 0x0000_0801, 3, &[1, 2, 3]);
    match load_idx(&img, &lbl) {
        Err(DataError::CountMismatch { images, labels, .. }) => {
            assert_eq!((images, labels), (2, 3));
        }
        other => panic!("expected CountMismatch, got {other:?}"),
    }

    // Missing file surfaces as an I/O error with the path attached.
    let missing = dir.path().join("nope");
    match load_idx(&missing, &lbl) {
        Err(DataError::Io { path, .. }) => assert_eq!(path, missing),
        other => panic!("expected Io, got {other:?}"),
    }
}

#[test]
fn loader_accepts_raw_and_gzip_alike() {
    let dir = tempfile::tempdir().unwrap();
    let img_raw = dir.path().join("img-raw");
    let lbl_raw = dir.path().join("lbl-raw");
    write_idx_images(&img_raw, 0x0000_0803, 2, 28, 28, true);
    write_idx_labels(&lbl_raw, 0x0000_0801, 2, &[4, 9]);
    let plain = load_idx(&img_raw, &lbl_raw).unwrap();
    assert_eq!(plain.labels, vec![4, 9]);
    assert!((plain.images.get(0, 0) - 7.0 / 255.0).abs() < 1e-15);

    // Same payload gzip-compressed; sniffed from the 1f 8b magic, no special
    // file name needed.
    let gz = |src: &std::path::Path, dst: &std::path::Path| {
        let bytes = std::fs::read(src).unwrap();
        let f = std::fs::File::create(dst).unwrap();
        let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
        enc.write_all(&bytes).unwrap();
        enc.finish().unwrap();
    };
    let img_gz = dir.path().join("img-gz");
    let lbl_gz = dir.path().join("lbl-gz");
    gz(&img_raw, &img_gz);
    gz(&lbl_raw, &lbl_gz);
    let packed = load_idx(&img_gz, &lbl_gz).unwrap();
    assert_eq!(packed.labels, plain.labels);
    assert_eq!(packed.images.data(), plain.images.data());
}
