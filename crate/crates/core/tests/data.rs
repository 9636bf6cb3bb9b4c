use std::fs;
use std::path::Path;

use proptest::prelude::*;
use spinal_core::data::{
    decode_image, encode_p5, load_image_folder, stratified_split, synth_dataset, synth_generate,
    train_count, Dataset, LabeledImage, Level, LoadOptions, Partition,
};
use spinal_core::tensor::Tensor;
use spinal_core::Error;
use tempfile::TempDir;

fn write_pgm(path: &Path, value: u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, encode_p5(2, 2, &[value; 4]).unwrap()).unwrap();
}

fn class_tree(classes: &[&str], per_class: usize) -> TempDir {
    let dir = TempDir::new().unwrap();
    for (c, name) in classes.iter().enumerate() {
        for i in 0..per_class {
            write_pgm(
                &dir.path().join(name).join(format!("img{i}.pgm")),
                (c * 40 + i) as u8,
            );
        }
    }
    dir
}

#[test]
fn class_names_follow_taxonomy_not_filesystem() {
    // created in reverse order on purpose
    let dir = class_tree(&["S", "Irr", "E"], 2);
    let (ds, report) = load_image_folder(dir.path(), &LoadOptions::new(Level::Three, 2)).unwrap();
    assert_eq!(ds.class_names(), ["E", "S", "Irr"]);
    assert_eq!(report.loaded, 6);
    assert_eq!(ds.class_counts(), vec![2, 2, 2]);
    let first = &ds.items()[0];
    assert_eq!(first.label, 0);
    assert!(first.source_path.ends_with("E/img0.pgm"));
}

#[test]
fn items_are_in_lexicographic_path_order() {
    let dir = class_tree(&["E", "S", "Irr"], 3);
    let (ds, _) = load_image_folder(dir.path(), &LoadOptions::new(Level::Three, 2)).unwrap();
    let paths: Vec<_> = ds.items().iter().map(|it| it.source_path.clone()).collect();
    let mut sorted = paths.clone();
    sorted.sort();
    assert_eq!(paths, sorted);
    let (again, _) = load_image_folder(dir.path(), &LoadOptions::new(Level::Three, 2)).unwrap();
    assert_eq!(ds, again);
}

#[test]
fn level_two_ignores_irregulars() {
    let dir = class_tree(&["E", "S", "Irr"], 2);
    let (ds, report) = load_image_folder(dir.path(), &LoadOptions::new(Level::Two, 2)).unwrap();
    assert_eq!(ds.class_names(), ["E", "S"]);
    assert_eq!(ds.len(), 4);
    assert_eq!(report.ignored_folders, ["Irr"]);
}

#[test]
fn missing_folder_lists_expected_names() {
    let dir = class_tree(&["E", "S"], 1);
    let err = load_image_folder(dir.path(), &LoadOptions::new(Level::Three, 2)).unwrap_err();
    match err {
        Error::Layout(msg) => {
            assert!(msg.contains("Irr"), "{msg}");
            assert!(msg.contains("\"E\", \"S\", \"Irr\""), "{msg}");
        }
        other => panic!("expected layout error, got {other}"),
    }
}

#[test]
fn undecodable_files_are_skipped_and_reported() {
    let dir = class_tree(&["E", "S"], 2);
    fs::write(dir.path().join("S/broken.ppm"), b"P7\n1 1\n255\n\0").unwrap();
    fs::write(dir.path().join("S/notes.txt"), b"not an image").unwrap();
    let (ds, report) = load_image_folder(dir.path(), &LoadOptions::new(Level::Two, 2)).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(report.skipped.len(), 1);
    assert!(report.skipped[0].path.ends_with("broken.ppm"));
}

#[test]
fn confidence_threshold_filters_rows() {
    let dir = TempDir::new().unwrap();
    for (class, file) in [
        ("E", "img1.ppm"),
        ("E", "img2.ppm"),
        ("S", "img3.ppm"),
        ("S", "img4.ppm"),
    ] {
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30]);
        fs::create_dir_all(dir.path().join(class)).unwrap();
        fs::write(dir.path().join(class).join(file), bytes).unwrap();
    }
    let meta = dir.path().join("meta.csv");
    fs::write(
        &meta,
        "filename,confidence\nimg1.ppm,0.4\nimg2.ppm,0.5\nimg3.ppm,0.9\n",
    )
    .unwrap();
    let options = LoadOptions {
        min_confidence: Some(0.5),
        metadata: Some(meta),
        ..LoadOptions::new(Level::Two, 1)
    };
    let (ds, report) = load_image_folder(dir.path(), &options).unwrap();
    assert_eq!(report.filtered, 1);
    assert_eq!(ds.len(), 3);
    assert!(ds
        .items()
        .iter()
        .all(|it| !it.source_path.ends_with("img1.ppm")));
}

#[test]
fn loaded_pixels_are_normalized_and_resized() {
    let dir = TempDir::new().unwrap();
    for class in ["E", "S"] {
        fs::create_dir_all(dir.path().join(class)).unwrap();
        fs::write(
            dir.path().join(class).join("a.pgm"),
            encode_p5(2, 1, &[0, 255]).unwrap(),
        )
        .unwrap();
    }
    let (ds, _) = load_image_folder(dir.path(), &LoadOptions::new(Level::Two, 4)).unwrap();
    let px = &ds.items()[0].pixels;
    assert_eq!(px.shape(), &[1, 4, 4]);
    assert!(px.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    // first row of the resized grid is [0, .25, .75, 1] before normalization
    assert_eq!(&px.data()[..4], &[-1.0, -0.5, 0.5, 1.0]);
}

fn dataset_with_counts(counts: &[usize]) -> Dataset {
    let names = (0..counts.len()).map(|c| format!("class{c}")).collect();
    let items = counts
        .iter()
        .enumerate()
        .flat_map(|(label, &n)| {
            (0..n).map(move |_| LabeledImage {
                pixels: Tensor::zeros(&[1, 1, 1]).unwrap(),
                label,
                source_path: Default::default(),
            })
        })
        .collect();
    Dataset::new(names, items).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn split_is_exact(counts in prop::collection::vec(2usize..120, 2..6), seed in any::<u64>()) {
        let ds = stratified_split(dataset_with_counts(&counts), 0.7, seed).unwrap();
        let tags = ds.partition().unwrap();
        for (class, &n) in counts.iter().enumerate() {
            let train = ds.items().iter().zip(tags)
                .filter(|(it, &t)| it.label == class && t == Partition::Train)
                .count();
            // integer arithmetic oracle for floor(0.7 n)
            prop_assert_eq!(train, 7 * n / 10);
        }
    }

    #[test]
    fn train_count_matches_integer_floor(n in 0usize..100_000) {
        prop_assert_eq!(train_count(n, 0.7), 7 * n / 10);
    }
}

#[test]
fn synthetic_layout_and_determinism() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let manifest = synth_generate(Level::Ten, 5, 32, 9, a.path()).unwrap();
    synth_generate(Level::Ten, 5, 32, 9, b.path()).unwrap();
    assert_eq!(manifest.len(), 50);

    let mut folders: Vec<String> = fs::read_dir(a.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    folders.sort();
    let mut expected: Vec<String> = Level::Ten
        .class_names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    expected.sort();
    assert_eq!(folders, expected);

    for entry in &manifest {
        let bytes_a = fs::read(a.path().join(&entry.filename)).unwrap();
        let bytes_b = fs::read(b.path().join(&entry.filename)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{}", entry.filename);
    }
    let csv = fs::read_to_string(a.path().join("manifest.csv")).unwrap();
    assert!(csv.starts_with("filename,class,seed\n"));
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn in_memory_synthesis_matches_disk_round_trip() {
    let dir = TempDir::new().unwrap();
    synth_generate(Level::Three, 4, 32, 5, dir.path()).unwrap();
    let (loaded, _) = load_image_folder(dir.path(), &LoadOptions::new(Level::Three, 32)).unwrap();
    let memory = synth_dataset(Level::Three, 4, 32, 5).unwrap();
    assert_eq!(loaded.len(), memory.len());
    for (a, b) in loaded.items().iter().zip(memory.items()) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.pixels, b.pixels);
    }
}

/// sqrt of the ratio of principal second moments, background-subtracted.
fn axis_ratio(pixels: &[f32], size: usize) -> f64 {
    let weights: Vec<f64> = pixels.iter().map(|&p| (p as f64 - 0.1).max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    let (mut mx, mut my) = (0.0, 0.0);
    for (i, w) in weights.iter().enumerate() {
        mx += w * (i % size) as f64;
        my += w * (i / size) as f64;
    }
    mx /= total;
    my /= total;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (i, w) in weights.iter().enumerate() {
        let dx = (i % size) as f64 - mx;
        let dy = (i / size) as f64 - my;
        sxx += w * dx * dx;
        syy += w * dy * dy;
        sxy += w * dx * dy;
    }
    let mean = (sxx + syy) / 2.0;
    let spread = (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
    ((mean - spread) / (mean + spread)).sqrt()
}

#[test]
fn elliptical_second_moments() {
    let dir = TempDir::new().unwrap();
    synth_generate(Level::Ten, 20, 64, 17, dir.path()).unwrap();
    for (class, check) in [
        ("E0", (|q: f64| q >= 0.85) as fn(f64) -> bool),
        ("E7", |q| q <= 0.45),
    ] {
        for entry in fs::read_dir(dir.path().join(class)).unwrap() {
            let grid = decode_image(&fs::read(entry.unwrap().path()).unwrap()).unwrap();
            let q = axis_ratio(grid.values(), 64);
            assert!(check(q), "{class} axis ratio {q}");
        }
    }
}
