use std::collections::HashSet;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use mbanet::data::{
    augment_train, export_split, flip_horizontal, load_batch, make_closed_split, make_split, normalize, parse_split,
    prepare_eval, resize, scan_dataset, synthetic_dataset, AugmentationConfig, IdentityDataset, ImageSource, Layout,
};
use mbanet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_png(path: &Path, seed: u8) {
    let img = RgbImage::from_fn(8, 6, |x, y| Rgb([seed, (x * 10) as u8, (y * 20) as u8]));
    img.save(path).unwrap();
}

fn folder_tree(root: &Path, ids: usize, per_id: usize) {
    for id in 0..ids {
        let dir = root.join(format!("person_{id}"));
        fs::create_dir_all(&dir).unwrap();
        for k in 0..per_id {
            write_png(&dir.join(format!("img_{k}.png")), (id * 10 + k) as u8);
        }
    }
}

fn memory_dataset(images_per_id: &[usize]) -> IdentityDataset {
    let items = images_per_id
        .iter()
        .enumerate()
        .flat_map(|(id, &n)| {
            (0..n).map(move |k| {
                let img = RgbImage::from_pixel(4, 4, Rgb([id as u8, k as u8, 0]));
                (
                    ImageSource::Memory {
                        key: format!("{id:03}/{k}"),
                        image: std::sync::Arc::new(img),
                    },
                    format!("{id:03}"),
                    (4, 4),
                )
            })
        })
        .collect();
    IdentityDataset::from_records("mem".into(), items)
}

fn keys(samples: &[mbanet::data::Sample]) -> Vec<String> {
    samples.iter().map(|s| s.source.to_string()).collect()
}

#[test]
fn folder_layout_yields_sorted_records_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    folder_tree(dir.path(), 3, 4);
    let ds = scan_dataset(dir.path(), &Layout::FolderPerIdentity).unwrap();
    assert_eq!(ds.records.len(), 12);
    let labels: HashSet<usize> = ds.records.iter().map(|r| r.label).collect();
    assert_eq!(labels, HashSet::from([0, 1, 2]));
    assert_eq!(ds.records[0].size, (8, 6));
    let again = scan_dataset(dir.path(), &Layout::FolderPerIdentity).unwrap();
    let paths = |d: &IdentityDataset| d.records.iter().map(|r| r.source.to_string()).collect::<Vec<_>>();
    assert_eq!(paths(&ds), paths(&again));
    let mut sorted = paths(&ds);
    sorted.sort();
    assert_eq!(paths(&ds), sorted);
}

#[test]
fn empty_identity_folder_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    folder_tree(dir.path(), 2, 2);
    fs::create_dir_all(dir.path().join("person_9")).unwrap();
    let err = scan_dataset(dir.path(), &Layout::FolderPerIdentity).unwrap_err();
    assert!(err.to_string().contains("person_9"), "{err}");
}

#[test]
fn unreadable_images_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    folder_tree(dir.path(), 2, 2);
    fs::write(dir.path().join("person_0/broken.png"), b"not a png").unwrap();
    fs::write(dir.path().join("person_1/broken.jpg"), b"nor a jpeg").unwrap();
    let msg = scan_dataset(dir.path(), &Layout::FolderPerIdentity).unwrap_err().to_string();
    assert!(msg.contains("broken.png") && msg.contains("broken.jpg"), "{msg}");
}

#[test]
fn manifest_layout_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    folder_tree(dir.path(), 2, 2);
    let manifest = dir.path().join("list.txt");
    fs::write(
        &manifest,
        "person_1/img_0.png\tB\nperson_0/img_0.png\tA\n# comment\nperson_0/img_1.png\tA\n",
    )
    .unwrap();
    let ds = scan_dataset(dir.path(), &Layout::Manifest(manifest.clone())).unwrap();
    assert_eq!(ds.identities, ["A", "B"]);
    assert_eq!(ds.records.len(), 3);
    assert_eq!(ds.records[2].label, 1);

    fs::write(&manifest, "person_0/img_0.png\tA\nperson_0/missing.png\tA\n").unwrap();
    let msg = scan_dataset(dir.path(), &Layout::Manifest(manifest)).unwrap_err().to_string();
    assert!(msg.contains("missing.png"), "{msg}");
}

#[test]
fn missing_root_names_the_path() {
    let err = scan_dataset(Path::new("/no/such/dataset"), &Layout::FolderPerIdentity).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("/no/such/dataset"));
}

#[test]
fn split_of_143_identities_halves_72_71() {
    let ds = memory_dataset(&[3; 143]);
    let split = make_split(&ds, 7, 0, None).unwrap();
    assert_eq!(split.train_ids.len(), 72);
    assert_eq!(split.test_ids.len(), 71);
    assert_eq!(split.train_ids[0], "000");
    assert_eq!(split.test_ids[0], "072");
    assert_eq!(split.gallery.len(), 71);
    assert_eq!(split.query.len(), 71 * 2);
    assert_eq!(split.validation.len(), 72);
    assert_eq!(split.train.len(), 72 * 2);
}

#[test]
fn four_identities_two_images_each() {
    let ds = memory_dataset(&[2, 2, 2, 2]);
    let split = make_split(&ds, 1, 0, None).unwrap();
    assert_eq!(split.gallery.len(), 2);
    assert_eq!(split.query.len(), 2);
}

#[test]
fn split_is_a_partition_and_deterministic() {
    let ds = memory_dataset(&[4, 3, 5, 2, 6, 3, 4]);
    let split = make_split(&ds, 3, 2, None).unwrap();
    let mut seen = HashSet::new();
    for set in [&split.train, &split.validation, &split.gallery, &split.query] {
        for k in keys(set) {
            assert!(seen.insert(k.clone()), "{k} appears twice");
        }
    }
    assert_eq!(seen.len(), ds.records.len());
    for q in &split.query {
        assert_eq!(split.gallery.iter().filter(|g| g.label == q.label).count(), 1);
    }
    let again = make_split(&ds, 3, 2, None).unwrap();
    assert_eq!(keys(&split.gallery), keys(&again.gallery));
    assert_eq!(keys(&split.validation), keys(&again.validation));
}

#[test]
fn repetitions_share_halving_and_vary_draws() {
    let ds = memory_dataset(&[5; 20]);
    let splits: Vec<_> = (0..10).map(|r| make_split(&ds, 11, r, None).unwrap()).collect();
    for s in &splits {
        assert_eq!(s.train_ids, splits[0].train_ids);
        assert_eq!(s.test_ids, splits[0].test_ids);
    }
    let galleries: HashSet<Vec<String>> = splits.iter().map(|s| keys(&s.gallery)).collect();
    let validations: HashSet<Vec<String>> = splits.iter().map(|s| keys(&s.validation)).collect();
    assert!(galleries.len() > 1);
    assert!(validations.len() > 1);
}

#[test]
fn single_image_test_identity_warns() {
    let ds = memory_dataset(&[2, 2, 2, 1]);
    let split = make_split(&ds, 0, 0, None).unwrap();
    assert_eq!(split.gallery.len(), 2);
    assert_eq!(split.query.len(), 1);
    assert!(split.warnings.iter().any(|w| w.contains("003")));
}

#[test]
fn distractors_join_gallery_only() {
    let ds = memory_dataset(&[2, 2, 2, 2]);
    let extra = memory_dataset(&[1, 1, 1]);
    let split = make_split(&ds, 0, 0, Some(&extra)).unwrap();
    assert_eq!(split.gallery.len(), 5);
    assert_eq!(split.gallery.iter().filter(|s| s.label < 0).count(), 3);
    assert!(split.query.iter().all(|s| s.label >= 0));
}

#[test]
fn too_few_identities() {
    assert!(make_split(&memory_dataset(&[3]), 0, 0, None).is_err());
}

#[test]
fn closed_split_queries_every_identity() {
    let ds = synthetic_dataset(4, 5, 16, 0);
    let split = make_closed_split(&ds, 0, 0).unwrap();
    assert_eq!(split.num_classes(), 4);
    assert_eq!(split.validation.len(), 4);
    assert_eq!(split.gallery.len(), 4);
    assert_eq!(split.query.len(), 12);
    assert_eq!(split.train.len(), 16);
}

#[test]
fn exported_split_round_trips_file_sources() {
    let dir = tempfile::tempdir().unwrap();
    folder_tree(dir.path(), 4, 3);
    let ds = scan_dataset(dir.path(), &Layout::FolderPerIdentity).unwrap();
    let split = make_split(&ds, 5, 1, None).unwrap();
    let text = export_split(&split);
    let back = parse_split(&text, Path::new("")).unwrap();
    assert_eq!((back.seed, back.repetition), (5, 1));
    assert_eq!(keys(&back.gallery), keys(&split.gallery));
    assert_eq!(keys(&back.query), keys(&split.query));
    assert_eq!(
        back.query.iter().map(|s| s.label).collect::<Vec<_>>(),
        split.query.iter().map(|s| s.label).collect::<Vec<_>>()
    );
    assert!(parse_split("bogus\tline\n", Path::new("")).is_err());
}

fn test_image() -> RgbImage {
    RgbImage::from_fn(40, 30, |x, y| Rgb([(x * 6) as u8, (y * 8) as u8, ((x + y) * 3) as u8]))
}

#[test]
fn degenerate_augmentation_is_center_crop_of_resize() {
    let cfg = AugmentationConfig {
        flip_p: 0.0,
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        center_crop: true,
        ..AugmentationConfig::toy()
    };
    let img = test_image();
    let t = augment_train(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let resized = resize(&img, cfg.resize);
    let off = (cfg.resize - cfg.crop) / 2;
    let center = image::imageops::crop_imm(&resized, off, off, cfg.crop, cfg.crop).to_image();
    let expected = normalize(&center, &cfg);
    assert!(t.max_abs_diff(&expected) < 1e-6);
    assert_eq!(prepare_eval(&img, &cfg).shape(), &[3, 32, 32]);
}

#[test]
fn normalizing_the_mean_color_gives_zero() {
    let cfg = AugmentationConfig {
        mean: [0.2, 0.4, 0.6],
        ..AugmentationConfig::toy()
    };
    let img = RgbImage::from_pixel(5, 5, Rgb([51, 102, 153]));
    let t = normalize(&img, &cfg);
    assert!(t.data().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn flip_is_an_involution() {
    let img = test_image();
    assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    assert_ne!(flip_horizontal(&img), img);
}

#[test]
fn augmentation_is_reproducible_per_seed() {
    let cfg = AugmentationConfig::toy();
    let img = test_image();
    let a = augment_train(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let b = augment_train(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let c = augment_train(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
}

#[test]
fn batches_do_not_depend_on_composition() {
    let ds = synthetic_dataset(3, 4, 40, 1);
    let split = make_closed_split(&ds, 0, 0).unwrap();
    let cfg = AugmentationConfig::toy();
    let full = load_batch(&split.train, &[0, 1, 2, 3], &cfg, Some((9, 2))).unwrap();
    let single = load_batch(&split.train, &[2], &cfg, Some((9, 2))).unwrap();
    let per = 3 * 32 * 32;
    assert_eq!(&full.data()[2 * per..3 * per], single.data());
    assert_eq!(full.shape(), &[4, 3, 32, 32]);
}

#[test]
fn synthetic_dataset_is_deterministic() {
    let a = synthetic_dataset(3, 2, 24, 5);
    let b = synthetic_dataset(3, 2, 24, 5);
    assert_eq!(a.records.len(), 6);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.source.load().unwrap(), y.source.load().unwrap());
    }
}

#[test]
fn invalid_augmentation_config() {
    let cfg = AugmentationConfig {
        crop: 400,
        ..Default::default()
    };
    assert!(cfg.validate().is_err());
}
