//! Ingestion, split validation and batch construction.

use std::fs;

use inpaint_core::data::{ingest_dataset, make_batch, synthetic_textures, test_image, validate_splits, write_texture_dataset, Augment, Dataset, Recipe, Sampler, Split};
use inpaint_core::imaging::MaskSpec;
use inpaint_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn texture_directory_ingests_with_its_split_lists() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_texture_dataset(dir.path(), 10, 8, 32, 1).unwrap();
    let train = ingest_dataset(&spec, Split::Train).unwrap();
    let test = ingest_dataset(&spec, Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (8, 2));
    let ids: Vec<&str> = (0..10).map(|i| if i < 8 { train.id(i) } else { test.id(i - 8) }).collect();
    assert_eq!(ids.iter().collect::<std::collections::HashSet<_>>().len(), 10);
}

#[test]
fn unlisted_split_takes_every_image_the_other_does_not_claim() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = write_texture_dataset(dir.path(), 6, 4, 32, 2).unwrap();
    spec.test_list = None;
    assert_eq!(ingest_dataset(&spec, Split::Test).unwrap().len(), 2);
}

#[test]
fn undecodable_files_are_listed_in_the_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = write_texture_dataset(dir.path(), 4, 4, 32, 3).unwrap();
    fs::write(dir.path().join("texture_0001.png"), b"not an image").unwrap();
    fs::write(dir.path().join("texture_0003.png"), b"").unwrap();
    spec.test_list = None;
    match ingest_dataset(&spec, Split::Train) {
        Err(Error::Ingestion { paths, .. }) => {
            let names: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
            assert_eq!(names, ["texture_0001.png", "texture_0003.png"]);
        }
        other => panic!("expected an ingestion error, got {other:?}"),
    }
}

#[test]
fn overlapping_split_lists_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_texture_dataset(dir.path(), 4, 3, 32, 4).unwrap();
    fs::write(dir.path().join("test.txt"), "texture_0003.png\ntexture_0000.png\n").unwrap();
    let err = ingest_dataset(&spec, Split::Train).unwrap_err();
    assert!(matches!(&err, Error::Validation(m) if m.contains("texture_0000.png")), "{err}");
}

#[test]
fn full_scale_split_sizes_are_accepted() {
    let train: Vec<String> = (0..200_000).map(|i| format!("{i:06}.jpg")).collect();
    let test: Vec<String> = (200_000..202_599).map(|i| format!("{i:06}.jpg")).collect();
    validate_splits(&train, &test).unwrap();
    let mut leaked = test.clone();
    leaked[2_598] = train[123_456].clone();
    assert!(validate_splits(&train, &leaked).is_err());
}

fn textures(n: usize) -> Dataset {
    Dataset::from_images(synthetic_textures(n, 32, 5), Recipe::Generic, 32)
}

#[test]
fn batches_have_the_documented_shapes_and_round_trip() {
    let ds = textures(6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sampler = Sampler::new(ds.len(), true, true, &mut rng);
    let spec = MaskSpec { min_size: 4, max_size: 12 };
    let augment = Augment { flip_prob: 0.5, max_shift: 4 };
    let b = make_batch::<f64, _>(&ds, &mut sampler, 4, &spec, &augment, &mut rng).unwrap();
    assert_eq!(b.gt.shape(), &[4, 3, 32, 32]);
    assert_eq!(b.input4.shape(), &[4, 4, 32, 32]);
    assert_eq!(b.mask.shape(), &[4, 1, 32, 32]);
    assert_eq!(b.source_ids.len(), 4);
    let plane = 32 * 32;
    for n in 0..4 {
        for p in 0..plane {
            let m = b.mask.data()[n * plane + p];
            assert_eq!(b.input4.data()[(n * 4 + 3) * plane + p], m);
            for c in 0..3 {
                let gt = b.gt.data()[(n * 3 + c) * plane + p];
                assert!((-1.0..=1.0).contains(&gt));
                assert_eq!(b.input4.data()[(n * 4 + c) * plane + p], if m == 1.0 { 0.0 } else { gt });
            }
        }
    }
}

#[test]
fn without_augmentation_gt_is_the_preprocessed_source() {
    let ds = textures(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sampler = Sampler::new(ds.len(), false, false, &mut rng);
    let b = make_batch::<f32, _>(&ds, &mut sampler, 3, &MaskSpec { min_size: 8, max_size: 8 }, &Augment::NONE, &mut rng).unwrap();
    for i in 0..3 {
        let src = test_image::<f32>(&ds, i).unwrap().to_tensor();
        assert_eq!(Tensor::stack(&[src]).unwrap().data(), b.gt.batch_item(i).data());
    }
    assert!(matches!(make_batch::<f32, _>(&ds, &mut sampler, 1, &MaskSpec { min_size: 8, max_size: 8 }, &Augment::NONE, &mut rng), Err(Error::EndOfData)));
}

#[test]
fn seeded_batches_repeat_exactly() {
    let ds = textures(5);
    let draw = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sampler = Sampler::new(ds.len(), true, true, &mut rng);
        (0..4)
            .map(|_| make_batch::<f32, _>(&ds, &mut sampler, 3, &MaskSpec { min_size: 4, max_size: 16 }, &Augment { flip_prob: 0.5, max_shift: 8 }, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(), draw());
}
