use proptest::prelude::*;

use super::*;

fn small(per_grade: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        per_grade,
        seed,
        ..SyntheticSpec::for_size(16)
    }
}

/// Rows whose mean is above the background level, for one image.
fn bright_rows(ds: &Dataset, i: usize) -> Vec<bool> {
    let s = ds.image_shape()[0];
    let c = ds.image_shape()[2];
    let img = &ds.images.data()[i * s * s * c..(i + 1) * s * s * c];
    (0..s)
        .map(|y| (0..s).map(|x| img[(y * s + x) * c]).sum::<f64>() / s as f64 > 0.3)
        .collect()
}

/// Dark rows strictly between the two bands.
fn measured_gap(ds: &Dataset, i: usize) -> usize {
    let bright = bright_rows(ds, i);
    let first = bright.iter().position(|&b| b).unwrap();
    let last = bright.iter().rposition(|&b| b).unwrap();
    bright[first..=last].iter().filter(|&&b| !b).count()
}

#[test]
fn regeneration_is_bitwise_identical() {
    let a = generate(&small(3, 9)).unwrap();
    let b = generate(&small(3, 9)).unwrap();
    assert!(a.images.bitwise_eq(&b.images));
    assert_eq!(a.labels, b.labels);
    let c = generate(&small(3, 10)).unwrap();
    assert!(!a.images.bitwise_eq(&c.images));
}

#[test]
fn labels_are_balanced() {
    let ds = generate(&small(7, 1)).unwrap();
    assert_eq!(ds.len(), 35);
    assert_eq!(ds.grade_counts(), vec![7; 5]);
    assert_eq!(ds.images.shape(), &[35, 16, 16, 3]);
}

#[test]
fn channels_are_replicated_and_values_clipped() {
    let ds = generate(&SyntheticSpec {
        noise_sigma: 0.8,
        ..small(2, 4)
    })
    .unwrap();
    for px in ds.images.data().chunks(3) {
        assert!(px[0] == px[1] && px[1] == px[2]);
        assert!((0.0..=1.0).contains(&px[0]));
    }
}

#[test]
fn noiseless_gap_narrows_by_the_configured_step() {
    let spec = SyntheticSpec {
        noise_sigma: 0.0,
        per_grade: 4,
        ..SyntheticSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let mean_gap = |grade: usize| {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == grade).collect();
        idx.iter().map(|&i| measured_gap(&ds, i)).sum::<usize>() as f64 / idx.len() as f64
    };
    assert_eq!(mean_gap(0) - mean_gap(4), (4 * spec.global_gap) as f64);
    for g in 0..5 {
        assert_eq!(mean_gap(g), spec.gap(g).unwrap() as f64);
    }
}

#[test]
fn zero_jitter_centres_the_bands() {
    let spec = SyntheticSpec {
        noise_sigma: 0.0,
        jitter: 0,
        per_grade: 2,
        ..SyntheticSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let bright = bright_rows(&ds, 0);
    let first = bright.iter().position(|&b| b).unwrap();
    assert_eq!(first, (spec.image_size - 2 * spec.band_height - spec.gap(0).unwrap()) / 2);
    assert!(generate(&SyntheticSpec { jitter: 11, ..spec }).is_err());
}

#[test]
fn gap_underflow_is_rejected() {
    let spec = SyntheticSpec {
        global_gap: 6,
        ..SyntheticSpec::default()
    };
    assert!(matches!(generate(&spec), Err(Error::Config(m)) if m.contains("underflow")));
    let tall = SyntheticSpec {
        band_height: 30,
        ..SyntheticSpec::default()
    };
    assert!(generate(&tall).is_err());
}

#[test]
fn stratified_split_counts() {
    let ds = generate(&small(20, 2)).unwrap();
    let (train, val, test) = split(&ds, [0.8, 0.1, 0.1], 5).unwrap();
    assert_eq!((train.len(), val.len(), test.len()), (80, 10, 10));
    assert_eq!(train.grade_counts(), vec![16; 5]);
    assert_eq!(val.grade_counts(), vec![2; 5]);
    assert_eq!(test.grade_counts(), vec![2; 5]);
    assert_eq!(train.split, Split::Train);
    assert_eq!(test.split, Split::Test);
}

#[test]
fn split_is_seeded() {
    let ds = generate(&small(20, 2)).unwrap();
    let a = split(&ds, [0.8, 0.1, 0.1], 5).unwrap();
    let b = split(&ds, [0.8, 0.1, 0.1], 5).unwrap();
    assert_eq!(a, b);
    let c = split(&ds, [0.8, 0.1, 0.1], 6).unwrap();
    assert_ne!(a.1.images, c.1.images);
}

#[test]
fn split_partitions_the_dataset() {
    // Tag every image by its index so membership can be traced.
    let ds = generate(&small(20, 2)).unwrap();
    let per = 16 * 16 * 3;
    let tagged = Dataset::new(
        Tensor::from_fn(ds.images.shape(), |i| (i / per) as f64),
        ds.labels.clone(),
        5,
        Split::Full,
    )
    .unwrap();
    let (a, b, c) = split(&tagged, [0.7, 0.15, 0.15], 1).unwrap();
    let mut seen: Vec<usize> = [a, b, c]
        .iter()
        .flat_map(|d| d.images.data().chunks(per).map(|img| img[0] as usize).collect::<Vec<_>>())
        .collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..100).collect::<Vec<_>>());
}

#[test]
fn split_rejects_bad_fractions() {
    let ds = generate(&small(4, 2)).unwrap();
    assert!(split(&ds, [0.8, 0.1, 0.2], 1).is_err());
    assert!(split(&ds, [1.2, -0.1, -0.1], 1).is_err());
}

#[test]
fn kdst_round_trip() {
    let ds = generate(&small(2, 3)).unwrap();
    let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
    assert!(back.images.bitwise_eq(&ds.images));
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.split, Split::Full);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.kdst");
    ds.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);
}

#[test]
fn kdst_layout_prefix() {
    let ds = generate(&small(1, 3)).unwrap();
    let b = ds.to_bytes();
    assert_eq!(&b[..4], b"KDST");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    assert_eq!(b[8], 3);
    assert_eq!(b[9], 5);
    assert_eq!(u32::from_le_bytes(b[10..14].try_into().unwrap()), 5);
    assert_eq!(&b[14..19], &[0, 1, 2, 3, 4]);
    assert_eq!(&b[19..23], b"KTEN");
}

#[test]
fn truncated_kdst_reports_offset() {
    let ds = generate(&small(1, 3)).unwrap();
    let b = ds.to_bytes();
    match Dataset::from_bytes(&b[..16]) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 14),
        other => panic!("expected format error, got {other:?}"),
    }
    assert!(matches!(
        Dataset::from_bytes(&b[..b.len() - 1]),
        Err(Error::Format { .. })
    ));
}

#[test]
fn kdst_version_and_magic_are_checked() {
    let ds = generate(&small(1, 3)).unwrap();
    let mut b = ds.to_bytes();
    b[4] = 2;
    assert!(matches!(
        Dataset::from_bytes(&b),
        Err(Error::UnsupportedVersion { kind: "KDST", found: 2, .. })
    ));
    b[4] = 1;
    b[0] = b'X';
    assert!(matches!(Dataset::from_bytes(&b), Err(Error::Format { offset: 0, .. })));
    let mut bad_label = ds.to_bytes();
    bad_label[16] = 9;
    assert!(matches!(
        Dataset::from_bytes(&bad_label),
        Err(Error::Format { offset: 16, .. })
    ));
}

#[test]
fn batch_gathers_samples_in_order() {
    let ds = generate(&small(2, 3)).unwrap();
    let (x, y) = ds.batch(&[7, 0]);
    assert_eq!(x.shape(), &[2, 16, 16, 3]);
    assert_eq!(y, vec![3, 0]);
    let per = 16 * 16 * 3;
    assert_eq!(&x.data()[..per], &ds.images.data()[7 * per..8 * per]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn kdst_round_trip_is_bitwise(seed in any::<u64>(), noise in 0.0f64..0.6) {
        let ds = generate(&SyntheticSpec { noise_sigma: noise, ..small(1, seed) }).unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
        prop_assert!(back.images.bitwise_eq(&ds.images));
        prop_assert_eq!(back.labels, ds.labels);
    }
}

#[test]
fn exact_count_split_and_directory_round_trip() {
    let spec = SyntheticSpec {
        per_grade: 3,
        ..SyntheticSpec::for_size(16)
    };
    let s = Splits::generate(&spec, 2, 1).unwrap();
    assert_eq!(s.train.grade_counts(), vec![3; 5]);
    assert_eq!(s.val.grade_counts(), vec![2; 5]);
    assert_eq!(s.test.grade_counts(), vec![1; 5]);
    assert_eq!(s.test.split, Split::Test);
    let dir = tempfile::tempdir().unwrap();
    s.save(dir.path()).unwrap();
    assert_eq!(Splits::load(dir.path()).unwrap(), s);
    assert!(split_counts(&s.test, 1, 1, 0).is_err());
}
