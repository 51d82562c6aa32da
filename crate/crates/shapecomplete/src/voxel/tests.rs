use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn table(ids: &[u8]) -> BTreeMap<u8, String> {
    ids.iter().map(|&i| (i, format!("class_{i}"))).collect()
}

fn volume(shape: Shape3, data: Vec<u8>) -> LabelVolume {
    let max = data.iter().copied().max().unwrap_or(0);
    let ids: Vec<u8> = (1..=max).collect();
    LabelVolume::new(shape, data, [1.0; 3], table(&ids)).unwrap()
}

fn random_volume(rng: &mut ChaCha8Rng, shape: Shape3, max_label: u8) -> LabelVolume {
    let n = shape[0] * shape[1] * shape[2];
    let data = (0..n).map(|_| rng.gen_range(0..=max_label)).collect();
    volume(shape, data)
}

/// Independent nearest-neighbor oracle: the source index whose voxel
/// center is closest to the output voxel center, found by exhaustive
/// scan along one axis.
fn nearest_by_scan(i: usize, n: usize, m: usize) -> Vec<usize> {
    let target = (i as f64 + 0.5) * n as f64 / m as f64 - 0.5;
    let dist = |s: usize| (s as f64 - target).abs();
    let best = (0..n).map(dist).fold(f64::INFINITY, f64::min);
    (0..n).filter(|&s| dist(s) - best < 1e-12).collect()
}

#[test]
fn resample_upsamples_by_block_replication() {
    let v = volume([2, 2, 2], vec![1, 2, 3, 4, 5, 6, 7, 8]);
    let up = resample_labels(&v, [4, 4, 4]).unwrap();
    for l in 0..4 {
        for w in 0..4 {
            for h in 0..4 {
                assert_eq!(up.get(l, w, h), v.get(l / 2, w / 2, h / 2));
            }
        }
    }
    assert_eq!(up.spacing(), [0.5; 3]);
}

#[test]
fn resample_to_own_shape_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = random_volume(&mut rng, [3, 4, 5], 6);
    let same = resample_labels(&v, v.shape()).unwrap();
    assert_eq!(same.data(), v.data());
    assert_eq!(same.spacing(), v.spacing());
    assert_eq!(same.affine(), v.affine());
}

#[test]
fn resample_checkerboard_to_single_voxel_matches_scan_oracle() {
    // 3x3x3 checkerboard of {0,1}: voxel (l,w,h) = (l+w+h) % 2.
    let mut data = Vec::new();
    for l in 0..3 {
        for w in 0..3 {
            for h in 0..3 {
                data.push(((l + w + h) % 2) as u8);
            }
        }
    }
    let v = volume([3, 3, 3], data);
    let down = resample_labels(&v, [1, 1, 1]).unwrap();
    let sl = nearest_by_scan(0, 3, 1);
    let sw = nearest_by_scan(0, 3, 1);
    let sh = nearest_by_scan(0, 3, 1);
    assert_eq!((&sl, &sw, &sh), (&vec![1], &vec![1], &vec![1]));
    // Center voxel (1,1,1) has label (1+1+1) % 2 = 1.
    assert_eq!(down.data(), &[1]);
    assert_eq!(down.data()[0], v.get(sl[0], sw[0], sh[0]));
}

#[test]
fn resample_picks_a_nearest_source_voxel_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for &(from, to) in &[
        ([5, 3, 7], [2, 4, 3]),
        ([2, 2, 2], [5, 1, 3]),
        ([4, 4, 4], [4, 6, 2]),
    ] {
        let v = random_volume(&mut rng, from, 4);
        let r = resample_labels(&v, to).unwrap();
        for l in 0..to[0] {
            let cl = nearest_by_scan(l, from[0], to[0]);
            for w in 0..to[1] {
                let cw = nearest_by_scan(w, from[1], to[1]);
                for h in 0..to[2] {
                    let ch = nearest_by_scan(h, from[2], to[2]);
                    let got = r.get(l, w, h);
                    let admissible = cl.iter().any(|&a| {
                        cw.iter()
                            .any(|&b| ch.iter().any(|&c| v.get(a, b, c) == got))
                    });
                    assert!(admissible, "voxel ({l},{w},{h}) not from a nearest source");
                }
            }
        }
    }
}

#[test]
fn resample_rejects_zero_target() {
    let v = volume([2, 2, 2], vec![0; 8]);
    assert!(matches!(
        resample_labels(&v, [0, 2, 2]),
        Err(VoxelError::InvalidTargetShape(_))
    ));
}

#[test]
fn empty_grid_is_rejected_at_construction() {
    assert!(matches!(
        LabelVolume::new([0, 2, 2], vec![], [1.0; 3], BTreeMap::new()),
        Err(VoxelError::EmptyGrid(_))
    ));
}

#[test]
fn binarize_all_background_gives_all_zero() {
    let v = volume([2, 3, 2], vec![0; 12]);
    let b = binarize(&v);
    assert!(b.data().iter().all(|&x| x == 0));
    assert_eq!(b.shape(), v.shape());
    assert_eq!(b.spacing(), v.spacing());
}

#[test]
fn binarize_marks_exactly_nonzero_labels() {
    let v = volume([1, 1, 6], vec![0, 3, 0, 7, 3, 0]);
    let b = binarize(&v);
    assert_eq!(b.data(), &[0, 1, 0, 1, 1, 0]);
}

#[test]
fn binarize_foreground_count_matches_nonzero_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v = random_volume(&mut rng, [8, 8, 8], 5);
    let nonzero = v.data().iter().filter(|&&x| x != 0).count();
    assert_eq!(binarize(&v).foreground_count(), nonzero);
}

#[test]
fn one_hot_hits_the_right_channels() {
    let v = volume([1, 1, 2], vec![0, 2]);
    let oh = one_hot(&v, 3).unwrap();
    assert_eq!(oh.channels(), 3);
    // Channel-major: [c0v0, c0v1, c1v0, c1v1, c2v0, c2v1]
    assert_eq!(oh.data(), &[1, 0, 0, 0, 0, 1]);
}

#[test]
fn one_hot_background_only() {
    let v = volume([2, 2, 2], vec![0; 8]);
    let oh = one_hot(&v, 4).unwrap();
    let n = 8;
    assert!(oh.data()[..n].iter().all(|&x| x == 1));
    assert!(oh.data()[n..].iter().all(|&x| x == 0));
}

#[test]
fn one_hot_argmax_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = random_volume(&mut rng, [6, 6, 6], 4);
    let oh = one_hot(&v, 5).unwrap();
    let back = oh.argmax().unwrap();
    assert_eq!(back.data(), v.data());
}

#[test]
fn one_hot_rejects_out_of_range_labels() {
    let v = volume([1, 1, 2], vec![0, 3]);
    assert!(matches!(
        one_hot(&v, 3),
        Err(VoxelError::LabelOutOfRange { label: 3, .. })
    ));
}

#[test]
fn volume_fraction_of_sole_class_is_one() {
    let v = volume([2, 2, 2], vec![0, 1, 1, 0, 1, 0, 0, 0]);
    let f = volume_fraction(&v, 1, FractionReference::TotalForeground).unwrap();
    assert_eq!(f, 1.0);
}

#[test]
fn volume_fraction_of_absent_class_is_zero() {
    // Class 2 is in the table but occupies no voxels.
    let v = LabelVolume::new([1, 1, 4], vec![0, 1, 1, 0], [1.0; 3], table(&[1, 2])).unwrap();
    let f = volume_fraction(&v, 2, FractionReference::TotalForeground).unwrap();
    assert_eq!(f, 0.0);
}

#[test]
fn volume_fraction_matches_exhaustive_counts() {
    // Construction with known counts: class 1 -> 10 voxels, class 2 -> 6,
    // class 3 -> 4; grid of 4x4x4 = 64.
    let mut data = vec![0u8; 64];
    data[..10].fill(1);
    data[10..16].fill(2);
    data[16..20].fill(3);
    let v = volume([4, 4, 4], data);
    let count = |c: u8| v.data().iter().filter(|&&x| x == c).count() as f64;
    let fg: f64 = count(1) + count(2) + count(3);
    for c in [1u8, 2, 3] {
        let f = volume_fraction(&v, c, FractionReference::TotalForeground).unwrap();
        assert_eq!(f, count(c) / fg);
        let f = volume_fraction(&v, c, FractionReference::LargestClass).unwrap();
        assert_eq!(f, count(c) / count(1));
        let f = volume_fraction(&v, c, FractionReference::WholeGrid).unwrap();
        assert_eq!(f, count(c) / 64.0);
    }
}

#[test]
fn volume_fraction_empty_reference_errors() {
    let v = LabelVolume::new([1, 1, 2], vec![0, 0], [1.0; 3], table(&[1])).unwrap();
    assert!(matches!(
        volume_fraction(&v, 1, FractionReference::TotalForeground),
        Err(VoxelError::EmptyReference)
    ));
}

#[test]
fn volume_fraction_unknown_class_errors() {
    let v = volume([1, 1, 2], vec![0, 1]);
    assert!(matches!(
        volume_fraction(&v, 9, FractionReference::WholeGrid),
        Err(VoxelError::UnknownClass(9))
    ));
}

#[test]
fn upscale_ones_fill_any_target() {
    let b = BinaryVolume::new([1, 1, 1], vec![1], [1.0; 3]).unwrap();
    let up = upscale_binary(&b, [3, 2, 5]).unwrap();
    assert!(up.data().iter().all(|&x| x == 1));
    assert_eq!(up.shape(), [3, 2, 5]);
}

#[test]
fn upscale_identity_shape_keeps_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = (0..24).map(|_| rng.gen_range(0..=1)).collect::<Vec<u8>>();
    let b = BinaryVolume::new([2, 3, 4], data.clone(), [1.0; 3]).unwrap();
    let same = upscale_binary(&b, [2, 3, 4]).unwrap();
    assert_eq!(same.data(), &data[..]);
}

#[test]
fn upscale_doubling_is_block_replication() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = (0..64).map(|_| rng.gen_range(0..=1)).collect::<Vec<u8>>();
    let b = BinaryVolume::new([4, 4, 4], data, [1.0; 3]).unwrap();
    let up = upscale_binary(&b, [8, 8, 8]).unwrap();
    for l in 0..8 {
        for w in 0..8 {
            for h in 0..8 {
                let src = b.data()[(l / 2 * 4 + w / 2) * 4 + h / 2];
                assert_eq!(up.data()[(l * 8 + w) * 8 + h], src);
            }
        }
    }
}

#[test]
fn resample_affine_preserves_world_extent() {
    let v = LabelVolume::new([4, 4, 4], vec![0; 64], [2.0, 1.0, 0.5], BTreeMap::new()).unwrap();
    let r = resample_labels(&v, [8, 2, 4]).unwrap();
    // Physical size per axis: shape * spacing stays fixed.
    for a in 0..3 {
        let before = v.shape()[a] as f64 * v.spacing()[a];
        let after = r.shape()[a] as f64 * r.spacing()[a];
        assert!((before - after).abs() < 1e-12);
    }
    // World position of the first voxel center: affine * (0,0,0).
    // Old voxel coordinate of new voxel 0 along axis 0: (0.5) * 4/8 - 0.5 = -0.25,
    // world = 2.0 * -0.25 = -0.5.
    assert!((r.affine()[0][3] - (-0.5)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_resample_idempotent_at_fixed_shape(
        seed in 0u64..1000,
        from in (1usize..6, 1usize..6, 1usize..6),
        to in (1usize..6, 1usize..6, 1usize..6),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_volume(&mut rng, [from.0, from.1, from.2], 3);
        let shape = [to.0, to.1, to.2];
        let once = resample_labels(&v, shape).unwrap();
        let twice = resample_labels(&once, shape).unwrap();
        prop_assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn prop_one_hot_argmax_identity(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_volume(&mut rng, [4, 3, 5], 6);
        let oh = one_hot(&v, 8).unwrap();
        // Partition of unity: channel sum is 1 at every voxel.
        let n = v.num_voxels();
        for i in 0..n {
            let s: u8 = (0..8).map(|c| oh.data()[c * n + i]).sum();
            prop_assert_eq!(s, 1);
        }
        let back = oh.argmax().unwrap();
        prop_assert_eq!(back.data(), v.data());
    }

    #[test]
    fn prop_binarize_count_equals_class_count_sum(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_volume(&mut rng, [5, 5, 5], 4);
        let total: usize = v.class_counts().values().sum();
        prop_assert_eq!(binarize(&v).foreground_count(), total);
    }

    #[test]
    fn prop_fraction_sums_to_one_over_foreground(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_volume(&mut rng, [5, 5, 5], 4);
        if v.foreground_count() == 0 {
            return Ok(());
        }
        let sum: f64 = v
            .class_counts()
            .keys()
            .map(|&c| volume_fraction(&v, c, FractionReference::TotalForeground).unwrap())
            .sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prop_upscale_stays_binary(
        seed in 0u64..1000,
        to in (1usize..9, 1usize..9, 1usize..9),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..27).map(|_| rng.gen_range(0..=1)).collect::<Vec<u8>>();
        let b = BinaryVolume::new([3, 3, 3], data, [1.0; 3]).unwrap();
        let up = upscale_binary(&b, [to.0, to.1, to.2]).unwrap();
        prop_assert!(up.data().iter().all(|&x| x <= 1));
    }
}
