mod common;

use common::{brute_force_fusion, random_pair};
use patchseg::pbs::Bandwidth;
use patchseg::{pbs_segment, select_atlases, seeded_rng, PbsConfig, RoiMask, Volume3D};
use rand::Rng;

fn config(patch_side: usize, window_side: usize) -> PbsConfig {
    PbsConfig {
        patch_side,
        window_side,
        atlases: 2,
        bandwidth: Bandwidth::Adaptive { floor: 1e-6 },
    }
}

#[test]
fn fusion_equals_exhaustive_oracle_on_small_grid() {
    for seed in 0..3 {
        let (target, _) = random_pair([8, 8, 8], seed);
        let a = random_pair([8, 8, 8], seed + 10);
        let b = random_pair([8, 8, 8], seed + 20);
        let atlases = [(&a.0, &a.1), (&b.0, &b.1)];
        let mask = RoiMask::full(&target);
        for (p, w) in [(3, 5), (5, 7), (1, 3)] {
            let got = pbs_segment(&target, &atlases, &mask, &config(p, w)).unwrap();
            let want = brute_force_fusion(&target, &atlases, &mask, p, w, 1e-6);
            assert_eq!(got.labels.labels().unwrap(), &want[..], "seed {seed}, patch {p}, window {w}");
        }
    }
}

#[test]
fn fusion_ignores_atlas_order() {
    let (target, _) = random_pair([8, 7, 6], 1);
    let a = random_pair([8, 7, 6], 2);
    let b = random_pair([8, 7, 6], 3);
    let mask = RoiMask::full(&target);
    let cfg = config(3, 5);
    let ab = pbs_segment(&target, &[(&a.0, &a.1), (&b.0, &b.1)], &mask, &cfg).unwrap();
    let ba = pbs_segment(&target, &[(&b.0, &b.1), (&a.0, &a.1)], &mask, &cfg).unwrap();
    assert_eq!(ab.labels, ba.labels);
}

#[test]
fn voxels_outside_the_mask_stay_background() {
    let (target, _) = random_pair([8, 8, 8], 4);
    let a = random_pair([8, 8, 8], 5);
    let voxels: Vec<bool> = (0..512).map(|i| i % 3 == 0).collect();
    let mask = RoiMask::new([8, 8, 8], [1.0; 3], voxels.clone(), 0).unwrap();
    let r = pbs_segment(&target, &[(&a.0, &a.1)], &mask, &config(3, 5)).unwrap();
    assert_eq!(r.voxels_classified, voxels.iter().filter(|&&v| v).count());
    for (l, inside) in r.labels.labels().unwrap().iter().zip(&voxels) {
        if !inside {
            assert_eq!(*l, 0);
        }
    }
}

#[test]
fn atlas_selection_follows_noise_level() {
    let dims = [10, 9, 8];
    let n = 720;
    let mut rng = seeded_rng(6);
    let base: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..100.0f32)).collect();
    let target = Volume3D::intensity(dims, [1.0; 3], base.clone()).unwrap();
    // Atlas k carries noise of amplitude `levels[k]`; listed out of order.
    let levels = [4.0f32, 0.5, 8.0, 1.0, 2.0];
    let atlases: Vec<Volume3D> = levels
        .iter()
        .map(|&amp| {
            let data = base.iter().map(|&v| v + amp * rng.random_range(-1.0..1.0f32)).collect();
            Volume3D::intensity(dims, [1.0; 3], data).unwrap()
        })
        .collect();
    let refs: Vec<&Volume3D> = atlases.iter().collect();
    let ranked = select_atlases(&target, &refs, &RoiMask::full(&target), 3).unwrap();
    let ids: Vec<usize> = ranked.iter().map(|r| r.0).collect();
    assert_eq!(ids, vec![1, 3, 4]);

    // The reported score is the masked SSD.
    let want: f64 = base
        .iter()
        .zip(atlases[1].intensities().unwrap())
        .map(|(&t, &a)| (f64::from(t) - f64::from(a)).powi(2))
        .sum();
    assert_eq!(ranked[0].1, want);
}

#[test]
fn fixed_bandwidth_is_supported() {
    let (target, _) = random_pair([6, 6, 6], 8);
    let a = random_pair([6, 6, 6], 9);
    let cfg = PbsConfig {
        bandwidth: Bandwidth::Fixed { h: 50.0 },
        ..config(3, 5)
    };
    let r = pbs_segment(&target, &[(&a.0, &a.1)], &RoiMask::full(&target), &cfg).unwrap();
    assert_eq!(r.voxels_classified, 216);
}

#[test]
fn mismatched_atlas_grid_is_rejected() {
    let (target, _) = random_pair([6, 6, 6], 1);
    let a = random_pair([6, 6, 5], 2);
    let err = pbs_segment(&target, &[(&a.0, &a.1)], &RoiMask::full(&target), &config(3, 5)).unwrap_err();
    assert_eq!(err.category(), "dims");
}
