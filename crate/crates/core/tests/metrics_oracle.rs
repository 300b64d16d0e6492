mod support;

use msseg_core::metrics::{evaluate_cohort, lesion_metrics, score, voxel_metrics};
use msseg_core::BinaryMask3D;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn line(bits: &[u8]) -> BinaryMask3D {
    BinaryMask3D::from_vec([bits.len(), 1, 1], bits.iter().map(|&b| b == 1).collect()).unwrap()
}

#[test]
fn eq5_reference_row() {
    let s = score(0.664, 0.882, 0.508, 0.100, 0.866);
    assert!((s - 0.76175).abs() < 1e-12, "{s}");
}

#[test]
fn metrics_match_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let d1 = rng.random_range(0.0..0.3);
        let d2 = rng.random_range(0.0..0.3);
        let pred = support::random_mask(&mut rng, [12, 12, 12], d1);
        let gt = support::random_mask(&mut rng, [12, 12, 12], d2);
        let v = voxel_metrics(&pred, &gt).unwrap();
        assert_eq!((v.dsc, v.ppv, v.tpr), support::brute_voxel(&pred, &gt));
        let l = lesion_metrics(&pred, &gt).unwrap();
        assert_eq!((l.ltpr, l.lfpr), support::brute_lesion(&pred, &gt));
    }
}

#[test]
fn two_subject_fixture_frozen() {
    // values worked by hand; rater 2 has constant volumes so its VC is 0
    let preds = [line(&[1, 0, 0, 0, 0, 1]), line(&[0, 0, 1, 1, 1, 0])];
    let r1 = [line(&[1, 1, 0, 0, 1, 0]), line(&[0, 0, 1, 1, 0, 0])];
    let r2 = [line(&[1, 1, 0, 0, 0, 0]), line(&[0, 0, 1, 1, 0, 0])];
    let rep = evaluate_cohort(&preds, &r1, &r2).unwrap();
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    close(rep.raters[0].dsc, 0.6);
    close(rep.raters[0].ppv, 7.0 / 12.0);
    close(rep.raters[0].ltpr, 0.75);
    close(rep.raters[0].lfpr, 0.25);
    close(rep.raters[0].vc.unwrap(), -1.0);
    close(rep.raters[1].dsc, 0.65);
    close(rep.raters[1].ltpr, 1.0);
    close(rep.raters[1].vc.unwrap(), 0.0);
    close(rep.raters[0].score, 0.2 + 7.0 / 96.0);
    close(rep.raters[1].score, 0.51875 + 7.0 / 96.0);
    close(rep.score, 83.0 / 192.0);
    assert!(!rep.partial);
    assert_eq!(rep.warnings.len(), 1);
}

#[test]
fn single_subject_report_is_partial() {
    let m = line(&[1, 0, 1]);
    let rep = evaluate_cohort(&[m.clone()], &[m.clone()], &[m]).unwrap();
    assert!(rep.partial);
    assert_eq!(rep.vc, None);
    assert!((rep.score - 0.75).abs() < 1e-15);
}

proptest! {
    #[test]
    fn measures_are_bounded_and_dsc_symmetric(seed in any::<u64>(), d1 in 0.0f64..0.5, d2 in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = support::random_mask(&mut rng, [5, 6, 4], d1);
        let b = support::random_mask(&mut rng, [5, 6, 4], d2);
        let ab = voxel_metrics(&a, &b).unwrap();
        let ba = voxel_metrics(&b, &a).unwrap();
        prop_assert_eq!(ab.dsc, ba.dsc);
        prop_assert_eq!(ab.ppv, ba.tpr);
        let l = lesion_metrics(&a, &b).unwrap();
        for v in [ab.dsc, ab.ppv, ab.tpr, l.ltpr, l.lfpr] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn self_comparison_is_perfect(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = support::random_mask(&mut rng, [6, 6, 6], 0.2);
        let v = voxel_metrics(&a, &a).unwrap();
        let l = lesion_metrics(&a, &a).unwrap();
        prop_assert_eq!((v.dsc, v.ppv, v.tpr, l.ltpr, l.lfpr), (1.0, 1.0, 1.0, 1.0, 0.0));
    }
}
