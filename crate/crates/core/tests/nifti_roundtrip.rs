use msseg_core::volio::{
    read_confidence, read_mask, read_volume, write_confidence, write_mask, write_volume,
};
use msseg_core::{BinaryMask3D, ConfidenceMap, Grid3, Volume3D};
use proptest::prelude::*;

fn grid_dims() -> impl Strategy<Value = [usize; 3]> {
    [1usize..9, 1usize..9, 1usize..9]
}

fn spacing() -> impl Strategy<Value = [f32; 3]> {
    [0.1f32..4.0, 0.1f32..4.0, 0.1f32..4.0]
}

/// Every finite class, signed zeros and subnormals included.
fn finite() -> impl Strategy<Value = f32> {
    use proptest::num::f32::{NEGATIVE, NORMAL, POSITIVE, SUBNORMAL, ZERO};
    POSITIVE | NEGATIVE | NORMAL | SUBNORMAL | ZERO
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn float_volumes_round_trip_bit_exact(
        dims in grid_dims(),
        sp in spacing(),
        values in proptest::collection::vec(finite(), 512),
        gz in any::<bool>(),
    ) {
        let n = dims.iter().product::<usize>();
        let data = values[..n].to_vec();
        let v = Volume3D::with_spacing(dims, sp, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if gz { "v.nii.gz" } else { "v.nii" });
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        prop_assert_eq!(back.dims(), dims);
        prop_assert_eq!(back.spacing(), sp);
        let a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn masks_and_confidence_round_trip(dims in grid_dims(), sp in spacing(), seed in any::<u64>(), n_votes in 1u16..=255) {
        let n = dims.iter().product::<usize>();
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); s >> 33 };
        let mask = BinaryMask3D::with_spacing(dims, sp, (0..n).map(|_| next() % 2 == 1).collect()).unwrap();
        let counts = Grid3::with_spacing(dims, sp, (0..n).map(|_| (next() % (n_votes as u64 + 1)) as u16).collect()).unwrap();
        let conf = ConfidenceMap::from_counts(counts, n_votes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_mask(&mask, dir.path().join("m.nii.gz")).unwrap();
        write_confidence(&conf, dir.path().join("c.nii.gz")).unwrap();
        prop_assert_eq!(read_mask(dir.path().join("m.nii.gz")).unwrap(), mask);
        let back = read_confidence(dir.path().join("c.nii.gz")).unwrap();
        prop_assert_eq!(back.n_votes(), n_votes);
        prop_assert_eq!(back.counts(), conf.counts());
    }
}

#[test]
fn written_files_are_byte_identical_across_writes() {
    let v = Volume3D::from_fn([7, 5, 3], |x, y, z| (x * 100 + y * 10 + z) as f32 * 0.37);
    let dir = tempfile::tempdir().unwrap();
    write_volume(&v, dir.path().join("a.nii.gz")).unwrap();
    write_volume(&v, dir.path().join("b.nii.gz")).unwrap();
    let a = std::fs::read(dir.path().join("a.nii.gz")).unwrap();
    let b = std::fs::read(dir.path().join("b.nii.gz")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn non_binary_mask_is_rejected() {
    let v = Volume3D::from_vec([2, 1, 1], vec![0.0, 2.0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_volume(&v, dir.path().join("v.nii")).unwrap();
    assert!(read_mask(dir.path().join("v.nii")).is_err());
}
