mod common;

use common::center_map_oracle;
use proptest::prelude::*;
use zseg::annotations::CentroidSet;
use zseg::centermap::{anisotropy_from_spacing, build_center_map, nearest_centroid_field, CenterMapParams};

fn centroid_strategy() -> impl Strategy<Value = ([usize; 3], Vec<[f64; 3]>)> {
    (1usize..6, 2usize..10, 2usize..10).prop_flat_map(|(nz, ny, nx)| {
        let point = (0.0..=(nz - 1) as f64, 0.0..=(ny - 1) as f64, 0.0..=(nx - 1) as f64)
            .prop_map(|(z, y, x)| [z, y, x]);
        (Just([nz, ny, nx]), prop::collection::vec(point, 1..6))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matches_definition(
        (dims, points) in centroid_strategy(),
        d_m in 0.5f64..10.0,
        k in 0.1f64..6.0,
        aniso in prop::array::uniform3(0.5f64..3.0),
    ) {
        let set = CentroidSet::new(points);
        let params = CenterMapParams { d_m, k, anisotropy: None };
        let got = build_center_map(dims, &set, &params, aniso).unwrap();
        let want = center_map_oracle(dims, &set, d_m, k, aniso);
        for (g, w) in got.data().iter().zip(want.data()) {
            prop_assert!((*g as f64 - w).abs() < 1e-6, "{} vs {}", g, w);
        }
    }

    #[test]
    fn values_in_unit_interval(
        (dims, points) in centroid_strategy(),
        d_m in 0.5f64..10.0,
    ) {
        let set = CentroidSet::new(points);
        let m = build_center_map(dims, &set, &CenterMapParams { d_m, ..Default::default() }, [1.0; 3]).unwrap();
        prop_assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn peak_sits_on_centroid() {
    let set = CentroidSet::new(vec![[3.0, 4.0, 5.0]]);
    let m = build_center_map([7, 9, 11], &set, &CenterMapParams::default(), [1.0; 3]).unwrap();
    assert_eq!(m.get(3, 4, 5), 1.0);
    assert!((m.get(3, 4, 6) as f64 - (-3.0f64 / 8.0).exp()).abs() < 1e-6);
    assert_eq!(m.get(0, 0, 0), (-3.0 * (9.0f64 + 16.0 + 25.0).sqrt() / 8.0).exp() as f32);
}

#[test]
fn cutoff_zeroes_far_voxels() {
    let set = CentroidSet::new(vec![[0.0, 0.0, 0.0]]);
    let params = CenterMapParams { d_m: 2.0, ..Default::default() };
    let m = build_center_map([1, 1, 5], &set, &params, [1.0; 3]).unwrap();
    assert!(m.get(0, 0, 2) > 0.0);
    assert_eq!(m.get(0, 0, 3), 0.0);
}

#[test]
fn border_between_two_centroids_is_zero() {
    let set = CentroidSet::new(vec![[0.0, 0.0, 1.0], [0.0, 0.0, 6.0]]);
    let m = build_center_map([1, 1, 8], &set, &CenterMapParams::default(), [1.0; 3]).unwrap();
    assert_eq!(m.get(0, 0, 3), 0.0);
    assert_eq!(m.get(0, 0, 4), 0.0);
    assert!(m.get(0, 0, 2) > 0.0);
}

#[test]
fn anisotropy_stretches_distance_along_z() {
    let a = anisotropy_from_spacing([2.0, 1.0, 1.0]);
    assert_eq!(a, [2.0, 1.0, 1.0]);
    let set = CentroidSet::new(vec![[2.0, 2.0, 2.0]]);
    let (_, d) = nearest_centroid_field([5, 5, 5], &set, a).unwrap();
    assert_eq!(d.get(3, 2, 2), 2.0);
    assert_eq!(d.get(2, 2, 3), 1.0);
}

#[test]
fn empty_centroids_rejected() {
    let set = CentroidSet::new(vec![]);
    assert!(build_center_map([2, 2, 2], &set, &CenterMapParams::default(), [1.0; 3]).is_err());
}
