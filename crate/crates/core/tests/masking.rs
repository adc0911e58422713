use mrl::masking::{add_noise, apply_mask, build_mask, joint_velocity, mask_count, MaskStrategy};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

mod common;
use common::mask_oracle;

fn tie_heavy_velocity() -> impl Strategy<Value = Array2<f32>> {
    (1usize..16, 1usize..25).prop_flat_map(|(rows, joints)| {
        proptest::collection::vec(
            prop_oneof![Just(0.0f32), Just(0.5), Just(1.0), 0.0f32..3.0],
            rows * joints,
        )
        .prop_map(move |v| Array2::from_shape_vec((rows, joints), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn velocity_mask_matches_sort_oracle(
        vel in tie_heavy_velocity(),
        rate in prop::sample::select(vec![0.0, 0.25, 0.5, 0.75]),
    ) {
        let plan = build_mask(&vel, rate, MaskStrategy::Velocity, 0).unwrap();
        let (rows, joints) = vel.dim();
        prop_assert_eq!(plan.count(), (rate * (rows * joints) as f64).round() as usize);
        prop_assert_eq!(&plan.masked, &mask_oracle(&vel, rate));
        prop_assert!(plan.masked.row(0).iter().all(|&m| !m));
        if plan.count() > 0 {
            let min_masked = (1..=rows)
                .flat_map(|t| (0..joints).map(move |j| (t, j)))
                .filter(|&(t, j)| plan.masked[[t, j]])
                .map(|(t, j)| vel[[t - 1, j]])
                .fold(f32::INFINITY, f32::min);
            prop_assert_eq!(plan.threshold, min_masked);
            for t in 1..=rows {
                for j in 0..joints {
                    if !plan.masked[[t, j]] {
                        prop_assert!(vel[[t - 1, j]] <= plan.threshold);
                    }
                }
            }
        } else {
            prop_assert_eq!(plan.threshold, f32::INFINITY);
        }
    }

    #[test]
    fn random_mask_count_and_domain(
        vel in tie_heavy_velocity(),
        rate in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let plan = build_mask(&vel, rate, MaskStrategy::Random, seed).unwrap();
        let (rows, joints) = vel.dim();
        prop_assert_eq!(plan.count(), mask_count(rate, rows * joints));
        prop_assert!(plan.masked.row(0).iter().all(|&m| !m));
        let again = build_mask(&vel, rate, MaskStrategy::Random, seed).unwrap();
        prop_assert_eq!(plan.masked, again.masked);
    }

    #[test]
    fn apply_mask_is_idempotent(
        data in proptest::collection::vec(-2.0f32..2.0, 6 * 4 * 3),
        rate in 0.0f64..=1.0,
    ) {
        let x = Array3::from_shape_vec((6, 4, 3), data).unwrap();
        let plan = build_mask(&joint_velocity(&x).unwrap(), rate, MaskStrategy::Velocity, 0).unwrap();
        let once = apply_mask(&x, &plan).unwrap();
        prop_assert_eq!(apply_mask(&once, &plan).unwrap(), once.clone());
        for t in 0..6 {
            for j in 0..4 {
                for k in 0..3 {
                    let want = if plan.masked[[t, j]] { 0.0 } else { x[[t, j, k]] };
                    prop_assert_eq!(once[[t, j, k]], want);
                }
            }
        }
    }
}

#[test]
fn velocity_strategy_ignores_seed() {
    let vel = Array2::from_shape_fn((5, 4), |(t, j)| ((t * 7 + j * 3) % 5) as f32);
    let a = build_mask(&vel, 0.5, MaskStrategy::Velocity, 1).unwrap();
    let b = build_mask(&vel, 0.5, MaskStrategy::Velocity, 99).unwrap();
    assert_eq!(a.masked, b.masked);
}

#[test]
fn inverted_mask_hides_the_complement() {
    let vel = Array2::from_shape_fn((4, 3), |(t, j)| (t + j) as f32);
    let plan = build_mask(&vel, 0.25, MaskStrategy::Velocity, 0).unwrap();
    let inv = plan.clone().inverted();
    assert_eq!(plan.count() + inv.count(), 4 * 3);
    assert!(inv.masked.row(0).iter().all(|&m| !m));
}

#[test]
fn out_of_range_rate_is_rejected() {
    let vel = Array2::<f32>::zeros((2, 2));
    for rate in [-0.1, 1.5, f64::NAN] {
        let err = build_mask(&vel, rate, MaskStrategy::Velocity, 0).unwrap_err();
        assert!(err.to_string().contains("rate ∈ [0,1]"));
    }
}

#[test]
fn noise_mean_within_three_sigma() {
    let x = Array3::<f32>::zeros((100, 10, 100));
    let y = add_noise(&x, 0.05, 7).unwrap();
    let n = y.len() as f64;
    let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    assert!(mean.abs() < 3.0 * 0.05 / n.sqrt(), "{mean}");
    assert_eq!(add_noise(&x, 0.05, 7).unwrap(), y);
    assert_eq!(add_noise(&x, 0.0, 7).unwrap(), x);
}
