//! Library functions against independent scalar oracles, plus statistical
//! and structural properties of the data pipeline.

mod common;

use common::checks::{self, dice_oracle_mismatches, hd95_oracle_mismatches, mix_checks, pseudo_label_fuzz, tau_endpoints};
use common::*;
use proptest::prelude::*;
use subseg_core::data::{generate_sample, split_dataset, GeneratorSpec, HierarchySpec, LabelMap};
use subseg_core::hiermix::{foreground_bbox, sample_transform, SpatialTransform};
use subseg_core::segnet::{ce_dice_loss, negative_learning_loss};
use subseg_core::{Graph, Rng, Tensor};

fn soft_target(n: usize, k: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor<f64> {
    let hw = h * w;
    let mut t = Tensor::zeros(&[n, k, h, w]);
    for i in 0..n {
        for p in 0..hw {
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..k {
                t.data_mut()[(i * k + c) * hw + p] = raw[c] / s;
            }
        }
    }
    t
}

#[test]
fn ce_dice_matches_scalar_oracle() {
    let mut rng = Rng::new(1);
    for case in 0..40 {
        let (n, k, h, w) = (1 + rng.below(3), 2 + rng.below(4), 1 + rng.below(6), 1 + rng.below(6));
        let logits = rand_tensor::<f64>(&[n, k, h, w], &mut rng, -4.0, 4.0);
        let target = soft_target(n, k, h, w, &mut rng);
        let weights: Option<Vec<f64>> = (case % 2 == 0).then(|| (0..n * h * w).map(|_| rng.below(3) as f64).collect());
        if weights.as_ref().is_some_and(|ws| ws.iter().all(|&v| v == 0.0)) {
            continue;
        }
        let mut g = Graph::new();
        let lv = g.input(logits.clone());
        let loss = ce_dice_loss(&mut g, lv, &target, weights.as_deref()).unwrap();
        let got = g.value(loss).data()[0];
        let want = ce_dice_oracle([n, k, h, w], logits.data(), target.data(), weights.as_deref());
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "case {case}: {got} vs {want}");
    }
}

#[test]
fn negative_learning_matches_scalar_oracle() {
    let mut rng = Rng::new(2);
    for k_fg in [2, 3] {
        let hier = HierarchySpec::two_level(k_fg).unwrap();
        for _ in 0..20 {
            let (n, h, w) = (1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(5));
            let k = hier.num_sub();
            let logits = rand_tensor::<f64>(&[n, k, h, w], &mut rng, -5.0, 5.0);
            let ys: Vec<LabelMap> = (0..n).map(|_| rand_labels(h, w, 2, &mut rng)).collect();
            let refs: Vec<&LabelMap> = ys.iter().collect();
            let mut g = Graph::new();
            let lv = g.input(logits.clone());
            let loss = negative_learning_loss(&mut g, lv, &refs, &hier).unwrap();
            let got = g.value(loss).data()[0];
            let want = nl_oracle([n, k, h, w], logits.data(), &ys, &hier);
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn dice_and_hd95_match_brute_force() {
    assert_eq!(dice_oracle_mismatches(2000, 3), 0);
    assert_eq!(hd95_oracle_mismatches(200, 4), 0);
}

#[test]
fn pseudo_labels_match_rule_and_invariants() {
    let r = pseudo_label_fuzz(2000, 5);
    assert_eq!((r.oracle_mismatches, r.unsound, r.non_monotone), (0, 0, 0), "{r:?}");
    assert_eq!(tau_endpoints(4000), (1.0, 0.4, 0.7));
    assert_eq!(tau_endpoints(7).1, 0.4);
}

#[test]
fn mixing_matches_resampling_oracles() {
    let r = mix_checks(300, 6);
    assert_eq!(r.endpoint_failures + r.locality_failures + r.label_mismatches + r.target_mismatches, 0, "{r:?}");
    assert!(r.max_image_err <= 1e-6, "{r:?}");
    assert!(r.max_row_sum_err <= 1e-6, "{r:?}");
}

#[test]
fn every_transform_is_inverted_exactly() {
    let t = Tensor::from_fn(&[2, 3, 5], |i| i as f32);
    let mut images = std::collections::BTreeSet::new();
    for i in 0..16 {
        let s = SpatialTransform::from_index(i);
        assert_eq!(s.index(), i);
        let fwd = s.apply(&t).unwrap();
        let expect_shape = if s.rot90_k % 2 == 1 { [2, 5, 3] } else { [2, 3, 5] };
        assert_eq!(fwd.shape(), expect_shape);
        assert_eq!(s.invert(&fwd).unwrap(), t);
        images.insert(fwd.data().iter().map(|v| *v as u32).collect::<Vec<_>>());
    }
    // Flip pairs and half turns coincide: the 16 combinations realise the
    // 8 symmetries of the square, each twice.
    assert_eq!(images.len(), 8);
}

#[test]
fn transforms_are_sampled_uniformly() {
    let mut rng = Rng::new(7);
    let draws = 16_000;
    let mut counts = [0usize; 16];
    for _ in 0..draws {
        counts[sample_transform(&mut rng).index()] += 1;
    }
    let expected = draws as f64 / 16.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Upper 0.1% point of chi-square with 15 degrees of freedom.
    assert!(chi2 < 37.70, "chi2 {chi2}: {counts:?}");
}

#[test]
fn generated_images_usually_show_every_subclass() {
    let spec = GeneratorSpec::default();
    let all = (0..120u64)
        .filter(|&s| {
            let z = generate_sample(s, &spec).unwrap().z.unwrap();
            (1..=spec.k_fg as u8).all(|c| z.data().contains(&c))
        })
        .count();
    assert!(all as f64 >= 0.8 * 120.0, "{all}/120 samples contain every subclass");
}

#[test]
fn op_tolerances_are_pinned() {
    assert_eq!((checks::OP_STEP, checks::OP_TOL), (1e-3, 1e-3));
    assert_eq!((checks::E2E_TOL, checks::E2E_COORDS), (1e-2, 20));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bbox_is_tight(h in 1usize..12, w in 1usize..12, seed in any::<u64>(), density in 0.0f64..0.5) {
        let mut rng = Rng::new(seed);
        let m = LabelMap::new(h, w, (0..h * w).map(|_| (rng.uniform() < density) as u8).collect()).unwrap();
        let got = foreground_bbox(&m).map(|r| (r.top, r.left, r.height, r.width));
        prop_assert_eq!(got, bbox_oracle(&m));
    }

    #[test]
    fn split_partitions_training_samples(n in 1usize..12, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let spec = GeneratorSpec { height: 16, width: 16, radius_min: 3.0, radius_max: 6.0, ..GeneratorSpec::default() };
        let samples: Vec<_> = (0..n as u64).map(|s| generate_sample(s, &spec).unwrap()).collect();
        let n_sub = (frac * n as f64) as usize;
        let split = split_dataset(samples.clone(), n_sub, seed).unwrap();
        prop_assert_eq!(split.fine.len(), n_sub);
        prop_assert_eq!(split.coarse.len(), n - n_sub);
        let mut seeds: Vec<u64> = split.fine.iter().chain(&split.coarse).map(|s| s.seed).collect();
        seeds.sort_unstable();
        prop_assert_eq!(seeds, (0..n as u64).collect::<Vec<_>>());
        for (i, s) in split.coarse.iter().enumerate() {
            let orig = &samples[s.seed as usize];
            prop_assert!(s.z.is_none());
            prop_assert_eq!(&s.y, &orig.y);
            prop_assert_eq!(split.hidden_label(i), orig.z.as_ref());
        }
        prop_assert!(split_dataset(samples, n + 1, seed).is_err());
    }
}
