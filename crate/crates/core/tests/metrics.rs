mod common;

use common::{boxes, brute_force_layout_iou, random_box};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use slayr_core::metrics::iou::{layout_iou, max_iou, max_weight_matching};
use slayr_core::metrics::kde::{cv_bandwidth, cv_bandwidth_groups, log_grid, Kde};
use slayr_core::metrics::numeracy::{count_histogram, kl_divergence, object_numeracy};
use slayr_core::metrics::positional::{positional_likelihood_1, positional_variance, VarianceMode};
use slayr_core::metrics::report::{evaluate, EvalConfig};
use slayr_core::metrics::{Box4, BoxSet, LabeledBox, PromptGroup};

const LABELS: [&str; 3] = ["car", "tree", "sky"];

fn random_groups(seed: u64, prompts: usize, layouts: usize) -> Vec<PromptGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..prompts)
        .map(|p| {
            let ls = (0..layouts)
                .map(|_| {
                    let n = rng.random_range(1..5);
                    let labels: Vec<&str> = (0..n).map(|_| LABELS[rng.random_range(0..3)]).collect();
                    boxes(&labels, &mut rng)
                })
                .collect();
            PromptGroup::new(format!("p{p}"), ls)
        })
        .collect()
}

#[test]
fn histogram_with_epsilon_by_hand() {
    let h = count_histogram(&[0, 1, 1], 2, 0.1);
    let want = [1.1 / 3.3, 2.1 / 3.3, 0.1 / 3.3];
    for (a, b) in h.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn kl_by_hand() {
    let kl = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]);
    assert!((kl - (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())).abs() < 1e-15);
    assert_eq!(kl_divergence(&[0.0, 1.0], &[0.5, 0.5]), 2f64.ln());
}

#[test]
fn numeracy_by_hand() {
    let one = |n: usize| -> BoxSet { (0..n).map(|_| LabeledBox::new("car", [0.0, 0.0, 0.1, 0.1])).collect() };
    let reference = vec![PromptGroup::new("p", vec![one(1), one(1)])];
    let generated = vec![PromptGroup::new("p", vec![one(1), one(2)])];
    let eps = 0.01;
    let p: [f64; 3] = [eps / 2.03, 2.01 / 2.03, eps / 2.03];
    let q: [f64; 3] = [eps / 2.03, 1.01 / 2.03, 1.01 / 2.03];
    let want: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    let got = object_numeracy(&generated, &reference, 2, eps).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn numeracy_of_identical_sets_vanishes() {
    let x = random_groups(1, 3, 20);
    assert!(object_numeracy(&x, &x, 30, 1e-3).unwrap() < 1e-2);
}

#[test]
fn kde_peak_closed_form() {
    for h in [0.01, 0.05, 0.3, 1.0] {
        let kde = Kde::new(vec![[0.2, 0.3, 0.1, 0.4]], h).unwrap();
        let want = (2.0 * std::f64::consts::PI * h * h).powi(-2);
        let got = kde.density(&[0.2, 0.3, 0.1, 0.4]);
        assert!((got - want).abs() <= 1e-9 * want);
        assert!((kde.log_density(&[0.2, 0.3, 0.1, 0.4]) - want.ln()).abs() < 1e-12);
    }
}

#[test]
fn cv_bandwidth_near_rule_of_thumb() {
    let sigma = 0.1;
    let n = 400;
    let normal = Normal::new(0.5, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<Box4> = (0..n).map(|_| std::array::from_fn(|_| normal.sample(&mut rng))).collect();
    let silverman = sigma * (4.0 / (6.0 * n as f64)).powf(1.0 / 8.0);
    let h = cv_bandwidth(&pts, &log_grid(0.005, 0.5, 40), 5, 0).unwrap();
    assert!(h > silverman / 3.0 && h < silverman * 3.0, "cv {h} vs rule {silverman}");
}

#[test]
fn identical_points_pick_smallest_bandwidth() {
    let grid = log_grid(0.01, 1.0, 12);
    let pts = vec![[0.3, 0.3, 0.2, 0.2]; 25];
    assert_eq!(cv_bandwidth(&pts, &grid, 5, 9).unwrap(), grid[0]);
    let groups = vec![pts.clone(), vec![[0.7, 0.1, 0.1, 0.1]; 10]];
    assert_eq!(cv_bandwidth_groups(&groups, &grid, 5, 9, 400).unwrap(), grid[0]);
}

#[test]
fn too_few_points_for_cv() {
    assert!(cv_bandwidth(&[[0.0; 4]; 3], &[0.1, 0.2], 5, 0).is_err());
}

#[test]
fn likelihood_of_point_masses() {
    let b = [0.1, 0.2, 0.3, 0.4];
    let group = vec![PromptGroup::new("p", vec![vec![LabeledBox::new("car", b)]; 3])];
    let h = 0.2;
    let s = positional_likelihood_1(&group, &group, h).unwrap();
    assert!((s.value - Kde::peak(h)).abs() < 1e-9 * Kde::peak(h));
    assert_eq!(s.evaluated, 3);
}

/// Mean nearest same-label distance into each other layout, written without
/// any shared helpers.
fn variance_oracle(groups: &[PromptGroup]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for g in groups {
        for (i, a) in g.layouts.iter().enumerate() {
            for (k, b) in g.layouts.iter().enumerate() {
                if i == k {
                    continue;
                }
                for x in a {
                    let mut best = f64::INFINITY;
                    for y in b.iter().filter(|y| y.label == x.label) {
                        let d2: f64 = (0..4).map(|c| (x.bbox[c] - y.bbox[c]).powi(2)).sum();
                        best = best.min(d2.sqrt());
                    }
                    if best.is_finite() {
                        sum += best;
                        n += 1;
                    }
                }
            }
        }
    }
    sum / n as f64
}

#[test]
fn variance_matches_brute_force() {
    for seed in 0..10 {
        let g = random_groups(seed, 2, 6);
        let got = positional_variance(&g, VarianceMode::PerLayout).unwrap().value;
        assert!((got - variance_oracle(&g)).abs() < 1e-12);
    }
}

#[test]
fn variance_of_copies_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layout = boxes(&["car", "tree", "car"], &mut rng);
    let same = vec![PromptGroup::new("p", vec![layout.clone(); 4])];
    assert_eq!(positional_variance(&same, VarianceMode::PerLayout).unwrap().value, 0.0);
    assert_eq!(positional_variance(&same, VarianceMode::Pooled).unwrap().value, 0.0);

    let mut g = random_groups(4, 2, 5);
    for p in &mut g {
        let copies = p.layouts.clone();
        p.layouts.extend(copies);
    }
    assert_eq!(positional_variance(&g, VarianceMode::Pooled).unwrap().value, 0.0);
}

#[test]
fn max_iou_of_identical_sets_is_one() {
    let x = random_groups(7, 3, 10);
    assert_eq!(max_iou(&x, &x).unwrap(), 1.0);
}

#[test]
fn matching_agrees_with_enumeration_on_two_and_three_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let na = rng.random_range(2..=3);
        let nb = rng.random_range(2..=3);
        let pick = |rng: &mut ChaCha8Rng, n: usize| -> BoxSet {
            (0..n).map(|_| LabeledBox::new(LABELS[rng.random_range(0..2)], random_box(rng))).collect()
        };
        let a = pick(&mut rng, na);
        let b = pick(&mut rng, nb);
        assert!((layout_iou(&a, &b) - brute_force_layout_iou(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn full_report_on_self() {
    let x = random_groups(2, 2, 40);
    let r = evaluate(&x, &x, &EvalConfig::default()).unwrap();
    assert_eq!(r.miou, 1.0);
    assert!(r.o_num < 1e-12);
    assert!((r.o_num_scaled - 100.0 * r.o_num).abs() < 1e-12);
    assert!(r.l_pos1.is_some() && r.sigma2_pos.is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_agrees_with_enumeration(seed in 0u64..10_000, na in 0usize..5, nb in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = |rng: &mut ChaCha8Rng, n: usize| -> BoxSet {
            (0..n).map(|_| LabeledBox::new(LABELS[rng.random_range(0..2)], random_box(rng))).collect()
        };
        let a = pick(&mut rng, na);
        let b = pick(&mut rng, nb);
        let got = layout_iou(&a, &b);
        prop_assert!((got - brute_force_layout_iou(&a, &b)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
        prop_assert!((got - layout_iou(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn assignment_is_injective(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect();
        let (total, assign) = max_weight_matching(&w, rows, cols);
        let mut used = vec![false; cols];
        let mut sum = 0.0;
        for (r, c) in assign.iter().enumerate() {
            if let Some(c) = *c {
                prop_assert!(!used[c]);
                used[c] = true;
                sum += w[r * cols + c];
            }
        }
        prop_assert!((sum - total).abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative(counts_a in prop::collection::vec(0usize..6, 1..30), counts_b in prop::collection::vec(0usize..6, 1..30)) {
        let p = count_histogram(&counts_a, 5, 1e-3);
        let q = count_histogram(&counts_b, 5, 1e-3);
        prop_assert!(kl_divergence(&p, &q) >= -1e-12);
    }
}
