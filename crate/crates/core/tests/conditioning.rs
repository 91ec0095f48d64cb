mod common;

use common::{random_net, small_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slayr_core::conditioning::{build_drift, DriftConstraint, DriftKind, DriftSpec, PartialLayout};
use slayr_core::flow::{Sampler, VelocityField};
use slayr_core::{DatasetStats, Result, TokenMatrix};

const D: usize = 3;
const J: usize = 4;
const W: usize = D + 5;

/// Random partial layout with roughly a third of the entries masked.
fn random_partial(rng: &mut impl Rng) -> PartialLayout {
    let mut p = PartialLayout::empty(J, D);
    for r in 0..J {
        for c in 0..W {
            if rng.random_bool(0.35) {
                p.set(r, c, rng.random_range(-2.0..2.0)).unwrap();
            }
        }
    }
    p
}

#[test]
fn masked_entries_end_at_their_targets() {
    let stats = DatasetStats::identity(D, J);
    let null = vec![0.0; D];
    for case in 0..20u64 {
        let net = random_net(small_config(D, J, 7), 100 + case, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let partial = random_partial(&mut rng);
        let prompt: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let steps = rng.random_range(1..40);
        let sampler = Sampler::new(&net, &stats, &null, steps);
        let out = sampler
            .sample_conditioned_flow(&prompt, &partial, &build_drift(&DriftSpec::none(), J, D).unwrap(), case)
            .unwrap();
        for i in 0..J * W {
            if partial.mask[i] {
                assert!((out.data[i] - partial.values.data[i]).abs() <= 1e-9, "case {case} entry {i}");
            }
        }
    }
}

#[test]
fn empty_mask_matches_plain_sampling_bitwise() {
    let stats = DatasetStats::identity(D, J);
    let null = vec![0.0; D];
    for case in 0..20u64 {
        let net = random_net(small_config(D, J, 7), 200 + case, 0.3);
        let prompt = vec![0.1 * case as f64; 7];
        let sampler = Sampler::new(&net, &stats, &null, 25);
        let plain = sampler
            .sample_flow(&slayr_core::flow::Prompt { id: 0, text: "p".into(), embedding: prompt.clone() }, case)
            .unwrap();
        let cond = sampler
            .sample_conditioned_flow(&prompt, &PartialLayout::empty(J, D), &TokenMatrix::zeros(J, W), case)
            .unwrap();
        assert!(plain.data.iter().zip(&cond.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

/// Field that ignores its input.
struct Still;

impl VelocityField for Still {
    fn velocity(&self, x: &TokenMatrix, _t: f64, _prompt: &[f64]) -> Result<TokenMatrix> {
        Ok(TokenMatrix::zeros(x.rows, x.cols))
    }
}

#[test]
fn drift_accumulates_once_per_step() {
    let stats = DatasetStats::identity(D, J);
    let null = vec![0.0; D];
    let steps = 50;
    let sampler = Sampler::new(&Still, &stats, &null, steps);
    let spec = DriftSpec::new(vec![DriftConstraint { kind: DriftKind::LeftOf, subject: 0, object: 2 }], 0.01);
    let drift = build_drift(&spec, J, D).unwrap();
    let x0 = sampler.noise(3);
    let out = sampler.sample_conditioned_flow(&[], &PartialLayout::empty(J, D), &drift, 3).unwrap();
    assert!((out.get(0, 0) - (x0.get(0, 0) - 0.5)).abs() < 1e-12);
    assert!((out.get(2, 0) - (x0.get(2, 0) + 0.5)).abs() < 1e-12);
    assert_eq!(out.get(1, 0), x0.get(1, 0));
    assert_eq!(out.get(0, 1), x0.get(0, 1));
}

#[test]
fn literal_signs_mirror_the_drift() {
    let c = vec![DriftConstraint { kind: DriftKind::Above, subject: 1, object: 3 }];
    let geometric = build_drift(&DriftSpec::new(c.clone(), 0.02), J, D).unwrap();
    let literal = build_drift(&DriftSpec { literal_signs: true, ..DriftSpec::new(c, 0.02) }, J, D).unwrap();
    for (a, b) in geometric.data.iter().zip(&literal.data) {
        assert_eq!(*a, -*b);
    }
    assert_eq!(geometric.get(1, 1), -0.02);
}

#[test]
fn box_pin_is_standardized() {
    let mut stats = DatasetStats::identity(D, J);
    stats.mean[0] = 0.5;
    stats.std[0] = 0.25;
    let mut p = PartialLayout::empty(J, D);
    p.set_box(&stats, 2, slayr_core::BoundingBox::new(0.75, 0.1, 0.2, 0.3)).unwrap();
    assert_eq!(p.values.get(2, 0), 1.0);
    assert_eq!(p.masked_count(), 5);
    assert!(p.is_masked(2, W - 1));
}
