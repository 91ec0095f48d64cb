mod common;

use common::{random_matrix, random_net, small_config};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slayr_core::flow::train::{loss_and_grad, FlowDraw};
use slayr_core::flow::{Activation, TrainingSample, VelocityNet};
use slayr_core::TokenMatrix;

fn batch(net: &VelocityNet, n: usize, seed: u64) -> (Vec<TrainingSample>, Vec<FlowDraw>) {
    let cfg = net.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| TrainingSample {
            target: random_matrix(cfg.j, cfg.token_width(), &mut rng),
            prompt: (0..cfg.prompt_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let draws = (0..n).map(|_| FlowDraw::sample(cfg.j, cfg.token_width(), &mut rng)).collect();
    (samples, draws)
}

fn check_gradient(activation: Activation, seed: u64) {
    let cfg = slayr_core::flow::VelocityNetConfig { activation, ..small_config(3, 4, 7) };
    let mut net = random_net(cfg, seed, 0.3);
    let (samples, draws) = batch(&net, 3, seed + 1);
    let refs: Vec<&TrainingSample> = samples.iter().collect();
    let (_, grad) = loss_and_grad(&net, &refs, &draws).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let h = 1e-4;
    let mut checked = 0;
    while checked < 30 {
        let i = rng.random_range(0..net.parameter_count());
        let orig = net.params().values[i];
        net.params_mut().values[i] = orig + h;
        let (up, _) = loss_and_grad(&net, &refs, &draws).unwrap();
        net.params_mut().values[i] = orig - h;
        let (down, _) = loss_and_grad(&net, &refs, &draws).unwrap();
        net.params_mut().values[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs());
        if scale < 1e-6 {
            continue;
        }
        let rel = (grad[i] - fd).abs() / scale;
        assert!(rel < 1e-4, "param {i}: analytic {} vs numeric {fd} (rel {rel:.2e})", grad[i]);
        checked += 1;
    }
}

#[test]
fn gradient_matches_finite_differences_silu() {
    check_gradient(Activation::Silu, 10);
}

#[test]
fn gradient_matches_finite_differences_gelu() {
    check_gradient(Activation::Gelu, 20);
}

fn permute_rows(m: &TokenMatrix, perm: &[usize]) -> TokenMatrix {
    let mut out = TokenMatrix::zeros(m.rows, m.cols);
    for (dst, &src) in perm.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(m.row(src));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn velocity_is_permutation_equivariant(seed in 0u64..1000, t in 0.0f64..1.0) {
        let net = random_net(small_config(3, 5, 7), seed, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(5, net.config().token_width(), &mut rng);
        let prompt: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..5).collect();
        for i in (1..5).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let direct = permute_rows(&net.forward(&x, t, &prompt).unwrap(), &perm);
        let permuted = net.forward(&permute_rows(&x, &perm), t, &prompt).unwrap();
        for (a, b) in direct.data.iter().zip(&permuted.data) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
