#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use slayr_core::flow::{VelocityNet, VelocityNetConfig};
use slayr_core::metrics::{Box4, BoxSet, LabeledBox};
use slayr_core::TokenMatrix;

/// Two blocks, width 16.
pub fn small_config(d: usize, j: usize, prompt_dim: usize) -> VelocityNetConfig {
    VelocityNetConfig {
        blocks: 2,
        heads: 2,
        model_width: 16,
        mlp_ratio: 2,
        box_enc_dim_per_coord: 6,
        alpha_enc_dim: 4,
        t_enc_dim: 5,
        prompt_proj_dim: 5,
        ..VelocityNetConfig::desk(d, j, prompt_dim)
    }
}

/// Network with every parameter drawn from N(0, std), including the
/// zero-initialised modulation and output layers.
pub fn random_net(cfg: VelocityNetConfig, seed: u64, std: f64) -> VelocityNet {
    let mut net = VelocityNet::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, std).unwrap();
    for v in net.params_mut().values.iter_mut() {
        *v = n.sample(&mut rng);
    }
    net
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> TokenMatrix {
    TokenMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
}

pub fn random_box(rng: &mut impl Rng) -> Box4 {
    [rng.random_range(0.0..0.8), rng.random_range(0.0..0.8), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)]
}

pub fn boxes(labels: &[&str], rng: &mut impl Rng) -> BoxSet {
    labels.iter().map(|l| LabeledBox::new(*l, random_box(rng))).collect()
}

/// Axis-aligned IoU written out from corner coordinates.
pub fn iou_oracle(a: &Box4, b: &Box4) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Best one-to-one same-label IoU sum by enumerating every injection of the
/// smaller set into the larger, divided by the larger size.
pub fn brute_force_layout_iou(a: &BoxSet, b: &BoxSet) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if large.is_empty() {
        return 1.0;
    }
    fn search(i: usize, small: &BoxSet, large: &BoxSet, used: &mut Vec<bool>) -> f64 {
        if i == small.len() {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for k in 0..large.len() {
            if used[k] {
                continue;
            }
            used[k] = true;
            let w = if small[i].label == large[k].label { iou_oracle(&small[i].bbox, &large[k].bbox) } else { 0.0 };
            best = best.max(w + search(i + 1, small, large, used));
            used[k] = false;
        }
        best
    }
    search(0, small, large, &mut vec![false; large.len()]) / large.len() as f64
}

/// Mean 1-D Wasserstein-1 distance between equal-size samples.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}
