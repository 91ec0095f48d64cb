//! Euler integration of a velocity field from Gaussian noise to layouts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::net::VelocityNet;
use crate::error::{Error, Result};
use crate::layout::{opacity_channel, BoundingBox, DatasetStats, Layout, ObjectToken, TokenMatrix, OPACITY_THRESHOLD};

/// Default number of integration steps.
pub const DEFAULT_STEPS: usize = 1200;

/// Anything that predicts `dx/dt` for a token matrix.
pub trait VelocityField: Sync {
    fn velocity(&self, x: &TokenMatrix, t: f64, prompt: &[f64]) -> Result<TokenMatrix>;
}

impl VelocityField for VelocityNet {
    fn velocity(&self, x: &TokenMatrix, t: f64, prompt: &[f64]) -> Result<TokenMatrix> {
        self.forward(x, t, prompt)
    }
}

/// Element-wise `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    assert_eq!(x0.len(), x1.len(), "interpolation endpoints differ in shape");
    x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// Standard-normal matrix drawn from the seed, row-major.
pub fn initial_noise(rows: usize, cols: usize, seed: u64) -> TokenMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    TokenMatrix::from_vec(rows, cols, data)
}

/// Seed of the `index`-th layout in a request for `base`.
pub fn derive_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Integrates from `x0` over `steps` uniform Euler steps. Step `k` evaluates
/// the field at the current state and time `(k-1)/steps`, advances to
/// `k/steps`, then calls `after_step(x, t)`.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    x0: &TokenMatrix,
    prompt: &[f64],
    steps: usize,
    mut after_step: impl FnMut(&mut TokenMatrix, f64),
) -> Result<TokenMatrix> {
    if steps == 0 {
        return Err(Error::Config("at least one integration step is required".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for k in 1..=steps {
        let t_prev = (k - 1) as f64 / steps as f64;
        let v = field.velocity(&x, t_prev, prompt)?;
        if !v.same_shape(&x) {
            return Err(Error::ShapeMismatch(format!(
                "velocity is {}x{}, state is {}x{}",
                v.rows, v.cols, x.rows, x.cols
            )));
        }
        for (xi, vi) in x.data.iter_mut().zip(&v.data) {
            *xi += vi * dt;
        }
        after_step(&mut x, k as f64 / steps as f64);
    }
    Ok(x)
}

/// Prompt identity plus its full-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub id: usize,
    pub text: String,
    pub embedding: Vec<f64>,
}

/// Applies the export rules to a data-space matrix: tokens with opacity
/// below 0.5 become padding, boxes and opacity are clamped to [0, 1].
pub fn export_layout(data: &TokenMatrix, prompt: &Prompt, null_embedding: &[f64]) -> Result<Layout> {
    let d = data.cols - 5;
    let tokens = (0..data.rows)
        .map(|r| {
            let row = data.row(r);
            let alpha = row[opacity_channel(d)];
            if alpha >= OPACITY_THRESHOLD {
                let bbox = BoundingBox::new(row[0], row[1], row[2], row[3]).clamped();
                ObjectToken::new(bbox, row[4..4 + d].to_vec(), alpha.min(1.0))
            } else {
                ObjectToken::padding(null_embedding)
            }
        })
        .collect();
    Ok(Layout { prompt_id: prompt.id, prompt_text: prompt.text.clone(), tokens })
}

/// Unconditioned sampling with a frozen field and dataset statistics.
pub struct Sampler<'a, F: VelocityField + ?Sized> {
    pub field: &'a F,
    pub stats: &'a DatasetStats,
    pub null_embedding: &'a [f64],
    pub steps: usize,
}

impl<'a, F: VelocityField + ?Sized> Sampler<'a, F> {
    pub fn new(field: &'a F, stats: &'a DatasetStats, null_embedding: &'a [f64], steps: usize) -> Self {
        Self { field, stats, null_embedding, steps }
    }

    pub fn noise(&self, seed: u64) -> TokenMatrix {
        initial_noise(self.stats.j, self.stats.width(), seed)
    }

    /// Final flow-space state `x(1)`.
    pub fn sample_flow(&self, prompt: &Prompt, seed: u64) -> Result<TokenMatrix> {
        integrate(self.field, &self.noise(seed), &prompt.embedding, self.steps, |_, _| {})
    }

    /// `x(1)` mapped back to data space, before thresholding or clamping.
    pub fn sample_raw(&self, prompt: &Prompt, seed: u64) -> Result<TokenMatrix> {
        Ok(self.stats.destandardize_matrix(&self.sample_flow(prompt, seed)?))
    }

    pub fn sample(&self, prompt: &Prompt, seed: u64) -> Result<Layout> {
        export_layout(&self.sample_raw(prompt, seed)?, prompt, self.null_embedding)
    }

    /// One layout per seed. Each sample depends only on its own seed.
    pub fn sample_many(&self, prompt: &Prompt, seeds: &[u64]) -> Result<Vec<Layout>> {
        seeds.par_iter().map(|&s| self.sample(prompt, s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f64);
    impl VelocityField for Constant {
        fn velocity(&self, x: &TokenMatrix, _t: f64, _p: &[f64]) -> Result<TokenMatrix> {
            Ok(TokenMatrix::from_vec(x.rows, x.cols, vec![self.0; x.data.len()]))
        }
    }

    struct Zero;
    impl VelocityField for Zero {
        fn velocity(&self, x: &TokenMatrix, _t: f64, _p: &[f64]) -> Result<TokenMatrix> {
            Ok(TokenMatrix::zeros(x.rows, x.cols))
        }
    }

    fn prompt() -> Prompt {
        Prompt { id: 0, text: "room".into(), embedding: vec![] }
    }

    #[test]
    fn interpolation_endpoints() {
        let a = [1.0, -2.0, 0.5];
        let b = [3.0, 4.0, -1.0];
        assert_eq!(interpolate(&a, &b, 0.0), a.to_vec());
        assert_eq!(interpolate(&a, &b, 1.0), b.to_vec());
        assert_eq!(interpolate(&[0.0], &[2.0], 0.5), vec![1.0]);
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let x0 = initial_noise(3, 6, 9);
        for steps in [1, 7, 1200] {
            let x1 = integrate(&Constant(0.75), &x0, &[], steps, |_, _| {}).unwrap();
            for (a, b) in x1.data.iter().zip(&x0.data) {
                assert!((a - (b + 0.75)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(integrate(&Zero, &TokenMatrix::zeros(1, 5), &[], 0, |_, _| {}).is_err());
    }

    #[test]
    fn hook_sees_step_times() {
        let mut times = vec![];
        integrate(&Zero, &TokenMatrix::zeros(1, 5), &[], 4, |_, t| times.push(t)).unwrap();
        assert_eq!(times, vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn zero_field_returns_destandardized_noise() {
        let mut stats = DatasetStats::identity(1, 4);
        stats.mean = vec![0.5, 0.5, 0.2, 0.2, 0.0, 0.5];
        stats.std = vec![0.1, 0.2, 0.05, 0.05, 1.0, 0.5];
        let sampler = Sampler::new(&Zero, &stats, &[0.0], 10);
        let raw = sampler.sample_raw(&prompt(), 3).unwrap();
        let expect = stats.destandardize_matrix(&initial_noise(4, 6, 3));
        assert_eq!(raw, expect);
    }

    #[test]
    fn zero_field_channel_variance_matches_stats() {
        let mut stats = DatasetStats::identity(0, 1);
        stats.mean = vec![0.3, 0.4, 0.1, 0.2, 0.5];
        stats.std = vec![0.2, 0.1, 0.05, 0.3, 0.5];
        let sampler = Sampler::new(&Zero, &stats, &[], 3);
        let draws: Vec<TokenMatrix> = (0..4000).map(|s| sampler.sample_raw(&prompt(), s).unwrap()).collect();
        for c in 0..5 {
            let vals: Vec<f64> = draws.iter().map(|m| m.get(0, c)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let want = stats.std[c] * stats.std[c];
            assert!((var / want - 1.0).abs() < 0.1, "channel {c}: {var} vs {want}");
        }
    }

    #[test]
    fn same_seed_same_layout() {
        let stats = DatasetStats::identity(2, 3);
        let sampler = Sampler::new(&Constant(0.1), &stats, &[0.0, 0.0], 5);
        assert_eq!(sampler.sample(&prompt(), 11).unwrap(), sampler.sample(&prompt(), 11).unwrap());
        assert_ne!(sampler.sample(&prompt(), 11).unwrap(), sampler.sample(&prompt(), 12).unwrap());
    }

    #[test]
    fn export_thresholds_and_clamps() {
        let data = TokenMatrix::from_vec(2, 6, vec![1.4, -0.2, 0.5, 0.5, 0.7, 0.8, 0.1, 0.1, 0.1, 0.1, 0.7, 0.49]);
        let l = export_layout(&data, &prompt(), &[9.0]).unwrap();
        assert_eq!(l.tokens[0].bbox, BoundingBox::new(1.0, 0.0, 0.5, 0.5));
        assert_eq!(l.tokens[0].opacity, 0.8);
        assert_eq!(l.tokens[1], ObjectToken::padding(&[9.0]));
    }

    #[test]
    fn sample_many_matches_individual_samples() {
        let stats = DatasetStats::identity(1, 2);
        let sampler = Sampler::new(&Constant(0.3), &stats, &[0.0], 4);
        let seeds: Vec<u64> = (0..6).map(|i| derive_seed(40, i)).collect();
        let many = sampler.sample_many(&prompt(), &seeds).unwrap();
        for (l, s) in many.iter().zip(&seeds) {
            assert_eq!(l, &sampler.sample(&prompt(), *s).unwrap());
        }
    }
}
