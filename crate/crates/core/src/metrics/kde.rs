//! Isotropic Gaussian kernel density estimates in four dimensions and
//! cross-validated bandwidth selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{squared_distance, Box4};
use crate::error::{Error, Result};

const DIM: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    pub points: Vec<Box4>,
    pub bandwidth: f64,
}

impl Kde {
    pub fn new(points: Vec<Box4>, bandwidth: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::TooFewPoints { points: 0, folds: 1 });
        }
        if bandwidth <= 0.0 || !bandwidth.is_finite() {
            return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { points, bandwidth })
    }

    /// Kernel peak `(2 pi h^2)^(-2)`.
    pub fn peak(bandwidth: f64) -> f64 {
        (2.0 * std::f64::consts::PI * bandwidth * bandwidth).powf(-DIM / 2.0)
    }

    pub fn density(&self, x: &Box4) -> f64 {
        let h2 = self.bandwidth * self.bandwidth;
        let sum: f64 = self.points.iter().map(|p| (-squared_distance(x, p) / (2.0 * h2)).exp()).sum();
        Self::peak(self.bandwidth) * sum / self.points.len() as f64
    }

    /// `ln density(x)`, stable far from every point.
    pub fn log_density(&self, x: &Box4) -> f64 {
        log_density(&self.points, self.bandwidth, x)
    }
}

fn log_density(points: &[Box4], h: f64, x: &Box4) -> f64 {
    let h2 = h * h;
    let exps: Vec<f64> = points.iter().map(|p| -squared_distance(x, p) / (2.0 * h2)).collect();
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = exps.iter().map(|e| (e - max).exp()).sum();
    max + sum.ln() - (points.len() as f64).ln() - DIM / 2.0 * (2.0 * std::f64::consts::PI * h2).ln()
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()).collect(),
    }
}

/// Total held-out log-likelihood and held-out count of one group for `h`.
fn held_out(points: &[Box4], fold_of: &[usize], folds: usize, h: f64) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0;
    for f in 0..folds {
        let train: Vec<Box4> = points.iter().zip(fold_of).filter(|(_, &k)| k != f).map(|(p, _)| *p).collect();
        for (p, _) in points.iter().zip(fold_of).filter(|(_, &k)| k == f) {
            total += log_density(&train, h, p);
            count += 1;
        }
    }
    (total, count)
}

/// Bandwidth from `grid` maximizing the mean held-out log-likelihood,
/// pooled over every group with at least `folds` points. Points are
/// assigned to folds by position modulo `folds` after a seeded shuffle;
/// groups larger than `cap` are subsampled by the same shuffle. Ties go to
/// the smaller bandwidth.
pub fn cv_bandwidth_groups(groups: &[Vec<Box4>], grid: &[f64], folds: usize, seed: u64, cap: usize) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Config("empty bandwidth grid".into()));
    }
    if folds < 2 {
        return Err(Error::Config("at least two folds are required".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.len() == 1 {
        return Ok(sorted[0]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prepared: Vec<(Vec<Box4>, Vec<usize>)> = groups
        .iter()
        .filter(|g| g.len() >= folds)
        .map(|g| {
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.shuffle(&mut rng);
            order.truncate(cap.max(folds));
            let pts: Vec<Box4> = order.iter().map(|&i| g[i]).collect();
            let fold_of = (0..pts.len()).map(|i| i % folds).collect();
            (pts, fold_of)
        })
        .collect();
    if prepared.is_empty() {
        let most = groups.iter().map(Vec::len).max().unwrap_or(0);
        return Err(Error::TooFewPoints { points: most, folds });
    }
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for &h in &sorted {
        let (total, count) =
            prepared.iter().map(|(p, f)| held_out(p, f, folds, h)).fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        let score = total / count as f64;
        if score > best.0 {
            best = (score, h);
        }
    }
    Ok(best.1)
}

/// Single-group form of [`cv_bandwidth_groups`] without a cap.
pub fn cv_bandwidth(points: &[Box4], grid: &[f64], folds: usize, seed: u64) -> Result<f64> {
    if points.len() < folds.max(2) {
        return Err(Error::TooFewPoints { points: points.len(), folds });
    }
    cv_bandwidth_groups(&[points.to_vec()], grid, folds, seed, usize::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_at_single_point_is_peak() {
        for h in [0.01, 0.1, 0.7] {
            let k = Kde::new(vec![[0.2, 0.3, 0.1, 0.4]], h).unwrap();
            let want = (2.0 * std::f64::consts::PI * h * h).powi(-2);
            assert!((k.density(&[0.2, 0.3, 0.1, 0.4]) - want).abs() <= 1e-9 * want);
            assert!((k.log_density(&[0.2, 0.3, 0.1, 0.4]) - want.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_endpoints() {
        let g = log_grid(0.01, 1.0, 12);
        assert_eq!(g.len(), 12);
        assert!((g[0] - 0.01).abs() < 1e-15 && (g[11] - 1.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn single_grid_value_wins() {
        let pts = vec![[0.0; 4]; 10];
        assert_eq!(cv_bandwidth(&pts, &[0.3], 5, 0).unwrap(), 0.3);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            cv_bandwidth(&[[0.0; 4]; 3], &[0.1, 0.2], 5, 0),
            Err(Error::TooFewPoints { points: 3, folds: 5 })
        ));
    }
}
