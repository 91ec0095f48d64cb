//! Object numeracy: KL divergence between per-label count histograms.

use super::{pair_groups, PromptGroup};
use crate::error::Result;

/// Histogram of `counts` over bins `0..=max_count`, with `epsilon` added to
/// every bin before normalizing. Counts above `max_count` land in the last bin.
pub fn count_histogram(counts: &[usize], max_count: usize, epsilon: f64) -> Vec<f64> {
    let mut bins = vec![epsilon; max_count + 1];
    for &c in counts {
        bins[c.min(max_count)] += 1.0;
    }
    let total: f64 = bins.iter().sum();
    if total > 0.0 {
        bins.iter_mut().for_each(|b| *b /= total);
    }
    bins
}

/// `KL(p || q)` with the convention `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi / qi).ln()).sum()
}

fn label_counts(group: &PromptGroup, label: &str) -> Vec<usize> {
    group.layouts.iter().map(|l| l.iter().filter(|b| b.label == label).count()).collect()
}

/// Per-prompt sums of `KL(reference || generated)` over the labels seen on
/// either side, in reference order.
pub fn numeracy_per_prompt(
    generated: &[PromptGroup],
    reference: &[PromptGroup],
    max_count: usize,
    epsilon: f64,
) -> Result<Vec<(String, f64)>> {
    pair_groups(generated, reference)?
        .into_iter()
        .map(|(g, r)| {
            let mut labels = r.labels();
            labels.extend(g.labels());
            labels.sort();
            labels.dedup();
            let max_seen = g.layouts.iter().chain(&r.layouts).map(|l| l.len()).max().unwrap_or(0);
            let bins = max_count.max(max_seen);
            let kl = labels
                .iter()
                .map(|l| {
                    let p = count_histogram(&label_counts(r, l), bins, epsilon);
                    let q = count_histogram(&label_counts(g, l), bins, epsilon);
                    kl_divergence(&p, &q)
                })
                .sum();
            Ok((r.prompt.clone(), kl))
        })
        .collect()
}

/// Sum of count-histogram divergences over every (prompt, label) pair,
/// divided by the number of prompts. Unscaled.
pub fn object_numeracy(
    generated: &[PromptGroup],
    reference: &[PromptGroup],
    max_count: usize,
    epsilon: f64,
) -> Result<f64> {
    let per = numeracy_per_prompt(generated, reference, max_count, epsilon)?;
    Ok(per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_sums_to_one() {
        let h = count_histogram(&[0, 1, 1, 3, 9], 5, 1e-3);
        assert_eq!(h.len(), 6);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(h[5] > h[4]);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = count_histogram(&[1, 2, 2], 4, 1e-3);
        assert_eq!(kl_divergence(&p, &p), 0.0);
    }
}
