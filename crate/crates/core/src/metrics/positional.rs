//! Positional likelihoods under reference KDEs and positional variance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kde::Kde;
use super::{difference, pair_groups, squared_distance, Box4, BoxSet, PromptGroup};
use crate::error::{Error, Result};

/// Aggregate of density values over evaluated boxes or box pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodScore {
    /// Density sum over the primary denominator.
    pub value: f64,
    /// Density sum over the number of evaluated items.
    pub item_mean: f64,
    pub evaluated: usize,
    /// Generated items whose reference model had fewer than two points.
    pub skipped: usize,
    pub per_prompt: Vec<(String, Option<f64>)>,
}

struct PromptSum {
    density: f64,
    evaluated: usize,
    skipped: usize,
    denominator: f64,
}

fn finish(sums: Vec<(String, PromptSum)>) -> Result<LikelihoodScore> {
    let evaluated: usize = sums.iter().map(|(_, s)| s.evaluated).sum();
    if evaluated == 0 {
        return Err(Error::NoEvaluablePairs);
    }
    let density: f64 = sums.iter().map(|(_, s)| s.density).sum();
    let denominator: f64 = sums.iter().filter(|(_, s)| s.evaluated > 0).map(|(_, s)| s.denominator).sum();
    Ok(LikelihoodScore {
        value: density / denominator,
        item_mean: density / evaluated as f64,
        evaluated,
        skipped: sums.iter().map(|(_, s)| s.skipped).sum(),
        per_prompt: sums.into_iter().map(|(p, s)| (p, (s.evaluated > 0).then(|| s.density / s.denominator))).collect(),
    })
}

/// Reference boxes per (prompt, label), in the order used by the first-order
/// likelihood.
pub fn label_box_groups(reference: &[PromptGroup]) -> Vec<Vec<Box4>> {
    reference.iter().flat_map(|r| r.labels().into_iter().map(move |l| r.boxes_of(&l).collect())).collect()
}

fn pair_differences(layout: &BoxSet, a: &str, b: &str) -> Vec<Box4> {
    let mut out = Vec::new();
    for x in layout.iter().filter(|x| x.label == a) {
        for y in layout.iter().filter(|y| y.label == b) {
            out.push(difference(&x.bbox, &y.bbox));
        }
    }
    out
}

fn label_pairs(labels: &[String]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (i, a) in labels.iter().enumerate() {
        for b in &labels[i + 1..] {
            out.push((a.clone(), b.clone()));
        }
    }
    out
}

/// Reference difference vectors per (prompt, unordered label pair).
pub fn pair_difference_groups(reference: &[PromptGroup]) -> Vec<Vec<Box4>> {
    reference
        .iter()
        .flat_map(|r| {
            label_pairs(&r.labels())
                .into_iter()
                .map(move |(a, b)| r.layouts.iter().flat_map(|l| pair_differences(l, &a, &b)).collect())
        })
        .collect()
}

/// Mean density of generated boxes under the KDE of reference boxes with the
/// same prompt and label.
pub fn positional_likelihood_1(
    generated: &[PromptGroup],
    reference: &[PromptGroup],
    bandwidth: f64,
) -> Result<LikelihoodScore> {
    let sums = pair_groups(generated, reference)?
        .into_par_iter()
        .map(|(g, r)| {
            let mut s = PromptSum { density: 0.0, evaluated: 0, skipped: 0, denominator: 0.0 };
            for label in g.labels() {
                let pts: Vec<Box4> = r.boxes_of(&label).collect();
                let gen: Vec<Box4> = g.boxes_of(&label).collect();
                if pts.len() < 2 {
                    s.skipped += gen.len();
                    continue;
                }
                let kde = Kde::new(pts, bandwidth)?;
                s.density += gen.iter().map(|b| kde.density(b)).sum::<f64>();
                s.evaluated += gen.len();
            }
            s.denominator = s.evaluated as f64;
            Ok((r.prompt.clone(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    finish(sums)
}

/// Density of within-layout difference vectors `b_a - b_b` (labels `a < b`)
/// under the KDE of reference differences for the same prompt and label
/// pair. `value` divides by `n (n + 1) / 2` summed over generated layouts of
/// `n` boxes; `item_mean` divides by the number of evaluated pairs.
pub fn positional_likelihood_2(
    generated: &[PromptGroup],
    reference: &[PromptGroup],
    bandwidth: f64,
) -> Result<LikelihoodScore> {
    let sums = pair_groups(generated, reference)?
        .into_par_iter()
        .map(|(g, r)| {
            let mut s = PromptSum { density: 0.0, evaluated: 0, skipped: 0, denominator: 0.0 };
            let mut labels = g.labels();
            labels.extend(r.labels());
            labels.sort();
            labels.dedup();
            for (a, b) in label_pairs(&labels) {
                let gen: Vec<Box4> = g.layouts.iter().flat_map(|l| pair_differences(l, &a, &b)).collect();
                if gen.is_empty() {
                    continue;
                }
                let pts: Vec<Box4> = r.layouts.iter().flat_map(|l| pair_differences(l, &a, &b)).collect();
                if pts.len() < 2 {
                    s.skipped += gen.len();
                    continue;
                }
                let kde = Kde::new(pts, bandwidth)?;
                s.density += gen.iter().map(|x| kde.density(x)).sum::<f64>();
                s.evaluated += gen.len();
            }
            s.denominator = g.layouts.iter().map(|l| (l.len() * (l.len() + 1)) as f64 / 2.0).sum();
            Ok((r.prompt.clone(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    finish(sums)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// One nearest distance per (box, other layout containing the label).
    #[default]
    PerLayout,
    /// One nearest distance per box over all other layouts pooled.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceScore {
    pub value: f64,
    pub pairs: usize,
    pub per_prompt: Vec<(String, Option<f64>)>,
}

fn nearest(b: &Box4, candidates: impl Iterator<Item = Box4>) -> Option<f64> {
    candidates.map(|c| squared_distance(b, &c)).min_by(f64::total_cmp).map(f64::sqrt)
}

/// Mean Euclidean distance from each box to the closest same-label box in
/// other layouts of its prompt. Prompts with fewer than two layouts are
/// skipped.
pub fn positional_variance(groups: &[PromptGroup], mode: VarianceMode) -> Result<VarianceScore> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut per_prompt = Vec::with_capacity(groups.len());
    for g in groups {
        let mut sum = 0.0;
        let mut n = 0usize;
        if g.layouts.len() >= 2 {
            for (s, layout) in g.layouts.iter().enumerate() {
                for b in layout {
                    let others = g.layouts.iter().enumerate().filter(|(o, _)| *o != s).map(|(_, l)| l);
                    let same =
                        |l: &BoxSet| -> Vec<Box4> { l.iter().filter(|x| x.label == b.label).map(|x| x.bbox).collect() };
                    match mode {
                        VarianceMode::PerLayout => {
                            for other in others {
                                if let Some(dist) = nearest(&b.bbox, same(other).into_iter()) {
                                    sum += dist;
                                    n += 1;
                                }
                            }
                        }
                        VarianceMode::Pooled => {
                            if let Some(dist) = nearest(&b.bbox, others.flat_map(same)) {
                                sum += dist;
                                n += 1;
                            }
                        }
                    }
                }
            }
        }
        per_prompt.push((g.prompt.clone(), (n > 0).then(|| sum / n as f64)));
        total += sum;
        pairs += n;
    }
    if pairs == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok(VarianceScore { value: total / pairs as f64, pairs, per_prompt })
}
