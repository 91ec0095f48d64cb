//! Max IoU between generated and reference layouts under an optimal
//! same-label box matching.

use super::{pair_groups, BoxSet, PromptGroup};
use crate::error::{Error, Result};
use crate::layout::BoundingBox;

/// Maximum-weight assignment on a `rows x cols` weight matrix (row-major,
/// non-negative weights). Returns `(total, assignment)` where
/// `assignment[r]` is the column matched to row `r`, if any.
pub fn max_weight_matching(weights: &[f64], rows: usize, cols: usize) -> (f64, Vec<Option<usize>>) {
    assert_eq!(weights.len(), rows * cols, "weight matrix shape");
    let n = rows.max(cols);
    if n == 0 {
        return (0.0, vec![]);
    }
    let cost = |r: usize, c: usize| if r < rows && c < cols { -weights[r * cols + c] } else { 0.0 };
    // Shortest augmenting path with potentials, 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; rows];
    let mut total = 0.0;
    for j in 1..=n {
        let (r, c) = (p[j] - 1, j - 1);
        if r < rows && c < cols {
            let w = weights[r * cols + c];
            if w > 0.0 {
                assignment[r] = Some(c);
                total += w;
            }
        }
    }
    (total, assignment)
}

/// Matched IoU sum over `max(|a|, |b|)`. Only same-label boxes may match.
/// Two empty layouts score 1.
pub fn layout_iou(a: &BoxSet, b: &BoxSet) -> f64 {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 1.0;
    }
    let weights: Vec<f64> = a
        .iter()
        .flat_map(|x| {
            b.iter().map(move |y| {
                if x.label == y.label {
                    BoundingBox::from_array(x.bbox).iou(&BoundingBox::from_array(y.bbox))
                } else {
                    0.0
                }
            })
        })
        .collect();
    let (total, _) = max_weight_matching(&weights, a.len(), b.len());
    (total / denom as f64).min(1.0)
}

/// Per-prompt means of each generated layout's best score against the
/// reference layouts of its prompt, in reference order.
pub fn max_iou_per_prompt(generated: &[PromptGroup], reference: &[PromptGroup]) -> Result<Vec<(String, f64)>> {
    pair_groups(generated, reference)?
        .into_iter()
        .map(|(g, r)| {
            if g.layouts.is_empty() {
                return Err(Error::EmptyGroup(format!("prompt {:?} has no generated layouts", g.prompt)));
            }
            let sum: f64 =
                g.layouts.iter().map(|gl| r.layouts.iter().map(|rl| layout_iou(gl, rl)).fold(0.0, f64::max)).sum();
            Ok((r.prompt.clone(), sum / g.layouts.len() as f64))
        })
        .collect()
}

/// Mean over prompts of [`max_iou_per_prompt`].
pub fn max_iou(generated: &[PromptGroup], reference: &[PromptGroup]) -> Result<f64> {
    let per = max_iou_per_prompt(generated, reference)?;
    Ok(per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::LabeledBox;

    #[test]
    fn matching_prefers_total_weight() {
        // Greedy would take 0.9 and leave 0.0; optimal is 0.8 + 0.7.
        let (total, a) = max_weight_matching(&[0.9, 0.8, 0.7, 0.0], 2, 2);
        assert!((total - 1.5).abs() < 1e-12);
        assert_eq!(a, vec![Some(1), Some(0)]);
    }

    #[test]
    fn rectangular_matching() {
        let (total, a) = max_weight_matching(&[0.1, 0.5, 0.2], 1, 3);
        assert_eq!(total, 0.5);
        assert_eq!(a, vec![Some(1)]);
        let (total, a) = max_weight_matching(&[0.1, 0.5, 0.2], 3, 1);
        assert_eq!(total, 0.5);
        assert_eq!(a, vec![None, Some(0), None]);
    }

    #[test]
    fn half_overlap_pair() {
        let a = vec![LabeledBox::new("a", [0.0, 0.0, 0.2, 0.2]), LabeledBox::new("b", [0.5, 0.5, 0.1, 0.1])];
        // IoU of [0,0.2]x[0,0.2] with [0,0.2]x[0,0.1] is 0.5.
        let b = vec![LabeledBox::new("a", [0.0, 0.0, 0.2, 0.1]), LabeledBox::new("b", [0.8, 0.8, 0.1, 0.1])];
        assert!((layout_iou(&a, &b) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn label_mismatch_scores_zero() {
        let a = vec![LabeledBox::new("a", [0.1, 0.1, 0.2, 0.2])];
        let b = vec![LabeledBox::new("b", [0.1, 0.1, 0.2, 0.2])];
        assert_eq!(layout_iou(&a, &b), 0.0);
        assert_eq!(layout_iou(&a, &a), 1.0);
    }
}
