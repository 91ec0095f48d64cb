//! Layout evaluation: object numeracy, positional likelihoods, positional
//! variance and max IoU, computed per prompt group.

pub mod iou;
pub mod kde;
pub mod numeracy;
pub mod positional;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::dataset::{is_real, Scene};
use crate::error::{Error, Result};

pub use iou::{layout_iou, max_iou, max_weight_matching};
pub use kde::{cv_bandwidth, cv_bandwidth_groups, log_grid, Kde};
pub use numeracy::{count_histogram, kl_divergence, object_numeracy};
pub use positional::{positional_likelihood_1, positional_likelihood_2, positional_variance, VarianceMode};
pub use report::{evaluate, EvalConfig, MetricsReport, PromptReport};

pub type Box4 = [f64; 4];

/// A labeled box of an exported layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: String,
    pub bbox: Box4,
}

impl LabeledBox {
    pub fn new(label: impl Into<String>, bbox: Box4) -> Self {
        Self { label: label.into(), bbox }
    }
}

pub type BoxSet = Vec<LabeledBox>;

/// All layouts sharing one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGroup {
    pub prompt: String,
    pub layouts: Vec<BoxSet>,
}

impl PromptGroup {
    pub fn new(prompt: impl Into<String>, layouts: Vec<BoxSet>) -> Self {
        Self { prompt: prompt.into(), layouts }
    }

    /// Sorted distinct labels.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = self.layouts.iter().flatten().map(|b| b.label.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn boxes_of<'a>(&'a self, label: &'a str) -> impl Iterator<Item = Box4> + 'a {
        self.layouts.iter().flatten().filter(move |b| b.label == label).map(|b| b.bbox)
    }
}

/// Groups scenes by prompt in first-seen order. Objects below the opacity
/// threshold are dropped.
pub fn group_scenes(scenes: &[Scene]) -> Vec<PromptGroup> {
    let mut groups: Vec<PromptGroup> = Vec::new();
    for s in scenes {
        let boxes: BoxSet =
            s.objects.iter().filter(|o| is_real(o.opacity)).map(|o| LabeledBox::new(o.label.clone(), o.bbox)).collect();
        match groups.iter_mut().find(|g| g.prompt == s.prompt) {
            Some(g) => g.layouts.push(boxes),
            None => groups.push(PromptGroup::new(s.prompt.clone(), vec![boxes])),
        }
    }
    groups
}

/// Matches generated and reference groups by prompt, in reference order.
/// Every prompt must have layouts on both sides.
pub fn pair_groups<'a>(
    generated: &'a [PromptGroup],
    reference: &'a [PromptGroup],
) -> Result<Vec<(&'a PromptGroup, &'a PromptGroup)>> {
    if reference.is_empty() {
        return Err(Error::EmptyGroup("no reference prompts".into()));
    }
    let find = |gs: &'a [PromptGroup], p: &str| gs.iter().find(|g| g.prompt == p && !g.layouts.is_empty());
    if let Some(g) = generated.iter().find(|g| find(reference, &g.prompt).is_none()) {
        return Err(Error::EmptyGroup(format!("prompt {:?} has no reference layouts", g.prompt)));
    }
    reference
        .iter()
        .map(|r| {
            if r.layouts.is_empty() {
                return Err(Error::EmptyGroup(format!("prompt {:?} has no reference layouts", r.prompt)));
            }
            let g = find(generated, &r.prompt)
                .ok_or_else(|| Error::EmptyGroup(format!("prompt {:?} has no generated layouts", r.prompt)))?;
            Ok((g, r))
        })
        .collect()
}

pub(crate) fn squared_distance(a: &Box4, b: &Box4) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn difference(a: &Box4, b: &Box4) -> Box4 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
}
