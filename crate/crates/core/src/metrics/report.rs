//! Full evaluation of generated layouts against a reference set.

use serde::{Deserialize, Serialize};

use super::iou::max_iou_per_prompt;
use super::kde::{cv_bandwidth_groups, log_grid};
use super::numeracy::numeracy_per_prompt;
use super::positional::{
    label_box_groups, pair_difference_groups, positional_likelihood_1, positional_likelihood_2, positional_variance,
    LikelihoodScore, VarianceMode,
};
use super::PromptGroup;
use crate::error::{Error, Result};
use crate::layout::DEFAULT_TOKENS;

/// Canvas side used for the pixel-unit variance.
pub const CANVAS_PX: f64 = 512.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub epsilon: f64,
    pub max_count: usize,
    pub grid: Vec<f64>,
    pub folds: usize,
    pub cv_seed: u64,
    /// Points per KDE group used for bandwidth selection.
    pub cv_cap: usize,
    pub variance_mode: VarianceMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_count: DEFAULT_TOKENS,
            grid: log_grid(0.01, 1.0, 12),
            folds: 5,
            cv_seed: 0,
            cv_cap: 400,
            variance_mode: VarianceMode::PerLayout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    pub prompt: String,
    pub o_num: f64,
    pub l_pos1: Option<f64>,
    pub l_pos2: Option<f64>,
    pub sigma2_pos: Option<f64>,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Object numeracy, unscaled.
    pub o_num: f64,
    /// Object numeracy times 100.
    pub o_num_scaled: f64,
    pub l_pos1: Option<f64>,
    pub l_pos2: Option<f64>,
    /// Second-order likelihood averaged over evaluated box pairs.
    pub l_pos2_pair_mean: Option<f64>,
    /// Positional variance in unit canvas coordinates.
    pub sigma2_pos: Option<f64>,
    /// Positional variance on a 512-pixel canvas.
    pub sigma2_pos_px: Option<f64>,
    pub miou: f64,
    pub bandwidth_l1: Option<f64>,
    pub bandwidth_l2: Option<f64>,
    pub skipped_l1: usize,
    pub skipped_l2: usize,
    pub per_prompt: Vec<PromptReport>,
}

fn optional<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NoEvaluablePairs | Error::NoComparablePairs | Error::TooFewPoints { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn likelihood(
    generated: &[PromptGroup],
    reference: &[PromptGroup],
    groups: Vec<Vec<[f64; 4]>>,
    cfg: &EvalConfig,
    score: fn(&[PromptGroup], &[PromptGroup], f64) -> Result<LikelihoodScore>,
) -> Result<(Option<f64>, Option<LikelihoodScore>)> {
    let Some(h) = optional(cv_bandwidth_groups(&groups, &cfg.grid, cfg.folds, cfg.cv_seed, cfg.cv_cap))? else {
        return Ok((None, None));
    };
    Ok((Some(h), optional(score(generated, reference, h))?))
}

fn lookup(per: &Option<LikelihoodScore>, prompt: &str) -> Option<f64> {
    per.as_ref()?.per_prompt.iter().find(|(p, _)| p == prompt).and_then(|(_, v)| *v)
}

/// Runs every metric. Reference groups define the prompt set; KDE
/// bandwidths are selected once per likelihood family on the reference.
pub fn evaluate(generated: &[PromptGroup], reference: &[PromptGroup], cfg: &EvalConfig) -> Result<MetricsReport> {
    let numeracy = numeracy_per_prompt(generated, reference, cfg.max_count, cfg.epsilon)?;
    let iou = max_iou_per_prompt(generated, reference)?;
    let (bandwidth_l1, l1) =
        likelihood(generated, reference, label_box_groups(reference), cfg, positional_likelihood_1)?;
    let (bandwidth_l2, l2) =
        likelihood(generated, reference, pair_difference_groups(reference), cfg, positional_likelihood_2)?;
    let generated_in_order: Vec<PromptGroup> =
        reference.iter().filter_map(|r| generated.iter().find(|g| g.prompt == r.prompt).cloned()).collect();
    let variance = optional(positional_variance(&generated_in_order, cfg.variance_mode))?;

    let prompts = numeracy.len() as f64;
    let o_num = numeracy.iter().map(|(_, v)| v).sum::<f64>() / prompts;
    let miou = iou.iter().map(|(_, v)| v).sum::<f64>() / prompts;
    let per_prompt = numeracy
        .iter()
        .zip(&iou)
        .map(|((p, o), (_, m))| PromptReport {
            prompt: p.clone(),
            o_num: *o,
            l_pos1: lookup(&l1, p),
            l_pos2: lookup(&l2, p),
            sigma2_pos: variance.as_ref().and_then(|v| v.per_prompt.iter().find(|(q, _)| q == p).and_then(|(_, x)| *x)),
            miou: *m,
        })
        .collect();
    Ok(MetricsReport {
        o_num,
        o_num_scaled: o_num * 100.0,
        l_pos1: l1.as_ref().map(|s| s.value),
        l_pos2: l2.as_ref().map(|s| s.value),
        l_pos2_pair_mean: l2.as_ref().map(|s| s.item_mean),
        sigma2_pos: variance.as_ref().map(|v| v.value),
        sigma2_pos_px: variance.as_ref().map(|v| v.value * CANVAS_PX),
        miou,
        bandwidth_l1,
        bandwidth_l2,
        skipped_l1: l1.as_ref().map_or(0, |s| s.skipped),
        skipped_l2: l2.as_ref().map_or(0, |s| s.skipped),
        per_prompt,
    })
}
