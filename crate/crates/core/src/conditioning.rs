//! Partial-layout conditioning and directional drift during sampling.
//!
//! Conditioned entries are tracked with an explicit mask. After every Euler
//! update the masked entries are replaced by the straight path from the
//! initial noise to their target, then the drift vector is added.

use serde::{Deserialize, Serialize};

use crate::embedding::Vocabulary;
use crate::error::{Error, Result};
use crate::flow::sampler::{export_layout, integrate, Prompt, Sampler, VelocityField};
use crate::layout::{opacity_channel, token_width, BoundingBox, DatasetStats, Layout, TokenMatrix};

pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Flow-space target values with a per-scalar presence mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialLayout {
    pub values: TokenMatrix,
    pub mask: Vec<bool>,
}

impl PartialLayout {
    /// Nothing conditioned.
    pub fn empty(j: usize, d: usize) -> Self {
        let w = token_width(d);
        Self { values: TokenMatrix::zeros(j, w), mask: vec![false; j * w] }
    }

    pub fn tokens(&self) -> usize {
        self.values.rows
    }

    pub fn width(&self) -> usize {
        self.values.cols
    }

    pub fn is_masked(&self, token: usize, channel: usize) -> bool {
        self.mask[token * self.values.cols + channel]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Conditions one flow-space scalar.
    pub fn set(&mut self, token: usize, channel: usize, value: f64) -> Result<()> {
        if token >= self.tokens() {
            return Err(Error::IndexOutOfRange { index: token, capacity: self.tokens() });
        }
        if channel >= self.width() {
            return Err(Error::IndexOutOfRange { index: channel, capacity: self.width() });
        }
        if !value.is_finite() {
            return Err(Error::InvalidConstraint(format!("non-finite value at token {token}, channel {channel}")));
        }
        self.values.set(token, channel, value);
        let w = self.width();
        self.mask[token * w + channel] = true;
        Ok(())
    }

    /// Conditions one data-space scalar, standardized with `stats`.
    pub fn set_data(&mut self, stats: &DatasetStats, token: usize, channel: usize, value: f64) -> Result<()> {
        self.check_stats(stats)?;
        self.set(token, channel, stats.standardize_value(channel, value))
    }

    /// Pins a data-space box. The token is also marked present.
    pub fn set_box(&mut self, stats: &DatasetStats, token: usize, bbox: BoundingBox) -> Result<()> {
        for (c, v) in bbox.to_array().into_iter().enumerate() {
            self.set_data(stats, token, c, v)?;
        }
        self.set_data(stats, token, opacity_channel(stats.d), 1.0)
    }

    fn check_stats(&self, stats: &DatasetStats) -> Result<()> {
        if stats.width() != self.width() {
            return Err(Error::DimensionMismatch { expected: self.width(), actual: stats.width() });
        }
        Ok(())
    }
}

/// Conditions every embedding channel of `token` to `label` and its opacity
/// to 1. Box channels are left as they were.
pub fn apply_label_condition(
    partial: &PartialLayout,
    token: usize,
    label: &str,
    vocab: &Vocabulary,
    stats: &DatasetStats,
) -> Result<PartialLayout> {
    let c = vocab.embed(label)?;
    if c.len() != stats.d {
        return Err(Error::DimensionMismatch { expected: stats.d, actual: c.len() });
    }
    let mut out = partial.clone();
    for (k, &v) in c.iter().enumerate() {
        out.set_data(stats, token, 4 + k, v)?;
    }
    out.set_data(stats, token, opacity_channel(stats.d), 1.0)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    LeftOf,
    RightOf,
    Above,
    Below,
}

/// `subject` should end up `kind` of `object`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConstraint {
    pub kind: DriftKind,
    pub subject: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftSpec {
    pub constraints: Vec<DriftConstraint>,
    pub lambda: f64,
    /// Pushes the subject of `left_of` towards +x (and mirrors the other
    /// kinds) instead of towards -x.
    pub literal_signs: bool,
}

impl DriftSpec {
    pub fn new(constraints: Vec<DriftConstraint>, lambda: f64) -> Self {
        Self { constraints, lambda, literal_signs: false }
    }

    pub fn none() -> Self {
        Self::new(Vec::new(), 0.0)
    }
}

/// Per-step drift added to the state. With x growing rightward and y
/// downward, `left_of(j, k)` puts `-lambda` on the x channel of `j` and
/// `+lambda` on that of `k`; `above` does the same on y.
pub fn build_drift(spec: &DriftSpec, j: usize, d: usize) -> Result<TokenMatrix> {
    if !spec.lambda.is_finite() || spec.lambda < 0.0 {
        return Err(Error::InvalidConstraint(format!("lambda must be finite and non-negative, got {}", spec.lambda)));
    }
    let mut drift = TokenMatrix::zeros(j, token_width(d));
    for c in &spec.constraints {
        for idx in [c.subject, c.object] {
            if idx >= j {
                return Err(Error::IndexOutOfRange { index: idx, capacity: j });
            }
        }
        if c.subject == c.object {
            return Err(Error::InvalidConstraint(format!("token {} constrained against itself", c.subject)));
        }
        let (channel, sign) = match c.kind {
            DriftKind::LeftOf => (0, -1.0),
            DriftKind::RightOf => (0, 1.0),
            DriftKind::Above => (1, -1.0),
            DriftKind::Below => (1, 1.0),
        };
        let sign = if spec.literal_signs { -sign } else { sign };
        let step = sign * spec.lambda;
        drift.set(c.subject, channel, drift.get(c.subject, channel) + step);
        drift.set(c.object, channel, drift.get(c.object, channel) - step);
    }
    Ok(drift)
}

/// Whether the subject's center lies strictly on the requested side of the
/// object's center.
pub fn satisfies(layout: &Layout, c: &DriftConstraint) -> bool {
    let a = &layout.tokens[c.subject].bbox;
    let b = &layout.tokens[c.object].bbox;
    match c.kind {
        DriftKind::LeftOf => a.center_x() < b.center_x(),
        DriftKind::RightOf => a.center_x() > b.center_x(),
        DriftKind::Above => a.center_y() < b.center_y(),
        DriftKind::Below => a.center_y() > b.center_y(),
    }
}

impl<F: VelocityField + ?Sized> Sampler<'_, F> {
    /// Flow-space `x(1)` under partial conditioning and drift.
    pub fn sample_conditioned_flow(
        &self,
        prompt: &[f64],
        partial: &PartialLayout,
        drift: &TokenMatrix,
        seed: u64,
    ) -> Result<TokenMatrix> {
        let x0 = self.noise(seed);
        if !partial.values.same_shape(&x0) || partial.mask.len() != x0.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "partial layout is {}x{}, state is {}x{}",
                partial.values.rows, partial.values.cols, x0.rows, x0.cols
            )));
        }
        if !drift.same_shape(&x0) {
            return Err(Error::ShapeMismatch(format!(
                "drift is {}x{}, state is {}x{}",
                drift.rows, drift.cols, x0.rows, x0.cols
            )));
        }
        let masked: Vec<usize> = (0..x0.data.len()).filter(|&i| partial.mask[i]).collect();
        if let Some(&i) = masked.iter().find(|&&i| !partial.values.data[i].is_finite()) {
            return Err(Error::InvalidConstraint(format!("non-finite conditioned value at flat index {i}")));
        }
        let pushes: Vec<(usize, f64)> =
            drift.data.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect();
        let y1 = &partial.values.data;
        integrate(self.field, &x0, prompt, self.steps, |x, t| {
            for &i in &masked {
                x.data[i] = y1[i] * t + x0.data[i] * (1.0 - t);
            }
            for &(i, v) in &pushes {
                x.data[i] += v;
            }
        })
    }

    pub fn sample_conditioned(
        &self,
        prompt: &Prompt,
        partial: &PartialLayout,
        drift: &TokenMatrix,
        seed: u64,
    ) -> Result<Layout> {
        let flow = self.sample_conditioned_flow(&prompt.embedding, partial, drift, seed)?;
        export_layout(&self.stats.destandardize_matrix(&flow), prompt, self.null_embedding)
    }
}

/// One conditioned token in a request. At least one of `label` and `box`
/// must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenCondition {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

/// Conditioned-generation request as exchanged with clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionRequest {
    pub prompt: String,
    #[serde(default)]
    pub tokens: Vec<TokenCondition>,
    #[serde(default)]
    pub constraints: Vec<DriftConstraint>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default, rename = "T")]
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub literal_signs: bool,
}

impl ConditionRequest {
    pub fn partial(&self, vocab: &Vocabulary, stats: &DatasetStats) -> Result<PartialLayout> {
        let mut partial = PartialLayout::empty(stats.j, stats.d);
        for tc in &self.tokens {
            if tc.index >= stats.j {
                return Err(Error::IndexOutOfRange { index: tc.index, capacity: stats.j });
            }
            if tc.label.is_none() && tc.bbox.is_none() {
                return Err(Error::InvalidConstraint(format!("token {} has neither label nor box", tc.index)));
            }
            if let Some(label) = &tc.label {
                partial = apply_label_condition(&partial, tc.index, label, vocab, stats)?;
            }
            if let Some(b) = tc.bbox {
                partial.set_box(stats, tc.index, BoundingBox::from_array(b))?;
            }
        }
        Ok(partial)
    }

    pub fn drift_spec(&self, default_lambda: f64) -> DriftSpec {
        DriftSpec {
            constraints: self.constraints.clone(),
            lambda: self.lambda.unwrap_or(default_lambda),
            literal_signs: self.literal_signs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lo(s: usize, o: usize) -> DriftConstraint {
        DriftConstraint { kind: DriftKind::LeftOf, subject: s, object: o }
    }

    #[test]
    fn empty_spec_gives_zero_drift() {
        let d = build_drift(&DriftSpec::new(vec![], 0.01), 4, 2).unwrap();
        assert!(d.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn left_of_touches_two_x_entries() {
        let d = build_drift(&DriftSpec::new(vec![lo(0, 2)], 0.01), 3, 2).unwrap();
        let nonzero: Vec<(usize, usize, f64)> = (0..3)
            .flat_map(|r| (0..7).map(move |c| (r, c)))
            .filter(|&(r, c)| d.get(r, c) != 0.0)
            .map(|(r, c)| (r, c, d.get(r, c)))
            .collect();
        assert_eq!(nonzero, vec![(0, 0, -0.01), (2, 0, 0.01)]);

        let mut literal = DriftSpec::new(vec![lo(0, 2)], 0.01);
        literal.literal_signs = true;
        let d = build_drift(&literal, 3, 2).unwrap();
        assert_eq!((d.get(0, 0), d.get(2, 0)), (0.01, -0.01));
    }

    #[test]
    fn shared_subject_drifts_add() {
        let d = build_drift(&DriftSpec::new(vec![lo(0, 1), lo(0, 2)], 0.01), 3, 1).unwrap();
        assert_eq!(d.get(0, 0), -0.02);
        assert_eq!(d.get(1, 0), 0.01);
        assert_eq!(d.get(2, 0), 0.01);
    }

    #[test]
    fn vertical_kinds_use_y() {
        let c = DriftConstraint { kind: DriftKind::Below, subject: 1, object: 0 };
        let d = build_drift(&DriftSpec::new(vec![c], 0.5), 2, 1).unwrap();
        assert_eq!((d.get(1, 1), d.get(0, 1)), (0.5, -0.5));
        assert_eq!(d.get(1, 0), 0.0);
    }

    #[test]
    fn invalid_constraints_rejected() {
        assert!(matches!(
            build_drift(&DriftSpec::new(vec![lo(0, 5)], 0.01), 3, 1),
            Err(Error::IndexOutOfRange { index: 5, capacity: 3 })
        ));
        assert!(build_drift(&DriftSpec::new(vec![lo(1, 1)], 0.01), 3, 1).is_err());
        assert!(build_drift(&DriftSpec::new(vec![], f64::NAN), 3, 1).is_err());
    }

    #[test]
    fn request_json_parses() {
        let r: ConditionRequest = serde_json::from_str(
            r#"{"prompt": "room", "tokens": [{"index": 0, "label": "chair"}, {"index": 1, "box": [0.1, 0.2, 0.3, 0.4]}],
                "constraints": [{"kind": "left_of", "subject": 0, "object": 1}], "lambda": 0.01, "T": 50, "seed": 42}"#,
        )
        .unwrap();
        assert_eq!(r.tokens[1].bbox, Some([0.1, 0.2, 0.3, 0.4]));
        assert_eq!(r.constraints[0], lo(0, 1));
        assert_eq!(r.steps, Some(50));
        assert!(serde_json::from_str::<ConditionRequest>(r#"{"prompt": "x", "bogus": 1}"#).is_err());
    }

    #[test]
    fn set_rejects_bad_indices() {
        let mut p = PartialLayout::empty(2, 1);
        assert!(p.set(2, 0, 1.0).is_err());
        assert!(p.set(0, 6, 1.0).is_err());
        assert!(p.set(0, 0, f64::INFINITY).is_err());
        p.set(1, 5, 0.5).unwrap();
        assert!(p.is_masked(1, 5));
        assert_eq!(p.masked_count(), 1);
    }

    #[test]
    fn box_pin_marks_presence() {
        let stats = DatasetStats::identity(1, 2);
        let mut p = PartialLayout::empty(2, 1);
        p.set_box(&stats, 1, BoundingBox::new(0.1, 0.2, 0.3, 0.4)).unwrap();
        let masked: Vec<usize> = (0..6).filter(|&c| p.is_masked(1, c)).collect();
        assert_eq!(masked, vec![0, 1, 2, 3, 5]);
        assert_eq!(p.values.row(1), &[0.1, 0.2, 0.3, 0.4, 0.0, 1.0]);
    }
}
