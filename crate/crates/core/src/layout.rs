//! Layout domain types: boxes, object tokens, fixed-cardinality layouts and
//! the per-channel standardization that maps layouts into flow space.
//!
//! A token flattens to `[x, y, w, h, c_1..c_d, alpha]`, so a layout of `J`
//! tokens is a `J x (4 + d + 1)` row-major matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default layout capacity.
pub const DEFAULT_TOKENS: usize = 30;

/// Tokens with opacity below this are unused.
pub const OPACITY_THRESHOLD: f64 = 0.5;

/// Standard deviations are floored at this value.
pub const STD_FLOOR: f64 = 1e-6;

/// Axis-aligned box in canvas fractions, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const ZERO: BoundingBox = BoundingBox { x: 0.0, y: 0.0, w: 0.0, h: 0.0 };

    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center_x(&self) -> f64 {
        self.x + self.w / 2.0
    }

    pub fn center_y(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn clamped(self) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        Self::new(c(self.x), c(self.y), c(self.w), c(self.h))
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    /// Intersection over union. Identical boxes score exactly 1, including
    /// degenerate ones.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        if self == other {
            return 1.0;
        }
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One scene object: box, reduced label embedding and opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectToken {
    pub bbox: BoundingBox,
    pub embedding: Vec<f64>,
    pub opacity: f64,
}

impl ObjectToken {
    pub fn new(bbox: BoundingBox, embedding: Vec<f64>, opacity: f64) -> Self {
        Self { bbox, embedding, opacity }
    }

    pub fn padding(null_embedding: &[f64]) -> Self {
        Self::new(BoundingBox::ZERO, null_embedding.to_vec(), 0.0)
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }

    pub fn flat_len(&self) -> usize {
        token_width(self.dim())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        self.flatten_into(&mut out);
        out
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.bbox.to_array());
        out.extend_from_slice(&self.embedding);
        out.push(self.opacity);
    }

    /// Inverse of [`ObjectToken::flatten`]; `values` must hold `4 + d + 1` entries.
    pub fn unflatten(values: &[f64]) -> Result<Self> {
        if values.len() < 5 {
            return Err(Error::DimensionMismatch { expected: 5, actual: values.len() });
        }
        let d = values.len() - 5;
        Ok(Self::new(
            BoundingBox::new(values[0], values[1], values[2], values[3]),
            values[4..4 + d].to_vec(),
            values[4 + d],
        ))
    }
}

/// Flattened width of a token with embedding dimension `d`.
pub fn token_width(d: usize) -> usize {
    4 + d + 1
}

/// Channel index of the opacity entry.
pub fn opacity_channel(d: usize) -> usize {
    4 + d
}

/// A prompt plus exactly `J` tokens. Token order carries no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub prompt_id: usize,
    pub prompt_text: String,
    pub tokens: Vec<ObjectToken>,
}

impl Layout {
    pub fn capacity(&self) -> usize {
        self.tokens.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.tokens.first().map(ObjectToken::dim).unwrap_or(0)
    }

    pub fn real_tokens(&self) -> impl Iterator<Item = &ObjectToken> {
        self.tokens.iter().filter(|t| t.opacity >= OPACITY_THRESHOLD)
    }

    pub fn to_matrix(&self) -> TokenMatrix {
        let d = self.embedding_dim();
        let mut data = Vec::with_capacity(self.tokens.len() * token_width(d));
        for t in &self.tokens {
            t.flatten_into(&mut data);
        }
        TokenMatrix::from_vec(self.tokens.len(), token_width(d), data)
    }

    pub fn from_matrix(prompt_id: usize, prompt_text: &str, m: &TokenMatrix) -> Result<Self> {
        let tokens = (0..m.rows).map(|j| ObjectToken::unflatten(m.row(j))).collect::<Result<_>>()?;
        Ok(Self { prompt_id, prompt_text: prompt_text.to_string(), tokens })
    }
}

/// Dense row-major `rows x cols` matrix; one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TokenMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn same_shape(&self, other: &TokenMatrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Appends padding tokens until there are exactly `capacity` tokens.
pub fn pad_layout(mut tokens: Vec<ObjectToken>, capacity: usize, null_embedding: &[f64]) -> Result<Vec<ObjectToken>> {
    if tokens.len() > capacity {
        return Err(Error::TooManyTokens { count: tokens.len(), capacity });
    }
    tokens.resize_with(capacity, || ObjectToken::padding(null_embedding));
    Ok(tokens)
}

/// Keeps the `capacity` largest boxes by area; equal areas keep their
/// original order.
pub fn select_top_boxes(tokens: Vec<ObjectToken>, capacity: usize) -> Vec<ObjectToken> {
    let mut tokens = tokens;
    // sort_by is stable
    tokens.sort_by(|a, b| b.bbox.area().total_cmp(&a.bbox.area()));
    tokens.truncate(capacity);
    tokens
}

/// Tokens whose opacity reaches `threshold`, in layout order.
pub fn discard_unused(layout: &Layout, threshold: f64) -> Vec<ObjectToken> {
    layout.tokens.iter().filter(|t| t.opacity >= threshold).cloned().collect()
}

/// Per-channel statistics of the flattened token space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub d: usize,
    pub j: usize,
    pub count: usize,
}

impl DatasetStats {
    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Identity map (zero mean, unit std) for a token width.
    pub fn identity(d: usize, j: usize) -> Self {
        let w = token_width(d);
        Self { mean: vec![0.0; w], std: vec![1.0; w], d, j, count: 0 }
    }

    pub fn standardize_matrix(&self, m: &TokenMatrix) -> TokenMatrix {
        let mut out = m.clone();
        for r in 0..out.rows {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn destandardize_matrix(&self, m: &TokenMatrix) -> TokenMatrix {
        let mut out = m.clone();
        for r in 0..out.rows {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }

    pub fn standardize_value(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn destandardize_value(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// Population mean/std per channel over every token of the padded layouts.
///
/// Padding tokens are included so that the opacity channel (and any channel
/// constant across real tokens) keeps a finite scale for padding entries.
pub fn compute_stats(dataset: &[Layout]) -> Result<DatasetStats> {
    let real: usize = dataset.iter().map(|l| l.real_tokens().count()).sum();
    if real < 2 {
        return Err(Error::EmptyDataset);
    }
    let first = &dataset[0];
    let d = first.embedding_dim();
    let j = first.capacity();
    let w = token_width(d);
    let mut sum = vec![0.0; w];
    let mut count = 0usize;
    let mut flat = Vec::with_capacity(w);
    for layout in dataset {
        for t in &layout.tokens {
            if t.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: t.dim() });
            }
            flat.clear();
            t.flatten_into(&mut flat);
            for (s, v) in sum.iter_mut().zip(&flat) {
                *s += v;
            }
            count += 1;
        }
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut sq = vec![0.0; w];
    for layout in dataset {
        for t in &layout.tokens {
            flat.clear();
            t.flatten_into(&mut flat);
            for ((s, v), m) in sq.iter_mut().zip(&flat).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std = sq.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    Ok(DatasetStats { mean, std, d, j, count })
}

pub fn standardize(layout: &Layout, stats: &DatasetStats) -> TokenMatrix {
    stats.standardize_matrix(&layout.to_matrix())
}

pub fn destandardize(m: &TokenMatrix, stats: &DatasetStats, prompt_id: usize, prompt_text: &str) -> Result<Layout> {
    Layout::from_matrix(prompt_id, prompt_text, &stats.destandardize_matrix(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok(area_w: f64, area_h: f64, tag: f64) -> ObjectToken {
        ObjectToken::new(BoundingBox::new(0.0, 0.0, area_w, area_h), vec![tag], 1.0)
    }

    #[test]
    fn flatten_padding_token() {
        let t = ObjectToken::padding(&[0.0, 0.0]);
        assert_eq!(t.flatten(), vec![0.0; 7]);
    }

    #[test]
    fn flatten_order() {
        let t = ObjectToken::new(BoundingBox::new(0.1, 0.2, 0.3, 0.4), vec![1.0, -1.0], 1.0);
        assert_eq!(t.flatten(), vec![0.1, 0.2, 0.3, 0.4, 1.0, -1.0, 1.0]);
        assert_eq!(t.flat_len(), 7);
    }

    proptest! {
        #[test]
        fn flatten_round_trip(
            b in proptest::array::uniform4(-2.0f64..2.0),
            c in proptest::collection::vec(-5.0f64..5.0, 0..12),
            a in -1.0f64..2.0,
        ) {
            let t = ObjectToken::new(BoundingBox::from_array(b), c, a);
            prop_assert_eq!(ObjectToken::unflatten(&t.flatten()).unwrap(), t);
        }
    }

    #[test]
    fn pad_from_empty() {
        let out = pad_layout(vec![], 3, &[0.5]).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|t| t.opacity == 0.0 && t.bbox.is_zero() && t.embedding == vec![0.5]));
    }

    #[test]
    fn pad_full_is_identity() {
        let toks = vec![tok(0.1, 0.1, 1.0), tok(0.2, 0.2, 2.0), tok(0.3, 0.3, 3.0)];
        assert_eq!(pad_layout(toks.clone(), 3, &[0.0]).unwrap(), toks);
    }

    #[test]
    fn pad_rejects_overflow() {
        let toks = vec![tok(0.1, 0.1, 0.0); 31];
        assert!(matches!(pad_layout(toks, 30, &[0.0]), Err(Error::TooManyTokens { count: 31, capacity: 30 })));
    }

    #[test]
    fn top_boxes_by_area() {
        let toks = vec![tok(0.5, 1.0, 0.0), tok(0.2, 1.0, 1.0), tok(0.9, 1.0, 2.0)];
        let areas: Vec<f64> = select_top_boxes(toks, 2).iter().map(|t| t.bbox.area()).collect();
        assert_eq!(areas, vec![0.9, 0.5]);
    }

    #[test]
    fn top_boxes_keeps_all_when_under_capacity() {
        let toks: Vec<_> = (0..5).map(|i| tok(0.1 * i as f64, 0.5, i as f64)).collect();
        assert_eq!(select_top_boxes(toks, 30).len(), 5);
    }

    #[test]
    fn top_boxes_ties_keep_annotation_order() {
        let toks: Vec<_> = (0..4).map(|i| tok(0.2, 0.2, i as f64)).collect();
        let tags: Vec<f64> = select_top_boxes(toks, 3).iter().map(|t| t.embedding[0]).collect();
        assert_eq!(tags, vec![0.0, 1.0, 2.0]);
    }

    fn layout_with_opacities(alphas: &[f64]) -> Layout {
        Layout {
            prompt_id: 0,
            prompt_text: "p".into(),
            tokens: alphas
                .iter()
                .enumerate()
                .map(|(i, &a)| ObjectToken::new(BoundingBox::ZERO, vec![i as f64], a))
                .collect(),
        }
    }

    #[test]
    fn discard_threshold() {
        let kept = discard_unused(&layout_with_opacities(&[0.9, 0.4, 0.51]), 0.5);
        let idx: Vec<f64> = kept.iter().map(|t| t.embedding[0]).collect();
        assert_eq!(idx, vec![0.0, 2.0]);
        assert!(discard_unused(&layout_with_opacities(&[0.0; 4]), 0.5).is_empty());
        assert_eq!(discard_unused(&layout_with_opacities(&[1.0; 4]), 0.5).len(), 4);
    }

    #[test]
    fn pad_then_discard_recovers_real_tokens() {
        let real = vec![tok(0.3, 0.2, 1.0), tok(0.1, 0.4, 2.0)];
        let layout =
            Layout { prompt_id: 0, prompt_text: "p".into(), tokens: pad_layout(real.clone(), 6, &[0.0]).unwrap() };
        assert_eq!(discard_unused(&layout, OPACITY_THRESHOLD), real);
    }

    #[test]
    fn stats_of_identical_tokens_hit_floor() {
        let l = Layout { prompt_id: 0, prompt_text: "p".into(), tokens: vec![tok(0.2, 0.3, 4.0); 3] };
        let s = compute_stats(&[l]).unwrap();
        for (m, want) in s.mean.iter().zip(tok(0.2, 0.3, 4.0).flatten()) {
            assert!((m - want).abs() < 1e-12);
        }
        assert!(s.std.iter().all(|&v| v == STD_FLOOR));
    }

    #[test]
    fn stats_population_convention() {
        let mk = |v: f64| ObjectToken::new(BoundingBox::new(v, 0.0, 0.0, 0.0), vec![], 1.0);
        let l = Layout { prompt_id: 0, prompt_text: "p".into(), tokens: vec![mk(0.0), mk(2.0)] };
        let s = compute_stats(&[l]).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.std[0], 1.0);
    }

    #[test]
    fn stats_reject_empty() {
        assert!(matches!(compute_stats(&[]), Err(Error::EmptyDataset)));
        let l = layout_with_opacities(&[1.0, 0.0]);
        assert!(matches!(compute_stats(&[l]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn standardize_examples() {
        let mut s = DatasetStats::identity(0, 1);
        s.mean = vec![1.0, 2.0, 3.0, 4.0, 0.5];
        s.std = vec![2.0; 5];
        let at_mean = Layout {
            prompt_id: 0,
            prompt_text: "p".into(),
            tokens: vec![ObjectToken::new(BoundingBox::new(1.0, 2.0, 3.0, 4.0), vec![], 0.5)],
        };
        assert!(standardize(&at_mean, &s).data.iter().all(|&v| v == 0.0));
        let shifted = Layout {
            prompt_id: 0,
            prompt_text: "p".into(),
            tokens: vec![ObjectToken::new(BoundingBox::new(3.0, 2.0, 3.0, 4.0), vec![], 0.5)],
        };
        assert_eq!(standardize(&shifted, &s).data[0], 1.0);
    }
}
