//! Procedural scene grammars with known count and box distributions, and a
//! synthetic low-rank embedding table to go with them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StatNormal};

use crate::dataset::{Scene, SceneObject};
use crate::embedding::{EmbeddingTable, NULL_LABEL};
use crate::error::{Error, Result};
use crate::layout::BoundingBox;

pub const MAX_ATTEMPTS: usize = 1000;

pub const ROOM: &str = include_str!("../grammars/room.json");
pub const STREET: &str = include_str!("../grammars/street.json");
pub const BEACH: &str = include_str!("../grammars/beach.json");

/// Number of objects of one label per scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountRule {
    /// Probability of each count `0, 1, 2, ...`.
    Histogram(Vec<f64>),
    Binomial {
        n: u64,
        p: f64,
    },
}

impl CountRule {
    pub fn histogram(&self) -> Vec<f64> {
        match self {
            CountRule::Histogram(h) => h.clone(),
            CountRule::Binomial { n, p } => {
                let dist = statrs::distribution::Binomial::new(*p, *n).expect("validated binomial");
                (0..=*n).map(|k| statrs::distribution::Discrete::pmf(&dist, k)).collect()
            }
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        match self {
            CountRule::Histogram(h) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, p) in h.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return k;
                    }
                }
                h.iter().rposition(|&p| p > 0.0).unwrap_or(0)
            }
            CountRule::Binomial { n, p } => Binomial::new(*n, *p).expect("validated binomial").sample(rng) as usize,
        }
    }
}

/// Independent per-coordinate Gaussians truncated to `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRule {
    pub mean: [f64; 4],
    pub std: [f64; 4],
    #[serde(default = "zeros")]
    pub lo: [f64; 4],
    #[serde(default = "ones")]
    pub hi: [f64; 4],
}

fn zeros() -> [f64; 4] {
    [0.0; 4]
}

fn ones() -> [f64; 4] {
    [1.0; 4]
}

impl BoxRule {
    pub fn point(b: [f64; 4]) -> Self {
        Self { mean: b, std: [0.0; 4], lo: zeros(), hi: ones() }
    }

    fn sample(&self, rng: &mut impl Rng) -> Result<[f64; 4]> {
        let mut out = [0.0; 4];
        for (c, v) in out.iter_mut().enumerate() {
            *v = truncated_normal(self.mean[c], self.std[c], self.lo[c], self.hi[c], rng)?;
        }
        Ok(out)
    }
}

fn truncated_normal(mean: f64, std: f64, lo: f64, hi: f64, rng: &mut impl Rng) -> Result<f64> {
    if std == 0.0 {
        return Ok(mean.clamp(lo, hi));
    }
    let n = Normal::new(mean, std).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..MAX_ATTEMPTS {
        let v = n.sample(rng);
        if (lo..=hi).contains(&v) {
            return Ok(v);
        }
    }
    Err(Error::RejectionOverflow(MAX_ATTEMPTS))
}

/// Mean and variance of `N(mean, std^2)` truncated to `[lo, hi]`.
pub fn truncated_moments(mean: f64, std: f64, lo: f64, hi: f64) -> (f64, f64) {
    if std == 0.0 {
        return (mean.clamp(lo, hi), 0.0);
    }
    let z = StatNormal::new(0.0, 1.0).expect("standard normal");
    let (a, b) = ((lo - mean) / std, (hi - mean) / std);
    let mass = z.cdf(b) - z.cdf(a);
    let (pa, pb) = (z.pdf(a), z.pdf(b));
    let shift = (pa - pb) / mass;
    let m = mean + std * shift;
    let v = std * std * (1.0 + (a * pa - b * pb) / mass - shift * shift);
    (m, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub label: String,
    pub count: CountRule,
    #[serde(rename = "box")]
    pub bbox: BoxRule,
    /// Places each box at `anchor box + offset` instead of drawing it from
    /// `box`, when a box of the anchor label exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Anchor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub label: String,
    pub offset: [f64; 4],
    #[serde(default = "zeros")]
    pub std: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    /// Every subject box ends above every object box.
    Above,
    /// Every subject box ends left of every object box.
    LeftOf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationKind,
    pub subject: String,
    pub object: String,
}

impl Relation {
    fn holds(&self, objects: &[SceneObject]) -> bool {
        let boxes = |l: &str| -> Vec<[f64; 4]> { objects.iter().filter(|o| o.label == l).map(|o| o.bbox).collect() };
        let objs = boxes(&self.object);
        boxes(&self.subject).iter().all(|s| {
            objs.iter().all(|o| match self.kind {
                RelationKind::Above => s[1] + s[3] <= o[1],
                RelationKind::LeftOf => s[0] + s[2] <= o[0],
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGrammar {
    pub category: String,
    pub labels: Vec<LabelRule>,
    #[serde(default)]
    pub relations: Vec<Relation>,
    #[serde(default)]
    pub seed: u64,
}

impl SceneGrammar {
    pub fn from_json(s: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// A bundled grammar: `room`, `street` or `beach`.
    pub fn bundled(name: &str) -> Result<Self> {
        match name {
            "room" => Self::from_json(ROOM),
            "street" => Self::from_json(STREET),
            "beach" => Self::from_json(BEACH),
            _ => Err(Error::Config(format!("no bundled grammar named {name:?}"))),
        }
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.label.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("grammar {:?}: {m}", self.category)));
        let names = self.label_names();
        for (i, rule) in self.labels.iter().enumerate() {
            if names[..i].contains(&rule.label) {
                return bad(format!("label {:?} listed twice", rule.label));
            }
            match &rule.count {
                CountRule::Histogram(h) => {
                    if h.is_empty()
                        || h.iter().any(|p| p.is_nan() || *p < 0.0)
                        || (h.iter().sum::<f64>() - 1.0).abs() > 1e-9
                    {
                        return bad(format!("count histogram of {:?} must be non-negative and sum to 1", rule.label));
                    }
                }
                CountRule::Binomial { p, .. } => {
                    if !(0.0..=1.0).contains(p) {
                        return bad(format!("binomial p of {:?} outside [0, 1]", rule.label));
                    }
                }
            }
            let b = &rule.bbox;
            for c in 0..4 {
                if !(0.0 <= b.lo[c] && b.lo[c] <= b.hi[c] && b.hi[c] <= 1.0) || b.std[c].is_nan() || b.std[c] < 0.0 {
                    return bad(format!("box rule of {:?} leaves the unit square", rule.label));
                }
                if b.std[c] == 0.0 && !(b.lo[c]..=b.hi[c]).contains(&b.mean[c]) {
                    return bad(format!("point mass of {:?} outside its bounds", rule.label));
                }
            }
            if let Some(a) = &rule.anchor {
                if !names[..i].contains(&a.label) {
                    return bad(format!("anchor {:?} of {:?} must be listed earlier", a.label, rule.label));
                }
            }
        }
        for r in &self.relations {
            if !names.contains(&r.subject) || !names.contains(&r.object) {
                return bad(format!("relation mentions unknown label {:?} or {:?}", r.subject, r.object));
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> Result<Vec<SceneObject>> {
        let mut objects: Vec<SceneObject> = Vec::new();
        for rule in &self.labels {
            let n = rule.count.sample(rng);
            for _ in 0..n {
                let anchor_box =
                    rule.anchor.as_ref().and_then(|a| objects.iter().find(|o| o.label == a.label).map(|o| (a, o.bbox)));
                let bbox = match anchor_box {
                    Some((a, base)) => {
                        let mut b = [0.0; 4];
                        for c in 0..4 {
                            b[c] = truncated_normal(
                                base[c] + a.offset[c],
                                a.std[c],
                                rule.bbox.lo[c],
                                rule.bbox.hi[c],
                                rng,
                            )?;
                        }
                        b
                    }
                    None => rule.bbox.sample(rng)?,
                };
                objects.push(SceneObject::new(rule.label.clone(), BoundingBox::from_array(bbox)));
            }
        }
        Ok(objects)
    }
}

/// Draws one scene, redrawing until every relation holds.
pub fn generate_scene(grammar: &SceneGrammar, rng: &mut impl Rng) -> Result<Scene> {
    for _ in 0..MAX_ATTEMPTS {
        let objects = grammar.draw(rng)?;
        if grammar.relations.iter().all(|r| r.holds(&objects)) {
            return Ok(Scene::new(grammar.category.clone(), objects));
        }
    }
    Err(Error::RejectionOverflow(MAX_ATTEMPTS))
}

/// Random stream of the `index`-th scene of a seeded dataset.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `n` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate_dataset(grammar: &SceneGrammar, n: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..n).into_par_iter().map(|i| generate_scene(grammar, &mut scene_rng(seed, i))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMoments {
    pub label: String,
    pub count_histogram: Vec<f64>,
    pub expected_count: f64,
    pub box_mean: [f64; 4],
    pub box_variance: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetMoments {
    pub subject: String,
    pub anchor: String,
    /// Mean of `subject box - anchor box`.
    pub difference_mean: [f64; 4],
    pub difference_variance: [f64; 4],
}

/// Closed-form distributions of a grammar, ignoring relation rejection and
/// truncation of anchored boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarReport {
    pub category: String,
    pub labels: Vec<LabelMoments>,
    pub offsets: Vec<OffsetMoments>,
}

pub fn analytic_report(grammar: &SceneGrammar) -> GrammarReport {
    let labels = grammar
        .labels
        .iter()
        .map(|r| {
            let hist = r.count.histogram();
            let expected_count = hist.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
            let mut box_mean = [0.0; 4];
            let mut box_variance = [0.0; 4];
            for c in 0..4 {
                let (m, v) = truncated_moments(r.bbox.mean[c], r.bbox.std[c], r.bbox.lo[c], r.bbox.hi[c]);
                box_mean[c] = m;
                box_variance[c] = v;
            }
            LabelMoments { label: r.label.clone(), count_histogram: hist, expected_count, box_mean, box_variance }
        })
        .collect();
    let offsets = grammar
        .labels
        .iter()
        .filter_map(|r| {
            let a = r.anchor.as_ref()?;
            Some(OffsetMoments {
                subject: r.label.clone(),
                anchor: a.label.clone(),
                difference_mean: a.offset,
                difference_variance: a.std.map(|s| s * s),
            })
        })
        .collect();
    GrammarReport { category: grammar.category.clone(), labels, offsets }
}

/// Embedding table whose vectors span an affine subspace of dimension
/// `rank` in `R^dim`. Contains the null label, every label and every prompt.
pub fn synthetic_table(
    labels: &[String],
    prompts: &[String],
    dim: usize,
    rank: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    if rank == 0 || rank > dim {
        return Err(Error::Config(format!("rank must be in 1..={dim}, got {rank}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let offset: Vec<f64> = (0..dim).map(|_| normal()).collect();
    let basis: Vec<f64> = (0..dim * rank).map(|_| normal()).collect();
    let mut names: Vec<String> = vec![NULL_LABEL.to_string()];
    for n in labels.iter().chain(prompts) {
        if !names.contains(n) {
            names.push(n.clone());
        }
    }
    let vectors = names
        .iter()
        .map(|_| {
            let z: Vec<f64> = (0..rank).map(|_| normal()).collect();
            (0..dim).map(|i| offset[i] + (0..rank).map(|k| basis[i * rank + k] * z[k]).sum::<f64>()).collect()
        })
        .collect();
    EmbeddingTable::new(names, vectors)
}
