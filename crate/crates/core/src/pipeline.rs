//! End-to-end helpers: scenes to a trained checkpoint, and a checkpoint to
//! generated scenes.

use rayon::prelude::*;

use crate::conditioning::{build_drift, ConditionRequest};
use crate::dataset::{layout_to_scene, scene_to_layout, Scene};
use crate::embedding::Vocabulary;
use crate::error::{Error, Result};
use crate::flow::sampler::{derive_seed, Prompt, Sampler};
use crate::flow::train::{StepLog, TrainConfig, Trainer, TrainingSample};
use crate::flow::{Checkpoint, VelocityNet, VelocityNetConfig};
use crate::layout::{compute_stats, DatasetStats, Layout};

/// Tokenized scenes, their statistics and flow-space training samples.
pub struct PreparedData {
    pub layouts: Vec<Layout>,
    pub stats: DatasetStats,
    pub samples: Vec<TrainingSample>,
}

pub fn prepare(scenes: &[Scene], vocab: &Vocabulary, j: usize) -> Result<PreparedData> {
    let layouts = scenes.iter().map(|s| scene_to_layout(s, vocab, j)).collect::<Result<Vec<_>>>()?;
    let stats = compute_stats(&layouts)?;
    let samples = scenes
        .iter()
        .zip(&layouts)
        .map(|(s, l)| Ok(TrainingSample::from_layout(l, &stats, vocab.prompt_vector(&s.prompt)?.to_vec())))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData { layouts, stats, samples })
}

/// Trains a fresh network on `scenes`. `net_config.d`, `j` and `prompt_dim`
/// must agree with the vocabulary.
pub fn train(
    scenes: &[Scene],
    vocab: Vocabulary,
    net_config: VelocityNetConfig,
    train_config: TrainConfig,
    log: &mut dyn FnMut(StepLog),
) -> Result<Checkpoint> {
    if net_config.d != vocab.d() || net_config.prompt_dim != vocab.full_dim() {
        return Err(Error::ShapeMismatch(format!(
            "network expects d={} and prompt dim {}, vocabulary has {} and {}",
            net_config.d,
            net_config.prompt_dim,
            vocab.d(),
            vocab.full_dim()
        )));
    }
    let data = prepare(scenes, &vocab, net_config.j)?;
    let mut net = VelocityNet::new(net_config)?;
    Trainer::new(train_config)?.fit(&mut net, &data.samples, log)?;
    Checkpoint::new(net, data.stats, vocab)
}

impl Checkpoint {
    pub fn prompt(&self, text: &str) -> Result<Prompt> {
        Ok(Prompt {
            id: self.vocab.prompt_id(text)?,
            text: text.to_string(),
            embedding: self.vocab.prompt_vector(text)?.to_vec(),
        })
    }

    pub fn sampler(&self, steps: usize) -> Sampler<'_, VelocityNet> {
        Sampler::new(&self.net, &self.stats, self.vocab.null_embedding(), steps)
    }

    /// `n` layouts for `prompt`; layout `i` uses seed `seed + i`.
    pub fn generate_layouts(&self, prompt: &str, n: usize, seed: u64, steps: usize) -> Result<Vec<(u64, Layout)>> {
        let p = self.prompt(prompt)?;
        let sampler = self.sampler(steps);
        (0..n)
            .into_par_iter()
            .map(|i| {
                let s = derive_seed(seed, i);
                Ok((s, sampler.sample(&p, s)?))
            })
            .collect()
    }

    /// As [`Checkpoint::generate_layouts`], exported as labeled scenes.
    pub fn generate(&self, prompt: &str, n: usize, seed: u64, steps: usize) -> Result<Vec<Scene>> {
        self.generate_layouts(prompt, n, seed, steps)?
            .iter()
            .map(|(s, l)| layout_to_scene(l, &self.vocab, Some(*s)))
            .collect()
    }

    /// Runs a conditioned-generation request. Missing fields fall back to
    /// the given defaults and seed 0.
    pub fn generate_conditioned_layout(
        &self,
        request: &ConditionRequest,
        default_steps: usize,
        default_lambda: f64,
    ) -> Result<(u64, Layout)> {
        let p = self.prompt(&request.prompt)?;
        let partial = request.partial(&self.vocab, &self.stats)?;
        let drift = build_drift(&request.drift_spec(default_lambda), self.stats.j, self.stats.d)?;
        let seed = request.seed.unwrap_or(0);
        let steps = request.steps.unwrap_or(default_steps);
        Ok((seed, self.sampler(steps).sample_conditioned(&p, &partial, &drift, seed)?))
    }

    pub fn generate_conditioned(
        &self,
        request: &ConditionRequest,
        default_steps: usize,
        default_lambda: f64,
    ) -> Result<Scene> {
        let (seed, layout) = self.generate_conditioned_layout(request, default_steps, default_lambda)?;
        layout_to_scene(&layout, &self.vocab, Some(seed))
    }
}
