//! Backbone, linear head and the instrumented classifier.
//!
//! The backbone mean-pools a feature matrix over frames and applies two
//! rectified dense layers; its output is the pre-classifier embedding. The
//! head is a linear map from the embedding to one logit per active class and
//! grows as new classes arrive.

mod train;

use std::ops::AddAssign;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::stream::FeatureMatrix;

pub use train::{train_epochs, AdamConfig, BatchTransform, Example, Objective, OneHot, TrainOptions, TrainingLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    /// Upper bound on head rows.
    pub max_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, max_classes: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dim: 64,
            embedding_dim: 32,
            max_classes,
            seed,
        }
    }
}

/// Dense layer, weights row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn uniform(inputs: usize, outputs: usize, rng: &mut rng::Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<f64>>();
        let weights = draw(inputs * outputs);
        let bias = draw(outputs);
        Self {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 2] {
        [&mut self.weights, &mut self.bias]
    }
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub hidden: Dense,
    pub embed: Dense,
    /// One row per active class.
    pub head: Dense,
}

impl Network {
    pub fn input_dim(&self) -> usize {
        self.hidden.inputs
    }

    pub fn embedding_dim(&self) -> usize {
        self.embed.outputs
    }

    pub fn active_classes(&self) -> usize {
        self.head.outputs
    }

    pub fn embed(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.dim() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.dim(),
            });
        }
        let mut h = self.hidden.apply(&x.mean_pool());
        relu(&mut h);
        let mut e = self.embed.apply(&h);
        relu(&mut e);
        Ok(e)
    }

    pub fn head_logits(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.embedding_dim() {
            return Err(Error::Shape {
                expected: self.embedding_dim(),
                got: embedding.len(),
            });
        }
        Ok(self.head.apply(embedding))
    }

    pub fn evaluate(&self, x: &FeatureMatrix) -> Result<Forward> {
        let embedding = self.embed(x)?;
        let logits = self.head_logits(&embedding)?;
        Ok(Forward { embedding, logits })
    }

    fn zeros_like(&self) -> Network {
        Network {
            hidden: Dense::zeros(self.hidden.inputs, self.hidden.outputs),
            embed: Dense::zeros(self.embed.inputs, self.embed.outputs),
            head: Dense::zeros(self.head.inputs, self.head.outputs),
        }
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        let [a, b] = self.hidden.tensors_mut();
        let [c, d] = self.embed.tensors_mut();
        let [e, f] = self.head.tensors_mut();
        [a, b, c, d, e, f].into_iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub embedding: Vec<f64>,
    /// One logit per active class; inactive classes have no logit.
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounters {
    pub backbone_calls: u64,
    pub head_calls: u64,
}

impl AddAssign for CallCounters {
    fn add_assign(&mut self, rhs: Self) {
        self.backbone_calls += rhs.backbone_calls;
        self.head_calls += rhs.head_calls;
    }
}

impl std::ops::Sub for CallCounters {
    type Output = CallCounters;

    fn sub(self, rhs: Self) -> Self::Output {
        CallCounters {
            backbone_calls: self.backbone_calls - rhs.backbone_calls,
            head_calls: self.head_calls - rhs.head_calls,
        }
    }
}

/// Anything that can be queried for logits and embeddings while counting
/// backbone and head evaluations.
pub trait Evaluator {
    fn active_classes(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    fn forward(&mut self, features: &FeatureMatrix) -> Result<Forward>;
    fn head_only(&mut self, embedding: &[f64]) -> Result<Vec<f64>>;
    fn counters(&self) -> CallCounters;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    config: ModelConfig,
    network: Network,
    #[serde(skip)]
    counters: CallCounters,
}

impl Classifier {
    /// Freshly initialised backbone and an empty head.
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.input_dim == 0 || config.hidden_dim == 0 || config.embedding_dim == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        let mut rng = rng::rng_from(config.seed, &[tag::INIT_BACKBONE]);
        let network = Network {
            hidden: Dense::uniform(config.input_dim, config.hidden_dim, &mut rng),
            embed: Dense::uniform(config.hidden_dim, config.embedding_dim, &mut rng),
            head: Dense::zeros(config.embedding_dim, 0),
        };
        Ok(Self {
            config,
            network,
            counters: CallCounters::default(),
        })
    }

    /// Build from explicit parameters.
    pub fn from_network(network: Network, max_classes: usize, seed: u64) -> Result<Self> {
        let ok = network.embed.inputs == network.hidden.outputs
            && network.head.inputs == network.embed.outputs
            && network.hidden.weights.len() == network.hidden.inputs * network.hidden.outputs
            && network.embed.weights.len() == network.embed.inputs * network.embed.outputs
            && network.head.weights.len() == network.head.inputs * network.head.outputs
            && network.hidden.bias.len() == network.hidden.outputs
            && network.embed.bias.len() == network.embed.outputs
            && network.head.bias.len() == network.head.outputs;
        if !ok {
            return Err(Error::config("inconsistent network layer shapes"));
        }
        if network.active_classes() > max_classes {
            return Err(Error::config("more head rows than max_classes"));
        }
        let config = ModelConfig {
            input_dim: network.hidden.inputs,
            hidden_dim: network.hidden.outputs,
            embedding_dim: network.embed.outputs,
            max_classes,
            seed,
        };
        Ok(Self {
            config,
            network,
            counters: CallCounters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub(crate) fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    /// Grow the head to `new_active` rows, keeping learned rows untouched.
    ///
    /// Row `r` is always drawn from the same seeded stream, so the head is
    /// identical regardless of how expansion is staged.
    pub fn expand_head(&mut self, new_active: usize) -> Result<()> {
        let current = self.network.active_classes();
        if new_active < current {
            return Err(Error::contract(format!(
                "cannot shrink head from {current} to {new_active} classes"
            )));
        }
        if new_active > self.config.max_classes {
            return Err(Error::contract(format!(
                "head limited to {} classes, requested {new_active}",
                self.config.max_classes
            )));
        }
        let e = self.config.embedding_dim;
        let bound = 1.0 / (e as f64).sqrt();
        let head = &mut self.network.head;
        for row in current..new_active {
            let mut rng = rng::rng_from(self.config.seed, &[tag::INIT_HEAD, row as u64]);
            head.weights.extend((0..e).map(|_| rng.random_range(-bound..=bound)));
            head.bias.push(rng.random_range(-bound..=bound));
        }
        head.outputs = new_active;
        Ok(())
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            network: self.network.clone(),
        }
    }

    /// Argmax prediction over active classes (lowest index wins ties).
    pub fn predict(&mut self, features: &FeatureMatrix) -> Result<usize> {
        let out = self.forward(features)?;
        argmax(&out.logits).ok_or_else(|| Error::contract("classifier has no active classes"))
    }

    pub fn reset_counters(&mut self) {
        self.counters = CallCounters::default();
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let checkpoint = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            active_classes: self.network.active_classes(),
            classifier: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&checkpoint)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| Error::Load {
            path: path.to_path_buf(),
            source,
        })?;
        let checkpoint: Checkpoint = serde_json::from_slice(&bytes)?;
        if checkpoint.format != CHECKPOINT_FORMAT {
            return Err(Error::Integrity(format!(
                "unknown checkpoint format `{}`",
                checkpoint.format
            )));
        }
        let c = checkpoint.classifier;
        if c.network.active_classes() != checkpoint.active_classes {
            return Err(Error::Integrity("active_classes does not match head rows".into()));
        }
        let restored = Classifier::from_network(c.network, c.config.max_classes, c.config.seed)
            .map_err(|e| Error::Integrity(e.to_string()))?;
        if restored.config != c.config {
            return Err(Error::Integrity("model config does not match parameter shapes".into()));
        }
        Ok(restored)
    }
}

const CHECKPOINT_FORMAT: &str = "rainbow-cl/classifier/v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    active_classes: usize,
    classifier: Classifier,
}

impl Evaluator for Classifier {
    fn active_classes(&self) -> usize {
        self.network.active_classes()
    }

    fn embedding_dim(&self) -> usize {
        self.network.embedding_dim()
    }

    fn forward(&mut self, features: &FeatureMatrix) -> Result<Forward> {
        let out = self.network.evaluate(features)?;
        self.counters.backbone_calls += 1;
        self.counters.head_calls += 1;
        Ok(out)
    }

    fn head_only(&mut self, embedding: &[f64]) -> Result<Vec<f64>> {
        let logits = self.network.head_logits(embedding)?;
        self.counters.head_calls += 1;
        Ok(logits)
    }

    fn counters(&self) -> CallCounters {
        self.counters
    }
}

/// Frozen copy of a classifier's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    network: Network,
}

impl ModelSnapshot {
    pub fn active_classes(&self) -> usize {
        self.network.active_classes()
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Uncounted evaluation.
    pub fn evaluate(&self, features: &FeatureMatrix) -> Result<Forward> {
        self.network.evaluate(features)
    }

    /// A counting view over this snapshot; each worker gets its own.
    pub fn probe(&self) -> Probe<'_> {
        Probe {
            snapshot: self,
            counters: CallCounters::default(),
        }
    }
}

#[derive(Debug)]
pub struct Probe<'a> {
    snapshot: &'a ModelSnapshot,
    counters: CallCounters,
}

impl Evaluator for Probe<'_> {
    fn active_classes(&self) -> usize {
        self.snapshot.active_classes()
    }

    fn embedding_dim(&self) -> usize {
        self.snapshot.network.embedding_dim()
    }

    fn forward(&mut self, features: &FeatureMatrix) -> Result<Forward> {
        let out = self.snapshot.evaluate(features)?;
        self.counters.backbone_calls += 1;
        self.counters.head_calls += 1;
        Ok(out)
    }

    fn head_only(&mut self, embedding: &[f64]) -> Result<Vec<f64>> {
        let logits = self.snapshot.network.head_logits(embedding)?;
        self.counters.head_calls += 1;
        Ok(logits)
    }

    fn counters(&self) -> CallCounters {
        self.counters
    }
}

/// Softmax at temperature `temperature`, stabilised by max subtraction.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Numeric(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Numeric("softmax of an empty logit vector".into()));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {bad}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|o| ((o - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Probabilities over `0..num_classes`, with every class at or beyond
/// `logits.len()` pinned to exactly zero.
pub fn masked_probabilities(logits: &[f64], num_classes: usize) -> Result<Vec<f64>> {
    let mut p = softmax_t(logits, 1.0)?;
    p.resize(num_classes.max(p.len()), 0.0);
    Ok(p)
}

pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}
