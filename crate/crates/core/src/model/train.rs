use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Classifier, Dense, Network};
use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};
use crate::stream::{FeatureMatrix, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// One training input with a probability-vector target over active classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureMatrix,
    pub target: Vec<f64>,
}

/// Turns a mini-batch of samples into training examples.
pub trait BatchTransform {
    fn apply(&self, batch: &[&Sample], num_classes: usize, rng: &mut Rng) -> Result<Vec<Example>>;
}

/// Hard labels as one-hot targets.
#[derive(Debug, Clone, Copy, Default)]
pub struct OneHot;

impl BatchTransform for OneHot {
    fn apply(&self, batch: &[&Sample], num_classes: usize, _rng: &mut Rng) -> Result<Vec<Example>> {
        Ok(batch
            .iter()
            .map(|s| {
                let mut target = vec![0.0; num_classes];
                target[s.label] = 1.0;
                Example {
                    features: s.features.clone(),
                    target,
                }
            })
            .collect())
    }
}

/// A per-example loss, returning the value and its gradient w.r.t. logits.
pub trait Objective {
    fn loss_and_grad(&self, example: &Example, logits: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean per-example loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

struct Cache {
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    embed_pre: Vec<f64>,
    embedding: Vec<f64>,
}

fn forward_cached(net: &Network, x: &FeatureMatrix) -> (Cache, Vec<f64>) {
    let pooled = x.mean_pool();
    let hidden_pre = net.hidden.apply(&pooled);
    let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
    let embed_pre = net.embed.apply(&hidden);
    let embedding: Vec<f64> = embed_pre.iter().map(|v| v.max(0.0)).collect();
    let logits = net.head.apply(&embedding);
    (
        Cache {
            pooled,
            hidden_pre,
            hidden,
            embed_pre,
            embedding,
        },
        logits,
    )
}

/// Accumulates `d out / d input` into the layer gradient, returns `d input`.
fn backprop_dense(layer: &Dense, grad: &mut Dense, input: &[f64], d_out: &[f64]) -> Vec<f64> {
    let mut d_in = vec![0.0; layer.inputs];
    for (o, &g) in d_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad.bias[o] += g;
        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
        let grow = &mut grad.weights[o * layer.inputs..(o + 1) * layer.inputs];
        for i in 0..layer.inputs {
            grow[i] += g * input[i];
            d_in[i] += g * row[i];
        }
    }
    d_in
}

fn backward(net: &Network, grads: &mut Network, cache: &Cache, d_logits: &[f64]) {
    let mut d_embed = backprop_dense(&net.head, &mut grads.head, &cache.embedding, d_logits);
    for (d, z) in d_embed.iter_mut().zip(&cache.embed_pre) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    let mut d_hidden = backprop_dense(&net.embed, &mut grads.embed, &cache.hidden, &d_embed);
    for (d, z) in d_hidden.iter_mut().zip(&cache.hidden_pre) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    backprop_dense(&net.hidden, &mut grads.hidden, &cache.pooled, &d_hidden);
}

struct Adam {
    config: AdamConfig,
    m: Network,
    v: Network,
    t: i32,
}

impl Adam {
    fn new(config: AdamConfig, like: &Network) -> Self {
        Self {
            config,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Network, grads: &mut Network) {
        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .zip(grads.tensors_mut())
            .zip(self.m.tensors_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                g[i] = 0.0;
            }
        }
    }
}

/// Mini-batch Adam training over `samples`.
///
/// A fresh optimizer state is created per call. Shuffling and the batch
/// transform's randomness are seeded from `options.seed`.
pub fn train_epochs(
    classifier: &mut Classifier,
    samples: &[Sample],
    objective: &dyn Objective,
    transform: &dyn BatchTransform,
    options: &TrainOptions,
) -> Result<TrainingLog> {
    let mut log = TrainingLog::default();
    if options.epochs == 0 {
        return Ok(log);
    }
    if samples.is_empty() {
        return Err(Error::contract("train_epochs needs at least one sample"));
    }
    if options.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let active = classifier.network().active_classes();
    if let Some(bad) = samples.iter().find(|s| s.label >= active) {
        return Err(Error::contract(format!(
            "sample {} has label {} but only {active} classes are active",
            bad.id, bad.label
        )));
    }
    if let Some(bad) = samples.iter().find(|s| s.features.dim() != classifier.input_dim()) {
        return Err(Error::Shape {
            expected: classifier.input_dim(),
            got: bad.features.dim(),
        });
    }

    let mut adam = Adam::new(options.optimizer, classifier.network());
    let mut grads = classifier.network().zeros_like();
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..options.epochs {
        order.shuffle(&mut rng::rng_from(options.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(options.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut rng = rng::rng_from(options.seed, &[tag::MIXUP, epoch as u64, b as u64]);
            let examples = transform.apply(&batch, active, &mut rng)?;
            if examples.is_empty() {
                continue;
            }
            let scale = 1.0 / examples.len() as f64;
            for example in &examples {
                let (cache, logits) = forward_cached(classifier.network(), &example.features);
                let (loss, mut d_logits) = objective.loss_and_grad(example, &logits)?;
                if !loss.is_finite() || d_logits.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "non-finite loss {loss} at epoch {epoch}, batch {b}"
                    )));
                }
                epoch_loss += loss;
                seen += 1;
                d_logits.iter_mut().for_each(|g| *g *= scale);
                backward(classifier.network(), &mut grads, &cache, &d_logits);
            }
            adam.step(classifier.network_mut(), &mut grads);
            log.steps += 1;
        }
        log.epoch_losses.push(epoch_loss / seen.max(1) as f64);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{softmax_t, Evaluator, ModelConfig};
    use crate::stream::{make_synthetic, SyntheticSpec};

    /// Soft-label cross-entropy, written out locally for these tests.
    struct Xent;

    impl Objective for Xent {
        fn loss_and_grad(&self, example: &Example, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
            let p = softmax_t(logits, 1.0)?;
            let loss = -example
                .target
                .iter()
                .zip(&p)
                .map(|(y, q)| if *y > 0.0 { y * q.ln() } else { 0.0 })
                .sum::<f64>();
            Ok((loss, p.iter().zip(&example.target).map(|(q, y)| q - y).collect()))
        }
    }

    fn loss_of(net: &Network, example: &Example) -> f64 {
        let (_, logits) = forward_cached(net, &example.features);
        Xent.loss_and_grad(example, &logits).unwrap().0
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut c = Classifier::new(ModelConfig {
            input_dim: 3,
            hidden_dim: 5,
            embedding_dim: 4,
            max_classes: 3,
            seed: 17,
        })
        .unwrap();
        c.expand_head(3).unwrap();
        let example = Example {
            features: FeatureMatrix::new(2, 3, vec![0.3, -1.2, 0.8, 1.1, 0.4, -0.6]).unwrap(),
            target: vec![0.2, 0.0, 0.8],
        };
        let net = c.network().clone();
        let mut grads = net.zeros_like();
        let (cache, logits) = forward_cached(&net, &example.features);
        let (_, d_logits) = Xent.loss_and_grad(&example, &logits).unwrap();
        backward(&net, &mut grads, &cache, &d_logits);

        let mut perturbed = net.clone();
        let analytic: Vec<f64> = grads.clone().tensors_mut().flat_map(|t| t.clone()).collect();
        let mut idx = 0;
        let h = 1e-6;
        let n_tensors = 6;
        for ti in 0..n_tensors {
            let len = perturbed.tensors_mut().nth(ti).unwrap().len();
            for i in 0..len {
                let orig = perturbed.tensors_mut().nth(ti).unwrap()[i];
                perturbed.tensors_mut().nth(ti).unwrap()[i] = orig + h;
                let up = loss_of(&perturbed, &example);
                perturbed.tensors_mut().nth(ti).unwrap()[i] = orig - h;
                let down = loss_of(&perturbed, &example);
                perturbed.tensors_mut().nth(ti).unwrap()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[idx];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "tensor {ti} index {i}: analytic {a} numeric {numeric}"
                );
                idx += 1;
            }
        }
    }

    #[test]
    fn learns_separable_blobs() {
        let spec = SyntheticSpec {
            num_classes: 2,
            per_class: 50,
            feature_dim: 4,
            frames: 2,
            separation: 3.0,
        };
        let ds = make_synthetic(&spec, 4).unwrap();
        let mut c = Classifier::new(ModelConfig::new(4, 2, 4)).unwrap();
        c.expand_head(2).unwrap();
        let log = train_epochs(&mut c, &ds.samples, &Xent, &OneHot, &TrainOptions::default()).unwrap();
        assert_eq!(log.epoch_losses.len(), 50);
        assert!(log.epoch_losses.last().unwrap() < &log.epoch_losses[0]);
        let hits = ds
            .samples
            .iter()
            .filter(|s| c.predict(&s.features).unwrap() == s.label)
            .count();
        assert!(hits as f64 / ds.len() as f64 >= 0.95, "train accuracy {hits}/100");
        // training does not go through the counted inference path
        assert_eq!(c.counters().backbone_calls, ds.len() as u64);
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let ds = make_synthetic(
            &SyntheticSpec {
                num_classes: 2,
                per_class: 3,
                feature_dim: 2,
                frames: 1,
                separation: 1.0,
            },
            0,
        )
        .unwrap();
        let mut c = Classifier::new(ModelConfig::new(2, 2, 0)).unwrap();
        c.expand_head(2).unwrap();
        let before = c.snapshot();
        let opts = TrainOptions {
            epochs: 0,
            ..TrainOptions::default()
        };
        let log = train_epochs(&mut c, &ds.samples, &Xent, &OneHot, &opts).unwrap();
        assert!(log.epoch_losses.is_empty());
        assert_eq!(before, c.snapshot());
    }

    #[test]
    fn defaults_match_reference_setup() {
        let o = TrainOptions::default();
        assert_eq!(o.batch_size, 32);
        assert_eq!(o.epochs, 50);
        assert_eq!(o.optimizer.learning_rate, 1e-3);
        assert_eq!(
            (o.optimizer.beta1, o.optimizer.beta2, o.optimizer.epsilon),
            (0.9, 0.999, 1e-8)
        );
    }

    #[test]
    fn label_out_of_range_is_contract_error() {
        let ds = make_synthetic(
            &SyntheticSpec {
                num_classes: 3,
                per_class: 2,
                feature_dim: 2,
                frames: 1,
                separation: 1.0,
            },
            0,
        )
        .unwrap();
        let mut c = Classifier::new(ModelConfig::new(2, 3, 0)).unwrap();
        c.expand_head(2).unwrap();
        let err = train_epochs(&mut c, &ds.samples, &Xent, &OneHot, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        struct Broken;
        impl Objective for Broken {
            fn loss_and_grad(&self, _: &Example, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
                Ok((f64::NAN, vec![0.0; logits.len()]))
            }
        }
        let ds = make_synthetic(
            &SyntheticSpec {
                num_classes: 1,
                per_class: 2,
                feature_dim: 2,
                frames: 1,
                separation: 1.0,
            },
            0,
        )
        .unwrap();
        let mut c = Classifier::new(ModelConfig::new(2, 1, 0)).unwrap();
        c.expand_head(1).unwrap();
        let err = train_epochs(&mut c, &ds.samples, &Broken, &OneHot, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
    }

    #[test]
    fn snapshot_unaffected_by_training() {
        let ds = make_synthetic(
            &SyntheticSpec {
                num_classes: 2,
                per_class: 8,
                feature_dim: 3,
                frames: 1,
                separation: 2.0,
            },
            1,
        )
        .unwrap();
        let mut c = Classifier::new(ModelConfig::new(3, 2, 1)).unwrap();
        c.expand_head(2).unwrap();
        let snap = c.snapshot();
        let before = snap.evaluate(&ds.samples[0].features).unwrap();
        let opts = TrainOptions {
            epochs: 3,
            ..TrainOptions::default()
        };
        train_epochs(&mut c, &ds.samples, &Xent, &OneHot, &opts).unwrap();
        assert_ne!(snap, c.snapshot());
        assert_eq!(snap.evaluate(&ds.samples[0].features).unwrap(), before);
    }
}
