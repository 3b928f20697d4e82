//! Perturbation views and Monte-Carlo uncertainty scores.
//!
//! `u(x) = 1 - mean_k P(y = label | view_k(x))`. The waveform-style scorer
//! builds each view in feature space and runs the full model per view; the
//! embedding-style scorer runs the backbone once and perturbs the
//! pre-classifier embedding, so only the head is re-evaluated.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax_t, Evaluator};
use crate::rng::{self, tag};
use crate::stream::{FeatureMatrix, Sample};

/// Feature-space analogues of the audio perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// Roll along the frame axis: output row `r` is input row `r - frames`.
    FeatureShift { frames: i64 },
    /// Roll along the feature axis (pitch-shift analogue).
    FeaturePitchShift { bins: i64 },
    /// Zero `width` consecutive frames at a random offset.
    FeatureTimeMask { width: usize },
    /// Zero `width` consecutive feature bins at a random offset.
    FeatureFreqMask { width: usize },
    /// Clamp magnitudes at the given quantile of `|x|`.
    FeatureClip { quantile: f64 },
    /// Additive noise, correlated across neighbouring feature bins, with
    /// every element bounded by `amplitude`.
    FeatureColoredNoise { amplitude: f64, correlation: f64 },
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Perturbation::FeatureClip { quantile } if !(quantile > 0.0 && quantile <= 1.0) => Err(Error::config(
                format!("clip quantile must be in (0, 1], got {quantile}"),
            )),
            Perturbation::FeatureColoredNoise { amplitude, correlation }
                if !(amplitude >= 0.0 && amplitude.is_finite() && (0.0..1.0).contains(&correlation)) =>
            {
                Err(Error::config(format!(
                    "colored noise needs amplitude >= 0 and correlation in [0, 1), got {amplitude}, {correlation}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// One perturbation kind with its own seed stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSuite {
    pub perturbation: Perturbation,
    pub seed: u64,
}

impl PerturbationSuite {
    pub fn new(perturbation: Perturbation, seed: u64) -> Self {
        Self { perturbation, seed }
    }
}

/// Six views, one per kind, at mild magnitudes.
pub fn default_suites(seed: u64) -> Vec<PerturbationSuite> {
    [
        Perturbation::FeatureTimeMask { width: 1 },
        Perturbation::FeatureFreqMask { width: 2 },
        Perturbation::FeatureClip { quantile: 0.9 },
        Perturbation::FeatureColoredNoise {
            amplitude: 0.5,
            correlation: 0.5,
        },
        Perturbation::FeatureShift { frames: 1 },
        Perturbation::FeaturePitchShift { bins: 1 },
    ]
    .into_iter()
    .enumerate()
    .map(|(i, p)| PerturbationSuite::new(p, rng::derive(seed, &[tag::PERTURB, i as u64])))
    .collect()
}

fn roll(len: usize, by: i64) -> impl Fn(usize) -> usize {
    let n = len as i64;
    move |r| (r as i64 - by).rem_euclid(n) as usize
}

/// The `k`-th perturbed view of `sample` under `suite`.
pub fn perturb_features(sample: &Sample, suite: &PerturbationSuite, k: usize) -> Result<FeatureMatrix> {
    suite.perturbation.validate()?;
    let x = &sample.features;
    let (frames, dim) = (x.frames(), x.dim());
    let mut rng = rng::rng_from(suite.seed, &[tag::PERTURB, rng::hash_str(&sample.id), k as u64]);
    let mut out = x.clone();
    match suite.perturbation {
        Perturbation::FeatureShift { frames: by } => {
            let src = roll(frames, by);
            for r in 0..frames {
                let row = x.row(src(r)).to_vec();
                out.as_mut_slice()[r * dim..(r + 1) * dim].copy_from_slice(&row);
            }
        }
        Perturbation::FeaturePitchShift { bins } => {
            let src = roll(dim, bins);
            for f in 0..frames {
                for d in 0..dim {
                    out.as_mut_slice()[f * dim + d] = x.get(f, src(d));
                }
            }
        }
        Perturbation::FeatureTimeMask { width } => {
            let width = width.min(frames);
            if width > 0 {
                let start = rng.random_range(0..=frames - width);
                out.as_mut_slice()[start * dim..(start + width) * dim].fill(0.0);
            }
        }
        Perturbation::FeatureFreqMask { width } => {
            let width = width.min(dim);
            if width > 0 {
                let start = rng.random_range(0..=dim - width);
                for f in 0..frames {
                    out.as_mut_slice()[f * dim + start..f * dim + start + width].fill(0.0);
                }
            }
        }
        Perturbation::FeatureClip { quantile } => {
            let mut mags: Vec<f64> = x.as_slice().iter().map(|v| v.abs()).collect();
            mags.sort_by(f64::total_cmp);
            let idx = ((quantile * mags.len() as f64).ceil() as usize).clamp(1, mags.len()) - 1;
            let limit = mags[idx];
            out.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(-limit, limit));
        }
        Perturbation::FeatureColoredNoise { amplitude, correlation } => {
            for f in 0..frames {
                let mut carry = 0.0;
                for d in 0..dim {
                    let white: f64 = rng.random_range(-1.0..=1.0);
                    // convex combination keeps |noise| <= 1
                    carry = if d == 0 {
                        white
                    } else {
                        correlation * carry + (1.0 - correlation) * white
                    };
                    out.as_mut_slice()[f * dim + d] += amplitude * carry;
                }
            }
        }
    }
    Ok(out)
}

/// Population standard deviation of the components of `v`.
///
/// Exactly zero for a constant vector, where the rounded mean would
/// otherwise leave a tiny residual.
pub fn population_std(v: &[f64]) -> f64 {
    if v.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `e + U(-lambda/2, lambda/2) * std(e)`, componentwise uniform noise.
pub fn perturb_embedding(embedding: &[f64], lambda_noise: f64, k: usize, seed: u64) -> Result<Vec<f64>> {
    if embedding.is_empty() {
        return Err(Error::contract("cannot perturb an empty embedding"));
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("embedding contains non-finite values".into()));
    }
    if !(lambda_noise >= 0.0 && lambda_noise.is_finite()) {
        return Err(Error::config(format!("lambda_noise must be >= 0, got {lambda_noise}")));
    }
    let scale = population_std(embedding);
    let half = lambda_noise / 2.0;
    if scale == 0.0 || half == 0.0 {
        return Ok(embedding.to_vec());
    }
    let mut rng = rng::rng_from(seed, &[tag::EMBED_NOISE, k as u64]);
    Ok(embedding
        .iter()
        .map(|e| e + rng.random_range(-half..half) * scale)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub sample_id: String,
    pub u: f64,
    pub k: usize,
}

fn label_probability(logits: &[f64], label: usize) -> Result<f64> {
    Ok(softmax_t(logits, 1.0)?[label])
}

fn check_label<E: Evaluator>(model: &E, sample: &Sample) -> Result<()> {
    if sample.label >= model.active_classes() {
        return Err(Error::contract(format!(
            "sample {} has label {} but the model has {} active classes",
            sample.id,
            sample.label,
            model.active_classes()
        )));
    }
    Ok(())
}

fn score(sample: &Sample, probabilities: &[f64]) -> UncertaintyScore {
    let mean = probabilities.iter().sum::<f64>() / probabilities.len() as f64;
    UncertaintyScore {
        sample_id: sample.id.clone(),
        u: (1.0 - mean).clamp(0.0, 1.0),
        k: probabilities.len(),
    }
}

/// Input-space Monte-Carlo score: `k` full forward passes, view `i` produced
/// by `suites[i % suites.len()]`.
pub fn uncertainty_waveform_style<E: Evaluator>(
    model: &mut E,
    sample: &Sample,
    suites: &[PerturbationSuite],
    k: usize,
) -> Result<UncertaintyScore> {
    if k == 0 || suites.is_empty() {
        return Err(Error::config(
            "waveform-style scoring needs K >= 1 and at least one suite",
        ));
    }
    check_label(model, sample)?;
    let probabilities = (0..k)
        .map(|i| {
            let view = perturb_features(sample, &suites[i % suites.len()], i)?;
            label_probability(&model.forward(&view)?.logits, sample.label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(score(sample, &probabilities))
}

/// Embedding-space score: one forward pass then `k` head evaluations on
/// perturbed embeddings.
pub fn uncertainty_embedding_style<E: Evaluator>(
    model: &mut E,
    sample: &Sample,
    lambda_noise: f64,
    k: usize,
    seed: u64,
) -> Result<UncertaintyScore> {
    if k == 0 {
        return Err(Error::config("embedding-style scoring needs K >= 1"));
    }
    check_label(model, sample)?;
    let embedding = model.forward(&sample.features)?.embedding;
    let sample_seed = rng::derive(seed, &[tag::EMBED_NOISE, rng::hash_str(&sample.id)]);
    let probabilities = (0..k)
        .map(|i| {
            let noisy = perturb_embedding(&embedding, lambda_noise, i, sample_seed)?;
            label_probability(&model.head_only(&noisy)?, sample.label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(score(sample, &probabilities))
}
