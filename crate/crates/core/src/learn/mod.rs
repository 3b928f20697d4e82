//! Losses, mixup and the per-task incremental procedure.

mod pipeline;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::Beta;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax_t, BatchTransform, Example, ModelSnapshot, Objective};
use crate::rng::{self, tag, Rng};
use crate::stream::{FeatureMatrix, Sample};

pub use pipeline::{run_task, LearnerState, StrategyConfig, TaskReport, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// `sqrt(1 - N_prev / N_t)`.
    AutoSqrt,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kd_enabled: bool,
    pub temperature: f64,
    pub lambda_mode: LambdaMode,
    pub lambda_value: f64,
    /// Multiply the distillation term by `T^2`.
    pub kd_t_squared: bool,
    pub mixup_enabled: bool,
    pub mixup_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kd_enabled: false,
            temperature: 2.0,
            lambda_mode: LambdaMode::AutoSqrt,
            lambda_value: 1.0,
            kd_t_squared: false,
            mixup_enabled: false,
            mixup_alpha: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_value) {
            return Err(Error::config(format!(
                "lambda_value must be in [0, 1], got {}",
                self.lambda_value
            )));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::config(format!(
                "mixup_alpha must be positive, got {}",
                self.mixup_alpha
            )));
        }
        Ok(())
    }
}

/// Classification target: a class index or a probability vector.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Hard(usize),
    Soft(&'a [f64]),
}

fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    // same preconditions as the probability form
    softmax_t(logits, temperature)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|o| ((o - max) / temperature).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|o| (o - max) / temperature - lse).collect())
}

fn soft_target(logits: &[f64], target: Target<'_>) -> Result<Vec<f64>> {
    match target {
        Target::Hard(y) => {
            if y >= logits.len() {
                return Err(Error::contract(format!(
                    "label {y} outside {} active classes",
                    logits.len()
                )));
            }
            let mut t = vec![0.0; logits.len()];
            t[y] = 1.0;
            Ok(t)
        }
        Target::Soft(t) => {
            if t.len() != logits.len() {
                return Err(Error::contract(format!(
                    "soft label covers {} classes, logits {}",
                    t.len(),
                    logits.len()
                )));
            }
            let total: f64 = t.iter().sum();
            if t.iter().any(|v| v.is_nan() || *v < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::contract("soft label must be a probability vector"));
            }
            Ok(t.to_vec())
        }
    }
}

/// Cross-entropy of `softmax(logits)` against a hard or soft label, with its
/// gradient `softmax(logits) - y`.
pub fn ce_loss_grad(logits: &[f64], target: Target<'_>) -> Result<(f64, Vec<f64>)> {
    let y = soft_target(logits, target)?;
    let log_p = log_softmax(logits, 1.0)?;
    let loss = -y
        .iter()
        .zip(&log_p)
        .map(|(t, lp)| if *t > 0.0 { t * lp } else { 0.0 })
        .sum::<f64>();
    let grad = log_p.iter().zip(&y).map(|(lp, t)| lp.exp() - t).collect();
    Ok((loss, grad))
}

pub fn ce_loss(logits: &[f64], target: Target<'_>) -> Result<f64> {
    ce_loss_grad(logits, target).map(|(l, _)| l)
}

/// Distillation cross-entropy over the first `n_prev` classes:
/// `-sum_i softmax(teacher/T)_i * log softmax(student/T)_i`.
///
/// The gradient w.r.t. the student logits is `(s_i - q_i) / T` on the old
/// classes and zero elsewhere.
pub fn kd_loss_grad(student: &[f64], teacher: &[f64], n_prev: usize, temperature: f64) -> Result<(f64, Vec<f64>)> {
    if n_prev == 0 {
        return Err(Error::contract("distillation needs at least one previous class"));
    }
    if student.len() < n_prev || teacher.len() < n_prev {
        return Err(Error::contract(format!(
            "distillation over {n_prev} classes needs logits for all of them (student {}, teacher {})",
            student.len(),
            teacher.len()
        )));
    }
    let q = softmax_t(&teacher[..n_prev], temperature)?;
    let log_s = log_softmax(&student[..n_prev], temperature)?;
    let loss = -q.iter().zip(&log_s).map(|(qi, ls)| qi * ls).sum::<f64>();
    let mut grad = vec![0.0; student.len()];
    for i in 0..n_prev {
        grad[i] = (log_s[i].exp() - q[i]) / temperature;
    }
    Ok((loss, grad))
}

pub fn kd_loss(student: &[f64], teacher: &[f64], n_prev: usize, temperature: f64) -> Result<f64> {
    kd_loss_grad(student, teacher, n_prev, temperature).map(|(l, _)| l)
}

/// Weight on the cross-entropy term; `1 - lambda` goes to distillation.
pub fn ce_weight(n_prev: usize, n_t: usize, config: &LossConfig) -> Result<f64> {
    if n_prev > n_t || n_t == 0 {
        return Err(Error::contract(format!(
            "invalid class counts N_prev={n_prev}, N_t={n_t}"
        )));
    }
    if n_prev == 0 {
        return Ok(1.0);
    }
    Ok(match config.lambda_mode {
        LambdaMode::AutoSqrt => (1.0 - n_prev as f64 / n_t as f64).sqrt(),
        LambdaMode::Fixed => config.lambda_value,
    })
}

/// `lambda * CE + (1 - lambda) * KD`, collapsing to CE when there are no
/// previous classes or distillation is off.
pub fn combined_loss_grad(
    student: &[f64],
    teacher: Option<&[f64]>,
    target: Target<'_>,
    n_prev: usize,
    n_t: usize,
    config: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let (ce, ce_grad) = ce_loss_grad(student, target)?;
    if !config.kd_enabled || n_prev == 0 {
        return Ok((ce, ce_grad));
    }
    let teacher = teacher.ok_or_else(|| Error::contract("distillation enabled but no teacher logits"))?;
    let lambda = ce_weight(n_prev, n_t, config)?;
    let (mut kd, mut kd_grad) = kd_loss_grad(student, teacher, n_prev, config.temperature)?;
    if config.kd_t_squared {
        let t2 = config.temperature * config.temperature;
        kd *= t2;
        kd_grad.iter_mut().for_each(|g| *g *= t2);
    }
    let total = lambda * ce + (1.0 - lambda) * kd;
    let grad = ce_grad
        .iter()
        .zip(&kd_grad)
        .map(|(c, k)| lambda * c + (1.0 - lambda) * k)
        .collect();
    Ok((total, grad))
}

pub fn combined_loss(
    student: &[f64],
    teacher: Option<&[f64]>,
    target: Target<'_>,
    n_prev: usize,
    n_t: usize,
    config: &LossConfig,
) -> Result<f64> {
    combined_loss_grad(student, teacher, target, n_prev, n_t, config).map(|(l, _)| l)
}

/// Convex combination with a fixed coefficient `m`.
pub fn mix_with(a: &Sample, b: &Sample, m: f64, num_classes: usize) -> Result<(FeatureMatrix, Vec<f64>)> {
    if !a.features.same_shape(&b.features) {
        return Err(Error::contract(format!(
            "cannot mix {}x{} with {}x{}",
            a.features.frames(),
            a.features.dim(),
            b.features.frames(),
            b.features.dim()
        )));
    }
    if a.label >= num_classes || b.label >= num_classes {
        return Err(Error::contract("mixup label outside the active classes"));
    }
    let data = a
        .features
        .as_slice()
        .iter()
        .zip(b.features.as_slice())
        .map(|(x, y)| m * x + (1.0 - m) * y)
        .collect();
    let features = FeatureMatrix::new(a.features.frames(), a.features.dim(), data)?;
    let mut label = vec![0.0; num_classes];
    label[a.label] += m;
    label[b.label] += 1.0 - m;
    Ok((features, label))
}

fn draw_coefficient(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::config(format!("mixup alpha {alpha}: {e}")))?;
    Ok(rng.sample(beta))
}

/// Mix two samples with `m ~ Beta(alpha, alpha)`.
pub fn mixup(a: &Sample, b: &Sample, num_classes: usize, alpha: f64, seed: u64) -> Result<(FeatureMatrix, Vec<f64>)> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::config(format!("mixup alpha must be positive, got {alpha}")));
    }
    let mut rng = rng::rng_from(seed, &[tag::MIXUP]);
    let m = draw_coefficient(alpha, &mut rng)?;
    mix_with(a, b, m, num_classes)
}

/// In-batch mixup: sample `i` is mixed with `perm(i)` for a random
/// permutation of the batch.
#[derive(Debug, Clone, Copy)]
pub struct Mixup {
    pub alpha: f64,
}

impl BatchTransform for Mixup {
    fn apply(&self, batch: &[&Sample], num_classes: usize, rng: &mut Rng) -> Result<Vec<Example>> {
        let mut partners: Vec<usize> = (0..batch.len()).collect();
        partners.shuffle(rng);
        batch
            .iter()
            .zip(partners)
            .map(|(a, j)| {
                let m = draw_coefficient(self.alpha, rng)?;
                let (features, target) = mix_with(a, batch[j], m, num_classes)?;
                Ok(Example { features, target })
            })
            .collect()
    }
}

/// Combined loss against a frozen teacher.
pub struct DistillationObjective<'a> {
    pub teacher: Option<&'a ModelSnapshot>,
    pub n_prev: usize,
    pub n_t: usize,
    pub config: &'a LossConfig,
}

impl Objective for DistillationObjective<'_> {
    fn loss_and_grad(&self, example: &Example, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
        let teacher_logits = match self.teacher {
            Some(t) if self.config.kd_enabled && self.n_prev > 0 => Some(t.evaluate(&example.features)?.logits),
            _ => None,
        };
        combined_loss_grad(
            logits,
            teacher_logits.as_deref(),
            Target::Soft(&example.target),
            self.n_prev,
            self.n_t,
            self.config,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample(id: &str, data: Vec<f64>, label: usize) -> Sample {
        Sample::new(id, FeatureMatrix::new(1, data.len(), data).unwrap(), label)
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        for n in 1..8 {
            let l = ce_loss(&vec![0.7; n], Target::Hard(n - 1)).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_soft_label_matches_hard_label() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let hard = ce_loss_grad(&logits, Target::Hard(2)).unwrap();
        let soft = ce_loss_grad(&logits, Target::Soft(&[0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(hard, soft);
    }

    #[test]
    fn invalid_labels_rejected() {
        assert!(matches!(ce_loss(&[0.0, 1.0], Target::Hard(2)), Err(Error::Contract(_))));
        assert!(matches!(
            ce_loss(&[0.0, 1.0], Target::Soft(&[0.7, 0.7])),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            ce_loss(&[0.0, 1.0], Target::Soft(&[1.0])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn self_distillation_fixed_point() {
        let (l, g) = kd_loss_grad(&[0.0, 0.0], &[0.0, 0.0], 2, 2.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn confident_teacher_limit() {
        let student = [0.4, -0.3, 1.1];
        let teacher = [60.0, 0.0, -5.0];
        let t = 2.0;
        let l = kd_loss(&student, &teacher, 2, t).unwrap();
        let log_s = log_softmax(&student[..2], t).unwrap();
        assert!((l + log_s[0]).abs() < 1e-9);
    }

    #[test]
    fn kd_requires_previous_classes() {
        assert!(matches!(kd_loss(&[0.0], &[0.0], 0, 2.0), Err(Error::Contract(_))));
        assert!(matches!(kd_loss(&[0.0], &[0.0, 1.0], 2, 2.0), Err(Error::Contract(_))));
    }

    #[test]
    fn kd_gradient_only_touches_old_classes() {
        let (_, g) = kd_loss_grad(&[0.1, 0.5, 3.0, -2.0], &[1.0, -1.0, 0.0, 0.0], 2, 2.0).unwrap();
        assert_eq!(&g[2..], &[0.0, 0.0]);
        assert!(g[0] != 0.0);
    }

    #[test]
    fn lambda_schedule() {
        let c = LossConfig::default();
        assert_eq!(ce_weight(0, 5, &c).unwrap(), 1.0);
        assert!((ce_weight(15, 18, &c).unwrap() - (1.0f64 / 6.0).sqrt()).abs() < 1e-12);
        let fixed = LossConfig {
            lambda_mode: LambdaMode::Fixed,
            lambda_value: 0.25,
            ..c
        };
        assert_eq!(ce_weight(3, 5, &fixed).unwrap(), 0.25);
        assert!(ce_weight(6, 5, &c).is_err());
    }

    #[test]
    fn lambda_grows_with_new_classes() {
        let c = LossConfig::default();
        for n_prev in 1..10 {
            let mut last = 0.0;
            for n_t in n_prev + 1..30 {
                let l = ce_weight(n_prev, n_t, &c).unwrap();
                assert!(l > last && l <= 1.0);
                last = l;
            }
        }
    }

    #[test]
    fn combined_collapses_to_ce() {
        let cfg = LossConfig {
            kd_enabled: true,
            ..LossConfig::default()
        };
        let logits = [0.2, 1.4, -0.7];
        let ce = ce_loss(&logits, Target::Hard(1)).unwrap();
        assert_eq!(combined_loss(&logits, None, Target::Hard(1), 0, 3, &cfg).unwrap(), ce);
        let off = LossConfig::default();
        assert_eq!(
            combined_loss(&logits, Some(&[5.0, 0.0, 0.0]), Target::Hard(1), 2, 3, &off).unwrap(),
            ce
        );
        assert!(matches!(
            combined_loss(&logits, None, Target::Hard(1), 2, 3, &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn combined_weights_terms() {
        let cfg = LossConfig {
            kd_enabled: true,
            ..LossConfig::default()
        };
        let s = [0.2, 1.4, -0.7, 0.3];
        let t = [1.0, -0.5, 0.0, 0.0];
        let lambda = (1.0f64 - 2.0 / 4.0).sqrt();
        let expected =
            lambda * ce_loss(&s, Target::Hard(3)).unwrap() + (1.0 - lambda) * kd_loss(&s, &t, 2, 2.0).unwrap();
        let got = combined_loss(&s, Some(&t), Target::Hard(3), 2, 4, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let a = sample("a", vec![0.0, 0.0], 0);
        let b = sample("b", vec![2.0, 2.0], 1);
        let (f, y) = mix_with(&a, &b, 1.0, 2).unwrap();
        assert_eq!(f, a.features);
        assert_eq!(y, vec![1.0, 0.0]);
        let (f, y) = mix_with(&a, &b, 0.5, 2).unwrap();
        assert_eq!(f.as_slice(), &[1.0, 1.0]);
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn mixup_shape_mismatch() {
        let a = sample("a", vec![0.0, 0.0], 0);
        let b = sample("b", vec![2.0, 2.0, 1.0], 1);
        assert!(matches!(mixup(&a, &b, 2, 1.0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn mixup_labels_are_distributions() {
        let a = sample("a", vec![0.0, 1.0], 0);
        let b = sample("b", vec![2.0, 2.0], 2);
        for seed in 0..1000 {
            let (_, y) = mixup(&a, &b, 3, 1.0, seed).unwrap();
            assert!(y.iter().all(|v| *v >= 0.0));
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(mixup(&a, &b, 3, 0.4, 9).unwrap(), mixup(&a, &b, 3, 0.4, 9).unwrap());
    }

    #[test]
    fn batch_mixup_preserves_count_and_mass() {
        let batch: Vec<Sample> = (0..5)
            .map(|i| sample(&format!("s{i}"), vec![i as f64, 1.0], i % 3))
            .collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let mut rng = Rng::seed_from_u64(4);
        let out = Mixup { alpha: 1.0 }.apply(&refs, 3, &mut rng).unwrap();
        assert_eq!(out.len(), 5);
        for e in out {
            assert!((e.target.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
