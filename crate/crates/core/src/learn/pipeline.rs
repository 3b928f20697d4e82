use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ce_weight, DistillationObjective, LossConfig, Mixup};
use crate::error::{Error, Result};
use crate::memory::{self, MuaKind, ReplayBuffer};
use crate::metrics::{per_class_accuracy, AccuracyMatrix};
use crate::model::{
    train_epochs, AdamConfig, BatchTransform, CallCounters, Classifier, Evaluator, ModelConfig, ModelSnapshot, OneHot,
    TrainOptions,
};
use crate::rng::{self, tag};
use crate::stream::{Sample, TaskBatch};
use crate::uncertainty::{
    self, default_suites, uncertainty_embedding_style, uncertainty_waveform_style, Perturbation, PerturbationSuite,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: MuaKind,
    /// Perturbed views per sample for the uncertainty strategies.
    pub k_perturb: usize,
    pub lambda_noise: f64,
    /// Feature-space views cycled by the input-perturbation scorer.
    pub perturbations: Vec<Perturbation>,
}

impl StrategyConfig {
    pub fn new(kind: MuaKind) -> Self {
        Self {
            kind,
            k_perturb: 6,
            lambda_noise: 1.0,
            perturbations: default_suites(0).into_iter().map(|s| s.perturbation).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.kind, MuaKind::Uncertainty | MuaKind::UncertaintyPlusPlus) && self.k_perturb == 0 {
            return Err(Error::config("k_perturb must be at least 1"));
        }
        if !(self.lambda_noise >= 0.0 && self.lambda_noise.is_finite()) {
            return Err(Error::config(format!(
                "lambda_noise must be >= 0, got {}",
                self.lambda_noise
            )));
        }
        if self.kind == MuaKind::Uncertainty && self.perturbations.is_empty() {
            return Err(Error::config(
                "the uncertainty strategy needs at least one perturbation",
            ));
        }
        self.perturbations.iter().try_for_each(Perturbation::validate)
    }
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self::new(MuaKind::Uncertainty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = TrainOptions::default();
        Self {
            epochs: o.epochs,
            batch_size: o.batch_size,
            optimizer: o.optimizer,
        }
    }
}

/// Everything carried from one task to the next.
#[derive(Debug, Clone)]
pub struct LearnerState {
    pub classifier: Classifier,
    pub buffer: ReplayBuffer,
    /// Post-training snapshot of the previous step.
    pub teacher: Option<ModelSnapshot>,
    /// Dataset class -> head row, in order of arrival.
    slots: BTreeMap<usize, usize>,
    /// Head rows of each recorded task.
    task_slots: Vec<Vec<usize>>,
    pub matrix: AccuracyMatrix,
    seed: u64,
}

impl LearnerState {
    pub fn new(model: ModelConfig, buffer_capacity: usize, kind: MuaKind, num_tasks: usize, seed: u64) -> Result<Self> {
        let capacity = if kind == MuaKind::Finetune { 0 } else { buffer_capacity };
        Ok(Self {
            classifier: Classifier::new(model)?,
            buffer: ReplayBuffer::new(capacity, kind),
            teacher: None,
            slots: BTreeMap::new(),
            task_slots: Vec::new(),
            matrix: AccuracyMatrix::new(num_tasks),
            seed,
        })
    }

    /// Dataset class id for each head row.
    pub fn class_order(&self) -> Vec<usize> {
        let mut order = vec![0; self.slots.len()];
        for (&class, &slot) in &self.slots {
            order[slot] = class;
        }
        order
    }

    pub fn task_slots(&self) -> &[Vec<usize>] {
        &self.task_slots
    }

    fn slot_of(&self, class: usize) -> Result<usize> {
        self.slots
            .get(&class)
            .copied()
            .ok_or_else(|| Error::contract(format!("class {class} has not been introduced")))
    }

    fn relabel(&self, samples: &[Sample]) -> Result<Vec<Sample>> {
        samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    label: self.slot_of(s.label)?,
                    ..s.clone()
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub n_train: usize,
    pub n_buffer: usize,
    /// Keyed by head row; see `class_order` for the dataset class.
    pub per_class_accuracy: BTreeMap<usize, f64>,
    pub row_accuracies: Vec<f64>,
    pub wall_time_s: f64,
    pub mua_time_s: f64,
    pub backbone_calls: u64,
    pub head_calls: u64,
    pub ce_weight: f64,
    pub final_train_loss: Option<f64>,
}

fn score_candidates<E: Evaluator>(
    model: &mut E,
    pool: &[Sample],
    strategy: &StrategyConfig,
    seed: u64,
) -> Result<HashMap<String, uncertainty::UncertaintyScore>> {
    let suites: Vec<PerturbationSuite> = strategy
        .perturbations
        .iter()
        .enumerate()
        .map(|(i, p)| PerturbationSuite::new(*p, rng::derive(seed, &[tag::PERTURB, i as u64])))
        .collect();
    pool.iter()
        .map(|s| {
            let score = match strategy.kind {
                MuaKind::Uncertainty => uncertainty_waveform_style(model, s, &suites, strategy.k_perturb)?,
                _ => uncertainty_embedding_style(model, s, strategy.lambda_noise, strategy.k_perturb, seed)?,
            };
            Ok((s.id.clone(), score))
        })
        .collect()
}

fn update_buffer(state: &mut LearnerState, incoming: &[Sample], strategy: &StrategyConfig, seed: u64) -> Result<()> {
    let buffer = &state.buffer;
    let next = match strategy.kind {
        MuaKind::Finetune => ReplayBuffer::new(0, MuaKind::Finetune),
        MuaKind::Random => memory::update_random(buffer, incoming, seed),
        MuaKind::Reservoir => memory::update_reservoir(buffer, incoming, seed),
        MuaKind::Prototype => memory::update_prototype(buffer, incoming, &mut state.classifier)?,
        MuaKind::Uncertainty | MuaKind::UncertaintyPlusPlus => {
            let pool = memory::candidates(buffer, incoming);
            let scores = score_candidates(&mut state.classifier, &pool, strategy, seed)?;
            memory::update_diversity(buffer, incoming, &scores)?
        }
    };
    next.validate()?;
    state.buffer = next;
    Ok(())
}

/// One step of the incremental stream.
///
/// Grows the head for the new classes, trains on buffer plus incoming data
/// (distilling from the previous snapshot when enabled), updates the buffer
/// with the trained model, stores the trained model as the next teacher and
/// evaluates on every class seen so far.
pub fn run_task(
    state: &mut LearnerState,
    batch: &TaskBatch,
    strategy: &StrategyConfig,
    loss: &LossConfig,
    train: &TrainConfig,
) -> Result<TaskReport> {
    strategy.validate()?;
    loss.validate()?;
    if strategy.kind != state.buffer.kind() {
        return Err(Error::contract(format!(
            "state was built for {}, strategy is {}",
            state.buffer.kind(),
            strategy.kind
        )));
    }
    let started = Instant::now();
    let counters_before = state.classifier.counters();
    let task_seed = rng::derive(state.seed, &[tag::TASK, batch.task_index as u64]);

    for &class in &batch.classes {
        if state.slots.contains_key(&class) {
            return Err(Error::contract(format!("class {class} introduced twice")));
        }
        let slot = state.slots.len();
        state.slots.insert(class, slot);
    }
    let n_prev = state.teacher.as_ref().map_or(0, ModelSnapshot::active_classes);
    let n_t = state.slots.len();
    state.classifier.expand_head(n_t)?;

    let incoming = state.relabel(&batch.train)?;
    let test = state.relabel(&batch.test_cumulative)?;
    let training_set = memory::build_training_set(&state.buffer, &incoming);
    let n_train = training_set.len();

    let objective = DistillationObjective {
        teacher: state.teacher.as_ref(),
        n_prev,
        n_t,
        config: loss,
    };
    let mixup = Mixup {
        alpha: loss.mixup_alpha,
    };
    let transform: &dyn BatchTransform = if loss.mixup_enabled { &mixup } else { &OneHot };
    let options = TrainOptions {
        epochs: train.epochs,
        batch_size: train.batch_size,
        optimizer: train.optimizer,
        seed: rng::derive(task_seed, &[tag::SHUFFLE]),
    };
    let log = train_epochs(&mut state.classifier, &training_set, &objective, transform, &options)?;

    let mua_started = Instant::now();
    update_buffer(state, &incoming, strategy, rng::derive(task_seed, &[tag::MEMORY]))?;
    let mua_time_s = mua_started.elapsed().as_secs_f64();

    state.teacher = Some(state.classifier.snapshot());

    let predictions = test
        .iter()
        .map(|s| state.classifier.predict(&s.features))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let accuracy = per_class_accuracy(&predictions, &labels)?;

    let mut row_accuracies = Vec::new();
    if batch.task_index >= 1 {
        let new_slots = batch
            .classes
            .iter()
            .map(|&c| state.slot_of(c))
            .collect::<Result<Vec<_>>>()?;
        state.task_slots.push(new_slots);
        for slots in &state.task_slots {
            let (hits, total) = predictions
                .iter()
                .zip(&labels)
                .filter(|(_, y)| slots.contains(y))
                .fold((0usize, 0usize), |(h, t), (p, y)| (h + usize::from(p == y), t + 1));
            if total == 0 {
                return Err(Error::contract("a recorded task has no test samples"));
            }
            row_accuracies.push(hits as f64 / total as f64);
        }
        state.matrix.push_row(row_accuracies.clone())?;
    }

    let calls: CallCounters = state.classifier.counters() - counters_before;
    Ok(TaskReport {
        task: batch.task_index,
        n_train,
        n_buffer: state.buffer.len(),
        per_class_accuracy: accuracy.per_class,
        row_accuracies,
        wall_time_s: started.elapsed().as_secs_f64(),
        mua_time_s,
        backbone_calls: calls.backbone_calls,
        head_calls: calls.head_calls,
        ce_weight: if loss.kd_enabled {
            ce_weight(n_prev, n_t, loss)?
        } else {
            1.0
        },
        final_train_loss: log.epoch_losses.last().copied(),
    })
}
