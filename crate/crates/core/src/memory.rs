//! Replay buffer and memory-update algorithms.
//!
//! Each update takes the current buffer plus the incoming task data as the
//! candidate pool and returns a new buffer of at most `capacity` entries.
//! Quota-based updates (prototype, diversity) give every seen class
//! `floor(L / N)` slots and leave the remainder unused.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Evaluator;
use crate::rng::{self, tag};
use crate::stream::{FeatureMatrix, Sample};
use crate::uncertainty::UncertaintyScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuaKind {
    /// No replay: the buffer always stays empty.
    Finetune,
    Random,
    Reservoir,
    Prototype,
    Uncertainty,
    UncertaintyPlusPlus,
}

impl MuaKind {
    pub const ALL: [MuaKind; 6] = [
        MuaKind::Finetune,
        MuaKind::Random,
        MuaKind::Reservoir,
        MuaKind::Prototype,
        MuaKind::Uncertainty,
        MuaKind::UncertaintyPlusPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MuaKind::Finetune => "finetune",
            MuaKind::Random => "random",
            MuaKind::Reservoir => "reservoir",
            MuaKind::Prototype => "prototype",
            MuaKind::Uncertainty => "uncertainty",
            MuaKind::UncertaintyPlusPlus => "uncertainty_plus_plus",
        }
    }
}

impl fmt::Display for MuaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MuaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MuaKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = MuaKind::ALL.iter().map(|k| k.name()).collect();
            Error::config(format!("unknown strategy `{s}`, expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub sample: Sample,
    pub score: Option<UncertaintyScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    kind: MuaKind,
    entries: Vec<BufferEntry>,
    per_class_quota: BTreeMap<usize, usize>,
    /// Items offered to the reservoir so far, across all tasks.
    observed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, kind: MuaKind) -> Self {
        Self {
            capacity,
            kind,
            entries: Vec::new(),
            per_class_quota: BTreeMap::new(),
            observed: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn kind(&self) -> MuaKind {
        self.kind
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn per_class_quota(&self) -> &BTreeMap<usize, usize> {
        &self.per_class_quota
    }

    pub fn observed(&self) -> u64 {
        self.observed
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.entries.iter().map(|e| &e.sample)
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.sample.label).or_insert(0) += 1;
        }
        counts
    }

    fn with_entries(&self, entries: Vec<BufferEntry>, per_class_quota: BTreeMap<usize, usize>) -> Self {
        Self {
            capacity: self.capacity,
            kind: self.kind,
            entries,
            per_class_quota,
            observed: self.observed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() > self.capacity {
            return Err(Error::Integrity(format!(
                "{} entries exceed capacity {}",
                self.entries.len(),
                self.capacity
            )));
        }
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.sample.id.as_str()) {
                return Err(Error::Integrity(format!("duplicate entry {}", e.sample.id)));
            }
            if let Some(s) = &e.score {
                if s.sample_id != e.sample.id || !(0.0..=1.0).contains(&s.u) {
                    return Err(Error::Integrity(format!("invalid score on entry {}", e.sample.id)));
                }
            }
        }
        if !self.per_class_quota.is_empty() {
            for (class, count) in self.class_counts() {
                let quota = self.per_class_quota.get(&class).copied().unwrap_or(0);
                if count > quota {
                    return Err(Error::Integrity(format!(
                        "class {class} holds {count} entries, quota is {quota}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Slots per class: `floor(L / N)`.
pub fn quota(capacity: usize, num_classes: usize) -> usize {
    capacity.checked_div(num_classes).unwrap_or(0)
}

/// Buffer contents followed by incoming samples, deduplicated by id.
pub fn candidates(buffer: &ReplayBuffer, incoming: &[Sample]) -> Vec<Sample> {
    let mut seen = HashSet::new();
    buffer
        .samples()
        .chain(incoming)
        .filter(|s| seen.insert(s.id.clone()))
        .cloned()
        .collect()
}

/// The training set for a task: replayed exemplars united with new data.
pub fn build_training_set(buffer: &ReplayBuffer, incoming: &[Sample]) -> Vec<Sample> {
    candidates(buffer, incoming)
}

fn entry(sample: Sample) -> BufferEntry {
    BufferEntry { sample, score: None }
}

/// Uniform sample without replacement from buffer and incoming data.
pub fn update_random(buffer: &ReplayBuffer, incoming: &[Sample], seed: u64) -> ReplayBuffer {
    let mut pool = candidates(buffer, incoming);
    if pool.len() > buffer.capacity {
        let mut rng = rng::rng_from(seed, &[tag::MEMORY, 1]);
        let (chosen, _) = pool.partial_shuffle(&mut rng, buffer.capacity);
        pool = chosen.to_vec();
    }
    buffer.with_entries(pool.into_iter().map(entry).collect(), BTreeMap::new())
}

/// Classic reservoir sampling over the incoming stream.
///
/// The n-th item ever offered is kept with probability `L / n`, replacing a
/// uniformly chosen slot.
pub fn update_reservoir(buffer: &ReplayBuffer, incoming: &[Sample], seed: u64) -> ReplayBuffer {
    let mut rng = rng::rng_from(seed, &[tag::MEMORY, 2, buffer.observed]);
    let mut out = buffer.with_entries(buffer.entries.clone(), BTreeMap::new());
    let mut ids: HashSet<String> = out.entries.iter().map(|e| e.sample.id.clone()).collect();
    for sample in incoming {
        if ids.contains(&sample.id) {
            continue;
        }
        out.observed += 1;
        if out.entries.len() < out.capacity {
            ids.insert(sample.id.clone());
            out.entries.push(entry(sample.clone()));
        } else if out.capacity > 0 {
            let m = rng.random_range(0..out.observed);
            if (m as usize) < out.capacity {
                let slot = &mut out.entries[m as usize];
                ids.remove(&slot.sample.id);
                ids.insert(sample.id.clone());
                *slot = entry(sample.clone());
            }
        }
    }
    out
}

fn group_by_class(pool: Vec<Sample>) -> BTreeMap<usize, Vec<Sample>> {
    let mut groups: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in pool {
        groups.entry(s.label).or_default().push(s);
    }
    for members in groups.values_mut() {
        members.sort_by(|a, b| a.id.cmp(&b.id));
    }
    groups
}

/// Greedy herding: repeatedly add the point that brings the running mean
/// closest to the mean of all points. Earlier indices win ties.
pub fn herding_select(embeddings: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = embeddings.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let dim = embeddings[0].len();
    let mut target = vec![0.0; dim];
    for e in embeddings {
        for (t, v) in target.iter_mut().zip(e) {
            *t += v / n as f64;
        }
    }
    let mut sum = vec![0.0; dim];
    let mut chosen = Vec::with_capacity(k.min(n));
    let mut taken = vec![false; n];
    while chosen.len() < k.min(n) {
        let m = (chosen.len() + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in embeddings.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = target
                .iter()
                .zip(&sum)
                .zip(e)
                .map(|((t, s), v)| (t - (s + v) / m).powi(2))
                .sum();
            if best.is_none_or(|(_, d)| dist < d) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("an untaken candidate exists");
        taken[i] = true;
        sum.iter_mut().zip(&embeddings[i]).for_each(|(s, v)| *s += v);
        chosen.push(i);
    }
    chosen
}

/// Per-class herding on the current model's embeddings.
pub fn update_prototype<E: Evaluator>(
    buffer: &ReplayBuffer,
    incoming: &[Sample],
    model: &mut E,
) -> Result<ReplayBuffer> {
    let groups = group_by_class(candidates(buffer, incoming));
    let mut k_c = quota(buffer.capacity, groups.len());
    let mut eligible: Vec<usize> = groups.keys().copied().collect();
    if k_c == 0 && buffer.capacity > 0 {
        // fewer slots than classes: one slot for each of the lowest class ids
        k_c = 1;
        eligible.truncate(buffer.capacity);
    }

    let mut entries = Vec::new();
    let mut per_class_quota = BTreeMap::new();
    for (class, members) in groups {
        let slots = if eligible.contains(&class) { k_c } else { 0 };
        per_class_quota.insert(class, slots);
        if slots == 0 {
            continue;
        }
        let embeddings = members
            .iter()
            .map(|s| Ok(model.forward(&s.features)?.embedding))
            .collect::<Result<Vec<_>>>()?;
        for i in herding_select(&embeddings, slots) {
            entries.push(entry(members[i].clone()));
        }
    }
    Ok(buffer.with_entries(entries, per_class_quota))
}

/// Stride selection `i_j = floor(j * n / k)` for `j = 0..k` (all of
/// `0..n` when `k >= n`).
pub fn stride_indices(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    (0..k).map(|j| j * n / k).collect()
}

/// Diversity-aware update: per class, sort candidates by uncertainty
/// (descending, ties by id) and keep an evenly strided subset.
pub fn update_diversity(
    buffer: &ReplayBuffer,
    incoming: &[Sample],
    scores: &HashMap<String, UncertaintyScore>,
) -> Result<ReplayBuffer> {
    let pool = candidates(buffer, incoming);
    if let Some(missing) = pool.iter().find(|s| !scores.contains_key(&s.id)) {
        return Err(Error::contract(format!(
            "no uncertainty score for candidate {}",
            missing.id
        )));
    }
    let mut groups = group_by_class(pool);
    for members in groups.values_mut() {
        members.sort_by(|a, b| {
            scores[&b.id]
                .u
                .total_cmp(&scores[&a.id].u)
                .then_with(|| a.id.cmp(&b.id))
        });
    }

    let mut k_c = quota(buffer.capacity, groups.len());
    let mut eligible: Vec<usize> = groups.keys().copied().collect();
    if k_c == 0 && buffer.capacity > 0 {
        // fewer slots than classes: one slot for each of the classes whose
        // most uncertain candidate is most uncertain
        k_c = 1;
        eligible.sort_by(|a, b| {
            let top = |c: &usize| scores[&groups[c][0].id].u;
            top(b).total_cmp(&top(a)).then_with(|| a.cmp(b))
        });
        eligible.truncate(buffer.capacity);
    }

    let mut entries = Vec::new();
    let mut per_class_quota = BTreeMap::new();
    for (class, members) in groups {
        let slots = if eligible.contains(&class) { k_c } else { 0 };
        per_class_quota.insert(class, slots);
        for i in stride_indices(members.len(), slots) {
            let sample = members[i].clone();
            let score = scores[&sample.id].clone();
            entries.push(BufferEntry {
                sample,
                score: Some(score),
            });
        }
    }
    Ok(buffer.with_entries(entries, per_class_quota))
}

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotEntry {
    id: String,
    label: usize,
    u: Option<f64>,
    k: Option<usize>,
    frames: usize,
    dim: usize,
    features: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BufferSnapshot {
    version: u32,
    capacity: usize,
    strategy: MuaKind,
    observed: u64,
    per_class_quota: BTreeMap<usize, usize>,
    entries: Vec<SnapshotEntry>,
}

pub fn snapshot_buffer(buffer: &ReplayBuffer, path: impl AsRef<Path>) -> Result<()> {
    let snapshot = BufferSnapshot {
        version: SNAPSHOT_VERSION,
        capacity: buffer.capacity,
        strategy: buffer.kind,
        observed: buffer.observed,
        per_class_quota: buffer.per_class_quota.clone(),
        entries: buffer
            .entries
            .iter()
            .map(|e| SnapshotEntry {
                id: e.sample.id.clone(),
                label: e.sample.label,
                u: e.score.as_ref().map(|s| s.u),
                k: e.score.as_ref().map(|s| s.k),
                frames: e.sample.features.frames(),
                dim: e.sample.features.dim(),
                features: e.sample.features.as_slice().to_vec(),
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&snapshot)?)?;
    Ok(())
}

pub fn restore_buffer(path: impl AsRef<Path>) -> Result<ReplayBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    let snapshot: BufferSnapshot =
        serde_json::from_slice(&bytes).map_err(|e| Error::Integrity(format!("unreadable buffer snapshot: {e}")))?;
    if snapshot.version != SNAPSHOT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported buffer snapshot version {}",
            snapshot.version
        )));
    }
    let entries = snapshot
        .entries
        .into_iter()
        .map(|e| {
            let features = FeatureMatrix::new(e.frames, e.dim, e.features)
                .map_err(|err| Error::Integrity(format!("entry {}: {err}", e.id)))?;
            let score = match (e.u, e.k) {
                (Some(u), Some(k)) => Some(UncertaintyScore {
                    sample_id: e.id.clone(),
                    u,
                    k,
                }),
                (None, None) => None,
                _ => return Err(Error::Integrity(format!("entry {} has a partial score", e.id))),
            };
            Ok(BufferEntry {
                sample: Sample::new(e.id, features, e.label),
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let buffer = ReplayBuffer {
        capacity: snapshot.capacity,
        kind: snapshot.strategy,
        entries,
        per_class_quota: snapshot.per_class_quota,
        observed: snapshot.observed,
    };
    buffer.validate()?;
    Ok(buffer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(id: &str, label: usize, v: f64) -> Sample {
        Sample::new(id, FeatureMatrix::new(1, 2, vec![v, -v]).unwrap(), label)
    }

    fn scored(pool: &[Sample], u: impl Fn(usize) -> f64) -> HashMap<String, UncertaintyScore> {
        pool.iter()
            .enumerate()
            .map(|(i, x)| {
                (
                    x.id.clone(),
                    UncertaintyScore {
                        sample_id: x.id.clone(),
                        u: u(i),
                        k: 1,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn quota_floor() {
        assert_eq!(quota(500, 18), 27);
        assert_eq!(quota(100, 10), 10);
        assert_eq!(quota(5, 10), 0);
    }

    #[test]
    fn random_keeps_everything_when_under_capacity() {
        let buf = ReplayBuffer::new(10, MuaKind::Random);
        let incoming: Vec<_> = (0..6).map(|i| s(&format!("a{i}"), 0, i as f64)).collect();
        let out = update_random(&buf, &incoming, 1);
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn random_on_full_buffer_keeps_subset_of_itself() {
        let buf = ReplayBuffer::new(5, MuaKind::Random);
        let pool: Vec<_> = (0..9).map(|i| s(&format!("a{i}"), 0, i as f64)).collect();
        let full = update_random(&buf, &pool, 1);
        let again = update_random(&full, &[], 2);
        assert_eq!(again.len(), 5);
        let ids: HashSet<_> = full.samples().map(|x| x.id.clone()).collect();
        assert!(again.samples().all(|x| ids.contains(&x.id)));
    }

    #[test]
    fn reservoir_warmup_and_exact_fill() {
        let buf = ReplayBuffer::new(4, MuaKind::Reservoir);
        let stream: Vec<_> = (0..4).map(|i| s(&format!("a{i}"), 0, i as f64)).collect();
        let out = update_reservoir(&buf, &stream, 3);
        let ids: Vec<_> = out.samples().map(|x| x.id.as_str()).collect();
        assert_eq!(ids, vec!["a0", "a1", "a2", "a3"]);
        assert_eq!(out.observed(), 4);
    }

    #[test]
    fn reservoir_count_persists() {
        let buf = ReplayBuffer::new(3, MuaKind::Reservoir);
        let first: Vec<_> = (0..5).map(|i| s(&format!("a{i}"), 0, 0.0)).collect();
        let second: Vec<_> = (0..7).map(|i| s(&format!("b{i}"), 1, 0.0)).collect();
        let out = update_reservoir(&update_reservoir(&buf, &first, 1), &second, 1);
        assert_eq!(out.observed(), 12);
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn zero_capacity_reservoir_stays_empty() {
        let buf = ReplayBuffer::new(0, MuaKind::Reservoir);
        let stream: Vec<_> = (0..4).map(|i| s(&format!("a{i}"), 0, 0.0)).collect();
        assert!(update_reservoir(&buf, &stream, 3).is_empty());
    }

    #[test]
    fn stride_examples() {
        assert_eq!(stride_indices(10, 2), vec![0, 5]);
        assert_eq!(stride_indices(4, 9), vec![0, 1, 2, 3]);
        assert_eq!(stride_indices(7, 1), vec![0]);
    }

    #[test]
    fn diversity_picks_ranks_zero_and_five() {
        let pool: Vec<_> = (0..10).map(|i| s(&format!("x{i}"), 0, i as f64)).collect();
        // u = 0.9 - 0.1 i
        let scores = scored(&pool, |i| 0.9 - 0.1 * i as f64);
        let mut other: Vec<_> = (0..10).map(|i| s(&format!("y{i}"), 1, 0.0)).collect();
        let mut all_scores = scores.clone();
        all_scores.extend(scored(&other, |_| 0.5));
        other.extend(pool);
        let out = update_diversity(&ReplayBuffer::new(4, MuaKind::Uncertainty), &other, &all_scores).unwrap();
        let class0: Vec<f64> = out
            .entries()
            .iter()
            .filter(|e| e.sample.label == 0)
            .map(|e| e.score.as_ref().unwrap().u)
            .collect();
        assert_eq!(class0.len(), 2);
        assert!((class0[0] - 0.9).abs() < 1e-12 && (class0[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn diversity_single_slot_takes_most_uncertain() {
        let pool: Vec<_> = (0..6).map(|i| s(&format!("x{i}"), i % 2, i as f64)).collect();
        let scores = scored(&pool, |i| i as f64 / 10.0);
        let out = update_diversity(&ReplayBuffer::new(2, MuaKind::Uncertainty), &pool, &scores).unwrap();
        let ids: Vec<_> = out.samples().map(|x| x.id.as_str()).collect();
        assert_eq!(ids, vec!["x4", "x5"]);
    }

    #[test]
    fn diversity_keeps_small_classes_whole() {
        let pool: Vec<_> = (0..3).map(|i| s(&format!("x{i}"), 0, 0.0)).collect();
        let scores = scored(&pool, |_| 0.2);
        let out = update_diversity(&ReplayBuffer::new(10, MuaKind::Uncertainty), &pool, &scores).unwrap();
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn diversity_requires_scores() {
        let pool = vec![s("a", 0, 0.0), s("b", 0, 0.0)];
        let scores = scored(&pool[..1], |_| 0.0);
        assert!(matches!(
            update_diversity(&ReplayBuffer::new(2, MuaKind::Uncertainty), &pool, &scores),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn diversity_degenerate_quota_uses_top_uncertainty_classes() {
        let pool: Vec<_> = (0..4).map(|i| s(&format!("x{i}"), i, 0.0)).collect();
        let scores = scored(&pool, |i| [0.1, 0.7, 0.3, 0.7][i]);
        let out = update_diversity(&ReplayBuffer::new(2, MuaKind::Uncertainty), &pool, &scores).unwrap();
        let labels: Vec<_> = out.samples().map(|x| x.label).collect();
        assert_eq!(labels, vec![1, 3]);
        out.validate().unwrap();
    }

    #[test]
    fn herding_first_pick_is_nearest_to_mean() {
        let e = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(herding_select(&e, 1), vec![2]);
        assert_eq!(herding_select(&e, 5).len(), 3);
    }

    #[test]
    fn training_set_union() {
        let buf = ReplayBuffer::new(3, MuaKind::Random);
        let d1: Vec<_> = (0..4).map(|i| s(&format!("a{i}"), 0, 0.0)).collect();
        assert_eq!(build_training_set(&buf, &d1), d1);
        let buf = update_random(&buf, &d1, 0);
        let d2: Vec<_> = (0..5).map(|i| s(&format!("b{i}"), 1, 0.0)).collect();
        assert_eq!(build_training_set(&buf, &d2).len(), 8);
        let mut again = d2.clone();
        again.push(buf.entries()[0].sample.clone());
        assert_eq!(build_training_set(&buf, &again).len(), 8);
    }

    #[test]
    fn unknown_strategy_name() {
        assert!(matches!("greedy".parse::<MuaKind>(), Err(Error::Config(_))));
        for k in MuaKind::ALL {
            assert_eq!(k.name().parse::<MuaKind>().unwrap(), k);
        }
    }

    #[test]
    fn snapshot_round_trip_and_tamper() {
        let pool: Vec<_> = (0..8).map(|i| s(&format!("x{i}"), i % 2, i as f64 * 0.1)).collect();
        let scores = scored(&pool, |i| i as f64 / 8.0);
        let buf = update_diversity(&ReplayBuffer::new(4, MuaKind::Uncertainty), &pool, &scores).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        snapshot_buffer(&buf, f.path()).unwrap();
        let back = restore_buffer(f.path()).unwrap();
        assert_eq!(back, buf);
        for e in back.entries() {
            assert_eq!(
                e.sample.features,
                buf.entries()
                    .iter()
                    .find(|x| x.sample.id == e.sample.id)
                    .unwrap()
                    .sample
                    .features
            );
        }

        let mut json: serde_json::Value = serde_json::from_slice(&std::fs::read(f.path()).unwrap()).unwrap();
        json["capacity"] = serde_json::json!(2);
        std::fs::write(f.path(), serde_json::to_vec(&json).unwrap()).unwrap();
        assert!(matches!(restore_buffer(f.path()), Err(Error::Integrity(_))));

        std::fs::write(f.path(), b"not json").unwrap();
        assert!(matches!(restore_buffer(f.path()), Err(Error::Integrity(_))));
    }
}
