//! Data ingestion, class-incremental schedules and stratified splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// A `frames x dim` row-major feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::format("feature matrix must have at least one frame and one dim"));
        }
        if data.len() != frames * dim {
            return Err(Error::Shape {
                expected: frames * dim,
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::format(format!("non-finite feature value {bad}")));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            frames,
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.dim..(frame + 1) * self.dim]
    }

    pub fn get(&self, frame: usize, d: usize) -> f64 {
        self.data[frame * self.dim + d]
    }

    /// Mean over frames, one value per feature dim.
    pub fn mean_pool(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for f in 0..self.frames {
            for (o, v) in out.iter_mut().zip(self.row(f)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.frames as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }

    pub fn same_shape(&self, other: &FeatureMatrix) -> bool {
        self.frames == other.frames && self.dim == other.dim
    }
}

/// One labelled example. Two samples are equal iff their ids are.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub features: FeatureMatrix,
    pub label: usize,
}

impl PartialEq for Sample {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Eq for Sample {}

impl Sample {
    pub fn new(id: impl Into<String>, features: FeatureMatrix, label: usize) -> Self {
        Self {
            id: id.into(),
            features,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Label strings, sorted; a sample's `label` indexes into this list.
    pub class_names: Vec<String>,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks shared feature dim, dense labels and unique ids.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if s.features.dim() != self.feature_dim {
                return Err(Error::format(format!(
                    "sample {} has feature dim {}, dataset dim is {}",
                    s.id,
                    s.features.dim(),
                    self.feature_dim
                )));
            }
            if s.label >= self.num_classes() {
                return Err(Error::format(format!(
                    "sample {} has label {} out of range",
                    s.id, s.label
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::format(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    id: String,
    label: String,
    frames: usize,
    dim: usize,
    features: String,
}

/// Read a CSV manifest with header `id,label,frames,dim,features`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::format(format!("manifest header: {e}")))?
        .clone();
    let expected = ["id", "label", "frames", "dim", "features"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::format(format!(
            "manifest header must be `{}`, found `{}`",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut rows = Vec::new();
    for (line, record) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = record.map_err(|e| Error::format(format!("manifest row {}: {e}", line + 1)))?;
        rows.push(row);
    }

    let class_names: Vec<String> = rows
        .iter()
        .map(|r| r.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let mut samples = Vec::with_capacity(rows.len());
    let mut feature_dim = None;
    for row in &rows {
        let values = row
            .features
            .split(';')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::format(format!("sample {}: bad feature value `{v}`: {e}", row.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != row.frames * row.dim {
            return Err(Error::format(format!(
                "sample {}: expected {} feature values ({}x{}), found {}",
                row.id,
                row.frames * row.dim,
                row.frames,
                row.dim,
                values.len()
            )));
        }
        match feature_dim {
            None => feature_dim = Some(row.dim),
            Some(d) if d != row.dim => {
                return Err(Error::format(format!(
                    "sample {}: feature dim {} differs from {}",
                    row.id, row.dim, d
                )))
            }
            _ => {}
        }
        let label = *index
            .get(row.label.as_str())
            .ok_or_else(|| Error::format(format!("unknown label `{}`", row.label)))?;
        let features = FeatureMatrix::new(row.frames, row.dim, values)
            .map_err(|e| Error::format(format!("sample {}: {e}", row.id)))?;
        samples.push(Sample::new(row.id.clone(), features, label));
    }

    let dataset = Dataset {
        samples,
        class_names,
        feature_dim: feature_dim.unwrap_or(0),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Write a dataset in the manifest format read by [`load_dataset`].
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path.as_ref()).map_err(|e| Error::format(format!("cannot create manifest: {e}")))?;
    for s in &dataset.samples {
        let features = s
            .features
            .as_slice()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        writer
            .serialize(ManifestRow {
                id: s.id.clone(),
                label: dataset.class_names[s.label].clone(),
                frames: s.features.frames(),
                dim: s.features.dim(),
                features,
            })
            .map_err(|e| Error::format(format!("manifest write: {e}")))?;
    }
    writer.flush()?;
    Ok(())
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub frames: usize,
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            per_class: 200,
            feature_dim: 16,
            frames: 4,
            separation: 2.0,
        }
    }
}

/// Gaussian blobs: class means uniform on a sphere of radius `separation`,
/// every frame an independent unit-covariance draw around its class mean.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let SyntheticSpec {
        num_classes,
        per_class,
        feature_dim,
        frames,
        separation,
    } = *spec;
    if num_classes == 0 || per_class == 0 || feature_dim == 0 || frames == 0 {
        return Err(Error::config("synthetic counts must all be at least 1"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::config(format!("separation must be positive, got {separation}")));
    }

    let mut means_rng = rng::rng_from(seed, &[tag::SYNTHETIC, 0]);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..feature_dim).map(|_| means_rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x * separation / norm).collect();
            }
        })
        .collect();

    let class_width = num_classes.to_string().len().max(3);
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        let mut rng = rng::rng_from(seed, &[tag::SYNTHETIC, 1, c as u64]);
        for i in 0..per_class {
            let mut data = Vec::with_capacity(frames * feature_dim);
            for _ in 0..frames {
                for m in mean {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(m + z);
                }
            }
            let features = FeatureMatrix::new(frames, feature_dim, data)?;
            samples.push(Sample::new(format!("syn-{c:0class_width$}-{i:05}"), features, c));
        }
    }
    let class_names = (0..num_classes).map(|c| format!("class_{c:0class_width$}")).collect();
    Ok(Dataset {
        samples,
        class_names,
        feature_dim,
    })
}

/// Disjoint class sets: an optional pretraining set then one set per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub pretrain_classes: Vec<usize>,
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Every scheduled class, pretraining first then task by task.
    pub fn class_order(&self) -> Vec<usize> {
        self.pretrain_classes
            .iter()
            .chain(self.tasks.iter().flatten())
            .copied()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, task) in self.tasks.iter().enumerate() {
            if task.is_empty() {
                return Err(Error::config(format!("task {} has no classes", i + 1)));
            }
        }
        for c in self.class_order() {
            if !seen.insert(c) {
                return Err(Error::config(format!("class {c} scheduled more than once")));
            }
        }
        Ok(())
    }
}

/// Seeded shuffle of class indices into pretraining and task sets.
///
/// Classes left over when `pretrain + num_tasks * classes_per_task < C` are
/// not scheduled.
pub fn split_schedule(
    dataset: &Dataset,
    num_tasks: usize,
    classes_per_task: usize,
    pretrain_classes: usize,
    seed: u64,
) -> Result<TaskSchedule> {
    if num_tasks == 0 || classes_per_task == 0 {
        return Err(Error::config("need at least one task with at least one class"));
    }
    let needed = pretrain_classes + num_tasks * classes_per_task;
    let available = dataset.num_classes();
    if needed > available {
        return Err(Error::config(format!(
            "schedule needs {needed} classes ({pretrain_classes} pretrain + {num_tasks} x {classes_per_task}) but dataset has {available}"
        )));
    }
    let mut classes: Vec<usize> = (0..available).collect();
    classes.shuffle(&mut rng::rng_from(seed, &[tag::SCHEDULE]));
    let pretrain = classes[..pretrain_classes].to_vec();
    let tasks = classes[pretrain_classes..needed]
        .chunks(classes_per_task)
        .map(<[usize]>::to_vec)
        .collect();
    let schedule = TaskSchedule {
        pretrain_classes: pretrain,
        tasks,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Data for one step of the stream. `task_index` 0 is the pretraining step.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub task_index: usize,
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    /// Test samples of every class seen up to and including this step.
    pub test_cumulative: Vec<Sample>,
}

/// Per-class stratified train/test split, grouped into task batches.
///
/// When the schedule has pretraining classes the first batch has
/// `task_index == 0`; scheduled tasks follow with indices `1..=T`.
pub fn task_batches(
    dataset: &Dataset,
    schedule: &TaskSchedule,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<TaskBatch>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    schedule.validate()?;

    let mut per_class: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in &dataset.samples {
        per_class.entry(s.label).or_default().push(s);
    }

    let mut train_of = BTreeMap::new();
    let mut test_of = BTreeMap::new();
    for c in schedule.class_order() {
        let mut members: Vec<Sample> = per_class
            .get(&c)
            .map(|v| v.iter().map(|s| (*s).clone()).collect())
            .unwrap_or_default();
        if members.len() < 2 {
            return Err(Error::Split(format!(
                "class {c} has {} samples, at least 2 are needed for a train/test split",
                members.len()
            )));
        }
        members.sort_by(|a, b| a.id.cmp(&b.id));
        members.shuffle(&mut rng::rng_from(seed, &[tag::SPLIT, c as u64]));
        let n = members.len();
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        let train = members.split_off(n_test);
        test_of.insert(c, members);
        train_of.insert(c, train);
    }

    let mut steps: Vec<(usize, Vec<usize>)> = Vec::new();
    if !schedule.pretrain_classes.is_empty() {
        steps.push((0, schedule.pretrain_classes.clone()));
    }
    steps.extend(schedule.tasks.iter().cloned().enumerate().map(|(i, t)| (i + 1, t)));

    let mut batches = Vec::with_capacity(steps.len());
    let mut test_cumulative = Vec::new();
    for (task_index, classes) in steps {
        let mut train: Vec<Sample> = classes.iter().flat_map(|c| train_of[c].iter().cloned()).collect();
        train.shuffle(&mut rng::rng_from(seed, &[tag::SPLIT, u64::MAX, task_index as u64]));
        for c in &classes {
            test_cumulative.extend(test_of[c].iter().cloned());
        }
        batches.push(TaskBatch {
            task_index,
            classes,
            train,
            test_cumulative: test_cumulative.clone(),
        });
    }
    Ok(batches)
}
