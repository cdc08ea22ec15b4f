//! Task sequences over labelled feature datasets, and the stochastic view
//! augmentation.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub task: usize,
}

/// A labelled dataset with fixed train and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn new(dim: usize, num_classes: usize, train: Vec<Example>, test: Vec<Example>) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::Dataset("dimension and class count must be positive".into()));
        }
        for (split, set) in [("train", &train), ("test", &test)] {
            for (i, e) in set.iter().enumerate() {
                if e.features.len() != dim {
                    return Err(Error::Dataset(format!(
                        "{split} row {i} has {} features, expected {dim}",
                        e.features.len()
                    )));
                }
                if e.label >= num_classes {
                    return Err(Error::Dataset(format!(
                        "{split} row {i} has label {} outside 0..{num_classes}",
                        e.label
                    )));
                }
                if e.features.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Dataset(format!("{split} row {i} has a non-finite feature")));
                }
            }
        }
        Ok(Self {
            dim,
            num_classes,
            train,
            test,
        })
    }

    pub fn class_counts(&self, train: bool) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for e in if train { &self.train } else { &self.test } {
            counts[e.label] += 1;
        }
        counts
    }

    /// Reads a pair of split files. Each starts with a
    /// `num_samples,dim,num_classes` record followed by `num_samples` rows of
    /// `dim` floats and an integer label.
    pub fn from_csv(train: impl AsRef<Path>, test: impl AsRef<Path>) -> Result<Self> {
        let (dim, classes, train_rows) = read_split(train.as_ref())?;
        let (test_dim, test_classes, test_rows) = read_split(test.as_ref())?;
        if (dim, classes) != (test_dim, test_classes) {
            return Err(Error::Dataset(format!(
                "train header ({dim} dims, {classes} classes) disagrees with test header ({test_dim} dims, {test_classes} classes)"
            )));
        }
        Self::new(dim, classes, train_rows, test_rows)
    }

    pub fn write_csv(&self, train: impl AsRef<Path>, test: impl AsRef<Path>) -> Result<()> {
        write_split(train.as_ref(), self.dim, self.num_classes, &self.train)?;
        write_split(test.as_ref(), self.dim, self.num_classes, &self.test)
    }
}

fn read_split(path: &Path) -> Result<(usize, usize, Vec<Example>)> {
    let where_ = |line: u64, msg: String| Error::Dataset(format!("{}:{line}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| where_(1, "missing header".into()))?
        .map_err(|e| where_(1, e.to_string()))?;
    let nums: Vec<usize> = header
        .iter()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| where_(1, format!("header must be num_samples,dim,num_classes: {e}")))?;
    let [n, dim, classes] = nums[..] else {
        return Err(where_(1, "header must be num_samples,dim,num_classes".into()));
    };
    let mut rows = Vec::with_capacity(n);
    for (i, rec) in records.enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| where_(line, e.to_string()))?;
        if rec.len() != dim + 1 {
            return Err(where_(line, format!("expected {} fields, found {}", dim + 1, rec.len())));
        }
        let features = rec
            .iter()
            .take(dim)
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| where_(line, e.to_string()))?;
        let label = rec[dim].parse::<usize>().map_err(|e| where_(line, format!("label: {e}")))?;
        rows.push(Example { features, label });
    }
    if rows.len() != n {
        return Err(Error::Dataset(format!(
            "{}: header declares {n} samples, found {}",
            path.display(),
            rows.len()
        )));
    }
    Ok((dim, classes, rows))
}

fn write_split(path: &Path, dim: usize, classes: usize, rows: &[Example]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Dataset(e.to_string()))?;
    let io = |e: csv::Error| Error::Dataset(e.to_string());
    w.write_record([rows.len().to_string(), dim.to_string(), classes.to_string()])
        .map_err(io)?;
    for e in rows {
        let mut rec: Vec<String> = e.features.iter().map(|v| v.to_string()).collect();
        rec.push(e.label.to_string());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded Gaussian-mixture classification set: one isotropic cluster per
/// class, centred on a random direction scaled by `separation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            train_per_class: 250,
            test_per_class: 100,
            separation: 3.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl MixtureSpec {
    pub fn generate(&self) -> Result<Dataset> {
        if self.classes == 0 || self.dim == 0 {
            return Err(Error::Dataset("mixture needs at least one class and one dimension".into()));
        }
        if !(self.noise >= 0.0 && self.separation >= 0.0) {
            return Err(Error::Dataset("mixture noise and separation must be non-negative".into()));
        }
        let mut rng = stream(self.seed, Stream::Data);
        let means: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| self.separation * x / n).collect()
            })
            .collect();
        let mut draw = |count: usize| -> Vec<Example> {
            let mut out = Vec::with_capacity(count * self.classes);
            for (label, mean) in means.iter().enumerate() {
                for _ in 0..count {
                    let features = mean
                        .iter()
                        .map(|m| m + self.noise * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    out.push(Example { features, label });
                }
            }
            out
        };
        let train = draw(self.train_per_class);
        let test = draw(self.test_per_class);
        Dataset::new(self.dim, self.classes, train, test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "class-il")]
    ClassIl,
    #[serde(rename = "task-il")]
    TaskIl,
    #[serde(rename = "gcil-uniform")]
    GcilUniform,
    #[serde(rename = "gcil-longtail")]
    GcilLongtail,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::ClassIl => "class-il",
            Scenario::TaskIl => "task-il",
            Scenario::GcilUniform => "gcil-uniform",
            Scenario::GcilLongtail => "gcil-longtail",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// Sorted, distinct class ids present in this task.
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub scenario: Scenario,
    pub seed: u64,
    pub dim: usize,
    pub num_classes: usize,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Pools every task's train and test samples, for joint training.
    pub fn pooled(&self) -> Task {
        let mut classes: Vec<usize> = self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect();
        classes.sort_unstable();
        classes.dedup();
        Task {
            classes,
            train: self.tasks.iter().flat_map(|t| t.train.iter().cloned()).collect(),
            test: self.tasks.iter().flat_map(|t| t.test.iter().cloned()).collect(),
        }
    }

    /// Class-to-task map for split streams; `None` for classes in no task.
    pub fn class_map(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.num_classes];
        for (t, task) in self.tasks.iter().enumerate() {
            for &c in &task.classes {
                map[c].get_or_insert(t);
            }
        }
        map
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassOrder {
    /// Classes `0..k` go to the first task, and so on.
    #[default]
    Identity,
    /// Classes are permuted by the stream seed before splitting.
    Shuffled,
}

fn samples(set: &[Example], classes: &[usize], task: usize) -> Vec<Sample> {
    set.iter()
        .filter(|e| classes.contains(&e.label))
        .map(|e| Sample {
            features: e.features.clone(),
            label: e.label,
            task,
        })
        .collect()
}

/// Splits the dataset into `tasks` disjoint groups of `classes_per_task`
/// classes, keeping the source train/test split.
pub fn make_split_stream(
    data: &Dataset,
    tasks: usize,
    classes_per_task: usize,
    order: ClassOrder,
    scenario: Scenario,
    seed: u64,
) -> Result<TaskStream> {
    if !matches!(scenario, Scenario::ClassIl | Scenario::TaskIl) {
        return Err(contract("split streams are class-il or task-il"));
    }
    if tasks == 0 || classes_per_task == 0 {
        return Err(contract("a split stream needs at least one task and one class per task"));
    }
    if tasks * classes_per_task > data.num_classes {
        return Err(contract(format!(
            "{tasks} tasks of {classes_per_task} classes need {} classes, dataset has {}",
            tasks * classes_per_task,
            data.num_classes
        )));
    }
    let mut perm: Vec<usize> = (0..data.num_classes).collect();
    if order == ClassOrder::Shuffled {
        perm.shuffle(&mut stream(seed, Stream::Shuffle));
    }
    let tasks = perm
        .chunks(classes_per_task)
        .take(tasks)
        .enumerate()
        .map(|(t, chunk)| {
            let mut classes = chunk.to_vec();
            classes.sort_unstable();
            Task {
                train: samples(&data.train, &classes, t),
                test: samples(&data.test, &classes, t),
                classes,
            }
        })
        .collect();
    Ok(TaskStream {
        scenario,
        seed,
        dim: data.dim,
        num_classes: data.num_classes,
        tasks,
    })
}

pub fn make_class_il_stream(
    data: &Dataset,
    tasks: usize,
    classes_per_task: usize,
    order: ClassOrder,
    seed: u64,
) -> Result<TaskStream> {
    make_split_stream(data, tasks, classes_per_task, order, Scenario::ClassIl, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Allocation {
    Uniform,
    Longtail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcilSpec {
    pub tasks: usize,
    pub samples_per_task: usize,
    pub max_classes: usize,
    pub allocation: Allocation,
    /// Power-law exponent of the longtail profile.
    #[serde(default = "default_exponent")]
    pub exponent: f64,
}

fn default_exponent() -> f64 {
    1.0
}

impl Default for GcilSpec {
    fn default() -> Self {
        Self {
            tasks: 20,
            samples_per_task: 1000,
            max_classes: 50,
            allocation: Allocation::Uniform,
            exponent: default_exponent(),
        }
    }
}

/// Splits `budget` in proportion to `weights` by largest remainder; ties in
/// the remainder go to the earlier entry.
pub fn allocate(budget: usize, weights: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
        return Err(contract("allocation weights must be non-negative with a positive sum"));
    }
    let exact: Vec<f64> = weights.iter().map(|w| budget as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(budget.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Longtail weights `(rank + 1)^(-exponent)` for `k` ranks.
pub fn longtail_weights(k: usize, exponent: f64) -> Vec<f64> {
    (0..k).map(|r| ((r + 1) as f64).powf(-exponent)).collect()
}

/// Generalized class-incremental stream: each task draws a class subset of
/// size uniform in `[2, max_classes]` and spends its sample budget across it.
pub fn make_gcil_stream(data: &Dataset, spec: &GcilSpec, seed: u64) -> Result<TaskStream> {
    if spec.tasks == 0 || spec.samples_per_task == 0 || spec.max_classes == 0 {
        return Err(contract("gcil needs positive task count, budget and class limit"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, e) in data.train.iter().enumerate() {
        by_class[e.label].push(i);
    }
    let cap = spec.max_classes.min(data.num_classes);
    let mut rng = stream(seed, Stream::Shuffle);
    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let k = if cap == 1 { 1 } else { rng.random_range(2..=cap) };
        let chosen = index::sample(&mut rng, data.num_classes, k).into_vec();
        let weights = match spec.allocation {
            Allocation::Uniform => vec![1.0; k],
            Allocation::Longtail => longtail_weights(k, spec.exponent),
        };
        let counts = allocate(spec.samples_per_task, &weights)?;
        let mut train = Vec::with_capacity(spec.samples_per_task);
        for (&class, &count) in chosen.iter().zip(&counts) {
            let pool = &by_class[class];
            if count > pool.len() {
                return Err(contract(format!(
                    "task {t} needs {count} samples of class {class}, only {} available",
                    pool.len()
                )));
            }
            for j in index::sample(&mut rng, pool.len(), count) {
                let e = &data.train[pool[j]];
                train.push(Sample {
                    features: e.features.clone(),
                    label: e.label,
                    task: t,
                });
            }
        }
        let mut classes = chosen;
        classes.sort_unstable();
        tasks.push(Task {
            test: samples(&data.test, &classes, t),
            classes,
            train,
        });
    }
    let scenario = match spec.allocation {
        Allocation::Uniform => Scenario::GcilUniform,
        Allocation::Longtail => Scenario::GcilLongtail,
    };
    Ok(TaskStream {
        scenario,
        seed,
        dim: data.dim,
        num_classes: data.num_classes,
        tasks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Additive Gaussian noise on contrastive views.
    pub noise_std: f64,
    /// Per-feature zeroing probability on contrastive views.
    pub mask_rate: f64,
    /// Features are scaled by a factor drawn from `[1 - j, 1 + j]`.
    pub jitter_scale: f64,
    /// Additive Gaussian noise on the supervised view.
    pub standard_noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.3,
            mask_rate: 0.1,
            jitter_scale: 0.2,
            standard_noise_std: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_std: 0.0,
            mask_rate: 0.0,
            jitter_scale: 0.0,
            standard_noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.mask_rate, self.jitter_scale];
        let stds = [self.noise_std, self.standard_noise_std];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || stds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(contract(format!("invalid augmentation config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    Contrastive,
    Standard,
}

/// Returns a randomly perturbed copy of `x`. Contrastive views get per-feature
/// jitter, additive noise and masking (in that order); standard views only
/// the weak noise.
pub fn augment(x: &[f64], config: &AugmentConfig, mode: AugmentMode, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = |std: f64| Normal::new(0.0, std).ok().filter(|_| std > 0.0);
    match mode {
        AugmentMode::Standard => {
            let n = noise(config.standard_noise_std);
            x.iter().map(|v| v + n.map_or(0.0, |n| n.sample(rng))).collect()
        }
        AugmentMode::Contrastive => {
            let n = noise(config.noise_std);
            let j = config.jitter_scale;
            x.iter()
                .map(|v| {
                    let mut y = *v;
                    if j > 0.0 {
                        y *= rng.random_range(1.0 - j..=1.0 + j);
                    }
                    if let Some(n) = n {
                        y += n.sample(rng);
                    }
                    if config.mask_rate > 0.0 && rng.random_bool(config.mask_rate) {
                        y = 0.0;
                    }
                    y
                })
                .collect()
        }
    }
}
