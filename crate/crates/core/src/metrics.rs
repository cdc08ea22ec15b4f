//! Evaluation quantities over accuracy matrices and prediction dumps, and
//! the JSON run report layout.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Lower-triangular matrix of test accuracies in percent: row `i` holds the
/// accuracy on tasks `0..=i` after training task `i`. The optional trace
/// keeps every per-epoch evaluation of each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trace: Option<Vec<Vec<f64>>>,
}

fn check_accuracy(v: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&v) {
        return Err(contract(format!("accuracy {v} outside [0, 100]")));
    }
    Ok(())
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(contract(format!("row {i} has {} entries, expected {}", row.len(), i + 1)));
            }
            row.iter().try_for_each(|&v| check_accuracy(v))?;
        }
        Ok(Self { rows, trace: None })
    }

    pub fn with_trace(mut self, trace: Vec<Vec<f64>>) -> Result<Self> {
        if trace.len() != self.rows.len() {
            return Err(contract(format!("trace covers {} tasks, matrix has {}", trace.len(), self.rows.len())));
        }
        trace.iter().flatten().try_for_each(|&v| check_accuracy(v))?;
        self.trace = Some(trace);
        Ok(self)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn trace(&self) -> Option<&[Vec<f64>]> {
        self.trace.as_deref()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn final_row(&self) -> &[f64] {
        self.rows.last().map_or(&[], |r| r.as_slice())
    }

    /// Mean accuracy over all tasks after the last one.
    pub fn final_average(&self) -> f64 {
        mean(self.final_row())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    /// `f_j` for the `T - 1` earlier tasks.
    pub per_task: Vec<f64>,
    pub mean: f64,
}

/// Peak past accuracy minus final accuracy for every task before the last.
/// The peak runs over the per-epoch trace when `use_max_trace` (falling back
/// to rows when the matrix has no trace), else over the task-boundary rows.
pub fn forgetting(a: &AccuracyMatrix, use_max_trace: bool) -> Result<Forgetting> {
    let t = a.tasks();
    if t < 2 {
        return Err(contract(format!("forgetting needs at least two tasks, got {t}")));
    }
    let last = &a.rows[t - 1];
    let per_task: Vec<f64> = (0..t - 1)
        .map(|j| {
            let boundary = (j..t).map(|i| a.rows[i][j]);
            let peak = match (use_max_trace, &a.trace) {
                (true, Some(trace)) => trace[j].iter().copied().chain(boundary).fold(f64::MIN, f64::max),
                _ => boundary.fold(f64::MIN, f64::max),
            };
            peak - last[j]
        })
        .collect();
    let mean = mean(&per_task);
    Ok(Forgetting { per_task, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityPlasticity {
    pub stability: f64,
    pub plasticity: f64,
    pub tradeoff: f64,
}

/// Harmonic mean `2SP / (S + P)`, zero when both vanish.
pub fn harmonic(s: f64, p: f64) -> f64 {
    if s + p == 0.0 {
        0.0
    } else {
        2.0 * s * p / (s + p)
    }
}

/// Stability from the final row over earlier tasks, plasticity from the
/// diagonal.
pub fn stability_plasticity(a: &AccuracyMatrix, agg: Aggregation) -> Result<StabilityPlasticity> {
    let t = a.tasks();
    if t < 2 {
        return Err(contract(format!("stability needs at least two tasks, got {t}")));
    }
    let old = &a.rows[t - 1][..t - 1];
    let diag: Vec<f64> = (0..t).map(|i| a.rows[i][i]).collect();
    let (stability, plasticity) = match agg {
        Aggregation::Mean => (mean(old), mean(&diag)),
        Aggregation::Sum => (old.iter().sum(), diag.iter().sum()),
    };
    Ok(StabilityPlasticity {
        stability,
        plasticity,
        tradeoff: harmonic(stability, plasticity),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    /// Largest softmax probability.
    pub confidence: f64,
    pub correct: bool,
    pub true_task: usize,
    /// Softmax mass summed over each task's classes.
    pub task_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationDump {
    pub records: Vec<CalibrationRecord>,
}

/// Sums each probability row over the classes of every task.
pub fn task_masses(probs: &[f64], class_map: &[usize], tasks: usize) -> Result<Vec<f64>> {
    if probs.len() > class_map.len() {
        return Err(contract(format!(
            "{} classes predicted but the class map covers {}",
            probs.len(),
            class_map.len()
        )));
    }
    let mut mass = vec![0.0; tasks];
    for (c, p) in probs.iter().enumerate() {
        let t = class_map[c];
        if t >= tasks {
            return Err(contract(format!("class {c} maps to task {t}, only {tasks} tasks")));
        }
        mass[t] += p;
    }
    Ok(mass)
}

impl CalibrationDump {
    /// Builds records from softmax rows, true labels and a class-to-task map.
    pub fn from_probabilities(probs: &[Vec<f64>], labels: &[usize], class_map: &[usize], tasks: usize) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(contract("one label per probability row is required"));
        }
        let records = probs
            .iter()
            .zip(labels)
            .map(|(p, &y)| {
                let (arg, &confidence) = p
                    .iter()
                    .enumerate()
                    .fold((0, &f64::MIN), |best, cur| if cur.1 > best.1 { cur } else { best });
                let true_task = *class_map
                    .get(y)
                    .ok_or_else(|| contract(format!("label {y} outside class map")))?;
                Ok(CalibrationRecord {
                    confidence,
                    correct: arg == y,
                    true_task,
                    task_mass: task_masses(p, class_map, tasks)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// Expected calibration error over `bins` equal-width bins `(k/B, (k+1)/B]`.
pub fn ece(dump: &CalibrationDump, bins: usize) -> Result<f64> {
    if bins == 0 || dump.records.is_empty() {
        return Err(contract("ece needs at least one bin and one record"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for r in &dump.records {
        if !(r.confidence > 0.0 && r.confidence <= 1.0) {
            return Err(contract(format!("confidence {} outside (0, 1]", r.confidence)));
        }
        let b = ((r.confidence * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += r.confidence;
        hits[b] += f64::from(u8::from(r.correct));
    }
    let n = dump.records.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let k = count[b] as f64;
            (k / n) * (hits[b] / k - conf[b] / k).abs()
        })
        .sum())
}

/// Mean per-task softmax mass over all samples.
pub fn recency_bias(probs: &[Vec<f64>], class_map: &[usize]) -> Result<Vec<f64>> {
    if probs.is_empty() {
        return Err(contract("recency bias needs at least one sample"));
    }
    let tasks = class_map.iter().max().map_or(0, |m| m + 1);
    let mut acc = vec![0.0; tasks];
    for p in probs {
        for (a, m) in acc.iter_mut().zip(task_masses(p, class_map, tasks)?) {
            *a += m;
        }
    }
    Ok(acc.into_iter().map(|a| a / probs.len() as f64).collect())
}

pub fn dump_recency(dump: &CalibrationDump) -> Result<Vec<f64>> {
    let first = dump.records.first().ok_or_else(|| contract("empty calibration dump"))?;
    let mut acc = vec![0.0; first.task_mass.len()];
    for r in &dump.records {
        for (a, m) in acc.iter_mut().zip(&r.task_mass) {
            *a += m;
        }
    }
    Ok(acc.into_iter().map(|a| a / dump.records.len() as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JlDistortionReport {
    pub source_dim: usize,
    pub target_dim: usize,
    pub epsilon: f64,
    pub points: usize,
    /// Pairs with distinct points.
    pub pairs: usize,
    /// Pairs skipped because the points coincide.
    pub coincident: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub violations: usize,
    pub fraction_outside: f64,
}

/// Smallest target width `ceil(4 ln n / (eps^2/2 - eps^3/3))`.
pub fn jl_bound_dim(epsilon: f64, n: usize) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) || n < 2 {
        return Err(contract("the bound needs 0 < epsilon < 1 and n >= 2"));
    }
    let denom = epsilon.powi(2) / 2.0 - epsilon.powi(3) / 3.0;
    Ok((4.0 * (n as f64).ln() / denom).ceil() as usize)
}

/// `D_h x D_g` matrix with entries drawn from `N(0, 1/D_g)`.
pub fn gaussian_map(source_dim: usize, target_dim: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let scale = 1.0 / (target_dim as f64).sqrt();
    let data = (0..source_dim * target_dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(source_dim, target_dim, data)
}

/// Ratios `|pM - qM|^2 / |p - q|^2` over all point pairs, checked against the
/// band `[1 - eps, 1 + eps]`.
pub fn jl_distortion(points: &Tensor, map: &Tensor, epsilon: f64) -> Result<JlDistortionReport> {
    let (n, dh) = points.dims()?;
    let (mh, dg) = map.dims()?;
    if mh != dh {
        return Err(contract(format!("map expects {mh} input dims, points have {dh}")));
    }
    if n < 2 {
        return Err(contract("distortion needs at least two points"));
    }
    let mapped = points.matmul(map)?;
    let sq = |t: &Tensor, i: usize, j: usize| -> f64 {
        t.row(i).iter().zip(t.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let mut report = JlDistortionReport {
        source_dim: dh,
        target_dim: dg,
        epsilon,
        points: n,
        pairs: 0,
        coincident: 0,
        min_ratio: f64::INFINITY,
        max_ratio: 0.0,
        violations: 0,
        fraction_outside: 0.0,
    };
    for i in 0..n {
        for j in i + 1..n {
            let before = sq(points, i, j);
            if before == 0.0 {
                report.coincident += 1;
                continue;
            }
            let r = sq(&mapped, i, j) / before;
            report.pairs += 1;
            report.min_ratio = report.min_ratio.min(r);
            report.max_ratio = report.max_ratio.max(r);
            if r < 1.0 - epsilon || r > 1.0 + epsilon {
                report.violations += 1;
            }
        }
    }
    if report.pairs > 0 {
        report.fraction_outside = report.violations as f64 / report.pairs as f64;
    }
    Ok(report)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let m = mean(values);
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (m, var.sqrt())
}

/// Scalar summaries of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub final_class_il: f64,
    pub final_task_il: f64,
    pub forgetting: Option<Forgetting>,
    pub forgetting_boundary: Option<Forgetting>,
    pub stability_plasticity: Option<StabilityPlasticity>,
    pub ece: Option<f64>,
    pub recency: Option<Vec<f64>>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One run's report. Holds no timestamps so reruns serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub scenario: String,
    pub config_hash: String,
    /// Fully resolved configuration of this run.
    pub config: serde_json::Value,
    pub class_il: AccuracyMatrix,
    pub task_il: AccuracyMatrix,
    /// Single evaluation row for pooled training, otherwise absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<Vec<f64>>,
    pub metrics: MetricSummary,
    pub deviations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self {
            mean,
            std,
            n: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: String,
    pub seeds: Vec<u64>,
    pub final_class_il: Stat,
    pub final_task_il: Stat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forgetting: Option<Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tradeoff: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub schema_version: u32,
    pub methods: Vec<MethodAggregate>,
}

/// Groups reports by method (first-seen order) and summarizes across seeds.
pub fn aggregate(reports: &[RunReport]) -> Aggregate {
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    let methods = order
        .into_iter()
        .map(|m| {
            let runs: Vec<&RunReport> = reports.iter().filter(|r| r.method == m).collect();
            let collect = |f: &dyn Fn(&RunReport) -> Option<f64>| -> Option<Stat> {
                let v: Option<Vec<f64>> = runs.iter().map(|r| f(r)).collect();
                v.map(|v| Stat::of(&v))
            };
            MethodAggregate {
                method: m.to_string(),
                seeds: runs.iter().map(|r| r.seed).collect(),
                final_class_il: Stat::of(&runs.iter().map(|r| r.metrics.final_class_il).collect::<Vec<_>>()),
                final_task_il: Stat::of(&runs.iter().map(|r| r.metrics.final_task_il).collect::<Vec<_>>()),
                forgetting: collect(&|r| r.metrics.forgetting.as_ref().map(|f| f.mean)),
                tradeoff: collect(&|r| r.metrics.stability_plasticity.map(|s| s.tradeoff)),
            }
        })
        .collect();
    Aggregate {
        schema_version: REPORT_SCHEMA_VERSION,
        methods,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn record(confidence: f64, correct: bool) -> CalibrationRecord {
        CalibrationRecord {
            confidence,
            correct,
            true_task: 0,
            task_mass: vec![1.0],
        }
    }

    #[test]
    fn forgetting_fixtures() {
        let a = AccuracyMatrix::new(vec![vec![80.0], vec![70.0, 90.0]]).unwrap();
        let f = forgetting(&a, false).unwrap();
        assert_eq!((f.per_task.clone(), f.mean), (vec![10.0], 10.0));
        let flat = AccuracyMatrix::new(vec![vec![50.0], vec![50.0, 60.0], vec![50.0, 60.0, 70.0]]).unwrap();
        assert_eq!(forgetting(&flat, true).unwrap().mean, 0.0);
        let rising = AccuracyMatrix::new(vec![vec![40.0], vec![60.0, 60.0]]).unwrap();
        assert_eq!(forgetting(&rising, false).unwrap().per_task, vec![0.0]);
        assert!(forgetting(&AccuracyMatrix::new(vec![vec![1.0]]).unwrap(), false).is_err());
    }

    #[test]
    fn trace_peak_between_boundaries() {
        let a = AccuracyMatrix::new(vec![vec![70.0], vec![60.0, 90.0]])
            .unwrap()
            .with_trace(vec![vec![50.0, 85.0, 70.0, 60.0], vec![80.0, 90.0]])
            .unwrap();
        assert_eq!(forgetting(&a, true).unwrap().mean, 25.0);
        assert_eq!(forgetting(&a, false).unwrap().mean, 10.0);
    }

    #[test]
    fn matrix_shape_is_checked() {
        assert!(AccuracyMatrix::new(vec![vec![1.0, 2.0]]).is_err());
        assert!(AccuracyMatrix::new(vec![vec![101.0]]).is_err());
    }

    #[test]
    fn tradeoff_fixtures() {
        assert_eq!(harmonic(50.0, 50.0), 50.0);
        assert_eq!(harmonic(40.0, 60.0), 48.0);
        assert_eq!(harmonic(0.0, 70.0), 0.0);
        assert_eq!(harmonic(0.0, 0.0), 0.0);
        let a = AccuracyMatrix::new(vec![vec![60.0], vec![40.0, 60.0]]).unwrap();
        let sp = stability_plasticity(&a, Aggregation::Mean).unwrap();
        assert_eq!((sp.stability, sp.plasticity, sp.tradeoff), (40.0, 60.0, 48.0));
        let sum = stability_plasticity(&a, Aggregation::Sum).unwrap();
        assert_eq!((sum.stability, sum.plasticity), (40.0, 120.0));
    }

    #[test]
    fn ece_fixtures() {
        let perfect = CalibrationDump {
            records: vec![record(1.0, true); 4],
        };
        assert_eq!(ece(&perfect, 15).unwrap(), 0.0);
        let mut records = vec![record(0.8, true); 3];
        records.extend(vec![record(0.8, false); 2]);
        let d = CalibrationDump { records };
        assert!((ece(&d, 1).unwrap() - 0.2).abs() < 1e-12);
        let mut twice = d.clone();
        twice.records.extend(d.records.clone());
        assert!((ece(&twice, 15).unwrap() - ece(&d, 15).unwrap()).abs() < 1e-12);
        assert!(ece(&CalibrationDump::default(), 15).is_err());
    }

    #[test]
    fn recency_fixtures() {
        let r = recency_bias(&[vec![0.7, 0.3], vec![0.1, 0.9]], &[0, 1]).unwrap();
        assert!((r[0] - 0.4).abs() < 1e-12 && (r[1] - 0.6).abs() < 1e-12);
        let uniform = vec![vec![0.25; 4]; 3];
        assert_eq!(recency_bias(&uniform, &[0, 0, 1, 1]).unwrap(), vec![0.5, 0.5]);
        let last = vec![vec![0.0, 0.0, 0.4, 0.6]; 2];
        assert_eq!(recency_bias(&last, &[0, 0, 1, 1]).unwrap(), vec![0.0, 1.0]);
        assert!(recency_bias(&[vec![0.5, 0.5, 0.0]], &[0, 1]).is_err());
    }

    #[test]
    fn dump_from_probabilities() {
        let probs = vec![vec![0.6, 0.3, 0.1, 0.0], vec![0.1, 0.1, 0.1, 0.7]];
        let d = CalibrationDump::from_probabilities(&probs, &[1, 3], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(d.records[0].confidence, 0.6);
        assert!(!d.records[0].correct && d.records[1].correct);
        assert_eq!(d.records[1].true_task, 1);
        let r = dump_recency(&d).unwrap();
        assert!((r[0] - 0.55).abs() < 1e-12);
        assert!(CalibrationDump::from_probabilities(&probs, &[1, 9], &[0, 0, 1, 1], 2).is_err());
    }

    #[test]
    fn jl_fixtures() {
        assert_eq!(jl_bound_dim(0.5, 100).unwrap(), 222);
        let mut rng = stream(3, Stream::Projection);
        let pts = gaussian_map(10, 5, &mut rng).unwrap();
        let id = jl_distortion(&pts, &Tensor::identity(5), 0.1).unwrap();
        assert_eq!((id.violations, id.pairs), (0, 45));
        assert!(id.min_ratio == 1.0 && id.max_ratio == 1.0);
        let double = Tensor::identity(5).map(|v| 2.0 * v);
        let r = jl_distortion(&pts, &double, 0.1).unwrap();
        assert!((r.min_ratio - 4.0).abs() < 1e-12 && (r.max_ratio - 4.0).abs() < 1e-12);
        assert_eq!(r.fraction_outside, 1.0);
        let dup = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = jl_distortion(&dup, &Tensor::identity(2), 0.1).unwrap();
        assert_eq!((r.coincident, r.pairs), (1, 2));
    }

    #[test]
    fn mean_std_fixture() {
        assert_eq!(mean_std(&[70.0, 72.0, 74.0]), (72.0, 2.0));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    fn random_matrix(t: usize, rng: &mut impl Rng) -> AccuracyMatrix {
        AccuracyMatrix::new((0..t).map(|i| (0..=i).map(|_| rng.random_range(0.0..=100.0)).collect()).collect())
            .unwrap()
    }

    proptest! {
        #[test]
        fn tradeoff_bounds(seed in any::<u64>(), t in 2usize..8) {
            let a = random_matrix(t, &mut stream(seed, Stream::Data));
            let sp = stability_plasticity(&a, Aggregation::Mean).unwrap();
            let (s, p, h) = (sp.stability, sp.plasticity, sp.tradeoff);
            prop_assert!(h <= s.max(p) + 1e-9);
            prop_assert!(h <= (2.0 * s).min(2.0 * p) + 1e-9);
        }

        #[test]
        fn boundary_peaked_protocols_agree(seed in any::<u64>(), t in 2usize..7) {
            let mut rng = stream(seed, Stream::Data);
            let a = random_matrix(t, &mut rng);
            // every epoch evaluation stays at or below the task's boundary peak
            let trace: Vec<Vec<f64>> = (0..t)
                .map(|j| {
                    let peak = (j..t).map(|i| a.get(i, j)).fold(0.0, f64::max);
                    (0..5).map(|_| rng.random_range(0.0..=peak)).collect()
                })
                .collect();
            let traced = a.clone().with_trace(trace).unwrap();
            prop_assert_eq!(forgetting(&traced, true).unwrap(), forgetting(&a, false).unwrap());
        }

        #[test]
        fn ece_permutation_invariant(seed in any::<u64>(), n in 1usize..60) {
            let mut rng = stream(seed, Stream::Data);
            let mut records: Vec<CalibrationRecord> = (0..n)
                .map(|_| record(1.0 - rng.random::<f64>(), rng.random_bool(0.5)))
                .collect();
            let before = ece(&CalibrationDump { records: records.clone() }, 15).unwrap();
            records.reverse();
            records.rotate_left(n / 3);
            let after = ece(&CalibrationDump { records }, 15).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
        }

        #[test]
        fn recency_is_a_distribution(seed in any::<u64>(), n in 1usize..20, k in 2usize..8) {
            let mut rng = stream(seed, Stream::Data);
            let probs: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect();
            let map: Vec<usize> = (0..k).map(|c| c / 2).collect();
            let r = recency_bias(&probs, &map).unwrap();
            prop_assert!(r.iter().all(|v| *v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
