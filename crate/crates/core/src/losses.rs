//! Loss terms of the rehearsal objective: cross-entropy replay, supervised
//! contrastive, EMA consistency, and Gram-matrix classifier regularization.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Tolerance on row norms accepted by the unit-hypersphere losses.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Supervised contrastive weight.
    pub alpha: f64,
    /// Gram alignment weight.
    pub beta: f64,
    /// Consistency weight.
    pub lambda: f64,
    /// Contrastive temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    0.5
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
            tau: default_tau(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.lambda];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(contract(format!(
                "loss weights must be finite and non-negative, got alpha={} beta={} lambda={}",
                self.alpha, self.beta, self.lambda
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(contract(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// What the consistency terms compare on the classifier side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TeacherTargets {
    #[default]
    Logits,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub er: f64,
    pub rep: f64,
    pub ecr: f64,
    pub cr_g: f64,
    pub cr_h: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted total `er + alpha*rep + beta*ecr + lambda*(cr_g + cr_h)`, with
    /// the consistency pair dropped while the buffer is empty.
    pub fn compose(
        er: f64,
        rep: f64,
        ecr: f64,
        cr_g: f64,
        cr_h: f64,
        weights: &LossWeights,
        buffer_nonempty: bool,
    ) -> Result<Self> {
        weights.validate()?;
        let (cr_g, cr_h) = if buffer_nonempty { (cr_g, cr_h) } else { (0.0, 0.0) };
        let total = er + weights.alpha * rep + weights.beta * ecr + weights.lambda * (cr_g + cr_h);
        Ok(Self {
            er,
            rep,
            ecr,
            cr_g,
            cr_h,
            total,
        })
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: Option<usize>) -> Result<()> {
    if labels.len() != rows {
        return Err(contract(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(k) = classes {
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(contract(format!("label {bad} out of range 0..{k}")));
        }
    }
    Ok(())
}

fn check_unit_rows<T: Real>(tape: &Tape<T>, m: Var, what: &str) -> Result<()> {
    tape.with_value(m, |t| {
        let (r, _) = t.dims()?;
        for i in 0..r {
            let n = t.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(contract(format!("{what}: row {i} has norm {n}, expected 1")));
            }
        }
        Ok(())
    })
}

/// Mean cross-entropy of softmax(logits) against integer labels.
pub fn er_loss<T: Real>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = tape.with_value(logits, |t| t.dims())?;
    check_labels(labels, b, Some(k))?;
    let mut onehot = Tensor::<T>::zeros(b, k);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * k + y] = T::one();
    }
    let log_probs = tape.log_softmax_rows(logits)?;
    let mask = tape.constant(onehot);
    let picked = tape.mul(log_probs, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Supervised contrastive loss over unit rows `z`, summed over anchors. For
/// anchor `i` the positives are the other rows sharing its label and the
/// denominator runs over every other row; anchors without positives add 0.
pub fn supcon_loss<T: Real>(tape: &Tape<T>, z: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let (n, _) = tape.with_value(z, |t| t.dims())?;
    check_labels(labels, n, None)?;
    if n < 2 {
        return Err(contract("contrastive batch needs at least two rows"));
    }
    if !(tau > 0.0) {
        return Err(contract(format!("temperature must be positive, got {tau}")));
    }
    check_unit_rows(tape, z, "supcon")?;

    let mut pos_weight = Tensor::<T>::zeros(n, n);
    let mut has_pos = Tensor::<T>::zeros(n, 1);
    let mut others = vec![true; n * n];
    for i in 0..n {
        others[i * n + i] = false;
        let count = (0..n).filter(|&p| p != i && labels[p] == labels[i]).count();
        if count == 0 {
            continue;
        }
        has_pos.data_mut()[i] = T::one();
        let w = T::lit(1.0 / count as f64);
        for p in (0..n).filter(|&p| p != i && labels[p] == labels[i]) {
            pos_weight.data_mut()[i * n + p] = w;
        }
    }

    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let lse = tape.logsumexp_rows(logits, Some(others))?;

    let w = tape.constant(pos_weight);
    let weighted = tape.mul(logits, w)?;
    let attract = tape.sum(weighted)?;
    let a = tape.constant(has_pos);
    let norm = tape.mul(lse, a)?;
    let repel = tape.sum(norm)?;
    tape.sub(repel, attract)
}

/// Batch means of the squared distances between student and (detached)
/// teacher responses: `(classifier term, projection term)`.
pub fn consistency_losses<T: Real>(
    tape: &Tape<T>,
    logits: Var,
    z: Var,
    teacher_logits: Var,
    teacher_z: Var,
    targets: TeacherTargets,
) -> Result<(Var, Var)> {
    let pair = |a: Var, b: Var, op: &'static str| -> Result<(Var, Var)> {
        let (sa, sb) = (tape.shape(a), tape.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok((a, tape.stop_gradient(b)?))
    };
    let (mut y, mut ye) = pair(logits, teacher_logits, "consistency_g")?;
    let (z, ze) = pair(z, teacher_z, "consistency_h")?;
    if targets == TeacherTargets::Softmax {
        y = tape.softmax_rows(y)?;
        ye = tape.softmax_rows(ye)?;
    }
    let mean_sq = |a: Var, b: Var| -> Result<Var> {
        let rows = tape.shape(a)[0];
        let d = tape.sub(a, b)?;
        let s = tape.frobenius_sq(d)?;
        tape.scale(s, 1.0 / rows as f64)
    };
    Ok((mean_sq(y, ye)?, mean_sq(z, ze)?))
}

/// `M Mᵀ` for unit rows `M`.
pub fn gram<T: Real>(tape: &Tape<T>, m: Var) -> Result<Var> {
    check_unit_rows(tape, m, "gram")?;
    let mt = tape.transpose(m)?;
    tape.matmul(m, mt)
}

/// Mean elementwise squared difference between the projection-head Gram
/// matrix (gradient stopped) and the classifier-projection Gram matrix.
pub fn ecr_loss<T: Real>(tape: &Tape<T>, z: Var, c: Var) -> Result<Var> {
    let (bz, bc) = (tape.shape(z)[0], tape.shape(c)[0]);
    if bz != bc {
        return Err(contract(format!("ecr needs equal row counts, got {bz} and {bc}")));
    }
    let gh = gram(tape, z)?;
    let gh = tape.stop_gradient(gh)?;
    let gg = gram(tape, c)?;
    let d = tape.sub(gh, gg)?;
    let s = tape.frobenius_sq(d)?;
    tape.scale(s, 1.0 / (bz * bz) as f64)
}

/// Loss term handles; consistency terms are absent when no buffer batch was
/// drawn.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub er: Var,
    pub rep: Option<Var>,
    pub ecr: Option<Var>,
    pub consistency: Option<(Var, Var)>,
}

/// Records the weighted objective on the tape and returns it with the
/// per-term values.
pub fn total_loss<T: Real>(
    tape: &Tape<T>,
    terms: LossTerms,
    weights: &LossWeights,
    buffer_nonempty: bool,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let value = |v: Option<Var>| -> Result<f64> {
        v.map_or(Ok(0.0), |v| tape.scalar(v).map(Real::as_f64))
    };
    let mut total = terms.er;
    if let Some(rep) = terms.rep {
        let s = tape.scale(rep, weights.alpha)?;
        total = tape.add(total, s)?;
    }
    if let Some(ecr) = terms.ecr {
        let s = tape.scale(ecr, weights.beta)?;
        total = tape.add(total, s)?;
    }
    let consistency = terms.consistency.filter(|_| buffer_nonempty);
    if let Some((g, h)) = consistency {
        let both = tape.add(g, h)?;
        let s = tape.scale(both, weights.lambda)?;
        total = tape.add(total, s)?;
    }
    let breakdown = LossBreakdown {
        er: value(Some(terms.er))?,
        rep: value(terms.rep)?,
        ecr: value(terms.ecr)?,
        cr_g: value(consistency.map(|c| c.0))?,
        cr_h: value(consistency.map(|c| c.1))?,
        total: tape.scalar(total)?.as_f64(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn er_value(logits: &[&[f64]], labels: &[usize]) -> f64 {
        let tape = Tape::<f64>::new();
        let l = tape.constant(t(logits));
        tape.scalar(er_loss(&tape, l, labels).unwrap()).unwrap()
    }

    fn supcon_value(z: &Tensor, labels: &[usize], tau: f64) -> f64 {
        let tape = Tape::<f64>::new();
        let zv = tape.constant(z.clone());
        tape.scalar(supcon_loss(&tape, zv, labels, tau).unwrap()).unwrap()
    }

    /// Per-anchor double loop straight from the definition.
    fn supcon_oracle(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let n = z.len();
        let mut loss = 0.0;
        for i in 0..n {
            let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if positives.is_empty() {
                continue;
            }
            let mut denom = 0.0;
            for k in 0..n {
                if k != i {
                    denom += (dot(&z[i], &z[k]) / tau).exp();
                }
            }
            let mut inner = 0.0;
            for &p in &positives {
                inner += dot(&z[i], &z[p]) / tau - denom.ln();
            }
            loss += -inner / positives.len() as f64;
        }
        loss
    }

    fn random_unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    /// Random orthogonal matrix by Gram-Schmidt on a random square matrix.
    fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Tensor {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        Tensor::from_rows(&basis).unwrap()
    }

    #[test]
    fn er_fixtures() {
        assert!((er_value(&[&[0.0, 0.0]], &[0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(er_value(&[&[50.0, 0.0]], &[0]) < 1e-20);
        let oracle = -((3.0f64).exp() / (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp())).ln();
        assert!((oracle - 0.407606).abs() < 1e-6);
        assert!((er_value(&[&[1.0, 2.0, 3.0]], &[2]) - oracle).abs() < 1e-12);
    }

    #[test]
    fn er_rejects_out_of_range_label() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(t(&[&[0.0, 1.0]]));
        assert!(matches!(er_loss(&tape, l, &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn supcon_identical_pair_is_zero() {
        let z = t(&[&[0.6, 0.8], &[0.6, 0.8]]);
        assert!(supcon_value(&z, &[3, 3], 0.5).abs() < 1e-15);
    }

    #[test]
    fn supcon_two_cluster_fixture() {
        let z = t(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let labels = [0, 0, 1, 1];
        let expected = 4.0 * ((std::f64::consts::E + 2.0).ln() - 1.0);
        assert!((expected - 2.2058).abs() < 5e-5);
        let oracle = supcon_oracle(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]], &labels, 1.0);
        assert!((oracle - expected).abs() < 1e-12);
        assert!((supcon_value(&z, &labels, 1.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn supcon_contracts() {
        let tape = Tape::<f64>::new();
        let one = tape.constant(t(&[&[1.0, 0.0]]));
        assert!(supcon_loss(&tape, one, &[0], 0.5).is_err());
        let loose = tape.constant(t(&[&[1.0, 0.1], &[0.0, 1.0]]));
        assert!(supcon_loss(&tape, loose, &[0, 0], 0.5).is_err());
    }

    #[test]
    fn supcon_without_positives_is_zero() {
        let z = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(supcon_value(&z, &[0, 1], 0.5), 0.0);
    }

    #[test]
    fn consistency_fixtures() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(t(&[&[1.0, 0.0]]));
        let ye = tape.constant(t(&[&[0.0, 1.0]]));
        let z = tape.constant(t(&[&[0.6, 0.8]]));
        let (g, h) = consistency_losses(&tape, y, z, ye, z, TeacherTargets::Logits).unwrap();
        assert_eq!(tape.scalar(g).unwrap(), 2.0);
        assert_eq!(tape.scalar(h).unwrap(), 0.0);
        let (g, _) = consistency_losses(&tape, y, z, y, z, TeacherTargets::Logits).unwrap();
        assert_eq!(tape.scalar(g).unwrap(), 0.0);
        let bad = tape.constant(t(&[&[0.0, 1.0, 2.0]]));
        assert!(consistency_losses(&tape, y, z, bad, z, TeacherTargets::Logits).is_err());
    }

    #[test]
    fn consistency_is_duplication_invariant() {
        let tape = Tape::<f64>::new();
        let y = t(&[&[1.0, -2.0], &[0.5, 0.0]]);
        let ye = t(&[&[0.0, 1.0], &[2.0, 2.0]]);
        let dup = |m: &Tensor| {
            let mut rows: Vec<Vec<f64>> = (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
            rows.extend(rows.clone());
            Tensor::from_rows(&rows).unwrap()
        };
        let eval = |a: Tensor, b: Tensor| {
            let (a, b) = (tape.constant(a), tape.constant(b));
            let (g, h) = consistency_losses(&tape, a, a, b, b, TeacherTargets::Softmax).unwrap();
            (tape.scalar(g).unwrap(), tape.scalar(h).unwrap())
        };
        let once = eval(y.clone(), ye.clone());
        let twice = eval(dup(&y), dup(&ye));
        assert!((once.0 - twice.0).abs() < 1e-15 && (once.1 - twice.1).abs() < 1e-15);
    }

    #[test]
    fn gram_fixtures() {
        let tape = Tape::<f64>::new();
        let g = |m: Tensor| tape.value(gram(&tape, tape.constant(m)).unwrap());
        assert_eq!(g(Tensor::identity(3)), Tensor::identity(3));
        assert_eq!(g(t(&[&[1.0, 0.0], &[1.0, 0.0]])), t(&[&[1.0, 1.0], &[1.0, 1.0]]));
        let v = g(t(&[&[1.0, 0.0], &[0.6, 0.8]]));
        assert!(v.max_abs_diff(&t(&[&[1.0, 0.6], &[0.6, 1.0]])) < 1e-15);
    }

    #[test]
    fn ecr_fixtures() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = tape.constant(t(&[&[1.0, 0.0], &[1.0, 0.0]]));
        let v = tape.scalar(ecr_loss(&tape, z, c).unwrap()).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert_eq!(tape.scalar(ecr_loss(&tape, z, z).unwrap()).unwrap(), 0.0);
        let three = tape.constant(Tensor::identity(3));
        assert!(ecr_loss(&tape, z, three).is_err());
    }

    #[test]
    fn ecr_routes_gradient_only_through_classifier_side() {
        let tape = Tape::<f64>::new();
        let mut rng = stream(4, Stream::Data);
        let zr = random_unit_rows(4, 3, &mut rng);
        let cr = random_unit_rows(4, 2, &mut rng);
        let z = tape.param(Tensor::from_rows(&zr).unwrap());
        let c = tape.param(Tensor::from_rows(&cr).unwrap());
        let loss = ecr_loss(&tape, z, c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(z).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get(c).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn compose_matches_fixture() {
        let w = LossWeights {
            alpha: 0.1,
            beta: 0.3,
            lambda: 0.15,
            tau: 0.5,
        };
        let b = LossBreakdown::compose(1.0, 2.0, 3.0, 0.4, 0.6, &w, true).unwrap();
        assert!((b.total - 2.25).abs() < 1e-12);
        let b = LossBreakdown::compose(1.0, 2.0, 3.0, 0.4, 0.6, &w, false).unwrap();
        assert!((b.total - 2.1).abs() < 1e-12);
        assert_eq!((b.cr_g, b.cr_h), (0.0, 0.0));
        let zero = LossWeights::default();
        let b = LossBreakdown::compose(1.7, 2.0, 3.0, 0.4, 0.6, &zero, true).unwrap();
        assert_eq!(b.total, 1.7);
        let neg = LossWeights { alpha: -0.1, ..w };
        assert!(LossBreakdown::compose(1.0, 0.0, 0.0, 0.0, 0.0, &neg, true).is_err());
    }

    #[test]
    fn tape_total_matches_compose() {
        let tape = Tape::<f64>::new();
        let s = |v: f64| tape.constant(Tensor::scalar(v));
        let w = LossWeights {
            alpha: 0.1,
            beta: 0.3,
            lambda: 0.15,
            tau: 0.5,
        };
        let terms = LossTerms {
            er: s(1.0),
            rep: Some(s(2.0)),
            ecr: Some(s(3.0)),
            consistency: Some((s(0.4), s(0.6))),
        };
        let (_, b) = total_loss(&tape, terms, &w, true).unwrap();
        let c = LossBreakdown::compose(1.0, 2.0, 3.0, 0.4, 0.6, &w, true).unwrap();
        assert!((b.total - c.total).abs() < 1e-10);
        let (_, b) = total_loss(&tape, terms, &w, false).unwrap();
        assert_eq!((b.cr_g, b.cr_h), (0.0, 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn supcon_matches_oracle(seed in any::<u64>(), n in 2usize..=8, d in 2usize..6, classes in 1usize..4) {
            let mut rng = stream(seed, Stream::Data);
            let rows = random_unit_rows(n, d, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let tau = rng.random_range(0.1..1.0);
            let fast = supcon_value(&Tensor::from_rows(&rows).unwrap(), &labels, tau);
            let slow = supcon_oracle(&rows, &labels, tau);
            prop_assert!((fast - slow).abs() < 1e-10, "{} vs {}", fast, slow);
        }

        #[test]
        fn supcon_rotation_invariant(seed in any::<u64>(), n in 2usize..=8) {
            let mut rng = stream(seed, Stream::Data);
            let rows = random_unit_rows(n, 4, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let z = Tensor::from_rows(&rows).unwrap();
            let q = random_orthogonal(4, &mut rng);
            let rotated = z.matmul(&q).unwrap();
            let a = supcon_value(&z, &labels, 0.5);
            let b = supcon_value(&rotated, &labels, 0.5);
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn ecr_invariant_under_orthogonal_maps(seed in any::<u64>(), n in 2usize..=8) {
            let mut rng = stream(seed, Stream::Data);
            let z = Tensor::from_rows(&random_unit_rows(n, 5, &mut rng)).unwrap();
            let c = Tensor::from_rows(&random_unit_rows(n, 3, &mut rng)).unwrap();
            let q1 = random_orthogonal(5, &mut rng);
            let q2 = random_orthogonal(3, &mut rng);
            let eval = |z: &Tensor, c: &Tensor| {
                let tape = Tape::<f64>::new();
                let (z, c) = (tape.constant(z.clone()), tape.constant(c.clone()));
                tape.scalar(ecr_loss(&tape, z, c).unwrap()).unwrap()
            };
            let base = eval(&z, &c);
            let moved = eval(&z.matmul(&q1).unwrap(), &c.matmul(&q2).unwrap());
            prop_assert!((base - moved).abs() < 1e-10);
        }

        #[test]
        fn er_decreases_with_correct_logit(logits in proptest::collection::vec(-5.0f64..5.0, 2..6), bump in 0.01f64..3.0) {
            let y = 0;
            let before = er_value(&[&logits], &[y]);
            let mut raised = logits.clone();
            raised[y] += bump;
            let after = er_value(&[&raised], &[y]);
            prop_assert!(after < before);
        }
    }
}
