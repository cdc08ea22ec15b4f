//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
/// so that gradients near zero are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct FlaggedEntry {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_relative_error: Vec<f64>,
    pub flagged: Vec<FlaggedEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.max_relative_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` gradients against central differences of `value`
/// taken around `leaves` with step `h`.
pub fn compare_gradients<F>(
    value: F,
    analytic: &[Tensor<f64>],
    leaves: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(contract(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.len() != leaves.len() {
        return Err(contract("one analytic gradient per leaf is required"));
    }
    let mut report = GradCheckReport {
        tolerance: tol,
        ..Default::default()
    };
    let mut probe = leaves.to_vec();
    for (leaf, grad) in analytic.iter().enumerate() {
        if grad.shape() != leaves[leaf].shape() {
            return Err(Error::Shape {
                op: "grad_check",
                left: grad.shape().to_vec(),
                right: leaves[leaf].shape().to_vec(),
            });
        }
        let mut worst = 0.0f64;
        for index in 0..leaves[leaf].numel() {
            let base = leaves[leaf].data()[index];
            probe[leaf].data_mut()[index] = base + h;
            let plus = value(&probe)?;
            probe[leaf].data_mut()[index] = base - h;
            let minus = value(&probe)?;
            probe[leaf].data_mut()[index] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[index];
            let err = relative_error(a, numeric);
            worst = worst.max(err);
            if !(err <= tol) {
                report.flagged.push(FlaggedEntry {
                    leaf,
                    index,
                    analytic: a,
                    numeric,
                    relative_error: err,
                });
            }
        }
        report.max_relative_error.push(worst);
    }
    Ok(report)
}

/// Builds the scalar graph with `build` on fresh double-precision tapes and
/// checks its backpropagated gradients against central finite differences.
pub fn grad_check<F>(build: F, leaves: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let evaluate = |inputs: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), with_grad)).collect();
        let root = build(&tape, &vars)?;
        let v = tape.scalar(root)?;
        if !with_grad {
            return Ok((v, Vec::new()));
        }
        let grads = tape.backward(root)?;
        let per_leaf = vars
            .iter()
            .zip(inputs)
            .map(|(var, t)| {
                grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| t.map(|_| 0.0))
            })
            .collect();
        Ok((v, per_leaf))
    };
    let (first, analytic) = evaluate(leaves, true)?;
    let (second, _) = evaluate(leaves, false)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }
    compare_gradients(|x| evaluate(x, false).map(|r| r.0), &analytic, leaves, h, tol)
}
