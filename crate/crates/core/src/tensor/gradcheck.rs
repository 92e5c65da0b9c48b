//! Central finite-difference gradient checking.

use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub max_relative_error: f64,
    pub per_parameter_errors: Vec<(String, f64)>,
    pub passed: bool,
}

/// Compares reverse-mode gradients against `(f(θ+h) - f(θ-h)) / 2h` for every
/// coordinate of every parameter, using the relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub tolerance: f64,
    pub step: f64,
    sign_flip: Option<OpKind>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self::new(1e-4, 1e-4)
    }
}

impl GradCheck {
    pub fn new(tolerance: f64, step: f64) -> Self {
        Self {
            tolerance,
            step,
            sign_flip: None,
        }
    }

    /// Runs the analytic pass with the backward rule of `kind` negated.
    pub fn with_sign_flip(mut self, kind: Option<OpKind>) -> Self {
        self.sign_flip = kind;
        self
    }

    pub fn run<F>(&self, f: F, params: &[(String, Tensor<f64>)]) -> Result<GradCheckResult>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        if !(self.step > 0.0) {
            return Err(Error::invalid("grad_check", "step must be positive"));
        }
        let mut tape = Tape::new();
        if let Some(kind) = self.sign_flip {
            tape.inject_sign_flip(kind);
        }
        let vars: Vec<Var> = params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let loss = f(&mut tape, &vars)?;
        scalar_value(&tape, loss)?;
        tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).expect("leaf gradient").to_vec())
            .collect();
        drop(tape);

        let eval = |values: &[(String, Tensor<f64>)]| -> Result<f64> {
            let mut t = Tape::new();
            let vars: Vec<Var> = values.iter().map(|(_, v)| t.constant(v.clone())).collect();
            let out = f(&mut t, &vars)?;
            scalar_value(&t, out)
        };

        let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
        let mut per_parameter_errors = Vec::with_capacity(params.len());
        let mut max_relative_error: f64 = 0.0;
        for (p, grads) in analytic.iter().enumerate() {
            let mut worst: f64 = 0.0;
            for (j, &a) in grads.iter().enumerate() {
                let orig = work[p].1.data()[j];
                work[p].1.data_mut()[j] = orig + self.step;
                let plus = eval(&work)?;
                work[p].1.data_mut()[j] = orig - self.step;
                let minus = eval(&work)?;
                work[p].1.data_mut()[j] = orig;
                let n = (plus - minus) / (2.0 * self.step);
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                worst = worst.max(rel);
            }
            max_relative_error = max_relative_error.max(worst);
            per_parameter_errors.push((params[p].0.clone(), worst));
        }
        Ok(GradCheckResult {
            max_relative_error,
            per_parameter_errors,
            passed: max_relative_error < self.tolerance,
        })
    }
}

fn scalar_value(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function output must be scalar, got shape {:?}", t.shape()),
        ));
    }
    Ok(t.data()[0])
}

/// [`GradCheck::run`] with the given tolerance and step.
pub fn grad_check<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    tolerance: f64,
    step: f64,
) -> Result<GradCheckResult>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    GradCheck::new(tolerance, step).run(f, params)
}
