//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Check at most this many coordinates per input (chosen at random);
    /// `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tol: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinate with the largest error and its (analytic, numeric) pair.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Pins a closure to the objective signature expected by [`grad_check`], so
/// closures that capture state still get a tape-generic signature.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = out.value();
    if value.numel() != 1 {
        return Err(TensorError::NonScalarLoss(value.shape().to_vec()));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Analytic gradients of the scalar `f` with respect to every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get_or_zeros(v)).collect())
}

fn coords_to_check(n: usize, cfg: &GradCheckConfig, input: usize) -> Vec<usize> {
    match cfg.max_coords {
        Some(m) if m < n => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ (input as u64).wrapping_mul(0x9e37_79b9));
            let mut idx = sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Compares supplied analytic gradients against central differences of `f`.
pub fn compare_with_numeric<F>(
    f: &F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut report = InputReport {
            index: i,
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        for j in coords_to_check(inputs[i].numel(), cfg, i) {
            let original = inputs[i].data()[j];
            probe[i].data_mut()[j] = original + cfg.step;
            let plus = eval_scalar(f, &probe)?;
            probe[i].data_mut()[j] = original - cfg.step;
            let minus = eval_scalar(f, &probe)?;
            probe[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((j, a, numeric));
                }
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tol: cfg.tol,
    })
}

/// Checks the tape gradient of the scalar-valued `f` against central
/// differences at `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if let Some(bad) = inputs.iter().position(|t| !t.all_finite()) {
        return Err(TensorError::NonFinite(format!("input {bad}")));
    }
    let analytic = analytic_gradients(&f, inputs)?;
    compare_with_numeric(&f, inputs, &analytic, cfg)
}
