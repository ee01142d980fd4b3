//! Independent checks for the loss module: central finite differences on the
//! logits and a naive scalar re-implementation of every formula.

mod reference;

pub use reference::reference_loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{evaluate_with_residual, 
    evaluate, ClassWeights, Family, FocalParams, FocalTverskyParams, LossSpec, UnifiedParams,
    Variant,
};
use crate::numerics::{one_hot, Labels, OneHotMask, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// `|a - n| / max(1e-8, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1e-8f64.max(analytic.abs()).max(numeric.abs())
}

/// Central-difference gradient of the loss value with respect to each logit.
pub fn finite_diff_grad(
    spec: &LossSpec,
    logits: &Tensor,
    truth: &OneHotMask,
    h: f64,
) -> Result<Tensor> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::invalid("h", format!("{h} outside [1e-7, 1e-3]")));
    }
    let mut probe = logits.clone();
    let mut out = vec![0.0; logits.len()];
    for (j, slot) in out.iter_mut().enumerate() {
        let x = logits.data()[j];
        probe.data_mut()[j] = x + h;
        let (up, up_r) = evaluate_with_residual(spec, &probe, truth)?;
        probe.data_mut()[j] = x - h;
        let (down, down_r) = evaluate_with_residual(spec, &probe, truth)?;
        probe.data_mut()[j] = x;
        *slot = ((up.value - down.value) + (up_r - down_r)) / (2.0 * h);
    }
    Ok(Tensor::from_parts_unchecked(logits.shape().to_vec(), out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradFailure {
    pub trial: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub family: Family,
    pub spec: LossSpec,
    pub shape: Vec<usize>,
    pub seed: u64,
    pub trials: usize,
    pub h: f64,
    pub tol: f64,
    pub max_rel_error: f64,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// RNG for trial `stream` of a run seeded with `seed`.
pub fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Logits uniform in [-3, 3] and uniformly random one-hot truth.
pub fn random_case(rng: &mut impl Rng, shape: &[usize]) -> Result<(Tensor, OneHotMask)> {
    let classes = *shape
        .last()
        .ok_or_else(|| Error::invalid("shape", "empty"))?;
    let len: usize = shape.iter().product();
    let logits = Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.random_range(-3.0..=3.0)).collect(),
    )?;
    let labels = Labels::new(
        shape[..shape.len() - 1].to_vec(),
        (0..len / classes).map(|_| rng.random_range(0..classes)).collect(),
    )?;
    Ok((logits, one_hot(&labels, classes)?))
}

/// Runs `trials` random gradient checks; deterministic given `seed`.
pub fn run_gradcheck(
    spec: &LossSpec,
    shape: &[usize],
    trials: usize,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    spec.validate()?;
    let per_trial: Vec<(f64, Vec<GradFailure>)> = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<_> {
            let mut rng = trial_rng(seed, trial as u64);
            let (logits, truth) = random_case(&mut rng, shape)?;
            let analytic = evaluate(spec, &logits, &truth)?.grad_logits;
            let numeric = finite_diff_grad(spec, &logits, &truth, h)?;
            let mut worst = 0.0f64;
            let mut failures = Vec::new();
            for (index, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
                let e = relative_error(a, n);
                worst = worst.max(e);
                if !(e < tol) {
                    failures.push(GradFailure {
                        trial,
                        index,
                        analytic: a,
                        numeric: n,
                    });
                }
            }
            Ok((worst, failures))
        })
        .collect::<Result<_>>()?;
    let max_rel_error = per_trial.iter().map(|t| t.0).fold(0.0, f64::max);
    let failures = per_trial.into_iter().flat_map(|t| t.1).collect();
    Ok(GradCheckReport {
        family: spec.family(),
        spec: spec.clone(),
        shape: shape.to_vec(),
        seed,
        trials,
        h,
        tol,
        max_rel_error,
        failures,
    })
}

/// A random valid configuration of `family` for property checks.
pub fn random_spec(family: Family, rng: &mut impl Rng) -> LossSpec {
    let mut unit = |lo: f64, hi: f64| rng.random_range(lo..=hi);
    match family {
        Family::Ce => LossSpec::Ce,
        Family::Dice => LossSpec::Dice,
        Family::Focal => LossSpec::focal(unit(0.1, 1.0), unit(0.0, 3.0)),
        Family::Tversky => LossSpec::tversky(unit(0.1, 0.9), unit(0.1, 0.9)),
        Family::FocalTversky => {
            LossSpec::focal_tversky(unit(0.1, 0.9), unit(0.1, 0.9), unit(0.5, 3.0))
        }
        Family::Combo => LossSpec::combo(unit(0.0, 1.0), unit(0.1, 0.9)),
        Family::HybridFocal => LossSpec::HybridFocal {
            lambda: unit(0.0, 1.0),
            focal: FocalParams {
                alpha: ClassWeights::Uniform(unit(0.1, 1.0)),
                gamma: unit(0.0, 3.0),
            },
            focal_tversky: FocalTverskyParams {
                alpha: unit(0.1, 0.9),
                beta: unit(0.1, 0.9),
                gamma: unit(0.5, 3.0),
            },
        },
        Family::UnifiedFocalSym | Family::UnifiedFocalAsym => {
            let variant = if family == Family::UnifiedFocalSym {
                Variant::Sym
            } else {
                Variant::Asym
            };
            LossSpec::UnifiedFocal(UnifiedParams::new(
                variant,
                unit(0.0, 1.0),
                unit(0.1, 0.9),
                unit(0.0, 0.9),
            ))
        }
    }
}
