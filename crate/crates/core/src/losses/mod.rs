//! Forward values and analytic gradients for the whole loss hierarchy, from
//! cross entropy through the Unified Focal loss.
//!
//! Every family compiles to at most three weighted components:
//!
//! - a pixel component, the mean over elements of `w_c (1 - p_t)^e_c (-ln p_t)`;
//! - a region component, `Σ_c (1 - TI_c)^k_c` over per-class Tversky indices;
//! - a micro-averaged soft DSC (Combo only).
//!
//! [`evaluate`] runs softmax, clips at [`CLIP_EPS`], evaluates the components
//! and pulls `dL/dp` back through the clip and the softmax Jacobian, so
//! gradients are always with respect to logits.
//!
//! Conventions worth knowing when comparing against other implementations:
//! the modified Tversky index weights false negatives by δ and false positives
//! by 1 − δ (switchable with `delta_convention`); the symmetric modified Focal
//! term raises `1 - p_t` to γ and the modified Focal Tversky term raises
//! `1 - mTI` to `1 - γ`, so γ = 0 recovers δ-weighted cross entropy and a
//! Tversky loss respectively; the asymmetric Focal term uses each class's own
//! `p_t` inside the logarithm.

mod pixel;
mod region;
pub mod spec;

use serde::{Deserialize, Serialize};

pub use region::{tversky_index, SoftConfusion, SMOOTH};
pub use spec::{
    preset, presets, ClassWeights, DeltaConvention, Family, FocalParams, FocalTverskyParams,
    LossSpec, Preset, TverskyParams, UnifiedParams, Variant, BENCH_PRESETS,
};

use crate::error::{Error, Result};
use crate::numerics::{softmax, CompensatedSum, OneHotMask, ProbTensor, Tensor, CLIP_EPS};
use pixel::{pixel_loss, PixelTerm};
use region::{micro_dice, region_loss, RegionTerm};

/// Loss value with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub value: f64,
    pub grad_logits: Tensor,
    /// Per-class terms of the region component, unweighted by λ.
    pub per_class_terms: Option<Vec<f64>>,
    /// Per-true-class partial sums of the pixel component, unweighted by λ.
    pub pixel_class_terms: Option<Vec<f64>>,
}

/// Components of a loss after resolving its hyperparameters for `classes`.
struct Plan {
    pixel: Option<(f64, Vec<PixelTerm>)>,
    region: Option<(f64, Vec<RegionTerm>)>,
    dice: Option<f64>,
}

impl Plan {
    fn compile(spec: &LossSpec, classes: usize) -> Self {
        let per_class = |f: &dyn Fn(usize) -> PixelTerm| (0..classes).map(f).collect::<Vec<_>>();
        let tversky = |a: f64, b: f64, k: f64| {
            vec![
                RegionTerm {
                    fp_weight: a,
                    fn_weight: b,
                    exponent: k,
                };
                classes
            ]
        };
        let focal_terms = |f: &FocalParams| {
            per_class(&|c| PixelTerm {
                weight: f.alpha.get(c),
                exponent: f.gamma,
            })
        };
        match spec {
            LossSpec::Ce => Plan {
                pixel: Some((1.0, vec![PixelTerm::CE; classes])),
                region: None,
                dice: None,
            },
            LossSpec::Focal(f) => Plan {
                pixel: Some((1.0, focal_terms(f))),
                region: None,
                dice: None,
            },
            LossSpec::Dice => Plan {
                pixel: None,
                region: Some((1.0, tversky(0.5, 0.5, 1.0))),
                dice: None,
            },
            LossSpec::Tversky(t) => Plan {
                pixel: None,
                region: Some((1.0, tversky(t.alpha, t.beta, 1.0))),
                dice: None,
            },
            LossSpec::FocalTversky(ft) => Plan {
                pixel: None,
                region: Some((1.0, tversky(ft.alpha, ft.beta, 1.0 / ft.gamma))),
                dice: None,
            },
            LossSpec::Combo { alpha, beta } => Plan {
                pixel: nonzero(
                    *alpha,
                    per_class(&|c| PixelTerm {
                        weight: if c == 0 { 1.0 - beta } else { *beta },
                        exponent: 0.0,
                    }),
                ),
                region: None,
                dice: Some(-(1.0 - alpha)).filter(|&k| k != 0.0),
            },
            LossSpec::HybridFocal {
                lambda,
                focal,
                focal_tversky: ft,
            } => Plan {
                pixel: nonzero(*lambda, focal_terms(focal)),
                region: nonzero(
                    1.0 - lambda,
                    tversky(ft.alpha, ft.beta, 1.0 / ft.gamma),
                ),
                dice: None,
            },
            LossSpec::UnifiedFocal(u) => {
                let (fp_w, fn_w) = u.mti_weights();
                let pixel = per_class(&|c| {
                    let rare = u.is_rare(c);
                    PixelTerm {
                        weight: if rare { u.delta } else { 1.0 - u.delta },
                        exponent: match (u.variant, rare) {
                            (Variant::Asym, true) => 0.0,
                            _ => u.gamma,
                        },
                    }
                });
                let region = (0..classes)
                    .map(|c| RegionTerm {
                        fp_weight: fp_w,
                        fn_weight: fn_w,
                        exponent: match (u.variant, u.is_rare(c)) {
                            (Variant::Asym, false) => 1.0,
                            _ => 1.0 - u.gamma,
                        },
                    })
                    .collect();
                Plan {
                    pixel: nonzero(u.lambda, pixel),
                    region: nonzero(1.0 - u.lambda, region),
                    dice: None,
                }
            }
        }
    }

    /// Value of the loss on (already clipped) probabilities; adds `dL/dp` into `grad`.
    fn run(&self, p: &[f64], g: &[f64], classes: usize, grad: &mut [f64]) -> Evaluated {
        let mut value = CompensatedSum::default();
        let mut out = Evaluated::default();
        if let Some((k, terms)) = &self.pixel {
            let ((v, r), per_class) = pixel_loss(p, g, classes, terms, *k, grad);
            value.add_scaled(*k, v);
            value.add(k * r);
            out.pixel_class_terms = Some(per_class);
        }
        if let Some((k, terms)) = &self.region {
            let (v, per_class) = region_loss(p, g, classes, terms, *k, grad);
            value.add_scaled(*k, v);
            out.per_class_terms = Some(per_class);
        }
        if let Some(k) = self.dice {
            value.add_scaled(k, micro_dice(p, g, k, grad));
        }
        (out.value, out.residual) = value.split();
        out
    }
}

fn nonzero<T>(k: f64, terms: T) -> Option<(f64, T)> {
    (k != 0.0).then_some((k, terms))
}

#[derive(Default)]
struct Evaluated {
    value: f64,
    /// Rounding error of `value`; lets finite differences resolve changes
    /// smaller than one ulp of the loss.
    residual: f64,
    per_class_terms: Option<Vec<f64>>,
    pixel_class_terms: Option<Vec<f64>>,
}

fn check_shapes(a: &[usize], truth: &OneHotMask) -> Result<()> {
    if a != truth.shape() {
        return Err(Error::Shape {
            expected: truth.shape().to_vec(),
            found: a.to_vec(),
        });
    }
    Ok(())
}

/// Loss value and gradient with respect to `logits`.
pub fn evaluate(spec: &LossSpec, logits: &Tensor, truth: &OneHotMask) -> Result<LossOutput> {
    Ok(evaluate_with_residual(spec, logits, truth)?.0)
}

/// [`evaluate`] plus the rounding error of the value.
pub(crate) fn evaluate_with_residual(
    spec: &LossSpec,
    logits: &Tensor,
    truth: &OneHotMask,
) -> Result<(LossOutput, f64)> {
    check_shapes(logits.shape(), truth)?;
    spec.validate()?;
    let classes = truth.classes();
    spec.validate_for_classes(classes)?;

    let probs = softmax(logits)?;
    let p = probs.data();
    let clipped: Vec<f64> = p.iter().map(|v| v.clamp(CLIP_EPS, 1.0 - CLIP_EPS)).collect();
    let mut dp = vec![0.0; p.len()];
    let ev = Plan::compile(spec, classes).run(&clipped, truth.data(), classes, &mut dp);

    // Clip derivative, then the softmax Jacobian row by row.
    for (d, &pv) in dp.iter_mut().zip(p) {
        if !(CLIP_EPS..=1.0 - CLIP_EPS).contains(&pv) {
            *d = 0.0;
        }
    }
    let mut grad = vec![0.0; p.len()];
    for ((gr, pr), dr) in grad
        .chunks_exact_mut(classes)
        .zip(p.chunks_exact(classes))
        .zip(dp.chunks_exact(classes))
    {
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for c in 0..classes {
            gr[c] = pr[c] * (dr[c] - dot);
        }
    }
    if !ev.value.is_finite() {
        return Err(Error::NonFinite {
            index: 0,
            value: ev.value,
        });
    }
    let out = LossOutput {
        value: ev.value,
        grad_logits: Tensor::from_parts_unchecked(logits.shape().to_vec(), grad),
        per_class_terms: ev.per_class_terms,
        pixel_class_terms: ev.pixel_class_terms,
    };
    Ok((out, ev.residual))
}

/// Analytic gradient of the loss with respect to `logits`.
pub fn gradient(spec: &LossSpec, logits: &Tensor, truth: &OneHotMask) -> Result<Tensor> {
    Ok(evaluate(spec, logits, truth)?.grad_logits)
}

/// Loss value on probabilities as given (callers clip first).
pub fn value_on_probs(spec: &LossSpec, p: &ProbTensor, y: &OneHotMask) -> Result<f64> {
    check_shapes(p.shape(), y)?;
    spec.validate()?;
    spec.validate_for_classes(y.classes())?;
    let mut scratch = vec![0.0; p.data().len()];
    Ok(Plan::compile(spec, y.classes())
        .run(p.data(), y.data(), y.classes(), &mut scratch)
        .value)
}

pub fn cross_entropy(p: &ProbTensor, y: &OneHotMask) -> Result<f64> {
    value_on_probs(&LossSpec::Ce, p, y)
}

pub fn focal(p: &ProbTensor, y: &OneHotMask, alpha: f64, gamma: f64) -> Result<f64> {
    value_on_probs(&LossSpec::focal(alpha, gamma), p, y)
}

pub fn dice_loss(p: &ProbTensor, y: &OneHotMask) -> Result<f64> {
    value_on_probs(&LossSpec::Dice, p, y)
}

pub fn tversky_loss(p: &ProbTensor, y: &OneHotMask, alpha: f64, beta: f64) -> Result<f64> {
    value_on_probs(&LossSpec::tversky(alpha, beta), p, y)
}

pub fn focal_tversky_loss(
    p: &ProbTensor,
    y: &OneHotMask,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<f64> {
    value_on_probs(&LossSpec::focal_tversky(alpha, beta, gamma), p, y)
}

pub fn combo_loss(p: &ProbTensor, y: &OneHotMask, alpha: f64, beta: f64) -> Result<f64> {
    value_on_probs(&LossSpec::combo(alpha, beta), p, y)
}

pub fn hybrid_focal_loss(
    p: &ProbTensor,
    y: &OneHotMask,
    lambda: f64,
    focal: FocalParams,
    focal_tversky: FocalTverskyParams,
) -> Result<f64> {
    let spec = LossSpec::HybridFocal {
        lambda,
        focal,
        focal_tversky,
    };
    value_on_probs(&spec, p, y)
}

fn component(
    p: &ProbTensor,
    y: &OneHotMask,
    params: UnifiedParams,
    lambda: f64,
) -> Result<f64> {
    value_on_probs(&LossSpec::UnifiedFocal(UnifiedParams { lambda, ..params }), p, y)
}

/// Symmetric modified Focal loss; rare classes default to every non-background class.
pub fn modified_focal(
    p: &ProbTensor,
    y: &OneHotMask,
    delta: f64,
    gamma: f64,
    rare_classes: Option<Vec<usize>>,
) -> Result<f64> {
    let mut u = UnifiedParams::new(Variant::Sym, 1.0, delta, gamma);
    u.rare_classes = rare_classes;
    component(p, y, u, 1.0)
}

pub fn modified_focal_tversky(p: &ProbTensor, y: &OneHotMask, delta: f64, gamma: f64) -> Result<f64> {
    component(p, y, UnifiedParams::new(Variant::Sym, 0.0, delta, gamma), 0.0)
}

pub fn asym_focal(
    p: &ProbTensor,
    y: &OneHotMask,
    delta: f64,
    gamma: f64,
    rare_classes: Option<Vec<usize>>,
) -> Result<f64> {
    let mut u = UnifiedParams::new(Variant::Asym, 1.0, delta, gamma);
    u.rare_classes = rare_classes;
    component(p, y, u, 1.0)
}

pub fn asym_focal_tversky(
    p: &ProbTensor,
    y: &OneHotMask,
    delta: f64,
    gamma: f64,
    rare_classes: Option<Vec<usize>>,
) -> Result<f64> {
    let mut u = UnifiedParams::new(Variant::Asym, 0.0, delta, gamma);
    u.rare_classes = rare_classes;
    component(p, y, u, 0.0)
}

pub fn unified_focal(p: &ProbTensor, y: &OneHotMask, params: &UnifiedParams) -> Result<f64> {
    value_on_probs(&LossSpec::UnifiedFocal(params.clone()), p, y)
}

#[cfg(test)]
mod tests;
