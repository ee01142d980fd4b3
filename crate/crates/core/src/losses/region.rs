//! Region (overlap) terms built on soft confusion counts.

use crate::numerics::{OneHotMask, ProbTensor};

/// Added to numerator and denominator of every overlap ratio.
pub const SMOOTH: f64 = 1e-6;

/// Soft per-class true positive, false positive and false negative mass.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftConfusion {
    pub tp: Vec<f64>,
    pub fp: Vec<f64>,
    pub fn_: Vec<f64>,
}

impl SoftConfusion {
    pub fn from_probs(p: &ProbTensor, y: &OneHotMask) -> Self {
        Self::from_slices(p.data(), y.data(), p.classes())
    }

    pub(crate) fn from_slices(p: &[f64], g: &[f64], classes: usize) -> Self {
        let mut out = Self {
            tp: vec![0.0; classes],
            fp: vec![0.0; classes],
            fn_: vec![0.0; classes],
        };
        for (pr, gr) in p.chunks_exact(classes).zip(g.chunks_exact(classes)) {
            for c in 0..classes {
                out.tp[c] += pr[c] * gr[c];
                out.fp[c] += pr[c] * (1.0 - gr[c]);
                out.fn_[c] += (1.0 - pr[c]) * gr[c];
            }
        }
        out
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }
}

/// Per-class Tversky index with `alpha` on FP and `beta` on FN, smoothed so an
/// empty class predicted empty scores 1.
pub fn tversky_index(conf: &SoftConfusion, alpha: f64, beta: f64) -> Vec<f64> {
    (0..conf.classes())
        .map(|c| {
            (conf.tp[c] + SMOOTH)
                / (conf.tp[c] + alpha * conf.fp[c] + beta * conf.fn_[c] + SMOOTH)
        })
        .collect()
}

/// One class of a region loss: `(1 - TI_c)^exponent` with its own FP/FN weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RegionTerm {
    pub fp_weight: f64,
    pub fn_weight: f64,
    pub exponent: f64,
}

/// Smallest base used when differentiating a fractional power at zero.
const POW_FLOOR: f64 = 1e-12;

/// Returns the summed value and per-class terms; adds `scale * dL/dp` into `grad`.
pub(crate) fn region_loss(
    p: &[f64],
    g: &[f64],
    classes: usize,
    terms: &[RegionTerm],
    scale: f64,
    grad: &mut [f64],
) -> (f64, Vec<f64>) {
    let conf = SoftConfusion::from_slices(p, g, classes);
    let mut per_class = Vec::with_capacity(classes);
    // d loss_c / d p_ic = coef_c * (g_i * A_c - B_c * (g_i + a(1 - g_i) - b g_i))
    let mut coef_hit = vec![0.0; classes];
    let mut coef_miss = vec![0.0; classes];
    for (c, t) in terms.iter().enumerate() {
        let num = conf.tp[c] + SMOOTH;
        let den = conf.tp[c] + t.fp_weight * conf.fp[c] + t.fn_weight * conf.fn_[c] + SMOOTH;
        let ti = num / den;
        let base = 1.0 - ti;
        let value = if t.exponent == 1.0 { base } else { base.max(0.0).powf(t.exponent) };
        per_class.push(value);
        // d value / d TI
        let dv_dti = if t.exponent == 1.0 {
            -1.0
        } else {
            -t.exponent * base.max(POW_FLOOR).powf(t.exponent - 1.0)
        };
        let k = scale * dv_dti / (den * den);
        // g = 1: d num = 1, d den = 1 - b ; g = 0: d num = 0, d den = a
        coef_hit[c] = k * (den - num * (1.0 - t.fn_weight));
        coef_miss[c] = k * (-num * t.fp_weight);
    }
    for (gr, gi) in grad.chunks_exact_mut(classes).zip(g.chunks_exact(classes)) {
        for c in 0..classes {
            gr[c] += if gi[c] == 1.0 { coef_hit[c] } else { coef_miss[c] };
        }
    }
    (per_class.iter().sum(), per_class)
}

/// Soft DSC aggregated over every element and class; adds `scale * dDSC/dp` into `grad`.
pub(crate) fn micro_dice(p: &[f64], g: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
    let mut inter = 0.0;
    let mut mass = 0.0;
    for (&pi, &gi) in p.iter().zip(g) {
        inter += pi * gi;
        mass += pi + gi;
    }
    let num = 2.0 * inter + SMOOTH;
    let den = mass + SMOOTH;
    let k = scale / (den * den);
    for (gr, &gi) in grad.iter_mut().zip(g) {
        *gr += k * (2.0 * gi * den - num);
    }
    num / den
}
