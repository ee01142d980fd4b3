//! Loop-per-pixel transcription of every loss formula. Shares nothing with
//! `crate::losses` beyond the spec types, and is only meant for small inputs.

use crate::error::{Error, Result};
use crate::losses::{ClassWeights, DeltaConvention, LossSpec, UnifiedParams, Variant};
use crate::numerics::{OneHotMask, ProbTensor, CLIP_EPS};

const SMOOTH: f64 = 1e-6;

struct Grid {
    n: usize,
    c: usize,
    p: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

impl Grid {
    fn truth_class(&self, i: usize) -> usize {
        let mut t = 0;
        for c in 0..self.c {
            if self.y[i][c] == 1.0 {
                t = c;
            }
        }
        t
    }
}

fn categorical_ce(g: &Grid) -> f64 {
    let mut total = 0.0;
    for i in 0..g.n {
        for c in 0..g.c {
            total += g.y[i][c] * g.p[i][c].ln();
        }
    }
    -total / g.n as f64
}

fn focal_ce(g: &Grid, alpha: &ClassWeights, gamma: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..g.n {
        for c in 0..g.c {
            if g.y[i][c] == 1.0 {
                let pt = g.p[i][c];
                let a = match alpha {
                    ClassWeights::Uniform(a) => *a,
                    ClassWeights::PerClass(v) => v[c],
                };
                total += a * (1.0 - pt).powf(gamma) * -pt.ln();
            }
        }
    }
    total / g.n as f64
}

/// Tversky index of class `c` with weights on FP and FN.
fn tversky_index(g: &Grid, c: usize, fp_w: f64, fn_w: f64) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fne = 0.0;
    for i in 0..g.n {
        let p = g.p[i][c];
        let y = g.y[i][c];
        tp += p * y;
        fp += p * (1.0 - y);
        fne += (1.0 - p) * y;
    }
    (tp + SMOOTH) / (tp + fp_w * fp + fn_w * fne + SMOOTH)
}

fn tversky_family(g: &Grid, fp_w: f64, fn_w: f64, power: f64) -> f64 {
    let mut total = 0.0;
    for c in 0..g.c {
        total += (1.0 - tversky_index(g, c, fp_w, fn_w)).powf(power);
    }
    total
}

/// Modified cross entropy: β on foreground terms, 1 − β on background.
fn modified_ce(g: &Grid, beta: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..g.n {
        let t = g.truth_class(i);
        let w = if t == 0 { 1.0 - beta } else { beta };
        total += w * g.p[i][t].ln();
    }
    -total / g.n as f64
}

fn soft_dsc_all_classes(g: &Grid) -> f64 {
    let mut inter = 0.0;
    let mut p_mass = 0.0;
    let mut y_mass = 0.0;
    for i in 0..g.n {
        for c in 0..g.c {
            inter += g.p[i][c] * g.y[i][c];
            p_mass += g.p[i][c];
            y_mass += g.y[i][c];
        }
    }
    (2.0 * inter + SMOOTH) / (p_mass + y_mass + SMOOTH)
}

fn unified(g: &Grid, u: &UnifiedParams) -> f64 {
    let rare = |c: usize| match &u.rare_classes {
        Some(r) => r.iter().any(|&x| x == c),
        None => c > 0,
    };
    // Distribution part.
    let mut focal_part = 0.0;
    for i in 0..g.n {
        let t = g.truth_class(i);
        let pt = g.p[i][t];
        let term = if rare(t) {
            let modulate = match u.variant {
                Variant::Sym => (1.0 - pt).powf(u.gamma),
                Variant::Asym => 1.0,
            };
            u.delta * modulate * -pt.ln()
        } else {
            (1.0 - u.delta) * (1.0 - pt).powf(u.gamma) * -pt.ln()
        };
        focal_part += term;
    }
    focal_part /= g.n as f64;

    // Region part.
    let (fp_w, fn_w) = match u.delta_convention {
        DeltaConvention::Fn => (1.0 - u.delta, u.delta),
        DeltaConvention::Fp => (u.delta, 1.0 - u.delta),
    };
    let mut region_part = 0.0;
    for c in 0..g.c {
        let one_minus = 1.0 - tversky_index(g, c, fp_w, fn_w);
        let power = match u.variant {
            Variant::Asym if !rare(c) => 1.0,
            _ => 1.0 - u.gamma,
        };
        region_part += one_minus.powf(power);
    }
    u.lambda * focal_part + (1.0 - u.lambda) * region_part
}

/// Naive value of `spec` on probabilities `p` (clipped here at `CLIP_EPS`).
pub fn reference_loss(spec: &LossSpec, p: &ProbTensor, y: &OneHotMask) -> Result<f64> {
    if p.shape() != y.shape() {
        return Err(Error::Shape {
            expected: y.shape().to_vec(),
            found: p.shape().to_vec(),
        });
    }
    let c = y.classes();
    let n = y.elements();
    let mut grid = Grid {
        n,
        c,
        p: vec![vec![0.0; c]; n],
        y: vec![vec![0.0; c]; n],
    };
    for i in 0..n {
        for k in 0..c {
            let v = p.data()[i * c + k];
            grid.p[i][k] = if v < CLIP_EPS {
                CLIP_EPS
            } else if v > 1.0 - CLIP_EPS {
                1.0 - CLIP_EPS
            } else {
                v
            };
            grid.y[i][k] = y.data()[i * c + k];
        }
    }
    let g = &grid;
    Ok(match spec {
        LossSpec::Ce => categorical_ce(g),
        LossSpec::Focal(f) => focal_ce(g, &f.alpha, f.gamma),
        LossSpec::Dice => tversky_family(g, 0.5, 0.5, 1.0),
        LossSpec::Tversky(t) => tversky_family(g, t.alpha, t.beta, 1.0),
        LossSpec::FocalTversky(ft) => tversky_family(g, ft.alpha, ft.beta, 1.0 / ft.gamma),
        LossSpec::Combo { alpha, beta } => {
            alpha * modified_ce(g, *beta) - (1.0 - alpha) * soft_dsc_all_classes(g)
        }
        LossSpec::HybridFocal {
            lambda,
            focal,
            focal_tversky: ft,
        } => {
            lambda * focal_ce(g, &focal.alpha, focal.gamma)
                + (1.0 - lambda) * tversky_family(g, ft.alpha, ft.beta, 1.0 / ft.gamma)
        }
        LossSpec::UnifiedFocal(u) => unified(g, u),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{one_hot, Labels, Tensor};

    #[test]
    fn single_pixel_ce_and_perfect_dice() {
        let p = ProbTensor::new(Tensor::new(vec![1, 2], vec![0.25, 0.75]).unwrap()).unwrap();
        let y = one_hot(&Labels::new(vec![1], vec![1]).unwrap(), 2).unwrap();
        assert!((reference_loss(&LossSpec::Ce, &p, &y).unwrap() + 0.75f64.ln()).abs() < 1e-15);

        let p = ProbTensor::new(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        let y = one_hot(&Labels::new(vec![2], vec![1, 0]).unwrap(), 2).unwrap();
        assert!(reference_loss(&LossSpec::Dice, &p, &y).unwrap() < 1e-6);
    }
}
