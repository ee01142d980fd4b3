//! Per-element (distribution) terms: `w_c * (1 - p_t)^e_c * -ln(p_t)` where `c`
//! is the true class of the element.

use crate::numerics::CompensatedSum;

#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelTerm {
    pub weight: f64,
    pub exponent: f64,
}

impl PixelTerm {
    pub const CE: PixelTerm = PixelTerm {
        weight: 1.0,
        exponent: 0.0,
    };

    fn value_and_slope(self, pt: f64) -> (f64, f64) {
        let nll = -pt.ln();
        if self.weight == 0.0 {
            return (0.0, 0.0);
        }
        if self.exponent == 0.0 {
            return (self.weight * nll, -self.weight / pt);
        }
        let q = 1.0 - pt;
        let m = q.powf(self.exponent);
        let dm = -self.exponent * q.powf(self.exponent - 1.0);
        (self.weight * m * nll, self.weight * (dm * nll - m / pt))
    }
}

/// Mean over elements as `(value, residual)` plus the per-true-class partial
/// sums; adds `scale * dL/dp` into `grad`.
pub(crate) fn pixel_loss(
    p: &[f64],
    g: &[f64],
    classes: usize,
    terms: &[PixelTerm],
    scale: f64,
    grad: &mut [f64],
) -> ((f64, f64), Vec<f64>) {
    let n = (p.len() / classes) as f64;
    let mut per_class = vec![0.0; classes];
    let mut total = CompensatedSum::default();
    for ((pr, gr), dr) in p
        .chunks_exact(classes)
        .zip(g.chunks_exact(classes))
        .zip(grad.chunks_exact_mut(classes))
    {
        let t = gr.iter().position(|&v| v == 1.0).expect("one-hot truth");
        let (v, slope) = terms[t].value_and_slope(pr[t]);
        per_class[t] += v;
        total.add(v);
        dr[t] += scale * slope / n;
    }
    for v in per_class.iter_mut() {
        *v /= n;
    }
    let (sum, rest) = total.split();
    let mean = sum / n;
    let residual = ((-mean).mul_add(n, sum) + rest) / n;
    ((mean, residual), per_class)
}
