//! Three-layer fully-convolutional net with hand-written backprop.
//!
//! Activations are channels-last (`N × H × W × C`). Convolution weights are
//! laid out `[ky][kx][c_in][c_out]` so the innermost loop runs over output
//! channels.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::oracle::trial_rng;

/// Floating-point element type of the net.
pub trait Real: Float + AddAssign + Default + Debug + Send + Sync + 'static {}

impl<T: Float + AddAssign + Default + Debug + Send + Sync + 'static> Real for T {}

fn cast<T: Real>(v: f64) -> T {
    T::from(v).expect("f64 converts to any Real")
}

pub const HIDDEN: usize = 8;

/// Same-padded 2-D convolution with odd square kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv<T> {
    pub fn zeros(kernel: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            kernel,
            c_in,
            c_out,
            weight: vec![T::zero(); kernel * kernel * c_in * c_out],
            bias: vec![T::zero(); c_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `±sqrt(6 / (fan_in + fan_out))` with `fan = k² · channels`.
    pub fn xavier_bound(&self) -> f64 {
        let k2 = (self.kernel * self.kernel) as f64;
        (6.0 / (k2 * self.c_in as f64 + k2 * self.c_out as f64)).sqrt()
    }

    /// Visits `(input pixel, weight offset)` for every in-bounds kernel tap of output pixel (y, x).
    #[inline]
    fn taps(&self, h: usize, w: usize, y: usize, x: usize, mut f: impl FnMut(usize, usize)) {
        let r = self.kernel / 2;
        for ky in 0..self.kernel {
            let iy = y + ky;
            if iy < r || iy - r >= h {
                continue;
            }
            for kx in 0..self.kernel {
                let ix = x + kx;
                if ix < r || ix - r >= w {
                    continue;
                }
                f((iy - r) * w + (ix - r), (ky * self.kernel + kx) * self.c_in * self.c_out);
            }
        }
    }

    fn forward(&self, input: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
        match self.c_out {
            2 => self.forward_fixed::<2>(input, n, h, w),
            3 => self.forward_fixed::<3>(input, n, h, w),
            8 => self.forward_fixed::<8>(input, n, h, w),
            _ => self.forward_any(input, n, h, w),
        }
    }

    fn forward_fixed<const CO: usize>(&self, input: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
        let ci_n = self.c_in;
        let bias: [T; CO] = self.bias[..].try_into().expect("bias length");
        let mut out = vec![T::zero(); n * h * w * CO];
        for b in 0..n {
            let img = &input[b * h * w * ci_n..(b + 1) * h * w * ci_n];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias;
                    self.taps(h, w, y, x, |pix, woff| {
                        let xin = &img[pix * ci_n..(pix + 1) * ci_n];
                        let rows = self.weight[woff..woff + ci_n * CO].chunks_exact(CO);
                        for (&v, wr) in xin.iter().zip(rows) {
                            if v == T::zero() {
                                continue;
                            }
                            let wr: &[T; CO] = wr.try_into().expect("row length");
                            for k in 0..CO {
                                acc[k] += v * wr[k];
                            }
                        }
                    });
                    let o = ((b * h + y) * w + x) * CO;
                    out[o..o + CO].copy_from_slice(&acc);
                }
            }
        }
        out
    }

    fn forward_any(&self, input: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
        let (ci_n, co_n) = (self.c_in, self.c_out);
        let mut out = vec![T::zero(); n * h * w * co_n];
        for b in 0..n {
            let img = &input[b * h * w * ci_n..(b + 1) * h * w * ci_n];
            for y in 0..h {
                for x in 0..w {
                    let o = ((b * h + y) * w + x) * co_n;
                    let acc = &mut out[o..o + co_n];
                    acc.copy_from_slice(&self.bias);
                    self.taps(h, w, y, x, |pix, woff| {
                        let xin = &img[pix * ci_n..(pix + 1) * ci_n];
                        for (ci, &v) in xin.iter().enumerate() {
                            let wr = &self.weight[woff + ci * co_n..woff + (ci + 1) * co_n];
                            for (a, &wv) in acc.iter_mut().zip(wr) {
                                *a += v * wv;
                            }
                        }
                    });
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient if asked.
    ///
    /// Input elements equal to zero contribute nothing to the weight gradient,
    /// and their input gradient is left at zero: every layer that asks for one
    /// reads a ReLU output, whose mask zeroes those entries anyway.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        input: &[T],
        d_out: &[T],
        n: usize,
        h: usize,
        w: usize,
        grad: &mut Conv<T>,
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        match self.c_out {
            2 => self.backward_fixed::<2>(input, d_out, n, h, w, grad, want_input_grad),
            3 => self.backward_fixed::<3>(input, d_out, n, h, w, grad, want_input_grad),
            8 => self.backward_fixed::<8>(input, d_out, n, h, w, grad, want_input_grad),
            _ => self.backward_any(input, d_out, n, h, w, grad, want_input_grad),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_fixed<const CO: usize>(
        &self,
        input: &[T],
        d_out: &[T],
        n: usize,
        h: usize,
        w: usize,
        grad: &mut Conv<T>,
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let ci_n = self.c_in;
        let mut d_in = want_input_grad.then(|| vec![T::zero(); input.len()]);
        let mut d_bias = [T::zero(); CO];
        for b in 0..n {
            let base = b * h * w * ci_n;
            for y in 0..h {
                for x in 0..w {
                    let o = ((b * h + y) * w + x) * CO;
                    let g: &[T; CO] = d_out[o..o + CO].try_into().expect("row length");
                    for k in 0..CO {
                        d_bias[k] += g[k];
                    }
                    self.taps(h, w, y, x, |pix, woff| {
                        let at = base + pix * ci_n;
                        for ci in 0..ci_n {
                            let v = input[at + ci];
                            if v == T::zero() {
                                continue;
                            }
                            let r = woff + ci * CO;
                            let dw: &mut [T; CO] =
                                (&mut grad.weight[r..r + CO]).try_into().expect("row length");
                            for k in 0..CO {
                                dw[k] += v * g[k];
                            }
                            if let Some(d_in) = d_in.as_mut() {
                                let wr: &[T; CO] = self.weight[r..r + CO].try_into().expect("row length");
                                let mut s = T::zero();
                                for k in 0..CO {
                                    s += wr[k] * g[k];
                                }
                                d_in[at + ci] += s;
                            }
                        }
                    });
                }
            }
        }
        for (db, v) in grad.bias.iter_mut().zip(d_bias) {
            *db += v;
        }
        d_in
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_any(
        &self,
        input: &[T],
        d_out: &[T],
        n: usize,
        h: usize,
        w: usize,
        grad: &mut Conv<T>,
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let (ci_n, co_n) = (self.c_in, self.c_out);
        let mut d_in = want_input_grad.then(|| vec![T::zero(); input.len()]);
        for b in 0..n {
            let base = b * h * w * ci_n;
            for y in 0..h {
                for x in 0..w {
                    let o = ((b * h + y) * w + x) * co_n;
                    let g = &d_out[o..o + co_n];
                    for (db, &gv) in grad.bias.iter_mut().zip(g) {
                        *db += gv;
                    }
                    self.taps(h, w, y, x, |pix, woff| {
                        let xin = &input[base + pix * ci_n..base + (pix + 1) * ci_n];
                        for (ci, &v) in xin.iter().enumerate() {
                            if v == T::zero() {
                                continue;
                            }
                            let range = woff + ci * co_n..woff + (ci + 1) * co_n;
                            for (dw, &gv) in grad.weight[range.clone()].iter_mut().zip(g) {
                                *dw += v * gv;
                            }
                            if let Some(d_in) = d_in.as_mut() {
                                let mut s = T::zero();
                                for (&wv, &gv) in self.weight[range].iter().zip(g) {
                                    s += wv * gv;
                                }
                                d_in[base + pix * ci_n + ci] += s;
                            }
                        }
                    });
                }
            }
        }
        d_in
    }
}

/// conv3×3 (1 → 8) · ReLU · conv3×3 (8 → 8) · ReLU · conv1×1 (8 → C).
#[derive(Debug, Clone, PartialEq)]
pub struct TinySegNet<T = f32> {
    pub layer1: Conv<T>,
    pub layer2: Conv<T>,
    pub layer3: Conv<T>,
}

/// Intermediate activations kept for the backward pass.
pub struct Activations<T> {
    pub hidden1: Vec<T>,
    pub hidden2: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Real> TinySegNet<T> {
    pub fn zeros(classes: usize) -> Self {
        Self {
            layer1: Conv::zeros(3, 1, HIDDEN),
            layer2: Conv::zeros(3, HIDDEN, HIDDEN),
            layer3: Conv::zeros(1, HIDDEN, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.layer3.c_out
    }

    pub fn layers(&self) -> [&Conv<T>; 3] {
        [&self.layer1, &self.layer2, &self.layer3]
    }

    pub fn layers_mut(&mut self) -> [&mut Conv<T>; 3] {
        [&mut self.layer1, &mut self.layer2, &mut self.layer3]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    /// All parameters in a fixed order: each layer's weights then biases.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        for l in self.layers_mut() {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }

    /// Named parameter tensors (64-bit copies).
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let to64 = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
        let mut out = Vec::new();
        for (i, l) in self.layers().iter().enumerate() {
            out.push((
                format!("layer{}.weight", i + 1),
                Tensor::from_parts_unchecked(
                    vec![l.kernel, l.kernel, l.c_in, l.c_out],
                    to64(&l.weight),
                ),
            ));
            out.push((
                format!("layer{}.bias", i + 1),
                Tensor::from_parts_unchecked(vec![l.c_out], to64(&l.bias)),
            ));
        }
        out
    }

    /// Rebuilds a net from [`TinySegNet::tensors`] output.
    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        };
        let classes = find("layer3.bias")?.len();
        let mut net = Self::zeros(classes);
        for (i, l) in net.layers_mut().into_iter().enumerate() {
            let w = find(&format!("layer{}.weight", i + 1))?;
            let b = find(&format!("layer{}.bias", i + 1))?;
            let expected = [l.kernel, l.kernel, l.c_in, l.c_out];
            if w.shape() != expected || b.shape() != [l.c_out] {
                return Err(Error::Shape {
                    expected: expected.to_vec(),
                    found: w.shape().to_vec(),
                });
            }
            l.weight = w.data().iter().map(|&v| cast(v)).collect();
            l.bias = b.data().iter().map(|&v| cast(v)).collect();
        }
        Ok(net)
    }

    /// Forward pass on `n × h × w` single-channel images.
    pub fn forward(&self, images: &[T], n: usize, h: usize, w: usize) -> Result<Activations<T>> {
        if images.len() != n * h * w || n == 0 {
            return Err(Error::Shape {
                expected: vec![n, h, w, 1],
                found: vec![images.len()],
            });
        }
        let relu = |mut v: Vec<T>| {
            for x in v.iter_mut() {
                if *x < T::zero() {
                    *x = T::zero();
                }
            }
            v
        };
        let hidden1 = relu(self.layer1.forward(images, n, h, w));
        let hidden2 = relu(self.layer2.forward(&hidden1, n, h, w));
        let logits = self.layer3.forward(&hidden2, n, h, w);
        Ok(Activations {
            hidden1,
            hidden2,
            logits,
        })
    }

    /// Parameter gradients given dL/dlogits.
    pub fn backward(
        &self,
        images: &[T],
        acts: &Activations<T>,
        d_logits: &[T],
        n: usize,
        h: usize,
        w: usize,
    ) -> TinySegNet<T> {
        let mut grad = Self::zeros(self.classes());
        let mask = |mut d: Vec<T>, act: &[T]| {
            for (g, &a) in d.iter_mut().zip(act) {
                if a <= T::zero() {
                    *g = T::zero();
                }
            }
            d
        };
        let d2 = self
            .layer3
            .backward(&acts.hidden2, d_logits, n, h, w, &mut grad.layer3, true)
            .expect("input gradient requested");
        let d2 = mask(d2, &acts.hidden2);
        let d1 = self
            .layer2
            .backward(&acts.hidden1, &d2, n, h, w, &mut grad.layer2, true)
            .expect("input gradient requested");
        let d1 = mask(d1, &acts.hidden1);
        self.layer1
            .backward(images, &d1, n, h, w, &mut grad.layer1, false);
        grad
    }

    /// Plain SGD step `θ ← θ − lr · g`.
    pub fn sgd_step(&mut self, grad: &TinySegNet<T>, lr: f64) {
        let lr: T = cast(lr);
        for (l, g) in self.layers_mut().into_iter().zip(grad.layers()) {
            for (p, &d) in l.weight.iter_mut().zip(&g.weight) {
                *p = *p - lr * d;
            }
            for (p, &d) in l.bias.iter_mut().zip(&g.bias) {
                *p = *p - lr * d;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Xavier-uniform weights and zero biases, drawn from `seed`.
pub fn init_xavier<T: Real>(classes: usize, seed: u64) -> TinySegNet<T> {
    let mut net = TinySegNet::zeros(classes);
    let mut rng = trial_rng(seed, 0);
    for l in net.layers_mut() {
        let bound = l.xavier_bound();
        for wv in l.weight.iter_mut() {
            *wv = cast(rng.random_range(-bound..=bound));
        }
    }
    net
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{evaluate, LossSpec};
    use crate::numerics::{one_hot, Labels};
    use crate::oracle::relative_error;

    #[test]
    fn parameter_count() {
        for c in [2, 3] {
            let net = TinySegNet::<f32>::zeros(c);
            assert_eq!(net.param_count(), (9 * 8 + 8) + (9 * 8 * 8 + 8) + (8 * c + c));
        }
    }

    #[test]
    fn xavier_bounds_and_zero_biases() {
        let net = init_xavier::<f64>(2, 5);
        assert!((net.layer1.xavier_bound() - (6.0f64 / (9.0 + 72.0)).sqrt()).abs() < 1e-15);
        for l in net.layers() {
            let b = l.xavier_bound();
            assert!(l.weight.iter().all(|w| w.abs() <= b));
            assert!(l.bias.iter().all(|&v| v == 0.0));
        }
        assert_eq!(net, init_xavier::<f64>(2, 5));
        assert_ne!(net, init_xavier::<f64>(2, 6));
    }

    #[test]
    fn zero_net_gives_zero_logits() {
        let net = TinySegNet::<f64>::zeros(3);
        let acts = net.forward(&[0.5; 16], 1, 4, 4).unwrap();
        assert_eq!(acts.logits.len(), 16 * 3);
        assert!(acts.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv3x3_on_4x4_by_hand() {
        let mut conv = Conv::<f64>::zeros(3, 1, 1);
        conv.weight = (1..=9).map(|v| v as f64).collect();
        conv.bias = vec![0.5];
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let out = conv.forward(&img, 1, 4, 4);
        // Top-left: taps (1,1),(1,2),(2,1),(2,2) of the kernel on pixels 0,1,4,5.
        assert_eq!(out[0], 5.0 * 0.0 + 6.0 * 1.0 + 8.0 * 4.0 + 9.0 * 5.0 + 0.5);
        // Interior pixel (1,1): full 3×3 window over pixels 0..=10.
        let window = [0.0, 1.0, 2.0, 4.0, 5.0, 6.0, 8.0, 9.0, 10.0];
        let expected: f64 = window.iter().zip(1..=9).map(|(p, k)| p * k as f64).sum();
        assert_eq!(out[5], expected + 0.5);
    }

    #[test]
    fn fixed_width_paths_match_general() {
        let mut rng = trial_rng(3, 3);
        let mut conv = Conv::<f64>::zeros(3, 4, 8);
        conv.weight.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        conv.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let x: Vec<f64> = (0..2 * 5 * 6 * 4).map(|_| rng.random_range(-1.0..1.0f64).max(0.0)).collect();
        let fast = conv.forward(&x, 2, 5, 6);
        assert_eq!(fast, conv.forward_any(&x, 2, 5, 6));
        let g: Vec<f64> = fast.iter().map(|v| v.sin()).collect();
        let (mut ga, mut gb) = (Conv::zeros(3, 4, 8), Conv::zeros(3, 4, 8));
        let da = conv.backward(&x, &g, 2, 5, 6, &mut ga, true).unwrap();
        let db = conv.backward_any(&x, &g, 2, 5, 6, &mut gb, true).unwrap();
        assert_eq!(da, db);
        for (a, b) in ga.weight.iter().chain(&ga.bias).zip(gb.weight.iter().chain(&gb.bias)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_head_passes_features() {
        let mut conv = Conv::<f64>::zeros(1, 2, 2);
        conv.weight = vec![1.0, 0.0, 0.0, 1.0];
        let feats = vec![0.3, -1.2, 4.0, 2.5];
        assert_eq!(conv.forward(&feats, 1, 1, 2), feats);
    }

    fn composite(net: &TinySegNet<f64>, img: &[f64], y: &crate::OneHotMask, spec: &LossSpec) -> f64 {
        let acts = net.forward(img, 1, 8, 8).unwrap();
        let t = Tensor::new(vec![1, 8, 8, net.classes()], acts.logits).unwrap();
        evaluate(spec, &t, y).unwrap().value
    }

    pub(crate) fn composite_gradcheck(spec: &LossSpec, seed: u64) -> f64 {
        let mut rng = trial_rng(seed, 7);
        let net = init_xavier::<f64>(2, seed);
        let img: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<usize> = img.iter().map(|&v| usize::from(v > 0.6)).collect();
        let y = one_hot(&Labels::new(vec![1, 8, 8], labels).unwrap(), 2).unwrap();
        let acts = net.forward(&img, 1, 8, 8).unwrap();
        let t = Tensor::new(vec![1, 8, 8, 2], acts.logits.clone()).unwrap();
        let d = evaluate(spec, &t, &y).unwrap().grad_logits;
        let analytic = net.backward(&img, &acts, d.data(), 1, 8, 8).params();
        let theta = net.params();
        // Some parameter gradients are ~1e-7; a smaller step lets rounding noise dominate them.
        let h = 1e-4;
        let mut probe = net.clone();
        let mut worst = 0.0f64;
        for j in 0..theta.len() {
            let mut th = theta.clone();
            th[j] += h;
            probe.set_params(&th);
            let up = composite(&probe, &img, &y, spec);
            th[j] -= 2.0 * h;
            probe.set_params(&th);
            let down = composite(&probe, &img, &y, spec);
            let num = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[j], num));
        }
        worst
    }

    #[test]
    fn composite_gradcheck_ce() {
        let e = composite_gradcheck(&LossSpec::Ce, 1);
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn composite_gradcheck_every_preset() {
        for p in crate::losses::presets() {
            let e = composite_gradcheck(&p.spec, 2);
            assert!(e < 1e-3, "{}: {e}", p.name);
        }
    }

    #[test]
    fn dice_gradient_vanishes_at_confident_fit() {
        // Layer 3 reads the sign of a ReLU feature: large logits, exact fit.
        let mut net = TinySegNet::<f64>::zeros(2);
        net.layer1.weight[4 * 8] = 1.0; // centre tap, channel 0
        net.layer1.bias[0] = -0.5;
        net.layer2.weight[4 * 64] = 1.0;
        net.layer3.weight = vec![-1000.0, 1000.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        net.layer3.bias = vec![20.0, -20.0];
        let img: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let labels: Vec<usize> = img.iter().map(|&v| usize::from(v > 0.5)).collect();
        let y = one_hot(&Labels::new(vec![1, 4, 4], labels).unwrap(), 2).unwrap();
        let acts = net.forward(&img, 1, 4, 4).unwrap();
        let t = Tensor::new(vec![1, 4, 4, 2], acts.logits.clone()).unwrap();
        let out = evaluate(&LossSpec::Dice, &t, &y).unwrap();
        assert!(out.value < 1e-6);
        let g = net.backward(&img, &acts, out.grad_logits.data(), 1, 4, 4);
        assert!(g.params().iter().all(|v| v.abs() < 1e-6));
    }
}
