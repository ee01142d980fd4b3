use super::*;
use crate::numerics::{clip_probs, one_hot, Labels};

const TOL: f64 = 1e-6;

/// Two-channel probabilities from foreground probabilities.
fn binary(fore: &[f64], labels: &[usize]) -> (ProbTensor, OneHotMask) {
    let data = fore.iter().flat_map(|&q| [1.0 - q, q]).collect();
    let p = ProbTensor::new(Tensor::new(vec![fore.len(), 2], data).unwrap()).unwrap();
    let y = one_hot(&Labels::new(vec![labels.len()], labels.to_vec()).unwrap(), 2).unwrap();
    (p, y)
}

fn logits(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

#[test]
fn cross_entropy_examples() {
    let (p, y) = binary(&[0.7], &[1]);
    close(cross_entropy(&p, &y).unwrap(), 0.356675, TOL);
    let (p, y) = binary(&[0.9, 0.1], &[1, 0]);
    close(cross_entropy(&p, &y).unwrap(), 0.105361, TOL);
    let (p, y) = binary(&[1.0, 0.0], &[1, 0]);
    assert!(cross_entropy(&clip_probs(&p, CLIP_EPS), &y).unwrap() < 1e-6);
}

#[test]
fn focal_examples() {
    let (p, y) = binary(&[0.8], &[1]);
    close(focal(&p, &y, 0.25, 2.0).unwrap(), 0.00223144, 1e-8);
    let (p, y) = binary(&[0.5], &[1]);
    close(focal(&p, &y, 0.25, 2.0).unwrap(), 0.0433217, 1e-7);
    let (p, y) = binary(&[0.8, 0.3, 0.55], &[1, 0, 1]);
    assert_eq!(focal(&p, &y, 1.0, 0.0).unwrap(), cross_entropy(&p, &y).unwrap());
    assert!(focal(&p, &y, 0.25, -0.5).is_err());
}

#[test]
fn categorical_focal_uses_class_weight_vector() {
    let (p, y) = binary(&[0.8, 0.3], &[1, 0]);
    let spec = LossSpec::Focal(FocalParams {
        alpha: ClassWeights::PerClass(vec![0.2, 0.9]),
        gamma: 1.0,
    });
    let expected = (0.9 * 0.2 * -(0.8f64.ln()) + 0.2 * 0.3 * -(0.7f64.ln())) / 2.0;
    close(value_on_probs(&spec, &p, &y).unwrap(), expected, 1e-12);
    let wrong_len = LossSpec::Focal(FocalParams {
        alpha: ClassWeights::PerClass(vec![0.2, 0.9, 0.1]),
        gamma: 1.0,
    });
    assert!(value_on_probs(&wrong_len, &p, &y).is_err());
}

#[test]
fn tversky_index_examples() {
    let (p, y) = binary(&[0.8, 0.6, 0.3], &[1, 1, 0]);
    let conf = SoftConfusion::from_probs(&p, &y);
    close(conf.tp[1], 1.4, 1e-12);
    close(conf.fp[1], 0.3, 1e-12);
    close(conf.fn_[1], 0.6, 1e-12);
    close(tversky_index(&conf, 0.3, 0.7)[1], 0.732984, TOL);
    close(tversky_index(&conf, 0.5, 0.5)[1], 0.756757, TOL);

    // A class absent from truth and prediction scores a perfect index.
    let empty = SoftConfusion {
        tp: vec![0.0],
        fp: vec![0.0],
        fn_: vec![0.0],
    };
    assert_eq!(tversky_index(&empty, 0.3, 0.7), vec![1.0]);
}

#[test]
fn region_loss_examples() {
    let (p, y) = binary(&[0.8, 0.6, 0.3], &[1, 1, 0]);
    let conf = SoftConfusion::from_probs(&p, &y);
    let dsc = tversky_index(&conf, 0.5, 0.5);
    close(1.0 - dsc[1], 0.243243, TOL);
    close(dice_loss(&p, &y).unwrap(), (1.0 - dsc[0]) + (1.0 - dsc[1]), 1e-12);

    let ti = tversky_index(&conf, 0.3, 0.7);
    close(1.0 - ti[1], 0.267016, TOL);
    close(tversky_loss(&p, &y, 0.3, 0.7).unwrap(), 2.0 - ti[0] - ti[1], 1e-12);

    let ft = focal_tversky_loss(&p, &y, 0.3, 0.7, 4.0 / 3.0).unwrap();
    // Printed as 0.371463; the product itself evaluates to 0.371452.
    close(ft - (1.0 - ti[0]).powf(0.75), 0.267016f64.powf(0.75), TOL);
    assert!(focal_tversky_loss(&p, &y, 0.3, 0.7, 0.0).is_err());
}

#[test]
fn combo_examples() {
    let (p, y) = binary(&[0.8], &[1]);
    close(combo_loss(&p, &y, 0.5, 0.5).unwrap(), -0.344214, TOL);

    let (p, y) = binary(&[1.0, 0.0, 1.0], &[1, 0, 1]);
    close(combo_loss(&clip_probs(&p, CLIP_EPS), &y, 0.5, 0.5).unwrap(), -0.5, TOL);

    // β = 0.5 makes the modified cross entropy half the plain one.
    let (p, y) = binary(&[0.8, 0.35, 0.6, 0.1], &[1, 0, 0, 1]);
    let mce = value_on_probs(&LossSpec::combo(1.0, 0.5), &p, &y).unwrap();
    close(mce, 0.5 * cross_entropy(&p, &y).unwrap(), 1e-15);
}

#[test]
fn hybrid_focal_endpoints_and_linearity() {
    let (p, y) = binary(&[0.8, 0.35, 0.6, 0.1], &[1, 0, 0, 1]);
    let f = FocalParams {
        alpha: ClassWeights::Uniform(0.25),
        gamma: 2.0,
    };
    let ft = FocalTverskyParams {
        alpha: 0.3,
        beta: 0.7,
        gamma: 4.0 / 3.0,
    };
    let a = focal(&p, &y, 0.25, 2.0).unwrap();
    let b = focal_tversky_loss(&p, &y, 0.3, 0.7, 4.0 / 3.0).unwrap();
    assert_eq!(hybrid_focal_loss(&p, &y, 1.0, f.clone(), ft).unwrap(), a);
    assert_eq!(hybrid_focal_loss(&p, &y, 0.0, f.clone(), ft).unwrap(), b);
    close(hybrid_focal_loss(&p, &y, 0.5, f, ft).unwrap(), (a + b) / 2.0, 1e-15);
}

#[test]
fn modified_focal_examples() {
    let (p, y) = binary(&[0.8], &[1]);
    // 0.6 * sqrt(0.2) * 0.223144 = 0.0598757
    close(modified_focal(&p, &y, 0.6, 0.5, None).unwrap(), 0.6 * 0.2f64.sqrt() * -(0.8f64.ln()), 1e-12);

    let (p, y) = binary(&[0.8, 0.6, 0.3], &[1, 1, 0]);
    let u = UnifiedParams::new(Variant::Sym, 0.0, 0.6, 0.5);
    let spec = LossSpec::UnifiedFocal(u);
    let logits = prob_logits(&p);
    let out = evaluate(&spec, &logits, &y).unwrap();
    let terms = out.per_class_terms.unwrap();
    close(terms[1], 0.505291, TOL);
    // mTI for the foreground class: 1.4 / (1.4 + 0.6 * 0.6 + 0.4 * 0.3)
    close(1.0 - terms[1].powi(2), 0.744681, TOL);

    // γ = 0, δ = 0.5: half cross entropy and exactly the Dice loss.
    close(
        modified_focal(&p, &y, 0.5, 0.0, None).unwrap(),
        0.5 * cross_entropy(&p, &y).unwrap(),
        1e-15,
    );
    close(
        modified_focal_tversky(&p, &y, 0.5, 0.0).unwrap(),
        dice_loss(&p, &y).unwrap(),
        1e-15,
    );
}

/// Logits whose softmax reproduces `p` (log-probabilities).
fn prob_logits(p: &ProbTensor) -> Tensor {
    let data = p.data().iter().map(|v| v.ln()).collect();
    Tensor::new(p.shape().to_vec(), data).unwrap()
}

#[test]
fn asymmetric_examples() {
    let (p, y) = binary(&[0.8, 0.6, 0.3, 0.25], &[1, 1, 0, 0]);
    let logits = prob_logits(&p);
    let rare_at = |gamma: f64| {
        let spec = LossSpec::unified_asym(1.0, 0.6, gamma);
        evaluate(&spec, &logits, &y).unwrap().pixel_class_terms.unwrap()[1]
    };
    assert_eq!(rare_at(0.2).to_bits(), rare_at(0.8).to_bits());

    let (p, y) = binary(&[0.8, 0.6, 0.3], &[1, 1, 0]);
    let spec = LossSpec::unified_asym(0.0, 0.6, 0.2);
    let terms = evaluate(&spec, &prob_logits(&p), &y)
        .unwrap()
        .per_class_terms
        .unwrap();
    close(terms[1], 0.255319f64.powf(0.8), TOL);

    for (a, b) in [
        (
            asym_focal(&p, &y, 0.6, 0.0, None).unwrap(),
            modified_focal(&p, &y, 0.6, 0.0, None).unwrap(),
        ),
        (
            asym_focal_tversky(&p, &y, 0.6, 0.0, None).unwrap(),
            modified_focal_tversky(&p, &y, 0.6, 0.0).unwrap(),
        ),
    ] {
        assert_eq!(a, b);
    }
}

#[test]
fn asymmetric_focal_background_uses_own_probability() {
    // Background element with p_t = 0.7: (1 - δ) (0.3)^γ (-ln 0.7).
    let (p, y) = binary(&[0.3], &[0]);
    let v = asym_focal(&p, &y, 0.6, 0.5, None).unwrap();
    close(v, 0.4 * 0.3f64.sqrt() * -(0.7f64.ln()), 1e-15);
}

#[test]
fn unified_focal_recovery_and_linearity() {
    let (p, y) = binary(&[0.8, 0.35, 0.6, 0.1, 0.92], &[1, 0, 0, 1, 1]);
    let sym = |lambda: f64, delta: f64, gamma: f64| {
        unified_focal(&p, &y, &UnifiedParams::new(Variant::Sym, lambda, delta, gamma)).unwrap()
    };
    close(sym(0.0, 0.5, 0.0), dice_loss(&p, &y).unwrap(), 1e-15);
    close(sym(1.0, 0.5, 0.0), 0.5 * cross_entropy(&p, &y).unwrap(), 1e-15);
    let mf = modified_focal(&p, &y, 0.6, 0.5, None).unwrap();
    let mft = modified_focal_tversky(&p, &y, 0.6, 0.5).unwrap();
    close(sym(0.5, 0.6, 0.5), 0.5 * (mf + mft), 1e-15);
}

#[test]
fn delta_convention_swaps_fp_and_fn_weights() {
    let (p, y) = binary(&[0.8, 0.6, 0.3], &[1, 1, 0]);
    let mut u = UnifiedParams::new(Variant::Sym, 0.0, 0.7, 0.0);
    let fn_heavy = unified_focal(&p, &y, &u).unwrap();
    close(fn_heavy, tversky_loss(&p, &y, 0.3, 0.7).unwrap(), 1e-15);
    u.delta_convention = DeltaConvention::Fp;
    let fp_heavy = unified_focal(&p, &y, &u).unwrap();
    close(fp_heavy, tversky_loss(&p, &y, 0.7, 0.3).unwrap(), 1e-15);
}

#[test]
fn ce_gradient_is_p_minus_y_over_n() {
    let z = logits(&[3, 2], &[0.3, -1.2, 2.0, 0.5, -0.4, 0.9]);
    let y = one_hot(&Labels::new(vec![3], vec![1, 0, 1]).unwrap(), 2).unwrap();
    let out = evaluate(&LossSpec::Ce, &z, &y).unwrap();
    let p = softmax(&z).unwrap();
    for ((g, pv), yv) in out.grad_logits.data().iter().zip(p.data()).zip(y.data()) {
        close(*g, (pv - yv) / 3.0, 1e-15);
    }
}

#[test]
fn perfect_prediction_is_a_minimum() {
    let z = logits(&[4, 2], &[-20.0, 20.0, 20.0, -20.0, 20.0, -20.0, -20.0, 20.0]);
    let y = one_hot(&Labels::new(vec![4], vec![1, 0, 0, 1]).unwrap(), 2).unwrap();
    let ce = evaluate(&LossSpec::Ce, &z, &y).unwrap();
    let dice = evaluate(&LossSpec::Dice, &z, &y).unwrap();
    assert!(ce.value <= 1e-6 && dice.value <= 1e-6);
    assert!(dice.grad_logits.max_abs() <= 1e-6);
}

#[test]
fn evaluate_rejects_mismatched_shapes() {
    let z = logits(&[2, 2], &[0.0; 4]);
    let y = one_hot(&Labels::new(vec![3], vec![1, 0, 1]).unwrap(), 2).unwrap();
    assert!(matches!(
        evaluate(&LossSpec::Ce, &z, &y),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn rare_class_must_exist() {
    let z = logits(&[1, 2], &[0.0, 0.0]);
    let y = one_hot(&Labels::new(vec![1], vec![1]).unwrap(), 2).unwrap();
    let spec = LossSpec::UnifiedFocal(
        UnifiedParams::new(Variant::Asym, 0.5, 0.6, 0.5).with_rare_classes(vec![2]),
    );
    let err = evaluate(&spec, &z, &y).unwrap_err();
    assert!(err.to_string().contains("rare_classes"));
}

#[test]
fn fractional_exponents_at_the_clip_boundary_stay_finite() {
    let z = logits(&[2, 2], &[-40.0, 40.0, 40.0, -40.0]);
    let y = one_hot(&Labels::new(vec![2], vec![1, 0]).unwrap(), 2).unwrap();
    for p in presets() {
        let out = evaluate(&p.spec, &z, &y).unwrap();
        assert!(out.value.is_finite(), "{}", p.name);
        assert!(out.grad_logits.data().iter().all(|g| g.is_finite()), "{}", p.name);
    }
}

#[test]
fn multiclass_nested_rare_classes() {
    let z = logits(&[3, 3], &[0.2, 1.0, -0.5, 1.5, 0.1, 0.3, -0.3, 0.4, 0.9]);
    let y = one_hot(&Labels::new(vec![3], vec![1, 0, 2]).unwrap(), 3).unwrap();
    let out = evaluate(&preset("unified_focal_asym").unwrap(), &z, &y).unwrap();
    assert_eq!(out.per_class_terms.as_ref().unwrap().len(), 3);
    // Gradients of a softmax head sum to zero across classes.
    for row in out.grad_logits.rows() {
        assert!(row.iter().sum::<f64>().abs() < 1e-15);
    }
}
