//! Declarative loss configuration and its JSON wire format.
//!
//! On the wire a spec is one flat object:
//!
//! ```json
//! {"family": "unified_focal_asym", "lambda": 0.5, "delta": 0.6, "gamma": 0.5, "rare_classes": [1]}
//! ```
//!
//! Each family accepts exactly its own fields; anything else is rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[serde(alias = "CE", alias = "cross_entropy")]
    Ce,
    #[serde(alias = "Focal")]
    Focal,
    #[serde(alias = "Dice")]
    Dice,
    #[serde(alias = "Tversky")]
    Tversky,
    #[serde(alias = "FocalTversky")]
    FocalTversky,
    #[serde(alias = "Combo")]
    Combo,
    #[serde(alias = "HybridFocal")]
    HybridFocal,
    #[serde(alias = "UnifiedFocalSym")]
    UnifiedFocalSym,
    #[serde(alias = "UnifiedFocalAsym")]
    UnifiedFocalAsym,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Ce,
        Family::Focal,
        Family::Dice,
        Family::Tversky,
        Family::FocalTversky,
        Family::Combo,
        Family::HybridFocal,
        Family::UnifiedFocalSym,
        Family::UnifiedFocalAsym,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Ce => "ce",
            Family::Focal => "focal",
            Family::Dice => "dice",
            Family::Tversky => "tversky",
            Family::FocalTversky => "focal_tversky",
            Family::Combo => "combo",
            Family::HybridFocal => "hybrid_focal",
            Family::UnifiedFocalSym => "unified_focal_sym",
            Family::UnifiedFocalAsym => "unified_focal_asym",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid("family", format!("unknown loss family {s:?}")))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Focal-loss class weight: one α for every class, or one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassWeights {
    Uniform(f64),
    PerClass(Vec<f64>),
}

impl ClassWeights {
    pub fn get(&self, class: usize) -> f64 {
        match self {
            ClassWeights::Uniform(a) => *a,
            ClassWeights::PerClass(v) => v[class],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocalParams {
    pub alpha: ClassWeights,
    pub gamma: f64,
}

/// Tversky weights: `alpha` on false positives, `beta` on false negatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TverskyParams {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalTverskyParams {
    pub alpha: f64,
    pub beta: f64,
    /// The per-class term is raised to `1 / gamma`.
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaConvention {
    /// δ weights false negatives and 1 − δ false positives.
    #[default]
    Fn,
    /// δ weights false positives and 1 − δ false negatives.
    Fp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Sym,
    Asym,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedParams {
    pub variant: Variant,
    pub lambda: f64,
    pub delta: f64,
    pub gamma: f64,
    /// `None` means every non-background class.
    pub rare_classes: Option<Vec<usize>>,
    pub delta_convention: DeltaConvention,
}

impl UnifiedParams {
    pub fn new(variant: Variant, lambda: f64, delta: f64, gamma: f64) -> Self {
        Self {
            variant,
            lambda,
            delta,
            gamma,
            rare_classes: None,
            delta_convention: DeltaConvention::Fn,
        }
    }

    pub fn with_rare_classes(mut self, rare: Vec<usize>) -> Self {
        self.rare_classes = Some(rare);
        self
    }

    pub(crate) fn is_rare(&self, class: usize) -> bool {
        match &self.rare_classes {
            Some(r) => r.contains(&class),
            None => class != 0,
        }
    }

    /// Weights `(fp, fn)` of the modified Tversky index.
    pub(crate) fn mti_weights(&self) -> (f64, f64) {
        match self.delta_convention {
            DeltaConvention::Fn => (1.0 - self.delta, self.delta),
            DeltaConvention::Fp => (self.delta, 1.0 - self.delta),
        }
    }
}

/// A loss family together with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossSpecWire", into = "LossSpecWire")]
pub enum LossSpec {
    Ce,
    Focal(FocalParams),
    Dice,
    Tversky(TverskyParams),
    FocalTversky(FocalTverskyParams),
    /// `alpha` mixes the modified cross entropy against DSC; `beta` weights
    /// foreground against background terms of the cross entropy.
    Combo { alpha: f64, beta: f64 },
    HybridFocal {
        lambda: f64,
        focal: FocalParams,
        focal_tversky: FocalTverskyParams,
    },
    UnifiedFocal(UnifiedParams),
}

impl LossSpec {
    pub fn focal(alpha: f64, gamma: f64) -> Self {
        LossSpec::Focal(FocalParams {
            alpha: ClassWeights::Uniform(alpha),
            gamma,
        })
    }

    pub fn tversky(alpha: f64, beta: f64) -> Self {
        LossSpec::Tversky(TverskyParams { alpha, beta })
    }

    pub fn focal_tversky(alpha: f64, beta: f64, gamma: f64) -> Self {
        LossSpec::FocalTversky(FocalTverskyParams { alpha, beta, gamma })
    }

    pub fn combo(alpha: f64, beta: f64) -> Self {
        LossSpec::Combo { alpha, beta }
    }

    pub fn unified_sym(lambda: f64, delta: f64, gamma: f64) -> Self {
        LossSpec::UnifiedFocal(UnifiedParams::new(Variant::Sym, lambda, delta, gamma))
    }

    pub fn unified_asym(lambda: f64, delta: f64, gamma: f64) -> Self {
        LossSpec::UnifiedFocal(UnifiedParams::new(Variant::Asym, lambda, delta, gamma))
    }

    pub fn family(&self) -> Family {
        match self {
            LossSpec::Ce => Family::Ce,
            LossSpec::Focal(_) => Family::Focal,
            LossSpec::Dice => Family::Dice,
            LossSpec::Tversky(_) => Family::Tversky,
            LossSpec::FocalTversky(_) => Family::FocalTversky,
            LossSpec::Combo { .. } => Family::Combo,
            LossSpec::HybridFocal { .. } => Family::HybridFocal,
            LossSpec::UnifiedFocal(u) => match u.variant {
                Variant::Sym => Family::UnifiedFocalSym,
                Variant::Asym => Family::UnifiedFocalAsym,
            },
        }
    }

    /// Range checks that do not depend on the number of classes.
    pub fn validate(&self) -> Result<()> {
        match self {
            LossSpec::Ce | LossSpec::Dice => Ok(()),
            LossSpec::Focal(f) => validate_focal(f, "alpha", "gamma"),
            LossSpec::Tversky(t) => {
                unit("alpha", t.alpha)?;
                unit("beta", t.beta)
            }
            LossSpec::FocalTversky(ft) => validate_ft(ft),
            LossSpec::Combo { alpha, beta } => {
                unit("alpha", *alpha)?;
                unit("beta", *beta)
            }
            LossSpec::HybridFocal {
                lambda,
                focal,
                focal_tversky,
            } => {
                unit("lambda", *lambda)?;
                validate_focal(focal, "focal_alpha", "focal_gamma")?;
                validate_ft(focal_tversky)
            }
            LossSpec::UnifiedFocal(u) => {
                unit("lambda", u.lambda)?;
                unit("delta", u.delta)?;
                if !(0.0..1.0).contains(&u.gamma) {
                    return Err(Error::invalid(
                        "gamma",
                        format!("{} must lie in [0, 1) for unified focal losses", u.gamma),
                    ));
                }
                if let Some(rare) = &u.rare_classes {
                    if rare.is_empty() {
                        return Err(Error::invalid("rare_classes", "must not be empty"));
                    }
                    if rare.contains(&0) {
                        return Err(Error::invalid(
                            "rare_classes",
                            "class 0 is background and cannot be rare",
                        ));
                    }
                    let mut sorted = rare.clone();
                    sorted.sort_unstable();
                    sorted.dedup();
                    if sorted.len() != rare.len() {
                        return Err(Error::invalid("rare_classes", "contains duplicates"));
                    }
                }
                Ok(())
            }
        }
    }

    /// Checks that depend on the class count of the data.
    pub(crate) fn validate_for_classes(&self, classes: usize) -> Result<()> {
        if classes < 2 {
            return Err(Error::invalid(
                "truth",
                format!("need at least 2 class channels, got {classes}"),
            ));
        }
        let weights = match self {
            LossSpec::Focal(f) => Some((&f.alpha, "alpha")),
            LossSpec::HybridFocal { focal, .. } => Some((&focal.alpha, "focal_alpha")),
            _ => None,
        };
        if let Some((ClassWeights::PerClass(v), field)) = weights {
            if v.len() != classes {
                return Err(Error::invalid(
                    field,
                    format!("{} class weights for {classes} classes", v.len()),
                ));
            }
        }
        if let LossSpec::UnifiedFocal(UnifiedParams {
            rare_classes: Some(rare),
            ..
        }) = self
        {
            if let Some(r) = rare.iter().find(|&&r| r >= classes) {
                return Err(Error::invalid(
                    "rare_classes",
                    format!("class {r} out of range for {classes} classes"),
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("loss spec always serialises")
    }
}

fn unit(field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(field, format!("{v} must lie in [0, 1]")));
    }
    Ok(())
}

fn validate_focal(f: &FocalParams, alpha_field: &str, gamma_field: &str) -> Result<()> {
    match &f.alpha {
        ClassWeights::Uniform(a) => unit(alpha_field, *a)?,
        ClassWeights::PerClass(v) => {
            if v.is_empty() {
                return Err(Error::invalid(alpha_field, "class weight list is empty"));
            }
            for a in v {
                unit(alpha_field, *a)?;
            }
        }
    }
    if !(f.gamma >= 0.0 && f.gamma.is_finite()) {
        return Err(Error::invalid(
            gamma_field,
            format!("{} must be a finite value >= 0", f.gamma),
        ));
    }
    Ok(())
}

fn validate_ft(ft: &FocalTverskyParams) -> Result<()> {
    unit("alpha", ft.alpha)?;
    unit("beta", ft.beta)?;
    if !(ft.gamma > 0.0 && ft.gamma.is_finite()) {
        return Err(Error::invalid(
            "gamma",
            format!("{} must be > 0 (the exponent is 1/gamma)", ft.gamma),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossSpecWire {
    family: Option<Family>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<ClassWeights>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    focal_alpha: Option<ClassWeights>,
    #[serde(skip_serializing_if = "Option::is_none")]
    focal_gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rare_classes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_convention: Option<DeltaConvention>,
}

impl LossSpecWire {
    fn present(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        macro_rules! check {
            ($($f:ident),*) => { $( if self.$f.is_some() { v.push(stringify!($f)); } )* };
        }
        check!(alpha, beta, gamma, delta, lambda, focal_alpha, focal_gamma, rare_classes, delta_convention);
        v
    }
}

fn need<T: Clone>(v: &Option<T>, field: &str, family: Family) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::invalid(field, format!("required for family `{family}`")))
}

fn scalar(v: &Option<ClassWeights>, field: &str, family: Family) -> Result<f64> {
    match need(v, field, family)? {
        ClassWeights::Uniform(a) => Ok(a),
        ClassWeights::PerClass(_) => Err(Error::invalid(
            field,
            format!("must be a single number for family `{family}`"),
        )),
    }
}

impl TryFrom<LossSpecWire> for LossSpec {
    type Error = Error;

    fn try_from(w: LossSpecWire) -> Result<Self> {
        let family = w
            .family
            .ok_or_else(|| Error::invalid("family", "missing"))?;
        let allowed: &[&str] = match family {
            Family::Ce | Family::Dice => &[],
            Family::Focal => &["alpha", "gamma"],
            Family::Tversky | Family::Combo => &["alpha", "beta"],
            Family::FocalTversky => &["alpha", "beta", "gamma"],
            Family::HybridFocal => &["lambda", "focal_alpha", "focal_gamma", "alpha", "beta", "gamma"],
            Family::UnifiedFocalSym | Family::UnifiedFocalAsym => {
                &["lambda", "delta", "gamma", "rare_classes", "delta_convention"]
            }
        };
        if let Some(extra) = w.present().into_iter().find(|f| !allowed.contains(f)) {
            return Err(Error::invalid(
                extra,
                format!("not a parameter of family `{family}`"),
            ));
        }
        let spec = match family {
            Family::Ce => LossSpec::Ce,
            Family::Dice => LossSpec::Dice,
            Family::Focal => LossSpec::Focal(FocalParams {
                alpha: need(&w.alpha, "alpha", family)?,
                gamma: need(&w.gamma, "gamma", family)?,
            }),
            Family::Tversky => LossSpec::Tversky(TverskyParams {
                alpha: scalar(&w.alpha, "alpha", family)?,
                beta: need(&w.beta, "beta", family)?,
            }),
            Family::FocalTversky => LossSpec::FocalTversky(FocalTverskyParams {
                alpha: scalar(&w.alpha, "alpha", family)?,
                beta: need(&w.beta, "beta", family)?,
                gamma: need(&w.gamma, "gamma", family)?,
            }),
            Family::Combo => LossSpec::Combo {
                alpha: scalar(&w.alpha, "alpha", family)?,
                beta: need(&w.beta, "beta", family)?,
            },
            Family::HybridFocal => LossSpec::HybridFocal {
                lambda: need(&w.lambda, "lambda", family)?,
                focal: FocalParams {
                    alpha: need(&w.focal_alpha, "focal_alpha", family)?,
                    gamma: need(&w.focal_gamma, "focal_gamma", family)?,
                },
                focal_tversky: FocalTverskyParams {
                    alpha: scalar(&w.alpha, "alpha", family)?,
                    beta: need(&w.beta, "beta", family)?,
                    gamma: need(&w.gamma, "gamma", family)?,
                },
            },
            Family::UnifiedFocalSym | Family::UnifiedFocalAsym => {
                LossSpec::UnifiedFocal(UnifiedParams {
                    variant: if family == Family::UnifiedFocalSym {
                        Variant::Sym
                    } else {
                        Variant::Asym
                    },
                    lambda: need(&w.lambda, "lambda", family)?,
                    delta: need(&w.delta, "delta", family)?,
                    gamma: need(&w.gamma, "gamma", family)?,
                    rare_classes: w.rare_classes.clone(),
                    delta_convention: w.delta_convention.unwrap_or_default(),
                })
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<LossSpec> for LossSpecWire {
    fn from(spec: LossSpec) -> Self {
        let mut w = LossSpecWire {
            family: Some(spec.family()),
            ..Default::default()
        };
        match spec {
            LossSpec::Ce | LossSpec::Dice => {}
            LossSpec::Focal(f) => {
                w.alpha = Some(f.alpha);
                w.gamma = Some(f.gamma);
            }
            LossSpec::Tversky(t) => {
                w.alpha = Some(ClassWeights::Uniform(t.alpha));
                w.beta = Some(t.beta);
            }
            LossSpec::FocalTversky(ft) => {
                w.alpha = Some(ClassWeights::Uniform(ft.alpha));
                w.beta = Some(ft.beta);
                w.gamma = Some(ft.gamma);
            }
            LossSpec::Combo { alpha, beta } => {
                w.alpha = Some(ClassWeights::Uniform(alpha));
                w.beta = Some(beta);
            }
            LossSpec::HybridFocal {
                lambda,
                focal,
                focal_tversky,
            } => {
                w.lambda = Some(lambda);
                w.focal_alpha = Some(focal.alpha);
                w.focal_gamma = Some(focal.gamma);
                w.alpha = Some(ClassWeights::Uniform(focal_tversky.alpha));
                w.beta = Some(focal_tversky.beta);
                w.gamma = Some(focal_tversky.gamma);
            }
            LossSpec::UnifiedFocal(u) => {
                w.lambda = Some(u.lambda);
                w.delta = Some(u.delta);
                w.gamma = Some(u.gamma);
                w.rare_classes = u.rare_classes;
                if u.delta_convention != DeltaConvention::Fn {
                    w.delta_convention = Some(u.delta_convention);
                }
            }
        }
        w
    }
}

/// A named hyperparameter preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub spec: LossSpec,
}

/// The eight losses compared by the benchmark, in table order.
pub const BENCH_PRESETS: [&str; 8] = [
    "ce",
    "focal",
    "dice",
    "tversky",
    "focal_tversky",
    "combo",
    "unified_focal_sym",
    "unified_focal_asym",
];

/// Every shipped preset: the benchmark eight plus the Hybrid Focal default.
pub fn presets() -> Vec<Preset> {
    let focal = FocalParams {
        alpha: ClassWeights::Uniform(0.25),
        gamma: 2.0,
    };
    let ft = FocalTverskyParams {
        alpha: 0.3,
        beta: 0.7,
        gamma: 4.0 / 3.0,
    };
    [
        ("ce", LossSpec::Ce),
        ("focal", LossSpec::Focal(focal.clone())),
        ("dice", LossSpec::Dice),
        ("tversky", LossSpec::tversky(0.3, 0.7)),
        ("focal_tversky", LossSpec::FocalTversky(ft)),
        ("combo", LossSpec::combo(0.5, 0.5)),
        (
            "hybrid_focal",
            LossSpec::HybridFocal {
                lambda: 0.5,
                focal,
                focal_tversky: ft,
            },
        ),
        ("unified_focal_sym", LossSpec::unified_sym(0.5, 0.6, 0.5)),
        ("unified_focal_asym", LossSpec::unified_asym(0.5, 0.6, 0.5)),
    ]
    .into_iter()
    .map(|(name, spec)| Preset {
        name: name.to_string(),
        spec,
    })
    .collect()
}

/// Looks up a preset by name; `unified_focal` names the symmetric variant.
pub fn preset(name: &str) -> Result<LossSpec> {
    let key = if name == "unified_focal" {
        "unified_focal_sym"
    } else {
        name
    };
    presets()
        .into_iter()
        .find(|p| p.name == key)
        .map(|p| p.spec)
        .ok_or_else(|| Error::invalid("preset", format!("unknown preset {name:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_every_preset() {
        for p in presets() {
            let json = p.spec.to_json();
            let back = LossSpec::from_json(&json).unwrap();
            assert_eq!(back, p.spec, "{json}");
        }
    }

    #[test]
    fn preset_values() {
        assert_eq!(preset("focal").unwrap(), LossSpec::focal(0.25, 2.0));
        assert_eq!(preset("tversky").unwrap(), LossSpec::tversky(0.3, 0.7));
        assert_eq!(
            preset("focal_tversky").unwrap(),
            LossSpec::focal_tversky(0.3, 0.7, 4.0 / 3.0)
        );
        assert_eq!(preset("combo").unwrap(), LossSpec::combo(0.5, 0.5));
        assert_eq!(
            preset("unified_focal").unwrap(),
            LossSpec::unified_sym(0.5, 0.6, 0.5)
        );
        assert!(preset("dicefocal").is_err());
    }

    #[test]
    fn rejects_unknown_and_foreign_fields() {
        let err = LossSpec::from_json(r#"{"family":"dice","colour":1}"#).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        let err = LossSpec::from_json(r#"{"family":"dice","gamma":1}"#).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
        let err = LossSpec::from_json(r#"{"family":"focal","alpha":0.25}"#).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
        let err = LossSpec::from_json(r#"{"family":"softmaxish"}"#).unwrap_err();
        assert!(err.to_string().contains("softmaxish"), "{err}");
    }

    #[test]
    fn range_checks() {
        assert!(LossSpec::from_json(r#"{"family":"focal","alpha":0.25,"gamma":-1}"#).is_err());
        assert!(LossSpec::from_json(r#"{"family":"focal_tversky","alpha":0.3,"beta":0.7,"gamma":0}"#).is_err());
        assert!(LossSpec::from_json(r#"{"family":"tversky","alpha":1.3,"beta":0.7}"#).is_err());
        let uf = r#"{"family":"unified_focal_asym","lambda":0.5,"delta":0.6,"gamma":1.0}"#;
        assert!(LossSpec::from_json(uf).is_err());
        let uf = r#"{"family":"unified_focal_asym","lambda":0.5,"delta":0.6,"gamma":0.5,"rare_classes":[0]}"#;
        assert!(LossSpec::from_json(uf).is_err());
        let uf = r#"{"family":"unified_focal_asym","lambda":0.5,"delta":0.6,"gamma":0.5,"rare_classes":[]}"#;
        assert!(LossSpec::from_json(uf).is_err());
    }

    #[test]
    fn accepts_capitalised_family_names_and_class_weight_vectors() {
        let s = LossSpec::from_json(r#"{"family":"UnifiedFocalSym","lambda":1,"delta":0.5,"gamma":0}"#)
            .unwrap();
        assert_eq!(s.family(), Family::UnifiedFocalSym);
        let s = LossSpec::from_json(r#"{"family":"focal","alpha":[0.25,0.75],"gamma":2}"#).unwrap();
        let LossSpec::Focal(f) = s else { panic!() };
        assert_eq!(f.alpha, ClassWeights::PerClass(vec![0.25, 0.75]));
    }

    #[test]
    fn delta_convention_switch() {
        let s = LossSpec::from_json(
            r#"{"family":"unified_focal_sym","lambda":0.5,"delta":0.6,"gamma":0.5,"delta_convention":"fp"}"#,
        )
        .unwrap();
        let LossSpec::UnifiedFocal(u) = &s else { panic!() };
        assert_eq!(u.mti_weights(), (0.6, 1.0 - 0.6));
        assert!(s.to_json().contains("\"fp\""));
    }
}
