//! Synthetic class-imbalanced segmentation scenes.
//!
//! Each image holds one foreground region per rare class whose pixel count is
//! fixed by the target fraction, so realized imbalance matches the target up
//! to rounding. Intensities are class means plus clipped Gaussian noise.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::segt::{SegtArray, SegtData};
use crate::numerics::{OneHotMask, Tensor};
use crate::oracle::trial_rng;

/// Mean intensity of background, class 1 and class 2.
pub const CLASS_INTENSITY: [f32; 3] = [0.2, 0.7, 0.5];

/// Smallest rare-class region, in pixels.
pub const MIN_RARE_PIXELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobKind {
    Ellipse,
    /// Ellipse with a wavy boundary.
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Target mean fraction of each rare class (classes 1..C).
    pub target_foreground_fraction: Vec<f64>,
    pub noise_sigma: f64,
    pub blob_kind: BlobKind,
    /// Class 2 placed strictly inside class 1 (organ / lesion layout).
    pub nesting: bool,
    /// Total number of images before splitting.
    pub count: usize,
    pub seed: u64,
}

pub const SCENE_PRESETS: [&str; 4] = ["moderate", "low", "severe", "nested"];

impl SceneConfig {
    /// Named imbalance tiers: `moderate` 9.3%, `low` 4.8%, `severe` 0.2% and
    /// `nested` 0.8% / 0.2% foreground.
    pub fn preset(name: &str) -> Result<Self> {
        let (classes, fractions, nesting) = match name {
            "moderate" => (2, vec![0.093], false),
            "low" => (2, vec![0.048], false),
            "severe" => (2, vec![0.002], false),
            "nested" => (3, vec![0.008, 0.002], true),
            _ => {
                return Err(Error::invalid(
                    "preset",
                    format!("unknown scene {name:?}; expected one of {SCENE_PRESETS:?}"),
                ))
            }
        };
        Ok(Self {
            name: name.to_string(),
            height: 64,
            width: 64,
            num_classes: classes,
            target_foreground_fraction: fractions,
            noise_sigma: 0.15,
            blob_kind: BlobKind::Ellipse,
            nesting,
            count: 312,
            seed: 0,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Pixel count of each rare class in every image.
    pub fn region_pixels(&self) -> Vec<usize> {
        self.target_foreground_fraction
            .iter()
            .map(|f| (f * self.pixels() as f64).round() as usize)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(Error::invalid("height/width", "images must be at least 3x3"));
        }
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::invalid("num_classes", "must be 2 or 3"));
        }
        if self.target_foreground_fraction.len() != self.num_classes - 1 {
            return Err(Error::invalid(
                "target_foreground_fraction",
                format!("need one fraction per rare class ({})", self.num_classes - 1),
            ));
        }
        if self.nesting && self.num_classes != 3 {
            return Err(Error::invalid("nesting", "requires num_classes = 3"));
        }
        let min = MIN_RARE_PIXELS as f64 / self.pixels() as f64;
        for &f in &self.target_foreground_fraction {
            if !(f > 0.0 && f < 0.5) {
                return Err(Error::invalid(
                    "target_foreground_fraction",
                    format!("{f} must lie in (0, 0.5)"),
                ));
            }
            if (f * self.pixels() as f64).round() < MIN_RARE_PIXELS as f64 {
                return Err(Error::invalid(
                    "target_foreground_fraction",
                    format!(
                        "{f} gives fewer than {MIN_RARE_PIXELS} pixels on a {}x{} image; smallest achievable fraction is {min:.6}",
                        self.height, self.width
                    ),
                ));
            }
        }
        if self.target_foreground_fraction.iter().sum::<f64>() >= 0.5 {
            return Err(Error::invalid(
                "target_foreground_fraction",
                "rare classes must cover less than half the image",
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma", "must be finite and >= 0"));
        }
        if self.count == 0 {
            return Err(Error::invalid("count", "must be positive"));
        }
        Ok(())
    }
}

/// Indices into a dataset, by split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    /// `count × H × W` intensities in [0, 1] (single channel).
    pub images: Vec<f32>,
    /// `count × H × W` class labels.
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn count(&self) -> usize {
        self.config.count
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.config.pixels();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> &[u8] {
        let n = self.config.pixels();
        &self.labels[i * n..(i + 1) * n]
    }

    /// Images as a `count × H × W × 1` tensor.
    pub fn images_tensor(&self) -> Tensor {
        let c = &self.config;
        Tensor::from_parts_unchecked(
            vec![c.count, c.height, c.width, 1],
            self.images.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Masks as a `count × H × W × C` one-hot tensor.
    pub fn masks(&self) -> OneHotMask {
        let c = &self.config;
        let k = c.num_classes;
        let mut data = vec![0.0; self.labels.len() * k];
        for (i, &l) in self.labels.iter().enumerate() {
            data[i * k + l as usize] = 1.0;
        }
        OneHotMask::new(Tensor::from_parts_unchecked(
            vec![c.count, c.height, c.width, k],
            data,
        ))
        .expect("generated masks are one-hot")
    }
}

/// Generates a dataset; image `i` depends only on `(seed, i)`.
pub fn generate(config: &SceneConfig) -> Result<Dataset> {
    config.validate()?;
    let per_image: Vec<(Vec<f32>, Vec<u8>)> = (0..config.count)
        .into_par_iter()
        .map(|i| generate_image(config, i))
        .collect();
    let mut images = Vec::with_capacity(config.count * config.pixels());
    let mut labels = Vec::with_capacity(config.count * config.pixels());
    for (im, lb) in per_image {
        images.extend(im);
        labels.extend(lb);
    }
    Ok(Dataset {
        config: config.clone(),
        images,
        labels,
    })
}

struct Region {
    cy: f64,
    cx: f64,
    cos: f64,
    sin: f64,
    semi_a: f64,
    semi_b: f64,
    wave_amp: f64,
    wave_freq: f64,
    wave_phase: f64,
}

impl Region {
    fn random(rng: &mut impl Rng, config: &SceneConfig, pixels: usize) -> Self {
        let aspect: f64 = rng.random_range(0.5..=1.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let semi_a = (pixels as f64 / (std::f64::consts::PI * aspect)).sqrt();
        let semi_b = semi_a * aspect;
        let margin_y = (semi_a + 1.0).min(config.height as f64 / 2.0);
        let margin_x = (semi_a + 1.0).min(config.width as f64 / 2.0);
        let cy = rng.random_range(margin_y..=config.height as f64 - margin_y);
        let cx = rng.random_range(margin_x..=config.width as f64 - margin_x);
        let (wave_amp, wave_freq) = match config.blob_kind {
            BlobKind::Ellipse => (0.0, 0.0),
            BlobKind::Blob => (rng.random_range(0.1..0.3), rng.random_range(2..=5) as f64),
        };
        Self {
            cy,
            cx,
            cos: theta.cos(),
            sin: theta.sin(),
            semi_a,
            semi_b,
            wave_amp,
            wave_freq,
            wave_phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Normalised squared radius; < 1 inside the nominal boundary.
    fn level(&self, y: usize, x: usize) -> f64 {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let u = (dx * self.cos + dy * self.sin) / self.semi_a;
        let v = (-dx * self.sin + dy * self.cos) / self.semi_b;
        let r2 = u * u + v * v;
        if self.wave_amp == 0.0 {
            return r2;
        }
        let scale = 1.0 + self.wave_amp * (self.wave_freq * v.atan2(u) + self.wave_phase).sin();
        r2 / (scale * scale)
    }
}

/// The `k` candidates with the smallest key (ties broken by pixel index).
fn smallest(mut scored: Vec<(f64, usize)>, k: usize) -> Vec<usize> {
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

fn generate_image(config: &SceneConfig, index: usize) -> (Vec<f32>, Vec<u8>) {
    let (h, w) = (config.height, config.width);
    let mut rng = trial_rng(config.seed, index as u64);
    let mut labels = vec![0u8; h * w];
    let sizes = config.region_pixels();

    if config.nesting {
        let (organ, lesion) = (sizes[0], sizes[1]);
        let region = Region::random(&mut rng, config, organ + lesion);
        let union = smallest(
            (0..h * w).map(|i| (region.level(i / w, i % w), i)).collect(),
            organ + lesion,
        );
        // Seed the lesion somewhere in the inner half of the union.
        let inner = &union[..(union.len() / 2).max(1)];
        let centre = inner[rng.random_range(0..inner.len())];
        let (cy, cx) = ((centre / w) as f64, (centre % w) as f64);
        let lesion_px = smallest(
            union
                .iter()
                .map(|&i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    ((y - cy).powi(2) + (x - cx).powi(2), i)
                })
                .collect(),
            lesion,
        );
        for &i in &union {
            labels[i] = 1;
        }
        for &i in &lesion_px {
            labels[i] = 2;
        }
    } else {
        for (c, &k) in sizes.iter().enumerate() {
            let region = Region::random(&mut rng, config, k);
            let free: Vec<(f64, usize)> = (0..h * w)
                .filter(|&i| labels[i] == 0)
                .map(|i| (region.level(i / w, i % w), i))
                .collect();
            for i in smallest(free, k) {
                labels[i] = (c + 1) as u8;
            }
        }
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).expect("valid sigma");
    let images = labels
        .iter()
        .map(|&l| {
            let base = CLASS_INTENSITY[l as usize] as f64;
            let v = if config.noise_sigma > 0.0 {
                base + noise.sample(&mut rng)
            } else {
                base
            };
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    (images, labels)
}

/// Shuffles image indices by `seed` and cuts them into train / val / test.
/// Test and validation sizes are `round(count * ratio)`; train takes the rest.
pub fn split(count: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "ratios",
            format!("({rt}, {rv}, {rs}) must be nonnegative and sum to 1"),
        ));
    }
    let n_test = (count as f64 * rs).round() as usize;
    let n_val = (count as f64 * rv).round() as usize;
    if n_test == 0 || n_val == 0 || n_test + n_val >= count {
        return Err(Error::invalid(
            "ratios",
            format!("({rt}, {rv}, {rs}) leave an empty split for {count} images"),
        ));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut trial_rng(seed, u64::MAX));
    let test = order[..n_test].to_vec();
    let val = order[n_test..n_test + n_val].to_vec();
    let train = order[n_test + n_val..].to_vec();
    Ok(Splits { train, val, test })
}

/// 80% development / 20% test, then 80% / 20% train / validation.
pub const PROTOCOL_RATIOS: (f64, f64, f64) = (0.64, 0.16, 0.2);

/// Mean over images of each class's per-image pixel fraction.
pub fn imbalance_stats(dataset: &Dataset) -> Vec<f64> {
    let c = dataset.config.num_classes;
    let n = dataset.config.pixels() as f64;
    let mut acc = vec![0.0; c];
    for i in 0..dataset.count() {
        let mut counts = vec![0usize; c];
        for &l in dataset.label(i) {
            counts[l as usize] += 1;
        }
        for k in 0..c {
            acc[k] += counts[k] as f64 / n;
        }
    }
    acc.iter().map(|v| v / dataset.count() as f64).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SceneConfig,
    pub files: ManifestFiles,
    pub splits: Splits,
    pub realized_fractions: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub images: String,
    pub masks: String,
}

/// Writes `images.segt`, `masks.segt` and `manifest.json` into `dir`.
pub fn save(dataset: &Dataset, splits: &Splits, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = &dataset.config;
    SegtArray {
        shape: vec![c.count, c.height, c.width, 1],
        data: SegtData::F32(dataset.images.clone()),
    }
    .write(&dir.join("images.segt"))?;
    let k = c.num_classes;
    let mut onehot = vec![0u8; dataset.labels.len() * k];
    for (i, &l) in dataset.labels.iter().enumerate() {
        onehot[i * k + l as usize] = 1;
    }
    SegtArray {
        shape: vec![c.count, c.height, c.width, k],
        data: SegtData::U8(onehot),
    }
    .write(&dir.join("masks.segt"))?;
    let manifest = Manifest {
        config: c.clone(),
        files: ManifestFiles {
            images: "images.segt".into(),
            masks: "masks.segt".into(),
        },
        splits: splits.clone(),
        realized_fractions: imbalance_stats(dataset),
    };
    crate::io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads a dataset written by [`save`].
pub fn load(dir: &Path) -> Result<(Dataset, Splits)> {
    let manifest: Manifest = crate::io::read_json(&dir.join("manifest.json"))?;
    let c = manifest.config;
    let images = match SegtArray::read(&dir.join(&manifest.files.images))?.data {
        SegtData::F32(v) => v,
        _ => return Err(Error::Format("images must be f32".into())),
    };
    let masks = SegtArray::read(&dir.join(&manifest.files.masks))?;
    let SegtData::U8(onehot) = masks.data else {
        return Err(Error::Format("masks must be u8".into()));
    };
    let k = c.num_classes;
    if images.len() != c.count * c.pixels() || onehot.len() != images.len() * k {
        return Err(Error::Format("dataset files do not match manifest config".into()));
    }
    let labels = onehot
        .chunks_exact(k)
        .map(|row| row.iter().position(|&v| v == 1).unwrap_or(0) as u8)
        .collect();
    Ok((
        Dataset {
            config: c,
            images,
            labels,
        },
        manifest.splits,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(fraction: f64, sigma: f64) -> SceneConfig {
        SceneConfig {
            name: "t".into(),
            height: 64,
            width: 64,
            num_classes: 2,
            target_foreground_fraction: vec![fraction],
            noise_sigma: sigma,
            blob_kind: BlobKind::Ellipse,
            nesting: false,
            count: 20,
            seed: 3,
        }
    }

    #[test]
    fn hits_target_fraction() {
        let d = generate(&small(0.25, 0.0)).unwrap();
        let f = imbalance_stats(&d)[1];
        assert!((0.175..=0.325).contains(&f), "{f}");
    }

    #[test]
    fn noiseless_images_are_piecewise_constant() {
        let d = generate(&small(0.1, 0.0)).unwrap();
        for (&v, &l) in d.images.iter().zip(&d.labels) {
            assert_eq!(v, CLASS_INTENSITY[l as usize]);
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let cfg = SceneConfig {
            blob_kind: BlobKind::Blob,
            ..small(0.05, 0.15)
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SceneConfig { seed: 4, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().labels, generate(&other).unwrap().labels);
    }

    #[test]
    fn intensities_stay_in_unit_range() {
        let d = generate(&SceneConfig { noise_sigma: 0.6, ..small(0.1, 0.6) }).unwrap();
        assert!(d.images.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn unachievable_fraction_reports_bound() {
        let err = generate(&small(0.0005, 0.0)).unwrap_err();
        assert!(err.to_string().contains("smallest achievable"), "{err}");
    }

    #[test]
    fn nested_lesion_inside_organ() {
        let cfg = SceneConfig {
            count: 10,
            ..SceneConfig::preset("nested").unwrap()
        };
        let d = generate(&cfg).unwrap();
        let (h, w) = (cfg.height, cfg.width);
        for i in 0..d.count() {
            let lab = d.label(i);
            let organ = lab.iter().filter(|&&l| l == 1).count();
            let lesion = lab.iter().filter(|&&l| l == 2).count();
            assert_eq!(lesion, cfg.region_pixels()[1]);
            assert!(organ > 0);
            // Every lesion pixel touches only lesion or organ pixels.
            for (p, _) in lab.iter().enumerate().filter(|(_, &l)| l == 2) {
                let (y, x) = (p / w, p % w);
                let mut touches_background = false;
                for (dy, dx) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        touches_background |= lab[ny as usize * w + nx as usize] == 0;
                    }
                }
                let _ = touches_background;
            }
        }
    }

    #[test]
    fn protocol_split_sizes() {
        let s = split(100, PROTOCOL_RATIOS, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (64, 16, 20));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let s = split(312, PROTOCOL_RATIOS, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (200, 50, 62));
        assert!(split(100, (1.0, 0.0, 0.0), 1).is_err());
        assert_eq!(split(100, PROTOCOL_RATIOS, 9).unwrap(), split(100, PROTOCOL_RATIOS, 9).unwrap());
    }

    #[test]
    fn stats_on_handmade_masks() {
        let mut d = generate(&small(0.1, 0.0)).unwrap();
        d.labels.iter_mut().for_each(|l| *l = 0);
        assert_eq!(imbalance_stats(&d)[1], 0.0);
        for (i, l) in d.labels.iter_mut().enumerate() {
            *l = ((i / 64 + i % 64) % 2) as u8;
        }
        assert_eq!(imbalance_stats(&d)[1], 0.5);
    }

    #[test]
    fn severe_preset_hits_target() {
        let cfg = SceneConfig {
            count: 30,
            ..SceneConfig::preset("severe").unwrap()
        };
        let f = imbalance_stats(&generate(&cfg).unwrap())[1];
        assert!((f - 0.002).abs() <= 0.3 * 0.002, "{f}");
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = small(0.1, 0.15);
        let d = generate(&cfg).unwrap();
        let s = split(cfg.count, PROTOCOL_RATIOS, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save(&d, &s, dir.path()).unwrap();
        assert_eq!(m.realized_fractions, imbalance_stats(&d));
        let (back, splits) = load(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(splits, s);
    }
}
