//! Synthetic paired colour/infrared fundus-like images.
//!
//! A sample of grade `g` carries `g` planted lesions, each one of three
//! archetypes: a dark hemorrhage-like blob, a bright exudate-like blob, or a
//! thin detachment-like arc. With probability `complementarity` a lesion is
//! exclusive to one modality: blobs are hidden under the colour image's haze
//! (blurred and attenuated by `occlusion`), arcs are nearly invisible in the
//! infrared image. The remaining lesions appear in both images with
//! modality-specific contrast.

mod augment;
mod io;

pub use augment::{apply_augment, augment, AugmentConfig, AugmentParams, Jitter};
pub use io::{
    load_dataset, read_dataset, save_dataset, write_dataset, FORMAT_MAGIC, FORMAT_VERSION,
};

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::tensor::Tensor;

/// Class proportions of the clinical set this generator stands in for (no DR … PDR).
pub const CLINICAL_GRADE_COUNTS: [u32; 5] = [714, 123, 249, 267, 360];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelDistribution {
    /// Sample `i` has grade `i mod k`.
    Balanced,
    /// Grades drawn with the clinical imbalance; requires `k == 5`.
    Clinical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub k: usize,
    /// Fraction of lesions visible in only one modality, in `[0, 1]`.
    pub complementarity: f64,
    /// Haze strength over the colour image.
    pub occlusion: f64,
    /// Standard deviation of per-pixel Gaussian noise, independent per modality.
    pub noise: f64,
    pub labels: LabelDistribution,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 500,
            height: 32,
            width: 32,
            channels: 1,
            k: 5,
            complementarity: 0.7,
            occlusion: 2.0,
            noise: 0.03,
            labels: LabelDistribution::Balanced,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("synth.height", "images must be at least 8x8"));
        }
        if self.channels == 0 {
            return Err(Error::config("synth.channels", "must be positive"));
        }
        if !(2..=255).contains(&self.k) {
            return Err(Error::config("synth.k", "class count must be in 2..=255"));
        }
        if !(0.0..=1.0).contains(&self.complementarity) {
            return Err(Error::config(
                "synth.complementarity",
                format!("{} is outside [0, 1]", self.complementarity),
            ));
        }
        if !(self.occlusion >= 0.0 && self.occlusion.is_finite()) {
            return Err(Error::config(
                "synth.occlusion",
                "must be finite and non-negative",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(
                "synth.noise",
                "must be finite and non-negative",
            ));
        }
        if self.labels == LabelDistribution::Clinical && self.k != CLINICAL_GRADE_COUNTS.len() {
            return Err(Error::config(
                "synth.labels",
                "clinical label distribution needs k = 5",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub cfp: Tensor<f32>,
    pub ifp: Tensor<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub k: usize,
    pub samples: Vec<PairedSample>,
    /// Generator settings, when the dataset came from [`generate_dataset`].
    pub config: Option<SynthConfig>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.k];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            k: self.k,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            config: self.config.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Archetype {
    Hemorrhage,
    Exudate,
    Arc,
}

#[derive(Debug, Clone, Copy)]
struct Lesion {
    kind: Archetype,
    cy: f64,
    cx: f64,
    size: f64,
    angle: f64,
    span: f64,
    exclusive: bool,
}

impl Lesion {
    /// Unit-amplitude footprint at pixel centre `(y, x)`.
    fn footprint(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let d2 = dy * dy + dx * dx;
        match self.kind {
            Archetype::Hemorrhage | Archetype::Exudate => {
                (-d2 / (2.0 * self.size * self.size)).exp()
            }
            Archetype::Arc => {
                let radial = d2.sqrt() - self.size;
                let theta = dy.atan2(dx);
                let rel = (theta - self.angle).rem_euclid(2.0 * PI);
                if rel <= self.span {
                    (-(radial * radial) / (2.0 * 0.6 * 0.6)).exp()
                } else {
                    0.0
                }
            }
        }
    }

    /// Signed contrast in the colour and infrared images.
    fn contrast(&self, occlusion: f64) -> (f64, f64) {
        let veil = 1.0 / (1.0 + occlusion * occlusion);
        match (self.kind, self.exclusive) {
            (Archetype::Hemorrhage, false) => (-0.30, -0.30),
            (Archetype::Exudate, false) => (0.30, 0.25),
            (Archetype::Arc, false) => (0.35, 0.20),
            (Archetype::Hemorrhage, true) => (-0.30 * veil, -0.30),
            (Archetype::Exudate, true) => (0.30 * veil, 0.25),
            (Archetype::Arc, true) => (0.35, 0.03),
        }
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (index as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )
}

fn draw_label(cfg: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> usize {
    match cfg.labels {
        LabelDistribution::Balanced => index % cfg.k,
        LabelDistribution::Clinical => {
            let total: u32 = CLINICAL_GRADE_COUNTS.iter().sum();
            let mut u = rng.gen_range(0..total);
            for (g, &c) in CLINICAL_GRADE_COUNTS.iter().enumerate() {
                if u < c {
                    return g;
                }
                u -= c;
            }
            CLINICAL_GRADE_COUNTS.len() - 1
        }
    }
}

fn place_lesions(cfg: &SynthConfig, grade: usize, rng: &mut ChaCha8Rng) -> Vec<Lesion> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let (cy0, cx0) = (h / 2.0, w / 2.0);
    let radius = 0.48 * h.min(w);
    let min_sep = 0.2 * h.min(w);
    let mut lesions: Vec<Lesion> = Vec::with_capacity(grade);
    for _ in 0..grade {
        // Arcs are drawn as often as both blob kinds together, so that at any
        // complementarity each modality sees the same expected share of lesions.
        let kind = match rng.gen_range(0..4) {
            0 => Archetype::Hemorrhage,
            1 => Archetype::Exudate,
            _ => Archetype::Arc,
        };
        let mut centre = (cy0, cx0);
        for _ in 0..100 {
            let r = radius * 0.7 * rng.gen::<f64>().sqrt();
            let t = rng.gen_range(0.0..2.0 * PI);
            centre = (cy0 + r * t.sin(), cx0 + r * t.cos());
            let clear = lesions
                .iter()
                .all(|l| ((l.cy - centre.0).powi(2) + (l.cx - centre.1).powi(2)).sqrt() >= min_sep);
            if clear {
                break;
            }
        }
        let scale = h.min(w) / 32.0;
        let size = match kind {
            Archetype::Arc => rng.gen_range(3.0..4.5) * scale,
            _ => rng.gen_range(1.2..2.0) * scale,
        };
        lesions.push(Lesion {
            kind,
            cy: centre.0,
            cx: centre.1,
            size,
            angle: rng.gen_range(0.0..2.0 * PI),
            span: rng.gen_range(0.5 * PI..PI),
            exclusive: rng.gen::<f64>() < cfg.complementarity,
        });
    }
    lesions
}

fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let o = ki as isize - r;
                    let (sy, sx) = if horizontal {
                        (y as isize, x as isize + o)
                    } else {
                        (y as isize + o, x as isize)
                    };
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        acc += kv * src[sy as usize * w + sx as usize];
                    }
                }
                out[y * w + x] = acc / ksum;
            }
        }
        out
    };
    let tmp = pass(img, true);
    pass(&tmp, false)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; avoids pulling a distribution type into the per-pixel loop.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Renders one sample. Pure function of `(cfg, index)`.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> PairedSample {
    let mut rng = sample_rng(cfg.seed, index);
    let label = draw_label(cfg, index, &mut rng);
    let lesions = place_lesions(cfg, label, &mut rng);
    let (h, w) = (cfg.height, cfg.width);
    let (cy0, cx0) = (h as f64 / 2.0, w as f64 / 2.0);
    let radius = 0.48 * h.min(w) as f64;
    let brightness = rng.gen_range(-0.05..0.05);

    let mut cfp = vec![0.0; h * w];
    let mut ifp = vec![0.0; h * w];
    let mut hidden = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let rho2 = ((py - cy0).powi(2) + (px - cx0).powi(2)) / (radius * radius);
            let i = y * w + x;
            if rho2 <= 1.0 {
                cfp[i] = 0.50 + 0.12 * (1.0 - rho2) + brightness;
                ifp[i] = 0.40 + 0.15 * (1.0 - rho2) + brightness;
            } else {
                cfp[i] = 0.05;
                ifp[i] = 0.03;
            }
            for l in &lesions {
                let f = l.footprint(py, px);
                if f < 1e-6 {
                    continue;
                }
                let (c_cf, c_if) = l.contrast(cfg.occlusion);
                ifp[i] += c_if * f;
                let blob = matches!(l.kind, Archetype::Hemorrhage | Archetype::Exudate);
                if l.exclusive && blob {
                    hidden[i] += c_cf * f;
                } else {
                    cfp[i] += c_cf * f;
                }
            }
        }
    }
    let hidden = gaussian_blur(&hidden, h, w, cfg.occlusion);
    for (c, v) in cfp.iter_mut().zip(&hidden) {
        *c += v;
    }

    let c = cfg.channels;
    let mut cfp_px = Vec::with_capacity(h * w * c);
    let mut ifp_px = Vec::with_capacity(h * w * c);
    for i in 0..h * w {
        for ch in 0..c {
            let gain = 1.0 - 0.1 * ch as f64;
            let a = cfp[i] * gain + cfg.noise * gaussian(&mut rng);
            let b = ifp[i] * gain + cfg.noise * gaussian(&mut rng);
            cfp_px.push(a.clamp(0.0, 1.0) as f32);
            ifp_px.push(b.clamp(0.0, 1.0) as f32);
        }
    }
    PairedSample {
        cfp: Tensor::new(vec![h, w, c], cfp_px).expect("extents match"),
        ifp: Tensor::new(vec![h, w, c], ifp_px).expect("extents match"),
        label,
    }
}

/// Generates the full dataset; samples are independent so generation fans out across threads.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let indices: Vec<usize> = (0..cfg.n_samples).collect();
    let samples = par_map(&indices, |&i| generate_sample(cfg, i));
    Ok(Dataset {
        height: cfg.height,
        width: cfg.width,
        channels: cfg.channels,
        k: cfg.k,
        samples,
        config: Some(cfg.clone()),
    })
}

/// Per-class proportional split. Each class contributes `max(1, round((1−frac)·n_c))`
/// validation samples. Both halves keep the original sample order.
pub fn stratified_split(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::config(
            "train_frac",
            format!("{train_frac} is outside (0, 1)"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_idx = Vec::new();
    let mut train_idx = Vec::new();
    for class in 0..ds.k {
        let mut members: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.samples[i].label == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::ClassTooSmall {
                class,
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n_val = (((1.0 - train_frac) * members.len() as f64).round() as usize)
            .clamp(1, members.len() - 1);
        val_idx.extend_from_slice(&members[..n_val]);
        train_idx.extend_from_slice(&members[n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&val_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n_samples: n,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            seed: 7,
            ..small(100)
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let other = generate_dataset(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.samples, other.samples);
    }

    #[test]
    fn values_in_unit_range_and_extents_match() {
        let ds = generate_dataset(&SynthConfig {
            channels: 3,
            ..small(20)
        })
        .unwrap();
        for s in &ds.samples {
            assert_eq!(s.cfp.shape(), &[32, 32, 3]);
            assert_eq!(s.cfp.shape(), s.ifp.shape());
            assert!(s
                .cfp
                .data()
                .iter()
                .chain(s.ifp.data())
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn balanced_histogram() {
        let ds = generate_dataset(&small(100)).unwrap();
        assert_eq!(ds.label_histogram(), vec![20; 5]);
    }

    #[test]
    fn clinical_preset_is_imbalanced() {
        let ds = generate_dataset(&SynthConfig {
            labels: LabelDistribution::Clinical,
            ..small(400)
        })
        .unwrap();
        let h = ds.label_histogram();
        assert!(h[0] > h[1], "{h:?}");
        let bad = SynthConfig {
            labels: LabelDistribution::Clinical,
            k: 3,
            ..small(10)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate_dataset(&SynthConfig {
            height: 4,
            ..small(1)
        })
        .is_err());
        assert!(generate_dataset(&SynthConfig {
            complementarity: 1.5,
            ..small(1)
        })
        .is_err());
    }

    #[test]
    fn split_80_20_per_class() {
        let ds = generate_dataset(&small(100)).unwrap();
        let (train, val) = stratified_split(&ds, 0.8, 3).unwrap();
        assert_eq!((train.len(), val.len()), (80, 20));
        assert_eq!(train.label_histogram(), vec![16; 5]);
        assert_eq!(val.label_histogram(), vec![4; 5]);
    }

    #[test]
    fn split_forces_one_validation_sample() {
        let ds = generate_dataset(&small(15)).unwrap();
        let (train, val) = stratified_split(&ds, 0.95, 0).unwrap();
        assert_eq!(val.label_histogram(), vec![1; 5]);
        assert_eq!(train.label_histogram(), vec![2; 5]);
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let ds = generate_dataset(&small(60)).unwrap();
        let (t1, v1) = stratified_split(&ds, 0.8, 11).unwrap();
        let (t2, v2) = stratified_split(&ds, 0.8, 11).unwrap();
        assert_eq!((&t1, &v1), (&t2, &v2));
        for s in &v1.samples {
            assert!(!t1.samples.contains(s));
        }
        assert_eq!(t1.len() + v1.len(), ds.len());
    }

    #[test]
    fn split_rejects_singleton_class() {
        let ds = generate_dataset(&small(7)).unwrap();
        assert!(matches!(
            stratified_split(&ds, 0.8, 0),
            Err(Error::ClassTooSmall { count: 1, .. })
        ));
        assert!(stratified_split(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn grade_zero_is_lesion_free_background() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..small(1)
        };
        let s = generate_sample(&cfg, 0);
        assert_eq!(s.label, 0);
        let clean = generate_sample(
            &SynthConfig {
                noise: 0.0,
                seed: 99,
                ..small(1)
            },
            0,
        );
        // Without lesions or noise, images differ only by the global brightness draw.
        let d0 = s.ifp.data()[16 * 32 + 16] - s.ifp.data()[16 * 32 + 20];
        let d1 = clean.ifp.data()[16 * 32 + 16] - clean.ifp.data()[16 * 32 + 20];
        assert!((d0 - d1).abs() < 1e-6);
    }
}
