//! Paired augmentation. Geometric transforms (flip, crop, affine) are drawn once
//! and applied to both modalities so the pair stays co-registered; colour jitter
//! is drawn per modality.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PairedSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Smallest crop side as a fraction of the image side.
    pub min_crop: f64,
    pub max_rotate_deg: f64,
    pub max_translate: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            min_crop: 0.9,
            max_rotate_deg: 10.0,
            max_translate: 1.0,
            brightness: 0.05,
            contrast: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        brightness: 0.0,
        contrast: 1.0,
    };

    fn is_identity(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 1.0
    }

    fn apply(&self, v: f32) -> f32 {
        let x = (v as f64 - 0.5) * self.contrast + 0.5 + self.brightness;
        x.clamp(0.0, 1.0) as f32
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    /// Crop box `(top, left, height, width)` in pixels, resized back to full size.
    pub crop: (usize, usize, usize, usize),
    pub rotate_rad: f64,
    pub translate: (f64, f64),
    pub jitter_cfp: Jitter,
    pub jitter_ifp: Jitter,
}

impl AugmentParams {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            flip_h: false,
            crop: (0, 0, height, width),
            rotate_rad: 0.0,
            translate: (0.0, 0.0),
            jitter_cfp: Jitter::IDENTITY,
            jitter_ifp: Jitter::IDENTITY,
        }
    }

    pub fn draw<R: Rng>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> Self {
        let flip_h = rng.gen::<f64>() < cfg.flip_prob;
        let frac = if cfg.min_crop < 1.0 {
            rng.gen_range(cfg.min_crop..=1.0)
        } else {
            1.0
        };
        let ch = ((height as f64 * frac).round() as usize).clamp(1, height);
        let cw = ((width as f64 * frac).round() as usize).clamp(1, width);
        let top = rng.gen_range(0..=height - ch);
        let left = rng.gen_range(0..=width - cw);
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let rotate_rad = sym(rng, cfg.max_rotate_deg).to_radians();
        let translate = (sym(rng, cfg.max_translate), sym(rng, cfg.max_translate));
        let jitter = |rng: &mut R| Jitter {
            brightness: sym(rng, cfg.brightness),
            contrast: 1.0 + sym(rng, cfg.contrast),
        };
        let jitter_cfp = jitter(rng);
        let jitter_ifp = jitter(rng);
        Self {
            flip_h,
            crop: (top, left, ch, cw),
            rotate_rad,
            translate,
            jitter_cfp,
            jitter_ifp,
        }
    }

    fn is_geometric_identity(&self, height: usize, width: usize) -> bool {
        !self.flip_h
            && self.crop == (0, 0, height, width)
            && self.rotate_rad == 0.0
            && self.translate == (0.0, 0.0)
    }

    /// Source pixel for output pixel `(y, x)`, or `None` when it falls outside the image.
    fn source(&self, y: usize, x: usize, height: usize, width: usize) -> Option<(usize, usize)> {
        let (hf, wf) = (height as f64, width as f64);
        // Undo rotation about the image centre and translation.
        let (cy, cx) = (hf / 2.0, wf / 2.0);
        let (py, px) = (
            y as f64 + 0.5 - cy - self.translate.0,
            x as f64 + 0.5 - cx - self.translate.1,
        );
        let (s, c) = self.rotate_rad.sin_cos();
        let ry = c * py - s * px + cy;
        let rx = s * py + c * px + cx;
        // Undo the crop-and-resize.
        let (top, left, ch, cw) = self.crop;
        let sy = top as f64 + ry * ch as f64 / hf;
        let sx = left as f64 + rx * cw as f64 / wf;
        if sy < 0.0 || sx < 0.0 {
            return None;
        }
        let (iy, mut ix) = (sy.floor() as usize, sx.floor() as usize);
        if iy >= height || ix >= width {
            return None;
        }
        if self.flip_h {
            ix = width - 1 - ix;
        }
        Some((iy, ix))
    }
}

fn warp(img: &Tensor<f32>, p: &AugmentParams, jitter: Jitter) -> Tensor<f32> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let geometric = !p.is_geometric_identity(h, w);
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let from = if geometric {
                p.source(y, x, h, w)
            } else {
                Some((y, x))
            };
            for ch in 0..c {
                let v = match from {
                    Some((sy, sx)) => src[(sy * w + sx) * c + ch],
                    None => 0.0,
                };
                out.push(if jitter.is_identity() {
                    v
                } else {
                    jitter.apply(v)
                });
            }
        }
    }
    Tensor::new(vec![h, w, c], out).expect("extents preserved")
}

/// Applies a fixed parameter draw to both images.
pub fn apply_augment(s: &PairedSample, p: &AugmentParams) -> Result<PairedSample> {
    let (h, w) = (s.cfp.shape()[0], s.cfp.shape()[1]);
    if s.cfp.shape() != s.ifp.shape() {
        return Err(Error::shape("augment", s.cfp.shape(), s.ifp.shape()));
    }
    let (top, left, ch, cw) = p.crop;
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w {
        return Err(Error::config(
            "augment.crop",
            format!("crop {ch}x{cw} at ({top}, {left}) exceeds the {h}x{w} image"),
        ));
    }
    Ok(PairedSample {
        cfp: warp(&s.cfp, p, p.jitter_cfp),
        ifp: warp(&s.ifp, p, p.jitter_ifp),
        label: s.label,
    })
}

/// Draws parameters from `rng` and applies them.
pub fn augment<R: Rng>(s: &PairedSample, cfg: &AugmentConfig, rng: &mut R) -> Result<PairedSample> {
    if !(cfg.min_crop > 0.0 && cfg.min_crop <= 1.0) {
        return Err(Error::config("augment.min_crop", "must be in (0, 1]"));
    }
    let (h, w) = (s.cfp.shape()[0], s.cfp.shape()[1]);
    let p = AugmentParams::draw(cfg, h, w, rng);
    apply_augment(s, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> PairedSample {
        let cfg = super::super::SynthConfig {
            n_samples: 1,
            ..Default::default()
        };
        super::super::generate_sample(&cfg, 3)
    }

    fn marked(h: usize, w: usize, at: (usize, usize)) -> PairedSample {
        let mut img = Tensor::<f32>::full(vec![h, w, 1], 0.2);
        img.data_mut()[at.0 * w + at.1] = 1.0;
        PairedSample {
            cfp: img.clone(),
            ifp: img,
            label: 0,
        }
    }

    #[test]
    fn identity_is_exact() {
        let s = sample();
        let out = apply_augment(&s, &AugmentParams::identity(32, 32)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let s = sample();
        let p = AugmentParams {
            flip_h: true,
            ..AugmentParams::identity(32, 32)
        };
        let once = apply_augment(&s, &p).unwrap();
        assert_ne!(once, s);
        assert_eq!(once.cfp.get(&[5, 0, 0]), s.cfp.get(&[5, 31, 0]));
        assert_eq!(apply_augment(&once, &p).unwrap(), s);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let s = sample();
        let cfg = AugmentConfig::default();
        let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label, s.label);
        assert!(a.cfp.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn geometric_transforms_keep_the_pair_registered() {
        let cfg = AugmentConfig {
            brightness: 0.0,
            contrast: 0.0,
            max_rotate_deg: 20.0,
            max_translate: 2.0,
            min_crop: 0.8,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..50 {
            let s = marked(32, 32, (10 + trial % 7, 12 + trial % 5));
            let out = augment(&s, &cfg, &mut rng).unwrap();
            let pos = |t: &Tensor<f32>| {
                t.data()
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == 1.0)
                    .map(|(i, _)| i)
                    .collect::<Vec<_>>()
            };
            assert_eq!(pos(&out.cfp), pos(&out.ifp), "trial {trial}");
        }
    }

    #[test]
    fn oversized_crop_is_an_error() {
        let s = sample();
        let p = AugmentParams {
            crop: (4, 0, 32, 32),
            ..AugmentParams::identity(32, 32)
        };
        assert!(apply_augment(&s, &p).is_err());
        let cfg = AugmentConfig {
            min_crop: 1.5,
            ..AugmentConfig::default()
        };
        assert!(augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn jitter_is_drawn_per_modality() {
        let p = AugmentParams::draw(
            &AugmentConfig::default(),
            32,
            32,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        assert_ne!(p.jitter_cfp, p.jitter_ifp);
    }
}
