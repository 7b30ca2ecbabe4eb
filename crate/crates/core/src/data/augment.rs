use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::image::{Image, LabelGrid};
use crate::rng::{hash_str, substream, Stream};

/// Training-time augmentation: horizontal flip, random crop with rescale, colour jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub flip_probability: f64,
    /// Range of the crop side as a fraction of the image side.
    pub crop_fraction: (f64, f64),
    /// Range of the zoom applied on top of the crop (>1 zooms in).
    pub scale: (f64, f64),
    /// Amplitude of brightness, contrast and per-channel gain perturbations.
    pub jitter: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            crop_fraction: (0.8, 1.0),
            scale: (0.9, 1.1),
            jitter: 0.1,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            crop_fraction: (1.0, 1.0),
            scale: (1.0, 1.0),
            jitter: 0.0,
        }
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Augmented copy of `sample`; depends only on `(seed, epoch, sample.id)`.
pub fn augment(sample: &Sample, policy: &AugmentationPolicy, seed: u64, epoch: u64) -> Sample {
    let mut rng = substream(seed, Stream::Augment, &[epoch, hash_str(&sample.id)]);
    let (h, w) = (sample.image.height, sample.image.width);
    let flip = rng.random_bool(policy.flip_probability.clamp(0.0, 1.0));
    let fraction = draw(&mut rng, policy.crop_fraction);
    let zoom = draw(&mut rng, policy.scale).max(1e-3);
    let side_frac = (fraction / zoom).clamp(0.25, 1.0);
    let (ch, cw) = (
        ((h as f64) * side_frac).round().max(1.0),
        ((w as f64) * side_frac).round().max(1.0),
    );
    let oy = draw(&mut rng, (0.0, h as f64 - ch));
    let ox = draw(&mut rng, (0.0, w as f64 - cw));
    let brightness = draw(&mut rng, (-policy.jitter, policy.jitter));
    let contrast = 1.0 + draw(&mut rng, (-policy.jitter, policy.jitter));
    let gains: [f64; 3] =
        [0, 1, 2].map(|_| 1.0 + draw(&mut rng, (-policy.jitter / 2.0, policy.jitter / 2.0)));

    let (sy, sx) = (ch / h as f64, cw / w as f64);
    let src_coord = |y: usize, x: usize| {
        let xx = if flip { w - 1 - x } else { x };
        (
            oy + (y as f64 + 0.5) * sy - 0.5,
            ox + (xx as f64 + 0.5) * sx - 0.5,
        )
    };

    let mut image = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = src_coord(y, x);
            image.set_pixel(y, x, bilinear(&sample.image, fy, fx));
        }
    }
    if policy.jitter > 0.0 {
        let n = (h * w) as f64;
        let mut mean = [0.0; 3];
        image
            .data
            .chunks(3)
            .for_each(|p| (0..3).for_each(|k| mean[k] += p[k] / n));
        for p in image.data.chunks_mut(3) {
            for k in 0..3 {
                let v = (p[k] - mean[k]) * contrast + mean[k];
                p[k] = (v * gains[k] + brightness).clamp(0.0, 1.0);
            }
        }
    }
    let gt_mask = sample.gt_mask.as_ref().map(|m| {
        let mut out = LabelGrid::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = src_coord(y, x);
                let (ny, nx) = (
                    fy.round().clamp(0.0, (h - 1) as f64),
                    fx.round().clamp(0.0, (w - 1) as f64),
                );
                out.set(y, x, m.get(ny as usize, nx as usize));
            }
        }
        out
    });
    Sample {
        id: sample.id.clone(),
        image,
        parent_labels: sample.parent_labels.clone(),
        gt_mask,
        latent_subtypes: sample.latent_subtypes.clone(),
    }
}

fn bilinear(img: &Image, fy: f64, fx: f64) -> [f64; 3] {
    let fy = fy.clamp(0.0, (img.height - 1) as f64);
    let fx = fx.clamp(0.0, (img.width - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    if ty == 0.0 && tx == 0.0 {
        return img.pixel(y0, x0);
    }
    let (a, b, c, d) = (
        img.pixel(y0, x0),
        img.pixel(y0, x1),
        img.pixel(y1, x0),
        img.pixel(y1, x1),
    );
    [0, 1, 2].map(|k| {
        let top = a[k] + (b[k] - a[k]) * tx;
        let bottom = c[k] + (d[k] - c[k]) * tx;
        top + (bottom - top) * ty
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, DatasetSpec};

    fn sample() -> Sample {
        let spec = DatasetSpec {
            train_images: 3,
            ..DatasetSpec::bench_v1()
        };
        generate_split(&spec, "train", 3).unwrap().remove(1)
    }

    #[test]
    fn identity_policy_is_identity() {
        let s = sample();
        assert_eq!(augment(&s, &AugmentationPolicy::identity(), 3, 4), s);
    }

    #[test]
    fn double_flip_restores() {
        let s = sample();
        let flip = AugmentationPolicy {
            flip_probability: 1.0,
            ..AugmentationPolicy::identity()
        };
        let once = augment(&s, &flip, 3, 0);
        assert_ne!(once.image, s.image);
        assert_eq!(augment(&once, &flip, 3, 0), s);
    }

    #[test]
    fn labels_survive_and_output_is_reproducible() {
        let s = sample();
        let policy = AugmentationPolicy {
            ..AugmentationPolicy::default()
        };
        for epoch in 0..5 {
            let a = augment(&s, &policy, 3, epoch);
            assert_eq!(a.parent_labels, s.parent_labels);
            assert_eq!((a.image.height, a.image.width), (64, 64));
            assert_eq!(a, augment(&s, &policy, 3, epoch));
            assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(
            augment(&s, &policy, 3, 0).image,
            augment(&s, &policy, 3, 1).image
        );
    }

    #[test]
    fn degenerate_crop_is_clamped() {
        let s = sample();
        let policy = AugmentationPolicy {
            crop_fraction: (0.0, 0.0),
            ..AugmentationPolicy::identity()
        };
        let a = augment(&s, &policy, 3, 0);
        assert!(a.image.data.iter().all(|v| v.is_finite()));
    }
}
