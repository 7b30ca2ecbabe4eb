//! Procedural multi-label benchmark with planted sub-types.
//!
//! Every object is a textured body carrying a small saturated marker. The marker
//! colour alone identifies the category; the body texture identifies it too, at
//! low contrast. Sub-types vary one factor per category, assigned in rotation:
//! body shape, body scale, or the ground patch the object stands on.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, DatasetSpec, Sample};
use crate::image::{Image, LabelGrid};
use crate::rng::{substream, Stream};

/// Visual factor that separates the sub-types of one category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubtypeFactor {
    ShapeFamily,
    ScaleBand,
    Context,
}

impl SubtypeFactor {
    pub fn for_category(c: usize) -> Self {
        match c % 3 {
            0 => SubtypeFactor::ShapeFamily,
            1 => SubtypeFactor::ScaleBand,
            _ => SubtypeFactor::Context,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

const SHAPES: [Shape; 6] = [
    Shape::Disc,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Cross,
    Shape::Ring,
];

/// Sub-type order for shape-family categories, most distinct silhouettes first.
const SHAPE_FAMILIES: [Shape; 6] = [
    Shape::Disc,
    Shape::Cross,
    Shape::Ring,
    Shape::Triangle,
    Shape::Square,
    Shape::Diamond,
];

impl Shape {
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => dy <= 0.8 * r && dy >= -r && dx.abs() <= (dy + r) / 1.8,
            Shape::Diamond => dx.abs() + dy.abs() <= 1.15 * r,
            Shape::Cross => {
                (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r)
            }
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.6 * r) * (0.6 * r)
            }
        }
    }

    /// Offset of the marker centre from the body centre, in units of the radius.
    fn marker_offset(self) -> (f64, f64) {
        match self {
            Shape::Ring => (-0.72, 0.0),
            Shape::Cross => (-0.7, 0.0),
            Shape::Triangle => (-0.2, 0.0),
            _ => (-0.45, 0.0),
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn marker_colour(c: usize, num_categories: usize) -> [f64; 3] {
    hsv(c as f64 / num_categories as f64, 0.9, 0.95)
}

/// Category texture in `{-1, +1}`: stripes of a category-specific orientation and period.
fn texture(c: usize, y: usize, x: usize) -> f64 {
    let period = 2 + c / 4;
    let on = match c % 4 {
        0 => (y / period) % 2 == 0,
        1 => (x / period) % 2 == 0,
        2 => ((x + y) / period) % 2 == 0,
        _ => ((x + 64 - y % 64) / period) % 2 == 0,
    };
    if on {
        1.0
    } else {
        -1.0
    }
}

fn context_colour(subtype: usize, g: usize) -> [f64; 3] {
    hsv(
        0.08 + subtype as f64 / g as f64,
        0.35,
        0.3 + 0.4 * ((subtype % 2) as f64),
    )
}

struct Placement {
    category: usize,
    subtype: usize,
    shape: Shape,
    radius: f64,
    cy: f64,
    cx: f64,
    brightness: f64,
}

impl Placement {
    /// Half-extent of the area the object claims, including any ground patch.
    fn claim(&self) -> f64 {
        match SubtypeFactor::for_category(self.category) {
            SubtypeFactor::Context => self.radius + 5.0,
            _ => self.radius + 1.0,
        }
    }
}

fn scale_band_radius(band: usize, g: usize, size: usize) -> f64 {
    let (lo, hi) = (0.09 * size as f64, 0.25 * size as f64);
    lo + (hi - lo) * band as f64 / (g - 1) as f64
}

fn plan_object(
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
    category: usize,
    subtype: usize,
) -> Placement {
    let size = spec.image_size as f64;
    let g = spec.subtypes_per_category;
    let factor = SubtypeFactor::for_category(category);
    let shape = match factor {
        SubtypeFactor::ShapeFamily => SHAPE_FAMILIES[subtype % SHAPE_FAMILIES.len()],
        _ => SHAPES[(category / 3 + category) % SHAPES.len()],
    };
    let radius = match factor {
        SubtypeFactor::ScaleBand => scale_band_radius(subtype, g, spec.image_size),
        SubtypeFactor::ShapeFamily => rng.random_range(0.2 * size..0.22 * size),
        SubtypeFactor::Context => rng.random_range(0.165 * size..0.185 * size),
    };
    Placement {
        category,
        subtype,
        shape,
        radius,
        cy: 0.0,
        cx: 0.0,
        brightness: rng.random_range(-0.06..0.06),
    }
}

fn place(
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
    objects: &mut [Placement],
) -> Result<(), DataError> {
    let size = spec.image_size as f64;
    if let Some(o) = objects.iter().find(|o| 2.0 * o.claim() + 2.0 > size) {
        return Err(DataError::Infeasible(format!(
            "object of radius {:.1} does not fit a {}px image",
            o.radius, spec.image_size
        )));
    }
    // Whole configurations are resampled; placing one object at a time can corner the next.
    for _ in 0..1000 {
        for o in objects.iter_mut() {
            let claim = o.claim();
            o.cy = rng.random_range(claim..size - claim - 1.0);
            o.cx = rng.random_range(claim..size - claim - 1.0);
        }
        let clear = objects.iter().enumerate().all(|(i, a)| {
            objects[..i].iter().all(|b| {
                let d = ((a.cy - b.cy).powi(2) + (a.cx - b.cx).powi(2)).sqrt();
                d >= a.radius + b.radius + 3.0
            })
        });
        if clear {
            return Ok(());
        }
    }
    Err(DataError::Infeasible(format!(
        "cannot place {} objects without occlusion in a {}px image",
        objects.len(),
        spec.image_size
    )))
}

fn render(spec: &DatasetSpec, rng: &mut ChaCha8Rng, objects: &[Placement]) -> (Image, LabelGrid) {
    let s = spec.image_size;
    let g = spec.subtypes_per_category;
    let base = [0.34, 0.36, 0.33];
    let bumps: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let col = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0) * spec.background_variation);
            (
                rng.random_range(0.0..s as f64),
                rng.random_range(0.0..s as f64),
                rng.random_range(8.0..24.0),
                col,
            )
        })
        .collect();
    let mut img = Image::filled(s, s, base);
    for y in 0..s {
        for x in 0..s {
            let mut px = base;
            for (by, bx, sigma, col) in &bumps {
                let w = (-((y as f64 - by).powi(2) + (x as f64 - bx).powi(2))
                    / (2.0 * sigma * sigma))
                    .exp();
                (0..3).for_each(|k| px[k] += w * col[k]);
            }
            img.set_pixel(y, x, px);
        }
    }
    for _ in 0..spec.distractors {
        let half = rng.random_range(1..4usize);
        let (y0, x0) = (
            rng.random_range(0..s - 2 * half),
            rng.random_range(0..s - 2 * half),
        );
        let v = rng.random_range(0.2..0.7);
        let tint = rng.random_range(-0.05..0.05);
        for y in y0..y0 + 2 * half {
            for x in x0..x0 + 2 * half {
                img.set_pixel(y, x, [v + tint, v, v - tint]);
            }
        }
    }
    let mut mask = LabelGrid::zeros(s, s);
    // ground patches go down first so no patch covers another object's body
    for o in objects
        .iter()
        .filter(|o| SubtypeFactor::for_category(o.category) == SubtypeFactor::Context)
    {
        let col = context_colour(o.subtype, g);
        let half = o.claim();
        for y in 0..s {
            for x in 0..s {
                let (dy, dx) = (y as f64 - o.cy, x as f64 - o.cx);
                if dy.abs() <= half && dx.abs() <= half && dy >= -0.2 * half {
                    let ripple = if (x + 2 * y) % 5 < 2 { 0.04 } else { -0.02 };
                    img.set_pixel(y, x, col.map(|v| v + ripple));
                }
            }
        }
    }
    for o in objects {
        let r = o.radius;
        let marker = marker_colour(o.category, spec.num_categories);
        let (my, mx) = o.shape.marker_offset();
        let (mcy, mcx) = (o.cy + my * r, o.cx + mx * r);
        let mr = (0.24 * r).max(2.0);
        let body = 0.62 + o.brightness;
        for y in 0..s {
            for x in 0..s {
                let (dy, dx) = (y as f64 - o.cy, x as f64 - o.cx);
                if !o.shape.contains(dy, dx, r) {
                    continue;
                }
                mask.set(y, x, (o.category + 1) as u8);
                let in_marker = (y as f64 - mcy).powi(2) + (x as f64 - mcx).powi(2) <= mr * mr;
                let px = if in_marker {
                    marker
                } else {
                    let t = spec.texture_contrast * texture(o.category, y, x);
                    [body + t, body + t - 0.03, body + t - 0.06]
                };
                img.set_pixel(y, x, px);
            }
        }
    }
    for v in img.data.iter_mut() {
        // 8-bit quantization keeps the PNG round trip lossless
        let noisy = (*v + rng.random_range(-1.0..1.0) * spec.pixel_noise).clamp(0.0, 1.0);
        *v = (noisy * 255.0).round() / 255.0;
    }
    (img, mask)
}

fn split_tag(split: &str) -> u64 {
    crate::rng::hash_str(split)
}

/// One sample; its content depends only on `(spec, split, index)`.
pub(crate) fn generate_sample(
    spec: &DatasetSpec,
    split: &str,
    index: usize,
) -> Result<Sample, DataError> {
    let c = spec.num_categories;
    let g = spec.subtypes_per_category;
    let mut rng = substream(spec.seed, Stream::Data, &[split_tag(split), index as u64]);
    // Primary category and its sub-type cycle through all combinations, which keeps both balanced.
    let primary = index % c;
    let primary_subtype = (index / c) % g;
    let mut chosen = vec![(primary, primary_subtype)];
    if rng.random_bool(spec.cooccurrence) {
        let person = spec.cooccurring_category;
        let second = if primary != person {
            person
        } else {
            let pick = rng.random_range(0..c - 1);
            if pick >= person {
                pick + 1
            } else {
                pick
            }
        };
        chosen.push((second, rng.random_range(0..g)));
    }
    let mut objects: Vec<Placement> = chosen
        .iter()
        .map(|&(cat, st)| plan_object(spec, &mut rng, cat, st))
        .collect();
    // Large objects first so placement succeeds more often.
    objects.sort_by(|a, b| {
        b.claim()
            .total_cmp(&a.claim())
            .then(a.category.cmp(&b.category))
    });
    place(spec, &mut rng, &mut objects)?;
    let (image, mask) = render(spec, &mut rng, &objects);
    let mut parent_labels = vec![0u8; c];
    let mut latent_subtypes = vec![None; c];
    for o in &objects {
        parent_labels[o.category] = 1;
        latent_subtypes[o.category] = Some(o.subtype);
    }
    Ok(Sample {
        id: format!("{split}-{index:05}"),
        image,
        parent_labels,
        gt_mask: Some(mask),
        latent_subtypes,
    })
}

pub fn generate_split(
    spec: &DatasetSpec,
    split: &str,
    count: usize,
) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    (0..count)
        .map(|i| generate_sample(spec, split, i))
        .collect()
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, "train", spec.train_images)?,
        eval: generate_split(spec, "eval", spec.eval_images)?,
    })
}

/// Probability that a generated image carries each category.
pub fn expected_label_rates(spec: &DatasetSpec) -> Vec<f64> {
    let c = spec.num_categories as f64;
    let q = spec.cooccurrence;
    (0..spec.num_categories)
        .map(|k| {
            if k == spec.cooccurring_category {
                1.0 / c + (c - 1.0) / c * q
            } else {
                1.0 / c + q / (c * (c - 1.0))
            }
        })
        .collect()
}
