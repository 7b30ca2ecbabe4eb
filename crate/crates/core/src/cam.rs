//! Class activation maps, CAM-derived masks and segmentation metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{save_gray_png, save_rgb_png, FolderError, Sample};
use crate::image::{Image, LabelGrid};
use crate::model::{FeatureOutput, ModelError, NetworkState};
use crate::trainer::{continue_rounds, run_baseline, RunDir, RunOutput, TrainConfig, TrainError};

pub const DEFAULT_THRESHOLD: f64 = 0.3;

#[derive(Debug, thiserror::Error)]
pub enum CamError {
    #[error("category {category} out of range for {num_categories} categories")]
    UnknownCategory {
        category: usize,
        num_categories: usize,
    },
    #[error("threshold {0} outside (0,1)")]
    Threshold(f64),
    #[error("no sample in the split has a ground-truth mask")]
    NoMasks,
    #[error("sample {id}: {message}")]
    Sample { id: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Export(#[from] FolderError),
}

/// Response of one category over one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMap {
    pub category: usize,
    pub height: usize,
    pub width: usize,
    /// Feature-resolution dot products, may be negative.
    pub raw: Vec<f64>,
    /// `max(raw,0)` divided by its maximum; all zero when that maximum is 0.
    pub normalized: Vec<f64>,
    /// `normalized` resampled to image size.
    pub upsampled: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub image_height: usize,
    pub image_width: usize,
    pub maps: Vec<CategoryMap>,
}

/// Clamps negatives and divides by the maximum.
pub fn normalize_map(raw: &[f64]) -> Vec<f64> {
    let peak = raw.iter().fold(0.0f64, |m, &v| m.max(v));
    if peak > 0.0 {
        raw.iter().map(|&v| v.max(0.0) / peak).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

/// Bilinear resampling with pixel centres aligned, edges clamped.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let s =
            ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Maps for `categories` from an already computed feature map.
pub fn cam_from_features(
    net: &NetworkState,
    features: &FeatureOutput,
    categories: &[usize],
    image_height: usize,
    image_width: usize,
) -> Result<ActivationMap, CamError> {
    let num_categories = net.arch.num_categories;
    let weights = net.parent_head.weight.data();
    let d = features.dim;
    let maps = categories
        .iter()
        .map(|&c| {
            if c >= num_categories {
                return Err(CamError::UnknownCategory {
                    category: c,
                    num_categories,
                });
            }
            let theta = &weights[c * d..(c + 1) * d];
            let raw: Vec<f64> = features
                .feature_map
                .chunks(d)
                .map(|f| f.iter().zip(theta).map(|(a, b)| a * b).sum())
                .collect();
            let normalized = normalize_map(&raw);
            let upsampled = upsample_bilinear(
                &normalized,
                features.height,
                features.width,
                image_height,
                image_width,
            );
            Ok(CategoryMap {
                category: c,
                height: features.height,
                width: features.width,
                raw,
                normalized,
                upsampled,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(ActivationMap {
        image_height,
        image_width,
        maps,
    })
}

pub fn compute_cam(
    net: &NetworkState,
    image: &Image,
    categories: &[usize],
) -> Result<ActivationMap, CamError> {
    let features = net.extract_features(image)?;
    cam_from_features(net, &features, categories, image.height, image.width)
}

/// Label `c+1` where category `c` has the largest upsampled response and it reaches `threshold`.
pub fn cam_to_mask(cam: &ActivationMap, threshold: f64) -> LabelGrid {
    let mut mask = LabelGrid::zeros(cam.image_height, cam.image_width);
    for (i, px) in mask.data.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for m in &cam.maps {
            let v = m.upsampled[i];
            let better = match best {
                None => true,
                Some((bc, bv)) => v > bv || (v == bv && m.category < bc),
            };
            if better {
                best = Some((m.category, v));
            }
        }
        if let Some((c, v)) = best {
            if v >= threshold {
                *px = (c + 1) as u8;
            }
        }
    }
    mask
}

/// Pixel counts indexed `[truth][prediction]` over labels `0..=C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: &LabelGrid, pred: &LabelGrid) -> Result<(), String> {
        if truth.data.len() != pred.data.len() {
            return Err(format!(
                "mask {}×{} against prediction {}×{}",
                truth.height, truth.width, pred.height, pred.width
            ));
        }
        for (&t, &p) in truth.data.iter().zip(&pred.data) {
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(format!("label {} outside 0..{}", t.max(p), self.classes));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
    }

    pub fn metrics(&self) -> SegmentationMetrics {
        let n = self.classes;
        let row = |t: usize| (0..n).map(|p| self.get(t, p)).sum::<u64>();
        let col = |p: usize| (0..n).map(|t| self.get(t, p)).sum::<u64>();
        let per_class_iou: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let union = row(c) + col(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        let correct_fg: u64 = (1..n).map(|c| self.get(c, c)).sum();
        let pred_fg: u64 = (1..n).map(col).sum();
        let true_fg: u64 = (1..n).map(row).sum();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct_fg, pred_fg);
        let recall = ratio(correct_fg, true_fg);
        let f_score = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        SegmentationMetrics {
            per_class_iou,
            miou,
            precision,
            recall,
            f_score,
            confusion: self.clone(),
        }
    }
}

/// Foreground precision and recall count a pixel as correct only when its category matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    /// Index 0 is background; `None` where the class is absent from truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub confusion: ConfusionMatrix,
}

fn check_threshold(threshold: f64) -> Result<(), CamError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(CamError::Threshold(threshold))
    }
}

/// CAM masks for every masked sample, using its given labels, scored against ground truth.
pub fn evaluate_split(
    net: &NetworkState,
    samples: &[Sample],
    threshold: f64,
) -> Result<SegmentationMetrics, CamError> {
    check_threshold(threshold)?;
    let masked: Vec<&Sample> = samples.iter().filter(|s| s.gt_mask.is_some()).collect();
    if masked.is_empty() {
        return Err(CamError::NoMasks);
    }
    let mut confusion = ConfusionMatrix::new(net.arch.num_categories + 1);
    for chunk in masked.chunks(32) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let features = net.extract_features_batch(&images)?;
        for (s, f) in chunk.iter().zip(&features) {
            let cats: Vec<usize> = s.present_categories().collect();
            let cam = cam_from_features(net, f, &cats, s.image.height, s.image.width)?;
            let pred = cam_to_mask(&cam, threshold);
            let truth = s.gt_mask.as_ref().expect("filtered on masks");
            confusion
                .add(truth, &pred)
                .map_err(|message| CamError::Sample {
                    id: s.id.clone(),
                    message,
                })?;
        }
    }
    Ok(confusion.metrics())
}

/// Metrics file contents for one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub round: Option<usize>,
    pub threshold: f64,
    pub split: String,
    pub images: usize,
    pub metrics: SegmentationMetrics,
    pub mean_nmi: Option<f64>,
}

impl MetricsReport {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}

/// Writes `<id>_c<c>.png` heatmaps, `<id>_c<c>_overlay.png` and `<id>_mask.png` into `dir`.
pub fn export_cam(
    dir: &Path,
    sample: &Sample,
    cam: &ActivationMap,
    threshold: f64,
) -> Result<Vec<std::path::PathBuf>, CamError> {
    let mut written = Vec::new();
    let (h, w) = (cam.image_height, cam.image_width);
    for m in &cam.maps {
        let path = dir.join(format!("{}_c{}.png", sample.id, m.category));
        let bytes = m
            .upsampled
            .iter()
            .map(|v| (255.0 * v).round() as u8)
            .collect();
        save_gray_png(&path, w, h, bytes)?;
        written.push(path);
        let mut overlay = sample.image.clone();
        for (i, &v) in m.upsampled.iter().enumerate() {
            let px = &mut overlay.data[i * 3..i * 3 + 3];
            px[0] = px[0] * (1.0 - 0.6 * v) + 0.6 * v;
            px[1] *= 1.0 - 0.6 * v;
            px[2] *= 1.0 - 0.6 * v;
        }
        let path = dir.join(format!("{}_c{}_overlay.png", sample.id, m.category));
        save_rgb_png(&path, &overlay)?;
        written.push(path);
    }
    let mask = cam_to_mask(cam, threshold);
    let path = dir.join(format!("{}_mask.png", sample.id));
    save_gray_png(&path, w, h, mask.data)?;
    written.push(path);
    Ok(written)
}

/// One K-sweep result: final-round metrics of a run with `k` sub-categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub rounds: usize,
    pub miou: f64,
    pub f_score: f64,
    pub precision: f64,
    pub recall: f64,
    pub mean_nmi: Option<f64>,
    pub baseline_miou: f64,
}

/// Runs the full algorithm once per distinct `K`, sharing the parent-only baseline round.
///
/// Output layout under `dir`: `baseline/round-0`, `k-<K>/round-<r>` and `sweep.csv`.
pub fn sweep_k(
    train: &[Sample],
    eval: &[Sample],
    config: &TrainConfig,
    k_values: &[usize],
    dir: Option<&Path>,
) -> Result<Vec<SweepRow>, TrainError> {
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.len() < 2 {
        return Err(TrainError::Config(format!(
            "a sweep needs at least two distinct K values, got {k_values:?}"
        )));
    }
    if ks.contains(&0) {
        return Err(TrainError::Config("K must be positive".into()));
    }
    if !eval.iter().any(|s| s.gt_mask.is_some()) {
        return Err(CamError::NoMasks.into());
    }
    let base_dir = dir.map(|d| RunDir::new(d.join("baseline")));
    if let Some(d) = &base_dir {
        d.write_config(config)?;
    }
    let baseline = run_baseline(train, Some(eval), config, base_dir.as_ref())?;
    sweep_k_from_baseline(&baseline, train, eval, config, &ks, dir)
}

/// The per-K part of [`sweep_k`], continuing a finished round-0 run.
pub fn sweep_k_from_baseline(
    baseline: &RunOutput,
    train: &[Sample],
    eval: &[Sample],
    config: &TrainConfig,
    k_values: &[usize],
    dir: Option<&Path>,
) -> Result<Vec<SweepRow>, TrainError> {
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if baseline.state.round != Some(0) {
        return Err(TrainError::Config(
            "the sweep must start from a round-0 baseline".into(),
        ));
    }
    let baseline_miou = final_metrics(baseline)?.miou;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in &ks {
        let cfg = TrainConfig {
            k,
            ..config.clone()
        };
        let run_dir = dir.map(|d| RunDir::new(d.join(format!("k-{k}"))));
        if let Some(d) = &run_dir {
            d.write_config(&cfg)?;
        }
        let out = continue_rounds(baseline.clone(), train, Some(eval), &cfg, run_dir.as_ref())?;
        let last = out.rounds.last().expect("baseline round present");
        let m = final_metrics(&out)?;
        rows.push(SweepRow {
            k,
            rounds: last.round,
            miou: m.miou,
            f_score: m.f_score,
            precision: m.precision,
            recall: m.recall,
            mean_nmi: last.clusters.as_ref().and_then(|c| c.mean_nmi()),
            baseline_miou,
        });
    }
    if let Some(d) = dir {
        write_sweep_csv(&d.join("sweep.csv"), &rows)?;
    }
    Ok(rows)
}

fn final_metrics(run: &RunOutput) -> Result<&SegmentationMetrics, TrainError> {
    run.rounds
        .last()
        .and_then(|r| r.metrics.as_ref())
        .map(|m| &m.metrics)
        .ok_or_else(|| CamError::NoMasks.into())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), TrainError> {
    let map = |e: csv::Error| TrainError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(map)?;
    w.write_record([
        "k",
        "rounds",
        "miou",
        "f_score",
        "precision",
        "recall",
        "mean_nmi",
        "baseline_miou",
    ])
    .map_err(map)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.rounds.to_string(),
            r.miou.to_string(),
            r.f_score.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.mean_nmi.map_or(String::new(), |v| v.to_string()),
            r.baseline_miou.to_string(),
        ])
        .map_err(map)?;
    }
    w.flush().map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
