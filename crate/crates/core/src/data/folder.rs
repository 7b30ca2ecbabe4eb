//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/labels.csv      id,c0,c1,...  (0/1)
//! <root>/<split>/subtypes.csv    id,c0,c1,...  (planted sub-type, -1 when absent; optional)
//! <root>/<split>/images/<id>.png RGB
//! <root>/<split>/masks/<id>.png  8-bit grey, pixel value = category index (0 = background)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetSpec, Sample};
use crate::image::{Image, LabelGrid};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FolderError {
    #[error("{}", .0.join("; "))]
    Report(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FolderError + '_ {
    move |source| FolderError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub train_count: usize,
    pub eval_count: usize,
}

/// Paths that make up one split directory.
#[derive(Debug, Clone)]
pub struct SplitFiles {
    pub dir: PathBuf,
}

impl SplitFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn labels(&self) -> PathBuf {
        self.dir.join("labels.csv")
    }
    pub fn subtypes(&self) -> PathBuf {
        self.dir.join("subtypes.csv")
    }
    pub fn image(&self, id: &str) -> PathBuf {
        self.dir.join("images").join(format!("{id}.png"))
    }
    pub fn mask(&self, id: &str) -> PathBuf {
        self.dir.join("masks").join(format!("{id}.png"))
    }
}

pub fn save_rgb_png(path: &Path, img: &Image) -> Result<(), FolderError> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf =
        image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).ok_or_else(|| {
            FolderError::Format {
                path: path.into(),
                message: "buffer size mismatch".into(),
            }
        })?;
    buf.save(path).map_err(|e| FolderError::Format {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn save_gray_png(
    path: &Path,
    width: usize,
    height: usize,
    bytes: Vec<u8>,
) -> Result<(), FolderError> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes).ok_or_else(|| {
        FolderError::Format {
            path: path.into(),
            message: "buffer size mismatch".into(),
        }
    })?;
    buf.save(path).map_err(|e| FolderError::Format {
        path: path.into(),
        message: e.to_string(),
    })
}

fn load_rgb_png(path: &Path) -> Result<Image, String> {
    let img = image::open(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| b as f64 / 255.0)
        .collect();
    Ok(Image {
        height: h as usize,
        width: w as usize,
        data,
    })
}

fn load_mask_png(path: &Path) -> Result<LabelGrid, String> {
    let img = image::open(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(LabelGrid {
        height: h as usize,
        width: w as usize,
        data: img.into_raw(),
    })
}

/// Writes one split in the layout above.
pub fn write_split(dir: &Path, samples: &[Sample]) -> Result<(), FolderError> {
    let files = SplitFiles::new(dir);
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let c = samples.first().map_or(0, Sample::num_categories);
    let header: String = std::iter::once("id".to_string())
        .chain((0..c).map(|k| format!("c{k}")))
        .collect::<Vec<_>>()
        .join(",");
    let mut labels = format!("{header}\n");
    let mut subtypes = format!("{header}\n");
    for s in samples {
        save_rgb_png(&files.image(&s.id), &s.image)?;
        if let Some(mask) = &s.gt_mask {
            save_gray_png(
                &files.mask(&s.id),
                mask.width,
                mask.height,
                mask.data.clone(),
            )?;
        }
        let _ = writeln!(
            labels,
            "{},{}",
            s.id,
            s.parent_labels
                .iter()
                .map(u8::to_string)
                .collect::<Vec<_>>()
                .join(",")
        );
        let st: Vec<String> = s
            .latent_subtypes
            .iter()
            .map(|t| t.map_or("-1".to_string(), |v| v.to_string()))
            .collect();
        let _ = writeln!(subtypes, "{},{}", s.id, st.join(","));
    }
    fs::write(files.labels(), labels).map_err(io_err(&files.labels()))?;
    fs::write(files.subtypes(), subtypes).map_err(io_err(&files.subtypes()))?;
    Ok(())
}

fn read_table(path: &Path) -> Result<(usize, Vec<(usize, csv::StringRecord)>), FolderError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| FolderError::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
    let header = reader
        .headers()
        .map_err(|e| FolderError::Format {
            path: path.into(),
            message: e.to_string(),
        })?
        .clone();
    if header.len() < 2 || &header[0] != "id" {
        return Err(FolderError::Format {
            path: path.into(),
            message: "header must be `id,c0,c1,...`".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| FolderError::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
        // line 1 is the header
        rows.push((i + 2, rec));
    }
    Ok((header.len() - 1, rows))
}

/// Loads images listed in `label_file`; images live in `<dir>/images/<id>.png` (or `<dir>/<id>.png`),
/// masks in `<dir>/masks/<id>.png` when present. All problems are collected into one report.
pub fn load_folder(dir: &Path, label_file: &Path) -> Result<Vec<Sample>, FolderError> {
    let files = SplitFiles::new(dir);
    let (categories, rows) = read_table(label_file)?;
    let subtype_rows = if files.subtypes().exists() {
        Some(read_table(&files.subtypes())?.1)
    } else {
        None
    };
    let mut subtypes_by_id = std::collections::HashMap::new();
    for (_, rec) in subtype_rows.iter().flatten() {
        let vals: Vec<Option<usize>> = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<usize>().ok())
            .collect();
        subtypes_by_id.insert(rec[0].to_string(), vals);
    }

    let mut problems = Vec::new();
    let mut samples = Vec::new();
    for (line, rec) in rows {
        let id = rec.get(0).unwrap_or("").trim().to_string();
        if rec.len() != categories + 1 {
            problems.push(format!(
                "{}: row {line} ({id}) has {} labels, expected {categories}",
                label_file.display(),
                rec.len().saturating_sub(1)
            ));
            continue;
        }
        let mut labels = Vec::with_capacity(categories);
        for v in rec.iter().skip(1) {
            match v.trim() {
                "0" => labels.push(0u8),
                "1" => labels.push(1u8),
                other => {
                    problems.push(format!(
                        "{}: row {line} ({id}) has label `{other}`, expected 0 or 1",
                        label_file.display()
                    ));
                    break;
                }
            }
        }
        if labels.len() != categories {
            continue;
        }
        let candidates = [files.image(&id), dir.join(format!("{id}.png"))];
        let Some(path) = candidates.iter().find(|p| p.exists()) else {
            problems.push(format!(
                "image for id `{id}` not found in {}",
                dir.display()
            ));
            continue;
        };
        let image = match load_rgb_png(path) {
            Ok(img) => img,
            Err(e) => {
                problems.push(format!("unreadable image for id `{id}`: {e}"));
                continue;
            }
        };
        let gt_mask = if files.mask(&id).exists() {
            match load_mask_png(&files.mask(&id)) {
                Ok(m) if m.height == image.height && m.width == image.width => Some(m),
                Ok(m) => {
                    problems.push(format!(
                        "mask for id `{id}` is {}×{}, image is {}×{}",
                        m.width, m.height, image.width, image.height
                    ));
                    continue;
                }
                Err(e) => {
                    problems.push(format!("unreadable mask for id `{id}`: {e}"));
                    continue;
                }
            }
        } else {
            None
        };
        let latent_subtypes = match subtypes_by_id.get(&id) {
            Some(v) if v.len() == categories => v
                .iter()
                .zip(&labels)
                .map(|(st, &l)| if l == 1 { *st } else { None })
                .collect(),
            _ => vec![None; categories],
        };
        samples.push(Sample {
            id,
            image,
            parent_labels: labels,
            gt_mask,
            latent_subtypes,
        });
    }
    if problems.is_empty() {
        Ok(samples)
    } else {
        Err(FolderError::Report(problems))
    }
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest, FolderError> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| FolderError::Format {
        path,
        message: e.to_string(),
    })
}

/// Manifest plus both splits of a dataset written by `generate`.
pub fn read_dataset_dir(
    root: &Path,
) -> Result<(DatasetManifest, Vec<Sample>, Vec<Sample>), FolderError> {
    let manifest = read_manifest(root)?;
    let load = |split: &str| {
        let files = SplitFiles::new(root.join(split));
        load_folder(&files.dir, &files.labels())
    };
    let train = load("train")?;
    let eval = if root.join("eval").exists() {
        load("eval")?
    } else {
        Vec::new()
    };
    Ok((manifest, train, eval))
}
