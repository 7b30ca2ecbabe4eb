//! Samples, synthetic benchmark generation, folder ingestion and augmentation.

mod augment;
mod folder;
mod synth;

use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentationPolicy};
pub use folder::{
    load_folder, read_dataset_dir, read_manifest, save_gray_png, save_rgb_png, write_split,
    DatasetManifest, FolderError, SplitFiles, MANIFEST_VERSION,
};
pub use synth::{expected_label_rates, generate_dataset, generate_split, SubtypeFactor};

use crate::image::{Image, LabelGrid};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("dataset spec infeasible: {0}")]
    Infeasible(String),
}

/// One image with its image-level labels; masks and sub-types are evaluation-only.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    /// Multi-hot, length `C`.
    pub parent_labels: Vec<u8>,
    /// Values in `0..=C`, 0 = background. `None` marks the sample evaluation-ineligible.
    pub gt_mask: Option<LabelGrid>,
    /// Planted sub-type per category, `Some` exactly where `parent_labels` is 1.
    pub latent_subtypes: Vec<Option<usize>>,
}

impl Sample {
    pub fn num_categories(&self) -> usize {
        self.parent_labels.len()
    }

    pub fn has_category(&self, c: usize) -> bool {
        self.parent_labels.get(c).copied() == Some(1)
    }

    pub fn present_categories(&self) -> impl Iterator<Item = usize> + '_ {
        self.parent_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            .map(|(c, _)| c)
    }

    /// Checks that mask pixels and labels agree category by category.
    pub fn mask_label_consistent(&self) -> bool {
        let Some(mask) = &self.gt_mask else {
            return true;
        };
        let counts = mask.histogram(self.num_categories());
        let in_range = counts.iter().sum::<usize>() == mask.data.len();
        in_range && (0..self.num_categories()).all(|c| (counts[c + 1] > 0) == self.has_category(c))
    }
}

/// Parameters of a synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub num_categories: usize,
    pub subtypes_per_category: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Chance that an image holds a second category.
    pub cooccurrence: f64,
    /// Category that joins images of other categories when a second object is drawn.
    pub cooccurring_category: usize,
    /// Amplitude of smooth background colour variation.
    pub background_variation: f64,
    /// Per-pixel noise amplitude over the whole image.
    pub pixel_noise: f64,
    /// Small neutral-coloured clutter squares per image.
    pub distractors: usize,
    /// Contrast of the category-specific body texture.
    pub texture_contrast: f64,
}

impl DatasetSpec {
    /// The fixed benchmark used by the acceptance suite.
    pub fn bench_v1() -> Self {
        Self {
            name: "bench-v1".into(),
            num_categories: 3,
            subtypes_per_category: 4,
            train_images: 2000,
            eval_images: 400,
            image_size: 64,
            seed: 7,
            cooccurrence: 0.1,
            cooccurring_category: 1,
            background_variation: 0.08,
            pixel_noise: 0.03,
            distractors: 2,
            texture_contrast: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::InvalidSpec(m));
        if self.num_categories < 2 || self.num_categories > 254 {
            return fail(format!(
                "num_categories {} outside 2..=254",
                self.num_categories
            ));
        }
        if self.subtypes_per_category < 2 {
            return fail(format!(
                "subtypes_per_category {} below 2",
                self.subtypes_per_category
            ));
        }
        if self.image_size < 32 {
            return fail(format!("image_size {} below 32", self.image_size));
        }
        if self.train_images == 0 {
            return fail("train_images must be positive".into());
        }
        for (name, p) in [("cooccurrence", self.cooccurrence)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0,1]"));
            }
        }
        if self.cooccurring_category >= self.num_categories {
            return fail(format!(
                "cooccurring_category {} out of range",
                self.cooccurring_category
            ));
        }
        for (name, v) in [
            ("background_variation", self.background_variation),
            ("pixel_noise", self.pixel_noise),
            ("texture_contrast", self.texture_contrast),
        ] {
            if !(0.0..=0.5).contains(&v) {
                return fail(format!("{name} {v} outside [0,0.5]"));
            }
        }
        Ok(())
    }
}

/// Train and evaluation splits of a generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}
