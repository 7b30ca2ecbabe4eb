//! Convolutional feature extractor with GAP and two linear heads.
//!
//! Layout: `blocks` × (3×3 conv, ReLU, optional 2×2 max-pool), then a 3×3 conv to
//! `feature_dim` channels with ReLU. The pooled `feature_dim`-vector feeds the
//! parent head (`C` rows) and the sub-category head (`C·K` rows).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::numeric::{NumericError, Tape, Tensor, Var};
use crate::rng::{substream, Stream};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input rejected: {0}")]
    Input(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Output channels of each conv block.
    pub block_channels: Vec<usize>,
    /// Number of leading blocks followed by a 2×2 max-pool.
    pub pooled_blocks: usize,
    /// Channels `D` of the final feature conv.
    pub feature_dim: usize,
    pub num_categories: usize,
    pub subcategories: usize,
    #[serde(default)]
    pub head_bias: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            block_channels: vec![16, 32, 32, 64],
            pooled_blocks: 4,
            feature_dim: 128,
            num_categories: 3,
            subcategories: 10,
            head_bias: false,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Architecture(m));
        if self.block_channels.len() < 2 {
            return fail(format!(
                "need at least 2 conv blocks, got {}",
                self.block_channels.len()
            ));
        }
        if self.block_channels.contains(&0) {
            return fail("block with zero channels".into());
        }
        if self.pooled_blocks > self.block_channels.len() {
            return fail(format!(
                "{} pooled blocks but only {} blocks",
                self.pooled_blocks,
                self.block_channels.len()
            ));
        }
        if self.feature_dim < 16 {
            return fail(format!("feature_dim {} below minimum 16", self.feature_dim));
        }
        if self.num_categories == 0 || self.subcategories == 0 {
            return fail("num_categories and subcategories must be positive".into());
        }
        Ok(())
    }

    /// Spatial reduction between the input image and the feature map.
    pub fn downsampling(&self) -> usize {
        1 << self.pooled_blocks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[out, in]`, one row per output unit.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    fn apply(&self, input: &[f64]) -> Vec<f64> {
        let cols = self.weight.shape()[1];
        self.weight
            .data()
            .chunks(cols)
            .enumerate()
            .map(|(r, row)| {
                let dot: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
                dot + self.bias.as_ref().map_or(0.0, |b| b.data()[r])
            })
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data)
        .expect("shape matches generated length")
        .with_grad()
}

fn conv_layer(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> ConvLayer {
    let fan_in = 9 * cin;
    ConvLayer {
        weight: uniform(rng, vec![3, 3, cin, cout], (6.0 / fan_in as f64).sqrt()),
        bias: Tensor::zeros(vec![cout]).with_grad(),
    }
}

fn linear(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bias: bool) -> Linear {
    Linear {
        weight: uniform(rng, vec![rows, cols], 1.0 / (cols as f64).sqrt()),
        bias: bias.then(|| Tensor::zeros(vec![rows]).with_grad()),
    }
}

/// Spatial features of one image and their spatial mean.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOutput {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// `height × width × dim`, channel-last.
    pub feature_map: Vec<f64>,
    pub pooled: Vec<f64>,
}

impl FeatureOutput {
    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.dim;
        &self.feature_map[i..i + self.dim]
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    pub feature_map: Var,
    pub pooled: Var,
    pub parent_logits: Var,
    pub sub_logits: Var,
    params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub arch: Architecture,
    pub init_seed: u64,
    pub blocks: Vec<ConvLayer>,
    pub feature: ConvLayer,
    pub parent_head: Linear,
    pub sub_head: Linear,
}

impl NetworkState {
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = substream(seed, Stream::Init, &[0]);
        let mut cin = Image::CHANNELS;
        let blocks = arch
            .block_channels
            .iter()
            .map(|&cout| {
                let layer = conv_layer(&mut rng, cin, cout);
                cin = cout;
                layer
            })
            .collect();
        let feature = conv_layer(&mut rng, cin, arch.feature_dim);
        let parent_head = linear(
            &mut rng,
            arch.num_categories,
            arch.feature_dim,
            arch.head_bias,
        );
        let mut net = Self {
            sub_head: linear(&mut rng, 1, arch.feature_dim, false),
            arch,
            init_seed: seed,
            blocks,
            feature,
            parent_head,
        };
        net.reinit_sub_head(seed, net.arch.subcategories);
        Ok(net)
    }

    /// Fresh sub-category head for `subcategories` clusters per category; nothing else changes.
    pub fn reinit_sub_head(&mut self, seed: u64, subcategories: usize) {
        let mut rng = substream(seed, Stream::Init, &[1, subcategories as u64]);
        self.arch.subcategories = subcategories;
        let rows = self.arch.num_categories * subcategories;
        self.sub_head = linear(&mut rng, rows, self.arch.feature_dim, self.arch.head_bias);
    }

    /// Parameters in a fixed order; the sub-category head comes last.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.blocks.iter().chain(std::iter::once(&self.feature)) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for h in [&self.parent_head, &self.sub_head] {
            out.push(&h.weight);
            out.extend(h.bias.as_ref());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self
            .blocks
            .iter_mut()
            .chain(std::iter::once(&mut self.feature))
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for h in [&mut self.parent_head, &mut self.sub_head] {
            out.push(&mut h.weight);
            out.extend(h.bias.as_mut());
        }
        out
    }

    /// Number of tensors belonging to the sub-category head (trailing entries of `params`).
    pub fn sub_head_tensor_count(&self) -> usize {
        1 + usize::from(self.sub_head.bias.is_some())
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Records the network on `tape` for a batch `[N,H,W,3]`. With `track` false nothing is kept for backward.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: Var,
        track: bool,
    ) -> Result<ForwardVars, ModelError> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[3] != Image::CHANNELS {
            return Err(ModelError::Input(format!(
                "expected [N,H,W,3] images, got {shape:?}"
            )));
        }
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| tape.leaf_with(t, track))
            .collect();
        let mut x = images;
        for (i, _) in self.blocks.iter().enumerate() {
            x = tape.conv2d(x, params[2 * i], 1)?;
            x = tape.bias_add(x, params[2 * i + 1])?;
            x = tape.relu(x)?;
            if i < self.arch.pooled_blocks {
                x = tape.max_pool2(x)?;
            }
        }
        let f = 2 * self.blocks.len();
        x = tape.conv2d(x, params[f], 1)?;
        x = tape.bias_add(x, params[f + 1])?;
        let feature_map = tape.relu(x)?;
        let pooled = tape.global_avg_pool(feature_map)?;
        let mut idx = f + 2;
        let mut head = |tape: &mut Tape, has_bias: bool| -> Result<Var, ModelError> {
            let mut out = tape.matmul_transb(pooled, params[idx])?;
            idx += 1;
            if has_bias {
                out = tape.bias_add(out, params[idx])?;
                idx += 1;
            }
            Ok(out)
        };
        let parent_logits = head(tape, self.parent_head.bias.is_some())?;
        let sub_logits = head(tape, self.sub_head.bias.is_some())?;
        Ok(ForwardVars {
            feature_map,
            pooled,
            parent_logits,
            sub_logits,
            params,
        })
    }

    /// Adds the gradients of a finished backward pass onto the parameter tensors.
    pub fn accumulate_grads(
        &mut self,
        fwd: &ForwardVars,
        grads: &mut crate::numeric::Gradients,
    ) -> Result<(), ModelError> {
        for (param, &var) in self.params_mut().into_iter().zip(&fwd.params) {
            if let Some(g) = grads.take(var) {
                param.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Packs equally sized images into one `[N,H,W,3]` constant on `tape`.
    pub fn batch_input(tape: &mut Tape, images: &[&Image]) -> Result<Var, ModelError> {
        let first = images
            .first()
            .ok_or_else(|| ModelError::Input("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            if img.height != h || img.width != w || img.data.len() != h * w * 3 {
                return Err(ModelError::Input(format!(
                    "batch mixes image sizes {}×{} and {}×{}",
                    h, w, img.height, img.width
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(tape.constant(vec![images.len(), h, w, Image::CHANNELS], data)?)
    }

    /// Feature maps and pooled vectors for a batch of images, without gradient tracking.
    pub fn extract_features_batch(
        &self,
        images: &[&Image],
    ) -> Result<Vec<FeatureOutput>, ModelError> {
        let mut tape = Tape::new();
        let input = Self::batch_input(&mut tape, images)?;
        let fwd = self.forward(&mut tape, input, false)?;
        let &[n, h, w, d] = tape.shape(fwd.feature_map) else {
            unreachable!("conv output is rank 4")
        };
        let fmap = tape.value(fwd.feature_map);
        let pooled = tape.value(fwd.pooled);
        Ok((0..n)
            .map(|i| FeatureOutput {
                height: h,
                width: w,
                dim: d,
                feature_map: fmap[i * h * w * d..(i + 1) * h * w * d].to_vec(),
                pooled: pooled[i * d..(i + 1) * d].to_vec(),
            })
            .collect())
    }

    pub fn extract_features(&self, image: &Image) -> Result<FeatureOutput, ModelError> {
        if image.data.len() != image.height * image.width * Image::CHANNELS {
            return Err(ModelError::Input(format!(
                "image buffer of {} values is not {}×{}×3",
                image.data.len(),
                image.height,
                image.width
            )));
        }
        Ok(self.extract_features_batch(&[image])?.remove(0))
    }

    pub fn parent_logits(&self, pooled: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_pooled(pooled)?;
        Ok(self.parent_head.apply(pooled))
    }

    pub fn sub_logits(&self, pooled: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_pooled(pooled)?;
        Ok(self.sub_head.apply(pooled))
    }

    fn check_pooled(&self, pooled: &[f64]) -> Result<(), ModelError> {
        if pooled.len() != self.arch.feature_dim {
            return Err(ModelError::Input(format!(
                "pooled feature has length {}, expected {}",
                pooled.len(),
                self.arch.feature_dim
            )));
        }
        Ok(())
    }
}
