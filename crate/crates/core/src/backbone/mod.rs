//! Frozen transformer feature extractor with two forward modes: a prompt-free
//! query pass and a deep-prompted pass where learnable tokens are prepended
//! before selected layers and stripped after them. Only prompt tokens are
//! trainable; every backbone parameter enters the tape as a constant.

mod weights;

use std::path::PathBuf;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView3, Ix1, Ix3, s};
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::mvp::PromptPool;

pub(crate) use weights::BackboneWeights;

const LAYER_NORM_EPS: f64 = 1e-6;

/// How raw inputs become token sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputLayout {
    /// Flat vectors sliced into `tokens` equal chunks.
    Chunks { input_dim: usize, tokens: usize },
    /// Images patchified on a square grid.
    Patches {
        channels: usize,
        resolution: usize,
        patch_size: usize,
    },
}

/// Image preprocessing performed by the backbone (datasets expose raw pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub resize: Option<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Architecture description. `prompt_layers` and `prompt_len` fix the shape
/// of the prompt blocks the pool must supply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub input: InputLayout,
    pub prompt_layers: Vec<usize>,
    pub prompt_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<Preprocess>,
    pub weight_seed: u64,
}

impl BackboneSpec {
    /// Depth-2 random-weight profile for CI and property tests.
    pub fn toy(input_dim: usize) -> Self {
        BackboneSpec {
            depth: 2,
            embed_dim: 64,
            num_heads: 4,
            mlp_hidden: 128,
            input: InputLayout::Chunks {
                input_dim,
                tokens: 4,
            },
            prompt_layers: vec![0, 1],
            prompt_len: 8,
            pretrained: None,
            preprocess: None,
            weight_seed: 0,
        }
    }

    /// ViT-B/16-compatible profile for paper-scale runs. Weights are random
    /// unless `pretrained` points at a checkpoint.
    pub fn vit_b16() -> Self {
        BackboneSpec {
            depth: 12,
            embed_dim: 768,
            num_heads: 12,
            mlp_hidden: 3072,
            input: InputLayout::Patches {
                channels: 3,
                resolution: 224,
                patch_size: 16,
            },
            prompt_layers: vec![0, 1, 2, 3, 4],
            prompt_len: 8,
            pretrained: None,
            preprocess: Some(Preprocess {
                resize: Some(224),
                mean: vec![0.5, 0.5, 0.5],
                std: vec![0.5, 0.5, 0.5],
            }),
            weight_seed: 0,
        }
    }

    /// Token count excluding the class token.
    pub fn token_len(&self) -> usize {
        match &self.input {
            InputLayout::Chunks { tokens, .. } => *tokens,
            InputLayout::Patches {
                resolution,
                patch_size,
                ..
            } => {
                let per_side = resolution / patch_size;
                per_side * per_side
            }
        }
    }

    /// Width of one token before embedding.
    pub fn patch_dim(&self) -> usize {
        match &self.input {
            InputLayout::Chunks { input_dim, tokens } => input_dim / tokens,
            InputLayout::Patches {
                channels,
                patch_size,
                ..
            } => channels * patch_size * patch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.embed_dim == 0 {
            return Err(Error::Config("depth and embed_dim must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if let Some(&l) = self.prompt_layers.iter().find(|&&l| l >= self.depth) {
            return Err(Error::Config(format!(
                "prompt layer {l} out of range for depth {}",
                self.depth
            )));
        }
        if !self.prompt_layers.is_empty() && self.prompt_len == 0 {
            return Err(Error::Config(
                "prompt_len must be at least 1 when prompting is enabled".into(),
            ));
        }
        match &self.input {
            InputLayout::Chunks { input_dim, tokens } => {
                if *tokens == 0 || input_dim % tokens != 0 {
                    return Err(Error::Config(format!(
                        "input_dim {input_dim} not divisible into {tokens} tokens"
                    )));
                }
            }
            InputLayout::Patches {
                resolution,
                patch_size,
                channels,
            } => {
                if *channels == 0 || *patch_size == 0 || resolution % patch_size != 0 {
                    return Err(Error::Config(format!(
                        "resolution {resolution} not divisible by patch size {patch_size}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One recorded forward pass: feature node plus the prompt leaves gradients
/// can be read from.
pub struct ForwardPass {
    pub tape: Tape,
    /// Class-token feature, `[1 x D]`.
    pub feature: NodeId,
    /// One `[prompt_len x D]` leaf per prompted layer, in `prompt_layers` order.
    pub prompt_nodes: Vec<NodeId>,
}

/// Frozen feature extractor.
pub struct Backbone {
    pub spec: BackboneSpec,
    weights: BackboneWeights,
}

impl Backbone {
    /// Random frozen weights from `spec.weight_seed`; loads the checkpoint
    /// instead when `spec.pretrained` is set.
    pub fn from_spec(spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(spec.weight_seed);
        let weights = BackboneWeights::random(&spec, &mut rng);
        let mut backbone = Backbone { spec, weights };
        if let Some(path) = backbone.spec.pretrained.clone() {
            let tensors = crate::checkpoint::read_file(&path)?;
            backbone.load_named_tensors(&tensors)?;
        }
        Ok(backbone)
    }

    /// SHA-256 over every parameter tensor in named order. Training must
    /// never change this.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in self.weights.named_tensors() {
            hasher.update(name.as_bytes());
            for &v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        self.weights
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, t.clone().into_dyn()))
            .collect()
    }

    pub fn load_named_tensors(
        &mut self,
        tensors: &std::collections::BTreeMap<String, ArrayD<f64>>,
    ) -> Result<()> {
        for (name, slot) in self.weights.named_tensors_mut() {
            let tensor = tensors.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing tensor `{name}`"))
            })?;
            let matrix = tensor
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|_| Error::Checkpoint(format!("tensor `{name}` is not 2-D")))?;
            if matrix.raw_dim() != slot.raw_dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    matrix.shape(),
                    slot.shape()
                )));
            }
            *slot = matrix;
        }
        Ok(())
    }

    /// Raw input to a `[token_len x patch_dim]` matrix, applying the declared
    /// preprocessing for image layouts.
    pub fn tokenize(&self, input: &ArrayD<f64>) -> Result<Array2<f64>> {
        match &self.spec.input {
            InputLayout::Chunks { input_dim, tokens } => {
                let v = input.view().into_dimensionality::<Ix1>().map_err(|_| {
                    Error::Contract(format!(
                        "expected a flat [{input_dim}] input, got shape {:?}",
                        input.shape()
                    ))
                })?;
                if v.len() != *input_dim {
                    return Err(Error::Contract(format!(
                        "expected input dim {input_dim}, got {}",
                        v.len()
                    )));
                }
                let chunk = input_dim / tokens;
                Ok(Array2::from_shape_fn((*tokens, chunk), |(t, j)| {
                    v[t * chunk + j]
                }))
            }
            InputLayout::Patches {
                channels,
                resolution,
                patch_size,
            } => {
                let img = input.view().into_dimensionality::<Ix3>().map_err(|_| {
                    Error::Contract(format!(
                        "expected a [C, H, W] image, got shape {:?}",
                        input.shape()
                    ))
                })?;
                if img.shape()[0] != *channels {
                    return Err(Error::Contract(format!(
                        "expected {channels} channels, got {}",
                        img.shape()[0]
                    )));
                }
                let prepared = self.preprocess_image(&img.to_owned())?;
                if prepared.shape()[1] != *resolution || prepared.shape()[2] != *resolution {
                    return Err(Error::Contract(format!(
                        "expected {resolution}x{resolution} input after preprocessing, got {:?}",
                        &prepared.shape()[1..]
                    )));
                }
                let per_side = resolution / patch_size;
                let s_len = *patch_size;
                let mut tokens = Array2::zeros((per_side * per_side, self.spec.patch_dim()));
                for py in 0..per_side {
                    for px in 0..per_side {
                        let mut col = 0;
                        for c in 0..*channels {
                            for dy in 0..s_len {
                                for dx in 0..s_len {
                                    tokens[[py * per_side + px, col]] =
                                        prepared[[c, py * s_len + dy, px * s_len + dx]];
                                    col += 1;
                                }
                            }
                        }
                    }
                }
                Ok(tokens)
            }
        }
    }

    fn preprocess_image(&self, img: &Array3<f64>) -> Result<Array3<f64>> {
        let Some(pre) = &self.spec.preprocess else {
            return Ok(img.clone());
        };
        let mut out = match pre.resize {
            Some(target) if img.shape()[1] != target || img.shape()[2] != target => {
                resize_bilinear(img, target)
            }
            _ => img.clone(),
        };
        if pre.mean.len() != out.shape()[0] || pre.std.len() != out.shape()[0] {
            return Err(Error::Config(
                "preprocess mean/std length must match channel count".into(),
            ));
        }
        for c in 0..out.shape()[0] {
            let (m, s) = (pre.mean[c], pre.std[c]);
            out.slice_mut(s![c, .., ..]).mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }

    /// Records one forward pass. With `prompts` set, each `[prompt_len x D]`
    /// block is prepended to the token sequence before its layer and stripped
    /// after it.
    pub fn forward_tokens(
        &self,
        tokens: &Array2<f64>,
        prompts: Option<ArrayView3<f64>>,
    ) -> Result<ForwardPass> {
        let spec = &self.spec;
        let d = spec.embed_dim;
        if let Some(p) = &prompts {
            let expected = [spec.prompt_layers.len(), spec.prompt_len, d];
            if p.shape() != expected {
                return Err(Error::Contract(format!(
                    "prompt block shape {:?} does not match configured {:?}",
                    p.shape(),
                    expected
                )));
            }
        }
        if tokens.ncols() != spec.patch_dim() || tokens.nrows() != spec.token_len() {
            return Err(Error::Contract(format!(
                "token matrix shape {:?} does not match spec [{} x {}]",
                tokens.shape(),
                spec.token_len(),
                spec.patch_dim()
            )));
        }

        let w = &self.weights;
        let mut tape = Tape::new();
        let mut prompt_nodes = Vec::new();

        let input = tape.constant(tokens.clone());
        let patch_w = tape.constant(w.patch_weight.clone());
        let patch_b = tape.constant(w.patch_bias.clone());
        let embedded = tape.matmul(input, patch_w);
        let embedded = tape.add_row(embedded, patch_b);
        let cls = tape.constant(w.cls_token.clone());
        let seq = tape.concat_rows(&[cls, embedded]);
        let pos = tape.constant(w.pos_embed.clone());
        let mut x = tape.add(seq, pos);
        let base_len = 1 + spec.token_len();

        for (layer, block) in w.blocks.iter().enumerate() {
            let prompt_slot = spec.prompt_layers.iter().position(|&l| l == layer);
            let mut prompted = false;
            if let (Some(slot), Some(p)) = (prompt_slot, &prompts) {
                let block_tokens = p.index_axis(ndarray::Axis(0), slot).to_owned();
                let leaf = tape.variable(block_tokens);
                prompt_nodes.push(leaf);
                x = tape.concat_rows(&[leaf, x]);
                prompted = true;
            }
            x = self.encoder_block(&mut tape, x, block);
            if prompted {
                x = tape.slice_rows(x, spec.prompt_len, base_len);
            }
        }

        let norm_g = tape.constant(w.norm_gain.clone());
        let norm_b = tape.constant(w.norm_bias.clone());
        let normed = tape.layer_norm(x, norm_g, norm_b, LAYER_NORM_EPS);
        let feature = tape.slice_rows(normed, 0, 1);
        Ok(ForwardPass {
            tape,
            feature,
            prompt_nodes,
        })
    }

    fn encoder_block(
        &self,
        tape: &mut Tape,
        x: NodeId,
        block: &weights::BlockWeights,
    ) -> NodeId {
        let d = self.spec.embed_dim;
        let heads = self.spec.num_heads;
        let head_dim = d / heads;

        let ln1_g = tape.constant(block.ln1_gain.clone());
        let ln1_b = tape.constant(block.ln1_bias.clone());
        let normed = tape.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS);

        let qkv_w = tape.constant(block.qkv_weight.clone());
        let qkv_b = tape.constant(block.qkv_bias.clone());
        let qkv = tape.matmul(normed, qkv_w);
        let qkv = tape.add_row(qkv, qkv_b);
        let q = tape.slice_cols(qkv, 0, d);
        let k = tape.slice_cols(qkv, d, d);
        let v = tape.slice_cols(qkv, 2 * d, d);

        let mut head_outputs = Vec::with_capacity(heads);
        let scale = 1.0 / (head_dim as f64).sqrt();
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let qh = tape.scale(qh, scale);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let attn = tape.softmax(scores);
            head_outputs.push(tape.matmul(attn, vh));
        }
        let concat = tape.concat_cols(&head_outputs);
        let proj_w = tape.constant(block.proj_weight.clone());
        let proj_b = tape.constant(block.proj_bias.clone());
        let attn_out = tape.matmul(concat, proj_w);
        let attn_out = tape.add_row(attn_out, proj_b);
        let x = tape.add(x, attn_out);

        let ln2_g = tape.constant(block.ln2_gain.clone());
        let ln2_b = tape.constant(block.ln2_bias.clone());
        let normed = tape.layer_norm(x, ln2_g, ln2_b, LAYER_NORM_EPS);
        let fc1_w = tape.constant(block.fc1_weight.clone());
        let fc1_b = tape.constant(block.fc1_bias.clone());
        let hidden = tape.matmul(normed, fc1_w);
        let hidden = tape.add_row(hidden, fc1_b);
        let hidden = tape.gelu(hidden);
        let fc2_w = tape.constant(block.fc2_weight.clone());
        let fc2_b = tape.constant(block.fc2_bias.clone());
        let mlp_out = tape.matmul(hidden, fc2_w);
        let mlp_out = tape.add_row(mlp_out, fc2_b);
        tape.add(x, mlp_out)
    }

    /// Class-token feature of one input, discarding the tape.
    pub fn feature(&self, input: &ArrayD<f64>, prompts: Option<ArrayView3<f64>>) -> Result<Array1<f64>> {
        let tokens = self.tokenize(input)?;
        let pass = self.forward_tokens(&tokens, prompts)?;
        Ok(pass.tape.value(pass.feature).row(0).to_owned())
    }

    /// Prompt-free query features for a batch, `[B x D]`.
    pub fn extract_query(&self, inputs: &[ArrayD<f64>]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((inputs.len(), self.spec.embed_dim));
        for (i, input) in inputs.iter().enumerate() {
            let q = self.feature(input, None)?;
            out.row_mut(i).assign(&q);
        }
        Ok(out)
    }
}

/// `logits = features . head`; no bias term so every class keeps a comparable
/// weight row for the scoring rules.
pub fn classify(features: &Array2<f64>, head: &Array2<f64>) -> Array2<f64> {
    features.dot(head)
}

/// Nearest-neighbor bilinear resize of a `[C, H, W]` image to `target x target`.
fn resize_bilinear(img: &Array3<f64>, target: usize) -> Array3<f64> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array3::zeros((c, target, target));
    let scale_y = h as f64 / target as f64;
    let scale_x = w as f64 / target as f64;
    for ch in 0..c {
        for y in 0..target {
            let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for x in 0..target {
                let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let top = img[[ch, y0, x0]] * (1.0 - fx) + img[[ch, y0, x1]] * fx;
                let bottom = img[[ch, y1, x0]] * (1.0 - fx) + img[[ch, y1, x1]] * fx;
                out[[ch, y, x]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Trainable state around the frozen extractor: linear head plus prompt pool.
pub struct ModelState {
    pub backbone: Backbone,
    /// `[D x num_classes]`, no bias.
    pub head: Array2<f64>,
    pub pool: PromptPool,
}

impl ModelState {
    pub fn backbone_hash(&self) -> String {
        self.backbone.param_hash()
    }

    pub fn num_classes(&self) -> usize {
        self.head.ncols()
    }
}
