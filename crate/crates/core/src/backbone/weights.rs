//! Frozen transformer parameters: random init for the toy profile, loadable
//! from a named-tensor checkpoint for paper-scale runs.

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::BackboneSpec;

pub(crate) struct BlockWeights {
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub qkv_weight: Array2<f64>,
    pub qkv_bias: Array2<f64>,
    pub proj_weight: Array2<f64>,
    pub proj_bias: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
    pub fc1_weight: Array2<f64>,
    pub fc1_bias: Array2<f64>,
    pub fc2_weight: Array2<f64>,
    pub fc2_bias: Array2<f64>,
}

pub(crate) struct BackboneWeights {
    pub patch_weight: Array2<f64>,
    pub patch_bias: Array2<f64>,
    pub cls_token: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<BlockWeights>,
    pub norm_gain: Array2<f64>,
    pub norm_bias: Array2<f64>,
}

fn normal_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl BackboneWeights {
    pub fn random(spec: &BackboneSpec, rng: &mut ChaCha12Rng) -> Self {
        let d = spec.embed_dim;
        let h = spec.mlp_hidden;
        let patch_dim = spec.patch_dim();
        let seq = 1 + spec.token_len();
        let std = 0.02;
        let blocks = (0..spec.depth)
            .map(|_| BlockWeights {
                ln1_gain: Array2::ones((1, d)),
                ln1_bias: Array2::zeros((1, d)),
                qkv_weight: normal_matrix(rng, d, 3 * d, std),
                qkv_bias: Array2::zeros((1, 3 * d)),
                proj_weight: normal_matrix(rng, d, d, std),
                proj_bias: Array2::zeros((1, d)),
                ln2_gain: Array2::ones((1, d)),
                ln2_bias: Array2::zeros((1, d)),
                fc1_weight: normal_matrix(rng, d, h, std),
                fc1_bias: Array2::zeros((1, h)),
                fc2_weight: normal_matrix(rng, h, d, std),
                fc2_bias: Array2::zeros((1, d)),
            })
            .collect();
        BackboneWeights {
            patch_weight: normal_matrix(rng, patch_dim, d, std),
            patch_bias: Array2::zeros((1, d)),
            cls_token: normal_matrix(rng, 1, d, std),
            pos_embed: normal_matrix(rng, seq, d, std),
            blocks,
            norm_gain: Array2::ones((1, d)),
            norm_bias: Array2::zeros((1, d)),
        }
    }

    /// Checkpoint-facing view: stable names, deterministic order.
    pub fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("patch_embed.weight".into(), &self.patch_weight),
            ("patch_embed.bias".into(), &self.patch_bias),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
            ("norm.weight".into(), &self.norm_gain),
            ("norm.bias".into(), &self.norm_bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.norm1.weight"), &b.ln1_gain));
            out.push((format!("{p}.norm1.bias"), &b.ln1_bias));
            out.push((format!("{p}.attn.qkv.weight"), &b.qkv_weight));
            out.push((format!("{p}.attn.qkv.bias"), &b.qkv_bias));
            out.push((format!("{p}.attn.proj.weight"), &b.proj_weight));
            out.push((format!("{p}.attn.proj.bias"), &b.proj_bias));
            out.push((format!("{p}.norm2.weight"), &b.ln2_gain));
            out.push((format!("{p}.norm2.bias"), &b.ln2_bias));
            out.push((format!("{p}.mlp.fc1.weight"), &b.fc1_weight));
            out.push((format!("{p}.mlp.fc1.bias"), &b.fc1_bias));
            out.push((format!("{p}.mlp.fc2.weight"), &b.fc2_weight));
            out.push((format!("{p}.mlp.fc2.bias"), &b.fc2_bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_weight),
            ("patch_embed.bias".into(), &mut self.patch_bias),
            ("cls_token".into(), &mut self.cls_token),
            ("pos_embed".into(), &mut self.pos_embed),
            ("norm.weight".into(), &mut self.norm_gain),
            ("norm.bias".into(), &mut self.norm_bias),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.norm1.weight"), &mut b.ln1_gain));
            out.push((format!("{p}.norm1.bias"), &mut b.ln1_bias));
            out.push((format!("{p}.attn.qkv.weight"), &mut b.qkv_weight));
            out.push((format!("{p}.attn.qkv.bias"), &mut b.qkv_bias));
            out.push((format!("{p}.attn.proj.weight"), &mut b.proj_weight));
            out.push((format!("{p}.attn.proj.bias"), &mut b.proj_bias));
            out.push((format!("{p}.norm2.weight"), &mut b.ln2_gain));
            out.push((format!("{p}.norm2.bias"), &mut b.ln2_bias));
            out.push((format!("{p}.mlp.fc1.weight"), &mut b.fc1_weight));
            out.push((format!("{p}.mlp.fc1.bias"), &mut b.fc1_bias));
            out.push((format!("{p}.mlp.fc2.weight"), &mut b.fc2_weight));
            out.push((format!("{p}.mlp.fc2.bias"), &mut b.fc2_bias));
        }
        out
    }
}
