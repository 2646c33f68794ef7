//! Per-batch training steps and their gradient assembly.
//!
//! The prompt-tuning step runs: query extraction, prompt selection (counts
//! first, so the batch sees updated temperatures), prompted forward passes,
//! marginal-benefit scaling, classification, instance-wise masking, ignore
//! scoring, and the combined loss. Scores are detached: gradients reach the
//! head, masks, prompts, and keys, and nothing else.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3, Axis};

use crate::autodiff::softmax_rows;
use crate::backbone::{ModelState, classify};
use crate::datasets::ClassId;
use crate::error::{Error, Result};
use crate::mvp::{
    self, LossBreakdown, Selection, apply_mask_rows, cvpt_loss_and_key_grads, ignore_scores,
    marginal_benefit_scores, total_loss,
};
use crate::optim::{AdamConfig, AdamState};

use super::{Batch, Method, TrainConfig};

pub(crate) struct OptimizerBank {
    head: AdamState,
    keys: AdamState,
    masks: AdamState,
    prompts: AdamState,
}

impl OptimizerBank {
    pub fn new(config: &TrainConfig, state: &ModelState) -> Self {
        let adam = AdamConfig::with_lr(config.learning_rate);
        OptimizerBank {
            // Head groups by class column: untouched classes keep their state.
            head: AdamState::new(adam, state.head.shape(), 1),
            keys: AdamState::new(adam, state.pool.keys.shape(), 0),
            masks: AdamState::new(adam, state.pool.masks.shape(), 0),
            prompts: AdamState::new(adam, state.pool.prompts.shape(), 0),
        }
    }
}

/// Owns optimizer state across steps; the model state is threaded through.
pub struct Trainer {
    pub config: TrainConfig,
    opt: OptimizerBank,
    pub steps_taken: usize,
    pub samples_seen: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, state: &ModelState) -> Self {
        let opt = OptimizerBank::new(&config, state);
        Trainer {
            config,
            opt,
            steps_taken: 0,
            samples_seen: 0,
        }
    }

    /// One optimizer step on `batch`. `exposed` is consulted only when the
    /// config restricts cross-entropy to seen classes.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        state: &mut ModelState,
        exposed: &BTreeSet<ClassId>,
    ) -> Result<LossBreakdown> {
        if batch.inputs.is_empty() {
            return Err(Error::Contract("training batch is empty".into()));
        }
        let breakdown = match self.config.method {
            Method::Mvp | Method::MvpR => self.mvp_step(batch, state, exposed)?,
            Method::FinetuneHead | Method::LinearProbe | Method::Er => {
                self.baseline_step(batch, state)?
            }
        };
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.steps_taken,
                samples_seen: self.samples_seen,
                detail: format!(
                    "total={} ce={} gsf={} cvpt={} labels={:?}",
                    breakdown.total, breakdown.ce, breakdown.gsf, breakdown.cvpt, batch.labels
                ),
            });
        }
        self.steps_taken += 1;
        Ok(breakdown)
    }

    fn mvp_step(
        &mut self,
        batch: &Batch,
        state: &mut ModelState,
        exposed: &BTreeSet<ClassId>,
    ) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let b = batch.inputs.len();
        let d = state.backbone.spec.embed_dim;
        let num_classes = state.num_classes();
        let allowed = cfg.restrict_ce_to_seen.then_some(exposed);

        // Queries from the frozen prompt-free pass; constants everywhere below.
        let queries = state.backbone.extract_query(&batch.inputs)?;

        // All selections first: the whole batch sees post-selection counts.
        let selections: Vec<Selection> = (0..b)
            .map(|i| state.pool.select_train(queries.row(i)))
            .collect();

        // Prompted forward per sample, keeping tapes for the backward pass.
        let mut passes = Vec::with_capacity(b);
        let mut features = Array2::zeros((b, d));
        for (i, input) in batch.inputs.iter().enumerate() {
            let block = state.pool.selected_prompt_block(&selections[i]);
            let tokens = state.backbone.tokenize(input)?;
            let pass = state.backbone.forward_tokens(&tokens, Some(block.view()))?;
            features
                .row_mut(i)
                .assign(&pass.tape.value(pass.feature).row(0));
            passes.push(pass);
        }

        // Detached scores on the raw features.
        let mb = marginal_benefit_scores(&features, &batch.labels, &state.head, cfg.margin);
        let ign = ignore_scores(&features, &batch.labels, &state.head);

        let scaled = mvp::afs_scale(&features, &mb);
        let logits = classify(&scaled, &state.head);
        let mask_rows = {
            let mut m = Array2::zeros((b, num_classes));
            for (i, sel) in selections.iter().enumerate() {
                m.row_mut(i).assign(&state.pool.selected_mask(sel));
            }
            m
        };
        let masked = apply_mask_rows(&logits, &mask_rows);

        let ce_values = ce_rows_restricted(&masked, &batch.labels, allowed)?;
        let (cvpt, key_grads) = cvpt_loss_and_key_grads(&state.pool, queries.view(), true);
        let breakdown = total_loss(&ce_values, &ign, &mb, cvpt, cfg.alpha, cfg.gamma);

        // ---- backward ----
        // Per-sample CE weight: (1 - alpha)/B from the plain term plus
        // alpha * ign^gamma / B from the focal term.
        let probs = softmax_restricted(&masked, allowed);
        let mut d_masked = probs;
        for (i, &label) in batch.labels.iter().enumerate() {
            d_masked[[i, label as usize]] -= 1.0;
            let weight =
                ((1.0 - cfg.alpha) + cfg.alpha * ign[i].powf(cfg.gamma)) / b as f64;
            d_masked.row_mut(i).mapv_inplace(|v| v * weight);
        }

        // Masks: d total / d mask = d_masked ⊙ logits, split over the selection.
        let mut d_mask_pool = Array2::zeros(state.pool.masks.raw_dim());
        for (i, sel) in selections.iter().enumerate() {
            let share = 1.0 / sel.indices.len() as f64;
            let per_sample = &d_masked.row(i) * &logits.row(i);
            for &p in &sel.indices {
                d_mask_pool.row_mut(p).scaled_add(share, &per_sample);
            }
        }

        // Logits and head.
        let d_logits = &d_masked * &mask_rows;
        let d_head = scaled.t().dot(&d_logits);

        // Features: undo the classify and the per-sample AFS division.
        let d_scaled = d_logits.dot(&state.head.t());
        let mut d_features = d_scaled;
        for (i, &s) in mb.iter().enumerate() {
            d_features.row_mut(i).mapv_inplace(|v| v / s);
        }

        // Prompts: per-sample tape backward from the feature node.
        let mut d_prompts = ndarray::Array4::zeros(state.pool.prompts.raw_dim());
        for (i, pass) in passes.iter().enumerate() {
            let seed = d_features.row(i).to_owned().insert_axis(Axis(0));
            let grads = pass.tape.backward(pass.feature, seed);
            let share = 1.0 / selections[i].indices.len() as f64;
            for (slot, &node) in pass.prompt_nodes.iter().enumerate() {
                let Some(g) = grads.get(node) else { continue };
                for &p in &selections[i].indices {
                    let mut dst = d_prompts.slice_mut(ndarray::s![p, slot, .., ..]);
                    dst.scaled_add(share, g);
                }
            }
        }

        let d_keys = key_grads.expect("gradients requested");

        self.opt
            .head
            .update(state.head.view_mut().into_dyn(), d_head.view().into_dyn());
        self.opt.masks.update(
            state.pool.masks.view_mut().into_dyn(),
            d_mask_pool.view().into_dyn(),
        );
        self.opt.keys.update(
            state.pool.keys.view_mut().into_dyn(),
            d_keys.view().into_dyn(),
        );
        self.opt.prompts.update(
            state.pool.prompts.view_mut().into_dyn(),
            d_prompts.view().into_dyn(),
        );

        Ok(breakdown)
    }

    /// Plain cross-entropy on the frozen query features; only the head moves.
    fn baseline_step(&mut self, batch: &Batch, state: &mut ModelState) -> Result<LossBreakdown> {
        let b = batch.inputs.len();
        let features = state.backbone.extract_query(&batch.inputs)?;
        let logits = classify(&features, &state.head);
        let ce_values = mvp::softmax_ce_rows(&logits, &batch.labels);
        let ce = ce_values.iter().sum::<f64>() / b as f64;

        let mut d_logits = softmax_rows(&logits);
        for (i, &label) in batch.labels.iter().enumerate() {
            d_logits[[i, label as usize]] -= 1.0;
        }
        d_logits.mapv_inplace(|v| v / b as f64);
        let d_head = features.t().dot(&d_logits);
        self.opt
            .head
            .update(state.head.view_mut().into_dyn(), d_head.view().into_dyn());

        Ok(LossBreakdown {
            ce,
            gsf: 0.0,
            cvpt: 0.0,
            total: ce,
            per_sample_ignore_scores: Vec::new(),
            per_sample_mb_scores: Vec::new(),
        })
    }
}

/// Per-row cross-entropy, optionally restricting the softmax support to an
/// allowed class set (labels must belong to it).
pub(crate) fn ce_rows_restricted(
    logits: &Array2<f64>,
    labels: &[ClassId],
    allowed: Option<&BTreeSet<ClassId>>,
) -> Result<Vec<f64>> {
    let Some(allowed) = allowed else {
        return Ok(mvp::softmax_ce_rows(logits, labels));
    };
    let mut out = Vec::with_capacity(labels.len());
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        if !allowed.contains(&label) {
            return Err(Error::Contract(format!(
                "label {label} outside the allowed class set"
            )));
        }
        let max = allowed
            .iter()
            .map(|&c| row[c as usize])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + allowed
                .iter()
                .map(|&c| (row[c as usize] - max).exp())
                .sum::<f64>()
                .ln();
        out.push(lse - row[label as usize]);
    }
    Ok(out)
}

/// Row softmax over an optional support; excluded classes get probability 0.
pub(crate) fn softmax_restricted(
    logits: &Array2<f64>,
    allowed: Option<&BTreeSet<ClassId>>,
) -> Array2<f64> {
    let Some(allowed) = allowed else {
        return softmax_rows(logits);
    };
    let mut out = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = allowed
            .iter()
            .map(|&c| row[c as usize])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &c in allowed {
            let e = (row[c as usize] - max).exp();
            out[[i, c as usize]] = e;
            sum += e;
        }
        for &c in allowed {
            out[[i, c as usize]] /= sum;
        }
    }
    out
}

/// Argmax over an allowed class set.
pub(crate) fn argmax_restricted(logits: &Array1<f64>, allowed: &BTreeSet<ClassId>) -> ClassId {
    allowed
        .iter()
        .copied()
        .max_by(|&a, &b| {
            logits[a as usize]
                .partial_cmp(&logits[b as usize])
                .unwrap()
                .then(b.cmp(&a)) // ties: lowest class id
        })
        .expect("allowed set must be non-empty")
}

/// Averaged prompt block for a selection, as an owned array.
pub(crate) fn selected_block_owned(
    pool: &crate::mvp::PromptPool,
    selection: &Selection,
) -> Array3<f64> {
    pool.selected_prompt_block(selection)
}
