//! The online loop: stream batches once, train per batch, evaluate on the
//! exposed classes every `eval_period` samples, and close with a full-test
//! evaluation. Replay-equipped methods interleave memory composition and
//! reservoir updates.

mod trainer;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec, ModelState, classify};
use crate::datasets::{ClassId, DatasetIndex, SampleId};
use crate::error::{Error, Result};
use crate::metrics::{AccuracyCurve, MeanStd, forgetting, mean_std};
use crate::mvp::{LossBreakdown, PoolConfig, PromptPool};
use crate::replay::ReplayBuffer;
use crate::rng::{Stage, substream};
use crate::scenario::StreamManifest;

pub use trainer::Trainer;

/// Learners the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Prompt pool with masks, key training, focal weighting, feature scaling.
    Mvp,
    /// Same, plus a reservoir memory with half/half batches.
    MvpR,
    /// Head-only cross-entropy. The full-tuning variant stays out of scope,
    /// so this coincides with linear probing.
    FinetuneHead,
    LinearProbe,
    /// Linear probe plus experience replay.
    Er,
}

impl Method {
    pub fn uses_memory(self) -> bool {
        matches!(self, Method::MvpR | Method::Er)
    }

    pub fn uses_prompts(self) -> bool {
        matches!(self, Method::Mvp | Method::MvpR)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvp" => Ok(Method::Mvp),
            "mvp_r" | "mvp-r" => Ok(Method::MvpR),
            "finetune_head" => Ok(Method::FinetuneHead),
            "linear_probe" => Ok(Method::LinearProbe),
            "er" => Ok(Method::Er),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Memory batch composition: `augment` adds up to a full stream batch from
/// memory; `split` halves the stream batch so the combined size stays fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    #[default]
    Augment,
    Split,
}

/// Training hyperparameters and run surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub margin: f64,
    pub pool_size: usize,
    pub top_k: usize,
    pub memory_size: usize,
    #[serde(default)]
    pub replay_mode: ReplayMode,
    /// Samples between anytime evaluations; defaults to 1% of the stream.
    pub eval_period: Option<usize>,
    /// Apply the selected mask at evaluation time too.
    pub mask_at_eval: bool,
    /// Restrict training cross-entropy to classes seen so far.
    pub restrict_ce_to_seen: bool,
    pub checkpoint_every: Option<usize>,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Mvp,
            learning_rate: 0.005,
            batch_size: 32,
            alpha: 0.5,
            gamma: 2.0,
            margin: 0.5,
            pool_size: 10,
            top_k: 1,
            memory_size: 0,
            replay_mode: ReplayMode::Augment,
            eval_period: None,
            mask_at_eval: true,
            restrict_ce_to_seen: false,
            checkpoint_every: None,
            seeds: vec![0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if let Some(p) = self.eval_period {
            if p < self.batch_size {
                return Err(Error::Config(format!(
                    "eval_period {p} must be at least the batch size {}",
                    self.batch_size
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must be non-empty".into()));
        }
        Ok(())
    }
}

/// Inputs and labels only — task indices never reach the learner.
pub struct Batch {
    pub inputs: Vec<ndarray::ArrayD<f64>>,
    pub labels: Vec<ClassId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub samples_seen: usize,
    pub accuracy: f64,
}

/// Everything a run leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub scenario_seed: u64,
    pub eval_points: Vec<EvalPoint>,
    pub per_class_best_acc: Vec<Option<f64>>,
    pub per_class_final_acc: Vec<Option<f64>>,
    pub final_full_test_acc: Option<f64>,
    pub loss_trace: Vec<LossBreakdown>,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

impl RunRecord {
    pub fn curve(&self) -> Result<AccuracyCurve> {
        AccuracyCurve::new(
            self.eval_points
                .iter()
                .map(|p| (p.samples_seen, p.accuracy))
                .collect(),
        )
    }

    /// Final full-test accuracy; a contract error when the run is incomplete.
    pub fn a_last(&self) -> Result<f64> {
        self.final_full_test_acc
            .ok_or_else(|| Error::Contract("run did not complete; no final accuracy".into()))
    }

    pub fn forgetting(&self) -> Result<f64> {
        forgetting(&self.per_class_best_acc, &self.per_class_final_acc)
    }

    /// Line-delimited persistence: meta, eval, loss, then a closing summary.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Meta<'a> {
            record: &'static str,
            config: &'a TrainConfig,
            seed: u64,
            scenario_seed: u64,
            backbone_hash_before: &'a str,
            backbone_hash_after: &'a str,
        }
        writeln!(
            out,
            "{}",
            serde_json::to_string(&Meta {
                record: "meta",
                config: &self.config,
                seed: self.seed,
                scenario_seed: self.scenario_seed,
                backbone_hash_before: &self.backbone_hash_before,
                backbone_hash_after: &self.backbone_hash_after,
            })?
        )?;
        for point in &self.eval_points {
            writeln!(
                out,
                "{}",
                serde_json::to_string(&serde_json::json!({
                    "record": "eval",
                    "samples_seen": point.samples_seen,
                    "accuracy": point.accuracy,
                }))?
            )?;
        }
        for (step, loss) in self.loss_trace.iter().enumerate() {
            let mut value = serde_json::to_value(loss)?;
            let obj = value.as_object_mut().expect("loss serializes to an object");
            obj.insert("record".into(), "loss".into());
            obj.insert("step".into(), step.into());
            writeln!(out, "{}", serde_json::to_string(&value)?)?;
        }
        writeln!(
            out,
            "{}",
            serde_json::to_string(&serde_json::json!({
                "record": "final",
                "per_class_best_acc": self.per_class_best_acc,
                "per_class_final_acc": self.per_class_final_acc,
                "final_full_test_acc": self.final_full_test_acc,
            }))?
        )?;
        Ok(())
    }

    pub fn write_jsonl_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(file))
    }

    pub fn read_jsonl(reader: impl std::io::Read) -> Result<Self> {
        let mut config = None;
        let mut seed = 0;
        let mut scenario_seed = 0;
        let mut hash_before = String::new();
        let mut hash_after = String::new();
        let mut eval_points = Vec::new();
        let mut loss_trace = Vec::new();
        let mut per_class_best = Vec::new();
        let mut per_class_final = Vec::new();
        let mut final_acc = None;
        for line in BufReader::new(reader).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line)?;
            match value.get("record").and_then(|r| r.as_str()) {
                Some("meta") => {
                    config = Some(serde_json::from_value(value["config"].clone())?);
                    seed = value["seed"].as_u64().unwrap_or(0);
                    scenario_seed = value["scenario_seed"].as_u64().unwrap_or(0);
                    hash_before = value["backbone_hash_before"].as_str().unwrap_or("").into();
                    hash_after = value["backbone_hash_after"].as_str().unwrap_or("").into();
                }
                Some("eval") => eval_points.push(EvalPoint {
                    samples_seen: value["samples_seen"].as_u64().unwrap_or(0) as usize,
                    accuracy: value["accuracy"].as_f64().unwrap_or(f64::NAN),
                }),
                Some("loss") => loss_trace.push(serde_json::from_value(value)?),
                Some("final") => {
                    per_class_best = serde_json::from_value(value["per_class_best_acc"].clone())?;
                    per_class_final =
                        serde_json::from_value(value["per_class_final_acc"].clone())?;
                    final_acc = serde_json::from_value(value["final_full_test_acc"].clone())?;
                }
                _ => return Err(Error::Serialization(format!("unknown record line: {line}"))),
            }
        }
        Ok(RunRecord {
            config: config
                .ok_or_else(|| Error::Serialization("record file has no meta line".into()))?,
            seed,
            scenario_seed,
            eval_points,
            per_class_best_acc: per_class_best,
            per_class_final_acc: per_class_final,
            final_full_test_acc: final_acc,
            loss_trace,
            backbone_hash_before: hash_before,
            backbone_hash_after: hash_after,
        })
    }

    pub fn read_jsonl_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(file)
    }
}

/// Seed-aggregated metrics in the `mean ± std` shape results tables use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub a_auc: MeanStd,
    pub a_last: MeanStd,
    pub forgetting: MeanStd,
    pub seeds: Vec<u64>,
}

pub fn summarize(records: &[RunRecord]) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(Error::Contract("no records to summarize".into()));
    }
    let mut aucs = Vec::new();
    let mut lasts = Vec::new();
    let mut forgettings = Vec::new();
    let mut seeds = Vec::new();
    for record in records {
        aucs.push(crate::metrics::a_auc(&record.curve()?));
        lasts.push(record.a_last()?);
        forgettings.push(record.forgetting()?);
        seeds.push(record.seed);
    }
    Ok(RunSummary {
        a_auc: mean_std(&aucs),
        a_last: mean_std(&lasts),
        forgetting: mean_std(&forgettings),
        seeds,
    })
}

/// Builds the trainable state for a run: frozen backbone, head, prompt pool.
pub fn build_model(
    backbone_spec: &BackboneSpec,
    num_classes: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<ModelState> {
    let backbone = Backbone::from_spec(backbone_spec.clone())?;
    let mut init_rng = substream(seed, Stage::Init);
    let dist = Normal::new(0.0, 0.02).expect("valid std");
    let head = Array2::from_shape_fn((backbone.spec.embed_dim, num_classes), |_| {
        dist.sample(&mut init_rng)
    });
    let pool = PromptPool::init(
        PoolConfig {
            pool_size: config.pool_size,
            top_k: config.top_k,
            num_prompt_layers: backbone.spec.prompt_layers.len(),
            prompt_len: backbone.spec.prompt_len,
            embed_dim: backbone.spec.embed_dim,
            num_classes,
        },
        &mut init_rng,
    )?;
    Ok(ModelState {
        backbone,
        head,
        pool,
    })
}

/// Per-class and overall accuracy of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub per_class: BTreeMap<ClassId, f64>,
}

/// Query-feature cache; sound because the backbone is frozen.
#[derive(Default)]
pub struct EvalContext {
    queries: HashMap<SampleId, Array1<f64>>,
}

impl EvalContext {
    pub fn new() -> Self {
        Self::default()
    }

    fn query(
        &mut self,
        state: &ModelState,
        id: SampleId,
        input: &ndarray::ArrayD<f64>,
    ) -> Result<Array1<f64>> {
        if let Some(q) = self.queries.get(&id) {
            return Ok(q.clone());
        }
        let q = state.backbone.feature(input, None)?;
        self.queries.insert(id, q.clone());
        Ok(q)
    }
}

/// Top-1 accuracy over the test samples of `exposed` classes, with the argmax
/// restricted to those classes. Never mutates the model (no count updates).
pub fn evaluate_exposed(
    state: &ModelState,
    dataset: &DatasetIndex,
    exposed: &BTreeSet<ClassId>,
    config: &TrainConfig,
    ctx: &mut EvalContext,
) -> Result<EvalOutcome> {
    if exposed.is_empty() {
        return Err(Error::Contract("exposed class set is empty".into()));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut per_class = BTreeMap::new();
    for &class in exposed {
        let Some(ids) = dataset.test.get(&class) else {
            continue;
        };
        let mut class_correct = 0usize;
        for &id in ids {
            let sample = dataset.fetch(id)?;
            let logits = predict_logits(state, config, id, &sample.input, ctx)?;
            let predicted = trainer::argmax_restricted(&logits, exposed);
            if predicted == class {
                class_correct += 1;
            }
        }
        per_class.insert(class, class_correct as f64 / ids.len() as f64);
        correct += class_correct;
        total += ids.len();
    }
    Ok(EvalOutcome {
        accuracy: correct as f64 / total.max(1) as f64,
        per_class,
    })
}

fn predict_logits(
    state: &ModelState,
    config: &TrainConfig,
    id: SampleId,
    input: &ndarray::ArrayD<f64>,
    ctx: &mut EvalContext,
) -> Result<Array1<f64>> {
    let query = ctx.query(state, id, input)?;
    if !config.method.uses_prompts() {
        return Ok(query.dot(&state.head));
    }
    let selection = state.pool.select(query.view());
    let block = trainer::selected_block_owned(&state.pool, &selection);
    let feature = state.backbone.feature(input, Some(block.view()))?;
    let mut logits = feature.dot(&state.head);
    if config.mask_at_eval {
        logits *= &state.pool.selected_mask(&selection);
    }
    Ok(logits)
}

/// Streams the manifest once and returns the run's record.
///
/// Evaluation happens on a `samples_seen` grid of spacing `eval_period`,
/// starting at 0 (nothing exposed yet, accuracy recorded as 0) — so a stream
/// of `N` samples yields `floor(N / eval_period) + 1` points — plus a final
/// full-test evaluation over all classes that feeds `A_Last` and the
/// per-class final accuracies.
pub fn run_online(
    manifest: &StreamManifest,
    dataset: &DatasetIndex,
    backbone_spec: &BackboneSpec,
    config: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<RunRecord> {
    config.validate()?;
    let total = manifest.entries.len();
    if total == 0 {
        return Err(Error::Contract("manifest has no entries".into()));
    }
    let eval_period = config
        .eval_period
        .unwrap_or_else(|| (total / 100).max(config.batch_size));
    if eval_period < config.batch_size {
        return Err(Error::Config(format!(
            "eval_period {eval_period} must be at least the batch size {}",
            config.batch_size
        )));
    }

    let num_classes = dataset.num_classes;
    let mut state = build_model(backbone_spec, num_classes, config, seed)?;
    let hash_before = state.backbone_hash();
    let mut trainer = Trainer::new(config.clone(), &state);
    let mut buffer = ReplayBuffer::new(if config.method.uses_memory() {
        config.memory_size
    } else {
        0
    });
    let mut reservoir_rng = substream(seed, Stage::Reservoir);
    let mut replay_rng = substream(seed, Stage::Replay);
    let mut ctx = EvalContext::new();

    let stream_batch_size = if config.method.uses_memory()
        && config.replay_mode == ReplayMode::Split
    {
        (config.batch_size / 2).max(1)
    } else {
        config.batch_size
    };

    let mut exposed: BTreeSet<ClassId> = BTreeSet::new();
    let mut eval_points = vec![EvalPoint {
        samples_seen: 0,
        accuracy: 0.0,
    }];
    let mut best: BTreeMap<ClassId, f64> = BTreeMap::new();
    let mut loss_trace = Vec::new();
    let mut samples_seen = 0usize;
    let mut next_eval = eval_period;

    for stream_batch in manifest.batches(stream_batch_size) {
        for entry in stream_batch {
            exposed.insert(entry.class_id);
        }
        let stream_items: Vec<(SampleId, ClassId)> = stream_batch
            .iter()
            .map(|e| (e.sample_id, e.class_id))
            .collect();
        let train_items = if config.method.uses_memory() {
            buffer.compose_batch(&stream_items, &mut replay_rng)
        } else {
            stream_items.clone()
        };

        let mut batch = Batch {
            inputs: Vec::with_capacity(train_items.len()),
            labels: Vec::with_capacity(train_items.len()),
        };
        for (id, _) in &train_items {
            let sample = dataset.fetch(*id)?;
            batch.inputs.push(sample.input);
            batch.labels.push(sample.label);
        }

        let breakdown = trainer.train_step(&batch, &mut state, &exposed)?;
        loss_trace.push(breakdown);
        samples_seen += stream_batch.len();
        trainer.samples_seen = samples_seen;

        // Memory never sees a sample before the step that streamed it.
        if config.method.uses_memory() {
            for item in &stream_items {
                buffer.update(*item, &mut reservoir_rng);
            }
        }

        if let (Some(every), Some(dir)) = (config.checkpoint_every, checkpoint_dir) {
            if trainer.steps_taken % every == 0 {
                save_checkpoint(&state, &dir.join(format!("step_{:06}.ntk", trainer.steps_taken)))?;
            }
        }

        if samples_seen >= next_eval {
            let outcome = evaluate_exposed(&state, dataset, &exposed, config, &mut ctx)?;
            eval_points.push(EvalPoint {
                samples_seen,
                accuracy: outcome.accuracy,
            });
            for (class, acc) in outcome.per_class {
                let slot = best.entry(class).or_insert(acc);
                *slot = slot.max(acc);
            }
            next_eval += eval_period;
        }
    }

    // Closing full-test evaluation: every class in the argmax.
    let all_classes: BTreeSet<ClassId> = dataset.test.keys().copied().collect();
    let final_outcome = evaluate_exposed(&state, dataset, &all_classes, config, &mut ctx)?;
    let mut per_class_final = vec![None; num_classes];
    let mut per_class_best = vec![None; num_classes];
    for (class, acc) in &final_outcome.per_class {
        per_class_final[*class as usize] = Some(*acc);
    }
    for (class, acc) in &best {
        per_class_best[*class as usize] = Some(*acc);
    }
    // Best includes the final point, so final never exceeds best.
    for class in 0..num_classes {
        if let Some(f) = per_class_final[class] {
            per_class_best[class] = Some(per_class_best[class].map_or(f, |b: f64| b.max(f)));
        }
    }

    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&state, &dir.join("final.ntk"))?;
    }

    Ok(RunRecord {
        config: config.clone(),
        seed,
        scenario_seed: manifest.config.seed,
        eval_points,
        per_class_best_acc: per_class_best,
        per_class_final_acc: per_class_final,
        final_full_test_acc: Some(final_outcome.accuracy),
        loss_trace,
        backbone_hash_before: hash_before,
        backbone_hash_after: state.backbone_hash(),
    })
}

/// Full model checkpoint: backbone, head, and pool tensors.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut tensors: crate::checkpoint::TensorMap = state
        .backbone
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (format!("backbone.{name}"), t))
        .collect();
    tensors.insert("head.weight".into(), state.head.clone().into_dyn());
    tensors.insert("pool.keys".into(), state.pool.keys.clone().into_dyn());
    tensors.insert("pool.prompts".into(), state.pool.prompts.clone().into_dyn());
    tensors.insert("pool.masks".into(), state.pool.masks.clone().into_dyn());
    tensors.insert(
        "pool.counts".into(),
        Array1::from_iter(state.pool.counts.iter().map(|&c| c as f64)).into_dyn(),
    );
    crate::checkpoint::write_file(path, &tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_synthetic;
    use crate::scenario::ScenarioConfig;

    fn toy_setup(per_class: usize) -> (DatasetIndex, StreamManifest, BackboneSpec) {
        let dataset = make_synthetic(6, 32, per_class, 0.05, 7).unwrap();
        let scenario = ScenarioConfig {
            num_tasks: 3,
            seed: 5,
            ..ScenarioConfig::default()
        };
        let manifest = StreamManifest::build(&scenario, &dataset.train).unwrap();
        let spec = BackboneSpec::toy(32);
        (dataset, manifest, spec)
    }

    fn toy_batch(dataset: &DatasetIndex, ids: &[SampleId]) -> Batch {
        let mut batch = Batch {
            inputs: Vec::new(),
            labels: Vec::new(),
        };
        for &id in ids {
            let s = dataset.fetch(id).unwrap();
            batch.inputs.push(s.input);
            batch.labels.push(s.label);
        }
        batch
    }

    fn config(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            pool_size: 4,
            memory_size: if method.uses_memory() { 50 } else { 0 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_is_a_null_step() {
        let (dataset, _, spec) = toy_setup(10);
        let cfg = TrainConfig {
            learning_rate: f64::MIN_POSITIVE, // validation requires > 0
            ..config(Method::Mvp)
        };
        // A truly-zero rate is exercised through the optimizer API directly;
        // here we freeze by setting the smallest positive rate and checking
        // the parameters move by less than 1e-100 ... which is indistinct
        // from zero in f64. Instead, drive the optimizer with lr = 0.
        let mut state = build_model(&spec, dataset.num_classes, &cfg, 3).unwrap();
        let head_before = state.head.clone();
        let pool_keys_before = state.pool.keys.clone();
        let mut zero_cfg = cfg.clone();
        zero_cfg.learning_rate = 0.0; // bypass validation: construct trainer directly
        let mut trainer = Trainer::new(zero_cfg, &state);
        let batch = toy_batch(&dataset, &[0, 1, 12, 30]);
        trainer
            .train_step(&batch, &mut state, &BTreeSet::from([0, 1, 3]))
            .unwrap();
        assert_eq!(state.head, head_before);
        assert_eq!(state.pool.keys, pool_keys_before);
    }

    #[test]
    fn repeated_steps_descend_on_a_fixed_batch() {
        let (dataset, _, spec) = toy_setup(10);
        let cfg = config(Method::Mvp);
        let mut state = build_model(&spec, dataset.num_classes, &cfg, 3).unwrap();
        let mut trainer = Trainer::new(cfg, &state);
        let batch = toy_batch(&dataset, &[0, 5, 11, 16, 22, 27, 33, 38]);
        let exposed: BTreeSet<ClassId> = (0..6).collect();
        let first = trainer.train_step(&batch, &mut state, &exposed).unwrap();
        let mut last = first.clone();
        for _ in 0..9 {
            last = trainer.train_step(&batch, &mut state, &exposed).unwrap();
        }
        assert!(
            last.total < first.total,
            "no descent: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn backbone_hash_survives_many_steps() {
        let (dataset, _, spec) = toy_setup(10);
        let cfg = config(Method::Mvp);
        let mut state = build_model(&spec, dataset.num_classes, &cfg, 3).unwrap();
        let hash = state.backbone_hash();
        let mut trainer = Trainer::new(cfg, &state);
        let batch = toy_batch(&dataset, &[0, 10, 20, 30, 40, 50]);
        let exposed: BTreeSet<ClassId> = (0..6).collect();
        for _ in 0..100 {
            trainer.train_step(&batch, &mut state, &exposed).unwrap();
        }
        assert_eq!(state.backbone_hash(), hash);
    }

    #[test]
    fn linear_probe_touches_only_the_head() {
        let (dataset, _, spec) = toy_setup(10);
        let cfg = config(Method::LinearProbe);
        let mut state = build_model(&spec, dataset.num_classes, &cfg, 3).unwrap();
        let keys = state.pool.keys.clone();
        let masks = state.pool.masks.clone();
        let prompts = state.pool.prompts.clone();
        let head = state.head.clone();
        let mut trainer = Trainer::new(cfg, &state);
        let batch = toy_batch(&dataset, &[0, 12, 25]);
        trainer
            .train_step(&batch, &mut state, &BTreeSet::new())
            .unwrap();
        assert_ne!(state.head, head);
        assert_eq!(state.pool.keys, keys);
        assert_eq!(state.pool.masks, masks);
        assert_eq!(state.pool.prompts, prompts);
        assert_eq!(state.pool.total_selections(), 0);
    }

    #[test]
    fn er_without_memory_equals_linear_probe() {
        let (dataset, manifest, spec) = toy_setup(10);
        let er_cfg = TrainConfig {
            memory_size: 0,
            ..config(Method::Er)
        };
        let lp_cfg = config(Method::LinearProbe);
        let er = run_online(&manifest, &dataset, &spec, &er_cfg, 11, None).unwrap();
        let lp = run_online(&manifest, &dataset, &spec, &lp_cfg, 11, None).unwrap();
        assert_eq!(er.eval_points, lp.eval_points);
        assert_eq!(er.loss_trace, lp.loss_trace);
        assert_eq!(er.final_full_test_acc, lp.final_full_test_acc);
    }

    #[test]
    fn untrained_head_evaluates_at_chance() {
        let dataset = make_synthetic(5, 32, 60, 0.05, 13).unwrap();
        let cfg = config(Method::LinearProbe);
        let state = build_model(&BackboneSpec::toy(32), 5, &cfg, 999).unwrap();
        let exposed: BTreeSet<ClassId> = (0..5).collect();
        let mut ctx = EvalContext::new();
        let outcome = evaluate_exposed(&state, &dataset, &exposed, &cfg, &mut ctx).unwrap();
        // 5 classes, 12 test samples each: binomial(60, 0.2).
        let n = 60.0;
        let p: f64 = 0.2;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!(
            (outcome.accuracy - p).abs() < 3.0 * sigma + 1e-9,
            "accuracy {} not within 3 sigma of chance {p}",
            outcome.accuracy
        );
    }

    #[test]
    fn evaluation_is_pure() {
        let (dataset, _, spec) = toy_setup(10);
        let cfg = config(Method::Mvp);
        let state = build_model(&spec, dataset.num_classes, &cfg, 3).unwrap();
        let counts_before = state.pool.counts.clone();
        let exposed: BTreeSet<ClassId> = (0..6).collect();
        let mut ctx = EvalContext::new();
        let a = evaluate_exposed(&state, &dataset, &exposed, &cfg, &mut ctx).unwrap();
        let b = evaluate_exposed(&state, &dataset, &exposed, &cfg, &mut ctx).unwrap();
        assert_eq!(a, b);
        assert_eq!(state.pool.counts, counts_before);
    }

    #[test]
    fn full_exposure_equals_plain_test_accuracy() {
        let (dataset, _, spec) = toy_setup(10);
        let cfg = config(Method::LinearProbe);
        let state = build_model(&spec, dataset.num_classes, &cfg, 3).unwrap();
        let all: BTreeSet<ClassId> = (0..6).collect();
        let mut ctx = EvalContext::new();
        let outcome = evaluate_exposed(&state, &dataset, &all, &cfg, &mut ctx).unwrap();

        // Independent recount without class restriction.
        let mut correct = 0;
        let mut total = 0;
        for ids in dataset.test.values() {
            for &id in ids {
                let s = dataset.fetch(id).unwrap();
                let q = state.backbone.feature(&s.input, None).unwrap();
                let logits = q.dot(&state.head);
                let pred = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0 as ClassId;
                if pred == s.label {
                    correct += 1;
                }
                total += 1;
            }
        }
        assert!((outcome.accuracy - correct as f64 / total as f64).abs() < 1e-12);
    }

    #[test]
    fn eval_schedule_arithmetic_holds() {
        let (dataset, manifest, spec) = toy_setup(10);
        let total = manifest.entries.len();
        let cfg = TrainConfig {
            eval_period: Some(32),
            ..config(Method::LinearProbe)
        };
        let record = run_online(&manifest, &dataset, &spec, &cfg, 2, None).unwrap();
        assert_eq!(record.eval_points.len(), total / 32 + 1);
        assert!(record
            .eval_points
            .windows(2)
            .all(|w| w[0].samples_seen < w[1].samples_seen));
    }

    #[test]
    fn runs_are_deterministic() {
        let (dataset, manifest, spec) = toy_setup(8);
        let cfg = config(Method::MvpR);
        let a = run_online(&manifest, &dataset, &spec, &cfg, 4, None).unwrap();
        let b = run_online(&manifest, &dataset, &spec, &cfg, 4, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn record_roundtrips_through_jsonl() {
        let (dataset, manifest, spec) = toy_setup(8);
        let cfg = config(Method::Mvp);
        let record = run_online(&manifest, &dataset, &spec, &cfg, 4, None).unwrap();
        let mut bytes = Vec::new();
        record.write_jsonl(&mut bytes).unwrap();
        let back = RunRecord::read_jsonl(bytes.as_slice()).unwrap();
        assert_eq!(record, back);
    }

    #[test]
    fn summary_of_single_seed_has_zero_std() {
        let (dataset, manifest, spec) = toy_setup(8);
        let cfg = config(Method::LinearProbe);
        let record = run_online(&manifest, &dataset, &spec, &cfg, 4, None).unwrap();
        let summary = summarize(&[record]).unwrap();
        assert_eq!(summary.a_last.std, 0.0);
        assert_eq!(summary.seeds, vec![4]);
    }
}
