//! Stochastic blurry-boundary stream construction.
//!
//! Classes are split into a disjoint set (all samples stay in one home task)
//! and a blurry set (a fixed fraction of each class's samples is pooled and
//! scattered across tasks). Home tasks are drawn independently per class, so
//! per-task class counts vary from seed to seed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{ClassId, SampleId, SplitIndex};
use crate::error::{Error, Result};
use crate::rng::{Stage, substream};

/// Stream construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub num_tasks: usize,
    pub disjoint_class_ratio: f64,
    pub blurry_sample_ratio: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// When set, pooled blurry samples never land back in their home task.
    #[serde(default)]
    pub exclude_home_task: bool,
    /// When set, classes are dealt to tasks round-robin instead of
    /// independently at random, fixing per-task class counts.
    #[serde(default)]
    pub balanced_assignment: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            num_tasks: 5,
            disjoint_class_ratio: 0.5,
            blurry_sample_ratio: 0.1,
            seed: 0,
            batch_size: 32,
            exclude_home_task: false,
            balanced_assignment: false,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::Config("num_tasks must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, v) in [
            ("disjoint_class_ratio", self.disjoint_class_ratio),
            ("blurry_sample_ratio", self.blurry_sample_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Disjoint/blurry class split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub disjoint_classes: BTreeSet<ClassId>,
    pub blurry_classes: BTreeSet<ClassId>,
}

/// Home task per class, with the inverse map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub class_to_task: BTreeMap<ClassId, usize>,
    pub per_task_classes: Vec<BTreeSet<ClassId>>,
}

/// One stream position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: SampleId,
    pub class_id: ClassId,
    /// Bookkeeping only; learners must not condition on it.
    pub task_index: usize,
}

/// The fully materialized, seed-reproducible stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub config: ScenarioConfig,
    pub partition: ClassPartition,
    /// Offsets into `entries` where each task begins.
    pub task_boundaries: Vec<usize>,
    /// Per blurry class, how many samples were pooled for redistribution.
    pub pooled_counts: BTreeMap<ClassId, usize>,
    pub entries: Vec<ManifestEntry>,
}

/// Half-up rounding for class and sample counts.
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Splits `class_ids` into disjoint and blurry sets; `round(ratio * n)`
/// classes drawn uniformly without replacement become disjoint.
pub fn partition_classes(
    class_ids: &BTreeSet<ClassId>,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<ClassPartition> {
    if class_ids.is_empty() {
        return Err(Error::Config("cannot partition an empty class set".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "disjoint_class_ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let ordered: Vec<ClassId> = class_ids.iter().copied().collect();
    let n_disjoint = round_half_up(ratio * ordered.len() as f64).min(ordered.len());
    let picked = rand::seq::index::sample(rng, ordered.len(), n_disjoint);
    let disjoint_classes: BTreeSet<ClassId> = picked.iter().map(|i| ordered[i]).collect();
    let blurry_classes = class_ids - &disjoint_classes;
    Ok(ClassPartition {
        disjoint_classes,
        blurry_classes,
    })
}

/// Draws each class's home task. Default: independent uniform draws, so
/// per-task counts are multinomial. The balanced flag deals classes
/// round-robin after a shuffle instead.
pub fn assign_classes_to_tasks(
    partition: &ClassPartition,
    num_tasks: usize,
    balanced: bool,
    rng: &mut impl Rng,
) -> Result<TaskAssignment> {
    if num_tasks == 0 {
        return Err(Error::Config("num_tasks must be at least 1".into()));
    }
    let mut classes: Vec<ClassId> = partition
        .disjoint_classes
        .iter()
        .chain(partition.blurry_classes.iter())
        .copied()
        .collect();
    classes.sort_unstable();

    let mut class_to_task = BTreeMap::new();
    let mut per_task_classes = vec![BTreeSet::new(); num_tasks];
    if balanced {
        classes.shuffle(rng);
        for (i, class) in classes.iter().enumerate() {
            let task = i % num_tasks;
            class_to_task.insert(*class, task);
            per_task_classes[task].insert(*class);
        }
    } else {
        for class in classes {
            let task = rng.random_range(0..num_tasks);
            class_to_task.insert(class, task);
            per_task_classes[task].insert(class);
        }
    }
    Ok(TaskAssignment {
        class_to_task,
        per_task_classes,
    })
}

/// Pools `round(blurry_ratio * n_c)` samples of each blurry class, scatters
/// the pool uniformly over tasks, shuffles within tasks, and lays tasks out
/// in order. Pooled samples may land back home unless the config excludes it;
/// the pooled count is what the exactness invariant is stated over.
pub fn distribute_blurry_samples(
    train_index: &SplitIndex,
    partition: &ClassPartition,
    assignment: &TaskAssignment,
    config: &ScenarioConfig,
    leakage_rng: &mut impl Rng,
    shuffle_rng: &mut impl Rng,
) -> Result<StreamManifest> {
    let num_tasks = assignment.per_task_classes.len();
    let mut per_task: Vec<Vec<ManifestEntry>> = vec![Vec::new(); num_tasks];
    let mut pooled_counts = BTreeMap::new();

    for (&class, sample_ids) in train_index {
        let home = *assignment.class_to_task.get(&class).ok_or_else(|| {
            Error::Config(format!("class {class} has no home task assignment"))
        })?;
        let entry = |sample_id: SampleId, task_index: usize| ManifestEntry {
            sample_id,
            class_id: class,
            task_index,
        };
        if partition.disjoint_classes.contains(&class) {
            per_task[home].extend(sample_ids.iter().map(|&id| entry(id, home)));
            continue;
        }
        if sample_ids.is_empty() {
            log::warn!("blurry class {class} has no samples; skipped");
            pooled_counts.insert(class, 0);
            continue;
        }
        let n_pool = round_half_up(config.blurry_sample_ratio * sample_ids.len() as f64)
            .min(sample_ids.len());
        pooled_counts.insert(class, n_pool);
        let picked: BTreeSet<usize> = rand::seq::index::sample(leakage_rng, sample_ids.len(), n_pool)
            .iter()
            .collect();
        for (i, &id) in sample_ids.iter().enumerate() {
            if picked.contains(&i) {
                let dest = if config.exclude_home_task && num_tasks > 1 {
                    let draw = leakage_rng.random_range(0..num_tasks - 1);
                    if draw >= home { draw + 1 } else { draw }
                } else {
                    leakage_rng.random_range(0..num_tasks)
                };
                per_task[dest].push(entry(id, dest));
            } else {
                per_task[home].push(entry(id, home));
            }
        }
    }

    let mut entries = Vec::new();
    let mut task_boundaries = Vec::with_capacity(num_tasks);
    for mut task_entries in per_task {
        task_boundaries.push(entries.len());
        task_entries.shuffle(shuffle_rng);
        entries.extend(task_entries);
    }

    Ok(StreamManifest {
        config: config.clone(),
        partition: partition.clone(),
        task_boundaries,
        pooled_counts,
        entries,
    })
}

impl StreamManifest {
    /// Runs the full pipeline — partition, assignment, leakage, shuffle —
    /// each stage on its own substream of `config.seed`.
    pub fn build(config: &ScenarioConfig, train_index: &SplitIndex) -> Result<Self> {
        config.validate()?;
        let class_ids: BTreeSet<ClassId> = train_index.keys().copied().collect();
        let mut partition_rng = substream(config.seed, Stage::Partition);
        let partition =
            partition_classes(&class_ids, config.disjoint_class_ratio, &mut partition_rng)?;
        let mut assignment_rng = substream(config.seed, Stage::Assignment);
        let assignment = assign_classes_to_tasks(
            &partition,
            config.num_tasks,
            config.balanced_assignment,
            &mut assignment_rng,
        )?;
        let mut leakage_rng = substream(config.seed, Stage::Leakage);
        let mut shuffle_rng = substream(config.seed, Stage::Shuffle);
        distribute_blurry_samples(
            train_index,
            &partition,
            &assignment,
            config,
            &mut leakage_rng,
            &mut shuffle_rng,
        )
    }

    /// Consecutive non-overlapping batches; the last may be short. Two
    /// iterations over the same manifest yield identical sequences.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = &[ManifestEntry]> {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        self.entries.chunks(batch_size)
    }

    /// Home task of each sample according to this manifest's ordering.
    pub fn task_of_offset(&self, offset: usize) -> usize {
        match self.task_boundaries.binary_search(&offset) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    /// Line-delimited serialization: a header record, then one record per
    /// entry. Field order is fixed by the struct definitions, so identical
    /// manifests produce identical bytes.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let header = ManifestHeader {
            config: &self.config,
            partition: &self.partition,
            task_boundaries: &self.task_boundaries,
            pooled_counts: &self.pooled_counts,
            num_entries: self.entries.len(),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for entry in &self.entries {
            writeln!(out, "{}", serde_json::to_string(entry)?)?;
        }
        Ok(())
    }

    pub fn write_jsonl_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(file))
    }

    pub fn read_jsonl(reader: impl std::io::Read) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Serialization("empty manifest file".into()))??;
        let header: OwnedManifestHeader = serde_json::from_str(&header_line)?;
        let mut entries = Vec::with_capacity(header.num_entries);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        if entries.len() != header.num_entries {
            return Err(Error::Serialization(format!(
                "manifest header promises {} entries, found {}",
                header.num_entries,
                entries.len()
            )));
        }
        Ok(StreamManifest {
            config: header.config,
            partition: header.partition,
            task_boundaries: header.task_boundaries,
            pooled_counts: header.pooled_counts,
            entries,
        })
    }

    pub fn read_jsonl_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(file)
    }

    pub fn stats(&self) -> ManifestStats {
        let num_tasks = self.config.num_tasks;
        let mut samples = vec![0usize; num_tasks];
        let mut classes: Vec<BTreeSet<ClassId>> = vec![BTreeSet::new(); num_tasks];
        for entry in &self.entries {
            samples[entry.task_index] += 1;
            classes[entry.task_index].insert(entry.class_id);
        }
        ManifestStats {
            per_task_samples: samples,
            per_task_classes: classes.iter().map(BTreeSet::len).collect(),
        }
    }
}

#[derive(Serialize)]
struct ManifestHeader<'a> {
    config: &'a ScenarioConfig,
    partition: &'a ClassPartition,
    task_boundaries: &'a [usize],
    pooled_counts: &'a BTreeMap<ClassId, usize>,
    num_entries: usize,
}

#[derive(Deserialize)]
struct OwnedManifestHeader {
    config: ScenarioConfig,
    partition: ClassPartition,
    task_boundaries: Vec<usize>,
    pooled_counts: BTreeMap<ClassId, usize>,
    num_entries: usize,
}

/// Per-task class and sample counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestStats {
    pub per_task_samples: Vec<usize>,
    pub per_task_classes: Vec<usize>,
}

impl std::fmt::Display for ManifestStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:>6}  {:>8}  {:>8}", "task", "classes", "samples")?;
        for (i, (c, s)) in self
            .per_task_classes
            .iter()
            .zip(&self.per_task_samples)
            .enumerate()
        {
            writeln!(f, "{i:>6}  {c:>8}  {s:>8}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn class_set(n: u32) -> BTreeSet<ClassId> {
        (0..n).collect()
    }

    /// Uniform synthetic split index: `per_class` ids per class.
    fn split_index(num_classes: u32, per_class: usize) -> SplitIndex {
        let mut index = SplitIndex::new();
        for c in 0..num_classes {
            index.insert(
                c,
                (0..per_class)
                    .map(|j| u64::from(c) * per_class as u64 + j as u64)
                    .collect(),
            );
        }
        index
    }

    #[test]
    fn partition_matches_half_up_rounding() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let p = partition_classes(&class_set(100), 0.5, &mut rng).unwrap();
        assert_eq!(p.disjoint_classes.len(), 50);
        assert_eq!(p.blurry_classes.len(), 50);

        let p = partition_classes(&class_set(100), 1.0, &mut rng).unwrap();
        assert_eq!(p.disjoint_classes.len(), 100);
        assert!(p.blurry_classes.is_empty());

        let p = partition_classes(&class_set(10), 0.0, &mut rng).unwrap();
        assert!(p.disjoint_classes.is_empty());
        assert_eq!(p.blurry_classes.len(), 10);
    }

    #[test]
    fn partition_rejects_empty_class_set() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert!(partition_classes(&BTreeSet::new(), 0.5, &mut rng).is_err());
    }

    #[test]
    fn single_task_assignment_is_total() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let p = partition_classes(&class_set(12), 0.5, &mut rng).unwrap();
        let a = assign_classes_to_tasks(&p, 1, false, &mut rng).unwrap();
        assert!(a.class_to_task.values().all(|&t| t == 0));
        assert_eq!(a.per_task_classes[0].len(), 12);
    }

    /// Monte Carlo oracle: class counts per task are Binomial(100, 1/5).
    #[test]
    fn per_task_counts_are_multinomial() {
        let classes = class_set(100);
        let mut counts = Vec::with_capacity(10_000 * 5);
        for seed in 0..10_000u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let p = partition_classes(&classes, 0.5, &mut rng).unwrap();
            let a = assign_classes_to_tasks(&p, 5, false, &mut rng).unwrap();
            counts.extend(a.per_task_classes.iter().map(|s| s.len() as f64));
        }
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<f64>() / n;
        let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1.0);
        assert!((mean - 20.0).abs() < 0.1, "mean {mean}");
        assert!((var - 16.0).abs() < 0.6, "variance {var}");
    }

    #[test]
    fn different_seeds_disagree_somewhere() {
        let classes = class_set(100);
        let counts_for = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let p = partition_classes(&classes, 0.5, &mut rng).unwrap();
            let a = assign_classes_to_tasks(&p, 5, false, &mut rng).unwrap();
            a.per_task_classes.iter().map(BTreeSet::len).collect::<Vec<_>>()
        };
        let first = counts_for(0);
        assert!((1..10).any(|s| counts_for(s) != first));
    }

    #[test]
    fn balanced_assignment_fixes_counts() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let p = partition_classes(&class_set(100), 0.5, &mut rng).unwrap();
        let a = assign_classes_to_tasks(&p, 5, true, &mut rng).unwrap();
        assert!(a.per_task_classes.iter().all(|s| s.len() == 20));
    }

    #[test]
    fn zero_blurry_ratio_keeps_everything_home() {
        let index = split_index(10, 20);
        let config = ScenarioConfig {
            blurry_sample_ratio: 0.0,
            seed: 9,
            ..ScenarioConfig::default()
        };
        let manifest = StreamManifest::build(&config, &index).unwrap();
        let assignment_ok = manifest.entries.iter().all(|e| {
            // With no leakage, every sample sits in its class's home task, so
            // all entries of a class share one task.
            manifest
                .entries
                .iter()
                .filter(|o| o.class_id == e.class_id)
                .all(|o| o.task_index == e.task_index)
        });
        assert!(assignment_ok);
        assert!(manifest.pooled_counts.values().all(|&c| c == 0));
    }

    #[test]
    fn pooled_count_follows_ratio() {
        let index = split_index(4, 500);
        let config = ScenarioConfig {
            disjoint_class_ratio: 0.0, // all blurry
            blurry_sample_ratio: 0.1,
            seed: 21,
            ..ScenarioConfig::default()
        };
        let manifest = StreamManifest::build(&config, &index).unwrap();
        for class in 0..4 {
            assert_eq!(manifest.pooled_counts[&class], 50);
        }
    }

    #[test]
    fn sample_conservation_on_full_size_index() {
        let index = split_index(100, 500);
        let config = ScenarioConfig {
            seed: 7,
            ..ScenarioConfig::default()
        };
        let manifest = StreamManifest::build(&config, &index).unwrap();
        assert_eq!(manifest.entries.len(), 50_000);
        let mut seen: BTreeSet<SampleId> = BTreeSet::new();
        for e in &manifest.entries {
            assert!(seen.insert(e.sample_id), "duplicate sample {e:?}");
        }
        let expected: BTreeSet<SampleId> =
            index.values().flat_map(|ids| ids.iter().copied()).collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn disjoint_classes_never_leak() {
        let index = split_index(20, 50);
        let config = ScenarioConfig {
            seed: 3,
            ..ScenarioConfig::default()
        };
        let manifest = StreamManifest::build(&config, &index).unwrap();
        for class in &manifest.partition.disjoint_classes {
            let tasks: BTreeSet<usize> = manifest
                .entries
                .iter()
                .filter(|e| e.class_id == *class)
                .map(|e| e.task_index)
                .collect();
            assert_eq!(tasks.len(), 1, "disjoint class {class} spread over {tasks:?}");
        }
    }

    #[test]
    fn exclude_home_flag_sends_pool_away() {
        let index = split_index(6, 100);
        let config = ScenarioConfig {
            disjoint_class_ratio: 0.0,
            blurry_sample_ratio: 0.2,
            exclude_home_task: true,
            seed: 5,
            ..ScenarioConfig::default()
        };
        let manifest = StreamManifest::build(&config, &index).unwrap();
        // With the flag, exactly the pooled count sits outside each home task.
        for class in 0..6u32 {
            let tasks: Vec<usize> = manifest
                .entries
                .iter()
                .filter(|e| e.class_id == class)
                .map(|e| e.task_index)
                .collect();
            let mut task_counts = BTreeMap::new();
            for t in &tasks {
                *task_counts.entry(*t).or_insert(0usize) += 1;
            }
            let home = *task_counts.iter().max_by_key(|(_, &c)| c).unwrap().0;
            let away: usize = task_counts
                .iter()
                .filter(|(&t, _)| t != home)
                .map(|(_, &c)| c)
                .sum();
            assert_eq!(away, manifest.pooled_counts[&class]);
        }
    }

    #[test]
    fn manifests_are_byte_deterministic() {
        let index = split_index(30, 40);
        let config = ScenarioConfig {
            seed: 11,
            ..ScenarioConfig::default()
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        StreamManifest::build(&config, &index)
            .unwrap()
            .write_jsonl(&mut a)
            .unwrap();
        StreamManifest::build(&config, &index)
            .unwrap()
            .write_jsonl(&mut b)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_roundtrips_through_jsonl() {
        let index = split_index(8, 25);
        let config = ScenarioConfig {
            seed: 13,
            ..ScenarioConfig::default()
        };
        let manifest = StreamManifest::build(&config, &index).unwrap();
        let mut bytes = Vec::new();
        manifest.write_jsonl(&mut bytes).unwrap();
        let reread = StreamManifest::read_jsonl(bytes.as_slice()).unwrap();
        assert_eq!(manifest, reread);
    }

    #[test]
    fn batches_cover_entries_in_order() {
        let index = split_index(10, 10);
        let config = ScenarioConfig {
            seed: 17,
            ..ScenarioConfig::default()
        };
        let manifest = StreamManifest::build(&config, &index).unwrap();
        assert_eq!(manifest.entries.len(), 100);
        let sizes: Vec<usize> = manifest.batches(32).map(<[_]>::len).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);

        let concat: Vec<ManifestEntry> =
            manifest.batches(32).flatten().copied().collect();
        assert_eq!(concat, manifest.entries);

        let again: Vec<ManifestEntry> =
            manifest.batches(32).flatten().copied().collect();
        assert_eq!(concat, again);
    }

    #[test]
    fn stats_sum_to_totals() {
        let index = split_index(12, 30);
        let config = ScenarioConfig {
            seed: 19,
            ..ScenarioConfig::default()
        };
        let manifest = StreamManifest::build(&config, &index).unwrap();
        let stats = manifest.stats();
        assert_eq!(stats.per_task_samples.iter().sum::<usize>(), 360);
        assert_eq!(stats.per_task_samples.len(), 5);
    }
}
