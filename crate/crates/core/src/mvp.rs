//! Mask and visual prompt tuning: a pool of key/prompt/mask triples with
//! top-1 selection, a contrastive key-training loss with per-key selection
//! counts as temperature, instance-wise logit masking, a gradient-similarity
//! focal loss, and adaptive feature scaling.
//!
//! Both scoring rules (ignore scores and marginal-benefit scores) are
//! detached: they weight the loss but the optimizer treats them as constants.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::ClassId;
use crate::error::{Error, Result};

/// Cosine distance `1 - a.b / (|a||b|)`, in `[0, 2]`. Either argument having
/// zero norm yields 1 by convention; callers log when they hit it.
pub fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - a.dot(&b) / (na * nb)
}

/// Pool geometry and selection behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub pool_size: usize,
    pub top_k: usize,
    pub num_prompt_layers: usize,
    pub prompt_len: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::Config("pool_size must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.pool_size {
            return Err(Error::Config(format!(
                "top_k must lie in [1, pool_size], got {}",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// Keys, deep prompts, per-prompt logit masks, and selection counts.
pub struct PromptPool {
    pub config: PoolConfig,
    /// `[P x D]`
    pub keys: Array2<f64>,
    /// `[P x layers x prompt_len x D]`
    pub prompts: Array4<f64>,
    /// `[P x num_classes]`, initialized to all ones so step 0 is a no-op.
    pub masks: Array2<f64>,
    /// Training-time selections per prompt; monotone nondecreasing.
    pub counts: Vec<u64>,
}

/// Outcome of matching a query against the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Chosen prompt indices, nearest first; ties broken by lowest index.
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl Selection {
    pub fn primary(&self) -> usize {
        self.indices[0]
    }
}

impl PromptPool {
    pub fn init(config: PoolConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let dist = Normal::new(0.0, 0.02).expect("valid std");
        let keys = Array2::from_shape_fn((config.pool_size, config.embed_dim), |_| {
            dist.sample(rng)
        });
        let prompts = Array4::from_shape_fn(
            (
                config.pool_size,
                config.num_prompt_layers,
                config.prompt_len,
                config.embed_dim,
            ),
            |_| dist.sample(rng),
        );
        let masks = Array2::ones((config.pool_size, config.num_classes));
        let counts = vec![0; config.pool_size];
        Ok(PromptPool {
            config,
            keys,
            prompts,
            masks,
            counts,
        })
    }

    /// Nearest keys by cosine distance. Pure: evaluation-time matching.
    pub fn select(&self, query: ArrayView1<f64>) -> Selection {
        let mut order: Vec<(usize, f64)> = self
            .keys
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, key)| (i, cosine_distance(key, query)))
            .collect();
        order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        order.truncate(self.config.top_k);
        Selection {
            indices: order.iter().map(|&(i, _)| i).collect(),
            distances: order.iter().map(|&(_, d)| d).collect(),
        }
    }

    /// Training-time matching: also increments the selection count of every
    /// chosen prompt.
    pub fn select_train(&mut self, query: ArrayView1<f64>) -> Selection {
        let selection = self.select(query);
        for &i in &selection.indices {
            self.counts[i] += 1;
        }
        selection
    }

    /// `[layers x prompt_len x D]` view of one prompt entry.
    pub fn prompt_block(&self, index: usize) -> ArrayView3<f64> {
        self.prompts.index_axis(Axis(0), index)
    }

    /// Averaged prompt block over a selection (top-1 selections return the
    /// block itself).
    pub fn selected_prompt_block(&self, selection: &Selection) -> ndarray::Array3<f64> {
        let mut acc = self.prompt_block(selection.indices[0]).to_owned();
        for &i in &selection.indices[1..] {
            acc += &self.prompt_block(i);
        }
        acc / selection.indices.len() as f64
    }

    /// Averaged mask row over a selection.
    pub fn selected_mask(&self, selection: &Selection) -> Array1<f64> {
        let mut acc = self.masks.row(selection.indices[0]).to_owned();
        for &i in &selection.indices[1..] {
            acc += &self.masks.row(i);
        }
        acc / selection.indices.len() as f64
    }

    pub fn total_selections(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Contrastive key-training loss. Positive mass pairs every key with every
/// query; negative mass pairs keys with keys; `(count + 1)` tempers each
/// key's terms so frequently selected keys move less.
pub fn cvpt_loss(pool: &PromptPool, queries: ArrayView2<f64>) -> f64 {
    cvpt_loss_and_key_grads(pool, queries, false).0
}

/// Loss plus analytic gradient for the keys (queries and counts are
/// constants). Set `with_grads: false` to skip gradient work.
pub fn cvpt_loss_and_key_grads(
    pool: &PromptPool,
    queries: ArrayView2<f64>,
    with_grads: bool,
) -> (f64, Option<Array2<f64>>) {
    let p = pool.keys.nrows();
    let temps: Vec<f64> = pool.counts.iter().map(|&c| c as f64 + 1.0).collect();

    let mut positive = 0.0;
    for (i, key) in pool.keys.rows().into_iter().enumerate() {
        for q in queries.rows() {
            positive += (cosine_distance(key, q) / temps[i]).exp();
        }
    }
    let mut negative = 0.0;
    for (i, a) in pool.keys.rows().into_iter().enumerate() {
        for b in pool.keys.rows() {
            negative += (cosine_distance(a, b) / temps[i]).exp();
        }
    }
    let loss = -(negative / (positive + negative)).ln();
    if !with_grads {
        return (loss, None);
    }

    // d loss = (-1/s_n + 1/(s_p+s_n)) ds_n + 1/(s_p+s_n) ds_p
    let dl_dneg = -1.0 / negative + 1.0 / (positive + negative);
    let dl_dpos = 1.0 / (positive + negative);
    let mut grads = Array2::zeros((p, pool.keys.ncols()));

    for (i, key) in pool.keys.rows().into_iter().enumerate() {
        for q in queries.rows() {
            let weight = dl_dpos * (cosine_distance(key, q) / temps[i]).exp() / temps[i];
            let d = cosine_distance_grad_a(key, q);
            let mut row = grads.row_mut(i);
            row += &(&d * weight);
        }
    }
    for i in 0..p {
        for j in 0..p {
            let a = pool.keys.row(i);
            let b = pool.keys.row(j);
            let weight = dl_dneg * (cosine_distance(a, b) / temps[i]).exp() / temps[i];
            let da = cosine_distance_grad_a(a, b);
            let db = cosine_distance_grad_a(b, a);
            {
                let mut row = grads.row_mut(i);
                row += &(&da * weight);
            }
            {
                let mut row = grads.row_mut(j);
                row += &(&db * weight);
            }
        }
    }
    (loss, Some(grads))
}

/// d cosine_distance(a, b) / d a; zero at zero norms (subgradient choice for
/// the convention point).
fn cosine_distance_grad_a(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Array1::zeros(a.len());
    }
    let cos = a.dot(&b) / (na * nb);
    // d cs/da = b/(|a||b|) - cs * a/|a|^2 ; distance flips the sign.
    let term = &b.mapv(|v| v / (na * nb)) - &a.mapv(|v| cos * v / (na * na));
    -term
}

/// Element-wise product of one mask into every logit row.
pub fn apply_mask(logits: &Array2<f64>, mask: ArrayView1<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        row *= &mask;
    }
    out
}

/// Element-wise product with a per-row mask matrix.
pub fn apply_mask_rows(logits: &Array2<f64>, masks: &Array2<f64>) -> Array2<f64> {
    logits * masks
}

/// Per-row softmax cross-entropy values.
pub fn softmax_ce_rows(logits: &Array2<f64>, labels: &[ClassId]) -> Vec<f64> {
    assert_eq!(logits.nrows(), labels.len());
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &label)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            lse - row[label as usize]
        })
        .collect()
}

/// How much the batch consensus ignores each sample: cosine distance between
/// the sample's analytic label-row gradient and the batch-averaged gradient
/// for that row. Detached; callers must not route gradients through it.
///
/// The per-sample row gradient of softmax cross-entropy is
/// `(softmax(z_j)_c - [y_j = c]) * h_j` evaluated at `c = y_i`.
pub fn ignore_scores(
    features: &Array2<f64>,
    labels: &[ClassId],
    head: &Array2<f64>,
) -> Vec<f64> {
    let batch = features.nrows();
    assert_eq!(batch, labels.len());
    let logits = features.dot(head);
    let probs = crate::autodiff::softmax_rows(&logits);

    let mut scores = Vec::with_capacity(batch);
    for i in 0..batch {
        let class = labels[i] as usize;
        // Sample i's own gradient for row y_i.
        let own_coef = probs[[i, class]] - 1.0;
        let own: Array1<f64> = features.row(i).mapv(|v| v * own_coef);
        // Batch-averaged gradient for the same row.
        let mut mean = Array1::<f64>::zeros(features.ncols());
        for j in 0..batch {
            let coef = probs[[j, class]] - if labels[j] as usize == class { 1.0 } else { 0.0 };
            mean.scaled_add(coef, &features.row(j));
        }
        mean /= batch as f64;
        let own_norm = own.dot(&own).sqrt();
        let mean_norm = mean.dot(&mean).sqrt();
        if own_norm == 0.0 || mean_norm == 0.0 {
            log::debug!("degenerate gradient pair for sample {i}; ignore score set to 1");
        }
        scores.push(cosine_distance(own.view(), mean.view()));
    }
    scores
}

/// Focal weighting from precomputed cross-entropy values:
/// `mean(score^gamma * ce)`. `0^0` is 1, so `gamma = 0` is exactly mean CE.
pub fn gsf_from_ce(ce_values: &[f64], scores: &[f64], gamma: f64) -> f64 {
    assert_eq!(ce_values.len(), scores.len());
    let total: f64 = ce_values
        .iter()
        .zip(scores)
        .map(|(&ce, &s)| s.powf(gamma) * ce)
        .sum();
    total / ce_values.len() as f64
}

/// Gradient-similarity focal loss over masked logits.
pub fn gsf_loss(
    masked_logits: &Array2<f64>,
    labels: &[ClassId],
    scores: &[f64],
    gamma: f64,
) -> f64 {
    let ce = softmax_ce_rows(masked_logits, labels);
    gsf_from_ce(&ce, scores, gamma)
}

/// Marginal-benefit score per sample: cosine distance between the feature and
/// its label's head column, plus the margin. Detached. Range `[m, 2 + m]`.
pub fn marginal_benefit_scores(
    features: &Array2<f64>,
    labels: &[ClassId],
    head: &Array2<f64>,
    margin: f64,
) -> Vec<f64> {
    assert!(margin > 0.0, "margin must be positive");
    features
        .rows()
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (row, &label))| {
            let weight_row = head.column(label as usize);
            let fr_norm = row.dot(&row).sqrt();
            let w_norm = weight_row.dot(&weight_row).sqrt();
            if fr_norm == 0.0 || w_norm == 0.0 {
                log::debug!("zero-norm feature/weight pair for sample {i}; distance set to 1");
            }
            cosine_distance(row, weight_row) + margin
        })
        .collect()
}

/// Shrinks or expands each feature by its detached score: `h_i / score_i`.
pub fn afs_scale(features: &Array2<f64>, scores: &[f64]) -> Array2<f64> {
    assert_eq!(features.nrows(), scores.len());
    assert!(scores.iter().all(|&s| s > 0.0), "scores must be positive");
    let mut out = features.clone();
    for (mut row, &s) in out.rows_mut().into_iter().zip(scores) {
        row /= s;
    }
    out
}

/// Per-batch loss components. `total = (1 - alpha) * ce + alpha * gsf + cvpt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub gsf: f64,
    pub cvpt: f64,
    pub total: f64,
    pub per_sample_ignore_scores: Vec<f64>,
    pub per_sample_mb_scores: Vec<f64>,
}

/// Combines precomputed components into the training objective.
pub fn total_loss(
    ce_values: &[f64],
    ignore: &[f64],
    mb: &[f64],
    cvpt: f64,
    alpha: f64,
    gamma: f64,
) -> LossBreakdown {
    assert!((0.0..=1.0).contains(&alpha), "alpha must lie in [0, 1]");
    let ce = ce_values.iter().sum::<f64>() / ce_values.len() as f64;
    let gsf = gsf_from_ce(ce_values, ignore, gamma);
    LossBreakdown {
        ce,
        gsf,
        cvpt,
        total: (1.0 - alpha) * ce + alpha * gsf + cvpt,
        per_sample_ignore_scores: ignore.to_vec(),
        per_sample_mb_scores: mb.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy_pool(keys: Array2<f64>, counts: Vec<u64>) -> PromptPool {
        let p = keys.nrows();
        let d = keys.ncols();
        PromptPool {
            config: PoolConfig {
                pool_size: p,
                top_k: 1,
                num_prompt_layers: 1,
                prompt_len: 1,
                embed_dim: d,
                num_classes: 4,
            },
            keys,
            prompts: Array4::zeros((p, 1, 1, d)),
            masks: Array2::ones((p, 4)),
            counts,
        }
    }

    fn random_pool(rng: &mut ChaCha12Rng, p: usize, d: usize) -> PromptPool {
        let keys = Array2::from_shape_fn((p, d), |_| rng.random_range(-1.0..1.0));
        let counts = (0..p).map(|_| rng.random_range(0..5)).collect();
        toy_pool(keys, counts)
    }

    #[test]
    fn cosine_distance_basics() {
        let a = array![1.0, 0.0];
        assert_abs_diff_eq!(cosine_distance(a.view(), a.view()), 0.0, epsilon = 1e-12);
        let b = array![0.0, 1.0];
        assert_abs_diff_eq!(cosine_distance(a.view(), b.view()), 1.0, epsilon = 1e-12);
        let c = array![-2.0, 0.0];
        assert_abs_diff_eq!(cosine_distance(a.view(), c.view()), 2.0, epsilon = 1e-12);
        let zero = array![0.0, 0.0];
        assert_abs_diff_eq!(cosine_distance(a.view(), zero.view()), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn select_prefers_exact_match() {
        // Key 3 equals the query, the others are orthogonal to it.
        let keys = array![
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0],
        ];
        let pool = toy_pool(keys, vec![0; 4]);
        let q = array![1.0, 0.0, 0.0];
        let sel = pool.select(q.view());
        assert_eq!(sel.primary(), 3);
        assert_abs_diff_eq!(sel.distances[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn select_breaks_ties_by_lowest_index() {
        let keys = array![
            [0.0, 1.0],
            [1.0, 0.0],
            [0.0, -1.0],
            [0.0, 1.0],
            [1.0, 0.0],
        ];
        let pool = toy_pool(keys, vec![0; 5]);
        // Equidistant from keys 1 and 4 (identical keys).
        let q = array![1.0, 0.0];
        let sel = pool.select(q.view());
        assert_eq!(sel.primary(), 1);
    }

    #[test]
    fn select_matches_brute_force_scan() {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let pool = random_pool(&mut rng, 10, 16);
        for _ in 0..100 {
            let q = Array1::from_shape_fn(16, |_| rng.random_range(-1.0..1.0));
            let sel = pool.select(q.view());
            let brute = (0..10)
                .map(|i| (i, cosine_distance(pool.keys.row(i), q.view())))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert_eq!(sel.primary(), brute.0);
        }
    }

    #[test]
    fn train_selection_increments_counts_eval_does_not() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let mut pool = random_pool(&mut rng, 4, 8);
        pool.counts = vec![0; 4];
        let q = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let sel = pool.select(q.view());
        assert_eq!(pool.total_selections(), 0);
        let sel2 = pool.select_train(q.view());
        assert_eq!(sel.indices, sel2.indices);
        assert_eq!(pool.total_selections(), 1);
        assert_eq!(pool.counts[sel.primary()], 1);
    }

    #[test]
    fn cvpt_hand_case_is_ln_two() {
        // One key, count zero, single query equal to the key:
        // positive = e^0 = 1, negative = e^0 = 1, loss = -ln(1/2).
        let keys = array![[0.6, -0.2, 0.3]];
        let pool = toy_pool(keys.clone(), vec![0]);
        let loss = cvpt_loss(&pool, keys.view());
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn cvpt_saturated_counts_reach_closed_form_limit() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let p = 5;
        let b = 7;
        let mut pool = random_pool(&mut rng, p, 12);
        pool.counts = vec![1_000_000_000; p];
        let queries = Array2::from_shape_fn((b, 12), |_| rng.random_range(-1.0..1.0));
        let loss = cvpt_loss(&pool, queries.view());
        let expected = -((p * p) as f64 / ((p * b) as f64 + (p * p) as f64)).ln();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-6);
    }

    #[test]
    fn cvpt_is_invariant_to_query_permutation() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let pool = random_pool(&mut rng, 6, 10);
        let queries = Array2::from_shape_fn((5, 10), |_| rng.random_range(-1.0..1.0));
        let mut permuted = queries.clone();
        permuted.swap_axes(0, 0);
        let reordered: Vec<usize> = vec![3, 1, 4, 0, 2];
        let permuted = Array2::from_shape_fn((5, 10), |(i, j)| queries[[reordered[i], j]]);
        assert_abs_diff_eq!(
            cvpt_loss(&pool, queries.view()),
            cvpt_loss(&pool, permuted.view()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn cvpt_key_grads_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        let mut pool = random_pool(&mut rng, 4, 6);
        pool.counts = vec![0, 3, 1, 7];
        let queries = Array2::from_shape_fn((3, 6), |_| rng.random_range(-1.0..1.0));
        let (_, grads) = cvpt_loss_and_key_grads(&pool, queries.view(), true);
        let grads = grads.unwrap();

        let step = 1e-6;
        for r in 0..4 {
            for c in 0..6 {
                let orig = pool.keys[[r, c]];
                pool.keys[[r, c]] = orig + step;
                let plus = cvpt_loss(&pool, queries.view());
                pool.keys[[r, c]] = orig - step;
                let minus = cvpt_loss(&pool, queries.view());
                pool.keys[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let analytic = grads[[r, c]];
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-4, "key grad [{r},{c}]: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn mask_identity_and_projection() {
        let logits = array![[1.0, -2.0, 3.0], [0.5, 0.1, -0.4]];
        let ones = Array1::ones(3);
        assert_eq!(apply_mask(&logits, ones.view()), logits);

        let onehot = array![0.0, 0.0, 1.0];
        let masked = apply_mask(&logits, onehot.view());
        assert_eq!(masked, array![[0.0, 0.0, 3.0], [0.0, 0.0, -0.4]]);
    }

    #[test]
    fn positive_uniform_mask_preserves_argmax() {
        let mut rng = ChaCha12Rng::seed_from_u64(45);
        for _ in 0..50 {
            let logits = Array2::from_shape_fn((4, 6), |_| rng.random_range(-3.0..3.0));
            let c = rng.random_range(0.01..10.0);
            let mask = Array1::from_elem(6, c);
            let masked = apply_mask(&logits, mask.view());
            for (a, b) in logits.rows().into_iter().zip(masked.rows()) {
                let argmax = |r: ArrayView1<f64>| {
                    r.iter()
                        .enumerate()
                        .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                        .unwrap()
                        .0
                };
                assert_eq!(argmax(a), argmax(b));
            }
        }
    }

    #[test]
    fn identical_samples_have_zero_ignore_score() {
        let features = array![[0.3, -1.0, 0.4], [0.3, -1.0, 0.4]];
        let labels = [1, 1];
        let head = Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64 * 0.1);
        let scores = ignore_scores(&features, &labels, &head);
        assert_abs_diff_eq!(scores[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scores[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn opposite_gradients_hit_the_zero_mean_convention() {
        // With a zero head the softmax is uniform, so each sample's row
        // gradient is proportional to its feature; opposite features with a
        // shared label give a zero batch mean.
        let features = array![[1.0, 2.0, -0.5], [-1.0, -2.0, 0.5]];
        let labels = [2, 2];
        let head = Array2::zeros((3, 4));
        let scores = ignore_scores(&features, &labels, &head);
        assert_abs_diff_eq!(scores[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scores[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ignore_scores_are_permutation_equivariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(46);
        let features = Array2::from_shape_fn((6, 8), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<ClassId> = (0..6).map(|_| rng.random_range(0..5)).collect();
        let head = Array2::from_shape_fn((8, 5), |_| rng.random_range(-1.0..1.0));
        let scores = ignore_scores(&features, &labels, &head);

        let perm = [4usize, 0, 5, 2, 1, 3];
        let pf = Array2::from_shape_fn((6, 8), |(i, j)| features[[perm[i], j]]);
        let pl: Vec<ClassId> = perm.iter().map(|&i| labels[i]).collect();
        let pscores = ignore_scores(&pf, &pl, &head);
        for (i, &src) in perm.iter().enumerate() {
            assert_abs_diff_eq!(pscores[i], scores[src], epsilon = 1e-12);
        }
    }

    #[test]
    fn gsf_reduces_to_mean_ce_at_gamma_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let logits = Array2::from_shape_fn((5, 7), |_| rng.random_range(-2.0..2.0));
        let labels: Vec<ClassId> = (0..5).map(|_| rng.random_range(0..7)).collect();
        let scores: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0)).collect();
        let ce = softmax_ce_rows(&logits, &labels);
        let mean_ce = ce.iter().sum::<f64>() / 5.0;
        assert_abs_diff_eq!(gsf_loss(&logits, &labels, &scores, 0.0), mean_ce, epsilon = 1e-9);

        // All-ones scores reduce to mean CE for any gamma.
        let ones = vec![1.0; 5];
        assert_abs_diff_eq!(gsf_loss(&logits, &labels, &ones, 2.7), mean_ce, epsilon = 1e-9);
    }

    #[test]
    fn gsf_hand_case() {
        // gamma 2, scores [0, 1], ce [5, 2] -> (0 + 2) / 2 = 1.
        assert_abs_diff_eq!(gsf_from_ce(&[5.0, 2.0], &[0.0, 1.0], 2.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gsf_is_monotone_in_scores() {
        let ce = [0.8, 1.5, 0.2];
        let base = [0.4, 0.9, 1.3];
        let gamma = 2.0;
        let l0 = gsf_from_ce(&ce, &base, gamma);
        for i in 0..3 {
            let mut bumped = base;
            bumped[i] += 0.2;
            assert!(gsf_from_ce(&ce, &bumped, gamma) >= l0);
        }
    }

    #[test]
    fn marginal_benefit_hits_the_three_reference_angles() {
        let features = array![[2.0, 0.0], [0.0, 3.0], [-1.0, 0.0]];
        let labels = [0, 0, 0];
        // Class 0's weight column is e_0.
        let head = array![[1.0, 0.0], [0.0, 1.0]];
        let scores = marginal_benefit_scores(&features, &labels, &head, 0.5);
        assert_abs_diff_eq!(scores[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(scores[1], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(scores[2], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn afs_scales_norms_exactly() {
        let features = array![[3.0, 4.0], [3.0, 4.0], [3.0, 4.0]];
        let scaled = afs_scale(&features, &[1.0, 0.5, 2.5]);
        let norm = |r: ArrayView1<f64>| r.dot(&r).sqrt();
        assert_abs_diff_eq!(norm(scaled.row(0)), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(norm(scaled.row(1)), 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(norm(scaled.row(2)), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        // Injected parts: ce mean 2, gsf 4 via scores, cvpt 0.7.
        let ce = [2.0, 2.0];
        let ignore = [2.0f64.sqrt(), 2.0f64.sqrt()]; // score^2 * 2 = 4
        let mb = [0.5, 0.5];
        let breakdown = total_loss(&ce, &ignore, &mb, 0.7, 0.5, 2.0);
        assert_abs_diff_eq!(breakdown.ce, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(breakdown.gsf, 4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(breakdown.total, 3.7, epsilon = 1e-9);

        let at_zero = total_loss(&ce, &ignore, &mb, 0.7, 0.0, 2.0);
        assert_abs_diff_eq!(at_zero.total, at_zero.ce + at_zero.cvpt, epsilon = 1e-12);
        let at_one = total_loss(&ce, &ignore, &mb, 0.7, 1.0, 2.0);
        assert_abs_diff_eq!(at_one.total, at_one.gsf + at_one.cvpt, epsilon = 1e-12);
    }
}
