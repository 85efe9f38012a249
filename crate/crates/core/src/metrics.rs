//! Ranking accuracy (Recall@K, NDCG@K) and the four taste-cluster
//! explainability metrics with their additive Overall aggregate.
//!
//! Silhouette scores every clustering in one shared reference embedding
//! space so the numbers compare clusterings rather than encoders.
//! Informativeness queries a post-hoc tag discriminator: a small MLP
//! trained to recover an item's identity from a masked copy of its own
//! tags.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{InteractionDataset, ItemTagMatrix, Split};
use crate::error::{EcfError, Result};
use crate::model::TasteClusterSet;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

// ---- ranking ----

/// Indices of the k best scores, best first; ties prefer the lower index.
/// k is clamped to the number of scores.
pub fn rank_top_k(scores: &[f64], k: usize) -> Vec<u32> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let by_score = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_score);
        order.truncate(k);
    }
    order.sort_unstable_by(by_score);
    order
}

/// Fraction of the ground truth found among the first k ranked items.
/// `truth` must be sorted ascending; empty truth scores 0.
pub fn recall_at_k(ranking: &[u32], truth: &[u32], k: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = ranking[..k.min(ranking.len())]
        .iter()
        .filter(|i| truth.binary_search(i).is_ok())
        .count();
    hits as f64 / truth.len() as f64
}

/// Binary-gain NDCG over the first k ranked items, normalized by the
/// ideal DCG of min(k, |truth|) hits. `truth` must be sorted ascending;
/// empty truth scores 0.
pub fn ndcg_at_k(ranking: &[u32], truth: &[u32], k: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (rank, item) in ranking[..k.min(ranking.len())].iter().enumerate() {
        if truth.binary_search(item).is_ok() {
            dcg += 1.0 / (rank as f64 + 2.0).log2();
        }
    }
    let idcg: f64 = (0..k.min(truth.len()))
        .map(|r| 1.0 / (r as f64 + 2.0).log2())
        .sum();
    dcg / idcg
}

/// Mean ranking metrics over every user with ground truth in one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingEval {
    pub recall: f64,
    pub ndcg: f64,
    /// Users that contributed to the averages.
    pub users: usize,
}

/// Scores each user's candidates through `score_items` (one score per
/// item) and averages Recall@k and NDCG@k over users with ground truth
/// in `split`. Known interactions outside the evaluated split are removed
/// from the candidates: train items when evaluating validation, train and
/// validation items when evaluating test, nothing when evaluating train.
pub fn evaluate_ranking<F>(
    score_items: F,
    ds: &InteractionDataset,
    split: Split,
    k: usize,
) -> RankingEval
where
    F: Fn(u32) -> Vec<f64>,
{
    let mut recall_sum = 0.0;
    let mut ndcg_sum = 0.0;
    let mut users = 0usize;
    for u in 0..ds.num_users() as u32 {
        let truth = match split {
            Split::Train => ds.user_train_items(u),
            Split::Val => ds.user_val_items(u),
            Split::Test => ds.user_test_items(u),
        };
        if truth.is_empty() {
            continue;
        }
        let mut scores = score_items(u);
        assert_eq!(scores.len(), ds.num_items(), "scorer length mismatch");
        let excluded: &[&[u32]] = match split {
            Split::Train => &[],
            Split::Val => &[ds.user_train_items(u)],
            Split::Test => &[ds.user_train_items(u), ds.user_val_items(u)],
        };
        for list in excluded {
            for &i in *list {
                scores[i as usize] = f64::NEG_INFINITY;
            }
        }
        let ranking = rank_top_k(&scores, k);
        recall_sum += recall_at_k(&ranking, truth, k);
        ndcg_sum += ndcg_at_k(&ranking, truth, k);
        users += 1;
    }
    if users == 0 {
        warn!("ranking evaluation found no users with ground truth");
        return RankingEval {
            recall: 0.0,
            ndcg: 0.0,
            users: 0,
        };
    }
    RankingEval {
        recall: recall_sum / users as f64,
        ndcg: ndcg_sum / users as f64,
        users,
    }
}

// ---- explainability report ----

/// Per-cluster rows backing the aggregate explainability metrics.
#[derive(Clone, Debug)]
pub struct ClusterDetail {
    pub cluster_id: u32,
    pub size: usize,
    /// Fraction of members sharing a tag with the cluster tags; None for
    /// empty clusters.
    pub coverage: Option<f64>,
    /// Fraction of members the discriminator recovers; None for empty
    /// clusters.
    pub informativeness: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ExplainabilityReport {
    pub coverage: f64,
    pub utilization: f64,
    pub silhouette: f64,
    pub informativeness: f64,
    pub per_cluster: Vec<ClusterDetail>,
}

impl ExplainabilityReport {
    /// Summed gain of the four metrics over a random-clustering baseline;
    /// the baseline scored against itself gives 0.
    pub fn overall(&self, random_baseline: &ExplainabilityReport) -> f64 {
        (self.coverage - random_baseline.coverage)
            + (self.utilization - random_baseline.utilization)
            + (self.silhouette - random_baseline.silhouette)
            + (self.informativeness - random_baseline.informativeness)
    }
}

fn mean_defined(fractions: &[Option<f64>], metric: &'static str) -> f64 {
    let defined: Vec<f64> = fractions.iter().flatten().copied().collect();
    let skipped = fractions.len() - defined.len();
    if skipped > 0 {
        warn!("{} skipped {} empty clusters", metric, skipped);
    }
    if defined.is_empty() {
        return 0.0;
    }
    defined.iter().sum::<f64>() / defined.len() as f64
}

fn coverage_fractions(clusters: &TasteClusterSet, tags: &ItemTagMatrix) -> Vec<Option<f64>> {
    clusters
        .clusters
        .iter()
        .map(|c| {
            if c.members.is_empty() {
                return None;
            }
            let covered = c
                .members
                .iter()
                .filter(|&&i| c.tags.iter().any(|&(t, _)| tags.item_has_tag(i, t)))
                .count();
            Some(covered as f64 / c.members.len() as f64)
        })
        .collect()
}

/// Mean fraction of cluster members that share at least one tag with
/// their cluster's descriptive tags. Empty clusters are skipped.
pub fn coverage(clusters: &TasteClusterSet, tags: &ItemTagMatrix) -> f64 {
    mean_defined(&coverage_fractions(clusters, tags), "coverage")
}

/// Fraction of the tag vocabulary appearing in at least one cluster's
/// descriptive tags.
pub fn utilization(clusters: &TasteClusterSet) -> f64 {
    if clusters.num_tags == 0 {
        return 0.0;
    }
    let mut used = vec![false; clusters.num_tags];
    for c in &clusters.clusters {
        for &(t, _) in &c.tags {
            used[t as usize] = true;
        }
    }
    used.iter().filter(|&&u| u).count() as f64 / clusters.num_tags as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sorted_intersection(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Silhouette of the clustering in a shared reference embedding space:
/// the mean over ordered cluster pairs of (a - b) / max(a, b), where a is
/// the mean within-cluster cosine of the first cluster and b the mean
/// cosine between the two clusters' non-shared items, so that tight,
/// well-separated clusters score positive. Diagonal pairs contribute 0,
/// singletons use a = 1, and pairs whose b is undefined or whose
/// max(a, b) is 0 are skipped with a warning. The divisor stays |C|^2.
/// Member lists must be sorted ascending.
pub fn silhouette(clusters: &TasteClusterSet, embeddings: &Tensor) -> f64 {
    let z = clusters.clusters.len();
    if z == 0 {
        return 0.0;
    }
    let dim = embeddings.cols();
    let mut unit = Tensor::zeros(embeddings.rows(), dim);
    for r in 0..embeddings.rows() {
        let row = embeddings.row(r);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
        for (o, &x) in unit.row_mut(r).iter_mut().zip(row) {
            *o = x / norm;
        }
    }
    let mut sums: Vec<Vec<f64>> = Vec::with_capacity(z);
    let mut intra: Vec<Option<f64>> = Vec::with_capacity(z);
    for c in &clusters.clusters {
        let mut s = vec![0.0; dim];
        let mut sq = 0.0;
        for &i in &c.members {
            let row = unit.row(i as usize);
            for (acc, &x) in s.iter_mut().zip(row) {
                *acc += x;
            }
            sq += dot(row, row);
        }
        let n = c.members.len();
        intra.push(match n {
            0 => None,
            1 => Some(1.0),
            _ => Some((dot(&s, &s) - sq) / (n * (n - 1)) as f64),
        });
        sums.push(s);
    }
    let mut acc = 0.0;
    let mut skipped = 0usize;
    for c1 in 0..z {
        for c2 in 0..z {
            if c1 == c2 {
                continue;
            }
            let Some(a) = intra[c1] else {
                skipped += 1;
                continue;
            };
            let m1 = &clusters.clusters[c1].members;
            let m2 = &clusters.clusters[c2].members;
            if m2.is_empty() {
                skipped += 1;
                continue;
            }
            let shared = sorted_intersection(m1, m2);
            let n_a = m1.len() - shared.len();
            let n_b = m2.len() - shared.len();
            if n_a == 0 || n_b == 0 {
                skipped += 1;
                continue;
            }
            let mut sum_a = sums[c1].clone();
            let mut sum_b = sums[c2].clone();
            for &i in &shared {
                for (d, &x) in unit.row(i as usize).iter().enumerate() {
                    sum_a[d] -= x;
                    sum_b[d] -= x;
                }
            }
            let b = dot(&sum_a, &sum_b) / (n_a as f64 * n_b as f64);
            let den = a.max(b);
            if den == 0.0 {
                skipped += 1;
                continue;
            }
            acc += (a - b) / den;
        }
    }
    if skipped > 0 {
        warn!("silhouette skipped {} undefined cluster pairs", skipped);
    }
    acc / (z * z) as f64
}

// ---- tag discriminator ----

const DISC_HIDDEN: usize = 64;
const DISC_MASK_PROB: f64 = 0.5;
const DISC_MONITOR_FRAC: f64 = 0.1;
const DISC_PATIENCE: usize = 10;
const DISC_EPOCHS_MAX: usize = 300;
const DISC_BATCH: usize = 256;
const DISC_LEARNING_RATE: f64 = 1e-2;
const DISC_INIT_STD: f64 = 0.01;

/// Post-hoc probe that predicts an item's identity from its tags: an MLP
/// (tags -> 64 -> 64 -> items) with ReLU hidden layers and a softmax
/// output, trained with cross-entropy while each input tag is dropped
/// with probability one half. Every item is a training example; a fixed
/// tenth of them is monitored with unmasked inputs to detect the plateau
/// (patience 10, best snapshot kept). Items are never excluded from
/// training: the probe is meant to memorize the tag-to-item mapping, and
/// a softmax class that never appears as a target could not be recovered
/// at evaluation time.
#[derive(Clone, Debug)]
pub struct TagDiscriminator {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

impl TagDiscriminator {
    /// Wires explicit weights: w1 (|T| x h), w2 (h x h), w3 (h x N) with
    /// 1-row biases matching each output width.
    pub fn from_parts(
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
        w3: Tensor,
        b3: Tensor,
    ) -> Result<Self> {
        let ok = w1.cols() == w2.rows()
            && w2.cols() == w3.rows()
            && b1.shape() == (1, w1.cols())
            && b2.shape() == (1, w2.cols())
            && b3.shape() == (1, w3.cols());
        if !ok {
            return Err(EcfError::Config(
                "discriminator layer shapes do not chain".into(),
            ));
        }
        Ok(TagDiscriminator {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        })
    }

    fn init<R: Rng>(num_tags: usize, num_items: usize, rng: &mut R) -> Self {
        TagDiscriminator {
            w1: Tensor::randn(num_tags, DISC_HIDDEN, DISC_INIT_STD, rng),
            b1: Tensor::zeros(1, DISC_HIDDEN),
            w2: Tensor::randn(DISC_HIDDEN, DISC_HIDDEN, DISC_INIT_STD, rng),
            b2: Tensor::zeros(1, DISC_HIDDEN),
            w3: Tensor::randn(DISC_HIDDEN, num_items, DISC_INIT_STD, rng),
            b3: Tensor::zeros(1, num_items),
        }
    }

    pub fn num_tags(&self) -> usize {
        self.w1.rows()
    }

    pub fn num_items(&self) -> usize {
        self.w3.cols()
    }

    /// Log-probabilities over items, one row per input tag row.
    pub fn log_probs(&self, inputs: &Tensor) -> Tensor {
        let h1 = relu_all(affine(inputs, &self.w1, &self.b1));
        let h2 = relu_all(affine(&h1, &self.w2, &self.b2));
        log_softmax_rows(&affine(&h2, &self.w3, &self.b3))
    }

    /// Log-probability row for a single multi-hot tag set.
    pub fn log_probs_for_tags(&self, tags: &[u32]) -> Vec<f64> {
        let mut input = Tensor::zeros(1, self.num_tags());
        for &t in tags {
            input.set(0, t as usize, 1.0);
        }
        self.log_probs(&input).row(0).to_vec()
    }

    fn params(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3,
        ]
        .iter()
        .map(|t| t.shape())
        .collect()
    }
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(x.cols(), w.rows());
    let mut out = Tensor::zeros(x.rows(), w.cols());
    for r in 0..x.rows() {
        let or = out.row_mut(r);
        or.copy_from_slice(b.row(0));
        for (i, &xv) in x.row(r).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in or.iter_mut().zip(w.row(i)) {
                *o += xv * wv;
            }
        }
    }
    out
}

fn relu_all(mut x: Tensor) -> Tensor {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = v - mx - lse;
        }
    }
    out
}

/// Mean cross-entropy graph for one batch: leaves must hold the six
/// parameters in declaration order.
fn disc_loss_graph(
    tape: &mut Tape,
    leaves: &[Var],
    input: Var,
    onehot: Var,
    batch: usize,
) -> Result<Var> {
    assert_eq!(leaves.len(), 6);
    let a1 = tape.matmul(input, leaves[0])?;
    let z1 = tape.add(a1, leaves[1])?;
    let h1 = tape.relu(z1)?;
    let a2 = tape.matmul(h1, leaves[2])?;
    let z2 = tape.add(a2, leaves[3])?;
    let h2 = tape.relu(z2)?;
    let a3 = tape.matmul(h2, leaves[4])?;
    let logits = tape.add(a3, leaves[5])?;
    let logp = tape.row_log_softmax(logits)?;
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    tape.mul_scalar(total, -1.0 / batch as f64)
}

/// Trains the probe on the full tag matrix. Deterministic for a given
/// seed.
pub fn train_discriminator(tags: &ItemTagMatrix, seed: u64) -> Result<TagDiscriminator> {
    let n = tags.num_items();
    let t = tags.num_tags();
    if n == 0 || t == 0 {
        return Err(EcfError::Config(
            "tag discriminator needs at least one item and one tag".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disc = TagDiscriminator::init(t, n, &mut rng);
    let monitor_count = ((n as f64 * DISC_MONITOR_FRAC).round() as usize).clamp(1, n);
    let mut monitor = rand::seq::index::sample(&mut rng, n, monitor_count).into_vec();
    monitor.sort_unstable();
    let mut monitor_input = Tensor::zeros(monitor.len(), t);
    for (r, &item) in monitor.iter().enumerate() {
        for &tag in tags.item_tags(item as u32) {
            monitor_input.set(r, tag as usize, 1.0);
        }
    }
    let mut adam = Adam::new(
        AdamConfig::with_learning_rate(DISC_LEARNING_RATE),
        &disc.shapes(),
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = disc.clone();
    let mut best_loss = f64::INFINITY;
    let mut stale = 0usize;
    for _ in 0..DISC_EPOCHS_MAX {
        order.shuffle(&mut rng);
        for chunk in order.chunks(DISC_BATCH) {
            let mut input = Tensor::zeros(chunk.len(), t);
            let mut onehot = Tensor::zeros(chunk.len(), n);
            for (r, &item) in chunk.iter().enumerate() {
                onehot.set(r, item, 1.0);
                for &tag in tags.item_tags(item as u32) {
                    if rng.random::<f64>() >= DISC_MASK_PROB {
                        input.set(r, tag as usize, 1.0);
                    }
                }
            }
            let mut tape = Tape::new();
            let leaves: Vec<Var> = [
                &disc.w1, &disc.b1, &disc.w2, &disc.b2, &disc.w3, &disc.b3,
            ]
            .iter()
            .map(|p| tape.leaf((*p).clone()))
            .collect::<Result<_>>()?;
            let x = tape.constant(input)?;
            let y = tape.constant(onehot)?;
            let loss = disc_loss_graph(&mut tape, &leaves, x, y, chunk.len())?;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = leaves
                .iter()
                .map(|&l| {
                    let (r, c) = tape.value(l).shape();
                    tape.grad(l).cloned().unwrap_or_else(|| Tensor::zeros(r, c))
                })
                .collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut disc.params(), &grad_refs)?;
        }
        let logp = disc.log_probs(&monitor_input);
        let mut monitor_loss = 0.0;
        for (r, &item) in monitor.iter().enumerate() {
            monitor_loss -= logp.get(r, item);
        }
        monitor_loss /= monitor.len() as f64;
        if !monitor_loss.is_finite() {
            return Err(EcfError::NonFinite {
                op: "discriminator_monitor_loss",
            });
        }
        if monitor_loss < best_loss {
            best_loss = monitor_loss;
            best = disc.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= DISC_PATIENCE {
                break;
            }
        }
    }
    Ok(best)
}

fn informativeness_fractions(
    clusters: &TasteClusterSet,
    disc: &TagDiscriminator,
) -> Vec<Option<f64>> {
    clusters
        .clusters
        .iter()
        .map(|c| {
            if c.members.is_empty() {
                return None;
            }
            let tag_ids: Vec<u32> = c.tags.iter().map(|&(t, _)| t).collect();
            let logp = disc.log_probs_for_tags(&tag_ids);
            let predicted = rank_top_k(&logp, c.members.len());
            let hits = predicted
                .iter()
                .filter(|i| c.members.binary_search(i).is_ok())
                .count();
            Some(hits as f64 / c.members.len() as f64)
        })
        .collect()
}

/// Mean fraction of cluster members the discriminator recovers when shown
/// only the cluster's tags (its top-|c| predictions intersected with the
/// member list). Empty clusters are skipped. Member lists must be sorted
/// ascending.
pub fn informativeness(clusters: &TasteClusterSet, disc: &TagDiscriminator) -> f64 {
    mean_defined(&informativeness_fractions(clusters, disc), "informativeness")
}

/// Builds the full report for one clustering: the four metrics plus
/// per-cluster rows.
pub fn explainability_report(
    clusters: &TasteClusterSet,
    tags: &ItemTagMatrix,
    reference_embeddings: &Tensor,
    disc: &TagDiscriminator,
) -> ExplainabilityReport {
    let cov = coverage_fractions(clusters, tags);
    let info = informativeness_fractions(clusters, disc);
    let per_cluster = clusters
        .clusters
        .iter()
        .enumerate()
        .map(|(idx, c)| ClusterDetail {
            cluster_id: c.id,
            size: c.members.len(),
            coverage: cov[idx],
            informativeness: info[idx],
        })
        .collect();
    ExplainabilityReport {
        coverage: mean_defined(&cov, "coverage"),
        utilization: utilization(clusters),
        silhouette: silhouette(clusters, reference_embeddings),
        informativeness: mean_defined(&info, "informativeness"),
        per_cluster,
    }
}

/// Plain-text table of explainability rows with 4-decimal columns; every
/// row's Overall is measured against `random_baseline`.
pub fn render_report_table(
    rows: &[(&str, &ExplainabilityReport)],
    random_baseline: &ExplainabilityReport,
) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12}{:>9}{:>9}{:>9}{:>9}{:>9}\n",
        "Method", "Cov.", "Util.", "Sil.", "Info.", "Overall"
    ));
    for (name, report) in rows {
        out.push_str(&format!(
            "{:<12}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9.4}\n",
            name,
            report.coverage,
            report.utilization,
            report.silhouette,
            report.informativeness,
            report.overall(random_baseline)
        ));
    }
    out
}
