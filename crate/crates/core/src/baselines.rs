//! Reference cluster builders used to calibrate the explainability
//! metrics: exact-tag-set growth around seed items, k-means over item
//! embeddings, and uniform random draws. All three emit the same
//! `TasteClusterSet` shape the trained model produces, so the metrics
//! module scores them unchanged.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{InteractionDataset, ItemTagMatrix};
use crate::error::{EcfError, Result};
use crate::model::{TasteCluster, TasteClusterSet};
use crate::tensor::Tensor;

const MAX_LLOYD_ITERS: usize = 100;
const CENTROID_SHIFT_TOLERANCE: f64 = 1e-6;

/// Shared knobs for the baseline builders.
#[derive(Clone, Debug)]
pub struct ClusterBuildConfig {
    pub num_clusters: usize,
    /// Minimum members a tag cluster keeps relaxing toward.
    pub size_threshold: usize,
    pub seed: u64,
    /// How many of the most frequent member tags label a cluster.
    pub tags_per_cluster: usize,
}

impl Default for ClusterBuildConfig {
    fn default() -> Self {
        Self {
            num_clusters: 64,
            size_threshold: 10,
            seed: 0,
            tags_per_cluster: 4,
        }
    }
}

impl ClusterBuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 {
            return Err(EcfError::Config("num_clusters must be positive".into()));
        }
        if self.size_threshold == 0 {
            return Err(EcfError::Config("size_threshold must be positive".into()));
        }
        if self.tags_per_cluster == 0 {
            return Err(EcfError::Config("tags_per_cluster must be positive".into()));
        }
        Ok(())
    }
}

/// The `p` most frequent tags among `members`, scored by their member
/// count. Ties break toward the lower tag index so labels are stable.
pub fn frequent_member_tags(members: &[u32], tags: &ItemTagMatrix, p: usize) -> Vec<(u32, f64)> {
    let mut counts = vec![0u64; tags.num_tags()];
    for &item in members {
        for &t in tags.item_tags(item) {
            counts[t as usize] += 1;
        }
    }
    let mut ranked: Vec<(u32, u64)> = counts
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c > 0)
        .map(|(t, &c)| (t as u32, c))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(p);
    ranked.into_iter().map(|(t, c)| (t, c as f64)).collect()
}

/// Grows each cluster from a uniformly chosen seed item: first every
/// item whose tag set matches the seed's exactly, then, while the
/// cluster is below `size_threshold`, one surviving tag is dropped at
/// random and the exact matchers of the relaxed set are absorbed too.
/// A cluster whose set shrinks to one tag while still undersized is
/// emitted as-is with a warning.
pub fn tag_cluster(tags: &ItemTagMatrix, cfg: &ClusterBuildConfig) -> Result<TasteClusterSet> {
    cfg.validate()?;
    let n = tags.num_items();
    if cfg.num_clusters > n {
        return Err(EcfError::Config(format!(
            "cannot seed {} clusters from {} items",
            cfg.num_clusters, n
        )));
    }
    let mut by_set: HashMap<&[u32], Vec<u32>> = HashMap::new();
    for item in 0..n as u32 {
        by_set.entry(tags.item_tags(item)).or_default().push(item);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds = rand::seq::index::sample(&mut rng, n, cfg.num_clusters);
    let mut clusters = Vec::with_capacity(cfg.num_clusters);
    for (id, seed_item) in seeds.into_iter().enumerate() {
        let mut set: Vec<u32> = tags.item_tags(seed_item as u32).to_vec();
        let mut members: Vec<u32> = Vec::new();
        loop {
            if let Some(exact) = by_set.get(set.as_slice()) {
                members.extend_from_slice(exact);
            }
            if members.len() >= cfg.size_threshold || set.len() <= 1 {
                break;
            }
            set.remove(rng.random_range(0..set.len()));
        }
        if members.len() < cfg.size_threshold {
            log::warn!(
                "tag cluster {} stalled at {} members (threshold {})",
                id,
                members.len(),
                cfg.size_threshold
            );
        }
        // Exact-match groups of distinct tag sets are disjoint, so the
        // rounds never absorb an item twice.
        members.sort_unstable();
        let tag_labels = frequent_member_tags(&members, tags, cfg.tags_per_cluster);
        clusters.push(TasteCluster {
            id: id as u32,
            members,
            tags: tag_labels,
        });
    }
    Ok(TasteClusterSet {
        clusters,
        num_tags: tags.num_tags(),
    })
}

/// Partitions items by k-means over their embedding rows (Euclidean,
/// k-means++ seeding, Lloyd iterations until the largest centroid
/// shift falls under 1e-6 or 100 rounds pass).
pub fn kmeans_cluster(
    embeddings: &Tensor,
    tags: &ItemTagMatrix,
    cfg: &ClusterBuildConfig,
) -> Result<TasteClusterSet> {
    cfg.validate()?;
    if embeddings.rows() != tags.num_items() {
        return Err(EcfError::Config(format!(
            "embedding rows {} disagree with tagged items {}",
            embeddings.rows(),
            tags.num_items()
        )));
    }
    let (assignments, _, _) = lloyd(embeddings, cfg.num_clusters, cfg.seed)?;
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); cfg.num_clusters];
    for (item, &c) in assignments.iter().enumerate() {
        members[c].push(item as u32);
    }
    let clusters = members
        .into_iter()
        .enumerate()
        .map(|(id, members)| {
            let tag_labels = frequent_member_tags(&members, tags, cfg.tags_per_cluster);
            TasteCluster {
                id: id as u32,
                members,
                tags: tag_labels,
            }
        })
        .collect();
    Ok(TasteClusterSet {
        clusters,
        num_tags: tags.num_tags(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_init<R: Rng>(points: &Tensor, k: usize, rng: &mut R) -> Tensor {
    let n = points.rows();
    let mut centroids = Tensor::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut best_d2 = vec![f64::INFINITY; n];
    for c in 1..k {
        for i in 0..n {
            let d2 = sq_dist(points.row(i), centroids.row(c - 1));
            if d2 < best_d2[i] {
                best_d2[i] = d2;
            }
        }
        let total: f64 = best_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in best_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // Every remaining point coincides with a chosen centroid.
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
    }
    centroids
}

/// Plain Lloyd iterations. Returns per-point assignments, the final
/// centroids, and the SSE measured at each assignment step.
fn lloyd(points: &Tensor, k: usize, seed: u64) -> Result<(Vec<usize>, Tensor, Vec<f64>)> {
    let n = points.rows();
    let d = points.cols();
    if k == 0 || k > n {
        return Err(EcfError::Config(format!(
            "cannot place {} centroids over {} points",
            k, n
        )));
    }
    points.ensure_finite("kmeans")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut sse_trace = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sse = 0.0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d2 = f64::INFINITY;
            for c in 0..k {
                let d2 = sq_dist(points.row(i), centroids.row(c));
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = c;
                }
            }
            assignments[i] = best;
            sse += best_d2;
        }
        sse_trace.push(sse);
        let mut next = Tensor::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (acc, &x) in next.row_mut(assignments[i]).iter_mut().zip(points.row(i)) {
                *acc += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for v in next.row_mut(c).iter_mut() {
                    *v /= counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Re-seed an empty cluster from the farthest point whose
            // own cluster keeps another member. Pigeonhole guarantees
            // a donor: while an empty cluster exists, some cluster
            // holds at least two points.
            let mut pick = None;
            let mut pick_d2 = -1.0;
            for i in 0..n {
                if counts[assignments[i]] <= 1 {
                    continue;
                }
                let d2 = sq_dist(points.row(i), next.row(assignments[i]));
                if d2 > pick_d2 {
                    pick_d2 = d2;
                    pick = Some(i);
                }
            }
            let donor = pick.expect("donor point for empty cluster");
            counts[assignments[donor]] -= 1;
            next.row_mut(c).copy_from_slice(points.row(donor));
            assignments[donor] = c;
            counts[c] = 1;
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            shift = shift.max(sq_dist(centroids.row(c), next.row(c)).sqrt());
        }
        centroids = next;
        if shift < CENTROID_SHIFT_TOLERANCE {
            break;
        }
    }
    Ok((assignments, centroids, sse_trace))
}

/// Draws sorted `cluster_size`-item subsets uniformly at random until
/// at least `num_clusters` exist and every item appears somewhere.
pub fn random_cluster(
    tags: &ItemTagMatrix,
    cluster_size: usize,
    cfg: &ClusterBuildConfig,
) -> Result<TasteClusterSet> {
    cfg.validate()?;
    let n = tags.num_items();
    if cluster_size == 0 || cluster_size > n {
        return Err(EcfError::Config(format!(
            "cluster size {} outside 1..={}",
            cluster_size, n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut covered = vec![false; n];
    let mut uncovered = n;
    let mut clusters = Vec::new();
    while clusters.len() < cfg.num_clusters || uncovered > 0 {
        let mut members: Vec<u32> = rand::seq::index::sample(&mut rng, n, cluster_size)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        members.sort_unstable();
        for &m in &members {
            if !covered[m as usize] {
                covered[m as usize] = true;
                uncovered -= 1;
            }
        }
        let tag_labels = frequent_member_tags(&members, tags, cfg.tags_per_cluster);
        clusters.push(TasteCluster {
            id: clusters.len() as u32,
            members,
            tags: tag_labels,
        });
    }
    Ok(TasteClusterSet {
        clusters,
        num_tags: tags.num_tags(),
    })
}

/// Serializes clusters as one tab-separated record per line, with tag
/// names joined by `|` and member items listed by their original IDs,
/// so clusterings built elsewhere can be scored by the metrics module.
pub fn export_clusters(
    set: &TasteClusterSet,
    tags: &ItemTagMatrix,
    ds: &InteractionDataset,
) -> Result<String> {
    let item_ids = ds.item_ids();
    let mut out = String::new();
    for cluster in &set.clusters {
        let mut names = Vec::with_capacity(cluster.tags.len());
        for &(t, _) in &cluster.tags {
            if t as usize >= tags.num_tags() {
                return Err(EcfError::Data(format!(
                    "cluster {} labels unknown tag index {}",
                    cluster.id, t
                )));
            }
            names.push(tags.tag_name(t));
        }
        let mut ids = Vec::with_capacity(cluster.members.len());
        for &m in &cluster.members {
            let id = item_ids.get(m as usize).ok_or_else(|| {
                EcfError::Data(format!(
                    "cluster {} holds unknown item index {}",
                    cluster.id, m
                ))
            })?;
            ids.push(id.as_str());
        }
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            cluster.id,
            names.join("|"),
            ids.join(" ")
        ));
    }
    Ok(out)
}

/// Parses `export_clusters` output back into a cluster set. Tag scores
/// are rebuilt as member frequencies of the listed tags, in the listed
/// order, so a round trip through text is lossless for the baselines.
pub fn import_clusters(
    text: &str,
    tags: &ItemTagMatrix,
    ds: &InteractionDataset,
) -> Result<TasteClusterSet> {
    let tag_index: HashMap<&str, u32> = tags
        .tag_names()
        .iter()
        .enumerate()
        .map(|(t, name)| (name.as_str(), t as u32))
        .collect();
    let parse_err = |line: usize, msg: String| EcfError::Parse {
        path: "clusters".into(),
        line,
        msg,
    };
    let mut clusters = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                line,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let id: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(line, format!("bad cluster id {:?}", fields[0])))?;
        let mut tag_ids = Vec::new();
        if !fields[1].is_empty() {
            for name in fields[1].split('|') {
                let t = tag_index
                    .get(name)
                    .ok_or_else(|| parse_err(line, format!("unknown tag {:?}", name)))?;
                tag_ids.push(*t);
            }
        }
        let mut members = Vec::new();
        for token in fields[2].split_whitespace() {
            let item = ds
                .item_dense_index(token)
                .ok_or_else(|| parse_err(line, format!("unknown item {:?}", token)))?;
            members.push(item);
        }
        members.sort_unstable();
        members.dedup();
        let scored = tag_ids
            .into_iter()
            .map(|t| {
                let count = members
                    .iter()
                    .filter(|&&m| tags.item_has_tag(m, t))
                    .count();
                (t, count as f64)
            })
            .collect();
        clusters.push(TasteCluster {
            id,
            members,
            tags: scored,
        });
    }
    Ok(TasteClusterSet {
        clusters,
        num_tags: tags.num_tags(),
    })
}
