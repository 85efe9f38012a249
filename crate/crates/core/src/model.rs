//! The explainable collaborative-filtering model: cosine scores between
//! item embeddings and taste-cluster embeddings, sparse affiliations kept
//! differentiable with a straight-through Top-K, cluster-space prediction,
//! and the combined training objective (ranking + tag likelihood +
//! cluster independence + an embedding-space auxiliary term).

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use log::warn;
use rand::Rng;

use crate::data::{IdfWeights, InteractionDataset, ItemTagMatrix};
use crate::error::{EcfError, Result};
use crate::tensor::{
    sigmoid, topk_binary_mask, topk_row_indices, RowGroups, Tape, Tensor, Var,
};

const INIT_STD: f64 = 0.01;
/// Floor added inside logs of tag mass.
const TAG_LOG_FLOOR: f64 = 1e-9;

/// How the hard Top-K mask participates in the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StMode {
    /// Gradient of the tempered-softmax soft mask (straight-through).
    SoftmaxSt,
    /// Mask treated as a constant; gradient flows through the sigmoid only.
    SigmoidOnly,
}

/// Form of the logits feeding the per-cluster tag softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagSoftmax {
    /// log(d + 1e-9)/tau: scale-robust, the default.
    Log,
    /// d/tau: raw weighted tag mass.
    Linear,
}

/// How a user's item scores are pooled into cluster scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UserAgg {
    Mean,
    Sum,
}

/// Which penalty keeps taste-cluster embeddings distinct.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndLoss {
    MutualInfo,
    Orthogonality,
    DistanceCorrelation,
}

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $name:literal, $code:literal);+ $(;)? }) => {
        impl $ty {
            pub const fn as_str(&self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }

            /// Stable numeric code used by the binary model container.
            pub const fn code(&self) -> u8 {
                match self {
                    $($ty::$variant => $code),+
                }
            }

            pub fn from_code(code: u8) -> Option<Self> {
                match code {
                    $($code => Some($ty::$variant),)+
                    _ => None,
                }
            }
        }

        impl FromStr for $ty {
            type Err = EcfError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(EcfError::Config(format!(
                        concat!("unknown ", stringify!($ty), " value {:?}"),
                        s
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

pub(crate) use string_enum;

string_enum!(StMode { SoftmaxSt => "softmax_st", 0; SigmoidOnly => "sigmoid_only", 1 });
string_enum!(TagSoftmax { Log => "log", 0; Linear => "linear", 1 });
string_enum!(UserAgg { Mean => "mean", 0; Sum => "sum", 1 });
string_enum!(IndLoss {
    MutualInfo => "mutual_info", 0;
    Orthogonality => "orthogonality", 1;
    DistanceCorrelation => "distance_correlation", 2;
});

#[derive(Clone, Debug, PartialEq)]
pub struct EcfHyperParams {
    /// Number of taste clusters (Z).
    pub num_clusters: usize,
    /// Embedding dimension.
    pub embed_dim: usize,
    /// Clusters kept per item.
    pub item_top_m: usize,
    /// Clusters kept per user.
    pub user_top_n: usize,
    /// Tags kept per cluster.
    pub tags_per_cluster: usize,
    /// Straight-through softmax temperature.
    pub temp_st: f64,
    /// Tag softmax temperature.
    pub temp_tag: f64,
    /// Weight of the embedding-space auxiliary loss.
    pub lambda_cf: f64,
    pub st_mode: StMode,
    pub tag_softmax: TagSoftmax,
    pub user_agg: UserAgg,
    pub ind_loss: IndLoss,
}

impl Default for EcfHyperParams {
    fn default() -> Self {
        EcfHyperParams {
            num_clusters: 64,
            embed_dim: 64,
            item_top_m: 20,
            user_top_n: 20,
            tags_per_cluster: 4,
            temp_st: 2.0,
            temp_tag: 2.0,
            lambda_cf: 0.6,
            st_mode: StMode::SoftmaxSt,
            tag_softmax: TagSoftmax::Log,
            user_agg: UserAgg::Mean,
            ind_loss: IndLoss::MutualInfo,
        }
    }
}

impl EcfHyperParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.num_clusters >= 1, "num_clusters must be at least 1"),
            (self.embed_dim >= 1, "embed_dim must be at least 1"),
            (self.item_top_m >= 1, "item_top_m must be at least 1"),
            (
                self.item_top_m <= self.num_clusters,
                "item_top_m cannot exceed num_clusters",
            ),
            (self.user_top_n >= 1, "user_top_n must be at least 1"),
            (
                self.user_top_n <= self.num_clusters,
                "user_top_n cannot exceed num_clusters",
            ),
            (self.tags_per_cluster >= 1, "tags_per_cluster must be at least 1"),
            (
                self.temp_st.is_finite() && self.temp_st > 0.0,
                "temp_st must be positive",
            ),
            (
                self.temp_tag.is_finite() && self.temp_tag > 0.0,
                "temp_tag must be positive",
            ),
            (
                self.lambda_cf.is_finite() && self.lambda_cf >= 0.0,
                "lambda_cf must be non-negative",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(EcfError::Config(msg.to_string()));
            }
        }
        Ok(())
    }
}

/// Model parameters: user embeddings U, item embeddings V, and
/// taste-cluster embeddings H.
#[derive(Clone, Debug)]
pub struct EcfModel {
    pub hp: EcfHyperParams,
    pub u: Tensor,
    pub v: Tensor,
    pub h: Tensor,
}

/// One training forward pass: leaves plus shared intermediate nodes.
pub struct BatchGraph {
    pub u_leaf: Var,
    pub v_leaf: Var,
    pub h_leaf: Var,
    /// Item-cluster cosine scores (num_items x Z).
    pub item_scores: Var,
    /// Masked item affiliations (num_items x Z).
    pub item_affil: Var,
    /// Sorted unique users this graph covers.
    pub user_rows: Vec<u32>,
    /// Masked user affiliations (len(user_rows) x Z).
    pub user_affil: Var,
    /// Binary Top-K masks actually applied this pass.
    pub item_mask: Tensor,
    pub user_mask: Tensor,
}

impl BatchGraph {
    pub fn user_row_of(&self, user: u32) -> Option<usize> {
        self.user_rows.binary_search(&user).ok()
    }
}

/// Scalar values of each loss term for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub cs: f64,
    pub ts: f64,
    pub ind: f64,
    pub cf: f64,
    /// cs + ts + ind, in that association order.
    pub tc: f64,
    /// tc + lambda * cf.
    pub ecf: f64,
}

impl EcfModel {
    /// Fresh parameters: U, V ~ N(0, 0.01^2); each cluster embedding is a
    /// distinct uniformly chosen item embedding plus the same noise.
    pub fn init<R: Rng>(
        hp: EcfHyperParams,
        num_users: usize,
        num_items: usize,
        rng: &mut R,
    ) -> Result<Self> {
        hp.validate()?;
        if hp.num_clusters > num_items {
            return Err(EcfError::Config(format!(
                "num_clusters ({}) exceeds the number of items ({})",
                hp.num_clusters, num_items
            )));
        }
        let u = Tensor::randn(num_users, hp.embed_dim, INIT_STD, rng);
        let v = Tensor::randn(num_items, hp.embed_dim, INIT_STD, rng);
        let picks = rand::seq::index::sample(rng, num_items, hp.num_clusters);
        let noise = Tensor::randn(hp.num_clusters, hp.embed_dim, INIT_STD, rng);
        let mut h = Tensor::zeros(hp.num_clusters, hp.embed_dim);
        for (c, item) in picks.iter().enumerate() {
            for (dst, (src, nz)) in h
                .row_mut(c)
                .iter_mut()
                .zip(v.row(item).iter().zip(noise.row(c)))
            {
                *dst = src + nz;
            }
        }
        Ok(EcfModel { hp, u, v, h })
    }

    pub fn num_users(&self) -> usize {
        self.u.rows()
    }

    pub fn num_items(&self) -> usize {
        self.v.rows()
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        vec![self.u.shape(), self.v.shape(), self.h.shape()]
    }

    /// Builds the shared forward pass for one batch. `users` must be
    /// sorted and unique. With `surrogate` the hard Top-K masks are
    /// replaced by their tempered-softmax relaxations, which is the
    /// smooth function the straight-through gradient differentiates.
    pub fn batch_graph(
        &self,
        tape: &mut Tape,
        users: &[u32],
        ds: &InteractionDataset,
        surrogate: bool,
    ) -> Result<BatchGraph> {
        if users.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EcfError::Model(
                "batch users must be sorted and unique".into(),
            ));
        }
        let u_leaf = tape.leaf(self.u.clone())?;
        let v_leaf = tape.leaf(self.v.clone())?;
        let h_leaf = tape.leaf(self.h.clone())?;
        let item_scores = tape.row_cosine(v_leaf, h_leaf)?;
        let (item_affil, item_mask) =
            self.masked_affiliations(tape, item_scores, self.hp.item_top_m, surrogate)?;
        let groups: RowGroups = Rc::new(
            users
                .iter()
                .map(|&u| {
                    let items = ds.user_train_items(u);
                    let w = match self.hp.user_agg {
                        UserAgg::Mean if !items.is_empty() => 1.0 / items.len() as f64,
                        _ => 1.0,
                    };
                    items.iter().map(|&i| (i, w)).collect()
                })
                .collect(),
        );
        let user_scores = tape.aggregate_rows(item_scores, groups)?;
        let (user_affil, user_mask) =
            self.masked_affiliations(tape, user_scores, self.hp.user_top_n, surrogate)?;
        Ok(BatchGraph {
            u_leaf,
            v_leaf,
            h_leaf,
            item_scores,
            item_affil,
            user_rows: users.to_vec(),
            user_affil,
            item_mask,
            user_mask,
        })
    }

    /// sigma(scores) times the Top-k mask. In straight-through mode the
    /// mask is the composite m_soft + detach(m_hard - m_soft): binary in
    /// the forward, tempered-softmax adjoint in the backward. With
    /// `surrogate` the hard mask is dropped entirely, leaving the smooth
    /// relaxation the straight-through estimator differentiates.
    fn masked_affiliations(
        &self,
        tape: &mut Tape,
        scores: Var,
        k: usize,
        surrogate: bool,
    ) -> Result<(Var, Tensor)> {
        let mask = topk_binary_mask(tape.value(scores), k)?;
        let sig = tape.sigmoid(scores)?;
        match self.hp.st_mode {
            StMode::SigmoidOnly => {
                let mc = tape.constant(mask.clone())?;
                Ok((tape.mul(sig, mc)?, mask))
            }
            StMode::SoftmaxSt => {
                let sm = tape.row_softmax(scores, self.hp.temp_st)?;
                if surrogate {
                    return Ok((tape.mul(sig, sm)?, mask));
                }
                let mc = tape.constant(mask.clone())?;
                let gap = tape.sub(mc, sm)?;
                let frozen = tape.detach(gap)?;
                let st_mask = tape.add(sm, frozen)?;
                Ok((tape.mul(sig, st_mask)?, mask))
            }
        }
    }

    /// Pairwise ranking loss over cluster-space predictions:
    /// sum of -ln sigma(y_ui - y_uj).
    pub fn ranking_loss(
        &self,
        tape: &mut Tape,
        g: &BatchGraph,
        triplets: &[(u32, u32, u32)],
    ) -> Result<Var> {
        let (users, pos, neg) = triplet_rows(g, triplets)?;
        let ug = tape.gather_rows(g.user_affil, users)?;
        let pg = tape.gather_rows(g.item_affil, pos)?;
        let ng = tape.gather_rows(g.item_affil, neg)?;
        pairwise_bpr(tape, ug, pg, ng)
    }

    /// Same ranking loss on raw embedding inner products u.v.
    pub fn embedding_ranking_loss(
        &self,
        tape: &mut Tape,
        g: &BatchGraph,
        triplets: &[(u32, u32, u32)],
    ) -> Result<Var> {
        let users: Vec<usize> = triplets.iter().map(|&(u, _, _)| u as usize).collect();
        let pos: Vec<usize> = triplets.iter().map(|&(_, i, _)| i as usize).collect();
        let neg: Vec<usize> = triplets.iter().map(|&(_, _, j)| j as usize).collect();
        let ug = tape.gather_rows(g.u_leaf, users)?;
        let pg = tape.gather_rows(g.v_leaf, pos)?;
        let ng = tape.gather_rows(g.v_leaf, neg)?;
        pairwise_bpr(tape, ug, pg, ng)
    }

    /// Negative log-likelihood of each cluster's top tags under the
    /// idf-weighted tag distribution of its affiliated items. The top-P
    /// selection is a constant mask; gradient flows through the scores.
    /// `item_scope` restricts the distribution to a sorted unique subset
    /// of items. P is clamped to the number of tags.
    pub fn tag_loss(
        &self,
        tape: &mut Tape,
        item_affil: Var,
        e: &Tensor,
        idf: &IdfWeights,
        item_scope: Option<&[u32]>,
    ) -> Result<Var> {
        let (x, e_rows) = match item_scope {
            None => (item_affil, e.clone()),
            Some(items) => {
                let idx: Vec<usize> = items.iter().map(|&i| i as usize).collect();
                let mut sub = Tensor::zeros(idx.len(), e.cols());
                for (r, &i) in idx.iter().enumerate() {
                    sub.row_mut(r).copy_from_slice(e.row(i));
                }
                (tape.gather_rows(item_affil, idx)?, sub)
            }
        };
        let ec = tape.constant(e_rows)?;
        let xt = tape.transpose(x)?;
        let mass = tape.matmul(xt, ec)?;
        let idfc = tape.constant(idf.to_row())?;
        let d = tape.mul(mass, idfc)?;
        let logits = match self.hp.tag_softmax {
            TagSoftmax::Log => {
                // relu guards tags whose idf went negative (tag on every
                // item); d is non-negative otherwise.
                let clamped = tape.relu(d)?;
                let shifted = tape.add_scalar(clamped, TAG_LOG_FLOOR)?;
                let logd = tape.ln(shifted)?;
                tape.mul_scalar(logd, 1.0 / self.hp.temp_tag)?
            }
            TagSoftmax::Linear => tape.mul_scalar(d, 1.0 / self.hp.temp_tag)?,
        };
        let log_beta = tape.row_log_softmax(logits)?;
        let p = self.hp.tags_per_cluster.min(e.cols());
        let mask = tape.constant(topk_binary_mask(tape.value(log_beta), p)?)?;
        let picked = tape.mul(mask, log_beta)?;
        let total = tape.sum(picked)?;
        tape.neg(total)
    }

    /// Penalty keeping cluster embeddings distinct. Z < 2 yields a
    /// constant zero with a warning.
    pub fn independence_loss(&self, tape: &mut Tape, h_leaf: Var) -> Result<Var> {
        let z = self.hp.num_clusters;
        if z < 2 {
            warn!("independence loss is zero: fewer than two taste clusters");
            return tape.constant(Tensor::scalar(0.0));
        }
        match self.hp.ind_loss {
            IndLoss::MutualInfo => {
                let s = tape.row_cosine(h_leaf, h_leaf)?;
                let es = tape.exp(s)?;
                let rs = tape.row_sum(es)?;
                let lse = tape.ln(rs)?;
                let total = tape.sum(lse)?;
                let eye = tape.constant(identity(z))?;
                let diag = tape.mul(s, eye)?;
                let on_diag = tape.sum(diag)?;
                tape.sub(total, on_diag)
            }
            IndLoss::Orthogonality => {
                let ht = tape.transpose(h_leaf)?;
                let gram = tape.matmul(h_leaf, ht)?;
                let off = tape.constant(off_diagonal_ones(z))?;
                let masked = tape.mul(gram, off)?;
                let sq = tape.mul(masked, masked)?;
                let total = tape.sum(sq)?;
                // Tiny shift keeps sqrt differentiable at exactly zero.
                let shifted = tape.add_scalar(total, 1e-24)?;
                tape.sqrt(shifted)
            }
            IndLoss::DistanceCorrelation => {
                let mut centered = Vec::with_capacity(z);
                let mut var2 = Vec::with_capacity(z);
                for c in 0..z {
                    let cent = centered_coordinate_distances(tape, h_leaf, c)?;
                    let sq = tape.mul(cent, cent)?;
                    var2.push(tape.mean(sq)?);
                    centered.push(cent);
                }
                let mut acc = tape.constant(Tensor::scalar(0.0))?;
                for c in 0..z {
                    for c2 in (c + 1)..z {
                        let prod = tape.mul(centered[c], centered[c2])?;
                        let cov2 = tape.mean(prod)?;
                        let cov2p = tape.relu(cov2)?;
                        let cov2s = tape.add_scalar(cov2p, 1e-12)?;
                        let num = tape.sqrt(cov2s)?;
                        let geo2 = tape.mul(var2[c], var2[c2])?;
                        let geo2s = tape.add_scalar(geo2, 1e-24)?;
                        let geo = tape.sqrt(geo2s)?;
                        let geos = tape.add_scalar(geo, 1e-12)?;
                        let den = tape.sqrt(geos)?;
                        let term = tape.div(num, den)?;
                        acc = tape.add(acc, term)?;
                    }
                }
                Ok(acc)
            }
        }
    }

    /// Full objective with per-term values. The auxiliary embedding loss
    /// is scaled by lambda; the other three terms carry unit weight.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        g: &BatchGraph,
        triplets: &[(u32, u32, u32)],
        e: &Tensor,
        idf: &IdfWeights,
        item_scope: Option<&[u32]>,
    ) -> Result<(Var, LossBreakdown)> {
        let cs = self.ranking_loss(tape, g, triplets)?;
        let ts = self.tag_loss(tape, g.item_affil, e, idf, item_scope)?;
        let ind = self.independence_loss(tape, g.h_leaf)?;
        let cf = self.embedding_ranking_loss(tape, g, triplets)?;
        let partial = tape.add(cs, ts)?;
        let tc = tape.add(partial, ind)?;
        let scaled_cf = tape.mul_scalar(cf, self.hp.lambda_cf)?;
        let ecf = tape.add(tc, scaled_cf)?;
        let breakdown = LossBreakdown {
            cs: tape.scalar_value(cs),
            ts: tape.scalar_value(ts),
            ind: tape.scalar_value(ind),
            cf: tape.scalar_value(cf),
            tc: tape.scalar_value(tc),
            ecf: tape.scalar_value(ecf),
        };
        Ok((ecf, breakdown))
    }

    /// Item-cluster cosine scores without a tape (same arithmetic as the
    /// training forward).
    pub fn item_cluster_scores(&self) -> Tensor {
        cosine_matrix(&self.v, &self.h)
    }

    /// User-cluster scores pooled from item scores over each user's train
    /// items. Users without train interactions get a zero row.
    pub fn user_cluster_scores(
        &self,
        item_scores: &Tensor,
        ds: &InteractionDataset,
    ) -> Tensor {
        let z = self.hp.num_clusters;
        let mut out = Tensor::zeros(ds.num_users(), z);
        for u in 0..ds.num_users() {
            let items = ds.user_train_items(u as u32);
            if items.is_empty() {
                continue;
            }
            let w = match self.hp.user_agg {
                UserAgg::Mean => 1.0 / items.len() as f64,
                UserAgg::Sum => 1.0,
            };
            let row = out.row_mut(u);
            for &i in items {
                for (dst, &s) in row.iter_mut().zip(item_scores.row(i as usize)) {
                    *dst += w * s;
                }
            }
        }
        out
    }

    /// Hard Top-K affiliations with sigmoid weights, the inference-time
    /// form of the model. Users without train interactions get an empty
    /// row.
    pub fn extract_affiliations(&self, ds: &InteractionDataset) -> SparseAffiliations {
        let item_scores = self.item_cluster_scores();
        let user_scores = self.user_cluster_scores(&item_scores, ds);
        let item_rows = (0..item_scores.rows())
            .map(|i| sparse_row(item_scores.row(i), self.hp.item_top_m))
            .collect();
        let user_rows = (0..user_scores.rows())
            .map(|u| {
                if ds.user_train_items(u as u32).is_empty() {
                    Vec::new()
                } else {
                    sparse_row(user_scores.row(u), self.hp.user_top_n)
                }
            })
            .collect();
        SparseAffiliations {
            item_rows,
            user_rows,
        }
    }

    /// Clusters as member lists plus their top descriptive tags with
    /// scores. Empty clusters are kept and flagged.
    pub fn extract_clusters(
        &self,
        affil: &SparseAffiliations,
        tags: &ItemTagMatrix,
        idf: &IdfWeights,
    ) -> TasteClusterSet {
        let z = self.hp.num_clusters;
        let t = tags.num_tags();
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); z];
        let mut mass = Tensor::zeros(z, t);
        for (i, row) in affil.item_rows.iter().enumerate() {
            for &(c, w) in row {
                members[c as usize].push(i as u32);
                let mrow = mass.row_mut(c as usize);
                for &tg in tags.item_tags(i as u32) {
                    mrow[tg as usize] += w;
                }
            }
        }
        let beta = self.tag_scores(&mass, idf);
        let p = self.hp.tags_per_cluster.min(t);
        let clusters = members
            .into_iter()
            .enumerate()
            .map(|(c, members)| {
                if members.is_empty() {
                    warn!("taste cluster {} has no member items", c);
                }
                let row = beta.row(c);
                let mut order: Vec<usize> = (0..t).collect();
                order.sort_by(|&a, &b| {
                    row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
                });
                let tags = order[..p]
                    .iter()
                    .map(|&tg| (tg as u32, row[tg]))
                    .collect();
                TasteCluster {
                    id: c as u32,
                    members,
                    tags,
                }
            })
            .collect();
        TasteClusterSet {
            clusters,
            num_tags: t,
        }
    }

    /// Row-stochastic tag scores from raw per-cluster tag mass, matching
    /// the training-time softmax arithmetic.
    pub fn tag_scores(&self, mass: &Tensor, idf: &IdfWeights) -> Tensor {
        let mut beta = Tensor::zeros(mass.rows(), mass.cols());
        let inv_tau = 1.0 / self.hp.temp_tag;
        for r in 0..mass.rows() {
            let logits: Vec<f64> = mass
                .row(r)
                .iter()
                .zip(idf.weights())
                .map(|(&m, &w)| match self.hp.tag_softmax {
                    TagSoftmax::Log => ((m * w).max(0.0) + TAG_LOG_FLOOR).ln() * inv_tau,
                    TagSoftmax::Linear => m * w * inv_tau,
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let brow = beta.row_mut(r);
            let mut total = 0.0;
            for (b, &l) in brow.iter_mut().zip(&logits) {
                *b = (l - mx).exp();
                total += *b;
            }
            brow.iter_mut().for_each(|b| *b /= total);
        }
        beta
    }
}

/// Per-row sparse affiliations: (cluster, sigmoid weight) pairs sorted by
/// cluster index, exactly Top-m per item and Top-n per user (empty for
/// users without train interactions).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAffiliations {
    pub item_rows: Vec<Vec<(u32, f64)>>,
    pub user_rows: Vec<Vec<(u32, f64)>>,
}

impl SparseAffiliations {
    pub fn num_items(&self) -> usize {
        self.item_rows.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_rows.len()
    }

    /// Predicted score: dot product over shared clusters.
    pub fn predict(&self, user: u32, item: u32) -> f64 {
        sparse_dot(
            &self.user_rows[user as usize],
            &self.item_rows[item as usize],
        )
    }

    /// Predicted scores for one user against every item.
    pub fn scores_for(&self, user: u32) -> Vec<f64> {
        let row = &self.user_rows[user as usize];
        self.item_rows.iter().map(|ir| sparse_dot(row, ir)).collect()
    }
}

/// One taste cluster: its member items and descriptive tags with scores,
/// best tag first (ties by tag index).
#[derive(Clone, Debug, PartialEq)]
pub struct TasteCluster {
    pub id: u32,
    pub members: Vec<u32>,
    pub tags: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TasteClusterSet {
    pub clusters: Vec<TasteCluster>,
    pub num_tags: usize,
}

/// One trained model instance with its inference-time artifacts.
#[derive(Clone, Debug)]
pub struct TrainedEcf {
    pub model: EcfModel,
    pub seed: u64,
    pub affiliations: SparseAffiliations,
    pub clusters: TasteClusterSet,
}

/// Ensemble of independently trained instances; prediction is the sum of
/// member predictions in member order.
#[derive(Clone, Debug)]
pub struct EcfForest {
    pub members: Vec<TrainedEcf>,
}

impl EcfForest {
    pub fn predict(&self, user: u32, item: u32) -> f64 {
        self.members
            .iter()
            .map(|m| m.affiliations.predict(user, item))
            .sum()
    }

    /// Summed member scores for one user against every item, accumulated
    /// in member order.
    pub fn scores_for(&self, user: u32) -> Vec<f64> {
        let mut out = vec![0.0; self.num_items()];
        for m in &self.members {
            for (acc, s) in out.iter_mut().zip(m.affiliations.scores_for(user)) {
                *acc += s;
            }
        }
        out
    }

    pub fn num_users(&self) -> usize {
        self.members.first().map_or(0, |m| m.affiliations.num_users())
    }

    pub fn num_items(&self) -> usize {
        self.members.first().map_or(0, |m| m.affiliations.num_items())
    }
}

/// Dot product of sparse rows sorted by index, accumulated in ascending
/// index order.
pub fn sparse_dot(a: &[(u32, f64)], b: &[(u32, f64)]) -> f64 {
    let mut acc = 0.0;
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// Pairwise cosine of two row sets, identical arithmetic to the tape op.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Tensor {
    const NORM_GUARD: f64 = 1e-12;
    let norm = |t: &Tensor, r: usize| {
        t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_GUARD
    };
    let na: Vec<f64> = (0..a.rows()).map(|r| norm(a, r)).collect();
    let nb: Vec<f64> = (0..b.rows()).map(|r| norm(b, r)).collect();
    let mut out = Tensor::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        let orow = out.row_mut(i);
        for (c, o) in orow.iter_mut().enumerate() {
            let d: f64 = ra.iter().zip(b.row(c)).map(|(x, y)| x * y).sum();
            *o = d / (na[i] * nb[c]);
        }
    }
    out
}

fn sparse_row(scores: &[f64], k: usize) -> Vec<(u32, f64)> {
    topk_row_indices(scores, k)
        .into_iter()
        .map(|c| (c as u32, sigmoid(scores[c])))
        .collect()
}

fn pairwise_bpr(tape: &mut Tape, users: Var, pos: Var, neg: Var) -> Result<Var> {
    let sp = tape.mul(users, pos)?;
    let sp = tape.row_sum(sp)?;
    let sn = tape.mul(users, neg)?;
    let sn = tape.row_sum(sn)?;
    let margin = tape.sub(sp, sn)?;
    let flipped = tape.neg(margin)?;
    let losses = tape.softplus(flipped)?;
    tape.sum(losses)
}

fn triplet_rows(
    g: &BatchGraph,
    triplets: &[(u32, u32, u32)],
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let mut users = Vec::with_capacity(triplets.len());
    let mut pos = Vec::with_capacity(triplets.len());
    let mut neg = Vec::with_capacity(triplets.len());
    for &(u, i, j) in triplets {
        let row = g.user_row_of(u).ok_or_else(|| {
            EcfError::Model(format!("user {} is not part of this batch graph", u))
        })?;
        users.push(row);
        pos.push(i as usize);
        neg.push(j as usize);
    }
    Ok((users, pos, neg))
}

/// Double-centered coordinate-distance matrix of one cluster embedding.
fn centered_coordinate_distances(tape: &mut Tape, h: Var, c: usize) -> Result<Var> {
    let row = tape.gather_rows(h, vec![c])?;
    let col = tape.transpose(row)?;
    let diff = tape.sub(col, row)?;
    let dist = tape.abs(diff)?;
    let row_means = tape.row_mean(dist)?;
    let dist_t = tape.transpose(dist)?;
    let col_means_t = tape.row_mean(dist_t)?;
    let col_means = tape.transpose(col_means_t)?;
    let grand = tape.mean(dist)?;
    let a = tape.sub(dist, row_means)?;
    let b = tape.sub(a, col_means)?;
    tape.add(b, grand)
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(n, n);
    for i in 0..n {
        t.set(i, i, 1.0);
    }
    t
}

fn off_diagonal_ones(n: usize) -> Tensor {
    let mut t = Tensor::filled(n, n, 1.0);
    for i in 0..n {
        t.set(i, i, 0.0);
    }
    t
}
