//! Training loops: single models, the forest ensemble, and the BPR
//! matrix-factorization baseline, all sharing one Adam plus
//! early-stopping protocol driven by validation recall.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use log::info;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{
    compute_idf, sample_bpr_triplets, IdfWeights, InteractionDataset, ItemTagMatrix, Split,
};
use crate::error::{EcfError, Result};
use crate::metrics::evaluate_ranking;
use crate::model::{
    string_enum, BatchGraph, EcfForest, EcfHyperParams, EcfModel, IndLoss, LossBreakdown,
    SparseAffiliations, StMode, TagSoftmax, TasteCluster, TasteClusterSet, TrainedEcf, UserAgg,
};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

/// Default number of independently seeded forest members.
pub const DEFAULT_FOREST_SIZE: usize = 9;

const MF_INIT_STD: f64 = 0.01;

/// Which items feed the per-cluster tag distributions during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagDistScope {
    /// Every item, every batch.
    Full,
    /// Only the items sampled into the current batch.
    Batch,
}

string_enum!(TagDistScope { Full => "full", 0; Batch => "batch", 1 });

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub hp: EcfHyperParams,
    pub epochs_max: usize,
    /// Triplets drawn per optimizer step.
    pub batch_size: usize,
    /// Epochs without a validation-recall improvement before stopping.
    pub patience: usize,
    /// Cutoff for the validation recall that drives early stopping.
    pub eval_k: usize,
    pub learning_rate: f64,
    /// Base seed; forest member f trains with seed + f.
    pub seed: u64,
    pub tag_dist_scope: TagDistScope,
    /// Restrict cluster-embedding updates to rows activated by the
    /// current batch's Top-K masks.
    pub activated_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hp: EcfHyperParams::default(),
            epochs_max: 500,
            batch_size: 1024,
            patience: 10,
            eval_k: 20,
            learning_rate: 1e-3,
            seed: 0,
            tag_dist_scope: TagDistScope::Full,
            activated_only: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        let counts = [
            ("epochs_max", self.epochs_max),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("eval_k", self.eval_k),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(EcfError::Config(format!("{} must be positive", name)));
            }
        }
        if self.patience > self.epochs_max {
            return Err(EcfError::Config(format!(
                "patience ({}) exceeds epochs_max ({})",
                self.patience, self.epochs_max
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(EcfError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Counts consecutive non-improving observations of a higher-is-better
/// signal. Ties do not count as improvements.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Records one observation; true when it beats the best so far.
    pub fn observe(&mut self, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Outcome of one full-model training run.
pub struct TrainRun {
    pub trained: TrainedEcf,
    /// Per-batch losses in execution order.
    pub loss_history: Vec<LossBreakdown>,
    /// Validation recall after each epoch; empty without a val split.
    pub val_recall_history: Vec<f64>,
    pub epochs_run: usize,
}

/// Plain matrix factorization: prediction is the embedding dot product.
#[derive(Clone, Debug)]
pub struct MfModel {
    pub u: Tensor,
    pub v: Tensor,
    pub seed: u64,
}

impl MfModel {
    pub fn num_users(&self) -> usize {
        self.u.rows()
    }

    pub fn num_items(&self) -> usize {
        self.v.rows()
    }

    pub fn predict(&self, user: u32, item: u32) -> f64 {
        dot(self.u.row(user as usize), self.v.row(item as usize))
    }

    /// Scores for one user against every item.
    pub fn scores_for(&self, user: u32) -> Vec<f64> {
        let ur = self.u.row(user as usize);
        (0..self.v.rows()).map(|i| dot(ur, self.v.row(i))).collect()
    }
}

/// Outcome of one matrix-factorization run.
pub struct MfRun {
    pub model: MfModel,
    pub loss_history: Vec<f64>,
    pub val_recall_history: Vec<f64>,
    pub epochs_run: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn grad_or_zeros(tape: &Tape, leaf: Var, like: &Tensor) -> Tensor {
    tape.grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
}

/// Union of the Top-K mask rows this batch touched: every row of the
/// user mask plus the rows of the sampled positive and negative items.
fn activated_rows(graph: &BatchGraph, triplets: &[(u32, u32, u32)]) -> Vec<bool> {
    let mut active = vec![false; graph.user_mask.cols()];
    for r in 0..graph.user_mask.rows() {
        for (slot, &m) in active.iter_mut().zip(graph.user_mask.row(r)) {
            *slot |= m != 0.0;
        }
    }
    for &(_, pos, neg) in triplets {
        for item in [pos, neg] {
            for (slot, &m) in active.iter_mut().zip(graph.item_mask.row(item as usize)) {
                *slot |= m != 0.0;
            }
        }
    }
    active
}

/// One optimizer step: sample triplets, build the batch graph, apply
/// Adam to U, V, and (optionally masked) H.
fn train_batch<R: Rng>(
    model: &mut EcfModel,
    adam: &mut Adam,
    ds: &InteractionDataset,
    e: &Tensor,
    idf: &IdfWeights,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let triplets = sample_bpr_triplets(ds, cfg.batch_size, rng)?;
    let mut users: Vec<u32> = triplets.iter().map(|&(u, _, _)| u).collect();
    users.sort_unstable();
    users.dedup();
    let scope = match cfg.tag_dist_scope {
        TagDistScope::Full => None,
        TagDistScope::Batch => {
            let mut items: Vec<u32> = triplets.iter().flat_map(|&(_, p, n)| [p, n]).collect();
            items.sort_unstable();
            items.dedup();
            Some(items)
        }
    };
    let mut tape = Tape::new();
    let graph = model.batch_graph(&mut tape, &users, ds, false)?;
    let (loss, breakdown) = model.total_loss(&mut tape, &graph, &triplets, e, idf, scope.as_deref())?;
    tape.backward(loss)?;
    let gu = grad_or_zeros(&tape, graph.u_leaf, &model.u);
    let gv = grad_or_zeros(&tape, graph.v_leaf, &model.v);
    let gh = grad_or_zeros(&tape, graph.h_leaf, &model.h);
    let h_mask = if cfg.activated_only {
        Some(activated_rows(&graph, &triplets))
    } else {
        None
    };
    adam.step_masked(
        &mut [&mut model.u, &mut model.v, &mut model.h],
        &[&gu, &gv, &gh],
        &[None, None, h_mask.as_deref()],
    )?;
    Ok(breakdown)
}

/// Trains one model. With a validation split the loop early-stops on
/// stalled Recall@eval_k and returns the best-validation snapshot;
/// without one it runs all epochs and returns the final parameters.
pub fn train_single(
    ds: &InteractionDataset,
    tags: &ItemTagMatrix,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainRun> {
    cfg.validate()?;
    if tags.num_items() != ds.num_items() {
        return Err(EcfError::Config(format!(
            "tag matrix covers {} items, dataset has {}",
            tags.num_items(),
            ds.num_items()
        )));
    }
    if ds.train_pairs().is_empty() {
        return Err(EcfError::Data("no training interactions".into()));
    }
    let idf = compute_idf(tags);
    let e = tags.to_dense();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = EcfModel::init(cfg.hp.clone(), ds.num_users(), ds.num_items(), &mut rng)?;
    let mut adam = Adam::new(
        AdamConfig::with_learning_rate(cfg.learning_rate),
        &model.param_shapes(),
    );
    let batches = ds.train_pairs().len().div_ceil(cfg.batch_size);
    let has_val = !ds.val_pairs().is_empty();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.clone();
    let mut loss_history = Vec::new();
    let mut val_recall_history = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs_max {
        epochs_run = epoch + 1;
        for batch in 0..batches {
            let breakdown = train_batch(&mut model, &mut adam, ds, &e, &idf, cfg, &mut rng)
                .map_err(|err| {
                    EcfError::Data(format!(
                        "training aborted at epoch {} batch {}: {}",
                        epoch, batch, err
                    ))
                })?;
            loss_history.push(breakdown);
        }
        let last_loss = loss_history.last().map_or(f64::NAN, |b| b.ecf);
        if has_val {
            let affil = model.extract_affiliations(ds);
            let eval = evaluate_ranking(|u| affil.scores_for(u), ds, Split::Val, cfg.eval_k);
            let improved = stopper.observe(eval.recall);
            if improved {
                best = model.clone();
            }
            info!(
                "epoch {:>3}: loss {:.4}, val recall@{} {:.4}{}",
                epoch,
                last_loss,
                cfg.eval_k,
                eval.recall,
                if improved { " *" } else { "" }
            );
            val_recall_history.push(eval.recall);
            if stopper.should_stop() {
                info!(
                    "no validation improvement in {} epochs, stopping",
                    cfg.patience
                );
                break;
            }
        } else {
            info!("epoch {:>3}: loss {:.4}", epoch, last_loss);
        }
    }
    let model = if has_val { best } else { model };
    let affiliations = model.extract_affiliations(ds);
    let clusters = model.extract_clusters(&affiliations, tags, &idf);
    Ok(TrainRun {
        trained: TrainedEcf {
            model,
            seed,
            affiliations,
            clusters,
        },
        loss_history,
        val_recall_history,
        epochs_run,
    })
}

/// Trains `forest_size` members in parallel with seeds cfg.seed + f,
/// preserving member order.
pub fn train_forest(
    ds: &InteractionDataset,
    tags: &ItemTagMatrix,
    cfg: &TrainConfig,
    forest_size: usize,
) -> Result<EcfForest> {
    if forest_size == 0 {
        return Err(EcfError::Config("forest needs at least one member".into()));
    }
    let members = (0..forest_size)
        .into_par_iter()
        .map(|f| train_single(ds, tags, cfg, cfg.seed + f as u64).map(|run| run.trained))
        .collect::<Result<Vec<_>>>()?;
    Ok(EcfForest { members })
}

fn bpr_embedding_loss(
    tape: &mut Tape,
    u_leaf: Var,
    v_leaf: Var,
    triplets: &[(u32, u32, u32)],
) -> Result<Var> {
    let users: Vec<usize> = triplets.iter().map(|&(u, _, _)| u as usize).collect();
    let pos: Vec<usize> = triplets.iter().map(|&(_, p, _)| p as usize).collect();
    let neg: Vec<usize> = triplets.iter().map(|&(_, _, n)| n as usize).collect();
    let ug = tape.gather_rows(u_leaf, users)?;
    let pg = tape.gather_rows(v_leaf, pos)?;
    let ng = tape.gather_rows(v_leaf, neg)?;
    let pos_prod = tape.mul(ug, pg)?;
    let pos_score = tape.row_sum(pos_prod)?;
    let neg_prod = tape.mul(ug, ng)?;
    let neg_score = tape.row_sum(neg_prod)?;
    let margin = tape.sub(pos_score, neg_score)?;
    let flipped = tape.neg(margin)?;
    let soft = tape.softplus(flipped)?;
    tape.sum(soft)
}

/// Matrix-factorization baseline under the same sampler, optimizer,
/// early stopping, and snapshot rule as the full model.
pub fn train_mf(ds: &InteractionDataset, cfg: &TrainConfig, seed: u64) -> Result<MfRun> {
    cfg.validate()?;
    if ds.train_pairs().is_empty() {
        return Err(EcfError::Data("no training interactions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = Tensor::randn(ds.num_users(), cfg.hp.embed_dim, MF_INIT_STD, &mut rng);
    let mut v = Tensor::randn(ds.num_items(), cfg.hp.embed_dim, MF_INIT_STD, &mut rng);
    let mut adam = Adam::new(
        AdamConfig::with_learning_rate(cfg.learning_rate),
        &[u.shape(), v.shape()],
    );
    let batches = ds.train_pairs().len().div_ceil(cfg.batch_size);
    let has_val = !ds.val_pairs().is_empty();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = (u.clone(), v.clone());
    let mut loss_history = Vec::new();
    let mut val_recall_history = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs_max {
        epochs_run = epoch + 1;
        for batch in 0..batches {
            let step = (|| -> Result<f64> {
                let triplets = sample_bpr_triplets(ds, cfg.batch_size, &mut rng)?;
                let mut tape = Tape::new();
                let ul = tape.leaf(u.clone())?;
                let vl = tape.leaf(v.clone())?;
                let loss = bpr_embedding_loss(&mut tape, ul, vl, &triplets)?;
                tape.backward(loss)?;
                let gu = grad_or_zeros(&tape, ul, &u);
                let gv = grad_or_zeros(&tape, vl, &v);
                adam.step(&mut [&mut u, &mut v], &[&gu, &gv])?;
                Ok(tape.scalar_value(loss))
            })();
            let loss = step.map_err(|err| {
                EcfError::Data(format!(
                    "training aborted at epoch {} batch {}: {}",
                    epoch, batch, err
                ))
            })?;
            loss_history.push(loss);
        }
        if has_val {
            let eval = evaluate_ranking(
                |usr| {
                    let ur = u.row(usr as usize);
                    (0..v.rows()).map(|i| dot(ur, v.row(i))).collect()
                },
                ds,
                Split::Val,
                cfg.eval_k,
            );
            if stopper.observe(eval.recall) {
                best = (u.clone(), v.clone());
            }
            val_recall_history.push(eval.recall);
            if stopper.should_stop() {
                break;
            }
        }
    }
    let (u, v) = if has_val { best } else { (u, v) };
    Ok(MfRun {
        model: MfModel { u, v, seed },
        loss_history,
        val_recall_history,
        epochs_run,
    })
}

const MODEL_MAGIC: &[u8; 4] = b"ECF1";
const FORMAT_VERSION: u32 = 1;

const KIND_SINGLE: u8 = 0;
const KIND_MF: u8 = 1;
const KIND_FOREST: u8 = 2;

/// Any model a file can hold.
#[derive(Clone, Debug)]
pub enum SavedModel {
    Single(TrainedEcf),
    Mf(MfModel),
    Forest(EcfForest),
}

/// Inference-time slice of one saved instance: everything except the
/// dense embeddings, which the loader skips without reading.
#[derive(Clone, Debug)]
pub struct AffiliationsOnly {
    pub seed: u64,
    pub affiliations: SparseAffiliations,
    pub clusters: TasteClusterSet,
}

fn w_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn w_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn w_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn w_tensor(out: &mut Vec<u8>, t: &Tensor) {
    w_u64(out, t.rows() as u64);
    w_u64(out, t.cols() as u64);
    for &x in t.data() {
        w_f64(out, x);
    }
}

fn w_sparse(out: &mut Vec<u8>, rows: &[Vec<(u32, f64)>]) {
    w_u64(out, rows.len() as u64);
    for row in rows {
        w_u64(out, row.len() as u64);
        for &(c, weight) in row {
            w_u32(out, c);
            w_f64(out, weight);
        }
    }
}

/// Seed, hyperparams, then three length-prefixed sections: embeddings,
/// affiliations, clusters. The lengths let readers skip what they do
/// not need.
fn single_body(t: &TrainedEcf) -> Vec<u8> {
    let mut out = Vec::new();
    w_u64(&mut out, t.seed);
    let hp = &t.model.hp;
    for n in [
        hp.num_clusters,
        hp.embed_dim,
        hp.item_top_m,
        hp.user_top_n,
        hp.tags_per_cluster,
    ] {
        w_u64(&mut out, n as u64);
    }
    for x in [hp.temp_st, hp.temp_tag, hp.lambda_cf] {
        w_f64(&mut out, x);
    }
    for code in [
        hp.st_mode.code(),
        hp.tag_softmax.code(),
        hp.user_agg.code(),
        hp.ind_loss.code(),
    ] {
        out.push(code);
    }
    let mut embed = Vec::new();
    w_tensor(&mut embed, &t.model.u);
    w_tensor(&mut embed, &t.model.v);
    w_tensor(&mut embed, &t.model.h);
    w_u64(&mut out, embed.len() as u64);
    out.extend_from_slice(&embed);
    let mut affil = Vec::new();
    w_sparse(&mut affil, &t.affiliations.item_rows);
    w_sparse(&mut affil, &t.affiliations.user_rows);
    w_u64(&mut out, affil.len() as u64);
    out.extend_from_slice(&affil);
    let mut cl = Vec::new();
    w_u64(&mut cl, t.clusters.num_tags as u64);
    w_u64(&mut cl, t.clusters.clusters.len() as u64);
    for c in &t.clusters.clusters {
        w_u32(&mut cl, c.id);
        w_u64(&mut cl, c.members.len() as u64);
        for &m in &c.members {
            w_u32(&mut cl, m);
        }
        w_u64(&mut cl, c.tags.len() as u64);
        for &(tag, score) in &c.tags {
            w_u32(&mut cl, tag);
            w_f64(&mut cl, score);
        }
    }
    w_u64(&mut out, cl.len() as u64);
    out.extend_from_slice(&cl);
    out
}

fn write_file(path: &Path, kind: u8, body: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(9 + body.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(body);
    std::fs::write(path, out)
        .map_err(|e| EcfError::Data(format!("model file {}: {}", path.display(), e)))
}

pub fn save_single(trained: &TrainedEcf, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), KIND_SINGLE, &single_body(trained))
}

pub fn save_mf(model: &MfModel, path: impl AsRef<Path>) -> Result<()> {
    let mut body = Vec::new();
    w_u64(&mut body, model.seed);
    w_tensor(&mut body, &model.u);
    w_tensor(&mut body, &model.v);
    write_file(path.as_ref(), KIND_MF, &body)
}

pub fn save_forest(forest: &EcfForest, path: impl AsRef<Path>) -> Result<()> {
    let mut body = Vec::new();
    w_u64(&mut body, forest.members.len() as u64);
    for m in &forest.members {
        body.extend_from_slice(&single_body(m));
    }
    write_file(path.as_ref(), KIND_FOREST, &body)
}

fn r_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn r_len(r: &mut impl Read) -> Result<usize> {
    let x = r_u64(r)?;
    // Sanity cap so a corrupt length fails instead of allocating wildly.
    if x > (1 << 33) {
        return Err(EcfError::Model(format!("implausible length field {}", x)));
    }
    Ok(x as usize)
}

fn r_f64_vec(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut data = Vec::with_capacity(n.min(1 << 22));
    let mut buf = [0u8; 8 * 1024];
    let mut remaining = n;
    while remaining > 0 {
        let take = remaining.min(1024);
        let bytes = &mut buf[..8 * take];
        r.read_exact(bytes)?;
        data.extend(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        );
        remaining -= take;
    }
    Ok(data)
}

fn r_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rows = r_len(r)?;
    let cols = r_len(r)?;
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n <= (1 << 33))
        .ok_or_else(|| EcfError::Model(format!("implausible tensor shape {}x{}", rows, cols)))?;
    Tensor::from_vec(rows, cols, r_f64_vec(r, n)?)
}

fn r_sparse(r: &mut impl Read) -> Result<Vec<Vec<(u32, f64)>>> {
    let n = r_len(r)?;
    let mut rows = Vec::with_capacity(n.min(1 << 22));
    for _ in 0..n {
        let k = r_len(r)?;
        let mut row = Vec::with_capacity(k.min(1 << 22));
        for _ in 0..k {
            row.push((r_u32(r)?, r_f64(r)?));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn r_clusters(r: &mut impl Read) -> Result<TasteClusterSet> {
    let num_tags = r_len(r)?;
    let n = r_len(r)?;
    let mut clusters = Vec::with_capacity(n.min(1 << 22));
    for _ in 0..n {
        let id = r_u32(r)?;
        let member_count = r_len(r)?;
        let mut members = Vec::with_capacity(member_count.min(1 << 22));
        for _ in 0..member_count {
            members.push(r_u32(r)?);
        }
        let tag_count = r_len(r)?;
        let mut tags = Vec::with_capacity(tag_count.min(1 << 22));
        for _ in 0..tag_count {
            tags.push((r_u32(r)?, r_f64(r)?));
        }
        clusters.push(TasteCluster { id, members, tags });
    }
    Ok(TasteClusterSet { clusters, num_tags })
}

fn read_header(r: &mut impl Read) -> Result<u8> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(EcfError::Model("bad magic".into()));
    }
    let version = r_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(EcfError::Model(format!(
            "unsupported version {} (this build reads version {})",
            version, FORMAT_VERSION
        )));
    }
    r_u8(r)
}

fn r_hyperparams(r: &mut impl Read) -> Result<EcfHyperParams> {
    let num_clusters = r_len(r)?;
    let embed_dim = r_len(r)?;
    let item_top_m = r_len(r)?;
    let user_top_n = r_len(r)?;
    let tags_per_cluster = r_len(r)?;
    let temp_st = r_f64(r)?;
    let temp_tag = r_f64(r)?;
    let lambda_cf = r_f64(r)?;
    let bad_code = |what: &str| EcfError::Model(format!("unknown {} code", what));
    let st_mode = StMode::from_code(r_u8(r)?).ok_or_else(|| bad_code("straight-through mode"))?;
    let tag_softmax = TagSoftmax::from_code(r_u8(r)?).ok_or_else(|| bad_code("tag softmax"))?;
    let user_agg = UserAgg::from_code(r_u8(r)?).ok_or_else(|| bad_code("user aggregation"))?;
    let ind_loss = IndLoss::from_code(r_u8(r)?).ok_or_else(|| bad_code("independence loss"))?;
    let hp = EcfHyperParams {
        num_clusters,
        embed_dim,
        item_top_m,
        user_top_n,
        tags_per_cluster,
        temp_st,
        temp_tag,
        lambda_cf,
        st_mode,
        tag_softmax,
        user_agg,
        ind_loss,
    };
    hp.validate()?;
    Ok(hp)
}

fn r_single(r: &mut impl Read) -> Result<TrainedEcf> {
    let seed = r_u64(r)?;
    let hp = r_hyperparams(r)?;
    let _embed_len = r_u64(r)?;
    let u = r_tensor(r)?;
    let v = r_tensor(r)?;
    let h = r_tensor(r)?;
    u.ensure_finite("load user embeddings")?;
    v.ensure_finite("load item embeddings")?;
    h.ensure_finite("load cluster embeddings")?;
    if u.cols() != hp.embed_dim
        || v.cols() != hp.embed_dim
        || h.cols() != hp.embed_dim
        || h.rows() != hp.num_clusters
    {
        return Err(EcfError::Model(
            "embedding shapes disagree with the stored hyperparameters".into(),
        ));
    }
    let _affil_len = r_u64(r)?;
    let item_rows = r_sparse(r)?;
    let user_rows = r_sparse(r)?;
    if item_rows.len() != v.rows() || user_rows.len() != u.rows() {
        return Err(EcfError::Model(
            "affiliation row counts disagree with the embeddings".into(),
        ));
    }
    let _clusters_len = r_u64(r)?;
    let clusters = r_clusters(r)?;
    Ok(TrainedEcf {
        model: EcfModel { hp, u, v, h },
        seed,
        affiliations: SparseAffiliations {
            item_rows,
            user_rows,
        },
        clusters,
    })
}

fn r_affiliations_only(r: &mut BufReader<File>) -> Result<AffiliationsOnly> {
    let seed = r_u64(r)?;
    let _hp = r_hyperparams(r)?;
    let embed_len = r_u64(r)?;
    let skip = i64::try_from(embed_len)
        .map_err(|_| EcfError::Model(format!("implausible length field {}", embed_len)))?;
    r.seek_relative(skip)?;
    let _affil_len = r_u64(r)?;
    let item_rows = r_sparse(r)?;
    let user_rows = r_sparse(r)?;
    let _clusters_len = r_u64(r)?;
    let clusters = r_clusters(r)?;
    Ok(AffiliationsOnly {
        seed,
        affiliations: SparseAffiliations {
            item_rows,
            user_rows,
        },
        clusters,
    })
}

fn annotate(path: &Path, e: EcfError) -> EcfError {
    match e {
        EcfError::Io(io) => EcfError::Model(format!("{}: {}", path.display(), io)),
        EcfError::Model(m) => EcfError::Model(format!("{}: {}", path.display(), m)),
        other => other,
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    let inner = || -> Result<SavedModel> {
        let mut r = BufReader::new(File::open(path)?);
        match read_header(&mut r)? {
            KIND_SINGLE => Ok(SavedModel::Single(r_single(&mut r)?)),
            KIND_MF => {
                let seed = r_u64(&mut r)?;
                let u = r_tensor(&mut r)?;
                let v = r_tensor(&mut r)?;
                u.ensure_finite("load user embeddings")?;
                v.ensure_finite("load item embeddings")?;
                Ok(SavedModel::Mf(MfModel { u, v, seed }))
            }
            KIND_FOREST => {
                let n = r_len(&mut r)?;
                if n == 0 {
                    return Err(EcfError::Model("forest file has no members".into()));
                }
                let members = (0..n)
                    .map(|_| r_single(&mut r))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SavedModel::Forest(EcfForest { members }))
            }
            other => Err(EcfError::Model(format!("unknown model kind {}", other))),
        }
    };
    inner().map_err(|e| annotate(path, e))
}

/// Loads only the affiliation and cluster sections, skipping the dense
/// embeddings entirely; one entry per forest member.
pub fn load_affiliations(path: impl AsRef<Path>) -> Result<Vec<AffiliationsOnly>> {
    let path = path.as_ref();
    let inner = || -> Result<Vec<AffiliationsOnly>> {
        let mut r = BufReader::new(File::open(path)?);
        match read_header(&mut r)? {
            KIND_SINGLE => Ok(vec![r_affiliations_only(&mut r)?]),
            KIND_FOREST => {
                let n = r_len(&mut r)?;
                if n == 0 {
                    return Err(EcfError::Model("forest file has no members".into()));
                }
                (0..n).map(|_| r_affiliations_only(&mut r)).collect()
            }
            KIND_MF => Err(EcfError::Data(
                "matrix-factorization files carry no affiliation section".into(),
            )),
            other => Err(EcfError::Model(format!("unknown model kind {}", other))),
        }
    };
    inner().map_err(|e| annotate(path, e))
}
