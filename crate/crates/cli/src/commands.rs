//! Subcommand implementations: thin orchestration over the library
//! crate. Results go to stdout; progress and diagnostics go through
//! the logger on stderr.

use std::path::{Path, PathBuf};

use clap::ValueEnum;

use ecf_core::baselines::{self, ClusterBuildConfig};
use ecf_core::data::{self, InteractionDataset, ItemTagMatrix, Split};
use ecf_core::explain::{
    explain as explanation_for, export_jsonl, recommend_topk, render_template, tag_discovery,
};
use ecf_core::metrics::{self, ExplainabilityReport};
use ecf_core::model::{EcfForest, TasteCluster, TasteClusterSet};
use ecf_core::trainer::{self, SavedModel};
use ecf_core::{EcfError, Result};

use crate::config::RunConfig;

/// Which model file a command reads or writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Single,
    Mf,
    Forest,
}

impl ModelKind {
    fn file_name(self) -> &'static str {
        match self {
            ModelKind::Single => "single.ecf",
            ModelKind::Mf => "mf.ecf",
            ModelKind::Forest => "forest.ecf",
        }
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<()> {
    let raw = InteractionDataset::load(cfg.require_interactions()?)?;
    log::info!(
        "loaded {} interactions over {} users and {} items",
        raw.num_interactions(),
        raw.num_users(),
        raw.num_items()
    );
    let cored = raw.kcore_filtered(cfg.kcore)?;
    let split = cored.split(
        (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio),
        cfg.train.seed,
    )?;
    let tags = load_tags_lenient(cfg.require_tags()?, cfg.min_tag_items, &split)?;
    data::save_prepared(&split, &tags, cfg.require_prepared_dir()?)?;
    println!("users\t{}", split.num_users());
    println!("items\t{}", split.num_items());
    println!("interactions\t{}", split.num_interactions());
    println!("train\t{}", split.train_pairs().len());
    println!("val\t{}", split.val_pairs().len());
    println!("test\t{}", split.test_pairs().len());
    println!("tags\t{}", tags.num_tags());
    Ok(())
}

/// Parses the raw tags file against the filtered catalog, dropping rows
/// for items the interaction filtering removed. The strict library
/// loader will not do here: raw tag catalogs legitimately describe more
/// items than the interaction log keeps.
fn load_tags_lenient(
    path: &Path,
    min_tag_items: usize,
    ds: &InteractionDataset,
) -> Result<ItemTagMatrix> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EcfError::Data(format!("{}: {}", path.display(), e)))?;
    let index: std::collections::HashMap<&str, usize> = ds
        .item_ids()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); ds.num_items()];
    let mut dropped = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        let trimmed = line.trim_end_matches('\r');
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((item, tags)) = trimmed.split_once('\t') else {
            return Err(EcfError::Parse {
                path: path.display().to_string(),
                line: line_no + 1,
                msg: "expected item<TAB>tag[|tag...]".into(),
            });
        };
        let Some(&idx) = index.get(item) else {
            dropped += 1;
            continue;
        };
        for tag in tags.split('|').filter(|t| !t.is_empty()) {
            if !raw[idx].iter().any(|t| t == tag) {
                raw[idx].push(tag.to_string());
            }
        }
    }
    if dropped > 0 {
        log::info!("dropped tag rows for {} items outside the filtered catalog", dropped);
    }
    Ok(ItemTagMatrix::from_raw(raw, min_tag_items))
}

/// Reads back what `prepare` wrote.
pub fn load_prepared(cfg: &RunConfig) -> Result<(InteractionDataset, ItemTagMatrix)> {
    let dir = cfg.require_prepared_dir()?;
    let ds = InteractionDataset::load_split(
        &dir.join("train.tsv"),
        &dir.join("val.tsv"),
        &dir.join("test.tsv"),
    )?;
    let tags = ItemTagMatrix::load(&dir.join("item_tags.tsv"), 1, &ds)?;
    Ok((ds, tags))
}

fn model_path(cfg: &RunConfig, kind: ModelKind) -> Result<PathBuf> {
    Ok(cfg.require_out_dir()?.join(kind.file_name()))
}

pub fn train(cfg: &RunConfig, kind: ModelKind) -> Result<()> {
    let (ds, tags) = load_prepared(cfg)?;
    let out = cfg.require_out_dir()?;
    std::fs::create_dir_all(out)?;
    let tc = &cfg.train;
    let path = out.join(kind.file_name());
    match kind {
        ModelKind::Single => {
            let run = trainer::train_single(&ds, &tags, tc, tc.seed)?;
            trainer::save_single(&run.trained, &path)?;
            println!("kind\tsingle");
            println!("epochs\t{}", run.epochs_run);
            print_best_val(&run.val_recall_history, tc.eval_k);
        }
        ModelKind::Mf => {
            let run = trainer::train_mf(&ds, tc, tc.seed)?;
            trainer::save_mf(&run.model, &path)?;
            println!("kind\tmf");
            println!("epochs\t{}", run.epochs_run);
            print_best_val(&run.val_recall_history, tc.eval_k);
        }
        ModelKind::Forest => {
            let forest = trainer::train_forest(&ds, &tags, tc, cfg.forest_size)?;
            trainer::save_forest(&forest, &path)?;
            println!("kind\tforest");
            println!("members\t{}", forest.members.len());
        }
    }
    println!("model\t{}", path.display());
    Ok(())
}

fn print_best_val(history: &[f64], eval_k: usize) {
    let best = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if best.is_finite() {
        println!("val_recall@{}\t{:.4}", eval_k, best);
    }
}

pub fn evaluate(cfg: &RunConfig, kind: ModelKind, k: Option<usize>) -> Result<()> {
    let (ds, _tags) = load_prepared(cfg)?;
    let model = trainer::load_model(&model_path(cfg, kind)?)?;
    let (users, items) = match &model {
        SavedModel::Single(t) => (t.affiliations.num_users(), t.affiliations.num_items()),
        SavedModel::Mf(m) => (m.num_users(), m.num_items()),
        SavedModel::Forest(f) => (f.num_users(), f.num_items()),
    };
    check_dims(users, items, &ds)?;
    let scorer: Box<dyn Fn(u32) -> Vec<f64>> = match model {
        SavedModel::Single(t) => Box::new(move |u| t.affiliations.scores_for(u)),
        SavedModel::Mf(m) => Box::new(move |u| m.scores_for(u)),
        SavedModel::Forest(f) => Box::new(move |u| f.scores_for(u)),
    };
    let ks = match k {
        Some(0) => {
            return Err(EcfError::Config("evaluation cutoff must be positive".into()));
        }
        Some(k) => vec![k],
        None => vec![5, 10, 20],
    };
    for k in ks {
        let eval = metrics::evaluate_ranking(&*scorer, &ds, Split::Test, k);
        log::info!("averaged over {} test users at k={}", eval.users, k);
        println!("Recall@{}\t{:.4}", k, eval.recall);
        println!("NDCG@{}\t{:.4}", k, eval.ndcg);
    }
    Ok(())
}

pub fn explain(
    cfg: &RunConfig,
    kind: ModelKind,
    user: &str,
    item: &str,
    json: bool,
) -> Result<()> {
    let (ds, tags) = load_prepared(cfg)?;
    let forest = load_ecf_forest(cfg, kind)?;
    check_dims(forest.num_users(), forest.num_items(), &ds)?;
    let u = resolve_user(&ds, user)?;
    let i = resolve_item(&ds, item)?;
    let expl = explanation_for(&forest, &tags, u, i)?;
    if json {
        println!("{}", export_jsonl(std::slice::from_ref(&expl))?);
    } else {
        println!("{}", render_template(&expl));
    }
    Ok(())
}

pub fn recommend(cfg: &RunConfig, kind: ModelKind, user: &str, k: usize) -> Result<()> {
    let (ds, _tags) = load_prepared(cfg)?;
    let forest = load_ecf_forest(cfg, kind)?;
    check_dims(forest.num_users(), forest.num_items(), &ds)?;
    let u = resolve_user(&ds, user)?;
    let recs = recommend_topk(&forest, &ds, u, k, true)?;
    for (rank, rec) in recs.iter().enumerate() {
        println!(
            "{}\t{}\t{:.4}",
            rank + 1,
            ds.item_ids()[rec.item as usize],
            rec.score
        );
    }
    Ok(())
}

pub fn clusters(cfg: &RunConfig, kind: ModelKind) -> Result<()> {
    let (ds, tags) = load_prepared(cfg)?;
    let forest = load_ecf_forest(cfg, kind)?;
    check_dims(forest.num_users(), forest.num_items(), &ds)?;
    let set = merged_cluster_set(&forest);
    print!("{}", baselines::export_clusters(&set, &tags, &ds)?);
    Ok(())
}

pub fn discover_tags(cfg: &RunConfig, kind: ModelKind, item: &str, top: usize) -> Result<()> {
    let (ds, tags) = load_prepared(cfg)?;
    let forest = load_ecf_forest(cfg, kind)?;
    check_dims(forest.num_users(), forest.num_items(), &ds)?;
    let i = resolve_item(&ds, item)?;
    for cand in tag_discovery(&forest, &tags, i, top)? {
        println!("{}\t{:.4}", cand.name, cand.score);
    }
    Ok(())
}

pub fn explainability(cfg: &RunConfig, kind: ModelKind) -> Result<()> {
    let (ds, tags) = load_prepared(cfg)?;
    let forest = load_ecf_forest(cfg, kind)?;
    check_dims(forest.num_users(), forest.num_items(), &ds)?;
    let mf = match trainer::load_model(&model_path(cfg, ModelKind::Mf)?)? {
        SavedModel::Mf(m) => m,
        _ => {
            return Err(EcfError::Config(
                "the explainability report needs the matrix-factorization reference; train it with --kind mf".into(),
            ));
        }
    };
    check_dims(mf.num_users(), mf.num_items(), &ds)?;
    let seed = cfg.train.seed;
    let build = ClusterBuildConfig {
        num_clusters: cfg.train.hp.num_clusters,
        size_threshold: cfg.size_threshold,
        seed,
        tags_per_cluster: cfg.train.hp.tags_per_cluster,
    };
    let ecf_set = merged_cluster_set(&forest);
    let tag_set = baselines::tag_cluster(&tags, &build)?;
    let kmeans_set = baselines::kmeans_cluster(&mf.v, &tags, &build)?;
    let mean = ecf_set.clusters.iter().map(|c| c.members.len()).sum::<usize>() as f64
        / ecf_set.clusters.len().max(1) as f64;
    let size = (mean.round() as usize).clamp(1, ds.num_items());
    let random_set = baselines::random_cluster(&tags, size, &build)?;
    let disc = metrics::train_discriminator(&tags, seed)?;
    let reports: Vec<ExplainabilityReport> = [&ecf_set, &tag_set, &kmeans_set, &random_set]
        .iter()
        .map(|set| metrics::explainability_report(set, &tags, &mf.v, &disc))
        .collect();
    let table = metrics::render_report_table(
        &[
            ("ECF", &reports[0]),
            ("TagCluster", &reports[1]),
            ("K-means", &reports[2]),
            ("Random", &reports[3]),
        ],
        &reports[3],
    );
    print!("{}", table);
    Ok(())
}

fn load_ecf_forest(cfg: &RunConfig, kind: ModelKind) -> Result<EcfForest> {
    match trainer::load_model(&model_path(cfg, kind)?)? {
        SavedModel::Single(t) => Ok(EcfForest { members: vec![t] }),
        SavedModel::Forest(f) => Ok(f),
        SavedModel::Mf(_) => Err(EcfError::Config(
            "matrix-factorization models carry no taste clusters; use a single or forest model".into(),
        )),
    }
}

/// Concatenates the cluster sets of every forest member, renumbering
/// cluster ids so the dump stays unambiguous.
fn merged_cluster_set(forest: &EcfForest) -> TasteClusterSet {
    let mut clusters = Vec::new();
    for member in &forest.members {
        for c in &member.clusters.clusters {
            clusters.push(TasteCluster {
                id: clusters.len() as u32,
                members: c.members.clone(),
                tags: c.tags.clone(),
            });
        }
    }
    TasteClusterSet {
        clusters,
        num_tags: forest.members[0].clusters.num_tags,
    }
}

fn check_dims(users: usize, items: usize, ds: &InteractionDataset) -> Result<()> {
    if users != ds.num_users() || items != ds.num_items() {
        return Err(EcfError::Config(format!(
            "model covers {} users and {} items but the dataset has {} and {}",
            users,
            items,
            ds.num_users(),
            ds.num_items()
        )));
    }
    Ok(())
}

fn resolve_user(ds: &InteractionDataset, id: &str) -> Result<u32> {
    ds.user_dense_index(id)
        .ok_or_else(|| EcfError::Data(format!("unknown user id {:?}", id)))
}

fn resolve_item(ds: &InteractionDataset, id: &str) -> Result<u32> {
    ds.item_dense_index(id)
        .ok_or_else(|| EcfError::Data(format!("unknown item id {:?}", id)))
}
