//! Inference over a trained forest: ranked recommendations, explanation
//! paths, cluster recommendations, and tag discovery.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use log::warn;
use serde::Serialize;

use crate::data::{InteractionDataset, ItemTagMatrix};
use crate::error::{EcfError, Result};
use crate::metrics::rank_top_k;
use crate::model::{EcfForest, TasteCluster};

/// One ranked recommendation.
#[derive(Clone, Debug, PartialEq)]
pub struct Recommendation {
    pub item: u32,
    pub score: f64,
}

/// One (member, cluster) explanation path with its importance weight.
#[derive(Clone, Debug, Serialize)]
pub struct ExplanationPath {
    pub member: usize,
    pub cluster: u32,
    pub tags: Vec<String>,
    pub weight: f64,
}

/// All explanation paths behind one (user, item) score. The score is
/// the plain sum of the path weights.
#[derive(Clone, Debug, Serialize)]
pub struct Explanation {
    pub user: u32,
    pub item: u32,
    pub score: f64,
    pub paths: Vec<ExplanationPath>,
}

/// One recommended taste cluster with the affiliation that ranked it.
#[derive(Clone, Debug)]
pub struct RecommendedCluster {
    pub member: usize,
    pub weight: f64,
    pub cluster: TasteCluster,
}

/// One tag the item lacks but its clusters carry.
#[derive(Clone, Debug, PartialEq)]
pub struct TagCandidate {
    pub tag: u32,
    pub name: String,
    pub score: f64,
}

fn check_user(forest: &EcfForest, user: u32) -> Result<()> {
    if (user as usize) < forest.num_users() {
        Ok(())
    } else {
        Err(EcfError::Data(format!(
            "unknown user {} (forest covers {})",
            user,
            forest.num_users()
        )))
    }
}

fn check_item(forest: &EcfForest, item: u32) -> Result<()> {
    if (item as usize) < forest.num_items() {
        Ok(())
    } else {
        Err(EcfError::Data(format!(
            "unknown item {} (forest covers {})",
            item,
            forest.num_items()
        )))
    }
}

fn check_tags(forest: &EcfForest, tags: &ItemTagMatrix) -> Result<()> {
    if tags.num_items() == forest.num_items() {
        Ok(())
    } else {
        Err(EcfError::Config(format!(
            "tag matrix covers {} items, forest has {}",
            tags.num_items(),
            forest.num_items()
        )))
    }
}

/// Top-K items for one user, ranked by the summed forest score, ties
/// broken by item index. Train items are dropped when `exclude_train`.
pub fn recommend_topk(
    forest: &EcfForest,
    ds: &InteractionDataset,
    user: u32,
    k: usize,
    exclude_train: bool,
) -> Result<Vec<Recommendation>> {
    check_user(forest, user)?;
    if ds.num_items() != forest.num_items() || ds.num_users() != forest.num_users() {
        return Err(EcfError::Config(format!(
            "dataset is {}x{} but the forest was trained on {}x{}",
            ds.num_users(),
            ds.num_items(),
            forest.num_users(),
            forest.num_items()
        )));
    }
    if forest
        .members
        .iter()
        .all(|m| m.affiliations.user_rows[user as usize].is_empty())
    {
        warn!(
            "user {} has no cluster affiliations, nothing to recommend",
            user
        );
        return Ok(Vec::new());
    }
    let mut scores = forest.scores_for(user);
    if exclude_train {
        for &i in ds.user_train_items(user) {
            scores[i as usize] = f64::NEG_INFINITY;
        }
    }
    Ok(rank_top_k(&scores, k)
        .into_iter()
        .filter(|&i| scores[i as usize].is_finite())
        .map(|i| Recommendation {
            item: i,
            score: scores[i as usize],
        })
        .collect())
}

/// Explanation paths for one (user, item) pair: every cluster both
/// sides affiliate with, per member, weighted by the affiliation
/// product. An empty path list with score 0 means the pair has no
/// explainable support.
pub fn explain(
    forest: &EcfForest,
    tags: &ItemTagMatrix,
    user: u32,
    item: u32,
) -> Result<Explanation> {
    check_user(forest, user)?;
    check_item(forest, item)?;
    check_tags(forest, tags)?;
    let mut paths = Vec::new();
    let mut score = 0.0;
    for (mi, member) in forest.members.iter().enumerate() {
        let urow = &member.affiliations.user_rows[user as usize];
        let irow = &member.affiliations.item_rows[item as usize];
        let (mut a, mut b) = (0, 0);
        while a < urow.len() && b < irow.len() {
            match urow[a].0.cmp(&irow[b].0) {
                Ordering::Less => a += 1,
                Ordering::Greater => b += 1,
                Ordering::Equal => {
                    let c = urow[a].0;
                    let weight = urow[a].1 * irow[b].1;
                    let names = member.clusters.clusters[c as usize]
                        .tags
                        .iter()
                        .map(|&(t, _)| tags.tag_name(t).to_string())
                        .collect();
                    paths.push(ExplanationPath {
                        member: mi,
                        cluster: c,
                        tags: names,
                        weight,
                    });
                    score += weight;
                    a += 1;
                    b += 1;
                }
            }
        }
    }
    Ok(Explanation {
        user,
        item,
        score,
        paths,
    })
}

/// One line per path, heaviest first; deterministic given the
/// explanation.
pub fn render_template(expl: &Explanation) -> String {
    if expl.paths.is_empty() {
        return "No shared taste clusters explain this recommendation.".to_string();
    }
    let mut order: Vec<usize> = (0..expl.paths.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&expl.paths[a], &expl.paths[b]);
        pb.weight
            .total_cmp(&pa.weight)
            .then(pa.member.cmp(&pb.member))
            .then(pa.cluster.cmp(&pb.cluster))
    });
    order
        .iter()
        .map(|&i| {
            let p = &expl.paths[i];
            format!(
                "Recommended because you like {} (strength {:.4})",
                p.tags.join(", "),
                p.weight
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Top-K taste clusters for one user, ranked by affiliation weight
/// across all members; each result carries the full stored cluster.
pub fn recommend_clusters(
    forest: &EcfForest,
    user: u32,
    k: usize,
) -> Result<Vec<RecommendedCluster>> {
    check_user(forest, user)?;
    let mut all = Vec::new();
    for (mi, member) in forest.members.iter().enumerate() {
        for &(c, weight) in &member.affiliations.user_rows[user as usize] {
            all.push(RecommendedCluster {
                member: mi,
                weight,
                cluster: member.clusters.clusters[c as usize].clone(),
            });
        }
    }
    all.sort_by(|x, y| {
        y.weight
            .total_cmp(&x.weight)
            .then(x.member.cmp(&y.member))
            .then(x.cluster.id.cmp(&y.cluster.id))
    });
    all.truncate(k);
    Ok(all)
}

/// Tags the item's affiliated clusters carry but the item itself lacks,
/// scored by the affiliation-weighted cluster tag scores. Advisory
/// output for catalog curation.
pub fn tag_discovery(
    forest: &EcfForest,
    tags: &ItemTagMatrix,
    item: u32,
    top_q: usize,
) -> Result<Vec<TagCandidate>> {
    check_item(forest, item)?;
    check_tags(forest, tags)?;
    let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
    for member in &forest.members {
        for &(c, x) in &member.affiliations.item_rows[item as usize] {
            for &(t, beta) in &member.clusters.clusters[c as usize].tags {
                if !tags.item_has_tag(item, t) {
                    *scores.entry(t).or_insert(0.0) += x * beta;
                }
            }
        }
    }
    let mut out: Vec<TagCandidate> = scores
        .into_iter()
        .map(|(t, s)| TagCandidate {
            tag: t,
            name: tags.tag_name(t).to_string(),
            score: s,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.tag.cmp(&b.tag)));
    out.truncate(top_q);
    Ok(out)
}

/// One JSON record per explanation, newline separated.
pub fn export_jsonl(expls: &[Explanation]) -> Result<String> {
    let lines = expls
        .iter()
        .map(|e| {
            serde_json::to_string(e)
                .map_err(|err| EcfError::Data(format!("explanation export: {}", err)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(lines.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::{
        EcfHyperParams, EcfModel, SparseAffiliations, TasteClusterSet, TrainedEcf,
    };
    use crate::tensor::Tensor;
    use crate::trainer::{train_forest, TagDistScope, TrainConfig};

    fn fixture_tags(num_items: usize) -> ItemTagMatrix {
        // Tag ids after sorting: ambient 0, jazz 1, piano 2, rock 3.
        let names = ["ambient", "jazz", "piano", "rock"];
        let raw = (0..num_items)
            .map(|i| vec![names[i % names.len()].to_string()])
            .collect();
        ItemTagMatrix::from_raw(raw, 0)
    }

    fn hand_member(
        num_users: usize,
        num_items: usize,
        z: usize,
        user_rows: Vec<Vec<(u32, f64)>>,
        item_rows: Vec<Vec<(u32, f64)>>,
        cluster_tags: Vec<Vec<(u32, f64)>>,
    ) -> TrainedEcf {
        let hp = EcfHyperParams {
            num_clusters: z,
            embed_dim: 2,
            item_top_m: 1,
            user_top_n: 1,
            tags_per_cluster: 1,
            ..EcfHyperParams::default()
        };
        let clusters = TasteClusterSet {
            clusters: (0..z)
                .map(|c| TasteCluster {
                    id: c as u32,
                    members: Vec::new(),
                    tags: cluster_tags[c].clone(),
                })
                .collect(),
            num_tags: 4,
        };
        TrainedEcf {
            model: EcfModel {
                hp,
                u: Tensor::zeros(num_users, 2),
                v: Tensor::zeros(num_items, 2),
                h: Tensor::zeros(z, 2),
            },
            seed: 0,
            affiliations: SparseAffiliations {
                item_rows,
                user_rows,
            },
            clusters,
        }
    }

    fn one_user_dataset(num_items: usize) -> InteractionDataset {
        let raw = (0..num_items)
            .map(|i| ("u0".to_string(), format!("i{}", i)))
            .collect();
        InteractionDataset::from_raw(vec![(raw, Split::Train)]).unwrap()
    }

    fn block_dataset() -> InteractionDataset {
        let mut raw = Vec::new();
        for u in 0..12u32 {
            let base = if u < 6 { 0 } else { 4 };
            for i in base..base + 4 {
                raw.push((format!("u{:02}", u), format!("i{}", i)));
            }
        }
        let full = InteractionDataset::from_raw(vec![(raw, Split::Train)]).unwrap();
        full.split((0.75, 0.25, 0.0), 17).unwrap()
    }

    fn trained_forest() -> (InteractionDataset, ItemTagMatrix, EcfForest) {
        let ds = block_dataset();
        let tags = fixture_tags(8);
        let cfg = TrainConfig {
            hp: EcfHyperParams {
                num_clusters: 4,
                embed_dim: 8,
                item_top_m: 2,
                user_top_n: 2,
                tags_per_cluster: 1,
                ..EcfHyperParams::default()
            },
            epochs_max: 6,
            batch_size: 64,
            patience: 6,
            eval_k: 2,
            learning_rate: 0.05,
            seed: 1,
            tag_dist_scope: TagDistScope::Full,
            activated_only: true,
        };
        let forest = train_forest(&ds, &tags, &cfg, 2).unwrap();
        (ds, tags, forest)
    }

    #[test]
    fn single_shared_cluster_scores_the_product() {
        let member = hand_member(
            1,
            3,
            2,
            vec![vec![(0, 0.5)]],
            vec![vec![(0, 0.6)], vec![], vec![]],
            vec![vec![(1, 1.0)], vec![(3, 1.0)]],
        );
        let forest = EcfForest {
            members: vec![member],
        };
        let ds = one_user_dataset(3);
        let recs = recommend_topk(&forest, &ds, 0, 3, false).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].item, 0);
        assert_eq!(recs[0].score, 0.5 * 0.6);
        assert_eq!(recs[1].score, 0.0);
        assert_eq!(recs[2].score, 0.0);
        // Zero-score ties fall back to item order.
        assert_eq!((recs[1].item, recs[2].item), (1, 2));
    }

    #[test]
    fn empty_affiliation_user_gets_no_recommendations() {
        let member = hand_member(
            1,
            2,
            1,
            vec![vec![]],
            vec![vec![(0, 0.9)], vec![]],
            vec![vec![(0, 1.0)]],
        );
        let forest = EcfForest {
            members: vec![member],
        };
        let ds = one_user_dataset(2);
        assert!(recommend_topk(&forest, &ds, 0, 2, false).unwrap().is_empty());
    }

    #[test]
    fn unknown_users_and_items_are_errors() {
        let member = hand_member(
            1,
            2,
            1,
            vec![vec![(0, 0.5)]],
            vec![vec![(0, 0.9)], vec![]],
            vec![vec![(0, 1.0)]],
        );
        let forest = EcfForest {
            members: vec![member],
        };
        let ds = one_user_dataset(2);
        let tags = fixture_tags(2);
        assert!(recommend_topk(&forest, &ds, 5, 2, false).is_err());
        assert!(explain(&forest, &tags, 5, 0).is_err());
        assert!(explain(&forest, &tags, 0, 9).is_err());
        assert!(recommend_clusters(&forest, 5, 1).is_err());
        assert!(tag_discovery(&forest, &tags, 9, 1).is_err());
    }

    #[test]
    fn ranking_matches_a_dense_score_oracle() {
        let (ds, _tags, forest) = trained_forest();
        for user in 0..ds.num_users() as u32 {
            for exclude in [false, true] {
                let recs = recommend_topk(&forest, &ds, user, ds.num_items(), exclude).unwrap();
                let mut scores = forest.scores_for(user);
                if exclude {
                    for &i in ds.user_train_items(user) {
                        scores[i as usize] = f64::NEG_INFINITY;
                    }
                }
                let mut order: Vec<u32> = (0..scores.len() as u32)
                    .filter(|&i| scores[i as usize].is_finite())
                    .collect();
                order.sort_by(|&a, &b| {
                    scores[b as usize]
                        .total_cmp(&scores[a as usize])
                        .then(a.cmp(&b))
                });
                let got: Vec<u32> = recs.iter().map(|r| r.item).collect();
                assert_eq!(got, order, "user {} exclude {}", user, exclude);
                for r in &recs {
                    assert_eq!(r.score, scores[r.item as usize]);
                }
            }
        }
    }

    #[test]
    fn shared_clusters_become_explanation_paths() {
        let member = hand_member(
            1,
            4,
            5,
            vec![vec![(1, 0.7), (4, 0.2)]],
            vec![
                vec![(1, 0.5), (2, 0.9), (4, 0.4)],
                vec![],
                vec![],
                vec![],
            ],
            vec![
                vec![(0, 1.0)],
                vec![(1, 1.2), (2, 0.9)],
                vec![(3, 1.0)],
                vec![(3, 0.5)],
                vec![(0, 0.8)],
            ],
        );
        let forest = EcfForest {
            members: vec![member],
        };
        let tags = fixture_tags(4);
        let expl = explain(&forest, &tags, 0, 0).unwrap();
        assert_eq!(expl.paths.len(), 2);
        assert_eq!(expl.paths[0].cluster, 1);
        assert_eq!(expl.paths[0].weight, 0.7 * 0.5);
        assert_eq!(expl.paths[0].tags, vec!["jazz", "piano"]);
        assert_eq!(expl.paths[1].cluster, 4);
        assert_eq!(expl.paths[1].weight, 0.2 * 0.4);
        assert_eq!(expl.paths[1].tags, vec!["ambient"]);
        let total: f64 = expl.paths.iter().map(|p| p.weight).sum();
        assert_eq!(expl.score, total);
        assert!((expl.score - forest.predict(0, 0)).abs() <= 1e-12);
    }

    #[test]
    fn disjoint_affiliations_explain_nothing() {
        let member = hand_member(
            1,
            4,
            4,
            vec![vec![(0, 0.9)]],
            vec![vec![(2, 0.8), (3, 0.4)], vec![], vec![], vec![]],
            vec![
                vec![(0, 1.0)],
                vec![(1, 1.0)],
                vec![(2, 1.0)],
                vec![(3, 1.0)],
            ],
        );
        let forest = EcfForest {
            members: vec![member],
        };
        let tags = fixture_tags(4);
        let expl = explain(&forest, &tags, 0, 0).unwrap();
        assert!(expl.paths.is_empty());
        assert_eq!(expl.score, 0.0);
        assert_eq!(
            render_template(&expl),
            "No shared taste clusters explain this recommendation."
        );
    }

    #[test]
    fn explanation_scores_cohere_with_forest_predictions() {
        let (ds, tags, forest) = trained_forest();
        for user in 0..ds.num_users() as u32 {
            for item in 0..ds.num_items() as u32 {
                let expl = explain(&forest, &tags, user, item).unwrap();
                let total: f64 = expl.paths.iter().map(|p| p.weight).sum();
                assert_eq!(expl.score, total);
                assert!(
                    (expl.score - forest.predict(user, item)).abs() <= 1e-12,
                    "user {} item {}: {} vs {}",
                    user,
                    item,
                    expl.score,
                    forest.predict(user, item)
                );
                for p in &expl.paths {
                    assert!(p.weight > 0.0);
                }
            }
        }
    }

    #[test]
    fn member_order_does_not_change_rankings() {
        let (ds, _tags, forest) = trained_forest();
        let mut members = forest.members.clone();
        members.reverse();
        let reversed = EcfForest { members };
        for user in 0..ds.num_users() as u32 {
            let a = recommend_topk(&forest, &ds, user, 5, true).unwrap();
            let b = recommend_topk(&reversed, &ds, user, 5, true).unwrap();
            let items_a: Vec<u32> = a.iter().map(|r| r.item).collect();
            let items_b: Vec<u32> = b.iter().map(|r| r.item).collect();
            assert_eq!(items_a, items_b, "user {}", user);
            for (x, y) in a.iter().zip(&b) {
                assert!((x.score - y.score).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rendered_template_matches_the_golden_file() {
        let expl = Explanation {
            user: 0,
            item: 0,
            score: 0.43,
            paths: vec![
                ExplanationPath {
                    member: 0,
                    cluster: 4,
                    tags: vec!["ambient".to_string()],
                    weight: 0.08,
                },
                ExplanationPath {
                    member: 0,
                    cluster: 1,
                    tags: vec!["jazz".to_string(), "piano".to_string()],
                    weight: 0.35,
                },
            ],
        };
        assert_eq!(
            render_template(&expl),
            include_str!("../tests/golden/explanation.txt")
        );
    }

    #[test]
    fn cluster_recommendations_sort_by_affiliation() {
        let member = hand_member(
            1,
            1,
            5,
            vec![vec![(0, 0.3), (2, 0.9), (4, 0.5)]],
            vec![vec![]],
            vec![
                vec![(0, 1.0)],
                vec![(1, 1.0)],
                vec![(2, 1.0)],
                vec![(3, 1.0)],
                vec![(0, 0.5)],
            ],
        );
        let forest = EcfForest {
            members: vec![member],
        };
        let top = recommend_clusters(&forest, 0, 2).unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!((top[0].cluster.id, top[0].weight), (2, 0.9));
        assert_eq!((top[1].cluster.id, top[1].weight), (4, 0.5));
        let single = recommend_clusters(&forest, 0, 1).unwrap();
        assert_eq!(single[0].cluster.id, 2);

        // With every cluster stored, the ranking is the dense sort of
        // the user's affiliation weights.
        let (ds, _tags, forest) = {
            let ds = block_dataset();
            let tags = fixture_tags(8);
            let cfg = TrainConfig {
                hp: EcfHyperParams {
                    num_clusters: 4,
                    embed_dim: 8,
                    item_top_m: 2,
                    user_top_n: 4,
                    tags_per_cluster: 1,
                    ..EcfHyperParams::default()
                },
                epochs_max: 4,
                batch_size: 64,
                patience: 4,
                eval_k: 2,
                learning_rate: 0.05,
                seed: 1,
                tag_dist_scope: TagDistScope::Full,
                activated_only: true,
            };
            let forest = train_forest(&ds, &tags, &cfg, 1).unwrap();
            (ds, tags, forest)
        };
        for user in 0..ds.num_users() as u32 {
            let got = recommend_clusters(&forest, user, 4).unwrap();
            let mut expect = forest.members[0].affiliations.user_rows[user as usize].clone();
            expect.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let got_pairs: Vec<(u32, f64)> =
                got.iter().map(|r| (r.cluster.id, r.weight)).collect();
            assert_eq!(got_pairs, expect, "user {}", user);
        }
    }

    #[test]
    fn tag_discovery_ranks_missing_cluster_tags() {
        // Item 0 is tagged "ambient" (tag 0); its clusters carry jazz
        // and piano with known scores.
        let member = hand_member(
            1,
            4,
            2,
            vec![vec![]],
            vec![vec![(0, 0.8), (1, 0.5)], vec![], vec![], vec![]],
            vec![vec![(0, 2.0), (2, 1.5)], vec![(1, 1.0)]],
        );
        let forest = EcfForest {
            members: vec![member],
        };
        let tags = fixture_tags(4);
        let got = tag_discovery(&forest, &tags, 0, 5).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].name, "piano");
        assert_eq!(got[0].score, 0.8 * 1.5);
        assert_eq!(got[1].name, "jazz");
        assert_eq!(got[1].score, 0.5 * 1.0);
        // Tag 0 is excluded: the item already carries it.
        assert!(got.iter().all(|c| c.tag != 0));
        let capped = tag_discovery(&forest, &tags, 0, 1).unwrap();
        assert_eq!(capped.len(), 1);
        assert_eq!(capped[0].name, "piano");

        // Two members accumulate scores for the same tag.
        let m1 = hand_member(
            1,
            4,
            1,
            vec![vec![]],
            vec![vec![(0, 0.5)], vec![], vec![], vec![]],
            vec![vec![(2, 1.0)]],
        );
        let m2 = hand_member(
            1,
            4,
            1,
            vec![vec![]],
            vec![vec![(0, 0.25)], vec![], vec![], vec![]],
            vec![vec![(2, 2.0)]],
        );
        let forest = EcfForest {
            members: vec![m1, m2],
        };
        let got = tag_discovery(&forest, &tags, 0, 5).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].score, 0.5 + 0.5);

        // An item already carrying every cluster tag yields nothing.
        let all_tagged = hand_member(
            1,
            4,
            1,
            vec![vec![]],
            vec![vec![(0, 0.9)], vec![], vec![], vec![]],
            vec![vec![(0, 1.0)]],
        );
        let forest = EcfForest {
            members: vec![all_tagged],
        };
        assert!(tag_discovery(&forest, &tags, 0, 5).unwrap().is_empty());
    }

    #[test]
    fn explanations_export_as_json_records() {
        let expls = vec![
            Explanation {
                user: 3,
                item: 7,
                score: 0.43,
                paths: vec![ExplanationPath {
                    member: 1,
                    cluster: 4,
                    tags: vec!["jazz".to_string()],
                    weight: 0.43,
                }],
            },
            Explanation {
                user: 0,
                item: 1,
                score: 0.0,
                paths: vec![],
            },
        ];
        let out = export_jsonl(&expls).unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["user"], 3);
        assert_eq!(first["item"], 7);
        assert_eq!(first["score"], 0.43);
        assert_eq!(first["paths"][0]["member"], 1);
        assert_eq!(first["paths"][0]["cluster"], 4);
        assert_eq!(first["paths"][0]["tags"][0], "jazz");
        assert_eq!(first["paths"][0]["weight"], 0.43);
        let second: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(second["paths"].as_array().unwrap().len(), 0);
    }
}
