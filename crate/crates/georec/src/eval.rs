//! Top-k recommendation and ranking metrics.
//!
//! Evaluation snapshots the final fused embeddings once per region (with a
//! fixed, training-independent sampling plan), scores every candidate POI
//! with the plain affinity MLP, and reports Precision@k and NDCG@k with
//! binary, set-valued relevance. Users without train check-ins borrow the
//! mean of their friends' final embeddings.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::MobilityGraph;
use crate::ingest::{RegionDataset, SplitDataset};
use crate::model::{predict_plain, ForwardCtx, ModelConfig, SamplePlan, Tensor, Tensors};

/// Fixed plan key so evaluation sampling never depends on training progress.
pub const EVAL_PLAN_KEY: u64 = u64::MAX;

/// Parameters and embedding tables for scoring one region.
pub struct EvalState<'a> {
    pub cfg: ModelConfig,
    pub theta: &'a Tensors,
    pub emb_user: &'a Tensor,
    pub emb_poi: &'a Tensor,
}

/// Final fused embeddings for every entity in a region.
pub struct FinalEmbeds {
    pub user: Vec<Vec<f64>>,
    pub poi: Vec<Vec<f64>>,
    /// Users whose embedding was replaced by their friends' mean.
    pub cold_resolved: Vec<u32>,
}

/// Arithmetic mean of the friends' final embeddings.
pub fn cold_start_embed(user_rows: &[Vec<f64>], friends: &[u32]) -> Vec<f64> {
    assert!(!friends.is_empty());
    let dim = user_rows[friends[0] as usize].len();
    let mut out = vec![0.0; dim];
    for &f in friends {
        for (o, v) in out.iter_mut().zip(&user_rows[f as usize]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= friends.len() as f64);
    out
}

/// Run the forward pass for every user and POI and apply cold-start
/// substitution (zero train check-ins, ≥1 friend → friends' mean, computed
/// from the friends' own pipeline outputs).
pub fn final_embeddings(graph: &MobilityGraph, state: &EvalState, root_seed: u64) -> FinalEmbeds {
    let plan = SamplePlan::draw(graph, state.cfg.sample_size, root_seed, &[EVAL_PLAN_KEY]);
    let mut ctx = ForwardCtx::new(
        graph,
        &state.cfg,
        state.theta,
        state.emb_user,
        state.emb_poi,
        &plan,
    );
    let user: Vec<Vec<f64>> = (0..graph.n_users() as u32)
        .map(|u| {
            let n = ctx.user_final(u);
            ctx.tape.val(n).to_vec()
        })
        .collect();
    let poi: Vec<Vec<f64>> = (0..graph.n_pois() as u32)
        .map(|a| {
            let n = ctx.poi_final(a);
            ctx.tape.val(n).to_vec()
        })
        .collect();
    let mut fe = FinalEmbeds {
        user,
        poi,
        cold_resolved: Vec::new(),
    };
    let pipeline = fe.user.clone();
    for u in 0..graph.n_users() {
        let friends = &graph.social_adj[u];
        if graph.user_pois[u].is_empty() && !friends.is_empty() {
            fe.user[u] = cold_start_embed(&pipeline, friends);
            fe.cold_resolved.push(u as u32);
        }
    }
    fe
}

/// Descending score, ties broken by ascending POI index (dense indexes are
/// assigned in id order, so this is ascending poi_id).
pub fn rank_candidates(mut scored: Vec<(u32, f64)>) -> Vec<u32> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(p, _)| p).collect()
}

/// Candidate POIs for a user: the whole region minus (optionally) the user's
/// train check-ins; `transductive` further restricts to POIs seen in train.
fn candidates(graph: &MobilityGraph, u: u32, exclude_train: bool, transductive: bool) -> Vec<u32> {
    (0..graph.n_pois() as u32)
        .filter(|&p| !(exclude_train && graph.has_checked_in(u, p)))
        .filter(|&p| !transductive || !graph.poi_users[p as usize].is_empty())
        .collect()
}

fn score_candidates(
    state: &EvalState,
    fe: &FinalEmbeds,
    u: u32,
    cands: &[u32],
) -> Vec<(u32, f64)> {
    let uf = &fe.user[u as usize];
    cands
        .iter()
        .map(|&p| (p, predict_plain(state.theta, &state.cfg, uf, &fe.poi[p as usize])))
        .collect()
}

/// Full ranked recommendation list for one user (index form).
pub fn recommend_ranked(
    state: &EvalState,
    fe: &FinalEmbeds,
    graph: &MobilityGraph,
    u: u32,
    exclude_train: bool,
) -> Vec<u32> {
    let cands = candidates(graph, u, exclude_train, false);
    rank_candidates(score_candidates(state, fe, u, &cands))
}

/// Top-k recommendation by user id, with cold-start resolution already baked
/// into `fe`. Unknown users cannot be scored at all.
pub fn recommend_topk(
    state: &EvalState,
    fe: &FinalEmbeds,
    graph: &MobilityGraph,
    user_id: &str,
    k: usize,
    exclude_train: bool,
) -> Result<Vec<(String, f64)>> {
    let u = graph.user_index(user_id).ok_or_else(|| {
        Error::Data(format!(
            "cold start unresolvable: user {user_id:?} has no check-ins or social edges in this region"
        ))
    })?;
    let cands = candidates(graph, u, exclude_train, false);
    let scored = score_candidates(state, fe, u, &cands);
    let mut ranked: Vec<(u32, f64)> = scored.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(p, s)| (graph.pois[p as usize].poi_id.clone(), s))
        .collect())
}

pub fn precision_at_k(topk: &[u32], relevant: &BTreeSet<u32>, k: usize) -> f64 {
    assert!(k >= 1);
    let hits = topk
        .iter()
        .take(k)
        .filter(|p| relevant.contains(p))
        .count();
    hits as f64 / k as f64
}

pub fn ndcg_at_k(topk: &[u32], relevant: &BTreeSet<u32>, k: usize) -> f64 {
    assert!(k >= 1);
    let dcg: f64 = topk
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, p)| relevant.contains(p))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..k.min(relevant.len()))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KMetrics {
    pub k: usize,
    pub precision: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerUserMetrics {
    pub user_id: String,
    pub precision: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub region: String,
    pub split: String,
    pub n_users: usize,
    pub ks: Vec<KMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_user: Option<Vec<PerUserMetrics>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Validation,
    Test,
}

impl Which {
    fn name(self) -> &'static str {
        match self {
            Which::Validation => "validation",
            Which::Test => "test",
        }
    }
    fn checkins<'a>(self, split: &'a SplitDataset) -> &'a RegionDataset {
        match self {
            Which::Validation => &split.validation,
            Which::Test => &split.test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub which: Which,
    pub transductive: bool,
    pub per_user: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: vec![1, 5, 10],
            which: Which::Test,
            transductive: false,
            per_user: false,
        }
    }
}

/// Relevant POI sets (held-out check-ins, deduplicated) per user index.
pub fn relevant_sets(
    graph: &MobilityGraph,
    split: &SplitDataset,
    which: Which,
) -> Vec<BTreeSet<u32>> {
    let mut rel = vec![BTreeSet::new(); graph.n_users()];
    for ck in &which.checkins(split).checkins {
        if let (Some(u), Some(p)) = (graph.user_index(&ck.user_id), graph.poi_index(&ck.poi_id)) {
            rel[u as usize].insert(p);
        }
    }
    rel
}

/// Metric aggregation over any ranker. The ranker receives the user and the
/// candidate set and returns the candidates in ranked order. `only_users`
/// restricts evaluation to a subset (cold-start studies).
pub fn evaluate_ranked<F>(
    graph: &MobilityGraph,
    split: &SplitDataset,
    opts: &EvalOptions,
    only_users: Option<&BTreeSet<u32>>,
    mut ranker: F,
) -> Result<MetricsReport>
where
    F: FnMut(u32, Vec<u32>) -> Vec<u32>,
{
    let rel = relevant_sets(graph, split, opts.which);
    let mut sums_p = vec![0.0; opts.ks.len()];
    let mut sums_n = vec![0.0; opts.ks.len()];
    let mut n_users = 0usize;
    let mut per_user = opts.per_user.then(Vec::new);
    for u in 0..graph.n_users() as u32 {
        if let Some(subset) = only_users {
            if !subset.contains(&u) {
                continue;
            }
        }
        if rel[u as usize].is_empty() {
            continue;
        }
        if opts.transductive && graph.user_pois[u as usize].is_empty() {
            continue;
        }
        let cands = candidates(graph, u, true, opts.transductive);
        let ranked = ranker(u, cands);
        n_users += 1;
        let mut row_p = Vec::with_capacity(opts.ks.len());
        let mut row_n = Vec::with_capacity(opts.ks.len());
        for (i, &k) in opts.ks.iter().enumerate() {
            let p = precision_at_k(&ranked, &rel[u as usize], k);
            let n = ndcg_at_k(&ranked, &rel[u as usize], k);
            sums_p[i] += p;
            sums_n[i] += n;
            row_p.push(p);
            row_n.push(n);
        }
        if let Some(pu) = per_user.as_mut() {
            pu.push(PerUserMetrics {
                user_id: graph.users[u as usize].clone(),
                precision: row_p,
                ndcg: row_n,
            });
        }
    }
    if n_users == 0 {
        return Err(Error::Data(format!(
            "no evaluable users in the {} split",
            opts.which.name()
        )));
    }
    Ok(MetricsReport {
        region: graph.region_tag.to_string(),
        split: opts.which.name().to_string(),
        n_users,
        ks: opts
            .ks
            .iter()
            .enumerate()
            .map(|(i, &k)| KMetrics {
                k,
                precision: sums_p[i] / n_users as f64,
                ndcg: sums_n[i] / n_users as f64,
            })
            .collect(),
        per_user,
    })
}

/// Model-based evaluation over a region.
pub fn evaluate_model(
    graph: &MobilityGraph,
    split: &SplitDataset,
    state: &EvalState,
    root_seed: u64,
    opts: &EvalOptions,
    only_users: Option<&BTreeSet<u32>>,
) -> Result<(MetricsReport, FinalEmbeds)> {
    let fe = final_embeddings(graph, state, root_seed);
    let report = evaluate_ranked(graph, split, opts, only_users, |u, cands| {
        rank_candidates(score_candidates(state, &fe, u, &cands))
    })?;
    Ok((report, fe))
}

/// Train-frequency popularity baseline: candidates ordered by total train
/// check-in count (descending), ties by ascending POI index.
pub fn popularity_order(graph: &MobilityGraph) -> Vec<u32> {
    let counts: Vec<usize> = (0..graph.n_pois())
        .map(|p| {
            graph.poi_users[p]
                .iter()
                .map(|&u| {
                    graph.checkin_counts[u as usize]
                        .iter()
                        .find(|(pp, _)| *pp == p as u32)
                        .map(|(_, c)| *c as usize)
                        .unwrap_or(0)
                })
                .sum()
        })
        .collect();
    let mut order: Vec<u32> = (0..graph.n_pois() as u32).collect();
    order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    order
}

/// Popularity-baseline evaluation (same protocol as the model path).
pub fn evaluate_popularity(
    graph: &MobilityGraph,
    split: &SplitDataset,
    opts: &EvalOptions,
    only_users: Option<&BTreeSet<u32>>,
) -> Result<MetricsReport> {
    let order = popularity_order(graph);
    let mut rank_of = vec![0usize; graph.n_pois()];
    for (r, &p) in order.iter().enumerate() {
        rank_of[p as usize] = r;
    }
    evaluate_ranked(graph, split, opts, only_users, |_, mut cands| {
        cands.sort_by_key(|&p| rank_of[p as usize]);
        cands
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, KernelConfig};
    use crate::ingest::{temporal_split, Checkin, GeoPoint, Poi, RegionDataset, RegionTag};
    use crate::model::{init_embedding, init_theta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(items: &[u32]) -> BTreeSet<u32> {
        items.iter().copied().collect()
    }

    #[test]
    fn precision_hand_values() {
        assert!((precision_at_k(&[0, 1, 2], &rel(&[1]), 3) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision_at_k(&[0, 1], &rel(&[0, 1, 5]), 2), 1.0);
        assert_eq!(precision_at_k(&[0, 1, 2], &rel(&[7]), 3), 0.0);
    }

    #[test]
    fn ndcg_hand_values() {
        // Single relevant item at rank 1.
        assert_eq!(ndcg_at_k(&[3, 1, 2], &rel(&[3]), 3), 1.0);
        // Single relevant item at rank 3: 1/log2(4) = 0.5 exactly.
        assert_eq!(ndcg_at_k(&[0, 1, 9], &rel(&[9]), 3), 0.5);
        // Nothing relevant in the window.
        assert_eq!(ndcg_at_k(&[0, 1], &rel(&[9]), 2), 0.0);
        // Miss at cutoff 1.
        assert_eq!(ndcg_at_k(&[0, 9], &rel(&[9]), 1), 0.0);
        assert_eq!(precision_at_k(&[0, 9], &rel(&[9]), 1), 0.0);
    }

    #[test]
    fn ndcg_rewards_promoting_relevant_items() {
        let relevant = rel(&[4, 5]);
        let better = [4, 5, 0, 1];
        let worse = [4, 0, 5, 1];
        let worst = [0, 1, 4, 5];
        for k in 1..=4 {
            let a = ndcg_at_k(&better, &relevant, k);
            let b = ndcg_at_k(&worse, &relevant, k);
            let c = ndcg_at_k(&worst, &relevant, k);
            assert!(a >= b && b >= c, "k={k}: {a} {b} {c}");
        }
    }

    #[test]
    fn ranking_sorts_descending_with_ascending_id_ties() {
        assert_eq!(
            rank_candidates(vec![(0, 0.9), (1, 0.1), (2, 0.5)]),
            vec![0, 2, 1]
        );
        assert_eq!(
            rank_candidates(vec![(2, 0.5), (0, 0.5), (1, 0.5)]),
            vec![0, 1, 2]
        );
        // k > N just truncates to the full list downstream.
        assert_eq!(rank_candidates(vec![(1, 1.0)]), vec![1]);
    }

    #[test]
    fn cold_start_embed_is_friend_mean() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![9.0, 9.0]];
        assert_eq!(cold_start_embed(&rows, &[0]), vec![1.0, 0.0]);
        assert_eq!(cold_start_embed(&rows, &[0, 1]), vec![0.5, 0.5]);
        assert_eq!(cold_start_embed(&rows, &[1, 1]), vec![0.0, 1.0]);
    }

    /// 4 users / 4 POIs with enough history for a 70/10/20 split. Users
    /// u0–u2 rotate through distinct POIs so their held-out items never
    /// collide with their training history; u3 is active only early and has
    /// nothing held out.
    fn fixture() -> (MobilityGraph, crate::ingest::SplitDataset) {
        let pois: Vec<Poi> = (0..4)
            .map(|i| Poi {
                poi_id: format!("p{i}"),
                location: GeoPoint::new(0.01 * i as f64, 0.0).unwrap(),
                category: if i % 2 == 0 { "Cafe".into() } else { "Bar".into() },
            })
            .collect();
        let mut cks = Vec::new();
        let mut t = 0;
        for p in 0..2 {
            t += 1;
            cks.push(Checkin {
                user_id: "u3".into(),
                poi_id: format!("p{p}"),
                timestamp: t,
            });
        }
        for round in 0..4 {
            for u in 0..3 {
                t += 1;
                cks.push(Checkin {
                    user_id: format!("u{u}"),
                    poi_id: format!("p{}", (u + round) % 4),
                    timestamp: t,
                });
            }
        }
        let ds = RegionDataset::assemble(
            RegionTag::Target,
            cks,
            pois,
            vec![("u0".into(), "u1".into()), ("u1".into(), "u2".into())],
        )
        .unwrap();
        let split = temporal_split(&ds, (0.7, 0.1, 0.2)).unwrap();
        let graph = build_graph(&split.train, &KernelConfig::default()).unwrap();
        (graph, split)
    }

    #[test]
    fn oracle_ranker_scores_perfectly() {
        let (graph, split) = fixture();
        let rels = relevant_sets(&graph, &split, Which::Test);
        let opts = EvalOptions::default();
        let report = evaluate_ranked(&graph, &split, &opts, None, |u, cands| {
            // Put the user's relevant POIs first, everything else after.
            let (mut hits, rest): (Vec<u32>, Vec<u32>) = cands
                .into_iter()
                .partition(|p| rels[u as usize].contains(p));
            hits.extend(rest);
            hits
        })
        .unwrap();
        for km in &report.ks {
            assert_eq!(km.ndcg, 1.0, "ndcg@{}", km.k);
            if km.k == 1 {
                assert_eq!(km.precision, 1.0);
            }
        }
    }

    #[test]
    fn users_without_heldout_activity_are_excluded() {
        let (graph, split) = fixture();
        let rels = relevant_sets(&graph, &split, Which::Test);
        let with_activity = rels.iter().filter(|r| !r.is_empty()).count();
        let opts = EvalOptions::default();
        let report =
            evaluate_ranked(&graph, &split, &opts, None, |_, c| c).unwrap();
        assert_eq!(report.n_users, with_activity);
        assert!(report.n_users > 0);
    }

    #[test]
    fn empty_subset_is_fatal() {
        let (graph, split) = fixture();
        let opts = EvalOptions::default();
        let none: BTreeSet<u32> = BTreeSet::new();
        assert!(evaluate_ranked(&graph, &split, &opts, Some(&none), |_, c| c).is_err());
    }

    #[test]
    fn model_scoring_is_deterministic_and_in_range() {
        let (graph, split) = fixture();
        let cfg = ModelConfig {
            embed_dim: 4,
            mlp_hidden: 4,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = init_theta(&cfg, &mut rng);
        let eu = init_embedding("emb.user", graph.n_users(), 4, 1.0, &mut rng);
        let ep = init_embedding("emb.poi", graph.n_pois(), 4, 1.0, &mut rng);
        let state = EvalState { cfg, theta: &theta, emb_user: &eu, emb_poi: &ep };
        let opts = EvalOptions { per_user: true, ..EvalOptions::default() };
        let (r1, _) = evaluate_model(&graph, &split, &state, 7, &opts, None).unwrap();
        let (r2, _) = evaluate_model(&graph, &split, &state, 7, &opts, None).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
        for km in &r1.ks {
            assert!((0.0..=1.0).contains(&km.precision));
            assert!((0.0..=1.0).contains(&km.ndcg));
        }
    }

    #[test]
    fn popularity_orders_by_train_frequency() {
        let (graph, split) = fixture();
        let order = popularity_order(&graph);
        assert_eq!(order.len(), graph.n_pois());
        let count = |p: u32| -> usize {
            graph.poi_users[p as usize]
                .iter()
                .map(|&u| {
                    graph.checkin_counts[u as usize]
                        .iter()
                        .find(|(pp, _)| *pp == p)
                        .map(|(_, c)| *c as usize)
                        .unwrap_or(0)
                })
                .sum()
        };
        for w in order.windows(2) {
            assert!(count(w[0]) >= count(w[1]));
        }
        let opts = EvalOptions::default();
        assert!(evaluate_popularity(&graph, &split, &opts, None).is_ok());
    }

    #[test]
    fn transductive_restricts_candidates_to_train_pois() {
        let (graph, split) = fixture();
        let opts = EvalOptions { transductive: true, ..EvalOptions::default() };
        evaluate_ranked(&graph, &split, &opts, None, |_, cands| {
            for &p in &cands {
                assert!(!graph.poi_users[p as usize].is_empty());
            }
            cands
        })
        .unwrap();
    }
}
