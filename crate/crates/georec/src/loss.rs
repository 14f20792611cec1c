//! Training losses and batch construction.
//!
//! Two loss families drive training:
//! - the prediction loss: summed squared error between predicted and observed
//!   normalized check-in frequency over a mini-batch, plus an L1 penalty on
//!   the shared parameters (embedding tables are not penalized);
//! - social/spatial structure losses: for every directed neighbor pair, the
//!   final embeddings of connected entities should score higher (by inner
//!   product) than a uniformly drawn non-neighbor, via
//!   softplus(−v̂_pos) + softplus(v̂_neg).
//!
//! All sampling here is driven by a caller-provided RNG so batches, negative
//! draws, and anchor subsets are frozen per step and reproducible.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::MobilityGraph;
use crate::model::ForwardCtx;
use crate::tape::NodeId;

/// One prediction term: (user index, POI index, observed normalized rating).
pub type RatingTerm = (u32, u32, f64);

/// Given the sorted list of excluded values inside `0..total`, return the
/// `k`-th (0-based) value of the complement.
fn nth_excluded(excluded: &[u32], total: u32, mut k: u32) -> u32 {
    let mut base = 0u32;
    for &e in excluded {
        let gap = e - base;
        if k < gap {
            return base + k;
        }
        k -= gap;
        base = e + 1;
    }
    debug_assert!(base + k < total);
    base + k
}

/// Sample a prediction mini-batch: up to `batch_size` positive pairs drawn
/// without replacement from the train interactions, each paired with one
/// uniformly drawn POI the user never visited (rating 0). Users who visited
/// every POI contribute no negative.
pub fn draw_rating_batch(
    graph: &MobilityGraph,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Vec<RatingTerm> {
    let positives = &graph.positive_pairs;
    if positives.is_empty() {
        return Vec::new();
    }
    let chosen: Vec<usize> = if positives.len() <= batch_size {
        (0..positives.len()).collect()
    } else {
        let mut idx = rand::seq::index::sample(rng, positives.len(), batch_size).into_vec();
        idx.sort_unstable();
        idx
    };
    let n_pois = graph.n_pois() as u32;
    let mut batch = Vec::with_capacity(chosen.len() * 2);
    for &c in &chosen {
        batch.push(positives[c]);
    }
    for &c in &chosen {
        let (u, _, _) = positives[c];
        let visited = &graph.user_pois[u as usize];
        let free = n_pois - visited.len() as u32;
        if free == 0 {
            continue;
        }
        let k = rng.gen_range(0..free);
        batch.push((u, nth_excluded(visited, n_pois, k), 0.0));
    }
    batch
}

/// Build the prediction loss node: Σ (r̂ − r)² + λ·‖Θ‖₁. Fails fast if any
/// prediction is non-finite.
pub fn prediction_loss(
    ctx: &mut ForwardCtx,
    batch: &[RatingTerm],
    lambda: f64,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Internal("empty prediction batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for &(u, a, r) in batch {
        let rhat = ctx.predict(u, a);
        let v = ctx.tape.val(rhat)[0];
        if !v.is_finite() {
            return Err(Error::Internal(format!(
                "non-finite prediction ({v}) for user index {u}, poi index {a}"
            )));
        }
        let target = ctx.tape.scalar(r);
        let d = ctx.tape.sub(rhat, target);
        terms.push(ctx.tape.dot(d, d));
    }
    let se = ctx.tape.sum_scalars(&terms);
    let l1 = ctx.theta_l1();
    let reg = ctx.tape.scale(l1, lambda);
    Ok(ctx.tape.add(se, reg))
}

/// Which entity graph a structure loss ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityKind {
    User,
    Poi,
}

/// Directed (anchor, neighbor, negative) triples for one structure-loss
/// evaluation, re-drawn each epoch.
#[derive(Debug, Clone, Default)]
pub struct SocialBatch {
    pub triples: Vec<(u32, u32, u32)>,
    /// Anchors skipped because every other entity is already a neighbor.
    pub skipped: usize,
}

/// Enumerate directed neighbor pairs in ascending anchor order, optionally
/// subsample to `cap` pairs, and draw one uniform non-neighbor negative per
/// surviving pair.
pub fn draw_social_batch(
    graph: &MobilityGraph,
    kind: EntityKind,
    cap: usize,
    rng: &mut impl Rng,
) -> SocialBatch {
    let n = match kind {
        EntityKind::User => graph.n_users() as u32,
        EntityKind::Poi => graph.n_pois() as u32,
    };
    let neighbors = |i: u32| -> Vec<u32> {
        match kind {
            EntityKind::User => graph.social_adj[i as usize].clone(),
            EntityKind::Poi => graph.spatial_adj[i as usize]
                .iter()
                .map(|&(j, _)| j)
                .collect(),
        }
    };
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in neighbors(i) {
            pairs.push((i, j));
        }
    }
    if cap > 0 && pairs.len() > cap {
        let mut idx = rand::seq::index::sample(rng, pairs.len(), cap).into_vec();
        idx.sort_unstable();
        pairs = idx.into_iter().map(|k| pairs[k]).collect();
    }
    let mut batch = SocialBatch::default();
    for (i, j) in pairs {
        // Excluded set for the negative: the anchor itself plus all its
        // neighbors.
        let mut excluded = neighbors(i);
        match excluded.binary_search(&i) {
            Ok(_) => {}
            Err(pos) => excluded.insert(pos, i),
        }
        let free = n - excluded.len() as u32;
        if free == 0 {
            batch.skipped += 1;
            continue;
        }
        let k = rng.gen_range(0..free);
        batch.triples.push((i, j, nth_excluded(&excluded, n, k)));
    }
    if batch.skipped > 0 {
        log::warn!(
            "structure loss ({kind:?}): skipped {} fully connected anchor pair(s)",
            batch.skipped
        );
    }
    batch
}

/// Build the structure loss node Σ softplus(−v̂_pos) + softplus(v̂_neg) where
/// v̂ is the inner product of *final* (fused) embeddings.
pub fn social_loss(ctx: &mut ForwardCtx, kind: EntityKind, batch: &SocialBatch) -> NodeId {
    let mut terms = Vec::with_capacity(batch.triples.len() * 2);
    for &(anchor, pos, neg) in &batch.triples {
        let (ea, ep, en) = match kind {
            EntityKind::User => (
                ctx.user_final(anchor),
                ctx.user_final(pos),
                ctx.user_final(neg),
            ),
            EntityKind::Poi => (
                ctx.poi_final(anchor),
                ctx.poi_final(pos),
                ctx.poi_final(neg),
            ),
        };
        let v_pos = ctx.tape.dot(ea, ep);
        let v_neg = ctx.tape.dot(ea, en);
        let neg_v_pos = ctx.tape.scale(v_pos, -1.0);
        terms.push(ctx.tape.softplus(neg_v_pos));
        terms.push(ctx.tape.softplus(v_neg));
    }
    ctx.tape.sum_scalars(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, KernelConfig};
    use crate::ingest::{Checkin, GeoPoint, Poi, RegionDataset, RegionTag};
    use crate::model::{init_embedding, init_theta, ForwardCtx, ModelConfig, SamplePlan};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 2,
            mlp_hidden: 4,
            ..ModelConfig::default()
        }
    }

    /// Three users in a social path a–b–c, three nearby POIs.
    fn fixture() -> MobilityGraph {
        let pois = vec![
            Poi { poi_id: "p1".into(), location: GeoPoint::new(0.0, 0.0).unwrap(), category: "Cafe".into() },
            Poi { poi_id: "p2".into(), location: GeoPoint::new(0.01, 0.0).unwrap(), category: "Bar".into() },
            Poi { poi_id: "p3".into(), location: GeoPoint::new(0.02, 0.0).unwrap(), category: "Cafe".into() },
        ];
        let cks = vec![
            Checkin { user_id: "a".into(), poi_id: "p1".into(), timestamp: 1 },
            Checkin { user_id: "a".into(), poi_id: "p2".into(), timestamp: 2 },
            Checkin { user_id: "b".into(), poi_id: "p2".into(), timestamp: 3 },
            Checkin { user_id: "b".into(), poi_id: "p3".into(), timestamp: 4 },
            Checkin { user_id: "c".into(), poi_id: "p1".into(), timestamp: 5 },
        ];
        let ds = RegionDataset::assemble(
            RegionTag::Source,
            cks,
            pois,
            vec![("a".into(), "b".into()), ("b".into(), "c".into())],
        )
        .unwrap();
        build_graph(&ds, &KernelConfig::default()).unwrap()
    }

    #[test]
    fn nth_excluded_walks_complement() {
        // total 6, excluded {1, 3}: complement is [0, 2, 4, 5].
        assert_eq!(nth_excluded(&[1, 3], 6, 0), 0);
        assert_eq!(nth_excluded(&[1, 3], 6, 1), 2);
        assert_eq!(nth_excluded(&[1, 3], 6, 2), 4);
        assert_eq!(nth_excluded(&[1, 3], 6, 3), 5);
        assert_eq!(nth_excluded(&[], 4, 2), 2);
        assert_eq!(nth_excluded(&[0, 1], 3, 0), 2);
    }

    #[test]
    fn rating_batch_negatives_avoid_visited_pois() {
        let graph = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let batch = draw_rating_batch(&graph, 4, &mut rng);
            let n_pos = batch.iter().filter(|t| t.2 > 0.0).count();
            assert_eq!(n_pos, 4.min(graph.positive_pairs.len()));
            for &(u, p, r) in &batch {
                if r == 0.0 {
                    assert!(!graph.has_checked_in(u, p), "user {u} visited poi {p}");
                } else {
                    assert!(graph.has_checked_in(u, p));
                }
            }
        }
    }

    #[test]
    fn zeroed_parameters_give_two_ln_two_per_social_pair() {
        let graph = fixture();
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut theta = init_theta(&c, &mut rng);
        for t in &mut theta.list {
            t.data.fill(0.0);
        }
        let emb_u = init_embedding("emb.user", 3, 2, 1.0, &mut rng);
        let emb_p = init_embedding("emb.poi", 3, 2, 1.0, &mut rng);
        let plan = SamplePlan::draw(&graph, c.sample_size, 7, &[0]);
        let mut ctx = ForwardCtx::new(&graph, &c, &theta, &emb_u, &emb_p, &plan);
        let batch = SocialBatch {
            triples: vec![(0, 1, 2)],
            skipped: 0,
        };
        // All-zero parameters force U_f = 0, so both scores are 0 and each
        // pair contributes softplus(0) + softplus(0) = 2 ln 2.
        let loss = social_loss(&mut ctx, EntityKind::User, &batch);
        let expect = 2.0 * std::f64::consts::LN_2;
        assert!((ctx.tape.val(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn social_negatives_are_non_neighbors() {
        let graph = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let batch = draw_social_batch(&graph, EntityKind::User, 0, &mut rng);
            // Path a-b-c: directed pairs (a,b), (b,a), (b,c), (c,b).
            assert_eq!(batch.triples.len() + batch.skipped, 4);
            // b is connected to everyone, so both b-anchored pairs skip.
            assert_eq!(batch.skipped, 2);
            for &(i, j, neg) in &batch.triples {
                assert!(graph.social_adj[i as usize].binary_search(&j).is_ok());
                assert!(graph.social_adj[i as usize].binary_search(&neg).is_err());
                assert_ne!(neg, i);
            }
        }
    }

    #[test]
    fn anchor_cap_subsamples_pairs() {
        let graph = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = draw_social_batch(&graph, EntityKind::Poi, 2, &mut rng);
        assert!(batch.triples.len() + batch.skipped == 2);
    }

    #[test]
    fn prediction_loss_includes_l1_term() {
        let graph = fixture();
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = init_theta(&c, &mut rng);
        let emb_u = init_embedding("emb.user", 3, 2, 1.0, &mut rng);
        let emb_p = init_embedding("emb.poi", 3, 2, 1.0, &mut rng);
        let plan = SamplePlan::draw(&graph, c.sample_size, 7, &[0]);
        let l1: f64 = theta.list.iter().flat_map(|t| &t.data).map(|v| v.abs()).sum();

        let batch = vec![(0u32, 0u32, 1.0f64)];
        let mut ctx0 = ForwardCtx::new(&graph, &c, &theta, &emb_u, &emb_p, &plan);
        let loss0 = prediction_loss(&mut ctx0, &batch, 0.0).unwrap();
        let mut ctx1 = ForwardCtx::new(&graph, &c, &theta, &emb_u, &emb_p, &plan);
        let loss1 = prediction_loss(&mut ctx1, &batch, 0.5).unwrap();
        let v0 = ctx0.tape.val(loss0)[0];
        let v1 = ctx1.tape.val(loss1)[0];
        assert!((v1 - v0 - 0.5 * l1).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_difference_on_sample_parameters() {
        let graph = fixture();
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = init_theta(&c, &mut rng);
        let emb_u = init_embedding("emb.user", 3, 2, 1.0, &mut rng);
        let emb_p = init_embedding("emb.poi", 3, 2, 1.0, &mut rng);
        let plan = SamplePlan::draw(&graph, c.sample_size, 7, &[0]);
        let batch = vec![(0u32, 0u32, 1.0f64), (1, 2, 0.5), (2, 1, 0.0)];
        let social = SocialBatch { triples: vec![(0, 1, 2), (1, 0, 2)], skipped: 0 };

        let eval = |th: &Tensors, eu: &Tensor, ep: &Tensor| -> f64 {
            let mut ctx = ForwardCtx::new(&graph, &c, th, eu, ep, &plan);
            let lp = prediction_loss(&mut ctx, &batch, 0.01).unwrap();
            let ls = social_loss(&mut ctx, EntityKind::User, &social);
            let tot = ctx.tape.add(lp, ls);
            ctx.tape.val(tot)[0]
        };
        use crate::model::{Tensor, Tensors};

        let mut ctx = ForwardCtx::new(&graph, &c, &theta, &emb_u, &emb_p, &plan);
        let lp = prediction_loss(&mut ctx, &batch, 0.01).unwrap();
        let ls = social_loss(&mut ctx, EntityKind::User, &social);
        let tot = ctx.tape.add(lp, ls);
        let (gt, gu, _gp) = ctx.gradients(tot, &theta);

        let h = 1e-6;
        // Probe a few shared parameters (skipping entries too close to the
        // L1 kink) and one embedding entry.
        let mut checked = 0;
        for (ti, t) in theta.list.iter().enumerate() {
            for ei in (0..t.data.len()).step_by(t.data.len().max(1) / 2 + 1) {
                if t.data[ei].abs() < 10.0 * h {
                    continue;
                }
                let mut plus = theta.clone();
                plus.list[ti].data[ei] += h;
                let mut minus = theta.clone();
                minus.list[ti].data[ei] -= h;
                let fd = (eval(&plus, &emb_u, &emb_p) - eval(&minus, &emb_u, &emb_p)) / (2.0 * h);
                let an = gt.list[ti].data[ei];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "param {}[{}]: fd {fd} vs analytic {an}",
                    t.name,
                    ei
                );
                checked += 1;
            }
        }
        assert!(checked >= 5, "only {checked} parameters probed");

        let mut plus = emb_u.clone();
        plus.data[0] += h;
        let mut minus = emb_u.clone();
        minus.data[0] -= h;
        let fd = (eval(&theta, &plus, &emb_p) - eval(&theta, &minus, &emb_p)) / (2.0 * h);
        let denom = fd.abs().max(gu[0].abs()).max(1e-8);
        assert!((fd - gu[0]).abs() / denom < 1e-4, "emb fd {fd} vs {}", gu[0]);
    }

    #[test]
    fn one_sgd_step_reduces_loss_on_frozen_batch() {
        let graph = fixture();
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut theta = init_theta(&c, &mut rng);
        let mut emb_u = init_embedding("emb.user", 3, 2, 1.0, &mut rng);
        let mut emb_p = init_embedding("emb.poi", 3, 2, 1.0, &mut rng);
        let plan = SamplePlan::draw(&graph, c.sample_size, 7, &[0]);
        let batch = draw_rating_batch(&graph, 4, &mut rng);

        let eval = |th: &crate::model::Tensors, eu: &crate::model::Tensor, ep: &crate::model::Tensor| {
            let mut ctx = ForwardCtx::new(&graph, &c, th, eu, ep, &plan);
            let lp = prediction_loss(&mut ctx, &batch, 0.01).unwrap();
            (ctx.tape.val(lp)[0], {
                let (gt, gu, gp) = ctx.gradients(lp, th);
                (gt, gu, gp)
            })
        };
        let (before, (gt, gu, gp)) = eval(&theta, &emb_u, &emb_p);
        let lr = 0.005;
        theta.axpy(-lr, &gt);
        for (x, g) in emb_u.data.iter_mut().zip(&gu) {
            *x -= lr * g;
        }
        for (x, g) in emb_p.data.iter_mut().zip(&gp) {
            *x -= lr * g;
        }
        let (after, _) = eval(&theta, &emb_u, &emb_p);
        assert!(after < before, "loss went {before} -> {after}");
    }
}
