//! Cross-region knowledge transfer through cluster alignment.
//!
//! Both regions' user and POI embedding tables are clustered with k-means;
//! each target cluster centroid then attends over all source centroids
//! (softmax over LeakyReLU(G_β·(c_t ∥ c_s))) and is pulled toward its
//! attention-weighted reconstruction by a few SGD steps on the alignment
//! loss Σ_t ‖c_t − Σ_s β_{t,s} c_s‖². Only embedding tables and the G_β
//! vectors move — shared model parameters are never touched here.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::MobilityGraph;
use crate::model::{attention_weights, Tensor};
use crate::rng::{stream, stream_rng};
use crate::tape::{NodeId, Tape};

/// k-means output: hard assignments, final centroids, and the inertia
/// measured at every assignment step (non-increasing).
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignments: Vec<u32>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Runs until the assignment is a
/// fixpoint or `max_iters` assignment rounds, whichever first. Empty clusters
/// are repaired by re-seeding them on the farthest point of the largest
/// cluster.
pub fn kmeans(
    data: &[f64],
    dim: usize,
    k: usize,
    max_iters: usize,
    rng: &mut impl Rng,
) -> Result<KmeansResult> {
    assert!(dim > 0 && data.len() % dim == 0);
    let n = data.len() / dim;
    if k == 0 || n < k {
        return Err(Error::Internal(format!(
            "kmeans needs at least k points (n={n}, k={k})"
        )));
    }
    let point = |i: usize| &data[i * dim..(i + 1) * dim];

    // k-means++ seeding: first centroid uniform, the rest d²-weighted.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(point(rng.gen_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if r < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(point(next).to_vec());
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(point(i), centroids.last().unwrap()));
        }
    }

    let mut assignments = vec![0u32; n];
    let mut inertia = Vec::new();
    let mut repaired = false;
    for _ in 0..max_iters {
        // Assignment step (ties go to the lowest centroid index).
        let mut step_inertia = 0.0;
        let mut changed = false;
        for i in 0..n {
            let mut best = 0u32;
            let mut best_d = sq_dist(point(i), &centroids[0]);
            for (c, cent) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(point(i), cent);
                if d < best_d {
                    best_d = d;
                    best = c as u32;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            step_inertia += best_d;
        }
        let first_round = inertia.is_empty();
        inertia.push(step_inertia);
        if !changed && !first_round && !repaired {
            break;
        }
        repaired = false;

        // Update step: centroids move to member means.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            }
        }
        // Repair empties by stealing the farthest point of the largest
        // cluster. The stolen point is reassigned, and a repair forces one
        // more assignment round even at an apparent fixpoint — with exact
        // duplicates the ties otherwise re-empty the cluster immediately.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let largest = (0..k).max_by_key(|&x| counts[x]).unwrap();
            let far = (0..n)
                .filter(|&i| assignments[i] as usize == largest)
                .max_by(|&a, &b| {
                    sq_dist(point(a), &centroids[largest])
                        .partial_cmp(&sq_dist(point(b), &centroids[largest]))
                        .unwrap()
                })
                .unwrap();
            centroids[c] = point(far).to_vec();
            assignments[far] = c as u32;
            counts[c] = 1;
            counts[largest] -= 1;
            repaired = true;
        }
    }
    Ok(KmeansResult {
        assignments,
        centroids,
        inertia,
    })
}

/// Attention of one target centroid over all source centroids.
pub fn cluster_attention(g_beta: &[f64], c_t: &[f64], sources: &[Vec<f64>]) -> Vec<f64> {
    let refs: Vec<&[f64]> = sources.iter().map(|v| v.as_slice()).collect();
    attention_weights(c_t, &refs, g_beta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferConfig {
    /// Requested cluster count (clamped to the smaller table if needed).
    pub k: usize,
    /// SGD steps per transfer event.
    pub steps: usize,
    pub lr: f64,
    /// Also move source embeddings toward the alignment (default pulls the
    /// target only).
    pub symmetric: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            k: 20,
            steps: 5,
            lr: 0.01,
            symmetric: false,
        }
    }
}

/// β statistics for one band of cluster-pair category distance.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BetaBucket {
    pub tv_lo: f64,
    pub tv_hi: f64,
    pub pairs: usize,
    pub mean_beta: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TransferOutcome {
    pub k_user: usize,
    pub k_poi: usize,
    pub clamped: bool,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Mean β per band of total-variation distance between cluster category
    /// distributions (ascending distance, ~equal-count bands).
    pub user_beta_buckets: Vec<BetaBucket>,
    pub poi_beta_buckets: Vec<BetaBucket>,
}

struct Clustering {
    assignments: Vec<u32>,
    k: usize,
}

fn cluster_table(table: &Tensor, k: usize, rng: &mut impl Rng) -> Result<Clustering> {
    let res = kmeans(&table.data, table.cols, k, 100, rng)?;
    Ok(Clustering {
        assignments: res.assignments,
        k,
    })
}

/// Tape-side centroid means for each cluster, in cluster order. Every table
/// row is bound through `Row` so gradients land on the table leaf.
fn centroid_nodes(
    tape: &mut Tape,
    table_leaf: NodeId,
    dim: usize,
    clu: &Clustering,
) -> Vec<NodeId> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clu.k];
    for (i, &c) in clu.assignments.iter().enumerate() {
        members[c as usize].push(i);
    }
    members
        .iter()
        .map(|m| {
            debug_assert!(!m.is_empty(), "kmeans produced an empty cluster");
            let rows: Vec<NodeId> = m.iter().map(|&i| tape.row(table_leaf, i, dim)).collect();
            tape.mean(&rows)
        })
        .collect()
}

/// One alignment-loss term group on the tape: target centroids attend over
/// source centroids through `g_beta`.
fn alignment_terms(
    tape: &mut Tape,
    g_beta: NodeId,
    targets: &[NodeId],
    sources: &[NodeId],
) -> Vec<NodeId> {
    let mut terms = Vec::with_capacity(targets.len());
    for &ct in targets {
        let logits: Vec<NodeId> = sources
            .iter()
            .map(|&cs| {
                let cat = tape.concat(ct, cs);
                let dot = tape.dot(g_beta, cat);
                tape.leaky_relu(dot, 0.2)
            })
            .collect();
        let stacked = tape.stack(&logits);
        let beta = tape.softmax(stacked);
        let recon = tape.weighted_sum(beta, sources);
        let diff = tape.sub(ct, recon);
        terms.push(tape.dot(diff, diff));
    }
    terms
}

/// Category distribution of each cluster, projected onto a shared category
/// name space (users: summed check-in counts; POIs: member category counts).
fn cluster_category_dists(
    graph: &MobilityGraph,
    clu: &Clustering,
    union_names: &[String],
    users: bool,
) -> Vec<Vec<f64>> {
    let proj: Vec<usize> = graph
        .categories
        .iter()
        .map(|c| union_names.binary_search(c).expect("category in union"))
        .collect();
    let mut dists = vec![vec![0.0; union_names.len()]; clu.k];
    if users {
        for (i, &c) in clu.assignments.iter().enumerate() {
            for (cat, &count) in graph.user_cat_counts[i].iter().enumerate() {
                dists[c as usize][proj[cat]] += count as f64;
            }
        }
    } else {
        for (a, &c) in clu.assignments.iter().enumerate() {
            dists[c as usize][proj[graph.pois[a].category as usize]] += 1.0;
        }
    }
    for d in &mut dists {
        let total: f64 = d.iter().sum();
        if total > 0.0 {
            for v in d.iter_mut() {
                *v /= total;
            }
        } else {
            let u = 1.0 / d.len() as f64;
            d.iter_mut().for_each(|v| *v = u);
        }
    }
    dists
}

fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Bucket (distance, β) pairs into up to 5 ~equal-count bands by ascending
/// distance and average β within each.
fn beta_buckets(mut pairs: Vec<(f64, f64)>) -> Vec<BetaBucket> {
    if pairs.is_empty() {
        return Vec::new();
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_buckets = 5.min(pairs.len());
    let base = pairs.len() / n_buckets;
    let extra = pairs.len() % n_buckets;
    let mut out = Vec::with_capacity(n_buckets);
    let mut start = 0;
    for b in 0..n_buckets {
        let len = base + usize::from(b < extra);
        let chunk = &pairs[start..start + len];
        out.push(BetaBucket {
            tv_lo: chunk.first().unwrap().0,
            tv_hi: chunk.last().unwrap().0,
            pairs: chunk.len(),
            mean_beta: chunk.iter().map(|p| p.1).sum::<f64>() / chunk.len() as f64,
        });
        start += len;
    }
    out
}

/// Plain-side β rows for reporting, from current (post-update) embeddings.
fn final_betas(
    table_tgt: &Tensor,
    table_src: &Tensor,
    clu_t: &Clustering,
    clu_s: &Clustering,
    g_beta: &Tensor,
) -> Vec<Vec<f64>> {
    let mean_of = |table: &Tensor, clu: &Clustering| -> Vec<Vec<f64>> {
        let mut sums = vec![vec![0.0; table.cols]; clu.k];
        let mut counts = vec![0usize; clu.k];
        for (i, &c) in clu.assignments.iter().enumerate() {
            counts[c as usize] += 1;
            for (s, v) in sums[c as usize].iter_mut().zip(table.row(i)) {
                *s += v;
            }
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
        sums
    };
    let ct = mean_of(table_tgt, clu_t);
    let cs = mean_of(table_src, clu_s);
    ct.iter()
        .map(|c| cluster_attention(&g_beta.data, c, &cs))
        .collect()
}

/// One transfer event: recluster all four tables, then take `steps` SGD steps
/// on the alignment loss, moving target embeddings (both if `symmetric`) and
/// the G_β vectors. Assignments stay frozen for the whole event.
#[allow(clippy::too_many_arguments)]
pub fn apply_transfer(
    src_graph: &MobilityGraph,
    tgt_graph: &MobilityGraph,
    emb_user_src: &mut Tensor,
    emb_poi_src: &mut Tensor,
    emb_user_tgt: &mut Tensor,
    emb_poi_tgt: &mut Tensor,
    beta_user: &mut Tensor,
    beta_poi: &mut Tensor,
    cfg: &TransferConfig,
    root_seed: u64,
    event: u64,
) -> Result<TransferOutcome> {
    let k_user = cfg
        .k
        .min(src_graph.n_users())
        .min(tgt_graph.n_users())
        .max(1);
    let k_poi = cfg.k.min(src_graph.n_pois()).min(tgt_graph.n_pois()).max(1);
    let clamped = k_user != cfg.k || k_poi != cfg.k;
    if clamped {
        log::warn!(
            "transfer event {event}: cluster count clamped to {k_user} (users) / {k_poi} (POIs) from {}",
            cfg.k
        );
    }
    let cluster_rng = |group: u64| stream_rng(root_seed, stream::KMEANS, &[event, group]);
    let clu_user_src = cluster_table(emb_user_src, k_user, &mut cluster_rng(0))?;
    let clu_user_tgt = cluster_table(emb_user_tgt, k_user, &mut cluster_rng(1))?;
    let clu_poi_src = cluster_table(emb_poi_src, k_poi, &mut cluster_rng(2))?;
    let clu_poi_tgt = cluster_table(emb_poi_tgt, k_poi, &mut cluster_rng(3))?;

    let mut loss_before = f64::NAN;
    let mut loss_after;
    let mut step = 0;
    loop {
        let mut tape = Tape::new();
        let us = tape.leaf(emb_user_src.data.clone());
        let ut = tape.leaf(emb_user_tgt.data.clone());
        let ps = tape.leaf(emb_poi_src.data.clone());
        let pt = tape.leaf(emb_poi_tgt.data.clone());
        let gu = tape.leaf(beta_user.data.clone());
        let gl = tape.leaf(beta_poi.data.clone());
        let dim = emb_user_src.cols;
        let cu_s = centroid_nodes(&mut tape, us, dim, &clu_user_src);
        let cu_t = centroid_nodes(&mut tape, ut, dim, &clu_user_tgt);
        let cp_s = centroid_nodes(&mut tape, ps, dim, &clu_poi_src);
        let cp_t = centroid_nodes(&mut tape, pt, dim, &clu_poi_tgt);
        let mut terms = alignment_terms(&mut tape, gu, &cu_t, &cu_s);
        terms.extend(alignment_terms(&mut tape, gl, &cp_t, &cp_s));
        let loss = tape.sum_scalars(&terms);
        let loss_val = tape.val(loss)[0];
        if step == 0 {
            loss_before = loss_val;
        }
        loss_after = loss_val;
        if step == cfg.steps {
            break;
        }
        let mut grads = tape.backward(loss);
        let mut apply = |tensor: &mut Tensor, node: NodeId| {
            if let Some(g) = grads.take(node) {
                for (x, gv) in tensor.data.iter_mut().zip(&g) {
                    *x -= cfg.lr * gv;
                }
            }
        };
        apply(emb_user_tgt, ut);
        apply(emb_poi_tgt, pt);
        if cfg.symmetric {
            apply(emb_user_src, us);
            apply(emb_poi_src, ps);
        }
        apply(beta_user, gu);
        apply(beta_poi, gl);
        step += 1;
    }

    // β-vs-category-distance summary from the final state.
    let union = |a: &MobilityGraph, b: &MobilityGraph| -> Vec<String> {
        let mut names: Vec<String> = a
            .categories
            .iter()
            .chain(b.categories.iter())
            .cloned()
            .collect();
        names.sort();
        names.dedup();
        names
    };
    let names = union(src_graph, tgt_graph);
    let bucket_for = |betas: Vec<Vec<f64>>,
                      dist_t: Vec<Vec<f64>>,
                      dist_s: Vec<Vec<f64>>|
     -> Vec<BetaBucket> {
        let mut pairs = Vec::new();
        for (t, row) in betas.iter().enumerate() {
            for (s, &b) in row.iter().enumerate() {
                pairs.push((total_variation(&dist_t[t], &dist_s[s]), b));
            }
        }
        beta_buckets(pairs)
    };
    let user_beta_buckets = bucket_for(
        final_betas(emb_user_tgt, emb_user_src, &clu_user_tgt, &clu_user_src, beta_user),
        cluster_category_dists(tgt_graph, &clu_user_tgt, &names, true),
        cluster_category_dists(src_graph, &clu_user_src, &names, true),
    );
    let poi_beta_buckets = bucket_for(
        final_betas(emb_poi_tgt, emb_poi_src, &clu_poi_tgt, &clu_poi_src, beta_poi),
        cluster_category_dists(tgt_graph, &clu_poi_tgt, &names, false),
        cluster_category_dists(src_graph, &clu_poi_src, &names, false),
    );

    Ok(TransferOutcome {
        k_user,
        k_poi,
        clamped,
        loss_before,
        loss_after,
        user_beta_buckets,
        poi_beta_buckets,
    })
}
