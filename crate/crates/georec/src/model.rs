//! The twin graph-attention model: named parameter containers, the four
//! attention aggregators with their max-pool companions, fusion MLPs, and the
//! Hadamard affinity predictor — all expressed on the autodiff [`Tape`].
//!
//! Four channels feed the final embeddings:
//! - `gat1`: aggregates a user's social neighbors over raw user embeddings;
//! - `gat2`: aggregates the check-in pools `Q` of those same neighbors;
//! - `gat3`: aggregates spatial neighbors of a POI, sampled proportionally to
//!   edge weight, over raw POI embeddings;
//! - `gat4`: the same sampled aggregation over the visitor pools `Y`.
//!
//! `U_f = mlp1(U_l ∥ U_s)`, `L_f = mlp2(L_l ∥ L_s)`, and the predicted
//! affinity is `mlp3(U_f ⊗ L_f)`.

use std::path::Path;

use rand::Rng;

use crate::binfmt::{Kind, Reader, Writer};
use crate::error::{Error, Result};
use crate::graph::MobilityGraph;
use crate::rng::{stream, stream_rng};
use crate::tape::{Grads, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// Which attention channels are active; the disabled side passes raw
/// embeddings straight into the fusion MLP (used for ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channels {
    Both,
    UserOnly,
    PoiOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub activation: Activation,
    pub gat_depth: usize,
    pub sample_size: usize,
    pub channels: Channels,
    /// Embedding tables start uniform in ±this. The Hadamard predictor and
    /// the dot-product structure losses both scale quadratically with it, so
    /// values much below ~1 leave every per-entity gradient orders of
    /// magnitude under the regularizer and nothing entity-specific trains.
    pub emb_init_limit: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 16,
            mlp_hidden: 32,
            activation: Activation::Relu,
            gat_depth: 1,
            sample_size: 10,
            channels: Channels::Both,
            emb_init_limit: 1.0,
        }
    }
}

/// A named row-major matrix (vectors use one row).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, rows: usize, cols: usize) -> Tensor {
        Tensor {
            name: name.to_string(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn uniform(name: &str, rows: usize, cols: usize, half_width: f64, rng: &mut impl Rng) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-half_width..half_width))
            .collect();
        Tensor {
            name: name.to_string(),
            rows,
            cols,
            data,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// An ordered collection of named tensors: model parameters or a
/// parameter-shaped gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tensors {
    pub list: Vec<Tensor>,
}

impl Tensors {
    pub fn get(&self, name: &str) -> &Tensor {
        self.list
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.list
            .iter_mut()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))
    }

    pub fn zeros_like(&self) -> Tensors {
        Tensors {
            list: self
                .list
                .iter()
                .map(|t| Tensor::zeros(&t.name, t.rows, t.cols))
                .collect(),
        }
    }

    /// `self += c * other`, matched by position (names asserted equal).
    pub fn axpy(&mut self, c: f64, other: &Tensors) {
        assert_eq!(self.list.len(), other.list.len());
        for (a, b) in self.list.iter_mut().zip(&other.list) {
            debug_assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += c * y;
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.list.iter().map(|t| t.data.len()).sum()
    }

    /// Bit-exact byte image, used for trajectory comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in &self.list {
            out.extend_from_slice(t.name.as_bytes());
            for &v in &t.data {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }
}

fn write_tensor<W: std::io::Write>(w: &mut Writer<W>, t: &Tensor) -> std::io::Result<()> {
    w.str(&t.name)?;
    w.usize(t.rows)?;
    w.usize(t.cols)?;
    for &v in &t.data {
        w.f64(v)?;
    }
    Ok(())
}

fn read_tensor<R: std::io::Read>(r: &mut Reader<R>) -> Result<Tensor> {
    let name = r.str()?;
    let rows = r.usize()?;
    let cols = r.usize()?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.f64()?);
    }
    Ok(Tensor { name, rows, cols, data })
}

fn write_tensors<W: std::io::Write>(w: &mut Writer<W>, ts: &Tensors) -> std::io::Result<()> {
    w.usize(ts.list.len())?;
    for t in &ts.list {
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_tensors<R: std::io::Read>(r: &mut Reader<R>) -> Result<Tensors> {
    let n = r.usize()?;
    let mut list = Vec::with_capacity(n);
    for _ in 0..n {
        list.push(read_tensor(r)?);
    }
    Ok(Tensors { list })
}

/// Canonical shared-parameter layout: attention weights for the four GATs
/// plus the three fusion/prediction MLPs. Region embedding tables are kept
/// separately and are never part of this set.
pub fn theta_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden;
    let mut shapes = Vec::new();
    for i in 1..=4 {
        shapes.push((format!("gat{i}.w"), d, d));
        shapes.push((format!("gat{i}.b"), 1, d));
        shapes.push((format!("gat{i}.g"), 1, 2 * d));
    }
    for (name, in_dim, out_dim) in [("mlp1", 2 * d, d), ("mlp2", 2 * d, d), ("mlp3", d, 1)] {
        shapes.push((format!("{name}.w0"), h, in_dim));
        shapes.push((format!("{name}.b0"), 1, h));
        shapes.push((format!("{name}.w1"), h, h));
        shapes.push((format!("{name}.b1"), 1, h));
        shapes.push((format!("{name}.w2"), out_dim, h));
        shapes.push((format!("{name}.b2"), 1, out_dim));
    }
    shapes
}

/// Seeded initialization, biases zero. ReLU-feeding layers (the two hidden
/// layers of each fusion MLP) get He-uniform ±√(6/fan_in); linear layers and
/// the attention parameters get Glorot-uniform ±√(6/(fan_in+fan_out)).
/// Anything smaller collapses the fused embeddings by orders of magnitude —
/// the Hadamard predictor squares the shrinkage — and every loss goes
/// numerically flat.
pub fn init_theta(cfg: &ModelConfig, rng: &mut impl Rng) -> Tensors {
    let mut out = Tensors::default();
    for (name, rows, cols) in theta_shapes(cfg) {
        let t = if name.contains(".b") {
            Tensor::zeros(&name, rows, cols)
        } else {
            let limit = if name.ends_with(".w0") || name.ends_with(".w1") {
                (6.0 / cols as f64).sqrt()
            } else {
                (6.0 / (rows + cols) as f64).sqrt()
            };
            Tensor::uniform(&name, rows, cols, limit, rng)
        };
        out.list.push(t);
    }
    out
}

/// Embedding table init: uniform in ±limit.
pub fn init_embedding(
    name: &str,
    rows: usize,
    dim: usize,
    limit: f64,
    rng: &mut impl Rng,
) -> Tensor {
    Tensor::uniform(name, rows, dim, limit, rng)
}

/// Attention vector for the cluster-alignment channel.
pub fn init_beta(name: &str, dim: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (1 + 2 * dim) as f64).sqrt();
    Tensor::uniform(name, 1, 2 * dim, limit, rng)
}

/// Softmax attention over a neighborhood: logit_j = LeakyReLU(G·(center ∥
/// neighbor_j)), negative slope 0.2. Plain-`f64` reference implementation of
/// the same computation the tape performs.
pub fn attention_weights(center: &[f64], neighbors: &[&[f64]], g: &[f64]) -> Vec<f64> {
    assert!(!neighbors.is_empty());
    let logits: Vec<f64> = neighbors
        .iter()
        .map(|nb| {
            let mut s = 0.0;
            for (gi, xi) in g.iter().zip(center.iter().chain(nb.iter())) {
                s += gi * xi;
            }
            if s > 0.0 {
                s
            } else {
                0.2 * s
            }
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Draw `min(|neighbors|, s)` neighbors with replacement, probability
/// proportional to edge weight; an empty neighborhood falls back to the node
/// itself.
pub fn neighbor_sample(
    node: u32,
    neighbors: &[(u32, f64)],
    s: usize,
    rng: &mut impl Rng,
) -> Vec<u32> {
    if neighbors.is_empty() {
        return vec![node];
    }
    let draws = s.min(neighbors.len()).max(1);
    let mut cum = Vec::with_capacity(neighbors.len());
    let mut total = 0.0;
    for &(_, w) in neighbors {
        total += w;
        cum.push(total);
    }
    (0..draws)
        .map(|_| {
            let r = rng.gen::<f64>() * total;
            let idx = cum.partition_point(|&c| c <= r).min(neighbors.len() - 1);
            neighbors[idx].0
        })
        .collect()
}

/// Pre-drawn sampling decisions for `gat3`/`gat4`, fixed for the duration of
/// one loss evaluation (and across finite-difference probes). Draws are keyed
/// per node so the plan is independent of evaluation order.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub gat3: Vec<Vec<u32>>,
    pub gat4: Vec<Vec<u32>>,
}

impl SamplePlan {
    pub fn draw(graph: &MobilityGraph, sample_size: usize, root: u64, key: &[u64]) -> SamplePlan {
        let draw_all = |channel: u64| -> Vec<Vec<u32>> {
            (0..graph.n_pois() as u32)
                .map(|a| {
                    let mut idx: Vec<u64> = key.to_vec();
                    idx.push(channel);
                    idx.push(a as u64);
                    let mut rng = stream_rng(root, stream::SAMPLER, &idx);
                    neighbor_sample(a, &graph.spatial_adj[a as usize], sample_size, &mut rng)
                })
                .collect()
        };
        SamplePlan {
            gat3: draw_all(3),
            gat4: draw_all(4),
        }
    }
}

struct GatIds {
    w: NodeId,
    b: NodeId,
    g: NodeId,
}

struct MlpIds {
    w: [NodeId; 3],
    b: [NodeId; 3],
    dims: [(usize, usize); 3],
}

/// Leaf bindings for one parameter set on a tape.
pub struct BoundParams {
    names: Vec<String>,
    pub nodes: Vec<NodeId>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &Tensors) -> BoundParams {
        let mut names = Vec::with_capacity(params.list.len());
        let mut nodes = Vec::with_capacity(params.list.len());
        for t in &params.list {
            names.push(t.name.clone());
            nodes.push(tape.leaf(t.data.clone()));
        }
        BoundParams { names, nodes }
    }

    pub fn node(&self, name: &str) -> NodeId {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.nodes[i])
            .unwrap_or_else(|| panic!("no bound tensor named {name}"))
    }

    /// Collect gradients into a container shaped like `shape_of` (zeros where
    /// the backward sweep never reached the leaf).
    pub fn grads(&self, grads: &mut Grads, shape_of: &Tensors) -> Tensors {
        let mut out = shape_of.zeros_like();
        for (name, &node) in self.names.iter().zip(&self.nodes) {
            if let Some(g) = grads.take(node) {
                out.get_mut(name).data = g;
            }
        }
        out
    }
}

/// Memoized tape-based forward pass over one region's graph.
pub struct ForwardCtx<'a> {
    pub tape: Tape,
    graph: &'a MobilityGraph,
    cfg: ModelConfig,
    pub theta: BoundParams,
    pub emb_user: NodeId,
    pub emb_poi: NodeId,
    plan: &'a SamplePlan,
    gat: [GatIds; 4],
    mlps: [MlpIds; 3],
    zero: Option<NodeId>,
    emb_user_rows: Vec<Option<NodeId>>,
    emb_poi_rows: Vec<Option<NodeId>>,
    /// [layer-1][node] caches for each attention channel.
    c1: Vec<Vec<Option<NodeId>>>,
    c2: Vec<Vec<Option<NodeId>>>,
    c3: Vec<Vec<Option<NodeId>>>,
    c4: Vec<Vec<Option<NodeId>>>,
    q_cache: Vec<Option<NodeId>>,
    y_cache: Vec<Option<NodeId>>,
    uf_cache: Vec<Option<NodeId>>,
    lf_cache: Vec<Option<NodeId>>,
    /// Every attention row created so far (simplex-invariant checks).
    pub attention_rows: Vec<NodeId>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(
        graph: &'a MobilityGraph,
        cfg: &ModelConfig,
        theta: &Tensors,
        emb_user: &Tensor,
        emb_poi: &Tensor,
        plan: &'a SamplePlan,
    ) -> ForwardCtx<'a> {
        assert_eq!(emb_user.rows, graph.n_users());
        assert_eq!(emb_poi.rows, graph.n_pois());
        assert_eq!(emb_user.cols, cfg.embed_dim);
        let mut tape = Tape::new();
        let theta = BoundParams::bind(&mut tape, theta);
        let emb_user = tape.leaf(emb_user.data.clone());
        let emb_poi = tape.leaf(emb_poi.data.clone());
        let d = cfg.embed_dim;
        let h = cfg.mlp_hidden;
        let gat = [1, 2, 3, 4].map(|i| GatIds {
            w: theta.node(&format!("gat{i}.w")),
            b: theta.node(&format!("gat{i}.b")),
            g: theta.node(&format!("gat{i}.g")),
        });
        let mlp_ids = |name: &str, in_dim: usize, out_dim: usize| MlpIds {
            w: [
                theta.node(&format!("{name}.w0")),
                theta.node(&format!("{name}.w1")),
                theta.node(&format!("{name}.w2")),
            ],
            b: [
                theta.node(&format!("{name}.b0")),
                theta.node(&format!("{name}.b1")),
                theta.node(&format!("{name}.b2")),
            ],
            dims: [(h, in_dim), (h, h), (out_dim, h)],
        };
        let mlps = [
            mlp_ids("mlp1", 2 * d, d),
            mlp_ids("mlp2", 2 * d, d),
            mlp_ids("mlp3", d, 1),
        ];
        let m = graph.n_users();
        let n = graph.n_pois();
        let depth = cfg.gat_depth;
        ForwardCtx {
            tape,
            graph,
            cfg: *cfg,
            theta,
            emb_user,
            emb_poi,
            plan,
            gat,
            mlps,
            zero: None,
            emb_user_rows: vec![None; m],
            emb_poi_rows: vec![None; n],
            c1: vec![vec![None; m]; depth],
            c2: vec![vec![None; m]; depth],
            c3: vec![vec![None; n]; depth],
            c4: vec![vec![None; n]; depth],
            q_cache: vec![None; m],
            y_cache: vec![None; n],
            uf_cache: vec![None; m],
            lf_cache: vec![None; n],
            attention_rows: Vec::new(),
        }
    }

    fn zero_vec(&mut self) -> NodeId {
        if let Some(z) = self.zero {
            return z;
        }
        let z = self.tape.leaf(vec![0.0; self.cfg.embed_dim]);
        self.zero = Some(z);
        z
    }

    pub fn user_embedding(&mut self, i: u32) -> NodeId {
        let d = self.cfg.embed_dim;
        if let Some(n) = self.emb_user_rows[i as usize] {
            return n;
        }
        let n = self.tape.row(self.emb_user, i as usize, d);
        self.emb_user_rows[i as usize] = Some(n);
        n
    }

    pub fn poi_embedding(&mut self, a: u32) -> NodeId {
        let d = self.cfg.embed_dim;
        if let Some(n) = self.emb_poi_rows[a as usize] {
            return n;
        }
        let n = self.tape.row(self.emb_poi, a as usize, d);
        self.emb_poi_rows[a as usize] = Some(n);
        n
    }

    /// One attention aggregation: softmax(LeakyReLU(G·(center ∥ x_k))) over
    /// W·x_k + b, followed by the configured activation. The center is always
    /// the first message (self-loop); without it a node's own state reaches
    /// its output only through the scalar attention gates, which starves
    /// every per-entity gradient.
    fn aggregate(&mut self, channel: usize, center: NodeId, inputs: &[NodeId]) -> NodeId {
        let d = self.cfg.embed_dim;
        let GatIds { w, b, g } = self.gat[channel];
        let mut msgs = Vec::with_capacity(inputs.len() + 1);
        let mut logits = Vec::with_capacity(inputs.len() + 1);
        for &x in std::iter::once(&center).chain(inputs) {
            let wx = self.tape.matvec(w, x, d, d);
            msgs.push(self.tape.add(wx, b));
            let cat = self.tape.concat(center, x);
            let dot = self.tape.dot(g, cat);
            logits.push(self.tape.leaky_relu(dot, 0.2));
        }
        let stacked = self.tape.stack(&logits);
        let alpha = self.tape.softmax(stacked);
        self.attention_rows.push(alpha);
        let agg = self.tape.weighted_sum(alpha, &msgs);
        match self.cfg.activation {
            Activation::Relu => self.tape.relu(agg),
            Activation::Linear => agg,
        }
    }

    /// Social latent user representation (channel 1), `layer` applications
    /// deep; layer 0 is the raw embedding.
    fn user_latent_at(&mut self, i: u32, layer: usize) -> NodeId {
        if layer == 0 {
            return self.user_embedding(i);
        }
        if let Some(n) = self.c1[layer - 1][i as usize] {
            return n;
        }
        let neighbors = self.graph.social_adj[i as usize].clone();
        let center = self.user_latent_at(i, layer - 1);
        let inputs: Vec<NodeId> = neighbors
            .iter()
            .map(|&k| self.user_latent_at(k, layer - 1))
            .collect();
        let out = self.aggregate(0, center, &inputs);
        self.c1[layer - 1][i as usize] = Some(out);
        out
    }

    pub fn user_latent(&mut self, i: u32) -> NodeId {
        self.user_latent_at(i, self.cfg.gat_depth)
    }

    /// Check-in pool Q: elementwise max of category-probability-scaled POI
    /// embeddings over the user's visited set; zero vector if empty.
    pub fn user_checkin_pool(&mut self, i: u32) -> NodeId {
        if let Some(n) = self.q_cache[i as usize] {
            return n;
        }
        let pois = &self.graph.user_pois[i as usize];
        let out = if pois.is_empty() {
            self.zero_vec()
        } else {
            let elems: Vec<NodeId> = pois
                .clone()
                .into_iter()
                .map(|p| {
                    let prob =
                        self.graph.user_cat[i as usize][self.graph.pois[p as usize].category as usize];
                    let emb = self.poi_embedding(p);
                    self.tape.scale(emb, prob)
                })
                .collect();
            self.tape.max_pool(&elems)
        };
        self.q_cache[i as usize] = Some(out);
        out
    }

    fn location_conditioned_at(&mut self, i: u32, layer: usize) -> NodeId {
        if layer == 0 {
            return self.user_checkin_pool(i);
        }
        if let Some(n) = self.c2[layer - 1][i as usize] {
            return n;
        }
        let neighbors = self.graph.social_adj[i as usize].clone();
        let center = self.location_conditioned_at(i, layer - 1);
        let inputs: Vec<NodeId> = neighbors
            .iter()
            .map(|&k| self.location_conditioned_at(k, layer - 1))
            .collect();
        let out = self.aggregate(1, center, &inputs);
        self.c2[layer - 1][i as usize] = Some(out);
        out
    }

    /// Location-conditioned user representation (channel 2).
    pub fn location_conditioned_user(&mut self, i: u32) -> NodeId {
        self.location_conditioned_at(i, self.cfg.gat_depth)
    }

    fn location_latent_at(&mut self, a: u32, layer: usize) -> NodeId {
        if layer == 0 {
            return self.poi_embedding(a);
        }
        if let Some(n) = self.c3[layer - 1][a as usize] {
            return n;
        }
        let center = self.location_latent_at(a, layer - 1);
        let sampled = self.plan.gat3[a as usize].clone();
        let inputs: Vec<NodeId> = sampled
            .iter()
            .map(|&b| self.location_latent_at(b, layer - 1))
            .collect();
        let out = self.aggregate(2, center, &inputs);
        self.c3[layer - 1][a as usize] = Some(out);
        out
    }

    /// Spatial latent location representation (channel 3).
    pub fn location_latent(&mut self, a: u32) -> NodeId {
        self.location_latent_at(a, self.cfg.gat_depth)
    }

    /// Visitor pool Y: elementwise max of affinity-scaled user embeddings
    /// over the POI's visitors; zero vector if unvisited.
    pub fn location_user_pool(&mut self, a: u32) -> NodeId {
        if let Some(n) = self.y_cache[a as usize] {
            return n;
        }
        let users = self.graph.poi_users[a as usize].clone();
        let out = if users.is_empty() {
            self.zero_vec()
        } else {
            let elems: Vec<NodeId> = users
                .iter()
                .enumerate()
                .map(|(k, &u)| {
                    let p = self.graph.poi_user_affinity[a as usize][k];
                    let emb = self.user_embedding(u);
                    self.tape.scale(emb, p)
                })
                .collect();
            self.tape.max_pool(&elems)
        };
        self.y_cache[a as usize] = Some(out);
        out
    }

    fn user_conditioned_at(&mut self, a: u32, layer: usize) -> NodeId {
        if layer == 0 {
            return self.location_user_pool(a);
        }
        if let Some(n) = self.c4[layer - 1][a as usize] {
            return n;
        }
        let center = self.user_conditioned_at(a, layer - 1);
        let sampled = self.plan.gat4[a as usize].clone();
        let inputs: Vec<NodeId> = sampled
            .iter()
            .map(|&b| self.user_conditioned_at(b, layer - 1))
            .collect();
        let out = self.aggregate(3, center, &inputs);
        self.c4[layer - 1][a as usize] = Some(out);
        out
    }

    /// User-conditioned location representation (channel 4).
    pub fn user_conditioned_location(&mut self, a: u32) -> NodeId {
        self.user_conditioned_at(a, self.cfg.gat_depth)
    }

    fn mlp(&mut self, which: usize, x: NodeId) -> NodeId {
        let MlpIds { w, b, dims } = self.mlps[which];
        let mut h = x;
        for layer in 0..3 {
            let (rows, cols) = dims[layer];
            let wx = self.tape.matvec(w[layer], h, rows, cols);
            h = self.tape.add(wx, b[layer]);
            if layer < 2 {
                h = self.tape.relu(h);
            }
        }
        h
    }

    /// Final fused user embedding U_f.
    pub fn user_final(&mut self, i: u32) -> NodeId {
        if let Some(n) = self.uf_cache[i as usize] {
            return n;
        }
        let (left, right) = if self.cfg.channels == Channels::PoiOnly {
            let e = self.user_embedding(i);
            (e, e)
        } else {
            (self.user_latent(i), self.location_conditioned_user(i))
        };
        let cat = self.tape.concat(left, right);
        let out = self.mlp(0, cat);
        self.uf_cache[i as usize] = Some(out);
        out
    }

    /// Final fused location embedding L_f.
    pub fn poi_final(&mut self, a: u32) -> NodeId {
        if let Some(n) = self.lf_cache[a as usize] {
            return n;
        }
        let (left, right) = if self.cfg.channels == Channels::UserOnly {
            let e = self.poi_embedding(a);
            (e, e)
        } else {
            (self.location_latent(a), self.user_conditioned_location(a))
        };
        let cat = self.tape.concat(left, right);
        let out = self.mlp(1, cat);
        self.lf_cache[a as usize] = Some(out);
        out
    }

    /// Predicted affinity r̂ for one (user, POI) pair — a scalar node.
    pub fn predict(&mut self, i: u32, a: u32) -> NodeId {
        let uf = self.user_final(i);
        let lf = self.poi_final(a);
        let had = self.tape.hadamard(uf, lf);
        self.mlp(2, had)
    }

    /// L1 norm of every bound shared parameter (the regularization term of
    /// the prediction loss; embedding tables excluded by construction).
    pub fn theta_l1(&mut self) -> NodeId {
        let terms: Vec<NodeId> = self
            .theta
            .nodes
            .clone()
            .into_iter()
            .map(|n| self.tape.abs_sum(n))
            .collect();
        self.tape.sum_scalars(&terms)
    }

    /// Run backward from `loss` and return (θ gradients, user-table gradient,
    /// POI-table gradient).
    pub fn gradients(&mut self, loss: NodeId, theta_shape: &Tensors) -> (Tensors, Vec<f64>, Vec<f64>) {
        let mut grads = self.tape.backward(loss);
        let gt = self.theta.grads(&mut grads, theta_shape);
        let m = self.graph.n_users() * self.cfg.embed_dim;
        let n = self.graph.n_pois() * self.cfg.embed_dim;
        let gu = grads.take(self.emb_user).unwrap_or_else(|| vec![0.0; m]);
        let gp = grads.take(self.emb_poi).unwrap_or_else(|| vec![0.0; n]);
        (gt, gu, gp)
    }
}

/// Plain-`f64` application of the affinity MLP to a fused Hadamard input,
/// mirroring the tape computation operation-for-operation so scores are
/// bit-identical (used by the evaluator's tight scoring loop).
pub fn predict_plain(theta: &Tensors, cfg: &ModelConfig, uf: &[f64], lf: &[f64]) -> f64 {
    let mut x: Vec<f64> = uf.iter().zip(lf).map(|(a, b)| a * b).collect();
    let h = cfg.mlp_hidden;
    let dims = [(h, cfg.embed_dim), (h, h), (1, h)];
    for layer in 0..3 {
        let (rows, cols) = dims[layer];
        let w = theta.get(&format!("mlp3.w{layer}"));
        let b = theta.get(&format!("mlp3.b{layer}"));
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut s: f64 = w.data[r * cols..(r + 1) * cols]
                .iter()
                .zip(&x)
                .map(|(a, b)| a * b)
                .sum();
            s += b.data[r];
            out[r] = if layer < 2 { s.max(0.0) } else { s };
        }
        x = out;
    }
    x[0]
}

/// Everything needed to restart or evaluate a run: shared + region-adapted
/// parameters, all four embedding tables, the cluster-attention vectors, and
/// loop state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: String,
    /// "meta" (inside the epoch loop), "meta_done", or "final".
    pub phase: String,
    pub epoch: u32,
    pub root_seed: u64,
    pub best_val: f64,
    pub patience_used: u32,
    pub theta_st: Tensors,
    pub theta_tgt: Tensors,
    pub theta_src: Tensors,
    pub emb_user_src: Tensor,
    pub emb_poi_src: Tensor,
    pub emb_user_tgt: Tensor,
    pub emb_poi_tgt: Tensor,
    pub beta_user: Tensor,
    pub beta_poi: Tensor,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::create(path, Kind::Checkpoint)?;
        let io = |e| Error::io(path, e);
        (|| -> std::io::Result<()> {
            w.str(&self.mode)?;
            w.str(&self.phase)?;
            w.u32(self.epoch)?;
            w.u64(self.root_seed)?;
            w.f64(self.best_val)?;
            w.u32(self.patience_used)?;
            write_tensors(&mut w, &self.theta_st)?;
            write_tensors(&mut w, &self.theta_tgt)?;
            write_tensors(&mut w, &self.theta_src)?;
            for t in [
                &self.emb_user_src,
                &self.emb_poi_src,
                &self.emb_user_tgt,
                &self.emb_poi_tgt,
                &self.beta_user,
                &self.beta_poi,
            ] {
                write_tensor(&mut w, t)?;
            }
            Ok(())
        })()
        .map_err(io)?;
        w.finish().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = Reader::open(path, Kind::Checkpoint)?;
        let ck = Checkpoint {
            mode: r.str()?,
            phase: r.str()?,
            epoch: r.u32()?,
            root_seed: r.u64()?,
            best_val: r.f64()?,
            patience_used: r.u32()?,
            theta_st: read_tensors(&mut r)?,
            theta_tgt: read_tensors(&mut r)?,
            theta_src: read_tensors(&mut r)?,
            emb_user_src: read_tensor(&mut r)?,
            emb_poi_src: read_tensor(&mut r)?,
            emb_user_tgt: read_tensor(&mut r)?,
            emb_poi_tgt: read_tensor(&mut r)?,
            beta_user: read_tensor(&mut r)?,
            beta_poi: read_tensor(&mut r)?,
        };
        r.expect_eof()?;
        Ok(ck)
    }
}
