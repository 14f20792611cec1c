//! The meta-training loop that couples the data-rich source region with the
//! sparse target region.
//!
//! Each epoch composes four public operations:
//! 1. `social_warm_update` — one structure-loss step per region from the
//!    shared parameters θ_st (target copy seeds the inner loop; both θ
//!    gradients are cached for the global step);
//! 2. `target_inner_loop` — N_u prediction-loss steps on fresh target
//!    batches, continuing from the warmed target copy;
//! 3. `source_update` — one prediction-loss step from θ_st on a source
//!    batch (gradient cached);
//! 4. `global_update` — θ_st ← θ_st − ω2·[∇L_p^src + ∇L_p^tgt(θ_tgt)] −
//!    ω3·[∇L_s^src + ∇L_s^tgt], the target prediction gradient taken at the
//!    adapted parameters (first-order meta rule).
//!
//! Every `transfer_every` epochs (mode `full` only) a cluster-alignment
//! transfer event runs. After the epoch loop, `fine_tune` adapts a copy of
//! θ_st to the target region with plain SGD and validation early stopping.
//!
//! Embedding tables only ever receive gradients from their own region's loss
//! evaluations; the cluster transfer is the single cross-region channel.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::cluster::{apply_transfer, TransferConfig, TransferOutcome};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalOptions, EvalState, Which};
use crate::graph::MobilityGraph;
use crate::ingest::SplitDataset;
use crate::loss::{
    draw_rating_batch, draw_social_batch, prediction_loss, social_loss, EntityKind, RatingTerm,
    SocialBatch,
};
use crate::model::{
    init_beta, init_embedding, init_theta, Checkpoint, ForwardCtx, ModelConfig, SamplePlan,
    Tensor, Tensors,
};
use crate::rng::{stream, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Meta-training plus cluster transfer.
    Full,
    /// Meta-training without cluster transfer.
    AxoM,
    /// Source-only pretraining, then target fine-tuning.
    AxoF,
    /// Target-only training (no source data at all).
    TargetOnly,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "full" => Ok(Mode::Full),
            "axo-m" => Ok(Mode::AxoM),
            "axo-f" => Ok(Mode::AxoF),
            "target-only" => Ok(Mode::TargetOnly),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected full, axo-m, axo-f, or target-only)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::AxoM => "axo-m",
            Mode::AxoF => "axo-f",
            Mode::TargetOnly => "target-only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: u32,
    pub batch_size: usize,
    /// N_u: inner-loop steps per epoch.
    pub inner_steps: u32,
    /// M_t: cluster transfer period in epochs (0 disables).
    pub transfer_every: u32,
    /// ω1: inner/source step rate.
    pub lr_inner: f64,
    /// ω2: global prediction-gradient rate.
    pub lr_global: f64,
    /// ω3: social warm/global structure-gradient rate.
    pub lr_social: f64,
    pub lambda_l1: f64,
    pub fine_tune_lr: f64,
    pub fine_tune_epochs: u32,
    pub patience: u32,
    /// Cap on directed pairs per structure loss (0 = all pairs).
    pub social_anchor_cap: usize,
    /// Compute validation NDCG every this many epochs (1 = every epoch).
    /// Validation never touches trainable state, so this only affects logs
    /// and early-stopping granularity, not the parameter trajectory.
    pub val_every: u32,
    pub transfer: TransferConfig,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Full,
            epochs: 50,
            batch_size: 16,
            inner_steps: 4,
            transfer_every: 4,
            lr_inner: 0.001,
            lr_global: 0.001,
            lr_social: 0.001,
            lambda_l1: 0.01,
            fine_tune_lr: 0.01,
            fine_tune_epochs: 10,
            patience: 3,
            social_anchor_cap: 512,
            val_every: 1,
            transfer: TransferConfig::default(),
            divergence_threshold: 1e6,
        }
    }
}

/// θ − lr·g (pure).
pub fn sgd_step(theta: &Tensors, grad: &Tensors, lr: f64) -> Tensors {
    let mut out = theta.clone();
    out.axpy(-lr, grad);
    out
}

/// The joint global step: θ_st − ω2·(g_pred_src + g_pred_tgt) − ω3·(g_soc_src
/// + g_soc_tgt) (pure).
pub fn global_step(
    theta_st: &Tensors,
    g_pred_src: &Tensors,
    g_pred_tgt: &Tensors,
    g_soc_src: &Tensors,
    g_soc_tgt: &Tensors,
    lr_global: f64,
    lr_social: f64,
) -> Tensors {
    let mut out = theta_st.clone();
    out.axpy(-lr_global, g_pred_src);
    out.axpy(-lr_global, g_pred_tgt);
    out.axpy(-lr_social, g_soc_src);
    out.axpy(-lr_social, g_soc_tgt);
    out
}

fn apply_table_grad(table: &mut Tensor, grad: &[f64], lr: f64) {
    debug_assert_eq!(table.data.len(), grad.len());
    for (x, g) in table.data.iter_mut().zip(grad) {
        *x -= lr * g;
    }
}

/// All trainable state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta_st: Tensors,
    pub theta_tgt: Tensors,
    pub theta_src: Tensors,
    pub eu_src: Tensor,
    pub ep_src: Tensor,
    pub eu_tgt: Tensor,
    pub ep_tgt: Tensor,
    pub beta_u: Tensor,
    pub beta_l: Tensor,
}

impl TrainState {
    /// Seeded initialization; draw order is fixed (θ, then the four tables,
    /// then the cluster-attention vectors).
    pub fn init(
        model_cfg: &ModelConfig,
        src: &MobilityGraph,
        tgt: &MobilityGraph,
        root_seed: u64,
    ) -> TrainState {
        let mut rng = stream_rng(root_seed, stream::INIT, &[]);
        let d = model_cfg.embed_dim;
        let lim = model_cfg.emb_init_limit;
        let theta_st = init_theta(model_cfg, &mut rng);
        let eu_src = init_embedding("emb.user.source", src.n_users(), d, lim, &mut rng);
        let ep_src = init_embedding("emb.poi.source", src.n_pois(), d, lim, &mut rng);
        let eu_tgt = init_embedding("emb.user.target", tgt.n_users(), d, lim, &mut rng);
        let ep_tgt = init_embedding("emb.poi.target", tgt.n_pois(), d, lim, &mut rng);
        let beta_u = init_beta("beta.user", d, &mut rng);
        let beta_l = init_beta("beta.poi", d, &mut rng);
        TrainState {
            theta_tgt: theta_st.clone(),
            theta_src: theta_st.clone(),
            theta_st,
            eu_src,
            ep_src,
            eu_tgt,
            ep_tgt,
            beta_u,
            beta_l,
        }
    }

    fn to_checkpoint(&self, mode: Mode, phase: &str, epoch: u32, root_seed: u64, best_val: f64, patience_used: u32) -> Checkpoint {
        Checkpoint {
            mode: mode.name().to_string(),
            phase: phase.to_string(),
            epoch,
            root_seed,
            best_val,
            patience_used,
            theta_st: self.theta_st.clone(),
            theta_tgt: self.theta_tgt.clone(),
            theta_src: self.theta_src.clone(),
            emb_user_src: self.eu_src.clone(),
            emb_poi_src: self.ep_src.clone(),
            emb_user_tgt: self.eu_tgt.clone(),
            emb_poi_tgt: self.ep_tgt.clone(),
            beta_user: self.beta_u.clone(),
            beta_poi: self.beta_l.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> TrainState {
        TrainState {
            theta_st: ck.theta_st.clone(),
            theta_tgt: ck.theta_tgt.clone(),
            theta_src: ck.theta_src.clone(),
            eu_src: ck.emb_user_src.clone(),
            ep_src: ck.emb_poi_src.clone(),
            eu_tgt: ck.emb_user_tgt.clone(),
            ep_tgt: ck.emb_poi_tgt.clone(),
            beta_u: ck.beta_user.clone(),
            beta_l: ck.beta_poi.clone(),
        }
    }

    /// Bit-exact image of everything trainable (trajectory comparisons).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.theta_st.to_bytes();
        out.extend(self.theta_tgt.to_bytes());
        out.extend(self.theta_src.to_bytes());
        for t in [
            &self.eu_src,
            &self.ep_src,
            &self.eu_tgt,
            &self.ep_tgt,
            &self.beta_u,
            &self.beta_l,
        ] {
            for &v in &t.data {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }
}

/// Stream key prefixes distinguishing the per-epoch operations.
mod op_key {
    pub const WARM_TGT: u64 = 0;
    pub const WARM_SRC: u64 = 1;
    pub const SOURCE: u64 = 2;
    pub const META: u64 = 3;
    pub const FINE_TUNE: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const INNER_BASE: u64 = 100;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Source,
    Target,
}

struct LossEval {
    loss: f64,
    g_theta: Tensors,
    g_user: Vec<f64>,
    g_poi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub event: &'static str,
    pub epoch: u32,
    pub loss_social_tgt: f64,
    pub loss_social_src: f64,
    pub inner_losses: Vec<f64>,
    pub loss_pred_src: f64,
    pub loss_pred_meta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ndcg5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferOutcome>,
}

struct SocialGradCache {
    tgt: Tensors,
    src: Tensors,
}

/// One training run over a source/target graph pair. The per-epoch operations
/// are public so a reference loop can be composed by hand and compared
/// byte-for-byte against `train`.
pub struct TrainRun<'a> {
    pub src_graph: &'a MobilityGraph,
    pub tgt_graph: &'a MobilityGraph,
    pub src_split: &'a SplitDataset,
    pub tgt_split: &'a SplitDataset,
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub root_seed: u64,
    pub state: TrainState,
    social_cache: Option<SocialGradCache>,
    pred_src_cache: Option<Tensors>,
    transfer_events: u64,
}

impl<'a> TrainRun<'a> {
    pub fn new(
        src_graph: &'a MobilityGraph,
        tgt_graph: &'a MobilityGraph,
        src_split: &'a SplitDataset,
        tgt_split: &'a SplitDataset,
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        root_seed: u64,
    ) -> Result<TrainRun<'a>> {
        if tgt_graph.positive_pairs.is_empty() {
            return Err(Error::Data(
                "target region has no training interactions".into(),
            ));
        }
        if cfg.mode != Mode::TargetOnly && src_graph.positive_pairs.is_empty() {
            return Err(Error::Data(
                "source region has no training interactions".into(),
            ));
        }
        let state = TrainState::init(&model_cfg, src_graph, tgt_graph, root_seed);
        Ok(TrainRun {
            src_graph,
            tgt_graph,
            src_split,
            tgt_split,
            model_cfg,
            cfg,
            root_seed,
            state,
            social_cache: None,
            pred_src_cache: None,
            transfer_events: 0,
        })
    }

    fn graph(&self, region: Region) -> &'a MobilityGraph {
        match region {
            Region::Source => self.src_graph,
            Region::Target => self.tgt_graph,
        }
    }

    fn tables(&self, region: Region) -> (&Tensor, &Tensor) {
        match region {
            Region::Source => (&self.state.eu_src, &self.state.ep_src),
            Region::Target => (&self.state.eu_tgt, &self.state.ep_tgt),
        }
    }

    fn check_divergence(&self, loss: f64, what: &str, epoch: u32) -> Result<()> {
        if !loss.is_finite() || loss > self.cfg.divergence_threshold {
            return Err(Error::Internal(format!(
                "training diverged during {what} at epoch {epoch}: loss {loss}"
            )));
        }
        Ok(())
    }

    fn eval_prediction(
        &self,
        region: Region,
        theta: &Tensors,
        batch: &[RatingTerm],
        plan_key: &[u64],
    ) -> Result<LossEval> {
        let graph = self.graph(region);
        let (eu, ep) = self.tables(region);
        let plan = SamplePlan::draw(graph, self.model_cfg.sample_size, self.root_seed, plan_key);
        let mut ctx = ForwardCtx::new(graph, &self.model_cfg, theta, eu, ep, &plan);
        let loss = prediction_loss(&mut ctx, batch, self.cfg.lambda_l1)?;
        let v = ctx.tape.val(loss)[0];
        let (g_theta, g_user, g_poi) = ctx.gradients(loss, theta);
        Ok(LossEval { loss: v, g_theta, g_user, g_poi })
    }

    fn eval_social(
        &self,
        region: Region,
        theta: &Tensors,
        users: &SocialBatch,
        pois: &SocialBatch,
        plan_key: &[u64],
    ) -> Result<LossEval> {
        let graph = self.graph(region);
        let (eu, ep) = self.tables(region);
        let plan = SamplePlan::draw(graph, self.model_cfg.sample_size, self.root_seed, plan_key);
        let mut ctx = ForwardCtx::new(graph, &self.model_cfg, theta, eu, ep, &plan);
        let lu = social_loss(&mut ctx, EntityKind::User, users);
        let lp = social_loss(&mut ctx, EntityKind::Poi, pois);
        let loss = ctx.tape.add(lu, lp);
        let v = ctx.tape.val(loss)[0];
        let (g_theta, g_user, g_poi) = ctx.gradients(loss, theta);
        Ok(LossEval { loss: v, g_theta, g_user, g_poi })
    }

    fn draw_social_batches(&self, region: Region, epoch: u32) -> (SocialBatch, SocialBatch) {
        let code = match region {
            Region::Source => 0u64,
            Region::Target => 1u64,
        };
        let mut rng = stream_rng(self.root_seed, stream::NEGATIVES, &[epoch as u64, code]);
        let graph = self.graph(region);
        let users = draw_social_batch(graph, EntityKind::User, self.cfg.social_anchor_cap, &mut rng);
        let pois = draw_social_batch(graph, EntityKind::Poi, self.cfg.social_anchor_cap, &mut rng);
        (users, pois)
    }

    fn rating_batch(&self, region: Region, key: &[u64]) -> Vec<RatingTerm> {
        let mut rng = stream_rng(self.root_seed, stream::BATCH, key);
        draw_rating_batch(self.graph(region), self.cfg.batch_size, &mut rng)
    }

    /// Structure-loss warm steps for both regions: θ_tgt and θ_src become
    /// one-step adaptations of θ_st; the θ gradients are cached for the
    /// global update. Each region's embedding tables take the same step.
    pub fn social_warm_update(&mut self, epoch: u32) -> Result<(f64, f64)> {
        let e = epoch as u64;
        let (users_t, pois_t) = self.draw_social_batches(Region::Target, epoch);
        let ev_t = self.eval_social(
            Region::Target,
            &self.state.theta_st,
            &users_t,
            &pois_t,
            &[op_key::WARM_TGT, e],
        )?;
        self.check_divergence(ev_t.loss, "target social warm update", epoch)?;
        self.state.theta_tgt = sgd_step(&self.state.theta_st, &ev_t.g_theta, self.cfg.lr_social);
        apply_table_grad(&mut self.state.eu_tgt, &ev_t.g_user, self.cfg.lr_social);
        apply_table_grad(&mut self.state.ep_tgt, &ev_t.g_poi, self.cfg.lr_social);

        let (users_s, pois_s) = self.draw_social_batches(Region::Source, epoch);
        let ev_s = self.eval_social(
            Region::Source,
            &self.state.theta_st,
            &users_s,
            &pois_s,
            &[op_key::WARM_SRC, e],
        )?;
        self.check_divergence(ev_s.loss, "source social warm update", epoch)?;
        self.state.theta_src = sgd_step(&self.state.theta_st, &ev_s.g_theta, self.cfg.lr_social);
        apply_table_grad(&mut self.state.eu_src, &ev_s.g_user, self.cfg.lr_social);
        apply_table_grad(&mut self.state.ep_src, &ev_s.g_poi, self.cfg.lr_social);

        self.social_cache = Some(SocialGradCache {
            tgt: ev_t.g_theta,
            src: ev_s.g_theta,
        });
        Ok((ev_t.loss, ev_s.loss))
    }

    /// N_u prediction steps on fresh target batches, continuing from the
    /// warmed θ_tgt.
    pub fn target_inner_loop(&mut self, epoch: u32) -> Result<Vec<f64>> {
        let e = epoch as u64;
        let mut losses = Vec::with_capacity(self.cfg.inner_steps as usize);
        for k in 0..self.cfg.inner_steps as u64 {
            let batch = self.rating_batch(Region::Target, &[op_key::INNER_BASE + k, e]);
            let ev = self.eval_prediction(
                Region::Target,
                &self.state.theta_tgt,
                &batch,
                &[op_key::INNER_BASE + k, e],
            )?;
            self.check_divergence(ev.loss, "target inner loop", epoch)?;
            self.state.theta_tgt = sgd_step(&self.state.theta_tgt, &ev.g_theta, self.cfg.lr_inner);
            apply_table_grad(&mut self.state.eu_tgt, &ev.g_user, self.cfg.lr_inner);
            apply_table_grad(&mut self.state.ep_tgt, &ev.g_poi, self.cfg.lr_inner);
            losses.push(ev.loss);
        }
        Ok(losses)
    }

    /// One prediction step from θ_st on a source batch; the gradient (taken
    /// at θ_st) is cached for the global update.
    pub fn source_update(&mut self, epoch: u32) -> Result<f64> {
        let e = epoch as u64;
        let batch = self.rating_batch(Region::Source, &[op_key::SOURCE, e]);
        let ev = self.eval_prediction(
            Region::Source,
            &self.state.theta_st,
            &batch,
            &[op_key::SOURCE, e],
        )?;
        self.check_divergence(ev.loss, "source update", epoch)?;
        self.state.theta_src = sgd_step(&self.state.theta_st, &ev.g_theta, self.cfg.lr_inner);
        apply_table_grad(&mut self.state.eu_src, &ev.g_user, self.cfg.lr_inner);
        apply_table_grad(&mut self.state.ep_src, &ev.g_poi, self.cfg.lr_inner);
        self.pred_src_cache = Some(ev.g_theta);
        Ok(ev.loss)
    }

    /// The joint update of θ_st from the cached source-prediction and
    /// structure gradients plus a fresh target batch evaluated at the adapted
    /// θ_tgt. Target tables take the meta-batch gradient at ω2.
    pub fn global_update(&mut self, epoch: u32) -> Result<f64> {
        let e = epoch as u64;
        let social = self
            .social_cache
            .take()
            .ok_or_else(|| Error::Internal("global update before social warm update".into()))?;
        let pred_src = self
            .pred_src_cache
            .take()
            .ok_or_else(|| Error::Internal("global update before source update".into()))?;
        let batch = self.rating_batch(Region::Target, &[op_key::META, e]);
        let ev = self.eval_prediction(
            Region::Target,
            &self.state.theta_tgt,
            &batch,
            &[op_key::META, e],
        )?;
        self.check_divergence(ev.loss, "global update", epoch)?;
        self.state.theta_st = global_step(
            &self.state.theta_st,
            &pred_src,
            &ev.g_theta,
            &social.src,
            &social.tgt,
            self.cfg.lr_global,
            self.cfg.lr_social,
        );
        apply_table_grad(&mut self.state.eu_tgt, &ev.g_user, self.cfg.lr_global);
        apply_table_grad(&mut self.state.ep_tgt, &ev.g_poi, self.cfg.lr_global);
        Ok(ev.loss)
    }

    /// Cluster-alignment transfer if this epoch is on the period (mode
    /// `full` only).
    pub fn maybe_transfer(&mut self, epoch: u32) -> Result<Option<TransferOutcome>> {
        if self.cfg.mode != Mode::Full
            || self.cfg.transfer_every == 0
            || epoch % self.cfg.transfer_every != 0
        {
            return Ok(None);
        }
        let event = self.transfer_events;
        let outcome = apply_transfer(
            self.src_graph,
            self.tgt_graph,
            &mut self.state.eu_src,
            &mut self.state.ep_src,
            &mut self.state.eu_tgt,
            &mut self.state.ep_tgt,
            &mut self.state.beta_u,
            &mut self.state.beta_l,
            &self.cfg.transfer,
            self.root_seed,
            event,
        )?;
        self.transfer_events += 1;
        Ok(Some(outcome))
    }

    /// One full meta epoch (operations 1–4 plus the transfer trigger).
    pub fn epoch_body(&mut self, epoch: u32) -> Result<EpochStats> {
        let (loss_social_tgt, loss_social_src) = self.social_warm_update(epoch)?;
        let inner_losses = self.target_inner_loop(epoch)?;
        let loss_pred_src = self.source_update(epoch)?;
        let loss_pred_meta = self.global_update(epoch)?;
        let transfer = self.maybe_transfer(epoch)?;
        Ok(EpochStats {
            event: "epoch",
            epoch,
            loss_social_tgt,
            loss_social_src,
            inner_losses,
            loss_pred_src,
            loss_pred_meta,
            val_ndcg5: None,
            transfer,
        })
    }

    /// NDCG@5 on the target validation split with the current θ_tgt (None if
    /// the split has no evaluable users).
    pub fn validation_ndcg5(&self) -> Option<f64> {
        let state = EvalState {
            cfg: self.model_cfg,
            theta: &self.state.theta_tgt,
            emb_user: &self.state.eu_tgt,
            emb_poi: &self.state.ep_tgt,
        };
        let opts = EvalOptions {
            ks: vec![5],
            which: Which::Validation,
            transductive: false,
            per_user: false,
        };
        match evaluate_model(self.tgt_graph, self.tgt_split, &state, self.root_seed, &opts, None) {
            Ok((report, _)) => Some(report.ks[0].ndcg),
            Err(e) => {
                log::debug!("validation skipped: {e}");
                None
            }
        }
    }

    /// `validation_ndcg5` gated on the `val_every` cadence.
    fn maybe_validate(&self, epoch: u32) -> Option<f64> {
        if self.cfg.val_every > 0 && epoch % self.cfg.val_every == 0 {
            self.validation_ndcg5()
        } else {
            None
        }
    }

    /// One plain SGD step on the target prediction loss at `lr`, updating
    /// `theta_tgt` and the target tables (pre-training and fine-tuning).
    fn plain_target_step(&mut self, key: &[u64], lr: f64, epoch: u32) -> Result<f64> {
        let batch = self.rating_batch(Region::Target, key);
        let ev = self.eval_prediction(Region::Target, &self.state.theta_tgt, &batch, key)?;
        self.check_divergence(ev.loss, "target step", epoch)?;
        self.state.theta_tgt = sgd_step(&self.state.theta_tgt, &ev.g_theta, lr);
        apply_table_grad(&mut self.state.eu_tgt, &ev.g_user, lr);
        apply_table_grad(&mut self.state.ep_tgt, &ev.g_poi, lr);
        Ok(ev.loss)
    }

    /// One plain SGD step on the source prediction loss, updating θ_st and
    /// the source tables (source-only pretraining).
    fn plain_source_step(&mut self, key: &[u64], lr: f64, epoch: u32) -> Result<f64> {
        let batch = self.rating_batch(Region::Source, key);
        let ev = self.eval_prediction(Region::Source, &self.state.theta_st, &batch, key)?;
        self.check_divergence(ev.loss, "source step", epoch)?;
        self.state.theta_st = sgd_step(&self.state.theta_st, &ev.g_theta, lr);
        apply_table_grad(&mut self.state.eu_src, &ev.g_user, lr);
        apply_table_grad(&mut self.state.ep_src, &ev.g_poi, lr);
        Ok(ev.loss)
    }
}

struct RunLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl RunLog {
    fn create(dir: &Path) -> Result<RunLog> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_log.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunLog {
            out: BufWriter::new(file),
            path,
        })
    }

    fn record<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value)
            .map_err(|e| Error::Internal(format!("log serialization: {e}")))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug)]
pub struct TrainOutputs {
    pub state: TrainState,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub meta_epochs_run: u32,
    pub fine_tune_epochs_run: u32,
    pub final_val_ndcg5: Option<f64>,
}

#[derive(Serialize)]
struct RunStartRecord<'a> {
    event: &'static str,
    mode: &'a str,
    seed: u64,
    epochs: u32,
    resumed_from_epoch: Option<u32>,
}

#[derive(Serialize)]
struct FineTuneRecord {
    event: &'static str,
    epoch: u32,
    loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_ndcg5: Option<f64>,
}

#[derive(Serialize)]
struct PretrainRecord {
    event: &'static str,
    epoch: u32,
    mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_ndcg5: Option<f64>,
}

/// Where a resumed run picks up.
enum StartPoint {
    MetaEpoch(u32),
    FineTune,
    Done,
}

/// Run the configured training mode end to end, writing a line-delimited log
/// and checkpoints (at transfer boundaries, after the epoch loop, and at the
/// end) into `out_dir`.
pub fn train(
    src_graph: &MobilityGraph,
    tgt_graph: &MobilityGraph,
    src_split: &SplitDataset,
    tgt_split: &SplitDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    root_seed: u64,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutputs> {
    let mut run = TrainRun::new(
        src_graph, tgt_graph, src_split, tgt_split, model_cfg, cfg, root_seed,
    )?;
    let mut best_val = f64::NEG_INFINITY;
    let mut patience_used = 0u32;
    let start = match resume {
        None => StartPoint::MetaEpoch(1),
        Some(ck) => {
            if ck.mode != run.cfg.mode.name() {
                return Err(Error::Usage(format!(
                    "checkpoint was trained with mode {} but the run requests {}",
                    ck.mode,
                    run.cfg.mode.name()
                )));
            }
            run.state = TrainState::from_checkpoint(ck);
            run.root_seed = ck.root_seed;
            best_val = ck.best_val;
            patience_used = ck.patience_used;
            if run.cfg.mode == Mode::Full && run.cfg.transfer_every > 0 {
                run.transfer_events = (1..=ck.epoch)
                    .filter(|e| e % run.cfg.transfer_every == 0)
                    .count() as u64;
            }
            match ck.phase.as_str() {
                "meta" => StartPoint::MetaEpoch(ck.epoch + 1),
                "meta_done" => StartPoint::FineTune,
                "final" => StartPoint::Done,
                other => {
                    return Err(Error::Format {
                        path: PathBuf::new(),
                        reason: format!("unknown checkpoint phase {other:?}"),
                    })
                }
            }
        }
    };

    let mut log = RunLog::create(out_dir)?;
    log.record(&RunStartRecord {
        event: "run_start",
        mode: run.cfg.mode.name(),
        seed: run.root_seed,
        epochs: run.cfg.epochs,
        resumed_from_epoch: resume.map(|c| c.epoch),
    })?;

    let mut meta_epochs_run = 0u32;
    let steps_per_epoch = run.cfg.inner_steps as u64 + 2;

    if let StartPoint::MetaEpoch(first) = start {
        match run.cfg.mode {
            Mode::Full | Mode::AxoM => {
                for epoch in first..=run.cfg.epochs {
                    let mut stats = run.epoch_body(epoch)?;
                    stats.val_ndcg5 = run.maybe_validate(epoch);
                    let transferred = stats.transfer.is_some();
                    log.record(&stats)?;
                    meta_epochs_run = epoch;
                    if transferred {
                        let path =
                            out_dir.join(format!("checkpoint_transfer_{}.bin", run.transfer_events));
                        run.state
                            .to_checkpoint(run.cfg.mode, "meta", epoch, run.root_seed, best_val, patience_used)
                            .save(&path)?;
                    }
                    if let Some(v) = stats.val_ndcg5 {
                        if v > best_val {
                            best_val = v;
                            patience_used = 0;
                        } else {
                            patience_used += 1;
                            if patience_used >= run.cfg.patience {
                                log::info!("early stop after epoch {epoch} (no improvement in {patience_used} epochs)");
                                break;
                            }
                        }
                    }
                }
            }
            Mode::AxoF => {
                for epoch in first..=run.cfg.epochs {
                    let mut total = 0.0;
                    for step in 0..steps_per_epoch {
                        total += run.plain_source_step(
                            &[op_key::PRETRAIN, epoch as u64, step],
                            run.cfg.fine_tune_lr,
                            epoch,
                        )?;
                    }
                    meta_epochs_run = epoch;
                    log.record(&PretrainRecord {
                        event: "source_pretrain",
                        epoch,
                        mean_loss: total / steps_per_epoch as f64,
                        val_ndcg5: None,
                    })?;
                }
            }
            Mode::TargetOnly => {
                for epoch in first..=run.cfg.epochs {
                    let mut total = 0.0;
                    for step in 0..steps_per_epoch {
                        total += run.plain_target_step(
                            &[op_key::PRETRAIN, epoch as u64, step],
                            run.cfg.fine_tune_lr,
                            epoch,
                        )?;
                    }
                    meta_epochs_run = epoch;
                    let val = run.maybe_validate(epoch);
                    log.record(&PretrainRecord {
                        event: "target_pretrain",
                        epoch,
                        mean_loss: total / steps_per_epoch as f64,
                        val_ndcg5: val,
                    })?;
                    if let Some(v) = val {
                        if v > best_val {
                            best_val = v;
                            patience_used = 0;
                        } else {
                            patience_used += 1;
                            if patience_used >= run.cfg.patience {
                                log::info!("early stop after epoch {epoch}");
                                break;
                            }
                        }
                    }
                }
                // This mode trains θ_tgt directly; mirror it into θ_st so the
                // handoff below is uniform across modes.
                run.state.theta_st = run.state.theta_tgt.clone();
            }
        }
        // Fine-tuning always adapts a fresh copy of the shared parameters.
        run.state.theta_tgt = run.state.theta_st.clone();
        run.state
            .to_checkpoint(run.cfg.mode, "meta_done", meta_epochs_run, run.root_seed, best_val, patience_used)
            .save(&out_dir.join("checkpoint_meta_done.bin"))?;
    }

    let mut ft_epochs_run = 0u32;
    let mut final_val = None;
    if !matches!(start, StartPoint::Done) {
        let mut ft_best = f64::NEG_INFINITY;
        let mut ft_patience = 0u32;
        for fe in 1..=run.cfg.fine_tune_epochs {
            let loss =
                run.plain_target_step(&[op_key::FINE_TUNE, fe as u64], run.cfg.fine_tune_lr, fe)?;
            let val = run.maybe_validate(fe);
            ft_epochs_run = fe;
            log.record(&FineTuneRecord {
                event: "fine_tune",
                epoch: fe,
                loss,
                val_ndcg5: val,
            })?;
            if let Some(v) = val {
                final_val = Some(v);
                if v > ft_best {
                    ft_best = v;
                    ft_patience = 0;
                } else {
                    ft_patience += 1;
                    if ft_patience >= run.cfg.patience {
                        log::info!("fine-tune early stop after epoch {fe}");
                        break;
                    }
                }
            }
        }
    }

    let final_path = out_dir.join("checkpoint_final.bin");
    run.state
        .to_checkpoint(run.cfg.mode, "final", meta_epochs_run, run.root_seed, best_val, patience_used)
        .save(&final_path)?;
    Ok(TrainOutputs {
        state: run.state,
        log_path: log.path.clone(),
        final_checkpoint: final_path,
        meta_epochs_run,
        fine_tune_epochs_run: ft_epochs_run,
        final_val_ndcg5: final_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, KernelConfig};
    use crate::ingest::{temporal_split, Checkin, GeoPoint, Poi, RegionDataset, RegionTag};

    fn one_tensor(v: f64) -> Tensors {
        Tensors {
            list: vec![Tensor {
                name: "w".into(),
                rows: 1,
                cols: 1,
                data: vec![v],
            }],
        }
    }

    #[test]
    fn warm_step_hand_value() {
        // L = ½θ² has gradient θ: from θ=1 with ω=0.1 the warm copy is 0.9.
        let theta = one_tensor(1.0);
        let grad = one_tensor(1.0);
        let out = sgd_step(&theta, &grad, 0.1);
        assert!((out.list[0].data[0] - 0.9).abs() < 1e-15);
        // Purity: same inputs, same output.
        let again = sgd_step(&theta, &grad, 0.1);
        assert_eq!(out, again);
        // Zero gradient is a no-op.
        assert_eq!(sgd_step(&theta, &one_tensor(0.0), 0.1), theta);
    }

    #[test]
    fn inner_loop_hand_trajectory() {
        // L = ½(θ−1)², gradient θ−1, from θ_st=0, ω1=0.1: 0 → 0.1 → 0.19.
        let mut theta = one_tensor(0.0);
        let grad_at = |t: &Tensors| one_tensor(t.list[0].data[0] - 1.0);
        theta = sgd_step(&theta, &grad_at(&theta), 0.1);
        assert!((theta.list[0].data[0] - 0.1).abs() < 1e-15);
        theta = sgd_step(&theta, &grad_at(&theta), 0.1);
        assert!((theta.list[0].data[0] - 0.19).abs() < 1e-15);
    }

    #[test]
    fn global_step_hand_values() {
        let theta = one_tensor(1.0);
        let one = one_tensor(1.0);
        let zero = one_tensor(0.0);
        // All four unit gradients at ω2=ω3=0.001: θ − 0.004.
        let out = global_step(&theta, &one, &one, &one, &one, 0.001, 0.001);
        assert!((out.list[0].data[0] - 0.996).abs() < 1e-15);
        // Only the source prediction gradient: θ − ω2·g.
        let out = global_step(&theta, &one, &zero, &zero, &zero, 0.002, 0.1);
        assert!((out.list[0].data[0] - 0.998).abs() < 1e-15);
        // Zero gradients leave θ_st unchanged.
        let out = global_step(&theta, &zero, &zero, &zero, &zero, 0.001, 0.001);
        assert_eq!(out, theta);
        // ω2=ω3=0 freezes θ_st regardless of gradients.
        let out = global_step(&theta, &one, &one, &one, &one, 0.0, 0.0);
        assert_eq!(out, theta);
    }

    /// A small region: `n` users in a social ring, `m` POIs in a line, a few
    /// check-ins per user spread over time.
    fn region(tag: RegionTag, n: usize, m: usize, seed: i64) -> (MobilityGraph, SplitDataset) {
        let pois: Vec<Poi> = (0..m)
            .map(|i| Poi {
                poi_id: format!("p{i}"),
                location: GeoPoint::new(0.01 * i as f64, 0.0).unwrap(),
                category: ["Cafe", "Bar", "Park"][i % 3].into(),
            })
            .collect();
        let mut cks = Vec::new();
        let mut t = seed;
        for round in 0..6 {
            for u in 0..n {
                t += 1;
                cks.push(Checkin {
                    user_id: format!("u{u}"),
                    poi_id: format!("p{}", (u * 2 + round) % m),
                    timestamp: t,
                });
            }
        }
        let social: Vec<(String, String)> = (0..n)
            .map(|u| (format!("u{u}"), format!("u{}", (u + 1) % n)))
            .collect();
        let ds = RegionDataset::assemble(tag, cks, pois, social).unwrap();
        let split = temporal_split(&ds, (0.7, 0.1, 0.2)).unwrap();
        let graph = build_graph(&split.train, &KernelConfig::default()).unwrap();
        (graph, split)
    }

    fn small_cfgs() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            embed_dim: 4,
            mlp_hidden: 4,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            epochs: 2,
            batch_size: 4,
            inner_steps: 2,
            transfer_every: 0,
            mode: Mode::AxoM,
            fine_tune_epochs: 0,
            ..TrainConfig::default()
        };
        (model, train)
    }

    #[test]
    fn epochs_are_deterministic() {
        let (src, ssplit) = region(RegionTag::Source, 5, 5, 0);
        let (tgt, tsplit) = region(RegionTag::Target, 4, 5, 1000);
        let (mc, tc) = small_cfgs();
        let mut a = TrainRun::new(&src, &tgt, &ssplit, &tsplit, mc, tc.clone(), 7).unwrap();
        let mut b = TrainRun::new(&src, &tgt, &ssplit, &tsplit, mc, tc, 7).unwrap();
        a.epoch_body(1).unwrap();
        b.epoch_body(1).unwrap();
        assert_eq!(a.state.to_bytes(), b.state.to_bytes());
    }

    #[test]
    fn warm_update_is_pure_given_identical_state() {
        let (src, ssplit) = region(RegionTag::Source, 5, 5, 0);
        let (tgt, tsplit) = region(RegionTag::Target, 4, 5, 1000);
        let (mc, tc) = small_cfgs();
        let mut a = TrainRun::new(&src, &tgt, &ssplit, &tsplit, mc, tc.clone(), 3).unwrap();
        let mut b = TrainRun::new(&src, &tgt, &ssplit, &tsplit, mc, tc, 3).unwrap();
        a.social_warm_update(1).unwrap();
        b.social_warm_update(1).unwrap();
        assert_eq!(a.state.theta_tgt.to_bytes(), b.state.theta_tgt.to_bytes());
        assert_eq!(a.state.theta_src.to_bytes(), b.state.theta_src.to_bytes());
    }

    #[test]
    fn target_ops_never_touch_source_tables_and_vice_versa() {
        let (src, ssplit) = region(RegionTag::Source, 5, 5, 0);
        let (tgt, tsplit) = region(RegionTag::Target, 4, 5, 1000);
        let (mc, tc) = small_cfgs();
        let mut run = TrainRun::new(&src, &tgt, &ssplit, &tsplit, mc, tc, 11).unwrap();
        run.social_warm_update(1).unwrap();
        let src_tables = (run.state.eu_src.clone(), run.state.ep_src.clone());
        run.target_inner_loop(1).unwrap();
        assert_eq!(run.state.eu_src, src_tables.0);
        assert_eq!(run.state.ep_src, src_tables.1);
        let tgt_tables = (run.state.eu_tgt.clone(), run.state.ep_tgt.clone());
        run.source_update(1).unwrap();
        assert_eq!(run.state.eu_tgt, tgt_tables.0);
        assert_eq!(run.state.ep_tgt, tgt_tables.1);
    }

    #[test]
    fn global_update_requires_prior_ops() {
        let (src, ssplit) = region(RegionTag::Source, 5, 5, 0);
        let (tgt, tsplit) = region(RegionTag::Target, 4, 5, 1000);
        let (mc, tc) = small_cfgs();
        let mut run = TrainRun::new(&src, &tgt, &ssplit, &tsplit, mc, tc, 11).unwrap();
        assert!(run.global_update(1).is_err());
    }

    #[test]
    fn frozen_meta_rates_keep_theta_st_constant() {
        let (src, ssplit) = region(RegionTag::Source, 5, 5, 0);
        let (tgt, tsplit) = region(RegionTag::Target, 4, 5, 1000);
        let (mc, mut tc) = small_cfgs();
        tc.lr_global = 0.0;
        tc.lr_social = 0.0;
        let mut run = TrainRun::new(&src, &tgt, &ssplit, &tsplit, mc, tc, 13).unwrap();
        let before = run.state.theta_st.to_bytes();
        run.epoch_body(1).unwrap();
        run.epoch_body(2).unwrap();
        assert_eq!(run.state.theta_st.to_bytes(), before);
    }

    #[test]
    fn full_with_large_period_matches_axo_m() {
        let (src, ssplit) = region(RegionTag::Source, 5, 5, 0);
        let (tgt, tsplit) = region(RegionTag::Target, 4, 5, 1000);
        let (mc, mut tc) = small_cfgs();
        let tmp_a = tempfile::tempdir().unwrap();
        let tmp_b = tempfile::tempdir().unwrap();
        tc.mode = Mode::Full;
        tc.transfer_every = 99; // never fires in 2 epochs
        let a = train(&src, &tgt, &ssplit, &tsplit, mc, tc.clone(), 17, tmp_a.path(), None).unwrap();
        tc.mode = Mode::AxoM;
        let b = train(&src, &tgt, &ssplit, &tsplit, mc, tc, 17, tmp_b.path(), None).unwrap();
        assert_eq!(a.state.to_bytes(), b.state.to_bytes());
        // Logs differ only in the run-start record (mode name).
        let la = std::fs::read_to_string(a.log_path).unwrap();
        let lb = std::fs::read_to_string(b.log_path).unwrap();
        let tail = |s: &str| s.lines().skip(1).collect::<Vec<_>>().join("\n");
        assert_eq!(tail(&la), tail(&lb));
    }

    #[test]
    fn transfer_fires_on_period_and_checkpoints() {
        let (src, ssplit) = region(RegionTag::Source, 6, 6, 0);
        let (tgt, tsplit) = region(RegionTag::Target, 4, 5, 1000);
        let (mc, mut tc) = small_cfgs();
        tc.mode = Mode::Full;
        tc.epochs = 4;
        tc.transfer_every = 2;
        tc.transfer.k = 2;
        tc.patience = 100;
        let tmp = tempfile::tempdir().unwrap();
        train(&src, &tgt, &ssplit, &tsplit, mc, tc, 19, tmp.path(), None).unwrap();
        assert!(tmp.path().join("checkpoint_transfer_1.bin").exists());
        assert!(tmp.path().join("checkpoint_transfer_2.bin").exists());
        assert!(tmp.path().join("checkpoint_meta_done.bin").exists());
        assert!(tmp.path().join("checkpoint_final.bin").exists());
        let log = std::fs::read_to_string(tmp.path().join("train_log.jsonl")).unwrap();
        let transfers = log.lines().filter(|l| l.contains("\"transfer\":{")).count();
        assert_eq!(transfers, 2);
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_run() {
        let (src, ssplit) = region(RegionTag::Source, 6, 6, 0);
        let (tgt, tsplit) = region(RegionTag::Target, 4, 5, 1000);
        let (mc, mut tc) = small_cfgs();
        tc.mode = Mode::Full;
        tc.epochs = 4;
        tc.transfer_every = 2;
        tc.transfer.k = 2;
        tc.patience = 100;
        tc.fine_tune_epochs = 3;
        let tmp_a = tempfile::tempdir().unwrap();
        let straight =
            train(&src, &tgt, &ssplit, &tsplit, mc, tc.clone(), 23, tmp_a.path(), None).unwrap();
        // Resume from the epoch-2 transfer checkpoint in a fresh directory.
        let ck = Checkpoint::load(&tmp_a.path().join("checkpoint_transfer_1.bin")).unwrap();
        assert_eq!(ck.epoch, 2);
        let tmp_b = tempfile::tempdir().unwrap();
        let resumed =
            train(&src, &tgt, &ssplit, &tsplit, mc, tc, 23, tmp_b.path(), Some(&ck)).unwrap();
        assert_eq!(straight.state.to_bytes(), resumed.state.to_bytes());
    }

    #[test]
    fn divergent_learning_rate_aborts() {
        let (src, ssplit) = region(RegionTag::Source, 5, 5, 0);
        let (tgt, tsplit) = region(RegionTag::Target, 4, 5, 1000);
        let (mc, mut tc) = small_cfgs();
        tc.lr_inner = 1e14;
        tc.lr_social = 1e14;
        tc.epochs = 6;
        tc.divergence_threshold = 1e6;
        let tmp = tempfile::tempdir().unwrap();
        let res = train(&src, &tgt, &ssplit, &tsplit, mc, tc, 29, tmp.path(), None);
        assert!(res.is_err(), "expected divergence abort");
        let msg = format!("{}", res.err().unwrap());
        assert!(msg.contains("diverged"), "unexpected message: {msg}");
    }

    #[test]
    fn fine_tune_zero_epochs_hands_back_shared_parameters() {
        let (src, ssplit) = region(RegionTag::Source, 5, 5, 0);
        let (tgt, tsplit) = region(RegionTag::Target, 4, 5, 1000);
        let (mc, tc) = small_cfgs();
        let tmp = tempfile::tempdir().unwrap();
        let out = train(&src, &tgt, &ssplit, &tsplit, mc, tc, 31, tmp.path(), None).unwrap();
        assert_eq!(out.state.theta_tgt, out.state.theta_st);
        assert_eq!(out.fine_tune_epochs_run, 0);
    }

    #[test]
    fn source_only_mode_trains_without_target_batches_until_fine_tune() {
        let (src, ssplit) = region(RegionTag::Source, 5, 5, 0);
        let (tgt, tsplit) = region(RegionTag::Target, 4, 5, 1000);
        let (mc, mut tc) = small_cfgs();
        tc.mode = Mode::AxoF;
        tc.epochs = 2;
        tc.fine_tune_epochs = 2;
        tc.patience = 10;
        let init = TrainState::init(&mc, &src, &tgt, 37);
        let tmp = tempfile::tempdir().unwrap();
        let out = train(&src, &tgt, &ssplit, &tsplit, mc, tc, 37, tmp.path(), None).unwrap();
        // Source tables moved during pretraining; target tables moved only in
        // fine-tuning (prediction steps), never via source gradients.
        assert_ne!(out.state.eu_src.data, init.eu_src.data);
        assert_ne!(out.state.theta_st.to_bytes(), init.theta_st.to_bytes());
        let log = std::fs::read_to_string(out.log_path).unwrap();
        assert!(log.contains("source_pretrain"));
        assert!(log.contains("fine_tune"));
    }

    #[test]
    fn mode_strings_parse() {
        assert_eq!(Mode::parse("full").unwrap(), Mode::Full);
        assert_eq!(Mode::parse("axo-m").unwrap(), Mode::AxoM);
        assert_eq!(Mode::parse("axo-f").unwrap(), Mode::AxoF);
        assert_eq!(Mode::parse("target-only").unwrap(), Mode::TargetOnly);
        assert!(Mode::parse("bogus").is_err());
    }
}
