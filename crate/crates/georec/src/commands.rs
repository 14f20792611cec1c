//! End-to-end pipeline stages shared by the binary and the examples.
//!
//! Each stage reads and writes well-known locations under the configured
//! output directory, so the stages compose without extra plumbing:
//!
//! * `gen-synth`   → `<out_dir>/data/{checkins,social}_<region>.tsv` + ground truth
//! * `build-graph` → `<out_dir>/graph_<region>.bin` + `<out_dir>/filtered/...`
//! * `train`       → `<out_dir>/train_log.jsonl` + checkpoints
//! * `evaluate`    → `<out_dir>/metrics_<region>_<split>.json`
//! * `recommend`   → ranked list on stdout (returned as a struct here)
//!
//! Explicit entries in the `[paths]` section override the conventions for
//! raw inputs, graph binaries, and the checkpoint.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, evaluate_popularity, final_embeddings, recommend_topk, EvalState,
    MetricsReport,
};
use crate::graph::{build_graph, GraphSummary, MobilityGraph};
use crate::ingest::{filter_region, load_region, temporal_split, RegionTag, SplitDataset};
use crate::model::Checkpoint;
use crate::synth::write_region_files;
use crate::train::{train, Mode, TrainOutputs};

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

fn filtered_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("filtered")
}

fn raw_paths(cfg: &RunConfig, tag: RegionTag) -> (PathBuf, PathBuf) {
    let (ck, so) = match tag {
        RegionTag::Source => (&cfg.paths.source_checkins, &cfg.paths.source_social),
        RegionTag::Target => (&cfg.paths.target_checkins, &cfg.paths.target_social),
    };
    let fallback = data_dir(cfg);
    let ck = if ck.as_os_str().is_empty() {
        fallback.join(format!("checkins_{tag}.tsv"))
    } else {
        ck.clone()
    };
    let so = if so.as_os_str().is_empty() {
        fallback.join(format!("social_{tag}.tsv"))
    } else {
        so.clone()
    };
    (ck, so)
}

fn graph_path(cfg: &RunConfig, tag: RegionTag) -> PathBuf {
    match tag {
        RegionTag::Source => cfg.source_graph_path(),
        RegionTag::Target => cfg.target_graph_path(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthOutputs {
    pub source_checkins: PathBuf,
    pub source_social: PathBuf,
    pub target_checkins: PathBuf,
    pub target_social: PathBuf,
    pub ground_truth: PathBuf,
}

/// Generate the paired synthetic regions configured in `[synth]` and write
/// them in ingest format plus a ground-truth sidecar.
pub fn cmd_gen_synth(cfg: &RunConfig) -> Result<SynthOutputs> {
    let (source, target, truth) = crate::synth::generate(&cfg.synth_spec(), cfg.seed)?;
    let dir = data_dir(cfg);
    let (sck, sso) = write_region_files(&dir, &source)?;
    let (tck, tso) = write_region_files(&dir, &target)?;
    let gt_path = dir.join("ground_truth.json");
    let file = std::fs::File::create(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &truth)
        .map_err(|e| Error::Internal(format!("writing ground truth: {e}")))?;
    log::info!(
        "generated {} source and {} target check-ins into {}",
        source.checkins.len(),
        target.checkins.len(),
        dir.display()
    );
    Ok(SynthOutputs {
        source_checkins: sck,
        source_social: sso,
        target_checkins: tck,
        target_social: tso,
        ground_truth: gt_path,
    })
}

fn build_one(cfg: &RunConfig, tag: RegionTag) -> Result<GraphSummary> {
    let (ck, so) = raw_paths(cfg, tag);
    let raw = load_region(tag, &ck, &so, &cfg.schema())?;
    let filters = match tag {
        RegionTag::Source => cfg.source_filters(),
        RegionTag::Target => cfg.target_filters(),
    };
    let filtered = filter_region(&raw, filters)?;
    write_region_files(&filtered_dir(cfg), &filtered)?;
    let split = temporal_split(&filtered, cfg.split_fractions())?;
    let graph = build_graph(&split.train, &cfg.kernel_config())?;
    graph.save(&graph_path(cfg, tag))?;
    let summary = graph.summary();
    log::info!(
        "{tag}: {} users, {} POIs, {} train check-ins -> {}",
        summary.users,
        summary.pois,
        summary.checkins,
        graph_path(cfg, tag).display()
    );
    Ok(summary)
}

/// Ingest, filter, split, and serialize both regions' graphs. The filtered
/// datasets are persisted alongside so later stages can recreate the exact
/// temporal split.
pub fn cmd_build_graph(cfg: &RunConfig) -> Result<(GraphSummary, GraphSummary)> {
    let src = build_one(cfg, RegionTag::Source)?;
    let tgt = build_one(cfg, RegionTag::Target)?;
    Ok((src, tgt))
}

fn load_split(cfg: &RunConfig, tag: RegionTag) -> Result<SplitDataset> {
    let dir = filtered_dir(cfg);
    let ck = dir.join(format!("checkins_{tag}.tsv"));
    let so = dir.join(format!("social_{tag}.tsv"));
    let filtered = load_region(tag, &ck, &so, &crate::ingest::ColumnSchema::default())?;
    temporal_split(&filtered, cfg.split_fractions())
}

fn load_stage(cfg: &RunConfig, tag: RegionTag) -> Result<(MobilityGraph, SplitDataset)> {
    let graph = MobilityGraph::load(&graph_path(cfg, tag))?;
    let split = load_split(cfg, tag)?;
    Ok((graph, split))
}

/// Run training per the `[train]` section, optionally resuming from a
/// checkpoint produced by an earlier interrupted run.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutputs> {
    let (src_graph, src_split) = load_stage(cfg, RegionTag::Source)?;
    let (tgt_graph, tgt_split) = load_stage(cfg, RegionTag::Target)?;
    let resume_ck = match resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    train(
        &src_graph,
        &tgt_graph,
        &src_split,
        &tgt_split,
        cfg.model()?,
        cfg.train_config()?,
        cfg.seed,
        &cfg.out_dir,
        resume_ck.as_ref(),
    )
}

/// Pick the parameters and embedding tables that drive a region's
/// recommendations out of a checkpoint.
fn eval_state<'a>(ck: &'a Checkpoint, cfg: &crate::model::ModelConfig, tag: RegionTag) -> EvalState<'a> {
    match tag {
        RegionTag::Target => EvalState {
            cfg: *cfg,
            theta: &ck.theta_tgt,
            emb_user: &ck.emb_user_tgt,
            emb_poi: &ck.emb_poi_tgt,
        },
        RegionTag::Source => EvalState {
            cfg: *cfg,
            theta: &ck.theta_src,
            emb_user: &ck.emb_user_src,
            emb_poi: &ck.emb_poi_src,
        },
    }
}

#[derive(Debug, Serialize)]
pub struct EvalBundle {
    pub model: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub popularity: Option<MetricsReport>,
    /// Users whose embeddings came from friends because they have no
    /// training history.
    pub cold_resolved_users: Vec<String>,
    #[serde(skip)]
    pub written_to: PathBuf,
}

/// Evaluate the checkpointed model on one region's held-out split, with an
/// optional popularity baseline under the identical protocol.
pub fn cmd_evaluate(cfg: &RunConfig, tag: RegionTag, baseline: bool) -> Result<EvalBundle> {
    let (graph, split) = load_stage(cfg, tag)?;
    let ck = Checkpoint::load(&cfg.checkpoint_path())?;
    let model_cfg = cfg.model()?;
    let opts = cfg.eval_options()?;
    let state = eval_state(&ck, &model_cfg, tag);
    let (model, fe) = evaluate_model(&graph, &split, &state, ck.root_seed, &opts, None)?;
    let popularity = if baseline {
        Some(evaluate_popularity(&graph, &split, &opts, None)?)
    } else {
        None
    };
    let written_to = cfg.out_dir.join(format!("metrics_{tag}_{}.json", model.split));
    let bundle = EvalBundle {
        model,
        popularity,
        cold_resolved_users: fe
            .cold_resolved
            .iter()
            .map(|&u| graph.users[u as usize].clone())
            .collect(),
        written_to,
    };
    let file = std::fs::File::create(&bundle.written_to)
        .map_err(|e| Error::io(&bundle.written_to, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &bundle)
        .map_err(|e| Error::Internal(format!("writing metrics: {e}")))?;
    Ok(bundle)
}

#[derive(Debug, Serialize)]
pub struct Recommendation {
    pub poi_id: String,
    pub category: String,
    pub score: f64,
}

#[derive(Debug, Serialize)]
pub struct Recommendations {
    pub user_id: String,
    pub region: String,
    pub cold_start: bool,
    pub items: Vec<Recommendation>,
}

/// Top-k recommendations for one user from the checkpointed model.
pub fn cmd_recommend(
    cfg: &RunConfig,
    tag: RegionTag,
    user_id: &str,
    k: usize,
    include_visited: bool,
) -> Result<Recommendations> {
    let graph = MobilityGraph::load(&graph_path(cfg, tag))?;
    let ck = Checkpoint::load(&cfg.checkpoint_path())?;
    let model_cfg = cfg.model()?;
    let state = eval_state(&ck, &model_cfg, tag);
    let fe = final_embeddings(&graph, &state, ck.root_seed);
    let ranked = recommend_topk(&state, &fe, &graph, user_id, k, !include_visited)?;
    let cold = graph
        .user_index(user_id)
        .map(|u| fe.cold_resolved.contains(&u))
        .unwrap_or(false);
    Ok(Recommendations {
        user_id: user_id.to_string(),
        region: tag.to_string(),
        cold_start: cold,
        items: ranked
            .into_iter()
            .map(|(poi_id, score)| {
                let category = graph
                    .poi_index(&poi_id)
                    .map(|p| graph.categories[graph.pois[p as usize].category as usize].clone())
                    .unwrap_or_default();
                Recommendation { poi_id, category, score }
            })
            .collect(),
    })
}

/// Parse a `--region` flag value.
pub fn parse_region(s: &str) -> Result<RegionTag> {
    match s {
        "source" => Ok(RegionTag::Source),
        "target" => Ok(RegionTag::Target),
        other => Err(Error::Usage(format!(
            "unknown region {other:?} (expected source or target)"
        ))),
    }
}

/// Parse a `--mode` style value (exposed for the examples).
pub fn parse_mode(s: &str) -> Result<Mode> {
    Mode::parse(s)
}
