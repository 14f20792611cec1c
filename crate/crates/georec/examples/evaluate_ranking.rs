//! Evaluate a trained checkpoint on the target region's held-out check-ins:
//! Precision@k and NDCG@k for the model and a train-popularity baseline,
//! plus the metrics restricted to planted cold-start users.
//!
//! Run with: cargo run --example evaluate_ranking

use std::collections::BTreeSet;

use georec::commands::{cmd_build_graph, cmd_evaluate, cmd_gen_synth, cmd_train};
use georec::config::load_config;
use georec::eval::{evaluate_popularity, EvalOptions};
use georec::graph::MobilityGraph;
use georec::ingest::{load_region, temporal_split, ColumnSchema, RegionTag};

fn main() -> Result<(), georec::error::Error> {
    let out_dir = std::env::temp_dir().join("georec-example-eval");
    let sets = [
        format!("out_dir={}", out_dir.display()),
        "seed=5".into(),
        "synth.n_groups=5".into(),
        "synth.n_categories=10".into(),
        "synth.source.n_users=150".into(),
        "synth.source.n_pois=60".into(),
        "synth.source.n_checkins=3000".into(),
        "synth.source.social_within=0.08".into(),
        "synth.source.social_between=0.003".into(),
        "synth.target.n_users=60".into(),
        "synth.target.n_pois=40".into(),
        "synth.target.n_checkins=700".into(),
        "synth.target.social_within=0.2".into(),
        "synth.target.social_between=0.01".into(),
        "synth.n_cold_users=6".into(),
        "ingest.source_min_poi_checkins=2".into(),
        "ingest.source_min_user_checkins=2".into(),
        "ingest.source_min_user_connections=1".into(),
        "ingest.target_min_poi_checkins=1".into(),
        "ingest.target_min_user_checkins=1".into(),
        "ingest.target_min_user_connections=1".into(),
        "train.epochs=8".into(),
        "train.inner_steps=2".into(),
        "train.transfer_every=4".into(),
        "train.transfer.clusters=5".into(),
        "train.fine_tune_epochs=3".into(),
        "train.social_anchor_cap=128".into(),
        "model.embed_dim=8".into(),
        "model.mlp_hidden=16".into(),
    ];
    let cfg = load_config(None, &sets)?;

    cmd_gen_synth(&cfg)?;
    cmd_build_graph(&cfg)?;
    cmd_train(&cfg, None)?;

    let bundle = cmd_evaluate(&cfg, RegionTag::Target, true)?;
    println!("model ({} evaluable users):", bundle.model.n_users);
    for km in &bundle.model.ks {
        println!("  P@{:<2} {:.4}   NDCG@{:<2} {:.4}", km.k, km.precision, km.k, km.ndcg);
    }
    let pop = bundle.popularity.as_ref().unwrap();
    println!("popularity baseline:");
    for km in &pop.ks {
        println!("  P@{:<2} {:.4}   NDCG@{:<2} {:.4}", km.k, km.precision, km.k, km.ndcg);
    }
    println!("cold users resolved from friends: {:?}", bundle.cold_resolved_users);

    // The same popularity protocol restricted to the cold users only.
    let graph = MobilityGraph::load(&cfg.target_graph_path())?;
    let filtered_dir = cfg.out_dir.join("filtered");
    let filtered = load_region(
        RegionTag::Target,
        &filtered_dir.join("checkins_target.tsv"),
        &filtered_dir.join("social_target.tsv"),
        &ColumnSchema::default(),
    )?;
    let split = temporal_split(&filtered, cfg.split_fractions())?;
    let cold: BTreeSet<u32> = bundle
        .cold_resolved_users
        .iter()
        .filter_map(|u| graph.user_index(u))
        .collect();
    if !cold.is_empty() {
        let opts = EvalOptions { ks: vec![5], ..EvalOptions::default() };
        let pop_cold = evaluate_popularity(&graph, &split, &opts, Some(&cold))?;
        println!(
            "popularity P@5 on the {} cold users: {:.4}",
            pop_cold.n_users, pop_cold.ks[0].precision
        );
    }
    println!("full report written to {}", bundle.written_to.display());
    Ok(())
}
