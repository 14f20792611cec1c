//! Produce top-k POI recommendations for individual users, including a
//! cold-start user whose embedding is assembled from friends.
//!
//! Run with: cargo run --example recommend

use georec::commands::{cmd_build_graph, cmd_gen_synth, cmd_recommend, cmd_train};
use georec::config::load_config;
use georec::graph::MobilityGraph;
use georec::ingest::RegionTag;

fn main() -> Result<(), georec::error::Error> {
    let out_dir = std::env::temp_dir().join("georec-example-recommend");
    let sets = [
        format!("out_dir={}", out_dir.display()),
        "seed=9".into(),
        "synth.n_groups=4".into(),
        "synth.n_categories=8".into(),
        "synth.source.n_users=120".into(),
        "synth.source.n_pois=48".into(),
        "synth.source.n_checkins=2400".into(),
        "synth.source.social_within=0.1".into(),
        "synth.source.social_between=0.004".into(),
        "synth.target.n_users=50".into(),
        "synth.target.n_pois=32".into(),
        "synth.target.n_checkins=600".into(),
        "synth.target.social_within=0.25".into(),
        "synth.target.social_between=0.01".into(),
        "synth.n_cold_users=4".into(),
        "ingest.source_min_poi_checkins=2".into(),
        "ingest.source_min_user_checkins=2".into(),
        "ingest.source_min_user_connections=1".into(),
        "ingest.target_min_poi_checkins=1".into(),
        "ingest.target_min_user_checkins=1".into(),
        "ingest.target_min_user_connections=1".into(),
        "train.epochs=6".into(),
        "train.inner_steps=2".into(),
        "train.transfer_every=3".into(),
        "train.transfer.clusters=4".into(),
        "train.fine_tune_epochs=2".into(),
        "train.social_anchor_cap=128".into(),
        "model.embed_dim=8".into(),
        "model.mlp_hidden=16".into(),
    ];
    let cfg = load_config(None, &sets)?;

    cmd_gen_synth(&cfg)?;
    cmd_build_graph(&cfg)?;
    cmd_train(&cfg, None)?;

    let graph = MobilityGraph::load(&cfg.target_graph_path())?;

    // A warm user: someone with training history.
    let warm = graph
        .users
        .iter()
        .enumerate()
        .find(|(i, _)| !graph.user_pois[*i].is_empty())
        .map(|(_, u)| u.clone())
        .unwrap();
    let recs = cmd_recommend(&cfg, RegionTag::Target, &warm, 5, false)?;
    println!("top 5 for {} (cold: {}):", recs.user_id, recs.cold_start);
    for r in &recs.items {
        println!("  {:<8} {:<6} score {:.4}", r.poi_id, r.category, r.score);
    }

    // A cold user: zero training check-ins, embedded via friends' mean.
    if let Some((i, cold)) = graph
        .users
        .iter()
        .enumerate()
        .find(|(i, _)| graph.user_pois[*i].is_empty() && !graph.social_adj[*i].is_empty())
    {
        let recs = cmd_recommend(&cfg, RegionTag::Target, cold, 5, false)?;
        println!(
            "\ntop 5 for {} ({} friends, cold: {}):",
            recs.user_id,
            graph.social_adj[i].len(),
            recs.cold_start
        );
        for r in &recs.items {
            println!("  {:<8} {:<6} score {:.4}", r.poi_id, r.category, r.score);
        }
    }

    // A user the region has never seen fails loudly.
    match cmd_recommend(&cfg, RegionTag::Target, "stranger", 5, false) {
        Err(e) => println!("\nunknown user -> {e}"),
        Ok(_) => unreachable!("stranger should not be recommendable"),
    }
    Ok(())
}
