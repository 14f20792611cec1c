//! End-to-end training with cross-region transfer: generate paired regions,
//! build graphs, run the meta-training loop with periodic cluster-alignment
//! transfer, and show what landed in the training log.
//!
//! Run with: cargo run --example train_transfer

use georec::commands::{cmd_build_graph, cmd_gen_synth, cmd_train};
use georec::config::load_config;

fn main() -> Result<(), georec::error::Error> {
    let out_dir = std::env::temp_dir().join("georec-example-train");
    let sets = [
        format!("out_dir={}", out_dir.display()),
        "seed=3".into(),
        "mode=full".into(),
        // A small region pair keeps the example quick.
        "synth.n_groups=5".into(),
        "synth.n_categories=10".into(),
        "synth.source.n_users=150".into(),
        "synth.source.n_pois=60".into(),
        "synth.source.n_checkins=3000".into(),
        "synth.source.social_within=0.08".into(),
        "synth.source.social_between=0.003".into(),
        "synth.target.n_users=60".into(),
        "synth.target.n_pois=40".into(),
        "synth.target.n_checkins=600".into(),
        "synth.target.social_within=0.2".into(),
        "synth.target.social_between=0.01".into(),
        "ingest.source_min_poi_checkins=2".into(),
        "ingest.source_min_user_checkins=2".into(),
        "ingest.source_min_user_connections=1".into(),
        "ingest.target_min_poi_checkins=1".into(),
        "ingest.target_min_user_checkins=1".into(),
        "ingest.target_min_user_connections=1".into(),
        "train.epochs=6".into(),
        "train.batch_size=16".into(),
        "train.inner_steps=2".into(),
        "train.transfer_every=3".into(),
        "train.transfer.clusters=5".into(),
        "train.transfer.steps=3".into(),
        "train.fine_tune_epochs=3".into(),
        "train.social_anchor_cap=128".into(),
        "model.embed_dim=8".into(),
        "model.mlp_hidden=16".into(),
    ];
    let cfg = load_config(None, &sets)?;

    cmd_gen_synth(&cfg)?;
    let (src, tgt) = cmd_build_graph(&cfg)?;
    println!("source graph: {src:?}");
    println!("target graph: {tgt:?}");

    let out = cmd_train(&cfg, None)?;
    println!(
        "\ntrained {} meta epochs + {} fine-tune epochs; final val NDCG@5 {:?}",
        out.meta_epochs_run, out.fine_tune_epochs_run, out.final_val_ndcg5
    );
    println!("checkpoint: {}", out.final_checkpoint.display());

    // The JSONL log has one record per epoch; transfer events carry the
    // cluster-alignment loss and the attention-vs-similarity buckets.
    let log = std::fs::read_to_string(&out.log_path).unwrap();
    println!("\nlog records:");
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        match v["event"].as_str() {
            Some("epoch") => {
                let e = v["epoch"].as_u64().unwrap();
                let social = v["loss_social_tgt"].as_f64().unwrap_or(f64::NAN);
                let pred = v["loss_pred_meta"].as_f64().unwrap_or(f64::NAN);
                let transferred = v.get("transfer").is_some();
                println!(
                    "  epoch {e}: social {social:.5}, meta prediction {pred:.5}{}",
                    if transferred { ", transfer fired" } else { "" }
                );
                if let Some(t) = v.get("transfer") {
                    println!(
                        "    alignment loss {} -> {}",
                        t["loss_before"], t["loss_after"]
                    );
                }
            }
            Some("fine_tune") => {
                println!("  fine-tune {}: loss {}", v["epoch"], v["loss"]);
            }
            _ => println!("  {line}"),
        }
    }
    Ok(())
}
