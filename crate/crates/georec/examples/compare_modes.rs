//! Train the four modes on the same paired regions and compare target-region
//! ranking quality, the experiment that motivates cross-region transfer:
//!
//! * `full`        — meta-learning + periodic cluster-alignment transfer
//! * `axo-m`       — meta-learning without the transfer events
//! * `axo-f`       — source pretraining, then target fine-tuning only
//! * `target-only` — never touches the source region
//!
//! Also reports, for the full model, Precision@5 on cold-start users (no train
//! check-ins, ≥3 friends) against the popularity baseline.
//!
//! Run with: cargo run --release --example compare_modes -- [small|paper] [seeds] [epochs] [ft] [batch] [lr]
//! The `paper` preset uses the 20k/1.5k check-in budgets and takes minutes.

use georec::eval::{evaluate_model, evaluate_popularity, EvalOptions, EvalState, Which};
use georec::graph::{build_graph, KernelConfig, MobilityGraph};
use georec::ingest::{filter_region, temporal_split, FilterThresholds, SplitDataset};
use georec::model::ModelConfig;
use georec::synth::{generate, RegionSpec, SynthSpec};
use georec::train::{train, Mode, TrainConfig};
use std::collections::BTreeSet;

fn spec(preset: &str) -> SynthSpec {
    match preset {
        "paper" => SynthSpec {
            n_groups: 10,
            n_categories: 20,
            rho: 0.9,
            source: RegionSpec {
                n_users: 2000,
                n_pois: 500,
                n_checkins: 20_000,
                social_within: 0.02,
                social_between: 0.0005,
            },
            target: RegionSpec {
                n_users: 300,
                n_pois: 200,
                n_checkins: 1500,
                social_within: 0.1,
                social_between: 0.003,
            },
            n_cold_users: 30,
            cold_min_friends: 3,
        },
        _ => SynthSpec {
            n_groups: 5,
            n_categories: 10,
            rho: 0.9,
            source: RegionSpec {
                n_users: 200,
                n_pois: 80,
                n_checkins: 4000,
                social_within: 0.08,
                social_between: 0.002,
            },
            target: RegionSpec {
                n_users: 80,
                n_pois: 48,
                n_checkins: 700,
                social_within: 0.2,
                social_between: 0.008,
            },
            n_cold_users: 8,
            cold_min_friends: 3,
        },
    }
}

fn stage(s: &SynthSpec, seed: u64) -> ((MobilityGraph, SplitDataset), (MobilityGraph, SplitDataset)) {
    let (src, tgt, _) = generate(s, seed).unwrap();
    let kernel = KernelConfig::default();
    let loose = FilterThresholds {
        min_poi_checkins: 2,
        min_user_checkins: 2,
        min_user_connections: 1,
    };
    let mut out = Vec::new();
    for ds in [src, tgt] {
        let filtered = filter_region(&ds, loose).unwrap();
        let split = temporal_split(&filtered, (0.7, 0.1, 0.2)).unwrap();
        let graph = build_graph(&split.train, &kernel).unwrap();
        out.push((graph, split));
    }
    let tgt = out.pop().unwrap();
    let src = out.pop().unwrap();
    (src, tgt)
}

/// Users with no train check-ins but enough friends to resolve via the
/// friends'-mean substitution.
fn cold_users(graph: &MobilityGraph) -> BTreeSet<u32> {
    (0..graph.n_users())
        .filter(|&u| graph.user_pois[u].is_empty() && graph.social_adj[u].len() >= 3)
        .map(|u| u as u32)
        .collect()
}

struct RunMetrics {
    ndcg: f64,
    precision: f64,
    cold_p5: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_mode(
    mode: Mode,
    src: &(MobilityGraph, SplitDataset),
    tgt: &(MobilityGraph, SplitDataset),
    epochs: u32,
    fine_tune_epochs: u32,
    batch: usize,
    lr: f64,
    seed: u64,
) -> RunMetrics {
    let model_cfg = ModelConfig::default();
    let cfg = TrainConfig {
        mode,
        epochs,
        batch_size: batch,
        inner_steps: 4,
        transfer_every: 4,
        fine_tune_epochs,
        fine_tune_lr: lr,
        lr_inner: lr,
        social_anchor_cap: 128,
        patience: 1000,
        val_every: 500,
        lambda_l1: 1e-4,
        lr_social: 1e-4,
        ..TrainConfig::default()
    };
    let out_dir = std::env::temp_dir().join(format!(
        "georec-example-compare-{}-{}",
        mode.name(),
        seed
    ));
    let outputs = train(
        &src.0, &tgt.0, &src.1, &tgt.1, model_cfg, cfg, seed, &out_dir, None,
    )
    .unwrap();
    let state = EvalState {
        cfg: model_cfg,
        theta: &outputs.state.theta_tgt,
        emb_user: &outputs.state.eu_tgt,
        emb_poi: &outputs.state.ep_tgt,
    };
    let opts = EvalOptions {
        ks: vec![5],
        which: Which::Test,
        ..EvalOptions::default()
    };
    let (report, _) = evaluate_model(&tgt.0, &tgt.1, &state, seed, &opts, None).unwrap();
    let cold = cold_users(&tgt.0);
    let cold_p5 = if mode == Mode::Full && !cold.is_empty() {
        evaluate_model(&tgt.0, &tgt.1, &state, seed, &opts, Some(&cold))
            .ok()
            .map(|(r, _)| r.ks[0].precision)
    } else {
        None
    };
    RunMetrics {
        ndcg: report.ks[0].ndcg,
        precision: report.ks[0].precision,
        cold_p5,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let preset = args.first().map(String::as_str).unwrap_or("small");
    let n_seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let epochs: u32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(12);
    let ft: u32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(epochs * 2);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let s = spec(preset);
    println!(
        "preset {preset}: source {}u/{}ck, target {}u/{}ck, {n_seeds} seeds, {epochs} epochs + {ft} fine-tune, batch {batch}, lr {lr}",
        s.source.n_users, s.source.n_checkins, s.target.n_users, s.target.n_checkins
    );

    let modes = [Mode::Full, Mode::AxoM, Mode::AxoF, Mode::TargetOnly];
    let mut ndcg = vec![Vec::new(); modes.len()];
    let mut prec = vec![Vec::new(); modes.len()];
    let mut cold_model = Vec::new();
    let mut cold_pop = Vec::new();
    for seed in 0..n_seeds {
        let t0 = std::time::Instant::now();
        let (src, tgt) = stage(&s, 1000 + seed);
        let opts = EvalOptions { ks: vec![5], which: Which::Test, ..EvalOptions::default() };
        let pop = evaluate_popularity(&tgt.0, &tgt.1, &opts, None).unwrap();
        print!("seed {seed}:");
        for (i, &mode) in modes.iter().enumerate() {
            let m = run_mode(mode, &src, &tgt, epochs, ft, batch, lr, 1000 + seed);
            ndcg[i].push(m.ndcg);
            prec[i].push(m.precision);
            print!("  {} {:.4}", mode.name(), m.ndcg);
            if let Some(c) = m.cold_p5 {
                let cold = cold_users(&tgt.0);
                let pop_cold = evaluate_popularity(&tgt.0, &tgt.1, &opts, Some(&cold)).unwrap();
                cold_model.push(c);
                cold_pop.push(pop_cold.ks[0].precision);
                print!(" (cold P@5 {:.4} vs pop {:.4})", c, pop_cold.ks[0].precision);
            }
        }
        println!(
            "  pop {:.4}   ({:.1}s)",
            pop.ks[0].ndcg,
            t0.elapsed().as_secs_f64()
        );
    }

    println!("\nmean over {n_seeds} seeds:");
    println!("  {:<12} {:>8} {:>8}", "mode", "NDCG@5", "P@5");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for (i, &mode) in modes.iter().enumerate() {
        println!(
            "  {:<12} {:>8.4} {:>8.4}",
            mode.name(),
            mean(&ndcg[i]),
            mean(&prec[i])
        );
    }
    let full = mean(&ndcg[0]);
    let tgt_only = mean(&ndcg[3]);
    println!("\nfull vs target-only: {:+.1}% relative", 100.0 * (full - tgt_only) / tgt_only.max(1e-12));
    let wins = ndcg[0].iter().zip(&ndcg[2]).filter(|(f, a)| f > a).count();
    println!("full > axo-f on {wins}/{n_seeds} seeds");
    if !cold_model.is_empty() {
        let w = cold_model.iter().zip(&cold_pop).filter(|(m, p)| m > p).count();
        println!(
            "cold users: model P@5 {:.4} vs popularity {:.4} ({w}/{} seeds model wins)",
            mean(&cold_model),
            mean(&cold_pop),
            cold_model.len()
        );
    }
}
