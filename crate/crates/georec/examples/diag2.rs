//! Scratch diagnostic: does source pretraining transfer? Fixed target budget,
//! varying source budget, paper-scale data.

use georec::eval::{evaluate_model, evaluate_popularity, EvalOptions, EvalState, Which};
use georec::graph::{build_graph, KernelConfig};
use georec::ingest::{filter_region, temporal_split, FilterThresholds};
use georec::model::ModelConfig;
use georec::synth::{generate, RegionSpec, SynthSpec};
use georec::train::{train, Mode, TrainConfig};


fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let s = SynthSpec {
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
    };
    let loose = FilterThresholds {
        min_poi_checkins: 2,
        min_user_checkins: 2,
        min_user_connections: 1,
    };
    let kernel = KernelConfig::default();
    let model_cfg = ModelConfig::default();
    let opts = EvalOptions { ks: vec![5], which: Which::Test, ..EvalOptions::default() };

    for lr_global in [0.01f64, 0.02] {
        let mut means = vec![Vec::new(); 2];
        for ds_seed in 1000..1005u64 {
            let (src, tgt, _) = generate(&s, ds_seed).unwrap();
            let fsrc = filter_region(&src, loose).unwrap();
            let ftgt = filter_region(&tgt, loose).unwrap();
            let ssrc = temporal_split(&fsrc, (0.7, 0.1, 0.2)).unwrap();
            let stgt = temporal_split(&ftgt, (0.7, 0.1, 0.2)).unwrap();
            let gsrc = build_graph(&ssrc.train, &kernel).unwrap();
            let gtgt = build_graph(&stgt.train, &kernel).unwrap();
            for (mi, mode) in [Mode::AxoM, Mode::Full].into_iter().enumerate() {
                let cfg = TrainConfig {
                    mode,
                    epochs: 500,
                    batch_size: 16,
                    inner_steps: 4,
                    transfer_every: 4,
                    fine_tune_epochs: 3000,
                    fine_tune_lr: 0.02,
                    lambda_l1: 1e-4,
                    lr_social: 1e-4,
                    lr_inner: 0.02,
                    lr_global,
                    social_anchor_cap: 128,
                    patience: 100000,
                    val_every: 500,
                    ..TrainConfig::default()
                };
                let out_dir = std::env::temp_dir().join(format!("georec-diag2-{}", mode.name()));
                let outputs =
                    match train(&gsrc, &gtgt, &ssrc, &stgt, model_cfg, cfg, ds_seed, &out_dir, None) {
                        Ok(o) => o,
                        Err(e) => {
                            println!("{} seed {ds_seed} lr_g {lr_global}: DIVERGED ({e})", mode.name());
                            continue;
                        }
                    };
                let es = EvalState {
                    cfg: model_cfg,
                    theta: &outputs.state.theta_tgt,
                    emb_user: &outputs.state.eu_tgt,
                    emb_poi: &outputs.state.ep_tgt,
                };
                let (rep, _) = evaluate_model(&gtgt, &stgt, &es, ds_seed, &opts, None).unwrap();
                means[mi].push(rep.ks[0].ndcg);
                print!("  {} s{} {:.4}", mode.name(), ds_seed - 1000, rep.ks[0].ndcg);
            }
            println!();
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        println!(
            "lr_global {lr_global}: axo-m mean {:.4}  full mean {:.4}",
            mean(&means[0]),
            mean(&means[1])
        );
    }
}
