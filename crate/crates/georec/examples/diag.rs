//! Scratch diagnostic (not part of the example suite): watch what moves
//! during plain target-region training at different learning rates.

use georec::eval::{evaluate_model, evaluate_popularity, EvalOptions, EvalState, Which};
use georec::graph::{build_graph, KernelConfig};
use georec::ingest::{filter_region, temporal_split, FilterThresholds};
use georec::model::ModelConfig;
use georec::synth::{generate, RegionSpec, SynthSpec};
use georec::train::{train, Mode, TrainConfig, TrainState};

fn main() {
    let s = SynthSpec {
        n_groups: 10,
        n_categories: 20,
        rho: 0.9,
        source: RegionSpec {
            n_users: 200,
            n_pois: 120,
            n_checkins: 4000,
            social_within: 0.05,
            social_between: 0.002,
        },
        target: RegionSpec {
            n_users: 80,
            n_pois: 100,
            n_checkins: 700,
            social_within: 0.12,
            social_between: 0.006,
        },
        n_cold_users: 8,
        cold_min_friends: 3,
    };
    let (src, tgt, _) = generate(&s, 1000).unwrap();
    let kernel = KernelConfig::default();
    let loose = FilterThresholds {
        min_poi_checkins: 2,
        min_user_checkins: 2,
        min_user_connections: 1,
    };
    let fsrc = filter_region(&src, loose).unwrap();
    let ftgt = filter_region(&tgt, loose).unwrap();
    let ssrc = temporal_split(&fsrc, (0.7, 0.1, 0.2)).unwrap();
    let stgt = temporal_split(&ftgt, (0.7, 0.1, 0.2)).unwrap();
    let gsrc = build_graph(&ssrc.train, &kernel).unwrap();
    let gtgt = build_graph(&stgt.train, &kernel).unwrap();

    let model_cfg = ModelConfig::default();
    let opts = EvalOptions { ks: vec![5], which: Which::Test, ..EvalOptions::default() };
    let pop = evaluate_popularity(&gtgt, &stgt, &opts, None).unwrap();
    println!(
        "target: {} users {} pois {} train checkins; popularity NDCG@5 {:.4}",
        gtgt.n_users(),
        gtgt.n_pois(),
        gtgt.checkin_counts.iter().map(|v| v.iter().map(|(_, c)| *c as usize).sum::<usize>()).sum::<usize>(),
        pop.ks[0].ndcg
    );

    let init = TrainState::init(&model_cfg, &gsrc, &gtgt, 7);
    {
        // Where does entity-to-entity variation die at init?
        let es = EvalState {
            cfg: model_cfg,
            theta: &init.theta_tgt,
            emb_user: &init.eu_tgt,
            emb_poi: &init.ep_tgt,
        };
        let fe = georec::eval::final_embeddings(&gtgt, &es, 7);
        let spread = |rows: &[Vec<f64>]| {
            let d = rows[0].len();
            let mut tot = 0.0;
            for j in 0..d {
                let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                let m = col.iter().sum::<f64>() / col.len() as f64;
                tot += (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            }
            tot / d as f64
        };
        let raw_u: Vec<Vec<f64>> = (0..gtgt.n_users()).map(|u| init.eu_tgt.row(u).to_vec()).collect();
        let raw_p: Vec<Vec<f64>> = (0..gtgt.n_pois()).map(|p| init.ep_tgt.row(p).to_vec()).collect();
        println!(
            "init spreads: raw emb u {:.2e} p {:.2e}  | fused U_f {:.2e} L_f {:.2e}",
            spread(&raw_u), spread(&raw_p), spread(&fe.user), spread(&fe.poi)
        );
        let scored: Vec<f64> = (0..gtgt.n_pois())
            .map(|p| georec::model::predict_plain(&init.theta_tgt, &model_cfg, &fe.user[0], &fe.poi[p]))
            .collect();
        let mean = scored.iter().sum::<f64>() / scored.len() as f64;
        let var = scored.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scored.len() as f64;
        println!("init r-hat over POIs for user 0: mean {mean:.3e} std {:.3e}", var.sqrt());
    }
    // Does a larger embedding scale + weaker L1 unlock learning? Plain target
    // steps via the public inner-loop OP.
    for (scale, lam) in [(1.0, 0.01), (40.0, 0.01), (40.0, 1e-4), (10.0, 1e-3)] {
        let cfg = TrainConfig {
            mode: Mode::TargetOnly,
            inner_steps: 400,
            lr_inner: 0.01,
            batch_size: 32,
            lambda_l1: lam,
            ..TrainConfig::default()
        };
        let mut run =
            georec::train::TrainRun::new(&gsrc, &gtgt, &ssrc, &stgt, model_cfg, cfg, 7).unwrap();
        for x in run.state.eu_tgt.data.iter_mut() {
            *x *= scale;
        }
        for x in run.state.ep_tgt.data.iter_mut() {
            *x *= scale;
        }
        let losses = match run.target_inner_loop(0) {
            Ok(l) => l,
            Err(e) => {
                println!("scale {scale:<4} lam {lam:<6} DIVERGED: {e}");
                continue;
            }
        };
        let es = EvalState {
            cfg: model_cfg,
            theta: &run.state.theta_tgt,
            emb_user: &run.state.eu_tgt,
            emb_poi: &run.state.ep_tgt,
        };
        let (rep, fe) = evaluate_model(&gtgt, &stgt, &es, 7, &opts, None).unwrap();
        let scored: Vec<f64> = (0..gtgt.n_pois())
            .map(|p| georec::model::predict_plain(&run.state.theta_tgt, &model_cfg, &fe.user[0], &fe.poi[p]))
            .collect();
        let mean = scored.iter().sum::<f64>() / scored.len() as f64;
        let var = scored.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scored.len() as f64;
        println!(
            "scale {scale:<4} lam {lam:<6} 400 steps lr 0.01: NDCG@5 {:.4}  loss {:.2}->{:.2}  r-hat std {:.2e}",
            rep.ks[0].ndcg,
            losses[0],
            losses[losses.len() - 1],
            var.sqrt()
        );
    }
    for (lr, ft) in [] as [(f64, u32); 0] {
        let cfg = TrainConfig {
            mode: Mode::TargetOnly,
            epochs: 0,
            batch_size: 32,
            fine_tune_lr: lr,
            fine_tune_epochs: ft,
            patience: 100000,
            ..TrainConfig::default()
        };
        let out_dir = std::env::temp_dir().join(format!("georec-diag-{lr}-{ft}"));
        let outputs = train(&gsrc, &gtgt, &ssrc, &stgt, model_cfg, cfg, 7, &out_dir, None).unwrap();
        let st = &outputs.state;
        let drift = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        };
        let eu_drift = drift(&st.eu_tgt.data, &init.eu_tgt.data);
        let ep_drift = drift(&st.ep_tgt.data, &init.ep_tgt.data);
        let th_init: f64 = init.theta_tgt.list.iter().map(|t| t.data.iter().map(|x| x.abs()).sum::<f64>()).sum();
        let th_now: f64 = st.theta_tgt.list.iter().map(|t| t.data.iter().map(|x| x.abs()).sum::<f64>()).sum();

        let es = EvalState {
            cfg: model_cfg,
            theta: &st.theta_tgt,
            emb_user: &st.eu_tgt,
            emb_poi: &st.ep_tgt,
        };
        let (rep, fe) = evaluate_model(&gtgt, &stgt, &es, 7, &opts, None).unwrap();
        // Prediction spread for user 0 over all POIs.
        let scored: Vec<f64> = (0..gtgt.n_pois())
            .map(|p| georec::model::predict_plain(&st.theta_tgt, &model_cfg, &fe.user[0], &fe.poi[p]))
            .collect();
        let mean = scored.iter().sum::<f64>() / scored.len() as f64;
        let var = scored.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scored.len() as f64;
        println!(
            "lr {lr:<5} ft {ft:<4} NDCG@5 {:.4}  emb drift u {eu_drift:.2e} p {ep_drift:.2e}  |theta|1 {:.1}->{:.1}  r-hat mean {mean:.4} std {:.2e}",
            rep.ks[0].ndcg, th_init, th_now, var.sqrt()
        );
    }
}
