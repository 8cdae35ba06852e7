//! Temporary calibration probe for the toy-model experiments; deleted
//! before the suite ships.

use eigenscore::linalg::Vector;
use eigenscore::scores;
use eigenscore::send::{
    generate_k_outputs, normal_loop, record_representations, send_loop, split_dataset,
    synthetic_corpus, train_checkpoint, SendConfig, ToyModel, ToyModelConfig,
};
use eigenscore::sensitivity::{sei_dropout_experiment, CheckpointSeries, DropoutMask};

fn model_cfg(seed: u64) -> ToyModelConfig {
    ToyModelConfig {
        init_seed: seed,
        ..ToyModelConfig::default()
    }
}

#[test]
#[ignore]
fn probe_sei_direction() {
    // Criterion-8 shape: per seed, train plain, track representations,
    // generate per-datapoint embedding matrices, compare SEI vs random.
    for (k_pct, checkpoints, noise) in [(10.0, 9usize, 0.15), (20.0, 9, 0.15), (10.0, 9, 0.3)] {
        let mut diffs = Vec::new();
        for seed in 0..5u64 {
            let corpus = synthetic_corpus(120, 20, 32, noise, 1000 + seed);
            let (train, track) = split_dataset(&corpus, 90.0, seed).unwrap();
            let mut model = ToyModel::new(&model_cfg(seed)).unwrap();
            let empty = DropoutMask::empty(64);
            let mut recs: Vec<Vec<Vector>> = Vec::new();
            for cp in 0..checkpoints {
                train_checkpoint(&mut model, &train, &empty, cp, seed).unwrap();
                recs.push(record_representations(&model, &track, &empty).unwrap());
            }
            let n_track = track.len().min(8);
            let mut sets = Vec::new();
            let mut series = Vec::new();
            for dp in 0..n_track {
                let s = CheckpointSeries::new(
                    format!("dp{dp}"),
                    recs.iter()
                        .enumerate()
                        .map(|(t, r)| (t as u64, r[dp].clone()))
                        .collect(),
                )
                .unwrap();
                let prompt = &track[dp][..4.min(track[dp].len())];
                let e = generate_k_outputs(&model, &empty, prompt, 10, 0.5, 555 + dp as u64)
                    .unwrap();
                sets.push(e);
                series.push(s);
            }
            let report =
                sei_dropout_experiment(&sets, &series, k_pct, 1e-3, 20, 77 + seed).unwrap();
            println!(
                "k={k_pct} noise={noise} seed={seed}: sei {:.4} random {:.4} diff {:+.4}",
                report.sei_mean,
                report.random_mean,
                report.sei_mean - report.random_mean
            );
            diffs.push(report.sei_mean - report.random_mean);
        }
        let mean: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
        println!("  => k={k_pct} noise={noise} mean diff {mean:+.4} ({diffs:?})\n");
    }
}

#[test]
#[ignore]
fn probe_send_variance() {
    // Criterion-9 shape: seed-matched pairs, checkpoint-wise EES variance
    // and final EES comparison.
    for (lr, noise, k, cps) in [
        (0.15, 0.3, 20.0, 24usize),
        (0.15, 0.2, 20.0, 24),
        (0.2, 0.3, 20.0, 20),
        (0.15, 0.3, 25.0, 24),
    ] {
        let mut wins = 0;
        let mut finals = Vec::new();
        for seed in 0..5u64 {
            let corpus = synthetic_corpus(160, 20, 32, noise, 2000 + seed);
            let cfg = SendConfig {
                epsilon: 1e-9,
                delta: -100.0,
                max_checkpoints: cps,
                k_percent: k,
                seed,
                ..SendConfig::default()
            };
            let mcfg = ToyModelConfig {
                learning_rate: lr,
                init_seed: seed,
                ..ToyModelConfig::default()
            };
            let s = send_loop(&cfg, &mcfg, &corpus).unwrap();
            let n = normal_loop(&cfg, &mcfg, &corpus).unwrap();
            let report = eigenscore::send::compare_runs(&s, &n).unwrap();
            println!(
                "lr={lr} noise={noise} k={k} cps={cps} seed={seed}: var send {:.3e} normal {:.3e} | final send {:.4} normal {:.4} | overhead {:.1}%",
                report.send_ees_variance,
                report.normal_ees_variance,
                report.send_final_ees,
                report.normal_final_ees,
                report.overhead_percent
            );
            if report.send_ees_variance < report.normal_ees_variance {
                wins += 1;
            }
            finals.push((report.send_final_ees, report.normal_final_ees));
        }
        let mean_send: f64 = finals.iter().map(|f| f.0).sum::<f64>() / finals.len() as f64;
        let mean_normal: f64 = finals.iter().map(|f| f.1).sum::<f64>() / finals.len() as f64;
        println!(
            "  => lr={lr} noise={noise} k={k} cps={cps}: variance wins {wins}/5, mean final send {mean_send:.4} vs normal {mean_normal:.4}\n"
        );
    }
    let _ = scores::DEFAULT_ALPHA;
}

#[test]
#[ignore]
fn probe_trajectories() {
    for k in [10.0f64, 20.0] {
        for seed in 0..2u64 {
            let corpus = synthetic_corpus(160, 20, 32, 0.3, 2000 + seed);
            let cfg = SendConfig {
                epsilon: 1e-9,
                delta: -100.0,
                max_checkpoints: 24,
                k_percent: k,
                seed,
                ..SendConfig::default()
            };
            let mcfg = ToyModelConfig {
                init_seed: seed,
                ..ToyModelConfig::default()
            };
            let s = send_loop(&cfg, &mcfg, &corpus).unwrap();
            let n = normal_loop(&cfg, &mcfg, &corpus).unwrap();
            let fmt = |log: &eigenscore::send::RunLog| {
                log.records
                    .iter()
                    .map(|r| format!("{:+.3}", r.ees))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            println!("k={k} seed={seed}\n  send:   {}\n  normal: {}", fmt(&s), fmt(&n));
            let masks: Vec<String> = s
                .records
                .iter()
                .map(|r| format!("{}", r.active_mask.len()))
                .collect();
            // How much does the selection churn between windows?
            let mut churn = Vec::new();
            let t = cfg.t_window;
            let mut prev: Option<&Vec<usize>> = None;
            for (i, r) in s.records.iter().enumerate() {
                if i % t == 0 && i > 0 {
                    if let Some(p) = prev {
                        let same = r.active_mask.iter().filter(|x| p.contains(x)).count();
                        churn.push(format!("{}/{}", same, r.active_mask.len().max(1)));
                    }
                    prev = Some(&r.active_mask);
                }
                if i == 0 {
                    prev = Some(&r.active_mask);
                }
            }
            println!("  mask sizes: {} | overlap: {churn:?}", masks.join(","));
        }
    }
}
