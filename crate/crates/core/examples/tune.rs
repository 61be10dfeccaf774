//! Scratch experiment runner for tuning training knobs. Not part of the
//! deliverable surface; run with `cargo run --release -p diffpo-core --example tune`.

use diffpo_core::decode::ar_sample;
use diffpo_core::model::ModelConfig;
use diffpo_core::reward::{gen_corpus, gen_prompt, reward, RewardSpec, StyleMix};
use diffpo_core::trajectory::standardize_length;
use diffpo_core::train::{train_base, TrainConfig};
use diffpo_core::util::derive_seed;
use std::time::Instant;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "base-small".into());
    match mode.as_str() {
        "base-small" => base_experiment(small_cfg(), 256, 16, 10, 2e-3),
        "base-default" => base_experiment(ModelConfig::default(), 1024, 16, 3, 1e-3),
        "speed" => speed_probe(),
        "matmul" => matmul_probe(),
        "pipeline-small" => pipeline_small(),
        "pipeline-full" => pipeline_full(),
        other => eprintln!("unknown mode {other}"),
    }
}

fn small_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::micro(16, 4, 1, 4, 8);
    cfg.ffn_width = 32;
    cfg
}

fn base_experiment(cfg: ModelConfig, corpus_size: usize, batch: usize, epochs: usize, lr: f64) {
    let t0 = Instant::now();
    let mix = StyleMix::with_plus_probability(1.0);
    let corpus = gen_corpus(&mix, &cfg, corpus_size, 7).unwrap();
    let tc = TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        epochs,
        log_interval: 5,
        seed: 5,
        ..TrainConfig::default()
    };
    let model = train_base(&corpus, &cfg, &tc, |m| {
        println!("step {:4}  lr {:.5}  l_ar {:.4}", m.step, m.lr, m.l_ar);
    })
    .unwrap();
    println!("trained in {:.1?}", t0.elapsed());

    let spec = RewardSpec::default();
    let mut total = 0.0;
    let mut lens = 0usize;
    let evals = 100;
    for i in 0..evals {
        let prompt = gen_prompt(&cfg.vocab, derive_seed(99, "eval", i), cfg.prompt_len);
        let sample = ar_sample(&model, &prompt, &cfg, 0.7, i).unwrap();
        lens += sample.len();
        total += reward(&spec, &prompt, &standardize_length(&sample, cfg.response_len));
    }
    println!(
        "mean sample reward {:.3}  mean len {:.1}  ({:.1?} total)",
        total / evals as f64,
        lens as f64 / evals as f64,
        t0.elapsed()
    );
}

fn speed_probe() {
    let cfg = ModelConfig::default();
    let params = diffpo_core::model::init_params(&cfg, 0).unwrap();
    let prompt = gen_prompt(&cfg.vocab, 1, cfg.prompt_len);
    let t0 = Instant::now();
    let reps = 200;
    for i in 0..reps {
        let _ = ar_sample(&params, &prompt, &cfg, 0.7, i).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("ar_sample (untrained, full budget): {:.1} ms each", dt / reps as f64 * 1e3);
}

#[allow(dead_code)]
fn matmul_probe() {
    use diffpo_core::numkit::kernels::matmul_into;
    let (m, k, n) = (50, 64, 256);
    let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.1).sin()).collect();
    let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.2).cos()).collect();
    let mut out = vec![0.0; m * n];
    let reps = 2000;
    let t0 = Instant::now();
    for _ in 0..reps {
        matmul_into(&a, &b, &mut out, m, k, n);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n) as f64 * reps as f64;
    println!("matmul {}x{}x{}: {:.2} Gflop/s (checksum {})", m, k, n, flops / dt / 1e9, out[0]);
}

fn pipeline_small() {
    use diffpo_core::eval::{run_scenario_seed, ScenarioConfig};
    let mut cfg = ScenarioConfig::small();
    cfg.omega_values = vec![0.0, 1.0, 10.0];
    cfg.train_prompts = 200;
    cfg.heldout_prompts = 40;
    cfg.corpus_size = 256;
    cfg.base_train.epochs = 10;
    cfg.base_train.learning_rate = 2e-3;
    cfg.diffpo_train.epochs = 8;
    let t0 = Instant::now();
    let (report, _) = run_scenario_seed(&cfg, 1, |msg| eprintln!("[{:6.1?}] {msg}", t0.elapsed())).unwrap();
    println!("base mean {:.3}  best-of-pool {:.3}", report.base.mean, report.best_of_pool.mean);
    for o in &report.by_omega {
        println!(
            "omega {:5}  refined {:.3}  gain {:+.3}  jacobi passes {:.1}",
            o.omega, o.refined.mean, o.gain_over_base, o.mean_forward_passes
        );
    }
    for b in &report.blocks {
        println!("block {:2}  reward {:.3}  passes {:.1}", b.block, b.mean_reward, b.mean_forward_passes);
    }
    println!(
        "transfer: base {:.3} refined {:.3} second {:.3}",
        report.transfer.base.mean, report.transfer.refined.mean, report.transfer.second_pass.mean
    );
    println!("total {:.1?}", t0.elapsed());
}

fn pipeline_full() {
    use diffpo_core::eval::{run_scenario_seed, ScenarioConfig};
    let cfg = ScenarioConfig::default();
    let t0 = Instant::now();
    let (report, _) = run_scenario_seed(&cfg, 1, |msg| eprintln!("[{:7.1?}] {msg}", t0.elapsed())).unwrap();
    println!("base mean {:.3}  best-of-pool {:.3}", report.base.mean, report.best_of_pool.mean);
    for o in &report.by_omega {
        println!(
            "omega {:5}  refined {:.3}  gain {:+.3}  jacobi passes {:.1}",
            o.omega, o.refined.mean, o.gain_over_base, o.mean_forward_passes
        );
    }
    for b in &report.blocks {
        println!("block {:2}  reward {:.3}  passes {:.1}", b.block, b.mean_reward, b.mean_forward_passes);
    }
    println!(
        "transfer: base {:.3} refined {:.3} second {:.3}",
        report.transfer.base.mean, report.transfer.refined.mean, report.transfer.second_pass.mean
    );
    println!("total {:.1?}", t0.elapsed());
}
