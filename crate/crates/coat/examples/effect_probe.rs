//! Temporary calibration probe for the headline experiment. Run as:
//! cargo run --release --example effect_probe -- <steps> <batch> <lr> <d_model> <seed>

use coat::evalharness::{evaluate, DemoSource, EvalConfig};
use coat::model::{ModelConfig, TinyLm};
use coat::prompts::build_vocab_over;
use coat::sampler::SelectionStrategy;
use coat::seeds::derive_seed;
use coat::syndata::{gen_dataset, split_unseen_concepts, split_validation};
use coat::trainer::{train_stage, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(400);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let d_model: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(32);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);

    let t0 = Instant::now();
    let full = gen_dataset(2000, 50, derive_seed(seed, "probe-data", 0)).unwrap();
    let (pool, test) = split_unseen_concepts(&full, 0.2, derive_seed(seed, "probe-split", 0)).unwrap();
    let (train, valid) = split_validation(&pool, 0.05, derive_seed(seed, "probe-valid", 0)).unwrap();
    let vocab = build_vocab_over([&train, &valid]).unwrap();
    println!(
        "data: {} train / {} valid / {} test, vocab {} ({:?})",
        train.len(),
        valid.len(),
        test.len(),
        vocab.len(),
        t0.elapsed()
    );

    let mcfg = ModelConfig {
        n_layers: 2,
        d_model,
        n_heads: 2,
        d_ff: d_model * 4,
        max_seq_len: 256,
        vocab_size: vocab.len(),
        dropout: 0.0,
    };

    for strategy in [
        SelectionStrategy::RandomUniform,
        SelectionStrategy::InfoOnly,
        SelectionStrategy::Coat,
    ] {
        let cfg = TrainConfig {
            strategy,
            lr,
            batch_size: batch,
            max_steps: steps,
            patience: 8,
            eval_interval: (steps / 8).max(1),
            pool_size: 20,
            scorer_refresh_steps: 1,
            seed: derive_seed(seed, "probe-train", 0),
        };
        let model = TinyLm::<f32>::new(mcfg.clone(), derive_seed(seed, "probe-init", 0)).unwrap();
        let t1 = Instant::now();
        let (best, log) = train_stage(model, &train, &valid, &cfg, &vocab).unwrap();
        let train_time = t1.elapsed();
        let ecfg = EvalConfig {
            k_shots: 3,
            demo_source: DemoSource::SameConcept,
            n_seeds: 1,
            seed_base: derive_seed(seed, "probe-eval", 0),
            max_new: 8,
        };
        let t2 = Instant::now();
        let (report, _) = evaluate(&best, &vocab, &test, &test, &ecfg, strategy.as_str()).unwrap();
        println!(
            "{:<16} acc {:>5.1}% ({}/{})  best_val {:.3} @ step {}  train {:?} eval {:?}",
            strategy.as_str(),
            report.accuracy * 100.0,
            report.correct,
            report.total,
            log.best_valid_loss().unwrap(),
            log.chosen_step,
            train_time,
            t2.elapsed()
        );
    }
}
