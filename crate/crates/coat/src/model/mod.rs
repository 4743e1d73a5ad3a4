//! The trainable model: a decoder-only transformer, its optimizer, a
//! finite-difference gradient check, greedy decoding, and checkpoints.

mod checkpoint;
mod config;
mod decode;
mod gradcheck;
mod optim;
mod params;
mod scalar;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use decode::argmax_lowest_id;
pub use optim::OptimizerState;
pub use params::{Layout, LayerOffsets, TensorEntry};
pub use scalar::Scalar;
pub use transformer::{KvCache, TinyLm};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CoatError;
    use crate::prompts::EOS_ID;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const VOCAB: usize = 11;

    fn model_f64(seed: u64) -> TinyLm<f64> {
        TinyLm::new(ModelConfig::tiny(VOCAB), seed).unwrap()
    }

    fn random_ids(rng: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
        (0..len).map(|_| rng.random_range(0..VOCAB as u32)).collect()
    }

    fn full_mask(len: usize) -> Vec<bool> {
        (0..len).map(|t| t + 1 < len).collect()
    }

    #[test]
    fn fresh_model_is_uniform() {
        let m = model_f64(3);
        let probs = m.forward(&[1, 2, 3, 4]).unwrap();
        for row in &probs {
            for &p in row {
                assert_relative_eq!(p, 1.0 / VOCAB as f64, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let m = model_f64(5);
        let ids = vec![3, 4, 5, 6, 7];
        let loss = m.nll_loss(&ids, &full_mask(5)).unwrap();
        assert!((loss - (VOCAB as f64).ln()).abs() < 1e-6, "loss {loss}");

        let mut mf32: TinyLm<f32> = TinyLm::new(ModelConfig::tiny(VOCAB), 5).unwrap();
        let loss32 = mf32.nll_loss(&ids, &full_mask(5)).unwrap();
        assert!((loss32 - (VOCAB as f64).ln()).abs() < 1e-6, "loss {loss32}");
        // Exercised for the borrow, not the value.
        let _ = mf32.params_mut();
    }

    #[test]
    fn distributions_sum_to_one() {
        let mut m = model_f64(7);
        // Make the model non-uniform first.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in m.params_mut().iter_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
        for trial in 0..100 {
            let mut r = ChaCha8Rng::seed_from_u64(trial);
            let ids = random_ids(&mut r, 1 + (trial as usize % 12));
            for row in m.forward(&ids).unwrap() {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
                assert!(row.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn causality_under_perturbation() {
        let mut m = model_f64(11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in m.params_mut().iter_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
        let ids = vec![1, 2, 3, 4, 5, 6];
        let base = m.forward(&ids).unwrap();
        for t in 0..ids.len() - 1 {
            let mut perturbed = ids.clone();
            perturbed[t + 1] = (perturbed[t + 1] + 3) % VOCAB as u32;
            let probs = m.forward(&perturbed).unwrap();
            for tt in 0..=t {
                assert_eq!(base[tt], probs[tt], "position {tt} saw the future");
            }
        }
    }

    #[test]
    fn cached_and_full_forward_agree_bitwise() {
        let mut m = model_f64(13);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in m.params_mut().iter_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
        let ids = vec![5, 1, 9, 2, 2, 7, 0];
        let full = m.forward_logits(&ids).unwrap();
        let mut cache = m.cache();
        let mut incremental = Vec::new();
        for piece in ids.chunks(2) {
            incremental.extend(m.forward_logits_cached(&mut cache, piece).unwrap());
        }
        assert_eq!(full, incremental);
    }

    #[test]
    fn tape_and_cached_probabilities_agree() {
        let mut m = model_f64(17);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in m.params_mut().iter_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
        let ids = vec![1, 4, 2, 8, 3];
        let mask = full_mask(ids.len());
        // Taped loss against the loss recomputed from forward outputs.
        let (loss, _) = m.batch_grad(&[(ids.clone(), mask.clone())], 0).unwrap();
        let probs = m.forward(&ids).unwrap();
        let mut manual = 0.0;
        for t in 0..ids.len() - 1 {
            manual -= probs[t][ids[t + 1] as usize].ln();
        }
        manual /= (ids.len() - 1) as f64;
        assert_relative_eq!(loss, manual, max_relative = 1e-12);
        let direct = m.nll_loss(&ids, &mask).unwrap();
        assert_relative_eq!(loss, direct, max_relative = 1e-12);
    }

    #[test]
    fn sequence_length_is_enforced() {
        let m = model_f64(1);
        let too_long = vec![0u32; m.config().max_seq_len + 1];
        assert!(matches!(
            m.forward(&too_long),
            Err(CoatError::InvalidArgument(_))
        ));
    }

    #[test]
    fn empty_mask_is_rejected() {
        let m = model_f64(1);
        let ids = vec![1, 2, 3];
        let mask = vec![false; 3];
        assert!(matches!(
            m.nll_loss(&ids, &mask),
            Err(CoatError::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut m = model_f64(19);
        let before = m.params().to_vec();
        let mut opt = OptimizerState::new(before.len(), 0.0);
        let ids = vec![1, 2, 3, 4];
        m.backward_and_step(&mut opt, &[(ids, full_mask(4))]).unwrap();
        assert_eq!(m.params(), &before[..]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_moments_match_update_rule() {
        let mut m = model_f64(23);
        let ids = vec![2, 9, 4, 1];
        let batch = vec![(ids, full_mask(4))];
        let (_, grad) = m.batch_grad(&batch, 0).unwrap();
        let mut opt = OptimizerState::new(m.params().len(), 1e-3);
        m.backward_and_step(&mut opt, &batch).unwrap();
        for i in (0..grad.len()).step_by(97) {
            assert_relative_eq!(opt.m[i], 0.1 * grad[i], max_relative = 1e-12);
            assert_relative_eq!(opt.v[i], 0.001 * grad[i] * grad[i], max_relative = 1e-9);
        }
    }

    #[test]
    fn single_step_decreases_loss_on_repeated_batch() {
        for seed in 0..10 {
            let mut m = model_f64(100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids = random_ids(&mut rng, 8);
            let batch = vec![(ids, full_mask(8))];
            let mut opt = OptimizerState::new(m.params().len(), 1e-3);
            let before = m.batch_nll(&batch).unwrap();
            m.backward_and_step(&mut opt, &batch).unwrap();
            let after = m.batch_nll(&batch).unwrap();
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut m: TinyLm<f32> = TinyLm::new(ModelConfig::tiny(VOCAB), 4).unwrap();
            let mut opt = OptimizerState::new(m.params().len(), 3e-4);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..20 {
                let ids = random_ids(&mut rng, 10);
                m.backward_and_step(&mut opt, &[(ids, full_mask(10))]).unwrap();
            }
            m.params().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut m = model_f64(31);
        m.params_mut()[0] = f64::INFINITY;
        let mut opt = OptimizerState::new(m.params().len(), 1e-3);
        let err = m
            .backward_and_step(&mut opt, &[(vec![0, 1, 2], full_mask(3))])
            .unwrap_err();
        assert!(matches!(err, CoatError::NonFinite(_)), "got {err}");
    }

    #[test]
    fn grad_check_tiny_config() {
        let mut m = model_f64(37);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<(Vec<u32>, Vec<bool>)> = (0..3)
            .map(|_| {
                let ids = random_ids(&mut rng, 9);
                let mut mask = full_mask(9);
                // Mask a prompt prefix like real training sequences do.
                for m in mask.iter_mut().take(4) {
                    *m = false;
                }
                (ids, mask)
            })
            .collect();
        let err = m.grad_check(&batch, 1e-5, 250, 7).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
        // Halving epsilon must not blow the error up more than 4x beyond
        // a small absolute floor.
        let err_half = m.grad_check(&batch, 5e-6, 250, 7).unwrap();
        assert!(
            err_half < (err * 4.0).max(1e-7),
            "eps/2 error {err_half} vs {err}"
        );
    }

    #[test]
    fn grad_check_with_dropout_disabled_only() {
        // Dropout draws fresh masks per forward, which finite differences
        // cannot see; the check runs on the dropout-free loss path.
        let mut cfg = ModelConfig::tiny(VOCAB);
        cfg.dropout = 0.0;
        let mut m: TinyLm<f64> = TinyLm::new(cfg, 41).unwrap();
        let err = m
            .grad_check(&[(vec![1, 2, 3, 4, 5], full_mask(5))], 1e-5, 200, 3)
            .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn dropout_training_is_deterministic_and_finite() {
        let mut cfg = ModelConfig::tiny(VOCAB);
        cfg.dropout = 0.3;
        let run = || {
            let mut m: TinyLm<f64> = TinyLm::new(cfg.clone(), 2).unwrap();
            let mut opt = OptimizerState::new(m.params().len(), 1e-3);
            let mut last = 0.0;
            for _ in 0..5 {
                last = m
                    .backward_and_step(&mut opt, &[(vec![1, 2, 3, 4, 5, 6], full_mask(6))])
                    .unwrap();
            }
            (last, m.params().to_vec())
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn greedy_decode_stops_on_immediate_eos() {
        let mut m = model_f64(43);
        let off = m.layout().head_b;
        m.params_mut()[off + EOS_ID as usize] = 50.0;
        let out = m.greedy_decode(&[3, 4], 8).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn greedy_decode_matches_forward_argmax() {
        let mut m = model_f64(47);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in m.params_mut().iter_mut() {
            *p += rng.random_range(-0.2..0.2);
        }
        let prompt = vec![1, 2, 3];
        let out = m.greedy_decode(&prompt, 6).unwrap();
        assert_eq!(out, m.greedy_decode(&prompt, 6).unwrap());
        // Re-verify each emitted token against a fresh full forward.
        let mut seq = prompt.clone();
        for &tok in &out {
            let probs = m.forward(&seq).unwrap();
            let last = probs.last().unwrap();
            assert_eq!(argmax_lowest_id(last), tok);
            seq.push(tok);
        }
        if out.len() < 6 {
            let probs = m.forward(&seq).unwrap();
            assert_eq!(argmax_lowest_id(probs.last().unwrap()), EOS_ID);
        }
    }

    #[test]
    fn greedy_decode_respects_length_budget() {
        let m = model_f64(53);
        let long = vec![1u32; m.config().max_seq_len - 2];
        assert!(matches!(
            m.greedy_decode(&long, 3),
            Err(CoatError::InvalidArgument(_))
        ));
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_id() {
        assert_eq!(argmax_lowest_id(&[0.5f64, 0.5, 0.3]), 0);
        assert_eq!(argmax_lowest_id(&[0.1f64, 0.7, 0.7]), 1);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = crate::syndata::gen_dataset(30, 5, 1).unwrap();
        let vocab = crate::prompts::build_vocab(&d).unwrap();

        let mut m: TinyLm<f32> = TinyLm::new(ModelConfig::tiny(vocab.len()), 6).unwrap();
        let mut opt = OptimizerState::new(m.params().len(), 3e-4);
        let ids: Vec<u32> = vec![1, 2, 3, 4, 5];
        m.backward_and_step(&mut opt, &[(ids, full_mask(5))]).unwrap();

        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &m, &vocab, Some(&opt)).unwrap();
        let (m2, vocab2, opt2) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(m2.params(), m.params());
        assert_eq!(m2.config(), m.config());
        assert_eq!(vocab2, vocab);
        let opt2 = opt2.unwrap();
        assert_eq!(opt2, opt);

        // Saving the loaded state reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &m2, &vocab2, Some(&opt2)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // Loading under the wrong dtype is refused.
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(CoatError::Config(_))
        ));
    }

    #[test]
    fn checkpoint_without_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let d = crate::syndata::gen_dataset(30, 5, 2).unwrap();
        let vocab = crate::prompts::build_vocab(&d).unwrap();
        let m: TinyLm<f64> = TinyLm::new(ModelConfig::tiny(vocab.len()), 9).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &m, &vocab, None).unwrap();
        let (m2, _, opt) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(m2.params(), m.params());
        assert!(opt.is_none());
    }
}
