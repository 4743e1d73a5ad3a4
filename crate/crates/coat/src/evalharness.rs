//! Few-shot evaluation on unseen concepts and strategy comparison.
//!
//! Every test sample gets a k-shot prompt (demonstrations drawn from the
//! held-out pool, never the sample itself), the model decodes greedily,
//! and predictions are scored by exact match after whitespace
//! normalization. Per-sample outcomes are persisted so every aggregate is
//! recomputable.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoatError, Result};
use crate::model::{Scalar, TinyLm};
use crate::prompts::{encode_prompt, normalize_ws, tokenize, PromptInstance, Vocabulary};
use crate::sampler::{build_index, select_random};
use crate::scoring::target_likelihood;
use crate::seeds::derive_seed;
use crate::syndata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSource {
    /// Demonstrations share the predicted sample's concept (the realistic
    /// in-context deployment; the default).
    SameConcept,
    /// Uniform demonstrations regardless of concept.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub k_shots: usize,
    pub demo_source: DemoSource,
    pub n_seeds: u64,
    pub seed_base: u64,
    /// Decode budget per sample.
    pub max_new: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_shots: 3,
            demo_source: DemoSource::SameConcept,
            n_seeds: 5,
            seed_base: 0,
            max_new: 8,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(CoatError::InvalidArgument(
                "n_seeds must be at least 1".to_string(),
            ));
        }
        if self.k_shots > 8 {
            return Err(CoatError::InvalidArgument(
                "k_shots must be at most 8".to_string(),
            ));
        }
        if self.max_new == 0 {
            return Err(CoatError::InvalidArgument(
                "max_new must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// One evaluated prompt, persisted as a JSONL record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: u64,
    pub concept: String,
    pub k: usize,
    pub demo_ids: Vec<u64>,
    pub prediction: String,
    pub gold: String,
    pub correct: bool,
    pub target_likelihood: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptStat {
    pub correct: u64,
    pub total: u64,
}

/// Aggregate over all seeds for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    /// Test samples excluded because no demonstration was available.
    pub skipped: u64,
    pub per_seed: Vec<f64>,
    pub per_concept: BTreeMap<String, ConceptStat>,
    pub mean_likelihood: f64,
}

/// Exact match after whitespace normalization.
pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_ws(prediction) == normalize_ws(gold)
}

/// Evaluates one model: k-shot prompts per test sample per seed, greedy
/// decoding, exact match. Demonstrations come from `demo_source_data`
/// (for unseen concepts that is the held-out pool itself), excluding the
/// predicted sample. Samples with no available demonstration are counted
/// and excluded.
pub fn evaluate<S: Scalar>(
    m: &TinyLm<S>,
    vocab: &Vocabulary,
    test: &Dataset,
    demo_source_data: &Dataset,
    cfg: &EvalConfig,
    label: &str,
) -> Result<(EvalReport, Vec<SampleOutcome>)> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(CoatError::InvalidArgument("empty test set".to_string()));
    }
    let idx = build_index(demo_source_data);
    let mut outcomes = Vec::new();
    let mut per_seed = Vec::with_capacity(cfg.n_seeds as usize);
    let mut per_concept: BTreeMap<String, ConceptStat> = BTreeMap::new();
    let mut correct_total = 0u64;
    let mut total = 0u64;
    let mut skipped = 0u64;
    let mut likelihood_sum = 0.0f64;

    for seed_i in 0..cfg.n_seeds {
        let mut seed_correct = 0u64;
        let mut seed_total = 0u64;
        for s in &test.samples {
            let draw_seed = derive_seed(cfg.seed_base, "eval", (seed_i << 32) | s.id);
            let demos = match cfg.demo_source {
                DemoSource::SameConcept => {
                    let available: Vec<u64> = idx
                        .ids_for(&s.concept)
                        .iter()
                        .copied()
                        .filter(|&id| id != s.id)
                        .collect();
                    if available.is_empty() && cfg.k_shots > 0 {
                        if seed_i == 0 {
                            skipped += 1;
                        }
                        continue;
                    }
                    let n = cfg.k_shots.min(available.len());
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(draw_seed);
                    rand::seq::index::sample(&mut rng, available.len(), n)
                        .into_iter()
                        .map(|i| idx.sample(available[i]).clone())
                        .collect()
                }
                DemoSource::Random => {
                    if cfg.k_shots == 0 {
                        Vec::new()
                    } else {
                        select_random(demo_source_data, s, cfg.k_shots, draw_seed)?
                    }
                }
            };
            let prompt = PromptInstance::new(
                demos.iter().map(|d| (d.input.clone(), d.target.clone())).collect(),
                s.input.clone(),
                s.target.clone(),
            )?;
            let mut prompt_ids = tokenize(vocab, &encode_prompt(&prompt));
            prompt_ids.push(vocab.id_of("Prediction:"));
            let generated = m.greedy_decode(&prompt_ids, cfg.max_new)?;
            let prediction = crate::prompts::detokenize(vocab, &generated);
            let correct = exact_match(&prediction, &s.target);
            let likelihood = target_likelihood(m, vocab, &prompt)?.value;

            seed_total += 1;
            total += 1;
            likelihood_sum += likelihood;
            if correct {
                seed_correct += 1;
                correct_total += 1;
            }
            let stat = per_concept.entry(s.concept.clone()).or_insert(ConceptStat {
                correct: 0,
                total: 0,
            });
            stat.total += 1;
            stat.correct += u64::from(correct);
            outcomes.push(SampleOutcome {
                sample_id: s.id,
                concept: s.concept.clone(),
                k: prompt.k(),
                demo_ids: demos.iter().map(|d| d.id).collect(),
                prediction,
                gold: s.target.clone(),
                correct,
                target_likelihood: likelihood,
            });
        }
        per_seed.push(if seed_total == 0 {
            0.0
        } else {
            seed_correct as f64 / seed_total as f64
        });
    }

    let report = EvalReport {
        label: label.to_string(),
        accuracy: if total == 0 {
            0.0
        } else {
            correct_total as f64 / total as f64
        },
        correct: correct_total,
        total,
        skipped,
        per_seed,
        per_concept,
        mean_likelihood: if total == 0 {
            0.0
        } else {
            likelihood_sum / total as f64
        },
    };
    Ok((report, outcomes))
}

/// Head-to-head comparison of checkpoints evaluated under one protocol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub reports: Vec<EvalReport>,
    /// Pairwise accuracy differences, `(left, right, left - right)`.
    pub deltas: Vec<(String, String, f64)>,
    /// Seeds where the concept-aware model strictly beats uniform-random
    /// selection, when both labels are present: `(wins, n_seeds)`.
    pub coat_over_random: Option<(u64, u64)>,
}

/// Evaluates every checkpoint under identical settings. All models must
/// share one vocabulary.
pub fn compare_strategies<S: Scalar>(
    checkpoints: &[(String, &TinyLm<S>, &Vocabulary)],
    test: &Dataset,
    demo_source_data: &Dataset,
    cfg: &EvalConfig,
) -> Result<(Comparison, Vec<Vec<SampleOutcome>>)> {
    if checkpoints.is_empty() {
        return Err(CoatError::InvalidArgument(
            "no checkpoints to compare".to_string(),
        ));
    }
    let reference = checkpoints[0].2;
    for (label, _, vocab) in checkpoints {
        if vocab.tokens() != reference.tokens() {
            return Err(CoatError::Config(format!(
                "checkpoint {label:?} uses a different vocabulary; comparisons would be \
                 meaningless"
            )));
        }
    }
    let mut reports = Vec::with_capacity(checkpoints.len());
    let mut all_outcomes = Vec::with_capacity(checkpoints.len());
    for (label, model, vocab) in checkpoints {
        let (report, outcomes) = evaluate(*model, vocab, test, demo_source_data, cfg, label)?;
        reports.push(report);
        all_outcomes.push(outcomes);
    }
    let mut deltas = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            deltas.push((
                reports[i].label.clone(),
                reports[j].label.clone(),
                reports[i].accuracy - reports[j].accuracy,
            ));
        }
    }
    let find = |label: &str| reports.iter().find(|r| r.label == label);
    let coat_over_random = match (find("coat"), find("random_uniform")) {
        (Some(c), Some(r)) => {
            let wins = c
                .per_seed
                .iter()
                .zip(&r.per_seed)
                .filter(|(a, b)| a > b)
                .count() as u64;
            Some((wins, cfg.n_seeds))
        }
        _ => None,
    };
    Ok((
        Comparison {
            reports,
            deltas,
            coat_over_random,
        },
        all_outcomes,
    ))
}

/// Renders reports as an aligned text table (accuracies in percent with
/// one decimal place) plus lossless JSONL.
pub fn report_render(reports: &[EvalReport]) -> (String, String) {
    let mut table = String::new();
    table.push_str(&format!(
        "{:<16} {:>7} {:>12} {:>8} {:>10} {:>13}\n",
        "strategy", "acc%", "correct", "skipped", "mean_lik", "seed min/max"
    ));
    for r in reports {
        let (lo, hi) = r
            .per_seed
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        table.push_str(&format!(
            "{:<16} {:>7.1} {:>12} {:>8} {:>10.3e} {:>6.1}/{:<6.1}\n",
            r.label,
            r.accuracy * 100.0,
            format!("{}/{}", r.correct, r.total),
            r.skipped,
            r.mean_likelihood,
            lo * 100.0,
            hi * 100.0,
        ));
    }
    let jsonl = reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("report serializes"))
        .map(|line| line + "\n")
        .collect();
    (table, jsonl)
}

pub fn parse_reports(jsonl: &str) -> Result<Vec<EvalReport>> {
    jsonl
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| CoatError::Ingest {
                line: i + 1,
                message: format!("bad report record: {e}"),
            })
        })
        .collect()
}

pub fn write_outcomes(outcomes: &[SampleOutcome], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for o in outcomes {
        let line = serde_json::to_string(o)
            .map_err(|e| CoatError::InvalidArgument(format!("unserializable outcome: {e}")))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_outcomes(path: &Path) -> Result<Vec<SampleOutcome>> {
    let reader = BufReader::new(File::open(path)?);
    let mut outcomes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        outcomes.push(serde_json::from_str(&line).map_err(|e| CoatError::Ingest {
            line: i + 1,
            message: format!("bad outcome record: {e}"),
        })?);
    }
    Ok(outcomes)
}

use rand_chacha::rand_core::SeedableRng;
