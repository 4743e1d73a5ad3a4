//! Demonstration selection.
//!
//! Three strategies are implemented behind one interface: concept-aware
//! selection (informativeness filter, then greedy minimal-likelihood
//! picking), informativeness only, and uniform random over the whole
//! training set. The selection loop is the method's core: at each step
//! every remaining candidate is scored appended after the already-chosen
//! demonstrations, and the candidate whose correct-prediction likelihood
//! is minimal joins the prompt.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoatError, Result};
use crate::prompts::{encode_prompt, PromptInstance};
use crate::scoring::Scorer;
use crate::syndata::{Dataset, Sample};

/// Default size of the informative candidate pool.
pub const DEFAULT_POOL_SIZE: usize = 20;

/// Number of demonstrations drawn per training prompt: uniform in [2, 8].
pub fn draw_k(rng_seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.random_range(2..=8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Informativeness plus non-triviality (the full method).
    Coat,
    /// Informativeness only: uniform same-concept demonstrations.
    InfoOnly,
    /// Uniform over the whole training set, concepts ignored.
    RandomUniform,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 3] = [
        SelectionStrategy::Coat,
        SelectionStrategy::InfoOnly,
        SelectionStrategy::RandomUniform,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionStrategy::Coat => "coat",
            SelectionStrategy::InfoOnly => "info_only",
            SelectionStrategy::RandomUniform => "random_uniform",
        }
    }
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionStrategy {
    type Err = CoatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coat" => Ok(SelectionStrategy::Coat),
            "info_only" => Ok(SelectionStrategy::InfoOnly),
            "random_uniform" => Ok(SelectionStrategy::RandomUniform),
            other => Err(CoatError::InvalidArgument(format!(
                "unknown strategy {other:?}; expected coat, info_only, or random_uniform"
            ))),
        }
    }
}

/// Sample ids grouped by concept, ids ascending within each concept.
pub struct ConceptIndex<'a> {
    dataset: &'a Dataset,
    by_concept: BTreeMap<String, Vec<u64>>,
    id_to_pos: HashMap<u64, usize>,
}

/// Partitions the dataset's sample ids by concept.
pub fn build_index(d: &Dataset) -> ConceptIndex<'_> {
    let mut by_concept: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut id_to_pos = HashMap::with_capacity(d.len());
    for (pos, s) in d.samples.iter().enumerate() {
        by_concept.entry(s.concept.clone()).or_default().push(s.id);
        id_to_pos.insert(s.id, pos);
    }
    for ids in by_concept.values_mut() {
        ids.sort_unstable();
    }
    ConceptIndex {
        dataset: d,
        by_concept,
        id_to_pos,
    }
}

impl<'a> ConceptIndex<'a> {
    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    /// Ascending sample ids for a concept; empty for unknown concepts.
    pub fn ids_for(&self, concept: &str) -> &[u64] {
        self.by_concept.get(concept).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn concepts(&self) -> impl Iterator<Item = &String> {
        self.by_concept.keys()
    }

    pub fn sample(&self, id: u64) -> &'a Sample {
        &self.dataset.samples[self.id_to_pos[&id]]
    }
}

/// The informativeness-filtered candidate set for one predicted sample.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub predicted: Sample,
    pub candidates: Vec<Sample>,
    pub concept: String,
}

/// Uniformly samples up to `pool_size` same-concept candidates, excluding
/// the predicted sample itself.
pub fn informative_pool(
    idx: &ConceptIndex<'_>,
    predicted: &Sample,
    pool_size: usize,
    rng_seed: u64,
) -> Result<CandidatePool> {
    if pool_size == 0 {
        return Err(CoatError::InvalidArgument(
            "pool_size must be at least 1".to_string(),
        ));
    }
    let available: Vec<u64> = idx
        .ids_for(&predicted.concept)
        .iter()
        .copied()
        .filter(|&id| id != predicted.id)
        .collect();
    if available.is_empty() {
        return Err(CoatError::NoDemonstrations(format!(
            "concept {:?} has no sample other than the predicted one",
            predicted.concept
        )));
    }
    let n = pool_size.min(available.len());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let candidates = rand::seq::index::sample(&mut rng, available.len(), n)
        .into_iter()
        .map(|i| idx.sample(available[i]).clone())
        .collect();
    Ok(CandidatePool {
        predicted: predicted.clone(),
        candidates,
        concept: predicted.concept.clone(),
    })
}

fn demo_pairs(selected: &[Sample], extra: Option<&Sample>) -> Vec<(String, String)> {
    selected
        .iter()
        .chain(extra)
        .map(|s| (s.input.clone(), s.target.clone()))
        .collect()
}

/// Greedy non-triviality selection: repeatedly appends the candidate
/// whose resulting prompt gives the predicted target minimal likelihood
/// under `scorer`, conditioning each step on the demonstrations already
/// chosen. Ties break toward the lowest sample id. Returns demonstrations
/// in selection order; runs `min(k, |pool|)` steps.
pub fn select_nontrivial(
    pool: &CandidatePool,
    scorer: &dyn Scorer,
    k: usize,
) -> Result<Vec<Sample>> {
    if k == 0 {
        return Err(CoatError::InvalidArgument(
            "k must be at least 1".to_string(),
        ));
    }
    if pool.candidates.is_empty() {
        return Err(CoatError::NoDemonstrations(format!(
            "empty candidate pool for concept {:?}",
            pool.concept
        )));
    }
    let mut remaining: Vec<Sample> = pool.candidates.clone();
    let mut selected: Vec<Sample> = Vec::with_capacity(k.min(remaining.len()));
    while selected.len() < k && !remaining.is_empty() {
        let mut best: Option<(f64, u64, usize)> = None;
        for (i, candidate) in remaining.iter().enumerate() {
            let inst = PromptInstance::new(
                demo_pairs(&selected, Some(candidate)),
                pool.predicted.input.clone(),
                pool.predicted.target.clone(),
            )?;
            let score = scorer.score(&inst)?;
            let key = (score.log_value, candidate.id);
            let better = match best {
                None => true,
                Some((bl, bi, _)) => key.0 < bl || (key.0 == bl && key.1 < bi),
            };
            if better {
                best = Some((key.0, key.1, i));
            }
        }
        let (_, _, idx) = best.expect("remaining is nonempty");
        selected.push(remaining.remove(idx));
    }
    Ok(selected)
}

/// Informativeness-only baseline: a uniform subset of the pool in random
/// order, no scorer involved.
pub fn select_info_only(pool: &CandidatePool, k: usize, rng_seed: u64) -> Result<Vec<Sample>> {
    if k == 0 {
        return Err(CoatError::InvalidArgument(
            "k must be at least 1".to_string(),
        ));
    }
    if pool.candidates.is_empty() {
        return Err(CoatError::NoDemonstrations(format!(
            "empty candidate pool for concept {:?}",
            pool.concept
        )));
    }
    let n = k.min(pool.candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(rand::seq::index::sample(&mut rng, pool.candidates.len(), n)
        .into_iter()
        .map(|i| pool.candidates[i].clone())
        .collect())
}

/// Uniform-random baseline over the whole training set (minus the
/// predicted sample); demonstrations need not share any concept.
pub fn select_random(
    d: &Dataset,
    predicted: &Sample,
    k: usize,
    rng_seed: u64,
) -> Result<Vec<Sample>> {
    if k == 0 {
        return Err(CoatError::InvalidArgument(
            "k must be at least 1".to_string(),
        ));
    }
    let others: Vec<&Sample> = d.samples.iter().filter(|s| s.id != predicted.id).collect();
    if others.len() < k {
        return Err(CoatError::InvalidArgument(format!(
            "dataset has {} samples besides the predicted one, need {k}",
            others.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(rand::seq::index::sample(&mut rng, others.len(), k)
        .into_iter()
        .map(|i| others[i].clone())
        .collect())
}

/// One exported training prompt, replayable offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumRecord {
    pub demonstration_ids: Vec<u64>,
    pub predicted_id: u64,
    pub k: usize,
    pub strategy: SelectionStrategy,
    pub prompt_text: String,
    pub target_text: String,
}

impl CurriculumRecord {
    pub fn new(
        demos: &[Sample],
        predicted: &Sample,
        strategy: SelectionStrategy,
        prompt: &PromptInstance,
    ) -> Self {
        CurriculumRecord {
            demonstration_ids: demos.iter().map(|s| s.id).collect(),
            predicted_id: predicted.id,
            k: demos.len(),
            strategy,
            prompt_text: encode_prompt(prompt),
            target_text: predicted.target.clone(),
        }
    }
}

pub fn write_curriculum(records: &[CurriculumRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| CoatError::InvalidArgument(format!("unserializable record: {e}")))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_curriculum(path: &Path) -> Result<Vec<CurriculumRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| CoatError::Ingest {
                line: i + 1,
                message: format!("bad curriculum record: {e}"),
            })?,
        );
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::LikelihoodScore;
    use crate::syndata::{gen_dataset, Split};

    /// Deterministic toy scorer: a stable hash of the encoded prompt,
    /// quantized hard so ties actually happen and exercise the id rule.
    struct HashScorer {
        levels: u64,
    }

    impl Scorer for HashScorer {
        fn score(&self, p: &PromptInstance) -> crate::error::Result<LikelihoodScore> {
            let text = encode_prompt(p);
            let mut h = 0xcbf2_9ce4_8422_2325u64;
            for b in text.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            let level = h % self.levels;
            Ok(LikelihoodScore::from_log_probs(vec![
                -((level + 1) as f64) / self.levels as f64,
            ]))
        }
    }

    fn sample(id: u64, concept: &str) -> Sample {
        Sample::new(
            id,
            format!("x{id} q"),
            format!("t{id}"),
            concept.to_string(),
        )
        .unwrap()
    }

    fn concept_dataset(spec: &[(&str, usize)]) -> Dataset {
        let mut id = 0;
        let mut samples = Vec::new();
        for (concept, n) in spec {
            for _ in 0..*n {
                samples.push(sample(id, concept));
                id += 1;
            }
        }
        Dataset::new(samples, Split::Train).unwrap()
    }

    #[test]
    fn index_partitions_by_concept() {
        let d = concept_dataset(&[("a", 2), ("b", 2)]);
        let idx = build_index(&d);
        assert_eq!(idx.ids_for("a"), &[0, 1]);
        assert_eq!(idx.ids_for("b"), &[2, 3]);
        assert_eq!(idx.ids_for("missing"), &[] as &[u64]);
        let total: usize = idx.concepts().map(|c| idx.ids_for(c).len()).sum();
        assert_eq!(total, d.len());
    }

    #[test]
    fn pool_respects_availability_and_excludes_predicted() {
        let d = concept_dataset(&[("a", 2), ("b", 101)]);
        let idx = build_index(&d);
        let small = informative_pool(&idx, &d.samples[0], 20, 1).unwrap();
        assert_eq!(small.candidates.len(), 1);
        assert_eq!(small.candidates[0].id, 1);

        let big = informative_pool(&idx, &d.samples[2], 20, 2).unwrap();
        assert_eq!(big.candidates.len(), 20);
        let mut ids: Vec<u64> = big.candidates.iter().map(|s| s.id).collect();
        assert!(ids.iter().all(|&i| i != 2));
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 20);
        assert!(big.candidates.iter().all(|s| s.concept == "b"));
    }

    #[test]
    fn pool_errors_without_same_concept_sample() {
        let d = concept_dataset(&[("a", 1), ("b", 4)]);
        let idx = build_index(&d);
        assert!(matches!(
            informative_pool(&idx, &d.samples[0], 20, 0),
            Err(CoatError::NoDemonstrations(_))
        ));
    }

    /// Inclusion frequencies over seeded draws stay within 3 sigma of the
    /// hypergeometric expectation (drawing 20 of 29 candidates).
    #[test]
    fn pool_sampling_is_uniform() {
        let d = concept_dataset(&[("a", 30)]);
        let idx = build_index(&d);
        let predicted = &d.samples[0];
        let trials = 10_000;
        let mut counts = vec![0u32; 30];
        for t in 0..trials {
            let pool = informative_pool(&idx, predicted, 20, 1000 + t as u64).unwrap();
            assert_eq!(pool.candidates.len(), 20);
            for s in &pool.candidates {
                counts[s.id as usize] += 1;
            }
        }
        let p = 20.0 / 29.0;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for id in 1..30 {
            let c = counts[id] as f64;
            assert!(
                (c - mean).abs() <= 3.0 * sigma,
                "candidate {id}: {c} vs {mean} ± {sigma}"
            );
        }
        assert_eq!(counts[0], 0);
    }

    /// Brute-force oracle: each greedy step must pick exactly the argmin
    /// over re-scoring all remaining candidates with the current prefix.
    #[test]
    fn greedy_selection_matches_bruteforce_oracle() {
        let scorer = HashScorer { levels: 8 };
        let d = concept_dataset(&[("a", 12)]);
        let idx = build_index(&d);
        for seed in 0..30u64 {
            let pool = informative_pool(&idx, &d.samples[0], 9, seed).unwrap();
            let k = 1 + (seed as usize % 8);
            let picked = select_nontrivial(&pool, &scorer, k).unwrap();

            // Independent re-derivation.
            let mut remaining = pool.candidates.clone();
            let mut prefix: Vec<Sample> = Vec::new();
            for step in 0..k.min(pool.candidates.len()) {
                let mut best: Option<(f64, u64)> = None;
                for c in &remaining {
                    let inst = PromptInstance::new(
                        demo_pairs(&prefix, Some(c)),
                        pool.predicted.input.clone(),
                        pool.predicted.target.clone(),
                    )
                    .unwrap();
                    let s = scorer.score(&inst).unwrap();
                    let better = match best {
                        None => true,
                        Some((bl, bi)) => {
                            s.log_value < bl || (s.log_value == bl && c.id < bi)
                        }
                    };
                    if better {
                        best = Some((s.log_value, c.id));
                    }
                }
                let (_, want_id) = best.unwrap();
                assert_eq!(picked[step].id, want_id, "seed {seed} step {step}");
                let pos = remaining.iter().position(|s| s.id == want_id).unwrap();
                prefix.push(remaining.remove(pos));
            }
        }
    }

    #[test]
    fn forced_and_exhausted_pools() {
        let scorer = HashScorer { levels: 4 };
        let d = concept_dataset(&[("a", 2)]);
        let idx = build_index(&d);
        let pool = informative_pool(&idx, &d.samples[0], 20, 3).unwrap();
        let one = select_nontrivial(&pool, &scorer, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].id, 1);
        // k beyond the pool returns everything, in greedy order.
        let d = concept_dataset(&[("a", 5)]);
        let idx = build_index(&d);
        let pool = informative_pool(&idx, &d.samples[0], 20, 4).unwrap();
        let all = select_nontrivial(&pool, &scorer, 10).unwrap();
        assert_eq!(all.len(), 4);
        let empty = CandidatePool {
            predicted: d.samples[0].clone(),
            candidates: vec![],
            concept: "a".to_string(),
        };
        assert!(matches!(
            select_nontrivial(&empty, &scorer, 2),
            Err(CoatError::NoDemonstrations(_))
        ));
    }

    #[test]
    fn info_only_is_a_permutation_at_full_k() {
        let d = concept_dataset(&[("a", 5)]);
        let idx = build_index(&d);
        let pool = informative_pool(&idx, &d.samples[0], 4, 5).unwrap();
        let picked = select_info_only(&pool, 4, 9).unwrap();
        let mut ids: Vec<u64> = picked.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![1, 2, 3, 4]);
        assert!(picked.iter().all(|s| s.concept == pool.predicted.concept));
    }

    #[test]
    fn info_only_selection_is_uniform() {
        let d = concept_dataset(&[("a", 11)]);
        let idx = build_index(&d);
        let pool = informative_pool(&idx, &d.samples[0], 10, 0).unwrap();
        let trials = 10_000;
        let mut counts = vec![0u32; 11];
        for t in 0..trials {
            for s in select_info_only(&pool, 3, 50_000 + t as u64).unwrap() {
                counts[s.id as usize] += 1;
            }
        }
        let p = 3.0 / 10.0;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for id in 1..11 {
            let c = counts[id] as f64;
            assert!(
                (c - mean).abs() <= 3.0 * sigma,
                "candidate {id}: {c} vs {mean} ± {sigma}"
            );
        }
    }

    #[test]
    fn random_selection_spans_concepts_uniformly() {
        let d = concept_dataset(&[("a", 6), ("b", 5)]);
        let idx = build_index(&d);
        let predicted = &d.samples[0];
        // Exactly k + 1 samples: everything but the predicted one.
        let tiny = concept_dataset(&[("a", 4)]);
        let all = select_random(&tiny, &tiny.samples[3], 3, 7).unwrap();
        let mut ids: Vec<u64> = all.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(matches!(
            select_random(&tiny, &tiny.samples[0], 4, 7),
            Err(CoatError::InvalidArgument(_))
        ));

        let trials = 10_000;
        let mut counts = vec![0u32; 11];
        let mut saw_foreign_concept = false;
        for t in 0..trials {
            for s in select_random(&d, predicted, 3, 90_000 + t as u64).unwrap() {
                counts[s.id as usize] += 1;
                saw_foreign_concept |= s.concept != predicted.concept;
            }
        }
        assert!(saw_foreign_concept);
        let p = 3.0 / 10.0;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for id in 1..11 {
            let c = counts[id] as f64;
            assert!((c - mean).abs() <= 3.0 * sigma, "sample {id}: {c}");
        }
        assert_eq!(counts[0], 0);
        let _ = idx;
    }

    /// Each k in [2, 8] shows up 10000 ± 3 sigma times in 70000 draws.
    #[test]
    fn draw_k_range_and_uniformity() {
        let mut counts = [0u32; 9];
        for seed in 0..70_000u64 {
            let k = draw_k(seed);
            assert!((2..=8).contains(&k));
            counts[k] += 1;
        }
        let p = 1.0f64 / 7.0;
        let mean = 70_000.0 * p;
        let sigma = (70_000.0 * p * (1.0 - p)).sqrt();
        for k in 2..=8 {
            let c = counts[k] as f64;
            assert!((c - mean).abs() <= 3.0 * sigma, "k={k}: {c}");
        }
        assert_eq!(draw_k(123), draw_k(123));
    }

    /// With a fixed scorer, greedy minimization must not average above
    /// uniform same-pool sampling.
    #[test]
    fn nontrivial_scores_at_or_below_info_only_on_average() {
        let scorer = HashScorer { levels: 1024 };
        let d = gen_dataset(300, 10, 77).unwrap();
        let idx = build_index(&d);
        let mut coat_sum = 0.0;
        let mut info_sum = 0.0;
        let mut n = 0usize;
        for (i, predicted) in d.samples.iter().take(120).enumerate() {
            let pool = informative_pool(&idx, predicted, 10, i as u64).unwrap();
            let k = 2 + i % 4;
            let score_of = |demos: &[Sample]| -> f64 {
                let inst = PromptInstance::new(
                    demo_pairs(demos, None),
                    predicted.input.clone(),
                    predicted.target.clone(),
                )
                .unwrap();
                scorer.score(&inst).unwrap().value
            };
            let coat = select_nontrivial(&pool, &scorer, k).unwrap();
            let info = select_info_only(&pool, k, 7_000 + i as u64).unwrap();
            coat_sum += score_of(&coat);
            info_sum += score_of(&info);
            n += 1;
        }
        assert!(n >= 100);
        assert!(
            coat_sum / n as f64 <= info_sum / n as f64,
            "coat mean {} vs info mean {}",
            coat_sum / n as f64,
            info_sum / n as f64
        );
    }

    #[test]
    fn curriculum_round_trips() {
        let d = concept_dataset(&[("a", 4)]);
        let demos = vec![d.samples[1].clone(), d.samples[2].clone()];
        let prompt = PromptInstance::new(
            demo_pairs(&demos, None),
            d.samples[0].input.clone(),
            d.samples[0].target.clone(),
        )
        .unwrap();
        let rec = CurriculumRecord::new(&demos, &d.samples[0], SelectionStrategy::Coat, &prompt);
        assert_eq!(rec.k, 2);
        assert_eq!(rec.demonstration_ids, vec![1, 2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curriculum.jsonl");
        write_curriculum(&[rec.clone()], &path).unwrap();
        let back = read_curriculum(&path).unwrap();
        assert_eq!(back, vec![rec]);
    }

    #[test]
    fn strategy_strings_round_trip() {
        for s in SelectionStrategy::ALL {
            assert_eq!(s.as_str().parse::<SelectionStrategy>().unwrap(), s);
        }
        assert!("bogus".parse::<SelectionStrategy>().is_err());
        assert_eq!(
            serde_json::to_string(&SelectionStrategy::InfoOnly).unwrap(),
            "\"info_only\""
        );
    }
}
