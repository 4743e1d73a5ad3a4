//! Concept-annotated synthetic QA data.
//!
//! Stage-1 datasets annotate every sample with an explanation-chain
//! concept (the id of the reasoning chain that produces its answer).
//! Stage-2 datasets are a natural-language proxy whose concept is the
//! question's initial word. Both render a small entity table followed by
//! a question, so answers are always derivable from the input text.

mod chain;
mod jsonl;
mod table;

pub use chain::{
    chain_is_feasible, execute_chain, gen_concept_chain, ConceptChain, ReasoningPrimitive,
    CHAIN_SEP, PRIMITIVE_COUNT,
};
pub use jsonl::{ingest_jsonl, read_jsonl, write_jsonl, FieldMap};
pub use table::{gen_table, parse_input, EntityTable, Row, NAME_POOL};

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoatError, Result};
use crate::seeds::derive_seed;

/// Substrings reserved for the prompt grammar; no sample field may
/// contain them.
pub const RESERVED_MARKERS: [&str; 2] = ["Input:", "Prediction:"];

/// One QA item: input text (context + question), target text, and the
/// concept identifier it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub input: String,
    pub target: String,
    pub concept: String,
}

impl Sample {
    /// Validates field invariants: non-empty single-line texts that avoid
    /// the reserved prompt markers.
    pub fn new(id: u64, input: String, target: String, concept: String) -> Result<Self> {
        for (field, text) in [("input", &input), ("target", &target)] {
            if text.trim().is_empty() {
                return Err(CoatError::InvalidArgument(format!("{field} is empty")));
            }
            if text.contains('\n') || text.contains('\r') {
                return Err(CoatError::InvalidArgument(format!(
                    "{field} must be single-line"
                )));
            }
            for marker in RESERVED_MARKERS {
                if text.contains(marker) {
                    return Err(CoatError::InvalidArgument(format!(
                        "{field} contains reserved marker {marker:?}"
                    )));
                }
            }
        }
        if concept.is_empty() {
            return Err(CoatError::InvalidArgument("concept is empty".to_string()));
        }
        Ok(Sample {
            id,
            input,
            target,
            concept,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// A list of samples with unique ids plus the set of concepts they cover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Split,
    pub concept_universe: BTreeSet<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, split: Split) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut universe = BTreeSet::new();
        for s in &samples {
            if !seen.insert(s.id) {
                return Err(CoatError::InvalidArgument(format!(
                    "duplicate sample id {}",
                    s.id
                )));
            }
            universe.insert(s.concept.clone());
        }
        Ok(Dataset {
            samples,
            split,
            concept_universe: universe,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-concept sample counts, useful for manifests and reports.
    pub fn concept_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.concept.clone()).or_insert(0) += 1;
        }
        counts
    }
}

/// Knobs for the stage-1 generator. The defaults keep chains shallow and
/// tables small so a tiny from-scratch model can make headway.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenOptions {
    pub max_depth: usize,
    pub min_rows: usize,
    pub max_rows: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            max_depth: 3,
            min_rows: 3,
            max_rows: 5,
        }
    }
}

const SAMPLE_RETRIES: usize = 128;

fn gen_sample_with(chain: &ConceptChain, rng_seed: u64, opts: &GenOptions) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for _ in 0..SAMPLE_RETRIES {
        // Fresh table and fresh filter thresholds each attempt; the
        // thresholds appear in the question text, not the concept id.
        let attempt = chain.with_resampled_thresholds(&mut rng);
        let table = gen_table(&mut rng, opts.min_rows, opts.max_rows, false);
        let answer = match execute_chain(&attempt, &table) {
            Ok(a) => a,
            Err(CoatError::ChainExecution(_)) => continue,
            Err(e) => return Err(e),
        };
        if answer.is_empty() {
            continue;
        }
        let input = table.render_input(&attempt.question());
        return Sample::new(0, input, answer, chain.id());
    }
    Err(CoatError::GenerationFailure(format!(
        "no executable table for chain {} after {SAMPLE_RETRIES} attempts",
        chain.id()
    )))
}

/// Builds one synthetic sample for `chain`: a fresh table, the chain's
/// templated question, and the answer obtained by executing the chain.
/// The sample id is 0; dataset assembly assigns unique ids.
pub fn gen_sample(chain: &ConceptChain, rng_seed: u64) -> Result<Sample> {
    gen_sample_with(chain, rng_seed, &GenOptions::default())
}

/// Stage-1 dataset: `n_concepts` distinct feasible chains, samples
/// balanced round-robin so every concept gets at least two.
pub fn gen_dataset(n_samples: usize, n_concepts: usize, rng_seed: u64) -> Result<Dataset> {
    gen_dataset_with(n_samples, n_concepts, rng_seed, &GenOptions::default())
}

pub fn gen_dataset_with(
    n_samples: usize,
    n_concepts: usize,
    rng_seed: u64,
    opts: &GenOptions,
) -> Result<Dataset> {
    if n_concepts < 2 {
        return Err(CoatError::InvalidArgument(format!(
            "need at least 2 concepts, got {n_concepts}"
        )));
    }
    if n_samples < n_concepts * 2 {
        return Err(CoatError::InvalidArgument(format!(
            "need n_samples >= 2 * n_concepts, got {n_samples} for {n_concepts} concepts"
        )));
    }

    // Draw distinct feasible chains; infeasible or duplicate ids are
    // redrawn from fresh derived seeds.
    let mut chains: Vec<ConceptChain> = Vec::with_capacity(n_concepts);
    let mut taken = BTreeSet::new();
    let mut attempt: u64 = 0;
    let max_attempts = (n_concepts as u64) * 400;
    while chains.len() < n_concepts {
        if attempt >= max_attempts {
            return Err(CoatError::GenerationFailure(format!(
                "could not find {n_concepts} distinct feasible chains"
            )));
        }
        let chain = gen_concept_chain(derive_seed(rng_seed, "chain", attempt), opts.max_depth)?;
        attempt += 1;
        if !chain_is_feasible(&chain, opts.min_rows, opts.max_rows) {
            continue;
        }
        if taken.insert(chain.id()) {
            chains.push(chain);
        }
    }

    let mut samples = Vec::with_capacity(n_samples);
    let mut next_id: u64 = 0;
    for (ci, chain) in chains.iter().enumerate() {
        let count = n_samples / n_concepts + usize::from(ci < n_samples % n_concepts);
        for j in 0..count {
            let seed = derive_seed(rng_seed, "sample", (ci as u64) << 32 | j as u64);
            let mut sample = gen_sample_with(chain, seed, opts)?;
            sample.id = next_id;
            next_id += 1;
            samples.push(sample);
        }
    }
    Dataset::new(samples, Split::Train)
}

// Stage-2 question templates; the concept is the initial word.
const WH_TEMPLATES: [&str; 6] = ["who", "what", "which", "where", "when", "how"];

fn wh_sample(template: &str, rng_seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let table = gen_table(&mut rng, 3, 5, true);
    let pick = rng.random_range(0..table.rows.len());
    let row = &table.rows[pick];
    let (question, answer) = match template {
        "who" => (format!("who has {} ?", row.value), row.name.clone()),
        "what" => (format!("what is {} ?", row.name), row.value.to_string()),
        "which" => {
            let best = table
                .rows
                .iter()
                .max_by_key(|r| r.value)
                .expect("nonempty table");
            ("which is biggest ?".to_string(), best.name.clone())
        }
        "where" => (format!("where is {} ?", row.name), (pick + 1).to_string()),
        "when" => (format!("when is {} ?", row.name), row.value.to_string()),
        "how" => ("how many ?".to_string(), table.rows.len().to_string()),
        other => {
            return Err(CoatError::InvalidArgument(format!(
                "unknown template {other:?}"
            )))
        }
    };
    let input = table.render_input(&question);
    Sample::new(0, input, answer, template.to_string())
}

/// Stage-2 natural-proxy dataset: wh-word questions over the same tables,
/// concept = initial question word. Samples are balanced across the six
/// templates.
pub fn gen_wh_dataset(n_samples: usize, rng_seed: u64) -> Result<Dataset> {
    let n_concepts = WH_TEMPLATES.len();
    if n_samples < n_concepts * 2 {
        return Err(CoatError::InvalidArgument(format!(
            "need at least {} samples for {n_concepts} wh concepts",
            n_concepts * 2
        )));
    }
    let mut samples = Vec::with_capacity(n_samples);
    let mut next_id: u64 = 0;
    for (ci, template) in WH_TEMPLATES.iter().enumerate() {
        let count = n_samples / n_concepts + usize::from(ci < n_samples % n_concepts);
        for j in 0..count {
            let seed = derive_seed(rng_seed, "wh", (ci as u64) << 32 | j as u64);
            let mut sample = wh_sample(template, seed)?;
            sample.id = next_id;
            next_id += 1;
            samples.push(sample);
        }
    }
    Dataset::new(samples, Split::Train)
}

/// Splits a dataset by concept: the returned test split's concepts never
/// occur in the train split, and every test concept keeps at least two
/// samples so demonstrations exist at evaluation time.
pub fn split_unseen_concepts(
    d: &Dataset,
    held_out_fraction: f64,
    rng_seed: u64,
) -> Result<(Dataset, Dataset)> {
    if d.concept_universe.len() < 2 {
        return Err(CoatError::InvalidArgument(
            "need at least 2 concepts to split".to_string(),
        ));
    }
    if !(held_out_fraction > 0.0 && held_out_fraction < 1.0) {
        return Err(CoatError::InvalidArgument(format!(
            "held_out_fraction must be in (0, 1), got {held_out_fraction}"
        )));
    }
    let n_concepts = d.concept_universe.len();
    let n_test = (held_out_fraction * n_concepts as f64).round() as usize;
    if n_test == 0 || n_test >= n_concepts {
        return Err(CoatError::InvalidArgument(format!(
            "fraction {held_out_fraction} leaves an empty side for {n_concepts} concepts"
        )));
    }
    let counts = d.concept_counts();
    let eligible: Vec<&String> = d
        .concept_universe
        .iter()
        .filter(|c| counts[*c] >= 2)
        .collect();
    if eligible.len() < n_test {
        return Err(CoatError::InvalidArgument(format!(
            "only {} concepts have >= 2 samples; cannot hold out {n_test}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let test_concepts: BTreeSet<String> = rand::seq::index::sample(&mut rng, eligible.len(), n_test)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect();

    let (test, train): (Vec<Sample>, Vec<Sample>) = d
        .samples
        .iter()
        .cloned()
        .partition(|s| test_concepts.contains(&s.concept));
    Ok((
        Dataset::new(train, Split::Train)?,
        Dataset::new(test, Split::Test)?,
    ))
}

/// Carves a validation set out of a training set without removing any
/// concept from training: a concept only donates samples while it keeps
/// at least two. Concepts stay held-in, mirroring a standardized
/// validation set for early stopping.
pub fn split_validation(d: &Dataset, fraction: f64, rng_seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CoatError::InvalidArgument(format!(
            "fraction must be in (0, 1), got {fraction}"
        )));
    }
    let target = ((fraction * d.len() as f64).round() as usize).max(1);
    let mut order: Vec<usize> = (0..d.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    order.shuffle(&mut rng);

    let mut remaining = d.concept_counts();
    let mut to_valid = vec![false; d.len()];
    let mut moved = 0;
    for idx in order {
        if moved >= target {
            break;
        }
        let concept = &d.samples[idx].concept;
        let left = remaining.get_mut(concept).expect("known concept");
        if *left > 2 {
            *left -= 1;
            to_valid[idx] = true;
            moved += 1;
        }
    }
    if moved == 0 {
        return Err(CoatError::InvalidArgument(
            "no concept can spare a validation sample".to_string(),
        ));
    }
    let mut train = Vec::with_capacity(d.len() - moved);
    let mut valid = Vec::with_capacity(moved);
    for (idx, s) in d.samples.iter().enumerate() {
        if to_valid[idx] {
            valid.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((
        Dataset::new(train, Split::Train)?,
        Dataset::new(valid, Split::Validation)?,
    ))
}

/// First whitespace-delimited token of the question, lower-cased with
/// surrounding punctuation stripped.
pub fn extract_wh_concept(question: &str) -> Result<String> {
    let first = question.split_whitespace().next().ok_or_else(|| {
        CoatError::InvalidArgument("question is empty or whitespace-only".to_string())
    })?;
    let stripped: String = first
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    if stripped.is_empty() {
        return Err(CoatError::InvalidArgument(format!(
            "question starts with non-word token {first:?}"
        )));
    }
    Ok(stripped)
}

/// Question portion of an input: everything after the last `';'`, or the
/// whole input when there is no table prefix.
pub fn question_portion(input: &str) -> &str {
    match input.rfind(';') {
        Some(pos) => input[pos + 1..].trim(),
        None => input.trim(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_sample_agrees_with_chain_oracle() {
        // Oracle: parse the rendered input back into a table + question,
        // re-derive the chain from the question, execute, and compare.
        let mut checked = 0;
        for seed in 0..400u64 {
            let chain = gen_concept_chain(derive_seed(9, "c", seed), 3).unwrap();
            if !chain_is_feasible(&chain, 3, 5) {
                continue;
            }
            let sample = gen_sample(&chain, derive_seed(9, "s", seed)).unwrap();
            let (table, question) = parse_input(&sample.input).unwrap();
            let parsed = ConceptChain::parse_question(&question).unwrap();
            assert_eq!(parsed.id(), sample.concept);
            assert_eq!(execute_chain(&parsed, &table).unwrap(), sample.target);
            checked += 1;
        }
        assert!(checked >= 200, "only {checked} feasible chains exercised");
    }

    #[test]
    fn generated_samples_avoid_reserved_markers() {
        let d = gen_dataset(300, 10, 4).unwrap();
        for s in &d.samples {
            for marker in RESERVED_MARKERS {
                assert!(!s.input.contains(marker));
                assert!(!s.target.contains(marker));
            }
        }
    }

    #[test]
    fn dataset_balances_concepts() {
        let d = gen_dataset(4, 2, 1).unwrap();
        let counts = d.concept_counts();
        assert_eq!(counts.len(), 2);
        assert!(counts.values().all(|&c| c == 2));

        let d = gen_dataset(1000, 50, 7).unwrap();
        assert_eq!(d.len(), 1000);
        assert_eq!(d.concept_universe.len(), 50);
        assert!(d.concept_counts().values().all(|&c| c >= 2));
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let a = gen_dataset(200, 10, 123).unwrap();
        let b = gen_dataset(200, 10, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_rejects_bad_arguments() {
        assert!(matches!(
            gen_dataset(10, 1, 0),
            Err(CoatError::InvalidArgument(_))
        ));
        assert!(matches!(
            gen_dataset(3, 2, 0),
            Err(CoatError::InvalidArgument(_))
        ));
    }

    #[test]
    fn unseen_split_is_concept_disjoint_and_partitions() {
        let d = gen_dataset(500, 50, 2).unwrap();
        let (train, test) = split_unseen_concepts(&d, 0.2, 3).unwrap();
        assert_eq!(test.concept_universe.len(), 10);
        assert!(train
            .concept_universe
            .intersection(&test.concept_universe)
            .next()
            .is_none());
        // Union of splits is the original sample set, nothing duplicated.
        let mut ids: Vec<u64> = train
            .samples
            .iter()
            .chain(test.samples.iter())
            .map(|s| s.id)
            .collect();
        ids.sort_unstable();
        let orig: Vec<u64> = d.samples.iter().map(|s| s.id).collect();
        assert_eq!(ids, orig);
        let counts = test.concept_counts();
        assert!(counts.values().all(|&c| c >= 2));
    }

    #[test]
    fn two_concept_split_is_forced() {
        let d = gen_dataset(8, 2, 9).unwrap();
        let (train, test) = split_unseen_concepts(&d, 0.5, 1).unwrap();
        assert_eq!(train.concept_universe.len(), 1);
        assert_eq!(test.concept_universe.len(), 1);
    }

    #[test]
    fn split_rejects_empty_sides() {
        let d = gen_dataset(20, 3, 5).unwrap();
        assert!(matches!(
            split_unseen_concepts(&d, 0.01, 0),
            Err(CoatError::InvalidArgument(_))
        ));
        assert!(matches!(
            split_unseen_concepts(&d, 0.99, 0),
            Err(CoatError::InvalidArgument(_))
        ));
    }

    #[test]
    fn validation_split_keeps_concepts_held_in() {
        let d = gen_dataset(400, 20, 11).unwrap();
        let (train, valid) = split_validation(&d, 0.1, 13).unwrap();
        assert_eq!(train.len() + valid.len(), 400);
        assert_eq!(valid.len(), 40);
        // Every validation concept still trains, with room for pools.
        let train_counts = train.concept_counts();
        for c in &valid.concept_universe {
            assert!(train_counts[c] >= 2);
        }
    }

    #[test]
    fn wh_dataset_concepts_match_initial_words() {
        let d = gen_wh_dataset(120, 21).unwrap();
        assert_eq!(d.concept_universe.len(), 6);
        for s in &d.samples {
            let q = question_portion(&s.input);
            assert_eq!(extract_wh_concept(q).unwrap(), s.concept);
        }
        assert!(d.concept_counts().values().all(|&c| c == 20));
    }

    #[test]
    fn wh_answers_are_derivable() {
        let d = gen_wh_dataset(240, 8).unwrap();
        for s in &d.samples {
            let (table, q) = parse_input(&s.input).unwrap();
            let expect = match s.concept.as_str() {
                "who" => {
                    let v: u32 = q
                        .strip_prefix("who has ")
                        .unwrap()
                        .strip_suffix(" ?")
                        .unwrap()
                        .parse()
                        .unwrap();
                    table
                        .rows
                        .iter()
                        .find(|r| r.value == v)
                        .unwrap()
                        .name
                        .clone()
                }
                "what" | "when" => {
                    let n = q
                        .split_whitespace()
                        .nth(2)
                        .unwrap();
                    table
                        .rows
                        .iter()
                        .find(|r| r.name == n)
                        .unwrap()
                        .value
                        .to_string()
                }
                "which" => table.rows.iter().max_by_key(|r| r.value).unwrap().name.clone(),
                "where" => {
                    let n = q.split_whitespace().nth(2).unwrap();
                    (table.rows.iter().position(|r| r.name == n).unwrap() + 1).to_string()
                }
                "how" => table.rows.len().to_string(),
                other => panic!("unexpected concept {other}"),
            };
            assert_eq!(s.target, expect, "sample {}", s.id);
        }
    }

    #[test]
    fn wh_extraction_examples() {
        assert_eq!(extract_wh_concept("Who wrote the report?").unwrap(), "who");
        assert_eq!(extract_wh_concept("Where?").unwrap(), "where");
        assert_eq!(extract_wh_concept("  When did it open?").unwrap(), "when");
        assert!(matches!(
            extract_wh_concept("   "),
            Err(CoatError::InvalidArgument(_))
        ));
    }

    #[test]
    fn wh_extraction_is_idempotent() {
        for q in ["Who wrote it?", "HOW many?", "which one", "a=1; who has 1 ?"] {
            let once = extract_wh_concept(question_portion(q)).unwrap();
            let twice = extract_wh_concept(&once).unwrap();
            assert_eq!(once, twice);
        }
    }
}
