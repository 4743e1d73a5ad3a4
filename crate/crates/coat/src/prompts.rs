//! Few-shot prompt encoding and word-level tokenization.
//!
//! The wire format is fixed: one `Input: {x} Prediction: {y}` line per
//! demonstration, then a final `Input: {x_pred}` line with no trailing
//! newline and no trailing `Prediction:` marker. The training/scoring
//! continuation appends a single `" Prediction: "` marker plus the target
//! tokens and end-of-sequence.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{CoatError, Result};
use crate::syndata::{Dataset, RESERVED_MARKERS};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

/// Special token surface forms, in id order (pad, eos, unk).
pub const SPECIALS: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

const INPUT_MARKER: &str = "Input: ";
const PREDICTION_MARKER: &str = " Prediction: ";

/// `k` demonstrations plus the predicted sample. `k = 0` is allowed for
/// zero-shot scoring utilities; training always uses `2 <= k <= 8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptInstance {
    demonstrations: Vec<(String, String)>,
    predicted_input: String,
    predicted_target: String,
}

impl PromptInstance {
    /// Validates the instance: at most 8 demonstrations, single-line
    /// marker-free fields, and a predicted input distinct from every
    /// demonstration input. The predicted target may be empty (decoded
    /// prompts do not carry one).
    pub fn new(
        demonstrations: Vec<(String, String)>,
        predicted_input: String,
        predicted_target: String,
    ) -> Result<Self> {
        if demonstrations.len() > 8 {
            return Err(CoatError::InvalidArgument(format!(
                "at most 8 demonstrations allowed, got {}",
                demonstrations.len()
            )));
        }
        for (x, y) in &demonstrations {
            check_field(x)?;
            check_field(y)?;
        }
        check_field(&predicted_input)?;
        if !predicted_target.is_empty() {
            check_field(&predicted_target)?;
        }
        if demonstrations.iter().any(|(x, _)| *x == predicted_input) {
            return Err(CoatError::InvalidArgument(
                "predicted input appears among demonstration inputs".to_string(),
            ));
        }
        Ok(PromptInstance {
            demonstrations,
            predicted_input,
            predicted_target,
        })
    }

    pub fn k(&self) -> usize {
        self.demonstrations.len()
    }

    pub fn demonstrations(&self) -> &[(String, String)] {
        &self.demonstrations
    }

    pub fn predicted_input(&self) -> &str {
        &self.predicted_input
    }

    pub fn predicted_target(&self) -> &str {
        &self.predicted_target
    }
}

fn check_field(text: &str) -> Result<()> {
    if text.is_empty() {
        return Err(CoatError::InvalidArgument(
            "prompt field is empty".to_string(),
        ));
    }
    if text.contains('\n') || text.contains('\r') {
        return Err(CoatError::InvalidArgument(
            "prompt field must be single-line".to_string(),
        ));
    }
    for marker in RESERVED_MARKERS {
        if text.contains(marker) {
            return Err(CoatError::InvalidArgument(format!(
                "prompt field contains reserved marker {marker:?}"
            )));
        }
    }
    Ok(())
}

/// Demonstration lines only, each newline-terminated. The tokenization
/// of a full prompt is this prefix's tokens followed by the final line's,
/// which is what lets scoring reuse a cached prefix.
pub(crate) fn encode_demo_prefix(demos: &[(String, String)]) -> String {
    let mut out = String::new();
    for (x, y) in demos {
        out.push_str(INPUT_MARKER);
        out.push_str(x);
        out.push_str(PREDICTION_MARKER);
        out.push_str(y);
        out.push('\n');
    }
    out
}

/// Encodes the prompt. Exactly `k` occurrences of `" Prediction: "` and
/// `k + 1` occurrences of `"Input: "`; no trailing newline.
pub fn encode_prompt(p: &PromptInstance) -> String {
    let mut out = encode_demo_prefix(&p.demonstrations);
    out.push_str(INPUT_MARKER);
    out.push_str(&p.predicted_input);
    out
}

/// Parses text produced by [`encode_prompt`] back into demonstrations and
/// the predicted input. The predicted target of the result is empty.
pub fn decode_prompt(text: &str) -> Result<PromptInstance> {
    let mut demonstrations = Vec::new();
    let mut predicted_input = None;
    let mut offset = 0usize;
    let lines: Vec<&str> = text.split('\n').collect();
    let last = lines.len() - 1;
    for (i, line) in lines.iter().enumerate() {
        let err = |message: String| CoatError::Parse {
            position: offset,
            message,
        };
        let rest = line
            .strip_prefix(INPUT_MARKER)
            .ok_or_else(|| err(format!("expected line to start with {INPUT_MARKER:?}")))?;
        if i < last {
            let (x, y) = rest
                .split_once(PREDICTION_MARKER)
                .ok_or_else(|| err(format!("demonstration line lacks {PREDICTION_MARKER:?}")))?;
            if x.is_empty() || y.is_empty() {
                return Err(err("empty demonstration field".to_string()));
            }
            demonstrations.push((x.to_string(), y.to_string()));
        } else {
            if rest.contains(PREDICTION_MARKER) {
                return Err(err(format!(
                    "final line must not contain {PREDICTION_MARKER:?}"
                )));
            }
            if rest.is_empty() {
                return Err(err("empty predicted input".to_string()));
            }
            predicted_input = Some(rest.to_string());
        }
        offset += line.len() + 1;
    }
    PromptInstance::new(
        demonstrations,
        predicted_input.expect("loop always visits the last line"),
        String::new(),
    )
}

/// Word-level vocabulary with fixed special ids (pad 0, eos 1, unk 2).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            id_to_token: tokens,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// One token per line, line number = id, specials first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Vocabulary::load_tokens(tokens)
            .map_err(|e| CoatError::Config(format!("{}: {e}", path.display())))
    }

    /// Builds a vocabulary from an explicit token list, validating the
    /// fixed special-token prefix.
    pub fn load_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() {
            return Err(CoatError::Config("vocabulary too short".to_string()));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(CoatError::Config(format!(
                    "expected special {s:?} at position {i}, found {:?}",
                    tokens[i]
                )));
            }
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

/// Builds a vocabulary covering every whitespace-delimited token that can
/// occur in an encoded prompt over the dataset, plus the specials.
pub fn build_vocab(d: &Dataset) -> Result<Vocabulary> {
    if d.is_empty() {
        return Err(CoatError::InvalidArgument(
            "cannot build a vocabulary from an empty dataset".to_string(),
        ));
    }
    build_vocab_over(std::iter::once(d))
}

/// Like [`build_vocab`] but over several datasets (e.g. both training
/// stages), so one model can serve them all.
pub fn build_vocab_over<'a, I: IntoIterator<Item = &'a Dataset>>(datasets: I) -> Result<Vocabulary> {
    let mut words = BTreeSet::new();
    // Prompt encoding glues the markers onto whitespace boundaries, so
    // they tokenize to exactly these two words.
    words.insert("Input:".to_string());
    words.insert("Prediction:".to_string());
    let mut any = false;
    for d in datasets {
        for s in &d.samples {
            any = true;
            for tok in s.input.split_whitespace().chain(s.target.split_whitespace()) {
                words.insert(tok.to_string());
            }
        }
    }
    if !any {
        return Err(CoatError::InvalidArgument(
            "cannot build a vocabulary from empty datasets".to_string(),
        ));
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(words);
    Ok(Vocabulary::from_tokens(tokens))
}

/// Whitespace tokenization; unknown words map to the unk id.
pub fn tokenize(v: &Vocabulary, text: &str) -> Vec<u32> {
    text.split_whitespace().map(|t| v.id_of(t)).collect()
}

/// Inverse of [`tokenize`] up to whitespace normalization.
pub fn detokenize(v: &Vocabulary, ids: &[u32]) -> String {
    ids.iter()
        .map(|&id| v.token_of(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Collapses runs of whitespace to single spaces and trims.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Token ids of the full teacher-forcing sequence: encoded prompt, one
/// `Prediction:` marker, the target tokens, then end-of-sequence. Returns
/// the ids and the index of the first target token (the `target_start`),
/// so loss masks can cover exactly the target plus eos.
pub fn training_sequence(v: &Vocabulary, p: &PromptInstance) -> Result<(Vec<u32>, usize)> {
    if p.predicted_target().is_empty() {
        return Err(CoatError::InvalidArgument(
            "instance has no predicted target".to_string(),
        ));
    }
    let mut ids = tokenize(v, &encode_prompt(p));
    ids.push(v.id_of("Prediction:"));
    let target_start = ids.len();
    ids.extend(tokenize(v, p.predicted_target()));
    ids.push(EOS_ID);
    Ok((ids, target_start))
}

/// Mask selecting the positions whose next-token label is a target token
/// or the final eos; pairs with [`training_sequence`].
pub fn target_mask(len: usize, target_start: usize) -> Vec<bool> {
    // The last position has no next-token label and is never scored.
    (0..len).map(|t| t + 1 >= target_start && t + 1 < len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syndata::{Sample, Split};
    use proptest::prelude::*;

    fn inst(demos: &[(&str, &str)], x: &str, y: &str) -> PromptInstance {
        PromptInstance::new(
            demos
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            x.to_string(),
            y.to_string(),
        )
        .unwrap()
    }

    #[test]
    fn zero_shot_encoding() {
        assert_eq!(encode_prompt(&inst(&[], "q", "z")), "Input: q");
    }

    #[test]
    fn two_shot_encoding_matches_wire_format() {
        let p = inst(&[("a", "1"), ("b", "2")], "c", "3");
        assert_eq!(
            encode_prompt(&p),
            "Input: a Prediction: 1\nInput: b Prediction: 2\nInput: c"
        );
    }

    #[test]
    fn marker_counts_are_exact() {
        for k in 0..=8 {
            let demos: Vec<(String, String)> = (0..k)
                .map(|i| (format!("x{i}"), format!("y{i}")))
                .collect();
            let p = PromptInstance::new(demos, "pred".to_string(), "t".to_string()).unwrap();
            let text = encode_prompt(&p);
            assert_eq!(text.matches(" Prediction: ").count(), k);
            assert_eq!(text.matches("Input: ").count(), k + 1);
            assert!(!text.ends_with('\n'));
        }
    }

    #[test]
    fn reserved_marker_in_field_is_rejected() {
        let r = PromptInstance::new(
            vec![("x Input: y".to_string(), "1".to_string())],
            "q".to_string(),
            "t".to_string(),
        );
        assert!(matches!(r, Err(CoatError::InvalidArgument(_))));
    }

    #[test]
    fn predicted_input_must_differ_from_demo_inputs() {
        let r = PromptInstance::new(
            vec![("q".to_string(), "1".to_string())],
            "q".to_string(),
            "t".to_string(),
        );
        assert!(matches!(r, Err(CoatError::InvalidArgument(_))));
    }

    #[test]
    fn decode_zero_shot() {
        let p = decode_prompt("Input: q").unwrap();
        assert_eq!(p.k(), 0);
        assert_eq!(p.predicted_input(), "q");
        assert_eq!(p.predicted_target(), "");
    }

    #[test]
    fn decode_rejects_bare_prediction_line() {
        let err = decode_prompt("Prediction: 1").unwrap_err();
        match err {
            CoatError::Parse { position, .. } => assert_eq!(position, 0),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn decode_reports_position_of_bad_line() {
        let err = decode_prompt("Input: a Prediction: 1\nbogus line\nInput: c").unwrap_err();
        match err {
            CoatError::Parse { position, .. } => assert_eq!(position, 23),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn spec_demo_example_round_trips() {
        let p = inst(&[("a", "1"), ("b", "2")], "c", "3");
        let decoded = decode_prompt(&encode_prompt(&p)).unwrap();
        assert_eq!(decoded.demonstrations(), p.demonstrations());
        assert_eq!(decoded.predicted_input(), p.predicted_input());
    }

    fn field_strategy() -> impl Strategy<Value = String> {
        // Space-separated words over a small alphabet; never empty, never
        // containing markers or newlines.
        proptest::collection::vec("[a-z0-9=>]{1,6}", 1..5).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            demos in proptest::collection::vec((field_strategy(), field_strategy()), 0..8),
            x_pred in field_strategy(),
        ) {
            prop_assume!(demos.iter().all(|(x, _)| *x != x_pred));
            let p = PromptInstance::new(demos, x_pred, String::new()).unwrap();
            let decoded = decode_prompt(&encode_prompt(&p)).unwrap();
            prop_assert_eq!(decoded, p);
        }

        #[test]
        fn token_round_trip_preserves_normalized_text(
            words in proptest::collection::vec("[a-z]{1,4}", 1..12),
            pad in " {0,3}",
        ) {
            let text = format!("{}{}", words.join("  "), pad);
            let sample = Sample::new(0, words.join(" "), "t".to_string(), "c".to_string()).unwrap();
            let d = Dataset::new(vec![sample], Split::Train).unwrap();
            let v = build_vocab(&d).unwrap();
            let ids = tokenize(&v, &text);
            prop_assert_eq!(detokenize(&v, &ids), normalize_ws(&text));
        }
    }

    #[test]
    fn vocab_counts_distinct_tokens_plus_specials() {
        // 38 distinct words in the texts + the two markers = 40 tokens,
        // plus three specials.
        let words: Vec<String> = (0..37).map(|i| format!("w{i}")).collect();
        let sample = Sample::new(
            0,
            words.join(" "),
            "answer".to_string(),
            "c".to_string(),
        )
        .unwrap();
        let d = Dataset::new(vec![sample], Split::Train).unwrap();
        let v = build_vocab(&d).unwrap();
        assert_eq!(v.len(), 40 + SPECIALS.len());
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let sample = Sample::new(0, "a b".to_string(), "c".to_string(), "k".to_string()).unwrap();
        let d = Dataset::new(vec![sample], Split::Train).unwrap();
        let v = build_vocab(&d).unwrap();
        assert_eq!(tokenize(&v, "zzz"), vec![UNK_ID]);
        assert_eq!(tokenize(&v, ""), Vec::<u32>::new());
        assert_eq!(tokenize(&v, "Input: a").len(), 2);
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let d = crate::syndata::gen_dataset(50, 5, 3).unwrap();
        let v = build_vocab(&d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded, v);
    }

    #[test]
    fn training_sequence_masks_exactly_target_and_eos() {
        let p = inst(&[("a x", "1")], "b y", "7 8");
        let d = Dataset::new(
            vec![
                Sample::new(0, "a x".to_string(), "1".to_string(), "c".to_string()).unwrap(),
                Sample::new(1, "b y".to_string(), "7 8".to_string(), "c".to_string()).unwrap(),
            ],
            Split::Train,
        )
        .unwrap();
        let v = build_vocab(&d).unwrap();
        let (ids, target_start) = training_sequence(&v, &p).unwrap();
        // "Input: a x Prediction: 1 Input: b y Prediction:" is 9 tokens,
        // then the target "7 8" and eos.
        assert_eq!(ids.len(), 9 + 2 + 1);
        assert_eq!(target_start, 9);
        assert_eq!(&ids[target_start..], &[v.id_of("7"), v.id_of("8"), EOS_ID]);
        let mask = target_mask(ids.len(), target_start);
        let scored: Vec<usize> = (0..ids.len()).filter(|&t| mask[t]).collect();
        assert_eq!(scored, vec![8, 9, 10]);
    }
}
