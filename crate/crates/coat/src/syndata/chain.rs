//! Reasoning primitives and explanation chains.
//!
//! A concept is an ordered chain of declarative reasoning steps such as
//! select→group→project. Executing the chain over an entity table yields
//! the answer text, so every generated sample is checkable by construction.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{CoatError, Result};
use crate::syndata::table::{EntityTable, Row};

/// Number of distinct primitive names; chain ids are drawn from this set.
pub const PRIMITIVE_COUNT: usize = 8;

/// Separator used when joining step names into a concept id.
pub const CHAIN_SEP: &str = "→";

/// One step of an explanation chain.
///
/// The filter threshold parameterizes execution but is not part of the
/// primitive's name: two filter chains with different thresholds share a
/// concept id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReasoningPrimitive {
    Select,
    Filter { threshold: u32 },
    Group,
    Project,
    Count,
    Compare,
    Max,
    Min,
}

impl ReasoningPrimitive {
    /// Canonical lowercase name; the closed set has exactly
    /// [`PRIMITIVE_COUNT`] members.
    pub fn name(&self) -> &'static str {
        match self {
            ReasoningPrimitive::Select => "select",
            ReasoningPrimitive::Filter { .. } => "filter",
            ReasoningPrimitive::Group => "group",
            ReasoningPrimitive::Project => "project",
            ReasoningPrimitive::Count => "count",
            ReasoningPrimitive::Compare => "compare",
            ReasoningPrimitive::Max => "max",
            ReasoningPrimitive::Min => "min",
        }
    }

    /// Rendering used inside question text. Unlike [`name`], the filter
    /// threshold is visible here so the answer stays derivable from the
    /// input alone.
    ///
    /// [`name`]: ReasoningPrimitive::name
    pub fn question_token(&self) -> String {
        match self {
            ReasoningPrimitive::Filter { threshold } => format!("filter>{threshold}"),
            other => other.name().to_string(),
        }
    }

    fn parse_question_token(tok: &str) -> Result<Self> {
        if let Some(t) = tok.strip_prefix("filter>") {
            let threshold: u32 = t.parse().map_err(|_| {
                CoatError::ChainExecution(format!("bad filter threshold in {tok:?}"))
            })?;
            return Ok(ReasoningPrimitive::Filter { threshold });
        }
        match tok {
            "select" => Ok(ReasoningPrimitive::Select),
            "group" => Ok(ReasoningPrimitive::Group),
            "project" => Ok(ReasoningPrimitive::Project),
            "count" => Ok(ReasoningPrimitive::Count),
            "compare" => Ok(ReasoningPrimitive::Compare),
            "max" => Ok(ReasoningPrimitive::Max),
            "min" => Ok(ReasoningPrimitive::Min),
            other => Err(CoatError::ChainExecution(format!(
                "unknown primitive {other:?}"
            ))),
        }
    }
}

/// An ordered sequence of reasoning primitives, length 1 to 4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptChain {
    steps: Vec<ReasoningPrimitive>,
}

impl ConceptChain {
    pub fn new(steps: Vec<ReasoningPrimitive>) -> Result<Self> {
        if steps.is_empty() || steps.len() > 4 {
            return Err(CoatError::InvalidArgument(format!(
                "chain length must be in [1, 4], got {}",
                steps.len()
            )));
        }
        Ok(ConceptChain { steps })
    }

    pub fn steps(&self) -> &[ReasoningPrimitive] {
        &self.steps
    }

    /// Concept identifier: step names joined with an arrow. Deterministic
    /// in the steps, independent of filter thresholds.
    pub fn id(&self) -> String {
        self.steps
            .iter()
            .map(|p| p.name())
            .collect::<Vec<_>>()
            .join(CHAIN_SEP)
    }

    /// Question rendering, e.g. `apply select filter>4 count ?`.
    pub fn question(&self) -> String {
        let body = self
            .steps
            .iter()
            .map(|p| p.question_token())
            .collect::<Vec<_>>()
            .join(" ");
        format!("apply {body} ?")
    }

    /// Copy of the chain with every filter threshold redrawn. The concept
    /// id is unchanged (thresholds are not part of it); sample generation
    /// redraws thresholds per attempt so that even threshold-sensitive
    /// chains find an executable table quickly.
    pub fn with_resampled_thresholds(&self, rng: &mut ChaCha8Rng) -> Self {
        let steps = self
            .steps
            .iter()
            .map(|p| match p {
                ReasoningPrimitive::Filter { .. } => ReasoningPrimitive::Filter {
                    threshold: rng.random_range(1..=6),
                },
                other => *other,
            })
            .collect();
        ConceptChain { steps }
    }

    /// Inverse of [`question`]; used to re-derive answers from input text.
    ///
    /// [`question`]: ConceptChain::question
    pub fn parse_question(text: &str) -> Result<Self> {
        let trimmed = text.trim();
        let body = trimmed
            .strip_prefix("apply ")
            .and_then(|rest| rest.strip_suffix('?'))
            .ok_or_else(|| {
                CoatError::ChainExecution(format!("not a chain question: {trimmed:?}"))
            })?;
        let steps = body
            .split_whitespace()
            .map(ReasoningPrimitive::parse_question_token)
            .collect::<Result<Vec<_>>>()?;
        ConceptChain::new(steps)
    }
}

/// Draws a chain with length uniform in `[1, max_depth]` and uniformly
/// random primitives. Deterministic for a fixed seed.
pub fn gen_concept_chain(rng_seed: u64, max_depth: usize) -> Result<ConceptChain> {
    if !(1..=4).contains(&max_depth) {
        return Err(CoatError::InvalidArgument(format!(
            "max_depth must be in [1, 4], got {max_depth}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let len = rng.random_range(1..=max_depth);
    let steps = (0..len).map(|_| random_primitive(&mut rng)).collect();
    ConceptChain::new(steps)
}

fn random_primitive(rng: &mut ChaCha8Rng) -> ReasoningPrimitive {
    match rng.random_range(0..PRIMITIVE_COUNT) {
        0 => ReasoningPrimitive::Select,
        1 => ReasoningPrimitive::Filter {
            threshold: rng.random_range(1..=6),
        },
        2 => ReasoningPrimitive::Group,
        3 => ReasoningPrimitive::Project,
        4 => ReasoningPrimitive::Count,
        5 => ReasoningPrimitive::Compare,
        6 => ReasoningPrimitive::Max,
        _ => ReasoningPrimitive::Min,
    }
}

/// Intermediate value while folding a chain over a table.
#[derive(Debug, Clone)]
enum ChainValue {
    Rows(Vec<Row>),
    Groups(BTreeMap<u32, Vec<Row>>),
    Keys(Vec<String>),
    Number(usize),
    Text(String),
}

impl ChainValue {
    fn kind(&self) -> &'static str {
        match self {
            ChainValue::Rows(_) => "rows",
            ChainValue::Groups(_) => "groups",
            ChainValue::Keys(_) => "keys",
            ChainValue::Number(_) => "number",
            ChainValue::Text(_) => "text",
        }
    }
}

fn inapplicable(p: &ReasoningPrimitive, v: &ChainValue) -> CoatError {
    CoatError::ChainExecution(format!("{} is inapplicable to {}", p.name(), v.kind()))
}

fn apply(p: &ReasoningPrimitive, value: ChainValue) -> Result<ChainValue> {
    match (p, value) {
        (ReasoningPrimitive::Select, ChainValue::Rows(rows)) => Ok(ChainValue::Rows(rows)),
        (ReasoningPrimitive::Filter { threshold }, ChainValue::Rows(rows)) => Ok(ChainValue::Rows(
            rows.into_iter().filter(|r| r.value > *threshold).collect(),
        )),
        (ReasoningPrimitive::Group, ChainValue::Rows(rows)) => {
            let mut groups: BTreeMap<u32, Vec<Row>> = BTreeMap::new();
            for row in rows {
                groups.entry(row.value).or_default().push(row);
            }
            Ok(ChainValue::Groups(groups))
        }
        (ReasoningPrimitive::Project, ChainValue::Rows(rows)) => Ok(ChainValue::Keys(
            rows.into_iter().map(|r| r.name).collect(),
        )),
        (ReasoningPrimitive::Project, ChainValue::Groups(groups)) => Ok(ChainValue::Keys(
            groups.keys().map(|k| k.to_string()).collect(),
        )),
        (ReasoningPrimitive::Count, ChainValue::Rows(rows)) => Ok(ChainValue::Number(rows.len())),
        (ReasoningPrimitive::Count, ChainValue::Groups(groups)) => {
            Ok(ChainValue::Number(groups.len()))
        }
        (ReasoningPrimitive::Count, ChainValue::Keys(keys)) => Ok(ChainValue::Number(keys.len())),
        (ReasoningPrimitive::Compare, ChainValue::Rows(rows)) => {
            if rows.len() < 2 {
                return Err(CoatError::ChainExecution(format!(
                    "compare needs at least 2 rows, got {}",
                    rows.len()
                )));
            }
            let first = rows.first().expect("nonempty").value;
            let last = rows.last().expect("nonempty").value;
            Ok(ChainValue::Text(
                if first > last { "yes" } else { "no" }.to_string(),
            ))
        }
        (ReasoningPrimitive::Max, ChainValue::Rows(rows)) => extremum(rows, true),
        (ReasoningPrimitive::Min, ChainValue::Rows(rows)) => extremum(rows, false),
        (p, v) => Err(inapplicable(p, &v)),
    }
}

// Ties keep the earliest row, so execution stays deterministic.
fn extremum(rows: Vec<Row>, want_max: bool) -> Result<ChainValue> {
    if rows.is_empty() {
        return Err(CoatError::ChainExecution(
            "max/min over empty rows".to_string(),
        ));
    }
    let mut best = rows[0].clone();
    for row in &rows[1..] {
        let better = if want_max {
            row.value > best.value
        } else {
            row.value < best.value
        };
        if better {
            best = row.clone();
        }
    }
    Ok(ChainValue::Rows(vec![best]))
}

fn render(value: &ChainValue) -> String {
    match value {
        ChainValue::Rows(rows) => rows
            .iter()
            .map(|r| r.name.as_str())
            .collect::<Vec<_>>()
            .join(" "),
        ChainValue::Groups(groups) => groups
            .keys()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(" "),
        ChainValue::Keys(keys) => keys.join(" "),
        ChainValue::Number(n) => n.to_string(),
        ChainValue::Text(t) => t.clone(),
    }
}

/// Folds the chain left-to-right over the table and renders the final
/// value as answer text. The answer may be empty (e.g. a filter that
/// removed every row followed by project); callers treat that as a
/// generation retry, not an error.
pub fn execute_chain(chain: &ConceptChain, context: &EntityTable) -> Result<String> {
    if context.rows.is_empty() {
        return Err(CoatError::InvalidArgument(
            "context table is empty".to_string(),
        ));
    }
    let mut value = ChainValue::Rows(context.rows.clone());
    for step in chain.steps() {
        value = apply(step, value)?;
    }
    Ok(render(&value))
}

/// Abstract feasibility: whether some table of `min_rows..=max_rows` rows
/// can execute the chain to a non-empty answer. Filters out chains that
/// can never run (e.g. `count` followed by `max`) before they are adopted
/// as dataset concepts.
pub fn chain_is_feasible(chain: &ConceptChain, min_rows: usize, max_rows: usize) -> bool {
    #[derive(Clone, Copy, PartialEq)]
    enum Kind {
        Rows,
        Groups,
        Keys,
        Scalar,
    }
    let mut kind = Kind::Rows;
    // Best-case element count reachable by an adversarially helpful table.
    let mut hi = max_rows;
    let _ = min_rows;
    for step in chain.steps() {
        match (step, kind) {
            (ReasoningPrimitive::Select, Kind::Rows) => {}
            (ReasoningPrimitive::Filter { .. }, Kind::Rows) => {
                // A table with all values above the threshold keeps hi.
            }
            (ReasoningPrimitive::Group, Kind::Rows) => kind = Kind::Groups,
            (ReasoningPrimitive::Project, Kind::Rows | Kind::Groups) => kind = Kind::Keys,
            (ReasoningPrimitive::Count, Kind::Rows | Kind::Groups | Kind::Keys) => {
                kind = Kind::Scalar;
                hi = 1;
            }
            (ReasoningPrimitive::Compare, Kind::Rows) => {
                if hi < 2 {
                    return false;
                }
                kind = Kind::Scalar;
                hi = 1;
            }
            (ReasoningPrimitive::Max | ReasoningPrimitive::Min, Kind::Rows) => {
                if hi < 1 {
                    return false;
                }
                hi = 1;
            }
            _ => return false,
        }
    }
    hi >= 1
}
