//! Entity tables and their text rendering.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoatError, Result};

/// Closed pool of entity names; keeping it small keeps the vocabulary
/// closed so a from-scratch word-level model can cover it.
pub const NAME_POOL: [&str; 12] = [
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l",
];

pub const MIN_VALUE: u32 = 1;
pub const MAX_VALUE: u32 = 9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub name: String,
    pub value: u32,
}

/// A tiny single-table context: a handful of `name=value` entities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityTable {
    pub rows: Vec<Row>,
}

impl EntityTable {
    /// Renders the full sample input: rows then the question, all joined
    /// with `"; "`, e.g. `a=2; b=7; c=5; apply select max ?`.
    pub fn render_input(&self, question: &str) -> String {
        let mut parts: Vec<String> = self
            .rows
            .iter()
            .map(|r| format!("{}={}", r.name, r.value))
            .collect();
        parts.push(question.to_string());
        parts.join("; ")
    }
}

/// Draws a table with `min_rows..=max_rows` rows, distinct names, and
/// values in `[MIN_VALUE, MAX_VALUE]`. With `distinct_values` every value
/// is unique, which makes value-lookup questions unambiguous.
pub fn gen_table(
    rng: &mut ChaCha8Rng,
    min_rows: usize,
    max_rows: usize,
    distinct_values: bool,
) -> EntityTable {
    assert!(min_rows >= 1 && max_rows <= NAME_POOL.len() && min_rows <= max_rows);
    let n = rng.random_range(min_rows..=max_rows);
    let name_idx = rand::seq::index::sample(rng, NAME_POOL.len(), n);
    let values: Vec<u32> = if distinct_values {
        let span = (MAX_VALUE - MIN_VALUE + 1) as usize;
        rand::seq::index::sample(rng, span, n)
            .into_iter()
            .map(|i| MIN_VALUE + i as u32)
            .collect()
    } else {
        (0..n)
            .map(|_| rng.random_range(MIN_VALUE..=MAX_VALUE))
            .collect()
    };
    let rows = name_idx
        .into_iter()
        .zip(values)
        .map(|(i, value)| Row {
            name: NAME_POOL[i].to_string(),
            value,
        })
        .collect();
    EntityTable { rows }
}

/// Parses a rendered input back into its table and question. This is the
/// inverse of [`EntityTable::render_input`] and exists so datasets can be
/// validated through a path independent of the generator.
pub fn parse_input(input: &str) -> Result<(EntityTable, String)> {
    let parts: Vec<&str> = input.split("; ").collect();
    let (&question, row_parts) = parts.split_last().ok_or_else(|| {
        CoatError::InvalidArgument("input has no question portion".to_string())
    })?;
    let mut rows = Vec::with_capacity(row_parts.len());
    for part in row_parts {
        let (name, value) = part.split_once('=').ok_or_else(|| {
            CoatError::InvalidArgument(format!("malformed row {part:?}"))
        })?;
        let value: u32 = value
            .parse()
            .map_err(|_| CoatError::InvalidArgument(format!("malformed value in {part:?}")))?;
        rows.push(Row {
            name: name.to_string(),
            value,
        });
    }
    if rows.is_empty() {
        return Err(CoatError::InvalidArgument(
            "input has no table rows".to_string(),
        ));
    }
    Ok((EntityTable { rows }, question.to_string()))
}
