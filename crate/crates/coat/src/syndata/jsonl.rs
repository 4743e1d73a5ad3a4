//! JSONL dataset files: one record per line with keys `id`, `input`,
//! `target`, `concept`. UTF-8, LF line endings.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{CoatError, Result};
use crate::syndata::{extract_wh_concept, question_portion, Dataset, Sample, Split};

/// Key names used when ingesting externally produced records.
#[derive(Debug, Clone)]
pub struct FieldMap {
    pub input: String,
    pub target: String,
    pub concept: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        FieldMap {
            input: "input".to_string(),
            target: "target".to_string(),
            concept: "concept".to_string(),
        }
    }
}

/// Writes one JSON record per line, LF-terminated.
pub fn write_jsonl(d: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in &d.samples {
        let line = serde_json::to_string(s)
            .map_err(|e| CoatError::InvalidArgument(format!("unserializable sample: {e}")))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a file previously produced by [`write_jsonl`].
pub fn read_jsonl(path: &Path, split: Split) -> Result<Dataset> {
    let d = ingest_jsonl(path, &FieldMap::default())?;
    Dataset::new(d.samples, split)
}

/// Loads records under a caller-supplied field mapping. Records missing
/// the concept key get one derived from the question's initial word.
/// Malformed lines fail with their 1-based line number.
pub fn ingest_jsonl(path: &Path, field_map: &FieldMap) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut line_no = 0usize;
    for line in reader.lines() {
        let line = line?;
        line_no += 1;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_record(&line, line_no, field_map)?);
    }
    if samples.is_empty() {
        return Err(CoatError::InvalidArgument(format!(
            "{}: file contains no records",
            path.display()
        )));
    }
    Dataset::new(samples, Split::Train)
}

fn parse_record(line: &str, line_no: usize, field_map: &FieldMap) -> Result<Sample> {
    let ingest = |message: String| CoatError::Ingest {
        line: line_no,
        message,
    };
    let value: Value =
        serde_json::from_str(line).map_err(|e| ingest(format!("not a JSON record: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ingest("record is not a JSON object".to_string()))?;
    let get_str = |key: &str| -> Result<String> {
        obj.get(key)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ingest(format!("missing or non-string key {key:?}")))
    };
    let input = get_str(&field_map.input)?;
    let target = get_str(&field_map.target)?;
    let concept = match obj.get(&field_map.concept).and_then(Value::as_str) {
        Some(c) => c.to_string(),
        None => extract_wh_concept(question_portion(&input))
            .map_err(|e| ingest(format!("cannot derive concept: {e}")))?,
    };
    let id = match obj.get("id") {
        Some(v) => v
            .as_u64()
            .ok_or_else(|| ingest("id is not a non-negative integer".to_string()))?,
        None => (line_no - 1) as u64,
    };
    Sample::new(id, input, target, concept).map_err(|e| ingest(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syndata::gen_dataset;
    use std::io::Write as _;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn round_trip_preserves_dataset_bytes() {
        let d = gen_dataset(100, 10, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_jsonl(&d, &p1).unwrap();
        let loaded = read_jsonl(&p1, Split::Train).unwrap();
        assert_eq!(loaded, d);
        write_jsonl(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn ingest_counts_records() {
        let f = write_tmp(concat!(
            "{\"id\": 0, \"input\": \"x=1; who has 1 ?\", \"target\": \"x\", \"concept\": \"who\"}\n",
            "{\"id\": 1, \"input\": \"y=2; what is y ?\", \"target\": \"2\", \"concept\": \"what\"}\n",
            "{\"id\": 2, \"input\": \"z=3; how many ?\", \"target\": \"1\", \"concept\": \"how\"}\n",
        ));
        let d = ingest_jsonl(f.path(), &FieldMap::default()).unwrap();
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn missing_concept_falls_back_to_wh_word() {
        let f = write_tmp("{\"input\": \"Who is X?\", \"target\": \"x\"}\n");
        let d = ingest_jsonl(f.path(), &FieldMap::default()).unwrap();
        assert_eq!(d.samples[0].concept, "who");
        assert_eq!(d.samples[0].id, 0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp(concat!(
            "{\"input\": \"who is a ?\", \"target\": \"a\", \"concept\": \"who\"}\n",
            "not json at all\n",
        ));
        let err = ingest_jsonl(f.path(), &FieldMap::default()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");
    }

    #[test]
    fn empty_file_is_invalid() {
        let f = write_tmp("");
        assert!(matches!(
            ingest_jsonl(f.path(), &FieldMap::default()),
            Err(CoatError::InvalidArgument(_))
        ));
    }

    #[test]
    fn custom_field_map_applies() {
        let f = write_tmp("{\"q\": \"where is b ?\", \"a\": \"2\", \"c\": \"where\"}\n");
        let map = FieldMap {
            input: "q".to_string(),
            target: "a".to_string(),
            concept: "c".to_string(),
        };
        let d = ingest_jsonl(f.path(), &map).unwrap();
        assert_eq!(d.samples[0].target, "2");
    }

    #[test]
    fn reserved_marker_in_record_is_rejected_with_line() {
        let f = write_tmp("{\"input\": \"Input: sneaky ?\", \"target\": \"x\", \"concept\": \"c\"}\n");
        let err = ingest_jsonl(f.path(), &FieldMap::default()).unwrap_err();
        assert!(err.to_string().contains("line 1"), "got: {err}");
    }
}
