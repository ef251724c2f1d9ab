//! Deterministic serialization of round records, plus model checkpoints.
//!
//! Metrics files are a pure function of the experiment configuration: one
//! record per round, append-only, every real serialized with 17 significant
//! digits (scientific form, round-trip exact for doubles), and nothing
//! wall-clock-dependent written. Replaying a run must reproduce the file
//! byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::runtime::RoundRecord;
use crate::vec::ParamVec;

/// 17-significant-digit decimal form; parses back to the identical double.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn join_list(values: &[f64]) -> String {
    values
        .iter()
        .map(|&v| format_f64(v))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(';')
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::MalformedFile(format!("bad {what} entry `{tok}`")))
        })
        .collect()
}

/// Column order mirrors the record's field declaration order; the wall-clock
/// field is deliberately absent (it would break replay determinism).
pub const CSV_HEADER: &str =
    "round,objective,client_losses,worst_loss,weights,grad_norm,max_drift_sq,drift_bound,clamp_events";

pub fn record_to_csv(rec: &RoundRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        rec.round,
        format_f64(rec.objective),
        join_list(&rec.client_losses),
        format_f64(rec.worst_loss),
        join_list(&rec.weights),
        format_f64(rec.grad_norm),
        format_f64(rec.max_drift_sq),
        format_f64(rec.drift_bound),
        rec.clamp_events,
    )
}

pub fn record_to_jsonl(rec: &RoundRecord) -> String {
    let arr = |values: &[f64]| {
        let body = values
            .iter()
            .map(|&v| format_f64(v))
            .collect::<Vec<_>>()
            .join(",");
        format!("[{body}]")
    };
    format!(
        "{{\"round\":{},\"objective\":{},\"client_losses\":{},\"worst_loss\":{},\"weights\":{},\"grad_norm\":{},\"max_drift_sq\":{},\"drift_bound\":{},\"clamp_events\":{}}}",
        rec.round,
        format_f64(rec.objective),
        arr(&rec.client_losses),
        format_f64(rec.worst_loss),
        arr(&rec.weights),
        format_f64(rec.grad_norm),
        format_f64(rec.max_drift_sq),
        format_f64(rec.drift_bound),
        rec.clamp_events,
    )
}

pub fn record_from_csv(line: &str) -> Result<RoundRecord> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 9 {
        return Err(Error::MalformedFile(format!(
            "expected 9 CSV fields, got {}",
            fields.len()
        )));
    }
    let num = |i: usize, what: &str| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .map_err(|_| Error::MalformedFile(format!("bad {what} `{}`", fields[i])))
    };
    Ok(RoundRecord {
        round: fields[0]
            .parse()
            .map_err(|_| Error::MalformedFile(format!("bad round `{}`", fields[0])))?,
        objective: num(1, "objective")?,
        client_losses: parse_list(fields[2], "client_losses")?,
        worst_loss: num(3, "worst_loss")?,
        weights: parse_list(fields[4], "weights")?,
        grad_norm: num(5, "grad_norm")?,
        max_drift_sq: num(6, "max_drift_sq")?,
        drift_bound: num(7, "drift_bound")?,
        clamp_events: fields[8]
            .parse()
            .map_err(|_| Error::MalformedFile(format!("bad clamp_events `{}`", fields[8])))?,
        wall_clock_s: 0.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Jsonl,
}

impl MetricsFormat {
    /// Chooses by file extension; CSV unless the path ends in `.jsonl`/`.json`.
    pub fn from_path(path: &Path) -> MetricsFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => MetricsFormat::Jsonl,
            _ => MetricsFormat::Csv,
        }
    }
}

/// Append-only per-round metrics writer. CSV gets its header exactly once.
pub struct MetricsSink {
    writer: BufWriter<File>,
    format: MetricsFormat,
    header_written: bool,
    path: PathBuf,
}

impl MetricsSink {
    pub fn create(path: &Path, format: MetricsFormat) -> Result<Self> {
        let file = File::create(path)?;
        Ok(MetricsSink {
            writer: BufWriter::new(file),
            format,
            header_written: false,
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends exactly one line for the record.
    pub fn write_round(&mut self, rec: &RoundRecord) -> Result<()> {
        match self.format {
            MetricsFormat::Csv => {
                if !self.header_written {
                    writeln!(self.writer, "{CSV_HEADER}")?;
                    self.header_written = true;
                }
                writeln!(self.writer, "{}", record_to_csv(rec))?;
            }
            MetricsFormat::Jsonl => {
                writeln!(self.writer, "{}", record_to_jsonl(rec))?;
            }
        }
        // keep the partial file valid if the run aborts mid-way
        self.writer.flush()?;
        Ok(())
    }
}

/// Reads a metrics file back, sniffing the format from the first character.
pub fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('{') {
            let rec: RoundRecord = serde_json::from_str(trimmed)
                .map_err(|e| Error::MalformedFile(format!("line {}: {e}", idx + 1)))?;
            records.push(rec);
        } else if idx == 0 && trimmed == CSV_HEADER {
            continue;
        } else {
            records.push(record_from_csv(trimmed)?);
        }
    }
    Ok(records)
}

/// FNV-1a over the canonical config bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Checkpoint layout: u64 LE count, count f64 LE values, u64 LE config hash.
pub fn checkpoint_model(path: &Path, w: &ParamVec, cfg_hash: u64) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(&(w.len() as u64).to_le_bytes())?;
    for &v in w.as_slice() {
        writer.write_all(&v.to_le_bytes())?;
    }
    writer.write_all(&cfg_hash.to_le_bytes())?;
    writer.flush()?;
    Ok(())
}

/// Reads a checkpoint back, returning the model and the stored config hash.
pub fn load_checkpoint(path: &Path) -> Result<(ParamVec, u64)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut u64buf = [0u8; 8];
    reader.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        reader.read_exact(&mut u64buf)?;
        values.push(f64::from_le_bytes(u64buf));
    }
    reader.read_exact(&mut u64buf)?;
    let hash = u64::from_le_bytes(u64buf);
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::MalformedFile(
            "checkpoint has trailing bytes".to_string(),
        ));
    }
    Ok((ParamVec::from(values), hash))
}

/// Loads and refuses a checkpoint written under a different configuration.
pub fn load_checkpoint_checked(path: &Path, expected_hash: u64) -> Result<ParamVec> {
    let (w, found) = load_checkpoint(path)?;
    if found != expected_hash {
        return Err(Error::CheckpointHashMismatch {
            found,
            expected: expected_hash,
        });
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_record() -> RoundRecord {
        RoundRecord {
            round: 3,
            objective: 1.234567890123456789,
            client_losses: vec![0.5, -1.25, std::f64::consts::PI],
            worst_loss: std::f64::consts::PI,
            weights: vec![0.2, 0.3, 0.5],
            grad_norm: 1e-7,
            max_drift_sq: 4.2e-3,
            drift_bound: 0.5,
            clamp_events: 2,
            wall_clock_s: 123.456,
        }
    }

    #[test]
    fn csv_round_trip_is_field_identical() {
        let rec = sample_record();
        let parsed = record_from_csv(&record_to_csv(&rec)).unwrap();
        assert_eq!(parsed.round, rec.round);
        assert_eq!(parsed.objective, rec.objective);
        assert_eq!(parsed.client_losses, rec.client_losses);
        assert_eq!(parsed.worst_loss, rec.worst_loss);
        assert_eq!(parsed.weights, rec.weights);
        assert_eq!(parsed.grad_norm, rec.grad_norm);
        assert_eq!(parsed.max_drift_sq, rec.max_drift_sq);
        assert_eq!(parsed.drift_bound, rec.drift_bound);
        assert_eq!(parsed.clamp_events, rec.clamp_events);
        // wall clock is intentionally not serialized
        assert_eq!(parsed.wall_clock_s, 0.0);
    }

    #[test]
    fn jsonl_round_trip_is_field_identical() {
        let rec = sample_record();
        let line = record_to_jsonl(&rec);
        let parsed: RoundRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(parsed.objective, rec.objective);
        assert_eq!(parsed.client_losses, rec.client_losses);
        assert_eq!(parsed.clamp_events, rec.clamp_events);
    }

    #[test]
    fn csv_header_matches_serialized_fields() {
        // the header must list exactly the serialized record fields in order
        let line = record_to_jsonl(&sample_record());
        let json: serde_json::Value = serde_json::from_str(&line).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        assert_eq!(keys.join(","), CSV_HEADER);
    }

    #[test]
    fn sink_writes_one_line_per_round() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut sink = MetricsSink::create(&path, MetricsFormat::Csv).unwrap();
        sink.write_round(&sample_record()).unwrap();
        sink.write_round(&sample_record()).unwrap();
        drop(sink);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3); // header + 2 records
        let records = read_records(&path).unwrap();
        assert_eq!(records.len(), 2);
    }

    #[test]
    fn jsonl_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = MetricsSink::create(&path, MetricsFormat::Jsonl).unwrap();
        sink.write_round(&sample_record()).unwrap();
        drop(sink);
        let records = read_records(&path).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].weights, sample_record().weights);
    }

    #[test]
    fn format_detection() {
        assert_eq!(
            MetricsFormat::from_path(Path::new("out.jsonl")),
            MetricsFormat::Jsonl
        );
        assert_eq!(
            MetricsFormat::from_path(Path::new("out.csv")),
            MetricsFormat::Csv
        );
        assert_eq!(
            MetricsFormat::from_path(Path::new("out")),
            MetricsFormat::Csv
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let w = ParamVec::from(vec![1.5, -2.25, 1e-300, 0.0]);
        checkpoint_model(&path, &w, 0xDEADBEEF).unwrap();
        let (loaded, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, w);
        assert_eq!(hash, 0xDEADBEEF);
        assert!(load_checkpoint_checked(&path, 0xDEADBEEF).is_ok());
        assert!(matches!(
            load_checkpoint_checked(&path, 0xBAD),
            Err(Error::CheckpointHashMismatch { .. })
        ));
    }

    #[test]
    fn empty_checkpoint_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        checkpoint_model(&path, &ParamVec::zeros(0), 7).unwrap();
        let (loaded, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 0);
        assert_eq!(hash, 7);
    }

    proptest! {
        #[test]
        fn f64_formatting_round_trips_exactly(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let parsed: f64 = format_f64(x).parse().unwrap();
            prop_assert_eq!(parsed.to_bits(), x.to_bits());
        }

        #[test]
        fn checkpoint_round_trips_bitwise(
            values in proptest::collection::vec(any::<u64>(), 0..32),
            hash in any::<u64>(),
        ) {
            let w = ParamVec::from(
                values.iter().map(|&b| f64::from_bits(b)).collect::<Vec<_>>()
            );
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("w.ckpt");
            checkpoint_model(&path, &w, hash).unwrap();
            let (loaded, h) = load_checkpoint(&path).unwrap();
            prop_assert_eq!(h, hash);
            prop_assert_eq!(loaded.len(), w.len());
            for (a, b) in loaded.as_slice().iter().zip(w.as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
