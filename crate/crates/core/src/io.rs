//! File formats: trial tables (CSV or JSON), latents, loss traces and
//! JSON-lines session logs.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dale::SessionLogRecord;
use crate::error::{Error, Result};
use crate::task::{Outcome, Stimulus, TaskId, TrialRecord};
use crate::vi::{LatentGaussian, ParticipantData, PopulationData};

/// One row of a trial table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub participant_id: String,
    pub task_id: TaskId,
    pub stimulus: Stimulus,
    pub outcome: String,
}

fn rows_of(data: &PopulationData) -> Vec<TrialRow> {
    data.participants
        .iter()
        .flat_map(|p| {
            p.trials.iter().map(|t| TrialRow {
                participant_id: p.id.clone(),
                task_id: t.task_id,
                stimulus: t.stimulus,
                outcome: t.outcome.to_string(),
            })
        })
        .collect()
}

/// Groups rows by participant in order of first appearance. Each
/// participant's sequence index counts its own rows.
pub fn population_from_rows(rows: Vec<TrialRow>) -> Result<PopulationData> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Vec<TrialRecord>> = BTreeMap::new();
    for (line, row) in rows.into_iter().enumerate() {
        let family = row.task_id.spec().family;
        let outcome = Outcome::parse_for(family, &row.outcome).map_err(|e| Error::Parse(format!("row {}: {e}", line + 1)))?;
        let trials = by_id.entry(row.participant_id.clone()).or_insert_with(|| {
            order.push(row.participant_id.clone());
            Vec::new()
        });
        let t = TrialRecord::new(row.task_id, row.stimulus, outcome, trials.len() as u64);
        t.validate()?;
        trials.push(t);
    }
    let participants = order
        .into_iter()
        .map(|id| {
            let trials = by_id.remove(&id).unwrap_or_default();
            ParticipantData { id, trials }
        })
        .collect();
    Ok(PopulationData { participants })
}

pub fn read_trials_csv(path: &Path) -> Result<PopulationData> {
    let mut rdr = csv::Reader::from_path(path)?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<TrialRow>, _>>()?;
    population_from_rows(rows)
}

pub fn write_trials_csv(path: &Path, data: &PopulationData) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows_of(data) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON array of rows. Outcomes may be numbers, booleans or strings.
pub fn read_trials_json(path: &Path) -> Result<PopulationData> {
    #[derive(Deserialize)]
    struct JsonRow {
        participant_id: String,
        task_id: TaskId,
        stimulus: Stimulus,
        outcome: serde_json::Value,
    }
    let raw: Vec<JsonRow> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let rows = raw
        .into_iter()
        .map(|r| TrialRow {
            participant_id: r.participant_id,
            task_id: r.task_id,
            stimulus: r.stimulus,
            outcome: match r.outcome {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            },
        })
        .collect();
    population_from_rows(rows)
}

pub fn write_trials_json(path: &Path, data: &PopulationData) -> Result<()> {
    let rows: Vec<serde_json::Value> = data
        .participants
        .iter()
        .flat_map(|p| {
            p.trials.iter().map(|t| {
                serde_json::json!({
                    "participant_id": p.id,
                    "task_id": t.task_id,
                    "stimulus": t.stimulus,
                    "outcome": t.outcome,
                })
            })
        })
        .collect();
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

/// Reads a trial table, choosing the format from the file extension.
pub fn read_trials(path: &Path) -> Result<PopulationData> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => read_trials_json(path),
        Some("csv") => read_trials_csv(path),
        other => Err(Error::Parse(format!("unknown trial table extension {other:?}"))),
    }
}

pub fn write_trials(path: &Path, data: &PopulationData) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => write_trials_json(path, data),
        _ => write_trials_csv(path, data),
    }
}

/// Latents keyed by participant id.
pub fn write_latents_json(path: &Path, data: &PopulationData, latents: &[LatentGaussian]) -> Result<()> {
    if data.participants.len() != latents.len() {
        return Err(Error::Contract(format!("{} participants vs {} latents", data.participants.len(), latents.len())));
    }
    let map: BTreeMap<&str, &LatentGaussian> =
        data.participants.iter().map(|p| p.id.as_str()).zip(latents).collect();
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &map)?;
    w.flush()?;
    Ok(())
}

pub fn read_latents_json(path: &Path) -> Result<BTreeMap<String, LatentGaussian>> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_loss_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one record as a JSON line and flushes it to disk.
pub fn append_session_record(path: &Path, record: &SessionLogRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

pub fn write_session_log(path: &Path, records: &[SessionLogRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON-lines log. A torn final line (no trailing newline and not
/// parseable) is dropped, since it is an interrupted append.
pub fn read_session_log(path: &Path) -> Result<Vec<SessionLogRecord>> {
    let text = std::fs::read_to_string(path)?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => return Err(Error::Parse(format!("{}: line {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{default_generator, generate_population, TbCounts};

    fn population() -> PopulationData {
        let g = default_generator(1).unwrap();
        generate_population(3, &g, &TbCounts::training().items()[..40], 2).unwrap().0
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let data = population();
        write_trials_csv(&path, &data).unwrap();
        assert_eq!(read_trials(&path).unwrap(), data);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let data = population();
        write_trials_json(&path, &data).unwrap();
        assert_eq!(read_trials(&path).unwrap(), data);
    }

    #[test]
    fn csv_parse_errors_carry_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "participant_id,task_id,stimulus,outcome\na,stroop,unit,fast\n").unwrap();
        let err = read_trials_csv(&path).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn torn_last_line_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, "{\"index\":").unwrap();
        assert!(read_session_log(&path).unwrap().is_empty());
        std::fs::write(&path, "{\"index\":\n").unwrap();
        assert!(read_session_log(&path).is_err());
    }
}
