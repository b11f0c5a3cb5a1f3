//! Trace CSV reading and writing.
//!
//! One row per decision time, sorted by participant, day and `t`. Booleans
//! are `0`/`1`; `prob` and `action` are empty where no decision was made.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use seqrts_core::trial::{AvailabilityFlags, DecisionRecord, ParticipantTrace, TraceWarning, TrialConfig};

use crate::error::DataError;
use crate::fmt::{flag, opt_float};

pub const HEADER: [&str; 13] = [
    "participant_id",
    "day",
    "t",
    "steps",
    "sedentary",
    "avail_active",
    "avail_conn",
    "avail_lockout",
    "avail_dnd",
    "available",
    "risk",
    "prob",
    "action",
];

pub fn write_traces<W: Write>(out: W, traces: &[ParticipantTrace]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(HEADER)?;
    let mut ordered: Vec<&ParticipantTrace> = traces.iter().collect();
    ordered.sort_by_key(|t| (t.participant_id, t.day));
    for tr in ordered {
        for (t, r) in tr.records.iter().enumerate() {
            w.write_record([
                tr.participant_id.to_string().as_str(),
                &tr.day.to_string(),
                &t.to_string(),
                &r.steps.to_string(),
                flag(r.sedentary),
                flag(r.flags.not_active),
                flag(r.flags.connected),
                flag(r.flags.not_locked_out),
                flag(r.flags.not_dnd),
                flag(r.available),
                flag(r.risk),
                &opt_float(r.prob),
                r.action.map(flag).unwrap_or(""),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn traces_to_string(traces: &[ParticipantTrace]) -> String {
    let mut buf = Vec::new();
    write_traces(&mut buf, traces).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is UTF-8")
}

struct Row<'a> {
    line: u64,
    fields: &'a csv::StringRecord,
}

impl Row<'_> {
    fn raw(&self, col: usize) -> &str {
        self.fields.get(col).unwrap_or("")
    }

    fn err(&self, col: usize, msg: impl Into<String>) -> DataError {
        DataError::at(self.line, HEADER[col], msg)
    }

    fn int<T: std::str::FromStr>(&self, col: usize) -> Result<T, DataError> {
        self.raw(col).parse().map_err(|_| self.err(col, format!("expected a non-negative integer, got {:?}", self.raw(col))))
    }

    fn boolean(&self, col: usize) -> Result<bool, DataError> {
        match self.raw(col) {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(self.err(col, format!("expected 0 or 1, got {other:?}"))),
        }
    }

    fn opt_bool(&self, col: usize) -> Result<Option<bool>, DataError> {
        if self.raw(col).is_empty() {
            Ok(None)
        } else {
            self.boolean(col).map(Some)
        }
    }

    fn opt_prob(&self, col: usize) -> Result<Option<f64>, DataError> {
        let s = self.raw(col);
        if s.is_empty() {
            return Ok(None);
        }
        match s.parse::<f64>() {
            Ok(p) if p.is_finite() => Ok(Some(p)),
            _ => Err(self.err(col, format!("expected a decimal probability, got {s:?}"))),
        }
    }
}

/// Parsed traces plus tolerated anomalies.
#[derive(Debug)]
pub struct LoadedTraces {
    pub traces: Vec<ParticipantTrace>,
    pub warnings: Vec<TraceWarning>,
}

/// Read and validate a trace CSV. Rows may come in any order; each
/// participant-day must cover every decision time exactly once.
pub fn read_traces<R: Read>(input: R, cfg: &TrialConfig) -> Result<LoadedTraces, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers().map_err(|e| DataError::new(format!("unreadable header: {e}")))?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(DataError {
            row: Some(1),
            ..DataError::new(format!("header must be `{}`", HEADER.join(",")))
        });
    }

    let n_times = cfg.decision_times_per_day();
    let mut days: BTreeMap<(u32, u32), Vec<Option<DecisionRecord>>> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map(|p| p.line());
                return Err(DataError { row: line, ..DataError::new(e.to_string()) });
            }
        }
        let row = Row { line: record.position().map_or(0, |p| p.line()), fields: &record };
        let pid: u32 = row.int(0)?;
        let day: u32 = row.int(1)?;
        let t: usize = row.int(2)?;
        if t >= n_times {
            return Err(row.err(2, format!("decision time {t} outside 0..{n_times}")));
        }
        let flags = AvailabilityFlags {
            not_active: row.boolean(5)?,
            connected: row.boolean(6)?,
            not_locked_out: row.boolean(7)?,
            not_dnd: row.boolean(8)?,
        };
        let rec = DecisionRecord {
            steps: row.int(3)?,
            sedentary: row.boolean(4)?,
            flags,
            available: row.boolean(9)?,
            risk: row.boolean(10)?,
            prob: row.opt_prob(11)?,
            action: row.opt_bool(12)?,
        };
        if rec.available != flags.all() {
            return Err(row.err(9, "must equal the conjunction of the four avail_ columns"));
        }
        if rec.risk != (rec.sedentary && rec.available) {
            return Err(row.err(10, "must equal sedentary AND available"));
        }
        let slots = days.entry((pid, day)).or_insert_with(|| vec![None; n_times]);
        if slots[t].replace(rec).is_some() {
            return Err(row.err(2, format!("duplicate row for participant {pid} day {day} t {t}")));
        }
    }

    let mut traces = Vec::with_capacity(days.len());
    let mut warnings = Vec::new();
    for ((pid, day), slots) in days {
        if let Some(missing) = slots.iter().position(Option::is_none) {
            return Err(DataError::new(format!("participant {pid} day {day}: no row for t = {missing}")));
        }
        let trace = ParticipantTrace { participant_id: pid, day, records: slots.into_iter().flatten().collect() };
        warnings.extend(trace.validate(cfg).map_err(|e| DataError::new(e.to_string()))?);
        traces.push(trace);
    }
    Ok(LoadedTraces { traces, warnings })
}
