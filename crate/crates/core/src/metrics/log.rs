//! Run logs as JSON Lines.
//!
//! `run.jsonl` holds one meta record, one record per step and one per
//! event, and is a deterministic function of the configuration. Wall-clock
//! stage timings go to a sidecar (`run.timings.jsonl`) so the main log stays
//! byte-comparable across runs.

use super::MetricsError;
use crate::sim::MisbehaviorEvent;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub domain: String,
    pub strategy: String,
    pub agent: String,
    pub seed: u64,
    pub n_steps: u64,
    pub dt: f64,
    pub scenario: String,
    pub scenario_hash: String,
    pub n_sectors: usize,
    pub route_length: f64,
    pub urban: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    pub fallback: bool,
    pub cooldown: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub s: f64,
    pub cte: f64,
    /// Commanded steering, rad.
    pub steering: f64,
    pub speed: f64,
    /// Distance driven along the route so far, m.
    pub progress: f64,
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub flags: StepFlags,
}

/// Wall-clock stage durations of one step, ms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub step: u64,
    pub sim: f64,
    pub augment: f64,
    pub validate: f64,
    pub agent: f64,
    /// Whole step including logging.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Meta(RunMeta),
    Step(StepRecord),
    Event(MisbehaviorEvent),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub meta: RunMeta,
    pub steps: Vec<StepRecord>,
    pub events: Vec<MisbehaviorEvent>,
    pub timings: Vec<StepTimings>,
    /// The file ended in a partial line (interrupted run).
    pub truncated: bool,
}

pub fn timings_path(run: &Path) -> PathBuf {
    let stem = run
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    run.with_file_name(format!("{stem}.timings.jsonl"))
}

fn parse_lines<T: for<'de> Deserialize<'de>>(
    path: &Path,
) -> Result<(Vec<T>, bool), MetricsError> {
    let file = File::open(path).map_err(|e| MetricsError::Io(path.to_path_buf(), e))?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| MetricsError::Io(path.to_path_buf(), e))?;
        if n == 0 {
            return Ok((out, false));
        }
        lineno += 1;
        if !line.ends_with('\n') {
            // an interrupted writer leaves at most one partial line
            return Ok((out, true));
        }
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
}

impl RunLog {
    pub fn new(meta: RunMeta) -> Self {
        RunLog {
            meta,
            steps: Vec::new(),
            events: Vec::new(),
            timings: Vec::new(),
            truncated: false,
        }
    }

    /// Read a log and, when present, its timings sidecar.
    pub fn read(path: &Path) -> Result<RunLog, MetricsError> {
        let (records, truncated) = parse_lines::<Record>(path)?;
        let mut it = records.into_iter();
        let meta = match it.next() {
            Some(Record::Meta(m)) => m,
            _ => return Err(MetricsError::MissingMeta(path.to_path_buf())),
        };
        let mut log = RunLog::new(meta);
        log.truncated = truncated;
        for r in it {
            match r {
                Record::Meta(_) => return Err(MetricsError::MissingMeta(path.to_path_buf())),
                Record::Step(s) => {
                    if log.steps.last().is_some_and(|p| p.step >= s.step) {
                        return Err(MetricsError::StepOrder(s.step));
                    }
                    log.steps.push(s)
                }
                Record::Event(e) => log.events.push(e),
            }
        }
        let tp = timings_path(path);
        if tp.exists() {
            let (timings, t) = parse_lines::<StepTimings>(&tp)?;
            log.timings = timings;
            log.truncated |= t;
        }
        Ok(log)
    }

    pub fn records(&self) -> impl Iterator<Item = Record> + '_ {
        std::iter::once(Record::Meta(self.meta.clone()))
            .chain(self.interleaved())
    }

    fn interleaved(&self) -> impl Iterator<Item = Record> + '_ {
        // events follow the step they were detected in
        let mut ev = self.events.iter().peekable();
        self.steps.iter().flat_map(move |s| {
            let mut out = vec![Record::Step(s.clone())];
            while let Some(e) = ev.next_if(|e| e.step <= s.step) {
                out.push(Record::Event(*e));
            }
            out
        })
    }

    /// Write the log and sidecar in one go.
    pub fn write(&self, path: &Path) -> Result<(), MetricsError> {
        let mut w = RunLogWriter::create(path, &self.meta)?;
        let mut ev = self.events.iter().peekable();
        for (i, s) in self.steps.iter().enumerate() {
            let t = self.timings.get(i).copied().unwrap_or(StepTimings {
                step: s.step,
                ..Default::default()
            });
            let mut events = Vec::new();
            while let Some(e) = ev.next_if(|e| e.step <= s.step) {
                events.push(*e);
            }
            w.step(s, &events, &t)?;
        }
        Ok(())
    }

    pub fn total_ms(&self) -> f64 {
        self.timings.iter().map(|t| t.total).sum()
    }
}

/// Incremental writer; every step is flushed so an interrupted run leaves a
/// parseable prefix.
pub struct RunLogWriter {
    path: PathBuf,
    run: BufWriter<File>,
    timings: BufWriter<File>,
}

impl RunLogWriter {
    pub fn create(path: &Path, meta: &RunMeta) -> Result<Self, MetricsError> {
        let io = |e| MetricsError::Io(path.to_path_buf(), e);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let run = BufWriter::new(File::create(path).map_err(io)?);
        let timings = BufWriter::new(File::create(timings_path(path)).map_err(io)?);
        let mut w = RunLogWriter {
            path: path.to_path_buf(),
            run,
            timings,
        };
        w.line(&Record::Meta(meta.clone()))?;
        w.flush()?;
        Ok(w)
    }

    fn line(&mut self, rec: &Record) -> Result<(), MetricsError> {
        let text = serde_json::to_string(rec).expect("records serialize");
        writeln!(self.run, "{text}").map_err(|e| MetricsError::Io(self.path.clone(), e))
    }

    pub fn step(
        &mut self,
        rec: &StepRecord,
        events: &[MisbehaviorEvent],
        timings: &StepTimings,
    ) -> Result<(), MetricsError> {
        self.line(&Record::Step(rec.clone()))?;
        for e in events {
            self.line(&Record::Event(*e))?;
        }
        let text = serde_json::to_string(timings).expect("timings serialize");
        writeln!(self.timings, "{text}").map_err(|e| MetricsError::Io(self.path.clone(), e))?;
        self.flush()
    }

    pub fn flush(&mut self) -> Result<(), MetricsError> {
        let io = |e| MetricsError::Io(self.path.clone(), e);
        self.run.flush().map_err(io)?;
        self.timings.flush().map_err(io)
    }
}
