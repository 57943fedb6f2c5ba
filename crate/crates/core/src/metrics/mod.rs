//! Failure and driving-quality metrics over run logs.

mod log;

pub use self::log::{timings_path, Record, RunLog, RunLogWriter, RunMeta, StepFlags, StepRecord, StepTimings};

use crate::sim::{EventKind, MisbehaviorEvent};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("n_sectors must be at least 1")]
    NoSectors,
    #[error("event sector {sector} out of range for {n_sectors} sectors")]
    SectorOutOfRange { sector: usize, n_sectors: usize },
    #[error("undefined baseline: nominal {0} is zero")]
    UndefinedBaseline(&'static str),
    #[error("{0} needs at least {1} usable steps")]
    TooFewSteps(&'static str, usize),
    #[error("log is empty")]
    EmptyLog,
    #[error("baseline does not match the run: {0}")]
    MismatchedBaseline(String),
    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, std::io::Error),
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: first record must be the only meta record", path = .0.display())]
    MissingMeta(PathBuf),
    #[error("step {0} is not after its predecessor")]
    StepOrder(u64),
    #[error("csv: {0}")]
    Csv(String),
}

/// Percentage of sectors holding at least one event.
pub fn ftc(events: &[MisbehaviorEvent], n_sectors: usize) -> Result<f64, MetricsError> {
    if n_sectors == 0 {
        return Err(MetricsError::NoSectors);
    }
    let mut hit = BTreeSet::new();
    for e in events {
        if e.sector >= n_sectors {
            return Err(MetricsError::SectorOutOfRange {
                sector: e.sector,
                n_sectors,
            });
        }
        hit.insert(e.sector);
    }
    Ok(100.0 * hit.len() as f64 / n_sectors as f64)
}

pub fn mean_abs_cte(log: &RunLog) -> Option<f64> {
    let v: Vec<f64> = log
        .steps
        .iter()
        .filter(|s| !s.flags.cooldown)
        .map(|s| s.cte.abs())
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean |Δsteering|/dt over consecutive non-cooldown steps.
pub fn mean_jerk(log: &RunLog) -> Option<f64> {
    let dt = log.meta.dt;
    let v: Vec<f64> = log
        .steps
        .windows(2)
        .filter(|w| !w[0].flags.cooldown && !w[1].flags.cooldown && w[1].step == w[0].step + 1)
        .map(|w| (w[1].steering - w[0].steering).abs() / dt)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn rcte(test: &RunLog, nominal: &RunLog) -> Result<f64, MetricsError> {
    let t = mean_abs_cte(test).ok_or(MetricsError::TooFewSteps("rcte", 1))?;
    let n = mean_abs_cte(nominal).ok_or(MetricsError::TooFewSteps("rcte", 1))?;
    if n == 0.0 {
        return Err(MetricsError::UndefinedBaseline("mean |cte|"));
    }
    Ok(t / n)
}

pub fn rsj(test: &RunLog, nominal: &RunLog) -> Result<f64, MetricsError> {
    let t = mean_jerk(test).ok_or(MetricsError::TooFewSteps("rsj", 2))?;
    let n = mean_jerk(nominal).ok_or(MetricsError::TooFewSteps("rsj", 2))?;
    if n == 0.0 {
        return Err(MetricsError::UndefinedBaseline("steering jerk"));
    }
    Ok(t / n)
}

/// Multiplicative infraction penalties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyCoefficients {
    pub cp: f64,
    pub cv: f64,
    pub ori: f64,
    pub rli: f64,
    pub ssi: f64,
}

impl Default for PenaltyCoefficients {
    fn default() -> Self {
        PenaltyCoefficients {
            cp: 0.50,
            cv: 0.60,
            ori: 0.65,
            rli: 0.70,
            ssi: 0.80,
        }
    }
}

/// Urban infraction counts: pedestrian and vehicle collisions, off-road
/// (including static-layout collisions), red lights and stop signs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Infractions {
    pub cp: u32,
    pub cv: u32,
    pub ori: u32,
    pub rli: u32,
    pub ssi: u32,
}

impl Infractions {
    pub fn from_events(events: &[MisbehaviorEvent]) -> Self {
        let mut i = Infractions::default();
        for e in events {
            match e.kind {
                EventKind::CollisionPedestrian => i.cp += 1,
                EventKind::CollisionVehicle => i.cv += 1,
                EventKind::OffRoadUrban | EventKind::Collision | EventKind::Oob => i.ori += 1,
                EventKind::RedLight => i.rli += 1,
                EventKind::StopSign => i.ssi += 1,
            }
        }
        i
    }
}

pub fn driving_score(rc: f64, inf: &Infractions, coef: &PenaltyCoefficients) -> f64 {
    let mut ds = rc;
    for (c, n) in [
        (coef.cp, inf.cp),
        (coef.cv, inf.cv),
        (coef.ori, inf.ori),
        (coef.rli, inf.rli),
        (coef.ssi, inf.ssi),
    ] {
        ds *= c.powi(n as i32);
    }
    ds
}

/// Percentage of the route driven, capped at 100.
pub fn route_completion(log: &RunLog) -> f64 {
    let progress = log.steps.last().map_or(0.0, |s| s.progress);
    if log.meta.route_length <= 0.0 {
        return 0.0;
    }
    (100.0 * progress / log.meta.route_length).clamp(0.0, 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UrbanScores {
    pub ds: f64,
    pub rc: f64,
    pub cp: u32,
    pub cv: u32,
    pub ori: u32,
    pub rli: u32,
    pub ssi: u32,
}

pub fn urban_scores(log: &RunLog, coef: &PenaltyCoefficients) -> UrbanScores {
    let rc = route_completion(log);
    let i = Infractions::from_events(&log.events);
    UrbanScores {
        ds: driving_score(rc, &i, coef),
        rc,
        cp: i.cp,
        cv: i.cv,
        ori: i.ori,
        rli: i.rli,
        ssi: i.ssi,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    /// Mean per-step augmentation plus validation time, retries included.
    pub augment_mean_ms: f64,
    pub augment_std_ms: f64,
    pub augment_total_ms: f64,
    pub total_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_total_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vs_baseline_percent: Option<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn overhead(test: &RunLog, baseline: Option<&RunLog>) -> Result<Overhead, MetricsError> {
    if test.timings.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let aug: Vec<f64> = test.timings.iter().map(|t| t.augment + t.validate).collect();
    let (m, s) = mean_std(&aug);
    let total = test.total_ms();
    let base = match baseline {
        Some(b) if b.timings.is_empty() => return Err(MetricsError::EmptyLog),
        Some(b) => Some(b.total_ms()),
        None => None,
    };
    Ok(Overhead {
        augment_mean_ms: m,
        augment_std_ms: s,
        augment_total_ms: aug.iter().sum(),
        total_min: total / 60_000.0,
        baseline_total_min: base.map(|b| b / 60_000.0),
        vs_baseline_percent: base.filter(|&b| b > 0.0).map(|b| 100.0 * (total - b) / b),
    })
}

/// Relative gap of `test_total - (baseline_total + augment_total)` over the
/// test total; near zero when augmentation explains all extra time.
pub fn accounting_gap(test: &RunLog, baseline: &RunLog) -> f64 {
    let aug: f64 = test.timings.iter().map(|t| t.augment + t.validate).sum();
    let total = test.total_ms();
    if total == 0.0 {
        return 0.0;
    }
    (total - baseline.total_ms() - aug) / total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub domain: String,
    pub strategy: String,
    pub agent: String,
    pub seed: u64,
    pub steps: usize,
    pub collisions: usize,
    pub oob: usize,
    pub events: usize,
    pub ftc: f64,
    pub rcte: Option<f64>,
    pub rsj: Option<f64>,
    pub urban: Option<UrbanScores>,
    pub overhead: Option<Overhead>,
    pub retries: u64,
    pub fallbacks: usize,
}

/// Check that `baseline` was recorded for the same agent, scenario and seed.
pub fn check_baseline(test: &RunLog, baseline: &RunLog) -> Result<(), MetricsError> {
    let (a, b) = (&test.meta, &baseline.meta);
    let mut diffs = Vec::new();
    if a.agent != b.agent {
        diffs.push(format!("agent {} vs {}", a.agent, b.agent));
    }
    if a.scenario_hash != b.scenario_hash {
        diffs.push(format!("scenario hash {} vs {}", a.scenario_hash, b.scenario_hash));
    }
    if a.seed != b.seed {
        diffs.push(format!("seed {} vs {}", a.seed, b.seed));
    }
    if b.strategy != "none" {
        diffs.push(format!("baseline strategy is {}", b.strategy));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(MetricsError::MismatchedBaseline(diffs.join(", ")))
    }
}

pub fn report(
    log: &RunLog,
    baseline: Option<&RunLog>,
    coef: &PenaltyCoefficients,
) -> Result<RunReport, MetricsError> {
    if log.steps.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    if let Some(b) = baseline {
        check_baseline(log, b)?;
    }
    let relative = |f: fn(&RunLog, &RunLog) -> Result<f64, MetricsError>| -> Result<Option<f64>, MetricsError> {
        match baseline {
            None => Ok(None),
            Some(b) => match f(log, b) {
                Ok(v) => Ok(Some(v)),
                Err(MetricsError::UndefinedBaseline(_)) | Err(MetricsError::TooFewSteps(..)) => Ok(None),
                Err(e) => Err(e),
            },
        }
    };
    Ok(RunReport {
        domain: log.meta.domain.clone(),
        strategy: log.meta.strategy.clone(),
        agent: log.meta.agent.clone(),
        seed: log.meta.seed,
        steps: log.steps.len(),
        collisions: log.events.iter().filter(|e| e.kind.is_collision()).count(),
        oob: log.events.iter().filter(|e| e.kind.is_out_of_bounds()).count(),
        events: log.events.len(),
        ftc: ftc(&log.events, log.meta.n_sectors)?,
        rcte: relative(rcte)?,
        rsj: relative(rsj)?,
        urban: log.meta.urban.then(|| urban_scores(log, coef)),
        overhead: if log.timings.is_empty() {
            None
        } else {
            Some(overhead(log, baseline)?)
        },
        retries: log.steps.iter().map(|s| s.retries as u64).sum(),
        fallbacks: log.steps.iter().filter(|s| s.flags.fallback).count(),
    })
}

/// `mean±std` with `prec` decimals.
pub fn fmt_pm(mean: f64, std: f64, prec: usize) -> String {
    format!("{mean:.prec$}±{std:.prec$}")
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

#[derive(Serialize)]
struct CsvRow<'a> {
    domain: &'a str,
    strategy: &'a str,
    agent: &'a str,
    seed: u64,
    steps: usize,
    c: usize,
    oob: usize,
    ftc: f64,
    rcte: Option<f64>,
    rsj: Option<f64>,
    ds: Option<f64>,
    rc: Option<f64>,
    cp: Option<u32>,
    cv: Option<u32>,
    ori: Option<u32>,
    rli: Option<u32>,
    ssi: Option<u32>,
    augment_mean_ms: Option<f64>,
    augment_std_ms: Option<f64>,
    total_min: Option<f64>,
    vs_baseline_percent: Option<f64>,
    retries: u64,
    fallbacks: usize,
}

pub fn reports_to_csv(reports: &[RunReport]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        let u = r.urban.as_ref();
        let o = r.overhead.as_ref();
        w.serialize(CsvRow {
            domain: &r.domain,
            strategy: &r.strategy,
            agent: &r.agent,
            seed: r.seed,
            steps: r.steps,
            c: r.collisions,
            oob: r.oob,
            ftc: r.ftc,
            rcte: r.rcte,
            rsj: r.rsj,
            ds: u.map(|u| u.ds),
            rc: u.map(|u| u.rc),
            cp: u.map(|u| u.cp),
            cv: u.map(|u| u.cv),
            ori: u.map(|u| u.ori),
            rli: u.map(|u| u.rli),
            ssi: u.map(|u| u.ssi),
            augment_mean_ms: o.map(|o| o.augment_mean_ms),
            augment_std_ms: o.map(|o| o.augment_std_ms),
            total_min: o.map(|o| o.total_min),
            vs_baseline_percent: o.and_then(|o| o.vs_baseline_percent),
            retries: r.retries,
            fallbacks: r.fallbacks,
        })
        .map_err(|e| MetricsError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| MetricsError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Aligned text table, columns in the order C, OOB, FTC, RCTE, RSJ, then
/// urban scores and timing when any report has them.
pub fn reports_to_table(reports: &[RunReport]) -> String {
    let urban = reports.iter().any(|r| r.urban.is_some());
    let mut header = vec!["domain", "strategy", "agent", "C", "OOB", "FTC", "RCTE", "RSJ"];
    if urban {
        header.extend(["DS", "RC", "CP", "CV", "ORI", "RLI", "SSI"]);
    }
    header.extend(["aug ms", "run min", "vs base"]);
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        let mut row = vec![
            r.domain.clone(),
            r.strategy.clone(),
            r.agent.clone(),
            r.collisions.to_string(),
            r.oob.to_string(),
            format!("{:.1}%", r.ftc),
            opt(r.rcte, 2),
            opt(r.rsj, 2),
        ];
        if urban {
            match &r.urban {
                Some(u) => row.extend([
                    format!("{:.2}", u.ds),
                    format!("{:.2}", u.rc),
                    u.cp.to_string(),
                    u.cv.to_string(),
                    u.ori.to_string(),
                    u.rli.to_string(),
                    u.ssi.to_string(),
                ]),
                None => row.extend(std::iter::repeat("-".to_string()).take(7)),
            }
        }
        match &r.overhead {
            Some(o) => row.extend([
                fmt_pm(o.augment_mean_ms, o.augment_std_ms, 1),
                format!("{:.2}", o.total_min),
                o.vs_baseline_percent
                    .map_or_else(|| "-".into(), |v| format!("{v:+.1}%")),
            ]),
            None => row.extend(["-".to_string(), "-".to_string(), "-".to_string()]),
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, &w))| {
                let pad = w - cell.chars().count();
                if i < 3 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> RunMeta {
        RunMeta {
            domain: "none".into(),
            strategy: "none".into(),
            agent: "pure_pursuit_mask".into(),
            seed: 1,
            n_steps: 4,
            dt: 0.1,
            scenario: "lane_keeping".into(),
            scenario_hash: "abc".into(),
            n_sectors: 40,
            route_length: 100.0,
            urban: false,
        }
    }

    fn log_with(ctes: &[f64], steer: &[f64]) -> RunLog {
        let mut log = RunLog::new(meta());
        for (i, (&c, &d)) in ctes.iter().zip(steer).enumerate() {
            log.steps.push(StepRecord {
                step: i as u64,
                s: i as f64,
                cte: c,
                steering: d,
                speed: 5.0,
                progress: 0.5 * (i + 1) as f64,
                retries: 0,
                valid: None,
                score: None,
                flags: StepFlags::default(),
            });
            log.timings.push(StepTimings {
                step: i as u64,
                total: 10.0,
                ..Default::default()
            });
        }
        log
    }

    fn ev(sector: usize) -> MisbehaviorEvent {
        MisbehaviorEvent {
            kind: EventKind::Oob,
            step: 0,
            sector,
            s: 0.0,
        }
    }

    #[test]
    fn ftc_examples() {
        assert_eq!(ftc(&[], 40).unwrap(), 0.0);
        assert_eq!(ftc(&[ev(3), ev(17), ev(3)], 40).unwrap(), 5.0);
        let all: Vec<_> = (0..40).map(ev).collect();
        assert_eq!(ftc(&all, 40).unwrap(), 100.0);
        assert!(ftc(&[ev(40)], 40).is_err());
        assert!(ftc(&[], 0).is_err());
    }

    #[test]
    fn relative_metrics() {
        let nominal = log_with(&[0.5, -0.5, 0.5], &[0.0, 0.1, 0.0]);
        assert_eq!(rcte(&nominal, &nominal).unwrap(), 1.0);
        assert_eq!(rsj(&nominal, &nominal).unwrap(), 1.0);
        let test = log_with(&[0.6, 0.6, -0.6], &[0.0, 0.2, 0.0]);
        assert!((rcte(&test, &nominal).unwrap() - 1.2).abs() < 1e-12);
        assert!((rsj(&test, &nominal).unwrap() - 2.0).abs() < 1e-12);
        let flat = log_with(&[0.1, 0.1, 0.1], &[0.3, 0.3, 0.3]);
        assert_eq!(rsj(&flat, &nominal).unwrap(), 0.0);
        assert!(matches!(rsj(&nominal, &flat), Err(MetricsError::UndefinedBaseline(_))));
        let zero = log_with(&[0.0, 0.0], &[0.0, 0.0]);
        assert!(matches!(rcte(&nominal, &zero), Err(MetricsError::UndefinedBaseline(_))));
    }

    #[test]
    fn cooldown_steps_are_skipped() {
        let nominal = log_with(&[0.5, 0.5, 0.5], &[0.0, 0.1, 0.0]);
        let mut test = log_with(&[0.5, 3.0, 0.5], &[0.0, 0.1, 0.0]);
        test.steps[1].flags.cooldown = true;
        assert_eq!(rcte(&test, &nominal).unwrap(), 1.0);
    }

    #[test]
    fn driving_score_examples() {
        let c = PenaltyCoefficients::default();
        assert_eq!(driving_score(84.26, &Infractions::default(), &c), 84.26);
        let cv = Infractions { cv: 1, ..Default::default() };
        assert!((driving_score(100.0, &cv, &c) - 60.0).abs() < 1e-12);
        let two = Infractions { rli: 1, ssi: 1, ..Default::default() };
        assert!((driving_score(50.0, &two, &c) - 28.0).abs() < 1e-12);
    }

    #[test]
    fn log_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.jsonl");
        let mut log = log_with(&[0.1, 0.2, 0.3], &[0.0, 0.1, 0.2]);
        log.events.push(MisbehaviorEvent {
            kind: EventKind::Oob,
            step: 1,
            sector: 2,
            s: 1.0,
        });
        log.write(&p).unwrap();
        assert_eq!(RunLog::read(&p).unwrap(), log);
        // chop the file mid-line
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, &text[..text.len() - 10]).unwrap();
        let partial = RunLog::read(&p).unwrap();
        assert!(partial.truncated);
        assert_eq!(partial.steps.len(), 2);
    }

    #[test]
    fn overhead_and_rendering() {
        let base = log_with(&[0.1; 3], &[0.0, 0.1, 0.0]);
        let mut test = base.clone();
        for t in &mut test.timings {
            t.augment = 5.0;
            t.total += 5.0;
        }
        let o = overhead(&test, Some(&base)).unwrap();
        assert_eq!(o.augment_mean_ms, 5.0);
        assert!((o.vs_baseline_percent.unwrap() - 50.0).abs() < 1e-9);
        assert!(accounting_gap(&test, &base).abs() < 1e-12);
        assert_eq!(fmt_pm(12.34, 0.66, 1), "12.3±0.7");
        let r = report(&test, Some(&base), &PenaltyCoefficients::default()).unwrap();
        let csv = reports_to_csv(&[r.clone()]).unwrap();
        assert!(csv.starts_with("domain,strategy,agent,seed"));
        assert!(reports_to_table(&[r]).contains("5.0±0.0"));
    }

    #[test]
    fn mismatched_baseline_refused() {
        let base = log_with(&[0.1; 3], &[0.0; 3]);
        let mut test = base.clone();
        test.meta.scenario_hash = "other".into();
        assert!(matches!(
            report(&test, Some(&base), &PenaltyCoefficients::default()),
            Err(MetricsError::MismatchedBaseline(_))
        ));
    }
}
