//! Run outputs: the numeric trace, the event log, and summary statistics.
//!
//! Traces are plain CSV with one row per step plus a closing row at the
//! final time. Floats are printed with 17 significant digits so a parsed
//! value is bit-identical to the one written; absent values (an isolation
//! estimator before activation, adaptive states of a mode an agent never
//! entered) are empty cells, round-tripped as NaN.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("trace has no column named {0}")]
    MissingColumn(String),
    #[error("trace is empty")]
    Empty,
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.16e}")
    }
}

fn parse_value(cell: &str, line: usize) -> Result<f64, TraceError> {
    if cell.is_empty() {
        return Ok(f64::NAN);
    }
    cell.parse::<f64>().map_err(|e| TraceError::Parse {
        line,
        detail: format!("bad float {cell:?}: {e}"),
    })
}

/// Column-labeled numeric table.
#[derive(Clone, Debug)]
pub struct Trace {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Trace {
    pub fn new(columns: Vec<String>) -> Self {
        Trace {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width mismatch");
        self.rows.push(row);
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn column_index(&self, name: &str) -> Result<usize, TraceError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| TraceError::MissingColumn(name.to_string()))
    }

    /// Column values in row order.
    pub fn column(&self, name: &str) -> Result<Vec<f64>, TraceError> {
        let idx = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.rows.len() * self.columns.len() * 8);
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let mut first = true;
            for &v in row {
                if !first {
                    out.push(',');
                }
                first = false;
                out.push_str(&format_value(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TraceError> {
        let mut file = fs::File::create(path)?;
        file.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self, TraceError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(TraceError::Empty)?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (index, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() {
                return Err(TraceError::Parse {
                    line: index + 1,
                    detail: format!("{} cells, expected {}", cells.len(), columns.len()),
                });
            }
            let mut row = Vec::with_capacity(cells.len());
            for cell in cells {
                row.push(parse_value(cell, index + 1)?);
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(TraceError::Empty);
        }
        Ok(Trace { columns, rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self, TraceError> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

/// Discrete happenings of a run, in emission order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EventKind {
    FaultInjected,
    Detected {
        component: usize,
    },
    CandidateExcluded {
        candidate: usize,
        component: usize,
    },
    Isolated {
        candidate: usize,
    },
    Unresolved,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    /// 0-based follower index.
    pub agent: usize,
    pub kind: EventKind,
}

impl fmt::Display for Event {
    /// Human-facing form; indices are 1-based here and only here.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={:.6} agent={} ", self.t, self.agent + 1)?;
        match self.kind {
            EventKind::FaultInjected => write!(f, "fault injected"),
            EventKind::Detected { component } => {
                write!(f, "fault detected (component {})", component + 1)
            }
            EventKind::CandidateExcluded {
                candidate,
                component,
            } => write!(
                f,
                "candidate {} excluded (component {})",
                candidate + 1,
                component + 1
            ),
            EventKind::Isolated { candidate } => {
                write!(f, "fault isolated as candidate {}", candidate + 1)
            }
            EventKind::Unresolved => write!(f, "all candidates excluded, fault unresolved"),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: Event) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn detection_time(&self, agent: usize) -> Option<f64> {
        self.events
            .iter()
            .find(|e| e.agent == agent && matches!(e.kind, EventKind::Detected { .. }))
            .map(|e| e.t)
    }

    pub fn isolation(&self, agent: usize) -> Option<(f64, usize)> {
        self.events.iter().find_map(|e| match e.kind {
            EventKind::Isolated { candidate } if e.agent == agent => Some((e.t, candidate)),
            _ => None,
        })
    }

    pub fn exclusions(&self, agent: usize) -> Vec<(f64, usize, usize)> {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::CandidateExcluded {
                    candidate,
                    component,
                } if e.agent == agent => Some((e.t, candidate, component)),
                _ => None,
            })
            .collect()
    }

    pub fn unresolved_time(&self, agent: usize) -> Option<f64> {
        self.events
            .iter()
            .find(|e| e.agent == agent && matches!(e.kind, EventKind::Unresolved))
            .map(|e| e.t)
    }

    pub fn detections(&self) -> Vec<&Event> {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Detected { .. }))
            .collect()
    }
}

impl fmt::Display for EventLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.events.is_empty() {
            return writeln!(f, "no events");
        }
        for event in &self.events {
            writeln!(f, "{event}")?;
        }
        Ok(())
    }
}

/// Statistics window used by summaries, in seconds from the end of the run.
const SUMMARY_WINDOW: f64 = 5.0;

#[derive(Clone, Debug)]
pub struct AgentSummary {
    pub detected_at: Option<f64>,
    pub isolated_at: Option<f64>,
    pub unresolved_at: Option<f64>,
    /// Max component tracking error at the final row.
    pub terminal_error: f64,
    /// Root mean square of the tracking error norm over the window.
    pub rms_error: f64,
    /// Rows where the detection residual exceeded its threshold.
    pub detector_breaches: usize,
    /// Rows where an isolation residual exceeded its threshold, per
    /// candidate. Frozen post-exclusion rows keep counting, so a healthy
    /// matched candidate shows zero and an excluded one a large count.
    pub candidate_breaches: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub window_start: f64,
    pub window_end: f64,
    pub agents: Vec<AgentSummary>,
}

impl RunSummary {
    /// Rebuilds summary statistics from a trace alone, so any saved CSV can
    /// be summarized without its original scenario.
    pub fn from_trace(trace: &Trace) -> Result<Self, TraceError> {
        let agent_count = trace
            .columns()
            .iter()
            .filter(|c| c.starts_with("mode_"))
            .count();
        if agent_count == 0 {
            return Err(TraceError::MissingColumn("mode_1".into()));
        }
        let state_dim = trace
            .columns()
            .iter()
            .filter(|c| c.starts_with("err_1_"))
            .count();
        if state_dim == 0 {
            return Err(TraceError::MissingColumn("err_1_1".into()));
        }
        let candidate_count = (1..)
            .take_while(|s| trace.column_index(&format!("fie{s}_eps_1_1")).is_ok())
            .count();

        let t = trace.column("t")?;
        let t_end = *t.last().ok_or(TraceError::Empty)?;
        let window_start = t_end - SUMMARY_WINDOW.min(t_end - t[0]);

        let mut agents = Vec::with_capacity(agent_count);
        for i in 1..=agent_count {
            let mode = trace.column(&format!("mode_{i}"))?;
            let first_at = |level: f64| -> Option<f64> {
                mode.iter()
                    .position(|&m| m >= level)
                    .map(|row| t[row])
            };
            let detected_at = first_at(1.0);
            let isolated_at = mode
                .iter()
                .position(|&m| m == 2.0)
                .map(|row| t[row]);
            let unresolved_at = mode
                .iter()
                .position(|&m| m == 3.0)
                .map(|row| t[row]);

            let err: Vec<Vec<f64>> = (1..=state_dim)
                .map(|p| trace.column(&format!("err_{i}_{p}")))
                .collect::<Result<_, _>>()?;
            let terminal_error = err
                .iter()
                .map(|col| col.last().unwrap().abs())
                .fold(0.0_f64, f64::max);
            let mut sum = 0.0;
            let mut count = 0usize;
            for row in 0..t.len() {
                if t[row] >= window_start {
                    sum += err.iter().map(|col| col[row] * col[row]).sum::<f64>();
                    count += 1;
                }
            }
            let rms_error = if count > 0 {
                (sum / count as f64).sqrt()
            } else {
                f64::NAN
            };

            let mut detector_breaches = 0;
            let eps: Vec<Vec<f64>> = (1..=state_dim)
                .map(|p| trace.column(&format!("eps_{i}_{p}")))
                .collect::<Result<_, _>>()?;
            let nu: Vec<Vec<f64>> = (1..=state_dim)
                .map(|p| trace.column(&format!("nu_{i}_{p}")))
                .collect::<Result<_, _>>()?;
            for row in 0..t.len() {
                if (0..state_dim).any(|p| eps[p][row].abs() > nu[p][row]) {
                    detector_breaches += 1;
                }
            }

            let mut candidate_breaches = Vec::with_capacity(candidate_count);
            for s in 1..=candidate_count {
                let mut breaches = 0;
                let eps_s: Vec<Vec<f64>> = (1..=state_dim)
                    .map(|p| trace.column(&format!("fie{s}_eps_{i}_{p}")))
                    .collect::<Result<_, _>>()?;
                let mu_s: Vec<Vec<f64>> = (1..=state_dim)
                    .map(|p| trace.column(&format!("fie{s}_mu_{i}_{p}")))
                    .collect::<Result<_, _>>()?;
                for row in 0..t.len() {
                    // NaN (inactive) compares false, so idle rows never count.
                    if (0..state_dim).any(|p| eps_s[p][row].abs() > mu_s[p][row]) {
                        breaches += 1;
                    }
                }
                candidate_breaches.push(breaches);
            }

            agents.push(AgentSummary {
                detected_at,
                isolated_at,
                unresolved_at,
                terminal_error,
                rms_error,
                detector_breaches,
                candidate_breaches,
            });
        }
        Ok(RunSummary {
            window_start,
            window_end: t_end,
            agents,
        })
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "statistics window: [{:.3}, {:.3}] s",
            self.window_start, self.window_end
        )?;
        for (idx, a) in self.agents.iter().enumerate() {
            write!(f, "agent {}: ", idx + 1)?;
            match (a.detected_at, a.isolated_at, a.unresolved_at) {
                (None, _, _) => write!(f, "healthy")?,
                (Some(td), Some(ti), _) => {
                    write!(f, "detected at t={td:.3} s, isolated at t={ti:.3} s")?
                }
                (Some(td), None, Some(tu)) => {
                    write!(f, "detected at t={td:.3} s, unresolved at t={tu:.3} s")?
                }
                (Some(td), None, None) => write!(f, "detected at t={td:.3} s")?,
            }
            write!(
                f,
                ", terminal error {:.3e}, rms {:.3e}, detector breaches {}",
                a.terminal_error, a.rms_error, a.detector_breaches
            )?;
            if !a.candidate_breaches.is_empty() {
                write!(f, ", candidate breaches {:?}", a.candidate_breaches)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
