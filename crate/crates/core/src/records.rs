//! On-disk forms of traces and certificates.
//!
//! A trace file is JSON Lines: one header, one line per recorded stage, one
//! outcome line. States are stored rendered, discrepancies as 17-significant
//! digit strings, so a trace re-reads exactly without its scenario.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    detect_stable, FixpointCertificate, IterationTrace, StageRecord, TraceOutcome,
};
use crate::ordinal::Ordinal;
use crate::space::{
    format_real, CheckMode, DiscrepancyMeasure, Evidence, MetricSpaceSpec, Space, SpaceDescriptor,
    SpaceError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: {message}")]
    Structure { line: usize, message: String },
    #[error("trace has no recorded stages")]
    EmptyTrace,
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub run: String,
    pub space: SpaceDescriptor,
    pub check_mode: CheckMode,
    pub budget: Ordinal,
    pub initial: String,
    pub measure: DiscrepancyMeasure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLine {
    pub stage: Ordinal,
    pub state: String,
    pub discrepancy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_closure: Option<Ordinal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
enum Line {
    Header(TraceHeader),
    Stage(StageLine),
    Outcome { result: TraceOutcome },
}

/// A trace with its states rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub stages: Vec<StageLine>,
    pub outcome: TraceOutcome,
}

impl TraceFile {
    pub fn from_trace<S: Space>(run: &str, space: &S, trace: &IterationTrace<S::Point>) -> Self {
        TraceFile {
            header: TraceHeader {
                run: run.to_string(),
                space: space.descriptor(),
                check_mode: space.check_mode(),
                budget: trace.budget.clone(),
                initial: space.render(&trace.initial),
                measure: trace.measure,
            },
            stages: trace
                .stages
                .iter()
                .map(|r| StageLine {
                    stage: r.stage.clone(),
                    state: space.render(&r.state),
                    discrepancy: format_real(r.discrepancy),
                    inner_closure: r.inner_closure.clone(),
                })
                .collect(),
            outcome: trace.outcome.clone(),
        }
    }

    /// Parses the rendered states back through `space`.
    pub fn to_trace<S: Space>(&self, space: &S) -> Result<IterationTrace<S::Point>, RecordError> {
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(StageRecord {
                    stage: s.stage.clone(),
                    state: space.parse_point(&s.state)?,
                    discrepancy: parse_real(&s.discrepancy, i + 2)?,
                    inner_closure: s.inner_closure.clone(),
                })
            })
            .collect::<Result<_, RecordError>>()?;
        Ok(IterationTrace {
            initial: space.parse_point(&self.header.initial)?,
            stages,
            budget: self.header.budget.clone(),
            outcome: self.outcome.clone(),
            measure: self.header.measure,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: &Line| {
            out.push_str(&serde_json::to_string(line).expect("trace lines serialize"));
            out.push('\n');
        };
        push(&Line::Header(self.header.clone()));
        for s in &self.stages {
            push(&Line::Stage(s.clone()));
        }
        push(&Line::Outcome {
            result: self.outcome.clone(),
        });
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, RecordError> {
        let mut header = None;
        let mut stages = Vec::new();
        let mut outcome = None;
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            last_line = line_no;
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(raw).map_err(|e| RecordError::Parse {
                line: line_no,
                column: e.column(),
                message: e.to_string(),
            })?;
            let misplaced = |what: &str| RecordError::Structure {
                line: line_no,
                message: format!("unexpected {what} line"),
            };
            match line {
                Line::Header(h) if header.is_none() && stages.is_empty() => header = Some(h),
                Line::Header(_) => return Err(misplaced("header")),
                Line::Stage(_) if header.is_none() || outcome.is_some() => {
                    return Err(misplaced("stage"))
                }
                Line::Stage(s) => {
                    parse_real(&s.discrepancy, line_no)?;
                    if stages
                        .last()
                        .is_some_and(|p: &StageLine| p.stage >= s.stage)
                    {
                        return Err(RecordError::Structure {
                            line: line_no,
                            message: format!("stage {} out of order", s.stage),
                        });
                    }
                    stages.push(s);
                }
                Line::Outcome { .. } if header.is_none() || outcome.is_some() => {
                    return Err(misplaced("outcome"))
                }
                Line::Outcome { result } => outcome = Some(result),
            }
        }
        let missing = |what: &str| RecordError::Structure {
            line: last_line,
            message: format!("missing {what} line"),
        };
        Ok(TraceFile {
            header: header.ok_or_else(|| missing("header"))?,
            stages,
            outcome: outcome.ok_or_else(|| missing("outcome"))?,
        })
    }
}

fn parse_real(text: &str, line: usize) -> Result<f64, RecordError> {
    text.parse::<f64>().map_err(|_| RecordError::Structure {
        line,
        message: format!("`{text}` is not a number"),
    })
}

/// A space of rendered states, rebuilt from a trace header. Metric states
/// are compared by distance under the recorded tolerance, others by text.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSpace {
    descriptor: SpaceDescriptor,
    metric: Option<MetricSpaceSpec>,
}

impl RenderedSpace {
    pub fn new(descriptor: SpaceDescriptor) -> Result<Self, RecordError> {
        let metric = match &descriptor {
            SpaceDescriptor::Metric {
                name,
                dimension,
                distance,
                tolerance,
            } => Some(MetricSpaceSpec::new(
                name.clone(),
                *dimension,
                *distance,
                *tolerance,
            )?),
            _ => None,
        };
        Ok(RenderedSpace { descriptor, metric })
    }
}

impl Space for RenderedSpace {
    type Point = String;

    fn name(&self) -> &str {
        self.descriptor.name()
    }

    fn check_mode(&self) -> CheckMode {
        match &self.metric {
            Some(m) => m.check_mode(),
            None => CheckMode::Exact,
        }
    }

    fn distance(&self, a: &String, b: &String) -> f64 {
        match &self.metric {
            Some(m) => match (m.parse_point(a), m.parse_point(b)) {
                (Ok(x), Ok(y)) => m.distance(&x, &y),
                _ => f64::INFINITY,
            },
            None => f64::from(u8::from(a != b)),
        }
    }

    fn render(&self, p: &String) -> String {
        p.clone()
    }

    fn parse_point(&self, text: &str) -> Result<String, SpaceError> {
        Ok(text.to_string())
    }

    fn contains(&self, _: &String) -> bool {
        true
    }

    fn descriptor(&self) -> SpaceDescriptor {
        self.descriptor.clone()
    }
}

/// Per-stage table: ordinal, state, discrepancy, and whether the state holds
/// at every later recorded stage.
pub fn explain(trace: &TraceFile) -> Result<String, RecordError> {
    if trace.stages.is_empty() {
        return Err(RecordError::EmptyTrace);
    }
    let space = RenderedSpace::new(trace.header.space.clone())?;
    let typed = trace.to_trace(&space)?;
    let with_inner = trace.stages.iter().any(|s| s.inner_closure.is_some());
    let mut rows: Vec<Vec<String>> = vec![{
        let mut h = vec!["stage", "state", trace.header.measure.label(), "stable"];
        if with_inner {
            h.push("inner");
        }
        h.into_iter().map(String::from).collect()
    }];
    for s in &trace.stages {
        let stable = detect_stable(&space, &typed, &s.stage).expect("stage is recorded");
        let mut row = vec![
            s.stage.to_string(),
            s.state.clone(),
            s.discrepancy.clone(),
            stable.to_string(),
        ];
        if with_inner {
            row.push(
                s.inner_closure
                    .as_ref()
                    .map(Ordinal::to_string)
                    .unwrap_or_else(|| "-".into()),
            );
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = format!(
        "run {} on {} (budget {}, initial {})\n",
        trace.header.run,
        trace.header.space.name(),
        trace.header.budget,
        trace.header.initial
    );
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).expect("string write");
    }
    let outcome = match &trace.outcome {
        TraceOutcome::Converged { at } => format!("converged at {at}"),
        TraceOutcome::Exhausted => "budget exhausted".to_string(),
        TraceOutcome::LimitDivergence { at } => format!("limit {at} did not settle"),
        TraceOutcome::StepCap => "step cap reached".to_string(),
    };
    writeln!(out, "outcome: {outcome}").expect("string write");
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessPair {
    pub initial: String,
    pub value: String,
}

/// A certificate with rendered states; the trace is stored separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub value: String,
    pub closure: Ordinal,
    pub residual: String,
    pub check_mode: CheckMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_bound: Option<String>,
    pub through_limit: bool,
    pub evidence: Evidence,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub uniqueness_evidence: Vec<UniquenessPair>,
}

impl CertificateRecord {
    pub fn from_certificate<S: Space>(space: &S, cert: &FixpointCertificate<S::Point>) -> Self {
        CertificateRecord {
            value: space.render(&cert.value),
            closure: cert.closure.clone(),
            residual: format_real(cert.residual),
            check_mode: cert.check_mode,
            error_bound: cert.error_bound.map(format_real),
            through_limit: cert.through_limit,
            evidence: cert.evidence.clone(),
            uniqueness_evidence: cert
                .uniqueness_evidence
                .iter()
                .map(|(x0, v)| UniquenessPair {
                    initial: space.render(x0),
                    value: space.render(v),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Engine, EngineConfig};
    use crate::space::{AffineMap, FiniteLattice, Operator, OperatorKind, ValidationConfig};
    use nalgebra::DVector;
    use std::sync::Arc;

    fn union_trace() -> (Arc<FiniteLattice>, IterationTrace<crate::space::Elem>) {
        let lat = Arc::new(FiniteLattice::powerset("P", ["a", "b", "c"]).unwrap());
        let a = lat.subset(&["a"]).unwrap();
        let op = Operator::join_with(Arc::clone(&lat), a)
            .validate(&ValidationConfig::default())
            .unwrap();
        let run = Engine::default()
            .iterate_to_fixpoint(&op, &lat.bottom(), &Ordinal::omega())
            .unwrap();
        (lat, run.trace().clone())
    }

    #[test]
    fn lattice_trace_round_trips() {
        let (lat, trace) = union_trace();
        let file = TraceFile::from_trace("union", lat.as_ref(), &trace);
        let text = file.to_jsonl();
        let back = TraceFile::parse_jsonl(&text).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_jsonl(), text);
        assert_eq!(back.to_trace(lat.as_ref()).unwrap(), trace);
    }

    #[test]
    fn metric_trace_round_trips_exactly() {
        let space = Arc::new(MetricSpaceSpec::real_line("R"));
        let op = Operator::affine(
            "third",
            Arc::clone(&space),
            OperatorKind::Contraction { factor: 0.34 },
            AffineMap::scalar(1.0 / 3.0, 0.1),
        )
        .unwrap()
        .validate(&ValidationConfig::default())
        .unwrap();
        let run = Engine::new(EngineConfig::default())
            .iterate_to_fixpoint(&op, &DVector::from_element(1, 7.0), &Ordinal::omega())
            .unwrap();
        let file = TraceFile::from_trace("third", space.as_ref(), run.trace());
        let back = TraceFile::parse_jsonl(&file.to_jsonl()).unwrap();
        assert_eq!(&back.to_trace(space.as_ref()).unwrap(), run.trace());
    }

    #[test]
    fn explain_union_run() {
        let (lat, trace) = union_trace();
        let table = explain(&TraceFile::from_trace("union", lat.as_ref(), &trace)).unwrap();
        let rows: Vec<&str> = table
            .lines()
            .filter(|l| l.starts_with(char::is_numeric))
            .collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].ends_with("false"));
        assert!(rows[1].starts_with("1 ") && rows[1].ends_with("true"));
    }

    #[test]
    fn explain_shows_seventeen_digits() {
        let space = MetricSpaceSpec::real_line("R");
        let trace = IterationTrace {
            initial: DVector::from_element(1, 0.0),
            stages: vec![StageRecord {
                stage: Ordinal::zero(),
                state: DVector::from_element(1, 0.0),
                discrepancy: 1.0 / 3.0,
                inner_closure: None,
            }],
            budget: Ordinal::one(),
            outcome: TraceOutcome::Exhausted,
            measure: DiscrepancyMeasure::Residual,
        };
        let table = explain(&TraceFile::from_trace("r", &space, &trace)).unwrap();
        assert!(table.contains("3.3333333333333331e-1"), "{table}");
    }

    #[test]
    fn empty_trace_is_an_error() {
        let (lat, mut trace) = union_trace();
        trace.stages.clear();
        let file = TraceFile::from_trace("e", lat.as_ref(), &trace);
        assert_eq!(explain(&file), Err(RecordError::EmptyTrace));
    }

    #[test]
    fn parse_errors_carry_positions() {
        let (lat, trace) = union_trace();
        let text = TraceFile::from_trace("u", lat.as_ref(), &trace).to_jsonl();
        let broken = text.replacen("\"stage\":\"1\"", "\"stage\":1", 1);
        assert!(matches!(
            TraceFile::parse_jsonl(&broken),
            Err(RecordError::Parse { line: 3, .. })
        ));
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            TraceFile::parse_jsonl(&truncated),
            Err(RecordError::Structure { .. })
        ));
    }
}
