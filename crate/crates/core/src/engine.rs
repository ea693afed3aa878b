//! Ordinal-indexed iteration of self-maps.
//!
//! Stage `0` is the initial state, stage `β+1` applies the step to stage
//! `β`, and a limit stage `λ` is evaluated along the fundamental sequence
//! `λ[0] < λ[1] < …` until the sampled states agree (or the space can name
//! the supremum of the run). Stages are memoised per limit base, so walking
//! `γ, γ+1, γ+2, …` costs one step each.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::thread;

use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ordinal::Ordinal;
use crate::space::{CheckMode, DiscrepancyMeasure, Evidence, OperatorKind, Space, Validated};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("limit stage {at} did not settle within the evaluation cap")]
    LimitDivergence { at: Ordinal },
    #[error("stage {stage} is beyond the budget {budget}")]
    BudgetExceeded { stage: Ordinal, budget: Ordinal },
    #[error("run exceeded the cap of {cap} successor steps")]
    StepCap { cap: u64 },
    #[error("no recorded stage at or after {0}")]
    StageNotRecorded(Ordinal),
    #[error("initial state `{0}` is not a point of the space")]
    InvalidInitial(String),
    #[error("uniqueness needs at least two initial states, got {0}")]
    TooFewInitials(usize),
    #[error("step failed at stage {stage}: {message}")]
    Step { stage: Ordinal, message: String },
}

/// Knobs for a run. The defaults match the scenario defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Largest stage `state_at` will evaluate.
    pub budget: Ordinal,
    /// Consecutive agreeing samples needed to settle a limit stage.
    pub agreement_window: usize,
    /// Fundamental-sequence samples tried per limit stage.
    pub limit_cap: usize,
    /// Stages recorded densely before switching to sparse recording.
    pub dense_cap: usize,
    /// Successor steps allowed in one run.
    pub step_cap: u64,
    pub measure: DiscrepancyMeasure,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            budget: Ordinal::omega().nat_scale(10u32),
            agreement_window: 2,
            limit_cap: 100_000,
            dense_cap: 10_000,
            step_cap: 10_000_000,
            measure: DiscrepancyMeasure::Residual,
        }
    }
}

/// One recorded stage `(α, X_α, d_α)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord<P> {
    pub stage: Ordinal,
    pub state: P,
    pub discrepancy: f64,
    /// Closure ordinal of the inner equilibrium solved while stepping from
    /// this stage (nested games only).
    pub inner_closure: Option<Ordinal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum TraceOutcome {
    Converged { at: Ordinal },
    Exhausted,
    LimitDivergence { at: Ordinal },
    StepCap,
}

/// The ordinal-indexed record of a run, in increasing stage order.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace<P> {
    pub initial: P,
    pub stages: Vec<StageRecord<P>>,
    pub budget: Ordinal,
    pub outcome: TraceOutcome,
    pub measure: DiscrepancyMeasure,
}

/// Checked evidence that `value` is a fixed point reached at stage `closure`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixpointCertificate<P> {
    pub value: P,
    pub closure: Ordinal,
    /// `d(φ(value), value)`; zero in exact mode.
    pub residual: f64,
    pub check_mode: CheckMode,
    /// `(initial, converged value)` pairs from independent runs.
    pub uniqueness_evidence: Vec<(P, P)>,
    /// Upper bound on the distance to the true fixed point, known when the
    /// operator is a declared contraction: `residual / (1 - c)`.
    pub error_bound: Option<f64>,
    /// Some limit stage was settled by sample agreement or extrapolation
    /// rather than reached by successor steps alone.
    pub through_limit: bool,
    pub evidence: Evidence,
    pub trace: IterationTrace<P>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceReason {
    /// The budget stage was reached without a fixed point.
    Exhausted,
    /// A limit stage's samples never agreed.
    LimitDivergence,
    StepCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonConvergence<P> {
    pub reason: DivergenceReason,
    pub trace: IterationTrace<P>,
}

/// Result of [`Engine::iterate_to_fixpoint`]. Divergence is an outcome, not
/// an error.
#[derive(Debug, Clone, PartialEq)]
pub enum Convergence<P> {
    Converged(FixpointCertificate<P>),
    Diverged(NonConvergence<P>),
}

impl<P> Convergence<P> {
    pub fn certificate(&self) -> Option<&FixpointCertificate<P>> {
        match self {
            Convergence::Converged(c) => Some(c),
            Convergence::Diverged(_) => None,
        }
    }

    pub fn trace(&self) -> &IterationTrace<P> {
        match self {
            Convergence::Converged(c) => &c.trace,
            Convergence::Diverged(d) => &d.trace,
        }
    }

    pub fn is_converged(&self) -> bool {
        matches!(self, Convergence::Converged(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Uniqueness<P> {
    /// All runs converged to the same value; the certificate carries the
    /// per-initial evidence.
    Unique(Box<FixpointCertificate<P>>),
    /// Distinct converged values, in order of first appearance.
    Multiple(Vec<P>),
    /// Some run did not converge.
    Inconclusive(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct UniquenessReport<P> {
    pub verdict: Uniqueness<P>,
    pub runs: Vec<Result<Convergence<P>, EngineError>>,
}

/// Output of one successor step.
pub(crate) struct Stepped<P> {
    pub next: P,
    pub inner_closure: Option<Ordinal>,
}

enum Halt {
    Fixed(Ordinal),
    Fail(EngineError),
}

impl From<EngineError> for Halt {
    fn from(e: EngineError) -> Self {
        Halt::Fail(e)
    }
}

pub(crate) struct RunSpec<'a, S: Space> {
    pub space: &'a S,
    pub x0: S::Point,
    pub config: &'a EngineConfig,
    /// Agreement threshold for fixed-point detection and limit settling.
    pub tolerance: f64,
    /// Fixed points are only recognised from this stage on (the step may
    /// depend on the stage before it).
    pub stationary_from: Ordinal,
    pub stop_on_fixed: bool,
}

pub(crate) struct RunResult<P> {
    pub records: Vec<StageRecord<P>>,
    pub outcome: TraceOutcome,
    /// State and successor at the halting (or final) stage.
    pub state: Option<(P, P)>,
    pub through_limit: bool,
}

struct Walker<'a, S: Space, F, M> {
    spec: RunSpec<'a, S>,
    step: F,
    measure: M,
    chains: HashMap<Ordinal, Vec<S::Point>>,
    records: BTreeMap<Ordinal, StageRecord<S::Point>>,
    dense_recorded: usize,
    steps: u64,
    through_limit: bool,
    last_pair: Option<(S::Point, S::Point)>,
}

impl<'a, S, F, M> Walker<'a, S, F, M>
where
    S: Space,
    F: FnMut(&Ordinal, &S::Point) -> Result<Stepped<S::Point>, EngineError>,
    M: Fn(&Ordinal, &S::Point, &S::Point) -> f64,
{
    /// State at `o`, with its successor already computed.
    fn state(&mut self, o: &Ordinal) -> Result<S::Point, Halt> {
        let (base, k) = o.split_finite();
        let k = k.to_usize().ok_or(EngineError::StepCap {
            cap: self.spec.config.step_cap,
        })?;
        if !self.chains.contains_key(&base) {
            let start = if base.is_zero() {
                self.spec.x0.clone()
            } else {
                self.limit(&base)?
            };
            self.chains.insert(base.clone(), vec![start]);
        }
        loop {
            let chain = &self.chains[&base];
            if chain.len() >= k + 2 {
                return Ok(chain[k].clone());
            }
            let j = chain.len() - 1;
            let x = chain[j].clone();
            let stage = base.add(&Ordinal::from(j as u64));
            self.steps += 1;
            if self.steps > self.spec.config.step_cap {
                return Err(Halt::Fail(EngineError::StepCap {
                    cap: self.spec.config.step_cap,
                }));
            }
            let Stepped {
                next,
                inner_closure,
            } = (self.step)(&stage, &x)?;
            self.chains
                .get_mut(&base)
                .expect("chain exists")
                .push(next.clone());
            self.finalize(stage, j, x, next, inner_closure)?;
        }
    }

    fn finalize(
        &mut self,
        stage: Ordinal,
        offset: usize,
        x: S::Point,
        next: S::Point,
        inner_closure: Option<Ordinal>,
    ) -> Result<(), Halt> {
        let fixed = self.spec.stop_on_fixed
            && stage >= self.spec.stationary_from
            && self.spec.space.agree_within(&x, &next, self.spec.tolerance);
        let dense = self.dense_recorded < self.spec.config.dense_cap;
        let sparse = offset == 0 || offset.is_power_of_two();
        if dense || sparse || fixed {
            if dense {
                self.dense_recorded += 1;
            }
            let discrepancy = (self.measure)(&stage, &x, &next);
            self.records.insert(
                stage.clone(),
                StageRecord {
                    stage: stage.clone(),
                    state: x.clone(),
                    discrepancy,
                    inner_closure,
                },
            );
        }
        self.last_pair = Some((x, next));
        if fixed {
            return Err(Halt::Fixed(stage));
        }
        Ok(())
    }

    fn limit(&mut self, lambda: &Ordinal) -> Result<S::Point, Halt> {
        let window = self.spec.config.agreement_window.max(2);
        let keep = window.max(3);
        let mut recent: Vec<S::Point> = Vec::with_capacity(keep + 1);
        for n in 0..self.spec.config.limit_cap as u64 {
            let s = lambda
                .fundamental_seq(n)
                .expect("limit stages have fundamental sequences");
            let x = self.state(&s)?;
            recent.push(x);
            if recent.len() > keep {
                recent.remove(0);
            }
            if recent.len() >= window {
                let tail = &recent[recent.len() - window..];
                let settled = tail.windows(2).all(|w| {
                    self.spec
                        .space
                        .agree_within(&w[0], &w[1], self.spec.tolerance)
                });
                if settled {
                    self.through_limit = true;
                    return Ok(recent.last().expect("non-empty").clone());
                }
            }
            if let Some(sup) = self.spec.space.extrapolate_limit(&recent) {
                self.through_limit = true;
                return Ok(sup);
            }
        }
        Err(Halt::Fail(EngineError::LimitDivergence {
            at: lambda.clone(),
        }))
    }
}

/// Runs the walk up to `budget` and reports how it ended.
pub(crate) fn run_iteration<S, F, M>(
    spec: RunSpec<'_, S>,
    budget: &Ordinal,
    step: F,
    measure: M,
) -> Result<RunResult<S::Point>, EngineError>
where
    S: Space,
    F: FnMut(&Ordinal, &S::Point) -> Result<Stepped<S::Point>, EngineError>,
    M: Fn(&Ordinal, &S::Point, &S::Point) -> f64,
{
    let mut walker = Walker {
        spec,
        step,
        measure,
        chains: HashMap::new(),
        records: BTreeMap::new(),
        dense_recorded: 0,
        steps: 0,
        through_limit: false,
        last_pair: None,
    };
    let outcome = match walker.state(budget) {
        Ok(x) => {
            // make sure the budget stage itself is on record
            if !walker.records.contains_key(budget) {
                let (base, k) = budget.split_finite();
                let next = walker.chains[&base][k.to_usize().expect("fits") + 1].clone();
                let discrepancy = (walker.measure)(budget, &x, &next);
                walker.records.insert(
                    budget.clone(),
                    StageRecord {
                        stage: budget.clone(),
                        state: x.clone(),
                        discrepancy,
                        inner_closure: None,
                    },
                );
                walker.last_pair = Some((x, next));
            } else {
                let (base, k) = budget.split_finite();
                let next = walker.chains[&base][k.to_usize().expect("fits") + 1].clone();
                walker.last_pair = Some((x, next));
            }
            TraceOutcome::Exhausted
        }
        Err(Halt::Fixed(at)) => TraceOutcome::Converged { at },
        Err(Halt::Fail(EngineError::LimitDivergence { at })) => {
            TraceOutcome::LimitDivergence { at }
        }
        Err(Halt::Fail(EngineError::StepCap { .. })) => TraceOutcome::StepCap,
        Err(Halt::Fail(e)) => return Err(e),
    };
    Ok(RunResult {
        records: walker.records.into_values().collect(),
        outcome,
        state: walker.last_pair,
        through_limit: walker.through_limit,
    })
}

/// Detection threshold for a run: the space tolerance, tightened for a
/// declared contraction so that the certified value is within half the
/// tolerance of the true fixed point.
pub fn run_tolerance<S: Space>(space: &S, kind: OperatorKind) -> f64 {
    let eps = space.check_mode().tolerance();
    match kind {
        OperatorKind::Contraction { factor } => eps * (1.0 - factor) / 2.0,
        _ => eps,
    }
}

/// Builds the certificate or non-convergence outcome from a finished run.
pub(crate) fn conclude<S: Space>(
    space: &S,
    x0: S::Point,
    budget: &Ordinal,
    result: RunResult<S::Point>,
    kind: OperatorKind,
    evidence: Evidence,
    measure: DiscrepancyMeasure,
) -> Convergence<S::Point> {
    let mut trace = IterationTrace {
        initial: x0,
        stages: result.records,
        budget: budget.clone(),
        outcome: result.outcome.clone(),
        measure,
    };
    match result.outcome {
        TraceOutcome::Converged { at } => {
            let (value, image) = result.state.expect("halted on a stage");
            let residual = space.distance(&value, &image);
            if measure == DiscrepancyMeasure::DistanceToValue {
                for r in &mut trace.stages {
                    r.discrepancy = space.distance(&r.state, &value);
                }
            }
            let check_mode = space.check_mode();
            let residual = match check_mode {
                CheckMode::Exact => 0.0,
                CheckMode::Tolerant { .. } => residual,
            };
            Convergence::Converged(FixpointCertificate {
                value,
                closure: at,
                residual,
                check_mode,
                uniqueness_evidence: Vec::new(),
                error_bound: kind.factor().map(|c| residual / (1.0 - c)),
                through_limit: result.through_limit,
                evidence,
                trace,
            })
        }
        TraceOutcome::Exhausted => Convergence::Diverged(NonConvergence {
            reason: DivergenceReason::Exhausted,
            trace,
        }),
        TraceOutcome::LimitDivergence { .. } => Convergence::Diverged(NonConvergence {
            reason: DivergenceReason::LimitDivergence,
            trace,
        }),
        TraceOutcome::StepCap => Convergence::Diverged(NonConvergence {
            reason: DivergenceReason::StepCap,
            trace,
        }),
    }
}

/// The iteration engine.
#[derive(Debug, Clone, Default)]
pub struct Engine {
    config: EngineConfig,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        Engine { config }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn check_initial<S: Space>(&self, space: &S, x0: &S::Point) -> Result<(), EngineError> {
        if space.contains(x0) {
            Ok(())
        } else {
            Err(EngineError::InvalidInitial(format!("{x0:?}")))
        }
    }

    /// `φ^o(x0)`.
    pub fn state_at<S: Space>(
        &self,
        op: &Validated<S>,
        x0: &S::Point,
        o: &Ordinal,
    ) -> Result<S::Point, EngineError> {
        if *o > self.config.budget {
            return Err(EngineError::BudgetExceeded {
                stage: o.clone(),
                budget: self.config.budget.clone(),
            });
        }
        let space = op.space().as_ref();
        self.check_initial(space, x0)?;
        let spec = RunSpec {
            space,
            x0: x0.clone(),
            config: &self.config,
            tolerance: run_tolerance(space, op.kind()),
            stationary_from: Ordinal::zero(),
            stop_on_fixed: false,
        };
        let result = run_iteration(spec, o, constant_step(op), |_, _, _| 0.0)?;
        match result.outcome {
            TraceOutcome::LimitDivergence { at } => Err(EngineError::LimitDivergence { at }),
            TraceOutcome::StepCap => Err(EngineError::StepCap {
                cap: self.config.step_cap,
            }),
            _ => Ok(result.state.expect("budget stage evaluated").0),
        }
    }

    /// Walks stages up to `budget` and certifies the first stage whose state
    /// is fixed by the operator.
    pub fn iterate_to_fixpoint<S: Space>(
        &self,
        op: &Validated<S>,
        x0: &S::Point,
        budget: &Ordinal,
    ) -> Result<Convergence<S::Point>, EngineError> {
        let space = op.space().as_ref();
        self.check_initial(space, x0)?;
        let spec = RunSpec {
            space,
            x0: x0.clone(),
            config: &self.config,
            tolerance: run_tolerance(space, op.kind()),
            stationary_from: Ordinal::zero(),
            stop_on_fixed: true,
        };
        let result = run_iteration(spec, budget, constant_step(op), |_, x, y| {
            space.distance(x, y)
        })?;
        Ok(conclude(
            space,
            x0.clone(),
            budget,
            result,
            op.kind(),
            op.evidence().clone(),
            self.config.measure,
        ))
    }

    /// Runs from every initial (concurrently) and compares the limits.
    pub fn verify_uniqueness<S: Space>(
        &self,
        op: &Validated<S>,
        initials: &[S::Point],
        budget: &Ordinal,
    ) -> Result<UniquenessReport<S::Point>, EngineError> {
        if initials.len() < 2 {
            return Err(EngineError::TooFewInitials(initials.len()));
        }
        let runs: Vec<Result<Convergence<S::Point>, EngineError>> = thread::scope(|scope| {
            let handles: Vec<_> = initials
                .iter()
                .map(|x0| scope.spawn(move || self.iterate_to_fixpoint(op, x0, budget)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("uniqueness run panicked"))
                .collect()
        });
        let verdict = compare_runs(op.space().as_ref(), initials, &runs);
        Ok(UniquenessReport { verdict, runs })
    }
}

/// Folds independent runs into a uniqueness verdict.
pub(crate) fn compare_runs<S: Space>(
    space: &S,
    initials: &[S::Point],
    runs: &[Result<Convergence<S::Point>, EngineError>],
) -> Uniqueness<S::Point> {
    let mut failures = Vec::new();
    let mut certs = Vec::new();
    for (x0, run) in initials.iter().zip(runs) {
        match run {
            Ok(Convergence::Converged(c)) => certs.push((x0, c)),
            Ok(Convergence::Diverged(d)) => failures.push(format!(
                "from {}: no fixed point ({:?})",
                space.render(x0),
                d.reason
            )),
            Err(e) => failures.push(format!("from {}: {e}", space.render(x0))),
        }
    }
    if !failures.is_empty() {
        return Uniqueness::Inconclusive(failures);
    }
    let mut distinct: Vec<S::Point> = Vec::new();
    for (_, c) in &certs {
        if !distinct.iter().any(|v| space.agree(v, &c.value)) {
            distinct.push(c.value.clone());
        }
    }
    let first = &certs[0].1;
    if certs
        .iter()
        .all(|(_, c)| space.agree(&first.value, &c.value))
    {
        let mut cert = (*first).clone();
        cert.uniqueness_evidence = certs
            .iter()
            .map(|(x0, c)| ((*x0).clone(), c.value.clone()))
            .collect();
        Uniqueness::Unique(Box::new(cert))
    } else {
        Uniqueness::Multiple(distinct)
    }
}

fn constant_step<S: Space>(
    op: &Validated<S>,
) -> impl FnMut(&Ordinal, &S::Point) -> Result<Stepped<S::Point>, EngineError> + '_ {
    move |_, x| {
        Ok(Stepped {
            next: op.apply(x),
            inner_closure: None,
        })
    }
}

/// Whether every recorded stage at or after `from` carries the same state.
pub fn detect_stable<S: Space>(
    space: &S,
    trace: &IterationTrace<S::Point>,
    from: &Ordinal,
) -> Result<bool, EngineError> {
    let mut later = trace.stages.iter().filter(|r| r.stage >= *from);
    let first = later
        .next()
        .ok_or_else(|| EngineError::StageNotRecorded(from.clone()))?;
    Ok(later.all(|r| space.agree(&first.state, &r.state)))
}

impl<P: fmt::Debug> fmt::Display for NonConvergence<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let last = self
            .trace
            .stages
            .last()
            .map(|r| r.stage.to_string())
            .unwrap_or_else(|| "-".into());
        write!(
            f,
            "no fixed point within budget {} ({:?}, last recorded stage {last})",
            self.trace.budget, self.reason
        )
    }
}
