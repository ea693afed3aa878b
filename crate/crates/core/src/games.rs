//! Semantic games: iteration with a per-round external signal, and nested
//! games whose outer step waits for an inner equilibrium.

use std::fmt;
use std::sync::{Arc, Mutex};
use std::thread;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::engine::{
    compare_runs, conclude, run_iteration, run_tolerance, Convergence, EngineConfig, EngineError,
    FixpointCertificate, IterationTrace, NonConvergence, RunSpec, Stepped, Uniqueness,
};
use crate::ordinal::Ordinal;
use crate::space::{
    AffineMap, DiscrepancyMeasure, Elem, Evidence, FiniteLattice, MetricSpaceSpec, Operator,
    OperatorKind, Space, SpaceError, Validate, Validated, ValidationConfig,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GameError {
    #[error("no signal at round {round} (beyond the game budget)")]
    SignalUndefined { round: Ordinal },
    #[error("inner game diverged at context {context}: {reason}")]
    InnerDivergence { context: String, reason: String },
    #[error("initial state `{0}` is not a point of the space")]
    InvalidInitial(String),
    #[error("invalid game: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// Per-round inputs: listed `(round, value)` entries, and a constant tail
/// for every other round.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSchedule<P> {
    entries: Vec<(Ordinal, P)>,
    tail: P,
}

impl<P: Clone> SignalSchedule<P> {
    pub fn constant(tail: P) -> Self {
        SignalSchedule {
            entries: Vec::new(),
            tail,
        }
    }

    pub fn new(mut entries: Vec<(Ordinal, P)>, tail: P) -> Result<Self, GameError> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(GameError::Invalid(format!(
                "signal round {} listed twice",
                w[0].0
            )));
        }
        Ok(SignalSchedule { entries, tail })
    }

    pub fn at(&self, round: &Ordinal) -> &P {
        match self.entries.binary_search_by(|(r, _)| r.cmp(round)) {
            Ok(i) => &self.entries[i].1,
            Err(_) => &self.tail,
        }
    }

    pub fn entries(&self) -> &[(Ordinal, P)] {
        &self.entries
    }

    pub fn tail(&self) -> &P {
        &self.tail
    }

    /// First round from which every signal is the tail value.
    pub fn tail_begins(&self) -> Ordinal {
        self.entries
            .last()
            .map(|(r, _)| r.succ())
            .unwrap_or_else(Ordinal::zero)
    }

    fn values(&self) -> impl Iterator<Item = &P> {
        self.entries
            .iter()
            .map(|(_, v)| v)
            .chain(std::iter::once(&self.tail))
    }
}

/// Verdict over several nested runs, with the runs themselves.
pub type NestedUniqueness<PO, PI> = (
    Uniqueness<PO>,
    Vec<Result<NestedConvergence<PO, PI>, GameError>>,
);

/// `(x, d) ↦ x'`: a state update under signal `d`.
pub type SignalUpdate<P> = Arc<dyn Fn(&P, &P) -> P + Send + Sync>;
/// `(x, y) ↦ r`: a map reading an outer and an inner state.
pub type CoupledMap<X, Y, R> = Arc<dyn Fn(&X, &Y) -> R + Send + Sync>;

pub struct SemanticGameSpec<S: Space> {
    pub name: String,
    pub space: Arc<S>,
    pub update: SignalUpdate<S::Point>,
    /// Declared kind of `x ↦ update(x, d)` for every signal value `d`.
    pub kind: OperatorKind,
    pub signal: SignalSchedule<S::Point>,
    pub measure: DiscrepancyMeasure,
    pub budget: Ordinal,
}

/// A single-level game `X_{α+1} = φ(X_α, d_α)`.
pub struct SemanticGame<S: Space> {
    spec: SemanticGameSpec<S>,
    evidence: Evidence,
}

impl<S: Space> fmt::Debug for SemanticGame<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SemanticGame")
            .field("name", &self.spec.name)
            .field("space", &self.spec.space.name())
            .field("kind", &self.spec.kind)
            .field("budget", &self.spec.budget)
            .finish()
    }
}

impl<S: Validate + 'static> SemanticGame<S> {
    /// Checks the declared kind of the update sliced at every signal value.
    pub fn new(
        spec: SemanticGameSpec<S>,
        validation: &ValidationConfig,
    ) -> Result<Self, GameError> {
        let mut evidence = Evidence::Unchecked;
        for d in spec.signal.values() {
            if !spec.space.contains(d) {
                return Err(SpaceError::InvalidPoint {
                    space: spec.space.name().to_string(),
                    message: format!("signal value {d:?}"),
                }
                .into());
            }
            let update = Arc::clone(&spec.update);
            let d_owned = d.clone();
            let slice = Operator::new(
                format!("{}@{}", spec.name, spec.space.render(d)),
                Arc::clone(&spec.space),
                spec.kind,
                move |x: &S::Point| update(x, &d_owned),
            )
            .validate(validation)?;
            evidence = slice.evidence().clone();
        }
        Ok(SemanticGame { spec, evidence })
    }
}

impl<S: Space> SemanticGame<S> {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn space(&self) -> &Arc<S> {
        &self.spec.space
    }

    pub fn signal(&self) -> &SignalSchedule<S::Point> {
        &self.spec.signal
    }

    pub fn budget(&self) -> &Ordinal {
        &self.spec.budget
    }

    pub fn kind(&self) -> OperatorKind {
        self.spec.kind
    }

    /// Evidence for the kind of the update at the tail signal.
    pub fn evidence(&self) -> &Evidence {
        &self.evidence
    }

    /// One round: the new state and its discrepancy (distance to the
    /// round's signal under `SignalGap`, the step length otherwise).
    pub fn play_round(&self, x: &S::Point, round: &Ordinal) -> Result<(S::Point, f64), GameError> {
        if *round > self.spec.budget {
            return Err(GameError::SignalUndefined {
                round: round.clone(),
            });
        }
        let space = &self.spec.space;
        let d = self.spec.signal.at(round);
        let next = (self.spec.update)(x, d);
        let discrepancy = match self.spec.measure {
            DiscrepancyMeasure::SignalGap => space.distance(&next, d),
            _ => space.distance(x, &next),
        };
        Ok((next, discrepancy))
    }

    /// Plays rounds from `x0` until a stage after the signal tail begins is
    /// fixed, or the budget runs out. Stage `α` records `X_α` with its
    /// discrepancy against `d_α` (or its step length).
    pub fn run(
        &self,
        x0: &S::Point,
        config: &EngineConfig,
    ) -> Result<Convergence<S::Point>, GameError> {
        let space = self.spec.space.as_ref();
        if !space.contains(x0) {
            return Err(GameError::InvalidInitial(format!("{x0:?}")));
        }
        let signal = &self.spec.signal;
        let update = &self.spec.update;
        let spec = RunSpec {
            space,
            x0: x0.clone(),
            config,
            tolerance: run_tolerance(space, self.spec.kind),
            stationary_from: signal.tail_begins(),
            stop_on_fixed: true,
        };
        let measure = self.spec.measure;
        let result = run_iteration(
            spec,
            &self.spec.budget,
            |stage, x| {
                Ok(Stepped {
                    next: update(x, signal.at(stage)),
                    inner_closure: None,
                })
            },
            |stage, x, next| match measure {
                DiscrepancyMeasure::SignalGap => space.distance(x, signal.at(stage)),
                _ => space.distance(x, next),
            },
        )?;
        Ok(conclude(
            space,
            x0.clone(),
            &self.spec.budget,
            result,
            self.spec.kind,
            self.evidence.clone(),
            measure,
        ))
    }
}

/// `φ(x) = x` for a game's round map (at the signal tail, with the inner
/// equilibrium for nested games).
pub trait Equilibrium {
    type Point;

    fn equilibrium_check(&self, x: &Self::Point) -> Result<bool, GameError>;
}

impl<S: Space> Equilibrium for SemanticGame<S> {
    type Point = S::Point;

    fn equilibrium_check(&self, x: &S::Point) -> Result<bool, GameError> {
        let space = &self.spec.space;
        if !space.contains(x) {
            return Err(GameError::InvalidInitial(format!("{x:?}")));
        }
        let next = (self.spec.update)(x, self.spec.signal.tail());
        Ok(space.agree(x, &next))
    }
}

/// `x ↦ A x + B d + c`.
pub fn affine_signal(
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DVector<f64>,
) -> Result<SignalUpdate<DVector<f64>>, GameError> {
    let n = c.len();
    if a.shape() != (n, n) || b.shape() != (n, n) {
        return Err(GameError::Invalid(format!(
            "affine signal update needs {n}x{n} matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(Arc::new(move |x: &DVector<f64>, d: &DVector<f64>| {
        &a * x + &b * d + &c
    }))
}

/// `x ↦ (x + d) / 2`.
pub fn midpoint() -> SignalUpdate<DVector<f64>> {
    Arc::new(|x: &DVector<f64>, d: &DVector<f64>| (x + d) * 0.5)
}

/// `X ↦ X ∨ d`.
pub fn join_signal(lat: Arc<FiniteLattice>) -> SignalUpdate<Elem> {
    Arc::new(move |x: &Elem, d: &Elem| lat.join(*x, *d))
}

/// `X ↦ X ∧ d`.
pub fn meet_signal(lat: Arc<FiniteLattice>) -> SignalUpdate<Elem> {
    Arc::new(move |x: &Elem, d: &Elem| lat.meet(*x, *d))
}

/// A two-level game: before each outer step `X ↦ outer(X, Y*(X))` the
/// inner game `Y ↦ inner(X, Y)` is solved to its own equilibrium `Y*(X)`.
pub struct NestedGame<SO: Space, SI: Space> {
    pub name: String,
    pub outer_space: Arc<SO>,
    pub inner_space: Arc<SI>,
    pub outer_update: CoupledMap<SO::Point, SI::Point, SO::Point>,
    pub inner_update: CoupledMap<SO::Point, SI::Point, SI::Point>,
    /// Declared kind of the composed step.
    pub outer_kind: OperatorKind,
    /// Declared kind of every slice `Y ↦ inner(X, Y)`.
    pub inner_kind: OperatorKind,
    pub outer_budget: Ordinal,
    pub inner_budget: Ordinal,
    /// Agreement threshold for inner runs, before tightening for a declared
    /// contraction.
    pub inner_tolerance: f64,
    /// Inner start used by [`Equilibrium::equilibrium_check`].
    pub inner_start: SI::Point,
    pub validation: ValidationConfig,
    /// Checks on each inner slice, one per probed context.
    pub inner_validation: ValidationConfig,
    pub config: EngineConfig,
}

impl<SO: Space, SI: Space> Clone for NestedGame<SO, SI> {
    fn clone(&self) -> Self {
        NestedGame {
            name: self.name.clone(),
            outer_space: Arc::clone(&self.outer_space),
            inner_space: Arc::clone(&self.inner_space),
            outer_update: Arc::clone(&self.outer_update),
            inner_update: Arc::clone(&self.inner_update),
            outer_kind: self.outer_kind,
            inner_kind: self.inner_kind,
            outer_budget: self.outer_budget.clone(),
            inner_budget: self.inner_budget.clone(),
            inner_tolerance: self.inner_tolerance,
            inner_start: self.inner_start.clone(),
            validation: self.validation,
            inner_validation: self.inner_validation,
            config: self.config.clone(),
        }
    }
}

impl<SO: Space, SI: Space> fmt::Debug for NestedGame<SO, SI> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NestedGame")
            .field("name", &self.name)
            .field("outer_space", &self.outer_space.name())
            .field("inner_space", &self.inner_space.name())
            .field("outer_kind", &self.outer_kind)
            .field("inner_kind", &self.inner_kind)
            .field("outer_budget", &self.outer_budget)
            .field("inner_budget", &self.inner_budget)
            .finish()
    }
}

/// Default inner threshold relative to the outer space tolerance.
pub const INNER_TOLERANCE_RATIO: f64 = 1e-2;
/// Default sample count for each inner slice check.
pub const INNER_SAMPLES: usize = 100;

/// Global certificate: `X_Ω` with the inner equilibrium `Y*(X_Ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedCertificate<PO, PI> {
    pub outer: FixpointCertificate<PO>,
    pub inner: FixpointCertificate<PI>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NestedConvergence<PO, PI> {
    Converged(Box<NestedCertificate<PO, PI>>),
    Diverged(NonConvergence<PO>),
}

impl<PO, PI> NestedConvergence<PO, PI> {
    pub fn certificate(&self) -> Option<&NestedCertificate<PO, PI>> {
        match self {
            NestedConvergence::Converged(c) => Some(c),
            NestedConvergence::Diverged(_) => None,
        }
    }

    /// Outer trace; stage records carry the inner closure ordinals.
    pub fn trace(&self) -> &IterationTrace<PO> {
        match self {
            NestedConvergence::Converged(c) => &c.outer.trace,
            NestedConvergence::Diverged(d) => &d.trace,
        }
    }

    pub fn is_converged(&self) -> bool {
        matches!(self, NestedConvergence::Converged(_))
    }
}

impl<SO, SI> NestedGame<SO, SI>
where
    SO: Validate + 'static,
    SI: Validate + 'static,
{
    /// A game with unchecked kinds, default budgets and tolerances.
    pub fn new(
        name: impl Into<String>,
        outer_space: Arc<SO>,
        inner_space: Arc<SI>,
        outer_update: CoupledMap<SO::Point, SI::Point, SO::Point>,
        inner_update: CoupledMap<SO::Point, SI::Point, SI::Point>,
        inner_start: SI::Point,
    ) -> Self {
        let config = EngineConfig::default();
        let inner_tolerance = outer_space.check_mode().tolerance() * INNER_TOLERANCE_RATIO;
        NestedGame {
            name: name.into(),
            outer_space,
            inner_space,
            outer_update,
            inner_update,
            outer_kind: OperatorKind::Unchecked,
            inner_kind: OperatorKind::Unchecked,
            outer_budget: config.budget.clone(),
            inner_budget: config.budget.clone(),
            inner_tolerance,
            inner_start,
            validation: ValidationConfig::default(),
            inner_validation: ValidationConfig {
                sample_count: INNER_SAMPLES,
                seed: 0,
            },
            config,
        }
    }

    fn inner_failure(&self, x: &SO::Point, reason: impl fmt::Display) -> GameError {
        GameError::InnerDivergence {
            context: self.outer_space.render(x),
            reason: reason.to_string(),
        }
    }

    /// Solves the inner game for context `x` from `y0`.
    pub fn solve_inner(
        &self,
        x: &SO::Point,
        y0: &SI::Point,
    ) -> Result<FixpointCertificate<SI::Point>, GameError> {
        let space = self.inner_space.as_ref();
        if !space.contains(y0) {
            return Err(GameError::InvalidInitial(format!("{y0:?}")));
        }
        let context = x.clone();
        let update = Arc::clone(&self.inner_update);
        let slice = Operator::new(
            format!("{}-inner", self.name),
            Arc::clone(&self.inner_space),
            self.inner_kind,
            move |y: &SI::Point| update(&context, y),
        )
        .validate(&self.inner_validation)
        .map_err(|e| self.inner_failure(x, e))?;
        let tolerance = match self.inner_kind {
            OperatorKind::Contraction { factor } => self.inner_tolerance * (1.0 - factor) / 2.0,
            _ => self.inner_tolerance,
        };
        let spec = RunSpec {
            space,
            x0: y0.clone(),
            config: &self.config,
            tolerance,
            stationary_from: Ordinal::zero(),
            stop_on_fixed: true,
        };
        let result = run_iteration(
            spec,
            &self.inner_budget,
            |_, y| {
                Ok(Stepped {
                    next: slice.apply(y),
                    inner_closure: None,
                })
            },
            |_, a, b| space.distance(a, b),
        )
        .map_err(|e| self.inner_failure(x, e))?;
        match conclude(
            space,
            y0.clone(),
            &self.inner_budget,
            result,
            self.inner_kind,
            slice.evidence().clone(),
            DiscrepancyMeasure::Residual,
        ) {
            Convergence::Converged(c) => Ok(c),
            Convergence::Diverged(d) => Err(self.inner_failure(x, d)),
        }
    }

    /// `X ↦ outer(X, Y*(X))` with its declared kind checked. Inner solves
    /// start from `y0`.
    pub fn composed(&self, y0: &SI::Point) -> Result<Validated<SO>, GameError> {
        let failure: Arc<Mutex<Option<GameError>>> = Arc::new(Mutex::new(None));
        let game = self.clone();
        let y0 = y0.clone();
        let seen = Arc::clone(&failure);
        let op = Operator::new(
            format!("{}-composed", self.name),
            Arc::clone(&self.outer_space),
            self.outer_kind,
            move |x: &SO::Point| match game.solve_inner(x, &y0) {
                Ok(c) => (game.outer_update)(x, &c.value),
                Err(e) => {
                    seen.lock().expect("unpoisoned").get_or_insert(e);
                    x.clone()
                }
            },
        );
        let checked = op.validate(&self.validation);
        if let Some(e) = failure.lock().expect("unpoisoned").take() {
            return Err(e);
        }
        Ok(checked?)
    }

    /// Iterates the outer game from `x0`, solving the inner game from `y0`
    /// before every outer step.
    pub fn solve_nested(
        &self,
        x0: &SO::Point,
        y0: &SI::Point,
    ) -> Result<NestedConvergence<SO::Point, SI::Point>, GameError> {
        let composed = self.composed(y0)?;
        self.run_outer(composed.evidence(), x0, y0)
    }

    fn run_outer(
        &self,
        evidence: &Evidence,
        x0: &SO::Point,
        y0: &SI::Point,
    ) -> Result<NestedConvergence<SO::Point, SI::Point>, GameError> {
        let space = self.outer_space.as_ref();
        if !space.contains(x0) {
            return Err(GameError::InvalidInitial(format!("{x0:?}")));
        }
        let spec = RunSpec {
            space,
            x0: x0.clone(),
            config: &self.config,
            tolerance: run_tolerance(space, self.outer_kind),
            stationary_from: Ordinal::zero(),
            stop_on_fixed: true,
        };
        let mut failed: Option<GameError> = None;
        let result = run_iteration(
            spec,
            &self.outer_budget,
            |stage, x| match self.solve_inner(x, y0) {
                Ok(c) => Ok(Stepped {
                    next: (self.outer_update)(x, &c.value),
                    inner_closure: Some(c.closure),
                }),
                Err(e) => {
                    let message = e.to_string();
                    failed = Some(e);
                    Err(EngineError::Step {
                        stage: stage.clone(),
                        message,
                    })
                }
            },
            |_, x, next| space.distance(x, next),
        );
        let result = match (result, failed) {
            (_, Some(e)) => return Err(e),
            (r, None) => r?,
        };
        match conclude(
            space,
            x0.clone(),
            &self.outer_budget,
            result,
            self.outer_kind,
            evidence.clone(),
            self.config.measure,
        ) {
            Convergence::Converged(outer) => {
                let inner = self.solve_inner(&outer.value, y0)?;
                Ok(NestedConvergence::Converged(Box::new(NestedCertificate {
                    outer,
                    inner,
                })))
            }
            Convergence::Diverged(d) => Ok(NestedConvergence::Diverged(d)),
        }
    }

    /// Solves from every `(x0, y0)` pair concurrently and compares the
    /// global values.
    pub fn verify_uniqueness(
        &self,
        pairs: &[(SO::Point, SI::Point)],
    ) -> Result<NestedUniqueness<SO::Point, SI::Point>, GameError> {
        if pairs.len() < 2 {
            return Err(EngineError::TooFewInitials(pairs.len()).into());
        }
        // the declared kind does not depend on the start, so check it once
        let composed = self.composed(&pairs[0].1)?;
        let evidence = composed.evidence();
        let runs: Vec<_> = thread::scope(|scope| {
            let handles: Vec<_> = pairs
                .iter()
                .map(|(x0, y0)| scope.spawn(move || self.run_outer(evidence, x0, y0)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("nested run panicked"))
                .collect()
        });
        let outer: Vec<Result<Convergence<SO::Point>, EngineError>> = runs
            .iter()
            .map(|r| match r {
                Ok(NestedConvergence::Converged(c)) => Ok(Convergence::Converged(c.outer.clone())),
                Ok(NestedConvergence::Diverged(d)) => Ok(Convergence::Diverged(d.clone())),
                Err(e) => Err(EngineError::Step {
                    stage: Ordinal::zero(),
                    message: e.to_string(),
                }),
            })
            .collect();
        let initials: Vec<SO::Point> = pairs.iter().map(|(x, _)| x.clone()).collect();
        Ok((
            compare_runs(self.outer_space.as_ref(), &initials, &outer),
            runs,
        ))
    }
}

impl<SO, SI> Equilibrium for NestedGame<SO, SI>
where
    SO: Validate + 'static,
    SI: Validate + 'static,
{
    type Point = SO::Point;

    fn equilibrium_check(&self, x: &SO::Point) -> Result<bool, GameError> {
        if !self.outer_space.contains(x) {
            return Err(GameError::InvalidInitial(format!("{x:?}")));
        }
        let inner = self.solve_inner(x, &self.inner_start)?;
        let next = (self.outer_update)(x, &inner.value);
        Ok(self.outer_space.agree(x, &next))
    }
}

/// The affine nested family: outer `(X, Y) ↦ A X + B Y + b`, inner
/// `(X, Y) ↦ P Y + Q X + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineNested {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub outer_offset: DVector<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub inner_offset: DVector<f64>,
}

impl AffineNested {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        outer_offset: DVector<f64>,
        p: DMatrix<f64>,
        q: DMatrix<f64>,
        inner_offset: DVector<f64>,
    ) -> Result<Self, GameError> {
        let n = outer_offset.len();
        let m = inner_offset.len();
        let shapes = [
            ("A", a.shape(), (n, n)),
            ("B", b.shape(), (n, m)),
            ("P", p.shape(), (m, m)),
            ("Q", q.shape(), (m, n)),
        ];
        if let Some((label, got, want)) = shapes.iter().find(|(_, got, want)| got != want) {
            return Err(GameError::Invalid(format!(
                "matrix {label} has shape {got:?}, expected {want:?}"
            )));
        }
        Ok(AffineNested {
            a,
            b,
            outer_offset,
            p,
            q,
            inner_offset,
        })
    }

    pub fn scalar(a: f64, b: f64, outer_offset: f64, p: f64, q: f64, inner_offset: f64) -> Self {
        let m = |v| DMatrix::from_element(1, 1, v);
        let v = |v| DVector::from_element(1, v);
        AffineNested {
            a: m(a),
            b: m(b),
            outer_offset: v(outer_offset),
            p: m(p),
            q: m(q),
            inner_offset: v(inner_offset),
        }
    }

    pub fn outer_dimension(&self) -> usize {
        self.outer_offset.len()
    }

    pub fn inner_dimension(&self) -> usize {
        self.inner_offset.len()
    }

    fn resolvent(&self) -> Result<DMatrix<f64>, GameError> {
        let m = self.inner_dimension();
        (DMatrix::identity(m, m) - &self.p)
            .try_inverse()
            .ok_or_else(|| {
                GameError::Invalid("I - P is singular; no unique inner equilibrium".into())
            })
    }

    /// `Y*(X) = (I − P)⁻¹ (Q X + r)`.
    pub fn inner_equilibrium(&self, x: &DVector<f64>) -> Result<DVector<f64>, GameError> {
        Ok(self.resolvent()? * (&self.q * x + &self.inner_offset))
    }

    /// `Φ(X) = (A + B (I − P)⁻¹ Q) X + B (I − P)⁻¹ r + b`.
    pub fn composed(&self) -> Result<AffineMap, GameError> {
        let k = &self.b * self.resolvent()?;
        Ok(AffineMap::new(
            &self.a + &k * &self.q,
            &k * &self.inner_offset + &self.outer_offset,
        )?)
    }

    pub fn outer_update(&self) -> CoupledMap<DVector<f64>, DVector<f64>, DVector<f64>> {
        let (a, b, c) = (self.a.clone(), self.b.clone(), self.outer_offset.clone());
        Arc::new(move |x: &DVector<f64>, y: &DVector<f64>| &a * x + &b * y + &c)
    }

    pub fn inner_update(&self) -> CoupledMap<DVector<f64>, DVector<f64>, DVector<f64>> {
        let (p, q, r) = (self.p.clone(), self.q.clone(), self.inner_offset.clone());
        Arc::new(move |x: &DVector<f64>, y: &DVector<f64>| &p * y + &q * x + &r)
    }

    /// A nested game over the given spaces, inner start at the origin.
    pub fn game(
        &self,
        name: impl Into<String>,
        outer_space: Arc<MetricSpaceSpec>,
        inner_space: Arc<MetricSpaceSpec>,
    ) -> Result<NestedGame<MetricSpaceSpec, MetricSpaceSpec>, GameError> {
        if outer_space.dimension() != self.outer_dimension()
            || inner_space.dimension() != self.inner_dimension()
        {
            return Err(GameError::Invalid(format!(
                "affine nested game of dimensions {}/{} on spaces of dimensions {}/{}",
                self.outer_dimension(),
                self.inner_dimension(),
                outer_space.dimension(),
                inner_space.dimension()
            )));
        }
        let start = DVector::zeros(self.inner_dimension());
        Ok(NestedGame::new(
            name,
            outer_space,
            inner_space,
            self.outer_update(),
            self.inner_update(),
            start,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Engine;

    fn r(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn line() -> Arc<MetricSpaceSpec> {
        Arc::new(MetricSpaceSpec::real_line("R"))
    }

    fn midpoint_game(target: f64) -> SemanticGame<MetricSpaceSpec> {
        SemanticGame::new(
            SemanticGameSpec {
                name: "mid".into(),
                space: line(),
                update: midpoint(),
                kind: OperatorKind::Contraction { factor: 0.5 },
                signal: SignalSchedule::constant(r(target)),
                measure: DiscrepancyMeasure::SignalGap,
                budget: Ordinal::omega().nat_scale(10u32),
            },
            &ValidationConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn play_round_examples() {
        let g = midpoint_game(4.0);
        assert_eq!(
            g.play_round(&r(0.0), &Ordinal::zero()).unwrap(),
            (r(2.0), 2.0)
        );
        assert_eq!(
            g.play_round(&r(4.0), &Ordinal::one()).unwrap(),
            (r(4.0), 0.0)
        );
    }

    #[test]
    fn lattice_round_uses_declared_measure() {
        let lat = Arc::new(FiniteLattice::powerset("P", ["a", "b", "c"]).unwrap());
        let a = lat.subset(&["a"]).unwrap();
        let b = lat.subset(&["b"]).unwrap();
        let g = SemanticGame::new(
            SemanticGameSpec {
                name: "join".into(),
                space: Arc::clone(&lat),
                update: join_signal(Arc::clone(&lat)),
                kind: OperatorKind::Monotone,
                signal: SignalSchedule::constant(b),
                measure: DiscrepancyMeasure::SignalGap,
                budget: Ordinal::omega(),
            },
            &ValidationConfig::default(),
        )
        .unwrap();
        let (next, gap) = g.play_round(&a, &Ordinal::zero()).unwrap();
        assert_eq!(lat.render(&next), "{a,b}");
        assert_eq!(gap, lat.distance(&next, &b));
        assert_eq!(gap, 1.0);
    }

    #[test]
    fn round_beyond_budget_has_no_signal() {
        let g = midpoint_game(4.0);
        let late = Ordinal::omega().nat_scale(11u32);
        assert!(matches!(
            g.play_round(&r(0.0), &late),
            Err(GameError::SignalUndefined { .. })
        ));
    }

    #[test]
    fn schedule_lookup() {
        let s = SignalSchedule::new(vec![(Ordinal::from(2), 7), (Ordinal::zero(), 5)], 1).unwrap();
        assert_eq!(*s.at(&Ordinal::zero()), 5);
        assert_eq!(*s.at(&Ordinal::one()), 1);
        assert_eq!(*s.at(&Ordinal::from(2)), 7);
        assert_eq!(*s.at(&Ordinal::omega()), 1);
        assert_eq!(s.tail_begins(), Ordinal::from(3));
        assert!(SignalSchedule::new(vec![(Ordinal::one(), 1), (Ordinal::one(), 2)], 0).is_err());
    }

    #[test]
    fn midpoint_run_descends_to_signal() {
        let g = midpoint_game(4.0);
        let run = g.run(&r(0.0), &EngineConfig::default()).unwrap();
        let cert = run.certificate().expect("converges");
        assert!((cert.value[0] - 4.0).abs() <= 1e-9);
        let d: Vec<f64> = cert.trace.stages.iter().map(|s| s.discrepancy).collect();
        assert!(d.windows(2).all(|w| w[1] <= w[0]));
        assert!(*d.last().unwrap() <= 1e-9);
    }

    #[test]
    fn scheduled_signal_settles_on_tail() {
        let space = line();
        let schedule = SignalSchedule::new(
            vec![(Ordinal::zero(), r(100.0)), (Ordinal::from(5), r(-50.0))],
            r(4.0),
        )
        .unwrap();
        let g = SemanticGame::new(
            SemanticGameSpec {
                name: "sched".into(),
                space,
                update: midpoint(),
                kind: OperatorKind::Contraction { factor: 0.5 },
                signal: schedule,
                measure: DiscrepancyMeasure::SignalGap,
                budget: Ordinal::omega(),
            },
            &ValidationConfig::default(),
        )
        .unwrap();
        let run = g.run(&r(4.0), &EngineConfig::default()).unwrap();
        let cert = run.certificate().unwrap();
        // starting at the tail value does not count: the early signals move it
        assert!(cert.closure > Ordinal::from(5));
        assert!((cert.value[0] - 4.0).abs() <= 1e-9);
    }

    #[test]
    fn equilibrium_examples() {
        let g = midpoint_game(4.0);
        assert!(g.equilibrium_check(&r(4.0)).unwrap());
        assert!(!g.equilibrium_check(&r(0.0)).unwrap());
    }

    #[test]
    fn game_rejects_false_contraction() {
        let err = SemanticGame::new(
            SemanticGameSpec {
                name: "bad".into(),
                space: line(),
                update: affine_signal(
                    DMatrix::from_element(1, 1, 2.0),
                    DMatrix::from_element(1, 1, 1.0),
                    r(0.0),
                )
                .unwrap(),
                kind: OperatorKind::Contraction { factor: 0.5 },
                signal: SignalSchedule::constant(r(1.0)),
                measure: DiscrepancyMeasure::Residual,
                budget: Ordinal::omega(),
            },
            &ValidationConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            GameError::Space(SpaceError::NotContraction { .. })
        ));
    }

    fn nested(family: &AffineNested) -> NestedGame<MetricSpaceSpec, MetricSpaceSpec> {
        family.game("n", line(), line()).unwrap()
    }

    #[test]
    fn inner_examples() {
        // Y ↦ X/2, constant in Y
        let mut g = nested(&AffineNested::scalar(0.0, 0.0, 0.0, 0.0, 0.5, 0.0));
        g.inner_kind = OperatorKind::Contraction { factor: 0.5 };
        let c = g.solve_inner(&r(6.0), &r(-3.0)).unwrap();
        assert_eq!(c.value, r(3.0));
        assert_eq!(c.closure, Ordinal::one());

        // Y ↦ (Y + X)/2
        let mut g = nested(&AffineNested::scalar(0.0, 0.0, 0.0, 0.5, 0.5, 0.0));
        g.inner_kind = OperatorKind::Contraction { factor: 0.5 };
        let c = g.solve_inner(&r(6.0), &r(0.0)).unwrap();
        assert!((c.value[0] - 6.0).abs() <= 1e-9);

        // Y ↦ 2Y + X
        let mut g = nested(&AffineNested::scalar(0.0, 0.0, 0.0, 2.0, 1.0, 0.0));
        g.inner_kind = OperatorKind::Contraction { factor: 0.5 };
        assert!(matches!(
            g.solve_inner(&r(1.0), &r(0.0)),
            Err(GameError::InnerDivergence { .. })
        ));
        g.inner_kind = OperatorKind::Unchecked;
        g.inner_budget = Ordinal::from(200);
        assert!(matches!(
            g.solve_inner(&r(1.0), &r(0.0)),
            Err(GameError::InnerDivergence { .. })
        ));
    }

    fn three_quarters() -> NestedGame<MetricSpaceSpec, MetricSpaceSpec> {
        // inner Y* = X/2, outer (X + Y)/2 + 1, so Φ(X) = 3X/4 + 1
        let mut g = nested(&AffineNested::scalar(0.5, 0.5, 1.0, 0.0, 0.5, 0.0));
        g.inner_kind = OperatorKind::Contraction { factor: 0.5 };
        g.outer_kind = OperatorKind::Contraction { factor: 0.75 };
        g
    }

    #[test]
    fn nested_three_quarters() {
        let g = three_quarters();
        let out = g.solve_nested(&r(0.0), &r(0.0)).unwrap();
        let cert = out.certificate().expect("converges");
        assert!((cert.outer.value[0] - 4.0).abs() <= 1e-9);
        assert!((cert.inner.value[0] - 2.0).abs() <= 1e-9);
        assert!(cert
            .outer
            .trace
            .stages
            .iter()
            .all(|s| s.inner_closure.is_some()));

        let (verdict, _) = g
            .verify_uniqueness(&[(r(0.0), r(0.0)), (r(-40.0), r(5.0)), (r(90.0), r(-7.0))])
            .unwrap();
        let Uniqueness::Unique(c) = verdict else {
            panic!("expected unique, got {verdict:?}")
        };
        assert!(c
            .uniqueness_evidence
            .iter()
            .all(|(_, v)| (v[0] - 4.0).abs() <= 1e-9));

        assert!(g.equilibrium_check(&cert.outer.value).unwrap());
        assert!(g.equilibrium_check(&r(4.0)).unwrap());
        assert!(!g.equilibrium_check(&r(0.0)).unwrap());
    }

    #[test]
    fn nested_matches_composed_operator() {
        let family = AffineNested::scalar(0.5, 0.5, 1.0, 0.0, 0.5, 0.0);
        let phi = Operator::affine(
            "phi",
            line(),
            OperatorKind::Contraction { factor: 0.75 },
            family.composed().unwrap(),
        )
        .unwrap()
        .validate(&ValidationConfig::default())
        .unwrap();
        let direct = Engine::default()
            .iterate_to_fixpoint(&phi, &r(0.0), &Ordinal::omega())
            .unwrap();
        let nested = three_quarters().solve_nested(&r(0.0), &r(0.0)).unwrap();
        let a = direct.certificate().unwrap().value[0];
        let b = nested.certificate().unwrap().outer.value[0];
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn nested_identity_has_many_fixpoints() {
        // inner Y* = X, outer picks Y
        let mut g = nested(&AffineNested::scalar(0.0, 1.0, 0.0, 0.5, 0.5, 0.0));
        g.inner_kind = OperatorKind::Contraction { factor: 0.5 };
        let (verdict, _) = g
            .verify_uniqueness(&[(r(0.0), r(0.0)), (r(1.0), r(0.0)), (r(2.0), r(0.0))])
            .unwrap();
        assert!(matches!(verdict, Uniqueness::Multiple(v) if v.len() == 3));
    }

    #[test]
    fn nested_translation_diverges() {
        // inner Y* = X + 2, outer (X + Y)/2, so Φ(X) = X + 1
        let family = AffineNested::scalar(0.5, 0.5, 0.0, 0.5, 0.5, 1.0);
        let y = family.inner_equilibrium(&r(3.0)).unwrap();
        assert!((y[0] - 5.0).abs() < 1e-12);
        let mut g = nested(&family);
        g.inner_kind = OperatorKind::Contraction { factor: 0.5 };
        g.outer_budget = Ordinal::from(100);
        let out = g.solve_nested(&r(0.0), &r(0.0)).unwrap();
        assert!(!out.is_converged());
    }

    #[test]
    fn nested_rejects_false_composed_claim() {
        let family = AffineNested::scalar(0.5, 0.5, 0.0, 0.5, 0.5, 1.0);
        let mut g = nested(&family);
        g.inner_kind = OperatorKind::Contraction { factor: 0.5 };
        g.outer_kind = OperatorKind::Contraction { factor: 0.9 };
        g.validation.sample_count = 50;
        assert!(matches!(
            g.solve_nested(&r(0.0), &r(0.0)),
            Err(GameError::Space(SpaceError::NotContraction { .. }))
        ));
    }

    #[test]
    fn inner_failure_aborts_outer_run() {
        let mut g = nested(&AffineNested::scalar(0.5, 0.5, 0.0, 2.0, 1.0, 0.0));
        g.inner_kind = OperatorKind::Unchecked;
        g.inner_budget = Ordinal::from(50);
        assert!(matches!(
            g.solve_nested(&r(1.0), &r(0.0)),
            Err(GameError::InnerDivergence { .. })
        ));
    }
}
