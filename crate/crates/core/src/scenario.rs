//! Declarative scenarios: spaces, operators, games and run directives in one
//! TOML file, executed in order with deterministic artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Convergence, DivergenceReason, Engine, EngineConfig, Uniqueness};
use crate::games::{
    affine_signal, join_signal, meet_signal, midpoint, AffineNested, NestedConvergence, NestedGame,
    SemanticGame, SemanticGameSpec, SignalSchedule,
};
use crate::oracle::{self, TransitionSystem};
use crate::ordinal::Ordinal;
use crate::records::{CertificateRecord, TraceFile};
use crate::space::{
    AffineMap, DiscrepancyMeasure, DistanceKind, Elem, FiniteLattice, MetricSpaceSpec, Operator,
    OperatorKind, OrdinalSpace, Space, Validate, Validated, ValidationConfig, DEFAULT_TOLERANCE,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{context}: {message}")]
    Validation { context: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn invalid(context: impl fmt::Display, message: impl fmt::Display) -> ScenarioError {
    ScenarioError::Validation {
        context: context.to_string(),
        message: message.to_string(),
    }
}

/// Scenario-wide settings; every field has a default and the resolved
/// values are echoed into the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    pub seed: u64,
    pub tolerance: f64,
    pub budget: Ordinal,
    pub window: usize,
    pub limit_cap: usize,
    pub dense_cap: usize,
    pub samples: usize,
    pub step_cap: u64,
}

impl Default for Defaults {
    fn default() -> Self {
        let engine = EngineConfig::default();
        Defaults {
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            budget: engine.budget,
            window: engine.agreement_window,
            limit_cap: engine.limit_cap,
            dense_cap: engine.dense_cap,
            samples: ValidationConfig::default().sample_count,
            step_cap: engine.step_cap,
        }
    }
}

/// Command-line overrides; they replace scenario defaults but not values
/// set on an individual declaration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub budget: Option<Ordinal>,
    pub tolerance: Option<f64>,
}

// ---- raw file schema ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    defaults: Defaults,
    #[serde(default)]
    space: Vec<RawSpace>,
    #[serde(default)]
    system: Vec<RawSystem>,
    #[serde(default)]
    operator: Vec<RawOperator>,
    #[serde(default)]
    game: Vec<RawGame>,
    #[serde(default)]
    nested: Vec<RawNested>,
    #[serde(default)]
    run: Vec<RawRun>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
enum RawSpace {
    Powerset {
        name: String,
        base: Vec<String>,
    },
    Lattice {
        name: String,
        elements: Vec<String>,
        covers: Vec<(String, String)>,
    },
    Metric {
        name: String,
        dimension: usize,
        #[serde(default)]
        distance: Option<DistanceKind>,
        #[serde(default)]
        tolerance: Option<f64>,
    },
    Ordinal {
        name: String,
        cap: String,
    },
}

impl RawSpace {
    fn name(&self) -> &str {
        match self {
            RawSpace::Powerset { name, .. }
            | RawSpace::Lattice { name, .. }
            | RawSpace::Metric { name, .. }
            | RawSpace::Ordinal { name, .. } => name,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    name: String,
    states: Vec<String>,
    #[serde(default)]
    transitions: Vec<(String, String)>,
    #[serde(default)]
    labels: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum RawKind {
    Monotone,
    Contraction,
    Unchecked,
}

fn kind_of(
    kind: RawKind,
    factor: Option<f64>,
    context: &str,
) -> Result<OperatorKind, ScenarioError> {
    match (kind, factor) {
        (RawKind::Contraction, Some(factor)) => Ok(OperatorKind::Contraction { factor }),
        (RawKind::Contraction, None) => Err(invalid(context, "a contraction needs `factor`")),
        (_, Some(_)) => Err(invalid(context, "`factor` only applies to contractions")),
        (RawKind::Monotone, None) => Ok(OperatorKind::Monotone),
        (RawKind::Unchecked, None) => Ok(OperatorKind::Unchecked),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOperator {
    name: String,
    space: String,
    kind: RawKind,
    #[serde(default)]
    factor: Option<f64>,
    map: RawMap,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
enum RawMap {
    Identity,
    Constant {
        value: String,
    },
    Union {
        with: String,
    },
    Intersect {
        with: String,
    },
    Complement,
    Post {
        system: String,
        seed: String,
    },
    Pre {
        system: String,
        seed: String,
    },
    Table {
        values: Vec<String>,
    },
    Affine {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
    ClampAdd {
        addend: String,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGame {
    name: String,
    space: String,
    kind: RawKind,
    #[serde(default)]
    factor: Option<f64>,
    update: RawUpdate,
    signal: RawSignal,
    #[serde(default)]
    measure: Option<DiscrepancyMeasure>,
    #[serde(default)]
    budget: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
enum RawUpdate {
    Midpoint,
    AffineSignal {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
    JoinSignal,
    MeetSignal,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSignal {
    #[serde(default)]
    schedule: Vec<(String, String)>,
    tail: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNested {
    name: String,
    outer_space: String,
    inner_space: String,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    outer_offset: Vec<f64>,
    p: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    inner_offset: Vec<f64>,
    outer_kind: RawKind,
    #[serde(default)]
    outer_factor: Option<f64>,
    inner_kind: RawKind,
    #[serde(default)]
    inner_factor: Option<f64>,
    #[serde(default)]
    outer_budget: Option<String>,
    #[serde(default)]
    inner_budget: Option<String>,
    #[serde(default)]
    inner_tolerance: Option<f64>,
    #[serde(default)]
    inner_start: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expect {
    Converge,
    Diverge,
    Unique,
    Multiple,
    Inconclusive,
    Agree,
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Expect::Converge => "converge",
            Expect::Diverge => "diverge",
            Expect::Unique => "unique",
            Expect::Multiple => "multiple",
            Expect::Inconclusive => "inconclusive",
            Expect::Agree => "agree",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleCheck {
    Lfp,
    Gfp,
    Reachability,
    Discretize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum RawDirective {
    Iterate,
    Uniqueness,
    Game,
    Nested,
    OracleCheck,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    name: String,
    directive: RawDirective,
    #[serde(default)]
    operator: Option<String>,
    #[serde(default)]
    game: Option<String>,
    #[serde(default)]
    nested: Option<String>,
    #[serde(default)]
    system: Option<String>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    check: Option<OracleCheck>,
    #[serde(default)]
    initial: Option<String>,
    #[serde(default)]
    inner_initial: Option<String>,
    #[serde(default)]
    initials: Vec<String>,
    #[serde(default)]
    pairs: Vec<(String, String)>,
    #[serde(default)]
    budget: Option<String>,
    #[serde(default)]
    measure: Option<DiscrepancyMeasure>,
    #[serde(default)]
    cap: Option<usize>,
    #[serde(default)]
    expect: Option<Expect>,
}

// ---- resolved scenario ----

#[derive(Debug, Clone)]
enum SpaceRef {
    Lattice(Arc<FiniteLattice>),
    Metric(Arc<MetricSpaceSpec>),
    Ordinal(Arc<OrdinalSpace>),
}

#[derive(Debug, Clone)]
enum OperatorRef {
    Lattice(Validated<FiniteLattice>),
    Metric(Validated<MetricSpaceSpec>),
    Ordinal(Validated<OrdinalSpace>),
}

#[derive(Debug)]
enum GameRef {
    Lattice(SemanticGame<FiniteLattice>),
    Metric(SemanticGame<MetricSpaceSpec>),
}

/// Initial states, parsed against the space of the directive's target.
#[derive(Debug, Clone)]
enum Points {
    Lattice(Vec<Elem>),
    Metric(Vec<DVector<f64>>),
    Ordinal(Vec<Ordinal>),
}

#[derive(Debug, Clone)]
enum Directive {
    Iterate {
        operator: String,
        initial: Points,
    },
    Uniqueness {
        operator: String,
        initials: Points,
    },
    Game {
        game: String,
        initial: Points,
    },
    Nested {
        nested: String,
        pairs: Vec<(DVector<f64>, DVector<f64>)>,
    },
    Oracle(OracleDirective),
}

#[derive(Debug, Clone)]
enum OracleDirective {
    Fixpoint {
        operator: String,
        check: OracleCheck,
    },
    Reachability {
        system: String,
        label: String,
    },
    Discretize {
        operator: String,
        seeds: Vec<DVector<f64>>,
        cap: usize,
    },
}

#[derive(Debug, Clone)]
struct RunDecl {
    name: String,
    directive: Directive,
    budget: Ordinal,
    measure: DiscrepancyMeasure,
    expect: Expect,
}

impl RunDecl {
    fn kind(&self) -> &'static str {
        match self.directive {
            Directive::Iterate { .. } => "iterate",
            Directive::Uniqueness { .. } => "uniqueness",
            Directive::Game { .. } => "game",
            Directive::Nested { .. } => "nested",
            Directive::Oracle(_) => "oracle-check",
        }
    }
}

/// A loaded, fully resolved scenario.
#[derive(Debug)]
pub struct Scenario {
    name: String,
    defaults: Defaults,
    spaces: BTreeMap<String, SpaceRef>,
    systems: BTreeMap<String, TransitionSystem>,
    operators: BTreeMap<String, OperatorRef>,
    games: BTreeMap<String, GameRef>,
    nested: BTreeMap<String, NestedGame<MetricSpaceSpec, MetricSpaceSpec>>,
    runs: Vec<RunDecl>,
}

fn position(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn parse_ordinal(text: &str, context: &str) -> Result<Ordinal, ScenarioError> {
    text.parse::<Ordinal>()
        .map_err(|e| invalid(context, format!("bad ordinal `{text}`: {e}")))
}

fn matrix(rows: &[Vec<f64>], context: &str) -> Result<DMatrix<f64>, ScenarioError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(invalid(
            context,
            "matrix rows must be non-empty and of equal length",
        ));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn unique_names<'a>(what: &str, names: impl Iterator<Item = &'a str>) -> Result<(), ScenarioError> {
    let mut seen = BTreeSet::new();
    for n in names {
        if n.is_empty()
            || !n
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(invalid(
                format!("{what} `{n}`"),
                "names use letters, digits, `-`, `_`, `.`",
            ));
        }
        if !seen.insert(n) {
            return Err(invalid(format!("{what} `{n}`"), "declared twice"));
        }
    }
    Ok(())
}

impl Scenario {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &Overrides) -> Result<Self, ScenarioError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| position(text, s.start));
            ScenarioError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        Self::resolve(raw, overrides)
    }

    fn resolve(raw: RawScenario, overrides: &Overrides) -> Result<Self, ScenarioError> {
        let mut defaults = raw.defaults;
        if let Some(seed) = overrides.seed {
            defaults.seed = seed;
        }
        if let Some(budget) = &overrides.budget {
            defaults.budget = budget.clone();
        }
        if let Some(tolerance) = overrides.tolerance {
            defaults.tolerance = tolerance;
        }
        if !(defaults.tolerance > 0.0 && defaults.tolerance.is_finite()) {
            return Err(invalid("defaults", "tolerance must be positive"));
        }
        unique_names("space", raw.space.iter().map(RawSpace::name))?;
        unique_names("system", raw.system.iter().map(|s| s.name.as_str()))?;
        unique_names(
            "operator or game",
            raw.operator
                .iter()
                .map(|o| o.name.as_str())
                .chain(raw.game.iter().map(|g| g.name.as_str()))
                .chain(raw.nested.iter().map(|n| n.name.as_str())),
        )?;
        unique_names("run", raw.run.iter().map(|r| r.name.as_str()))?;

        let mut scenario = Scenario {
            name: raw.name,
            defaults,
            spaces: BTreeMap::new(),
            systems: BTreeMap::new(),
            operators: BTreeMap::new(),
            games: BTreeMap::new(),
            nested: BTreeMap::new(),
            runs: Vec::new(),
        };
        for s in raw.space {
            let name = s.name().to_string();
            let entry = scenario
                .build_space(s)
                .map_err(|e| invalid(format!("space `{name}`"), e))?;
            scenario.spaces.insert(name, entry);
        }
        for s in raw.system {
            let context = format!("system `{}`", s.name);
            let ts = TransitionSystem::new(s.states, &s.transitions, &s.labels)
                .map_err(|e| invalid(&context, e))?;
            scenario.systems.insert(s.name, ts);
        }
        for o in raw.operator {
            let context = format!("operator `{}`", o.name);
            let op = scenario.build_operator(&o, &context)?;
            scenario.operators.insert(o.name, op);
        }
        for g in raw.game {
            let context = format!("game `{}`", g.name);
            let game = scenario.build_game(&g, &context)?;
            scenario.games.insert(g.name, game);
        }
        for n in raw.nested {
            let context = format!("nested game `{}`", n.name);
            let game = scenario.build_nested(&n, &context)?;
            scenario.nested.insert(n.name, game);
        }
        for r in raw.run {
            let context = format!("run `{}`", r.name);
            let run = scenario.build_run(r, &context)?;
            scenario.runs.push(run);
        }
        Ok(scenario)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn defaults(&self) -> &Defaults {
        &self.defaults
    }

    pub fn run_names(&self) -> impl Iterator<Item = &str> {
        self.runs.iter().map(|r| r.name.as_str())
    }

    fn validation(&self) -> ValidationConfig {
        ValidationConfig {
            sample_count: self.defaults.samples,
            seed: self.defaults.seed,
        }
    }

    fn engine_config(&self, budget: &Ordinal, measure: DiscrepancyMeasure) -> EngineConfig {
        EngineConfig {
            budget: budget.clone(),
            agreement_window: self.defaults.window,
            limit_cap: self.defaults.limit_cap,
            dense_cap: self.defaults.dense_cap,
            step_cap: self.defaults.step_cap,
            measure,
        }
    }

    fn build_space(&self, s: RawSpace) -> Result<SpaceRef, String> {
        Ok(match s {
            RawSpace::Powerset { name, base } => SpaceRef::Lattice(Arc::new(
                FiniteLattice::powerset(name, base).map_err(|e| e.to_string())?,
            )),
            RawSpace::Lattice {
                name,
                elements,
                covers,
            } => SpaceRef::Lattice(Arc::new(
                FiniteLattice::from_covers(name, elements, &covers).map_err(|e| e.to_string())?,
            )),
            RawSpace::Metric {
                name,
                dimension,
                distance,
                tolerance,
            } => SpaceRef::Metric(Arc::new(
                MetricSpaceSpec::new(
                    name,
                    dimension,
                    distance.unwrap_or(DistanceKind::Euclidean),
                    tolerance.unwrap_or(self.defaults.tolerance),
                )
                .map_err(|e| e.to_string())?,
            )),
            RawSpace::Ordinal { name, cap } => {
                let cap: Ordinal = cap.parse().map_err(|e| format!("bad cap `{cap}`: {e}"))?;
                SpaceRef::Ordinal(Arc::new(OrdinalSpace::new(name, cap)))
            }
        })
    }

    fn space(&self, name: &str, context: &str) -> Result<&SpaceRef, ScenarioError> {
        self.spaces
            .get(name)
            .ok_or_else(|| invalid(context, format!("unknown space `{name}`")))
    }

    fn system(&self, name: &str, context: &str) -> Result<&TransitionSystem, ScenarioError> {
        self.systems
            .get(name)
            .ok_or_else(|| invalid(context, format!("unknown system `{name}`")))
    }

    fn build_operator(&self, o: &RawOperator, context: &str) -> Result<OperatorRef, ScenarioError> {
        let kind = kind_of(o.kind, o.factor, context)?;
        let err = |e: &dyn fmt::Display| invalid(context, e);
        let cfg = self.validation();
        Ok(match self.space(&o.space, context)? {
            SpaceRef::Lattice(lat) => {
                let lat = Arc::clone(lat);
                let point = |t: &str| lat.parse_point(t).map_err(|e| err(&e));
                let op = match &o.map {
                    RawMap::Identity => Operator::identity(Arc::clone(&lat)),
                    RawMap::Constant { value } => {
                        Operator::constant(Arc::clone(&lat), point(value)?)
                    }
                    RawMap::Union { with } => Operator::join_with(Arc::clone(&lat), point(with)?),
                    RawMap::Intersect { with } => {
                        Operator::meet_with(Arc::clone(&lat), point(with)?)
                    }
                    RawMap::Complement => {
                        Operator::complement(Arc::clone(&lat)).map_err(|e| err(&e))?
                    }
                    RawMap::Post { system, seed } | RawMap::Pre { system, seed } => {
                        let ts = self.system(system, context)?;
                        if lat.base() != Some(ts.states()) {
                            return Err(invalid(
                                context,
                                format!(
                                    "space `{}` must be the powerset of the states of `{system}`",
                                    o.space
                                ),
                            ));
                        }
                        let backward = matches!(o.map, RawMap::Pre { .. });
                        Operator::image(Arc::clone(&lat), ts.transitions(), point(seed)?, backward)
                            .map_err(|e| err(&e))?
                    }
                    RawMap::Table { values } => {
                        let values = values.iter().map(|v| point(v)).collect::<Result<_, _>>()?;
                        Operator::table(Arc::clone(&lat), kind, values).map_err(|e| err(&e))?
                    }
                    other => {
                        return Err(invalid(
                            context,
                            format!("map {other:?} is not a lattice family"),
                        ))
                    }
                };
                OperatorRef::Lattice(
                    Operator::new(o.name.clone(), lat, kind, move |x: &Elem| op.apply(x))
                        .validate(&cfg)
                        .map_err(|e| err(&e))?,
                )
            }
            SpaceRef::Metric(m) => {
                let RawMap::Affine {
                    matrix: rows,
                    offset,
                } = &o.map
                else {
                    return Err(invalid(context, "metric operators use the `affine` family"));
                };
                let map = AffineMap::new(matrix(rows, context)?, DVector::from_vec(offset.clone()))
                    .map_err(|e| err(&e))?;
                OperatorRef::Metric(
                    Operator::affine(o.name.clone(), Arc::clone(m), kind, map)
                        .and_then(|op| op.validate(&cfg))
                        .map_err(|e| err(&e))?,
                )
            }
            SpaceRef::Ordinal(s) => {
                let RawMap::ClampAdd { addend } = &o.map else {
                    return Err(invalid(
                        context,
                        "ordinal operators use the `clamp-add` family",
                    ));
                };
                let op = Operator::clamp_add(Arc::clone(s), parse_ordinal(addend, context)?);
                let s = Arc::clone(s);
                OperatorRef::Ordinal(
                    Operator::new(o.name.clone(), s, kind, move |x: &Ordinal| op.apply(x))
                        .validate(&cfg)
                        .map_err(|e| err(&e))?,
                )
            }
        })
    }

    fn signal<S: Space>(
        space: &S,
        raw: &RawSignal,
        context: &str,
    ) -> Result<SignalSchedule<S::Point>, ScenarioError> {
        let point = |t: &str| space.parse_point(t).map_err(|e| invalid(context, e));
        let entries = raw
            .schedule
            .iter()
            .map(|(round, value)| Ok((parse_ordinal(round, context)?, point(value)?)))
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        SignalSchedule::new(entries, point(&raw.tail)?).map_err(|e| invalid(context, e))
    }

    fn build_game(&self, g: &RawGame, context: &str) -> Result<GameRef, ScenarioError> {
        let kind = kind_of(g.kind, g.factor, context)?;
        let budget = match &g.budget {
            Some(b) => parse_ordinal(b, context)?,
            None => self.defaults.budget.clone(),
        };
        let measure = g.measure.unwrap_or(DiscrepancyMeasure::SignalGap);
        let cfg = self.validation();
        fn make<S: Validate + 'static>(
            spec: SemanticGameSpec<S>,
            cfg: &ValidationConfig,
            context: &str,
        ) -> Result<SemanticGame<S>, ScenarioError> {
            SemanticGame::new(spec, cfg).map_err(|e| invalid(context, e))
        }
        Ok(match self.space(&g.space, context)? {
            SpaceRef::Lattice(lat) => {
                let update = match &g.update {
                    RawUpdate::JoinSignal => join_signal(Arc::clone(lat)),
                    RawUpdate::MeetSignal => meet_signal(Arc::clone(lat)),
                    _ => {
                        return Err(invalid(
                            context,
                            "lattice games use `join-signal` or `meet-signal`",
                        ))
                    }
                };
                let signal = Self::signal(lat.as_ref(), &g.signal, context)?;
                GameRef::Lattice(make(
                    SemanticGameSpec {
                        name: g.name.clone(),
                        space: Arc::clone(lat),
                        update,
                        kind,
                        signal,
                        measure,
                        budget,
                    },
                    &cfg,
                    context,
                )?)
            }
            SpaceRef::Metric(m) => {
                let update = match &g.update {
                    RawUpdate::Midpoint => midpoint(),
                    RawUpdate::AffineSignal { a, b, offset } => affine_signal(
                        matrix(a, context)?,
                        matrix(b, context)?,
                        DVector::from_vec(offset.clone()),
                    )
                    .map_err(|e| invalid(context, e))?,
                    _ => {
                        return Err(invalid(
                            context,
                            "metric games use `midpoint` or `affine-signal`",
                        ))
                    }
                };
                let signal = Self::signal(m.as_ref(), &g.signal, context)?;
                GameRef::Metric(make(
                    SemanticGameSpec {
                        name: g.name.clone(),
                        space: Arc::clone(m),
                        update,
                        kind,
                        signal,
                        measure,
                        budget,
                    },
                    &cfg,
                    context,
                )?)
            }
            SpaceRef::Ordinal(_) => {
                return Err(invalid(context, "games need a lattice or metric space"))
            }
        })
    }

    fn metric(&self, name: &str, context: &str) -> Result<Arc<MetricSpaceSpec>, ScenarioError> {
        match self.space(name, context)? {
            SpaceRef::Metric(m) => Ok(Arc::clone(m)),
            _ => Err(invalid(
                context,
                format!("space `{name}` is not a metric space"),
            )),
        }
    }

    fn build_nested(
        &self,
        n: &RawNested,
        context: &str,
    ) -> Result<NestedGame<MetricSpaceSpec, MetricSpaceSpec>, ScenarioError> {
        let family = AffineNested::new(
            matrix(&n.a, context)?,
            matrix(&n.b, context)?,
            DVector::from_vec(n.outer_offset.clone()),
            matrix(&n.p, context)?,
            matrix(&n.q, context)?,
            DVector::from_vec(n.inner_offset.clone()),
        )
        .map_err(|e| invalid(context, e))?;
        let outer = self.metric(&n.outer_space, context)?;
        let inner = self.metric(&n.inner_space, context)?;
        let mut game = family
            .game(n.name.clone(), outer, Arc::clone(&inner))
            .map_err(|e| invalid(context, e))?;
        game.outer_kind = kind_of(n.outer_kind, n.outer_factor, context)?;
        game.inner_kind = kind_of(n.inner_kind, n.inner_factor, context)?;
        game.outer_budget = match &n.outer_budget {
            Some(b) => parse_ordinal(b, context)?,
            None => self.defaults.budget.clone(),
        };
        game.inner_budget = match &n.inner_budget {
            Some(b) => parse_ordinal(b, context)?,
            None => self.defaults.budget.clone(),
        };
        if let Some(t) = n.inner_tolerance {
            game.inner_tolerance = t;
        }
        if let Some(s) = &n.inner_start {
            game.inner_start = inner.parse_point(s).map_err(|e| invalid(context, e))?;
        }
        game.validation = self.validation();
        game.inner_validation.seed = self.defaults.seed;
        game.config = self.engine_config(&game.outer_budget, DiscrepancyMeasure::Residual);
        Ok(game)
    }

    fn points(
        &self,
        space: &SpaceRef,
        texts: &[String],
        context: &str,
    ) -> Result<Points, ScenarioError> {
        fn parse<S: Space>(
            s: &S,
            texts: &[String],
            context: &str,
        ) -> Result<Vec<S::Point>, ScenarioError> {
            texts
                .iter()
                .map(|t| s.parse_point(t).map_err(|e| invalid(context, e)))
                .collect()
        }
        Ok(match space {
            SpaceRef::Lattice(s) => Points::Lattice(parse(s.as_ref(), texts, context)?),
            SpaceRef::Metric(s) => Points::Metric(parse(s.as_ref(), texts, context)?),
            SpaceRef::Ordinal(s) => Points::Ordinal(parse(s.as_ref(), texts, context)?),
        })
    }

    fn operator_space(&self, name: &str, context: &str) -> Result<SpaceRef, ScenarioError> {
        match self.operators.get(name) {
            Some(OperatorRef::Lattice(op)) => Ok(SpaceRef::Lattice(Arc::clone(op.space()))),
            Some(OperatorRef::Metric(op)) => Ok(SpaceRef::Metric(Arc::clone(op.space()))),
            Some(OperatorRef::Ordinal(op)) => Ok(SpaceRef::Ordinal(Arc::clone(op.space()))),
            None => Err(invalid(context, format!("unknown operator `{name}`"))),
        }
    }

    fn build_run(&self, r: RawRun, context: &str) -> Result<RunDecl, ScenarioError> {
        let need = |field: &Option<String>, what: &str| {
            field
                .clone()
                .ok_or_else(|| invalid(context, format!("missing `{what}`")))
        };
        let budget = match &r.budget {
            Some(b) => parse_ordinal(b, context)?,
            None => self.defaults.budget.clone(),
        };
        let (directive, default_expect) = match r.directive {
            RawDirective::Iterate => {
                let operator = need(&r.operator, "operator")?;
                let space = self.operator_space(&operator, context)?;
                let initial = self.points(&space, &[need(&r.initial, "initial")?], context)?;
                (Directive::Iterate { operator, initial }, Expect::Converge)
            }
            RawDirective::Uniqueness => {
                let operator = need(&r.operator, "operator")?;
                let space = self.operator_space(&operator, context)?;
                if r.initials.len() < 2 {
                    return Err(invalid(context, "uniqueness needs at least two `initials`"));
                }
                let initials = self.points(&space, &r.initials, context)?;
                (Directive::Uniqueness { operator, initials }, Expect::Unique)
            }
            RawDirective::Game => {
                let game = need(&r.game, "game")?;
                let space = match self.games.get(&game) {
                    Some(GameRef::Lattice(g)) => SpaceRef::Lattice(Arc::clone(g.space())),
                    Some(GameRef::Metric(g)) => SpaceRef::Metric(Arc::clone(g.space())),
                    None => return Err(invalid(context, format!("unknown game `{game}`"))),
                };
                let initial = self.points(&space, &[need(&r.initial, "initial")?], context)?;
                (Directive::Game { game, initial }, Expect::Converge)
            }
            RawDirective::Nested => {
                let name = need(&r.nested, "nested")?;
                let game = self
                    .nested
                    .get(&name)
                    .ok_or_else(|| invalid(context, format!("unknown nested game `{name}`")))?;
                let texts: Vec<(String, String)> = if r.pairs.is_empty() {
                    let y0 = r
                        .inner_initial
                        .clone()
                        .unwrap_or_else(|| game.inner_space.render(&game.inner_start));
                    vec![(need(&r.initial, "initial")?, y0)]
                } else {
                    r.pairs.clone()
                };
                let pairs = texts
                    .iter()
                    .map(|(x, y)| {
                        Ok((
                            game.outer_space
                                .parse_point(x)
                                .map_err(|e| invalid(context, e))?,
                            game.inner_space
                                .parse_point(y)
                                .map_err(|e| invalid(context, e))?,
                        ))
                    })
                    .collect::<Result<Vec<_>, ScenarioError>>()?;
                let expect = if pairs.len() > 1 {
                    Expect::Unique
                } else {
                    Expect::Converge
                };
                (
                    Directive::Nested {
                        nested: name,
                        pairs,
                    },
                    expect,
                )
            }
            RawDirective::OracleCheck => {
                let check = r.check.ok_or_else(|| invalid(context, "missing `check`"))?;
                let directive = match check {
                    OracleCheck::Lfp | OracleCheck::Gfp => {
                        let operator = need(&r.operator, "operator")?;
                        match self.operators.get(&operator) {
                            Some(OperatorRef::Lattice(_)) => {}
                            Some(_) => {
                                return Err(invalid(
                                    context,
                                    format!("operator `{operator}` is not on a lattice"),
                                ))
                            }
                            None => {
                                return Err(invalid(
                                    context,
                                    format!("unknown operator `{operator}`"),
                                ))
                            }
                        }
                        OracleDirective::Fixpoint { operator, check }
                    }
                    OracleCheck::Reachability => {
                        let system = need(&r.system, "system")?;
                        let label = need(&r.label, "label")?;
                        self.system(&system, context)?
                            .label(&label)
                            .map_err(|e| invalid(context, e))?;
                        OracleDirective::Reachability { system, label }
                    }
                    OracleCheck::Discretize => {
                        let operator = need(&r.operator, "operator")?;
                        let Some(OperatorRef::Metric(op)) = self.operators.get(&operator) else {
                            return Err(invalid(
                                context,
                                format!("operator `{operator}` is not a metric operator"),
                            ));
                        };
                        if r.initials.len() < 2 {
                            return Err(invalid(
                                context,
                                "discretize needs at least two `initials`",
                            ));
                        }
                        let seeds = r
                            .initials
                            .iter()
                            .map(|t| op.space().parse_point(t).map_err(|e| invalid(context, e)))
                            .collect::<Result<_, _>>()?;
                        OracleDirective::Discretize {
                            operator,
                            seeds,
                            cap: r.cap.unwrap_or(crate::space::MAX_EXPLICIT_ELEMENTS),
                        }
                    }
                };
                (Directive::Oracle(directive), Expect::Agree)
            }
        };
        Ok(RunDecl {
            name: r.name,
            directive,
            budget,
            measure: r.measure.unwrap_or_default(),
            expect: r.expect.unwrap_or(default_expect),
        })
    }
}

// ---- results ----

/// What a directive produced, as written to `<run>.result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Verdict {
    Converged {
        certificate: CertificateRecord,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inner: Option<CertificateRecord>,
    },
    Diverged {
        reason: DivergenceReason,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        last_stage: Option<Ordinal>,
    },
    Unique {
        certificate: CertificateRecord,
    },
    Multiple {
        values: Vec<String>,
    },
    Inconclusive {
        failures: Vec<String>,
    },
    Oracle {
        check: OracleCheck,
        applicable: bool,
        engine: String,
        oracle: String,
        agree: bool,
    },
    Error {
        message: String,
    },
}

impl Verdict {
    fn satisfies(&self, expect: Expect) -> bool {
        matches!(
            (self, expect),
            (Verdict::Converged { .. }, Expect::Converge)
                | (Verdict::Diverged { .. }, Expect::Diverge)
                | (Verdict::Unique { .. }, Expect::Unique)
                | (Verdict::Multiple { .. }, Expect::Multiple)
                | (Verdict::Inconclusive { .. }, Expect::Inconclusive)
                | (Verdict::Oracle { agree: true, .. }, Expect::Agree)
        )
    }

    fn summary(&self) -> String {
        match self {
            Verdict::Converged { certificate, inner } => {
                let mut s = format!(
                    "converged to {} at {}",
                    certificate.value, certificate.closure
                );
                if let Some(i) = inner {
                    s.push_str(&format!(" (inner {})", i.value));
                }
                s
            }
            Verdict::Diverged { reason, last_stage } => format!(
                "no fixed point ({reason:?}{})",
                last_stage
                    .as_ref()
                    .map(|s| format!(", last stage {s}"))
                    .unwrap_or_default()
            ),
            Verdict::Unique { certificate } => format!("unique fixed point {}", certificate.value),
            Verdict::Multiple { values } => format!("{} distinct fixed points", values.len()),
            Verdict::Inconclusive { failures } => format!("inconclusive: {}", failures.join("; ")),
            Verdict::Oracle {
                engine,
                oracle,
                agree,
                applicable,
                ..
            } => format!(
                "engine {engine}, oracle {oracle}: {}",
                if !applicable {
                    "oracle not applicable"
                } else if *agree {
                    "agree"
                } else {
                    "DISAGREE"
                }
            ),
            Verdict::Error { message } => format!("error: {message}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub scenario: String,
    pub run: String,
    pub directive: String,
    pub budget: Ordinal,
    pub expect: Expect,
    pub met: bool,
    pub verdict: Verdict,
}

/// One executed directive.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub record: ResultRecord,
    /// `(file name, contents)`, in write order.
    pub artifacts: Vec<(String, String)>,
}

impl RunOutcome {
    pub fn summary_line(&self) -> String {
        let r = &self.record;
        format!(
            "{} {} [{}]: {}",
            if r.met { "ok  " } else { "FAIL" },
            r.run,
            r.directive,
            r.verdict.summary()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub scenario: String,
    pub defaults: Defaults,
    pub runs: Vec<RunOutcome>,
}

impl ScenarioReport {
    pub fn success(&self) -> bool {
        self.runs.iter().all(|r| r.record.met)
    }

    /// Every artifact, starting with the resolved defaults.
    pub fn artifacts(&self) -> Vec<(String, String)> {
        let mut out = vec![(
            "scenario.json".to_string(),
            serde_json::to_string_pretty(&serde_json::json!({
                "scenario": self.scenario,
                "defaults": self.defaults,
                "runs": self.runs.iter().map(|r| &r.record.run).collect::<Vec<_>>(),
            }))
            .expect("serializable")
                + "\n",
        )];
        for r in &self.runs {
            out.extend(r.artifacts.iter().cloned());
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), ScenarioError> {
        let io = |e: std::io::Error, p: &Path| ScenarioError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
        for (name, contents) in self.artifacts() {
            let path = dir.join(name);
            fs::write(&path, contents).map_err(|e| io(e, &path))?;
        }
        Ok(())
    }
}

/// Which directives to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selection {
    #[default]
    All,
    OracleOnly,
}

struct Artifacts<'a> {
    run: &'a str,
    files: Vec<(String, String)>,
}

impl Artifacts<'_> {
    fn trace<S: Space>(
        &mut self,
        space: &S,
        trace: &crate::engine::IterationTrace<S::Point>,
        index: Option<usize>,
    ) {
        let name = match index {
            Some(i) => format!("{}.{i}", self.run),
            None => self.run.to_string(),
        };
        let file = TraceFile::from_trace(&name, space, trace);
        self.files
            .push((format!("{name}.trace.jsonl"), file.to_jsonl()));
    }
}

fn verdict_of<S: Space>(space: &S, run: &Convergence<S::Point>) -> Verdict {
    match run {
        Convergence::Converged(c) => Verdict::Converged {
            certificate: CertificateRecord::from_certificate(space, c),
            inner: None,
        },
        Convergence::Diverged(d) => Verdict::Diverged {
            reason: d.reason,
            last_stage: d.trace.stages.last().map(|r| r.stage.clone()),
        },
    }
}

fn uniqueness_verdict<S: Space>(space: &S, u: &Uniqueness<S::Point>) -> Verdict {
    match u {
        Uniqueness::Unique(c) => Verdict::Unique {
            certificate: CertificateRecord::from_certificate(space, c),
        },
        Uniqueness::Multiple(values) => Verdict::Multiple {
            values: values.iter().map(|v| space.render(v)).collect(),
        },
        Uniqueness::Inconclusive(failures) => Verdict::Inconclusive {
            failures: failures.clone(),
        },
    }
}

fn iterate<S: Space>(
    engine: &Engine,
    op: &Validated<S>,
    x0: &S::Point,
    budget: &Ordinal,
    out: &mut Artifacts,
) -> Result<Verdict, String> {
    let run = engine
        .iterate_to_fixpoint(op, x0, budget)
        .map_err(|e| e.to_string())?;
    out.trace(op.space().as_ref(), run.trace(), None);
    Ok(verdict_of(op.space().as_ref(), &run))
}

fn uniqueness<S: Space>(
    engine: &Engine,
    op: &Validated<S>,
    initials: &[S::Point],
    budget: &Ordinal,
    out: &mut Artifacts,
) -> Result<Verdict, String> {
    let report = engine
        .verify_uniqueness(op, initials, budget)
        .map_err(|e| e.to_string())?;
    for (i, run) in report.runs.iter().enumerate() {
        if let Ok(run) = run {
            out.trace(op.space().as_ref(), run.trace(), Some(i));
        }
    }
    Ok(uniqueness_verdict(op.space().as_ref(), &report.verdict))
}

fn play<S: Space>(
    game: &SemanticGame<S>,
    x0: &S::Point,
    config: &EngineConfig,
    out: &mut Artifacts,
) -> Result<Verdict, String> {
    let run = game.run(x0, config).map_err(|e| e.to_string())?;
    out.trace(game.space().as_ref(), run.trace(), None);
    Ok(verdict_of(game.space().as_ref(), &run))
}

impl Scenario {
    pub fn run(&self, selection: Selection) -> ScenarioReport {
        let runs = self
            .runs
            .iter()
            .filter(|r| selection == Selection::All || matches!(r.directive, Directive::Oracle(_)))
            .map(|r| self.execute(r))
            .collect();
        ScenarioReport {
            scenario: self.name.clone(),
            defaults: self.defaults.clone(),
            runs,
        }
    }

    fn execute(&self, run: &RunDecl) -> RunOutcome {
        let mut out = Artifacts {
            run: &run.name,
            files: Vec::new(),
        };
        let verdict = self
            .dispatch(run, &mut out)
            .unwrap_or_else(|message| Verdict::Error { message });
        let record = ResultRecord {
            scenario: self.name.clone(),
            run: run.name.clone(),
            directive: run.kind().to_string(),
            budget: run.budget.clone(),
            expect: run.expect,
            met: verdict.satisfies(run.expect),
            verdict,
        };
        let mut artifacts = out.files;
        artifacts.push((
            format!("{}.result.json", run.name),
            serde_json::to_string_pretty(&record).expect("serializable") + "\n",
        ));
        RunOutcome { record, artifacts }
    }

    fn dispatch(&self, run: &RunDecl, out: &mut Artifacts) -> Result<Verdict, String> {
        let engine = Engine::new(self.engine_config(&run.budget, run.measure));
        let budget = &run.budget;
        match &run.directive {
            Directive::Iterate { operator, initial } => {
                match (&self.operators[operator], initial) {
                    (OperatorRef::Lattice(op), Points::Lattice(x)) => {
                        iterate(&engine, op, &x[0], budget, out)
                    }
                    (OperatorRef::Metric(op), Points::Metric(x)) => {
                        iterate(&engine, op, &x[0], budget, out)
                    }
                    (OperatorRef::Ordinal(op), Points::Ordinal(x)) => {
                        iterate(&engine, op, &x[0], budget, out)
                    }
                    _ => unreachable!("initials are parsed in the operator's space"),
                }
            }
            Directive::Uniqueness { operator, initials } => {
                match (&self.operators[operator], initials) {
                    (OperatorRef::Lattice(op), Points::Lattice(x)) => {
                        uniqueness(&engine, op, x, budget, out)
                    }
                    (OperatorRef::Metric(op), Points::Metric(x)) => {
                        uniqueness(&engine, op, x, budget, out)
                    }
                    (OperatorRef::Ordinal(op), Points::Ordinal(x)) => {
                        uniqueness(&engine, op, x, budget, out)
                    }
                    _ => unreachable!("initials are parsed in the operator's space"),
                }
            }
            Directive::Game { game, initial } => {
                let config = engine.config();
                match (&self.games[game], initial) {
                    (GameRef::Lattice(g), Points::Lattice(x)) => play(g, &x[0], config, out),
                    (GameRef::Metric(g), Points::Metric(x)) => play(g, &x[0], config, out),
                    _ => unreachable!("initials are parsed in the game's space"),
                }
            }
            Directive::Nested { nested, pairs } => {
                self.nested_run(&self.nested[nested], pairs, out)
            }
            Directive::Oracle(check) => self.oracle_run(&engine, check, budget, out),
        }
    }

    fn nested_run(
        &self,
        game: &NestedGame<MetricSpaceSpec, MetricSpaceSpec>,
        pairs: &[(DVector<f64>, DVector<f64>)],
        out: &mut Artifacts,
    ) -> Result<Verdict, String> {
        let outer = game.outer_space.as_ref();
        let nested_verdict = |r: &NestedConvergence<DVector<f64>, DVector<f64>>| match r {
            NestedConvergence::Converged(c) => Verdict::Converged {
                certificate: CertificateRecord::from_certificate(outer, &c.outer),
                inner: Some(CertificateRecord::from_certificate(
                    game.inner_space.as_ref(),
                    &c.inner,
                )),
            },
            NestedConvergence::Diverged(d) => Verdict::Diverged {
                reason: d.reason,
                last_stage: d.trace.stages.last().map(|r| r.stage.clone()),
            },
        };
        if let [(x0, y0)] = pairs {
            let r = game.solve_nested(x0, y0).map_err(|e| e.to_string())?;
            out.trace(outer, r.trace(), None);
            return Ok(nested_verdict(&r));
        }
        let (verdict, runs) = game.verify_uniqueness(pairs).map_err(|e| e.to_string())?;
        for (i, r) in runs.iter().enumerate() {
            if let Ok(r) = r {
                out.trace(outer, r.trace(), Some(i));
            }
        }
        Ok(uniqueness_verdict(outer, &verdict))
    }

    fn oracle_run(
        &self,
        engine: &Engine,
        check: &OracleDirective,
        budget: &Ordinal,
        out: &mut Artifacts,
    ) -> Result<Verdict, String> {
        match check {
            OracleDirective::Fixpoint { operator, check } => {
                let OperatorRef::Lattice(op) = &self.operators[operator] else {
                    unreachable!("checked at load")
                };
                let lat = op.space().as_ref();
                let (start, truth) = match check {
                    OracleCheck::Lfp => (lat.bottom(), oracle::lfp_bruteforce(op, lat)),
                    _ => (lat.top(), oracle::gfp_bruteforce(op, lat)),
                };
                let truth = truth.map_err(|e| e.to_string())?;
                let run = engine
                    .iterate_to_fixpoint(op, &start, budget)
                    .map_err(|e| e.to_string())?;
                out.trace(lat, run.trace(), None);
                let engine_value = run.certificate().map(|c| c.value);
                Ok(Verdict::Oracle {
                    check: *check,
                    applicable: true,
                    engine: engine_value
                        .map_or_else(|| "no fixed point".into(), |v| lat.render(&v)),
                    oracle: lat.render(&truth),
                    agree: engine_value == Some(truth),
                })
            }
            OracleDirective::Reachability { system, label } => {
                let ts = &self.systems[system];
                let kleene = oracle::mu_reachability(ts, label).map_err(|e| e.to_string())?;
                let search = oracle::reachable_by_search(ts, label).map_err(|e| e.to_string())?;
                let render = |s: &BTreeSet<usize>| format!("{{{}}}", ts.names(s).join(","));
                let lat = Arc::new(
                    FiniteLattice::powerset(system.clone(), ts.states().to_vec())
                        .map_err(|e| e.to_string())?,
                );
                let seed = Elem(
                    ts.label(label)
                        .map_err(|e| e.to_string())?
                        .iter()
                        .fold(0, |m, &i| m | (1 << i)),
                );
                let op = Operator::image(Arc::clone(&lat), ts.transitions(), seed, true)
                    .and_then(|op| op.validate(&self.validation()))
                    .map_err(|e| e.to_string())?;
                let run = engine
                    .iterate_to_fixpoint(&op, &lat.bottom(), budget)
                    .map_err(|e| e.to_string())?;
                out.trace(lat.as_ref(), run.trace(), None);
                let engine_value = run.certificate().map(|c| lat.render(&c.value));
                let oracle_value = render(&kleene);
                Ok(Verdict::Oracle {
                    check: OracleCheck::Reachability,
                    applicable: true,
                    agree: kleene == search
                        && engine_value.as_deref() == Some(oracle_value.as_str()),
                    engine: engine_value.unwrap_or_else(|| "no fixed point".into()),
                    oracle: oracle_value,
                })
            }
            OracleDirective::Discretize {
                operator,
                seeds,
                cap,
            } => {
                let OperatorRef::Metric(op) = &self.operators[operator] else {
                    unreachable!("checked at load")
                };
                let report = engine
                    .verify_uniqueness(op, seeds, budget)
                    .map_err(|e| e.to_string())?;
                let engine_count = match &report.verdict {
                    Uniqueness::Unique(_) => Some(1),
                    Uniqueness::Multiple(v) => Some(v.len()),
                    Uniqueness::Inconclusive(_) => None,
                };
                let engine_text = match engine_count {
                    Some(1) => "unique".to_string(),
                    Some(n) => format!("multiple ({n})"),
                    None => "inconclusive".to_string(),
                };
                Ok(match oracle::discretize_orbits(op, seeds, *cap) {
                    Ok(d) => {
                        let fixed = d.fixed_classes().map_err(|e| e.to_string())?;
                        let oracle_unique = fixed.len() == 1;
                        Verdict::Oracle {
                            check: OracleCheck::Discretize,
                            applicable: true,
                            engine: engine_text,
                            oracle: format!(
                                "{} fixed points among {} orbit points",
                                fixed.len(),
                                d.lattice.size()
                            ),
                            agree: engine_count.is_some_and(|n| (n == 1) == oracle_unique),
                        }
                    }
                    Err(e) => Verdict::Oracle {
                        check: OracleCheck::Discretize,
                        applicable: false,
                        engine: engine_text,
                        oracle: e.to_string(),
                        agree: engine_count.is_some(),
                    },
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        Scenario::parse(text, &Overrides::default())
    }

    const HALVING: &str = r#"
name = "halving"

[[space]]
name = "R"
type = "metric"
dimension = 1

[[operator]]
name = "half"
space = "R"
kind = "contraction"
factor = 0.5
map = { family = "affine", matrix = [[0.5]], offset = [1.0] }

[[run]]
name = "from-zero"
directive = "iterate"
operator = "half"
initial = "0"
"#;

    #[test]
    fn halving_converges_to_two() {
        let report = parse(HALVING).unwrap().run(Selection::All);
        assert!(report.success());
        let Verdict::Converged { certificate, .. } = &report.runs[0].record.verdict else {
            panic!("{:?}", report.runs[0].record.verdict)
        };
        let v: f64 = certificate.value.trim_matches(['[', ']']).parse().unwrap();
        assert!((v - 2.0).abs() <= 1e-9);
        assert_eq!(report.defaults.tolerance, 1e-9);
        assert_eq!(report.defaults.budget.to_string(), "w*10");
    }

    #[test]
    fn unresolved_operator_names_the_reference() {
        let text = HALVING.replace("operator = \"half\"", "operator = \"missing\"");
        let err = parse(&text).unwrap_err();
        let ScenarioError::Validation { context, message } = err else {
            panic!("{err:?}")
        };
        assert_eq!(context, "run `from-zero`");
        assert!(message.contains("`missing`"));
    }

    #[test]
    fn expected_divergence_succeeds() {
        let text = HALVING
            .replace(
                "kind = \"contraction\"\nfactor = 0.5",
                "kind = \"unchecked\"",
            )
            .replace("matrix = [[0.5]]", "matrix = [[1.0]]")
            .replace(
                "initial = \"0\"",
                "initial = \"0\"\nexpect = \"diverge\"\nbudget = \"w\"",
            );
        let report = parse(&text).unwrap().run(Selection::All);
        assert!(report.success(), "{:?}", report.runs[0].record);
        assert!(matches!(
            report.runs[0].record.verdict,
            Verdict::Diverged { .. }
        ));
        let without = text.replace("expect = \"diverge\"\n", "");
        assert!(!parse(&without).unwrap().run(Selection::All).success());
    }

    #[test]
    fn parse_errors_have_positions() {
        let err = parse("name = \"x\"\n[defaults]\nseed = \"abc\"\n").unwrap_err();
        assert!(
            matches!(
                err,
                ScenarioError::Parse {
                    line: 3,
                    column: 8,
                    ..
                }
            ),
            "{err:?}"
        );
        let err = parse("name = \"x\"\n[[space]]\nname = \"S\"\n").unwrap_err();
        assert!(
            matches!(err, ScenarioError::Parse { line: 2, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn false_declarations_are_rejected_at_load() {
        let text = HALVING.replace("matrix = [[0.5]]", "matrix = [[0.9]]");
        let err = parse(&text).unwrap_err();
        assert!(
            matches!(err, ScenarioError::Validation { ref context, .. } if context == "operator `half`")
        );
    }

    #[test]
    fn overrides_replace_defaults() {
        let o = Overrides {
            seed: Some(7),
            budget: Some("w*2".parse().unwrap()),
            tolerance: Some(1e-6),
        };
        let s = Scenario::parse(HALVING, &o).unwrap();
        assert_eq!(s.defaults().seed, 7);
        assert_eq!(s.defaults().budget.to_string(), "w*2");
        let report = s.run(Selection::All);
        assert_eq!(report.runs[0].record.budget.to_string(), "w*2");
    }

    #[test]
    fn artifacts_are_deterministic() {
        let a = parse(HALVING).unwrap().run(Selection::All).artifacts();
        let b = parse(HALVING).unwrap().run(Selection::All).artifacts();
        assert_eq!(a, b);
        let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "scenario.json",
                "from-zero.trace.jsonl",
                "from-zero.result.json"
            ]
        );
    }

    #[test]
    fn result_records_round_trip() {
        let report = parse(HALVING).unwrap().run(Selection::All);
        let text = &report.runs[0].artifacts.last().unwrap().1;
        let back: ResultRecord = serde_json::from_str(text).unwrap();
        assert_eq!(back, report.runs[0].record);
    }
}
