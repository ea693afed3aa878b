//! State spaces, self-maps on them, and the checks that gate an operator's
//! declared kind before the engine will iterate it.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ordinal::Ordinal;

/// Largest base set for a powerset lattice (carrier of 2¹⁶ elements).
pub const MAX_POWERSET_BASE: usize = 16;
/// Largest explicitly tabulated lattice.
pub const MAX_EXPLICIT_ELEMENTS: usize = 256;
/// Exhaustive monotonicity checks refuse lattices with more comparable pairs.
pub const MAX_COMPARABLE_PAIRS: usize = 1 << 12;
/// Lattice laws are checked exhaustively at load up to this carrier size.
pub const LAW_CHECK_LIMIT: usize = 64;

pub const DEFAULT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpaceError {
    #[error("operator `{operator}` is not defined on space `{space}`")]
    SpaceMismatch { operator: String, space: String },
    #[error("contraction factor {0} is not in (0, 1)")]
    BadFactor(f64),
    #[error("{what} too large: {size} (limit {limit})")]
    TooLarge {
        what: &'static str,
        size: usize,
        limit: usize,
    },
    #[error("not a lattice: {0}")]
    NotALattice(String),
    #[error("invalid point for space `{space}`: {message}")]
    InvalidPoint { space: String, message: String },
    #[error("operator `{operator}` declared monotone but {lower} <= {upper} maps out of order")]
    NotMonotone {
        operator: String,
        lower: String,
        upper: String,
    },
    #[error("operator `{operator}` declared contraction {factor} but a sampled pair stretches by {ratio}")]
    NotContraction {
        operator: String,
        factor: f64,
        ratio: f64,
    },
    #[error("kind `{kind}` cannot be declared on a {space} space")]
    KindMismatch { kind: String, space: &'static str },
    #[error("invalid space declaration: {0}")]
    Invalid(String),
}

/// How two states are compared for equality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum CheckMode {
    Exact,
    Tolerant { tolerance: f64 },
}

impl CheckMode {
    pub fn tolerance(&self) -> f64 {
        match self {
            CheckMode::Exact => 0.0,
            CheckMode::Tolerant { tolerance } => *tolerance,
        }
    }
}

impl fmt::Display for CheckMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckMode::Exact => f.write_str("exact"),
            CheckMode::Tolerant { tolerance } => write!(f, "tolerant({tolerance:e})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    Euclidean,
    Max,
}

/// Self-description of a space, written into trace headers so that a trace
/// can be re-read without the scenario that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum SpaceDescriptor {
    Lattice {
        name: String,
        size: usize,
    },
    Metric {
        name: String,
        dimension: usize,
        distance: DistanceKind,
        tolerance: f64,
    },
    Ordinal {
        name: String,
        cap: Ordinal,
    },
}

impl SpaceDescriptor {
    pub fn name(&self) -> &str {
        match self {
            SpaceDescriptor::Lattice { name, .. }
            | SpaceDescriptor::Metric { name, .. }
            | SpaceDescriptor::Ordinal { name, .. } => name,
        }
    }
}

/// A state space the engine can iterate over.
pub trait Space: fmt::Debug + Send + Sync {
    type Point: Clone + PartialEq + fmt::Debug + Send + Sync;

    fn name(&self) -> &str;
    fn check_mode(&self) -> CheckMode;
    /// A metric on points; for discrete spaces any metric that is zero
    /// exactly on equal points.
    fn distance(&self, a: &Self::Point, b: &Self::Point) -> f64;
    fn render(&self, p: &Self::Point) -> String;
    fn parse_point(&self, text: &str) -> Result<Self::Point, SpaceError>;
    fn contains(&self, p: &Self::Point) -> bool;
    fn descriptor(&self) -> SpaceDescriptor;

    /// A limit for a sequence of limit-stage samples that never agree, when
    /// the space can name one (e.g. the supremum of an increasing run of
    /// ordinals). Samples are in increasing stage order.
    fn extrapolate_limit(&self, _samples: &[Self::Point]) -> Option<Self::Point> {
        None
    }

    /// Equality under the space's check mode.
    fn agree(&self, a: &Self::Point, b: &Self::Point) -> bool {
        self.agree_within(a, b, self.check_mode().tolerance())
    }

    fn agree_within(&self, a: &Self::Point, b: &Self::Point, tolerance: f64) -> bool {
        match self.check_mode() {
            CheckMode::Exact => a == b,
            CheckMode::Tolerant { .. } => self.distance(a, b) <= tolerance,
        }
    }
}

/// An element of a [`FiniteLattice`]. For powerset lattices the index is the
/// membership bitmask over the base set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Elem(pub usize);

#[derive(Debug, Clone, PartialEq)]
enum LatticeRepr {
    Powerset {
        base: Vec<String>,
    },
    Explicit {
        elements: Vec<String>,
        leq: Vec<Vec<bool>>,
        join: Vec<Vec<usize>>,
        meet: Vec<Vec<usize>>,
        bottom: usize,
        top: usize,
    },
}

/// A finite lattice, either the powerset of a small base set or an explicit
/// carrier ordered by the reflexive-transitive closure of a covering relation.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteLattice {
    name: String,
    repr: LatticeRepr,
}

impl FiniteLattice {
    pub fn powerset<S: Into<String>>(
        name: impl Into<String>,
        base: impl IntoIterator<Item = S>,
    ) -> Result<Self, SpaceError> {
        let base: Vec<String> = base.into_iter().map(Into::into).collect();
        if base.len() > MAX_POWERSET_BASE {
            return Err(SpaceError::TooLarge {
                what: "powerset base",
                size: base.len(),
                limit: MAX_POWERSET_BASE,
            });
        }
        check_names(&base)?;
        Ok(FiniteLattice {
            name: name.into(),
            repr: LatticeRepr::Powerset { base },
        })
    }

    /// Builds a lattice from its Hasse diagram. `covers` lists `(lower,
    /// upper)` pairs; the order is their reflexive-transitive closure.
    pub fn from_covers<S: Into<String>>(
        name: impl Into<String>,
        elements: impl IntoIterator<Item = S>,
        covers: &[(String, String)],
    ) -> Result<Self, SpaceError> {
        let elements: Vec<String> = elements.into_iter().map(Into::into).collect();
        let n = elements.len();
        if n == 0 {
            return Err(SpaceError::NotALattice("empty carrier".into()));
        }
        if n > MAX_EXPLICIT_ELEMENTS {
            return Err(SpaceError::TooLarge {
                what: "explicit lattice",
                size: n,
                limit: MAX_EXPLICIT_ELEMENTS,
            });
        }
        check_names(&elements)?;
        let index: BTreeMap<&str, usize> = elements
            .iter()
            .enumerate()
            .map(|(i, e)| (e.as_str(), i))
            .collect();
        let mut leq = vec![vec![false; n]; n];
        for (i, row) in leq.iter_mut().enumerate() {
            row[i] = true;
        }
        for (lo, hi) in covers {
            let lookup = |e: &String| {
                index.get(e.as_str()).copied().ok_or_else(|| {
                    SpaceError::NotALattice(format!("unknown element `{e}` in covers"))
                })
            };
            leq[lookup(lo)?][lookup(hi)?] = true;
        }
        for k in 0..n {
            for i in 0..n {
                if leq[i][k] {
                    let row = leq[k].clone();
                    for (cell, &above) in leq[i].iter_mut().zip(&row) {
                        *cell |= above;
                    }
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if leq[i][j] && leq[j][i] {
                    return Err(SpaceError::NotALattice(format!(
                        "`{}` and `{}` are mutually below each other",
                        elements[i], elements[j]
                    )));
                }
            }
        }
        let bound = |i: usize, j: usize, upper: bool| -> Result<usize, SpaceError> {
            let candidates: Vec<usize> = (0..n)
                .filter(|&k| {
                    if upper {
                        leq[i][k] && leq[j][k]
                    } else {
                        leq[k][i] && leq[k][j]
                    }
                })
                .collect();
            candidates
                .iter()
                .copied()
                .find(|&k| {
                    candidates
                        .iter()
                        .all(|&m| if upper { leq[k][m] } else { leq[m][k] })
                })
                .ok_or_else(|| {
                    SpaceError::NotALattice(format!(
                        "`{}` and `{}` have no {}",
                        elements[i],
                        elements[j],
                        if upper {
                            "least upper bound"
                        } else {
                            "greatest lower bound"
                        }
                    ))
                })
        };
        let mut join = vec![vec![0; n]; n];
        let mut meet = vec![vec![0; n]; n];
        for i in 0..n {
            for j in 0..n {
                join[i][j] = bound(i, j, true)?;
                meet[i][j] = bound(i, j, false)?;
            }
        }
        let bottom = (0..n).fold(0, |acc, k| meet[acc][k]);
        let top = (0..n).fold(0, |acc, k| join[acc][k]);
        let lattice = FiniteLattice {
            name: name.into(),
            repr: LatticeRepr::Explicit {
                elements,
                leq,
                join,
                meet,
                bottom,
                top,
            },
        };
        if n <= LAW_CHECK_LIMIT {
            lattice.check_laws()?;
        }
        Ok(lattice)
    }

    pub fn size(&self) -> usize {
        match &self.repr {
            LatticeRepr::Powerset { base } => 1 << base.len(),
            LatticeRepr::Explicit { elements, .. } => elements.len(),
        }
    }

    pub fn elements(&self) -> impl Iterator<Item = Elem> + '_ {
        (0..self.size()).map(Elem)
    }

    pub fn is_powerset(&self) -> bool {
        matches!(self.repr, LatticeRepr::Powerset { .. })
    }

    /// Base set of a powerset lattice.
    pub fn base(&self) -> Option<&[String]> {
        match &self.repr {
            LatticeRepr::Powerset { base } => Some(base),
            LatticeRepr::Explicit { .. } => None,
        }
    }

    pub fn leq(&self, a: Elem, b: Elem) -> bool {
        match &self.repr {
            LatticeRepr::Powerset { .. } => a.0 & !b.0 == 0,
            LatticeRepr::Explicit { leq, .. } => leq[a.0][b.0],
        }
    }

    pub fn join(&self, a: Elem, b: Elem) -> Elem {
        match &self.repr {
            LatticeRepr::Powerset { .. } => Elem(a.0 | b.0),
            LatticeRepr::Explicit { join, .. } => Elem(join[a.0][b.0]),
        }
    }

    pub fn meet(&self, a: Elem, b: Elem) -> Elem {
        match &self.repr {
            LatticeRepr::Powerset { .. } => Elem(a.0 & b.0),
            LatticeRepr::Explicit { meet, .. } => Elem(meet[a.0][b.0]),
        }
    }

    pub fn bottom(&self) -> Elem {
        match &self.repr {
            LatticeRepr::Powerset { .. } => Elem(0),
            LatticeRepr::Explicit { bottom, .. } => Elem(*bottom),
        }
    }

    pub fn top(&self) -> Elem {
        match &self.repr {
            LatticeRepr::Powerset { base } => Elem((1 << base.len()) - 1),
            LatticeRepr::Explicit { top, .. } => Elem(*top),
        }
    }

    /// The powerset element containing exactly `members`.
    pub fn subset(&self, members: &[&str]) -> Result<Elem, SpaceError> {
        let base = self.base().ok_or_else(|| SpaceError::InvalidPoint {
            space: self.name.clone(),
            message: "not a powerset lattice".into(),
        })?;
        members.iter().try_fold(Elem(0), |acc, m| {
            let i = base
                .iter()
                .position(|b| b == m)
                .ok_or_else(|| SpaceError::InvalidPoint {
                    space: self.name.clone(),
                    message: format!("`{m}` is not in the base set"),
                })?;
            Ok(Elem(acc.0 | (1 << i)))
        })
    }

    /// Exhaustive check of commutativity, associativity and absorption.
    pub fn check_laws(&self) -> Result<(), SpaceError> {
        let fail = |law: &str, xs: &[Elem]| {
            let names: Vec<String> = xs.iter().map(|x| self.render(x)).collect();
            Err(SpaceError::NotALattice(format!(
                "{law} fails at ({})",
                names.join(", ")
            )))
        };
        for a in self.elements() {
            for b in self.elements() {
                if self.join(a, b) != self.join(b, a) || self.meet(a, b) != self.meet(b, a) {
                    return fail("commutativity", &[a, b]);
                }
                if self.join(a, self.meet(a, b)) != a || self.meet(a, self.join(a, b)) != a {
                    return fail("absorption", &[a, b]);
                }
                if self.leq(a, b) != (self.join(a, b) == b) {
                    return fail("order/join consistency", &[a, b]);
                }
                for c in self.elements() {
                    if self.join(self.join(a, b), c) != self.join(a, self.join(b, c))
                        || self.meet(self.meet(a, b), c) != self.meet(a, self.meet(b, c))
                    {
                        return fail("associativity", &[a, b, c]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_names(names: &[String]) -> Result<(), SpaceError> {
    let mut seen = std::collections::BTreeSet::new();
    for n in names {
        if n.is_empty() || n.contains([',', '{', '}', ' ']) {
            return Err(SpaceError::Invalid(format!("bad element name `{n}`")));
        }
        if !seen.insert(n.as_str()) {
            return Err(SpaceError::Invalid(format!("duplicate element `{n}`")));
        }
    }
    Ok(())
}

impl Space for FiniteLattice {
    type Point = Elem;

    fn name(&self) -> &str {
        &self.name
    }

    fn check_mode(&self) -> CheckMode {
        CheckMode::Exact
    }

    /// Symmetric-difference size on powersets, discrete metric otherwise.
    fn distance(&self, a: &Elem, b: &Elem) -> f64 {
        match &self.repr {
            LatticeRepr::Powerset { .. } => (a.0 ^ b.0).count_ones() as f64,
            LatticeRepr::Explicit { .. } => f64::from(u8::from(a != b)),
        }
    }

    fn render(&self, p: &Elem) -> String {
        match &self.repr {
            LatticeRepr::Powerset { base } => {
                let members: Vec<&str> = base
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| p.0 & (1 << i) != 0)
                    .map(|(_, b)| b.as_str())
                    .collect();
                format!("{{{}}}", members.join(","))
            }
            LatticeRepr::Explicit { elements, .. } => elements[p.0].clone(),
        }
    }

    fn parse_point(&self, text: &str) -> Result<Elem, SpaceError> {
        let text = text.trim();
        match &self.repr {
            LatticeRepr::Powerset { .. } => {
                let inner = text
                    .strip_prefix('{')
                    .and_then(|t| t.strip_suffix('}'))
                    .ok_or_else(|| SpaceError::InvalidPoint {
                        space: self.name.clone(),
                        message: format!("expected `{{...}}`, got `{text}`"),
                    })?;
                let members: Vec<&str> = inner
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .collect();
                self.subset(&members)
            }
            LatticeRepr::Explicit { elements, .. } => elements
                .iter()
                .position(|e| e == text)
                .map(Elem)
                .ok_or_else(|| SpaceError::InvalidPoint {
                    space: self.name.clone(),
                    message: format!("unknown element `{text}`"),
                }),
        }
    }

    fn contains(&self, p: &Elem) -> bool {
        p.0 < self.size()
    }

    fn descriptor(&self) -> SpaceDescriptor {
        SpaceDescriptor::Lattice {
            name: self.name.clone(),
            size: self.size(),
        }
    }
}

/// Real vectors of a fixed dimension with a builtin metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSpaceSpec {
    name: String,
    dimension: usize,
    distance: DistanceKind,
    tolerance: f64,
}

impl MetricSpaceSpec {
    pub fn new(
        name: impl Into<String>,
        dimension: usize,
        distance: DistanceKind,
        tolerance: f64,
    ) -> Result<Self, SpaceError> {
        if dimension == 0 {
            return Err(SpaceError::Invalid("dimension must be positive".into()));
        }
        if !(tolerance > 0.0 && tolerance.is_finite()) {
            return Err(SpaceError::Invalid(format!(
                "tolerance must be positive, got {tolerance}"
            )));
        }
        Ok(MetricSpaceSpec {
            name: name.into(),
            dimension,
            distance,
            tolerance,
        })
    }

    /// ℝ with the usual metric and the default tolerance.
    pub fn real_line(name: impl Into<String>) -> Self {
        Self::new(name, 1, DistanceKind::Euclidean, DEFAULT_TOLERANCE).expect("valid")
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn distance_kind(&self) -> DistanceKind {
        self.distance
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }
}

/// Formats a float with 17 significant digits, enough to round-trip `f64`.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

impl Space for MetricSpaceSpec {
    type Point = DVector<f64>;

    fn name(&self) -> &str {
        &self.name
    }

    fn check_mode(&self) -> CheckMode {
        CheckMode::Tolerant {
            tolerance: self.tolerance,
        }
    }

    fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let diff = a - b;
        match self.distance {
            DistanceKind::Euclidean => diff.norm(),
            DistanceKind::Max => diff.amax(),
        }
    }

    fn render(&self, p: &DVector<f64>) -> String {
        let parts: Vec<String> = p.iter().map(|x| format_real(*x)).collect();
        format!("[{}]", parts.join(", "))
    }

    fn parse_point(&self, text: &str) -> Result<DVector<f64>, SpaceError> {
        let text = text.trim();
        let inner = text
            .strip_prefix('[')
            .and_then(|t| t.strip_suffix(']'))
            .unwrap_or(text);
        let invalid = |message: String| SpaceError::InvalidPoint {
            space: self.name.clone(),
            message,
        };
        let coords = inner
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| invalid(format!("`{}` is not a number", s.trim())))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let p = DVector::from_vec(coords);
        if !self.contains(&p) {
            return Err(invalid(format!(
                "expected {} finite coordinates in `{text}`",
                self.dimension
            )));
        }
        Ok(p)
    }

    fn contains(&self, p: &DVector<f64>) -> bool {
        p.len() == self.dimension && p.iter().all(|x| x.is_finite())
    }

    fn descriptor(&self) -> SpaceDescriptor {
        SpaceDescriptor::Metric {
            name: self.name.clone(),
            dimension: self.dimension,
            distance: self.distance,
            tolerance: self.tolerance,
        }
    }
}

/// The ordinals `{α : α ≤ cap}` as a state space, ordered and complete, so
/// increasing runs have a supremum.
#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalSpace {
    name: String,
    cap: Ordinal,
}

impl OrdinalSpace {
    pub fn new(name: impl Into<String>, cap: Ordinal) -> Self {
        OrdinalSpace {
            name: name.into(),
            cap,
        }
    }

    pub fn cap(&self) -> &Ordinal {
        &self.cap
    }
}

impl Space for OrdinalSpace {
    type Point = Ordinal;

    fn name(&self) -> &str {
        &self.name
    }

    fn check_mode(&self) -> CheckMode {
        CheckMode::Exact
    }

    fn distance(&self, a: &Ordinal, b: &Ordinal) -> f64 {
        f64::from(u8::from(a != b))
    }

    fn render(&self, p: &Ordinal) -> String {
        p.to_string()
    }

    fn parse_point(&self, text: &str) -> Result<Ordinal, SpaceError> {
        let o: Ordinal = text.parse().map_err(|e| SpaceError::InvalidPoint {
            space: self.name.clone(),
            message: format!("{e}"),
        })?;
        if !self.contains(&o) {
            return Err(SpaceError::InvalidPoint {
                space: self.name.clone(),
                message: format!("{o} exceeds the cap {}", self.cap),
            });
        }
        Ok(o)
    }

    fn contains(&self, p: &Ordinal) -> bool {
        *p <= self.cap
    }

    fn descriptor(&self) -> SpaceDescriptor {
        SpaceDescriptor::Ordinal {
            name: self.name.clone(),
            cap: self.cap.clone(),
        }
    }

    /// Recognises runs `γ + ω^e·a, γ + ω^e·(a+k), γ + ω^e·(a+2k), …` and
    /// returns their supremum `γ + ω^(e+1)`, capped.
    fn extrapolate_limit(&self, samples: &[Ordinal]) -> Option<Ordinal> {
        if samples.len() < 3 {
            return None;
        }
        let exponent = samples.last()?.terms().last()?.exponent().clone();
        // write each sample as prefix + ω^exponent·c, with c = 0 when the
        // sample has no such term
        let split = |o: &Ordinal| -> Option<(Ordinal, num_bigint::BigUint)> {
            match o.terms().split_last() {
                Some((last, prefix)) if *last.exponent() == exponent => {
                    let prefix = Ordinal::from_terms(
                        prefix
                            .iter()
                            .map(|t| (t.exponent().clone(), t.coefficient().clone())),
                    )
                    .ok()?;
                    Some((prefix, last.coefficient().clone()))
                }
                Some((last, _)) if *last.exponent() < exponent => None,
                _ => Some((o.clone(), num_bigint::BigUint::ZERO)),
            }
        };
        let parts: Vec<_> = samples.iter().map(split).collect::<Option<Vec<_>>>()?;
        let prefix = &parts[0].0;
        if parts.iter().any(|(p, _)| p != prefix) {
            return None;
        }
        let coeffs: Vec<_> = parts.iter().map(|(_, c)| c.clone()).collect();
        let steps: Vec<_> = coeffs
            .windows(2)
            .map(|w| (w[1] > w[0]).then(|| &w[1] - &w[0]))
            .collect::<Option<Vec<_>>>()?;
        if steps.windows(2).any(|w| w[0] != w[1]) {
            return None;
        }
        let sup = prefix.add(&Ordinal::omega_pow(exponent.succ()));
        Some(if sup > self.cap {
            self.cap.clone()
        } else {
            sup
        })
    }
}

/// The declared nature of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OperatorKind {
    /// Order-preserving on a lattice.
    Monotone,
    /// `d(f x, f y) ≤ factor · d(x, y)` on a metric space.
    Contraction { factor: f64 },
    /// No claim; the engine still runs it but certifies nothing about
    /// existence or uniqueness up front.
    Unchecked,
}

impl OperatorKind {
    pub fn factor(&self) -> Option<f64> {
        match self {
            OperatorKind::Contraction { factor } => Some(*factor),
            _ => None,
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatorKind::Monotone => f.write_str("monotone"),
            OperatorKind::Contraction { factor } => write!(f, "contraction({factor})"),
            OperatorKind::Unchecked => f.write_str("unchecked"),
        }
    }
}

pub type MapFn<P> = Arc<dyn Fn(&P) -> P + Send + Sync>;

/// A self-map on a space together with its declared kind.
pub struct Operator<S: Space> {
    name: String,
    space: Arc<S>,
    kind: OperatorKind,
    map: MapFn<S::Point>,
}

impl<S: Space> Clone for Operator<S> {
    fn clone(&self) -> Self {
        Operator {
            name: self.name.clone(),
            space: Arc::clone(&self.space),
            kind: self.kind,
            map: Arc::clone(&self.map),
        }
    }
}

impl<S: Space> fmt::Debug for Operator<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Operator")
            .field("name", &self.name)
            .field("space", &self.space.name())
            .field("kind", &self.kind)
            .finish()
    }
}

impl<S: Space> Operator<S> {
    pub fn new(
        name: impl Into<String>,
        space: Arc<S>,
        kind: OperatorKind,
        map: impl Fn(&S::Point) -> S::Point + Send + Sync + 'static,
    ) -> Self {
        Operator {
            name: name.into(),
            space,
            kind,
            map: Arc::new(map),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn space(&self) -> &Arc<S> {
        &self.space
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn apply(&self, p: &S::Point) -> S::Point {
        (self.map)(p)
    }

    pub fn map_fn(&self) -> MapFn<S::Point> {
        Arc::clone(&self.map)
    }

    fn ensure_on(&self, space: &S) -> Result<(), SpaceError>
    where
        S: PartialEq,
    {
        if *self.space != *space {
            return Err(SpaceError::SpaceMismatch {
                operator: self.name.clone(),
                space: space.name().to_string(),
            });
        }
        Ok(())
    }
}

impl Operator<FiniteLattice> {
    pub fn identity(lat: Arc<FiniteLattice>) -> Self {
        Operator::new("identity", lat, OperatorKind::Monotone, |x: &Elem| *x)
    }

    pub fn constant(lat: Arc<FiniteLattice>, value: Elem) -> Self {
        Operator::new("constant", lat, OperatorKind::Monotone, move |_: &Elem| {
            value
        })
    }

    /// `X ↦ X ∨ s` (union on powersets).
    pub fn join_with(lat: Arc<FiniteLattice>, s: Elem) -> Self {
        let l = Arc::clone(&lat);
        Operator::new("union", lat, OperatorKind::Monotone, move |x: &Elem| {
            l.join(*x, s)
        })
    }

    /// `X ↦ X ∧ s` (intersection on powersets).
    pub fn meet_with(lat: Arc<FiniteLattice>, s: Elem) -> Self {
        let l = Arc::clone(&lat);
        Operator::new("intersect", lat, OperatorKind::Monotone, move |x: &Elem| {
            l.meet(*x, s)
        })
    }

    /// Set complement; antitone, so it is declared unchecked.
    pub fn complement(lat: Arc<FiniteLattice>) -> Result<Self, SpaceError> {
        if !lat.is_powerset() {
            return Err(SpaceError::Invalid(
                "complement needs a powerset lattice".into(),
            ));
        }
        let top = lat.top();
        Ok(Operator::new(
            "complement",
            lat,
            OperatorKind::Unchecked,
            move |x: &Elem| Elem(top.0 & !x.0),
        ))
    }

    /// `X ↦ seed ∪ post_R(X)` (or `pre_R(X)` when `backward`) over a relation
    /// on the base set, given as index pairs.
    pub fn image(
        lat: Arc<FiniteLattice>,
        relation: &[(usize, usize)],
        seed: Elem,
        backward: bool,
    ) -> Result<Self, SpaceError> {
        let n = lat
            .base()
            .ok_or_else(|| SpaceError::Invalid("image needs a powerset lattice".into()))?
            .len();
        if let Some(&(a, b)) = relation.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(SpaceError::Invalid(format!(
                "relation pair ({a}, {b}) out of range"
            )));
        }
        let edges: Vec<(usize, usize)> = relation
            .iter()
            .map(|&(a, b)| if backward { (b, a) } else { (a, b) })
            .collect();
        Ok(Operator::new(
            "image",
            lat,
            OperatorKind::Monotone,
            move |x: &Elem| {
                let mut out = seed.0;
                for &(from, to) in &edges {
                    if x.0 & (1 << from) != 0 {
                        out |= 1 << to;
                    }
                }
                Elem(out)
            },
        ))
    }

    /// An operator given by its full value table.
    pub fn table(
        lat: Arc<FiniteLattice>,
        kind: OperatorKind,
        values: Vec<Elem>,
    ) -> Result<Self, SpaceError> {
        if values.len() != lat.size() || values.iter().any(|v| !lat.contains(v)) {
            return Err(SpaceError::Invalid(format!(
                "table needs {} in-range values",
                lat.size()
            )));
        }
        Ok(Operator::new("table", lat, kind, move |x: &Elem| {
            values[x.0]
        }))
    }

    /// Re-declares the kind, keeping the map.
    pub fn with_kind(mut self, kind: OperatorKind) -> Self {
        self.kind = kind;
        self
    }
}

/// `x ↦ A x + b` on a metric space.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self, SpaceError> {
        if !matrix.is_square() || matrix.nrows() != offset.len() {
            return Err(SpaceError::Invalid(format!(
                "affine map needs a square matrix matching the offset, got {}x{} and {}",
                matrix.nrows(),
                matrix.ncols(),
                offset.len()
            )));
        }
        Ok(AffineMap { matrix, offset })
    }

    pub fn scalar(a: f64, b: f64) -> Self {
        AffineMap {
            matrix: DMatrix::from_element(1, 1, a),
            offset: DVector::from_element(1, b),
        }
    }

    pub fn dimension(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x + &self.offset
    }
}

impl Operator<MetricSpaceSpec> {
    pub fn affine(
        name: impl Into<String>,
        space: Arc<MetricSpaceSpec>,
        kind: OperatorKind,
        map: AffineMap,
    ) -> Result<Self, SpaceError> {
        if map.dimension() != space.dimension() {
            return Err(SpaceError::Invalid(format!(
                "affine map of dimension {} on a {}-dimensional space",
                map.dimension(),
                space.dimension()
            )));
        }
        Ok(Operator::new(name, space, kind, move |x: &DVector<f64>| {
            map.apply(x)
        }))
    }
}

impl Operator<OrdinalSpace> {
    /// `α ↦ min(α + addend, cap)`.
    pub fn clamp_add(space: Arc<OrdinalSpace>, addend: Ordinal) -> Self {
        let cap = space.cap().clone();
        Operator::new(
            "clamp-add",
            space,
            OperatorKind::Unchecked,
            move |a: &Ordinal| {
                let s = a.add(&addend);
                if s > cap {
                    cap.clone()
                } else {
                    s
                }
            },
        )
    }
}

/// Outcome of [`check_monotone`].
#[derive(Debug, Clone, PartialEq)]
pub enum MonotoneCheck {
    Pass {
        pairs: usize,
    },
    /// `lower ≤ upper` but `f(lower) ≰ f(upper)`.
    Violation {
        lower: Elem,
        upper: Elem,
    },
}

/// Exhaustive scan of all comparable pairs.
pub fn check_monotone(
    op: &Operator<FiniteLattice>,
    lat: &FiniteLattice,
) -> Result<MonotoneCheck, SpaceError> {
    op.ensure_on(lat)?;
    let pairs: Vec<(Elem, Elem)> = lat
        .elements()
        .flat_map(|x| lat.elements().map(move |y| (x, y)))
        .filter(|&(x, y)| lat.leq(x, y))
        .take(MAX_COMPARABLE_PAIRS + 1)
        .collect();
    if pairs.len() > MAX_COMPARABLE_PAIRS {
        return Err(SpaceError::TooLarge {
            what: "comparable pairs",
            size: pairs.len(),
            limit: MAX_COMPARABLE_PAIRS,
        });
    }
    for &(x, y) in &pairs {
        if !lat.leq(op.apply(&x), op.apply(&y)) {
            return Ok(MonotoneCheck::Violation { lower: x, upper: y });
        }
    }
    Ok(MonotoneCheck::Pass { pairs: pairs.len() })
}

/// Outcome of [`check_contraction`].
#[derive(Debug, Clone, PartialEq)]
pub enum ContractionCheck {
    Pass {
        samples: usize,
        max_ratio: f64,
    },
    /// The worst sampled pair among those breaking the bound.
    Violation {
        x: DVector<f64>,
        y: DVector<f64>,
        ratio: f64,
    },
}

const SAMPLE_RADIUS: f64 = 100.0;

/// Sampled falsification of `d(f x, f y) ≤ c·d(x, y) + ε`. Deterministic in
/// `seed`. Half the pairs are far apart, half are local perturbations.
pub fn check_contraction(
    op: &Operator<MetricSpaceSpec>,
    m: &MetricSpaceSpec,
    sample_count: usize,
    seed: u64,
) -> Result<ContractionCheck, SpaceError> {
    op.ensure_on(m)?;
    let factor = match op.kind() {
        OperatorKind::Contraction { factor } => factor,
        other => {
            return Err(SpaceError::KindMismatch {
                kind: other.to_string(),
                space: "contraction check on a",
            })
        }
    };
    if !(factor > 0.0 && factor < 1.0) {
        return Err(SpaceError::BadFactor(factor));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = m.dimension();
    let mut worst: Option<(DVector<f64>, DVector<f64>, f64)> = None;
    let mut max_ratio: f64 = 0.0;
    let mut taken = 0;
    while taken < sample_count.max(1) {
        let x = DVector::from_fn(n, |_, _| rng.random_range(-SAMPLE_RADIUS..SAMPLE_RADIUS));
        let y = if rng.random_bool(0.5) {
            let scale = 10f64.powi(-rng.random_range(0..7));
            let dx = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0) * scale);
            &x + dx
        } else {
            DVector::from_fn(n, |_, _| rng.random_range(-SAMPLE_RADIUS..SAMPLE_RADIUS))
        };
        let d = m.distance(&x, &y);
        if d == 0.0 {
            continue;
        }
        taken += 1;
        let d_image = m.distance(&op.apply(&x), &op.apply(&y));
        let ratio = d_image / d;
        max_ratio = max_ratio.max(ratio);
        let violated = d_image.is_nan() || d_image > factor * d + m.tolerance();
        if violated && worst.as_ref().is_none_or(|w| ratio > w.2) {
            worst = Some((x, y, ratio));
        }
    }
    Ok(match worst {
        Some((x, y, ratio)) => ContractionCheck::Violation { x, y, ratio },
        None => ContractionCheck::Pass {
            samples: taken,
            max_ratio,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationConfig {
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            sample_count: 1000,
            seed: 0,
        }
    }
}

/// What backed the acceptance of an operator's declared kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "kebab-case")]
pub enum Evidence {
    /// Every comparable pair was checked.
    Exhaustive { pairs: usize },
    /// Random pairs were checked; the claim is falsifiable, not proven.
    Sampled {
        samples: usize,
        seed: u64,
        max_ratio: f64,
    },
    /// Nothing was claimed.
    Unchecked,
}

/// An operator whose declared kind survived its check.
pub struct Validated<S: Space> {
    op: Operator<S>,
    evidence: Evidence,
}

impl<S: Space> Clone for Validated<S> {
    fn clone(&self) -> Self {
        Validated {
            op: self.op.clone(),
            evidence: self.evidence.clone(),
        }
    }
}

impl<S: Space> fmt::Debug for Validated<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Validated")
            .field("op", &self.op)
            .field("evidence", &self.evidence)
            .finish()
    }
}

impl<S: Space> Validated<S> {
    pub fn evidence(&self) -> &Evidence {
        &self.evidence
    }

    pub fn operator(&self) -> &Operator<S> {
        &self.op
    }
}

impl<S: Space> Deref for Validated<S> {
    type Target = Operator<S>;

    fn deref(&self) -> &Operator<S> {
        &self.op
    }
}

/// Spaces that know how to check the kinds declarable on them.
pub trait Validate: Space + Sized {
    fn validate(
        op: Operator<Self>,
        config: &ValidationConfig,
    ) -> Result<Validated<Self>, SpaceError>;
}

impl<S: Validate> Operator<S> {
    pub fn validate(self, config: &ValidationConfig) -> Result<Validated<S>, SpaceError> {
        S::validate(self, config)
    }
}

impl Validate for FiniteLattice {
    fn validate(op: Operator<Self>, _: &ValidationConfig) -> Result<Validated<Self>, SpaceError> {
        let evidence = match op.kind() {
            OperatorKind::Monotone => match check_monotone(&op, &Arc::clone(op.space()))? {
                MonotoneCheck::Pass { pairs } => Evidence::Exhaustive { pairs },
                MonotoneCheck::Violation { lower, upper } => {
                    return Err(SpaceError::NotMonotone {
                        operator: op.name().to_string(),
                        lower: op.space().render(&lower),
                        upper: op.space().render(&upper),
                    })
                }
            },
            OperatorKind::Unchecked => Evidence::Unchecked,
            kind @ OperatorKind::Contraction { .. } => {
                return Err(SpaceError::KindMismatch {
                    kind: kind.to_string(),
                    space: "lattice",
                })
            }
        };
        Ok(Validated { op, evidence })
    }
}

impl Validate for MetricSpaceSpec {
    fn validate(
        op: Operator<Self>,
        config: &ValidationConfig,
    ) -> Result<Validated<Self>, SpaceError> {
        let evidence = match op.kind() {
            OperatorKind::Contraction { factor } => {
                let space = Arc::clone(op.space());
                match check_contraction(&op, &space, config.sample_count, config.seed)? {
                    ContractionCheck::Pass { samples, max_ratio } => Evidence::Sampled {
                        samples,
                        seed: config.seed,
                        max_ratio,
                    },
                    ContractionCheck::Violation { ratio, .. } => {
                        return Err(SpaceError::NotContraction {
                            operator: op.name().to_string(),
                            factor,
                            ratio,
                        })
                    }
                }
            }
            OperatorKind::Unchecked => Evidence::Unchecked,
            kind @ OperatorKind::Monotone => {
                return Err(SpaceError::KindMismatch {
                    kind: kind.to_string(),
                    space: "metric",
                })
            }
        };
        Ok(Validated { op, evidence })
    }
}

impl Validate for OrdinalSpace {
    fn validate(op: Operator<Self>, _: &ValidationConfig) -> Result<Validated<Self>, SpaceError> {
        match op.kind() {
            OperatorKind::Unchecked => Ok(Validated {
                op,
                evidence: Evidence::Unchecked,
            }),
            kind => Err(SpaceError::KindMismatch {
                kind: kind.to_string(),
                space: "ordinal",
            }),
        }
    }
}

/// Numeric disagreement recorded at each stage of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscrepancyMeasure {
    /// Distance between a state and its image, `d(x, φ(x))`.
    #[default]
    Residual,
    /// Distance to the converged value, filled in after the run.
    DistanceToValue,
    /// Distance between a game state and the signal it is facing.
    SignalGap,
}

impl DiscrepancyMeasure {
    pub fn label(&self) -> &'static str {
        match self {
            DiscrepancyMeasure::Residual => "residual",
            DiscrepancyMeasure::DistanceToValue => "distance-to-value",
            DiscrepancyMeasure::SignalGap => "signal-gap",
        }
    }
}
