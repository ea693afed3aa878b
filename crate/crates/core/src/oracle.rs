//! Brute-force ground truth for small instances.
//!
//! Nothing here calls into the engine: fixed points are found by scanning
//! whole carriers, and reachability by plain Kleene iteration or graph
//! search, so engine results can be checked against them.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use nalgebra::DVector;
use thiserror::Error;

use crate::space::{
    Elem, FiniteLattice, MetricSpaceSpec, Operator, OperatorKind, Space, SpaceError,
};

/// Carriers larger than this are not scanned.
pub const MAX_SCAN: usize = 1 << 16;
/// Reachability results are cross-checked on the powerset lattice up to
/// this many states.
pub const CROSS_CHECK_STATES: usize = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("carrier of {size} elements exceeds the scan limit {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error("no {0} fixed point; the operator cannot be monotone")]
    NoFixpoint(&'static str),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("oracles disagree: {0}")]
    Inconsistent(String),
    #[error("invalid transition system: {0}")]
    Invalid(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// A finite transition system with named state labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSystem {
    states: Vec<String>,
    transitions: Vec<(usize, usize)>,
    labels: BTreeMap<String, BTreeSet<usize>>,
}

impl TransitionSystem {
    pub fn new(
        states: Vec<String>,
        edges: &[(String, String)],
        labels: &BTreeMap<String, Vec<String>>,
    ) -> Result<Self, OracleError> {
        let index: HashMap<&str, usize> = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        if index.len() != states.len() {
            return Err(OracleError::Invalid("duplicate state names".into()));
        }
        let lookup = |s: &String| {
            index
                .get(s.as_str())
                .copied()
                .ok_or_else(|| OracleError::Invalid(format!("unknown state `{s}`")))
        };
        let transitions = edges
            .iter()
            .map(|(a, b)| Ok((lookup(a)?, lookup(b)?)))
            .collect::<Result<Vec<_>, OracleError>>()?;
        let labels = labels
            .iter()
            .map(|(name, members)| {
                let set = members.iter().map(lookup).collect::<Result<_, _>>()?;
                Ok((name.clone(), set))
            })
            .collect::<Result<_, OracleError>>()?;
        Ok(TransitionSystem {
            states,
            transitions,
            labels,
        })
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn transitions(&self) -> &[(usize, usize)] {
        &self.transitions
    }

    pub fn label(&self, name: &str) -> Result<&BTreeSet<usize>, OracleError> {
        self.labels
            .get(name)
            .ok_or_else(|| OracleError::UnknownLabel(name.to_string()))
    }

    pub fn names(&self, set: &BTreeSet<usize>) -> Vec<String> {
        set.iter().map(|&i| self.states[i].clone()).collect()
    }
}

/// Every `x` with `op(x) = x`, in carrier order.
pub fn enumerate_fixpoints(
    op: &Operator<FiniteLattice>,
    lat: &FiniteLattice,
) -> Result<Vec<Elem>, OracleError> {
    if lat.size() > MAX_SCAN {
        return Err(OracleError::TooLarge {
            size: lat.size(),
            limit: MAX_SCAN,
        });
    }
    if op.space().as_ref() != lat {
        return Err(SpaceError::SpaceMismatch {
            operator: op.name().to_string(),
            space: lat.name().to_string(),
        }
        .into());
    }
    Ok(lat.elements().filter(|x| op.apply(x) == *x).collect())
}

pub fn lfp_bruteforce(
    op: &Operator<FiniteLattice>,
    lat: &FiniteLattice,
) -> Result<Elem, OracleError> {
    let fixed = enumerate_fixpoints(op, lat)?;
    fixed
        .iter()
        .copied()
        .find(|&x| fixed.iter().all(|&y| lat.leq(x, y)))
        .ok_or(OracleError::NoFixpoint("least"))
}

pub fn gfp_bruteforce(
    op: &Operator<FiniteLattice>,
    lat: &FiniteLattice,
) -> Result<Elem, OracleError> {
    let fixed = enumerate_fixpoints(op, lat)?;
    fixed
        .iter()
        .copied()
        .find(|&x| fixed.iter().all(|&y| lat.leq(y, x)))
        .ok_or(OracleError::NoFixpoint("greatest"))
}

/// `μX. target ∪ pre(X)`: the states that can reach `target`.
pub fn mu_reachability(
    ts: &TransitionSystem,
    target: &str,
) -> Result<BTreeSet<usize>, OracleError> {
    let goal = ts.label(target)?;
    let mut current: BTreeSet<usize> = BTreeSet::new();
    loop {
        let mut next = goal.clone();
        next.extend(
            ts.transitions
                .iter()
                .filter(|(_, to)| current.contains(to))
                .map(|(from, _)| *from),
        );
        if next == current {
            break;
        }
        current = next;
    }
    if ts.states.len() <= CROSS_CHECK_STATES {
        let lat = Arc::new(FiniteLattice::powerset("reach", ts.states.clone())?);
        let seed = Elem(goal.iter().fold(0, |m, &i| m | (1 << i)));
        let op = Operator::image(Arc::clone(&lat), &ts.transitions, seed, true)?;
        let least = lfp_bruteforce(&op, &lat)?;
        let mask = current.iter().fold(0, |m, &i| m | (1 << i));
        if least.0 != mask {
            return Err(OracleError::Inconsistent(format!(
                "Kleene iteration gives {} but the exhaustive scan gives {}",
                lat.render(&Elem(mask)),
                lat.render(&least)
            )));
        }
    }
    Ok(current)
}

/// Backward breadth-first search from the target states.
pub fn reachable_by_search(
    ts: &TransitionSystem,
    target: &str,
) -> Result<BTreeSet<usize>, OracleError> {
    let goal = ts.label(target)?;
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); ts.states.len()];
    for &(from, to) in &ts.transitions {
        preds[to].push(from);
    }
    let mut seen: BTreeSet<usize> = goal.clone();
    let mut queue: VecDeque<usize> = goal.iter().copied().collect();
    while let Some(s) = queue.pop_front() {
        for &p in &preds[s] {
            if seen.insert(p) {
                queue.push_back(p);
            }
        }
    }
    Ok(seen)
}

/// A metric self-map restricted to the finite set of floating-point points
/// its orbits visit, viewed as a chain lattice.
#[derive(Debug, Clone)]
pub struct Discretized {
    pub lattice: Arc<FiniteLattice>,
    /// `points[i]` is the point behind chain element `i`.
    pub points: Vec<DVector<f64>>,
    pub op: Operator<FiniteLattice>,
    pub space: Arc<MetricSpaceSpec>,
}

impl Discretized {
    pub fn point(&self, e: Elem) -> &DVector<f64> {
        &self.points[e.0]
    }

    /// Exact fixed points of the table, grouped when they agree within the
    /// space tolerance. Rounding can leave several neighbouring floats fixed
    /// where the real map has one fixed point.
    pub fn fixed_classes(&self) -> Result<Vec<Vec<Elem>>, OracleError> {
        let mut classes: Vec<Vec<Elem>> = Vec::new();
        for e in enumerate_fixpoints(&self.op, &self.lattice)? {
            let p = self.point(e);
            match classes
                .iter_mut()
                .find(|c| c.iter().any(|&f| self.space.agree(p, self.point(f))))
            {
                Some(class) => class.push(e),
                None => classes.push(vec![e]),
            }
        }
        Ok(classes)
    }
}

/// Closes the seeds under the operator in floating point. Fails when the
/// closure grows past `cap` points (orbits that never revisit a point).
pub fn discretize_orbits(
    op: &Operator<MetricSpaceSpec>,
    seeds: &[DVector<f64>],
    cap: usize,
) -> Result<Discretized, OracleError> {
    let cap = cap.min(crate::space::MAX_EXPLICIT_ELEMENTS);
    let key = |p: &DVector<f64>| p.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    let mut seen: HashMap<Vec<u64>, DVector<f64>> = HashMap::new();
    for seed in seeds {
        if !op.space().contains(seed) {
            return Err(SpaceError::InvalidPoint {
                space: op.space().name().to_string(),
                message: format!("{seed:?}"),
            }
            .into());
        }
        let mut x = seed.clone();
        while let std::collections::hash_map::Entry::Vacant(slot) = seen.entry(key(&x)) {
            slot.insert(x.clone());
            if seen.len() > cap {
                return Err(OracleError::TooLarge {
                    size: seen.len(),
                    limit: cap,
                });
            }
            x = op.apply(&x);
            if !x.iter().all(|c| c.is_finite()) {
                return Err(OracleError::Invalid("orbit left the finite reals".into()));
            }
        }
    }
    let mut points: Vec<DVector<f64>> = seen.into_values().collect();
    points.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let names: Vec<String> = (0..points.len()).map(|i| format!("p{i}")).collect();
    let covers: Vec<(String, String)> = names
        .windows(2)
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect();
    let lattice = Arc::new(FiniteLattice::from_covers(
        format!("{}-orbits", op.space().name()),
        names,
        &covers,
    )?);
    let index: HashMap<Vec<u64>, usize> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (key(p), i))
        .collect();
    let table = points
        .iter()
        .map(|p| Elem(index[&key(&op.apply(p))]))
        .collect();
    let op_space = op.space();
    let op = Operator::table(Arc::clone(&lattice), OperatorKind::Unchecked, table)?;
    Ok(Discretized {
        lattice,
        points,
        op,
        space: Arc::clone(op_space),
    })
}
