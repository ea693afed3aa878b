//! Ordinals below ε₀ in Cantor normal form.
//!
//! An [`Ordinal`] is a finite sum `ω^e₁·c₁ + … + ω^eₖ·cₖ` with strictly
//! decreasing exponents (themselves ordinals) and positive natural
//! coefficients. Every value is therefore below ε₀, the first ordinal closed
//! under `α ↦ ω^α`.
//!
//! Limit ordinals are made computable through [`Ordinal::fundamental_seq`],
//! which uses the Wainer assignment of canonical cofinal sequences.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OrdinalError {
    #[error("parse error at column {column}: {message}")]
    Parse { column: usize, message: String },
    #[error("{0} is not a limit ordinal")]
    NotALimit(Ordinal),
    #[error("not in Cantor normal form: {0}")]
    NotCnf(String),
}

/// One `ω^exponent · coefficient` summand of a normal form.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Term {
    exponent: Ordinal,
    coefficient: BigUint,
}

impl Term {
    pub fn exponent(&self) -> &Ordinal {
        &self.exponent
    }

    pub fn coefficient(&self) -> &BigUint {
        &self.coefficient
    }
}

/// An ordinal below ε₀. The empty term list is zero.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Ordinal {
    terms: Vec<Term>,
}

/// Zero, successor or limit: the three cases of transfinite recursion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OrdinalClass {
    Zero,
    Successor(Ordinal),
    Limit,
}

impl Ordinal {
    pub fn zero() -> Self {
        Ordinal { terms: Vec::new() }
    }

    pub fn one() -> Self {
        Self::from(1u64)
    }

    /// ω
    pub fn omega() -> Self {
        Self::omega_pow(Self::one())
    }

    /// ω^exponent
    pub fn omega_pow(exponent: Ordinal) -> Self {
        Ordinal {
            terms: vec![Term {
                exponent,
                coefficient: BigUint::one(),
            }],
        }
    }

    pub fn natural(n: impl Into<BigUint>) -> Self {
        let n = n.into();
        if n.is_zero() {
            return Self::zero();
        }
        Ordinal {
            terms: vec![Term {
                exponent: Self::zero(),
                coefficient: n,
            }],
        }
    }

    /// Builds an ordinal from `(exponent, coefficient)` pairs, rejecting
    /// anything that is not already in normal form.
    pub fn from_terms(
        terms: impl IntoIterator<Item = (Ordinal, BigUint)>,
    ) -> Result<Self, OrdinalError> {
        let terms: Vec<Term> = terms
            .into_iter()
            .map(|(exponent, coefficient)| Term {
                exponent,
                coefficient,
            })
            .collect();
        if let Some(t) = terms.iter().find(|t| t.coefficient.is_zero()) {
            return Err(OrdinalError::NotCnf(format!(
                "zero coefficient on ω^{}",
                t.exponent
            )));
        }
        if terms.windows(2).any(|w| w[0].exponent <= w[1].exponent) {
            return Err(OrdinalError::NotCnf(
                "exponents must be strictly decreasing".into(),
            ));
        }
        Ok(Ordinal { terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.terms.iter().all(|t| t.exponent.is_zero())
    }

    /// The value as a machine integer, if finite and small enough.
    pub fn to_u64(&self) -> Option<u64> {
        match self.terms.as_slice() {
            [] => Some(0),
            [t] if t.exponent.is_zero() => t.coefficient.to_u64(),
            _ => None,
        }
    }

    /// Splits `self` into `γ + k` where `γ` is zero or a limit and `k` finite.
    pub fn split_finite(&self) -> (Ordinal, BigUint) {
        match self.terms.last() {
            Some(t) if t.exponent.is_zero() => {
                let base = Ordinal {
                    terms: self.terms[..self.terms.len() - 1].to_vec(),
                };
                (base, t.coefficient.clone())
            }
            _ => (self.clone(), BigUint::zero()),
        }
    }

    /// Total order of ordinals.
    pub fn compare(&self, other: &Ordinal) -> Ordering {
        self.cmp(other)
    }

    /// Ordinal sum `self + other` (not commutative: `1 + ω = ω`).
    pub fn add(&self, other: &Ordinal) -> Ordinal {
        let Some(head) = other.terms.first() else {
            return self.clone();
        };
        let mut terms: Vec<Term> = self
            .terms
            .iter()
            .take_while(|t| t.exponent >= head.exponent)
            .cloned()
            .collect();
        let mut rest = other.terms.iter();
        if let Some(last) = terms.last_mut() {
            if last.exponent == head.exponent {
                last.coefficient += &head.coefficient;
                rest.next();
            }
        }
        terms.extend(rest.cloned());
        Ordinal { terms }
    }

    /// `self · n` for a natural `n`.
    pub fn nat_scale(&self, n: impl Into<BigUint>) -> Ordinal {
        let n = n.into();
        if n.is_zero() || self.is_zero() {
            return Ordinal::zero();
        }
        let mut terms = self.terms.clone();
        terms[0].coefficient *= n;
        Ordinal { terms }
    }

    pub fn succ(&self) -> Ordinal {
        self.add(&Ordinal::one())
    }

    pub fn classify(&self) -> OrdinalClass {
        match self.terms.last() {
            None => OrdinalClass::Zero,
            Some(t) if t.exponent.is_zero() => {
                let mut pred = self.clone();
                let last = pred.terms.last_mut().expect("non-empty");
                last.coefficient -= 1u32;
                if last.coefficient.is_zero() {
                    pred.terms.pop();
                }
                OrdinalClass::Successor(pred)
            }
            Some(_) => OrdinalClass::Limit,
        }
    }

    pub fn is_limit(&self) -> bool {
        matches!(self.classify(), OrdinalClass::Limit)
    }

    /// The `n`-th element `λ[n]` of the canonical fundamental sequence:
    ///
    /// - `(γ + ω^(β+1))[n] = γ + ω^β·n`
    /// - `(γ + ω^μ)[n] = γ + ω^(μ[n])` for limit `μ`
    pub fn fundamental_seq(&self, n: u64) -> Result<Ordinal, OrdinalError> {
        if !self.is_limit() {
            return Err(OrdinalError::NotALimit(self.clone()));
        }
        let mut prefix = self.terms.clone();
        let last = prefix.pop().expect("limit is non-zero");
        if last.coefficient > BigUint::one() {
            prefix.push(Term {
                exponent: last.exponent.clone(),
                coefficient: &last.coefficient - 1u32,
            });
        }
        let gamma = Ordinal { terms: prefix };
        let tail = match last.exponent.classify() {
            OrdinalClass::Successor(beta) => Ordinal::omega_pow(beta).nat_scale(n),
            OrdinalClass::Limit => Ordinal::omega_pow(last.exponent.fundamental_seq(n)?),
            OrdinalClass::Zero => unreachable!("exponent-zero last term is a successor"),
        };
        Ok(gamma.add(&tail))
    }
}

impl Ord for Ordinal {
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.terms.iter().zip(&other.terms) {
            let o = a
                .exponent
                .cmp(&b.exponent)
                .then_with(|| a.coefficient.cmp(&b.coefficient));
            if o != Ordering::Equal {
                return o;
            }
        }
        self.terms.len().cmp(&other.terms.len())
    }
}

impl PartialOrd for Ordinal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl From<u64> for Ordinal {
    fn from(n: u64) -> Self {
        Ordinal::natural(n)
    }
}

impl fmt::Display for Ordinal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            if t.exponent.is_zero() {
                write!(f, "{}", t.coefficient)?;
                continue;
            }
            f.write_str("w")?;
            if t.exponent != Ordinal::one() {
                f.write_str("^")?;
                write_exponent(f, &t.exponent)?;
            }
            if !t.coefficient.is_one() {
                write!(f, "*{}", t.coefficient)?;
            }
        }
        Ok(())
    }
}

fn write_exponent(f: &mut fmt::Formatter<'_>, e: &Ordinal) -> fmt::Result {
    let bare = e.is_finite() || (e.terms.len() == 1 && e.terms[0].coefficient.is_one());
    if bare {
        write!(f, "{e}")
    } else {
        write!(f, "({e})")
    }
}

impl fmt::Debug for Ordinal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ordinal({self})")
    }
}

impl FromStr for Ordinal {
    type Err = OrdinalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Parser {
            chars: s.chars().collect(),
            pos: 0,
        };
        let value = p.sum()?;
        p.skip_ws();
        if p.pos < p.chars.len() {
            return Err(p.error("trailing input"));
        }
        Ok(value)
    }
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn error(&self, message: &str) -> OrdinalError {
        OrdinalError::Parse {
            column: self.pos + 1,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.chars.get(self.pos).is_some_and(|c| c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.chars.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn sum(&mut self) -> Result<Ordinal, OrdinalError> {
        let mut acc = self.term()?;
        while self.eat('+') {
            let t = self.term()?;
            acc = acc.add(&t);
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Ordinal, OrdinalError> {
        match self.peek() {
            Some(c) if c.is_ascii_digit() => Ok(Ordinal::natural(self.number()?)),
            Some('w') | Some('ω') => {
                let power = self.power()?;
                if self.eat('*') {
                    let c = self.number()?;
                    if c.is_zero() {
                        return Err(self.error("coefficient must be positive"));
                    }
                    Ok(power.nat_scale(c))
                } else {
                    Ok(power)
                }
            }
            _ => Err(self.error("expected a natural number or `w`")),
        }
    }

    fn power(&mut self) -> Result<Ordinal, OrdinalError> {
        if !(self.eat('w') || self.eat('ω')) {
            return Err(self.error("expected `w`"));
        }
        if !self.eat('^') {
            return Ok(Ordinal::omega());
        }
        let exponent = match self.peek() {
            Some(c) if c.is_ascii_digit() => Ordinal::natural(self.number()?),
            Some('w') | Some('ω') => self.power()?,
            Some('(') => {
                self.pos += 1;
                let e = self.sum()?;
                if !self.eat(')') {
                    return Err(self.error("expected `)`"));
                }
                e
            }
            _ => return Err(self.error("expected an exponent")),
        };
        Ok(Ordinal::omega_pow(exponent))
    }

    fn number(&mut self) -> Result<BigUint, OrdinalError> {
        self.skip_ws();
        let start = self.pos;
        while self.chars.get(self.pos).is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected digits"));
        }
        let digits: String = self.chars[start..self.pos].iter().collect();
        digits
            .parse()
            .map_err(|_| self.error("malformed natural number"))
    }
}

impl Serialize for Ordinal {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ordinal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
