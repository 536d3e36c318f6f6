//! Domain-sequence bookkeeping: the cyclic set of domains, step indices and
//! the loop schedule used by training.
//!
//! Indices are zero-based. The successor of the last domain is the first one,
//! so all arithmetic is modulo `n`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered cyclic set of `n >= 2` named domains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SequenceSpecRepr", into = "SequenceSpecRepr")]
pub struct SequenceSpec {
    names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceSpecRepr {
    names: Vec<String>,
    #[serde(default = "default_periodic")]
    periodic: bool,
}

fn default_periodic() -> bool {
    true
}

impl TryFrom<SequenceSpecRepr> for SequenceSpec {
    type Error = Error;

    fn try_from(r: SequenceSpecRepr) -> Result<Self> {
        if !r.periodic {
            return Err(Error::Config("only periodic domain sequences are supported".into()));
        }
        SequenceSpec::new(r.names)
    }
}

impl From<SequenceSpec> for SequenceSpecRepr {
    fn from(s: SequenceSpec) -> Self {
        SequenceSpecRepr {
            names: s.names,
            periodic: true,
        }
    }
}

impl SequenceSpec {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "a domain sequence needs at least 2 domains, got {}",
                names.len()
            )));
        }
        for (i, a) in names.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Config("domain names must be non-empty".into()));
            }
            if names[..i].contains(a) {
                return Err(Error::Config(format!("duplicate domain name {a:?}")));
            }
        }
        Ok(Self { names })
    }

    /// Domains labelled `A`, `B`, ... (or `d0`, `d1`, ... beyond 26).
    pub fn lettered(n: usize) -> Result<Self> {
        if n <= 26 {
            Self::new((0..n).map(|i| char::from(b'A' + i as u8).to_string()))
        } else {
            Self::new((0..n).map(|i| format!("d{i}")))
        }
    }

    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn periodic(&self) -> bool {
        true
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: StepIndex) -> &str {
        &self.names[i.0]
    }

    /// Validated step index.
    pub fn step(&self, value: usize) -> Result<StepIndex> {
        let i = StepIndex(value);
        self.check(i)?;
        Ok(i)
    }

    pub fn index_of(&self, name: &str) -> Result<StepIndex> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(StepIndex)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown domain {name:?}; valid domains are {}",
                    self.names.join(", ")
                ))
            })
    }

    pub fn steps(&self) -> impl Iterator<Item = StepIndex> {
        (0..self.n()).map(StepIndex)
    }

    pub fn check(&self, i: StepIndex) -> Result<()> {
        if i.0 < self.n() {
            Ok(())
        } else {
            Err(Error::Range {
                value: i.0,
                n: self.n(),
            })
        }
    }
}

/// Zero-based position of a domain in its sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StepIndex(usize);

impl StepIndex {
    /// Unvalidated index; operations taking a [`SequenceSpec`] reject it if
    /// it is out of range.
    pub const fn new(value: usize) -> Self {
        StepIndex(value)
    }

    pub const fn value(self) -> usize {
        self.0
    }
}

impl fmt::Display for StepIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Successor of `i` in the cycle.
pub fn advance(i: StepIndex, spec: &SequenceSpec) -> Result<StepIndex> {
    spec.check(i)?;
    Ok(StepIndex((i.0 + 1) % spec.n()))
}

/// Number of forward generator applications taking domain `src` to `dst`.
///
/// `src == dst` yields `n` (a full loop) when `full_loop` is set and `0`
/// otherwise.
pub fn step_distance(
    src: StepIndex,
    dst: StepIndex,
    spec: &SequenceSpec,
    full_loop: bool,
) -> Result<usize> {
    spec.check(src)?;
    spec.check(dst)?;
    let n = spec.n();
    let d = (dst.0 + n - src.0) % n;
    Ok(if d == 0 && full_loop { n } else { d })
}

/// The `n` training loops: loop `k` starts at domain `k`, visits every
/// domain in order and returns to `k`.
pub fn loop_schedule(spec: &SequenceSpec) -> Vec<Vec<StepIndex>> {
    let n = spec.n();
    (0..n)
        .map(|k| (0..=n).map(|m| StepIndex((k + m) % n)).collect())
        .collect()
}
