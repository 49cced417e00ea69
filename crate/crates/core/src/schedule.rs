//! Dataset schedules: which datasets are trained on, in what order, with
//! which epochs and learning rates.
//!
//! A schedule string lists stages separated by `+`; a trailing `*` marks an
//! unsupervised (photometric) stage, e.g. `SF*+SF+DS+K`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageMode {
    UnsupervisedPretrain,
    Supervised,
}

impl StageMode {
    pub fn name(self) -> &'static str {
        match self {
            StageMode::UnsupervisedPretrain => "unsupervised",
            StageMode::Supervised => "supervised",
        }
    }
}

/// One `+`-separated element of a schedule string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageRef {
    pub dataset: String,
    pub mode: StageMode,
}

impl fmt::Display for StageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.dataset, self.mode.name())
    }
}

pub fn parse_schedule(s: &str) -> Result<Vec<StageRef>> {
    let s = s.trim();
    if s.is_empty() {
        return Err(Error::Config("schedule order is empty".into()));
    }
    s.split('+')
        .map(|tok| {
            let tok = tok.trim();
            let (name, mode) = match tok.strip_suffix('*') {
                Some(n) => (n.trim(), StageMode::UnsupervisedPretrain),
                None => (tok, StageMode::Supervised),
            };
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!("bad stage {tok:?} in schedule {s:?}")));
            }
            Ok(StageRef {
                dataset: name.to_string(),
                mode,
            })
        })
        .collect()
}

/// Step decay within a round: `base * factor^k` where `k` counts the decay
/// points at or before the epoch (0-based within the round).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPolicy {
    pub base: f64,
    #[serde(default = "one")]
    pub factor: f64,
    /// Decay every this many epochs (0 = never).
    #[serde(default)]
    pub every: usize,
    /// Explicit decay epochs, used in addition to `every`.
    #[serde(default)]
    pub at: Vec<usize>,
}

fn one() -> f64 {
    1.0
}

impl LrPolicy {
    pub fn constant(base: f64) -> Self {
        LrPolicy {
            base,
            factor: 1.0,
            every: 0,
            at: Vec::new(),
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let periodic = epoch.checked_div(self.every).unwrap_or(0);
        let explicit = self.at.iter().filter(|&&e| e > 0 && e <= epoch).count();
        self.base * self.factor.powi((periodic + explicit) as i32)
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite() && self.factor > 0.0 && self.factor.is_finite()) {
            return Err(Error::Config(format!("{what}: learning rate and decay factor must be positive")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_star_as_unsupervised() {
        let st = parse_schedule("SF*+SF+DS+K").unwrap();
        let names: Vec<String> = st.iter().map(|s| s.to_string()).collect();
        assert_eq!(
            names,
            ["SF:unsupervised", "SF:supervised", "DS:supervised", "K:supervised"]
        );
        assert!(parse_schedule("").is_err());
        assert!(parse_schedule("SF++K").is_err());
        assert!(parse_schedule("S F").is_err());
    }

    #[test]
    fn halving_every_ten() {
        let p = LrPolicy {
            base: 1e-4,
            factor: 0.5,
            every: 10,
            at: vec![],
        };
        assert_eq!(p.lr(0), 1e-4);
        assert_eq!(p.lr(9), 1e-4);
        assert_eq!(p.lr(10), 5e-5);
        assert_eq!(p.lr(25), 2.5e-5);
    }

    #[test]
    fn explicit_decay_points() {
        let p = LrPolicy {
            base: 1e-5,
            factor: 0.1,
            every: 0,
            at: vec![600],
        };
        assert_eq!(p.lr(599), 1e-5);
        assert!((p.lr(600) - 1e-6).abs() < 1e-18);
        assert_eq!(LrPolicy::constant(3.0).lr(1000), 3.0);
    }
}
