use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Binary pin-site class. Index 0 is Group A (inflamed/infected), the
/// positive class for every metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    GroupA,
    GroupB,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::GroupA, Label::GroupB];

    pub fn index(self) -> usize {
        match self {
            Label::GroupA => 0,
            Label::GroupB => 1,
        }
    }

    /// Target value of the Group-B indicator used by the losses.
    pub fn is_group_b(self) -> bool {
        self == Label::GroupB
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Label::GroupA => "groupA",
            Label::GroupB => "groupB",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::GroupA => "GroupA",
            Label::GroupB => "GroupB",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "GroupA" | "groupA" | "A" | "0" => Ok(Label::GroupA),
            "GroupB" | "groupB" | "B" | "1" => Ok(Label::GroupB),
            other => Err(Error::Input(format!("unknown label {other:?}"))),
        }
    }
}

/// Softmax output of one sample plus the thresholded class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    /// `[p_groupA, p_groupB]`
    pub probs: [f64; 2],
    pub label: Label,
    pub threshold: f64,
}

impl Prediction {
    /// Group B iff `p_groupB ≥ threshold`.
    pub fn from_probs(probs: [f64; 2], threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::config(format!("threshold {threshold} outside (0, 1)")));
        }
        let label = if probs[1] >= threshold {
            Label::GroupB
        } else {
            Label::GroupA
        };
        Ok(Self { probs, label, threshold })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_semantics() {
        let p = |a, b, t| Prediction::from_probs([a, b], t).unwrap().label;
        assert_eq!(p(0.1, 0.9, 0.5), Label::GroupB);
        assert_eq!(p(0.6, 0.4, 0.5), Label::GroupA);
        assert_eq!(p(0.45, 0.55, 0.6), Label::GroupA);
        assert_eq!(p(0.5, 0.5, 0.5), Label::GroupB);
        assert!(Prediction::from_probs([0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn parse_round_trip() {
        for l in Label::ALL {
            assert_eq!(l.to_string().parse::<Label>().unwrap(), l);
            assert_eq!(l.dir_name().parse::<Label>().unwrap(), l);
        }
    }
}
