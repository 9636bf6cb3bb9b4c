use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The ten Hubble subtypes used for the finest classification level.
/// Declaration order is the logit order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FineClass {
    E0,
    E3,
    E7,
    Sa,
    Sb,
    Sc,
    SBa,
    SBb,
    SBc,
    Irr,
}

impl FineClass {
    pub const ALL: [FineClass; 10] = [
        FineClass::E0,
        FineClass::E3,
        FineClass::E7,
        FineClass::Sa,
        FineClass::Sb,
        FineClass::Sc,
        FineClass::SBa,
        FineClass::SBb,
        FineClass::SBc,
        FineClass::Irr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FineClass::E0 => "E0",
            FineClass::E3 => "E3",
            FineClass::E7 => "E7",
            FineClass::Sa => "Sa",
            FineClass::Sb => "Sb",
            FineClass::Sc => "Sc",
            FineClass::SBa => "SBa",
            FineClass::SBb => "SBb",
            FineClass::SBc => "SBc",
            FineClass::Irr => "Irr",
        }
    }

    pub fn index(self) -> usize {
        FineClass::ALL
            .iter()
            .position(|&c| c == self)
            .expect("listed")
    }

    pub fn to_three(self) -> CoarseClass {
        match self {
            FineClass::E0 | FineClass::E3 | FineClass::E7 => CoarseClass::E,
            FineClass::Irr => CoarseClass::Irr,
            _ => CoarseClass::S,
        }
    }

    pub fn is_barred(self) -> bool {
        matches!(self, FineClass::SBa | FineClass::SBb | FineClass::SBc)
    }
}

/// Elliptical / spiral / irregular grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CoarseClass {
    E,
    S,
    Irr,
}

impl CoarseClass {
    pub const ALL: [CoarseClass; 3] = [CoarseClass::E, CoarseClass::S, CoarseClass::Irr];

    pub fn name(self) -> &'static str {
        match self {
            CoarseClass::E => "E",
            CoarseClass::S => "S",
            CoarseClass::Irr => "Irr",
        }
    }

    /// The two-class level keeps ellipticals and spirals; irregulars are
    /// excluded (`None`).
    pub fn to_two(self) -> Option<CoarseClass> {
        match self {
            CoarseClass::Irr => None,
            other => Some(other),
        }
    }

    /// Fine subtypes that coarsen to this class.
    pub fn members(self) -> Vec<FineClass> {
        FineClass::ALL
            .into_iter()
            .filter(|c| c.to_three() == self)
            .collect()
    }
}

/// Taxonomy level, i.e. the number of classes a model distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Level {
    Two,
    Three,
    Ten,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Two, Level::Three, Level::Ten];

    pub fn class_count(self) -> usize {
        match self {
            Level::Two => 2,
            Level::Three => 3,
            Level::Ten => 10,
        }
    }

    pub fn class_names(self) -> Vec<&'static str> {
        match self {
            Level::Two => vec![CoarseClass::E.name(), CoarseClass::S.name()],
            Level::Three => CoarseClass::ALL.iter().map(|c| c.name()).collect(),
            Level::Ten => FineClass::ALL.iter().map(|c| c.name()).collect(),
        }
    }

    /// Label of a fine subtype at this level; `None` when the level excludes it.
    pub fn label_of(self, fine: FineClass) -> Option<usize> {
        match self {
            Level::Ten => Some(fine.index()),
            Level::Three => Some(fine.to_three() as usize),
            Level::Two => fine.to_three().to_two().map(|c| c as usize),
        }
    }

    /// Fine subtypes grouped under label `label` at this level.
    pub fn members_of(self, label: usize) -> Vec<FineClass> {
        FineClass::ALL
            .into_iter()
            .filter(|&f| self.label_of(f) == Some(label))
            .collect()
    }

    pub fn index_of_name(self, name: &str) -> Option<usize> {
        self.class_names().iter().position(|&n| n == name)
    }
}

impl From<Level> for u8 {
    fn from(level: Level) -> u8 {
        level.class_count() as u8
    }
}

impl TryFrom<u8> for Level {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            2 => Ok(Level::Two),
            3 => Ok(Level::Three),
            10 => Ok(Level::Ten),
            other => Err(Error::Config(format!(
                "taxonomy level must be 2, 3 or 10, got {other}"
            ))),
        }
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("taxonomy level must be 2, 3 or 10, got {s:?}")))?;
        Level::try_from(n)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.class_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_lists() {
        assert_eq!(
            Level::Ten.class_names(),
            ["E0", "E3", "E7", "Sa", "Sb", "Sc", "SBa", "SBb", "SBc", "Irr"]
        );
        assert_eq!(Level::Three.class_names(), ["E", "S", "Irr"]);
        assert_eq!(Level::Two.class_names(), ["E", "S"]);
    }

    #[test]
    fn coarsening_is_total_and_irregulars_drop_at_two() {
        for fine in FineClass::ALL {
            assert!(Level::Three.label_of(fine).is_some());
        }
        assert_eq!(Level::Two.label_of(FineClass::Irr), None);
        assert_eq!(Level::Two.label_of(FineClass::SBb), Some(1));
        assert_eq!(Level::Three.label_of(FineClass::E7), Some(0));
        assert_eq!(CoarseClass::S.members().len(), 6);
    }

    #[test]
    fn coarse_counts_commute_with_grouping() {
        // Label every fine class a different number of times, then count at
        // the coarse level two ways.
        let fine_counts: Vec<usize> = (1..=10).collect();
        let mut via_map = [0usize; 3];
        for (fine, &n) in FineClass::ALL.iter().zip(&fine_counts) {
            via_map[Level::Three.label_of(*fine).unwrap()] += n;
        }
        let grouped: Vec<usize> = (0..3)
            .map(|label| {
                Level::Three
                    .members_of(label)
                    .iter()
                    .map(|f| fine_counts[f.index()])
                    .sum()
            })
            .collect();
        assert_eq!(via_map.to_vec(), grouped);
    }

    #[test]
    fn level_parsing() {
        assert_eq!("10".parse::<Level>().unwrap(), Level::Ten);
        assert!("4".parse::<Level>().is_err());
        assert_eq!(serde_json::to_string(&Level::Three).unwrap(), "3");
        assert_eq!(serde_json::from_str::<Level>("2").unwrap(), Level::Two);
    }
}
