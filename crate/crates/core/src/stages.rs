//! Subsets of the four encoder stages, numbered 1..=4 as in the paper.

use serde::de::{self, Deserializer, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct StageSet(u8);

impl StageSet {
    pub const EMPTY: StageSet = StageSet(0);
    pub const ALL: StageSet = StageSet(0b1111);

    /// Panics unless every stage is in `1..=4`.
    pub fn of(stages: &[usize]) -> StageSet {
        Self::try_from_iter(stages.iter().copied()).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_from_iter(stages: impl IntoIterator<Item = usize>) -> Result<StageSet, String> {
        let mut bits = 0u8;
        for s in stages {
            if !(1..=NUM_STAGES).contains(&s) {
                return Err(format!("stage {s} outside 1..=4"));
            }
            bits |= 1 << (s - 1);
        }
        Ok(StageSet(bits))
    }

    /// Stages `1..=n`, the rows of the ME OPEmbed ablation.
    pub fn prefix(n: usize) -> StageSet {
        assert!(n <= NUM_STAGES);
        StageSet((1u8 << n) - 1)
    }

    pub fn contains(self, stage: usize) -> bool {
        (1..=NUM_STAGES).contains(&stage) && self.0 & (1 << (stage - 1)) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Ascending stage numbers.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        (1..=NUM_STAGES).filter(move |&s| self.contains(s))
    }
}

impl fmt::Debug for StageSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl fmt::Display for StageSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `"3,4"`; the empty string is the empty set.
impl FromStr for StageSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<usize>().map_err(|_| format!("invalid stage {p:?}")))
            .collect::<Result<Vec<_>, _>>()
            .and_then(StageSet::try_from_iter)
    }
}

impl Serialize for StageSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.len()))?;
        for s in self.iter() {
            seq.serialize_element(&s)?;
        }
        seq.end()
    }
}

/// Accepts `[3, 4]`, `"3,4"` or a single integer.
impl<'de> Deserialize<'de> for StageSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = StageSet;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a list of stage numbers in 1..=4")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<StageSet, E> {
                StageSet::try_from_iter([v as usize]).map_err(E::custom)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<StageSet, E> {
                if v < 0 {
                    return Err(E::custom(format!("stage {v} outside 1..=4")));
                }
                self.visit_u64(v as u64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<StageSet, E> {
                v.parse().map_err(E::custom)
            }

            fn visit_seq<A: de::SeqAccess<'de>>(self, mut seq: A) -> Result<StageSet, A::Error> {
                let mut stages = Vec::new();
                while let Some(s) = seq.next_element::<usize>()? {
                    stages.push(s);
                }
                StageSet::try_from_iter(stages).map_err(de::Error::custom)
            }
        }
        deserializer.deserialize_any(V)
    }
}
