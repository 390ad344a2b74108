//! Core identifiers and the constitution triple.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A participant identity standing for a public key. Totally ordered so that
/// leader rotation and tie-breaking are deterministic.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub u64);

impl AgentId {
    /// Reserved identity used as the creator of constitutional genesis
    /// blocks. Never a member of any participant set.
    pub const GENESIS: AgentId = AgentId(u64::MAX);
}

impl fmt::Debug for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == AgentId::GENESIS {
            write!(f, "p#genesis")
        } else {
            write!(f, "p{}", self.0)
        }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Identifier of a protocol instance. Independent instances never share
/// state; blocks carry the instance id through their epoch genesis digest.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceId(pub String);

impl fmt::Debug for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<&str> for InstanceId {
    fn from(s: &str) -> Self {
        InstanceId(s.to_owned())
    }
}

/// Exact rational supermajority threshold in `[1/2, 1)`.
///
/// All supermajority comparisons are performed in integer arithmetic
/// (`count * den > num * n`), never floating point, so safety-critical
/// comparisons cannot be flipped by rounding.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sigma {
    num: u64,
    den: u64,
}

impl Sigma {
    pub const HALF: Sigma = Sigma { num: 1, den: 2 };

    /// Constructs the threshold `num/den`, requiring `1/2 <= num/den < 1`.
    pub fn new(num: u64, den: u64) -> Result<Sigma, SigmaError> {
        if den == 0 {
            return Err(SigmaError::ZeroDenominator);
        }
        let s = Sigma { num, den }.reduced();
        if 2 * s.num < s.den || s.num >= s.den {
            return Err(SigmaError::OutOfRange { num, den });
        }
        Ok(s)
    }

    fn reduced(self) -> Sigma {
        fn gcd(a: u64, b: u64) -> u64 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let g = gcd(self.num, self.den);
        Sigma {
            num: self.num / g,
            den: self.den / g,
        }
    }

    pub fn numer(&self) -> u64 {
        self.num
    }

    pub fn denom(&self) -> u64 {
        self.den
    }

    /// Strict test `count > sigma * n`.
    pub fn supermajority(&self, count: usize, n: usize) -> bool {
        (count as u128) * (self.den as u128) > (self.num as u128) * (n as u128)
    }

    /// The fault bound `f = floor((2*sigma - 1) * n)` implied by this
    /// threshold for a population of size `n`.
    pub fn fault_bound(&self, n: usize) -> usize {
        // 2*num - den >= 0 holds by the range invariant.
        let margin = (2 * self.num - self.den) as u128;
        ((margin * n as u128) / self.den as u128) as usize
    }
}

impl PartialOrd for Sigma {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Sigma {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let lhs = (self.num as u128) * (other.den as u128);
        let rhs = (other.num as u128) * (self.den as u128);
        lhs.cmp(&rhs)
    }
}

impl fmt::Debug for Sigma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl fmt::Display for Sigma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Sigma {
    type Err = SigmaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (num, den) = s
            .split_once('/')
            .ok_or_else(|| SigmaError::Malformed(s.to_owned()))?;
        let num = num
            .trim()
            .parse()
            .map_err(|_| SigmaError::Malformed(s.to_owned()))?;
        let den = den
            .trim()
            .parse()
            .map_err(|_| SigmaError::Malformed(s.to_owned()))?;
        Sigma::new(num, den)
    }
}

impl Serialize for Sigma {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Sigma {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SigmaError {
    #[error("sigma denominator must be nonzero")]
    ZeroDenominator,
    #[error("sigma must satisfy 1/2 <= sigma < 1, got {num}/{den}")]
    OutOfRange { num: u64, den: u64 },
    #[error("malformed sigma {0:?}, expected \"num/den\"")]
    Malformed(String),
}

/// The amendable component of a constitution: the participant set `P`, the
/// supermajority threshold `sigma`, and the presumed post-GST message delay
/// bound `delta` (in simulated ticks).
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Constitution {
    pub participants: Vec<AgentId>,
    pub sigma: Sigma,
    pub delta: u64,
}

impl Constitution {
    pub fn new(
        mut participants: Vec<AgentId>,
        sigma: Sigma,
        delta: u64,
    ) -> Result<Constitution, ConstitutionError> {
        if delta == 0 {
            return Err(ConstitutionError::ZeroDelta);
        }
        participants.sort_unstable();
        let before = participants.len();
        participants.dedup();
        if participants.len() != before {
            return Err(ConstitutionError::DuplicateParticipant);
        }
        if participants.contains(&AgentId::GENESIS) {
            return Err(ConstitutionError::ReservedParticipant);
        }
        Ok(Constitution {
            participants,
            sigma,
            delta,
        })
    }

    pub fn n(&self) -> usize {
        self.participants.len()
    }

    /// `f = floor((2*sigma - 1) * n)`, the number of faulty participants the
    /// threshold presumes to tolerate.
    pub fn fault_bound(&self) -> usize {
        self.sigma.fault_bound(self.n())
    }

    pub fn is_participant(&self, agent: AgentId) -> bool {
        self.participants.binary_search(&agent).is_ok()
    }

    /// Strict supermajority test over this population: `count > sigma * n`.
    pub fn is_supermajority(&self, count: usize) -> bool {
        self.sigma.supermajority(count, self.n())
    }

    /// The formal leader of the wave whose first round sits at
    /// `first_round_depth` (which must be `1 mod 3`). Round-robin over the
    /// sorted participant set, so every participant leads infinitely often.
    pub fn leader_at(&self, first_round_depth: u32) -> AgentId {
        debug_assert_eq!(first_round_depth % 3, 1, "not a first-round depth");
        let wave = (first_round_depth as usize + 2) / 3;
        self.participants[(wave - 1) % self.participants.len()]
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConstitutionError {
    #[error("delta must be positive")]
    ZeroDelta,
    #[error("duplicate participant id")]
    DuplicateParticipant,
    #[error("the genesis agent id is reserved")]
    ReservedParticipant,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_range_enforced() {
        assert!(Sigma::new(1, 2).is_ok());
        assert!(Sigma::new(5, 8).is_ok());
        assert!(Sigma::new(1, 1).is_err());
        assert!(Sigma::new(2, 5).is_err());
        assert!(Sigma::new(1, 0).is_err());
    }

    #[test]
    fn supermajority_is_strict() {
        let s = Sigma::new(5, 8).unwrap();
        // 5/8 of 4 is 2.5: three blocks suffice, two do not.
        assert!(s.supermajority(3, 4));
        assert!(!s.supermajority(2, 4));
        // Exactly sigma*n must fail: 3/4 of 4 is 3.
        let s = Sigma::new(3, 4).unwrap();
        assert!(!s.supermajority(3, 4));
        assert!(s.supermajority(4, 4));
    }

    #[test]
    fn fault_bound_matches_threshold() {
        // sigma = (n+f)/2n inverted: f = (2*sigma-1)*n.
        assert_eq!(Sigma::new(5, 8).unwrap().fault_bound(4), 1);
        assert_eq!(Sigma::new(3, 4).unwrap().fault_bound(4), 2);
        assert_eq!(Sigma::new(1, 2).unwrap().fault_bound(7), 0);
        assert_eq!(Sigma::new(2, 3).unwrap().fault_bound(6), 2);
    }

    #[test]
    fn leader_rotation_is_fair() {
        let c = Constitution::new(
            vec![AgentId(3), AgentId(1), AgentId(2), AgentId(0)],
            Sigma::new(5, 8).unwrap(),
            1,
        )
        .unwrap();
        // Wave 1 leads with the smallest id, wave 5 wraps around.
        assert_eq!(c.leader_at(1), AgentId(0));
        assert_eq!(c.leader_at(7), AgentId(2)); // wave 3
        assert_eq!(c.leader_at(13), AgentId(0)); // wave 5
        let mut counts = std::collections::HashMap::new();
        for wave in 1..=16u32 {
            let depth = 3 * wave - 2;
            *counts.entry(c.leader_at(depth)).or_insert(0) += 1;
        }
        for p in &c.participants {
            assert_eq!(counts[p], 4, "each participant leads 4 of 16 waves");
        }
    }

    #[test]
    fn sigma_round_trips_through_strings() {
        let s: Sigma = "5/8".parse().unwrap();
        assert_eq!(s.to_string(), "5/8");
        let s: Sigma = "6/8".parse().unwrap();
        assert_eq!(s.to_string(), "3/4");
        assert!("1".parse::<Sigma>().is_err());
        assert!("9/8".parse::<Sigma>().is_err());
    }
}
