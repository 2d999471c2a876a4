//! Quorum decisions for seal, verify and recover.
//!
//! Percentages are exact fractions so that threshold cases like 7 of 10
//! are decided without rounding.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Deserializer};

use crate::protocol::CatalogToken;

/// A fraction in (0, 1].
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fraction {
    num: u64,
    den: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("invalid fraction {0:?}: expected a value in (0, 1] such as 0.7, 70% or 7/10")]
pub struct FractionError(pub String);

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Fraction, FractionError> {
        if den == 0 || num == 0 || num > den {
            return Err(FractionError(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Fraction { num: num / g, den: den / g })
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    /// `part / whole > self`.
    pub fn exceeded_by(&self, part: u64, whole: u64) -> bool {
        whole > 0 && (part as u128) * (self.den as u128) > (self.num as u128) * (whole as u128)
    }

    /// `part >= self * whole`.
    pub fn reached_by(&self, part: u64, whole: u64) -> bool {
        (part as u128) * (self.den as u128) >= (self.num as u128) * (whole as u128)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl FromStr for Fraction {
    type Err = FractionError;

    /// Accepts `0.7`, `70%` and `7/10`.
    fn from_str(s: &str) -> Result<Fraction, FractionError> {
        let err = || FractionError(s.to_string());
        let t = s.trim();
        if let Some((n, d)) = t.split_once('/') {
            let n = n.trim().parse().map_err(|_| err())?;
            let d = d.trim().parse().map_err(|_| err())?;
            return Fraction::new(n, d).map_err(|_| err());
        }
        let (t, scale) = match t.strip_suffix('%') {
            Some(p) => (p.trim(), 100u64),
            None => (t, 1),
        };
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if frac.len() > 9 || (int.is_empty() && frac.is_empty()) {
            return Err(err());
        }
        let digits = |d: &str| -> Result<u64, FractionError> {
            if d.is_empty() {
                Ok(0)
            } else if d.bytes().all(|b| b.is_ascii_digit()) {
                d.parse().map_err(|_| err())
            } else {
                Err(err())
            }
        };
        let den = 10u64.pow(frac.len() as u32);
        let num = digits(int)?.checked_mul(den).and_then(|v| v.checked_add(digits(frac).ok()?)).ok_or_else(err)?;
        Fraction::new(num, den * scale).map_err(|_| err())
    }
}

impl fmt::Debug for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.num as f64 * 100.0 / self.den as f64)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Fraction, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let text = match Raw::deserialize(d)? {
            // Shortest round-trip formatting keeps 0.7 as "0.7".
            Raw::Num(v) => v.to_string(),
            Raw::Text(s) => s,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyConfig {
    pub quorum: Fraction,
    pub winning: Fraction,
    pub recover_quorum: Fraction,
    pub recover_winning: Fraction,
    pub reply_timeout: Duration,
}

impl Default for PolicyConfig {
    fn default() -> PolicyConfig {
        let half = Fraction { num: 1, den: 2 };
        let seventy = Fraction { num: 7, den: 10 };
        PolicyConfig {
            quorum: half,
            winning: seventy,
            recover_quorum: half,
            recover_winning: seventy,
            reply_timeout: Duration::from_secs(5),
        }
    }
}

/// Replies grouped by the token they carry. `None` stands for a peer that
/// answered but holds no token.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VoteTally {
    votes: BTreeMap<Option<CatalogToken>, u64>,
    peer_count: u64,
}

impl VoteTally {
    pub fn new(peer_count: u64) -> VoteTally {
        VoteTally { votes: BTreeMap::new(), peer_count }
    }

    /// One entry per peer: `None` if it did not answer.
    pub fn from_replies(replies: impl IntoIterator<Item = Option<Option<CatalogToken>>>) -> VoteTally {
        let mut t = VoteTally::default();
        for r in replies {
            t.peer_count += 1;
            if let Some(vote) = r {
                t.add(vote);
            }
        }
        t
    }

    pub fn add(&mut self, vote: Option<CatalogToken>) {
        *self.votes.entry(vote).or_default() += 1;
    }

    pub fn peer_count(&self) -> u64 {
        self.peer_count
    }

    pub fn participants(&self) -> u64 {
        self.votes.values().sum()
    }

    pub fn absentees(&self) -> u64 {
        self.peer_count.saturating_sub(self.participants())
    }

    pub fn votes_for(&self, token: Option<CatalogToken>) -> u64 {
        self.votes.get(&token).copied().unwrap_or(0)
    }

    /// Tokens by descending vote count; ties by ascending token.
    pub fn ranking(&self) -> Vec<(CatalogToken, u64)> {
        let mut r: Vec<_> = self.votes.iter().filter_map(|(t, &n)| t.map(|t| (t, n))).collect();
        r.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyDecision {
    Accept,
    /// Enough peers answered but the local token did not win. `winner` is a
    /// token that did, if any.
    Mismatch { winner: Option<CatalogToken> },
    QuorumFailed,
}

/// Replaceable decision rules.
pub trait DecisionPolicy: Send + Sync {
    fn seal_accepted(&self, acks: u64, verifier_count: u64) -> bool;
    fn verify(&self, tally: &VoteTally, local: Option<CatalogToken>) -> VerifyDecision;
    /// The version to restore, or `None` when no version wins.
    fn recover(&self, tally: &VoteTally) -> Option<CatalogToken>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultPolicy {
    pub config: PolicyConfig,
}

impl DefaultPolicy {
    pub fn new(config: PolicyConfig) -> DefaultPolicy {
        DefaultPolicy { config }
    }
}

impl DecisionPolicy for DefaultPolicy {
    fn seal_accepted(&self, acks: u64, verifier_count: u64) -> bool {
        self.config.quorum.exceeded_by(acks, verifier_count)
    }

    fn verify(&self, tally: &VoteTally, local: Option<CatalogToken>) -> VerifyDecision {
        let p = tally.participants();
        if !self.config.quorum.exceeded_by(p, tally.peer_count()) {
            return VerifyDecision::QuorumFailed;
        }
        let wins = |votes| self.config.winning.reached_by(votes, p);
        if local.is_some() && wins(tally.votes_for(local)) {
            return VerifyDecision::Accept;
        }
        let winner = tally.ranking().into_iter().find(|&(t, n)| Some(t) != local && wins(n)).map(|(t, _)| t);
        VerifyDecision::Mismatch { winner }
    }

    fn recover(&self, tally: &VoteTally) -> Option<CatalogToken> {
        let p = tally.participants();
        if !self.config.recover_quorum.exceeded_by(p, tally.peer_count()) {
            return None;
        }
        let (token, votes) = *tally.ranking().first()?;
        self.config.recover_winning.exceeded_by(votes, p).then_some(token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::Digest;

    fn tok(s: u64) -> CatalogToken {
        CatalogToken { snapshot_id: s, authenticator: Digest([s as u8; 32]) }
    }

    fn policy() -> DefaultPolicy {
        DefaultPolicy::default()
    }

    #[test]
    fn fractions_parse_exactly() {
        assert_eq!("0.7".parse::<Fraction>().unwrap(), Fraction::new(7, 10).unwrap());
        assert_eq!("70%".parse::<Fraction>().unwrap(), Fraction::new(7, 10).unwrap());
        assert_eq!("14/20".parse::<Fraction>().unwrap(), Fraction::new(7, 10).unwrap());
        assert_eq!("1".parse::<Fraction>().unwrap(), Fraction::new(1, 1).unwrap());
        assert_eq!(".5".parse::<Fraction>().unwrap(), Fraction::new(1, 2).unwrap());
        for bad in ["0", "1.5", "-0.5", "abc", "", "1/0", "0.5.5", "101%"] {
            assert!(bad.parse::<Fraction>().is_err(), "{bad}");
        }
    }

    #[test]
    fn fractions_deserialize_from_numbers_and_strings() {
        #[derive(Deserialize)]
        struct T {
            a: Fraction,
            b: Fraction,
        }
        let t: T = toml::from_str("a = 0.7\nb = \"2/3\"").unwrap();
        assert_eq!(t.a, Fraction::new(7, 10).unwrap());
        assert_eq!(t.b, Fraction::new(2, 3).unwrap());
    }

    #[test]
    fn seal_examples() {
        assert!(policy().seal_accepted(3, 3));
        assert!(!policy().seal_accepted(5, 10));
        assert!(policy().seal_accepted(6, 10));
        assert!(!policy().seal_accepted(0, 0));
    }

    #[test]
    fn verify_examples() {
        let local = tok(7);
        let other = tok(8);
        // 8 local, 1 other, 1 absent.
        let mut t = VoteTally::new(10);
        (0..8).for_each(|_| t.add(Some(local)));
        t.add(Some(other));
        assert_eq!(t.participants(), 9);
        assert_eq!(policy().verify(&t, Some(local)), VerifyDecision::Accept);

        // 6 other, 3 local, 1 absent: the local token loses. The other token
        // has 6 of 9 votes, short of 70%, so no winner is named.
        let mut t = VoteTally::new(10);
        (0..6).for_each(|_| t.add(Some(other)));
        (0..3).for_each(|_| t.add(Some(local)));
        assert_eq!(policy().verify(&t, Some(local)), VerifyDecision::Mismatch { winner: None });

        // 7 other, 2 local: now the other token wins outright.
        let mut t = VoteTally::new(10);
        (0..7).for_each(|_| t.add(Some(other)));
        (0..2).for_each(|_| t.add(Some(local)));
        assert_eq!(policy().verify(&t, Some(local)), VerifyDecision::Mismatch { winner: Some(other) });

        // 4 replies only.
        let mut t = VoteTally::new(10);
        (0..4).for_each(|_| t.add(Some(local)));
        assert_eq!(policy().verify(&t, Some(local)), VerifyDecision::QuorumFailed);
    }

    #[test]
    fn verify_threshold_is_inclusive() {
        // 7 of 10 is exactly 70%.
        let mut t = VoteTally::new(10);
        (0..7).for_each(|_| t.add(Some(tok(1))));
        (0..3).for_each(|_| t.add(Some(tok(2))));
        assert_eq!(policy().verify(&t, Some(tok(1))), VerifyDecision::Accept);
    }

    #[test]
    fn recover_examples() {
        let mut t = VoteTally::new(4);
        (0..4).for_each(|_| t.add(Some(tok(9))));
        assert_eq!(policy().recover(&t), Some(tok(9)));

        let mut t = VoteTally::new(4);
        t.add(Some(tok(9)));
        assert_eq!(policy().recover(&t), None);

        // Recovery needs strictly more than 70%: 7 of 10 is not enough.
        let mut t = VoteTally::new(10);
        (0..7).for_each(|_| t.add(Some(tok(3))));
        (0..3).for_each(|_| t.add(Some(tok(4))));
        assert_eq!(policy().recover(&t), None);
        let mut t = VoteTally::new(10);
        (0..8).for_each(|_| t.add(Some(tok(3))));
        (0..2).for_each(|_| t.add(Some(tok(4))));
        assert_eq!(policy().recover(&t), Some(tok(3)));
    }

    #[test]
    fn tally_counts() {
        let t = VoteTally::from_replies([Some(Some(tok(1))), None, Some(None), Some(Some(tok(1)))]);
        assert_eq!(t.peer_count(), 4);
        assert_eq!(t.participants(), 3);
        assert_eq!(t.absentees(), 1);
        assert_eq!(t.votes_for(Some(tok(1))), 2);
        assert_eq!(t.votes_for(None), 1);
        assert_eq!(t.ranking(), vec![(tok(1), 2)]);
    }
}
