//! Democratic amendment of the constitution.
//!
//! Participants state ideal points (membership ballots, a preferred sigma, a
//! preferred delta). Vote sets are ordered by the consensus protocol itself;
//! once the ordered prefix contains vote-set transactions from a
//! sigma-supermajority of distinct proposers, every agent deterministically
//! aggregates the latest vote per voter and applies three amendment rules:
//!
//! * membership: per-candidate sigma-supermajority, plus consent of joiners;
//! * sigma: the self-referential h-rule (raising to `sigma'` needs a
//!   `sigma'`-supermajority at `>= sigma'`; lowering needs the current
//!   sigma-supermajority at `<= sigma'`);
//! * delta: the Suppress Outer-f median rule (discard the f most extreme
//!   votes on the side of the proposed change).
//!
//! Absent voters count as voting the status quo, and absent membership
//! ballots count as "no": silence never moves the constitution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::types::{AgentId, Constitution, InstanceId, Sigma};

/// Signature stand-in: a keyed digest over the vote's canonical bytes. The
/// simulator assumes ideal cryptography; anything that fails to recompute is
/// treated as a forgery.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VoteSig(pub [u8; 32]);

impl fmt::Debug for VoteSig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sig:{:02x}{:02x}..", self.0[0], self.0[1])
    }
}

/// A persistent, signed statement of one agent's ideal points. A later `seq`
/// from the same voter supersedes an earlier one.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct Vote {
    pub voter: AgentId,
    pub seq: u64,
    /// Per-candidate membership ballots: `true` = in, `false` = out.
    pub ballots: BTreeMap<AgentId, bool>,
    /// Willingness to join (or remain in) the population.
    pub consent: bool,
    pub sigma_pref: Sigma,
    pub delta_pref: u64,
    pub sig: VoteSig,
}

impl Vote {
    /// Builds a vote and signs it with the deterministic stub.
    pub fn signed(
        voter: AgentId,
        seq: u64,
        ballots: BTreeMap<AgentId, bool>,
        consent: bool,
        sigma_pref: Sigma,
        delta_pref: u64,
    ) -> Vote {
        let mut v = Vote {
            voter,
            seq,
            ballots,
            consent,
            sigma_pref,
            delta_pref,
            sig: VoteSig([0; 32]),
        };
        v.sig = v.compute_sig();
        v
    }

    fn compute_sig(&self) -> VoteSig {
        let mut h = Sha256::new();
        h.update(b"covenant.vote.v1");
        h.update(self.voter.0.to_le_bytes());
        h.update(self.seq.to_le_bytes());
        h.update((self.ballots.len() as u64).to_le_bytes());
        for (agent, yes) in &self.ballots {
            h.update(agent.0.to_le_bytes());
            h.update([*yes as u8]);
        }
        h.update([self.consent as u8]);
        h.update(self.sigma_pref.numer().to_le_bytes());
        h.update(self.sigma_pref.denom().to_le_bytes());
        h.update(self.delta_pref.to_le_bytes());
        VoteSig(h.finalize().into())
    }

    pub fn verify(&self) -> bool {
        self.sig == self.compute_sig()
    }
}

/// A consensus transaction carrying the latest votes its proposer knows, one
/// per voter.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct VoteSetTransaction {
    pub proposer: AgentId,
    pub epoch_index: u64,
    pub votes: Vec<Vote>,
}

impl VoteSetTransaction {
    pub fn new(proposer: AgentId, epoch_index: u64, votes: Vec<Vote>) -> VoteSetTransaction {
        let mut by_voter: BTreeMap<AgentId, Vote> = BTreeMap::new();
        for v in votes {
            match by_voter.get(&v.voter) {
                Some(held) if (held.seq, &held.sig) >= (v.seq, &v.sig) => {}
                _ => {
                    by_voter.insert(v.voter, v);
                }
            }
        }
        VoteSetTransaction {
            proposer,
            epoch_index,
            votes: by_voter.into_values().collect(),
        }
    }
}

/// The body of an amendment decision: `(AMEND, instance, i, C, C')`. The
/// decision with index `i` begins epoch `i`; the founding decision has
/// `i = 1` and no old constitution.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AmendmentBody {
    pub instance: InstanceId,
    pub epoch_index: u64,
    pub old: Option<Constitution>,
    pub new: Constitution,
}

/// An amendment decision `d = (h, x)`: the evidence vote set `h` plus the
/// body `x`. Also serves, byte for byte, as the payload of the next epoch's
/// constitutional genesis block.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AmendmentDecision {
    pub evidence: Vec<Vote>,
    pub body: AmendmentBody,
}

impl AmendmentDecision {
    /// Digest identifying the decision, used to key coronation tallies.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"covenant.decision.v1");
        h.update(serde_json::to_vec(self).expect("decision serializes"));
        h.finalize().into()
    }
}

/// Scans the ordered prefix of an epoch's vote-set transactions and fires
/// exactly once: at the first point where transactions from a
/// sigma-supermajority of distinct proposers in `P` have been ordered.
/// Returns the latest verified vote per voter across those transactions.
///
/// Deterministic in the prefix, hence identical at all correct agents.
pub fn aggregate_votes(
    ordered: &[VoteSetTransaction],
    constitution: &Constitution,
    epoch_index: u64,
) -> Option<Vec<Vote>> {
    let mut proposers: BTreeSet<AgentId> = BTreeSet::new();
    let mut latest: BTreeMap<AgentId, Vote> = BTreeMap::new();
    for tx in ordered {
        if !constitution.is_participant(tx.proposer) || tx.epoch_index != epoch_index {
            continue;
        }
        for v in &tx.votes {
            if !v.verify() {
                continue;
            }
            match latest.get(&v.voter) {
                Some(held) if (held.seq, &held.sig) >= (v.seq, &v.sig) => {}
                _ => {
                    latest.insert(v.voter, v.clone());
                }
            }
        }
        proposers.insert(tx.proposer);
        if constitution.is_supermajority(proposers.len()) {
            return Some(latest.into_values().collect());
        }
    }
    None
}

/// Membership rule: a candidate enters (or stays in) `P'` iff a
/// sigma-supermajority of the prevailing `P` ballots yes for it, and every
/// member of `P' \ P` additionally consents through a vote of its own.
pub fn amend_population(constitution: &Constitution, votes: &[Vote]) -> Vec<AgentId> {
    let member_votes: Vec<&Vote> = votes
        .iter()
        .filter(|v| constitution.is_participant(v.voter))
        .collect();
    let mut candidates: BTreeSet<AgentId> = constitution.participants.iter().copied().collect();
    for v in &member_votes {
        candidates.extend(v.ballots.keys().copied());
    }
    let consented: BTreeSet<AgentId> = votes
        .iter()
        .filter(|v| v.consent)
        .map(|v| v.voter)
        .collect();
    candidates
        .into_iter()
        .filter(|q| {
            let yes = member_votes
                .iter()
                .filter(|v| v.ballots.get(q) == Some(&true))
                .count();
            constitution.is_supermajority(yes)
                && (constitution.is_participant(*q) || consented.contains(q))
        })
        .collect()
}

/// The h-rule for the supermajority threshold. Raising picks the maximal
/// voted `sigma' > sigma` with `|{i : sigma_i >= sigma'}| > sigma' * n`;
/// failing that, lowering picks the minimal voted `sigma' < sigma` with
/// `|{i : sigma_i <= sigma'}| > sigma * n`; otherwise sigma stands.
///
/// Both branches range over voted values only: the supremum of each condition
/// is attained at a voted value, so this is exact.
pub fn amend_sigma(constitution: &Constitution, votes: &[Vote]) -> Sigma {
    let status_quo = constitution.sigma;
    let n = constitution.n();
    let prefs = member_prefs(constitution, votes, |v| v.sigma_pref, status_quo);

    let mut raise: Vec<Sigma> = prefs.iter().copied().filter(|s| *s > status_quo).collect();
    raise.sort_unstable();
    raise.dedup();
    for cand in raise.into_iter().rev() {
        let support = prefs.iter().filter(|s| **s >= cand).count();
        if cand.supermajority(support, n) {
            return cand;
        }
    }

    let mut lower: Vec<Sigma> = prefs.iter().copied().filter(|s| *s < status_quo).collect();
    lower.sort_unstable();
    lower.dedup();
    for cand in lower {
        let support = prefs.iter().filter(|s| **s <= cand).count();
        if status_quo.supermajority(support, n) {
            return cand;
        }
    }

    status_quo
}

/// The Suppress Outer-f rule for the timeout. If the median preference pulls
/// away from the status quo, the f most extreme votes on that side are
/// discarded before re-taking the median, so f adversarial votes can never
/// drag delta past what the honest majority supports.
pub fn amend_delta(constitution: &Constitution, votes: &[Vote]) -> u64 {
    let status_quo = constitution.delta;
    let f = constitution.fault_bound();
    let mut prefs = member_prefs(constitution, votes, |v| v.delta_pref, status_quo);
    if prefs.is_empty() {
        return status_quo;
    }
    prefs.sort_unstable();
    let median = prefs[(prefs.len() - 1) / 2];
    if median > status_quo {
        let keep = prefs.len().saturating_sub(f);
        if keep == 0 {
            return status_quo;
        }
        let trimmed = &prefs[..keep];
        let m = trimmed[(trimmed.len() - 1) / 2];
        if m > status_quo {
            return m;
        }
    } else if median < status_quo {
        let trimmed = &prefs[f.min(prefs.len())..];
        if trimmed.is_empty() {
            return status_quo;
        }
        let m = trimmed[(trimmed.len() - 1) / 2];
        if m < status_quo {
            return m;
        }
    }
    status_quo
}

/// One preference per member of `P`, defaulting absentees to the status quo.
fn member_prefs<T: Copy>(
    constitution: &Constitution,
    votes: &[Vote],
    pick: impl Fn(&Vote) -> T,
    status_quo: T,
) -> Vec<T> {
    let by_voter: BTreeMap<AgentId, &Vote> = votes
        .iter()
        .filter(|v| constitution.is_participant(v.voter))
        .map(|v| (v.voter, v))
        .collect();
    constitution
        .participants
        .iter()
        .map(|p| by_voter.get(p).map(|v| pick(v)).unwrap_or(status_quo))
        .collect()
}

/// Applies all three amendment rules to the aggregate `h` and wraps the
/// result as the decision that begins epoch `new_epoch_index`.
pub fn make_amendment_decision(
    prevailing: &Constitution,
    new_epoch_index: u64,
    instance: InstanceId,
    evidence: Vec<Vote>,
) -> AmendmentDecision {
    let new = Constitution {
        participants: amend_population(prevailing, &evidence),
        sigma: amend_sigma(prevailing, &evidence),
        delta: amend_delta(prevailing, &evidence),
    };
    AmendmentDecision {
        evidence,
        body: AmendmentBody {
            instance,
            epoch_index: new_epoch_index,
            old: Some(prevailing.clone()),
            new,
        },
    }
}

/// The founding decision (epoch 1): no old constitution, evidence signed by
/// every founder.
pub fn founding_decision(instance: InstanceId, founding: Constitution) -> AmendmentDecision {
    let evidence = founding
        .participants
        .iter()
        .map(|p| {
            let ballots = founding
                .participants
                .iter()
                .map(|q| (*q, true))
                .collect::<BTreeMap<_, _>>();
            Vote::signed(*p, 0, ballots, true, founding.sigma, founding.delta)
        })
        .collect();
    AmendmentDecision {
        evidence,
        body: AmendmentBody {
            instance,
            epoch_index: 1,
            old: None,
            new: founding,
        },
    }
}

/// Why a decision failed validation.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DecisionFault {
    /// Instance, index, or old constitution does not match the verifier's.
    BodyMismatch,
    /// A vote in the evidence fails signature verification.
    BadSignature,
    /// The evidence is not the first-supermajority aggregate the verifier
    /// derives from the ordered prefix (or the prefix has not yet produced
    /// one).
    NotFirstAggregate,
    /// The new constitution is not the deterministic re-derivation from the
    /// evidence.
    RuleMismatch,
    /// A founding decision lacks a vote from some founder, or carries an old
    /// constitution.
    FoundersIncomplete,
}

impl fmt::Display for DecisionFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DecisionFault::BodyMismatch => "body-mismatch",
            DecisionFault::BadSignature => "bad-signature",
            DecisionFault::NotFirstAggregate => "not-first",
            DecisionFault::RuleMismatch => "rule-mismatch",
            DecisionFault::FoundersIncomplete => "founders-incomplete",
        };
        f.write_str(s)
    }
}

/// Full verification of an amendment decision against the verifier's own
/// view: body fields, vote signatures, evidence-equals-first-aggregate, and
/// rule re-derivation. Founding decisions (`epoch_index == 1`) instead
/// require a verified vote from every founder and no old constitution.
pub fn validate_decision(
    decision: &AmendmentDecision,
    prevailing: Option<&Constitution>,
    expected_index: u64,
    instance: &InstanceId,
    ordered_prefix: &[VoteSetTransaction],
) -> Result<(), DecisionFault> {
    if decision.body.instance != *instance || decision.body.epoch_index != expected_index {
        return Err(DecisionFault::BodyMismatch);
    }
    if decision.evidence.iter().any(|v| !v.verify()) {
        return Err(DecisionFault::BadSignature);
    }

    if decision.body.epoch_index == 1 {
        if decision.body.old.is_some() {
            return Err(DecisionFault::FoundersIncomplete);
        }
        let signers: BTreeSet<AgentId> = decision.evidence.iter().map(|v| v.voter).collect();
        if !decision
            .body
            .new
            .participants
            .iter()
            .all(|p| signers.contains(p))
        {
            return Err(DecisionFault::FoundersIncomplete);
        }
        return Ok(());
    }

    let prevailing = match prevailing {
        Some(c) => c,
        None => return Err(DecisionFault::BodyMismatch),
    };
    if decision.body.old.as_ref() != Some(prevailing) {
        return Err(DecisionFault::BodyMismatch);
    }
    let aggregate =
        match aggregate_votes(ordered_prefix, prevailing, decision.body.epoch_index - 1) {
            Some(h) => h,
            None => return Err(DecisionFault::NotFirstAggregate),
        };
    let mut claimed = decision.evidence.clone();
    claimed.sort_unstable();
    let mut derived = aggregate.clone();
    derived.sort_unstable();
    if claimed != derived {
        return Err(DecisionFault::NotFirstAggregate);
    }
    let rederived = make_amendment_decision(
        prevailing,
        decision.body.epoch_index,
        instance.clone(),
        aggregate,
    );
    if rederived.body.new != decision.body.new {
        return Err(DecisionFault::RuleMismatch);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigma(n: u64, d: u64) -> Sigma {
        Sigma::new(n, d).unwrap()
    }

    fn constitution(n: u64, s: Sigma, delta: u64) -> Constitution {
        Constitution::new((1..=n).map(AgentId).collect(), s, delta).unwrap()
    }

    fn plain_vote(voter: u64, seq: u64, c: &Constitution) -> Vote {
        Vote::signed(
            AgentId(voter),
            seq,
            BTreeMap::new(),
            true,
            c.sigma,
            c.delta,
        )
    }

    fn pref_vote(voter: u64, sp: Sigma, dp: u64) -> Vote {
        Vote::signed(AgentId(voter), 0, BTreeMap::new(), true, sp, dp)
    }

    fn ballot_vote(voter: u64, yes: &[u64], c: &Constitution) -> Vote {
        let ballots = yes.iter().map(|q| (AgentId(*q), true)).collect();
        Vote::signed(AgentId(voter), 0, ballots, true, c.sigma, c.delta)
    }

    #[test]
    fn aggregate_fires_at_first_supermajority_of_proposers() {
        let c = constitution(4, sigma(5, 8), 10);
        let tx = |p: u64| VoteSetTransaction::new(AgentId(p), 1, vec![plain_vote(p, 0, &c)]);
        assert!(aggregate_votes(&[tx(1), tx(2)], &c, 1).is_none());
        let agg = aggregate_votes(&[tx(1), tx(2), tx(3)], &c, 1).unwrap();
        assert_eq!(agg.len(), 3);
        // Duplicate proposers do not count twice.
        assert!(aggregate_votes(&[tx(1), tx(1), tx(1)], &c, 1).is_none());
    }

    #[test]
    fn aggregate_keeps_highest_seq_per_voter() {
        let c = constitution(4, sigma(5, 8), 10);
        let old = plain_vote(4, 1, &c);
        let new = plain_vote(4, 2, &c);
        let txs = vec![
            VoteSetTransaction::new(AgentId(1), 1, vec![old.clone(), plain_vote(1, 0, &c)]),
            VoteSetTransaction::new(AgentId(2), 1, vec![new.clone(), plain_vote(2, 0, &c)]),
            VoteSetTransaction::new(AgentId(3), 1, vec![old, plain_vote(3, 0, &c)]),
        ];
        let agg = aggregate_votes(&txs, &c, 1).unwrap();
        let v4 = agg.iter().find(|v| v.voter == AgentId(4)).unwrap();
        assert_eq!(v4.seq, 2);
        // Determinism: same prefix, same aggregate.
        assert_eq!(agg, aggregate_votes(&txs, &c, 1).unwrap());
    }

    #[test]
    fn aggregate_ignores_non_participant_proposers_and_forgeries() {
        let c = constitution(4, sigma(5, 8), 10);
        let mut forged = plain_vote(2, 5, &c);
        forged.sig = VoteSig([7; 32]);
        let txs = vec![
            VoteSetTransaction::new(AgentId(9), 1, vec![plain_vote(9, 0, &c)]),
            VoteSetTransaction::new(AgentId(1), 1, vec![plain_vote(1, 0, &c), forged]),
            VoteSetTransaction::new(AgentId(2), 1, vec![plain_vote(2, 0, &c)]),
            VoteSetTransaction::new(AgentId(3), 1, vec![plain_vote(3, 0, &c)]),
        ];
        let agg = aggregate_votes(&txs, &c, 1).unwrap();
        assert!(agg.iter().all(|v| v.voter != AgentId(9)));
        let v2 = agg.iter().find(|v| v.voter == AgentId(2)).unwrap();
        assert_eq!(v2.seq, 0, "forged seq-5 vote discarded");
    }

    #[test]
    fn population_incumbent_retained_with_three_of_four() {
        let c = constitution(4, sigma(5, 8), 10);
        let votes: Vec<Vote> = (1..=3).map(|v| ballot_vote(v, &[4], &c)).collect();
        let p = amend_population(&c, &votes);
        assert!(p.contains(&AgentId(4)), "3 > 0.625*4 retains the incumbent");
        assert!(!p.contains(&AgentId(1)), "no ballots for p1");
    }

    #[test]
    fn population_newcomer_needs_consent() {
        let c = constitution(4, sigma(5, 8), 10);
        let everyone = [1, 2, 3, 4, 5];
        let votes: Vec<Vote> = (1..=4).map(|v| ballot_vote(v, &everyone, &c)).collect();
        let p = amend_population(&c, &votes);
        assert!(
            !p.contains(&AgentId(5)),
            "unanimous support without consent excludes the newcomer"
        );
        let mut votes = votes;
        votes.push(ballot_vote(5, &everyone, &c)); // consent = true
        let p = amend_population(&c, &votes);
        assert_eq!(p, (1..=5).map(AgentId).collect::<Vec<_>>());
    }

    #[test]
    fn population_all_abstain_empties_the_set() {
        let c = constitution(4, sigma(5, 8), 10);
        let votes: Vec<Vote> = (1..=4).map(|v| plain_vote(v, 0, &c)).collect();
        assert!(amend_population(&c, &votes).is_empty());
    }

    #[test]
    fn sigma_raise_requires_supermajority_at_new_level() {
        // Raising 2/3 -> 3/4 needs strictly more than 3/4 of n at >= 3/4.
        let c = constitution(8, sigma(2, 3), 10);
        let votes_for = |k: u64| -> Vec<Vote> {
            (1..=8)
                .map(|v| {
                    let pref = if v <= k { sigma(3, 4) } else { sigma(2, 3) };
                    pref_vote(v, pref, c.delta)
                })
                .collect()
        };
        // 6 of 8 is exactly 3/4*n: not enough.
        assert_eq!(amend_sigma(&c, &votes_for(6)), sigma(2, 3));
        // 7 of 8 clears the bar.
        assert_eq!(amend_sigma(&c, &votes_for(7)), sigma(3, 4));
    }

    #[test]
    fn sigma_picks_maximal_supported_raise() {
        let c = constitution(4, sigma(1, 2), 10);
        let votes = vec![
            pref_vote(1, sigma(3, 5), 10),
            pref_vote(2, sigma(3, 5), 10),
            pref_vote(3, sigma(3, 5), 10),
            pref_vote(4, sigma(1, 2), 10),
        ];
        // |{sigma_i >= 3/5}| = 3 > 3/5*4 = 2.4.
        assert_eq!(amend_sigma(&c, &votes), sigma(3, 5));
    }

    #[test]
    fn sigma_unchanged_when_everyone_votes_status_quo() {
        let c = constitution(4, sigma(5, 8), 10);
        let votes: Vec<Vote> = (1..=4).map(|v| pref_vote(v, c.sigma, c.delta)).collect();
        assert_eq!(amend_sigma(&c, &votes), c.sigma);
    }

    #[test]
    fn sigma_lowering_needs_current_supermajority() {
        let c = constitution(4, sigma(3, 4), 10);
        let low = |k: u64| -> Vec<Vote> {
            (1..=4)
                .map(|v| {
                    let pref = if v <= k { sigma(1, 2) } else { sigma(3, 4) };
                    pref_vote(v, pref, c.delta)
                })
                .collect()
        };
        // 3 of 4 is exactly 3/4*n: not enough to lower.
        assert_eq!(amend_sigma(&c, &low(3)), sigma(3, 4));
        assert_eq!(amend_sigma(&c, &low(4)), sigma(1, 2));
    }

    #[test]
    fn delta_outlier_cannot_inflate_past_honest_median() {
        let c = constitution(4, sigma(5, 8), 10);
        assert_eq!(c.fault_bound(), 1);
        let votes = vec![
            pref_vote(1, c.sigma, 12),
            pref_vote(2, c.sigma, 12),
            pref_vote(3, c.sigma, 12),
            pref_vote(4, c.sigma, 100),
        ];
        assert_eq!(amend_delta(&c, &votes), 12);
    }

    #[test]
    fn delta_status_quo_median_leaves_delta_unchanged() {
        let c = constitution(4, sigma(5, 8), 10);
        let votes = vec![
            pref_vote(1, c.sigma, 10),
            pref_vote(2, c.sigma, 10),
            pref_vote(3, c.sigma, 10),
            pref_vote(4, c.sigma, 100),
        ];
        assert_eq!(amend_delta(&c, &votes), 10);
    }

    #[test]
    fn delta_unanimous_honest_shrink_succeeds_despite_adversary() {
        let c = constitution(4, sigma(5, 8), 10);
        let votes = vec![
            pref_vote(1, c.sigma, 5),
            pref_vote(2, c.sigma, 5),
            pref_vote(3, c.sigma, 5),
            pref_vote(4, c.sigma, 10), // adversarial hold-out, f = 1 < n/3 + 1
        ];
        assert_eq!(amend_delta(&c, &votes), 5);
    }

    #[test]
    fn identity_amendment_preserves_constitution() {
        let c = constitution(4, sigma(5, 8), 10);
        let everyone = [1, 2, 3, 4];
        let votes: Vec<Vote> = (1..=4).map(|v| ballot_vote(v, &everyone, &c)).collect();
        let d = make_amendment_decision(&c, 2, InstanceId::from("t"), votes);
        assert_eq!(d.body.new, c);
        assert_eq!(d.body.old.as_ref(), Some(&c));
    }

    #[test]
    fn founding_decision_validates() {
        let c = constitution(4, sigma(5, 8), 10);
        let inst = InstanceId::from("t");
        let d = founding_decision(inst.clone(), c.clone());
        assert_eq!(validate_decision(&d, None, 1, &inst, &[]), Ok(()));
        let mut missing = d.clone();
        missing.evidence.pop();
        assert_eq!(
            validate_decision(&missing, None, 1, &inst, &[]),
            Err(DecisionFault::FoundersIncomplete)
        );
    }

    #[test]
    fn validate_rejects_forged_new_constitution() {
        let c = constitution(4, sigma(5, 8), 10);
        let inst = InstanceId::from("t");
        let everyone = [1, 2, 3, 4];
        let txs: Vec<VoteSetTransaction> = (1..=3)
            .map(|p| {
                VoteSetTransaction::new(
                    AgentId(p),
                    1,
                    (1..=4).map(|v| ballot_vote(v, &everyone, &c)).collect(),
                )
            })
            .collect();
        let h = aggregate_votes(&txs, &c, 1).unwrap();
        let good = make_amendment_decision(&c, 2, inst.clone(), h);
        assert_eq!(validate_decision(&good, Some(&c), 2, &inst, &txs), Ok(()));

        let mut forged = good.clone();
        forged.body.new.delta = 99;
        assert_eq!(
            validate_decision(&forged, Some(&c), 2, &inst, &txs),
            Err(DecisionFault::RuleMismatch)
        );
    }

    #[test]
    fn validate_rejects_non_first_supermajority() {
        let c = constitution(4, sigma(5, 8), 10);
        let inst = InstanceId::from("t");
        let tx = |p: u64, seq: u64| {
            VoteSetTransaction::new(AgentId(p), 1, vec![plain_vote(p, seq, &c)])
        };
        let prefix = vec![tx(1, 0), tx(2, 0), tx(3, 0), tx(4, 1)];
        // Take the *last* three transactions as claimed evidence.
        let wrong_h = aggregate_votes(&prefix[1..], &c, 1).unwrap();
        let bad = make_amendment_decision(&c, 2, inst.clone(), wrong_h);
        assert_eq!(
            validate_decision(&bad, Some(&c), 2, &inst, &prefix),
            Err(DecisionFault::NotFirstAggregate)
        );
    }

    #[test]
    fn validate_rejects_wrong_body() {
        let c = constitution(4, sigma(5, 8), 10);
        let inst = InstanceId::from("t");
        let txs: Vec<VoteSetTransaction> = (1..=3)
            .map(|p| VoteSetTransaction::new(AgentId(p), 1, vec![plain_vote(p, 0, &c)]))
            .collect();
        let h = aggregate_votes(&txs, &c, 1).unwrap();
        let d = make_amendment_decision(&c, 2, inst.clone(), h);
        assert_eq!(
            validate_decision(&d, Some(&c), 3, &inst, &txs),
            Err(DecisionFault::BodyMismatch)
        );
        assert_eq!(
            validate_decision(&d, Some(&c), 2, &InstanceId::from("other"), &txs),
            Err(DecisionFault::BodyMismatch)
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_sigma() -> impl Strategy<Value = Sigma> {
            (1u64..=16).prop_map(|k| Sigma::new(8 + k, 2 * 8 + 2).unwrap_or(Sigma::HALF))
        }

        proptest! {
            // Suppress Outer-f safety: if every honest preference is at most
            // the status quo, f adversarial votes cannot raise delta; and
            // symmetrically downward.
            #[test]
            fn suppress_outer_f_bounds_delta(
                n in 4usize..=7,
                honest in proptest::collection::vec(1u64..=10, 7),
                adversarial in proptest::collection::vec(1u64..=1_000_000, 7),
            ) {
                let c = Constitution::new(
                    (1..=n as u64).map(AgentId).collect(),
                    Sigma::new(2, 3).unwrap(),
                    10,
                ).unwrap();
                let f = c.fault_bound();
                prop_assume!(f < n);
                let votes: Vec<Vote> = (0..n)
                    .map(|i| {
                        let pref = if i < n - f {
                            honest[i].min(c.delta) // honest prefs <= delta
                        } else {
                            adversarial[i]
                        };
                        Vote::signed(AgentId(i as u64 + 1), 0, BTreeMap::new(), true, c.sigma, pref)
                    })
                    .collect();
                prop_assert!(amend_delta(&c, &votes) <= c.delta);
            }

            // h-rule self-consistency: a raise satisfies its own condition at
            // the new level; a lower was backed by the current supermajority.
            #[test]
            fn h_rule_is_self_consistent(
                n in 3usize..=7,
                prefs in proptest::collection::vec(arb_sigma(), 7),
            ) {
                let c = Constitution::new(
                    (1..=n as u64).map(AgentId).collect(),
                    Sigma::new(5, 8).unwrap(),
                    10,
                ).unwrap();
                let votes: Vec<Vote> = (0..n)
                    .map(|i| Vote::signed(AgentId(i as u64 + 1), 0, BTreeMap::new(), true, prefs[i], 10))
                    .collect();
                let out = amend_sigma(&c, &votes);
                let held: Vec<Sigma> = member_prefs(&c, &votes, |v| v.sigma_pref, c.sigma);
                if out > c.sigma {
                    let support = held.iter().filter(|s| **s >= out).count();
                    prop_assert!(out.supermajority(support, n));
                } else if out < c.sigma {
                    let support = held.iter().filter(|s| **s <= out).count();
                    prop_assert!(c.sigma.supermajority(support, n));
                }
            }

            // Sybil safety of membership: with adversarial yes-ballots at or
            // below the supermajority bar, a candidate opposed by every
            // honest voter stays out.
            #[test]
            fn membership_resists_adversarial_minorities(
                n in 4usize..=7,
                adversarial in 0usize..=7,
            ) {
                let c = Constitution::new(
                    (1..=n as u64).map(AgentId).collect(),
                    Sigma::new(2, 3).unwrap(),
                    10,
                ).unwrap();
                let target = AgentId(99);
                let a = adversarial.min(n);
                // strictly fewer than the margin: a <= sigma*n
                prop_assume!(!c.is_supermajority(a));
                let votes: Vec<Vote> = (0..n)
                    .map(|i| {
                        let mut ballots = BTreeMap::new();
                        ballots.insert(target, i < a); // adversaries yes, honest no
                        Vote::signed(AgentId(i as u64 + 1), 0, ballots, true, c.sigma, 10)
                    })
                    .collect();
                prop_assert!(!amend_population(&c, &votes).contains(&target));
            }
        }
    }
}
