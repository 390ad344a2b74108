//! Blocks, payloads, identifiers, and the canonical wire encoding.
//!
//! A block is a triple of signed hash, payload, and a pointer set naming
//! earlier blocks. Its identifier is the digest of the canonical encoding:
//! length-prefixed fields in the fixed order
//!
//! ```text
//! epoch-id | creator | payload-tag | payload-bytes | sorted refs
//! ```
//!
//! documented field by field in [`Block::canonical_bytes`], so alternate
//! implementations interoperate at trace level. Hashing and signing are the
//! deterministic stubs of [`StubSigner`]; the signature scheme is
//! `(creator, digest)`, with the creator recoverable from every identifier.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::governance::{AmendmentDecision, Vote, VoteSetTransaction};
use crate::types::{AgentId, Constitution};

/// An opaque user transaction.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tx(pub Vec<u8>);

impl Tx {
    pub fn from_str(s: &str) -> Tx {
        Tx(s.as_bytes().to_vec())
    }
}

impl fmt::Debug for Tx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) => write!(f, "tx({s})"),
            Err(_) => write!(f, "tx(0x{})", hex(&self.0)),
        }
    }
}

/// A 32-byte collision-resistant digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &hex(&self.0)[..12])
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex(&self.0))
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = unhex(&s).ok_or_else(|| serde::de::Error::custom("bad digest hex"))?;
        if bytes.len() != 32 {
            return Err(serde::de::Error::custom("digest must be 32 bytes"));
        }
        let mut out = [0; 32];
        out.copy_from_slice(&bytes);
        Ok(Digest(out))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok())
        .collect()
}

/// Block identifier: the signed digest, with the signer recoverable.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub digest: Digest,
    pub signer: AgentId,
}

impl BlockId {
    /// The sentinel used as the epoch field of constitutional genesis blocks
    /// themselves (a genesis block cannot name its own digest).
    pub const NIL: BlockId = BlockId {
        digest: Digest([0; 32]),
        signer: AgentId::GENESIS,
    };

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.digest.0);
        out.extend_from_slice(&self.signer.0.to_le_bytes());
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}@{:?}", self.digest, self.signer)
    }
}

/// Block payloads. `Empty` is the protocol's bottom payload; `Nack`,
/// `Inform`, and `Coronate` mark control blocks that are never inserted into
/// any blocklace.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Payload {
    Empty,
    Transactions(Vec<Tx>),
    Votes(VoteSetTransaction),
    Decision(AmendmentDecision),
    Nack(BlockId),
    Inform,
    Coronate(AmendmentDecision),
}

impl Payload {
    pub fn tag(&self) -> u8 {
        match self {
            Payload::Empty => 0,
            Payload::Transactions(_) => 1,
            Payload::Votes(_) => 2,
            Payload::Decision(_) => 3,
            Payload::Nack(_) => 4,
            Payload::Inform => 5,
            Payload::Coronate(_) => 6,
        }
    }

    /// Whether the payload is the protocol's bottom element.
    pub fn is_empty(&self) -> bool {
        matches!(self, Payload::Empty)
    }

    /// Ordinary payloads may enter a blocklace; the rest are
    /// dissemination-inducing or epoch-handover control payloads.
    pub fn is_ordinary(&self) -> bool {
        !matches!(self, Payload::Nack(_) | Payload::Inform | Payload::Coronate(_))
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Payload::Empty | Payload::Inform => {}
            Payload::Transactions(txs) => {
                write_u64(&mut out, txs.len() as u64);
                for tx in txs {
                    write_bytes(&mut out, &tx.0);
                }
            }
            Payload::Votes(vs) => write_vote_set(&mut out, vs),
            Payload::Decision(d) | Payload::Coronate(d) => write_decision(&mut out, d),
            Payload::Nack(target) => target.write_to(&mut out),
        }
        out
    }
}

/// A signed DAG vertex: identifier, creator, payload, pointer set, and the
/// genesis identifier of the epoch it belongs to.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    pub creator: AgentId,
    pub payload: Payload,
    pub refs: BTreeSet<BlockId>,
    pub epoch: BlockId,
}

impl Block {
    /// The canonical encoding the digest is computed over. Every multi-byte
    /// integer is little-endian; variable-length fields carry a `u64` length
    /// prefix; refs are sorted ascending by `(digest, signer)`.
    pub fn canonical_bytes(
        creator: AgentId,
        payload: &Payload,
        refs: &BTreeSet<BlockId>,
        epoch: BlockId,
    ) -> Vec<u8> {
        let mut out = Vec::new();
        epoch.write_to(&mut out);
        out.extend_from_slice(&creator.0.to_le_bytes());
        out.push(payload.tag());
        write_bytes(&mut out, &payload.canonical_bytes());
        write_u64(&mut out, refs.len() as u64);
        for r in refs {
            r.write_to(&mut out);
        }
        out
    }

    pub fn is_genesis(&self) -> bool {
        self.creator == AgentId::GENESIS && self.refs.is_empty()
    }

    /// The amendment decision this block carries, if any.
    pub fn decision(&self) -> Option<&AmendmentDecision> {
        match &self.payload {
            Payload::Decision(d) | Payload::Coronate(d) => Some(d),
            _ => None,
        }
    }
}

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    write_u64(out, bytes.len() as u64);
    out.extend_from_slice(bytes);
}

fn write_vote(out: &mut Vec<u8>, v: &Vote) {
    write_u64(out, v.voter.0);
    write_u64(out, v.seq);
    write_u64(out, v.ballots.len() as u64);
    for (agent, yes) in &v.ballots {
        write_u64(out, agent.0);
        out.push(*yes as u8);
    }
    out.push(v.consent as u8);
    write_u64(out, v.sigma_pref.numer());
    write_u64(out, v.sigma_pref.denom());
    write_u64(out, v.delta_pref);
    out.extend_from_slice(&v.sig.0);
}

fn write_vote_set(out: &mut Vec<u8>, vs: &VoteSetTransaction) {
    write_u64(out, vs.proposer.0);
    write_u64(out, vs.epoch_index);
    write_u64(out, vs.votes.len() as u64);
    for v in &vs.votes {
        write_vote(out, v);
    }
}

fn write_constitution(out: &mut Vec<u8>, c: &Constitution) {
    write_u64(out, c.participants.len() as u64);
    for p in &c.participants {
        write_u64(out, p.0);
    }
    write_u64(out, c.sigma.numer());
    write_u64(out, c.sigma.denom());
    write_u64(out, c.delta);
}

fn write_decision(out: &mut Vec<u8>, d: &AmendmentDecision) {
    write_u64(out, d.evidence.len() as u64);
    for v in &d.evidence {
        write_vote(out, v);
    }
    write_bytes(out, d.body.instance.0.as_bytes());
    write_u64(out, d.body.epoch_index);
    match &d.body.old {
        None => out.push(0),
        Some(c) => {
            out.push(1);
            write_constitution(out, c);
        }
    }
    write_constitution(out, &d.body.new);
}

/// Deterministic hashing-and-signing capability. The stub computes a domain-
/// separated SHA-256 over the canonical bytes and binds the creator into the
/// identifier; swap it for real key material without touching the protocol.
#[derive(Clone, Copy, Default, Debug)]
pub struct StubSigner;

impl StubSigner {
    /// Realises block construction: the identifier is the digest of
    /// `(payload, refs, epoch)` bound to `creator`.
    pub fn make_block(
        &self,
        creator: AgentId,
        payload: Payload,
        refs: BTreeSet<BlockId>,
        epoch: BlockId,
    ) -> Block {
        let bytes = Block::canonical_bytes(creator, &payload, &refs, epoch);
        let mut h = Sha256::new();
        h.update(b"covenant.block.v1");
        h.update(&bytes);
        let id = BlockId {
            digest: Digest(h.finalize().into()),
            signer: creator,
        };
        Block {
            id,
            creator,
            payload,
            refs,
            epoch,
        }
    }
}

/// Constructs the epoch's constitutional genesis block for a decision. All
/// agents derive the identical block (and hence epoch identifier) from the
/// decision alone.
pub fn genesis_block(decision: &AmendmentDecision) -> Block {
    StubSigner.make_block(
        AgentId::GENESIS,
        Payload::Decision(decision.clone()),
        BTreeSet::new(),
        BlockId::NIL,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::governance::founding_decision;
    use crate::types::{InstanceId, Sigma};
    use rand::{Rng, SeedableRng};

    fn id_of(bytes: &[u8]) -> BlockId {
        StubSigner
            .make_block(
                AgentId(1),
                Payload::Transactions(vec![Tx(bytes.to_vec())]),
                BTreeSet::new(),
                BlockId::NIL,
            )
            .id
    }

    #[test]
    fn construction_is_deterministic() {
        let refs = BTreeSet::new();
        let a = StubSigner.make_block(AgentId(1), Payload::Empty, refs.clone(), BlockId::NIL);
        let b = StubSigner.make_block(AgentId(1), Payload::Empty, refs, BlockId::NIL);
        assert_eq!(a.id, b.id);
        assert_eq!(a.id.signer, AgentId(1));
    }

    #[test]
    fn payload_changes_the_identifier() {
        // 1000 random payload pairs, no collisions among distinct payloads.
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x: [u8; 12] = rng.gen();
            let y: [u8; 12] = rng.gen();
            if x == y {
                continue;
            }
            assert_ne!(id_of(&x), id_of(&y));
        }
    }

    #[test]
    fn creator_and_refs_change_the_identifier() {
        let base = StubSigner.make_block(AgentId(1), Payload::Empty, BTreeSet::new(), BlockId::NIL);
        let other =
            StubSigner.make_block(AgentId(2), Payload::Empty, BTreeSet::new(), BlockId::NIL);
        assert_ne!(base.id, other.id);
        let with_ref = StubSigner.make_block(
            AgentId(1),
            Payload::Empty,
            [base.id].into_iter().collect(),
            BlockId::NIL,
        );
        assert_ne!(base.id, with_ref.id);
    }

    #[test]
    fn genesis_is_identical_across_derivations() {
        let c = Constitution::new(
            vec![AgentId(1), AgentId(2)],
            Sigma::new(1, 2).unwrap(),
            1,
        )
        .unwrap();
        let d = founding_decision(InstanceId::from("inst"), c);
        let g1 = genesis_block(&d);
        let g2 = genesis_block(&d);
        assert_eq!(g1, g2);
        assert!(g1.is_genesis());
        assert_eq!(g1.epoch, BlockId::NIL);
    }

    #[test]
    fn canonical_layout_is_frozen() {
        // Pins the wire layout: epoch-id (40) | creator (8) | tag (1) |
        // payload length (8) + payload | ref count (8) + refs (40 each).
        let refs: BTreeSet<BlockId> = [id_of(b"r")].into_iter().collect();
        let payload = Payload::Transactions(vec![Tx(b"ab".to_vec())]);
        let bytes = Block::canonical_bytes(AgentId(3), &payload, &refs, BlockId::NIL);
        assert_eq!(bytes.len(), 40 + 8 + 1 + 8 + (8 + 8 + 2) + 8 + 40);
        assert_eq!(&bytes[..32], &[0u8; 32], "nil epoch digest");
        assert_eq!(&bytes[32..40], &u64::MAX.to_le_bytes(), "genesis signer");
        assert_eq!(&bytes[40..48], &3u64.to_le_bytes(), "creator");
        assert_eq!(bytes[48], 1, "transactions tag");
        assert_eq!(&bytes[49..57], &18u64.to_le_bytes(), "payload length");
        assert_eq!(&bytes[57..65], &1u64.to_le_bytes(), "tx count");
        assert_eq!(&bytes[65..73], &2u64.to_le_bytes(), "tx length");
        assert_eq!(&bytes[73..75], b"ab");
    }
}
