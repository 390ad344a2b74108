//! The blocklace: a closed set of blocks with the wave structure and the
//! predicates the protocol is built from.
//!
//! Terminology (all per-epoch, evaluated inside one `Blocklace`):
//!
//! * `a` *observes* `b` if `b` is reachable from `a` through refs
//!   (reflexive, transitive).
//! * two blocks *conflict* if neither observes the other; same-creator
//!   conflicting blocks are an *equivocation*.
//! * `a` *approves* `b` if it observes `b` and observes no block
//!   equivocating with `b`.
//! * wave `k > 0` spans depths `3k-2, 3k-1, 3k` (first, second, third
//!   round); wave 0 is the genesis singleton.
//! * a second-round block *endorses* at most one first-round block of its
//!   wave; a third-round block *ratifies* a first-round block by approving a
//!   sigma-supermajority of endorsers; a first-round block is *final* once a
//!   sigma-supermajority of third-round blocks ratify it.
//!
//! Endorsement and ratification depend only on the closure of the judging
//! block, so they are invariant properties; ratified/final are monotone in
//! the blocklace, quiescence is not.

use std::collections::{BTreeSet, HashMap};

use crate::block::{Block, BlockId, Payload};
use crate::types::{AgentId, Constitution};

/// Fixed-capacity-free bitset over dense block indices.
#[derive(Clone, Default, Debug, PartialEq, Eq)]
pub(crate) struct BitSet {
    words: Vec<u64>,
}

impl BitSet {
    pub fn set(&mut self, ix: u32) {
        let word = ix as usize / 64;
        if word >= self.words.len() {
            self.words.resize(word + 1, 0);
        }
        self.words[word] |= 1 << (ix % 64);
    }

    pub fn test(&self, ix: u32) -> bool {
        self.words
            .get(ix as usize / 64)
            .map_or(false, |w| w & (1 << (ix % 64)) != 0)
    }

    pub fn union_with(&mut self, other: &BitSet) {
        if other.words.len() > self.words.len() {
            self.words.resize(other.words.len(), 0);
        }
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= *b;
        }
    }
}

/// Position of a depth inside its wave.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RoundInWave {
    Genesis,
    First,
    Second,
    Third,
}

/// Result of the ratification/finality query for a first-round block.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct FinalityStatus {
    /// Third-round blocks of the wave that ratify the block.
    pub ratifiers: BTreeSet<BlockId>,
    pub is_ratified: bool,
    pub is_final: bool,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LaceError {
    #[error("unknown block {0:?}")]
    UnknownBlock(BlockId),
    #[error("block belongs to a different epoch")]
    WrongEpoch,
    #[error("dangling refs: {0:?}")]
    Dangling(Vec<BlockId>),
    #[error("invalid block: {0}")]
    Invalid(&'static str),
}

/// A closed, indexed set of blocks for one epoch.
#[derive(Clone, Debug)]
pub struct Blocklace {
    constitution: Constitution,
    genesis: BlockId,
    blocks: Vec<Block>,
    index: HashMap<BlockId, u32>,
    closure: Vec<BitSet>,
    depth: Vec<u32>,
    by_depth: Vec<Vec<u32>>,
    by_creator: HashMap<AgentId, Vec<u32>>,
}

impl Blocklace {
    /// Starts an epoch's blocklace from its constitutional genesis block.
    pub fn new(genesis: Block, constitution: Constitution) -> Blocklace {
        assert!(genesis.is_genesis(), "epoch must start from a genesis block");
        let id = genesis.id;
        let mut lace = Blocklace {
            constitution,
            genesis: id,
            blocks: Vec::new(),
            index: HashMap::new(),
            closure: Vec::new(),
            depth: Vec::new(),
            by_depth: vec![Vec::new()],
            by_creator: HashMap::new(),
        };
        lace.index.insert(id, 0);
        lace.blocks.push(genesis);
        let mut c = BitSet::default();
        c.set(0);
        lace.closure.push(c);
        lace.depth.push(0);
        lace.by_depth[0].push(0);
        lace
    }

    pub fn constitution(&self) -> &Constitution {
        &self.constitution
    }

    pub fn genesis(&self) -> BlockId {
        self.genesis
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds at least the genesis
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn get(&self, id: BlockId) -> Option<&Block> {
        self.index.get(&id).map(|ix| &self.blocks[*ix as usize])
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter()
    }

    pub fn max_depth(&self) -> u32 {
        (self.by_depth.len() - 1) as u32
    }

    /// Block ids at exactly depth `r` (round `r`), empty beyond the frontier.
    pub fn round(&self, r: u32) -> impl Iterator<Item = &Block> {
        self.by_depth
            .get(r as usize)
            .into_iter()
            .flatten()
            .map(|ix| &self.blocks[*ix as usize])
    }

    fn ix(&self, id: BlockId) -> Result<u32, LaceError> {
        self.index
            .get(&id)
            .copied()
            .ok_or(LaceError::UnknownBlock(id))
    }

    /// Inserts a block, enforcing closedness and validity. Returns `false`
    /// if the block was already present. Equivocating blocks are admitted —
    /// detecting them is the job of `approves` — but structurally invalid
    /// blocks (wrong epoch, dangling refs, unadvanced predecessor round,
    /// non-participant creator, control payloads) are rejected.
    pub fn insert(&mut self, block: Block) -> Result<bool, LaceError> {
        if self.contains(block.id) {
            return Ok(false);
        }
        self.check_valid(&block)?;
        let ix = self.blocks.len() as u32;
        let mut closure = BitSet::default();
        closure.set(ix);
        let mut depth = 0;
        for r in &block.refs {
            let rix = self.ix(*r).expect("checked refs");
            closure.union_with(&self.closure[rix as usize]);
            depth = depth.max(self.depth[rix as usize] + 1);
        }
        self.index.insert(block.id, ix);
        self.by_creator.entry(block.creator).or_default().push(ix);
        if self.by_depth.len() <= depth as usize {
            self.by_depth.resize(depth as usize + 1, Vec::new());
        }
        self.by_depth[depth as usize].push(ix);
        self.depth.push(depth);
        self.closure.push(closure);
        self.blocks.push(block);
        Ok(true)
    }

    /// Block validity: well-formed, by a participant, refs to strictly
    /// shallower existing blocks, and round `depth-1` advanced within the
    /// block's own closure.
    pub fn check_valid(&self, block: &Block) -> Result<(), LaceError> {
        if block.epoch != self.genesis {
            return Err(LaceError::WrongEpoch);
        }
        if !block.payload.is_ordinary() {
            return Err(LaceError::Invalid("control payloads never enter the blocklace"));
        }
        if block.refs.is_empty() || block.creator == AgentId::GENESIS {
            // Depth 0 is reserved for the constitutional genesis block.
            return Err(LaceError::Invalid("only the genesis block may be initial"));
        }
        if !self.constitution.is_participant(block.creator) {
            return Err(LaceError::Invalid("creator is not a participant"));
        }
        let missing: Vec<BlockId> = block
            .refs
            .iter()
            .filter(|r| !self.contains(**r))
            .copied()
            .collect();
        if !missing.is_empty() {
            return Err(LaceError::Dangling(missing));
        }
        let mut view = BitSet::default();
        let mut depth = 0;
        for r in &block.refs {
            let rix = self.ix(*r).expect("present");
            view.union_with(&self.closure[rix as usize]);
            depth = depth.max(self.depth[rix as usize] + 1);
        }
        if !self.advanced_in(depth - 1, Some(&view)) {
            return Err(LaceError::Invalid("predecessor round not advanced in closure"));
        }
        Ok(())
    }

    /// `depth`, wave number, and round-in-wave of a block.
    pub fn depth_round_wave(&self, id: BlockId) -> Result<(u32, u32, RoundInWave), LaceError> {
        let ix = self.ix(id)?;
        let d = self.depth[ix as usize];
        Ok((d, wave_of(d), round_in_wave(d)))
    }

    /// Reflexive, transitive reachability through refs.
    pub fn observes(&self, a: BlockId, b: BlockId) -> Result<bool, LaceError> {
        let (a, b) = (self.ix(a)?, self.ix(b)?);
        Ok(self.closure[a as usize].test(b))
    }

    /// `a` approves `b`: observes it and observes nothing equivocating with
    /// it.
    pub fn approves(&self, a: BlockId, b: BlockId) -> Result<bool, LaceError> {
        let (a, b) = (self.ix(a)?, self.ix(b)?);
        Ok(self.approves_ix(a, b))
    }

    fn approves_ix(&self, a: u32, b: u32) -> bool {
        if !self.closure[a as usize].test(b) {
            return false;
        }
        let creator = self.blocks[b as usize].creator;
        for &c in self.by_creator.get(&creator).into_iter().flatten() {
            if c != b
                && self.closure[a as usize].test(c)
                && !self.closure[b as usize].test(c)
                && !self.closure[c as usize].test(b)
            {
                return false;
            }
        }
        true
    }

    /// The closure `[b]` as block ids.
    pub fn closure_of(&self, id: BlockId) -> Result<Vec<BlockId>, LaceError> {
        let ix = self.ix(id)?;
        Ok(self
            .blocks
            .iter()
            .enumerate()
            .filter(|(i, _)| self.closure[ix as usize].test(*i as u32))
            .map(|(_, b)| b.id)
            .collect())
    }

    /// Whether round `r` is advanced in the full blocklace.
    pub fn is_advanced(&self, r: u32) -> bool {
        self.advanced_in(r, None)
    }

    /// Round advance, evaluated under an optional closure restriction:
    /// round 0 is trivially advanced; a first round is advanced if it has a
    /// sigma-supermajority, or a formal leader block, or follows a quiescent
    /// wave and is non-empty; second and third rounds need a
    /// sigma-supermajority.
    fn advanced_in(&self, r: u32, mask: Option<&BitSet>) -> bool {
        if r == 0 {
            return true;
        }
        let creators: BTreeSet<AgentId> = self
            .round_ixs(r, mask)
            .map(|ix| self.blocks[ix as usize].creator)
            .collect();
        if creators.is_empty() {
            return false;
        }
        match round_in_wave(r) {
            RoundInWave::Second | RoundInWave::Third => {
                self.constitution.is_supermajority(creators.len())
            }
            RoundInWave::First => {
                self.constitution.is_supermajority(creators.len())
                    || creators.contains(&self.constitution.leader_at(r))
                    || self.quiescent_in(wave_of(r) - 1, mask)
            }
            RoundInWave::Genesis => unreachable!("r > 0"),
        }
    }

    fn round_ixs<'a>(
        &'a self,
        r: u32,
        mask: Option<&'a BitSet>,
    ) -> impl Iterator<Item = u32> + 'a {
        self.by_depth
            .get(r as usize)
            .into_iter()
            .flatten()
            .copied()
            .filter(move |ix| mask.map_or(true, |m| m.test(*ix)))
    }

    /// Whether wave `k` is quiescent in the full blocklace: it holds a final
    /// block, every other block of the wave is empty, and no block anywhere
    /// conflicts with the final block. Not monotone — later conflicting or
    /// non-empty blocks can retract it.
    pub fn is_quiescent_wave(&self, k: u32) -> bool {
        self.quiescent_in(k, None)
    }

    fn quiescent_in(&self, k: u32, mask: Option<&BitSet>) -> bool {
        if k == 0 {
            return true;
        }
        let first = 3 * k - 2;
        let Some(final_ix) = self.final_in(first, mask) else {
            return false;
        };
        for d in first..=3 * k {
            for ix in self.round_ixs(d, mask) {
                if ix != final_ix && !self.blocks[ix as usize].payload.is_empty() {
                    return false;
                }
            }
        }
        // No conflicting block anywhere: everything either observes the
        // final block or is observed by it.
        let fc = &self.closure[final_ix as usize];
        for ix in 0..self.blocks.len() as u32 {
            if mask.map_or(false, |m| !m.test(ix)) {
                continue;
            }
            if ix != final_ix && !fc.test(ix) && !self.closure[ix as usize].test(final_ix) {
                return false;
            }
        }
        true
    }

    /// The final first-round block of the wave starting at depth `first`, if
    /// any, under an optional restriction.
    fn final_in(&self, first: u32, mask: Option<&BitSet>) -> Option<u32> {
        self.round_ixs(first, mask)
            .find(|b1| self.final_status_ix(*b1, mask).1)
    }

    /// (ratifiers, is_final) for a first-round block under a restriction.
    fn final_status_ix(&self, b1: u32, mask: Option<&BitSet>) -> (Vec<u32>, bool) {
        let d = self.depth[b1 as usize];
        debug_assert_eq!(round_in_wave(d), RoundInWave::First);
        let ratifiers: Vec<u32> = self
            .round_ixs(d + 2, mask)
            .filter(|b3| self.ratifies_ix(*b3, b1))
            .collect();
        let creators: BTreeSet<AgentId> = ratifiers
            .iter()
            .map(|ix| self.blocks[*ix as usize].creator)
            .collect();
        let is_final = self.constitution.is_supermajority(creators.len());
        (ratifiers, is_final)
    }

    /// Whether second-round `b2` endorses first-round `b1`. Evaluated over
    /// `[b2]` only, so endorsement is an invariant property of `b2`: if the
    /// most recent wave preceding `b1` is quiescent in `[b2]`, `b1` must be
    /// the only first-round block of its wave approved by `b2`; if
    /// non-quiescent, `b1` must be the formal leader's block.
    pub fn endorses(&self, b2: BlockId, b1: BlockId) -> Result<bool, LaceError> {
        let (b2, b1) = (self.ix(b2)?, self.ix(b1)?);
        Ok(self.endorses_ix(b2, b1))
    }

    fn endorses_ix(&self, b2: u32, b1: u32) -> bool {
        let d1 = self.depth[b1 as usize];
        let d2 = self.depth[b2 as usize];
        if round_in_wave(d1) != RoundInWave::First
            || round_in_wave(d2) != RoundInWave::Second
            || d2 != d1 + 1
        {
            return false;
        }
        if !self.approves_ix(b2, b1) {
            return false;
        }
        let view = &self.closure[b2 as usize];
        if self.quiescent_in(wave_of(d1) - 1, Some(view)) {
            // Sole approved first-round block of the wave.
            self.round_ixs(d1, Some(view))
                .all(|x| x == b1 || !self.approves_ix(b2, x))
        } else {
            self.blocks[b1 as usize].creator == self.constitution.leader_at(d1)
        }
    }

    /// Whether third-round `b3` ratifies first-round `b1`: `b3` approves a
    /// sigma-supermajority of second-round blocks that endorse `b1`.
    /// Intrinsic to `[b3]`.
    pub fn ratifies(&self, b3: BlockId, b1: BlockId) -> Result<bool, LaceError> {
        let (b3, b1) = (self.ix(b3)?, self.ix(b1)?);
        Ok(self.ratifies_ix(b3, b1))
    }

    fn ratifies_ix(&self, b3: u32, b1: u32) -> bool {
        let d1 = self.depth[b1 as usize];
        let d3 = self.depth[b3 as usize];
        if round_in_wave(d1) != RoundInWave::First
            || round_in_wave(d3) != RoundInWave::Third
            || d3 != d1 + 2
        {
            return false;
        }
        let view = &self.closure[b3 as usize];
        let endorsers: BTreeSet<AgentId> = self
            .round_ixs(d1 + 1, Some(view))
            .filter(|b2| self.approves_ix(b3, *b2) && self.endorses_ix(*b2, b1))
            .map(|b2| self.blocks[b2 as usize].creator)
            .collect();
        self.constitution.is_supermajority(endorsers.len())
    }

    /// Ratifiers and the ratified/final flags for a first-round block.
    /// Monotone in the blocklace. Non-first-round inputs get an empty
    /// status.
    pub fn finality_status(&self, b1: BlockId) -> Result<FinalityStatus, LaceError> {
        let ix = self.ix(b1)?;
        if round_in_wave(self.depth[ix as usize]) != RoundInWave::First {
            return Ok(FinalityStatus::default());
        }
        let (ratifiers, is_final) = self.final_status_ix(ix, None);
        Ok(FinalityStatus {
            is_ratified: !ratifiers.is_empty(),
            is_final,
            ratifiers: ratifiers
                .into_iter()
                .map(|ix| self.blocks[ix as usize].id)
                .collect(),
        })
    }

    /// The deepest first-round block that is final in the blocklace, below
    /// no constraint, or `None`.
    pub fn deepest_final(&self) -> Option<BlockId> {
        let mut d = self.max_depth();
        while d >= 1 {
            if round_in_wave(d) == RoundInWave::First {
                if let Some(ix) = self.final_in(d, None) {
                    return Some(self.blocks[ix as usize].id);
                }
            }
            d -= 1;
        }
        None
    }

    /// The chain of ratified blocks `tau` recurses through, ending at `b`,
    /// ordered shallowest first. Each step locates the most recent block
    /// ratified within the closure of the previous one (ties broken by
    /// creator then digest; under a safe constitution ties cannot occur).
    pub fn tau_spine(&self, b: BlockId) -> Result<Vec<BlockId>, LaceError> {
        let mut cur = self.ix(b)?;
        let mut spine = vec![cur];
        loop {
            let view = self.closure[cur as usize].clone();
            let mut found: Option<u32> = None;
            let mut d = self.depth[cur as usize];
            while d >= 1 && found.is_none() {
                if round_in_wave(d) == RoundInWave::First {
                    found = self
                        .round_ixs(d, Some(&view))
                        .filter(|x| *x != cur && self.ratified_in(*x, &view))
                        .max_by_key(|x| self.sort_key(*x));
                }
                d -= 1;
            }
            match found {
                Some(next) => {
                    spine.push(next);
                    cur = next;
                }
                None => break,
            }
        }
        spine.reverse();
        Ok(spine.into_iter().map(|ix| self.blocks[ix as usize].id).collect())
    }

    /// Whether some third-round block within `view` ratifies `b1`.
    fn ratified_in(&self, b1: u32, view: &BitSet) -> bool {
        let d = self.depth[b1 as usize];
        self.round_ixs(d + 2, Some(view))
            .any(|b3| self.ratifies_ix(b3, b1))
    }

    fn sort_key(&self, ix: u32) -> (u32, AgentId, crate::block::Digest) {
        let b = &self.blocks[ix as usize];
        (self.depth[ix as usize], b.creator, b.id.digest)
    }

    /// The deterministic total order induced by `b`: recurses through the
    /// ratified spine, then appends `xsort` of each difference set — the
    /// non-empty blocks approved by the spine block, topologically sorted by
    /// depth with `(creator, digest)` tie-breaks. The genesis block is
    /// structural and never ordered.
    pub fn tau(&self, b: BlockId) -> Result<Vec<BlockId>, LaceError> {
        let spine = self.tau_spine(b)?;
        let mut out = Vec::new();
        let mut prev: Option<u32> = None;
        for s in spine {
            let six = self.ix(s)?;
            let view = &self.closure[six as usize];
            let mut batch: Vec<u32> = (0..self.blocks.len() as u32)
                .filter(|ix| {
                    view.test(*ix)
                        && prev.map_or(true, |p| !self.closure[p as usize].test(*ix))
                        && self.depth[*ix as usize] > 0
                        && !self.blocks[*ix as usize].payload.is_empty()
                        && self.approves_ix(six, *ix)
                })
                .collect();
            batch.sort_by_key(|ix| self.sort_key(*ix));
            out.extend(batch.into_iter().map(|ix| self.blocks[ix as usize].id));
            prev = Some(six);
        }
        Ok(out)
    }

    /// Tips of the prefix `B_r` (all blocks of depth <= r): the blocks no
    /// other prefix block observes. New blocks of round `r+1` point to
    /// exactly these.
    pub fn tips_of_prefix(&self, r: u32) -> BTreeSet<BlockId> {
        let r = r.min(self.max_depth());
        let mut observed = BitSet::default();
        let mut all: Vec<u32> = Vec::new();
        for d in 0..=r {
            for ix in self.round_ixs(d, None) {
                all.push(ix);
            }
        }
        for &ix in &all {
            for r in &self.blocks[ix as usize].refs {
                let rix = self.ix(*r).expect("closed");
                observed.union_with(&self.closure[rix as usize]);
            }
        }
        let mut tips: Vec<u32> = all.into_iter().filter(|ix| !observed.test(*ix)).collect();
        tips.sort_by_key(|ix| self.sort_key(*ix));
        tips.into_iter().map(|ix| self.blocks[ix as usize].id).collect()
    }
}

/// Wave number of a depth: 0 for the genesis, else `ceil(d/3)`.
pub fn wave_of(depth: u32) -> u32 {
    (depth + 2) / 3
}

/// Position of a depth within its wave.
pub fn round_in_wave(depth: u32) -> RoundInWave {
    match depth % 3 {
        _ if depth == 0 => RoundInWave::Genesis,
        1 => RoundInWave::First,
        2 => RoundInWave::Second,
        _ => RoundInWave::Third,
    }
}

/// First-round depth of wave `k >= 1`.
pub fn first_round_depth(wave: u32) -> u32 {
    3 * wave - 2
}

/// The tips of an arbitrary block set: members no other member observes,
/// with reachability resolved within the set.
pub fn tips(blocks: &[Block]) -> BTreeSet<BlockId> {
    let by_id: HashMap<BlockId, &Block> = blocks.iter().map(|b| (b.id, b)).collect();
    let mut observed: BTreeSet<BlockId> = BTreeSet::new();
    for b in blocks {
        let mut stack: Vec<BlockId> = b.refs.iter().copied().collect();
        while let Some(id) = stack.pop() {
            if observed.insert(id) {
                if let Some(inner) = by_id.get(&id) {
                    stack.extend(inner.refs.iter().copied());
                }
            }
        }
    }
    blocks
        .iter()
        .map(|b| b.id)
        .filter(|id| !observed.contains(id))
        .collect()
}
