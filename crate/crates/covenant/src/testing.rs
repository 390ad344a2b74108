//! Construction helpers for tests: hand-built DAGs and randomized
//! constitutionally-safe blocklaces with injected equivocations.

use std::collections::BTreeSet;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::block::{genesis_block, Block, BlockId, Payload, StubSigner, Tx};
use crate::blocklace::Blocklace;
use crate::governance::founding_decision;
use crate::types::{AgentId, Constitution, InstanceId, Sigma};

/// Incremental hand construction of a blocklace.
pub struct LaceBuilder {
    pub lace: Blocklace,
    signer: StubSigner,
}

impl LaceBuilder {
    /// A fresh epoch with participants `1..=n`.
    pub fn founding(n: u64, sigma: Sigma, delta: u64) -> LaceBuilder {
        let constitution =
            Constitution::new((1..=n).map(AgentId).collect(), sigma, delta).unwrap();
        let d = founding_decision(InstanceId::from("test"), constitution.clone());
        let genesis = genesis_block(&d);
        LaceBuilder {
            lace: Blocklace::new(genesis, constitution),
            signer: StubSigner,
        }
    }

    pub fn genesis(&self) -> BlockId {
        self.lace.genesis()
    }

    pub fn make(&self, creator: u64, payload: Payload, refs: &[BlockId]) -> Block {
        self.signer.make_block(
            AgentId(creator),
            payload,
            refs.iter().copied().collect::<BTreeSet<_>>(),
            self.lace.genesis(),
        )
    }

    /// Builds and inserts, panicking on rejection.
    pub fn block(&mut self, creator: u64, payload: Payload, refs: &[BlockId]) -> BlockId {
        let b = self.make(creator, payload, refs);
        let id = b.id;
        self.lace.insert(b).expect("valid block");
        id
    }

    pub fn empty(&mut self, creator: u64, refs: &[BlockId]) -> BlockId {
        self.block(creator, Payload::Empty, refs)
    }

    pub fn tx_block(&mut self, creator: u64, tx: &str, refs: &[BlockId]) -> BlockId {
        self.block(
            creator,
            Payload::Transactions(vec![Tx::from_str(tx)]),
            refs,
        )
    }
}

/// Configuration for the randomized generator.
#[derive(Clone, Copy, Debug)]
pub struct RandomLaceCfg {
    pub n: u64,
    pub sigma: Sigma,
    pub waves: u32,
    /// How many of the highest-numbered agents equivocate. Keep at or below
    /// the constitution's fault bound for constitutionally-safe output.
    pub equivocators: u64,
    pub seed: u64,
}

impl Default for RandomLaceCfg {
    fn default() -> Self {
        RandomLaceCfg {
            n: 4,
            sigma: Sigma::new(5, 8).unwrap(),
            waves: 6,
            equivocators: 1,
            seed: 0,
        }
    }
}

/// A generated blocklace plus its insertion order (a valid topological
/// order, genesis first), for incremental-replay tests.
pub struct GeneratedLace {
    pub constitution: Constitution,
    pub lace: Blocklace,
    pub order: Vec<Block>,
}

/// Generates a random valid blocklace: every wave has a formal-leader block
/// (so deeper rounds validate via the leader case), second and third rounds
/// hold supermajorities with randomly chosen reference subsets, and the
/// configured equivocators occasionally fork a round into two payload
/// variants observed by different subsets of later blocks.
pub fn random_safe_lace(cfg: RandomLaceCfg) -> GeneratedLace {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let constitution =
        Constitution::new((1..=cfg.n).map(AgentId).collect(), cfg.sigma, 1).unwrap();
    let decision = founding_decision(InstanceId::from("gen"), constitution.clone());
    let genesis = genesis_block(&decision);
    let mut lace = Blocklace::new(genesis.clone(), constitution.clone());
    let signer = StubSigner;
    let mut order = vec![genesis];
    let mut tx_counter = 0u64;
    let equivocators: Vec<u64> = (cfg.n - cfg.equivocators + 1..=cfg.n).collect();
    // Creation row per depth: (creator, id) pairs including both halves of
    // equivocations.
    let mut prev_round: Vec<(u64, BlockId)> = vec![(0, lace.genesis())];

    let supermajority_size = |rng: &mut ChaCha20Rng, n: usize| -> usize {
        let mut k = n;
        while k > 1 && constitution.is_supermajority(k - 1) && rng.gen_bool(0.4) {
            k -= 1;
        }
        k
    };

    for wave in 1..=cfg.waves {
        for step in 0..3u32 {
            let depth = 3 * wave - 2 + step;
            let leader = constitution.leader_at(3 * wave - 2);
            let mut creators: Vec<u64> = (1..=cfg.n).collect();
            creators.shuffle(&mut rng);
            let keep = if step == 0 {
                // First round: the leader plus a random few others.
                let extra = rng.gen_range(0..=(cfg.n as usize - 1));
                let mut c: Vec<u64> = creators
                    .into_iter()
                    .filter(|c| AgentId(*c) != leader)
                    .take(extra)
                    .collect();
                c.push(leader.0);
                c
            } else {
                let k = supermajority_size(&mut rng, cfg.n as usize);
                creators.into_iter().take(k).collect()
            };

            let mut this_round: Vec<(u64, BlockId)> = Vec::new();
            let mut keep = keep;
            keep.sort_unstable();
            for creator in keep {
                let variants = if equivocators.contains(&creator) && rng.gen_bool(0.5) {
                    2
                } else {
                    1
                };
                for variant in 0..variants {
                    let refs = pick_refs(
                        &mut rng,
                        &constitution,
                        &prev_round,
                        depth,
                        leader,
                    );
                    let payload = if rng.gen_bool(0.5) || variant == 1 {
                        tx_counter += 1;
                        Payload::Transactions(vec![Tx::from_str(&format!(
                            "t{tx_counter}.{variant}"
                        ))])
                    } else {
                        Payload::Empty
                    };
                    let block = signer.make_block(
                        AgentId(creator),
                        payload,
                        refs,
                        lace.genesis(),
                    );
                    lace.insert(block.clone()).expect("generator emits valid blocks");
                    this_round.push((creator, block.id));
                    order.push(block);
                }
            }
            prev_round = this_round;
        }
    }
    GeneratedLace {
        constitution,
        lace,
        order,
    }
}

/// Reference set for a new block at `depth`: always enough of the previous
/// round for validity (the whole previous round for first rounds; for
/// second rounds everything needed to see the leader block; for third
/// rounds a random supermajority), picking one side of any equivocation at
/// random.
fn pick_refs(
    rng: &mut ChaCha20Rng,
    constitution: &Constitution,
    prev_round: &[(u64, BlockId)],
    depth: u32,
    leader: AgentId,
) -> BTreeSet<BlockId> {
    // At most one block per creator: choose a variant where equivocated.
    let mut by_creator: Vec<(u64, Vec<BlockId>)> = Vec::new();
    for (c, id) in prev_round {
        match by_creator.iter_mut().find(|(cc, _)| cc == c) {
            Some((_, v)) => v.push(*id),
            None => by_creator.push((*c, vec![*id])),
        }
    }
    let chosen: Vec<(u64, BlockId)> = by_creator
        .into_iter()
        .map(|(c, variants)| (c, *variants.choose(rng).unwrap()))
        .collect();

    match depth % 3 {
        1 => {
            // First round: previous third round (or the genesis) in full
            // keeps the supermajority intact.
            chosen.into_iter().map(|(_, id)| id).collect()
        }
        2 => {
            // Second round: must see a first round that is advanced; the
            // leader block suffices, plus a random subset of the rest.
            let mut refs: BTreeSet<BlockId> = chosen
                .iter()
                .filter(|(c, _)| AgentId(*c) == leader || rng.gen_bool(0.6))
                .map(|(_, id)| id)
                .copied()
                .collect();
            if refs.is_empty() {
                refs.insert(chosen[0].1);
            }
            refs
        }
        _ => {
            // Third round: a random supermajority of second-round creators.
            let mut pool = chosen;
            pool.shuffle(rng);
            let mut refs: BTreeSet<BlockId> = BTreeSet::new();
            let mut creators: BTreeSet<u64> = BTreeSet::new();
            for (c, id) in pool {
                refs.insert(id);
                creators.insert(c);
                if constitution.is_supermajority(creators.len()) && rng.gen_bool(0.5) {
                    break;
                }
            }
            refs
        }
    }
}
