//! Epoch transitions: amendment finalisation hand-off, epoch end via
//! CORONATE blocks, epoch start on a coronation supermajority, and the
//! belated-NACK service that lets laggards finalise a retired epoch.
//!
//! CORONATE blocks live outside the blocklace, like NACK and INFORM: they
//! are addressed control messages. A coronate carries the amendment decision
//! and points at the tips of the sender's closed blocklace, so a laggard can
//! pull everything it is missing through one NACK round-trip.

use std::collections::BTreeSet;

use crate::block::{genesis_block, Block, BlockId, Payload};
use crate::blocklace::Blocklace;
use crate::engine::{closure_blocks, AgentState, DEntry, EngineNote, EngineOutput, OutputItem, SendKind};
use crate::governance::AmendmentDecision;
use crate::types::{AgentId, InstanceId};

/// A closed epoch kept around to serve belated NACKs. Retention is
/// unbounded here; real deployments may garbage-collect once every agent has
/// coronated (see [`EpochRegistry::garbage_collect_hook`]).
#[derive(Debug)]
pub struct RetiredEpoch {
    pub index: u64,
    pub lace: Blocklace,
    pub own_coronate: Option<Block>,
}

#[derive(Debug)]
pub(crate) struct CoronationTally {
    pub decision: AmendmentDecision,
    pub senders: BTreeSet<AgentId>,
    pub own_sent: bool,
}

/// Per-agent record of epochs: started decisions, retired blocklaces, and
/// coronation tallies keyed by decision digest.
#[derive(Debug)]
pub struct EpochRegistry {
    pub instance: InstanceId,
    retired: Vec<RetiredEpoch>,
    decisions: Vec<AmendmentDecision>,
    pub(crate) tallies: std::collections::BTreeMap<[u8; 32], CoronationTally>,
}

impl EpochRegistry {
    pub fn new(instance: InstanceId) -> EpochRegistry {
        EpochRegistry {
            instance,
            retired: Vec::new(),
            decisions: Vec::new(),
            tallies: std::collections::BTreeMap::new(),
        }
    }

    pub fn decision_of(&self, epoch_index: u64) -> Option<&AmendmentDecision> {
        self.decisions
            .iter()
            .find(|d| d.body.epoch_index == epoch_index)
    }

    pub(crate) fn record_started(&mut self, d: &AmendmentDecision) {
        if self.decision_of(d.body.epoch_index).is_none() {
            self.decisions.push(d.clone());
        }
    }

    pub fn retired(&self) -> &[RetiredEpoch] {
        &self.retired
    }

    pub fn retired_epoch_of(&self, genesis: BlockId) -> Option<&RetiredEpoch> {
        self.retired.iter().find(|r| r.lace.genesis() == genesis)
    }

    pub(crate) fn retire(&mut self, epoch: RetiredEpoch) {
        self.retired.push(epoch);
    }

    /// No-op hook where retired epochs could be dropped once every agent of
    /// the old and new populations is known to have coronated.
    pub fn garbage_collect_hook(&mut self) {}
}

impl AgentState {
    pub(crate) fn start_epoch_inner(&mut self, d: &AmendmentDecision, out: &mut EngineOutput) {
        let genesis = genesis_block(d);
        let genesis_id = genesis.id;
        self.registry.record_started(d);
        self.install_run(
            d.body.epoch_index,
            Blocklace::new(genesis, d.body.new.clone()),
        );
        self.emit(OutputItem::NewConstitution(d.clone()), out);
        out.notes.push(EngineNote::EpochStarted {
            index: d.body.epoch_index,
            genesis: genesis_id,
        });
    }

    /// Handles an incoming CORONATE block: tally the sender, and if we are
    /// a lagging member of the closing epoch, chase its missing closure via
    /// the NACK path.
    pub(crate) fn on_coronate(&mut self, now: u64, block: Block, _out: &mut EngineOutput) {
        let Payload::Coronate(d) = &block.payload else {
            return;
        };
        if d.body.instance != self.instance {
            return;
        }
        let Some(old) = &d.body.old else {
            return; // the founding epoch is never coronated into
        };
        if !old.is_participant(block.creator) {
            return;
        }
        if d.evidence.iter().any(|v| !v.verify()) {
            return;
        }
        let tally = self
            .registry
            .tallies
            .entry(d.digest())
            .or_insert_with(|| CoronationTally {
                decision: d.clone(),
                senders: BTreeSet::new(),
                own_sent: false,
            });
        tally.senders.insert(block.creator);
        if let Some(run) = self.run_mut() {
            if block.epoch == run.lace.genesis()
                && block.refs.iter().any(|r| !run.lace.contains(*r))
                && !run
                    .pending_coronates
                    .iter()
                    .any(|e| e.block.id == block.id)
            {
                run.pending_coronates.push(DEntry {
                    block,
                    arrival: now,
                    nacked: false,
                });
            }
        }
    }

    /// Closes the current epoch after a constitutional block with `d` went
    /// final: coronate towards both populations, retire the blocklace for
    /// belated-NACK service, and cease ordinary participation.
    pub(crate) fn end_epoch(&mut self, _now: u64, d: AmendmentDecision, out: &mut EngineOutput) {
        let run = self.take_run().expect("ending an active epoch");
        let refs = run.lace.tips_of_prefix(run.lace.max_depth());
        let coronate = self.signer.make_block(
            self.id,
            Payload::Coronate(d.clone()),
            refs,
            run.lace.genesis(),
        );
        let mut recipients: BTreeSet<AgentId> = run
            .constitution()
            .participants
            .iter()
            .copied()
            .collect();
        recipients.extend(d.body.new.participants.iter().copied());
        recipients.remove(&self.id);

        out.notes.push(EngineNote::EpochEnded { index: run.index });
        let tally = self
            .registry
            .tallies
            .entry(d.digest())
            .or_insert_with(|| CoronationTally {
                decision: d.clone(),
                senders: BTreeSet::new(),
                own_sent: false,
            });
        tally.senders.insert(self.id);
        tally.own_sent = true;
        self.registry.retire(RetiredEpoch {
            index: run.index,
            lace: run.lace,
            own_coronate: Some(coronate.clone()),
        });
        for to in recipients {
            self.send(to, coronate.clone(), SendKind::Coronate, out);
        }
    }

    /// Starts the next epoch once a sigma-supermajority among the old
    /// population has coronated the decision (old sigma, old population),
    /// provided we sent our own coronate if we belonged to the old epoch.
    pub(crate) fn try_start_epoch(&mut self, _now: u64, out: &mut EngineOutput) -> bool {
        if self.is_active() {
            return false;
        }
        let mut chosen: Option<AmendmentDecision> = None;
        for tally in self.registry.tallies.values() {
            let d = &tally.decision;
            let Some(old) = &d.body.old else { continue };
            if !d.body.new.participants.contains(&self.id) {
                continue;
            }
            if d.body.epoch_index <= self.current_epoch_index() {
                continue;
            }
            // Members of the chain only move to the consecutive epoch.
            if self.current_epoch_index() > 0
                && d.body.epoch_index != self.current_epoch_index() + 1
            {
                continue;
            }
            if old.is_participant(self.id) && !tally.own_sent {
                continue;
            }
            let count = tally
                .senders
                .iter()
                .filter(|s| old.is_participant(**s))
                .count();
            if !old.sigma.supermajority(count, old.n()) {
                continue;
            }
            chosen = Some(d.clone());
            break;
        }
        match chosen {
            Some(d) => {
                self.start_epoch_inner(&d, out);
                true
            }
            None => false,
        }
    }

    /// Serves a NACK that targets one of our blocks from a retired epoch
    /// (including our own CORONATE): judiciously send the target's closure
    /// so the requester can finalise the old epoch and coronate. Requests
    /// from agents outside that epoch's population are dropped.
    pub(crate) fn respond_belated_nack(
        &mut self,
        requester: AgentId,
        target: BlockId,
        out: &mut EngineOutput,
    ) {
        let mut payload: Option<Vec<Block>> = None;
        for re in self.registry.retired() {
            let constitution = re.lace.constitution();
            let permitted = constitution.is_participant(requester)
                || re
                    .own_coronate
                    .as_ref()
                    .map_or(false, |c| match &c.payload {
                        Payload::Coronate(d) => d.body.new.participants.contains(&requester),
                        _ => false,
                    });
            if !permitted {
                continue;
            }
            if re.lace.contains(target) {
                payload = Some(closure_blocks(&re.lace, std::iter::once(target)));
                break;
            }
            if re.own_coronate.as_ref().map(|c| c.id) == Some(target) {
                let coronate = re.own_coronate.clone().expect("checked");
                let mut blocks = closure_blocks(&re.lace, coronate.refs.iter().copied());
                blocks.push(coronate);
                payload = Some(blocks);
                break;
            }
        }
        if let Some(blocks) = payload {
            self.judicious_send(requester, blocks, false, out);
        }
    }
}
