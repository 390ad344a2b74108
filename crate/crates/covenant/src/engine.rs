//! The per-agent protocol state machine.
//!
//! One engine is one logical actor: a deterministic handler
//! `(state, event, now) -> (state, messages, timer requests)`. The simulator
//! serialises all deliveries; the engine never runs concurrently.
//!
//! Rules implemented here, all driven off `r`, the maximal advanced round of
//! the current epoch's blocklace:
//!
//! * **Receive** — respond to NACKs for own blocks with a judicious send of
//!   the missing closure; answer INFORMs whose closure is unknown with one
//!   NACK; buffer valid ordinary blocks in `D`.
//! * **Accept or Nack** — move closure-satisfied buffer entries into `B`;
//!   after `delta` of residency, NACK a block's creator once.
//! * **Issue** — issue a round `r+1` block when it is a second or third
//!   round; when it is a first round following a quiescent wave and payload
//!   is pending; or following a non-quiescent wave when self is the formal
//!   leader or `r` has been advanced for `9*delta`.
//! * **Issue Backlog** — with pending payload and no round `r` or `r+1`
//!   block issued, issue a round `r` block.
//! * **Inform Leader** — `2*delta` after a third round of a non-quiescent
//!   wave advanced, send the next leader one INFORM naming the round's
//!   blocks.
//! * **Output** — on a new deepest final block, emit the not-yet-output
//!   transactions of its tau order; ordered vote sets feed the amendment
//!   aggregator instead of the output.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use crate::block::{Block, BlockId, Payload, StubSigner, Tx};
use crate::blocklace::{round_in_wave, wave_of, Blocklace, LaceError, RoundInWave};
use crate::epochs::EpochRegistry;
use crate::governance::{
    aggregate_votes, make_amendment_decision, validate_decision, AmendmentDecision, Vote,
    VoteSetTransaction,
};
use crate::types::{AgentId, Constitution, InstanceId};

/// What an agent emits to its user: ordered transactions interleaved with
/// the constitutions that begin each epoch.
#[derive(Clone, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
pub enum OutputItem {
    Transaction(Tx),
    NewConstitution(AmendmentDecision),
}

/// Inputs the simulator feeds an engine.
#[derive(Clone, Debug)]
pub enum EngineEvent {
    Deliver { from: AgentId, block: Block },
    Input(Tx),
    /// The agent learns a signed vote (its own or one handed over
    /// out-of-band, e.g. a joiner's consent).
    VoteKnown(Vote),
    /// A periodic amendment deadline: propose a vote-set transaction.
    VoteDeadline,
    /// Scheduled wakeup; rules are re-evaluated against the clock.
    Timer,
}

/// Classification of an outgoing message, for tracing and adversary scripts.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
pub enum SendKind {
    IssueBroadcast,
    JudiciousSend,
    Nack,
    Inform,
    Coronate,
}

#[derive(Clone, Debug)]
pub struct Outgoing {
    pub to: AgentId,
    pub block: Block,
    pub kind: SendKind,
}

/// Observable notes for the trace.
#[derive(Clone, Debug)]
pub enum EngineNote {
    Issued(Block),
    Accepted(BlockId),
    DroppedInvalid { block: BlockId, reason: String },
    DroppedStale { block: BlockId },
    RoundAdvanced { round: u32 },
    Finalized { block: BlockId },
    Output(OutputItem),
    EpochEnded { index: u64 },
    EpochStarted { index: u64, genesis: BlockId },
}

#[derive(Default, Debug)]
pub struct EngineOutput {
    pub messages: Vec<Outgoing>,
    pub timers: Vec<u64>,
    pub notes: Vec<EngineNote>,
}

/// An ordinary block waiting for its closure.
#[derive(Clone, Debug)]
pub(crate) struct DEntry {
    pub block: Block,
    pub arrival: u64,
    pub nacked: bool,
}

/// Per-epoch runtime state.
#[derive(Debug)]
pub(crate) struct EpochRun {
    pub index: u64,
    pub lace: Blocklace,
    pub d_buf: Vec<DEntry>,
    /// Valid amendment decision awaiting finalisation; displaces payload.
    pub outstanding: Option<AmendmentDecision>,
    pub issued_rounds: BTreeSet<u32>,
    pub max_advanced: u32,
    pub advanced_at: u64,
    /// Once-only NACK markers, keyed by target block id.
    pub nacked: HashSet<BlockId>,
    pub informed_rounds: BTreeSet<u32>,
    /// Blocks already processed through tau.
    pub ordered_seen: HashSet<BlockId>,
    /// Epoch-ordered vote-set transactions, in consensus order.
    pub vote_txs_ordered: Vec<VoteSetTransaction>,
    pub aggregate_fired: bool,
    pub finalized_seen: HashSet<BlockId>,
    pub last_final_depth: u32,
    /// Received CORONATE blocks whose refs dangle, awaiting the NACK path.
    pub pending_coronates: Vec<DEntry>,
}

impl EpochRun {
    fn new(index: u64, lace: Blocklace) -> EpochRun {
        EpochRun {
            index,
            lace,
            d_buf: Vec::new(),
            outstanding: None,
            issued_rounds: BTreeSet::new(),
            max_advanced: 0,
            advanced_at: 0,
            nacked: HashSet::new(),
            informed_rounds: BTreeSet::new(),
            ordered_seen: HashSet::new(),
            vote_txs_ordered: Vec::new(),
            aggregate_fired: false,
            finalized_seen: HashSet::new(),
            last_final_depth: 0,
            pending_coronates: Vec::new(),
        }
    }

    pub fn constitution(&self) -> &Constitution {
        self.lace.constitution()
    }
}

/// One participant's full state across epochs.
pub struct AgentState {
    pub id: AgentId,
    pub instance: InstanceId,
    pub(crate) signer: StubSigner,
    pub(crate) cur: Option<EpochRun>,
    /// Index of the newest epoch this agent has started (0 = none yet).
    pub(crate) epoch_index: u64,
    pub registry: EpochRegistry,
    pub(crate) pending_txs: Vec<Tx>,
    pub(crate) pending_votes: VecDeque<VoteSetTransaction>,
    pub(crate) vote_head: BTreeMap<AgentId, Vote>,
    /// Per-peer record of everything ever sent, for send-once and the
    /// judicious-send exclusions.
    pub(crate) sent: HashMap<AgentId, HashSet<BlockId>>,
    pub(crate) emitted_txs: HashSet<Tx>,
    pub output: Vec<OutputItem>,
    /// Ordinary blocks of epochs this agent has not started yet.
    pub(crate) future: Vec<DEntry>,
}

impl AgentState {
    /// A founder of the instance: starts epoch 1 immediately. Call
    /// [`AgentState::boot`] to collect the initial output.
    pub fn founder(id: AgentId, decision: &AmendmentDecision) -> AgentState {
        let mut s = AgentState::observer(id, decision.body.instance.clone());
        let mut scratch = EngineOutput::default();
        s.start_epoch_inner(decision, &mut scratch);
        s.output.clear(); // re-emitted by boot
        s
    }

    /// An agent with no epoch yet; joins when coronated into one.
    pub fn observer(id: AgentId, instance: InstanceId) -> AgentState {
        AgentState {
            id,
            instance: instance.clone(),
            signer: StubSigner,
            cur: None,
            epoch_index: 0,
            registry: EpochRegistry::new(instance),
            pending_txs: Vec::new(),
            pending_votes: VecDeque::new(),
            vote_head: BTreeMap::new(),
            sent: HashMap::new(),
            emitted_txs: HashSet::new(),
            output: Vec::new(),
            future: Vec::new(),
        }
    }

    /// Emits the founding constitution and runs the first pass.
    pub fn boot(&mut self, now: u64) -> EngineOutput {
        let mut out = EngineOutput::default();
        if let Some(run) = &self.cur {
            let d = self
                .registry
                .decision_of(run.index)
                .expect("founder has its founding decision")
                .clone();
            self.emit(OutputItem::NewConstitution(d), &mut out);
            out.notes.push(EngineNote::EpochStarted {
                index: run.index,
                genesis: run.lace.genesis(),
            });
        }
        self.pass(now, &mut out);
        out
    }

    pub fn is_active(&self) -> bool {
        self.cur.is_some()
    }

    pub fn current_constitution(&self) -> Option<&Constitution> {
        self.cur.as_ref().map(|r| r.constitution())
    }

    pub fn current_epoch_index(&self) -> u64 {
        self.epoch_index
    }

    /// The single entry point: handle one event, then re-evaluate every rule
    /// to fixpoint.
    pub fn handle(&mut self, now: u64, event: EngineEvent) -> EngineOutput {
        let mut out = EngineOutput::default();
        match event {
            EngineEvent::Deliver { from, block } => self.on_receive(now, from, block, &mut out),
            EngineEvent::Input(tx) => self.pending_txs.push(tx),
            EngineEvent::VoteKnown(v) => self.learn_vote(v),
            EngineEvent::VoteDeadline => self.on_deadline(),
            EngineEvent::Timer => {}
        }
        self.pass(now, &mut out);
        out
    }

    pub(crate) fn emit(&mut self, item: OutputItem, out: &mut EngineOutput) {
        out.notes.push(EngineNote::Output(item.clone()));
        self.output.push(item);
    }

    fn learn_vote(&mut self, v: Vote) {
        if !v.verify() {
            return;
        }
        match self.vote_head.get(&v.voter) {
            Some(held) if (held.seq, &held.sig) >= (v.seq, &v.sig) => {}
            _ => {
                self.vote_head.insert(v.voter, v);
            }
        }
    }

    fn on_deadline(&mut self) {
        if let Some(run) = &self.cur {
            let votes: Vec<Vote> = self.vote_head.values().cloned().collect();
            self.pending_votes
                .push_back(VoteSetTransaction::new(self.id, run.index, votes));
        }
    }

    // ------------------------------------------------------------------
    // Receive
    // ------------------------------------------------------------------

    fn on_receive(&mut self, now: u64, _from: AgentId, block: Block, out: &mut EngineOutput) {
        match &block.payload {
            Payload::Nack(target) => self.on_nack(block.creator, *target, out),
            Payload::Inform => self.on_inform(block, out),
            Payload::Coronate(_) => self.on_coronate(now, block, out),
            _ => self.on_ordinary(now, block, out),
        }
    }

    fn on_ordinary(&mut self, now: u64, block: Block, out: &mut EngineOutput) {
        if let Some(run) = &mut self.cur {
            if block.epoch == run.lace.genesis() {
                if !run.constitution().is_participant(block.creator) {
                    out.notes.push(EngineNote::DroppedInvalid {
                        block: block.id,
                        reason: "creator not a participant".into(),
                    });
                    return;
                }
                if run.lace.contains(block.id)
                    || run.d_buf.iter().any(|e| e.block.id == block.id)
                {
                    return;
                }
                run.d_buf.push(DEntry {
                    block,
                    arrival: now,
                    nacked: false,
                });
                return;
            }
        }
        if self.registry.retired_epoch_of(block.epoch).is_some() {
            out.notes.push(EngineNote::DroppedStale { block: block.id });
        } else {
            // A future (or unknown) epoch: hold until it starts.
            if !self.future.iter().any(|e| e.block.id == block.id) {
                self.future.push(DEntry {
                    block,
                    arrival: now,
                    nacked: false,
                });
            }
        }
    }

    /// A NACK for one of our blocks: judiciously send the closure of the
    /// NACK's reference set (the blocks the sender is missing).
    fn on_nack(&mut self, requester: AgentId, target: BlockId, out: &mut EngineOutput) {
        if target.signer != self.id {
            return;
        }
        // Current epoch: Algorithm 1's receive rule.
        if let Some(run) = &self.cur {
            if run.lace.contains(target) && run.constitution().is_participant(requester) {
                let refs = run
                    .lace
                    .get(target)
                    .map(|b| b.refs.clone())
                    .unwrap_or_default();
                let blocks = closure_blocks(&run.lace, refs.iter().copied());
                self.judicious_send(requester, blocks, true, out);
                return;
            }
        }
        self.respond_belated_nack(requester, target, out);
    }

    /// An INFORM whose closure we do not hold: answer with one NACK naming
    /// the dangling refs.
    fn on_inform(&mut self, inform: Block, out: &mut EngineOutput) {
        let Some(run) = &mut self.cur else { return };
        if inform.epoch != run.lace.genesis()
            || !run.constitution().is_participant(inform.creator)
        {
            return;
        }
        let missing: BTreeSet<BlockId> = inform
            .refs
            .iter()
            .filter(|r| !run.lace.contains(**r))
            .copied()
            .collect();
        if missing.is_empty() || run.nacked.contains(&inform.id) {
            return;
        }
        run.nacked.insert(inform.id);
        let nack = self.signer.make_block(
            self.id,
            Payload::Nack(inform.id),
            missing,
            inform.epoch,
        );
        let to = inform.creator;
        self.send(to, nack, SendKind::Nack, out);
    }

    // ------------------------------------------------------------------
    // The rule pass
    // ------------------------------------------------------------------

    fn pass(&mut self, now: u64, out: &mut EngineOutput) {
        self.try_start_epoch(now, out);
        loop {
            let mut changed = self.accept_loop(now, out);
            changed |= self.process_outputs(now, out);
            changed |= self.issue_rules(now, out);
            if !changed {
                break;
            }
        }
        self.nack_scan(now, out);
        self.inform_rule(now, out);
        // Ending an epoch may complete a coronation tally immediately.
        if self.try_start_epoch(now, out) {
            self.pass(now, out);
            return;
        }
        self.request_timers(now, out);
    }

    fn accept_loop(&mut self, now: u64, out: &mut EngineOutput) -> bool {
        let Some(run) = &mut self.cur else {
            return false;
        };
        let mut any = false;
        loop {
            let mut progressed = false;
            let mut i = 0;
            while i < run.d_buf.len() {
                let ready = run.d_buf[i]
                    .block
                    .refs
                    .iter()
                    .all(|r| run.lace.contains(*r));
                if !ready {
                    i += 1;
                    continue;
                }
                let entry = run.d_buf.remove(i);
                match run.lace.insert(entry.block.clone()) {
                    Ok(true) => {
                        out.notes.push(EngineNote::Accepted(entry.block.id));
                        if let Payload::Votes(vs) = &entry.block.payload {
                            for v in &vs.votes {
                                // Harvested for future vote-set proposals.
                                let v = v.clone();
                                match self.vote_head.get(&v.voter) {
                                    Some(held) if (held.seq, &held.sig) >= (v.seq, &v.sig) => {}
                                    _ => {
                                        if v.verify() {
                                            self.vote_head.insert(v.voter, v);
                                        }
                                    }
                                }
                            }
                        }
                        progressed = true;
                        any = true;
                    }
                    Ok(false) => {}
                    Err(e) => {
                        out.notes.push(EngineNote::DroppedInvalid {
                            block: entry.block.id,
                            reason: e.to_string(),
                        });
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        if Self::update_advance(run, now, out) {
            any = true;
        }
        any
    }

    /// Latches the maximal advanced round and its timestamp. Quiescence
    /// flips never retract the latch; timers need a stable starting point.
    fn update_advance(run: &mut EpochRun, now: u64, out: &mut EngineOutput) -> bool {
        let mut moved = false;
        while run.lace.is_advanced(run.max_advanced + 1) {
            run.max_advanced += 1;
            run.advanced_at = now;
            out.notes.push(EngineNote::RoundAdvanced {
                round: run.max_advanced,
            });
            moved = true;
        }
        moved
    }

    // ------------------------------------------------------------------
    // Output, amendment aggregation, epoch closure
    // ------------------------------------------------------------------

    fn process_outputs(&mut self, now: u64, out: &mut EngineOutput) -> bool {
        let Some(run) = &mut self.cur else {
            return false;
        };
        let mut changed = false;

        // Detect finality per first-round block once (for the trace) and
        // track the deepest final block past the last emission point.
        let mut deepest: Option<(u32, BlockId)> = None;
        for wave in 1..=wave_of(run.lace.max_depth()) {
            let first = 3 * wave - 2;
            let ids: Vec<BlockId> = run.lace.round(first).map(|b| b.id).collect();
            for id in ids {
                let is_final = if run.finalized_seen.contains(&id) {
                    true
                } else {
                    let st = run.lace.finality_status(id).expect("present");
                    if st.is_final {
                        run.finalized_seen.insert(id);
                        out.notes.push(EngineNote::Finalized { block: id });
                    }
                    st.is_final
                };
                if is_final
                    && first > run.last_final_depth
                    && first > deepest.map(|(d, _)| d).unwrap_or(0)
                {
                    deepest = Some((first, id));
                }
            }
        }
        let Some((final_depth, final_id)) = deepest else {
            return false;
        };

        // Walk the tau spine; the shallowest spine block carrying a decision
        // that validates closes the epoch, so every participant closes it at
        // the same constitutional block.
        let spine = run.lace.tau_spine(final_id).expect("present");
        let mut closing: Option<(BlockId, AmendmentDecision)> = None;
        for sp in &spine {
            let block = run.lace.get(*sp).expect("present");
            if let Payload::Decision(d) = &block.payload {
                let prefix = ordered_vote_prefix(run, *sp);
                if validate_decision(
                    d,
                    Some(run.constitution()),
                    run.index + 1,
                    &self.instance,
                    &prefix,
                )
                .is_ok()
                {
                    closing = Some((*sp, d.clone()));
                    break;
                }
            }
        }

        let emit_to = closing.as_ref().map(|(id, _)| *id).unwrap_or(final_id);
        let seq = run.lace.tau(emit_to).expect("present");
        let mut emissions: Vec<OutputItem> = Vec::new();
        for id in seq {
            if !run.ordered_seen.insert(id) {
                continue;
            }
            let block = run.lace.get(id).expect("tau yields present blocks");
            match &block.payload {
                Payload::Transactions(txs) => {
                    for tx in txs {
                        if self.emitted_txs.insert(tx.clone()) {
                            emissions.push(OutputItem::Transaction(tx.clone()));
                        }
                    }
                }
                Payload::Votes(vs) => {
                    run.vote_txs_ordered.push(vs.clone());
                    if !run.aggregate_fired {
                        if let Some(h) =
                            aggregate_votes(&run.vote_txs_ordered, run.constitution(), run.index)
                        {
                            run.aggregate_fired = true;
                            let d = make_amendment_decision(
                                run.constitution(),
                                run.index + 1,
                                self.instance.clone(),
                                h,
                            );
                            run.outstanding = Some(d);
                        }
                    }
                }
                // Decision payloads are routed to the epoch machinery, never
                // emitted as transactions.
                Payload::Decision(_) | Payload::Empty => {}
                _ => unreachable!("control payloads never enter the blocklace"),
            }
        }
        run.last_final_depth = run
            .lace
            .depth_round_wave(emit_to)
            .map(|d| d.0)
            .unwrap_or(final_depth);
        changed = true;
        for item in emissions {
            self.emit(item, out);
        }
        if let Some((_, d)) = closing {
            self.end_epoch(now, d, out);
        }
        changed
    }

    // ------------------------------------------------------------------
    // Issue rules
    // ------------------------------------------------------------------

    fn effective_payload(&self) -> bool {
        !self.pending_txs.is_empty()
            || !self.pending_votes.is_empty()
            || self
                .cur
                .as_ref()
                .map_or(false, |r| r.outstanding.is_some())
    }

    fn issue_rules(&mut self, now: u64, out: &mut EngineOutput) -> bool {
        let Some(run) = &self.cur else {
            return false;
        };
        let payload_pending = self.effective_payload();
        let r = run.max_advanced;
        let next = r + 1;
        let mut changed = false;

        let issue_next = match round_in_wave(next) {
            RoundInWave::Second | RoundInWave::Third => true,
            RoundInWave::First => {
                if run.lace.is_quiescent_wave(wave_of(r)) {
                    payload_pending
                } else {
                    self.id == run.constitution().leader_at(next)
                        || now >= run.advanced_at + 9 * run.constitution().delta
                }
            }
            RoundInWave::Genesis => false,
        };
        if issue_next && !run.issued_rounds.contains(&next) {
            self.issue_block(now, next, out);
            changed = true;
        }

        if let Some(run) = &self.cur {
            let r = run.max_advanced;
            if self.effective_payload()
                && r >= 1
                && !run.issued_rounds.contains(&r)
                && !run.issued_rounds.contains(&(r + 1))
            {
                self.issue_block(now, r, out);
                changed = true;
            }
        }
        changed
    }

    fn issue_block(&mut self, now: u64, round: u32, out: &mut EngineOutput) {
        let run = self.cur.as_mut().expect("active epoch");
        assert!(
            !run.issued_rounds.contains(&round),
            "correct agents never issue twice in a round"
        );
        let payload = if let Some(d) = &run.outstanding {
            // Amendment finalisation: carry the decision, keep user payload.
            Payload::Decision(d.clone())
        } else if let Some(vs) = self.pending_votes.pop_front() {
            Payload::Votes(vs)
        } else if !self.pending_txs.is_empty() {
            Payload::Transactions(std::mem::take(&mut self.pending_txs))
        } else {
            Payload::Empty
        };
        let refs = run.lace.tips_of_prefix(round - 1);
        let block = self
            .signer
            .make_block(self.id, payload, refs, run.lace.genesis());
        run.issued_rounds.insert(round);
        run.lace
            .insert(block.clone())
            .expect("own blocks are valid");
        Self::update_advance(run, now, out);
        out.notes.push(EngineNote::Issued(block.clone()));
        let peers: Vec<AgentId> = run
            .constitution()
            .participants
            .iter()
            .copied()
            .filter(|p| *p != self.id)
            .collect();
        for to in peers {
            self.send(to, block.clone(), SendKind::IssueBroadcast, out);
        }
    }

    // ------------------------------------------------------------------
    // NACK and INFORM timers
    // ------------------------------------------------------------------

    fn nack_scan(&mut self, now: u64, out: &mut EngineOutput) {
        let Some(run) = &mut self.cur else { return };
        let delta = run.constitution().delta;
        let genesis = run.lace.genesis();
        let mut to_send: Vec<(AgentId, Block)> = Vec::new();
        let lace = &run.lace;
        let nacked = &mut run.nacked;
        for entry in run.d_buf.iter_mut().chain(run.pending_coronates.iter_mut()) {
            if entry.nacked || now < entry.arrival + delta {
                continue;
            }
            let missing: BTreeSet<BlockId> = entry
                .block
                .refs
                .iter()
                .filter(|r| !lace.contains(**r))
                .copied()
                .collect();
            entry.nacked = true;
            if missing.is_empty() || nacked.contains(&entry.block.id) {
                continue;
            }
            nacked.insert(entry.block.id);
            let nack =
                self.signer
                    .make_block(self.id, Payload::Nack(entry.block.id), missing, genesis);
            to_send.push((entry.block.creator, nack));
        }
        for (to, nack) in to_send {
            self.send(to, nack, SendKind::Nack, out);
        }
    }

    fn inform_rule(&mut self, now: u64, out: &mut EngineOutput) {
        let Some(run) = &self.cur else { return };
        let r = run.max_advanced;
        if r == 0 || round_in_wave(r) != RoundInWave::Third {
            return;
        }
        if run.lace.is_quiescent_wave(wave_of(r)) {
            return;
        }
        if now < run.advanced_at + 2 * run.constitution().delta {
            return;
        }
        let next = r + 1;
        let leader = run.constitution().leader_at(next);
        if leader == self.id || run.informed_rounds.contains(&next) {
            return;
        }
        // An accepted leader block would have advanced the round already;
        // the check keeps the rule inert if one sits in the lace anyway.
        if run.lace.round(next).any(|b| b.creator == leader) {
            return;
        }
        let refs: BTreeSet<BlockId> = run.lace.round(r).map(|b| b.id).collect();
        let genesis = run.lace.genesis();
        let run = self.cur.as_mut().expect("active");
        run.informed_rounds.insert(next);
        let inform = self
            .signer
            .make_block(self.id, Payload::Inform, refs, genesis);
        self.send(leader, inform, SendKind::Inform, out);
    }

    fn request_timers(&self, now: u64, out: &mut EngineOutput) {
        let Some(run) = &self.cur else { return };
        let delta = run.constitution().delta;
        let mut want: BTreeSet<u64> = BTreeSet::new();
        for entry in run.d_buf.iter().chain(run.pending_coronates.iter()) {
            if !entry.nacked {
                want.insert(entry.arrival + delta);
            }
        }
        let r = run.max_advanced;
        if r > 0 && round_in_wave(r) == RoundInWave::Third {
            let next = r + 1;
            if !run.informed_rounds.contains(&next)
                && run.constitution().leader_at(next) != self.id
            {
                want.insert(run.advanced_at + 2 * delta);
            }
            if !run.issued_rounds.contains(&next) {
                want.insert(run.advanced_at + 9 * delta);
            }
        }
        out.timers.extend(want.into_iter().filter(|t| *t > now));
    }

    // ------------------------------------------------------------------
    // Sending
    // ------------------------------------------------------------------

    pub(crate) fn send(
        &mut self,
        to: AgentId,
        block: Block,
        kind: SendKind,
        out: &mut EngineOutput,
    ) {
        self.sent.entry(to).or_default().insert(block.id);
        out.messages.push(Outgoing { to, block, kind });
    }

    /// Sends each block unless (i) already sent to `to`, or (ii) `to` is
    /// known to hold it: it lies in the closure of one of `to`'s blocks in
    /// `B` or `D`.
    pub(crate) fn judicious_send(
        &mut self,
        to: AgentId,
        blocks: Vec<Block>,
        against_current: bool,
        out: &mut EngineOutput,
    ) {
        for block in blocks {
            if self
                .sent
                .get(&to)
                .map_or(false, |s| s.contains(&block.id))
            {
                continue;
            }
            if against_current && self.peer_knows(to, block.id) {
                continue;
            }
            self.send(to, block, SendKind::JudiciousSend, out);
        }
    }

    /// Clause (ii) of the judicious send, evaluated against B and D.
    fn peer_knows(&self, peer: AgentId, target: BlockId) -> bool {
        let Some(run) = &self.cur else { return false };
        for b in run.lace.blocks() {
            if b.creator == peer && run.lace.observes(b.id, target).unwrap_or(false) {
                return true;
            }
        }
        for entry in &run.d_buf {
            if entry.block.creator == peer {
                if entry.block.refs.contains(&target) {
                    return true;
                }
                for r in &entry.block.refs {
                    if run
                        .lace
                        .observes(*r, target)
                        .unwrap_or(false)
                    {
                        return true;
                    }
                }
            }
        }
        false
    }

    // ------------------------------------------------------------------
    // Epoch plumbing shared with the epochs module
    // ------------------------------------------------------------------

    pub(crate) fn run(&self) -> Option<&EpochRun> {
        self.cur.as_ref()
    }

    pub(crate) fn run_mut(&mut self) -> Option<&mut EpochRun> {
        self.cur.as_mut()
    }

    pub(crate) fn take_run(&mut self) -> Option<EpochRun> {
        self.cur.take()
    }

    pub(crate) fn install_run(&mut self, index: u64, lace: Blocklace) {
        debug_assert!(self.cur.is_none());
        self.epoch_index = index;
        // Queue blocks that arrived early for this epoch.
        let genesis = lace.genesis();
        let mut run = EpochRun::new(index, lace);
        let (now_epoch, later): (Vec<DEntry>, Vec<DEntry>) = self
            .future
            .drain(..)
            .partition(|e| e.block.epoch == genesis);
        run.d_buf = now_epoch;
        self.future = later;
        // Vote-set proposals for older epochs are stale.
        self.pending_votes.retain(|vs| vs.epoch_index >= index);
        self.cur = Some(run);
    }

    /// Direct access for tests and invariant checking.
    pub fn lace(&self) -> Option<&Blocklace> {
        self.cur.as_ref().map(|r| &r.lace)
    }
}

/// The epoch's ordered vote-set prefix as seen through `tau(up_to)`:
/// everything already ordered plus the not-yet-seen vote sets in tau order.
fn ordered_vote_prefix(run: &EpochRun, up_to: BlockId) -> Vec<VoteSetTransaction> {
    let mut prefix = run.vote_txs_ordered.clone();
    if let Ok(seq) = run.lace.tau(up_to) {
        for id in seq {
            if run.ordered_seen.contains(&id) {
                continue;
            }
            if let Some(Payload::Votes(vs)) = run.lace.get(id).map(|b| &b.payload) {
                prefix.push(vs.clone());
            }
        }
    }
    prefix
}

/// All blocks in the union of the given roots' closures, shallow first.
pub(crate) fn closure_blocks(
    lace: &Blocklace,
    roots: impl Iterator<Item = BlockId>,
) -> Vec<Block> {
    let mut seen: BTreeSet<BlockId> = BTreeSet::new();
    for root in roots {
        if let Ok(ids) = lace.closure_of(root) {
            seen.extend(ids);
        }
    }
    let mut blocks: Vec<Block> = seen
        .into_iter()
        .filter_map(|id| lace.get(id).cloned())
        .collect();
    blocks.sort_by_key(|b| {
        (
            lace.depth_round_wave(b.id).map(|d| d.0).unwrap_or(0),
            b.creator,
            b.id.digest,
        )
    });
    blocks
}

impl std::fmt::Debug for AgentState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentState")
            .field("id", &self.id)
            .field("epoch", &self.epoch_index)
            .field("active", &self.cur.is_some())
            .field("output_len", &self.output.len())
            .finish()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Lace(#[from] LaceError),
}
