//! One voter's replica: the phase state machine (propose, pre-prepare,
//! prepare, commit), the view-change failover, the ping failure detector,
//! and catch-up for peers that fall behind.
//!
//! A replica is a pure state machine driven by `handle`, `propose`, and
//! `on_tick`; it never touches a clock or network itself. At most one
//! operation is in flight at a time: the primary opens the next timestamp
//! slot only after the previous one committed, so a correct replica is never
//! more than one commit behind a quorum, and messages for future slots can
//! simply be buffered.
//!
//! View changes carry prepared certificates: a replica that prepared an
//! operation includes the quorum of prepare signatures in its view-change
//! message, and the new primary must re-propose the highest such operation.
//! Any operation that committed anywhere therefore survives into the new
//! view (a commit quorum implies enough honest replicas hold the prepared
//! certificate that every view-change quorum contains one). Re-committed
//! duplicates are recognized by operation digest and advance the timestamp
//! without reapplying.

use super::{
    apply_commit, commit_signing_bytes, current_primary, quorum_size, validate,
    verify_commit_cert, CaOperation, LogEntry, LogicalTimestamp, PingOracle, SharedState,
};
use crate::enc;
use crate::identity::{self, Digest, Identity, PeerId, Sig};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// A quorum of prepare signatures for one operation at one timestamp;
/// evidence that the operation may have committed somewhere.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PreparedProof {
    pub op: CaOperation,
    pub ts: LogicalTimestamp,
    pub prepares: BTreeMap<PeerId, Sig>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ViewChange {
    /// Chain length this view change belongs to; view numbering restarts
    /// every epoch.
    pub epoch: u64,
    pub new_view: u64,
    pub last_committed: LogicalTimestamp,
    pub prepared: Option<PreparedProof>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SignedViewChange {
    pub vc: ViewChange,
    pub sender: PeerId,
    pub sig: Sig,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct NewView {
    pub epoch: u64,
    pub new_view: u64,
    /// The quorum of view-change messages legitimizing this view. The
    /// operation to re-propose is *derived* from this certificate by every
    /// replica independently, so a dishonest new primary cannot substitute
    /// its own choice.
    pub cert: Vec<SignedViewChange>,
    /// Committed entries the new primary supplies so laggards can catch up;
    /// each is self-certifying.
    pub catchup: Vec<LogEntry>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Payload {
    Propose { op: CaOperation },
    PrePrepare { op: CaOperation, ts: LogicalTimestamp },
    Prepare { digest: Digest, ts: LogicalTimestamp },
    Commit { digest: Digest, ts: LogicalTimestamp },
    ViewChange(ViewChange),
    NewView(NewView),
    Ping { nonce: u64 },
    Pong { nonce: u64 },
    SyncRequest { have: LogicalTimestamp },
    SyncReply { entries: Vec<LogEntry> },
}

/// A signed protocol message.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Envelope {
    pub payload: Payload,
    pub sender: PeerId,
    pub sig: Sig,
}

impl Envelope {
    pub fn verify(&self) -> bool {
        identity::verify(&self.sender, &signing_bytes(&self.payload), &self.sig)
    }
}

fn ts_into(out: &mut Vec<u8>, ts: &LogicalTimestamp) {
    enc::put_u64(out, ts.ell);
    enc::put_u64(out, ts.view);
    enc::put_u64(out, ts.seq);
}

fn sig_map_into(out: &mut Vec<u8>, sigs: &BTreeMap<PeerId, Sig>) {
    enc::put_u64(out, sigs.len() as u64);
    for (p, s) in sigs {
        enc::put_bytes(out, &p.0);
        enc::put_bytes(out, &s.0);
    }
}

fn entry_into(out: &mut Vec<u8>, e: &LogEntry) {
    enc::put_bytes(out, &e.op.encode());
    ts_into(out, &e.ts);
    sig_map_into(out, &e.commits);
}

fn vc_into(out: &mut Vec<u8>, vc: &ViewChange) {
    enc::put_u64(out, vc.epoch);
    enc::put_u64(out, vc.new_view);
    ts_into(out, &vc.last_committed);
    match &vc.prepared {
        None => enc::put_tag(out, 0),
        Some(p) => {
            enc::put_tag(out, 1);
            enc::put_bytes(out, &p.op.encode());
            ts_into(out, &p.ts);
            sig_map_into(out, &p.prepares);
        }
    }
}

/// Bytes a replica signs when preparing `digest` at `ts`.
pub fn prepare_signing_bytes(digest: &Digest, ts: &LogicalTimestamp) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    enc::put_tag(&mut out, b'R');
    enc::put_bytes(&mut out, &digest.0);
    ts_into(&mut out, ts);
    out
}

/// Canonical bytes signed for each payload kind.
pub fn signing_bytes(p: &Payload) -> Vec<u8> {
    let mut out = Vec::new();
    match p {
        Payload::Propose { op } => {
            enc::put_tag(&mut out, b'P');
            enc::put_bytes(&mut out, &op.encode());
        }
        Payload::PrePrepare { op, ts } => {
            enc::put_tag(&mut out, b'E');
            enc::put_bytes(&mut out, &op.encode());
            ts_into(&mut out, ts);
        }
        Payload::Prepare { digest, ts } => return prepare_signing_bytes(digest, ts),
        Payload::Commit { digest, ts } => return commit_signing_bytes(digest, ts),
        Payload::ViewChange(vc) => {
            enc::put_tag(&mut out, b'V');
            vc_into(&mut out, vc);
        }
        Payload::NewView(nv) => {
            enc::put_tag(&mut out, b'N');
            enc::put_u64(&mut out, nv.epoch);
            enc::put_u64(&mut out, nv.new_view);
            enc::put_u64(&mut out, nv.cert.len() as u64);
            for svc in &nv.cert {
                enc::put_bytes(&mut out, &svc.sender.0);
                enc::put_bytes(&mut out, &svc.sig.0);
                vc_into(&mut out, &svc.vc);
            }
            enc::put_u64(&mut out, nv.catchup.len() as u64);
            for e in &nv.catchup {
                entry_into(&mut out, e);
            }
        }
        Payload::Ping { nonce } => {
            enc::put_tag(&mut out, b'G');
            enc::put_u64(&mut out, *nonce);
        }
        Payload::Pong { nonce } => {
            enc::put_tag(&mut out, b'O');
            enc::put_u64(&mut out, *nonce);
        }
        Payload::SyncRequest { have } => {
            enc::put_tag(&mut out, b'S');
            ts_into(&mut out, have);
        }
        Payload::SyncReply { entries } => {
            enc::put_tag(&mut out, b'Y');
            enc::put_u64(&mut out, entries.len() as u64);
            for e in entries {
                entry_into(&mut out, e);
            }
        }
    }
    out
}

/// Where a message is headed. `Broadcast` fans out to the sender's current
/// online voter set (minus the sender); the transport expands it.
#[derive(Clone, Debug)]
pub enum Outbound {
    To(PeerId, Envelope),
    Broadcast(Envelope),
}

/// What one replica step produced: messages to send and entries it applied.
#[derive(Default, Debug)]
pub struct StepOutput {
    pub outbound: Vec<Outbound>,
    pub applied: Vec<LogEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
pub struct ReplicaConfig {
    /// Failure-detector ping period, in ticks.
    pub ping_interval: u64,
    /// Silence duration after which a voter is proposed for removal.
    pub suspicion_after: u64,
    /// Base request/view-change timeout; doubles per consecutive view change.
    pub base_timeout: u64,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        ReplicaConfig {
            ping_interval: 20,
            suspicion_after: 60,
            base_timeout: 40,
        }
    }
}

#[derive(Default, Debug, Clone, Copy)]
pub struct ReplicaStats {
    pub commits: u64,
    pub view_changes: u64,
    pub suspicions: u64,
}

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
enum Mode {
    Normal,
    ViewChanging { target: u64 },
}

#[derive(Debug)]
struct Slot {
    ts: LogicalTimestamp,
    locked: Option<CaOperation>,
    locked_digest: Option<Digest>,
    prepares: BTreeMap<Digest, BTreeMap<PeerId, Sig>>,
    commits: BTreeMap<Digest, BTreeMap<PeerId, Sig>>,
    sent_commit: bool,
    prepared_cert: Option<PreparedProof>,
    deadline: u64,
}

impl Slot {
    fn empty(ts: LogicalTimestamp, deadline: u64) -> Self {
        Slot {
            ts,
            locked: None,
            locked_digest: None,
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
            sent_commit: false,
            prepared_cert: None,
            deadline,
        }
    }
}

#[derive(Debug)]
struct Outstanding {
    op: CaOperation,
    deadline: u64,
    broadcast: bool,
}

/// A replica of the shared state, owned by one voter.
pub struct Replica {
    identity: Identity,
    id: PeerId,
    pub shared: SharedState,
    pub config: ReplicaConfig,
    pub stats: ReplicaStats,
    view: u64,
    mode: Mode,
    slot: Option<Slot>,
    queue: VecDeque<CaOperation>,
    queued: BTreeSet<Digest>,
    outstanding: BTreeMap<Digest, Outstanding>,
    watches: BTreeMap<Digest, u64>,
    vc_votes: BTreeMap<(u64, u64), BTreeMap<PeerId, SignedViewChange>>,
    issued_newview: BTreeSet<(u64, u64)>,
    newview_wait: Option<u64>,
    buffer: BTreeMap<LogicalTimestamp, Vec<Envelope>>,
    last_seen: BTreeMap<PeerId, u64>,
    next_ping_at: u64,
    pending_leave: BTreeSet<PeerId>,
    timeout_exp: u32,
    last_sync_request: Option<u64>,
}

const MAX_TIMEOUT_DOUBLINGS: u32 = 10;
const MAX_BUFFERED: usize = 512;

impl Replica {
    pub fn new(identity: Identity, shared: SharedState, config: ReplicaConfig) -> Self {
        let id = identity.peer_id();
        let view = shared.now.view;
        Replica {
            identity,
            id,
            shared,
            config,
            stats: ReplicaStats::default(),
            view,
            mode: Mode::Normal,
            slot: None,
            queue: VecDeque::new(),
            queued: BTreeSet::new(),
            outstanding: BTreeMap::new(),
            watches: BTreeMap::new(),
            vc_votes: BTreeMap::new(),
            issued_newview: BTreeSet::new(),
            newview_wait: None,
            buffer: BTreeMap::new(),
            last_seen: BTreeMap::new(),
            next_ping_at: 0,
            pending_leave: BTreeSet::new(),
            timeout_exp: 0,
            last_sync_request: None,
        }
    }

    pub fn id(&self) -> PeerId {
        self.id
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn voters(&self) -> &BTreeSet<PeerId> {
        &self.shared.online_voters
    }

    fn timeout(&self) -> u64 {
        self.config.base_timeout << self.timeout_exp.min(MAX_TIMEOUT_DOUBLINGS)
    }

    fn quorum(&self) -> usize {
        quorum_size(self.shared.online_voters.len().max(1))
    }

    fn primary(&self) -> Option<PeerId> {
        current_primary(&self.shared.chain, self.view).ok()
    }

    fn is_primary(&self) -> bool {
        self.primary() == Some(self.id)
    }

    fn next_ts(&self) -> LogicalTimestamp {
        let now = self.shared.now;
        if self.view == now.view {
            LogicalTimestamp::new(now.ell, now.view, now.seq + 1)
        } else {
            LogicalTimestamp::new(now.ell, self.view, 1)
        }
    }

    fn envelope(&self, payload: Payload) -> Envelope {
        let sig = self.identity.sign(&signing_bytes(&payload));
        Envelope {
            payload,
            sender: self.id,
            sig,
        }
    }

    /// Handle a local proposal (a mined block, a rejoin, a leave detection).
    pub fn propose(&mut self, op: CaOperation, now: u64, net: &dyn PingOracle) -> StepOutput {
        let mut out = StepOutput::default();
        self.local_propose(op, now, net, &mut out);
        out
    }

    fn local_propose(
        &mut self,
        op: CaOperation,
        now: u64,
        net: &dyn PingOracle,
        out: &mut StepOutput,
    ) {
        let digest = op.digest();
        if self.shared.committed(&digest) || self.block_is_stale(&op) {
            return;
        }
        let deadline = now + self.timeout();
        self.outstanding.entry(digest).or_insert(Outstanding {
            op: op.clone(),
            deadline,
            broadcast: false,
        });
        if self.is_primary() && self.mode == Mode::Normal {
            self.enqueue(op);
            self.maybe_open_slot(now, net, out);
        } else if let Some(primary) = self.primary() {
            let env = self.envelope(Payload::Propose { op });
            out.outbound.push(Outbound::To(primary, env));
        }
    }

    fn enqueue(&mut self, op: CaOperation) {
        let digest = op.digest();
        let in_flight = self
            .slot
            .as_ref()
            .map_or(false, |s| s.locked_digest == Some(digest));
        if !self.queued.contains(&digest) && !in_flight {
            self.queued.insert(digest);
            self.queue.push_back(op);
        }
    }

    /// A block proposal is dead once the chain has moved past its parent:
    /// the chain only ever appends, so it can never validate again.
    fn block_is_stale(&self, op: &CaOperation) -> bool {
        match op {
            CaOperation::Block(b) => b.parent != self.shared.chain.head().hash(),
            _ => false,
        }
    }

    /// Drop queued, outstanding, and watched block proposals that the last
    /// commit made permanently stale. Join and leave proposals stay; their
    /// validity can come back.
    fn prune_stale_blocks(&mut self) {
        let stale: Vec<Digest> = self
            .queue
            .iter()
            .filter(|op| self.block_is_stale(op))
            .map(|op| op.digest())
            .collect();
        for d in stale {
            self.queued.remove(&d);
            self.watches.remove(&d);
        }
        let head = self.shared.chain.head().hash();
        self.queue.retain(|op| match op {
            CaOperation::Block(b) => b.parent == head,
            _ => true,
        });
        self.outstanding.retain(|_, o| match &o.op {
            CaOperation::Block(b) => b.parent == head,
            _ => true,
        });
    }

    /// Primary: serve the queue when no slot is open. Operations are
    /// validated when the slot opens, so anything stale by then (a block on
    /// a superseded head, a leave for a recovered peer, a duplicate) is
    /// silently dropped.
    fn maybe_open_slot(&mut self, now: u64, net: &dyn PingOracle, out: &mut StepOutput) {
        while self.mode == Mode::Normal && self.is_primary() && self.slot.is_none() {
            let Some(op) = self.queue.pop_front() else {
                return;
            };
            let digest = op.digest();
            self.queued.remove(&digest);
            if self.shared.committed(&digest) || !validate(&op, &self.shared, net) {
                continue;
            }
            let ts = self.next_ts();
            let mut slot = Slot::empty(ts, now + self.timeout());
            slot.locked = Some(op.clone());
            slot.locked_digest = Some(digest);
            self.slot = Some(slot);
            let env = self.envelope(Payload::PrePrepare { op, ts });
            out.outbound.push(Outbound::Broadcast(env));
            self.send_prepare(digest, ts, now, net, out);
            return;
        }
    }

    fn send_prepare(
        &mut self,
        digest: Digest,
        ts: LogicalTimestamp,
        now: u64,
        net: &dyn PingOracle,
        out: &mut StepOutput,
    ) {
        let env = self.envelope(Payload::Prepare { digest, ts });
        let own_sig = env.sig;
        out.outbound.push(Outbound::Broadcast(env));
        if let Some(slot) = self.slot.as_mut() {
            slot.prepares
                .entry(digest)
                .or_default()
                .insert(self.id, own_sig);
        }
        self.try_advance(now, net, out);
    }

    /// Main entry point: a signed message arrived.
    pub fn handle(&mut self, env: &Envelope, now: u64, net: &dyn PingOracle) -> StepOutput {
        let mut out = StepOutput::default();
        if !env.verify() {
            return out;
        }
        self.saw_peer(env.sender, now);
        self.dispatch(env, now, net, &mut out);
        out
    }

    fn saw_peer(&mut self, p: PeerId, now: u64) {
        self.last_seen.insert(p, now);
        self.pending_leave.remove(&p);
    }

    /// Ask `donor` for everything committed past our state. Rate-limited so
    /// a burst of messages from a later epoch triggers one request, not a
    /// storm.
    fn request_sync(&mut self, donor: PeerId, now: u64, out: &mut StepOutput) {
        if self
            .last_sync_request
            .map_or(false, |at| now < at + self.config.base_timeout / 2)
        {
            return;
        }
        self.last_sync_request = Some(now);
        let req = self.envelope(Payload::SyncRequest {
            have: self.shared.now,
        });
        out.outbound.push(Outbound::To(donor, req));
    }

    fn dispatch(&mut self, env: &Envelope, now: u64, net: &dyn PingOracle, out: &mut StepOutput) {
        match env.payload.clone() {
            Payload::Ping { nonce } => {
                let reply = self.envelope(Payload::Pong { nonce });
                out.outbound.push(Outbound::To(env.sender, reply));
            }
            Payload::Pong { .. } => {}
            Payload::Propose { op } => self.on_propose(op, env, now, net, out),
            Payload::PrePrepare { op, ts } => self.on_preprepare(op, ts, env, now, net, out),
            Payload::Prepare { digest, ts } => {
                self.on_vote(false, digest, ts, env, now, net, out)
            }
            Payload::Commit { digest, ts } => self.on_vote(true, digest, ts, env, now, net, out),
            Payload::ViewChange(vc) => self.on_view_change(vc, env, now, net, out),
            Payload::NewView(nv) => self.on_new_view(nv, env.sender, now, net, out),
            Payload::SyncRequest { have } => {
                let from = self
                    .shared
                    .log
                    .iter()
                    .position(|e| e.ts > have)
                    .unwrap_or(self.shared.log.len());
                let entries = self.shared.log[from..].to_vec();
                let reply = self.envelope(Payload::SyncReply { entries });
                out.outbound.push(Outbound::To(env.sender, reply));
            }
            Payload::SyncReply { entries } => {
                let mut behind = false;
                for entry in entries {
                    if entry.ts <= self.shared.now {
                        continue;
                    }
                    if !entry.ts.is_successor_of(&self.shared.now)
                        || verify_commit_cert(&self.shared, &entry).is_err()
                    {
                        behind = entry.ts > self.shared.now;
                        break;
                    }
                    self.apply_entry(entry, now, net, out);
                }
                if behind {
                    // The reply skips ahead of us; ask for the full suffix.
                    self.request_sync(env.sender, now, out);
                }
            }
        }
    }

    fn on_propose(
        &mut self,
        op: CaOperation,
        env: &Envelope,
        now: u64,
        net: &dyn PingOracle,
        out: &mut StepOutput,
    ) {
        let digest = op.digest();
        if self.shared.committed(&digest) || self.block_is_stale(&op) {
            return;
        }
        // Hold the operation regardless: if leadership lands here later
        // (a view change, or a block commit that makes us rank zero), we
        // serve it from the queue.
        self.enqueue(op);
        if self.is_primary() && self.mode == Mode::Normal {
            self.maybe_open_slot(now, net, out);
        } else if !self.watches.contains_key(&digest) {
            // Forward once to whoever we believe is primary and watch for
            // progress; if none comes, suspect the primary. The watch gets
            // twice the proposer's retry timeout so a retry broadcast can
            // land before we call for a view change.
            self.watches.insert(digest, now + 2 * self.timeout());
            if let Some(primary) = self.primary() {
                if primary != env.sender {
                    out.outbound.push(Outbound::To(primary, env.clone()));
                }
            }
        }
    }

    fn on_preprepare(
        &mut self,
        op: CaOperation,
        ts: LogicalTimestamp,
        env: &Envelope,
        now: u64,
        net: &dyn PingOracle,
        out: &mut StepOutput,
    ) {
        if ts.ell > self.shared.now.ell {
            // Traffic from a later epoch: we missed at least a block commit.
            self.request_sync(env.sender, now, out);
            return;
        }
        if matches!(self.mode, Mode::ViewChanging { .. }) {
            return;
        }
        if ts <= self.shared.now || ts.ell != self.shared.now.ell || ts.view < self.view {
            return;
        }
        if ts.view > self.view || !ts.is_successor_of(&self.shared.now) {
            self.buffer_env(ts, env.clone());
            return;
        }
        if Some(env.sender) != self.primary() {
            self.suspect(env.sender);
            return;
        }
        let digest = op.digest();
        // Progress on anything we were watching or proposed ourselves.
        self.watches.remove(&digest);
        let fresh_deadline = now + self.timeout();
        if let Some(o) = self.outstanding.get_mut(&digest) {
            o.deadline = fresh_deadline;
        }
        let deadline = now + self.timeout();
        let slot = self.slot.get_or_insert_with(|| Slot::empty(ts, deadline));
        if slot.ts != ts {
            return;
        }
        match slot.locked_digest {
            Some(existing) if existing != digest => {
                // Equivocation: the primary already locked us onto another
                // operation at this timestamp.
                self.suspect(env.sender);
            }
            Some(_) => {}
            None => {
                if self.shared.committed(&digest) || validate(&op, &self.shared, net) {
                    slot.locked = Some(op);
                    slot.locked_digest = Some(digest);
                    self.send_prepare(digest, ts, now, net, out);
                } else {
                    self.suspect(env.sender);
                }
            }
        }
    }

    fn on_vote(
        &mut self,
        is_commit: bool,
        digest: Digest,
        ts: LogicalTimestamp,
        env: &Envelope,
        now: u64,
        net: &dyn PingOracle,
        out: &mut StepOutput,
    ) {
        if !self.shared.online_voters.contains(&env.sender) {
            return;
        }
        if ts.ell > self.shared.now.ell {
            self.request_sync(env.sender, now, out);
            return;
        }
        if ts <= self.shared.now || ts.ell != self.shared.now.ell || ts.view < self.view {
            return;
        }
        if ts.view > self.view || !ts.is_successor_of(&self.shared.now) {
            self.buffer_env(ts, env.clone());
            return;
        }
        let deadline = now + self.timeout();
        let slot = self.slot.get_or_insert_with(|| Slot::empty(ts, deadline));
        if slot.ts != ts {
            return;
        }
        let tally = if is_commit {
            &mut slot.commits
        } else {
            &mut slot.prepares
        };
        tally.entry(digest).or_default().insert(env.sender, env.sig);
        self.try_advance(now, net, out);
    }

    /// Fire any quorum transitions on the open slot: prepared -> send
    /// commit; committed -> apply and move on.
    fn try_advance(&mut self, now: u64, net: &dyn PingOracle, out: &mut StepOutput) {
        loop {
            let Some(slot) = self.slot.as_mut() else {
                return;
            };
            let Some(digest) = slot.locked_digest else {
                return;
            };
            let quorum = quorum_size(self.shared.online_voters.len().max(1));
            let members = &self.shared.online_voters;

            let prepared_count = slot
                .prepares
                .get(&digest)
                .map_or(0, |m| m.keys().filter(|p| members.contains(*p)).count());
            if !slot.sent_commit && prepared_count >= quorum {
                slot.sent_commit = true;
                let prepares = slot.prepares.get(&digest).cloned().unwrap_or_default();
                slot.prepared_cert = Some(PreparedProof {
                    op: slot.locked.clone().expect("locked digest implies op"),
                    ts: slot.ts,
                    prepares,
                });
                let ts = slot.ts;
                let env = self.envelope(Payload::Commit { digest, ts });
                let own_sig = env.sig;
                out.outbound.push(Outbound::Broadcast(env));
                if let Some(slot) = self.slot.as_mut() {
                    slot.commits
                        .entry(digest)
                        .or_default()
                        .insert(self.id, own_sig);
                }
                continue;
            }

            let commit_sigs: BTreeMap<PeerId, Sig> = slot
                .commits
                .get(&digest)
                .map(|m| {
                    m.iter()
                        .filter(|(p, _)| members.contains(*p))
                        .map(|(p, s)| (*p, *s))
                        .collect()
                })
                .unwrap_or_default();
            if commit_sigs.len() >= quorum {
                let slot = self.slot.take().expect("checked above");
                let op = slot.locked.expect("locked digest implies op");
                if self.shared.committed(&digest) {
                    // A re-proposed operation we already hold: advance the
                    // clock without reapplying.
                    self.shared.now = slot.ts;
                    self.after_progress(now);
                } else {
                    let entry = LogEntry {
                        op,
                        ts: slot.ts,
                        commits: commit_sigs,
                    };
                    self.apply_entry(entry, now, net, out);
                }
                self.drain_buffer(now, net, out);
                self.maybe_open_slot(now, net, out);
                continue;
            }
            return;
        }
    }

    /// Apply a committed entry and do the post-commit chores.
    fn apply_entry(
        &mut self,
        entry: LogEntry,
        now: u64,
        net: &dyn PingOracle,
        out: &mut StepOutput,
    ) {
        let digest = entry.op.digest();
        let op = entry.op.clone();
        if apply_commit(&mut self.shared, entry.clone()).is_err() {
            return;
        }
        self.stats.commits += 1;
        self.slot = None;

        match &op {
            CaOperation::Block(b) => {
                self.view = 0;
                self.vc_votes.clear();
                self.issued_newview.clear();
                self.prune_stale_blocks();
                self.saw_peer(b.peer, now);
                if b.peer != self.id {
                    let welcome = self.envelope(Payload::SyncReply {
                        entries: vec![entry.clone()],
                    });
                    out.outbound.push(Outbound::To(b.peer, welcome));
                }
            }
            CaOperation::Join(p) => {
                self.view = entry.ts.view;
                self.saw_peer(*p, now);
                if *p != self.id {
                    let welcome = self.envelope(Payload::SyncReply {
                        entries: vec![entry.clone()],
                    });
                    out.outbound.push(Outbound::To(*p, welcome));
                }
            }
            CaOperation::Leave(p) => {
                self.view = entry.ts.view;
                self.pending_leave.remove(p);
                self.last_seen.remove(p);
            }
        }

        self.outstanding.remove(&digest);
        self.watches.remove(&digest);
        if self.queued.remove(&digest) {
            self.queue.retain(|o| o.digest() != digest);
        }
        self.after_progress(now);
        out.applied.push(entry);
        self.drain_buffer(now, net, out);
        self.maybe_open_slot(now, net, out);
    }

    /// A commit happened: the pipeline is healthy. Leave view-change mode,
    /// reset the backoff, and push all watchdog deadlines out.
    fn after_progress(&mut self, now: u64) {
        self.mode = Mode::Normal;
        self.newview_wait = None;
        self.timeout_exp = 0;
        let deadline = now + self.timeout();
        for o in self.outstanding.values_mut() {
            o.deadline = deadline;
        }
        for w in self.watches.values_mut() {
            *w = deadline;
        }
    }

    fn suspect(&mut self, p: PeerId) {
        self.stats.suspicions += 1;
        let _ = p;
    }

    fn buffer_env(&mut self, ts: LogicalTimestamp, env: Envelope) {
        if self.buffer.len() >= MAX_BUFFERED {
            return;
        }
        self.buffer.entry(ts).or_default().push(env);
    }

    fn drain_buffer(&mut self, now: u64, net: &dyn PingOracle, out: &mut StepOutput) {
        loop {
            // Drop stale buckets, then replay anything now processable.
            let stale: Vec<LogicalTimestamp> = self
                .buffer
                .keys()
                .filter(|ts| **ts <= self.shared.now || ts.ell < self.shared.now.ell)
                .copied()
                .collect();
            for ts in stale {
                self.buffer.remove(&ts);
            }
            let ready = self
                .buffer
                .keys()
                .find(|ts| ts.view <= self.view && ts.is_successor_of(&self.shared.now))
                .copied();
            let Some(ts) = ready else { return };
            let envs = self.buffer.remove(&ts).unwrap_or_default();
            let before = self.shared.now;
            for env in envs {
                self.dispatch(&env, now, net, out);
            }
            if self.shared.now == before {
                return;
            }
        }
    }

    // ---- view changes ----

    fn begin_view_change(
        &mut self,
        want: u64,
        now: u64,
        net: &dyn PingOracle,
        out: &mut StepOutput,
    ) {
        let target = want.max(self.view + 1);
        if let Mode::ViewChanging { target: t } = self.mode {
            if t >= target {
                return;
            }
        }
        self.mode = Mode::ViewChanging { target };
        self.timeout_exp = (self.timeout_exp + 1).min(MAX_TIMEOUT_DOUBLINGS);
        self.newview_wait = Some(now + self.timeout());
        let vc = ViewChange {
            epoch: self.shared.now.ell,
            new_view: target,
            last_committed: self.shared.now,
            prepared: self.slot.as_ref().and_then(|s| s.prepared_cert.clone()),
        };
        let env = self.envelope(Payload::ViewChange(vc.clone()));
        let svc = SignedViewChange {
            vc,
            sender: self.id,
            sig: env.sig,
        };
        self.vc_votes
            .entry((self.shared.now.ell, target))
            .or_default()
            .insert(self.id, svc);
        out.outbound.push(Outbound::Broadcast(env));
        self.maybe_issue_new_view(target, now, net, out);
    }

    fn on_view_change(
        &mut self,
        vc: ViewChange,
        env: &Envelope,
        now: u64,
        net: &dyn PingOracle,
        out: &mut StepOutput,
    ) {
        if !self.shared.online_voters.contains(&env.sender) {
            return;
        }
        if vc.epoch > self.shared.now.ell {
            // We are an epoch behind; fetch what we're missing.
            self.request_sync(env.sender, now, out);
            return;
        }
        if vc.epoch < self.shared.now.ell || vc.new_view <= self.view {
            return;
        }
        let svc = SignedViewChange {
            vc: vc.clone(),
            sender: env.sender,
            sig: env.sig,
        };
        let votes = self.vc_votes.entry((vc.epoch, vc.new_view)).or_default();
        votes.insert(env.sender, svc);
        let member_votes = votes
            .keys()
            .filter(|p| self.shared.online_voters.contains(*p))
            .count();

        // Join a view change once f+1 members are calling for it.
        let f = (self.shared.online_voters.len().max(1) - 1) / 3;
        let joining = member_votes > f;
        if joining {
            let target = vc.new_view;
            match self.mode {
                Mode::ViewChanging { target: t } if t >= target => {}
                _ => self.begin_view_change(target, now, net, out),
            }
        }
        self.maybe_issue_new_view(vc.new_view, now, net, out);
    }

    /// If this replica is the primary for `target` and holds a quorum of
    /// view-change votes, issue the new-view certificate.
    fn maybe_issue_new_view(
        &mut self,
        target: u64,
        now: u64,
        net: &dyn PingOracle,
        out: &mut StepOutput,
    ) {
        let epoch = self.shared.now.ell;
        if self.issued_newview.contains(&(epoch, target)) {
            return;
        }
        if current_primary(&self.shared.chain, target).ok() != Some(self.id) {
            return;
        }
        let Some(votes) = self.vc_votes.get(&(epoch, target)) else {
            return;
        };
        let members: Vec<&SignedViewChange> = votes
            .iter()
            .filter(|(p, _)| self.shared.online_voters.contains(*p))
            .map(|(_, svc)| svc)
            .collect();
        if members.len() < self.quorum() {
            return;
        }
        // If some cert member committed past us we cannot produce the
        // catch-up entries yet; sync from them first and retry on the next
        // tick once our log has caught up.
        let max_committed = members
            .iter()
            .map(|s| s.vc.last_committed)
            .max()
            .unwrap_or_default();
        if max_committed > self.shared.now {
            if let Some(ahead) = members
                .iter()
                .find(|s| s.vc.last_committed == max_committed)
            {
                let req = self.envelope(Payload::SyncRequest {
                    have: self.shared.now,
                });
                out.outbound.push(Outbound::To(ahead.sender, req));
            }
            return;
        }
        let min_committed = members
            .iter()
            .map(|s| s.vc.last_committed)
            .min()
            .unwrap_or_default();
        let from = self
            .shared
            .log
            .iter()
            .position(|e| e.ts > min_committed)
            .unwrap_or(self.shared.log.len());
        let catchup = self.shared.log[from..].to_vec();
        let cert: Vec<SignedViewChange> = members.into_iter().cloned().collect();
        let nv = NewView {
            epoch,
            new_view: target,
            cert,
            catchup,
        };
        self.issued_newview.insert((epoch, target));
        let env = self.envelope(Payload::NewView(nv.clone()));
        out.outbound.push(Outbound::Broadcast(env));
        self.adopt_new_view(nv, now, net, out);
    }

    fn verify_prepared(&self, proof: &PreparedProof) -> bool {
        if proof.ts.ell != self.shared.now.ell {
            return false;
        }
        let bytes = prepare_signing_bytes(&proof.op.digest(), &proof.ts);
        let valid = proof
            .prepares
            .iter()
            .filter(|(p, sig)| {
                self.shared.online_voters.contains(*p) && identity::verify(p, &bytes, sig)
            })
            .count();
        valid >= self.quorum()
    }

    fn on_new_view(
        &mut self,
        nv: NewView,
        sender: PeerId,
        now: u64,
        net: &dyn PingOracle,
        out: &mut StepOutput,
    ) {
        if nv.epoch > self.shared.now.ell {
            self.request_sync(sender, now, out);
            return;
        }
        if nv.epoch < self.shared.now.ell || nv.new_view <= self.view {
            return;
        }
        if current_primary(&self.shared.chain, nv.new_view).ok() != Some(sender) {
            return;
        }
        // Certificate: a quorum of valid view-change signatures from members.
        let mut seen = BTreeSet::new();
        for svc in &nv.cert {
            if svc.vc.epoch != nv.epoch || svc.vc.new_view != nv.new_view {
                continue;
            }
            if !self.shared.online_voters.contains(&svc.sender) {
                continue;
            }
            let bytes = signing_bytes(&Payload::ViewChange(svc.vc.clone()));
            if identity::verify(&svc.sender, &bytes, &svc.sig) {
                seen.insert(svc.sender);
            }
        }
        if seen.len() < self.quorum() {
            return;
        }
        // Catch up on anything the certificate's members committed.
        let mut entries = nv.catchup.clone();
        entries.sort_by_key(|e| e.ts);
        for entry in entries {
            if entry.ts <= self.shared.now {
                continue;
            }
            if !entry.ts.is_successor_of(&self.shared.now)
                || verify_commit_cert(&self.shared, &entry).is_err()
            {
                break;
            }
            self.apply_entry(entry, now, net, out);
        }
        if self.shared.now.ell != nv.epoch {
            // Catch-up crossed an epoch; the view change is obsolete.
            return;
        }
        self.adopt_new_view(nv, now, net, out);
    }

    fn adopt_new_view(
        &mut self,
        nv: NewView,
        now: u64,
        net: &dyn PingOracle,
        out: &mut StepOutput,
    ) {
        self.view = nv.new_view;
        self.mode = Mode::Normal;
        self.newview_wait = None;
        self.slot = None;
        self.stats.view_changes += 1;

        // The operation to re-propose is derived from the certificate: the
        // valid prepared proof with the highest timestamp that is not
        // already committed.
        let repropose = nv
            .cert
            .iter()
            .filter_map(|svc| svc.vc.prepared.as_ref())
            .filter(|p| self.verify_prepared(p))
            .filter(|p| p.ts > self.shared.now && !self.shared.committed(&p.op.digest()))
            .max_by_key(|p| p.ts);
        if let Some(proof) = repropose.cloned() {
            let ts = LogicalTimestamp::new(self.shared.now.ell, self.view, 1);
            let digest = proof.op.digest();
            let mut slot = Slot::empty(ts, now + self.timeout());
            slot.locked = Some(proof.op);
            slot.locked_digest = Some(digest);
            self.slot = Some(slot);
            let env = self.envelope(Payload::Prepare { digest, ts });
            let own_sig = env.sig;
            out.outbound.push(Outbound::Broadcast(env));
            if let Some(slot) = self.slot.as_mut() {
                slot.prepares
                    .entry(digest)
                    .or_default()
                    .insert(self.id, own_sig);
            }
        }
        // Re-send what we still want served to the new primary.
        if let Some(primary) = self.primary() {
            if primary != self.id {
                let deadline = now + self.timeout();
                let resend: Vec<CaOperation> = self
                    .outstanding
                    .values_mut()
                    .map(|o| {
                        o.deadline = deadline;
                        o.op.clone()
                    })
                    .collect();
                for op in resend {
                    let env = self.envelope(Payload::Propose { op });
                    out.outbound.push(Outbound::To(primary, env));
                }
            }
        }
        self.try_advance(now, net, out);
        self.drain_buffer(now, net, out);
        self.maybe_open_slot(now, net, out);
    }

    // ---- timers and the failure detector ----

    /// Advance local time: send failure-detector pings, raise leave
    /// proposals for silent voters, and fire request/view-change timeouts.
    pub fn on_tick(&mut self, now: u64, net: &dyn PingOracle) -> StepOutput {
        let mut out = StepOutput::default();

        // Pings to every other member, on the configured period.
        if now >= self.next_ping_at {
            self.next_ping_at = now + self.config.ping_interval;
            let others: Vec<PeerId> = self
                .shared
                .online_voters
                .iter()
                .copied()
                .filter(|p| *p != self.id)
                .collect();
            for p in others {
                self.last_seen.entry(p).or_insert(now);
                let env = self.envelope(Payload::Ping { nonce: now });
                out.outbound.push(Outbound::To(p, env));
            }
        }

        // Suspect silent members once per silence episode.
        let silent: Vec<PeerId> = self
            .shared
            .online_voters
            .iter()
            .copied()
            .filter(|p| *p != self.id && !self.pending_leave.contains(p))
            .filter(|p| {
                self.last_seen
                    .get(p)
                    .map_or(false, |seen| now.saturating_sub(*seen) > self.config.suspicion_after)
            })
            .collect();
        for p in silent {
            self.pending_leave.insert(p);
            self.local_propose(CaOperation::Leave(p), now, net, &mut out);
        }

        // Escalate overdue proposals: first re-broadcast to every voter so
        // that their watchdogs arm, then call for a view change.
        let overdue: Vec<Digest> = self
            .outstanding
            .iter()
            .filter(|(_, o)| o.deadline <= now)
            .map(|(d, _)| *d)
            .collect();
        let mut want_view_change = false;
        let mut overdue_bcast: Vec<Digest> = Vec::new();
        let fresh_deadline = now + self.timeout();
        for digest in overdue {
            let (op, was_broadcast) = {
                let o = self.outstanding.get_mut(&digest).expect("key from scan");
                let r = (o.op.clone(), o.broadcast);
                o.broadcast = true;
                o.deadline = fresh_deadline;
                r
            };
            if was_broadcast {
                want_view_change = true;
                overdue_bcast.push(digest);
            } else {
                let env = self.envelope(Payload::Propose { op });
                out.outbound.push(Outbound::Broadcast(env));
            }
        }

        // Watchdogs armed for forwarded proposals.
        let expired_watch = self.watches.values().any(|w| *w <= now);
        if expired_watch {
            let deadline = now + self.timeout();
            for w in self.watches.values_mut() {
                *w = deadline;
            }
            want_view_change = true;
        }

        // A slot that will not commit.
        let slot_to = self.slot.as_ref().map_or(false, |s| s.deadline <= now);
        if slot_to {
            if let Some(s) = self.slot.as_mut() {
                s.deadline = fresh_deadline;
            }
            want_view_change = true;
        }

        // We called for a view change and no new-view arrived.
        let nv_to = self.newview_wait.map_or(false, |d| d <= now);
        if nv_to {
            want_view_change = true;
        }

        if want_view_change {
            if std::env::var("PC_DEBUG_VC").is_ok() {
                eprintln!(
                    "tick {now}: {} wants VC: overdue_bcast={overdue_bcast:?} watch={expired_watch} slot={slot_to} nv_wait={nv_to} view={} now={:?} outstanding={} queue={}",
                    self.id,
                    self.view,
                    self.shared.now,
                    self.outstanding.len(),
                    self.queue.len(),
                );
            }
            let target = match self.mode {
                Mode::ViewChanging { target } => target + 1,
                Mode::Normal => self.view + 1,
            };
            self.begin_view_change(target, now, net, &mut out);
        }

        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{genesis, mine_block_on, Chain};
    use crate::identity::{gen_identity, Identity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::collections::VecDeque;

    /// A synchronous test network: deliver every message immediately, with
    /// optional per-peer crash (messages to a crashed peer vanish).
    struct Net {
        replicas: BTreeMap<PeerId, Replica>,
        crashed: BTreeSet<PeerId>,
        queue: VecDeque<(PeerId, Envelope)>,
        now: u64,
    }

    impl Net {
        fn new(n: usize, seed: u64) -> (Self, Vec<Identity>) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut chain = Chain::new(genesis(4));
            let ids: Vec<Identity> = (0..n).map(|_| gen_identity(&mut rng)).collect();
            for id in &ids {
                let b = mine_block_on(chain.head(), id.peer_id(), 4, 1 << 24, &mut rng).unwrap();
                chain.push(b).unwrap();
            }
            let voters: BTreeSet<PeerId> = ids.iter().map(|i| i.peer_id()).collect();
            let replicas = ids
                .iter()
                .map(|id| {
                    let state = SharedState::initial(chain.clone(), voters.clone());
                    (
                        id.peer_id(),
                        Replica::new(id.clone(), state, ReplicaConfig::default()),
                    )
                })
                .collect();
            (
                Net {
                    replicas,
                    crashed: BTreeSet::new(),
                    queue: VecDeque::new(),
                    now: 0,
                },
                ids,
            )
        }

        fn online(&self, p: &PeerId) -> bool {
            !self.crashed.contains(p)
        }

        fn push_out(&mut self, from: PeerId, out: StepOutput) {
            for ob in out.outbound {
                match ob {
                    Outbound::To(to, env) => self.queue.push_back((to, env)),
                    Outbound::Broadcast(env) => {
                        let members = self.replicas[&from].voters().clone();
                        for to in members {
                            if to != from {
                                self.queue.push_back((to, env.clone()));
                            }
                        }
        }
                }
            }
        }

        fn run(&mut self, ticks: u64) {
            for _ in 0..ticks {
                self.now += 1;
                let ids: Vec<PeerId> = self.replicas.keys().copied().collect();
                for id in &ids {
                    if self.crashed.contains(id) {
                        continue;
                    }
                    let crashed = self.crashed.clone();
                    let oracle = move |p: &PeerId| !crashed.contains(p);
                    let out = self.replicas.get_mut(id).unwrap().on_tick(self.now, &oracle);
                    self.push_out(*id, out);
                }
                // Deliver everything currently queued (and what it spawns).
                while let Some((to, env)) = self.queue.pop_front() {
                    if self.crashed.contains(&to) {
                        continue;
                    }
                    if !self.replicas.contains_key(&to) {
                        continue;
                    }
                    let crashed = self.crashed.clone();
                    let oracle = move |p: &PeerId| !crashed.contains(p);
                    let out = self
                        .replicas
                        .get_mut(&to)
                        .unwrap()
                        .handle(&env, self.now, &oracle);
                    self.push_out(to, out);
                }
            }
        }

        fn propose_at(&mut self, who: PeerId, op: CaOperation) {
            let crashed = self.crashed.clone();
            let oracle = move |p: &PeerId| !crashed.contains(p);
            let out = self
                .replicas
                .get_mut(&who)
                .unwrap()
                .propose(op, self.now, &oracle);
            self.push_out(who, out);
        }

        fn honest_logs(&self) -> Vec<Vec<Digest>> {
            self.replicas
                .values()
                .filter(|r| !self.crashed.contains(&r.id()))
                .map(|r| r.shared.log.iter().map(|e| e.op.digest()).collect())
                .collect()
        }
    }

    fn offline_voter_setup(net: &mut Net, ids: &[Identity]) -> PeerId {
        // Take one voter offline so a join/leave can be exercised.
        let victim = ids[0].peer_id();
        net.crashed.insert(victim);
        victim
    }

    #[test]
    fn four_voters_commit_identical_logs() {
        let (mut net, ids) = Net::new(4, 60);
        let victim = offline_voter_setup(&mut net, &ids);
        let proposer = ids[1].peer_id();
        net.propose_at(proposer, CaOperation::Leave(victim));
        net.run(3);

        let logs = net.honest_logs();
        assert!(logs.iter().all(|l| l.len() == 1), "logs: {logs:?}");
        assert!(logs.iter().all(|l| l == &logs[0]));
        // All online replicas agree on the timestamp too.
        let ts: BTreeSet<LogicalTimestamp> = net
            .replicas
            .values()
            .filter(|r| net.online(&r.id()))
            .map(|r| r.shared.log[0].ts)
            .collect();
        assert_eq!(ts.len(), 1);
    }

    #[test]
    fn duplicate_prepares_count_once() {
        let (mut net, ids) = Net::new(4, 61);
        let a = ids[0].peer_id();
        let primary_id = {
            let r = &net.replicas[&a];
            current_primary(&r.shared.chain, 0).unwrap()
        };
        // Hand-deliver a duplicated prepare to the primary and check the
        // tally stays at one.
        let digest = CaOperation::Leave(a).digest();
        let ts = LogicalTimestamp::new(4, 0, 1);
        let sender = ids.iter().find(|i| i.peer_id() != primary_id).unwrap();
        let payload = Payload::Prepare { digest, ts };
        let env = Envelope {
            sig: sender.sign(&signing_bytes(&payload)),
            payload,
            sender: sender.peer_id(),
        };
        let oracle = |_: &PeerId| true;
        let primary = net.replicas.get_mut(&primary_id).unwrap();
        primary.handle(&env, 1, &oracle);
        primary.handle(&env, 1, &oracle);
        let slot = primary.slot.as_ref().unwrap();
        assert_eq!(slot.prepares[&digest].len(), 1);
    }

    #[test]
    fn preprepare_from_non_primary_is_ignored() {
        let (mut net, ids) = Net::new(4, 62);
        let primary_id = current_primary(&net.replicas[&ids[0].peer_id()].shared.chain, 0).unwrap();
        let impostor = ids.iter().find(|i| i.peer_id() != primary_id).unwrap();
        let target_id = ids
            .iter()
            .map(|i| i.peer_id())
            .find(|p| *p != primary_id && *p != impostor.peer_id())
            .unwrap();

        let op = CaOperation::Leave(ids[0].peer_id());
        let ts = LogicalTimestamp::new(4, 0, 1);
        let payload = Payload::PrePrepare { op, ts };
        let env = Envelope {
            sig: impostor.sign(&signing_bytes(&payload)),
            payload,
            sender: impostor.peer_id(),
        };
        let oracle = |_: &PeerId| true;
        let target = net.replicas.get_mut(&target_id).unwrap();
        let out = target.handle(&env, 1, &oracle);
        assert!(out.outbound.is_empty());
        assert!(target.slot.is_none());
        assert_eq!(target.stats.suspicions, 1);
    }

    #[test]
    fn primary_crash_triggers_view_change_and_liveness_resumes() {
        let (mut net, ids) = Net::new(4, 63);
        let primary_id = current_primary(&net.replicas[&ids[0].peer_id()].shared.chain, 0).unwrap();
        net.crashed.insert(primary_id);

        // Any proposal must still commit: the remaining three change views.
        let proposer = ids
            .iter()
            .map(|i| i.peer_id())
            .find(|p| *p != primary_id)
            .unwrap();
        net.propose_at(proposer, CaOperation::Leave(primary_id));
        net.run(400);

        let logs = net.honest_logs();
        assert!(
            logs.iter().all(|l| l.len() == 1),
            "leave of crashed primary should commit, logs: {logs:?}"
        );
        let views: Vec<u64> = net
            .replicas
            .values()
            .filter(|r| net.online(&r.id()))
            .map(|r| r.view())
            .collect();
        assert!(views.iter().all(|v| *v >= 1), "views: {views:?}");
    }

    #[test]
    fn two_consecutive_primary_crashes_advance_two_views() {
        let (mut net, ids) = Net::new(5, 64);
        let chain = net.replicas[&ids[0].peer_id()].shared.chain.clone();
        let p0 = current_primary(&chain, 0).unwrap();
        let p1 = current_primary(&chain, 1).unwrap();
        net.crashed.insert(p0);
        net.crashed.insert(p1);

        let proposer = ids
            .iter()
            .map(|i| i.peer_id())
            .find(|p| *p != p0 && *p != p1)
            .unwrap();
        net.propose_at(proposer, CaOperation::Leave(p0));
        net.run(900);

        let committed: Vec<usize> = net
            .replicas
            .values()
            .filter(|r| net.online(&r.id()))
            .map(|r| r.shared.log.len())
            .collect();
        assert!(committed.iter().all(|c| *c >= 1), "committed: {committed:?}");
        let views: Vec<u64> = net
            .replicas
            .values()
            .filter(|r| net.online(&r.id()))
            .map(|r| r.view())
            .collect();
        assert!(views.iter().all(|v| *v >= 2), "views: {views:?}");
    }

    #[test]
    fn responsive_peer_is_never_proposed_for_leave() {
        let (mut net, _ids) = Net::new(4, 65);
        net.run(300);
        for r in net.replicas.values() {
            assert!(r.shared.log.is_empty(), "no leaves expected");
        }
    }

    #[test]
    fn crashed_peer_gets_one_leave_commit_from_many_detectors() {
        let (mut net, ids) = Net::new(5, 66);
        let victim = ids[4].peer_id();
        net.crashed.insert(victim);
        net.run(400);

        let logs = net.honest_logs();
        for log in &logs {
            assert_eq!(log.len(), 1, "exactly one leave commit, got {log:?}");
        }
        for r in net.replicas.values() {
            if net.online(&r.id()) {
                assert!(!r.shared.online_voters.contains(&victim));
            }
        }
    }

    #[test]
    fn rejoin_after_leave_restores_membership() {
        let (mut net, ids) = Net::new(4, 67);
        let victim = ids[2].peer_id();
        net.crashed.insert(victim);
        net.run(400);
        // victim evicted
        let sample = net
            .replicas
            .values()
            .find(|r| net.online(&r.id()))
            .unwrap();
        assert!(!sample.shared.online_voters.contains(&victim));

        // victim recovers: sync from a live replica's log, then join
        let donor_log = sample.shared.log.clone();
        net.crashed.remove(&victim);
        {
            let initial = SharedState::initial(
                net.replicas[&victim].shared.chain.clone(),
                // the original voter set at bootstrap
                ids.iter().map(|i| i.peer_id()).collect(),
            );
            let synced = super::super::sync_new_peer(&initial, &donor_log).unwrap();
            let r = net.replicas.get_mut(&victim).unwrap();
            r.shared = synced;
        }
        net.propose_at(victim, CaOperation::Join(victim));
        net.run(10);

        for r in net.replicas.values() {
            assert!(
                r.shared.online_voters.contains(&victim),
                "replica {} missing rejoined voter",
                r.id()
            );
        }
    }
}
