//! The account-balance application layered on the agreement protocol:
//! signed transfer transactions, per-block reward distribution, and balance
//! bootstrap, plus a replica that runs the application's own
//! pre-prepare/prepare/commit rounds over the membership the agreement
//! layer maintains.
//!
//! Coins are integer units so conservation is exact. A transaction carries a
//! per-account sequence number inside the signed payload; the ledger accepts
//! only the next sequence number per source account, so an old signed
//! transaction can never be replayed.

use crate::agreement::LogicalTimestamp;
use crate::enc;
use crate::identity::{self, sha256, Digest, Identity, PeerId, Sig};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

/// Accounts are keypair-backed, like peer identities; voters are paid into
/// the account matching their peer ID.
pub type AccountId = PeerId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TxError {
    #[error("bad signature")]
    BadSignature,
    #[error("insufficient balance: have {have}, need {need}")]
    InsufficientBalance { have: u64, need: u64 },
    #[error("bad sequence number: got {got}, expected {expected}")]
    BadSequence { got: u64, expected: u64 },
    #[error("zero-value transfers are not accepted")]
    ZeroValue,
    #[error("negative balance in snapshot for {0}")]
    NegativeSnapshot(AccountId),
}

/// A signed transfer of `value` coins. The signature covers
/// (source, dest, value, seq).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Transaction {
    pub source: AccountId,
    pub dest: AccountId,
    pub value: u64,
    pub seq: u64,
    pub sig: Sig,
}

impl Transaction {
    pub fn signing_bytes(
        source: &AccountId,
        dest: &AccountId,
        value: u64,
        seq: u64,
    ) -> Vec<u8> {
        let mut out = Vec::with_capacity(96);
        enc::put_tag(&mut out, b'T');
        enc::put_bytes(&mut out, &source.0);
        enc::put_bytes(&mut out, &dest.0);
        enc::put_u64(&mut out, value);
        enc::put_u64(&mut out, seq);
        out
    }

    pub fn signed(signer: &Identity, dest: AccountId, value: u64, seq: u64) -> Transaction {
        let source = signer.peer_id();
        let sig = signer.sign(&Self::signing_bytes(&source, &dest, value, seq));
        Transaction {
            source,
            dest,
            value,
            seq,
            sig,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Self::signing_bytes(&self.source, &self.dest, self.value, self.seq);
        enc::put_bytes(&mut out, &self.sig.0);
        out
    }

    pub fn digest(&self) -> Digest {
        sha256(&self.encode())
    }
}

/// The balance map plus the counters that make conservation checkable: the
/// bootstrap total and everything minted since.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    balances: BTreeMap<AccountId, u64>,
    next_seq: BTreeMap<AccountId, u64>,
    snapshot_total: u64,
    minted: u64,
    applied_ops: u64,
}

impl Ledger {
    /// Initialize from a committed balance snapshot. Negative balances are
    /// rejected; zero balances are dropped.
    pub fn bootstrap_balances(snapshot: &BTreeMap<AccountId, i64>) -> Result<Ledger, TxError> {
        let mut balances = BTreeMap::new();
        let mut total = 0u64;
        for (account, &coins) in snapshot {
            if coins < 0 {
                return Err(TxError::NegativeSnapshot(*account));
            }
            if coins > 0 {
                balances.insert(*account, coins as u64);
                total += coins as u64;
            }
        }
        Ok(Ledger {
            balances,
            next_seq: BTreeMap::new(),
            snapshot_total: total,
            minted: 0,
            applied_ops: 0,
        })
    }

    pub fn balance(&self, a: &AccountId) -> u64 {
        self.balances.get(a).copied().unwrap_or(0)
    }

    pub fn next_seq(&self, a: &AccountId) -> u64 {
        self.next_seq.get(a).copied().unwrap_or(1)
    }

    pub fn applied_ops(&self) -> u64 {
        self.applied_ops
    }

    pub fn total(&self) -> u64 {
        self.balances.values().sum()
    }

    pub fn snapshot_total(&self) -> u64 {
        self.snapshot_total
    }

    pub fn minted(&self) -> u64 {
        self.minted
    }

    /// Conservation: every coin is either from the bootstrap snapshot or a
    /// block reward.
    pub fn conserved(&self) -> bool {
        self.total() == self.snapshot_total + self.minted
    }

    /// Accept iff the signature verifies, the source can afford it, and the
    /// sequence number is exactly the next one for the source account.
    /// Unknown source accounts have balance zero and fail the balance check.
    pub fn validate_tx(&self, tx: &Transaction) -> Result<(), TxError> {
        let bytes = Transaction::signing_bytes(&tx.source, &tx.dest, tx.value, tx.seq);
        if !identity::verify(&tx.source, &bytes, &tx.sig) {
            return Err(TxError::BadSignature);
        }
        if tx.value == 0 {
            return Err(TxError::ZeroValue);
        }
        let expected = self.next_seq(&tx.source);
        if tx.seq != expected {
            return Err(TxError::BadSequence {
                got: tx.seq,
                expected,
            });
        }
        let have = self.balance(&tx.source);
        if have < tx.value {
            return Err(TxError::InsufficientBalance {
                have,
                need: tx.value,
            });
        }
        Ok(())
    }

    /// Apply a validated transaction: debit the source, credit the
    /// destination, bump the source's sequence.
    pub fn apply_tx(&mut self, tx: &Transaction) {
        debug_assert!(self.validate_tx(tx).is_ok());
        let src = self.balance(&tx.source) - tx.value;
        if src == 0 {
            self.balances.remove(&tx.source);
        } else {
            self.balances.insert(tx.source, src);
        }
        *self.balances.entry(tx.dest).or_insert(0) += tx.value;
        self.next_seq.insert(tx.source, tx.seq + 1);
        self.applied_ops += 1;
    }

    /// Mint the per-block reward: each online voter gets an equal share,
    /// and the integer remainder goes to the block finder. Exactly `reward`
    /// coins enter circulation.
    pub fn distribute_reward(
        &mut self,
        voters: &BTreeSet<PeerId>,
        reward: u64,
        finder: &PeerId,
    ) {
        if reward == 0 || voters.is_empty() {
            return;
        }
        let share = reward / voters.len() as u64;
        let remainder = reward % voters.len() as u64;
        if share > 0 {
            for v in voters {
                *self.balances.entry(*v).or_insert(0) += share;
            }
        }
        if remainder > 0 {
            *self.balances.entry(*finder).or_insert(0) += remainder;
        }
        self.minted += reward;
    }

    /// Sorted account/balance records for bit-exact comparison.
    pub fn export_sorted(&self) -> Vec<(AccountId, u64)> {
        self.balances.iter().map(|(a, b)| (*a, *b)).collect()
    }
}

/// Application timestamps: the membership timestamp from the agreement
/// layer plus an operation sequence number, ordered lexicographically.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize, Default,
)]
pub struct AppTimestamp {
    pub ca: LogicalTimestamp,
    pub seq: u64,
}

impl AppTimestamp {
    pub fn new(ca: LogicalTimestamp, seq: u64) -> Self {
        AppTimestamp { ca, seq }
    }

    fn is_successor_of(&self, now: &AppTimestamp) -> bool {
        self.ca >= now.ca && self.seq == now.seq + 1
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        enc::put_u64(out, self.ca.ell);
        enc::put_u64(out, self.ca.view);
        enc::put_u64(out, self.ca.seq);
        enc::put_u64(out, self.seq);
    }
}

/// Application phase messages. The application runs its own agreement
/// rounds with the same quorum rule over the same voter set; the primary is
/// whoever currently leads the membership layer, so a failed application
/// primary is replaced by the membership layer's view change.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AppPayload {
    Submit {
        tx: Transaction,
    },
    /// Phase messages name both the round's timestamp and the position
    /// (`prev`) it extends. Votes count only within their (prev, ts) pool
    /// and a correct replica votes for at most one round per position, so
    /// two quorums can never certify competing successors of the same
    /// position.
    PrePrepare {
        tx: Transaction,
        ts: AppTimestamp,
        prev: AppTimestamp,
    },
    Prepare {
        digest: Digest,
        ts: AppTimestamp,
        prev: AppTimestamp,
    },
    /// Commit votes carry the transaction itself, so a replica that missed
    /// the pre-prepare can still apply once it holds a quorum.
    Commit {
        tx: Transaction,
        ts: AppTimestamp,
        prev: AppTimestamp,
    },
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AppEnvelope {
    pub payload: AppPayload,
    pub sender: PeerId,
    pub sig: Sig,
}

pub fn app_signing_bytes(p: &AppPayload) -> Vec<u8> {
    let mut out = Vec::new();
    match p {
        AppPayload::Submit { tx } => {
            enc::put_tag(&mut out, b'a');
            enc::put_bytes(&mut out, &tx.encode());
        }
        AppPayload::PrePrepare { tx, ts, prev } => {
            enc::put_tag(&mut out, b'b');
            enc::put_bytes(&mut out, &tx.encode());
            ts.encode_into(&mut out);
            prev.encode_into(&mut out);
        }
        AppPayload::Prepare { digest, ts, prev } => {
            enc::put_tag(&mut out, b'c');
            enc::put_bytes(&mut out, &digest.0);
            ts.encode_into(&mut out);
            prev.encode_into(&mut out);
        }
        AppPayload::Commit { tx, ts, prev } => {
            enc::put_tag(&mut out, b'd');
            enc::put_bytes(&mut out, &tx.encode());
            ts.encode_into(&mut out);
            prev.encode_into(&mut out);
        }
    }
    out
}

impl AppEnvelope {
    pub fn verify(&self) -> bool {
        identity::verify(&self.sender, &app_signing_bytes(&self.payload), &self.sig)
    }
}

/// A committed application operation.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AppLogEntry {
    pub tx: Transaction,
    pub ts: AppTimestamp,
}

/// The membership view the application replica needs from its co-located
/// agreement replica for one step.
#[derive(Clone, Debug)]
pub struct MembershipView {
    pub voters: BTreeSet<PeerId>,
    pub primary: Option<PeerId>,
    pub ca_now: LogicalTimestamp,
}

#[derive(Debug, Default, Clone)]
struct AppTally {
    /// Transaction bytes, from the pre-prepare or any commit vote.
    txs: BTreeMap<Digest, Transaction>,
    /// Who pre-prepared which digest; consulted when this replica's
    /// frontier reaches the round later than the message did.
    proposed: BTreeMap<Digest, PeerId>,
    prepares: BTreeMap<Digest, BTreeSet<PeerId>>,
    commits: BTreeMap<Digest, BTreeSet<PeerId>>,
    /// Whether this replica already cast its commit vote here.
    voted_commit: bool,
}

/// Messages an application step wants sent.
#[derive(Clone, Debug)]
pub enum AppOutbound {
    To(PeerId, AppEnvelope),
    Broadcast(AppEnvelope),
}

#[derive(Default, Debug)]
pub struct AppStepOutput {
    pub outbound: Vec<AppOutbound>,
    pub applied: Vec<AppLogEntry>,
}

/// One voter's application replica: a ledger plus chained single-slot
/// agreement rounds over transactions.
///
/// Cloning copies the whole replica; the host uses that for snapshot
/// donation.
///
/// Rounds form a chain: each round names the committed position it extends,
/// a replica votes for at most one round per position, and only votes cast
/// for the same (position, timestamp) pool count toward a quorum. Commit
/// votes carry the transaction, so any replica holding a quorum can apply
/// it once its own log reaches that position, regardless of what it missed
/// in between.
#[derive(Clone)]
pub struct AppReplica {
    identity: Identity,
    id: PeerId,
    pub ledger: Ledger,
    pub log: Vec<AppLogEntry>,
    now: AppTimestamp,
    /// Chain length up to which block rewards have actually been minted.
    /// Minting is driven by the epoch annotations of committed rounds, so
    /// every replica interleaves rewards and transfers identically.
    rewards_done: u64,
    /// Round state per (position, timestamp).
    tallies: BTreeMap<(AppTimestamp, AppTimestamp), AppTally>,
    /// The single transaction this replica prepared per position. Voting
    /// for the same digest again under a newer epoch annotation is allowed;
    /// a different digest at the same position never is.
    locks: BTreeMap<AppTimestamp, Digest>,
    /// Block reward events fed by the membership layer, not yet minted:
    /// height -> (finder, voter set at that commit).
    pending_rewards: BTreeMap<u64, (PeerId, BTreeSet<PeerId>)>,
    /// The agreed voter set as of each chain length; the quorum base for
    /// rounds annotated with that epoch. Grown sets must not retroactively
    /// raise the bar for older rounds.
    epoch_voters: BTreeMap<u64, BTreeSet<PeerId>>,
    reward_per_block: u64,
    /// The round this replica opened as primary, if any.
    proposing: Option<(AppTimestamp, AppTimestamp)>,
    queue: VecDeque<Transaction>,
    queued: BTreeSet<Digest>,
}

const MAX_APP_TALLIES: usize = 512;

impl AppReplica {
    pub fn new(
        identity: Identity,
        ledger: Ledger,
        ca_now: LogicalTimestamp,
        initial_voters: BTreeSet<PeerId>,
        reward_per_block: u64,
    ) -> Self {
        let id = identity.peer_id();
        let mut epoch_voters = BTreeMap::new();
        epoch_voters.insert(ca_now.ell, initial_voters);
        AppReplica {
            identity,
            id,
            ledger,
            log: Vec::new(),
            now: AppTimestamp::new(LogicalTimestamp::new(ca_now.ell, 0, 0), 0),
            rewards_done: ca_now.ell,
            tallies: BTreeMap::new(),
            locks: BTreeMap::new(),
            pending_rewards: BTreeMap::new(),
            epoch_voters,
            reward_per_block,
            proposing: None,
            queue: VecDeque::new(),
            queued: BTreeSet::new(),
        }
    }

    pub fn id(&self) -> PeerId {
        self.id
    }

    pub fn now(&self) -> AppTimestamp {
        self.now
    }

    /// Adopt another replica's application state wholesale (snapshot sync
    /// for a voter that was offline; the application layer, unlike the
    /// membership layer, supports snapshots).
    pub fn adopt_snapshot(&mut self, donor: &AppReplica) {
        // A round of ours that was in flight goes back in line first; if
        // the donor's log already holds it, serving will skip it.
        if let Some(key) = self.proposing.take() {
            let orphan = self
                .tallies
                .get(&key)
                .and_then(|t| t.txs.values().next().copied());
            if let Some(tx) = orphan {
                let digest = tx.digest();
                if !self.queued.contains(&digest) {
                    self.queued.insert(digest);
                    self.queue.push_front(tx);
                }
            }
        }
        self.ledger = donor.ledger.clone();
        self.log = donor.log.clone();
        self.now = donor.now;
        self.rewards_done = donor.rewards_done;
        self.pending_rewards = donor.pending_rewards.clone();
        self.epoch_voters = donor.epoch_voters.clone();
        self.reward_per_block = donor.reward_per_block;
        self.tallies.clear();
        self.locks.clear();
        // The client backlog survives: those transactions are position
        // independent and get re-validated when served.
    }

    /// True when traffic shows rounds anchored past our position: we missed
    /// commits and need a snapshot from someone current.
    pub fn is_behind(&self) -> bool {
        self.tallies.keys().any(|(prev, _)| *prev > self.now)
    }

    pub fn rewards_done(&self) -> u64 {
        self.rewards_done
    }

    /// One-line internal state dump for debugging harnesses.
    pub fn debug_round_state(&self) -> String {
        format!(
            "now={:?} proposing={:?} queue={} locks={:?} tallies={:?} pending_rewards={:?}",
            self.now,
            self.proposing,
            self.queue.len(),
            self.locks,
            self.tallies
                .iter()
                .map(|((p, t), tally)| {
                    (
                        (p.ca.ell, p.seq, t.ca.ell, t.seq),
                        tally.proposed.len(),
                        tally.prepares.values().map(|v| v.len()).sum::<usize>(),
                        tally.commits.values().map(|v| v.len()).sum::<usize>(),
                    )
                })
                .collect::<Vec<_>>(),
            self.pending_rewards.keys().collect::<Vec<_>>()
        )
    }

    fn envelope(&self, payload: AppPayload) -> AppEnvelope {
        let sig = self.identity.sign(&app_signing_bytes(&payload));
        AppEnvelope {
            payload,
            sender: self.id,
            sig,
        }
    }

    /// The membership layer committed a block. The reward event is queued
    /// and minted when the committed round annotations (or an end-of-run
    /// settlement) reach its height. Called in chain order by the host.
    pub fn on_block_committed(
        &mut self,
        height: u64,
        finder: &PeerId,
        voters: &BTreeSet<PeerId>,
    ) {
        self.epoch_voters.entry(height).or_insert_with(|| voters.clone());
        if height <= self.rewards_done || self.pending_rewards.contains_key(&height) {
            return;
        }
        self.pending_rewards.insert(height, (*finder, voters.clone()));
    }

    /// Mint every queued reward up to and including `height`.
    pub fn mint_rewards_to(&mut self, height: u64) {
        let due: Vec<u64> = self
            .pending_rewards
            .range(..=height)
            .map(|(h, _)| *h)
            .collect();
        for h in due {
            let (finder, voters) = self.pending_rewards.remove(&h).expect("scanned key");
            debug_assert_eq!(h, self.rewards_done + 1, "rewards minted in order");
            self.ledger
                .distribute_reward(&voters, self.reward_per_block, &finder);
            self.rewards_done = h;
        }
    }

    /// A client handed us a transaction. If we lead, serve it; otherwise
    /// pass it to the current primary.
    pub fn submit(&mut self, tx: Transaction, view: &MembershipView) -> AppStepOutput {
        let mut out = AppStepOutput::default();
        self.enqueue_or_forward(tx, view, &mut out);
        out
    }

    fn enqueue_or_forward(
        &mut self,
        tx: Transaction,
        view: &MembershipView,
        out: &mut AppStepOutput,
    ) {
        if view.primary == Some(self.id) {
            let digest = tx.digest();
            let in_flight = self.proposing.map_or(false, |key| {
                self.tallies
                    .get(&key)
                    .map_or(false, |t| t.txs.contains_key(&digest))
            });
            if !self.queued.contains(&digest) && !in_flight && !self.committed(&digest) {
                self.queued.insert(digest);
                self.queue.push_back(tx);
            }
            self.maybe_open_round(view, out);
        } else if let Some(primary) = view.primary {
            let env = self.envelope(AppPayload::Submit { tx });
            out.outbound.push(AppOutbound::To(primary, env));
        }
    }

    fn committed(&self, digest: &Digest) -> bool {
        self.log.iter().any(|e| e.tx.digest() == *digest)
    }

    fn next_ts(&self, view: &MembershipView) -> AppTimestamp {
        AppTimestamp::new(view.ca_now.max(self.now.ca), self.now.seq + 1)
    }

    /// Primary: open the next round at our current position when no round
    /// of ours is pending.
    fn maybe_open_round(&mut self, view: &MembershipView, out: &mut AppStepOutput) {
        while view.primary == Some(self.id) && self.proposing.is_none() {
            let Some(tx) = self.queue.pop_front() else {
                return;
            };
            let digest = tx.digest();
            self.queued.remove(&digest);
            self.mint_rewards_to(view.ca_now.ell);
            if self.committed(&digest) || self.ledger.validate_tx(&tx).is_err() {
                continue;
            }
            let prev = self.now;
            let ts = self.next_ts(view);
            self.proposing = Some((prev, ts));
            let tally = self.tallies.entry((prev, ts)).or_default();
            tally.txs.insert(digest, tx);
            let env = self.envelope(AppPayload::PrePrepare { tx, ts, prev });
            out.outbound.push(AppOutbound::Broadcast(env));
            self.cast_prepare(prev, ts, digest, view, out);
            return;
        }
    }

    /// Cast our prepare vote: at most one transaction per position, though
    /// re-proposals of that same transaction under a newer epoch annotation
    /// get our vote again in their own pool.
    fn cast_prepare(
        &mut self,
        prev: AppTimestamp,
        ts: AppTimestamp,
        digest: Digest,
        view: &MembershipView,
        out: &mut AppStepOutput,
    ) {
        match self.locks.get(&prev) {
            Some(locked) if *locked != digest => return,
            _ => {}
        }
        self.locks.insert(prev, digest);
        let tally = self.tallies.entry((prev, ts)).or_default();
        if !tally
            .prepares
            .entry(digest)
            .or_default()
            .insert(self.id)
        {
            return;
        }
        let env = self.envelope(AppPayload::Prepare { digest, ts, prev });
        out.outbound.push(AppOutbound::Broadcast(env));
        self.try_advance(view, out);
    }

    pub fn handle(&mut self, env: &AppEnvelope, view: &MembershipView) -> AppStepOutput {
        let mut out = AppStepOutput::default();
        if !env.verify() {
            return out;
        }
        self.dispatch(env, view, &mut out);
        out
    }

    fn dispatch(&mut self, env: &AppEnvelope, view: &MembershipView, out: &mut AppStepOutput) {
        match env.payload.clone() {
            AppPayload::Submit { tx } => self.enqueue_or_forward(tx, view, out),
            AppPayload::PrePrepare { tx, ts, prev } => {
                self.on_preprepare(tx, ts, prev, env, view, out)
            }
            AppPayload::Prepare { digest, ts, prev } => {
                if ts > self.now {
                    if self.tallies.len() < MAX_APP_TALLIES {
                        self.tallies
                            .entry((prev, ts))
                            .or_default()
                            .prepares
                            .entry(digest)
                            .or_default()
                            .insert(env.sender);
                        self.try_advance(view, out);
                    }
                }
            }
            AppPayload::Commit { tx, ts, prev } => {
                if ts > self.now {
                    if self.tallies.len() < MAX_APP_TALLIES {
                        let digest = tx.digest();
                        let tally = self.tallies.entry((prev, ts)).or_default();
                        tally.txs.entry(digest).or_insert(tx);
                        tally.commits.entry(digest).or_default().insert(env.sender);
                        self.try_advance(view, out);
                    }
                }
            }
        }
    }

    fn on_preprepare(
        &mut self,
        tx: Transaction,
        ts: AppTimestamp,
        prev: AppTimestamp,
        env: &AppEnvelope,
        view: &MembershipView,
        out: &mut AppStepOutput,
    ) {
        if ts <= self.now || Some(env.sender) != view.primary {
            return;
        }
        if self.tallies.len() >= MAX_APP_TALLIES {
            return;
        }
        let digest = tx.digest();
        let tally = self.tallies.entry((prev, ts)).or_default();
        tally.txs.entry(digest).or_insert(tx);
        tally.proposed.entry(digest).or_insert(env.sender);
        self.try_advance(view, out);
    }

    /// Vote on a recorded proposal once our frontier reaches its position.
    /// Voting only at the frontier means validation runs against exactly
    /// the ledger prefix the timestamp names (epoch rewards minted, every
    /// earlier round applied), the same at all voters.
    fn maybe_vote(&mut self, view: &MembershipView, out: &mut AppStepOutput) -> bool {
        let lock = self.locks.get(&self.now).copied();
        let candidate = self
            .tallies
            .range((self.now, AppTimestamp::default())..)
            .take_while(|((prev, _), _)| *prev == self.now)
            .find_map(|((_, ts), tally)| {
                if ts.ca > view.ca_now || !ts.is_successor_of(&self.now) {
                    return None;
                }
                tally
                    .proposed
                    .iter()
                    .filter(|(d, sender)| {
                        Some(**sender) == view.primary && lock.map_or(true, |l| l == **d)
                    })
                    .find_map(|(d, _)| tally.txs.get(d).map(|tx| (*ts, *d, *tx)))
            });
        let Some((ts, digest, tx)) = candidate else {
            return false;
        };
        if let Some(tally) = self.tallies.get(&(self.now, ts)) {
            if tally
                .prepares
                .get(&digest)
                .map_or(false, |v| v.contains(&self.id))
            {
                return false;
            }
        }
        self.mint_rewards_to(ts.ca.ell);
        if !self.committed(&digest) && self.ledger.validate_tx(&tx).is_err() {
            return false;
        }
        self.cast_prepare(self.now, ts, digest, view, out);
        true
    }

    /// Prepare and commit votes for a round count against the voter set as
    /// of the round's epoch annotation; a quorum formed under the epoch's
    /// membership stays a quorum at replicas that evaluate it later, after
    /// further blocks grew the voter set.
    fn epoch_quorum(&self, ts: &AppTimestamp) -> Option<(usize, &BTreeSet<PeerId>)> {
        let voters = self.epoch_voters.get(&ts.ca.ell)?;
        if voters.is_empty() {
            return None;
        }
        Some((crate::agreement::quorum_size(voters.len()), voters))
    }

    /// Fire quorum transitions: our prepared round at the frontier earns our
    /// commit vote; a commit quorum extending our position is applied.
    fn try_advance(&mut self, view: &MembershipView, out: &mut AppStepOutput) {
        loop {
            // Prepare vote for a recorded proposal our frontier reached.
            if self.maybe_vote(view, out) {
                continue;
            }

            // Commit vote: a round we prepared at our current position
            // gathered a prepare quorum (under its epoch's voter set).
            if let Some(digest) = self.locks.get(&self.now).copied() {
                let prev = self.now;
                let vote = self
                    .tallies
                    .range((prev, AppTimestamp::default())..)
                    .take_while(|((p, _), _)| *p == prev)
                    .find_map(|((_, ts), tally)| {
                        let (quorum, base) = self.epoch_quorum(ts)?;
                        let prepared = tally
                            .prepares
                            .get(&digest)
                            .map_or(0, |v| v.iter().filter(|p| base.contains(*p)).count());
                        if !tally.voted_commit && prepared >= quorum {
                            tally.txs.get(&digest).map(|tx| (*ts, *tx))
                        } else {
                            None
                        }
                    });
                if let Some((ts, tx)) = vote {
                    let tally = self.tallies.get_mut(&(prev, ts)).expect("scanned key");
                    tally.voted_commit = true;
                    tally.commits.entry(digest).or_default().insert(self.id);
                    let env = self.envelope(AppPayload::Commit { tx, ts, prev });
                    out.outbound.push(AppOutbound::Broadcast(env));
                    continue;
                }
            }

            // Apply: some round extending our position has a commit quorum
            // and our membership feed has reached its epoch.
            let ready = self
                .tallies
                .range((self.now, AppTimestamp::default())..)
                .take_while(|((prev, _), _)| *prev == self.now)
                .filter(|((_, ts), _)| ts.ca <= view.ca_now)
                .find_map(|((_, ts), tally)| {
                    let (quorum, base) = self.epoch_quorum(ts)?;
                    tally
                        .commits
                        .iter()
                        .find(|(_, votes)| {
                            votes.iter().filter(|p| base.contains(*p)).count() >= quorum
                        })
                        .and_then(|(d, _)| tally.txs.get(d).copied())
                        .map(|tx| (*ts, tx))
                });
            let Some((ts, tx)) = ready else {
                break;
            };
            self.mint_rewards_to(ts.ca.ell);
            let digest = tx.digest();
            if !self.committed(&digest) && self.ledger.validate_tx(&tx).is_ok() {
                self.ledger.apply_tx(&tx);
                let entry = AppLogEntry { tx, ts };
                self.log.push(entry.clone());
                out.applied.push(entry);
            }
            self.now = ts;
            if self.proposing.map_or(false, |(_, pts)| pts <= ts) {
                self.proposing = None;
            }
            self.prune();
            self.maybe_open_round(view, out);
        }
    }

    fn prune(&mut self) {
        let now = self.now;
        self.tallies.retain(|(prev, _), _| *prev >= now);
        self.locks.retain(|prev, _| *prev >= now);
        let keep_from = now.ca.ell;
        self.epoch_voters.retain(|h, _| *h >= keep_from);
    }

    /// Housekeeping after the membership state moved: abandon a round
    /// orphaned by an epoch bump (its transaction goes back to the head of
    /// the queue; replicas that committed it recognize the digest and skip
    /// reapplying), hand any backlog to the current primary, and fire
    /// whatever became executable.
    pub fn drain(&mut self, view: &MembershipView) -> AppStepOutput {
        let mut out = AppStepOutput::default();
        if let Some((prev, ts)) = self.proposing {
            // Orphaned if the epoch moved past the round's annotation or
            // our position moved past its anchor.
            if ts.ca < view.ca_now || prev < self.now {
                self.proposing = None;
                let orphan = self
                    .tallies
                    .get(&(prev, ts))
                    .and_then(|t| t.txs.values().next().copied());
                if let Some(tx) = orphan {
                    let digest = tx.digest();
                    if !self.committed(&digest) && !self.queued.contains(&digest) {
                        self.queued.insert(digest);
                        self.queue.push_front(tx);
                    }
                }
            }
        }
        // Leadership moved elsewhere: hand the backlog over, in order.
        if view.primary != Some(self.id) && view.primary.is_some() {
            while let Some(tx) = self.queue.pop_front() {
                self.queued.remove(&tx.digest());
                let env = self.envelope(AppPayload::Submit { tx });
                out.outbound
                    .push(AppOutbound::To(view.primary.expect("checked"), env));
            }
        }
        self.try_advance(view, &mut out);
        self.maybe_open_round(view, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::gen_identity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn accounts(n: usize, seed: u64) -> Vec<Identity> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n).map(|_| gen_identity(&mut rng)).collect()
    }

    fn ledger_with(accounts: &[(AccountId, i64)]) -> Ledger {
        Ledger::bootstrap_balances(&accounts.iter().copied().collect()).unwrap()
    }

    #[test]
    fn validate_respects_balance_and_signature() {
        let ids = accounts(2, 70);
        let (a, b) = (ids[0].peer_id(), ids[1].peer_id());
        let ledger = ledger_with(&[(a, 10)]);

        let ok = Transaction::signed(&ids[0], b, 4, 1);
        assert!(ledger.validate_tx(&ok).is_ok());

        let broke = Transaction::signed(&ids[0], b, 11, 1);
        assert!(matches!(
            ledger.validate_tx(&broke),
            Err(TxError::InsufficientBalance { have: 10, need: 11 })
        ));

        // signed by the wrong key
        let forged = Transaction {
            sig: ids[1].sign(&Transaction::signing_bytes(&a, &b, 4, 1)),
            ..ok
        };
        assert_eq!(ledger.validate_tx(&forged), Err(TxError::BadSignature));

        // unknown source account = zero balance
        let ghost = Transaction::signed(&ids[1], a, 1, 1);
        assert!(matches!(
            ledger.validate_tx(&ghost),
            Err(TxError::InsufficientBalance { have: 0, .. })
        ));
    }

    #[test]
    fn apply_moves_value() {
        let ids = accounts(2, 71);
        let (a, b) = (ids[0].peer_id(), ids[1].peer_id());
        let mut ledger = ledger_with(&[(a, 10)]);
        let tx = Transaction::signed(&ids[0], b, 4, 1);
        ledger.apply_tx(&tx);
        assert_eq!(ledger.balance(&a), 6);
        assert_eq!(ledger.balance(&b), 4);
        assert!(ledger.conserved());
    }

    #[test]
    fn self_transfer_is_net_zero() {
        let ids = accounts(1, 72);
        let a = ids[0].peer_id();
        let mut ledger = ledger_with(&[(a, 10)]);
        let tx = Transaction::signed(&ids[0], a, 3, 1);
        ledger.apply_tx(&tx);
        assert_eq!(ledger.balance(&a), 10);
        assert!(ledger.conserved());
    }

    #[test]
    fn second_overdraft_fails_after_first_applies() {
        let ids = accounts(3, 73);
        let (a, b, c) = (ids[0].peer_id(), ids[1].peer_id(), ids[2].peer_id());
        let mut ledger = ledger_with(&[(a, 10)]);
        let tx1 = Transaction::signed(&ids[0], b, 7, 1);
        let tx2 = Transaction::signed(&ids[0], c, 7, 2);
        assert!(ledger.validate_tx(&tx1).is_ok());
        ledger.apply_tx(&tx1);
        assert!(matches!(
            ledger.validate_tx(&tx2),
            Err(TxError::InsufficientBalance { have: 3, need: 7 })
        ));
    }

    #[test]
    fn replayed_transaction_is_rejected_by_sequence() {
        let ids = accounts(2, 74);
        let (_, b) = (ids[0].peer_id(), ids[1].peer_id());
        let mut ledger = ledger_with(&[(ids[0].peer_id(), 10)]);
        let tx = Transaction::signed(&ids[0], b, 2, 1);
        ledger.apply_tx(&tx);
        assert!(matches!(
            ledger.validate_tx(&tx),
            Err(TxError::BadSequence { got: 1, expected: 2 })
        ));
    }

    #[test]
    fn reward_examples() {
        let ids = accounts(5, 75);
        let voters: BTreeSet<PeerId> = ids.iter().map(|i| i.peer_id()).collect();
        let finder = ids[0].peer_id();

        // exact division
        let mut ledger = ledger_with(&[]);
        ledger.distribute_reward(&voters, 50, &finder);
        for v in &voters {
            assert_eq!(ledger.balance(v), 10);
        }
        assert_eq!(ledger.minted(), 50);
        assert!(ledger.conserved());

        // remainder to the finder
        let three: BTreeSet<PeerId> = ids.iter().take(3).map(|i| i.peer_id()).collect();
        let mut ledger = ledger_with(&[]);
        ledger.distribute_reward(&three, 10, &finder);
        assert_eq!(ledger.balance(&finder), 3 + 1);
        assert_eq!(ledger.minted(), 10);
        assert!(ledger.conserved());

        // zero reward is a no-op
        let mut ledger = ledger_with(&[]);
        ledger.distribute_reward(&three, 0, &finder);
        assert_eq!(ledger.total(), 0);
    }

    #[test]
    fn bootstrap_rejects_negative_and_conserves() {
        let ids = accounts(2, 76);
        let (a, b) = (ids[0].peer_id(), ids[1].peer_id());
        assert!(Ledger::bootstrap_balances(&[(a, -1)].into_iter().collect()).is_err());

        let ledger = ledger_with(&[(a, 5), (b, 7)]);
        assert_eq!(ledger.total(), 12);
        assert_eq!(ledger.snapshot_total(), 12);
        assert!(ledger.conserved());
        assert!(ledger_with(&[]).export_sorted().is_empty());
    }

    #[test]
    fn app_timestamp_orders_lexicographically() {
        let t1 = AppTimestamp::new(LogicalTimestamp::new(3, 0, 2), 5);
        let t2 = AppTimestamp::new(LogicalTimestamp::new(3, 0, 3), 6);
        assert!(t1 < t2);
        // operation numbers run through epoch changes; the membership
        // annotation only moves forward
        assert!(t2.is_successor_of(&t1));
        let skip = AppTimestamp::new(LogicalTimestamp::new(4, 0, 0), 8);
        assert!(!skip.is_successor_of(&t1));
        let rewind = AppTimestamp::new(LogicalTimestamp::new(2, 0, 0), 6);
        assert!(!rewind.is_successor_of(&t1));
        assert!(!t1.is_successor_of(&t1));
    }
}
