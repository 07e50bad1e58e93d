//! The replicated membership layer: logical timestamps, the shared state
//! (operation log, online voter set, chain), operation validation and commit
//! semantics, quorum arithmetic, and log replay for joining peers.
//!
//! The replica state machine that drives the pre-prepare/prepare/commit
//! phases and view changes lives in [`replica`].

pub mod replica;

use crate::block::{is_legal_block, Chain, ChainError};
use crate::enc;
use crate::identity::{self, sha256, Digest, PeerId, Sig};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use thiserror::Error;

pub use replica::{Outbound, Replica, ReplicaConfig, StepOutput};

/// Logical time: (chain length, view, sequence), ordered lexicographically.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize, Default,
)]
pub struct LogicalTimestamp {
    pub ell: u64,
    pub view: u64,
    pub seq: u64,
}

impl LogicalTimestamp {
    pub fn new(ell: u64, view: u64, seq: u64) -> Self {
        LogicalTimestamp { ell, view, seq }
    }

    /// True iff `self` is a timestamp at which the next operation may commit
    /// when the state is at `now`: the next sequence number in the same
    /// view, or the first sequence number of a later view of the same epoch.
    pub fn is_successor_of(&self, now: &LogicalTimestamp) -> bool {
        self.ell == now.ell
            && ((self.view == now.view && self.seq == now.seq + 1)
                || (self.view > now.view && self.seq == 1))
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        enc::put_u64(out, self.ell);
        enc::put_u64(out, self.view);
        enc::put_u64(out, self.seq);
    }
}

/// The three operations that mutate the shared state.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum CaOperation {
    /// Append a block, promoting its peer to voting.
    Block(crate::block::Block),
    /// A previously offline voter rejoins the online set.
    Join(PeerId),
    /// Remove an unresponsive voter from the online set.
    Leave(PeerId),
}

impl CaOperation {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            CaOperation::Block(b) => {
                enc::put_tag(&mut out, 1);
                enc::put_bytes(&mut out, &b.encode());
            }
            CaOperation::Join(p) => {
                enc::put_tag(&mut out, 2);
                enc::put_bytes(&mut out, &p.0);
            }
            CaOperation::Leave(p) => {
                enc::put_tag(&mut out, 3);
                enc::put_bytes(&mut out, &p.0);
            }
        }
        out
    }

    pub fn digest(&self) -> Digest {
        sha256(&self.encode())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CaOperation::Block(_) => "block",
            CaOperation::Join(_) => "join",
            CaOperation::Leave(_) => "leave",
        }
    }
}

/// A committed operation with its timestamp and the quorum of commit
/// signatures that certified it. Entries are self-certifying: anyone who
/// knows the voter set in force when the entry committed can check it.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LogEntry {
    pub op: CaOperation,
    pub ts: LogicalTimestamp,
    pub commits: BTreeMap<PeerId, Sig>,
}

/// The replicated state: operation log O, online voters I, chain C, and the
/// current logical timestamp.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedState {
    pub log: Vec<LogEntry>,
    pub online_voters: BTreeSet<PeerId>,
    pub chain: Chain,
    pub now: LogicalTimestamp,
}

impl SharedState {
    /// State with no committed operations on top of the given chain prefix
    /// and initial online voter set (the bootstrap output).
    pub fn initial(chain: Chain, online_voters: BTreeSet<PeerId>) -> Self {
        let now = LogicalTimestamp::new(chain.len(), 0, 0);
        SharedState {
            log: Vec::new(),
            online_voters,
            chain,
            now,
        }
    }

    /// Digest of a committed operation, if present in the log.
    pub fn committed(&self, digest: &Digest) -> bool {
        self.log.iter().any(|e| e.op.digest() == *digest)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CaError {
    #[error("chain must be nonempty to select a primary")]
    EmptyChain,
    #[error("timestamp {got:?} is not the successor of {now:?}")]
    NotSuccessor {
        got: LogicalTimestamp,
        now: LogicalTimestamp,
    },
    #[error("operation failed validation at commit: {0}")]
    InvalidAtCommit(&'static str),
    #[error("chain error: {0}")]
    Chain(#[from] ChainError),
    #[error("commit certificate below quorum at {ts:?}: {valid} of {needed}")]
    BadCommitCert {
        ts: LogicalTimestamp,
        valid: usize,
        needed: usize,
    },
    #[error("log io: {0}")]
    Io(String),
}

/// Answers "does this peer currently respond to a ping?". The simulator
/// backs this with the live network state; validation of join and leave
/// operations consults it as the bounded-wait ping the protocol requires.
pub trait PingOracle {
    fn responds(&self, p: &PeerId) -> bool;
}

impl<F: Fn(&PeerId) -> bool> PingOracle for F {
    fn responds(&self, p: &PeerId) -> bool {
        self(p)
    }
}

/// PBFT quorum: 2f+1 with f = floor((n-1)/3) dishonest members tolerated
/// among n online voters.
pub fn quorum_size(n: usize) -> usize {
    assert!(n >= 1, "quorum undefined for an empty voter set");
    let f = (n - 1) / 3;
    2 * f + 1
}

/// The primary for view `v`: the unique peer whose rank equals `v` modulo
/// the chain length. With v = 0 that is the newest block's finder; each view
/// change falls back to the next-older finder.
pub fn current_primary(chain: &Chain, view: u64) -> Result<PeerId, CaError> {
    if chain.is_empty() {
        return Err(CaError::EmptyChain);
    }
    let rank = view % chain.len();
    Ok(chain
        .peer_with_rank(rank)
        .expect("rank < len always resolves"))
}

/// Validate an operation against the shared state.
///
/// Block(b): b must be a legal child of the chain head, sealing a peer not
/// already in the chain. Join(p): p must be a chain voter, not already
/// online, and answering pings. Leave(p): p must be online and unresponsive
/// (so online peers cannot be evicted maliciously).
pub fn validate(op: &CaOperation, state: &SharedState, net: &dyn PingOracle) -> bool {
    match op {
        CaOperation::Block(b) => {
            is_legal_block(state.chain.head(), b) && !state.chain.contains_peer(&b.peer)
        }
        CaOperation::Join(p) => {
            state.chain.contains_peer(p) && !state.online_voters.contains(p) && net.responds(p)
        }
        CaOperation::Leave(p) => state.online_voters.contains(p) && !net.responds(p),
    }
}

/// Apply a committed entry: append it to the log and mutate the state per
/// the operation's kind. The entry's timestamp must be the immediate
/// successor of `state.now`; commits arriving out of order are the caller's
/// problem (replicas buffer them).
pub fn apply_commit(state: &mut SharedState, entry: LogEntry) -> Result<(), CaError> {
    if !entry.ts.is_successor_of(&state.now) {
        return Err(CaError::NotSuccessor {
            got: entry.ts,
            now: state.now,
        });
    }
    match &entry.op {
        CaOperation::Block(b) => {
            state.chain.push(*b)?;
            state.online_voters.insert(b.peer);
            state.now = LogicalTimestamp::new(state.chain.len(), 0, 0);
        }
        CaOperation::Join(p) => {
            state.online_voters.insert(*p);
            state.now = entry.ts;
        }
        CaOperation::Leave(p) => {
            if !state.online_voters.remove(p) {
                return Err(CaError::InvalidAtCommit("leave of peer not in I"));
            }
            state.now = entry.ts;
        }
    }
    state.log.push(entry);
    Ok(())
}

/// Bytes a replica signs when committing `digest` at `ts`. The commit
/// certificates stored in the log are signatures over exactly these bytes.
pub fn commit_signing_bytes(digest: &Digest, ts: &LogicalTimestamp) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    enc::put_tag(&mut out, b'C');
    enc::put_bytes(&mut out, &digest.0);
    ts.encode_into(&mut out);
    out
}

/// Check one entry's commit certificate against the voter set in force
/// before the entry applied.
pub fn verify_commit_cert(state: &SharedState, entry: &LogEntry) -> Result<(), CaError> {
    let needed = quorum_size(state.online_voters.len());
    let bytes = commit_signing_bytes(&entry.op.digest(), &entry.ts);
    let valid = entry
        .commits
        .iter()
        .filter(|(signer, sig)| {
            state.online_voters.contains(*signer) && identity::verify(signer, &bytes, sig)
        })
        .count();
    if valid >= needed {
        Ok(())
    } else {
        Err(CaError::BadCommitCert {
            ts: entry.ts,
            valid,
            needed,
        })
    }
}

/// Reconstruct the shared state by replaying a log from the initial state,
/// verifying every entry's commit certificate against the voter set as of
/// that entry. This is how a peer with nothing but the deployment's initial
/// state catches up without trusting whoever sent the log.
pub fn sync_new_peer(initial: &SharedState, entries: &[LogEntry]) -> Result<SharedState, CaError> {
    let mut state = initial.clone();
    for entry in entries {
        verify_commit_cert(&state, entry)?;
        apply_commit(&mut state, entry.clone())?;
    }
    Ok(state)
}

/// Export a log as line-delimited records (op kind, timestamp triple,
/// signer set), one entry per line.
pub fn export_log<W: Write>(entries: &[LogEntry], mut w: W) -> Result<(), CaError> {
    for e in entries {
        let line = serde_json::to_string(e).map_err(|e| CaError::Io(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CaError::Io(e.to_string()))?;
    }
    Ok(())
}

/// Load a log exported by [`export_log`]. Certificates are *not* checked
/// here; feed the result to [`sync_new_peer`] for that.
pub fn import_log<R: BufRead>(r: R) -> Result<Vec<LogEntry>, CaError> {
    let mut entries = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| CaError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| CaError::Io(e.to_string()))?);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{genesis, mine_block_on, Block};
    use crate::identity::gen_identity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn chain_with(n: usize, seed: u64) -> (Chain, Vec<crate::identity::Identity>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut chain = Chain::new(genesis(4));
        let mut ids = Vec::new();
        for _ in 0..n {
            let id = gen_identity(&mut rng);
            let b = mine_block_on(chain.head(), id.peer_id(), 4, 1 << 24, &mut rng).unwrap();
            chain.push(b).unwrap();
            ids.push(id);
        }
        (chain, ids)
    }

    fn ts(ell: u64, view: u64, seq: u64) -> LogicalTimestamp {
        LogicalTimestamp::new(ell, view, seq)
    }

    #[test]
    fn timestamp_order_is_lexicographic() {
        assert!(ts(2, 0, 5) < ts(3, 0, 0));
        assert!(ts(3, 0, 9) < ts(3, 1, 0));
        assert!(!(ts(3, 1, 2) < ts(3, 1, 2)));
    }

    #[test]
    fn successor_rules() {
        let now = ts(3, 0, 4);
        assert!(ts(3, 0, 5).is_successor_of(&now));
        assert!(ts(3, 1, 1).is_successor_of(&now)); // first slot of a later view
        assert!(!ts(3, 0, 6).is_successor_of(&now));
        assert!(!ts(3, 1, 2).is_successor_of(&now));
        assert!(!ts(4, 0, 1).is_successor_of(&now)); // epochs advance via block commits only
    }

    #[test]
    fn primary_rotates_by_rank() {
        let (chain, ids) = chain_with(5, 40);
        // view 0: newest block finder; view 1: the one before it.
        assert_eq!(current_primary(&chain, 0).unwrap(), ids[4].peer_id());
        assert_eq!(current_primary(&chain, 1).unwrap(), ids[3].peer_id());
        // wraps modulo the chain length
        assert_eq!(current_primary(&chain, 5).unwrap(), ids[4].peer_id());
        let empty = Chain::new(genesis(4));
        assert_eq!(current_primary(&empty, 0), Err(CaError::EmptyChain));
    }

    #[test]
    fn quorum_arithmetic() {
        assert_eq!(quorum_size(1), 1);
        assert_eq!(quorum_size(4), 3);
        assert_eq!(quorum_size(10), 7);
    }

    #[test]
    fn validate_block_requires_current_head() {
        let (chain, _) = chain_with(3, 41);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let state = SharedState::initial(chain.clone(), chain.voters());
        let net = |_: &PeerId| true;

        let fresh = gen_identity(&mut rng).peer_id();
        let good = mine_block_on(chain.head(), fresh, 4, 1 << 24, &mut rng).unwrap();
        assert!(validate(&CaOperation::Block(good), &state, &net));

        // extends a stale head (the parent of the head)
        let stale_parent = chain.at_height(chain.len() - 1).unwrap();
        let stale =
            mine_block_on(stale_parent, gen_identity(&mut rng).peer_id(), 4, 1 << 24, &mut rng)
                .unwrap();
        assert!(!validate(&CaOperation::Block(stale), &state, &net));
    }

    #[test]
    fn validate_join_and_leave() {
        let (chain, ids) = chain_with(3, 43);
        let voters: BTreeSet<PeerId> = [ids[0].peer_id(), ids[1].peer_id()].into();
        let state = SharedState::initial(chain, voters);
        let offline_voter = ids[2].peer_id(); // in chain, not in I

        let responds = |p: &PeerId| *p == offline_voter || *p == ids[0].peer_id();

        // join: must be a chain voter, not in I, and responsive
        assert!(validate(&CaOperation::Join(offline_voter), &state, &responds));
        assert!(!validate(&CaOperation::Join(ids[0].peer_id()), &state, &responds)); // already in I
        let stranger = gen_identity(&mut ChaCha12Rng::seed_from_u64(44)).peer_id();
        assert!(!validate(&CaOperation::Join(stranger), &state, &responds)); // not in V

        // leave: must be in I and unresponsive
        assert!(validate(&CaOperation::Leave(ids[1].peer_id()), &state, &responds));
        assert!(!validate(&CaOperation::Leave(ids[0].peer_id()), &state, &responds)); // responsive
        assert!(!validate(&CaOperation::Leave(offline_voter), &state, &responds)); // not in I
    }

    fn entry(op: CaOperation, ts: LogicalTimestamp) -> LogEntry {
        LogEntry {
            op,
            ts,
            commits: BTreeMap::new(),
        }
    }

    #[test]
    fn block_commit_resets_timestamp_and_promotes_finder() {
        let (chain, _) = chain_with(7, 45);
        let mut rng = ChaCha12Rng::seed_from_u64(46);
        let mut state = SharedState::initial(chain.clone(), chain.voters());
        let fresh = gen_identity(&mut rng).peer_id();
        let b = mine_block_on(chain.head(), fresh, 4, 1 << 24, &mut rng).unwrap();
        apply_commit(&mut state, entry(CaOperation::Block(b), ts(7, 0, 1))).unwrap();
        assert_eq!(state.now, ts(8, 0, 0));
        assert!(state.online_voters.contains(&fresh));
        assert_eq!(state.chain.len(), 8);
    }

    #[test]
    fn join_then_leave_is_net_zero_on_voters() {
        let (chain, ids) = chain_with(3, 47);
        let voters: BTreeSet<PeerId> = [ids[0].peer_id(), ids[1].peer_id()].into();
        let mut state = SharedState::initial(chain, voters.clone());
        let p = ids[2].peer_id();
        apply_commit(&mut state, entry(CaOperation::Join(p), ts(3, 0, 1))).unwrap();
        apply_commit(&mut state, entry(CaOperation::Leave(p), ts(3, 0, 2))).unwrap();
        assert_eq!(state.online_voters, voters);
        assert_eq!(state.log.len(), 2);
        assert_eq!(state.now, ts(3, 0, 2));
    }

    #[test]
    fn commit_rejects_non_successor_timestamps() {
        let (chain, ids) = chain_with(3, 48);
        let mut state = SharedState::initial(chain, BTreeSet::new());
        let e = entry(CaOperation::Join(ids[0].peer_id()), ts(3, 0, 2));
        assert!(matches!(
            apply_commit(&mut state, e),
            Err(CaError::NotSuccessor { .. })
        ));
    }

    #[test]
    fn sync_replays_and_rejects_forged_certs() {
        let (chain, ids) = chain_with(4, 49);
        let voters: BTreeSet<PeerId> = ids.iter().take(3).map(|i| i.peer_id()).collect();
        let initial = SharedState::initial(chain, voters.clone());

        // Build a legitimate entry: Join of ids[3], certified by all three.
        let op = CaOperation::Join(ids[3].peer_id());
        let t = ts(4, 0, 1);
        let bytes = commit_signing_bytes(&op.digest(), &t);
        let commits: BTreeMap<PeerId, Sig> = ids
            .iter()
            .take(3)
            .map(|i| (i.peer_id(), i.sign(&bytes)))
            .collect();
        let good = LogEntry {
            op: op.clone(),
            ts: t,
            commits,
        };

        let synced = sync_new_peer(&initial, &[good.clone()]).unwrap();
        assert!(synced.online_voters.contains(&ids[3].peer_id()));

        // Forged: signatures by keys outside I.
        let mut rng = ChaCha12Rng::seed_from_u64(50);
        let outsiders: Vec<_> = (0..3).map(|_| gen_identity(&mut rng)).collect();
        let forged_commits: BTreeMap<PeerId, Sig> = outsiders
            .iter()
            .map(|i| (i.peer_id(), i.sign(&bytes)))
            .collect();
        let forged = LogEntry {
            op,
            ts: t,
            commits: forged_commits,
        };
        assert!(matches!(
            sync_new_peer(&initial, &[forged]),
            Err(CaError::BadCommitCert { .. })
        ));

        // Empty log reproduces the initial state.
        assert_eq!(sync_new_peer(&initial, &[]).unwrap(), initial);

        // Round trip through the line-delimited format.
        let mut buf = Vec::new();
        export_log(&[good.clone()], &mut buf).unwrap();
        let back = import_log(buf.as_slice()).unwrap();
        assert_eq!(back, vec![good]);
    }

    #[test]
    fn operation_digests_are_stable_per_kind() {
        let p = gen_identity(&mut ChaCha12Rng::seed_from_u64(51)).peer_id();
        assert_ne!(
            CaOperation::Join(p).digest(),
            CaOperation::Leave(p).digest()
        );
        assert_eq!(CaOperation::Join(p).digest(), CaOperation::Join(p).digest());
    }

    #[test]
    fn validate_block_rejects_duplicate_peer() {
        let (chain, ids) = chain_with(3, 52);
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        let state = SharedState::initial(chain.clone(), chain.voters());
        let net = |_: &PeerId| true;
        let dup: Block =
            mine_block_on(chain.head(), ids[0].peer_id(), 4, 1 << 24, &mut rng).unwrap();
        assert!(!validate(&CaOperation::Block(dup), &state, &net));
    }
}
