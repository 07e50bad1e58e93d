//! Blocks, the agreed chain, the block tree, peer rank, and the miner's
//! protocol loop.
//!
//! A block seals one peer identity under proof of work. Its canonical
//! encoding — the bytes hashed to produce the block digest — is the
//! length-prefixed concatenation, in order, of: parent digest (32 bytes),
//! difficulty (4 bytes big-endian), peer ID (32 bytes), nonce (8 bytes
//! big-endian). The PoW challenge for a block is `parent digest || peer ID`,
//! also length-prefixed, so a solution binds both the position in the tree
//! and the identity being admitted.

use crate::enc;
use crate::identity::{sha256, Digest, PeerId};
use crate::pow::{pow_check, Nonce};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Block {
    pub parent: Digest,
    pub difficulty: u32,
    pub peer: PeerId,
    pub nonce: Nonce,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChainError {
    #[error("block at height {0} is not legal")]
    IllegalBlock(usize),
    #[error("peer appears twice (heights {0} and {1})")]
    DuplicatePeer(usize, usize),
    #[error("chain io: {0}")]
    Io(String),
}

impl Block {
    /// Canonical byte encoding; see the module docs for the exact layout.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(96);
        enc::put_bytes(&mut out, &self.parent.0);
        enc::put_u32(&mut out, self.difficulty);
        enc::put_bytes(&mut out, &self.peer.0);
        enc::put_bytes(&mut out, &self.nonce.0.to_be_bytes());
        out
    }

    pub fn hash(&self) -> Digest {
        sha256(&self.encode())
    }

    /// The PoW challenge a miner solves to extend `parent` with `peer`.
    pub fn pow_challenge(parent: &Digest, peer: &PeerId) -> Vec<u8> {
        let mut out = Vec::with_capacity(72);
        enc::put_bytes(&mut out, &parent.0);
        enc::put_bytes(&mut out, &peer.0);
        out
    }
}

/// The fixed genesis block: all-zero parent, a reserved identity that never
/// votes, zero nonce. Only the difficulty is a deployment parameter.
pub fn genesis(difficulty: u32) -> Block {
    Block {
        parent: Digest::ZERO,
        difficulty,
        peer: PeerId::GENESIS,
        nonce: Nonce(0),
    }
}

/// True iff `b` is a legal child of `parent`: correct parent digest and a
/// valid proof of work over (parent digest, peer).
pub fn is_legal_block(parent: &Block, b: &Block) -> bool {
    b.parent == parent.hash()
        && pow_check(
            b.difficulty,
            &Block::pow_challenge(&b.parent, &b.peer),
            b.nonce,
        )
}

/// The agreed chain: genesis plus blocks at heights 1..=len.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    genesis: Block,
    blocks: Vec<Block>,
}

impl Chain {
    pub fn new(genesis: Block) -> Self {
        Chain {
            genesis,
            blocks: Vec::new(),
        }
    }

    pub fn genesis(&self) -> &Block {
        &self.genesis
    }

    /// Number of non-genesis blocks.
    pub fn len(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// The newest block (genesis when no block has been appended yet).
    pub fn head(&self) -> &Block {
        self.blocks.last().unwrap_or(&self.genesis)
    }

    /// Block at height 1..=len.
    pub fn at_height(&self, height: u64) -> Option<&Block> {
        if height == 0 {
            return None;
        }
        self.blocks.get(height as usize - 1)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Append after checking legality and peer uniqueness.
    pub fn push(&mut self, b: Block) -> Result<(), ChainError> {
        if !is_legal_block(self.head(), &b) {
            return Err(ChainError::IllegalBlock(self.blocks.len() + 1));
        }
        if let Some(i) = self.blocks.iter().position(|x| x.peer == b.peer) {
            return Err(ChainError::DuplicatePeer(i + 1, self.blocks.len() + 1));
        }
        self.blocks.push(b);
        Ok(())
    }

    /// Full re-validation: every block legal w.r.t. its predecessor and no
    /// peer sealed twice.
    pub fn validate(&self) -> Result<(), ChainError> {
        let mut seen: BTreeMap<PeerId, usize> = BTreeMap::new();
        let mut prev = &self.genesis;
        for (i, b) in self.blocks.iter().enumerate() {
            if !is_legal_block(prev, b) {
                return Err(ChainError::IllegalBlock(i + 1));
            }
            if let Some(&first) = seen.get(&b.peer) {
                return Err(ChainError::DuplicatePeer(first, i + 1));
            }
            seen.insert(b.peer, i + 1);
            prev = b;
        }
        Ok(())
    }

    /// Rank of `p`: chain length minus the height of the block sealing `p`.
    /// The newest block's finder has rank 0. `None` for peers not in the
    /// chain (including the genesis identity).
    pub fn rank(&self, p: &PeerId) -> Option<u64> {
        let i = self.blocks.iter().position(|b| b.peer == *p)? as u64 + 1;
        Some(self.len() - i)
    }

    /// The peer with the given rank.
    pub fn peer_with_rank(&self, rank: u64) -> Option<PeerId> {
        if rank >= self.len() {
            return None;
        }
        let height = self.len() - rank;
        self.at_height(height).map(|b| b.peer)
    }

    /// All peers sealed into the chain (the voter pool V).
    pub fn voters(&self) -> BTreeSet<PeerId> {
        self.blocks.iter().map(|b| b.peer).collect()
    }

    pub fn contains_peer(&self, p: &PeerId) -> bool {
        self.blocks.iter().any(|b| b.peer == *p)
    }

    /// Truncate to the prefix of the given length (used by bootstrap).
    pub fn truncated(&self, len: u64) -> Chain {
        Chain {
            genesis: self.genesis,
            blocks: self.blocks[..len as usize].to_vec(),
        }
    }

    /// True iff `self` is a prefix of `other` (same genesis, block-for-block).
    pub fn is_prefix_of(&self, other: &Chain) -> bool {
        self.genesis == other.genesis
            && self.blocks.len() <= other.blocks.len()
            && self.blocks[..] == other.blocks[..self.blocks.len()]
    }

    /// Dump as line-delimited records, one block per line (genesis first),
    /// hex-encoded fields.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<(), ChainError> {
        let io = |e: std::io::Error| ChainError::Io(e.to_string());
        let ser = |e: serde_json::Error| ChainError::Io(e.to_string());
        for b in std::iter::once(&self.genesis).chain(self.blocks.iter()) {
            let line = serde_json::to_string(b).map_err(ser)?;
            writeln!(w, "{line}").map_err(io)?;
        }
        Ok(())
    }

    /// Load a chain dumped by [`Chain::dump`] and re-validate it.
    pub fn load<R: BufRead>(r: R) -> Result<Chain, ChainError> {
        let mut blocks = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| ChainError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let b: Block =
                serde_json::from_str(&line).map_err(|e| ChainError::Io(e.to_string()))?;
            blocks.push(b);
        }
        if blocks.is_empty() {
            return Err(ChainError::Io("empty chain file".into()));
        }
        let mut chain = Chain::new(blocks.remove(0));
        for b in blocks {
            chain.push(b)?;
        }
        Ok(chain)
    }
}

/// All legal blocks seen so far, indexed by digest, with a parent-to-children
/// index. Forms a tree rooted at genesis; competing children of one parent
/// are forks awaiting resolution by the agreement layer.
#[derive(Clone, Debug, Default)]
pub struct BlockTree {
    nodes: BTreeMap<Digest, Block>,
    children: BTreeMap<Digest, Vec<Digest>>,
}

impl BlockTree {
    pub fn with_genesis(genesis: Block) -> Self {
        let mut t = BlockTree::default();
        t.nodes.insert(genesis.hash(), genesis);
        t
    }

    /// Insert a block whose parent is already known and which is legal with
    /// respect to it. Returns false (and ignores the block) otherwise.
    pub fn insert(&mut self, b: Block) -> bool {
        let Some(parent) = self.nodes.get(&b.parent) else {
            return false;
        };
        if !is_legal_block(parent, &b) {
            return false;
        }
        let digest = b.hash();
        if self.nodes.contains_key(&digest) {
            return true;
        }
        self.children.entry(b.parent).or_default().push(digest);
        self.nodes.insert(digest, b);
        true
    }

    pub fn get(&self, digest: &Digest) -> Option<&Block> {
        self.nodes.get(digest)
    }

    pub fn children_of(&self, digest: &Digest) -> &[Digest] {
        self.children.get(digest).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Run the actual nonce search to build a legal child of `parent` sealing
/// `peer`. Returns `None` if the attempt budget is exhausted.
pub fn mine_block_on(
    parent: &Block,
    peer: PeerId,
    difficulty: u32,
    max_attempts: u64,
    rng: &mut impl rand::RngCore,
) -> Option<Block> {
    let parent_digest = parent.hash();
    let challenge = Block::pow_challenge(&parent_digest, &peer);
    let nonce = crate::pow::pow_solve(difficulty, &challenge, max_attempts, rng)?;
    Some(Block {
        parent: parent_digest,
        difficulty,
        peer,
        nonce,
    })
}

/// Events driving one peer's mining loop.
#[derive(Clone, Debug)]
pub enum MinerEvent {
    /// Begin (or restart) mining on the newest block of the current chain.
    Start,
    /// The local solver produced a candidate block.
    Found(Block),
    /// The agreement layer committed `block`, yielding `chain`.
    Committed { block: Block, chain: Chain },
}

/// Actions the mining loop asks its host to perform.
#[derive(Clone, Debug, PartialEq)]
pub enum MinerAction {
    /// Point the solver at this parent.
    BeginMining { parent: Block },
    /// Hand a candidate block to the agreement layer.
    ProposeBlock(Block),
}

/// One peer's mining state: the chain it believes in, the parent it is
/// mining on, and its in-flight proposal, if any.
#[derive(Clone, Debug)]
pub struct MinerState {
    chain: Chain,
    mining_on: Option<Digest>,
    proposed: Option<Block>,
}

impl MinerState {
    pub fn new(chain: Chain) -> Self {
        MinerState {
            chain,
            mining_on: None,
            proposed: None,
        }
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn proposed(&self) -> Option<&Block> {
        self.proposed.as_ref()
    }
}

/// The mining protocol step: a pure `(state, event) -> (state, actions)`
/// transition.
///
/// `Start` targets the newest block. `Found` proposes the solution unless the
/// chain advanced since mining began, in which case the stale solution is
/// dropped — the agreement layer would reject it anyway, since it no longer
/// extends the head. `Committed` stops mining, adopts the new chain, and
/// restarts only when someone else's block won.
pub fn miner_step(mut state: MinerState, event: MinerEvent) -> (MinerState, Vec<MinerAction>) {
    let mut actions = Vec::new();
    match event {
        MinerEvent::Start => {
            let parent = *state.chain.head();
            state.mining_on = Some(parent.hash());
            actions.push(MinerAction::BeginMining { parent });
        }
        MinerEvent::Found(b) => {
            if state.mining_on == Some(b.parent) {
                state.proposed = Some(b);
                actions.push(MinerAction::ProposeBlock(b));
            }
            // else: stale solution, discard silently
        }
        MinerEvent::Committed { block, chain } => {
            state.mining_on = None;
            state.chain = chain;
            let ours = state.proposed.map(|p| p.hash()) == Some(block.hash());
            state.proposed = None;
            if !ours {
                let parent = *state.chain.head();
                state.mining_on = Some(parent.hash());
                actions.push(MinerAction::BeginMining { parent });
            }
        }
    }
    (state, actions)
}
