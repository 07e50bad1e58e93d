//! Synthetic pre-chain construction for bootstrap scenarios: a fully legal
//! proof-of-work chain whose block finders are attributed to the attacker
//! or the defenders according to configured shares.

use crate::block::{genesis, mine_block_on, Chain};
use crate::identity::{gen_identity, Identity, PeerId};
use rand::seq::SliceRandom;
use rand::RngCore;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Owner {
    Attacker,
    Defender,
}

pub struct SynthChain {
    pub chain: Chain,
    /// Identity keys of every block finder, in height order.
    pub identities: Vec<Identity>,
    pub owners: BTreeMap<PeerId, Owner>,
}

/// Build a legal chain of `len` blocks. `attacker_share` of the blocks
/// outside the final window (the last `window_len`) are attacker-attributed,
/// and `window_share` of the window blocks are; shares are rounded to
/// counts and placed by a seeded shuffle.
pub fn synth_chain(
    len: u64,
    difficulty: u32,
    genesis_difficulty: u32,
    attacker_share: f64,
    window_len: u64,
    window_share: f64,
    rng: &mut impl RngCore,
) -> SynthChain {
    let window_len = window_len.min(len);
    let body_len = len - window_len;

    let mut owners_by_height: Vec<Owner> = Vec::with_capacity(len as usize);
    for (count, share) in [(body_len, attacker_share), (window_len, window_share)] {
        let attackers = (count as f64 * share).round() as u64;
        let mut section: Vec<Owner> = (0..count)
            .map(|i| {
                if i < attackers {
                    Owner::Attacker
                } else {
                    Owner::Defender
                }
            })
            .collect();
        section.shuffle(rng);
        owners_by_height.extend(section);
    }

    let mut chain = Chain::new(genesis(genesis_difficulty));
    let mut identities = Vec::with_capacity(len as usize);
    let mut owners = BTreeMap::new();
    for owner in owners_by_height {
        let id = gen_identity(rng);
        let block = mine_block_on(chain.head(), id.peer_id(), difficulty, u64::MAX, rng)
            .expect("unbounded solve succeeds");
        chain.push(block).expect("mined child is legal and fresh");
        owners.insert(id.peer_id(), owner);
        identities.push(id);
    }
    SynthChain {
        chain,
        identities,
        owners,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn chain_is_legal_and_attribution_counts_match() {
        let mut rng = ChaCha12Rng::seed_from_u64(95);
        let sc = synth_chain(20, 4, 16, 0.25, 8, 0.5, &mut rng);
        sc.chain.validate().unwrap();
        assert_eq!(sc.chain.len(), 20);

        let body_attackers = sc.chain.blocks()[..12]
            .iter()
            .filter(|b| sc.owners[&b.peer] == Owner::Attacker)
            .count();
        let window_attackers = sc.chain.blocks()[12..]
            .iter()
            .filter(|b| sc.owners[&b.peer] == Owner::Attacker)
            .count();
        assert_eq!(body_attackers, 3); // 25% of 12
        assert_eq!(window_attackers, 4); // 50% of 8
    }

    #[test]
    fn same_seed_same_chain() {
        let a = synth_chain(6, 4, 16, 0.5, 3, 0.0, &mut ChaCha12Rng::seed_from_u64(96));
        let b = synth_chain(6, 4, 16, 0.5, 3, 0.0, &mut ChaCha12Rng::seed_from_u64(96));
        assert_eq!(a.chain, b.chain);
    }
}
