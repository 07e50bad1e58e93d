//! Migration from an existing chain: trust the common prefix, seed the
//! voter pool and the online set from it, then re-commit the safety-margin
//! suffix through agreement.

use crate::agreement::SharedState;
use crate::block::{Block, Chain};
use crate::identity::PeerId;
use serde::Serialize;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BootstrapError {
    #[error("chain length {len} below the migration height {l_m}")]
    ChainTooShort { len: u64, l_m: u64 },
    #[error("safety margin k={k} must be below the migration height {l_m}")]
    BadMargin { k: u64, l_m: u64 },
    #[error("online window j={j} outside 1..={max}")]
    BadWindow { j: u64, max: u64 },
    #[error("only {online} of the {j} initial voters online; liveness needs {needed}")]
    InsufficientOnline { online: u64, j: u64, needed: u64 },
}

/// The initial replicated state plus the blocks to re-commit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapPlan {
    /// Chain truncated to height `l_m - k`, with the last `j` of its block
    /// finders as the online voter set.
    pub state: SharedState,
    /// Blocks at heights `l_m - k + 1 ..= l_m`, to be re-proposed in order.
    pub replay: Vec<Block>,
}

/// Cut the chain at `l_m`, keep heights `1..=l_m-k` as trusted, take the
/// `j` newest of those finders as the initial online voters, and return the
/// remaining `k` blocks for incremental re-commit. Fails unless at least
/// `ceil(2j/3) + 1` of the chosen voters are actually online.
pub fn bootstrap_from_chain(
    chain: &Chain,
    l_m: u64,
    k: u64,
    j: u64,
    online: &dyn Fn(&PeerId) -> bool,
) -> Result<BootstrapPlan, BootstrapError> {
    if chain.len() < l_m {
        return Err(BootstrapError::ChainTooShort {
            len: chain.len(),
            l_m,
        });
    }
    if k >= l_m {
        return Err(BootstrapError::BadMargin { k, l_m });
    }
    let cut = l_m - k;
    if j == 0 || j > cut {
        return Err(BootstrapError::BadWindow { j, max: cut });
    }

    let trusted = chain.truncated(cut);
    let voters: BTreeSet<PeerId> = ((cut - j + 1)..=cut)
        .map(|h| trusted.at_height(h).expect("height within cut").peer)
        .collect();

    let online_count = voters.iter().filter(|p| online(p)).count() as u64;
    let needed = (2 * j).div_ceil(3) + 1;
    if online_count < needed {
        return Err(BootstrapError::InsufficientOnline {
            online: online_count,
            j,
            needed,
        });
    }

    let replay: Vec<Block> = ((cut + 1)..=l_m)
        .map(|h| *chain.at_height(h).expect("height within l_m"))
        .collect();

    Ok(BootstrapPlan {
        state: SharedState::initial(trusted, voters),
        replay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::chaingen::synth_chain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn interval_arithmetic_on_a_hundred_block_chain() {
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        let sc = synth_chain(100, 4, 16, 0.0, 16, 0.0, &mut rng);
        let plan = bootstrap_from_chain(&sc.chain, 100, 6, 10, &|_| true).unwrap();

        // 94 trusted voters in the pool, 10 online, 6 blocks to replay.
        assert_eq!(plan.state.chain.len(), 94);
        assert_eq!(plan.state.chain.voters().len(), 94);
        assert_eq!(plan.state.online_voters.len(), 10);
        assert_eq!(plan.replay.len(), 6);
        assert_eq!(plan.state.now.ell, 94);

        // I is exactly the finders of heights 85..=94.
        for h in 85..=94 {
            let p = plan.state.chain.at_height(h).unwrap().peer;
            assert!(plan.state.online_voters.contains(&p));
        }
        // replay blocks are heights 95..=100 in order
        for (i, b) in plan.replay.iter().enumerate() {
            assert_eq!(b, sc.chain.at_height(95 + i as u64).unwrap());
        }
    }

    #[test]
    fn degenerate_window_covers_every_voter() {
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        let sc = synth_chain(20, 4, 16, 0.0, 0, 0.0, &mut rng);
        let plan = bootstrap_from_chain(&sc.chain, 20, 4, 16, &|_| true).unwrap();
        assert_eq!(plan.state.online_voters.len(), 16);
        assert_eq!(
            plan.state.online_voters,
            plan.state.chain.voters()
        );
    }

    #[test]
    fn liveness_margin_enforced() {
        let mut rng = ChaCha12Rng::seed_from_u64(102);
        let sc = synth_chain(30, 4, 16, 0.0, 0, 0.0, &mut rng);
        // j = 9 needs ceil(18/3)+1 = 7 online; allow only 6.
        let allowed: BTreeSet<PeerId> = (22..=27)
            .map(|h| sc.chain.at_height(h).unwrap().peer)
            .collect();
        let err = bootstrap_from_chain(&sc.chain, 30, 3, 9, &|p| allowed.contains(p)).unwrap_err();
        assert_eq!(
            err,
            BootstrapError::InsufficientOnline {
                online: 6,
                j: 9,
                needed: 7
            }
        );
    }

    #[test]
    fn parameter_bounds() {
        let mut rng = ChaCha12Rng::seed_from_u64(103);
        let sc = synth_chain(10, 4, 16, 0.0, 0, 0.0, &mut rng);
        assert!(matches!(
            bootstrap_from_chain(&sc.chain, 11, 2, 2, &|_| true),
            Err(BootstrapError::ChainTooShort { .. })
        ));
        assert!(matches!(
            bootstrap_from_chain(&sc.chain, 10, 10, 2, &|_| true),
            Err(BootstrapError::BadMargin { .. })
        ));
        assert!(matches!(
            bootstrap_from_chain(&sc.chain, 10, 2, 9, &|_| true),
            Err(BootstrapError::BadWindow { .. })
        ));
    }
}
