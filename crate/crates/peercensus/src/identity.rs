//! Peer identities, message signatures, and the hash function.
//!
//! An identity is an Ed25519 keypair; the peer ID is the 32-byte public key.
//! The hash is SHA-256. Both schemes are fixed here once and nothing outside
//! this module depends on which schemes they are: the rest of the crate only
//! sees opaque byte strings with a sign/verify/hash interface, so either
//! could be swapped without touching protocol logic.

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use std::fmt;

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

/// A peer (or account) identifier: the raw public key bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PeerId(pub [u8; 32]);

/// A detached signature.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Sig(pub [u8; 64]);

/// A keypair held by one simulated peer. The secret half never leaves the
/// owning peer; everything that crosses the simulated network carries only
/// `PeerId` and `Sig` values.
#[derive(Clone)]
pub struct Identity {
    signing: SigningKey,
    peer_id: PeerId,
}

impl Identity {
    pub fn peer_id(&self) -> PeerId {
        self.peer_id
    }

    pub fn sign(&self, msg: &[u8]) -> Sig {
        Sig(self.signing.sign(msg).to_bytes())
    }
}

impl fmt::Debug for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Identity({})", self.peer_id)
    }
}

/// Generate a fresh identity from the caller's random source. Deterministic
/// given the rng state.
pub fn gen_identity(rng: &mut impl RngCore) -> Identity {
    let mut secret = [0u8; 32];
    rng.fill_bytes(&mut secret);
    let signing = SigningKey::from_bytes(&secret);
    let peer_id = PeerId(signing.verifying_key().to_bytes());
    Identity { signing, peer_id }
}

/// Verify `sig` over `msg` against `peer`. Malformed keys or signatures
/// simply fail verification.
pub fn verify(peer: &PeerId, msg: &[u8], sig: &Sig) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(&peer.0) else {
        return false;
    };
    let signature = ed25519_dalek::Signature::from_bytes(&sig.0);
    key.verify(msg, &signature).is_ok()
}

pub fn sha256(bytes: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update(bytes);
    Digest(h.finalize().into())
}

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl PeerId {
    /// Reserved all-zero ID used by the genesis block; it is not a valid
    /// public key and never votes.
    pub const GENESIS: PeerId = PeerId([0u8; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

macro_rules! fmt_hex_short {
    ($ty:ident) => {
        impl fmt::Debug for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", hex::encode(&self.0[..6]))
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", hex::encode(&self.0[..6]))
            }
        }
    };
}
fmt_hex_short!(Digest);
fmt_hex_short!(PeerId);

impl fmt::Debug for Sig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..", hex::encode(&self.0[..4]))
    }
}

// Hex-string serde for the byte newtypes so dumps and fixtures stay readable.
macro_rules! hex_serde {
    ($ty:ident, $len:expr) => {
        impl Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.0))
            }
        }
        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let text = String::deserialize(d)?;
                let raw = hex::decode(&text).map_err(serde::de::Error::custom)?;
                let arr: [u8; $len] = raw
                    .try_into()
                    .map_err(|_| serde::de::Error::custom("wrong length"))?;
                Ok($ty(arr))
            }
        }
    };
}
hex_serde!(Digest, 32);
hex_serde!(PeerId, 32);
hex_serde!(Sig, 64);

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn same_seed_same_identity() {
        let a = gen_identity(&mut ChaCha12Rng::seed_from_u64(11));
        let b = gen_identity(&mut ChaCha12Rng::seed_from_u64(11));
        assert_eq!(a.peer_id(), b.peer_id());
        assert_eq!(a.sign(b"m").0.as_slice(), b.sign(b"m").0.as_slice());
    }

    #[test]
    fn two_draws_are_distinct() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let a = gen_identity(&mut rng);
        let b = gen_identity(&mut rng);
        assert_ne!(a.peer_id(), b.peer_id());
    }

    #[test]
    fn signature_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let id = gen_identity(&mut rng);
        let sig = id.sign(b"payload");
        assert!(verify(&id.peer_id(), b"payload", &sig));
        assert!(!verify(&id.peer_id(), b"payloaX", &sig));
    }

    #[test]
    fn forgery_never_verifies() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let ids: Vec<Identity> = (0..8).map(|_| gen_identity(&mut rng)).collect();
        for signer in &ids {
            let sig = signer.sign(b"msg");
            for other in &ids {
                if other.peer_id() != signer.peer_id() {
                    assert!(!verify(&other.peer_id(), b"msg", &sig));
                }
            }
        }
    }

    #[test]
    fn genesis_id_rejects_everything() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let id = gen_identity(&mut rng);
        assert!(!verify(&PeerId::GENESIS, b"m", &id.sign(b"m")));
    }
}
