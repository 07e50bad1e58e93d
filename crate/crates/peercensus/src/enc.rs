//! Canonical byte encoding used everywhere a digest or signature is computed.
//!
//! The format is deliberately dumb: values are concatenated in a fixed order,
//! variable-length fields are prefixed with their length as a big-endian u32,
//! fixed-width integers are written big-endian. Two encoders producing the
//! same byte string is the only equality that matters for hashing and
//! signing, so there is no decoder here; structured IO goes through serde.

/// Append a length-prefixed byte string.
pub fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// Append a big-endian u32.
pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

/// Append a big-endian u64.
pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

/// Append a single tag byte, used to separate message kinds sharing a signer.
pub fn put_tag(out: &mut Vec<u8>, tag: u8) {
    out.push(tag);
}
