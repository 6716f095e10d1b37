//! Abe-style blind signatures over a prime-order subgroup of Z*_p, plus the
//! token-ownership identification primitive built on the same group.

mod group;
mod ownership;
mod scheme;
pub mod vectors;

pub use group::{generate_group, is_probable_prime, ConcatBuf, GroupHash, GroupParams,
                MIN_GROUP_BITS};
pub use ownership::{ownership_keygen, verify_ownership, OwnershipKeyPair, OwnershipProof};
pub use scheme::{BlindSignature, Challenge, Proof, SignerKeyPair, SignerPublicKey,
                 SignerSession, SignerTranscript, UserBlindingSession};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlindSigError {
    #[error("security parameter too small: {bits} bits (minimum {MIN_GROUP_BITS})")]
    GroupTooSmall { bits: u32 },
    #[error("invalid group parameters: {0}")]
    InvalidGroup(&'static str),
    #[error("protocol abort: {0}")]
    ProtocolAbort(&'static str),
    #[error("signing session already consumed")]
    SessionConsumed,
    #[error("scalar out of range")]
    ScalarOutOfRange,
    #[error("proof failed the unblinding check")]
    InvalidProof,
}
