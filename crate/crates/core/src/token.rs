//! The signed token payload: a versioned byte string binding the owner's
//! public key, the unit value, and the issuance interval.

use num_bigint::BigUint;
use thiserror::Error;

pub const TOKEN_MESSAGE_VERSION: u8 = 1;

/// Decoded form of the message a credential signs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMessage {
    pub owner_public: BigUint,
    pub value: u64,
    pub interval: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenMessageError {
    #[error("token message truncated")]
    Truncated,
    #[error("unsupported token message version {0}")]
    UnsupportedVersion(u8),
    #[error("trailing bytes after token message")]
    TrailingBytes,
}

impl TokenMessage {
    /// version || len(X) || X || value || interval, integers big-endian.
    pub fn encode(&self) -> Vec<u8> {
        let x = self.owner_public.to_bytes_be();
        let mut out = Vec::with_capacity(1 + 4 + x.len() + 16);
        out.push(TOKEN_MESSAGE_VERSION);
        out.extend_from_slice(&(x.len() as u32).to_be_bytes());
        out.extend_from_slice(&x);
        out.extend_from_slice(&self.value.to_be_bytes());
        out.extend_from_slice(&self.interval.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TokenMessageError> {
        if bytes.is_empty() {
            return Err(TokenMessageError::Truncated);
        }
        if bytes[0] != TOKEN_MESSAGE_VERSION {
            return Err(TokenMessageError::UnsupportedVersion(bytes[0]));
        }
        let rest = &bytes[1..];
        if rest.len() < 4 {
            return Err(TokenMessageError::Truncated);
        }
        let x_len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
        let rest = &rest[4..];
        if rest.len() < x_len + 16 {
            return Err(TokenMessageError::Truncated);
        }
        let owner_public = BigUint::from_bytes_be(&rest[..x_len]);
        let value = u64::from_be_bytes(rest[x_len..x_len + 8].try_into().unwrap());
        let interval = u64::from_be_bytes(rest[x_len + 8..x_len + 16].try_into().unwrap());
        if rest.len() != x_len + 16 {
            return Err(TokenMessageError::TrailingBytes);
        }
        Ok(TokenMessage {
            owner_public,
            value,
            interval,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_version_and_truncation() {
        let msg = TokenMessage {
            owner_public: BigUint::from(0xbeefu32),
            value: 1,
            interval: 42,
        };
        let mut bytes = msg.encode();
        assert_eq!(TokenMessage::decode(&bytes), Ok(msg));
        bytes[0] = 9;
        assert_eq!(
            TokenMessage::decode(&bytes),
            Err(TokenMessageError::UnsupportedVersion(9))
        );
        assert_eq!(
            TokenMessage::decode(&[TOKEN_MESSAGE_VERSION, 0, 0]),
            Err(TokenMessageError::Truncated)
        );
    }

    proptest! {
        #[test]
        fn encode_decode_round_trips(
            x in proptest::collection::vec(any::<u8>(), 1..64),
            value in any::<u64>(),
            interval in any::<u64>(),
        ) {
            let msg = TokenMessage {
                owner_public: BigUint::from_bytes_be(&x),
                value,
                interval,
            };
            prop_assert_eq!(TokenMessage::decode(&msg.encode()).unwrap(), msg);
        }
    }
}
