//! Wire-level helpers shared by every service: hex encodings for big
//! integers and byte strings, timestamps, and the JSON error envelope.

use serde::{Deserialize, Serialize};

/// Milliseconds since the UNIX epoch.
pub type TimestampMs = u64;

pub fn now_ms() -> TimestampMs {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .expect("system clock before 1970")
        .as_millis() as TimestampMs
}

/// Big integers travel as lowercase hexadecimal with no leading zeros.
/// Group moduli are only ever sent during key distribution.
pub mod hexnum {
    use num_bigint::BigUint;
    use num_traits::Num;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_str_radix(16))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let raw = String::deserialize(d)?;
        if raw.is_empty() || raw.chars().any(|c| c.is_ascii_uppercase()) {
            return Err(de::Error::custom("expected lowercase hex integer"));
        }
        BigUint::from_str_radix(&raw, 16).map_err(de::Error::custom)
    }
}

/// Fixed-length byte strings (nonces, digests) as plain lowercase hex.
pub mod hexbytes {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let raw = String::deserialize(d)?;
        hex::decode(&raw).map_err(de::Error::custom)
    }
}

/// JSON error envelope returned by every endpoint on failure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}
