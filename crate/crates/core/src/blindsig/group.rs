//! Prime-order subgroup of the multiplicative integers modulo p, plus the
//! hash functions H1/H2 (into the subgroup) and H3 (into the scalar field).

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BlindSigError;

/// Minimum admissible security parameter, in bits of q.
pub const MIN_GROUP_BITS: u32 = 16;

/// Domain tag selecting one of the two group-valued hash functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupHash {
    H1,
    H2,
}

impl GroupHash {
    fn tag(self) -> &'static [u8] {
        match self {
            GroupHash::H1 => b"H1",
            GroupHash::H2 => b"H2",
        }
    }
}

/// The discrete-log group: primes p, q with q | p-1 and a generator g of the
/// order-q subgroup of Z*_p.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupParams {
    /// Security parameter: the bit length of q.
    pub security_bits: u32,
    #[serde(with = "crate::wire::hexnum")]
    pub p: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub q: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub g: BigUint,
}

impl GroupParams {
    /// Check the structural invariants: p, q probably prime, q | p-1, and
    /// g generates a subgroup of order exactly q.
    pub fn validate(&self) -> Result<(), BlindSigError> {
        if self.q.bits() < u64::from(MIN_GROUP_BITS) {
            return Err(BlindSigError::GroupTooSmall {
                bits: self.q.bits() as u32,
            });
        }
        if !is_probable_prime(&self.p) || !is_probable_prime(&self.q) {
            return Err(BlindSigError::InvalidGroup("p or q is not prime"));
        }
        let pm1 = &self.p - BigUint::one();
        if !(&pm1 % &self.q).is_zero() {
            return Err(BlindSigError::InvalidGroup("q does not divide p-1"));
        }
        if self.g <= BigUint::one() || self.g >= self.p {
            return Err(BlindSigError::InvalidGroup("g out of range"));
        }
        if !self.is_subgroup_element(&self.g) {
            return Err(BlindSigError::InvalidGroup("g does not have order q"));
        }
        Ok(())
    }

    /// Membership test for the order-q subgroup: v in [1, p) with v^q = 1.
    pub fn is_subgroup_element(&self, v: &BigUint) -> bool {
        if v.is_zero() || *v >= self.p {
            return false;
        }
        v.modpow(&self.q, &self.p).is_one()
    }

    /// A scalar is a canonical residue mod q.
    pub fn is_scalar(&self, s: &BigUint) -> bool {
        *s < self.q
    }

    pub fn pow(&self, base: &BigUint, exp: &BigUint) -> BigUint {
        base.modpow(exp, &self.p)
    }

    pub fn mul(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.p
    }

    /// Multiplicative inverse in Z*_p (p prime, so a^(p-2)).
    pub fn inv(&self, a: &BigUint) -> BigUint {
        let e = &self.p - BigUint::from(2u8);
        a.modpow(&e, &self.p)
    }

    /// a / b in the group.
    pub fn div(&self, a: &BigUint, b: &BigUint) -> BigUint {
        self.mul(a, &self.inv(b))
    }

    /// Uniform scalar in [0, q).
    pub fn random_scalar<R: RngCore>(&self, rng: &mut R) -> BigUint {
        rng.gen_biguint_below(&self.q)
    }

    /// Uniform scalar in [1, q).
    pub fn random_nonzero_scalar<R: RngCore>(&self, rng: &mut R) -> BigUint {
        loop {
            let s = self.random_scalar(rng);
            if !s.is_zero() {
                return s;
            }
        }
    }

    /// Hash arbitrary bytes into the order-q subgroup.
    ///
    /// u = bytes-to-integer(hash(tag || input)) mod p, cofactor-cleared by
    /// u^((p-1)/q); re-hashed with a counter while the result is the identity.
    pub fn hash_to_group(&self, tag: GroupHash, input: &[u8]) -> BigUint {
        let cofactor = (&self.p - BigUint::one()) / &self.q;
        let mut counter: u32 = 0;
        loop {
            let mut h = Sha256::new();
            feed(&mut h, tag.tag());
            feed(&mut h, input);
            if counter > 0 {
                feed(&mut h, &counter.to_be_bytes());
            }
            let u = BigUint::from_bytes_be(&h.finalize()) % &self.p;
            let v = u.modpow(&cofactor, &self.p);
            if !v.is_one() && !v.is_zero() {
                return v;
            }
            counter += 1;
        }
    }

    /// Hash arbitrary bytes into Z_q (H3).
    pub fn hash_to_scalar(&self, input: &[u8]) -> BigUint {
        let mut h = Sha256::new();
        feed(&mut h, b"H3");
        feed(&mut h, input);
        BigUint::from_bytes_be(&h.finalize()) % &self.q
    }
}

/// Length-prefixed feed: 4-byte big-endian length, then the bytes.
/// Prevents ambiguity between adjacent variable-length operands.
fn feed(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u32).to_be_bytes());
    h.update(bytes);
}

/// Accumulates length-prefixed operands for hashing, mirroring the paper's
/// concatenation operator over integers and byte strings.
#[derive(Default)]
pub struct ConcatBuf {
    buf: Vec<u8>,
}

impl ConcatBuf {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_int(&mut self, v: &BigUint) -> &mut Self {
        self.push_bytes(&v.to_bytes_be())
    }

    pub fn push_bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf
            .extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }
}

/// Generate (p, q, g): q a prime of exactly n bits, p = k*q + 1 prime, and
/// g a generator of the order-q subgroup.
pub fn generate_group<R: RngCore>(n_bits: u32, rng: &mut R) -> Result<GroupParams, BlindSigError> {
    if n_bits < MIN_GROUP_BITS {
        return Err(BlindSigError::GroupTooSmall { bits: n_bits });
    }
    let q = random_prime(n_bits, rng);
    let one = BigUint::one();
    // Search even k upward: p = k*q + 1 must be odd.
    let mut k = BigUint::from(2u8);
    let p = loop {
        let candidate = &k * &q + &one;
        if is_probable_prime(&candidate) {
            break candidate;
        }
        k += 2u8;
    };
    let cofactor = (&p - &one) / &q;
    let g = loop {
        let x = rng.gen_biguint_range(&BigUint::from(2u8), &(&p - &one));
        let candidate = x.modpow(&cofactor, &p);
        if !candidate.is_one() {
            break candidate;
        }
    };
    Ok(GroupParams {
        security_bits: n_bits,
        p,
        q,
        g,
    })
}

/// Uniform prime with the top bit set, so the result has exactly `bits` bits.
fn random_prime<R: RngCore>(bits: u32, rng: &mut R) -> BigUint {
    let top = BigUint::one() << (bits - 1);
    loop {
        let mut candidate = rng.gen_biguint(bits as u64) | &top | BigUint::one();
        if candidate.bits() > u64::from(bits) {
            candidate = &candidate >> 1 | &top | BigUint::one();
        }
        if is_probable_prime(&candidate) {
            return candidate;
        }
    }
}

/// Miller-Rabin with fixed small bases plus pseudo-random rounds derived from
/// the candidate itself, so the test is deterministic for a given input.
pub fn is_probable_prime(n: &BigUint) -> bool {
    let two = BigUint::from(2u8);
    if *n < two {
        return false;
    }
    for small in [2u8, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let sp = BigUint::from(small);
        if *n == sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - BigUint::one();
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;

    let mut witness_seed = {
        let mut h = Sha256::new();
        h.update(n.to_bytes_be());
        h.finalize()
    };
    'witness: for round in 0..28u32 {
        let base = if round < 12 {
            BigUint::from([2u8, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37][round as usize])
        } else {
            let mut h = Sha256::new();
            h.update(witness_seed);
            h.update(round.to_be_bytes());
            witness_seed = h.finalize();
            BigUint::from_bytes_be(&witness_seed) % (n - &two) + &two
        };
        if (&base % n).is_zero() {
            continue;
        }
        let mut x = base.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 0..s.saturating_sub(1) {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}
