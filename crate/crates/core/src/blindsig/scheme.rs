//! The three-move blind-signature protocol: signer challenge, blinded
//! user challenge, signer proof, unblinding, and signature verification.

use num_bigint::BigUint;
use num_traits::One;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::group::{ConcatBuf, GroupHash, GroupParams};
use super::BlindSigError;

/// The signer's public half: the six-tuple (p, q, g, h, y, z).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignerPublicKey {
    pub params: GroupParams,
    #[serde(with = "crate::wire::hexnum")]
    pub h: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub y: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub z: BigUint,
}

/// Signing key pair. The secret scalar never leaves this struct.
#[derive(Debug, Clone)]
pub struct SignerKeyPair {
    public: SignerPublicKey,
    x_sk: BigUint,
}

/// Signer-side state for one blind-signing exchange. Answers exactly one
/// challenge-response; `consumed` is one-way.
#[derive(Debug)]
pub struct SignerSession {
    pub rnd: [u8; 32],
    pub(crate) u: BigUint,
    pub(crate) s1: BigUint,
    pub(crate) s2: BigUint,
    pub(crate) d: BigUint,
    #[allow(dead_code)] // logged protocol state, read by transcript tests
    pub(crate) a: BigUint,
    consumed: bool,
}

/// The signer's opening message: (rnd, a, b1, b2).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    #[serde(with = "crate::wire::hexbytes")]
    pub rnd: Vec<u8>,
    #[serde(with = "crate::wire::hexnum")]
    pub a: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub b1: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub b2: BigUint,
}

/// User-side blinding state between sending e and receiving the proof.
#[derive(Debug)]
pub struct UserBlindingSession {
    message: Vec<u8>,
    pub(crate) gamma: BigUint,
    pub(crate) zeta: BigUint,
    pub(crate) zeta1: BigUint,
    #[allow(dead_code)] // logged protocol state, read by transcript tests
    pub(crate) zeta2: BigUint,
    pub(crate) t1: BigUint,
    pub(crate) t2: BigUint,
    pub(crate) t3: BigUint,
    pub(crate) t4: BigUint,
    pub(crate) t5: BigUint,
    pub(crate) tau: BigUint,
    #[allow(dead_code)] // logged protocol state, read by transcript tests
    pub(crate) epsilon: BigUint,
    pub(crate) e: BigUint,
}

/// The signer's response (r, c, s1, s2, d) to the blinded challenge e.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proof {
    #[serde(with = "crate::wire::hexnum")]
    pub r: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub c: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub s1: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub s2: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub d: BigUint,
}

/// The unblinded signature Sigma = (zeta, zeta1, rho, varpi, sigma1, sigma2,
/// delta, mu) held by the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindSignature {
    #[serde(with = "crate::wire::hexnum")]
    pub zeta: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub zeta1: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub rho: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub varpi: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub sigma1: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub sigma2: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub delta: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub mu: BigUint,
}

/// Everything the signer saw during one exchange. This is what a CP or AP
/// publishes per credential: it reveals nothing about the unblinded
/// signature, and anyone holding the public key can check it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignerTranscript {
    pub challenge: Challenge,
    #[serde(with = "crate::wire::hexnum")]
    pub e: BigUint,
    pub proof: Proof,
}

fn add_mod(a: &BigUint, b: &BigUint, q: &BigUint) -> BigUint {
    (a + b) % q
}

fn sub_mod(a: &BigUint, b: &BigUint, q: &BigUint) -> BigUint {
    ((a % q) + q - (b % q)) % q
}

fn mul_mod(a: &BigUint, b: &BigUint, q: &BigUint) -> BigUint {
    (a * b) % q
}

impl SignerPublicKey {
    /// Digest identifying this key; used as the per-signer salt for H2 and
    /// as the key reference in published proof blocks.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut buf = ConcatBuf::new();
        buf.push_bytes(b"signer-key-v1")
            .push_int(&self.params.p)
            .push_int(&self.params.q)
            .push_int(&self.params.g)
            .push_int(&self.h)
            .push_int(&self.y)
            .push_int(&self.z);
        let mut h = Sha256::new();
        h.update(buf.as_bytes());
        h.finalize().into()
    }

    /// z1 = H2(key fingerprint || rnd); z2 = z / z1.
    fn split_tag(&self, rnd: &[u8]) -> (BigUint, BigUint) {
        let mut buf = ConcatBuf::new();
        buf.push_bytes(&self.fingerprint()).push_bytes(rnd);
        let z1 = self
            .params
            .hash_to_group(GroupHash::H2, buf.as_bytes());
        let z2 = self.params.div(&self.z, &z1);
        (z1, z2)
    }

    /// Accept iff zeta != 1 and
    /// varpi + delta = H3(zeta || zeta1 || g^rho y^varpi || g^sigma1 zeta1^delta
    ///                    || h^sigma2 zeta2^delta || z^mu zeta^delta || m) mod q.
    /// Malformed component encodings reject rather than error.
    pub fn verify(&self, message: &[u8], sig: &BlindSignature) -> bool {
        let params = &self.params;
        for scalar in [
            &sig.rho,
            &sig.varpi,
            &sig.sigma1,
            &sig.sigma2,
            &sig.delta,
            &sig.mu,
        ] {
            if !params.is_scalar(scalar) {
                return false;
            }
        }
        if !params.is_subgroup_element(&sig.zeta) || !params.is_subgroup_element(&sig.zeta1) {
            return false;
        }
        if sig.zeta.is_one() {
            return false;
        }
        let zeta2 = params.div(&sig.zeta, &sig.zeta1);
        let lhs = add_mod(&sig.varpi, &sig.delta, &params.q);
        let v1 = params.mul(
            &params.pow(&params.g, &sig.rho),
            &params.pow(&self.y, &sig.varpi),
        );
        let v2 = params.mul(
            &params.pow(&params.g, &sig.sigma1),
            &params.pow(&sig.zeta1, &sig.delta),
        );
        let v3 = params.mul(
            &params.pow(&self.h, &sig.sigma2),
            &params.pow(&zeta2, &sig.delta),
        );
        let v4 = params.mul(
            &params.pow(&self.z, &sig.mu),
            &params.pow(&sig.zeta, &sig.delta),
        );
        let mut buf = ConcatBuf::new();
        buf.push_int(&sig.zeta)
            .push_int(&sig.zeta1)
            .push_int(&v1)
            .push_int(&v2)
            .push_int(&v3)
            .push_int(&v4)
            .push_bytes(message);
        lhs == params.hash_to_scalar(buf.as_bytes())
    }
}

impl SignerKeyPair {
    /// Key generation: h uniform in <g> (h != 1), secret x, y = g^x, and the
    /// fixed tag z = H1(p || q || g || h || y).
    pub fn generate<R: RngCore>(params: &GroupParams, rng: &mut R) -> Self {
        let x_sk = params.random_scalar(rng);
        Self::from_secret(params, x_sk, rng)
    }

    /// Deterministic construction from a chosen secret; h is still drawn
    /// from the rng. Used by tests that pin x_sk.
    pub fn from_secret<R: RngCore>(params: &GroupParams, x_sk: BigUint, rng: &mut R) -> Self {
        let h = loop {
            let w = params.random_scalar(rng);
            let candidate = params.pow(&params.g, &w);
            if !candidate.is_one() {
                break candidate;
            }
        };
        let y = params.pow(&params.g, &x_sk);
        let mut buf = ConcatBuf::new();
        buf.push_int(&params.p)
            .push_int(&params.q)
            .push_int(&params.g)
            .push_int(&h)
            .push_int(&y);
        // hash_to_group retries internally, so z != 1 by construction.
        let z = params.hash_to_group(GroupHash::H1, buf.as_bytes());
        SignerKeyPair {
            public: SignerPublicKey {
                params: params.clone(),
                h,
                y,
                z,
            },
            x_sk,
        }
    }

    pub fn public(&self) -> &SignerPublicKey {
        &self.public
    }

    /// Open a signing exchange: fresh rnd, blinding tag split, and the
    /// commitments a = g^u, b1 = g^s1 z1^d, b2 = h^s2 z2^d.
    pub fn initial_challenge<R: RngCore>(&self, rng: &mut R) -> (SignerSession, Challenge) {
        let params = &self.public.params;
        let mut rnd = [0u8; 32];
        rng.fill_bytes(&mut rnd);
        let (z1, z2) = self.public.split_tag(&rnd);
        let u = params.random_scalar(rng);
        let s1 = params.random_scalar(rng);
        let s2 = params.random_scalar(rng);
        let d = params.random_scalar(rng);
        let a = params.pow(&params.g, &u);
        let b1 = params.mul(&params.pow(&params.g, &s1), &params.pow(&z1, &d));
        let b2 = params.mul(&params.pow(&self.public.h, &s2), &params.pow(&z2, &d));
        let session = SignerSession {
            rnd,
            u,
            s1: s1.clone(),
            s2: s2.clone(),
            d: d.clone(),
            a: a.clone(),
            consumed: false,
        };
        let challenge = Challenge {
            rnd: rnd.to_vec(),
            a,
            b1,
            b2,
        };
        (session, challenge)
    }

    /// Answer the blinded challenge: c = e - d, r = u - c*x (mod q).
    /// A session answers exactly once.
    pub fn respond(
        &self,
        session: &mut SignerSession,
        e: &BigUint,
    ) -> Result<Proof, BlindSigError> {
        if session.consumed {
            return Err(BlindSigError::SessionConsumed);
        }
        let q = &self.public.params.q;
        if !self.public.params.is_scalar(e) {
            return Err(BlindSigError::ScalarOutOfRange);
        }
        session.consumed = true;
        let c = sub_mod(e, &session.d, q);
        let r = sub_mod(&session.u, &mul_mod(&c, &self.x_sk, q), q);
        Ok(Proof {
            r,
            c,
            s1: session.s1.clone(),
            s2: session.s2.clone(),
            d: session.d.clone(),
        })
    }
}

impl UserBlindingSession {
    /// Blind the signer's commitments and derive the challenge e.
    ///
    /// Aborts if b1 or b2 fall outside the subgroup, per the protocol's
    /// membership checks.
    pub fn initiate<R: RngCore>(
        key: &SignerPublicKey,
        message: &[u8],
        challenge: &Challenge,
        rng: &mut R,
    ) -> Result<(Self, BigUint), BlindSigError> {
        let params = &key.params;
        if !params.is_subgroup_element(&challenge.b1) {
            return Err(BlindSigError::ProtocolAbort("b1 not in subgroup"));
        }
        if !params.is_subgroup_element(&challenge.b2) {
            return Err(BlindSigError::ProtocolAbort("b2 not in subgroup"));
        }
        if !params.is_subgroup_element(&challenge.a) {
            return Err(BlindSigError::ProtocolAbort("a not in subgroup"));
        }
        let (z1, _z2) = key.split_tag(&challenge.rnd);
        let gamma = params.random_nonzero_scalar(rng);
        let zeta = params.pow(&key.z, &gamma);
        let zeta1 = params.pow(&z1, &gamma);
        let zeta2 = params.div(&zeta, &zeta1);
        let t1 = params.random_scalar(rng);
        let t2 = params.random_scalar(rng);
        let t3 = params.random_scalar(rng);
        let t4 = params.random_scalar(rng);
        let t5 = params.random_scalar(rng);
        let alpha = params.mul(
            &challenge.a,
            &params.mul(&params.pow(&params.g, &t1), &params.pow(&key.y, &t2)),
        );
        let beta1 = params.mul(
            &params.pow(&challenge.b1, &gamma),
            &params.mul(&params.pow(&params.g, &t3), &params.pow(&zeta1, &t4)),
        );
        let beta2 = params.mul(
            &params.pow(&challenge.b2, &gamma),
            &params.mul(&params.pow(&key.h, &t5), &params.pow(&zeta2, &t4)),
        );
        let tau = params.random_scalar(rng);
        let eta = params.pow(&key.z, &tau);
        let mut buf = ConcatBuf::new();
        buf.push_int(&zeta)
            .push_int(&zeta1)
            .push_int(&alpha)
            .push_int(&beta1)
            .push_int(&beta2)
            .push_int(&eta)
            .push_bytes(message);
        let epsilon = params.hash_to_scalar(buf.as_bytes());
        let e = sub_mod(&sub_mod(&epsilon, &t2, &params.q), &t4, &params.q);
        let session = UserBlindingSession {
            message: message.to_vec(),
            gamma,
            zeta,
            zeta1,
            zeta2,
            t1,
            t2,
            t3,
            t4,
            t5,
            tau,
            epsilon,
            e: e.clone(),
        };
        Ok((session, e))
    }

    pub fn message(&self) -> &[u8] {
        &self.message
    }

    pub fn e(&self) -> &BigUint {
        &self.e
    }

    /// Remove the blinding from the signer's proof and run the final check.
    /// A failing check signals a misbehaving signer.
    pub fn unblind(
        self,
        key: &SignerPublicKey,
        proof: &Proof,
    ) -> Result<BlindSignature, BlindSigError> {
        let params = &key.params;
        let q = &params.q;
        for scalar in [&proof.r, &proof.c, &proof.s1, &proof.s2, &proof.d] {
            if !params.is_scalar(scalar) {
                return Err(BlindSigError::InvalidProof);
            }
        }
        let rho = add_mod(&proof.r, &self.t1, q);
        let varpi = add_mod(&proof.c, &self.t2, q);
        let sigma1 = add_mod(&mul_mod(&self.gamma, &proof.s1, q), &self.t3, q);
        let sigma2 = add_mod(&mul_mod(&self.gamma, &proof.s2, q), &self.t5, q);
        let delta = add_mod(&proof.d, &self.t4, q);
        let mu = sub_mod(&self.tau, &mul_mod(&delta, &self.gamma, q), q);
        let sig = BlindSignature {
            zeta: self.zeta,
            zeta1: self.zeta1,
            rho,
            varpi,
            sigma1,
            sigma2,
            delta,
            mu,
        };
        if !key.verify(&self.message, &sig) {
            return Err(BlindSigError::InvalidProof);
        }
        Ok(sig)
    }
}

impl BlindSignature {
    /// Canonical byte encoding of the eight-tuple.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut buf = ConcatBuf::new();
        buf.push_bytes(b"sigma-v1")
            .push_int(&self.zeta)
            .push_int(&self.zeta1)
            .push_int(&self.rho)
            .push_int(&self.varpi)
            .push_int(&self.sigma1)
            .push_int(&self.sigma2)
            .push_int(&self.delta)
            .push_int(&self.mu);
        buf.as_bytes().to_vec()
    }

    /// Digest of the canonical encoding; the ledger keys token state by this.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical_bytes());
        h.finalize().into()
    }
}

impl SignerTranscript {
    /// Check the whole exchange against the signer's public key: response
    /// consistency c = e - d and all three commitment equations.
    pub fn verify_under(&self, key: &SignerPublicKey) -> bool {
        let params = &key.params;
        let q = &params.q;
        for scalar in [
            &self.e,
            &self.proof.r,
            &self.proof.c,
            &self.proof.s1,
            &self.proof.s2,
            &self.proof.d,
        ] {
            if !params.is_scalar(scalar) {
                return false;
            }
        }
        for elem in [&self.challenge.a, &self.challenge.b1, &self.challenge.b2] {
            if !params.is_subgroup_element(elem) {
                return false;
            }
        }
        if self.proof.c != sub_mod(&self.e, &self.proof.d, q) {
            return false;
        }
        let schnorr = params.mul(
            &params.pow(&params.g, &self.proof.r),
            &params.pow(&key.y, &self.proof.c),
        );
        if schnorr != self.challenge.a {
            return false;
        }
        let (z1, z2) = key.split_tag(&self.challenge.rnd);
        let b1 = params.mul(
            &params.pow(&params.g, &self.proof.s1),
            &params.pow(&z1, &self.proof.d),
        );
        if b1 != self.challenge.b1 {
            return false;
        }
        let b2 = params.mul(
            &params.pow(&key.h, &self.proof.s2),
            &params.pow(&z2, &self.proof.d),
        );
        b2 == self.challenge.b2
    }

    /// Stable identity for block membership comparisons.
    pub fn digest(&self) -> [u8; 32] {
        let mut buf = ConcatBuf::new();
        buf.push_bytes(b"transcript-v1")
            .push_bytes(&self.challenge.rnd)
            .push_int(&self.challenge.a)
            .push_int(&self.challenge.b1)
            .push_int(&self.challenge.b2)
            .push_int(&self.e)
            .push_int(&self.proof.r)
            .push_int(&self.proof.c)
            .push_int(&self.proof.s1)
            .push_int(&self.proof.s2)
            .push_int(&self.proof.d);
        let mut h = Sha256::new();
        h.update(buf.as_bytes());
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindsig::generate_group;
    use num_traits::Zero;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn test_key(seed: u64) -> SignerKeyPair {
        let params = generate_group(64, &mut rng(seed)).unwrap();
        SignerKeyPair::generate(&params, &mut rng(seed + 1))
    }

    fn honest_sign(
        key: &SignerKeyPair,
        message: &[u8],
        rng_signer: &mut ChaCha20Rng,
        rng_user: &mut ChaCha20Rng,
    ) -> (SignerTranscript, BlindSignature) {
        let (mut session, challenge) = key.initial_challenge(rng_signer);
        let (user, e) =
            UserBlindingSession::initiate(key.public(), message, &challenge, rng_user).unwrap();
        let proof = key.respond(&mut session, &e).unwrap();
        let sig = user.unblind(key.public(), &proof).unwrap();
        let transcript = SignerTranscript {
            challenge,
            e,
            proof,
        };
        (transcript, sig)
    }

    #[test]
    fn keygen_with_pinned_secret_on_hand_checkable_group() {
        // p=23, q=11, g=2: 2^3 mod 23 = 8.
        let params = GroupParams {
            security_bits: 4,
            p: BigUint::from(23u8),
            q: BigUint::from(11u8),
            g: BigUint::from(2u8),
        };
        let key = SignerKeyPair::from_secret(&params, BigUint::from(3u8), &mut rng(5));
        assert_eq!(key.public().y, BigUint::from(8u8));
        assert!(params.is_subgroup_element(&key.public().h));
        assert!(params.is_subgroup_element(&key.public().z));
    }

    #[test]
    fn keygen_is_deterministic_under_a_fixed_seed() {
        let params = generate_group(64, &mut rng(21)).unwrap();
        let k1 = SignerKeyPair::generate(&params, &mut rng(99));
        let k2 = SignerKeyPair::generate(&params, &mut rng(99));
        assert_eq!(k1.public(), k2.public());
        assert_eq!(k1.x_sk, k2.x_sk);
    }

    #[test]
    fn initial_challenges_are_fresh_and_well_formed() {
        let key = test_key(31);
        let mut r = rng(32);
        let (s1, c1) = key.initial_challenge(&mut r);
        let (_s2, c2) = key.initial_challenge(&mut r);
        assert_ne!(c1.rnd, c2.rnd);
        let params = &key.public().params;
        assert!(params.is_subgroup_element(&c1.b1));
        assert!(params.is_subgroup_element(&c1.b2));
        // a = g^u for the session's logged u.
        assert_eq!(c1.a, params.pow(&params.g, &s1.u));
    }

    #[test]
    fn user_aborts_on_non_subgroup_commitment() {
        let key = test_key(41);
        let (_s, mut challenge) = key.initial_challenge(&mut rng(42));
        // p-1 has order 2 (it is -1), not q, whenever q is odd.
        challenge.b1 = &key.public().params.p - BigUint::one();
        let err = UserBlindingSession::initiate(key.public(), b"m", &challenge, &mut rng(43))
            .unwrap_err();
        assert!(matches!(err, BlindSigError::ProtocolAbort(_)));
    }

    #[test]
    fn blinded_challenge_matches_independent_recomputation() {
        let key = test_key(51);
        let (_s, challenge) = key.initial_challenge(&mut rng(52));
        let (user, e) =
            UserBlindingSession::initiate(key.public(), b"msg", &challenge, &mut rng(53)).unwrap();
        let q = &key.public().params.q;
        assert!(e < *q);
        // e = epsilon - t2 - t4 mod q, recomputed from the logged values.
        let expect = ((&user.epsilon + q + q) - &user.t2 - &user.t4) % q;
        assert_eq!(e, expect);
        // Reproducible under the same seeds.
        let (_user2, e2) =
            UserBlindingSession::initiate(key.public(), b"msg", &challenge, &mut rng(53)).unwrap();
        assert_eq!(e, e2);
    }

    #[test]
    fn respond_is_one_shot_and_satisfies_the_schnorr_identity() {
        let key = test_key(61);
        let (mut session, challenge) = key.initial_challenge(&mut rng(62));
        let (_user, e) =
            UserBlindingSession::initiate(key.public(), b"m", &challenge, &mut rng(63)).unwrap();
        let proof = key.respond(&mut session, &e).unwrap();
        let params = &key.public().params;
        // c + d = e (mod q)
        assert_eq!((&proof.c + &proof.d) % &params.q, e);
        // g^r y^c = a
        let lhs = params.mul(
            &params.pow(&params.g, &proof.r),
            &params.pow(&key.public().y, &proof.c),
        );
        assert_eq!(lhs, challenge.a);
        // Replay refused.
        assert!(matches!(
            key.respond(&mut session, &e),
            Err(BlindSigError::SessionConsumed)
        ));
    }

    #[test]
    fn respond_rejects_out_of_range_challenge() {
        let key = test_key(65);
        let (mut session, _) = key.initial_challenge(&mut rng(66));
        let too_big = key.public().params.q.clone();
        assert!(matches!(
            key.respond(&mut session, &too_big),
            Err(BlindSigError::ScalarOutOfRange)
        ));
    }

    #[test]
    fn honest_round_trip_verifies() {
        let key = test_key(71);
        let (transcript, sig) = honest_sign(&key, b"ticket", &mut rng(72), &mut rng(73));
        assert!(key.public().verify(b"ticket", &sig));
        assert!(transcript.verify_under(key.public()));
    }

    #[test]
    fn tampered_proof_is_rejected_at_unblinding() {
        let key = test_key(81);
        let (mut session, challenge) = key.initial_challenge(&mut rng(82));
        let (user, e) =
            UserBlindingSession::initiate(key.public(), b"m", &challenge, &mut rng(83)).unwrap();
        let mut proof = key.respond(&mut session, &e).unwrap();
        proof.r = (&proof.r + BigUint::one()) % &key.public().params.q;
        assert!(matches!(
            user.unblind(key.public(), &proof),
            Err(BlindSigError::InvalidProof)
        ));
    }

    #[test]
    fn distinct_blinding_factors_give_distinct_valid_signatures() {
        let key = test_key(91);
        let (t1, sig1) = honest_sign(&key, b"same-message", &mut rng(92), &mut rng(93));
        let (t2, sig2) = honest_sign(&key, b"same-message", &mut rng(94), &mut rng(95));
        assert_ne!(sig1, sig2);
        assert!(key.public().verify(b"same-message", &sig1));
        assert!(key.public().verify(b"same-message", &sig2));
        assert_ne!(t1.digest(), t2.digest());
    }

    #[test]
    fn verify_rejects_identity_zeta_and_flipped_message() {
        let key = test_key(101);
        let (_t, sig) = honest_sign(&key, b"payload", &mut rng(102), &mut rng(103));
        let mut forged = sig.clone();
        forged.zeta = BigUint::one();
        assert!(!key.public().verify(b"payload", &forged));
        assert!(!key.public().verify(b"payloae", &sig));
    }

    #[test]
    fn every_signature_component_is_binding() {
        let key = test_key(111);
        let (_t, sig) = honest_sign(&key, b"m", &mut rng(112), &mut rng(113));
        let params = &key.public().params;
        let bump_elem = |v: &BigUint| params.mul(v, &params.pow(&params.g, &BigUint::one()));
        let bump_scalar = |v: &BigUint| (v + BigUint::one()) % &params.q;
        let mutations: Vec<BlindSignature> = vec![
            BlindSignature {
                zeta: bump_elem(&sig.zeta),
                ..sig.clone()
            },
            BlindSignature {
                zeta1: bump_elem(&sig.zeta1),
                ..sig.clone()
            },
            BlindSignature {
                rho: bump_scalar(&sig.rho),
                ..sig.clone()
            },
            BlindSignature {
                varpi: bump_scalar(&sig.varpi),
                ..sig.clone()
            },
            BlindSignature {
                sigma1: bump_scalar(&sig.sigma1),
                ..sig.clone()
            },
            BlindSignature {
                sigma2: bump_scalar(&sig.sigma2),
                ..sig.clone()
            },
            BlindSignature {
                delta: bump_scalar(&sig.delta),
                ..sig.clone()
            },
            BlindSignature {
                mu: bump_scalar(&sig.mu),
                ..sig.clone()
            },
        ];
        for (i, m) in mutations.iter().enumerate() {
            assert!(
                !key.public().verify(b"m", m),
                "mutation of component {i} still verified"
            );
        }
    }

    #[test]
    fn signature_values_are_unlinkable_to_the_signer_transcript() {
        let key = test_key(121);
        let (transcript, sig) = honest_sign(&key, b"m", &mut rng(122), &mut rng(123));
        // None of the unblinded components may equal its blinded counterpart.
        assert_ne!(sig.rho, transcript.proof.r);
        assert_ne!(sig.varpi, transcript.proof.c);
        assert_ne!(sig.sigma1, transcript.proof.s1);
        assert_ne!(sig.sigma2, transcript.proof.s2);
        assert_ne!(sig.delta, transcript.proof.d);
        assert_ne!(sig.mu, transcript.e);
        for elem in [&transcript.challenge.a, &transcript.challenge.b1, &transcript.challenge.b2] {
            assert_ne!(&sig.zeta, elem);
            assert_ne!(&sig.zeta1, elem);
        }
    }

    #[test]
    fn group_outputs_stay_in_the_subgroup() {
        let key = test_key(131);
        let params = &key.public().params;
        let (_s, challenge) = key.initial_challenge(&mut rng(132));
        for v in [&challenge.a, &challenge.b1, &challenge.b2] {
            assert!(params.is_subgroup_element(v));
        }
        let (_t, sig) = honest_sign(&key, b"m", &mut rng(133), &mut rng(134));
        assert!(params.is_subgroup_element(&sig.zeta));
        assert!(params.is_subgroup_element(&sig.zeta1));
    }

    #[test]
    fn foreign_key_transcript_fails_verification() {
        let key_a = test_key(141);
        let key_b = test_key(151);
        let (transcript, _sig) = honest_sign(&key_b, b"m", &mut rng(142), &mut rng(143));
        assert!(transcript.verify_under(key_b.public()));
        assert!(!transcript.verify_under(key_a.public()));
    }

    #[test]
    fn zero_challenge_is_accepted_as_a_scalar() {
        // Totality at the boundary: e = 0 is a legal scalar.
        let key = test_key(161);
        let (mut session, _) = key.initial_challenge(&mut rng(162));
        let proof = key.respond(&mut session, &BigUint::zero()).unwrap();
        assert_eq!((&proof.c + &proof.d) % &key.public().params.q, BigUint::zero());
    }
}
