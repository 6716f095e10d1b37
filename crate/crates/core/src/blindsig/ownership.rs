//! Schnorr identification over the same group, used to prove possession of
//! a token's secret key against a verifier-supplied challenge.

use num_bigint::BigUint;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::group::{ConcatBuf, GroupParams};

/// Token ownership key pair: secret x_star, public X = g^x_star.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnershipKeyPair {
    #[serde(with = "crate::wire::hexnum")]
    pub x_star: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub public: BigUint,
}

/// Commitment-challenge-response proof of knowledge of x_star.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnershipProof {
    #[serde(with = "crate::wire::hexnum")]
    pub commitment: BigUint,
    #[serde(with = "crate::wire::hexnum")]
    pub response: BigUint,
}

pub fn ownership_keygen<R: RngCore>(params: &GroupParams, rng: &mut R) -> OwnershipKeyPair {
    let x_star = params.random_scalar(rng);
    let public = params.pow(&params.g, &x_star);
    OwnershipKeyPair { x_star, public }
}

fn derive_challenge_scalar(
    params: &GroupParams,
    public: &BigUint,
    commitment: &BigUint,
    challenge: &[u8],
) -> BigUint {
    let mut buf = ConcatBuf::new();
    buf.push_bytes(b"ownership-v1")
        .push_int(public)
        .push_int(commitment)
        .push_bytes(challenge);
    params.hash_to_scalar(buf.as_bytes())
}

impl OwnershipKeyPair {
    /// Prove knowledge of x_star, binding the verifier's challenge bytes
    /// into the response hash.
    pub fn prove<R: RngCore>(
        &self,
        params: &GroupParams,
        challenge: &[u8],
        rng: &mut R,
    ) -> OwnershipProof {
        let k = params.random_scalar(rng);
        let commitment = params.pow(&params.g, &k);
        let c = derive_challenge_scalar(params, &self.public, &commitment, challenge);
        let q = &params.q;
        // response = k - c * x_star mod q
        let cx = (&c * &self.x_star) % q;
        let response = ((k + q) - cx) % q;
        OwnershipProof {
            commitment,
            response,
        }
    }
}

/// Accept iff g^response * X^c equals the commitment, with c derived from
/// (X, commitment, challenge bytes). Malformed proofs reject.
pub fn verify_ownership(
    params: &GroupParams,
    public: &BigUint,
    challenge: &[u8],
    proof: &OwnershipProof,
) -> bool {
    if !params.is_scalar(&proof.response) || !params.is_subgroup_element(&proof.commitment) {
        return false;
    }
    if !params.is_subgroup_element(public) {
        return false;
    }
    let c = derive_challenge_scalar(params, public, &proof.commitment, challenge);
    let lhs = params.mul(
        &params.pow(&params.g, &proof.response),
        &params.pow(public, &c),
    );
    lhs == proof.commitment
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindsig::generate_group;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn honest_proof_accepts() {
        let params = generate_group(64, &mut rng(1)).unwrap();
        let key = ownership_keygen(&params, &mut rng(2));
        let proof = key.prove(&params, b"challenge-bytes", &mut rng(3));
        assert!(verify_ownership(
            &params,
            &key.public,
            b"challenge-bytes",
            &proof
        ));
    }

    #[test]
    fn proof_is_bound_to_the_challenge() {
        let params = generate_group(64, &mut rng(4)).unwrap();
        let key = ownership_keygen(&params, &mut rng(5));
        let proof = key.prove(&params, b"first", &mut rng(6));
        assert!(!verify_ownership(&params, &key.public, b"second", &proof));
    }

    #[test]
    fn cross_key_proofs_reject_over_random_trials() {
        let params = generate_group(64, &mut rng(7)).unwrap();
        let mut r = rng(8);
        for trial in 0..100 {
            let honest = ownership_keygen(&params, &mut r);
            let other = ownership_keygen(&params, &mut r);
            let proof = honest.prove(&params, b"c", &mut r);
            assert!(
                !verify_ownership(&params, &other.public, b"c", &proof),
                "cross-key proof accepted on trial {trial}"
            );
        }
    }

    #[test]
    fn malformed_proof_rejects() {
        let params = generate_group(64, &mut rng(9)).unwrap();
        let key = ownership_keygen(&params, &mut rng(10));
        let mut proof = key.prove(&params, b"c", &mut rng(11));
        proof.response = params.q.clone(); // out of range
        assert!(!verify_ownership(&params, &key.public, b"c", &proof));
    }
}
