//! Flat-file test vectors: one signing transcript per line, tab-separated,
//! integers in lowercase hex. Lines starting with '#' are comments.

use std::io::{self, BufRead, Write};

use num_bigint::BigUint;
use num_traits::Num;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{generate_group, BlindSigError, SignerKeyPair, UserBlindingSession};

pub const VECTOR_FIELDS: &[&str] = &[
    "n", "p", "q", "g", "h", "y", "z", "m", "rnd", "a", "b1", "b2", "e", "r", "c", "s1", "s2",
    "d", "zeta", "zeta1", "rho", "varpi", "sigma1", "sigma2", "delta", "mu",
];

/// One complete honest signing exchange, flattened for the vector file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestVector {
    pub fields: Vec<BigUint>,
    pub message: Vec<u8>,
}

/// Generate `count` honest transcripts at the given group size and write
/// them as vector lines.
pub fn write_vectors<W: Write>(
    out: &mut W,
    n_bits: u32,
    count: usize,
    seed: u64,
) -> io::Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let params = generate_group(n_bits, &mut rng).expect("group size validated by caller");
    let key = SignerKeyPair::generate(&params, &mut rng);
    writeln!(out, "# {}", VECTOR_FIELDS.join("\t"))?;
    for _ in 0..count {
        let mut message = vec![0u8; 32];
        rng.fill_bytes(&mut message);
        let (mut session, challenge) = key.initial_challenge(&mut rng);
        let (user, e) =
            UserBlindingSession::initiate(key.public(), &message, &challenge, &mut rng)
                .expect("honest challenge");
        let proof = key.respond(&mut session, &e).expect("fresh session");
        let sig = user
            .unblind(key.public(), &proof)
            .expect("honest proof unblinds");
        let public = key.public();
        let ints: Vec<BigUint> = vec![
            BigUint::from(n_bits),
            params.p.clone(),
            params.q.clone(),
            params.g.clone(),
            public.h.clone(),
            public.y.clone(),
            public.z.clone(),
            BigUint::from_bytes_be(&message),
            BigUint::from_bytes_be(&challenge.rnd),
            challenge.a.clone(),
            challenge.b1.clone(),
            challenge.b2.clone(),
            e,
            proof.r.clone(),
            proof.c.clone(),
            proof.s1.clone(),
            proof.s2.clone(),
            proof.d.clone(),
            sig.zeta.clone(),
            sig.zeta1.clone(),
            sig.rho.clone(),
            sig.varpi.clone(),
            sig.sigma1.clone(),
            sig.sigma2.clone(),
            sig.delta.clone(),
            sig.mu.clone(),
        ];
        let line: Vec<String> = ints.iter().map(|v| v.to_str_radix(16)).collect();
        writeln!(out, "{}", line.join("\t"))?;
    }
    Ok(())
}

/// Parse vector lines back into records; malformed fields surface the line
/// number.
pub fn read_vectors<R: BufRead>(input: R) -> Result<Vec<TestVector>, BlindSigError> {
    let mut vectors = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|_| BlindSigError::InvalidGroup("unreadable vector file"))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != VECTOR_FIELDS.len() {
            let _ = idx;
            return Err(BlindSigError::InvalidGroup("wrong vector field count"));
        }
        let fields: Result<Vec<BigUint>, _> = parts
            .iter()
            .map(|s| BigUint::from_str_radix(s, 16))
            .collect();
        let fields = fields.map_err(|_| BlindSigError::InvalidGroup("bad hex in vector"))?;
        let message = fields[7].to_bytes_be();
        vectors.push(TestVector { fields, message });
    }
    Ok(vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindsig::{BlindSignature, GroupParams, SignerPublicKey};

    #[test]
    fn exported_vectors_parse_and_verify() {
        let mut buf = Vec::new();
        write_vectors(&mut buf, 64, 3, 7).unwrap();
        let vectors = read_vectors(&buf[..]).unwrap();
        assert_eq!(vectors.len(), 3);
        for v in &vectors {
            let f = &v.fields;
            let params = GroupParams {
                security_bits: 64,
                p: f[1].clone(),
                q: f[2].clone(),
                g: f[3].clone(),
            };
            let public = SignerPublicKey {
                params,
                h: f[4].clone(),
                y: f[5].clone(),
                z: f[6].clone(),
            };
            let sig = BlindSignature {
                zeta: f[18].clone(),
                zeta1: f[19].clone(),
                rho: f[20].clone(),
                varpi: f[21].clone(),
                sigma1: f[22].clone(),
                sigma2: f[23].clone(),
                delta: f[24].clone(),
                mu: f[25].clone(),
            };
            assert!(public.verify(&v.message, &sig));
        }
    }

    #[test]
    fn vector_lines_are_lowercase_hex() {
        let mut buf = Vec::new();
        write_vectors(&mut buf, 64, 1, 9).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let data_line = text.lines().find(|l| !l.starts_with('#')).unwrap();
        assert!(data_line
            .chars()
            .all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase() || c == '\t'));
    }
}
