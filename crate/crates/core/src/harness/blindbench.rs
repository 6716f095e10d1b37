//! In-process timing of the full blind-sign exchange (challenge, blind,
//! respond, unblind with its final check) across group sizes. No
//! networking; this isolates the cryptographic cost.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blindsig::{generate_group, SignerKeyPair, UserBlindingSession, MIN_GROUP_BITS};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlindSignSample {
    pub group_bits: u32,
    pub iterations: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("iterations must be at least 1")]
    ZeroIterations,
    #[error("group size {0} below the {MIN_GROUP_BITS}-bit minimum")]
    SizeTooSmall(u32),
    #[error("at least one group size is required")]
    NoSizes,
}

/// Time `iterations` full sign/unblind flows per group size.
pub fn bench_blindsign(
    sizes: &[u32],
    iterations: usize,
    seed: u64,
) -> Result<Vec<BlindSignSample>, BenchError> {
    if iterations == 0 {
        return Err(BenchError::ZeroIterations);
    }
    if sizes.is_empty() {
        return Err(BenchError::NoSizes);
    }
    if let Some(bad) = sizes.iter().find(|s| **s < MIN_GROUP_BITS) {
        return Err(BenchError::SizeTooSmall(*bad));
    }
    let mut out = Vec::with_capacity(sizes.len());
    for &bits in sizes {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ u64::from(bits));
        let params = generate_group(bits, &mut rng).expect("size checked above");
        let key = SignerKeyPair::generate(&params, &mut rng);
        let message = b"bench-message";
        // One untimed warm-up settles allocator and cache effects.
        run_once(&key, message, &mut rng);
        let mut total_ms = 0.0f64;
        let mut min_ms = f64::INFINITY;
        let mut max_ms = 0.0f64;
        for _ in 0..iterations {
            let start = Instant::now();
            run_once(&key, message, &mut rng);
            let ms = start.elapsed().as_secs_f64() * 1e3;
            total_ms += ms;
            min_ms = min_ms.min(ms);
            max_ms = max_ms.max(ms);
        }
        out.push(BlindSignSample {
            group_bits: bits,
            iterations,
            mean_ms: total_ms / iterations as f64,
            min_ms,
            max_ms,
        });
    }
    Ok(out)
}

fn run_once(key: &SignerKeyPair, message: &[u8], rng: &mut ChaCha20Rng) {
    let (mut session, challenge) = key.initial_challenge(rng);
    let (user, e) = UserBlindingSession::initiate(key.public(), message, &challenge, rng)
        .expect("honest challenge");
    let proof = key.respond(&mut session, &e).expect("fresh session");
    let sig = user.unblind(key.public(), &proof).expect("honest proof");
    std::hint::black_box(sig);
}

/// Plot-ready "x mean" rows, one per group size.
pub fn plot_rows(samples: &[BlindSignSample]) -> String {
    let mut out = String::from("x mean\n");
    for s in samples {
        out.push_str(&format!("{} {:.4}\n", s.group_bits, s.mean_ms));
    }
    out
}
