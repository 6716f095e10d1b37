//! Open-loop arrival schedules: issue times are fixed up front from the
//! seed, never adjusted by response behaviour, so queueing delay is
//! measured instead of masked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArrivalProcess {
    /// The paper's assumption: at integer rate r, r arrivals land uniformly
    /// inside each one-second slot.
    UniformPerSecond,
    /// Poisson arrivals at the same mean rate, for sensitivity analysis.
    Poisson,
}

/// Issue offsets from the run start, sorted ascending.
pub fn build_schedule(
    rate_per_sec: u32,
    duration_secs: u32,
    seed: u64,
    process: ArrivalProcess,
) -> Vec<Duration> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut offsets: Vec<Duration> = match process {
        ArrivalProcess::UniformPerSecond => {
            let mut out = Vec::with_capacity((rate_per_sec * duration_secs) as usize);
            for second in 0..duration_secs {
                for _ in 0..rate_per_sec {
                    let within: f64 = rng.gen_range(0.0..1.0);
                    out.push(Duration::from_secs_f64(second as f64 + within));
                }
            }
            out
        }
        ArrivalProcess::Poisson => {
            let mut out = Vec::new();
            let mut t = 0.0f64;
            let horizon = duration_secs as f64;
            loop {
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                t += -u.ln() / rate_per_sec as f64;
                if t >= horizon {
                    break;
                }
                out.push(Duration::from_secs_f64(t));
            }
            out
        }
    };
    offsets.sort();
    offsets
}
