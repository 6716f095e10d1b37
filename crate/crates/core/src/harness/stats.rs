//! Response-time statistics: nearest-rank percentiles, population standard
//! deviation, and Pearson's median skewness, computed over successful
//! requests only.

use serde::{Deserialize, Serialize};

/// Summary over the successful latencies of one scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub min_ms: f64,
    pub p25_ms: f64,
    pub p50_ms: f64,
    pub p75_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    /// Pearson's median skewness 3*(mean - median)/sigma; 0 when sigma = 0.
    pub pearson_skew: f64,
}

/// Nearest-rank percentile over a sorted slice: the element at 1-based rank
/// ceil(p/100 * n).
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len() as f64;
    let rank = (percentile / 100.0 * n).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// None when there are no successful records; failure accounting is carried
/// separately by the caller.
pub fn summarize(latencies_ms: &[f64]) -> Option<LatencySummary> {
    if latencies_ms.is_empty() {
        return None;
    }
    let mut sorted = latencies_ms.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("latencies are finite"));
    let count = sorted.len();

    // Welford's online mean/variance; the acceptance oracle recomputes both
    // with the naive two-pass formulas.
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for (i, x) in sorted.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i as f64 + 1.0);
        m2 += delta * (x - mean);
    }
    let variance = m2 / count as f64;
    let stddev = variance.sqrt();
    let median = nearest_rank(&sorted, 50.0);
    let pearson_skew = if stddev == 0.0 {
        0.0
    } else {
        3.0 * (mean - median) / stddev
    };
    Some(LatencySummary {
        count,
        min_ms: sorted[0],
        p25_ms: nearest_rank(&sorted, 25.0),
        p50_ms: median,
        p75_ms: nearest_rank(&sorted, 75.0),
        p95_ms: nearest_rank(&sorted, 95.0),
        p99_ms: nearest_rank(&sorted, 99.0),
        max_ms: sorted[count - 1],
        mean_ms: mean,
        stddev_ms: stddev,
        pearson_skew,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_on_odd_count() {
        let vals = [1.0, 2.0, 3.0, 4.0, 5.0];
        let s = summarize(&vals).unwrap();
        assert_eq!(s.p50_ms, 3.0);
        assert_eq!(s.min_ms, 1.0);
        assert_eq!(s.max_ms, 5.0);
        assert_eq!(s.p25_ms, 2.0); // ceil(0.25*5)=2nd
        assert_eq!(s.p99_ms, 5.0);
    }

    #[test]
    fn constant_records_have_zero_spread_and_zero_skew() {
        let s = summarize(&[7.0; 40]).unwrap();
        assert_eq!(s.stddev_ms, 0.0);
        assert_eq!(s.pearson_skew, 0.0);
        assert_eq!(s.p95_ms, 7.0);
    }

    #[test]
    fn symmetric_sample_has_zero_skew() {
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.p50_ms, 2.0);
        assert!((s.mean_ms - 2.0).abs() < 1e-12);
        assert!(s.pearson_skew.abs() < 1e-12);
    }

    #[test]
    fn empty_input_yields_none() {
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn matches_naive_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        let records: Vec<f64> = (0..5000).map(|_| rng.gen_range(0.1..2000.0)).collect();
        let s = summarize(&records).unwrap();

        // Naive oracle: sort + index, two-pass sigma.
        let mut sorted = records.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pick = |p: f64| sorted[((p / 100.0 * sorted.len() as f64).ceil() as usize) - 1];
        assert_eq!(s.p25_ms, pick(25.0));
        assert_eq!(s.p50_ms, pick(50.0));
        assert_eq!(s.p75_ms, pick(75.0));
        assert_eq!(s.p95_ms, pick(95.0));
        assert_eq!(s.p99_ms, pick(99.0));
        let mean: f64 = records.iter().sum::<f64>() / records.len() as f64;
        let var: f64 =
            records.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / records.len() as f64;
        assert!((s.mean_ms - mean).abs() / mean < 1e-12);
        assert!((s.stddev_ms - var.sqrt()).abs() / var.sqrt() < 1e-9);
        let skew = 3.0 * (mean - pick(50.0)) / var.sqrt();
        assert!((s.pearson_skew - skew).abs() <= 1e-9 * skew.abs().max(1.0));
    }
}
