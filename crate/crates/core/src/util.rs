//! Small shared helpers: seeded RNG streams and the quantile rule.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent RNG for a named stream of a run. Every stochastic
/// stage pulls from its own stream so that adding draws to one stage never
/// shifts another, and resuming at an epoch boundary replays identically.
pub fn stream_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    // FNV-1a over the stream tag, folded with seed and index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Linear-interpolation quantile: with distances sorted ascending and
/// h = (n-1) * q, returns d[floor(h)] + frac(h) * (d[floor(h)+1] - d[floor(h)]).
///
/// For d = 1..=100 and q = 0.99 this yields 99.01; q = 1 yields max(d).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&q), "quantile level outside [0,1]");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Ranks indices by weight descending, ties broken by lower index.
pub fn rank_desc(weights: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}
