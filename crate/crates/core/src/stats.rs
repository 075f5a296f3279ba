//! Quantiles and seeded random substreams shared by the bootstrap routines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for `(seed, stream)`. Results for one stream never
/// depend on how many other streams were drawn or in what order.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for a `(namespace, index)` pair, e.g. `(year, bootstrap index)`.
pub fn stream_id(namespace: i64, index: u64) -> u64 {
    ((namespace as u64) << 32) ^ index
}

/// Linearly interpolated quantile of already sorted values (the "type 7"
/// definition used by numpy's default).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let q = q.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}
