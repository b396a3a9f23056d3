//! Per-channel histograms and their overlap.

use ttclab::Matrix;

/// Histogram of `values` over `[lo, hi]` with `bins` equal bins, normalized
/// to sum to one. The right edge belongs to the last bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if values.is_empty() || bins == 0 {
        return h;
    }
    let width = hi - lo;
    for &v in values {
        let b = if width > 0.0 { (((v - lo) / width) * bins as f64).floor() as isize } else { 0 };
        h[b.clamp(0, bins as isize - 1) as usize] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

/// `sum_b min(a_b, b_b)` for normalized histograms: 1 for identical, 0 for disjoint.
pub fn overlap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

/// Histograms of one channel from several feature matrices over their shared range.
#[derive(Debug, Clone)]
pub struct ChannelHistograms {
    pub lo: f64,
    pub hi: f64,
    pub hists: Vec<Vec<f64>>,
}

pub fn channel_histograms(sets: &[&Matrix], channel: usize, bins: usize) -> ChannelHistograms {
    let columns: Vec<Vec<f64>> = sets.iter().map(|m| m.iter_rows().map(|r| r[channel]).collect()).collect();
    let lo = columns.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = columns.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let hists = columns.iter().map(|c| histogram(c, lo, hi, bins)).collect();
    ChannelHistograms { lo, hi, hists }
}
