//! Prediction error normalized by the range of the true values.

/// RMSE divided by `max - min` of `truth`. `None` for empty input,
/// mismatched lengths or a constant truth.
pub fn nrmse(pred: &[f64], truth: &[f64]) -> Option<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return None;
    }
    let (lo, hi) = truth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
            (lo.min(t), hi.max(t))
        });
    let range = hi - lo;
    if range <= 0.0 {
        return None;
    }
    Some(rmse(pred, truth) / range)
}

fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    (sse / pred.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandError {
    /// Inclusive lower edge of the band, same unit as the truth.
    pub lo: f64,
    pub count: usize,
    pub nrmse: f64,
}

/// Per-band errors over `floor(truth / band)` buckets, normalized by the
/// global truth range. Empty bands are omitted.
pub fn nrmse_by_band(pred: &[f64], truth: &[f64], band: f64) -> Vec<BandError> {
    let Some(_) = nrmse(pred, truth) else {
        return Vec::new();
    };
    let lo = truth.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut buckets: std::collections::BTreeMap<i64, (Vec<f64>, Vec<f64>)> = Default::default();
    for (&p, &t) in pred.iter().zip(truth) {
        let b = buckets.entry((t / band).floor() as i64).or_default();
        b.0.push(p);
        b.1.push(t);
    }
    buckets
        .into_iter()
        .map(|(k, (p, t))| BandError {
            lo: k as f64 * band,
            count: p.len(),
            nrmse: rmse(&p, &t) / range,
        })
        .collect()
}
