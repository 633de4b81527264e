//! Result scoring.

/// Geometric mean of the mean entity similarity (each clamped to `[0, 1]`)
/// and the minimum triple confidence. Either list empty scores 0.
pub fn score_result(entity_similarities: &[f64], triple_confidences: &[f64]) -> f64 {
    if entity_similarities.is_empty() || triple_confidences.is_empty() {
        return 0.0;
    }
    let clamp = |x: f64| if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    let mean = entity_similarities.iter().map(|s| clamp(*s)).sum::<f64>() / entity_similarities.len() as f64;
    let min = triple_confidences.iter().map(|c| clamp(*c)).fold(1.0, f64::min);
    (mean * min).sqrt()
}
