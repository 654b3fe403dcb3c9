//! Two-pass statistics and slot-histogram measures.

/// Two-pass mean and biased variance.
pub fn two_pass_mean_var(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "statistics of an empty slice");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Per-channel two-pass mean and biased variance of a row-major
/// `B x C x H x W` buffer, reducing over batch and spatial axes.
pub fn channel_stats(
    x: &[f64],
    dims: (usize, usize, usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let (b, c, h, w) = dims;
    assert_eq!(x.len(), b * c * h * w);
    let plane = h * w;
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ci in 0..c {
        let mut values = Vec::with_capacity(b * plane);
        for bi in 0..b {
            let base = (bi * c + ci) * plane;
            values.extend_from_slice(&x[base..base + plane]);
        }
        let (m, v) = two_pass_mean_var(&values);
        means.push(m);
        vars.push(v);
    }
    (means, vars)
}

/// Normalized class-frequency histograms, one per slot.
pub fn slot_histograms(slots: &[Vec<usize>], num_classes: usize) -> Vec<Vec<f64>> {
    slots
        .iter()
        .map(|labels| {
            let mut counts = vec![0.0f64; num_classes];
            for l in labels {
                counts[*l] += 1.0;
            }
            let total: f64 = counts.iter().sum();
            if total > 0.0 {
                for c in counts.iter_mut() {
                    *c /= total;
                }
            }
            counts
        })
        .collect()
}

/// Shannon entropy of a normalized histogram divided by `ln(num_classes)`,
/// so a uniform class mix scores 1 and a single-class slot scores 0.
pub fn normalized_class_entropy(histogram: &[f64]) -> f64 {
    let c = histogram.len();
    if c <= 1 {
        return 0.0;
    }
    let mut e = 0.0f64;
    for &p in histogram {
        if p > 0.0 {
            e -= p * p.ln();
        }
    }
    e / (c as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pass_matches_hand_values() {
        let (m, v) = two_pass_mean_var(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn histogram_normalizes() {
        let h = slot_histograms(&[vec![0, 0, 1, 2]], 3);
        assert_eq!(h[0], vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn entropy_extremes() {
        assert_eq!(normalized_class_entropy(&[1.0, 0.0]), 0.0);
        assert!((normalized_class_entropy(&[0.25; 4]) - 1.0).abs() < 1e-12);
    }
}
