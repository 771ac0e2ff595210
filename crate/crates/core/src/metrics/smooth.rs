/// Gaussian smoothing with a reflective boundary (`d c b a | a b c d | d c b a`).
/// The kernel is truncated at `ceil(4 sigma)` and normalized to sum 1.
pub fn smooth(series: &[f64], sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) || series.len() < 2 {
        return series.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= total);

    let n = series.len() as i64;
    let reflect = |mut i: i64| {
        let period = 2 * n;
        i = i.rem_euclid(period);
        if i >= n {
            period - 1 - i
        } else {
            i
        }
    };
    (0..n)
        .map(|i| {
            kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(w, k)| w * series[reflect(i + k) as usize])
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let xs = vec![1.0, 5.0, -2.0, 3.5];
        assert_eq!(smooth(&xs, 0.0), xs);
    }

    #[test]
    fn constant_is_unchanged() {
        let xs = vec![7.25; 13];
        for sigma in [0.5, 2.0, 10.0] {
            for v in smooth(&xs, sigma) {
                assert!((v - 7.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_becomes_symmetric_bell() {
        let mut xs = vec![0.0; 41];
        xs[20] = 1.0;
        let ys = smooth(&xs, 2.5);
        assert_eq!(ys.len(), xs.len());
        assert!((ys.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for k in 1..=20 {
            assert!((ys[20 - k] - ys[20 + k]).abs() < 1e-15);
            assert!(ys[20 + k] <= ys[20 + k - 1]);
        }
    }

    #[test]
    fn reflective_edges() {
        // reflect keeps the mean of a ramp's endpoints pulled inward
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let ys = smooth(&xs, 1.0);
        assert!(ys[0] > 0.0 && ys[9] < 9.0);
        // kernel wider than the series
        let ys = smooth(&[1.0, 2.0, 3.0], 5.0);
        assert!((ys.iter().sum::<f64>() - 6.0).abs() < 1e-9);
    }
}
