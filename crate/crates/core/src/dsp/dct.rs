//! Orthonormal DCT-II and its inverse (DCT-III).
//!
//! With the orthonormal scaling, truncating a coefficient vector is an
//! orthogonal projection, so inverting a truncated vector (zero-filling the
//! missing coefficients) is well defined.

use std::f64::consts::PI;

/// Orthonormal DCT-II: `c[k] = s_k * sum_n v[n] cos(pi (2n+1) k / 2N)` with
/// `s_0 = sqrt(1/N)` and `s_k = sqrt(2/N)` otherwise.
pub fn dct2_ortho(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    assert!(n >= 1, "dct of empty vector");
    let nf = n as f64;
    let s0 = (1.0 / nf).sqrt();
    let sk = (2.0 / nf).sqrt();
    (0..n)
        .map(|k| {
            let scale = if k == 0 { s0 } else { sk };
            let sum: f64 = v
                .iter()
                .enumerate()
                .map(|(i, &x)| x * (PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * nf)).cos())
                .sum();
            scale * sum
        })
        .collect()
}

/// Inverse of [`dct2_ortho`] producing `n` samples. A coefficient vector
/// shorter than `n` is implicitly zero-filled before inversion.
pub fn idct(c: &[f64], n: usize) -> Vec<f64> {
    assert!(n >= 1, "idct to empty vector");
    assert!(c.len() <= n, "coefficient vector longer ({}) than output ({})", c.len(), n);
    let nf = n as f64;
    let s0 = (1.0 / nf).sqrt();
    let sk = (2.0 / nf).sqrt();
    (0..n)
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(k, &ck)| {
                    let scale = if k == 0 { s0 } else { sk };
                    scale * ck * (PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * nf)).cos()
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Naive O(n^2) orthonormal DCT-II straight from the definition, kept
    /// separate from the implementation above so round-trip tests have an
    /// independent reference.
    fn naive_dct(v: &[f64]) -> Vec<f64> {
        let n = v.len() as f64;
        (0..v.len())
            .map(|k| {
                let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                let mut acc = 0.0;
                for (i, &x) in v.iter().enumerate() {
                    acc += x * (PI / n * (i as f64 + 0.5) * k as f64).cos();
                }
                scale * acc
            })
            .collect()
    }

    #[test]
    fn constant_vector() {
        let c = dct2_ortho(&[1.0, 1.0, 1.0, 1.0]);
        assert!((c[0] - 2.0).abs() < 1e-12);
        for &x in &c[1..] {
            assert!(x.abs() < 1e-12);
        }
        let v = idct(&[2.0, 0.0, 0.0, 0.0], 4);
        for &x in &v {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_against_naive_oracle() {
        // fixed pseudo-random length-13 vector
        let mut rng = crate::rng::seeded(42);
        let v: Vec<f64> = (0..13).map(|_| crate::rng::uniform_in(&mut rng, -2.0, 2.0)).collect();
        let c = dct2_ortho(&v);
        let c_naive = naive_dct(&v);
        for (a, b) in c.iter().zip(&c_naive) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = idct(&c, 13);
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_fill_matches_explicit_zeros() {
        let c = [1.5, -0.5, 0.25];
        let short = idct(&c, 8);
        let mut padded = c.to_vec();
        padded.resize(8, 0.0);
        let long = idct(&padded, 8);
        for (a, b) in short.iter().zip(&long) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn isometry(v in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
            let c = dct2_ortho(&v);
            let n_v: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n_c: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n_v - n_c).abs() < 1e-9 * (1.0 + n_v));
        }

        #[test]
        fn round_trip(v in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
            let back = idct(&dct2_ortho(&v), v.len());
            for (a, b) in back.iter().zip(&v) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
