//! Bessel functions and J0 zeros for the radial transform.

use std::f64::consts::PI;

pub fn j0(x: f64) -> f64 {
    puruspe::Jn(0, x)
}

pub fn j1(x: f64) -> f64 {
    puruspe::Jn(1, x)
}

/// First `n` positive zeros of J0, refined by Newton iteration from McMahon's expansion.
pub fn j0_zeros(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|s| {
            let beta = (s as f64 - 0.25) * PI;
            let b8 = 8.0 * beta;
            let mut x = beta + 1.0 / b8 - 124.0 / (3.0 * b8.powi(3)) + 120_928.0 / (15.0 * b8.powi(5));
            for _ in 0..50 {
                let dx = j0(x) / j1(x);
                x += dx;
                if dx.abs() <= 1e-15 * x {
                    break;
                }
            }
            x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tabulated_zeros() {
        let z = j0_zeros(5);
        let table = [
            2.404_825_557_695_773,
            5.520_078_110_286_311,
            8.653_727_912_911_013,
            11.791_534_439_014_281,
            14.930_917_708_487_787,
        ];
        for (a, b) in z.iter().zip(table) {
            assert_relative_eq!(*a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn zeros_are_roots_and_ordered() {
        let z = j0_zeros(600);
        for w in z.windows(2) {
            assert!(w[1] - w[0] > 3.0 && w[1] - w[0] < 3.3);
        }
        for x in z {
            assert!(j0(x).abs() < 1e-13, "J0({x}) = {}", j0(x));
        }
    }
}
