//! Exact propagator of the per-node 3×3 block: real diagonal energies with
//! equal real nearest-neighbour couplings.

use crate::grid::C64;

/// Eigenvalues (ascending) of the symmetric tridiagonal matrix
/// [[d0, c, 0], [c, d1, c], [0, c, d2]].
#[inline]
fn eigenvalues(d: [f64; 3], c: f64) -> [f64; 3] {
    let q = (d[0] + d[1] + d[2]) / 3.0;
    let a = [d[0] - q, d[1] - q, d[2] - q];
    let p2 = a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + 4.0 * c * c;
    if p2 == 0.0 {
        return [q; 3];
    }
    let p = (p2 / 6.0).sqrt();
    // det(B) of B = (A − qI)/p.
    let det = (a[0] * (a[1] * a[2] - c * c) - c * c * a[2]) / (p * p * p);
    let r = (0.5 * det).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l_max = q + 2.0 * p * phi.cos();
    let l_min = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
    let l_mid = 3.0 * q - l_max - l_min;
    // The closed form loses √ε relative accuracy for a close pair far from
    // the third root; Newton steps on det(A − λI) restore it.
    [l_min, l_mid, l_max].map(|l| polish(d, c, l))
}

#[inline]
fn char_poly(d: [f64; 3], c: f64, l: f64) -> (f64, f64) {
    let (a, b, e) = (d[0] - l, d[1] - l, d[2] - l);
    let c2 = c * c;
    let p = a * (b * e - c2) - c2 * e;
    let dp = -(b * e - c2) - a * (b + e) + c2;
    (p, dp)
}

#[inline]
fn polish(d: [f64; 3], c: f64, mut l: f64) -> f64 {
    let (mut p, _) = char_poly(d, c, l);
    for _ in 0..3 {
        let (_, dp) = char_poly(d, c, l);
        if dp == 0.0 || p == 0.0 {
            break;
        }
        let next = l - p / dp;
        let (pn, _) = char_poly(d, c, next);
        if pn.abs() >= p.abs() {
            break;
        }
        l = next;
        p = pn;
    }
    l
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Null vector of (A − λI) from the best-conditioned row cross product.
#[inline]
fn eigenvector(d: [f64; 3], c: f64, l: f64) -> [f64; 3] {
    let r0 = [d[0] - l, c, 0.0];
    let r1 = [c, d[1] - l, c];
    let r2 = [0.0, c, d[2] - l];
    let cands = [cross(r0, r1), cross(r0, r2), cross(r1, r2)];
    let mut best = cands[0];
    let mut bn = dot(best, best);
    for v in &cands[1..] {
        let n = dot(*v, *v);
        if n > bn {
            best = *v;
            bn = n;
        }
    }
    if bn == 0.0 {
        return [0.0; 3];
    }
    let s = 1.0 / bn.sqrt();
    best.map(|x| x * s)
}

fn unit(i: usize) -> [f64; 3] {
    let mut e = [0.0; 3];
    e[i] = 1.0;
    e
}

/// Orthonormal eigenbasis (columns) and eigenvalues.
#[inline]
pub fn eigensystem(d: [f64; 3], c: f64) -> ([f64; 3], [[f64; 3]; 3]) {
    if c == 0.0 {
        return (d, [unit(0), unit(1), unit(2)]);
    }
    let l = eigenvalues(d, c);
    // The extreme eigenvalues are the best separated; the middle vector
    // follows by orthogonality.
    let v0 = eigenvector(d, c, l[0]);
    let mut v2 = eigenvector(d, c, l[2]);
    let proj = dot(v0, v2);
    v2 = [v2[0] - proj * v0[0], v2[1] - proj * v0[1], v2[2] - proj * v0[2]];
    let n2 = dot(v2, v2).sqrt();
    v2 = v2.map(|x| x / n2);
    let v1 = cross(v2, v0);
    (l, [v0, v1, v2])
}

/// ψ ← exp(−i·A·τ)ψ with A the tridiagonal block in rad/s.
#[inline]
pub fn apply(d: [f64; 3], c: f64, tau: f64, psi: &mut [C64; 3]) {
    if c == 0.0 {
        for (p, e) in psi.iter_mut().zip(d) {
            *p *= C64::from_polar(1.0, -e * tau);
        }
        return;
    }
    let (l, v) = eigensystem(d, c);
    let mut out = [C64::new(0.0, 0.0); 3];
    for k in 0..3 {
        let proj = psi[0] * v[k][0] + psi[1] * v[k][1] + psi[2] * v[k][2];
        let w = proj * C64::from_polar(1.0, -l[k] * tau);
        for (o, vk) in out.iter_mut().zip(v[k]) {
            *o += w * vk;
        }
    }
    *psi = out;
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    fn reference(d: [f64; 3], c: f64, tau: f64, psi: [C64; 3]) -> [C64; 3] {
        let a = Matrix3::new(d[0], c, 0.0, c, d[1], c, 0.0, c, d[2]).map(|x| C64::new(0.0, -x * tau));
        let u = a.exp();
        let v = nalgebra::Vector3::new(psi[0], psi[1], psi[2]);
        let r = u * v;
        [r[0], r[1], r[2]]
    }

    #[test]
    fn resonant_two_level_limit() {
        // Third level far detuned: populations follow sin²(Ωt/2) for c = Ω/2.
        let omega = 2.0 * std::f64::consts::PI * 90.0;
        for t in [0.0, 1e-3, 3.3e-3, 5.55e-3] {
            let mut psi = [C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)];
            apply([0.0, 0.0, 1e9], omega / 2.0, t, &mut psi);
            assert!((psi[1].norm_sqr() - (omega * t / 2.0).sin().powi(2)).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_outer_levels() {
        let (l, v) = eigensystem([0.0, 5e3, 0.0], 40.0);
        for k in 0..3 {
            for j in 0..3 {
                let e = dot(v[k], v[j]);
                assert!((e - if j == k { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!(l[0] < l[1] && l[1] < l[2]);
    }

    proptest! {
        #[test]
        fn matches_matrix_exponential(
            d0 in -2e4f64..2e4, d1 in -2e4f64..2e4, d2 in -2e4f64..2e4,
            c in 0.0f64..2e3, tau in 0.0f64..1e-4,
            a in -1.0f64..1.0, b in -1.0f64..1.0, e in -1.0f64..1.0,
        ) {
            let psi = [C64::new(a, b), C64::new(b, e), C64::new(e, a)];
            let mut got = psi;
            apply([d0, d1, d2], c, tau, &mut got);
            let want = reference([d0, d1, d2], c, tau, psi);
            let n0: f64 = psi.iter().map(|x| x.norm_sqr()).sum();
            let n1: f64 = got.iter().map(|x| x.norm_sqr()).sum();
            prop_assert!((n1 - n0).abs() <= 1e-12 * n0.max(1e-300));
            for k in 0..3 {
                prop_assert!((got[k] - want[k]).norm() < 1e-9 * n0.sqrt().max(1e-300));
            }
        }
    }
}
