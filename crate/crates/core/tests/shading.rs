mod common;

use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::Rng;

use common::rng;
use splatrefine::gaussians::{covariance, Gaussian};
use splatrefine::shading::{gaussian_density, sh_basis, sh_color, sh_color_unclamped, ViewDirection};

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Associated Legendre `P_l^m(x)` with the Condon-Shortley phase, by the
/// standard three-term recurrence.
fn legendre(l: usize, m: usize, x: f64) -> f64 {
    let mut pmm = 1.0;
    if m > 0 {
        let s = (1.0 - x * x).sqrt();
        let mut f = 1.0;
        for _ in 0..m {
            pmm *= -f * s;
            f += 2.0;
        }
    }
    if l == m {
        return pmm;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pm1;
    }
    let mut prev = pmm;
    for ll in m + 2..=l {
        let next = ((2 * ll - 1) as f64 * x * pm1 - (ll + m - 1) as f64 * prev) / (ll - m) as f64;
        prev = pm1;
        pm1 = next;
    }
    pm1
}

/// Real SH from spherical angles, ordered by band then `m = -l..=l`.
fn oracle_basis(v: [f64; 3], degree: usize) -> Vec<f64> {
    let theta = v[2].clamp(-1.0, 1.0).acos();
    let phi = v[1].atan2(v[0]);
    let mut out = Vec::new();
    for l in 0..=degree {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial(l - am) / factorial(l + am)).sqrt();
            let p = legendre(l, am, theta.cos());
            out.push(match m.signum() {
                0 => k * p,
                1 => std::f64::consts::SQRT_2 * k * (m as f64 * phi).cos() * p,
                _ => std::f64::consts::SQRT_2 * k * (am as f64 * phi).sin() * p,
            });
        }
    }
    out
}

fn random_dir(r: &mut impl Rng) -> ViewDirection {
    loop {
        let v: [f64; 3] = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n < 1.0 {
            return ViewDirection::new(v).unwrap();
        }
    }
}

fn random_gaussian(r: &mut impl Rng, degree: usize) -> Gaussian {
    let mut g = Gaussian::new(
        [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
        [r.random_range(-2.0..0.5), r.random_range(-2.0..0.5), r.random_range(-2.0..0.5)],
        0.0,
        [0.0; 3],
        degree,
    );
    for c in g.sh_coeffs.iter_mut() {
        *c = r.random_range(-1.0..1.0);
    }
    g.rotation = [
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
    ];
    g
}

#[test]
fn basis_matches_legendre_recurrence() {
    let mut r = rng(1);
    for _ in 0..500 {
        let v = random_dir(&mut r);
        let got = sh_basis(&v, 3).unwrap();
        let want = oracle_basis(v.as_array(), 3);
        for (k, (a, b)) in got.iter().zip(&want).enumerate() {
            assert!((a - b).abs() < 1e-10, "coefficient {k}: {a} vs {b}");
        }
        let (sa, sb): (f64, f64) = (got.iter().map(|x| x * x).sum(), want.iter().map(|x| x * x).sum());
        assert!((sa - sb).abs() < 1e-10);
        // Addition theorem: each band sums to (2l+1)/4π.
        assert!((sa - 16.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-10);
    }
}

#[test]
fn basis_has_band_parity() {
    let mut r = rng(2);
    for _ in 0..200 {
        let v = random_dir(&mut r);
        let a = v.as_array();
        let neg = ViewDirection::new([-a[0], -a[1], -a[2]]).unwrap();
        let (p, q) = (sh_basis(&v, 3).unwrap(), sh_basis(&neg, 3).unwrap());
        for l in 0..4usize {
            for k in l * l..(l + 1) * (l + 1) {
                let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
                assert!((q[k] - sign * p[k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn colour_matches_term_by_term_sum() {
    let mut r = rng(3);
    for degree in 0..4 {
        for _ in 0..100 {
            let g = random_gaussian(&mut r, degree);
            let v = random_dir(&mut r);
            let basis = oracle_basis(v.as_array(), degree);
            let got = sh_color(&g, &v).unwrap();
            for ch in 0..3 {
                let mut c = 0.0;
                for (k, y) in basis.iter().enumerate() {
                    c += g.sh_coeffs[if k == 0 { ch } else { 3 + ch * (basis.len() - 1) + (k - 1) }] as f64 * y;
                }
                assert!((got[ch] - (c + 0.5).clamp(0.0, 1.0)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn density_matches_explicit_inverse() {
    let mut r = rng(4);
    for _ in 0..300 {
        let g = random_gaussian(&mut r, 0);
        let sigma = covariance(&g).unwrap();
        let m = Matrix3::from_fn(|i, j| sigma[i][j]);
        let inv = m.try_inverse().unwrap();
        let mu = Vector3::from(g.position.map(|c| c as f64));
        let x = mu + Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let d = x - mu;
        let want = (-0.5 * (d.transpose() * inv * d)[0]).exp();
        let got = gaussian_density(&g, [x[0], x[1], x[2]]).unwrap();
        assert!((got - want).abs() < 1e-9 * want.max(1e-300) + 1e-300, "{got} vs {want}");
        assert!(got <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn colour_is_linear_before_clamp(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let g1 = random_gaussian(&mut r, 3);
        let g2 = random_gaussian(&mut r, 3);
        let v = random_dir(&mut r);
        let mut mix = g1.clone();
        for (k, c) in mix.sh_coeffs.iter_mut().enumerate() {
            *c = (a * g1.sh_coeffs[k] as f64 + b * g2.sh_coeffs[k] as f64) as f32;
        }
        let (c1, c2, cm) = (
            sh_color_unclamped(&g1, &v).unwrap(),
            sh_color_unclamped(&g2, &v).unwrap(),
            sh_color_unclamped(&mix, &v).unwrap(),
        );
        for ch in 0..3 {
            prop_assert!((cm[ch] - (a * c1[ch] + b * c2[ch])).abs() < 1e-5);
        }
    }

    /// Quarter turns about the axes compose exactly with dyadic f32
    /// parameters, so the stored Gaussian carries no rounding.
    #[test]
    fn density_is_rotation_equivariant(seed in 0u64..10_000, turns in prop::collection::vec(0usize..3, 1..4)) {
        let mut r = rng(seed);
        let dy = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(-16i32..=16) as f32 / 8.0;
        let mut g = Gaussian::new([dy(&mut r), dy(&mut r), dy(&mut r)], [dy(&mut r) / 4.0, dy(&mut r) / 4.0, dy(&mut r) / 4.0], 0.0, [0.0; 3], 0);
        g.rotation = [dy(&mut r), dy(&mut r), dy(&mut r), dy(&mut r)];
        prop_assume!(g.rotation.iter().any(|&c| c != 0.0));
        let mut x = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let before = gaussian_density(&g, x).unwrap();
        let mut h = g.clone();
        for axis in turns {
            let turn = |p: [f64; 3]| match axis {
                0 => [p[0], -p[2], p[1]],
                1 => [p[2], p[1], -p[0]],
                _ => [-p[1], p[0], p[2]],
            };
            let mut qr = [1.0f64, 0.0, 0.0, 0.0];
            qr[axis + 1] = 1.0;
            let q = h.rotation.map(|c| c as f64);
            let prod = [
                qr[0] * q[0] - qr[1] * q[1] - qr[2] * q[2] - qr[3] * q[3],
                qr[0] * q[1] + qr[1] * q[0] + qr[2] * q[3] - qr[3] * q[2],
                qr[0] * q[2] - qr[1] * q[3] + qr[2] * q[0] + qr[3] * q[1],
                qr[0] * q[3] + qr[1] * q[2] - qr[2] * q[1] + qr[3] * q[0],
            ];
            h.rotation = prod.map(|c| c as f32);
            h.position = turn(h.position.map(|c| c as f64)).map(|c| c as f32);
            x = turn(x);
        }
        let after = gaussian_density(&h, x).unwrap();
        prop_assert!((before - after).abs() <= 1e-9 * before.max(1e-300), "{} vs {}", before, after);
    }
}
