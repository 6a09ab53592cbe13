mod common;

use std::f64::consts::PI;
use std::sync::OnceLock;

use common::{random_coeffs, rng};
use hmra2d::basis::{build_basis, BasisSpec};
use hmra2d::bessel::{bessel_j, bessel_j_first_zeros};
use hmra2d::coeffs::{rotate_coefficients, Coefficients};
use hmra2d::image::{rotate_image, Image};
use hmra2d::observation::generate_phantoms;
use num_complex::Complex64;
use proptest::prelude::*;

/// Bessel's integral, trapezoid rule over a full period (spectrally accurate).
fn bessel_integral(n: u32, x: f64) -> f64 {
    let m = 512;
    let h = PI / m as f64;
    let f = |t: f64| (n as f64 * t - x * t.sin()).cos();
    let inner: f64 = (1..m).map(|i| f(i as f64 * h)).sum();
    (inner + 0.5 * (f(0.0) + f(PI))) * h / PI
}

fn bisect(n: u32, mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = bessel_integral(n, lo);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        let fm = bessel_integral(n, mid);
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn first_roots_match_reference_values() {
    assert!((bessel_j_first_zeros(0, 1)[0] - 2.404825557695773).abs() <= 1e-12);
    assert!((bessel_j_first_zeros(1, 1)[0] - 3.831705970207512).abs() <= 1e-12);
    let b = build_basis(65, 0.5).unwrap();
    assert!((b.roots(0)[0] - 2.404825557695773).abs() <= 1e-12);
    assert!((b.roots(1)[0] - 3.831705970207512).abs() <= 1e-12);
}

#[test]
fn roots_agree_with_integral_oracle() {
    for n in [0u32, 1, 2, 5, 11, 24] {
        let zs = bessel_j_first_zeros(n, 6);
        for (i, &z) in zs.iter().enumerate() {
            assert!(bessel_integral(n, z).abs() <= 1e-12, "J_{n}({z})");
            let r = bisect(n, z - 0.3, z + 0.3);
            assert!((r - z).abs() <= 1e-11, "root {i} of J_{n}: {z} vs {r}");
            assert!((bessel_j(n, z - 0.7) - bessel_integral(n, z - 0.7)).abs() <= 1e-12);
        }
        assert!(zs.windows(2).all(|w| w[0] < w[1]));
    }
}

fn basis65() -> &'static BasisSpec {
    static B: OnceLock<BasisSpec> = OnceLock::new();
    B.get_or_init(|| build_basis(65, 0.5).unwrap())
}

fn unit(b: &BasisSpec, k: usize, q: usize) -> Coefficients {
    let mut c = Coefficients::zeros(b.layout().clone());
    c.block_mut(k)[q] = Complex64::new(1.0, 0.0);
    c
}

#[test]
fn sampled_basis_function_expands_to_itself() {
    let b = basis65();
    let a = b.expand(&b.synthesize(&unit(b, 0, 0)).unwrap()).unwrap();
    assert!((a.block(0)[0].norm() - 1.0).abs() <= 0.05);
    for (j, v) in a.values().iter().enumerate().skip(1) {
        assert!(v.norm() <= 0.05, "coefficient {j}: {v}");
    }
}

#[test]
fn truncation_keeps_exactly_the_roots_below_the_cut() {
    let b = basis65();
    let cut = 2.0 * PI * 32.0 * 0.5;
    for k in 0..b.layout().frequencies() {
        let all = bessel_j_first_zeros(k as u32, b.roots(k).len() + 1);
        assert!(b.roots(k).iter().all(|&r| r <= cut));
        assert!(all[b.roots(k).len()] > cut);
    }
    // frequencies stop at the first k without a root below the cut, or at k = 2c
    let next = b.layout().frequencies();
    assert!(next == 65 || bessel_j_first_zeros(next as u32, 1)[0] > cut);
}

#[test]
fn expansion_is_linear_and_round_trips() {
    let b = basis65();
    let ph = generate_phantoms(2, 65, 3).unwrap();
    let (alpha, beta) = (0.7, -1.3);
    let mix = ph[0]
        .add_scaled(&ph[1], beta / alpha)
        .unwrap()
        .scaled(alpha);
    let lhs = b.expand(&mix).unwrap();
    let e0 = b.expand(&ph[0]).unwrap();
    let e1 = b.expand(&ph[1]).unwrap();
    let scale = lhs.image_energy().sqrt();
    for ((l, x), y) in lhs.values().iter().zip(e0.values()).zip(e1.values()) {
        assert!((l - (alpha * x + beta * y)).norm() <= 1e-10 * scale);
    }

    let mut r = rng(12);
    let a = random_coeffs(b.layout(), &mut r);
    let back = b.expand(&b.synthesize(&a).unwrap()).unwrap();
    let err = back.sub(&a).unwrap().image_energy().sqrt() / a.image_energy().sqrt();
    assert!(err <= 1e-6, "round trip {err}");
}

#[test]
fn frame_is_nearly_tight_on_phantoms() {
    let b = basis65();
    for im in generate_phantoms(4, 65, 21).unwrap() {
        let a = b.expand(&im).unwrap();
        assert!(a.image_energy().sqrt() <= 1.1 * im.disk_norm());
    }
}

#[test]
fn pixel_rotation_matches_phase_rotation() {
    let b = basis65();
    let im = &generate_phantoms(1, 65, 5).unwrap()[0];
    let a = b.expand(im).unwrap();
    for alpha in [0.4, 1.9, -2.6] {
        let lhs = b.expand(&rotate_image(im, alpha).unwrap()).unwrap();
        let rhs = rotate_coefficients(&a, alpha);
        let err = lhs.sub(&rhs).unwrap().image_energy().sqrt() / a.image_energy().sqrt();
        assert!(err <= 0.03, "alpha {alpha}: {err}");
    }
}

#[test]
fn truncation_error_at_full_bandlimit_l129() {
    let b = build_basis(129, 0.5).unwrap();
    for im in generate_phantoms(3, 129, 13).unwrap() {
        let back = b.synthesize(&b.expand(&im).unwrap()).unwrap();
        let err = back.add_scaled(&im, -1.0).unwrap().disk_norm() / im.disk_norm();
        assert!(err <= 0.25, "relative error {err}");
    }
}

#[test]
fn synthesized_images_are_zero_outside_the_disk() {
    let b = basis65();
    let mut r = rng(3);
    let im: Image = b.synthesize(&random_coeffs(b.layout(), &mut r)).unwrap();
    let mask = hmra2d::image::disk_mask(65);
    assert!(im.pixels().iter().zip(&mask).all(|(v, &m)| m || *v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotations_compose(seed in any::<u64>(), a in -7.0f64..7.0, c in -7.0f64..7.0) {
        let b = build_basis(17, 0.5).unwrap();
        let mut r = rng(seed);
        let x = random_coeffs(b.layout(), &mut r);
        let two = rotate_coefficients(&rotate_coefficients(&x, a), c);
        let one = rotate_coefficients(&x, a + c);
        for (u, v) in two.values().iter().zip(one.values()) {
            prop_assert!((u - v).norm() <= 1e-12 * (1.0 + v.norm()));
        }
        prop_assert_eq!(rotate_coefficients(&x, 0.0), x.clone());
        let rotated = rotate_coefficients(&x, a);
        prop_assert_eq!(rotated.block(0), x.block(0));
    }
}
