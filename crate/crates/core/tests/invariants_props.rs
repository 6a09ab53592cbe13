mod common;

use std::f64::consts::PI;
use std::sync::Arc;

use common::{noise_stack, random_coeffs, unwrap_phases, wrap};
use hmra2d::coeffs::{rotate_coefficients, CoeffStack, Coefficients, Layout};
use hmra2d::invariants::{
    estimate_mixed_invariants, exact_mixed_invariants, features_of, InvariantAccumulator,
};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn theorem_one_phase_unwrapping_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let counts: Vec<usize> = (0..2 + trial % 6).map(|_| rng.random_range(1..4)).collect();
        let layout = Arc::new(Layout::new(counts));
        let a = random_coeffs(&layout, &mut rng);
        let theta = 2.0 * PI * rng.random::<f64>();
        let b = rotate_coefficients(&a, theta);
        let fa = features_of(&a);
        let fb = features_of(&b);
        assert!(fa.max_abs_diff(&fb).unwrap() <= 1e-12);

        // direct phase differences: b_k = a_k e^{-i k theta}
        for k in 1..layout.frequencies() {
            for q in 0..layout.count(k) {
                let d = (b.block(k)[q] / a.block(k)[q]).arg();
                assert!(wrap(d + k as f64 * theta) <= 1e-8, "trial {trial} k {k}");
            }
        }

        // the oracle sees only the features of b
        let rec = unwrap_phases(&fb);
        assert_eq!(rec.len(), layout.len());
        let thetas: Vec<f64> = (1..layout.frequencies())
            .map(|k| {
                let q = 0;
                let r = rec[layout.offset(k) + q] / a.block(k)[q];
                assert!((r.norm() - 1.0).abs() <= 1e-8);
                -r.arg()
            })
            .collect();
        for (i, tk) in thetas.iter().enumerate() {
            let k = (i + 1) as f64;
            assert!(
                wrap(tk - k * thetas[0]) <= 1e-8,
                "trial {trial}: theta_{} = {tk}",
                i + 1
            );
        }
        for (x, y) in rec[..layout.count(0)].iter().zip(a.block(0)) {
            assert!((x - y).norm() <= 1e-12);
        }
        // and the recovered vector is a rotation of a
        let back = rotate_coefficients(
            &Coefficients::new(layout.clone(), rec.clone()).unwrap(),
            -thetas[0],
        );
        for (x, y) in back.values().iter().zip(a.values()) {
            assert!((x - y).norm() <= 1e-8 * (1.0 + y.norm()));
        }
    }
}

#[test]
fn two_class_mixture_with_exact_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layout = Arc::new(Layout::new(vec![2, 2, 2, 1]));
    let a = [
        random_coeffs(&layout, &mut rng),
        random_coeffs(&layout, &mut rng),
    ];
    let mut stack = CoeffStack::new(layout.clone());
    for i in 0..40 {
        stack
            .push(&rotate_coefficients(
                &a[i % 2],
                2.0 * PI * rng.random::<f64>(),
            ))
            .unwrap();
    }
    let est = estimate_mixed_invariants(&stack, 0.0).unwrap();
    let exact = exact_mixed_invariants(&a, &[0.5, 0.5]).unwrap();
    assert!(est.features.max_abs_diff(&exact.features).unwrap() <= 1e-12);
}

#[test]
fn pure_noise_bias_correction_shrinks_with_n() {
    let layout = Arc::new(Layout::new(vec![3, 3, 2, 2]));
    let err = |n: usize, seed: u64| {
        let est = estimate_mixed_invariants(&noise_stack(&layout, n, seed), 1.0).unwrap();
        (
            est.features.max_abs_power(),
            est.features.max_abs_bispectrum(),
        )
    };
    // average over a few seeds to keep the ratio away from its tails
    let mut small = (0.0, 0.0);
    let mut large = (0.0, 0.0);
    for s in 0..4 {
        let a = err(10_000, 100 + s);
        let b = err(40_000, 200 + s);
        small = (small.0 + a.0, small.1 + a.1);
        large = (large.0 + b.0, large.1 + b.1);
    }
    let rp = small.0 / large.0;
    let rb = small.1 / large.1;
    assert!((1.4..=2.8).contains(&rp), "power ratio {rp}");
    assert!((1.4..=2.8).contains(&rb), "bispectrum ratio {rb}");
}

#[test]
fn power_spectrum_estimate_is_unbiased() {
    let layout = Arc::new(Layout::new(vec![1, 1]));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_coeffs(&layout, &mut rng);
    let truth = features_of(&a).power_at(1, 0, 0).re;
    let trials = 200;
    let mut vals = Vec::with_capacity(trials);
    for t in 0..trials {
        let noise = noise_stack(&layout, 1000, 500 + t as u64);
        let mut stack = CoeffStack::new(layout.clone());
        for i in 0..noise.len() {
            let rot = rotate_coefficients(&a, 2.0 * PI * rng.random::<f64>());
            let v: Vec<Complex64> = rot
                .values()
                .iter()
                .zip(noise.row(i))
                .map(|(x, e)| x + e)
                .collect();
            stack.push_values(&v).unwrap();
        }
        vals.push(
            estimate_mixed_invariants(&stack, 1.0)
                .unwrap()
                .features
                .power_at(1, 0, 0)
                .re,
        );
    }
    let mean = vals.iter().sum::<f64>() / trials as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let se = (var / trials as f64).sqrt();
    assert!(
        (mean - truth).abs() <= 3.0 * se,
        "{mean} vs {truth} (se {se})"
    );
}

#[test]
fn bispectrum_noise_bias_has_kronecker_structure() {
    let layout = Arc::new(Layout::new(vec![2, 2, 2]));
    let n = 40_000;
    let mut stack = noise_stack(&layout, n, 77);
    // shift the k = 0 block so the mean is not zero and all three patterns show
    let shift = [1.5, -0.5];
    let mut data = stack.data().to_vec();
    for i in 0..n {
        for q in 0..2 {
            data[i * layout.len() + q].re += shift[q];
        }
    }
    stack = CoeffStack::from_data(layout.clone(), data).unwrap();
    let mut acc = InvariantAccumulator::new(layout.clone());
    for row in stack.rows() {
        acc.add(row).unwrap();
    }
    let raw = acc.averages().unwrap();
    let clean = acc.finish(1.0).unwrap().features;
    let signal = features_of(
        &Coefficients::new(
            layout.clone(),
            vec![
                Complex64::new(shift[0], 0.0),
                Complex64::new(shift[1], 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
            ],
        )
        .unwrap(),
    );
    let tol = 6.0 * (1.0 + 2.0 * 1.5f64.powi(2)) / (n as f64).sqrt();
    let mut patterned = 0;
    for (t, [k1, k2, q1, q2, q3]) in raw.index.bispectrum_tuples().into_iter().enumerate() {
        let k3 = k1 + k2;
        let mut pattern = 0.0;
        if k1 == 0 && q2 == q3 {
            pattern += shift[q1];
        }
        if k2 == 0 && q1 == q3 {
            pattern += shift[q2];
        }
        if k3 == 0 && q1 == q2 {
            pattern += shift[q3];
        }
        let bias = raw.bispectrum[t] - signal.bispectrum[t];
        if pattern != 0.0 {
            patterned += 1;
        }
        assert!(
            (bias.re - pattern).abs() <= tol && bias.im.abs() <= tol,
            "{:?}: {bias}",
            [k1, k2, q1, q2, q3]
        );
        let residual = clean.bispectrum[t] - signal.bispectrum[t];
        assert!(residual.norm() <= tol);
    }
    assert!(patterned > 0);
}

#[test]
fn compensated_accumulation_is_order_insensitive() {
    let layout = Arc::new(Layout::new(vec![2, 2, 1]));
    let stack = noise_stack(&layout, 3000, 9);
    let mut fwd = InvariantAccumulator::new(layout.clone());
    let mut rev = InvariantAccumulator::new(layout.clone());
    for i in 0..stack.len() {
        fwd.add(stack.row(i)).unwrap();
        rev.add(stack.row(stack.len() - 1 - i)).unwrap();
    }
    let a = fwd.averages().unwrap();
    let b = rev.averages().unwrap();
    let scale = a.max_abs_bispectrum().max(a.max_abs_power());
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-12 * scale.max(1.0));
}

proptest! {
    #[test]
    fn features_are_rotation_invariant(seed in any::<u64>(), alpha in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..4)).collect();
        let layout = Arc::new(Layout::new(counts));
        let a = random_coeffs(&layout, &mut rng);
        let f = features_of(&a);
        let g = features_of(&rotate_coefficients(&a, alpha));
        prop_assert!(f.max_abs_diff(&g).unwrap() <= 1e-12 * (1.0 + f.max_abs_bispectrum()));
    }

    #[test]
    fn power_spectrum_is_hermitian(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Arc::new(Layout::new(vec![2, 3, 1]));
        let f = features_of(&random_coeffs(&layout, &mut rng));
        for k in 0..3 {
            for q1 in 0..layout.count(k) {
                prop_assert!(f.power_at(k, q1, q1).im == 0.0 && f.power_at(k, q1, q1).re >= 0.0);
                for q2 in 0..layout.count(k) {
                    prop_assert!((f.power_at(k, q1, q2) - f.power_at(k, q2, q1).conj()).norm() <= 1e-14);
                }
            }
        }
    }
}
