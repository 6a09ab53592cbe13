#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use hmra2d::coeffs::{CoeffStack, Coefficients, Layout};
use hmra2d::invariants::{
    exact_mixed_invariants, InvariantFeatures, InvariantIndex, MixedInvariants,
};
use hmra2d::solver::gradient;
use hmra2d::solver::objective_weights;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use twofloat::TwoFloat;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_coeffs(layout: &Arc<Layout>, rng: &mut ChaCha8Rng) -> Coefficients {
    let dc = layout.count(0);
    let v = (0..layout.len())
        .map(|j| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = if j < dc {
                0.0
            } else {
                rng.sample(StandardNormal)
            };
            Complex64::new(re, im)
        })
        .collect();
    Coefficients::new(layout.clone(), v).unwrap()
}

pub fn random_simplex(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| 0.2 + rng.random::<f64>()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Layout with 20 coefficients spread over 8 frequencies.
pub fn gate_layout() -> Arc<Layout> {
    Arc::new(Layout::new(vec![4, 4, 3, 3, 2, 2, 1, 1]))
}

pub struct GateOutcome {
    pub entries: usize,
    pub worst: f64,
}

/// Compares every analytic gradient entry with a central difference of step
/// `h`, the objective being evaluated independently in double-double
/// arithmetic so the difference quotient is not dominated by rounding.
/// Returns the largest `|g - fd| / max(|g|, |fd|)` over all entries.
pub fn finite_difference_gate(seed: u64, classes: usize, h: f64) -> GateOutcome {
    let mut r = rng(seed);
    let layout = gate_layout();
    let sigma: f64 = 2.0 * r.random::<f64>();
    let sigma2 = sigma * sigma;
    let truth: Vec<Coefficients> = (0..classes)
        .map(|_| random_coeffs(&layout, &mut r))
        .collect();
    let pi_true = random_simplex(classes, &mut r);
    let target = exact_mixed_invariants(&truth, &pi_true).unwrap();
    let mut a: Vec<Coefficients> = (0..classes)
        .map(|_| random_coeffs(&layout, &mut r))
        .collect();
    let mut pi = random_simplex(classes, &mut r);
    let g = gradient(&a, &pi, &target, sigma2).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let oracle = DoubleDoubleObjective::new(&target, sigma2);
    let f = |a: &[Coefficients], pi: &[f64]| oracle.difference(a, pi);
    for i in 0..classes {
        for j in 0..layout.len() {
            let parts: &[Complex64] = if j < layout.count(0) {
                &[Complex64::new(1.0, 0.0)]
            } else {
                &[Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)]
            };
            for &d in parts {
                let base = a[i].values()[j];
                a[i].values_mut()[j] = base + d * h;
                let fp = f(&a, &pi);
                a[i].values_mut()[j] = base - d * h;
                let fm = f(&a, &pi);
                a[i].values_mut()[j] = base;
                numeric.push(f64::from((fp - fm) / (2.0 * h)));
                let gij = g.coeffs[i][j];
                analytic.push(if d.re == 1.0 { gij.re } else { gij.im });
            }
        }
    }
    for i in 0..classes {
        let base = pi[i];
        pi[i] = base + h;
        let fp = f(&a, &pi);
        pi[i] = base - h;
        let fm = f(&a, &pi);
        pi[i] = base;
        numeric.push(f64::from((fp - fm) / (2.0 * h)));
        analytic.push(g.pi[i]);
    }
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE))
        .fold(0.0f64, f64::max);
    GateOutcome {
        entries: analytic.len(),
        worst,
    }
}

#[derive(Clone, Copy)]
struct Cdd {
    re: TwoFloat,
    im: TwoFloat,
}

impl Cdd {
    fn new(v: Complex64) -> Self {
        Cdd {
            re: TwoFloat::from(v.re),
            im: TwoFloat::from(v.im),
        }
    }

    fn zero() -> Self {
        Cdd::new(Complex64::new(0.0, 0.0))
    }

    fn mul(self, o: Cdd) -> Cdd {
        Cdd {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }

    fn conj(self) -> Cdd {
        Cdd {
            re: self.re,
            im: -self.im,
        }
    }

    fn add_scaled(&mut self, o: Cdd, w: TwoFloat) {
        self.re += o.re * w;
        self.im += o.im * w;
    }

    fn dist2(self, t: Complex64) -> TwoFloat {
        let dr = self.re - t.re;
        let di = self.im - t.im;
        dr * dr + di * di
    }
}

/// Straightforward evaluation of the weighted misfit in double-double
/// arithmetic: mixed mean, power spectrum and bispectrum summed over the
/// classes, then squared residuals against the target.
pub struct DoubleDoubleObjective<'a> {
    target: &'a MixedInvariants,
    index: Arc<InvariantIndex>,
    weights: [f64; 3],
}

impl<'a> DoubleDoubleObjective<'a> {
    pub fn new(target: &'a MixedInvariants, sigma2: f64) -> Self {
        DoubleDoubleObjective {
            target,
            index: target.index().clone(),
            weights: objective_weights(sigma2),
        }
    }

    pub fn difference(&self, a: &[Coefficients], pi: &[f64]) -> TwoFloat {
        let layout = self.index.layout();
        let t = &self.target.features;
        let classes: Vec<Vec<Cdd>> = a
            .iter()
            .map(|c| {
                c.values()
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let v = if j < layout.count(0) {
                            Complex64::new(v.re, 0.0)
                        } else {
                            *v
                        };
                        Cdd::new(v)
                    })
                    .collect()
            })
            .collect();
        let pis: Vec<TwoFloat> = pi.iter().map(|&p| TwoFloat::from(p)).collect();
        let mut total = TwoFloat::from(0.0);

        let mut first = TwoFloat::from(0.0);
        for q in 0..layout.count(0) {
            let mut m = Cdd::zero();
            for (x, &w) in classes.iter().zip(&pis) {
                m.add_scaled(x[q], w);
            }
            first += m.dist2(Complex64::new(t.mean[q], 0.0));
        }
        total += first * self.weights[0];

        let mut second = TwoFloat::from(0.0);
        for k in 0..layout.frequencies() {
            let off = layout.offset(k);
            for q1 in 0..layout.count(k) {
                for q2 in 0..layout.count(k) {
                    let mut p = Cdd::zero();
                    for (x, &w) in classes.iter().zip(&pis) {
                        p.add_scaled(x[off + q1].mul(x[off + q2].conj()), w);
                    }
                    second += p.dist2(t.power_at(k, q1, q2));
                }
            }
        }
        total += second * self.weights[1];

        let mut third = TwoFloat::from(0.0);
        for [k1, k2, q1, q2, q3] in self.index.bispectrum_tuples() {
            let (i1, i2, i3) = (
                layout.offset(k1) + q1,
                layout.offset(k2) + q2,
                layout.offset(k1 + k2) + q3,
            );
            let mut b = Cdd::zero();
            for (x, &w) in classes.iter().zip(&pis) {
                b.add_scaled(x[i1].mul(x[i2]).mul(x[i3].conj()), w);
            }
            third += b.dist2(t.bispectrum_at(k1, k2, q1, q2, q3).unwrap());
        }
        total + third * self.weights[2]
    }
}

pub fn wrap(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    y.min(2.0 * PI - y)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Rebuilds a coefficient vector from its mean, power spectrum and
/// bispectrum alone. The phase of the strongest `k = 1` coefficient is set to
/// zero; higher frequencies follow from the `(1, k - 1)` bispectrum blocks.
pub fn unwrap_phases(f: &InvariantFeatures) -> Vec<Complex64> {
    let layout = f.index.layout().clone();
    let nf = layout.frequencies();
    let mut out: Vec<Vec<Complex64>> = Vec::with_capacity(nf);
    let magnitudes: Vec<Vec<f64>> = (0..nf)
        .map(|k| {
            (0..layout.count(k))
                .map(|q| f.power_at(k, q, q).re.max(0.0).sqrt())
                .collect()
        })
        .collect();
    let anchors: Vec<usize> = magnitudes.iter().map(|m| argmax(m)).collect();
    // relative phases within each block come from the power spectrum
    let relative = |k: usize, q: usize| -> f64 { f.power_at(k, q, anchors[k]).arg() };
    out.push(f.mean.iter().map(|&m| Complex64::new(m, 0.0)).collect());
    for k in 1..nf {
        let phase = if k == 1 {
            0.0
        } else {
            let (q1, q2, q3) = (anchors[1], anchors[k - 1], anchors[k]);
            let b = f.bispectrum_at(1, k - 1, q1, q2, q3).unwrap();
            (out[1][q1] * out[k - 1][q2]).arg() - b.arg()
        };
        out.push(
            (0..layout.count(k))
                .map(|q| Complex64::from_polar(magnitudes[k][q], phase + relative(k, q)))
                .collect(),
        );
    }
    out.concat()
}

/// Unit-variance white noise: real for `k = 0`, circular otherwise.
pub fn noise_stack(layout: &Arc<Layout>, n: usize, seed: u64) -> CoeffStack {
    let mut rng = rng(seed);
    let dc = layout.count(0);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut data = Vec::with_capacity(n * layout.len());
    for _ in 0..n {
        for j in 0..layout.len() {
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            // unit variance per coefficient: real for k = 0, circular otherwise
            data.push(if j < dc {
                Complex64::new(x, 0.0)
            } else {
                Complex64::new(s * x, s * y)
            });
        }
    }
    CoeffStack::from_data(layout.clone(), data).unwrap()
}
