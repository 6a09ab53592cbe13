//! Weighted least-squares inversion of mixed invariants.
//!
//! The unknowns are `K` coefficient vectors and a mixing vector on the simplex.
//! The `k = 0` coefficients are real variables, the rest complex. Mixing
//! weights are the softmax of `K` free reals unless held fixed.
//!
//! Complex gradients follow the convention `DF[y] = Re <g, y>`, so for
//! `z = u + i v` the partial derivatives are `Re g` and `Im g`.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coeffs::{Coefficients, Layout};
use crate::error::{invalid, Error, Result};
use crate::invariants::{features_with, InvariantFeatures, InvariantIndex, MixedInvariants};
use crate::observation::{stream_rng, validate_simplex};
use crate::par;

/// Restarts launched together when an early-stop objective is set.
const WAVE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    ConjugateGradient,
    TrustRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    /// Bound on the gradient norm of the normalized objective.
    pub gradient_tolerance: f64,
    pub method: Method,
    pub fix_pi: Option<Vec<f64>>,
    pub seed: u64,
    /// Stop launching restarts once a run reaches this objective value.
    pub stop_objective: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            restarts: 5,
            max_iterations: 10_000,
            gradient_tolerance: 1e-8,
            method: Method::ConjugateGradient,
            fix_pi: None,
            seed: 0,
            stop_objective: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.restarts == 0 || self.max_iterations == 0 {
            return invalid("restarts and max_iterations must be positive");
        }
        if !(self.gradient_tolerance > 0.0) || !self.gradient_tolerance.is_finite() {
            return invalid("gradient_tolerance must be positive");
        }
        if let Some(pi) = &self.fix_pi {
            if pi.len() != classes {
                return invalid(format!(
                    "fix_pi has {} entries, expected {classes}",
                    pi.len()
                ));
            }
            validate_simplex(pi, false)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEstimate {
    pub coeffs: Vec<Coefficients>,
    pub pi_hat: Vec<f64>,
    pub objective_value: f64,
    /// Gradient norm of the normalized objective at the returned point.
    pub gradient_norm: f64,
    pub converged: bool,
    pub restarts_used: usize,
    /// Iterations of the returned run.
    pub iterations: usize,
    /// Final objective of every restart, in launch order.
    pub restart_objectives: Vec<f64>,
}

impl MixtureEstimate {
    pub fn classes(&self) -> usize {
        self.coeffs.len()
    }
}

/// Weights of the first-, second- and third-order residuals.
pub fn objective_weights(sigma2: f64) -> [f64; 3] {
    let s4 = sigma2 * sigma2;
    [1.0, 1.0 / (1.0 + sigma2), 1.0 / (1.0 + sigma2 + s4)]
}

/// Gradient of the objective with respect to coefficients and mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    /// One vector per class; `k = 0` entries are real.
    pub coeffs: Vec<Vec<Complex64>>,
    pub pi: Vec<f64>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        let a: f64 = self.coeffs.iter().flatten().map(|v| v.norm_sqr()).sum();
        let p: f64 = self.pi.iter().map(|v| v * v).sum();
        (a + p).sqrt()
    }
}

fn check_inputs(
    coeffs: &[Coefficients],
    pi: &[f64],
    target: &MixedInvariants,
    sigma2: f64,
) -> Result<()> {
    if coeffs.is_empty() || coeffs.len() != pi.len() {
        return invalid("need one mixing weight per class");
    }
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return invalid(format!(
            "noise variance {sigma2} must be a nonnegative number"
        ));
    }
    for c in coeffs {
        if c.layout() != target.layout() {
            return Err(Error::LayoutMismatch);
        }
    }
    Ok(())
}

/// Weighted squared misfit between the model invariants at `(coeffs, pi)` and
/// `target`. Imaginary parts of `k = 0` coefficients are ignored.
pub fn objective(
    coeffs: &[Coefficients],
    pi: &[f64],
    target: &MixedInvariants,
    sigma2: f64,
) -> Result<f64> {
    check_inputs(coeffs, pi, target, sigma2)?;
    let model = Model::new(&target.features, objective_weights(sigma2));
    let a = real_dc(coeffs, target.layout());
    Ok(model.evaluate(&a, pi, false).value)
}

pub fn gradient(
    coeffs: &[Coefficients],
    pi: &[f64],
    target: &MixedInvariants,
    sigma2: f64,
) -> Result<Gradient> {
    check_inputs(coeffs, pi, target, sigma2)?;
    let model = Model::new(&target.features, objective_weights(sigma2));
    let a = real_dc(coeffs, target.layout());
    let e = model.evaluate(&a, pi, true);
    Ok(Gradient {
        coeffs: e.grad_a,
        pi: e.grad_pi,
    })
}

fn real_dc(coeffs: &[Coefficients], layout: &Layout) -> Vec<Vec<Complex64>> {
    coeffs
        .iter()
        .map(|c| {
            let mut v = c.values().to_vec();
            for x in &mut v[layout.range(0)] {
                x.im = 0.0;
            }
            v
        })
        .collect()
}

struct Evaluation {
    value: f64,
    grad_a: Vec<Vec<Complex64>>,
    grad_pi: Vec<f64>,
}

/// Residual and gradient assembly over the stored invariant index set.
struct Model<'a> {
    target: &'a InvariantFeatures,
    index: Arc<InvariantIndex>,
    weights: [f64; 3],
}

impl<'a> Model<'a> {
    fn new(target: &'a InvariantFeatures, weights: [f64; 3]) -> Self {
        Model {
            index: target.index.clone(),
            target,
            weights,
        }
    }

    fn evaluate(&self, a: &[Vec<Complex64>], pi: &[f64], with_grad: bool) -> Evaluation {
        let [w1, w2, w3] = self.weights;
        let feats: Vec<InvariantFeatures> =
            a.iter().map(|x| features_with(&self.index, x)).collect();
        let mut res = InvariantFeatures::zeros(self.index.clone());
        for (f, &p) in feats.iter().zip(pi) {
            res.add_scaled(f, p).expect("shared index");
        }
        res.add_scaled(self.target, -1.0).expect("shared index");

        let value = w1 * res.mean.iter().map(|r| r * r).sum::<f64>()
            + w2 * res.power.iter().map(|r| r.norm_sqr()).sum::<f64>()
            + w3 * res.bispectrum.iter().map(|r| r.norm_sqr()).sum::<f64>();
        if !with_grad {
            return Evaluation {
                value,
                grad_a: Vec::new(),
                grad_pi: Vec::new(),
            };
        }

        let grad_pi = feats
            .iter()
            .map(|t| {
                let m: f64 = res.mean.iter().zip(&t.mean).map(|(r, v)| r * v).sum();
                let p: f64 = res
                    .power
                    .iter()
                    .zip(&t.power)
                    .map(|(r, v)| (r.conj() * v).re)
                    .sum();
                let b: f64 = res
                    .bispectrum
                    .iter()
                    .zip(&t.bispectrum)
                    .map(|(r, v)| (r.conj() * v).re)
                    .sum();
                2.0 * (w1 * m + w2 * p + w3 * b)
            })
            .collect();

        let grad_a = a
            .iter()
            .zip(pi)
            .map(|(x, &p)| self.class_gradient(&res, x, p))
            .collect();

        Evaluation {
            value,
            grad_a,
            grad_pi,
        }
    }

    fn class_gradient(&self, res: &InvariantFeatures, a: &[Complex64], pi: f64) -> Vec<Complex64> {
        let [w1, w2, w3] = self.weights;
        let layout = self.index.layout();
        let mut g = vec![Complex64::new(0.0, 0.0); a.len()];
        for (q, r) in res.mean.iter().enumerate() {
            g[layout.offset(0) + q] += 2.0 * w1 * pi * r;
        }
        for k in 0..layout.frequencies() {
            let r = layout.count(k);
            let o = layout.offset(k);
            let off = self.index.power_offset(k);
            let c = 2.0 * w2 * pi;
            for q1 in 0..r {
                for q2 in 0..r {
                    let rr = res.power[off + q1 * r + q2] * c;
                    g[o + q1] += rr * a[o + q2];
                    g[o + q2] += rr.conj() * a[o + q1];
                }
            }
        }
        for blk in self.index.bispectrum_blocks() {
            let (o1, o2, o3) = (
                layout.offset(blk.k1),
                layout.offset(blk.k2),
                layout.offset(blk.k3()),
            );
            let (r1, r2, r3) = (
                layout.count(blk.k1),
                layout.count(blk.k2),
                layout.count(blk.k3()),
            );
            let c = 2.0 * w3 * pi;
            let mut i = blk.offset;
            for q1 in 0..r1 {
                let a1 = a[o1 + q1];
                for q2 in 0..r2 {
                    let a2 = a[o2 + q2];
                    let a12 = a1 * a2;
                    let mut acc = Complex64::new(0.0, 0.0);
                    for q3 in 0..r3 {
                        let rr = res.bispectrum[i] * c;
                        i += 1;
                        acc += rr * a[o3 + q3];
                        g[o3 + q3] += rr.conj() * a12;
                    }
                    g[o1 + q1] += acc * a2.conj();
                    g[o2 + q2] += acc * a1.conj();
                }
            }
        }
        for v in &mut g[layout.range(0)] {
            v.im = 0.0;
        }
        g
    }
}

/// Real parameterization of `(a, pi)` with per-coefficient scaling.
struct Problem<'a> {
    model: Model<'a>,
    layout: Arc<Layout>,
    classes: usize,
    scale: Vec<f64>,
    fscale: f64,
    fixed_pi: Option<Vec<f64>>,
    class_dim: usize,
}

impl<'a> Problem<'a> {
    fn new(target: &'a MixedInvariants, classes: usize, fixed_pi: Option<Vec<f64>>) -> Self {
        let f = &target.features;
        let layout = target.layout().clone();
        let model = Model::new(f, objective_weights(target.sigma2));
        let zero: Vec<Vec<Complex64>> = vec![vec![Complex64::new(0.0, 0.0); layout.len()]; classes];
        let uniform = vec![1.0 / classes as f64; classes];
        let f0 = model.evaluate(&zero, &uniform, false).value;
        let fscale = if f0 > 0.0 { f0 } else { 1.0 };
        let curvature = curvature_by_frequency(f, model.weights, classes);
        let scale = (0..layout.frequencies())
            .flat_map(|k| std::iter::repeat_n((fscale / curvature[k]).sqrt(), layout.count(k)))
            .collect();
        let class_dim = layout.count(0) + 2 * (layout.len() - layout.count(0));
        Problem {
            model,
            layout,
            classes,
            scale,
            fscale,
            fixed_pi,
            class_dim,
        }
    }

    fn dim(&self) -> usize {
        self.classes * self.class_dim
            + if self.fixed_pi.is_some() {
                0
            } else {
                self.classes
            }
    }

    fn unpack(&self, x: &[f64]) -> (Vec<Vec<Complex64>>, Vec<f64>) {
        let dc = self.layout.count(0);
        let n = self.layout.len();
        let a = (0..self.classes)
            .map(|i| {
                let u = &x[i * self.class_dim..(i + 1) * self.class_dim];
                (0..n)
                    .map(|j| {
                        let s = self.scale[j];
                        if j < dc {
                            Complex64::new(s * u[j], 0.0)
                        } else {
                            let t = dc + 2 * (j - dc);
                            Complex64::new(s * u[t], s * u[t + 1])
                        }
                    })
                    .collect()
            })
            .collect();
        let pi = match &self.fixed_pi {
            Some(p) => p.clone(),
            None => softmax(&x[self.classes * self.class_dim..]),
        };
        (a, pi)
    }

    fn pack(&self, a: &[Vec<Complex64>], theta: Option<&[f64]>) -> Vec<f64> {
        let dc = self.layout.count(0);
        let mut x = vec![0.0; self.dim()];
        for (i, v) in a.iter().enumerate() {
            let u = &mut x[i * self.class_dim..(i + 1) * self.class_dim];
            for (j, z) in v.iter().enumerate() {
                let s = self.scale[j];
                if j < dc {
                    u[j] = z.re / s;
                } else {
                    let t = dc + 2 * (j - dc);
                    u[t] = z.re / s;
                    u[t + 1] = z.im / s;
                }
            }
        }
        if let (Some(t), None) = (theta, &self.fixed_pi) {
            x[self.classes * self.class_dim..].copy_from_slice(t);
        }
        x
    }

    /// Normalized objective and its gradient in `x`.
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (a, pi) = self.unpack(x);
        let e = self.model.evaluate(&a, &pi, true);
        let dc = self.layout.count(0);
        for (i, g) in e.grad_a.iter().enumerate() {
            let out = &mut grad[i * self.class_dim..(i + 1) * self.class_dim];
            for (j, z) in g.iter().enumerate() {
                let s = self.scale[j] / self.fscale;
                if j < dc {
                    out[j] = s * z.re;
                } else {
                    let t = dc + 2 * (j - dc);
                    out[t] = s * z.re;
                    out[t + 1] = s * z.im;
                }
            }
        }
        if self.fixed_pi.is_none() {
            let mean: f64 = pi.iter().zip(&e.grad_pi).map(|(p, g)| p * g).sum();
            let out = &mut grad[self.classes * self.class_dim..];
            for j in 0..self.classes {
                out[j] = pi[j] * (e.grad_pi[j] - mean) / self.fscale;
            }
        }
        e.value / self.fscale
    }

    /// Moment-matched random start.
    fn initial_point(&self, target: &InvariantFeatures, seed: u64, restart: usize) -> Vec<f64> {
        let mut rng = stream_rng(seed, restart as u64);
        let dc = self.layout.count(0);
        let a: Vec<Vec<Complex64>> = (0..self.classes)
            .map(|_| {
                let mut v = Vec::with_capacity(self.layout.len());
                for k in 0..self.layout.frequencies() {
                    for q in 0..self.layout.count(k) {
                        let p = target.power_at(k, q, q).re.max(0.0);
                        let z: f64 = rng.sample(StandardNormal);
                        if k == 0 {
                            let m = target.mean[q];
                            let spread = (p - m * m).max(0.0).sqrt();
                            v.push(Complex64::new(m + spread * z, 0.0));
                        } else {
                            let w: f64 = rng.sample(StandardNormal);
                            let s = (p / 2.0).sqrt();
                            v.push(Complex64::new(s * z, s * w));
                        }
                    }
                }
                debug_assert_eq!(v[dc..].len(), self.layout.len() - dc);
                v
            })
            .collect();
        let theta = vec![0.0; self.classes];
        self.pack(&a, Some(&theta))
    }
}

/// Gauss-Newton diagonal of the objective per frequency, with every
/// coefficient at its expected magnitude under the target power spectrum.
fn curvature_by_frequency(f: &InvariantFeatures, weights: [f64; 3], classes: usize) -> Vec<f64> {
    let layout = f.index.layout();
    let nf = layout.frequencies();
    let power: Vec<f64> = (0..nf)
        .map(|k| {
            (0..layout.count(k))
                .map(|q| f.power_at(k, q, q).re.max(0.0))
                .sum()
        })
        .collect();
    let [w1, w2, w3] = weights;
    let mut d: Vec<f64> = power.iter().map(|p| 2.0 * w2 * p).collect();
    if nf > 0 {
        d[0] += w1;
    }
    for b in f.index.bispectrum_blocks() {
        let (k1, k2, k3) = (b.k1, b.k2, b.k3());
        d[k1] += w3 * power[k2] * power[k3];
        d[k2] += w3 * power[k1] * power[k3];
        d[k3] += w3 * power[k1] * power[k2];
    }
    let pi2 = 1.0 / (classes * classes) as f64;
    let top = d.iter().cloned().fold(0.0, f64::max);
    let floor = if top > 0.0 { 1e-12 * top } else { 1.0 };
    d.iter().map(|v| (pi2 * v).max(pi2 * floor)).collect()
}

fn softmax(theta: &[f64]) -> Vec<f64> {
    let top = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Outcome of one local optimization.
#[derive(Debug, Clone)]
struct RunResult {
    x: Vec<f64>,
    value: f64,
    gradient_norm: f64,
    iterations: usize,
    converged: bool,
}

/// Fits `classes` coefficient sets and mixing weights to `target` from
/// several random starts and keeps the lowest objective.
pub fn solve(
    target: &MixedInvariants,
    classes: usize,
    options: &SolverOptions,
) -> Result<MixtureEstimate> {
    if classes == 0 {
        return invalid("number of classes must be positive");
    }
    if target.layout().is_empty() {
        return invalid("target invariants are empty");
    }
    options.validate(classes)?;
    let problem = Problem::new(target, classes, options.fix_pi.clone());
    let run = |r: usize| -> RunResult {
        let x0 = problem.initial_point(&target.features, options.seed, r);
        let f = |x: &[f64], g: &mut [f64]| problem.eval(x, g);
        match options.method {
            Method::ConjugateGradient => {
                conjugate_gradient(f, x0, options.gradient_tolerance, options.max_iterations)
            }
            Method::TrustRegion => {
                trust_region(f, x0, options.gradient_tolerance, options.max_iterations)
            }
        }
    };

    let mut results: Vec<RunResult> = Vec::new();
    match options.stop_objective {
        None => results = par::map_range(options.restarts, run),
        Some(stop) => {
            while results.len() < options.restarts {
                let start = results.len();
                let n = WAVE.min(options.restarts - start);
                let wave = par::map_range(n, |j| run(start + j));
                let hit = wave.iter().any(|w| w.value * problem.fscale <= stop);
                results.extend(wave);
                if hit {
                    break;
                }
            }
        }
    }

    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.value < results[best].value {
            best = i;
        }
    }
    let b = &results[best];
    let (a, pi_hat) = problem.unpack(&b.x);
    let layout = target.layout().clone();
    let coeffs = a
        .into_iter()
        .map(|v| Coefficients::new(layout.clone(), v))
        .collect::<Result<Vec<_>>>()?;
    log::info!(
        "solver: best of {} restarts F = {:.6e}, |g| = {:.3e}, {} iterations",
        results.len(),
        b.value * problem.fscale,
        b.gradient_norm,
        b.iterations
    );
    Ok(MixtureEstimate {
        coeffs,
        pi_hat,
        objective_value: b.value * problem.fscale,
        gradient_norm: b.gradient_norm,
        converged: b.converged,
        restarts_used: results.len(),
        iterations: b.iterations,
        restart_objectives: results.iter().map(|r| r.value * problem.fscale).collect(),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(x: &[f64], t: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

/// Consecutive iterations without relative decrease before giving up.
const STALL: usize = 20;

/// Nonlinear conjugate gradient, Polak-Ribiere+ with a strong Wolfe search.
fn conjugate_gradient<F>(f: F, mut x: Vec<f64>, tol: f64, max_iter: usize) -> RunResult
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut prev_step = 0.0;
    let mut prev_slope = 0.0;
    let mut stall = 0;
    let mut it = 0;
    while it < max_iter {
        let gn = norm(&g);
        if gn <= tol {
            return RunResult {
                x,
                value: fx,
                gradient_norm: gn,
                iterations: it,
                converged: true,
            };
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            d = g.iter().map(|v| -v).collect();
            slope = -gn * gn;
        }
        let alpha0 = if it == 0 {
            (1.0 / gn).min(1.0)
        } else {
            (prev_step * prev_slope / slope).clamp(1e-12, 1e6)
        };
        let found = wolfe_search(&f, &x, fx, &d, slope, alpha0);
        let Some((alpha, fnew, gnew)) = found else {
            if slope == -gn * gn {
                break;
            }
            d = g.iter().map(|v| -v).collect();
            it += 1;
            continue;
        };
        x = axpy(&x, alpha, &d);
        if fx - fnew <= 1e-15 * fx.abs().max(f64::MIN_POSITIVE) {
            stall += 1;
        } else {
            stall = 0;
        }
        let diff: f64 = gnew.iter().zip(&g).map(|(a, b)| a * (a - b)).sum();
        let beta = (diff / (gn * gn)).max(0.0);
        prev_step = alpha;
        prev_slope = slope;
        fx = fnew;
        g = gnew;
        for (di, gi) in d.iter_mut().zip(&g) {
            *di = -gi + beta * *di;
        }
        it += 1;
        if it % n.max(1) == 0 {
            d = g.iter().map(|v| -v).collect();
        }
        if stall >= STALL {
            break;
        }
    }
    let gn = norm(&g);
    RunResult {
        x,
        value: fx,
        gradient_norm: gn,
        iterations: it,
        converged: gn <= tol,
    }
}

const C1: f64 = 1e-4;
const C2: f64 = 0.1;
const MAX_SEARCH: usize = 40;

/// Strong Wolfe line search, bracketing then zoom with cubic interpolation.
fn wolfe_search<F>(
    f: &F,
    x: &[f64],
    f0: f64,
    d: &[f64],
    slope0: f64,
    alpha0: f64,
) -> Option<(f64, f64, Vec<f64>)>
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let eval = |a: f64| {
        let mut g = vec![0.0; n];
        let v = f(&axpy(x, a, d), &mut g);
        let s = dot(&g, d);
        (v, s, g)
    };
    let (mut a_prev, mut f_prev, mut s_prev) = (0.0, f0, slope0);
    let mut a = alpha0;
    for i in 0..MAX_SEARCH {
        let (fa, sa, ga) = eval(a);
        if !fa.is_finite() {
            a = 0.5 * (a_prev + a);
            continue;
        }
        if fa > f0 + C1 * a * slope0 || (i > 0 && fa >= f_prev) {
            return zoom(&eval, f0, slope0, (a_prev, f_prev, s_prev), (a, fa, sa));
        }
        if sa.abs() <= -C2 * slope0 {
            return Some((a, fa, ga));
        }
        if sa >= 0.0 {
            return zoom(&eval, f0, slope0, (a, fa, sa), (a_prev, f_prev, s_prev));
        }
        a_prev = a;
        f_prev = fa;
        s_prev = sa;
        a *= 4.0;
    }
    None
}

type Point = (f64, f64, f64);

fn zoom<E>(
    eval: &E,
    f0: f64,
    slope0: f64,
    mut lo: Point,
    mut hi: Point,
) -> Option<(f64, f64, Vec<f64>)>
where
    E: Fn(f64) -> (f64, f64, Vec<f64>),
{
    for _ in 0..MAX_SEARCH {
        let a = interpolate(lo, hi);
        let (fa, sa, ga) = eval(a);
        if fa > f0 + C1 * a * slope0 || fa >= lo.1 {
            hi = (a, fa, sa);
        } else {
            if sa.abs() <= -C2 * slope0 {
                return Some((a, fa, ga));
            }
            if sa * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, fa, sa);
        }
        if (hi.0 - lo.0).abs() <= 1e-14 * lo.0.abs().max(1e-300) {
            break;
        }
    }
    // accept a sufficient-decrease point even without the curvature condition
    if lo.0 > 0.0 && lo.1 < f0 {
        let (fa, _, ga) = eval(lo.0);
        return Some((lo.0, fa, ga));
    }
    None
}

/// Minimizer of the cubic through two points with slopes, safeguarded to the
/// middle of the interval.
fn interpolate(p: Point, q: Point) -> f64 {
    let (a, fa, da) = p;
    let (b, fb, db) = q;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let width = hi - lo;
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let mut t = 0.5 * (a + b);
    if disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        let c = b - (b - a) * ((db + d2 - d1) / (db - da + 2.0 * d2));
        if c.is_finite() {
            t = c;
        }
    }
    t.clamp(lo + 0.1 * width, hi - 0.1 * width)
}

/// Trust-region Newton with truncated CG; Hessian-vector products are
/// forward differences of the gradient.
fn trust_region<F>(f: F, mut x: Vec<f64>, tol: f64, max_iter: usize) -> RunResult
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut radius = 0.1 * norm(&x).max(1.0);
    let max_radius = 1e3 * norm(&x).max(1.0);
    let mut stall = 0;
    let mut it = 0;
    while it < max_iter {
        let gn = norm(&g);
        if gn <= tol {
            break;
        }
        let hess = |v: &[f64]| -> Vec<f64> {
            let vn = norm(v);
            if vn == 0.0 {
                return vec![0.0; n];
            }
            let h = 1e-7 * norm(&x).max(1.0) / vn;
            let mut gh = vec![0.0; n];
            f(&axpy(&x, h, v), &mut gh);
            gh.iter().zip(&g).map(|(a, b)| (a - b) / h).collect()
        };
        let (step, predicted) = steihaug(&g, &hess, radius, gn * gn.sqrt().min(0.5), n.min(500));
        let xn = axpy(&x, 1.0, &step);
        let mut gnew = vec![0.0; n];
        let fnew = f(&xn, &mut gnew);
        let rho = if predicted > 0.0 {
            (fx - fnew) / predicted
        } else {
            -1.0
        };
        let sn = norm(&step);
        if !fnew.is_finite() || rho < 0.25 {
            radius = 0.25 * sn.min(radius);
        } else if rho > 0.75 && sn >= 0.99 * radius {
            radius = (2.0 * radius).min(max_radius);
        }
        if fnew.is_finite() && rho > 0.1 {
            if fx - fnew <= 1e-15 * fx.abs().max(f64::MIN_POSITIVE) {
                stall += 1;
            } else {
                stall = 0;
            }
            x = xn;
            fx = fnew;
            g = gnew;
        }
        it += 1;
        if stall >= STALL || radius <= 1e-15 * norm(&x).max(1.0) {
            break;
        }
    }
    let gn = norm(&g);
    RunResult {
        x,
        value: fx,
        gradient_norm: gn,
        iterations: it,
        converged: gn <= tol,
    }
}

/// Approximately minimizes `g.p + p.H p / 2` over `|p| <= radius`; returns the
/// step and the predicted decrease.
fn steihaug<H>(g: &[f64], hess: &H, radius: f64, rtol: f64, max_iter: usize) -> (Vec<f64>, f64)
where
    H: Fn(&[f64]) -> Vec<f64>,
{
    let n = g.len();
    let mut p = vec![0.0; n];
    let mut r: Vec<f64> = g.to_vec();
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let model = |p: &[f64]| -> f64 {
        let hp = hess(p);
        -(dot(g, p) + 0.5 * dot(p, &hp))
    };
    let mut rr = dot(&r, &r);
    for _ in 0..max_iter {
        let hd = hess(&d);
        let curv = dot(&d, &hd);
        if curv <= 0.0 {
            let t = boundary(&p, &d, radius);
            let out = axpy(&p, t, &d);
            let pred = model(&out);
            return (out, pred);
        }
        let alpha = rr / curv;
        let pn = axpy(&p, alpha, &d);
        if norm(&pn) >= radius {
            let t = boundary(&p, &d, radius);
            let out = axpy(&p, t, &d);
            let pred = model(&out);
            return (out, pred);
        }
        p = pn;
        for (ri, hi) in r.iter_mut().zip(&hd) {
            *ri += alpha * hi;
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= rtol {
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for (di, ri) in d.iter_mut().zip(&r) {
            *di = -ri + beta * *di;
        }
    }
    let pred = model(&p);
    (p, pred)
}

/// Positive `t` with `|p + t d| = radius`.
fn boundary(p: &[f64], d: &[f64], radius: f64) -> f64 {
    let a = dot(d, d);
    let b = 2.0 * dot(p, d);
    let c = dot(p, p) - radius * radius;
    (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)
}
