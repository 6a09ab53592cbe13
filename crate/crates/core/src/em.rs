//! Expectation-maximization over steerable coefficients with the rotation
//! restricted to `R` equally spaced angles.
//!
//! Distances use the image-domain energy of a real image: frequency `k = 0`
//! counts once and every `k > 0` twice. The log-likelihood trace is the mean
//! over observations of `log sum_{j,r} (w_j / R) exp(-|y - R_r a_j|^2 / (2 sigma^2))`,
//! without the Gaussian normalizing constant.

use std::f64::consts::PI;
use std::time::Instant;

use num_complex::Complex64;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::coeffs::{CoeffStack, Coefficients, Layout};
use crate::error::{invalid, Result};
use crate::observation::{stream_rng, validate_simplex};
use crate::par;

const CHUNK: usize = 64;
/// Allowed decrease of the mean log-likelihood, relative to its magnitude.
pub const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub classes: usize,
    pub rotations: usize,
    pub max_iterations: usize,
    /// Stop once the mean log-likelihood gains less than this per iteration.
    pub tolerance: f64,
    pub sigma2: f64,
    pub seed: u64,
    pub fix_pi: Option<Vec<f64>>,
}

impl EmOptions {
    pub fn new(classes: usize, rotations: usize, sigma2: f64) -> Self {
        EmOptions {
            classes,
            rotations,
            max_iterations: 200,
            tolerance: 1e-6,
            sigma2,
            seed: 0,
            fix_pi: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return invalid("EM needs at least one class");
        }
        if self.rotations == 0 {
            return invalid("EM needs at least one rotation");
        }
        if self.max_iterations == 0 {
            return invalid("max_iterations must be positive");
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return invalid("EM needs a positive noise variance");
        }
        if !(self.tolerance >= 0.0) {
            return invalid("tolerance must be nonnegative");
        }
        if let Some(p) = &self.fix_pi {
            if p.len() != self.classes {
                return invalid("fix_pi length differs from the class count");
            }
            validate_simplex(p, false)?;
        }
        Ok(())
    }
}

/// Hard assignment and posterior mass per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsibilitySummary {
    pub labels: Vec<usize>,
    pub rotation_indices: Vec<usize>,
    pub max_responsibility: Vec<f64>,
    /// Expected number of observations per class.
    pub class_totals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmResult {
    pub coeffs: Vec<Coefficients>,
    pub weights: Vec<f64>,
    pub responsibilities: ResponsibilitySummary,
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: f64,
}

impl EmResult {
    /// True when no iteration lowered the log-likelihood beyond the slack.
    pub fn is_monotone(&self) -> bool {
        self.log_likelihood
            .windows(2)
            .all(|w| w[1] - w[0] >= -MONOTONE_SLACK * w[0].abs().max(1.0))
    }
}

/// Current EM parameters.
#[derive(Debug, Clone)]
pub struct EmModel {
    layout: std::sync::Arc<Layout>,
    classes: Vec<Vec<Complex64>>,
    weights: Vec<f64>,
    rotations: usize,
    sigma2: f64,
    /// `templates[j * R + r]` is class `j` rotated by `2 pi r / R`.
    templates: Vec<Vec<Complex64>>,
    template_energy: Vec<f64>,
}

fn energy_weights(layout: &Layout) -> Vec<f64> {
    (0..layout.frequencies())
        .flat_map(|k| std::iter::repeat_n(if k == 0 { 1.0 } else { 2.0 }, layout.count(k)))
        .collect()
}

impl EmModel {
    pub fn new(
        layout: std::sync::Arc<Layout>,
        classes: Vec<Vec<Complex64>>,
        weights: Vec<f64>,
        rotations: usize,
        sigma2: f64,
    ) -> Self {
        let w = energy_weights(&layout);
        let mut templates = Vec::with_capacity(classes.len() * rotations);
        for a in &classes {
            for r in 0..rotations {
                let theta = 2.0 * PI * r as f64 / rotations as f64;
                let mut t = a.clone();
                crate::coeffs::rotate_in_place(&layout, &mut t, theta);
                templates.push(t);
            }
        }
        let template_energy = classes
            .iter()
            .map(|a| a.iter().zip(&w).map(|(v, w)| w * v.norm_sqr()).sum())
            .collect();
        EmModel {
            layout,
            classes,
            weights,
            rotations,
            sigma2,
            templates,
            template_energy,
        }
    }

    /// Log of the unnormalized posterior for every `(class, rotation)`, in
    /// `j * R + r` order.
    fn log_posterior(&self, y: &[Complex64], w: &[f64]) -> Vec<f64> {
        let yy: f64 = y.iter().zip(w).map(|(v, w)| w * v.norm_sqr()).sum();
        let log_r = (self.rotations as f64).ln();
        let mut out = Vec::with_capacity(self.templates.len());
        for (j, pj) in self.weights.iter().enumerate() {
            let lw = if *pj > 0.0 {
                pj.ln() - log_r
            } else {
                f64::NEG_INFINITY
            };
            for r in 0..self.rotations {
                let t = &self.templates[j * self.rotations + r];
                let cross: f64 = t
                    .iter()
                    .zip(y)
                    .zip(w)
                    .map(|((a, b), w)| w * (a.re * b.re + a.im * b.im))
                    .sum();
                let d = (yy + self.template_energy[j] - 2.0 * cross).max(0.0);
                out.push(lw - d / (2.0 * self.sigma2));
            }
        }
        out
    }

    /// Posterior over `(class, rotation)` for one observation and its
    /// log-likelihood.
    pub fn responsibilities(&self, y: &[Complex64]) -> (Vec<f64>, f64) {
        let w = energy_weights(&self.layout);
        let mut lp = self.log_posterior(y, &w);
        let ll = log_sum_exp(&lp);
        for v in &mut lp {
            *v = (*v - ll).exp();
        }
        (lp, ll)
    }

    pub fn classes(&self) -> &[Vec<Complex64>] {
        &self.classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return top;
    }
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// Per-chunk sufficient statistics of one E-step.
struct Partial {
    numer: Vec<Vec<Complex64>>,
    mass: Vec<f64>,
    ll: f64,
    labels: Vec<(usize, usize, f64)>,
}

fn e_step(model: &EmModel, stack: &CoeffStack) -> Vec<Partial> {
    let layout = stack.layout();
    let w = energy_weights(layout);
    let k = model.classes.len();
    let rr = model.rotations;
    let nf = layout.frequencies();
    // phases[r][k] = e^{+i k theta_r}, the inverse rotation
    let phases: Vec<Vec<Complex64>> = (0..rr)
        .map(|r| {
            let theta = 2.0 * PI * r as f64 / rr as f64;
            (0..nf)
                .map(|f| Complex64::from_polar(1.0, f as f64 * theta))
                .collect()
        })
        .collect();
    par::map_chunks(stack.len(), CHUNK, |range| {
        let mut part = Partial {
            numer: vec![vec![Complex64::new(0.0, 0.0); layout.len()]; k],
            mass: vec![0.0; k],
            ll: 0.0,
            labels: Vec::with_capacity(range.len()),
        };
        let mut s = vec![Complex64::new(0.0, 0.0); nf];
        for i in range {
            let y = stack.row(i);
            let mut lp = model.log_posterior(y, &w);
            let ll = log_sum_exp(&lp);
            part.ll += ll;
            let mut best = (0, 0.0);
            for (idx, v) in lp.iter_mut().enumerate() {
                *v = (*v - ll).exp();
                if *v > best.1 {
                    best = (idx, *v);
                }
            }
            part.labels.push((best.0 / rr, best.0 % rr, best.1));
            for j in 0..k {
                let g = &lp[j * rr..(j + 1) * rr];
                let mass: f64 = g.iter().sum();
                if mass == 0.0 {
                    continue;
                }
                part.mass[j] += mass;
                for (f, sf) in s.iter_mut().enumerate() {
                    *sf = g.iter().zip(&phases).map(|(gr, ph)| ph[f] * *gr).sum();
                }
                let num = &mut part.numer[j];
                for (f, sf) in s.iter().enumerate() {
                    for idx in layout.range(f) {
                        num[idx] += y[idx] * sf;
                    }
                }
            }
        }
        part
    })
}

/// Runs EM from `K` randomly chosen observations.
pub fn em_classify(stack: &CoeffStack, options: &EmOptions) -> Result<EmResult> {
    options.validate()?;
    let n = stack.len();
    let k = options.classes;
    if n < k {
        return invalid(format!("EM needs at least {k} observations, got {n}"));
    }
    let start = Instant::now();
    let layout = stack.layout().clone();
    let mut rng = stream_rng(options.seed, 0x454d);
    let seeds = sample(&mut rng, n, k).into_vec();
    let init: Vec<Vec<Complex64>> = seeds.iter().map(|&i| stack.row(i).to_vec()).collect();
    let weights = options
        .fix_pi
        .clone()
        .unwrap_or_else(|| vec![1.0 / k as f64; k]);
    let mut model = EmModel::new(
        layout.clone(),
        init,
        weights,
        options.rotations,
        options.sigma2,
    );

    let mut trace = Vec::new();
    let mut converged = false;
    let mut last_labels = Vec::new();
    let mut last_mass = vec![0.0; k];
    let mut iterations = 0;
    while iterations < options.max_iterations {
        let parts = e_step(&model, stack);
        iterations += 1;
        let mut numer = vec![vec![Complex64::new(0.0, 0.0); layout.len()]; k];
        let mut mass = vec![0.0; k];
        let mut ll = 0.0;
        let mut labels = Vec::with_capacity(n);
        for p in parts {
            for j in 0..k {
                mass[j] += p.mass[j];
                for (a, b) in numer[j].iter_mut().zip(&p.numer[j]) {
                    *a += b;
                }
            }
            ll += p.ll;
            labels.extend(p.labels);
        }
        let ll = ll / n as f64;
        let gain = trace.last().map(|prev: &f64| ll - prev);
        trace.push(ll);
        last_labels = labels;
        last_mass = mass.clone();
        if let Some(g) = gain {
            if g.abs() <= options.tolerance {
                converged = true;
                break;
            }
        }
        let classes: Vec<Vec<Complex64>> = numer
            .into_iter()
            .zip(&mass)
            .zip(model.classes())
            .map(|((num, &m), old)| {
                if m > 0.0 {
                    let mut a: Vec<Complex64> = num.iter().map(|v| v / m).collect();
                    for v in &mut a[layout.range(0)] {
                        v.im = 0.0;
                    }
                    a
                } else {
                    old.clone()
                }
            })
            .collect();
        let weights = match &options.fix_pi {
            Some(p) => p.clone(),
            None => mass.iter().map(|m| m / n as f64).collect(),
        };
        model = EmModel::new(
            layout.clone(),
            classes,
            weights,
            options.rotations,
            options.sigma2,
        );
    }
    let monotone = trace
        .windows(2)
        .all(|w| w[1] - w[0] >= -MONOTONE_SLACK * w[0].abs().max(1.0));
    if !monotone {
        log::warn!("EM log-likelihood decreased");
    }
    let coeffs = model
        .classes
        .iter()
        .map(|a| Coefficients::new(layout.clone(), a.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmResult {
        coeffs,
        weights: model.weights.clone(),
        responsibilities: ResponsibilitySummary {
            labels: last_labels.iter().map(|l| l.0).collect(),
            rotation_indices: last_labels.iter().map(|l| l.1).collect(),
            max_responsibility: last_labels.iter().map(|l| l.2).collect(),
            class_totals: last_mass,
        },
        log_likelihood: trace,
        iterations,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
