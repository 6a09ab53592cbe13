//! End-to-end experiments: simulate, expand, sPCA, invariants, solve,
//! evaluate, and the EM comparison.
//!
//! [`run_experiment`] keeps everything in memory. The file-based stages used
//! by the command line live in [`crate::runner`].

use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis, BasisSpec};
use crate::coeffs::{CoeffStack, Coefficients};
use crate::em::{em_classify, EmOptions, EmResult};
use crate::error::{config_error, Error, Result};
use crate::evaluation::{evaluate, EvaluationReport, SteerableImage};
use crate::image::Image;
use crate::invariants::{estimate_mixed_invariants, MixedInvariants};
use crate::observation::{
    generate_phantoms_with, sigma_for_snr, stream_rng, MixtureSpec, ObservationSampler,
    PhantomOptions,
};
use crate::par;
use crate::solver::{solve, Method, MixtureEstimate, SolverOptions};
use crate::spca::{fit_spca_with, SpcaBasis, SpcaOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PiName {
    Uniform,
}

/// True class distribution: `"uniform"` or explicit weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PiSpec {
    Named(PiName),
    Weights(Vec<f64>),
}

/// Whether the solver holds the mixing weights at the truth or estimates them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PiMode {
    Known,
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub restarts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub method: Method,
    pub stop_objective: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let d = SolverOptions::default();
        SolverSettings {
            restarts: d.restarts,
            max_iterations: d.max_iterations,
            gradient_tolerance: d.gradient_tolerance,
            method: d.method,
            stop_objective: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSettings {
    /// One EM run per entry.
    pub rotations: Vec<usize>,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for EmSettings {
    fn default() -> Self {
        EmSettings {
            rotations: vec![64],
            max_iterations: 200,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub classes: usize,
    pub side: usize,
    pub observations: usize,
    /// Exactly one of `snr` and `sigma` is given.
    pub snr: Option<f64>,
    pub sigma: Option<f64>,
    pub pi: PiSpec,
    pub pi_mode: PiMode,
    pub shift_radius: f64,
    pub bandlimit: f64,
    pub phantom: PhantomOptions,
    pub spca: SpcaOptions,
    pub seed: u64,
    pub solver: SolverSettings,
    pub em: Option<EmSettings>,
    /// Observations synthesized and expanded per batch.
    pub batch_size: usize,
    /// Also write the observation images and their expansion.
    pub write_observations: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            classes: 2,
            side: 33,
            observations: 2000,
            snr: Some(1.0),
            sigma: None,
            pi: PiSpec::Named(PiName::Uniform),
            pi_mode: PiMode::Known,
            shift_radius: 0.0,
            bandlimit: 0.4,
            phantom: PhantomOptions::default(),
            spca: SpcaOptions::default(),
            seed: 0,
            solver: SolverSettings::default(),
            em: None,
            batch_size: 500,
            write_observations: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            field: json_field(&e.to_string()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// True mixing weights.
    pub fn pi_weights(&self) -> Vec<f64> {
        match &self.pi {
            PiSpec::Named(PiName::Uniform) => vec![1.0 / self.classes as f64; self.classes],
            PiSpec::Weights(w) => w.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return config_error("classes", "must be at least 1");
        }
        if self.side < 9 || self.side.is_multiple_of(2) && !self.phantom.allow_even_side {
            return config_error(
                "side",
                format!("{} is not an odd size of at least 9", self.side),
            );
        }
        if self.observations < self.classes {
            return config_error("observations", "must be at least the number of classes");
        }
        match (self.snr, self.sigma) {
            (Some(s), None) if s > 0.0 && s.is_finite() => {}
            (None, Some(s)) if s >= 0.0 && s.is_finite() => {}
            (Some(_), None) => return config_error("snr", "must be a positive number"),
            (None, Some(_)) => return config_error("sigma", "must be a nonnegative number"),
            _ => return config_error("snr", "give exactly one of `snr` and `sigma`"),
        }
        if let PiSpec::Weights(w) = &self.pi {
            if w.len() != self.classes {
                return config_error(
                    "pi",
                    format!("has {} entries for {} classes", w.len(), self.classes),
                );
            }
            if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return config_error("pi", "entries must be positive");
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return config_error("pi", format!("entries sum to {total}, not 1"));
            }
        }
        if !(self.shift_radius >= 0.0) || !self.shift_radius.is_finite() {
            return config_error("shift_radius", "must be a nonnegative number");
        }
        if !(self.bandlimit > 0.0 && self.bandlimit <= 0.5) {
            return config_error("bandlimit", "must lie in (0, 0.5]");
        }
        let p = &self.phantom;
        if p.blobs == 0 || !(p.min_width > 0.0) || !(p.max_width >= p.min_width) {
            return config_error(
                "phantom",
                "needs at least one blob and 0 < min_width <= max_width",
            );
        }
        if !(self.spca.threshold_factor > 0.0) {
            return config_error("spca.threshold_factor", "must be positive");
        }
        let s = &self.solver;
        if s.restarts == 0 {
            return config_error("solver.restarts", "must be at least 1");
        }
        if s.max_iterations == 0 {
            return config_error("solver.max_iterations", "must be at least 1");
        }
        if !(s.gradient_tolerance > 0.0) || !s.gradient_tolerance.is_finite() {
            return config_error("solver.gradient_tolerance", "must be positive");
        }
        if let Some(em) = &self.em {
            if em.rotations.is_empty() || em.rotations.contains(&0) {
                return config_error("em.rotations", "needs at least one positive rotation count");
            }
            if em.max_iterations == 0 {
                return config_error("em.max_iterations", "must be at least 1");
            }
            if !(em.tolerance >= 0.0) {
                return config_error("em.tolerance", "must be nonnegative");
            }
            if self.sigma == Some(0.0) {
                return config_error("em", "EM needs positive noise");
            }
        }
        if self.batch_size == 0 {
            return config_error("batch_size", "must be at least 1");
        }
        Ok(())
    }

    pub fn seeds(&self) -> StageSeeds {
        let mut r = stream_rng(self.seed, 0x5eed);
        StageSeeds {
            phantoms: r.next_u64(),
            observations: r.next_u64(),
            solver: r.next_u64(),
            em: r.next_u64(),
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            restarts: self.solver.restarts,
            max_iterations: self.solver.max_iterations,
            gradient_tolerance: self.solver.gradient_tolerance,
            method: self.solver.method,
            fix_pi: match self.pi_mode {
                PiMode::Known => Some(self.pi_weights()),
                PiMode::Estimate => None,
            },
            seed: self.seeds().solver,
            stop_objective: self.solver.stop_objective,
        }
    }

    pub fn em_options(&self, rotations: usize, sigma2: f64) -> EmOptions {
        let em = self.em.clone().unwrap_or_default();
        EmOptions {
            max_iterations: em.max_iterations,
            tolerance: em.tolerance,
            seed: self.seeds().em,
            fix_pi: match self.pi_mode {
                PiMode::Known => Some(self.pi_weights()),
                PiMode::Estimate => None,
            },
            ..EmOptions::new(self.classes, rotations, sigma2)
        }
    }
}

/// Best-effort field name from a serde error message such as
/// "unknown field `foo`" or "invalid type ... at line 1".
fn json_field(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub phantoms: u64,
    pub observations: u64,
    pub solver: u64,
    pub em: u64,
}

/// Values are stored as `f32` on disk; rounding here keeps in-memory runs
/// identical to runs that pass through files.
pub fn quantize(image: &Image) -> Image {
    let px = image.pixels().iter().map(|&v| v as f32 as f64).collect();
    Image::from_pixels(image.side(), px).expect("same size")
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub phantoms: Vec<Image>,
    pub spec: MixtureSpec,
    pub seeds: StageSeeds,
}

impl Simulation {
    pub fn sigma(&self) -> f64 {
        self.spec.sigma
    }

    pub fn sampler(&self) -> Result<ObservationSampler<'_>> {
        ObservationSampler::new(&self.phantoms, &self.spec, self.seeds.observations)
    }

    /// Quantized observations `range` with their labels.
    pub fn draw_batch(&self, range: std::ops::Range<usize>) -> Result<(Vec<Image>, Vec<usize>)> {
        let sampler = self.sampler()?;
        let start = range.start;
        let draws = par::map_range(range.len(), |i| sampler.draw(start + i));
        Ok(draws
            .into_iter()
            .map(|d| (quantize(&d.image), d.label))
            .unzip())
    }
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let phantoms: Vec<Image> =
        generate_phantoms_with(cfg.classes, cfg.side, seeds.phantoms, &cfg.phantom)?
            .iter()
            .map(quantize)
            .collect();
    let sigma = match (cfg.snr, cfg.sigma) {
        (Some(snr), _) => sigma_for_snr(&phantoms, snr)?,
        (None, Some(s)) => s,
        (None, None) => unreachable!("validated"),
    };
    let spec = MixtureSpec::new(cfg.pi_weights(), sigma)?.with_shift_radius(cfg.shift_radius)?;
    Ok(Simulation {
        phantoms,
        spec,
        seeds,
    })
}

/// Synthesizes and expands all observations batch by batch, so the images are
/// never held together. Returns the coefficients and the true labels.
/// Drawing a batch is charged to `times.simulate`, expanding it to `times.expand`.
pub fn expand_observations(
    cfg: &ExperimentConfig,
    sim: &Simulation,
    basis: &BasisSpec,
    times: &mut StageTimes,
) -> Result<(CoeffStack, Vec<usize>)> {
    let mut stack = CoeffStack::new(basis.layout().clone());
    let mut labels = Vec::with_capacity(cfg.observations);
    for start in (0..cfg.observations).step_by(cfg.batch_size) {
        let end = (start + cfg.batch_size).min(cfg.observations);
        let (images, l) = timed(&mut times.simulate, || sim.draw_batch(start..end))?;
        let part = timed(&mut times.expand, || basis.expand_stack(&images))?;
        stack.append(part)?;
        labels.extend(l);
    }
    Ok((stack, labels))
}

/// Truth images after projection onto the sPCA basis.
pub fn truth_after_spca(
    phantoms: &[Image],
    basis: &BasisSpec,
    spca: &SpcaBasis,
) -> Result<Vec<SteerableImage>> {
    phantoms
        .iter()
        .map(|p| SteerableImage::new(&spca.denoise(&basis.expand(p)?)?, basis))
        .collect()
}

pub fn reconstruct_all(
    coeffs: &[Coefficients],
    spca: &SpcaBasis,
    basis: &BasisSpec,
) -> Result<Vec<Image>> {
    coeffs
        .iter()
        .map(|c| spca.reconstruct_image(c, basis))
        .collect()
}

/// Wall times in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub simulate: f64,
    pub basis: f64,
    pub expand: f64,
    pub spca: f64,
    pub invariants: f64,
    pub solve: f64,
    pub reconstruct: f64,
    pub evaluate: f64,
}

impl StageTimes {
    /// Everything the moment method needs after simulation: basis, expansion,
    /// sPCA, invariants, solve and reconstruction.
    pub fn moment_end_to_end(&self) -> f64 {
        self.preprocessing() + self.invariants + self.solve + self.reconstruct
    }

    /// Basis, expansion and sPCA, shared by the moment method and EM.
    pub fn preprocessing(&self) -> f64 {
        self.basis + self.expand + self.spca
    }
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub rotations: usize,
    pub result: EmResult,
    pub images: Vec<Image>,
    pub report: EvaluationReport,
}

impl EmOutcome {
    /// EM from images to class averages: the shared preprocessing plus the
    /// EM iterations.
    pub fn end_to_end(&self, times: &StageTimes) -> f64 {
        times.preprocessing() + self.result.wall_time
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub simulation: Simulation,
    pub labels: Vec<usize>,
    pub basis: BasisSpec,
    pub spca: SpcaBasis,
    pub projected: CoeffStack,
    pub invariants: MixedInvariants,
    pub estimate: MixtureEstimate,
    pub truth_spca: Vec<SteerableImage>,
    pub estimate_images: Vec<Image>,
    pub report: EvaluationReport,
    pub em: Vec<EmOutcome>,
    pub times: StageTimes,
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f();
    *slot += t.elapsed().as_secs_f64();
    out
}

/// Runs the whole experiment in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let mut times = StageTimes::default();
    let sim = timed(&mut times.simulate, || simulate(cfg))?;
    let basis = timed(&mut times.basis, || build_basis(cfg.side, cfg.bandlimit))?;
    let (stack, labels) = expand_observations(cfg, &sim, &basis, &mut times)?;
    let sigma2 = sim.sigma() * sim.sigma();
    let (spca, projected) = timed(&mut times.spca, || {
        let sp = fit_spca_with(&stack, sigma2, &cfg.spca)?;
        let proj = sp.project_stack(&stack)?;
        Ok((sp, proj))
    })?;
    drop(stack);
    let invariants = timed(&mut times.invariants, || {
        estimate_mixed_invariants(&projected, sigma2)
    })?;
    let estimate = timed(&mut times.solve, || {
        solve(&invariants, cfg.classes, &cfg.solver_options())
    })?;
    let estimate_images = timed(&mut times.reconstruct, || {
        reconstruct_all(&estimate.coeffs, &spca, &basis)
    })?;
    let pi = cfg.pi_weights();
    let (truth_spca, report) = timed(&mut times.evaluate, || {
        let truth = truth_after_spca(&sim.phantoms, &basis, &spca)?;
        let report = evaluate(
            &sim.phantoms,
            &truth,
            &estimate_images,
            Some((&estimate.pi_hat, &pi)),
        )?;
        Ok((truth, report))
    })?;
    let mut em = Vec::new();
    if let Some(settings) = &cfg.em {
        for &r in &settings.rotations {
            em.push(run_em(
                cfg,
                &projected,
                sigma2,
                r,
                &sim.phantoms,
                &truth_spca,
                &spca,
                &basis,
            )?);
        }
    }
    Ok(ExperimentRun {
        simulation: sim,
        labels,
        basis,
        spca,
        projected,
        invariants,
        estimate,
        truth_spca,
        estimate_images,
        report,
        em,
        times,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn run_em(
    cfg: &ExperimentConfig,
    projected: &CoeffStack,
    sigma2: f64,
    rotations: usize,
    phantoms: &[Image],
    truth_spca: &[SteerableImage],
    spca: &SpcaBasis,
    basis: &BasisSpec,
) -> Result<EmOutcome> {
    let result = em_classify(projected, &cfg.em_options(rotations, sigma2))?;
    let images = reconstruct_all(&result.coeffs, spca, basis)?;
    let pi = cfg.pi_weights();
    let report = evaluate(phantoms, truth_spca, &images, Some((&result.weights, &pi)))?;
    Ok(EmOutcome {
        rotations,
        result,
        images,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig {
            pi: PiSpec::Weights(vec![0.25, 0.75]),
            em: Some(EmSettings::default()),
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn pi_not_summing_to_one_names_the_field() {
        let err = ExperimentConfig::from_json(r#"{"classes": 2, "pi": [0.4, 0.5]}"#).unwrap_err();
        assert!(
            matches!(err, Error::Config { ref field, .. } if field == "pi"),
            "{err}"
        );
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"clases": 2}"#).unwrap_err();
        assert!(
            matches!(err, Error::Config { ref field, .. } if field == "clases"),
            "{err}"
        );
    }

    #[test]
    fn uniform_keyword_parses() {
        let cfg = ExperimentConfig::from_json(r#"{"classes": 4, "pi": "uniform"}"#).unwrap();
        assert_eq!(cfg.pi_weights(), vec![0.25; 4]);
    }

    #[test]
    fn small_run_recovers_classes() {
        let cfg = ExperimentConfig {
            side: 17,
            observations: 400,
            snr: Some(10.0),
            ..Default::default()
        };
        let run = run_experiment(&cfg).unwrap();
        assert!(
            run.report.estimation_error.unwrap() < 0.2,
            "{:?}",
            run.report
        );
        assert_eq!(run.labels.len(), 400);
    }
}
