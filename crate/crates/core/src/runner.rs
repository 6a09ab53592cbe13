//! File-based stages and the run manifest.
//!
//! Every stage reads its inputs from the output directory, writes its outputs
//! there and appends one record to `manifest.json`. Output files carry no
//! wall times, so identical configs and seeds give byte-identical outputs;
//! timings live only in the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{build_basis, BasisSpec};
use crate::coeffs::CoeffStack;
use crate::em::MONOTONE_SLACK;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvaluationReport};
use crate::image::Image;
use crate::invariants::{estimate_mixed_invariants, MixedInvariants};
use crate::observation::snr;
use crate::pipeline::{
    reconstruct_all, run_em, run_experiment, simulate, truth_after_spca, EmOutcome,
    ExperimentConfig, ExperimentRun, Simulation, StageSeeds,
};
use crate::solver::{solve, MixtureEstimate};
use crate::spca::{fit_spca_with, SpcaBasis};
use crate::stackfile::{read_stack, StackFile, StackMetadata};

pub const MANIFEST: &str = "manifest.json";
pub const PHANTOMS: &str = "phantoms.stack";
pub const OBSERVATIONS: &str = "observations.stack";
pub const TRUTH: &str = "truth.json";
pub const COEFFICIENTS: &str = "coefficients.stack";
pub const SPCA: &str = "spca.json";
pub const SPCA_COEFFICIENTS: &str = "spca_coefficients.stack";
pub const INVARIANTS: &str = "invariants.json";
pub const ESTIMATE: &str = "estimate.json";
pub const ESTIMATES: &str = "estimates.stack";
pub const REPORT: &str = "report.json";
pub const ERROR_CSV: &str = "error_vs_snr.csv";
pub const CLASS_CSV: &str = "per_class.csv";
pub const EM: &str = "em.json";
pub const EM_CSV: &str = "em_vs_rotations.csv";

pub fn em_stack_name(rotations: usize) -> String {
    format!("em_R{rotations}.stack")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").expect("string write");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// File name to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Seconds per timed step of the stage.
    pub wall_times: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub package: String,
    pub stack_format: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub seeds: StageSeeds,
    pub versions: Versions,
    pub stages: Vec<StageRecord>,
    /// Scalar results, copied from the report files.
    pub metrics: BTreeMap<String, f64>,
    /// False when the solver missed its gradient tolerance on every restart.
    pub converged: Option<bool>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            config: cfg.clone(),
            seeds: cfg.seeds(),
            versions: Versions {
                package: env!("CARGO_PKG_VERSION").to_string(),
                stack_format: crate::stackfile::VERSION,
            },
            stages: Vec::new(),
            metrics: BTreeMap::new(),
            converged: None,
        }
    }

    /// Loads the manifest of `dir`, or starts one. An existing manifest
    /// written for a different config is an error.
    pub fn open(dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(RunManifest::new(command, cfg));
        }
        let mut m: RunManifest = read_json(&path)?;
        if m.config != *cfg {
            return Err(Error::Config {
                field: "config".into(),
                message: format!("{} was written for a different config", path.display()),
            });
        }
        m.command = format!("{} {command}", m.command);
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST), self)
    }

    /// Output hashes of every stage, keyed by `stage/file`.
    pub fn output_hashes(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for s in &self.stages {
            for (f, h) in &s.outputs {
                out.insert(format!("{}/{f}", s.stage), h.clone());
            }
        }
        out
    }
}

/// Writes files into one directory and records their hashes.
struct StageWriter<'a> {
    dir: &'a Path,
    record: StageRecord,
}

impl<'a> StageWriter<'a> {
    fn new(dir: &'a Path, stage: &str) -> Self {
        StageWriter {
            dir,
            record: StageRecord {
                stage: stage.to_string(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                wall_times: BTreeMap::new(),
            },
        }
    }

    fn input(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.record
            .inputs
            .insert(name.to_string(), sha256_hex(&bytes));
        Ok(path)
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.record
            .outputs
            .insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn stack(&mut self, name: &str, stack: &StackFile) -> Result<()> {
        let bytes = crate::stackfile::encode_stack(stack)?;
        self.bytes(name, &bytes)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    fn time(&mut self, step: &str, seconds: f64) {
        *self.record.wall_times.entry(step.to_string()).or_default() += seconds;
    }

    fn finish(self) -> StageRecord {
        self.record
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn timed<T>(w: &mut StageWriter, step: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    w.time(step, t.elapsed().as_secs_f64());
    Ok(out)
}

/// Ground truth kept for evaluation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub sigma: f64,
    pub snr: f64,
    pub pi: Vec<f64>,
    /// Zero-based class index per observation.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub classes: usize,
    pub side: usize,
    pub observations: usize,
    pub sigma: f64,
    pub snr: f64,
    pub bandlimit: f64,
    pub spca_components: usize,
    pub retained_counts: Vec<usize>,
    pub pi_true: Vec<f64>,
    pub pi_hat: Vec<f64>,
    pub objective_value: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub restarts_used: usize,
    pub iterations: usize,
    pub evaluation: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmSummary {
    pub rotations: usize,
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub monotone: bool,
    pub log_likelihood: Vec<f64>,
    pub labels: Vec<usize>,
    pub evaluation: EvaluationReport,
}

impl EmSummary {
    fn new(o: &EmOutcome) -> Self {
        EmSummary {
            rotations: o.rotations,
            weights: o.result.weights.clone(),
            iterations: o.result.iterations,
            converged: o.result.converged,
            monotone: o.result.is_monotone(),
            log_likelihood: o.result.log_likelihood.clone(),
            labels: o.result.responsibilities.labels.clone(),
            evaluation: o.report.clone(),
        }
    }
}

fn image_meta(cfg: &ExperimentConfig, sigma: f64, seed: u64) -> StackMetadata {
    StackMetadata {
        side: Some(cfg.side),
        classes: Some(cfg.classes),
        sigma: Some(sigma),
        seed: Some(seed),
        ..Default::default()
    }
}

fn coeff_meta(cfg: &ExperimentConfig, sigma: f64, basis: &BasisSpec) -> StackMetadata {
    StackMetadata {
        basis_hash: Some(sha256_hex(basis.fingerprint().as_bytes())),
        ..image_meta(cfg, sigma, cfg.seeds().observations)
    }
}

fn truth_record(
    cfg: &ExperimentConfig,
    sim: &Simulation,
    labels: Vec<usize>,
) -> Result<TruthRecord> {
    Ok(TruthRecord {
        sigma: sim.sigma(),
        snr: snr(&sim.phantoms, sim.sigma())?,
        pi: cfg.pi_weights(),
        labels,
    })
}

fn run_report(
    cfg: &ExperimentConfig,
    truth: &TruthRecord,
    spca: &SpcaBasis,
    est: &MixtureEstimate,
    evaluation: EvaluationReport,
) -> RunReport {
    RunReport {
        classes: cfg.classes,
        side: cfg.side,
        observations: cfg.observations,
        sigma: truth.sigma,
        snr: truth.snr,
        bandlimit: cfg.bandlimit,
        spca_components: spca.total_components(),
        retained_counts: spca.retained_counts().to_vec(),
        pi_true: truth.pi.clone(),
        pi_hat: est.pi_hat.clone(),
        objective_value: est.objective_value,
        gradient_norm: est.gradient_norm,
        converged: est.converged,
        restarts_used: est.restarts_used,
        iterations: est.iterations,
        evaluation,
    }
}

fn error_csv(r: &RunReport) -> String {
    let e = &r.evaluation;
    format!(
        "snr,sigma,spca_error,estimation_error,dist,dist_r,tv_distance\n{},{},{},{},{},{},{}\n",
        r.snr,
        r.sigma,
        opt(e.spca_error),
        opt(e.estimation_error),
        e.dist,
        e.dist_r,
        opt(e.tv_distance)
    )
}

fn class_csv(r: &RunReport) -> String {
    let e = &r.evaluation;
    let mut s = String::from("class,matched_estimate,error,aligning_angle,pi_true,pi_hat\n");
    for i in 0..e.per_class_errors.len() {
        let j = e.permutation[i];
        writeln!(
            s,
            "{i},{j},{},{},{},{}",
            e.per_class_errors[i], e.aligning_angles[i], r.pi_true[i], r.pi_hat[j]
        )
        .expect("string write");
    }
    s
}

fn em_csv(em: &[EmSummary]) -> String {
    let mut s = String::from("rotations,estimation_error,dist_r,tv_distance,iterations,monotone\n");
    for e in em {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            e.rotations,
            opt(e.evaluation.estimation_error),
            e.evaluation.dist_r,
            opt(e.evaluation.tv_distance),
            e.iterations,
            e.monotone
        )
        .expect("string write");
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn set_metrics(m: &mut RunManifest, r: &RunReport) {
    let e = &r.evaluation;
    m.metrics.insert("sigma".into(), r.sigma);
    m.metrics.insert("snr".into(), r.snr);
    m.metrics
        .insert("spca_components".into(), r.spca_components as f64);
    m.metrics
        .insert("objective_value".into(), r.objective_value);
    m.metrics.insert("dist_r".into(), e.dist_r);
    for (k, v) in [
        ("spca_error", e.spca_error),
        ("estimation_error", e.estimation_error),
        ("tv_distance", e.tv_distance),
    ] {
        if let Some(v) = v {
            m.metrics.insert(k.into(), v);
        }
    }
    m.converged = Some(r.converged);
}

fn set_em_metrics(m: &mut RunManifest, em: &[EmSummary]) {
    for e in em {
        if let Some(v) = e.evaluation.estimation_error {
            m.metrics
                .insert(format!("em_R{}_estimation_error", e.rotations), v);
        }
    }
}

/// Result of a stage or pipeline run.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub manifest: RunManifest,
    /// `Some(false)` when the solver did not converge.
    pub converged: Option<bool>,
}

fn finish(dir: &Path, mut manifest: RunManifest, record: StageRecord) -> Result<StageOutcome> {
    manifest.stages.push(record);
    manifest.save(dir)?;
    Ok(StageOutcome {
        converged: manifest.converged,
        manifest,
    })
}

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

pub fn stage_simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutcome> {
    prepare(dir)?;
    let manifest = RunManifest::open(dir, "simulate", cfg)?;
    let mut w = StageWriter::new(dir, "simulate");
    let sim = timed(&mut w, "simulate", || simulate(cfg))?;
    let (images, labels) = timed(&mut w, "draw", || sim.draw_batch(0..cfg.observations))?;
    let sigma = sim.sigma();
    w.stack(
        PHANTOMS,
        &StackFile::from_images(&sim.phantoms, image_meta(cfg, sigma, sim.seeds.phantoms))?,
    )?;
    w.stack(
        OBSERVATIONS,
        &StackFile::from_images(&images, image_meta(cfg, sigma, sim.seeds.observations))?,
    )?;
    w.json(TRUTH, &truth_record(cfg, &sim, labels)?)?;
    finish(dir, manifest, w.finish())
}

fn load_basis(cfg: &ExperimentConfig, w: &mut StageWriter) -> Result<BasisSpec> {
    timed(w, "basis", || build_basis(cfg.side, cfg.bandlimit))
}

fn check_basis(file: &StackFile, basis: &BasisSpec) -> Result<()> {
    let want = sha256_hex(basis.fingerprint().as_bytes());
    match &file.header.metadata.basis_hash {
        Some(h) if *h == want => Ok(()),
        _ => Err(Error::Format(
            "coefficient stack was expanded in a different basis".into(),
        )),
    }
}

pub fn stage_expand(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutcome> {
    let manifest = RunManifest::open(dir, "expand", cfg)?;
    let mut w = StageWriter::new(dir, "expand");
    let obs = read_stack(&w.input(OBSERVATIONS)?)?;
    let images = obs.to_images()?;
    if images.first().is_some_and(|im| im.side() != cfg.side) {
        return Err(Error::Format(
            "observation size differs from the config".into(),
        ));
    }
    let sigma = obs.header.metadata.sigma.unwrap_or(0.0);
    let basis = load_basis(cfg, &mut w)?;
    let mut stack = CoeffStack::new(basis.layout().clone());
    timed(&mut w, "expand", || {
        for chunk in images.chunks(cfg.batch_size) {
            stack.append(basis.expand_stack(chunk)?)?;
        }
        Ok(())
    })?;
    w.stack(
        COEFFICIENTS,
        &StackFile::from_coefficients(&stack, coeff_meta(cfg, sigma, &basis))?,
    )?;
    finish(dir, manifest, w.finish())
}

fn read_coefficients(w: &mut StageWriter, name: &str) -> Result<(CoeffStack, f64, StackFile)> {
    let file = read_stack(&w.input(name)?)?;
    let stack = file.to_coefficients()?;
    let sigma = file
        .header
        .metadata
        .sigma
        .ok_or_else(|| Error::Format(format!("{name} lacks the noise level")))?;
    Ok((stack, sigma, file))
}

pub fn stage_spca(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutcome> {
    let manifest = RunManifest::open(dir, "spca", cfg)?;
    let mut w = StageWriter::new(dir, "spca");
    let (stack, sigma, file) = read_coefficients(&mut w, COEFFICIENTS)?;
    let (sp, proj) = timed(&mut w, "spca", || {
        let sp = fit_spca_with(&stack, sigma * sigma, &cfg.spca)?;
        let proj = sp.project_stack(&stack)?;
        Ok((sp, proj))
    })?;
    w.json(SPCA, &sp)?;
    let meta = StackMetadata {
        layout: None,
        ..file.header.metadata.clone()
    };
    w.stack(
        SPCA_COEFFICIENTS,
        &StackFile::from_coefficients(&proj, meta)?,
    )?;
    finish(dir, manifest, w.finish())
}

pub fn stage_invariants(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutcome> {
    let manifest = RunManifest::open(dir, "invariants", cfg)?;
    let mut w = StageWriter::new(dir, "invariants");
    let (proj, sigma, _) = read_coefficients(&mut w, SPCA_COEFFICIENTS)?;
    let inv = timed(&mut w, "invariants", || {
        estimate_mixed_invariants(&proj, sigma * sigma)
    })?;
    w.json(INVARIANTS, &inv)?;
    finish(dir, manifest, w.finish())
}

fn estimate_stack(
    cfg: &ExperimentConfig,
    images: &[Image],
    sigma: f64,
    seed: u64,
) -> Result<StackFile> {
    StackFile::from_images(images, image_meta(cfg, sigma, seed))
}

pub fn stage_solve(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutcome> {
    let mut manifest = RunManifest::open(dir, "solve", cfg)?;
    let mut w = StageWriter::new(dir, "solve");
    let inv: MixedInvariants = read_json(&w.input(INVARIANTS)?)?;
    let sp: SpcaBasis = read_json(&w.input(SPCA)?)?;
    let truth: TruthRecord = read_json(&w.input(TRUTH)?)?;
    let est = timed(&mut w, "solve", || {
        solve(&inv, cfg.classes, &cfg.solver_options())
    })?;
    let basis = load_basis(cfg, &mut w)?;
    let images = timed(&mut w, "reconstruct", || {
        reconstruct_all(&est.coeffs, &sp, &basis)
    })?;
    w.json(ESTIMATE, &est)?;
    w.stack(
        ESTIMATES,
        &estimate_stack(cfg, &images, truth.sigma, cfg.seeds().solver)?,
    )?;
    manifest.converged = Some(est.converged);
    finish(dir, manifest, w.finish())
}

pub fn stage_evaluate(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutcome> {
    let mut manifest = RunManifest::open(dir, "evaluate", cfg)?;
    let mut w = StageWriter::new(dir, "evaluate");
    let phantoms = read_stack(&w.input(PHANTOMS)?)?.to_images()?;
    let sp: SpcaBasis = read_json(&w.input(SPCA)?)?;
    let est: MixtureEstimate = read_json(&w.input(ESTIMATE)?)?;
    let truth: TruthRecord = read_json(&w.input(TRUTH)?)?;
    let basis = load_basis(cfg, &mut w)?;
    // rebuilt from the f64 coefficients; estimates.stack is f32
    let images = reconstruct_all(&est.coeffs, &sp, &basis)?;
    let report = timed(&mut w, "evaluate", || {
        let ts = truth_after_spca(&phantoms, &basis, &sp)?;
        let ev = evaluate(&phantoms, &ts, &images, Some((&est.pi_hat, &truth.pi)))?;
        Ok(run_report(cfg, &truth, &sp, &est, ev))
    })?;
    write_report(&mut w, &report)?;
    set_metrics(&mut manifest, &report);
    finish(dir, manifest, w.finish())
}

fn write_report(w: &mut StageWriter, report: &RunReport) -> Result<()> {
    w.json(REPORT, report)?;
    w.bytes(ERROR_CSV, error_csv(report).as_bytes())?;
    w.bytes(CLASS_CSV, class_csv(report).as_bytes())
}

fn write_em(
    w: &mut StageWriter,
    cfg: &ExperimentConfig,
    outcomes: &[EmOutcome],
    sigma: f64,
) -> Result<Vec<EmSummary>> {
    let summaries: Vec<EmSummary> = outcomes.iter().map(EmSummary::new).collect();
    for o in outcomes {
        w.time(&format!("em_R{}", o.rotations), o.result.wall_time);
        let stack = estimate_stack(cfg, &o.images, sigma, cfg.seeds().em)?;
        w.stack(&em_stack_name(o.rotations), &stack)?;
    }
    w.json(EM, &summaries)?;
    w.bytes(EM_CSV, em_csv(&summaries).as_bytes())?;
    Ok(summaries)
}

pub fn stage_em(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutcome> {
    let Some(settings) = &cfg.em else {
        return Err(Error::Config {
            field: "em".into(),
            message: "the em stage needs an `em` section".into(),
        });
    };
    let mut manifest = RunManifest::open(dir, "em", cfg)?;
    let mut w = StageWriter::new(dir, "em");
    let (proj, sigma, file) = read_coefficients(&mut w, SPCA_COEFFICIENTS)?;
    let sp: SpcaBasis = read_json(&w.input(SPCA)?)?;
    let phantoms = read_stack(&w.input(PHANTOMS)?)?.to_images()?;
    let basis = load_basis(cfg, &mut w)?;
    check_basis(&file, &basis)?;
    let ts = truth_after_spca(&phantoms, &basis, &sp)?;
    let outcomes = settings
        .rotations
        .iter()
        .map(|&r| run_em(cfg, &proj, sigma * sigma, r, &phantoms, &ts, &sp, &basis))
        .collect::<Result<Vec<_>>>()?;
    let summaries = write_em(&mut w, cfg, &outcomes, sigma)?;
    set_em_metrics(&mut manifest, &summaries);
    finish(dir, manifest, w.finish())
}

/// Everything in one process. Writes the same files as the individual stages
/// except the observation and full coefficient stacks, which are written only
/// with `write_observations`.
pub fn run_pipeline(cfg: &ExperimentConfig, dir: &Path) -> Result<(StageOutcome, ExperimentRun)> {
    prepare(dir)?;
    let mut manifest = RunManifest::new("pipeline", cfg);
    let run = run_experiment(cfg)?;
    let t = &run.times;
    let sim = &run.simulation;
    let sigma = sim.sigma();

    let mut w = StageWriter::new(dir, "simulate");
    w.time("simulate", t.simulate);
    w.stack(
        PHANTOMS,
        &StackFile::from_images(&sim.phantoms, image_meta(cfg, sigma, sim.seeds.phantoms))?,
    )?;
    if cfg.write_observations {
        let (images, _) = sim.draw_batch(0..cfg.observations)?;
        w.stack(
            OBSERVATIONS,
            &StackFile::from_images(&images, image_meta(cfg, sigma, sim.seeds.observations))?,
        )?;
    }
    let truth = truth_record(cfg, sim, run.labels.clone())?;
    w.json(TRUTH, &truth)?;
    manifest.stages.push(w.finish());

    let mut w = StageWriter::new(dir, "expand");
    w.time("basis", t.basis);
    w.time("expand", t.expand);
    manifest.stages.push(w.finish());

    let mut w = StageWriter::new(dir, "spca");
    w.time("spca", t.spca);
    w.json(SPCA, &run.spca)?;
    let meta = StackMetadata {
        layout: None,
        ..coeff_meta(cfg, sigma, &run.basis)
    };
    w.stack(
        SPCA_COEFFICIENTS,
        &StackFile::from_coefficients(&run.projected, meta)?,
    )?;
    manifest.stages.push(w.finish());

    let mut w = StageWriter::new(dir, "invariants");
    w.time("invariants", t.invariants);
    w.json(INVARIANTS, &run.invariants)?;
    manifest.stages.push(w.finish());

    let mut w = StageWriter::new(dir, "solve");
    w.time("solve", t.solve);
    w.time("reconstruct", t.reconstruct);
    w.json(ESTIMATE, &run.estimate)?;
    w.stack(
        ESTIMATES,
        &estimate_stack(cfg, &run.estimate_images, sigma, cfg.seeds().solver)?,
    )?;
    manifest.stages.push(w.finish());

    let mut w = StageWriter::new(dir, "evaluate");
    w.time("evaluate", t.evaluate);
    let report = run_report(cfg, &truth, &run.spca, &run.estimate, run.report.clone());
    write_report(&mut w, &report)?;
    set_metrics(&mut manifest, &report);
    manifest.stages.push(w.finish());

    if cfg.em.is_some() {
        let mut w = StageWriter::new(dir, "em");
        let summaries = write_em(&mut w, cfg, &run.em, sigma)?;
        set_em_metrics(&mut manifest, &summaries);
        manifest.stages.push(w.finish());
    }
    manifest
        .metrics
        .insert("moment_end_to_end_seconds".into(), t.moment_end_to_end());
    manifest.save(dir)?;
    Ok((
        StageOutcome {
            converged: manifest.converged,
            manifest,
        },
        run,
    ))
}

/// True when every EM trace in `summaries` rises up to the allowed slack.
pub fn em_traces_monotone(summaries: &[EmSummary]) -> bool {
    summaries.iter().all(|s| {
        s.log_likelihood
            .windows(2)
            .all(|w| w[1] - w[0] >= -MONOTONE_SLACK * w[0].abs().max(1.0))
    })
}
