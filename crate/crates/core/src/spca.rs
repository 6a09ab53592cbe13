//! Steerable PCA over Fourier-Bessel coefficients.
//!
//! Rotations act on frequency `k` by a scalar phase, so the covariance of the
//! rotation-augmented data is block diagonal in `k`. Each block is
//! eigendecomposed separately and the eigenvectors, being per-frequency linear
//! maps, commute with rotations.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::coeffs::{CoeffStack, Coefficients, Layout};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::par;

pub const DEFAULT_THRESHOLD_FACTOR: f64 = 1.005;
/// Eigenvalues below this fraction of the largest one are treated as zero,
/// which matters only when the noise level is zero.
const RELATIVE_FLOOR: f64 = 1e-12;
const CHUNK: usize = 256;

/// Noise-eigenvalue cutoff for a block with `p_k` rows fitted on `N`
/// observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `factor * sigma^2 * (1 + sqrt(p_k / N))^2`: the upper edge of the
    /// Marchenko-Pastur bulk of a white-noise block, real for `k = 0` and
    /// complex Hermitian otherwise.
    Edge,
    /// `factor * sigma^2 * (1 + sqrt(gamma_k))` with `gamma_0 = p_0 / N` and
    /// `gamma_k = p_k / (2N)`, which sits inside the noise bulk and so keeps
    /// some pure-noise components.
    Linear,
}

impl ThresholdRule {
    pub fn cutoff(self, factor: f64, sigma2: f64, k: usize, p: usize, n: usize) -> f64 {
        let ratio = p as f64 / n as f64;
        match self {
            ThresholdRule::Edge => factor * sigma2 * (1.0 + ratio.sqrt()).powi(2),
            ThresholdRule::Linear => {
                let gamma = if k == 0 { ratio } else { ratio / 2.0 };
                factor * sigma2 * (1.0 + gamma.sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpcaOptions {
    pub threshold_factor: f64,
    pub rule: ThresholdRule,
}

impl Default for SpcaOptions {
    fn default() -> Self {
        SpcaOptions {
            threshold_factor: DEFAULT_THRESHOLD_FACTOR,
            rule: ThresholdRule::Edge,
        }
    }
}

/// Eigen-decomposition of one frequency block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenBlock {
    /// All eigenvalues, descending and clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// Retained eigenvectors, column-major `p_k x r_k`.
    vectors: Vec<Complex64>,
    rows: usize,
    retained: usize,
    pub threshold: f64,
}

impl EigenBlock {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn retained(&self) -> usize {
        self.retained
    }

    /// Column `j` of the retained eigenvector matrix.
    pub fn vector(&self, j: usize) -> &[Complex64] {
        &self.vectors[j * self.rows..(j + 1) * self.rows]
    }

    pub fn matrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_column_slice(self.rows, self.retained, &self.vectors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpcaBasis {
    source: Arc<Layout>,
    layout: Arc<Layout>,
    /// Sample mean of the `k = 0` block.
    mean: Vec<f64>,
    blocks: Vec<EigenBlock>,
    observations: usize,
    sigma2: f64,
    options: SpcaOptions,
}

/// Fits steerable PCA with the default cutoff.
pub fn fit_spca(stack: &CoeffStack, sigma2: f64) -> Result<SpcaBasis> {
    fit_spca_with(stack, sigma2, &SpcaOptions::default())
}

pub fn fit_spca_with(stack: &CoeffStack, sigma2: f64, opts: &SpcaOptions) -> Result<SpcaBasis> {
    let n = stack.len();
    if n < 2 {
        return invalid(format!(
            "steerable PCA needs at least 2 observations, got {n}"
        ));
    }
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return invalid(format!(
            "noise variance {sigma2} must be a nonnegative number"
        ));
    }
    if !(opts.threshold_factor > 0.0) {
        return invalid("threshold factor must be positive");
    }
    let layout = stack.layout().clone();
    let p0 = layout.count(0);

    let mean = {
        let parts = par::map_chunks(n, CHUNK, |range| {
            let mut acc = vec![0.0; p0];
            for i in range {
                for (a, v) in acc.iter_mut().zip(&stack.row(i)[..p0]) {
                    *a += v.re;
                }
            }
            acc
        });
        let mut mean = vec![0.0; p0];
        for part in parts {
            for (m, v) in mean.iter_mut().zip(part) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        mean
    };

    let covs = covariance_blocks(stack, &mean);
    let decomposed: Vec<(Vec<f64>, Vec<Vec<Complex64>>)> =
        par::map_range(layout.frequencies(), |k| eigen_block(&covs[k], k == 0));
    let top = decomposed
        .iter()
        .filter_map(|(vals, _)| vals.first().copied())
        .fold(0.0f64, f64::max);

    let mut blocks = Vec::with_capacity(layout.frequencies());
    for (k, (vals, vecs)) in decomposed.into_iter().enumerate() {
        let p = layout.count(k);
        let threshold = opts.rule.cutoff(opts.threshold_factor, sigma2, k, p, n);
        let floor = RELATIVE_FLOOR * top;
        let retained = vals
            .iter()
            .take_while(|&&v| v > threshold && v > floor)
            .count();
        let mut flat = Vec::with_capacity(p * retained);
        for v in &vecs[..retained] {
            flat.extend_from_slice(v);
        }
        blocks.push(EigenBlock {
            eigenvalues: vals,
            vectors: flat,
            rows: p,
            retained,
            threshold,
        });
    }
    let mut counts: Vec<usize> = blocks.iter().map(|b| b.retained).collect();
    while counts.len() > 1 && counts.last() == Some(&0) {
        counts.pop();
    }
    log::debug!(
        "steerable PCA kept {} of {} components",
        counts.iter().sum::<usize>(),
        layout.len()
    );
    Ok(SpcaBasis {
        source: layout,
        layout: Arc::new(Layout::new(counts)),
        mean,
        blocks,
        observations: n,
        sigma2,
        options: *opts,
    })
}

/// Per-frequency `X_k X_k^* / N`, with the `k = 0` block centered.
fn covariance_blocks(stack: &CoeffStack, mean: &[f64]) -> Vec<Vec<Complex64>> {
    let layout = stack.layout();
    let n = stack.len();
    let sizes: Vec<usize> = layout.counts().iter().map(|p| p * p).collect();
    let parts = par::map_chunks(n, CHUNK, |range| {
        let mut acc: Vec<Vec<Complex64>> = sizes
            .iter()
            .map(|&s| vec![Complex64::new(0.0, 0.0); s])
            .collect();
        let mut centered = Vec::new();
        for i in range {
            let row = stack.row(i);
            for (k, block) in acc.iter_mut().enumerate() {
                let p = layout.count(k);
                let x = &row[layout.range(k)];
                let x: &[Complex64] = if k == 0 {
                    centered.clear();
                    centered.extend(
                        x.iter()
                            .zip(mean)
                            .map(|(v, m)| Complex64::new(v.re - m, 0.0)),
                    );
                    &centered
                } else {
                    x
                };
                for c in 0..p {
                    let xc = x[c].conj();
                    for r in c..p {
                        block[c * p + r] += x[r] * xc;
                    }
                }
            }
        }
        acc
    });
    let mut total: Vec<Vec<Complex64>> = sizes
        .iter()
        .map(|&s| vec![Complex64::new(0.0, 0.0); s])
        .collect();
    for part in parts {
        for (t, b) in total.iter_mut().zip(part) {
            for (x, y) in t.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    for (k, block) in total.iter_mut().enumerate() {
        let p = layout.count(k);
        for c in 0..p {
            for r in c..p {
                let v = block[c * p + r] / n as f64;
                block[c * p + r] = v;
                block[r * p + c] = v.conj();
            }
        }
    }
    total
}

/// Eigenvalues (descending, clamped at zero) and phase-normalized
/// eigenvectors of a column-major Hermitian block.
fn eigen_block(cov: &[Complex64], real: bool) -> (Vec<f64>, Vec<Vec<Complex64>>) {
    let p = (cov.len() as f64).sqrt().round() as usize;
    if p == 0 {
        return (Vec::new(), Vec::new());
    }
    let (vals, vecs): (Vec<f64>, Vec<Vec<Complex64>>) = if real {
        let m = DMatrix::from_fn(p, p, |r, c| cov[c * p + r].re);
        let e = SymmetricEigen::new(m);
        let vecs = e
            .eigenvectors
            .column_iter()
            .map(|c| c.iter().map(|&v| Complex64::new(v, 0.0)).collect())
            .collect();
        (e.eigenvalues.iter().copied().collect(), vecs)
    } else {
        let m = DMatrix::from_column_slice(p, p, cov);
        let e = SymmetricEigen::new(m);
        let vecs = e
            .eigenvectors
            .column_iter()
            .map(|c| c.iter().copied().collect())
            .collect();
        (e.eigenvalues.iter().copied().collect(), vecs)
    };
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let vals = order.iter().map(|&i| vals[i].max(0.0)).collect();
    let vecs = order
        .iter()
        .map(|&i| {
            let mut v = vecs[i].clone();
            normalize_phase(&mut v);
            v
        })
        .collect();
    (vals, vecs)
}

/// Rotates `v` so that its largest entry (first one, up to rounding) is real
/// and positive.
fn normalize_phase(v: &mut [Complex64]) {
    let top = v.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
    if top == 0.0 {
        return;
    }
    let pivot = v
        .iter()
        .position(|z| z.norm() >= top * (1.0 - 1e-9))
        .unwrap_or(0);
    let phase = v[pivot].conj() / v[pivot].norm();
    for z in v.iter_mut() {
        *z *= phase;
    }
}

impl SpcaBasis {
    /// Layout of the steerable coefficients the basis was fitted on.
    pub fn source_layout(&self) -> &Arc<Layout> {
        &self.source
    }

    /// Layout of the reduced coefficients: `r_k` per frequency.
    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn block(&self, k: usize) -> &EigenBlock {
        &self.blocks[k]
    }

    pub fn blocks(&self) -> &[EigenBlock] {
        &self.blocks
    }

    pub fn retained_counts(&self) -> &[usize] {
        self.layout.counts()
    }

    /// Total number of retained components.
    pub fn total_components(&self) -> usize {
        self.layout.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn observations(&self) -> usize {
        self.observations
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn options(&self) -> &SpcaOptions {
        &self.options
    }

    /// Steerable coefficients of the sample-mean image.
    pub fn mean_coefficients(&self) -> Coefficients {
        let mut c = Coefficients::zeros(self.source.clone());
        for (v, m) in c.block_mut(0).iter_mut().zip(&self.mean) {
            *v = Complex64::new(*m, 0.0);
        }
        c
    }

    fn check_source(&self, coeffs: &Coefficients) -> Result<()> {
        if **coeffs.layout() != *self.source {
            return Err(Error::LayoutMismatch);
        }
        Ok(())
    }

    fn check_reduced(&self, coeffs: &Coefficients) -> Result<()> {
        if **coeffs.layout() != *self.layout {
            return Err(Error::LayoutMismatch);
        }
        Ok(())
    }

    /// Centers the `k = 0` block and applies the adjoint of each block's
    /// eigenvector matrix.
    pub fn project(&self, coeffs: &Coefficients) -> Result<Coefficients> {
        self.check_source(coeffs)?;
        let mut out = vec![Complex64::new(0.0, 0.0); self.layout.len()];
        self.project_into(coeffs.values(), &mut out);
        Coefficients::new(self.layout.clone(), out)
    }

    fn project_into(&self, values: &[Complex64], out: &mut [Complex64]) {
        for k in 0..self.layout.frequencies() {
            let block = &self.blocks[k];
            let x = &values[self.source.range(k)];
            let dst = &mut out[self.layout.range(k)];
            for (j, d) in dst.iter_mut().enumerate() {
                let v = block.vector(j);
                let mut acc = Complex64::new(0.0, 0.0);
                if k == 0 {
                    for ((a, m), e) in x.iter().zip(&self.mean).zip(v) {
                        acc += e.conj() * (a.re - m);
                    }
                    acc.im = 0.0;
                } else {
                    for (a, e) in x.iter().zip(v) {
                        acc += e.conj() * a;
                    }
                }
                *d = acc;
            }
        }
    }

    pub fn project_stack(&self, stack: &CoeffStack) -> Result<CoeffStack> {
        if **stack.layout() != *self.source {
            return Err(Error::LayoutMismatch);
        }
        let m = self.layout.len();
        let parts = par::map_chunks(stack.len(), CHUNK, |range| {
            let mut out = vec![Complex64::new(0.0, 0.0); range.len() * m];
            for (slot, i) in range.enumerate() {
                self.project_into(stack.row(i), &mut out[slot * m..(slot + 1) * m]);
            }
            out
        });
        CoeffStack::from_data(self.layout.clone(), parts.concat())
    }

    /// Maps reduced coefficients back to steerable coefficients through the
    /// eigenvectors, without adding the mean.
    pub fn embed(&self, coeffs: &Coefficients) -> Result<Coefficients> {
        self.check_reduced(coeffs)?;
        let mut out = Coefficients::zeros(self.source.clone());
        for k in 0..self.layout.frequencies() {
            let block = &self.blocks[k];
            let a = coeffs.block(k);
            let dst = out.block_mut(k);
            for (j, &aj) in a.iter().enumerate() {
                for (d, e) in dst.iter_mut().zip(block.vector(j)) {
                    *d += e * aj;
                }
            }
        }
        out.force_real_dc();
        Ok(out)
    }

    /// Steerable coefficients `Phi a + mean`.
    pub fn reconstruct_coefficients(&self, coeffs: &Coefficients) -> Result<Coefficients> {
        let mut out = self.embed(coeffs)?;
        for (v, m) in out.block_mut(0).iter_mut().zip(&self.mean) {
            v.re += m;
        }
        Ok(out)
    }

    /// Image `Phi a + mean` synthesized in `basis`.
    pub fn reconstruct_image(&self, coeffs: &Coefficients, basis: &BasisSpec) -> Result<Image> {
        if **basis.layout() != *self.source {
            return Err(Error::LayoutMismatch);
        }
        basis.synthesize(&self.reconstruct_coefficients(coeffs)?)
    }

    /// Orthogonal projection of steerable coefficients onto the retained
    /// subspace (plus mean), as used for the truth-after-PCA reference.
    pub fn denoise(&self, coeffs: &Coefficients) -> Result<Coefficients> {
        self.reconstruct_coefficients(&self.project(coeffs)?)
    }
}

/// Reconstructs an image from reduced coefficients.
pub fn reconstruct_image(
    coeffs: &Coefficients,
    spca: &SpcaBasis,
    basis: &BasisSpec,
) -> Result<Image> {
    spca.reconstruct_image(coeffs, basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::rotate_coefficients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_coeffs(layout: &Arc<Layout>, rng: &mut ChaCha8Rng) -> Coefficients {
        let vals = (0..layout.len())
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let mut c = Coefficients::new(layout.clone(), vals).unwrap();
        c.force_real_dc();
        c
    }

    fn rotated_stack(a: &Coefficients, n: usize, seed: u64) -> CoeffStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = CoeffStack::new(a.layout().clone());
        for _ in 0..n {
            s.push(&rotate_coefficients(
                a,
                rng.random::<f64>() * std::f64::consts::TAU,
            ))
            .unwrap();
        }
        s
    }

    #[test]
    fn rank_one_blocks_keep_one_component() {
        let layout = Arc::new(Layout::new(vec![3, 4, 2, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_coeffs(&layout, &mut rng);
        let fit = fit_spca(&rotated_stack(&a, 50, 1), 0.0).unwrap();
        // k = 0 is constant across the stack, so centering removes it
        assert_eq!(fit.retained_counts(), &[0, 1, 1, 1]);
    }

    #[test]
    fn eigenvectors_are_orthonormal_and_sorted() {
        let layout = Arc::new(Layout::new(vec![4, 5, 3]));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = CoeffStack::new(layout.clone());
        for _ in 0..200 {
            s.push(&random_coeffs(&layout, &mut rng)).unwrap();
        }
        let fit = fit_spca(&s, 0.0).unwrap();
        for b in fit.blocks() {
            assert!(b.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            let m = b.matrix();
            let g = m.adjoint() * &m;
            for r in 0..g.nrows() {
                for c in 0..g.ncols() {
                    let target = if r == c { 1.0 } else { 0.0 };
                    assert!((g[(r, c)] - target).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn mean_projects_to_zero_and_zero_reconstructs_mean() {
        let layout = Arc::new(Layout::new(vec![3, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = CoeffStack::new(layout.clone());
        for _ in 0..40 {
            s.push(&random_coeffs(&layout, &mut rng)).unwrap();
        }
        let fit = fit_spca(&s, 0.0).unwrap();
        let p = fit.project(&fit.mean_coefficients()).unwrap();
        assert!(p.values().iter().all(|v| v.norm() < 1e-14));
        let z = Coefficients::zeros(fit.layout().clone());
        assert_eq!(
            fit.reconstruct_coefficients(&z).unwrap(),
            fit.mean_coefficients()
        );
    }

    #[test]
    fn rejects_small_or_bad_input() {
        let layout = Arc::new(Layout::new(vec![2]));
        let mut s = CoeffStack::new(layout.clone());
        s.push(&Coefficients::zeros(layout.clone())).unwrap();
        assert!(fit_spca(&s, 0.0).is_err());
        s.push(&Coefficients::zeros(layout)).unwrap();
        assert!(fit_spca(&s, -1.0).is_err());
    }

    #[test]
    fn threshold_rules_order() {
        let layout = Arc::new(Layout::new(vec![2, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = CoeffStack::new(layout.clone());
        for _ in 0..100 {
            s.push(&random_coeffs(&layout, &mut rng)).unwrap();
        }
        let edge = fit_spca(&s, 0.01).unwrap();
        let lin = fit_spca_with(
            &s,
            0.01,
            &SpcaOptions {
                rule: ThresholdRule::Linear,
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in edge.blocks().iter().zip(lin.blocks()) {
            assert!(a.threshold >= b.threshold);
        }
    }
}
