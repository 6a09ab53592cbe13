//! Error metrics that ignore in-plane rotations of each image and the order
//! of the classes.
//!
//! All image norms are taken over the support disk.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::coeffs::Coefficients;
use crate::error::{invalid, Error, Result};
use crate::image::{check_same_side, disk_mask, rotate_image, Image};
use crate::observation::validate_simplex;
use crate::par;

const GRID: usize = 360;
const ANGLE_TOL: f64 = 1e-4;
const BRUTE_FORCE_MAX: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dist: f64,
    pub dist_r: f64,
    /// `dist(I_i, estimate_{p(i)}) / |I_i|` for each truth image.
    pub per_class_errors: Vec<f64>,
    /// Estimate index matched to each truth image.
    pub permutation: Vec<usize>,
    /// Rotation applied to each truth image to align it with its match.
    pub aligning_angles: Vec<f64>,
    pub tv_distance: Option<f64>,
    pub spca_error: Option<f64>,
    pub estimation_error: Option<f64>,
}

fn disk_sq_dist(a: &Image, b: &Image, mask: &[bool]) -> f64 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((x, y), _)| (x - y) * (x - y))
        .sum()
}

fn disk_sq_norm(a: &Image, mask: &[bool]) -> f64 {
    a.pixels()
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(x, _)| x * x)
        .sum()
}

/// Grid search over `[0, 2 pi)` followed by golden-section refinement.
fn minimize_angle(f: impl Fn(f64) -> f64) -> (f64, f64) {
    let step = 2.0 * PI / GRID as f64;
    let mut best = (0.0, f(0.0));
    for i in 1..GRID {
        let t = i as f64 * step;
        let v = f(t);
        if v < best.1 {
            best = (t, v);
        }
    }
    let ratio = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (best.0 - step, best.0 + step);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > ANGLE_TOL {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    let (t, v) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    if v < best.1 {
        (t.rem_euclid(2.0 * PI), v)
    } else {
        best
    }
}

/// `min_theta |R_theta a - b|` over the disk and the minimizing angle.
pub fn rotational_distance(a: &Image, b: &Image) -> Result<(f64, f64)> {
    check_same_side(a, b)?;
    let mask = disk_mask(a.side());
    let (theta, sq) = minimize_angle(|t| {
        let r = rotate_image(a, t).expect("finite angle");
        disk_sq_dist(&r, b, &mask)
    });
    Ok((sq.max(0.0).sqrt(), theta))
}

/// Energy distance between coefficient vectors after rotating `a` by the
/// best angle, with the angle. Frequencies `k > 0` count twice, matching the
/// image-domain norm of a real image.
pub fn coefficient_distance(a: &Coefficients, b: &Coefficients) -> Result<(f64, f64)> {
    a.same_layout(b)?;
    let layout = a.layout();
    let (theta, sq) = minimize_angle(|t| {
        let mut s = 0.0;
        for k in 0..layout.frequencies() {
            let w = if k == 0 { 1.0 } else { 2.0 };
            let phase = num_complex::Complex64::from_polar(1.0, -(k as f64) * t);
            for (x, y) in a.block(k).iter().zip(b.block(k)) {
                s += w * (x * phase - y).norm_sqr();
            }
        }
        s
    });
    Ok((sq.max(0.0).sqrt(), theta))
}

/// Band-limited image that can be rotated exactly: the sum over frequencies
/// of `cos(k t) U_k + sin(k t) V_k`, kept on the disk pixels.
#[derive(Debug, Clone)]
pub struct SteerableImage {
    side: usize,
    disk: Vec<usize>,
    freqs: Vec<usize>,
    parts: Vec<Vec<f64>>,
    gram: Vec<f64>,
}

impl SteerableImage {
    pub fn new(coeffs: &Coefficients, basis: &BasisSpec) -> Result<Self> {
        if coeffs.layout() != basis.layout() {
            return Err(Error::LayoutMismatch);
        }
        let layout = coeffs.layout();
        let mut freqs = vec![0];
        let mut parts = vec![basis.synthesize_frequency(0, coeffs.block(0))?];
        let minus_i = num_complex::Complex64::new(0.0, -1.0);
        for k in 1..layout.frequencies() {
            let block = coeffs.block(k);
            if block.iter().all(|v| v.norm_sqr() == 0.0) {
                continue;
            }
            let turned: Vec<_> = block.iter().map(|v| v * minus_i).collect();
            parts.push(basis.synthesize_frequency(k, block)?);
            parts.push(basis.synthesize_frequency(k, &turned)?);
            freqs.push(k);
        }
        let n = parts.len();
        let gram = par::map_range(n * n, |ij| {
            let (i, j) = (ij / n, ij % n);
            if j < i {
                0.0
            } else {
                parts[i].iter().zip(&parts[j]).map(|(a, b)| a * b).sum()
            }
        });
        let mut gram = gram;
        for i in 0..n {
            for j in 0..i {
                gram[i * n + j] = gram[j * n + i];
            }
        }
        Ok(SteerableImage {
            side: basis.side(),
            disk: basis.disk_pixels().to_vec(),
            freqs,
            parts,
            gram,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    fn weights(&self, theta: f64) -> Vec<f64> {
        let mut c = vec![1.0];
        for &k in &self.freqs[1..] {
            let (s, co) = (k as f64 * theta).sin_cos();
            c.push(co);
            c.push(s);
        }
        c
    }

    /// The image rotated counter-clockwise by `theta`.
    pub fn rotated(&self, theta: f64) -> Image {
        let c = self.weights(theta);
        let mut img = Image::zeros(self.side);
        let px = img.pixels_mut();
        for (w, part) in c.iter().zip(&self.parts) {
            for (&i, v) in self.disk.iter().zip(part) {
                px[i] += w * v;
            }
        }
        img
    }

    pub fn image(&self) -> Image {
        self.rotated(0.0)
    }

    pub fn disk_norm(&self) -> f64 {
        let n = self.parts.len();
        let c = self.weights(0.0);
        quad(&self.gram, &c, n).max(0.0).sqrt()
    }

    /// `min_theta |R_theta self - other|` over the disk and the minimizing
    /// angle, with the rotation applied exactly.
    pub fn rotational_distance(&self, other: &Image) -> Result<(f64, f64)> {
        if other.side() != self.side {
            return Err(Error::SizeMismatch {
                expected: self.side,
                actual: other.side(),
            });
        }
        let px = other.pixels();
        let target: Vec<f64> = self.disk.iter().map(|&i| px[i]).collect();
        let h: Vec<f64> = self
            .parts
            .iter()
            .map(|p| p.iter().zip(&target).map(|(a, b)| a * b).sum())
            .collect();
        let jj: f64 = target.iter().map(|v| v * v).sum();
        let n = self.parts.len();
        let (theta, sq) = minimize_angle(|t| {
            let c = self.weights(t);
            quad(&self.gram, &c, n) - 2.0 * c.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + jj
        });
        Ok((sq.max(0.0).sqrt(), theta))
    }
}

fn quad(g: &[f64], c: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        let row = &g[i * n..(i + 1) * n];
        s += c[i] * row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

/// Rotation- and permutation-invariant distance between two image sets.
pub fn matched_set_distance(truth: &[Image], estimates: &[Image]) -> Result<EvaluationReport> {
    check_sets(truth.len(), estimates)?;
    for img in truth {
        check_same_side(&estimates[0], img)?;
    }
    let k = truth.len();
    let pairs = par::map_range(k * k, |ij| {
        rotational_distance(&truth[ij / k], &estimates[ij % k])
    });
    let mask = disk_mask(truth[0].side());
    let norms: Vec<f64> = truth
        .iter()
        .map(|t| disk_sq_norm(t, &mask).sqrt())
        .collect();
    report_from_pairs(pairs.into_iter().collect::<Result<Vec<_>>>()?, norms)
}

/// As [`matched_set_distance`], rotating band-limited truth images exactly.
pub fn matched_steerable_distance(
    truth: &[SteerableImage],
    estimates: &[Image],
) -> Result<EvaluationReport> {
    check_sets(truth.len(), estimates)?;
    let k = truth.len();
    let pairs = par::map_range(k * k, |ij| {
        truth[ij / k].rotational_distance(&estimates[ij % k])
    });
    let norms = truth.iter().map(|t| t.disk_norm()).collect();
    report_from_pairs(pairs.into_iter().collect::<Result<Vec<_>>>()?, norms)
}

fn check_sets(k: usize, estimates: &[Image]) -> Result<()> {
    if k == 0 {
        return invalid("empty image set");
    }
    if estimates.len() != k {
        return Err(Error::SizeMismatch {
            expected: k,
            actual: estimates.len(),
        });
    }
    for img in estimates {
        check_same_side(&estimates[0], img)?;
    }
    Ok(())
}

fn report_from_pairs(pairs: Vec<(f64, f64)>, norms: Vec<f64>) -> Result<EvaluationReport> {
    let k = norms.len();
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| pairs[i * k + j].0.powi(2)).collect())
        .collect();
    let permutation = assign(&cost);
    let total: f64 = (0..k).map(|i| cost[i][permutation[i]]).sum();
    let denom = norms.iter().map(|n| n * n).sum::<f64>().sqrt();
    let dist = total.sqrt();
    Ok(EvaluationReport {
        dist,
        dist_r: if denom > 0.0 { dist / denom } else { dist },
        per_class_errors: (0..k)
            .map(|i| {
                let d = pairs[i * k + permutation[i]].0;
                if norms[i] > 0.0 {
                    d / norms[i]
                } else {
                    d
                }
            })
            .collect(),
        aligning_angles: (0..k).map(|i| pairs[i * k + permutation[i]].1).collect(),
        permutation,
        tv_distance: None,
        spca_error: None,
        estimation_error: None,
    })
}

/// `1/2 sum_i |pi_hat[p(i)] - pi[i]|`.
pub fn tv_distance(pi_hat: &[f64], pi: &[f64], permutation: &[usize]) -> Result<f64> {
    if pi_hat.len() != pi.len() || permutation.len() != pi.len() {
        return Err(Error::SizeMismatch {
            expected: pi.len(),
            actual: pi_hat.len().min(permutation.len()),
        });
    }
    validate_simplex(pi_hat, false)?;
    validate_simplex(pi, false)?;
    let mut seen = vec![false; pi.len()];
    for &p in permutation {
        if p >= pi.len() || std::mem::replace(&mut seen[p], true) {
            return invalid("permutation is not a bijection");
        }
    }
    Ok(0.5
        * pi.iter()
            .enumerate()
            .map(|(i, v)| (pi_hat[permutation[i]] - v).abs())
            .sum::<f64>())
}

/// Full report: `truth_spca` are the truth images after projection onto the
/// sPCA basis, the reference for the estimation error. Errors are relative
/// to the disk norms of `truth_spca`.
pub fn evaluate(
    truth: &[Image],
    truth_spca: &[SteerableImage],
    estimates: &[Image],
    pi: Option<(&[f64], &[f64])>,
) -> Result<EvaluationReport> {
    let mut report = matched_steerable_distance(truth_spca, estimates)?;
    let spca = spca_error(truth, truth_spca)?;
    report.spca_error = Some(spca);
    report.estimation_error = Some(report.dist_r);
    if let Some((pi_hat, pi)) = pi {
        report.tv_distance = Some(tv_distance(pi_hat, pi, &report.permutation)?);
    }
    Ok(report)
}

/// `dist_r` between the truth images and their own sPCA projections, with the
/// classes in the same order and relative to the truth norms.
pub fn spca_error(truth: &[Image], truth_spca: &[SteerableImage]) -> Result<f64> {
    check_sets(truth_spca.len(), truth)?;
    let mask = disk_mask(truth[0].side());
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, s) in truth.iter().zip(truth_spca) {
        num += s.rotational_distance(t)?.0.powi(2);
        den += disk_sq_norm(t, &mask);
    }
    Ok(if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    })
}

/// Minimum-cost assignment; `result[i]` is the column given to row `i`.
pub fn assign(cost: &[Vec<f64>]) -> Vec<usize> {
    if cost.len() <= BRUTE_FORCE_MAX {
        brute_force_assignment(cost)
    } else {
        hungarian(cost)
    }
}

pub fn brute_force_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(p);
        }
    });
    best
}

fn permute(p: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        visit(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, visit);
        p.swap(start, i);
    }
}

/// Shortest augmenting path Hungarian algorithm, `O(n^3)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[owner[j] - 1] = j - 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::generate_phantoms;

    #[test]
    fn identical_images_have_zero_distance() {
        let img = &generate_phantoms(1, 33, 1).unwrap()[0];
        let (d, t) = rotational_distance(img, img).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(t, 0.0);
    }

    #[test]
    fn recovers_rotation_angle() {
        let img = &generate_phantoms(1, 65, 2).unwrap()[0];
        let rot = rotate_image(img, 1.0).unwrap();
        let (d, t) = rotational_distance(img, &rot).unwrap();
        assert!(d <= 0.02 * img.frobenius_norm(), "{d}");
        assert!((t - 1.0).abs() < 0.01, "{t}");
    }

    #[test]
    fn negated_image_is_far() {
        let img = &generate_phantoms(1, 33, 3).unwrap()[0];
        let (d, _) = rotational_distance(img, &img.scaled(-1.0)).unwrap();
        assert!(d >= img.frobenius_norm());
    }

    #[test]
    fn tv_arithmetic() {
        assert!((tv_distance(&[0.3, 0.7], &[0.5, 0.5], &[0, 1]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8], &[0, 1]).unwrap(), 0.0);
        assert!(tv_distance(&[0.3, 0.6], &[0.5, 0.5], &[0, 1]).is_err());
        assert!(tv_distance(&[0.3, 0.7], &[0.5, 0.5], &[0, 0]).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut state = 17u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for n in 1..=7 {
            for _ in 0..20 {
                let cost: Vec<Vec<f64>> =
                    (0..n).map(|_| (0..n).map(|_| next()).collect()).collect();
                let total =
                    |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum() };
                let h = hungarian(&cost);
                let b = brute_force_assignment(&cost);
                assert!((total(&h) - total(&b)).abs() < 1e-12);
            }
        }
    }
}
