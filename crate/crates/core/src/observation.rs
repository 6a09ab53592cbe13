//! Ground-truth phantoms and synthetic observations `Y = T_s R_xi I_pi + noise`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{check_side, disk_mask, rotate_image, shift_image, Image};
use crate::par;

const MIN_SIDE: usize = 9;

/// Mixing distribution, noise level and shift radius of the generative model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub pi: Vec<f64>,
    pub sigma: f64,
    #[serde(default)]
    pub shift_radius: f64,
}

impl MixtureSpec {
    pub fn new(pi: Vec<f64>, sigma: f64) -> Result<Self> {
        let spec = MixtureSpec {
            pi,
            sigma,
            shift_radius: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform(k: usize, sigma: f64) -> Result<Self> {
        if k == 0 {
            return invalid("class count must be positive");
        }
        MixtureSpec::new(vec![1.0 / k as f64; k], sigma)
    }

    pub fn with_shift_radius(mut self, radius: f64) -> Result<Self> {
        self.shift_radius = radius;
        self.validate()?;
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        validate_simplex(&self.pi, true)?;
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return invalid(format!(
                "noise level {} must be a nonnegative number",
                self.sigma
            ));
        }
        if !(self.shift_radius >= 0.0) || !self.shift_radius.is_finite() {
            return invalid("shift radius must be a nonnegative number");
        }
        Ok(())
    }
}

/// Checks that `p` is a probability vector; `strict` additionally requires
/// every entry to be positive.
pub fn validate_simplex(p: &[f64], strict: bool) -> Result<()> {
    if p.is_empty() {
        return invalid("probability vector is empty");
    }
    for (i, &v) in p.iter().enumerate() {
        if !v.is_finite() || v < 0.0 || (strict && v == 0.0) {
            return invalid(format!("probability entry {i} = {v} is not positive"));
        }
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return invalid(format!("probabilities sum to {total}, not 1"));
    }
    Ok(())
}

/// Observations together with the nuisance variables that produced them.
/// Only `observations` may be handed to estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub observations: Vec<Image>,
    /// Zero-based class index of each observation.
    pub true_labels: Vec<usize>,
    pub true_angles: Vec<f64>,
    pub true_shifts: Vec<(i32, i32)>,
    pub seed: u64,
}

/// Parameters of the Gaussian-blob phantom generator. Lengths are fractions
/// of the support radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomOptions {
    pub blobs: usize,
    pub min_width: f64,
    pub max_width: f64,
    pub center_radius: f64,
    pub allow_even_side: bool,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        PhantomOptions {
            blobs: 15,
            min_width: 0.06,
            max_width: 0.14,
            center_radius: 0.55,
            allow_even_side: false,
        }
    }
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `K` smooth disk-supported phantoms with values in `[0, 1]`.
pub fn generate_phantoms(k: usize, side: usize, seed: u64) -> Result<Vec<Image>> {
    generate_phantoms_with(k, side, seed, &PhantomOptions::default())
}

pub fn generate_phantoms_with(
    k: usize,
    side: usize,
    seed: u64,
    opts: &PhantomOptions,
) -> Result<Vec<Image>> {
    if k == 0 {
        return invalid("class count must be positive");
    }
    check_side(side, MIN_SIDE, opts.allow_even_side)?;
    if opts.blobs == 0 || !(opts.min_width > 0.0) || opts.max_width < opts.min_width {
        return invalid("phantom options need at least one blob and positive widths");
    }
    Ok((0..k)
        .map(|class| phantom(side, &mut stream_rng(seed, class as u64), opts))
        .collect())
}

fn phantom(side: usize, rng: &mut ChaCha8Rng, opts: &PhantomOptions) -> Image {
    let radius = (side as f64 - 1.0) / 2.0;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..opts.blobs)
        .map(|_| {
            let r = opts.center_radius * radius * rng.random::<f64>().sqrt();
            let t = 2.0 * PI * rng.random::<f64>();
            let w =
                radius * (opts.min_width + (opts.max_width - opts.min_width) * rng.random::<f64>());
            let amp = 0.2 + 0.8 * rng.random::<f64>();
            (r * t.cos(), r * t.sin(), w, amp)
        })
        .collect();
    let mut img = Image::from_fn(side, |x, y| {
        blobs
            .iter()
            .map(|&(cx, cy, w, a)| {
                a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * w * w)).exp()
            })
            .sum()
    });
    let mask = disk_mask(side);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, &m) in img.pixels().iter().zip(&mask) {
        if m {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (v, &m) in img.pixels_mut().iter_mut().zip(&mask) {
        *v = if m {
            ((*v - lo) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
    img
}

/// One draw from the generative model.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: Image,
    pub label: usize,
    pub angle: f64,
    pub shift: (i32, i32),
}

/// Draws observation `i` from its own RNG stream, so any subset of indices can
/// be generated independently and in parallel.
#[derive(Debug, Clone)]
pub struct ObservationSampler<'a> {
    images: &'a [Image],
    spec: MixtureSpec,
    seed: u64,
    cumulative: Vec<f64>,
    shifts: Vec<(i32, i32)>,
}

impl<'a> ObservationSampler<'a> {
    pub fn new(images: &'a [Image], spec: &MixtureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if images.len() != spec.classes() {
            return Err(Error::SizeMismatch {
                expected: spec.classes(),
                actual: images.len(),
            });
        }
        let side = images[0].side();
        if let Some(bad) = images.iter().find(|im| im.side() != side) {
            return Err(Error::SizeMismatch {
                expected: side,
                actual: bad.side(),
            });
        }
        let mut acc = 0.0;
        let cumulative = spec
            .pi
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let s = spec.shift_radius;
        let reach = s.floor() as i32;
        let mut shifts = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                if ((dx * dx + dy * dy) as f64) <= s * s + 1e-9 {
                    shifts.push((dx, dy));
                }
            }
        }
        if shifts.is_empty() {
            shifts.push((0, 0));
        }
        Ok(ObservationSampler {
            images,
            spec: spec.clone(),
            seed,
            cumulative,
            shifts,
        })
    }

    pub fn side(&self) -> usize {
        self.images[0].side()
    }

    pub fn draw(&self, index: usize) -> Observation {
        let mut rng = stream_rng(self.seed, index as u64);
        let u: f64 = rng.random();
        let label = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        let angle = 2.0 * PI * rng.random::<f64>();
        let shift = if self.shifts.len() > 1 {
            self.shifts[rng.random_range(0..self.shifts.len())]
        } else {
            (0, 0)
        };
        let mut rotated = rotate_image(&self.images[label], angle).expect("finite angle");
        // interpolation smears the boundary ring onto pixels just outside the disk
        rotated.mask_to_disk();
        let mut image = if shift == (0, 0) {
            rotated
        } else {
            shift_image(&rotated, shift.0, shift.1)
        };
        if self.spec.sigma > 0.0 {
            for v in image.pixels_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.spec.sigma * z;
            }
        }
        Observation {
            image,
            label,
            angle,
            shift,
        }
    }
}

pub fn sample_observations(
    images: &[Image],
    spec: &MixtureSpec,
    n: usize,
    seed: u64,
) -> Result<ObservationSet> {
    if n == 0 {
        return invalid("observation count must be positive");
    }
    let sampler = ObservationSampler::new(images, spec, seed)?;
    let draws = par::map_range(n, |i| sampler.draw(i));
    let mut set = ObservationSet {
        observations: Vec::with_capacity(n),
        true_labels: Vec::with_capacity(n),
        true_angles: Vec::with_capacity(n),
        true_shifts: Vec::with_capacity(n),
        seed,
    };
    for d in draws {
        set.observations.push(d.image);
        set.true_labels.push(d.label);
        set.true_angles.push(d.angle);
        set.true_shifts.push(d.shift);
    }
    Ok(set)
}

/// Pooled sample variance of the pixels outside the support disk, which carry
/// only noise.
pub fn estimate_noise_variance(images: &[Image]) -> Result<f64> {
    let mut acc = NoiseAccumulator::default();
    for img in images {
        acc.add(img)?;
    }
    acc.variance()
}

/// Streaming form of [`estimate_noise_variance`].
#[derive(Debug, Clone, Default)]
pub struct NoiseAccumulator {
    side: Option<usize>,
    mask: Vec<bool>,
    count: u64,
    mean: f64,
    m2: f64,
}

impl NoiseAccumulator {
    pub fn add(&mut self, img: &Image) -> Result<()> {
        match self.side {
            None => {
                self.side = Some(img.side());
                self.mask = disk_mask(img.side());
                if self.mask.iter().all(|&m| m) {
                    return invalid("image has no pixels outside the support disk");
                }
            }
            Some(s) if s != img.side() => {
                return Err(Error::SizeMismatch {
                    expected: s,
                    actual: img.side(),
                })
            }
            _ => {}
        }
        for (v, &inside) in img.pixels().iter().zip(&self.mask) {
            if !inside {
                self.count += 1;
                let d = v - self.mean;
                self.mean += d / self.count as f64;
                self.m2 += d * (v - self.mean);
            }
        }
        Ok(())
    }

    pub fn variance(&self) -> Result<f64> {
        if self.count < 2 {
            return invalid("not enough background pixels to estimate the noise");
        }
        Ok(self.m2 / (self.count - 1) as f64)
    }
}

/// `sum ||I_k||_F^2 / (K L^2 sigma^2)`; infinite when `sigma == 0`.
pub fn snr(images: &[Image], sigma: f64) -> Result<f64> {
    if images.is_empty() {
        return invalid("no images");
    }
    if !(sigma >= 0.0) {
        return invalid("noise level must be nonnegative");
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    let side = images[0].side() as f64;
    let energy: f64 = images.iter().map(|i| i.frobenius_norm().powi(2)).sum();
    Ok(energy / (images.len() as f64 * side * side * sigma * sigma))
}

/// Noise level giving the requested SNR for these images.
pub fn sigma_for_snr(images: &[Image], snr: f64) -> Result<f64> {
    if images.is_empty() || !(snr > 0.0) {
        return invalid("SNR must be positive and images nonempty");
    }
    let side = images[0].side() as f64;
    let energy: f64 = images.iter().map(|i| i.frobenius_norm().powi(2)).sum();
    Ok((energy / (images.len() as f64 * side * side * snr)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_phantom_is_normalized_and_masked() {
        let imgs = generate_phantoms(1, 9, 0).unwrap();
        let img = &imgs[0];
        assert_eq!(img.side(), 9);
        for (r, c) in [(0, 0), (0, 8), (8, 0), (8, 8)] {
            assert_eq!(img.get(r, c), 0.0);
        }
        assert_eq!(img.pixels().iter().cloned().fold(f64::MIN, f64::max), 1.0);
        assert!(img.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn phantoms_are_deterministic() {
        let a = generate_phantoms(3, 65, 7).unwrap();
        let b = generate_phantoms(3, 65, 7).unwrap();
        assert_eq!(a, b);
        assert!(generate_phantoms(3, 65, 8).unwrap() != a);
    }

    #[test]
    fn phantom_argument_errors() {
        assert!(generate_phantoms(0, 9, 0).is_err());
        assert!(generate_phantoms(1, 10, 0).is_err());
        assert!(generate_phantoms(1, 7, 0).is_err());
    }

    #[test]
    fn sampler_checks_inputs() {
        let imgs = generate_phantoms(2, 9, 0).unwrap();
        let spec = MixtureSpec::uniform(3, 0.0).unwrap();
        assert!(sample_observations(&imgs, &spec, 4, 0).is_err());
        let mixed = vec![imgs[0].clone(), Image::zeros(11)];
        let spec2 = MixtureSpec::uniform(2, 0.0).unwrap();
        assert!(sample_observations(&mixed, &spec2, 4, 0).is_err());
        assert!(sample_observations(&imgs, &spec2, 0, 0).is_err());
    }

    #[test]
    fn mixture_spec_validation() {
        assert!(MixtureSpec::new(vec![0.3, 0.6], 1.0).is_err());
        assert!(MixtureSpec::new(vec![0.0, 1.0], 1.0).is_err());
        assert!(MixtureSpec::new(vec![0.5, 0.5], -1.0).is_err());
        assert!(MixtureSpec::new(vec![0.5, 0.5], 1.0)
            .unwrap()
            .with_shift_radius(-1.0)
            .is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let imgs = generate_phantoms(2, 17, 1).unwrap();
        let spec = MixtureSpec::new(vec![0.4, 0.6], 0.3)
            .unwrap()
            .with_shift_radius(2.0)
            .unwrap();
        let a = sample_observations(&imgs, &spec, 20, 5).unwrap();
        let b = sample_observations(&imgs, &spec, 20, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.true_shifts.iter().all(|&(x, y)| x * x + y * y <= 4));
    }

    #[test]
    fn noiseless_background_has_zero_variance() {
        let imgs = generate_phantoms(2, 17, 1).unwrap();
        let spec = MixtureSpec::uniform(2, 0.0).unwrap();
        let obs = sample_observations(&imgs, &spec, 10, 2).unwrap();
        assert_eq!(estimate_noise_variance(&obs.observations).unwrap(), 0.0);
    }

    #[test]
    fn snr_definition() {
        let side = 9;
        let sigma = 0.7;
        // constant image with ||I||^2 = L^2 sigma^2
        let img = Image::from_fn(side, |_, _| sigma);
        assert!((snr(std::slice::from_ref(&img), sigma).unwrap() - 1.0).abs() < 1e-12);
        let quarter = snr(std::slice::from_ref(&img), 2.0 * sigma).unwrap();
        assert!((quarter - 0.25).abs() < 1e-12);
        assert_eq!(snr(std::slice::from_ref(&img), 0.0).unwrap(), f64::INFINITY);
        let s = sigma_for_snr(&[img], 1.0 / 50.0).unwrap();
        assert!((s - sigma * 50f64.sqrt()).abs() < 1e-12);
    }
}
