//! Fourier-Bessel steerable basis on the support disk.
//!
//! Basis functions are `u^{k,q}(r, t) = N_{k,q} J_k(R_{k,q} r / c) e^{i k t}` for
//! `r <= c = (L-1)/2`, with `R_{k,q}` the q-th positive zero of `J_k` and
//! `N_{k,q} = 1 / (c sqrt(pi) |J_{k+1}(R_{k,q})|)`. A pair `(k, q)` is admitted
//! when `R_{k,q} <= 2 pi c * bandlimit`.
//!
//! Expansion is a dense real least-squares fit over the in-disk pixels. The
//! real design matrix has one column per `k = 0` coefficient and two columns
//! (`2 f cos(k t)` and `-2 f sin(k t)`) per complex `k > 0` coefficient, which
//! encodes the conjugate symmetry of real images.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::bessel::{bessel_j, bessel_j_zeros};
use crate::coeffs::{CoeffStack, Coefficients, Layout};
use crate::error::{invalid, Error, Result};
use crate::image::{check_side, disk_mask, grid_center, support_radius, Image};
use crate::{linalg, par};

pub const DEFAULT_BANDLIMIT: f64 = 0.5;
const MIN_SIDE: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisOptions {
    /// Cycles per pixel, in `(0, 0.5]`.
    pub bandlimit: f64,
    pub allow_even_side: bool,
}

impl Default for BasisOptions {
    fn default() -> Self {
        BasisOptions {
            bandlimit: DEFAULT_BANDLIMIT,
            allow_even_side: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BasisSpec {
    side: usize,
    radius: f64,
    bandlimit: f64,
    layout: Arc<Layout>,
    roots: Vec<f64>,
    norms: Vec<f64>,
    disk_pixels: Vec<usize>,
    /// Real design matrix, `disk pixels x real dimension`.
    synthesis: DMatrix<f64>,
    /// Cholesky factor of the Gram matrix of `synthesis`.
    factor: DMatrix<f64>,
}

/// Builds the basis for an `L x L` grid with the default options.
pub fn build_basis(side: usize, bandlimit: f64) -> Result<BasisSpec> {
    BasisSpec::new(
        side,
        BasisOptions {
            bandlimit,
            ..BasisOptions::default()
        },
    )
}

impl BasisSpec {
    pub fn new(side: usize, opts: BasisOptions) -> Result<Self> {
        check_side(side, MIN_SIDE, opts.allow_even_side)?;
        if !(opts.bandlimit > 0.0 && opts.bandlimit <= 0.5) {
            return invalid(format!("bandlimit {} outside (0, 0.5]", opts.bandlimit));
        }
        let c = support_radius(side);
        let cut = 2.0 * PI * c * opts.bandlimit;
        let k_cap = (2.0 * c).floor() as usize;

        let mut counts = Vec::new();
        let mut roots = Vec::new();
        let mut norms = Vec::new();
        for k in 0..=k_cap {
            let zs = bessel_j_zeros(k as u32, cut);
            if zs.is_empty() {
                break;
            }
            counts.push(zs.len());
            for z in zs {
                norms.push(1.0 / (c * PI.sqrt() * bessel_j(k as u32 + 1, z).abs()));
                roots.push(z);
            }
        }
        let layout = Arc::new(Layout::new(counts));

        let mask = disk_mask(side);
        let disk_pixels: Vec<usize> = (0..side * side).filter(|&i| mask[i]).collect();
        let synthesis = design_matrix(side, c, &layout, &roots, &norms, &disk_pixels);
        let mut factor = linalg::gram(&synthesis);
        linalg::cholesky_in_place(&mut factor)
            .map_err(|_| Error::Numerical("basis Gram matrix is not positive definite".into()))?;
        Ok(BasisSpec {
            side,
            radius: c,
            bandlimit: opts.bandlimit,
            layout,
            roots,
            norms,
            disk_pixels,
            synthesis,
            factor,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn bandlimit(&self) -> f64 {
        self.bandlimit
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn max_frequency(&self) -> usize {
        self.layout.frequencies().saturating_sub(1)
    }

    /// Radial zeros `R_{k,q}` for frequency `k`.
    pub fn roots(&self, k: usize) -> &[f64] {
        &self.roots[self.layout.range(k)]
    }

    pub fn norms(&self, k: usize) -> &[f64] {
        &self.norms[self.layout.range(k)]
    }

    pub fn disk_pixel_count(&self) -> usize {
        self.disk_pixels.len()
    }

    pub fn real_dimension(&self) -> usize {
        self.synthesis.ncols()
    }

    /// Complex design matrix: column `j` samples `u^{k,q}` at every in-disk pixel.
    pub fn design_matrix(&self) -> DMatrix<Complex64> {
        let p = self.disk_pixels.len();
        let dc = self.layout.count(0);
        DMatrix::from_fn(p, self.layout.len(), |row, j| {
            if j < dc {
                Complex64::new(self.synthesis[(row, j)], 0.0)
            } else {
                let r = dc + 2 * (j - dc);
                Complex64::new(
                    0.5 * self.synthesis[(row, r)],
                    -0.5 * self.synthesis[(row, r + 1)],
                )
            }
        })
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.side() != self.side {
            return Err(Error::SizeMismatch {
                expected: self.side,
                actual: image.side(),
            });
        }
        Ok(())
    }

    fn check_coeffs(&self, coeffs: &Coefficients) -> Result<()> {
        if **coeffs.layout() != *self.layout {
            return Err(Error::LayoutMismatch);
        }
        Ok(())
    }

    /// Least-squares expansion of one image. Pixels outside the disk are ignored.
    pub fn expand(&self, image: &Image) -> Result<Coefficients> {
        self.check_image(image)?;
        let y = DMatrix::from_iterator(
            self.disk_pixels.len(),
            1,
            self.disk_pixels.iter().map(|&i| image.pixels()[i]),
        );
        let x = self.solve_normal(&y)?;
        Ok(self.unpack(x.as_slice()))
    }

    /// Expands many images at once.
    pub fn expand_stack(&self, images: &[Image]) -> Result<CoeffStack> {
        const BATCH: usize = 64;
        for img in images {
            self.check_image(img)?;
        }
        let parts = par::map_chunks(images.len(), BATCH, |range| {
            let ys = DMatrix::from_fn(self.disk_pixels.len(), range.len(), |r, c| {
                images[range.start + c].pixels()[self.disk_pixels[r]]
            });
            let xs = self.solve_normal(&ys)?;
            let mut out = Vec::with_capacity(range.len() * self.layout.len());
            for col in xs.column_iter() {
                out.extend(self.unpack(col.as_slice()).into_values());
            }
            Ok::<_, Error>(out)
        });
        let mut data = Vec::with_capacity(images.len() * self.layout.len());
        for p in parts {
            data.extend(p?);
        }
        CoeffStack::from_data(self.layout.clone(), data)
    }

    fn solve_normal(&self, ys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut x = linalg::tr_mul(&self.synthesis, ys);
        linalg::cholesky_solve_in_place(&self.factor, &mut x)?;
        Ok(x)
    }

    /// Real image from coefficients; pixels outside the disk are zero.
    pub fn synthesize(&self, coeffs: &Coefficients) -> Result<Image> {
        self.check_coeffs(coeffs)?;
        let x = DVector::from_vec(self.pack(coeffs.values()));
        let v = &self.synthesis * x;
        let mut img = Image::zeros(self.side);
        let px = img.pixels_mut();
        for (&i, val) in self.disk_pixels.iter().zip(v.iter()) {
            px[i] = *val;
        }
        Ok(img)
    }

    /// Disk pixel values of the image carried by frequency `k` alone, in the
    /// order of [`BasisSpec::disk_pixels`].
    pub fn synthesize_frequency(&self, k: usize, block: &[Complex64]) -> Result<Vec<f64>> {
        if k >= self.layout.frequencies() || block.len() != self.layout.count(k) {
            return Err(Error::LayoutMismatch);
        }
        let dc = self.layout.count(0);
        let mut out = vec![0.0; self.disk_pixels.len()];
        let mut add = |col: usize, w: f64| {
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(self.synthesis.column(col).iter()) {
                    *o += w * v;
                }
            }
        };
        if k == 0 {
            for (q, v) in block.iter().enumerate() {
                add(q, v.re);
            }
        } else {
            let start = dc + 2 * (self.layout.offset(k) - dc);
            for (q, v) in block.iter().enumerate() {
                add(start + 2 * q, v.re);
                add(start + 2 * q + 1, v.im);
            }
        }
        Ok(out)
    }

    /// Row-major indices of the pixels inside the support disk.
    pub fn disk_pixels(&self) -> &[usize] {
        &self.disk_pixels
    }

    fn pack(&self, values: &[Complex64]) -> Vec<f64> {
        let dc = self.layout.count(0);
        let mut x = Vec::with_capacity(self.real_dimension());
        x.extend(values[..dc].iter().map(|v| v.re));
        for v in &values[dc..] {
            x.push(v.re);
            x.push(v.im);
        }
        x
    }

    fn unpack(&self, x: &[f64]) -> Coefficients {
        let dc = self.layout.count(0);
        let mut vals = Vec::with_capacity(self.layout.len());
        vals.extend(x[..dc].iter().map(|&v| Complex64::new(v, 0.0)));
        vals.extend(x[dc..].chunks_exact(2).map(|p| Complex64::new(p[0], p[1])));
        Coefficients::new(self.layout.clone(), vals).expect("layout sized vector")
    }

    /// Short fingerprint of the basis parameters, for file metadata.
    pub fn fingerprint(&self) -> String {
        format!(
            "fb-L{}-nu{}-m{}",
            self.side,
            self.bandlimit,
            self.layout.len()
        )
    }
}

fn design_matrix(
    side: usize,
    c: f64,
    layout: &Layout,
    roots: &[f64],
    norms: &[f64],
    disk_pixels: &[usize],
) -> DMatrix<f64> {
    let center = grid_center(side);
    let polar: Vec<(f64, f64)> = disk_pixels
        .iter()
        .map(|&i| {
            let x = (i % side) as f64 - center;
            let y = center - (i / side) as f64;
            ((x * x + y * y).sqrt(), y.atan2(x))
        })
        .collect();

    // Radial profiles only depend on r, and many pixels share a radius.
    let mut radius_slot: HashMap<u64, usize> = HashMap::new();
    let mut radii = Vec::new();
    let slots: Vec<usize> = polar
        .iter()
        .map(|&(r, _)| {
            *radius_slot.entry(r.to_bits()).or_insert_with(|| {
                radii.push(r);
                radii.len() - 1
            })
        })
        .collect();
    let freq = layout.frequency_of_each();
    let profiles: Vec<Vec<f64>> = par::map_range(layout.len(), |j| {
        radii
            .iter()
            .map(|&r| norms[j] * bessel_j(freq[j] as u32, roots[j] * r / c))
            .collect()
    });

    let dc = layout.count(0);
    let ncols = layout.real_dimension();
    let mut a = DMatrix::<f64>::zeros(disk_pixels.len(), ncols);
    for j in 0..layout.len() {
        let k = freq[j] as f64;
        let prof = &profiles[j];
        if j < dc {
            let mut col = a.column_mut(j);
            for (row, &s) in slots.iter().enumerate() {
                col[row] = prof[s];
            }
        } else {
            let base = dc + 2 * (j - dc);
            for (row, (&s, &(_, t))) in slots.iter().zip(&polar).enumerate() {
                let (sin, cos) = (k * t).sin_cos();
                a[(row, base)] = 2.0 * prof[s] * cos;
                a[(row, base + 1)] = -2.0 * prof[s] * sin;
            }
        }
    }
    a
}
