//! Coefficient vectors in a steerable basis, indexed by angular frequency
//! `k >= 0` and a per-frequency radial (or component) index. Negative
//! frequencies are implied by conjugate symmetry and never stored.

use std::ops::Range;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of coefficients per angular frequency, with contiguous blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<usize>", into = "Vec<usize>")]
pub struct Layout {
    counts: Vec<usize>,
    offsets: Vec<usize>,
}

impl From<Vec<usize>> for Layout {
    fn from(counts: Vec<usize>) -> Self {
        Layout::new(counts)
    }
}

impl From<Layout> for Vec<usize> {
    fn from(l: Layout) -> Self {
        l.counts
    }
}

impl Layout {
    pub fn new(counts: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0;
        for c in &counts {
            offsets.push(acc);
            acc += c;
        }
        offsets.push(acc);
        Layout { counts, offsets }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Number of stored frequencies (`k_max + 1`).
    pub fn frequencies(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, k: usize) -> usize {
        self.counts.get(k).copied().unwrap_or(0)
    }

    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    pub fn range(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    /// Total number of stored complex coefficients.
    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Angular frequency of each flat index.
    pub fn frequency_of_each(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for (k, &c) in self.counts.iter().enumerate() {
            out.extend(std::iter::repeat_n(k, c));
        }
        out
    }

    /// Number of real degrees of freedom of a real image with this layout.
    pub fn real_dimension(&self) -> usize {
        self.count(0) + 2 * (self.len() - self.count(0))
    }
}

/// One coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCoefficients")]
pub struct Coefficients {
    layout: Arc<Layout>,
    values: Vec<Complex64>,
}

#[derive(Deserialize)]
struct RawCoefficients {
    layout: Arc<Layout>,
    values: Vec<Complex64>,
}

impl TryFrom<RawCoefficients> for Coefficients {
    type Error = Error;

    fn try_from(raw: RawCoefficients) -> Result<Self> {
        Coefficients::new(raw.layout, raw.values)
    }
}

/// Coefficients in the Fourier-Bessel basis.
pub type SteerableCoefficients = Coefficients;
/// Coefficients in a steerable PCA eigenbasis.
pub type SpcaCoefficients = Coefficients;

impl Coefficients {
    pub fn new(layout: Arc<Layout>, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::SizeMismatch {
                expected: layout.len(),
                actual: values.len(),
            });
        }
        Ok(Coefficients { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.len();
        Coefficients {
            layout,
            values: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn block(&self, k: usize) -> &[Complex64] {
        &self.values[self.layout.range(k)]
    }

    pub fn block_mut(&mut self, k: usize) -> &mut [Complex64] {
        let r = self.layout.range(k);
        &mut self.values[r]
    }

    /// Drops any imaginary part of the `k = 0` block.
    pub fn force_real_dc(&mut self) {
        if self.layout.frequencies() > 0 {
            for v in self.block_mut(0) {
                v.im = 0.0;
            }
        }
    }

    /// Squared L2 norm of the real image this vector represents in an
    /// orthonormal steerable frame: `k = 0` counted once, `k > 0` twice.
    pub fn image_energy(&self) -> f64 {
        energy(&self.layout, &self.values)
    }

    pub fn same_layout(&self, other: &Coefficients) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch);
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &Coefficients) -> Result<Coefficients> {
        self.same_layout(other)?;
        Ok(Coefficients {
            layout: self.layout.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }
}

pub(crate) fn energy(layout: &Layout, values: &[Complex64]) -> f64 {
    let dc = layout.count(0).min(values.len());
    let head: f64 = values[..dc].iter().map(|v| v.norm_sqr()).sum();
    let tail: f64 = values[dc..].iter().map(|v| v.norm_sqr()).sum();
    head + 2.0 * tail
}

/// Rotation by `alpha` in coefficient space: `a_{k,q} -> a_{k,q} e^{-i k alpha}`.
pub fn rotate_coefficients(coeffs: &Coefficients, alpha: f64) -> Coefficients {
    let mut out = coeffs.clone();
    rotate_in_place(&coeffs.layout, &mut out.values, alpha);
    out
}

pub(crate) fn rotate_in_place(layout: &Layout, values: &mut [Complex64], alpha: f64) {
    for k in 1..layout.frequencies() {
        let phase = Complex64::from_polar(1.0, -(k as f64) * alpha);
        for v in &mut values[layout.range(k)] {
            *v *= phase;
        }
    }
}

/// A stack of `N` coefficient vectors sharing one layout, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffStack {
    layout: Arc<Layout>,
    data: Vec<Complex64>,
}

impl CoeffStack {
    pub fn new(layout: Arc<Layout>) -> Self {
        CoeffStack {
            layout,
            data: Vec::new(),
        }
    }

    pub fn from_data(layout: Arc<Layout>, data: Vec<Complex64>) -> Result<Self> {
        let m = layout.len();
        if m == 0 && !data.is_empty() || m > 0 && !data.len().is_multiple_of(m) {
            return Err(Error::SizeMismatch {
                expected: m,
                actual: data.len(),
            });
        }
        Ok(CoeffStack { layout, data })
    }

    pub fn from_rows(layout: Arc<Layout>, rows: &[Coefficients]) -> Result<Self> {
        let mut s = CoeffStack::new(layout);
        for r in rows {
            s.push(r)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, c: &Coefficients) -> Result<()> {
        if *c.layout != *self.layout {
            return Err(Error::LayoutMismatch);
        }
        self.data.extend_from_slice(&c.values);
        Ok(())
    }

    pub fn push_values(&mut self, values: &[Complex64]) -> Result<()> {
        if values.len() != self.layout.len() {
            return Err(Error::SizeMismatch {
                expected: self.layout.len(),
                actual: values.len(),
            });
        }
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn append(&mut self, other: CoeffStack) -> Result<()> {
        if *other.layout != *self.layout {
            return Err(Error::LayoutMismatch);
        }
        self.data.extend(other.data);
        Ok(())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        match self.layout.len() {
            0 => 0,
            m => self.data.len() / m,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        let m = self.layout.len();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn get(&self, i: usize) -> Coefficients {
        Coefficients {
            layout: self.layout.clone(),
            values: self.row(i).to_vec(),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Complex64]> {
        self.data.chunks_exact(self.layout.len().max(1))
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }
}
