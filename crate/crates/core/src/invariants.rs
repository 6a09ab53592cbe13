//! Rotation-invariant features of steerable coefficients and their
//! bias-corrected averages over noisy observation stacks.
//!
//! For a coefficient vector `a` the features are the mean `m_q = a_{0,q}`, the
//! power spectrum `p_{k,q1,q2} = a_{k,q1} conj(a_{k,q2})` and the bispectrum
//! `b_{k1,k2,q1,q2,q3} = a_{k1,q1} a_{k2,q2} conj(a_{k1+k2,q3})`. A rotation
//! multiplies `a_{k,q}` by `e^{-i k alpha}` and every phase cancels.
//!
//! The power spectrum is stored as a full Hermitian `r_k x r_k` block for every
//! frequency. The bispectrum is stored for `0 <= k1 <= k2`, `k1 + k2 <= k_max`,
//! over all radial triples, in blocks ordered by `(k1, k2)`.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::coeffs::{CoeffStack, Coefficients, Layout};
use crate::error::{invalid, Error, Result};
use crate::par::{self, CompensatedSum};

const CHUNK: usize = 128;

/// One `(k1, k2)` bispectrum block: entries `(q1, q2, q3)` in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BispectrumBlock {
    pub k1: usize,
    pub k2: usize,
    pub offset: usize,
}

impl BispectrumBlock {
    pub fn k3(&self) -> usize {
        self.k1 + self.k2
    }
}

/// Storage layout of the feature arrays for one coefficient layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantIndex {
    layout: Arc<Layout>,
    power_offsets: Vec<usize>,
    power_len: usize,
    blocks: Vec<BispectrumBlock>,
    bispectrum_len: usize,
}

impl InvariantIndex {
    pub fn new(layout: Arc<Layout>) -> Self {
        let f = layout.frequencies();
        let mut power_offsets = Vec::with_capacity(f);
        let mut acc = 0;
        for k in 0..f {
            power_offsets.push(acc);
            acc += layout.count(k) * layout.count(k);
        }
        let power_len = acc;
        let mut blocks = Vec::new();
        let mut acc = 0;
        for k1 in 0..f {
            for k2 in k1..f {
                let k3 = k1 + k2;
                if k3 >= f {
                    break;
                }
                let size = layout.count(k1) * layout.count(k2) * layout.count(k3);
                if size == 0 {
                    continue;
                }
                blocks.push(BispectrumBlock {
                    k1,
                    k2,
                    offset: acc,
                });
                acc += size;
            }
        }
        InvariantIndex {
            layout,
            power_offsets,
            power_len,
            blocks,
            bispectrum_len: acc,
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn mean_len(&self) -> usize {
        self.layout.count(0)
    }

    pub fn power_len(&self) -> usize {
        self.power_len
    }

    pub fn bispectrum_len(&self) -> usize {
        self.bispectrum_len
    }

    pub fn power_offset(&self, k: usize) -> usize {
        self.power_offsets[k]
    }

    /// Flat index of `p_{k,q1,q2}`.
    pub fn power_index(&self, k: usize, q1: usize, q2: usize) -> usize {
        self.power_offsets[k] + q1 * self.layout.count(k) + q2
    }

    pub fn bispectrum_blocks(&self) -> &[BispectrumBlock] {
        &self.blocks
    }

    /// Flat index of `b_{k1,k2,q1,q2,q3}`, if the tuple is stored.
    pub fn bispectrum_index(
        &self,
        k1: usize,
        k2: usize,
        q1: usize,
        q2: usize,
        q3: usize,
    ) -> Option<usize> {
        let blk = self.blocks.iter().find(|b| b.k1 == k1 && b.k2 == k2)?;
        let (r2, r3) = (self.layout.count(k2), self.layout.count(k1 + k2));
        if q1 >= self.layout.count(k1) || q2 >= r2 || q3 >= r3 {
            return None;
        }
        Some(blk.offset + (q1 * r2 + q2) * r3 + q3)
    }

    /// Every stored bispectrum tuple `(k1, k2, q1, q2, q3)` in storage order.
    pub fn bispectrum_tuples(&self) -> Vec<[usize; 5]> {
        let mut out = Vec::with_capacity(self.bispectrum_len);
        for b in &self.blocks {
            let (r1, r2, r3) = (
                self.layout.count(b.k1),
                self.layout.count(b.k2),
                self.layout.count(b.k3()),
            );
            for q1 in 0..r1 {
                for q2 in 0..r2 {
                    for q3 in 0..r3 {
                        out.push([b.k1, b.k2, q1, q2, q3]);
                    }
                }
            }
        }
        out
    }
}

/// Mean, power spectrum and bispectrum arrays over an [`InvariantIndex`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantFeatures {
    pub index: Arc<InvariantIndex>,
    pub mean: Vec<f64>,
    pub power: Vec<Complex64>,
    pub bispectrum: Vec<Complex64>,
}

impl InvariantFeatures {
    pub fn zeros(index: Arc<InvariantIndex>) -> Self {
        let z = Complex64::new(0.0, 0.0);
        InvariantFeatures {
            mean: vec![0.0; index.mean_len()],
            power: vec![z; index.power_len()],
            bispectrum: vec![z; index.bispectrum_len()],
            index,
        }
    }

    /// Power spectrum entry `p_{k,q1,q2}`.
    pub fn power_at(&self, k: usize, q1: usize, q2: usize) -> Complex64 {
        self.power[self.index.power_index(k, q1, q2)]
    }

    pub fn bispectrum_at(
        &self,
        k1: usize,
        k2: usize,
        q1: usize,
        q2: usize,
        q3: usize,
    ) -> Option<Complex64> {
        self.index
            .bispectrum_index(k1, k2, q1, q2, q3)
            .map(|i| self.bispectrum[i])
    }

    /// `self += w * other`.
    pub fn add_scaled(&mut self, other: &InvariantFeatures, w: f64) -> Result<()> {
        if self.index != other.index {
            return Err(Error::LayoutMismatch);
        }
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += w * b;
        }
        for (a, b) in self.power.iter_mut().zip(&other.power) {
            *a += b * w;
        }
        for (a, b) in self.bispectrum.iter_mut().zip(&other.bispectrum) {
            *a += b * w;
        }
        Ok(())
    }

    /// Largest absolute entry-wise difference over all three arrays.
    pub fn max_abs_diff(&self, other: &InvariantFeatures) -> Result<f64> {
        if self.index != other.index {
            return Err(Error::LayoutMismatch);
        }
        let m = self
            .mean
            .iter()
            .zip(&other.mean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let p = max_diff(&self.power, &other.power);
        let b = max_diff(&self.bispectrum, &other.bispectrum);
        Ok(m.max(p).max(b))
    }

    pub fn max_abs_power(&self) -> f64 {
        self.power.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_bispectrum(&self) -> f64 {
        self.bispectrum.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

fn max_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0f64, f64::max)
}

/// Features of a single coefficient vector.
pub fn features_of(a: &Coefficients) -> InvariantFeatures {
    let index = Arc::new(InvariantIndex::new(a.layout().clone()));
    features_with(&index, a.values())
}

/// Features of `values` laid out per `index`.
pub fn features_with(index: &Arc<InvariantIndex>, values: &[Complex64]) -> InvariantFeatures {
    let mut f = InvariantFeatures::zeros(index.clone());
    visit_features(index, values, |slot, v| match slot {
        Slot::Mean(i) => f.mean[i] = v.re,
        Slot::Power(i) => f.power[i] = v,
        Slot::Bispectrum(i) => f.bispectrum[i] = v,
    });
    f
}

enum Slot {
    Mean(usize),
    Power(usize),
    Bispectrum(usize),
}

fn visit_features(index: &InvariantIndex, a: &[Complex64], mut visit: impl FnMut(Slot, Complex64)) {
    let layout = &index.layout;
    for (q, v) in a[layout.range(0)].iter().enumerate() {
        visit(Slot::Mean(q), Complex64::new(v.re, 0.0));
    }
    for k in 0..layout.frequencies() {
        let x = &a[layout.range(k)];
        let off = index.power_offsets[k];
        let r = x.len();
        for q1 in 0..r {
            for q2 in 0..r {
                visit(Slot::Power(off + q1 * r + q2), x[q1] * x[q2].conj());
            }
        }
    }
    for blk in &index.blocks {
        let x1 = &a[layout.range(blk.k1)];
        let x2 = &a[layout.range(blk.k2)];
        let x3 = &a[layout.range(blk.k3())];
        let mut i = blk.offset;
        for v1 in x1 {
            for v2 in x2 {
                let v12 = v1 * v2;
                for v3 in x3 {
                    visit(Slot::Bispectrum(i), v12 * v3.conj());
                    i += 1;
                }
            }
        }
    }
}

/// Bias-corrected estimates of the mixed invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedInvariants {
    pub features: InvariantFeatures,
    pub observations: usize,
    pub sigma2: f64,
}

impl MixedInvariants {
    pub fn index(&self) -> &Arc<InvariantIndex> {
        &self.features.index
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.features.index.layout()
    }

    /// Number of stored terms in the mean, power spectrum and bispectrum.
    pub fn term_counts(&self) -> [usize; 3] {
        [
            self.features.mean.len(),
            self.features.power.len(),
            self.features.bispectrum.len(),
        ]
    }
}

/// Mixed invariants `sum_i pi_i features(a^i)`, with no noise.
pub fn exact_mixed_invariants(classes: &[Coefficients], pi: &[f64]) -> Result<MixedInvariants> {
    if classes.is_empty() || classes.len() != pi.len() {
        return invalid("need one mixing weight per class");
    }
    let index = Arc::new(InvariantIndex::new(classes[0].layout().clone()));
    let mut acc = InvariantFeatures::zeros(index.clone());
    for (a, &w) in classes.iter().zip(pi) {
        if a.layout() != classes[0].layout() {
            return Err(Error::LayoutMismatch);
        }
        acc.add_scaled(&features_with(&index, a.values()), w)?;
    }
    Ok(MixedInvariants {
        features: acc,
        observations: 0,
        sigma2: 0.0,
    })
}

/// Single-pass running sums of per-observation features.
#[derive(Debug, Clone)]
pub struct InvariantAccumulator {
    index: Arc<InvariantIndex>,
    count: usize,
    mean: Vec<CompensatedSum>,
    power: Vec<[CompensatedSum; 2]>,
    bispectrum: Vec<[CompensatedSum; 2]>,
}

impl InvariantAccumulator {
    pub fn new(layout: Arc<Layout>) -> Self {
        InvariantAccumulator::with_index(Arc::new(InvariantIndex::new(layout)))
    }

    pub fn with_index(index: Arc<InvariantIndex>) -> Self {
        InvariantAccumulator {
            count: 0,
            mean: vec![CompensatedSum::default(); index.mean_len()],
            power: vec![Default::default(); index.power_len()],
            bispectrum: vec![Default::default(); index.bispectrum_len()],
            index,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, values: &[Complex64]) -> Result<()> {
        if values.len() != self.index.layout.len() {
            return Err(Error::SizeMismatch {
                expected: self.index.layout.len(),
                actual: values.len(),
            });
        }
        let (mean, power, bis) = (&mut self.mean, &mut self.power, &mut self.bispectrum);
        visit_features(&self.index, values, |slot, v| match slot {
            Slot::Mean(i) => mean[i].add(v.re),
            Slot::Power(i) => {
                power[i][0].add(v.re);
                power[i][1].add(v.im);
            }
            Slot::Bispectrum(i) => {
                bis[i][0].add(v.re);
                bis[i][1].add(v.im);
            }
        });
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &InvariantAccumulator) -> Result<()> {
        if self.index != other.index {
            return Err(Error::LayoutMismatch);
        }
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            a.merge(b);
        }
        for (a, b) in self.power.iter_mut().zip(&other.power) {
            a[0].merge(&b[0]);
            a[1].merge(&b[1]);
        }
        for (a, b) in self.bispectrum.iter_mut().zip(&other.bispectrum) {
            a[0].merge(&b[0]);
            a[1].merge(&b[1]);
        }
        self.count += other.count;
        Ok(())
    }

    /// Sample averages without any bias correction.
    pub fn averages(&self) -> Result<InvariantFeatures> {
        if self.count == 0 {
            return invalid("no observations accumulated");
        }
        let n = self.count as f64;
        let c = |s: &[CompensatedSum; 2]| Complex64::new(s[0].value() / n, s[1].value() / n);
        Ok(InvariantFeatures {
            index: self.index.clone(),
            mean: self.mean.iter().map(|s| s.value() / n).collect(),
            power: self.power.iter().map(c).collect(),
            bispectrum: self.bispectrum.iter().map(c).collect(),
        })
    }

    /// Averages with the noise bias removed for coefficient-domain noise
    /// variance `sigma2`.
    pub fn finish(&self, sigma2: f64) -> Result<MixedInvariants> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return invalid(format!(
                "noise variance {sigma2} must be a nonnegative number"
            ));
        }
        let mut f = self.averages()?;
        remove_noise_bias(&mut f, sigma2);
        Ok(MixedInvariants {
            features: f,
            observations: self.count,
            sigma2,
        })
    }
}

/// Subtracts `sigma2 delta_{q1,q2}` from the power spectrum and
/// `sigma2 A` from the bispectrum, with the class mean in `A` replaced by the
/// estimated mean `f.mean`.
pub fn remove_noise_bias(f: &mut InvariantFeatures, sigma2: f64) {
    let index = f.index.clone();
    let layout = index.layout();
    for k in 0..layout.frequencies() {
        for q in 0..layout.count(k) {
            f.power[index.power_index(k, q, q)] -= sigma2;
        }
    }
    let m = f.mean.clone();
    for blk in index.bispectrum_blocks() {
        let (k1, k2, k3) = (blk.k1, blk.k2, blk.k3());
        let (r1, r2, r3) = (layout.count(k1), layout.count(k2), layout.count(k3));
        for q1 in 0..r1 {
            for q2 in 0..r2 {
                for q3 in 0..r3 {
                    let mut bias = 0.0;
                    if k1 == 0 && q2 == q3 {
                        bias += m[q1];
                    }
                    if k2 == 0 && q1 == q3 {
                        bias += m[q2];
                    }
                    if k3 == 0 && q1 == q2 {
                        bias += m[q3];
                    }
                    if bias != 0.0 {
                        f.bispectrum[blk.offset + (q1 * r2 + q2) * r3 + q3] -= sigma2 * bias;
                    }
                }
            }
        }
    }
}

/// Bias-corrected mixed invariants of a coefficient stack, in one pass.
pub fn estimate_mixed_invariants(stack: &CoeffStack, sigma2: f64) -> Result<MixedInvariants> {
    if stack.is_empty() {
        return invalid("cannot estimate invariants from an empty stack");
    }
    accumulate(stack)?.finish(sigma2)
}

/// Running sums over a stack, computed in parallel chunks and merged in
/// index order.
pub fn accumulate(stack: &CoeffStack) -> Result<InvariantAccumulator> {
    let index = Arc::new(InvariantIndex::new(stack.layout().clone()));
    let parts = par::map_chunks(stack.len(), CHUNK, |range| {
        let mut acc = InvariantAccumulator::with_index(index.clone());
        for i in range {
            acc.add(stack.row(i))?;
        }
        Ok::<_, Error>(acc)
    });
    let mut total = InvariantAccumulator::with_index(index);
    for p in parts {
        total.merge(&p?)?;
    }
    Ok(total)
}
