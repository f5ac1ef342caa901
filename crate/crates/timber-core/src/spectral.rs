//! Singular-spectrum analysis and refinement.
//!
//! The effective rank of a matrix is the exponential of the Shannon entropy
//! of its normalized singular-value distribution: with weights
//! `w_i = (σ_i/σ_max)^γ`, `S = Σ w_i` and `T = Σ w_i·ln(w_i)`,
//!
//! ```text
//! eRank = S · exp(−T / S)
//! ```
//!
//! which equals `exp(−Σ p_i ln p_i)` for `p_i = σ_i^γ / Σ σ_j^γ` but is exact
//! on the two boundary cases (a single nonzero value → 1, a flat spectrum
//! → r) instead of drifting through an `exp(ln ·)` roundtrip. Zero singular
//! values contribute nothing (`0·ln 0 := 0`).
//!
//! Refinement splits a spectrum at an index `k` — usually `⌈eRank⌉` — and
//! either zeroes the tail, attenuates it by a factor `λ`, or truncates by a
//! rank/energy budget. Energy throughout is the sum of squared singular
//! values.

use crate::error::{Error, Result};

// ─────────────────────────────────────────────────────────────────────────────
// SingularSpectrum
// ─────────────────────────────────────────────────────────────────────────────

/// Non-negative singular values sorted non-increasing, length ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularSpectrum {
    values: Vec<f64>,
}

impl SingularSpectrum {
    /// Wrap already-sorted singular values, validating the invariants.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("spectrum must contain at least one value".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Input(format!(
                    "singular value at position {i} is {v}, expected finite and non-negative"
                )));
            }
        }
        if values.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Input("singular values must be sorted non-increasing".into()));
        }
        Ok(SingularSpectrum { values })
    }

    /// Sort descending (stable, so ties keep their original order) and wrap.
    pub fn from_unsorted(mut values: Vec<f64>) -> Result<Self> {
        values.sort_by(|a, b| b.total_cmp(a));
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of singular values, `r = min(d_1, d_2)` of the source matrix.
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Total energy `Σ σ_i²`.
    pub fn energy(&self) -> f64 {
        kahan_sum(self.values.iter().map(|&v| v * v))
    }
}

/// Compensated summation; zero terms are skipped so that prefixes of a
/// zero-padded sequence sum bit-identically to the unpadded sequence.
fn kahan_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for t in terms {
        if t == 0.0 {
            continue;
        }
        let y = t - c;
        let s = sum + y;
        c = (s - sum) - y;
        sum = s;
    }
    sum
}

// ─────────────────────────────────────────────────────────────────────────────
// Effective rank
// ─────────────────────────────────────────────────────────────────────────────

fn check_gamma(gamma: f64) -> Result<()> {
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::Input(format!("gamma must be finite and > 0, got {gamma}")));
    }
    Ok(())
}

/// `(S, T)` of the entropy rearrangement, with `log` either `ln` or `log2`.
fn entropy_terms(spectrum: &SingularSpectrum, gamma: f64, log: fn(f64) -> f64) -> Result<(f64, f64)> {
    check_gamma(gamma)?;
    let max = spectrum.values[0];
    if max <= 0.0 {
        return Err(Error::Domain("eRank undefined for zero matrix".into()));
    }
    let weight = |v: f64| -> f64 {
        let q = v / max;
        if gamma == 1.0 {
            q
        } else if gamma == 2.0 {
            q * q
        } else {
            q.powf(gamma)
        }
    };
    let mut s = 0.0;
    let mut s_c = 0.0;
    let mut t = 0.0;
    let mut t_c = 0.0;
    for &v in &spectrum.values {
        if v == 0.0 {
            continue;
        }
        let w = weight(v);
        let y = w - s_c;
        let tmp = s + y;
        s_c = (tmp - s) - y;
        s = tmp;
        let wl = w * log(w);
        if wl != 0.0 {
            let y = wl - t_c;
            let tmp = t + y;
            t_c = (tmp - t) - y;
            t = tmp;
        }
    }
    Ok((s, t))
}

/// Effective rank: exponential of the Shannon entropy of the normalized
/// spectrum. Always in `[1, r]`; errors on an all-zero spectrum.
pub fn erank(spectrum: &SingularSpectrum, gamma: f64) -> Result<f64> {
    let (s, t) = entropy_terms(spectrum, gamma, f64::ln)?;
    Ok((s * (-t / s).exp()).clamp(1.0, spectrum.rank() as f64))
}

/// Same quantity computed with base-2 logarithms and `2^x`. Exists as a
/// cross-check; agrees with [`erank`] to better than 1e-12 relative.
pub fn erank_log2_form(spectrum: &SingularSpectrum, gamma: f64) -> Result<f64> {
    let (s, t) = entropy_terms(spectrum, gamma, f64::log2)?;
    Ok((s * (-t / s).exp2()).clamp(1.0, spectrum.rank() as f64))
}

/// Head/tail split index `K = ⌈eRank⌉`, clamped to `[1, r]`.
///
/// Values within 1e-9 of an integer snap to it before the ceiling, so a
/// mathematically integral eRank that lands an ulp high does not gain a
/// spurious extra component.
pub fn threshold_k(spectrum: &SingularSpectrum, gamma: f64) -> Result<usize> {
    let er = erank(spectrum, gamma)?;
    let snapped = if (er - er.round()).abs() <= 1e-9 { er.round() } else { er };
    Ok((snapped.ceil() as usize).clamp(1, spectrum.rank()))
}

// ─────────────────────────────────────────────────────────────────────────────
// Refinement
// ─────────────────────────────────────────────────────────────────────────────

fn check_cut(k: usize, rank: usize) -> Result<()> {
    if k < 1 || k > rank {
        return Err(Error::Input(format!(
            "cut index k={k} out of range [1, {rank}]"
        )));
    }
    Ok(())
}

/// Keep positions `1..=k`, multiply the tail by `lambda ∈ [0, 1]`.
/// Ordering is preserved because `σ_k ≥ σ_{k+1} ≥ λ·σ_{k+1}`.
pub fn refine_timber(spectrum: &SingularSpectrum, k: usize, lambda: f64) -> Result<SingularSpectrum> {
    check_cut(k, spectrum.rank())?;
    if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let values = spectrum
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| if i < k { v } else { lambda * v })
        .collect();
    SingularSpectrum::new(values)
}

/// Zero out every position past `k`; identical to `refine_timber(·, k, 0)`.
pub fn refine_timber_l(spectrum: &SingularSpectrum, k: usize) -> Result<SingularSpectrum> {
    refine_timber(spectrum, k, 0.0)
}

/// Keep the top `⌈rank_ratio · r⌉` values, zero the rest.
pub fn truncate_by_rank_ratio(spectrum: &SingularSpectrum, rank_ratio: f64) -> Result<SingularSpectrum> {
    let k = rank_ratio_cut(spectrum.rank(), rank_ratio)?;
    refine_timber_l(spectrum, k)
}

/// The cut index used by [`truncate_by_rank_ratio`].
pub fn rank_ratio_cut(rank: usize, rank_ratio: f64) -> Result<usize> {
    if !rank_ratio.is_finite() || rank_ratio <= 0.0 || rank_ratio > 1.0 {
        return Err(Error::Input(format!(
            "rank ratio must lie in (0, 1], got {rank_ratio}"
        )));
    }
    Ok(((rank_ratio * rank as f64).ceil() as usize).clamp(1, rank))
}

/// Keep the smallest prefix whose cumulative energy fraction reaches
/// `energy_ratio`, zero the rest.
pub fn truncate_by_energy(spectrum: &SingularSpectrum, energy_ratio: f64) -> Result<SingularSpectrum> {
    let m = energy_cut_index(spectrum, energy_ratio)?;
    refine_timber_l(spectrum, m)
}

/// The prefix length chosen by [`truncate_by_energy`]: the smallest `m` with
/// `Σ_{i≤m} σ_i² / Σ_i σ_i² ≥ energy_ratio`.
pub fn energy_cut_index(spectrum: &SingularSpectrum, energy_ratio: f64) -> Result<usize> {
    if !energy_ratio.is_finite() || energy_ratio <= 0.0 || energy_ratio > 1.0 {
        return Err(Error::Input(format!(
            "energy ratio must lie in (0, 1], got {energy_ratio}"
        )));
    }
    if spectrum.is_zero() {
        return Err(Error::Domain("energy threshold undefined for zero spectrum".into()));
    }
    // Running compensated sum of σ²; the prefix fractions here match
    // energy_preserved() bit-for-bit because both skip zero terms.
    let mut prefix = Vec::with_capacity(spectrum.rank());
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in &spectrum.values {
        let sq = v * v;
        if sq != 0.0 {
            let y = sq - c;
            let s = sum + y;
            c = (s - sum) - y;
            sum = s;
        }
        prefix.push(sum);
    }
    let total = sum;
    for (i, &p) in prefix.iter().enumerate() {
        if p / total >= energy_ratio {
            return Ok(i + 1);
        }
    }
    Ok(spectrum.rank())
}

/// Fraction of spectral energy retained: `Σ refined_i² / Σ original_i²`.
pub fn energy_preserved(original: &SingularSpectrum, refined: &SingularSpectrum) -> Result<f64> {
    if original.rank() != refined.rank() {
        return Err(Error::Input(format!(
            "spectrum length mismatch: {} vs {}",
            original.rank(),
            refined.rank()
        )));
    }
    let total = original.energy();
    if total == 0.0 {
        return Err(Error::Domain("energy undefined for zero spectrum".into()));
    }
    Ok(refined.energy() / total)
}

// ─────────────────────────────────────────────────────────────────────────────
// RefineStrategy
// ─────────────────────────────────────────────────────────────────────────────

/// A spectrum-refinement rule together with its parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefineStrategy {
    /// Keep the top `K = ⌈eRank⌉` values, attenuate the tail by `lambda`.
    Timber { lambda: f64 },
    /// Keep the top `K = ⌈eRank⌉` values, drop the tail entirely.
    TimberL,
    /// Keep a fixed fraction of the full rank.
    TruncateR { rank_ratio: f64 },
    /// Keep the smallest prefix reaching a target energy fraction.
    TruncateE { energy_ratio: f64 },
    /// Uniform interpolation `μ·W_I + (1−μ)·W_B`; spectrally, scale every
    /// singular value of the delta by `μ`.
    LinearMerge { mu: f64 },
}

impl RefineStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RefineStrategy::Timber { lambda } => {
                if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
                    return Err(Error::Input(format!("lambda must lie in [0, 1], got {lambda}")));
                }
            }
            RefineStrategy::TimberL => {}
            RefineStrategy::TruncateR { rank_ratio } => {
                rank_ratio_cut(1, rank_ratio)?;
            }
            RefineStrategy::TruncateE { energy_ratio } => {
                if !energy_ratio.is_finite() || energy_ratio <= 0.0 || energy_ratio > 1.0 {
                    return Err(Error::Input(format!(
                        "energy ratio must lie in (0, 1], got {energy_ratio}"
                    )));
                }
            }
            RefineStrategy::LinearMerge { mu } => {
                if !mu.is_finite() || !(0.0..=1.0).contains(&mu) {
                    return Err(Error::Input(format!("mu must lie in [0, 1], got {mu}")));
                }
            }
        }
        Ok(())
    }

    /// CLI/report tag for this strategy.
    pub fn tag(&self) -> &'static str {
        match self {
            RefineStrategy::Timber { .. } => "timber",
            RefineStrategy::TimberL => "timber-l",
            RefineStrategy::TruncateR { .. } => "truncate-r",
            RefineStrategy::TruncateE { .. } => "truncate-e",
            RefineStrategy::LinearMerge { .. } => "merge",
        }
    }

    /// Apply the strategy to a spectrum. Returns the refined spectrum and
    /// the head size `k` it was split at (for `LinearMerge`, `k` is the
    /// `⌈eRank⌉` threshold reported for diagnostics; nothing is split).
    pub fn refine_spectrum(
        &self,
        spectrum: &SingularSpectrum,
        gamma: f64,
    ) -> Result<(SingularSpectrum, usize)> {
        self.validate()?;
        match *self {
            RefineStrategy::Timber { lambda } => {
                let k = threshold_k(spectrum, gamma)?;
                Ok((refine_timber(spectrum, k, lambda)?, k))
            }
            RefineStrategy::TimberL => {
                let k = threshold_k(spectrum, gamma)?;
                Ok((refine_timber_l(spectrum, k)?, k))
            }
            RefineStrategy::TruncateR { rank_ratio } => {
                let k = rank_ratio_cut(spectrum.rank(), rank_ratio)?;
                Ok((refine_timber_l(spectrum, k)?, k))
            }
            RefineStrategy::TruncateE { energy_ratio } => {
                let m = energy_cut_index(spectrum, energy_ratio)?;
                Ok((refine_timber_l(spectrum, m)?, m))
            }
            RefineStrategy::LinearMerge { mu } => {
                let k = threshold_k(spectrum, gamma)?;
                let scaled = SingularSpectrum::new(
                    spectrum.values.iter().map(|&v| mu * v).collect(),
                )?;
                Ok((scaled, k))
            }
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// SVD (linalg feature)
// ─────────────────────────────────────────────────────────────────────────────

#[cfg(feature = "linalg")]
mod decomp {
    use super::*;
    use crate::tensor::{DenseMatrix, Dtype, Precision, WeightMatrix};
    use faer::dyn_stack::{MemBuffer, MemStack};
    use faer::linalg::svd::{ComputeSvdVectors, SvdParams};
    use faer::{Accum, MatRef, Par, Spec};

    /// Thin SVD factors of a named matrix: `A = left · diag(spectrum) · right_t`.
    #[derive(Debug, Clone)]
    pub struct SvdFactors {
        /// Layer the factors came from; carried for diagnostics.
        pub name: String,
        /// Storage dtype of the source tensor.
        pub dtype: Dtype,
        /// `d_1 × r` left singular vectors.
        pub left: DenseMatrix,
        pub spectrum: SingularSpectrum,
        /// `r × d_2` transposed right singular vectors.
        pub right_t: DenseMatrix,
    }

    /// Thin SVD at 64-bit compute precision.
    pub fn svd(matrix: &WeightMatrix) -> Result<SvdFactors> {
        svd_with_precision(matrix, Precision::F64)
    }

    /// Thin SVD with an explicit compute precision. All faer calls run
    /// sequentially so results are identical regardless of thread count;
    /// parallelism belongs one level up, across layers.
    pub fn svd_with_precision(matrix: &WeightMatrix, precision: Precision) -> Result<SvdFactors> {
        let (rows, cols) = matrix.shape_2d().ok_or_else(|| {
            Error::Input(format!(
                "tensor {} has shape {:?}, SVD needs exactly 2 dimensions",
                matrix.name(),
                matrix.dims()
            ))
        })?;
        svd_parts(matrix.name(), matrix.dtype(), rows, cols, matrix.values(), precision)
    }

    /// SVD of raw row-major data; lets callers decompose deltas without
    /// wrapping them in a tensor first.
    pub fn svd_parts(
        name: &str,
        dtype: Dtype,
        rows: usize,
        cols: usize,
        data: &[f64],
        precision: Precision,
    ) -> Result<SvdFactors> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Input(format!(
                "tensor {name}: data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "tensor {name}: non-finite entry at flat index {pos}"
            )));
        }
        let (left, sv, right_t) = match precision {
            Precision::F64 => svd_f64(name, rows, cols, data)?,
            Precision::F32 => svd_f32(name, rows, cols, data)?,
        };
        let spectrum = SingularSpectrum::new(sv).map_err(|e| Error::Numerical {
            layer: name.to_string(),
            message: format!("SVD produced an invalid spectrum: {e}"),
        })?;
        Ok(SvdFactors {
            name: name.to_string(),
            dtype,
            left,
            spectrum,
            right_t,
        })
    }

    fn svd_f64(
        name: &str,
        rows: usize,
        cols: usize,
        data: &[f64],
    ) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
        let size = rows.min(cols);
        let par = Par::Seq;
        let params: Spec<SvdParams, f64> = Default::default();
        // The decomposition walks columns; feed it a column-major copy.
        let a = faer::Mat::<f64>::from_fn(rows, cols, |i, j| data[i * cols + j]);
        let mut s = faer::diag::Diag::<f64>::zeros(size);
        let mut u = faer::Mat::<f64>::zeros(rows, size);
        let mut v = faer::Mat::<f64>::zeros(cols, size);
        let mut buf = MemBuffer::new(faer::linalg::svd::svd_scratch::<f64>(
            rows,
            cols,
            ComputeSvdVectors::Thin,
            ComputeSvdVectors::Thin,
            par,
            params,
        ));
        faer::linalg::svd::svd(
            a.as_ref(),
            s.as_mut(),
            Some(u.as_mut()),
            Some(v.as_mut()),
            par,
            MemStack::new(&mut buf),
            params,
        )
        .map_err(|_| Error::Numerical {
            layer: name.to_string(),
            message: "SVD iteration failed to converge".into(),
        })?;
        let left = DenseMatrix::from_fn(rows, size, |i, j| u[(i, j)]);
        let right_t = DenseMatrix::from_fn(size, cols, |i, j| v[(j, i)]);
        let sv = (0..size).map(|i| s[i]).collect();
        Ok((left, sv, right_t))
    }

    fn svd_f32(
        name: &str,
        rows: usize,
        cols: usize,
        data: &[f64],
    ) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
        let size = rows.min(cols);
        let par = Par::Seq;
        let params: Spec<SvdParams, f32> = Default::default();
        let a = faer::Mat::<f32>::from_fn(rows, cols, |i, j| data[i * cols + j] as f32);
        let mut s = faer::diag::Diag::<f32>::zeros(size);
        let mut u = faer::Mat::<f32>::zeros(rows, size);
        let mut v = faer::Mat::<f32>::zeros(cols, size);
        let mut buf = MemBuffer::new(faer::linalg::svd::svd_scratch::<f32>(
            rows,
            cols,
            ComputeSvdVectors::Thin,
            ComputeSvdVectors::Thin,
            par,
            params,
        ));
        faer::linalg::svd::svd(
            a.as_ref(),
            s.as_mut(),
            Some(u.as_mut()),
            Some(v.as_mut()),
            par,
            MemStack::new(&mut buf),
            params,
        )
        .map_err(|_| Error::Numerical {
            layer: name.to_string(),
            message: "SVD iteration failed to converge (f32)".into(),
        })?;
        let left = DenseMatrix::from_fn(rows, size, |i, j| u[(i, j)] as f64);
        let right_t = DenseMatrix::from_fn(size, cols, |i, j| v[(j, i)] as f64);
        let sv = (0..size).map(|i| s[i] as f64).collect();
        Ok((left, sv, right_t))
    }

    /// Rebuild `left · diag(spectrum) · right_t` as a full matrix.
    pub fn reconstruct(factors: &SvdFactors) -> Result<WeightMatrix> {
        let r = factors.spectrum.rank();
        if factors.left.cols() != r || factors.right_t.rows() != r {
            return Err(Error::Input(format!(
                "factor shapes do not conform: left is {}x{}, right_t is {}x{}, spectrum has {r} values",
                factors.left.rows(),
                factors.left.cols(),
                factors.right_t.rows(),
                factors.right_t.cols(),
            )));
        }
        let m = scaled_reconstruct(&factors.left, factors.spectrum.values(), &factors.right_t);
        WeightMatrix::new(
            factors.name.clone(),
            vec![m.rows(), m.cols()],
            factors.dtype,
            m.into_data(),
        )
    }

    /// `U · diag(sv) · Vᵀ` with a sequential deterministic matmul.
    pub(crate) fn scaled_reconstruct(
        left: &DenseMatrix,
        sv: &[f64],
        right_t: &DenseMatrix,
    ) -> DenseMatrix {
        let (d1, r) = (left.rows(), left.cols());
        let d2 = right_t.cols();
        let mut scaled = Vec::with_capacity(d1 * r);
        for i in 0..d1 {
            for j in 0..r {
                scaled.push(left[(i, j)] * sv[j]);
            }
        }
        let us = MatRef::from_row_major_slice(scaled.as_slice(), d1, r);
        let vt = MatRef::from_row_major_slice(right_t.data(), r, d2);
        let mut out = faer::Mat::<f64>::zeros(d1, d2);
        faer::linalg::matmul::matmul(&mut out, Accum::Replace, us, vt, 1.0, Par::Seq);
        DenseMatrix::from_fn(d1, d2, |i, j| out[(i, j)])
    }
}

#[cfg(feature = "linalg")]
pub use decomp::{reconstruct, svd, svd_parts, svd_with_precision, SvdFactors};
#[cfg(feature = "linalg")]
pub(crate) use decomp::scaled_reconstruct;

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────
