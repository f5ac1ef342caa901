//! Delta algebra between paired checkpoints: `W_Δ = W_I − W_B`, adding a
//! refined delta back onto the Base weights, and plain linear interpolation.

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, WeightMatrix};

#[cfg(feature = "linalg")]
use crate::spectral::{scaled_reconstruct, SingularSpectrum, SvdFactors};

/// Element-wise difference between an Instruct tensor and its Base twin.
#[derive(Debug, Clone)]
pub struct LayerDelta {
    name: String,
    delta: DenseMatrix,
    is_zero: bool,
}

impl LayerDelta {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.delta
    }

    /// True iff every entry of the delta is exactly zero — no tolerance.
    pub fn is_zero(&self) -> bool {
        self.is_zero
    }
}

fn check_pairing(instruct: &WeightMatrix, base: &WeightMatrix) -> Result<(usize, usize)> {
    if instruct.name() != base.name() {
        return Err(Error::Pairing(format!(
            "tensor names do not correspond: {:?} vs {:?}",
            instruct.name(),
            base.name()
        )));
    }
    if instruct.dims() != base.dims() {
        return Err(Error::Pairing(format!(
            "layer {}: shape mismatch {:?} vs {:?}",
            instruct.name(),
            instruct.dims(),
            base.dims()
        )));
    }
    instruct.shape_2d().ok_or_else(|| {
        Error::Input(format!(
            "layer {}: deltas are defined for 2-D tensors, got shape {:?}",
            instruct.name(),
            instruct.dims()
        ))
    })
}

/// `W_Δ = W_I − W_B` at compute precision. Storage dtypes may differ; both
/// sides upcast losslessly before subtracting.
pub fn compute_delta(instruct: &WeightMatrix, base: &WeightMatrix) -> Result<LayerDelta> {
    let (rows, cols) = check_pairing(instruct, base)?;
    let mut is_zero = true;
    let mut values = Vec::with_capacity(instruct.element_count());
    for (idx, (&i, &b)) in instruct.values().iter().zip(base.values()).enumerate() {
        if !i.is_finite() || !b.is_finite() {
            return Err(Error::Input(format!(
                "layer {}: non-finite entry at flat index {idx}",
                instruct.name()
            )));
        }
        let d = i - b;
        if d != 0.0 {
            is_zero = false;
        }
        values.push(d);
    }
    Ok(LayerDelta {
        name: instruct.name().to_string(),
        delta: DenseMatrix::from_vec(rows, cols, values)?,
        is_zero,
    })
}

/// `W_B + U · diag(refined) · Vᵀ`: rebuild the refined delta from its SVD
/// factors and add it back onto the Base weights. The result keeps the Base
/// tensor's name and storage dtype; callers retag the dtype when an output
/// policy says otherwise.
#[cfg(feature = "linalg")]
pub fn apply_refined_delta(
    base: &WeightMatrix,
    factors: &SvdFactors,
    refined: &SingularSpectrum,
) -> Result<WeightMatrix> {
    let (rows, cols) = base.shape_2d().ok_or_else(|| {
        Error::Input(format!(
            "layer {}: base tensor must be 2-D, got shape {:?}",
            base.name(),
            base.dims()
        ))
    })?;
    let r = factors.spectrum.rank();
    if refined.rank() != r {
        return Err(Error::Input(format!(
            "layer {}: refined spectrum has {} values, factors carry {r}",
            base.name(),
            refined.rank()
        )));
    }
    if factors.left.rows() != rows
        || factors.left.cols() != r
        || factors.right_t.rows() != r
        || factors.right_t.cols() != cols
    {
        return Err(Error::Input(format!(
            "layer {}: factor shapes {}x{} / {}x{} do not conform to base {rows}x{cols}",
            base.name(),
            factors.left.rows(),
            factors.left.cols(),
            factors.right_t.rows(),
            factors.right_t.cols(),
        )));
    }
    let rebuilt = scaled_reconstruct(&factors.left, refined.values(), &factors.right_t);
    let values = base
        .values()
        .iter()
        .zip(rebuilt.data())
        .map(|(&b, &d)| b + d)
        .collect();
    WeightMatrix::matrix(base.name(), rows, cols, base.dtype(), values)
}

/// `μ·W_I + (1−μ)·W_B`, evaluated in that form so `μ = 1` returns the
/// Instruct values exactly and `μ = 0` the Base values exactly. Works on
/// any matching shape; the result keeps the Instruct name and dtype.
pub fn linear_merge(instruct: &WeightMatrix, base: &WeightMatrix, mu: f64) -> Result<WeightMatrix> {
    if !mu.is_finite() || !(0.0..=1.0).contains(&mu) {
        return Err(Error::Input(format!("mu must lie in [0, 1], got {mu}")));
    }
    if instruct.dims() != base.dims() {
        return Err(Error::Pairing(format!(
            "layer {}: shape mismatch {:?} vs {:?}",
            instruct.name(),
            instruct.dims(),
            base.dims()
        )));
    }
    let values: Vec<f64> = if mu == 1.0 {
        instruct.values().to_vec()
    } else if mu == 0.0 {
        base.values().to_vec()
    } else {
        instruct
            .values()
            .iter()
            .zip(base.values())
            .map(|(&i, &b)| mu * i + (1.0 - mu) * b)
            .collect()
    };
    WeightMatrix::new(instruct.name(), instruct.dims().to_vec(), instruct.dtype(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dtype;

    fn wm(name: &str, rows: usize, cols: usize, values: Vec<f64>) -> WeightMatrix {
        WeightMatrix::matrix(name, rows, cols, Dtype::F32, values).unwrap()
    }

    #[test]
    fn identical_tensors_give_zero_delta() {
        let a = wm("w", 2, 2, vec![1.0, -2.0, 3.5, 0.0]);
        let d = compute_delta(&a, &a.clone()).unwrap();
        assert!(d.is_zero());
        assert!(d.matrix().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_base_gives_instruct_back() {
        let i = wm("w", 2, 2, vec![1.0, -2.0, 3.5, 0.25]);
        let b = wm("w", 2, 2, vec![0.0; 4]);
        let d = compute_delta(&i, &b).unwrap();
        assert_eq!(d.matrix().data(), i.values());
        assert!(!d.is_zero());
    }

    #[test]
    fn base_plus_delta_recovers_instruct() {
        let i = wm("w", 2, 3, vec![0.3, -1.7, 2.2, 0.9, -0.4, 5.5]);
        let b = wm("w", 2, 3, vec![1.1, 0.6, -3.2, 0.8, 0.0, -2.5]);
        let d = compute_delta(&i, &b).unwrap();
        for ((&bv, &dv), &iv) in b.values().iter().zip(d.matrix().data()).zip(i.values()) {
            assert!((bv + dv - iv).abs() <= 1e-12 * iv.abs().max(1.0));
        }
    }

    #[test]
    fn delta_is_antisymmetric() {
        let a = wm("w", 2, 3, vec![1.5, 2.0, -4.25, 0.5, 9.0, -1.0]);
        let b = wm("w", 2, 3, vec![0.25, -2.0, 4.0, 0.75, 3.0, 8.5]);
        let ab = compute_delta(&a, &b).unwrap();
        let ba = compute_delta(&b, &a).unwrap();
        for (x, y) in ab.matrix().data().iter().zip(ba.matrix().data()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn pairing_errors() {
        let a = wm("w1", 2, 2, vec![0.0; 4]);
        let b = wm("w2", 2, 2, vec![0.0; 4]);
        assert!(matches!(compute_delta(&a, &b), Err(Error::Pairing(_))));
        let c = wm("w1", 4, 1, vec![0.0; 4]);
        assert!(matches!(compute_delta(&a, &c), Err(Error::Pairing(_))));
        let nan = wm("w1", 2, 2, vec![0.0, f64::NAN, 0.0, 0.0]);
        assert!(matches!(compute_delta(&nan, &a), Err(Error::Input(_))));
    }

    #[test]
    fn merge_endpoints_are_exact() {
        let i = wm("w", 2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let b = wm("w", 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(linear_merge(&i, &b, 1.0).unwrap().values(), i.values());
        assert_eq!(linear_merge(&i, &b, 0.0).unwrap().values(), b.values());
        assert!(matches!(linear_merge(&i, &b, 1.5), Err(Error::Input(_))));
        assert!(matches!(linear_merge(&i, &b, f64::NAN), Err(Error::Input(_))));
    }

    #[test]
    fn merge_equals_scaled_delta() {
        let i = wm("w", 2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let b = wm("w", 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mu = 0.95;
        let merged = linear_merge(&i, &b, mu).unwrap();
        let delta = compute_delta(&i, &b).unwrap();
        for ((&m, &bv), &d) in merged.values().iter().zip(b.values()).zip(delta.matrix().data()) {
            assert!((m - (bv + mu * d)).abs() < 1e-12);
        }
    }

    #[cfg(feature = "linalg")]
    mod refined_delta {
        use super::*;
        use crate::spectral::{refine_timber_l, svd, SingularSpectrum};

        /// 4×4 orthonormal matrix with exactly representable entries ±1/2.
        fn hadamard4() -> DenseMatrix {
            let h = [
                [0.5, 0.5, 0.5, 0.5],
                [0.5, -0.5, 0.5, -0.5],
                [0.5, 0.5, -0.5, -0.5],
                [0.5, -0.5, -0.5, 0.5],
            ];
            DenseMatrix::from_fn(4, 4, |i, j| h[i][j])
        }

        fn dense_mul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
            DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| {
                (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
            })
        }

        fn known_factor_matrix(sv: &[f64]) -> DenseMatrix {
            let u = hadamard4();
            let scaled = DenseMatrix::from_fn(4, 4, |i, j| u[(i, j)] * sv[j]);
            // V = H as well; Vᵀ = Hᵀ = H (symmetric up to this layout)
            let vt = DenseMatrix::from_fn(4, 4, |i, j| u[(j, i)]);
            dense_mul(&scaled, &vt)
        }

        #[test]
        fn identity_refinement_recovers_instruct() {
            let b = wm("w", 4, 4, (0..16).map(|v| v as f64 * 0.125).collect());
            let delta_known = known_factor_matrix(&[4.0, 3.0, 2.0, 1.0]);
            let i = wm(
                "w",
                4,
                4,
                b.values()
                    .iter()
                    .zip(delta_known.data())
                    .map(|(&x, &d)| x + d)
                    .collect(),
            );
            let delta = compute_delta(&i, &b).unwrap();
            let f = svd(&wm("w", 4, 4, delta.matrix().data().to_vec())).unwrap();
            let out = apply_refined_delta(&b, &f, &f.spectrum).unwrap();
            let num: f64 = out
                .values()
                .iter()
                .zip(i.values())
                .map(|(a, c)| (a - c) * (a - c))
                .sum();
            let den: f64 = i.values().iter().map(|v| v * v).sum();
            assert!((num / den).sqrt() < 1e-5);
        }

        #[test]
        fn zero_spectrum_returns_base() {
            let b = wm("w", 4, 4, (0..16).map(|v| (v as f64).sin()).collect());
            let i = wm("w", 4, 4, (0..16).map(|v| (v as f64).cos()).collect());
            let delta = compute_delta(&i, &b).unwrap();
            let f = svd(&wm("w", 4, 4, delta.matrix().data().to_vec())).unwrap();
            let zeros = SingularSpectrum::new(vec![0.0; 4]).unwrap();
            let out = apply_refined_delta(&b, &f, &zeros).unwrap();
            for (a, c) in out.values().iter().zip(b.values()) {
                assert_eq!(a, c);
            }
        }

        #[test]
        fn dropping_the_rank_one_tail_matches_analytic_construction() {
            // Δ = H·diag(4,3,2,1)·Hᵀ with H orthonormal and exact in binary;
            // cutting at k = 3 must reproduce W_B + H·diag(4,3,2,0)·Hᵀ.
            let sv = [4.0, 3.0, 2.0, 1.0];
            let b = wm("w", 4, 4, (0..16).map(|v| 0.01 * v as f64).collect());
            let delta_known = known_factor_matrix(&sv);
            let i = wm(
                "w",
                4,
                4,
                b.values()
                    .iter()
                    .zip(delta_known.data())
                    .map(|(&x, &d)| x + d)
                    .collect(),
            );
            let expected_delta = known_factor_matrix(&[4.0, 3.0, 2.0, 0.0]);

            let delta = compute_delta(&i, &b).unwrap();
            let f = svd(&wm("w", 4, 4, delta.matrix().data().to_vec())).unwrap();
            let refined = refine_timber_l(&f.spectrum, 3).unwrap();
            let out = apply_refined_delta(&b, &f, &refined).unwrap();
            for ((&got, &base_v), &d) in out.values().iter().zip(b.values()).zip(expected_delta.data())
            {
                assert!((got - (base_v + d)).abs() < 1e-8, "{got} vs {}", base_v + d);
            }
        }

        #[test]
        fn factor_shape_mismatch_is_rejected() {
            let b = wm("w", 4, 4, vec![0.0; 16]);
            let other = wm("w", 4, 3, (0..12).map(|v| v as f64).collect());
            let f = svd(&other).unwrap();
            assert!(matches!(
                apply_refined_delta(&b, &f, &f.spectrum),
                Err(Error::Input(_))
            ));
        }
    }
}
