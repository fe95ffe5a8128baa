//! Sparsemax: Euclidean projection onto the probability simplex.
//!
//! For `z ∈ ℝⁿ` sorted descending as `z₍₁₎ ≥ … ≥ z₍ₙ₎`, the support size is
//! `k(z) = max{k : 1 + k·z₍ₖ₎ > Σ_{j≤k} z₍ⱼ₎}`, the threshold is
//! `τ = (Σ_{j≤k} z₍ⱼ₎ − 1)/k`, and `sparsemax(z)ᵢ = max(zᵢ − τ, 0)`.
//!
//! On the support `S` the Jacobian is `I_S − 1_S 1_Sᵀ/|S|` and zero elsewhere.
//! It is symmetric, so the same routine serves as JVP and VJP.

use num_traits::Float;

use crate::error::{Error, Result};

fn check<T: Float>(z: &[T]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::Parameter("sparsemax of an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter(
            "sparsemax input has non-finite entries".into(),
        ));
    }
    Ok(())
}

/// Threshold `τ` and support size `k` for `z`.
pub fn sparsemax_threshold<T: Float>(z: &[T]) -> Result<(T, usize)> {
    check(z)?;
    let mut sorted: Vec<T> = z.to_vec();
    // Stable descending sort; ties keep index order.
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut cumsum = T::zero();
    let mut k = 0;
    let mut sum_k = T::zero();
    for (i, &v) in sorted.iter().enumerate() {
        cumsum = cumsum + v;
        let kk = T::from(i + 1).expect("count");
        if T::one() + kk * v > cumsum {
            k = i + 1;
            sum_k = cumsum;
        }
    }
    let tau = (sum_k - T::one()) / T::from(k).expect("count");
    Ok((tau, k))
}

/// Computed on `z − max(z)`, so shifting `z` by any constant that keeps its
/// entries exactly representable gives a bit-identical result.
pub fn sparsemax<T: Float>(z: &[T]) -> Result<Vec<T>> {
    check(z)?;
    let top = z.iter().copied().fold(T::neg_infinity(), T::max);
    let centred: Vec<T> = z.iter().map(|&v| v - top).collect();
    let (tau, _) = sparsemax_threshold(&centred)?;
    Ok(centred.iter().map(|&v| (v - tau).max(T::zero())).collect())
}

/// Jacobian–vector product at `z`.
pub fn sparsemax_jvp<T: Float>(z: &[T], v: &[T]) -> Result<Vec<T>> {
    if z.len() != v.len() {
        return Err(Error::Dimension(format!(
            "sparsemax jvp: input {} vs direction {}",
            z.len(),
            v.len()
        )));
    }
    let p = sparsemax(z)?;
    Ok(sparsemax_backward(&p, v))
}

/// Gradient pull-back given the forward output `p` (support = `p > 0`).
pub fn sparsemax_backward<T: Float>(p: &[T], upstream: &[T]) -> Vec<T> {
    let mut sum = T::zero();
    let mut count = 0usize;
    for (&pi, &g) in p.iter().zip(upstream) {
        if pi > T::zero() {
            sum = sum + g;
            count += 1;
        }
    }
    let mean = if count > 0 {
        sum / T::from(count).expect("count")
    } else {
        T::zero()
    };
    p.iter()
        .zip(upstream)
        .map(|(&pi, &g)| if pi > T::zero() { g - mean } else { T::zero() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exact simplex projection by enumerating every candidate support set:
    /// for support S the KKT point is `p_S = z_S − τ_S`, `τ_S = (Σ z_S − 1)/|S|`;
    /// the projection is the feasible candidate closest to `z`.
    fn brute_force(z: &[f64]) -> Vec<f64> {
        let n = z.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << n) {
            let support: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            let tau = (support.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / support.len() as f64;
            let mut p = vec![0.0; n];
            let mut feasible = true;
            for &i in &support {
                p[i] = z[i] - tau;
                if p[i] < -1e-12 {
                    feasible = false;
                }
            }
            if !feasible {
                continue;
            }
            let d: f64 = p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, p));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn reference_examples() {
        assert_eq!(sparsemax(&[3.0, 1.0]).unwrap(), vec![1.0, 0.0]);
        let p = sparsemax(&[1.2, 0.8]).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-15 && (p[1] - 0.3).abs() < 1e-15);
        let b = brute_force(&[1.2, 0.8]);
        assert!((b[0] - 0.7).abs() < 1e-12 && (b[1] - 0.3).abs() < 1e-12);
        assert_eq!(brute_force(&[3.0, 1.0]), vec![1.0, 0.0]);
        for n in 1..7 {
            let p = sparsemax(&vec![0.37; n]).unwrap();
            assert!(p.iter().all(|&v| (v - 1.0 / n as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn empty_and_nonfinite_rejected() {
        assert!(matches!(sparsemax::<f64>(&[]), Err(Error::Parameter(_))));
        assert!(sparsemax(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn jvp_cases() {
        // support size 1 → zero Jacobian
        let g = sparsemax_jvp(&[5.0, 0.0, -1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
        // equal upstream on the support projects to zero
        let z = [0.5, 0.4, 0.3, -3.0];
        let g = sparsemax_jvp(&z, &[2.0, 2.0, 2.0, 7.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(
            sparsemax_jvp(&z, &[1.0]),
            Err(Error::Dimension(_))
        ));
    }

    proptest! {
        #[test]
        fn matches_enumeration_oracle(z in proptest::collection::vec(-3.0f64..3.0, 1..=8)) {
            let p = sparsemax(&z).unwrap();
            let b = brute_force(&z);
            for (a, e) in p.iter().zip(&b) {
                prop_assert!((a - e).abs() < 1e-8);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn shift_invariant_and_order_preserving(
            z in proptest::collection::vec(-3.0f64..3.0, 1..=10),
            c in -4.0f64..4.0,
        ) {
            // Shifting by a power of two keeps every entry exactly representable.
            let c = (c * 4.0).round() / 4.0;
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let p = sparsemax(&z).unwrap();
            let q = sparsemax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for i in 0..z.len() {
                for j in 0..z.len() {
                    if z[i] >= z[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn jvp_matches_finite_differences(
            z in proptest::collection::vec(-2.0f64..2.0, 2..=8),
            v in proptest::collection::vec(-1.0f64..1.0, 8),
        ) {
            let v = &v[..z.len()];
            let (tau, _) = sparsemax_threshold(&z).unwrap();
            // skip points within reach of a support change
            let margin = z.iter().map(|x| (x - tau).abs()).fold(f64::INFINITY, f64::min);
            prop_assume!(margin > 1e-3);
            let h = 1e-6;
            let plus: Vec<f64> = z.iter().zip(v).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = z.iter().zip(v).map(|(a, b)| a - h * b).collect();
            let fp = sparsemax(&plus).unwrap();
            let fm = sparsemax(&minus).unwrap();
            let jvp = sparsemax_jvp(&z, v).unwrap();
            for i in 0..z.len() {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let scale = fd.abs().max(jvp[i].abs()).max(1e-8);
                prop_assert!((fd - jvp[i]).abs() / scale < 1e-5 || (fd - jvp[i]).abs() < 1e-9);
            }
        }
    }
}
