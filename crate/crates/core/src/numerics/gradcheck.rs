//! Central-difference verification of analytic gradients.
//!
//! The checker perturbs randomly chosen trainable coordinates by `±h`,
//! re-evaluates a caller-supplied loss, and compares `(l+ - l-) / 2h`
//! against the analytic gradient. The loss is evaluated twice up front and
//! must reproduce bitwise, otherwise the comparison would be meaningless.

use std::collections::BTreeMap;

use super::{NumericsError, ParameterSet, Result};
use crate::rng::{rng_for, shuffled_indices};

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Number of coordinates actually probed.
    pub probes: usize,
    /// Maximum relative error over all probes.
    pub max_rel_err: f64,
    /// Coordinate of the maximum: (parameter, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
///
/// The floor is the resolution limit of central differences at h ≈ 1e-5 on
/// an O(1) loss: cancellation noise on `(l+ - l-) / 2h` is ~1e-10, so
/// gradients below ~1e-6 cannot be certified to 1e-4 *relative* accuracy.
/// With the floor, such coordinates are instead held to 1e-10 *absolute*
/// accuracy — as tight as the measurement allows, and far below any real
/// gradient defect (a 10% corruption still fails by orders of magnitude).
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare `analytic` gradients against central differences of `loss_fn`.
///
/// * `params` — parameter store; trainable coordinates form the probe space.
/// * `loss_fn` — deterministic scalar loss of the current parameter values.
/// * `analytic` — per-parameter analytic gradients (flat, full length).
/// * `h` — perturbation half-width.
/// * `probes` — number of distinct coordinates to test (capped at the total
///   trainable coordinate count).
/// * `seed` — probe-selection seed.
pub fn finite_difference_check(
    params: &mut ParameterSet,
    loss_fn: &mut dyn FnMut(&ParameterSet) -> Result<f64>,
    analytic: &BTreeMap<String, Vec<f64>>,
    h: f64,
    probes: usize,
    seed: u64,
) -> Result<FdReport> {
    if probes == 0 {
        return Err(NumericsError::NoProbes(0));
    }
    let base_a = loss_fn(params)?;
    let base_b = loss_fn(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(NumericsError::NonDeterministicLoss(base_a, base_b));
    }

    // Flat coordinate space over trainable parameters, in name order.
    let layout: Vec<(String, usize)> = params
        .trainable()
        .map(|(name, tensor)| (name.to_string(), tensor.numel()))
        .collect();
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(NumericsError::NoProbes(0));
    }
    let count = probes.min(total);
    let mut rng = rng_for(seed, &[total as u64, count as u64]);
    let order = shuffled_indices(&mut rng, total);

    let mut max_rel_err = 0.0;
    let mut worst = None;
    for &flat in order.iter().take(count) {
        // Map the flat coordinate back to (parameter, offset).
        let mut remaining = flat;
        let (name, offset) = layout
            .iter()
            .find_map(|(name, numel)| {
                if remaining < *numel {
                    Some((name.clone(), remaining))
                } else {
                    remaining -= numel;
                    None
                }
            })
            .expect("flat coordinate within layout");

        let grad_row = analytic
            .get(&name)
            .ok_or_else(|| NumericsError::IncompleteBackward(name.clone()))?;
        if grad_row.len() != params.get(&name)?.numel() {
            return Err(NumericsError::GradShapeMismatch {
                name: name.clone(),
                got: grad_row.len(),
                expect: params.get(&name)?.numel(),
            });
        }
        let a = grad_row[offset];

        let original = params.get(&name)?.values()[offset];
        params.get_mut(&name)?.values_mut()[offset] = original + h;
        let plus = loss_fn(params)?;
        params.get_mut(&name)?.values_mut()[offset] = original - h;
        let minus = loss_fn(params)?;
        // Bitwise restore.
        params.get_mut(&name)?.values_mut()[offset] = original;

        let numeric = (plus - minus) / (2.0 * h);
        let rel = relative_error(a, numeric);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = Some((name, offset, a, numeric));
        }
    }

    Ok(FdReport {
        probes: count,
        max_rel_err,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn quadratic_params() -> ParameterSet {
        let mut params = ParameterSet::new();
        params
            .insert(
                "x",
                Tensor::new(vec![4], vec![0.5, -1.25, 2.0, 0.1]).unwrap(),
            )
            .unwrap();
        params
    }

    fn quadratic_loss(p: &ParameterSet) -> Result<f64> {
        Ok(p.get("x")?.values().iter().map(|v| 0.5 * v * v).sum())
    }

    #[test]
    fn correct_gradient_passes_tightly() {
        let mut params = quadratic_params();
        // d/dx of 0.5 x^2 is x itself.
        let analytic = BTreeMap::from([(
            "x".to_string(),
            params.get("x").unwrap().values().to_vec(),
        )]);
        let report = finite_difference_check(
            &mut params,
            &mut quadratic_loss,
            &analytic,
            1e-5,
            32,
            7,
        )
        .unwrap();
        assert_eq!(report.probes, 4); // capped at the coordinate count
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-7);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut params = quadratic_params();
        let corrupted: Vec<f64> = params
            .get("x")
            .unwrap()
            .values()
            .iter()
            .map(|v| v * 1.1)
            .collect();
        let analytic = BTreeMap::from([("x".to_string(), corrupted)]);
        let report =
            finite_difference_check(&mut params, &mut quadratic_loss, &analytic, 1e-5, 32, 7)
                .unwrap();
        assert!(!report.passes(1e-4));
        // |1.1x - x| / 1.1|x| = 1/11
        assert!((report.max_rel_err - 1.0 / 11.0).abs() < 1e-3);
        assert!(report.worst.is_some());
    }

    #[test]
    fn parameters_are_restored_bitwise() {
        let mut params = quadratic_params();
        let before: Vec<u64> = params
            .get("x")
            .unwrap()
            .values()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let analytic = BTreeMap::from([(
            "x".to_string(),
            params.get("x").unwrap().values().to_vec(),
        )]);
        finite_difference_check(&mut params, &mut quadratic_loss, &analytic, 1e-5, 32, 7).unwrap();
        let after: Vec<u64> = params
            .get("x")
            .unwrap()
            .values()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn non_deterministic_loss_is_rejected() {
        let mut params = quadratic_params();
        let analytic = BTreeMap::from([("x".to_string(), vec![0.0; 4])]);
        let mut calls = 0usize;
        let mut noisy = |p: &ParameterSet| {
            calls += 1;
            Ok(quadratic_loss(p)? + calls as f64 * 1e-12)
        };
        let err =
            finite_difference_check(&mut params, &mut noisy, &analytic, 1e-5, 32, 7).unwrap_err();
        assert!(matches!(err, NumericsError::NonDeterministicLoss(_, _)));
    }

    #[test]
    fn frozen_parameters_are_not_probed() {
        let mut params = quadratic_params();
        params
            .insert("frozen", Tensor::new(vec![1], vec![3.0]).unwrap())
            .unwrap();
        params.freeze("frozen").unwrap();
        // No analytic entry for the frozen parameter: must not be required.
        let analytic = BTreeMap::from([(
            "x".to_string(),
            params.get("x").unwrap().values().to_vec(),
        )]);
        let report =
            finite_difference_check(&mut params, &mut quadratic_loss, &analytic, 1e-5, 32, 7)
                .unwrap();
        assert!(report.passes(1e-4));
    }

    #[test]
    fn zero_probe_budget_is_an_error() {
        let mut params = quadratic_params();
        let analytic = BTreeMap::new();
        assert!(matches!(
            finite_difference_check(&mut params, &mut quadratic_loss, &analytic, 1e-5, 0, 7),
            Err(NumericsError::NoProbes(0))
        ));
    }
}
