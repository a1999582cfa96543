//! Central finite-difference comparison against hand-written gradients.

use serde::Serialize;

use crate::nn::{Grads, ParamSet};
use crate::numerics::RngState;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const MAX_COORDS_PER_TENSOR: usize = 64;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Probes every non-frozen tensor at up to `max_coords` coordinates (all of
/// them when the tensor is small enough, a seeded sample otherwise).
pub fn check_gradients(
    ps: &ParamSet,
    grads: &Grads,
    loss: &dyn Fn(&ParamSet) -> f64,
    max_coords: usize,
    seed: u64,
) -> GradCheckReport {
    let mut rng = RngState::new(seed);
    let mut probe = ps.clone();
    let mut tensors = Vec::new();
    for id in ps.ids() {
        if ps.is_frozen(id) {
            continue;
        }
        let n = ps.get(id).len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(max_coords);
            all
        };
        let mut check = TensorCheck {
            name: ps.name(id).to_string(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let orig = probe.data(id)[c];
            probe.get_mut(id).data_mut()[c] = orig + FD_STEP;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[c] = orig - FD_STEP;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.get(id).data()[c];
            let err = rel_error(analytic, numeric);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                check.worst = c;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    GradCheckReport {
        tensors,
        tolerance: FD_TOLERANCE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_passes_and_corruption_fails() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let loss = |p: &ParamSet| p.data(id).iter().map(|v| v * v).sum::<f64>();
        let mut g = ps.zero_grads();
        g.add(id, &[2.0, -4.0, 1.0]);
        let r = check_gradients(&ps, &g, &loss, 64, 0);
        assert!(r.passed(), "{r:?}");
        g.slot(id)[1] += 0.5;
        let r = check_gradients(&ps, &g, &loss, 64, 0);
        assert!(!r.passed());
        assert_eq!(r.worst().unwrap().worst, 1);
    }

    #[test]
    fn frozen_tensors_skipped() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::zeros(&[2]));
        ps.set_frozen(id, true);
        let r = check_gradients(&ps, &ps.zero_grads(), &|_| 0.0, 64, 0);
        assert!(r.tensors.is_empty());
    }
}
