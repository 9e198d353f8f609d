//! Non-learning reference controllers.
//!
//! The droop controller integrates local voltage error: each actuator moves
//! its setpoint opposite to the deviation at its own bus and saturates at
//! the actuator box. The no-op controller leaves reactive power untouched.

use nalgebra::DMatrix;

use crate::feeder::Feeder;
use crate::linearization::Sensitivities;

/// Integral voltage-droop control over the controllable buses.
///
/// Each step moves the setpoints by `-alpha * (v - v_ref)` and clips to the
/// actuator boxes, so a persistent deviation walks the setpoint until the
/// deviation closes or the box binds.
#[derive(Debug, Clone)]
pub struct LinearPolicy {
    q: Vec<f64>,
    boxes: Vec<(f64, f64)>,
    pub alpha: f64,
    pub v_ref: f64,
}

impl LinearPolicy {
    pub fn new(feeder: &Feeder, alpha: f64, v_ref: f64) -> Self {
        assert!(alpha > 0.0, "droop gain must be positive");
        let boxes = feeder.q_boxes();
        LinearPolicy {
            q: vec![0.0; boxes.len()],
            boxes,
            alpha,
            v_ref,
        }
    }

    /// Largest stable-by-a-wide-margin gain: half the reciprocal of the
    /// largest eigenvalue of the controllable block of the reactive
    /// sensitivity matrix.
    pub fn default_alpha(feeder: &Feeder, sens: &Sensitivities) -> f64 {
        let controllable = feeder.controllable_buses();
        let m = controllable.len();
        assert!(m > 0, "feeder has no controllable buses");
        let x_cc = DMatrix::from_fn(m, m, |i, j| {
            sens.x[(controllable[i] - 1, controllable[j] - 1)]
        });
        let lambda_max = x_cc
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |acc, &l| acc.max(l));
        0.5 / lambda_max
    }

    /// Updates the setpoints from the voltages at the controllable buses
    /// (same order as [`Feeder::controllable_buses`]) and returns them.
    pub fn step(&mut self, v_at_controllable: &[f64]) -> Vec<f64> {
        assert_eq!(v_at_controllable.len(), self.q.len());
        for (i, &v) in v_at_controllable.iter().enumerate() {
            let proposed = self.q[i] - self.alpha * (v - self.v_ref);
            self.q[i] = proposed.clamp(self.boxes[i].0, self.boxes[i].1);
        }
        self.q.clone()
    }

    pub fn setpoints(&self) -> &[f64] {
        &self.q
    }

    pub fn reset(&mut self) {
        self.q.iter_mut().for_each(|q| *q = 0.0);
    }
}

/// Leaves reactive power alone.
#[derive(Debug, Clone)]
pub struct Noop {
    dim: usize,
}

impl Noop {
    pub fn new(feeder: &Feeder) -> Self {
        Noop {
            dim: feeder.controllable_buses().len(),
        }
    }

    pub fn step(&self) -> Vec<f64> {
        vec![0.0; self.dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::fixtures;
    use crate::linearization::sensitivities;
    use crate::powerflow::{solve, SweepOptions};

    #[test]
    fn reference_voltage_leaves_setpoints_unchanged() {
        let f = fixtures::two_bus(0.02, 0.02);
        let mut droop = LinearPolicy::new(&f, 0.7, 1.0);
        let q = droop.step(&[1.0]);
        assert_eq!(q, vec![0.0]);
    }

    #[test]
    fn unit_gain_cancels_the_observed_deviation() {
        let f = fixtures::two_bus(0.02, 0.02);
        let mut droop = LinearPolicy::new(&f, 1.0, 1.0);
        let q = droop.step(&[1.01]);
        assert!((q[0] + 0.01).abs() < 1e-15);
        let q = droop.step(&[1.01]);
        assert!((q[0] + 0.02).abs() < 1e-15, "integrates over steps: {}", q[0]);
    }

    #[test]
    fn setpoints_saturate_at_the_actuator_box() {
        let f = fixtures::two_bus(0.02, 0.02);
        let mut droop = LinearPolicy::new(&f, 100.0, 1.0);
        for _ in 0..5 {
            droop.step(&[1.2]);
        }
        assert_eq!(droop.setpoints(), &[-1.0]);
        for _ in 0..10 {
            droop.step(&[0.5]);
        }
        assert_eq!(droop.setpoints(), &[1.0]);
    }

    #[test]
    fn default_gain_on_a_single_actuator_is_half_the_inverse_sensitivity() {
        let f = fixtures::two_bus(0.02, 0.02);
        let sens = sensitivities(&f);
        let alpha = LinearPolicy::default_alpha(&f, &sens);
        assert!((alpha - 0.5 / 0.04).abs() < 1e-12, "alpha {alpha}");
    }

    #[test]
    fn closed_loop_contracts_to_the_reference() {
        let f = fixtures::two_bus(0.02, 0.02);
        let sens = sensitivities(&f);
        let alpha = LinearPolicy::default_alpha(&f, &sens);
        let mut droop = LinearPolicy::new(&f, alpha, 1.0);
        let p = vec![0.0];
        let q_background = 0.5;
        let opts = SweepOptions::default();
        let mut v = solve(&f, &p, &[q_background], &opts).unwrap().v[1];
        let initial_error = (v - 1.0).abs();
        let mut q = vec![0.0];
        for _ in 0..60 {
            q = droop.step(&[v]);
            v = solve(&f, &p, &[q_background + q[0]], &opts).unwrap().v[1];
        }
        let final_error = (v - 1.0).abs();
        assert!(
            final_error < initial_error / 100.0,
            "error {initial_error} only fell to {final_error}"
        );
        assert!(final_error < 1e-3);
        assert!(
            (q[0] + q_background).abs() < 0.05,
            "compensation should roughly cancel the background: {}",
            q[0]
        );
    }

    #[test]
    fn reset_clears_the_integrator() {
        let f = fixtures::two_bus(0.02, 0.02);
        let mut droop = LinearPolicy::new(&f, 1.0, 1.0);
        droop.step(&[1.05]);
        assert_ne!(droop.setpoints(), &[0.0]);
        droop.reset();
        assert_eq!(droop.setpoints(), &[0.0]);
    }

    #[test]
    fn noop_emits_zeros_of_the_right_width() {
        let f = fixtures::ieee13();
        let noop = Noop::new(&f);
        assert_eq!(noop.step(), vec![0.0; 9]);
    }
}
