//! Linearized branch-flow voltage model.
//!
//! Dropping the loss terms from the branch-flow equations leaves an affine
//! map from net injections to squared voltages:
//!
//! ```text
//! v = v0 * 1 + R p + X q
//! ```
//!
//! where entry `(i, j)` of `R` is twice the total resistance of the lines
//! shared between the root-to-`i` and root-to-`j` paths (`X` likewise with
//! reactances). Both matrices are symmetric positive definite with
//! non-negative entries, so any positive injection raises every predicted
//! voltage. Because the neglected loss term is non-negative, the affine
//! model never under-predicts: true squared voltages sit at or below it.

use nalgebra::DMatrix;

use crate::feeder::Feeder;

/// Voltage sensitivity matrices over non-root buses. Row/column `k`
/// corresponds to bus `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivities {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl Sensitivities {
    /// Columns of `X` restricted to the given buses, the map from
    /// controllable reactive injections to all squared voltages.
    pub fn x_columns(&self, buses: &[usize]) -> DMatrix<f64> {
        let n = self.x.nrows();
        let mut out = DMatrix::zeros(n, buses.len());
        for (c, &bus) in buses.iter().enumerate() {
            out.set_column(c, &self.x.column(bus - 1));
        }
        out
    }
}

/// Builds the sensitivity matrices by accumulating shared-path impedances.
pub fn sensitivities(feeder: &Feeder) -> Sensitivities {
    let n = feeder.injection_count();
    // Line index sets along each bus's path to the root, as boolean masks.
    let line_count = feeder.lines().len();
    let mut on_path = vec![vec![false; line_count]; n + 1];
    for j in 1..=n {
        let parent = feeder.parent_of(j).expect("non-root bus has a parent");
        let idx = feeder.line_into(j).expect("non-root bus has a feeding line");
        on_path[j] = on_path[parent].clone();
        on_path[j][idx] = true;
    }

    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for a in 1..=n {
        for b in a..=n {
            let mut rs = 0.0;
            let mut xs = 0.0;
            for (idx, line) in feeder.lines().iter().enumerate() {
                if on_path[a][idx] && on_path[b][idx] {
                    rs += line.r;
                    xs += line.x;
                }
            }
            r[(a - 1, b - 1)] = 2.0 * rs;
            r[(b - 1, a - 1)] = 2.0 * rs;
            x[(a - 1, b - 1)] = 2.0 * xs;
            x[(b - 1, a - 1)] = 2.0 * xs;
        }
    }
    Sensitivities { r, x }
}

/// Squared voltages predicted by the affine model, indexed by bus id with
/// `v[0]` fixed at the feeder head value.
pub fn predict(feeder: &Feeder, sens: &Sensitivities, p: &[f64], q: &[f64]) -> Vec<f64> {
    let n = feeder.injection_count();
    assert_eq!(p.len(), n, "p has wrong length");
    assert_eq!(q.len(), n, "q has wrong length");
    let mut v = vec![feeder.v0; feeder.bus_count()];
    for a in 0..n {
        let mut acc = feeder.v0;
        for b in 0..n {
            acc += sens.r[(a, b)] * p[b] + sens.x[(a, b)] * q[b];
        }
        v[a + 1] = acc;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::fixtures;
    use crate::powerflow::{self, SweepOptions};
    use proptest::prelude::*;

    #[test]
    fn chain_resistance_matrix_is_cumulative() {
        let f = fixtures::chain(3, 0.01, 0.02);
        let s = sensitivities(&f);
        let expected_r = [
            [0.02, 0.02, 0.02],
            [0.02, 0.04, 0.04],
            [0.02, 0.04, 0.06],
        ];
        let expected_x = [
            [0.04, 0.04, 0.04],
            [0.04, 0.08, 0.08],
            [0.04, 0.08, 0.12],
        ];
        for a in 0..3 {
            for b in 0..3 {
                assert!((s.r[(a, b)] - expected_r[a][b]).abs() < 1e-15, "r ({a},{b})");
                assert!((s.x[(a, b)] - expected_x[a][b]).abs() < 1e-15, "x ({a},{b})");
            }
        }
    }

    #[test]
    fn star_matrices_are_diagonal() {
        let f = fixtures::star(3, 0.02, 0.02);
        let s = sensitivities(&f);
        for a in 0..3 {
            for b in 0..3 {
                let expected = if a == b { 0.04 } else { 0.0 };
                assert!((s.r[(a, b)] - expected).abs() < 1e-15, "({a},{b})");
                assert!((s.x[(a, b)] - expected).abs() < 1e-15, "({a},{b})");
            }
        }
    }

    #[test]
    fn single_injection_moves_leaf_by_path_reactance() {
        let f = fixtures::chain(3, 0.01, 0.01);
        let s = sensitivities(&f);
        let v = predict(&f, &s, &[0.0; 3], &[0.0, 0.0, 0.1]);
        assert!((v[3] - 1.006).abs() < 1e-12, "got {}", v[3]);
        assert!((v[1] - 1.002).abs() < 1e-12);
    }

    #[test]
    fn matches_finite_difference_of_nonlinear_model() {
        // At zero injection the nonlinear model's Jacobian equals the
        // sensitivity matrices exactly, so central differences of the sweep
        // reproduce each column to second order in the step.
        let f = fixtures::ieee13();
        let s = sensitivities(&f);
        let n = f.injection_count();
        let eps = 1e-5;
        let opts = SweepOptions {
            tolerance: 1e-14,
            max_iterations: 500,
        };
        for b in 0..n {
            let mut plus = vec![0.0; n];
            let mut minus = vec![0.0; n];
            plus[b] = eps;
            minus[b] = -eps;
            let vp = powerflow::solve(&f, &plus, &vec![0.0; n], &opts).unwrap();
            let vm = powerflow::solve(&f, &minus, &vec![0.0; n], &opts).unwrap();
            for a in 0..n {
                let fd = (vp.v[a + 1] - vm.v[a + 1]) / (2.0 * eps);
                assert!(
                    (fd - s.r[(a, b)]).abs() < 1e-7,
                    "r column {b} row {a}: fd {fd} vs {}",
                    s.r[(a, b)]
                );
            }
            let vp = powerflow::solve(&f, &vec![0.0; n], &plus, &opts).unwrap();
            let vm = powerflow::solve(&f, &vec![0.0; n], &minus, &opts).unwrap();
            for a in 0..n {
                let fd = (vp.v[a + 1] - vm.v[a + 1]) / (2.0 * eps);
                assert!(
                    (fd - s.x[(a, b)]).abs() < 1e-7,
                    "x column {b} row {a}: fd {fd} vs {}",
                    s.x[(a, b)]
                );
            }
        }
    }

    #[test]
    fn matrices_are_positive_definite() {
        for f in [
            fixtures::ieee13(),
            fixtures::chain(5, 0.01, 0.03),
            fixtures::star(4, 0.02, 0.01),
        ] {
            let s = sensitivities(&f);
            for (name, m) in [("r", &s.r), ("x", &s.x)] {
                let sym = nalgebra::SymmetricEigen::new(m.clone());
                let min = sym.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
                assert!(min > 0.0, "{name} has eigenvalue {min}");
            }
        }
    }

    #[test]
    fn x_columns_selects_controllable_sensitivities() {
        let f = fixtures::ieee13();
        let s = sensitivities(&f);
        let c = f.controllable_buses();
        let sub = s.x_columns(&c);
        assert_eq!(sub.nrows(), f.injection_count());
        assert_eq!(sub.ncols(), c.len());
        for (col, &bus) in c.iter().enumerate() {
            for row in 0..f.injection_count() {
                assert_eq!(sub[(row, col)], s.x[(row, bus - 1)]);
            }
        }
    }

    #[test]
    fn linear_model_never_under_predicts() {
        // The dropped loss term only lowers true voltages, so the affine
        // prediction is an upper bound on the nonlinear solution.
        let f = fixtures::ieee13();
        let s = sensitivities(&f);
        let n = f.injection_count();
        let p: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { -0.05 } else { 0.03 }).collect();
        let q: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { -0.02 } else { 0.01 }).collect();
        let lin = predict(&f, &s, &p, &q);
        let nonlin = powerflow::solve(&f, &p, &q, &SweepOptions::default()).unwrap();
        for j in 1..f.bus_count() {
            assert!(
                lin[j] >= nonlin.v[j] - 1e-12,
                "bus {j}: lin {} < nonlinear {}",
                lin[j],
                nonlin.v[j]
            );
        }
    }

    proptest! {
        #[test]
        fn symmetry_and_nonnegativity(n in 2usize..8, r in 0.005f64..0.05, x in 0.005f64..0.05) {
            let f = fixtures::chain(n, r, x);
            let s = sensitivities(&f);
            for a in 0..n {
                for b in 0..n {
                    prop_assert!((s.r[(a, b)] - s.r[(b, a)]).abs() < 1e-15);
                    prop_assert!((s.x[(a, b)] - s.x[(b, a)]).abs() < 1e-15);
                    prop_assert!(s.r[(a, b)] >= 0.0);
                    prop_assert!(s.x[(a, b)] >= 0.0);
                }
            }
        }

        #[test]
        fn positive_reactive_injection_raises_every_bus(
            bus in 1usize..13,
            dq in 0.001f64..0.1,
        ) {
            let f = fixtures::ieee13();
            let s = sensitivities(&f);
            let n = f.injection_count();
            let mut q = vec![0.0; n];
            q[bus - 1] = dq;
            let v = predict(&f, &s, &vec![0.0; n], &q);
            for j in 1..f.bus_count() {
                prop_assert!(v[j] >= f.v0, "bus {j} fell to {}", v[j]);
            }
            prop_assert!(v[bus] > f.v0);
        }
    }
}
