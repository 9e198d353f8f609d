//! Safe-action projection.
//!
//! Given a proposed reactive dispatch for the controllable buses, finds the
//! closest dispatch (Euclidean distance) whose voltages, predicted by the
//! linearized model, stay inside the feeder's band while respecting each
//! actuator's box limits:
//!
//! ```text
//! minimize   (1/2) * ||q - q_proposed||^2
//! subject to v_lower <= v_base + A q <= v_upper
//!            q_min <= q <= q_max
//! ```
//!
//! `A` holds the reactive sensitivity columns of the controllable buses and
//! `v_base` collects the feeder-head voltage plus the effect of all
//! exogenous injections. The solver runs accelerated projected gradient
//! ascent on the dual of the voltage constraints, keeping the box
//! constraints in the primal through clamping; dual variables are capped at
//! a large penalty so that infeasible instances degrade gracefully into the
//! least-violation solution instead of diverging.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::feeder::Feeder;
use crate::linearization::{self, Sensitivities};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionStatus {
    /// KKT certificates hold: the result is the projection.
    Optimal,
    /// The voltage constraints could not all be met even with saturated
    /// actuators; the result minimizes distance plus a large penalty on the
    /// violation, and `slack_used` reports how far outside the band the
    /// prediction still sits.
    Relaxed,
    /// Iteration budget exhausted without certificates.
    Failed,
}

/// Which side of the voltage band a constraint belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    Lower,
    Upper,
}

/// A voltage constraint that is tight at the returned solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ActiveConstraint {
    pub bus: usize,
    pub side: BoundSide,
}

fn duration_secs<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionResult {
    /// Safe dispatch for the controllable buses, always inside the boxes.
    pub q_safe: Vec<f64>,
    pub status: ProjectionStatus,
    /// Voltage constraints tight at the solution.
    pub active_set: Vec<ActiveConstraint>,
    /// Worst violation of the optimality certificates: max of primal
    /// feasibility violation and scaled complementarity.
    pub kkt_residual: f64,
    /// Max voltage-band violation of the linear prediction at the returned
    /// dispatch; zero when status is optimal.
    pub slack_used: f64,
    pub iterations: usize,
    #[serde(serialize_with = "duration_secs")]
    pub solve_time: Duration,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionOptions {
    /// Certificate tolerance for feasibility and complementarity.
    pub tol: f64,
    pub max_iterations: usize,
    /// Dual cap; acts as the exact-penalty weight on voltage violations
    /// when the instance is infeasible.
    pub penalty: f64,
    /// Operating margin added to the lower voltage bound: the projection
    /// enforces v >= v_lower + lower_margin, keeping the true voltage off
    /// the bound where the linear model sits above the power flow.
    pub lower_margin: f64,
    /// Operating margin subtracted from the upper voltage bound.
    pub upper_margin: f64,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            tol: 1e-7,
            max_iterations: 10_000,
            penalty: 1e4,
            lower_margin: 0.0,
            upper_margin: 0.0,
        }
    }
}

/// Per-bus voltage-band violations of the linear prediction, indexed by bus
/// id (entry 0 covers the feeder head, which is fixed and normally zero).
///
/// `q` is the full non-root reactive injection vector, background plus any
/// control already merged in.
pub fn check_safety(feeder: &Feeder, sens: &Sensitivities, p: &[f64], q: &[f64]) -> Vec<f64> {
    let v = linearization::predict(feeder, sens, p, q);
    v.iter()
        .map(|&vj| (feeder.v_lower - vj).max(vj - feeder.v_upper).max(0.0))
        .collect()
}

/// Precomputed projection operator for one feeder. Owns optional warm-start
/// state, so each control loop should hold its own instance; construction is
/// the expensive part (an eigenvalue solve), projection calls are cheap.
#[derive(Debug, Clone)]
pub struct SafetyLayer {
    controllable: Vec<usize>,
    a: DMatrix<f64>,
    a_t: DMatrix<f64>,
    q_min: DVector<f64>,
    q_max: DVector<f64>,
    v_lower: f64,
    v_upper: f64,
    v0: f64,
    sens: Sensitivities,
    /// Inverse Lipschitz constant of the dual gradient.
    step: f64,
    warm_dual: Option<DVector<f64>>,
}

impl SafetyLayer {
    pub fn new(feeder: &Feeder, sens: &Sensitivities) -> Self {
        let controllable = feeder.controllable_buses();
        let a = sens.x_columns(&controllable);
        let a_t = a.transpose();
        let boxes = feeder.q_boxes();
        let q_min = DVector::from_iterator(boxes.len(), boxes.iter().map(|b| b.0));
        let q_max = DVector::from_iterator(boxes.len(), boxes.iter().map(|b| b.1));
        // The stacked upper/lower constraint matrix is [A; -A], whose Gram
        // matrix has twice the spectrum of A^T A.
        let step = if controllable.is_empty() {
            0.0
        } else {
            let gram = &a_t * &a;
            let eigen = nalgebra::SymmetricEigen::new(gram);
            let lmax = eigen.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
            1.0 / (2.0 * lmax).max(f64::MIN_POSITIVE)
        };
        SafetyLayer {
            controllable,
            a,
            a_t,
            q_min,
            q_max,
            v_lower: feeder.v_lower,
            v_upper: feeder.v_upper,
            v0: feeder.v0,
            sens: sens.clone(),
            step,
            warm_dual: None,
        }
    }

    pub fn controllable_buses(&self) -> &[usize] {
        &self.controllable
    }

    /// Drops warm-start state; the next projection starts from zero duals.
    pub fn reset_warm_start(&mut self) {
        self.warm_dual = None;
    }

    fn clamp_box(&self, q: &mut DVector<f64>) {
        for i in 0..q.len() {
            q[i] = q[i].clamp(self.q_min[i], self.q_max[i]);
        }
    }

    /// Guesses the binding pattern from a mid-solve iterate and solves the
    /// equality-constrained stationarity system for that pattern exactly.
    /// Returns a candidate stacked dual vector; the caller accepts it only
    /// if the usual optimality certificates pass, so a wrong guess costs
    /// one small linear solve and nothing else.
    fn polish_dual(
        &self,
        q_hat: &DVector<f64>,
        q_now: &DVector<f64>,
        dual_now: &DVector<f64>,
        b_u: &DVector<f64>,
        b_l: &DVector<f64>,
        dual_floor: f64,
    ) -> Option<DVector<f64>> {
        let n = self.a.nrows();
        let m = self.a.ncols();
        // Rows whose dominant dual side stands clear of the decaying noise
        // floor form the candidate active set.
        let mut rows: Vec<(usize, f64)> = Vec::new();
        for j in 0..n {
            let upper = dual_now[j];
            let lower = dual_now[n + j];
            if upper.max(lower) > dual_floor {
                rows.push((j, if upper >= lower { 1.0 } else { -1.0 }));
            }
        }
        let k = rows.len();
        if k == 0 || k > m.min(6) {
            return None;
        }
        // Coordinates the current primal pins at a box edge stay pinned;
        // clamping makes the comparison exact.
        let free: Vec<usize> = (0..m)
            .filter(|&i| q_now[i] > self.q_min[i] && q_now[i] < self.q_max[i])
            .collect();

        let mut gram = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for r in 0..k {
            let (jr, side_r) = rows[r];
            let mut target = if side_r > 0.0 { b_u[jr] } else { b_l[jr] };
            for i in 0..m {
                if !free.contains(&i) {
                    target -= self.a[(jr, i)] * q_now[i];
                }
            }
            let mut acc = -target;
            for &i in &free {
                acc += self.a[(jr, i)] * q_hat[i];
            }
            rhs[r] = acc;
            for s in 0..k {
                let js = rows[s].0;
                let mut g = 0.0;
                for &i in &free {
                    g += self.a[(jr, i)] * self.a[(js, i)];
                }
                gram[(r, s)] = g;
            }
        }
        let mu = gram.lu().solve(&rhs)?;
        let mut dual = DVector::zeros(2 * n);
        for r in 0..k {
            let (j, side) = rows[r];
            if mu[r] * side < 0.0 {
                return None;
            }
            if side > 0.0 {
                dual[j] = mu[r];
            } else {
                dual[n + j] = -mu[r];
            }
        }
        Some(dual)
    }

    /// Linear-model squared voltages at non-root buses from exogenous
    /// injections alone (control set to zero).
    fn base_voltages(&self, p: &[f64], q_background: &[f64]) -> DVector<f64> {
        let n = self.sens.r.nrows();
        assert_eq!(p.len(), n, "p has wrong length");
        assert_eq!(q_background.len(), n, "q_background has wrong length");
        let pv = DVector::from_column_slice(p);
        let qv = DVector::from_column_slice(q_background);
        let mut v = &self.sens.r * pv;
        v += &self.sens.x * qv;
        v.add_scalar_mut(self.v0);
        v
    }

    /// Projects `q_proposed` onto the safe set defined by the current
    /// exogenous injections. Warm-starts from the previous call's duals.
    pub fn project(
        &mut self,
        q_proposed: &[f64],
        p_now: &[f64],
        q_background: &[f64],
        opts: &ProjectionOptions,
    ) -> ProjectionResult {
        let start = Instant::now();
        let m = self.controllable.len();
        assert_eq!(q_proposed.len(), m, "q_proposed has wrong length");
        let n = self.sens.r.nrows();
        let v_base = self.base_voltages(p_now, q_background);
        // Slack of the (margin-tightened) band around the exogenous
        // operating point.
        let v_hi = self.v_upper - opts.upper_margin;
        let v_lo = self.v_lower + opts.lower_margin;
        let b_u = DVector::from_iterator(n, v_base.iter().map(|vb| v_hi - vb));
        let b_l = DVector::from_iterator(n, v_base.iter().map(|vb| v_lo - vb));

        if m == 0 {
            let worst = (0..n)
                .map(|j| (-b_u[j]).max(b_l[j]).max(0.0))
                .fold(0.0f64, f64::max);
            let status = if worst <= opts.tol {
                ProjectionStatus::Optimal
            } else {
                ProjectionStatus::Relaxed
            };
            return ProjectionResult {
                q_safe: Vec::new(),
                status,
                active_set: Vec::new(),
                kkt_residual: worst,
                slack_used: worst,
                iterations: 0,
                solve_time: start.elapsed(),
            };
        }

        let q_hat = DVector::from_column_slice(q_proposed);
        // Stacked duals: entries 0..n for the upper band, n..2n for the lower.
        let mut lambda = match &self.warm_dual {
            Some(w) if w.len() == 2 * n => w.clone(),
            _ => DVector::zeros(2 * n),
        };
        let mut extrapolated = lambda.clone();
        let mut momentum = 1.0f64;

        // Scratch vectors shared by every phase of the solve; the ascent
        // loop reuses them instead of allocating per iteration.
        let mut pressure = DVector::zeros(n);
        let mut q_work: DVector<f64> = DVector::zeros(m);
        let mut av = DVector::zeros(n);
        let mut grad = DVector::zeros(2 * n);
        let mut next = DVector::zeros(2 * n);

        let primal_into =
            |dual: &DVector<f64>, pressure: &mut DVector<f64>, q: &mut DVector<f64>| {
                // Minimizer of the Lagrangian over the box for fixed duals.
                for j in 0..n {
                    pressure[j] = dual[j] - dual[n + j];
                }
                q.copy_from(&q_hat);
                q.gemv(-1.0, &self.a_t, &*pressure, 1.0);
                self.clamp_box(q);
            };
        let certificates =
            |q: &DVector<f64>, dual: &DVector<f64>, av: &mut DVector<f64>| -> (f64, f64) {
                av.gemv(1.0, &self.a, q, 0.0);
                let mut feas = 0.0f64;
                let mut comp = 0.0f64;
                for j in 0..n {
                    let slack_u = b_u[j] - av[j];
                    let slack_l = av[j] - b_l[j];
                    feas = feas.max(-slack_u).max(-slack_l);
                    comp = comp.max((dual[j] * slack_u).abs() / (1.0 + dual[j]));
                    comp = comp.max((dual[n + j] * slack_l).abs() / (1.0 + dual[n + j]));
                }
                (feas.max(0.0), comp)
            };

        let finish = |q: DVector<f64>,
                      dual: &DVector<f64>,
                      status: ProjectionStatus,
                      kkt: f64,
                      slack: f64,
                      iterations: usize,
                      warm: &mut Option<DVector<f64>>|
         -> ProjectionResult {
            let av = &self.a * &q;
            let activity = (10.0 * opts.tol).max(1e-9);
            let mut active_set = Vec::new();
            for j in 0..n {
                if (b_u[j] - av[j]).abs() <= activity || dual[j] > activity {
                    active_set.push(ActiveConstraint {
                        bus: j + 1,
                        side: BoundSide::Upper,
                    });
                }
                if (av[j] - b_l[j]).abs() <= activity || dual[n + j] > activity {
                    active_set.push(ActiveConstraint {
                        bus: j + 1,
                        side: BoundSide::Lower,
                    });
                }
            }
            *warm = Some(dual.clone());
            ProjectionResult {
                q_safe: q.iter().cloned().collect(),
                status,
                active_set,
                kkt_residual: kkt,
                slack_used: slack,
                iterations,
                solve_time: start.elapsed(),
            }
        };

        // A proposal whose box clamp already satisfies every voltage row is
        // its own projection: zero row duals pass every certificate, so the
        // common slack case costs one matrix-vector product and clears any
        // stale warm-start duals instead of decaying them iteratively.
        q_work.copy_from(&q_hat);
        self.clamp_box(&mut q_work);
        av.gemv(1.0, &self.a, &q_work, 0.0);
        let clip_feas = (0..n)
            .map(|j| (av[j] - b_u[j]).max(b_l[j] - av[j]))
            .fold(f64::NEG_INFINITY, f64::max);
        if clip_feas <= opts.tol {
            let zero = DVector::zeros(2 * n);
            let mut warm = self.warm_dual.take();
            let result = finish(
                q_work,
                &zero,
                ProjectionStatus::Optimal,
                clip_feas.max(0.0),
                0.0,
                0,
                &mut warm,
            );
            self.warm_dual = warm;
            return result;
        }

        // The warm start may already certify, at zero cost.
        primal_into(&lambda, &mut pressure, &mut q_work);
        let (feas0, comp0) = certificates(&q_work, &lambda, &mut av);
        if feas0 <= opts.tol && comp0 <= opts.tol {
            let mut warm = self.warm_dual.take();
            let result = finish(
                q_work,
                &lambda,
                ProjectionStatus::Optimal,
                feas0.max(comp0),
                0.0,
                0,
                &mut warm,
            );
            self.warm_dual = warm;
            return result;
        }

        for iteration in 1..=opts.max_iterations {
            primal_into(&extrapolated, &mut pressure, &mut q_work);
            av.gemv(1.0, &self.a, &q_work, 0.0);
            for j in 0..n {
                grad[j] = av[j] - b_u[j];
                grad[n + j] = b_l[j] - av[j];
            }
            for i in 0..2 * n {
                next[i] = (extrapolated[i] + self.step * grad[i]).clamp(0.0, opts.penalty);
            }

            primal_into(&next, &mut pressure, &mut q_work);
            let (feas, comp) = certificates(&q_work, &next, &mut av);
            if feas <= opts.tol && comp <= opts.tol {
                let mut warm = self.warm_dual.take();
                let result = finish(
                    q_work,
                    &next,
                    ProjectionStatus::Optimal,
                    feas.max(comp),
                    0.0,
                    iteration,
                    &mut warm,
                );
                self.warm_dual = warm;
                return result;
            }

            let mut fp_residual = 0.0f64;
            let mut dual_peak = 0.0f64;
            let mut ascent = 0.0f64;
            let mut at_cap = false;
            for i in 0..2 * n {
                let d = next[i] - lambda[i];
                fp_residual = fp_residual.max(d.abs());
                dual_peak = dual_peak.max(next[i]);
                ascent += grad[i] * d;
                if next[i] >= opts.penalty * (1.0 - 1e-9) {
                    at_cap = true;
                }
            }
            let dual_scale = 1.0 + dual_peak;
            if iteration > 1 && fp_residual <= opts.tol * dual_scale && at_cap && feas > opts.tol {
                // Converged fixed point of the capped dual: the instance is
                // infeasible and the current primal is the penalty solution.
                let mut warm = self.warm_dual.take();
                let result = finish(
                    q_work,
                    &next,
                    ProjectionStatus::Relaxed,
                    feas.max(comp),
                    feas,
                    iteration,
                    &mut warm,
                );
                self.warm_dual = warm;
                return result;
            }

            // Ascent narrows the duals geometrically, which is slow when a
            // band row truly binds. Periodically guess the binding pattern,
            // solve its stationarity system directly, and keep the answer
            // whenever the same certificates that gate the iterative exit
            // accept it.
            if iteration % 4 == 0 {
                let dual_floor = (1e-3 * dual_peak).max(10.0 * opts.tol);
                if let Some(cand) =
                    self.polish_dual(&q_hat, &q_work, &next, &b_u, &b_l, dual_floor)
                {
                    primal_into(&cand, &mut pressure, &mut q_work);
                    let (pf, pc) = certificates(&q_work, &cand, &mut av);
                    if pf <= opts.tol && pc <= opts.tol {
                        let mut warm = self.warm_dual.take();
                        let result = finish(
                            q_work,
                            &cand,
                            ProjectionStatus::Optimal,
                            pf.max(pc),
                            0.0,
                            iteration,
                            &mut warm,
                        );
                        self.warm_dual = warm;
                        return result;
                    }
                }
            }

            let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let mut beta = (momentum - 1.0) / next_momentum;
            // Restart the momentum sequence when it points against the
            // ascent direction; keeps the scheme monotone in practice.
            if ascent < 0.0 {
                beta = 0.0;
                momentum = 1.0;
            } else {
                momentum = next_momentum;
            }
            for i in 0..2 * n {
                let d = next[i] - lambda[i];
                extrapolated[i] = (next[i] + beta * d).clamp(0.0, opts.penalty);
            }
            lambda.copy_from(&next);
        }

        primal_into(&lambda, &mut pressure, &mut q_work);
        let (feas, comp) = certificates(&q_work, &lambda, &mut av);
        let mut warm = self.warm_dual.take();
        let result = finish(
            q_work,
            &lambda,
            ProjectionStatus::Failed,
            feas.max(comp),
            feas,
            opts.max_iterations,
            &mut warm,
        );
        self.warm_dual = warm;
        result
    }
}

/// Dense reference solver for validation.
///
/// Enumerates every active-set pattern of the projection problem (each
/// voltage band row inactive, tight above, or tight below; each box
/// coordinate free or pinned at an end), solves the resulting
/// equality-constrained system, and keeps candidates whose multipliers and
/// residual feasibility check out. Exponential in problem size; test use
/// only.
pub mod reference {
    use nalgebra::{DMatrix, DVector};

    #[derive(Debug, Clone)]
    pub struct DenseInstance {
        /// Voltage sensitivity rows (one per monitored bus).
        pub a: DMatrix<f64>,
        /// Upper band slack per row: a_j^T q <= b_u[j].
        pub b_u: DVector<f64>,
        /// Lower band slack per row: a_j^T q >= b_l[j].
        pub b_l: DVector<f64>,
        pub q_min: DVector<f64>,
        pub q_max: DVector<f64>,
        pub q_hat: DVector<f64>,
    }

    const FEAS_EPS: f64 = 1e-9;

    #[derive(Clone, Copy, PartialEq, Eq)]
    enum RowState {
        Inactive,
        Upper,
        Lower,
    }

    #[derive(Clone, Copy, PartialEq, Eq)]
    enum BoxState {
        Free,
        AtMin,
        AtMax,
    }

    fn feasible(inst: &DenseInstance, q: &DVector<f64>) -> bool {
        for i in 0..q.len() {
            if q[i] < inst.q_min[i] - FEAS_EPS || q[i] > inst.q_max[i] + FEAS_EPS {
                return false;
            }
        }
        let av = &inst.a * q;
        for j in 0..av.len() {
            if av[j] > inst.b_u[j] + FEAS_EPS || av[j] < inst.b_l[j] - FEAS_EPS {
                return false;
            }
        }
        true
    }

    /// Solves the projection by exhaustive KKT enumeration. Returns `None`
    /// when no pattern yields a feasible candidate (infeasible instance).
    pub fn solve_by_enumeration(inst: &DenseInstance) -> Option<DVector<f64>> {
        let n = inst.a.nrows();
        let m = inst.a.ncols();
        let row_patterns = 3usize.pow(n as u32);
        let box_patterns = 3usize.pow(m as u32);
        let mut best: Option<(f64, DVector<f64>)> = None;

        for row_code in 0..row_patterns {
            let mut rows = vec![RowState::Inactive; n];
            let mut c = row_code;
            for state in rows.iter_mut() {
                *state = match c % 3 {
                    0 => RowState::Inactive,
                    1 => RowState::Upper,
                    _ => RowState::Lower,
                };
                c /= 3;
            }
            let active: Vec<(usize, f64, f64)> = rows
                .iter()
                .enumerate()
                .filter_map(|(j, s)| match s {
                    RowState::Inactive => None,
                    RowState::Upper => Some((j, 1.0, inst.b_u[j])),
                    RowState::Lower => Some((j, -1.0, inst.b_l[j])),
                })
                .collect();

            for box_code in 0..box_patterns {
                let mut boxes = vec![BoxState::Free; m];
                let mut c = box_code;
                for state in boxes.iter_mut() {
                    *state = match c % 3 {
                        0 => BoxState::Free,
                        1 => BoxState::AtMin,
                        _ => BoxState::AtMax,
                    };
                    c /= 3;
                }
                if let Some(q) = try_pattern(inst, &active, &boxes) {
                    if feasible(inst, &q) {
                        let diff = &q - &inst.q_hat;
                        let obj = 0.5 * diff.dot(&diff);
                        if best.as_ref().map(|(b, _)| obj < *b).unwrap_or(true) {
                            best = Some((obj, q));
                        }
                    }
                }
            }
        }
        best.map(|(_, q)| q)
    }

    fn try_pattern(
        inst: &DenseInstance,
        active: &[(usize, f64, f64)],
        boxes: &[BoxState],
    ) -> Option<DVector<f64>> {
        let m = boxes.len();
        let free: Vec<usize> = (0..m).filter(|&i| boxes[i] == BoxState::Free).collect();
        let k = active.len();
        let dim = free.len() + k;

        let mut fixed = DVector::zeros(m);
        for i in 0..m {
            fixed[i] = match boxes[i] {
                BoxState::AtMin => inst.q_min[i],
                BoxState::AtMax => inst.q_max[i],
                BoxState::Free => 0.0,
            };
        }

        // Unknowns: free coordinates of q, then one multiplier per active row.
        let mut mat = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        for (fi, &i) in free.iter().enumerate() {
            mat[(fi, fi)] = 1.0;
            for (ai, &(j, sign, _)) in active.iter().enumerate() {
                mat[(fi, free.len() + ai)] = sign * inst.a[(j, i)];
            }
            rhs[fi] = inst.q_hat[i];
        }
        for (ai, &(j, _, b)) in active.iter().enumerate() {
            let mut acc = b;
            for i in 0..m {
                if boxes[i] != BoxState::Free {
                    acc -= inst.a[(j, i)] * fixed[i];
                }
            }
            for (fi, &i) in free.iter().enumerate() {
                mat[(free.len() + ai, fi)] = inst.a[(j, i)];
            }
            rhs[free.len() + ai] = acc;
        }

        let solution = if dim > 0 {
            mat.lu().solve(&rhs)?
        } else {
            DVector::zeros(0)
        };
        let mut q = fixed;
        for (fi, &i) in free.iter().enumerate() {
            q[i] = solution[fi];
        }
        let multipliers = solution.rows(free.len(), k).into_owned();
        if multipliers.iter().any(|&l| l < -FEAS_EPS) {
            return None;
        }
        // Box multipliers from stationarity on the pinned coordinates.
        for i in 0..m {
            if boxes[i] == BoxState::Free {
                continue;
            }
            let mut pressure = 0.0;
            for (ai, &(j, sign, _)) in active.iter().enumerate() {
                pressure += sign * multipliers[ai] * inst.a[(j, i)];
            }
            let stationarity = q[i] - inst.q_hat[i] + pressure;
            let mu_ok = match boxes[i] {
                BoxState::AtMax => -stationarity >= -FEAS_EPS,
                BoxState::AtMin => stationarity >= -FEAS_EPS,
                BoxState::Free => true,
            };
            if !mu_ok {
                return None;
            }
        }
        Some(q)
    }
}

/// Builds a [`reference::DenseInstance`] equivalent to what
/// [`SafetyLayer::project`] solves for the given inputs, so the iterative
/// and enumerative solvers can be compared on identical data.
pub fn dense_instance(
    feeder: &Feeder,
    sens: &Sensitivities,
    q_proposed: &[f64],
    p_now: &[f64],
    q_background: &[f64],
) -> reference::DenseInstance {
    let controllable = feeder.controllable_buses();
    let a = sens.x_columns(&controllable);
    let boxes = feeder.q_boxes();
    let n = feeder.injection_count();
    let layer = SafetyLayer::new(feeder, sens);
    let v_base = layer.base_voltages(p_now, q_background);
    reference::DenseInstance {
        a,
        b_u: DVector::from_iterator(n, (0..n).map(|j| feeder.v_upper - v_base[j])),
        b_l: DVector::from_iterator(n, (0..n).map(|j| feeder.v_lower - v_base[j])),
        q_min: DVector::from_iterator(boxes.len(), boxes.iter().map(|b| b.0)),
        q_max: DVector::from_iterator(boxes.len(), boxes.iter().map(|b| b.1)),
        q_hat: DVector::from_column_slice(q_proposed),
    }
}
