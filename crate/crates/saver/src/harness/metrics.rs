//! Aggregate statistics over evaluation records.
//!
//! Violations are counted on the nonlinear squared voltage magnitudes
//! against the feeder band, over every bus including the head. Reactive
//! effort converts per-unit injections to kVAR with the feeder power base.
//! Timings aggregate controller inference plus projection; the power-flow
//! solve is excluded by construction of the records.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ControllerKind, EpisodeRecord};
use crate::feeder::Feeder;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot summarize zero records")]
    Empty,
    #[error("records mix controllers {0} and {1}; group them first")]
    Mixed(ControllerKind, ControllerKind),
    #[error("record for day {0} has no steps")]
    EmptyEpisode(usize),
}

/// Aggregates for one controller across its evaluated days.
#[derive(Debug, Clone, Serialize)]
pub struct ResultSummary {
    pub controller: ControllerKind,
    pub episodes: usize,
    pub total_steps: usize,
    /// Percentage of bus-steps whose squared voltage left the feeder band.
    pub violation_frequency_percent: f64,
    /// Mean absolute executed injection across actuators and steps, kVAR.
    pub mean_abs_q_kvar: f64,
    /// Mean wall time of inference plus projection per step, seconds.
    pub mean_step_seconds: f64,
    pub mean_reward: f64,
    /// Per-bus mean of the voltage-magnitude deviation from nominal.
    pub deviation_mean: Vec<f64>,
    /// Per-bus population variance of the same deviation.
    pub deviation_variance: Vec<f64>,
    pub relaxed_steps: usize,
    pub failed_steps: usize,
}

/// Splits records by controller, preserving day order within each group.
pub fn group_by_controller(records: &[EpisodeRecord]) -> BTreeMap<&'static str, Vec<&EpisodeRecord>> {
    let mut groups: BTreeMap<&'static str, Vec<&EpisodeRecord>> = BTreeMap::new();
    for record in records {
        groups.entry(record.controller.name()).or_default().push(record);
    }
    groups
}

/// Folds homogeneous records into one summary.
pub fn summarize(feeder: &Feeder, records: &[&EpisodeRecord]) -> Result<ResultSummary, MetricsError> {
    let first = records.first().ok_or(MetricsError::Empty)?;
    let controller = first.controller;
    let n = feeder.bus_count();
    let nominal = feeder.v0.sqrt();

    let mut total_steps = 0usize;
    let mut violating_bus_steps = 0usize;
    let mut q_abs_sum = 0.0;
    let mut q_terms = 0usize;
    let mut time_sum = 0.0;
    let mut reward_sum = 0.0;
    let mut dev_sum = vec![0.0f64; n];
    let mut dev_sq_sum = vec![0.0f64; n];
    let mut relaxed_steps = 0usize;
    let mut failed_steps = 0usize;

    for record in records {
        if record.controller != controller {
            return Err(MetricsError::Mixed(controller, record.controller));
        }
        if record.steps.is_empty() {
            return Err(MetricsError::EmptyEpisode(record.day_index));
        }
        for step in &record.steps {
            total_steps += 1;
            for (j, &v) in step.voltages.iter().enumerate() {
                if v < feeder.v_lower || v > feeder.v_upper {
                    violating_bus_steps += 1;
                }
                let dev = v.sqrt() - nominal;
                dev_sum[j] += dev;
                dev_sq_sum[j] += dev * dev;
            }
            for &q in &step.executed_action {
                q_abs_sum += q.abs();
                q_terms += 1;
            }
            time_sum += step.inference_seconds + step.projection_seconds;
            reward_sum += step.reward;
            match step.projection_status {
                Some(crate::safety::ProjectionStatus::Relaxed) => relaxed_steps += 1,
                Some(crate::safety::ProjectionStatus::Failed) => failed_steps += 1,
                _ => {}
            }
        }
    }

    let bus_steps = (total_steps * n) as f64;
    let deviation_mean: Vec<f64> = dev_sum.iter().map(|s| s / total_steps as f64).collect();
    let deviation_variance: Vec<f64> = dev_sq_sum
        .iter()
        .zip(&deviation_mean)
        .map(|(sq, mean)| (sq / total_steps as f64 - mean * mean).max(0.0))
        .collect();

    Ok(ResultSummary {
        controller,
        episodes: records.len(),
        total_steps,
        violation_frequency_percent: violating_bus_steps as f64 / bus_steps * 100.0,
        mean_abs_q_kvar: if q_terms > 0 {
            q_abs_sum / q_terms as f64 * feeder.base_mva * 1000.0
        } else {
            0.0
        },
        mean_step_seconds: time_sum / total_steps as f64,
        mean_reward: reward_sum / total_steps as f64,
        deviation_mean,
        deviation_variance,
        relaxed_steps,
        failed_steps,
    })
}

/// Summarizes every controller present, in name order.
pub fn summarize_all(
    feeder: &Feeder,
    records: &[EpisodeRecord],
) -> Result<Vec<ResultSummary>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    group_by_controller(records)
        .values()
        .map(|group| summarize(feeder, group))
        .collect()
}

/// Hash of everything semantically meaningful in the records: day indices,
/// controller, states, actions, statuses, voltages, and rewards. Wall-time
/// fields are excluded so reruns of the same seed digest identically.
pub fn semantic_digest(records: &[EpisodeRecord]) -> String {
    let mut hasher = Sha256::new();
    let write_f64s = |hasher: &mut Sha256, xs: &[f64]| {
        for x in xs {
            hasher.update(x.to_bits().to_le_bytes());
        }
    };
    for record in records {
        hasher.update(record.controller.name().as_bytes());
        hasher.update((record.day_index as u64).to_le_bytes());
        hasher.update((record.steps.len() as u64).to_le_bytes());
        for step in &record.steps {
            hasher.update((step.step as u64).to_le_bytes());
            write_f64s(&mut hasher, &step.state);
            write_f64s(&mut hasher, &step.raw_action);
            write_f64s(&mut hasher, &step.executed_action);
            let status = match step.projection_status {
                None => 0u8,
                Some(crate::safety::ProjectionStatus::Optimal) => 1,
                Some(crate::safety::ProjectionStatus::Relaxed) => 2,
                Some(crate::safety::ProjectionStatus::Failed) => 3,
            };
            hasher.update([status]);
            hasher.update((step.active_set_size as u64).to_le_bytes());
            write_f64s(&mut hasher, &step.voltages);
            hasher.update(step.reward.to_bits().to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::fixtures;
    use crate::harness::StepRecord;
    use crate::safety::ProjectionStatus;

    fn step(voltages: Vec<f64>, q: Vec<f64>, reward: f64, secs: (f64, f64)) -> StepRecord {
        StepRecord {
            step: 0,
            state: vec![],
            raw_action: q.clone(),
            executed_action: q,
            projection_status: None,
            active_set_size: 0,
            voltages,
            reward,
            inference_seconds: secs.0,
            projection_seconds: secs.1,
        }
    }

    fn record(controller: ControllerKind, day: usize, steps: Vec<StepRecord>) -> EpisodeRecord {
        EpisodeRecord {
            controller,
            day_index: day,
            steps,
        }
    }

    #[test]
    fn one_violating_bus_out_of_thirteen_is_7_69_percent() {
        let f = fixtures::ieee13();
        let mut voltages = vec![1.0; 13];
        voltages[6] = 1.11;
        let r = record(
            ControllerKind::Noop,
            0,
            vec![step(voltages, vec![0.0; 9], 0.0, (0.0, 0.0))],
        );
        let s = summarize(&f, &[&r]).unwrap();
        assert!((s.violation_frequency_percent - 100.0 / 13.0).abs() < 1e-9);
        assert!((s.violation_frequency_percent - 7.6923).abs() < 1e-3);
    }

    #[test]
    fn zero_actions_mean_zero_kvar() {
        let f = fixtures::ieee13();
        let r = record(
            ControllerKind::Noop,
            0,
            vec![step(vec![1.0; 13], vec![0.0; 9], 0.0, (0.0, 0.0))],
        );
        let s = summarize(&f, &[&r]).unwrap();
        assert_eq!(s.mean_abs_q_kvar, 0.0);
    }

    #[test]
    fn hand_computed_three_step_fixture() {
        // Two-bus feeder, base 1 MVA. Three steps:
        //   voltages (squared): [1.0, 1.21], [1.0, 1.0], [1.0, 0.81]
        //   executed actions:   [0.2],       [-0.4],     [0.0]
        //   rewards:            -1.0,        -2.0,       -3.0
        //   times (inf, proj):  (1e-3,1e-3), (2e-3,0),   (3e-3,1e-3)
        // Violations: 1.21 > 1.1025 and 0.81 < 0.9025 -> 2 of 6 bus-steps.
        // Mean |q| = (0.2 + 0.4 + 0.0)/3 = 0.2 pu -> 200 kVAR at 1 MVA.
        // Mean step time = (2e-3 + 2e-3 + 4e-3)/3.
        // Bus-1 magnitude deviations: 0.1, 0.0, -0.1 -> mean 0, var 2/300.
        let f = fixtures::two_bus(0.02, 0.02);
        let steps = vec![
            step(vec![1.0, 1.21], vec![0.2], -1.0, (1e-3, 1e-3)),
            step(vec![1.0, 1.0], vec![-0.4], -2.0, (2e-3, 0.0)),
            step(vec![1.0, 0.81], vec![0.0], -3.0, (3e-3, 1e-3)),
        ];
        let r = record(ControllerKind::Linear, 0, steps);
        let s = summarize(&f, &[&r]).unwrap();
        assert!((s.violation_frequency_percent - 100.0 * 2.0 / 6.0).abs() < 1e-12);
        assert!((s.mean_abs_q_kvar - 200.0).abs() < 1e-9);
        assert!((s.mean_step_seconds - 8e-3 / 3.0).abs() < 1e-15);
        assert!((s.mean_reward + 2.0).abs() < 1e-12);
        assert!(s.deviation_mean[1].abs() < 1e-12);
        assert!((s.deviation_variance[1] - 0.02 / 3.0).abs() < 1e-12);
        assert_eq!(s.total_steps, 3);
    }

    #[test]
    fn empty_input_is_an_error() {
        let f = fixtures::ieee13();
        assert_eq!(summarize(&f, &[]).unwrap_err(), MetricsError::Empty);
        assert_eq!(
            summarize_all(&f, &[]).unwrap_err(),
            MetricsError::Empty
        );
    }

    #[test]
    fn mixed_controllers_are_rejected_by_summarize_but_split_by_group() {
        let f = fixtures::two_bus(0.02, 0.02);
        let a = record(
            ControllerKind::Noop,
            0,
            vec![step(vec![1.0, 1.0], vec![0.0], 0.0, (0.0, 0.0))],
        );
        let b = record(
            ControllerKind::Linear,
            0,
            vec![step(vec![1.0, 1.0], vec![0.1], -0.5, (0.0, 0.0))],
        );
        let both = vec![a, b];
        let refs: Vec<&EpisodeRecord> = both.iter().collect();
        assert!(matches!(
            summarize(&f, &refs).unwrap_err(),
            MetricsError::Mixed(_, _)
        ));
        let summaries = summarize_all(&f, &both).unwrap();
        assert_eq!(summaries.len(), 2);
        assert_eq!(summaries[0].controller, ControllerKind::Linear);
        assert_eq!(summaries[1].controller, ControllerKind::Noop);
    }

    #[test]
    fn summaries_are_a_pure_fold() {
        let f = fixtures::two_bus(0.02, 0.02);
        let r = record(
            ControllerKind::Rl,
            2,
            vec![
                step(vec![1.0, 1.04], vec![0.07], -0.3, (1e-4, 0.0)),
                step(vec![1.0, 0.97], vec![-0.02], -0.1, (2e-4, 0.0)),
            ],
        );
        let first = summarize(&f, &[&r]).unwrap();
        let second = summarize(&f, &[&r]).unwrap();
        assert_eq!(
            first.violation_frequency_percent.to_bits(),
            second.violation_frequency_percent.to_bits()
        );
        assert_eq!(first.mean_abs_q_kvar.to_bits(), second.mean_abs_q_kvar.to_bits());
        assert_eq!(
            first.deviation_variance[1].to_bits(),
            second.deviation_variance[1].to_bits()
        );
    }

    #[test]
    fn projection_relaxations_are_counted() {
        let f = fixtures::two_bus(0.02, 0.02);
        let mut s1 = step(vec![1.0, 1.0], vec![0.0], 0.0, (0.0, 0.0));
        s1.projection_status = Some(ProjectionStatus::Relaxed);
        let mut s2 = step(vec![1.0, 1.0], vec![0.0], 0.0, (0.0, 0.0));
        s2.projection_status = Some(ProjectionStatus::Optimal);
        let r = record(ControllerKind::SafeRl, 0, vec![s1, s2]);
        let s = summarize(&f, &[&r]).unwrap();
        assert_eq!(s.relaxed_steps, 1);
        assert_eq!(s.failed_steps, 0);
    }

    #[test]
    fn digest_ignores_wall_time_but_sees_physics() {
        let base = record(
            ControllerKind::Rl,
            1,
            vec![step(vec![1.0, 1.01], vec![0.03], -0.2, (1e-3, 2e-3))],
        );
        let mut slower = base.clone();
        slower.steps[0].inference_seconds = 99.0;
        slower.steps[0].projection_seconds = 77.0;
        assert_eq!(semantic_digest(&[base.clone()]), semantic_digest(&[slower]));
        let mut different = base.clone();
        different.steps[0].reward = -0.25;
        assert_ne!(semantic_digest(&[base]), semantic_digest(&[different]));
    }
}
