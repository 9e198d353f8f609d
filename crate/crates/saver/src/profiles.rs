//! Load and generation profiles.
//!
//! A [`LoadDataset`] holds whole days of per-bus injection time series in
//! per-unit, split into training and test days. Datasets come from two
//! sources: a seeded synthetic generator producing daily demand curves with
//! a morning dip, an evening peak, and midday solar with cloud transients,
//! or ingestion of a real system-level CSV that gets allocated to buses by
//! fixed weights.

use std::io::Read;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::feeder::Feeder;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One day of per-bus injections: outer index is the time step, inner index
/// the non-root bus (entry 0 is bus 1).
#[derive(Debug, Clone)]
pub struct DayProfile {
    /// Active injections, generation positive.
    pub p: Vec<Vec<f64>>,
    /// Background (uncontrolled) reactive injections.
    pub q_background: Vec<Vec<f64>>,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct LoadDataset {
    pub days: Vec<DayProfile>,
    pub step_seconds: u64,
}

impl LoadDataset {
    pub fn steps_per_day(&self) -> usize {
        self.days.first().map(|d| d.p.len()).unwrap_or(0)
    }

    pub fn train_day_indices(&self) -> Vec<usize> {
        self.days
            .iter()
            .enumerate()
            .filter(|(_, d)| d.split == Split::Train)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn test_day_indices(&self) -> Vec<usize> {
        self.days
            .iter()
            .enumerate()
            .filter(|(_, d)| d.split == Split::Test)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Parameters of the synthetic daily-curve generator. Demand follows a
/// smooth shape with a configurable early-morning dip and evening peak;
/// solar output follows a midday bell with random cloud dips.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Minimum system demand over the day, MW.
    pub demand_min_mw: f64,
    /// Maximum (evening peak) system demand, MW.
    pub demand_max_mw: f64,
    /// Hour of the evening demand peak.
    pub peak_hour: f64,
    /// Hour of the early-morning demand dip.
    pub dip_hour: f64,
    /// Peak total solar generation at clear sky, MW.
    pub pv_peak_mw: f64,
    /// Hour of maximum solar output.
    pub pv_noon_hour: f64,
    /// Spread of the solar bell, hours.
    pub pv_width_hours: f64,
    /// Per-step probability that a cloud event starts.
    pub cloud_probability: f64,
    /// Fraction of solar output lost during a cloud event.
    pub cloud_depth: f64,
    /// Cloud event length in steps.
    pub cloud_duration_steps: usize,
    /// Multiplicative per-step demand noise (standard deviation).
    pub demand_noise: f64,
    /// Per-day uniform scale jitter applied to both curves.
    pub day_jitter: f64,
    /// Reactive draw of the loads as a fraction of active draw.
    pub power_factor_tan: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            demand_min_mw: 1.0,
            demand_max_mw: 2.6,
            peak_hour: 19.0,
            dip_hour: 4.0,
            pv_peak_mw: 0.0,
            pv_noon_hour: 12.5,
            pv_width_hours: 3.0,
            cloud_probability: 0.0,
            cloud_depth: 0.6,
            cloud_duration_steps: 3,
            demand_noise: 0.02,
            day_jitter: 0.1,
            power_factor_tan: 0.33,
        }
    }
}

fn bell(x: f64, center: f64, width: f64) -> f64 {
    let d = (x - center) / width;
    (-0.5 * d * d).exp()
}

/// System demand shape over [0, 24), normalized to [0, 1].
fn demand_shape(hour: f64, cfg: &SyntheticConfig) -> f64 {
    // Evening peak plus a mild midday shoulder, minus the morning dip;
    // wrapped by 24 h so late-evening hours decay into the dip smoothly.
    let wrapped = |center: f64| -> f64 {
        bell(hour, center, 3.0)
            .max(bell(hour + 24.0, center, 3.0))
            .max(bell(hour - 24.0, center, 3.0))
    };
    let peak = wrapped(cfg.peak_hour);
    let shoulder = 0.45 * bell(hour, 12.0, 4.0);
    let dip = 0.5 * bell(hour, cfg.dip_hour, 2.5);
    (0.35 + peak + shoulder - dip).clamp(0.0, 1.6) / 1.6
}

/// Evenly weighted allocation over the feeder's controllable buses.
pub fn uniform_allocation(feeder: &Feeder) -> Vec<(usize, f64)> {
    let buses = feeder.controllable_buses();
    let w = 1.0 / buses.len() as f64;
    buses.into_iter().map(|b| (b, w)).collect()
}

/// Generates `train_days + test_days` synthetic days for the feeder, with
/// demand and solar spread across the controllable buses by `allocation`.
pub fn synthetic_dataset(
    feeder: &Feeder,
    cfg: &SyntheticConfig,
    allocation: &[(usize, f64)],
    train_days: usize,
    test_days: usize,
    step_seconds: u64,
    seed: u64,
) -> LoadDataset {
    use rand::SeedableRng;
    assert!(step_seconds > 0 && 86_400 % step_seconds == 0, "step must divide a day");
    let steps = (86_400 / step_seconds) as usize;
    let n = feeder.injection_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = train_days + test_days;
    let mut days = Vec::with_capacity(total);
    for day in 0..total {
        let scale = 1.0 + cfg.day_jitter * rng.gen_range(-1.0..1.0);
        let mut p = Vec::with_capacity(steps);
        let mut q = Vec::with_capacity(steps);
        let mut cloud_left = 0usize;
        for t in 0..steps {
            let hour = t as f64 * step_seconds as f64 / 3600.0;
            let shape = demand_shape(hour, cfg);
            let noise = 1.0 + cfg.demand_noise * rng.gen_range(-1.0..1.0);
            let demand_mw = (cfg.demand_min_mw
                + (cfg.demand_max_mw - cfg.demand_min_mw) * shape)
                * scale
                * noise;
            let mut pv_mw = cfg.pv_peak_mw * scale * bell(hour, cfg.pv_noon_hour, cfg.pv_width_hours);
            if pv_mw < 1e-6 {
                pv_mw = 0.0;
            }
            if cloud_left > 0 {
                pv_mw *= 1.0 - cfg.cloud_depth;
                cloud_left -= 1;
            } else if pv_mw > 0.0 && rng.gen_bool(cfg.cloud_probability.clamp(0.0, 1.0)) {
                cloud_left = cfg.cloud_duration_steps;
            }
            let mut p_row = vec![0.0; n];
            let mut q_row = vec![0.0; n];
            for &(bus, w) in allocation {
                let load_pu = demand_mw * w / feeder.base_mva;
                let pv_pu = pv_mw * w / feeder.base_mva;
                p_row[bus - 1] = -load_pu + pv_pu;
                q_row[bus - 1] = -load_pu * cfg.power_factor_tan;
            }
            p.push(p_row);
            q.push(q_row);
        }
        days.push(DayProfile {
            p,
            q_background: q,
            split: if day < train_days { Split::Train } else { Split::Test },
        });
    }
    LoadDataset {
        days,
        step_seconds,
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("profile CSV is empty")]
    Empty,
    #[error("line {line}: {message}")]
    MalformedRow { line: usize, message: String },
    #[error("line {line}: timestamps must be strictly increasing")]
    NonMonotone { line: usize },
    #[error("missing interval after {after}: expected a row at {expected}")]
    Gap { after: String, expected: String },
    #[error("allocation weights must sum to 1, got {0}")]
    BadWeights(f64),
    #[error("allocation references unknown or head bus {0}")]
    BadAllocationBus(usize),
    #[error("target step {target}s is not a multiple of the data step {raw}s")]
    StepMismatch { target: u64, raw: u64 },
    #[error("dataset holds {steps} usable steps, fewer than one whole day")]
    TooShort { steps: usize },
    #[error("failed to read profile CSV: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Step the dataset is resampled to; must be a multiple of the raw step.
    pub step_seconds: u64,
    /// Reactive draw of loads as a fraction of active draw.
    pub power_factor_tan: f64,
    /// Number of leading whole days labeled for training; the rest test.
    pub train_days: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            step_seconds: 300,
            power_factor_tan: 0.33,
            train_days: 0,
        }
    }
}

/// Seconds since the epoch for a civil date-time, no time zones.
fn civil_to_epoch(y: i64, mo: i64, d: i64, h: i64, mi: i64, s: i64) -> i64 {
    // Days-from-civil conversion on the proleptic Gregorian calendar.
    let y_adj = if mo <= 2 { y - 1 } else { y };
    let era = if y_adj >= 0 { y_adj } else { y_adj - 399 } / 400;
    let yoe = y_adj - era * 400;
    let doy = (153 * (if mo > 2 { mo - 3 } else { mo + 9 }) + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    let days = era * 146_097 + doe - 719_468;
    days * 86_400 + h * 3600 + mi * 60 + s
}

/// Parses either epoch seconds or `YYYY-MM-DD[T ]HH:MM[:SS]`.
fn parse_timestamp(text: &str) -> Option<i64> {
    let text = text.trim();
    if !text.is_empty() && text.chars().all(|c| c.is_ascii_digit()) {
        return text.parse().ok();
    }
    let (date, time) = text.split_once(['T', ' '])?;
    let mut dp = date.split('-');
    let y: i64 = dp.next()?.parse().ok()?;
    let mo: i64 = dp.next()?.parse().ok()?;
    let d: i64 = dp.next()?.parse().ok()?;
    if dp.next().is_some() || !(1..=12).contains(&mo) || !(1..=31).contains(&d) {
        return None;
    }
    let mut tp = time.split(':');
    let h: i64 = tp.next()?.parse().ok()?;
    let mi: i64 = tp.next()?.parse().ok()?;
    let s: i64 = match tp.next() {
        Some(sec) => sec.parse().ok()?,
        None => 0,
    };
    if tp.next().is_some() || !(0..24).contains(&h) || !(0..60).contains(&mi) || !(0..60).contains(&s)
    {
        return None;
    }
    Some(civil_to_epoch(y, mo, d, h, mi, s))
}

fn format_epoch(t: i64) -> String {
    // Inverse of civil_to_epoch, for error messages.
    let days = t.div_euclid(86_400);
    let secs = t.rem_euclid(86_400);
    let z = days + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let mo = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + i64::from(mo <= 2);
    format!(
        "{y:04}-{mo:02}-{d:02}T{:02}:{:02}:{:02}",
        secs / 3600,
        (secs % 3600) / 60,
        secs % 60
    )
}

fn validate_allocation(feeder: &Feeder, allocation: &[(usize, f64)]) -> Result<(), IngestError> {
    let total: f64 = allocation.iter().map(|(_, w)| w).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(IngestError::BadWeights(total));
    }
    for &(bus, _) in allocation {
        if bus == 0 || bus >= feeder.bus_count() {
            return Err(IngestError::BadAllocationBus(bus));
        }
    }
    Ok(())
}

/// Reads a system-level CSV with header `timestamp,demand_mw[,pv_mw]`,
/// allocates it to buses, resamples to the configured step, and splits the
/// result into whole days.
pub fn ingest_profiles(
    reader: impl Read,
    feeder: &Feeder,
    load_allocation: &[(usize, f64)],
    pv_allocation: &[(usize, f64)],
    opts: &IngestOptions,
) -> Result<LoadDataset, IngestError> {
    validate_allocation(feeder, load_allocation)?;
    if !pv_allocation.is_empty() {
        validate_allocation(feeder, pv_allocation)?;
    }

    let mut csv_reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let ts_col = find("timestamp").ok_or(IngestError::MalformedRow {
        line: 1,
        message: "header must contain a `timestamp` column".into(),
    })?;
    let demand_col = find("demand_mw").ok_or(IngestError::MalformedRow {
        line: 1,
        message: "header must contain a `demand_mw` column".into(),
    })?;
    let pv_col = find("pv_mw");

    let mut rows: Vec<(i64, f64, f64)> = Vec::new();
    for (idx, record) in csv_reader.records().enumerate() {
        let line = idx + 2;
        let record = record?;
        let ts_text = record.get(ts_col).ok_or(IngestError::MalformedRow {
            line,
            message: "missing timestamp field".into(),
        })?;
        let ts = parse_timestamp(ts_text).ok_or(IngestError::MalformedRow {
            line,
            message: format!("unparseable timestamp `{ts_text}`"),
        })?;
        let demand: f64 = record
            .get(demand_col)
            .and_then(|v| v.parse().ok())
            .ok_or(IngestError::MalformedRow {
                line,
                message: "unparseable demand value".into(),
            })?;
        let pv: f64 = match pv_col {
            Some(col) => record
                .get(col)
                .and_then(|v| v.parse().ok())
                .ok_or(IngestError::MalformedRow {
                    line,
                    message: "unparseable pv value".into(),
                })?,
            None => 0.0,
        };
        if !demand.is_finite() || !pv.is_finite() {
            return Err(IngestError::MalformedRow {
                line,
                message: "non-finite value".into(),
            });
        }
        rows.push((ts, demand, pv));
    }
    if rows.is_empty() {
        return Err(IngestError::Empty);
    }

    // Uniform raw cadence, no gaps.
    let raw_step = if rows.len() >= 2 {
        let step = rows[1].0 - rows[0].0;
        if step <= 0 {
            return Err(IngestError::NonMonotone { line: 3 });
        }
        for (k, pair) in rows.windows(2).enumerate() {
            let delta = pair[1].0 - pair[0].0;
            if delta <= 0 {
                return Err(IngestError::NonMonotone { line: k + 3 });
            }
            if delta != step {
                return Err(IngestError::Gap {
                    after: format_epoch(pair[0].0),
                    expected: format_epoch(pair[0].0 + step),
                });
            }
        }
        step as u64
    } else {
        opts.step_seconds
    };
    if opts.step_seconds % raw_step != 0 {
        return Err(IngestError::StepMismatch {
            target: opts.step_seconds,
            raw: raw_step,
        });
    }
    let stride = (opts.step_seconds / raw_step) as usize;
    let sampled: Vec<&(i64, f64, f64)> = rows.iter().step_by(stride).collect();

    let steps_per_day = (86_400 / opts.step_seconds) as usize;
    let whole_days = sampled.len() / steps_per_day;
    if whole_days == 0 {
        return Err(IngestError::TooShort {
            steps: sampled.len(),
        });
    }

    let n = feeder.injection_count();
    let mut days = Vec::with_capacity(whole_days);
    for day in 0..whole_days {
        let mut p = Vec::with_capacity(steps_per_day);
        let mut q = Vec::with_capacity(steps_per_day);
        for t in 0..steps_per_day {
            let (_, demand_mw, pv_mw) = *sampled[day * steps_per_day + t];
            let mut p_row = vec![0.0; n];
            let mut q_row = vec![0.0; n];
            for &(bus, w) in load_allocation {
                let load_pu = demand_mw * w / feeder.base_mva;
                p_row[bus - 1] -= load_pu;
                q_row[bus - 1] -= load_pu * opts.power_factor_tan;
            }
            for &(bus, w) in pv_allocation {
                p_row[bus - 1] += pv_mw * w / feeder.base_mva;
            }
            p.push(p_row);
            q.push(q_row);
        }
        days.push(DayProfile {
            p,
            q_background: q,
            split: if day < opts.train_days { Split::Train } else { Split::Test },
        });
    }
    Ok(LoadDataset {
        days,
        step_seconds: opts.step_seconds,
    })
}
