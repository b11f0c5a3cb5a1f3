//! Per-unit performance measures and their aggregation.
//!
//! A unit is one block or one whole day of one participant. Uniformity is
//! measured over the unit's risk times: the mean absolute deviation of the
//! probabilities from their own mean, and the mean KL divergence or
//! Hellinger distance from the oracle probability `goal / N`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::sampler::FaultModel;
use crate::sim::impute_method1;
use crate::trial::{ParticipantTrace, Selection, TrialConfig, Unit};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Critical value for a two-sided 95% interval given degrees of freedom.
pub type Critical<'a> = &'a dyn Fn(usize) -> f64;

/// Large-sample critical value, ignoring degrees of freedom.
pub fn normal_critical(_df: usize) -> f64 {
    Z_95
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Natural,
    Base10,
}

impl LogBase {
    fn ln_scale(self) -> f64 {
        match self {
            LogBase::Natural => 1.0,
            LogBase::Base10 => core::f64::consts::LN_10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("probability {0} is not strictly between 0 and 1")]
    DegenerateProb(f64),
    #[error("no risk times")]
    NoRiskTimes,
}

pub fn count_treatments(trace: &ParticipantTrace, range: core::ops::Range<usize>) -> usize {
    trace.records[range].iter().filter(|r| r.treated()).count()
}

/// Mean absolute deviation from the mean; `None` for no probabilities.
pub fn mad(probs: &[f64]) -> Option<f64> {
    if probs.is_empty() {
        return None;
    }
    let n = probs.len() as f64;
    // centering on the first value keeps equal inputs at exactly zero
    let p0 = probs[0];
    let offset = probs.iter().map(|p| p - p0).sum::<f64>() / n;
    Some(probs.iter().map(|p| libm::fabs(p - p0 - offset)).sum::<f64>() / n)
}

fn check_open(p: f64) -> Result<f64, MetricError> {
    if p > 0.0 && p < 1.0 {
        Ok(p)
    } else {
        Err(MetricError::DegenerateProb(p))
    }
}

/// Bernoulli KL divergence `KL(p ‖ q)` in the given base.
pub fn kl_bernoulli(p: f64, q: f64, base: LogBase) -> Result<f64, MetricError> {
    let (p, q) = (check_open(p)?, check_open(q)?);
    let nats = p * libm::log(p / q) + (1.0 - p) * libm::log((1.0 - p) / (1.0 - q));
    Ok(nats / base.ln_scale())
}

/// Mean KL divergence of the risk-time probabilities from the oracle `goal / n_risk`.
pub fn kl_uniformity(probs: &[f64], n_risk: usize, goal: f64, base: LogBase) -> Result<f64, MetricError> {
    if probs.is_empty() || n_risk == 0 {
        return Err(MetricError::NoRiskTimes);
    }
    let q = goal / n_risk as f64;
    let mut total = 0.0;
    for &p in probs {
        total += kl_bernoulli(p, q, base)?;
    }
    Ok(total / probs.len() as f64)
}

/// Hellinger distance between Bernoulli(p) and Bernoulli(q), in `[0, 1]`.
pub fn hellinger(p: f64, q: f64) -> f64 {
    let a = libm::sqrt(p) - libm::sqrt(q);
    let b = libm::sqrt(1.0 - p) - libm::sqrt(1.0 - q);
    libm::sqrt(a * a + b * b) / core::f64::consts::SQRT_2
}

pub fn hellinger_uniformity(probs: &[f64], n_risk: usize, goal: f64) -> Result<f64, MetricError> {
    if probs.is_empty() || n_risk == 0 {
        return Err(MetricError::NoRiskTimes);
    }
    let q = goal / n_risk as f64;
    let mut total = 0.0;
    for &p in probs {
        total += hellinger(check_open(p)?, check_open(q)?);
    }
    Ok(total / probs.len() as f64)
}

/// Lower bound `|Σ(p − q)| / (L·√2)` on the mean Hellinger distance, for a unit of `unit_len` decision times.
pub fn hellinger_lower_bound(probs: &[f64], n_risk: usize, goal: f64, unit_len: usize) -> f64 {
    if n_risk == 0 {
        return 0.0;
    }
    let q = goal / n_risk as f64;
    let gap: f64 = probs.iter().map(|p| p - q).sum();
    libm::fabs(gap) / (unit_len as f64 * core::f64::consts::SQRT_2)
}

/// Whether the mean Hellinger distance respects its lower bound (up to rounding).
pub fn hellinger_bound_check(probs: &[f64], n_risk: usize, goal: f64, unit_len: usize) -> Result<bool, MetricError> {
    let v = hellinger_uniformity(probs, n_risk, goal)?;
    let bound = hellinger_lower_bound(probs, n_risk, goal, unit_len);
    Ok(v + 1e-15 >= bound)
}

/// Invalid-parameter proportion: impacted risk times over the block length.
pub fn ipp(impacted: usize, decision_times_per_block: usize) -> f64 {
    impacted as f64 / decision_times_per_block as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateRow {
    /// Number of (partial) risk times in the unit, `N`.
    pub mean_sed: usize,
    /// Fraction of those risk times among the unit's last `N` decision times.
    pub end_prop: f64,
    /// Distinct unit-local hours containing a risk time.
    pub hour_var: usize,
}

pub fn covariates(partial_risk: &[bool], intervals_per_hour: usize) -> CovariateRow {
    let n = partial_risk.iter().filter(|&&x| x).count();
    let end_prop = if n == 0 {
        0.0
    } else {
        let tail = &partial_risk[partial_risk.len() - n..];
        tail.iter().filter(|&&x| x).count() as f64 / n as f64
    };
    let mut hours: Vec<usize> = (0..partial_risk.len())
        .filter(|&t| partial_risk[t])
        .map(|t| t / intervals_per_hour)
        .collect();
    hours.dedup();
    CovariateRow { mean_sed: n, end_prop, hour_var: hours.len() }
}

/// Mean over the up-to-`k` most recent earlier entries that are present.
pub fn rolling_prior_k(series: &[Option<f64>], k: usize) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(series.len());
    let mut seen: Vec<f64> = Vec::new();
    for v in series {
        let recent = &seen[seen.len().saturating_sub(k)..];
        out.push((!recent.is_empty()).then(|| recent.iter().sum::<f64>() / recent.len() as f64));
        if let Some(x) = v {
            seen.push(*x);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMetrics {
    pub participant_id: u32,
    pub day: u32,
    pub unit: Unit,
    pub n_risk: usize,
    pub y: usize,
    pub mad: Option<f64>,
    pub kl: Option<f64>,
    pub hellinger: Option<f64>,
    pub ipp: f64,
    pub covariates: CovariateRow,
}

/// Compute every measure for one unit of a completed trace.
pub fn unit_metrics(
    trace: &ParticipantTrace,
    unit: Unit,
    trial: &TrialConfig,
    fault: Option<&FaultModel>,
) -> Result<BlockMetrics, MetricError> {
    let range = trial.unit_range(unit);
    let n_risk = trace.records[range.clone()].iter().filter(|r| r.risk).count();
    let probs: Vec<f64> = trace.records[range.clone()]
        .iter()
        .filter(|r| r.risk)
        .filter_map(|r| r.prob)
        .collect();
    let goal = trial.budget_goal_per_block;
    let (mad_v, kl, hell) = if probs.is_empty() {
        (None, None, None)
    } else {
        (
            mad(&probs),
            Some(kl_uniformity(&probs, n_risk, goal, trial.kl_log_base)?),
            Some(hellinger_uniformity(&probs, n_risk, goal)?),
        )
    };
    let impacted = fault.map_or(0, |f| f.impacted_risk_times(trace, range.clone(), trial));
    let partial = impute_method1(trace, trial);
    Ok(BlockMetrics {
        participant_id: trace.participant_id,
        day: trace.day,
        unit,
        n_risk,
        y: count_treatments(trace, range.clone()),
        mad: mad_v,
        kl,
        hellinger: hell,
        ipp: ipp(impacted, range.len()),
        covariates: covariates(&partial[range], trial.intervals_per_hour()),
    })
}

/// Metrics for every selected unit, ordered by participant, day and unit.
pub fn evaluate(
    traces: &[ParticipantTrace],
    selection: &Selection,
    trial: &TrialConfig,
    fault: Option<&FaultModel>,
) -> Result<Vec<BlockMetrics>, MetricError> {
    let mut out = Vec::new();
    let mut ordered: Vec<&ParticipantTrace> = traces.iter().collect();
    ordered.sort_by_key(|t| (t.participant_id, t.day));
    for tr in ordered {
        for unit in trial.units() {
            if selection.contains(tr.participant_id, tr.day, unit) {
                out.push(unit_metrics(tr, unit, trial, fault)?);
            }
        }
    }
    Ok(out)
}

/// Mean with a confidence interval over per-participant means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// Pooled mean over units.
    pub mean: f64,
    /// Mean of per-participant means; the interval is centered here.
    pub participant_mean: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n_units: usize,
    pub n_participants: usize,
}

impl Estimate {
    /// `values` are `(participant, value)` pairs.
    pub fn from_pairs(values: &[(u32, f64)], crit: Critical) -> Option<Estimate> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().map(|v| v.1).sum::<f64>() / values.len() as f64;
        let mut per: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for &(p, v) in values {
            let e = per.entry(p).or_default();
            e.0 += v;
            e.1 += 1;
        }
        let means: Vec<f64> = per.values().map(|&(s, n)| s / n as f64).collect();
        let k = means.len();
        let pm = means.iter().sum::<f64>() / k as f64;
        let (ci_lo, ci_hi) = if k >= 2 {
            let var = means.iter().map(|m| (m - pm) * (m - pm)).sum::<f64>() / (k - 1) as f64;
            let half = crit(k - 1) * libm::sqrt(var / k as f64);
            (Some(pm - half), Some(pm + half))
        } else {
            (None, None)
        };
        Some(Estimate { mean, participant_mean: pm, ci_lo, ci_hi, n_units: values.len(), n_participants: k })
    }

    pub fn excludes(&self, value: f64) -> bool {
        matches!((self.ci_lo, self.ci_hi), (Some(lo), Some(hi)) if value < lo || value > hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub unit: Unit,
    pub treatments: Option<Estimate>,
    pub mad: Option<Estimate>,
    pub kl: Option<Estimate>,
    pub hellinger: Option<Estimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub units: Vec<UnitSummary>,
}

impl Summary {
    pub fn get(&self, unit: Unit) -> Option<&UnitSummary> {
        self.units.iter().find(|u| u.unit == unit)
    }
}

/// Aggregate unit metrics per unit kind. Units without risk times count toward
/// treatment means (with zero treatments) but not toward uniformity means.
pub fn aggregate(metrics: &[BlockMetrics], trial: &TrialConfig, crit: Critical) -> Summary {
    let units = trial
        .units()
        .map(|unit| {
            let rows: Vec<&BlockMetrics> = metrics.iter().filter(|m| m.unit == unit).collect();
            let pairs = |f: &dyn Fn(&BlockMetrics) -> Option<f64>| -> Vec<(u32, f64)> {
                rows.iter().filter_map(|m| f(m).map(|v| (m.participant_id, v))).collect()
            };
            UnitSummary {
                unit,
                treatments: Estimate::from_pairs(&pairs(&|m| Some(m.y as f64)), crit),
                mad: Estimate::from_pairs(&pairs(&|m| m.mad), crit),
                kl: Estimate::from_pairs(&pairs(&|m| m.kl), crit),
                hellinger: Estimate::from_pairs(&pairs(&|m| m.hellinger), crit),
            }
        })
        .collect();
    Summary { units }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::{AvailabilityFlags, DecisionRecord};
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn mad_examples() {
        assert_eq!(mad(&[0.1, 0.1]), Some(0.0));
        assert_eq!(mad(&[0.3]), Some(0.0));
        assert!((mad(&[0.1, 0.2]).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(mad(&[]), None);
    }

    #[test]
    fn kl_toy_example() {
        // reference values from direct evaluation of the binary KL formula
        let nat = kl_uniformity(&[0.1, 0.1], 2, 0.5, LogBase::Natural).unwrap();
        assert!((nat - 0.072_460_327_9).abs() < 1e-9, "{nat}");
        let ten = kl_uniformity(&[0.1, 0.1], 2, 0.5, LogBase::Base10).unwrap();
        assert!((ten - 0.031_469_120_6).abs() < 1e-9, "{ten}");
        assert_eq!(kl_uniformity(&[0.25, 0.25], 2, 0.5, LogBase::Natural), Ok(0.0));
        assert_eq!(kl_bernoulli(0.0, 0.5, LogBase::Natural), Err(MetricError::DegenerateProb(0.0)));
        assert_eq!(kl_uniformity(&[], 0, 0.5, LogBase::Natural), Err(MetricError::NoRiskTimes));
    }

    #[test]
    fn hellinger_examples() {
        assert_eq!(hellinger(0.25, 0.25), 0.0);
        assert!((hellinger(0.1, 0.25) - 0.142_486_072_1).abs() < 1e-9, "{}", hellinger(0.1, 0.25));
        let v = hellinger_uniformity(&[0.1, 0.1], 2, 0.5).unwrap();
        let bound = hellinger_lower_bound(&[0.1, 0.1], 2, 0.5, 48);
        assert!((bound - 0.3 / (48.0 * core::f64::consts::SQRT_2)).abs() < 1e-15);
        assert!((bound - 0.004_419_4).abs() < 1e-6);
        assert!(v >= bound);
        assert_eq!(hellinger_bound_check(&[0.25, 0.25], 2, 0.5, 48), Ok(true));
    }

    #[test]
    fn covariate_examples() {
        let zeros = vec![false; 48];
        assert_eq!(covariates(&zeros, 12), CovariateRow { mean_sed: 0, end_prop: 0.0, hour_var: 0 });
        let mut x = vec![false; 48];
        for t in [0, 1, 46, 47] {
            x[t] = true;
        }
        assert_eq!(covariates(&x, 12), CovariateRow { mean_sed: 4, end_prop: 0.5, hour_var: 2 });
        let mut late = vec![false; 48];
        late[45..].fill(true);
        assert_eq!(covariates(&late, 12).end_prop, 1.0);
        assert_eq!(covariates(&[true; 48], 12).hour_var, 4);
    }

    #[test]
    fn rolling_examples() {
        let c = rolling_prior_k(&[Some(3.0); 6], 5);
        assert_eq!(c[0], None);
        assert!(c[1..].iter().all(|v| *v == Some(3.0)));
        let r = rolling_prior_k(&[Some(2.0), Some(4.0), Some(6.0), Some(100.0)], 5);
        assert_eq!(r[3], Some(4.0));
        let gaps = rolling_prior_k(&[None, Some(2.0), None, Some(6.0), None], 1);
        assert_eq!(gaps, vec![None, None, Some(2.0), Some(2.0), Some(6.0)]);
    }

    #[test]
    fn ipp_examples() {
        assert_eq!(ipp(0, 48), 0.0);
        assert_eq!(ipp(24, 48), 0.5);
        assert!((ipp(10, 48) - 0.208_333).abs() < 1e-6);
    }

    fn trace_with(actions: &[(usize, bool)]) -> ParticipantTrace {
        let trial = TrialConfig::default();
        let mut records = vec![DecisionRecord::new(0, false, AvailabilityFlags::ALL); trial.decision_times_per_day()];
        for &(t, a) in actions {
            records[t] = DecisionRecord::new(0, true, AvailabilityFlags::ALL);
            records[t].prob = Some(0.1);
            records[t].action = Some(a);
        }
        ParticipantTrace { participant_id: 1, day: 0, records }
    }

    #[test]
    fn treatment_counts() {
        assert_eq!(count_treatments(&trace_with(&[]), 0..144), 0);
        let tr = trace_with(&[(3, true), (50, false), (100, true)]);
        assert_eq!(count_treatments(&tr, 0..144), 2);
        assert_eq!(count_treatments(&tr, 0..48), 1);
    }

    #[test]
    fn unit_metrics_absent_without_risk() {
        let trial = TrialConfig::default();
        let tr = trace_with(&[(3, true), (10, false)]);
        let b2 = unit_metrics(&tr, Unit::Block(2), &trial, None).unwrap();
        assert_eq!((b2.n_risk, b2.y, b2.mad, b2.kl, b2.hellinger), (0, 0, None, None, None));
        let b1 = unit_metrics(&tr, Unit::Block(1), &trial, None).unwrap();
        assert_eq!((b1.n_risk, b1.y, b1.mad), (2, 1, Some(0.0)));
        assert!(b1.kl.unwrap() > 0.0);
    }

    fn row(p: u32, day: u32, unit: Unit, y: usize) -> BlockMetrics {
        BlockMetrics {
            participant_id: p,
            day,
            unit,
            n_risk: 1,
            y,
            mad: Some(0.0),
            kl: None,
            hellinger: None,
            ipp: 0.0,
            covariates: covariates(&[], 12),
        }
    }

    #[test]
    fn block_and_day_averages_differ() {
        let trial = TrialConfig::default();
        // block 1 available on days 1 and 2 only; blocks 2, 3 on all four days
        let mut rows = vec![row(1, 1, Unit::Block(1), 1), row(1, 2, Unit::Block(1), 0)];
        let b2 = [0, 0, 1, 0];
        let b3 = [0, 0, 0, 1];
        let days = [1, 0, 1, 1];
        for d in 0..4 {
            rows.push(row(1, d as u32 + 1, Unit::Block(2), b2[d]));
            rows.push(row(1, d as u32 + 1, Unit::Block(3), b3[d]));
            rows.push(row(1, d as u32 + 1, Unit::Day, days[d]));
        }
        let s = aggregate(&rows, &trial, &normal_critical);
        let mean = |u| s.get(u).unwrap().treatments.unwrap().mean;
        assert_eq!(mean(Unit::Block(1)), 0.5);
        assert_eq!(mean(Unit::Day), 0.75);
        let block_sum = mean(Unit::Block(1)) + mean(Unit::Block(2)) + mean(Unit::Block(3));
        assert!(mean(Unit::Day) < block_sum);
    }

    #[test]
    fn estimate_edges() {
        let e = Estimate::from_pairs(&[(1, 0.7)], &normal_critical).unwrap();
        assert_eq!((e.mean, e.ci_lo), (0.7, None));
        let same = Estimate::from_pairs(&[(1, 0.5), (2, 0.5), (3, 0.5)], &normal_critical).unwrap();
        assert_eq!((same.ci_lo, same.ci_hi), (Some(0.5), Some(0.5)));
        assert!(Estimate::from_pairs(&[], &normal_critical).is_none());
        let spread = Estimate::from_pairs(&[(1, 0.0), (1, 1.0), (2, 1.0)], &normal_critical).unwrap();
        assert!((spread.mean - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(spread.participant_mean, 0.75);
    }

    proptest! {
        #[test]
        fn mad_shift_and_permutation(mut probs in proptest::collection::vec(0.01f64..0.5, 1..30), c in -0.009f64..0.4) {
            let base = mad(&probs).unwrap();
            let shifted: Vec<f64> = probs.iter().map(|p| p + c).collect();
            prop_assert!((mad(&shifted).unwrap() - base).abs() < 1e-12);
            probs.reverse();
            prop_assert!((mad(&probs).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn mad_zero_iff_equal(probs in proptest::collection::vec(prop_oneof![Just(0.1f64), Just(0.2f64)], 1..10)) {
            let all_eq = probs.iter().all(|&p| p == probs[0]);
            prop_assert_eq!(mad(&probs).unwrap() == 0.0, all_eq);
        }

        #[test]
        fn divergences_nonnegative(probs in proptest::collection::vec(0.005f64..0.995, 1..48), extra in 0usize..10) {
            let n = probs.len() + extra;
            let kl = kl_uniformity(&probs, n, 0.5, LogBase::Natural).unwrap();
            let h = hellinger_uniformity(&probs, n, 0.5).unwrap();
            prop_assert!(kl >= -1e-15);
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert!(hellinger_bound_check(&probs, n, 0.5, 48.max(n)).unwrap());
        }
    }
}
