//! Remaining-risk estimator.
//!
//! The number of sedentary decision times still to come is modeled as
//! `Ω = K ∧ r + F·(r − K)₊`, where `K` is what remains of the current
//! sedentary run, `r` the decision times left in the horizon and `F` the
//! fraction of time spent sedentary for the rest of the day. The estimate is
//! `Ê[K ∧ r | k] + F̂(hour) · Ê[(r − K)₊ | k]`, with both conditional
//! expectations taken empirically over historical runs at least `k` long.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::trial::{ParticipantTrace, TrialConfig};

/// Largest current run length with its own stratum (two blocks).
pub const MAX_RUN_STRATUM: u32 = 96;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GHatError {
    #[error("no sedentary runs to fit")]
    NoRuns,
    #[error("no decision times observed at or after hour {hour}")]
    NoDataForHour { hour: usize },
}

/// Residual run lengths `R̃ − k` of all historical runs with `R̃ ≥ k`, for `k = 1..=max_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLengthTable {
    strata: Vec<Stratum>,
}

/// One `k`: the multiset of residuals as sorted `(residual, multiplicity)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub k: u32,
    pub m: u64,
    pub residuals: Vec<(u32, u64)>,
}

impl RunLengthTable {
    /// Tabulate residuals for `k = 1..=MAX_RUN_STRATUM`. Zero-length entries are ignored.
    pub fn fit(runs: &[u32]) -> Result<Self, GHatError> {
        Self::fit_with_max(runs, MAX_RUN_STRATUM)
    }

    pub fn fit_with_max(runs: &[u32], max_k: u32) -> Result<Self, GHatError> {
        let mut hist: BTreeMap<u32, u64> = BTreeMap::new();
        for &r in runs.iter().filter(|&&r| r > 0) {
            *hist.entry(r).or_default() += 1;
        }
        if hist.is_empty() {
            return Err(GHatError::NoRuns);
        }
        let strata = (1..=max_k.max(1))
            .map(|k| {
                let residuals: Vec<(u32, u64)> = hist.range(k..).map(|(&r, &c)| (r - k, c)).collect();
                let m = residuals.iter().map(|&(_, c)| c).sum();
                Stratum { k, m, residuals }
            })
            .collect();
        Ok(RunLengthTable { strata })
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn max_k(&self) -> u32 {
        self.strata.len() as u32
    }

    /// Count of runs at least `k` long (`m_k`); `k` beyond the table is capped.
    pub fn m(&self, k: u32) -> u64 {
        self.stratum_exact(k).map_or(0, |s| s.m)
    }

    fn stratum_exact(&self, k: u32) -> Option<&Stratum> {
        let k = k.min(self.max_k());
        if k == 0 {
            return None;
        }
        self.strata.get(k as usize - 1)
    }

    /// Stratum used for current run length `k`: the table entry at `k` (capped at
    /// the largest stratum), or the closest smaller `k` with data.
    pub fn stratum(&self, k: u32) -> Option<&Stratum> {
        let k = k.min(self.max_k());
        self.strata[..k as usize].iter().rev().find(|s| s.m > 0)
    }

    /// `Ê[K ∧ r | k]` and `Ê[(r − K)₊ | k]`, or `None` without any usable stratum.
    pub fn conditional_means(&self, k: u32, r: u32) -> Option<(f64, f64)> {
        let s = self.stratum(k)?;
        let (mut capped, mut slack) = (0u64, 0u64);
        for &(res, c) in &s.residuals {
            capped += c * res.min(r) as u64;
            slack += c * r.saturating_sub(res) as u64;
        }
        let m = s.m as f64;
        Some((capped as f64 / m, slack as f64 / m))
    }
}

/// `F̂(h)`: fraction of decision times at or after hour `h` that were sedentary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SedFractionTable {
    pub fractions: Vec<f64>,
}

impl SedFractionTable {
    /// Pool every decision time with sensor data over the training days.
    pub fn fit(traces: &[ParticipantTrace], cfg: &TrialConfig) -> Result<Self, GHatError> {
        let hours = cfg.hours_per_day();
        let mut sed = vec![0u64; hours];
        let mut total = vec![0u64; hours];
        for tr in traces {
            for (t, r) in tr.records.iter().enumerate() {
                if !r.flags.connected {
                    continue;
                }
                let Ok(h) = cfg.hour_index(t) else { continue };
                total[h] += 1;
                sed[h] += r.sedentary as u64;
            }
        }
        let mut fractions = vec![0.0; hours];
        let (mut s_acc, mut t_acc) = (0u64, 0u64);
        for h in (0..hours).rev() {
            s_acc += sed[h];
            t_acc += total[h];
            if total[h] == 0 {
                return Err(GHatError::NoDataForHour { hour: h });
            }
            fractions[h] = s_acc as f64 / t_acc as f64;
        }
        Ok(SedFractionTable { fractions })
    }

    pub fn constant(value: f64, hours: usize) -> Self {
        SedFractionTable { fractions: vec![value; hours] }
    }

    /// Fraction for `hour`; hours past the table use the last entry.
    pub fn get(&self, hour: usize) -> f64 {
        let last = self.fractions.len().saturating_sub(1);
        self.fractions.get(hour.min(last)).copied().unwrap_or(0.0)
    }
}

/// Horizon `r` over which remaining sedentary time is counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HorizonMode {
    #[default]
    Day,
    Block,
}

/// What an estimator may see at a risk time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskQuery {
    /// Day-local decision time.
    pub t: usize,
    /// Current risk run length `R_t` (≥ 1 at risk times).
    pub run_length: u32,
    /// Hour index for the estimator.
    pub hour: usize,
    /// Hours since the start of the day.
    pub day_hour: usize,
    /// Decision times after `t` left in the day.
    pub remaining_in_day: usize,
    /// Decision times after `t` left in the block.
    pub remaining_in_block: usize,
    /// Lockout-free risk times after `t` in the block, known only in hindsight.
    pub foresight_remaining: usize,
}

impl RiskQuery {
    pub fn new(cfg: &TrialConfig, t: usize, run_length: u32, foresight_remaining: usize) -> Self {
        let block_end = cfg.block_of(t) * cfg.decision_times_per_block;
        RiskQuery {
            t,
            run_length,
            hour: cfg.estimator_hour(t).unwrap_or(0),
            day_hour: cfg.hour_index(t).unwrap_or(0),
            remaining_in_day: cfg.decision_times_per_day() - 1 - t,
            remaining_in_block: block_end - 1 - t,
            foresight_remaining,
        }
    }
}

/// Source of `ĝ_t`, the estimated number of risk times after `t`.
pub trait RemainingRiskEstimator {
    fn estimate(&self, q: &RiskQuery) -> f64;
}

impl<E: RemainingRiskEstimator + ?Sized> RemainingRiskEstimator for &E {
    fn estimate(&self, q: &RiskQuery) -> f64 {
        (**self).estimate(q)
    }
}

/// Plug-in of the true remaining risk count.
#[derive(Clone, Copy, Debug, Default)]
pub struct PerfectForesight;

impl RemainingRiskEstimator for PerfectForesight {
    fn estimate(&self, q: &RiskQuery) -> f64 {
        q.foresight_remaining as f64
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantEstimate(pub f64);

impl RemainingRiskEstimator for ConstantEstimate {
    fn estimate(&self, _q: &RiskQuery) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GHatModel {
    pub run_lengths: RunLengthTable,
    pub sed_fraction: SedFractionTable,
    pub horizon_mode: HorizonMode,
}

impl GHatModel {
    /// Fit from historical traces: sedentary runs within each day and the hourly sedentary fraction.
    pub fn fit(traces: &[ParticipantTrace], cfg: &TrialConfig, horizon_mode: HorizonMode) -> Result<Self, GHatError> {
        let runs = sedentary_runs(traces);
        Ok(GHatModel {
            run_lengths: RunLengthTable::fit(&runs)?,
            sed_fraction: SedFractionTable::fit(traces, cfg)?,
            horizon_mode,
        })
    }

    /// `ĝ` at current run length `k`, estimator hour `hour` and horizon `r`; always in `[0, r]`.
    pub fn eval(&self, k: u32, hour: usize, r: u32) -> f64 {
        if r == 0 {
            return 0.0;
        }
        let f = self.sed_fraction.get(hour).clamp(0.0, 1.0);
        match self.run_lengths.conditional_means(k.max(1), r) {
            Some((capped, slack)) => capped + f * slack,
            None => f * r as f64,
        }
    }

    pub fn horizon(&self, q: &RiskQuery) -> u32 {
        match self.horizon_mode {
            HorizonMode::Day => q.remaining_in_day as u32,
            HorizonMode::Block => q.remaining_in_block as u32,
        }
    }
}

impl RemainingRiskEstimator for GHatModel {
    fn estimate(&self, q: &RiskQuery) -> f64 {
        self.eval(q.run_length, q.hour, self.horizon(q))
    }
}

/// Maximal runs of sedentary decision times, split at day boundaries.
pub fn sedentary_runs(traces: &[ParticipantTrace]) -> Vec<u32> {
    let mut runs = Vec::new();
    for tr in traces {
        let mut len = 0u32;
        for r in &tr.records {
            if r.sedentary {
                len += 1;
            } else if len > 0 {
                runs.push(len);
                len = 0;
            }
        }
        if len > 0 {
            runs.push(len);
        }
    }
    runs
}

/// Run lengths of the risk indicator, restarted at every block boundary.
pub fn block_run_lengths(risk: &[bool], cfg: &TrialConfig) -> Vec<u32> {
    risk.chunks(cfg.decision_times_per_block)
        .flat_map(|chunk| crate::trial::run_length(chunk).0)
        .collect()
}

/// True remaining risk count after each decision time, within its block.
pub fn block_remaining_risk(risk: &[bool], cfg: &TrialConfig) -> Vec<usize> {
    let mut out = vec![0usize; risk.len()];
    for (b, chunk) in risk.chunks(cfg.decision_times_per_block).enumerate() {
        let base = b * cfg.decision_times_per_block;
        let mut after = 0usize;
        for i in (0..chunk.len()).rev() {
            out[base + i] = after;
            after += chunk[i] as usize;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmseReport {
    /// Mean per-block RMSE for each block number (index 0 is block 1).
    pub per_block: Vec<Option<f64>>,
    /// Mean risk-time count over blocks with any risk time.
    pub mean_risk_times: Vec<Option<f64>>,
    /// Mean per-block RMSE over all blocks with any risk time.
    pub overall: Option<f64>,
}

/// Root-mean-square error of the estimator against the true remaining risk count,
/// computed per block over its risk times and averaged over blocks.
pub fn rmse<E: RemainingRiskEstimator>(est: &E, traces: &[ParticipantTrace], cfg: &TrialConfig) -> RmseReport {
    let nb = cfg.blocks_per_day;
    let mut sums = vec![(0.0f64, 0usize, 0usize); nb];
    for tr in traces {
        let risk = tr.risk();
        let runs = block_run_lengths(&risk, cfg);
        let truth = block_remaining_risk(&risk, cfg);
        for j in 1..=nb {
            let (mut sq, mut n) = (0.0, 0usize);
            for t in cfg.block_range(j).filter(|&t| risk[t]) {
                let q = RiskQuery::new(cfg, t, runs[t], truth[t]);
                let e = est.estimate(&q) - truth[t] as f64;
                sq += e * e;
                n += 1;
            }
            if n > 0 {
                let acc = &mut sums[j - 1];
                acc.0 += libm::sqrt(sq / n as f64);
                acc.1 += 1;
                acc.2 += n;
            }
        }
    }
    let per_block: Vec<Option<f64>> = sums.iter().map(|&(s, b, _)| (b > 0).then(|| s / b as f64)).collect();
    let mean_risk_times = sums.iter().map(|&(_, b, n)| (b > 0).then(|| n as f64 / b as f64)).collect();
    let blocks: usize = sums.iter().map(|s| s.1).sum();
    let overall = (blocks > 0).then(|| sums.iter().map(|s| s.0).sum::<f64>() / blocks as f64);
    RmseReport { per_block, mean_risk_times, overall }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::{AvailabilityFlags, DecisionRecord};
    use proptest::prelude::*;

    fn model(runs: &[u32], f: f64, mode: HorizonMode) -> GHatModel {
        GHatModel {
            run_lengths: RunLengthTable::fit(runs).unwrap(),
            sed_fraction: SedFractionTable::constant(f, 12),
            horizon_mode: mode,
        }
    }

    #[test]
    fn fit_examples() {
        let t = RunLengthTable::fit(&[2, 2, 2]).unwrap();
        assert_eq!(t.m(1), 3);
        assert_eq!(t.stratum(1).unwrap().residuals, vec![(1, 3)]);
        assert_eq!(t.m(3), 0);
        let t = RunLengthTable::fit(&[5]).unwrap();
        assert_eq!(t.m(5), 1);
        assert_eq!(t.stratum(5).unwrap().residuals, vec![(0, 1)]);
        assert_eq!(RunLengthTable::fit(&[]), Err(GHatError::NoRuns));
        assert_eq!(RunLengthTable::fit(&[0, 0]), Err(GHatError::NoRuns));
    }

    #[test]
    fn eval_examples() {
        let g = model(&[2, 2, 2], 0.5, HorizonMode::Day);
        assert_eq!(g.eval(1, 0, 5), 3.0);
        assert_eq!(g.eval(1, 0, 0), 0.0);
        assert_eq!(g.eval(40, 3, 0), 0.0);
    }

    #[test]
    fn unseen_run_lengths_fall_back() {
        let g = model(&[2, 2, 2], 0.5, HorizonMode::Day);
        // k = 3 has no runs: use k = 2, residuals {0}, so F̂·r
        assert_eq!(g.eval(3, 0, 10), 5.0);
        assert_eq!(g.eval(500, 0, 10), 5.0);
        let long = model(&[200], 1.0, HorizonMode::Day);
        // capped at k = 96, residual 104
        assert_eq!(long.run_lengths.stratum(150).unwrap().k, 96);
        assert_eq!(long.eval(150, 0, 20), 20.0);
    }

    #[test]
    fn m_non_increasing() {
        let t = RunLengthTable::fit(&[1, 3, 3, 7, 20, 120]).unwrap();
        for k in 1..MAX_RUN_STRATUM {
            assert!(t.m(k) >= t.m(k + 1));
        }
        assert_eq!(t.m(96), 1);
    }

    fn trace_with_sedentary(sed: impl Fn(usize) -> bool) -> ParticipantTrace {
        let cfg = TrialConfig::default();
        ParticipantTrace {
            participant_id: 0,
            day: 0,
            records: (0..cfg.decision_times_per_day())
                .map(|t| DecisionRecord::new(0, sed(t), AvailabilityFlags::ALL))
                .collect(),
        }
    }

    #[test]
    fn sed_fraction_examples() {
        let cfg = TrialConfig::default();
        let all = SedFractionTable::fit(&[trace_with_sedentary(|_| true)], &cfg).unwrap();
        assert!(all.fractions.iter().all(|&f| f == 1.0));
        let none = SedFractionTable::fit(&[trace_with_sedentary(|_| false)], &cfg).unwrap();
        assert!(none.fractions.iter().all(|&f| f == 0.0));
        let late = SedFractionTable::fit(&[trace_with_sedentary(|t| t >= 72)], &cfg).unwrap();
        assert_eq!(late.get(0), 0.5);
        assert_eq!(late.get(6), 1.0);
        assert_eq!(SedFractionTable::fit(&[], &cfg), Err(GHatError::NoDataForHour { hour: 11 }));
    }

    #[test]
    fn fit_model_from_traces() {
        let cfg = TrialConfig::default();
        let tr = trace_with_sedentary(|t| (10..20).contains(&t) || t >= 140);
        assert_eq!(sedentary_runs(core::slice::from_ref(&tr)), vec![10, 4]);
        let g = GHatModel::fit(&[tr], &cfg, HorizonMode::Day).unwrap();
        assert_eq!(g.run_lengths.m(5), 1);
        let none = trace_with_sedentary(|_| false);
        assert_eq!(GHatModel::fit(&[none], &cfg, HorizonMode::Day), Err(GHatError::NoRuns));
    }

    struct Offset(f64);
    impl RemainingRiskEstimator for Offset {
        fn estimate(&self, q: &RiskQuery) -> f64 {
            q.foresight_remaining as f64 + self.0
        }
    }

    #[test]
    fn rmse_examples() {
        let cfg = TrialConfig::default();
        let tr = trace_with_sedentary(|t| t % 7 == 0 && t < 100);
        let exact = rmse(&PerfectForesight, core::slice::from_ref(&tr), &cfg);
        assert_eq!(exact.overall, Some(0.0));
        let off = rmse(&Offset(3.0), core::slice::from_ref(&tr), &cfg);
        assert!((off.overall.unwrap() - 3.0).abs() < 1e-12);
        // block 3 (96..144) holds only t = 98
        assert_eq!(off.mean_risk_times[2], Some(1.0));
        let empty = rmse(&Offset(3.0), &[trace_with_sedentary(|_| false)], &cfg);
        assert_eq!(empty.overall, None);
    }

    #[test]
    fn remaining_risk_is_strictly_after() {
        let cfg = TrialConfig::default();
        let mut risk = vec![false; 144];
        for t in [0, 5, 47, 48, 50] {
            risk[t] = true;
        }
        let g = block_remaining_risk(&risk, &cfg);
        assert_eq!((g[0], g[5], g[47], g[48], g[50]), (2, 1, 0, 1, 0));
        let r = block_run_lengths(&[true; 96], &cfg);
        assert_eq!((r[47], r[48]), (48, 1));
    }

    /// SplitMix64, independent of the crate's RNG plumbing.
    struct Mix(u64);
    impl Mix {
        fn uniform(&mut self) -> f64 {
            self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = self.0;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    #[test]
    fn geometric_runs_are_memoryless() {
        // P(R > n) = c^n, so P(K >= j | R >= k) = c^j and E[K ∧ r | k] = c(1 - c^r)/(1 - c).
        let c = 0.875f64;
        let mut rng = Mix(7);
        let runs: Vec<u32> = (0..10_000)
            .map(|_| {
                let mut n = 1;
                while rng.uniform() < c {
                    n += 1;
                }
                n
            })
            .collect();
        let table = RunLengthTable::fit(&runs).unwrap();
        for k in [1u32, 5, 10] {
            let s = table.stratum(k).unwrap();
            for r in [1u32, 12, 48] {
                let (mean, _) = table.conditional_means(k, r).unwrap();
                let var = s.residuals.iter().map(|&(x, n)| n as f64 * (x.min(r) as f64 - mean).powi(2)).sum::<f64>()
                    / (s.m as f64 - 1.0);
                let se = libm::sqrt(var / s.m as f64);
                let expected = c * (1.0 - libm::pow(c, r as f64)) / (1.0 - c);
                assert!((mean - expected).abs() < 3.0 * se, "k={k} r={r}: {mean} vs {expected} (se {se})");
            }
        }
    }

    proptest! {
        #[test]
        fn eval_bounded_and_monotone(runs in proptest::collection::vec(1u32..150, 1..40),
                                     k in 1u32..120, hour in 0usize..12, r in 0u32..200,
                                     f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0) {
            let lo = model(&runs, f1.min(f2), HorizonMode::Day);
            let hi = model(&runs, f1.max(f2), HorizonMode::Day);
            let (a, b) = (lo.eval(k, hour, r), hi.eval(k, hour, r));
            prop_assert!(a >= 0.0 && a <= r as f64 + 1e-9);
            prop_assert!(b >= a - 1e-12);
            prop_assert_eq!(lo.eval(k, hour, 0), 0.0);
        }
    }
}
