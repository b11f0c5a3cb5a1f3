//! Online samplers.
//!
//! [`SeqRtsSampler`] spreads a per-block budget over risk times as they
//! arrive: at each risk time the unspent budget is divided by one plus the
//! estimated number of risk times still to come, then clipped. The
//! [`OracleSampler`] knows the block's risk-time count in advance and is the
//! uniformity reference; [`FixedProbSampler`] is a constant baseline.

use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::ghat::{RemainingRiskEstimator, RiskQuery};
use crate::rng::bernoulli;
use crate::trial::{ParticipantTrace, TrialConfig};

pub const DEFAULT_N0_HAT: f64 = 1.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub lo: f64,
    pub hi: f64,
}

impl ClipBounds {
    pub fn from_trial(cfg: &TrialConfig) -> Self {
        ClipBounds { lo: cfg.clip_lo, hi: cfg.clip_hi }
    }
}

/// Hour-conversion fault: the hour is shifted by `start_hour_gmt − 14` on a
/// wrapped GMT clock, and parameters are undefined whenever the shifted hour
/// leaves `[0, 23]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultModel {
    pub enabled: bool,
    pub start_hour_gmt: i32,
}

impl Default for FaultModel {
    fn default() -> Self {
        FaultModel { enabled: false, start_hour_gmt: 14 }
    }
}

impl FaultModel {
    /// Hour produced by the faulty conversion of a GMT hour, possibly outside `[0, 23]`.
    pub fn shifted_hour(&self, t_gmt: i32) -> i32 {
        t_gmt - (self.start_hour_gmt - 14)
    }

    /// Faulty conversion of a GMT hour; `None` when the result is not a valid hour.
    pub fn faulty_hour(&self, t_gmt: i32) -> Option<i32> {
        let h = self.shifted_hour(t_gmt);
        (0..=23).contains(&h).then_some(h)
    }

    /// GMT clock hour reached `day_hour` hours after the start of the day.
    pub fn gmt_hour(&self, day_hour: usize) -> i32 {
        (self.start_hour_gmt + day_hour as i32).rem_euclid(24)
    }

    pub fn is_invalid(&self, day_hour: usize) -> bool {
        self.enabled && self.faulty_hour(self.gmt_hour(day_hour)).is_none()
    }

    /// Risk times in `range` whose hour computation fails.
    pub fn impacted_risk_times(&self, trace: &ParticipantTrace, range: core::ops::Range<usize>, cfg: &TrialConfig) -> usize {
        if !self.enabled {
            return 0;
        }
        range
            .filter(|&t| trace.records[t].risk && cfg.hour_index(t).is_ok_and(|h| self.is_invalid(h)))
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeqRtsConfig {
    /// Tuned budget `N̂₀`.
    pub n0_hat: f64,
    /// `None` disables clipping.
    pub clip: Option<ClipBounds>,
    pub fault: Option<FaultModel>,
}

impl SeqRtsConfig {
    pub fn new(n0_hat: f64, trial: &TrialConfig) -> Self {
        SeqRtsConfig { n0_hat, clip: Some(ClipBounds::from_trial(trial)), fault: None }
    }

    fn floor(&self) -> f64 {
        self.clip.map_or(0.005, |c| c.lo)
    }
}

/// What happened at one decision time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub risk: bool,
    /// Zero off-risk.
    pub prob: f64,
    pub action: bool,
    pub run_length: u32,
    pub hour: usize,
    /// Unclipped budget ratio, for budget samplers.
    pub raw: Option<f64>,
    /// Estimate of the remaining risk count used at this step.
    pub ghat: Option<f64>,
    pub clipped: bool,
    pub fault: bool,
    /// Budget spent in the block after this step, for budget samplers.
    pub spent: Option<f64>,
}

impl StepRecord {
    pub(crate) fn idle(q: &RiskQuery, is_risk: bool) -> Self {
        StepRecord {
            t: q.t,
            risk: is_risk,
            prob: 0.0,
            action: false,
            run_length: q.run_length,
            hour: q.hour,
            raw: None,
            ghat: None,
            clipped: false,
            fault: false,
            spent: None,
        }
    }
}

/// Budget accounting for one participant-block stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplerState {
    /// Sum of probabilities emitted at risk times so far.
    pub spent: f64,
    /// Decision times processed.
    pub position: usize,
    pub history: Vec<StepRecord>,
}

impl SamplerState {
    pub fn remaining(&self, n0_hat: f64) -> f64 {
        n0_hat - self.spent
    }

    pub fn risk_times(&self) -> usize {
        self.history.iter().filter(|s| s.risk).count()
    }
}

/// One sequential budget step.
///
/// Off-risk: probability zero, no draw, budget untouched. At a risk time the
/// probability is `(n0_hat − spent) / (1 + ĝ)` clipped to the bounds, or the
/// lower bound when the fault model invalidates the hour; the action is one
/// Bernoulli draw and the emitted probability is charged to the budget.
pub fn seqrts_step<E: RemainingRiskEstimator + ?Sized>(
    state: &mut SamplerState,
    cfg: &SeqRtsConfig,
    estimator: &E,
    is_risk: bool,
    q: &RiskQuery,
    rng: &mut dyn RngCore,
) -> StepRecord {
    state.position += 1;
    let mut rec = StepRecord::idle(q, is_risk);
    if !is_risk {
        rec.spent = Some(state.spent);
        state.history.push(rec);
        return rec;
    }
    let faulted = cfg.fault.is_some_and(|f| f.is_invalid(q.day_hour));
    let prob = if faulted {
        cfg.floor()
    } else {
        let ghat = estimator.estimate(q);
        let raw = state.remaining(cfg.n0_hat) / (1.0 + ghat);
        rec.ghat = Some(ghat);
        rec.raw = Some(raw);
        match cfg.clip {
            Some(c) => {
                rec.clipped = raw < c.lo || raw > c.hi;
                raw.clamp(c.lo, c.hi)
            }
            None => raw,
        }
    };
    rec.fault = faulted;
    rec.prob = prob;
    rec.action = bernoulli(rng, prob);
    state.spent += prob;
    rec.spent = Some(state.spent);
    state.history.push(rec);
    rec
}

/// A per-day treatment policy driven block by block.
pub trait Sampler {
    /// Called at the start of block `block` (1-based). `risk_count` is the
    /// block's lockout-free risk-time count, which only the oracle may use.
    fn begin_block(&mut self, block: usize, risk_count: usize);

    /// Decide at one decision time. Consumes one draw from `rng` at risk times only.
    fn step(&mut self, is_risk: bool, q: &RiskQuery, rng: &mut dyn RngCore) -> StepRecord;
}

impl<S: Sampler + ?Sized> Sampler for &mut S {
    fn begin_block(&mut self, block: usize, risk_count: usize) {
        (**self).begin_block(block, risk_count)
    }
    fn step(&mut self, is_risk: bool, q: &RiskQuery, rng: &mut dyn RngCore) -> StepRecord {
        (**self).step(is_risk, q, rng)
    }
}

pub struct SeqRtsSampler<E> {
    pub cfg: SeqRtsConfig,
    pub estimator: E,
    pub state: SamplerState,
}

impl<E: RemainingRiskEstimator> SeqRtsSampler<E> {
    pub fn new(cfg: SeqRtsConfig, estimator: E) -> Self {
        SeqRtsSampler { cfg, estimator, state: SamplerState::default() }
    }
}

impl<E: RemainingRiskEstimator> Sampler for SeqRtsSampler<E> {
    fn begin_block(&mut self, _block: usize, _risk_count: usize) {
        self.state = SamplerState::default();
    }

    fn step(&mut self, is_risk: bool, q: &RiskQuery, rng: &mut dyn RngCore) -> StepRecord {
        seqrts_step(&mut self.state, &self.cfg, &self.estimator, is_risk, q, rng)
    }
}

/// Oracle probability: the block goal divided evenly over its `n` risk times. Unclipped.
pub fn oracle_prob(goal: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| goal / n as f64)
}

pub struct OracleSampler {
    pub goal: f64,
    risk_count: usize,
}

impl OracleSampler {
    pub fn new(goal: f64) -> Self {
        OracleSampler { goal, risk_count: 0 }
    }
}

impl Sampler for OracleSampler {
    fn begin_block(&mut self, _block: usize, risk_count: usize) {
        self.risk_count = risk_count;
    }

    fn step(&mut self, is_risk: bool, q: &RiskQuery, rng: &mut dyn RngCore) -> StepRecord {
        let mut rec = StepRecord::idle(q, is_risk);
        if is_risk {
            // risk times under lockout are a subset of the lockout-free set, so n >= 1 here
            rec.prob = oracle_prob(self.goal, self.risk_count.max(1)).unwrap_or(0.0);
            rec.action = bernoulli(rng, rec.prob);
        }
        rec
    }
}

pub struct FixedProbSampler {
    pub p: f64,
}

impl FixedProbSampler {
    pub fn new(p: f64) -> Self {
        debug_assert!(p > 0.0 && p < 1.0);
        FixedProbSampler { p }
    }
}

impl Sampler for FixedProbSampler {
    fn begin_block(&mut self, _block: usize, _risk_count: usize) {}

    fn step(&mut self, is_risk: bool, q: &RiskQuery, rng: &mut dyn RngCore) -> StepRecord {
        let mut rec = StepRecord::idle(q, is_risk);
        if is_risk {
            rec.prob = self.p;
            rec.action = bernoulli(rng, self.p);
        }
        rec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ghat::{ConstantEstimate, PerfectForesight};
    use crate::rng::{stream, Purpose};
    use rand_core::RngCore;
    use alloc::vec;
    use proptest::prelude::*;

    fn query(t: usize) -> RiskQuery {
        RiskQuery::new(&TrialConfig::default(), t, 1, 0)
    }

    #[test]
    fn step_examples() {
        let trial = TrialConfig::default();
        let cfg = SeqRtsConfig::new(1.8, &trial);
        let mut rng = stream(0, Purpose::Actions, 0, 0);
        let mut st = SamplerState::default();
        let rec = seqrts_step(&mut st, &cfg, &ConstantEstimate(8.0), true, &query(0), &mut rng);
        assert_eq!(rec.raw, Some(1.8 / 9.0));
        assert!((rec.prob - 0.2).abs() < 1e-15);
        assert!((st.spent - rec.prob).abs() == 0.0);

        let mut st = SamplerState { spent: 1.8, ..Default::default() };
        let rec = seqrts_step(&mut st, &cfg, &ConstantEstimate(3.0), true, &query(1), &mut rng);
        assert_eq!(rec.raw, Some(0.0));
        assert_eq!(rec.prob, 0.005);
        assert!(rec.clipped);
        assert_eq!(st.spent, 1.805);
    }

    #[test]
    fn off_risk_leaves_budget_alone() {
        let trial = TrialConfig::default();
        let cfg = SeqRtsConfig::new(1.8, &trial);
        let mut rng = stream(0, Purpose::Actions, 0, 0);
        let mut untouched = rng.clone();
        let mut st = SamplerState::default();
        let rec = seqrts_step(&mut st, &cfg, &ConstantEstimate(0.0), false, &query(3), &mut rng);
        assert_eq!((rec.prob, rec.action, st.spent, st.position), (0.0, false, 0.0, 1));
        assert_eq!(rng.next_u64(), untouched.next_u64());
    }

    #[test]
    fn faulted_hours_emit_floor() {
        let trial = TrialConfig::default();
        let fault = FaultModel { enabled: true, start_hour_gmt: 17 };
        let cfg = SeqRtsConfig { fault: Some(fault), ..SeqRtsConfig::new(1.8, &trial) };
        let mut rng = stream(0, Purpose::Actions, 0, 0);
        let mut st = SamplerState::default();
        // hour 8 → GMT 1 → 1 − 3 = −2
        let rec = seqrts_step(&mut st, &cfg, &ConstantEstimate(0.0), true, &query(96), &mut rng);
        assert!(rec.fault);
        assert_eq!(rec.prob, 0.005);
        assert_eq!(st.spent, 0.005);
        let rec = seqrts_step(&mut st, &cfg, &ConstantEstimate(0.0), true, &query(12), &mut rng);
        assert!(!rec.fault);
    }

    #[test]
    fn faulty_hour_examples() {
        let f = FaultModel { enabled: true, start_hour_gmt: 17 };
        assert_eq!(f.faulty_hour(1), None);
        assert_eq!(1 - (17 - 14), -2);
        let aligned = FaultModel { enabled: true, start_hour_gmt: 14 };
        assert!((0..12).all(|h| !aligned.is_invalid(h)));
        let f16 = FaultModel { enabled: true, start_hour_gmt: 16 };
        assert_eq!(f16.faulty_hour(20), Some(18));
        // hours 7, 8 and 9 of the day wrap to GMT 0, 1, 2
        let bad: Vec<usize> = (0..12).filter(|&h| f.is_invalid(h)).collect();
        assert_eq!(bad, vec![7, 8, 9]);
        let disabled = FaultModel { enabled: false, ..f };
        assert!(!disabled.is_invalid(8));
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_prob(0.5, 2), Some(0.25));
        assert_eq!(oracle_prob(0.5, 1), Some(0.5));
        assert_eq!(oracle_prob(0.5, 10), Some(0.05));
        assert_eq!(oracle_prob(0.5, 0), None);
        let total: f64 = (0..10).map(|_| oracle_prob(0.5, 10).unwrap()).sum();
        assert!((total - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fixed_sampler_emits_constant() {
        let mut s = FixedProbSampler::new(0.1);
        let mut rng = stream(0, Purpose::Actions, 0, 0);
        s.begin_block(1, 2);
        assert_eq!(s.step(true, &query(0), &mut rng).prob, 0.1);
        assert_eq!(s.step(false, &query(1), &mut rng).prob, 0.0);
        let mut o = OracleSampler::new(0.5);
        o.begin_block(1, 5);
        let p = FixedProbSampler::new(0.5 / 5.0).step(true, &query(0), &mut rng).prob;
        assert_eq!(o.step(true, &query(0), &mut rng).prob, p);
    }

    /// Sweep one block of `len` slots with a perfect-foresight SeqRTS, no clipping.
    fn foresight_probs(pattern: &[bool], n0: f64) -> Vec<f64> {
        let trial = TrialConfig::default();
        let cfg = SeqRtsConfig { n0_hat: n0, clip: None, fault: None };
        let mut s = SeqRtsSampler::new(cfg, PerfectForesight);
        let mut rng = stream(1, Purpose::Actions, 0, 0);
        s.begin_block(1, pattern.iter().filter(|&&x| x).count());
        let remaining = crate::ghat::block_remaining_risk(pattern, &trial);
        let mut out = Vec::new();
        for (t, &x) in pattern.iter().enumerate() {
            let q = RiskQuery::new(&trial, t, 1, remaining[t]);
            let rec = s.step(x, &q, &mut rng);
            if x {
                out.push(rec.prob);
            }
        }
        out
    }

    #[test]
    fn foresight_matches_oracle_on_small_blocks() {
        for mask in 1u32..(1 << 10) {
            let pattern: Vec<bool> = (0..10).map(|i| mask >> i & 1 == 1).collect();
            let n = mask.count_ones() as usize;
            for p in foresight_probs(&pattern, 0.5) {
                assert!((p - 0.5 / n as f64).abs() < 1e-15, "mask {mask:#b}");
            }
        }
    }

    proptest! {
        #[test]
        fn clipped_probs_and_budget(ghats in proptest::collection::vec(0.0f64..60.0, 1..48), n0 in 0.1f64..4.0) {
            let trial = TrialConfig::default();
            let cfg = SeqRtsConfig::new(n0, &trial);
            let mut rng = stream(3, Purpose::Actions, 0, 0);
            let mut st = SamplerState::default();
            let mut sum = 0.0;
            for (i, g) in ghats.iter().enumerate() {
                let rec = seqrts_step(&mut st, &cfg, &ConstantEstimate(*g), true, &query(i), &mut rng);
                prop_assert!(rec.prob >= 0.005 && rec.prob <= 0.2);
                sum += rec.prob;
                prop_assert!((st.spent - sum).abs() <= 1e-12);
                prop_assert!(st.spent <= n0 + 0.005 * (i + 1) as f64 + 1e-12);
            }
        }

        #[test]
        fn ratio_identity(ghats in proptest::collection::vec(0.5f64..30.0, 2..20), n0 in 0.2f64..3.0) {
            let cfg = SeqRtsConfig { n0_hat: n0, clip: None, fault: None };
            let mut rng = stream(3, Purpose::Actions, 0, 0);
            let mut st = SamplerState::default();
            let recs: Vec<StepRecord> = ghats.iter().enumerate()
                .map(|(i, g)| seqrts_step(&mut st, &cfg, &ConstantEstimate(*g), true, &query(i), &mut rng))
                .collect();
            for w in recs.windows(2) {
                let (a, b) = (w[0], w[1]);
                if a.prob > 1e-9 {
                    let lhs = b.prob / a.prob;
                    let rhs = a.ghat.unwrap() / (1.0 + b.ghat.unwrap());
                    prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn draws_follow_uniform_threshold() {
        let mut s = FixedProbSampler::new(0.3);
        let mut rng = stream(5, Purpose::Actions, 0, 0);
        let mut twin = rng.clone();
        let rec = s.step(true, &query(0), &mut rng);
        assert_eq!(rec.action, crate::rng::uniform(&mut twin) < 0.3);
    }
}
