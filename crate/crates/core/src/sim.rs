//! Synthetic participant-days and sequential decision simulation.
//!
//! Behavior alternates between sedentary and active regimes whose lengths
//! are drawn independently (a two-state semi-Markov process). Each regime
//! emits per-interval step counts; the sedentary and availability criteria
//! are then derived from the resulting sensor record exactly as for real data.

use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use rand_distr::{Distribution, Geometric, Poisson};
use serde::{Deserialize, Serialize};

use crate::ghat::{block_remaining_risk, RiskQuery};
use crate::rng::{bernoulli, stream, Purpose};
use crate::sampler::{Sampler, StepRecord};
use crate::trial::{derive_record, locked_out, ConfigError, DayRecording, DndWindow, ParticipantTrace, TrialConfig};

/// Distribution over positive run lengths, in intervals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunDist {
    /// `1 + Geometric`, with the given mean (≥ 1).
    Geometric { mean: f64 },
    Fixed { length: u32 },
}

impl RunDist {
    pub fn mean(&self) -> f64 {
        match *self {
            RunDist::Geometric { mean } => mean,
            RunDist::Fixed { length } => length as f64,
        }
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> u32 {
        match *self {
            RunDist::Fixed { length } => length.max(1),
            RunDist::Geometric { mean } => {
                if mean <= 1.0 {
                    return 1;
                }
                let g = Geometric::new(1.0 / mean).expect("success probability in (0, 1)");
                1 + g.sample(rng).min(u32::MAX as u64 - 1) as u32
            }
        }
    }

    fn validate(&self, key: &str) -> Result<(), ConfigError> {
        match *self {
            RunDist::Geometric { mean } if !(mean >= 1.0 && mean.is_finite()) => {
                Err(ConfigError::new(alloc::format!("{key}.mean"), "must be a finite value >= 1"))
            }
            RunDist::Fixed { length: 0 } => Err(ConfigError::new(alloc::format!("{key}.length"), "must be at least 1")),
            _ => Ok(()),
        }
    }
}

/// Per-interval step counts within a regime.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepDist {
    Poisson { mean: f64 },
    Fixed { steps: u32 },
}

impl StepDist {
    pub fn mean(&self) -> f64 {
        match *self {
            StepDist::Poisson { mean } => mean,
            StepDist::Fixed { steps } => steps as f64,
        }
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> u32 {
        match *self {
            StepDist::Fixed { steps } => steps,
            StepDist::Poisson { mean } if mean <= 0.0 => 0,
            StepDist::Poisson { mean } => {
                let p = Poisson::new(mean).expect("positive finite mean");
                let v: f64 = p.sample(rng);
                v as u32
            }
        }
    }

    fn validate(&self, key: &str) -> Result<(), ConfigError> {
        match *self {
            StepDist::Poisson { mean } if !(mean >= 0.0 && mean.is_finite()) => {
                Err(ConfigError::new(alloc::format!("{key}.mean"), "must be a finite value >= 0"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorParams {
    pub sedentary_run: RunDist,
    pub active_run: RunDist,
    pub steps_sedentary: StepDist,
    pub steps_active: StepDist,
    /// Per-interval probability that a disconnection starts.
    pub connectivity_gap_rate: f64,
    pub connectivity_gap: RunDist,
    /// Daily do-not-disturb windows, in decision times.
    pub dnd_windows: Vec<DndWindow>,
    /// Probability that the device records nothing all day.
    pub day_skip_prob: f64,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        BehaviorParams {
            sedentary_run: RunDist::Geometric { mean: 8.0 },
            active_run: RunDist::Geometric { mean: 6.0 },
            steps_sedentary: StepDist::Poisson { mean: 10.0 },
            steps_active: StepDist::Poisson { mean: 400.0 },
            connectivity_gap_rate: 0.002,
            connectivity_gap: RunDist::Geometric { mean: 24.0 },
            dnd_windows: Vec::new(),
            day_skip_prob: 0.1,
        }
    }
}

impl BehaviorParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sedentary_run.validate("behavior.sedentary_run")?;
        self.active_run.validate("behavior.active_run")?;
        self.connectivity_gap.validate("behavior.connectivity_gap")?;
        self.steps_sedentary.validate("behavior.steps_sedentary")?;
        self.steps_active.validate("behavior.steps_active")?;
        for (key, p) in [
            ("behavior.connectivity_gap_rate", self.connectivity_gap_rate),
            ("behavior.day_skip_prob", self.day_skip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::new(key, "must lie in [0, 1]"));
            }
        }
        for (i, w) in self.dnd_windows.iter().enumerate() {
            if w.start > w.end {
                return Err(ConfigError::new(alloc::format!("behavior.dnd_windows[{i}]"), "start after end"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub n_participants: u32,
    pub n_days: u32,
    pub seed: u64,
    pub params: BehaviorParams,
    pub trial: TrialConfig,
}

impl SimConfig {
    pub fn new(n_participants: u32, n_days: u32, seed: u64) -> Self {
        SimConfig {
            n_participants,
            n_days,
            seed,
            params: BehaviorParams::default(),
            trial: TrialConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_participants == 0 {
            return Err(ConfigError::new("cohort.n_participants", "must be at least 1"));
        }
        if self.n_days == 0 {
            return Err(ConfigError::new("cohort.n_days", "must be at least 1"));
        }
        self.trial.validate()?;
        self.params.validate()
    }
}

/// Sensor record for one participant-day, with enough history before the first decision time.
pub fn gen_recording(sim: &SimConfig, participant: u32, day: u32) -> DayRecording {
    let p = &sim.params;
    let trial = &sim.trial;
    let mut rng = stream(sim.seed, Purpose::Behavior, participant, day);
    let origin = trial.history_intervals();
    let len = origin + trial.decision_times_per_day();

    let skip = bernoulli(&mut rng, p.day_skip_prob);
    let mut steps = Vec::with_capacity(len);
    let (ms, ma) = (p.sedentary_run.mean(), p.active_run.mean());
    let mut sedentary = bernoulli(&mut rng, ms / (ms + ma));
    while steps.len() < len {
        let run = if sedentary { p.sedentary_run.sample(&mut rng) } else { p.active_run.sample(&mut rng) };
        let dist = if sedentary { p.steps_sedentary } else { p.steps_active };
        for _ in 0..run.min((len - steps.len()) as u32) {
            steps.push(dist.sample(&mut rng));
        }
        sedentary = !sedentary;
    }

    let mut connected = vec![true; len];
    let mut i = 0;
    while i < len {
        if bernoulli(&mut rng, p.connectivity_gap_rate) {
            let gap = p.connectivity_gap.sample(&mut rng) as usize;
            let end = (i + gap).min(len);
            connected[i..end].fill(false);
            i = end;
        } else {
            i += 1;
        }
    }
    if skip {
        connected.fill(false);
    }
    for (s, &c) in steps.iter_mut().zip(&connected) {
        if !c {
            *s = 0;
        }
    }

    DayRecording { steps, connected, origin, dnd: p.dnd_windows.clone() }
}

/// Pre-decision trace: no notifications, no probabilities or actions.
pub fn gen_trace(sim: &SimConfig, participant: u32, day: u32) -> ParticipantTrace {
    let rec = gen_recording(sim, participant, day);
    trace_from_recording(&rec, &sim.trial, participant, day)
}

pub fn trace_from_recording(rec: &DayRecording, trial: &TrialConfig, participant: u32, day: u32) -> ParticipantTrace {
    ParticipantTrace {
        participant_id: participant,
        day,
        records: (0..trial.decision_times_per_day()).map(|t| derive_record(rec, &[], t, trial)).collect(),
    }
}

/// Completed day plus per-decision-time sampler records.
#[derive(Clone, Debug)]
pub struct DayOutcome {
    pub trace: ParticipantTrace,
    pub steps: Vec<StepRecord>,
}

/// Sweep the day in order, re-deriving the lockout criterion from realized
/// actions when `lockout` is set, and invoke the sampler at every decision time.
///
/// The sampler sees the lockout-free risk count of each block and the
/// lockout-free remaining risk count at each time; honest samplers ignore both.
pub fn run_day<S: Sampler + ?Sized>(
    input: &ParticipantTrace,
    sampler: &mut S,
    trial: &TrialConfig,
    rng: &mut dyn RngCore,
    lockout: bool,
) -> DayOutcome {
    let mut trace = input.without_decisions();
    let base_risk = input.risk();
    let foresight = block_remaining_risk(&base_risk, trial);
    let mut treated: Vec<usize> = Vec::new();
    let mut steps = Vec::with_capacity(trace.len());

    for j in 1..=trial.blocks_per_day {
        let range = trial.block_range(j);
        sampler.begin_block(j, base_risk[range.clone()].iter().filter(|&&x| x).count());
        let mut run = 0u32;
        for t in range {
            let rec = &mut trace.records[t];
            if lockout {
                let mut flags = rec.flags;
                flags.not_locked_out = !locked_out(&treated, t, trial.lockout_intervals);
                rec.set_flags(flags);
            }
            run = if rec.risk { run + 1 } else { 0 };
            let q = RiskQuery::new(trial, t, run, foresight[t]);
            let step = sampler.step(rec.risk, &q, rng);
            if rec.risk {
                rec.prob = Some(step.prob);
                rec.action = Some(step.action);
                if step.action {
                    treated.push(t);
                }
            }
            steps.push(step);
        }
    }
    DayOutcome { trace, steps }
}

/// Partial risk imputed by filling availability in the hour after each treatment.
pub fn impute_method1(trace: &ParticipantTrace, trial: &TrialConfig) -> Vec<bool> {
    let treated: Vec<usize> = (0..trace.len()).filter(|&t| trace.records[t].treated()).collect();
    trace
        .records
        .iter()
        .enumerate()
        .map(|(t, r)| r.sedentary && (r.available || locked_out(&treated, t, trial.lockout_intervals)))
        .collect()
}

/// Partial risk imputed as the sedentary indicator itself.
pub fn impute_method2(trace: &ParticipantTrace) -> Vec<bool> {
    trace.sedentary()
}

/// Partial risk from the three recorded non-lockout criteria.
pub fn partial_risk(trace: &ParticipantTrace) -> Vec<bool> {
    trace.records.iter().map(|r| r.sedentary && r.flags.partial()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("sequence lengths differ: {0} vs {1}")]
pub struct LengthMismatch(pub usize, pub usize);

/// Fraction of positions where the imputed indicator disagrees with the truth.
pub fn imputation_error(imputed: &[bool], truth: &[bool]) -> Result<f64, LengthMismatch> {
    if imputed.len() != truth.len() {
        return Err(LengthMismatch(imputed.len(), truth.len()));
    }
    if imputed.is_empty() {
        return Ok(0.0);
    }
    let wrong = imputed.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / imputed.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{FixedProbSampler, OracleSampler};
    use crate::trial::{AvailabilityFlags, DecisionRecord};

    /// Forces a treatment at chosen risk times.
    struct Forced(Vec<usize>);
    impl Sampler for Forced {
        fn begin_block(&mut self, _: usize, _: usize) {}
        fn step(&mut self, is_risk: bool, q: &RiskQuery, _rng: &mut dyn RngCore) -> StepRecord {
            let mut s = StepRecord::idle(q, is_risk);
            if is_risk && self.0.contains(&q.t) {
                s.prob = 1.0;
                s.action = true;
            }
            s
        }
    }

    fn all_risk(trial: &TrialConfig) -> ParticipantTrace {
        ParticipantTrace {
            participant_id: 0,
            day: 0,
            records: vec![DecisionRecord::new(0, true, AvailabilityFlags::ALL); trial.decision_times_per_day()],
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let sim = SimConfig::new(3, 3, 42);
        assert_eq!(gen_trace(&sim, 1, 2), gen_trace(&sim, 1, 2));
        assert_ne!(gen_trace(&sim, 1, 2), gen_trace(&sim, 2, 2));
    }

    #[test]
    fn active_runs_trip_the_active_criterion() {
        let mut sim = SimConfig::new(1, 1, 1);
        sim.params.day_skip_prob = 0.0;
        sim.params.connectivity_gap_rate = 0.0;
        let trial = sim.trial.clone();
        let mut seen = 0;
        for d in 0..20 {
            let rec = gen_recording(&sim, 0, d);
            let tr = trace_from_recording(&rec, &trial, 0, d);
            for (t, r) in tr.records.iter().enumerate() {
                let end = rec.origin + t;
                let total: u32 = rec.steps[end - 24..end].iter().sum();
                assert_eq!(r.flags.not_active, total <= 2000);
                seen += (!r.flags.not_active) as usize;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn sedentary_regime_is_classified_sedentary() {
        let mut sim = SimConfig::new(1, 1, 9);
        sim.params.day_skip_prob = 0.0;
        sim.params.connectivity_gap_rate = 0.0;
        sim.params.sedentary_run = RunDist::Geometric { mean: 40.0 };
        let (mut inside, mut hits) = (0, 0);
        for d in 0..20 {
            let rec = gen_recording(&sim, 0, d);
            let tr = trace_from_recording(&rec, &sim.trial, 0, d);
            for t in 0..144 {
                let end = rec.origin + t;
                // a window of sedentary-regime intervals has all counts far below 150/8
                if rec.steps[end - 8..end].iter().all(|&s| s < 60) {
                    inside += 1;
                    hits += tr.records[t].sedentary as usize;
                }
            }
        }
        assert!(inside > 500);
        assert!(hits as f64 / inside as f64 > 0.99);
    }

    #[test]
    fn skipped_days_have_no_availability() {
        let mut sim = SimConfig::new(1, 1, 3);
        sim.params.day_skip_prob = 1.0;
        let tr = gen_trace(&sim, 0, 0);
        assert!(tr.records.iter().all(|r| !r.available && !r.risk));
    }

    #[test]
    fn zero_probability_sampler_leaves_trace() {
        let trial = TrialConfig::default();
        let input = gen_trace(&SimConfig::new(1, 1, 5), 0, 0);
        let mut s = Forced(Vec::new());
        let mut rng = stream(5, Purpose::Actions, 0, 0);
        let out = run_day(&input, &mut s, &trial, &mut rng, true);
        assert_eq!(out.trace.risk(), input.risk());
    }

    #[test]
    fn forced_treatment_locks_out_next_hour() {
        let trial = TrialConfig::default();
        let input = all_risk(&trial);
        let mut rng = stream(5, Purpose::Actions, 0, 0);
        let out = run_day(&input, &mut Forced(vec![10]), &trial, &mut rng, true);
        for t in 11..=22 {
            assert!(!out.trace.records[t].risk, "t={t}");
            assert!(!out.trace.records[t].flags.not_locked_out);
        }
        assert!(out.trace.records[23].risk);
        // lockout crosses the block boundary
        let out = run_day(&input, &mut Forced(vec![45]), &trial, &mut rng, true);
        assert!(!out.trace.records[50].risk);
        assert!(out.trace.records[58].risk);
        // disabled lockout keeps the input risk set
        let out = run_day(&input, &mut Forced(vec![10]), &trial, &mut rng, false);
        assert_eq!(out.trace.risk(), input.risk());
    }

    #[test]
    fn lockout_spacing_holds_for_random_sampler() {
        let trial = TrialConfig::default();
        let input = all_risk(&trial);
        let mut rng = stream(8, Purpose::Actions, 0, 0);
        let out = run_day(&input, &mut FixedProbSampler::new(0.6), &trial, &mut rng, true);
        let treated: Vec<usize> = (0..144).filter(|&t| out.trace.records[t].treated()).collect();
        assert!(treated.len() > 3);
        for w in treated.windows(2) {
            assert!(w[1] - w[0] > 12);
        }
    }

    #[test]
    fn oracle_without_lockout_sums_to_goal() {
        let trial = TrialConfig::default();
        let input = gen_trace(&SimConfig::new(1, 1, 11), 0, 0);
        let mut rng = stream(11, Purpose::Actions, 0, 0);
        let out = run_day(&input, &mut OracleSampler::new(0.5), &trial, &mut rng, false);
        for j in 1..=3 {
            let probs: Vec<f64> = trial.block_range(j).filter_map(|t| out.trace.records[t].prob).collect();
            if !probs.is_empty() {
                assert!((probs.iter().sum::<f64>() - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn imputation_examples() {
        let trial = TrialConfig::default();
        let input = gen_trace(&SimConfig::new(1, 1, 2), 0, 0);
        assert_eq!(impute_method1(&input, &trial), input.risk());

        let mut rng = stream(5, Purpose::Actions, 0, 0);
        let out = run_day(&all_risk(&trial), &mut Forced(vec![10]), &trial, &mut rng, true);
        let x1 = impute_method1(&out.trace, &trial);
        assert!((11..=22).all(|t| x1[t] && !out.trace.records[t].risk));
        for (a, b) in x1.iter().zip(out.trace.risk()) {
            assert!(*a || !b, "method 1 is a superset");
        }

        let mut tr = all_risk(&trial);
        tr.records[4].sedentary = false;
        tr.records[4].risk = false;
        let mut off = tr.records[7].flags;
        off.connected = false;
        tr.records[7].set_flags(off);
        let x2 = impute_method2(&tr);
        assert!(!x2[4] && x2[7] && !tr.records[7].risk);
        assert!(!partial_risk(&tr)[7]);
    }

    #[test]
    fn imputation_error_examples() {
        let a = vec![true, false, true];
        assert_eq!(imputation_error(&a, &a), Ok(0.0));
        let b: Vec<bool> = a.iter().map(|x| !x).collect();
        assert_eq!(imputation_error(&a, &b), Ok(1.0));
        let mut c = vec![false; 48];
        let d = c.clone();
        c[17] = true;
        assert!((imputation_error(&c, &d).unwrap() - 1.0 / 48.0).abs() < 1e-15);
        assert_eq!(imputation_error(&a, &d), Err(LengthMismatch(3, 48)));
    }

    #[test]
    fn config_validation_names_keys() {
        let mut sim = SimConfig::new(1, 1, 0);
        sim.params.day_skip_prob = 1.5;
        assert_eq!(sim.validate().unwrap_err().key, "behavior.day_skip_prob");
        sim.params.day_skip_prob = 0.1;
        sim.params.sedentary_run = RunDist::Geometric { mean: 0.5 };
        assert_eq!(sim.validate().unwrap_err().key, "behavior.sedentary_run.mean");
        let sim = SimConfig::new(0, 1, 0);
        assert_eq!(sim.validate().unwrap_err().key, "cohort.n_participants");
    }
}
