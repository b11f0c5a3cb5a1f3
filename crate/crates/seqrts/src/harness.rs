//! Cohort simulation, evaluation, N̂₀ tuning and the oracle comparison.
//!
//! Participant-days are simulated in parallel; results are always collected
//! in (participant, day) order so output does not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use seqrts_core::ghat::{GHatError, GHatModel, HorizonMode, PerfectForesight, RemainingRiskEstimator, RiskQuery};
use seqrts_core::metrics::{self, BlockMetrics, Estimate, MetricError, Summary};
use seqrts_core::rng::{derive_seed, stream, Purpose};
use seqrts_core::sampler::{
    ClipBounds, FaultModel, FixedProbSampler, OracleSampler, Sampler, SeqRtsConfig, SeqRtsSampler, StepRecord,
};
use seqrts_core::sim::{gen_trace, run_day, DayOutcome, SimConfig};
use seqrts_core::trial::{locked_out, select_units, ParticipantTrace, Selection, TrialConfig, Unit};

use crate::model_io::{FitMetadata, ModelDocument};

/// Student-t critical value for a two-sided 95% interval.
pub fn t_critical(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df.max(1) as f64).expect("valid t distribution").inverse_cdf(0.975)
}

pub enum Estimator {
    Model(GHatModel),
    Foresight,
}

impl RemainingRiskEstimator for Estimator {
    fn estimate(&self, q: &RiskQuery) -> f64 {
        match self {
            Estimator::Model(m) => m.estimate(q),
            Estimator::Foresight => PerfectForesight.estimate(q),
        }
    }
}

#[derive(Clone, Copy)]
pub enum SamplerSpec<'a> {
    SeqRts { cfg: SeqRtsConfig, estimator: &'a Estimator },
    Oracle { goal: f64 },
    Fixed { p: f64 },
}

impl<'a> SamplerSpec<'a> {
    pub fn seqrts(n0_hat: f64, trial: &TrialConfig, clip: bool, fault: Option<FaultModel>, estimator: &'a Estimator) -> Self {
        let cfg = SeqRtsConfig { n0_hat, clip: clip.then(|| ClipBounds::from_trial(trial)), fault };
        SamplerSpec::SeqRts { cfg, estimator }
    }

    pub fn build(&self) -> Box<dyn Sampler + 'a> {
        match *self {
            SamplerSpec::SeqRts { cfg, estimator } => Box::new(SeqRtsSampler::new(cfg, estimator)),
            SamplerSpec::Oracle { goal } => Box::new(OracleSampler::new(goal)),
            SamplerSpec::Fixed { p } => Box::new(FixedProbSampler::new(p)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplerSpec::SeqRts { .. } => "seqrts",
            SamplerSpec::Oracle { .. } => "oracle",
            SamplerSpec::Fixed { .. } => "fixed",
        }
    }
}

/// Pre-decision traces of a cohort, ordered by participant then day (both 1-based).
pub fn cohort_traces(sim: &SimConfig) -> Vec<ParticipantTrace> {
    let keys: Vec<(u32, u32)> =
        (1..=sim.n_participants).flat_map(|i| (1..=sim.n_days).map(move |d| (i, d))).collect();
    keys.par_iter().map(|&(i, d)| gen_trace(sim, i, d)).collect()
}

/// Run one sampler over pre-decision traces. Action draws come from the
/// per-day stream of `seed`, so samplers run with the same seed are paired.
pub fn run_cohort(
    pre: &[ParticipantTrace],
    spec: &SamplerSpec,
    trial: &TrialConfig,
    seed: u64,
    lockout: bool,
) -> Vec<DayOutcome> {
    pre.par_iter()
        .map(|tr| {
            let mut rng = stream(seed, Purpose::Actions, tr.participant_id, tr.day);
            let mut sampler = spec.build();
            run_day(tr, &mut *sampler, trial, &mut rng, lockout)
        })
        .collect()
}

pub fn history_traces(sim: &SimConfig) -> Vec<ParticipantTrace> {
    cohort_traces(sim)
}

pub fn fit_model(
    traces: &[ParticipantTrace],
    trial: &TrialConfig,
    mode: HorizonMode,
    seed: Option<u64>,
    source: &str,
) -> Result<ModelDocument, GHatError> {
    let model = GHatModel::fit(traces, trial, mode)?;
    Ok(ModelDocument {
        metadata: FitMetadata {
            participant_days: traces.len(),
            runs: seqrts_core::ghat::sedentary_runs(traces).len(),
            seed,
            source: source.to_string(),
        },
        model,
    })
}

/// Counts from a successful invariant sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InvariantStats {
    pub risk_times: usize,
    pub blocks_checked: usize,
}

/// Hard checks over simulated outcomes: clip bounds and budget accounting
/// for budget samplers, lockout spacing, and the Hellinger lower bound.
pub fn check_invariants(
    outcomes: &[DayOutcome],
    spec: &SamplerSpec,
    trial: &TrialConfig,
    lockout: bool,
) -> Result<InvariantStats, String> {
    let mut stats = InvariantStats::default();
    for out in outcomes {
        let tr = &out.trace;
        let at = |t: usize| format!("participant {} day {} t={t}", tr.participant_id, tr.day);
        if lockout {
            let treated: Vec<usize> = (0..tr.len()).filter(|&t| tr.records[t].treated()).collect();
            if let Some(w) = treated.windows(2).find(|w| locked_out(&w[..1], w[1], trial.lockout_intervals)) {
                return Err(format!("{}: treated inside the lockout of t={}", at(w[1]), w[0]));
            }
        }
        if let SamplerSpec::SeqRts { cfg, .. } = spec {
            for j in 1..=trial.blocks_per_day {
                check_budget(&out.steps[trial.block_range(j)], cfg).map_err(|(t, m)| format!("{}: {m}", at(t)))?;
            }
        }
        for j in 1..=trial.blocks_per_day {
            let range = trial.block_range(j);
            let probs: Vec<f64> = tr.records[range.clone()].iter().filter_map(|r| r.prob).collect();
            if probs.is_empty() {
                continue;
            }
            let n = tr.records[range.clone()].iter().filter(|r| r.risk).count();
            stats.risk_times += n;
            stats.blocks_checked += 1;
            let ok = metrics::hellinger_bound_check(&probs, n, trial.budget_goal_per_block, range.len())
                .map_err(|e| format!("{}: {e}", at(range.start)))?;
            if !ok {
                return Err(format!("{}: Hellinger lower bound violated in block {j}", at(range.start)));
            }
        }
    }
    Ok(stats)
}

fn check_budget(steps: &[StepRecord], cfg: &SeqRtsConfig) -> Result<(), (usize, String)> {
    let floor = cfg.clip.map_or(0.0, |c| c.lo);
    let (mut sum, mut comp, mut k) = (0.0f64, 0.0f64, 0usize);
    for s in steps.iter().filter(|s| s.risk) {
        if let Some(c) = cfg.clip {
            if !(c.lo..=c.hi).contains(&s.prob) {
                return Err((s.t, format!("probability {} outside [{}, {}]", s.prob, c.lo, c.hi)));
            }
        }
        // Kahan summation as an independent reference for the running budget
        let y = s.prob - comp;
        let next = sum + y;
        comp = (next - sum) - y;
        sum = next;
        k += 1;
        let spent = s.spent.ok_or((s.t, "budget sampler did not report spent budget".to_string()))?;
        if (spent - sum).abs() > 1e-12 {
            return Err((s.t, format!("spent budget {spent} differs from the probability sum {sum}")));
        }
        if spent > cfg.n0_hat + floor * k as f64 + 1e-12 {
            return Err((s.t, format!("spent budget {spent} exceeds n0_hat plus the floor allowance")));
        }
    }
    Ok(())
}

/// Metrics of a set of completed traces.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub selection: Selection,
    pub metrics: Vec<BlockMetrics>,
    pub summary: Summary,
}

pub fn evaluate(traces: &[ParticipantTrace], trial: &TrialConfig, fault: Option<&FaultModel>) -> Result<Evaluation, MetricError> {
    let selection = select_units(traces, trial, fault);
    let metrics = metrics::evaluate(traces, &selection, trial, fault)?;
    let summary = metrics::aggregate(&metrics, trial, &t_critical);
    Ok(Evaluation { selection, metrics, summary })
}

/// Metrics of the blocks that count toward the treatment budget: included by
/// the selection rules and holding at least one lockout-free risk time.
pub fn budget_blocks(
    pre: &[ParticipantTrace],
    outcomes: &[DayOutcome],
    trial: &TrialConfig,
    fault: Option<&FaultModel>,
) -> Result<Vec<BlockMetrics>, MetricError> {
    let done: Vec<ParticipantTrace> = outcomes.iter().map(|o| o.trace.clone()).collect();
    let selection = select_units(&done, trial, fault);
    let mut out = Vec::new();
    for (p, tr) in pre.iter().zip(&done) {
        for j in 1..=trial.blocks_per_day {
            let unit = Unit::Block(j as u8);
            let has_risk = p.records[trial.block_range(j)].iter().any(|r| r.risk);
            if has_risk && selection.contains(tr.participant_id, tr.day, unit) {
                out.push(metrics::unit_metrics(tr, unit, trial, fault)?);
            }
        }
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunePoint {
    pub n0_hat: f64,
    pub mean_block_y: f64,
    pub mean_kl: Option<f64>,
    pub mean_mad: Option<f64>,
    pub n_blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub best_n0_hat: f64,
    pub points: Vec<TunePoint>,
    /// Grid values without any budget block.
    pub skipped: Vec<f64>,
}

pub struct TuneSetup<'a> {
    pub sim: &'a SimConfig,
    pub grid: &'a [f64],
    pub estimator: &'a Estimator,
    pub clip: bool,
    pub fault: Option<FaultModel>,
    pub lockout: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum TuneError {
    #[error("no grid value produced any budget block")]
    NoUnits,
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Grid search for N̂₀: closest mean block treatment count to the goal, then
/// lowest mean KL, then the smallest value. Every grid value sees the same
/// behavior traces and action streams.
pub fn tune_n0(setup: &TuneSetup) -> Result<TuneReport, TuneError> {
    let trial = &setup.sim.trial;
    let fault = setup.fault.as_ref();
    let pre = cohort_traces(setup.sim);
    let results: Vec<Result<Option<TunePoint>, MetricError>> = setup
        .grid
        .par_iter()
        .map(|&n0| {
            let spec = SamplerSpec::seqrts(n0, trial, setup.clip, setup.fault, setup.estimator);
            let outcomes = run_cohort(&pre, &spec, trial, setup.sim.seed, setup.lockout);
            let blocks = budget_blocks(&pre, &outcomes, trial, fault)?;
            Ok(mean(blocks.iter().map(|b| b.y as f64)).map(|y| TunePoint {
                n0_hat: n0,
                mean_block_y: y,
                mean_kl: mean(blocks.iter().filter_map(|b| b.kl)),
                mean_mad: mean(blocks.iter().filter_map(|b| b.mad)),
                n_blocks: blocks.len(),
            }))
        })
        .collect();

    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (&n0, r) in setup.grid.iter().zip(results) {
        match r? {
            Some(p) => points.push(p),
            None => {
                log::warn!("n0_hat = {n0}: no budget blocks, skipped");
                skipped.push(n0);
            }
        }
    }
    let goal = trial.budget_goal_per_block;
    let best = points
        .iter()
        .min_by(|a, b| {
            let key = |p: &TunePoint| ((p.mean_block_y - goal).abs(), p.mean_kl.unwrap_or(f64::INFINITY), p.n0_hat);
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
        })
        .ok_or(TuneError::NoUnits)?;
    Ok(TuneReport { best_n0_hat: best.n0_hat, points, skipped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitComparison {
    /// Block number, or 0 for all blocks pooled.
    pub block: u8,
    pub treatments: Option<Estimate>,
    pub mad: Option<Estimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerComparison {
    pub sampler: String,
    pub n0_hat: Option<f64>,
    pub units: Vec<UnitComparison>,
}

impl SamplerComparison {
    pub fn pooled(&self) -> &UnitComparison {
        self.units.iter().find(|u| u.block == 0).expect("pooled row present")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub replications: u32,
    pub participant_days: usize,
    pub lockout: bool,
    pub samplers: Vec<SamplerComparison>,
}

pub struct CompareSetup<'a> {
    pub sim: &'a SimConfig,
    pub replications: u32,
    pub n0_hat: f64,
    pub estimator: &'a Estimator,
    pub clip: bool,
    pub fault: Option<FaultModel>,
    pub lockout: bool,
}

/// Oracle against SeqRTS on identical behavior traces and paired action
/// streams. Intervals treat each (replication, participant) as a cluster.
pub fn compare_oracle_vs_seqrts(setup: &CompareSetup) -> Result<CompareReport, MetricError> {
    let trial = &setup.sim.trial;
    let fault = setup.fault.as_ref();
    let specs = [
        SamplerSpec::Oracle { goal: trial.budget_goal_per_block },
        SamplerSpec::seqrts(setup.n0_hat, trial, setup.clip, setup.fault, setup.estimator),
    ];
    let mut rows: Vec<Vec<BlockMetrics>> = vec![Vec::new(); specs.len()];
    let mut participant_days = 0;
    for rep in 0..setup.replications {
        let sim = SimConfig { seed: derive_seed(setup.sim.seed, rep as u64), ..setup.sim.clone() };
        let pre = cohort_traces(&sim);
        participant_days += pre.len();
        for (k, spec) in specs.iter().enumerate() {
            let outcomes = run_cohort(&pre, spec, trial, sim.seed, setup.lockout);
            for mut b in budget_blocks(&pre, &outcomes, trial, fault)? {
                b.participant_id += rep * setup.sim.n_participants;
                rows[k].push(b);
            }
        }
    }
    let samplers = specs
        .iter()
        .zip(rows)
        .map(|(spec, blocks)| {
            let stat = |block: u8| {
                let sel: Vec<&BlockMetrics> =
                    blocks.iter().filter(|b| block == 0 || b.unit == Unit::Block(block)).collect();
                let y: Vec<(u32, f64)> = sel.iter().map(|b| (b.participant_id, b.y as f64)).collect();
                let mad: Vec<(u32, f64)> = sel.iter().filter_map(|b| b.mad.map(|m| (b.participant_id, m))).collect();
                UnitComparison {
                    block,
                    treatments: Estimate::from_pairs(&y, &t_critical),
                    mad: Estimate::from_pairs(&mad, &t_critical),
                }
            };
            SamplerComparison {
                sampler: spec.name().to_string(),
                n0_hat: matches!(spec, SamplerSpec::SeqRts { .. }).then_some(setup.n0_hat),
                units: std::iter::once(0).chain(1..=trial.blocks_per_day as u8).map(stat).collect(),
            }
        })
        .collect();
    Ok(CompareReport { replications: setup.replications, participant_days, lockout: setup.lockout, samplers })
}
