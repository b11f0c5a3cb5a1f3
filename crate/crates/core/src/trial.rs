//! Trial geometry, availability criteria and participant-day traces.
//!
//! Decision times are indexed from zero within a day. Block `j` (1-based)
//! covers `[(j-1)·T, j·T)` where `T` is the number of decision times per
//! block. Step counts and connectivity records are per *interval*; the
//! interval ending at decision time `t` is the last one considered when
//! classifying `t`.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::metrics::{ipp, LogBase};
use crate::sampler::FaultModel;

/// Which hour index is fed to the remaining-risk estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HourMode {
    /// Hour since the start of the day, `0..hours_per_day`.
    #[default]
    Day,
    /// Hour since the start of the current block.
    Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub decision_times_per_block: usize,
    pub blocks_per_day: usize,
    pub interval_minutes: u32,
    pub budget_goal_per_block: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub sedentary_step_threshold: u32,
    pub sedentary_window_intervals: usize,
    pub active_step_threshold: u32,
    pub active_window_intervals: usize,
    pub lockout_intervals: usize,
    pub ipp_exclusion_threshold: f64,
    pub hour_mode: HourMode,
    pub kl_log_base: LogBase,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            decision_times_per_block: 48,
            blocks_per_day: 3,
            interval_minutes: 5,
            budget_goal_per_block: 0.5,
            clip_lo: 0.005,
            clip_hi: 0.2,
            sedentary_step_threshold: 150,
            sedentary_window_intervals: 8,
            active_step_threshold: 2000,
            active_window_intervals: 24,
            lockout_intervals: 12,
            ipp_exclusion_threshold: 0.5,
            hour_mode: HourMode::Day,
            kl_log_base: LogBase::Natural,
        }
    }
}

/// A rejected configuration value, named by its dotted key path.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("{key}: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            key: key.into(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TrialError {
    #[error("decision time {t} outside the day (0..{len})")]
    OutOfRange { t: usize, len: usize },
    #[error("decision time {t} needs {needed} prior intervals, {have} recorded")]
    InsufficientHistory { t: usize, needed: usize, have: usize },
}

impl TrialConfig {
    pub fn decision_times_per_day(&self) -> usize {
        self.decision_times_per_block * self.blocks_per_day
    }

    pub fn intervals_per_hour(&self) -> usize {
        (60 / self.interval_minutes) as usize
    }

    pub fn hours_per_day(&self) -> usize {
        self.decision_times_per_day().div_ceil(self.intervals_per_hour())
    }

    /// Decision times of block `j` (1-based).
    pub fn block_range(&self, j: usize) -> Range<usize> {
        debug_assert!(j >= 1 && j <= self.blocks_per_day);
        let t = self.decision_times_per_block;
        (j - 1) * t..j * t
    }

    /// 1-based block containing decision time `t`.
    pub fn block_of(&self, t: usize) -> usize {
        t / self.decision_times_per_block + 1
    }

    pub fn unit_range(&self, unit: Unit) -> Range<usize> {
        match unit {
            Unit::Day => 0..self.decision_times_per_day(),
            Unit::Block(j) => self.block_range(j as usize),
        }
    }

    pub fn units(&self) -> impl Iterator<Item = Unit> {
        core::iter::once(Unit::Day).chain((1..=self.blocks_per_day).map(|j| Unit::Block(j as u8)))
    }

    /// Hour index within the day for decision time `t`.
    pub fn hour_index(&self, t: usize) -> Result<usize, TrialError> {
        let len = self.decision_times_per_day();
        if t >= len {
            return Err(TrialError::OutOfRange { t, len });
        }
        Ok(t / self.intervals_per_hour())
    }

    /// Hour index handed to the estimator, per [`HourMode`].
    pub fn estimator_hour(&self, t: usize) -> Result<usize, TrialError> {
        let day_hour = self.hour_index(t)?;
        Ok(match self.hour_mode {
            HourMode::Day => day_hour,
            HourMode::Block => (t % self.decision_times_per_block) / self.intervals_per_hour(),
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let k = |f: &str| alloc::format!("trial.{f}");
        if self.decision_times_per_block == 0 {
            return Err(ConfigError::new(k("decision_times_per_block"), "must be at least 1"));
        }
        if self.blocks_per_day == 0 {
            return Err(ConfigError::new(k("blocks_per_day"), "must be at least 1"));
        }
        if self.interval_minutes == 0 || 60 % self.interval_minutes != 0 {
            return Err(ConfigError::new(k("interval_minutes"), "must divide 60"));
        }
        if self.budget_goal_per_block.is_nan() || self.budget_goal_per_block <= 0.0 {
            return Err(ConfigError::new(k("budget_goal_per_block"), "must be positive"));
        }
        if !(self.clip_lo > 0.0 && self.clip_lo < 1.0) {
            return Err(ConfigError::new(k("clip_lo"), "must lie in (0, 1)"));
        }
        if !(self.clip_hi > self.clip_lo && self.clip_hi < 1.0) {
            return Err(ConfigError::new(k("clip_hi"), "must lie in (clip_lo, 1)"));
        }
        for (name, w) in [
            ("sedentary_window_intervals", self.sedentary_window_intervals),
            ("active_window_intervals", self.active_window_intervals),
            ("lockout_intervals", self.lockout_intervals),
        ] {
            if w == 0 {
                return Err(ConfigError::new(k(name), "must be at least 1"));
            }
        }
        if !(self.ipp_exclusion_threshold > 0.0 && self.ipp_exclusion_threshold <= 1.0) {
            return Err(ConfigError::new(k("ipp_exclusion_threshold"), "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Longest trailing window any criterion looks at.
    pub fn history_intervals(&self) -> usize {
        self.sedentary_window_intervals.max(self.active_window_intervals)
    }
}

/// An evaluation unit of one participant-day.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Unit {
    Day,
    /// 1-based block number.
    Block(u8),
}

impl Unit {
    /// Column value used in metrics files: 0 for the whole day, else the block number.
    pub fn code(self) -> u8 {
        match self {
            Unit::Day => 0,
            Unit::Block(j) => j,
        }
    }

    pub fn from_code(code: u8) -> Unit {
        if code == 0 {
            Unit::Day
        } else {
            Unit::Block(code)
        }
    }
}

/// The four availability criteria, kept separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityFlags {
    /// Not more than the active-step threshold in the trailing active window.
    pub not_active: bool,
    /// The device reported at least once in the trailing sedentary window.
    pub connected: bool,
    /// No notification within the lockout window.
    pub not_locked_out: bool,
    /// Outside every do-not-disturb window.
    pub not_dnd: bool,
}

impl AvailabilityFlags {
    pub const ALL: AvailabilityFlags = AvailabilityFlags {
        not_active: true,
        connected: true,
        not_locked_out: true,
        not_dnd: true,
    };

    /// Combined availability `I_t`.
    pub fn all(&self) -> bool {
        self.not_active && self.connected && self.not_locked_out && self.not_dnd
    }

    /// Availability ignoring the notification lockout.
    pub fn partial(&self) -> bool {
        self.not_active && self.connected && self.not_dnd
    }
}

/// Half-open range of decision times during which the participant asked not to be disturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DndWindow {
    pub start: usize,
    pub end: usize,
}

impl DndWindow {
    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }
}

/// Raw per-interval sensor data for one participant-day.
///
/// `steps[origin + t - 1]` is the interval ending at decision time `t`;
/// `origin` intervals of history precede the first decision time.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DayRecording {
    pub steps: Vec<u32>,
    pub connected: Vec<bool>,
    pub origin: usize,
    pub dnd: Vec<DndWindow>,
}

impl DayRecording {
    /// Trailing `w` intervals before decision time `t`, or `None` if they
    /// extend before the first recorded interval.
    fn window(&self, t: usize, w: usize) -> Option<Range<usize>> {
        let end = self.origin + t;
        if end < w || end > self.steps.len() {
            return None;
        }
        Some(end - w..end)
    }

    /// Decision-time step count: steps in the interval ending at `t`.
    pub fn steps_at(&self, t: usize) -> u32 {
        let idx = self.origin + t;
        if idx == 0 {
            0
        } else {
            self.steps.get(idx - 1).copied().unwrap_or(0)
        }
    }
}

/// Sedentary classification: strictly fewer than the threshold steps over the trailing window.
pub fn derive_sedentary(rec: &DayRecording, t: usize, cfg: &TrialConfig) -> Result<bool, TrialError> {
    let w = cfg.sedentary_window_intervals;
    let win = rec.window(t, w).ok_or(TrialError::InsufficientHistory {
        t,
        needed: w,
        have: (rec.origin + t).min(rec.steps.len()),
    })?;
    let total: u64 = rec.steps[win].iter().map(|&s| s as u64).sum();
    Ok(total < cfg.sedentary_step_threshold as u64)
}

/// True if a notification sent at some `s < t` still locks out `t`.
pub fn locked_out(notifications: &[usize], t: usize, lockout_intervals: usize) -> bool {
    notifications.iter().any(|&s| s < t && t - s <= lockout_intervals)
}

/// Evaluate the four availability criteria at decision time `t`.
///
/// Missing connectivity history counts as disconnected. The active criterion
/// sums whatever part of its window was recorded.
pub fn derive_availability(
    rec: &DayRecording,
    notifications: &[usize],
    t: usize,
    cfg: &TrialConfig,
) -> AvailabilityFlags {
    let end = (rec.origin + t).min(rec.steps.len());
    let start = end.saturating_sub(cfg.active_window_intervals);
    let active_steps: u64 = rec.steps[start..end].iter().map(|&s| s as u64).sum();

    let connected = match rec.window(t, cfg.sedentary_window_intervals) {
        Some(win) => rec.connected.get(win).is_some_and(|c| c.iter().any(|&c| c)),
        None => false,
    };

    AvailabilityFlags {
        not_active: active_steps <= cfg.active_step_threshold as u64,
        connected,
        not_locked_out: !locked_out(notifications, t, cfg.lockout_intervals),
        not_dnd: !rec.dnd.iter().any(|w| w.contains(t)),
    }
}

/// One decision time of a participant-day trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecisionRecord {
    pub steps: u32,
    pub sedentary: bool,
    pub flags: AvailabilityFlags,
    pub available: bool,
    pub risk: bool,
    pub prob: Option<f64>,
    pub action: Option<bool>,
}

impl DecisionRecord {
    /// Build a pre-decision record, keeping `available` and `risk` consistent with the flags.
    pub fn new(steps: u32, sedentary: bool, flags: AvailabilityFlags) -> Self {
        let available = flags.all();
        DecisionRecord {
            steps,
            sedentary,
            flags,
            available,
            risk: sedentary && available,
            prob: None,
            action: None,
        }
    }

    pub fn set_flags(&mut self, flags: AvailabilityFlags) {
        self.flags = flags;
        self.available = flags.all();
        self.risk = self.sedentary && self.available;
    }

    pub fn treated(&self) -> bool {
        self.action == Some(true)
    }
}

/// Derive the full record at `t`. Decision times without enough sensor
/// history are marked disconnected and not sedentary.
pub fn derive_record(rec: &DayRecording, notifications: &[usize], t: usize, cfg: &TrialConfig) -> DecisionRecord {
    let mut flags = derive_availability(rec, notifications, t, cfg);
    let sedentary = match derive_sedentary(rec, t, cfg) {
        Ok(b) => b,
        Err(_) => {
            flags.connected = false;
            false
        }
    };
    DecisionRecord::new(rec.steps_at(t), sedentary, flags)
}

/// Risk run lengths: zero off-risk, otherwise one more than the previous value.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RunLengthSequence(pub Vec<u32>);

pub fn run_length(risk: &[bool]) -> RunLengthSequence {
    let mut prev = 0u32;
    RunLengthSequence(
        risk.iter()
            .map(|&x| {
                prev = if x { prev + 1 } else { 0 };
                prev
            })
            .collect(),
    )
}

/// All decision records of one participant on one day.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantTrace {
    pub participant_id: u32,
    pub day: u32,
    pub records: Vec<DecisionRecord>,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum TraceError {
    #[error("participant {participant} day {day}: {len} decision times, expected {expected}")]
    WrongLength { participant: u32, day: u32, len: usize, expected: usize },
    #[error("participant {participant} day {day} t={t}: available does not match the availability flags")]
    AvailabilityMismatch { participant: u32, day: u32, t: usize },
    #[error("participant {participant} day {day} t={t}: risk must equal sedentary AND available")]
    RiskMismatch { participant: u32, day: u32, t: usize },
    #[error("participant {participant} day {day} t={t}: probability recorded at a non-risk time")]
    ProbWithoutRisk { participant: u32, day: u32, t: usize },
    #[error("participant {participant} day {day} t={t}: action recorded without a probability")]
    ActionWithoutProb { participant: u32, day: u32, t: usize },
    #[error("participant {participant} day {day} t={t}: probability {prob} outside [0, 1]")]
    ProbOutOfRange { participant: u32, day: u32, t: usize, prob: f64 },
}

/// Tolerated inconsistencies, reported to the caller.
#[derive(Clone, Debug, PartialEq)]
pub enum TraceWarning {
    ProbOutsideClip { participant: u32, day: u32, t: usize, prob: f64 },
}

impl ParticipantTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn risk(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.risk).collect()
    }

    pub fn sedentary(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.sedentary).collect()
    }

    pub fn any_available(&self, range: Range<usize>) -> bool {
        self.records[range].iter().any(|r| r.available)
    }

    /// Drop decisions, returning the trace to its pre-decision form.
    pub fn without_decisions(&self) -> ParticipantTrace {
        let mut out = self.clone();
        for r in &mut out.records {
            r.prob = None;
            r.action = None;
        }
        out
    }

    /// Check the structural invariants. Probabilities outside the clip bounds are
    /// warnings, since traces produced under faults may legitimately contain them.
    pub fn validate(&self, cfg: &TrialConfig) -> Result<Vec<TraceWarning>, TraceError> {
        let (participant, day) = (self.participant_id, self.day);
        let expected = cfg.decision_times_per_day();
        if self.records.len() != expected {
            return Err(TraceError::WrongLength { participant, day, len: self.records.len(), expected });
        }
        let mut warnings = Vec::new();
        for (t, r) in self.records.iter().enumerate() {
            if r.available != r.flags.all() {
                return Err(TraceError::AvailabilityMismatch { participant, day, t });
            }
            if r.risk != (r.sedentary && r.available) {
                return Err(TraceError::RiskMismatch { participant, day, t });
            }
            if let Some(p) = r.prob {
                if !r.risk {
                    return Err(TraceError::ProbWithoutRisk { participant, day, t });
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(TraceError::ProbOutOfRange { participant, day, t, prob: p });
                }
                if p < cfg.clip_lo || p > cfg.clip_hi {
                    warnings.push(TraceWarning::ProbOutsideClip { participant, day, t, prob: p });
                }
            } else if r.action.is_some() {
                return Err(TraceError::ActionWithoutProb { participant, day, t });
            }
        }
        Ok(warnings)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnitKey {
    pub participant_id: u32,
    pub day: u32,
    pub unit: Unit,
}

/// Evaluation units retained after applying the inclusion rules.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Selection {
    pub units: BTreeSet<UnitKey>,
}

impl Selection {
    pub fn contains(&self, participant_id: u32, day: u32, unit: Unit) -> bool {
        self.units.contains(&UnitKey { participant_id, day, unit })
    }

    pub fn count(&self, unit: Unit) -> usize {
        self.units.iter().filter(|k| k.unit == unit).count()
    }
}

/// Days with any available decision time, and blocks with any available
/// decision time whose invalid-parameter proportion is below the threshold.
pub fn select_units(traces: &[ParticipantTrace], cfg: &TrialConfig, fault: Option<&FaultModel>) -> Selection {
    let mut units = BTreeSet::new();
    for tr in traces {
        let key = |unit| UnitKey { participant_id: tr.participant_id, day: tr.day, unit };
        if tr.any_available(0..tr.len()) {
            units.insert(key(Unit::Day));
        }
        for j in 1..=cfg.blocks_per_day {
            let range = cfg.block_range(j);
            if !tr.any_available(range.clone()) {
                continue;
            }
            let impacted = fault.map_or(0, |f| f.impacted_risk_times(tr, range, cfg));
            if ipp(impacted, cfg.decision_times_per_block) < cfg.ipp_exclusion_threshold {
                units.insert(key(Unit::Block(j as u8)));
            }
        }
    }
    Selection { units }
}
