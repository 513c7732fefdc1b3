//! Server-side block freezing: effective movement of the active block over a
//! window of aggregation rounds, a least-squares trend of that series, and a
//! consecutive-hit rule on the trend's slope.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FreezeError {
    #[error("warming up: {have} of {need} snapshots buffered")]
    WarmingUp { have: usize, need: usize },
    #[error("parameter layout changed within a step ({expected} → {got} scalars)")]
    LayoutChanged { expected: usize, got: usize },
    #[error("slope needs at least two points with distinct round indices")]
    DegenerateSeries,
}

/// Effective movement of a set of scalars given their per-round updates
/// `updates[h][s]`: `Σ_s |Σ_h ε_s| / Σ_s Σ_h |ε_s|`, or 0 when nothing moved.
pub fn effective_movement_of_updates<U: AsRef<[f64]>>(updates: &[U]) -> f64 {
    let Some(first) = updates.first() else {
        return 0.0;
    };
    let n = first.as_ref().len();
    let mut net = 0.0;
    let mut path = 0.0;
    for s in 0..n {
        let mut sum = 0.0;
        let mut abs = 0.0;
        for u in updates {
            let e = u.as_ref()[s];
            sum += e;
            abs += e.abs();
        }
        net += sum.abs();
        path += abs;
    }
    if path == 0.0 {
        0.0
    } else {
        (net / path).min(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct EffectiveMovementTracker {
    window: usize,
    snapshots: VecDeque<Vec<f64>>,
    series: Vec<(usize, f64)>,
}

impl EffectiveMovementTracker {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1, "window must be at least 1");
        Self {
            window,
            snapshots: VecDeque::with_capacity(window + 1),
            series: Vec::new(),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn series(&self) -> &[(usize, f64)] {
        &self.series
    }

    pub fn buffered(&self) -> usize {
        self.snapshots.len()
    }

    /// EM over the buffered window, ending at the latest snapshot.
    pub fn effective_movement(&self) -> Result<f64, FreezeError> {
        if self.snapshots.len() < self.window + 1 {
            return Err(FreezeError::WarmingUp {
                have: self.snapshots.len(),
                need: self.window + 1,
            });
        }
        let updates: Vec<Vec<f64>> = self
            .snapshots
            .iter()
            .zip(self.snapshots.iter().skip(1))
            .map(|(a, b)| b.iter().zip(a).map(|(x, y)| x - y).collect())
            .collect();
        Ok(effective_movement_of_updates(&updates))
    }

    /// Buffers the aggregated active-block parameters of round `round` and
    /// appends an EM value once the window is full.
    pub fn observe_round(&mut self, round: usize, params: &[f64]) -> Result<Option<f64>, FreezeError> {
        if let Some(prev) = self.snapshots.back() {
            if prev.len() != params.len() {
                return Err(FreezeError::LayoutChanged {
                    expected: prev.len(),
                    got: params.len(),
                });
            }
        }
        if self.snapshots.len() == self.window + 1 {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(params.to_vec());
        match self.effective_movement() {
            Ok(em) => {
                self.series.push((round, em));
                Ok(Some(em))
            }
            Err(FreezeError::WarmingUp { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn reset(&mut self) {
        self.snapshots.clear();
        self.series.clear();
    }
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<f64, FreezeError> {
    if points.len() < 2 {
        return Err(FreezeError::DegenerateSeries);
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in points {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        return Err(FreezeError::DegenerateSeries);
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezePolicy {
    /// Window `H` in rounds.
    pub window: usize,
    /// `φ`: fraction of the initial slope magnitude.
    pub slope_fraction: f64,
    /// `W`: consecutive below-threshold evaluations required.
    pub consecutive: usize,
    /// No evaluation before this many rounds of the step.
    pub min_rounds: usize,
    /// Fit only the last `n` EM points instead of the whole step.
    pub trailing: Option<usize>,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            window: 10,
            slope_fraction: 0.15,
            consecutive: 20,
            min_rounds: 15,
            trailing: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeDecision {
    Continue,
    Freeze,
}

/// Consecutive-hit counter over a stream of slopes; the first slope it sees
/// becomes the reference.
#[derive(Debug, Clone, Default)]
pub struct SlopeGate {
    initial: Option<f64>,
    hits: usize,
}

impl SlopeGate {
    pub fn initial_slope(&self) -> Option<f64> {
        self.initial
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn evaluate(&mut self, slope: f64, policy: &FreezePolicy) -> FreezeDecision {
        let initial = *self.initial.get_or_insert(slope);
        let threshold = policy.slope_fraction * initial.abs();
        let hit = if threshold > 0.0 {
            slope.abs() < threshold
        } else {
            slope.abs() <= 0.0
        };
        self.hits = if hit { self.hits + 1 } else { 0 };
        if self.hits >= policy.consecutive {
            FreezeDecision::Freeze
        } else {
            FreezeDecision::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundObservation {
    pub em: Option<f64>,
    pub slope: Option<f64>,
    pub decision: FreezeDecision,
}

/// Tracker + policy state for one training step.
#[derive(Debug, Clone)]
pub struct FreezeController {
    policy: FreezePolicy,
    tracker: EffectiveMovementTracker,
    gate: SlopeGate,
    rounds: usize,
}

impl FreezeController {
    pub fn new(policy: FreezePolicy) -> Self {
        Self {
            tracker: EffectiveMovementTracker::new(policy.window),
            policy,
            gate: SlopeGate::default(),
            rounds: 0,
        }
    }

    pub fn policy(&self) -> &FreezePolicy {
        &self.policy
    }

    pub fn tracker(&self) -> &EffectiveMovementTracker {
        &self.tracker
    }

    pub fn gate(&self) -> &SlopeGate {
        &self.gate
    }

    /// Records the block parameters before the step's first round.
    pub fn start(&mut self, params: &[f64]) -> Result<(), FreezeError> {
        self.tracker.observe_round(0, params).map(|_| ())
    }

    /// Feeds the aggregated block parameters after round `round` (1-based
    /// within the step) and evaluates the freeze rule.
    pub fn observe(&mut self, round: usize, params: &[f64]) -> Result<RoundObservation, FreezeError> {
        self.rounds += 1;
        let em = self.tracker.observe_round(round, params)?;
        let (slope, decision) = self.should_freeze();
        Ok(RoundObservation { em, slope, decision })
    }

    fn fit_window(&self) -> Option<f64> {
        let series = self.tracker.series();
        let tail = match self.policy.trailing {
            Some(n) if n < series.len() => &series[series.len() - n..],
            _ => series,
        };
        let pts: Vec<(f64, f64)> = tail.iter().map(|&(k, v)| (k as f64, v)).collect();
        fit_slope(&pts).ok()
    }

    fn should_freeze(&mut self) -> (Option<f64>, FreezeDecision) {
        if self.rounds < self.policy.min_rounds {
            return (None, FreezeDecision::Continue);
        }
        match self.fit_window() {
            Some(slope) => (Some(slope), self.gate.evaluate(slope, &self.policy)),
            None => (None, FreezeDecision::Continue),
        }
    }
}

/// Replays the freeze rule over a logged `(round, EM)` series and returns the
/// index into `series` at which it fires.
pub fn replay(series: &[(usize, f64)], policy: &FreezePolicy) -> Option<usize> {
    let mut gate = SlopeGate::default();
    for i in 0..series.len() {
        let round = series[i].0;
        if round < policy.min_rounds {
            continue;
        }
        let start = match policy.trailing {
            Some(n) if n < i + 1 => i + 1 - n,
            _ => 0,
        };
        let pts: Vec<(f64, f64)> = series[start..=i].iter().map(|&(k, v)| (k as f64, v)).collect();
        if let Ok(slope) = fit_slope(&pts) {
            if gate.evaluate(slope, policy) == FreezeDecision::Freeze {
                return Some(i);
            }
        }
    }
    None
}
