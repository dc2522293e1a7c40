//! Measurement selection: the budget-scheduled exploration/exploitation score
//! and the baseline policies it is compared against.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{BeliefConfig, ParticleBatch, RewardFn, ScoreField};
use crate::env::{Measurement, MeasurementLog};
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::scalar::Scalar;
use crate::seed::StreamRng;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Diffatd,
    Random,
    MaxEnt,
    GreedyAdaptive,
    Ucb,
    EpsGreedy,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Diffatd,
        PolicyKind::Random,
        PolicyKind::MaxEnt,
        PolicyKind::GreedyAdaptive,
        PolicyKind::Ucb,
        PolicyKind::EpsGreedy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Diffatd => "diffatd",
            PolicyKind::Random => "random",
            PolicyKind::MaxEnt => "max_ent",
            PolicyKind::GreedyAdaptive => "greedy_adaptive",
            PolicyKind::Ucb => "ucb",
            PolicyKind::EpsGreedy => "eps_greedy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("policy.kind", format!("unknown policy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    #[default]
    Exploit,
    Likeli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    #[default]
    Minmax,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
    SeededRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub alpha: f64,
    pub combine_mode: CombineMode,
    pub normalize: Normalize,
    pub tie_break: TieBreak,
    pub ucb_c: f64,
    /// Side length, in locations, of the square UCB arms; 1 makes every
    /// location its own arm.
    pub ucb_arm: usize,
    pub epsilon: f64,
    /// Pins the mixing weight instead of following the budget schedule.
    pub kappa_override: Option<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Diffatd,
            alpha: 1.0,
            combine_mode: CombineMode::Exploit,
            normalize: Normalize::Minmax,
            tie_break: TieBreak::LowestIndex,
            ucb_c: std::f64::consts::SQRT_2,
            ucb_arm: 1,
            epsilon: 0.1,
            kappa_override: None,
        }
    }
}

impl PolicyConfig {
    pub fn of(kind: PolicyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("policy.alpha", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config("policy.epsilon", "must lie in [0, 1]"));
        }
        if !(self.ucb_c >= 0.0) {
            return Err(Error::config("policy.ucb_c", "must be non-negative"));
        }
        if self.ucb_arm == 0 {
            return Err(Error::config("policy.ucb_arm", "must be positive"));
        }
        if let Some(k) = self.kappa_override {
            if !(0.0..=1.0).contains(&k) {
                return Err(Error::config("policy.kappa_override", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn kappa(&self, budget: usize, t: usize) -> f64 {
        self.kappa_override
            .unwrap_or_else(|| kappa(budget, t, self.alpha))
    }
}

/// `max(0, (alpha B - t) / (alpha B + t))`.
pub fn kappa(budget: usize, t: usize, alpha: f64) -> f64 {
    let ab = alpha * budget as f64;
    let t = t as f64;
    ((ab - t) / (ab + t)).max(0.0)
}

/// Bookkeeping of one episode: budget, remaining candidates and what has
/// been measured so far.
#[derive(Debug, Clone)]
pub struct EpisodeState<F> {
    budget: usize,
    candidates: Vec<usize>,
    log: MeasurementLog<F>,
    collected: F,
}

impl<F: Scalar> EpisodeState<F> {
    pub fn new(budget: usize, locations: usize) -> Self {
        Self {
            budget,
            candidates: (0..locations).collect(),
            log: MeasurementLog::new(),
            collected: F::zero(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn steps_taken(&self) -> usize {
        self.log.len()
    }

    pub fn remaining_budget(&self) -> usize {
        self.budget - self.log.len()
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn log(&self) -> &MeasurementLog<F> {
        &self.log
    }

    pub fn collected(&self) -> F {
        self.collected
    }

    pub fn can_measure(&self) -> bool {
        self.remaining_budget() > 0 && !self.candidates.is_empty()
    }

    /// Removes the location from the candidates and appends the measurement.
    pub fn record(&mut self, m: Measurement<F>, layout: &Layout) -> Result<()> {
        if self.remaining_budget() == 0 {
            return Err(Error::InvalidRange {
                name: "budget",
                detail: "budget exhausted".into(),
            });
        }
        let pos = self
            .candidates
            .iter()
            .position(|&c| c == m.location)
            .ok_or(Error::RepeatMeasurement(m.location))?;
        self.candidates.remove(pos);
        self.collected += m.y;
        self.log.push(m, layout)
    }
}

/// Mixes exploration with the exploitation (or likelihood) term.
pub fn combined_score<F: Scalar>(
    field: &ScoreField<F>,
    kappa: f64,
    mode: CombineMode,
    normalize: Normalize,
) -> Result<Vec<F>> {
    if field.is_empty() {
        return Err(Error::ExhaustedCandidates);
    }
    let second = match mode {
        CombineMode::Exploit => &field.exploitation,
        CombineMode::Likeli => &field.likelihood,
    };
    let (a, b) = match normalize {
        Normalize::Minmax => (minmax(&field.exploration), minmax(second)),
        Normalize::None => (field.exploration.clone(), second.clone()),
    };
    let k = F::of(kappa);
    Ok(a.iter()
        .zip(&b)
        .map(|(&e, &x)| k * e + (F::one() - k) * x)
        .collect())
}

/// Rescales to `[0, 1]`; a constant vector maps to zeros.
pub fn minmax<F: Scalar>(v: &[F]) -> Vec<F> {
    let lo = v.iter().copied().fold(F::infinity(), F::min);
    let hi = v.iter().copied().fold(F::neg_infinity(), F::max);
    if !(hi > lo) {
        return vec![F::zero(); v.len()];
    }
    v.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

/// Index into `scores` of the maximum, with ties resolved per `tie`.
pub fn argmax<F: Scalar>(scores: &[F], tie: TieBreak, rng: &mut StreamRng) -> Result<usize> {
    let best = scores
        .iter()
        .copied()
        .filter(|s| !s.is_nan())
        .fold(F::neg_infinity(), F::max);
    let tied: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == best)
        .map(|(i, _)| i)
        .collect();
    match (tied.len(), tie) {
        (0, _) => Err(Error::ExhaustedCandidates),
        (1, _) | (_, TieBreak::LowestIndex) => Ok(tied[0]),
        (n, TieBreak::SeededRandom) => Ok(tied[rng.gen_range(0..n)]),
    }
}

/// The chosen location together with the scores that led to it.
#[derive(Debug, Clone)]
pub struct Selection<F> {
    pub location: usize,
    pub kappa: f64,
    pub field: ScoreField<F>,
}

impl<F: Scalar> Selection<F> {
    fn index(&self) -> usize {
        self.field
            .position(self.location)
            .expect("selected location is a candidate")
    }

    pub fn exploration(&self) -> F {
        self.field.exploration[self.index()]
    }

    pub fn likelihood(&self) -> F {
        self.field.likelihood[self.index()]
    }

    pub fn reward(&self) -> F {
        self.field.reward[self.index()]
    }

    pub fn exploitation(&self) -> F {
        self.field.exploitation[self.index()]
    }

    pub fn combined(&self) -> F {
        self.field.combined[self.index()]
    }
}

/// Picks the next location. The full score field is computed for every
/// policy so traces are comparable; `field.combined` holds the values the
/// policy actually ranked by.
#[allow(clippy::too_many_arguments)]
pub fn select<F: Scalar>(
    cfg: &PolicyConfig,
    state: &EpisodeState<F>,
    batch: &ParticleBatch<F>,
    belief: &BeliefConfig,
    layout: &Layout,
    reward: &impl RewardFn<F>,
    rng: &mut StreamRng,
) -> Result<Selection<F>> {
    if !state.can_measure() {
        return Err(Error::ExhaustedCandidates);
    }
    let candidates = state.candidates();
    let mut field = ScoreField::compute(batch, layout, candidates, belief, reward)?;
    let kappa = cfg.kappa(state.budget(), state.steps_taken());
    let idx = match cfg.kind {
        PolicyKind::Diffatd => {
            field.combined = combined_score(&field, kappa, cfg.combine_mode, cfg.normalize)?;
            argmax(&field.combined, cfg.tie_break, rng)?
        }
        PolicyKind::MaxEnt => {
            field.combined = field.exploration.clone();
            argmax(&field.combined, cfg.tie_break, rng)?
        }
        PolicyKind::GreedyAdaptive => {
            field.combined = field.exploitation.clone();
            argmax(&field.combined, cfg.tie_break, rng)?
        }
        PolicyKind::Random => {
            field.combined = vec![F::zero(); field.len()];
            rng.gen_range(0..candidates.len())
        }
        PolicyKind::EpsGreedy => {
            let n = F::of(batch.len() as f64);
            field.combined = field.reward.iter().map(|&r| r / n).collect();
            if rng.gen::<f64>() < cfg.epsilon {
                rng.gen_range(0..candidates.len())
            } else {
                argmax(&field.combined, cfg.tie_break, rng)?
            }
        }
        PolicyKind::Ucb => {
            field.combined = ucb_scores(cfg, state, layout);
            argmax(&field.combined, cfg.tie_break, rng)?
        }
    };
    Ok(Selection {
        location: candidates[idx],
        kappa,
        field,
    })
}

/// Optimistic UCB over square arms of `ucb_arm x ucb_arm` locations: an arm's
/// value is the mean `y` observed inside it (1 before any pull) plus
/// `c sqrt(ln(t + 1) / (n + 1))`.
fn ucb_scores<F: Scalar>(cfg: &PolicyConfig, state: &EpisodeState<F>, layout: &Layout) -> Vec<F> {
    let bc = layout.block_cols();
    let arm_of = |loc: usize| ((loc / bc) / cfg.ucb_arm, (loc % bc) / cfg.ucb_arm);
    let arms_per_row = bc.div_ceil(cfg.ucb_arm);
    let n_arms = (layout.locations() / bc).div_ceil(cfg.ucb_arm) * arms_per_row;
    let mut pulls = vec![0usize; n_arms];
    let mut sums = vec![0.0f64; n_arms];
    for m in state.log().measurements() {
        let (r, c) = arm_of(m.location);
        pulls[r * arms_per_row + c] += 1;
        sums[r * arms_per_row + c] += m.y.as_f64();
    }
    let t = state.steps_taken() as f64;
    state
        .candidates()
        .iter()
        .map(|&loc| {
            let (r, c) = arm_of(loc);
            let a = r * arms_per_row + c;
            let mean = if pulls[a] == 0 {
                1.0
            } else {
                sums[a] / pulls[a] as f64
            };
            F::of(mean + cfg.ucb_c * ((t + 1.0).ln() / (pulls[a] as f64 + 1.0)).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Every `floor(T / B)` reverse steps.
    #[default]
    Stride,
    /// After `ceil(T j / B)` reverse steps for `j = 1..=B`.
    EvenCount,
}

/// Reverse steps `tau` after which a measurement is taken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementSchedule {
    steps: usize,
    marks: Vec<bool>,
}

impl MeasurementSchedule {
    pub fn contains(&self, tau: usize) -> bool {
        self.marks.get(tau).copied().unwrap_or(false)
    }

    /// Scheduled steps in execution order (descending `tau`).
    pub fn taus(&self) -> Vec<usize> {
        (1..=self.steps).rev().filter(|&t| self.marks[t]).collect()
    }

    pub fn len(&self) -> usize {
        self.marks.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_measurement_schedule(
    steps: usize,
    budget: usize,
    kind: ScheduleKind,
) -> Result<MeasurementSchedule> {
    if budget == 0 {
        return Err(Error::InvalidRange {
            name: "budget",
            detail: "must be at least 1".into(),
        });
    }
    if budget > steps {
        return Err(Error::BudgetExceedsSteps { budget, steps });
    }
    let mut marks = vec![false; steps + 1];
    for j in 1..=budget {
        let done = match kind {
            ScheduleKind::Stride => j * (steps / budget),
            ScheduleKind::EvenCount => (steps * j).div_ceil(budget),
        };
        marks[steps - done + 1] = true;
    }
    Ok(MeasurementSchedule { steps, marks })
}
