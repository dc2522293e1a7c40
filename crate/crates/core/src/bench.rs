//! Episode runner, success-rate metric and multi-seed suites.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{marginal_entropy, BeliefConfig, ParticleBatch, ScoreField};
use crate::diffusion::{
    make_schedule, BetaCurve, GaussianMixturePrior, GuidanceConfig, JacobianMode, NoiseSchedule,
    SigmaKind,
};
use crate::env::{
    blob_prior, empirical_prior_from_dir, gen_gmm_scene, load_scene, BlobPriorConfig,
    ObservationNoise, Scene, SceneFormat, TargetChannel, TargetRule,
};
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::policy::{
    build_measurement_schedule, select, EpisodeState, PolicyConfig, PolicyKind, ScheduleKind,
};
use crate::reward::{LabeledPatch, RewardConfig, RewardNet};
use crate::scalar::Scalar;
use crate::seed::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneSource {
    /// A fresh scene per seed, drawn from the configured prior.
    Gmm {
        rows: usize,
        cols: usize,
        #[serde(default = "one")]
        block: usize,
        #[serde(default)]
        target_rule: TargetRule,
    },
    /// One fixed grid file; seeds only vary the search.
    File {
        path: PathBuf,
        format: Option<SceneFormat>,
        target: TargetChannel,
        #[serde(default = "one")]
        block: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    #[serde(flatten)]
    pub source: SceneSource,
    #[serde(default)]
    pub noise: Option<ObservationNoise>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            source: SceneSource::Gmm {
                rows: 16,
                cols: 16,
                block: 1,
                target_rule: TargetRule::Threshold(0.5),
            },
            noise: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSource {
    Synthetic(BlobPriorConfig),
    Json { path: PathBuf },
    Empirical { dir: PathBuf, variance: f64 },
}

impl Default for PriorSource {
    fn default() -> Self {
        PriorSource::Synthetic(BlobPriorConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub curve: BetaCurve,
    pub sigma: SigmaKind,
    pub zeta: f64,
    pub jacobian_mode: JacobianMode,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            curve: BetaCurve::Linear,
            sigma: SigmaKind::Posterior,
            zeta: 1.0,
            jacobian_mode: JacobianMode::ScaledIdentity,
        }
    }
}

impl DiffusionConfig {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            zeta: self.zeta,
            jacobian_mode: self.jacobian_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeliefSection {
    pub particles: usize,
    pub sigma_x2: f64,
    pub weights: Option<Vec<f64>>,
}

impl Default for BeliefSection {
    fn default() -> Self {
        Self {
            particles: 8,
            sigma_x2: 1.0,
            weights: None,
        }
    }
}

impl BeliefSection {
    pub fn belief(&self) -> BeliefConfig {
        BeliefConfig {
            sigma_x2: self.sigma_x2,
            weights: self.weights.clone(),
        }
    }
}

/// Policies x budgets grid for `run_suite`; empty lists fall back to the
/// top-level policy and budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteMatrix {
    pub policies: Vec<PolicyKind>,
    pub budgets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub prior: PriorSource,
    pub diffusion: DiffusionConfig,
    pub belief: BeliefSection,
    pub policy: PolicyConfig,
    pub reward: RewardConfig,
    pub budget: usize,
    pub schedule: ScheduleKind,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub suite: SuiteMatrix,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            prior: PriorSource::default(),
            diffusion: DiffusionConfig::default(),
            belief: BeliefSection::default(),
            policy: PolicyConfig::default(),
            reward: RewardConfig::default(),
            budget: 32,
            schedule: ScheduleKind::Stride,
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("out"),
            suite: SuiteMatrix::default(),
        }
    }
}

impl ExperimentConfig {
    /// The 16x16 synthetic benchmark: 8-component blob prior, threshold
    /// targets, 8 particles, 200 steps, budget 32, seeds 0..50. The beta range
    /// is the default one scaled by 1000/200, keeping the total noise level.
    pub fn benchmark() -> Self {
        Self {
            diffusion: DiffusionConfig {
                steps: 200,
                beta_min: 5e-4,
                beta_max: 0.1,
                ..Default::default()
            },
            seeds: (0..50).collect(),
            output_dir: PathBuf::from("out/benchmark"),
            ..Default::default()
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| Error::config(json_key(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks everything that does not need file access.
    pub fn validate(&self) -> Result<()> {
        let d = &self.diffusion;
        if d.steps == 0 {
            return Err(Error::config("diffusion.steps", "must be positive"));
        }
        if !(d.beta_min > 0.0 && d.beta_min <= d.beta_max && d.beta_max < 1.0) {
            return Err(Error::config(
                "diffusion.beta_min",
                "need 0 < beta_min <= beta_max < 1",
            ));
        }
        d.guidance().validate()?;
        if self.belief.particles < 2 {
            return Err(Error::config(
                "belief.particles",
                "need at least 2 particles",
            ));
        }
        self.belief.belief().validate(Some(self.belief.particles))?;
        self.policy.validate()?;
        self.reward.validate()?;
        for &b in self.budgets().iter() {
            if b == 0 {
                return Err(Error::config("budget", "must be at least 1"));
            }
            if b > d.steps {
                return Err(Error::config(
                    "budget",
                    format!("budget {b} exceeds diffusion.steps {}", d.steps),
                ));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config("seeds", format!("duplicate seed {}", w[0])));
        }
        match &self.scene.source {
            SceneSource::Gmm {
                rows,
                cols,
                block,
                target_rule,
            } => {
                Layout::new(*rows, *cols, *block)
                    .map_err(|e| Error::config("scene.block", e.to_string()))?;
                if let TargetRule::Threshold(t) = target_rule {
                    if !t.is_finite() {
                        return Err(Error::config(
                            "scene.target_rule",
                            "threshold must be finite",
                        ));
                    }
                }
            }
            SceneSource::File { block, .. } => {
                if *block == 0 {
                    return Err(Error::config("scene.block", "must be positive"));
                }
            }
        }
        if let Some(n) = self.scene.noise {
            if !(n.sigma >= 0.0 && n.sigma.is_finite() && n.mu.is_finite()) {
                return Err(Error::config(
                    "scene.noise",
                    "mu must be finite and sigma >= 0",
                ));
            }
        }
        Ok(())
    }

    pub fn policies(&self) -> Vec<PolicyKind> {
        if self.suite.policies.is_empty() {
            vec![self.policy.kind]
        } else {
            self.suite.policies.clone()
        }
    }

    pub fn budgets(&self) -> Vec<usize> {
        if self.suite.budgets.is_empty() {
            vec![self.budget]
        } else {
            self.suite.budgets.clone()
        }
    }
}

/// Best-effort dotted key for a serde error, e.g. `diffusion.zeta`.
fn json_key(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(i) = msg.find(marker) {
            let rest = &msg[i + marker.len()..];
            if let Some(j) = rest.find('`') {
                return rest[..j].to_string();
            }
        }
    }
    "config".into()
}

/// Loaded, validated inputs shared by every episode of an experiment.
#[derive(Debug, Clone)]
pub struct Experiment<F> {
    cfg: ExperimentConfig,
    prior: GaussianMixturePrior<F>,
    sched: NoiseSchedule<F>,
    layout: Layout,
    fixed_scene: Option<Scene<F>>,
}

impl<F: Scalar> Experiment<F> {
    /// Resolves files and builds the prior and schedule. Any error here is a
    /// configuration error.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (layout, fixed_scene) = match &cfg.scene.source {
            SceneSource::Gmm {
                rows, cols, block, ..
            } => (Layout::new(*rows, *cols, *block)?, None),
            SceneSource::File {
                path,
                format,
                target,
                block,
            } => {
                let fmt = match format {
                    Some(f) => *f,
                    None => SceneFormat::from_path(path).ok_or_else(|| {
                        Error::config(
                            "scene.format",
                            format!("cannot infer format of {}", path.display()),
                        )
                    })?,
                };
                let s = load_scene::<F>(path, fmt, target, *block)?.with_noise(cfg.scene.noise);
                (s.layout().clone(), Some(s))
            }
        };
        let prior = match &cfg.prior {
            PriorSource::Synthetic(b) => blob_prior(
                layout.rows(),
                layout.cols(),
                b,
                &mut stream_rng(b.seed, Stream::Scene),
            )?,
            PriorSource::Json { path } => GaussianMixturePrior::load(path)?,
            PriorSource::Empirical { dir, variance } => empirical_prior_from_dir(dir, *variance)?,
        };
        if prior.dimension() != layout.cells() {
            return Err(Error::config(
                "prior",
                format!(
                    "prior dimension {} does not match the {} scene cells",
                    prior.dimension(),
                    layout.cells()
                ),
            ));
        }
        let d = &cfg.diffusion;
        let sched = make_schedule(d.steps, d.beta_min, d.beta_max, d.curve, d.sigma)?;
        Ok(Self {
            cfg: cfg.clone(),
            prior,
            sched,
            layout,
            fixed_scene,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn prior(&self) -> &GaussianMixturePrior<F> {
        &self.prior
    }

    pub fn schedule(&self) -> &NoiseSchedule<F> {
        &self.sched
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// The scene searched by episode `seed`.
    pub fn scene(&self, seed: u64) -> Result<Scene<F>> {
        match (&self.fixed_scene, &self.cfg.scene.source) {
            (Some(s), _) => Ok(s.clone()),
            (None, SceneSource::Gmm { target_rule, .. }) => Ok(gen_gmm_scene(
                &self.prior,
                &self.layout,
                target_rule,
                &mut stream_rng(seed, Stream::Scene),
            )?
            .with_noise(self.cfg.scene.noise)),
            (None, SceneSource::File { .. }) => unreachable!("file scenes are loaded in prepare"),
        }
    }

    pub fn run(&self, policy: &PolicyConfig, budget: usize, seed: u64) -> Result<EpisodeResult<F>> {
        let scene = self.scene(seed)?;
        self.run_on(&scene, policy, budget, seed)
    }

    pub fn run_on(
        &self,
        scene: &Scene<F>,
        policy: &PolicyConfig,
        budget: usize,
        seed: u64,
    ) -> Result<EpisodeResult<F>> {
        self.run_observed(scene, policy, budget, seed, &mut |_, _| {})
    }

    /// Reverse diffusion with guidance; a measurement is taken after each
    /// scheduled step while budget and candidates remain. `observe` sees the
    /// score field behind every selection.
    pub fn run_observed(
        &self,
        scene: &Scene<F>,
        policy: &PolicyConfig,
        budget: usize,
        seed: u64,
        observe: &mut dyn FnMut(usize, &ScoreField<F>),
    ) -> Result<EpisodeResult<F>> {
        let start = Instant::now();
        policy.validate()?;
        let cfg = &self.cfg;
        let layout = scene.layout();
        let marks = build_measurement_schedule(cfg.diffusion.steps, budget, cfg.schedule)?;
        let guidance = cfg.diffusion.guidance();
        let belief = cfg.belief.belief();

        let mut batch = ParticleBatch::init(cfg.belief.particles, &self.prior, &self.sched, seed)?;
        let mut state = EpisodeState::new(budget, layout.locations());
        let mut net = RewardNet::new(layout.patch_area(), cfg.reward.clone(), seed)?;
        let mut data: Vec<LabeledPatch<F>> = Vec::new();
        let mut policy_rng = stream_rng(seed, Stream::Policy);
        let mut noise_rng = stream_rng(seed, Stream::ObservationNoise);
        let mut records = Vec::new();

        while batch.tau() > 0 {
            let tau = batch.tau();
            batch.advance(&self.prior, &self.sched, &guidance, state.log().observed())?;
            if !(marks.contains(tau) && state.can_measure()) {
                continue;
            }
            let t = state.steps_taken();
            let sel = select(
                policy,
                &state,
                &batch,
                &belief,
                layout,
                &net,
                &mut policy_rng,
            )?;
            observe(t, &sel.field);
            let entropy = marginal_entropy(&batch, &belief)?;
            let m = scene.measure(sel.location, state.log(), t, &mut noise_rng)?;
            records.push(StepRecord {
                t,
                tau,
                location: sel.location,
                exploration: sel.exploration(),
                likelihood: sel.likelihood(),
                reward: sel.reward(),
                exploitation: sel.exploitation(),
                combined: sel.combined(),
                y: m.y,
                entropy,
            });
            data.push(LabeledPatch::new(m.model_patch(), m.y)?);
            net.train_configured(&data)?;
            state.record(m, layout)?;
        }

        let collected = state.collected();
        let u = scene.target_locations();
        Ok(EpisodeResult {
            policy: policy.kind,
            budget,
            seed,
            records,
            collected,
            target_locations: u,
            sr_term: sr_term(collected.as_f64(), budget, u),
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

/// `R / min(B, U)`; a scene without target content counts as fully solved.
pub fn sr_term(collected: f64, budget: usize, target_locations: usize) -> f64 {
    let denom = budget.min(target_locations);
    if denom == 0 {
        1.0
    } else {
        collected / denom as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<F> {
    pub t: usize,
    pub tau: usize,
    pub location: usize,
    pub exploration: F,
    pub likelihood: F,
    pub reward: F,
    pub exploitation: F,
    pub combined: F,
    pub y: F,
    pub entropy: F,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult<F> {
    pub policy: PolicyKind,
    pub budget: usize,
    pub seed: u64,
    pub records: Vec<StepRecord<F>>,
    /// Cumulative target ratio `R`.
    pub collected: F,
    pub target_locations: usize,
    pub sr_term: f64,
    /// Seconds; informational only.
    pub wall_time: f64,
}

pub const TRACE_HEADER: [&str; 10] = [
    "t",
    "tau",
    "location",
    "expl",
    "likeli",
    "reward_sum",
    "exploit",
    "combined",
    "y",
    "entropy",
];

impl<F: Scalar> EpisodeResult<F> {
    pub fn write_trace<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                r.tau.to_string(),
                r.location.to_string(),
                r.exploration.to_string(),
                r.likelihood.to_string(),
                r.reward.to_string(),
                r.exploitation.to_string(),
                r.combined.to_string(),
                r.y.to_string(),
                r.entropy.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "trace".into(),
            source: e,
        })
    }

    pub fn trace_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_trace(&mut buf)?;
        Ok(buf)
    }

    pub fn save_trace(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.trace_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// Runs one episode of `cfg` with its top-level policy and budget.
pub fn run_episode<F: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<EpisodeResult<F>> {
    Experiment::prepare(cfg)?.run(&cfg.policy, cfg.budget, seed)
}

/// Mean of the per-task `R / min(B, U)` terms.
pub fn success_rate<F: Scalar>(results: &[EpisodeResult<F>], budget: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("episode results"));
    }
    let sum: f64 = results
        .iter()
        .map(|r| sr_term(r.collected.as_f64(), budget, r.target_locations))
        .sum();
    Ok(sum / results.len() as f64)
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub policy: PolicyKind,
    pub budget: usize,
    pub mean_sr: f64,
    pub std_sr: f64,
    pub n_seeds: usize,
    pub mean_runtime: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteFailure {
    pub policy: PolicyKind,
    pub budget: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SuiteReport<F> {
    pub rows: Vec<SuiteRow>,
    pub failures: Vec<SuiteFailure>,
    /// Successful episodes in (policy, budget, seed) order.
    pub episodes: Vec<EpisodeResult<F>>,
}

impl<F> SuiteReport<F> {
    pub fn row(&self, policy: PolicyKind, budget: usize) -> Option<&SuiteRow> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && r.budget == budget)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "policy",
            "B",
            "mean_SR",
            "std_SR",
            "n_seeds",
            "mean_runtime",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.policy.name().to_string(),
                r.budget.to_string(),
                r.mean_sr.to_string(),
                r.std_sr.to_string(),
                r.n_seeds.to_string(),
                format!("{:.6}", r.mean_runtime),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "results".into(),
            source: e,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Every (policy, budget, seed) cell of the matrix, run on at most `jobs`
/// threads. Failed episodes are reported, not fatal.
pub fn run_suite<F: Scalar>(cfg: &ExperimentConfig, jobs: usize) -> Result<SuiteReport<F>> {
    let exp = Experiment::<F>::prepare(cfg)?;
    let mut cells = Vec::new();
    for kind in cfg.policies() {
        for budget in cfg.budgets() {
            for &seed in &cfg.seeds {
                cells.push((kind, budget, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let outcomes: Vec<Result<EpisodeResult<F>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(kind, budget, seed)| {
                let policy = PolicyConfig {
                    kind,
                    ..cfg.policy.clone()
                };
                exp.run(&policy, budget, seed)
            })
            .collect()
    });

    let mut groups: BTreeMap<(PolicyKind, usize), Vec<&EpisodeResult<F>>> = BTreeMap::new();
    let mut failures = Vec::new();
    for (&(policy, budget, seed), out) in cells.iter().zip(&outcomes) {
        match out {
            Ok(r) => groups.entry((policy, budget)).or_default().push(r),
            Err(e) => failures.push(SuiteFailure {
                policy,
                budget,
                seed,
                error: e.to_string(),
            }),
        }
    }
    let rows = groups
        .into_iter()
        .map(|((policy, budget), rs)| {
            let srs: Vec<f64> = rs.iter().map(|r| r.sr_term).collect();
            let (mean_sr, std_sr) = mean_std(&srs);
            SuiteRow {
                policy,
                budget,
                mean_sr,
                std_sr,
                n_seeds: rs.len(),
                mean_runtime: rs.iter().map(|r| r.wall_time).sum::<f64>() / rs.len() as f64,
            }
        })
        .collect();
    let episodes = outcomes.into_iter().filter_map(|o| o.ok()).collect();
    Ok(SuiteReport {
        rows,
        failures,
        episodes,
    })
}
