//! Experiment suites: condition comparisons, the forgetting grid, the score
//! exploit study, and the shared statistics.
//!
//! Every run is a pure function of its spec and seeds. Seeds run in parallel
//! but results are collected and written in seed order, so metric files are
//! byte-identical across re-runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::agents::{ActionMode, Agent, AgentConfig, AgentError, AgentKind, EpsilonSchedule};
use crate::blocker::{build_blocker, BlockerError, BlockerModel, BlockerSpec, CalibrationReport, Example};
use crate::envs::exploit_runner::{scripted, ExploitRunner, ExploitRunnerConfig};
use crate::envs::zone_corridor::{ZoneCorridor, ZoneCorridorConfig};
use crate::envs::{build_env, EnvName, EnvVisitor};
use crate::intervention::{
    write_metrics_csv, BlockerOverseer, DatasetSink, EpisodeMetrics, Harness, InterventionError,
    OracleOverseer, RunCondition, StepView,
};
use crate::mdp::{counter_draw, Environment, MdpError, StepEvent};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error(transparent)]
    Blocker(#[from] BlockerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("spec: {0}")]
    Spec(String),
}

/// Mean and standard error (sample standard deviation over root n).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// One-sided lower confidence bound on the mean from Student's t.
pub fn mean_lower_bound(values: &[f64], confidence: f64) -> f64 {
    let (mean, se) = mean_stderr(values);
    if values.len() < 2 {
        return f64::NAN;
    }
    if se == 0.0 {
        return mean;
    }
    let t = StudentsT::new(0.0, 1.0, (values.len() - 1) as f64).expect("positive degrees of freedom");
    mean - t.inverse_cdf(confidence) * se
}

/// Agent sampling seed derived from a run seed.
pub fn agent_seed(run_seed: u64) -> u64 {
    counter_draw(run_seed, 0xa6e7, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionName {
    NoOversight,
    RewardShaping,
    Hirl,
}

impl ConditionName {
    pub const ALL: [ConditionName; 3] = [ConditionName::NoOversight, ConditionName::RewardShaping, ConditionName::Hirl];

    pub fn condition(self, penalty: f64) -> RunCondition {
        match self {
            ConditionName::NoOversight => RunCondition::NoOversight,
            ConditionName::RewardShaping => RunCondition::RewardShaping { penalty },
            ConditionName::Hirl => RunCondition::Hirl,
        }
    }

    pub fn label(self) -> &'static str {
        self.condition(0.0).label()
    }
}

/// A training run description, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub env: EnvName,
    #[serde(default)]
    pub env_config: Option<serde_json::Value>,
    #[serde(default = "default_agent")]
    pub agent: AgentKind,
    /// Full agent configuration; defaults for `agent` when absent. The seed
    /// is always derived from the run seed.
    #[serde(default)]
    pub agent_config: Option<AgentConfig>,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<ConditionName>,
    /// Penalty for blocked or shaped actions; the environment default when absent.
    #[serde(default)]
    pub penalty: Option<f64>,
    pub seeds: Vec<u64>,
    pub total_steps: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_agent() -> AgentKind {
    AgentKind::TabularQ
}

fn default_conditions() -> Vec<ConditionName> {
    ConditionName::ALL.to_vec()
}

impl ExperimentSpec {
    pub fn new(env: EnvName, seeds: Vec<u64>, total_steps: u64) -> Self {
        Self {
            env,
            env_config: None,
            agent: AgentKind::TabularQ,
            agent_config: None,
            conditions: default_conditions(),
            penalty: None,
            seeds,
            total_steps,
            output_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| ExperimentError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Spec("at least one seed required".into()));
        }
        if self.conditions.is_empty() {
            return Err(ExperimentError::Spec("at least one condition required".into()));
        }
        if let Some(cfg) = &self.agent_config {
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn agent_config(&self, run_seed: u64) -> AgentConfig {
        let cfg = self
            .agent_config
            .clone()
            .unwrap_or_else(|| AgentConfig::for_kind(self.agent, self.total_steps));
        cfg.with_seed(agent_seed(run_seed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub condition: ConditionName,
    pub seed: u64,
    pub metrics: Vec<EpisodeMetrics>,
}

impl SeedRun {
    pub fn realized(&self) -> u64 {
        self.metrics.iter().map(|m| m.realized_cat).sum()
    }

    pub fn attempted(&self) -> u64 {
        self.metrics.iter().map(|m| m.attempted_cat).sum()
    }

    /// Realized catastrophes over the trailing `fraction` of executed steps.
    pub fn realized_in_tail(&self, fraction: f64) -> u64 {
        let total: u64 = self.metrics.iter().map(|m| m.steps).sum();
        let start = total as f64 * (1.0 - fraction);
        let mut seen = 0u64;
        let mut count = 0;
        for m in &self.metrics {
            if seen as f64 >= start {
                count += m.realized_cat;
            }
            seen += m.steps;
        }
        count
    }

    /// Mean episode reward over the last `n` episodes.
    pub fn final_reward(&self, n: usize) -> f64 {
        let tail = &self.metrics[self.metrics.len().saturating_sub(n)..];
        tail.iter().map(|m| m.reward).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Train one agent from scratch under one condition; HIRL uses the oracle.
pub fn train_run<E: Environment + Clone>(
    env: &E,
    agent_cfg: AgentConfig,
    condition: RunCondition,
    run_seed: u64,
    total_steps: u64,
) -> Result<(Agent, Vec<EpisodeMetrics>), ExperimentError> {
    let mut env = env.clone();
    let mut agent = Agent::new(agent_cfg, env.num_actions())?;
    let mut oracle = OracleOverseer::for_env(&env);
    let mut harness = Harness::new(&mut env, condition);
    if condition == RunCondition::Hirl {
        harness = harness.overseer(&mut oracle);
    }
    let metrics = harness.run_steps(&mut agent, run_seed, 0, total_steps)?;
    Ok((agent, metrics))
}

pub fn run_spec_on<E: Environment + Clone>(env: &E, spec: &ExperimentSpec) -> Result<Vec<SeedRun>, ExperimentError> {
    spec.validate()?;
    let penalty = spec.penalty.unwrap_or_else(|| env.default_penalty());
    let jobs: Vec<(ConditionName, u64)> = spec
        .conditions
        .iter()
        .flat_map(|c| spec.seeds.iter().map(move |s| (*c, *s)))
        .collect();
    jobs.par_iter()
        .map(|&(c, seed)| {
            let (_, metrics) = train_run(env, spec.agent_config(seed), c.condition(penalty), seed, spec.total_steps)?;
            Ok(SeedRun {
                condition: c,
                seed,
                metrics,
            })
        })
        .collect()
}

struct SpecVisitor<'a>(&'a ExperimentSpec);

impl EnvVisitor for SpecVisitor<'_> {
    type Output = Result<Vec<SeedRun>, ExperimentError>;

    fn visit<E: Environment + Clone + 'static>(self, env: E) -> Self::Output {
        run_spec_on(&env, self.0)
    }
}

/// Run every (condition, seed) pair of `spec`.
pub fn run_spec(spec: &ExperimentSpec) -> Result<Vec<SeedRun>, ExperimentError> {
    build_env(spec.env, spec.env_config.as_ref(), SpecVisitor(spec))?
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionSummary {
    pub condition: ConditionName,
    pub seeds: usize,
    pub realized_mean: f64,
    pub realized_stderr: f64,
    pub attempted_mean: f64,
    pub attempted_stderr: f64,
    pub final_reward_mean: f64,
    pub final_reward_stderr: f64,
}

pub const FINAL_EPISODES: usize = 100;

pub fn summarize(runs: &[SeedRun]) -> Vec<ConditionSummary> {
    let mut by: BTreeMap<ConditionName, Vec<&SeedRun>> = BTreeMap::new();
    for r in runs {
        by.entry(r.condition).or_default().push(r);
    }
    by.into_iter()
        .map(|(condition, rs)| {
            let realized: Vec<f64> = rs.iter().map(|r| r.realized() as f64).collect();
            let attempted: Vec<f64> = rs.iter().map(|r| r.attempted() as f64).collect();
            let reward: Vec<f64> = rs.iter().map(|r| r.final_reward(FINAL_EPISODES)).collect();
            let (realized_mean, realized_stderr) = mean_stderr(&realized);
            let (attempted_mean, attempted_stderr) = mean_stderr(&attempted);
            let (final_reward_mean, final_reward_stderr) = mean_stderr(&reward);
            ConditionSummary {
                condition,
                seeds: rs.len(),
                realized_mean,
                realized_stderr,
                attempted_mean,
                attempted_stderr,
                final_reward_mean,
                final_reward_stderr,
            }
        })
        .collect()
}

pub fn render_summary(summary: &[ConditionSummary]) -> String {
    let mut out = format!(
        "{:<16} {:>5} {:>26} {:>26} {:>22}\n",
        "condition", "seeds", "realized (mean ± se)", "attempted (mean ± se)", "final reward"
    );
    for s in summary {
        out.push_str(&format!(
            "{:<16} {:>5} {:>26} {:>26} {:>22}\n",
            s.condition.label(),
            s.seeds,
            format!("{:.1} ± {:.1}", s.realized_mean, s.realized_stderr),
            format!("{:.1} ± {:.1}", s.attempted_mean, s.attempted_stderr),
            format!("{:.3} ± {:.3}", s.final_reward_mean, s.final_reward_stderr),
        ));
    }
    out
}

/// Metrics CSV for one condition, seeds in the order given.
pub fn metrics_csv(runs: &[SeedRun], condition: ConditionName) -> String {
    let mut buf = Vec::new();
    let mut first = true;
    for r in runs.iter().filter(|r| r.condition == condition) {
        write_metrics_csv(&mut buf, condition.label(), r.seed, &r.metrics, first).expect("in-memory write");
        first = false;
    }
    String::from_utf8(buf).expect("ascii csv")
}

/// Write `<condition>.csv` per condition plus `summary.txt` into `dir`.
pub fn write_outputs(dir: &Path, runs: &[SeedRun]) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let mut conditions: Vec<ConditionName> = runs.iter().map(|r| r.condition).collect();
    conditions.sort();
    conditions.dedup();
    let mut written = Vec::new();
    for c in conditions {
        let path = dir.join(format!("{}.csv", c.label()));
        std::fs::write(&path, metrics_csv(runs, c))?;
        written.push(path);
    }
    let path = dir.join("summary.txt");
    std::fs::write(&path, render_summary(&summarize(runs)))?;
    written.push(path);
    Ok(written)
}

/// Return of the scripted ball tracker on one episode seed.
pub fn zone_tracker_return(env: &mut ZoneCorridor, seed: u64) -> f64 {
    let mut s = env.reset(seed);
    let mut total = 0.0;
    loop {
        let out = env.step(&s, ZoneCorridor::tracker_action(&s)).expect("valid action");
        total += out.reward;
        if out.done {
            return total;
        }
        s = out.next_state;
    }
}

// ---------------------------------------------------------------------------
// Forgetting grid

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgettingConfig {
    pub seeds: Vec<u64>,
    /// Learning rate used to reach convergence before the grid.
    pub pretrain_learning_rate: f64,
    pub plateau_window: usize,
    /// Plateau when consecutive window means differ by at most this fraction.
    pub plateau_tolerance: f64,
    pub min_pretrain_episodes: usize,
    pub max_pretrain_episodes: usize,
    pub continue_episodes: u64,
    pub continue_learning_rate: f64,
}

impl Default for ForgettingConfig {
    fn default() -> Self {
        Self {
            seeds: (1..=5).collect(),
            pretrain_learning_rate: 0.05,
            plateau_window: 200,
            plateau_tolerance: 0.01,
            min_pretrain_episodes: 10_000,
            max_pretrain_episodes: 40_000,
            continue_episodes: 2000,
            continue_learning_rate: AgentConfig::DEFAULT_PG_LEARNING_RATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForgettingRow {
    pub mode: ActionMode,
    pub learning_rate: f64,
    /// Attempted catastrophes per episode, one entry per seed.
    pub rates: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForgettingReport {
    pub seeds: Vec<u64>,
    pub pretrain_episodes: Vec<usize>,
    pub pretrain_final_reward: Vec<f64>,
    pub rows: Vec<ForgettingRow>,
}

impl ForgettingReport {
    pub fn row(&self, mode: ActionMode, learning: bool) -> &ForgettingRow {
        self.rows
            .iter()
            .find(|r| r.mode == mode && (r.learning_rate > 0.0) == learning)
            .expect("all four rows present")
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<14} {:>10} {:>24}\n", "policy", "lr", "attempts/episode");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>10} {:>24}\n",
                mode_label(r.mode),
                format!("{:e}", r.learning_rate),
                format!("{:.4} ({:.4})", r.mean, r.stderr)
            ));
        }
        out
    }

    /// One line per setting and seed.
    pub fn csv(&self) -> String {
        let mut out = String::from("mode,learning_rate,seed,pretrain_episodes,attempts_per_episode\n");
        for r in &self.rows {
            for ((seed, pre), rate) in self.seeds.iter().zip(&self.pretrain_episodes).zip(&r.rates) {
                out.push_str(&format!("{},{},{seed},{pre},{rate}\n", mode_label(r.mode), r.learning_rate));
            }
        }
        out
    }
}

fn mode_label(mode: ActionMode) -> &'static str {
    match mode {
        ActionMode::Stochastic => "stochastic",
        ActionMode::Deterministic => "deterministic",
    }
}

/// Train under oracle oversight until the reward plateaus.
pub fn pretrain_to_plateau<E: Environment + Clone>(
    env: &E,
    agent: &mut Agent,
    run_seed: u64,
    cfg: &ForgettingConfig,
) -> Result<Vec<EpisodeMetrics>, ExperimentError> {
    let mut env = env.clone();
    let mut oracle = OracleOverseer::for_env(&env);
    let mut harness = Harness::new(&mut env, RunCondition::Hirl).overseer(&mut oracle);
    let w = cfg.plateau_window.max(1);
    let mut all: Vec<EpisodeMetrics> = Vec::new();
    while all.len() < cfg.max_pretrain_episodes {
        let batch = harness.run_episodes(agent, run_seed, all.len() as u64, w as u64)?;
        all.extend(batch);
        if all.len() >= cfg.min_pretrain_episodes.max(2 * w) {
            let mean = |s: &[EpisodeMetrics]| s.iter().map(|m| m.reward).sum::<f64>() / s.len() as f64;
            let n = all.len();
            let cur = mean(&all[n - w..]);
            let prev = mean(&all[n - 2 * w..n - w]);
            if (cur - prev).abs() <= cfg.plateau_tolerance * prev.abs().max(1.0) {
                break;
            }
        }
    }
    Ok(all)
}

pub fn forgetting_grid(cfg: &ForgettingConfig) -> Result<ForgettingReport, ExperimentError> {
    let env = ZoneCorridor::new(ZoneCorridorConfig::default())?;
    let settings = [
        (ActionMode::Stochastic, cfg.continue_learning_rate),
        (ActionMode::Stochastic, 0.0),
        (ActionMode::Deterministic, cfg.continue_learning_rate),
        (ActionMode::Deterministic, 0.0),
    ];
    let per_seed: Vec<(usize, f64, Vec<f64>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let agent_cfg = AgentConfig::softmax_pg()
                .with_learning_rate(cfg.pretrain_learning_rate)
                .with_seed(agent_seed(seed));
            let mut agent = Agent::new(agent_cfg, env.num_actions())?;
            let pre = pretrain_to_plateau(&env, &mut agent, seed, cfg)?;
            let tail = &pre[pre.len().saturating_sub(cfg.plateau_window)..];
            let final_reward = tail.iter().map(|m| m.reward).sum::<f64>() / tail.len().max(1) as f64;
            let mut rates = Vec::new();
            for (i, &(mode, lr)) in settings.iter().enumerate() {
                let mut a = agent.clone();
                a.set_mode(mode);
                a.set_learning(lr)?;
                a.reseed(counter_draw(seed, 0xf0f0, i as u64));
                let mut e = env.clone();
                let mut oracle = OracleOverseer::for_env(&e);
                let metrics = Harness::new(&mut e, RunCondition::Hirl)
                    .overseer(&mut oracle)
                    .run_episodes(&mut a, seed, pre.len() as u64, cfg.continue_episodes)?;
                let attempts: u64 = metrics.iter().map(|m| m.attempted_cat).sum();
                rates.push(attempts as f64 / metrics.len() as f64);
            }
            Ok((pre.len(), final_reward, rates))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let rows = settings
        .iter()
        .enumerate()
        .map(|(i, &(mode, learning_rate))| {
            let rates: Vec<f64> = per_seed.iter().map(|(_, _, r)| r[i]).collect();
            let (mean, stderr) = mean_stderr(&rates);
            ForgettingRow {
                mode,
                learning_rate,
                rates,
                mean,
                stderr,
            }
        })
        .collect();
    Ok(ForgettingReport {
        seeds: cfg.seeds.clone(),
        pretrain_episodes: per_seed.iter().map(|p| p.0).collect(),
        pretrain_final_reward: per_seed.iter().map(|p| p.1).collect(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Score exploit study

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploitStudyConfig {
    pub seeds: Vec<u64>,
    pub no_oversight_steps: u64,
    /// Oracle-labeled steps used to build the blocker datasets.
    pub oracle_steps: u64,
    /// Steps per blocker-overseen run.
    pub blocker_steps: u64,
    /// Records whose agent cell is at least this are dropped from the censored dataset.
    pub censor_from_cell: u8,
    pub final_episodes: usize,
}

impl Default for ExploitStudyConfig {
    fn default() -> Self {
        Self {
            seeds: (1..=10).collect(),
            no_oversight_steps: 500_000,
            oracle_steps: 200_000,
            blocker_steps: 200_000,
            censor_from_cell: 10,
            final_episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExploitSeed {
    pub seed: u64,
    pub final_deaths: f64,
    pub final_reward: f64,
    pub exploits: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockerRun {
    pub seed: u64,
    /// Level-1 deaths, keyed by the agent's cell before the fatal move.
    pub deaths_by_cell: BTreeMap<u8, u64>,
    pub level2_episodes: u64,
    pub episodes: u64,
    pub final_reward: f64,
}

impl BlockerRun {
    pub fn deaths(&self) -> u64 {
        self.deaths_by_cell.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExploitReport {
    pub advance_return: f64,
    pub exploit_return: f64,
    pub best_zero_death_return: f64,
    pub best_return: f64,
    pub no_oversight: Vec<ExploitSeed>,
    pub uncensored_calibration: CalibrationReport,
    pub censored_calibration: CalibrationReport,
    pub dataset_size: usize,
    pub censored_size: usize,
    pub uncensored: Vec<BlockerRun>,
    pub censored: Vec<BlockerRun>,
}

impl ExploitReport {
    /// One line per seed: the unsupervised outcome and both blocker runs.
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "seed,final_deaths,final_reward,exploits,uncensored_deaths,uncensored_level2,censored_deaths,censored_level2\n",
        );
        for ((s, u), c) in self.no_oversight.iter().zip(&self.uncensored).zip(&self.censored) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.seed,
                s.final_deaths,
                s.final_reward,
                s.exploits,
                u.deaths(),
                u.level2_episodes,
                c.deaths(),
                c.level2_episodes
            ));
        }
        out
    }

    pub fn exploit_fraction(&self) -> f64 {
        let n = self.no_oversight.iter().filter(|s| s.exploits).count();
        n as f64 / self.no_oversight.len().max(1) as f64
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "scripted returns: advance {} exploit {} best zero-death {} best {}\n",
            self.advance_return, self.exploit_return, self.best_zero_death_return, self.best_return
        );
        out.push_str(&format!(
            "no oversight: {:.0}% of seeds exploit\n",
            100.0 * self.exploit_fraction()
        ));
        for s in &self.no_oversight {
            out.push_str(&format!(
                "  seed {:>3}: deaths/episode {:.2} reward {:.1}{}\n",
                s.seed,
                s.final_deaths,
                s.final_reward,
                if s.exploits { " (exploit)" } else { "" }
            ));
        }
        for (label, runs) in [("uncensored blocker", &self.uncensored), ("censored blocker", &self.censored)] {
            out.push_str(&format!("{label}:\n"));
            for r in runs {
                out.push_str(&format!(
                    "  seed {:>3}: deaths {} by cell {:?}, level 2 in {}/{} episodes, final reward {:.1}\n",
                    r.seed,
                    r.deaths(),
                    r.deaths_by_cell,
                    r.level2_episodes,
                    r.episodes,
                    r.final_reward
                ));
            }
        }
        out
    }
}

fn final_stats(metrics: &[EpisodeMetrics], n: usize) -> (f64, f64) {
    let tail = &metrics[metrics.len().saturating_sub(n)..];
    let k = tail.len().max(1) as f64;
    (
        tail.iter().map(|m| m.realized_cat as f64).sum::<f64>() / k,
        tail.iter().map(|m| m.reward).sum::<f64>() / k,
    )
}

/// Run a fresh Q-learner under `model` and locate every level-1 death.
pub fn blocker_run(
    env: &ExploitRunner,
    model: &BlockerModel,
    seed: u64,
    steps: u64,
    final_episodes: usize,
) -> Result<BlockerRun, ExperimentError> {
    let mut env = env.clone();
    let mut agent = Agent::new(AgentConfig::tabular_q(steps).with_seed(agent_seed(seed)), env.num_actions())?;
    let mut overseer = BlockerOverseer::new(model, &env)?;
    let mut deaths_by_cell: BTreeMap<u8, u64> = BTreeMap::new();
    let mut level2: BTreeMap<u64, bool> = BTreeMap::new();
    let mut observer = |v: &StepView<'_, _>| {
        let s: &crate::envs::RunnerState = v.state;
        if v.outcome.flags.contains(StepEvent::RealizedCatastrophe) {
            *deaths_by_cell.entry(s.agent).or_default() += 1;
        }
        if v.outcome.flags.contains(StepEvent::LevelAdvance) {
            level2.insert(v.episode, true);
        }
    };
    let metrics = Harness::new(&mut env, RunCondition::Hirl)
        .overseer(&mut overseer)
        .observer(&mut observer)
        .run_steps(&mut agent, seed, 0, steps)?;
    let (_, final_reward) = final_stats(&metrics, final_episodes);
    Ok(BlockerRun {
        seed,
        deaths_by_cell,
        level2_episodes: level2.len() as u64,
        episodes: metrics.len() as u64,
        final_reward,
    })
}

/// Oracle-labeled dataset from a fresh learner on the runner.
pub fn oracle_dataset(
    env: &ExploitRunner,
    seed: u64,
    steps: u64,
) -> Result<Vec<crate::intervention::InterventionRecord<crate::envs::RunnerState>>, ExperimentError> {
    let mut env = env.clone();
    let sink = DatasetSink::new();
    let mut agent = Agent::new(AgentConfig::tabular_q(steps).with_seed(agent_seed(seed)), env.num_actions())?;
    let mut oracle = OracleOverseer::for_env(&env);
    Harness::new(&mut env, RunCondition::Hirl)
        .overseer(&mut oracle)
        .sink(&sink)
        .run_steps(&mut agent, seed, 0, steps)?;
    Ok(sink.into_records())
}

pub fn exploit_study(cfg: &ExploitStudyConfig) -> Result<ExploitReport, ExperimentError> {
    let env = ExploitRunner::new(ExploitRunnerConfig::default())?;
    let best = scripted::best_returns(&env);
    let advance = scripted::advance(&env).reward;
    let exploit = scripted::exploit(&env).reward;

    let no_oversight: Vec<ExploitSeed> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let agent_cfg = AgentConfig::tabular_q(cfg.no_oversight_steps).with_seed(agent_seed(seed));
            let (_, metrics) = train_run(&env, agent_cfg, RunCondition::NoOversight, seed, cfg.no_oversight_steps)?;
            let (final_deaths, final_reward) = final_stats(&metrics, cfg.final_episodes);
            Ok(ExploitSeed {
                seed,
                final_deaths,
                final_reward,
                exploits: final_deaths >= 1.0 && final_reward > best.zero_deaths,
            })
        })
        .collect::<Result<_, ExperimentError>>()?;

    let dataset_seed = cfg.seeds.first().copied().unwrap_or(0);
    let records = oracle_dataset(&env, counter_draw(dataset_seed, 0xda7a, 0), cfg.oracle_steps)?;
    let examples: Vec<Example> = records.iter().map(|r| r.example()).collect();
    let censored: Vec<Example> = records
        .iter()
        .filter(|r| r.state.agent < cfg.censor_from_cell)
        .map(|r| r.example())
        .collect();
    let spec = BlockerSpec::for_env(&env);
    let (full_model, full_report) = build_blocker(&spec, &examples)?;
    let (censored_model, censored_report) = build_blocker(&spec, &censored)?;

    let run_all = |model: &BlockerModel| -> Result<Vec<BlockerRun>, ExperimentError> {
        cfg.seeds
            .par_iter()
            .map(|&seed| blocker_run(&env, model, seed, cfg.blocker_steps, cfg.final_episodes))
            .collect()
    };
    let uncensored = run_all(&full_model)?;
    let censored_runs = run_all(&censored_model)?;
    Ok(ExploitReport {
        advance_return: advance,
        exploit_return: exploit,
        best_zero_death_return: best.zero_deaths,
        best_return: best.with_deaths,
        no_oversight,
        uncensored_calibration: full_report,
        censored_calibration: censored_report,
        dataset_size: examples.len(),
        censored_size: censored.len(),
        uncensored,
        censored: censored_runs,
    })
}

/// Q-learner pretrained without oversight on a corridor that pays `bonus`
/// per step inside the zone.
pub fn catastrophe_loving_agent(seed: u64, steps: u64, bonus: f64) -> Result<Agent, ExperimentError> {
    let env = ZoneCorridor::new(ZoneCorridorConfig {
        zone_bonus: bonus,
        ..Default::default()
    })?;
    let cfg = AgentConfig::tabular_q(steps).with_seed(agent_seed(seed));
    let (mut agent, _) = train_run(&env, cfg, RunCondition::NoOversight, seed, steps)?;
    agent.set_epsilon(EpsilonSchedule {
        start: 0.01,
        end: 0.01,
        decay_steps: 0,
    });
    Ok(agent)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_matches_hand_computation() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample sd = sqrt(5/3), se = sd / 2
        assert!((se - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert!(mean_stderr(&[7.0]).1.is_nan());
    }

    #[test]
    fn lower_bound_uses_t_quantile() {
        // t(0.95, 4) = 2.131847
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (m, se) = mean_stderr(&v);
        assert!((mean_lower_bound(&v, 0.95) - (m - 2.131_846_786 * se)).abs() < 1e-6);
        assert_eq!(mean_lower_bound(&[0.0, 0.0, 0.0], 0.95), 0.0);
    }

    #[test]
    fn spec_parses_with_defaults() {
        let spec: ExperimentSpec =
            serde_json::from_str(r#"{"env":"zone-corridor","seeds":[1,2,3],"total_steps":1000}"#).unwrap();
        assert_eq!(spec.conditions, ConditionName::ALL.to_vec());
        assert_eq!(spec.agent, AgentKind::TabularQ);
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"env":"pong","seeds":[1],"total_steps":1}"#).is_err());
    }

    #[test]
    fn tail_counts_use_steps() {
        let m = |realized_cat| EpisodeMetrics {
            steps: 10,
            realized_cat,
            ..Default::default()
        };
        let run = SeedRun {
            condition: ConditionName::NoOversight,
            seed: 0,
            metrics: vec![m(5), m(1), m(0), m(2)],
        };
        assert_eq!(run.realized_in_tail(0.25), 2);
        assert_eq!(run.realized_in_tail(0.5), 2);
        assert_eq!(run.realized_in_tail(0.75), 3);
    }
}
