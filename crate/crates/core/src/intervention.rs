//! The intervention layer: every proposed action passes through an overseer
//! that may block it, substitute a safe action and hand the agent a penalty
//! in place of the environment reward. Also the baseline run conditions and
//! the three-phase oversight lifecycle.

use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Agent, Transition};
use crate::blocker::{build_blocker, BlockerError, BlockerModel, BlockerSpec, CalibrationReport, Example};
use crate::mdp::{
    ActionId, ActionMask, Environment, MdpError, ReplacementStrategy, RewardTransform, StepOutcome,
};

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("overseer unavailable: {0}")]
    OverseerUnavailable(String),
    #[error("every action was blocked in this state")]
    NoSafeAction,
    #[error("phase order: {0}")]
    PhaseOrder(String),
    #[error("calibration failed: {0}")]
    CalibrationFailed(String),
    #[error(transparent)]
    Blocker(#[from] BlockerError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset: {0}")]
    Dataset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OverseerKind {
    Human,
    Oracle,
    Blocker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Allow,
    Block,
}

/// What replaces a blocked proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    Action(ActionId),
    /// Remove the proposal from the agent's options and ask again.
    Requery,
}

pub fn resolve_replacement<E: Environment>(
    env: &E,
    strategy: ReplacementStrategy,
    proposed: ActionId,
) -> Replacement {
    match strategy {
        ReplacementStrategy::FixedAction(a) => Replacement::Action(a),
        ReplacementStrategy::RemoveFireComponent => Replacement::Action(env.without_fire(proposed)),
        ReplacementStrategy::ActionPruning => Replacement::Requery,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverseerDecision {
    pub verdict: Verdict,
    pub replacement: Option<Replacement>,
    pub penalty: f64,
    /// Seconds between request and answer, for human overseers.
    pub label_latency: Option<f64>,
    /// Allowed by a timeout rather than by the overseer.
    pub auto_allowed: bool,
}

impl OverseerDecision {
    pub fn allow() -> Self {
        Self {
            verdict: Verdict::Allow,
            replacement: None,
            penalty: 0.0,
            label_latency: None,
            auto_allowed: false,
        }
    }

    pub fn block(replacement: Replacement, penalty: f64) -> Self {
        Self {
            verdict: Verdict::Block,
            replacement: Some(replacement),
            penalty,
            label_latency: None,
            auto_allowed: false,
        }
    }

    pub fn with_latency(mut self, seconds: f64) -> Self {
        self.label_latency = Some(seconds);
        self
    }

    pub fn is_block(&self) -> bool {
        self.verdict == Verdict::Block
    }
}

/// Where in the run a decision is requested.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecisionContext {
    pub episode: u64,
    pub step: u64,
    /// Environment reward accumulated so far in the episode.
    pub score: f64,
    /// Proposals already blocked in this step.
    pub requeries: u32,
}

pub trait Overseer<E: Environment> {
    fn kind(&self) -> OverseerKind;

    fn decide(
        &mut self,
        env: &E,
        state: &E::State,
        proposed: ActionId,
        ctx: &DecisionContext,
    ) -> Result<OverseerDecision, InterventionError>;

    /// Called after each executed step.
    fn observe_step(&mut self, _env: &E, _next: &E::State, _ctx: &DecisionContext) {}
}

/// Exact overseer backed by the environment's catastrophe predicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOverseer {
    pub strategy: ReplacementStrategy,
    pub penalty: f64,
}

impl OracleOverseer {
    pub fn new(strategy: ReplacementStrategy, penalty: f64) -> Self {
        Self { strategy, penalty }
    }

    /// Default replacement and penalty of `env`.
    pub fn for_env<E: Environment>(env: &E) -> Self {
        Self::new(env.default_replacement(), env.default_penalty())
    }

    pub fn judge<E: Environment>(&self, env: &E, state: &E::State, proposed: ActionId) -> OverseerDecision {
        if env.is_catastrophe(state, proposed) {
            OverseerDecision::block(resolve_replacement(env, self.strategy, proposed), self.penalty)
        } else {
            OverseerDecision::allow()
        }
    }
}

impl<E: Environment> Overseer<E> for OracleOverseer {
    fn kind(&self) -> OverseerKind {
        OverseerKind::Oracle
    }

    fn decide(
        &mut self,
        env: &E,
        state: &E::State,
        proposed: ActionId,
        _ctx: &DecisionContext,
    ) -> Result<OverseerDecision, InterventionError> {
        Ok(self.judge(env, state, proposed))
    }
}

/// A trained blocker acting as overseer.
#[derive(Debug, Clone, Copy)]
pub struct BlockerOverseer<'m> {
    model: &'m BlockerModel,
}

impl<'m> BlockerOverseer<'m> {
    pub fn new<E: Environment>(model: &'m BlockerModel, env: &E) -> Result<Self, BlockerError> {
        model.check_env(env)?;
        Ok(Self { model })
    }

    pub fn model(&self) -> &BlockerModel {
        self.model
    }
}

impl<E: Environment> Overseer<E> for BlockerOverseer<'_> {
    fn kind(&self) -> OverseerKind {
        OverseerKind::Blocker
    }

    fn decide(
        &mut self,
        env: &E,
        state: &E::State,
        proposed: ActionId,
        _ctx: &DecisionContext,
    ) -> Result<OverseerDecision, InterventionError> {
        if self.model.judge(env, state, proposed).blocked {
            Ok(OverseerDecision::block(
                resolve_replacement(env, self.model.strategy, proposed),
                self.model.penalty,
            ))
        } else {
            Ok(OverseerDecision::allow())
        }
    }
}

/// One logged oversight decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "S: serde::de::DeserializeOwned"))]
pub struct InterventionRecord<S> {
    pub episode: u64,
    pub step: u64,
    pub state: S,
    pub features: Vec<f64>,
    pub proposed: ActionId,
    pub blocked: bool,
    pub executed: ActionId,
    pub penalty: f64,
    pub overseer: OverseerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_latency: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub auto_allowed: bool,
}

impl<S> InterventionRecord<S> {
    pub fn example(&self) -> Example {
        Example {
            features: self.features.clone(),
            blocked: self.blocked,
        }
    }
}

/// Append-only log of records shared by concurrent writers.
#[derive(Debug, Default)]
pub struct DatasetSink<S> {
    records: Mutex<Vec<InterventionRecord<S>>>,
}

impl<S: Clone> DatasetSink<S> {
    pub fn new() -> Self {
        Self {
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn from_records(records: Vec<InterventionRecord<S>>) -> Self {
        Self {
            records: Mutex::new(records),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Vec<InterventionRecord<S>>> {
        self.records.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn append(&self, record: InterventionRecord<S>) {
        self.lock().push(record);
    }

    pub fn extend(&self, records: impl IntoIterator<Item = InterventionRecord<S>>) {
        self.lock().extend(records);
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blocked_count(&self) -> usize {
        self.lock().iter().filter(|r| r.blocked).count()
    }

    pub fn snapshot(&self) -> Vec<InterventionRecord<S>> {
        self.lock().clone()
    }

    /// Records appended at or after index `start`.
    pub fn since(&self, start: usize) -> Vec<InterventionRecord<S>> {
        let records = self.lock();
        records.get(start..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn examples(&self) -> Vec<Example> {
        self.lock().iter().map(InterventionRecord::example).collect()
    }

    pub fn into_records(self) -> Vec<InterventionRecord<S>> {
        self.records.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

/// A reviewer's relabel of an earlier record, applied before fitting.
/// The original record stays in the log untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCorrection {
    pub record: usize,
    pub blocked: bool,
}

/// Apply corrections in order (a later one for the same record wins) and
/// return how many labels differ from the originals afterwards.
pub fn apply_corrections(examples: &mut [Example], corrections: &[LabelCorrection]) -> Result<usize, InterventionError> {
    let original: Vec<bool> = examples.iter().map(|e| e.blocked).collect();
    for c in corrections {
        let ex = examples.get_mut(c.record).ok_or_else(|| {
            InterventionError::Dataset(format!("correction for record {} of {}", c.record, original.len()))
        })?;
        ex.blocked = c.blocked;
    }
    Ok(examples.iter().zip(&original).filter(|(e, o)| e.blocked != **o).count())
}

pub fn write_dataset<S: Serialize, W: Write>(records: &[InterventionRecord<S>], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_dataset<S: serde::de::DeserializeOwned, R: BufRead>(
    input: R,
) -> Result<Vec<InterventionRecord<S>>, InterventionError> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| InterventionError::Dataset(format!("line {}: {e}", n + 1)))?;
        records.push(r);
    }
    Ok(records)
}

/// Records reduced to what a blocker trains on; readable without knowing the
/// environment's state type.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RecordSummary {
    pub features: Vec<f64>,
    pub blocked: bool,
    #[serde(default)]
    pub label_latency: Option<f64>,
}

pub fn read_record_summaries<R: BufRead>(input: R) -> Result<Vec<RecordSummary>, InterventionError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| InterventionError::Dataset(format!("line {}: {e}", n + 1)))?;
        out.push(r);
    }
    Ok(out)
}

impl RecordSummary {
    pub fn example(&self) -> Example {
        Example {
            features: self.features.clone(),
            blocked: self.blocked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunCondition {
    NoOversight,
    /// Penalize catastrophic actions but execute them.
    RewardShaping { penalty: f64 },
    /// Block, replace and penalize through an overseer.
    Hirl,
}

impl RunCondition {
    pub fn label(&self) -> &'static str {
        match self {
            RunCondition::NoOversight => "no-oversight",
            RunCondition::RewardShaping { .. } => "reward-shaping",
            RunCondition::Hirl => "hirl",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: u64,
    pub steps: u64,
    pub reward: f64,
    pub realized_cat: u64,
    pub attempted_cat: u64,
}

pub const METRICS_HEADER: &str = "episode,steps,reward,realized_cat,attempted_cat,condition,seed";

pub fn write_metrics_csv<W: Write>(
    mut out: W,
    condition: &str,
    seed: u64,
    metrics: &[EpisodeMetrics],
    header: bool,
) -> std::io::Result<()> {
    if header {
        writeln!(out, "{METRICS_HEADER}")?;
    }
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.episode, m.steps, m.reward, m.realized_cat, m.attempted_cat, condition, seed
        )?;
    }
    Ok(())
}

/// Result of passing one proposal (and any re-queries) through an overseer.
#[derive(Debug, Clone, PartialEq)]
pub struct Interception<S> {
    pub executed: ActionId,
    /// The action the agent is credited with for this step.
    pub credited: ActionId,
    /// Penalty replacing the environment reward, if the credited action was blocked.
    pub penalty: Option<f64>,
    pub blocks: u32,
    pub records: Vec<InterventionRecord<S>>,
}

/// Consult `overseer` on the agent's proposal. A fixed or fire-stripping
/// replacement ends the step with the agent credited for its own proposal and
/// the penalty; under pruning every blocked proposal becomes a penalized
/// self-transition and the agent is asked again without it.
#[allow(clippy::too_many_arguments)]
pub fn intercept<E: Environment>(
    env: &E,
    overseer: &mut dyn Overseer<E>,
    agent: &mut Agent,
    state: &E::State,
    transform: RewardTransform,
    ctx: DecisionContext,
    log: bool,
) -> Result<Interception<E::State>, InterventionError> {
    let key = env.observation_key(state);
    let mut mask = ActionMask::all(env.num_actions());
    let mut records: Vec<InterventionRecord<E::State>> = Vec::new();
    let mut blocks = 0u32;
    let kind = overseer.kind();
    loop {
        let proposed = agent.act(key, mask);
        let decision = overseer.decide(env, state, proposed, &DecisionContext { requeries: blocks, ..ctx })?;
        // A timeout allow is not a label and carries no labeling time.
        let label_latency = if kind == OverseerKind::Human && !decision.auto_allowed {
            Some(decision.label_latency.unwrap_or(0.0))
        } else {
            None
        };
        let mut record = log.then(|| InterventionRecord {
            episode: ctx.episode,
            step: ctx.step,
            state: state.clone(),
            features: env.features(state, proposed),
            proposed,
            blocked: decision.is_block(),
            executed: proposed,
            penalty: if decision.is_block() { decision.penalty } else { 0.0 },
            overseer: kind,
            label_latency,
            auto_allowed: decision.auto_allowed,
        });
        if !decision.is_block() {
            records.extend(record);
            for r in &mut records {
                r.executed = proposed;
            }
            return Ok(Interception {
                executed: proposed,
                credited: proposed,
                penalty: None,
                blocks,
                records,
            });
        }
        blocks += 1;
        let replacement = decision
            .replacement
            .unwrap_or_else(|| resolve_replacement(env, env.default_replacement(), proposed));
        match replacement {
            Replacement::Action(a) => {
                env.spec().check(a)?;
                if let Some(r) = record.as_mut() {
                    r.executed = a;
                }
                records.extend(record);
                for r in &mut records {
                    r.executed = a;
                }
                return Ok(Interception {
                    executed: a,
                    credited: proposed,
                    penalty: Some(decision.penalty),
                    blocks,
                    records,
                });
            }
            Replacement::Requery => {
                records.extend(record);
                agent.observe(Transition {
                    key,
                    action: proposed,
                    reward: transform.apply(decision.penalty),
                    next_key: key,
                    done: false,
                });
                mask.remove(proposed);
                if mask.is_empty() {
                    return Err(InterventionError::NoSafeAction);
                }
            }
        }
    }
}

/// A view of one executed step for observers.
#[derive(Debug)]
pub struct StepView<'a, S> {
    pub episode: u64,
    pub t: u64,
    pub state: &'a S,
    pub executed: ActionId,
    pub blocks: u32,
    pub outcome: &'a StepOutcome<S>,
}

pub type StepObserver<'a, S> = dyn FnMut(&StepView<'_, S>) + 'a;

/// Drives episodes of one environment under one run condition.
pub struct Harness<'a, E: Environment> {
    env: &'a mut E,
    condition: RunCondition,
    overseer: Option<&'a mut dyn Overseer<E>>,
    sink: Option<&'a DatasetSink<E::State>>,
    observer: Option<&'a mut StepObserver<'a, E::State>>,
    min_step_interval: Option<Duration>,
}

impl<'a, E: Environment> Harness<'a, E> {
    pub fn new(env: &'a mut E, condition: RunCondition) -> Self {
        Self {
            env,
            condition,
            overseer: None,
            sink: None,
            observer: None,
            min_step_interval: None,
        }
    }

    pub fn overseer(mut self, overseer: &'a mut dyn Overseer<E>) -> Self {
        self.overseer = Some(overseer);
        self
    }

    pub fn sink(mut self, sink: &'a DatasetSink<E::State>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn observer(mut self, observer: &'a mut StepObserver<'a, E::State>) -> Self {
        self.observer = Some(observer);
        self
    }

    /// Cap the simulation speed, in steps per second.
    pub fn pacing(mut self, steps_per_second: Option<f64>) -> Self {
        self.min_step_interval = steps_per_second
            .filter(|r| *r > 0.0 && r.is_finite())
            .map(|r| Duration::from_secs_f64(1.0 / r));
        self
    }

    pub fn env(&self) -> &E {
        self.env
    }

    pub fn run_episode(&mut self, agent: &mut Agent, episode: u64, seed: u64) -> Result<EpisodeMetrics, InterventionError> {
        let transform = agent.config().reward_transform.unwrap_or_else(|| self.env.reward_transform());
        let mut state = self.env.reset(seed);
        let env: &E = self.env;
        let mut m = EpisodeMetrics {
            episode,
            ..Default::default()
        };
        let mut t = 0u64;
        loop {
            let started = Instant::now();
            let key = env.observation_key(&state);
            let ctx = DecisionContext {
                episode,
                step: t,
                score: m.reward,
                requeries: 0,
            };
            let mask = ActionMask::all(env.num_actions());
            // (executed, credited, reward rule, blocks)
            let (executed, credited, rule, blocks) = match self.condition {
                RunCondition::NoOversight => {
                    let a = agent.act(key, mask);
                    if env.is_catastrophe(&state, a) {
                        m.attempted_cat += 1;
                    }
                    (a, a, RewardRule::Env, 0)
                }
                RunCondition::RewardShaping { penalty } => {
                    let a = agent.act(key, mask);
                    if env.is_catastrophe(&state, a) {
                        m.attempted_cat += 1;
                        (a, a, RewardRule::EnvPlus(penalty), 0)
                    } else {
                        (a, a, RewardRule::Env, 0)
                    }
                }
                RunCondition::Hirl => {
                    let overseer = self
                        .overseer
                        .as_deref_mut()
                        .ok_or_else(|| InterventionError::OverseerUnavailable("no overseer attached".into()))?;
                    let i = intercept(env, overseer, agent, &state, transform, ctx, self.sink.is_some())?;
                    m.attempted_cat += u64::from(i.blocks);
                    if let Some(sink) = self.sink {
                        sink.extend(i.records);
                    }
                    let rule = i.penalty.map_or(RewardRule::Env, RewardRule::Replace);
                    (i.executed, i.credited, rule, i.blocks)
                }
            };
            let outcome = env.step(&state, executed)?;
            m.reward += outcome.reward;
            m.steps += 1;
            if outcome.is_catastrophe() {
                m.realized_cat += 1;
            }
            let agent_reward = match rule {
                RewardRule::Env => transform.apply(outcome.reward),
                RewardRule::EnvPlus(p) => transform.apply(outcome.reward + p),
                RewardRule::Replace(p) => transform.apply(p),
            };
            agent.observe(Transition {
                key,
                action: credited,
                reward: agent_reward,
                next_key: env.observation_key(&outcome.next_state),
                done: outcome.done,
            });
            if let Some(o) = self.overseer.as_deref_mut() {
                o.observe_step(env, &outcome.next_state, &DecisionContext { score: m.reward, ..ctx });
            }
            if let Some(obs) = self.observer.as_deref_mut() {
                obs(&StepView {
                    episode,
                    t,
                    state: &state,
                    executed,
                    blocks,
                    outcome: &outcome,
                });
            }
            if let Some(min) = self.min_step_interval {
                let spent = started.elapsed();
                if spent < min {
                    std::thread::sleep(min - spent);
                }
            }
            t += 1;
            let done = outcome.done;
            state = outcome.next_state;
            if done {
                return Ok(m);
            }
        }
    }

    /// Run whole episodes until at least `total_steps` steps have executed.
    pub fn run_steps(
        &mut self,
        agent: &mut Agent,
        run_seed: u64,
        first_episode: u64,
        total_steps: u64,
    ) -> Result<Vec<EpisodeMetrics>, InterventionError> {
        self.run_until(agent, run_seed, first_episode, |done, _| done >= total_steps)
    }

    pub fn run_episodes(
        &mut self,
        agent: &mut Agent,
        run_seed: u64,
        first_episode: u64,
        episodes: u64,
    ) -> Result<Vec<EpisodeMetrics>, InterventionError> {
        self.run_until(agent, run_seed, first_episode, |_, n| n >= episodes)
    }

    /// Run episodes until `stop(steps_so_far, episodes_so_far)` holds; checked
    /// between episodes.
    pub fn run_until(
        &mut self,
        agent: &mut Agent,
        run_seed: u64,
        first_episode: u64,
        mut stop: impl FnMut(u64, u64) -> bool,
    ) -> Result<Vec<EpisodeMetrics>, InterventionError> {
        let mut metrics = Vec::new();
        let mut steps = 0;
        let mut ep = first_episode;
        while !stop(steps, metrics.len() as u64) {
            let m = self.run_episode(agent, ep, crate::mdp::episode_seed(run_seed, ep))?;
            steps += m.steps;
            metrics.push(m);
            ep += 1;
        }
        Ok(metrics)
    }
}

#[derive(Debug, Clone, Copy)]
enum RewardRule {
    Env,
    EnvPlus(f64),
    Replace(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    HumanOversight,
    BlockerTraining,
    BlockerOversight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseBudget {
    Steps(u64),
    /// Stop after the episode in which the dataset reaches this many blocked labels.
    Catastrophes(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub budget: PhaseBudget,
    /// Maximum steps per second while a human oversees.
    #[serde(default)]
    pub pacing: Option<f64>,
}

impl PhaseConfig {
    pub fn human(budget: PhaseBudget) -> Self {
        Self {
            phase: Phase::HumanOversight,
            budget,
            pacing: None,
        }
    }

    pub fn training() -> Self {
        Self {
            phase: Phase::BlockerTraining,
            budget: PhaseBudget::Steps(0),
            pacing: None,
        }
    }

    pub fn blocker(steps: u64) -> Self {
        Self {
            phase: Phase::BlockerOversight,
            budget: PhaseBudget::Steps(steps),
            pacing: None,
        }
    }
}

/// Check that a phase may follow `previous`.
pub fn check_transition(previous: Option<Phase>, next: Phase, has_blocker: bool) -> Result<(), InterventionError> {
    use Phase::*;
    let ok = match (previous, next) {
        (_, HumanOversight) => true,
        (Some(HumanOversight), BlockerTraining) => true,
        (Some(BlockerTraining) | Some(BlockerOversight), BlockerOversight) => has_blocker,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(InterventionError::PhaseOrder(format!("{next:?} cannot follow {previous:?}")))
    }
}

/// Validate a whole phase sequence up front.
pub fn validate_phases(phases: &[PhaseConfig]) -> Result<(), InterventionError> {
    let mut previous = None;
    let mut trained = false;
    for p in phases {
        check_transition(previous, p.phase, trained || p.phase != Phase::BlockerOversight)?;
        trained |= p.phase == Phase::BlockerTraining;
        previous = Some(p.phase);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub phase: Phase,
    pub metrics: Vec<EpisodeMetrics>,
    pub dataset_len: usize,
    pub calibration: Option<CalibrationReport>,
}

impl PhaseReport {
    pub fn steps(&self) -> u64 {
        self.metrics.iter().map(|m| m.steps).sum()
    }

    pub fn realized(&self) -> u64 {
        self.metrics.iter().map(|m| m.realized_cat).sum()
    }

    pub fn attempted(&self) -> u64 {
        self.metrics.iter().map(|m| m.attempted_cat).sum()
    }
}

/// Human oversight, blocker training and blocker oversight over one
/// environment and agent, with an append-only dataset.
pub struct Lifecycle<E: Environment> {
    pub env: E,
    pub agent: Agent,
    pub spec: BlockerSpec,
    dataset: Arc<DatasetSink<E::State>>,
    corrections: Vec<LabelCorrection>,
    blocker: Option<BlockerModel>,
    run_seed: u64,
    next_episode: u64,
    phase: Option<Phase>,
}

impl<E: Environment> Lifecycle<E> {
    pub fn new(env: E, agent: Agent, run_seed: u64) -> Self {
        let spec = BlockerSpec::for_env(&env);
        Self {
            env,
            agent,
            spec,
            dataset: Arc::new(DatasetSink::new()),
            corrections: Vec::new(),
            blocker: None,
            run_seed,
            next_episode: 0,
            phase: None,
        }
    }

    pub fn dataset(&self) -> &DatasetSink<E::State> {
        &self.dataset
    }

    /// Handle on the dataset for readers on other threads.
    pub fn shared_dataset(&self) -> Arc<DatasetSink<E::State>> {
        Arc::clone(&self.dataset)
    }

    pub fn blocker(&self) -> Option<&BlockerModel> {
        self.blocker.as_ref()
    }

    pub fn phase(&self) -> Option<Phase> {
        self.phase
    }

    /// Queue a relabel; it takes effect at the next blocker training.
    pub fn correct_label(&mut self, correction: LabelCorrection) -> Result<(), InterventionError> {
        if correction.record >= self.dataset.len() {
            return Err(InterventionError::Dataset(format!(
                "correction for record {} of {}",
                correction.record,
                self.dataset.len()
            )));
        }
        self.corrections.push(correction);
        Ok(())
    }

    pub fn corrections(&self) -> &[LabelCorrection] {
        &self.corrections
    }

    /// Swap in a different agent, e.g. to reuse a trained blocker.
    pub fn replace_agent(&mut self, agent: Agent) -> Agent {
        std::mem::replace(&mut self.agent, agent)
    }

    /// Install an externally trained blocker.
    pub fn install_blocker(&mut self, model: BlockerModel) -> Result<(), InterventionError> {
        model.check_env(&self.env)?;
        self.blocker = Some(model);
        if self.phase.is_none() || self.phase == Some(Phase::HumanOversight) {
            self.phase = Some(Phase::BlockerTraining);
        }
        Ok(())
    }

    pub fn human_phase(
        &mut self,
        overseer: &mut dyn Overseer<E>,
        budget: PhaseBudget,
        pacing: Option<f64>,
    ) -> Result<PhaseReport, InterventionError> {
        check_transition(self.phase, Phase::HumanOversight, self.blocker.is_some())?;
        self.phase = Some(Phase::HumanOversight);
        let first = self.next_episode;
        let dataset = &*self.dataset;
        let mut harness = Harness::new(&mut self.env, RunCondition::Hirl)
            .overseer(overseer)
            .sink(dataset)
            .pacing(pacing);
        let metrics = match budget {
            PhaseBudget::Steps(n) => harness.run_steps(&mut self.agent, self.run_seed, first, n)?,
            PhaseBudget::Catastrophes(n) => harness.run_until(&mut self.agent, self.run_seed, first, |_, _| {
                dataset.blocked_count() as u64 >= n
            })?,
        };
        self.next_episode += metrics.len() as u64;
        Ok(PhaseReport {
            phase: Phase::HumanOversight,
            metrics,
            dataset_len: self.dataset.len(),
            calibration: None,
        })
    }

    pub fn train_blocker(&mut self) -> Result<PhaseReport, InterventionError> {
        check_transition(self.phase, Phase::BlockerTraining, self.blocker.is_some())?;
        let mut examples = self.dataset.examples();
        apply_corrections(&mut examples, &self.corrections)?;
        if examples.is_empty() {
            return Err(InterventionError::CalibrationFailed("dataset is empty".into()));
        }
        let (model, report) = build_blocker(&self.spec, &examples).map_err(|e| match e {
            BlockerError::DegenerateDataset { .. } | BlockerError::CalibrationFailed(_) => {
                InterventionError::CalibrationFailed(e.to_string())
            }
            other => InterventionError::Blocker(other),
        })?;
        self.blocker = Some(model);
        self.phase = Some(Phase::BlockerTraining);
        Ok(PhaseReport {
            phase: Phase::BlockerTraining,
            metrics: Vec::new(),
            dataset_len: examples.len(),
            calibration: Some(report),
        })
    }

    pub fn blocker_phase(&mut self, steps: u64) -> Result<PhaseReport, InterventionError> {
        check_transition(self.phase, Phase::BlockerOversight, self.blocker.is_some())?;
        self.phase = Some(Phase::BlockerOversight);
        let model = self.blocker.as_ref().expect("checked above");
        let mut overseer = BlockerOverseer::new(model, &self.env)?;
        let first = self.next_episode;
        let metrics = Harness::new(&mut self.env, RunCondition::Hirl)
            .overseer(&mut overseer)
            .run_steps(&mut self.agent, self.run_seed, first, steps)?;
        self.next_episode += metrics.len() as u64;
        Ok(PhaseReport {
            phase: Phase::BlockerOversight,
            metrics,
            dataset_len: self.dataset.len(),
            calibration: None,
        })
    }

    /// Run a validated phase sequence; `human` answers every human phase.
    pub fn run(
        &mut self,
        phases: &[PhaseConfig],
        human: &mut dyn Overseer<E>,
    ) -> Result<Vec<PhaseReport>, InterventionError> {
        validate_phases(phases)?;
        let mut reports = Vec::new();
        for p in phases {
            let report = match p.phase {
                Phase::HumanOversight => self.human_phase(human, p.budget, p.pacing)?,
                Phase::BlockerTraining => self.train_blocker()?,
                Phase::BlockerOversight => {
                    let steps = match p.budget {
                        PhaseBudget::Steps(n) => n,
                        PhaseBudget::Catastrophes(_) => {
                            return Err(InterventionError::PhaseOrder(
                                "blocker oversight takes a step budget".into(),
                            ))
                        }
                    };
                    self.blocker_phase(steps)?
                }
            };
            reports.push(report);
        }
        Ok(reports)
    }
}

impl<S> From<&InterventionRecord<S>> for crate::cost::LabelEntry {
    fn from(r: &InterventionRecord<S>) -> Self {
        Self {
            blocked: r.blocked,
            label_latency: r.label_latency,
        }
    }
}

impl From<&RecordSummary> for crate::cost::LabelEntry {
    fn from(r: &RecordSummary) -> Self {
        Self {
            blocked: r.blocked,
            label_latency: r.label_latency,
        }
    }
}
