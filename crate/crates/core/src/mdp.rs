//! Environment abstraction shared by every gridworld in the crate.
//!
//! An environment is a discrete MDP: an ordered action set, a discount factor,
//! and a deterministic `step` that evaluates transition and reward together.
//! Stochasticity (ball spawn rows and the like) is drawn from a counter-based
//! generator keyed by the episode seed and an in-state counter, so stepping is
//! a pure function of `(env config, episode seed, state, action)` and any
//! trajectory replays from its seed and action list alone.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("unknown action index {index} (environment has {count} actions)")]
    UnknownAction { index: usize, count: usize },
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
}

/// Index into an environment's action set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub usize);

impl ActionId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Stable 64-bit key of a state record (or of a projection of one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateKey(pub u64);

/// The static part of the MDP tuple. Transition and reward live behind
/// [`Environment::step`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub action_names: Vec<String>,
    pub discount: f64,
}

impl MdpSpec {
    pub fn new<S: Into<String>>(
        action_names: impl IntoIterator<Item = S>,
        discount: f64,
    ) -> Result<Self, MdpError> {
        let action_names: Vec<String> = action_names.into_iter().map(Into::into).collect();
        if action_names.is_empty() {
            return Err(MdpError::ConfigInvalid("action set is empty".into()));
        }
        if action_names.len() > ActionMask::CAPACITY {
            return Err(MdpError::ConfigInvalid("too many actions".into()));
        }
        for (i, name) in action_names.iter().enumerate() {
            if action_names[..i].contains(name) {
                return Err(MdpError::ConfigInvalid(format!("duplicate action {name}")));
            }
        }
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(MdpError::ConfigInvalid(format!(
                "discount {discount} outside (0, 1]"
            )));
        }
        Ok(Self {
            action_names,
            discount,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.action_names.len()
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionId> {
        (0..self.num_actions()).map(ActionId)
    }

    pub fn action_name(&self, action: ActionId) -> Option<&str> {
        self.action_names.get(action.0).map(String::as_str)
    }

    pub fn action_by_name(&self, name: &str) -> Option<ActionId> {
        self.action_names.iter().position(|n| n == name).map(ActionId)
    }

    pub fn check(&self, action: ActionId) -> Result<(), MdpError> {
        if action.0 < self.num_actions() {
            Ok(())
        } else {
            Err(MdpError::UnknownAction {
                index: action.0,
                count: self.num_actions(),
            })
        }
    }
}

/// Set of actions an agent may still propose in the current step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionMask(u32);

impl ActionMask {
    pub const CAPACITY: usize = 32;

    pub fn all(n: usize) -> Self {
        debug_assert!(n <= Self::CAPACITY);
        if n == Self::CAPACITY {
            Self(u32::MAX)
        } else {
            Self((1u32 << n) - 1)
        }
    }

    pub fn contains(self, action: ActionId) -> bool {
        action.0 < Self::CAPACITY && self.0 & (1 << action.0) != 0
    }

    pub fn remove(&mut self, action: ActionId) {
        if action.0 < Self::CAPACITY {
            self.0 &= !(1 << action.0);
        }
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = ActionId> {
        (0..Self::CAPACITY)
            .filter(move |i| self.0 & (1 << i) != 0)
            .map(ActionId)
    }
}

/// Events emitted by a single step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepEvent {
    RealizedCatastrophe,
    LevelAdvance,
    LifeLost,
}

impl StepEvent {
    const ALL: [StepEvent; 3] = [
        StepEvent::RealizedCatastrophe,
        StepEvent::LevelAdvance,
        StepEvent::LifeLost,
    ];

    fn bit(self) -> u8 {
        match self {
            StepEvent::RealizedCatastrophe => 1,
            StepEvent::LevelAdvance => 2,
            StepEvent::LifeLost => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct EventFlags(u8);

impl EventFlags {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn insert(&mut self, event: StepEvent) {
        self.0 |= event.bit();
    }

    pub fn with(mut self, event: StepEvent) -> Self {
        self.insert(event);
        self
    }

    pub fn contains(self, event: StepEvent) -> bool {
        self.0 & event.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = StepEvent> {
        StepEvent::ALL.into_iter().filter(move |e| self.contains(*e))
    }
}

impl Serialize for EventFlags {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for EventFlags {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let events = Vec::<StepEvent>::deserialize(deserializer)?;
        let mut flags = EventFlags::empty();
        for e in events {
            flags.insert(e);
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<S> {
    pub next_state: S,
    pub reward: f64,
    pub done: bool,
    pub flags: EventFlags,
}

impl<S> StepOutcome<S> {
    pub fn is_catastrophe(&self) -> bool {
        self.flags.contains(StepEvent::RealizedCatastrophe)
    }
}

/// How an agent sees environment rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum RewardTransform {
    Identity,
    /// Divide by the given positive constant.
    Scale(f64),
    /// Clip into `[-limit, limit]`.
    Clip(f64),
}

impl RewardTransform {
    pub fn apply(self, reward: f64) -> f64 {
        match self {
            RewardTransform::Identity => reward,
            RewardTransform::Scale(d) => reward / d,
            RewardTransform::Clip(limit) => reward.clamp(-limit, limit),
        }
    }
}

/// How a blocked action is replaced before reaching the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "action")]
pub enum ReplacementStrategy {
    FixedAction(ActionId),
    RemoveFireComponent,
    ActionPruning,
}

/// Structured frame for remote rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// ASCII rows, top to bottom.
    pub grid: Vec<String>,
    pub entities: Vec<Entity>,
    /// Rows the client should shade as dangerous.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zone_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub kind: String,
    pub row: usize,
    pub col: usize,
}

/// A deterministic discrete gridworld.
pub trait Environment: Send + Sync {
    type State: Clone + PartialEq + fmt::Debug + Send + Sync + Serialize + serde::de::DeserializeOwned;

    fn name(&self) -> &'static str;

    fn spec(&self) -> &MdpSpec;

    /// Start an episode. Reseeds the environment's draw stream.
    fn reset(&mut self, seed: u64) -> Self::State;

    fn step(&self, state: &Self::State, action: ActionId)
        -> Result<StepOutcome<Self::State>, MdpError>;

    /// Ground-truth catastrophe predicate on the proposed pair, evaluated
    /// before execution. Agrees with the `RealizedCatastrophe` flag of `step`.
    fn is_catastrophe(&self, state: &Self::State, action: ActionId) -> bool;

    fn feature_dim(&self) -> usize;

    /// Fixed-length feature vector of a proposed pair.
    fn features(&self, state: &Self::State, action: ActionId) -> Vec<f64>;

    /// Canonical hash of the full state record.
    fn state_key(&self, state: &Self::State) -> StateKey;

    /// Hash of the decision-relevant projection that tabular agents index by.
    /// Episode bookkeeping (step counters, ball counts) is left out.
    fn observation_key(&self, state: &Self::State) -> StateKey;

    /// Same movement with any shooting component removed.
    fn without_fire(&self, action: ActionId) -> ActionId {
        action
    }

    fn default_replacement(&self) -> ReplacementStrategy;

    fn reward_transform(&self) -> RewardTransform;

    /// Best undiscounted episode return without oversight.
    fn max_episode_return(&self) -> f64;

    /// Penalty sized to exceed any attainable return by 10.
    fn default_penalty(&self) -> f64 {
        -(self.max_episode_return() + 10.0)
    }

    fn frame(&self, state: &Self::State) -> Frame;

    fn num_actions(&self) -> usize {
        self.spec().num_actions()
    }
}

/// FNV-1a over a canonical byte encoding.
#[derive(Debug, Clone)]
pub struct StableHasher(u64);

impl Default for StableHasher {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl StableHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) -> &mut Self {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self
    }

    pub fn write_u64(&mut self, v: u64) -> &mut Self {
        self.write_bytes(&v.to_le_bytes())
    }

    pub fn finish(&self) -> StateKey {
        // FNV's low bits mix poorly for short inputs; finish with a murmur avalanche.
        StateKey(mix64(self.0))
    }
}

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    z = (z ^ (z >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    z ^ (z >> 33)
}

/// Counter-based draw: a pure function of `(seed, stream, counter)`.
pub fn counter_draw(seed: u64, stream: u64, counter: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(counter.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = mix64(z ^ 0x94d0_49bb_1331_11eb);
    mix64(z.wrapping_add(0x9e37_79b9_7f4a_7c15))
}

/// Per-episode seed derived from a run seed.
pub fn episode_seed(run_seed: u64, episode: u64) -> u64 {
    counter_draw(run_seed, 0x5eed, episode)
}

/// One executed step of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep<S> {
    pub state: S,
    pub action: ActionId,
    pub outcome: StepOutcome<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    pub episode: u64,
    pub seed: u64,
    pub steps: Vec<TrajectoryStep<S>>,
}

impl<S: Clone + PartialEq> Trajectory<S> {
    pub fn new(episode: u64, seed: u64) -> Self {
        Self {
            episode,
            seed,
            steps: Vec::new(),
        }
    }

    pub fn actions(&self) -> Vec<ActionId> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// Roll out an action list from a fresh reset.
    pub fn record<E>(env: &mut E, episode: u64, seed: u64, actions: &[ActionId]) -> Result<Self, MdpError>
    where
        E: Environment<State = S>,
    {
        let mut traj = Self::new(episode, seed);
        let mut state = env.reset(seed);
        for &action in actions {
            let outcome = env.step(&state, action)?;
            let next = outcome.next_state.clone();
            let done = outcome.done;
            traj.steps.push(TrajectoryStep {
                state,
                action,
                outcome,
            });
            state = next;
            if done {
                break;
            }
        }
        Ok(traj)
    }

    /// True iff replaying this trajectory's actions from its seed reproduces it.
    pub fn replays<E>(&self, env: &mut E) -> Result<bool, MdpError>
    where
        E: Environment<State = S>,
    {
        let replay = Self::record(env, self.episode, self.seed, &self.actions())?;
        Ok(replay == *self)
    }
}

/// One line of the trajectory replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayLine {
    pub ep: u64,
    pub t: u64,
    pub state_hash: u64,
    pub action: usize,
    pub reward: f64,
    pub flags: EventFlags,
}

pub fn write_replay<E: Environment, W: Write>(
    env: &E,
    trajectory: &Trajectory<E::State>,
    mut out: W,
) -> std::io::Result<()> {
    for (t, step) in trajectory.steps.iter().enumerate() {
        let line = ReplayLine {
            ep: trajectory.episode,
            t: t as u64,
            state_hash: env.state_key(&step.state).0,
            action: step.action.0,
            reward: step.outcome.reward,
            flags: step.outcome.flags,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_replay<R: BufRead>(input: R) -> std::io::Result<Vec<ReplayLine>> {
    let mut lines = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push(serde_json::from_str(&line)?);
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_rejects_bad_action_sets() {
        assert!(MdpSpec::new(Vec::<String>::new(), 0.99).is_err());
        assert!(MdpSpec::new(["Up", "Up"], 0.99).is_err());
        assert!(MdpSpec::new(["Up"], 0.0).is_err());
        assert!(MdpSpec::new(["Up"], 1.5).is_err());
        let spec = MdpSpec::new(["Up", "Down"], 1.0).unwrap();
        assert_eq!(spec.action_by_name("Down"), Some(ActionId(1)));
        assert!(spec.check(ActionId(2)).is_err());
    }

    #[test]
    fn mask_tracks_removals() {
        let mut m = ActionMask::all(3);
        assert_eq!(m.len(), 3);
        m.remove(ActionId(1));
        assert!(!m.contains(ActionId(1)));
        assert_eq!(m.iter().collect::<Vec<_>>(), vec![ActionId(0), ActionId(2)]);
    }

    #[test]
    fn flags_serialize_as_names() {
        let flags = EventFlags::empty()
            .with(StepEvent::RealizedCatastrophe)
            .with(StepEvent::LifeLost);
        let json = serde_json::to_string(&flags).unwrap();
        assert_eq!(json, r#"["RealizedCatastrophe","LifeLost"]"#);
        let back: EventFlags = serde_json::from_str(&json).unwrap();
        assert_eq!(back, flags);
    }

    #[test]
    fn counter_draw_is_pure() {
        assert_eq!(counter_draw(7, 1, 2), counter_draw(7, 1, 2));
        assert_ne!(counter_draw(7, 1, 2), counter_draw(7, 1, 3));
        assert_ne!(counter_draw(7, 1, 2), counter_draw(8, 1, 2));
    }

    #[test]
    fn reward_transforms() {
        assert_eq!(RewardTransform::Scale(5.0).apply(25.0), 5.0);
        assert_eq!(RewardTransform::Clip(1.0).apply(-14.0), -1.0);
        assert_eq!(RewardTransform::Identity.apply(-20.0), -20.0);
    }
}
