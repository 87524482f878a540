//! Tabular learners: epsilon-greedy Q-learning and softmax REINFORCE with a
//! per-state mean-return baseline and an entropy bonus.
//!
//! Both index their tables by [`StateKey`] and accept an [`ActionMask`] so
//! that an overseer can prune blocked proposals and re-query within a step.

use std::collections::{BTreeMap, HashMap};
use std::hash::{BuildHasherDefault, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{ActionId, ActionMask, RewardTransform, StateKey};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    ConfigInvalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    TabularQ,
    SoftmaxPg,
}

impl std::str::FromStr for AgentKind {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tabular-q" => Ok(AgentKind::TabularQ),
            "softmax-pg" => Ok(AgentKind::SoftmaxPg),
            other => Err(AgentError::ConfigInvalid(format!("unknown agent {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionMode {
    Stochastic,
    Deterministic,
}

/// Linear decay from `start` to `end` over `decay_steps`, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }

    /// Decay over the first half of a run of `total_steps`.
    pub fn half_of(total_steps: u64) -> Self {
        Self {
            start: 1.0,
            end: 0.01,
            decay_steps: total_steps / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub learning_rate: f64,
    pub discount: f64,
    /// Entropy bonus weight (policy gradient only).
    pub entropy_bonus: f64,
    /// Exploration schedule (Q-learning only).
    pub epsilon: EpsilonSchedule,
    /// Overrides the environment's reward transform when set.
    pub reward_transform: Option<RewardTransform>,
    pub action_mode: ActionMode,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self::tabular_q(1_000_000)
    }
}

impl AgentConfig {
    pub const DEFAULT_PG_LEARNING_RATE: f64 = 1e-4;
    pub const DEFAULT_Q_LEARNING_RATE: f64 = 0.1;

    pub fn tabular_q(total_steps: u64) -> Self {
        Self {
            kind: AgentKind::TabularQ,
            learning_rate: Self::DEFAULT_Q_LEARNING_RATE,
            discount: 0.99,
            entropy_bonus: 0.0,
            epsilon: EpsilonSchedule::half_of(total_steps),
            reward_transform: None,
            action_mode: ActionMode::Stochastic,
            seed: 0,
        }
    }

    pub fn softmax_pg() -> Self {
        Self {
            kind: AgentKind::SoftmaxPg,
            learning_rate: Self::DEFAULT_PG_LEARNING_RATE,
            discount: 0.99,
            entropy_bonus: 0.01,
            epsilon: EpsilonSchedule {
                start: 0.0,
                end: 0.0,
                decay_steps: 0,
            },
            reward_transform: None,
            action_mode: ActionMode::Stochastic,
            seed: 0,
        }
    }

    pub fn for_kind(kind: AgentKind, total_steps: u64) -> Self {
        match kind {
            AgentKind::TabularQ => Self::tabular_q(total_steps),
            AgentKind::SoftmaxPg => Self::softmax_pg(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::ConfigInvalid(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(self.entropy_bonus >= 0.0 && self.entropy_bonus.is_finite()) {
            return bad("entropy_bonus must be finite and >= 0");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        let eps = self.epsilon;
        if !((0.0..=1.0).contains(&eps.start) && (0.0..=1.0).contains(&eps.end)) {
            return bad("epsilon must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One learning signal. `next_key == key` with `done == false` for the
/// virtual transitions generated by pruned proposals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub key: StateKey,
    pub action: ActionId,
    pub reward: f64,
    pub next_key: StateKey,
    pub done: bool,
}

/// Keys are already well-mixed hashes; pass them through.
#[derive(Default)]
struct KeyHasher(u64);

impl Hasher for KeyHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 = (self.0 << 8) | u64::from(*b);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = v;
    }
}

type KeyMap<V> = HashMap<StateKey, V, BuildHasherDefault<KeyHasher>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    /// Q-values or logits, one per action.
    pub values: Vec<f64>,
    pub visits: u64,
    /// Running sum of returns observed from this state (baseline).
    #[serde(default)]
    pub return_sum: f64,
}

impl TableEntry {
    fn new(num_actions: usize) -> Self {
        Self {
            values: vec![0.0; num_actions],
            visits: 0,
            return_sum: 0.0,
        }
    }

    pub fn baseline(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.return_sum / self.visits as f64
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Gradient of `log softmax(z)[action]` with respect to `z`.
pub fn grad_log_prob(logits: &[f64], action: ActionId) -> Vec<f64> {
    let probs = softmax(logits);
    probs
        .iter()
        .enumerate()
        .map(|(j, p)| if j == action.0 { 1.0 - p } else { -p })
        .collect()
}

/// Gradient of the policy entropy with respect to the logits.
pub fn grad_entropy(logits: &[f64]) -> Vec<f64> {
    let probs = softmax(logits);
    let h = entropy(&probs);
    probs
        .iter()
        .map(|&p| if p > 0.0 { -p * (p.ln() + h) } else { 0.0 })
        .collect()
}

/// Lowest-index argmax over the actions in `mask`.
pub fn masked_argmax(values: &[f64], mask: ActionMask) -> ActionId {
    let mut best: Option<(usize, f64)> = None;
    for a in mask.iter().take_while(|a| a.0 < values.len()) {
        let v = values[a.0];
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((a.0, v));
        }
    }
    ActionId(best.map_or(0, |(i, _)| i))
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    num_actions: usize,
    table: KeyMap<TableEntry>,
    rng: ChaCha8Rng,
    steps: u64,
    episode: Vec<Transition>,
}

impl Agent {
    pub fn new(config: AgentConfig, num_actions: usize) -> Result<Self, AgentError> {
        config.validate()?;
        if num_actions == 0 || num_actions > ActionMask::CAPACITY {
            return Err(AgentError::ConfigInvalid(format!("{num_actions} actions")));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            num_actions,
            table: KeyMap::default(),
            steps: 0,
            episode: Vec::new(),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn kind(&self) -> AgentKind {
        self.config.kind
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn num_states(&self) -> usize {
        self.table.len()
    }

    pub fn set_learning(&mut self, learning_rate: f64) -> Result<(), AgentError> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(AgentError::ConfigInvalid("learning_rate must be >= 0".into()));
        }
        self.config.learning_rate = learning_rate;
        Ok(())
    }

    pub fn set_mode(&mut self, mode: ActionMode) {
        self.config.action_mode = mode;
    }

    /// Replace the exploration schedule, e.g. when continuing a trained agent.
    pub fn set_epsilon(&mut self, schedule: EpsilonSchedule) {
        self.config.epsilon = schedule;
    }

    /// Reseed the action-sampling stream.
    pub fn reseed(&mut self, seed: u64) {
        self.config.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn entry(&self, key: StateKey) -> Option<&TableEntry> {
        self.table.get(&key)
    }

    /// Current Q-values or logits of a state (zeros if unseen).
    pub fn values(&self, key: StateKey) -> Vec<f64> {
        self.table
            .get(&key)
            .map_or_else(|| vec![0.0; self.num_actions], |e| e.values.clone())
    }

    pub fn set_values(&mut self, key: StateKey, values: Vec<f64>) {
        assert_eq!(values.len(), self.num_actions);
        self.table
            .entry(key)
            .or_insert_with(|| TableEntry::new(self.num_actions))
            .values = values;
    }

    /// Action probabilities under the unmasked policy.
    pub fn policy(&self, key: StateKey) -> Vec<f64> {
        let values = self.values(key);
        match self.config.kind {
            AgentKind::SoftmaxPg => softmax(&values),
            AgentKind::TabularQ => {
                let eps = self.current_epsilon();
                let greedy = masked_argmax(&values, ActionMask::all(self.num_actions));
                let n = self.num_actions as f64;
                (0..self.num_actions)
                    .map(|a| eps / n + if a == greedy.0 { 1.0 - eps } else { 0.0 })
                    .collect()
            }
        }
    }

    pub fn current_epsilon(&self) -> f64 {
        match self.config.action_mode {
            ActionMode::Deterministic => 0.0,
            ActionMode::Stochastic => self.config.epsilon.at(self.steps),
        }
    }

    pub fn act(&mut self, key: StateKey, mask: ActionMask) -> ActionId {
        let mask = if mask.is_empty() {
            ActionMask::all(self.num_actions)
        } else {
            mask
        };
        let values = match self.table.get(&key) {
            Some(e) => e.values.as_slice(),
            None => return self.act_unseen(mask),
        };
        if self.config.action_mode == ActionMode::Deterministic {
            return masked_argmax(values, mask);
        }
        match self.config.kind {
            AgentKind::TabularQ => {
                let eps = self.config.epsilon.at(self.steps);
                if self.rng.random::<f64>() < eps {
                    self.uniform(mask)
                } else {
                    masked_argmax(values, mask)
                }
            }
            AgentKind::SoftmaxPg => {
                let masked: Vec<f64> = mask.iter().map(|a| values[a.0]).collect();
                let probs = softmax(&masked);
                let u = self.rng.random::<f64>();
                let mut acc = 0.0;
                let actions: Vec<ActionId> = mask.iter().collect();
                for (a, p) in actions.iter().zip(&probs) {
                    acc += p;
                    if u < acc {
                        return *a;
                    }
                }
                *actions.last().expect("mask nonempty")
            }
        }
    }

    fn act_unseen(&mut self, mask: ActionMask) -> ActionId {
        let zeros = vec![0.0; self.num_actions];
        match (self.config.action_mode, self.config.kind) {
            (ActionMode::Deterministic, _) => masked_argmax(&zeros, mask),
            (ActionMode::Stochastic, AgentKind::SoftmaxPg) => self.uniform(mask),
            (ActionMode::Stochastic, AgentKind::TabularQ) => {
                let eps = self.config.epsilon.at(self.steps);
                if self.rng.random::<f64>() < eps {
                    self.uniform(mask)
                } else {
                    masked_argmax(&zeros, mask)
                }
            }
        }
    }

    fn uniform(&mut self, mask: ActionMask) -> ActionId {
        let i = self.rng.random_range(0..mask.len());
        mask.iter().nth(i).expect("index within mask")
    }

    /// Feed one transition. Q-learning updates immediately; the policy
    /// gradient learner buffers until [`Agent::end_episode`].
    pub fn observe(&mut self, t: Transition) {
        self.steps += 1;
        match self.config.kind {
            AgentKind::TabularQ => self.q_update(t),
            AgentKind::SoftmaxPg => {
                if self.config.learning_rate > 0.0 {
                    self.episode.push(t);
                }
            }
        }
        if t.done {
            self.end_episode();
        }
    }

    pub fn q_update(&mut self, t: Transition) {
        let alpha = self.config.learning_rate;
        if alpha == 0.0 {
            return;
        }
        let bootstrap = if t.done {
            0.0
        } else {
            self.table
                .get(&t.next_key)
                .map_or(0.0, |e| e.values.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        };
        let target = t.reward + self.config.discount * bootstrap;
        let n = self.num_actions;
        let e = self.table.entry(t.key).or_insert_with(|| TableEntry::new(n));
        e.visits += 1;
        let q = &mut e.values[t.action.0];
        *q += alpha * (target - *q);
    }

    /// Apply the buffered policy-gradient update, if any, and clear the buffer.
    pub fn end_episode(&mut self) {
        if self.config.kind != AgentKind::SoftmaxPg {
            return;
        }
        let episode = std::mem::take(&mut self.episode);
        self.pg_update(&episode);
    }

    /// REINFORCE on one episode with per-state mean-return baseline and
    /// entropy bonus, applied step by step in time order.
    pub fn pg_update(&mut self, episode: &[Transition]) {
        let alpha = self.config.learning_rate;
        if alpha == 0.0 || episode.is_empty() {
            return;
        }
        let gamma = self.config.discount;
        let beta = self.config.entropy_bonus;
        let mut returns = vec![0.0; episode.len()];
        let mut g = 0.0;
        for (i, t) in episode.iter().enumerate().rev() {
            g = t.reward + gamma * g;
            returns[i] = g;
        }
        let n = self.num_actions;
        for (t, g) in episode.iter().zip(returns) {
            let e = self.table.entry(t.key).or_insert_with(|| TableEntry::new(n));
            let advantage = g - e.baseline();
            let glp = grad_log_prob(&e.values, t.action);
            let gh = grad_entropy(&e.values);
            for j in 0..n {
                e.values[j] += alpha * (advantage * glp[j] + beta * gh[j]);
            }
            e.visits += 1;
            e.return_sum += g;
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: Checkpoint::VERSION,
            config: self.config.clone(),
            num_actions: self.num_actions,
            steps: self.steps,
            table: self.table.iter().map(|(k, v)| (k.0.to_string(), v.clone())).collect(),
        }
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self, AgentError> {
        if cp.version != Checkpoint::VERSION {
            return Err(AgentError::Checkpoint(format!("unsupported version {}", cp.version)));
        }
        let mut agent = Agent::new(cp.config, cp.num_actions)?;
        agent.steps = cp.steps;
        for (k, v) in cp.table {
            let key = k
                .parse::<u64>()
                .map_err(|e| AgentError::Checkpoint(format!("bad key {k:?}: {e}")))?;
            if v.values.len() != cp.num_actions || v.values.iter().any(|x| !x.is_finite()) {
                return Err(AgentError::Checkpoint(format!("bad entry for {k}")));
            }
            agent.table.insert(StateKey(key), v);
        }
        Ok(agent)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), AgentError> {
        let json = serde_json::to_vec(&self.checkpoint()).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, AgentError> {
        let bytes = std::fs::read(path)?;
        let cp: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(cp)
    }

    /// Bit-level fingerprint of the table, independent of iteration order.
    pub fn table_fingerprint(&self) -> u64 {
        let mut keys: Vec<&StateKey> = self.table.keys().collect();
        keys.sort();
        let mut h = crate::mdp::StableHasher::new();
        for k in keys {
            let e = &self.table[k];
            h.write_u64(k.0).write_u64(e.visits).write_u64(e.return_sum.to_bits());
            for v in &e.values {
                h.write_u64(v.to_bits());
            }
        }
        h.finish().0
    }
}

/// JSON table dump, keyed by state hash in sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: AgentConfig,
    pub num_actions: usize,
    pub steps: u64,
    pub table: BTreeMap<String, TableEntry>,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;
}
