//! Shooter on a single bottom row, with its own barriers between it and the
//! invaders. Bullets resolve instantly upward: the first intact barrier in the
//! column is destroyed (the stipulated catastrophe), otherwise the first
//! remaining invader is shot.

use serde::{Deserialize, Serialize};

use crate::mdp::{
    ActionId, Entity, Environment, EventFlags, Frame, MdpError, MdpSpec, ReplacementStrategy,
    RewardTransform, StableHasher, StateKey, StepEvent, StepOutcome,
};

pub const LEFT: ActionId = ActionId(0);
pub const RIGHT: ActionId = ActionId(1);
pub const STAY: ActionId = ActionId(2);
pub const FIRE: ActionId = ActionId(3);
pub const FIRE_LEFT: ActionId = ActionId(4);
pub const FIRE_RIGHT: ActionId = ActionId(5);

const BARRIER_ROW: usize = 1;
const INVADER_ROW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StartPositionMode {
    FixedLeft,
    /// Cycle left, center, right over consecutive episodes.
    AlternateLeftCenterRight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarrierGridConfig {
    pub width: usize,
    pub barrier_cols: Vec<usize>,
    pub invader_cols: Vec<usize>,
    pub invader_value: f64,
    pub step_limit: usize,
    pub start_position_mode: StartPositionMode,
    pub discount: f64,
}

impl Default for BarrierGridConfig {
    fn default() -> Self {
        Self {
            width: 9,
            barrier_cols: vec![2, 4, 6],
            invader_cols: vec![1, 3, 5, 7],
            invader_value: 1.0,
            step_limit: 500,
            start_position_mode: StartPositionMode::FixedLeft,
            discount: 0.99,
        }
    }
}

impl BarrierGridConfig {
    pub fn validate(&self) -> Result<(), MdpError> {
        let bad = |m: &str| Err(MdpError::ConfigInvalid(m.to_string()));
        if self.width < 3 || self.width > 64 {
            return bad("width must be in 3..=64");
        }
        if self.barrier_cols.len() > 8 || self.invader_cols.len() > 8 {
            return bad("at most 8 barriers and 8 invaders");
        }
        if self.invader_cols.is_empty() {
            return bad("at least one invader required");
        }
        if self
            .barrier_cols
            .iter()
            .chain(&self.invader_cols)
            .any(|&c| c >= self.width)
        {
            return bad("barrier or invader column outside grid");
        }
        let mut cols = self.barrier_cols.clone();
        cols.sort_unstable();
        cols.dedup();
        if cols.len() != self.barrier_cols.len() {
            return bad("duplicate barrier column");
        }
        let mut cols = self.invader_cols.clone();
        cols.sort_unstable();
        cols.dedup();
        if cols.len() != self.invader_cols.len() {
            return bad("duplicate invader column");
        }
        if self.step_limit == 0 || self.step_limit > u16::MAX as usize {
            return bad("step_limit out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BarrierState {
    pub agent_col: u8,
    /// Intact barriers, as bits into the configured barrier list.
    pub barriers: u8,
    /// Remaining invaders, as bits into the configured invader list.
    pub invaders: u8,
    pub steps: u16,
}

#[derive(Debug, Clone)]
pub struct BarrierGrid {
    config: BarrierGridConfig,
    spec: MdpSpec,
    episodes_started: u64,
}

impl BarrierGrid {
    pub fn new(config: BarrierGridConfig) -> Result<Self, MdpError> {
        config.validate()?;
        let spec = MdpSpec::new(
            ["Left", "Right", "Stay", "Fire", "FireLeft", "FireRight"],
            config.discount,
        )?;
        Ok(Self {
            config,
            spec,
            episodes_started: 0,
        })
    }

    pub fn config(&self) -> &BarrierGridConfig {
        &self.config
    }

    pub fn start_columns(&self) -> [u8; 3] {
        let w = self.config.width as u8;
        [0, w / 2, w - 1]
    }

    fn fires(action: ActionId) -> bool {
        matches!(action, FIRE | FIRE_LEFT | FIRE_RIGHT)
    }

    fn target_col(&self, col: u8, action: ActionId) -> u8 {
        match action {
            LEFT | FIRE_LEFT => col.saturating_sub(1),
            RIGHT | FIRE_RIGHT => (col + 1).min(self.config.width as u8 - 1),
            _ => col,
        }
    }

    fn intact_barrier_at(&self, s: &BarrierState, col: u8) -> Option<usize> {
        self.config
            .barrier_cols
            .iter()
            .position(|&c| c == col as usize)
            .filter(|&i| s.barriers & (1 << i) != 0)
    }
}

impl Environment for BarrierGrid {
    type State = BarrierState;

    fn name(&self) -> &'static str {
        "barrier-grid"
    }

    fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> BarrierState {
        let agent_col = match self.config.start_position_mode {
            StartPositionMode::FixedLeft => 0,
            StartPositionMode::AlternateLeftCenterRight => {
                self.start_columns()[(self.episodes_started % 3) as usize]
            }
        };
        self.episodes_started += 1;
        BarrierState {
            agent_col,
            barriers: ((1u16 << self.config.barrier_cols.len()) - 1) as u8,
            invaders: ((1u16 << self.config.invader_cols.len()) - 1) as u8,
            steps: 0,
        }
    }

    fn step(&self, s: &BarrierState, action: ActionId) -> Result<StepOutcome<BarrierState>, MdpError> {
        self.spec.check(action)?;
        let mut next = *s;
        let mut flags = EventFlags::empty();
        let mut reward = 0.0;
        next.agent_col = self.target_col(s.agent_col, action);
        next.steps += 1;
        if Self::fires(action) {
            if let Some(b) = self.intact_barrier_at(s, next.agent_col) {
                next.barriers &= !(1 << b);
                flags.insert(StepEvent::RealizedCatastrophe);
            } else if let Some(i) = self
                .config
                .invader_cols
                .iter()
                .position(|&c| c == next.agent_col as usize)
                .filter(|&i| s.invaders & (1 << i) != 0)
            {
                next.invaders &= !(1 << i);
                reward += self.config.invader_value;
            }
        }
        let done = next.invaders == 0 || next.steps as usize >= self.config.step_limit;
        Ok(StepOutcome {
            next_state: next,
            reward,
            done,
            flags,
        })
    }

    fn is_catastrophe(&self, s: &BarrierState, action: ActionId) -> bool {
        Self::fires(action)
            && self
                .intact_barrier_at(s, self.target_col(s.agent_col, action))
                .is_some()
    }

    fn feature_dim(&self) -> usize {
        let w = self.config.width;
        w + self.config.barrier_cols.len() + self.config.invader_cols.len() + 1 + 6 + 2 * w
    }

    fn features(&self, s: &BarrierState, action: ActionId) -> Vec<f64> {
        let w = self.config.width;
        let nb = self.config.barrier_cols.len();
        let ni = self.config.invader_cols.len();
        let mut x = vec![0.0; self.feature_dim()];
        x[s.agent_col as usize] = 1.0;
        for b in 0..nb {
            x[w + b] = f64::from((s.barriers >> b) & 1);
        }
        for i in 0..ni {
            x[w + nb + i] = f64::from((s.invaders >> i) & 1);
        }
        let target = self.target_col(s.agent_col, action);
        let nearest = self
            .config
            .barrier_cols
            .iter()
            .enumerate()
            .filter(|(b, _)| s.barriers & (1 << b) != 0)
            .map(|(_, &c)| (c as f64 - target as f64).abs())
            .fold(w as f64, f64::min);
        x[w + nb + ni] = nearest / w as f64;
        x[w + nb + ni + 1 + action.0] = 1.0;
        // Fire block: (target column, barrier intact above it), only when shooting.
        if Self::fires(action) {
            let intact = self.intact_barrier_at(s, target).is_some() as usize;
            x[w + nb + ni + 7 + 2 * target as usize + intact] = 1.0;
        }
        x
    }

    fn state_key(&self, s: &BarrierState) -> StateKey {
        let [lo, hi] = s.steps.to_le_bytes();
        StableHasher::new()
            .write_bytes(&[3, s.agent_col, s.barriers, s.invaders, lo, hi])
            .finish()
    }

    fn observation_key(&self, s: &BarrierState) -> StateKey {
        StableHasher::new()
            .write_bytes(&[103, s.agent_col, s.barriers, s.invaders])
            .finish()
    }

    fn without_fire(&self, action: ActionId) -> ActionId {
        match action {
            FIRE => STAY,
            FIRE_LEFT => LEFT,
            FIRE_RIGHT => RIGHT,
            a => a,
        }
    }

    fn default_replacement(&self) -> ReplacementStrategy {
        ReplacementStrategy::RemoveFireComponent
    }

    fn reward_transform(&self) -> RewardTransform {
        RewardTransform::Clip(1.0)
    }

    fn max_episode_return(&self) -> f64 {
        self.config.invader_cols.len() as f64 * self.config.invader_value
    }

    fn frame(&self, s: &BarrierState) -> Frame {
        let w = self.config.width;
        let mut rows = vec![vec!['.'; w]; INVADER_ROW + 1];
        for (i, &c) in self.config.invader_cols.iter().enumerate() {
            if s.invaders & (1 << i) != 0 {
                rows[INVADER_ROW][c] = 'V';
            }
        }
        for (b, &c) in self.config.barrier_cols.iter().enumerate() {
            if s.barriers & (1 << b) != 0 {
                rows[BARRIER_ROW][c] = '=';
            }
        }
        rows[0][s.agent_col as usize] = 'A';
        let mut entities = vec![Entity {
            kind: "agent".into(),
            row: INVADER_ROW,
            col: s.agent_col as usize,
        }];
        for (b, &c) in self.config.barrier_cols.iter().enumerate() {
            if s.barriers & (1 << b) != 0 {
                entities.push(Entity {
                    kind: "barrier".into(),
                    row: INVADER_ROW - BARRIER_ROW,
                    col: c,
                });
            }
        }
        // Rows are stored bottom-up; frames are top-down.
        Frame {
            grid: rows.into_iter().rev().map(|r| r.into_iter().collect()).collect(),
            entities,
            zone_rows: Vec::new(),
        }
    }
}
