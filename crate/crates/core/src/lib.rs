//! Human-intervention reinforcement learning at desk scale.
//!
//! An overseer (scripted oracle, remote human, or a trained blocker) sits
//! between a tabular agent and a gridworld, blocks catastrophic proposals
//! before they execute, substitutes a safe action and hands the agent a
//! penalty instead of the environment reward.

pub mod agents;
pub mod blocker;
pub mod cost;
pub mod envs;
pub mod experiments;
pub mod intervention;
pub mod mdp;

pub use agents::{ActionMode, Agent, AgentConfig, AgentKind};
pub use blocker::{BlockerModel, CalibrationReport};
pub use envs::{build_env, EnvName, EnvVisitor};
pub use intervention::{
    EpisodeMetrics, Harness, InterventionRecord, OracleOverseer, Overseer, OverseerDecision, OverseerKind,
    RunCondition,
};
pub use mdp::{
    ActionId, ActionMask, Environment, EventFlags, Frame, MdpError, MdpSpec, ReplacementStrategy,
    RewardTransform, StateKey, StepEvent, StepOutcome, Trajectory,
};
