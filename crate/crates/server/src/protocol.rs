//! Wire messages. Every WebSocket text frame carries one JSON object tagged
//! by `type`.

use hirl_core::agents::{AgentConfig, AgentKind};
use hirl_core::blocker::CalibrationReport;
use hirl_core::intervention::PhaseBudget;
use hirl_core::mdp::{Entity, Frame};
use hirl_core::EnvName;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

pub type SessionId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    /// Created, waiting for the first client before stepping.
    AwaitingClient,
    HumanOversight,
    BlockerTraining,
    BlockerOversight,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    SessionBusy,
    StaleResponse,
    UnknownSession,
    InvalidConfig,
    PendingExists,
    InvalidMessage,
    SessionFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireVerdict {
    Allow,
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ServerMessage {
    Hello {
        version: u32,
        session_id: SessionId,
        env: EnvName,
        action_names: Vec<String>,
    },
    FrameUpdate {
        grid: Vec<String>,
        entities: Vec<Entity>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        zone_rows: Vec<usize>,
        score: f64,
        phase: SessionPhase,
        episode: u64,
        step: u64,
    },
    DecisionRequest {
        id: u64,
        proposed_action: usize,
        action_names: Vec<String>,
        /// What a block without an explicit replacement executes; absent
        /// when the agent is asked again instead.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        default_replacement: Option<usize>,
    },
    MetricsUpdate(Metrics),
    PhaseChange {
        phase: SessionPhase,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        calibration: Option<CalibrationReport>,
    },
    Relabeled {
        record: usize,
        blocked: bool,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            message: message.into(),
        }
    }

    pub fn frame(frame: Frame, score: f64, phase: SessionPhase, episode: u64, step: u64) -> Self {
        ServerMessage::FrameUpdate {
            grid: frame.grid,
            entities: frame.entities,
            zone_rows: frame.zone_rows,
            score,
            phase,
            episode,
            step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ClientMessage {
    DecisionResponse {
        id: u64,
        verdict: WireVerdict,
        #[serde(default)]
        replacement: Option<usize>,
    },
    /// Fix the label of an earlier record before the blocker is trained.
    Relabel { record: usize, blocked: bool },
}

/// Live labeling counters and the cost projection they imply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub labels: u64,
    pub blocks: u64,
    pub elapsed_s: f64,
    #[serde(default)]
    pub mean_latency_s: Option<f64>,
    /// Labels per block; absent before the first block.
    #[serde(default)]
    pub rho: Option<f64>,
    /// Mean latency times ratio times blocks, in seconds.
    #[serde(default)]
    pub projected_cost_s: Option<f64>,
}

fn default_budget() -> PhaseBudget {
    PhaseBudget::Steps(1_000)
}

/// Everything needed to open a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub env: EnvName,
    #[serde(default)]
    pub env_config: Option<serde_json::Value>,
    #[serde(default = "default_agent")]
    pub agent: AgentKind,
    #[serde(default)]
    pub agent_config: Option<AgentConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Penalty handed to the agent on a block; the environment default when absent.
    #[serde(default)]
    pub penalty: Option<f64>,
    #[serde(default = "default_budget")]
    pub human_budget: PhaseBudget,
    /// Train a blocker after the human phase and run it for this many steps.
    #[serde(default)]
    pub blocker_steps: Option<u64>,
    /// Maximum steps per second during human oversight.
    #[serde(default)]
    pub pacing: Option<f64>,
    /// Allow unanswered requests after this many seconds, tagging the record.
    /// Meant for unattended soak runs only.
    #[serde(default)]
    pub decision_timeout_s: Option<f64>,
    /// Answer every request with the scripted oracle instead of a client.
    #[serde(default)]
    pub auto_responder: bool,
}

fn default_agent() -> AgentKind {
    AgentKind::TabularQ
}

impl SessionConfig {
    pub fn new(env: EnvName) -> Self {
        Self {
            env,
            env_config: None,
            agent: AgentKind::TabularQ,
            agent_config: None,
            seed: 0,
            penalty: None,
            human_budget: default_budget(),
            blocker_steps: None,
            pacing: None,
            decision_timeout_s: None,
            auto_responder: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(t) = self.decision_timeout_s {
            if !(t > 0.0 && t.is_finite()) {
                return Err(format!("decision_timeout_s must be positive, got {t}"));
            }
        }
        if let Some(p) = self.pacing {
            if !(p > 0.0 && p.is_finite()) {
                return Err(format!("pacing must be positive, got {p}"));
            }
        }
        if let Some(p) = self.penalty {
            if !p.is_finite() {
                return Err("penalty must be finite".into());
            }
        }
        if let Some(cfg) = &self.agent_config {
            cfg.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// Steps the agent's exploration schedule is sized for.
    pub fn schedule_steps(&self) -> u64 {
        let human = match self.human_budget {
            PhaseBudget::Steps(n) => n,
            PhaseBudget::Catastrophes(n) => n.saturating_mul(100),
        };
        human.saturating_add(self.blocker_steps.unwrap_or(0)).max(1)
    }
}
