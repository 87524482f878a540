//! The three gridworlds and name-based construction.

pub mod barrier_grid;
pub mod exploit_runner;
pub mod zone_corridor;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::mdp::{Environment, MdpError};

pub use barrier_grid::{BarrierGrid, BarrierGridConfig, BarrierState, StartPositionMode};
pub use exploit_runner::{ExploitRunner, ExploitRunnerConfig, RunnerState};
pub use zone_corridor::{ZoneCorridor, ZoneCorridorConfig, ZoneState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvName {
    ZoneCorridor,
    ExploitRunner,
    BarrierGrid,
}

impl EnvName {
    pub const ALL: [EnvName; 3] = [EnvName::ZoneCorridor, EnvName::ExploitRunner, EnvName::BarrierGrid];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::ZoneCorridor => "zone-corridor",
            EnvName::ExploitRunner => "exploit-runner",
            EnvName::BarrierGrid => "barrier-grid",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = MdpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| MdpError::ConfigInvalid(format!("unknown environment {s:?}")))
    }
}

/// Generic continuation for code that needs the concrete environment type.
pub trait EnvVisitor {
    type Output;
    fn visit<E: Environment + Clone + 'static>(self, env: E) -> Self::Output;
}

fn parse_config<C: serde::de::DeserializeOwned + Default>(
    config: Option<&serde_json::Value>,
) -> Result<C, MdpError> {
    match config {
        None => Ok(C::default()),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| MdpError::ConfigInvalid(e.to_string())),
    }
}

/// Build an environment from its name and an optional JSON config and hand it
/// to `visitor`.
pub fn build_env<V: EnvVisitor>(
    name: EnvName,
    config: Option<&serde_json::Value>,
    visitor: V,
) -> Result<V::Output, MdpError> {
    Ok(match name {
        EnvName::ZoneCorridor => visitor.visit(ZoneCorridor::new(parse_config(config)?)?),
        EnvName::ExploitRunner => visitor.visit(ExploitRunner::new(parse_config(config)?)?),
        EnvName::BarrierGrid => visitor.visit(BarrierGrid::new(parse_config(config)?)?),
    })
}
