//! Fixtures shared by the benchmarks.

use hirl_core::agents::{Agent, AgentConfig};
use hirl_core::blocker::{build_blocker, BlockerModel, BlockerSpec};
use hirl_core::envs::zone_corridor::{ZoneCorridor, ZoneCorridorConfig};
use hirl_core::intervention::{Lifecycle, OracleOverseer, PhaseBudget};
use hirl_core::{ActionId, Environment};

/// States visited by a fixed cycling policy, restarting on episode end.
pub fn rollout_states<E: Environment>(env: &mut E, n: usize, seed: u64) -> Vec<E::State> {
    let actions = env.spec().num_actions();
    let mut state = env.reset(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(state.clone());
        let outcome = env.step(&state, ActionId((i * 7 + i / 3) % actions)).expect("valid action");
        state = if outcome.done { env.reset(seed + i as u64) } else { outcome.next_state };
    }
    out
}

/// Zone corridor starting near the zone, with a blocker fit to oracle labels.
pub fn zone_blocker() -> (ZoneCorridor, BlockerModel) {
    let env = ZoneCorridor::new(ZoneCorridorConfig {
        start_row: 15,
        ..Default::default()
    })
    .expect("valid config");
    let agent = Agent::new(AgentConfig::tabular_q(50_000).with_seed(1), env.spec().num_actions()).expect("valid agent");
    let mut life = Lifecycle::new(env.clone(), agent, 1);
    let mut oracle = OracleOverseer::for_env(&env);
    life.human_phase(&mut oracle, PhaseBudget::Steps(20_000), None).expect("oracle phase");
    let (model, _) = build_blocker(&BlockerSpec::for_env(&env), &life.dataset().examples()).expect("calibrates");
    (env, model)
}
