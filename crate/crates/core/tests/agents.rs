use hirl_core::agents::{
    entropy, grad_entropy, grad_log_prob, softmax, ActionMode, Agent, AgentConfig, EpsilonSchedule, Transition,
};
use hirl_core::mdp::{ActionId, ActionMask, StateKey};
use proptest::prelude::*;

fn log_softmax(z: &[f64], a: usize) -> f64 {
    softmax(z)[a].ln()
}

fn numeric_grad(f: impl Fn(&[f64]) -> f64, z: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    (0..z.len())
        .map(|j| {
            let mut up = z.to_vec();
            let mut down = z.to_vec();
            up[j] += h;
            down[j] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

proptest! {
    #[test]
    fn softmax_sums_to_one(z in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences(
        z in prop::collection::vec(-3.0f64..3.0, 2..6), pick in 0usize..6,
    ) {
        let a = pick % z.len();
        let analytic = grad_log_prob(&z, ActionId(a));
        let numeric = numeric_grad(|x| log_softmax(x, a), &z);
        for (g, n) in analytic.iter().zip(&numeric) {
            prop_assert!((g - n).abs() < 1e-5, "{g} vs {n}");
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences(z in prop::collection::vec(-3.0f64..3.0, 2..6)) {
        let analytic = grad_entropy(&z);
        let numeric = numeric_grad(|x| entropy(&softmax(x)), &z);
        for (g, n) in analytic.iter().zip(&numeric) {
            prop_assert!((g - n).abs() < 1e-5, "{g} vs {n}");
        }
    }

    #[test]
    fn masked_actions_are_never_chosen(seed: u64, removed in 0usize..3, pg: bool, det: bool) {
        let cfg = if pg { AgentConfig::softmax_pg() } else { AgentConfig::tabular_q(100) };
        let mut agent = Agent::new(cfg.with_seed(seed), 3).unwrap();
        if det {
            agent.set_mode(ActionMode::Deterministic);
        }
        agent.set_values(StateKey(1), vec![5.0, 1.0, -2.0]);
        let mut mask = ActionMask::all(3);
        mask.remove(ActionId(removed));
        for _ in 0..50 {
            prop_assert_ne!(agent.act(StateKey(1), mask), ActionId(removed));
            prop_assert_ne!(agent.act(StateKey(2), mask), ActionId(removed));
        }
    }
}

#[test]
fn pg_step_is_advantage_times_score_plus_entropy() {
    let cfg = AgentConfig::softmax_pg().with_learning_rate(0.1);
    let mut agent = Agent::new(cfg.clone(), 3).unwrap();
    let key = StateKey(9);
    let z0 = vec![0.3, -0.2, 0.5];
    agent.set_values(key, z0.clone());
    // One-step episode; baseline is zero before the first visit.
    agent.pg_update(&[Transition {
        key,
        action: ActionId(2),
        reward: 2.0,
        next_key: key,
        done: true,
    }]);
    let glp = grad_log_prob(&z0, ActionId(2));
    let gh = grad_entropy(&z0);
    let got = agent.values(key);
    for j in 0..3 {
        let want = z0[j] + 0.1 * (2.0 * glp[j] + cfg.entropy_bonus * gh[j]);
        assert!((got[j] - want).abs() < 1e-12);
    }
    assert_eq!(agent.entry(key).unwrap().baseline(), 2.0);
}

/// Chain of `n` cells, actions left/right, +1 on stepping off the right end.
fn chain_step(s: usize, a: usize, n: usize) -> (usize, f64, bool) {
    match a {
        0 => (s.saturating_sub(1), 0.0, false),
        _ if s + 1 == n => (s, 1.0, true),
        _ => (s + 1, 0.0, false),
    }
}

fn value_iteration(n: usize, gamma: f64) -> Vec<[f64; 2]> {
    let mut q = vec![[0.0f64; 2]; n];
    for _ in 0..10_000 {
        let mut next = q.clone();
        for (s, row) in next.iter_mut().enumerate() {
            for (a, v) in row.iter_mut().enumerate() {
                let (s2, r, done) = chain_step(s, a, n);
                *v = r + if done { 0.0 } else { gamma * q[s2][0].max(q[s2][1]) };
            }
        }
        q = next;
    }
    q
}

#[test]
fn q_learning_reaches_value_iteration_fixed_point() {
    let n = 5;
    let gamma = 0.9;
    let oracle = value_iteration(n, gamma);
    // Closed form: stepping right from cell s pays gamma^(n-1-s).
    for (s, row) in oracle.iter().enumerate() {
        assert!((row[1] - gamma.powi((n - 1 - s) as i32)).abs() < 1e-12);
    }
    let mut cfg = AgentConfig::tabular_q(1).with_learning_rate(0.2);
    cfg.discount = gamma;
    let mut agent = Agent::new(cfg, 2).unwrap();
    for _ in 0..2_000 {
        for s in 0..n {
            for a in 0..2 {
                let (s2, r, done) = chain_step(s, a, n);
                agent.observe(Transition {
                    key: StateKey(s as u64),
                    action: ActionId(a),
                    reward: r,
                    next_key: StateKey(s2 as u64),
                    done,
                });
            }
        }
    }
    for (s, row) in oracle.iter().enumerate() {
        let q = agent.values(StateKey(s as u64));
        for a in 0..2 {
            assert!((q[a] - row[a]).abs() < 1e-3, "Q({s},{a}) = {} vs {}", q[a], row[a]);
        }
    }
}

#[test]
fn softmax_pg_solves_two_armed_bandit() {
    let mut agent = Agent::new(AgentConfig::softmax_pg().with_learning_rate(0.05).with_seed(3), 2).unwrap();
    let key = StateKey(0);
    for _ in 0..10_000 {
        let a = agent.act(key, ActionMask::all(2));
        agent.observe(Transition {
            key,
            action: a,
            reward: if a == ActionId(0) { 1.0 } else { 0.0 },
            next_key: key,
            done: true,
        });
    }
    let p = agent.policy(key);
    assert!(p[0] > 0.9, "pi(a0) = {}", p[0]);
}

#[test]
fn zero_learning_rate_freezes_both_learners() {
    for cfg in [AgentConfig::tabular_q(1000), AgentConfig::softmax_pg()] {
        let mut agent = Agent::new(cfg.with_learning_rate(0.0).with_seed(1), 3).unwrap();
        agent.set_values(StateKey(4), vec![0.1, 0.2, 0.3]);
        let before = agent.table_fingerprint();
        for i in 0..500u64 {
            let key = StateKey(i % 7);
            let a = agent.act(key, ActionMask::all(3));
            agent.observe(Transition {
                key,
                action: a,
                reward: -1.0,
                next_key: StateKey((i + 1) % 7),
                done: i % 10 == 9,
            });
        }
        assert_eq!(agent.table_fingerprint(), before);
        assert_eq!(agent.num_states(), 1);
    }
}

#[test]
fn deterministic_mode_is_greedy_with_low_index_ties() {
    let mut agent = Agent::new(AgentConfig::softmax_pg(), 3).unwrap();
    agent.set_mode(ActionMode::Deterministic);
    agent.set_values(StateKey(1), vec![0.5, 0.7, 0.7]);
    assert!((0..100).all(|_| agent.act(StateKey(1), ActionMask::all(3)) == ActionId(1)));
    // Unseen states have all-zero values: action 0.
    assert_eq!(agent.act(StateKey(2), ActionMask::all(3)), ActionId(0));
}

#[test]
fn epsilon_decays_over_first_half() {
    let s = EpsilonSchedule::half_of(1_000);
    assert_eq!(s.at(0), 1.0);
    assert!((s.at(250) - 0.505).abs() < 1e-12);
    assert_eq!(s.at(500), 0.01);
    assert_eq!(s.at(10_000), 0.01);
}

#[test]
fn same_seed_same_choices() {
    let run = || {
        let mut agent = Agent::new(AgentConfig::tabular_q(1_000).with_seed(42), 3).unwrap();
        (0..200).map(|i| agent.act(StateKey(i % 5), ActionMask::all(3)).0).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_restores_behaviour() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.json");
    let mut agent = Agent::new(AgentConfig::softmax_pg().with_seed(5), 3).unwrap();
    agent.set_values(StateKey(3), vec![1.0, 2.0, 0.0]);
    agent.save(&path).unwrap();
    let loaded = Agent::load(&path).unwrap();
    assert_eq!(loaded.table_fingerprint(), agent.table_fingerprint());
    assert_eq!(loaded.policy(StateKey(3)), agent.policy(StateKey(3)));
}
