use hirl_core::cost::{
    cost_ratio, cost_total, extrapolate, measure_inputs, pong_fixture, pretrained_fixture, render_csv, render_table,
    CostError, LabelEntry, Scenario, SECONDS_PER_DAY, SECONDS_PER_HOUR, SECONDS_PER_YEAR,
};
use hirl_core::envs::zone_corridor::ZoneCorridor;
use hirl_core::intervention::{DatasetSink, Harness, OracleOverseer, RunCondition};
use hirl_core::{Agent, AgentConfig};
use proptest::prelude::*;

#[test]
fn pong_oversight_takes_four_and_a_half_hours() {
    let c = cost_ratio(0.8, 166.0, 120.0);
    assert!((c - 15_936.0).abs() < 1e-9);
    assert!((c / SECONDS_PER_HOUR - 4.4267).abs() < 1e-4);
    assert!((cost_total(0.8, 19_920.0) - 15_936.0).abs() < 1e-9);
    let row = &extrapolate(&[pong_fixture()])[0];
    assert_eq!(format!("{:.2}", row.hours), "4.43");
    assert_eq!(row.n_all, 19_920.0);
}

#[test]
fn rare_catastrophes_take_over_a_hundred_days() {
    let c = cost_ratio(0.8, 1e5, 120.0);
    assert!((c - 9.6e6).abs() < 1e-6);
    let days = c / SECONDS_PER_DAY;
    assert!((days - 111.11).abs() < 0.01);
    // Quoted as 110 days, which is this value rounded down.
    assert!((days - 110.0).abs() < 1.5);
    let row = &extrapolate(&[pretrained_fixture()])[0];
    assert_eq!(format!("{:.0}", row.days), "111");
}

#[test]
fn hundred_million_observations_take_years() {
    let fast = Scenario::from_total("fast", 0.1, 1e8).unwrap();
    assert!((fast.seconds() - 1e7).abs() < 1e-6);
    assert!((fast.seconds() / SECONDS_PER_DAY - 115.74).abs() < 0.01);
    let slow = Scenario::from_total("slow", 0.8, 1e8).unwrap();
    let years = slow.seconds() / SECONDS_PER_YEAR;
    assert!((years - 2.537).abs() < 1e-3);
    assert!(years >= 1.0);
}

#[test]
fn synthetic_log_is_measured_exactly() {
    let labels = (0..1_000).map(|i| LabelEntry {
        blocked: i % 100 == 0,
        label_latency: Some(0.5),
    });
    let inputs = measure_inputs(labels).unwrap();
    assert_eq!(inputs.t_human, Some(0.5));
    assert_eq!((inputs.n_all, inputs.rho, inputs.n_cat), (1_000, 100.0, 10));
    assert_eq!(inputs.cost_seconds(), Some(500.0));
}

proptest! {
    #[test]
    fn both_forms_agree(t in 0.0f64..10.0, rho in 0.0f64..1e6, n_cat in 0.0f64..1e4) {
        prop_assert_eq!(cost_ratio(t, rho, n_cat), cost_total(t, rho * n_cat));
    }

    #[test]
    fn measuring_a_constructed_log_recovers_its_inputs(
        n_all in 1u64..5_000, cat_share in 0.0f64..1.0, latency in 0.0f64..5.0,
    ) {
        let n_cat = (n_all as f64 * cat_share) as u64;
        let labels = (0..n_all).map(|i| LabelEntry { blocked: i < n_cat, label_latency: Some(latency) });
        let inputs = measure_inputs(labels).unwrap();
        prop_assert_eq!((inputs.n_all, inputs.n_cat), (n_all, n_cat));
        prop_assert!((inputs.t_human.unwrap() - latency).abs() <= 1e-9 * latency.max(1.0));
        if n_cat > 0 {
            prop_assert!(inputs.rho >= 1.0);
            prop_assert!((inputs.rho * n_cat as f64 - n_all as f64).abs() < 1e-6);
        } else {
            prop_assert!(inputs.rho.is_infinite());
        }
    }
}

#[test]
fn report_formats() {
    let rows = extrapolate(&[pong_fixture(), pretrained_fixture()]);
    let table = render_table(&rows);
    let widths: Vec<usize> = table.lines().map(str::len).collect();
    assert!(widths.windows(2).all(|w| w[0] == w[1]), "{table}");
    let csv = render_csv(&rows);
    assert!(csv.lines().nth(1).unwrap().starts_with("pong-oversight,0.8,166,120,19920,15936"));
    assert_eq!(measure_inputs(std::iter::empty::<LabelEntry>()), Err(CostError::EmptyDataset));
}

/// Labels gathered while overseeing `agent` for `steps` steps.
fn oversight_phase(agent: &mut Agent, seed: u64, steps: u64) -> (u64, u64) {
    let mut env = ZoneCorridor::new(Default::default()).unwrap();
    let mut oracle = OracleOverseer::for_env(&env);
    let sink = DatasetSink::new();
    Harness::new(&mut env, RunCondition::Hirl)
        .overseer(&mut oracle)
        .sink(&sink)
        .run_steps(agent, seed, 0, steps)
        .unwrap();
    let inputs = measure_inputs(sink.snapshot().iter().map(LabelEntry::from)).unwrap();
    (inputs.n_all, inputs.n_cat)
}

#[test]
fn trained_agents_make_catastrophe_labels_rare() {
    // Both agents follow the schedule of a 500k-step run; the fresh one is
    // measured over its first 50k steps.
    let steps = 50_000;
    let mut fresh = Agent::new(AgentConfig::tabular_q(500_000).with_seed(1), 3).unwrap();
    let (fresh_all, fresh_cat) = oversight_phase(&mut fresh, 1, steps);
    assert!(fresh_cat > 0);

    let mut trained = Agent::new(AgentConfig::tabular_q(500_000).with_seed(2), 3).unwrap();
    oversight_phase(&mut trained, 2, 500_000);
    let (trained_all, trained_cat) = oversight_phase(&mut trained, 3, steps);
    // Ratios compared without dividing by a possibly zero count.
    let fresh_rho_times_10 = 10 * fresh_all * trained_cat.max(1);
    assert!(
        trained_all * fresh_cat >= fresh_rho_times_10,
        "fresh {fresh_all}/{fresh_cat}, trained {trained_all}/{trained_cat}"
    );
}
