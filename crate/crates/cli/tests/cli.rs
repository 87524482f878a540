use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use hirl_core::agents::{Agent, AgentConfig};
use hirl_core::envs::zone_corridor::{ZoneCorridor, ZoneCorridorConfig};
use hirl_core::intervention::{write_dataset, Lifecycle, OracleOverseer, PhaseBudget};

fn hirl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hirl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hirl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = hirl(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

#[test]
fn cost_builtin_scenarios() {
    let table = ok(&["cost", "--builtin"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l.len() == lines[0].len()), "{table}");
    assert!(lines[1].contains("15936.0") && lines[1].contains("4.43"), "{table}");
    assert!(lines[2].contains("111.11"), "{table}");

    let csv = ok(&["cost", "--builtin", "--csv"]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "scenario,t_human,rho,n_cat,n_all,seconds,hours,days");
    assert!(rows[1].starts_with("pong-oversight,0.8,166,120,19920,15936,"));
}

#[test]
fn cost_from_counts() {
    let by_total = ok(&["cost", "--t", "1", "--n-all", "86400", "--csv"]);
    assert!(by_total.lines().nth(1).unwrap().ends_with(",86400,24,1"), "{by_total}");
    let by_ratio = ok(&["cost", "--t", "2", "--rho", "10", "--ncat", "5", "--csv"]);
    assert!(by_ratio.lines().nth(1).unwrap().starts_with("custom,2,10,5,50,100,"), "{by_ratio}");
    fails(&["cost", "--t", "2", "--rho", "10"]);
    fails(&["cost"]);
    fails(&["cost", "--t", "-1", "--n-all", "10"]);
}

fn oracle_dataset(path: &Path) -> (usize, usize) {
    let env = ZoneCorridor::new(ZoneCorridorConfig {
        start_row: 15,
        ..Default::default()
    })
    .unwrap();
    let agent = Agent::new(AgentConfig::tabular_q(50_000).with_seed(4), 4).unwrap();
    let mut life = Lifecycle::new(env.clone(), agent, 4);
    let mut oracle = OracleOverseer::for_env(&env);
    life.human_phase(&mut oracle, PhaseBudget::Steps(20_000), None).unwrap();
    let records = life.dataset().snapshot();
    write_dataset(&records, std::fs::File::create(path).unwrap()).unwrap();
    (records.len(), records.iter().filter(|r| r.blocked).count())
}

#[test]
fn train_blocker_and_price_an_oracle_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("labels.jsonl");
    let (n, blocked) = oracle_dataset(&data);
    assert!(blocked > 0);
    let model = dir.path().join("zone.blk");
    let d = data.to_str().unwrap();
    let m = model.to_str().unwrap();

    let summary = ok(&["train-blocker", "--dataset", d, "--env", "zone-corridor", "--out", m]);
    assert!(summary.starts_with(&format!("{n} records")), "{summary}");
    assert!(summary.contains("false negatives 0"), "{summary}");
    let bytes = std::fs::read(&model).unwrap();
    assert!(!bytes.is_empty());

    // Width mismatch against another env is caught before fitting.
    let err = fails(&["train-blocker", "--dataset", d, "--env", "exploit-runner", "--out", m]);
    assert!(err.contains("width"), "{err}");
    assert_eq!(std::fs::read(&model).unwrap(), bytes);

    // Oracle records carry no latency, so pricing needs an explicit one.
    let err = fails(&["cost", "--dataset", d]);
    assert!(err.contains("--t"), "{err}");
    let csv = ok(&["cost", "--dataset", d, "--t", "0.5", "--csv"]);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4], n.to_string());
    assert_eq!(row[5].parse::<f64>().unwrap(), 0.5 * n as f64);
}

#[test]
fn compare_and_run_write_the_same_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let summary = ok(&[
        "compare", "--env", "zone-corridor", "--seeds", "1,2", "--steps", "5000", "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(summary.lines().count(), 4, "{summary}");
    for cond in ["no-oversight", "reward-shaping", "hirl"] {
        assert!(summary.lines().any(|l| l.starts_with(cond)), "{summary}");
    }

    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        format!(
            r#"{{ "env": "zone-corridor", "seeds": [1, 2], "total_steps": 5000, "output_dir": {:?} }}"#,
            b.to_str().unwrap()
        ),
    )
    .unwrap();
    assert_eq!(ok(&["run", "--spec", spec.to_str().unwrap()]), summary);
    for file in ["no-oversight.csv", "reward-shaping.csv", "hirl.csv", "summary.txt"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }

    fails(&["compare", "--env", "no-such-env"]);
    fails(&["compare", "--env", "zone-corridor", "--agent", "nope"]);
    fails(&["run", "--spec", dir.path().join("missing.json").to_str().unwrap()]);
}

#[test]
fn small_studies_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let grid_cfg = dir.path().join("grid.json");
    std::fs::write(
        &grid_cfg,
        r#"{ "min_pretrain_episodes": 300, "max_pretrain_episodes": 600, "continue_episodes": 50 }"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    let table = ok(&["forgetting-grid", "--config", grid_cfg.to_str().unwrap(), "--seeds", "1", "--out", o]);
    assert_eq!(std::fs::read_to_string(out.join("forgetting.txt")).unwrap(), table);
    let csv = std::fs::read_to_string(out.join("forgetting.csv")).unwrap();
    assert!(csv.starts_with("mode,learning_rate,seed,"));
    assert!(csv.lines().count() > 1);

    let study_cfg = dir.path().join("study.json");
    std::fs::write(
        &study_cfg,
        r#"{ "no_oversight_steps": 5000, "oracle_steps": 5000, "blocker_steps": 5000 }"#,
    )
    .unwrap();
    let table = ok(&["exploit-study", "--config", study_cfg.to_str().unwrap(), "--seeds", "1", "--out", o]);
    assert_eq!(std::fs::read_to_string(out.join("exploit.txt")).unwrap(), table);
    let csv = std::fs::read_to_string(out.join("exploit.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("exploit.json")).unwrap()).unwrap();
    assert!(json.is_object());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "seeds": "one" }"#).unwrap();
    fails(&["exploit-study", "--config", bad.to_str().unwrap()]);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn get(addr: &str, path: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let (head, body) = raw.split_once("\r\n\r\n").unwrap();
    (head.split_whitespace().nth(1).unwrap().parse().unwrap(), body.to_string())
}

#[test]
fn serve_runs_a_startup_session_into_the_shared_log() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<title>overseer</title>").unwrap();
    let log = dir.path().join("log.jsonl");
    let session = dir.path().join("session.json");
    std::fs::write(
        &session,
        r#"{ "env": "zone-corridor", "env_config": { "start_row": 15 }, "seed": 2,
             "auto_responder": true, "human_budget": { "steps": 5000 }, "blocker_steps": 2000 }"#,
    )
    .unwrap();

    let mut server = Server(
        Command::new(env!("CARGO_BIN_EXE_hirl"))
            .args(["serve", "--addr", "127.0.0.1:0", "--ui-dir"])
            .arg(&ui)
            .arg("--dataset-log")
            .arg(&log)
            .arg("--session")
            .arg(&session)
            .stdout(Stdio::piped())
            .spawn()
            .unwrap(),
    );
    let mut lines = BufReader::new(server.0.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.strip_prefix("listening on http://").unwrap().to_string();
    let second = lines.next().unwrap().unwrap();
    assert_eq!(second, format!("session 1 at ws://{addr}/sessions/1/ws"));

    let (code, page) = get(&addr, "/index.html");
    assert_eq!(code, 200);
    assert!(page.contains("overseer"));

    let deadline = Instant::now() + Duration::from_secs(60);
    let status = loop {
        let (code, body) = get(&addr, "/sessions/1");
        assert_eq!(code, 200);
        let status: serde_json::Value = serde_json::from_str(&body).unwrap();
        if status["phase"] == "finished" {
            break status;
        }
        assert!(Instant::now() < deadline, "{status}");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert!(status["error"].is_null(), "{status}");
    drop(server);

    // The shared log carries measured latencies, so it prices without --t.
    let l = log.to_str().unwrap();
    let csv = ok(&["cost", "--dataset", l, "--csv"]);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4], status["dataset_len"].to_string());
    let model = dir.path().join("m.blk");
    let summary = ok(&["train-blocker", "--dataset", l, "--env", "zone-corridor", "--env-config", r#"{"start_row":15}"#, "--out", model.to_str().unwrap()]);
    assert!(summary.contains("false negatives 0"), "{summary}");
}
