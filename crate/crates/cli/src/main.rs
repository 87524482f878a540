use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hirl_core::blocker::{build_blocker, save_blocker, BlockerSpec, Example};
use hirl_core::cost::{builtin_scenarios, extrapolate, measure_inputs, render_csv, render_table, LabelEntry, Scenario};
use hirl_core::experiments::{
    exploit_study, forgetting_grid, render_summary, run_spec, summarize, write_outputs, ExperimentSpec,
    ExploitStudyConfig, ForgettingConfig,
};
use hirl_core::intervention::read_record_summaries;
use hirl_core::{build_env, AgentKind, EnvName, EnvVisitor, Environment};
use hirl_server::{registry_for, ServerOptions, SessionConfig};

#[derive(Parser)]
#[command(name = "hirl", version, about = "Oversight experiments for tabular agents in gridworlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment spec file.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; overrides `output_dir` in the file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare no oversight, reward shaping and oracle oversight.
    Compare(CompareArgs),
    /// Attempted-catastrophe rates of converged policies under each action mode and learning rate.
    ForgettingGrid {
        /// JSON config; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score exploit with and without a blocker, and with a censored blocker.
    ExploitStudy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Human labeling time from a dataset or from given inputs.
    Cost(CostArgs),
    /// Fit and calibrate a blocker from a labeled dataset.
    TrainBlocker {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        env: EnvName,
        /// Environment config as inline JSON.
        #[arg(long)]
        env_config: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Serve live oversight sessions over WebSocket.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Static client bundle served at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        /// Shared JSON-lines log of every session's records.
        #[arg(long)]
        dataset_log: Option<PathBuf>,
        /// Session config to open at startup.
        #[arg(long)]
        session: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    env: EnvName,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 500_000)]
    steps: u64,
    #[arg(long)]
    penalty: Option<f64>,
    #[arg(long, default_value = "tabular-q")]
    agent: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// Dataset (JSON lines) to measure the inputs from.
    #[arg(long, conflicts_with_all = ["rho", "ncat", "n_all"])]
    dataset: Option<PathBuf>,
    /// Seconds per label; overrides the measured mean latency.
    #[arg(long = "t")]
    t_human: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    ncat: Option<f64>,
    /// Total observations, as an alternative to --rho and --ncat.
    #[arg(long, conflicts_with_all = ["rho", "ncat"])]
    n_all: Option<f64>,
    /// Include the built-in scenarios.
    #[arg(long)]
    builtin: bool,
    /// CSV instead of an aligned table.
    #[arg(long)]
    csv: bool,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { spec, out } => {
            let spec = ExperimentSpec::load(&spec).with_context(|| format!("loading {}", spec.display()))?;
            run_experiment(&spec, out.or_else(|| spec.output_dir.clone()).as_deref())
        }
        Command::Compare(args) => {
            let mut spec = ExperimentSpec::new(args.env, args.seeds, args.steps);
            spec.penalty = args.penalty;
            spec.agent = parse_agent(&args.agent)?;
            spec.validate()?;
            run_experiment(&spec, args.out.as_deref())
        }
        Command::ForgettingGrid { config, seeds, out } => {
            let mut cfg: ForgettingConfig = load_or_default(config.as_deref())?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let report = forgetting_grid(&cfg)?;
            print!("{}", report.render());
            write_report(out.as_deref(), "forgetting", &report.render(), &report.csv(), &report)
        }
        Command::ExploitStudy { config, seeds, out } => {
            let mut cfg: ExploitStudyConfig = load_or_default(config.as_deref())?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let report = exploit_study(&cfg)?;
            print!("{}", report.render());
            write_report(out.as_deref(), "exploit", &report.render(), &report.csv(), &report)
        }
        Command::Cost(args) => cost(args),
        Command::TrainBlocker {
            dataset,
            env,
            env_config,
            out,
            split_seed,
        } => train_blocker(&dataset, env, env_config.as_deref(), &out, split_seed),
        Command::Serve {
            addr,
            ui_dir,
            dataset_log,
            session,
        } => serve(&addr, ServerOptions { ui_dir, dataset_log }, session.as_deref()),
    }
}

fn parse_agent(name: &str) -> Result<AgentKind> {
    serde_json::from_value(serde_json::Value::String(name.into()))
        .with_context(|| format!("unknown agent {name:?}; expected tabular-q or softmax-pg"))
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn run_experiment(spec: &ExperimentSpec, out: Option<&Path>) -> Result<()> {
    eprintln!(
        "{}: {} condition(s) x {} seed(s) x {} steps",
        spec.env,
        spec.conditions.len(),
        spec.seeds.len(),
        spec.total_steps
    );
    let runs = run_spec(spec)?;
    print!("{}", render_summary(&summarize(&runs)));
    if let Some(dir) = out {
        for path in write_outputs(dir, &runs)? {
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn write_report<T: serde::Serialize>(out: Option<&Path>, stem: &str, table: &str, csv: &str, report: &T) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.txt")), table)?;
    std::fs::write(dir.join(format!("{stem}.csv")), csv)?;
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(report)?)?;
    eprintln!("wrote {stem}.txt, {stem}.csv and {stem}.json to {}", dir.display());
    Ok(())
}

fn cost(args: CostArgs) -> Result<()> {
    let mut scenarios = Vec::new();
    if args.builtin {
        scenarios.extend(builtin_scenarios());
    }
    if let Some(path) = &args.dataset {
        let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let records = read_record_summaries(std::io::BufReader::new(file))?;
        let inputs = measure_inputs(records.iter().map(LabelEntry::from))?;
        eprintln!(
            "measured: n_all {} n_cat {} rho {} t_human {}",
            inputs.n_all,
            inputs.n_cat,
            inputs.rho,
            inputs.t_human.map_or("none recorded".into(), |t| format!("{t:.3} s"))
        );
        let Some(t) = args.t_human.or(inputs.t_human) else {
            bail!("the dataset has no label latencies; pass --t to price it");
        };
        scenarios.push(Scenario::from_total(path.display().to_string(), t, inputs.n_all as f64)?);
    } else if let Some(t) = args.t_human {
        let scenario = match (args.n_all, args.rho, args.ncat) {
            (Some(n), None, None) => Scenario::from_total("custom", t, n)?,
            (None, Some(rho), Some(n_cat)) => Scenario::new("custom", t, rho, n_cat)?,
            _ => bail!("give --n-all, or both --rho and --ncat"),
        };
        scenarios.push(scenario);
    }
    if scenarios.is_empty() {
        bail!("nothing to price: give --dataset, --t with counts, or --builtin");
    }
    let rows = extrapolate(&scenarios);
    if args.csv {
        print!("{}", render_csv(&rows));
    } else {
        print!("{}", render_table(&rows));
    }
    Ok(())
}

struct SpecFor;

impl EnvVisitor for SpecFor {
    type Output = (BlockerSpec, usize);

    fn visit<E: Environment + Clone + 'static>(self, env: E) -> Self::Output {
        (BlockerSpec::for_env(&env), env.feature_dim())
    }
}

fn train_blocker(dataset: &Path, env: EnvName, env_config: Option<&str>, out: &Path, split_seed: Option<u64>) -> Result<()> {
    let config: Option<serde_json::Value> = env_config.map(serde_json::from_str).transpose().context("--env-config")?;
    let (mut spec, dim) = build_env(env, config.as_ref(), SpecFor)?;
    if let Some(seed) = split_seed {
        spec.train.split_seed = seed;
    }
    let file = std::fs::File::open(dataset).with_context(|| format!("opening {}", dataset.display()))?;
    let examples: Vec<Example> = read_record_summaries(std::io::BufReader::new(file))?
        .iter()
        .map(|r| r.example())
        .collect();
    if let Some(bad) = examples.iter().find(|e| e.features.len() != dim) {
        bail!("dataset features have width {}, {env} expects {dim}", bad.features.len());
    }
    let (model, report) = build_blocker(&spec, &examples)?;
    save_blocker(&model, out)?;
    println!(
        "{} records: held out {} ({} blocked), threshold {:.4}, false negatives {}, false positives {} ({:.2}%)",
        examples.len(),
        report.held_out,
        report.positives,
        report.threshold,
        report.false_negatives,
        report.false_positives,
        100.0 * report.fp_rate
    );
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn serve(addr: &str, options: ServerOptions, session: Option<&Path>) -> Result<()> {
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let registry = registry_for(&options)?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let bound = listener.local_addr()?;
        println!("listening on http://{bound}");
        if let Some(path) = session {
            let config: SessionConfig = load_json(path)?;
            let core = registry
                .open(config)
                .map_err(|e| anyhow::anyhow!("{}", serde_json::to_string(&e).unwrap_or_default()))?;
            println!("session {} at ws://{bound}/sessions/{}/ws", core.id, core.id);
        }
        hirl_server::serve(listener, registry, &options).await?;
        Ok(())
    })
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
