//! One oversight session: a simulation thread that halts on every proposed
//! action until the attached client (or the auto-responder) answers.

use std::io::Write;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use hirl_core::blocker::CalibrationReport;
use hirl_core::cost::{cost_ratio, measure_inputs, CostInputs, LabelEntry};
use hirl_core::experiments::agent_seed;
use hirl_core::intervention::{
    resolve_replacement, DatasetSink, DecisionContext, InterventionError, LabelCorrection, Lifecycle,
    Replacement,
};
use hirl_core::{
    build_env, ActionId, Agent, AgentConfig, EnvName, EnvVisitor, Environment, OracleOverseer, Overseer,
    OverseerDecision, OverseerKind,
};
use serde::Serialize;
use tokio::sync::mpsc::UnboundedSender;

use crate::protocol::{
    ErrorCode, Metrics, ServerMessage, SessionConfig, SessionId, SessionPhase, WireVerdict, PROTOCOL_VERSION,
};

/// Read access to a session's dataset without knowing its state type.
pub trait DatasetView: Send + Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn blocked(&self) -> usize;
    fn labels(&self) -> Vec<LabelEntry>;
    /// JSON lines of every record from index `start` on.
    fn write_since(&self, start: usize, out: &mut dyn Write) -> std::io::Result<usize>;
}

impl<S: Clone + Serialize + Send + Sync> DatasetView for DatasetSink<S> {
    fn len(&self) -> usize {
        DatasetSink::len(self)
    }

    fn blocked(&self) -> usize {
        self.blocked_count()
    }

    fn labels(&self) -> Vec<LabelEntry> {
        self.snapshot().iter().map(LabelEntry::from).collect()
    }

    fn write_since(&self, start: usize, out: &mut dyn Write) -> std::io::Result<usize> {
        let records = self.since(start);
        for r in &records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(records.len())
    }
}

/// Append-serialized log shared by every session; each line is a record
/// tagged with its session.
pub struct DatasetLog {
    out: Mutex<Box<dyn Write + Send>>,
}

impl DatasetLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        Self { out: Mutex::new(out) }
    }

    pub fn create(path: &std::path::Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(Box::new(file)))
    }

    fn append(&self, session: SessionId, dataset: &dyn DatasetView, start: usize) -> std::io::Result<usize> {
        let mut buf = Vec::new();
        let n = dataset.write_since(start, &mut buf)?;
        let mut tagged = Vec::with_capacity(buf.len() + n * 16);
        for line in buf.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
            write!(tagged, "{{\"session\":{session},")?;
            tagged.extend_from_slice(&line[1..]);
            tagged.push(b'\n');
        }
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        out.write_all(&tagged)?;
        out.flush()?;
        Ok(n)
    }
}

/// A client's answer as delivered to the simulation thread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Answer {
    pub verdict: WireVerdict,
    pub replacement: Option<usize>,
    pub latency: f64,
}

struct Pending {
    id: u64,
    frame: ServerMessage,
    request: ServerMessage,
    issued: Instant,
}

struct Client {
    conn: u64,
    tx: UnboundedSender<ServerMessage>,
}

#[derive(Default)]
struct Counters {
    labels: u64,
    blocks: u64,
    latency_sum: f64,
    latency_n: u64,
    auto_allowed: u64,
}

struct Inner {
    phase: SessionPhase,
    client: Option<Client>,
    next_conn: u64,
    next_request: u64,
    pending: Option<Pending>,
    counters: Counters,
    started_at: Option<Instant>,
    start: Option<mpsc::Sender<()>>,
    answers: Option<mpsc::Sender<Answer>>,
    corrections: Vec<LabelCorrection>,
    calibration: Option<CalibrationReport>,
    error: Option<String>,
    dataset: Option<Arc<dyn DatasetView>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionStatus {
    pub session_id: SessionId,
    pub env: EnvName,
    pub phase: SessionPhase,
    pub attached: bool,
    pub pending_request: Option<u64>,
    pub metrics: Metrics,
    pub dataset_len: usize,
    pub dataset_blocked: usize,
    /// Measured from the dataset; absent while it is empty.
    pub cost: Option<CostInputs>,
    pub auto_allowed: u64,
    pub corrections: usize,
    pub calibration: Option<CalibrationReport>,
    pub error: Option<String>,
}

/// State shared between the simulation thread and connection handlers.
pub struct SessionCore {
    pub id: SessionId,
    pub env: EnvName,
    pub action_names: Vec<String>,
    inner: Mutex<Inner>,
}

impl SessionCore {
    fn new(id: SessionId, env: EnvName, action_names: Vec<String>) -> (Self, mpsc::Receiver<()>, mpsc::Receiver<Answer>) {
        let (start_tx, start_rx) = mpsc::channel();
        let (answer_tx, answer_rx) = mpsc::channel();
        let core = Self {
            id,
            env,
            action_names,
            inner: Mutex::new(Inner {
                phase: SessionPhase::AwaitingClient,
                client: None,
                next_conn: 0,
                next_request: 1,
                pending: None,
                counters: Counters::default(),
                started_at: None,
                start: Some(start_tx),
                answers: Some(answer_tx),
                corrections: Vec::new(),
                calibration: None,
                error: None,
                dataset: None,
            }),
        };
        (core, start_rx, answer_rx)
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn hello(&self) -> ServerMessage {
        ServerMessage::Hello {
            version: PROTOCOL_VERSION,
            session_id: self.id,
            env: self.env,
            action_names: self.action_names.clone(),
        }
    }

    /// Attach a client connection. A session takes one overseer at a time.
    /// On success the client receives the handshake, then the pending frame
    /// and request if the simulation is waiting on one, and the first
    /// attach starts the simulation.
    pub fn attach(&self, tx: UnboundedSender<ServerMessage>) -> Result<u64, ServerMessage> {
        let mut inner = self.lock();
        if inner.client.is_some() {
            return Err(ServerMessage::error(
                ErrorCode::SessionBusy,
                format!("session {} already has an overseer", self.id),
            ));
        }
        let conn = inner.next_conn;
        inner.next_conn += 1;
        let _ = tx.send(self.hello());
        let _ = tx.send(ServerMessage::PhaseChange {
            phase: inner.phase,
            calibration: inner.calibration.clone(),
        });
        if inner.counters.labels > 0 {
            let _ = tx.send(ServerMessage::MetricsUpdate(metrics_of(&inner)));
        }
        if let Some(p) = &inner.pending {
            let _ = tx.send(p.frame.clone());
            let _ = tx.send(p.request.clone());
        }
        inner.client = Some(Client { conn, tx });
        if let Some(start) = inner.start.take() {
            let _ = start.send(());
        }
        Ok(conn)
    }

    /// Drop a connection; the simulation stays paused on any pending request.
    pub fn detach(&self, conn: u64) {
        let mut inner = self.lock();
        if inner.client.as_ref().is_some_and(|c| c.conn == conn) {
            inner.client = None;
        }
    }

    /// Send to the attached client, if any.
    pub fn send(&self, msg: ServerMessage) {
        send_locked(&self.lock(), msg);
    }

    /// Send to `conn` only while it is the attached client.
    pub fn send_to(&self, conn: u64, msg: ServerMessage) {
        let inner = self.lock();
        if let Some(c) = inner.client.as_ref().filter(|c| c.conn == conn) {
            let _ = c.tx.send(msg);
        }
    }

    /// Issue a decision request; the caller then waits for the answer.
    pub fn request_decision(
        &self,
        frame: ServerMessage,
        proposed: ActionId,
        default_replacement: Option<usize>,
    ) -> Result<u64, ErrorCode> {
        let mut inner = self.lock();
        if inner.pending.is_some() {
            return Err(ErrorCode::PendingExists);
        }
        let id = inner.next_request;
        inner.next_request += 1;
        let request = ServerMessage::DecisionRequest {
            id,
            proposed_action: proposed.0,
            action_names: self.action_names.clone(),
            default_replacement,
        };
        send_locked(&inner, frame.clone());
        send_locked(&inner, request.clone());
        inner.pending = Some(Pending {
            id,
            frame,
            request,
            issued: Instant::now(),
        });
        Ok(id)
    }

    /// Apply a client's answer to the pending request. Answers to any other
    /// id leave the session untouched.
    pub fn respond(&self, id: u64, verdict: WireVerdict, replacement: Option<usize>) -> Result<(), ServerMessage> {
        let mut inner = self.lock();
        match &inner.pending {
            Some(p) if p.id == id => {}
            Some(p) => {
                return Err(ServerMessage::error(
                    ErrorCode::StaleResponse,
                    format!("request {id} is not pending; {} is", p.id),
                ))
            }
            None => {
                return Err(ServerMessage::error(
                    ErrorCode::StaleResponse,
                    format!("request {id} is not pending"),
                ))
            }
        }
        if let Some(a) = replacement {
            if a >= self.action_names.len() {
                return Err(ServerMessage::error(
                    ErrorCode::InvalidMessage,
                    format!("replacement {a} is not an action"),
                ));
            }
        }
        let Some(answers) = inner.answers.clone() else {
            return Err(ServerMessage::error(ErrorCode::SessionFailed, "session is closed"));
        };
        let pending = inner.pending.take().expect("checked above");
        let answer = Answer {
            verdict,
            replacement,
            latency: pending.issued.elapsed().as_secs_f64(),
        };
        if answers.send(answer).is_err() {
            return Err(ServerMessage::error(ErrorCode::SessionFailed, "simulation has stopped"));
        }
        Ok(())
    }

    /// Withdraw request `id` if still unanswered.
    fn expire(&self, id: u64) -> bool {
        let mut inner = self.lock();
        if inner.pending.as_ref().is_some_and(|p| p.id == id) {
            inner.pending = None;
            true
        } else {
            false
        }
    }

    fn record_decision(&self, blocked: bool, latency: Option<f64>, auto_allowed: bool) {
        let mut inner = self.lock();
        let c = &mut inner.counters;
        c.labels += 1;
        c.blocks += u64::from(blocked);
        c.auto_allowed += u64::from(auto_allowed);
        if let Some(s) = latency {
            c.latency_sum += s;
            c.latency_n += 1;
        }
        let metrics = metrics_of(&inner);
        send_locked(&inner, ServerMessage::MetricsUpdate(metrics));
    }

    fn set_phase(&self, phase: SessionPhase, calibration: Option<CalibrationReport>) {
        let mut inner = self.lock();
        inner.phase = phase;
        if phase == SessionPhase::HumanOversight {
            inner.started_at = Some(Instant::now());
        }
        if calibration.is_some() {
            inner.calibration = calibration.clone();
        }
        send_locked(&inner, ServerMessage::PhaseChange { phase, calibration });
    }

    fn set_dataset(&self, dataset: Arc<dyn DatasetView>) {
        self.lock().dataset = Some(dataset);
    }

    fn fail(&self, message: String) {
        let mut inner = self.lock();
        send_locked(&inner, ServerMessage::error(ErrorCode::SessionFailed, message.clone()));
        inner.error = Some(message);
    }

    /// Queue a relabel of record `record`, applied when the blocker is trained.
    pub fn relabel(&self, record: usize, blocked: bool) -> Result<(), ServerMessage> {
        let mut inner = self.lock();
        let len = inner.dataset.as_ref().map_or(0, |d| d.len());
        if record >= len {
            return Err(ServerMessage::error(
                ErrorCode::InvalidMessage,
                format!("record {record} of {len} does not exist"),
            ));
        }
        inner.corrections.push(LabelCorrection { record, blocked });
        Ok(())
    }

    fn take_corrections(&self) -> Vec<LabelCorrection> {
        std::mem::take(&mut self.lock().corrections)
    }

    pub fn metrics(&self) -> Metrics {
        metrics_of(&self.lock())
    }

    pub fn status(&self) -> SessionStatus {
        let inner = self.lock();
        let (dataset_len, dataset_blocked, cost) = match &inner.dataset {
            Some(d) => (d.len(), d.blocked(), measure_inputs(d.labels()).ok()),
            None => (0, 0, None),
        };
        SessionStatus {
            session_id: self.id,
            env: self.env,
            phase: inner.phase,
            attached: inner.client.is_some(),
            pending_request: inner.pending.as_ref().map(|p| p.id),
            metrics: metrics_of(&inner),
            dataset_len,
            dataset_blocked,
            cost,
            auto_allowed: inner.counters.auto_allowed,
            corrections: inner.corrections.len(),
            calibration: inner.calibration.clone(),
            error: inner.error.clone(),
        }
    }

    /// Every record so far as JSON lines.
    pub fn dataset_jsonl(&self) -> Vec<u8> {
        let dataset = self.lock().dataset.clone();
        let mut out = Vec::new();
        if let Some(d) = dataset {
            d.write_since(0, &mut out).expect("in-memory write");
        }
        out
    }

    /// Stop the session: the client is dropped and a waiting simulation
    /// thread ends.
    pub fn close(&self) {
        let mut inner = self.lock();
        inner.client = None;
        inner.start = None;
        inner.answers = None;
        inner.pending = None;
    }
}

fn send_locked(inner: &Inner, msg: ServerMessage) {
    if let Some(c) = &inner.client {
        let _ = c.tx.send(msg);
    }
}

fn metrics_of(inner: &Inner) -> Metrics {
    let c = &inner.counters;
    let mean_latency_s = (c.latency_n > 0).then(|| c.latency_sum / c.latency_n as f64);
    let inputs = CostInputs::from_counts(mean_latency_s, c.labels, c.blocks);
    let rho = (c.blocks > 0).then_some(inputs.rho);
    let projected_cost_s = mean_latency_s.map(|t| match rho {
        Some(r) => cost_ratio(t, r, c.blocks as f64),
        None => t * c.labels as f64,
    });
    Metrics {
        labels: c.labels,
        blocks: c.blocks,
        elapsed_s: inner.started_at.map_or(0.0, |t| t.elapsed().as_secs_f64()),
        mean_latency_s,
        rho,
        projected_cost_s,
    }
}

/// The overseer the lifecycle talks to during the human phase.
struct RemoteOverseer {
    core: Arc<SessionCore>,
    answers: mpsc::Receiver<Answer>,
    timeout: Option<Duration>,
    penalty: f64,
    auto_responder: bool,
    log: Option<Arc<DatasetLog>>,
    dataset: Arc<dyn DatasetView>,
    logged: usize,
}

impl RemoteOverseer {
    fn flush_log(&mut self) -> Result<(), InterventionError> {
        if let Some(log) = &self.log {
            self.logged += log.append(self.core.id, self.dataset.as_ref(), self.logged)?;
        }
        Ok(())
    }

    fn wait(&self, id: u64) -> Result<(Answer, bool), InterventionError> {
        let closed = || InterventionError::OverseerUnavailable("session closed".into());
        let Some(limit) = self.timeout else {
            return self.answers.recv().map(|a| (a, false)).map_err(|_| closed());
        };
        match self.answers.recv_timeout(limit) {
            Ok(a) => Ok((a, false)),
            Err(RecvTimeoutError::Timeout) if self.core.expire(id) => Ok((
                Answer {
                    verdict: WireVerdict::Allow,
                    replacement: None,
                    latency: limit.as_secs_f64(),
                },
                true,
            )),
            // Answered just as the timer ran out.
            Err(RecvTimeoutError::Timeout) => self.answers.recv().map(|a| (a, false)).map_err(|_| closed()),
            Err(RecvTimeoutError::Disconnected) => Err(closed()),
        }
    }
}

impl<E: Environment> Overseer<E> for RemoteOverseer {
    fn kind(&self) -> OverseerKind {
        OverseerKind::Human
    }

    fn decide(
        &mut self,
        env: &E,
        state: &E::State,
        proposed: ActionId,
        ctx: &DecisionContext,
    ) -> Result<OverseerDecision, InterventionError> {
        self.flush_log()?;
        let default = resolve_replacement(env, env.default_replacement(), proposed);
        let default_index = match default {
            Replacement::Action(a) => Some(a.0),
            Replacement::Requery => None,
        };
        let frame = ServerMessage::frame(env.frame(state), ctx.score, SessionPhase::HumanOversight, ctx.episode, ctx.step);
        let id = self
            .core
            .request_decision(frame, proposed, default_index)
            .map_err(|code| InterventionError::OverseerUnavailable(format!("{code:?}")))?;
        if self.auto_responder {
            let judged = OracleOverseer::for_env(env).judge(env, state, proposed);
            let (verdict, replacement) = match judged.replacement {
                Some(Replacement::Action(a)) => (WireVerdict::Block, Some(a.0)),
                Some(Replacement::Requery) => (WireVerdict::Block, None),
                None => (WireVerdict::Allow, None),
            };
            self.core
                .respond(id, verdict, replacement)
                .map_err(|e| InterventionError::OverseerUnavailable(format!("{e:?}")))?;
        }
        let (answer, auto_allowed) = self.wait(id)?;
        let decision = match answer.verdict {
            WireVerdict::Allow => OverseerDecision::allow(),
            WireVerdict::Block => {
                let replacement = answer.replacement.map_or(default, |a| Replacement::Action(ActionId(a)));
                OverseerDecision::block(replacement, self.penalty)
            }
        };
        // A timeout is not a label; it carries no labeling time.
        let decision = if auto_allowed {
            OverseerDecision {
                auto_allowed: true,
                ..decision
            }
        } else {
            decision.with_latency(answer.latency)
        };
        self.core
            .record_decision(decision.is_block(), decision.label_latency, auto_allowed);
        Ok(decision)
    }
}

/// A started session: its shared state and simulation thread.
pub struct Launched {
    pub core: Arc<SessionCore>,
    pub thread: JoinHandle<()>,
}

struct Launch {
    id: SessionId,
    config: SessionConfig,
    log: Option<Arc<DatasetLog>>,
}

impl EnvVisitor for Launch {
    type Output = Result<Launched, String>;

    fn visit<E: Environment + Clone + 'static>(self, env: E) -> Self::Output {
        let cfg = self.config;
        let agent_cfg = cfg
            .agent_config
            .clone()
            .unwrap_or_else(|| AgentConfig::for_kind(cfg.agent, cfg.schedule_steps()))
            .with_seed(agent_seed(cfg.seed));
        let agent = Agent::new(agent_cfg, env.num_actions()).map_err(|e| e.to_string())?;
        let (core, start_rx, answers) = SessionCore::new(self.id, cfg.env, env.spec().action_names.clone());
        let core = Arc::new(core);
        if cfg.auto_responder {
            if let Some(start) = core.lock().start.take() {
                let _ = start.send(());
            }
        }
        let thread_core = Arc::clone(&core);
        let log = self.log;
        let thread = std::thread::Builder::new()
            .name(format!("session-{}", self.id))
            .spawn(move || {
                if start_rx.recv().is_err() {
                    return;
                }
                run_session(env, agent, cfg, thread_core, answers, log);
            })
            .map_err(|e| e.to_string())?;
        Ok(Launched { core, thread })
    }
}

/// Validate `config` and start its simulation thread, paused until a client
/// attaches unless the auto-responder answers.
pub fn launch(id: SessionId, config: SessionConfig, log: Option<Arc<DatasetLog>>) -> Result<Launched, String> {
    config.validate()?;
    let env = config.env;
    let env_config = config.env_config.clone();
    build_env(env, env_config.as_ref(), Launch { id, config, log }).map_err(|e| e.to_string())?
}

fn run_session<E: Environment + 'static>(
    env: E,
    agent: Agent,
    cfg: SessionConfig,
    core: Arc<SessionCore>,
    answers: mpsc::Receiver<Answer>,
    log: Option<Arc<DatasetLog>>,
) {
    let penalty = cfg.penalty.unwrap_or_else(|| env.default_penalty());
    let mut life = Lifecycle::new(env, agent, cfg.seed);
    let dataset: Arc<dyn DatasetView> = life.shared_dataset();
    core.set_dataset(Arc::clone(&dataset));
    let mut overseer = RemoteOverseer {
        core: Arc::clone(&core),
        answers,
        timeout: cfg.decision_timeout_s.map(Duration::from_secs_f64),
        penalty,
        auto_responder: cfg.auto_responder,
        log,
        dataset,
        logged: 0,
    };
    core.set_phase(SessionPhase::HumanOversight, None);
    let result = (|| -> Result<(), InterventionError> {
        let human = life.human_phase(&mut overseer, cfg.human_budget, cfg.pacing);
        overseer.flush_log()?;
        human?;
        if let Some(steps) = cfg.blocker_steps {
            core.set_phase(SessionPhase::BlockerTraining, None);
            for c in core.take_corrections() {
                life.correct_label(c)?;
            }
            let report = life.train_blocker()?;
            core.set_phase(SessionPhase::BlockerOversight, report.calibration);
            life.blocker_phase(steps)?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        core.fail(e.to_string());
    }
    core.set_phase(SessionPhase::Finished, None);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> ServerMessage {
        ServerMessage::FrameUpdate {
            grid: vec![],
            entities: vec![],
            zone_rows: vec![],
            score: 0.0,
            phase: SessionPhase::HumanOversight,
            episode: 0,
            step: 0,
        }
    }

    #[test]
    fn one_pending_request_at_a_time() {
        let (core, _start, answers) = SessionCore::new(1, EnvName::ZoneCorridor, vec!["up".into(), "down".into()]);
        let id = core.request_decision(frame(), ActionId(1), Some(0)).unwrap();
        assert_eq!(core.request_decision(frame(), ActionId(0), Some(0)), Err(ErrorCode::PendingExists));
        assert!(core.respond(id + 1, WireVerdict::Allow, None).is_err());
        assert!(core.respond(id, WireVerdict::Block, Some(7)).is_err());
        core.respond(id, WireVerdict::Block, Some(0)).unwrap();
        let a = answers.recv().unwrap();
        assert_eq!((a.verdict, a.replacement), (WireVerdict::Block, Some(0)));
        assert!(a.latency >= 0.0);
        // A second answer to the same request is stale.
        assert!(matches!(
            core.respond(id, WireVerdict::Allow, None),
            Err(ServerMessage::Error {
                code: ErrorCode::StaleResponse,
                ..
            })
        ));
        assert!(answers.try_recv().is_err());
    }

    #[test]
    fn projection_matches_cost_formula() {
        let (core, _start, _answers) = SessionCore::new(1, EnvName::ZoneCorridor, vec!["up".into()]);
        core.record_decision(true, Some(0.5), false);
        core.record_decision(false, Some(1.0), false);
        core.record_decision(false, Some(0.3), false);
        let m = core.metrics();
        assert_eq!((m.labels, m.blocks, m.rho), (3, 1, Some(3.0)));
        let t = 1.8 / 3.0;
        assert!((m.projected_cost_s.unwrap() - cost_ratio(t, 3.0, 1.0)).abs() < 1e-12);
    }
}
