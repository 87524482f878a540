//! Learned imitator of the overseer: a class-reweighted logistic model over
//! (state, action) features with a zero-false-negative threshold.
//!
//! The train/held-out split is stratified over records. Each part is then
//! deduplicated into distinct feature vectors with counts, so the objective
//! only ever sees per-class frequencies and the fit is invariant to
//! duplicating its training set.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mdp::{ActionId, Environment, ReplacementStrategy};

#[derive(Debug, Error)]
pub enum BlockerError {
    #[error("dataset has {positives} blocked and {negatives} allowed records; need both")]
    DegenerateDataset { positives: usize, negatives: usize },
    #[error("calibration failed: {0}")]
    CalibrationFailed(String),
    #[error("corrupt blocker artifact: {0}")]
    CorruptArtifact(String),
    #[error("feature vector has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One labeled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub blocked: bool,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticModel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }
}

/// A distinct feature vector with its label, multiplicity and class weight.
#[derive(Debug, Clone)]
struct Row {
    index: Vec<u32>,
    value: Vec<f64>,
    blocked: bool,
    count: usize,
    weight: f64,
}

impl Row {
    fn logit(&self, m: &LogisticModel) -> f64 {
        let mut z = m.bias;
        for (i, v) in self.index.iter().zip(&self.value) {
            z += m.weights[*i as usize] * v;
        }
        z
    }

    fn dense(&self, dim: usize) -> Vec<f64> {
        let mut x = vec![0.0; dim];
        for (i, v) in self.index.iter().zip(&self.value) {
            x[*i as usize] = *v;
        }
        x
    }
}

/// Group examples by exact feature bits and label, in a canonical order.
fn group(examples: &[Example]) -> Vec<Row> {
    let mut groups: BTreeMap<(bool, Vec<u64>), usize> = BTreeMap::new();
    for ex in examples {
        let bits = ex.features.iter().map(|v| v.to_bits()).collect();
        *groups.entry((ex.blocked, bits)).or_default() += 1;
    }
    groups
        .into_iter()
        .map(|((blocked, bits), count)| {
            let (index, value) = bits
                .iter()
                .enumerate()
                .filter(|(_, b)| f64::from_bits(**b) != 0.0)
                .map(|(i, b)| (i as u32, f64::from_bits(*b)))
                .unzip();
            Row {
                index,
                value,
                blocked,
                count,
                weight: 0.0,
            }
        })
        .collect()
}

fn assign_class_weights(rows: &mut [Row]) {
    let pos: usize = rows.iter().filter(|r| r.blocked).map(|r| r.count).sum();
    let neg: usize = rows.iter().filter(|r| !r.blocked).map(|r| r.count).sum();
    for r in rows {
        let n = if r.blocked { pos } else { neg };
        r.weight = r.count as f64 / (2 * n) as f64;
    }
}

/// Cross-entropy with each class carrying half the total weight.
#[derive(Debug, Clone)]
pub struct ReweightedObjective {
    dim: usize,
    rows: Vec<Row>,
}

impl ReweightedObjective {
    pub fn new(dim: usize, examples: &[Example]) -> Result<Self, BlockerError> {
        if let Some(bad) = examples.iter().find(|e| e.features.len() != dim) {
            return Err(BlockerError::DimensionMismatch {
                expected: dim,
                got: bad.features.len(),
            });
        }
        let mut rows = group(examples);
        Self::check_classes(&rows)?;
        assign_class_weights(&mut rows);
        Ok(Self { dim, rows })
    }

    fn from_rows(dim: usize, mut rows: Vec<Row>) -> Result<Self, BlockerError> {
        Self::check_classes(&rows)?;
        assign_class_weights(&mut rows);
        Ok(Self { dim, rows })
    }

    fn check_classes(rows: &[Row]) -> Result<(), BlockerError> {
        let positives: usize = rows.iter().filter(|r| r.blocked).map(|r| r.count).sum();
        let negatives: usize = rows.iter().filter(|r| !r.blocked).map(|r| r.count).sum();
        if positives == 0 || negatives == 0 {
            return Err(BlockerError::DegenerateDataset {
                positives,
                negatives,
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of distinct (features, label) pairs.
    pub fn distinct(&self) -> usize {
        self.rows.len()
    }

    pub fn loss(&self, m: &LogisticModel) -> f64 {
        self.evaluate(m).0
    }

    /// Gradient with respect to (weights, bias).
    pub fn gradient(&self, m: &LogisticModel) -> (Vec<f64>, f64) {
        let (_, gw, gb) = self.evaluate(m);
        (gw, gb)
    }

    /// Loss and gradient in one pass. Rows are summed per fixed-size chunk and
    /// the chunks in order, so the result does not depend on thread count.
    fn evaluate(&self, m: &LogisticModel) -> (f64, Vec<f64>, f64) {
        const CHUNK: usize = 512;
        let partial = |rows: &[Row]| {
            let mut loss = 0.0;
            let mut gw = vec![0.0; self.dim];
            let mut gb = 0.0;
            for r in rows {
                let z = r.logit(m);
                let y = if r.blocked { 1.0 } else { 0.0 };
                // One exponential serves both softplus and sigmoid.
                let e = (-z.abs()).exp();
                loss += r.weight * (z.max(0.0) + e.ln_1p() - y * z);
                let p = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                let d = r.weight * (p - y);
                for (i, v) in r.index.iter().zip(&r.value) {
                    gw[*i as usize] += d * v;
                }
                gb += d;
            }
            (loss, gw, gb)
        };
        let parts: Vec<(f64, Vec<f64>, f64)> = if self.rows.len() > 4 * CHUNK {
            self.rows.par_chunks(CHUNK).map(partial).collect()
        } else {
            self.rows.chunks(CHUNK).map(partial).collect()
        };
        let mut loss = 0.0;
        let mut gw = vec![0.0; self.dim];
        let mut gb = 0.0;
        for (l, g, b) in parts {
            loss += l;
            for (acc, v) in gw.iter_mut().zip(&g) {
                *acc += v;
            }
            gb += b;
        }
        (loss, gw, gb)
    }

    /// Full-batch gradient descent from zero weights, stopping once the loss
    /// changes by less than the tolerance between iterates.
    pub fn fit(&self, cfg: &FitConfig) -> (LogisticModel, FitReport) {
        let mut m = LogisticModel::zeros(self.dim);
        let (mut loss, mut gw, mut gb) = self.evaluate(&m);
        let mut iterations = 0;
        let mut converged = false;
        while iterations < cfg.max_iterations {
            for (w, g) in m.weights.iter_mut().zip(&gw) {
                *w -= cfg.learning_rate * g;
            }
            m.bias -= cfg.learning_rate * gb;
            iterations += 1;
            let (next, ngw, ngb) = self.evaluate(&m);
            let delta = (loss - next).abs();
            (loss, gw, gb) = (next, ngw, ngb);
            if delta < cfg.tolerance {
                converged = true;
                break;
            }
        }
        (
            m,
            FitReport {
                iterations,
                final_loss: loss,
                converged,
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            tolerance: 1e-8,
            max_iterations: 50_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub fit: FitConfig,
    pub split_seed: u64,
    pub holdout_fraction: f64,
    /// The threshold is this factor times the smallest held-out positive score.
    pub threshold_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            split_seed: 0,
            holdout_fraction: 0.2,
            threshold_factor: 0.9,
        }
    }
}

/// Held-out distinct vectors with multiplicities.
#[derive(Debug, Clone)]
pub struct HeldOut {
    rows: Vec<Row>,
    dim: usize,
}

impl HeldOut {
    pub fn len(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Scores of held-out records, expanded by multiplicity.
    pub fn scores(&self, m: &LogisticModel) -> (Vec<f64>, Vec<f64>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for r in &self.rows {
            let s = m.score(&r.dense(self.dim));
            let out = if r.blocked { &mut pos } else { &mut neg };
            out.extend(std::iter::repeat_n(s, r.count));
        }
        (pos, neg)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: LogisticModel,
    pub fit: FitReport,
    pub train_records: usize,
    pub held_out: HeldOut,
}

/// Stratified split over records, then fit on the training part.
pub fn train(dim: usize, examples: &[Example], cfg: &TrainConfig) -> Result<TrainedModel, BlockerError> {
    if let Some(bad) = examples.iter().find(|e| e.features.len() != dim) {
        return Err(BlockerError::DimensionMismatch {
            expected: dim,
            got: bad.features.len(),
        });
    }
    ReweightedObjective::check_classes(&group(examples))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.split_seed);
    let mut train_part: Vec<Example> = Vec::new();
    let mut held_part: Vec<Example> = Vec::new();
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].blocked == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        // A class with a single record is used for both parts.
        let n_hold = if n < 2 {
            0
        } else {
            ((n as f64 * cfg.holdout_fraction).round() as usize).min(n - 1)
        };
        let (hold, rest) = idx.split_at(n_hold);
        held_part.extend(hold.iter().map(|&i| examples[i].clone()));
        train_part.extend(rest.iter().map(|&i| examples[i].clone()));
        if n == 1 {
            held_part.push(examples[idx[0]].clone());
        }
    }
    let train_rows = group(&train_part);
    let held_rows = group(&held_part);
    let train_records = train_rows.iter().map(|r| r.count).sum();
    let objective = ReweightedObjective::from_rows(dim, train_rows)?;
    let (model, fit) = objective.fit(&cfg.fit);
    Ok(TrainedModel {
        model,
        fit,
        train_records,
        held_out: HeldOut { rows: held_rows, dim },
    })
}

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub held_out: usize,
    pub positives: usize,
    pub negatives: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub fp_rate: f64,
    pub threshold: f64,
    pub min_positive_score: f64,
    pub positive_histogram: Vec<usize>,
    pub negative_histogram: Vec<usize>,
}

impl CalibrationReport {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("report serializes");
        hex(&Sha256::digest(bytes))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn histogram(scores: &[f64]) -> Vec<usize> {
    let mut h = vec![0; HISTOGRAM_BINS];
    for s in scores {
        let bin = ((s * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        h[bin] += 1;
    }
    h
}

pub const MIN_THRESHOLD: f64 = 1e-6;
pub const MAX_THRESHOLD: f64 = 1.0 - 1e-6;

/// Counts of (false negatives, false positives) when blocking at `score >= threshold`.
pub fn confusion_at(threshold: f64, positives: &[f64], negatives: &[f64]) -> (usize, usize) {
    let fn_ = positives.iter().filter(|s| **s < threshold).count();
    let fp = negatives.iter().filter(|s| **s >= threshold).count();
    (fn_, fp)
}

/// Pick `factor` times the smallest positive score and report the result.
pub fn calibrate_threshold(
    positives: &[f64],
    negatives: &[f64],
    factor: f64,
) -> Result<CalibrationReport, BlockerError> {
    let min_pos = positives.iter().copied().fold(f64::INFINITY, f64::min);
    if positives.is_empty() {
        return Err(BlockerError::CalibrationFailed("no held-out positives".into()));
    }
    if min_pos <= MIN_THRESHOLD {
        return Err(BlockerError::CalibrationFailed(format!(
            "smallest positive score {min_pos:e} is indistinguishable from zero"
        )));
    }
    let threshold = (factor * min_pos).clamp(MIN_THRESHOLD, MAX_THRESHOLD);
    let (false_negatives, false_positives) = confusion_at(threshold, positives, negatives);
    if false_negatives != 0 {
        return Err(BlockerError::CalibrationFailed(format!(
            "{false_negatives} held-out positives below threshold {threshold}"
        )));
    }
    Ok(CalibrationReport {
        held_out: positives.len() + negatives.len(),
        positives: positives.len(),
        negatives: negatives.len(),
        false_negatives,
        false_positives,
        fp_rate: if negatives.is_empty() {
            0.0
        } else {
            false_positives as f64 / negatives.len() as f64
        },
        threshold,
        min_positive_score: min_pos,
        positive_histogram: histogram(positives),
        negative_histogram: histogram(negatives),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockerMetadata {
    pub dataset_size: usize,
    pub n_cat: usize,
    pub train_records: usize,
    pub fit_iterations: usize,
    pub final_loss: f64,
    pub calibration_hash: String,
}

/// Verdict of the blocker on one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockerVerdict {
    pub score: f64,
    pub blocked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockerModel {
    pub env: String,
    pub feature_dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    pub strategy: ReplacementStrategy,
    pub penalty: f64,
    pub metadata: BlockerMetadata,
}

impl BlockerModel {
    pub fn logistic(&self) -> LogisticModel {
        LogisticModel {
            weights: self.weights.clone(),
            bias: self.bias,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let z = self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias;
        sigmoid(z)
    }

    pub fn score_action<E: Environment>(&self, env: &E, state: &E::State, action: ActionId) -> f64 {
        self.score(&env.features(state, action))
    }

    /// Threshold rule plus the pruning exemption: under action pruning the
    /// lowest-scoring action in the state is never blocked.
    pub fn judge<E: Environment>(&self, env: &E, state: &E::State, proposed: ActionId) -> BlockerVerdict {
        let score = self.score_action(env, state, proposed);
        let mut blocked = score >= self.threshold;
        if blocked && self.strategy == ReplacementStrategy::ActionPruning {
            let exempt = env
                .spec()
                .actions()
                .map(|a| (a, self.score_action(env, state, a)))
                .fold(None::<(ActionId, f64)>, |best, (a, s)| match best {
                    Some((_, bs)) if bs <= s => best,
                    _ => Some((a, s)),
                })
                .map(|(a, _)| a);
            blocked = exempt != Some(proposed);
        }
        BlockerVerdict { score, blocked }
    }

    pub fn check_env<E: Environment>(&self, env: &E) -> Result<(), BlockerError> {
        if self.env != env.name() {
            return Err(BlockerError::CorruptArtifact(format!(
                "model is for {:?}, environment is {:?}",
                self.env,
                env.name()
            )));
        }
        if self.feature_dim != env.feature_dim() {
            return Err(BlockerError::CorruptArtifact(format!(
                "model has feature dimension {}, environment has {}",
                self.feature_dim,
                env.feature_dim()
            )));
        }
        Ok(())
    }
}

/// Everything needed to turn labeled records into a deployable blocker.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockerSpec {
    pub env: String,
    pub feature_dim: usize,
    pub strategy: ReplacementStrategy,
    pub penalty: f64,
    pub train: TrainConfig,
}

impl BlockerSpec {
    pub fn for_env<E: Environment>(env: &E) -> Self {
        Self {
            env: env.name().to_string(),
            feature_dim: env.feature_dim(),
            strategy: env.default_replacement(),
            penalty: env.default_penalty(),
            train: TrainConfig::default(),
        }
    }
}

/// Train, calibrate and package a blocker.
pub fn build_blocker(
    spec: &BlockerSpec,
    examples: &[Example],
) -> Result<(BlockerModel, CalibrationReport), BlockerError> {
    let trained = train(spec.feature_dim, examples, &spec.train)?;
    let (pos, neg) = trained.held_out.scores(&trained.model);
    let report = calibrate_threshold(&pos, &neg, spec.train.threshold_factor)?;
    let model = BlockerModel {
        env: spec.env.clone(),
        feature_dim: spec.feature_dim,
        weights: trained.model.weights,
        bias: trained.model.bias,
        threshold: report.threshold,
        strategy: spec.strategy,
        penalty: spec.penalty,
        metadata: BlockerMetadata {
            dataset_size: examples.len(),
            n_cat: examples.iter().filter(|e| e.blocked).count(),
            train_records: trained.train_records,
            fit_iterations: trained.fit.iterations,
            final_loss: trained.fit.final_loss,
            calibration_hash: report.hash(),
        },
    };
    Ok((model, report))
}

const MAGIC: &[u8; 8] = b"HIRLBLKR";
const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArtifactHeader {
    env: String,
    feature_dim: usize,
    threshold: f64,
    strategy: ReplacementStrategy,
    penalty: f64,
    metadata: BlockerMetadata,
    content_hash: String,
}

fn content_hash(header: &ArtifactHeader, payload: &[u8]) -> String {
    let unhashed = ArtifactHeader {
        content_hash: String::new(),
        ..header.clone()
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&unhashed).expect("header serializes"));
    h.update(payload);
    hex(&h.finalize())
}

/// Binary artifact: magic, version, header length, JSON header, then the
/// weights and bias as little-endian f64.
pub fn write_blocker<W: Write>(model: &BlockerModel, mut out: W) -> Result<(), BlockerError> {
    let mut payload = Vec::with_capacity(8 * (model.weights.len() + 1));
    for w in model.weights.iter().chain(std::iter::once(&model.bias)) {
        payload.extend_from_slice(&w.to_le_bytes());
    }
    let mut header = ArtifactHeader {
        env: model.env.clone(),
        feature_dim: model.feature_dim,
        threshold: model.threshold,
        strategy: model.strategy,
        penalty: model.penalty,
        metadata: model.metadata.clone(),
        content_hash: String::new(),
    };
    header.content_hash = content_hash(&header, &payload);
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    out.write_all(MAGIC)?;
    out.write_all(&ARTIFACT_VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    out.write_all(&payload)?;
    Ok(())
}

pub fn read_blocker<R: Read>(mut input: R) -> Result<BlockerModel, BlockerError> {
    let corrupt = |m: &str| BlockerError::CorruptArtifact(m.to_string());
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != ARTIFACT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: ArtifactHeader =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt(&e.to_string()))?;
    let payload = &bytes[header_end..];
    if payload.len() != 8 * (header.feature_dim + 1) {
        return Err(corrupt("payload length does not match feature dimension"));
    }
    if content_hash(&header, payload) != header.content_hash {
        return Err(corrupt("content hash mismatch"));
    }
    let mut values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let bias = values.pop().expect("bias present");
    if !(header.threshold > 0.0 && header.threshold < 1.0) {
        return Err(corrupt("threshold outside (0, 1)"));
    }
    Ok(BlockerModel {
        env: header.env,
        feature_dim: header.feature_dim,
        weights: values,
        bias,
        threshold: header.threshold,
        strategy: header.strategy,
        penalty: header.penalty,
        metadata: header.metadata,
    })
}

pub fn save_blocker(model: &BlockerModel, path: &Path) -> Result<(), BlockerError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_blocker(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_blocker(path: &Path) -> Result<BlockerModel, BlockerError> {
    read_blocker(std::fs::File::open(path)?)
}

/// Load and check that the artifact matches `env`.
pub fn load_blocker_for<E: Environment>(path: &Path, env: &E) -> Result<BlockerModel, BlockerError> {
    let model = load_blocker(path)?;
    model.check_env(env)?;
    Ok(model)
}
