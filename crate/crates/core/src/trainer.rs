//! Optimization loop: AdamW with global-norm clipping, warmup plus cosine or
//! constant learning rate, optional EMA weights, periodic validation,
//! checkpoints and a CSV metrics log.
//!
//! Batches are assembled from epoch-wise permutations of the training set.
//! Every random draw is keyed by the global sample index, so results do not
//! depend on the number of worker threads.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::corpus::{Dataset, Vocab};
use crate::error::{invalid, LabError, Result};
use crate::model::{Checkpoint, Model, ModelConfig, ModelParams};
use crate::objectives::{
    accumulate_example, build_arm, example_loss_sum, normalizer, Objective, ObjectiveConfig, TrainingExample,
};
use crate::rng::{stream, Purpose};

/// Sequences per parallel gradient task. Fixed so that the summation order
/// is independent of the thread count.
const CHUNK: usize = 4;

/// Blob key holding the completed step count in checkpoints.
pub const STEP_KEY: &str = "state.step";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Cosine => "cosine",
            LrSchedule::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(LrSchedule::Cosine),
            "constant" | "constant_after_warmup" => Ok(LrSchedule::Constant),
            _ => Err(invalid(format!("unknown lr schedule `{s}` (expected cosine or constant)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay, applied to matrices and embeddings only.
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: Option<f64>,
    pub seed: u64,
    /// Validation interval in steps; 0 validates only at the end.
    pub eval_every: u64,
    /// Cap on validation sequences; 0 uses the whole split.
    pub eval_sequences: usize,
    /// Training-loss logging interval in steps.
    pub log_every: u64,
    /// When non-zero, `steps` is derived from this many passes over the
    /// training set and validation runs at every epoch boundary.
    pub epochs: u64,
    /// Record real wall time in the metrics log; off keeps logs reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            peak_lr: 3e-4,
            warmup_steps: 100,
            lr_schedule: LrSchedule::Cosine,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            ema_decay: None,
            seed: 0,
            eval_every: 100,
            eval_sequences: 256,
            log_every: 10,
            epochs: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, value: String, reason: &str| LabError::InvalidValue {
            key: format!("train.{key}"),
            value,
            reason: reason.into(),
        };
        if self.batch_size == 0 {
            return Err(bad("batch_size", "0".into(), "must be at least 1"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(bad("peak_lr", self.peak_lr.to_string(), "must be positive"));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(bad(key, b.to_string(), "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(bad("adam_eps", self.adam_eps.to_string(), "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(bad("weight_decay", self.weight_decay.to_string(), "must be non-negative"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(bad("grad_clip", self.grad_clip.to_string(), "must be positive"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..=1.0).contains(&d) {
                return Err(bad("ema_decay", d.to_string(), "must lie in [0, 1]"));
            }
        }
        if self.log_every == 0 {
            return Err(bad("log_every", "0".into(), "must be at least 1"));
        }
        Ok(())
    }

    /// Total optimizer steps for a training set of `n_train` sequences.
    pub fn total_steps(&self, n_train: usize) -> u64 {
        if self.epochs == 0 {
            self.steps
        } else {
            (self.epochs * n_train as u64).div_ceil(self.batch_size as u64)
        }
    }
}

/// Learning rate of the update that completes step `step` (1-based), with
/// `total` steps overall.
pub fn lr_at(step: u64, total: u64, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.lr_schedule {
        LrSchedule::Constant => peak,
        LrSchedule::Cosine => {
            if total <= cfg.warmup_steps {
                return peak;
            }
            let progress = ((step - cfg.warmup_steps) as f64 / (total - cfg.warmup_steps) as f64).min(1.0);
            peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
        }
    }
}

/// Optimizer hyperparameters for one update.
#[derive(Debug, Clone, Copy)]
pub struct AdamStep {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// 1-based update count, for bias correction.
    pub t: u64,
}

/// One AdamW update of a flat array.
pub fn adam_update(p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], h: AdamStep, decay: bool) {
    let b1 = h.beta1 as f32;
    let b2 = h.beta2 as f32;
    let c1 = 1.0 - h.beta1.powi(h.t as i32);
    let c2 = 1.0 - h.beta2.powi(h.t as i32);
    let lr = h.lr as f32;
    let wd = if decay { h.weight_decay as f32 } else { 0.0 };
    let (c1, c2, eps) = (c1 as f32, c2 as f32, h.eps as f32);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p[i]);
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    pub ema: Option<ModelParams<f32>>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model<f32>, ema: bool) -> Self {
        let zeros = ModelParams::zeros(model.config());
        Self {
            ema: ema.then(|| model.params().clone()),
            m: zeros.clone(),
            v: zeros,
            model,
            step: 0,
        }
    }

    /// EMA weights if present, otherwise the raw ones.
    pub fn eval_model(&self) -> Model<f32> {
        match &self.ema {
            Some(ema) => Model::new(self.model.config().clone(), ema.clone()).expect("shapes mirror the model"),
            None => self.model.clone(),
        }
    }

    /// Checkpoint with `config` as blob plus the step count, parameters,
    /// optimizer moments and EMA weights.
    pub fn to_checkpoint(&self, config: &str) -> Checkpoint {
        let mut blob = config.to_string();
        if !blob.is_empty() && !blob.ends_with('\n') {
            blob.push('\n');
        }
        blob.push_str(&format!("{STEP_KEY} = {}\n", self.step));
        let mut ck = Checkpoint::new(blob);
        ck.push_params("", self.model.params());
        ck.push_params("adam.m.", &self.m);
        ck.push_params("adam.v.", &self.v);
        if let Some(ema) = &self.ema {
            ck.push_params("ema.", ema);
        }
        ck
    }

    /// Restore from a checkpoint; missing optimizer arrays start from zero.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ModelConfig) -> Result<Self> {
        let model = Model::new(cfg.clone(), ck.params("", cfg)?)?;
        let step = blob_value(&ck.config, STEP_KEY)
            .map(|s| {
                s.parse::<u64>()
                    .map_err(|_| LabError::Format { what: "checkpoint", reason: format!("bad {STEP_KEY} `{s}`") })
            })
            .transpose()?
            .unwrap_or(0);
        let has = |prefix: &str| ck.get(&format!("{prefix}tok_emb")).is_some();
        let zeros = ModelParams::zeros(cfg);
        Ok(Self {
            m: if has("adam.m.") { ck.params("adam.m.", cfg)? } else { zeros.clone() },
            v: if has("adam.v.") { ck.params("adam.v.", cfg)? } else { zeros },
            ema: if has("ema.") { Some(ck.params("ema.", cfg)?) } else { None },
            model,
            step,
        })
    }
}

/// Value of `key` in a `key = value` blob.
pub fn blob_value<'a>(blob: &'a str, key: &str) -> Option<&'a str> {
    blob.lines().find_map(|line| {
        let (k, v) = line.split_once('=')?;
        (k.trim() == key).then(|| v.trim())
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub clipped_norm: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub split: &'static str,
    pub objective: &'static str,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,split,objective,loss,lr,wall_ms";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6e},{}",
            self.step, self.split, self.objective, self.loss, self.lr, self.wall_ms
        )
    }
}

/// Where a training run writes checkpoints and metrics.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Resolved configuration, stored in every checkpoint.
    pub config_blob: String,
}

impl RunOutput {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ck")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ck")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_train_loss: Option<f64>,
    pub final_validation: Option<f64>,
    pub best_validation: Option<f64>,
    pub skipped_steps: u64,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    objective: ObjectiveConfig,
    vocab: Vocab,
    train: &'a Dataset,
    validation: Option<&'a Dataset>,
    state: TrainState,
    total_steps: u64,
    output: Option<RunOutput>,
    metrics: Vec<MetricRow>,
    metrics_file: Option<File>,
    best_validation: Option<f64>,
    last_validation: Option<f64>,
    last_train_loss: Option<f64>,
    skipped: u64,
    epoch_perm: Option<(u64, Vec<usize>)>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        objective: ObjectiveConfig,
        vocab: Vocab,
        train: &'a Dataset,
        validation: Option<&'a Dataset>,
        state: TrainState,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(invalid("training set is empty"));
        }
        objective.validate(train.seq_len(), state.model.config().max_len)?;
        let expected = objective.objective.attn_mode(objective.block_size);
        if state.model.config().attn_mode != expected {
            return Err(invalid(format!(
                "model attention mode {} does not match objective {} ({expected})",
                state.model.config().attn_mode,
                objective.objective.name()
            )));
        }
        let total_steps = cfg.total_steps(train.len());
        Ok(Self {
            cfg,
            objective,
            vocab,
            train,
            validation,
            state,
            total_steps,
            output: None,
            metrics: Vec::new(),
            metrics_file: None,
            best_validation: None,
            last_validation: None,
            last_train_loss: None,
            skipped: 0,
            epoch_perm: None,
            started: Instant::now(),
        })
    }

    /// Write metrics and checkpoints under `output.dir`. A fresh run
    /// truncates the metrics file, a resumed one appends to it.
    pub fn with_output(mut self, output: RunOutput) -> Result<Self> {
        fs::create_dir_all(&output.dir)?;
        let path = output.metrics_path();
        let file = if self.state.step > 0 && path.exists() {
            OpenOptions::new().append(true).open(&path)?
        } else {
            let mut f = File::create(&path)?;
            writeln!(f, "{METRICS_HEADER}")?;
            f
        };
        self.metrics_file = Some(file);
        self.output = Some(output);
        Ok(self)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    fn steps_per_epoch(&self) -> u64 {
        (self.train.len() as u64).div_ceil(self.cfg.batch_size as u64)
    }

    /// Training-set index of global sample `k`.
    fn sample_index(&mut self, k: u64) -> usize {
        let n = self.train.len() as u64;
        let epoch = k / n;
        if self.epoch_perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.train.len()).collect();
            perm.shuffle(&mut stream(self.cfg.seed, Purpose::Batch, epoch, 0));
            self.epoch_perm = Some((epoch, perm));
        }
        self.epoch_perm.as_ref().expect("just set").1[(k % n) as usize]
    }

    /// Examples for the batch of step `step` (0-based), grouped by sequence.
    pub fn batch(&mut self, step: u64) -> Result<Vec<Vec<TrainingExample>>> {
        let b = self.cfg.batch_size as u64;
        (0..b)
            .map(|i| {
                let k = step * b + i;
                let idx = self.sample_index(k);
                let mut rng = stream(self.cfg.seed, Purpose::Corruption, k, 0);
                let seq = self.train.get(idx);
                self.objective.build(seq.ids(), self.train.valid_len(idx), &self.vocab, &mut rng)
            })
            .collect()
    }

    /// One optimizer step. A non-finite loss or gradient leaves the state untouched.
    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.state.step;
        let lr = lr_at(step + 1, self.total_steps, &self.cfg);
        let batch = self.batch(step)?;
        let flat: Vec<TrainingExample> = batch.iter().flatten().cloned().collect();
        let denom = normalizer(&flat, batch.len(), self.objective.loss_norm)?;
        let scale = 1.0 / denom;

        let model = &self.state.model;
        let parts: Vec<Result<(f64, ModelParams<f32>)>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = ModelParams::zeros(model.config());
                let mut sum = 0.0;
                for ex in chunk.iter().flatten() {
                    sum += accumulate_example(model, ex, scale, &mut g)?;
                }
                Ok((sum, g))
            })
            .collect();
        let mut grads = ModelParams::zeros(model.config());
        let mut total = 0.0;
        for part in parts {
            let (sum, g) = part?;
            total += sum;
            grads.add_scaled(&g, 1.0);
        }
        let loss = total * scale;
        let grad_norm = grads.sum_squares().sqrt();

        if !loss.is_finite() || !grad_norm.is_finite() {
            log::warn!("step {}: non-finite loss {loss} or gradient norm {grad_norm}, update skipped", step + 1);
            self.skipped += 1;
            return Ok(StepReport { step, loss, lr, grad_norm, clipped_norm: 0.0, skipped: true });
        }

        if grad_norm > self.cfg.grad_clip {
            let clip = self.cfg.grad_clip / grad_norm;
            for t in grads.tensors_mut() {
                for x in t.data.iter_mut() {
                    *x *= clip as f32;
                }
            }
        }
        let clipped_norm = grads.sum_squares().sqrt();

        let h = AdamStep {
            lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.adam_eps,
            weight_decay: self.cfg.weight_decay,
            t: step + 1,
        };
        let st = &mut self.state;
        let params = st.model.params_mut().tensors_mut();
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads.tensors())
            .zip(st.m.tensors_mut())
            .zip(st.v.tensors_mut())
        {
            let decay = p.shape.len() == 2;
            adam_update(&mut p.data, &g.data, &mut m.data, &mut v.data, h, decay);
        }
        if let (Some(ema), Some(d)) = (st.ema.as_mut(), self.cfg.ema_decay) {
            update_ema(ema, st.model.params(), d as f32);
        }
        st.step += 1;
        self.last_train_loss = Some(loss);
        Ok(StepReport { step: st.step, loss, lr, grad_norm, clipped_norm, skipped: false })
    }

    fn record(&mut self, row: MetricRow) -> Result<()> {
        if let Some(f) = self.metrics_file.as_mut() {
            writeln!(f, "{}", row.csv())?;
        }
        self.metrics.push(row);
        Ok(())
    }

    fn wall_ms(&self) -> u64 {
        if self.cfg.log_wall_time {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    fn is_eval_step(&self, step: u64) -> bool {
        if step == self.total_steps {
            return true;
        }
        if self.cfg.epochs > 0 {
            step % self.steps_per_epoch() == 0
        } else {
            self.cfg.eval_every > 0 && step % self.cfg.eval_every == 0
        }
    }

    /// Validation loss of the current weights (and EMA weights), logged and checkpointed.
    pub fn validate(&mut self) -> Result<Option<f64>> {
        let Some(val) = self.validation else {
            return Ok(None);
        };
        if val.is_empty() {
            return Ok(None);
        }
        if !self.state.model.params().is_finite() {
            return Err(LabError::NonFinite(format!("parameters at step {}", self.state.step)));
        }
        let step = self.state.step;
        let lr = lr_at(step, self.total_steps, &self.cfg);
        let objective = self.objective.objective.name();
        let raw = evaluate(&self.state.model, val, &self.objective, &self.vocab, self.cfg.seed, self.cfg.eval_sequences)?;
        self.record(MetricRow { step, split: "validation", objective, loss: raw, lr, wall_ms: self.wall_ms() })?;
        let mut score = raw;
        if self.state.ema.is_some() {
            let ema = self.state.eval_model();
            let loss = evaluate(&ema, val, &self.objective, &self.vocab, self.cfg.seed, self.cfg.eval_sequences)?;
            self.record(MetricRow { step, split: "validation_ema", objective, loss, lr, wall_ms: self.wall_ms() })?;
            score = loss;
        }
        self.last_validation = Some(score);
        if self.best_validation.is_none_or(|b| score < b) {
            self.best_validation = Some(score);
            if let Some(out) = &self.output {
                self.state.to_checkpoint(&out.config_blob).save(&out.best_checkpoint())?;
            }
        }
        Ok(Some(score))
    }

    /// Train until `target` steps are complete (or the configured total).
    pub fn run_until(&mut self, target: u64) -> Result<()> {
        let target = target.min(self.total_steps);
        while self.state.step < target {
            let report = self.step()?;
            let step = self.state.step;
            if !report.skipped && (step % self.cfg.log_every == 0 || step == self.total_steps) {
                let row = MetricRow {
                    step,
                    split: "train",
                    objective: self.objective.objective.name(),
                    loss: report.loss,
                    lr: report.lr,
                    wall_ms: self.wall_ms(),
                };
                self.record(row)?;
                log::info!("step {step}/{} loss {:.4} lr {:.2e}", self.total_steps, report.loss, report.lr);
            }
            if self.is_eval_step(step) {
                self.validate()?;
            }
        }
        Ok(())
    }

    /// Run to completion and write the final checkpoint.
    pub fn run(&mut self) -> Result<TrainSummary> {
        if self.state.step == 0 && self.total_steps == 0 {
            self.validate()?;
        }
        self.run_until(self.total_steps)?;
        if let Some(out) = &self.output {
            self.state.to_checkpoint(&out.config_blob).save(&out.final_checkpoint())?;
            if self.best_validation.is_none() {
                self.state.to_checkpoint(&out.config_blob).save(&out.best_checkpoint())?;
            }
        }
        if let Some(f) = self.metrics_file.as_mut() {
            f.flush()?;
        }
        Ok(TrainSummary {
            steps: self.state.step,
            final_train_loss: self.last_train_loss,
            final_validation: self.last_validation,
            best_validation: self.best_validation,
            skipped_steps: self.skipped,
        })
    }
}

fn update_ema(ema: &mut ModelParams<f32>, params: &ModelParams<f32>, d: f32) {
    for (e, p) in ema.tensors_mut().into_iter().zip(params.tensors()) {
        for (x, &y) in e.data.iter_mut().zip(&p.data) {
            *x = d * *x + (1.0 - d) * y;
        }
    }
}

/// Validation loss. Causal objectives report clean next-token cross-entropy
/// per token; MDLM and BD3LM report their own objective under fixed noise draws.
pub fn evaluate(
    model: &Model<f32>,
    data: &Dataset,
    objective: &ObjectiveConfig,
    vocab: &Vocab,
    seed: u64,
    max_sequences: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("validation set is empty"));
    }
    let n = if max_sequences == 0 { data.len() } else { data.len().min(max_sequences) };
    let indices: Vec<usize> = (0..n).collect();
    let parts: Vec<Result<(f64, f64)>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sum = 0.0;
            let mut denom = 0.0;
            for &i in chunk {
                let (x, valid) = (data.get(i).ids(), data.valid_len(i));
                let examples = if objective.objective.is_causal() {
                    vec![build_arm(x, valid, vocab)?]
                } else {
                    let mut rng = stream(seed, Purpose::Validation, i as u64, 0);
                    objective.build(x, valid, vocab, &mut rng)?
                };
                let norm = if objective.objective.is_causal() { Default::default() } else { objective.loss_norm };
                denom += normalizer(&examples, 1, norm)?;
                for ex in &examples {
                    sum += example_loss_sum(model, ex)?;
                }
            }
            Ok((sum, denom))
        })
        .collect();
    let mut sum = 0.0;
    let mut denom = 0.0;
    for part in parts {
        let (s, d) = part?;
        sum += s;
        denom += d;
    }
    Ok(sum / denom)
}

/// Convenience wrapper: train a fresh or resumed state to completion.
pub fn train(
    cfg: &TrainConfig,
    objective: &ObjectiveConfig,
    vocab: &Vocab,
    train: &Dataset,
    validation: Option<&Dataset>,
    state: TrainState,
    output: Option<RunOutput>,
) -> Result<(TrainState, TrainSummary, Vec<MetricRow>)> {
    let mut trainer = Trainer::new(cfg.clone(), objective.clone(), *vocab, train, validation, state)?;
    if let Some(out) = output {
        trainer = trainer.with_output(out)?;
    }
    let summary = trainer.run()?;
    let metrics = trainer.metrics().to_vec();
    Ok((trainer.into_state(), summary, metrics))
}

/// One row of the training-cost comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub objective: Objective,
    pub ms_per_step: f64,
    pub forwards_per_sequence: usize,
    /// Step time relative to ARM.
    pub time_ratio: f64,
    /// Forward passes per sequence relative to ARM.
    pub forward_ratio: f64,
}

/// Median optimizer-step wall time per objective on identical model shapes.
/// Objectives are timed in interleaved rounds to spread out machine noise.
pub fn bench_step_cost(
    model_cfg: &ModelConfig,
    base: &ObjectiveConfig,
    train_cfg: &TrainConfig,
    objectives: &[Objective],
    vocab: &Vocab,
    data: &Dataset,
    rounds: usize,
) -> Result<Vec<CostRow>> {
    let mut trainers = Vec::new();
    for &objective in objectives {
        let obj = ObjectiveConfig { objective, ..base.clone() };
        let mcfg = ModelConfig { attn_mode: objective.attn_mode(obj.block_size), ..model_cfg.clone() };
        let model = Model::init(mcfg, train_cfg.seed)?;
        let cfg = TrainConfig { steps: u64::MAX / 2, warmup_steps: 0, eval_every: 0, ..train_cfg.clone() };
        let mut t = Trainer::new(cfg, obj, *vocab, data, None, TrainState::new(model, false))?;
        t.step()?;
        trainers.push(t);
    }
    let mut times = vec![Vec::with_capacity(rounds); objectives.len()];
    for _ in 0..rounds.max(1) {
        for (t, out) in trainers.iter_mut().zip(times.iter_mut()) {
            let start = Instant::now();
            t.step()?;
            out.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let medians: Vec<f64> = times
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    let reference = objectives.iter().position(|&o| o == Objective::Arm).unwrap_or(0);
    let base_ms = medians[reference];
    let base_fw = objectives[reference].forwards_per_sequence(data.seq_len(), base.block_size) as f64;
    Ok(objectives
        .iter()
        .zip(medians)
        .map(|(&objective, ms)| {
            let fw = objective.forwards_per_sequence(data.seq_len(), base.block_size);
            CostRow {
                objective,
                ms_per_step: ms,
                forwards_per_sequence: fw,
                time_ratio: ms / base_ms,
                forward_ratio: fw as f64 / base_fw,
            }
        })
        .collect())
}

/// Load a full training state from a checkpoint file.
pub fn load_state(path: &Path, cfg: &ModelConfig) -> Result<TrainState> {
    TrainState::from_checkpoint(&Checkpoint::load(path)?, cfg)
}
