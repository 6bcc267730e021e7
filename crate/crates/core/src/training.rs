//! Stage loops, optimizer and learning-rate schedule.
//!
//! Stages: `lm` pretrains the predictor on captions whose visual slots hold
//! patch words, `align` trains the projectors and the latent token against
//! a frozen predictor, `sft` trains the predictor and the input projector
//! on unmasked images.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attnmask::{build_mask, AttnVariant};
use crate::data::{DataConfig, Fixture};
use crate::masking::{sample_mask, MaskSpec, SamplerConfig};
use crate::model::{write_checkpoint, Bound, Model, ModelConfig, ParamGroup};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::objective::{combine, jepa_loss, lambda_gate, ntp_loss, LossConfig, LossReport};
use crate::rng::{rng_for, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Lm,
    Align,
    Sft,
}

impl Stage {
    pub fn default_lr(self) -> f64 {
        match self {
            Stage::Lm => 3e-3,
            Stage::Align => 1e-3,
            Stage::Sft => 2e-5,
        }
    }
}

/// Which parameter groups a stage updates. The visual encoders are not
/// parameters at all, so no stage can reach them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRegistry {
    pub stage: Stage,
}

impl ParamRegistry {
    pub fn trainable(&self, group: ParamGroup) -> bool {
        match self.stage {
            Stage::Lm => group == ParamGroup::Predictor,
            Stage::Align => matches!(group, ParamGroup::Proj | ParamGroup::ProjTgt | ParamGroup::Latent),
            Stage::Sft => matches!(group, ParamGroup::Predictor | ParamGroup::Proj),
        }
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|&g| self.trainable(g)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// `None` picks the stage default.
    pub lr: Option<f64>,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Align,
            lr: None,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            epochs: 1,
            batch_size: 8,
            seed: 0,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.stage.default_lr())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr() > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive");
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_ratio * total_steps as f64).ceil() as usize
    }
}

/// Linear warmup to `lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let lr = cfg.lr();
    let warm = cfg.warmup_steps(total_steps);
    if step < warm {
        return lr * step as f64 / warm as f64;
    }
    if total_steps <= warm {
        return lr;
    }
    let progress = ((step - warm) as f64 / (total_steps - warm) as f64).min(1.0);
    lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay; state only for trainable parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    t: i32,
}

impl AdamW {
    pub fn new(model: &Model, registry: ParamRegistry) -> Self {
        let moments = model
            .store()
            .iter()
            .map(|p| registry.trainable(p.group).then(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()])))
            .collect();
        Self { moments, t: 0 }
    }

    /// One update; `grads[i]` is `None` when parameter `i` got no gradient.
    pub fn update(&mut self, model: &mut Model, grads: &[Option<Tensor>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for ((p, state), grad) in model.store_mut().iter_mut().zip(&mut self.moments).zip(grads) {
            let Some((m, v)) = state else { continue };
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let gi = grad.as_ref().map_or(0.0, |g| g.data()[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
                values[i] -= lr * (step + cfg.weight_decay * values[i]);
            }
        }
    }
}

/// Everything one training run needs besides the data and initial weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub attn: AttnVariant,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.predictor.validate()?;
        self.sampler.validate()?;
        self.loss.validate()
    }
}

/// A run plus the data it trains on; the JSON shape of `train --config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainJob {
    #[serde(flatten)]
    pub run: RunConfig,
    pub data: DataConfig,
}

/// JSON-lines record written once per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub ntp: f64,
    pub jepa: Option<f64>,
    pub total: f64,
    pub skipped: bool,
}

impl LogRecord {
    pub fn new(step: usize, r: &LossReport) -> Self {
        Self {
            step,
            ntp: r.ntp,
            jepa: r.jepa,
            total: r.total,
            skipped: r.skipped,
        }
    }
}

/// How a sample is laid out for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Layout<'a> {
    /// Context blocks plus latent target tokens.
    Masked(&'a MaskSpec),
    /// Every patch projected; no target tokens.
    Unmasked,
    /// Patch words in the visual slots, optionally only for some patches.
    Words(&'a [usize], Option<&'a [usize]>),
}

/// Graph nodes for one sample's losses.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub ntp: Var,
    pub jepa: Option<Var>,
    pub n_targets: usize,
}

/// Builds the forward pass and losses for one sample on `g`.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    g: &mut Graph,
    model: &Model,
    bound: &Bound,
    layout: Layout<'_>,
    ctx_emb: &Tensor,
    tgt_emb: Option<&Tensor>,
    caption: &[usize],
    run: &RunConfig,
) -> Result<SampleLoss> {
    let seq = match layout {
        Layout::Masked(m) => model.pack(g, bound, Some(m), ctx_emb, caption)?,
        Layout::Unmasked => model.pack(g, bound, None, ctx_emb, caption)?,
        Layout::Words(w, keep) => model.pack_words(g, bound, w, keep, caption)?,
    };
    let mask = build_mask(&seq.roles, run.attn)?;
    let out = model.forward(g, bound, &seq, &mask)?;
    let ntp = ntp_loss(g, out.logits, seq.text_start(), caption)?;
    if !matches!(layout, Layout::Masked(_)) {
        return Ok(SampleLoss {
            ntp,
            jepa: None,
            n_targets: 0,
        });
    }
    let positions = seq.target_positions();
    if positions.is_empty() {
        return Err(Error::NoTargets);
    }
    let tgt_emb = tgt_emb.ok_or_else(|| Error::Config("masked step without target embeddings".into()))?;
    let pred = model.project_tap(g, bound, out.tap, &seq, &positions)?;
    let tgt = g.constant(tgt_emb.select_rows(&seq.target_patches()))?;
    let jepa = jepa_loss(g, pred, tgt, run.loss.distance)?;
    Ok(SampleLoss {
        ntp,
        jepa: Some(jepa),
        n_targets: positions.len(),
    })
}

pub(crate) fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var, NumericsError> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}

fn numeric_failure(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerics(n) => Error::NonFiniteLoss {
            step,
            detail: n.to_string(),
        },
        other => other,
    }
}

/// One stage over one dataset, holding the model and optimizer state.
pub struct Trainer<'d> {
    run: RunConfig,
    model: Model,
    data: &'d Fixture,
    registry: ParamRegistry,
    opt: AdamW,
    step: usize,
    total_steps: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(run: RunConfig, model: Model, data: &'d Fixture) -> Result<Self> {
        run.validate()?;
        if model.config() != &run.model {
            return Err(Error::CheckpointMismatch("model was built from a different config".into()));
        }
        let grid = run.model.grid;
        if data.samples.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        if let Some(s) = data.samples.iter().find(|s| s.grid != grid) {
            return Err(Error::Config(format!("sample {} is on a different grid", s.index)));
        }
        if data.context_encoder.out_dim() != run.model.ctx_dim {
            return Err(Error::Config("context encoder width differs from ctx_dim".into()));
        }
        let registry = ParamRegistry { stage: run.train.stage };
        if run.train.stage == Stage::Align && model.latent().is_some() && data.target_encoder.out_dim() != run.model.tgt_dim {
            return Err(Error::Config("target encoder width differs from tgt_dim".into()));
        }
        let per_epoch = data.samples.len().div_ceil(run.train.batch_size);
        Ok(Self {
            opt: AdamW::new(&model, registry),
            total_steps: per_epoch * run.train.epochs,
            run,
            model,
            data,
            registry,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Sample positions for each batch of `epoch`, shuffled from the run seed.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.samples.len()).collect();
        order.shuffle(&mut rng_for(self.run.train.seed, Stream::Shuffle, epoch as u64));
        order.chunks(self.run.train.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Forward, backward and one optimizer update on the given samples.
    pub fn step(&mut self, batch: &[usize], epoch: usize) -> Result<LossReport> {
        let step = self.step;
        let report = self.step_inner(batch, epoch).map_err(numeric_failure(step))?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("total loss {}", report.total),
            });
        }
        self.step += 1;
        Ok(report)
    }

    fn step_inner(&mut self, batch: &[usize], epoch: usize) -> Result<LossReport> {
        let run = &self.run;
        let stage = run.train.stage;
        let gated = stage == Stage::Lm || (stage == Stage::Align && self.model.latent().is_some());
        // The gate is drawn only when masking is possible, from its own stream.
        let skipped = gated && lambda_gate(&run.loss, &mut rng_for(run.train.seed, Stream::Gate, self.step as u64));
        let masked = gated && !skipped;

        let mut g = Graph::new();
        let registry = self.registry;
        let bound = self.model.bind(&mut g, |grp| registry.trainable(grp))?;
        let mut ntps = Vec::with_capacity(batch.len());
        let mut jepas = Vec::with_capacity(batch.len());
        let mut n_targets = 0;
        for &pos in batch {
            let s = &self.data.samples[pos];
            let key = (epoch * self.data.samples.len() + s.index) as u64;
            let words;
            let mut tgt = None;
            let spec = match masked {
                true => Some(sample_mask(run.model.grid, &run.sampler, &mut rng_for(run.train.seed, Stream::Mask, key))?),
                false => None,
            };
            let layout = if stage == Stage::Lm {
                words = s.scene.patch_words();
                Layout::Words(&words, spec.as_ref().map(|m| m.context.as_slice()))
            } else if let Some(m) = &spec {
                tgt = Some(self.data.target_encoder.encode(s.index, &s.pixels)?);
                Layout::Masked(m)
            } else {
                Layout::Unmasked
            };
            let ctx = self.data.context_encoder.encode(s.index, &s.pixels)?;
            let l = sample_loss(&mut g, &self.model, &bound, layout, &ctx, tgt.as_ref(), &s.caption, run)?;
            ntps.push(l.ntp);
            if let Some(j) = l.jepa {
                jepas.push(j);
            }
            n_targets += l.n_targets;
        }
        let ntp = mean_of(&mut g, &ntps)?;
        let jepa = if jepas.is_empty() { None } else { Some(mean_of(&mut g, &jepas)?) };
        let (total, report) = combine(&mut g, ntp, jepa, n_targets, &run.loss)?;
        g.backward(total)?;

        let grads: Vec<Option<Tensor>> = bound.vars().iter().map(|&v| g.grad(v).cloned()).collect();
        // Update t uses the rate at t + 1, so the first update is not wasted at zero.
        let lr = lr_at(self.step + 1, self.total_steps, &run.train);
        self.opt.update(&mut self.model, &grads, lr, &run.train);
        Ok(report)
    }

    /// Runs every epoch, writing one log line per step to `log`.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<Vec<LossReport>> {
        let mut reports = Vec::with_capacity(self.total_steps);
        for epoch in 0..self.run.train.epochs {
            for batch in self.epoch_batches(epoch) {
                let r = self.step(&batch, epoch)?;
                serde_json::to_writer(&mut *log, &LogRecord::new(self.step - 1, &r))?;
                log.write_all(b"\n")?;
                reports.push(r);
            }
        }
        log.flush()?;
        Ok(reports)
    }
}

/// Mean losses of a model on a dataset, without any update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Caption loss with every patch visible.
    pub ntp_unmasked: f64,
    /// Caption loss under the sampled masks.
    pub ntp_masked: f64,
    /// Latent prediction loss under the same masks.
    pub jepa: f64,
}

/// Evaluates every sample once; masks come from `seed`, one per sample index.
pub fn evaluate(model: &Model, run: &RunConfig, data: &Fixture, seed: u64) -> Result<Evaluation> {
    let n = data.samples.len() as f64;
    let mut e = Evaluation {
        ntp_unmasked: 0.0,
        ntp_masked: 0.0,
        jepa: 0.0,
    };
    for s in &data.samples {
        let ctx = data.context_encoder.encode(s.index, &s.pixels)?;
        let tgt = data.target_encoder.encode(s.index, &s.pixels)?;
        let spec = sample_mask(run.model.grid, &run.sampler, &mut rng_for(seed, Stream::Mask, s.index as u64))?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, |_| false)?;
        let plain = sample_loss(&mut g, model, &bound, Layout::Unmasked, &ctx, None, &s.caption, run)?;
        let masked = sample_loss(&mut g, model, &bound, Layout::Masked(&spec), &ctx, Some(&tgt), &s.caption, run)?;
        e.ntp_unmasked += g.value(plain.ntp).item() / n;
        e.ntp_masked += g.value(masked.ntp).item() / n;
        e.jepa += masked.jepa.map_or(0.0, |j| g.value(j).item()) / n;
    }
    Ok(e)
}

/// Runs a stage and writes `log.jsonl` and `model.ckpt` into `out_dir`.
pub fn run_stage(run: &RunConfig, model: Model, data: &Fixture, out_dir: &Path) -> Result<(Model, Vec<LossReport>)> {
    fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(run.clone(), model, data)?;
    let mut log = BufWriter::new(File::create(out_dir.join("log.jsonl"))?);
    let reports = trainer.run(&mut log)?;
    let steps = trainer.steps_done();
    let model = trainer.into_model();
    write_checkpoint(&out_dir.join("model.ckpt"), &model, steps)?;
    Ok((model, reports))
}
