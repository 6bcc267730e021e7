//! Self-checks behind the `gradcheck` and `verify` commands.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attnmask::{build_mask, build_mask_tampered, oracle_mask, AttnVariant, TokenRole};
use crate::data::{learnability_fixture, Fixture, FixtureConfig};
use crate::encoders::{EmbeddingFile, StubConfig};
use crate::masking::{block_dims, block_indices, sample_mask, MaskError, MaskSpec, PatchGrid, SamplerConfig};
use crate::model::{Bound, Checkpoint, Model, ModelConfig, PredictorConfig, ProjectorKind};
use crate::numerics::{fd_check, GradFault, Graph, NumericsError, Tensor, Var, DEFAULT_FD_EPS};
use crate::objective::{combine, Distance, LossConfig};
use crate::rng::{rng_for, Stream};
use crate::training::{mean_of, sample_loss, Layout, ParamRegistry, RunConfig, Stage, TrainConfig, Trainer};
use crate::{Error, Result};

/// Pass threshold on the maximum relative gradient error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Small model used by the self-checks: d=16, two layers, tap after the first.
pub fn tiny_model_config(grid: PatchGrid, enc_dim: usize) -> ModelConfig {
    ModelConfig {
        predictor: PredictorConfig {
            d: 16,
            layers: 2,
            heads: 2,
            vocab: 16,
            max_seq: 64,
            tap_layer: Some(1),
        },
        ctx_dim: enc_dim,
        tgt_dim: enc_dim,
        grid,
        ..ModelConfig::default()
    }
}

/// Fixture whose stub encoders emit `enc_dim`-wide embeddings.
pub fn tiny_fixture(seed: u64, n: usize, grid: PatchGrid, enc_dim: usize) -> Result<Fixture> {
    let stub = |seed| StubConfig {
        seed,
        out_dim: enc_dim,
        ..StubConfig::default()
    };
    crate::data::fixture(
        seed,
        n,
        grid,
        &FixtureConfig {
            context: stub(11),
            target: stub(12),
            constant_colour: false,
        },
    )
}

/// Adds N(0, std²) noise to every parameter, so that no layer is inert.
pub fn perturb_parameters(model: &mut Model, seed: u64, std: f64) {
    let mut rng = rng_for(seed, Stream::Init, 1000);
    let noise = Normal::new(0.0, std).expect("finite std");
    for p in model.store_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub enc_dim: usize,
    pub batch: usize,
    pub seed: u64,
    pub eps: f64,
    pub distances: Vec<Distance>,
    /// Scale of the noise added to the initial weights.
    pub weight_noise: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let grid = PatchGrid { rows: 4, cols: 4 };
        Self {
            model: tiny_model_config(grid, 8),
            enc_dim: 8,
            batch: 2,
            seed: 0,
            eps: DEFAULT_FD_EPS,
            distances: vec![Distance::Cosine, Distance::SmoothL1],
            weight_noise: 0.3,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.model.predictor;
        if p.d > 16 || p.layers > 2 {
            return Err(Error::Config("gradcheck needs a tiny model (d <= 16, layers <= 2)".into()));
        }
        if !self.model.jepa {
            return Err(Error::Config("gradcheck needs the latent prediction parts".into()));
        }
        if self.batch == 0 || self.distances.is_empty() {
            return Err(Error::Config("gradcheck needs a batch and at least one distance".into()));
        }
        if self.model.ctx_dim != self.enc_dim || self.model.tgt_dim != self.enc_dim {
            return Err(Error::Config("enc_dim must equal ctx_dim and tgt_dim".into()));
        }
        p.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub distance: Distance,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coordinates: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.cases.iter().all(|c| c.pass)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

fn as_numerics(e: Error) -> NumericsError {
    match e {
        Error::Numerics(n) => n,
        other => NumericsError::ShapeMismatch {
            op: "gradcheck",
            detail: other.to_string(),
        },
    }
}

/// Central-difference check of NTP + JEPA over every align-stage parameter,
/// one masked batch, once per distance. `fault` corrupts a backward rule.
pub fn gradcheck(cfg: &GradcheckConfig, fault: Option<GradFault>) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone())?;
    perturb_parameters(&mut model, cfg.seed, cfg.weight_noise);
    let data = tiny_fixture(cfg.seed, cfg.batch, cfg.model.grid, cfg.enc_dim)?;
    let sampler = SamplerConfig::default();
    let mut items = Vec::with_capacity(cfg.batch);
    for s in &data.samples {
        let spec = sample_mask(cfg.model.grid, &sampler, &mut rng_for(cfg.seed, Stream::Mask, s.index as u64))?;
        let ctx = data.context_encoder.encode(s.index, &s.pixels)?;
        let tgt = data.target_encoder.encode(s.index, &s.pixels)?;
        items.push((spec, ctx, tgt, s.caption.clone()));
    }

    let registry = ParamRegistry { stage: Stage::Align };
    let trainable: Vec<usize> = (0..model.store().len())
        .filter(|&i| registry.trainable(model.store().iter().nth(i).expect("index").group))
        .collect();
    let params: Vec<Tensor> = trainable
        .iter()
        .map(|&i| model.store().iter().nth(i).expect("index").value.clone())
        .collect();

    let mut cases = Vec::new();
    for &distance in &cfg.distances {
        let run = RunConfig {
            model: cfg.model.clone(),
            loss: LossConfig {
                distance,
                ..LossConfig::default()
            },
            ..RunConfig::default()
        };
        let objective = |g: &mut Graph, vars: &[Var]| -> Result<Var, NumericsError> {
            g.inject_fault(fault);
            let mut given = vars.iter();
            let mut all = Vec::with_capacity(model.store().len());
            for p in model.store().iter() {
                all.push(match registry.trainable(p.group) {
                    true => *given.next().expect("one var per trainable parameter"),
                    false => g.constant(p.value.clone())?,
                });
            }
            let bound = Bound::from_vars(all);
            let mut ntps = Vec::new();
            let mut jepas = Vec::new();
            let mut n = 0;
            for (spec, ctx, tgt, caption) in &items {
                let l = sample_loss(g, &model, &bound, Layout::Masked(spec), ctx, Some(tgt), caption, &run)
                    .map_err(as_numerics)?;
                ntps.push(l.ntp);
                jepas.extend(l.jepa);
                n += l.n_targets;
            }
            let ntp = mean_of(g, &ntps)?;
            let jepa = mean_of(g, &jepas)?;
            Ok(combine(g, ntp, Some(jepa), n, &run.loss).map_err(as_numerics)?.0)
        };
        let report = fd_check(objective, &params, cfg.eps)?;
        let worst = trainable[report.worst.0];
        cases.push(GradcheckCase {
            distance,
            max_rel_error: report.max_rel_error,
            worst_param: model.store().iter().nth(worst).expect("index").name.clone(),
            coordinates: report.coordinates,
            pass: report.max_rel_error < GRADCHECK_TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        cases,
    })
}

/// Individually selectable invariant checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Fast mask builder against the cell-by-cell oracle.
    MaskOracle,
    /// Sampler disjointness and block geometry.
    Sampler,
    /// Captions never reach visual activations.
    Leakage,
    /// λ = 1 reproduces the run without latent prediction.
    Lambda,
    /// Checkpoint and embedding-file round trips.
    Checkpoint,
}

impl CheckKind {
    pub const ALL: [CheckKind; 5] = [
        CheckKind::MaskOracle,
        CheckKind::Sampler,
        CheckKind::Leakage,
        CheckKind::Lambda,
        CheckKind::Checkpoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::MaskOracle => "mask_oracle",
            CheckKind::Sampler => "sampler",
            CheckKind::Leakage => "leakage",
            CheckKind::Lambda => "lambda",
            CheckKind::Checkpoint => "checkpoint",
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Names accepted by `--checks`: a check name, or `mask` for both masking checks.
pub fn parse_check_filter(s: &str) -> Result<Vec<CheckKind>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let kinds: &[CheckKind] = match part {
            "all" => &CheckKind::ALL,
            "mask" => &[CheckKind::MaskOracle, CheckKind::Sampler],
            _ => match CheckKind::ALL.iter().find(|k| k.name() == part) {
                Some(k) => std::slice::from_ref(k),
                None => return Err(Error::Config(format!("unknown check {part:?}"))),
            },
        };
        for k in kinds {
            if !out.contains(k) {
                out.push(*k);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no checks selected".into()));
    }
    Ok(out)
}

impl FromStr for CheckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown check {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub mask_configs: usize,
    pub sampler_draws: usize,
    pub leakage_trials: usize,
    pub lambda_steps: usize,
    /// Negative control: build attention masks with the tampered builder.
    pub tamper_mask: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mask_configs: 200,
            sampler_draws: 10_000,
            leakage_trials: 50,
            lambda_steps: 50,
            tamper_mask: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: CheckKind,
    pub pass: bool,
    pub detail: String,
}

fn outcome(check: CheckKind, failure: Option<String>, ok: String) -> CheckResult {
    match failure {
        Some(detail) => CheckResult {
            check,
            pass: false,
            detail,
        },
        None => CheckResult {
            check,
            pass: true,
            detail: ok,
        },
    }
}

/// Role list for a packed sequence: context, targets in raster order, caption.
pub fn roles_for(spec: &MaskSpec, caption_len: usize) -> Vec<TokenRole> {
    let mut roles: Vec<TokenRole> = spec.context.iter().map(|&p| TokenRole::Context { patch: p }).collect();
    roles.extend(spec.target_union.iter().map(|&p| TokenRole::target(p, spec.membership(p))));
    roles.extend((0..caption_len).map(|position| TokenRole::Text { position }));
    roles
}

/// Builder against oracle on random grids up to 6×6, k ≤ 4, captions ≤ 8,
/// cycling through every attention variant.
pub fn check_mask_oracle(seed: u64, configs: usize, tamper: bool) -> Result<CheckResult> {
    let builder = if tamper { build_mask_tampered } else { build_mask };
    let variants = AttnVariant::all();
    let mut rng = rng_for(seed, Stream::Mask, u64::MAX);
    let mut failure = None;
    for i in 0..configs {
        // Small grids cannot always hold k disjoint targets; draw again.
        let (grid, spec) = loop {
            let grid = PatchGrid::new(rng.random_range(2..=6), rng.random_range(2..=6))?;
            let sampler = SamplerConfig {
                k: rng.random_range(1..=4),
                allow_overlap: rng.random_bool(0.5),
                ..SamplerConfig::default()
            };
            match sample_mask(grid, &sampler, &mut rng) {
                Ok(spec) => break (grid, spec),
                Err(MaskError::ResampleExhausted { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        };
        let roles = roles_for(&spec, rng.random_range(0..=8));
        let v = variants[i % variants.len()];
        if builder(&roles, v)? != oracle_mask(&roles, v)? {
            failure = Some(format!("configuration {i} ({}x{} grid, {v:?}) differs from the oracle", grid.rows, grid.cols));
            break;
        }
    }
    Ok(outcome(CheckKind::MaskOracle, failure, format!("{configs} configurations match the oracle")))
}

/// Every way a drawn mask can break the sampler contract, or `None`.
pub fn mask_contract_violation(spec: &MaskSpec, allow_overlap: bool) -> Option<String> {
    let grid = spec.grid;
    for (j, b) in spec.target_blocks.iter().enumerate() {
        if (b.block.height, b.block.width) != block_dims(grid, b.scale, b.aspect) {
            return Some(format!("target block {j} does not follow the rounding rule"));
        }
        if block_indices(&b.block, grid) != spec.targets[j] {
            return Some(format!("target {j} indices disagree with its block"));
        }
    }
    let c = &spec.context_block;
    if (c.block.height, c.block.width) != block_dims(grid, c.scale, c.aspect) {
        return Some("context block does not follow the rounding rule".into());
    }
    if spec.context.iter().any(|p| spec.target_union.binary_search(p).is_ok()) {
        return Some("context overlaps targets".into());
    }
    let expected: Vec<usize> = block_indices(&c.block, grid)
        .into_iter()
        .filter(|p| spec.target_union.binary_search(p).is_err())
        .collect();
    if expected != spec.context {
        return Some("context is not its block minus the targets".into());
    }
    if !allow_overlap {
        for a in 0..spec.targets.len() {
            for b in a + 1..spec.targets.len() {
                if spec.targets[a].iter().any(|p| spec.targets[b].binary_search(p).is_ok()) {
                    return Some(format!("targets {a} and {b} overlap"));
                }
            }
        }
    }
    None
}

/// `draws` masks on a 24×24 grid with default scales, half with overlap
/// forbidden.
pub fn check_sampler(seed: u64, draws: usize) -> Result<CheckResult> {
    let grid = PatchGrid::new(24, 24)?;
    let mut failure = None;
    let mut overlapping = 0usize;
    for i in 0..draws {
        let allow_overlap = i % 2 == 0;
        let cfg = SamplerConfig {
            allow_overlap,
            ..SamplerConfig::default()
        };
        let spec = sample_mask(grid, &cfg, &mut rng_for(seed, Stream::Mask, i as u64))?;
        if let Some(v) = mask_contract_violation(&spec, allow_overlap) {
            failure = Some(format!("draw {i}: {v}"));
            break;
        }
        let total: usize = spec.targets.iter().map(Vec::len).sum();
        overlapping += usize::from(total > spec.target_union.len());
    }
    Ok(outcome(
        CheckKind::Sampler,
        failure,
        format!("{draws} draws satisfy the contract; {overlapping} had overlapping targets"),
    ))
}

/// Whether swapping the caption for random tokens moves any visual tap row.
pub fn caption_changes_visual_taps(model: &Model, spec: &MaskSpec, ctx: &Tensor, caption: &[usize], other: &[usize], tamper: bool) -> Result<bool> {
    let builder = if tamper { build_mask_tampered } else { build_mask };
    let run_with = |caption: &[usize]| -> Result<Vec<u64>> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, |_| false)?;
        let seq = model.pack(&mut g, &bound, Some(spec), ctx, caption)?;
        let mask = builder(&seq.roles, AttnVariant::default())?;
        let out = model.forward(&mut g, &bound, &seq, &mask)?;
        let tap = g.value(out.tap);
        Ok((0..seq.text_start()).flat_map(|r| tap.row(r).iter().map(|v| v.to_bits())).collect())
    };
    Ok(run_with(caption)? != run_with(other)?)
}

/// Random tiny predictors: random captions must leave visual taps bit-identical.
pub fn check_leakage(seed: u64, trials: usize, tamper: bool) -> Result<CheckResult> {
    let grid = PatchGrid::new(4, 4)?;
    let cfg = tiny_model_config(grid, 8);
    let data = tiny_fixture(seed, trials, grid, 8)?;
    let mut failure = None;
    for (t, s) in data.samples.iter().enumerate() {
        let mut model = Model::new(ModelConfig {
            init_seed: seed.wrapping_add(t as u64),
            ..cfg.clone()
        })?;
        perturb_parameters(&mut model, seed.wrapping_add(t as u64), 0.5);
        let mut rng = rng_for(seed, Stream::Caption, t as u64);
        let other: Vec<usize> = (0..s.caption.len()).map(|_| rng.random_range(0..cfg.predictor.vocab)).collect();
        let spec = sample_mask(grid, &SamplerConfig::default(), &mut rng)?;
        let ctx = data.context_encoder.encode(s.index, &s.pixels)?;
        if caption_changes_visual_taps(&model, &spec, &ctx, &s.caption, &other, tamper)? {
            failure = Some(format!("trial {t}: a caption change reached a visual tap"));
            break;
        }
    }
    Ok(outcome(CheckKind::Leakage, failure, format!("{trials} random predictors leak nothing")))
}

/// NTP traces of a λ=1 align run and of a run with no latent-prediction parts.
pub fn lambda_one_traces(seed: u64, steps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = PatchGrid::new(4, 4)?;
    let batch = 8;
    let data = tiny_fixture(seed, steps * batch, grid, 8)?;
    let trace = |jepa: bool| -> Result<Vec<f64>> {
        let mut model_cfg = tiny_model_config(grid, 8);
        model_cfg.jepa = jepa;
        let run = RunConfig {
            train: TrainConfig {
                stage: Stage::Align,
                batch_size: batch,
                seed,
                ..TrainConfig::default()
            },
            model: model_cfg.clone(),
            loss: LossConfig {
                lambda: 1.0,
                ..LossConfig::default()
            },
            ..RunConfig::default()
        };
        let mut model = Model::new(model_cfg)?;
        // A non-trivial head so the caption loss depends on the projector.
        perturb_parameters(&mut model, seed, 0.3);
        let mut trainer = Trainer::new(run, model, &data)?;
        Ok(trainer.run(&mut std::io::sink())?.iter().map(|r| r.ntp).collect())
    };
    Ok((trace(true)?, trace(false)?))
}

pub fn check_lambda(seed: u64, steps: usize) -> Result<CheckResult> {
    let (with, without) = lambda_one_traces(seed, steps)?;
    let same = with.len() == without.len() && with.iter().zip(&without).all(|(a, b)| a.to_bits() == b.to_bits());
    let failure = (!same).then(|| {
        let first = with.iter().zip(&without).position(|(a, b)| a.to_bits() != b.to_bits());
        format!("traces diverge at step {first:?}")
    });
    Ok(outcome(CheckKind::Lambda, failure, format!("{} NTP values bit-identical", with.len())))
}

pub fn check_checkpoint(seed: u64) -> Result<CheckResult> {
    let grid = PatchGrid::new(4, 4)?;
    let mut failure = None;
    for (kind, jepa) in [(ProjectorKind::Mlp, true), (ProjectorKind::Linear, true), (ProjectorKind::Mlp, false)] {
        let mut model = Model::new(ModelConfig {
            proj: kind,
            proj_tgt: kind,
            jepa,
            ..tiny_model_config(grid, 8)
        })?;
        perturb_parameters(&mut model, seed, 1.0);
        let back = Checkpoint::from_bytes(&Checkpoint::of(&model, 7).to_bytes()?)?;
        let step = back.header.step;
        let restored = back.into_model()?;
        let bits = |m: &Model| -> Vec<u64> { m.store().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect() };
        if step != 7 || restored.config() != model.config() || bits(&restored) != bits(&model) {
            failure = Some(format!("{kind:?} projector, jepa={jepa}: checkpoint round trip changed the model"));
            break;
        }
    }
    if failure.is_none() {
        let data = learnability_fixture(seed, 3, grid)?;
        let images: Vec<Tensor> = data
            .samples
            .iter()
            .map(|s| data.context_encoder.encode(s.index, &s.pixels))
            .collect::<Result<_, _>>()?;
        let file = EmbeddingFile::from_images(&images)?;
        if EmbeddingFile::from_bytes(&file.to_bytes())? != file {
            failure = Some("embedding file round trip changed the payload".into());
        }
    }
    Ok(outcome(CheckKind::Checkpoint, failure, "checkpoint and embedding file round trips are bit-exact".into()))
}

/// Runs the selected checks in the order given.
pub fn verify(cfg: &VerifyConfig, checks: &[CheckKind]) -> Result<Vec<CheckResult>> {
    checks
        .iter()
        .map(|&c| match c {
            CheckKind::MaskOracle => check_mask_oracle(cfg.seed, cfg.mask_configs, cfg.tamper_mask),
            CheckKind::Sampler => check_sampler(cfg.seed, cfg.sampler_draws),
            CheckKind::Leakage => check_leakage(cfg.seed, cfg.leakage_trials, cfg.tamper_mask),
            CheckKind::Lambda => check_lambda(cfg.seed, cfg.lambda_steps),
            CheckKind::Checkpoint => check_checkpoint(cfg.seed),
        })
        .collect()
}
