//! Latent prediction loss, caption loss and the per-batch skip gate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Negative cosine similarity.
    #[default]
    Cosine,
    SmoothL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub distance: Distance,
    /// Probability of skipping the latent loss for a batch.
    pub lambda: f64,
    pub jepa_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            distance: Distance::Cosine,
            lambda: 0.2,
            jepa_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !self.jepa_weight.is_finite() {
            return Err(Error::Config("jepa_weight must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ntp: f64,
    pub jepa: Option<f64>,
    pub total: f64,
    pub skipped: bool,
    pub n_target_tokens: usize,
}

fn pair(p: &[f64], t: &[f64]) -> Result<(Graph, Var, Var)> {
    if p.len() != t.len() || p.is_empty() {
        return Err(Error::Config(format!("vectors of length {} and {}", p.len(), t.len())));
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![1, p.len()], p.to_vec())?)?;
    let b = g.constant(Tensor::new(vec![1, t.len()], t.to_vec())?)?;
    Ok((g, a, b))
}

/// `−(p·t)/(‖p‖‖t‖)`.
pub fn cosine_distance(p: &[f64], t: &[f64]) -> Result<f64> {
    let (mut g, a, b) = pair(p, t)?;
    let d = g.row_cosine_distance(a, b)?;
    Ok(g.value(d).data()[0])
}

/// Mean over coordinates of the Huber-style loss with its knee at 1.
pub fn smooth_l1(p: &[f64], t: &[f64]) -> Result<f64> {
    let (mut g, a, b) = pair(p, t)?;
    let d = g.row_smooth_l1(a, b)?;
    Ok(g.value(d).data()[0])
}

/// Mean distance between aligned prediction and target rows.
pub fn jepa_loss(g: &mut Graph, pred: Var, tgt: Var, distance: Distance) -> Result<Var> {
    if g.value(pred).rows() == 0 || g.value(pred).is_empty() {
        return Err(Error::NoTargets);
    }
    let per_row = match distance {
        Distance::Cosine => g.row_cosine_distance(pred, tgt)?,
        Distance::SmoothL1 => g.row_smooth_l1(pred, tgt)?,
    };
    Ok(g.mean(per_row)?)
}

/// Caption cross-entropy: the logits at caption position `t` predict
/// caption token `t + 1`. Rows before `text_start` never enter the loss.
pub fn ntp_loss(g: &mut Graph, logits: Var, text_start: usize, caption: &[usize]) -> Result<Var> {
    if caption.len() < 2 {
        return Err(Error::EmptyCaption);
    }
    let rows = g.value(logits).rows();
    if text_start + caption.len() != rows {
        return Err(Error::Config(format!(
            "{rows} logit rows, caption spans {}..{}",
            text_start,
            text_start + caption.len()
        )));
    }
    let idx: Vec<usize> = (text_start..rows - 1).collect();
    let shifted = g.gather_rows(logits, &idx)?;
    Ok(g.cross_entropy(shifted, &caption[1..])?)
}

/// Bernoulli(λ) draw; `true` means skip the latent loss for this batch.
pub fn lambda_gate(cfg: &LossConfig, rng: &mut impl Rng) -> bool {
    rng.random::<f64>() < cfg.lambda
}

/// Sums the losses and reports their values. `jepa = None` marks a skipped batch.
pub fn combine(g: &mut Graph, ntp: Var, jepa: Option<Var>, n_target_tokens: usize, cfg: &LossConfig) -> Result<(Var, LossReport)> {
    let ntp_v = g.value(ntp).item();
    let (total, jepa_v) = match jepa {
        None => (ntp, None),
        Some(j) => {
            let w = g.scale(j, cfg.jepa_weight)?;
            (g.add(ntp, w)?, Some(g.value(j).item()))
        }
    };
    let report = LossReport {
        ntp: ntp_v,
        jepa: jepa_v,
        total: g.value(total).item(),
        skipped: jepa.is_none(),
        n_target_tokens,
    };
    Ok((total, report))
}
