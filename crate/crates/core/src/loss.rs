//! Uncertainty-aware relation loss: a blend of deterministic and Monte-Carlo
//! cross-entropy plus an entropy-margin hinge that keeps variances from
//! collapsing.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::layers::{ClassifierParams, ClassifierVars};
use crate::pum::{entropy_traced, reparameterize_traced, GaussianParams, HALF_LN_2PI_E};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Probabilities are clamped to this value before taking the log.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the Monte-Carlo branch, in `[0, 1]`.
    pub lambda: f64,
    /// Entropy margin in nats.
    pub gamma: f64,
    /// Weight of the entropy-margin term.
    pub alpha: f64,
    /// Monte-Carlo samples per relation.
    pub n_train_samples: usize,
}

impl LossConfig {
    /// Defaults for a latent width of `z_dim`: `lambda = 0.1`, `alpha = 0.01`,
    /// `N = 8` and a margin 20% above the entropy of a unit Gaussian.
    pub fn for_dim(z_dim: usize) -> Self {
        Self {
            lambda: 0.1,
            gamma: default_gamma(z_dim),
            alpha: 0.01,
            n_train_samples: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        if self.n_train_samples == 0 {
            return Err(Error::Config("need at least one training sample".into()));
        }
        Ok(())
    }
}

pub fn default_gamma(z_dim: usize) -> f64 {
    1.2 * z_dim as f64 * HALF_LN_2PI_E
}

/// `-ln max(probs[label], 1e-12)`
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<f64> {
    let p = probs
        .data()
        .get(label)
        .ok_or_else(|| Error::Contract(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-p.max(PROB_CLAMP).ln())
}

/// Traced cross-entropy of a probability vector node.
pub fn cross_entropy_traced(tape: &mut Tape, probs: NodeId, label: usize) -> Result<NodeId> {
    let c = tape.value(probs).len();
    if label >= c {
        return Err(Error::Contract(format!("label {label} out of range for {c} classes")));
    }
    let mut onehot = Tensor::zeros(&[c]);
    onehot.data_mut()[label] = 1.0;
    let onehot = tape.leaf(onehot);
    let picked = tape.mul(probs, onehot)?;
    let p = tape.sum(picked)?;
    let p = tape.clamp_min(p, PROB_CLAMP)?;
    let logp = tape.log(p)?;
    tape.scale_by(-1.0, logp)
}

/// Nodes of one relation's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct RelationLoss {
    pub ce: NodeId,
    pub reg: NodeId,
    pub entropy: NodeId,
    pub total: NodeId,
}

/// `(1-λ) CE(φ(mu)) + λ/N Σ_k CE(φ(mu + eps_k ⊙ σ))`
///
/// `noise` carries the `N` standard-normal draws.
pub fn uncertainty_ce_traced(
    tape: &mut Tape,
    mu: NodeId,
    sigma2: NodeId,
    cls: &ClassifierVars,
    label: usize,
    lambda: f64,
    noise: &[Tensor],
) -> Result<NodeId> {
    if noise.is_empty() {
        return Err(Error::Config("need at least one noise sample".into()));
    }
    let det_probs = cls.forward(tape, mu)?;
    let det = cross_entropy_traced(tape, det_probs, label)?;
    let mut mc: Option<NodeId> = None;
    for eps in noise {
        let z = reparameterize_traced(tape, mu, sigma2, eps.clone())?;
        let probs = cls.forward(tape, z)?;
        let ce = cross_entropy_traced(tape, probs, label)?;
        mc = Some(match mc {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let mc = tape.scale_by(1.0 / noise.len() as f64, mc.expect("non-empty noise"))?;
    let det = tape.scale_by(1.0 - lambda, det)?;
    let mc = tape.scale_by(lambda, mc)?;
    tape.add(det, mc)
}

/// `max(0, γ - h)` together with the entropy node `h`.
pub fn entropy_margin_traced(tape: &mut Tape, sigma2: NodeId, gamma: f64) -> Result<(NodeId, NodeId)> {
    let h = entropy_traced(tape, sigma2)?;
    let g = tape.constant(gamma);
    let gap = tape.sub(g, h)?;
    Ok((tape.relu(gap)?, h))
}

/// Full per-relation loss `L_ce + α L_reg`.
pub fn relation_loss_traced(
    tape: &mut Tape,
    mu: NodeId,
    sigma2: NodeId,
    cls: &ClassifierVars,
    label: usize,
    cfg: &LossConfig,
    noise: &[Tensor],
) -> Result<RelationLoss> {
    let ce = uncertainty_ce_traced(tape, mu, sigma2, cls, label, cfg.lambda, noise)?;
    let (reg, entropy) = entropy_margin_traced(tape, sigma2, cfg.gamma)?;
    let weighted = tape.scale_by(cfg.alpha, reg)?;
    let total = tape.add(ce, weighted)?;
    Ok(RelationLoss {
        ce,
        reg,
        entropy,
        total,
    })
}

/// Draws the `N` noise vectors used by one relation.
pub fn draw_noise(rng: &mut RngState, n: usize, dim: usize) -> Vec<Tensor> {
    (0..n)
        .map(|_| Tensor::from_parts(vec![dim], rng.normals(dim)))
        .collect()
}

fn evaluate_relation(
    g: &GaussianParams,
    cls: &ClassifierParams,
    label: usize,
    cfg: &LossConfig,
    rng: &mut RngState,
) -> Result<(f64, f64, f64)> {
    cfg.validate()?;
    let noise = draw_noise(rng, cfg.n_train_samples, g.dim());
    let mut tape = Tape::new();
    let mu = tape.leaf(g.mu().clone());
    let sigma2 = tape.leaf(g.sigma2().clone());
    let vars = cls.bind(&mut tape);
    let loss = relation_loss_traced(&mut tape, mu, sigma2, &vars, label, cfg, &noise)?;
    let get = |n: NodeId| tape.value(n).data()[0];
    Ok((get(loss.ce), get(loss.reg), get(loss.total)))
}

/// Monte-Carlo uncertainty-aware cross-entropy with `cfg.n_train_samples`
/// draws from `rng`.
pub fn uncertainty_ce(
    g: &GaussianParams,
    cls: &ClassifierParams,
    label: usize,
    cfg: &LossConfig,
    rng: &mut RngState,
) -> Result<f64> {
    evaluate_relation(g, cls, label, cfg, rng).map(|(ce, _, _)| ce)
}

/// `max(0, γ - h(g))`
pub fn entropy_margin_reg(g: &GaussianParams, gamma: f64) -> f64 {
    (gamma - crate::pum::differential_entropy(g)).max(0.0)
}

/// `uncertainty_ce + α · entropy_margin_reg`
pub fn total_relation_loss(
    g: &GaussianParams,
    cls: &ClassifierParams,
    label: usize,
    cfg: &LossConfig,
    rng: &mut RngState,
) -> Result<f64> {
    evaluate_relation(g, cls, label, cfg, rng).map(|(_, _, total)| total)
}
