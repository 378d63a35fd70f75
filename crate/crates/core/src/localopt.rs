//! Client-side optimization.
//!
//! A client's local rule is a base optimizer (SGD or SAM) combined with an
//! optional gradient correction (FedProx proximal pull or the ADMM augmented
//! Lagrangian term). Weight decay and momentum are applied by [`sgd_step`]
//! after the correction, so they only ever touch the descent gradient.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::{Objective, ParamVector};
use crate::{Error, Result};

/// Norm below which a gradient is treated as zero by SAM.
pub const SAM_ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalHyper {
    /// Learning rate.
    pub eta: f64,
    /// SAM radius; zero turns SAM into SGD.
    pub rho_l: f64,
    /// FedProx proximal coefficient.
    pub mu: f64,
    /// ADMM penalty.
    pub beta: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LocalHyper {
    fn default() -> Self {
        LocalHyper {
            eta: 0.01,
            rho_l: 0.0,
            mu: 0.0,
            beta: 10.0,
            weight_decay: 0.0,
            momentum: 0.0,
            epochs: 1,
            batch_size: 64,
        }
    }
}

impl LocalHyper {
    /// Field-level violations, empty when valid.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            v.push(format!("{prefix}.eta: must be > 0, got {}", self.eta));
        }
        if !(self.rho_l >= 0.0 && self.rho_l.is_finite()) {
            v.push(format!("{prefix}.rho_l: must be >= 0, got {}", self.rho_l));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            v.push(format!("{prefix}.mu: must be >= 0, got {}", self.mu));
        }
        if !(self.beta > 0.0) {
            v.push(format!("{prefix}.beta: must be > 0, got {}", self.beta));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!(
                "{prefix}.weight_decay: must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!(
                "{prefix}.momentum: must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.epochs < 1 {
            v.push(format!("{prefix}.epochs: must be >= 1"));
        }
        if self.batch_size < 1 {
            v.push(format!("{prefix}.batch_size: must be >= 1"));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalOptimizer {
    Sgd,
    Sam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    None,
    Prox,
    Admm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalMode {
    pub optimizer: LocalOptimizer,
    pub correction: Correction,
}

/// Per-client dual variable, kept across rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAdmmState {
    pub sigma: ParamVector,
}

impl ClientAdmmState {
    pub fn zeros(dim: usize) -> Self {
        ClientAdmmState {
            sigma: ParamVector::zeros(dim),
        }
    }
}

/// `rho * g / |g|`, or zero when `|g| < SAM_ZERO_NORM`.
pub fn sam_perturbation(g: &ParamVector, rho: f64) -> ParamVector {
    let norm = g.norm();
    if norm < SAM_ZERO_NORM || rho == 0.0 {
        return ParamVector::zeros(g.len());
    }
    g.scaled(rho / norm)
}

/// One SGD step with L2 weight decay and classical momentum, in place:
/// `g <- g + wd * w; m <- momentum * m + g; w <- w - eta * m`.
pub fn sgd_step(
    w: &mut ParamVector,
    g: &ParamVector,
    eta: f64,
    weight_decay: f64,
    momentum: f64,
    momentum_buf: &mut ParamVector,
) {
    let w_s = w.as_mut_slice();
    let m_s = momentum_buf.as_mut_slice();
    for ((wi, mi), gi) in w_s.iter_mut().zip(m_s.iter_mut()).zip(g.iter()) {
        let d = gi + weight_decay * *wi;
        *mi = momentum * *mi + d;
        *wi -= eta * *mi;
    }
}

/// Sharpness-aware gradient at `w` over the samples `idx`: the gradient
/// evaluated at `w + rho_l * g / |g|`. Costs two gradient evaluations.
pub fn sam_gradient<O: Objective + ?Sized>(
    obj: &O,
    w: &ParamVector,
    idx: &[usize],
    rho_l: f64,
) -> Result<ParamVector> {
    let g = obj.gradient_on(w, idx)?;
    let eps = sam_perturbation(&g, rho_l);
    obj.gradient_on(&w.add(&eps), idx)
}

/// One SAM step followed by the SGD update of [`sgd_step`].
pub fn sam_step<O: Objective + ?Sized>(
    obj: &O,
    w: &mut ParamVector,
    idx: &[usize],
    hyper: &LocalHyper,
    momentum_buf: &mut ParamVector,
) -> Result<()> {
    let g = sam_gradient(obj, w, idx, hyper.rho_l)?;
    sgd_step(w, &g, hyper.eta, hyper.weight_decay, hyper.momentum, momentum_buf);
    Ok(())
}

/// `g - sigma_k + (w - w_0) / beta`
pub fn admm_local_correction(
    g: &ParamVector,
    w: &ParamVector,
    w_0: &ParamVector,
    sigma_k: &ParamVector,
    beta: f64,
) -> ParamVector {
    let inv_beta = 1.0 / beta;
    ParamVector::new(
        g.iter()
            .zip(w.iter())
            .zip(w_0.iter())
            .zip(sigma_k.iter())
            .map(|(((gi, wi), w0), si)| gi - si + (wi - w0) * inv_beta)
            .collect(),
    )
}

/// `g + mu * (w - w_global)`
pub fn fedprox_correction(g: &ParamVector, w: &ParamVector, w_global: &ParamVector, mu: f64) -> ParamVector {
    ParamVector::new(
        g.iter()
            .zip(w.iter())
            .zip(w_global.iter())
            .map(|((gi, wi), wg)| gi + mu * (wi - wg))
            .collect(),
    )
}

/// Run `epochs` passes of shuffled mini-batch steps from `w_init`.
///
/// In ADMM mode the client's dual is updated after the loop as
/// `sigma_k <- sigma_k - (w_final - w_init) / beta`. The momentum buffer
/// starts from zero on every call.
pub fn client_train<O, R>(
    obj: &O,
    w_init: &ParamVector,
    hyper: &LocalHyper,
    mode: LocalMode,
    state: &mut ClientAdmmState,
    rng: &mut R,
) -> Result<ParamVector>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    let n = obj.num_samples();
    if n == 0 {
        return Err(Error::config("client shard is empty"));
    }
    w_init.check_len(obj.dim(), "client model")?;
    if mode.correction == Correction::Admm {
        state.sigma.check_len(obj.dim(), "client dual")?;
    }
    let use_sam = mode.optimizer == LocalOptimizer::Sam && hyper.rho_l > 0.0;
    let batch = hyper.batch_size.max(1);

    let mut w = w_init.clone();
    let mut momentum_buf = ParamVector::zeros(w.len());
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        for idx in order.chunks(batch) {
            let g = if use_sam {
                sam_gradient(obj, &w, idx, hyper.rho_l)?
            } else {
                obj.gradient_on(&w, idx)?
            };
            let g = match mode.correction {
                Correction::None => g,
                Correction::Prox => fedprox_correction(&g, &w, w_init, hyper.mu),
                Correction::Admm => admm_local_correction(&g, &w, w_init, &state.sigma, hyper.beta),
            };
            sgd_step(
                &mut w,
                &g,
                hyper.eta,
                hyper.weight_decay,
                hyper.momentum,
                &mut momentum_buf,
            );
        }
    }
    if mode.correction == Correction::Admm {
        let inv_beta = 1.0 / hyper.beta;
        for ((s, wf), w0) in state
            .sigma
            .as_mut_slice()
            .iter_mut()
            .zip(w.iter())
            .zip(w_init.iter())
        {
            *s -= (wf - w0) * inv_beta;
        }
    }
    Ok(w)
}
