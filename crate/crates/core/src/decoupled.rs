//! First-order optimizers and the decoupled backtracking rule for
//! architecture parameters.
//!
//! After a vanilla step `α^{t+1}`, every low-norm operation column on an edge
//! is pulled along its previous value, `α̃ = α^{t+1} + η ψ̃_e α^t`, with a
//! learnable per-edge coefficient `ψ̃`. Since `α̃` is where the next gradient
//! is taken, `∂L/∂ψ̃_e = η Σ_m ∂L/∂α̃_{e,m} α^t_{e,m}` over the backtracked
//! columns, and `ψ̃` is updated as `|ψ̃ − η_ψ ∂L/∂ψ̃|`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Heavy-ball momentum (SGD only).
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }
}

/// Per-tensor optimizer moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Moments {
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// One first-order step on `x` in place with learning rate `lr`.
pub fn vanilla_step(cfg: &OptimizerConfig, state: &mut Moments, x: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if x.len() != grad.len() {
        return dim_err(format!("gradient of length {} for {} parameters", grad.len(), x.len()));
    }
    if state.m.len() != x.len() {
        state.m = vec![0.0; x.len()];
        state.v = vec![0.0; x.len()];
        state.t = 0;
    }
    state.t += 1;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for i in 0..x.len() {
                let g = grad[i] + cfg.weight_decay * x[i];
                if cfg.momentum == 0.0 {
                    x[i] -= lr * g;
                } else {
                    state.m[i] = cfg.momentum * state.m[i] + g;
                    x[i] -= lr * state.m[i];
                }
            }
        }
        OptimizerKind::Adam => {
            let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
            for i in 0..x.len() {
                let g = grad[i] + cfg.weight_decay * x[i];
                state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
                state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
                let mh = state.m[i] / bc1;
                let vh = state.v[i] / bc2;
                x[i] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}

/// Cosine annealing from `base` to `floor` over `total` steps.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// `α^{t+1} + η ψ̃ α^t` for one edge row.
pub fn backtrack(next: f64, prev: f64, psi: f64, eta: f64) -> f64 {
    if psi == 0.0 || eta == 0.0 {
        next
    } else {
        next + eta * psi * prev
    }
}

/// `|ψ̃ − η_ψ g|`.
pub fn psi_step(psi: f64, grad: f64, eta_psi: f64) -> f64 {
    (psi - eta_psi * grad).abs()
}

/// `⌊ε·M⌋`, robust to the representation error of `ε`.
pub fn threshold(epsilon: f64, active: usize) -> usize {
    (epsilon * active as f64 + 1e-9).floor() as usize
}

/// Descending ranks (1 = largest) of `norms` restricted to `active`; ties go
/// to the lower index. Inactive entries get rank 0.
pub fn norm_ranks(norms: &[f64], active: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..norms.len()).filter(|&i| active[i]).collect();
    idx.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut ranks = vec![0; norms.len()];
    for (r, &i) in idx.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktrackConfig {
    pub enabled: bool,
    /// `η2`; the backtracking step is `η = η1·η2`.
    pub eta2: f64,
    pub eta_psi: f64,
    pub epsilon: f64,
    pub psi_init: f64,
}

impl Default for BacktrackConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            eta2: 1.0,
            eta_psi: 1e-4,
            epsilon: 0.2,
            psi_init: 1.0,
        }
    }
}

/// Telemetry of one architecture step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    /// `τ` of the first edge (all edges share it unless removal diverged).
    pub tau: usize,
    pub backtracked: usize,
    pub psi_norm: f64,
}

/// Architecture optimizer: vanilla step, then the decoupled rule.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledOptimizer {
    pub opt: OptimizerConfig,
    pub cfg: BacktrackConfig,
    /// Number of op columns per edge row.
    pub num_ops: usize,
    pub psi: Vec<f64>,
    pub moments: Moments,
    prev_alpha: Option<Vec<f64>>,
    backtracked: Vec<bool>,
    eta_last: f64,
}

impl DecoupledOptimizer {
    /// `len` flat entries grouped into rows of `num_ops`.
    pub fn new(opt: OptimizerConfig, cfg: BacktrackConfig, len: usize, num_ops: usize) -> Self {
        let rows = len / num_ops.max(1);
        Self {
            psi: vec![cfg.psi_init; rows],
            opt,
            cfg,
            num_ops,
            moments: Moments::default(),
            prev_alpha: None,
            backtracked: vec![false; len],
            eta_last: 0.0,
        }
    }

    /// Forgets moments and the pending ψ̃ gradient (after inheriting α).
    pub fn reset_moments(&mut self) {
        self.moments.reset();
        self.prev_alpha = None;
    }

    /// ψ̃ update from the gradient taken at the last backtracked point.
    pub fn update_psi(&mut self, grad: &[f64]) -> Result<()> {
        let Some(prev) = &self.prev_alpha else {
            return Ok(());
        };
        if grad.len() != prev.len() {
            return dim_err("gradient layout differs from the previous step");
        }
        let m = self.num_ops;
        for (r, psi) in self.psi.iter_mut().enumerate() {
            let mut dpsi = 0.0;
            for k in r * m..(r + 1) * m {
                if self.backtracked[k] {
                    dpsi += grad[k] * prev[k];
                }
            }
            *psi = psi_step(*psi, self.eta_last * dpsi, self.cfg.eta_psi);
        }
        Ok(())
    }

    /// Applies the decoupled rule to `next` given the previous point `prev`,
    /// the per-entry operation norms and the active mask. Returns the
    /// backtracked mask.
    pub fn apply_update_rule(
        &self,
        next: &mut [f64],
        prev: &[f64],
        norms: &[f64],
        active: &[bool],
        eta: f64,
    ) -> Result<(Vec<bool>, StepReport)> {
        let n = next.len();
        if prev.len() != n || norms.len() != n || active.len() != n {
            return dim_err("update-rule inputs differ in layout");
        }
        let m = self.num_ops;
        let mut mask = vec![false; n];
        let mut report = StepReport::default();
        for r in 0..n / m {
            let span = r * m..(r + 1) * m;
            let act = &active[span.clone()];
            let n_active = act.iter().filter(|&&a| a).count();
            let tau = threshold(self.cfg.epsilon, n_active);
            if r == 0 {
                report.tau = tau;
            }
            if tau >= n_active {
                log::debug!("edge row {r}: τ = {tau} covers all {n_active} active ops, nothing backtracked");
                continue;
            }
            let ranks = norm_ranks(&norms[span.clone()], act);
            for (j, &rank) in ranks.iter().enumerate() {
                if rank > tau {
                    let k = r * m + j;
                    next[k] = backtrack(next[k], prev[k], self.psi[r], eta);
                    mask[k] = true;
                    report.backtracked += 1;
                }
            }
        }
        report.psi_norm = self.psi.iter().map(|p| p * p).sum::<f64>().sqrt();
        Ok((mask, report))
    }

    /// Full architecture step on `alpha` in place: ψ̃ update, vanilla step at
    /// learning rate `lr` (= η1), then backtracking.
    pub fn step(&mut self, alpha: &mut [f64], grad: &[f64], norms: &[f64], active: &[bool], lr: f64) -> Result<StepReport> {
        if self.cfg.enabled {
            self.update_psi(grad)?;
        }
        let prev = alpha.to_vec();
        vanilla_step(&self.opt, &mut self.moments, alpha, grad, lr)?;
        // masked entries never move
        for (k, a) in alpha.iter_mut().enumerate() {
            if !active[k] {
                *a = prev[k];
            }
        }
        if !self.cfg.enabled {
            return Ok(StepReport {
                tau: 0,
                backtracked: 0,
                psi_norm: 0.0,
            });
        }
        let eta = lr * self.cfg.eta2;
        let (mask, report) = self.apply_update_rule(alpha, &prev, norms, active, eta)?;
        self.backtracked = mask;
        self.prev_alpha = Some(prev);
        self.eta_last = eta;
        Ok(report)
    }
}

impl DecoupledOptimizer {
    /// Complete optimizer state as named tensors.
    pub fn export_state(&self) -> IndexMap<String, Tensor> {
        let mut m = IndexMap::new();
        m.insert("psi".to_string(), Tensor::from_vec(self.psi.clone()));
        export_moments(&self.moments, "", &mut m);
        if let Some(p) = &self.prev_alpha {
            m.insert("prev_alpha".to_string(), Tensor::from_vec(p.clone()));
        }
        let bt = self.backtracked.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        m.insert("backtracked".to_string(), Tensor::from_vec(bt));
        m.insert("eta_last".to_string(), Tensor::scalar(self.eta_last));
        m
    }

    pub fn import_state(&mut self, m: &IndexMap<String, Tensor>) -> Result<()> {
        let get = |k: &str| m.get(k).ok_or_else(|| Error::Data(format!("optimizer state lacks `{k}`")));
        self.psi = get("psi")?.data().to_vec();
        self.moments = import_moments(m, "")?;
        self.prev_alpha = m.get("prev_alpha").map(|t| t.data().to_vec());
        self.backtracked = get("backtracked")?.data().iter().map(|&v| v != 0.0).collect();
        self.eta_last = get("eta_last")?.item();
        Ok(())
    }
}

fn export_moments(mo: &Moments, prefix: &str, m: &mut IndexMap<String, Tensor>) {
    m.insert(format!("{prefix}m"), Tensor::from_vec(mo.m.clone()));
    m.insert(format!("{prefix}v"), Tensor::from_vec(mo.v.clone()));
    m.insert(format!("{prefix}t"), Tensor::scalar(mo.t as f64));
}

fn import_moments(m: &IndexMap<String, Tensor>, prefix: &str) -> Result<Moments> {
    let get = |k: String| m.get(&k).cloned().ok_or_else(|| Error::Data(format!("optimizer state lacks `{k}`")));
    Ok(Moments {
        m: get(format!("{prefix}m"))?.into_data(),
        v: get(format!("{prefix}v"))?.into_data(),
        t: get(format!("{prefix}t"))?.item() as u64,
    })
}

/// First-order optimizer over a named parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightOptimizer {
    pub cfg: OptimizerConfig,
    pub moments: IndexMap<String, Moments>,
}

impl WeightOptimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            moments: IndexMap::new(),
        }
    }

    /// Steps every parameter that has a gradient.
    pub fn step(&mut self, params: &mut IndexMap<String, Tensor>, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return dim_err(format!("gradient of `{name}` has shape {:?}", g.shape()));
            }
            let st = self.moments.entry(name.clone()).or_default();
            vanilla_step(&self.cfg, st, p.data_mut(), g.data(), lr)?;
        }
        Ok(())
    }

    pub fn export_state(&self) -> IndexMap<String, Tensor> {
        let mut m = IndexMap::new();
        for (k, mo) in &self.moments {
            export_moments(mo, &format!("{k}."), &mut m);
        }
        m
    }

    pub fn import_state(&mut self, m: &IndexMap<String, Tensor>) -> Result<()> {
        self.moments.clear();
        for k in m.keys() {
            if let Some(name) = k.strip_suffix(".t") {
                let mo = import_moments(m, &format!("{name}."))?;
                self.moments.insert(name.to_string(), mo);
            }
        }
        Ok(())
    }
}
