//! Tangent direction of the Parent, the tangent-propagation discrepancy, the
//! Child objective and its Gauss-Newton curvature substitute.
//!
//! The Child maximizes `G = E_b Σ_n p_n log(p̂_n / p_n)`, the negative KL
//! divergence from the Parent's predictive distribution `p` to its own `p̂`,
//! and is pulled towards the Parent's tangent `t = ∂f̃ᴾ/∂α` through
//! `D = ‖t − ∂G/∂α̂‖²`. The objective minimized is
//!
//! ```text
//! L = −G + λ·D + μ·L_R
//! ```
//!
//! Differentiating `D` needs the Hessian of `G` in `α̂`, replaced here by the
//! Fisher matrix `Ĥ = E_x Σ_n p̂_n ∇log p̂_n ∇log p̂_nᵀ`, which equals the
//! expected negative Hessian of the log likelihood.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormStats};
use crate::binarize::BinarizeConfig;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::space::ArchParams;
use crate::supernet::{one_hot, reconstruction_term, ForwardOptions, Network, StatsMode};
use crate::tensor::Tensor;

/// The Parent's architecture gradient `∂f̃ᴾ/∂α`, flattened normal block then
/// reduction block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentSnapshot {
    pub grad_parent: Vec<f64>,
    pub epoch: u64,
}

impl TangentSnapshot {
    pub fn new(grad_parent: Vec<f64>, epoch: u64) -> Result<Self> {
        if let Some(i) = grad_parent.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "tangent entry {i} is {} at epoch {epoch}",
                grad_parent[i]
            )));
        }
        Ok(Self { grad_parent, epoch })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            grad_parent: vec![0.0; len],
            epoch: 0,
        }
    }
}

/// Gradient of the Parent's performance `f̃ᴾ = −CE` with respect to `α`,
/// averaged over `batches` (weighted by batch size). Batch statistics are
/// used as in training; the Parent is not modified.
pub fn compute_tangent(
    parent: &Network,
    arch: &ArchParams,
    batches: &[(Tensor, Vec<usize>)],
    epoch: u64,
) -> Result<TangentSnapshot> {
    let len = 2 * arch.block_len();
    let mut acc = vec![0.0; len];
    let mut total = 0usize;
    let opts = ForwardOptions {
        stats: StatsMode::Batch,
        weight_grad: false,
        arch_grad: true,
    };
    for (x, labels) in batches {
        let mut g = Graph::new();
        let f = parent.forward(&mut g, x, Some(arch), opts)?;
        let y = one_hot(labels, parent.net.num_classes)?;
        let ce = g.cross_entropy(f.logits, &y)?;
        let perf = g.scale(ce, -1.0);
        let grads = g.backward(perf)?;
        let ga = f.arch_grad(&grads)?;
        let n = labels.len();
        for (a, v) in acc.iter_mut().zip(ga) {
            *a += v * n as f64;
        }
        total += n;
    }
    if total == 0 {
        return contract_err("tangent needs at least one held-out sample");
    }
    acc.iter_mut().for_each(|a| *a /= total as f64);
    TangentSnapshot::new(acc, epoch)
}

/// `D = ‖t − g‖²`.
pub fn tangent_discrepancy(snapshot: &TangentSnapshot, grad_child: &[f64]) -> Result<f64> {
    if snapshot.grad_parent.len() != grad_child.len() {
        return dim_err(format!(
            "tangent of length {} against child gradient of length {}",
            snapshot.grad_parent.len(),
            grad_child.len()
        ));
    }
    Ok(snapshot
        .grad_parent
        .iter()
        .zip(grad_child)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// `−G + λ·D + μ·L_R`.
pub fn dcp_loss(g: f64, d: f64, l_r: f64, lambda: f64, mu: f64) -> f64 {
    -g + lambda * d + mu * l_r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GgnMode {
    /// Dense block per cell type.
    #[default]
    Full,
    /// Diagonal only.
    Diag,
}

/// Symmetric curvature operator applied to a flat architecture vector.
pub trait Curvature {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Dense symmetric matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseCurvature {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseCurvature {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return dim_err(format!("{} entries for a {n}x{n} matrix", data.len()));
        }
        Ok(Self { n, data })
    }
}

impl Curvature for DenseCurvature {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n {
            return dim_err("vector length differs from the curvature dimension");
        }
        Ok((0..self.n)
            .map(|i| v.iter().zip(&self.data[i * self.n..(i + 1) * self.n]).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Accumulated Fisher matrix, one block per cell type.
#[derive(Clone, Debug, PartialEq)]
pub struct GgnState {
    pub mode: GgnMode,
    pub block_len: usize,
    /// Per block: `block_len²` entries (full) or `block_len` (diag); sums, not means.
    pub blocks: Vec<Vec<f64>>,
    pub samples: usize,
}

impl GgnState {
    pub fn new(mode: GgnMode, block_len: usize, num_blocks: usize) -> Self {
        let per = match mode {
            GgnMode::Full => block_len * block_len,
            GgnMode::Diag => block_len,
        };
        Self {
            mode,
            block_len,
            blocks: vec![vec![0.0; per]; num_blocks],
            samples: 0,
        }
    }

    pub fn for_arch(mode: GgnMode, arch: &ArchParams) -> Self {
        Self::new(mode, arch.block_len(), 2)
    }

    pub fn reset(&mut self) {
        self.blocks.iter_mut().for_each(|b| b.iter_mut().for_each(|v| *v = 0.0));
        self.samples = 0;
    }

    /// Adds `weight · v vᵀ` (restricted to the block structure) without
    /// counting a sample.
    pub fn accumulate(&mut self, v: &[f64], weight: f64) -> Result<()> {
        let b = self.block_len;
        if v.len() != b * self.blocks.len() {
            return dim_err(format!("gradient of length {} for {} blocks of {b}", v.len(), self.blocks.len()));
        }
        for (blk, seg) in self.blocks.iter_mut().zip(v.chunks(b)) {
            match self.mode {
                GgnMode::Full => {
                    for i in 0..b {
                        let wi = weight * seg[i];
                        if wi == 0.0 {
                            continue;
                        }
                        let row = &mut blk[i * b..(i + 1) * b];
                        for (r, &sj) in row.iter_mut().zip(seg) {
                            *r += wi * sj;
                        }
                    }
                }
                GgnMode::Diag => {
                    for (d, &s) in blk.iter_mut().zip(seg) {
                        *d += weight * s * s;
                    }
                }
            }
        }
        Ok(())
    }

    /// Marks the end of one sample's contributions.
    pub fn end_sample(&mut self) {
        self.samples += 1;
    }

    /// Adds one sample whose gradients are weighted by class probabilities.
    pub fn add_sample(&mut self, per_class: &[(f64, Vec<f64>)]) -> Result<()> {
        for (w, v) in per_class {
            self.accumulate(v, *w)?;
        }
        self.end_sample();
        Ok(())
    }

    /// Dense mean matrix of one block (diag mode fills the diagonal).
    pub fn block_matrix(&self, block: usize) -> Result<Vec<f64>> {
        if self.samples == 0 {
            return contract_err("curvature has not accumulated any sample");
        }
        let b = self.block_len;
        let s = self.samples as f64;
        Ok(match self.mode {
            GgnMode::Full => self.blocks[block].iter().map(|v| v / s).collect(),
            GgnMode::Diag => {
                let mut m = vec![0.0; b * b];
                for i in 0..b {
                    m[i * b + i] = self.blocks[block][i] / s;
                }
                m
            }
        })
    }
}

impl Curvature for GgnState {
    fn dim(&self) -> usize {
        self.block_len * self.blocks.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.samples == 0 {
            return contract_err("curvature has not accumulated any sample this step");
        }
        let b = self.block_len;
        if v.len() != self.dim() {
            return dim_err("vector length differs from the curvature dimension");
        }
        let s = self.samples as f64;
        let mut out = vec![0.0; v.len()];
        for (k, blk) in self.blocks.iter().enumerate() {
            let seg = &v[k * b..(k + 1) * b];
            let o = &mut out[k * b..(k + 1) * b];
            match self.mode {
                GgnMode::Full => {
                    for i in 0..b {
                        o[i] = blk[i * b..(i + 1) * b].iter().zip(seg).map(|(h, x)| h * x).sum::<f64>() / s;
                    }
                }
                GgnMode::Diag => {
                    for i in 0..b {
                        o[i] = blk[i] * seg[i] / s;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Adds the Fisher contribution of every sample of `x` to `ggn`. Samples are
/// evaluated independently under the supplied normalization statistics; one
/// seeded backward per (sample, class) yields `∇_α̂ log p̂_n`.
pub fn accumulate_ggn(
    child: &Network,
    arch: &ArchParams,
    x: &Tensor,
    stats: &IndexMap<String, NormStats>,
    ggn: &mut GgnState,
) -> Result<()> {
    let mut g = Graph::new();
    let opts = ForwardOptions {
        stats: StatsMode::Given(stats),
        weight_grad: false,
        arch_grad: true,
    };
    let f = child.forward(&mut g, x, Some(arch), opts)?;
    let [an, ar] = f.arch.expect("supernet forward");
    let ls = g.log_softmax(f.logits);
    let logp = g.value(ls).clone();
    let (rows, k) = (logp.shape()[0], logp.shape()[1]);
    for b in 0..rows {
        let mut per_class = Vec::with_capacity(k);
        for n in 0..k {
            let mut seed = Tensor::zeros(&[rows, k]);
            seed.data_mut()[b * k + n] = 1.0;
            let grads = g.backward_seeded(ls, seed, Some(&[an, ar]))?;
            let mut v = grads.wrt(an).data().to_vec();
            v.extend_from_slice(grads.wrt(ar).data());
            per_class.push((logp.data()[b * k + n].exp(), v));
        }
        ggn.add_sample(&per_class)?;
    }
    Ok(())
}

/// Child architecture direction `−g + 2λ (g − t)ᵀ Ĥ` for `g = ∂G/∂α̂`.
/// With `λ = 0` the curvature is not consulted and may be absent.
pub fn dcp_alpha_gradient(
    grad_g: &[f64],
    snapshot: &TangentSnapshot,
    curvature: Option<&dyn Curvature>,
    lambda: f64,
) -> Result<Vec<f64>> {
    if grad_g.len() != snapshot.grad_parent.len() {
        return dim_err("child gradient and tangent differ in layout");
    }
    let neg: Vec<f64> = grad_g.iter().map(|v| -v).collect();
    if lambda == 0.0 {
        return Ok(neg);
    }
    let curv = curvature.ok_or_else(|| Error::Contract("tangent correction needs a curvature estimate".into()))?;
    let residual: Vec<f64> = grad_g.iter().zip(&snapshot.grad_parent).map(|(g, t)| g - t).collect();
    let hr = curv.apply(&residual)?;
    Ok(neg.iter().zip(hr).map(|(n, h)| n + 2.0 * lambda * h).collect())
}

/// How the Child step evaluates its curvature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GgnConfig {
    pub mode: GgnMode,
    /// Samples of the training batch used for the Fisher estimate per step.
    pub samples: usize,
}

impl Default for GgnConfig {
    fn default() -> Self {
        Self {
            mode: GgnMode::Full,
            samples: 4,
        }
    }
}

/// Everything one Child step produces.
#[derive(Clone, Debug)]
pub struct ChildStep {
    /// `−G`.
    pub neg_g: f64,
    pub d: f64,
    pub l_r: f64,
    pub loss: f64,
    /// `∂G/∂α̂`.
    pub grad_g: Vec<f64>,
    /// Direction applied to `α̂` (a descent direction of `L`).
    pub alpha_direction: Vec<f64>,
    /// Gradients of `−G + μ·L_R` for every Child parameter.
    pub weight_grads: IndexMap<String, Tensor>,
    /// Batch statistics of the Child forward.
    pub stats: IndexMap<String, NormStats>,
    pub curvature: Option<GgnState>,
}

/// Evaluates the Child objective on one batch against the Parent's
/// predictive distribution `parent_probs`.
#[allow(clippy::too_many_arguments)]
pub fn child_step(
    child: &Network,
    arch_hat: &ArchParams,
    x: &Tensor,
    parent_probs: &Tensor,
    snapshot: &TangentSnapshot,
    lambda: f64,
    mu: f64,
    ggn: &GgnConfig,
) -> Result<ChildStep> {
    if lambda < 0.0 || mu < 0.0 {
        return contract_err("λ and μ must be non-negative");
    }
    let mut g = Graph::new();
    let f = child.forward(&mut g, x, Some(arch_hat), ForwardOptions::train())?;
    let q = g.softmax(f.logits);
    let p = g.constant(parent_probs.clone());
    let kl = g.kl_div(p, q)?;
    let bin: BinarizeConfig = child.effective_binarize();
    let lr_var = reconstruction_term(&mut g, &f, &bin)?;
    let l_r = lr_var.map_or(0.0, |v| g.value(v).item());
    let objective = match lr_var {
        Some(v) if mu != 0.0 => {
            let s = g.scale(v, mu);
            g.add(kl, s)?
        }
        _ => kl,
    };
    let grads = g.backward(objective)?;
    let neg_g = g.value(kl).item();
    let grad_g: Vec<f64> = f.arch_grad(&grads)?.into_iter().map(|v| -v).collect();
    let d = tangent_discrepancy(snapshot, &grad_g)?;
    let loss = dcp_loss(-neg_g, d, l_r, lambda, mu);
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("child loss is {loss}")));
    }
    let curvature = if lambda > 0.0 {
        let n = ggn.samples.clamp(1, x.shape()[0]);
        let rows: Vec<usize> = (0..n).collect();
        let sub = x.gather_rows(&rows);
        let mut state = GgnState::for_arch(ggn.mode, arch_hat);
        accumulate_ggn(child, arch_hat, &sub, &f.stats, &mut state)?;
        Some(state)
    } else {
        None
    };
    let alpha_direction = dcp_alpha_gradient(
        &grad_g,
        snapshot,
        curvature.as_ref().map(|c| c as &dyn Curvature),
        lambda,
    )?;
    Ok(ChildStep {
        neg_g,
        d,
        l_r,
        loss,
        grad_g,
        alpha_direction,
        weight_grads: f.param_grads(&grads),
        stats: f.stats,
        curvature,
    })
}
