//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass in topological
//! order. Leaves are created with [`Graph::param`] (gradient wanted) or
//! [`Graph::constant`]; every op returns a [`Var`] handle. Calling
//! [`Graph::backward`] walks the tape once in reverse and returns a
//! [`Gradients`] table, leaving the graph untouched so several backward
//! passes with different seeds can share one forward pass.
//!
//! ```
//! use dcp_nas::autodiff::Graph;
//! use dcp_nas::Tensor;
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let loss = g.sum_squares(w);
//! let loss = g.scale(loss, 0.5);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).data(), &[1.0, -2.0, 3.0]);
//! ```

pub mod kernels;

pub use kernels::{ConvGeom, PoolGeom, PoolKind};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Epsilon inside the normalizer's square root.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How `sign` treats an exact zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// `sign(x) = +1` iff `x > 0`, so `sign(0) = -1`.
    #[default]
    ZeroNegative,
    /// Compatibility mode: `sign(0) = +1`.
    ZeroPositive,
}

impl SignConvention {
    #[inline]
    pub fn sign(self, x: f64) -> f64 {
        let positive = match self {
            SignConvention::ZeroNegative => x > 0.0,
            SignConvention::ZeroPositive => x >= 0.0,
        };
        if positive {
            1.0
        } else {
            -1.0
        }
    }
}

/// Per-channel statistics used by the affine normalizer.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Relu(Var),
    SignSte(Var),
    ChannelScale {
        x: Var,
        scale: Var,
        axis: usize,
    },
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Pool {
        x: Var,
        geom: PoolGeom,
        aux: Vec<usize>,
    },
    Subsample {
        x: Var,
        stride: usize,
    },
    Norm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    MaskedSoftmaxRows {
        x: Var,
        mask: Vec<bool>,
    },
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
        indices: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Tensor,
        probs: Tensor,
    },
    Kl {
        p: Var,
        q: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation. Confined to one thread for the duration of
/// a forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`; panics if `v` was not a gradient leaf
    /// of the pass.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v)
            .unwrap_or_else(|| panic!("no gradient recorded for {v:?}"))
    }
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [b, n] => (*b, *n),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return dim_err(format!("elementwise shape mismatch {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum_sq());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumSquares(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    /// Sign with the straight-through estimator: the backward pass multiplies
    /// the upstream gradient by `1{|x| <= 1}`.
    pub fn sign_ste(&mut self, a: Var, convention: SignConvention) -> Var {
        let v = self.value(a).map(|x| convention.sign(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::SignSte(a), rg)
    }

    /// Sign treated as a constant (its true derivative is zero almost everywhere).
    pub fn sign_detached(&mut self, a: Var, convention: SignConvention) -> Var {
        let v = self.value(a).map(|x| convention.sign(x));
        self.constant(v)
    }

    /// Multiplies every slice along `axis` by the matching entry of `scale`.
    pub fn channel_scale(&mut self, x: Var, scale: Var, axis: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let sv = self.value(scale);
        if axis >= xs.len() || sv.len() != xs[axis] {
            return dim_err(format!(
                "channel_scale: {} scales for axis {axis} of {xs:?}",
                sv.len()
            ));
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let c = xs[axis];
        let s = sv.data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= s[(i / inner) % c];
        }
        let rg = self.rg(&[x, scale]);
        Ok(self.push(out, Op::ChannelScale { x, scale, axis }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let v = kernels::conv2d_forward(self.value(x), self.value(w), &geom)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(v, Op::Conv { x, w, geom }, rg))
    }

    pub fn pool(&mut self, x: Var, geom: PoolGeom) -> Result<Var> {
        let out = kernels::pool_forward(self.value(x), &geom)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out.out,
            Op::Pool {
                x,
                geom,
                aux: out.aux,
            },
            rg,
        ))
    }

    /// Strided spatial subsampling, `out[.., y, x] = in[.., y*s, x*s]`.
    pub fn subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if stride == 0 {
            return dim_err("subsample stride must be >= 1");
        }
        let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out.push(src[(plane * h + oy * stride) * w + ox * stride]);
                }
            }
        }
        let v = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Subsample { x, stride }, rg))
    }

    /// Per-channel affine normalization of an NCHW tensor. With `stats =
    /// None` the batch statistics are computed (and returned); otherwise the
    /// supplied statistics are used as constants.
    pub fn affine_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        stats: Option<&NormStats>,
    ) -> Result<(Var, NormStats)> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return dim_err(format!("norm over {c} channels got mismatched gain/bias"));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = self.value(x).data();
        let computed;
        let st = match stats {
            Some(s) => {
                if s.mean.len() != c || s.var.len() != c {
                    return dim_err("norm statistics have the wrong channel count");
                }
                s
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        acc += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    mean[ch] = acc / m;
                    let mut acc = 0.0;
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            let d = v - mean[ch];
                            acc += d * d;
                        }
                    }
                    var[ch] = acc / m;
                }
                computed = NormStats { mean, var };
                &computed
            }
        };
        let inv_std: Vec<f64> = st.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, (&xv, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / hw) % c;
            *xh = (xv - st.mean[ch]) * inv_std[ch];
            *o = gd[ch] * *xh + bd[ch];
        }
        let stats_out = st.clone();
        let v = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x, gain, bias]);
        let var = self.push(
            v,
            Op::Norm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch: stats.is_none(),
            },
            rg,
        );
        Ok((var, stats_out))
    }

    /// Row-wise softmax of a 2-d tensor restricted to `mask`; masked entries
    /// get exactly zero weight.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = row_split(t.shape());
        if mask.len() != t.len() {
            return dim_err("mask length does not match tensor");
        }
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let m = &mask[r * cols..(r + 1) * cols];
            let Some(max) = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .reduce(f64::max)
            else {
                return contract_err(format!("row {r} has every entry masked"));
            };
            let mut z = 0.0;
            for c in 0..cols {
                if m[c] {
                    let e = (row[c] - max).exp();
                    out[r * cols + c] = e;
                    z += e;
                }
            }
            for v in &mut out[r * cols..(r + 1) * cols] {
                *v /= z;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::MaskedSoftmaxRows {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ_k weights[indices[k]] · inputs[k]` with gradients flowing to both
    /// the inputs and the weight entries.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var, indices: &[usize]) -> Result<Var> {
        if inputs.is_empty() || inputs.len() != indices.len() {
            return contract_err("weighted_sum needs one weight index per input");
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let wd = self.value(weights).data().to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        for (&inp, &k) in inputs.iter().zip(indices) {
            let t = self.value(inp);
            if t.shape() != shape.as_slice() {
                return dim_err(format!("weighted_sum input {:?} vs {shape:?}", t.shape()));
            }
            let wk = *wd.get(k).ok_or_else(|| crate::Error::Dimension("weight index".into()))?;
            for (o, &v) in out.iter_mut().zip(t.data()) {
                *o += wk * v;
            }
        }
        let v = Tensor::new(shape, out)?;
        let mut all = inputs.to_vec();
        all.push(weights);
        let rg = self.rg(&all);
        Ok(self.push(
            v,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Softmax(x), rg)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = row_split(t.shape());
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("log_softmax shape");
        let rg = self.rg(&[x]);
        self.push(v, Op::LogSoftmax(x), rg)
    }

    /// Mean over rows of `-Σ_n t_n log(max(p_n, 1e-12))` with `p = softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let lt = self.value(logits);
        if lt.shape() != targets.shape() || lt.ndim() != 2 {
            return dim_err(format!(
                "cross_entropy logits {:?} vs targets {:?}",
                lt.shape(),
                targets.shape()
            ));
        }
        let probs = softmax_rows(lt);
        let (rows, _) = row_split(lt.shape());
        let loss: f64 = probs
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| if t == 0.0 { 0.0 } else { -t * p.max(LOG_FLOOR).ln() })
            .sum::<f64>()
            / rows as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `Σ_n p_n log(p_n / q_n)` with both logs clamped.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q)?;
        let v = kl_value(self.value(p), self.value(q));
        let rg = self.rg(&[p, q]);
        Ok(self.push(Tensor::scalar(v), Op::Kl { p, q }, rg))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(inputs[0]).nchw()?;
        let mut total = 0;
        for &v in inputs {
            let (n2, c2, h2, w2) = self.value(v).nchw()?;
            if (n2, h2, w2) != (n, h, w) {
                return dim_err("concat inputs disagree on batch or spatial extent");
            }
            total += c2;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let v = Tensor::new(vec![n, total, h, w], out)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// NCHW to NC by averaging over space.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let hw = h * w;
        let d = self.value(x).data();
        let out = (0..n * c)
            .map(|p| d[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let v = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::GlobalAvgPool(x), rg))
    }

    /// `x · wᵀ + b` for `x: (B, F)`, `w: (O, F)`, `b: (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let (batch, f, o) = match (&xs[..], &ws[..], &bs[..]) {
            ([batch, f], [o, f2], [o2]) if f == f2 && o == o2 => (*batch, *f, *o),
            _ => return dim_err(format!("linear shapes x{xs:?} w{ws:?} b{bs:?}")),
        };
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; batch * o];
        for r in 0..batch {
            for j in 0..o {
                let mut acc = bd[j];
                for k in 0..f {
                    acc += xd[r * f + k] * wd[j * f + k];
                }
                out[r * o + j] = acc;
            }
        }
        let v = Tensor::new(vec![batch, o], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    /// Backward pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        self.backward_seeded(loss, Tensor::full(self.value(loss).shape(), 1.0), None)
    }

    /// Backward pass from `output` with an explicit upstream gradient. When
    /// `wrt` is given only paths reaching those leaves are propagated.
    pub fn backward_seeded(&self, output: Var, seed: Tensor, wrt: Option<&[Var]>) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return dim_err("backward seed shape differs from output");
        }
        let n = output.0 + 1;
        let needed: Vec<bool> = match wrt {
            None => self.nodes[..n].iter().map(|nd| nd.requires_grad).collect(),
            Some(targets) => {
                let mut need = vec![false; n];
                for t in targets {
                    if t.0 < n && self.nodes[t.0].requires_grad {
                        need[t.0] = true;
                    }
                }
                for i in 0..n {
                    if !need[i] {
                        need[i] = self.inputs(i).iter().any(|v| need[v.0]);
                    }
                }
                need
            }
        };
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &needed, &mut grads)?;
        }
        for (i, nd) in self.nodes[..n].iter().enumerate() {
            if matches!(nd.op, Op::Leaf) && needed[i] && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(nd.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumSquares(a)
            | Op::Relu(a)
            | Op::SignSte(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::ChannelScale { x, scale, .. } => vec![*x, *scale],
            Op::Conv { x, w, .. } => vec![*x, *w],
            Op::Pool { x, .. } | Op::Subsample { x, .. } => vec![*x],
            Op::Norm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::MaskedSoftmaxRows { x, .. } => vec![*x],
            Op::WeightedSum {
                inputs, weights, ..
            } => {
                let mut v = inputs.clone();
                v.push(*weights);
                v
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Kl { p, q } => vec![*p, *q],
            Op::Concat { inputs } => inputs.clone(),
            Op::Linear { x, w, b } => vec![*x, *w, *b],
        }
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Tensor,
        needed: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let want = |v: &Var| needed.get(v.0).copied().unwrap_or(false);
        let mut acc = |v: Var, t: Tensor| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    acc(*a, g.clone());
                }
                if want(b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    acc(*a, g.clone());
                }
                if want(b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if want(b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                acc(*a, Tensor::full(t.shape(), g.item() / t.len() as f64));
            }
            Op::SumSquares(a) => {
                let gv = g.item();
                acc(*a, self.value(*a).map(|x| 2.0 * gv * x));
            }
            Op::Relu(a) => {
                acc(*a, g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?);
            }
            Op::SignSte(a) => {
                acc(
                    *a,
                    g.zip_map(self.value(*a), |gv, x| if x.abs() <= 1.0 { gv } else { 0.0 })?,
                );
            }
            Op::ChannelScale { x, scale, axis } => {
                let xs = self.value(*x);
                let inner: usize = xs.shape()[axis + 1..].iter().product();
                let c = xs.shape()[*axis];
                let s = self.value(*scale).data();
                if want(x) {
                    let mut gx = g.clone();
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        *v *= s[(i / inner) % c];
                    }
                    acc(*x, gx);
                }
                if want(scale) {
                    let mut gs = vec![0.0; c];
                    for (i, (gv, xv)) in g.data().iter().zip(xs.data()).enumerate() {
                        gs[(i / inner) % c] += gv * xv;
                    }
                    acc(*scale, Tensor::new(self.value(*scale).shape().to_vec(), gs)?);
                }
            }
            Op::Conv { x, w, geom } => {
                if want(x) {
                    acc(
                        *x,
                        kernels::conv2d_backward_input(g, self.value(*w), self.value(*x).shape(), geom)?,
                    );
                }
                if want(w) {
                    acc(
                        *w,
                        kernels::conv2d_backward_weight(g, self.value(*x), self.value(*w).shape(), geom)?,
                    );
                }
            }
            Op::Pool { x, geom, aux } => {
                acc(*x, kernels::pool_backward(g, aux, self.value(*x).shape(), geom));
            }
            Op::Subsample { x, stride } => {
                let xs = self.value(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let mut gx = Tensor::zeros(xs);
                let gd = g.data();
                let out = gx.data_mut();
                for plane in 0..xs[0] * xs[1] {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            out[(plane * h + oy * stride) * w + ox * stride] += gd[(plane * ho + oy) * wo + ox];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Norm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch,
            } => {
                let (n, c, h, w) = self.value(*x).nchw()?;
                let hw = h * w;
                let gd = g.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (&gv, &xh)) in gd.iter().zip(xhat).enumerate() {
                    let ch = (i / hw) % c;
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * xh;
                }
                if want(bias) {
                    acc(*bias, Tensor::new(vec![c], sum_g.clone())?);
                }
                if want(gain) {
                    acc(*gain, Tensor::new(vec![c], sum_gx.clone())?);
                }
                if want(x) {
                    let gn = self.value(*gain).data();
                    let m = (n * hw) as f64;
                    let mut gx = vec![0.0; gd.len()];
                    for (i, o) in gx.iter_mut().enumerate() {
                        let ch = (i / hw) % c;
                        *o = if *batch {
                            gn[ch] * inv_std[ch] / m
                                * (m * gd[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                        } else {
                            gn[ch] * inv_std[ch] * gd[i]
                        };
                    }
                    acc(*x, Tensor::new(vec![n, c, h, w], gx)?);
                }
            }
            Op::MaskedSoftmaxRows { x, mask } => {
                let y = &node.value;
                let (rows, cols) = row_split(y.shape());
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let range = r * cols..(r + 1) * cols;
                    let dot: f64 = y.data()[range.clone()]
                        .iter()
                        .zip(&g.data()[range.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for k in range {
                        if mask[k] {
                            gx[k] = y.data()[k] * (g.data()[k] - dot);
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::WeightedSum {
                inputs,
                weights,
                indices,
            } => {
                let wd = self.value(*weights).data();
                let mut gw = vec![0.0; wd.len()];
                for (&inp, &k) in inputs.iter().zip(indices) {
                    if want(weights) {
                        gw[k] += g.data().iter().zip(self.value(inp).data()).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if want(&inp) {
                        let wk = wd[k];
                        acc(inp, g.map(|v| wk * v));
                    }
                }
                if want(weights) {
                    acc(*weights, Tensor::new(self.value(*weights).shape().to_vec(), gw)?);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (rows, cols) = row_split(y.shape());
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let range = r * cols..(r + 1) * cols;
                    let dot: f64 = y.data()[range.clone()]
                        .iter()
                        .zip(&g.data()[range.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for k in range {
                        gx[k] = y.data()[k] * (g.data()[k] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let (rows, cols) = row_split(y.shape());
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let range = r * cols..(r + 1) * cols;
                    let gs: f64 = g.data()[range.clone()].iter().sum();
                    for k in range {
                        gx[k] = g.data()[k] - y.data()[k].exp() * gs;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (rows, cols) = row_split(probs.shape());
                let scale = g.item() / rows as f64;
                let mut gx = vec![0.0; probs.len()];
                for r in 0..rows {
                    let p = &probs.data()[r * cols..(r + 1) * cols];
                    let t = &targets.data()[r * cols..(r + 1) * cols];
                    let live: f64 = (0..cols).filter(|&k| p[k] > LOG_FLOOR).map(|k| t[k]).sum();
                    for k in 0..cols {
                        let tk = if p[k] > LOG_FLOOR { t[k] } else { 0.0 };
                        gx[r * cols + k] = scale * (p[k] * live - tk);
                    }
                }
                acc(*logits, Tensor::new(probs.shape().to_vec(), gx)?);
            }
            Op::Kl { p, q } => {
                let (pt, qt) = (self.value(*p), self.value(*q));
                let (rows, _) = row_split(pt.shape());
                let scale = g.item() / rows as f64;
                if want(p) {
                    acc(
                        *p,
                        pt.zip_map(qt, |pv, qv| {
                            let dp = if pv > LOG_FLOOR { 1.0 } else { 0.0 };
                            scale * (pv.max(LOG_FLOOR).ln() + dp - qv.max(LOG_FLOOR).ln())
                        })?,
                    );
                }
                if want(q) {
                    acc(
                        *q,
                        pt.zip_map(qt, |pv, qv| if qv > LOG_FLOOR { -scale * pv / qv } else { 0.0 })?,
                    );
                }
            }
            Op::Concat { inputs } => {
                let (n, total, h, w) = g.nchw()?;
                let hw = h * w;
                let mut off = 0;
                for &inp in inputs {
                    let c = self.value(inp).shape()[1];
                    if want(&inp) {
                        let mut part = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * total + off) * hw;
                            part.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        acc(inp, Tensor::new(vec![n, c, h, w], part)?);
                    }
                    off += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).nchw()?;
                let hw = h * w;
                let mut gx = vec![0.0; n * c * hw];
                for p in 0..n * c {
                    let v = g.data()[p] / hw as f64;
                    gx[p * hw..(p + 1) * hw].iter_mut().for_each(|o| *o = v);
                }
                acc(*x, Tensor::new(vec![n, c, h, w], gx)?);
            }
            Op::Linear { x, w, b } => {
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let (batch, f) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let o = self.value(*w).shape()[0];
                let gd = g.data();
                if want(x) {
                    let mut gx = vec![0.0; batch * f];
                    for r in 0..batch {
                        for j in 0..o {
                            let gv = gd[r * o + j];
                            for k in 0..f {
                                gx[r * f + k] += gv * wd[j * f + k];
                            }
                        }
                    }
                    acc(*x, Tensor::new(vec![batch, f], gx)?);
                }
                if want(w) {
                    let mut gw = vec![0.0; o * f];
                    for j in 0..o {
                        for r in 0..batch {
                            let gv = gd[r * o + j];
                            for k in 0..f {
                                gw[j * f + k] += gv * xd[r * f + k];
                            }
                        }
                    }
                    acc(*w, Tensor::new(vec![o, f], gw)?);
                }
                if want(b) {
                    let mut gb = vec![0.0; o];
                    for r in 0..batch {
                        for j in 0..o {
                            gb[j] += gd[r * o + j];
                        }
                    }
                    acc(*b, Tensor::new(vec![o], gb)?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

/// Row-wise softmax along the last axis, computed with max subtraction.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (rows, cols) = row_split(t.shape());
    let mut out = t.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("softmax shape")
}

/// Mean over rows of `Σ p log(p/q)` with logs floored at [`LOG_FLOOR`].
pub fn kl_value(p: &Tensor, q: &Tensor) -> f64 {
    let (rows, _) = row_split(p.shape());
    p.data()
        .iter()
        .zip(q.data())
        .map(|(&pv, &qv)| pv * (pv.max(LOG_FLOOR).ln() - qv.max(LOG_FLOOR).ln()))
        .sum::<f64>()
        / rows as f64
}
