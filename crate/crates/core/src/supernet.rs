//! Parent and Child networks over the cell search space, and the discrete
//! network built from a derived genotype.
//!
//! Both roles share one builder. Candidate convolutions are ordered
//! activation, convolution, normalization; the Parent's activation is a ReLU
//! and the Child's is the sign function (when activations are binarized), so
//! a Child with every binarization switched off computes exactly what the
//! Parent computes for the same parameters.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Gradients, Graph, NormStats, PoolGeom, PoolKind, Var};
use crate::binarize::{binary_conv_forward, optimal_scale, reconstruction_loss, BinarizeConfig};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::space::{cell_forward, ArchParams, CellType, Genotype, OpKind, Role, SearchSpaceSpec};
use crate::tensor::Tensor;

/// Macro shape of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub init_channels: usize,
    pub num_cells: usize,
    /// Cell indices that halve the resolution; defaults to `n/3` and `2n/3`.
    #[serde(default)]
    pub reduction_cells: Option<Vec<usize>>,
    #[serde(default = "default_stem_multiplier")]
    pub stem_multiplier: usize,
}

fn default_stem_multiplier() -> usize {
    1
}

impl NetConfig {
    pub fn reductions(&self) -> Vec<usize> {
        match &self.reduction_cells {
            Some(r) => r.clone(),
            None => {
                let mut r = vec![self.num_cells / 3, 2 * self.num_cells / 3];
                r.dedup();
                r
            }
        }
    }

    pub fn cell_type(&self, index: usize) -> CellType {
        if self.reductions().contains(&index) {
            CellType::Reduction
        } else {
            CellType::Normal
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.image_size == 0 || self.init_channels == 0 || self.num_cells == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.reductions().iter().any(|&r| r >= self.num_cells) {
            return Err(Error::Config("reduction cell index out of range".into()));
        }
        Ok(())
    }
}

/// What the cells contain.
#[derive(Clone, Debug, PartialEq)]
pub enum Topology {
    /// Every edge is a mixed operation over the menu.
    Supernet(SearchSpaceSpec),
    /// Two fixed operations per node.
    Discrete(Genotype),
}

/// Where normalization statistics come from.
#[derive(Clone, Copy, Debug)]
pub enum StatsMode<'a> {
    /// Current batch statistics (training).
    Batch,
    /// The network's stored running statistics (evaluation).
    Stored,
    /// Explicit statistics, e.g. those of a training batch just seen.
    Given(&'a IndexMap<String, NormStats>),
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub stats: StatsMode<'a>,
    pub weight_grad: bool,
    pub arch_grad: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn train() -> Self {
        Self {
            stats: StatsMode::Batch,
            weight_grad: true,
            arch_grad: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            stats: StatsMode::Stored,
            weight_grad: false,
            arch_grad: false,
        }
    }
}

/// Executes a convolution whose input and weights are both binary. Gets the
/// ±1 input, the sign of the weights and the output-channel scale; returns the
/// scaled output.
pub trait BinaryConvExec {
    fn binary_conv(&mut self, input: &Tensor, weight_sign: &Tensor, scale: &[f64], geom: ConvGeom) -> Result<Tensor>;
}

/// A binarized convolution recorded during the forward pass.
#[derive(Clone, Debug)]
pub struct BinaryLayer {
    pub name: String,
    pub latent: Var,
    pub scale: Var,
}

/// Cost bookkeeping for one convolution of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvRecord {
    pub name: String,
    /// Multiply-accumulates per image.
    pub macs: u64,
    pub weights: usize,
    pub binary_weights: bool,
    /// Input was ±1 as well, so the conv is XNOR-executable.
    pub binary_input: bool,
}

/// Handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    pub params: IndexMap<String, Var>,
    /// Normal and reduction architecture leaves (supernets only).
    pub arch: Option<[Var; 2]>,
    pub binary_layers: Vec<BinaryLayer>,
    pub convs: Vec<ConvRecord>,
    /// Batch statistics computed in this pass.
    pub stats: IndexMap<String, NormStats>,
}

impl Forward {
    pub fn param_grads(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|t| (k.clone(), t.clone())))
            .collect()
    }

    /// Gradient with respect to the flattened architecture (normal block then
    /// reduction block).
    pub fn arch_grad(&self, grads: &Gradients) -> Result<Vec<f64>> {
        let [n, r] = self
            .arch
            .ok_or_else(|| Error::Contract("network has no architecture parameters".into()))?;
        let mut out = grads
            .get(n)
            .ok_or_else(|| Error::Contract("architecture was not differentiated".into()))?
            .data()
            .to_vec();
        out.extend_from_slice(grads.wrt(r).data());
        Ok(out)
    }
}

enum Store<'a> {
    Read(&'a IndexMap<String, Tensor>),
    Init(&'a mut IndexMap<String, Tensor>, &'a mut dyn rand::RngCore),
}

#[derive(Clone, Copy)]
enum Init {
    Kaiming(usize),
    Ones,
    Zeros,
}

struct Ctx<'a> {
    store: Store<'a>,
    vars: IndexMap<String, Var>,
    weight_grad: bool,
    stats: StatsMode<'a>,
    stored_stats: &'a IndexMap<String, NormStats>,
    stats_out: IndexMap<String, NormStats>,
    bin: BinarizeConfig,
    binary_layers: Vec<BinaryLayer>,
    convs: Vec<ConvRecord>,
    hook: Option<&'a mut dyn BinaryConvExec>,
}

impl<'a> Ctx<'a> {
    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        match &mut self.store {
            Store::Read(p) => {
                let t = p
                    .get(name)
                    .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
                if t.shape() != shape {
                    return dim_err(format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape()));
                }
                Ok(t.clone())
            }
            Store::Init(p, rng) => {
                if let Some(t) = p.get(name) {
                    return Ok(t.clone());
                }
                let t = match init {
                    Init::Kaiming(fan_in) => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
                    Init::Ones => Tensor::ones(shape),
                    Init::Zeros => Tensor::zeros(shape),
                };
                p.insert(name.to_string(), t.clone());
                Ok(t)
            }
        }
    }

    fn param(&mut self, g: &mut Graph, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.tensor(name, shape, init)?;
        let v = g.leaf(t, self.weight_grad);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn act(&mut self, g: &mut Graph, x: Var, binary: bool) -> Var {
        if binary {
            g.sign_ste(x, self.bin.sign)
        } else {
            g.relu(x)
        }
    }

    /// Convolution `cin -> cout`; `binary` marks it as a searched-style conv
    /// whose weights the Child binarizes. `input_binary` says the input is
    /// already ±1.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        g: &mut Graph,
        name: &str,
        x: Var,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        binary: bool,
        input_binary: bool,
    ) -> Result<Var> {
        let per = cin / geom.groups;
        let w = self.param(g, name, &[cout, per, k, k], Init::Kaiming(per * k * k))?;
        let (_, _, h, wd) = g.value(x).nchw()?;
        let area = geom.out_len(h, k)? * geom.out_len(wd, k)?;
        let binary_weights = binary && self.bin.weights;
        self.convs.push(ConvRecord {
            name: name.to_string(),
            macs: (cout * per * k * k * area) as u64,
            weights: cout * per * k * k,
            binary_weights,
            binary_input: binary_weights && input_binary,
        });
        if !binary_weights {
            return g.conv2d(x, w, geom);
        }
        let scale = if self.bin.learn_scale {
            let init = optimal_scale(g.value(w));
            let beta_name = format!("{name}.beta");
            if let Store::Init(p, _) = &mut self.store {
                p.entry(beta_name.clone()).or_insert_with(|| Tensor::from_vec(init));
            }
            self.param(g, &beta_name, &[cout], Init::Ones)?
        } else {
            let s = optimal_scale(g.value(w));
            g.constant(Tensor::from_vec(s))
        };
        self.binary_layers.push(BinaryLayer {
            name: name.to_string(),
            latent: w,
            scale,
        });
        if input_binary {
            if let Some(hook) = self.hook.as_mut() {
                let sign = self.bin.sign;
                let wsign = g.value(w).map(|v| sign.sign(v));
                let out = hook.binary_conv(g.value(x), &wsign, g.value(scale).data(), geom)?;
                return Ok(g.constant(out));
            }
        }
        binary_conv_forward(g, x, w, scale, false, geom, self.bin.sign)
    }

    fn norm(&mut self, g: &mut Graph, name: &str, x: Var, c: usize) -> Result<Var> {
        let gain = self.param(g, &format!("{name}.gain"), &[c], Init::Ones)?;
        let bias = self.param(g, &format!("{name}.bias"), &[c], Init::Zeros)?;
        let given = match self.stats {
            StatsMode::Batch => None,
            StatsMode::Stored => Some(self.stored_stats),
            StatsMode::Given(s) => Some(s),
        };
        let stats = match given {
            None => None,
            Some(map) => Some(
                map.get(name)
                    .ok_or_else(|| Error::Contract(format!("no normalization statistics for `{name}`")))?,
            ),
        };
        let (y, st) = g.affine_norm(x, gain, bias, stats)?;
        if stats.is_none() {
            self.stats_out.insert(name.to_string(), st);
        }
        Ok(y)
    }

    fn op(&mut self, g: &mut Graph, prefix: &str, kind: OpKind, x: Var, c: usize, stride: usize) -> Result<Var> {
        match kind {
            OpKind::None => {
                let (n, ch, h, w) = g.value(x).nchw()?;
                let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
                Ok(g.constant(Tensor::zeros(&[n, ch, ho, wo])))
            }
            OpKind::SkipConnect => {
                if stride == 1 {
                    Ok(x)
                } else {
                    g.subsample(x, stride)
                }
            }
            OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => {
                let pk = if kind == OpKind::MaxPool3x3 { PoolKind::Max } else { PoolKind::Avg };
                g.pool(
                    x,
                    PoolGeom {
                        kind: pk,
                        window: 3,
                        stride,
                        padding: 1,
                    },
                )
            }
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
                let first_bin = self.bin.activations && self.bin.separable_first_activations;
                let a = self.act(g, x, first_bin);
                let dw = self.conv(
                    g,
                    &format!("{prefix}.dw"),
                    a,
                    c,
                    c,
                    k,
                    ConvGeom::new(stride, k / 2).grouped(c),
                    true,
                    first_bin,
                )?;
                let mid = if self.bin.activations { g.sign_ste(dw, self.bin.sign) } else { dw };
                let pw = self.conv(
                    g,
                    &format!("{prefix}.pw"),
                    mid,
                    c,
                    c,
                    1,
                    ConvGeom::new(1, 0),
                    true,
                    self.bin.activations,
                )?;
                self.norm(g, &format!("{prefix}.norm"), pw, c)
            }
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
                let a = self.act(g, x, self.bin.activations);
                let y = self.conv(
                    g,
                    &format!("{prefix}.conv"),
                    a,
                    c,
                    c,
                    k,
                    ConvGeom::new(stride, k - 1).dilated(2),
                    true,
                    self.bin.activations,
                )?;
                self.norm(g, &format!("{prefix}.norm"), y, c)
            }
        }
    }

    fn preprocess(&mut self, g: &mut Graph, prefix: &str, x: Var, cin: usize, cout: usize, stride: usize) -> Result<Var> {
        let binary_in = self.bin.activations && self.bin.preprocess_activations;
        let a = self.act(g, x, binary_in);
        let y = self.conv(
            g,
            &format!("{prefix}.conv"),
            a,
            cin,
            cout,
            1,
            ConvGeom::new(stride, 0),
            true,
            binary_in,
        )?;
        self.norm(g, &format!("{prefix}.norm"), y, cout)
    }
}

/// A Parent or Child network with its parameters and running statistics.
#[derive(Clone, Debug)]
pub struct Network {
    pub net: NetConfig,
    pub topology: Topology,
    pub role: Role,
    pub binarize: BinarizeConfig,
    pub params: IndexMap<String, Tensor>,
    pub stats: IndexMap<String, NormStats>,
}

impl Network {
    /// Builds the network and initializes its parameters from `rng`.
    pub fn new<R: rand::RngCore>(
        net: NetConfig,
        topology: Topology,
        role: Role,
        binarize: BinarizeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        net.validate()?;
        match &topology {
            Topology::Supernet(spec) => spec.validate()?,
            Topology::Discrete(gt) => gt.validate()?,
        }
        let mut me = Self {
            net,
            topology,
            role,
            binarize,
            params: IndexMap::new(),
            stats: IndexMap::new(),
        };
        let mut params = IndexMap::new();
        let dummy = Tensor::zeros(&[1, me.net.in_channels, me.net.image_size, me.net.image_size]);
        let arch = me.uniform_arch();
        let mut g = Graph::new();
        let fwd = me.build(
            &mut g,
            &dummy,
            arch.as_ref(),
            ForwardOptions::train(),
            Store::Init(&mut params, rng),
            None,
        )?;
        me.params = params;
        me.stats = fwd.stats;
        Ok(me)
    }

    pub fn spec(&self) -> Option<&SearchSpaceSpec> {
        match &self.topology {
            Topology::Supernet(s) => Some(s),
            Topology::Discrete(_) => None,
        }
    }

    pub fn uniform_arch(&self) -> Option<ArchParams> {
        self.spec().map(|s| ArchParams::uniform(s, self.role))
    }

    /// The binarization actually applied: always off for the Parent.
    pub fn effective_binarize(&self) -> BinarizeConfig {
        match self.role {
            Role::Parent => BinarizeConfig {
                sign: self.binarize.sign,
                ..BinarizeConfig::disabled()
            },
            Role::Child => self.binarize.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records the forward pass on `g`.
    pub fn forward(&self, g: &mut Graph, x: &Tensor, arch: Option<&ArchParams>, opts: ForwardOptions) -> Result<Forward> {
        self.build(g, x, arch, opts, Store::Read(&self.params), None)
    }

    /// Evaluation forward with the binary convolutions routed through `exec`.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        x: &Tensor,
        arch: Option<&ArchParams>,
        opts: ForwardOptions,
        exec: &mut dyn BinaryConvExec,
    ) -> Result<Forward> {
        self.build(g, x, arch, opts, Store::Read(&self.params), Some(exec))
    }

    /// Logits of an evaluation pass, without gradients.
    pub fn predict(&self, x: &Tensor, arch: Option<&ArchParams>) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, x, arch, ForwardOptions::eval())?;
        Ok(g.value(f.logits).clone())
    }

    /// Blends freshly computed batch statistics into the running ones.
    pub fn absorb_stats(&mut self, batch: &IndexMap<String, NormStats>, momentum: f64) {
        for (k, s) in batch {
            match self.stats.get_mut(k) {
                Some(r) => {
                    for (a, b) in r.mean.iter_mut().zip(&s.mean) {
                        *a = (1.0 - momentum) * *a + momentum * b;
                    }
                    for (a, b) in r.var.iter_mut().zip(&s.var) {
                        *a = (1.0 - momentum) * *a + momentum * b;
                    }
                }
                None => {
                    self.stats.insert(k.clone(), s.clone());
                }
            }
        }
    }

    fn build<'a>(
        &'a self,
        g: &mut Graph,
        x: &Tensor,
        arch: Option<&ArchParams>,
        opts: ForwardOptions<'a>,
        store: Store<'a>,
        hook: Option<&'a mut dyn BinaryConvExec>,
    ) -> Result<Forward> {
        let (_, cin, h, w) = x.nchw()?;
        if cin != self.net.in_channels || h != self.net.image_size || w != self.net.image_size {
            return dim_err(format!(
                "input {:?} does not match the network's {}x{}x{}",
                x.shape(),
                self.net.in_channels,
                self.net.image_size,
                self.net.image_size
            ));
        }
        let mut ctx = Ctx {
            store,
            vars: IndexMap::new(),
            weight_grad: opts.weight_grad,
            stats: opts.stats,
            stored_stats: &self.stats,
            stats_out: IndexMap::new(),
            bin: self.effective_binarize(),
            binary_layers: Vec::new(),
            convs: Vec::new(),
            hook,
        };
        let arch_vars = match (&self.topology, arch) {
            (Topology::Supernet(spec), Some(a)) => {
                let shape = [spec.num_edges(), spec.num_ops()];
                if a.normal.alpha.shape() != shape || a.reduction.alpha.shape() != shape {
                    return dim_err("architecture parameters do not match the search space");
                }
                Some([
                    g.leaf(a.normal.alpha.clone(), opts.arch_grad),
                    g.leaf(a.reduction.alpha.clone(), opts.arch_grad),
                ])
            }
            (Topology::Supernet(_), None) => return contract_err("supernet forward needs architecture parameters"),
            (Topology::Discrete(_), _) => None,
        };

        let net = &self.net;
        let c_stem = net.stem_multiplier * net.init_channels;
        let input = g.constant(x.clone());
        let stem = ctx.conv(g, "stem.conv", input, cin, c_stem, 3, ConvGeom::new(1, 1), false, false)?;
        let stem = ctx.norm(g, "stem.norm", stem, c_stem)?;

        let reductions = net.reductions();
        let (mut s0, mut s1) = (stem, stem);
        let (mut c_pp, mut c_p, mut c_cur) = (c_stem, c_stem, net.init_channels);
        let mut reduction_prev = false;
        for i in 0..net.num_cells {
            let reduction = reductions.contains(&i);
            if reduction {
                c_cur *= 2;
            }
            let stride0 = if reduction_prev { 2 } else { 1 };
            let p0 = ctx.preprocess(g, &format!("cell{i}.pre0"), s0, c_pp, c_cur, stride0)?;
            let p1 = ctx.preprocess(g, &format!("cell{i}.pre1"), s1, c_p, c_cur, 1)?;
            let cell_stride = |from: usize| if reduction && from < 2 { 2 } else { 1 };
            let (out, nodes) = match &self.topology {
                Topology::Supernet(spec) => {
                    let a = arch.expect("checked above");
                    let (av, cell_arch) = if reduction {
                        (arch_vars.expect("supernet")[1], &a.reduction)
                    } else {
                        (arch_vars.expect("supernet")[0], &a.normal)
                    };
                    let menu = spec.menu();
                    let edges = spec.edges();
                    let out = cell_forward(g, spec, av, &cell_arch.mask, [p0, p1], |g, e, m, inp| {
                        let prefix = format!("cell{i}.e{e}.{}", menu[m]);
                        ctx.op(g, &prefix, menu[m], inp, c_cur, cell_stride(edges[e].from))
                    })?;
                    (out, spec.num_intermediate_nodes)
                }
                Topology::Discrete(gt) => {
                    let cell = gt.cell(if reduction { CellType::Reduction } else { CellType::Normal });
                    let mut states = vec![p0, p1];
                    for (j, pair) in cell.chunks(2).enumerate() {
                        let mut terms = Vec::with_capacity(2);
                        for (k, &(pred, op)) in pair.iter().enumerate() {
                            let prefix = format!("cell{i}.n{j}.{k}.{op}");
                            terms.push(ctx.op(g, &prefix, op, states[pred], c_cur, cell_stride(pred))?);
                        }
                        let node = g.add(terms[0], terms[1])?;
                        states.push(node);
                    }
                    let n = states.len() - 2;
                    (g.concat_channels(&states[2..])?, n)
                }
            };
            s0 = s1;
            s1 = out;
            c_pp = c_p;
            c_p = nodes * c_cur;
            reduction_prev = reduction;
        }
        let pooled = g.global_avg_pool(s1)?;
        let k = net.num_classes;
        let cw = ctx.param(g, "classifier.weight", &[k, c_p], Init::Kaiming(c_p))?;
        let cb = ctx.param(g, "classifier.bias", &[k], Init::Zeros)?;
        let logits = g.linear(pooled, cw, cb)?;
        Ok(Forward {
            logits,
            params: ctx.vars,
            arch: arch_vars,
            binary_layers: ctx.binary_layers,
            convs: ctx.convs,
            stats: ctx.stats_out,
        })
    }

    /// Sum of squared weights of every weighted op, `E × M` per cell type.
    /// Binarized Child weights are measured after reconstruction (`β∘b`).
    /// Weightless ops use the norm of their equivalent fixed kernel: the
    /// identity counts `C`, a 3×3 pool `C/9` and the zero op nothing.
    pub fn op_weight_norms(&self, cell_type: CellType) -> Result<Vec<f64>> {
        let spec = self
            .spec()
            .ok_or_else(|| Error::Contract("operation norms need a supernet".into()))?;
        let menu = spec.menu();
        let (e_count, m_count) = (spec.num_edges(), menu.len());
        let mut out = vec![0.0; e_count * m_count];
        let bin = self.effective_binarize();
        let reductions = self.net.reductions();
        let mut c_cur = self.net.init_channels;
        for i in 0..self.net.num_cells {
            let reduction = reductions.contains(&i);
            if reduction {
                c_cur *= 2;
            }
            if self.net.cell_type(i) != cell_type {
                continue;
            }
            for e in 0..e_count {
                for (m, op) in menu.iter().enumerate() {
                    let contrib = match op {
                        OpKind::None => 0.0,
                        OpKind::SkipConnect => c_cur as f64,
                        OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => c_cur as f64 / 9.0,
                        _ => {
                            let prefix = format!("cell{i}.e{e}.{op}.");
                            self.params
                                .iter()
                                .filter(|(k, _)| k.starts_with(&prefix))
                                .filter(|(k, _)| k.ends_with(".dw") || k.ends_with(".pw") || k.ends_with(".conv"))
                                .map(|(k, t)| {
                                    if bin.weights {
                                        let beta = match self.params.get(&format!("{k}.beta")) {
                                            Some(b) if bin.learn_scale => b.data().to_vec(),
                                            _ => optimal_scale(t),
                                        };
                                        let per = (t.len() / beta.len()) as f64;
                                        beta.iter().map(|b| b * b * per).sum::<f64>()
                                    } else {
                                        t.sum_sq()
                                    }
                                })
                                .sum()
                        }
                    };
                    out[e * m_count + m] += contrib;
                }
            }
        }
        Ok(out)
    }
}

/// `Σ ‖ŵ − β∘sign(ŵ)‖²` over the binarized convolutions of a forward pass.
pub fn reconstruction_term(g: &mut Graph, fwd: &Forward, bin: &BinarizeConfig) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for layer in &fwd.binary_layers {
        let l = reconstruction_loss(g, layer.latent, layer.scale, bin.sign)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total)
}

/// One-hot encoding of integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!("label {l} outside {classes} classes")));
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}

/// Fraction of rows whose arg-max matches the label (ties to the lower class).
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Copies every parameter of `src` that `dst` also has with the same shape.
pub fn copy_matching_params(src: &Network, dst: &mut Network) -> usize {
    let mut n = 0;
    for (k, t) in dst.params.iter_mut() {
        if let Some(s) = src.params.get(k) {
            if s.shape() == t.shape() {
                *t = s.clone();
                n += 1;
            }
        }
    }
    for (k, s) in &src.stats {
        if dst.stats.contains_key(k) {
            dst.stats.insert(k.clone(), s.clone());
        }
    }
    n
}

/// Draws a random tensor of the network's input shape; used by tests and
/// examples that need a quick batch.
pub fn random_input<R: Rng + ?Sized>(net: &NetConfig, batch: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[batch, net.in_channels, net.image_size, net.image_size], 1.0, rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{compare, numeric_gradient, FD_STEP};
    use crate::space::GenotypeMeta;

    fn tiny_net() -> NetConfig {
        NetConfig {
            in_channels: 2,
            image_size: 6,
            num_classes: 3,
            init_channels: 2,
            num_cells: 3,
            reduction_cells: None,
            stem_multiplier: 1,
        }
    }

    fn full_menu_spec() -> SearchSpaceSpec {
        SearchSpaceSpec {
            num_intermediate_nodes: 2,
            ..SearchSpaceSpec::default()
        }
    }

    #[test]
    fn reductions_default_to_thirds() {
        let mut n = tiny_net();
        n.num_cells = 6;
        assert_eq!(n.reductions(), vec![2, 4]);
        n.num_cells = 4;
        assert_eq!(n.reductions(), vec![1, 2]);
    }

    #[test]
    fn supernet_logit_shape_with_full_menu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for role in [Role::Parent, Role::Child] {
            let net = Network::new(tiny_net(), Topology::Supernet(full_menu_spec()), role, BinarizeConfig::default(), &mut rng).unwrap();
            let x = random_input(&net.net, 4, &mut rng);
            let mut g = Graph::new();
            let arch = net.uniform_arch();
            let f = net.forward(&mut g, &x, arch.as_ref(), ForwardOptions::train()).unwrap();
            assert_eq!(g.value(f.logits).shape(), &[4, 3]);
            assert!(g.value(f.logits).data().iter().all(|v| v.is_finite()));
            if role == Role::Child {
                assert!(!f.binary_layers.is_empty());
            } else {
                assert!(f.binary_layers.is_empty());
            }
        }
    }

    #[test]
    fn child_without_binarization_equals_parent_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = full_menu_spec();
        let parent = Network::new(tiny_net(), Topology::Supernet(spec.clone()), Role::Parent, BinarizeConfig::default(), &mut rng).unwrap();
        let mut child = Network::new(tiny_net(), Topology::Supernet(spec.clone()), Role::Child, BinarizeConfig::disabled(), &mut rng).unwrap();
        assert_eq!(copy_matching_params(&parent, &mut child), parent.params.len());
        let x = random_input(&parent.net, 3, &mut rng);
        let mut arch = ArchParams::uniform(&spec, Role::Parent);
        for (i, v) in arch.normal.alpha.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let mut g1 = Graph::new();
        let f1 = parent.forward(&mut g1, &x, Some(&arch), ForwardOptions::train()).unwrap();
        let mut g2 = Graph::new();
        let f2 = child.forward(&mut g2, &x, Some(&arch), ForwardOptions::train()).unwrap();
        assert_eq!(g1.value(f1.logits).data(), g2.value(f2.logits).data());
    }

    #[test]
    fn stored_stats_match_batch_stats_for_same_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = SearchSpaceSpec::desk();
        let mut net = Network::new(tiny_net(), Topology::Supernet(spec), Role::Parent, BinarizeConfig::default(), &mut rng).unwrap();
        let x = random_input(&net.net, 5, &mut rng);
        let arch = net.uniform_arch();
        let mut g = Graph::new();
        let f = net.forward(&mut g, &x, arch.as_ref(), ForwardOptions::train()).unwrap();
        let train_logits = g.value(f.logits).clone();
        let stats = f.stats.clone();
        net.stats = IndexMap::new();
        net.absorb_stats(&stats, 0.1);
        let eval_logits = net.predict(&x, arch.as_ref()).unwrap();
        assert!(train_logits.max_abs_diff(&eval_logits) < 1e-12);
    }

    #[test]
    fn parent_arch_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = SearchSpaceSpec::desk();
        let net = Network::new(tiny_net(), Topology::Supernet(spec.clone()), Role::Parent, BinarizeConfig::default(), &mut rng).unwrap();
        let x = random_input(&net.net, 4, &mut rng);
        let y = one_hot(&[0, 1, 2, 1], 3).unwrap();
        let mut arch = ArchParams::uniform(&spec, Role::Parent);
        let flat: Vec<f64> = (0..2 * arch.block_len()).map(|i| 0.3 * ((i * 7 % 5) as f64 - 2.0)).collect();
        arch.set_flat(&flat).unwrap();

        let loss_at = |a: &ArchParams| {
            let mut g = Graph::new();
            let f = net.forward(&mut g, &x, Some(a), ForwardOptions::train()).unwrap();
            let l = g.cross_entropy(f.logits, &y).unwrap();
            (g, f, l)
        };
        let (g, f, l) = loss_at(&arch);
        let grads = g.backward(l).unwrap();
        let analytic = Tensor::from_vec(f.arch_grad(&grads).unwrap());
        let numeric = numeric_gradient(
            |t| {
                let mut a = arch.clone();
                a.set_flat(t.data()).unwrap();
                let (g, _, l) = loss_at(&a);
                g.value(l).item()
            },
            &Tensor::from_vec(flat),
            FD_STEP,
        );
        let check = compare(&analytic, &numeric);
        assert!(check.passed(1e-4), "{check:?}");
    }

    #[test]
    fn reconstruction_gradient_is_twice_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::new(tiny_net(), Topology::Supernet(SearchSpaceSpec::desk()), Role::Child, BinarizeConfig::default(), &mut rng).unwrap();
        let x = random_input(&net.net, 2, &mut rng);
        let mut g = Graph::new();
        let f = net.forward(&mut g, &x, net.uniform_arch().as_ref(), ForwardOptions::train()).unwrap();
        let lr = reconstruction_term(&mut g, &f, &net.binarize).unwrap().unwrap();
        let grads = g.backward(lr).unwrap();
        for layer in &f.binary_layers {
            let w = g.value(layer.latent);
            let beta = optimal_scale(w);
            let per = w.len() / beta.len();
            let gw = grads.wrt(layer.latent);
            for (i, (&wi, &gi)) in w.data().iter().zip(gw.data()).enumerate() {
                let b = if wi > 0.0 { 1.0 } else { -1.0 };
                assert!((gi - 2.0 * (wi - beta[i / per] * b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discrete_network_runs_and_counts_fewer_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = full_menu_spec();
        let sup = Network::new(tiny_net(), Topology::Supernet(spec.clone()), Role::Child, BinarizeConfig::default(), &mut rng).unwrap();
        let arch = ArchParams::uniform(&spec, Role::Child);
        let meta = GenotypeMeta {
            config_hash: "t".into(),
            seed: 0,
            epoch: 0,
        };
        let gt = crate::space::derive_genotype(&spec, &arch, meta).unwrap();
        let mut gt2 = gt.clone();
        for (_, op) in gt2.normal.iter_mut().chain(gt2.reduction.iter_mut()) {
            *op = OpKind::SepConv3x3;
        }
        let disc = Network::new(tiny_net(), Topology::Discrete(gt2), Role::Child, BinarizeConfig::default(), &mut rng).unwrap();
        assert!(disc.num_params() < sup.num_params());
        let x = random_input(&disc.net, 2, &mut rng);
        assert_eq!(disc.predict(&x, None).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn op_norms_for_weightless_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = full_menu_spec();
        let net = Network::new(tiny_net(), Topology::Supernet(spec.clone()), Role::Parent, BinarizeConfig::default(), &mut rng).unwrap();
        let menu = spec.menu();
        let r = net.op_weight_norms(CellType::Normal).unwrap();
        // one normal cell (index 0) with C = 2
        let m = menu.len();
        let at = |op: OpKind| r[menu.iter().position(|&o| o == op).unwrap()];
        assert_eq!(at(OpKind::None), 0.0);
        assert_eq!(at(OpKind::SkipConnect), 2.0);
        assert!((at(OpKind::AvgPool3x3) - 2.0 / 9.0).abs() < 1e-15);
        assert!(at(OpKind::SepConv3x3) > 0.0);
        assert_eq!(r.len(), spec.num_edges() * m);
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::new(tiny_net(), Topology::Supernet(SearchSpaceSpec::desk()), Role::Parent, BinarizeConfig::default(), &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 6, 6]);
        assert!(matches!(net.predict(&x, net.uniform_arch().as_ref()), Err(Error::Dimension(_))));
    }
}
