//! The cell search space: candidate operations, DAG edges, softmax-relaxed
//! mixed operations, architecture parameters and genotype derivation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::Tensor;

/// One candidate operation on an edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    None,
    SkipConnect,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    SepConv3x3,
    SepConv5x5,
}

impl OpKind {
    /// The full eight-operation menu in canonical order.
    pub const ALL: [OpKind; 8] = [
        OpKind::None,
        OpKind::SkipConnect,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::SkipConnect => "skip_connect",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
        }
    }

    pub fn is_zero(self) -> bool {
        self == OpKind::None
    }

    pub fn is_pool(self) -> bool {
        matches!(self, OpKind::MaxPool3x3 | OpKind::AvgPool3x3)
    }

    pub fn has_weights(self) -> bool {
        matches!(
            self,
            OpKind::DilConv3x3 | OpKind::DilConv5x5 | OpKind::SepConv3x3 | OpKind::SepConv5x5
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operation `{s}`")))
    }
}

/// Shape of the cell DAG and its operation menu.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpaceSpec {
    pub num_intermediate_nodes: usize,
    pub num_input_nodes: usize,
    pub ops: Vec<OpKind>,
    /// Drop pooling operations from the menu.
    #[serde(default)]
    pub exclude_pooling: bool,
    /// Drop the skip connection from the menu.
    #[serde(default)]
    pub exclude_skip: bool,
}

impl Default for SearchSpaceSpec {
    fn default() -> Self {
        Self {
            num_intermediate_nodes: 4,
            num_input_nodes: 2,
            ops: OpKind::ALL.to_vec(),
            exclude_pooling: false,
            exclude_skip: false,
        }
    }
}

/// A directed edge `from -> to` between node indices; inputs are `0..num_inputs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl SearchSpaceSpec {
    pub fn desk() -> Self {
        Self {
            num_intermediate_nodes: 2,
            num_input_nodes: 2,
            ops: vec![
                OpKind::None,
                OpKind::SkipConnect,
                OpKind::SepConv3x3,
                OpKind::DilConv3x3,
            ],
            exclude_pooling: false,
            exclude_skip: false,
        }
    }

    /// The effective menu after exclusions; indices into this list are the op
    /// columns of [`CellArch`].
    pub fn menu(&self) -> Vec<OpKind> {
        self.ops
            .iter()
            .copied()
            .filter(|o| !(self.exclude_pooling && o.is_pool()))
            .filter(|o| !(self.exclude_skip && *o == OpKind::SkipConnect))
            .collect()
    }

    pub fn num_ops(&self) -> usize {
        self.menu().len()
    }

    pub fn num_edges(&self) -> usize {
        (0..self.num_intermediate_nodes)
            .map(|j| self.num_input_nodes + j)
            .sum()
    }

    /// Edges grouped by destination node, in index order.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::with_capacity(self.num_edges());
        for j in 0..self.num_intermediate_nodes {
            let to = self.num_input_nodes + j;
            for from in 0..to {
                out.push(Edge { from, to });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_input_nodes != 2 {
            return Err(Error::Config("cells take exactly two input nodes".into()));
        }
        if self.num_intermediate_nodes == 0 {
            return Err(Error::Config("need at least one intermediate node".into()));
        }
        let menu = self.menu();
        if !menu.iter().any(|o| !o.is_zero()) {
            return Err(Error::Config("operation menu has no non-zero operation".into()));
        }
        let mut seen = menu.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != menu.len() {
            return Err(Error::Config("operation menu lists an operation twice".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Normal,
    Reduction,
}

/// Whether a parameter set belongs to the real-valued Parent or the 1-bit Child.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Parent,
    Child,
}

/// Architecture logits of one cell type, `E × M`, with the removal mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CellArch {
    pub alpha: Tensor,
    /// `true` where the operation is still active.
    pub mask: Vec<bool>,
}

impl CellArch {
    pub fn uniform(edges: usize, ops: usize) -> Self {
        Self {
            alpha: Tensor::zeros(&[edges, ops]),
            mask: vec![true; edges * ops],
        }
    }

    pub fn num_edges(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn num_ops(&self) -> usize {
        self.alpha.shape()[1]
    }

    pub fn active(&self, edge: usize, op: usize) -> bool {
        self.mask[edge * self.num_ops() + op]
    }

    pub fn active_count(&self, edge: usize) -> usize {
        (0..self.num_ops()).filter(|&m| self.active(edge, m)).count()
    }

    /// Softmax over the active entries of each row, masked entries zero.
    pub fn mixture_weights(&self) -> Result<Tensor> {
        let mut g = Graph::new();
        let a = g.constant(self.alpha.clone());
        let w = g.masked_softmax_rows(a, &self.mask)?;
        Ok(g.value(w).clone())
    }
}

/// Architecture parameters for both cell types.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    pub role: Role,
    pub normal: CellArch,
    pub reduction: CellArch,
}

impl ArchParams {
    pub fn uniform(spec: &SearchSpaceSpec, role: Role) -> Self {
        let (e, m) = (spec.num_edges(), spec.num_ops());
        Self {
            role,
            normal: CellArch::uniform(e, m),
            reduction: CellArch::uniform(e, m),
        }
    }

    pub fn cell(&self, t: CellType) -> &CellArch {
        match t {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduction,
        }
    }

    pub fn cell_mut(&mut self, t: CellType) -> &mut CellArch {
        match t {
            CellType::Normal => &mut self.normal,
            CellType::Reduction => &mut self.reduction,
        }
    }

    /// Length of one cell type's block in the flattened layout.
    pub fn block_len(&self) -> usize {
        self.normal.alpha.len()
    }

    /// Normal block then reduction block, each row-major `E × M`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.normal.alpha.data().to_vec();
        v.extend_from_slice(self.reduction.alpha.data());
        v
    }

    pub fn flat_mask(&self) -> Vec<bool> {
        let mut v = self.normal.mask.clone();
        v.extend_from_slice(&self.reduction.mask);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.block_len();
        if flat.len() != 2 * n {
            return dim_err(format!("flat arch of {} entries, expected {}", flat.len(), 2 * n));
        }
        self.normal.alpha.data_mut().copy_from_slice(&flat[..n]);
        self.reduction.alpha.data_mut().copy_from_slice(&flat[n..]);
        Ok(())
    }

    pub fn same_layout(&self, other: &ArchParams) -> bool {
        self.normal.alpha.shape() == other.normal.alpha.shape()
            && self.reduction.alpha.shape() == other.reduction.alpha.shape()
    }
}

/// Copies `src` into `dst` (architecture inheritance). Masks are unioned in
/// the removal sense: an op removed in either copy stays removed.
pub fn inherit(src: &ArchParams, dst: &mut ArchParams) -> Result<()> {
    if !src.same_layout(dst) {
        return dim_err("inherit between architectures of different layout");
    }
    for t in [CellType::Normal, CellType::Reduction] {
        let s = src.cell(t);
        let d = dst.cell_mut(t);
        d.alpha = s.alpha.clone();
        for (dm, &sm) in d.mask.iter_mut().zip(&s.mask) {
            *dm = *dm && sm;
        }
    }
    Ok(())
}

/// Mixed operation of one edge: `Σ_m softmax(α_e)_m · o_m(x)` over the
/// active ops. `weights` is the `E × M` mixture-weight variable and
/// `outputs` pairs each evaluated op column with its output.
pub fn mixed_op(g: &mut Graph, weights: Var, edge: usize, num_ops: usize, outputs: &[(usize, Var)]) -> Result<Var> {
    if outputs.is_empty() {
        return contract_err(format!("edge {edge} has no active operation"));
    }
    let inputs: Vec<Var> = outputs.iter().map(|(_, v)| *v).collect();
    let idx: Vec<usize> = outputs.iter().map(|(m, _)| edge * num_ops + m).collect();
    g.weighted_sum(&inputs, weights, &idx)
}

/// Forward pass of one cell given its two input states. `eval_op` produces
/// the output of op column `m` on edge `e` for the given input; masked ops
/// are never evaluated. Returns the channel concatenation of all
/// intermediate nodes.
pub fn cell_forward<F>(
    g: &mut Graph,
    spec: &SearchSpaceSpec,
    arch_logits: Var,
    mask: &[bool],
    inputs: [Var; 2],
    mut eval_op: F,
) -> Result<Var>
where
    F: FnMut(&mut Graph, usize, usize, Var) -> Result<Var>,
{
    let m = spec.num_ops();
    let weights = g.masked_softmax_rows(arch_logits, mask)?;
    let mut states = inputs.to_vec();
    let mut edge = 0;
    for j in 0..spec.num_intermediate_nodes {
        let to = spec.num_input_nodes + j;
        let mut terms = Vec::with_capacity(to);
        for from in 0..to {
            let mut outs = Vec::new();
            for op in 0..m {
                if mask[edge * m + op] {
                    outs.push((op, eval_op(g, edge, op, states[from])?));
                }
            }
            terms.push(mixed_op(g, weights, edge, m, &outs)?);
            edge += 1;
        }
        let mut node = terms[0];
        for &t in &terms[1..] {
            node = g.add(node, t)?;
        }
        states.push(node);
    }
    g.concat_channels(&states[spec.num_input_nodes..])
}

/// Summary of the search space recorded in a genotype.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSummary {
    pub num_intermediate_nodes: usize,
    pub num_input_nodes: usize,
    pub ops: Vec<OpKind>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenotypeMeta {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: u64,
}

/// Discrete architecture: for each intermediate node, two `(predecessor,
/// operation)` pairs, listed node by node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub space: SpaceSummary,
    pub normal: Vec<(usize, OpKind)>,
    pub reduction: Vec<(usize, OpKind)>,
    pub meta: GenotypeMeta,
}

impl Genotype {
    pub fn cell(&self, t: CellType) -> &[(usize, OpKind)] {
        match t {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n_in = self.space.num_input_nodes;
        for t in [CellType::Normal, CellType::Reduction] {
            let cell = self.cell(t);
            if cell.len() != 2 * self.space.num_intermediate_nodes {
                return Err(Error::Data(format!("{t:?} cell lists {} edges", cell.len())));
            }
            for (j, pair) in cell.chunks(2).enumerate() {
                let node = n_in + j;
                let (a, b) = (pair[0], pair[1]);
                if a.0 == b.0 || a.0 >= node || b.0 >= node {
                    return Err(Error::Data(format!("node {node} has invalid predecessors {} and {}", a.0, b.0)));
                }
                if a.1.is_zero() || b.1.is_zero() {
                    return Err(Error::Data(format!("node {node} retains the zero operation")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }
}

/// Two entries closer than this are treated as tied.
const TIE_EPS: f64 = 1e-12;

fn derive_cell(spec: &SearchSpaceSpec, cell: &CellArch) -> Result<Vec<(usize, OpKind)>> {
    let menu = spec.menu();
    let weights = cell.mixture_weights()?;
    let m = menu.len();
    let mut out = Vec::new();
    let mut edge = 0;
    for j in 0..spec.num_intermediate_nodes {
        let to = spec.num_input_nodes + j;
        // (strength, edge index, from, op column)
        let mut candidates: Vec<(f64, usize, usize, usize)> = Vec::new();
        for from in 0..to {
            let mut best: Option<(f64, usize)> = None;
            for op in 0..m {
                if menu[op].is_zero() || !cell.active(edge, op) {
                    continue;
                }
                let w = weights.data()[edge * m + op];
                if best.is_none_or(|(bw, _)| w > bw + TIE_EPS) {
                    best = Some((w, op));
                }
            }
            if let Some((w, op)) = best {
                candidates.push((w, edge, from, op));
            }
            edge += 1;
        }
        if candidates.len() < 2 {
            return contract_err(format!(
                "node {to} has {} incoming edges with a non-zero active operation",
                candidates.len()
            ));
        }
        candidates.sort_by(|a, b| {
            if (a.0 - b.0).abs() <= TIE_EPS {
                a.1.cmp(&b.1)
            } else {
                b.0.partial_cmp(&a.0).expect("finite mixture weights")
            }
        });
        let mut keep = [candidates[0], candidates[1]];
        keep.sort_by_key(|c| c.1);
        out.extend(keep.iter().map(|c| (c.2, menu[c.3])));
    }
    Ok(out)
}

/// Discretizes the architecture: per node, keep the two incoming edges whose
/// strongest non-zero op has the largest mixture weight. Ties go to the lower
/// edge index, then the lower op index.
pub fn derive_genotype(spec: &SearchSpaceSpec, arch: &ArchParams, meta: GenotypeMeta) -> Result<Genotype> {
    for w in arch.flatten() {
        if !w.is_finite() {
            return Err(Error::Numerical("non-finite architecture parameter".into()));
        }
    }
    Ok(Genotype {
        space: SpaceSummary {
            num_intermediate_nodes: spec.num_intermediate_nodes,
            num_input_nodes: spec.num_input_nodes,
            ops: spec.menu(),
        },
        normal: derive_cell(spec, &arch.normal)?,
        reduction: derive_cell(spec, &arch.reduction)?,
        meta,
    })
}

/// Accumulated validation scores `e(o_m)` per edge and op of one cell type.
#[derive(Clone, Debug, PartialEq)]
pub struct Scoreboard {
    pub scores: Vec<f64>,
    pub samples: Vec<u32>,
    pub num_ops: usize,
}

impl Scoreboard {
    pub fn new(edges: usize, ops: usize) -> Self {
        Self {
            scores: vec![0.0; edges * ops],
            samples: vec![0; edges * ops],
            num_ops: ops,
        }
    }

    pub fn record(&mut self, edge: usize, op: usize, score: f64) {
        self.scores[edge * self.num_ops + op] += score;
        self.samples[edge * self.num_ops + op] += 1;
    }

    pub fn reset(&mut self) {
        self.scores.iter_mut().for_each(|s| *s = 0.0);
        self.samples.iter_mut().for_each(|s| *s = 0);
    }
}

/// Masks, on every edge, the active op with the lowest accumulated score
/// (ties: lowest op index) and resets the scoreboard. Returns the removed
/// op column per edge.
pub fn remove_worst_op(cell: &mut CellArch, board: &mut Scoreboard) -> Result<Vec<usize>> {
    let (e, m) = (cell.num_edges(), cell.num_ops());
    if board.scores.len() != e * m {
        return dim_err("scoreboard layout differs from the architecture");
    }
    let mut removed = Vec::with_capacity(e);
    for edge in 0..e {
        if cell.active_count(edge) < 2 {
            return contract_err(format!("edge {edge} has fewer than two active operations"));
        }
        let mut worst: Option<(f64, usize)> = None;
        for op in 0..m {
            if !cell.active(edge, op) {
                continue;
            }
            let k = edge * m + op;
            if board.samples[k] == 0 {
                return contract_err(format!(
                    "operation {op} on edge {edge} has not been sampled this round"
                ));
            }
            if worst.is_none_or(|(s, _)| board.scores[k] < s) {
                worst = Some((board.scores[k], op));
            }
        }
        let (_, op) = worst.expect("edge has active ops");
        cell.mask[edge * m + op] = false;
        removed.push(op);
    }
    board.reset();
    Ok(removed)
}
