//! The alternating Parent/Child search loop.
//!
//! Epochs are grouped into rounds of `parent_epochs_per_round` Parent epochs
//! followed by `child_epochs_per_round` Child epochs. When the Child phase
//! begins, the Parent's tangent is snapshotted on the search-validation split
//! and `α̂ ← α`; when it ends, `α ← α̂`. The loop state is checkpointed at epoch
//! boundaries and can be resumed bit-exactly.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, NormStats};
use crate::config::{substream, ConfigHash, RunConfig};
use crate::data::{Batch, Dataset, Splits};
use crate::decoupled::{cosine_lr, DecoupledOptimizer, StepReport, WeightOptimizer};
use crate::error::{Error, Result};
use crate::io::{records_to_csv, Checkpoint, CheckpointKind, EpochRecord, RunSummary, StepRecord, EPOCH_COLUMNS, STEP_COLUMNS};
use crate::space::{derive_genotype, inherit, remove_worst_op, ArchParams, CellArch, CellType, Genotype, GenotypeMeta, Role, Scoreboard};
use crate::supernet::{accuracy, one_hot, ForwardOptions, Network, Topology};
use crate::tangent::{child_step, compute_tangent, TangentSnapshot};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Parent,
    Child,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Parent => "parent",
            Phase::Child => "child",
        }
    }
}

/// The phase that epoch `e` belongs to.
pub fn phase_of(cfg: &RunConfig, e: u64) -> Phase {
    let s = &cfg.search;
    if e % (s.parent_epochs_per_round + s.child_epochs_per_round) < s.parent_epochs_per_round {
        Phase::Parent
    } else {
        Phase::Child
    }
}

pub fn round_of(cfg: &RunConfig, e: u64) -> u64 {
    e / (cfg.search.parent_epochs_per_round + cfg.search.child_epochs_per_round)
}

/// Accuracy of an evaluation pass over `ds`.
pub fn evaluate(net: &Network, arch: Option<&ArchParams>, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0.0;
    for (x, y) in ds.ordered_batches(batch_size) {
        let logits = net.predict(&x, arch)?;
        hits += accuracy(&logits, &y) * y.len() as f64;
    }
    Ok(hits / ds.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Meta {
    epoch: u64,
    global_step: u64,
    weight_steps: [u64; 2],
    finalized: bool,
    snapshot_epoch: Option<u64>,
    removal_log: Vec<Vec<usize>>,
    history: Vec<EpochRecord>,
    steps: Vec<StepRecord>,
}

/// Complete loop state.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub parent: Network,
    pub child: Network,
    pub alpha: ArchParams,
    pub alpha_hat: ArchParams,
    pub snapshot: Option<TangentSnapshot>,
    pub arch_opt: [DecoupledOptimizer; 2],
    pub weight_opt: [WeightOptimizer; 2],
    pub boards: [Scoreboard; 2],
    /// Epochs consumed.
    pub epoch: u64,
    pub global_step: u64,
    pub weight_steps: [u64; 2],
    pub finalized: bool,
    /// Removed op column per edge, one list per removal event.
    pub removal_log: Vec<Vec<usize>>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

fn arch_optimizer(cfg: &RunConfig, arch: &ArchParams) -> DecoupledOptimizer {
    DecoupledOptimizer::new(
        cfg.search.arch_opt.clone(),
        cfg.search.backtrack.clone(),
        2 * arch.block_len(),
        arch.normal.num_ops(),
    )
}

impl SearchState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let topo = Topology::Supernet(cfg.space.clone());
        let parent = Network::new(
            cfg.net.clone(),
            topo.clone(),
            Role::Parent,
            cfg.binarize.clone(),
            &mut substream(cfg.seed, "init/parent"),
        )?;
        let child = Network::new(
            cfg.net.clone(),
            topo,
            Role::Child,
            cfg.binarize.clone(),
            &mut substream(cfg.seed, "init/child"),
        )?;
        let alpha = ArchParams::uniform(&cfg.space, Role::Parent);
        let alpha_hat = ArchParams::uniform(&cfg.space, Role::Child);
        let (e, m) = (cfg.space.num_edges(), cfg.space.num_ops());
        Ok(Self {
            arch_opt: [arch_optimizer(cfg, &alpha), arch_optimizer(cfg, &alpha_hat)],
            weight_opt: [
                WeightOptimizer::new(cfg.search.weight_opt.clone()),
                WeightOptimizer::new(cfg.search.weight_opt.clone()),
            ],
            boards: [Scoreboard::new(e, m), Scoreboard::new(e, m)],
            parent,
            child,
            alpha,
            alpha_hat,
            snapshot: None,
            epoch: 0,
            global_step: 0,
            weight_steps: [0, 0],
            finalized: false,
            removal_log: Vec::new(),
            history: Vec::new(),
            steps: Vec::new(),
        })
    }

    pub fn genotype(&self, cfg: &RunConfig) -> Result<Genotype> {
        derive_genotype(
            &cfg.space,
            &self.alpha_hat,
            GenotypeMeta {
                config_hash: cfg.hash().hex(),
                seed: cfg.seed,
                epoch: self.epoch,
            },
        )
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(cfg.hash(), self.epoch, CheckpointKind::Search);
        c.put_json("config", cfg)?;
        for (role, net) in [("parent", &self.parent), ("child", &self.child)] {
            put_network(&mut c, role, net);
        }
        for (name, a) in [("alpha", &self.alpha), ("alpha_hat", &self.alpha_hat)] {
            c.put_tensor(format!("arch.{name}.normal"), a.normal.alpha.clone());
            c.put_tensor(format!("arch.{name}.reduction"), a.reduction.alpha.clone());
            c.put_tensor(format!("arch.{name}.mask"), mask_tensor(&a.flat_mask()));
        }
        if let Some(s) = &self.snapshot {
            c.put_tensor("tangent.grad", Tensor::from_vec(s.grad_parent.clone()));
        }
        for (i, role) in ["parent", "child"].iter().enumerate() {
            for (k, t) in self.arch_opt[i].export_state() {
                c.put_tensor(format!("aopt.{role}.{k}"), t);
            }
            for (k, t) in self.weight_opt[i].export_state() {
                c.put_tensor(format!("wopt.{role}.{k}"), t);
            }
        }
        for (i, b) in self.boards.iter().enumerate() {
            c.put_tensor(format!("board.{i}.scores"), Tensor::from_vec(b.scores.clone()));
            c.put_tensor(format!("board.{i}.samples"), Tensor::from_vec(b.samples.iter().map(|&s| s as f64).collect()));
        }
        c.put_json(
            "meta",
            &Meta {
                epoch: self.epoch,
                global_step: self.global_step,
                weight_steps: self.weight_steps,
                finalized: self.finalized,
                snapshot_epoch: self.snapshot.as_ref().map(|s| s.epoch),
                removal_log: self.removal_log.clone(),
                history: self.history.clone(),
                steps: self.steps.clone(),
            },
        )?;
        Ok(c)
    }

    pub fn from_checkpoint(cfg: &RunConfig, c: &Checkpoint) -> Result<Self> {
        c.expect_hash(cfg.hash())?;
        if c.kind != CheckpointKind::Search {
            return Err(Error::Data("not a search checkpoint".into()));
        }
        let mut s = Self::new(cfg)?;
        take_network(c, "parent", &mut s.parent)?;
        take_network(c, "child", &mut s.child)?;
        for (name, a) in [("alpha", &mut s.alpha), ("alpha_hat", &mut s.alpha_hat)] {
            a.normal.alpha = c.tensor(&format!("arch.{name}.normal"))?.clone();
            a.reduction.alpha = c.tensor(&format!("arch.{name}.reduction"))?.clone();
            let mask: Vec<bool> = c.tensor(&format!("arch.{name}.mask"))?.data().iter().map(|&v| v != 0.0).collect();
            let n = a.block_len();
            if mask.len() != 2 * n {
                return Err(Error::Data("architecture mask has the wrong length".into()));
            }
            a.normal.mask = mask[..n].to_vec();
            a.reduction.mask = mask[n..].to_vec();
        }
        let meta: Meta = c.json("meta")?;
        if let Ok(t) = c.tensor("tangent.grad") {
            s.snapshot = Some(TangentSnapshot::new(t.data().to_vec(), meta.snapshot_epoch.unwrap_or(0))?);
        }
        for (i, role) in ["parent", "child"].iter().enumerate() {
            s.arch_opt[i].import_state(&c.tensors_with_prefix(&format!("aopt.{role}.")))?;
            s.weight_opt[i].import_state(&c.tensors_with_prefix(&format!("wopt.{role}.")))?;
        }
        for (i, b) in s.boards.iter_mut().enumerate() {
            b.scores = c.tensor(&format!("board.{i}.scores"))?.data().to_vec();
            b.samples = c.tensor(&format!("board.{i}.samples"))?.data().iter().map(|&v| v as u32).collect();
        }
        s.epoch = meta.epoch;
        s.global_step = meta.global_step;
        s.weight_steps = meta.weight_steps;
        s.finalized = meta.finalized;
        s.removal_log = meta.removal_log;
        s.history = meta.history;
        s.steps = meta.steps;
        Ok(s)
    }
}

fn mask_tensor(m: &[bool]) -> Tensor {
    Tensor::from_vec(m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
}

/// Writes a network's parameters and statistics under `role.`.
pub fn put_network(c: &mut Checkpoint, role: &str, net: &Network) {
    for (k, t) in &net.params {
        c.put_tensor(format!("{role}.param.{k}"), t.clone());
    }
    for (k, s) in &net.stats {
        c.put_tensor(format!("{role}.stats.{k}.mean"), Tensor::from_vec(s.mean.clone()));
        c.put_tensor(format!("{role}.stats.{k}.var"), Tensor::from_vec(s.var.clone()));
    }
}

/// Restores what [`put_network`] wrote; every parameter must be present
/// with its current shape.
pub fn take_network(c: &Checkpoint, role: &str, net: &mut Network) -> Result<()> {
    for (k, t) in net.params.iter_mut() {
        let saved = c.tensor(&format!("{role}.param.{k}"))?;
        if saved.shape() != t.shape() {
            return Err(Error::Data(format!("checkpoint parameter `{k}` has shape {:?}", saved.shape())));
        }
        *t = saved.clone();
    }
    let mut stats = IndexMap::new();
    for k in net.stats.keys() {
        stats.insert(
            k.clone(),
            NormStats {
                mean: c.tensor(&format!("{role}.stats.{k}.mean"))?.data().to_vec(),
                var: c.tensor(&format!("{role}.stats.{k}.var"))?.data().to_vec(),
            },
        );
    }
    net.stats = stats;
    Ok(())
}

/// Result of a finished search.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub state: SearchState,
    /// Child supernet accuracy on the search-validation split.
    pub child_val_acc: f64,
}

/// Drives the loop; owns the data splits and the output location.
pub struct Searcher<'a> {
    pub cfg: &'a RunConfig,
    pub splits: &'a Splits,
    pub out_dir: Option<PathBuf>,
    hash: ConfigHash,
}

impl<'a> Searcher<'a> {
    pub fn new(cfg: &'a RunConfig, splits: &'a Splits) -> Result<Self> {
        cfg.validate()?;
        let bs = cfg.search.batch_size;
        if splits.search_train.len() < bs || splits.search_val.is_empty() {
            return Err(Error::Config(format!(
                "search splits too small: {} training samples for batch {bs}, {} validation samples",
                splits.search_train.len(),
                splits.search_val.len()
            )));
        }
        Ok(Self {
            cfg,
            splits,
            out_dir: cfg.out_dir.clone(),
            hash: cfg.hash(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.splits.search_train.steps_per_epoch(self.cfg.search.batch_size)
    }

    fn epochs_of(&self, phase: Phase) -> u64 {
        (0..self.cfg.search.epochs).filter(|&e| phase_of(self.cfg, e) == phase).count() as u64
    }

    /// Runs from scratch.
    pub fn run(&self) -> Result<SearchOutcome> {
        let state = SearchState::new(self.cfg)?;
        self.run_from(state)
    }

    /// Resumes from a checkpoint file.
    pub fn resume(&self, path: &Path) -> Result<SearchOutcome> {
        let c = Checkpoint::load(path)?;
        let state = SearchState::from_checkpoint(self.cfg, &c)?;
        self.run_from(state)
    }

    pub fn run_from(&self, mut st: SearchState) -> Result<SearchOutcome> {
        let total = self.cfg.search.epochs;
        while st.epoch < total {
            let e = st.epoch;
            self.begin_epoch(&mut st, e)?;
            match phase_of(self.cfg, e) {
                Phase::Parent => self.parent_epoch(&mut st, e)?,
                Phase::Child => self.child_epoch(&mut st, e)?,
            }
            st.epoch += 1;
            self.write_metrics(&st)?;
            let every = self.cfg.search.checkpoint_every;
            if every > 0 && st.epoch.is_multiple_of(every) && st.epoch < total {
                self.save_checkpoint(&st, &format!("epoch_{:04}.ckpt", st.epoch))?;
                self.save_checkpoint(&st, "last.ckpt")?;
            }
        }
        if !st.finalized {
            self.finish(&mut st)?;
            st.finalized = true;
        }
        let genotype = st.genotype(self.cfg)?;
        let child_val_acc = evaluate(&st.child, Some(&st.alpha_hat), &self.splits.search_val, self.cfg.search.batch_size)?;
        self.write_metrics(&st)?;
        self.save_checkpoint(&st, "last.ckpt")?;
        if let Some(dir) = &self.out_dir {
            std::fs::write(dir.join("genotype.json"), genotype.to_json()?)?;
            let summary = RunSummary {
                config_hash: self.hash.hex(),
                seed: self.cfg.seed,
                lambda: self.cfg.search.lambda,
                mu: self.cfg.search.mu,
                epsilon: self.cfg.search.backtrack.epsilon,
                search_val_acc: child_val_acc,
                retrain_test_acc: None,
            };
            std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        }
        Ok(SearchOutcome {
            genotype,
            state: st,
            child_val_acc,
        })
    }

    fn save_checkpoint(&self, st: &SearchState, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            st.to_checkpoint(self.cfg)?.save(&dir.join(name))?;
        }
        Ok(())
    }

    fn write_metrics(&self, st: &SearchState) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("metrics.csv"), records_to_csv(&st.history, &EPOCH_COLUMNS)?)?;
            std::fs::write(dir.join("steps.csv"), records_to_csv(&st.steps, &STEP_COLUMNS)?)?;
        }
        Ok(())
    }

    /// Phase transitions that happen before epoch `e` runs.
    fn begin_epoch(&self, st: &mut SearchState, e: u64) -> Result<()> {
        let now = phase_of(self.cfg, e);
        let prev = (e > 0).then(|| phase_of(self.cfg, e - 1));
        match (prev, now) {
            (None | Some(Phase::Parent), Phase::Child) => self.to_child(st, round_of(self.cfg, e))?,
            (Some(Phase::Child), Phase::Parent) => self.to_parent(st, round_of(self.cfg, e - 1))?,
            _ => {}
        }
        Ok(())
    }

    fn finish(&self, st: &mut SearchState) -> Result<()> {
        let total = self.cfg.search.epochs;
        if total == 0 {
            return Ok(());
        }
        match phase_of(self.cfg, total - 1) {
            Phase::Parent => self.to_child(st, round_of(self.cfg, total - 1)),
            Phase::Child => self.to_parent(st, round_of(self.cfg, total - 1)),
        }
    }

    fn val_batches(&self) -> Vec<Batch> {
        self.splits.search_val.ordered_batches(self.cfg.search.batch_size)
    }

    /// Tangent snapshot, then `α̂ ← α`.
    fn to_child(&self, st: &mut SearchState, round: u64) -> Result<()> {
        let snap = compute_tangent(&st.parent, &st.alpha, &self.val_batches(), round);
        let snap = match snap {
            Ok(s) => s,
            Err(e) => {
                self.save_checkpoint(st, "abort.ckpt")?;
                return Err(e);
            }
        };
        st.snapshot = Some(snap);
        inherit(&st.alpha, &mut st.alpha_hat)?;
        if !self.cfg.search.carry_moments {
            st.arch_opt[1].reset_moments();
        }
        Ok(())
    }

    /// `α ← α̂`, then the optional removal round.
    fn to_parent(&self, st: &mut SearchState, round: u64) -> Result<()> {
        inherit(&st.alpha_hat, &mut st.alpha)?;
        if !self.cfg.search.carry_moments {
            st.arch_opt[0].reset_moments();
        }
        if self.cfg.search.removal.enabled {
            self.sample_and_score(st, round)?;
            inherit(&st.alpha_hat, &mut st.alpha)?;
        }
        Ok(())
    }

    fn weight_lr(&self, st: &SearchState, role: usize) -> f64 {
        let phase = if role == 0 { Phase::Parent } else { Phase::Child };
        let total = self.epochs_of(phase) as usize * self.steps_per_epoch();
        cosine_lr(
            self.cfg.search.weight_opt.lr,
            self.cfg.search.weight_lr_floor,
            st.weight_steps[role] as usize,
            total,
        )
    }

    fn arch_step(&self, st: &mut SearchState, role: usize, grad: &[f64]) -> Result<StepReport> {
        let (net, arch) = if role == 0 { (&st.parent, &mut st.alpha) } else { (&st.child, &mut st.alpha_hat) };
        let mut norms = net.op_weight_norms(CellType::Normal)?;
        norms.extend(net.op_weight_norms(CellType::Reduction)?);
        let mut flat = arch.flatten();
        let mask = arch.flat_mask();
        let lr = self.cfg.search.arch_opt.lr;
        let report = st.arch_opt[role].step(&mut flat, grad, &norms, &mask, lr)?;
        arch.set_flat(&flat)?;
        Ok(report)
    }

    fn abort_numerical(&self, st: &SearchState, what: String) -> Error {
        if let Err(e) = self.save_checkpoint(st, "abort.ckpt") {
            log::error!("could not write abort checkpoint: {e}");
        }
        Error::Numerical(what)
    }

    fn parent_epoch(&self, st: &mut SearchState, e: u64) -> Result<()> {
        let bs = self.cfg.search.batch_size;
        let batches = self
            .splits
            .search_train
            .shuffled_batches(bs, &mut substream(self.cfg.seed, &format!("shuffle/{e}")));
        let round = round_of(self.cfg, e);
        let mut acc = EpochAcc::default();
        for (x, y) in &batches {
            let mut g = Graph::new();
            let f = st.parent.forward(&mut g, x, Some(&st.alpha), ForwardOptions::train())?;
            let ce = g.cross_entropy(f.logits, &one_hot(y, self.cfg.net.num_classes)?)?;
            let loss = g.value(ce).item();
            if !loss.is_finite() {
                return Err(self.abort_numerical(st, format!("parent loss is {loss} at epoch {e}")));
            }
            let grads = g.backward(ce)?;
            let lr = self.weight_lr(st, 0);
            st.weight_opt[0].step(&mut st.parent.params, &f.param_grads(&grads), lr)?;
            st.weight_steps[0] += 1;
            let report = self.arch_step(st, 0, &f.arch_grad(&grads)?)?;
            st.parent.absorb_stats(&f.stats, self.cfg.search.norm_momentum);
            acc.add(loss, 0.0, 0.0, 0.0, report);
            st.steps.push(StepRecord {
                step: st.global_step,
                round,
                phase: Phase::Parent.name().into(),
                epoch: e,
                loss,
                neg_g: 0.0,
                d: 0.0,
                l_r: 0.0,
                tau: report.tau,
                backtracked_count: report.backtracked,
            });
            st.global_step += 1;
        }
        let val = evaluate(&st.parent, Some(&st.alpha), &self.splits.search_val, bs)?;
        st.history.push(acc.record(round, Phase::Parent, e, val, self.hash));
        log::info!("epoch {e} parent loss {:.4} val {:.3}", acc.mean(acc.loss), val);
        Ok(())
    }

    fn child_epoch(&self, st: &mut SearchState, e: u64) -> Result<()> {
        let bs = self.cfg.search.batch_size;
        let s = &self.cfg.search;
        let batches = self
            .splits
            .search_train
            .shuffled_batches(bs, &mut substream(self.cfg.seed, &format!("shuffle/{e}")));
        let round = round_of(self.cfg, e);
        let snapshot = st
            .snapshot
            .clone()
            .ok_or_else(|| Error::Contract("child step before the tangent snapshot".into()))?;
        let mut acc = EpochAcc::default();
        for (x, _) in &batches {
            let p = softmax_rows(&st.parent.predict(x, Some(&st.alpha))?);
            let step = match child_step(&st.child, &st.alpha_hat, x, &p, &snapshot, s.lambda, s.mu, &s.ggn) {
                Ok(v) => v,
                Err(Error::Numerical(m)) => return Err(self.abort_numerical(st, format!("epoch {e}: {m}"))),
                Err(err) => return Err(err),
            };
            let lr = self.weight_lr(st, 1);
            st.weight_opt[1].step(&mut st.child.params, &step.weight_grads, lr)?;
            st.weight_steps[1] += 1;
            let report = self.arch_step(st, 1, &step.alpha_direction)?;
            st.child.absorb_stats(&step.stats, s.norm_momentum);
            acc.add(step.loss, step.neg_g, step.d, step.l_r, report);
            st.steps.push(StepRecord {
                step: st.global_step,
                round,
                phase: Phase::Child.name().into(),
                epoch: e,
                loss: step.loss,
                neg_g: step.neg_g,
                d: step.d,
                l_r: step.l_r,
                tau: report.tau,
                backtracked_count: report.backtracked,
            });
            st.global_step += 1;
        }
        let val = evaluate(&st.child, Some(&st.alpha_hat), &self.splits.search_val, bs)?;
        st.history.push(acc.record(round, Phase::Child, e, val, self.hash));
        log::info!("epoch {e} child loss {:.4} D {:.3e} val {:.3}", acc.mean(acc.loss), acc.mean(acc.d), val);
        Ok(())
    }

    /// One removal round: `M_active` mini-rounds, each sampling one unsampled
    /// active op per edge without replacement, briefly training both
    /// single-path models, and crediting the op with the sum of their
    /// validation accuracies. Then every edge drops its worst op.
    pub fn sample_and_score(&self, st: &mut SearchState, round: u64) -> Result<()> {
        let rm = &self.cfg.search.removal;
        let m_active = st.alpha_hat.normal.active_count(0);
        if m_active <= rm.min_active.max(1) {
            return Ok(());
        }
        let mut rng = substream(self.cfg.seed, &format!("removal/{round}"));
        let mut orders: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
        for (t, order) in orders.iter_mut().enumerate() {
            let cell = if t == 0 { &st.alpha_hat.normal } else { &st.alpha_hat.reduction };
            for edge in 0..cell.num_edges() {
                let mut ops: Vec<usize> = (0..cell.num_ops()).filter(|&m| cell.active(edge, m)).collect();
                if ops.len() != m_active {
                    return Err(Error::Contract("edges disagree on their active op count".into()));
                }
                ops.shuffle(&mut rng);
                order.push(ops);
            }
        }
        for k in 0..m_active {
            let mut path = st.alpha_hat.clone();
            for (t, order) in orders.iter().enumerate() {
                let cell: &mut CellArch = if t == 0 { &mut path.normal } else { &mut path.reduction };
                let m = cell.num_ops();
                for (edge, ops) in order.iter().enumerate() {
                    for j in 0..m {
                        cell.mask[edge * m + j] = j == ops[k];
                    }
                }
            }
            let score = self.score_path(st, &path, round, k)?;
            for (t, order) in orders.iter().enumerate() {
                for (edge, ops) in order.iter().enumerate() {
                    st.boards[t].record(edge, ops[k], score);
                }
            }
        }
        let mut removed = remove_worst_op(&mut st.alpha_hat.normal, &mut st.boards[0])?;
        removed.extend(remove_worst_op(&mut st.alpha_hat.reduction, &mut st.boards[1])?);
        log::info!("round {round}: removed op columns {removed:?}");
        st.removal_log.push(removed);
        Ok(())
    }

    fn score_path(&self, st: &SearchState, path: &ArchParams, round: u64, k: usize) -> Result<f64> {
        let bs = self.cfg.search.batch_size;
        let mut parent = st.parent.clone();
        let mut child = st.child.clone();
        let mut popt = WeightOptimizer::new(self.cfg.search.weight_opt.clone());
        let mut copt = WeightOptimizer::new(self.cfg.search.weight_opt.clone());
        let batches = self
            .splits
            .search_train
            .shuffled_batches(bs, &mut substream(self.cfg.seed, &format!("removal/{round}/{k}")));
        let lr = self.cfg.search.weight_opt.lr;
        let snapshot = TangentSnapshot::zeros(2 * path.block_len());
        for (x, y) in batches.iter().cycle().take(self.cfg.search.removal.steps_per_sample) {
            let mut g = Graph::new();
            let f = parent.forward(&mut g, x, Some(path), ForwardOptions::train())?;
            let ce = g.cross_entropy(f.logits, &one_hot(y, self.cfg.net.num_classes)?)?;
            let grads = g.backward(ce)?;
            popt.step(&mut parent.params, &f.param_grads(&grads), lr)?;
            parent.absorb_stats(&f.stats, self.cfg.search.norm_momentum);
            let p = softmax_rows(&parent.predict(x, Some(path))?);
            let step = child_step(&child, path, x, &p, &snapshot, 0.0, self.cfg.search.mu, &self.cfg.search.ggn)?;
            copt.step(&mut child.params, &step.weight_grads, lr)?;
            child.absorb_stats(&step.stats, self.cfg.search.norm_momentum);
        }
        let val = &self.splits.search_val;
        Ok(evaluate(&parent, Some(path), val, bs)? + evaluate(&child, Some(path), val, bs)?)
    }
}

#[derive(Default)]
struct EpochAcc {
    n: usize,
    loss: f64,
    neg_g: f64,
    d: f64,
    l_r: f64,
    tau: usize,
    backtracked: usize,
    psi_norm: f64,
}

impl EpochAcc {
    fn add(&mut self, loss: f64, neg_g: f64, d: f64, l_r: f64, r: StepReport) {
        self.n += 1;
        self.loss += loss;
        self.neg_g += neg_g;
        self.d += d;
        self.l_r += l_r;
        self.tau = r.tau;
        self.backtracked = r.backtracked;
        self.psi_norm = r.psi_norm;
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.n.max(1) as f64
    }

    fn record(&self, round: u64, phase: Phase, epoch: u64, val_acc: f64, hash: ConfigHash) -> EpochRecord {
        EpochRecord {
            round,
            phase: phase.name().into(),
            epoch,
            loss: self.mean(self.loss),
            neg_g: self.mean(self.neg_g),
            d: self.mean(self.d),
            l_r: self.mean(self.l_r),
            val_acc,
            tau: self.tau,
            backtracked_count: self.backtracked,
            psi_norm: self.psi_norm,
            config_hash: hash.hex(),
        }
    }
}

/// Convenience: load the data and run a full search.
pub fn run_search(cfg: &RunConfig) -> Result<SearchOutcome> {
    let splits = crate::data::load_dataset(&cfg.data, cfg.seed)?;
    Searcher::new(cfg, &splits)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;
    use crate::space::OpKind;

    fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig::desk();
        c.net.init_channels = 4;
        c.net.num_cells = 3;
        c.net.image_size = 6;
        c.data.image_size = 6;
        c.data.source = crate::data::DatasetSource::SyntheticBlobs {
            samples_per_class: 32,
            sigma: 1.0,
        };
        c.search.batch_size = 16;
        c.search.epochs = 4;
        c
    }

    #[test]
    fn phase_schedule_alternates() {
        let mut c = tiny_cfg();
        let p: Vec<Phase> = (0..4).map(|e| phase_of(&c, e)).collect();
        assert_eq!(p, vec![Phase::Parent, Phase::Child, Phase::Parent, Phase::Child]);
        c.search.parent_epochs_per_round = 2;
        assert_eq!(phase_of(&c, 1), Phase::Parent);
        assert_eq!(phase_of(&c, 2), Phase::Child);
        assert_eq!(round_of(&c, 5), 1);
    }

    #[test]
    fn zero_epochs_returns_tie_rule_genotype() {
        let mut c = tiny_cfg();
        c.search.epochs = 0;
        let splits = load_dataset(&c.data, c.seed).unwrap();
        let out = Searcher::new(&c, &splits).unwrap().run().unwrap();
        for pair in out.genotype.normal.chunks(2) {
            assert_eq!(pair[0], (0, OpKind::SkipConnect));
            assert_eq!(pair[1], (1, OpKind::SkipConnect));
        }
    }

    #[test]
    fn budget_and_phase_order() {
        let c = tiny_cfg();
        let splits = load_dataset(&c.data, c.seed).unwrap();
        let s = Searcher::new(&c, &splits).unwrap();
        let out = s.run().unwrap();
        assert_eq!(out.state.steps.len() as u64, c.search.epochs * s.steps_per_epoch() as u64);
        assert_eq!(out.state.history.len() as u64, c.search.epochs);
        assert_eq!(out.state.snapshot.as_ref().unwrap().epoch, 1);
        assert!(out.state.steps.iter().all(|r| r.loss.is_finite()));
        assert_eq!(out.state.alpha.flatten(), out.state.alpha_hat.flatten());
    }

    #[test]
    fn tiny_dataset_is_config_error() {
        let mut c = tiny_cfg();
        c.search.batch_size = 1000;
        let splits = load_dataset(&c.data, c.seed).unwrap();
        assert!(matches!(Searcher::new(&c, &splits), Err(Error::Config(_))));
    }

    #[test]
    fn removal_drops_one_op_per_edge_per_round() {
        let mut c = tiny_cfg();
        c.search.removal.enabled = true;
        c.search.removal.steps_per_sample = 1;
        let splits = load_dataset(&c.data, c.seed).unwrap();
        let out = Searcher::new(&c, &splits).unwrap().run().unwrap();
        // rounds end after epochs 1 and 3; menu of 4 with floor 2
        assert_eq!(out.state.removal_log.len(), 2);
        for e in 0..c.space.num_edges() {
            assert_eq!(out.state.alpha_hat.normal.active_count(e), 2);
            assert_eq!(out.state.alpha.reduction.active_count(e), 2);
        }
        assert!(out.state.boards.iter().all(|b| b.samples.iter().all(|&s| s == 0)));
    }
}
