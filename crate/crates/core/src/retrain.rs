//! Training a derived 1-bit network from scratch, and the random-search
//! baseline that competes with the searched architecture on an equal budget.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::{substream, RunConfig};
use crate::data::{Dataset, Splits};
use crate::decoupled::{cosine_lr, OptimizerConfig, WeightOptimizer};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, CheckpointKind};
use crate::search::{evaluate, put_network, take_network};
use crate::space::{Genotype, GenotypeMeta, Role, SearchSpaceSpec, SpaceSummary};
use crate::supernet::{one_hot, reconstruction_term, ForwardOptions, Network, Topology};

/// Per-epoch retraining record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: u64,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedChild {
    pub network: Network,
    pub history: Vec<TrainRecord>,
}

/// Plain training schedule of a discrete network.
#[derive(Clone, Debug)]
pub struct TrainSchedule {
    pub epochs: u64,
    pub batch_size: usize,
    pub opt: OptimizerConfig,
    pub lr_floor: f64,
    /// Weight of the reconstruction error.
    pub mu: f64,
    pub norm_momentum: f64,
}

impl TrainSchedule {
    pub fn retrain(cfg: &RunConfig) -> Self {
        Self {
            epochs: cfg.retrain.epochs,
            batch_size: cfg.retrain.batch_size,
            opt: cfg.retrain.opt.clone(),
            lr_floor: cfg.retrain.lr_floor,
            mu: cfg.search.mu,
            norm_momentum: cfg.search.norm_momentum,
        }
    }
}

/// Fresh binarized Child for `genotype`, initialized from the named stream.
pub fn discrete_child(cfg: &RunConfig, genotype: &Genotype, stream: &str) -> Result<Network> {
    Network::new(
        cfg.net.clone(),
        Topology::Discrete(genotype.clone()),
        Role::Child,
        cfg.binarize.clone(),
        &mut substream(cfg.seed, stream),
    )
}

/// Trains `net` on `data` with cross-entropy plus `μ·L_R`.
pub fn train_discrete(net: &mut Network, data: &Dataset, sched: &TrainSchedule, seed: u64, stream: &str) -> Result<Vec<TrainRecord>> {
    let steps = data.steps_per_epoch(sched.batch_size);
    if steps == 0 {
        return Err(Error::Config(format!(
            "{} training samples cannot fill a batch of {}",
            data.len(),
            sched.batch_size
        )));
    }
    let total = steps * sched.epochs as usize;
    let mut opt = WeightOptimizer::new(sched.opt.clone());
    let mut history = Vec::new();
    let mut step = 0;
    for e in 0..sched.epochs {
        let batches = data.shuffled_batches(sched.batch_size, &mut substream(seed, &format!("{stream}/{e}")));
        let (mut loss_sum, mut hits) = (0.0, 0.0);
        for (x, y) in &batches {
            let mut g = Graph::new();
            let f = net.forward(&mut g, x, None, ForwardOptions::train())?;
            let ce = g.cross_entropy(f.logits, &one_hot(y, net.net.num_classes)?)?;
            hits += crate::supernet::accuracy(g.value(f.logits), y) * y.len() as f64;
            let loss = match reconstruction_term(&mut g, &f, &net.effective_binarize())? {
                Some(lr_term) if sched.mu > 0.0 => {
                    let s = g.scale(lr_term, sched.mu);
                    g.add(ce, s)?
                }
                _ => ce,
            };
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Numerical(format!("training loss is {v} at epoch {e}")));
            }
            loss_sum += v;
            let grads = g.backward(loss)?;
            let lr = cosine_lr(sched.opt.lr, sched.lr_floor, step, total);
            opt.step(&mut net.params, &f.param_grads(&grads), lr)?;
            net.absorb_stats(&f.stats, sched.norm_momentum);
            step += 1;
        }
        history.push(TrainRecord {
            epoch: e,
            loss: loss_sum / steps as f64,
            train_acc: hits / (steps * sched.batch_size) as f64,
        });
    }
    Ok(history)
}

/// Builds and trains the final network on the final-training split.
pub fn train_child(cfg: &RunConfig, genotype: &Genotype, splits: &Splits) -> Result<TrainedChild> {
    let mut net = discrete_child(cfg, genotype, "init/retrain")?;
    let history = train_discrete(&mut net, &splits.final_train, &TrainSchedule::retrain(cfg), cfg.seed, "shuffle/retrain")?;
    Ok(TrainedChild { network: net, history })
}

/// Retrain checkpoint: parameters, statistics, genotype and config.
pub fn retrain_checkpoint(cfg: &RunConfig, trained: &TrainedChild) -> Result<Checkpoint> {
    let Topology::Discrete(gt) = &trained.network.topology else {
        return Err(Error::Contract("retrained network must be discrete".into()));
    };
    let mut c = Checkpoint::new(cfg.hash(), cfg.retrain.epochs, CheckpointKind::Retrain);
    c.put_json("config", cfg)?;
    c.put_json("genotype", gt)?;
    c.put_json("history", &trained.history)?;
    put_network(&mut c, "child", &trained.network);
    Ok(c)
}

/// Rebuilds the network stored by [`retrain_checkpoint`].
pub fn load_retrained(cfg: &RunConfig, c: &Checkpoint) -> Result<Network> {
    c.expect_hash(cfg.hash())?;
    if c.kind != CheckpointKind::Retrain {
        return Err(Error::Data("not a retrain checkpoint".into()));
    }
    let gt: Genotype = c.json("genotype")?;
    gt.validate()?;
    let mut net = discrete_child(cfg, &gt, "init/retrain")?;
    take_network(c, "child", &mut net)?;
    Ok(net)
}

/// Uniformly random valid genotype: two distinct predecessors per node and a
/// non-zero op per kept edge.
pub fn random_genotype<R: Rng + ?Sized>(spec: &SearchSpaceSpec, meta: GenotypeMeta, rng: &mut R) -> Result<Genotype> {
    let menu = spec.menu();
    let ops: Vec<_> = menu.iter().copied().filter(|o| !o.is_zero()).collect();
    if ops.is_empty() {
        return Err(Error::Config("the menu has no non-zero operation".into()));
    }
    let mut cell = || {
        let mut out = Vec::new();
        for j in 0..spec.num_intermediate_nodes {
            let node = spec.num_input_nodes + j;
            let mut preds: Vec<usize> = (0..node).collect();
            preds.shuffle(rng);
            let mut keep = [preds[0], preds[1]];
            keep.sort_unstable();
            for p in keep {
                out.push((p, *ops.choose(rng).expect("non-empty")));
            }
        }
        out
    };
    let normal = cell();
    let reduction = cell();
    let g = Genotype {
        space: SpaceSummary {
            num_intermediate_nodes: spec.num_intermediate_nodes,
            num_input_nodes: spec.num_input_nodes,
            ops: menu,
        },
        normal,
        reduction,
        meta,
    };
    g.validate()?;
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub candidates: Vec<(Genotype, f64)>,
    /// Index of the winner by search-validation accuracy.
    pub best: usize,
    /// Epochs granted to each candidate; they sum to the search budget.
    pub epochs: Vec<u64>,
}

impl BaselineOutcome {
    pub fn genotype(&self) -> &Genotype {
        &self.candidates[self.best].0
    }
}

/// Random search with the same epoch budget as the main search: the budget
/// is split as evenly as possible over the candidates, each trained as a
/// binarized network on the search-training split and scored on
/// search-validation.
pub fn random_search(cfg: &RunConfig, splits: &Splits) -> Result<BaselineOutcome> {
    let k = cfg.baseline.candidates as u64;
    let budget = cfg.search.epochs;
    let mut rng = substream(cfg.seed, "baseline/sample");
    let mut candidates = Vec::new();
    let mut epochs = Vec::new();
    for i in 0..k {
        let e = budget / k + u64::from(i < budget % k);
        let meta = GenotypeMeta {
            config_hash: cfg.hash().hex(),
            seed: cfg.seed,
            epoch: e,
        };
        let gt = random_genotype(&cfg.space, meta, &mut rng)?;
        let mut net = discrete_child(cfg, &gt, &format!("baseline/init/{i}"))?;
        let sched = TrainSchedule {
            epochs: e,
            batch_size: cfg.search.batch_size,
            opt: cfg.search.weight_opt.clone(),
            lr_floor: cfg.search.weight_lr_floor,
            mu: cfg.search.mu,
            norm_momentum: cfg.search.norm_momentum,
        };
        train_discrete(&mut net, &splits.search_train, &sched, cfg.seed, &format!("baseline/shuffle/{i}"))?;
        let acc = evaluate(&net, None, &splits.search_val, cfg.search.batch_size)?;
        candidates.push((gt, acc));
        epochs.push(e);
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.1 > candidates[best].1 {
            best = i;
        }
    }
    Ok(BaselineOutcome { candidates, best, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;

    fn small() -> RunConfig {
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
        c.retrain.batch_size = 16;
        c.retrain.epochs = 2;
        c.search.epochs = 4;
        c
    }

    #[test]
    fn random_genotypes_validate() {
        let spec = SearchSpaceSpec::default();
        let mut rng = substream(3, "t");
        for _ in 0..50 {
            let meta = GenotypeMeta {
                config_hash: String::new(),
                seed: 0,
                epoch: 0,
            };
            random_genotype(&spec, meta, &mut rng).unwrap();
        }
    }

    #[test]
    fn baseline_budget_matches_search_budget() {
        let mut c = small();
        c.search.epochs = 5;
        c.baseline.candidates = 3;
        let splits = load_dataset(&c.data, c.seed).unwrap();
        let out = random_search(&c, &splits).unwrap();
        assert_eq!(out.epochs, vec![2, 2, 1]);
        assert_eq!(out.epochs.iter().sum::<u64>(), c.search.epochs);
    }

    #[test]
    fn retrain_learns_and_round_trips() {
        let c = small();
        let splits = load_dataset(&c.data, c.seed).unwrap();
        let meta = GenotypeMeta {
            config_hash: c.hash().hex(),
            seed: 0,
            epoch: 0,
        };
        let gt = random_genotype(&c.space, meta, &mut substream(0, "g")).unwrap();
        let t = train_child(&c, &gt, &splits).unwrap();
        assert!(t.history.iter().all(|r| r.loss.is_finite()));
        let ck = retrain_checkpoint(&c, &t).unwrap();
        let back = load_retrained(&c, &Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        let a = evaluate(&t.network, None, &splits.test, 16).unwrap();
        let b = evaluate(&back, None, &splits.test, 16).unwrap();
        assert_eq!(a, b);
        let mut other = c.clone();
        other.seed = 9;
        assert!(matches!(load_retrained(&other, &ck), Err(Error::HashMismatch { .. })));
    }
}
