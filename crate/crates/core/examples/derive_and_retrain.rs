//! Search, derive the discrete genotype, retrain it from scratch as a 1-bit
//! network, and report held-out accuracy. The retrained weights are saved as
//! a checkpoint that `xnor_inference` can load.
//!
//!     cargo run --release --example derive_and_retrain -- [seed]

use dcp_nas::config::RunConfig;
use dcp_nas::data::load_dataset;
use dcp_nas::retrain::{retrain_checkpoint, train_child};
use dcp_nas::search::{evaluate, Searcher};
use dcp_nas::space::{derive_genotype, CellType};

fn main() -> dcp_nas::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.seed = std::env::args().nth(1).map(|s| s.parse().expect("seed")).unwrap_or(0);
    let splits = load_dataset(&cfg.data, cfg.seed)?;

    let searched = Searcher::new(&cfg, &splits)?.run()?;
    // Re-deriving from the final Child logits gives the same genotype.
    let again = derive_genotype(&cfg.space, &searched.state.alpha_hat, searched.genotype.meta.clone())?;
    assert_eq!(again, searched.genotype);
    for t in [CellType::Normal, CellType::Reduction] {
        let ops: Vec<String> = searched.genotype.cell(t).iter().map(|(p, o)| format!("{o}<-{p}")).collect();
        println!("{t:?}: {}", ops.join(", "));
    }

    let trained = train_child(&cfg, &searched.genotype, &splits)?;
    for r in &trained.history {
        println!("retrain epoch {}  loss {:.4}  train acc {:.3}", r.epoch, r.loss, r.train_acc);
    }
    let acc = evaluate(&trained.network, None, &splits.test, cfg.retrain.batch_size)?;
    println!("test accuracy of the retrained 1-bit network: {acc:.4}");

    let path = std::path::PathBuf::from(format!("runs/retrain-{}.ckpt", cfg.seed));
    std::fs::create_dir_all("runs")?;
    retrain_checkpoint(&cfg, &trained)?.save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
