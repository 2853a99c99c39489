//! The equal-budget random-search baseline next to the searched architecture,
//! both retrained from scratch and scored on the test split.
//!
//!     cargo run --release --example random_baseline -- [seed]

use dcp_nas::config::RunConfig;
use dcp_nas::data::load_dataset;
use dcp_nas::retrain::{random_search, train_child};
use dcp_nas::search::{evaluate, Searcher};

fn main() -> dcp_nas::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.seed = std::env::args().nth(1).map(|s| s.parse().expect("seed")).unwrap_or(0);
    let splits = load_dataset(&cfg.data, cfg.seed)?;

    let base = random_search(&cfg, &splits)?;
    for (i, ((_, acc), e)) in base.candidates.iter().zip(&base.epochs).enumerate() {
        let mark = if i == base.best { "  <- selected" } else { "" };
        println!("candidate {i}: {e} epochs, search-val {acc:.3}{mark}");
    }
    let searched = Searcher::new(&cfg, &splits)?.run()?;

    for (name, gt) in [("random", base.genotype()), ("searched", &searched.genotype)] {
        let net = train_child(&cfg, gt, &splits)?.network;
        println!("{name:>8}: test accuracy {:.4}", evaluate(&net, None, &splits.test, cfg.retrain.batch_size)?);
    }
    Ok(())
}
