//! Full child-parent search on the desk profile, writing metrics, checkpoints
//! and the derived genotype to a run directory.
//!
//!     cargo run --release --example search_desk -- [seed] [out_dir]

use dcp_nas::config::RunConfig;
use dcp_nas::data::load_dataset;
use dcp_nas::search::Searcher;

fn main() -> dcp_nas::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::desk();
    cfg.seed = args.next().map(|s| s.parse().expect("seed is an integer")).unwrap_or(0);
    cfg.out_dir = Some(args.next().unwrap_or_else(|| format!("runs/desk-{}", cfg.seed)).into());
    cfg.search.checkpoint_every = 2;

    let splits = load_dataset(&cfg.data, cfg.seed)?;
    let out = Searcher::new(&cfg, &splits)?.run()?;
    for r in &out.state.history {
        println!(
            "epoch {} {:>6}  loss {:>9.4}  -G {:.4}  D {:.2e}  L_R {:>8.2}  val {:.3}  backtracked {}",
            r.epoch, r.phase, r.loss, r.neg_g, r.d, r.l_r, r.val_acc, r.backtracked_count
        );
    }
    println!("search-val accuracy of the binarized supernet: {:.4}", out.child_val_acc);
    print!("{}", out.genotype.to_json()?);
    println!("run directory: {}", cfg.out_dir.unwrap().display());
    Ok(())
}
