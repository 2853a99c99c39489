//! Sweeps the tangent weight and the reconstruction weight, writes one run
//! directory per setting and collects the summaries into a CSV table.
//!
//!     cargo run --release --example lambda_mu_sweep -- [root]

use dcp_nas::config::RunConfig;
use dcp_nas::data::load_dataset;
use dcp_nas::io::{export_sweep, RunSummary};
use dcp_nas::retrain::train_child;
use dcp_nas::search::{evaluate, Searcher};

fn main() -> dcp_nas::Result<()> {
    let root = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/sweep".into()));
    let base = RunConfig::desk();
    let splits = load_dataset(&base.data, base.seed)?;
    for lambda in [0.0, 1e-3, 1e-2] {
        for mu in [0.0, 0.2] {
            let mut cfg = base.clone();
            cfg.search.lambda = lambda;
            cfg.search.mu = mu;
            let dir = root.join(format!("lambda{lambda}_mu{mu}"));
            cfg.out_dir = Some(dir.clone());
            let out = Searcher::new(&cfg, &splits)?.run()?;
            let net = train_child(&cfg, &out.genotype, &splits)?.network;
            let acc = evaluate(&net, None, &splits.test, cfg.retrain.batch_size)?;
            let path = dir.join("summary.json");
            let mut s: RunSummary = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            s.retrain_test_acc = Some(acc);
            std::fs::write(&path, serde_json::to_string_pretty(&s)? + "\n")?;
            println!("lambda {lambda:<6} mu {mu:<4} search-val {:.3}  test {acc:.3}", out.child_val_acc);
        }
    }
    print!("{}", export_sweep(&root)?);
    Ok(())
}
