//! Runs a retrained 1-bit network on the bit-packed XNOR/popcount kernel and
//! checks that its logits agree with the fake-quantized float forward.
//!
//!     cargo run --release --example xnor_inference -- [checkpoint]
//!
//! Without a checkpoint a genotype is searched and retrained first.

use dcp_nas::config::RunConfig;
use dcp_nas::data::load_dataset;
use dcp_nas::io::Checkpoint;
use dcp_nas::retrain::{load_retrained, train_child};
use dcp_nas::search::Searcher;
use dcp_nas::supernet::accuracy;
use dcp_nas::xnor::{run_network, KernelOptions, Popcount};

fn main() -> dcp_nas::Result<()> {
    let (cfg, net) = match std::env::args().nth(1) {
        Some(p) => {
            let c = Checkpoint::load(p.as_ref())?;
            let cfg: RunConfig = c.json("config")?;
            let net = load_retrained(&cfg, &c)?;
            (cfg, net)
        }
        None => {
            let cfg = RunConfig::desk();
            let splits = load_dataset(&cfg.data, cfg.seed)?;
            let gt = Searcher::new(&cfg, &splits)?.run()?.genotype;
            let net = train_child(&cfg, &gt, &splits)?.network;
            (cfg, net)
        }
    };
    let splits = load_dataset(&cfg.data, cfg.seed)?;
    let test = &splits.test;

    let float_logits = net.predict(&test.images, None)?;
    let opts = KernelOptions {
        popcount: Popcount::detect(),
        threads: 1,
    };
    let run = run_network(&net, &test.images, 5, opts)?;
    let max_diff = run
        .logits
        .data()
        .iter()
        .zip(float_logits.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    println!("popcount path: {:?}", opts.popcount);
    println!("packed convolutions per forward: {}", run.packed_calls);
    println!("max |packed - float| logit difference: {max_diff:.2e}");
    println!(
        "accuracy packed {:.4} / float {:.4}",
        accuracy(&run.logits, &test.labels),
        accuracy(&float_logits, &test.labels)
    );
    println!(
        "time per image: {:.0} ns (MAD {:.0} ns over {} runs)",
        run.timing.median_ns, run.timing.mad_ns, run.timing.runs
    );
    let m = &run.memory;
    println!(
        "storage: {} binary weights + {} float values = {} bits vs {} bits in fp32 ({:.1}x smaller)",
        m.binary_weights, m.float_values, m.packed_bits, m.float_bits, m.saving
    );
    println!("binary MACs {} / float MACs {} per image, {:.3e} OPs", m.binary_macs, m.float_macs, m.ops);
    Ok(())
}
