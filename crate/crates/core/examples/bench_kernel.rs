//! Packed XNOR/popcount convolution against a direct float convolution on
//! three layer shapes, single- and multi-threaded.
//!
//!     cargo run --release --example bench_kernel -- [repeats]

use dcp_nas::config::substream;
use dcp_nas::xnor::{bench, bench_csv, BenchShape, KernelOptions, Popcount};

fn main() -> dcp_nas::Result<()> {
    let repeats = std::env::args().nth(1).map(|s| s.parse().expect("repeats")).unwrap_or(5);
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    for (popcount, t) in [(Popcount::Table, 1), (Popcount::detect(), 1), (Popcount::detect(), threads)] {
        let opts = KernelOptions { popcount, threads: t };
        println!("# popcount {popcount:?}, {t} thread(s)");
        let rows = bench(&BenchShape::standard(), repeats, opts, &mut substream(0, "bench"))?;
        print!("{}", bench_csv(&rows)?);
    }
    Ok(())
}
