//! The backtracking architecture optimizer on a two-parameter objective with
//! a shallow spurious minimum, compared with the plain optimizer over 20
//! random starts, followed by the threshold table for eight operations.
//!
//!     cargo run --release --example decoupled_optimizer

use rand::Rng;

use dcp_nas::config::substream;
use dcp_nas::decoupled::{threshold, vanilla_step, BacktrackConfig, DecoupledOptimizer, Moments, OptimizerConfig};

fn grad(p: &[f64]) -> Vec<f64> {
    let s2 = 0.25f64 * 0.25;
    let y = p[1];
    vec![2.0 * p[0], (y - 2.5) + 0.6 * (y - 1.0) / s2 * (-(y - 1.0).powi(2) / (2.0 * s2)).exp()]
}

fn main() -> dcp_nas::Result<()> {
    let lr = 0.05;
    let opt = OptimizerConfig::sgd(lr);
    let cfg = BacktrackConfig {
        eta2: 0.2,
        epsilon: 0.5,
        ..BacktrackConfig::default()
    };
    let (mut plain, mut decoupled) = (0, 0);
    for seed in 0..20 {
        let mut r = substream(seed, "escape");
        let start = vec![r.gen_range(-1.0..1.0), r.gen_range(0.7..1.3)];
        let (mut a, mut b) = (start.clone(), start.clone());
        let mut m = Moments::default();
        let mut d = DecoupledOptimizer::new(opt.clone(), cfg.clone(), 2, 2);
        for _ in 0..3000 {
            let ga = grad(&a);
            vanilla_step(&opt, &mut m, &mut a, &ga, lr)?;
            let gb = grad(&b);
            d.step(&mut b, &gb, &[2.0, 1.0], &[true; 2], lr)?;
        }
        plain += (a[1] > 1.8) as usize;
        decoupled += (b[1] > 1.8) as usize;
        println!("seed {seed:>2}: start y {:.3}  vanilla y {:.3}  backtracked y {:.3}  psi {:.4}", start[1], a[1], b[1], d.psi[0]);
    }
    println!("left the spurious basin: vanilla {plain}/20, backtracked {decoupled}/20");

    println!("\nepsilon  tau  backtracked (of 8 active ops)");
    for eps in [0.0, 0.1, 0.2, 0.5, 0.9, 1.0] {
        let tau = threshold(eps, 8);
        println!("{eps:>7}  {tau:>3}  {}", 8usize.saturating_sub(tau));
    }
    Ok(())
}
