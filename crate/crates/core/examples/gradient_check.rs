//! Reverse-mode gradients of a small binarized supernet checked against
//! central finite differences, parameter by parameter.
//!
//!     cargo run --release --example gradient_check

use dcp_nas::autodiff::Graph;
use dcp_nas::config::{substream, RunConfig};
use dcp_nas::gradcheck::{compare, numeric_gradient, FD_STEP};
use dcp_nas::search::SearchState;
use dcp_nas::supernet::{one_hot, random_input, ForwardOptions};

fn main() -> dcp_nas::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.net.init_channels = 4;
    cfg.net.num_cells = 3;
    cfg.net.image_size = 6;
    cfg.data.image_size = 6;
    let st = SearchState::new(&cfg)?;
    let x = random_input(&cfg.net, 4, &mut substream(0, "x"));
    let targets = one_hot(&[0, 1, 0, 1], 2)?;

    let mut g = Graph::new();
    let f = st.parent.forward(&mut g, &x, Some(&st.alpha), ForwardOptions::train())?;
    let ce = g.cross_entropy(f.logits, &targets)?;
    let grads = g.backward(ce)?;

    let mut worst: f64 = 0.0;
    for (name, value) in &st.parent.params {
        let numeric = numeric_gradient(
            |probe| {
                let mut net = st.parent.clone();
                net.params[name.as_str()] = probe.clone();
                let mut g = Graph::new();
                let f = net.forward(&mut g, &x, Some(&st.alpha), ForwardOptions::train()).unwrap();
                let ce = g.cross_entropy(f.logits, &targets).unwrap();
                g.value(ce).item()
            },
            value,
            FD_STEP,
        );
        let check = compare(grads.wrt(f.params[name.as_str()]), &numeric);
        worst = worst.max(check.max_rel_err);
        println!("{name:<40} {:>5} entries  max rel err {:.2e}", value.len(), check.max_rel_err);
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
