//! The tangent-propagation pieces in isolation: a Parent architecture
//! gradient on validation batches, one Child step against it, and the
//! Fisher estimate that replaces the Hessian of the Child objective.
//!
//!     cargo run --release --example tangent_and_ggn

use dcp_nas::config::RunConfig;
use dcp_nas::data::load_dataset;
use dcp_nas::search::SearchState;
use dcp_nas::autodiff::softmax_rows;
use dcp_nas::tangent::{child_step, compute_tangent, dcp_alpha_gradient, tangent_discrepancy, Curvature};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn main() -> dcp_nas::Result<()> {
    let cfg = RunConfig::desk();
    let splits = load_dataset(&cfg.data, cfg.seed)?;
    let st = SearchState::new(&cfg)?;

    let val = splits.search_val.ordered_batches(cfg.search.batch_size);
    let snapshot = compute_tangent(&st.parent, &st.alpha, &val, 0)?;
    println!("tangent: {} entries, norm {:.3e}", snapshot.grad_parent.len(), norm(&snapshot.grad_parent));

    let (x, _) = &splits.search_train.ordered_batches(cfg.search.batch_size)[0];
    let teacher = softmax_rows(&st.parent.predict(x, Some(&st.alpha))?);
    let (lambda, mu) = (cfg.search.lambda, cfg.search.mu);
    let step = child_step(&st.child, &st.alpha_hat, x, &teacher, &snapshot, lambda, mu, &cfg.search.ggn)?;
    println!(
        "child step: -G {:.4}  D {:.3e}  L_R {:.2}  loss {:.4}",
        step.neg_g, step.d, step.l_r, step.loss
    );
    assert_eq!(step.d, tangent_discrepancy(&snapshot, &step.grad_g)?);

    let ggn = step.curvature.as_ref().expect("a curvature estimate is formed when lambda > 0");
    println!(
        "Fisher estimate: {:?}, {} samples, {} blocks of {}",
        ggn.mode,
        ggn.samples,
        ggn.blocks.len(),
        ggn.block_len
    );
    let block = ggn.block_matrix(0)?;
    let trace: f64 = (0..ggn.block_len).map(|i| block[i * ggn.block_len + i]).sum();
    println!("normal-cell block trace {trace:.3e}");

    let residual: Vec<f64> = step.grad_g.iter().zip(&snapshot.grad_parent).map(|(g, t)| g - t).collect();
    let correction = ggn.apply(&residual)?;
    println!(
        "|g| {:.3e}  |g - t| {:.3e}  |H(g - t)| {:.3e}",
        norm(&step.grad_g),
        norm(&residual),
        norm(&correction)
    );
    let direction = dcp_alpha_gradient(&step.grad_g, &snapshot, Some(ggn), lambda)?;
    assert_eq!(direction, step.alpha_direction);
    let plain = dcp_alpha_gradient(&step.grad_g, &snapshot, None, 0.0)?;
    let shift: Vec<f64> = direction.iter().zip(&plain).map(|(a, b)| a - b).collect();
    println!("direction shift from tangent propagation at lambda = {lambda}: {:.3e}", norm(&shift));
    Ok(())
}
