//! Weight binarization: the mean-absolute-value scale against a sweep of
//! alternative scales, and the clipped straight-through gradient.
//!
//!     cargo run --release --example binarize_scale

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dcp_nas::autodiff::{ConvGeom, Graph, SignConvention};
use dcp_nas::binarize::{binary_conv_forward, optimal_scale, reconstruction_loss_value};
use dcp_nas::Tensor;

fn main() -> dcp_nas::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Tensor::randn(&[2, 1, 3, 3], 0.7, &mut rng);
    let beta = optimal_scale(&w);
    let sign = SignConvention::ZeroNegative;
    println!("per-channel scale {beta:.4?}");
    for f in [0.5, 0.8, 0.95, 1.0, 1.05, 1.25, 2.0] {
        let scaled: Vec<f64> = beta.iter().map(|b| b * f).collect();
        println!("  scale x{f:<4}  L_R {:.5}", reconstruction_loss_value(&w, &scaled, sign)?);
    }

    // Gradient of a projection of the binary convolution with respect to the
    // latent weights: zero outside [-1, 1], scaled by beta inside.
    let mut w = w;
    w.data_mut()[0] = 1.6;
    w.data_mut()[4] = -1.2;
    let beta = optimal_scale(&w);
    let x = Tensor::randn(&[1, 1, 5, 5], 1.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let wv = g.param(w.clone());
    let bv = g.constant(Tensor::from_vec(beta));
    let y = binary_conv_forward(&mut g, xv, wv, bv, false, ConvGeom::new(1, 1), sign)?;
    let loss = g.sum(y);
    let grads = g.backward(loss)?;
    let dw = grads.wrt(wv);
    for k in 0..9 {
        println!("  w {:>7.3}  sign {:>3}  dL/dw {:>9.4}", w.data()[k], sign.sign(w.data()[k]), dw.data()[k]);
    }
    Ok(())
}
