//! Sign binarization with the straight-through estimator, channel-wise
//! scale factors and the weight reconstruction error.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, SignConvention, Var};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Smallest admissible channel scale.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Which tensors of the Child are binarized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinarizeConfig {
    /// Binarize searched-conv weights (`sign(ŵ)` scaled by `β`).
    pub weights: bool,
    /// Binarize activations entering searched convs.
    pub activations: bool,
    /// Also binarize the activations entering the input-node preprocessing convs.
    pub preprocess_activations: bool,
    /// Also binarize the activations entering the depthwise half of separable convs.
    pub separable_first_activations: bool,
    /// Learn `β` by gradient instead of refreshing it from the mean absolute value.
    pub learn_scale: bool,
    pub sign: SignConvention,
}

impl Default for BinarizeConfig {
    fn default() -> Self {
        Self {
            weights: true,
            activations: true,
            preprocess_activations: false,
            separable_first_activations: false,
            learn_scale: false,
            sign: SignConvention::ZeroNegative,
        }
    }
}

impl BinarizeConfig {
    /// Every binarization switched off: the Child degenerates to the Parent.
    pub fn disabled() -> Self {
        Self {
            weights: false,
            activations: false,
            preprocess_activations: false,
            separable_first_activations: false,
            ..Self::default()
        }
    }
}

/// Latent weights of one binary convolution with their cached binarization.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryConvParams {
    pub latent: Tensor,
    pub scale: Vec<f64>,
    pub binary: Tensor,
}

impl BinaryConvParams {
    pub fn new(latent: Tensor, sign: SignConvention) -> Self {
        let mut p = Self {
            scale: vec![],
            binary: latent.clone(),
            latent,
        };
        p.refresh(sign);
        p
    }

    /// Recomputes `b = sign(ŵ)` and `β = MAV(ŵ)`.
    pub fn refresh(&mut self, sign: SignConvention) {
        self.binary = self.latent.map(|x| sign.sign(x));
        self.scale = optimal_scale(&self.latent);
    }

    /// Reconstructed real weights `β ∘ b`.
    pub fn reconstructed(&self) -> Tensor {
        let per = self.latent.len() / self.scale.len().max(1);
        let mut t = self.binary.clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= self.scale[i / per];
        }
        t
    }
}

/// Per-output-channel mean absolute value of an OIKK (or any leading-axis)
/// weight tensor; the minimizer of the reconstruction error for fixed signs.
pub fn optimal_scale(weight: &Tensor) -> Vec<f64> {
    let out = weight.shape().first().copied().unwrap_or(1).max(1);
    let per = weight.len() / out;
    weight
        .data()
        .chunks(per.max(1))
        .enumerate()
        .map(|(c, ch)| {
            let mav = ch.iter().map(|v| v.abs()).sum::<f64>() / ch.len() as f64;
            if mav < SCALE_FLOOR {
                log::warn!("output channel {c} is all zero; scale floored at {SCALE_FLOOR}");
                SCALE_FLOOR
            } else {
                mav
            }
        })
        .collect()
}

/// `‖ŵ − β∘sign(ŵ)‖²` evaluated directly.
pub fn reconstruction_loss_value(latent: &Tensor, scale: &[f64], sign: SignConvention) -> Result<f64> {
    let out = latent.shape().first().copied().unwrap_or(0);
    if out != scale.len() {
        return dim_err(format!("{} scales for {out} output channels", scale.len()));
    }
    let per = latent.len() / out.max(1);
    Ok(latent
        .data()
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let d = w - scale[i / per] * sign.sign(w);
            d * d
        })
        .sum())
}

/// Reconstruction error recorded on the graph, differentiable in `ŵ` and `β`.
///
/// `sign(ŵ)` enters as a constant: the loss is piecewise smooth in `ŵ` and
/// its gradient is `2(ŵ − β∘b)`.
pub fn reconstruction_loss(g: &mut Graph, latent: Var, scale: Var, sign: SignConvention) -> Result<Var> {
    let b = g.sign_detached(latent, sign);
    let recon = g.channel_scale(b, scale, 0)?;
    let diff = g.sub(latent, recon)?;
    Ok(g.sum_squares(diff))
}

/// `β ∘ conv(sign(x) or x, sign(ŵ))` using fake quantization: the binary
/// operands are ±1 values in floating point.
pub fn binary_conv_forward(
    g: &mut Graph,
    input: Var,
    latent: Var,
    scale: Var,
    binarize_input: bool,
    geom: ConvGeom,
    sign: SignConvention,
) -> Result<Var> {
    let x = if binarize_input { g.sign_ste(input, sign) } else { input };
    let wb = g.sign_ste(latent, sign);
    let y = g.conv2d(x, wb, geom)?;
    g.channel_scale(y, scale, 1)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn sign_ste_forward_follows_convention() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.3, -0.2, 0.0]));
        let signed = g.sign_ste(x, SignConvention::ZeroNegative);
        assert_eq!(g.value(signed).data(), &[1.0, -1.0, -1.0]);
        let compat = g.sign_ste(x, SignConvention::ZeroPositive);
        assert_eq!(g.value(compat).data(), &[1.0, -1.0, 1.0]);
    }

    #[test]
    fn sign_ste_backward_clips_outside_unit_interval() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.5, 0.7, -1.0, -3.0, 1.0]));
        let s = g.sign_ste(x, SignConvention::ZeroNegative);
        let seed = Tensor::from_vec(vec![1.0, 2.5, -4.0, 6.0, 0.5]);
        let grads = g.backward_seeded(s, seed, None).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 2.5, -4.0, 0.0, 0.5]);
    }

    fn grid_minimizer(w: &[f64]) -> f64 {
        let t = Tensor::new(vec![1, w.len()], w.to_vec()).unwrap();
        let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let steps = (2.0 * max / 1e-4).round() as usize;
        (0..=steps)
            .map(|k| k as f64 * 1e-4)
            .map(|b| (b, reconstruction_loss_value(&t, &[b], SignConvention::ZeroNegative).unwrap()))
            .fold((0.0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0
    }

    #[test]
    fn optimal_scale_is_mav_and_grid_minimizer() {
        let w = [0.5, -1.5, 1.0, -1.0];
        let t = Tensor::new(vec![1, 4], w.to_vec()).unwrap();
        assert_eq!(optimal_scale(&t), vec![1.0]);
        assert!((grid_minimizer(&w) - 1.0).abs() < 1e-4);
        let c = Tensor::full(&[2, 3, 3, 3], 0.37);
        assert!(optimal_scale(&c).iter().all(|&b| (b - 0.37).abs() < 1e-15));
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let w = Tensor::randn(&[1, 9], 0.6, &mut r);
            let mav = optimal_scale(&w)[0];
            assert!((grid_minimizer(w.data()) - mav).abs() < 1e-4);
        }
    }

    #[test]
    fn all_zero_channel_is_floored() {
        let t = Tensor::zeros(&[2, 4]);
        assert_eq!(optimal_scale(&t), vec![SCALE_FLOOR; 2]);
    }

    #[test]
    fn reconstruction_loss_cases() {
        let exact = Tensor::new(vec![2, 2], vec![0.5, -0.5, 2.0, 2.0]).unwrap();
        assert_eq!(reconstruction_loss_value(&exact, &[0.5, 2.0], SignConvention::ZeroNegative).unwrap(), 0.0);
        let w = Tensor::new(vec![1, 2], vec![0.5, -1.5]).unwrap();
        let oracle: f64 = [(0.5f64, 1.0f64), (-1.5, -1.0)].iter().map(|(a, b)| (a - b) * (a - b)).sum();
        let got = reconstruction_loss_value(&w, &[1.0], SignConvention::ZeroNegative).unwrap();
        assert!((got - 0.5).abs() < 1e-15 && (oracle - 0.5).abs() < 1e-15);
        let mut g = Graph::new();
        let wv = g.param(w);
        let b = g.param(Tensor::from_vec(vec![1.0]));
        let l = reconstruction_loss(&mut g, wv, b, SignConvention::ZeroNegative).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_loss_grows_with_scale_error() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::randn(&[1, 16], 1.0, &mut r);
        let mav = optimal_scale(&w)[0];
        let mut prev_lo = reconstruction_loss_value(&w, &[mav], SignConvention::ZeroNegative).unwrap();
        let mut prev_hi = prev_lo;
        for k in 1..50 {
            let d = k as f64 * 0.01;
            let lo = reconstruction_loss_value(&w, &[mav - d], SignConvention::ZeroNegative).unwrap();
            let hi = reconstruction_loss_value(&w, &[mav + d], SignConvention::ZeroNegative).unwrap();
            assert!(lo > prev_lo && hi > prev_hi);
            prev_lo = lo;
            prev_hi = hi;
        }
    }

    #[test]
    fn binary_conv_all_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.param(Tensor::ones(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::from_vec(vec![1.0]));
        let y = binary_conv_forward(&mut g, x, w, b, true, ConvGeom::new(1, 0), SignConvention::ZeroNegative).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn binary_conv_is_linear_in_scale_and_matches_prebinarized_conv() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let xin = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let lat = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut r);
        let beta = optimal_scale(&lat);
        let geom = ConvGeom::new(1, 1);
        let sign = SignConvention::ZeroNegative;
        let run = |scale: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(xin.clone());
            let w = g.constant(lat.clone());
            let b = g.constant(Tensor::from_vec(scale));
            let y = binary_conv_forward(&mut g, x, w, b, true, geom, sign).unwrap();
            g.value(y).clone()
        };
        let base = run(beta.clone());
        let doubled = run(beta.iter().map(|b| 2.5 * b).collect());
        for (a, b) in base.data().iter().zip(doubled.data()) {
            assert!((2.5 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let xb = xin.map(|v| sign.sign(v));
        let wb = lat.map(|v| sign.sign(v));
        let raw = crate::autodiff::kernels::conv2d_forward(&xb, &wb, &geom).unwrap();
        let per = raw.len() / (2 * 4);
        let mut want = raw.clone();
        for (i, v) in want.data_mut().iter_mut().enumerate() {
            *v *= beta[(i / per) % 4];
        }
        assert!(base.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn params_refresh_keeps_invariants() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let mut p = BinaryConvParams::new(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r), SignConvention::ZeroNegative);
        assert!(p.binary.data().iter().all(|&b| b == 1.0 || b == -1.0));
        assert!(p.scale.iter().all(|&b| b > 0.0));
        p.latent.data_mut()[0] = -p.latent.data()[0];
        p.refresh(SignConvention::ZeroNegative);
        assert_eq!(p.binary, p.latent.map(|x| SignConvention::ZeroNegative.sign(x)));
        let rec = p.reconstructed();
        assert_eq!(rec.shape(), p.latent.shape());
    }
}
