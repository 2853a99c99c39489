//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function, so it is an oracle
//! independent of the reverse-mode rules it validates.

use crate::tensor::Tensor;

/// Default step for central differences at fp64.
pub const FD_STEP: f64 = 1e-5;

/// Relative error used throughout: `|a - b| / (|a| + |b| + 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-8)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Outcome of comparing an analytic gradient with its numeric estimate.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn compare(analytic: &Tensor, numeric: &Tensor) -> GradCheck {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = rel_err(a, n);
        if e > worst.max_rel_err {
            worst = GradCheck {
                max_rel_err: e,
                worst_index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    worst
}
