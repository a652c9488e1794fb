//! Central finite-difference gradient checking for layers.
//!
//! The scalar probe loss is `sum(y * w)` with fixed pseudo-random weights so
//! every output element influences the loss. Checks run in f64.

use ndarray::IxDyn;

use super::{Layer, Tensor};

/// Deterministic pseudo-random probe weights in [-1, 1], derived from shape.
pub fn probe_weights(shape: &[usize]) -> Tensor<f64> {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    for &s in shape {
        state = state.wrapping_mul(0x100_0000_01B3).wrapping_add(s as u64);
    }
    Tensor::from_shape_simple_fn(IxDyn(shape), move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state % 2_000_001) as f64 / 1_000_000.0 - 1.0
    })
}

/// Central finite differences of `f` at `x`.
pub fn numeric_gradient<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut grad = Tensor::<f64>::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + h;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - h;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * h);
    }
    grad
}

fn rel_err(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    // below finite-difference noise either way
    if diff < 1e-7 {
        return 0.0;
    }
    diff / (a.abs() + n.abs()).max(1e-6)
}

/// Worst relative error between two gradient tensors.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Outcome of [`check_layer_gradients`].
#[derive(Debug)]
pub struct GradCheckReport {
    pub input_err: f64,
    pub param_errs: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.param_errs
            .iter()
            .map(|(_, e)| *e)
            .fold(self.input_err, f64::max)
    }
}

/// Compares a layer's analytic input and parameter gradients against central
/// finite differences of the probe loss, element by element.
pub fn check_layer_gradients<L: Layer<f64>>(
    layer: &mut L,
    x: &Tensor<f64>,
    h: f64,
) -> GradCheckReport {
    // analytic pass
    layer.visit_params("", &mut |_, p| p.zero_grad());
    let y = layer.forward(x, true);
    let w = probe_weights(y.shape());
    let gx = layer.backward(&w);

    let mut analytic_params: Vec<(String, Tensor<f64>)> = Vec::new();
    layer.visit_params("", &mut |name, p| {
        analytic_params.push((name.to_string(), p.grad.clone()));
    });

    let loss = |l: &mut L, input: &Tensor<f64>| -> f64 {
        let out = l.forward(input, false);
        out.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
    };

    // numeric input gradient
    let mut probe = x.clone();
    let mut gx_num = Tensor::<f64>::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let orig = probe.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + h;
        let up = loss(layer, &probe);
        probe.as_slice_mut().unwrap()[idx] = orig - h;
        let down = loss(layer, &probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        gx_num.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * h);
    }
    let input_err = max_rel_err(&gx, &gx_num);

    // numeric parameter gradients
    let mut param_errs = Vec::new();
    for (name, analytic) in &analytic_params {
        let n_el = analytic.len();
        let mut worst = 0.0f64;
        for idx in 0..n_el {
            let mut orig = 0.0;
            layer.visit_params("", &mut |pname, p| {
                if pname == name {
                    orig = p.value.as_slice().unwrap()[idx];
                    p.value.as_slice_mut().unwrap()[idx] = orig + h;
                }
            });
            let up = loss(layer, x);
            layer.visit_params("", &mut |pname, p| {
                if pname == name {
                    p.value.as_slice_mut().unwrap()[idx] = orig - h;
                }
            });
            let down = loss(layer, x);
            layer.visit_params("", &mut |pname, p| {
                if pname == name {
                    p.value.as_slice_mut().unwrap()[idx] = orig;
                }
            });
            let numeric = (up - down) / (2.0 * h);
            let analytic_v = analytic.as_slice().unwrap()[idx];
            worst = worst.max(rel_err(analytic_v, numeric));
        }
        param_errs.push((name.clone(), worst));
    }

    GradCheckReport {
        input_err,
        param_errs,
    }
}
