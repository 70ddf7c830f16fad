//! Central finite-difference gradient checking.
//!
//! Independent of the reverse-mode machinery it validates: the numeric side
//! only ever evaluates forward values.

use crate::autograd::{Tape, Tensor, Var};
use crate::nn::{Binder, ParamStore};

/// Analytic and numeric gradients for every input of a checked function.
#[derive(Debug)]
pub struct GradReport {
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all inputs.
    pub fn relative_error(&self) -> f64 {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            for (&x, &y) in a.data().iter().zip(n.data()) {
                diff += (x - y) * (x - y);
                na += x * x;
                nn += y * y;
            }
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale == 0.0 {
            0.0
        } else {
            diff.sqrt() / scale
        }
    }

    #[track_caller]
    pub fn assert_close(&self, tol: f64) {
        let err = self.relative_error();
        assert!(
            err < tol,
            "gradient mismatch: relative error {err:e} >= {tol:e}\nanalytic {:?}\nnumeric {:?}",
            self.analytic,
            self.numeric
        );
    }
}

/// Evaluates `f` with every input tracked, back-propagates, and compares
/// against central differences with step `eps`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> GradReport
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars);
    let grads = tape.backward(&out);
    let analytic = vars.iter().map(|v| grads.get(v).unwrap()).collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).value().item()
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        numeric.push(g);
    }
    GradReport { analytic, numeric }
}

/// Like [`check_gradients`] but over every tensor of a set of parameter
/// stores. At most `max_per_tensor` entries of each tensor are perturbed
/// (evenly strided) to bound the cost on larger networks.
pub fn check_param_gradients<F>(
    stores: &[ParamStore<f64>],
    eps: f64,
    max_per_tensor: usize,
    f: F,
) -> GradReport
where
    F: for<'t, 's> Fn(&[Binder<'t, 's, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let binders: Vec<_> = stores.iter().map(|s| Binder::trainable(&tape, s)).collect();
    let out = f(&binders);
    let grads = tape.backward(&out);
    let full: Vec<_> = binders.iter().map(|b| b.gradients(&grads)).collect();
    drop(binders);

    let eval = |stores: &[ParamStore<f64>]| -> f64 {
        let tape = Tape::new();
        let binders: Vec<_> = stores.iter().map(|s| Binder::frozen(&tape, s)).collect();
        let v = f(&binders).value().item();
        v
    };
    let mut work = stores.to_vec();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (si, store) in stores.iter().enumerate() {
        for (name, tensor) in store.iter() {
            let stride = tensor.len().div_ceil(max_per_tensor.max(1)).max(1);
            let picks: Vec<usize> = (0..tensor.len()).step_by(stride).collect();
            let g = &full[si][name];
            let mut a = Vec::with_capacity(picks.len());
            let mut n = Vec::with_capacity(picks.len());
            for &j in &picks {
                let orig = tensor.data()[j];
                work[si].get_mut(name).unwrap().data_mut()[j] = orig + eps;
                let plus = eval(&work);
                work[si].get_mut(name).unwrap().data_mut()[j] = orig - eps;
                let minus = eval(&work);
                work[si].get_mut(name).unwrap().data_mut()[j] = orig;
                a.push(g.data()[j]);
                n.push((plus - minus) / (2.0 * eps));
            }
            let len = picks.len();
            analytic.push(Tensor::new(vec![len], a).unwrap());
            numeric.push(Tensor::new(vec![len], n).unwrap());
        }
    }
    GradReport { analytic, numeric }
}
