//! Central finite-difference gradient checking.
//!
//! Independent of the reverse sweep: the numeric side only ever evaluates
//! forward values.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Gradients whose magnitude falls below this floor are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let dist = Uniform::new(-1.0, 1.0).expect("valid range");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// Largest relative error between the reverse-mode gradient and a central
/// difference, over every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros_like(t)))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let orig = input.data()[k];
            work[i].data_mut()[k] = orig + FD_STEP;
            let plus = eval(&work);
            work[i].data_mut()[k] = orig - FD_STEP;
            let minus = eval(&work);
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[k], numeric));
        }
    }
    worst
}

/// Finite-difference check of selected parameter entries of a model loss.
///
/// `loss` evaluates the scalar objective for a given parameter store and
/// returns the graph (with backward already run when `with_grad`).
pub fn check_param_entries<F>(store: &ParamStore, entries: &[(ParamId, usize)], loss: F) -> f64
where
    F: Fn(&ParamStore, bool) -> (f64, Vec<(ParamId, Tensor)>),
{
    let (_, grads) = loss(store, true);
    let mut worst: f64 = 0.0;
    for &(id, k) in entries {
        let analytic = grads
            .iter()
            .find(|(gid, _)| *gid == id)
            .map_or(0.0, |(_, t)| t.data()[k]);
        let mut plus = store.clone();
        plus.value_mut(id).data_mut()[k] += FD_STEP;
        let mut minus = store.clone();
        minus.value_mut(id).data_mut()[k] -= FD_STEP;
        let numeric = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}
