//! Central finite differences, the reference every analytic gradient in the
//! crate is checked against.

use crate::nncore::{Grads, Parameterized};
use crate::Scalar;

/// `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every parameter. The model is
/// restored exactly after each probe.
pub fn numeric_gradient<T, M, F>(model: &mut M, mut loss: F, step: f64) -> Grads<T>
where
    T: Scalar,
    M: Parameterized<T> + ?Sized,
    F: FnMut(&M) -> T,
{
    let h = T::lit(step);
    let sizes: Vec<usize> = model.param_blocks().iter().map(|b| b.len()).collect();
    let mut blocks = Vec::with_capacity(sizes.len());
    for (b, &n) in sizes.iter().enumerate() {
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = model.param_blocks()[b][i];
            model.param_blocks_mut()[b][i] = orig + h;
            let up = loss(model);
            model.param_blocks_mut()[b][i] = orig - h;
            let down = loss(model);
            model.param_blocks_mut()[b][i] = orig;
            g.push((up - down) / (h + h));
        }
        blocks.push(g);
    }
    Grads { blocks }
}

/// Central differences of a scalar function of a plain vector.
pub fn numeric_gradient_vec<T: Scalar>(x: &[T], mut f: impl FnMut(&[T]) -> T, step: f64) -> Vec<T> {
    let h = T::lit(step);
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (h + h)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`.
pub fn relative_error_vec<T: Scalar>(analytic: &[T], numeric: &[T], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

pub fn max_relative_error<T: Scalar>(analytic: &Grads<T>, numeric: &Grads<T>, floor: f64) -> f64 {
    relative_error_vec(&analytic.flatten(), &numeric.flatten(), floor)
}
