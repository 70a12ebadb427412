//! Encoder objectives and their gradients.
//!
//! Each `*_grad` function returns the loss value together with the gradient
//! with respect to every vector argument, in argument order.

use crate::linalg::sq_dist;
use crate::Scalar;

/// Weight of the reconstruction term in the combined objective.
pub const RECON_WEIGHT: f64 = 0.7;
/// Weight shared by the latent KL and metric terms.
pub const REGULARIZER_WEIGHT: f64 = 0.3;

/// `max(‖za − zp‖² − ‖za − zn‖² + margin, 0)`.
pub fn triplet_loss<T: Scalar>(za: &[T], zp: &[T], zn: &[T], margin: T) -> T {
    (sq_dist(za, zp) - sq_dist(za, zn) + margin).max(T::zero())
}

pub fn triplet_loss_grad<T: Scalar>(za: &[T], zp: &[T], zn: &[T], margin: T) -> (T, [Vec<T>; 3]) {
    let d = za.len();
    let loss = triplet_loss(za, zp, zn, margin);
    let mut g = [vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]];
    if loss > T::zero() {
        let two = T::lit(2.0);
        for i in 0..d {
            g[0][i] = two * (zn[i] - zp[i]);
            g[1][i] = -two * (za[i] - zp[i]);
            g[2][i] = two * (za[i] - zn[i]);
        }
    }
    (loss, g)
}

/// `max(‖zi − zj‖² − ‖zi − zk‖² + α₁, 0) + max(‖zi − zj‖² − ‖zl − zk‖² + α₂, 0)`
/// where `(i, j)` share a class and `k`, `l` come from two other classes.
pub fn quadruplet_loss<T: Scalar>(zi: &[T], zj: &[T], zk: &[T], zl: &[T], alpha1: T, alpha2: T) -> T {
    let pos = sq_dist(zi, zj);
    (pos - sq_dist(zi, zk) + alpha1).max(T::zero()) + (pos - sq_dist(zl, zk) + alpha2).max(T::zero())
}

pub fn quadruplet_loss_grad<T: Scalar>(
    zi: &[T],
    zj: &[T],
    zk: &[T],
    zl: &[T],
    alpha1: T,
    alpha2: T,
) -> (T, [Vec<T>; 4]) {
    let d = zi.len();
    let two = T::lit(2.0);
    let pos = sq_dist(zi, zj);
    let h1 = pos - sq_dist(zi, zk) + alpha1;
    let h2 = pos - sq_dist(zl, zk) + alpha2;
    let mut g = [vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]];
    if h1 > T::zero() {
        for i in 0..d {
            g[0][i] += two * (zk[i] - zj[i]);
            g[1][i] -= two * (zi[i] - zj[i]);
            g[2][i] += two * (zi[i] - zk[i]);
        }
    }
    if h2 > T::zero() {
        for i in 0..d {
            g[0][i] += two * (zi[i] - zj[i]);
            g[1][i] -= two * (zi[i] - zj[i]);
            g[2][i] += two * (zl[i] - zk[i]);
            g[3][i] -= two * (zl[i] - zk[i]);
        }
    }
    (h1.max(T::zero()) + h2.max(T::zero()), g)
}

/// `KL(N(mean, diag(variance)) ‖ N(0, I)) = ½ Σ (v + m² − 1 − ln v)`.
pub fn latent_kl_loss<T: Scalar>(mean: &[T], variance: &[T]) -> T {
    let half = T::lit(0.5);
    mean.iter().zip(variance).map(|(&m, &v)| half * (v + m * m - T::one() - v.ln())).sum()
}

/// Gradient of [`latent_kl_loss`] with respect to the mean and the
/// log-variance `s = ln v`: `(m, ½(eˢ − 1))`.
pub fn latent_kl_grad<T: Scalar>(mean: &[T], log_variance: &[T]) -> (T, Vec<T>, Vec<T>) {
    let half = T::lit(0.5);
    let variance: Vec<T> = log_variance.iter().map(|s| s.exp()).collect();
    let loss = latent_kl_loss(mean, &variance);
    let gs = variance.iter().map(|&v| half * (v - T::one())).collect();
    (loss, mean.to_vec(), gs)
}

/// Mean squared error over every entry.
pub fn reconstruction_loss<T: Scalar>(window: &[T], reconstructed: &[T]) -> T {
    let n = T::from_usize_lossy(window.len());
    window.iter().zip(reconstructed).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n
}

/// Gradient of [`reconstruction_loss`] with respect to `reconstructed`.
pub fn reconstruction_grad<T: Scalar>(window: &[T], reconstructed: &[T]) -> (T, Vec<T>) {
    let scale = T::lit(2.0) / T::from_usize_lossy(window.len());
    let g = window.iter().zip(reconstructed).map(|(&a, &b)| scale * (b - a)).collect();
    (reconstruction_loss(window, reconstructed), g)
}

/// `0.7·recon + 0.3·(kl + metric)`.
pub fn total_loss<T: Scalar>(recon: T, kl: T, metric: T) -> T {
    T::lit(RECON_WEIGHT) * recon + T::lit(REGULARIZER_WEIGHT) * (kl + metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::{numeric_gradient_vec, relative_error_vec};
    use crate::rng;

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss(&[0.0, 0.0], &[0.0, 0.0], &[3.0, 0.0], 0.5), 0.0);
        assert_eq!(triplet_loss(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], 0.5), 0.5);
        assert_eq!(triplet_loss(&[0.0, 0.0], &[0.0, 1.0], &[3.0, 0.0], 0.5), 0.0);
        assert_eq!(triplet_loss::<f64>(&[0.0], &[1.0], &[0.5], 0.5), 1.25);
    }

    #[test]
    fn quadruplet_examples() {
        let p = [0.2, -0.1];
        assert_eq!(quadruplet_loss(&p, &p, &p, &p, 0.5, 0.25), 0.75);
        let (zi, zj, zk, zl) = ([0.0, 0.0], [0.0, 1.0], [3.0, 0.0], [0.0, 3.0]);
        assert_eq!(quadruplet_loss(&zi, &zj, &zk, &zl, 0.5, 0.5), 0.0);
        assert_eq!(quadruplet_loss(&zi, &zi, &[5.0, 0.0], &[0.0, 5.0], 0.5, 0.25), 0.0);
    }

    #[test]
    fn latent_kl_examples() {
        assert_eq!(latent_kl_loss(&[0.0; 4], &[1.0; 4]), 0.0);
        assert!((latent_kl_loss::<f64>(&[1.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_and_total_examples() {
        let a = [1.0, -2.0, 0.5];
        assert_eq!(reconstruction_loss(&a, &a), 0.0);
        assert_eq!(reconstruction_loss(&a, &[2.0, -1.0, 1.5]), 1.0);
        // (1 + 4 + 0 + 9) / 4
        assert!((reconstruction_loss::<f64>(&[0.0, 0.0, 1.0, 1.0], &[1.0, 2.0, 1.0, -2.0]) - 3.5).abs() < 1e-15);
        assert!((total_loss::<f64>(1.0, 0.0, 0.0) - 0.7).abs() < 1e-15);
        assert!((total_loss::<f64>(0.0, 1.0, 1.0) - 0.6).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::seeded(21);
        for _ in 0..20 {
            let v: Vec<f64> = rng::normal_vec(&mut r, 16);
            let (a, rest) = v.split_at(4);
            let (p, rest) = rest.split_at(4);
            let (n, l) = rest.split_at(4);

            let (_, g) = triplet_loss_grad(a, p, n, 1.5);
            let flat = |parts: &[&[f64]]| parts.concat();
            let num =
                numeric_gradient_vec(&flat(&[a, p, n]), |x| triplet_loss(&x[0..4], &x[4..8], &x[8..12], 1.5), 1e-5);
            assert!(relative_error_vec(&g.concat(), &num, 1e-6) < 1e-4);

            let (_, g) = quadruplet_loss_grad(a, p, n, l, 1.5, 1.0);
            let num = numeric_gradient_vec(
                &flat(&[a, p, n, l]),
                |x| quadruplet_loss(&x[0..4], &x[4..8], &x[8..12], &x[12..16], 1.5, 1.0),
                1e-5,
            );
            assert!(relative_error_vec(&g.concat(), &num, 1e-6) < 1e-4);

            let (_, gm, gs) = latent_kl_grad(a, p);
            let num = numeric_gradient_vec(
                &flat(&[a, p]),
                |x| {
                    let var: Vec<f64> = x[4..8].iter().map(|s| s.exp()).collect();
                    latent_kl_loss(&x[0..4], &var)
                },
                1e-5,
            );
            assert!(relative_error_vec(&[gm, gs].concat(), &num, 1e-6) < 1e-4);

            let (_, g) = reconstruction_grad(a, p);
            let num = numeric_gradient_vec(p, |x| reconstruction_loss(a, x), 1e-5);
            assert!(relative_error_vec(&g, &num, 1e-6) < 1e-4);
        }
    }
}
