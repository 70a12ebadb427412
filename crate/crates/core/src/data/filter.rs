//! Digital Butterworth high-pass design and causal IIR filtering.
//!
//! The design goes analog prototype -> high-pass transform -> bilinear
//! transform with the corner pre-warped, so the digital response is exactly
//! -3 dB at the requested corner.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::data::ImuSeries;
use crate::error::{invalid, HarError, Result};
use crate::Scalar;

/// Filter order used by the preprocessing chain.
pub const BUTTERWORTH_ORDER: usize = 3;
/// Corner frequency used by the preprocessing chain.
pub const DEFAULT_CORNER_HZ: f64 = 0.3;

/// Transfer function `B(z)/A(z)` in powers of `z⁻¹`, with `a[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoefficients<T> {
    pub b: Vec<T>,
    pub a: Vec<T>,
}

impl<T: Scalar> FilterCoefficients<T> {
    pub fn order(&self) -> usize {
        self.a.len().saturating_sub(1)
    }

    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: T, sample_rate_hz: T) -> Complex<T> {
        let w = T::lit(2.0 * std::f64::consts::PI) * freq_hz / sample_rate_hz;
        let eval = |coeffs: &[T]| {
            coeffs.iter().enumerate().fold(Complex::new(T::zero(), T::zero()), |acc, (k, &c)| {
                let phase = -w * T::from_usize_lossy(k);
                acc + Complex::new(phase.cos(), phase.sin()) * c
            })
        };
        eval(&self.b) / eval(&self.a)
    }

    pub fn gain_at(&self, freq_hz: T, sample_rate_hz: T) -> T {
        self.response(freq_hz, sample_rate_hz).norm()
    }

    /// Roots of the denominator polynomial `z^N + a1 z^(N-1) + ... + aN`.
    pub fn poles(&self) -> Vec<Complex<T>> {
        polynomial_roots(&self.a)
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < T::one())
    }
}

/// Designs a digital high-pass Butterworth filter.
pub fn design_butterworth<T: Scalar>(order: usize, corner_hz: T, sample_rate_hz: T) -> Result<FilterCoefficients<T>> {
    if !(1..=8).contains(&order) {
        return Err(invalid(format!("butterworth order {order} outside 1..=8")));
    }
    if !(sample_rate_hz > T::zero()) || !sample_rate_hz.is_finite() {
        return Err(invalid(format!("sample rate {sample_rate_hz} must be positive")));
    }
    let nyquist = sample_rate_hz / T::lit(2.0);
    if !(corner_hz > T::zero() && corner_hz < nyquist) {
        return Err(invalid(format!("corner {corner_hz} Hz must lie in (0, {nyquist}) Hz")));
    }

    let pi = T::lit(std::f64::consts::PI);
    let two_fs = T::lit(2.0) * sample_rate_hz;
    let warped = two_fs * (pi * corner_hz / sample_rate_hz).tan();

    let n = T::from_usize_lossy(order);
    let mut digital_poles = Vec::with_capacity(order);
    let mut gain_den = Complex::new(T::one(), T::zero());
    for k in 0..order {
        let theta = pi * (T::from_usize_lossy(2 * k + order + 1)) / (T::lit(2.0) * n);
        let proto = Complex::new(theta.cos(), theta.sin());
        // s -> warped / s
        let hp = Complex::new(warped, T::zero()) / proto;
        let fs2 = Complex::new(two_fs, T::zero());
        digital_poles.push((fs2 + hp) / (fs2 - hp));
        gain_den = gain_den * (fs2 - hp);
    }
    // All analog zeros sit at s = 0 and map to z = 1.
    let gain = (Complex::new(two_fs.powi(order as i32), T::zero()) / gain_den).re;

    let b = binomial_difference(order).into_iter().map(|c| gain * T::lit(c)).collect();
    let a = poly_from_roots(&digital_poles).into_iter().map(|c| c.re).collect();
    Ok(FilterCoefficients { b, a })
}

/// Coefficients of `(1 - z⁻¹)^n`.
fn binomial_difference(n: usize) -> Vec<f64> {
    let mut c = vec![1.0];
    for _ in 0..n {
        let mut next = vec![0.0; c.len() + 1];
        for (i, &v) in c.iter().enumerate() {
            next[i] += v;
            next[i + 1] -= v;
        }
        c = next;
    }
    c
}

fn poly_from_roots<T: Scalar>(roots: &[Complex<T>]) -> Vec<Complex<T>> {
    let mut c = vec![Complex::new(T::one(), T::zero())];
    for &r in roots {
        let mut next = vec![Complex::new(T::zero(), T::zero()); c.len() + 1];
        for (i, &v) in c.iter().enumerate() {
            next[i] = next[i] + v;
            next[i + 1] = next[i + 1] - v * r;
        }
        c = next;
    }
    c
}

/// Durand-Kerner iteration on a monic polynomial given highest power first.
fn polynomial_roots<T: Scalar>(coeffs: &[T]) -> Vec<Complex<T>> {
    let degree = coeffs.len().saturating_sub(1);
    if degree == 0 {
        return Vec::new();
    }
    let lead = coeffs[0];
    let monic: Vec<Complex<T>> = coeffs.iter().map(|&c| Complex::new(c / lead, T::zero())).collect();
    let eval = |z: Complex<T>| monic.iter().fold(Complex::new(T::zero(), T::zero()), |acc, &c| acc * z + c);

    let seed = Complex::new(T::lit(0.4), T::lit(0.9));
    let mut roots: Vec<Complex<T>> = (0..degree).map(|k| seed.powi(k as i32)).collect();
    for _ in 0..500 {
        let mut delta = T::zero();
        for i in 0..degree {
            let mut den = Complex::new(T::one(), T::zero());
            for j in 0..degree {
                if i != j {
                    den = den * (roots[i] - roots[j]);
                }
            }
            let step = eval(roots[i]) / den;
            roots[i] = roots[i] - step;
            delta = delta.max(step.norm());
        }
        if delta < T::epsilon() {
            break;
        }
    }
    roots
}

/// Applies the filter causally to every channel, starting from zero state.
pub fn apply_filter<T: Scalar>(coeffs: &FilterCoefficients<T>, series: &ImuSeries<T>) -> Result<ImuSeries<T>> {
    if !series.is_finite() {
        return Err(HarError::NonFinite("filter input series".into()));
    }
    let channels = series.channels().iter().map(|ch| filter_channel(coeffs, ch)).collect::<Vec<_>>();
    ImuSeries::new(channels, series.sample_rate_hz())
}

/// Direct-form II transposed recursion over one signal.
pub fn filter_channel<T: Scalar>(coeffs: &FilterCoefficients<T>, x: &[T]) -> Vec<T> {
    let order = coeffs.order();
    let a0 = coeffs.a[0];
    let b: Vec<T> = coeffs.b.iter().map(|&v| v / a0).collect();
    let a: Vec<T> = coeffs.a.iter().map(|&v| v / a0).collect();
    let mut state = vec![T::zero(); order + 1];
    x.iter()
        .map(|&xn| {
            let yn = b[0] * xn + state[0];
            for i in 1..=order {
                state[i - 1] = b[i] * xn - a[i] * yn + state[i];
            }
            yn
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp3() -> FilterCoefficients<f64> {
        design_butterworth(3, 0.3, 100.0).unwrap()
    }

    #[test]
    fn corner_is_minus_three_db_and_dc_is_rejected() {
        let f = hp3();
        assert_eq!(f.b.len(), 4);
        assert_eq!(f.a.len(), 4);
        assert_eq!(f.a[0], 1.0);
        assert!((f.gain_at(0.3, 100.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3);
        assert!(f.gain_at(0.0, 100.0) < 1e-9);
        assert!((f.gain_at(50.0, 100.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn passband_at_ten_hz() {
        // Analog-equivalent magnitude at the warped frequency ratio.
        let f = hp3();
        let warp = |hz: f64| (std::f64::consts::PI * hz / 100.0).tan();
        let ratio = warp(0.3) / warp(10.0);
        let expected = 1.0 / (1.0 + ratio.powi(6)).sqrt();
        let g = f.gain_at(10.0, 100.0);
        assert!(g >= 0.999);
        assert!((g - expected).abs() < 1e-9);
    }

    #[test]
    fn rejects_corner_at_or_above_nyquist() {
        assert!(design_butterworth(3, 50.0, 100.0).is_err());
        assert!(design_butterworth(3, 70.0, 100.0).is_err());
        assert!(design_butterworth(3, 0.0, 100.0).is_err());
        assert!(design_butterworth(3, 1.0, -1.0).is_err());
    }

    #[test]
    fn pole_finder_recovers_known_roots() {
        // (z - 0.5)(z + 0.25)(z - 0.1)
        let roots = polynomial_roots(&[1.0, -0.35, -0.1, 0.0125]);
        let mut re: Vec<f64> = roots.iter().map(|r| r.re).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (got, want) in re.iter().zip([-0.25, 0.1, 0.5]) {
            assert!((got - want).abs() < 1e-10);
        }
        assert!(hp3().is_stable());
    }

    #[test]
    fn impulse_response_satisfies_difference_equation() {
        let f = hp3();
        let mut x = vec![0.0; 64];
        x[0] = 1.0;
        let h = filter_channel(&f, &x);
        // a * h == b (zero beyond the numerator length)
        for n in 0..64 {
            let conv: f64 = (0..=n.min(3)).map(|k| f.a[k] * h[n - k]).sum();
            let want = if n < f.b.len() { f.b[n] } else { 0.0 };
            assert!((conv - want).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn f32_design_agrees_with_f64() {
        let f32c = design_butterworth(3, 0.3f32, 100.0f32).unwrap();
        let f64c = hp3();
        for (a, b) in f32c.a.iter().zip(&f64c.a) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}
