use rand::Rng;

use crate::error::{invalid, shape, HarError, Result};
use crate::explain::{shapley_kernel_weight, CoalitionSample, ShapExplanation};
use crate::linalg::{Cholesky, Matrix};
use crate::rng::HarRng;
use crate::Scalar;

/// Largest coalition space enumerated exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 4096;
pub const EXACT_MAX_PLAYERS: usize = 10;
const REGRESSION_JITTER: f64 = 1e-10;

/// Players of the attribution game. Each player owns one or more input
/// coordinates that are switched between `x` and the background together.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGroups {
    pub members: Vec<Vec<usize>>,
    pub names: Vec<String>,
}

impl FeatureGroups {
    /// One player per input coordinate, named `x0, x1, ...`.
    pub fn singletons(n: usize) -> Self {
        Self { members: (0..n).map(|i| vec![i]).collect(), names: (0..n).map(|i| format!("x{i}")).collect() }
    }

    /// Player `i` owns coordinates `i` and `i + n` of a `2n` input, matching
    /// the classifier's `mean ++ log1p(variance)` layout.
    pub fn paired(names: Vec<String>) -> Self {
        let n = names.len();
        Self { members: (0..n).map(|i| vec![i, i + n]).collect(), names }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        if self.members.is_empty() || self.names.len() != self.members.len() {
            return Err(invalid("feature groups need at least one member and one name per group"));
        }
        let mut seen = vec![false; input_dim];
        for &i in self.members.iter().flatten() {
            if i >= input_dim || seen[i] {
                return Err(invalid(format!(
                    "feature group index {i} out of range or repeated (input dim {input_dim})"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Componentwise mean of the background set.
pub fn background_mean<T: Scalar>(background: &[Vec<T>]) -> Result<Vec<T>> {
    let first = background.first().ok_or_else(|| invalid("empty SHAP background"))?;
    let mut mean = vec![T::zero(); first.len()];
    for b in background {
        if b.len() != mean.len() {
            return Err(shape(format!("background rows of length {} and {}", mean.len(), b.len())));
        }
        for (m, &v) in mean.iter_mut().zip(b) {
            *m += v;
        }
    }
    let n = T::from_usize_lossy(background.len());
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

fn masked_input<T: Scalar>(x: &[T], base: &[T], groups: &FeatureGroups, mask: &[bool]) -> Vec<T> {
    let mut z = base.to_vec();
    for (g, &on) in groups.members.iter().zip(mask) {
        if on {
            for &i in g {
                z[i] = x[i];
            }
        }
    }
    z
}

fn eval<T: Scalar, F>(model_fn: &F, input: &[T], k: Option<usize>) -> Result<Vec<T>>
where
    F: Fn(&[T]) -> Result<Vec<T>>,
{
    let y = model_fn(input)?;
    if let Some(k) = k {
        if y.len() != k {
            return Err(shape(format!("model returned {} outputs, expected {k}", y.len())));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(HarError::NonFinite("model output during attribution".into()));
    }
    Ok(y)
}

fn mask_from_bits(bits: usize, m: usize) -> Vec<bool> {
    (0..m).map(|i| bits >> i & 1 == 1).collect()
}

/// Every proper, non-empty coalition with its kernel weight.
pub fn exhaustive_coalitions(m: usize) -> Result<Vec<CoalitionSample>> {
    if m == 0 || m >= usize::BITS as usize || (1usize << m) > EXHAUSTIVE_LIMIT {
        return Err(invalid(format!("{m} players is beyond exhaustive enumeration")));
    }
    (1..(1usize << m) - 1)
        .map(|bits| {
            let mask = mask_from_bits(bits, m);
            let s = bits.count_ones() as usize;
            Ok(CoalitionSample { mask, weight: shapley_kernel_weight(m, s)? })
        })
        .collect()
}

/// `n` coalitions drawn from the kernel distribution: a size `s` with
/// probability proportional to `1 / (s (M − s))`, then a uniform subset of
/// that size. Draws come in complementary pairs and carry unit weight.
pub fn sampled_coalitions(m: usize, n: usize, rng: &mut HarRng) -> Result<Vec<CoalitionSample>> {
    if m < 2 || n < 2 {
        return Err(invalid(format!("sampling needs M ≥ 2 and at least 2 coalitions (M={m}, n={n})")));
    }
    let size_w: Vec<f64> = (1..m).map(|s| 1.0 / (s * (m - s)) as f64).collect();
    let total: f64 = size_w.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut idx: Vec<usize> = (0..m).collect();
    while out.len() < n {
        let mut u = rng.random::<f64>() * total;
        let mut s = m - 1;
        for (i, &w) in size_w.iter().enumerate() {
            if u < w {
                s = i + 1;
                break;
            }
            u -= w;
        }
        for i in 0..s {
            let j = rng.random_range(i..m);
            idx.swap(i, j);
        }
        let mut mask = vec![false; m];
        idx[..s].iter().for_each(|&i| mask[i] = true);
        let complement: Vec<bool> = mask.iter().map(|b| !b).collect();
        out.push(CoalitionSample { mask, weight: 1.0 });
        if out.len() < n {
            out.push(CoalitionSample { mask: complement, weight: 1.0 });
        }
    }
    Ok(out)
}

/// Weighted linear regression of coalition values on masks with
/// `Σ φ = f(x) − f(base)` enforced exactly by eliminating the last player.
fn solve_constrained<T: Scalar>(
    coalitions: &[CoalitionSample],
    values: &[Vec<T>],
    delta: &[T],
    m: usize,
) -> Result<Vec<Vec<T>>> {
    let k = delta.len();
    let mut phi = vec![vec![T::zero(); k]; m];
    if m == 1 {
        phi[0] = delta.to_vec();
        return Ok(phi);
    }
    let p = m - 1;
    let mut ata: Matrix<T> = Matrix::zeros(p, p);
    let mut aty: Matrix<T> = Matrix::zeros(p, k);
    for (c, v) in coalitions.iter().zip(values) {
        let last = if c.mask[p] { T::one() } else { T::zero() };
        let row: Vec<T> = (0..p).map(|i| if c.mask[i] { T::one() } else { T::zero() } - last).collect();
        let w = T::lit(c.weight);
        for i in 0..p {
            if row[i] == T::zero() {
                continue;
            }
            let wi = w * row[i];
            for j in 0..p {
                ata[(i, j)] += wi * row[j];
            }
            for kk in 0..k {
                aty[(i, kk)] += wi * (v[kk] - last * delta[kk]);
            }
        }
    }
    let scale = (ata.trace() / T::from_usize_lossy(p)).max(T::one());
    let chol = Cholesky::with_jitter(&ata, T::lit(REGRESSION_JITTER) * scale)
        .map_err(|e| HarError::NotPositiveDefinite(format!("SHAP regression system: {e}")))?;
    let sol = chol.solve_matrix(&aty);
    for kk in 0..k {
        let mut rest = T::zero();
        for i in 0..p {
            phi[i][kk] = sol[(i, kk)];
            rest += sol[(i, kk)];
        }
        phi[p][kk] = delta[kk] - rest;
    }
    Ok(phi)
}

/// KernelSHAP attributions of `model_fn(x)` against the mean of
/// `background`. Coalitions are enumerated when `2^M ≤ 4096`; otherwise
/// `n_coalitions` are sampled from `rng`.
pub fn kernel_shap<T: Scalar, F>(
    model_fn: &F,
    x: &[T],
    background: &[Vec<T>],
    groups: &FeatureGroups,
    n_coalitions: usize,
    rng: &mut HarRng,
) -> Result<ShapExplanation<T>>
where
    F: Fn(&[T]) -> Result<Vec<T>>,
{
    groups.validate(x.len())?;
    let base = background_mean(background)?;
    if base.len() != x.len() {
        return Err(shape(format!("input of length {} against background of length {}", x.len(), base.len())));
    }
    let m = groups.len();
    let base_value = eval(model_fn, &base, None)?;
    let k = base_value.len();
    let output = eval(model_fn, x, Some(k))?;
    let delta: Vec<T> = output.iter().zip(&base_value).map(|(&a, &b)| a - b).collect();

    let coalitions = if m == 1 {
        Vec::new()
    } else if m < usize::BITS as usize && (1usize << m) <= EXHAUSTIVE_LIMIT {
        exhaustive_coalitions(m)?
    } else {
        sampled_coalitions(m, n_coalitions, rng)?
    };
    let values = coalitions
        .iter()
        .map(|c| {
            let y = eval(model_fn, &masked_input(x, &base, groups, &c.mask), Some(k))?;
            Ok(y.iter().zip(&base_value).map(|(&a, &b)| a - b).collect())
        })
        .collect::<Result<Vec<Vec<T>>>>()?;
    let phi = solve_constrained(&coalitions, &values, &delta, m)?;
    let feature_values = groups.members.iter().map(|g| x[g[0]]).collect();
    Ok(ShapExplanation { base_value, phi, output, feature_values, feature_names: groups.names.clone() })
}

/// Exact Shapley values by summing marginal contributions over all subsets
/// with weights `|S|! (M − |S| − 1)! / M!`.
pub fn exact_shapley<T: Scalar, F>(
    model_fn: &F,
    x: &[T],
    background: &[Vec<T>],
    groups: &FeatureGroups,
) -> Result<Vec<Vec<T>>>
where
    F: Fn(&[T]) -> Result<Vec<T>>,
{
    groups.validate(x.len())?;
    let m = groups.len();
    if m > EXACT_MAX_PLAYERS {
        return Err(invalid(format!("exact Shapley limited to {EXACT_MAX_PLAYERS} players, got {m}")));
    }
    let base = background_mean(background)?;
    if base.len() != x.len() {
        return Err(shape(format!("input of length {} against background of length {}", x.len(), base.len())));
    }
    let values = (0..1usize << m)
        .map(|bits| eval(model_fn, &masked_input(x, &base, groups, &mask_from_bits(bits, m)), None))
        .collect::<Result<Vec<_>>>()?;
    let k = values[0].len();
    if values.iter().any(|v| v.len() != k) {
        return Err(shape("model output length varies across coalitions"));
    }
    let mut fact = vec![1.0f64; m + 1];
    for i in 1..=m {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut phi = vec![vec![T::zero(); k]; m];
    for (i, row) in phi.iter_mut().enumerate() {
        for bits in 0..1usize << m {
            if bits >> i & 1 == 1 {
                continue;
            }
            let s = bits.count_ones() as usize;
            let w = T::lit(fact[s] * fact[m - s - 1] / fact[m]);
            let with = &values[bits | 1 << i];
            for kk in 0..k {
                row[kk] += w * (with[kk] - values[bits][kk]);
            }
        }
    }
    Ok(phi)
}
