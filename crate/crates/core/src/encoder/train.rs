use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImuWindow;
use crate::encoder::loss::{
    latent_kl_grad, quadruplet_loss_grad, reconstruction_grad, total_loss, triplet_loss_grad, RECON_WEIGHT,
    REGULARIZER_WEIGHT,
};
use crate::encoder::{
    clamp_logvar, mine_pairs, EncoderModel, MetricConfig, MetricMode, MinedTuple, DEFAULT_LATENT_DIM, LOGVAR_MAX,
    LOGVAR_MIN,
};
use crate::error::{invalid, shape, HarError, Result};
use crate::nncore::{Adam, AdamConfig, Grads, MlpTrace, Parameterized};
use crate::rng::{self, HarRng};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub adam: AdamConfig,
    pub metric: MetricConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
            hidden: vec![128, 64],
            epochs: 30,
            classes_per_batch: 4,
            samples_per_class: 8,
            adam: AdamConfig::default(),
            metric: MetricConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.metric.validate()?;
        let min_classes = if self.metric.mode == MetricMode::Quadruplet { 3 } else { 2 };
        if self.classes_per_batch < min_classes || self.samples_per_class < 2 {
            return Err(invalid(format!(
                "batches of {} classes x {} samples are too small for {:?} mining",
                self.classes_per_batch, self.samples_per_class, self.metric.mode
            )));
        }
        if self.epochs == 0 || self.latent_dim == 0 || self.hidden.is_empty() {
            return Err(invalid("encoder needs epochs, a latent dim and hidden layers"));
        }
        Ok(())
    }
}

/// Loss components averaged over one batch (or one epoch in a trace).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLoss<T> {
    pub recon: T,
    pub kl: T,
    pub metric: T,
    pub total: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub metric: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedEncoder<T> {
    pub model: EncoderModel<T>,
    pub trace: Vec<EpochLoss>,
}

struct SampleForward<T> {
    trunk: MlpTrace<T>,
    mean: Vec<T>,
    logvar_raw: Vec<T>,
    logvar: Vec<T>,
    decoder: MlpTrace<T>,
}

fn forward_sample<T: Scalar>(model: &EncoderModel<T>, x: &[T], eps: &[T]) -> Result<SampleForward<T>> {
    if x.len() != model.input_dim || eps.len() != model.latent_dim {
        return Err(shape(format!(
            "sample of {} values and {} noise draws for a {}→{} encoder",
            x.len(),
            eps.len(),
            model.input_dim,
            model.latent_dim
        )));
    }
    let trunk = model.trunk.forward_trace(x)?;
    let h = trunk.output();
    let mean = model.mean_head.forward(h)?;
    let logvar_raw = model.logvar_head.forward(h)?;
    let logvar: Vec<T> = logvar_raw.iter().map(|&s| clamp_logvar(s)).collect();
    let half = T::lit(0.5);
    let z: Vec<T> = mean.iter().zip(&logvar).zip(eps).map(|((&m, &s), &e)| m + (half * s).exp() * e).collect();
    let decoder = model.decoder.forward_trace(&z)?;
    Ok(SampleForward { trunk, mean, logvar_raw, logvar, decoder })
}

/// Adds `scale · ∂metric/∂mean` for every mined tuple into `dmean` and
/// returns the summed metric loss.
fn metric_terms<T: Scalar>(
    means: &[Vec<T>],
    tuples: &[MinedTuple],
    cfg: &MetricConfig,
    scale: T,
    dmean: &mut [Vec<T>],
) -> T {
    let mut total = T::zero();
    let add = |idx: usize, g: &[T], dmean: &mut [Vec<T>]| {
        for (a, &b) in dmean[idx].iter_mut().zip(g) {
            *a += scale * b;
        }
    };
    for t in tuples {
        match *t {
            MinedTuple::Triplet { anchor, positive, negative } => {
                let (l, g) =
                    triplet_loss_grad(&means[anchor], &means[positive], &means[negative], T::lit(cfg.alpha_margin));
                total += l;
                for (idx, gi) in [anchor, positive, negative].into_iter().zip(&g) {
                    add(idx, gi, dmean);
                }
            }
            MinedTuple::Quadruplet { i, j, k, l } => {
                let (loss, g) = quadruplet_loss_grad(
                    &means[i],
                    &means[j],
                    &means[k],
                    &means[l],
                    T::lit(cfg.alpha1),
                    T::lit(cfg.alpha2),
                );
                total += loss;
                for (idx, gi) in [i, j, k, l].into_iter().zip(&g) {
                    add(idx, gi, dmean);
                }
            }
        }
    }
    total
}

fn check_batch<T: Scalar>(
    model: &EncoderModel<T>,
    windows: &[&[T]],
    noise: &[Vec<T>],
    tuples: &[MinedTuple],
) -> Result<()> {
    if windows.is_empty() || noise.len() != windows.len() {
        return Err(shape(format!("{} windows with {} noise vectors", windows.len(), noise.len())));
    }
    let n = windows.len();
    let in_range = |t: &MinedTuple| match *t {
        MinedTuple::Triplet { anchor, positive, negative } => anchor.max(positive).max(negative) < n,
        MinedTuple::Quadruplet { i, j, k, l } => i.max(j).max(k).max(l) < n,
    };
    if !tuples.iter().all(in_range) {
        return Err(invalid("mined tuple indexes outside the batch"));
    }
    if windows.iter().any(|w| w.len() != model.input_dim) {
        return Err(shape("window length does not match the encoder input"));
    }
    Ok(())
}

/// Batch objective for fixed noise and fixed mined tuples:
/// `0.7·mean(recon) + 0.3·(mean(KL) + mean(metric))`.
pub fn batch_loss<T: Scalar>(
    model: &EncoderModel<T>,
    windows: &[&[T]],
    noise: &[Vec<T>],
    tuples: &[MinedTuple],
    cfg: &MetricConfig,
) -> Result<BatchLoss<T>> {
    batch_gradients_impl(model, windows, noise, tuples, cfg, false).map(|(l, _)| l)
}

/// [`batch_loss`] together with its gradient with respect to every
/// encoder and decoder parameter.
pub fn batch_gradients<T: Scalar>(
    model: &EncoderModel<T>,
    windows: &[&[T]],
    noise: &[Vec<T>],
    tuples: &[MinedTuple],
    cfg: &MetricConfig,
) -> Result<(BatchLoss<T>, Grads<T>)> {
    batch_gradients_impl(model, windows, noise, tuples, cfg, true).map(|(l, g)| (l, g.expect("requested")))
}

fn batch_gradients_impl<T: Scalar>(
    model: &EncoderModel<T>,
    windows: &[&[T]],
    noise: &[Vec<T>],
    tuples: &[MinedTuple],
    cfg: &MetricConfig,
    want_grads: bool,
) -> Result<(BatchLoss<T>, Option<Grads<T>>)> {
    check_batch(model, windows, noise, tuples)?;
    let n = windows.len();
    let nf = T::from_usize_lossy(n);
    let forwards =
        windows.par_iter().zip(noise).map(|(x, e)| forward_sample(model, x, e)).collect::<Result<Vec<_>>>()?;

    let w_recon = T::lit(RECON_WEIGHT);
    let w_reg = T::lit(REGULARIZER_WEIGHT);
    let means: Vec<Vec<T>> = forwards.iter().map(|f| f.mean.clone()).collect();
    let mut dmean = vec![vec![T::zero(); model.latent_dim]; n];
    let metric_scale = if tuples.is_empty() { T::zero() } else { w_reg / T::from_usize_lossy(tuples.len()) };
    let metric_sum = metric_terms(&means, tuples, cfg, metric_scale, &mut dmean);
    let metric = if tuples.is_empty() { T::zero() } else { metric_sum / T::from_usize_lossy(tuples.len()) };

    let per_sample = forwards
        .par_iter()
        .zip(windows.par_iter())
        .zip(noise.par_iter())
        .zip(dmean.into_par_iter())
        .map(|(((f, x), eps), dm)| sample_backward(model, f, x, eps, dm, w_recon / nf, w_reg / nf, want_grads))
        .collect::<Result<Vec<_>>>()?;

    let mut recon = T::zero();
    let mut kl = T::zero();
    let mut grads = want_grads.then(|| model.zero_grads());
    for (r, k, g) in per_sample {
        recon += r;
        kl += k;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.add_assign(&g);
        }
    }
    recon /= nf;
    kl /= nf;
    let total = total_loss(recon, kl, metric);
    if let Some(g) = &grads {
        g.check_finite("encoder")?;
    }
    Ok((BatchLoss { recon, kl, metric, total }, grads))
}

#[allow(clippy::too_many_arguments)]
fn sample_backward<T: Scalar>(
    model: &EncoderModel<T>,
    f: &SampleForward<T>,
    x: &[T],
    eps: &[T],
    mut dmean: Vec<T>,
    recon_scale: T,
    kl_scale: T,
    want_grads: bool,
) -> Result<(T, T, Option<Grads<T>>)> {
    let (recon, drecon) = reconstruction_grad(x, f.decoder.output());
    let (kl, kl_dm, kl_ds) = latent_kl_grad(&f.mean, &f.logvar);
    if !want_grads {
        return Ok((recon, kl, None));
    }
    let mut g = model.zero_grads();
    let n_trunk = 2 * model.trunk.layers.len();
    let (trunk_g, rest) = g.blocks.split_at_mut(n_trunk);
    let (head_g, dec_g) = rest.split_at_mut(4);

    let dy: Vec<T> = drecon.iter().map(|&v| v * recon_scale).collect();
    let dz = model.decoder.backward(&f.decoder, &dy, dec_g)?;

    let half = T::lit(0.5);
    let (lo, hi) = (T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX));
    let mut ds = vec![T::zero(); model.latent_dim];
    for i in 0..model.latent_dim {
        dmean[i] += dz[i] + kl_scale * kl_dm[i];
        let raw = f.logvar_raw[i];
        if raw > lo && raw < hi {
            ds[i] = dz[i] * half * (half * f.logvar[i]).exp() * eps[i] + kl_scale * kl_ds[i];
        }
    }
    let h = f.trunk.output();
    let (mean_g, lv_g) = head_g.split_at_mut(2);
    let (mw, mb) = mean_g.split_at_mut(1);
    let mut dh = model.mean_head.backward(h, &f.mean, &dmean, &mut mw[0], &mut mb[0]);
    let (lw, lb) = lv_g.split_at_mut(1);
    let dh_lv = model.logvar_head.backward(h, &f.logvar_raw, &ds, &mut lw[0], &mut lb[0]);
    for (a, b) in dh.iter_mut().zip(dh_lv) {
        *a += b;
    }
    model.trunk.backward(&f.trunk, &dh, trunk_g)?;
    Ok((recon, kl, Some(g)))
}

/// Draws `classes_per_batch` classes and `samples_per_class` windows of each,
/// cycling through a reshuffled pool per class.
struct BatchSampler {
    pools: Vec<Vec<usize>>,
    cursor: Vec<usize>,
}

impl BatchSampler {
    fn new(labels: &[usize], num_classes: usize) -> Self {
        let mut pools = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            pools[l].push(i);
        }
        pools.retain(|p| !p.is_empty());
        let cursor = vec![0; pools.len()];
        Self { pools, cursor }
    }

    fn shuffle(&mut self, rng: &mut HarRng) {
        for (p, c) in self.pools.iter_mut().zip(&mut self.cursor) {
            p.shuffle(rng);
            *c = 0;
        }
    }

    fn next_batch(&mut self, classes: usize, per_class: usize, rng: &mut HarRng) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.pools.len()).collect();
        order.shuffle(rng);
        let mut out = Vec::with_capacity(classes * per_class);
        for &c in order.iter().take(classes) {
            let take = per_class.min(self.pools[c].len());
            for _ in 0..take {
                if self.cursor[c] == self.pools[c].len() {
                    self.pools[c].shuffle(rng);
                    self.cursor[c] = 0;
                }
                out.push(self.pools[c][self.cursor[c]]);
                self.cursor[c] += 1;
            }
        }
        out
    }
}

/// Trains an encoder on labelled windows. Every epoch visits about as many
/// samples as the training set holds; the trace records the epoch means of
/// each loss component.
pub fn train_encoder<T: Scalar>(
    train: &[ImuWindow<T>],
    config: &EncoderConfig,
    seed: u64,
) -> Result<TrainedEncoder<T>> {
    config.validate()?;
    let labels = train
        .iter()
        .map(|w| w.label.ok_or_else(|| invalid(format!("training window {} has no label", w.id))))
        .collect::<Result<Vec<_>>>()?;
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let window_len = train.first().map_or(0, |w| w.len());

    let mut init_rng = rng::stream(seed, 0);
    let mut model = EncoderModel::for_windows(window_len, &config.hidden, config.latent_dim, &mut init_rng)?;
    let mut sampler = BatchSampler::new(&labels, num_classes);
    let min_classes = if config.metric.mode == MetricMode::Quadruplet { 3 } else { 2 };
    if sampler.pools.len() < min_classes {
        return Err(invalid(format!("training set has {} classes", sampler.pools.len())));
    }
    let mut rng = rng::stream(seed, 1);
    sampler.shuffle(&mut rng);
    let mut adam = Adam::new(config.adam);
    let batch_size = config.classes_per_batch.min(sampler.pools.len()) * config.samples_per_class;
    let batches = train.len().div_ceil(batch_size).max(1);

    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut acc = [0.0f64; 4];
        for _ in 0..batches {
            let idx = sampler.next_batch(config.classes_per_batch, config.samples_per_class, &mut rng);
            let windows: Vec<&[T]> = idx.iter().map(|&i| train[i].as_slice()).collect();
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let noise: Vec<Vec<T>> = idx.iter().map(|_| rng::normal_vec(&mut rng, config.latent_dim)).collect();
            let means = windows.par_iter().map(|w| model.heads(w).map(|(m, _)| m)).collect::<Result<Vec<_>>>()?;
            let tuples = mine_pairs(&means, &batch_labels, &config.metric)?;
            let (loss, grads) = match batch_gradients(&model, &windows, &noise, &tuples, &config.metric) {
                Ok(v) => v,
                Err(HarError::NonFinite(detail)) => return Err(HarError::Diverged { epoch, detail }),
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() {
                return Err(HarError::Diverged { epoch, detail: format!("batch loss {}", loss.total) });
            }
            adam.step(&mut model, &grads)?;
            for (a, v) in acc.iter_mut().zip([loss.recon, loss.kl, loss.metric, loss.total]) {
                *a += v.as_f64();
            }
        }
        let b = batches as f64;
        trace.push(EpochLoss { epoch, recon: acc[0] / b, kl: acc[1] / b, metric: acc[2] / b, total: acc[3] / b });
    }
    Ok(TrainedEncoder { model, trace })
}
