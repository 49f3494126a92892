//! Noise schedule, perturbation kernel, denoisers and training.
//!
//! The diffusion has zero drift and g(t) = sqrt(2t), so noising a cloud for
//! time t is just adding N(0, t^2 I) and the score relates to the denoiser by
//! score = (D(x, t) - x) / t^2. Two denoisers live here: a closed-form one
//! for Gaussian-mixture priors, used as an oracle everywhere, and the
//! trainable network from `net` wrapped with the preconditioning below.

use crate::error::{Error, Result};
use crate::geom::{random_orthogonal, Cloud3};
use crate::net::{NetArch, NetDenoiser};
use crate::rng::RandomSource;
use rayon::prelude::*;

/// Assumed data scale of unit-cube clouds; fixes the preconditioning
/// constants 0.25 = sigma_data^2 below.
pub const SIGMA_DATA: f64 = 0.5;

pub fn c_skip(t: f64) -> f64 {
    0.25 / (t * t + 0.25)
}

pub fn c_in(t: f64) -> f64 {
    1.0 / (t * t + 0.25).sqrt()
}

pub fn c_out(t: f64) -> f64 {
    0.25 * t / (t * t + 0.25).sqrt()
}

pub fn c_noise(t: f64, scale: f64) -> f64 {
    scale * t
}

/// DSM loss weighting 1/c_out(t)^2. Diverges as t -> 0; training times are
/// floored away from zero, see `sample_train_time`.
pub fn loss_weight(t: f64) -> f64 {
    let co = c_out(t);
    1.0 / (co * co)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiffusionConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub rho: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub c_noise_scale: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_min: 0.002,
            t_max: 80.0,
            rho: 3.0,
            p_mean: -1.2,
            p_std: 1.2,
            c_noise_scale: 1000.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min.is_finite() && self.t_max.is_finite() && self.t_min > 0.0) {
            return Err(Error::InvalidInput(format!(
                "t_min must be positive and finite, got {}",
                self.t_min
            )));
        }
        if self.t_min >= self.t_max {
            return Err(Error::InvalidInput(format!(
                "need t_min < t_max, got {} >= {}",
                self.t_min, self.t_max
            )));
        }
        if !(self.rho.is_finite() && self.rho >= 1.0) {
            return Err(Error::InvalidInput(format!("rho must be >= 1, got {}", self.rho)));
        }
        if !(self.p_std.is_finite() && self.p_std > 0.0) || !self.p_mean.is_finite() {
            return Err(Error::InvalidInput("bad train-time distribution".into()));
        }
        if !(self.c_noise_scale.is_finite() && self.c_noise_scale > 0.0) {
            return Err(Error::InvalidInput("c_noise_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Decreasing grid of n+1 times: a power interpolation between t_max and
/// t_min in t^(1/rho) space, with a final jump to exactly zero. The first
/// and the n-th entry are pinned to t_max and t_min so float drift in the
/// closed form never moves the endpoints.
pub fn timesteps(n: usize, cfg: &DiffusionConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 steps, got {n}")));
    }
    let inv = 1.0 / cfg.rho;
    let a = cfg.t_max.powf(inv);
    let b = cfg.t_min.powf(inv);
    let mut ts = Vec::with_capacity(n + 1);
    ts.push(cfg.t_max);
    for i in 1..n - 1 {
        let u = a + (i as f64 / (n - 1) as f64) * (b - a);
        ts.push(u.powf(cfg.rho));
    }
    ts.push(cfg.t_min);
    ts.push(0.0);
    Ok(ts)
}

/// Draw x(t) ~ N(x0, t^2 I).
pub fn perturb(x0: &Cloud3, t: f64, rng: &mut RandomSource) -> Cloud3 {
    assert!(t >= 0.0, "negative noise level {t}");
    let pts = x0
        .points()
        .iter()
        .map(|p| {
            [
                p[0] + t * rng.normal(),
                p[1] + t * rng.normal(),
                p[2] + t * rng.normal(),
            ]
        })
        .collect();
    Cloud3::from_raw(pts)
}

/// Log-normal training time: t = exp(z), z ~ N(p_mean, p_std^2), redrawn
/// while t exceeds t_max. Floored at 1e-5 because the loss weighting blows
/// up at t = 0.
pub fn sample_train_time(rng: &mut RandomSource, cfg: &DiffusionConfig) -> f64 {
    loop {
        let t = (cfg.p_mean + cfg.p_std * rng.normal()).exp();
        if t <= cfg.t_max {
            return t.max(1e-5);
        }
    }
}

// ---------------------------------------------------------------------------
// Analytic denoiser for a Gaussian-mixture prior over individual points.

/// Mixture of isotropic Gaussians with one shared scale. Each point of a
/// cloud is treated as an independent draw, so the denoiser acts row by row.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    means: Vec<[f64; 3]>,
    scale: f64,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GmmPrior {
    pub fn new(means: Vec<[f64; 3]>, scale: f64, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::InvalidInput(
                "need one weight per component and at least one component".into(),
            ));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite component mean".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) || total <= 0.0 {
            return Err(Error::InvalidInput("weights must be nonnegative with positive sum".into()));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            means,
            scale,
            weights,
            log_weights,
        })
    }

    pub fn uniform(means: Vec<[f64; 3]>, scale: f64) -> Result<Self> {
        let k = means.len();
        Self::new(means, scale, vec![1.0; k])
    }

    pub fn means(&self) -> &[[f64; 3]] {
        &self.means
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mixture mean, the t -> infinity limit of the denoiser.
    pub fn mean(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for (mu, w) in self.means.iter().zip(&self.weights) {
            for c in 0..3 {
                m[c] += w * mu[c];
            }
        }
        m
    }

    pub fn sample_point(&self, rng: &mut RandomSource) -> [f64; 3] {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut pick = self.means.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let mu = self.means[pick];
        [
            mu[0] + self.scale * rng.normal(),
            mu[1] + self.scale * rng.normal(),
            mu[2] + self.scale * rng.normal(),
        ]
    }

    pub fn sample_cloud(&self, n: usize, rng: &mut RandomSource) -> Cloud3 {
        Cloud3::from_raw((0..n).map(|_| self.sample_point(rng)).collect())
    }

    /// Responsibilities of each component for one noisy point at variance v,
    /// stabilized with log-sum-exp, and their weighted mean.
    fn responsibilities(&self, p: [f64; 3], v: f64) -> (Vec<f64>, [f64; 3]) {
        let k = self.means.len();
        let mut logits = Vec::with_capacity(k);
        let mut max = f64::NEG_INFINITY;
        for (mu, lw) in self.means.iter().zip(&self.log_weights) {
            let d2 = (p[0] - mu[0]).powi(2) + (p[1] - mu[1]).powi(2) + (p[2] - mu[2]).powi(2);
            let l = lw - d2 / (2.0 * v);
            max = max.max(l);
            logits.push(l);
        }
        let mut gam: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = gam.iter().sum();
        let mut m = [0.0; 3];
        for (g, mu) in gam.iter_mut().zip(&self.means) {
            *g /= z;
            for c in 0..3 {
                m[c] += *g * mu[c];
            }
        }
        (gam, m)
    }

    /// Posterior mean per point: D = (s^2 x + t^2 m) / (s^2 + t^2) where m
    /// is the responsibility-weighted component mean.
    pub fn denoise(&self, x: &Cloud3, t: f64) -> Cloud3 {
        if t == 0.0 {
            return x.clone();
        }
        let s2 = self.scale * self.scale;
        let t2 = t * t;
        let v = s2 + t2;
        let pts = x
            .points()
            .iter()
            .map(|&p| {
                let (_, m) = self.responsibilities(p, v);
                [
                    (s2 * p[0] + t2 * m[0]) / v,
                    (s2 * p[1] + t2 * m[1]) / v,
                    (s2 * p[2] + t2 * m[2]) / v,
                ]
            })
            .collect();
        Cloud3::from_raw(pts)
    }

    /// Marginal score of the widened mixture, (m - x) / (s^2 + t^2). Equal to
    /// (denoise(x, t) - x) / t^2 but stable for small t.
    pub fn score(&self, x: &Cloud3, t: f64) -> Vec<[f64; 3]> {
        let v = self.scale * self.scale + t * t;
        x.points()
            .iter()
            .map(|&p| {
                let (_, m) = self.responsibilities(p, v);
                [(m[0] - p[0]) / v, (m[1] - p[1]) / v, (m[2] - p[2]) / v]
            })
            .collect()
    }

    /// J_D(x, t)^T c, row by row. The Jacobian of one row is
    /// s^2/v I + t^2/v^2 (sum_i gamma_i mu_i mu_i^T - m m^T), symmetric.
    pub fn vjp(&self, x: &Cloud3, t: f64, cotangent: &[[f64; 3]]) -> Vec<[f64; 3]> {
        assert_eq!(cotangent.len(), x.len(), "cotangent rows must match the cloud");
        if t == 0.0 {
            return cotangent.to_vec();
        }
        let s2 = self.scale * self.scale;
        let t2 = t * t;
        let v = s2 + t2;
        x.points()
            .iter()
            .zip(cotangent)
            .map(|(&p, &c)| {
                let (gam, m) = self.responsibilities(p, v);
                let mc = m[0] * c[0] + m[1] * c[1] + m[2] * c[2];
                let mut term = [-m[0] * mc, -m[1] * mc, -m[2] * mc];
                for (g, mu) in gam.iter().zip(&self.means) {
                    let muc = mu[0] * c[0] + mu[1] * c[1] + mu[2] * c[2];
                    for k in 0..3 {
                        term[k] += g * mu[k] * muc;
                    }
                }
                [
                    (s2 / v) * c[0] + (t2 / (v * v)) * term[0],
                    (s2 / v) * c[1] + (t2 / (v * v)) * term[1],
                    (s2 / v) * c[2] + (t2 / (v * v)) * term[2],
                ]
            })
            .collect()
    }
}

/// Either denoiser behind one face, so the sampler does not care which it
/// drives.
#[derive(Debug, Clone)]
pub enum Denoiser {
    Gmm(GmmPrior),
    Net(NetDenoiser),
}

impl Denoiser {
    pub fn denoise(&self, x: &Cloud3, t: f64) -> Cloud3 {
        match self {
            Denoiser::Gmm(g) => g.denoise(x, t),
            Denoiser::Net(n) => n.denoise(x, t),
        }
    }

    pub fn vjp(&self, x: &Cloud3, t: f64, cotangent: &[[f64; 3]]) -> Vec<[f64; 3]> {
        match self {
            Denoiser::Gmm(g) => g.vjp(x, t, cotangent),
            Denoiser::Net(n) => n.vjp(x, t, cotangent),
        }
    }
}

// ---------------------------------------------------------------------------
// Training.

/// One batch of clean clouds with their sampled times and noise draws;
/// the noisy input is x0 + t * noise.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub clouds: Vec<Cloud3>,
    pub times: Vec<f64>,
    pub noise: Vec<Vec<[f64; 3]>>,
}

impl TrainBatch {
    pub fn new(clouds: Vec<Cloud3>, times: Vec<f64>, noise: Vec<Vec<[f64; 3]>>) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if clouds.len() != times.len() || clouds.len() != noise.len() {
            return Err(Error::SizeMismatch(format!(
                "batch pieces disagree: {} clouds, {} times, {} noise draws",
                clouds.len(),
                times.len(),
                noise.len()
            )));
        }
        for ((cloud, eps), t) in clouds.iter().zip(&noise).zip(&times) {
            if cloud.len() != eps.len() {
                return Err(Error::SizeMismatch("noise shape must match its cloud".into()));
            }
            if !(t.is_finite() && *t > 0.0) {
                return Err(Error::InvalidInput(format!("bad training time {t}")));
            }
        }
        Ok(Self { clouds, times, noise })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }
}

/// Mean weighted denoising loss over the batch and its exact parameter
/// gradient. Items are independent, so they are evaluated in parallel and
/// the per-item gradients reduced in batch order to keep the sum bitwise
/// stable.
pub fn dsm_step(net: &NetDenoiser, batch: &TrainBatch) -> (f64, Vec<f64>) {
    let b = batch.len() as f64;
    let items: Vec<(f64, Vec<f64>)> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let x0 = &batch.clouds[i];
            let t = batch.times[i];
            let eps = &batch.noise[i];
            let xt = Cloud3::from_raw(
                x0.points()
                    .iter()
                    .zip(eps)
                    .map(|(p, e)| [p[0] + t * e[0], p[1] + t * e[1], p[2] + t * e[2]])
                    .collect(),
            );
            let (d, trace) = net.denoise_with_trace(&xt, t);
            let lam = loss_weight(t);
            let mut loss = 0.0;
            let cot: Vec<[f64; 3]> = x0
                .points()
                .iter()
                .zip(d.points())
                .map(|(p0, dp)| {
                    let r = [p0[0] - dp[0], p0[1] - dp[1], p0[2] - dp[2]];
                    loss += r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
                    // d(loss)/dD = -2 lam (x0 - D), divided by the batch size
                    // so the reduced gradient matches the mean loss.
                    [
                        -2.0 * lam * r[0] / b,
                        -2.0 * lam * r[1] / b,
                        -2.0 * lam * r[2] / b,
                    ]
                })
                .collect();
            let mut grad = vec![0.0; net.param_len()];
            net.backward(&trace, &cot, Some(&mut grad));
            (lam * loss, grad)
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; net.param_len()];
    for (l, g) in items {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    (loss / b, grad)
}

/// Adam with the usual bias correction. Learning rate is passed per step so
/// phases can change it without touching the moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainPhase {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub t_max: f64,
}

/// Two-phase split used by default: most of the budget at small noise, the
/// tail at t_max = 80 so unconditional sampling has a valid start.
pub fn default_phases(epochs: usize, batch_size: usize, lr: f64) -> Vec<TrainPhase> {
    let tail = epochs / 10;
    let head = epochs - tail;
    vec![
        TrainPhase {
            epochs: head,
            batch_size,
            lr,
            p_mean: -4.0,
            p_std: 1.2,
            t_max: 1.0,
        },
        TrainPhase {
            epochs: tail,
            batch_size,
            lr,
            p_mean: -1.2,
            p_std: 1.2,
            t_max: 80.0,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    None,
    /// Fresh random orthogonal matrix per cloud per batch.
    Orthogonal,
    /// Fresh random proper rotation per cloud per batch, for data where a
    /// mirror image is a different object.
    Proper,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub net: NetDenoiser,
    /// Mean DSM loss of each epoch, across all phases in order.
    pub epoch_losses: Vec<f64>,
}

/// Train a fresh network on equally sized clouds. Optimizer state is carried
/// across phases; only the time distribution, batch size and learning rate
/// change at a phase boundary.
pub fn train(
    dataset: &[Cloud3],
    arch: NetArch,
    cfg: &DiffusionConfig,
    phases: &[TrainPhase],
    augmentation: Augmentation,
    rng: &mut RandomSource,
) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let n_points = dataset[0].len();
    if n_points == 0 || dataset.iter().any(|c| c.len() != n_points) {
        return Err(Error::InvalidInput("all training clouds must have the same nonzero size".into()));
    }
    for phase in phases {
        if phase.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be nonzero".into()));
        }
        if !(phase.lr.is_finite() && phase.lr > 0.0) {
            return Err(Error::InvalidInput(format!("bad learning rate {}", phase.lr)));
        }
        if !(phase.t_max.is_finite() && phase.t_max > cfg.t_min) {
            return Err(Error::InvalidInput(format!("bad phase t_max {}", phase.t_max)));
        }
    }

    let mut net = NetDenoiser::new(arch, cfg.c_noise_scale, rng)?;
    let mut adam = Adam::new(net.param_len());
    let mut epoch_losses = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for phase in phases {
        let mut phase_cfg = *cfg;
        phase_cfg.p_mean = phase.p_mean;
        phase_cfg.p_std = phase.p_std;
        phase_cfg.t_max = phase.t_max;
        for _ in 0..phase.epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for chunk in order.chunks(phase.batch_size) {
                let mut clouds = Vec::with_capacity(chunk.len());
                let mut times = Vec::with_capacity(chunk.len());
                let mut noise = Vec::with_capacity(chunk.len());
                for &idx in chunk {
                    let cloud = match augmentation {
                        Augmentation::None => dataset[idx].clone(),
                        Augmentation::Orthogonal | Augmentation::Proper => {
                            let proper = augmentation == Augmentation::Proper;
                            let r = random_orthogonal(rng, proper);
                            Cloud3::from_raw(
                                dataset[idx].points().iter().map(|&p| r.apply(p)).collect(),
                            )
                        }
                    };
                    times.push(sample_train_time(rng, &phase_cfg));
                    noise.push(
                        (0..n_points)
                            .map(|_| [rng.normal(), rng.normal(), rng.normal()])
                            .collect(),
                    );
                    clouds.push(cloud);
                }
                let batch = TrainBatch::new(clouds, times, noise)?;
                let size = batch.len();
                let (loss, grad) = dsm_step(&net, &batch);
                adam.update(net.params_mut(), &grad, phase.lr);
                total += loss * size as f64;
            }
            epoch_losses.push(total / dataset.len() as f64);
        }
    }
    Ok(TrainResult { net, epoch_losses })
}

// ---------------------------------------------------------------------------
// Model file.

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelFile {
    arch: NetArch,
    c_noise_scale: f64,
    params: Vec<f64>,
    train_meta: serde_json::Value,
}

pub fn model_to_json(net: &NetDenoiser, train_meta: &serde_json::Value) -> String {
    let file = ModelFile {
        arch: net.arch(),
        c_noise_scale: net.c_noise_scale(),
        params: net.params().to_vec(),
        train_meta: train_meta.clone(),
    };
    serde_json::to_string(&file).expect("model serialization cannot fail")
}

pub fn model_from_json(text: &str) -> Result<(NetDenoiser, serde_json::Value)> {
    let file: ModelFile = serde_json::from_str(text)
        .map_err(|e| Error::Format(format!("bad model file: {e}")))?;
    let net = NetDenoiser::from_params(file.arch, file.c_noise_scale, &file.params)?;
    Ok((net, file.train_meta))
}

pub fn save_model(
    net: &NetDenoiser,
    train_meta: &serde_json::Value,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    crate::error::write_atomic(path, model_to_json(net, train_meta).as_bytes())
}

pub fn load_model(path: impl AsRef<std::path::Path>) -> Result<(NetDenoiser, serde_json::Value)> {
    model_from_json(&crate::error::read_file(path)?)
}
