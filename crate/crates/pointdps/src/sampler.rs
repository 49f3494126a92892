//! Reverse-time samplers: the corrected predictor scheme with noise
//! injection (the default), plain Euler integration of the probability-flow
//! ODE, Euler-Maruyama integration of the noise-controlled SDE, and a
//! gradient-descent baseline that skips diffusion entirely.

use crate::diffusion::{Adam, Denoiser};
use crate::error::{Error, Result};
use crate::geom::Cloud3;
use crate::likelihood::{combined_energy, ObservationSet};
use crate::rng::RandomSource;
use rayon::prelude::*;
use std::str::FromStr;

/// Time dependence of the noise control above the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
enum BetaExpr {
    Const(f64),
    InvT,
}

/// beta(t): one expression above a threshold, a constant at or below it.
/// The default threshold 0 with constant 0 below keeps 1/t away from t=0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaRule {
    expr: BetaExpr,
    threshold: f64,
    below: f64,
}

impl BetaRule {
    pub fn zero() -> Self {
        Self { expr: BetaExpr::Const(0.0), threshold: 0.0, below: 0.0 }
    }

    pub fn constant(value: f64) -> Result<Self> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::InvalidInput(format!("beta must be nonnegative, got {value}")));
        }
        Ok(Self { expr: BetaExpr::Const(value), threshold: 0.0, below: 0.0 })
    }

    /// 1/t above the threshold, zero at or below it.
    pub fn inv_t(threshold: f64) -> Result<Self> {
        if !(threshold.is_finite() && threshold >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "beta threshold must be nonnegative, got {threshold}"
            )));
        }
        Ok(Self { expr: BetaExpr::InvT, threshold, below: 0.0 })
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t > self.threshold {
            match self.expr {
                BetaExpr::Const(c) => c,
                BetaExpr::InvT => 1.0 / t,
            }
        } else {
            self.below
        }
    }
}

impl FromStr for BetaRule {
    type Err = Error;

    /// Grammar: `expr[@threshold[:below]]` where expr is `1/t` or a
    /// nonnegative number. "1/t@0.15" reads "1/t above 0.15, zero below".
    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidInput(format!("beta rule {s:?}: {msg}"));
        let (head, tail) = match s.split_once('@') {
            Some((h, t)) => (h.trim(), Some(t.trim())),
            None => (s.trim(), None),
        };
        let expr = if head == "1/t" {
            BetaExpr::InvT
        } else {
            let v: f64 = head.parse().map_err(|_| bad("expected 1/t or a number"))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad("constant must be nonnegative"));
            }
            BetaExpr::Const(v)
        };
        let (threshold, below) = match tail {
            None => (0.0, 0.0),
            Some(t) => {
                let (thr, blw) = match t.split_once(':') {
                    Some((a, b)) => (a.trim(), Some(b.trim())),
                    None => (t, None),
                };
                let thr: f64 = thr.parse().map_err(|_| bad("bad threshold"))?;
                if !(thr.is_finite() && thr >= 0.0) {
                    return Err(bad("threshold must be nonnegative"));
                }
                let blw: f64 = match blw {
                    Some(b) => b.parse().map_err(|_| bad("bad value below threshold"))?,
                    None => 0.0,
                };
                if !(blw.is_finite() && blw >= 0.0) {
                    return Err(bad("value below threshold must be nonnegative"));
                }
                (thr, blw)
            }
        };
        Ok(Self { expr, threshold, below })
    }
}

impl serde::Serialize for BetaRule {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl std::fmt::Display for BetaRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.expr {
            BetaExpr::Const(c) => write!(f, "{c}")?,
            BetaExpr::InvT => write!(f, "1/t")?,
        }
        if self.threshold != 0.0 || self.below != 0.0 {
            write!(f, "@{}", self.threshold)?;
            if self.below != 0.0 {
                write!(f, ":{}", self.below)?;
            }
        }
        Ok(())
    }
}

/// Time grid plus noise control for one sampling run.
#[derive(Debug, Clone)]
pub struct Schedule {
    timesteps: Vec<f64>,
    beta: BetaRule,
}

impl Schedule {
    /// The grid must be strictly decreasing, start positive, and end at
    /// exactly 0 (the shape produced by the timestep builder).
    pub fn new(timesteps: Vec<f64>, beta: BetaRule) -> Result<Self> {
        if timesteps.len() < 2 {
            return Err(Error::InvalidInput("schedule needs at least one step".into()));
        }
        if timesteps.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("schedule contains a non-finite time".into()));
        }
        if !timesteps.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::InvalidInput("timesteps must be strictly decreasing".into()));
        }
        if *timesteps.last().unwrap() != 0.0 {
            return Err(Error::InvalidInput("the final timestep must be 0".into()));
        }
        if timesteps.iter().any(|&t| beta.eval(t) < 0.0) {
            return Err(Error::InvalidInput("beta is negative on the grid".into()));
        }
        Ok(Self { timesteps, beta })
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    pub fn beta(&self) -> &BetaRule {
        &self.beta
    }

    /// Number of integration steps (one fewer than grid entries).
    pub fn n_steps(&self) -> usize {
        self.timesteps.len() - 1
    }
}

/// Everything the guided score needs: the denoiser, optional observations,
/// and the guidance strength. Without observations the score is the plain
/// prior score and alpha is ignored.
#[derive(Debug, Clone)]
pub struct GuidedScoreContext<'a> {
    pub denoiser: &'a Denoiser,
    pub observations: Option<&'a ObservationSet>,
    pub alpha: f64,
}

impl<'a> GuidedScoreContext<'a> {
    pub fn unconditional(denoiser: &'a Denoiser) -> Self {
        Self { denoiser, observations: None, alpha: 0.0 }
    }

    pub fn guided(denoiser: &'a Denoiser, observations: &'a ObservationSet, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::InvalidInput(format!("alpha must be nonnegative, got {alpha}")));
        }
        if observations.is_empty() {
            return Err(Error::InvalidInput("guided context needs at least one observation".into()));
        }
        Ok(Self { denoiser, observations: Some(observations), alpha })
    }
}

/// Score of the (optionally observation-tilted) marginal at time t: the
/// prior score (D(x,t) - x)/t^2, plus a likelihood pull computed at the
/// denoised cloud and mapped back through the denoiser's Jacobian. The pull
/// is scaled by alpha/sqrt(E) and switched off when the energy E is
/// effectively zero, where that scale would blow up.
pub fn guided_score(ctx: &GuidedScoreContext, x: &Cloud3, t: f64) -> Result<Vec<[f64; 3]>> {
    assert!(t > 0.0, "score is only defined at positive times");
    let denoised = ctx.denoiser.denoise(x, t);
    let inv_t2 = 1.0 / (t * t);
    let mut score: Vec<[f64; 3]> = denoised
        .points()
        .iter()
        .zip(x.points())
        .map(|(d, p)| {
            [
                (d[0] - p[0]) * inv_t2,
                (d[1] - p[1]) * inv_t2,
                (d[2] - p[2]) * inv_t2,
            ]
        })
        .collect();
    if let Some(obs) = ctx.observations {
        if ctx.alpha > 0.0 {
            let (energy, grad) = combined_energy(&denoised, obs)?;
            if energy >= 1e-12 {
                let zeta = ctx.alpha / energy.sqrt();
                let pull = ctx.denoiser.vjp(x, t, &grad);
                for (s, g) in score.iter_mut().zip(&pull) {
                    for c in 0..3 {
                        s[c] -= zeta * g[c];
                    }
                }
            }
        }
    }
    Ok(score)
}

/// Anything that can produce a score field. Implemented by the guided
/// context and by plain closures (handy for analytic references in tests).
pub trait ScoreSource: Sync {
    fn score(&self, x: &Cloud3, t: f64) -> Result<Vec<[f64; 3]>>;
}

impl ScoreSource for GuidedScoreContext<'_> {
    fn score(&self, x: &Cloud3, t: f64) -> Result<Vec<[f64; 3]>> {
        guided_score(self, x, t)
    }
}

impl<F> ScoreSource for F
where
    F: Fn(&Cloud3, f64) -> Result<Vec<[f64; 3]>> + Sync,
{
    fn score(&self, x: &Cloud3, t: f64) -> Result<Vec<[f64; 3]>> {
        self(x, t)
    }
}

/// Integration scheme for the reverse process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Deterministic Euler steps of the probability-flow ODE; ignores beta.
    /// One score evaluation per step.
    EulerOde,
    /// Euler-Maruyama steps of the noise-controlled SDE. One score
    /// evaluation per step.
    EulerSde,
    /// Predictor plus trapezoidal correction with noise injection; two score
    /// evaluations per step except the last (2N-1 total).
    Corrected,
}

/// A sampled cloud and the number of score evaluations spent producing it.
#[derive(Debug, Clone)]
pub struct SampleResult {
    pub cloud: Cloud3,
    pub nfe: usize,
}

fn gaussian_cloud(n: usize, std: f64, rng: &mut RandomSource) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [std * rng.normal(), std * rng.normal(), std * rng.normal()])
        .collect()
}

/// Run one reverse-time chain with the chosen scheme.
///
/// The corrected scheme: start from x ~ N(0, t_0^2 I); at each step take the
/// Euler predictor x_pred = x + t_i * s(x, t_i) * dt, and while the step does
/// not land on t=0, replace the increment by the trapezoidal average
/// (t_i + beta t_i^2) * [s(x, t_i) + s(x_pred, t_{i+1})] * dt / 2 applied to
/// the step's starting point, plus noise with variance 2 beta t_i^2 dt. The
/// final step keeps the plain predictor so no noise lands on the output.
pub fn sample_with<S: ScoreSource + ?Sized>(
    method: Method,
    src: &S,
    n_points: usize,
    sched: &Schedule,
    rng: &mut RandomSource,
) -> Result<SampleResult> {
    if n_points == 0 {
        return Err(Error::InvalidInput("cannot sample an empty cloud".into()));
    }
    let ts = sched.timesteps();
    let mut x = gaussian_cloud(n_points, ts[0], rng);
    let mut nfe = 0usize;
    for i in 0..ts.len() - 1 {
        let t = ts[i];
        let t_next = ts[i + 1];
        let dt = t - t_next;
        let s = src.score(&Cloud3::from_raw(x.clone()), t)?;
        nfe += 1;
        match method {
            Method::EulerOde => {
                for (p, g) in x.iter_mut().zip(&s) {
                    for c in 0..3 {
                        p[c] += t * g[c] * dt;
                    }
                }
            }
            Method::EulerSde => {
                let beta = sched.beta().eval(t);
                let drift = t + beta * t * t;
                let noise_std = (2.0 * beta * t * t * dt).sqrt();
                for (p, g) in x.iter_mut().zip(&s) {
                    for c in 0..3 {
                        p[c] += drift * g[c] * dt;
                        if noise_std > 0.0 {
                            p[c] += noise_std * rng.normal();
                        }
                    }
                }
            }
            Method::Corrected => {
                let pred: Vec<[f64; 3]> = x
                    .iter()
                    .zip(&s)
                    .map(|(p, g)| {
                        [
                            p[0] + t * g[0] * dt,
                            p[1] + t * g[1] * dt,
                            p[2] + t * g[2] * dt,
                        ]
                    })
                    .collect();
                if t_next == 0.0 {
                    x = pred;
                } else {
                    let s_next = src.score(&Cloud3::from_raw(pred), t_next)?;
                    nfe += 1;
                    let beta = sched.beta().eval(t);
                    let coef = (t + beta * t * t) * dt / 2.0;
                    let noise_std = (2.0 * beta * t * t * dt).sqrt();
                    for ((p, a), b) in x.iter_mut().zip(&s).zip(&s_next) {
                        for c in 0..3 {
                            p[c] += coef * (a[c] + b[c]);
                            if noise_std > 0.0 {
                                p[c] += noise_std * rng.normal();
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(SampleResult { cloud: Cloud3::from_raw(x), nfe })
}

/// Corrected-scheme chain (the default sampler).
pub fn sample<S: ScoreSource + ?Sized>(
    src: &S,
    n_points: usize,
    sched: &Schedule,
    rng: &mut RandomSource,
) -> Result<SampleResult> {
    sample_with(Method::Corrected, src, n_points, sched, rng)
}

/// Run `count` independent chains in parallel. Chain k draws from the RNG
/// stream (seed, k), so results do not depend on thread scheduling and
/// chain k alone reproduces batch entry k.
pub fn sample_batch_with<S: ScoreSource + ?Sized>(
    method: Method,
    src: &S,
    n_points: usize,
    sched: &Schedule,
    seed: u64,
    count: usize,
) -> Result<Vec<SampleResult>> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = RandomSource::with_stream(seed, k as u64);
            sample_with(method, src, n_points, sched, &mut rng)
        })
        .collect()
}

pub fn sample_batch<S: ScoreSource + ?Sized>(
    src: &S,
    n_points: usize,
    sched: &Schedule,
    seed: u64,
    count: usize,
) -> Result<Vec<SampleResult>> {
    sample_batch_with(Method::Corrected, src, n_points, sched, seed, count)
}

/// Direct energy minimization, the no-prior baseline.
#[derive(Debug, Clone)]
pub struct MlResult {
    pub cloud: Cloud3,
    pub energy: f64,
}

/// Adam descent on the combined observation energy from a uniform-random
/// start in [-1,1]^3. Returns the lowest-energy iterate seen, which for
/// steps=0 is the untouched initial cloud.
pub fn ml_reconstruct(
    observations: &ObservationSet,
    n_points: usize,
    steps: usize,
    lr: f64,
    rng: &mut RandomSource,
) -> Result<MlResult> {
    if observations.is_empty() {
        return Err(Error::InvalidInput("nothing to reconstruct from: no observations".into()));
    }
    if n_points == 0 {
        return Err(Error::InvalidInput("cannot reconstruct an empty cloud".into()));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidInput(format!("learning rate must be positive, got {lr}")));
    }
    let mut flat: Vec<f64> = (0..3 * n_points).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let unflatten = |flat: &[f64]| {
        Cloud3::from_raw(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    };
    let mut adam = Adam::new(flat.len());
    let mut best_energy = f64::INFINITY;
    let mut best_cloud = unflatten(&flat);
    for _ in 0..steps {
        let cloud = unflatten(&flat);
        let (energy, grad) = combined_energy(&cloud, observations)?;
        if energy < best_energy {
            best_energy = energy;
            best_cloud = cloud;
        }
        let flat_grad: Vec<f64> = grad.iter().flat_map(|g| g.iter().copied()).collect();
        adam.update(&mut flat, &flat_grad, lr);
    }
    let cloud = unflatten(&flat);
    let (energy, _) = combined_energy(&cloud, observations)?;
    if energy < best_energy {
        best_energy = energy;
        best_cloud = cloud;
    }
    Ok(MlResult { cloud: best_cloud, energy: best_energy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{timesteps, DiffusionConfig, GmmPrior};
    use crate::eval::emd;
    use crate::likelihood::Observation;

    fn standard_prior() -> Denoiser {
        Denoiser::Gmm(GmmPrior::uniform(vec![[0.0; 3]], 1.0).unwrap())
    }

    fn short_schedule(n: usize, t_max: f64, beta: BetaRule) -> Schedule {
        let cfg = DiffusionConfig { t_max, ..DiffusionConfig::default() };
        Schedule::new(timesteps(n, &cfg).unwrap(), beta).unwrap()
    }

    #[test]
    fn beta_rule_parsing() {
        let r: BetaRule = "0".parse().unwrap();
        assert_eq!(r.eval(0.5), 0.0);
        let r: BetaRule = "1/t".parse().unwrap();
        assert_eq!(r.eval(2.0), 0.5);
        assert_eq!(r.eval(0.0), 0.0);
        let r: BetaRule = "1/t@0.15".parse().unwrap();
        assert_eq!(r.eval(1.0), 1.0);
        assert_eq!(r.eval(0.15), 0.0);
        assert_eq!(r.eval(0.1), 0.0);
        let r: BetaRule = "1/t@1:1".parse().unwrap();
        assert_eq!(r.eval(2.0), 0.5);
        assert_eq!(r.eval(0.5), 1.0);
        let r: BetaRule = "0.5".parse().unwrap();
        assert_eq!(r.eval(10.0), 0.5);
    }

    #[test]
    fn beta_rule_round_trips_through_display() {
        for text in ["0", "1/t", "1/t@0.15", "1/t@1:1", "0.5", "2@0.3:0.1"] {
            let r: BetaRule = text.parse().unwrap();
            let again: BetaRule = r.to_string().parse().unwrap();
            assert_eq!(r, again, "{text}");
        }
    }

    #[test]
    fn beta_rule_rejects_bad_input() {
        for text in ["", "t", "-1", "1/t@-0.1", "1/t@0.1:-2", "1/t@x", "1/x"] {
            assert!(text.parse::<BetaRule>().is_err(), "{text:?} parsed");
        }
    }

    #[test]
    fn schedule_validation() {
        let beta = BetaRule::zero();
        assert!(Schedule::new(vec![1.0, 0.5, 0.0], beta).is_ok());
        assert!(Schedule::new(vec![1.0], beta).is_err());
        assert!(Schedule::new(vec![0.5, 1.0, 0.0], beta).is_err());
        assert!(Schedule::new(vec![1.0, 0.5, 0.002], beta).is_err());
        assert!(Schedule::new(vec![1.0, f64::NAN, 0.0], beta).is_err());
        let s = Schedule::new(vec![1.0, 0.5, 0.0], beta).unwrap();
        assert_eq!(s.n_steps(), 2);
    }

    #[test]
    fn unconditional_score_equals_prior_score() {
        let den = standard_prior();
        let ctx = GuidedScoreContext::unconditional(&den);
        let x = Cloud3::new(vec![[0.3, -1.0, 2.0], [0.0, 0.5, -0.2]]).unwrap();
        let t = 0.7;
        let got = guided_score(&ctx, &x, t).unwrap();
        let inv_t2 = 1.0 / (t * t);
        let (want, stable) = match &den {
            Denoiser::Gmm(g) => {
                let d = g.denoise(&x, t);
                let w = d
                    .points()
                    .iter()
                    .zip(x.points())
                    .map(|(d, p)| {
                        [
                            (d[0] - p[0]) * inv_t2,
                            (d[1] - p[1]) * inv_t2,
                            (d[2] - p[2]) * inv_t2,
                        ]
                    })
                    .collect::<Vec<_>>();
                (w, g.score(&x, t))
            }
            _ => unreachable!(),
        };
        assert_eq!(got, want);
        for (a, b) in got.iter().zip(&stable) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-9, "{} vs {}", a[c], b[c]);
            }
        }
    }

    #[test]
    fn zero_energy_observation_leaves_score_unchanged() {
        let den = standard_prior();
        let x = Cloud3::new(vec![[0.4, 0.1, -0.3], [-0.6, 0.9, 0.2], [1.1, -0.5, 0.0]]).unwrap();
        let t = 0.5;
        // A subunit equal to a subset of the denoised cloud has energy 0.
        let denoised = den.denoise(&x, t);
        let subset = Cloud3::new(denoised.points()[..2].to_vec()).unwrap();
        let obs = ObservationSet::new(vec![Observation::subunit(subset, Some(1.0), 3).unwrap()]);
        let guided = GuidedScoreContext::guided(&den, &obs, 5.0).unwrap();
        let free = GuidedScoreContext::unconditional(&den);
        assert_eq!(
            guided_score(&guided, &x, t).unwrap(),
            guided_score(&free, &x, t).unwrap()
        );
    }

    #[test]
    fn guided_score_descends_the_energy() {
        let mut rng = RandomSource::new(21);
        let prior = GmmPrior::uniform(vec![[0.8, 0.0, 0.0], [-0.8, 0.0, 0.0]], 0.4).unwrap();
        let den = Denoiser::Gmm(prior);
        let n = 6;
        let target = Cloud3::from_raw(
            (0..n).map(|_| [rng.normal() * 0.5, rng.normal() * 0.5, rng.normal() * 0.5]).collect(),
        );
        let obs = ObservationSet::new(vec![
            Observation::coarse(target, Some(1.0), 7, n).unwrap(),
        ]);
        let ctx = GuidedScoreContext::guided(&den, &obs, 30.0).unwrap();
        let t = 0.6;
        let x = Cloud3::from_raw((0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect());
        let (e0, _) = combined_energy(&den.denoise(&x, t), &obs).unwrap();
        let s = guided_score(&ctx, &x, t).unwrap();
        let mut eta = 0.1;
        let mut descended = false;
        for _ in 0..40 {
            let moved = Cloud3::from_raw(
                x.points()
                    .iter()
                    .zip(&s)
                    .map(|(p, g)| [p[0] + eta * g[0], p[1] + eta * g[1], p[2] + eta * g[2]])
                    .collect(),
            );
            let (e1, _) = combined_energy(&den.denoise(&moved, t), &obs).unwrap();
            if e1 < e0 {
                descended = true;
                break;
            }
            eta /= 2.0;
        }
        assert!(descended, "no step size descended the energy from {e0}");
    }

    #[test]
    fn nfe_counts() {
        let den = standard_prior();
        let ctx = GuidedScoreContext::unconditional(&den);
        let beta: BetaRule = "1/t@0.15".parse().unwrap();
        let mut rng = RandomSource::new(22);
        let res = sample(&ctx, 4, &short_schedule(40, 1.0, beta), &mut rng).unwrap();
        assert_eq!(res.nfe, 79);
        let res = sample(&ctx, 4, &short_schedule(10, 1.0, beta), &mut rng).unwrap();
        assert_eq!(res.nfe, 19);
        let res =
            sample_with(Method::EulerOde, &ctx, 4, &short_schedule(79, 1.0, beta), &mut rng).unwrap();
        assert_eq!(res.nfe, 79);
        let res =
            sample_with(Method::EulerSde, &ctx, 4, &short_schedule(79, 1.0, beta), &mut rng).unwrap();
        assert_eq!(res.nfe, 79);
    }

    #[test]
    fn chains_are_deterministic_per_stream() {
        let den = standard_prior();
        let ctx = GuidedScoreContext::unconditional(&den);
        let sched = short_schedule(12, 1.0, "1/t@0.15".parse().unwrap());
        let batch1 = sample_batch(&ctx, 5, &sched, 99, 3).unwrap();
        let batch2 = sample_batch(&ctx, 5, &sched, 99, 3).unwrap();
        for (a, b) in batch1.iter().zip(&batch2) {
            assert_eq!(a.cloud.points(), b.cloud.points());
        }
        // Batch entry k is the same chain as a lone run on stream k.
        let mut rng = RandomSource::with_stream(99, 2);
        let solo = sample(&ctx, 5, &sched, &mut rng).unwrap();
        assert_eq!(solo.cloud.points(), batch1[2].cloud.points());
        // Different streams decorrelate.
        assert_ne!(batch1[0].cloud.points(), batch1[1].cloud.points());
    }

    #[test]
    fn zero_beta_reduces_sde_to_ode() {
        let den = standard_prior();
        let ctx = GuidedScoreContext::unconditional(&den);
        let sched = short_schedule(15, 1.0, BetaRule::zero());
        let mut rng_a = RandomSource::new(31);
        let mut rng_b = RandomSource::new(31);
        let ode = sample_with(Method::EulerOde, &ctx, 6, &sched, &mut rng_a).unwrap();
        let sde = sample_with(Method::EulerSde, &ctx, 6, &sched, &mut rng_b).unwrap();
        assert_eq!(ode.cloud.points(), sde.cloud.points());
    }

    #[test]
    fn zero_beta_corrected_chain_is_a_function_of_the_init() {
        let den = standard_prior();
        let ctx = GuidedScoreContext::unconditional(&den);
        let sched = short_schedule(9, 1.0, BetaRule::zero());
        let seed = 47;
        let mut rng = RandomSource::new(seed);
        let got = sample(&ctx, 3, &sched, &mut rng).unwrap();

        // Replay by hand from the same init, never touching the RNG again.
        let mut replay = RandomSource::new(seed);
        let ts = sched.timesteps();
        let mut x = gaussian_cloud(3, ts[0], &mut replay);
        for i in 0..ts.len() - 1 {
            let (t, t_next) = (ts[i], ts[i + 1]);
            let dt = t - t_next;
            let s = ctx.score(&Cloud3::from_raw(x.clone()), t).unwrap();
            let pred: Vec<[f64; 3]> = x
                .iter()
                .zip(&s)
                .map(|(p, g)| [p[0] + t * g[0] * dt, p[1] + t * g[1] * dt, p[2] + t * g[2] * dt])
                .collect();
            if t_next == 0.0 {
                x = pred;
            } else {
                let s_next = ctx.score(&Cloud3::from_raw(pred), t_next).unwrap();
                let coef = t * dt / 2.0;
                for ((p, a), b) in x.iter_mut().zip(&s).zip(&s_next) {
                    for c in 0..3 {
                        p[c] += coef * (a[c] + b[c]);
                    }
                }
            }
        }
        assert_eq!(got.cloud.points(), &x[..]);
    }

    #[test]
    fn unconditional_samples_match_the_prior_moments() {
        let den = standard_prior();
        let ctx = GuidedScoreContext::unconditional(&den);
        let sched = short_schedule(40, 80.0, "1/t@0.15".parse().unwrap());
        let batch = sample_batch(&ctx, 8, &sched, 7, 1000).unwrap();
        let mut all: Vec<[f64; 3]> = Vec::with_capacity(8000);
        for r in &batch {
            all.extend_from_slice(r.cloud.points());
        }
        let n = all.len() as f64;
        for c in 0..3 {
            let mean: f64 = all.iter().map(|p| p[c]).sum::<f64>() / n;
            let var: f64 = all.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 0.1, "coordinate {c} mean {mean}");
            assert!((0.85..=1.15).contains(&var), "coordinate {c} variance {var}");
        }
    }

    #[test]
    fn zero_alpha_matches_unconditional_streams() {
        let den = standard_prior();
        let target = Cloud3::new(vec![[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]]).unwrap();
        let obs = ObservationSet::new(vec![Observation::coarse(target, None, 3, 4).unwrap()]);
        let guided = GuidedScoreContext::guided(&den, &obs, 0.0).unwrap();
        let free = GuidedScoreContext::unconditional(&den);
        let sched = short_schedule(10, 1.0, "1/t@0.15".parse().unwrap());
        let a = sample_batch(&guided, 4, &sched, 13, 2).unwrap();
        let b = sample_batch(&free, 4, &sched, 13, 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.cloud.points(), y.cloud.points());
        }
    }

    #[test]
    fn ml_reconstruct_recovers_a_coarse_target() {
        let mut rng = RandomSource::new(55);
        let n = 12;
        let target = Cloud3::from_raw(
            (0..n)
                .map(|_| [rng.uniform_in(-0.8, 0.8), rng.uniform_in(-0.8, 0.8), rng.uniform_in(-0.8, 0.8)])
                .collect(),
        );
        let obs = ObservationSet::new(vec![
            Observation::coarse(target.clone(), Some(1.0), 17, n).unwrap(),
        ]);
        let res = ml_reconstruct(&obs, n, 300, 0.01, &mut rng).unwrap();
        let d = emd(&res.cloud, &target).unwrap();
        assert!(d < 0.01, "EMD {d} after descent");
    }

    #[test]
    fn ml_reconstruct_zero_steps_returns_the_init() {
        let target = Cloud3::new(vec![[0.3, 0.3, 0.3]]).unwrap();
        let obs = ObservationSet::new(vec![Observation::coarse(target, None, 5, 2).unwrap()]);
        let seed = 77;
        let mut rng = RandomSource::new(seed);
        let res = ml_reconstruct(&obs, 2, 0, 0.01, &mut rng).unwrap();
        let mut replay = RandomSource::new(seed);
        let init: Vec<[f64; 3]> = (0..2)
            .map(|_| {
                [
                    replay.uniform_in(-1.0, 1.0),
                    replay.uniform_in(-1.0, 1.0),
                    replay.uniform_in(-1.0, 1.0),
                ]
            })
            .collect();
        assert_eq!(res.cloud.points(), &init[..]);
    }

    #[test]
    fn ml_reconstruct_never_returns_worse_than_the_init() {
        let mut rng = RandomSource::new(60);
        let target = Cloud3::from_raw((0..6).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect());
        let obs = ObservationSet::new(vec![Observation::coarse(target, None, 9, 6).unwrap()]);
        let mut rng_a = RandomSource::new(61);
        let init = ml_reconstruct(&obs, 6, 0, 0.05, &mut rng_a).unwrap();
        let mut rng_b = RandomSource::new(61);
        let after = ml_reconstruct(&obs, 6, 40, 0.05, &mut rng_b).unwrap();
        assert!(after.energy <= init.energy);
        // The reported energy belongs to the returned cloud.
        let (e, _) = combined_energy(&after.cloud, &obs).unwrap();
        assert!((after.energy - e).abs() < 1e-12);
    }

    #[test]
    fn ml_reconstruct_rejects_empty_observations() {
        let mut rng = RandomSource::new(62);
        let obs = ObservationSet::new(vec![]);
        assert!(ml_reconstruct(&obs, 4, 10, 0.01, &mut rng).is_err());
    }
}
