//! EDM-style diffusion over `L x S` feature matrices.
//!
//! A network `F` (the [`Denoiser`] trait) is wrapped by a preconditioning
//! ([`Parameterization`]) into a denoiser
//! `D(x; σ) = c_skip(σ) x + c_out(σ) F(c_in(σ) x; σ, C)`.
//!
//! Sampling integrates the probability-flow ODE `dx/dσ = (x - D(x; σ)) / σ`
//! with Heun's method along a ρ-spaced schedule `σ_max = σ_0 > ... >
//! σ_{n-1} = σ_min > σ_n = 0`. The last leg is Euler only, so a run with
//! `n_steps = n` costs `2n - 1` network evaluations.
//!
//! Consistency models reuse the same network interface with a
//! parameterization for which `f(x, σ_min) = x` holds exactly.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::par;

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub rho: f64,
    pub n_steps: usize,
    pub p_mean: f64,
    pub p_std: f64,
    /// Stochastic churn of the sampler; 0 gives the deterministic ODE solver.
    pub churn: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_data: 0.5,
            rho: 7.0,
            n_steps: 40,
            p_mean: -1.2,
            p_std: 1.2,
            churn: 0.0,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) || !(self.sigma_max > self.sigma_min) || !self.sigma_max.is_finite() {
            return Err(Error::config("need 0 < sigma_min < sigma_max"));
        }
        if !(self.sigma_data > 0.0) || !(self.rho > 0.0) {
            return Err(Error::config("sigma_data and rho must be positive"));
        }
        if !(self.p_std >= 0.0) || !self.p_mean.is_finite() {
            return Err(Error::config("invalid training sigma distribution"));
        }
        if !(self.churn >= 0.0) {
            return Err(Error::config("churn must be non-negative"));
        }
        Ok(())
    }
}

/// `σ = exp(P_mean + P_std z)`, `z ~ N(0, 1)`.
pub fn sample_training_sigma<R: Rng + ?Sized>(schedule: &NoiseSchedule, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (schedule.p_mean + schedule.p_std * z).exp()
}

/// `x + σ ε` with i.i.d. standard normal `ε`.
pub fn perturb<R: Rng + ?Sized>(x: &Matrix, sigma: f64, rng: &mut R) -> Matrix {
    let mut out = x.clone();
    if sigma == 0.0 {
        return out;
    }
    out.iter_mut().for_each(|v| *v += sigma * rng.sample::<f64, _>(StandardNormal));
    out
}

pub fn standard_normal<R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Matrix {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn preconditioning(sigma: f64, sigma_data: f64) -> Result<Precond> {
    if !(sigma > 0.0) {
        return Err(Error::input(format!("sigma must be positive, got {sigma}")));
    }
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Ok(Precond {
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_in: 1.0 / s2.sqrt(),
        c_noise: 0.25 * sigma.ln(),
    })
}

/// Consistency-model coefficients: `c_skip(σ_min) = 1`, `c_out(σ_min) = 0`.
pub fn consistency_preconditioning(sigma: f64, sigma_min: f64, sigma_data: f64) -> Result<Precond> {
    if !(sigma >= sigma_min) || !(sigma_min > 0.0) {
        return Err(Error::input(format!("sigma {sigma} below sigma_min {sigma_min}")));
    }
    let d = sigma - sigma_min;
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Ok(Precond {
        c_skip: sigma_data * sigma_data / (d * d + sigma_data * sigma_data),
        c_out: d * sigma_data / s2.sqrt(),
        c_in: 1.0 / s2.sqrt(),
        c_noise: 0.25 * sigma.ln(),
    })
}

/// Loss weight `λ(σ) = (σ² + σ_data²) / (σ σ_data)²`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Edm,
    Consistency,
}

impl Parameterization {
    pub fn precond(self, sigma: f64, schedule: &NoiseSchedule) -> Result<Precond> {
        match self {
            Parameterization::Edm => preconditioning(sigma, schedule.sigma_data),
            Parameterization::Consistency => {
                consistency_preconditioning(sigma, schedule.sigma_min, schedule.sigma_data)
            }
        }
    }
}

/// The raw network `F(x_in; σ, C)`. Implementations see the already scaled
/// input `c_in x` and must return a matrix of the same shape.
pub trait Denoiser: Sync {
    fn evaluate(&self, x_in: &Matrix, sigma: f64, condition: Option<&Matrix>) -> Result<Matrix>;
}

fn check_condition(x: &Matrix, condition: Option<&Matrix>) -> Result<()> {
    if let Some(c) = condition {
        if c.nrows() != x.nrows() {
            return Err(Error::shape(format!("{} state rows but {} condition rows", x.nrows(), c.nrows())));
        }
    }
    Ok(())
}

/// `c_skip x + c_out F(c_in x)`.
pub fn denoise(
    net: &dyn Denoiser,
    param: Parameterization,
    schedule: &NoiseSchedule,
    x: &Matrix,
    sigma: f64,
    condition: Option<&Matrix>,
) -> Result<Matrix> {
    check_condition(x, condition)?;
    let p = param.precond(sigma, schedule)?;
    let f = net.evaluate(&(x * p.c_in), sigma, condition)?;
    if f.dim() != x.dim() {
        return Err(Error::shape(format!("network returned {:?} for input {:?}", f.dim(), x.dim())));
    }
    let mut out = x * p.c_skip;
    out.scaled_add(p.c_out, &f);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("non-finite denoiser output at sigma {sigma}")));
    }
    Ok(out)
}

fn check_weights(weights: &[f64], channels: usize) -> Result<()> {
    if weights.len() != channels {
        return Err(Error::shape(format!("{} class weights for {channels} channels", weights.len())));
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::input("class weights must be positive"));
    }
    Ok(())
}

/// `λ(σ) mean_{rows, classes} w_c (x̂ - x)²` given a row-class weighted squared error.
pub fn weighted_mse(pred: &Matrix, target: &Matrix, weights: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    let mut acc = 0.0;
    for (r, t) in pred.rows().into_iter().zip(target.rows()) {
        for ((a, b), w) in r.iter().zip(t.iter()).zip(weights) {
            acc += w * (a - b) * (a - b);
        }
    }
    acc / n
}

/// EDM loss for an explicitly perturbed sample.
pub fn edm_loss_at(
    net: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: &Matrix,
    x_sigma: &Matrix,
    sigma: f64,
    condition: Option<&Matrix>,
    weights: &[f64],
) -> Result<f64> {
    check_weights(weights, x.ncols())?;
    if x.dim() != x_sigma.dim() {
        return Err(Error::shape("clean and noisy samples differ in shape"));
    }
    let pred = denoise(net, Parameterization::Edm, schedule, x_sigma, sigma, condition)?;
    Ok(loss_weight(sigma, schedule.sigma_data) * weighted_mse(&pred, x, weights))
}

pub fn edm_loss<R: Rng + ?Sized>(
    net: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: &Matrix,
    sigma: f64,
    condition: Option<&Matrix>,
    weights: &[f64],
    rng: &mut R,
) -> Result<f64> {
    let xs = perturb(x, sigma, rng);
    edm_loss_at(net, schedule, x, &xs, sigma, condition, weights)
}

/// Inverse class frequency clipped to `[0.1, 10]` and rescaled to mean 1.
pub fn class_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 || counts.is_empty() {
        return vec![1.0; counts.len()];
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if c == 0 {
                10.0
            } else {
                (total as f64 / c as f64).clamp(0.1, 10.0)
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|w| w / mean).collect()
}

/// Descending σ levels from `σ_max` to `σ_min`, followed by a terminal 0.
pub fn step_schedule(schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.validate()?;
    let n = schedule.n_steps;
    if n < 2 {
        return Err(Error::config(format!("need at least 2 steps, got {n}")));
    }
    let inv = 1.0 / schedule.rho;
    let hi = schedule.sigma_max.powf(inv);
    let lo = schedule.sigma_min.powf(inv);
    let mut out: Vec<f64> = (0..n)
        .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(schedule.rho))
        .collect();
    out[0] = schedule.sigma_max;
    out[n - 1] = schedule.sigma_min;
    out.push(0.0);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Matrix,
    /// Network evaluations spent.
    pub evaluations: usize,
}

/// One Heun step of the probability-flow ODE from `sigma` to `sigma_next`.
/// Returns the new state and the number of network evaluations (1 or 2).
pub fn heun_step(
    net: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: &Matrix,
    sigma: f64,
    sigma_next: f64,
    condition: Option<&Matrix>,
) -> Result<(Matrix, usize)> {
    let den = denoise(net, Parameterization::Edm, schedule, x, sigma, condition)?;
    let d = (x - &den) / sigma;
    let h = sigma_next - sigma;
    let mut next = x + &(&d * h);
    if sigma_next == 0.0 {
        return Ok((next, 1));
    }
    let den2 = denoise(net, Parameterization::Edm, schedule, &next, sigma_next, condition)?;
    let d2 = (&next - &den2) / sigma_next;
    next = x.clone();
    Zip::from(&mut next).and(&d).and(&d2).for_each(|v, &a, &b| *v += 0.5 * h * (a + b));
    Ok((next, 2))
}

/// Integrates from an initial state at `σ_max` down to 0.
pub fn heun_from<R: Rng + ?Sized>(
    net: &dyn Denoiser,
    x_init: Matrix,
    condition: Option<&Matrix>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Sample> {
    let sigmas = step_schedule(schedule)?;
    let n = schedule.n_steps as f64;
    let gamma = (schedule.churn / n).min(std::f64::consts::SQRT_2 - 1.0);
    let mut x = x_init;
    let mut evaluations = 0;
    for w in sigmas.windows(2) {
        let mut sigma = w[0];
        if gamma > 0.0 {
            let hat = sigma * (1.0 + gamma);
            let extra = (hat * hat - sigma * sigma).sqrt();
            x = perturb(&x, extra, rng);
            sigma = hat;
        }
        let (next, evals) = heun_step(net, schedule, &x, sigma, w[1], condition)?;
        x = next;
        evaluations += evals;
    }
    Ok(Sample { x, evaluations })
}

/// Draws `x ~ N(0, σ_max² I)` and integrates it to a clean sample.
pub fn heun_sample<R: Rng + ?Sized>(
    net: &dyn Denoiser,
    condition: Option<&Matrix>,
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Sample> {
    let x = standard_normal(shape, rng) * schedule.sigma_max;
    heun_from(net, x, condition, schedule, rng)
}

/// One-evaluation sample `f(σ_max ε, σ_max)`.
pub fn consistency_sample<R: Rng + ?Sized>(
    net: &dyn Denoiser,
    condition: Option<&Matrix>,
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Sample> {
    let x = standard_normal(shape, rng) * schedule.sigma_max;
    let out = denoise(net, Parameterization::Consistency, schedule, &x, schedule.sigma_max, condition)?;
    Ok(Sample { x: out, evaluations: 1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Heun,
    Consistency,
}

/// `count` independent samples; sample `i` uses stream `i` of a ChaCha8 seeded with `seed`.
pub fn sample_many(
    net: &dyn Denoiser,
    kind: SamplerKind,
    condition: Option<&Matrix>,
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    seed: u64,
    count: usize,
) -> Result<Vec<Matrix>> {
    par::map_range(count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        match kind {
            SamplerKind::Heun => heun_sample(net, condition, shape, schedule, &mut rng),
            SamplerKind::Consistency => consistency_sample(net, condition, shape, schedule, &mut rng),
        }
        .map(|s| s.x)
    })
    .into_iter()
    .collect()
}

/// Exact denoiser for data `x ~ N(μ, s² I)`, exposed as a network by
/// inverting the preconditioning.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub mu: Matrix,
    pub s: f64,
    pub param: Parameterization,
    pub schedule: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(mu: Matrix, s: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(s >= 0.0) {
            return Err(Error::input("data standard deviation must be non-negative"));
        }
        Ok(GaussianOracle {
            mu,
            s,
            param: Parameterization::Edm,
            schedule,
        })
    }

    /// The mean laid out like `x`; a single-row mean is shared by all rows.
    fn mean_for(&self, x: &Matrix) -> Result<ndarray::ArrayView2<'_, f64>> {
        let fits = self.mu.dim() == x.dim() || (self.mu.nrows() == 1 && self.mu.ncols() == x.ncols());
        match self.mu.broadcast(x.dim()) {
            Some(m) if fits => Ok(m),
            _ => Err(Error::shape(format!("state {:?} but mean {:?}", x.dim(), self.mu.dim()))),
        }
    }

    /// `(s² x + σ² μ) / (s² + σ²)`.
    pub fn posterior_mean(&self, x: &Matrix, sigma: f64) -> Result<Matrix> {
        let mu = self.mean_for(x)?;
        let s2 = self.s * self.s;
        let v2 = sigma * sigma;
        if s2 + v2 == 0.0 {
            return Ok(mu.to_owned());
        }
        let mut out = x * (s2 / (s2 + v2));
        out.scaled_add(v2 / (s2 + v2), &mu);
        Ok(out)
    }

    /// Terminal state of the exact probability-flow ODE started from `x` at `σ_max`.
    pub fn flow_map(&self, x: &Matrix) -> Result<Matrix> {
        let mu = self.mean_for(x)?;
        let k = self.s / (self.s * self.s + self.schedule.sigma_max.powi(2)).sqrt();
        let mut out = &mu * (1.0 - k);
        out.scaled_add(k, x);
        Ok(out)
    }
}

/// `F = (target - c_skip x) / c_out`, or zeros where `c_out = 0`.
pub(crate) fn invert_precond(target: &Matrix, x: &Matrix, p: &Precond) -> Matrix {
    if p.c_out == 0.0 {
        return Matrix::zeros(x.dim());
    }
    let mut f = target - &(x * p.c_skip);
    f /= p.c_out;
    f
}

impl Denoiser for GaussianOracle {
    fn evaluate(&self, x_in: &Matrix, sigma: f64, _condition: Option<&Matrix>) -> Result<Matrix> {
        let p = self.param.precond(sigma, &self.schedule)?;
        let x = x_in / p.c_in;
        let target = self.posterior_mean(&x, sigma)?;
        Ok(invert_precond(&target, &x, &p))
    }
}

/// A network with a flat parameter vector and reverse-mode gradients.
pub trait Trainable: Denoiser + Clone + Send {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Gradient of `sum(grad_out ⊙ F(x_in; σ, C))` with respect to the parameters.
    fn backward(&self, x_in: &Matrix, sigma: f64, condition: Option<&Matrix>, grad_out: &Matrix) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub iterations: usize,
    pub batch: usize,
    /// Number of σ levels in the discretization used for distillation.
    pub grid_steps: usize,
    /// EMA decay of the target network.
    pub ema: f64,
    pub adam: AdamConfig,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub weighting: LinkWeighting,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            iterations: 2000,
            batch: 8,
            grid_steps: 40,
            ema: 0.999,
            adam: AdamConfig::default(),
            cosine_decay: true,
            weighting: LinkWeighting::Uniform,
            seed: 0,
        }
    }
}

/// Per-link weight of the distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkWeighting {
    /// Every link counts the same.
    #[default]
    Uniform,
    /// `1 / (t_j - t_{j+1})`, normalized so the weights average to 1 over the grid.
    InverseGap,
}

/// One training example: clean state and optional condition.
pub type Example = (Matrix, Option<Matrix>);

/// Distills `teacher` (an EDM network) into the consistency network `f`.
///
/// Each example draws a grid index `j`, noises `x` to `t_j`, takes one
/// teacher Heun step to `t_{j+1}` and pulls `f(x_{t_j}, t_j)` towards the
/// EMA target `f⁻(x_{t_{j+1}}, t_{j+1})`. Returns the per-iteration loss.
pub fn consistency_distill<F, S>(
    f: &mut F,
    teacher: &dyn Denoiser,
    mut data: S,
    schedule: &NoiseSchedule,
    config: &DistillConfig,
) -> Result<Vec<f64>>
where
    F: Trainable,
    S: FnMut(&mut ChaCha8Rng) -> Result<Example>,
{
    if !(0.0..=1.0).contains(&config.ema) {
        return Err(Error::config("ema decay must lie in [0, 1]"));
    }
    let grid = step_schedule(&NoiseSchedule {
        n_steps: config.grid_steps,
        ..*schedule
    })?;
    let levels = &grid[..grid.len() - 1];
    let link_weights: Vec<f64> = match config.weighting {
        LinkWeighting::Uniform => vec![1.0; levels.len() - 1],
        LinkWeighting::InverseGap => {
            let raw: Vec<f64> = levels.windows(2).map(|w| 1.0 / (w[0] - w[1])).collect();
            let mean = raw.iter().sum::<f64>() / raw.len() as f64;
            raw.iter().map(|w| w / mean).collect()
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut target = f.clone();
    let mut opt = Adam::new(config.adam, f.params().len());
    let mut losses = Vec::with_capacity(config.iterations);
    let param = Parameterization::Consistency;
    for it in 0..config.iterations {
        let mut grad = vec![0.0; f.params().len()];
        let mut loss = 0.0;
        for _ in 0..config.batch.max(1) {
            let (x, cond) = data(&mut rng)?;
            let c = cond.as_ref();
            let j = rng.random_range(0..levels.len() - 1);
            let (hi, lo) = (levels[j], levels[j + 1]);
            let z = standard_normal(x.dim(), &mut rng);
            let mut x_hi = x.clone();
            x_hi.scaled_add(hi, &z);
            let (x_lo, _) = heun_step(teacher, schedule, &x_hi, hi, lo, c)?;
            let y = denoise(&target, param, schedule, &x_lo, lo, c)?;
            let p = param.precond(hi, schedule)?;
            let x_in = &x_hi * p.c_in;
            let online = denoise(&*f, param, schedule, &x_hi, hi, c)?;
            let n = online.len().max(1) as f64;
            let diff = &online - &y;
            let lw = link_weights[j];
            loss += lw * diff.iter().map(|d| d * d).sum::<f64>() / n;
            let g_out = &diff * (2.0 * lw * p.c_out / n);
            let g = f.backward(&x_in, hi, c, &g_out)?;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let b = config.batch.max(1) as f64;
        loss /= b;
        grad.iter_mut().for_each(|g| *g /= b);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("distillation loss is {loss} at iteration {it}")));
        }
        losses.push(loss);
        if config.cosine_decay {
            let frac = it as f64 / config.iterations as f64;
            opt.config.lr = config.adam.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        opt.step(f.params_mut(), &grad);
        let mu = config.ema;
        for (t, s) in target.params_mut().iter_mut().zip(f.params()) {
            *t = mu * *t + (1.0 - mu) * s;
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct Zero;
    impl Denoiser for Zero {
        fn evaluate(&self, x_in: &Matrix, _: f64, _: Option<&Matrix>) -> Result<Matrix> {
            Ok(Matrix::zeros(x_in.dim()))
        }
    }

    struct Wrong;
    impl Denoiser for Wrong {
        fn evaluate(&self, _: &Matrix, _: f64, _: Option<&Matrix>) -> Result<Matrix> {
            Ok(Matrix::zeros((1, 1)))
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn training_sigma() {
        let s = NoiseSchedule { p_std: 0.0, ..Default::default() };
        let mut r = rng(1);
        for _ in 0..10 {
            assert_eq!(sample_training_sigma(&s, &mut r), (-1.2f64).exp());
        }
        let s = NoiseSchedule::default();
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let v = sample_training_sigma(&s, &mut r);
            assert!(v > 0.0);
            acc += v.ln();
        }
        assert!((acc / n as f64 + 1.2).abs() < 0.02);
    }

    #[test]
    fn perturbation_moments() {
        let mut r = rng(2);
        let x = Matrix::from_elem((100, 3), 0.7);
        assert_eq!(perturb(&x, 0.0, &mut r), x);
        let z = perturb(&Matrix::zeros((1000, 100)), 1.0, &mut r);
        let n = z.len() as f64;
        let mean = z.sum() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.98..=1.02).contains(&var));
        let sigma = 2.5;
        let d = perturb(&x, sigma, &mut r) - &x;
        assert!((d.sum() / d.len() as f64).abs() < 3.0 * sigma / (d.len() as f64).sqrt());
    }

    #[test]
    fn precond_values() {
        let sd = 0.5;
        let p = preconditioning(1e-9, sd).unwrap();
        assert!((p.c_skip - 1.0).abs() < 1e-12 && p.c_out < 1e-8);
        let p = preconditioning(sd, sd).unwrap();
        assert!((p.c_skip - 0.5).abs() < 1e-15);
        assert!((p.c_out - sd / 2f64.sqrt()).abs() < 1e-15);
        assert!((p.c_in - 1.0 / (sd * 2f64.sqrt())).abs() < 1e-15);
        assert!((p.c_noise - 0.25 * sd.ln()).abs() < 1e-15);
        assert!(preconditioning(0.0, sd).is_err());
        assert!(preconditioning(-1.0, sd).is_err());
        for k in 0..50 {
            let sigma = 10f64.powf(-3.0 + k as f64 * 0.1);
            let p = preconditioning(sigma, sd).unwrap();
            assert!((loss_weight(sigma, sd) * p.c_out * p.c_out - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_boundary() {
        let s = NoiseSchedule::default();
        let p = consistency_preconditioning(s.sigma_min, s.sigma_min, s.sigma_data).unwrap();
        assert_eq!((p.c_skip, p.c_out), (1.0, 0.0));
        assert!(consistency_preconditioning(0.001, s.sigma_min, s.sigma_data).is_err());
        struct Big;
        impl Denoiser for Big {
            fn evaluate(&self, x: &Matrix, _: f64, _: Option<&Matrix>) -> Result<Matrix> {
                Ok(x.mapv(|v| 1e3 * v + 7.0))
            }
        }
        let x = array![[0.3, -2.0], [5.0, 1.0]];
        let out = denoise(&Big, Parameterization::Consistency, &s, &x, s.sigma_min, None).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn denoise_cases() {
        let s = NoiseSchedule::default();
        let x = array![[1.0, -2.0, 0.5]];
        let out = denoise(&Zero, Parameterization::Edm, &s, &x, 0.5, None).unwrap();
        assert_eq!(out, &x * 0.5);
        let out = denoise(&Zero, Parameterization::Edm, &s, &x, 1e-9, None).unwrap();
        assert!((out - &x).iter().all(|d| d.abs() < 1e-12));
        assert!(denoise(&Wrong, Parameterization::Edm, &s, &x, 1.0, None).is_err());
        let bad_cond = Matrix::zeros((2, 2));
        assert!(denoise(&Zero, Parameterization::Edm, &s, &x, 1.0, Some(&bad_cond)).is_err());
    }

    #[test]
    fn oracle_posterior() {
        let s = NoiseSchedule::default();
        let mu = array![[1.0, 2.0], [-1.0, 0.0]];
        let x = array![[3.0, 3.0], [3.0, -5.0]];
        let o = GaussianOracle::new(mu.clone(), 0.7, s).unwrap();
        assert_eq!(o.posterior_mean(&x, 0.0).unwrap(), x);
        let mid = o.posterior_mean(&x, 0.7).unwrap();
        assert!((mid - (&x + &mu) / 2.0).iter().all(|d| d.abs() < 1e-15));
        let point = GaussianOracle::new(mu.clone(), 0.0, s).unwrap();
        assert_eq!(point.posterior_mean(&x, 1.3).unwrap(), mu);
        for sigma in [0.01, 0.5, 3.0, 80.0] {
            let d = denoise(&o, Parameterization::Edm, &s, &x, sigma, None).unwrap();
            let want = o.posterior_mean(&x, sigma).unwrap();
            assert!((d - want).iter().all(|e| e.abs() < 1e-10));
        }
    }

    #[test]
    fn loss_cases() {
        let s = NoiseSchedule::default();
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let o = GaussianOracle::new(x.clone(), 0.0, s).unwrap();
        let l = edm_loss(&o, &s, &x, 0.8, None, &[1.0, 1.0], &mut rng(3)).unwrap();
        assert!(l.abs() < 1e-20);

        // F = 0, x = 0, σ = σ_data: λ c_skip² σ² mean(ε²) = 8 * 0.25 * 0.25 * mean(ε²)
        let sd = s.sigma_data;
        let zero = Matrix::zeros((4, 2));
        let eps = standard_normal((4, 2), &mut rng(4));
        let xs = &eps * sd;
        let l = edm_loss_at(&Zero, &s, &zero, &xs, sd, None, &[1.0, 1.0]).unwrap();
        let want = 0.5 * eps.iter().map(|e| e * e).sum::<f64>() / 8.0;
        assert!((l - want).abs() < 1e-12);
        let l2 = edm_loss_at(&Zero, &s, &zero, &xs, sd, None, &[2.0, 2.0]).unwrap();
        assert!((l2 - 2.0 * l).abs() < 1e-12);
        assert!(edm_loss_at(&Zero, &s, &zero, &xs, sd, None, &[1.0, 0.0]).is_err());
        assert!(edm_loss_at(&Zero, &s, &zero, &xs, sd, None, &[1.0]).is_err());
    }

    #[test]
    fn weights_from_counts() {
        let w = class_weights(&[100, 100, 100]);
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let w = class_weights(&[1000, 10, 0]);
        assert!((w.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!(w[0] < w[1] && w[1] <= w[2]);
        assert_eq!(class_weights(&[0, 0]), vec![1.0, 1.0]);
    }

    #[test]
    fn schedule_cases() {
        let s = NoiseSchedule { n_steps: 2, ..Default::default() };
        assert_eq!(step_schedule(&s).unwrap(), vec![80.0, 0.002, 0.0]);
        let s = NoiseSchedule::default();
        let t = step_schedule(&s).unwrap();
        assert_eq!(t.len(), 41);
        assert!(t.windows(2).all(|w| w[0] > w[1]));
        let s = NoiseSchedule { rho: 1.0, n_steps: 3, sigma_min: 1.0, sigma_max: 9.0, ..Default::default() };
        let t = step_schedule(&s).unwrap();
        assert!(t.iter().zip([9.0, 5.0, 1.0, 0.0]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(step_schedule(&NoiseSchedule { n_steps: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn heun_counts_and_contracts() {
        let s = NoiseSchedule::default();
        let out = heun_sample(&Zero, None, (3, 2), &s, &mut rng(5)).unwrap();
        assert_eq!(out.evaluations, 79);
        // D ≡ 0 needs F = -c_skip x / c_out
        struct Origin(NoiseSchedule);
        impl Denoiser for Origin {
            fn evaluate(&self, x_in: &Matrix, sigma: f64, _: Option<&Matrix>) -> Result<Matrix> {
                let p = preconditioning(sigma, self.0.sigma_data)?;
                Ok(invert_precond(&Matrix::zeros(x_in.dim()), &(x_in / p.c_in), &p))
            }
        }
        let out = heun_sample(&Origin(s), None, (10, 5), &s, &mut rng(6)).unwrap();
        assert!(out.x.iter().all(|v| v.abs() < 1e-3 * s.sigma_max));
        let a = heun_sample(&Origin(s), None, (4, 2), &s, &mut rng(7)).unwrap();
        let b = heun_sample(&Origin(s), None, (4, 2), &s, &mut rng(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn heun_recovers_one_dim_gaussian() {
        let s = NoiseSchedule::default();
        let (mu, sd) = (0.3, 0.5);
        let o = GaussianOracle::new(array![[mu]], sd, s).unwrap();
        let xs = sample_many(&o, SamplerKind::Heun, None, (1, 1), &s, 11, 10_000).unwrap();
        let v: Vec<f64> = xs.iter().map(|m| m[[0, 0]]).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - mu).abs() < 3.0 * sd / 100.0);
        assert!((var / (sd * sd) - 1.0).abs() < 0.05);
    }

    #[test]
    fn heun_matches_exact_flow() {
        let s = NoiseSchedule::default();
        let o = GaussianOracle::new(array![[0.4, -0.2]], 0.5, s).unwrap();
        let x0 = standard_normal((1, 2), &mut rng(9)) * s.sigma_max;
        let out = heun_from(&o, x0.clone(), None, &s, &mut rng(0)).unwrap();
        let exact = o.flow_map(&x0).unwrap();
        assert!((out.x - exact).iter().all(|d| d.abs() < 1e-2));
    }

    #[test]
    fn churn_changes_path() {
        let s = NoiseSchedule { churn: 10.0, ..Default::default() };
        let o = GaussianOracle::new(array![[0.0]], 0.5, s).unwrap();
        let a = heun_sample(&o, None, (1, 1), &s, &mut rng(1)).unwrap();
        let b = heun_sample(&o, None, (1, 1), &NoiseSchedule::default(), &mut rng(1)).unwrap();
        assert_ne!(a.x, b.x);
        assert!(a.x[[0, 0]].is_finite());
    }

    #[test]
    fn consistency_sample_shape_and_seed() {
        let s = NoiseSchedule::default();
        let a = consistency_sample(&Zero, None, (6, 5), &s, &mut rng(2)).unwrap();
        let b = consistency_sample(&Zero, None, (6, 5), &s, &mut rng(2)).unwrap();
        assert_eq!(a.evaluations, 1);
        assert_eq!(a.x.dim(), (6, 5));
        assert!(a.x.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_many_is_seeded() {
        let s = NoiseSchedule { n_steps: 5, ..Default::default() };
        let o = GaussianOracle::new(array![[0.1, 0.2]], 0.5, s).unwrap();
        let a = sample_many(&o, SamplerKind::Heun, None, (1, 2), &s, 3, 16).unwrap();
        let b = par::install(1, || sample_many(&o, SamplerKind::Heun, None, (1, 2), &s, 3, 16).unwrap());
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    fn toy_student() -> crate::pipeline::RowMlp {
        use crate::pipeline::{RowMlp, RowMlpConfig};
        let cfg = RowMlpConfig { hidden: 8, fourier: 2, cond_channels: 0, expand_code: false, ..Default::default() };
        let mut f = RowMlp::new(cfg, 4, 3);
        f.parameterization = Parameterization::Consistency;
        f
    }

    fn toy_stream(mu: Matrix) -> impl FnMut(&mut ChaCha8Rng) -> Result<Example> {
        move |r| Ok((&mu + &(standard_normal((4, 4), r) * 0.5), None))
    }

    #[test]
    fn distillation_approaches_flow_map() {
        let s = NoiseSchedule::default();
        let mu = array![[0.3, -0.2, 0.5, 0.0]];
        let teacher = GaussianOracle::new(mu.clone(), 0.5, s).unwrap();
        let x = standard_normal((64, 4), &mut rng(5)) * s.sigma_max;
        let exact = teacher.flow_map(&x).unwrap();
        let err = |f: &crate::pipeline::RowMlp| {
            let d = denoise(f, Parameterization::Consistency, &s, &x, s.sigma_max, None).unwrap() - &exact;
            d.mapv(|v| v * v).mean().unwrap()
        };
        let mut f = toy_student();
        let before = err(&f);
        let cfg = DistillConfig { iterations: 1500, ema: 0.9, ..Default::default() };
        let losses = consistency_distill(&mut f, &teacher, toy_stream(mu), &s, &cfg).unwrap();
        assert_eq!(losses.len(), 1500);
        assert!(losses.iter().all(|l| l.is_finite()));
        let after = err(&f);
        assert!(after < 0.1 * before, "{before} -> {after}");
    }

    #[test]
    fn distillation_is_seeded_and_keeps_boundary() {
        let s = NoiseSchedule::default();
        let mu = array![[0.1, 0.2, 0.3, 0.4]];
        let teacher = GaussianOracle::new(mu.clone(), 0.5, s).unwrap();
        let cfg = DistillConfig { iterations: 20, weighting: LinkWeighting::InverseGap, ..Default::default() };
        let mut a = toy_student();
        let mut b = toy_student();
        let la = consistency_distill(&mut a, &teacher, toy_stream(mu.clone()), &s, &cfg).unwrap();
        let lb = consistency_distill(&mut b, &teacher, toy_stream(mu), &s, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        let x = array![[1.0, -2.0, 3.0, 0.5]];
        assert_eq!(denoise(&a, Parameterization::Consistency, &s, &x, s.sigma_min, None).unwrap(), x);
    }

    #[test]
    fn frozen_target_with_unit_ema() {
        // with ema = 1 the target never moves, so a zero learning rate leaves the loss constant per draw
        let s = NoiseSchedule::default();
        let mu = array![[0.0, 0.0, 0.0, 0.0]];
        let teacher = GaussianOracle::new(mu.clone(), 0.5, s).unwrap();
        let mut f = toy_student();
        let init = f.clone();
        let cfg = DistillConfig {
            iterations: 5,
            ema: 1.0,
            adam: AdamConfig { lr: 0.0, ..Default::default() },
            ..Default::default()
        };
        consistency_distill(&mut f, &teacher, toy_stream(mu), &s, &cfg).unwrap();
        assert_eq!(f, init);
        let bad = DistillConfig { ema: 1.5, ..Default::default() };
        assert!(consistency_distill(&mut f, &teacher, toy_stream(array![[0.0; 4]]), &s, &bad).is_err());
    }
}
