//! Analytic diffusion machinery: cosine noise schedule, closed-form
//! Gaussian-mixture noise prediction with classifier-free guidance, a
//! deterministic DDIM-style restoration operator, pose-bucketed prior
//! fitting, and a tiny online score estimator trained by SGD.
//!
//! Every "model" here has a closed-form marginal: if x₀ is drawn from
//! component k of a mixture (mean m_k, isotropic stdev γ_k) and
//! x_t = α_t x₀ + σ_t ε, then x_t ~ N(α_t m_k, (α_t²γ_k² + σ_t²)I). Noise
//! prediction is exactly −σ_t ∇ log p_t, so oracle tests can differentiate
//! the log-density numerically and compare.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::io::{Container, Payload};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

/// Stdev floor for fitted mixture components, in normalized pixel units.
pub const GAMMA_MIN: f64 = 0.01;

/// Variance floor for the online estimator.
pub const ESTIMATOR_VAR_FLOOR: f64 = 1e-4;

/// Deterministic restoration step count.
pub const RESTORE_STEPS: usize = 20;

/// Condition token for the unconditional branch of guidance.
pub const UNCOND: &str = "uncond";

const AZIMUTH_BINS: usize = 8;
const ELEVATION_SPLIT_DEG: f64 = 22.5;

/// Cosine schedule: α_t = cos(tπ/2), σ_t = sin(tπ/2).
pub fn schedule(t: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidTimestep(t));
    }
    let a = t * std::f64::consts::FRAC_PI_2;
    Ok((a.cos(), a.sin()))
}

/// Forward noising x_t = α_t x₀ + σ_t ε.
pub fn add_noise(x0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} noise values", x0.len()),
            got: format!("{}", eps.len()),
        });
    }
    let (alpha, sigma) = schedule(t)?;
    Ok(x0.iter().zip(eps).map(|(x, e)| alpha * x + sigma * e).collect())
}

/// Classifier-free guidance: ε_cond + s·(ε_cond − ε_uncond).
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", eps_cond.len()),
            got: format!("{}", eps_uncond.len()),
        });
    }
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| c + scale * (c - u))
        .collect())
}

/// One isotropic Gaussian component of a mixture over flattened images.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub stdev: f64,
    pub weight: f64,
}

/// Weighted isotropic Gaussian mixture over image space.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Mixture {
    pub components: Vec<MixtureComponent>,
}

impl Mixture {
    pub fn single(mean: Vec<f64>, stdev: f64) -> Self {
        Mixture { components: vec![MixtureComponent { mean, stdev, weight: 1.0 }] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::EmptyInput("mixture has no components".into()));
        }
        let wsum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 || self.components.iter().any(|c| c.weight <= 0.0) {
            return Err(Error::Config(format!(
                "mixture weights must be positive and sum to 1, got sum {wsum}"
            )));
        }
        if self.components.iter().any(|c| c.stdev < 0.0) {
            return Err(Error::Config("mixture stdev must be non-negative".into()));
        }
        Ok(())
    }

    /// Per-component log responsibilities at x_t plus the total log density.
    fn log_terms(&self, x_t: &[f64], alpha: f64, sigma: f64) -> (Vec<f64>, f64) {
        let d = x_t.len() as f64;
        let logits: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let var = alpha * alpha * c.stdev * c.stdev + sigma * sigma;
                let mut sq = 0.0;
                for (x, m) in x_t.iter().zip(&c.mean) {
                    let r = x - alpha * m;
                    sq += r * r;
                }
                c.weight.ln()
                    - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
                    - sq / (2.0 * var)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        (logits, lse)
    }

    /// log p_t(x_t) of the noised marginal.
    pub fn log_density(&self, x_t: &[f64], t: f64) -> Result<f64> {
        let (alpha, sigma) = schedule(t)?;
        self.check_dims(x_t)?;
        Ok(self.log_terms(x_t, alpha, sigma).1)
    }

    /// ε̂ = −σ_t ∇ log p_t(x_t), in closed form with log-sum-exp weights.
    pub fn predict_noise(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        let (alpha, sigma) = schedule(t)?;
        self.check_dims(x_t)?;
        let (logits, lse) = self.log_terms(x_t, alpha, sigma);
        let mut out = vec![0.0; x_t.len()];
        for (c, logit) in self.components.iter().zip(&logits) {
            let resp = (logit - lse).exp();
            let var = alpha * alpha * c.stdev * c.stdev + sigma * sigma;
            let coeff = resp * sigma / var;
            for ((o, x), m) in out.iter_mut().zip(x_t).zip(&c.mean) {
                *o += coeff * (x - alpha * m);
            }
        }
        Ok(out)
    }

    /// Posterior mean E[x₀ | x_t]: the restoration target of one step.
    pub fn posterior_mean_x0(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        let (alpha, sigma) = schedule(t)?;
        self.check_dims(x_t)?;
        let (logits, lse) = self.log_terms(x_t, alpha, sigma);
        let mut out = vec![0.0; x_t.len()];
        for (c, logit) in self.components.iter().zip(&logits) {
            let resp = (logit - lse).exp();
            let var = alpha * alpha * c.stdev * c.stdev + sigma * sigma;
            let shrink = alpha * c.stdev * c.stdev / var;
            for ((o, x), m) in out.iter_mut().zip(x_t).zip(&c.mean) {
                *o += resp * (m + shrink * (x - alpha * m));
            }
        }
        Ok(out)
    }

    fn check_dims(&self, x_t: &[f64]) -> Result<()> {
        for c in &self.components {
            if c.mean.len() != x_t.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} pixels", c.mean.len()),
                    got: format!("{}", x_t.len()),
                });
            }
        }
        Ok(())
    }
}

/// A set of Gaussian mixtures keyed by condition token. Tokens are opaque
/// strings composing modality and view, e.g. "uncond", "text:rgb",
/// "view:rgb:az3el1".
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GaussianMixturePrior {
    mixtures: BTreeMap<String, Mixture>,
}

impl GaussianMixturePrior {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, condition: &str, mixture: Mixture) {
        self.mixtures.insert(condition.to_string(), mixture);
    }

    pub fn get(&self, condition: &str) -> Result<&Mixture> {
        self.mixtures
            .get(condition)
            .ok_or_else(|| Error::UnconditionedQuery(condition.to_string()))
    }

    pub fn contains(&self, condition: &str) -> bool {
        self.mixtures.contains_key(condition)
    }

    pub fn conditions(&self) -> impl Iterator<Item = &str> {
        self.mixtures.keys().map(|s| s.as_str())
    }

    pub fn predict_noise(&self, x_t: &[f64], t: f64, condition: &str) -> Result<Vec<f64>> {
        self.get(condition)?.predict_noise(x_t, t)
    }

    pub fn log_density(&self, x_t: &[f64], t: f64, condition: &str) -> Result<f64> {
        self.get(condition)?.log_density(x_t, t)
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        let names: Vec<&str> = self.mixtures.keys().map(|s| s.as_str()).collect();
        c.insert(&format!("{prefix}/conditions"), Payload::text(&names.join("\n")));
        for (cond, mix) in &self.mixtures {
            let k = mix.components.len() as u64;
            let d = mix.components[0].mean.len() as u64;
            let mut means = Vec::with_capacity((k * d) as usize);
            let mut stdevs = Vec::with_capacity(k as usize);
            let mut weights = Vec::with_capacity(k as usize);
            for comp in &mix.components {
                means.extend_from_slice(&comp.mean);
                stdevs.push(comp.stdev);
                weights.push(comp.weight);
            }
            c.insert(&format!("{prefix}/{cond}/means"), Payload::F64 { dims: vec![k, d], data: means });
            c.insert(&format!("{prefix}/{cond}/stdevs"), Payload::F64 { dims: vec![k], data: stdevs });
            c.insert(&format!("{prefix}/{cond}/weights"), Payload::F64 { dims: vec![k], data: weights });
        }
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let names = c.get(&format!("{prefix}/conditions"))?.as_text()?;
        let mut prior = GaussianMixturePrior::new();
        for cond in names.split('\n').filter(|s| !s.is_empty()) {
            let means_payload = c.get(&format!("{prefix}/{cond}/means"))?;
            let dims = means_payload.dims().to_vec();
            let means = means_payload.as_f64()?;
            let stdevs = c.get(&format!("{prefix}/{cond}/stdevs"))?.as_f64()?;
            let weights = c.get(&format!("{prefix}/{cond}/weights"))?.as_f64()?;
            let (k, d) = (dims[0] as usize, dims[1] as usize);
            let mut mix = Mixture::default();
            for i in 0..k {
                mix.components.push(MixtureComponent {
                    mean: means[i * d..(i + 1) * d].to_vec(),
                    stdev: stdevs[i],
                    weight: weights[i],
                });
            }
            prior.insert(cond, mix);
        }
        Ok(prior)
    }
}

/// Quantized view token: 8 azimuth bins × 2 elevation bins.
pub fn view_bucket(prefix: &str, azimuth_deg: f64, elevation_deg: f64) -> String {
    let az = azimuth_deg.rem_euclid(360.0);
    let az_bin = ((az / (360.0 / AZIMUTH_BINS as f64)) as usize).min(AZIMUTH_BINS - 1);
    let el_bin = usize::from(elevation_deg >= ELEVATION_SPLIT_DEG);
    format!("{prefix}:az{az_bin}el{el_bin}")
}

/// Fits a pose-conditioned prior to view renderings: one single-Gaussian
/// component per non-empty view bucket (mean = bucket image mean, stdev =
/// residual stdev floored at γ_min), optionally mixed with a class-preserving
/// prior at weight `lambda_class`.
pub fn fit_prior(
    renderings: &[(Vec<f64>, Camera)],
    prefix: &str,
    class_prior: Option<(&Mixture, f64)>,
) -> Result<GaussianMixturePrior> {
    if renderings.is_empty() {
        return Err(Error::EmptyInput("renderings".into()));
    }
    let dim = renderings[0].0.len();
    let mut buckets: BTreeMap<String, Vec<&Vec<f64>>> = BTreeMap::new();
    for (img, cam) in renderings {
        if img.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{dim} pixels"),
                got: format!("{}", img.len()),
            });
        }
        buckets
            .entry(view_bucket(prefix, cam.azimuth_deg, cam.elevation_deg))
            .or_default()
            .push(img);
    }

    let mut prior = GaussianMixturePrior::new();
    for (cond, imgs) in buckets {
        let n = imgs.len() as f64;
        let mut mean = vec![0.0; dim];
        for img in &imgs {
            for (m, v) in mean.iter_mut().zip(img.iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut sq = 0.0;
        for img in &imgs {
            for (m, v) in mean.iter().zip(img.iter()) {
                let r = v - m;
                sq += r * r;
            }
        }
        let stdev = (sq / (n * dim as f64)).sqrt().max(GAMMA_MIN);

        let mut mix = Mixture::default();
        match class_prior {
            Some((class, lambda)) if lambda > 0.0 => {
                mix.components.push(MixtureComponent { mean, stdev, weight: 1.0 - lambda });
                for comp in &class.components {
                    mix.components.push(MixtureComponent {
                        mean: comp.mean.clone(),
                        stdev: comp.stdev,
                        weight: lambda * comp.weight,
                    });
                }
            }
            _ => mix.components.push(MixtureComponent { mean, stdev, weight: 1.0 }),
        }
        prior.insert(&cond, mix);
    }
    Ok(prior)
}

/// Noises each image to t′ and walks it back to t = 0 with `RESTORE_STEPS`
/// deterministic posterior-mean steps under the given condition's mixture.
/// t′ = 0 returns the inputs bitwise.
pub fn augment_renderings(
    prior: &GaussianMixturePrior,
    images: &[(Vec<f64>, String)],
    t_prime: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&t_prime) {
        return Err(Error::InvalidTimestep(t_prime));
    }
    if t_prime == 0.0 {
        return Ok(images.iter().map(|(img, _)| img.clone()).collect());
    }
    let mut out = Vec::with_capacity(images.len());
    for (img, cond) in images {
        let mixture = prior.get(cond)?;
        let eps: Vec<f64> = (0..img.len()).map(|_| rng.sample(StandardNormal)).collect();
        let mut x = add_noise(img, t_prime, &eps)?;
        for j in 0..RESTORE_STEPS {
            let t_cur = t_prime * (1.0 - j as f64 / RESTORE_STEPS as f64);
            let t_next = t_prime * (1.0 - (j + 1) as f64 / RESTORE_STEPS as f64);
            let (a_cur, s_cur) = schedule(t_cur)?;
            let (a_next, s_next) = schedule(t_next)?;
            let x0 = mixture.posterior_mean_x0(&x, t_cur)?;
            // ε implied by the current state and its clean estimate; σ > 0
            // because only the final *target* may be t = 0.
            for i in 0..x.len() {
                let eps_i = (x[i] - a_cur * x0[i]) / s_cur;
                x[i] = a_next * x0[i] + s_next * eps_i;
            }
        }
        out.push(x);
    }
    Ok(out)
}

/// Single-Gaussian score model per condition bucket, updated online by SGD
/// on the denoising objective. Buckets initialize lazily at (m = 0.5·1, v = 1),
/// a broad guess centered in normalized pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineScoreEstimator {
    pub eta: f64,
    dim: usize,
    buckets: BTreeMap<String, (Vec<f64>, f64)>,
}

impl OnlineScoreEstimator {
    pub fn new(dim: usize, eta: f64) -> Self {
        OnlineScoreEstimator { eta, dim, buckets: BTreeMap::new() }
    }

    fn bucket(&mut self, condition: &str) -> &mut (Vec<f64>, f64) {
        self.buckets
            .entry(condition.to_string())
            .or_insert_with(|| (vec![0.5; self.dim], 1.0))
    }

    /// Current (mean, variance) snapshot for a condition.
    pub fn params(&mut self, condition: &str) -> (Vec<f64>, f64) {
        let (m, v) = self.bucket(condition);
        (m.clone(), *v)
    }

    /// Overrides a bucket's parameters, creating it if needed.
    pub fn set_params(&mut self, condition: &str, mean: Vec<f64>, var: f64) -> Result<()> {
        if mean.len() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", self.dim),
                got: format!("{}", mean.len()),
            });
        }
        self.buckets
            .insert(condition.to_string(), (mean, var.max(ESTIMATOR_VAR_FLOOR)));
        Ok(())
    }

    /// ε̂ under the bucket's Gaussian: σ_t (x_t − α_t m) / (α_t² v + σ_t²).
    pub fn predict_noise(&mut self, x_t: &[f64], t: f64, condition: &str) -> Result<Vec<f64>> {
        let (alpha, sigma) = schedule(t)?;
        if x_t.len() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixels", self.dim),
                got: format!("{}", x_t.len()),
            });
        }
        let (m, v) = self.bucket(condition);
        let denom = alpha * alpha * *v + sigma * sigma;
        Ok(x_t.iter().zip(m.iter()).map(|(x, mi)| sigma * (x - alpha * mi) / denom).collect())
    }

    /// One SGD step on ‖ε̂(add_noise(x,t,ε)) − ε‖² at rate η₂.
    pub fn update(&mut self, x: &[f64], t: f64, eps: &[f64], condition: &str) -> Result<()> {
        let (alpha, sigma) = schedule(t)?;
        let x_t = add_noise(x, t, eps)?;
        let eps_hat = self.predict_noise(&x_t, t, condition)?;
        let eta = self.eta;
        let (m, v) = self.bucket(condition);
        let denom = alpha * alpha * *v + sigma * sigma;

        // J = ‖ε̂ − ε‖², ε̂ = σ(x_t − αm)/D with D = α²v + σ².
        // ∂J/∂m_i = −2σα/D · (ε̂_i − ε_i); ∂J/∂v = −2α²/D · ⟨ε̂ − ε, ε̂⟩.
        let mut g_dot_epshat = 0.0;
        for i in 0..m.len() {
            let g = eps_hat[i] - eps[i];
            g_dot_epshat += g * eps_hat[i];
            m[i] -= eta * (-2.0 * sigma * alpha / denom * g);
        }
        let dv = -2.0 * alpha * alpha / denom * g_dot_epshat;
        *v = (*v - eta * dv).max(ESTIMATOR_VAR_FLOOR);
        Ok(())
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        let names: Vec<&str> = self.buckets.keys().map(|s| s.as_str()).collect();
        c.insert(&format!("{prefix}/conditions"), Payload::text(&names.join("\n")));
        c.insert(&format!("{prefix}/eta"), Payload::scalar_f64(self.eta));
        c.insert(&format!("{prefix}/dim"), Payload::scalar_u64(self.dim as u64));
        for (cond, (m, v)) in &self.buckets {
            c.insert(
                &format!("{prefix}/{cond}/mean"),
                Payload::F64 { dims: vec![m.len() as u64], data: m.clone() },
            );
            c.insert(&format!("{prefix}/{cond}/var"), Payload::scalar_f64(*v));
        }
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let eta = c.get(&format!("{prefix}/eta"))?.as_f64()?[0];
        let dim = c.get(&format!("{prefix}/dim"))?.as_u64()?[0] as usize;
        let mut est = OnlineScoreEstimator::new(dim, eta);
        let names = c.get(&format!("{prefix}/conditions"))?.as_text()?;
        for cond in names.split('\n').filter(|s| !s.is_empty()) {
            let mean = c.get(&format!("{prefix}/{cond}/mean"))?.as_f64()?.to_vec();
            let var = c.get(&format!("{prefix}/{cond}/var"))?.as_f64()?[0];
            est.buckets.insert(cond.to_string(), (mean, var));
        }
        Ok(est)
    }
}
