//! Forward noising, prompt assembly, the disentanglement loss, and the
//! frozen denoiser backend contract.
//!
//! The denoiser is always frozen: gradients flow only into the encoder
//! through the object token it contributes to the prompt.

pub mod toy;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::rng::gauss;
use crate::types::{DomainSpec, ImageRecord, OBJECT_SLOT};

/// How beta ramps from its start to its end value across timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaSchedule {
    /// Linear interpolation of beta.
    LinearBeta,
    /// Linear interpolation of sqrt(beta), squared.
    ScaledLinearBeta,
}

impl BetaSchedule {
    /// The conventional beta range for this ramp: the latent-diffusion
    /// range for scaled-linear, a fast desk-scale range for linear.
    pub fn default_beta_range(&self) -> (f64, f64) {
        match self {
            BetaSchedule::ScaledLinearBeta => (0.00085, 0.012),
            BetaSchedule::LinearBeta => (0.01, 0.2),
        }
    }
}

/// The cumulative signal table governing forward noising: entry `t`
/// (1-based) is the product of `(1 - beta_s)` for `s <= t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    kind: BetaSchedule,
    beta_start: f64,
    beta_end: f64,
}

/// Build a schedule of `steps` timesteps with the ramp's default beta range.
pub fn build_noise_schedule(steps: usize, kind: BetaSchedule) -> Result<NoiseSchedule> {
    let (start, end) = kind.default_beta_range();
    NoiseSchedule::with_betas(steps, kind, start, end)
}

impl NoiseSchedule {
    pub fn with_betas(steps: usize, kind: BetaSchedule, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::validation("diffusion steps must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) {
            return Err(Error::validation("beta values must lie in [0,1)"));
        }
        let beta_at = |t: usize| -> f64 {
            if steps == 1 {
                return beta_start;
            }
            let frac = (t - 1) as f64 / (steps - 1) as f64;
            match kind {
                BetaSchedule::LinearBeta => beta_start + (beta_end - beta_start) * frac,
                BetaSchedule::ScaledLinearBeta => {
                    let s = beta_start.sqrt() + (beta_end.sqrt() - beta_start.sqrt()) * frac;
                    s * s
                }
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for t in 1..=steps {
            let beta = beta_at(t);
            if t > 1 && beta <= 0.0 {
                return Err(Error::validation(
                    "beta must be > 0 beyond the first step so the signal table stays strictly decreasing",
                ));
            }
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { alpha_bar, kind, beta_start, beta_end })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn kind(&self) -> BetaSchedule {
        self.kind
    }

    /// Cumulative signal coefficient at timestep `t` in `1..=steps`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t < 1 || t > self.alpha_bar.len() {
            return Err(Error::range(format!(
                "timestep {t} outside 1..={}",
                self.alpha_bar.len()
            )));
        }
        Ok(self.alpha_bar[t - 1])
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Forward-noise a latent: `sqrt(a) * x0 + sqrt(1 - a) * eps` with `a`
/// the cumulative signal coefficient at `t`.
pub fn add_noise(
    x0: &Array1<f64>,
    t: usize,
    eps: &Array1<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array1<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::validation(format!(
            "latent length {} does not match noise length {}",
            x0.len(),
            eps.len()
        )));
    }
    let a = schedule.alpha_bar(t)?;
    Ok(x0 * a.sqrt() + eps * (1.0 - a).sqrt())
}

/// A latent together with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Array1<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(x: Array1<f64>, t: usize, schedule: &NoiseSchedule) -> Result<Self> {
        schedule.alpha_bar(t)?;
        Ok(LatentState { x, t })
    }
}

/// Frozen word-to-token table used for the style part of prompts.
pub trait TextEmbedder: Send + Sync {
    fn d_tok(&self) -> usize;
    /// Token vector of one template word. Unknown filler words map to a
    /// constant (typically zero) vector.
    fn embed_word(&self, word: &str) -> Array1<f64>;
}

/// Token matrix of an assembled prompt: frozen style rows plus exactly
/// one learnable object row.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    /// `n_tokens x d_tok`
    pub tokens: Array2<f64>,
    pub object_slot_index: usize,
}

impl PromptEmbedding {
    pub fn object_row(&self) -> Array1<f64> {
        self.tokens.row(self.object_slot_index).to_owned()
    }
}

/// Fill a domain's template with frozen style tokens and the object
/// embedding `z`. Deterministic given `(spec, z)`; gradient flows through
/// the object row only.
pub fn assemble_prompt(
    spec: &DomainSpec,
    z: &Array1<f64>,
    embedder: &dyn TextEmbedder,
) -> Result<PromptEmbedding> {
    spec.validate()?;
    if z.len() != embedder.d_tok() {
        return Err(Error::validation(format!(
            "object token has dimension {} but the embedder declares {}",
            z.len(),
            embedder.d_tok()
        )));
    }
    let words = spec.template_words();
    let mut tokens = Array2::zeros((words.len(), embedder.d_tok()));
    let mut slot = None;
    for (i, word) in words.iter().enumerate() {
        if *word == OBJECT_SLOT {
            tokens.row_mut(i).assign(z);
            slot = Some(i);
        } else {
            tokens.row_mut(i).assign(&embedder.embed_word(word));
        }
    }
    let object_slot_index =
        slot.ok_or_else(|| Error::validation("template lost its object slot"))?;
    Ok(PromptEmbedding { tokens, object_slot_index })
}

/// The frozen denoiser contract. Implementations must be safe for
/// concurrent read-only inference and must never mutate their parameters.
pub trait DenoiserBackend: Send + Sync {
    fn latent_shape(&self) -> &[usize];
    fn d_tok(&self) -> usize;

    fn latent_len(&self) -> usize {
        self.latent_shape().iter().product()
    }

    /// Image to clean latent (flattened).
    fn encode_to_latent(&self, image: &Array3<f64>) -> Result<Array1<f64>>;

    /// Predicted noise for a noisy latent under a prompt at timestep `t`.
    fn predict_noise(&self, x_t: &Array1<f64>, prompt: &PromptEmbedding, t: usize) -> Result<Array1<f64>>;

    /// Pullback of `predict_noise` onto the prompt's object row:
    /// `cotangent^T d(predict_noise)/d(object_row)`.
    fn predict_noise_vjp_object(
        &self,
        x_t: &Array1<f64>,
        prompt: &PromptEmbedding,
        t: usize,
        cotangent: &Array1<f64>,
    ) -> Result<Array1<f64>>;

    /// Byte snapshot of every backend parameter, for frozenness checks.
    fn param_snapshot(&self) -> Vec<u8>;
}

/// One sampled noising event: a timestep and a noise draw.
#[derive(Debug, Clone, PartialEq)]
pub struct OdDraw {
    pub t: usize,
    pub eps: Array1<f64>,
}

/// Sample one `(t, eps)` pair per batch element: `t` uniform on
/// `{1..steps}`, `eps` standard normal over the latent.
pub fn sample_od_draws(
    rng: &mut ChaCha8Rng,
    batch_len: usize,
    latent_len: usize,
    schedule: &NoiseSchedule,
) -> Vec<OdDraw> {
    (0..batch_len)
        .map(|_| OdDraw {
            t: rng.gen_range(1..=schedule.steps()),
            eps: Array1::from_shape_simple_fn(latent_len, || gauss(rng)),
        })
        .collect()
}

/// Disentanglement loss value plus its gradient w.r.t. each object token.
#[derive(Debug, Clone)]
pub struct OdObjective {
    pub value: f64,
    /// One row per batch element.
    pub grad_z: Array2<f64>,
}

/// Deterministic core of the disentanglement loss: given clean latents,
/// object tokens, per-element specs and frozen draws, returns the mean
/// squared noise-prediction error (averaged over batch elements and
/// latent entries) and its gradient w.r.t. the object tokens.
pub fn od_objective(
    latents: &[Array1<f64>],
    z: &Array2<f64>,
    specs: &[&DomainSpec],
    embedder: &dyn TextEmbedder,
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    draws: &[OdDraw],
) -> Result<OdObjective> {
    let n = latents.len();
    if n == 0 {
        return Err(Error::validation("disentanglement loss needs a non-empty batch"));
    }
    if z.nrows() != n || specs.len() != n || draws.len() != n {
        return Err(Error::validation(
            "latents, tokens, specs and draws must have matching batch lengths",
        ));
    }
    let latent_len = backend.latent_len();
    let mut value = 0.0;
    let mut grad_z = Array2::zeros((n, z.ncols()));
    let scale = 1.0 / (n as f64 * latent_len as f64);
    for i in 0..n {
        let x0 = &latents[i];
        if x0.len() != latent_len {
            return Err(Error::validation(format!(
                "latent {i} has length {} but the backend declares {latent_len}",
                x0.len()
            )));
        }
        let draw = &draws[i];
        let x_t = add_noise(x0, draw.t, &draw.eps, schedule)?;
        let prompt = assemble_prompt(specs[i], &z.row(i).to_owned(), embedder)?;
        let eps_hat = backend.predict_noise(&x_t, &prompt, draw.t)?;
        let residual = &draw.eps - &eps_hat;
        value += residual.dot(&residual) * scale;
        // d value / d eps_hat = -2 * residual * scale
        let cot = residual.mapv(|r| -2.0 * r * scale);
        let g = backend.predict_noise_vjp_object(&x_t, &prompt, draw.t, &cot)?;
        grad_z.row_mut(i).assign(&g);
    }
    Ok(OdObjective { value, grad_z })
}

/// Disentanglement loss over a batch of records, with gradient pushed
/// all the way into the encoder parameters. The backend stays frozen.
pub struct OdLoss {
    pub value: f64,
    pub encoder_grads: Vec<f64>,
}

pub fn disentanglement_loss(
    batch: &[&ImageRecord],
    encoder: &Encoder,
    specs: &[DomainSpec],
    embedder: &dyn TextEmbedder,
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<OdLoss> {
    if batch.is_empty() {
        return Err(Error::validation("disentanglement loss needs a non-empty batch"));
    }
    let mut per_record_specs = Vec::with_capacity(batch.len());
    for rec in batch {
        let spec = specs
            .iter()
            .find(|s| s.domain_id == rec.domain_id)
            .ok_or_else(|| Error::lookup(format!("no domain spec for domain {}", rec.domain_id)))?;
        per_record_specs.push(spec);
    }
    let images: Vec<&Array3<f64>> = batch.iter().map(|r| &r.pixels).collect();
    let z = encoder.encode_batch(&images)?;
    let mut latents = Vec::with_capacity(batch.len());
    for rec in batch {
        latents.push(backend.encode_to_latent(&rec.pixels)?);
    }
    let draws = sample_od_draws(rng, batch.len(), backend.latent_len(), schedule);
    let obj = od_objective(&latents, &z, &per_record_specs, embedder, backend, schedule, &draws)?;
    let encoder_grads = encoder.param_grad_batch(&images, &obj.grad_z)?;
    Ok(OdLoss { value: obj.value, encoder_grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scaled_linear_first_step() {
        let s = build_noise_schedule(1000, BetaSchedule::ScaledLinearBeta).unwrap();
        // first cumulative value is 1 - beta_1
        let expect = 1.0 - 0.00085;
        assert!((s.alpha_bar(1).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn default_schedules_span_signal_range() {
        for kind in [BetaSchedule::LinearBeta, BetaSchedule::ScaledLinearBeta] {
            let steps = match kind {
                BetaSchedule::LinearBeta => 100,
                BetaSchedule::ScaledLinearBeta => 1000,
            };
            let s = build_noise_schedule(steps, kind).unwrap();
            assert!(s.alpha_bar(1).unwrap() >= 0.99);
            assert!(s.alpha_bar(steps).unwrap() <= 0.05);
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        for kind in [BetaSchedule::LinearBeta, BetaSchedule::ScaledLinearBeta] {
            let s = build_noise_schedule(257, kind).unwrap();
            let table = s.alpha_bar_table();
            for w in table.windows(2) {
                assert!(w[1] < w[0], "table must strictly decrease");
            }
        }
    }

    #[test]
    fn single_step_zero_beta_is_identity() {
        let s = NoiseSchedule::with_betas(1, BetaSchedule::LinearBeta, 0.0, 0.0).unwrap();
        assert_eq!(s.alpha_bar_table(), &[1.0]);
        let x0 = array![2.0, -1.0];
        let eps = array![5.0, 5.0];
        let xt = add_noise(&x0, 1, &eps, &s).unwrap();
        assert_eq!(xt, x0);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(build_noise_schedule(0, BetaSchedule::LinearBeta).is_err());
    }

    #[test]
    fn add_noise_hand_case() {
        // alpha_bar = 0.25 exactly: one step with beta = 0.75
        let s = NoiseSchedule::with_betas(1, BetaSchedule::LinearBeta, 0.75, 0.75).unwrap();
        let x0 = array![2.0, 0.0];
        let eps = array![0.0, 2.0];
        let xt = add_noise(&x0, 1, &eps, &s).unwrap();
        assert!((xt[0] - 1.0).abs() < 1e-12);
        assert!((xt[1] - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn add_noise_pure_noise_limit() {
        // alpha_bar ~ 0: beta close to 1
        let s = NoiseSchedule::with_betas(1, BetaSchedule::LinearBeta, 1.0 - 1e-15, 1.0 - 1e-15).unwrap();
        let x0 = array![7.0, -3.0];
        let eps = array![1.0, 2.0];
        let xt = add_noise(&x0, 1, &eps, &s).unwrap();
        assert!((xt[0] - eps[0]).abs() < 1e-6);
        assert!((xt[1] - eps[1]).abs() < 1e-6);
    }

    #[test]
    fn add_noise_shape_mismatch() {
        let s = build_noise_schedule(10, BetaSchedule::LinearBeta).unwrap();
        let err = add_noise(&array![1.0, 2.0], 1, &array![1.0], &s);
        assert!(err.is_err());
    }

    #[test]
    fn add_noise_timestep_range() {
        let s = build_noise_schedule(10, BetaSchedule::LinearBeta).unwrap();
        assert!(add_noise(&array![1.0], 0, &array![1.0], &s).is_err());
        assert!(add_noise(&array![1.0], 11, &array![1.0], &s).is_err());
    }

    struct OneHotEmbedder {
        d: usize,
    }

    impl TextEmbedder for OneHotEmbedder {
        fn d_tok(&self) -> usize {
            self.d
        }
        fn embed_word(&self, word: &str) -> Array1<f64> {
            let mut v = Array1::zeros(self.d);
            let h = word.bytes().fold(0usize, |a, b| (a * 31 + b as usize) % self.d);
            v[h] = 1.0;
            v
        }
    }

    #[test]
    fn prompt_places_object_token() {
        let spec = DomainSpec::new(0, "sketch", "a sketch of a {object}").unwrap();
        let emb = OneHotEmbedder { d: 8 };
        let z = Array1::from_shape_fn(8, |i| if i == 3 { 1.0 } else { 0.0 });
        let p = assemble_prompt(&spec, &z, &emb).unwrap();
        assert_eq!(p.tokens.nrows(), 5);
        assert_eq!(p.object_slot_index, 4);
        assert_eq!(p.object_row(), z);
        // style rows equal the frozen embedder outputs
        assert_eq!(p.tokens.row(1).to_owned(), emb.embed_word("sketch"));
    }

    #[test]
    fn prompt_style_rows_frozen_across_objects() {
        let spec = DomainSpec::new(0, "sketch", "a sketch of a {object}").unwrap();
        let emb = OneHotEmbedder { d: 8 };
        let z1 = Array1::from_shape_fn(8, |i| if i == 0 { 1.0 } else { 0.0 });
        let z2 = Array1::from_shape_fn(8, |i| if i == 5 { 1.0 } else { 0.0 });
        let p1 = assemble_prompt(&spec, &z1, &emb).unwrap();
        let p2 = assemble_prompt(&spec, &z2, &emb).unwrap();
        for row in 0..p1.tokens.nrows() {
            if row == p1.object_slot_index {
                continue;
            }
            assert_eq!(p1.tokens.row(row), p2.tokens.row(row));
        }
        assert_ne!(p1.tokens.row(p1.object_slot_index), p2.tokens.row(p2.object_slot_index));
    }

    #[test]
    fn prompt_rejects_dimension_mismatch() {
        let spec = DomainSpec::new(0, "sketch", "a sketch of a {object}").unwrap();
        let emb = OneHotEmbedder { d: 8 };
        let z = Array1::zeros(4);
        assert!(assemble_prompt(&spec, &z, &emb).is_err());
    }

    #[test]
    fn prompt_is_deterministic() {
        let spec = DomainSpec::new(0, "photo", "a photo of a {object}").unwrap();
        let emb = OneHotEmbedder { d: 6 };
        let z = Array1::from_shape_fn(6, |i| (i as f64 * 0.17).sin());
        let z = crate::math::l2_normalize(&z.view());
        let p1 = assemble_prompt(&spec, &z, &emb).unwrap();
        let p2 = assemble_prompt(&spec, &z, &emb).unwrap();
        assert_eq!(p1, p2);
    }
}
