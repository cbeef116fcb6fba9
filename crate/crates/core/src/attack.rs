//! The iterative targeted attack: Nesterov momentum lookahead, scale
//! copies, the stochastic resize-and-pad input transform, gradient
//! smoothing by kernel convolution, per-iteration model augmentation views,
//! ensemble fusion, and budget clipping.

use crate::augment::{
    compute_prunable_indicator, dsne_augment, ghost_augment, prune_weights, sample_prune_mask,
    ErosionParams, PruneIndicator,
};
use crate::error::{Error, Result};
use crate::graph::{backward_input, forward_traced, LossSpec, View};
use crate::models::Model;
use crate::rng::{purpose, tag, Stream};
use crate::tensor::{
    bilinear_resize, bilinear_resize_adjoint, depthwise_convolve, make_kernel, sign, KernelSpec,
    Scalar, Tensor,
};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Batch chunk processed as one unit. Fixed so results never depend on the
/// worker count.
const CHUNK: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    None,
    Dwp,
    Gn,
    Dsne,
}

impl Augmentation {
    pub fn label(&self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::Dwp => "dwp",
            Augmentation::Gn => "gn",
            Augmentation::Dsne => "dsne",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackLoss {
    Logit,
}

fn default_epsilon() -> f64 {
    16.0 / 255.0
}
fn default_alpha() -> f64 {
    2.0 / 255.0
}
fn default_iters() -> usize {
    100
}
fn default_mu() -> f64 {
    1.0
}
fn default_scale_copies() -> usize {
    3
}
fn default_p_di() -> f64 {
    0.7
}
fn default_kernel() -> KernelSpec {
    KernelSpec::gaussian(5, 3.0)
}
fn default_augmentation() -> Augmentation {
    Augmentation::Dwp
}
fn default_r() -> f64 {
    0.7
}
fn default_p_bern() -> f64 {
    0.5
}
fn default_loss() -> AttackLoss {
    AttackLoss::Logit
}

/// All attack hyperparameters. The defaults are the reference operating
/// point: eps 16/255, step 2/255, 100 iterations, mu 1, M = 3 scale copies,
/// p_DI = 0.7, gaussian length-5 kernel, prunable rate 0.7 with Bernoulli
/// probability 0.5, equal ensemble weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iters: usize,
    pub mu: f64,
    /// Number of scale copies M.
    pub scale_copies: usize,
    pub p_di: f64,
    pub kernel: KernelSpec,
    pub augmentation: Augmentation,
    /// Prunable rate r (dwp only).
    pub r: f64,
    /// Bernoulli pruning probability (dwp only).
    pub p_bern: f64,
    /// Erosion parameters (gn / dsne only).
    pub erosion: Option<ErosionParams>,
    /// Ensemble weights; `None` means equal weights 1/K.
    pub betas: Option<Vec<f64>>,
    pub loss: AttackLoss,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: default_epsilon(),
            alpha: default_alpha(),
            iters: default_iters(),
            mu: default_mu(),
            scale_copies: default_scale_copies(),
            p_di: default_p_di(),
            kernel: default_kernel(),
            augmentation: default_augmentation(),
            r: default_r(),
            p_bern: default_p_bern(),
            erosion: None,
            betas: None,
            loss: default_loss(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Validate against an ensemble of `k` models. A zero epsilon or zero
    /// iteration count is allowed and degenerates to the identity attack.
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::rejected("attack config", "epsilon must be >= 0"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::rejected("attack config", "alpha must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.mu) && !(self.mu >= 0.0) {
            return Err(Error::rejected("attack config", "mu must be >= 0"));
        }
        if self.scale_copies == 0 {
            return Err(Error::rejected("attack config", "scale_copies must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_di) {
            return Err(Error::rejected("attack config", "p_di must lie in [0,1]"));
        }
        self.kernel.validate()?;
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::rejected("attack config", "r must lie in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.p_bern) {
            return Err(Error::rejected("attack config", "p_bern must lie in [0,1]"));
        }
        match self.augmentation {
            Augmentation::Gn | Augmentation::Dsne => {
                let er = self.erosion.as_ref().ok_or_else(|| {
                    Error::rejected("attack config", "erosion params required for gn/dsne")
                })?;
                er.validate()?;
            }
            _ => {}
        }
        let betas = self.resolved_betas(k);
        if betas.len() != k {
            return Err(Error::rejected(
                "attack config",
                format!("{} ensemble weights for {k} models", betas.len()),
            ));
        }
        let sum: f64 = betas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || betas.iter().any(|b| !b.is_finite()) {
            return Err(Error::rejected(
                "attack config",
                format!("ensemble weights must sum to 1, got {sum}"),
            ));
        }
        Ok(())
    }

    pub fn resolved_betas(&self, k: usize) -> Vec<f64> {
        match &self.betas {
            Some(b) => b.clone(),
            None => vec![1.0 / k as f64; k],
        }
    }
}

/// Current adversarial batch plus accumulated momentum.
#[derive(Debug, Clone)]
pub struct AttackState<T> {
    pub x: Tensor<T>,
    pub g: Tensor<T>,
    pub x_orig: Tensor<T>,
    pub iteration: usize,
    pub sample_ids: Vec<u64>,
    pub targets: Vec<usize>,
}

impl<T: Scalar> AttackState<T> {
    pub fn start(x: Tensor<T>, sample_ids: Vec<u64>, targets: Vec<usize>) -> Result<Self> {
        if sample_ids.len() != x.shape()[0] || targets.len() != x.shape()[0] {
            return Err(Error::rejected(
                "attack state",
                "sample ids and targets must match the batch",
            ));
        }
        Ok(AttackState {
            g: Tensor::zeros(x.shape()),
            x_orig: x.clone(),
            x,
            iteration: 0,
            sample_ids,
            targets,
        })
    }
}

/// Per-sample logit loss `J = -z_target`.
pub fn logit_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Vec<f64>> {
    LossSpec::Logit {
        targets: targets.to_vec(),
    }
    .values(logits)
}

/// Lookahead point `x + alpha * mu * g_prev`. No clipping here; the budget
/// clip happens only at the end of each iteration.
pub fn nesterov_lookahead<T: Scalar>(state: &AttackState<T>, alpha: f64, mu: f64) -> Tensor<T> {
    let factor = T::from_f64(alpha * mu);
    let mut out = state.x.clone();
    for (o, &g) in out.data_mut().iter_mut().zip(state.g.data()) {
        *o += factor * g;
    }
    out
}

/// Exact division by `2^m`.
pub fn scale_copy<T: Scalar>(x: &Tensor<T>, m: u32) -> Tensor<T> {
    if m == 0 {
        return x.clone();
    }
    let factor = T::from_f64(1.0 / f64::from(1u32 << m));
    x.scale(factor)
}

/// Elementwise clamp to `[x_orig - eps, x_orig + eps]` and then to `[0,1]`.
pub fn clip_to_budget<T: Scalar>(
    x_adv: &Tensor<T>,
    x_orig: &Tensor<T>,
    epsilon: T,
) -> Result<Tensor<T>> {
    if x_adv.shape() != x_orig.shape() {
        return Err(Error::shape("clip_to_budget", x_orig.shape(), x_adv.shape()));
    }
    let mut out = x_adv.clone();
    for (v, &o) in out.data_mut().iter_mut().zip(x_orig.data()) {
        let lo = (o - epsilon).max_scalar(T::ZERO);
        let hi = (o + epsilon).min_scalar(T::ONE);
        *v = (*v).max_scalar(lo).min_scalar(hi);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Diverse input transform
// ---------------------------------------------------------------------------

/// One sample's resize-and-pad draw; `None` means the identity branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizePad {
    pub size: usize,
    pub top: usize,
    pub left: usize,
}

/// The per-sample draws of one transform application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiDraw {
    pub per_sample: Vec<Option<ResizePad>>,
}

/// Sample the transform for each id: with probability `p_di` resize to
/// `s x s`, `s` uniform in `{ceil(0.9 H), ..., H}`, then pad back to
/// `H x W` at a uniform offset.
pub fn di_sample(h: usize, p_di: f64, stream: Stream, sample_ids: &[u64]) -> DiDraw {
    let min_s = (0.9 * h as f64).ceil() as usize;
    let per_sample = sample_ids
        .iter()
        .map(|&id| {
            let mut rng = stream.derive(tag::SAMPLE, id).rng();
            let apply = rng.random::<f64>() < p_di;
            if !apply {
                return None;
            }
            let size = rng.random_range(min_s..=h);
            let top = rng.random_range(0..=h - size);
            let left = rng.random_range(0..=h - size);
            Some(ResizePad { size, top, left })
        })
        .collect();
    DiDraw { per_sample }
}

/// Apply a draw: per transformed sample, bilinear-resize to `s x s` and
/// zero-pad back to the full canvas.
pub fn di_apply<T: Scalar>(x: &Tensor<T>, draw: &DiDraw) -> Result<Tensor<T>> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h != w {
        return Err(Error::rejected(
            "diverse_input_transform",
            "input must be square",
        ));
    }
    if draw.per_sample.len() != b {
        return Err(Error::rejected("diverse_input_transform", "draw/batch mismatch"));
    }
    let mut out = Tensor::zeros(x.shape());
    let per = c * h * w;
    for bi in 0..b {
        let src = &x.data()[bi * per..(bi + 1) * per];
        let dst = &mut out.data_mut()[bi * per..(bi + 1) * per];
        match draw.per_sample[bi] {
            None => dst.copy_from_slice(src),
            Some(rp) => {
                let s = rp.size;
                let resized = bilinear_resize(src, c, h, w, s, s);
                for ci in 0..c {
                    for y in 0..s {
                        let drow = ci * h * w + (rp.top + y) * w + rp.left;
                        let srow = ci * s * s + y * s;
                        dst[drow..drow + s].copy_from_slice(&resized[srow..srow + s]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`di_apply`] under the same draw: crop the padded region and
/// push the gradient back through the resize.
pub fn di_adjoint<T: Scalar>(grad: &Tensor<T>, draw: &DiDraw) -> Result<Tensor<T>> {
    let (b, c, h, w) = (
        grad.shape()[0],
        grad.shape()[1],
        grad.shape()[2],
        grad.shape()[3],
    );
    if draw.per_sample.len() != b {
        return Err(Error::rejected("di_adjoint", "draw/batch mismatch"));
    }
    let mut out = Tensor::zeros(grad.shape());
    let per = c * h * w;
    for bi in 0..b {
        let src = &grad.data()[bi * per..(bi + 1) * per];
        let dst = &mut out.data_mut()[bi * per..(bi + 1) * per];
        match draw.per_sample[bi] {
            None => dst.copy_from_slice(src),
            Some(rp) => {
                let s = rp.size;
                let mut cropped = vec![T::ZERO; c * s * s];
                for ci in 0..c {
                    for y in 0..s {
                        let srow = ci * h * w + (rp.top + y) * w + rp.left;
                        let drow = ci * s * s + y * s;
                        cropped[drow..drow + s].copy_from_slice(&src[srow..srow + s]);
                    }
                }
                let back = bilinear_resize_adjoint(&cropped, c, h, w, s, s);
                dst.copy_from_slice(&back);
            }
        }
    }
    Ok(out)
}

/// The spec-level transform op: draw and apply in one call.
pub fn diverse_input_transform<T: Scalar>(
    x: &Tensor<T>,
    p_di: f64,
    stream: Stream,
    sample_ids: &[u64],
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&p_di) {
        return Err(Error::rejected("diverse_input_transform", "p_di in [0,1]"));
    }
    let draw = di_sample(x.shape()[2], p_di, stream, sample_ids);
    di_apply(x, &draw)
}

// ---------------------------------------------------------------------------
// Fused attack step
// ---------------------------------------------------------------------------

/// An attack ensemble: the models, their ensemble weights, and (for dwp)
/// the per-model prunable indicators, computed once.
pub struct Ensemble<'a, T: Scalar> {
    pub models: Vec<&'a Model<T>>,
    pub betas: Vec<f64>,
    indicators: Vec<Option<PruneIndicator>>,
    kernel: Tensor<T>,
}

impl<'a, T: Scalar> Ensemble<'a, T> {
    pub fn new(config: &AttackConfig, models: &[&'a Model<T>]) -> Result<Self> {
        config.validate(models.len())?;
        let indicators = match config.augmentation {
            Augmentation::Dwp => models
                .iter()
                .map(|m| compute_prunable_indicator(m, config.r).map(Some))
                .collect::<Result<Vec<_>>>()?,
            _ => vec![None; models.len()],
        };
        Ok(Ensemble {
            models: models.to_vec(),
            betas: config.resolved_betas(models.len()),
            indicators,
            kernel: make_kernel(&config.kernel)?,
        })
    }
}

/// One iteration of the fused attack update:
///
/// 1. Nesterov lookahead from the accumulated momentum.
/// 2. Per model, build this iteration's augmentation view.
/// 3. Per scale copy, transform the lookahead input, halve it m times, and
///    accumulate the ensemble-weighted input gradient of the logit loss.
/// 4. Average over copies and smooth with the kernel.
/// 5. Momentum update (no normalization) and signed step, clipped to the
///    budget and pixel range.
pub fn fused_gradient_step<T: Scalar>(
    state: AttackState<T>,
    config: &AttackConfig,
    ensemble: &Ensemble<T>,
) -> Result<AttackState<T>> {
    let iter = state.iteration as u64;
    let root = Stream::root(config.seed);
    let x_nes = nesterov_lookahead(&state, config.alpha, config.mu);
    let loss = LossSpec::Logit {
        targets: state.targets.clone(),
    };
    let mut acc = Tensor::zeros(state.x.shape());
    for (k, model) in ensemble.models.iter().enumerate() {
        let model_stream = root.derive(tag::ITERATION, iter).derive(tag::MODEL, k as u64);
        let beta = T::from_f64(ensemble.betas[k]);
        let view: View<T> = match config.augmentation {
            Augmentation::None => View::plain(model),
            Augmentation::Dwp => {
                let ind = ensemble.indicators[k]
                    .as_ref()
                    .expect("dwp ensemble carries indicators");
                let mask = sample_prune_mask(
                    ind,
                    config.p_bern,
                    model_stream.derive(tag::PURPOSE, purpose::PRUNE_MASK),
                )?;
                prune_weights(model, ind, &mask)?
            }
            Augmentation::Gn => ghost_augment(
                model,
                config.erosion.as_ref().expect("validated"),
                model_stream,
                &state.sample_ids,
            )?,
            Augmentation::Dsne => dsne_augment(
                model,
                config.erosion.as_ref().expect("validated"),
                model_stream,
                &state.sample_ids,
            )?,
        };
        for m in 0..config.scale_copies {
            let di_stream = root
                .derive(tag::PURPOSE, purpose::DIVERSE_INPUT)
                .derive(tag::ITERATION, iter)
                .derive(tag::MODEL, k as u64)
                .derive(tag::SCALE_COPY, m as u64);
            let draw = di_sample(
                x_nes.shape()[2],
                config.p_di,
                di_stream,
                &state.sample_ids,
            );
            let transformed = di_apply(&x_nes, &draw)?;
            let scaled = scale_copy(&transformed, m as u32);
            let acts = forward_traced(&view, &scaled, None)?;
            let upstream = loss.upstream(&acts.logits)?;
            let g_scaled = backward_input(&view, &acts, &upstream)?;
            g_scaled.check_finite("gradient").map_err(|_| Error::Attack {
                iteration: state.iteration,
                model: model.arch_name.clone(),
                message: "non-finite input gradient".to_string(),
            })?;
            let g_transformed = if m == 0 {
                g_scaled
            } else {
                g_scaled.scale(T::from_f64(1.0 / f64::from(1u32 << m)))
            };
            let g_nes = di_adjoint(&g_transformed, &draw)?;
            acc.axpy(beta, &g_nes)?;
        }
    }
    let mut fused = if config.scale_copies == 1 {
        acc
    } else {
        acc.scale(T::from_f64(1.0 / config.scale_copies as f64))
    };
    if !config.kernel.is_delta() {
        fused = depthwise_convolve(&fused, &ensemble.kernel)?;
    }
    let mu = T::from_f64(config.mu);
    let mut g_new = state.g.scale(mu);
    g_new.axpy(T::ONE, &fused)?;
    let alpha = T::from_f64(config.alpha);
    let mut stepped = state.x.clone();
    for (v, &g) in stepped.data_mut().iter_mut().zip(g_new.data()) {
        *v -= alpha * sign(g);
    }
    let x_next = clip_to_budget(&stepped, &state.x_orig, T::from_f64(config.epsilon))?;
    Ok(AttackState {
        x: x_next,
        g: g_new,
        x_orig: state.x_orig,
        iteration: state.iteration + 1,
        sample_ids: state.sample_ids,
        targets: state.targets,
    })
}

/// Run the full attack from `g_0 = 0`, `x_0 = x`. Deterministic given the
/// config seed; per-sample stream labels make the result independent of
/// batch order and chunking.
pub fn run_attack<T: Scalar>(
    x: &Tensor<T>,
    sample_ids: &[u64],
    targets: &[usize],
    config: &AttackConfig,
    models: &[&Model<T>],
) -> Result<Tensor<T>> {
    let ensemble = Ensemble::new(config, models)?;
    let n = x.shape()[0];
    if sample_ids.len() != n || targets.len() != n {
        return Err(Error::rejected(
            "run_attack",
            "ids and targets must match the batch",
        ));
    }
    x.check_finite("attack input")?;
    let per: usize = x.shape()[1..].iter().product();
    let chunk_ranges: Vec<(usize, usize)> = (0..n)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n)))
        .collect();
    let chunks: Vec<Result<Tensor<T>>> = chunk_ranges
        .par_iter()
        .map(|&(s, e)| {
            let mut shape = x.shape().to_vec();
            shape[0] = e - s;
            let xc = Tensor::new(shape, x.data()[s * per..e * per].to_vec())?;
            let mut state =
                AttackState::start(xc, sample_ids[s..e].to_vec(), targets[s..e].to_vec())?;
            for _ in 0..config.iters {
                state = fused_gradient_step(state, config, &ensemble)?;
            }
            Ok(state.x)
        })
        .collect();
    let mut out = Tensor::zeros(x.shape());
    for (&(s, e), chunk) in chunk_ranges.iter().zip(chunks) {
        out.data_mut()[s * per..e * per].copy_from_slice(chunk?.data());
    }
    Ok(out)
}
