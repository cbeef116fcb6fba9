//! Model augmentation views: diversified weight pruning and the
//! ghost-network / dual-stage erosion baselines.
//!
//! Pruning ranks every prunable weight of a model by magnitude once, then
//! draws a fresh Bernoulli mask over the prunable set at each attack
//! iteration. Views substitute effective weights; the base model is never
//! touched.

use crate::error::{Error, Result};
use crate::graph::{BlockFactors, Erosion, View};
use crate::models::Model;
use crate::rng::{purpose, tag, Stream};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Static prunable-set indicator for one model: per-parameter bitmasks over
/// the prunable (kernel) weights, the magnitude threshold, and the prunable
/// universe size.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneIndicator {
    /// One entry per prunable parameter, in model parameter order:
    /// `(param_index, bits)` with `bits[i] = true` iff weight `i` is prunable.
    pub masks: Vec<(usize, Vec<bool>)>,
    /// Magnitude threshold: |w| of the largest weight marked prunable
    /// (0 when the rate is 0).
    pub gamma: f64,
    /// Prunable rate used to build the indicator.
    pub r: f64,
    /// Total number of prunable-eligible weights.
    pub kappa: usize,
}

impl PruneIndicator {
    pub fn marked_count(&self) -> usize {
        self.masks
            .iter()
            .map(|(_, bits)| bits.iter().filter(|&&b| b).count())
            .sum()
    }
}

/// One Bernoulli draw over the prunable universe, aligned with an indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub bits: Vec<(usize, Vec<bool>)>,
    pub p_bern: f64,
}

/// Rank all prunable weights by |w| ascending and mark exactly
/// `floor(r * kappa)` of them; ties at the threshold break by
/// (parameter name, flat index).
pub fn compute_prunable_indicator<T: Scalar>(model: &Model<T>, r: f64) -> Result<PruneIndicator> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::rejected(
            "compute_prunable_indicator",
            format!("rate must lie in [0,1], got {r}"),
        ));
    }
    let prunable: Vec<usize> = model
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.prunable)
        .map(|(i, _)| i)
        .collect();
    let kappa: usize = prunable.iter().map(|&i| model.params[i].values.len()).sum();
    if kappa == 0 {
        return Err(Error::rejected(
            "compute_prunable_indicator",
            "model has no prunable parameters",
        ));
    }
    let take = (r * kappa as f64).floor() as usize;
    // (|w|, param position, flat index); name order equals position order
    // only when names happen to sort that way, so compare names explicitly.
    let mut order: Vec<(f64, usize, usize)> = Vec::with_capacity(kappa);
    for &pi in &prunable {
        for (fi, v) in model.params[pi].values.data().iter().enumerate() {
            order.push((v.abs_scalar().to_f64(), pi, fi));
        }
    }
    order.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then_with(|| model.params[a.1].name.cmp(&model.params[b.1].name))
            .then_with(|| a.2.cmp(&b.2))
    });
    let gamma = if take == 0 { 0.0 } else { order[take - 1].0 };
    let mut masks: Vec<(usize, Vec<bool>)> = prunable
        .iter()
        .map(|&pi| (pi, vec![false; model.params[pi].values.len()]))
        .collect();
    let slot: BTreeMap<usize, usize> = prunable
        .iter()
        .enumerate()
        .map(|(s, &pi)| (pi, s))
        .collect();
    for &(_, pi, fi) in order.iter().take(take) {
        masks[slot[&pi]].1[fi] = true;
    }
    Ok(PruneIndicator {
        masks,
        gamma,
        r,
        kappa,
    })
}

/// Independent Bernoulli(p) draw for every prunable-universe position,
/// deterministic per stream label.
pub fn sample_prune_mask(
    indicator: &PruneIndicator,
    p_bern: f64,
    stream: Stream,
) -> Result<PruneMask> {
    if !(0.0..=1.0).contains(&p_bern) {
        return Err(Error::rejected(
            "sample_prune_mask",
            format!("p_bern must lie in [0,1], got {p_bern}"),
        ));
    }
    let mut rng = stream.rng();
    let bits = indicator
        .masks
        .iter()
        .map(|(pi, ind_bits)| {
            (
                *pi,
                ind_bits
                    .iter()
                    .map(|_| rng.random::<f64>() < p_bern)
                    .collect(),
            )
        })
        .collect();
    Ok(PruneMask { bits, p_bern })
}

fn check_alignment<T: Scalar>(
    model: &Model<T>,
    indicator: &PruneIndicator,
    mask: &PruneMask,
) -> Result<()> {
    if indicator.masks.len() != mask.bits.len() {
        return Err(Error::rejected("prune_weights", "indicator/mask mismatch"));
    }
    for ((ipi, ibits), (mpi, mbits)) in indicator.masks.iter().zip(&mask.bits) {
        if ipi != mpi || ibits.len() != mbits.len() {
            return Err(Error::rejected("prune_weights", "indicator/mask mismatch"));
        }
        if *ipi >= model.params.len()
            || model.params[*ipi].values.len() != ibits.len()
            || !model.params[*ipi].prunable
        {
            return Err(Error::rejected(
                "prune_weights",
                "indicator is not aligned with this model",
            ));
        }
    }
    Ok(())
}

/// View whose effective weight is 0 wherever both the indicator and the
/// Bernoulli mask are set, and the original weight elsewhere. Parameters
/// with no pruned entry are left untouched (shared, bit-identical).
pub fn prune_weights<'a, T: Scalar>(
    model: &'a Model<T>,
    indicator: &PruneIndicator,
    mask: &PruneMask,
) -> Result<View<'a, T>> {
    check_alignment(model, indicator, mask)?;
    Ok(View::plain(model).overridden(pruned_overrides(model, indicator, mask)))
}

/// Re-prune an existing view with the same base model; pruning an already
/// pruned view with the same indicator and mask changes nothing.
pub fn prune_view<'a, T: Scalar>(
    view: &View<'a, T>,
    indicator: &PruneIndicator,
    mask: &PruneMask,
) -> Result<View<'a, T>> {
    check_alignment(view.model(), indicator, mask)?;
    let mut overrides = BTreeMap::new();
    for ((pi, ind_bits), (_, mask_bits)) in indicator.masks.iter().zip(&mask.bits) {
        if ind_bits.iter().zip(mask_bits).any(|(&a, &b)| a && b) {
            let mut values = view.param(*pi).clone();
            for (i, (&a, &b)) in ind_bits.iter().zip(mask_bits).enumerate() {
                if a && b {
                    values.data_mut()[i] = T::ZERO;
                }
            }
            overrides.insert(*pi, values);
        }
    }
    Ok(view.clone().overridden(overrides))
}

fn pruned_overrides<T: Scalar>(
    model: &Model<T>,
    indicator: &PruneIndicator,
    mask: &PruneMask,
) -> BTreeMap<usize, Tensor<T>> {
    let mut overrides = BTreeMap::new();
    for ((pi, ind_bits), (_, mask_bits)) in indicator.masks.iter().zip(&mask.bits) {
        if ind_bits.iter().zip(mask_bits).any(|(&a, &b)| a && b) {
            let mut values = model.params[*pi].values.clone();
            for (i, (&a, &b)) in ind_bits.iter().zip(mask_bits).enumerate() {
                if a && b {
                    values.data_mut()[i] = T::ZERO;
                }
            }
            overrides.insert(*pi, values);
        }
    }
    overrides
}

/// Number of weights a (indicator, mask) pair zeroes: popcount of the
/// conjunction.
pub fn zeroed_count(indicator: &PruneIndicator, mask: &PruneMask) -> usize {
    indicator
        .masks
        .iter()
        .zip(&mask.bits)
        .map(|((_, a), (_, b))| a.iter().zip(b).filter(|(&x, &y)| x && y).count())
        .sum()
}

/// Standalone model copy with the pruned weights burned in. Used where a
/// fixed pruned instance acts as an ordinary model (e.g. the perturbation
/// orthogonality diagnostic).
pub fn materialize_pruned<T: Scalar>(
    model: &Model<T>,
    indicator: &PruneIndicator,
    mask: &PruneMask,
) -> Result<Model<T>> {
    check_alignment(model, indicator, mask)?;
    let mut out = model.clone();
    for ((pi, ind_bits), (_, mask_bits)) in indicator.masks.iter().zip(&mask.bits) {
        let values = out.params[*pi].values.data_mut();
        for (i, (&a, &b)) in ind_bits.iter().zip(mask_bits).enumerate() {
            if a && b {
                values[i] = T::ZERO;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Erosion baselines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErosionMode {
    Gn,
    Dsne,
}

/// Parameters for the erosion baselines. Dropout zeroes activation outputs
/// without inverse scaling (the erosion perturbs rather than regularizes);
/// `scale_range` and `bias_gamma` only apply in dsne mode, where the bias
/// factor multiplies the non-identity branches of each block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErosionParams {
    pub mode: ErosionMode,
    pub drop_rate: f64,
    pub skip_range: f64,
    pub scale_range: f64,
    pub bias_gamma: f64,
}

impl ErosionParams {
    /// Ghost-network defaults.
    pub fn gn_defaults() -> Self {
        ErosionParams {
            mode: ErosionMode::Gn,
            drop_rate: 0.012,
            skip_range: 0.22,
            scale_range: 0.0,
            bias_gamma: 1.0,
        }
    }

    /// Dual-stage erosion defaults.
    pub fn dsne_defaults() -> Self {
        ErosionParams {
            mode: ErosionMode::Dsne,
            drop_rate: 0.01,
            skip_range: 0.14,
            scale_range: 0.1,
            bias_gamma: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("drop_rate", self.drop_rate),
            ("skip_range", self.skip_range),
            ("scale_range", self.scale_range),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::rejected(
                    "erosion params",
                    format!("{name} must lie in [0,1), got {v}"),
                ));
            }
        }
        if !(self.bias_gamma > 0.0 && self.bias_gamma <= 1.0) {
            return Err(Error::rejected(
                "erosion params",
                format!("bias_gamma must lie in (0,1], got {}", self.bias_gamma),
            ));
        }
        Ok(())
    }
}

fn erosion_view<'a, T: Scalar>(
    model: &'a Model<T>,
    params: &ErosionParams,
    stream: Stream,
    sample_ids: &[u64],
    branch_factor: f64,
    scale_range: f64,
) -> View<'a, T> {
    let skip_stream = stream.derive(tag::PURPOSE, purpose::SKIP_FACTOR);
    let n_blocks = model
        .stages
        .iter()
        .filter(|s| matches!(s, crate::graph::Stage::Block(_)))
        .count();
    let block_factors: Vec<BlockFactors<T>> = (0..n_blocks)
        .map(|b| {
            let mut rng = skip_stream.derive(tag::BLOCK, b as u64).rng();
            let skip = 1.0 + params.skip_range * (2.0 * rng.random::<f64>() - 1.0);
            BlockFactors {
                skip: T::from_f64(skip),
                branch: T::from_f64(branch_factor),
            }
        })
        .collect();
    let erosion = Erosion {
        drop_rate: params.drop_rate,
        scale_range,
        stream: stream.derive(tag::PURPOSE, purpose::DROPOUT),
        sample_ids: sample_ids.to_vec(),
    };
    View::with_erosion(model, erosion, block_factors)
}

/// Ghost-network view: activation dropout plus a uniform per-block skip
/// factor in `[1 - skip_range, 1 + skip_range]`. Fresh draws per stream
/// label, i.e. per iteration.
pub fn ghost_augment<'a, T: Scalar>(
    model: &'a Model<T>,
    params: &ErosionParams,
    stream: Stream,
    sample_ids: &[u64],
) -> Result<View<'a, T>> {
    params.validate()?;
    if params.mode != ErosionMode::Gn {
        return Err(Error::rejected("ghost_augment", "params.mode must be gn"));
    }
    Ok(erosion_view(model, params, stream, sample_ids, 1.0, 0.0))
}

/// Dual-stage erosion view: dropout, uniform survivor scaling in
/// `[1 - scale_range, 1 + scale_range]`, the skip factor, and the bias
/// factor on non-identity branches.
pub fn dsne_augment<'a, T: Scalar>(
    model: &'a Model<T>,
    params: &ErosionParams,
    stream: Stream,
    sample_ids: &[u64],
) -> Result<View<'a, T>> {
    params.validate()?;
    if params.mode != ErosionMode::Dsne {
        return Err(Error::rejected("dsne_augment", "params.mode must be dsne"));
    }
    Ok(erosion_view(
        model,
        params,
        stream,
        sample_ids,
        params.bias_gamma,
        params.scale_range,
    ))
}
