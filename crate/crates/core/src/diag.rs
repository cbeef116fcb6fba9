//! Transfer measurement and analysis experiments: leave-one-out success
//! tables, perturbation cosine matrices, the prunable-rate ablation,
//! accuracy-decay curves, and class activation heatmaps.

use crate::attack::{run_attack, AttackConfig, Augmentation};
use crate::augment::{
    compute_prunable_indicator, materialize_pruned, prune_weights, sample_prune_mask,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{backward_input_captured, forward_traced, View};
use crate::models::{evaluate_accuracy_view, predict, Model};
use crate::rng::{purpose, tag, Stream};
use crate::tensor::{bilinear_resize, Scalar, Tensor};

/// One leave-one-out measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub white_box_set: String,
    pub black_box_model: String,
    pub augmentation: String,
    pub targeted_success_rate: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferReport {
    pub rows: Vec<TransferRow>,
}

impl TransferReport {
    pub const CSV_HEADER: &'static str =
        "white_box_set,black_box_model,augmentation,targeted_success_rate,n_samples,seed";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.white_box_set,
                r.black_box_model,
                r.augmentation,
                r.targeted_success_rate,
                r.n_samples,
                r.seed
            ));
        }
        out
    }

    /// Mean rate over seeds for one black-box model.
    pub fn mean_rate(&self, black_box: &str) -> Option<f64> {
        let rates: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.black_box_model == black_box)
            .map(|r| r.targeted_success_rate)
            .collect();
        if rates.is_empty() {
            None
        } else {
            Some(rates.iter().sum::<f64>() / rates.len() as f64)
        }
    }
}

/// Fraction of adversarial samples classified as their target by the
/// black-box model. Ties break toward the lowest class index.
pub fn targeted_success_rate<T: Scalar>(
    blackbox: &Model<T>,
    x_adv: &Tensor<T>,
    targets: &[usize],
) -> Result<f64> {
    let n = x_adv.shape()[0];
    if n == 0 || targets.len() != n {
        return Err(Error::rejected(
            "targeted_success_rate",
            "need a non-empty batch with aligned targets",
        ));
    }
    let mut hits = 0usize;
    let per: usize = x_adv.shape()[1..].iter().product();
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let mut shape = x_adv.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, x_adv.data()[start * per..end * per].to_vec())?;
        let preds = predict(&View::plain(blackbox), &chunk)?;
        hits += preds
            .iter()
            .zip(&targets[start..end])
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(hits as f64 / n as f64)
}

/// Run the leave-one-out protocol: each zoo model in turn is the black box,
/// the rest form the white-box ensemble; one row per (black box, seed).
pub fn leave_one_out_transfer(
    zoo: &[Model<f32>],
    x: &Tensor<f32>,
    ids: &[u64],
    targets: &[usize],
    config: &AttackConfig,
    seeds: &[u64],
) -> Result<TransferReport> {
    if zoo.len() < 2 {
        return Err(Error::rejected(
            "leave_one_out_transfer",
            "need at least two models",
        ));
    }
    let mut report = TransferReport::default();
    for held_out in 0..zoo.len() {
        let whitebox: Vec<&Model<f32>> = zoo
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != held_out)
            .map(|(_, m)| m)
            .collect();
        let wb_names: Vec<&str> = whitebox.iter().map(|m| m.arch_name.as_str()).collect();
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.seed = seed;
            let x_adv = run_attack(x, ids, targets, &cfg, &whitebox)?;
            let rate = targeted_success_rate(&zoo[held_out], &x_adv, targets)?;
            report.rows.push(TransferRow {
                white_box_set: wb_names.join("+"),
                black_box_model: zoo[held_out].arch_name.clone(),
                augmentation: cfg.augmentation.label().to_string(),
                targeted_success_rate: rate,
                n_samples: x.shape()[0],
                seed,
            });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Perturbation orthogonality
// ---------------------------------------------------------------------------

/// Pairwise mean cosine similarities between perturbations from pruned
/// model instances. Rows/columns are grouped in blocks by base model.
#[derive(Debug, Clone)]
pub struct CosineMatrix {
    /// `(base model name, instance index)` per row.
    pub labels: Vec<(String, usize)>,
    /// Base-model block index per row.
    pub block: Vec<usize>,
    /// Row-major `n x n` values.
    pub values: Vec<f64>,
    pub n: usize,
}

impl CosineMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn off_diag_mean_abs(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    sum += self.get(i, j).abs();
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    /// Mean over off-diagonal cells inside same-base blocks.
    pub fn intra_block_mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j && self.block[i] == self.block[j] {
                    sum += self.get(i, j);
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    /// Mean over cells spanning different base models.
    pub fn inter_block_mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..self.n {
            for j in 0..self.n {
                if self.block[i] != self.block[j] {
                    sum += self.get(i, j);
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance");
        for (name, idx) in &self.labels {
            out.push_str(&format!(",{name}#{idx}"));
        }
        out.push('\n');
        for i in 0..self.n {
            out.push_str(&format!("{}#{}", self.labels[i].0, self.labels[i].1));
            for j in 0..self.n {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

fn mean_cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let n = a.shape()[0];
    let per: usize = a.shape()[1..].iter().product();
    let mut total = 0.0;
    for i in 0..n {
        let va = &a.data()[i * per..(i + 1) * per];
        let vb = &b.data()[i * per..(i + 1) * per];
        let dot: f64 = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        let na: f64 = va.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = vb.iter().map(|&y| (y as f64).powi(2)).sum::<f64>().sqrt();
        if na > 0.0 && nb > 0.0 {
            total += dot / (na * nb);
        }
    }
    total / n as f64
}

/// Draw `n_instances` fixed pruned instances per base model, attack each one
/// alone with the momentum-only configuration, and compare the resulting
/// perturbations pairwise (mean cosine over the image set).
///
/// The config must have `scale_copies == 1`, `p_di == 0` and a delta kernel
/// so nothing but pruning differentiates the instances.
pub fn cosine_matrix(
    base_models: &[Model<f32>],
    n_instances: usize,
    x: &Tensor<f32>,
    ids: &[u64],
    targets: &[usize],
    config: &AttackConfig,
) -> Result<CosineMatrix> {
    if config.scale_copies != 1 || config.p_di != 0.0 || !config.kernel.is_delta() {
        return Err(Error::rejected(
            "cosine_matrix",
            "config must use M=1, p_di=0 and the delta kernel",
        ));
    }
    let mut perturbations = Vec::new();
    let mut labels = Vec::new();
    let mut block = Vec::new();
    for (mi, model) in base_models.iter().enumerate() {
        let indicator = compute_prunable_indicator(model, config.r)?;
        for j in 0..n_instances {
            let mask_stream = Stream::root(config.seed)
                .derive(tag::PURPOSE, purpose::PRUNE_MASK)
                .derive(tag::MODEL, mi as u64)
                .derive(tag::INSTANCE, j as u64);
            let mask = sample_prune_mask(&indicator, config.p_bern, mask_stream)?;
            let pruned = materialize_pruned(model, &indicator, &mask)?;
            let mut cfg = config.clone();
            cfg.augmentation = Augmentation::None;
            let x_adv = run_attack(x, ids, targets, &cfg, &[&pruned])?;
            perturbations.push(x_adv.sub(x)?);
            labels.push((model.arch_name.clone(), j));
            block.push(mi);
        }
    }
    let n = perturbations.len();
    let mut values = vec![0.0f64; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let c = mean_cosine(&perturbations[i], &perturbations[j]);
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    Ok(CosineMatrix {
        labels,
        block,
        values,
        n,
    })
}

// ---------------------------------------------------------------------------
// Prunable-rate ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub r_grid: Vec<f64>,
    pub black_box: Vec<String>,
    /// `rates[i][j]`: mean targeted success over seeds at `r_grid[i]` on
    /// black box `j`.
    pub rates: Vec<Vec<f64>>,
    pub means: Vec<f64>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r");
        for b in &self.black_box {
            out.push_str(&format!(",{b}"));
        }
        out.push_str(",mean\n");
        for (i, &r) in self.r_grid.iter().enumerate() {
            out.push_str(&format!("{r}"));
            for v in &self.rates[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", self.means[i]));
        }
        out
    }
}

/// Full leave-one-out transfer run at each prunable rate in the grid.
pub fn ablate_prunable_rate(
    zoo: &[Model<f32>],
    x: &Tensor<f32>,
    ids: &[u64],
    targets: &[usize],
    config: &AttackConfig,
    r_grid: &[f64],
    seeds: &[u64],
) -> Result<AblationTable> {
    let black_box: Vec<String> = zoo.iter().map(|m| m.arch_name.clone()).collect();
    let mut rates = Vec::with_capacity(r_grid.len());
    let mut means = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        let mut cfg = config.clone();
        cfg.augmentation = Augmentation::Dwp;
        cfg.r = r;
        let report = leave_one_out_transfer(zoo, x, ids, targets, &cfg, seeds)?;
        let row: Vec<f64> = black_box
            .iter()
            .map(|b| report.mean_rate(b).unwrap_or(0.0))
            .collect();
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        rates.push(row);
        means.push(mean);
    }
    Ok(AblationTable {
        r_grid: r_grid.to_vec(),
        black_box,
        rates,
        means,
    })
}

// ---------------------------------------------------------------------------
// Accuracy decay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DecayRow {
    pub q: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub n_masks: usize,
}

#[derive(Debug, Clone)]
pub struct DecayTable {
    pub model: String,
    pub rows: Vec<DecayRow>,
}

impl DecayTable {
    pub const CSV_HEADER: &'static str = "q,mean_accuracy,std_accuracy,n_masks";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.q, r.mean_accuracy, r.std_accuracy, r.n_masks
            ));
        }
        out
    }
}

/// Split an expected pruned fraction `q = r * p_bern` into the two knobs:
/// the prunable set covers twice the expectation (capped at 1) so masks
/// keep genuine randomness across the grid.
pub fn q_to_rate_pair(q: f64) -> (f64, f64) {
    if q <= 0.0 {
        (0.0, 0.0)
    } else {
        let r = (2.0 * q).min(1.0);
        (r, q / r)
    }
}

/// Mean and standard deviation of pruned-view accuracy at each expected
/// pruned fraction in the grid, over independent masks.
pub fn accuracy_decay_curve(
    model: &Model<f32>,
    q_grid: &[f64],
    masks_per_point: usize,
    dataset: &Dataset<f32>,
    seed: u64,
) -> Result<DecayTable> {
    if masks_per_point == 0 {
        return Err(Error::rejected("accuracy_decay_curve", "need >= 1 mask"));
    }
    let mut rows = Vec::with_capacity(q_grid.len());
    for (qi, &q) in q_grid.iter().enumerate() {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::rejected(
                "accuracy_decay_curve",
                format!("q must lie in [0,1], got {q}"),
            ));
        }
        let (r, p) = q_to_rate_pair(q);
        let indicator = compute_prunable_indicator(model, r)?;
        let accs: Vec<f64> = if q == 0.0 {
            // no pruning: one evaluation is the exact clean accuracy
            vec![evaluate_accuracy_view(&View::plain(model), dataset)?]
        } else {
            (0..masks_per_point)
                .map(|mi| {
                    let stream = Stream::root(seed)
                        .derive(tag::PURPOSE, purpose::DECAY_MASK)
                        .derive(tag::GRID_POINT, qi as u64)
                        .derive(tag::INSTANCE, mi as u64);
                    let mask = sample_prune_mask(&indicator, p, stream)?;
                    let view = prune_weights(model, &indicator, &mask)?;
                    evaluate_accuracy_view(&view, dataset)
                })
                .collect::<Result<Vec<f64>>>()?
        };
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
        rows.push(DecayRow {
            q,
            mean_accuracy: mean,
            std_accuracy: var.sqrt(),
            n_masks: accs.len(),
        });
    }
    Ok(DecayTable {
        model: model.arch_name.clone(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Class activation heatmaps
// ---------------------------------------------------------------------------

/// Gradient-weighted class activation map for a single sample `[1,C,H,W]`:
/// channel coefficients are the spatial means of the class logit's gradient
/// at the named conv output, the map is the relu of the coefficient-weighted
/// channel sum, bilinearly upsampled to `H x W` and min-max normalized
/// (all-zero maps stay all-zero).
pub fn gradcam_map<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    class_index: usize,
    layer_name: &str,
) -> Result<Tensor<T>> {
    if x.shape()[0] != 1 {
        return Err(Error::rejected("gradcam_map", "expects a single sample"));
    }
    if class_index >= model.num_classes {
        return Err(Error::rejected("gradcam_map", "class index out of range"));
    }
    let view = View::plain(model);
    let acts = forward_traced(&view, x, Some(layer_name))?;
    let activation = acts
        .captured()
        .cloned()
        .ok_or_else(|| Error::rejected("gradcam_map", format!("unknown layer {layer_name:?}")))?;
    let mut upstream = Tensor::zeros(acts.logits.shape());
    upstream.data_mut()[class_index] = T::ONE;
    let (_, grad) = backward_input_captured(&view, &acts, &upstream, layer_name)?;
    let grad = grad.expect("captured conv gradient");
    let (c, gh, gw) = (
        activation.shape()[1],
        activation.shape()[2],
        activation.shape()[3],
    );
    let plane = gh * gw;
    let mut map = vec![0.0f64; plane];
    for ci in 0..c {
        let a = &activation.data()[ci * plane..(ci + 1) * plane];
        let g = &grad.data()[ci * plane..(ci + 1) * plane];
        let coeff: f64 = g.iter().map(|v| v.to_f64()).sum::<f64>() / plane as f64;
        for (m, &av) in map.iter_mut().zip(a) {
            *m += coeff * av.to_f64();
        }
    }
    for m in map.iter_mut() {
        *m = m.max(0.0);
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let map_t: Vec<T> = map.iter().map(|&v| T::from_f64(v)).collect();
    let up = bilinear_resize(&map_t, 1, gh, gw, h, w);
    let mut out = Tensor::new(vec![h, w], up)?;
    let max = out.data().iter().map(|v| v.to_f64()).fold(0.0, f64::max);
    let min = out
        .data()
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::INFINITY, f64::min);
    if max > min && max > 0.0 {
        let span = max - min;
        for v in out.data_mut() {
            *v = T::from_f64((v.to_f64() - min) / span);
        }
    } else if max > 0.0 {
        // constant positive map
        for v in out.data_mut() {
            *v = T::ONE;
        }
    }
    Ok(out)
}
