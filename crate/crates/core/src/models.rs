//! Model zoo: four heterogeneous small convolutional classifiers, natural
//! and multi-step adversarial training, and accuracy evaluation.
//!
//! The four architectures stand in for the plain / deep-narrow / residual /
//! parallel-branch roles of large pretrained CNN zoos; heterogeneity is what
//! makes the leave-one-out transfer protocol meaningful at desk scale.

use crate::attack::clip_to_budget;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{
    backward_input, backward_params, forward, forward_traced, Block, Conv2d, Dense, LossSpec,
    Stage, View,
};
use crate::rng::{purpose, tag, Stream};
use crate::tensor::{sign, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Kernel,
    Bias,
}

/// Named parameter array. Only kernels are prunable; biases never are.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub role: Role,
    pub prunable: bool,
    pub values: Tensor<T>,
}

/// Ordered layer graph plus its named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub arch_name: String,
    pub input_spec: (usize, usize, usize),
    pub num_classes: usize,
    pub stages: Vec<Stage>,
    pub params: Vec<Param<T>>,
    pub meta: serde_json::Map<String, serde_json::Value>,
    index: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SimShape {
    Chw(usize, usize, usize),
    Flat(usize),
}

fn simulate_shape(stages: &[Stage], input: SimShape, inside_block: bool) -> Result<SimShape> {
    let mut shape = input;
    for stage in stages {
        shape = match (stage, shape) {
            (Stage::Conv2d(c), SimShape::Chw(ci, h, w)) => {
                if ci != c.in_c {
                    return Err(Error::rejected(
                        "model",
                        format!("{}: expects {} input channels, got {ci}", c.name, c.in_c),
                    ));
                }
                let (oh, ow) = c.out_hw(h, w);
                SimShape::Chw(c.out_c, oh, ow)
            }
            (Stage::Dense(d), SimShape::Flat(n)) => {
                if n != d.in_dim {
                    return Err(Error::rejected(
                        "model",
                        format!("{}: expects {} inputs, got {n}", d.name, d.in_dim),
                    ));
                }
                SimShape::Flat(d.out_dim)
            }
            (Stage::Relu | Stage::Square, s) => s,
            (Stage::MaxPool2 | Stage::AvgPool2, SimShape::Chw(c, h, w)) => {
                SimShape::Chw(c, h / 2, w / 2)
            }
            (Stage::GlobalAvgPool, SimShape::Chw(c, _, _)) => SimShape::Flat(c),
            (Stage::Flatten, SimShape::Chw(c, h, w)) => SimShape::Flat(c * h * w),
            (Stage::Block(b), s) => {
                if inside_block {
                    return Err(Error::rejected("model", "blocks must not nest"));
                }
                for branch in &b.branches {
                    let out = simulate_shape(branch, s, true)?;
                    if out != s {
                        return Err(Error::rejected(
                            "model",
                            "block branches must preserve the input shape",
                        ));
                    }
                }
                s
            }
            (stage, s) => {
                return Err(Error::rejected(
                    "model",
                    format!("stage {stage:?} cannot consume shape {s:?}"),
                ))
            }
        };
    }
    Ok(shape)
}

fn collect_param_uses(stages: &[Stage], uses: &mut Vec<(String, Role, Vec<usize>)>) {
    for stage in stages {
        match stage {
            Stage::Conv2d(c) => {
                uses.push((
                    c.kernel_param(),
                    Role::Kernel,
                    vec![c.out_c, c.in_c, c.kernel, c.kernel],
                ));
                uses.push((c.bias_param(), Role::Bias, vec![c.out_c]));
            }
            Stage::Dense(d) => {
                uses.push((d.kernel_param(), Role::Kernel, vec![d.out_dim, d.in_dim]));
                uses.push((d.bias_param(), Role::Bias, vec![d.out_dim]));
            }
            Stage::Block(b) => {
                for branch in &b.branches {
                    collect_param_uses(branch, uses);
                }
            }
            _ => {}
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(
        arch_name: impl Into<String>,
        input_spec: (usize, usize, usize),
        num_classes: usize,
        stages: Vec<Stage>,
        params: Vec<Param<T>>,
    ) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::rejected(
                    "model",
                    format!("duplicate parameter {}", p.name),
                ));
            }
            if p.prunable != matches!(p.role, Role::Kernel) {
                return Err(Error::rejected(
                    "model",
                    format!("{}: prunable must hold exactly for kernels", p.name),
                ));
            }
        }
        let mut uses = Vec::new();
        collect_param_uses(&stages, &mut uses);
        for (name, role, shape) in &uses {
            match index.get(name) {
                None => {
                    return Err(Error::rejected("model", format!("missing parameter {name}")))
                }
                Some(&i) => {
                    let p = &params[i];
                    if p.role != *role || p.values.shape() != shape.as_slice() {
                        return Err(Error::shape(
                            format!("parameter {name}"),
                            shape,
                            p.values.shape(),
                        ));
                    }
                }
            }
        }
        if uses.len() != params.len() {
            return Err(Error::rejected(
                "model",
                "every parameter must be referenced by exactly one layer",
            ));
        }
        let out = simulate_shape(
            &stages,
            SimShape::Chw(input_spec.0, input_spec.1, input_spec.2),
            false,
        )?;
        if out != SimShape::Flat(num_classes) {
            return Err(Error::rejected(
                "model",
                format!("stages produce {out:?}, expected Flat({num_classes})"),
            ));
        }
        Ok(Model {
            arch_name: arch_name.into(),
            input_spec,
            num_classes,
            stages,
            params,
            meta: serde_json::Map::new(),
            index,
        })
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::rejected("model", format!("unknown parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        Ok(&self.params[self.param_index(name)?])
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Total number of prunable (kernel) weights.
    pub fn prunable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.prunable)
            .map(|p| p.values.len())
            .sum()
    }

    /// Number of identity-skip blocks.
    pub fn block_count(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s, Stage::Block(b) if b.skip))
            .count()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch_name: self.arch_name.clone(),
            input_spec: self.input_spec,
            num_classes: self.num_classes,
            stages: self.stages.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    prunable: p.prunable,
                    values: p.values.cast(),
                })
                .collect(),
            meta: self.meta.clone(),
            index: self.index.clone(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.arch_name == other.arch_name
            && self.input_spec == other.input_spec
            && self.num_classes == other.num_classes
            && self.stages == other.stages
            && self.meta == other.meta
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| {
                    a.name == b.name
                        && a.role == b.role
                        && a.prunable == b.prunable
                        && a.values.bitwise_eq(&b.values)
                })
    }
}

// ---------------------------------------------------------------------------
// Architectures
// ---------------------------------------------------------------------------

pub const ZOO_ARCHS: [&str; 4] = ["small_conv", "small_vgg", "small_res", "small_incept"];

struct ParamAlloc<T> {
    params: Vec<Param<T>>,
    stream: Stream,
}

impl<T: Scalar> ParamAlloc<T> {
    fn new(seed: u64) -> Self {
        ParamAlloc {
            params: Vec::new(),
            stream: Stream::root(seed).derive(tag::PURPOSE, purpose::PARAM_INIT),
        }
    }

    fn he_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let limit = (6.0 / fan_in as f64).sqrt();
        let mut rng = self
            .stream
            .derive(tag::PARAM, self.params.len() as u64)
            .rng();
        Tensor::from_fn(shape, |_| {
            T::from_f64((2.0 * rng.random::<f64>() - 1.0) * limit)
        })
    }

    fn conv(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Stage {
        let c = Conv2d {
            name: name.to_string(),
            in_c,
            out_c,
            kernel,
            stride,
            pad,
        };
        let values = self.he_uniform(&[out_c, in_c, kernel, kernel], in_c * kernel * kernel);
        self.params.push(Param {
            name: c.kernel_param(),
            role: Role::Kernel,
            prunable: true,
            values,
        });
        self.params.push(Param {
            name: c.bias_param(),
            role: Role::Bias,
            prunable: false,
            values: Tensor::zeros(&[out_c]),
        });
        Stage::Conv2d(c)
    }

    fn dense(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Stage {
        let d = Dense {
            name: name.to_string(),
            in_dim,
            out_dim,
        };
        let values = self.he_uniform(&[out_dim, in_dim], in_dim);
        self.params.push(Param {
            name: d.kernel_param(),
            role: Role::Kernel,
            prunable: true,
            values,
        });
        self.params.push(Param {
            name: d.bias_param(),
            role: Role::Bias,
            prunable: false,
            values: Tensor::zeros(&[out_dim]),
        });
        Stage::Dense(d)
    }
}

/// Build one of the four zoo architectures with He-uniform kernels and zero
/// biases, deterministically from the seed.
pub fn build_architecture<T: Scalar>(
    name: &str,
    input_spec: (usize, usize, usize),
    num_classes: usize,
    seed: u64,
) -> Result<Model<T>> {
    let (c, h, w) = input_spec;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::rejected(
            "build_architecture",
            format!("input sides must be divisible by 4, got {h}x{w}"),
        ));
    }
    let mut a = ParamAlloc::<T>::new(seed);
    let stages = match name {
        // plain: conv/pool twice, two dense layers
        "small_conv" => {
            let flat = 12 * (h / 4) * (w / 4);
            vec![
                a.conv("conv1", c, 6, 3, 1, 1),
                Stage::Relu,
                Stage::MaxPool2,
                a.conv("conv2", 6, 12, 3, 1, 1),
                Stage::Relu,
                Stage::MaxPool2,
                Stage::Flatten,
                a.dense("fc1", flat, 24),
                Stage::Relu,
                a.dense("fc2", 24, num_classes),
            ]
        }
        // deep-narrow: stacked 3x3 convs before each pool
        "small_vgg" => {
            let flat = 8 * (h / 4) * (w / 4);
            vec![
                a.conv("conv1", c, 6, 3, 1, 1),
                Stage::Relu,
                Stage::MaxPool2,
                a.conv("conv2", 6, 8, 3, 1, 1),
                Stage::Relu,
                a.conv("conv3", 8, 8, 3, 1, 1),
                Stage::Relu,
                Stage::MaxPool2,
                Stage::Flatten,
                a.dense("fc1", flat, 16),
                Stage::Relu,
                a.dense("fc2", 16, num_classes),
            ]
        }
        // residual: strided stem plus two identity-skip blocks
        "small_res" => {
            let flat = 6 * (h / 4) * (w / 4);
            vec![
                a.conv("stem", c, 6, 3, 2, 1),
                Stage::Relu,
                Stage::Block(Block {
                    branches: vec![vec![
                        a.conv("rb1.c1", 6, 6, 3, 1, 1),
                        Stage::Relu,
                        a.conv("rb1.c2", 6, 6, 3, 1, 1),
                    ]],
                    skip: true,
                }),
                Stage::Relu,
                Stage::MaxPool2,
                Stage::Block(Block {
                    branches: vec![vec![
                        a.conv("rb2.c1", 6, 6, 3, 1, 1),
                        Stage::Relu,
                        a.conv("rb2.c2", 6, 6, 3, 1, 1),
                    ]],
                    skip: true,
                }),
                Stage::Relu,
                Stage::Flatten,
                a.dense("fc1", flat, num_classes),
            ]
        }
        // parallel-branch: 1x1 and 3x3 branches summed, with identity skip
        "small_incept" => {
            let flat = 6 * (h / 4) * (w / 4);
            vec![
                a.conv("stem", c, 6, 3, 2, 1),
                Stage::Relu,
                Stage::Block(Block {
                    branches: vec![
                        vec![a.conv("ib1.b0", 6, 6, 1, 1, 0)],
                        vec![a.conv("ib1.b1", 6, 6, 3, 1, 1)],
                    ],
                    skip: true,
                }),
                Stage::Relu,
                Stage::MaxPool2,
                Stage::Block(Block {
                    branches: vec![
                        vec![a.conv("ib2.b0", 6, 6, 1, 1, 0)],
                        vec![a.conv("ib2.b1", 6, 6, 3, 1, 1)],
                    ],
                    skip: true,
                }),
                Stage::Relu,
                Stage::Flatten,
                a.dense("fc1", flat, 16),
                Stage::Relu,
                a.dense("fc2", 16, num_classes),
            ]
        }
        other => {
            return Err(Error::rejected(
                "build_architecture",
                format!("unknown architecture {other}"),
            ))
        }
    };
    Model::new(name, input_spec, num_classes, stages, a.params)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Natural training hyperparameters: SGD with momentum on softmax
/// cross-entropy, no schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::rejected("train spec", "learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::rejected("train spec", "batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Inner-maximization recipe for multi-step adversarial training.
#[derive(Debug, Clone, PartialEq)]
pub struct PgdSpec {
    pub steps: usize,
    pub epsilon_at: f64,
    pub step_size: f64,
}

impl Default for PgdSpec {
    fn default() -> Self {
        PgdSpec {
            steps: 3,
            epsilon_at: 8.0 / 255.0,
            step_size: 4.0 / 255.0,
        }
    }
}

impl PgdSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::rejected("pgd spec", "steps must be positive"));
        }
        if self.step_size > self.epsilon_at {
            return Err(Error::rejected(
                "pgd spec",
                "step_size must not exceed epsilon_at",
            ));
        }
        Ok(())
    }
}

fn gather_batch<T: Scalar>(dataset: &Dataset<T>, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
    let shape = dataset.images.shape();
    let per = shape[1..].iter().product::<usize>();
    let mut data = Vec::with_capacity(idx.len() * per);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(&dataset.images.data()[i * per..(i + 1) * per]);
        labels.push(dataset.labels[i] as usize);
    }
    let mut sh = shape.to_vec();
    sh[0] = idx.len();
    (Tensor::new(sh, data).expect("batch shape"), labels)
}

/// Untargeted multi-step PGD on cross-entropy: sign-gradient ascent from the
/// clean batch, clipped to the epsilon ball and [0,1] after every step.
pub fn pgd_perturb<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    pgd: &PgdSpec,
) -> Result<Tensor<T>> {
    pgd.validate()?;
    let view = View::plain(model);
    let loss = LossSpec::CrossEntropy {
        labels: labels.to_vec(),
    };
    let eps = T::from_f64(pgd.epsilon_at);
    let step = T::from_f64(pgd.step_size);
    let mut adv = x.clone();
    for _ in 0..pgd.steps {
        let acts = forward_traced(&view, &adv, None)?;
        let upstream = loss.upstream(&acts.logits)?;
        let gx = backward_input(&view, &acts, &upstream)?;
        for (a, &g) in adv.data_mut().iter_mut().zip(gx.data()) {
            *a += step * sign(g);
        }
        adv = clip_to_budget(&adv, x, eps)?;
    }
    Ok(adv)
}

fn train_impl<T: Scalar>(
    mut model: Model<T>,
    dataset: &Dataset<T>,
    spec: &TrainSpec,
    pgd: Option<&PgdSpec>,
) -> Result<Model<T>> {
    spec.validate()?;
    if let Some(p) = pgd {
        p.validate()?;
    }
    let n = dataset.len();
    if dataset
        .labels
        .iter()
        .any(|&l| l as usize >= model.num_classes)
    {
        return Err(Error::rejected("train", "dataset label out of range"));
    }
    let mut velocity: Vec<Tensor<T>> = model
        .params
        .iter()
        .map(|p| Tensor::zeros(p.values.shape()))
        .collect();
    let shuffle_stream = Stream::root(spec.seed).derive(tag::PURPOSE, purpose::SHUFFLE);
    let lr = T::from_f64(spec.learning_rate);
    let mu = T::from_f64(spec.momentum);
    for epoch in 0..spec.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_stream.derive(tag::EPOCH, epoch as u64).rng());
        for chunk in order.chunks(spec.batch_size) {
            let (mut x, labels) = gather_batch(dataset, chunk);
            if let Some(p) = pgd {
                x = pgd_perturb(&model, &x, &labels, p)?;
            }
            let view = View::plain(&model);
            let acts = forward_traced(&view, &x, None)?;
            let loss = LossSpec::CrossEntropy {
                labels: labels.clone(),
            };
            let mean_loss: f64 =
                loss.values(&acts.logits)?.iter().sum::<f64>() / chunk.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let scale = T::from_f64(1.0 / chunk.len() as f64);
            let upstream = loss.upstream(&acts.logits)?.scale(scale);
            let (_, grads) = backward_params(&view, &acts, &upstream)?;
            drop(view);
            for ((param, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, vi), &gi) in param
                    .values
                    .data_mut()
                    .iter_mut()
                    .zip(v.data_mut().iter_mut())
                    .zip(g.data())
                {
                    *vi = mu * *vi + gi;
                    *w -= lr * *vi;
                }
            }
        }
    }
    let train_acc = evaluate_accuracy(&model, dataset)?;
    model.meta.insert(
        "train_accuracy".to_string(),
        serde_json::json!(train_acc),
    );
    model
        .meta
        .insert("train_seed".to_string(), serde_json::json!(spec.seed));
    model
        .meta
        .insert("epochs".to_string(), serde_json::json!(spec.epochs));
    model.meta.insert(
        "adversarial".to_string(),
        serde_json::json!(pgd.is_some()),
    );
    Ok(model)
}

/// Natural training. Deterministic given the spec seed; the final train
/// accuracy is recorded in the returned model's metadata.
pub fn train_model<T: Scalar>(
    model: Model<T>,
    dataset: &Dataset<T>,
    spec: &TrainSpec,
) -> Result<Model<T>> {
    train_impl(model, dataset, spec, None)
}

/// Multi-step adversarial training: every minibatch is replaced by
/// untargeted PGD examples before the weight update. With a zero budget the
/// trajectory equals natural training bit for bit.
pub fn adversarial_train<T: Scalar>(
    model: Model<T>,
    dataset: &Dataset<T>,
    spec: &TrainSpec,
    pgd: &PgdSpec,
) -> Result<Model<T>> {
    train_impl(model, dataset, spec, Some(pgd))
}

/// Fraction of samples whose argmax logit equals the label. Ties break
/// toward the lowest class index.
pub fn evaluate_accuracy<T: Scalar>(model: &Model<T>, dataset: &Dataset<T>) -> Result<f64> {
    evaluate_accuracy_view(&View::plain(model), dataset)
}

/// Accuracy of an augmented view (pruned or eroded weights).
pub fn evaluate_accuracy_view<T: Scalar>(view: &View<T>, dataset: &Dataset<T>) -> Result<f64> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::rejected("evaluate_accuracy", "empty dataset"));
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(64) {
        let (x, labels) = gather_batch(dataset.as_ref(), chunk);
        let logits = forward(view, &x)?;
        let c = logits.shape()[1];
        for (bi, &label) in labels.iter().enumerate() {
            let row = &logits.data()[bi * c..(bi + 1) * c];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Argmax class predictions for a batch, ties toward the lowest index.
pub fn predict<T: Scalar>(view: &View<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let logits = forward(view, x)?;
    let c = logits.shape()[1];
    Ok((0..x.shape()[0])
        .map(|bi| {
            let row = &logits.data()[bi * c..(bi + 1) * c];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
