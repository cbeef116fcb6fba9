//! Layer-graph execution: forward passes and exact reverse-mode gradients
//! with respect to inputs and parameters.
//!
//! The layer set is fixed (dense, conv2d stride 1/2, relu, square, 2x2 max
//! and average pooling, global average pooling, flatten, identity-skip
//! blocks), which keeps every gradient path explicit and verifiable against
//! finite differences. Augmentation views overlay effective weights,
//! activation erosion and skip factors without touching the base model.

use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::{tag, Stream};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use std::collections::BTreeMap;

/// 2-D convolution descriptor. Parameters live in the model under
/// `<name>.kernel` (shape `[out_c, in_c, k, k]`) and `<name>.bias`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn kernel_param(&self) -> String {
        format!("{}.kernel", self.name)
    }
    pub fn bias_param(&self) -> String {
        format!("{}.bias", self.name)
    }
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Fully connected descriptor; kernel shape `[out_dim, in_dim]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dense {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn kernel_param(&self) -> String {
        format!("{}.kernel", self.name)
    }
    pub fn bias_param(&self) -> String {
        format!("{}.bias", self.name)
    }
}

/// Parallel branches summed together, optionally plus the identity input
/// (the residual skip used by the erosion baselines and DWP-protected
/// architectures). Branch outputs must keep the input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub branches: Vec<Vec<Stage>>,
    pub skip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    /// Elementwise square; exercises the curvature path of the
    /// finite-difference harness. Not used by the shipped architectures.
    Square,
    MaxPool2,
    AvgPool2,
    GlobalAvgPool,
    Flatten,
    Block(Block),
}

/// Per-block multipliers applied by a view: `skip` scales the identity
/// branch, `branch` scales every non-identity branch.
#[derive(Debug, Clone, Copy)]
pub struct BlockFactors<T> {
    pub skip: T,
    pub branch: T,
}

impl<T: Scalar> Default for BlockFactors<T> {
    fn default() -> Self {
        BlockFactors {
            skip: T::ONE,
            branch: T::ONE,
        }
    }
}

/// Activation erosion drawn per (site, sample) from labelled streams; the
/// multiplier combines dropout zeroing and survivor scaling.
#[derive(Debug, Clone)]
pub struct Erosion {
    pub drop_rate: f64,
    pub scale_range: f64,
    pub stream: Stream,
    pub sample_ids: Vec<u64>,
}

/// Read-only execution view over a base model. Plain views run the model as
/// trained; augmented views substitute effective kernels (weight pruning) or
/// inject activation/skip erosion. The base model is never mutated.
#[derive(Debug, Clone)]
pub struct View<'a, T: Scalar> {
    base: &'a Model<T>,
    overrides: BTreeMap<usize, Tensor<T>>,
    erosion: Option<Erosion>,
    block_factors: Vec<BlockFactors<T>>,
}

impl<'a, T: Scalar> View<'a, T> {
    pub fn plain(base: &'a Model<T>) -> Self {
        View {
            base,
            overrides: BTreeMap::new(),
            erosion: None,
            block_factors: Vec::new(),
        }
    }

    pub fn with_overrides(base: &'a Model<T>, overrides: BTreeMap<usize, Tensor<T>>) -> Self {
        View {
            base,
            overrides,
            erosion: None,
            block_factors: Vec::new(),
        }
    }

    pub fn with_erosion(
        base: &'a Model<T>,
        erosion: Erosion,
        block_factors: Vec<BlockFactors<T>>,
    ) -> Self {
        View {
            base,
            overrides: BTreeMap::new(),
            erosion: Some(erosion),
            block_factors,
        }
    }

    pub fn model(&self) -> &'a Model<T> {
        self.base
    }

    pub fn overrides(&self) -> &BTreeMap<usize, Tensor<T>> {
        &self.overrides
    }

    /// Replace or extend kernel overrides, returning a new view. Applying
    /// the same override set twice yields the same effective weights.
    pub fn overridden(mut self, overrides: BTreeMap<usize, Tensor<T>>) -> Self {
        self.overrides.extend(overrides);
        self
    }

    pub fn param(&self, index: usize) -> &Tensor<T> {
        self.overrides
            .get(&index)
            .unwrap_or(&self.base.params[index].values)
    }

    pub fn param_by_name(&self, name: &str) -> Result<&Tensor<T>> {
        let idx = self.base.param_index(name)?;
        Ok(self.param(idx))
    }

    fn block_factor(&self, block: usize) -> BlockFactors<T> {
        self.block_factors
            .get(block)
            .copied()
            .unwrap_or_default()
    }
}

enum TraceNode<T> {
    Conv {
        input: Tensor<T>,
    },
    Dense {
        input: Tensor<T>,
    },
    Relu {
        active: Vec<bool>,
        multiplier: Option<Tensor<T>>,
    },
    Square {
        input: Tensor<T>,
    },
    MaxPool2 {
        in_shape: Vec<usize>,
        argmax: Vec<u32>,
    },
    AvgPool2 {
        in_shape: Vec<usize>,
    },
    GlobalAvgPool {
        in_shape: Vec<usize>,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
    Block {
        branches: Vec<Vec<TraceNode<T>>>,
        factors: BlockFactors<T>,
    },
}

/// Saved forward pass: logits plus everything backward needs.
pub struct Activations<T> {
    pub logits: Tensor<T>,
    trace: Vec<TraceNode<T>>,
    captured: Option<Tensor<T>>,
}

impl<T: Scalar> Activations<T> {
    /// Output of the conv layer named in `forward_traced`'s capture.
    pub fn captured(&self) -> Option<&Tensor<T>> {
        self.captured.as_ref()
    }
}

struct Counters {
    relu_site: u64,
    block: usize,
}

/// Pre-softmax logits for a batch `[batch, C, H, W]`.
pub fn forward<T: Scalar>(view: &View<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(forward_traced(view, x, None)?.logits)
}

/// Forward pass keeping the trace for a later backward pass. `capture`
/// names a conv layer whose output should be retained (class activation
/// mapping reads it).
pub fn forward_traced<T: Scalar>(
    view: &View<T>,
    x: &Tensor<T>,
    capture: Option<&str>,
) -> Result<Activations<T>> {
    let model = view.model();
    let spec = model.input_spec;
    let expected = [spec.0, spec.1, spec.2];
    if x.shape().len() != 4 || x.shape()[1..] != expected {
        return Err(Error::shape("forward input", &expected, x.shape()));
    }
    if let Some(er) = &view.erosion {
        if er.sample_ids.len() != x.shape()[0] {
            return Err(Error::rejected(
                "forward",
                "erosion sample ids must match batch size",
            ));
        }
    }
    let mut counters = Counters {
        relu_site: 0,
        block: 0,
    };
    let mut trace = Vec::new();
    let mut captured = None;
    let out = run_seq(
        view,
        &model.stages,
        x.clone(),
        &mut trace,
        &mut counters,
        capture,
        &mut captured,
    )?;
    if out.shape() != [x.shape()[0], model.num_classes] {
        return Err(Error::shape(
            "forward output",
            &[x.shape()[0], model.num_classes],
            out.shape(),
        ));
    }
    Ok(Activations {
        logits: out,
        trace,
        captured,
    })
}

fn run_seq<T: Scalar>(
    view: &View<T>,
    stages: &[Stage],
    mut x: Tensor<T>,
    trace: &mut Vec<TraceNode<T>>,
    counters: &mut Counters,
    capture: Option<&str>,
    captured: &mut Option<Tensor<T>>,
) -> Result<Tensor<T>> {
    for stage in stages {
        x = match stage {
            Stage::Conv2d(conv) => {
                let kernel = view.param_by_name(&conv.kernel_param())?;
                let bias = view.param_by_name(&conv.bias_param())?;
                let out = conv2d_forward(&x, kernel, bias, conv)?;
                trace.push(TraceNode::Conv { input: x });
                if capture == Some(conv.name.as_str()) {
                    *captured = Some(out.clone());
                }
                out
            }
            Stage::Dense(dense) => {
                let kernel = view.param_by_name(&dense.kernel_param())?;
                let bias = view.param_by_name(&dense.bias_param())?;
                let out = dense_forward(&x, kernel, bias, dense)?;
                trace.push(TraceNode::Dense { input: x });
                out
            }
            Stage::Relu => {
                let site = counters.relu_site;
                counters.relu_site += 1;
                let active: Vec<bool> = x.data().iter().map(|&v| v > T::ZERO).collect();
                let mut out = x.map(|v| v.max_scalar(T::ZERO));
                let multiplier = match &view.erosion {
                    Some(er) => {
                        let m = erosion_multiplier::<T>(er, site, out.shape());
                        for (o, &f) in out.data_mut().iter_mut().zip(m.data()) {
                            *o *= f;
                        }
                        Some(m)
                    }
                    None => None,
                };
                trace.push(TraceNode::Relu { active, multiplier });
                out
            }
            Stage::Square => {
                let out = x.map(|v| v * v);
                trace.push(TraceNode::Square { input: x });
                out
            }
            Stage::MaxPool2 => {
                let (out, argmax) = maxpool2_forward(&x)?;
                trace.push(TraceNode::MaxPool2 {
                    in_shape: x.shape().to_vec(),
                    argmax,
                });
                out
            }
            Stage::AvgPool2 => {
                let out = avgpool2_forward(&x)?;
                trace.push(TraceNode::AvgPool2 {
                    in_shape: x.shape().to_vec(),
                });
                out
            }
            Stage::GlobalAvgPool => {
                let out = global_avgpool_forward(&x)?;
                trace.push(TraceNode::GlobalAvgPool {
                    in_shape: x.shape().to_vec(),
                });
                out
            }
            Stage::Flatten => {
                let in_shape = x.shape().to_vec();
                let batch = in_shape[0];
                let flat: usize = in_shape[1..].iter().product();
                let out = x.reshaped(&[batch, flat])?;
                trace.push(TraceNode::Flatten { in_shape });
                out
            }
            Stage::Block(block) => {
                let factors = view.block_factor(counters.block);
                counters.block += 1;
                let mut branch_traces = Vec::with_capacity(block.branches.len());
                let mut acc = if block.skip {
                    x.scale(factors.skip)
                } else {
                    Tensor::zeros(x.shape())
                };
                for branch in &block.branches {
                    let mut btrace = Vec::new();
                    let out = run_seq(
                        view,
                        branch,
                        x.clone(),
                        &mut btrace,
                        counters,
                        capture,
                        captured,
                    )?;
                    acc.axpy(factors.branch, &out)?;
                    branch_traces.push(btrace);
                }
                trace.push(TraceNode::Block {
                    branches: branch_traces,
                    factors,
                });
                acc
            }
        };
    }
    Ok(x)
}

fn erosion_multiplier<T: Scalar>(er: &Erosion, site: u64, shape: &[usize]) -> Tensor<T> {
    let batch = shape[0];
    let per_sample: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(batch * per_sample);
    for b in 0..batch {
        let mut rng = er
            .stream
            .derive(tag::SITE, site)
            .derive(tag::SAMPLE, er.sample_ids[b])
            .rng();
        for _ in 0..per_sample {
            let dropped = rng.random::<f64>() < er.drop_rate;
            if dropped {
                data.push(T::ZERO);
            } else if er.scale_range > 0.0 {
                let f = 1.0 + er.scale_range * (2.0 * rng.random::<f64>() - 1.0);
                data.push(T::from_f64(f));
            } else {
                data.push(T::ONE);
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("multiplier shape")
}

/// Exact gradient of `<logits, upstream>` with respect to the input batch.
pub fn backward_input<T: Scalar>(
    view: &View<T>,
    acts: &Activations<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (gx, _, _) = backward_impl(view, acts, upstream, false, None)?;
    Ok(gx)
}

/// Like [`backward_input`] but also returns the gradient arriving at the
/// captured conv output.
pub fn backward_input_captured<T: Scalar>(
    view: &View<T>,
    acts: &Activations<T>,
    upstream: &Tensor<T>,
    capture: &str,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let (gx, _, cap) = backward_impl(view, acts, upstream, false, Some(capture))?;
    Ok((gx, cap))
}

/// Parameter gradients aligned with `model.params`, plus the input gradient.
pub fn backward_params<T: Scalar>(
    view: &View<T>,
    acts: &Activations<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (gx, grads, _) = backward_impl(view, acts, upstream, true, None)?;
    Ok((gx, grads.expect("param grads requested")))
}

fn backward_impl<T: Scalar>(
    view: &View<T>,
    acts: &Activations<T>,
    upstream: &Tensor<T>,
    want_params: bool,
    capture: Option<&str>,
) -> Result<(Tensor<T>, Option<Vec<Tensor<T>>>, Option<Tensor<T>>)> {
    if upstream.shape() != acts.logits.shape() {
        return Err(Error::shape(
            "backward upstream",
            acts.logits.shape(),
            upstream.shape(),
        ));
    }
    upstream.check_finite("backward upstream")?;
    let model = view.model();
    let mut grads = if want_params {
        Some(
            model
                .params
                .iter()
                .map(|p| Tensor::zeros(p.values.shape()))
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let mut captured = None;
    let gx = backward_seq(
        view,
        &model.stages,
        &acts.trace,
        upstream.clone(),
        &mut grads,
        capture,
        &mut captured,
    )?;
    Ok((gx, grads, captured))
}

fn backward_seq<T: Scalar>(
    view: &View<T>,
    stages: &[Stage],
    trace: &[TraceNode<T>],
    mut up: Tensor<T>,
    grads: &mut Option<Vec<Tensor<T>>>,
    capture: Option<&str>,
    captured: &mut Option<Tensor<T>>,
) -> Result<Tensor<T>> {
    debug_assert_eq!(stages.len(), trace.len());
    for (stage, node) in stages.iter().zip(trace.iter()).rev() {
        up = match (stage, node) {
            (Stage::Conv2d(conv), TraceNode::Conv { input }) => {
                if capture == Some(conv.name.as_str()) {
                    *captured = Some(up.clone());
                }
                let kernel = view.param_by_name(&conv.kernel_param())?;
                if let Some(gs) = grads.as_mut() {
                    let ki = view.model().param_index(&conv.kernel_param())?;
                    let bi = view.model().param_index(&conv.bias_param())?;
                    conv2d_backward_params(input, &up, conv, &mut gs[ki], &mut gs[bi]);
                }
                conv2d_backward_input(&up, kernel, conv, input.shape())
            }
            (Stage::Dense(dense), TraceNode::Dense { input }) => {
                let kernel = view.param_by_name(&dense.kernel_param())?;
                if let Some(gs) = grads.as_mut() {
                    let ki = view.model().param_index(&dense.kernel_param())?;
                    let bi = view.model().param_index(&dense.bias_param())?;
                    dense_backward_params(input, &up, dense, &mut gs[ki], &mut gs[bi]);
                }
                dense_backward_input(&up, kernel, dense, input.shape())
            }
            (Stage::Relu, TraceNode::Relu { active, multiplier }) => {
                let mut g = up;
                if let Some(m) = multiplier {
                    for (v, &f) in g.data_mut().iter_mut().zip(m.data()) {
                        *v *= f;
                    }
                }
                for (v, &a) in g.data_mut().iter_mut().zip(active.iter()) {
                    if !a {
                        *v = T::ZERO;
                    }
                }
                g
            }
            (Stage::Square, TraceNode::Square { input }) => {
                let two = T::from_f64(2.0);
                let mut g = up;
                for (v, &xi) in g.data_mut().iter_mut().zip(input.data()) {
                    *v *= two * xi;
                }
                g
            }
            (Stage::MaxPool2, TraceNode::MaxPool2 { in_shape, argmax }) => {
                let mut g = Tensor::zeros(in_shape);
                for (i, &src) in argmax.iter().enumerate() {
                    g.data_mut()[src as usize] += up.data()[i];
                }
                g
            }
            (Stage::AvgPool2, TraceNode::AvgPool2 { in_shape }) => {
                avgpool2_backward(&up, in_shape)
            }
            (Stage::GlobalAvgPool, TraceNode::GlobalAvgPool { in_shape }) => {
                global_avgpool_backward(&up, in_shape)
            }
            (Stage::Flatten, TraceNode::Flatten { in_shape }) => up.reshaped(in_shape)?,
            (Stage::Block(block), TraceNode::Block { branches, factors }) => {
                let mut gx = if block.skip {
                    up.scale(factors.skip)
                } else {
                    Tensor::zeros(up.shape())
                };
                for (branch, btrace) in block.branches.iter().zip(branches.iter()) {
                    let bup = up.scale(factors.branch);
                    let g = backward_seq(view, branch, btrace, bup, grads, capture, captured)?;
                    gx.axpy(T::ONE, &g)?;
                }
                gx
            }
            _ => {
                return Err(Error::rejected(
                    "backward",
                    "trace does not match model stages",
                ))
            }
        };
    }
    Ok(up)
}

// ---------------------------------------------------------------------------
// Layer kernels
// ---------------------------------------------------------------------------

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    conv: &Conv2d,
) -> Result<Tensor<T>> {
    let (b, ic, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if ic != conv.in_c {
        return Err(Error::shape("conv input channels", &[conv.in_c], &[ic]));
    }
    let expected_k = [conv.out_c, conv.in_c, conv.kernel, conv.kernel];
    if kernel.shape() != expected_k {
        return Err(Error::shape("conv kernel", &expected_k, kernel.shape()));
    }
    let (oh, ow) = conv.out_hw(h, w);
    let k = conv.kernel;
    let pad = conv.pad as i64;
    let mut out = Tensor::zeros(&[b, conv.out_c, oh, ow]);
    let kd = kernel.data();
    let bd = bias.data();
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for oc in 0..conv.out_c {
            let obase = (bi * conv.out_c + oc) * oh * ow;
            od[obase..obase + oh * ow].fill(bd[oc]);
            for ci in 0..ic {
                let ibase = (bi * ic + ci) * h * w;
                let kbase = (oc * ic + ci) * k * k;
                if conv.stride == 1 {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = kd[kbase + ky * k + kx];
                            let dy = ky as i64 - pad;
                            let dx = kx as i64 - pad;
                            // output rows where the shifted input row exists
                            let oy0 = (-dy).max(0) as usize;
                            let oy1 = ((h as i64 - dy).min(oh as i64)).max(0) as usize;
                            let ox0 = (-dx).max(0) as usize;
                            let ox1 = ((w as i64 - dx).min(ow as i64)).max(0) as usize;
                            if ox0 >= ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = (oy as i64 + dy) as usize;
                                let orow = obase + oy * ow;
                                let irow = ibase + iy * w + (ox0 as i64 + dx) as usize;
                                let (outs, ins) = (
                                    &mut od[orow + ox0..orow + ox1],
                                    &xd[irow..irow + (ox1 - ox0)],
                                );
                                for (o, &i) in outs.iter_mut().zip(ins) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                } else {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = T::ZERO;
                            for ky in 0..k {
                                let iy = (oy * conv.stride + ky) as i64 - pad;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * conv.stride + kx) as i64 - pad;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    acc += kd[kbase + ky * k + kx]
                                        * xd[ibase + iy as usize * w + ix as usize];
                                }
                            }
                            od[obase + oy * ow + ox] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_backward_input<T: Scalar>(
    up: &Tensor<T>,
    kernel: &Tensor<T>,
    conv: &Conv2d,
    in_shape: &[usize],
) -> Tensor<T> {
    let (b, ic, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (up.shape()[2], up.shape()[3]);
    let k = conv.kernel;
    let pad = conv.pad as i64;
    let mut gx = Tensor::zeros(in_shape);
    let kd = kernel.data();
    let ud = up.data();
    let gd = gx.data_mut();
    for bi in 0..b {
        for oc in 0..conv.out_c {
            let obase = (bi * conv.out_c + oc) * oh * ow;
            for ci in 0..ic {
                let ibase = (bi * ic + ci) * h * w;
                let kbase = (oc * ic + ci) * k * k;
                if conv.stride == 1 {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = kd[kbase + ky * k + kx];
                            let dy = ky as i64 - pad;
                            let dx = kx as i64 - pad;
                            let oy0 = (-dy).max(0) as usize;
                            let oy1 = ((h as i64 - dy).min(oh as i64)).max(0) as usize;
                            let ox0 = (-dx).max(0) as usize;
                            let ox1 = ((w as i64 - dx).min(ow as i64)).max(0) as usize;
                            if ox0 >= ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = (oy as i64 + dy) as usize;
                                let orow = obase + oy * ow;
                                let irow = ibase + iy * w + (ox0 as i64 + dx) as usize;
                                let (gins, ups) = (
                                    &mut gd[irow..irow + (ox1 - ox0)],
                                    &ud[orow + ox0..orow + ox1],
                                );
                                for (g, &u) in gins.iter_mut().zip(ups) {
                                    *g += wv * u;
                                }
                            }
                        }
                    }
                } else {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let u = ud[obase + oy * ow + ox];
                            for ky in 0..k {
                                let iy = (oy * conv.stride + ky) as i64 - pad;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * conv.stride + kx) as i64 - pad;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    gd[ibase + iy as usize * w + ix as usize] +=
                                        kd[kbase + ky * k + kx] * u;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv2d_backward_params<T: Scalar>(
    input: &Tensor<T>,
    up: &Tensor<T>,
    conv: &Conv2d,
    gkernel: &mut Tensor<T>,
    gbias: &mut Tensor<T>,
) {
    let (b, ic, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (oh, ow) = (up.shape()[2], up.shape()[3]);
    let k = conv.kernel;
    let pad = conv.pad as i64;
    let xd = input.data();
    let ud = up.data();
    let gk = gkernel.data_mut();
    let gb = gbias.data_mut();
    for bi in 0..b {
        for oc in 0..conv.out_c {
            let obase = (bi * conv.out_c + oc) * oh * ow;
            for v in &ud[obase..obase + oh * ow] {
                gb[oc] += *v;
            }
            for ci in 0..ic {
                let ibase = (bi * ic + ci) * h * w;
                let kbase = (oc * ic + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::ZERO;
                        for oy in 0..oh {
                            let iy = (oy * conv.stride + ky) as i64 - pad;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * conv.stride + kx) as i64 - pad;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                acc += ud[obase + oy * ow + ox]
                                    * xd[ibase + iy as usize * w + ix as usize];
                            }
                        }
                        gk[kbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
}

fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dense: &Dense,
) -> Result<Tensor<T>> {
    if x.shape().len() != 2 || x.shape()[1] != dense.in_dim {
        return Err(Error::shape("dense input", &[0, dense.in_dim], x.shape()));
    }
    let b = x.shape()[0];
    let mut out = Tensor::zeros(&[b, dense.out_dim]);
    let xd = x.data();
    let kd = kernel.data();
    let bd = bias.data();
    let od = out.data_mut();
    for bi in 0..b {
        let xrow = &xd[bi * dense.in_dim..(bi + 1) * dense.in_dim];
        for o in 0..dense.out_dim {
            let krow = &kd[o * dense.in_dim..(o + 1) * dense.in_dim];
            let mut acc = bd[o];
            for (&kv, &xv) in krow.iter().zip(xrow) {
                acc += kv * xv;
            }
            od[bi * dense.out_dim + o] = acc;
        }
    }
    Ok(out)
}

fn dense_backward_input<T: Scalar>(
    up: &Tensor<T>,
    kernel: &Tensor<T>,
    dense: &Dense,
    in_shape: &[usize],
) -> Tensor<T> {
    let b = up.shape()[0];
    let mut gx = Tensor::zeros(in_shape);
    let ud = up.data();
    let kd = kernel.data();
    let gd = gx.data_mut();
    for bi in 0..b {
        let grow = &mut gd[bi * dense.in_dim..(bi + 1) * dense.in_dim];
        for o in 0..dense.out_dim {
            let u = ud[bi * dense.out_dim + o];
            let krow = &kd[o * dense.in_dim..(o + 1) * dense.in_dim];
            for (g, &kv) in grow.iter_mut().zip(krow) {
                *g += u * kv;
            }
        }
    }
    gx
}

fn dense_backward_params<T: Scalar>(
    input: &Tensor<T>,
    up: &Tensor<T>,
    dense: &Dense,
    gkernel: &mut Tensor<T>,
    gbias: &mut Tensor<T>,
) {
    let b = up.shape()[0];
    let xd = input.data();
    let ud = up.data();
    let gk = gkernel.data_mut();
    let gb = gbias.data_mut();
    for bi in 0..b {
        let xrow = &xd[bi * dense.in_dim..(bi + 1) * dense.in_dim];
        for o in 0..dense.out_dim {
            let u = ud[bi * dense.out_dim + o];
            gb[o] += u;
            let krow = &mut gk[o * dense.in_dim..(o + 1) * dense.in_dim];
            for (g, &xv) in krow.iter_mut().zip(xrow) {
                *g += u * xv;
            }
        }
    }
}

fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = vec![0u32; b * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    let mut oi = 0;
    for bi in 0..b {
        for ci in 0..c {
            let ibase = (bi * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    // first maximum in scan order wins on ties
                    let mut best_idx = ibase + (2 * oy) * w + 2 * ox;
                    let mut best = xd[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = ibase + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    od[oi] = best;
                    argmax[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

fn avgpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    let mut oi = 0;
    for bi in 0..b {
        for ci in 0..c {
            let ibase = (bi * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = ibase + (2 * oy) * w + 2 * ox;
                    od[oi] = (xd[i] + xd[i + 1] + xd[i + w] + xd[i + w + 1]) * quarter;
                    oi += 1;
                }
            }
        }
    }
    Ok(out)
}

fn avgpool2_backward<T: Scalar>(up: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut gx = Tensor::zeros(in_shape);
    let ud = up.data();
    let gd = gx.data_mut();
    let mut oi = 0;
    for bi in 0..b {
        for ci in 0..c {
            let ibase = (bi * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = ud[oi] * quarter;
                    let i = ibase + (2 * oy) * w + 2 * ox;
                    gd[i] += g;
                    gd[i + 1] += g;
                    gd[i + w] += g;
                    gd[i + w + 1] += g;
                    oi += 1;
                }
            }
        }
    }
    gx
}

fn global_avgpool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros(&[b, c]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let mut acc = T::ZERO;
            for &v in &xd[base..base + h * w] {
                acc += v;
            }
            od[bi * c + ci] = acc * inv;
        }
    }
    Ok(out)
}

fn global_avgpool_backward<T: Scalar>(up: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut gx = Tensor::zeros(in_shape);
    let ud = up.data();
    let gd = gx.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let g = ud[bi * c + ci] * inv;
            let base = (bi * c + ci) * h * w;
            for v in &mut gd[base..base + h * w] {
                *v += g;
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Losses and the finite-difference harness
// ---------------------------------------------------------------------------

/// Attack and training objectives. Values are per-sample; gradients are with
/// respect to the summed batch loss.
#[derive(Debug, Clone)]
pub enum LossSpec {
    /// `J = -z_target`: minimizing raises the target logit.
    Logit { targets: Vec<usize> },
    /// Softmax cross-entropy against true labels (training only).
    CrossEntropy { labels: Vec<usize> },
}

impl LossSpec {
    fn check<T: Scalar>(&self, logits: &Tensor<T>) -> Result<()> {
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        let idx = match self {
            LossSpec::Logit { targets } => targets,
            LossSpec::CrossEntropy { labels } => labels,
        };
        if idx.len() != b {
            return Err(Error::rejected("loss", "index count must match batch"));
        }
        if let Some(&bad) = idx.iter().find(|&&t| t >= c) {
            return Err(Error::rejected(
                "loss",
                format!("class index {bad} out of range for {c} classes"),
            ));
        }
        Ok(())
    }

    /// Per-sample loss values.
    pub fn values<T: Scalar>(&self, logits: &Tensor<T>) -> Result<Vec<f64>> {
        self.check(logits)?;
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        let ld = logits.data();
        Ok(match self {
            LossSpec::Logit { targets } => (0..b)
                .map(|i| -ld[i * c + targets[i]].to_f64())
                .collect(),
            LossSpec::CrossEntropy { labels } => (0..b)
                .map(|i| {
                    let row: Vec<f64> = ld[i * c..(i + 1) * c].iter().map(|v| v.to_f64()).collect();
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    lse - row[labels[i]]
                })
                .collect(),
        })
    }

    /// Gradient of the summed batch loss with respect to the logits.
    pub fn upstream<T: Scalar>(&self, logits: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(logits)?;
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        let mut up = Tensor::zeros(logits.shape());
        match self {
            LossSpec::Logit { targets } => {
                for i in 0..b {
                    up.data_mut()[i * c + targets[i]] = -T::ONE;
                }
            }
            LossSpec::CrossEntropy { labels } => {
                let ld = logits.data();
                for i in 0..b {
                    let row: Vec<f64> = ld[i * c..(i + 1) * c].iter().map(|v| v.to_f64()).collect();
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for j in 0..c {
                        let p = exps[j] / z;
                        up.data_mut()[i * c + j] =
                            T::from_f64(if j == labels[i] { p - 1.0 } else { p });
                    }
                }
            }
        }
        Ok(up)
    }
}

/// Maximum relative error between the analytic input gradient and central
/// finite differences, over an evenly spaced sample of at least
/// `min(64, len)` coordinates.
pub fn grad_check<T: Scalar>(
    view: &View<T>,
    x: &Tensor<T>,
    loss: &LossSpec,
    fd_step: f64,
) -> Result<f64> {
    if !(fd_step > 0.0 && fd_step <= 1e-2) {
        return Err(Error::rejected(
            "grad_check",
            format!("fd_step must lie in (0, 1e-2], got {fd_step}"),
        ));
    }
    let acts = forward_traced(view, x, None)?;
    let upstream = loss.upstream(&acts.logits)?;
    let analytic = backward_input(view, &acts, &upstream)?;

    let total = x.len();
    let n_coords = total.min(64.max(total.min(64)));
    let n_coords = n_coords.max(1);
    let mut max_rel: f64 = 0.0;
    let h = T::from_f64(fd_step);
    for s in 0..n_coords {
        let i = s * total / n_coords;
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let jp: f64 = loss.values(&forward(view, &xp)?)?.iter().sum();
        let jm: f64 = loss.values(&forward(view, &xm)?)?.iter().sum();
        let fd = (jp - jm) / (2.0 * fd_step);
        let an = analytic.data()[i].to_f64();
        let denom = an.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max((an - fd).abs() / denom);
    }
    Ok(max_rel)
}
