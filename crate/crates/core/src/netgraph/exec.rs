//! Forward and backward passes over a [`NetworkSpec`].

use std::collections::BTreeMap;

use super::ops;
use super::spec::{LayerKind, NetworkSpec};
use super::weights::{LayerParams, Model, WeightStore};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

fn check_input(spec: &NetworkSpec, x: &Tensor) -> Result<Vec<[usize; 3]>> {
    if x.channels() != spec.input_channels() {
        return dim_err(format!("{} expects {} input channels, got {}", spec.name, spec.input_channels(), x.channels()));
    }
    if let Some(c) = spec.input_canvas {
        if x.spatial() != c {
            return dim_err(format!("{} expects input {:?}, got {:?}", spec.name, c, x.spatial()));
        }
    }
    if x.batch() == 0 {
        return dim_err("empty batch");
    }
    spec.spatial_shapes(x.spatial())
}

/// Index of the last layer that reads each layer's output.
fn last_uses(spec: &NetworkSpec) -> Vec<usize> {
    let mut last: Vec<usize> = (0..spec.layers.len()).collect();
    for (i, l) in spec.layers.iter().enumerate() {
        for &j in &l.inputs {
            last[j] = i;
        }
    }
    last
}

fn conv_params<'a>(w: &'a WeightStore, name: &str) -> Result<(&'a [f32], &'a [f32])> {
    match w.get(name)? {
        LayerParams::Conv { weight, bias } => Ok((&weight.data, &bias.data)),
        _ => Err(Error::Format(format!("layer {name} holds batch-norm weights"))),
    }
}

fn bn_params<'a>(w: &'a WeightStore, name: &str) -> Result<[&'a [f32]; 4]> {
    match w.get(name)? {
        LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
            Ok([&gamma.data, &beta.data, &running_mean.data, &running_var.data])
        }
        _ => Err(Error::Format(format!("layer {name} holds convolution weights"))),
    }
}

/// Batch statistics used while training.
#[derive(Clone, Debug)]
struct BatchStats {
    mean: Vec<f32>,
    var: Vec<f32>,
}

/// Recorded activations of a training-mode forward pass.
pub struct Tape {
    acts: Vec<Option<Tensor>>,
    stats: BTreeMap<usize, BatchStats>,
    maxout_args: BTreeMap<usize, Vec<u8>>,
    pool_indices: BTreeMap<usize, Vec<u32>>,
    /// Samples per batch-norm channel, for the unbiased running-variance update.
    counts: BTreeMap<usize, usize>,
}

impl Tape {
    /// Pre-softmax scores.
    pub fn logits(&self, spec: &NetworkSpec) -> &Tensor {
        let l = &spec.layers[spec.output()];
        self.acts[l.inputs[0]].as_ref().expect("logits recorded")
    }

    pub fn probabilities(&self, spec: &NetworkSpec) -> &Tensor {
        self.acts[spec.output()].as_ref().expect("output recorded")
    }
}

enum Mode<'a> {
    Infer,
    Train(&'a mut Tape),
}

fn run(spec: &NetworkSpec, w: &WeightStore, x: Tensor, mut mode: Mode<'_>) -> Result<Option<Tensor>> {
    let shapes = check_input(spec, &x)?;
    let last = last_uses(spec);
    let training = matches!(mode, Mode::Train(_));
    let mut acts: Vec<Option<Tensor>> = vec![None; spec.layers.len()];
    let mut pools: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    acts[0] = Some(x);
    for (i, l) in spec.layers.iter().enumerate().skip(1) {
        let input = |k: usize| acts[l.inputs[k]].as_ref().expect("operand alive");
        let y = match l.kind {
            LayerKind::Input => unreachable!("input only at position 0"),
            LayerKind::Conv2d { .. } | LayerKind::Conv3d { .. } => {
                let (wt, b) = conv_params(w, &l.name)?;
                ops::conv_forward(input(0), wt, b, l.out_channels, l.kind.kernel().expect("conv kernel"))
            }
            LayerKind::BatchNorm => {
                let [gamma, beta, rm, rv] = bn_params(w, &l.name)?;
                let xin = input(0);
                if let Mode::Train(tape) = &mut mode {
                    let (mean, var) = ops::channel_stats(xin);
                    let y = ops::bn_apply(xin, &mean, &var, gamma, beta);
                    tape.counts.insert(i, xin.batch() * xin.spatial_len());
                    tape.stats.insert(i, BatchStats { mean, var });
                    y
                } else {
                    ops::bn_apply(xin, rm, rv, gamma, beta)
                }
            }
            LayerKind::Relu => ops::relu(input(0)),
            LayerKind::Maxout => {
                let ins: Vec<&Tensor> = (0..l.inputs.len()).map(input).collect();
                let (y, arg) = ops::maxout(&ins);
                if let Mode::Train(tape) = &mut mode {
                    tape.maxout_args.insert(i, arg);
                }
                y
            }
            LayerKind::Concat => {
                let ins: Vec<&Tensor> = (0..l.inputs.len()).map(input).collect();
                ops::concat(&ins)
            }
            LayerKind::MaxpoolWithIndices => {
                let (y, idx) = ops::maxpool2(input(0));
                pools.insert(i, idx);
                y
            }
            LayerKind::UnpoolFromIndices { pool } => {
                let [n, c, ..] = input(0).shape();
                let target = shapes[spec.layers[pool].inputs[0]];
                let idx = pools.get(&pool).ok_or_else(|| Error::Config(format!("{}: pool not run", l.name)))?;
                ops::unpool2(input(0), idx, [n, c, target[0], target[1], target[2]])
            }
            LayerKind::Softmax => ops::softmax(input(0)),
        };
        acts[i] = Some(y);
        if !training {
            for &j in &l.inputs {
                if last[j] == i {
                    acts[j] = None;
                }
            }
        }
    }
    match mode {
        Mode::Infer => Ok(acts[spec.output()].take()),
        Mode::Train(tape) => {
            tape.acts = acts;
            tape.pool_indices = pools;
            Ok(None)
        }
    }
}

/// Inference-mode forward pass returning class probabilities. Batch-norm uses running statistics.
pub fn forward(model: &Model, x: Tensor) -> Result<Tensor> {
    run(&model.spec, &model.weights, x, Mode::Infer).map(|t| t.expect("inference output"))
}

/// Runs inference in batches of at most `batch` samples.
pub fn predict(model: &Model, x: &Tensor, batch: usize) -> Result<Tensor> {
    let [n, c, d, h, w] = x.shape();
    let batch = batch.max(1);
    let mut parts = Vec::new();
    let mut s = 0;
    while s < n {
        let e = (s + batch).min(n);
        let chunk = Tensor::from_vec([e - s, c, d, h, w], x.data()[s * x.sample_len()..e * x.sample_len()].to_vec())?;
        parts.push(forward(model, chunk)?);
        s = e;
    }
    if parts.is_empty() {
        return dim_err("empty batch");
    }
    Tensor::stack(&parts.iter().collect::<Vec<_>>())
}

/// Training-mode forward pass. Batch-norm normalizes with batch statistics.
pub fn forward_train(model: &Model, x: Tensor) -> Result<Tape> {
    let mut tape = Tape {
        acts: Vec::new(),
        stats: BTreeMap::new(),
        maxout_args: BTreeMap::new(),
        pool_indices: BTreeMap::new(),
        counts: BTreeMap::new(),
    };
    run(&model.spec, &model.weights, x, Mode::Train(&mut tape))?;
    Ok(tape)
}

/// Moves running batch-norm statistics toward the tape's batch statistics:
/// `running = (1 - momentum) * running + momentum * batch`, with unbiased batch variance.
pub fn update_running_stats(model: &mut Model, tape: &Tape, momentum: f32) {
    for (&i, st) in &tape.stats {
        let name = &model.spec.layers[i].name;
        let m = tape.counts[&i] as f32;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        if let Some(LayerParams::BatchNorm { running_mean, running_var, .. }) = model.weights.layers.get_mut(name) {
            for c in 0..st.mean.len() {
                running_mean.data[c] = (1.0 - momentum) * running_mean.data[c] + momentum * st.mean[c];
                running_var.data[c] = (1.0 - momentum) * running_var.data[c] + momentum * st.var[c] * unbias;
            }
        }
    }
}

/// Gradients of trainable arrays per layer, in [`LayerParams::trainable_mut`] order.
pub type Gradients = BTreeMap<String, Vec<Vec<f32>>>;

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Backpropagates `d_logits` (gradient of the loss w.r.t. the pre-softmax scores).
pub fn backward(model: &Model, mut tape: Tape, d_logits: Tensor) -> Result<Gradients> {
    let spec = &model.spec;
    let out = spec.output();
    let logit_layer = spec.layers[out].inputs[0];
    if d_logits.shape() != tape.logits(spec).shape() {
        return dim_err("logit gradient shape differs from logits");
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; spec.layers.len()];
    grads[logit_layer] = Some(d_logits);
    let mut result = Gradients::new();
    for i in (1..out).rev() {
        let Some(g) = grads[i].take() else {
            continue;
        };
        let l = &spec.layers[i];
        let xin = |k: usize| tape.acts[l.inputs[k]].as_ref().expect("tape activation");
        match l.kind {
            LayerKind::Input | LayerKind::Softmax => {}
            LayerKind::Conv2d { .. } | LayerKind::Conv3d { .. } => {
                let (wt, _) = conv_params(&model.weights, &l.name)?;
                let need_dx = l.inputs[0] != 0;
                let (dx, dw, db) = ops::conv_backward(xin(0), wt, &g, l.kind.kernel().expect("conv kernel"), need_dx);
                result.insert(l.name.clone(), vec![dw, db]);
                if let Some(dx) = dx {
                    accumulate(&mut grads[l.inputs[0]], dx);
                }
            }
            LayerKind::BatchNorm => {
                let [gamma, ..] = bn_params(&model.weights, &l.name)?;
                let st = &tape.stats[&i];
                let (dx, dgamma, dbeta) = ops::bn_backward(xin(0), &g, &st.mean, &st.var, gamma);
                result.insert(l.name.clone(), vec![dgamma, dbeta]);
                accumulate(&mut grads[l.inputs[0]], dx);
            }
            LayerKind::Relu => {
                let y = tape.acts[i].as_ref().expect("relu output");
                let dx = ops::relu_backward(y, &g);
                accumulate(&mut grads[l.inputs[0]], dx);
            }
            LayerKind::Maxout => {
                let arg = &tape.maxout_args[&i];
                for (k, &j) in l.inputs.iter().enumerate() {
                    accumulate(&mut grads[j], ops::maxout_backward(&g, arg, k));
                }
            }
            LayerKind::Concat => {
                let chans: Vec<usize> = l.inputs.iter().map(|&j| spec.layers[j].out_channels).collect();
                for (part, &j) in ops::concat_backward(&g, &chans).into_iter().zip(&l.inputs) {
                    accumulate(&mut grads[j], part);
                }
            }
            LayerKind::MaxpoolWithIndices => {
                let shape = xin(0).shape();
                let dx = ops::maxpool2_backward(&g, &tape.pool_indices[&i], shape);
                accumulate(&mut grads[l.inputs[0]], dx);
            }
            LayerKind::UnpoolFromIndices { pool } => {
                let shape = xin(0).shape();
                let dx = ops::unpool2_backward(&g, &tape.pool_indices[&pool], shape);
                accumulate(&mut grads[l.inputs[0]], dx);
            }
        }
        tape.acts[i] = None;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::spec::{build_segnet_with, build_view_agg_net, FusionMode, SegNetConfig, SpatialDims, SpecBuilder};
    use crate::netgraph::weights::ParamArray;

    fn tiny_cfg() -> SegNetConfig {
        SegNetConfig { width: 4, dense_kernels: [3, 3, 1], unpool_kernel: 3, bottleneck_kernel: 3, canvas: (16, 16) }
    }

    fn ramp(shape: [usize; 5]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 101) as f32) / 50.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn zero_classifier_gives_uniform_output() {
        for mode in [FusionMode::Maxout, FusionMode::Concat] {
            let spec = build_segnet_with(5, mode, 1, &tiny_cfg()).unwrap();
            let mut w = WeightStore::init(&spec, 4);
            if let Some(LayerParams::Conv { weight, .. }) = w.layers.get_mut("classifier") {
                weight.data.fill(0.0);
            }
            let m = Model::new(spec, w).unwrap();
            let p = forward(&m, ramp([2, 1, 1, 16, 16])).unwrap();
            assert_eq!(p.shape(), [2, 5, 1, 16, 16]);
            assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-6));
        }
    }

    #[test]
    fn output_is_distribution_and_deterministic() {
        let spec = build_segnet_with(3, FusionMode::Maxout, 2, &tiny_cfg()).unwrap();
        let m = Model::new(spec.clone(), WeightStore::init(&spec, 9)).unwrap();
        let x = ramp([1, 2, 1, 16, 16]);
        let a = forward(&m, x.clone()).unwrap();
        let b = forward(&m, x).unwrap();
        assert_eq!(a, b);
        for i in 0..256 {
            let s: f32 = (0..3).map(|c| a.channel(0, c)[i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn wrong_canvas_rejected() {
        let spec = build_segnet_with(3, FusionMode::Maxout, 1, &tiny_cfg()).unwrap();
        let m = Model::new(spec.clone(), WeightStore::init(&spec, 0)).unwrap();
        assert!(matches!(forward(&m, ramp([1, 1, 1, 16, 8])), Err(Error::Dimension(_))));
        assert!(matches!(forward(&m, ramp([1, 2, 1, 16, 16])), Err(Error::Dimension(_))));
    }

    #[test]
    fn bias_shift_leaves_softmax_unchanged() {
        let spec = build_view_agg_net(5).unwrap();
        let mut w = WeightStore::init(&spec, 2);
        let m0 = Model::new(spec.clone(), w.clone()).unwrap();
        if let Some(LayerParams::Conv { bias, .. }) = w.layers.get_mut("agg.conv2") {
            bias.data.iter_mut().for_each(|b| *b += 3.0);
        }
        let m1 = Model::new(spec, w).unwrap();
        let x = ramp([1, 15, 3, 4, 5]);
        let a = forward(&m0, x.clone()).unwrap();
        let b = forward(&m1, x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    /// Two input pixels, 1x1 conv to two classes: probabilities follow the logistic function.
    #[test]
    fn hand_computed_pointwise_net() {
        let mut b = SpecBuilder::new(1);
        let c = b.conv2d("c", b.input(), 1, 2);
        b.softmax("softmax", c);
        let spec = b.finish("toy", 2, SpatialDims::Two, None, None).unwrap();
        let mut w = WeightStore::default();
        w.layers.insert(
            "c".into(),
            LayerParams::Conv {
                weight: ParamArray { shape: vec![2, 1, 1, 1, 1], data: vec![1.0, -1.0] },
                bias: ParamArray { shape: vec![2], data: vec![0.0, 0.5] },
            },
        );
        let m = Model::new(spec, w).unwrap();
        let x = Tensor::from_vec([1, 1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let p = forward(&m, x).unwrap();
        let sig = |z: f32| 1.0 / (1.0 + (-z).exp());
        // class 0 logit x, class 1 logit 0.5 - x
        for (i, xv) in [0.0f32, 2.0].into_iter().enumerate() {
            assert!((p.channel(0, 0)[i] - sig(2.0 * xv - 0.5)).abs() < 1e-6);
        }
    }

    fn jitter_ramp(shape: [usize; 5]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 101) as f32) / 50.0 - 1.0 + i as f32 * 1e-3).collect()).unwrap()
    }

    /// Central differences of `sum(r * logits)` for the first weight entries
    /// of every parametrized layer. Each entry must agree at one of `steps`,
    /// relative to the largest gradient of its layer.
    fn check_gradients(spec: &NetworkSpec, x: Tensor, steps: &[f32], tol: f64) {
        let mut w = WeightStore::init(spec, 5);
        // zero biases put maxout operands in exact ties
        for (k, p) in w.layers.values_mut().enumerate() {
            if let LayerParams::Conv { bias, .. } = p {
                for (j, b) in bias.data.iter_mut().enumerate() {
                    *b = ((k * 7 + j * 3) % 11) as f32 * 0.01 - 0.05;
                }
            }
        }
        let model = Model::new(spec.clone(), w).unwrap();
        let tape = forward_train(&model, x.clone()).unwrap();
        let r = jitter_ramp(tape.logits(spec).shape());
        let objective = |m: &Model| -> f64 {
            let t = forward_train(m, x.clone()).unwrap();
            t.logits(spec).data().iter().zip(r.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let grads = backward(&model, tape, r.clone()).unwrap();
        assert_eq!(grads.len(), model.weights.layers.len());
        for (layer, g) in &grads {
            for array in 0..2 {
                for idx in 0..g[array].len().min(2) {
                    let an = g[array][idx] as f64;
                    let scale = g.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs() as f64));
                    let ok = steps.iter().any(|&h| {
                        let mut plus = model.clone();
                        let mut minus = model.clone();
                        plus.weights.layers.get_mut(layer).unwrap().trainable_mut()[array].data[idx] += h;
                        minus.weights.layers.get_mut(layer).unwrap().trainable_mut()[array].data[idx] -= h;
                        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
                        (fd - an).abs() <= tol * (1.0 + scale.max(fd.abs()))
                    });
                    assert!(ok, "{}: {layer}[{array}][{idx}] analytic {an}", spec.name);
                }
            }
        }
    }

    #[test]
    fn backward_through_each_motif() {
        let x = || jitter_ramp([2, 2, 1, 4, 4]);
        let mut b = SpecBuilder::new(2);
        let c = b.conv2d("c1", 0, 3, 3);
        let bn = b.batch_norm("bn", c);
        let r = b.relu("r", bn);
        let c2 = b.conv2d("c2", r, 3, 3);
        b.softmax("softmax", c2);
        check_gradients(&b.finish("sequential", 3, SpatialDims::Two, None, None).unwrap(), x(), &[1e-3], 2e-3);

        let mut b = SpecBuilder::new(2);
        let c = b.conv2d("c1", 0, 3, 3);
        let c2 = b.conv2d("c2", c, 3, 3);
        let m = b.fuse("m", FusionMode::Maxout, vec![c, c2]);
        let c3 = b.conv2d("c3", m, 1, 3);
        b.softmax("softmax", c3);
        check_gradients(&b.finish("maxout", 3, SpatialDims::Two, None, None).unwrap(), x(), &[1e-3], 2e-3);

        let mut b = SpecBuilder::new(2);
        let c = b.conv2d("c1", 0, 3, 3);
        let p = b.maxpool("p", c);
        let c2 = b.conv2d("c2", p, 3, 3);
        let u = b.unpool("u", c2, p);
        let m = b.fuse("m", FusionMode::Concat, vec![c, u]);
        let c3 = b.conv2d("c3", m, 1, 3);
        b.softmax("softmax", c3);
        check_gradients(&b.finish("pool-concat", 3, SpatialDims::Two, None, None).unwrap(), x(), &[1e-3], 2e-3);

        let spec = build_view_agg_net(2).unwrap();
        check_gradients(&spec, jitter_ramp([1, 6, 3, 3, 4]), &[1e-3], 2e-3);
    }

    /// The full networks are piecewise smooth, so a kink can spoil one step size.
    #[test]
    fn backward_through_full_networks() {
        let cfg = SegNetConfig { width: 3, dense_kernels: [3, 3, 1], unpool_kernel: 3, bottleneck_kernel: 3, canvas: (32, 32) };
        for mode in [FusionMode::Maxout, FusionMode::Concat] {
            let spec = build_segnet_with(3, mode, 1, &cfg).unwrap();
            check_gradients(&spec, jitter_ramp([2, 1, 1, 32, 32]), &[1e-3, 3e-4, 1e-4], 0.1);
        }
    }

    #[test]
    fn running_stats_follow_batches() {
        let spec = build_view_agg_net(2).unwrap();
        let mut m = Model::new(spec.clone(), WeightStore::init(&spec, 1)).unwrap();
        let x = ramp([1, 6, 2, 3, 3]);
        for _ in 0..200 {
            let t = forward_train(&m, x.clone()).unwrap();
            update_running_stats(&mut m, &t, 0.1);
        }
        let t = forward_train(&m, x.clone()).unwrap();
        let train_out = t.probabilities(&spec).clone();
        let infer_out = forward(&m, x).unwrap();
        // running variance is unbiased, so outputs agree closely but not exactly
        for (a, b) in train_out.data().iter().zip(infer_out.data()) {
            assert!((a - b).abs() < 0.05);
        }
    }
}

