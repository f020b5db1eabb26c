//! Mini-batch training and evaluation of decoders on encoder features.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::metrics::ConfusionMatrix;
use crate::nn::loss::total_loss;
use crate::nn::{AdamConfig, LossBreakdown, LossSpec, Mode, Network, NnError, Tensor};
use crate::tasks::{EncoderStub, FeatureStore, ImageSet, LogitCache, BACKGROUND};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Polyak decay; `None` validates with live weights.
    pub polyak: Option<f64>,
    pub loss: LossSpec,
}

/// Shuffled mini-batches covering `0..n`. A trailing single-sample batch is
/// merged into its predecessor so batch-norm always sees two samples.
pub fn batches<G: Rng + ?Sized>(n: usize, batch: usize, rng: &mut G) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Forward, loss and backward on one batch. Parameter gradients accumulate
/// into `net.store`; source gradients are returned when requested.
pub fn forward_backward(
    net: &mut Network<f32>,
    sources: &[Tensor<f32>],
    target: &[u8],
    mask_hw: (usize, usize),
    teacher: Option<&Tensor<f32>>,
    spec: &LossSpec,
    source_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor<f32>>>), NnError> {
    let pass = net.forward(sources, Mode::Train)?;
    let aux = pass.aux_logits();
    let (loss, grads) = total_loss(pass.main_logits(), &aux, target, mask_hw, teacher, spec)?;
    let src = net.backward(&pass, grads.main, grads.aux, source_grads);
    Ok((loss, src))
}

/// Decoder-only training on cached features. Returns the mean loss of every epoch.
pub fn train_decoder<G: Rng + ?Sized>(
    net: &mut Network<f32>,
    feats: &FeatureStore,
    set: &ImageSet,
    teacher: Option<&LogitCache>,
    spec: &TrainSpec,
    rng: &mut G,
) -> Result<Vec<f64>, NnError> {
    let hw = (set.size, set.size);
    if spec.polyak.is_some() {
        net.store.polyak_reset();
    }
    let mut losses = Vec::with_capacity(spec.epochs);
    for _ in 0..spec.epochs {
        let mut total = 0.0;
        let chunks = batches(set.len(), spec.batch_size, rng);
        for idx in &chunks {
            let sources = feats.batch(idx);
            let target = set.masks(idx);
            let t = teacher.map(|t| t.batch(idx));
            net.store.zero_grad();
            let (loss, _) = forward_backward(net, &sources, &target, hw, t.as_ref(), &spec.loss, false)?;
            net.store.step_adam(spec.lr, spec.adam);
            if let Some(d) = spec.polyak {
                net.store.polyak_update(d);
            }
            total += loss.total;
        }
        losses.push(total / chunks.len() as f64);
    }
    if !net.store.all_finite() {
        return Err(NnError::NonFinite("decoder parameters"));
    }
    Ok(losses)
}

/// Encoder settings for end-to-end training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderSpec {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { lr: 1e-3, momentum: 0.9 }
    }
}

/// Trains encoder and decoder jointly on raw images: Adam for the decoder,
/// SGD with momentum for the encoder. Polyak averaging covers both.
pub fn train_end_to_end<G: Rng + ?Sized>(
    net: &mut Network<f32>,
    stub: &mut EncoderStub,
    set: &ImageSet,
    spec: &TrainSpec,
    encoder: EncoderSpec,
    rng: &mut G,
) -> Result<Vec<f64>, NnError> {
    let hw = (set.size, set.size);
    if spec.polyak.is_some() {
        net.store.polyak_reset();
        stub.store.polyak_reset();
    }
    let mut losses = Vec::with_capacity(spec.epochs);
    for _ in 0..spec.epochs {
        let mut total = 0.0;
        let chunks = batches(set.len(), spec.batch_size, rng);
        for idx in &chunks {
            let pass = stub.forward(&set.images(idx), Mode::Train);
            let target = set.masks(idx);
            net.store.zero_grad();
            stub.store.zero_grad();
            let (loss, grads) = forward_backward(net, &pass.outputs, &target, hw, None, &spec.loss, true)?;
            stub.backward(&pass, grads.expect("source gradients requested"));
            net.store.step_adam(spec.lr, spec.adam);
            stub.store.step_sgd_momentum(encoder.lr, encoder.momentum);
            if let Some(d) = spec.polyak {
                net.store.polyak_update(d);
                stub.store.polyak_update(d);
            }
            total += loss.total;
        }
        losses.push(total / chunks.len() as f64);
    }
    if !net.store.all_finite() || !stub.store.all_finite() {
        return Err(NnError::NonFinite("network parameters"));
    }
    Ok(losses)
}

/// Confusion matrix of the main output over raw images, encoder included.
pub fn evaluate_images(
    net: &mut Network<f32>,
    stub: &mut EncoderStub,
    set: &ImageSet,
    batch: usize,
) -> Result<ConfusionMatrix, NnError> {
    let mut cm = ConfusionMatrix::new(net.ir().num_classes, BACKGROUND as usize);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let feats = stub.forward(&set.images(chunk), Mode::Eval).outputs;
        let pass = net.forward(&feats, Mode::Eval)?;
        score_logits(pass.main_logits(), &set.masks(chunk), set.size, &mut cm);
    }
    Ok(cm)
}

/// Accumulates predictions at mask resolution into `cm`.
pub fn score_logits(logits: &Tensor<f32>, target: &[u8], size: usize, cm: &mut ConfusionMatrix) {
    let up = crate::nn::kernels::upsample_bilinear(logits, size, size);
    cm.accumulate(target, &up.argmax_channels())
        .expect("predictions and masks share one resolution");
}

/// Confusion matrix of the main output over `set`, in eval mode.
pub fn evaluate(
    net: &mut Network<f32>,
    feats: &FeatureStore,
    set: &ImageSet,
    batch: usize,
) -> Result<ConfusionMatrix, NnError> {
    let mut cm = ConfusionMatrix::new(net.ir().num_classes, BACKGROUND as usize);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let pass = net.forward(&feats.batch(chunk), Mode::Eval)?;
        score_logits(pass.main_logits(), &set.masks(chunk), set.size, &mut cm);
    }
    Ok(cm)
}

/// Runs `f` with Polyak-averaged weights swapped in when `enabled`.
pub fn with_polyak<T>(
    net: &mut Network<f32>,
    enabled: bool,
    f: impl FnOnce(&mut Network<f32>) -> T,
) -> T {
    if !enabled {
        return f(net);
    }
    net.store.polyak_swap_in().expect("live weights in place");
    let out = f(net);
    net.store.polyak_swap_out().expect("averaged weights in place");
    out
}
