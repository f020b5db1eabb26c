//! Desk-scale stand-ins for the real datasets: a synthetic shape-labelling
//! task, a frozen convolutional encoder stub and a distillation teacher.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::genome::Genome;
use crate::graph::{AuxHead, FeatureDesc, GraphIR};
use crate::nn::kernels::{self, ConvGeom};
use crate::nn::loss::cross_entropy;
use crate::nn::units::{ConvCache, ConvUnit};
use crate::nn::{AdamConfig, LossSpec, Mode, Network, NnError, ParamStore, Tensor};
use crate::train;

pub const IMAGE_CHANNELS: usize = 3;
pub const BACKGROUND: u8 = 0;
const SPLIT_SALT: u64 = 0x5eed_0f5a_11e7;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("feature cache was built by encoder {found:016x}, current encoder is {expected:016x}")]
    StubMismatch { expected: u64, found: u64 },
    #[error("teacher reached holdout reward {reward:.4} after {epochs} epochs, below {threshold}")]
    TeacherTooWeak { reward: f64, epochs: usize, threshold: f64 },
    #[error("invalid task config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Shape kinds, in class order (class = index + 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Rectangle,
    Triangle,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disk, Shape::Rectangle, Shape::Triangle, Shape::Ring];

    pub fn class(self) -> u8 {
        self as u8 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskConfig {
    pub image_size: usize,
    /// Including background.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Images divided between meta-train and meta-val.
    pub train_images: usize,
    pub meta_val_fraction: f64,
    pub holdout_images: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            num_classes: 5,
            min_shapes: 1,
            max_shapes: 4,
            noise: 0.1,
            train_images: 512,
            meta_val_fraction: 0.1,
            holdout_images: 128,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        let err = |m: &str| Err(TaskError::Config(m.into()));
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return err("image_size must be a positive multiple of 16");
        }
        if self.num_classes != Shape::ALL.len() + 1 {
            return err("num_classes must be 5 (background plus four shapes)");
        }
        if self.min_shapes > self.max_shapes {
            return err("min_shapes exceeds max_shapes");
        }
        if !(0.0..1.0).contains(&self.meta_val_fraction) {
            return err("meta_val_fraction must lie in [0, 1)");
        }
        let val = self.meta_val_count();
        if val == 0 || val >= self.train_images {
            return err("split leaves meta-train or meta-val empty");
        }
        Ok(())
    }

    pub fn meta_val_count(&self) -> usize {
        (self.train_images as f64 * self.meta_val_fraction).round() as usize
    }
}

/// Images (NCHW, f32) with per-pixel labels, addressed by position.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub size: usize,
    /// Generation index of every image; disjoint across splits.
    pub ids: Vec<u32>,
    pub pixels: Vec<f32>,
    pub masks: Vec<u8>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn image_len(&self) -> usize {
        IMAGE_CHANNELS * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        let n = self.size * self.size;
        &self.masks[i * n..(i + 1) * n]
    }

    pub fn images(&self, idx: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new([idx.len(), IMAGE_CHANNELS, self.size, self.size], data)
    }

    pub fn masks(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().flat_map(|&i| self.mask(i).iter().copied()).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> ImageSet {
        ImageSet {
            size: self.size,
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            pixels: idx.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            masks: self.masks(idx),
        }
    }

    /// Batch with an independent random flip/quarter-turn applied to every
    /// image and its mask. The shape distribution is invariant under these.
    pub fn augmented<G: Rng + ?Sized>(&self, idx: &[usize], rng: &mut G) -> (Tensor<f32>, Vec<u8>) {
        let s = self.size;
        let plane = s * s;
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        let mut masks = Vec::with_capacity(idx.len() * plane);
        for &i in idx {
            let k = rng.random_range(0..8u8);
            let src = |y: usize, x: usize| dihedral(k, s, y, x);
            let img = self.image(i);
            for c in 0..IMAGE_CHANNELS {
                for y in 0..s {
                    for x in 0..s {
                        let (sy, sx) = src(y, x);
                        data.push(img[c * plane + sy * s + sx]);
                    }
                }
            }
            let m = self.mask(i);
            for y in 0..s {
                for x in 0..s {
                    let (sy, sx) = src(y, x);
                    masks.push(m[sy * s + sx]);
                }
            }
        }
        (Tensor::new([idx.len(), IMAGE_CHANNELS, s, s], data), masks)
    }

    pub fn concat(&self, other: &ImageSet) -> ImageSet {
        assert_eq!(self.size, other.size, "image sizes differ");
        let mut out = self.clone();
        out.ids.extend_from_slice(&other.ids);
        out.pixels.extend_from_slice(&other.pixels);
        out.masks.extend_from_slice(&other.masks);
        out
    }

    /// Pixel count per class.
    pub fn class_counts(&self, num_classes: usize) -> Vec<u64> {
        let mut out = vec![0u64; num_classes];
        for &m in &self.masks {
            out[m as usize] += 1;
        }
        out
    }
}

/// Source pixel of `(y, x)` under dihedral element `k` of an `s`×`s` square:
/// `k % 4` quarter turns, mirrored when `k >= 4`.
fn dihedral(k: u8, s: usize, y: usize, x: usize) -> (usize, usize) {
    let (mut y, mut x) = if k >= 4 { (y, s - 1 - x) } else { (y, x) };
    for _ in 0..k % 4 {
        (y, x) = (x, s - 1 - y);
    }
    (y, x)
}

/// Renders one image and its mask. Later shapes occlude earlier ones.
pub fn render<G: Rng + ?Sized>(cfg: &SyntheticTaskConfig, rng: &mut G) -> (Vec<f32>, Vec<u8>) {
    let s = cfg.image_size;
    let sf = s as f64;
    let mut mask = vec![BACKGROUND; s * s];
    let mut color = vec![[0.0f64; 3]; s * s];
    let bg = [rng.random_range(0.0..0.3), rng.random_range(0.0..0.3), rng.random_range(0.0..0.3)];
    color.iter_mut().for_each(|c| *c = bg);
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    for _ in 0..count {
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let cx = rng.random_range(0.15 * sf..0.85 * sf);
        let cy = rng.random_range(0.15 * sf..0.85 * sf);
        let r = rng.random_range(0.12 * sf..0.25 * sf);
        // Disks and rings share a warm palette, rectangles and triangles a
        // cool one; telling the members of a pair apart takes shape context.
        let strong = rng.random_range(0.65..1.0);
        let weak = [rng.random_range(0.25..0.6), rng.random_range(0.25..0.6)];
        let fill = match shape {
            Shape::Disk | Shape::Ring => [strong, weak[0], weak[1]],
            Shape::Rectangle | Shape::Triangle => [weak[0], weak[1], strong],
        };
        let half = [rng.random_range(0.5 * r..r), rng.random_range(0.5 * r..r)];
        let theta: f64 = rng.random_range(0.0..core::f64::consts::TAU);
        let corners: Vec<(f64, f64)> = (0..3)
            .map(|k| {
                let a = theta + k as f64 * core::f64::consts::TAU / 3.0;
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        for y in 0..s {
            for x in 0..s {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (dx, dy) = (px - cx, py - cy);
                let d = (dx * dx + dy * dy).sqrt();
                let inside = match shape {
                    Shape::Disk => d <= r,
                    Shape::Ring => d <= r && d >= 0.55 * r,
                    Shape::Rectangle => dx.abs() <= half[0] && dy.abs() <= half[1],
                    Shape::Triangle => in_triangle((px, py), &corners),
                };
                if inside {
                    mask[y * s + x] = shape.class();
                    color[y * s + x] = fill;
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise level");
    let mut pixels = vec![0.0f32; IMAGE_CHANNELS * s * s];
    for c in 0..IMAGE_CHANNELS {
        for p in 0..s * s {
            let n = if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            pixels[c * s * s + p] = (color[p][c] + n) as f32;
        }
    }
    (pixels, mask)
}

fn in_triangle(p: (f64, f64), t: &[(f64, f64)]) -> bool {
    let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let s = [side(t[0], t[1]), side(t[1], t[2]), side(t[2], t[0])];
    s.iter().all(|&v| v >= 0.0) || s.iter().all(|&v| v <= 0.0)
}

/// Meta-train, meta-val and holdout splits of one synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub meta_train: ImageSet,
    pub meta_val: ImageSet,
    pub holdout: ImageSet,
}

fn generate_set(cfg: &SyntheticTaskConfig, first_id: u32, count: usize) -> ImageSet {
    let s = cfg.image_size;
    let mut set = ImageSet {
        size: s,
        ids: Vec::with_capacity(count),
        pixels: Vec::with_capacity(count * IMAGE_CHANNELS * s * s),
        masks: Vec::with_capacity(count * s * s),
    };
    for k in 0..count {
        let id = first_id + k as u32;
        // Every image has its own stream so splits never depend on each other.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::from(id) + 1);
        let (p, m) = render(cfg, &mut rng);
        set.ids.push(id);
        set.pixels.extend_from_slice(&p);
        set.masks.extend_from_slice(&m);
    }
    set
}

/// Generates the task and splits the training images into disjoint
/// meta-train and meta-val sets.
pub fn generate(cfg: &SyntheticTaskConfig) -> Result<TaskSplits, TaskError> {
    cfg.validate()?;
    let all = generate_set(cfg, 0, cfg.train_images);
    let holdout = generate_set(cfg, cfg.train_images as u32, cfg.holdout_images);
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_SALT));
    let val = cfg.meta_val_count();
    let mut val_idx = order[..val].to_vec();
    let mut train_idx = order[val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(TaskSplits {
        meta_train: all.subset(&train_idx),
        meta_val: all.subset(&val_idx),
        holdout,
    })
}

/// Channels of the four encoder stages, shallow to deep.
pub const STUB_CHANNELS: [usize; 4] = [8, 16, 24, 32];

/// Four strided conv3x3 + batch-norm + ReLU stages emitting features at
/// strides 2, 4, 8 and 16.
#[derive(Debug, Clone)]
pub struct EncoderStub {
    pub store: ParamStore<f32>,
    units: Vec<ConvUnit>,
    seed: u64,
}

/// Activations of one encoder pass.
#[derive(Debug, Clone)]
pub struct StubPass {
    inputs: Vec<Tensor<f32>>,
    caches: Vec<ConvCache<f32>>,
    pub outputs: Vec<Tensor<f32>>,
}

impl EncoderStub {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = IMAGE_CHANNELS;
        let mut units = Vec::with_capacity(STUB_CHANNELS.len());
        for (k, &c) in STUB_CHANNELS.iter().enumerate() {
            let geom = ConvGeom::dense(cin, c, 3, 1).with_stride(2);
            units.push(ConvUnit::new(&mut store, &format!("enc{k}"), geom, true, false, true, &mut rng));
            cin = c;
        }
        Self { store, units, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output descriptors for square inputs of side `image_size` (a multiple of 16).
    pub fn descs(&self, image_size: usize) -> [FeatureDesc; 4] {
        core::array::from_fn(|k| {
            let stride = 2usize << k;
            FeatureDesc::new(STUB_CHANNELS[k], image_size / stride, image_size / stride, stride)
        })
    }

    pub fn forward(&mut self, x: &Tensor<f32>, mode: Mode) -> StubPass {
        let mut inputs = Vec::with_capacity(self.units.len());
        let mut caches = Vec::with_capacity(self.units.len());
        let mut outputs = Vec::with_capacity(self.units.len());
        let mut cur = x.clone();
        for u in &self.units {
            let (y, c) = u.forward(&mut self.store, &cur, mode);
            inputs.push(core::mem::replace(&mut cur, y.clone()));
            caches.push(c);
            outputs.push(y);
        }
        StubPass { inputs, caches, outputs }
    }

    /// Accumulates parameter gradients given gradients of the four outputs.
    pub fn backward(&mut self, pass: &StubPass, grads: Vec<Tensor<f32>>) {
        let mut carry: Option<Tensor<f32>> = None;
        for (k, g) in grads.into_iter().enumerate().rev() {
            let mut dy = g;
            if let Some(c) = carry.take() {
                dy.add_assign(&c);
            }
            carry = self.units[k].backward(&mut self.store, &pass.inputs[k], &pass.caches[k], dy, k > 0);
        }
    }

    /// FNV-1a hash over the seed and every parameter and buffer bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(self.seed);
        for s in self.store.slots() {
            for v in &s.value {
                eat(u64::from(v.to_bits()));
            }
        }
        h
    }

    /// Brief supervised fit through a throwaway 1x1 head over all four stages,
    /// so that the frozen features carry class information. Returns per-epoch losses.
    pub fn prefit(&mut self, set: &ImageSet, epochs: usize, batch: usize, lr: f64) -> Result<Vec<f64>, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let classes = Shape::ALL.len() + 1;
        let mut head_store = ParamStore::new();
        let total: usize = STUB_CHANNELS.iter().sum();
        let head = ConvUnit::new(&mut head_store, "head", ConvGeom::dense(total, classes, 1, 1), false, true, false, &mut rng);
        let adam = AdamConfig::default();
        let mut losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut sum = 0.0;
            let chunks = train::batches(set.len(), batch, &mut rng);
            for idx in &chunks {
                let (x, target) = set.augmented(idx, &mut rng);
                self.store.zero_grad();
                head_store.zero_grad();
                let pass = self.forward(&x, Mode::Train);
                let (h, w) = (pass.outputs[0].h(), pass.outputs[0].w());
                let ups: Vec<Tensor<f32>> = pass.outputs.iter().map(|o| kernels::upsample_bilinear(o, h, w)).collect();
                let cat = kernels::concat_channels(&ups.iter().collect::<Vec<_>>());
                let (logits, hc) = head.forward(&mut head_store, &cat, Mode::Train);
                let full = kernels::upsample_bilinear(&logits, set.size, set.size);
                let (loss, dfull) = cross_entropy(&full, &target)?;
                let dlogits = kernels::upsample_bilinear_backward(&dfull, h, w);
                let dcat = head.backward(&mut head_store, &cat, &hc, dlogits, true).unwrap();
                let parts = kernels::split_channels(&dcat, &STUB_CHANNELS);
                let grads = parts
                    .iter()
                    .zip(&pass.outputs)
                    .map(|(g, o)| kernels::upsample_bilinear_backward(g, o.h(), o.w()))
                    .collect();
                self.backward(&pass, grads);
                self.store.step_adam(lr, adam);
                head_store.step_adam(lr, adam);
                sum += loss;
            }
            losses.push(sum / chunks.len() as f64);
        }
        if !self.store.all_finite() {
            return Err(NnError::NonFinite("encoder parameters"));
        }
        Ok(losses)
    }
}

/// Eval-mode encoder outputs for every image of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub fingerprint: u64,
    pub descs: [FeatureDesc; 4],
    pub ids: Vec<u32>,
    pub data: [Vec<f32>; 4],
}

impl FeatureStore {
    pub fn build(stub: &mut EncoderStub, set: &ImageSet, batch: usize) -> Self {
        let descs = stub.descs(set.size);
        let mut data: [Vec<f32>; 4] = Default::default();
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let pass = stub.forward(&set.images(chunk), Mode::Eval);
            for (d, o) in data.iter_mut().zip(&pass.outputs) {
                d.extend_from_slice(o.data());
            }
        }
        Self {
            fingerprint: stub.fingerprint(),
            descs,
            ids: set.ids.clone(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn check(&self, stub: &EncoderStub) -> Result<(), TaskError> {
        let expected = stub.fingerprint();
        if self.fingerprint != expected {
            return Err(TaskError::StubMismatch {
                expected,
                found: self.fingerprint,
            });
        }
        Ok(())
    }

    pub fn batch(&self, idx: &[usize]) -> Vec<Tensor<f32>> {
        self.descs
            .iter()
            .zip(&self.data)
            .map(|(d, data)| {
                let n = d.channels * d.pixels();
                let mut out = Vec::with_capacity(idx.len() * n);
                for &i in idx {
                    out.extend_from_slice(&data[i * n..(i + 1) * n]);
                }
                Tensor::new([idx.len(), d.channels, d.height, d.width], out)
            })
            .collect()
    }
}

/// Teacher logits at mask resolution, one map per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCache {
    pub classes: usize,
    pub size: usize,
    pub ids: Vec<u32>,
    pub data: Vec<f32>,
}

impl LogitCache {
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let n = self.classes * self.size * self.size;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor::new([idx.len(), self.classes, self.size, self.size], out)
    }
}

/// Hand-written progressive decoder: deep sources first, then each shallower
/// source joins the previous block.
pub const TEACHER_GENOME: &str = "[[[2,3],[1,4],[0,5]],[1,[0,1,5,1],[4,0,7,2],[7,4,1,6]]]";

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub adapt_channels: usize,
    pub max_epochs: usize,
    /// Holdout is scored after every this many epochs.
    pub check_every: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            adapt_channels: 16,
            max_epochs: 60,
            check_every: 5,
            batch_size: 8,
            lr: 3e-3,
            threshold: 0.75,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub network: Network<f32>,
    pub holdout_reward: f64,
    pub epochs: usize,
}

impl Teacher {
    /// Trains the fixed teacher decoder on augmented meta-train images
    /// through the frozen stub until its holdout reward reaches the threshold.
    pub fn train(
        stub: &mut EncoderStub,
        train_set: &ImageSet,
        holdout_feats: &FeatureStore,
        holdout_set: &ImageSet,
        cfg: &TeacherConfig,
    ) -> Result<Teacher, TaskError> {
        holdout_feats.check(stub)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let genome = Genome::decode(TEACHER_GENOME).expect("teacher genome is valid");
        let sources = stub.descs(train_set.size);
        let ir = GraphIR::build(&genome, sources, cfg.adapt_channels, Shape::ALL.len() + 1, AuxHead::None);
        let mut network = Network::new(ir, &mut rng);
        let loss = LossSpec {
            kd_coeff: 0.0,
            aux_coeffs: vec![0.0],
        };
        let hw = (train_set.size, train_set.size);
        let mut reward = 0.0;
        for epoch in 1..=cfg.max_epochs {
            for idx in train::batches(train_set.len(), cfg.batch_size, &mut rng) {
                let (x, target) = train_set.augmented(&idx, &mut rng);
                let feats = stub.forward(&x, Mode::Eval).outputs;
                network.store.zero_grad();
                train::forward_backward(&mut network, &feats, &target, hw, None, &loss, false)?;
                network.store.step_adam(cfg.lr, AdamConfig::default());
            }
            if epoch % cfg.check_every.max(1) != 0 && epoch != cfg.max_epochs {
                continue;
            }
            if !network.store.all_finite() {
                return Err(NnError::NonFinite("teacher parameters").into());
            }
            let cm = train::evaluate(&mut network, holdout_feats, holdout_set, 16)?;
            reward = cm.reward().unwrap_or(0.0);
            if reward >= cfg.threshold {
                return Ok(Teacher {
                    network,
                    holdout_reward: reward,
                    epochs: epoch,
                });
            }
        }
        Err(TaskError::TeacherTooWeak {
            reward,
            epochs: cfg.max_epochs,
            threshold: cfg.threshold,
        })
    }

    /// Eval-mode logits upsampled to mask resolution.
    pub fn logits(&mut self, feats: &FeatureStore, size: usize) -> Result<LogitCache, NnError> {
        let classes = self.network.ir().num_classes;
        let mut data = Vec::with_capacity(feats.len() * classes * size * size);
        let idx: Vec<usize> = (0..feats.len()).collect();
        for chunk in idx.chunks(16) {
            let pass = self.network.forward(&feats.batch(chunk), Mode::Eval)?;
            data.extend_from_slice(kernels::upsample_bilinear(pass.main_logits(), size, size).data());
        }
        Ok(LogitCache {
            classes,
            size,
            ids: feats.ids.clone(),
            data,
        })
    }
}

/// Everything the search needs from the task, built once and shared read-only.
#[derive(Debug, Clone)]
pub struct TaskArtifacts {
    pub config: SyntheticTaskConfig,
    pub splits: TaskSplits,
    pub stub: EncoderStub,
    pub train_feats: FeatureStore,
    pub val_feats: FeatureStore,
    pub holdout_feats: FeatureStore,
    pub teacher_logits: LogitCache,
    pub teacher_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubConfig {
    pub seed: u64,
    pub prefit_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prefit_epochs: 4,
            batch_size: 8,
            lr: 3e-3,
        }
    }
}

impl TaskArtifacts {
    pub fn build(task: &SyntheticTaskConfig, stub_cfg: &StubConfig, teacher_cfg: &TeacherConfig) -> Result<Self, TaskError> {
        let splits = generate(task)?;
        let mut stub = EncoderStub::new(stub_cfg.seed);
        stub.prefit(&splits.meta_train, stub_cfg.prefit_epochs, stub_cfg.batch_size, stub_cfg.lr)?;
        let train_feats = FeatureStore::build(&mut stub, &splits.meta_train, 16);
        let val_feats = FeatureStore::build(&mut stub, &splits.meta_val, 16);
        let holdout_feats = FeatureStore::build(&mut stub, &splits.holdout, 16);
        let mut teacher = Teacher::train(&mut stub, &splits.meta_train, &holdout_feats, &splits.holdout, teacher_cfg)?;
        let teacher_logits = teacher.logits(&train_feats, task.image_size)?;
        Ok(Self {
            config: task.clone(),
            splits,
            stub,
            train_feats,
            val_feats,
            holdout_feats,
            teacher_logits,
            teacher_reward: teacher.holdout_reward,
        })
    }

    pub fn sources(&self) -> [FeatureDesc; 4] {
        self.train_feats.descs
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ConfusionMatrix;

    fn tiny() -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            image_size: 16,
            train_images: 20,
            holdout_images: 4,
            ..SyntheticTaskConfig::default()
        }
    }

    #[test]
    fn generation_is_reproducible_and_splits_are_disjoint() {
        let a = generate(&tiny()).unwrap();
        let b = generate(&tiny()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.meta_val.len(), 2);
        assert_eq!(a.meta_train.len(), 18);
        for id in &a.meta_val.ids {
            assert!(!a.meta_train.ids.contains(id));
            assert!(!a.holdout.ids.contains(id));
        }
        let c = generate(&SyntheticTaskConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(a.meta_train.pixels, c.meta_train.pixels);
    }

    #[test]
    fn zero_shapes_give_background_masks() {
        let cfg = SyntheticTaskConfig { min_shapes: 0, max_shapes: 0, ..tiny() };
        let s = generate(&cfg).unwrap();
        assert!(s.meta_train.masks.iter().all(|&m| m == BACKGROUND));
    }

    #[test]
    fn every_class_appears() {
        let cfg = SyntheticTaskConfig {
            image_size: 32,
            train_images: 1000,
            holdout_images: 1,
            ..SyntheticTaskConfig::default()
        };
        let s = generate(&cfg).unwrap();
        let counts = s.meta_train.class_counts(5);
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn config_validation() {
        assert!(SyntheticTaskConfig::default().validate().is_ok());
        assert!(SyntheticTaskConfig { image_size: 40, ..tiny() }.validate().is_err());
        assert!(SyntheticTaskConfig { min_shapes: 3, max_shapes: 2, ..tiny() }.validate().is_err());
        assert!(SyntheticTaskConfig { train_images: 3, ..tiny() }.validate().is_err());
    }

    #[test]
    fn stub_shapes_and_fingerprint() {
        let mut stub = EncoderStub::new(3);
        for size in [16, 32, 48] {
            let x = Tensor::zeros([2, 3, size, size]);
            let pass = stub.forward(&x, Mode::Eval);
            for (o, d) in pass.outputs.iter().zip(stub.descs(size)) {
                assert_eq!(o.shape(), [2, d.channels, d.height, d.width]);
            }
        }
        assert_eq!(stub.fingerprint(), EncoderStub::new(3).fingerprint());
        assert_ne!(stub.fingerprint(), EncoderStub::new(4).fingerprint());
    }

    #[test]
    fn feature_cache_matches_fresh_forward_and_checks_version() {
        let s = generate(&tiny()).unwrap();
        let mut stub = EncoderStub::new(1);
        let store = FeatureStore::build(&mut stub, &s.meta_train, 4);
        let idx = [3usize, 7];
        let fresh = stub.forward(&s.meta_train.images(&idx), Mode::Eval);
        for (a, b) in store.batch(&idx).iter().zip(&fresh.outputs) {
            assert_eq!(a.data(), b.data());
        }
        assert!(store.check(&stub).is_ok());
        assert!(matches!(store.check(&EncoderStub::new(2)), Err(TaskError::StubMismatch { .. })));
    }

    #[test]
    fn prefit_reduces_loss() {
        let s = generate(&SyntheticTaskConfig { train_images: 40, ..tiny() }).unwrap();
        let mut stub = EncoderStub::new(0);
        let losses = stub.prefit(&s.meta_train, 4, 8, 3e-3).unwrap();
        assert!(losses[3] < losses[0], "{losses:?}");
    }

    #[test]
    fn confusion_over_split_counts_every_pixel() {
        let s = generate(&tiny()).unwrap();
        let mut cm = ConfusionMatrix::new(5, 0);
        cm.accumulate(&s.holdout.masks, &s.holdout.masks).unwrap();
        assert_eq!(cm.total(), (4 * 16 * 16) as u64);
    }
}
