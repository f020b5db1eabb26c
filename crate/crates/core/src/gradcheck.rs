//! Central-difference checks of the analytic backward passes in `f64`.
//!
//! [`suite`] runs every operation, the heads, the shape kernels, the losses
//! and two whole decoders, and returns one relative error per checked tensor.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::genome::{Genome, OpCode};
use crate::graph::{AuxHead, FeatureDesc, GraphIR};
use crate::nn::kernels::{self, ConvGeom};
use crate::nn::loss::{cross_entropy, mse, total_loss, IGNORE_LABEL};
use crate::nn::params::SlotKind;
use crate::nn::units::{ConvUnit, OpUnit};
use crate::nn::{LossSpec, Mode, Network, ParamStore, SlotId, Tensor};

pub const STEP: f64 = 1e-5;

/// One checked gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    /// Group such as an operation abbreviation, `loss` or a genome.
    pub group: String,
    /// Tensor within the group: `input` or a parameter name.
    pub tensor: String,
    pub rel_err: f64,
}

pub fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Norm-wise relative error between analytic and numeric gradients.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Numeric gradient of `f` with respect to every element of `values`.
pub fn numeric(values: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let orig = values[i];
            values[i] = orig + STEP;
            let hi = f(values);
            values[i] = orig - STEP;
            let lo = f(values);
            values[i] = orig;
            (hi - lo) / (2.0 * STEP)
        })
        .collect()
}

fn check(group: &str, tensor: &str, rel_err: f64) -> Check {
    Check {
        group: group.to_string(),
        tensor: tensor.to_string(),
        rel_err,
    }
}

/// Input and weight gradients of a unit under the loss `<forward(x), r>`.
pub fn check_unit(
    group: &str,
    store: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    r: &Tensor<f64>,
    forward: impl Fn(&mut ParamStore<f64>, &Tensor<f64>) -> Tensor<f64>,
    backward: impl Fn(&mut ParamStore<f64>, &Tensor<f64>, Tensor<f64>) -> Option<Tensor<f64>>,
) -> Vec<Check> {
    let mut out = Vec::new();
    store.zero_grad();
    // `None` means the unit passes no gradient back, i.e. an exact zero.
    let dx = backward(store, x, r.clone())
        .map(|d| d.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.data().len()]);
    let mut xv = x.data().to_vec();
    let num = numeric(&mut xv, |v| {
        let t = Tensor::new(x.shape(), v.to_vec());
        dot(&forward(store, &t), r)
    });
    out.push(check(group, "input", rel_err(&dx, &num)));
    for i in 0..store.len() {
        if store.slots()[i].kind != SlotKind::Weight {
            continue;
        }
        let id = SlotId(i);
        let analytic = store.slot(id).grad.clone();
        let mut vals = store.value(id).to_vec();
        let name = store.slot(id).name.clone();
        let num = numeric(&mut vals, |v| {
            store.slot_mut(id).value = v.to_vec();
            dot(&forward(store, x), r)
        });
        store.slot_mut(id).value = vals;
        out.push(check(group, &name, rel_err(&analytic, &num)));
    }
    out
}

/// Every operation in training mode on a 2x4x8x8 input.
pub fn operations(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for op in OpCode::ALL {
        let mut store = ParamStore::new();
        let unit = OpUnit::new(&mut store, "op", op, 4, &mut rng);
        let x = random([2, 4, 8, 8], &mut rng);
        let r = random([2, 4, 8, 8], &mut rng);
        out.extend(check_unit(
            op.abbrev(),
            &mut store,
            &x,
            &r,
            |s, x| unit.forward(s, x, Mode::Train).0,
            |s, x, dy| {
                let (_, cache) = unit.forward(s, x, Mode::Train);
                unit.backward(s, x, &cache, dy)
            },
        ));
    }
    out
}

/// Convolution with batch-norm in evaluation mode, after populating running statistics.
pub fn eval_batch_norm(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let unit = ConvUnit::new(&mut store, "c", ConvGeom::dense(3, 4, 3, 2), true, false, true, &mut rng);
    let x = random([2, 3, 6, 6], &mut rng);
    unit.forward(&mut store, &x, Mode::Train);
    let r = random([2, 4, 6, 6], &mut rng);
    check_unit(
        "conv-bn eval",
        &mut store,
        &x,
        &r,
        |s, x| unit.forward(s, x, Mode::Eval).0,
        |s, x, dy| {
            let (_, cache) = unit.forward(s, x, Mode::Eval);
            unit.backward(s, x, &cache, dy, true)
        },
    )
}

/// Classifier, fuse and adaptation heads plus strided and depthwise convolutions.
pub fn heads(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = [
        ("classifier", ConvGeom::dense(6, 5, 1, 1), false, true, false),
        ("fuse", ConvGeom::dense(8, 3, 1, 1), true, false, true),
        ("stride2", ConvGeom::dense(3, 4, 3, 1).with_stride(2), true, false, true),
        ("depthwise", ConvGeom::depthwise(4, 5, 2), false, true, false),
    ];
    let mut out = Vec::new();
    for (label, geom, bn, bias, relu) in cases {
        let mut store = ParamStore::new();
        let unit = ConvUnit::new(&mut store, label, geom, bn, bias, relu, &mut rng);
        let x = random([2, geom.cin, 8, 8], &mut rng);
        let (y, _) = unit.forward(&mut store, &x, Mode::Train);
        let r = random(y.shape(), &mut rng);
        out.extend(check_unit(
            label,
            &mut store,
            &x,
            &r,
            |s, x| unit.forward(s, x, Mode::Train).0,
            |s, x, dy| {
                let (_, cache) = unit.forward(s, x, Mode::Train);
                unit.backward(s, x, &cache, dy, true)
            },
        ));
    }
    out
}

/// Bilinear upsampling and global average pooling.
pub fn shape_kernels(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut out = Vec::new();
    for (h, w, oh, ow) in [(3, 5, 8, 8), (4, 4, 7, 3), (8, 8, 8, 8)] {
        let x = random([2, 3, h, w], &mut rng);
        let r = random([2, 3, oh, ow], &mut rng);
        out.extend(check_unit(
            &format!("upsample {h}x{w}->{oh}x{ow}"),
            &mut store,
            &x,
            &r,
            |_, x| kernels::upsample_bilinear(x, oh, ow),
            |_, x, dy| Some(kernels::upsample_bilinear_backward(&dy, x.h(), x.w())),
        ));
    }
    let x = random([2, 3, 5, 4], &mut rng);
    let r = random([2, 3, 1, 1], &mut rng);
    out.extend(check_unit(
        "global pool",
        &mut store,
        &x,
        &r,
        |_, x| kernels::global_avg_pool(x),
        |_, x, dy| Some(kernels::global_avg_pool_backward(&dy, x.h(), x.w())),
    ));
    out
}

/// Cross-entropy with ignored pixels, distillation MSE, and the combined loss
/// with logits below mask resolution.
pub fn losses(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let logits = random([2, 5, 4, 4], &mut rng);
    let mut target: Vec<u8> = (0..32).map(|_| rng.random_range(0..5)).collect();
    target[3] = IGNORE_LABEL;
    target[17] = IGNORE_LABEL;
    let (_, g) = cross_entropy(&logits, &target).expect("matching shapes");
    let mut v = logits.data().to_vec();
    let num = numeric(&mut v, |v| {
        cross_entropy(&Tensor::new(logits.shape(), v.to_vec()), &target).expect("matching shapes").0
    });
    out.push(check("loss", "cross-entropy", rel_err(g.data(), &num)));

    let teacher = random([2, 5, 4, 4], &mut rng);
    let (_, g) = mse(&logits, &teacher);
    let num = numeric(&mut v, |v| mse(&Tensor::new(logits.shape(), v.to_vec()), &teacher).0);
    out.push(check("loss", "distillation", rel_err(g.data(), &num)));

    let main = random([2, 5, 3, 3], &mut rng);
    let aux = random([2, 5, 2, 2], &mut rng);
    let target: Vec<u8> = (0..2 * 8 * 8)
        .map(|i| if i % 11 == 0 { IGNORE_LABEL } else { rng.random_range(0..5) })
        .collect();
    let teacher = random([2, 5, 8, 8], &mut rng);
    let spec = LossSpec {
        kd_coeff: 0.3,
        aux_coeffs: vec![0.25],
    };
    let total = |m: &Tensor<f64>, a: &Tensor<f64>| {
        total_loss(m, &[a], &target, (8, 8), Some(&teacher), &spec).expect("matching shapes").0.total
    };
    let (_, grads) = total_loss(&main, &[&aux], &target, (8, 8), Some(&teacher), &spec).expect("matching shapes");
    let mut mv = main.data().to_vec();
    let num = numeric(&mut mv, |v| total(&Tensor::new(main.shape(), v.to_vec()), &aux));
    out.push(check("loss", "combined main", rel_err(grads.main.data(), &num)));
    let mut av = aux.data().to_vec();
    let num = numeric(&mut av, |v| total(&main, &Tensor::new(aux.shape(), v.to_vec())));
    out.push(check("loss", "combined aux", rel_err(grads.aux[0].data(), &num)));
    out
}

/// The deepest map stays 2x2: batch-norm over a 1x1 map with batch 2 makes
/// the preceding weights' gradients vanish and the check meaningless.
pub fn small_sources() -> [FeatureDesc; 4] {
    [
        FeatureDesc::new(3, 8, 8, 2),
        FeatureDesc::new(4, 4, 4, 4),
        FeatureDesc::new(5, 2, 2, 8),
        FeatureDesc::new(6, 2, 2, 16),
    ]
}

/// Every weight and every source gradient of two whole decoders, one with
/// auxiliary cells and one with auxiliary classifiers, under the full loss.
pub fn networks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    // No gap here: its 1x1 conv feeds batch-norm over two pooled values, so its
    // weight gradients sit at the finite-difference noise floor. The per-op
    // check covers it.
    for (text, aux) in [
        ("[[[3,0],[1,2],[4,5]],[2,[0,1,0,6],[2,0,3,7],[4,3,5,9]]]", AuxHead::Cell),
        ("[[[2,3],[3,1],[4,4]],[2,[1,0,3,6],[0,1,2,8],[2,0,6,1]]]", AuxHead::Classifier),
    ] {
        let genome = Genome::decode(text).expect("valid genome");
        let ir = GraphIR::build(&genome, small_sources(), 3, 3, aux);
        let mut net: Network<f64> = Network::new(ir, &mut rng);
        let sources: Vec<Tensor<f64>> = small_sources()
            .iter()
            .map(|d| random([2, d.channels, d.height, d.width], &mut rng))
            .collect();
        let target: Vec<u8> = (0..2 * 16 * 16).map(|_| rng.random_range(0..3)).collect();
        let teacher = random([2, 3, 16, 16], &mut rng);
        let spec = LossSpec {
            kd_coeff: 0.3,
            aux_coeffs: vec![0.3],
        };
        let loss = |net: &mut Network<f64>, sources: &[Tensor<f64>]| {
            let pass = net.forward(sources, Mode::Train).expect("valid inputs");
            let aux = pass.aux_logits();
            total_loss(pass.main_logits(), &aux, &target, (16, 16), Some(&teacher), &spec)
                .expect("matching shapes")
                .0
                .total
        };

        net.store.zero_grad();
        let pass = net.forward(&sources, Mode::Train).expect("valid inputs");
        let (_, grads) = total_loss(pass.main_logits(), &pass.aux_logits(), &target, (16, 16), Some(&teacher), &spec)
            .expect("matching shapes");
        let src_grads = net.backward(&pass, grads.main, grads.aux, true).expect("valid pass");

        let group = format!("{text} {}", aux.name());
        for i in 0..net.store.len() {
            if net.store.slots()[i].kind != SlotKind::Weight {
                continue;
            }
            let id = SlotId(i);
            let analytic = net.store.slot(id).grad.clone();
            let mut vals = net.store.value(id).to_vec();
            let name = net.store.slot(id).name.clone();
            let num = numeric(&mut vals, |v| {
                net.store.slot_mut(id).value = v.to_vec();
                loss(&mut net, &sources)
            });
            net.store.slot_mut(id).value = vals;
            out.push(check(&group, &name, rel_err(&analytic, &num)));
        }
        for k in 0..sources.len() {
            let mut v = sources[k].data().to_vec();
            let num = numeric(&mut v, |v| {
                let mut s = sources.clone();
                s[k] = Tensor::new(sources[k].shape(), v.to_vec());
                loss(&mut net, &s)
            });
            out.push(check(&group, &format!("source {k}"), rel_err(src_grads[k].data(), &num)));
        }
    }
    out
}

/// All of the above with fixed seeds.
pub fn suite() -> Vec<Check> {
    let mut out = operations(11);
    out.extend(eval_batch_norm(5));
    out.extend(heads(7));
    out.extend(shape_kernels(9));
    out.extend(losses(13));
    out.extend(networks(17));
    out
}
