//! Parametric building blocks shared by the decoder, encoder stub and teacher.

use alloc::format;
use alloc::string::String;
use alloc::vec;

use rand::Rng;

use super::kernels::{self, BnCache, ConvGeom};
use super::params::{ParamStore, SlotId, SlotKind};
use super::{Real, Tensor};
use crate::genome::OpCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnSlots {
    pub gamma: SlotId,
    pub beta: SlotId,
    pub mean: SlotId,
    pub var: SlotId,
}

/// Convolution, optional batch-norm, optional bias, optional ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvUnit {
    pub geom: ConvGeom,
    pub weight: SlotId,
    pub bn: Option<BnSlots>,
    pub bias: Option<SlotId>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub struct ConvCache<R> {
    bn: Option<BnCache<R>>,
    out: Tensor<R>,
}

impl ConvUnit {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        prefix: &str,
        geom: ConvGeom,
        bn: bool,
        bias: bool,
        relu: bool,
        rng: &mut G,
    ) -> Self {
        let weight = store.add_xavier(
            format!("{prefix}.w"),
            vec![geom.cout, geom.cin / geom.groups, geom.k, geom.k],
            geom.fan_in(),
            geom.fan_out(),
            rng,
        );
        let bn = bn.then(|| BnSlots {
            gamma: store.add_const(format!("{prefix}.bn.gamma"), geom.cout, SlotKind::Weight, 1.0),
            beta: store.add_const(format!("{prefix}.bn.beta"), geom.cout, SlotKind::Weight, 0.0),
            mean: store.add_const(format!("{prefix}.bn.mean"), geom.cout, SlotKind::Buffer, 0.0),
            var: store.add_const(format!("{prefix}.bn.var"), geom.cout, SlotKind::Buffer, 1.0),
        });
        let bias = bias.then(|| store.add_const(format!("{prefix}.b"), geom.cout, SlotKind::Weight, 0.0));
        Self {
            geom,
            weight,
            bn,
            bias,
            relu,
        }
    }

    pub fn forward<R: Real>(&self, store: &mut ParamStore<R>, x: &Tensor<R>, mode: Mode) -> (Tensor<R>, ConvCache<R>) {
        let mut y = kernels::conv2d(x, store.value(self.weight), &self.geom);
        if let Some(b) = self.bias {
            kernels::add_bias(&mut y, store.value(b));
        }
        let mut bn_cache = None;
        if let Some(bn) = self.bn {
            let (out, cache) = match mode {
                Mode::Train => {
                    let mut mean = core::mem::take(&mut store.slot_mut(bn.mean).value);
                    let mut var = core::mem::take(&mut store.slot_mut(bn.var).value);
                    let r = kernels::batch_norm_train(&y, store.value(bn.gamma), store.value(bn.beta), &mut mean, &mut var);
                    store.slot_mut(bn.mean).value = mean;
                    store.slot_mut(bn.var).value = var;
                    r
                }
                Mode::Eval => kernels::batch_norm_eval(
                    &y,
                    store.value(bn.gamma),
                    store.value(bn.beta),
                    store.value(bn.mean),
                    store.value(bn.var),
                ),
            };
            y = out;
            bn_cache = Some(cache);
        }
        if self.relu {
            kernels::relu_inplace(&mut y);
        }
        (y.clone(), ConvCache { bn: bn_cache, out: y })
    }

    pub fn backward<R: Real>(
        &self,
        store: &mut ParamStore<R>,
        x: &Tensor<R>,
        cache: &ConvCache<R>,
        mut dy: Tensor<R>,
        need_dx: bool,
    ) -> Option<Tensor<R>> {
        if self.relu {
            kernels::relu_backward_inplace(&mut dy, &cache.out);
        }
        if let (Some(bn), Some(bc)) = (self.bn, cache.bn.as_ref()) {
            let mut dg = core::mem::take(&mut store.slot_mut(bn.gamma).grad);
            let mut db = core::mem::take(&mut store.slot_mut(bn.beta).grad);
            dy = kernels::batch_norm_backward(&dy, bc, store.value(bn.gamma), &mut dg, &mut db);
            store.slot_mut(bn.gamma).grad = dg;
            store.slot_mut(bn.beta).grad = db;
        }
        if let Some(b) = self.bias {
            kernels::bias_backward(&dy, &mut store.slot_mut(b).grad);
        }
        let mut dw = core::mem::take(&mut store.slot_mut(self.weight).grad);
        let dx = kernels::conv2d_backward(x, store.value(self.weight), &dy, &self.geom, &mut dw, need_dx);
        store.slot_mut(self.weight).grad = dw;
        dx
    }
}

/// One table operation realized as op -> batch-norm -> ReLU (skip and zero have no parameters).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpUnit {
    Conv(ConvUnit),
    /// Depthwise then pointwise, each followed by batch-norm and ReLU.
    Sep(ConvUnit, ConvUnit),
    /// Global average pool, 1x1 conv on the pooled map, broadcast back.
    Gap(ConvUnit),
    Skip,
    Zero,
}

#[derive(Debug, Clone)]
pub enum OpCache<R> {
    Conv(ConvCache<R>),
    Sep { mid: Tensor<R>, dw: ConvCache<R>, pw: ConvCache<R> },
    Gap { pooled: Tensor<R>, conv: ConvCache<R> },
    None,
}

impl OpUnit {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        prefix: &str,
        op: OpCode,
        channels: usize,
        rng: &mut G,
    ) -> Self {
        let c = channels;
        match op {
            OpCode::Skip => OpUnit::Skip,
            OpCode::Zero => OpUnit::Zero,
            OpCode::Gap => OpUnit::Gap(ConvUnit::new(store, prefix, ConvGeom::dense(c, c, 1, 1), true, false, true, rng)),
            op if op.is_separable() => {
                let (k, d) = op.kernel().unwrap();
                let dw = ConvUnit::new(store, &format!("{prefix}.dw"), ConvGeom::depthwise(c, k, d), true, false, true, rng);
                let pw = ConvUnit::new(store, &format!("{prefix}.pw"), ConvGeom::dense(c, c, 1, 1), true, false, true, rng);
                OpUnit::Sep(dw, pw)
            }
            op => {
                let (k, d) = op.kernel().unwrap();
                OpUnit::Conv(ConvUnit::new(store, prefix, ConvGeom::dense(c, c, k, d), true, false, true, rng))
            }
        }
    }

    pub fn forward<R: Real>(&self, store: &mut ParamStore<R>, x: &Tensor<R>, mode: Mode) -> (Tensor<R>, OpCache<R>) {
        match self {
            OpUnit::Skip => (x.clone(), OpCache::None),
            OpUnit::Zero => (Tensor::zeros(x.shape()), OpCache::None),
            OpUnit::Conv(u) => {
                let (y, c) = u.forward(store, x, mode);
                (y, OpCache::Conv(c))
            }
            OpUnit::Sep(dw, pw) => {
                let (mid, cd) = dw.forward(store, x, mode);
                let (y, cp) = pw.forward(store, &mid, mode);
                (y, OpCache::Sep { mid, dw: cd, pw: cp })
            }
            OpUnit::Gap(u) => {
                let pooled = kernels::global_avg_pool(x);
                let (z, c) = u.forward(store, &pooled, mode);
                let y = kernels::upsample_bilinear(&z, x.h(), x.w());
                (y, OpCache::Gap { pooled, conv: c })
            }
        }
    }

    /// Input gradient, or `None` when the operation does not depend on its input.
    pub fn backward<R: Real>(
        &self,
        store: &mut ParamStore<R>,
        x: &Tensor<R>,
        cache: &OpCache<R>,
        dy: Tensor<R>,
    ) -> Option<Tensor<R>> {
        match (self, cache) {
            (OpUnit::Skip, _) => Some(dy),
            (OpUnit::Zero, _) => None,
            (OpUnit::Conv(u), OpCache::Conv(c)) => u.backward(store, x, c, dy, true),
            (OpUnit::Sep(dw, pw), OpCache::Sep { mid, dw: cd, pw: cp }) => {
                let dmid = pw.backward(store, mid, cp, dy, true).unwrap();
                dw.backward(store, x, cd, dmid, true)
            }
            (OpUnit::Gap(u), OpCache::Gap { pooled, conv }) => {
                let dz = kernels::upsample_bilinear_backward(&dy, 1, 1);
                let dp = u.backward(store, pooled, conv, dz, true).unwrap();
                Some(kernels::global_avg_pool_backward(&dp, x.h(), x.w()))
            }
            _ => panic!("operation cache does not match unit"),
        }
    }
}

/// Slot-name prefix for graph node `id`.
pub fn node_prefix(id: u32) -> String {
    format!("n{id}")
}
