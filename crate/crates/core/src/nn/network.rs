//! Executes a decoder [`GraphIR`] with owned parameters.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::params::ParamStore;
use super::units::{node_prefix, ConvCache, ConvUnit, OpCache, OpUnit};
pub use super::units::Mode;
use super::{NnError, Real, Tensor};
use crate::genome::NUM_ENCODER_OUTPUTS;
use crate::graph::{GraphIR, NodeKind};

#[derive(Debug, Clone, PartialEq, Eq)]
enum NodeUnit {
    Plain,
    Conv(ConvUnit),
    Op(OpUnit),
}

#[derive(Debug, Clone)]
enum NodeCache<R> {
    None,
    Conv(ConvCache<R>),
    Op(OpCache<R>),
}

/// Activations of one forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass<R> {
    outputs: Vec<Option<Tensor<R>>>,
    caches: Vec<NodeCache<R>>,
    main_pos: usize,
    aux_pos: Vec<usize>,
}

impl<R: Real> ForwardPass<R> {
    pub fn main_logits(&self) -> &Tensor<R> {
        self.outputs[self.main_pos].as_ref().unwrap()
    }

    pub fn aux_logits(&self) -> Vec<&Tensor<R>> {
        self.aux_pos
            .iter()
            .map(|&p| self.outputs[p].as_ref().unwrap())
            .collect()
    }
}

/// A decoder graph together with its parameters (one model instance).
#[derive(Debug, Clone)]
pub struct Network<R> {
    ir: GraphIR,
    pub store: ParamStore<R>,
    units: Vec<NodeUnit>,
}

impl<R: Real> Network<R> {
    /// Allocates Xavier-initialised parameters for every parametric node.
    pub fn new<G: Rng + ?Sized>(ir: GraphIR, rng: &mut G) -> Self {
        let mut store = ParamStore::new();
        let mut units = Vec::with_capacity(ir.nodes.len());
        for n in &ir.nodes {
            let prefix = node_prefix(n.id.0);
            let input_channels = || ir.node(n.inputs[0]).out_desc.channels;
            let c = n.out_desc.channels;
            let unit = match n.kind {
                NodeKind::Adapt | NodeKind::Fuse => NodeUnit::Conv(ConvUnit::new(
                    &mut store,
                    &prefix,
                    ConvGeom::dense(input_channels(), c, 1, 1),
                    true,
                    false,
                    true,
                    rng,
                )),
                NodeKind::Classifier | NodeKind::AuxClassifier => NodeUnit::Conv(ConvUnit::new(
                    &mut store,
                    &prefix,
                    ConvGeom::dense(input_channels(), c, 1, 1),
                    false,
                    true,
                    false,
                    rng,
                )),
                NodeKind::CellOp(op) | NodeKind::AuxCellOp(op) => {
                    NodeUnit::Op(OpUnit::new(&mut store, &prefix, op, c, rng))
                }
                NodeKind::Source(_) | NodeKind::Sum | NodeKind::Concat | NodeKind::Upsample => NodeUnit::Plain,
            };
            units.push(unit);
        }
        Self { ir, store, units }
    }

    pub fn ir(&self) -> &GraphIR {
        &self.ir
    }

    /// Same parameters restricted to the inference graph.
    pub fn strip_aux(&self) -> Network<R> {
        let ir = self.ir.strip_aux();
        let mut store = ParamStore::new();
        let mut units = Vec::new();
        // Rebuild slot ids against a fresh store holding only main-path slots.
        let mut map = vec![None; self.store.len()];
        for (i, s) in self.store.slots().iter().enumerate() {
            let keep = ir.nodes.iter().any(|n| {
                let p = node_prefix(n.id.0);
                s.name.strip_prefix(p.as_str()).is_some_and(|rest| rest.starts_with('.'))
            });
            if keep {
                map[i] = Some(store.add(s.name.clone(), s.shape.clone(), s.kind, s.value.clone()));
            }
        }
        let remap = |u: &ConvUnit| -> ConvUnit {
            let m = |id: super::SlotId| map[id.0].expect("main-path slot retained");
            ConvUnit {
                geom: u.geom,
                weight: m(u.weight),
                bn: u.bn.map(|b| super::units::BnSlots {
                    gamma: m(b.gamma),
                    beta: m(b.beta),
                    mean: m(b.mean),
                    var: m(b.var),
                }),
                bias: u.bias.map(m),
                relu: u.relu,
            }
        };
        for n in &ir.nodes {
            let pos = self.ir.position(n.id).unwrap();
            units.push(match &self.units[pos] {
                NodeUnit::Plain => NodeUnit::Plain,
                NodeUnit::Conv(u) => NodeUnit::Conv(remap(u)),
                NodeUnit::Op(OpUnit::Conv(u)) => NodeUnit::Op(OpUnit::Conv(remap(u))),
                NodeUnit::Op(OpUnit::Sep(a, b)) => NodeUnit::Op(OpUnit::Sep(remap(a), remap(b))),
                NodeUnit::Op(OpUnit::Gap(u)) => NodeUnit::Op(OpUnit::Gap(remap(u))),
                NodeUnit::Op(OpUnit::Skip) => NodeUnit::Op(OpUnit::Skip),
                NodeUnit::Op(OpUnit::Zero) => NodeUnit::Op(OpUnit::Zero),
            });
        }
        Network { ir, store, units }
    }

    /// Runs the graph on the four encoder feature maps (batched, shallow to deep).
    pub fn forward(&mut self, sources: &[Tensor<R>], mode: Mode) -> Result<ForwardPass<R>, NnError> {
        if sources.len() != NUM_ENCODER_OUTPUTS {
            return Err(NnError::Shape(alloc::format!("expected 4 sources, got {}", sources.len())));
        }
        let n_nodes = self.ir.nodes.len();
        let mut outputs: Vec<Option<Tensor<R>>> = vec![None; n_nodes];
        let mut caches = Vec::with_capacity(n_nodes);
        for pos in 0..n_nodes {
            let node = &self.ir.nodes[pos];
            let inputs: Vec<usize> = node.inputs.iter().map(|&i| self.ir.position(i).unwrap()).collect();
            let arg = |k: usize| outputs[inputs[k]].as_ref().unwrap();
            let (out, cache) = match (&node.kind, &self.units[pos]) {
                (NodeKind::Source(k), _) => {
                    let t = &sources[*k as usize];
                    let d = node.out_desc;
                    if t.c() != d.channels || t.h() != d.height || t.w() != d.width {
                        return Err(NnError::Shape(alloc::format!(
                            "source {} has shape {:?}, expected {}",
                            k,
                            t.shape(),
                            d
                        )));
                    }
                    (t.clone(), NodeCache::None)
                }
                (NodeKind::Sum, _) => {
                    let mut acc = arg(0).clone();
                    for k in 1..inputs.len() {
                        acc.add_assign(arg(k));
                    }
                    (acc, NodeCache::None)
                }
                (NodeKind::Concat, _) => {
                    let items: Vec<&Tensor<R>> = (0..inputs.len()).map(arg).collect();
                    (kernels::concat_channels(&items), NodeCache::None)
                }
                (NodeKind::Upsample, _) => {
                    let d = node.out_desc;
                    (kernels::upsample_bilinear(arg(0), d.height, d.width), NodeCache::None)
                }
                (_, NodeUnit::Conv(u)) => {
                    let (y, c) = u.forward(&mut self.store, arg(0), mode);
                    (y, NodeCache::Conv(c))
                }
                (_, NodeUnit::Op(u)) => {
                    let (y, c) = u.forward(&mut self.store, arg(0), mode);
                    (y, NodeCache::Op(c))
                }
                (kind, NodeUnit::Plain) => unreachable!("node {:?} without unit", kind),
            };
            outputs[pos] = Some(out);
            caches.push(cache);
        }
        let main_pos = self.ir.position(self.ir.main_output).unwrap();
        let aux_pos: Vec<usize> = self.ir.aux_outputs.iter().map(|&i| self.ir.position(i).unwrap()).collect();
        for &p in core::iter::once(&main_pos).chain(&aux_pos) {
            if !outputs[p].as_ref().unwrap().all_finite() {
                return Err(NnError::NonFinite("decoder logits"));
            }
        }
        Ok(ForwardPass {
            outputs,
            caches,
            main_pos,
            aux_pos,
        })
    }

    /// Accumulates parameter gradients from output gradients. Returns source
    /// gradients when `source_grads` is set.
    pub fn backward(
        &mut self,
        pass: &ForwardPass<R>,
        dmain: Tensor<R>,
        daux: Vec<Tensor<R>>,
        source_grads: bool,
    ) -> Option<Vec<Tensor<R>>> {
        let n_nodes = self.ir.nodes.len();
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; n_nodes];
        grads[pass.main_pos] = Some(dmain);
        for (&p, g) in pass.aux_pos.iter().zip(daux) {
            accumulate(&mut grads[p], g);
        }
        let mut src = if source_grads {
            Some(
                self.ir.source_descs
                    .iter()
                    .map(|_| None)
                    .collect::<Vec<Option<Tensor<R>>>>(),
            )
        } else {
            None
        };
        for pos in (0..n_nodes).rev() {
            let Some(dy) = grads[pos].take() else { continue };
            let node = &self.ir.nodes[pos];
            let inputs: Vec<usize> = node.inputs.iter().map(|&i| self.ir.position(i).unwrap()).collect();
            let arg = |k: usize| pass.outputs[inputs[k]].as_ref().unwrap();
            match (&node.kind, &self.units[pos], &pass.caches[pos]) {
                (NodeKind::Source(k), _, _) => {
                    if let Some(src) = src.as_mut() {
                        src[*k as usize] = Some(dy);
                    }
                }
                (NodeKind::Sum, _, _) => {
                    for &i in &inputs {
                        accumulate(&mut grads[i], dy.clone());
                    }
                }
                (NodeKind::Concat, _, _) => {
                    let channels: Vec<usize> = (0..inputs.len()).map(|k| arg(k).c()).collect();
                    for (&i, g) in inputs.iter().zip(kernels::split_channels(&dy, &channels)) {
                        accumulate(&mut grads[i], g);
                    }
                }
                (NodeKind::Upsample, _, _) => {
                    let x = arg(0);
                    accumulate(&mut grads[inputs[0]], kernels::upsample_bilinear_backward(&dy, x.h(), x.w()));
                }
                (kind, NodeUnit::Conv(u), NodeCache::Conv(c)) => {
                    let need_dx = source_grads || *kind != NodeKind::Adapt;
                    if let Some(dx) = u.backward(&mut self.store, arg(0), c, dy, need_dx) {
                        accumulate(&mut grads[inputs[0]], dx);
                    }
                }
                (_, NodeUnit::Op(u), NodeCache::Op(c)) => {
                    if let Some(dx) = u.backward(&mut self.store, arg(0), c, dy) {
                        accumulate(&mut grads[inputs[0]], dx);
                    }
                }
                (kind, _, _) => unreachable!("node {:?} cache mismatch", kind),
            }
        }
        src.map(|s| {
            s.into_iter()
                .zip(self.ir.source_descs.iter())
                .map(|(g, d)| g.unwrap_or_else(|| Tensor::zeros([pass.main_logits().n(), d.channels, d.height, d.width])))
                .collect()
        })
    }
}

fn accumulate<R: Real>(slot: &mut Option<Tensor<R>>, g: Tensor<R>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
