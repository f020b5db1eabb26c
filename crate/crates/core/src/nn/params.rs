//! Parameter slots, optimizer rules and Polyak averaging.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
#[allow(unused_imports)]
use num_traits::Float;

use super::{NnError, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId(pub usize);

/// Trainable weights receive gradients; buffers (batch-norm running
/// statistics) are only written by forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Weight,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: SlotKind,
    pub value: Vec<R>,
    pub grad: Vec<R>,
    /// Polyak running average of `value`.
    pub shadow: Vec<R>,
    /// First moment (Adam) or velocity (SGD momentum).
    pub m: Vec<R>,
    /// Second moment (Adam).
    pub v: Vec<R>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-3,
        }
    }
}

/// All parameters of one model component, updated as a single optimizer group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<R> {
    slots: Vec<ParamSlot<R>>,
    adam_steps: u64,
    swapped: bool,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            adam_steps: 0,
            swapped: false,
        }
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, kind: SlotKind, value: Vec<R>) -> SlotId {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "slot {name} shape");
        let n = value.len();
        self.slots.push(ParamSlot {
            name,
            shape,
            kind,
            shadow: value.clone(),
            value,
            grad: vec![R::zero(); n],
            m: vec![R::zero(); n],
            v: vec![R::zero(); n],
        });
        SlotId(self.slots.len() - 1)
    }

    /// Xavier-uniform weight with the given fans.
    pub fn add_xavier<G: Rng + ?Sized>(
        &mut self,
        name: String,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut G,
    ) -> SlotId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| R::lit(rng.random_range(-limit..limit)))
            .collect();
        self.add(name, shape, SlotKind::Weight, value)
    }

    pub fn add_const(&mut self, name: String, len: usize, kind: SlotKind, v: f64) -> SlotId {
        self.add(name, vec![len], kind, vec![R::lit(v); len])
    }

    pub fn slots(&self) -> &[ParamSlot<R>] {
        &self.slots
    }

    pub fn slot(&self, id: SlotId) -> &ParamSlot<R> {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: SlotId) -> &mut ParamSlot<R> {
        &mut self.slots[id.0]
    }

    pub fn value(&self, id: SlotId) -> &[R] {
        &self.slots[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<SlotId> {
        self.slots.iter().position(|s| s.name == name).map(SlotId)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_weights(&self) -> usize {
        self.weights().map(|s| s.value.len()).sum()
    }

    fn weights(&self) -> impl Iterator<Item = &ParamSlot<R>> {
        self.slots.iter().filter(|s| s.kind == SlotKind::Weight)
    }

    fn weights_mut(&mut self) -> impl Iterator<Item = &mut ParamSlot<R>> {
        self.slots.iter_mut().filter(|s| s.kind == SlotKind::Weight)
    }

    pub fn zero_grad(&mut self) {
        for s in self.slots.iter_mut() {
            s.grad.iter_mut().for_each(|g| *g = R::zero());
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.weights()
            .flat_map(|s| s.grad.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(|s| s.value.iter().all(|v| v.is_finite()))
    }

    /// `buf <- momentum * buf + grad; value <- value - lr * buf`.
    pub fn step_sgd_momentum(&mut self, lr: f64, momentum: f64) {
        let lr = R::lit(lr);
        let mu = R::lit(momentum);
        for s in self.weights_mut() {
            for ((p, g), b) in s.value.iter_mut().zip(&s.grad).zip(s.m.iter_mut()) {
                *b = mu * *b + *g;
                *p -= lr * *b;
            }
        }
    }

    /// Bias-corrected Adam step.
    pub fn step_adam(&mut self, lr: f64, cfg: AdamConfig) {
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (R::lit(cfg.beta1), R::lit(cfg.beta2));
        let (ob1, ob2) = (R::lit(1.0 - cfg.beta1), R::lit(1.0 - cfg.beta2));
        let step = R::lit(lr / c1);
        let c2 = R::lit(c2);
        let eps = R::lit(cfg.eps);
        for s in self.weights_mut() {
            for (((p, &g), m), v) in s
                .value
                .iter_mut()
                .zip(&s.grad)
                .zip(s.m.iter_mut())
                .zip(s.v.iter_mut())
            {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            }
        }
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_steps
    }

    /// Restarts optimizer moments (used at stage boundaries).
    pub fn reset_optimizer(&mut self) {
        self.adam_steps = 0;
        for s in self.slots.iter_mut() {
            s.m.iter_mut().for_each(|v| *v = R::zero());
            s.v.iter_mut().for_each(|v| *v = R::zero());
        }
    }

    /// Starts a new averaging window at the current values.
    pub fn polyak_reset(&mut self) {
        for s in self.weights_mut() {
            s.shadow.copy_from_slice(&s.value);
        }
    }

    /// `shadow <- decay * shadow + (1 - decay) * value`.
    pub fn polyak_update(&mut self, decay: f64) {
        let d = R::lit(decay);
        let od = R::lit(1.0 - decay);
        for s in self.weights_mut() {
            for (sh, &v) in s.shadow.iter_mut().zip(&s.value) {
                *sh = d * *sh + od * v;
            }
        }
    }

    /// Exchanges live and averaged weights.
    pub fn polyak_swap_in(&mut self) -> Result<(), NnError> {
        if self.swapped {
            return Err(NnError::AlreadySwapped);
        }
        self.swap();
        self.swapped = true;
        Ok(())
    }

    pub fn polyak_swap_out(&mut self) -> Result<(), NnError> {
        if !self.swapped {
            return Err(NnError::NotSwapped);
        }
        self.swap();
        self.swapped = false;
        Ok(())
    }

    /// Overwrites live weights with their running average.
    pub fn polyak_commit(&mut self) -> Result<(), NnError> {
        if self.swapped {
            return Err(NnError::AlreadySwapped);
        }
        for s in self.weights_mut() {
            s.value.copy_from_slice(&s.shadow);
        }
        Ok(())
    }

    pub fn is_swapped(&self) -> bool {
        self.swapped
    }

    fn swap(&mut self) {
        for s in self.weights_mut() {
            core::mem::swap(&mut s.value, &mut s.shadow);
        }
    }

    /// Copies values of every slot whose name exists in `other` with the same shape.
    pub fn copy_matching(&mut self, other: &ParamStore<R>) -> usize {
        let mut copied = 0;
        for s in self.slots.iter_mut() {
            if let Some(o) = other.slots.iter().find(|o| o.name == s.name && o.shape == s.shape) {
                s.value.copy_from_slice(&o.value);
                copied += 1;
            }
        }
        copied
    }

    /// Name, shape and values of every slot, for checkpointing.
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.slots
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone(), s.value.iter().map(|v| v.as_f64()).collect()))
            .collect()
    }

    /// Optimizer moments as `{name}.opt_m` / `{name}.opt_v` arrays, with the Adam step count.
    pub fn export_optimizer(&self) -> (u64, Vec<(String, Vec<usize>, Vec<f64>)>) {
        let mut out = Vec::with_capacity(2 * self.slots.len());
        for s in &self.slots {
            for (suffix, data) in [("opt_m", &s.m), ("opt_v", &s.v)] {
                out.push((
                    alloc::format!("{}.{suffix}", s.name),
                    s.shape.clone(),
                    data.iter().map(|v| v.as_f64()).collect(),
                ));
            }
        }
        (self.adam_steps, out)
    }

    pub fn import_optimizer(&mut self, steps: u64, arrays: &[(String, Vec<usize>, Vec<f64>)]) -> Result<(), NnError> {
        for s in self.slots.iter_mut() {
            for (suffix, dst) in [("opt_m", &mut s.m), ("opt_v", &mut s.v)] {
                let name = alloc::format!("{}.{suffix}", s.name);
                let (_, _, data) = arrays
                    .iter()
                    .find(|(n, _, _)| *n == name)
                    .ok_or_else(|| NnError::Shape(alloc::format!("missing array {name}")))?;
                if data.len() != dst.len() {
                    return Err(NnError::Shape(alloc::format!("array {name} has {} values", data.len())));
                }
                for (v, &d) in dst.iter_mut().zip(data) {
                    *v = R::lit(d);
                }
            }
        }
        self.adam_steps = steps;
        Ok(())
    }

    /// Loads values by name; every slot must be present with a matching shape.
    pub fn import(&mut self, arrays: &[(String, Vec<usize>, Vec<f64>)]) -> Result<(), NnError> {
        for s in self.slots.iter_mut() {
            let (_, shape, data) = arrays
                .iter()
                .find(|(n, _, _)| *n == s.name)
                .ok_or_else(|| NnError::Shape(alloc::format!("missing array {}", s.name)))?;
            if *shape != s.shape || data.len() != s.value.len() {
                return Err(NnError::Shape(alloc::format!("array {} has shape {:?}", s.name, shape)));
            }
            for (v, &d) in s.value.iter_mut().zip(data) {
                *v = R::lit(d);
            }
            s.shadow.copy_from_slice(&s.value);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn scalar(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x".to_string(), vec![1], SlotKind::Weight, vec![v]);
        s
    }

    #[test]
    fn sgd_plain_step() {
        let mut s = scalar(0.0);
        s.slot_mut(SlotId(0)).grad[0] = 1.0;
        s.step_sgd_momentum(0.1, 0.0);
        assert!((s.value(SlotId(0))[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut s = scalar(0.0);
        for _ in 0..2 {
            s.slot_mut(SlotId(0)).grad[0] = 1.0;
            s.step_sgd_momentum(0.1, 0.9);
        }
        // -0.1 then -0.19
        assert!((s.value(SlotId(0))[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // m = 0.1 g, v = 0.01 g^2; m_hat = g, v_hat = g^2; step = lr * g / (|g| + eps).
        for g in [0.5, -2.0, 1e-4] {
            let mut s = scalar(1.0);
            s.slot_mut(SlotId(0)).grad[0] = g;
            s.step_adam(3e-3, AdamConfig::default());
            let expected = 1.0 - 3e-3 * g / (g.abs() + 1e-3);
            assert!((s.value(SlotId(0))[0] - expected).abs() < 1e-12, "g={g}");
        }
    }

    #[test]
    fn groups_update_independently() {
        let mut enc = scalar(0.0);
        let mut dec = scalar(0.0);
        enc.slot_mut(SlotId(0)).grad[0] = 1.0;
        dec.slot_mut(SlotId(0)).grad[0] = 1.0;
        enc.step_sgd_momentum(1e-3, 0.9);
        dec.step_sgd_momentum(3e-3, 0.9);
        assert!((enc.value(SlotId(0))[0] + 1e-3).abs() < 1e-15);
        assert!((dec.value(SlotId(0))[0] + 3e-3).abs() < 1e-15);
    }

    #[test]
    fn polyak_single_step() {
        let mut s = scalar(1.0);
        s.polyak_reset();
        s.slot_mut(SlotId(0)).value[0] = 2.0;
        s.polyak_update(0.9);
        assert!((s.slot(SlotId(0)).shadow[0] - 1.1).abs() < 1e-12);
        s.polyak_update(0.0);
        assert_eq!(s.slot(SlotId(0)).shadow[0], 2.0);
    }

    #[test]
    fn polyak_closed_form() {
        for decay in [0.9, 0.99] {
            let mut s = scalar(-3.0);
            s.polyak_reset();
            s.slot_mut(SlotId(0)).value[0] = 0.75;
            for k in 1..=50 {
                s.polyak_update(decay);
                let gap = (s.slot(SlotId(0)).shadow[0] - 0.75).abs();
                assert!((gap - decay.powi(k) * 3.75).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn swap_round_trip_and_errors() {
        let mut s = scalar(1.0);
        s.polyak_reset();
        s.slot_mut(SlotId(0)).value[0] = 5.0;
        s.polyak_update(0.5);
        let before = s.clone();
        s.polyak_swap_in().unwrap();
        assert_eq!(s.value(SlotId(0))[0], 3.0);
        assert_eq!(s.polyak_swap_in(), Err(NnError::AlreadySwapped));
        s.polyak_swap_out().unwrap();
        assert_eq!(s, before);
        assert_eq!(s.polyak_swap_out(), Err(NnError::NotSwapped));
    }
}
