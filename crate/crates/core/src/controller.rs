//! Recurrent policy that emits genomes token by token, trained with PPO.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use thiserror::Error;

use crate::genome::{decision_schedule, Decision, Genome, NUM_OPS, NUM_TOKENS};
use crate::nn::params::SlotKind;
use crate::nn::{AdamConfig, NnError, ParamStore, SlotId};

/// Largest index pool of any decision (cell branch 2).
const INDEX_VOCAB: usize = 8;
const CONN_HEAD: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("empty rollout batch")]
    EmptyBatch,
    #[error("{rollouts} rollouts but {rewards} rewards")]
    RewardCount { rollouts: usize, rewards: usize },
    #[error("token {token} at position {pos} is outside its {choices} choices")]
    Token { pos: usize, token: u8, choices: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<NnError> for ControllerError {
    fn from(e: NnError) -> Self {
        ControllerError::Checkpoint(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub lr: f64,
    pub ppo_clip: f64,
    pub ppo_epochs: usize,
    pub batch_size: usize,
    pub baseline_decay: f64,
    pub entropy_coeff: f64,
    /// Half-width of the uniform initialisation.
    pub init_range: f64,
    pub adam: AdamConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 100,
            embed_dim: 32,
            lr: 1e-4,
            ppo_clip: 0.2,
            ppo_epochs: 3,
            batch_size: 8,
            baseline_decay: 0.95,
            entropy_coeff: 1e-4,
            init_range: 0.1,
            adam: AdamConfig {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        }
    }
}

/// One sampled architecture with the log-probabilities it was drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub genome: Genome,
    pub tokens: [u8; NUM_TOKENS],
    pub logprobs: [f64; NUM_TOKENS],
}

impl Rollout {
    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoStats {
    /// Baseline used for this batch's advantages.
    pub baseline: f64,
    pub mean_advantage: f64,
    /// Gradient norm of the first epoch.
    pub grad_norm: f64,
    /// Mean token probability ratio over the last epoch.
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    w: SlotId,
    b: SlotId,
    input: usize,
}

#[derive(Debug, Clone, Copy)]
enum Head {
    Conn,
    Cell,
    Op,
}

impl Head {
    fn of(d: Decision) -> Head {
        match d {
            Decision::ConnectivityIndex { .. } => Head::Conn,
            Decision::CellIndex { .. } => Head::Cell,
            Decision::Op => Head::Op,
        }
    }
}

/// Per-layer activations of one time step.
#[derive(Debug, Clone)]
struct LayerCache {
    /// `[x; h_prev]`.
    xh: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `i, f, g, o`, each `hidden` long.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
struct StepCache {
    layers: Vec<LayerCache>,
    h_top: Vec<f64>,
    /// Masked, renormalized distribution over the decision's valid choices.
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    store: ParamStore<f64>,
    start: SlotId,
    embed_index: SlotId,
    embed_op: SlotId,
    lstm: Vec<LayerSlots>,
    heads: [(SlotId, SlotId); 3],
    baseline: Option<f64>,
    updates: u64,
}

impl Controller {
    pub fn new<G: Rng + ?Sized>(cfg: ControllerConfig, rng: &mut G) -> Self {
        let mut store = ParamStore::new();
        let r = cfg.init_range;
        let mut add = |store: &mut ParamStore<f64>, name: &str, shape: Vec<usize>| {
            let n = shape.iter().product();
            let v = (0..n).map(|_| rng.random_range(-r..=r)).collect();
            store.add(name.to_string(), shape, SlotKind::Weight, v)
        };
        let (e, h) = (cfg.embed_dim, cfg.hidden);
        let start = add(&mut store, "embed.start", vec![e]);
        let embed_index = add(&mut store, "embed.index", vec![INDEX_VOCAB, e]);
        let embed_op = add(&mut store, "embed.op", vec![NUM_OPS, e]);
        let mut lstm = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let input = if l == 0 { e } else { h };
            let w = add(&mut store, &format!("lstm{l}.w"), vec![4 * h, input + h]);
            let b = add(&mut store, &format!("lstm{l}.b"), vec![4 * h]);
            lstm.push(LayerSlots { w, b, input });
        }
        let mut head = |name: &str, k: usize| {
            (
                add(&mut store, &format!("head.{name}.w"), vec![k, h]),
                add(&mut store, &format!("head.{name}.b"), vec![k]),
            )
        };
        let heads = [head("conn", CONN_HEAD), head("cell", INDEX_VOCAB), head("op", NUM_OPS)];
        Self {
            cfg,
            store,
            start,
            embed_index,
            embed_op,
            lstm,
            heads,
            baseline: None,
            updates: 0,
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.store
    }

    fn embedding(&self, pos: usize, tokens: &[u8]) -> &[f64] {
        let e = self.cfg.embed_dim;
        if pos == 0 {
            return self.store.value(self.start);
        }
        let prev = tokens[pos - 1] as usize;
        let table = match decision_schedule()[pos - 1] {
            Decision::Op => self.embed_op,
            _ => self.embed_index,
        };
        &self.store.value(table)[prev * e..(prev + 1) * e]
    }

    /// Advances the LSTM one step and returns the decision distribution.
    fn step(&self, pos: usize, tokens: &[u8], state: &mut [(Vec<f64>, Vec<f64>)]) -> StepCache {
        let hd = self.cfg.hidden;
        let mut x = self.embedding(pos, tokens).to_vec();
        let mut layers = Vec::with_capacity(self.lstm.len());
        for (l, ls) in self.lstm.iter().enumerate() {
            let (h_prev, c_prev) = &mut state[l];
            let mut xh = x;
            xh.extend_from_slice(h_prev);
            let w = self.store.value(ls.w);
            let b = self.store.value(ls.b);
            let cols = ls.input + hd;
            let mut gates = b.to_vec();
            for (row, z) in gates.iter_mut().enumerate() {
                let wr = &w[row * cols..(row + 1) * cols];
                *z += wr.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>();
            }
            for (k, z) in gates.iter_mut().enumerate() {
                *z = if (2 * hd..3 * hd).contains(&k) { z.tanh() } else { sigmoid(*z) };
            }
            let mut c = vec![0.0; hd];
            let mut tanh_c = vec![0.0; hd];
            let mut h = vec![0.0; hd];
            for j in 0..hd {
                c[j] = gates[hd + j] * c_prev[j] + gates[j] * gates[2 * hd + j];
                tanh_c[j] = c[j].tanh();
                h[j] = gates[3 * hd + j] * tanh_c[j];
            }
            layers.push(LayerCache {
                xh,
                c_prev: core::mem::replace(c_prev, c),
                gates,
                tanh_c,
            });
            *h_prev = h.clone();
            x = h;
        }
        let decision = decision_schedule()[pos];
        let (hw, hb) = self.heads[Head::of(decision) as usize];
        let w = self.store.value(hw);
        let b = self.store.value(hb);
        let valid = decision.choices();
        let logits: Vec<f64> = (0..valid)
            .map(|k| b[k] + w[k * hd..(k + 1) * hd].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        StepCache {
            layers,
            h_top: x,
            probs: softmax(&logits),
        }
    }

    fn zero_state(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        vec![(vec![0.0; self.cfg.hidden], vec![0.0; self.cfg.hidden]); self.lstm.len()]
    }

    /// Draws one genome.
    pub fn sample<G: Rng + ?Sized>(&self, rng: &mut G) -> Rollout {
        let mut state = self.zero_state();
        let mut tokens = [0u8; NUM_TOKENS];
        let mut logprobs = [0.0; NUM_TOKENS];
        for pos in 0..NUM_TOKENS {
            let probs = self.step(pos, &tokens, &mut state).probs;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            tokens[pos] = pick as u8;
            logprobs[pos] = probs[pick].ln();
        }
        let genome = Genome::from_tokens(&tokens).expect("masked tokens are always in range");
        Rollout {
            genome,
            tokens,
            logprobs,
        }
    }

    fn check_tokens(tokens: &[u8; NUM_TOKENS]) -> Result<(), ControllerError> {
        for (pos, (&t, d)) in tokens.iter().zip(decision_schedule()).enumerate() {
            if t as usize >= d.choices() {
                return Err(ControllerError::Token {
                    pos,
                    token: t,
                    choices: d.choices(),
                });
            }
        }
        Ok(())
    }

    fn run(&self, tokens: &[u8; NUM_TOKENS]) -> Vec<StepCache> {
        let mut state = self.zero_state();
        (0..NUM_TOKENS).map(|pos| self.step(pos, tokens, &mut state)).collect()
    }

    /// Log-probability of every token under the current policy.
    pub fn token_logprobs(&self, tokens: &[u8; NUM_TOKENS]) -> Result<[f64; NUM_TOKENS], ControllerError> {
        Self::check_tokens(tokens)?;
        let mut out = [0.0; NUM_TOKENS];
        for (pos, s) in self.run(tokens).iter().enumerate() {
            out[pos] = s.probs[tokens[pos] as usize].ln();
        }
        Ok(out)
    }

    /// Distribution of decision `prefix.len()` given the earlier tokens.
    pub fn distribution(&self, prefix: &[u8]) -> Vec<f64> {
        assert!(prefix.len() < NUM_TOKENS, "prefix covers every decision");
        let mut tokens = [0u8; NUM_TOKENS];
        tokens[..prefix.len()].copy_from_slice(prefix);
        let mut state = self.zero_state();
        let mut last = None;
        for pos in 0..=prefix.len() {
            last = Some(self.step(pos, &tokens, &mut state));
        }
        last.unwrap().probs
    }

    /// Backpropagates per-step logit gradients through heads, LSTM and embeddings.
    fn backward(&mut self, tokens: &[u8; NUM_TOKENS], steps: &[StepCache], dlogits: &[Vec<f64>]) {
        let hd = self.cfg.hidden;
        let e = self.cfg.embed_dim;
        let nl = self.lstm.len();
        let mut dh_next = vec![vec![0.0; hd]; nl];
        let mut dc_next = vec![vec![0.0; hd]; nl];
        for pos in (0..NUM_TOKENS).rev() {
            let s = &steps[pos];
            let (hw, hb) = self.heads[Head::of(decision_schedule()[pos]) as usize];
            let mut dh = dh_next[nl - 1].clone();
            {
                let w = self.store.value(hw).to_vec();
                for (k, &g) in dlogits[pos].iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    self.store.slot_mut(hb).grad[k] += g;
                    let gw = &mut self.store.slot_mut(hw).grad[k * hd..(k + 1) * hd];
                    for j in 0..hd {
                        gw[j] += g * s.h_top[j];
                        dh[j] += g * w[k * hd + j];
                    }
                }
            }
            for l in (0..nl).rev() {
                let lc = &s.layers[l];
                let ls = self.lstm[l];
                let cols = ls.input + hd;
                let (gi, gf, gg, go) = (0..hd, hd..2 * hd, 2 * hd..3 * hd, 3 * hd..4 * hd);
                let (i, f, g, o) = (&lc.gates[gi], &lc.gates[gf], &lc.gates[gg], &lc.gates[go]);
                let mut dz = vec![0.0; 4 * hd];
                let mut dc_prev = vec![0.0; hd];
                for j in 0..hd {
                    let dc = dc_next[l][j] + dh[j] * o[j] * (1.0 - lc.tanh_c[j] * lc.tanh_c[j]);
                    dz[j] = dc * g[j] * i[j] * (1.0 - i[j]);
                    dz[hd + j] = dc * lc.c_prev[j] * f[j] * (1.0 - f[j]);
                    dz[2 * hd + j] = dc * i[j] * (1.0 - g[j] * g[j]);
                    dz[3 * hd + j] = dh[j] * lc.tanh_c[j] * o[j] * (1.0 - o[j]);
                    dc_prev[j] = dc * f[j];
                }
                for (gb, &d) in self.store.slot_mut(ls.b).grad.iter_mut().zip(&dz) {
                    *gb += d;
                }
                let mut dxh = vec![0.0; cols];
                {
                    let w = self.store.value(ls.w).to_vec();
                    let gw = &mut self.store.slot_mut(ls.w).grad;
                    for (row, &d) in dz.iter().enumerate() {
                        let wr = &w[row * cols..(row + 1) * cols];
                        let gr = &mut gw[row * cols..(row + 1) * cols];
                        for c in 0..cols {
                            gr[c] += d * lc.xh[c];
                            dxh[c] += d * wr[c];
                        }
                    }
                }
                dc_next[l] = dc_prev;
                dh_next[l] = dxh[ls.input..].to_vec();
                if l > 0 {
                    // Input of layer l is layer l-1's output at the same step.
                    dh = dh_next[l - 1].iter().zip(&dxh[..ls.input]).map(|(a, b)| a + b).collect();
                } else {
                    let (slot, offset) = if pos == 0 {
                        (self.start, 0)
                    } else {
                        let prev = tokens[pos - 1] as usize;
                        match decision_schedule()[pos - 1] {
                            Decision::Op => (self.embed_op, prev * e),
                            _ => (self.embed_index, prev * e),
                        }
                    };
                    let ge = &mut self.store.slot_mut(slot).grad[offset..offset + e];
                    for (a, &b) in ge.iter_mut().zip(&dxh[..e]) {
                        *a += b;
                    }
                }
            }
        }
    }

    /// Clipped-surrogate PPO update on one batch of scored rollouts.
    pub fn ppo_update(&mut self, rollouts: &[Rollout], rewards: &[f64]) -> Result<PpoStats, ControllerError> {
        if rollouts.is_empty() {
            return Err(ControllerError::EmptyBatch);
        }
        if rollouts.len() != rewards.len() {
            return Err(ControllerError::RewardCount {
                rollouts: rollouts.len(),
                rewards: rewards.len(),
            });
        }
        for r in rollouts {
            Self::check_tokens(&r.tokens)?;
        }
        let n = rollouts.len() as f64;
        let baseline = *self
            .baseline
            .get_or_insert_with(|| rewards.iter().sum::<f64>() / n);
        let adv: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();
        let eps = self.cfg.ppo_clip;
        let beta = self.cfg.entropy_coeff;
        let mut stats = PpoStats {
            baseline,
            mean_advantage: adv.iter().sum::<f64>() / n,
            grad_norm: 0.0,
            mean_ratio: 0.0,
            clip_fraction: 0.0,
            mean_entropy: 0.0,
        };
        for epoch in 0..self.cfg.ppo_epochs {
            self.store.zero_grad();
            let (mut ratio_sum, mut clipped, mut ent_sum) = (0.0, 0usize, 0.0);
            for (r, &a) in rollouts.iter().zip(&adv) {
                let steps = self.run(&r.tokens);
                let dlogits: Vec<Vec<f64>> = steps
                    .iter()
                    .enumerate()
                    .map(|(pos, s)| {
                        let t = r.tokens[pos] as usize;
                        let logp = s.probs[t].ln();
                        let ratio = (logp - r.logprobs[pos]).exp();
                        ratio_sum += ratio;
                        let active = !((a > 0.0 && ratio > 1.0 + eps) || (a < 0.0 && ratio < 1.0 - eps));
                        if !active {
                            clipped += 1;
                        }
                        let entropy: f64 = -s.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
                        ent_sum += entropy;
                        // Loss is -(surrogate + beta * entropy) / batch.
                        let dlogp = if active { -ratio * a / n } else { 0.0 };
                        s.probs
                            .iter()
                            .enumerate()
                            .map(|(k, &p)| {
                                let onehot = if k == t { 1.0 } else { 0.0 };
                                let dent = if p > 0.0 { beta * p * (p.ln() + entropy) / n } else { 0.0 };
                                dlogp * (onehot - p) + dent
                            })
                            .collect()
                    })
                    .collect();
                self.backward(&r.tokens, &steps, &dlogits);
            }
            if epoch == 0 {
                stats.grad_norm = self.store.grad_norm();
            }
            let count = n * NUM_TOKENS as f64;
            stats.mean_ratio = ratio_sum / count;
            stats.clip_fraction = clipped as f64 / count;
            stats.mean_entropy = ent_sum / count;
            self.store.step_adam(self.cfg.lr, self.cfg.adam);
        }
        let d = self.cfg.baseline_decay;
        let mut b = baseline;
        for &r in rewards {
            b = d * b + (1.0 - d) * r;
        }
        self.baseline = Some(b);
        self.updates += 1;
        Ok(stats)
    }

    /// Parameters, optimizer moments and baseline as named arrays.
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = self.store.export();
        let (steps, opt) = self.store.export_optimizer();
        out.extend(opt);
        let meta = vec![
            steps as f64,
            self.updates as f64,
            if self.baseline.is_some() { 1.0 } else { 0.0 },
            self.baseline.unwrap_or(0.0),
        ];
        out.push(("controller.meta".to_string(), vec![4], meta));
        out
    }

    /// Restores a controller exported with the same configuration.
    pub fn import(cfg: ControllerConfig, arrays: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self, ControllerError> {
        let mut c = Self::new(cfg, &mut ZeroRng);
        c.store.import(arrays)?;
        let meta = arrays
            .iter()
            .find(|(n, _, _)| n == "controller.meta")
            .map(|(_, _, d)| d.clone())
            .ok_or_else(|| ControllerError::Checkpoint("missing controller.meta".to_string()))?;
        if meta.len() != 4 {
            return Err(ControllerError::Checkpoint("malformed controller.meta".to_string()));
        }
        c.store.import_optimizer(meta[0] as u64, arrays)?;
        c.updates = meta[1] as u64;
        c.baseline = (meta[2] != 0.0).then_some(meta[3]);
        Ok(c)
    }
}

/// Deterministic filler used only to allocate slots before import overwrites them.
struct ZeroRng;

impl rand::RngCore for ZeroRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}
