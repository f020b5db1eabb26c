//! Progressive two-stage evaluation of sampled decoders, the early-termination
//! gate and the batch bookkeeping of the outer search loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::controller::{Controller, ControllerConfig, ControllerError, PpoStats, Rollout};
use crate::genome::Genome;
use crate::graph::{AuxHead, GraphIR};
use crate::metrics::{ConfusionMatrix, SegScores};
use crate::nn::{AdamConfig, LossSpec, Network, NnError};
use crate::tasks::{EncoderStub, TaskArtifacts};
use crate::train::{self, EncoderSpec, TrainSpec};

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("log does not match this run: {0}")]
    Replay(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Rl,
    Random,
}

impl SearchMode {
    pub fn name(self) -> &'static str {
        match self {
            SearchMode::Rl => "rl",
            SearchMode::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rl" => Some(SearchMode::Rl),
            "random" => Some(SearchMode::Random),
            _ => None,
        }
    }
}

/// Training-speed components that can be switched off for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub polyak: bool,
    pub kd: bool,
    pub aux: AuxHead,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            polyak: true,
            kd: true,
            aux: AuxHead::Cell,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PSchedule {
    /// Straight line from `p_start` at the first architecture to `p_end` at the last.
    Linear,
    Constant,
}

impl PSchedule {
    pub fn name(self) -> &'static str {
        match self {
            PSchedule::Linear => "linear",
            PSchedule::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(PSchedule::Linear),
            "constant" => Some(PSchedule::Constant),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub total_architectures: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub p_start: f64,
    pub p_end: f64,
    pub p_schedule: PSchedule,
    /// Polyak decay of stage 1 and stage 2.
    pub polyak_decays: (f64, f64),
    pub kd_coeff: f64,
    pub aux_coeff: f64,
    pub mode: SearchMode,
    pub ablation: Ablation,
    pub adapt_channels: usize,
    pub batch_size: usize,
    pub decoder_lr: f64,
    pub adam: AdamConfig,
    pub encoder: EncoderSpec,
    pub eval_batch: usize,
    pub seed: u64,
    pub top_k: usize,
    pub controller: ControllerConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            total_architectures: 300,
            stage1_epochs: 5,
            stage2_epochs: 1,
            p_start: 0.9,
            p_end: 0.5,
            p_schedule: PSchedule::Linear,
            polyak_decays: (0.9, 0.99),
            kd_coeff: 0.3,
            aux_coeff: 0.3,
            mode: SearchMode::Rl,
            ablation: Ablation::default(),
            adapt_channels: 48,
            batch_size: 64,
            decoder_lr: 3e-3,
            adam: AdamConfig::default(),
            encoder: EncoderSpec::default(),
            eval_batch: 16,
            seed: 0,
            top_k: 10,
            controller: ControllerConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let err = |m: &str| Err(SearchError::Config(m.into()));
        if self.total_architectures == 0 {
            return err("total_architectures must be positive");
        }
        if self.stage1_epochs == 0 {
            return err("stage1_epochs must be positive");
        }
        for p in [self.p_start, self.p_end] {
            if !(0.0..=1.0).contains(&p) {
                return err("continuation probabilities must lie in [0, 1]");
            }
        }
        for d in [self.polyak_decays.0, self.polyak_decays.1] {
            if !(0.0..1.0).contains(&d) {
                return err("polyak decays must lie in [0, 1)");
            }
        }
        if self.kd_coeff < 0.0 || self.aux_coeff < 0.0 {
            return err("loss coefficients must be non-negative");
        }
        if self.adapt_channels == 0 || self.batch_size < 2 || self.eval_batch == 0 {
            return err("adapt_channels and eval_batch must be positive, batch_size at least 2");
        }
        if !(self.decoder_lr > 0.0 && self.encoder.lr > 0.0) {
            return err("learning rates must be positive");
        }
        if self.controller.batch_size == 0 {
            return err("controller batch_size must be positive");
        }
        Ok(())
    }

    /// Continuation probability for below-mean architecture `index`.
    pub fn p_at(&self, index: usize) -> f64 {
        match self.p_schedule {
            PSchedule::Constant => self.p_start,
            PSchedule::Linear if self.total_architectures <= 1 => self.p_start,
            PSchedule::Linear => {
                let t = index.min(self.total_architectures - 1) as f64 / (self.total_architectures - 1) as f64;
                self.p_start + (self.p_end - self.p_start) * t
            }
        }
    }

    fn stage_spec(&self, epochs: usize, polyak: f64, kd: bool) -> TrainSpec {
        TrainSpec {
            epochs,
            batch_size: self.batch_size,
            lr: self.decoder_lr,
            adam: self.adam,
            polyak: self.ablation.polyak.then_some(polyak),
            loss: LossSpec {
                kd_coeff: if kd { self.kd_coeff } else { 0.0 },
                aux_coeffs: vec![self.aux_coeff],
            },
        }
    }
}

/// Mean of all stage-1 rewards seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningMean {
    pub count: u64,
    pub mean: f64,
}

impl RunningMean {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
    }

    pub fn get(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }
}

/// Early-termination gate: above-mean architectures always continue, the rest
/// continue with probability `p`. The first architecture always continues.
pub fn should_continue<G: Rng + ?Sized>(reward1: f64, running: &RunningMean, p: f64, rng: &mut G) -> bool {
    match running.get() {
        None => true,
        Some(mean) if reward1 > mean => true,
        Some(_) => rng.random::<f64>() < p,
    }
}

/// Independent random streams per purpose and architecture, so results never
/// depend on evaluation order or worker count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Controller = 1,
    Sample = 2,
    Stage1 = 3,
    Gate = 4,
    Stage2 = 5,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stream as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

fn reward_or_zero(cm: &ConfusionMatrix) -> (f64, bool) {
    match cm.reward() {
        Ok(r) if r.is_finite() => (r, false),
        _ => (0.0, true),
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub reward1: f64,
    /// Training diverged or the reward was undefined; the reward is 0.
    pub flagged: bool,
    pub losses: Vec<f64>,
    pub network: Network<f32>,
}

/// Decoder-only training on cached encoder features, scored on meta-val.
pub fn evaluate_stage1<G: Rng + ?Sized>(
    genome: &Genome,
    art: &TaskArtifacts,
    cfg: &SearchConfig,
    rng: &mut G,
) -> Result<Stage1Outcome, SearchError> {
    let ir = GraphIR::build(genome, art.sources(), cfg.adapt_channels, art.num_classes(), cfg.ablation.aux);
    let mut network = Network::new(ir, rng);
    let spec = cfg.stage_spec(cfg.stage1_epochs, cfg.polyak_decays.0, cfg.ablation.kd);
    let teacher = cfg.ablation.kd.then_some(&art.teacher_logits);
    let losses = match train::train_decoder(&mut network, &art.train_feats, &art.splits.meta_train, teacher, &spec, rng) {
        Ok(l) => l,
        Err(NnError::NonFinite(_)) => {
            return Ok(Stage1Outcome {
                reward1: 0.0,
                flagged: true,
                losses: Vec::new(),
                network,
            })
        }
        Err(e) => return Err(e.into()),
    };
    let cm = train::with_polyak(&mut network, cfg.ablation.polyak, |n| {
        train::evaluate(n, &art.val_feats, &art.splits.meta_val, cfg.eval_batch)
    })?;
    let (reward1, flagged) = reward_or_zero(&cm);
    Ok(Stage1Outcome {
        reward1,
        flagged,
        losses,
        network,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Outcome {
    pub reward2: f64,
    pub flagged: bool,
}

/// End-to-end training of encoder and decoder, starting from the stage-1
/// (averaged) decoder weights and the frozen stub. No distillation.
pub fn evaluate_stage2<G: Rng + ?Sized>(
    mut network: Network<f32>,
    art: &TaskArtifacts,
    cfg: &SearchConfig,
    rng: &mut G,
) -> Result<Stage2Outcome, SearchError> {
    if cfg.ablation.polyak {
        network.store.polyak_commit()?;
    }
    network.store.reset_optimizer();
    let mut stub: EncoderStub = art.stub.clone();
    let spec = cfg.stage_spec(cfg.stage2_epochs, cfg.polyak_decays.1, false);
    match train::train_end_to_end(&mut network, &mut stub, &art.splits.meta_train, &spec, cfg.encoder, rng) {
        Ok(_) => {}
        Err(NnError::NonFinite(_)) => {
            return Ok(Stage2Outcome {
                reward2: 0.0,
                flagged: true,
            })
        }
        Err(e) => return Err(e.into()),
    }
    if cfg.ablation.polyak {
        network.store.polyak_swap_in()?;
        stub.store.polyak_swap_in()?;
    }
    let cm = train::evaluate_images(&mut network, &mut stub, &art.splits.meta_val, cfg.eval_batch)?;
    let (reward2, flagged) = reward_or_zero(&cm);
    Ok(Stage2Outcome { reward2, flagged })
}

/// One row of the search log.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchRecord {
    pub index: usize,
    /// Canonical genome text.
    pub genome: String,
    pub reward1: f64,
    pub continued: bool,
    pub reward2: Option<f64>,
    pub final_reward: f64,
    pub p_at_decision: f64,
    /// Mean of earlier stage-1 rewards that the gate compared against.
    pub running_mean: Option<f64>,
    pub seconds_stage1: f64,
    pub seconds_stage2: f64,
    pub mode: SearchMode,
    pub ablation: Ablation,
    pub flagged: bool,
}

/// Architecture proposed for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub genome: Genome,
    pub rollout: Option<Rollout>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub continued: bool,
    pub p: f64,
    pub running_mean: Option<f64>,
}

/// Evaluations of one candidate, before they are turned into a log row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub reward1: f64,
    pub reward2: Option<f64>,
    pub flagged: bool,
    pub seconds_stage1: f64,
    pub seconds_stage2: f64,
}

/// Search progress: controller, running mean and completed records. Batches
/// are proposed, gated in index order and completed as a unit.
#[derive(Debug, Clone)]
pub struct SearchState {
    cfg: SearchConfig,
    controller: Option<Controller>,
    running: RunningMean,
    records: Vec<ArchRecord>,
    ppo: Vec<PpoStats>,
}

impl SearchState {
    pub fn new(cfg: SearchConfig) -> Result<Self, SearchError> {
        cfg.validate()?;
        let controller = match cfg.mode {
            SearchMode::Rl => Some(Controller::new(
                cfg.controller.clone(),
                &mut stream_rng(cfg.seed, Stream::Controller, 0),
            )),
            SearchMode::Random => None,
        };
        Ok(Self {
            cfg,
            controller,
            running: RunningMean::default(),
            records: Vec::new(),
            ppo: Vec::new(),
        })
    }

    /// Rebuilds the state after `records`, starting from a controller
    /// checkpoint taken after some earlier batch (or a fresh controller) and
    /// replaying the remaining updates from the logged rewards.
    pub fn resume(cfg: SearchConfig, records: &[ArchRecord], controller: Option<Controller>) -> Result<Self, SearchError> {
        let mut state = Self::new(cfg)?;
        let batch = state.batch_len();
        let complete = records.len() / batch * batch;
        if complete != records.len() && records.len() < state.cfg.total_architectures {
            return Err(SearchError::Replay(format!(
                "{} records do not form whole batches of {batch}",
                records.len()
            )));
        }
        let mut skip = 0;
        if let (Some(c), SearchMode::Rl) = (controller, state.cfg.mode) {
            skip = c.updates() as usize;
            state.controller = Some(c);
        }
        for (b, chunk) in records.chunks(batch).enumerate() {
            if b < skip {
                let cands: Vec<Candidate> = chunk
                    .iter()
                    .map(|r| Candidate {
                        index: r.index,
                        genome: Genome::decode(&r.genome).expect("logged genome"),
                        rollout: None,
                    })
                    .collect();
                state.replay_gates(&cands, chunk)?;
                state.records.extend_from_slice(chunk);
                continue;
            }
            let cands = state.next_batch();
            for (c, r) in cands.iter().zip(chunk) {
                if c.index != r.index || c.genome.canonicalize().encode() != r.genome {
                    return Err(SearchError::Replay(format!(
                        "architecture {} was {} in the log but resamples as {}",
                        r.index,
                        r.genome,
                        c.genome.canonicalize().encode()
                    )));
                }
            }
            state.replay_gates(&cands, chunk)?;
            state.complete(&cands, chunk.to_vec())?;
        }
        Ok(state)
    }

    fn replay_gates(&mut self, cands: &[Candidate], chunk: &[ArchRecord]) -> Result<(), SearchError> {
        let r1: Vec<f64> = chunk.iter().map(|r| r.reward1).collect();
        let gates = self.gate(cands, &r1);
        for (g, r) in gates.iter().zip(chunk) {
            if g.continued != r.continued {
                return Err(SearchError::Replay(format!("gate decision of architecture {} differs", r.index)));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn controller(&self) -> Option<&Controller> {
        self.controller.as_ref()
    }

    pub fn records(&self) -> &[ArchRecord] {
        &self.records
    }

    pub fn ppo_history(&self) -> &[PpoStats] {
        &self.ppo
    }

    pub fn running_mean(&self) -> RunningMean {
        self.running
    }

    pub fn is_done(&self) -> bool {
        self.records.len() >= self.cfg.total_architectures
    }

    fn batch_len(&self) -> usize {
        self.cfg.controller.batch_size
    }

    /// Next batch of candidates; empty once the budget is spent.
    pub fn next_batch(&self) -> Vec<Candidate> {
        let start = self.records.len();
        let count = self.batch_len().min(self.cfg.total_architectures.saturating_sub(start));
        let mut rng = stream_rng(self.cfg.seed, Stream::Sample, (start / self.batch_len()) as u64);
        (start..start + count)
            .map(|index| match &self.controller {
                Some(c) => {
                    let rollout = c.sample(&mut rng);
                    Candidate {
                        index,
                        genome: rollout.genome,
                        rollout: Some(rollout),
                    }
                }
                None => Candidate {
                    index,
                    genome: Genome::sample_uniform(&mut rng),
                    rollout: None,
                },
            })
            .collect()
    }

    /// Applies the gate to stage-1 rewards in index order, updating the running mean.
    pub fn gate(&mut self, cands: &[Candidate], reward1: &[f64]) -> Vec<GateDecision> {
        cands
            .iter()
            .zip(reward1)
            .map(|(c, &r)| {
                let p = self.cfg.p_at(c.index);
                let running_mean = self.running.get();
                let mut rng = stream_rng(self.cfg.seed, Stream::Gate, c.index as u64);
                let continued = should_continue(r, &self.running, p, &mut rng);
                self.running.push(r);
                GateDecision {
                    continued,
                    p,
                    running_mean,
                }
            })
            .collect()
    }

    /// Log row for a gated, fully evaluated candidate.
    pub fn record(&self, cand: &Candidate, gate: &GateDecision, eval: &Evaluation) -> ArchRecord {
        let final_reward = eval.reward2.unwrap_or(eval.reward1);
        ArchRecord {
            index: cand.index,
            genome: cand.genome.canonicalize().encode(),
            reward1: eval.reward1,
            continued: gate.continued,
            reward2: eval.reward2,
            final_reward: if final_reward.is_finite() { final_reward } else { 0.0 },
            p_at_decision: gate.p,
            running_mean: gate.running_mean,
            seconds_stage1: eval.seconds_stage1,
            seconds_stage2: eval.seconds_stage2,
            mode: self.cfg.mode,
            ablation: self.cfg.ablation,
            flagged: eval.flagged,
        }
    }

    /// Stores the batch's records and, in rl mode, updates the controller on
    /// their final rewards.
    pub fn complete(&mut self, cands: &[Candidate], records: Vec<ArchRecord>) -> Result<Option<PpoStats>, SearchError> {
        let mut stats = None;
        if let Some(c) = self.controller.as_mut() {
            let rollouts: Vec<Rollout> = cands
                .iter()
                .map(|c| c.rollout.clone().expect("rl candidates carry rollouts"))
                .collect();
            let rewards: Vec<f64> = records.iter().map(|r| r.final_reward).collect();
            let s = c.ppo_update(&rollouts, &rewards)?;
            self.ppo.push(s);
            stats = Some(s);
        }
        self.records.extend(records);
        Ok(stats)
    }

    /// The `top_k` best distinct canonical genomes by final reward.
    pub fn top_k(&self) -> Vec<(String, f64)> {
        top_k(&self.records, self.cfg.top_k)
    }
}

pub fn top_k(records: &[ArchRecord], k: usize) -> Vec<(String, f64)> {
    let mut sorted: Vec<&ArchRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.final_reward.total_cmp(&a.final_reward).then(a.index.cmp(&b.index)));
    let mut out: Vec<(String, f64)> = Vec::with_capacity(k);
    for r in sorted {
        if out.len() == k {
            break;
        }
        if !out.iter().any(|(g, _)| *g == r.genome) {
            out.push((r.genome.clone(), r.final_reward));
        }
    }
    out
}

/// Sequential evaluation of one batch: stage 1, gate, stage 2. `clock`
/// returns seconds and is only used for the timing columns.
pub fn evaluate_batch(
    state: &mut SearchState,
    cands: &[Candidate],
    art: &TaskArtifacts,
    clock: &mut dyn FnMut() -> f64,
) -> Result<Vec<ArchRecord>, SearchError> {
    let cfg = state.config().clone();
    let mut stage1 = Vec::with_capacity(cands.len());
    for c in cands {
        let t = clock();
        let out = evaluate_stage1(&c.genome, art, &cfg, &mut stream_rng(cfg.seed, Stream::Stage1, c.index as u64))?;
        stage1.push((out, clock() - t));
    }
    let r1: Vec<f64> = stage1.iter().map(|(o, _)| o.reward1).collect();
    let gates = state.gate(cands, &r1);
    let mut records = Vec::with_capacity(cands.len());
    for ((c, g), (out, s1)) in cands.iter().zip(&gates).zip(stage1) {
        let mut eval = Evaluation {
            reward1: out.reward1,
            reward2: None,
            flagged: out.flagged,
            seconds_stage1: s1,
            seconds_stage2: 0.0,
        };
        if g.continued && cfg.stage2_epochs > 0 {
            let t = clock();
            let s2 = evaluate_stage2(out.network, art, &cfg, &mut stream_rng(cfg.seed, Stream::Stage2, c.index as u64))?;
            eval.seconds_stage2 = clock() - t;
            eval.reward2 = Some(s2.reward2);
            eval.flagged |= s2.flagged;
        }
        records.push(state.record(c, g, &eval));
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullTrainConfig {
    pub stage_epochs: Vec<usize>,
    /// Auxiliary loss coefficient of each stage.
    pub aux_coeffs: Vec<f64>,
    pub arm: AuxHead,
    pub adapt_channels: usize,
    pub decoder_lr: f64,
    pub adam: AdamConfig,
    pub encoder: EncoderSpec,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for FullTrainConfig {
    fn default() -> Self {
        Self {
            stage_epochs: vec![8, 8, 8, 8],
            aux_coeffs: vec![0.3, 0.25, 0.2, 0.15],
            arm: AuxHead::Cell,
            adapt_channels: 64,
            decoder_lr: 3e-3,
            adam: AdamConfig::default(),
            encoder: EncoderSpec::default(),
            batch_size: 8,
            eval_batch: 16,
            seed: 0,
        }
    }
}

impl FullTrainConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.stage_epochs.is_empty() || self.stage_epochs.len() != self.aux_coeffs.len() {
            return Err(SearchError::Config("stage_epochs and aux_coeffs need one entry per stage".into()));
        }
        if self.batch_size < 2 || self.adapt_channels == 0 || self.eval_batch == 0 {
            return Err(SearchError::Config("batch_size must be at least 2, channels positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageLog {
    pub stage: usize,
    pub epochs: usize,
    pub decoder_lr: f64,
    pub encoder_lr: f64,
    pub aux_coeff: f64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FullTrainReport {
    pub genome: String,
    pub arm: AuxHead,
    pub stages: Vec<StageLog>,
    pub holdout: SegScores,
    pub holdout_reward: f64,
    /// Holdout reward after the auxiliary heads are removed.
    pub stripped_reward: f64,
    /// Trained decoder without auxiliary heads.
    pub network: Network<f32>,
    pub encoder: EncoderStub,
}

/// Longer end-to-end training of one genome on meta-train plus meta-val, in
/// stages whose learning rates halve and whose auxiliary weight follows
/// `aux_coeffs`. Scored on the holdout split.
pub fn full_train(genome: &Genome, art: &TaskArtifacts, cfg: &FullTrainConfig) -> Result<FullTrainReport, SearchError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ir = GraphIR::build(genome, art.sources(), cfg.adapt_channels, art.num_classes(), cfg.arm);
    let mut network = Network::new(ir, &mut rng);
    let mut encoder = art.stub.clone();
    let data = art.splits.meta_train.concat(&art.splits.meta_val);
    let mut stages = Vec::with_capacity(cfg.stage_epochs.len());
    for (stage, (&epochs, &aux)) in cfg.stage_epochs.iter().zip(&cfg.aux_coeffs).enumerate() {
        let scale = 0.5f64.powi(stage as i32);
        let spec = TrainSpec {
            epochs,
            batch_size: cfg.batch_size,
            lr: cfg.decoder_lr * scale,
            adam: cfg.adam,
            polyak: None,
            loss: LossSpec {
                kd_coeff: 0.0,
                aux_coeffs: vec![aux],
            },
        };
        let enc = EncoderSpec {
            lr: cfg.encoder.lr * scale,
            momentum: cfg.encoder.momentum,
        };
        let losses = train::train_end_to_end(&mut network, &mut encoder, &data, &spec, enc, &mut rng)?;
        stages.push(StageLog {
            stage,
            epochs,
            decoder_lr: spec.lr,
            encoder_lr: enc.lr,
            aux_coeff: aux,
            losses,
        });
    }
    let cm = train::evaluate_images(&mut network, &mut encoder, &art.splits.holdout, cfg.eval_batch)?;
    let holdout = cm
        .scores()
        .map_err(|e| SearchError::Config(format!("holdout split has no foreground: {e}")))?;
    let mut stripped = network.strip_aux();
    let stripped_reward = train::evaluate_images(&mut stripped, &mut encoder, &art.splits.holdout, cfg.eval_batch)?
        .reward()
        .unwrap_or(0.0);
    Ok(FullTrainReport {
        genome: genome.canonicalize().encode(),
        arm: cfg.arm,
        stages,
        holdout,
        holdout_reward: holdout.reward(),
        stripped_reward,
        network: stripped,
        encoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_runs_from_start_to_end() {
        let cfg = SearchConfig {
            total_architectures: 5,
            ..SearchConfig::default()
        };
        let ps: Vec<f64> = (0..5).map(|i| cfg.p_at(i)).collect();
        assert_eq!(ps[0], 0.9);
        assert!((ps[4] - 0.5).abs() < 1e-12);
        assert!(ps.windows(2).all(|w| w[1] < w[0]));
        let flat = SearchConfig {
            p_schedule: PSchedule::Constant,
            ..cfg
        };
        assert_eq!(flat.p_at(4), 0.9);
    }

    #[test]
    fn running_mean_matches_batch_mean() {
        let mut m = RunningMean::default();
        assert_eq!(m.get(), None);
        for x in [0.2, 0.4, 0.9] {
            m.push(x);
        }
        assert!((m.get().unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(m.count, 3);
    }

    #[test]
    fn gate_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let empty = RunningMean::default();
        assert!(should_continue(0.0, &empty, 0.0, &mut rng));
        let mut m = RunningMean::default();
        m.push(0.4);
        for _ in 0..1000 {
            assert!(should_continue(0.5, &m, 0.0, &mut rng));
        }
        assert!(!should_continue(0.3, &m, 0.0, &mut rng));
        assert!(should_continue(0.3, &m, 1.0, &mut rng));
        // Ties with the mean are not above it.
        assert!(!should_continue(0.4, &m, 0.0, &mut rng));
    }

    #[test]
    fn below_mean_termination_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = RunningMean::default();
        m.push(0.4);
        let n = 10_000;
        let stopped = (0..n).filter(|_| !should_continue(0.3, &m, 0.9, &mut rng)).count();
        let freq = stopped as f64 / n as f64;
        assert!((freq - 0.1).abs() <= 0.01, "termination frequency {freq}");
    }

    #[test]
    fn top_k_is_distinct_and_sorted() {
        let rec = |index: usize, genome: &str, r: f64| ArchRecord {
            index,
            genome: genome.into(),
            reward1: r,
            continued: false,
            reward2: None,
            final_reward: r,
            p_at_decision: 0.9,
            running_mean: None,
            seconds_stage1: 0.0,
            seconds_stage2: 0.0,
            mode: SearchMode::Random,
            ablation: Ablation::default(),
            flagged: false,
        };
        let records = [rec(0, "a", 0.2), rec(1, "b", 0.5), rec(2, "a", 0.7), rec(3, "c", 0.1)];
        let top = top_k(&records, 2);
        assert_eq!(top, vec![("a".into(), 0.7), ("b".into(), 0.5)]);
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        let bad = SearchConfig {
            p_end: 1.5,
            ..SearchConfig::default()
        };
        assert!(matches!(bad.validate(), Err(SearchError::Config(_))));
    }

    #[test]
    fn random_mode_has_no_controller_and_proposes_full_batches() {
        let cfg = SearchConfig {
            mode: SearchMode::Random,
            total_architectures: 12,
            ..SearchConfig::default()
        };
        let mut s = SearchState::new(cfg).unwrap();
        assert!(s.controller().is_none());
        let b = s.next_batch();
        assert_eq!(b.len(), 8);
        assert_eq!(b, s.next_batch());
        let gates = s.gate(&b, &[0.5; 8]);
        assert!(gates[0].continued && gates[0].running_mean.is_none());
        let records: Vec<ArchRecord> = b
            .iter()
            .zip(&gates)
            .map(|(c, g)| {
                let e = Evaluation {
                    reward1: 0.5,
                    reward2: None,
                    flagged: false,
                    seconds_stage1: 0.0,
                    seconds_stage2: 0.0,
                };
                s.record(c, g, &e)
            })
            .collect();
        assert_eq!(s.complete(&b, records).unwrap(), None);
        let tail = s.next_batch();
        assert_eq!(tail.len(), 4);
        assert_eq!(tail[0].index, 8);
    }
}
