//! On-disk task artifacts (dataset, encoder stub, feature and logit caches)
//! and model checkpoints, all stored in the checkpoint container.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use segnas_core::controller::{Controller, ControllerConfig, ControllerError};
use segnas_core::genome::{Genome, GenomeError};
use segnas_core::graph::{AuxHead, GraphIR};
use segnas_core::nn::{Network, NnError};
use segnas_core::tasks::{
    EncoderStub, FeatureStore, ImageSet, LogitCache, TaskArtifacts, TaskError, TaskSplits,
};

use crate::checkpoint::{ArrayData, Checkpoint, CheckpointError};
use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error("{0}")]
    Format(String),
}

const SPLITS: [&str; 3] = ["meta_train", "meta_val", "holdout"];

/// Identifies what an artifact directory was built from.
pub fn artifact_key(cfg: &RunConfig) -> String {
    serde_json::json!({ "task": cfg.task, "stub": cfg.stub, "teacher": cfg.teacher }).to_string()
}

fn push_set(ck: &mut Checkpoint, name: &str, set: &ImageSet) {
    let n = set.len();
    ck.push(format!("{name}.ids"), vec![n], ArrayData::U32(set.ids.clone()));
    ck.push(format!("{name}.pixels"), vec![n, 3, set.size, set.size], ArrayData::F32(set.pixels.clone()));
    ck.push(format!("{name}.masks"), vec![n, set.size, set.size], ArrayData::U8(set.masks.clone()));
}

fn read_set(ck: &Checkpoint, name: &str, size: usize) -> Result<ImageSet, ArtifactError> {
    let set = ImageSet {
        size,
        ids: ck.u32(&format!("{name}.ids"))?.to_vec(),
        pixels: ck.f32(&format!("{name}.pixels"))?.to_vec(),
        masks: ck.u8(&format!("{name}.masks"))?.to_vec(),
    };
    if set.pixels.len() != set.len() * 3 * size * size || set.masks.len() != set.len() * size * size {
        return Err(ArtifactError::Format(format!("split {name} does not match image size {size}")));
    }
    Ok(set)
}

/// Images and masks of all splits.
pub fn save_dataset(dir: &Path, splits: &TaskSplits, size: usize, key: &str) -> Result<(), ArtifactError> {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "dataset");
    ck.set_meta("image_size", size);
    ck.set_meta("key", key);
    for (name, set) in SPLITS.iter().zip([&splits.meta_train, &splits.meta_val, &splits.holdout]) {
        push_set(&mut ck, name, set);
    }
    ck.save(dir)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<TaskSplits, ArtifactError> {
    let ck = Checkpoint::load(dir)?;
    let size: usize = ck.meta_parse("image_size")?;
    Ok(TaskSplits {
        meta_train: read_set(&ck, SPLITS[0], size)?,
        meta_val: read_set(&ck, SPLITS[1], size)?,
        holdout: read_set(&ck, SPLITS[2], size)?,
    })
}

pub fn save_stub(dir: &Path, stub: &EncoderStub) -> Result<(), ArtifactError> {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "encoder");
    ck.set_meta("seed", stub.seed());
    ck.set_meta("fingerprint", format!("{:016x}", stub.fingerprint()));
    ck.push_params("", stub.store.export());
    ck.save(dir)?;
    Ok(())
}

pub fn load_stub(dir: &Path) -> Result<EncoderStub, ArtifactError> {
    let ck = Checkpoint::load(dir)?;
    stub_from(&ck, "")
}

fn stub_from(ck: &Checkpoint, prefix: &str) -> Result<EncoderStub, ArtifactError> {
    let mut stub = EncoderStub::new(ck.meta_parse(&format!("{prefix}seed"))?);
    stub.store.import(&ck.params(prefix))?;
    Ok(stub)
}

/// Encoder outputs of one split, tagged with the encoder fingerprint.
pub fn save_features(dir: &Path, feats: &FeatureStore) -> Result<(), ArtifactError> {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "features");
    ck.set_meta("fingerprint", format!("{:016x}", feats.fingerprint));
    let n = feats.len();
    ck.push("ids", vec![n], ArrayData::U32(feats.ids.clone()));
    for (k, d) in feats.descs.iter().enumerate() {
        ck.push(
            format!("stage{k}"),
            vec![n, d.channels, d.height, d.width],
            ArrayData::F32(feats.data[k].clone()),
        );
    }
    ck.save(dir)?;
    Ok(())
}

/// Loads a feature cache and checks that `stub` produced it.
pub fn load_features(dir: &Path, stub: &EncoderStub, image_size: usize) -> Result<FeatureStore, ArtifactError> {
    let ck = Checkpoint::load(dir)?;
    let found = u64::from_str_radix(ck.meta("fingerprint")?, 16)
        .map_err(|e| ArtifactError::Format(format!("feature fingerprint: {e}")))?;
    let feats = FeatureStore {
        fingerprint: found,
        descs: stub.descs(image_size),
        ids: ck.u32("ids")?.to_vec(),
        data: [ck.f32("stage0")?.to_vec(), ck.f32("stage1")?.to_vec(), ck.f32("stage2")?.to_vec(), ck.f32("stage3")?.to_vec()],
    };
    feats.check(stub)?;
    for (k, d) in feats.descs.iter().enumerate() {
        if feats.data[k].len() != feats.len() * d.channels * d.pixels() {
            return Err(ArtifactError::Format(format!("feature stage {k} has the wrong size")));
        }
    }
    Ok(feats)
}

pub fn save_logits(dir: &Path, logits: &LogitCache, teacher_reward: f64, fingerprint: u64) -> Result<(), ArtifactError> {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "teacher_logits");
    ck.set_meta("teacher_reward", teacher_reward);
    ck.set_meta("fingerprint", format!("{fingerprint:016x}"));
    let n = logits.ids.len();
    ck.push("ids", vec![n], ArrayData::U32(logits.ids.clone()));
    ck.push(
        "logits",
        vec![n, logits.classes, logits.size, logits.size],
        ArrayData::F32(logits.data.clone()),
    );
    ck.save(dir)?;
    Ok(())
}

pub fn load_logits(dir: &Path, stub: &EncoderStub) -> Result<(LogitCache, f64), ArtifactError> {
    let ck = Checkpoint::load(dir)?;
    let found = u64::from_str_radix(ck.meta("fingerprint")?, 16)
        .map_err(|e| ArtifactError::Format(format!("logit fingerprint: {e}")))?;
    if found != stub.fingerprint() {
        return Err(TaskError::StubMismatch {
            expected: stub.fingerprint(),
            found,
        }
        .into());
    }
    let shape = &ck.get("logits")?.shape;
    let [_, classes, size, _] = shape.as_slice() else {
        return Err(ArtifactError::Format("logits must be 4-dimensional".into()));
    };
    let cache = LogitCache {
        classes: *classes,
        size: *size,
        ids: ck.u32("ids")?.to_vec(),
        data: ck.f32("logits")?.to_vec(),
    };
    Ok((cache, ck.meta_parse("teacher_reward")?))
}

pub fn save_artifacts(dir: &Path, art: &TaskArtifacts, key: &str) -> Result<(), ArtifactError> {
    save_dataset(&dir.join("dataset"), &art.splits, art.config.image_size, key)?;
    save_stub(&dir.join("encoder"), &art.stub)?;
    for (name, f) in SPLITS.iter().zip([&art.train_feats, &art.val_feats, &art.holdout_feats]) {
        save_features(&dir.join(format!("features_{name}")), f)?;
    }
    save_logits(&dir.join("teacher"), &art.teacher_logits, art.teacher_reward, art.stub.fingerprint())
}

/// Loads artifacts built for `cfg`; `Ok(None)` when the directory holds
/// nothing or artifacts of a different configuration.
pub fn load_artifacts(dir: &Path, cfg: &RunConfig) -> Result<Option<TaskArtifacts>, ArtifactError> {
    let ds = dir.join("dataset");
    if !Checkpoint::exists(&ds) {
        return Ok(None);
    }
    let header = Checkpoint::load(&ds)?;
    if header.meta("key")? != artifact_key(cfg) {
        return Ok(None);
    }
    let splits = load_dataset(&ds)?;
    let stub = load_stub(&dir.join("encoder"))?;
    let size = cfg.task.image_size;
    let feats = |name: &str| load_features(&dir.join(format!("features_{name}")), &stub, size);
    let (train_feats, val_feats, holdout_feats) = (feats(SPLITS[0])?, feats(SPLITS[1])?, feats(SPLITS[2])?);
    let (teacher_logits, teacher_reward) = load_logits(&dir.join("teacher"), &stub)?;
    Ok(Some(TaskArtifacts {
        config: cfg.task.to_core(),
        splits,
        stub,
        train_feats,
        val_feats,
        holdout_feats,
        teacher_logits,
        teacher_reward,
    }))
}

/// Cached artifacts when present and matching, otherwise built and saved.
pub fn load_or_build(dir: &Path, cfg: &RunConfig) -> Result<TaskArtifacts, ArtifactError> {
    if let Some(art) = load_artifacts(dir, cfg)? {
        return Ok(art);
    }
    let art = TaskArtifacts::build(&cfg.task.to_core(), &cfg.stub.to_core(), &cfg.teacher.to_core())?;
    save_artifacts(dir, &art, &artifact_key(cfg))?;
    Ok(art)
}

/// A trained decoder (without auxiliary heads) and its encoder.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub genome: Genome,
    pub adapt_channels: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub decoder: Network<f32>,
    pub encoder: EncoderStub,
}

impl ModelCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<(), ArtifactError> {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "model");
        ck.set_meta("genome", self.genome.canonicalize().encode());
        ck.set_meta("adapt_channels", self.adapt_channels);
        ck.set_meta("num_classes", self.num_classes);
        ck.set_meta("image_size", self.image_size);
        ck.set_meta("encoder.seed", self.encoder.seed());
        ck.push_params("decoder.", self.decoder.store.export());
        ck.push_params("encoder.", self.encoder.store.export());
        ck.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ArtifactError> {
        let ck = Checkpoint::load(dir)?;
        if ck.meta("kind")? != "model" {
            return Err(ArtifactError::Format(format!("{} is not a model checkpoint", dir.display())));
        }
        let genome = Genome::decode(ck.meta("genome")?)?;
        let adapt_channels: usize = ck.meta_parse("adapt_channels")?;
        let num_classes: usize = ck.meta_parse("num_classes")?;
        let image_size: usize = ck.meta_parse("image_size")?;
        let encoder = stub_from(&ck, "encoder.")?;
        let ir = GraphIR::build(&genome, encoder.descs(image_size), adapt_channels, num_classes, AuxHead::None);
        let mut decoder = Network::new(ir, &mut ChaCha8Rng::seed_from_u64(0));
        decoder.store.import(&ck.params("decoder."))?;
        Ok(Self {
            genome,
            adapt_channels,
            num_classes,
            image_size,
            decoder,
            encoder,
        })
    }
}

pub fn save_controller(dir: &Path, controller: &Controller) -> Result<(), ArtifactError> {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "controller");
    ck.set_meta("updates", controller.updates());
    ck.push_params("", controller.export());
    ck.save(dir)?;
    Ok(())
}

pub fn load_controller(dir: &Path, cfg: ControllerConfig) -> Result<Controller, ArtifactError> {
    let ck = Checkpoint::load(dir)?;
    if ck.meta("kind")? != "controller" {
        return Err(ArtifactError::Format(format!("{} is not a controller checkpoint", dir.display())));
    }
    Ok(Controller::import(cfg, &ck.params(""))?)
}
