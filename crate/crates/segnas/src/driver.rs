//! Search driver: evaluates each controller batch on worker threads, appends
//! the batch to the log and checkpoints the controller. Results do not depend
//! on the worker count because every architecture draws from its own streams.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde_json::Value;
use thiserror::Error;

use segnas_core::search::{
    evaluate_stage1, evaluate_stage2, stream_rng, ArchRecord, Evaluation, SearchError, SearchMode, SearchState,
    Stream,
};
use segnas_core::tasks::TaskArtifacts;

use crate::artifacts::{self, ArtifactError};
use crate::checkpoint::Checkpoint;
use crate::config::{ConfigError, RunConfig};
use crate::log::{LogError, LogWriter, RunLog};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("cannot resume: {0}")]
    Resume(String),
}

/// Where the controller checkpoint of a log lives.
pub fn controller_dir(log: &Path) -> PathBuf {
    let mut name = log.file_name().unwrap_or_default().to_os_string();
    name.push(".controller");
    log.with_file_name(name)
}

/// Maps `f` over `items` on up to `workers` scoped threads, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item evaluated"))
        .collect()
}

/// Progress callback argument, once per finished batch.
pub struct BatchReport<'a> {
    pub records: &'a [ArchRecord],
    pub done: usize,
    pub total: usize,
    pub ppo: Option<segnas_core::controller::PpoStats>,
}

pub struct SearchOutcome {
    pub records: Vec<ArchRecord>,
    pub top_k: Vec<(String, f64)>,
}

/// Configuration sections that must match between a log and a resumed run.
fn identity(cfg: &RunConfig) -> Value {
    let mut v = cfg.to_json();
    if let Some(o) = v.as_object_mut() {
        o.remove("run");
        o.remove("full_train");
    }
    v
}

fn evaluate(
    state: &mut SearchState,
    art: &TaskArtifacts,
    workers: usize,
) -> Result<(Vec<segnas_core::search::Candidate>, Vec<ArchRecord>), SearchError> {
    let cfg = state.config().clone();
    let cands = state.next_batch();
    let stage1 = par_map(&cands, workers, |c| {
        let t = Instant::now();
        let out = evaluate_stage1(&c.genome, art, &cfg, &mut stream_rng(cfg.seed, Stream::Stage1, c.index as u64));
        out.map(|o| (o, t.elapsed().as_secs_f64()))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let r1: Vec<f64> = stage1.iter().map(|(o, _)| o.reward1).collect();
    let gates = state.gate(&cands, &r1);

    let jobs: Vec<_> = cands.iter().zip(&gates).zip(stage1).collect();
    let evals = par_map(&jobs, workers, |((c, g), (out, s1))| {
        let mut eval = Evaluation {
            reward1: out.reward1,
            reward2: None,
            flagged: out.flagged,
            seconds_stage1: *s1,
            seconds_stage2: 0.0,
        };
        if g.continued && cfg.stage2_epochs > 0 {
            let t = Instant::now();
            let s2 = evaluate_stage2(
                out.network.clone(),
                art,
                &cfg,
                &mut stream_rng(cfg.seed, Stream::Stage2, c.index as u64),
            )?;
            eval.seconds_stage2 = t.elapsed().as_secs_f64();
            eval.reward2 = Some(s2.reward2);
            eval.flagged |= s2.flagged;
        }
        Ok::<_, SearchError>(eval)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let records = cands
        .iter()
        .zip(&gates)
        .zip(&evals)
        .map(|((c, g), e)| state.record(c, g, e))
        .collect();
    Ok((cands, records))
}

/// Runs (or, with `resume`, continues) a search logged at `log_path`.
pub fn run_search(
    cfg: &RunConfig,
    art: &TaskArtifacts,
    log_path: &Path,
    resume: bool,
    progress: &mut dyn FnMut(BatchReport<'_>),
) -> Result<SearchOutcome, DriverError> {
    cfg.validate()?;
    let scfg = cfg.search_config()?;
    let ck_dir = controller_dir(log_path);
    let (mut state, mut writer) = if resume && log_path.exists() {
        let log = RunLog::read(log_path)?;
        let logged = log.header.get("config").cloned().unwrap_or(Value::Null);
        let mut logged_cfg: RunConfig = serde_json::from_value(logged)
            .map_err(|e| DriverError::Resume(format!("log header holds no usable configuration ({e})")))?;
        logged_cfg.run = cfg.run.clone();
        if identity(&logged_cfg) != identity(cfg) {
            return Err(DriverError::Resume(format!(
                "{} was written with a different configuration",
                log_path.display()
            )));
        }
        if log.footer.is_some() {
            let top_k = segnas_core::search::top_k(&log.records, scfg.top_k);
            return Ok(SearchOutcome {
                records: log.records,
                top_k,
            });
        }
        let batch = scfg.controller.batch_size;
        let controller = match scfg.mode {
            SearchMode::Rl if Checkpoint::exists(&ck_dir) => {
                let c = artifacts::load_controller(&ck_dir, scfg.controller.clone())?;
                // A checkpoint newer than the log (crash between the two writes) is unusable.
                (c.updates() as usize <= log.records.len() / batch).then_some(c)
            }
            _ => None,
        };
        let state = SearchState::resume(scfg.clone(), &log.records, controller)?;
        (state, LogWriter::append_to(log_path)?)
    } else {
        let state = SearchState::new(scfg.clone())?;
        (state, LogWriter::create(log_path, scfg.mode, cfg.to_json())?)
    };

    while !state.is_done() {
        let (cands, records) = evaluate(&mut state, art, cfg.run.workers)?;
        writer.append(&records)?;
        let ppo = state.complete(&cands, records)?;
        if let Some(c) = state.controller() {
            artifacts::save_controller(&ck_dir, c)?;
        }
        let done = state.records().len();
        progress(BatchReport {
            records: &state.records()[done - cands.len()..],
            done,
            total: scfg.total_architectures,
            ppo,
        });
    }
    let top_k = state.top_k();
    writer.finish(state.records().len(), &top_k)?;
    Ok(SearchOutcome {
        records: state.records().to_vec(),
        top_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order_for_any_worker_count() {
        let items: Vec<u64> = (0..37).collect();
        let serial: Vec<u64> = items.iter().map(|x| x * x).collect();
        for w in [1, 2, 5, 64] {
            assert_eq!(par_map(&items, w, |x| x * x), serial);
        }
        assert!(par_map(&Vec::<u64>::new(), 4, |x| *x).is_empty());
    }

    #[test]
    fn controller_dir_sits_next_to_the_log() {
        assert_eq!(controller_dir(Path::new("out/run.jsonl")), Path::new("out/run.jsonl.controller"));
    }
}
