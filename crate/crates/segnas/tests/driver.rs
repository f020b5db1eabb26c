use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use segnas::artifacts::{artifact_key, load_artifacts, save_artifacts};
use segnas::config::RunConfig;
use segnas::driver::{controller_dir, run_search, DriverError};
use segnas::log::RunLog;
use segnas_core::search::ArchRecord;
use segnas_core::tasks::TaskArtifacts;

const TINY: &str = r#"
[task]
image_size = 16
train_images = 40
holdout_images = 8

[stub]
prefit_epochs = 1

[teacher]
adapt_channels = 4
max_epochs = 2
check_every = 1
threshold = 0.0

[search]
total_architectures = 8
stage1_epochs = 1
stage2_epochs = 1
p_schedule = "constant"
p_start = 0.5
adapt_channels = 4
batch_size = 4
eval_batch = 8
seed = 3

[controller]
batch_size = 4
lr = 0.01
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

fn artifacts() -> &'static TaskArtifacts {
    static ART: OnceLock<TaskArtifacts> = OnceLock::new();
    ART.get_or_init(|| {
        let cfg = tiny();
        TaskArtifacts::build(&cfg.task.to_core(), &cfg.stub.to_core(), &cfg.teacher.to_core()).unwrap()
    })
}

/// Records without the wall-clock columns.
fn untimed(records: &[ArchRecord]) -> Vec<ArchRecord> {
    records
        .iter()
        .map(|r| ArchRecord {
            seconds_stage1: 0.0,
            seconds_stage2: 0.0,
            ..r.clone()
        })
        .collect()
}

fn search(cfg: &RunConfig, log: &Path, resume: bool) -> Result<Vec<ArchRecord>, DriverError> {
    run_search(cfg, artifacts(), log, resume, &mut |_| {}).map(|o| o.records)
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    let one = search(&cfg, &dir.path().join("w1.jsonl"), false).unwrap();
    cfg.run.workers = 3;
    let three = search(&cfg, &dir.path().join("w3.jsonl"), false).unwrap();
    assert_eq!(untimed(&one), untimed(&three));
    assert_eq!(one.len(), 8);
    for r in &one {
        assert!((0.0..=1.0).contains(&r.final_reward), "{r:?}");
        assert_eq!(r.reward2.is_some(), r.continued);
    }
    let log = RunLog::read(&dir.path().join("w3.jsonl")).unwrap();
    log.require_complete().unwrap();
    assert_eq!(untimed(&log.records), untimed(&one));
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full_log = dir.path().join("full.jsonl");
    let snap_log = dir.path().join("snap.jsonl");
    let cfg = tiny();
    let full = run_search(&cfg, artifacts(), &full_log, false, &mut |b| {
        if b.done == 4 {
            // Snapshot log and controller after the first batch, as if killed there.
            fs::copy(&full_log, &snap_log).unwrap();
            let (src, dst) = (controller_dir(&full_log), controller_dir(&snap_log));
            fs::create_dir_all(&dst).unwrap();
            for e in fs::read_dir(&src).unwrap() {
                let e = e.unwrap();
                fs::copy(e.path(), dst.join(e.file_name())).unwrap();
            }
        }
    })
    .unwrap()
    .records;
    assert_eq!(RunLog::read(&snap_log).unwrap().records.len(), 4);

    let resumed = search(&cfg, &snap_log, true).unwrap();
    assert_eq!(untimed(&resumed[..4]), untimed(&full[..4]));
    assert_eq!(untimed(&resumed), untimed(&full));

    // Without a controller checkpoint the updates are replayed from the log.
    let bare = dir.path().join("bare.jsonl");
    let text = fs::read_to_string(&full_log).unwrap();
    let first_batch: Vec<&str> = text.lines().take(5).collect();
    fs::write(&bare, first_batch.join("\n") + "\n").unwrap();
    assert_eq!(untimed(&search(&cfg, &bare, true).unwrap()), untimed(&full));

    // A complete log is returned as is.
    assert_eq!(untimed(&search(&cfg, &full_log, true).unwrap()), untimed(&full));
}

#[test]
fn resume_rejects_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.jsonl");
    let mut cfg = tiny();
    cfg.search.total_architectures = 4;
    search(&cfg, &log, false).unwrap();
    cfg.search.seed += 1;
    assert!(matches!(search(&cfg, &log, true), Err(DriverError::Resume(_))));
}

#[test]
fn random_mode_needs_no_controller() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("random.jsonl");
    let mut cfg = tiny();
    cfg.search.mode = "random".into();
    let recs = search(&cfg, &log, false).unwrap();
    assert_eq!(recs.len(), 8);
    assert!(!controller_dir(&log).exists());
}

#[test]
fn artifacts_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let art = artifacts();
    assert!(load_artifacts(dir.path(), &cfg).unwrap().is_none());
    save_artifacts(dir.path(), art, &artifact_key(&cfg)).unwrap();
    let back = load_artifacts(dir.path(), &cfg).unwrap().unwrap();
    assert_eq!(back.splits.holdout.pixels, art.splits.holdout.pixels);
    assert_eq!(back.splits.meta_train.masks, art.splits.meta_train.masks);
    assert_eq!(back.teacher_logits.data, art.teacher_logits.data);
    assert_eq!(back.stub.fingerprint(), art.stub.fingerprint());
    assert_eq!(back.teacher_reward, art.teacher_reward);

    let mut other = cfg.clone();
    other.task.seed += 1;
    assert!(load_artifacts(dir.path(), &other).unwrap().is_none());
}

