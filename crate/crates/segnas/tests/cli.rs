use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use segnas::log::LogWriter;
use segnas_core::genome::published::{ARCH0, ARCH1};
use segnas_core::search::{Ablation, ArchRecord, SearchMode};

fn segnas(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segnas"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn record(index: usize, mode: SearchMode) -> ArchRecord {
    let r1 = (index % 10) as f64 / 20.0;
    let cont = !index.is_multiple_of(3);
    ArchRecord {
        index,
        genome: ARCH1.to_string(),
        reward1: r1,
        continued: cont,
        reward2: cont.then_some(r1 + 0.01),
        final_reward: if cont { r1 + 0.01 } else { r1 },
        p_at_decision: 0.9,
        running_mean: (index > 0).then_some(0.2),
        seconds_stage1: 1.0,
        seconds_stage2: if cont { 0.5 } else { 0.0 },
        mode,
        ablation: Ablation::default(),
        flagged: false,
    }
}

fn write_log(path: &Path, mode: SearchMode, n: usize, finish: bool) {
    let mut w = LogWriter::create(path, mode, serde_json::json!({})).unwrap();
    let recs: Vec<ArchRecord> = (0..n).map(|i| record(i, mode)).collect();
    w.append(&recs).unwrap();
    if finish {
        w.finish(n, &[]).unwrap();
    }
}

#[test]
fn decode_names_operations_by_abbreviation() {
    let dir = tempfile::tempdir().unwrap();
    let out = segnas(&["decode", ARCH0], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("op0: sep5x5 rate 6 (8)"));

    let file = dir.path().join("genomes.txt");
    fs::write(&file, format!("{ARCH0}\n{ARCH1}\n")).unwrap();
    let out = segnas(&["decode", file.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    assert!(stdout(&out).contains("output: concat of blocks 5, 6"), "{}", stdout(&out));
}

#[test]
fn invalid_genome_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = segnas(&["decode", "[[[9,9],[0,0],[0,0]],[0,[0,0,0,0],[0,0,0,0],[0,0,0,0]]]"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"));
    assert_eq!(segnas(&["no-such-command"], dir.path()).status.code(), Some(1));
}

#[test]
fn enumerate_ends_with_the_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = segnas(&["enumerate", "--out", "conn.txt"], dir.path());
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("conn.txt")).unwrap();
    let n = segnas_core::genome::enumerate_connectivities().len();
    assert_eq!(text.lines().last(), Some(format!("count={n}").as_str()));
    assert_eq!(text.lines().count(), n + 1);
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[search]\nstage3_epochs = 1\n").unwrap();
    let out = segnas(&["search", "--config", "bad.toml", "--out", "run.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("stage3_epochs"));

    let out = segnas(&["search", "--mode", "greedy", "--out", "run.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_desk_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = segnas::config::RunConfig::load(&path).unwrap();
    assert_eq!(cfg.search.total_architectures, 300);
}

#[test]
fn export_dot_writes_a_graph() {
    let dir = tempfile::tempdir().unwrap();
    let out = segnas(&["export-dot", "--genome", ARCH1, "--aux", "cell", "--out", "g.dot"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let dot = fs::read_to_string(dir.path().join("g.dot")).unwrap();
    assert!(dot.starts_with("digraph"));
    assert!(stderr(&out).contains("multiply-adds"));
}

#[test]
fn report_emits_windows_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    write_log(&dir.path().join("rl.jsonl"), SearchMode::Rl, 120, true);
    write_log(&dir.path().join("random.jsonl"), SearchMode::Random, 100, true);
    let out = segnas(&["report", "rl.jsonl", "random.jsonl", "--out", "rep"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("rep/windows.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert!(rows[0].starts_with("log,mode,first_index,last_index,count,"));
    assert_eq!(rows.iter().filter(|r| r.contains(",rl,")).count(), 3);
    assert_eq!(rows.iter().filter(|r| r.contains(",random,")).count(), 2);
    for f in ["summary.md", "rewards.svg", "stages.svg"] {
        assert!(dir.path().join("rep").join(f).exists(), "{f}");
    }
    let md = stdout(&out);
    assert!(md.contains("rl minus random"));
    assert!(md.contains("Distinct connectivity structures: 3150"));
}

#[test]
fn report_refuses_truncated_logs() {
    let dir = tempfile::tempdir().unwrap();
    write_log(&dir.path().join("cut.jsonl"), SearchMode::Rl, 30, false);
    let out = segnas(&["report", "cut.jsonl", "--out", "rep"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("truncated"), "{}", stderr(&out));
    assert!(!dir.path().join("rep").exists());
}
