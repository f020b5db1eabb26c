//! JSON-lines search log: a header carrying the effective configuration, one
//! line per evaluated architecture, and a footer written when the run ends.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use thiserror::Error;

use segnas_core::graph::AuxHead;
use segnas_core::search::{Ablation, ArchRecord, SearchMode};

pub const LOG_FORMAT: u64 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },
    #[error("{path}: log is truncated ({records} architecture lines, no footer)")]
    Truncated { path: PathBuf, records: usize },
}

pub fn record_to_json(r: &ArchRecord) -> Value {
    json!({
        "type": "arch",
        "index": r.index,
        "genome": r.genome,
        "reward1": r.reward1,
        "continued": r.continued,
        "reward2": r.reward2,
        "final_reward": r.final_reward,
        "p_at_decision": r.p_at_decision,
        "running_mean": r.running_mean,
        "seconds_stage1": r.seconds_stage1,
        "seconds_stage2": r.seconds_stage2,
        "mode": r.mode.name(),
        "polyak": r.ablation.polyak,
        "kd": r.ablation.kd,
        "aux": r.ablation.aux.name(),
        "flagged": r.flagged,
    })
}

pub fn record_from_json(v: &Value) -> Result<ArchRecord, String> {
    let f64_of = |k: &str| v.get(k).and_then(Value::as_f64).ok_or_else(|| format!("missing number `{k}`"));
    let opt_f64 = |k: &str| match v.get(k) {
        Some(Value::Null) => Ok(None),
        Some(x) => x.as_f64().map(Some).ok_or_else(|| format!("`{k}` is not a number")),
        None => Err(format!("missing `{k}`")),
    };
    let bool_of = |k: &str| v.get(k).and_then(Value::as_bool).ok_or_else(|| format!("missing bool `{k}`"));
    let str_of = |k: &str| v.get(k).and_then(Value::as_str).ok_or_else(|| format!("missing string `{k}`"));
    Ok(ArchRecord {
        index: v.get("index").and_then(Value::as_u64).ok_or("missing `index`")? as usize,
        genome: str_of("genome")?.to_string(),
        reward1: f64_of("reward1")?,
        continued: bool_of("continued")?,
        reward2: opt_f64("reward2")?,
        final_reward: f64_of("final_reward")?,
        p_at_decision: f64_of("p_at_decision")?,
        running_mean: opt_f64("running_mean")?,
        seconds_stage1: f64_of("seconds_stage1")?,
        seconds_stage2: f64_of("seconds_stage2")?,
        mode: SearchMode::parse(str_of("mode")?).ok_or("unknown mode")?,
        ablation: Ablation {
            polyak: bool_of("polyak")?,
            kd: bool_of("kd")?,
            aux: AuxHead::parse(str_of("aux")?).ok_or("unknown aux head")?,
        },
        flagged: bool_of("flagged")?,
    })
}

/// Parsed log contents.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub path: PathBuf,
    pub header: Value,
    pub records: Vec<ArchRecord>,
    pub footer: Option<Value>,
}

impl RunLog {
    /// Reads a log. Malformed lines and out-of-order indices are errors; a
    /// missing footer is not (see [`RunLog::require_complete`]).
    pub fn read(path: &Path) -> Result<Self, LogError> {
        let io_err = |source| LogError::Io {
            path: path.to_path_buf(),
            source,
        };
        let bad = |line: usize, msg: String| LogError::Malformed {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let file = File::open(path).map_err(io_err)?;
        let mut header = None;
        let mut footer = None;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let no = i + 1;
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Value = serde_json::from_str(&line).map_err(|e| bad(no, format!("not JSON ({e}); the log may be cut mid-line")))?;
            if footer.is_some() {
                return Err(bad(no, "content after footer".into()));
            }
            match v.get("type").and_then(Value::as_str) {
                Some("header") if header.is_none() && no == 1 => header = Some(v),
                Some("header") => return Err(bad(no, "unexpected header".into())),
                Some("arch") if header.is_some() => {
                    let r = record_from_json(&v).map_err(|m| bad(no, m))?;
                    if r.index != records.len() {
                        return Err(bad(no, format!("architecture index {} where {} was expected", r.index, records.len())));
                    }
                    records.push(r);
                }
                Some("footer") if header.is_some() => footer = Some(v),
                _ => return Err(bad(no, "expected a header first, then architecture lines and a footer".into())),
            }
        }
        let header = header.ok_or_else(|| bad(1, "missing header".into()))?;
        if header.get("format").and_then(Value::as_u64) != Some(LOG_FORMAT) {
            return Err(bad(1, format!("unsupported log format (expected {LOG_FORMAT})")));
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            records,
            footer,
        })
    }

    pub fn require_complete(&self) -> Result<(), LogError> {
        let Some(footer) = &self.footer else {
            return Err(LogError::Truncated {
                path: self.path.clone(),
                records: self.records.len(),
            });
        };
        let declared = footer.get("architectures").and_then(Value::as_u64);
        if declared != Some(self.records.len() as u64) {
            return Err(LogError::Malformed {
                path: self.path.clone(),
                line: 0,
                msg: format!("footer declares {declared:?} architectures, found {}", self.records.len()),
            });
        }
        Ok(())
    }

    pub fn mode(&self) -> Option<SearchMode> {
        self.header.get("mode").and_then(Value::as_str).and_then(SearchMode::parse)
    }
}

/// Appends whole lines and flushes after every batch.
pub struct LogWriter {
    path: PathBuf,
    file: File,
}

impl LogWriter {
    /// Creates (or replaces) a log starting with `header`.
    pub fn create(path: &Path, mode: SearchMode, config: Value) -> Result<Self, LogError> {
        let file = File::create(path).map_err(|source| LogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut w = Self {
            path: path.to_path_buf(),
            file,
        };
        w.write_lines(&[json!({ "type": "header", "format": LOG_FORMAT, "mode": mode.name(), "config": config })])?;
        Ok(w)
    }

    pub fn append_to(path: &Path) -> Result<Self, LogError> {
        let file = OpenOptions::new().append(true).open(path).map_err(|source| LogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, records: &[ArchRecord]) -> Result<(), LogError> {
        let lines: Vec<Value> = records.iter().map(record_to_json).collect();
        self.write_lines(&lines)
    }

    pub fn finish(mut self, architectures: usize, top_k: &[(String, f64)]) -> Result<(), LogError> {
        let top: Vec<Value> = top_k.iter().map(|(g, r)| json!({ "genome": g, "final_reward": r })).collect();
        self.write_lines(&[json!({ "type": "footer", "architectures": architectures, "top_k": top })])
    }

    fn write_lines(&mut self, lines: &[Value]) -> Result<(), LogError> {
        let mut buf = String::new();
        for l in lines {
            buf.push_str(&l.to_string());
            buf.push('\n');
        }
        self.file
            .write_all(buf.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|source| LogError::Io {
                path: self.path.clone(),
                source,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(index: usize) -> ArchRecord {
        ArchRecord {
            index,
            genome: "[[[0,0],[0,0],[0,0]],[0,[0,0,0,0],[0,0,0,0],[0,0,0,0]]]".into(),
            reward1: 0.25,
            continued: index.is_multiple_of(2),
            reward2: index.is_multiple_of(2).then_some(0.3),
            final_reward: if index.is_multiple_of(2) { 0.3 } else { 0.25 },
            p_at_decision: 0.9,
            running_mean: (index > 0).then_some(0.2),
            seconds_stage1: 1.5,
            seconds_stage2: 0.5,
            mode: SearchMode::Rl,
            ablation: Ablation::default(),
            flagged: false,
        }
    }

    #[test]
    fn records_round_trip_through_json() {
        for i in 0..3 {
            assert_eq!(record_from_json(&record_to_json(&rec(i))).unwrap(), rec(i));
        }
    }

    #[test]
    fn complete_and_truncated_logs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut w = LogWriter::create(&path, SearchMode::Rl, json!({"k": 1})).unwrap();
        w.append(&[rec(0), rec(1)]).unwrap();
        drop(w);
        let partial = RunLog::read(&path).unwrap();
        assert_eq!(partial.records.len(), 2);
        assert!(matches!(partial.require_complete(), Err(LogError::Truncated { records: 2, .. })));

        let mut w = LogWriter::append_to(&path).unwrap();
        w.append(&[rec(2)]).unwrap();
        w.finish(3, &[("g".into(), 0.3)]).unwrap();
        let full = RunLog::read(&path).unwrap();
        full.require_complete().unwrap();
        assert_eq!(full.mode(), Some(SearchMode::Rl));

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 10]).unwrap();
        assert!(RunLog::read(&path).is_err());
    }

    #[test]
    fn index_gaps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut w = LogWriter::create(&path, SearchMode::Rl, json!({})).unwrap();
        w.append(&[rec(0), rec(2)]).unwrap();
        assert!(matches!(RunLog::read(&path), Err(LogError::Malformed { line: 3, .. })));
    }
}
