//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! The two 300-architecture searches are cached under the cargo target
//! directory; a rerun resumes from the complete logs instead of searching
//! again, after checking that their configuration still matches.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segnas::artifacts::load_or_build;
use segnas::config::RunConfig;
use segnas::driver::{par_map, run_search};
use segnas::log::RunLog;
use segnas::report;
use segnas_core::controller::{Controller, ControllerConfig};
use segnas_core::genome::published::{ARCH0, ARCH1, ARCH2};
use segnas_core::genome::{enumerate_connectivities, Genome, OpCode};
use segnas_core::gradcheck;
use segnas_core::graph::{AuxHead, FeatureDesc, GraphIR, NodeId, NodeKind};
use segnas_core::metrics::{sign_test_p, spearman, ConfusionMatrix};
use segnas_core::nn::params::SlotKind;
use segnas_core::nn::{Mode, Network, ParamStore, SlotId, Tensor};
use segnas_core::search::{evaluate_stage1, should_continue, stream_rng, RunningMean, SearchConfig, Stream};
use segnas_core::tasks::TaskArtifacts;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn work_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut cfg = RunConfig::load(&path).expect("desk config");
    cfg.run.artifacts_dir = work_dir().join("artifacts");
    cfg.run.workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    cfg
}

fn genome_fidelity() -> Outcome {
    for text in [ARCH0, ARCH1, ARCH2] {
        let g = Genome::decode(text).map_err(|e| format!("{text}: {e}"))?;
        if g.encode() != text {
            return Err(format!("{text} re-encodes as {}", g.encode()));
        }
    }
    let blocks = |text: &str| -> Vec<usize> {
        Genome::decode(text)
            .expect("published genome")
            .connectivity
            .unconsumed_blocks()
            .collect()
    };
    let fused = |text: &str| -> Vec<usize> {
        let ir = GraphIR::build(&Genome::decode(text).expect("published genome"), sources(8), 4, 5, AuxHead::None);
        let concat = ir.nodes.iter().find(|n| n.kind == NodeKind::Concat).expect("concat node");
        let origin = |mut id: NodeId| loop {
            let n = ir.node(id);
            if n.kind != NodeKind::Upsample {
                return id;
            }
            id = n.inputs[0];
        };
        let mut out: Vec<usize> = concat
            .inputs
            .iter()
            .map(|&i| 4 + ir.block_sums.iter().position(|&b| b == origin(i)).expect("block sum"))
            .collect();
        out.sort_unstable();
        out
    };
    let (b0, b1) = (blocks(ARCH0), blocks(ARCH1));
    let (f0, f1) = (fused(ARCH0), fused(ARCH1));
    ensure(
        b0 == [4, 5, 6] && f0 == [4, 5, 6] && b1 == [5, 6] && f1 == [5, 6],
        format!("arch0/1/2 round-trip exactly; arch0 fuses blocks {f0:?}, arch1 fuses blocks {f1:?}"),
    )
}

fn gradient_suite() -> Outcome {
    let checks = gradcheck::suite();
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .expect("non-empty suite");
    let missing: Vec<&str> = OpCode::ALL
        .iter()
        .map(|op| op.abbrev())
        .filter(|a| !checks.iter().any(|c| c.group == *a))
        .collect();
    let failed = checks.iter().filter(|c| c.rel_err.is_nan() || c.rel_err >= 1e-4).count();
    ensure(
        failed == 0 && missing.is_empty(),
        format!(
            "{} gradients, {failed} above 1e-4, worst {:.2e} ({} / {}), ops missing {missing:?}",
            checks.len(),
            worst.rel_err,
            worst.group,
            worst.tensor
        ),
    )
}

fn reward_oracle() -> Outcome {
    let m = ConfusionMatrix::from_rows(&[vec![2, 0, 0], vec![0, 3, 1], vec![0, 1, 3]], 0);
    let r = m.reward().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut broken = 0;
    for _ in 0..100 {
        let k = 5;
        let mut a = ConfusionMatrix::new(k, 0);
        for t in 0..k {
            for p in 0..k {
                a.set(t, p, rng.random_range(0..40));
            }
        }
        a.set(1, 1, a.get(1, 1) + 1);
        // Random permutation of the foreground classes; background stays at 0.
        let mut perm: Vec<usize> = (1..k).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        perm.insert(0, 0);
        let mut b = ConfusionMatrix::new(k, 0);
        for t in 0..k {
            for p in 0..k {
                b.set(perm[t], perm[p], a.get(t, p));
            }
        }
        let (sa, sb) = (a.scores().map_err(|e| e.to_string())?, b.scores().map_err(|e| e.to_string())?);
        if sa != sb || a.reward() != b.reward() {
            broken += 1;
        }
    }
    ensure(
        (r - 0.6463).abs() <= 1e-4 && broken == 0,
        format!("reward {r:.6} (expected 0.6463), {broken}/100 permutations changed a score"),
    )
}

fn early_stop_statistics() -> Outcome {
    let mut running = RunningMean::default();
    running.push(0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    let stopped = (0..n).filter(|_| !should_continue(0.3, &running, 0.9, &mut rng)).count();
    let freq = stopped as f64 / n as f64;
    let above_stopped = (0..n)
        .filter(|_| !should_continue(0.4 + rng.random_range(1e-9..0.6), &running, 0.9, &mut rng))
        .count();
    ensure(
        (freq - 0.10).abs() <= 0.01 && above_stopped == 0,
        format!("below-mean termination {freq:.4} over {n}; above-mean terminations {above_stopped}/{n}"),
    )
}

fn polyak_correctness() -> Outcome {
    let mut worst = 0.0f64;
    for (decay, init, theta) in [(0.9, -3.0, 0.75), (0.99, 2.5, -1.0), (0.5, 0.0, 1.0)] {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.add("w".into(), vec![1], SlotKind::Weight, vec![init]);
        s.polyak_reset();
        s.slot_mut(SlotId(0)).value[0] = theta;
        for k in 1..=60 {
            s.polyak_update(decay);
            let gap = (s.slot(SlotId(0)).shadow[0] - theta).abs();
            worst = worst.max((gap - decay.powi(k) * (init - theta).abs()).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s: ParamStore<f64> = ParamStore::new();
    for i in 0..4 {
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        s.add(format!("w{i}"), vec![6], SlotKind::Weight, v);
    }
    s.polyak_reset();
    for i in 0..4 {
        s.slot_mut(SlotId(i)).value.iter_mut().for_each(|v| *v += 0.5);
    }
    s.polyak_update(0.9);
    let before = s.clone();
    s.polyak_swap_in().map_err(|e| e.to_string())?;
    let swapped_differs = s != before;
    s.polyak_swap_out().map_err(|e| e.to_string())?;
    ensure(
        worst <= 1e-10 && swapped_differs && s == before,
        format!("closed-form deviation {worst:.1e}; swap-in/out round trip exact: {}", s == before),
    )
}

fn sources(c: usize) -> [FeatureDesc; 4] {
    [
        FeatureDesc::new(c, 8, 8, 2),
        FeatureDesc::new(c, 4, 4, 4),
        FeatureDesc::new(c, 2, 2, 8),
        FeatureDesc::new(c, 2, 2, 16),
    ]
}

fn aux_isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bits = |net: &mut Network<f32>, x: &[Tensor<f32>]| -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for mode in [Mode::Train, Mode::Eval] {
            let pass = net.forward(x, mode).expect("valid inputs");
            out.extend(pass.main_logits().data().iter().map(|v| v.to_bits()));
        }
        out
    };
    let mut mismatches = Vec::new();
    for trial in 0..50 {
        let genome = Genome::sample_uniform(&mut rng);
        let aux = if trial % 2 == 0 { AuxHead::Cell } else { AuxHead::Classifier };
        let mut a: Network<f32> = Network::new(GraphIR::build(&genome, sources(6), 6, 5, aux), &mut rng);
        let mut b: Network<f32> = Network::new(GraphIR::build(&genome, sources(6), 6, 5, AuxHead::None), &mut rng);
        let shared = b.store.copy_matching(&a.store) == b.store.len();
        let x: Vec<Tensor<f32>> = sources(6)
            .iter()
            .map(|d| {
                let len = 2 * d.channels * d.pixels();
                Tensor::new([2, d.channels, d.height, d.width], (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
            })
            .collect();
        let mut stripped = a.strip_aux();
        let (ra, rb, rs) = (bits(&mut a, &x), bits(&mut b, &x), bits(&mut stripped, &x));
        if !shared || ra != rb || ra != rs {
            mismatches.push(genome.encode());
        }
    }
    ensure(
        mismatches.is_empty(),
        format!("50 genomes, main output bit-identical with, without and after stripping aux heads; mismatches {mismatches:?}"),
    )
}

struct SearchRuns {
    rl: RunLog,
    random: RunLog,
    reused: bool,
}

fn search_runs(art: &TaskArtifacts) -> Result<SearchRuns, String> {
    let dir = work_dir();
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut reused = true;
    let mut logs = Vec::new();
    for mode in ["rl", "random"] {
        let mut cfg = desk_config();
        cfg.search.mode = mode.into();
        let path = dir.join(format!("{mode}.jsonl"));
        reused &= RunLog::read(&path).is_ok_and(|l| l.footer.is_some());
        let started = Instant::now();
        run_search(&cfg, art, &path, true, &mut |b| {
            if b.done % 50 == 0 || b.done == b.total {
                eprintln!("  {mode}: {}/{} architectures, {:.0} s", b.done, b.total, started.elapsed().as_secs_f64());
            }
        })
        .map_err(|e| e.to_string())?;
        logs.push(RunLog::read(&path).map_err(|e| e.to_string())?);
    }
    let random = logs.pop().expect("two logs");
    let rl = logs.pop().expect("two logs");
    // Static report next to the logs, including the enumeration note.
    let rep = report::build(&[rl.clone(), random.clone()]).map_err(|e| e.to_string())?;
    rep.write(&dir.join("report")).map_err(|e| e.to_string())?;
    Ok(SearchRuns { rl, random, reused })
}

fn search_efficacy(runs: &SearchRuns) -> Outcome {
    let rl = report::last_mean(&runs.rl.records, 50).unwrap_or(0.0);
    let random = report::last_mean(&runs.random.records, 50).unwrap_or(0.0);
    ensure(
        runs.rl.records.len() == 300 && runs.random.records.len() == 300 && rl - random >= 0.02,
        format!(
            "last-50 mean final reward rl {rl:.4} vs random {random:.4} (difference {:+.4}){}",
            rl - random,
            if runs.reused { ", from cached logs" } else { "" }
        ),
    )
}

fn stage_correlation(runs: &SearchRuns) -> Outcome {
    let (r1, r2): (Vec<f64>, Vec<f64>) = runs
        .rl
        .records
        .iter()
        .filter_map(|r| r.reward2.map(|b| (r.reward1, b)))
        .unzip();
    let rho = spearman(&r1, &r2).map_err(|e| e.to_string())?;
    ensure(
        r1.len() >= 30 && rho > 0.5,
        format!("Spearman {rho:.4} between stage rewards over {} architectures of the rl run", r1.len()),
    )
}

fn component_ablation(art: &TaskArtifacts) -> Outcome {
    let cfg = desk_config();
    let base = cfg.search_config().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let genomes: Vec<Genome> = (0..20).map(|_| Genome::sample_uniform(&mut rng)).collect();
    let stage1 = |variant: &SearchConfig| -> Result<Vec<f64>, String> {
        let idx: Vec<usize> = (0..genomes.len()).collect();
        par_map(&idx, cfg.run.workers, |&i| {
            evaluate_stage1(&genomes[i], art, variant, &mut stream_rng(base.seed, Stream::Stage1, i as u64))
                .map(|o| o.reward1)
                .map_err(|e| e.to_string())
        })
        .into_iter()
        .collect()
    };
    let on = stage1(&base)?;
    let mut no_kd = base.clone();
    no_kd.ablation.kd = false;
    let mut no_aux = base.clone();
    no_aux.ablation.aux = AuxHead::None;
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, off) in [("kd", stage1(&no_kd)?), ("aux", stage1(&no_aux)?)] {
        let wins = on.iter().zip(&off).filter(|(a, b)| a > b).count();
        let losses = on.iter().zip(&off).filter(|(a, b)| a < b).count();
        let margin = (on.iter().sum::<f64>() - off.iter().sum::<f64>()) / on.len() as f64;
        let p = sign_test_p(wins, losses);
        ok &= margin >= 0.0 && p <= 0.1;
        lines.push(format!("{name} on-off margin {margin:+.4}, {wins} wins {losses} losses, sign test p {p:.3}"));
    }
    ensure(ok, format!("20 architectures: {}", lines.join("; ")))
}

fn controller_convergence() -> Outcome {
    let cfg = ControllerConfig::default();
    let batch = cfg.batch_size;
    let mut c = Controller::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for update in 1..=500 {
        let rollouts: Vec<_> = (0..batch).map(|_| c.sample(&mut rng)).collect();
        let rewards: Vec<f64> = rollouts.iter().map(|r| f64::from(u8::from(r.tokens[0] == 2))).collect();
        c.ppo_update(&rollouts, &rewards).map_err(|e| e.to_string())?;
        let p = c.distribution(&[])[2];
        if p > 0.9 {
            return Ok(format!("rewarded first token at probability {p:.3} after {update} updates"));
        }
    }
    Err(format!("probability {:.3} after 500 updates", c.distribution(&[])[2]))
}

fn enumeration() -> Outcome {
    let runs: Vec<_> = (0..5).map(|_| enumerate_connectivities()).collect();
    let same = runs.iter().all(|r| *r == runs[0]);
    let n = runs[0].len();
    ensure(
        same,
        format!(
            "{n} connectivities in all 5 runs (published figure 120 = 4x5x6 counts one operand per pair; \
             unordered operand pairs give 10x15x21 = 3150)"
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &out {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {tag} {name} ({secs:.1} s): {detail}");
        results.push((n, name, out, secs));
    };
    run(1, "genome fidelity", &mut genome_fidelity);
    run(2, "gradient suite", &mut gradient_suite);
    run(3, "reward oracle", &mut reward_oracle);
    run(4, "early-stop statistics", &mut early_stop_statistics);
    run(5, "polyak correctness", &mut polyak_correctness);
    run(6, "aux-path isolation", &mut aux_isolation);

    let cfg = desk_config();
    eprintln!("  preparing task artifacts in {}", cfg.run.artifacts_dir.display());
    let art = load_or_build(&cfg.run.artifacts_dir, &cfg);
    match &art {
        Ok(art) => {
            let runs = search_runs(art);
            match &runs {
                Ok(runs) => {
                    run(7, "search efficacy", &mut || search_efficacy(runs));
                    run(8, "stage correlation", &mut || stage_correlation(runs));
                }
                Err(e) => {
                    run(7, "search efficacy", &mut || Err(e.clone()));
                    run(8, "stage correlation", &mut || Err(e.clone()));
                }
            }
            run(9, "component ablation", &mut || component_ablation(art));
        }
        Err(e) => {
            let msg = format!("task artifacts: {e}");
            for (n, name) in [(7, "search efficacy"), (8, "stage correlation"), (9, "component ablation")] {
                run(n, name, &mut || Err(msg.clone()));
            }
        }
    }
    run(10, "controller convergence", &mut controller_convergence);
    run(11, "enumeration", &mut enumeration);

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
