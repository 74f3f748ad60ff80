//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use partialfc::collectives::{Backend, World};
use partialfc::dataio::{generate_blobs, split_dataset, Dataset};
use partialfc::engine::{train, TrainConfig, TrainMode, TrainOutcome};
use partialfc::margin_loss::{MarginConfig, MarginKind};
use partialfc::memcost::{min_gpus, profile, GpuPlan};
use partialfc::numerics::RngStream;
use partialfc::sampler::SamplingMode;
use partialfc::verify::{self, distributed_step, ToyProblem, VerifyOptions};

type Criterion = (&'static str, fn() -> Outcome, Duration);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn random_margin(rng: &mut RngStream) -> MarginConfig {
    match rng.next_below(3) {
        0 => MarginConfig::new(MarginKind::None, 0.0, 64.0).unwrap(),
        1 => MarginConfig::cosface(),
        _ => MarginConfig::arcface(),
    }
}

fn random_toy(rng: &mut RngStream) -> ToyProblem {
    let classes = 8 + rng.next_below(57);
    let d = 2 + rng.next_below(15);
    let batch = 8 * (1 + rng.next_below(2));
    let margin = random_margin(rng);
    ToyProblem::random(rng, batch, d, classes, margin)
}

fn parallel_exactness() -> Outcome {
    let mut rng = RngStream::new(20_001);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = random_toy(&mut rng);
        let r = common::reference(&p.x, &p.labels, &p.w, &p.margin);
        for k in [1, 2, 4, 8] {
            let got = distributed_step(&p, k, Backend::Threaded, None).unwrap();
            worst = worst
                .max(common::rel_err(&[got.loss], &[r.loss]))
                .max(common::rel_err(got.grad_x.data(), &r.grad_x))
                .max(common::rel_err(got.grad_w.data(), &r.grad_w));
        }
    }
    outcome(
        worst <= 1e-10,
        format!("20 problems x k in {{1,2,4,8}}, max rel err {worst:.3e} (tol 1e-10)"),
    )
}

fn sampled_identity() -> Outcome {
    let mut rng = RngStream::new(20_002);
    let mut worst = 0.0f64;
    for step in 0..50 {
        let p = random_toy(&mut rng);
        let k = [1, 2, 4, 8][rng.next_below(4)];
        let rate = 0.1 + 0.8 * rng.next_f64();
        let got = distributed_step(
            &p,
            k,
            Backend::Threaded,
            Some((SamplingMode::Pprn, rate, step)),
        )
        .unwrap();
        let r = common::reference(&p.x, &p.labels, &p.w, &p.margin);
        let c = p.classes();
        for i in 0..p.x.rows() {
            let dense = &r.prob[i * c..(i + 1) * c];
            let total: f64 = got.columns.iter().map(|&j| dense[j]).sum();
            let want: Vec<f64> = got.columns.iter().map(|&j| dense[j] / total).collect();
            worst = worst.max(common::rel_err(got.prob.row(i), &want));
        }
    }
    outcome(
        worst <= 1e-10,
        format!("50 sampled steps, max rel err {worst:.3e} (tol 1e-10)"),
    )
}

fn blob_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let data = generate_blobs(100, 10, 16, 0.15, 3).unwrap();
    data.write(&dir.join("blobs.bin")).unwrap();
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        format!(
            "dataset = blobs.bin\noutput = out\nworkers = 4\nbatch_size = 64\nlr = 1\n\
             log_every = 10\nseed = 5\nembedding_dim = 16\n{extra}"
        ),
    )
    .unwrap();
    path
}

fn cli_train(config: &Path, sets: &[&str]) -> (Vec<u8>, Vec<u8>) {
    let mut args = vec![
        "partialfc".to_string(),
        "train".into(),
        "--config".into(),
        config.display().to_string(),
        "--no-timestamps".into(),
    ];
    for s in sets {
        args.push("--set".into());
        args.push(s.to_string());
    }
    assert_eq!(partialfc::cli::run(args), 0, "train failed");
    let out = config.parent().unwrap().join("out");
    (
        fs::read(out.join("metrics.csv")).unwrap(),
        fs::read(out.join("params.bin")).unwrap(),
    )
}

fn rate_one_equivalence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blob_config(dir.path(), "iterations = 500\n");
    let (full, _) = cli_train(&cfg, &["mode=full"]);
    let (pprn, _) = cli_train(&cfg, &["mode=pprn", "sample_rate=1.0"]);
    let rows = String::from_utf8_lossy(&full).lines().count() - 1;
    outcome(
        full == pprn,
        format!(
            "500 iterations, {rows} metric rows, CSVs byte-identical: {}",
            full == pprn
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let opts = VerifyOptions {
        seed: 20_004,
        ..VerifyOptions::default()
    };
    let cos = verify::check_gradcheck_cosface(&opts).unwrap();
    let arc = verify::check_gradcheck_arcface(&opts).unwrap();
    outcome(
        cos.passed && arc.passed && cos.instances == 50 && arc.instances == 50,
        format!(
            "central differences, step 1e-6: cosface {:.3e}, arcface {:.3e} over 50 instances each (tol 1e-5)",
            cos.observed, arc.observed
        ),
    )
}

/// The desk-scale benchmark: 1000 classes, dimension 64, 20 samples per
/// class, spread 0.15, data seed 7, 20% held out.
struct Benchmark {
    full: TrainOutcome,
    pprn: TrainOutcome,
    random: TrainOutcome,
    elapsed: Duration,
}

fn benchmark_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        workers: 4,
        batch_per_worker: 64,
        embedding_dim: 64,
        mode,
        rate: 0.1,
        lr0: 1.0,
        lr_milestones: vec![600, 850],
        iterations: 1000,
        seed: 1,
        log_every: 100,
        timestamps: false,
        ..TrainConfig::new(1000)
    }
}

fn benchmark() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let data: Dataset = generate_blobs(1000, 20, 64, 0.15, 7).unwrap();
        let split = split_dataset(&data, 0.2, 1).unwrap();
        let world = World::new(4, Backend::Threaded).unwrap();
        let run = |mode| train(&benchmark_config(mode), &data, &split, &world).unwrap();
        let full = run(TrainMode::Full);
        let pprn = run(TrainMode::Pprn);
        let random = run(TrainMode::FullyRandom);
        Benchmark {
            full,
            pprn,
            random,
            elapsed: start.elapsed(),
        }
    })
}

fn accuracy_matches_full() -> Outcome {
    let b = benchmark();
    let full = b.full.final_eval_acc.unwrap();
    let pprn = b.pprn.final_eval_acc.unwrap();
    let delta = (pprn - full) * 100.0;
    outcome(
        full >= 0.95 && delta.abs() <= 1.0 && b.elapsed < Duration::from_secs(600),
        format!(
            "eval acc full {:.2}%, pprn r=0.1 {:.2}%, delta {delta:+.2} pts (limit 1.0, baseline >= 95%), {:.0}s",
            full * 100.0,
            pprn * 100.0,
            b.elapsed.as_secs_f64()
        ),
    )
}

fn pprn_beats_fully_random() -> Outcome {
    let b = benchmark();
    let (pc, rc) = (b.pprn.final_ca_pcc, b.random.final_ca_pcc);
    let (pa, ra) = (
        b.pprn.final_eval_acc.unwrap(),
        b.random.final_eval_acc.unwrap(),
    );
    outcome(
        pc > rc && pa > ra,
        format!(
            "CA_pcc pprn {pc:.4} vs fully-random {rc:.4}; eval acc pprn {:.2}% vs fully-random {:.2}%",
            pa * 100.0,
            ra * 100.0
        ),
    )
}

fn big(v: u64) -> BigUint {
    BigUint::from(v)
}

fn memory_model() -> Outcome {
    let (d, n, per) = (512u64, 64u64, 125_000u64);
    let base = profile(d, per, 1, n).unwrap();
    let mut ok = true;
    for k in 1..=128u64 {
        let p = profile(d, per * k, k, n).unwrap();
        ok &= p.mem_w == base.mem_w;
        ok &= big(p.mem_logits) == big(base.mem_logits) * big(k);
        ok &= big(p.mem_fc) == big(3) * big(p.mem_w) + big(2) * big(p.mem_logits);
    }
    let p128 = profile(d, per * 128, 128, n).unwrap();
    // 2·L / mem_fc ≥ 0.9 and L / W ≥ 10, compared as integers
    let share_ok = big(20) * big(p128.mem_logits) >= big(9) * big(p128.mem_fc);
    let ratio_ok = big(p128.mem_logits) >= big(10) * big(p128.mem_w);
    let oom = profile(d, 10_000_000, 8, n).unwrap();
    let oom_ok = oom.mem_fc > 11_000_000_000
        && matches!(
            min_gpus(11_000_000_000, 0, d, 10_000_000, n, [8]).unwrap(),
            GpuPlan::Infeasible { .. }
        );
    let eighty = matches!(
        min_gpus(5_900_000_000, 0, d, 10_000_000, n, (1..=16).map(|i| 8 * i)).unwrap(),
        GpuPlan::Feasible { k: 80, .. }
    );
    outcome(
        ok && share_ok && ratio_ok && oom_ok && eighty,
        format!(
            "co-scaling k=1..128 exact: {ok}; k=128 logits share {:.4}, L/W {}; C=10M k=8 mem_fc {} B > 11e9: {oom_ok}; 80-worker plan: {eighty}",
            p128.logits_share(),
            p128.mem_logits / p128.mem_w,
            oom.mem_fc
        ),
    )
}

fn cli_verify(backend: &str, out: &Path) -> Vec<u8> {
    let args = [
        "partialfc",
        "verify",
        "--instances",
        "5",
        "--backend",
        backend,
        "--out",
        &out.display().to_string(),
    ];
    assert_eq!(partialfc::cli::run(args), 0, "verify failed");
    fs::read(out).unwrap()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blob_config(
        dir.path(),
        "iterations = 150\nmode = pprn\nsample_rate = 0.2\n",
    );
    let first = cli_train(&cfg, &["backend=threaded"]);
    let again = cli_train(&cfg, &["backend=threaded"]);
    let sequential = cli_train(&cfg, &["backend=sequential"]);
    let train_repeat = first == again;
    let train_backends = first == sequential;

    let v1 = cli_verify("threaded", &dir.path().join("v1.csv"));
    let v2 = cli_verify("threaded", &dir.path().join("v2.csv"));
    let v3 = cli_verify("sequential", &dir.path().join("v3.csv"));
    let verify_repeat = v1 == v2;
    let verify_backends = v1 == v3;
    outcome(
        train_repeat && train_backends && verify_repeat && verify_backends,
        format!(
            "train repeat {train_repeat}, train threaded=sequential {train_backends}, \
             verify repeat {verify_repeat}, verify threaded=sequential {verify_backends}"
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        (
            "1 model-parallel exactness",
            parallel_exactness,
            Duration::from_secs(30),
        ),
        (
            "2 sampled-probability identity",
            sampled_identity,
            Duration::from_secs(10),
        ),
        (
            "3 r=1.0 equivalence",
            rate_one_equivalence,
            Duration::from_secs(120),
        ),
        (
            "4 gradient correctness",
            gradient_correctness,
            Duration::from_secs(60),
        ),
        (
            "5 accuracy vs full softmax",
            accuracy_matches_full,
            Duration::from_secs(600),
        ),
        (
            "6 pprn vs fully-random",
            pprn_beats_fully_random,
            Duration::from_secs(600),
        ),
        ("7 memory model", memory_model, Duration::from_secs(1)),
        ("8 determinism", determinism, Duration::from_secs(120)),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run));
        let elapsed = start.elapsed();
        let (passed, detail) = match result {
            Ok(o) => (o.passed && elapsed <= budget, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !passed {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {detail} [{:.2}s, budget {}s]",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
