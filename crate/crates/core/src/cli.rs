//! Command-line front end.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::collectives::{Backend, World};
use crate::dataio::{
    generate_blobs, load_dataset, params_to_bytes, parse_config_with, split_dataset,
    write_metrics_csv,
};
use crate::engine::train;
use crate::error::{Error, Result};
use crate::memcost::{min_gpus, profile, sampled_profile, GpuPlan};
use crate::verify::{run_all, write_report_csv, VerifyOptions};

#[derive(Parser, Debug)]
#[command(
    name = "partialfc",
    version,
    about = "Model-parallel margin softmax with partial class sampling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic Gaussian-blob dataset.
    GenData(GenDataArgs),
    /// Train from a config file and write metrics.csv and params.bin.
    Train(TrainArgs),
    /// Run the oracle, identity and gradient checks.
    Verify(VerifyArgs),
    /// Tabulate classification-layer memory per worker count.
    PlanMemory(PlanMemoryArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.15)]
    pub spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set mode=full`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Leave the elapsed_s column empty so runs can be compared byte for byte.
    #[arg(long)]
    pub no_timestamps: bool,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Instances per check (default: each check's own count).
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long, default_value = "threaded")]
    pub backend: Backend,
    /// Perturb the named check's engine output (test hook).
    #[arg(long, value_name = "CHECK")]
    pub inject: Option<String>,
    /// Also write the report as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlanMemoryArgs {
    /// Embedding dimension.
    #[arg(long, default_value_t = 512)]
    pub dim: u64,
    /// Total class count.
    #[arg(
        long,
        conflicts_with = "classes_per_gpu",
        required_unless_present = "classes_per_gpu"
    )]
    pub classes: Option<u64>,
    /// Classes per worker; total classes scale with k.
    #[arg(long)]
    pub classes_per_gpu: Option<u64>,
    /// Explicit worker counts, comma separated.
    #[arg(long = "k", value_delimiter = ',', conflicts_with_all = ["k_min", "k_max", "k_step"])]
    pub k_list: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    pub k_min: u64,
    #[arg(long, default_value_t = 128)]
    pub k_max: u64,
    #[arg(long, default_value_t = 1)]
    pub k_step: u64,
    /// Per-worker batch size.
    #[arg(long, default_value_t = 64)]
    pub batch: u64,
    /// Sampling rate; below 1 adds sampled columns.
    #[arg(long, default_value_t = 1.0)]
    pub rate: f64,
    /// Per-worker memory budget, e.g. 11GB or 10GiB.
    #[arg(long, value_parser = parse_bytes)]
    pub budget: Option<u64>,
    /// Memory already taken by the backbone and activations.
    #[arg(long, value_parser = parse_bytes, default_value = "0")]
    pub reserved: u64,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `123`, `11GB`, `5.9GB`, `10GiB`, `512MiB` and similar.
pub fn parse_bytes(s: &str) -> std::result::Result<u64, String> {
    let t = s.trim();
    let split = t.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let mult: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "kb" => 1_000,
        "mb" => 1_000_000,
        "gb" => 1_000_000_000,
        "tb" => 1_000_000_000_000,
        "kib" => 1 << 10,
        "mib" => 1 << 20,
        "gib" => 1 << 30,
        "tib" => 1 << 40,
        other => return Err(format!("unknown size unit `{other}`")),
    };
    let num = num.trim();
    if let Ok(n) = num.parse::<u64>() {
        return n
            .checked_mul(mult)
            .ok_or_else(|| format!("size `{s}` overflows"));
    }
    let f: f64 = num.parse().map_err(|_| format!("invalid size `{s}`"))?;
    if !(f >= 0.0 && f.is_finite()) {
        return Err(format!("invalid size `{s}`"));
    }
    let v = (f * mult as f64).round();
    if v >= u64::MAX as f64 {
        return Err(format!("size `{s}` overflows"));
    }
    Ok(v as u64)
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))
        })
        .collect()
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let data = generate_blobs(a.classes, a.per_class, a.dim, a.spread, a.seed)?;
    data.write(&a.out)?;
    println!(
        "wrote {} samples ({} classes, dim {}) to {}",
        data.len(),
        data.n_classes,
        data.input_dim,
        a.out.display()
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = parse_config_with(&a.config, &parse_overrides(&a.overrides)?)?;
    let data = load_dataset(&cfg.dataset)?;
    let mut tc = cfg.train.clone();
    if tc.n_classes == 0 {
        tc.n_classes = data.n_classes;
    }
    tc.timestamps = !a.no_timestamps;
    let split = split_dataset(&data, cfg.eval_fraction, tc.seed)?;
    let world = World::new(tc.workers, cfg.backend)?;
    let outcome = train(&tc, &data, &split, &world)?;

    fs::create_dir_all(&cfg.output)?;
    let metrics_path = cfg.output.join("metrics.csv");
    write_metrics_csv(fs::File::create(&metrics_path)?, &outcome.metrics)?;
    fs::write(cfg.output.join("params.bin"), params_to_bytes(&outcome))?;

    let last = outcome.metrics.last();
    let eval = outcome
        .final_eval_acc
        .map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "mode={} workers={} iterations={} loss={} eval_acc={} ca_pcc={:.4} metrics={}",
        tc.mode,
        tc.workers,
        tc.iterations,
        last.map_or_else(|| "n/a".to_string(), |m| format!("{:.6}", m.loss)),
        eval,
        outcome.final_ca_pcc,
        metrics_path.display()
    );
    Ok(())
}

/// Returns whether every check passed.
pub fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let opts = VerifyOptions {
        seed: a.seed,
        instances: a.instances,
        backend: a.backend,
        inject: a.inject.clone(),
    };
    let reports = run_all(&opts)?;
    let mut out = io::stdout().lock();
    for r in &reports {
        writeln!(
            out,
            "{} {:<24} instances={:<3} tolerance={:e} observed={:e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.instances,
            r.tolerance,
            r.observed
        )?;
    }
    if let Some(path) = &a.out {
        write_report_csv(fs::File::create(path)?, &reports)?;
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn plan_ks(a: &PlanMemoryArgs) -> Result<Vec<u64>> {
    let ks: Vec<u64> = if a.k_list.is_empty() {
        if a.k_step == 0 || a.k_min == 0 || a.k_min > a.k_max {
            return Err(Error::Config(
                "need 1 <= k-min <= k-max and k-step >= 1".into(),
            ));
        }
        (a.k_min..=a.k_max).step_by(a.k_step as usize).collect()
    } else {
        a.k_list.clone()
    };
    if ks.contains(&0) {
        return Err(Error::Config("worker counts must be positive".into()));
    }
    Ok(ks)
}

/// Writes the CSV and returns the verdict lines.
pub fn plan_memory<W: Write>(a: &PlanMemoryArgs, out: W) -> Result<Vec<String>> {
    let ks = plan_ks(a)?;
    let sampled = a.rate < 1.0;
    if !(a.rate > 0.0 && a.rate <= 1.0) {
        return Err(Error::Config(format!(
            "rate must lie in (0, 1], got {}",
            a.rate
        )));
    }
    let classes_for = |k: u64| -> Result<u64> {
        match (a.classes, a.classes_per_gpu) {
            (Some(c), _) => Ok(c),
            (None, Some(per)) => per
                .checked_mul(k)
                .ok_or_else(|| Error::Config("class count overflows".into())),
            (None, None) => Err(Error::Config("need --classes or --classes-per-gpu".into())),
        }
    };
    let available = a.budget.map(|b| b.saturating_sub(a.reserved));

    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "k",
        "classes",
        "classes_per_worker",
        "mem_w",
        "mem_logits",
        "mem_fc",
        "logits_share",
    ];
    if sampled {
        header.extend([
            "sampled_logit_cols",
            "sampled_mem_logits",
            "sampled_mem_fc",
            "positive_cols_bound",
        ]);
    }
    if a.budget.is_some() {
        header.push("fits");
    }
    w.write_record(&header)?;
    let mut first_fit = None;
    for &k in &ks {
        let c = classes_for(k)?;
        let p = profile(a.dim, c, k, a.batch)?;
        let mut row = vec![
            k.to_string(),
            c.to_string(),
            p.classes_per_worker.to_string(),
            p.mem_w.to_string(),
            p.mem_logits.to_string(),
            p.mem_fc.to_string(),
            format!("{:.6}", p.logits_share()),
        ];
        let mut effective = p.mem_fc;
        if sampled {
            let s = sampled_profile(a.dim, c, k, a.batch, a.rate)?;
            row.extend([
                s.profile.logit_cols.to_string(),
                s.profile.mem_logits.to_string(),
                s.profile.mem_fc.to_string(),
                s.positive_cols_bound.to_string(),
            ]);
            effective = s.profile.mem_fc;
        }
        if let Some(avail) = available {
            let fits = effective <= avail;
            if fits && first_fit.is_none() {
                first_fit = Some(k);
            }
            row.push(fits.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut verdict = Vec::new();
    if let (Some(budget), Some(avail)) = (a.budget, available) {
        let what = if sampled {
            format!("sampled mem_fc at r={}", a.rate)
        } else {
            "mem_fc".to_string()
        };
        verdict.push(match first_fit {
            Some(k) => format!(
                "verdict: feasible; smallest k with {what} <= {avail} bytes (budget {budget}, reserved {}) is {k}",
                a.reserved
            ),
            None => format!("verdict: infeasible; no candidate k fits {what} into {avail} bytes"),
        });
        if let (Some(c), false) = (a.classes, sampled) {
            if let GpuPlan::Infeasible {
                plateau: true,
                logits_floor,
            } = min_gpus(budget, a.reserved, a.dim, c, a.batch, ks.iter().copied())?
            {
                verdict.push(format!(
                    "note: mem_fc never drops below the logits floor 2*N*C*4 = {logits_floor} bytes, so more workers cannot help"
                ));
            }
        }
    }
    Ok(verdict)
}

pub fn cmd_plan_memory(a: &PlanMemoryArgs) -> Result<()> {
    match &a.out {
        Some(path) => {
            let verdict = plan_memory(a, fs::File::create(path)?)?;
            for line in verdict {
                println!("{line}");
            }
        }
        None => {
            let verdict = plan_memory(a, io::stdout().lock())?;
            for line in verdict {
                eprintln!("{line}");
            }
        }
    }
    Ok(())
}

/// Runs the CLI on `args` and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
        Command::PlanMemory(a) => cmd_plan_memory(a).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: one or more checks failed");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
