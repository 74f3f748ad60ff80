//! On-demand correctness checks: the distributed step against a dense
//! single-worker oracle, the sampled-softmax renormalisation identity,
//! finite-difference gradient checks and backend equivalence.

use std::io::Write;

use crate::collectives::{Backend, World};
use crate::engine::{forward_backward_full, forward_backward_sampled, StepOutput};
use crate::error::{Error, Result};
use crate::margin_loss::{MarginConfig, MarginKind};
use crate::numerics::{Matrix, RngStream};
use crate::sampler::{partition_classes, plan_rank, sampler_rng, SamplingMode, Shard};

pub const CHECK_NAMES: [&str; 6] = [
    "parallel_equals_serial",
    "sampled_prob_identity",
    "gradcheck_cosface",
    "gradcheck_arcface",
    "rate_one_equivalence",
    "backend_equivalence",
];

pub const PARALLEL_TOLERANCE: f64 = 1e-10;
pub const PROB_IDENTITY_TOLERANCE: f64 = 1e-10;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;

/// Entries smaller than this fraction of the largest entry in their tensor
/// are compared against that floor instead of their own magnitude.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Distance of a target angle from the ArcFace switch point below which a
/// gradient-check instance is redrawn.
const KINK_CLEARANCE: f64 = 1e-3;

/// Largest entrywise relative error `|a − b| / max(|b|, floor)` with
/// `floor = RELATIVE_FLOOR · max|b|`.
pub fn entrywise_rel_err(actual: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(
        actual.len(),
        expected.len(),
        "compared tensors differ in length"
    );
    let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
    actual
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
        .fold(0.0, f64::max)
}

/// `max|a − b| / max(max|a|, max|b|)`, the usual tensor-wise metric for
/// finite-difference checks.
pub fn tensor_rel_err(actual: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(
        actual.len(),
        expected.len(),
        "compared tensors differ in length"
    );
    let scale = actual
        .iter()
        .chain(expected)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    actual
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Dense reference written directly from the textbook formulas with plain
/// loops. Shares no code with the distributed path.
pub mod oracle {
    use super::*;

    #[derive(Clone, Debug)]
    pub struct DenseResult {
        pub loss: f64,
        /// `B × d`
        pub grad_x: Vec<Vec<f64>>,
        /// `d × C`
        pub grad_w: Vec<Vec<f64>>,
        /// `B × C` softmax probabilities.
        pub prob: Vec<Vec<f64>>,
    }

    fn unit(v: &[f64]) -> (Vec<f64>, f64) {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        (v.iter().map(|a| a / norm).collect(), norm)
    }

    /// Pulls a gradient back through `u = v / ‖v‖` using the explicit
    /// Jacobian `(I − u uᵀ) / ‖v‖`.
    fn through_normalisation(u: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
        let n = u.len();
        (0..n)
            .map(|a| {
                let mut acc = 0.0;
                for b in 0..n {
                    let delta = if a == b { 1.0 } else { 0.0 };
                    acc += (delta - u[a] * u[b]) / norm * g[b];
                }
                acc
            })
            .collect()
    }

    fn target_logit(m: &MarginConfig, c: f64) -> f64 {
        let s = m.scale();
        match m.kind() {
            MarginKind::None => s * c,
            MarginKind::CosFace => s * (c - m.margin()),
            MarginKind::ArcFace => {
                let theta = c.clamp(-1.0, 1.0).acos();
                if theta + m.margin() < std::f64::consts::PI {
                    s * (theta + m.margin()).cos()
                } else {
                    s * (c - m.margin() * m.margin().sin())
                }
            }
        }
    }

    fn target_derivative(m: &MarginConfig, c: f64) -> f64 {
        let s = m.scale();
        match m.kind() {
            MarginKind::ArcFace => {
                let theta = c.clamp(-1.0, 1.0).acos();
                if theta + m.margin() < std::f64::consts::PI {
                    s * (theta + m.margin()).sin() / theta.sin()
                } else {
                    s
                }
            }
            _ => s,
        }
    }

    /// Loss, gradients and probabilities of the margin softmax over all
    /// `C` classes. `x` is `B × d`, `w` is `d × C`.
    pub fn dense(x: &Matrix, labels: &[usize], w: &Matrix, margin: &MarginConfig) -> DenseResult {
        let (b, d) = x.shape();
        let c = w.cols();
        let xs: Vec<(Vec<f64>, f64)> = (0..b).map(|i| unit(x.row(i))).collect();
        let ws: Vec<(Vec<f64>, f64)> = (0..c).map(|j| unit(&w.column(j))).collect();

        let mut cos = vec![vec![0.0; c]; b];
        for i in 0..b {
            for j in 0..c {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += xs[i].0[r] * ws[j].0[r];
                }
                cos[i][j] = acc;
            }
        }

        let mut prob = vec![vec![0.0; c]; b];
        let mut loss = 0.0;
        let mut grad_cos = vec![vec![0.0; c]; b];
        for i in 0..b {
            let z: Vec<f64> = (0..c)
                .map(|j| {
                    if j == labels[i] {
                        target_logit(margin, cos[i][j])
                    } else {
                        margin.scale() * cos[i][j]
                    }
                })
                .collect();
            let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let den: f64 = z.iter().map(|v| (v - top).exp()).sum();
            for j in 0..c {
                prob[i][j] = (z[j] - top).exp() / den;
            }
            loss -= prob[i][labels[i]].ln();
            for j in 0..c {
                let y = if j == labels[i] { 1.0 } else { 0.0 };
                let dz = (prob[i][j] - y) / b as f64;
                let slope = if j == labels[i] {
                    target_derivative(margin, cos[i][j])
                } else {
                    margin.scale()
                };
                grad_cos[i][j] = dz * slope;
            }
        }
        loss /= b as f64;

        let mut grad_x = Vec::with_capacity(b);
        for i in 0..b {
            let g: Vec<f64> = (0..d)
                .map(|r| (0..c).map(|j| grad_cos[i][j] * ws[j].0[r]).sum())
                .collect();
            grad_x.push(through_normalisation(&xs[i].0, xs[i].1, &g));
        }
        let mut grad_w = vec![vec![0.0; c]; d];
        for j in 0..c {
            let g: Vec<f64> = (0..d)
                .map(|r| (0..b).map(|i| grad_cos[i][j] * xs[i].0[r]).sum())
                .collect();
            for (r, v) in through_normalisation(&ws[j].0, ws[j].1, &g)
                .into_iter()
                .enumerate()
            {
                grad_w[r][j] = v;
            }
        }
        DenseResult {
            loss,
            grad_x,
            grad_w,
            prob,
        }
    }
}

/// A random problem small enough for dense checking.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    /// `B × d` raw features.
    pub x: Matrix,
    pub labels: Vec<usize>,
    /// `d × C` raw class centers.
    pub w: Matrix,
    pub margin: MarginConfig,
}

impl ToyProblem {
    pub fn random(
        rng: &mut RngStream,
        batch: usize,
        d: usize,
        classes: usize,
        margin: MarginConfig,
    ) -> Self {
        ToyProblem {
            x: Matrix::from_fn(batch, d, |_, _| rng.next_gaussian()),
            labels: (0..batch).map(|_| rng.next_below(classes)).collect(),
            w: Matrix::from_fn(d, classes, |_, _| rng.next_gaussian()),
            margin,
        }
    }

    pub fn classes(&self) -> usize {
        self.w.cols()
    }

    /// Cosine between each row and its own class center.
    pub fn target_cosines(&self) -> Vec<f64> {
        (0..self.x.rows())
            .map(|i| {
                let x = self.x.row(i);
                let w = self.w.column(self.labels[i]);
                let dot: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
                let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nw = w.iter().map(|a| a * a).sum::<f64>().sqrt();
                dot / (nx * nw)
            })
            .collect()
    }
}

/// Per-rank results of one distributed step, assembled.
#[derive(Clone, Debug)]
pub struct Assembled {
    pub loss: f64,
    /// `B × d`
    pub grad_x: Matrix,
    /// `d × C`
    pub grad_w: Matrix,
    /// `B × |S|`, columns in `columns` order.
    pub prob: Matrix,
    pub columns: Vec<usize>,
}

impl Assembled {
    fn flat(&self) -> Vec<f64> {
        let mut v = vec![self.loss];
        v.extend_from_slice(self.grad_x.data());
        v.extend_from_slice(self.grad_w.data());
        v.extend_from_slice(self.prob.data());
        v.extend(self.columns.iter().map(|&c| c as f64));
        v
    }
}

fn hstack(blocks: &[Matrix]) -> Result<Matrix> {
    let t: Vec<Matrix> = blocks.iter().map(Matrix::transpose).collect();
    Ok(Matrix::vstack(&t)?.transpose())
}

fn assemble(outs: Vec<StepOutput>) -> Result<Assembled> {
    let loss = outs[0].loss;
    let grad_x = Matrix::vstack(&outs.iter().map(|o| o.grad_x.clone()).collect::<Vec<_>>())?;
    let grad_w = hstack(&outs.iter().map(|o| o.grad_w.clone()).collect::<Vec<_>>())?;
    let prob = hstack(
        &outs
            .iter()
            .map(|o| o.prob.values.clone())
            .collect::<Vec<_>>(),
    )?;
    let columns = outs
        .iter()
        .flat_map(|o| o.columns.iter().copied())
        .collect();
    Ok(Assembled {
        loss,
        grad_x,
        grad_w,
        prob,
        columns,
    })
}

/// Runs one step of `problem` on `k` workers. With `sampling`, each rank
/// draws its plan from `sampler_rng(seed, rank, 0, k)`.
pub fn distributed_step(
    problem: &ToyProblem,
    k: usize,
    backend: Backend,
    sampling: Option<(SamplingMode, f64, u64)>,
) -> Result<Assembled> {
    let batch = problem.x.rows();
    if !batch.is_multiple_of(k) {
        return Err(Error::contract(format!(
            "batch {batch} does not split over {k} workers"
        )));
    }
    let n = batch / k;
    let ranges = partition_classes(problem.classes(), k)?;
    let world = World::new(k, backend)?;
    let outs = world.run(|comm| {
        let rank = comm.rank();
        let range = ranges[rank];
        let cols: Vec<usize> = (range.start..range.end).collect();
        let shard = Shard {
            range,
            w: problem.w.select_columns(&cols),
        };
        let x = problem.x.row_block(rank * n, (rank + 1) * n);
        let labels = &problem.labels[rank * n..(rank + 1) * n];
        match sampling {
            None => forward_backward_full(&x, labels, &shard, &problem.margin, comm),
            Some((mode, rate, seed)) => {
                let mut rng = sampler_rng(seed, rank, 0, k);
                let sample = plan_rank(&problem.labels, &range, rate, &mut rng, mode)?;
                forward_backward_sampled(&x, labels, &shard, &sample, &problem.margin, comm)
            }
        }
    })?;
    assemble(outs)
}

/// Loss of `problem` on one worker.
fn loss_only(problem: &ToyProblem) -> Result<f64> {
    Ok(distributed_step(problem, 1, Backend::Sequential, None)?.loss)
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub tolerance: f64,
    /// Worst error over all instances.
    pub observed: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &'static str, instances: usize, tolerance: f64, observed: f64) -> Self {
        CheckReport {
            name,
            instances,
            tolerance,
            observed,
            passed: observed.is_finite() && observed <= tolerance,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Overrides the default instance count of every check.
    pub instances: Option<usize>,
    /// Backend used for the distributed side of the checks.
    pub backend: Backend,
    /// Name of a check whose engine output is deliberately perturbed.
    pub inject: Option<String>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            instances: None,
            backend: Backend::Threaded,
            inject: None,
        }
    }
}

impl VerifyOptions {
    fn count(&self, default: usize) -> usize {
        self.instances.unwrap_or(default)
    }

    fn injected(&self, name: &str) -> bool {
        self.inject.as_deref() == Some(name)
    }

    fn rng(&self, check: u64) -> RngStream {
        RngStream::with_stream(self.seed, 100 + check)
    }
}

fn perturb(m: &mut Matrix) {
    if m.rows() > 0 && m.cols() > 0 {
        let v = m.get(0, 0);
        m.set(0, 0, v + 1e-3 * (1.0 + v.abs()));
    }
}

fn random_margin(rng: &mut RngStream) -> MarginConfig {
    match rng.next_below(3) {
        0 => MarginConfig::new(MarginKind::None, 0.0, MarginConfig::DEFAULT_SCALE).expect("valid"),
        1 => MarginConfig::cosface(),
        _ => MarginConfig::arcface(),
    }
}

const WORLD_SIZES: [usize; 4] = [1, 2, 4, 8];

/// Every worker count reproduces the dense single-worker oracle.
pub fn check_parallel_equals_serial(opts: &VerifyOptions) -> Result<CheckReport> {
    let name = CHECK_NAMES[0];
    let mut rng = opts.rng(0);
    let count = opts.count(20);
    let mut worst = 0.0f64;
    for inst in 0..count {
        let classes = 8 + rng.next_below(57);
        let d = 2 + rng.next_below(15);
        let batch = 8 * (1 + rng.next_below(2));
        let margin = random_margin(&mut rng);
        let p = ToyProblem::random(&mut rng, batch, d, classes, margin);
        let dense = oracle::dense(&p.x, &p.labels, &p.w, &p.margin);
        let want_x: Vec<f64> = dense.grad_x.concat();
        let want_w: Vec<f64> = dense.grad_w.concat();
        for k in WORLD_SIZES {
            let mut got = distributed_step(&p, k, opts.backend, None)?;
            if inst == 0 && k == 8 && opts.injected(name) {
                perturb(&mut got.grad_w);
            }
            worst = worst
                .max(entrywise_rel_err(&[got.loss], &[dense.loss]))
                .max(entrywise_rel_err(got.grad_x.data(), &want_x))
                .max(entrywise_rel_err(got.grad_w.data(), &want_w));
        }
    }
    Ok(CheckReport::new(name, count, PARALLEL_TOLERANCE, worst))
}

/// Sampled probabilities equal dense probabilities renormalised over the
/// sampled classes.
pub fn check_sampled_prob_identity(opts: &VerifyOptions) -> Result<CheckReport> {
    let name = CHECK_NAMES[1];
    let mut rng = opts.rng(1);
    let count = opts.count(50);
    let mut worst = 0.0f64;
    for inst in 0..count {
        let k = WORLD_SIZES[rng.next_below(4)];
        let classes = 8 + rng.next_below(57);
        let d = 2 + rng.next_below(15);
        let batch = 8 * (1 + rng.next_below(2));
        let rate = 0.1 + 0.8 * rng.next_f64();
        let margin = random_margin(&mut rng);
        let p = ToyProblem::random(&mut rng, batch, d, classes, margin);
        let step_seed = rng.next_u64();
        let mut got = distributed_step(
            &p,
            k,
            opts.backend,
            Some((SamplingMode::Pprn, rate, step_seed)),
        )?;
        if inst == 0 && opts.injected(name) {
            perturb(&mut got.prob);
        }
        let dense = oracle::dense(&p.x, &p.labels, &p.w, &p.margin);
        for i in 0..batch {
            let total: f64 = got.columns.iter().map(|&j| dense.prob[i][j]).sum();
            let want: Vec<f64> = got
                .columns
                .iter()
                .map(|&j| dense.prob[i][j] / total)
                .collect();
            worst = worst.max(entrywise_rel_err(got.prob.row(i), &want));
        }
    }
    Ok(CheckReport::new(
        name,
        count,
        PROB_IDENTITY_TOLERANCE,
        worst,
    ))
}

fn clear_of_kink(p: &ToyProblem) -> bool {
    let m = p.margin.margin();
    p.target_cosines().iter().all(|&c| {
        let theta = c.acos();
        (theta - (std::f64::consts::PI - m)).abs() > KINK_CLEARANCE && theta.sin() > KINK_CLEARANCE
    })
}

/// Central differences on every raw feature and class-center entry.
fn finite_difference(p: &ToyProblem) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut gx = Vec::with_capacity(p.x.data().len());
    for i in 0..p.x.rows() {
        for j in 0..p.x.cols() {
            let mut q = p.clone();
            q.x.set(i, j, p.x.get(i, j) + FD_STEP);
            let up = loss_only(&q)?;
            q.x.set(i, j, p.x.get(i, j) - FD_STEP);
            let down = loss_only(&q)?;
            gx.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let mut gw = Vec::with_capacity(p.w.data().len());
    for i in 0..p.w.rows() {
        for j in 0..p.w.cols() {
            let mut q = p.clone();
            q.w.set(i, j, p.w.get(i, j) + FD_STEP);
            let up = loss_only(&q)?;
            q.w.set(i, j, p.w.get(i, j) - FD_STEP);
            let down = loss_only(&q)?;
            gw.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok((gx, gw))
}

fn gradcheck(
    opts: &VerifyOptions,
    name: &'static str,
    margin: MarginConfig,
    stream: u64,
) -> Result<CheckReport> {
    let mut rng = opts.rng(stream);
    let count = opts.count(50);
    let mut worst = 0.0f64;
    for inst in 0..count {
        let p = loop {
            let classes = 4 + rng.next_below(13);
            let d = 2 + rng.next_below(7);
            let p = ToyProblem::random(&mut rng, 4, d, classes, margin);
            if clear_of_kink(&p) {
                break p;
            }
        };
        let mut got = distributed_step(&p, 2, opts.backend, None)?;
        if inst == 0 && opts.injected(name) {
            perturb(&mut got.grad_x);
        }
        let (fx, fw) = finite_difference(&p)?;
        worst = worst
            .max(tensor_rel_err(got.grad_x.data(), &fx))
            .max(tensor_rel_err(got.grad_w.data(), &fw));
    }
    Ok(CheckReport::new(name, count, GRADCHECK_TOLERANCE, worst))
}

pub fn check_gradcheck_cosface(opts: &VerifyOptions) -> Result<CheckReport> {
    gradcheck(opts, CHECK_NAMES[2], MarginConfig::cosface(), 2)
}

pub fn check_gradcheck_arcface(opts: &VerifyOptions) -> Result<CheckReport> {
    gradcheck(opts, CHECK_NAMES[3], MarginConfig::arcface(), 3)
}

/// At rate 1 the sampled step is the full step, bit for bit.
pub fn check_rate_one_equivalence(opts: &VerifyOptions) -> Result<CheckReport> {
    let name = CHECK_NAMES[4];
    let mut rng = opts.rng(4);
    let count = opts.count(10);
    let mut worst = 0.0f64;
    for inst in 0..count {
        let k = WORLD_SIZES[rng.next_below(4)];
        let margin = random_margin(&mut rng);
        let p = ToyProblem::random(&mut rng, 16, 8, 64, margin);
        let full = distributed_step(&p, k, opts.backend, None)?;
        let mut sampled = distributed_step(
            &p,
            k,
            opts.backend,
            Some((SamplingMode::Pprn, 1.0, inst as u64)),
        )?;
        if inst == 0 && opts.injected(name) {
            perturb(&mut sampled.grad_w);
        }
        worst = worst.max(max_abs_diff(&full.flat(), &sampled.flat()));
    }
    Ok(CheckReport::new(name, count, 0.0, worst))
}

/// Threaded and sequential communicators give identical bits at k = 8.
pub fn check_backend_equivalence(opts: &VerifyOptions) -> Result<CheckReport> {
    let name = CHECK_NAMES[5];
    let mut rng = opts.rng(5);
    let count = opts.count(10);
    let mut worst = 0.0f64;
    for inst in 0..count {
        let margin = random_margin(&mut rng);
        let p = ToyProblem::random(&mut rng, 16, 8, 64, margin);
        let sampling = Some((SamplingMode::Pprn, 0.3, inst as u64));
        for s in [None, sampling] {
            let threaded = distributed_step(&p, 8, Backend::Threaded, s)?;
            let mut sequential = distributed_step(&p, 8, Backend::Sequential, s)?;
            if inst == 0 && opts.injected(name) {
                perturb(&mut sequential.grad_x);
            }
            let (a, b) = (threaded.flat(), sequential.flat());
            let differing = if a.len() == b.len() {
                a.iter()
                    .zip(&b)
                    .filter(|(x, y)| x.to_bits() != y.to_bits())
                    .count()
            } else {
                a.len().max(b.len())
            };
            worst = worst.max(differing as f64);
        }
    }
    Ok(CheckReport::new(name, count, 0.0, worst))
}

/// Runs every check in `CHECK_NAMES` order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckReport>> {
    if let Some(name) = &opts.inject {
        if !CHECK_NAMES.contains(&name.as_str()) {
            return Err(Error::config(format!(
                "unknown check `{name}` (expected one of {})",
                CHECK_NAMES.join(", ")
            )));
        }
    }
    Ok(vec![
        check_parallel_equals_serial(opts)?,
        check_sampled_prob_identity(opts)?,
        check_gradcheck_cosface(opts)?,
        check_gradcheck_arcface(opts)?,
        check_rate_one_equivalence(opts)?,
        check_backend_equivalence(opts)?,
    ])
}

pub const REPORT_HEADER: [&str; 5] = ["check", "instances", "tolerance", "observed", "passed"];

pub fn write_report_csv<W: Write>(out: W, reports: &[CheckReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        w.write_record([
            r.name.to_string(),
            r.instances.to_string(),
            format!("{:e}", r.tolerance),
            format!("{:e}", r.observed),
            r.passed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
