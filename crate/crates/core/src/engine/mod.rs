//! Model-parallel trainer.
//!
//! Class centers are sharded column-wise over the workers; the backbone is
//! replicated and kept identical by summing its gradients across workers.
//! Each iteration the global batch is split into contiguous per-worker
//! blocks, so allgathering the features reproduces the global batch in
//! its original order regardless of the worker count.

mod backbone;
mod optim;
mod step;

pub use backbone::{Backbone, BackboneCache};
pub use optim::{scheduled_lr, sgd_momentum_step, OptimizerState, SgdConfig};
pub use step::{ca_pcc, forward_backward_full, forward_backward_sampled, StepOutput};

use crate::collectives::{Communicator, World};
use crate::dataio::{Dataset, Split};
use crate::error::{Error, Result};
use crate::margin_loss::MarginConfig;
use crate::numerics::{Matrix, RngStream};
use crate::sampler::{partition_classes, plan_rank, sampler_rng, ClassRange, SamplingMode, Shard};

pub const DATA_STREAM: u64 = 1;
pub const CENTER_INIT_STREAM: u64 = 2;
pub const BACKBONE_INIT_STREAM: u64 = 3;

/// Rows per block when scoring whole datasets.
const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Exact softmax over all classes.
    Full,
    /// Batch positives plus uniformly drawn negatives.
    Pprn,
    /// Uniformly drawn classes, labels ignored.
    FullyRandom,
}

impl TrainMode {
    pub fn sampling(self) -> Option<SamplingMode> {
        match self {
            TrainMode::Full => None,
            TrainMode::Pprn => Some(SamplingMode::Pprn),
            TrainMode::FullyRandom => Some(SamplingMode::FullyRandom),
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "pprn" => Ok(TrainMode::Pprn),
            "fully_random" | "random" => Ok(TrainMode::FullyRandom),
            other => Err(Error::config(format!(
                "unknown mode `{other}` (expected full, pprn or fully_random)"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Full => "full",
            TrainMode::Pprn => "pprn",
            TrainMode::FullyRandom => "fully_random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub workers: usize,
    pub batch_per_worker: usize,
    pub embedding_dim: usize,
    /// Width of the optional ReLU hidden layer; 0 means a linear backbone.
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub mode: TrainMode,
    pub rate: f64,
    pub margin: MarginConfig,
    pub lr0: f64,
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Metrics are recorded every `log_every` iterations and after the last.
    pub log_every: usize,
    /// Record wall-clock time in the metrics.
    pub timestamps: bool,
}

impl TrainConfig {
    /// Defaults for `n_classes` classes: s = 64, CosFace m = 0.4,
    /// lr 0.1, momentum 0.9, global batch 512 over 8 workers.
    pub fn new(n_classes: usize) -> Self {
        TrainConfig {
            workers: 8,
            batch_per_worker: 64,
            embedding_dim: 64,
            hidden_dim: 0,
            n_classes,
            mode: TrainMode::Pprn,
            rate: 0.1,
            margin: MarginConfig::cosface(),
            lr0: 0.1,
            lr_milestones: Vec::new(),
            momentum: 0.9,
            weight_decay: 5e-4,
            iterations: 1000,
            seed: 0,
            log_every: 10,
            timestamps: true,
        }
    }

    pub fn global_batch(&self) -> usize {
        self.workers * self.batch_per_worker
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.workers == 0 || self.batch_per_worker == 0 || self.embedding_dim == 0 {
            return fail("workers, batch size and embedding_dim must be positive".into());
        }
        if self.n_classes < self.workers {
            return fail(format!(
                "need at least one class per worker ({} classes, {} workers)",
                self.n_classes, self.workers
            ));
        }
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return fail(format!("sample_rate must lie in (0, 1], got {}", self.rate));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("lr_milestones must be strictly increasing".into());
        }
        if self.lr0.is_nan() || self.lr0 <= 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return fail("lr must be positive; momentum and weight_decay non-negative".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// Completed iterations.
    pub iteration: usize,
    pub loss: f64,
    pub ca_pcc: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    pub lr: f64,
    pub sampled_cols: usize,
    pub elapsed_s: Option<f64>,
    pub clamped_rows: usize,
}

/// Parameters and log of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub backbone: Backbone,
    /// Per-worker class-center shards, rank order.
    pub shards: Vec<Matrix>,
    pub final_eval_acc: Option<f64>,
    /// Mean cosine to the own class center over the training split.
    pub final_ca_pcc: f64,
}

impl TrainOutcome {
    /// The full `d × C` class-center matrix.
    pub fn class_centers(&self) -> Matrix {
        let rows: Vec<Matrix> = self.shards.iter().map(Matrix::transpose).collect();
        Matrix::vstack(&rows).expect("shards share d").transpose()
    }
}

/// Initial `d × C` class centers, i.i.d. standard normal.
pub fn init_class_centers(d: usize, n_classes: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::with_stream(seed, CENTER_INIT_STREAM);
    Matrix::from_fn(d, n_classes, |_, _| rng.next_gaussian())
}

struct Clock {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Clock {
    fn start() -> Self {
        Clock {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64()
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

struct RankResult {
    metrics: Vec<MetricsRecord>,
    backbone: Backbone,
    shard: Matrix,
    final_eval_acc: Option<f64>,
    final_ca_pcc: f64,
}

/// Runs `cfg.iterations` steps on `world` and returns the log and final
/// parameters. Deterministic for a given configuration and split.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    split: &Split,
    world: &World,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.n_classes != cfg.n_classes {
        return Err(Error::config(format!(
            "dataset has {} classes but the config expects {}",
            data.n_classes, cfg.n_classes
        )));
    }
    if world.size() != cfg.workers {
        return Err(Error::config(format!(
            "world of {} workers for a {}-worker config",
            world.size(),
            cfg.workers
        )));
    }
    if cfg.iterations > 0 && split.train.len() < cfg.global_batch() {
        return Err(Error::config(format!(
            "training split has {} samples, fewer than one global batch of {}",
            split.train.len(),
            cfg.global_batch()
        )));
    }
    let ranges = partition_classes(cfg.n_classes, cfg.workers)?;
    let centers = init_class_centers(cfg.embedding_dim, cfg.n_classes, cfg.seed);

    let mut results = world.run(|comm| {
        let range = ranges[comm.rank()];
        let cols: Vec<usize> = (range.start..range.end).collect();
        let shard = Shard {
            range,
            w: centers.select_columns(&cols),
        };
        train_rank(cfg, data, split, shard, comm)
    })?;

    let shards = results.iter().map(|r| r.shard.clone()).collect();
    let first = results.swap_remove(0);
    Ok(TrainOutcome {
        metrics: first.metrics,
        backbone: first.backbone,
        shards,
        final_eval_acc: first.final_eval_acc,
        final_ca_pcc: first.final_ca_pcc,
    })
}

fn gather_inputs(data: &Dataset, idx: &[usize]) -> Result<(Matrix, Vec<usize>)> {
    let mut values = Vec::with_capacity(idx.len() * data.input_dim);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        values.extend(data.row(i).iter().map(|&v| f64::from(v)));
        labels.push(data.labels[i] as usize);
    }
    Ok((Matrix::new(idx.len(), data.input_dim, values)?, labels))
}

fn train_rank(
    cfg: &TrainConfig,
    data: &Dataset,
    split: &Split,
    mut shard: Shard,
    comm: &Communicator,
) -> Result<RankResult> {
    let rank = comm.rank();
    let n = cfg.batch_per_worker;
    let global = cfg.global_batch();
    let clock = Clock::start();

    let mut backbone = Backbone::init(
        data.input_dim,
        cfg.hidden_dim,
        cfg.embedding_dim,
        &mut RngStream::with_stream(cfg.seed, BACKBONE_INIT_STREAM),
    );
    let mut backbone_state: Vec<OptimizerState> = backbone
        .layers
        .iter()
        .map(OptimizerState::for_param)
        .collect();
    let mut shard_state = OptimizerState::for_param(&shard.w);

    let mut data_rng = RngStream::with_stream(cfg.seed, DATA_STREAM);
    let mut order = split.train.clone();
    let mut cursor = order.len();
    let mut metrics = Vec::new();

    for t in 0..cfg.iterations {
        if cursor + global > order.len() {
            data_rng.shuffle(&mut order);
            cursor = 0;
        }
        let mine = &order[cursor + rank * n..cursor + (rank + 1) * n];
        cursor += global;

        let (inputs, labels) = gather_inputs(data, mine)?;
        let (x, cache) = backbone.forward(&inputs)?;

        let (step, touched) = match cfg.mode.sampling() {
            None => (
                forward_backward_full(&x, &labels, &shard, &cfg.margin, comm)?,
                None,
            ),
            Some(mode) => {
                let all_labels = comm.allgather_indices(&labels)?;
                let mut rng = sampler_rng(cfg.seed, rank, t, cfg.workers);
                let sample = plan_rank(&all_labels, &shard.range, cfg.rate, &mut rng, mode)?;
                let step =
                    forward_backward_sampled(&x, &labels, &shard, &sample, &cfg.margin, comm)?;
                (step, Some(sample.local_columns()))
            }
        };

        let lr = scheduled_lr(cfg.lr0, &cfg.lr_milestones, t);
        let sgd = SgdConfig {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let grads = backbone.backward(&cache, &step.grad_x)?;
        for ((layer, grad), state) in backbone
            .layers
            .iter_mut()
            .zip(grads)
            .zip(&mut backbone_state)
        {
            let total = comm.allreduce_sum(&grad)?;
            sgd_momentum_step(layer, &total, state, &sgd, None, t)?;
        }
        sgd_momentum_step(
            &mut shard.w,
            &step.grad_w,
            &mut shard_state,
            &sgd,
            touched.as_deref(),
            t,
        )?;

        let done = t + 1;
        if done % cfg.log_every == 0 || done == cfg.iterations {
            let eval_acc = if split.eval.is_empty() {
                None
            } else {
                Some(evaluate(&backbone, &shard, data, &split.eval, comm)?.0)
            };
            metrics.push(MetricsRecord {
                iteration: done,
                loss: step.loss,
                ca_pcc: step.ca_pcc,
                train_acc: step.correct as f64 / global as f64,
                eval_acc,
                lr,
                sampled_cols: step.sampled_cols,
                elapsed_s: cfg.timestamps.then(|| clock.elapsed()),
                clamped_rows: step.clamped_rows,
            });
        }
    }

    let final_eval_acc = if split.eval.is_empty() {
        None
    } else {
        Some(evaluate(&backbone, &shard, data, &split.eval, comm)?.0)
    };
    let final_ca_pcc = if split.train.is_empty() {
        0.0
    } else {
        evaluate(&backbone, &shard, data, &split.train, comm)?.1
    };
    Ok(RankResult {
        metrics: if rank == 0 { metrics } else { Vec::new() },
        backbone,
        shard: shard.w,
        final_eval_acc,
        final_ca_pcc,
    })
}

/// Nearest-center accuracy over all classes and mean own-center cosine
/// for the samples `idx`. Every worker scores all rows against its own
/// shard; per-row winners are combined with one allgather per block.
pub fn evaluate(
    backbone: &Backbone,
    shard: &Shard,
    data: &Dataset,
    idx: &[usize],
    comm: &Communicator,
) -> Result<(f64, f64)> {
    let range: ClassRange = shard.range;
    let w_unit = shard.w.l2_normalize_cols()?;
    let mut correct = 0usize;
    let mut own_sum = 0.0;
    for block in idx.chunks(EVAL_CHUNK) {
        let (inputs, labels) = gather_inputs(data, block)?;
        let x_unit = backbone.forward(&inputs)?.0.l2_normalize_rows()?;
        let cos = x_unit.matmul(&w_unit)?;
        let mut best = Matrix::zeros(block.len(), 2);
        for (i, &y) in labels.iter().enumerate() {
            let (mut bv, mut bj) = (f64::MIN, f64::MAX);
            for (j, &v) in cos.row(i).iter().enumerate() {
                if v > bv {
                    bv = v;
                    bj = (range.start + j) as f64;
                }
            }
            best.set(i, 0, bv);
            best.set(i, 1, bj);
            if range.contains(y) {
                own_sum += cos.get(i, y - range.start);
            }
        }
        correct += step::count_correct(&comm.allgather(&best)?, comm.world_size(), &labels);
    }
    let own = comm.allreduce_scalar(own_sum)?;
    let n = idx.len() as f64;
    Ok((correct as f64 / n, own / n))
}
