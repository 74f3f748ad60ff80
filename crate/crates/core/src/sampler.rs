//! Class-center sampling across workers.
//!
//! Class centers are split into contiguous, rank-ordered ranges. Each
//! iteration, every worker independently picks the columns it will use:
//!
//! * `Pprn` keeps every class that occurs in the global batch and adds
//!   `round((|range| − |positives|) · r)` uniformly drawn negatives.
//! * `FullyRandom` draws `round(|range| · r)` columns ignoring labels.
//!
//! Workers only need the allgathered label list and their own RNG stream,
//! so the per-worker budget is balanced without any extra communication.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

/// Stream id that keeps sampler draws apart from data shuffling.
pub const SAMPLER_STREAM: u64 = 0x5A4D_504C;

/// Global class interval `start..end` owned by `rank`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassRange {
    pub rank: usize,
    pub start: usize,
    pub end: usize,
    pub n_classes: usize,
}

impl ClassRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, class: usize) -> bool {
        (self.start..self.end).contains(&class)
    }
}

/// One worker's class centers, `d × |range|`.
#[derive(Clone, Debug)]
pub struct Shard {
    pub range: ClassRange,
    pub w: Matrix,
}

/// Splits `n_classes` into `k` contiguous ranges in rank order. The first
/// `n_classes % k` ranks hold one extra class.
pub fn partition_classes(n_classes: usize, k: usize) -> Result<Vec<ClassRange>> {
    if k == 0 || n_classes < k {
        return Err(Error::config(format!(
            "cannot split {n_classes} classes over {k} workers"
        )));
    }
    let (base, extra) = (n_classes / k, n_classes % k);
    let mut start = 0;
    Ok((0..k)
        .map(|rank| {
            let len = base + usize::from(rank < extra);
            let r = ClassRange {
                rank,
                start,
                end: start + len,
                n_classes,
            };
            start += len;
            r
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Every batch label kept, negatives drawn at the sampling rate.
    Pprn,
    /// Columns drawn at the sampling rate, labels ignored.
    FullyRandom,
}

/// Labels of the global batch that fall in `range`, deduplicated, ascending.
pub fn gather_positive_local(labels: &[usize], range: &ClassRange) -> Result<Vec<usize>> {
    if let Some(&y) = labels.iter().find(|&&y| y >= range.n_classes) {
        return Err(Error::Data(format!(
            "label {y} outside 0..{}",
            range.n_classes
        )));
    }
    let set: BTreeSet<usize> = labels
        .iter()
        .copied()
        .filter(|&y| range.contains(y))
        .collect();
    Ok(set.into_iter().collect())
}

/// Round-half-up of `x ≥ 0`.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Number of negatives a worker draws: `round((shard_size − positives) · r)`,
/// rounded half up and clamped to the available complement.
pub fn negative_budget(shard_size: usize, positives: usize, rate: f64) -> usize {
    let available = shard_size.saturating_sub(positives);
    round_half_up(available as f64 * rate).min(available)
}

/// `count` distinct classes of `range` outside `positives`, ascending.
pub fn sample_negatives(
    range: &ClassRange,
    positives: &[usize],
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let excluded: BTreeSet<usize> = positives.iter().copied().collect();
    let complement: Vec<usize> = (range.start..range.end)
        .filter(|c| !excluded.contains(c))
        .collect();
    if count > complement.len() {
        return Err(Error::contract(format!(
            "asked for {count} negatives but only {} classes remain on rank {}",
            complement.len(),
            range.rank
        )));
    }
    let mut picked = rng.next_uniform_indices(&complement, count)?;
    picked.sort_unstable();
    Ok(picked)
}

/// One worker's share of a [`SamplePlan`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankSample {
    pub range: ClassRange,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Negative budget `s_i` (for fully random sampling, the total draw).
    pub budget: usize,
    /// Sorted union of positives and negatives (global ids).
    pub columns: Vec<usize>,
}

impl RankSample {
    /// Sampled columns as offsets into the worker's shard.
    pub fn local_columns(&self) -> Vec<usize> {
        self.columns.iter().map(|c| c - self.range.start).collect()
    }

    /// Position of global class `class` among this worker's sampled
    /// columns.
    pub fn compact_of(&self, class: usize) -> Option<usize> {
        self.columns.binary_search(&class).ok()
    }
}

/// RNG stream a worker uses to sample at `iteration`.
pub fn sampler_rng(base_seed: u64, rank: usize, iteration: usize, world_size: usize) -> RngStream {
    let seed = base_seed
        .wrapping_add(rank as u64)
        .wrapping_add((iteration as u64).wrapping_mul(world_size as u64));
    RngStream::with_stream(seed, SAMPLER_STREAM)
}

/// Builds one worker's sampled column set from the global batch labels.
pub fn plan_rank(
    labels: &[usize],
    range: &ClassRange,
    rate: f64,
    rng: &mut RngStream,
    mode: SamplingMode,
) -> Result<RankSample> {
    check_rate(rate)?;
    let (positives, negatives, budget) = match mode {
        SamplingMode::Pprn => {
            let positives = gather_positive_local(labels, range)?;
            let budget = negative_budget(range.len(), positives.len(), rate);
            let negatives = sample_negatives(range, &positives, budget, rng)?;
            (positives, negatives, budget)
        }
        SamplingMode::FullyRandom => {
            gather_positive_local(labels, range)?;
            let budget = round_half_up(range.len() as f64 * rate).min(range.len());
            let drawn = sample_negatives(range, &[], budget, rng)?;
            (Vec::new(), drawn, budget)
        }
    };
    let mut columns: Vec<usize> = positives.iter().chain(&negatives).copied().collect();
    columns.sort_unstable();
    Ok(RankSample {
        range: *range,
        positives,
        negatives,
        budget,
        columns,
    })
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!(
            "sampling rate must lie in (0, 1], got {rate}"
        )))
    }
}

/// Sampled class set of every worker for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub rate: f64,
    pub mode: SamplingMode,
    pub ranks: Vec<RankSample>,
}

impl SamplePlan {
    /// Total number of sampled columns across workers.
    pub fn width(&self) -> usize {
        self.ranks.iter().map(|r| r.columns.len()).sum()
    }

    /// Compact column of a global class: ranks concatenated in order,
    /// ascending global id within each rank.
    pub fn compact_index(&self, class: usize) -> Option<usize> {
        let mut offset = 0;
        for r in &self.ranks {
            if r.range.contains(class) {
                return r.compact_of(class).map(|c| offset + c);
            }
            offset += r.columns.len();
        }
        None
    }

    /// All sampled global ids in compact order.
    pub fn global_columns(&self) -> Vec<usize> {
        self.ranks
            .iter()
            .flat_map(|r| r.columns.iter().copied())
            .collect()
    }
}

/// Builds the plan of every worker, each from its own stream (see
/// [`sampler_rng`]).
pub fn build_plan(
    labels: &[usize],
    ranges: &[ClassRange],
    rate: f64,
    base_seed: u64,
    iteration: usize,
    mode: SamplingMode,
) -> Result<SamplePlan> {
    check_rate(rate)?;
    let mut expected = 0;
    for (i, r) in ranges.iter().enumerate() {
        if r.rank != i || r.start != expected || r.end < r.start {
            return Err(Error::contract(
                "class ranges must be contiguous and rank-ordered",
            ));
        }
        expected = r.end;
    }
    if ranges.last().map(|r| r.end) != ranges.first().map(|r| r.n_classes) {
        return Err(Error::contract("class ranges must cover every class"));
    }
    let ranks = ranges
        .iter()
        .map(|range| {
            let mut rng = sampler_rng(base_seed, range.rank, iteration, ranges.len());
            plan_rank(labels, range, rate, &mut rng, mode)
        })
        .collect::<Result<_>>()?;
    Ok(SamplePlan { rate, mode, ranks })
}
