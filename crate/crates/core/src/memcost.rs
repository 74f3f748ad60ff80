//! Classification-layer memory model for model-parallel training.
//!
//! Per worker, with `c = ⌈C / k⌉` class centers:
//!
//! ```text
//! mem_w      = d · c · 4          bytes (fp32 weights)
//! mem_logits = N · k · c · 4      bytes (global batch × local classes)
//! mem_fc     = 3 · mem_w + 2 · mem_logits
//! ```
//!
//! The factor 3 covers weights, gradients and momentum; the factor 2 covers
//! logits and their gradient under a margin loss. All arithmetic is exact
//! integer math.

use crate::error::{Error, Result};

pub const BYTES_PER_ELEM: u64 = 4;
pub const WEIGHT_COPIES: u64 = 3;
pub const LOGIT_COPIES: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryProfile {
    pub d: u64,
    pub classes: u64,
    pub k: u64,
    pub n: u64,
    /// `⌈C / k⌉`, the largest per-worker class count.
    pub classes_per_worker: u64,
    /// Logit columns held per worker (equal to `classes_per_worker` unless
    /// sampled).
    pub logit_cols: u64,
    pub mem_w: u64,
    pub mem_logits: u64,
    pub mem_fc: u64,
}

impl MemoryProfile {
    /// Fraction of `mem_fc` taken by the logits terms.
    pub fn logits_share(&self) -> f64 {
        (LOGIT_COPIES * self.mem_logits) as f64 / self.mem_fc as f64
    }
}

fn checked(a: u64, b: u64) -> Result<u64> {
    a.checked_mul(b)
        .ok_or_else(|| Error::config("memory size overflows 64 bits"))
}

fn assemble(d: u64, classes: u64, k: u64, n: u64, logit_cols: u64) -> Result<MemoryProfile> {
    let per = classes.div_ceil(k);
    let mem_w = checked(checked(d, per)?, BYTES_PER_ELEM)?;
    let mem_logits = checked(checked(checked(n, k)?, logit_cols)?, BYTES_PER_ELEM)?;
    let mem_fc = checked(WEIGHT_COPIES, mem_w)?
        .checked_add(checked(LOGIT_COPIES, mem_logits)?)
        .ok_or_else(|| Error::config("memory size overflows 64 bits"))?;
    Ok(MemoryProfile {
        d,
        classes,
        k,
        n,
        classes_per_worker: per,
        logit_cols,
        mem_w,
        mem_logits,
        mem_fc,
    })
}

fn check_positive(d: u64, classes: u64, k: u64, n: u64) -> Result<()> {
    if d == 0 || classes == 0 || k == 0 || n == 0 {
        return Err(Error::config(format!(
            "d, C, k and N must be positive (got d={d}, C={classes}, k={k}, N={n})"
        )));
    }
    Ok(())
}

/// Full-softmax memory of one worker. Uses ceiling division when `k ∤ C`.
pub fn profile(d: u64, classes: u64, k: u64, n: u64) -> Result<MemoryProfile> {
    check_positive(d, classes, k, n)?;
    assemble(d, classes, k, n, classes.div_ceil(k))
}

/// Memory when only a fraction `r` of each worker's classes enters the
/// softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampledProfile {
    /// `mem_w` unchanged; logits width `round(r · ⌈C/k⌉)`.
    pub profile: MemoryProfile,
    /// Positive columns can never exceed the global batch `N · k` (nor the
    /// shard); this is the floor the logits width cannot go below when
    /// the batch's labels all land on one worker.
    pub positive_cols_bound: u64,
    pub positive_logits_bytes: u64,
}

pub fn sampled_profile(d: u64, classes: u64, k: u64, n: u64, rate: f64) -> Result<SampledProfile> {
    check_positive(d, classes, k, n)?;
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config(format!(
            "sampling rate must lie in (0, 1], got {rate}"
        )));
    }
    let per = classes.div_ceil(k);
    let cols = ((per as f64 * rate + 0.5).floor() as u64).min(per);
    let positive_cols_bound = checked(n, k)?.min(per);
    Ok(SampledProfile {
        profile: assemble(d, classes, k, n, cols)?,
        positive_cols_bound,
        positive_logits_bytes: checked(
            checked(checked(n, k)?, positive_cols_bound)?,
            BYTES_PER_ELEM,
        )?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GpuPlan {
    Feasible {
        k: u64,
        profile: MemoryProfile,
    },
    /// No candidate fits. `plateau` is set when even unlimited workers
    /// cannot fit: `mem_fc` never drops below `2 · N · C · 4` because the
    /// logits grow with the global batch.
    Infeasible {
        plateau: bool,
        logits_floor: u64,
    },
}

/// Smallest `k` among `candidates` whose `mem_fc` plus `reserved` bytes
/// (backbone, activations) fits `budget`.
pub fn min_gpus(
    budget: u64,
    reserved: u64,
    d: u64,
    classes: u64,
    n: u64,
    candidates: impl IntoIterator<Item = u64>,
) -> Result<GpuPlan> {
    if budget == 0 {
        return Err(Error::config("budget must be positive"));
    }
    let available = budget.saturating_sub(reserved);
    let mut ks: Vec<u64> = candidates.into_iter().collect();
    ks.sort_unstable();
    for k in ks {
        let p = profile(d, classes, k, n)?;
        if p.mem_fc <= available {
            return Ok(GpuPlan::Feasible { k, profile: p });
        }
    }
    let logits_floor = checked(checked(checked(LOGIT_COPIES, n)?, classes)?, BYTES_PER_ELEM)?;
    Ok(GpuPlan::Infeasible {
        plateau: available <= logits_floor,
        logits_floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GB: u64 = 1_000_000_000;

    #[test]
    fn one_million_classes_on_eight() {
        let p = profile(512, 1_000_000, 8, 64).unwrap();
        assert_eq!(p.mem_w, 256_000_000);
        assert_eq!(p.mem_logits, 256_000_000);
        assert_eq!(p.mem_fc, 1_280_000_000);
    }

    #[test]
    fn single_worker_has_no_sharding_benefit() {
        for c in [1, 17, 1000, 123_457] {
            assert_eq!(profile(64, c, 1, 3).unwrap().mem_w, 64 * c * 4);
        }
    }

    #[test]
    fn logits_dominate_at_128_workers() {
        let p = profile(512, 125_000 * 128, 128, 64).unwrap();
        assert_eq!(p.mem_logits / p.mem_w, 16);
        // optimiser-weighted ratio 2·logits / 3·w ≈ 10.7
        let weighted = (2 * p.mem_logits) as f64 / (3 * p.mem_w) as f64;
        assert!((weighted - 10.666_666_666_666_666).abs() < 1e-12);
        assert!(p.logits_share() >= 0.90);
    }

    #[test]
    fn ceiling_division() {
        let p = profile(2, 10, 4, 1).unwrap();
        assert_eq!(p.classes_per_worker, 3);
        assert_eq!(p.mem_w, 24);
    }

    #[test]
    fn zero_inputs_rejected() {
        assert!(profile(0, 1, 1, 1).is_err());
        assert!(profile(1, 1, 0, 1).is_err());
        assert!(min_gpus(0, 0, 1, 1, 1, [1]).is_err());
    }

    #[test]
    fn ten_million_on_eight_is_oom() {
        let p = profile(512, 10_000_000, 8, 64).unwrap();
        assert_eq!(p.mem_fc, 12_800_000_000);
        assert!(matches!(
            min_gpus(11 * GB, 0, 512, 10_000_000, 64, [8]).unwrap(),
            GpuPlan::Infeasible { plateau: false, .. }
        ));
    }

    #[test]
    fn tiny_problem_fits_one() {
        assert!(matches!(
            min_gpus(u64::MAX, 0, 8, 1000, 1, 1..=8).unwrap(),
            GpuPlan::Feasible { k: 1, .. }
        ));
    }

    #[test]
    fn eighty_workers_for_ten_million() {
        assert_eq!(
            profile(512, 10_000_000, 80, 64).unwrap().mem_fc,
            5_888_000_000
        );
        assert!(profile(512, 10_000_000, 64, 64).unwrap().mem_fc > 6 * GB);
        // whole 8-worker servers, 5.9 GB classification-layer budget
        match min_gpus(
            5_900_000_000,
            0,
            512,
            10_000_000,
            64,
            (1..=32).map(|s| 8 * s),
        )
        .unwrap()
        {
            GpuPlan::Feasible { k, .. } => assert_eq!(k, 80),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plateau_is_reported() {
        // floor = 2 · 64 · 10M · 4 = 5.12 GB
        match min_gpus(5 * GB, 0, 512, 10_000_000, 64, 1..=4096).unwrap() {
            GpuPlan::Infeasible {
                plateau,
                logits_floor,
            } => {
                assert!(plateau);
                assert_eq!(logits_floor, 5_120_000_000);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            min_gpus(6 * GB, 2 * GB, 512, 10_000_000, 64, [8, 16]).unwrap(),
            GpuPlan::Infeasible { plateau: true, .. }
        ));
    }

    #[test]
    fn sampled_examples() {
        let full = profile(512, 10_000_000, 64, 64).unwrap();
        let s1 = sampled_profile(512, 10_000_000, 64, 64, 1.0).unwrap();
        assert_eq!(s1.profile, full);
        let s = sampled_profile(512, 10_000_000, 64, 64, 0.1).unwrap();
        assert_eq!(s.profile.mem_logits * 10, full.mem_logits);
        assert_eq!(s.profile.mem_w, full.mem_w);
        let tiny = sampled_profile(512, 10_000_000, 64, 64, 1e-6).unwrap();
        assert_eq!(tiny.positive_cols_bound, 64 * 64);
        assert!(tiny.profile.logit_cols < tiny.positive_cols_bound);
    }
}
