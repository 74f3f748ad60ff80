//! Normalised margin logits, distributed softmax and cross-entropy.
//!
//! Each worker holds the columns of the logits that belong to its own slice
//! of class centers. Row statistics (max, denominator, true-class loss) are
//! combined with collectives, so the per-worker code never sees the full
//! class dimension.

use std::f64::consts::PI;

use crate::collectives::Communicator;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Tolerance on unit norms accepted by [`cosine_logits`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarginKind {
    None,
    CosFace,
    ArcFace,
}

impl std::str::FromStr for MarginKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "softmax" => Ok(MarginKind::None),
            "cosface" => Ok(MarginKind::CosFace),
            "arcface" => Ok(MarginKind::ArcFace),
            other => Err(Error::config(format!(
                "unknown loss `{other}` (expected none, cosface or arcface)"
            ))),
        }
    }
}

impl std::fmt::Display for MarginKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MarginKind::None => "none",
            MarginKind::CosFace => "cosface",
            MarginKind::ArcFace => "arcface",
        })
    }
}

/// Margin family, margin `m` and feature scale `s`.
///
/// For CosFace `m` is subtracted from the target cosine; for ArcFace it is
/// added to the target angle (radians).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginConfig {
    kind: MarginKind,
    m: f64,
    s: f64,
}

impl MarginConfig {
    pub const DEFAULT_SCALE: f64 = 64.0;
    pub const DEFAULT_COSFACE_MARGIN: f64 = 0.4;
    pub const DEFAULT_ARCFACE_MARGIN: f64 = 0.5;

    pub fn new(kind: MarginKind, m: f64, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::config(format!("scale must be positive, got {s}")));
        }
        let ok = match kind {
            MarginKind::None => true,
            MarginKind::CosFace => (0.0..1.0).contains(&m),
            MarginKind::ArcFace => (0.0..PI / 2.0).contains(&m),
        };
        if !ok {
            return Err(Error::config(format!("margin {m} out of range for {kind}")));
        }
        Ok(MarginConfig { kind, m, s })
    }

    pub fn cosface() -> Self {
        MarginConfig {
            kind: MarginKind::CosFace,
            m: Self::DEFAULT_COSFACE_MARGIN,
            s: Self::DEFAULT_SCALE,
        }
    }

    pub fn arcface() -> Self {
        MarginConfig {
            kind: MarginKind::ArcFace,
            m: Self::DEFAULT_ARCFACE_MARGIN,
            s: Self::DEFAULT_SCALE,
        }
    }

    /// Default margin for a family.
    pub fn default_margin(kind: MarginKind) -> f64 {
        match kind {
            MarginKind::None => 0.0,
            MarginKind::CosFace => Self::DEFAULT_COSFACE_MARGIN,
            MarginKind::ArcFace => Self::DEFAULT_ARCFACE_MARGIN,
        }
    }

    pub fn kind(&self) -> MarginKind {
        self.kind
    }

    pub fn margin(&self) -> f64 {
        self.m
    }

    pub fn scale(&self) -> f64 {
        self.s
    }

    /// Scaled logit of a target entry with cosine `c`.
    pub fn target_logit(&self, c: f64) -> f64 {
        let (m, s) = (self.m, self.s);
        match self.kind {
            MarginKind::None => s * c,
            MarginKind::CosFace => s * (c - m),
            MarginKind::ArcFace => {
                if c > -m.cos() {
                    // cos(θ + m) with θ = acos(c), θ + m < π
                    let sin_t = (1.0 - c * c).max(0.0).sqrt();
                    s * (c * m.cos() - sin_t * m.sin())
                } else {
                    s * (c - m * m.sin())
                }
            }
        }
    }

    /// Derivative of [`MarginConfig::target_logit`] with respect to `c`.
    pub fn target_slope(&self, c: f64) -> f64 {
        let (m, s) = (self.m, self.s);
        match self.kind {
            MarginKind::None | MarginKind::CosFace => s,
            MarginKind::ArcFace => {
                if c > -m.cos() {
                    let sin_t = (1.0 - c * c).max(1e-24).sqrt();
                    s * (m.cos() + c * m.sin() / sin_t)
                } else {
                    s
                }
            }
        }
    }
}

/// For each logits row, the local column of its label if this worker owns
/// (or sampled) that class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotBlock {
    hot: Vec<Option<usize>>,
}

impl OneHotBlock {
    pub fn new(hot: Vec<Option<usize>>) -> Self {
        OneHotBlock { hot }
    }

    /// Builds the block for a worker owning the global class interval
    /// `start..end`, laid out identically (column `j` is class `start + j`).
    pub fn for_range(labels: &[usize], start: usize, end: usize) -> Self {
        OneHotBlock {
            hot: labels
                .iter()
                .map(|&y| (start..end).contains(&y).then(|| y - start))
                .collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.hot.len()
    }

    pub fn get(&self, row: usize) -> Option<usize> {
        self.hot[row]
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.hot.iter().copied()
    }
}

/// Margin-adjusted, scaled logits of one worker.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsBlock {
    pub values: Matrix,
}

/// Softmax probabilities of one worker's columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbBlock {
    pub values: Matrix,
}

/// Cross-entropy over the global batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Rows whose true-class probability underflowed and was clamped.
    pub clamped_rows: usize,
    /// Rows whose label was present in some worker's columns.
    pub rows_with_target: usize,
}

fn check_unit(norms: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    for (i, n) in norms.enumerate() {
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::contract(format!(
                "{what} {i} has norm {n}, expected unit length"
            )));
        }
    }
    Ok(())
}

/// Cosines between unit feature rows and unit class-center columns.
pub fn cosine_logits(x_norm: &Matrix, w_norm: &Matrix) -> Result<Matrix> {
    check_unit(x_norm.row_norms().into_iter(), "feature row")?;
    check_unit(
        w_norm.transpose().row_norms().into_iter(),
        "class-center column",
    )?;
    x_norm.matmul(w_norm)
}

/// Applies the margin to target entries and scales everything by `s`.
pub fn apply_margin(
    cosines: &Matrix,
    hot: &OneHotBlock,
    cfg: &MarginConfig,
) -> Result<LogitsBlock> {
    check_rows(cosines, hot)?;
    let mut values = cosines.map(|c| cfg.s * c);
    for (i, h) in hot.iter().enumerate() {
        if let Some(j) = h {
            values.set(i, j, cfg.target_logit(cosines.get(i, j)));
        }
    }
    Ok(LogitsBlock { values })
}

/// Element-wise derivative of [`apply_margin`] with respect to the cosines.
pub fn margin_slope(cosines: &Matrix, hot: &OneHotBlock, cfg: &MarginConfig) -> Result<Matrix> {
    check_rows(cosines, hot)?;
    let mut slope = Matrix::from_fn(cosines.rows(), cosines.cols(), |_, _| cfg.s);
    for (i, h) in hot.iter().enumerate() {
        if let Some(j) = h {
            slope.set(i, j, cfg.target_slope(cosines.get(i, j)));
        }
    }
    Ok(slope)
}

fn check_rows(m: &Matrix, hot: &OneHotBlock) -> Result<()> {
    if m.rows() != hot.rows() {
        return Err(Error::contract(format!(
            "{} logits rows but {} one-hot rows",
            m.rows(),
            hot.rows()
        )));
    }
    if let Some(j) = hot.iter().flatten().find(|&j| j >= m.cols()) {
        return Err(Error::contract(format!(
            "one-hot column {j} out of {} columns",
            m.cols()
        )));
    }
    Ok(())
}

/// Row softmax over the union of every worker's columns.
///
/// Each row is shifted by its global maximum (one `allreduce_max`), local
/// denominators are summed with one `allreduce_sum`, and each worker keeps
/// the probabilities of its own columns.
pub fn softmax_rows(logits: &LogitsBlock, comm: &Communicator) -> Result<ProbBlock> {
    let z = &logits.values;
    let rows = z.rows();
    let local_max: Vec<f64> = (0..rows)
        .map(|i| z.row(i).iter().copied().fold(f64::MIN, f64::max))
        .collect();
    let row_max = comm.allreduce_max(&Matrix::new(rows, 1, local_max)?)?;

    let mut e = z.clone();
    let mut den_local = Vec::with_capacity(rows);
    for i in 0..rows {
        let shift = row_max.get(i, 0);
        let row = e.row_mut(i);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - shift).exp();
            sum += *v;
        }
        den_local.push(sum);
    }
    let den = comm.allreduce_sum(&Matrix::new(rows, 1, den_local)?)?;
    for i in 0..rows {
        let d = den.get(i, 0);
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Numeric(format!(
                "softmax denominator {d} in row {i}"
            )));
        }
        e.row_mut(i).iter_mut().for_each(|v| *v /= d);
    }
    e.ensure_finite("softmax_rows")?;
    Ok(ProbBlock { values: e })
}

/// `(prob − onehot) / global_batch`: gradient of the batch-mean
/// cross-entropy with respect to this worker's logits.
pub fn logits_gradient(prob: &ProbBlock, hot: &OneHotBlock, global_batch: usize) -> Result<Matrix> {
    check_rows(&prob.values, hot)?;
    let mut g = prob.values.clone();
    for (i, h) in hot.iter().enumerate() {
        if let Some(j) = h {
            g.set(i, j, g.get(i, j) - 1.0);
        }
    }
    let scale = 1.0 / global_batch as f64;
    Ok(g.map(|v| v * scale))
}

/// Mean negative log-likelihood of the true class over all rows.
///
/// The true-class probability lives on exactly one worker; per-worker
/// partial sums are combined with `allreduce_sum`. A row whose label is in
/// no worker's columns (possible only when positives are not forced into
/// the sampled set) contributes nothing.
pub fn cross_entropy_value(
    prob: &ProbBlock,
    hot: &OneHotBlock,
    comm: &Communicator,
) -> Result<CrossEntropy> {
    check_rows(&prob.values, hot)?;
    let (mut nll, mut clamped, mut present) = (0.0, 0.0, 0.0);
    for (i, h) in hot.iter().enumerate() {
        if let Some(j) = h {
            let p = prob.values.get(i, j);
            if p < PROB_FLOOR {
                clamped += 1.0;
            }
            nll -= p.max(PROB_FLOOR).ln();
            present += 1.0;
        }
    }
    let totals = comm.allreduce_sum(&Matrix::new(1, 3, vec![nll, clamped, present])?)?;
    Ok(CrossEntropy {
        loss: totals.get(0, 0) / prob.values.rows() as f64,
        clamped_rows: totals.get(0, 1) as usize,
        rows_with_target: totals.get(0, 2) as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collectives::{Backend, World};
    use crate::numerics::RngStream;

    fn single<R: Send>(f: impl Fn(&Communicator) -> Result<R> + Sync) -> R {
        World::new(1, Backend::Sequential)
            .unwrap()
            .run(f)
            .unwrap()
            .pop()
            .unwrap()
    }

    fn unit_rows(rng: &mut RngStream, rows: usize, d: usize) -> Matrix {
        Matrix::from_fn(rows, d, |_, _| rng.next_gaussian())
            .l2_normalize_rows()
            .unwrap()
    }

    #[test]
    fn cosine_examples() {
        let e1 = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let e2 = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(cosine_logits(&e1, &e1.transpose()).unwrap().get(0, 0), 1.0);
        assert_eq!(cosine_logits(&e1, &e2).unwrap().get(0, 0), 0.0);

        let mut rng = RngStream::new(5);
        let x = unit_rows(&mut rng, 4, 8);
        let w = unit_rows(&mut rng, 6, 8);
        let cos = cosine_logits(&x, &w.transpose()).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let dot: f64 = x.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b).sum();
                assert!((cos.get(i, j) - dot).abs() <= 1e-15);
                assert!(cos.get(i, j).abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn cosine_rejects_unnormalised() {
        let x = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        assert!(matches!(cosine_logits(&x, &w), Err(Error::Contract(_))));
        assert!(matches!(
            cosine_logits(&w.transpose(), &x.transpose()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn margin_examples() {
        let cos = Matrix::from_rows(&[vec![0.9, -0.2, 0.3]]).unwrap();
        let hot = OneHotBlock::new(vec![Some(0)]);

        let zero = MarginConfig::new(MarginKind::CosFace, 0.0, 1.0).unwrap();
        assert_eq!(apply_margin(&cos, &hot, &zero).unwrap().values, cos);

        let out = apply_margin(&cos, &hot, &MarginConfig::cosface())
            .unwrap()
            .values;
        assert!((out.get(0, 0) - 32.0).abs() < 1e-12);
        assert!((out.get(0, 1) + 12.8).abs() < 1e-12);

        let c = Matrix::new(1, 1, vec![0.3f64.cos()]).unwrap();
        let out = apply_margin(
            &c,
            &OneHotBlock::new(vec![Some(0)]),
            &MarginConfig::arcface(),
        )
        .unwrap()
        .values;
        let oracle = 64.0 * (c.get(0, 0).acos() + 0.5).cos();
        assert!((out.get(0, 0) - oracle).abs() < 1e-12);
        assert!((out.get(0, 0) - 64.0 * 0.8f64.cos()).abs() < 1e-12);

        let none = MarginConfig::new(MarginKind::None, 0.0, 2.0).unwrap();
        assert_eq!(
            apply_margin(&cos, &hot, &none).unwrap().values,
            cos.map(|v| 2.0 * v)
        );
    }

    #[test]
    fn arcface_fallback_past_pi() {
        let cfg = MarginConfig::arcface();
        // θ = 3.0, θ + m > π
        let c = 3.0f64.cos();
        assert!((cfg.target_logit(c) - 64.0 * (c - 0.5 * 0.5f64.sin())).abs() < 1e-12);
        assert_eq!(cfg.target_slope(c), 64.0);
    }

    #[test]
    fn margin_lowers_target_logit() {
        for cfg in [MarginConfig::cosface(), MarginConfig::arcface()] {
            let m = cfg.margin();
            for step in 1..1000 {
                let theta = (PI - m) * step as f64 / 1000.0;
                assert!(cfg.target_logit(theta.cos()) < cfg.scale() * theta.cos());
            }
        }
    }

    #[test]
    fn margin_slope_matches_difference_quotient() {
        for cfg in [MarginConfig::cosface(), MarginConfig::arcface()] {
            for c in [-0.99, -0.5, 0.0, 0.3, 0.8, 0.97] {
                let h = 1e-6;
                let fd = (cfg.target_logit(c + h) - cfg.target_logit(c - h)) / (2.0 * h);
                assert!((fd - cfg.target_slope(c)).abs() <= 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn margin_config_validation() {
        assert!(MarginConfig::new(MarginKind::CosFace, 1.0, 64.0).is_err());
        assert!(MarginConfig::new(MarginKind::ArcFace, 1.6, 64.0).is_err());
        assert!(MarginConfig::new(MarginKind::None, 0.0, 0.0).is_err());
    }

    #[test]
    fn softmax_single_class_and_symmetry() {
        let p = single(|c| {
            softmax_rows(
                &LogitsBlock {
                    values: Matrix::new(1, 1, vec![5.0])?,
                },
                c,
            )
        });
        assert_eq!(p.values.get(0, 0), 1.0);

        let out = World::new(2, Backend::Threaded)
            .unwrap()
            .run(|c| {
                softmax_rows(
                    &LogitsBlock {
                        values: Matrix::new(1, 1, vec![3.0])?,
                    },
                    c,
                )
            })
            .unwrap();
        assert!(out.iter().all(|p| p.values.get(0, 0) == 0.5));
    }

    #[test]
    fn softmax_matches_single_matrix_oracle() {
        let mut rng = RngStream::new(40);
        let rows = 5;
        let full = Matrix::from_fn(rows, 40, |_, _| 30.0 * rng.next_gaussian());
        let blocks: Vec<Vec<usize>> = (0..4).map(|r| (r * 10..r * 10 + 10).collect()).collect();
        let out = World::new(4, Backend::Threaded)
            .unwrap()
            .run(|c| {
                let local = full.select_columns(&blocks[c.rank()]);
                softmax_rows(&LogitsBlock { values: local }, c)
            })
            .unwrap();
        for i in 0..rows {
            let row = full.row(i);
            let mx = row.iter().copied().fold(f64::MIN, f64::max);
            let den: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let mut total = 0.0;
            for (r, p) in out.iter().enumerate() {
                for (jj, &j) in blocks[r].iter().enumerate() {
                    let oracle = (row[j] - mx).exp() / den;
                    assert!((p.values.get(i, jj) - oracle).abs() <= 1e-12);
                    total += p.values.get(i, jj);
                }
            }
            assert!((total - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = RngStream::new(41);
        let z = Matrix::from_fn(3, 9, |_, _| 20.0 * rng.next_gaussian());
        let shifted = Matrix::from_fn(3, 9, |i, j| z.get(i, j) + 100.0 * (i as f64 + 1.0));
        let a = single(|c| softmax_rows(&LogitsBlock { values: z.clone() }, c));
        let b = single(|c| {
            softmax_rows(
                &LogitsBlock {
                    values: shifted.clone(),
                },
                c,
            )
        });
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_examples() {
        let p = ProbBlock {
            values: Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
        };
        let g = logits_gradient(&p, &OneHotBlock::new(vec![Some(1)]), 1).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);

        let p = ProbBlock {
            values: Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap(),
        };
        let g = logits_gradient(&p, &OneHotBlock::new(vec![Some(0)]), 1).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn gradient_matches_finite_difference_of_loss() {
        let mut rng = RngStream::new(77);
        let (rows, cols) = (3, 5);
        let z = Matrix::from_fn(rows, cols, |_, _| rng.next_gaussian());
        let hot = OneHotBlock::new(vec![Some(1), Some(4), Some(0)]);
        let loss = |z: &Matrix| {
            single(|c| {
                let p = softmax_rows(&LogitsBlock { values: z.clone() }, c)?;
                cross_entropy_value(&p, &hot, c)
            })
            .loss
        };
        let p = single(|c| softmax_rows(&LogitsBlock { values: z.clone() }, c));
        let g = logits_gradient(&p, &hot, rows).unwrap();
        let h = 1e-6;
        for i in 0..rows {
            for j in 0..cols {
                let mut up = z.clone();
                up.set(i, j, z.get(i, j) + h);
                let mut dn = z.clone();
                dn.set(i, j, z.get(i, j) - h);
                let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
                let rel = (fd - g.get(i, j)).abs() / g.get(i, j).abs().max(1e-12);
                assert!(rel <= 1e-6, "({i},{j}) fd {fd} analytic {}", g.get(i, j));
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let hot = OneHotBlock::new(vec![Some(0), Some(1)]);
        let p = ProbBlock {
            values: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        };
        assert_eq!(single(|c| cross_entropy_value(&p, &hot, c)).loss, 0.0);

        let p = ProbBlock {
            values: Matrix::from_fn(2, 7, |_, _| 1.0 / 7.0),
        };
        let ce = single(|c| cross_entropy_value(&p, &hot, c));
        assert!((ce.loss - 7f64.ln()).abs() < 1e-12);

        let p = ProbBlock {
            values: Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
        };
        let ce = single(|c| cross_entropy_value(&p, &OneHotBlock::new(vec![Some(0)]), c));
        assert_eq!(ce.clamped_rows, 1);
        assert!((ce.loss + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_assembled_oracle() {
        let mut rng = RngStream::new(90);
        let (rows, k, per) = (6, 3, 4);
        let z = Matrix::from_fn(rows, k * per, |_, _| 5.0 * rng.next_gaussian());
        let labels: Vec<usize> = (0..rows).map(|_| rng.next_below(k * per)).collect();
        let losses = World::new(k, Backend::Threaded)
            .unwrap()
            .run(|c| {
                let cols: Vec<usize> = (c.rank() * per..(c.rank() + 1) * per).collect();
                let hot = OneHotBlock::for_range(&labels, c.rank() * per, (c.rank() + 1) * per);
                let p = softmax_rows(
                    &LogitsBlock {
                        values: z.select_columns(&cols),
                    },
                    c,
                )?;
                cross_entropy_value(&p, &hot, c)
            })
            .unwrap();
        let mut oracle = 0.0;
        for i in 0..rows {
            let row = z.row(i);
            let den: f64 = row.iter().map(|v| v.exp()).sum();
            oracle -= (row[labels[i]].exp() / den).ln();
        }
        oracle /= rows as f64;
        for ce in losses {
            assert!((ce.loss - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
            assert_eq!(ce.rows_with_target, rows);
        }
    }
}
