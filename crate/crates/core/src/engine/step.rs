//! One model-parallel forward/backward pass on one worker.

use crate::collectives::Communicator;
use crate::error::{Error, Result};
use crate::margin_loss::{
    apply_margin, cosine_logits, cross_entropy_value, logits_gradient, margin_slope, softmax_rows,
    MarginConfig, OneHotBlock, ProbBlock,
};
use crate::numerics::Matrix;
use crate::sampler::{RankSample, Shard};

/// Result of one pass on one worker.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Mean cross-entropy over the global batch (identical on every rank).
    pub loss: f64,
    pub clamped_rows: usize,
    /// Global batch rows whose label took part in the softmax.
    pub rows_with_target: usize,
    /// Gradient with respect to this worker's raw (unnormalised) features.
    pub grad_x: Matrix,
    /// Gradient with respect to this worker's raw class centers, full
    /// shard width; columns outside the sampled set are exactly zero.
    pub grad_w: Matrix,
    /// Probabilities over this worker's participating columns, one row per
    /// global batch row.
    pub prob: ProbBlock,
    /// Global class id of each `prob` column.
    pub columns: Vec<usize>,
    /// Global batch rows whose arg-max over the participating classes is
    /// their label.
    pub correct: usize,
    /// Mean cosine between each feature and its own class center.
    pub ca_pcc: f64,
    /// Participating classes summed over workers.
    pub sampled_cols: usize,
}

/// Gradient of `v / ‖v‖` pulled back to `v`, row by row.
pub(crate) fn normalize_rows_backward(unit: &Matrix, norms: &[f64], grad_unit: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(unit.rows(), unit.cols());
    for (i, &norm) in norms.iter().enumerate().take(unit.rows()) {
        let u = unit.row(i);
        let g = grad_unit.row(i);
        let dot: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &ui), &gi) in out.row_mut(i).iter_mut().zip(u).zip(g) {
            *o = (gi - ui * dot) / norm;
        }
    }
    out
}

/// Mean of row-wise dot products between unit features and the unit
/// centers of their own classes.
pub fn ca_pcc(x_norm: &Matrix, centers: &Matrix) -> Result<f64> {
    if x_norm.shape() != centers.shape() || x_norm.rows() == 0 {
        return Err(Error::contract(format!(
            "ca_pcc needs matching non-empty rows, got {:?} and {:?}",
            x_norm.shape(),
            centers.shape()
        )));
    }
    let total: f64 = (0..x_norm.rows())
        .map(|i| {
            x_norm
                .row(i)
                .iter()
                .zip(centers.row(i))
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum();
    Ok(total / x_norm.rows() as f64)
}

/// Exact full-class pass (every class center of the shard participates).
pub fn forward_backward_full(
    x: &Matrix,
    labels: &[usize],
    shard: &Shard,
    margin: &MarginConfig,
    comm: &Communicator,
) -> Result<StepOutput> {
    run(x, labels, shard, None, margin, comm)
}

/// Pass restricted to the worker's sampled columns. The softmax
/// denominator runs over the sampled set only; unsampled centers get a
/// zero gradient.
pub fn forward_backward_sampled(
    x: &Matrix,
    labels: &[usize],
    shard: &Shard,
    sample: &RankSample,
    margin: &MarginConfig,
    comm: &Communicator,
) -> Result<StepOutput> {
    if sample.range != shard.range {
        return Err(Error::contract(format!(
            "rank {} was given the plan of rank {}",
            shard.range.rank, sample.range.rank
        )));
    }
    run(
        x,
        labels,
        shard,
        Some(&sample.local_columns()),
        margin,
        comm,
    )
}

fn run(
    x: &Matrix,
    labels: &[usize],
    shard: &Shard,
    local_cols: Option<&[usize]>,
    margin: &MarginConfig,
    comm: &Communicator,
) -> Result<StepOutput> {
    let range = shard.range;
    let (n, d) = x.shape();
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    if shard.w.shape() != (d, range.len()) {
        return Err(Error::contract(format!(
            "shard of rank {} is {:?}, expected {:?}",
            range.rank,
            shard.w.shape(),
            (d, range.len())
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= range.n_classes) {
        return Err(Error::Data(format!(
            "label {y} outside 0..{}",
            range.n_classes
        )));
    }

    // gather normalised features of every worker
    let x_norms = x.row_norms();
    let x_unit = x.l2_normalize_rows()?;
    let big_x = comm.allgather(&x_unit)?;
    let all_labels = comm.allgather_indices(labels)?;
    let batch = big_x.rows();

    let w_sel = match local_cols {
        Some(cols) => shard.w.select_columns(cols),
        None => shard.w.clone(),
    };
    let w_sel_t = w_sel.transpose();
    let w_norms = w_sel_t.row_norms();
    let w_unit_t = w_sel_t.l2_normalize_rows()?;
    let w_unit = w_unit_t.transpose();

    let hot = OneHotBlock::new(
        all_labels
            .iter()
            .map(|&y| {
                if !range.contains(y) {
                    return None;
                }
                let local = y - range.start;
                match local_cols {
                    Some(cols) => cols.binary_search(&local).ok(),
                    None => Some(local),
                }
            })
            .collect(),
    );

    let cos = cosine_logits(&big_x, &w_unit)?;
    let logits = apply_margin(&cos, &hot, margin)?;
    let prob = softmax_rows(&logits, comm)?;
    let ce = cross_entropy_value(&prob, &hot, comm)?;

    let grad_logits = logits_gradient(&prob, &hot, batch)?;
    let grad_cos = grad_logits.zip_with(&margin_slope(&cos, &hot, margin)?, |g, s| g * s)?;

    // ∇ŵ = Xᵀ·∇cos ; ∇X = allreduce(∇cos·ŵᵀ)
    let grad_w_unit_t = grad_cos.transpose().matmul(&big_x)?;
    let grad_big_x = comm.allreduce_sum(&grad_cos.matmul(&w_unit_t)?)?;
    let rank = comm.rank();
    let grad_x_unit = grad_big_x.row_block(rank * n, (rank + 1) * n);
    let grad_x = normalize_rows_backward(&x_unit, &x_norms, &grad_x_unit);

    let grad_w_sel_t = normalize_rows_backward(&w_unit_t, &w_norms, &grad_w_unit_t);
    let grad_w = match local_cols {
        None => grad_w_sel_t.transpose(),
        Some(cols) => {
            let mut g = Matrix::zeros(d, range.len());
            for (jj, &j) in cols.iter().enumerate() {
                for (i, &v) in grad_w_sel_t.row(jj).iter().enumerate() {
                    g.set(i, j, v);
                }
            }
            g
        }
    };
    let columns: Vec<usize> = match local_cols {
        Some(cols) => cols.iter().map(|c| c + range.start).collect(),
        None => (range.start..range.end).collect(),
    };

    // arg-max over participating classes; ties go to the lowest class id
    let mut best = Matrix::zeros(batch, 2);
    for i in 0..batch {
        let (mut bv, mut bj) = (f64::MIN, f64::MAX);
        for (jj, &v) in cos.row(i).iter().enumerate() {
            if v > bv {
                bv = v;
                bj = columns[jj] as f64;
            }
        }
        best.set(i, 0, bv);
        best.set(i, 1, bj);
    }
    let correct = count_correct(&comm.allgather(&best)?, comm.world_size(), &all_labels);

    // cosine to the positive center, taken from the whole shard
    let mut own = 0.0;
    for (i, &y) in all_labels.iter().enumerate() {
        if range.contains(y) {
            let j = y - range.start;
            let mut dot = 0.0;
            let mut sq = 0.0;
            for (r, &xv) in big_x.row(i).iter().enumerate() {
                let wv = shard.w.get(r, j);
                dot += xv * wv;
                sq += wv * wv;
            }
            if sq == 0.0 {
                return Err(Error::Degenerate(format!("class center {y} has zero norm")));
            }
            own += dot / sq.sqrt();
        }
    }
    let totals = comm.allreduce_sum(&Matrix::new(1, 2, vec![own, columns.len() as f64])?)?;

    Ok(StepOutput {
        loss: ce.loss,
        clamped_rows: ce.clamped_rows,
        rows_with_target: ce.rows_with_target,
        grad_x,
        grad_w,
        prob,
        columns,
        correct,
        ca_pcc: totals.get(0, 0) / batch as f64,
        sampled_cols: totals.get(0, 1) as usize,
    })
}

/// Combines per-rank `(best value, class id)` rows gathered rank-major.
pub(crate) fn count_correct(gathered: &Matrix, k: usize, labels: &[usize]) -> usize {
    let rows = labels.len();
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        let (mut bv, mut bj) = (f64::MIN, f64::MAX);
        for r in 0..k {
            let v = gathered.get(r * rows + i, 0);
            let j = gathered.get(r * rows + i, 1);
            if v > bv || (v == bv && j < bj) {
                bv = v;
                bj = j;
            }
        }
        if bj == y as f64 {
            correct += 1;
        }
    }
    correct
}
