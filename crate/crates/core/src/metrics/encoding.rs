//! Voxelwise encoding scores: a deterministic train/test split, feature
//! standardization on training statistics, ridge regression, and per-voxel
//! Pearson correlation on the held-out rows.
//!
//! The expensive parts of the pipeline (standardized design, kernel) depend
//! only on the features, so one [`EncodingDesign`] is built per feature
//! matrix and scored against any number of response matrices.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corr::pearson_unchecked;
use super::ridge::{cholesky, cholesky_solve};
use super::MetricsError;
use crate::rng::SeedStream;

/// Columns with training-split standard deviation at or below this are
/// dropped as constant.
const CONST_COLUMN_EPS: f64 = 1e-12;
/// Voxels with a noise ceiling at or below this are excluded from
/// ceiling-normalized scores.
pub const DEAD_VOXEL_NC: f64 = 0.01;
/// Row chunk for parallel kernel products; fixed so results are independent
/// of thread count.
const GRAM_CHUNK: usize = 32;

/// Deterministic train/test split: a seeded shuffle of row indices, first
/// `train_fraction` for training. The split seed is independent of weight
/// seeds so every genome sees the same rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.8, seed: 2025 }
    }
}

impl SplitSpec {
    /// Shuffled (train, test) row indices for `n` stimuli.
    pub fn split(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>), MetricsError> {
        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng = SeedStream::new(self.seed);
        // Fisher-Yates.
        for i in (1..n).rev() {
            let j = rng.index(i + 1);
            indices.swap(i, j);
        }
        let n_train = ((n as f64) * self.train_fraction).round() as usize;
        let n_train = n_train.min(n.saturating_sub(1)).max(1);
        let (train, test) = indices.split_at(n_train);
        if train.len() < 2 || test.len() < 2 {
            return Err(MetricsError::TooFewStimuli { train: train.len(), test: test.len() });
        }
        Ok((train.to_vec(), test.to_vec()))
    }
}

/// Per-voxel correlations plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingScore {
    pub per_voxel_r: Vec<f64>,
    pub mean_r: f64,
}

enum Solver {
    /// Gram matrix Z'Z (features x features) and its ridge factor.
    Primal { gram: Array2<f64>, factor: Array2<f64> },
    /// Kernel ZZ' (train x train), its ridge factor, and the test-train
    /// cross kernel.
    Dual { kernel: Array2<f64>, factor: Array2<f64>, cross: Array2<f64> },
}

/// The response-independent half of an encoding evaluation.
pub struct EncodingDesign {
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    z_train: Array2<f64>,
    z_test: Array2<f64>,
    solver: Solver,
    lambda: f64,
    lambda_grid: Option<Vec<f64>>,
    n_stimuli: usize,
}

/// `A B'` computed in fixed row chunks in parallel.
pub(crate) fn par_matmul_t(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (ra, _) = a.dim();
    let rb = b.dim().0;
    let mut out = Array2::<f64>::zeros((ra, rb));
    let a_chunks: Vec<_> = a.axis_chunks_iter(Axis(0), GRAM_CHUNK).collect();
    let out_chunks: Vec<_> = out.axis_chunks_iter_mut(Axis(0), GRAM_CHUNK).collect();
    a_chunks
        .into_par_iter()
        .zip(out_chunks)
        .for_each(|(ac, mut oc)| {
            oc.assign(&ac.dot(&b.t()));
        });
    out
}

impl EncodingDesign {
    /// Splits rows, z-scores each feature column on training statistics
    /// (constant columns dropped), and precomputes the ridge system for
    /// `lambda`. Picks the primal form when kept features fit within the
    /// training rows and the kernel form otherwise.
    pub fn new(
        features: ArrayView2<'_, f32>,
        split: &SplitSpec,
        lambda: f64,
    ) -> Result<Self, MetricsError> {
        Self::with_grid(features, split, lambda, None)
    }

    /// As [`EncodingDesign::new`], with an optional penalty grid searched per
    /// response set by 5-fold cross-validation on the training split.
    pub fn with_grid(
        features: ArrayView2<'_, f32>,
        split: &SplitSpec,
        lambda: f64,
        lambda_grid: Option<Vec<f64>>,
    ) -> Result<Self, MetricsError> {
        if lambda < 0.0 {
            return Err(MetricsError::NegativeLambda(lambda));
        }
        let (n, p) = features.dim();
        let (train_idx, test_idx) = split.split(n)?;
        let n_train = train_idx.len();

        // Training-split column statistics (population variance).
        let mut mean = vec![0.0f64; p];
        let mut sq = vec![0.0f64; p];
        for &row in &train_idx {
            for (c, &v) in features.row(row).iter().enumerate() {
                let v = v as f64;
                mean[c] += v;
                sq[c] += v * v;
            }
        }
        let inv_n = 1.0 / n_train as f64;
        let mut kept = Vec::with_capacity(p);
        let mut scales = Vec::with_capacity(p);
        for c in 0..p {
            mean[c] *= inv_n;
            let var = (sq[c] * inv_n - mean[c] * mean[c]).max(0.0);
            let std = var.sqrt();
            if std > CONST_COLUMN_EPS {
                kept.push(c);
                scales.push(1.0 / std);
            }
        }
        if kept.is_empty() {
            return Err(MetricsError::AllColumnsConstant);
        }

        let standardize = |rows: &[usize]| {
            let mut z = Array2::<f64>::zeros((rows.len(), kept.len()));
            for (zi, &row) in rows.iter().enumerate() {
                let src = features.row(row);
                for (zj, (&c, &s)) in kept.iter().zip(&scales).enumerate() {
                    z[[zi, zj]] = (src[c] as f64 - mean[c]) * s;
                }
            }
            z
        };
        let z_train = standardize(&train_idx);
        let z_test = standardize(&test_idx);

        let solver = if kept.len() <= n_train {
            let gram = z_train.t().dot(&z_train);
            let factor = cholesky(&ridged(&gram, lambda))?;
            Solver::Primal { gram, factor }
        } else {
            let kernel = par_matmul_t(z_train.view(), z_train.view());
            let factor = cholesky(&ridged(&kernel, lambda))?;
            let cross = par_matmul_t(z_test.view(), z_train.view());
            Solver::Dual { kernel, factor, cross }
        };
        Ok(Self {
            train_idx,
            test_idx,
            z_train,
            z_test,
            solver,
            lambda,
            lambda_grid,
            n_stimuli: n,
        })
    }

    pub fn train_len(&self) -> usize {
        self.train_idx.len()
    }

    pub fn feature_count(&self) -> usize {
        self.z_train.dim().1
    }

    /// Scores one response matrix (all stimuli x voxels): fit on the training
    /// rows, predict the held-out rows, Pearson per voxel.
    pub fn score(&self, responses: ArrayView2<'_, f64>) -> Result<EncodingScore, MetricsError> {
        let (rows, voxels) = responses.dim();
        if rows != self.n_stimuli {
            return Err(MetricsError::ShapeMismatch { got: rows, expected: self.n_stimuli });
        }
        if voxels == 0 {
            return Err(MetricsError::TooShort { len: 0 });
        }
        let gather = |idx: &[usize]| {
            let mut out = Array2::<f64>::zeros((idx.len(), voxels));
            for (i, &row) in idx.iter().enumerate() {
                out.row_mut(i).assign(&responses.row(row));
            }
            out
        };
        let y_train = gather(&self.train_idx);
        let y_test = gather(&self.test_idx);
        let y_mean = y_train.mean_axis(Axis(0)).expect("train rows nonempty");
        let y_centered = &y_train - &y_mean;

        let lambda = match &self.lambda_grid {
            Some(grid) if !grid.is_empty() => self.cross_validate(&y_centered, grid)?,
            _ => self.lambda,
        };

        let predictions = self.predict_centered(&y_centered, lambda)? + &y_mean;

        let mut per_voxel_r = Vec::with_capacity(voxels);
        let mut pred_col = Vec::with_capacity(self.test_idx.len());
        let mut actual_col = Vec::with_capacity(self.test_idx.len());
        for v in 0..voxels {
            pred_col.clear();
            actual_col.clear();
            pred_col.extend(predictions.column(v).iter().copied());
            actual_col.extend(y_test.column(v).iter().copied());
            per_voxel_r.push(pearson_unchecked(&pred_col, &actual_col));
        }
        let mean_r = per_voxel_r.iter().sum::<f64>() / voxels as f64;
        Ok(EncodingScore { per_voxel_r, mean_r })
    }

    /// Held-out predictions (centered targets in, centered predictions out).
    fn predict_centered(
        &self,
        y_centered: &Array2<f64>,
        lambda: f64,
    ) -> Result<Array2<f64>, MetricsError> {
        match &self.solver {
            Solver::Primal { gram, factor } => {
                let factor = if lambda == self.lambda {
                    factor.clone()
                } else {
                    cholesky(&ridged(gram, lambda))?
                };
                let weights = cholesky_solve(&factor, &self.z_train.t().dot(y_centered));
                Ok(self.z_test.dot(&weights))
            }
            Solver::Dual { kernel, factor, cross } => {
                let factor = if lambda == self.lambda {
                    factor.clone()
                } else {
                    cholesky(&ridged(kernel, lambda))?
                };
                let alpha = cholesky_solve(&factor, y_centered);
                Ok(cross.dot(&alpha))
            }
        }
    }

    /// Picks the grid penalty maximizing mean validation correlation over
    /// 5 interleaved folds of the training rows. Features keep the full-train
    /// standardization; fold targets are re-centered per fold.
    fn cross_validate(&self, y_centered: &Array2<f64>, grid: &[f64]) -> Result<f64, MetricsError> {
        const FOLDS: usize = 5;
        let n = self.train_idx.len();
        let kernel = match &self.solver {
            Solver::Dual { kernel, .. } => kernel.clone(),
            Solver::Primal { .. } => par_matmul_t(self.z_train.view(), self.z_train.view()),
        };
        let mut best = (f64::NEG_INFINITY, grid[0]);
        for &lambda in grid {
            let mut fold_scores = Vec::with_capacity(FOLDS);
            for fold in 0..FOLDS {
                let val: Vec<usize> = (0..n).filter(|i| i % FOLDS == fold).collect();
                let fit: Vec<usize> = (0..n).filter(|i| i % FOLDS != fold).collect();
                if val.len() < 2 || fit.len() < 2 {
                    continue;
                }
                let k_fit = gather_square(&kernel, &fit);
                let k_cross = gather_rect(&kernel, &val, &fit);
                let y_fit = gather_rows(y_centered, &fit);
                let y_val = gather_rows(y_centered, &val);
                let fit_mean = y_fit.mean_axis(Axis(0)).expect("fit rows nonempty");
                let yc = &y_fit - &fit_mean;
                let factor = cholesky(&ridged(&k_fit, lambda))?;
                let alpha = cholesky_solve(&factor, &yc);
                let preds = k_cross.dot(&alpha) + &fit_mean;
                let mut total = 0.0;
                for v in 0..preds.dim().1 {
                    let p: Vec<f64> = preds.column(v).to_vec();
                    let a: Vec<f64> = y_val.column(v).to_vec();
                    total += pearson_unchecked(&p, &a);
                }
                fold_scores.push(total / preds.dim().1 as f64);
            }
            let mean = fold_scores.iter().sum::<f64>() / fold_scores.len().max(1) as f64;
            if mean > best.0 {
                best = (mean, lambda);
            }
        }
        Ok(best.1)
    }
}

fn ridged(a: &Array2<f64>, lambda: f64) -> Array2<f64> {
    let mut out = a.clone();
    for i in 0..out.dim().0 {
        out[[i, i]] += lambda;
    }
    out
}

fn gather_square(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((idx.len(), idx.len()));
    for (i, &r) in idx.iter().enumerate() {
        for (j, &c) in idx.iter().enumerate() {
            out[[i, j]] = a[[r, c]];
        }
    }
    out
}

fn gather_rect(a: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows.len(), cols.len()));
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            out[[i, j]] = a[[r, c]];
        }
    }
    out
}

fn gather_rows(a: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows.len(), a.dim().1));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&a.row(r));
    }
    out
}

/// One-shot convenience over [`EncodingDesign`].
pub fn encoding_score(
    features: ArrayView2<'_, f32>,
    responses: ArrayView2<'_, f64>,
    split: &SplitSpec,
    lambda: f64,
) -> Result<EncodingScore, MetricsError> {
    EncodingDesign::new(features, split, lambda)?.score(responses)
}

/// Per-voxel noise-ceiling fraction from repeated presentations
/// (stimuli x repeats x voxels): the share of repeat-mean response variance
/// attributable to stimulus-driven signal.
pub fn encoding_noise_ceiling(responses: ArrayView3<'_, f32>) -> Result<Vec<f64>, MetricsError> {
    let (n_stim, n_rep, n_vox) = responses.dim();
    if n_rep < 2 {
        return Err(MetricsError::RepeatAxisMissing { repeats: n_rep });
    }
    if n_stim < 2 {
        return Err(MetricsError::TooShort { len: n_stim });
    }
    let r = n_rep as f64;
    let mut out = Vec::with_capacity(n_vox);
    for v in 0..n_vox {
        // Mean across-repeat variance (unbiased per stimulus).
        let mut noise = 0.0;
        let mut means = Vec::with_capacity(n_stim);
        for s in 0..n_stim {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for rep in 0..n_rep {
                let x = responses[[s, rep, v]] as f64;
                sum += x;
                sq += x * x;
            }
            let m = sum / r;
            means.push(m);
            noise += (sq - r * m * m).max(0.0) / (r - 1.0);
        }
        noise /= n_stim as f64;
        // Variance over stimuli of the repeat means (unbiased).
        let grand = means.iter().sum::<f64>() / n_stim as f64;
        let total = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (n_stim as f64 - 1.0);
        let noise_of_mean = noise / r;
        let signal = (total - noise_of_mean).max(0.0);
        let denom = signal + noise_of_mean;
        out.push(if denom > 0.0 { signal / denom } else { 0.0 });
    }
    Ok(out)
}

/// Percent of explainable variance: mean over voxels with a live noise
/// ceiling of `100 * max(r, 0)^2 / NC`. Negative correlations explain
/// nothing and are clipped before squaring.
pub fn normalized_encoding_score(r: &[f64], nc: &[f64]) -> Result<f64, MetricsError> {
    if r.len() != nc.len() {
        return Err(MetricsError::LengthMismatch { left: r.len(), right: nc.len() });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (&ri, &nci) in r.iter().zip(nc) {
        if nci > DEAD_VOXEL_NC {
            let pos = ri.max(0.0);
            total += pos * pos / nci;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * total / count as f64)
}
