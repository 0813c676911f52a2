//! Correlation primitives: Pearson, Spearman (average ranks for ties),
//! correlation-distance RDMs, and the leave-one-subject-out RSA score.

use ndarray::Array2;

use super::MetricsError;

/// Pearson correlation. Zero-variance input on either side yields 0 rather
/// than NaN: a constant signal explains nothing.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 2 {
        return Err(MetricsError::TooShort { len: x.len() });
    }
    Ok(pearson_unchecked(x, y))
}

pub(crate) fn pearson_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut scale_x = 0.0f64;
    let mut scale_y = 0.0f64;
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mx;
        let dy = yi - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
        scale_x = scale_x.max(xi.abs());
        scale_y = scale_y.max(yi.abs());
    }
    // Treat variance at the rounding floor of the data's scale as zero.
    let tiny_x = (1e-12 * scale_x).powi(2) * n;
    let tiny_y = (1e-12 * scale_y).powi(2) * n;
    if sxx <= tiny_x || syy <= tiny_y {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Fractional ranks, averaging over ties.
pub(crate) fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("rank input must be finite"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j share the same value; assign the average 1-based rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson on fractional ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < 2 {
        return Err(MetricsError::TooShort { len: a.len() });
    }
    Ok(pearson_unchecked(&fractional_ranks(a), &fractional_ranks(b)))
}

/// Representational dissimilarity matrix: square, symmetric, zero diagonal,
/// entries `1 - pearson(pattern_i, pattern_j)` in [0, 2].
#[derive(Debug, Clone, PartialEq)]
pub struct Rdm {
    pub data: Array2<f64>,
    pub metric: &'static str,
}

impl Rdm {
    pub fn side(&self) -> usize {
        self.data.dim().0
    }

    /// Strict upper triangle, row-major.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.side();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(self.data[[i, j]]);
            }
        }
        out
    }

    /// Entrywise mean of several same-sized RDMs.
    pub fn mean_of(rdms: &[&Rdm]) -> Rdm {
        let n = rdms[0].side();
        let mut data = Array2::<f64>::zeros((n, n));
        for rdm in rdms {
            data += &rdm.data;
        }
        data /= rdms.len() as f64;
        Rdm { data, metric: rdms[0].metric }
    }
}

/// Correlation-distance RDM over row patterns (stimuli x units). Rows are
/// standardized and correlations read off one matrix product, which matches
/// the pairwise Pearson definition to rounding.
pub fn compute_rdm(patterns: &Array2<f64>) -> Result<Rdm, MetricsError> {
    let (n, p) = patterns.dim();
    if n < 2 || p < 2 {
        return Err(MetricsError::TooShort { len: n.min(p) });
    }
    let mut z = patterns.clone();
    for mut row in z.rows_mut() {
        let mean = row.iter().sum::<f64>() / p as f64;
        let mut sq = 0.0;
        let mut scale = 0.0f64;
        for v in row.iter() {
            sq += (v - mean) * (v - mean);
            scale = scale.max(v.abs());
        }
        // Same zero-variance convention as `pearson`: a constant row
        // correlates with nothing.
        let tiny = (1e-12 * scale).powi(2) * p as f64;
        let inv = if sq <= tiny { 0.0 } else { 1.0 / (sq / p as f64).sqrt() };
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    let corr = super::encoding::par_matmul_t(z.view(), z.view());
    let mut data = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let r = (corr[[i, j]] / p as f64).clamp(-1.0, 1.0);
            data[[i, j]] = 1.0 - r;
            data[[j, i]] = 1.0 - r;
        }
    }
    Ok(Rdm { data, metric: "correlation" })
}

/// [`compute_rdm`] over single-precision patterns.
pub fn compute_rdm_f32(patterns: ndarray::ArrayView2<'_, f32>) -> Result<Rdm, MetricsError> {
    let converted = patterns.mapv(|v| v as f64);
    compute_rdm(&converted)
}

/// RSA against a set of subject RDMs, with the leave-one-subject-out lower
/// noise ceiling.
#[derive(Debug, Clone, PartialEq)]
pub struct RsaScore {
    /// Mean Spearman correlation between the model RDM and each subject RDM.
    pub raw: f64,
    /// Lower noise ceiling: mean over subjects of the correlation between a
    /// subject's RDM and the mean RDM of the remaining subjects.
    pub lower_ceiling: f64,
    /// `100 * raw / lower_ceiling`.
    pub normalized: f64,
}

pub fn rsa_score(model: &Rdm, subjects: &[Rdm]) -> Result<RsaScore, MetricsError> {
    if subjects.len() < 2 {
        return Err(MetricsError::TooFewSubjects { got: subjects.len() });
    }
    let side = model.side();
    for s in subjects {
        if s.side() != side {
            return Err(MetricsError::LengthMismatch { left: side, right: s.side() });
        }
    }
    let model_triu = model.upper_triangle();
    ensure_varied(&model_triu)?;
    let subject_trius: Vec<Vec<f64>> = subjects.iter().map(|s| s.upper_triangle()).collect();
    for t in &subject_trius {
        ensure_varied(t)?;
    }

    let mut raw = 0.0;
    for t in &subject_trius {
        raw += spearman(&model_triu, t)?;
    }
    raw /= subjects.len() as f64;

    let mut ceiling = 0.0;
    for (i, t) in subject_trius.iter().enumerate() {
        let others: Vec<&Rdm> = subjects
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, s)| s)
            .collect();
        let mean_others = Rdm::mean_of(&others).upper_triangle();
        ceiling += spearman(t, &mean_others)?;
    }
    ceiling /= subjects.len() as f64;

    if ceiling <= 0.0 {
        return Err(MetricsError::DegenerateNoiseCeiling { ceiling });
    }
    Ok(RsaScore { raw, lower_ceiling: ceiling, normalized: 100.0 * raw / ceiling })
}

fn ensure_varied(triu: &[f64]) -> Result<(), MetricsError> {
    let first = triu[0];
    if triu.iter().all(|&v| v == first) {
        return Err(MetricsError::DegenerateRdm);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use ndarray::array;

    #[test]
    fn pearson_identical_and_opposite() {
        let same = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((same - 1.0).abs() < 1e-12, "{same}");
        let opposite = pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap();
        assert!((opposite + 1.0).abs() < 1e-12, "{opposite}");
    }

    #[test]
    fn pearson_hand_computed() {
        // means 2.5/2.5, cov 4, variances 5 and 5 -> r = 4/5.
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_zero_variance_is_zero() {
        assert_eq!(pearson(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(pearson(&[0.1, 0.1, 0.1], &[1.0, 5.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn pearson_length_mismatch() {
        assert!(matches!(
            pearson(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn pearson_affine_invariance() {
        let mut rng = SeedStream::new(4);
        let x: Vec<f64> = (0..50).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let base = pearson(&x, &y).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| 3.5 * v + 7.0).collect();
        let y2: Vec<f64> = y.iter().map(|v| 0.1 * v - 2.0).collect();
        assert!((pearson(&x2, &y2).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn spearman_monotone_transform_is_one() {
        let a = vec![0.3, -1.2, 4.0, 2.2, 0.9];
        let b: Vec<f64> = a.iter().map(|&v: &f64| v.exp() + 10.0).collect();
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_ties_match_rank_oracle() {
        // Brute-force oracle: ranks by counting, ties averaged.
        fn oracle_ranks(v: &[f64]) -> Vec<f64> {
            v.iter()
                .map(|&x| {
                    let less = v.iter().filter(|&&y| y < x).count() as f64;
                    let equal = v.iter().filter(|&&y| y == x).count() as f64;
                    less + (equal + 1.0) / 2.0
                })
                .collect()
        }
        let a = vec![1.0, 2.0, 2.0, 3.0, 1.0, 4.0];
        let b = vec![5.0, 5.0, 2.0, 1.0, 3.0, 3.0];
        assert_eq!(fractional_ranks(&a), oracle_ranks(&a));
        let expected = pearson(&oracle_ranks(&a), &oracle_ranks(&b)).unwrap();
        assert!((spearman(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rdm_identical_rows_give_zero_distance() {
        let patterns = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [3.0, 1.0, 2.0]];
        let rdm = compute_rdm(&patterns).unwrap();
        assert!(rdm.data[[0, 1]].abs() < 1e-12);
        assert_eq!(rdm.data[[0, 0]], 0.0);
    }

    #[test]
    fn rdm_negated_row_gives_two() {
        let patterns = array![[1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]];
        let rdm = compute_rdm(&patterns).unwrap();
        assert!((rdm.data[[0, 1]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rdm_matches_pairwise_oracle() {
        let patterns = array![
            [0.5, -1.0, 2.0],
            [1.5, 0.0, -0.5],
            [2.0, 2.0, 1.0],
            [-1.0, 0.5, 0.5]
        ];
        let rdm = compute_rdm(&patterns).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j {
                    0.0
                } else {
                    let a: Vec<f64> = patterns.row(i).to_vec();
                    let b: Vec<f64> = patterns.row(j).to_vec();
                    1.0 - pearson(&a, &b).unwrap()
                };
                assert!((rdm.data[[i, j]] - expected).abs() < 1e-12);
                assert!((0.0..=2.0).contains(&rdm.data[[i, j]]));
            }
        }
    }

    #[test]
    fn rdm_invariant_to_positive_affine_row_transforms() {
        let mut rng = SeedStream::new(6);
        let mut patterns = Array2::<f64>::zeros((5, 8));
        for v in patterns.iter_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let base = compute_rdm(&patterns).unwrap();
        let mut scaled = patterns.clone();
        for (i, mut row) in scaled.rows_mut().into_iter().enumerate() {
            let a = 0.5 + i as f64;
            let b = i as f64 - 2.0;
            row.mapv_inplace(|v| a * v + b);
        }
        let transformed = compute_rdm(&scaled).unwrap();
        for (x, y) in base.data.iter().zip(transformed.data.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    fn random_rdm(rng: &mut SeedStream, side: usize) -> Rdm {
        let mut patterns = Array2::<f64>::zeros((side, 12));
        for v in patterns.iter_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        compute_rdm(&patterns).unwrap()
    }

    #[test]
    fn rsa_model_at_ceiling_scores_100() {
        let mut rng = SeedStream::new(9);
        let rdm = random_rdm(&mut rng, 10);
        let subjects = vec![rdm.clone(), rdm.clone(), rdm.clone()];
        let score = rsa_score(&rdm, &subjects).unwrap();
        assert!((score.normalized - 100.0).abs() < 1e-9, "{score:?}");
        assert!((score.raw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rsa_independent_model_near_zero() {
        // Null simulation: with 40 stimuli (780 pairs) and 3 subjects sharing
        // structure, an unrelated model RDM stays within a few percent.
        let mut rng = SeedStream::new(10);
        let shared = random_rdm(&mut rng, 40);
        let subjects: Vec<Rdm> = (0..3)
            .map(|_| {
                let mut jittered = shared.data.clone();
                for v in jittered.iter_mut() {
                    *v += rng.uniform(-0.05, 0.05);
                }
                for i in 0..40 {
                    jittered[[i, i]] = 0.0;
                }
                Rdm { data: jittered, metric: "correlation" }
            })
            .collect();
        let unrelated = random_rdm(&mut rng, 40);
        let score = rsa_score(&unrelated, &subjects).unwrap();
        assert!(score.normalized.abs() < 15.0, "{score:?}");
        assert!(score.lower_ceiling > 0.9, "{score:?}");
    }

    #[test]
    fn rsa_ceiling_matches_hand_computation() {
        let mut rng = SeedStream::new(11);
        let subjects: Vec<Rdm> = (0..3).map(|_| random_rdm(&mut rng, 6)).collect();
        let model = random_rdm(&mut rng, 6);
        let score = rsa_score(&model, &subjects).unwrap();

        // Hand-rolled leave-one-out.
        let mut expected_ceiling = 0.0;
        for i in 0..3 {
            let mut mean = Array2::<f64>::zeros((6, 6));
            for (j, s) in subjects.iter().enumerate() {
                if j != i {
                    mean += &s.data;
                }
            }
            mean /= 2.0;
            let mean_rdm = Rdm { data: mean, metric: "correlation" };
            expected_ceiling += spearman(
                &subjects[i].upper_triangle(),
                &mean_rdm.upper_triangle(),
            )
            .unwrap();
        }
        expected_ceiling /= 3.0;
        assert!((score.lower_ceiling - expected_ceiling).abs() < 1e-12);
    }

    #[test]
    fn rsa_rejects_constant_rdm() {
        let mut rng = SeedStream::new(12);
        let good = random_rdm(&mut rng, 5);
        let flat = Rdm { data: Array2::<f64>::ones((5, 5)), metric: "correlation" };
        assert!(matches!(
            rsa_score(&flat, &[good.clone(), good]),
            Err(MetricsError::DegenerateRdm)
        ));
    }

    #[test]
    fn rsa_requires_two_subjects() {
        let mut rng = SeedStream::new(13);
        let rdm = random_rdm(&mut rng, 5);
        assert!(matches!(
            rsa_score(&rdm, &[rdm.clone()]),
            Err(MetricsError::TooFewSubjects { got: 1 })
        ));
    }
}
