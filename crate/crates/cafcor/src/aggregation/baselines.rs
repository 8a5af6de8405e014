//! Standard robust aggregation rules used as comparison points.

use super::{check_corrupt_bound, AggregationError, UpdateBatch};
use crate::linalg;

const GM_TOL: f64 = 1e-8;
const GM_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineRule {
    /// Coordinate-wise trimmed mean: drop the `f` largest and `f` smallest
    /// per coordinate, average the rest.
    Cwtm,
    /// Coordinate-wise median.
    Cwmed,
    /// Geometric median by Weiszfeld iteration.
    Gm,
    /// Multi-Krum: average the `n - f` vectors with the smallest summed
    /// squared distances to their `n - f - 1` nearest neighbors.
    MultiKrum,
    /// Mean around median: per coordinate, average the `n - f` values
    /// closest to the median.
    Meamed,
}

pub fn baseline(
    rule: BaselineRule,
    batch: &UpdateBatch,
    corrupt_bound: usize,
) -> Result<Vec<f64>, AggregationError> {
    check_corrupt_bound(batch.len(), corrupt_bound)?;
    Ok(match rule {
        BaselineRule::Cwtm => trimmed_mean(batch, corrupt_bound),
        BaselineRule::Cwmed => coordinate_median(batch),
        BaselineRule::Gm => geometric_median(batch),
        BaselineRule::MultiKrum => multi_krum(batch, corrupt_bound),
        BaselineRule::Meamed => mean_around_median(batch, corrupt_bound),
    })
}

fn column(batch: &UpdateBatch, k: usize) -> Vec<f64> {
    batch.rows().iter().map(|r| r[k]).collect()
}

fn trimmed_mean(batch: &UpdateBatch, f: usize) -> Vec<f64> {
    let n = batch.len();
    (0..batch.dim())
        .map(|k| {
            let mut col = column(batch, k);
            col.sort_by(|a, b| a.total_cmp(b));
            let kept = &col[f..n - f];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect()
}

fn median_sorted(col: &[f64]) -> f64 {
    let n = col.len();
    if n % 2 == 1 {
        col[n / 2]
    } else {
        0.5 * (col[n / 2 - 1] + col[n / 2])
    }
}

fn coordinate_median(batch: &UpdateBatch) -> Vec<f64> {
    (0..batch.dim())
        .map(|k| {
            let mut col = column(batch, k);
            col.sort_by(|a, b| a.total_cmp(b));
            median_sorted(&col)
        })
        .collect()
}

fn geometric_median(batch: &UpdateBatch) -> Vec<f64> {
    let rows = batch.rows();
    let mut y = linalg::mean_rows(rows);
    let scale = rows
        .iter()
        .map(|r| linalg::norm(r))
        .fold(1.0f64, f64::max);

    for _ in 0..GM_MAX_ITERS {
        let mut num = vec![0.0; y.len()];
        let mut denom = 0.0;
        let mut at_point: Option<&Vec<f64>> = None;
        for r in rows {
            let dist = linalg::dist_sq(r, &y).sqrt();
            if dist <= 1e-18 * scale {
                at_point = Some(r);
                break;
            }
            let w = 1.0 / dist;
            linalg::axpy(&mut num, w, r);
            denom += w;
        }
        if let Some(r) = at_point {
            // Landed on a data point; within tolerance for our purposes.
            return r.clone();
        }
        linalg::scale(&mut num, 1.0 / denom);
        let step = linalg::dist_sq(&num, &y).sqrt();
        y = num;
        if step <= GM_TOL * (1.0 + linalg::norm(&y)) {
            break;
        }
    }
    y
}

fn multi_krum(batch: &UpdateBatch, f: usize) -> Vec<f64> {
    let n = batch.len();
    let rows = batch.rows();
    let keep = n - f;
    let neighbors = n - f - 1;

    let mut scores: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let mut dists: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| linalg::dist_sq(&rows[i], &rows[j]))
                .collect();
            dists.sort_by(|a, b| a.total_cmp(b));
            (dists[..neighbors].iter().sum::<f64>(), i)
        })
        .collect();
    scores.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let selected: Vec<Vec<f64>> = scores[..keep]
        .iter()
        .map(|&(_, i)| rows[i].clone())
        .collect();
    linalg::mean_rows(&selected)
}

fn mean_around_median(batch: &UpdateBatch, f: usize) -> Vec<f64> {
    let n = batch.len();
    let keep = n - f;
    (0..batch.dim())
        .map(|k| {
            let col = column(batch, k);
            let mut sorted = col.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let med = median_sorted(&sorted);
            let mut by_closeness: Vec<(f64, usize)> = col
                .iter()
                .enumerate()
                .map(|(i, v)| ((v - med).abs(), i))
                .collect();
            by_closeness.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            by_closeness[..keep]
                .iter()
                .map(|&(_, i)| col[i])
                .sum::<f64>()
                / keep as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]]) -> UpdateBatch {
        UpdateBatch::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn cwmed_odd_count() {
        let b = batch(&[&[0.0], &[1.0], &[2.0]]);
        assert_eq!(baseline(BaselineRule::Cwmed, &b, 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn cwmed_even_count_averages_middle() {
        let b = batch(&[&[0.0], &[1.0], &[3.0], &[10.0]]);
        assert_eq!(baseline(BaselineRule::Cwmed, &b, 1).unwrap(), vec![2.0]);
    }

    #[test]
    fn cwtm_trims_one_each_side() {
        let b = batch(&[&[0.0], &[10.0], &[20.0], &[1000.0]]);
        assert_eq!(baseline(BaselineRule::Cwtm, &b, 1).unwrap(), vec![15.0]);
    }

    #[test]
    fn gm_two_points_returns_midpoint() {
        let b = batch(&[&[0.0, 0.0], &[2.0, 2.0]]);
        let gm = baseline(BaselineRule::Gm, &b, 0).unwrap();
        assert!((gm[0] - 1.0).abs() < 1e-8);
        assert!((gm[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn gm_resists_far_outlier() {
        let b = batch(&[&[0.0], &[0.1], &[-0.1], &[0.05], &[1e6]]);
        let gm = baseline(BaselineRule::Gm, &b, 2).unwrap();
        assert!(gm[0].abs() < 0.2, "gm={gm:?}");
    }

    #[test]
    fn multikrum_drops_outlier() {
        let b = batch(&[&[1.0], &[1.1], &[0.9], &[1.05], &[100.0]]);
        let mk = baseline(BaselineRule::MultiKrum, &b, 1).unwrap();
        // The four closest vectors average near 1.0125.
        assert!((mk[0] - 1.0125).abs() < 1e-9, "mk={mk:?}");
    }

    #[test]
    fn meamed_keeps_values_near_median() {
        let b = batch(&[&[0.0], &[1.0], &[2.0], &[50.0]]);
        // Median is 1.5; closest three are {0,1,2}.
        let mm = baseline(BaselineRule::Meamed, &b, 1).unwrap();
        assert!((mm[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_corrupt_bound_rejected() {
        let b = batch(&[&[1.0], &[2.0]]);
        for rule in [
            BaselineRule::Cwtm,
            BaselineRule::Cwmed,
            BaselineRule::Gm,
            BaselineRule::MultiKrum,
            BaselineRule::Meamed,
        ] {
            assert!(baseline(rule, &b, 1).is_err());
        }
    }
}
