//! Analysis statistics over round reports and assessments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RoundReport;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl MetricSeries {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Result<Self> {
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidArgument("series t must be strictly increasing".into()));
        }
        Ok(Self {
            name: name.into(),
            points,
        })
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
}

/// Mean inverse distance to the centroid. Distances are clamped below at
/// 1e-12, so a client sitting on the centroid contributes 1e12.
pub fn alignment_score<V: AsRef<[f64]>>(client_embeddings: &[V], centroid: &[f64]) -> Result<f64> {
    if client_embeddings.is_empty() {
        return Err(Error::Empty("client embeddings"));
    }
    let mut total = 0.0;
    for z in client_embeddings {
        let z = z.as_ref();
        if z.len() != centroid.len() {
            return Err(Error::DimensionMismatch {
                expected: centroid.len(),
                actual: z.len(),
                context: "alignment embedding",
            });
        }
        let dist = z
            .iter()
            .zip(centroid)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += 1.0 / dist.max(1e-12);
    }
    Ok(total / client_embeddings.len() as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn ols_fit(xs: &[f64], ys: &[f64]) -> Result<RegressionFit> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            actual: ys.len(),
            context: "regression inputs",
        });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("regression needs at least 2 points".into()));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if !(sxx > 0.0) {
        return Err(Error::InvalidArgument("regression xs are all equal".into()));
    }
    let slope = sxy / sxx;
    let r = if syy > 0.0 {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(RegressionFit {
        slope,
        intercept: my - slope * mx,
        r,
    })
}

pub fn coefficient_of_variation(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let m = mean(samples);
    if m == 0.0 {
        return Err(Error::InvalidArgument(
            "coefficient of variation of zero-mean samples".into(),
        ));
    }
    Ok(std_dev(samples) / m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyDiagnostics {
    /// H(t) − H(0)
    pub shift: MetricSeries,
    pub delta: MetricSeries,
    /// OLS of the shift against t.
    pub fit: RegressionFit,
}

pub fn entropy_series_from_values(entropies: &[f64]) -> Result<EntropyDiagnostics> {
    if entropies.len() < 2 {
        return Err(Error::InvalidArgument("entropy series needs at least 2 rounds".into()));
    }
    let h0 = entropies[0];
    let ts: Vec<f64> = (0..entropies.len()).map(|t| t as f64).collect();
    let shift: Vec<f64> = entropies.iter().map(|h| h - h0).collect();
    let mut delta = vec![0.0];
    delta.extend(entropies.windows(2).map(|w| w[1] - w[0]));
    let fit = ols_fit(&ts, &shift)?;
    Ok(EntropyDiagnostics {
        shift: MetricSeries::new("entropy_shift", ts.iter().copied().zip(shift).collect())?,
        delta: MetricSeries::new("entropy_delta", ts.iter().copied().zip(delta).collect())?,
        fit,
    })
}

pub fn trust_entropy_series(reports: &[RoundReport]) -> Result<EntropyDiagnostics> {
    let hs: Vec<f64> = reports.iter().map(|r| r.entropy).collect();
    entropy_series_from_values(&hs)
}

pub fn zero_shot_accuracy<S: AsRef<str>, T: AsRef<str>>(predicted: &[S], truth: &[T]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: predicted.len(),
            context: "predictions vs truth",
        });
    }
    if predicted.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let hits = predicted
        .iter()
        .zip(truth)
        .filter(|(p, t)| p.as_ref() == t.as_ref())
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Rank-statistic AUROC: probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auroc(scores: &[f64], is_novel: &[bool]) -> Result<f64> {
    if scores.len() != is_novel.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: is_novel.len(),
            context: "scores vs labels",
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores"));
    }
    let n_pos = is_novel.iter().filter(|&&b| b).count();
    let n_neg = is_novel.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("auroc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if is_novel[idx] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedCurve {
    /// (bin center, mean y, count) for non-empty bins.
    pub bins: Vec<(f64, f64, usize)>,
    pub monotone_decreasing: bool,
}

/// Equal-width bins over the x range. Empty bins are skipped.
pub fn binned_curve(xs: &[f64], ys: &[f64], num_bins: usize) -> Result<BinnedCurve> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            actual: ys.len(),
            context: "curve inputs",
        });
    }
    if xs.is_empty() {
        return Err(Error::Empty("curve data"));
    }
    if num_bins < 2 {
        return Err(Error::InvalidArgument("binned curve needs at least 2 bins".into()));
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("curve xs"));
    }
    let width = (hi - lo) / num_bins as f64;
    let mut sums = vec![0.0; num_bins];
    let mut counts = vec![0usize; num_bins];
    for (x, y) in xs.iter().zip(ys) {
        let b = if width > 0.0 {
            (((x - lo) / width).floor() as usize).min(num_bins - 1)
        } else {
            0
        };
        sums[b] += y;
        counts[b] += 1;
    }
    let bins: Vec<(f64, f64, usize)> = (0..num_bins)
        .filter(|&b| counts[b] > 0)
        .map(|b| (lo + (b as f64 + 0.5) * width, sums[b] / counts[b] as f64, counts[b]))
        .collect();
    let monotone_decreasing = bins.windows(2).all(|w| w[1].1 <= w[0].1);
    Ok(BinnedCurve {
        bins,
        monotone_decreasing,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub accuracy: f64,
}

/// Novel-vs-seen detection accuracy for flag rule `score >= threshold`,
/// swept over all midpoints between distinct scores plus both extremes.
/// Returns every candidate and the best one (lowest threshold on ties).
pub fn threshold_sweep(scores: &[f64], is_novel: &[bool]) -> Result<(Vec<ThresholdChoice>, ThresholdChoice)> {
    if scores.len() != is_novel.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: is_novel.len(),
            context: "scores vs labels",
        });
    }
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = vec![sorted[0]];
    candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(sorted[sorted.len() - 1] + 1.0);
    let n = scores.len() as f64;
    let sweep: Vec<ThresholdChoice> = candidates
        .into_iter()
        .map(|threshold| {
            let correct = scores
                .iter()
                .zip(is_novel)
                .filter(|(s, nov)| (**s >= threshold) == **nov)
                .count();
            ThresholdChoice {
                threshold,
                accuracy: correct as f64 / n,
            }
        })
        .collect();
    let best = *sweep
        .iter()
        .reduce(|a, b| if b.accuracy > a.accuracy { b } else { a })
        .expect("non-empty sweep");
    Ok((sweep, best))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment_examples() {
        let c = [0.0, 0.0];
        assert_eq!(alignment_score(&[[1.0, 0.0], [0.0, -1.0]], &c).unwrap(), 1.0);
        assert_eq!(alignment_score(&[[2.0, 0.0], [0.0, 2.0]], &c).unwrap(), 0.5);
        assert_eq!(alignment_score(&[[0.0, 0.0]], &c).unwrap(), 1e12);
        assert!(alignment_score(&[[0.0]], &c).is_err());
    }

    #[test]
    fn ols_examples() {
        let xs = [0.0, 1.0, 2.0, 5.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let f = ols_fit(&xs, &ys).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r - 1.0).abs() < 1e-12);

        let f = ols_fit(&xs, &[3.0; 4]).unwrap();
        assert_eq!(f.slope, 0.0);
        assert_eq!(f.r, 0.0);

        assert!(ols_fit(&[1.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(ols_fit(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn cv_examples() {
        assert_eq!(coefficient_of_variation(&[4.0; 3]).unwrap(), 0.0);
        assert_eq!(coefficient_of_variation(&[1.0, 3.0]).unwrap(), 0.5);
        assert!(coefficient_of_variation(&[-1.0, 1.0]).is_err());
        assert!(coefficient_of_variation(&[]).is_err());
    }

    #[test]
    fn entropy_series_examples() {
        let d = entropy_series_from_values(&[2.0; 5]).unwrap();
        assert!(d.shift.values().iter().all(|v| *v == 0.0));
        assert_eq!(d.fit.slope, 0.0);

        let hs: Vec<f64> = (0..6).map(|t| 1.5 - 4e-5 * t as f64).collect();
        let d = entropy_series_from_values(&hs).unwrap();
        assert_eq!(d.shift.points[0].1, 0.0);
        assert!((d.fit.slope + 4e-5).abs() < 1e-12);
        assert!(d.fit.intercept.abs() < 1e-12);
        assert_eq!(d.delta.points[0].1, 0.0);
        assert!(entropy_series_from_values(&[1.0]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(zero_shot_accuracy(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(zero_shot_accuracy(&["a", "b"], &["b", "a"]).unwrap(), 0.0);
        let pred = ["a", "a", "a", "a", "a", "b", "b", "b"];
        let truth = ["a"; 8];
        assert_eq!(zero_shot_accuracy(&pred, &truth).unwrap(), 0.625);
        assert!(zero_shot_accuracy(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(
            auroc(&[0.9, 0.8, 0.7, 0.85], &[true, true, false, false]).unwrap(),
            0.75
        );
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn binned_curve_examples() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        let c = binned_curve(&xs, &neg, 4).unwrap();
        assert!(c.monotone_decreasing);
        assert!(c.bins.windows(2).all(|w| w[1].1 < w[0].1));
        assert!(binned_curve(&xs, &[1.0; 20], 5).unwrap().monotone_decreasing);
        assert!(!binned_curve(&xs, &xs, 3).unwrap().monotone_decreasing);
        assert!(binned_curve(&[], &[], 3).is_err());
        assert!(binned_curve(&xs, &xs, 1).is_err());
    }

    #[test]
    fn binned_curve_skips_empty_bins() {
        let c = binned_curve(&[0.0, 0.1, 1.0], &[3.0, 1.0, 0.5], 4).unwrap();
        assert_eq!(c.bins.len(), 2);
        assert_eq!(c.bins[0].2, 2);
        assert_eq!(c.bins[1].1, 0.5);
    }

    #[test]
    fn threshold_sweep_finds_separator() {
        let (sweep, best) = threshold_sweep(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(best.accuracy, 1.0);
        assert!((best.threshold - 0.5).abs() < 1e-12);
        assert_eq!(sweep.len(), 5);
    }
}
