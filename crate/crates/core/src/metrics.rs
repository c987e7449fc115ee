//! Forecast quality and series complexity measures.
//!
//! * point errors: MSE, MAE, RMSE and R²;
//! * sequence accuracy: per-sample DTW alignment error, thresholded into an
//!   accuracy curve whose normalized area is reported as AUC;
//! * Bandt–Pompe ordinal patterns: normalized permutation entropy `H` and
//!   Jensen–Shannon statistical complexity `C`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordinal pattern length used when none is given.
pub const DEFAULT_EMBEDDING_DIMENSION: usize = 6;
/// Number of thresholds in the accuracy sweep.
pub const DEFAULT_SWEEP_RESOLUTION: usize = 1000;

/// Coefficient of determination, which does not exist for constant ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RSquared {
    Defined(f64),
    Undefined { undefined: String },
}

impl RSquared {
    pub fn value(&self) -> Option<f64> {
        match self {
            RSquared::Defined(v) => Some(*v),
            RSquared::Undefined { .. } => None,
        }
    }
}

impl fmt::Display for RSquared {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RSquared::Defined(v) => write!(f, "{v:.6}"),
            RSquared::Undefined { .. } => write!(f, "NaN"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub n: usize,
    pub truth_mean: f64,
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub r2: RSquared,
}

pub fn point_metrics(truth: &[f64], pred: &[f64]) -> Result<PointMetrics> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension {
            op: "point_metrics",
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    if truth.is_empty() {
        return Err(Error::Contract("point metrics need at least one sample".into()));
    }
    let n = truth.len() as f64;
    let truth_mean = truth.iter().sum::<f64>() / n;
    let mut sse = 0.0;
    let mut sae = 0.0;
    let mut sst = 0.0;
    for (y, p) in truth.iter().zip(pred) {
        sse += (y - p) * (y - p);
        sae += (y - p).abs();
        sst += (y - truth_mean) * (y - truth_mean);
    }
    let mse = sse / n;
    let r2 = if truth.len() < 2 {
        RSquared::Undefined {
            undefined: "R² needs at least two samples".into(),
        }
    } else if sst == 0.0 {
        RSquared::Undefined {
            undefined: "ground truth is constant".into(),
        }
    } else {
        RSquared::Defined(1.0 - sse / sst)
    };
    Ok(PointMetrics {
        n: truth.len(),
        truth_mean,
        mse,
        mae: sae / n,
        rmse: mse.sqrt(),
        r2,
    })
}

/// Optimal warping cost and the length of the optimal path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DtwAlignment {
    pub distance: f64,
    pub path_len: usize,
}

/// Dynamic time warping under absolute-difference cost with the usual
/// boundary, continuity and monotonicity constraints.
pub fn dtw(x: &[f64], y: &[f64]) -> Result<f64> {
    dtw_alignment(x, y).map(|a| a.distance)
}

/// DTW distance plus the length of the optimal path; among equal-cost
/// predecessors the diagonal step wins, then the shorter path.
pub fn dtw_alignment(x: &[f64], y: &[f64]) -> Result<DtwAlignment> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Contract("dtw of an empty sequence".into()));
    }
    let m = y.len();
    let mut prev: Vec<(f64, usize)> = vec![(f64::INFINITY, 0); m];
    let mut cur: Vec<(f64, usize)> = vec![(f64::INFINITY, 0); m];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..m {
            let cost = (xi - y[j]).abs();
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let diag = if i > 0 && j > 0 {
                    prev[j - 1]
                } else {
                    (f64::INFINITY, 0)
                };
                let up = if i > 0 { prev[j] } else { (f64::INFINITY, 0) };
                let left = if j > 0 { cur[j - 1] } else { (f64::INFINITY, 0) };
                [diag, up, left]
                    .into_iter()
                    .reduce(|a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a })
                    .expect("three candidates")
            };
            cur[j] = (best.0 + cost, best.1 + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (distance, path_len) = prev[m - 1];
    Ok(DtwAlignment { distance, path_len })
}

/// Per-sample sequence error: DTW cost averaged over the aligned path.
pub fn dtw_error(forecast: &[f64], truth: &[f64]) -> Result<f64> {
    let a = dtw_alignment(forecast, truth)?;
    Ok(a.distance / a.path_len as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtwAccuracyCurve {
    pub errors: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Area under accuracy over the threshold axis normalized to `[0, 1]`.
    pub auc: f64,
}

impl DtwAccuracyCurve {
    /// Fraction of samples whose error lies strictly below `tau`.
    pub fn accuracy_at(&self, tau: f64) -> f64 {
        self.errors.iter().filter(|&&e| e < tau).count() as f64 / self.errors.len() as f64
    }
}

/// Sweeps `resolution` uniform thresholds over `[0, max error]` and integrates
/// the success rate by the trapezoid rule.
pub fn accuracy_auc(errors: &[f64], resolution: usize) -> Result<DtwAccuracyCurve> {
    if errors.is_empty() {
        return Err(Error::Contract("accuracy curve needs at least one sample".into()));
    }
    if resolution < 2 {
        return Err(Error::Contract("threshold sweep needs at least two points".into()));
    }
    if let Some(bad) = errors.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(Error::Input(format!(
            "sample error {bad} is not a finite non-negative number"
        )));
    }
    let max = errors.iter().copied().fold(0.0, f64::max);
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    if max == 0.0 {
        return Ok(DtwAccuracyCurve {
            errors: errors.to_vec(),
            thresholds: (0..resolution).map(|i| i as f64 / (resolution - 1) as f64).collect(),
            accuracy: vec![1.0; resolution],
            auc: 1.0,
        });
    }
    let n = errors.len() as f64;
    let thresholds: Vec<f64> = (0..resolution)
        .map(|i| max * i as f64 / (resolution - 1) as f64)
        .collect();
    let accuracy: Vec<f64> = thresholds
        .iter()
        .map(|&tau| sorted.partition_point(|&e| e < tau) as f64 / n)
        .collect();
    let step = 1.0 / (resolution - 1) as f64;
    let auc = accuracy.windows(2).map(|w| 0.5 * (w[0] + w[1]) * step).sum();
    Ok(DtwAccuracyCurve {
        errors: errors.to_vec(),
        thresholds,
        accuracy,
        auc,
    })
}

/// DTW error per (forecast, truth) pair followed by [`accuracy_auc`].
pub fn dtw_accuracy(forecasts: &[Vec<f64>], truths: &[Vec<f64>], resolution: usize) -> Result<DtwAccuracyCurve> {
    if forecasts.len() != truths.len() {
        return Err(Error::Dimension {
            op: "dtw_accuracy",
            lhs: vec![forecasts.len()],
            rhs: vec![truths.len()],
        });
    }
    let errors = forecasts
        .iter()
        .zip(truths)
        .map(|(f, t)| dtw_error(f, t))
        .collect::<Result<Vec<_>>>()?;
    accuracy_auc(&errors, resolution)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrdinalDistribution {
    pub dimension: usize,
    /// Probability of each of the `d!` patterns, indexed by Lehmer code.
    pub probabilities: Vec<f64>,
    /// Normalized permutation entropy `H ∈ [0, 1]`.
    pub entropy: f64,
    /// Jensen–Shannon divergence to the uniform distribution.
    pub js_divergence: f64,
    /// Statistical complexity `C = H · D_JS / max D_JS`.
    pub complexity: f64,
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// Lehmer-code index of the stable argsort of `window`.
fn pattern_index(window: &[f64], order: &mut Vec<usize>) -> usize {
    order.clear();
    order.extend(0..window.len());
    // stable: equal values keep their order of occurrence
    order.sort_by(|&a, &b| window[a].total_cmp(&window[b]));
    let d = order.len();
    let mut index = 0;
    for i in 0..d {
        let smaller = order[i + 1..].iter().filter(|&&v| v < order[i]).count();
        index = index * (d - i) + smaller;
    }
    index
}

fn shannon(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter().filter(|&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

/// Ordinal-pattern statistics of `series` for embedding dimension `d`.
pub fn complexity(series: &[f64], d: usize) -> Result<OrdinalDistribution> {
    if d < 2 {
        return Err(Error::Contract(format!("embedding dimension {d} must be at least 2")));
    }
    if series.len() < d + 1 {
        return Err(Error::Contract(format!(
            "series of length {} too short for embedding dimension {d}",
            series.len()
        )));
    }
    let n_patterns = factorial(d);
    let mut counts = vec![0usize; n_patterns];
    let mut scratch = Vec::with_capacity(d);
    for window in series.windows(d) {
        counts[pattern_index(window, &mut scratch)] += 1;
    }
    let total = (series.len() - d + 1) as f64;
    let probabilities: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let n = n_patterns as f64;
    let s_p = shannon(probabilities.iter().copied());
    let entropy = s_p / n.ln();
    let s_mix = shannon(probabilities.iter().map(|p| 0.5 * (p + 1.0 / n)));
    let js_divergence = (s_mix - 0.5 * s_p - 0.5 * n.ln()).max(0.0);
    let js_max = -0.5 * (((n + 1.0) / n) * (n + 1.0).ln() + n.ln() - 2.0 * (2.0 * n).ln());
    Ok(OrdinalDistribution {
        dimension: d,
        probabilities,
        entropy,
        js_divergence,
        complexity: entropy * js_divergence / js_max,
    })
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over every monotone, continuous warping path from (0,0) to (n-1,m-1).
    fn brute_force_dtw(x: &[f64], y: &[f64]) -> f64 {
        fn walk(x: &[f64], y: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
            let acc = acc + (x[i] - y[j]).abs();
            if i == x.len() - 1 && j == y.len() - 1 {
                *best = best.min(acc);
                return;
            }
            if i + 1 < x.len() {
                walk(x, y, i + 1, j, acc, best);
            }
            if j + 1 < y.len() {
                walk(x, y, i, j + 1, acc, best);
            }
            if i + 1 < x.len() && j + 1 < y.len() {
                walk(x, y, i + 1, j + 1, acc, best);
            }
        }
        let mut best = f64::INFINITY;
        walk(x, y, 0, 0, 0.0, &mut best);
        best
    }

    #[test]
    fn point_metric_examples() {
        let y = [1.0, 2.0, 3.0];
        let m = point_metrics(&y, &y).unwrap();
        assert_eq!((m.mse, m.mae, m.rmse, m.r2.value()), (0.0, 0.0, 0.0, Some(1.0)));

        let m = point_metrics(&y, &[2.0, 2.0, 2.0]).unwrap();
        assert!((m.mse - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.mae - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.rmse, m.mse.sqrt());
        assert_eq!(m.r2.value(), Some(0.0));
    }

    #[test]
    fn r2_can_be_negative_and_is_undefined_for_constant_truth() {
        let m = point_metrics(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!(m.r2.value().unwrap() < 0.0);
        let m = point_metrics(&[2.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!(m.r2.value().is_none());
        assert_eq!(m.r2.to_string(), "NaN");
        assert!(point_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn dtw_examples() {
        assert_eq!(dtw(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let x = [0.0, 0.0, 1.0];
        let y = [0.0, 1.0];
        assert_eq!(brute_force_dtw(&x, &y), 0.0);
        assert_eq!(dtw(&x, &y).unwrap(), 0.0);
        assert!(matches!(dtw(&[], &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn dtw_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let m = rng.random_range(1..=6);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3..=3) as f64).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.random_range(-3..=3) as f64).collect();
            assert_eq!(dtw(&x, &y).unwrap(), brute_force_dtw(&x, &y), "{x:?} {y:?}");
        }
    }

    #[test]
    fn dtw_error_normalizes_by_path_length() {
        let a = dtw_alignment(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(a.distance, 2.0);
        assert_eq!(a.path_len, 2);
        assert_eq!(dtw_error(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_examples() {
        let c = accuracy_auc(&[0.0, 0.0, 0.0], 100).unwrap();
        assert_eq!(c.auc, 1.0);
        assert!(c.accuracy.iter().all(|&a| a == 1.0));

        // one sample: success only once tau passes its error, which sits at the top of the axis
        let c = accuracy_auc(&[2.5], 1000).unwrap();
        assert!(c.auc.abs() < 1e-12);
        assert_eq!(c.accuracy_at(2.6), 1.0);
    }

    /// Exact integral of the step function u ↦ #{e < u·max}/N over [0, 1].
    fn step_integral(errors: &[f64]) -> f64 {
        let max = errors.iter().copied().fold(0.0, f64::max);
        errors.iter().map(|e| 1.0 - e / max).sum::<f64>() / errors.len() as f64
    }

    #[test]
    fn auc_matches_closed_form_step_integral() {
        let errors = [1.0, 2.0, 3.0, 4.0];
        let c = accuracy_auc(&errors, 1000).unwrap();
        let exact = step_integral(&errors);
        assert!((exact - 0.375).abs() < 1e-15);
        assert!((c.auc - exact).abs() <= 2.0 / 1000.0, "{} vs {exact}", c.auc);
    }

    #[test]
    fn complexity_extremes() {
        let increasing: Vec<f64> = (0..50).map(f64::from).collect();
        let o = complexity(&increasing, 4).unwrap();
        assert_eq!(o.entropy, 0.0);
        assert_eq!(o.complexity, 0.0);

        let o = complexity(&[1.0, 3.0, 2.0, 1.0, 3.0, 2.0, 1.0, 3.0], 3).unwrap();
        assert!(o.entropy > 0.0 && o.entropy < 1.0);
        assert!(matches!(complexity(&[1.0, 2.0, 3.0], 3), Err(Error::Contract(_))));
    }

    #[test]
    fn ties_follow_occurrence_order() {
        let flat = vec![2.0; 10];
        let o = complexity(&flat, 3).unwrap();
        // constant windows rank like an increasing run: pattern 0
        assert_eq!(o.probabilities[0], 1.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    proptest! {
        #[test]
        fn dtw_is_symmetric_and_bounded(
            x in prop::collection::vec(-5.0f64..5.0, 1..12),
            y in prop::collection::vec(-5.0f64..5.0, 1..12),
        ) {
            let a = dtw(&x, &y).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - dtw(&y, &x).unwrap()).abs() < 1e-9);
            let n = x.len().min(y.len());
            let lockstep: f64 = x[..n].iter().zip(&y[..n]).map(|(a, b)| (a - b).abs()).sum();
            if x.len() == y.len() {
                prop_assert!(a <= lockstep + 1e-12);
            }
        }

        #[test]
        fn accuracy_is_monotone_and_order_free(errors in prop::collection::vec(0.0f64..10.0, 1..40)) {
            let c = accuracy_auc(&errors, 200).unwrap();
            prop_assert!(c.accuracy.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!((0.0..=1.0).contains(&c.auc));
            let mut reversed = errors.clone();
            reversed.reverse();
            prop_assert_eq!(accuracy_auc(&reversed, 200).unwrap().auc, c.auc);
            prop_assert_eq!(c.accuracy_at(f64::INFINITY), 1.0);
        }

        #[test]
        fn permutation_entropy_ignores_monotone_transforms(series in prop::collection::vec(-3.0f64..3.0, 20..80)) {
            let a = complexity(&series, 4).unwrap();
            let warped: Vec<f64> = series.iter().map(|v| (2.0 * v).exp() + 7.0).collect();
            let b = complexity(&warped, 4).unwrap();
            prop_assert_eq!(a.probabilities.clone(), b.probabilities);
            prop_assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.entropy));
            prop_assert!(a.complexity >= 0.0);
        }

        #[test]
        fn point_metrics_scale_laws(
            truth in prop::collection::vec(-5.0f64..5.0, 3..30),
            noise in prop::collection::vec(-1.0f64..1.0, 30),
            s in 0.1f64..10.0,
        ) {
            let pred: Vec<f64> = truth.iter().zip(&noise).map(|(t, n)| t + n).collect();
            let base = point_metrics(&truth, &pred).unwrap();
            let ts: Vec<f64> = truth.iter().map(|v| v * s).collect();
            let ps: Vec<f64> = pred.iter().map(|v| v * s).collect();
            let scaled = point_metrics(&ts, &ps).unwrap();
            prop_assert!((scaled.mse - base.mse * s * s).abs() <= 1e-9 * (1.0 + scaled.mse));
            prop_assert!((scaled.mae - base.mae * s).abs() <= 1e-9 * (1.0 + scaled.mae));
            prop_assert!((scaled.rmse - base.rmse * s).abs() <= 1e-9 * (1.0 + scaled.rmse));
            if let (Some(a), Some(b)) = (base.r2.value(), scaled.r2.value()) {
                prop_assert!((a - b).abs() < 1e-9);
                prop_assert!(a <= 1.0);
            }
        }
    }
}
