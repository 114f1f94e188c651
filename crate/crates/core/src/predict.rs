//! Intensities to susceptibilities and classes, plus ROC/AUC, count
//! calibration and trend diagnostics.

use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, DiscreteCDF, Normal};

use crate::error::{Error, Result};

/// Intensity upper bounds of the first three classes (inclusive).
pub const CLASS_THRESHOLDS: [f64; 3] = [0.05, 1.0, 3.0];

/// Probability of at least one event given intensity `lambda`.
pub fn susceptibility(lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Validation(format!("intensity must be nonnegative, got {lambda}")));
    }
    Ok(-(-lambda).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClassLabel {
    ClearlyStable,
    Uncertain1,
    Uncertain2,
    ClearlyUnstable,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [Self::ClearlyStable, Self::Uncertain1, Self::Uncertain2, Self::ClearlyUnstable];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ClearlyStable => "CLEARLY_STABLE",
            Self::Uncertain1 => "UNCERTAIN_1",
            Self::Uncertain2 => "UNCERTAIN_2",
            Self::ClearlyUnstable => "CLEARLY_UNSTABLE",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown class label '{s}'")))
    }
}

pub fn classify(lambda: f64) -> ClassLabel {
    if lambda <= CLASS_THRESHOLDS[0] {
        ClassLabel::ClearlyStable
    } else if lambda <= CLASS_THRESHOLDS[1] {
        ClassLabel::Uncertain1
    } else if lambda <= CLASS_THRESHOLDS[2] {
        ClassLabel::Uncertain2
    } else {
        ClassLabel::ClearlyUnstable
    }
}

/// Which posterior intensity drives susceptibility and classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityEstimator {
    /// `E[exp(η)]`.
    #[default]
    Mean,
    /// `exp(E[η])`.
    Plugin,
}

impl IntensityEstimator {
    pub fn apply(self, eta_mean: f64, eta_sd: f64) -> f64 {
        match self {
            Self::Mean => (eta_mean + 0.5 * eta_sd * eta_sd).exp(),
            Self::Plugin => eta_mean.exp(),
        }
    }
}

impl FromStr for IntensityEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "plugin" => Ok(Self::Plugin),
            other => Err(Error::Validation(format!("unknown intensity estimator '{other}'"))),
        }
    }
}

impl fmt::Display for IntensityEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Plugin => "plugin",
        })
    }
}

/// Intensity and susceptibility ratios `adv / base`, with `0/0 = 1`.
/// Returns the ratios and the number of `0/0` cells.
pub fn ratio_maps(adv: &[f64], base: &[f64]) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    if adv.len() != base.len() {
        return Err(Error::Validation(format!("ratio maps need equal shapes ({} vs {})", adv.len(), base.len())));
    }
    let mut ir = Vec::with_capacity(adv.len());
    let mut sr = Vec::with_capacity(adv.len());
    let mut zero = 0;
    for (&a, &b) in adv.iter().zip(base) {
        if b == 0.0 {
            if a == 0.0 {
                ir.push(1.0);
                sr.push(1.0);
                zero += 1;
                continue;
            }
            return Err(Error::Validation("base intensity is zero where the advanced one is not".into()));
        }
        ir.push(a / b);
        sr.push(susceptibility(a)? / susceptibility(b)?);
    }
    Ok((ir, sr, zero))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Twice the Mann–Whitney statistic, as an exact integer, with midranks for ties.
fn mann_whitney_twice(scores: &[f64], labels: &[bool]) -> (u128, u64, u64) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum2: u128 = 0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && scores[idx[end + 1]] == scores[idx[start]] {
            end += 1;
        }
        // 1-based positions start+1..=end+1; twice the midrank is their sum.
        let twice_mid = (start + 1 + end + 1) as u128;
        for &i in &idx[start..=end] {
            if labels[i] {
                rank_sum2 += twice_mid;
            }
        }
        start = end + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    let u2 = rank_sum2 - (n_pos as u128) * (n_pos as u128 + 1);
    (u2, n_pos, n_neg)
}

/// ROC curve over all distinct thresholds and the rank-statistic AUC.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Validation("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    let (u2, n_pos, n_neg) = mann_whitney_twice(scores, labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let auc = u2 as f64 / (2 * n_pos as u128 * n_neg as u128) as f64;

    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut roc = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        roc.push(RocPoint { threshold: s, fpr: fp as f64 / n_neg as f64, tpr: tp as f64 / n_pos as f64 });
    }
    Ok((roc, auc))
}

/// AUC by counting every positive–negative pair.
pub fn auc_brute_force(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let mut twice: u128 = 0;
    let (mut np, mut nn) = (0u128, 0u128);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            np += 1;
        } else {
            nn += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if !lj {
                twice += match scores[i].partial_cmp(&scores[j]) {
                    Some(std::cmp::Ordering::Greater) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
    }
    if np == 0 || nn == 0 {
        return Err(Error::SingleClass);
    }
    Ok(twice as f64 / (2 * np * nn) as f64)
}

/// Smallest `k` with `P(X ≤ k) ≥ p` for `X ~ Poisson(mu)`.
pub fn poisson_quantile(mu: f64, p: f64) -> u64 {
    if mu <= 0.0 {
        return 0;
    }
    if !mu.is_finite() {
        return u64::MAX;
    }
    if mu <= 700.0 {
        let mut k = 0u64;
        let mut pmf = (-mu).exp();
        let mut cdf = pmf;
        let cap = (mu + 100.0 * mu.sqrt() + 100.0) as u64;
        while cdf < p && k < cap {
            k += 1;
            pmf *= mu / k as f64;
            cdf += pmf;
        }
        return k;
    }
    if mu > 1e12 {
        // Relative error of the normal approximation is far below one count's width here.
        let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(p);
        return (mu + z * mu.sqrt()).ceil().max(0.0) as u64;
    }
    let dist = statrs::distribution::Poisson::new(mu).unwrap();
    let mut lo = (mu - 40.0 * mu.sqrt()).max(0.0).floor() as u64;
    let mut hi = (mu + 40.0 * mu.sqrt()).ceil() as u64;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if dist.cdf(mid) >= p {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Central 95% interval of `Poisson(mu)`.
pub fn poisson_interval(mu: f64) -> (u64, u64) {
    (poisson_quantile(mu, 0.025), poisson_quantile(mu, 0.975))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CountLevel {
    pub count: u32,
    pub n: usize,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub levels: Vec<CountLevel>,
    pub intervals: Vec<(u64, u64)>,
    pub coverage: f64,
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.len() == 1 {
        return v[0];
    }
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < v.len() { v[lo] * (1.0 - frac) + v[lo + 1] * frac } else { v[lo] }
}

/// Prediction quartiles per observed count and exact Poisson 95% coverage.
pub fn count_calibration(observed: &[u32], predicted: &[f64]) -> Result<CalibrationTable> {
    if observed.len() != predicted.len() {
        return Err(Error::Validation("observed and predicted differ in length".into()));
    }
    if observed.is_empty() {
        return Err(Error::Validation("no cells to calibrate".into()));
    }
    let mut by_level: std::collections::BTreeMap<u32, Vec<f64>> = Default::default();
    for (&o, &p) in observed.iter().zip(predicted) {
        by_level.entry(o).or_default().push(p);
    }
    let levels = by_level
        .into_iter()
        .map(|(count, mut v)| {
            v.sort_by(f64::total_cmp);
            CountLevel { count, n: v.len(), q25: quantile_sorted(&v, 0.25), median: quantile_sorted(&v, 0.5), q75: quantile_sorted(&v, 0.75) }
        })
        .collect();
    let intervals: Vec<(u64, u64)> = predicted.iter().map(|&m| poisson_interval(m)).collect();
    let covered = observed.iter().zip(&intervals).filter(|(&o, &(lo, hi))| (o as u64) >= lo && (o as u64) <= hi).count();
    Ok(CalibrationTable { levels, intervals, coverage: covered as f64 / observed.len() as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrendLabel {
    Clustering,
    Repellency,
    Erratic,
}

impl fmt::Display for TrendLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Clustering => "CLUSTERING",
            Self::Repellency => "REPELLENCY",
            Self::Erratic => "ERRATIC",
        })
    }
}

/// Strictly increasing trajectories cluster, strictly decreasing ones repel.
pub fn temporal_trend(trajectory: &[f64]) -> TrendLabel {
    if trajectory.len() >= 2 && trajectory.windows(2).all(|w| w[1] > w[0]) {
        TrendLabel::Clustering
    } else if trajectory.len() >= 2 && trajectory.windows(2).all(|w| w[1] < w[0]) {
        TrendLabel::Repellency
    } else {
        TrendLabel::Erratic
    }
}

pub fn temporal_trends(trajectories: &[Vec<f64>]) -> Vec<TrendLabel> {
    trajectories.iter().map(|t| temporal_trend(t)).collect()
}

/// `beta_east cos θ + beta_north sin θ` at each angle in degrees.
pub fn aspect_effect(beta_east: f64, beta_north: f64, theta_deg: &[f64]) -> Vec<f64> {
    theta_deg
        .iter()
        .map(|t| {
            let r = t.to_radians();
            beta_east * r.cos() + beta_north * r.sin()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn susceptibility_values() {
        assert_eq!(susceptibility(0.0).unwrap(), 0.0);
        assert!((susceptibility(1.0).unwrap() - 0.632_120_558_828_557_7).abs() < 1e-15);
        assert!((susceptibility(3.0).unwrap() - 0.950_212_931_632_136).abs() < 1e-15);
        assert!(susceptibility(-0.1).is_err());
    }

    #[test]
    fn class_boundaries_are_inclusive() {
        assert_eq!(classify(0.05), ClassLabel::ClearlyStable);
        assert_eq!(classify(0.050001), ClassLabel::Uncertain1);
        assert_eq!(classify(1.0), ClassLabel::Uncertain1);
        assert_eq!(classify(3.0), ClassLabel::Uncertain2);
        assert_eq!(classify(3.2), ClassLabel::ClearlyUnstable);
    }

    #[test]
    fn ratio_examples() {
        let (ir, sr, z) = ratio_maps(&[2.0, 0.0, 0.4], &[1.0, 0.0, 0.4]).unwrap();
        assert_eq!(ir, vec![2.0, 1.0, 1.0]);
        assert!((sr[0] - 1.3679).abs() < 1e-4);
        assert_eq!(sr[1], 1.0);
        assert_eq!(sr[2], 1.0);
        assert_eq!(z, 1);
        assert!(ratio_maps(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn auc_examples() {
        let (_, auc) = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 1.0);
        let (_, rev) = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap();
        assert_eq!(rev, 0.0);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
        let (roc, _) = roc_auc(&[0.5, 0.5, 0.1], &[true, false, false]).unwrap();
        assert_eq!(roc.len(), 3);
        assert_eq!(roc.last().unwrap().fpr, 1.0);
        assert_eq!(roc.last().unwrap().tpr, 1.0);
    }

    #[test]
    fn random_scores_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let mut labels: Vec<bool> = (0..10_000).map(|i| i % 3 == 0).collect();
        labels.shuffle(&mut rng);
        let (_, auc) = roc_auc(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.02);
    }

    #[test]
    fn poisson_intervals() {
        assert_eq!(poisson_interval(0.0), (0, 0));
        // P(X ≤ 0) = 0.018 and P(X ≤ 1) = 0.092; P(X ≤ 7) = 0.949 and P(X ≤ 8) = 0.979.
        assert_eq!(poisson_interval(4.0), (1, 8));
        assert_eq!(poisson_interval(1e4), (9804, 10196));
        // Log-space accumulation as an independent reference across the method switch.
        let brute = |mu: f64, p: f64| {
            let (mut k, mut lp) = (0u64, -mu);
            let mut cdf = lp.exp();
            while cdf < p {
                k += 1;
                lp += mu.ln() - (k as f64).ln();
                cdf += lp.exp();
            }
            k
        };
        for mu in [650.0, 700.0, 701.0, 5000.0, 123456.7] {
            for p in [0.025, 0.5, 0.975] {
                assert_eq!(poisson_quantile(mu, p), brute(mu, p), "mu {mu} p {p}");
            }
        }
        let (lo, hi) = poisson_interval(1e16);
        let half = 1.959964 * 1e8;
        assert!(((1e16 - lo as f64) / half - 1.0).abs() < 1e-4 && ((hi as f64 - 1e16) / half - 1.0).abs() < 1e-4);
        assert_eq!(poisson_interval(f64::INFINITY).1, u64::MAX);
    }

    #[test]
    fn calibration_table() {
        let t = count_calibration(&[0, 0, 3, 10], &[0.0, 0.5, 3.0, 2.0]).unwrap();
        assert_eq!(t.levels.len(), 3);
        assert_eq!(t.levels[0].n, 2);
        assert_eq!(t.intervals[0], (0, 0));
        assert_eq!(t.coverage, 0.75);
    }

    #[test]
    fn trends_and_aspect() {
        assert_eq!(temporal_trend(&[-1.0, 0.0, 0.5, 1.0, 1.2, 2.0]), TrendLabel::Clustering);
        assert_eq!(temporal_trend(&[3.0, 2.0, 1.0]), TrendLabel::Repellency);
        assert_eq!(temporal_trend(&[1.0, 1.0, 1.0]), TrendLabel::Erratic);
        assert_eq!(aspect_effect(1.0, 0.0, &[0.0]), vec![1.0]);
        assert!(aspect_effect(0.0, 0.0, &[0.0, 90.0, 213.0]).iter().all(|v| *v == 0.0));
        let (be, bn) = (0.3f64, -0.8f64);
        let grid: Vec<f64> = (0..36_000).map(|k| k as f64 * 0.01).collect();
        let curve = aspect_effect(be, bn, &grid);
        let arg = (0..grid.len()).max_by(|&a, &b| curve[a].total_cmp(&curve[b])).unwrap();
        let expect = bn.atan2(be).to_degrees().rem_euclid(360.0);
        assert!((grid[arg] - expect).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn rank_auc_equals_pair_counting(
            data in prop::collection::vec((0u8..20, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 7.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            let fast = roc_auc(&scores, &labels);
            let slow = auc_brute_force(&scores, &labels);
            match (fast, slow) {
                (Ok((_, a)), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "disagreement on degenerate labels"),
            }
        }

        #[test]
        fn classes_are_monotone(a in 0.0f64..10.0, b in 0.0f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(classify(lo) <= classify(hi));
            let (s_lo, s_hi) = (susceptibility(lo).unwrap(), susceptibility(hi).unwrap());
            prop_assert!(s_lo <= s_hi && s_hi < 1.0 && s_lo >= 0.0);
        }

        #[test]
        fn reversed_scores_flip_auc(data in prop::collection::vec((0u8..50, any::<bool>()), 2..100)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            if let (Ok((_, a)), Ok((_, b))) = (roc_auc(&scores, &labels), roc_auc(&neg, &labels)) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }
}
