//! AUC, DeLong's paired test, percentile bootstrap, Mann-Whitney U, Bonferroni
//! tiers and covariate residualization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Per-subject scores with binary labels (1 = positive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCohort {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredCohort {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let c = ScoredCohort { scores, labels };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} labels",
                self.scores.len(),
                self.labels.len()
            )));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("non-finite score".into()));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        let pos = self.n_pos();
        if pos == 0 || pos == self.labels.len() {
            return Err(Error::InvalidArgument(
                "AUC needs at least one positive and one negative".into(),
            ));
        }
        Ok(())
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// 1-based ranks with ties given their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// P(score+ > score-) + 1/2 P(tie), via the rank-sum identity.
pub fn auc(c: &ScoredCohort) -> Result<f64> {
    c.validate()?;
    Ok(auc_unchecked(&c.scores, &c.labels))
}

fn auc_unchecked(scores: &[f64], labels: &[u8]) -> f64 {
    let ranks = midranks(scores);
    let m = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = labels.len() as f64 - m;
    let r_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    (r_pos - m * (m + 1.0) / 2.0) / (m * n)
}

/// ROC operating points `(fpr, tpr)` from the strictest threshold down.
pub fn roc_points(c: &ScoredCohort) -> Result<Vec<(f64, f64)>> {
    c.validate()?;
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| c.scores[b].total_cmp(&c.scores[a]));
    let p = c.n_pos() as f64;
    let n = c.len() as f64 - p;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut points = vec![(0.0, 0.0)];
    for (k, &i) in order.iter().enumerate() {
        if c.labels[i] == 1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let last_of_tie = order
            .get(k + 1)
            .is_none_or(|&next| c.scores[next] != c.scores[i]);
        if last_of_tie {
            points.push((fp / n, tp / p));
        }
    }
    Ok(points)
}

fn normal_two_sided(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p_value: f64,
    /// Variance of the AUC difference vanished while the AUCs differ.
    pub degenerate: bool,
}

/// Structural components (placements) of one score vector.
struct Placements {
    auc: f64,
    /// For each positive: fraction of negatives it outranks.
    v10: Vec<f64>,
    /// For each negative: fraction of positives that outrank it.
    v01: Vec<f64>,
}

fn placements(scores: &[f64], labels: &[u8]) -> Placements {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(s, _)| *s)
        .collect();
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let all_ranks = midranks(scores);
    let pos_ranks = midranks(&pos);
    let neg_ranks = midranks(&neg);
    let (mut ip, mut ineg) = (0, 0);
    let mut v10 = Vec::with_capacity(pos.len());
    let mut v01 = Vec::with_capacity(neg.len());
    for (r, &l) in all_ranks.iter().zip(labels) {
        if l == 1 {
            v10.push((r - pos_ranks[ip]) / n);
            ip += 1;
        } else {
            v01.push(1.0 - (r - neg_ranks[ineg]) / m);
            ineg += 1;
        }
    }
    let auc = v10.iter().sum::<f64>() / m;
    Placements { auc, v10, v01 }
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len() as f64;
    let ma = a.iter().sum::<f64>() / k;
    let mb = b.iter().sum::<f64>() / k;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (k - 1.0)
}

/// Paired comparison of two AUCs over the same subjects (fast DeLong).
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> Result<DeLongResult> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Shape("paired score vectors differ in length".into()));
    }
    ScoredCohort::new(scores_a.to_vec(), labels.to_vec())?;
    ScoredCohort::new(scores_b.to_vec(), labels.to_vec())?;
    let pa = placements(scores_a, labels);
    let pb = placements(scores_b, labels);
    let (m, n) = (pa.v10.len() as f64, pa.v01.len() as f64);
    let var_term = |x: &[f64], y: &[f64], k: f64| {
        if k < 2.0 {
            0.0
        } else {
            covariance(x, y) / k
        }
    };
    let var = var_term(&pa.v10, &pa.v10, m) + var_term(&pb.v10, &pb.v10, m)
        - 2.0 * var_term(&pa.v10, &pb.v10, m)
        + var_term(&pa.v01, &pa.v01, n)
        + var_term(&pb.v01, &pb.v01, n)
        - 2.0 * var_term(&pa.v01, &pb.v01, n);
    let diff = pa.auc - pb.auc;
    if !(var > 1e-15) {
        let equal = diff.abs() < 1e-12;
        return Ok(DeLongResult {
            auc_a: pa.auc,
            auc_b: pb.auc,
            z: 0.0,
            p_value: if equal { 1.0 } else { 0.0 },
            degenerate: !equal,
        });
    }
    let z = diff / var.sqrt();
    Ok(DeLongResult {
        auc_a: pa.auc,
        auc_b: pb.auc,
        z,
        p_value: normal_two_sided(z),
        degenerate: false,
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap CI of the AUC over subject resamples.
///
/// Resample `i` draws from its own `(seed, i)` stream; single-class resamples
/// are redrawn from the same stream.
pub fn bootstrap_auc_ci(c: &ScoredCohort, n_boot: usize, alpha: f64, seed: u64) -> Result<(f64, f64)> {
    c.validate()?;
    if n_boot == 0 || !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidArgument("need n_boot > 0 and alpha in (0, 1)".into()));
    }
    let k = c.len();
    let mut aucs = Vec::with_capacity(n_boot);
    let mut s = vec![0.0; k];
    let mut l = vec![0u8; k];
    for i in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        loop {
            for j in 0..k {
                let pick = rng.random_range(0..k);
                s[j] = c.scores[pick];
                l[j] = c.labels[pick];
            }
            let pos = l.iter().filter(|&&x| x == 1).count();
            if pos > 0 && pos < k {
                break;
            }
        }
        aucs.push(auc_unchecked(&s, &l));
    }
    aucs.sort_by(f64::total_cmp);
    Ok((
        quantile_sorted(&aucs, alpha / 2.0),
        quantile_sorted(&aucs, 1.0 - alpha / 2.0),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MwMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U_x`: pairs with x > y plus half the ties.
    pub u: f64,
    pub p_value: f64,
    pub method: MwMethod,
}

/// Pooled sample sizes up to this use exact enumeration.
pub const MW_EXACT_MAX_N: usize = 12;

fn mw_prepare(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    if x.len() < 3 || y.len() < 3 {
        return Err(Error::InvalidArgument(
            "Mann-Whitney U needs at least 3 observations per sample".into(),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite observation".into()));
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = midranks(&pooled);
    let n = x.len() as f64;
    let u = ranks[..x.len()].iter().sum::<f64>() - n * (n + 1.0) / 2.0;
    Ok((ranks, u))
}

/// Two-sided U test; exact enumeration for `|x| + |y| <= 12`, otherwise the
/// tie-corrected normal approximation with continuity correction.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    if x.len() + y.len() <= MW_EXACT_MAX_N {
        mann_whitney_u_exact(x, y)
    } else {
        mann_whitney_u_normal(x, y)
    }
}

pub fn mann_whitney_u_normal(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    let (ranks, u) = mw_prepare(x, y)?;
    let (n, m) = (x.len() as f64, y.len() as f64);
    let big = n + m;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * m / 12.0 * ((big + 1.0) - tie_term / (big * (big - 1.0)));
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let dev = ((u - n * m / 2.0).abs() - 0.5).max(0.0);
        normal_two_sided(dev / var.sqrt())
    };
    Ok(MannWhitney {
        u,
        p_value,
        method: MwMethod::Normal,
    })
}

/// Exact permutation p-value over all `C(n+m, n)` assignments of the observed
/// midranks to the first sample.
pub fn mann_whitney_u_exact(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    let (ranks, u) = mw_prepare(x, y)?;
    let total = ranks.len();
    if total > 24 {
        return Err(Error::InvalidArgument(format!(
            "exact enumeration over {total} observations is too large"
        )));
    }
    let (n, m) = (x.len(), y.len());
    let center = (n * m) as f64 / 2.0;
    let observed = (u - center).abs();
    let offset = (n * (n + 1)) as f64 / 2.0;
    let (mut hits, mut count) = (0u64, 0u64);
    for mask in 0u32..(1u32 << total) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let r: f64 = (0..total)
            .filter(|&i| mask & (1 << i) != 0)
            .map(|i| ranks[i])
            .sum();
        count += 1;
        if ((r - offset) - center).abs() >= observed - 1e-9 {
            hits += 1;
        }
    }
    Ok(MannWhitney {
        u,
        p_value: (hits as f64 / count as f64).min(1.0),
        method: MwMethod::Exact,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "ns")]
    NotSignificant,
    #[serde(rename = "*")]
    One,
    #[serde(rename = "**")]
    Two,
    #[serde(rename = "***")]
    Three,
}

impl Tier {
    pub fn stars(self) -> &'static str {
        match self {
            Tier::NotSignificant => "ns",
            Tier::One => "*",
            Tier::Two => "**",
            Tier::Three => "***",
        }
    }
}

/// Bonferroni thresholds for `m` tests: `alpha/m`, `alpha/(5m)`, `alpha/(50m)`.
pub fn bonferroni_thresholds(m: usize, alpha: f64) -> [f64; 3] {
    let m = m.max(1) as f64;
    [alpha / m, alpha / 5.0 / m, alpha / 50.0 / m]
}

/// Significance tier of `p` against `bonferroni_thresholds` output.
pub fn tier(p: f64, thresholds: [f64; 3]) -> Tier {
    let [t1, t2, t3] = thresholds;
    if p <= t3 {
        Tier::Three
    } else if p <= t2 {
        Tier::Two
    } else if p <= t1 {
        Tier::One
    } else {
        Tier::NotSignificant
    }
}

pub fn bonferroni(p_values: &[f64], alpha: f64) -> Vec<Tier> {
    let t = bonferroni_thresholds(p_values.len(), alpha);
    p_values.iter().map(|&p| tier(p, t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residualized {
    pub values: Vec<f64>,
    /// Residual variance was zero; values are all zero.
    pub degenerate: bool,
}

/// Removes the binary covariate's group means (the OLS fit on a 0/1 regressor),
/// then divides by the sample standard deviation of the residuals.
pub fn residualize_standardize(values: &[f64], covariate: &[u8]) -> Result<Residualized> {
    if values.len() != covariate.len() {
        return Err(Error::Shape("values and covariate differ in length".into()));
    }
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (&v, &g) in values.iter().zip(covariate) {
        if g > 1 {
            return Err(Error::InvalidArgument("covariate must be 0 or 1".into()));
        }
        sums[g as usize] += v;
        counts[g as usize] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::InvalidArgument(
            "both covariate groups must be non-empty".into(),
        ));
    }
    let means = [sums[0] / counts[0] as f64, sums[1] / counts[1] as f64];
    let resid: Vec<f64> = values
        .iter()
        .zip(covariate)
        .map(|(&v, &g)| v - means[g as usize])
        .collect();
    let k = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / k;
    let sd = if resid.len() > 1 {
        (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    if !(sd > 1e-12) {
        return Ok(Residualized {
            values: vec![0.0; resid.len()],
            degenerate: true,
        });
    }
    Ok(Residualized {
        values: resid.iter().map(|r| (r - mean) / sd).collect(),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn cohort(pos: &[f64], neg: &[f64]) -> ScoredCohort {
        let mut scores = pos.to_vec();
        scores.extend(neg);
        let mut labels = vec![1; pos.len()];
        labels.extend(vec![0; neg.len()]);
        ScoredCohort::new(scores, labels).unwrap()
    }

    fn pair_count_auc(c: &ScoredCohort) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in c.labels.iter().enumerate() {
            for (j, &lj) in c.labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    den += 1.0;
                    if c.scores[i] > c.scores[j] {
                        num += 1.0;
                    } else if c.scores[i] == c.scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&cohort(&[0.9, 0.8], &[0.3, 0.2])).unwrap(), 1.0);
        assert_eq!(auc(&cohort(&[0.9, 0.3], &[0.6, 0.2])).unwrap(), 0.75);
        assert_eq!(auc(&cohort(&[0.5, 0.5], &[0.5, 0.5, 0.5])).unwrap(), 0.5);
        assert!(ScoredCohort::new(vec![0.1, 0.2], vec![1, 1]).is_err());
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(4..40);
            let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let c = ScoredCohort::new(scores, labels).unwrap();
            assert_eq!(auc(&c).unwrap(), pair_count_auc(&c));
        }
    }

    #[test]
    fn roc_ends_at_corners() {
        let c = cohort(&[0.9, 0.4, 0.4], &[0.4, 0.1]);
        let pts = roc_points(&c).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        assert_eq!(pts.len(), 4);
    }

    #[test]
    fn delong_identical_scores() {
        let c = cohort(&[0.9, 0.7, 0.4], &[0.5, 0.2, 0.1]);
        let r = delong_test(&c.scores, &c.scores, &c.labels).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn delong_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let labels: Vec<u8> = (0..60).map(|i| (i % 2) as u8).collect();
        let a: Vec<f64> = labels.iter().map(|&l| l as f64 + noise.sample(&mut rng)).collect();
        let b: Vec<f64> = labels.iter().map(|&l| 0.5 * l as f64 + noise.sample(&mut rng)).collect();
        let ab = delong_test(&a, &b, &labels).unwrap();
        let ba = delong_test(&b, &a, &labels).unwrap();
        assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        assert!((ab.z + ba.z).abs() < 1e-12);
        assert!((ab.auc_a - auc(&ScoredCohort::new(a, labels.clone()).unwrap()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_examples() {
        let c = cohort(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1]);
        assert_eq!(bootstrap_auc_ci(&c, 500, 0.05, 1).unwrap(), (1.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| l as f64 * 0.3 + rng.random::<f64>()).collect();
        let c = ScoredCohort::new(scores, labels).unwrap();
        let a = bootstrap_auc_ci(&c, 1000, 0.05, 77).unwrap();
        assert_eq!(a, bootstrap_auc_ci(&c, 1000, 0.05, 77).unwrap());
        let point = auc(&c).unwrap();
        assert!(a.0 <= point && point <= a.1);
    }

    /// Independent oracle: recursive enumeration of which pooled positions go
    /// to the first sample, computing U by direct pair comparison.
    fn enumerate_p(x: &[f64], y: &[f64]) -> f64 {
        let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
        let n = x.len();
        let u_of = |first: &[usize]| {
            let mut u = 0.0;
            for &i in first {
                for (j, v) in pooled.iter().enumerate() {
                    if !first.contains(&j) {
                        if pooled[i] > *v {
                            u += 1.0;
                        } else if pooled[i] == *v {
                            u += 0.5;
                        }
                    }
                }
            }
            u
        };
        let obs = u_of(&(0..n).collect::<Vec<_>>());
        let center = (n * y.len()) as f64 / 2.0;
        fn rec(start: usize, total: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if left == 0 {
                out.push(cur.clone());
                return;
            }
            for i in start..=total - left {
                cur.push(i);
                rec(i + 1, total, left - 1, cur, out);
                cur.pop();
            }
        }
        let mut all = Vec::new();
        rec(0, pooled.len(), n, &mut Vec::new(), &mut all);
        let hits = all
            .iter()
            .filter(|s| (u_of(s) - center).abs() >= (obs - center).abs() - 1e-9)
            .count();
        hits as f64 / all.len() as f64
    }

    #[test]
    fn mann_whitney_examples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert_eq!(r.method, MwMethod::Exact);
        assert!((r.p_value - 0.1).abs() < 1e-12);

        let r = mann_whitney_u(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(r.u, 8.0);
        assert_eq!(r.p_value, 1.0);

        let r = mann_whitney_u(&[2.0; 5], &[2.0; 9]).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0, 5.0]).is_err());
    }

    #[test]
    fn exact_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let n = rng.random_range(3..7);
            let m = rng.random_range(3..=(12 - n).min(7));
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.random_range(0..6) as f64).collect();
            let r = mann_whitney_u(&x, &y).unwrap();
            assert!((r.p_value - enumerate_p(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_close_to_exact_at_8_vs_8() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..8).map(|_| noise.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..8).map(|_| 0.8 + noise.sample(&mut rng)).collect();
        let normal = mann_whitney_u(&x, &y).unwrap();
        assert_eq!(normal.method, MwMethod::Normal);
        let exact = mann_whitney_u_exact(&x, &y).unwrap();
        assert!((normal.p_value - exact.p_value).abs() < 0.01);
    }

    #[test]
    fn normal_converges_at_10_vs_10() {
        // every attainable U for continuous data at n = m = 10
        for shift in 0..=100 {
            let x: Vec<f64> = (0..10).map(|i| i as f64 + 0.5).collect();
            let y: Vec<f64> = (0..10).map(|i| i as f64 + shift as f64 / 10.0 - 5.0 + 0.01).collect();
            let normal = mann_whitney_u_normal(&x, &y).unwrap();
            let exact = mann_whitney_u_exact(&x, &y).unwrap();
            assert!((normal.p_value - exact.p_value).abs() < 0.01, "shift {shift}");
        }
    }

    #[test]
    fn bonferroni_tiers() {
        let p = vec![0.5; 24].into_iter().chain([0.0015]).collect::<Vec<_>>();
        assert_eq!(bonferroni(&p, 0.05)[24], Tier::One);
        let p = vec![0.5; 24].into_iter().chain([0.003]).collect::<Vec<_>>();
        assert_eq!(bonferroni(&p, 0.05)[24], Tier::NotSignificant);
        let t = bonferroni_thresholds(25, 0.05);
        assert!((t[0] - 0.002).abs() < 1e-15 && (t[1] - 0.0004).abs() < 1e-15 && (t[2] - 4e-5).abs() < 1e-15);
        assert_eq!(
            bonferroni(&[0.04], 0.05),
            vec![Tier::One]
        );
        assert_eq!(bonferroni(&[0.009], 0.05), vec![Tier::Two]);
        assert_eq!(bonferroni(&[0.0009], 0.05), vec![Tier::Three]);
    }

    #[test]
    fn residualize_examples() {
        let values = [9.0, 11.0, 19.0, 21.0, 8.0, 12.0, 18.0, 22.0];
        let cov = [0, 0, 1, 1, 0, 0, 1, 1];
        let r = residualize_standardize(&values, &cov).unwrap();
        for g in 0..2u8 {
            let mean: f64 = r
                .values
                .iter()
                .zip(&cov)
                .filter(|(_, &c)| c == g)
                .map(|(v, _)| v)
                .sum::<f64>();
            assert!(mean.abs() < 1e-12);
        }
        let k = r.values.len() as f64;
        let mean = r.values.iter().sum::<f64>() / k;
        let sd = (r.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        assert!(mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);

        let flat = residualize_standardize(&[1.0, 1.0, 5.0, 5.0], &[0, 0, 1, 1]).unwrap();
        assert!(flat.degenerate && flat.values.iter().all(|&v| v == 0.0));
        assert!(residualize_standardize(&[1.0, 2.0], &[0, 0]).is_err());
    }

    #[test]
    fn residualize_matches_group_centering() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cov: Vec<u8> = (0..50).map(|_| rng.random_range(0..2)).collect();
        let values: Vec<f64> = cov.iter().map(|&c| 3.0 * c as f64 + rng.random::<f64>()).collect();
        let r = residualize_standardize(&values, &cov).unwrap();
        let mut centered = values.clone();
        for g in 0..2u8 {
            let idx: Vec<usize> = (0..50).filter(|&i| cov[i] == g).collect();
            let mu = idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64;
            for &i in &idx {
                centered[i] -= mu;
            }
        }
        let sd = (centered.iter().map(|v| v * v).sum::<f64>() / 49.0).sqrt();
        for (a, b) in r.values.iter().zip(&centered) {
            assert!((a - b / sd).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn auc_invariances(scores in proptest::collection::vec(-5.0f64..5.0, 6..30)) {
            let labels: Vec<u8> = (0..scores.len()).map(|i| (i % 3 == 0) as u8).collect();
            let c = ScoredCohort::new(scores.clone(), labels.clone()).unwrap();
            let a = auc(&c).unwrap();
            let t = ScoredCohort::new(scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect(), labels.clone()).unwrap();
            prop_assert!((auc(&t).unwrap() - a).abs() < 1e-12);
            let flipped = ScoredCohort::new(scores, labels.iter().map(|l| 1 - l).collect()).unwrap();
            prop_assert!((auc(&flipped).unwrap() + a - 1.0).abs() < 1e-12);
        }
    }
}
