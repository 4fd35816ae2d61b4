//! Resampling statistics for behavioural coupling.
//!
//! Everything here is deterministic given a `u64` seed. Each resampling
//! replicate draws from its own counter-derived ChaCha substream
//! (`set_stream(BASE + replicate)`), so results are bit-identical no matter
//! how many threads execute the replicate loop, and bootstrap, permutation,
//! and control draws never share a stream even under one global seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stream-space bases. Replicate `r` of a given kind uses `BASE + r`; the
/// bases are far enough apart that replicate indices can never collide.
pub const STREAM_BOOTSTRAP: u64 = 1 << 32;
pub const STREAM_PERMUTATION: u64 = 2 << 32;
pub const STREAM_CONTROLS: u64 = 3 << 32;
pub const STREAM_SURROGATE: u64 = 4 << 32;

/// ChaCha generator on substream `stream` of `seed`.
pub fn substream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Area under the ROC curve (Mann-Whitney statistic) with half credit for
/// ties: `(wins + 0.5 * ties) / (n_pos * n_neg)`.
///
/// Wins and ties are counted as exact integers (binary search over the
/// sorted negative scores), so the result is bit-identical to brute-force
/// pair counting.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::EmptyInput {
            what: "positive scores for auc".into(),
        });
    }
    if neg.is_empty() {
        return Err(Error::EmptyInput {
            what: "negative scores for auc".into(),
        });
    }
    let mut sorted_neg = neg.to_vec();
    sorted_neg.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    let mut wins: u64 = 0;
    let mut ties: u64 = 0;
    for &p in pos {
        let below = sorted_neg.partition_point(|&x| x < p) as u64;
        let below_or_equal = sorted_neg.partition_point(|&x| x <= p) as u64;
        wins += below;
        ties += below_or_equal - below;
    }
    let total = (pos.len() as u64 * neg.len() as u64) as f64;
    Ok((wins as f64 + 0.5 * ties as f64) / total)
}

/// Difference of group means, `mean(pos) - mean(neg)`.
pub fn mean_gap(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyInput {
            what: "scores for mean gap".into(),
        });
    }
    Ok(mean(pos) - mean(neg))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Bootstrap configuration. Defaults: 10_000 replicates, alpha 0.05.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub alpha: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 10_000,
            alpha: 0.05,
        }
    }
}

/// Point estimate with a percentile bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub replicates: usize,
    pub alpha: f64,
}

/// Stratified percentile bootstrap: each replicate resamples the positive
/// and negative groups independently with replacement (group sizes fixed),
/// recomputes `stat`, and the interval is the `[alpha/2, 1 - alpha/2]`
/// percentile range of the replicate statistics.
pub fn stratified_bootstrap_ci<F>(
    pos: &[f64],
    neg: &[f64],
    stat: F,
    seed: u64,
    config: &BootstrapConfig,
) -> Result<BootstrapCi>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyInput {
            what: "scores for bootstrap".into(),
        });
    }
    if config.replicates == 0 {
        return Err(Error::InvalidArgument("bootstrap needs >= 1 replicate".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {}",
            config.alpha
        )));
    }
    let point = stat(pos, neg);
    let mut stats: Vec<f64> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream_rng(seed, STREAM_BOOTSTRAP + r as u64);
            let re_pos: Vec<f64> = (0..pos.len())
                .map(|_| pos[rng.random_range(0..pos.len())])
                .collect();
            let re_neg: Vec<f64> = (0..neg.len())
                .map(|_| neg[rng.random_range(0..neg.len())])
                .collect();
            stat(&re_pos, &re_neg)
        })
        .collect();
    stats.sort_by(|a, b| a.partial_cmp(b).expect("bootstrap stat must not be NaN"));
    Ok(BootstrapCi {
        point,
        lo: percentile(&stats, config.alpha / 2.0),
        hi: percentile(&stats, 1.0 - config.alpha / 2.0),
        replicates: config.replicates,
        alpha: config.alpha,
    })
}

/// One-sample percentile bootstrap of the mean (used for fold-level gaps,
/// where the resampling unit is the fold itself).
pub fn bootstrap_mean_ci(values: &[f64], seed: u64, config: &BootstrapConfig) -> Result<BootstrapCi> {
    if values.is_empty() {
        return Err(Error::EmptyInput {
            what: "values for bootstrap".into(),
        });
    }
    if config.replicates == 0 {
        return Err(Error::InvalidArgument("bootstrap needs >= 1 replicate".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {}",
            config.alpha
        )));
    }
    let mut stats: Vec<f64> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream_rng(seed, STREAM_BOOTSTRAP + r as u64);
            let total: f64 = (0..values.len())
                .map(|_| values[rng.random_range(0..values.len())])
                .sum();
            total / values.len() as f64
        })
        .collect();
    stats.sort_by(|a, b| a.partial_cmp(b).expect("bootstrap stat must not be NaN"));
    Ok(BootstrapCi {
        point: mean(values),
        lo: percentile(&stats, config.alpha / 2.0),
        hi: percentile(&stats, 1.0 - config.alpha / 2.0),
        replicates: config.replicates,
        alpha: config.alpha,
    })
}

/// Linear-interpolation quantile of an unsorted slice, `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput {
            what: "values for quantile".into(),
        });
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "quantile level must lie in [0, 1], got {q}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("quantile values must not be NaN"));
    Ok(percentile(&sorted, q))
}

/// Linear-interpolation percentile of a sorted slice, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Permutation-test configuration. Defaults: 9_999 sampled permutations,
/// switching to exhaustive enumeration when the number of distinct group
/// assignments is at most `exhaustive_limit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub permutations: usize,
    pub exhaustive_limit: u64,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        PermutationConfig {
            permutations: 9_999,
            exhaustive_limit: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub p: f64,
    pub observed: f64,
    /// Number of permutations evaluated (all of them when exhaustive).
    pub n_evaluated: u64,
    pub exhaustive: bool,
}

/// One-sided (greater) permutation test of `stat(pos, neg)` under random
/// reassignment of the pooled scores to groups of the original sizes.
///
/// Small problems are enumerated exhaustively (`p = #{assignment stat >=
/// observed} / #assignments`, which includes the observed assignment). Large
/// problems are sampled with the add-one estimator
/// `p = (1 + #{perm >= observed}) / (1 + N)`.
pub fn permutation_p<F>(
    pos: &[f64],
    neg: &[f64],
    stat: F,
    seed: u64,
    config: &PermutationConfig,
) -> Result<PermutationTest>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyInput {
            what: "scores for permutation test".into(),
        });
    }
    let observed = stat(pos, neg);
    let pooled: Vec<f64> = pos.iter().chain(neg.iter()).copied().collect();
    let n = pos.len();

    if let Some(total) = n_choose_k(pooled.len() as u64, n as u64, config.exhaustive_limit) {
        let mut count: u64 = 0;
        let mut chosen = vec![false; pooled.len()];
        enumerate_assignments(&pooled, n, 0, 0, &mut chosen, &mut |sel: &[bool]| {
            let (mut p, mut q) = (Vec::with_capacity(n), Vec::with_capacity(pooled.len() - n));
            for (i, &s) in sel.iter().enumerate() {
                if s {
                    p.push(pooled[i]);
                } else {
                    q.push(pooled[i]);
                }
            }
            if stat(&p, &q) >= observed {
                count += 1;
            }
        });
        return Ok(PermutationTest {
            p: count as f64 / total as f64,
            observed,
            n_evaluated: total,
            exhaustive: true,
        });
    }

    let hits: u64 = (0..config.permutations)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream_rng(seed, STREAM_PERMUTATION + r as u64);
            let mut shuffled = pooled.clone();
            shuffled.shuffle(&mut rng);
            let s = stat(&shuffled[..n], &shuffled[n..]);
            u64::from(s >= observed)
        })
        .sum();
    Ok(PermutationTest {
        p: (1 + hits) as f64 / (1 + config.permutations) as f64,
        observed,
        n_evaluated: config.permutations as u64,
        exhaustive: false,
    })
}

/// `C(n, k)` if it is at most `limit`, else `None`. Overflow counts as
/// exceeding the limit.
fn n_choose_k(n: u64, k: u64, limit: u64) -> Option<u64> {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)?;
        acc /= i + 1;
        if acc > limit {
            return None;
        }
    }
    Some(acc)
}

/// Visits every way of marking `k` of the pooled values as positive.
fn enumerate_assignments<F>(
    pooled: &[f64],
    k: usize,
    start: usize,
    taken: usize,
    chosen: &mut Vec<bool>,
    visit: &mut F,
) where
    F: FnMut(&[bool]),
{
    if taken == k {
        visit(chosen);
        return;
    }
    // Not enough slots left to reach k: prune.
    if pooled.len() - start < k - taken {
        return;
    }
    for i in start..pooled.len() {
        if pooled.len() - i < k - taken {
            break;
        }
        chosen[i] = true;
        enumerate_assignments(pooled, k, i + 1, taken + 1, chosen, visit);
        chosen[i] = false;
    }
}

/// Exact one-sided sign test: probability of at least `k` successes in `n`
/// fair coin flips, `p = sum_{j=k..n} C(n, j) / 2^n`.
pub fn sign_test_one_sided(k: usize, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyInput {
            what: "sign test trials".into(),
        });
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "sign test successes {k} exceed trials {n}"
        )));
    }
    if n <= 100 {
        // Exact dyadic arithmetic: C(100, 50) fits in u128 comfortably.
        let mut num: u128 = 0;
        let mut c: u128 = 1; // C(n, 0)
        for j in 0..=n {
            if j >= k {
                num += c;
            }
            if j < n {
                c = c * (n - j) as u128 / (j + 1) as u128;
            }
        }
        Ok(num as f64 / 2f64.powi(n as i32))
    } else {
        // pmf recurrence in f64; fine at the precision anyone needs here.
        let mut pmf = 2f64.powi(-(n as i32));
        let mut tail = if k == 0 { pmf } else { 0.0 };
        for j in 0..n {
            pmf *= (n - j) as f64 / (j + 1) as f64;
            if j + 1 >= k {
                tail += pmf;
            }
        }
        Ok(tail.min(1.0))
    }
}

/// Configuration for a full coupling analysis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CouplingConfig {
    pub bootstrap: BootstrapConfig,
    pub permutation: PermutationConfig,
}

/// Complete behavioural-coupling statistics on one pos/neg score split.
///
/// The report embeds its seed and replicate counts, so any archived report
/// can be recomputed from the same inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub n_pos: usize,
    pub n_neg: usize,
    pub auc: f64,
    pub mean_gap: f64,
    pub pos_mean: f64,
    pub neg_mean: f64,
    pub auc_ci: (f64, f64),
    pub gap_ci: (f64, f64),
    pub permutation_p: f64,
    pub permutation_exhaustive: bool,
    pub seed: u64,
    pub n_bootstrap: usize,
    pub n_permutations: u64,
}

/// Runs the full coupling battery on one score split: AUC and mean gap with
/// stratified bootstrap CIs, plus a one-sided permutation test on the gap.
pub fn couple(pos: &[f64], neg: &[f64], seed: u64, config: &CouplingConfig) -> Result<CouplingReport> {
    let auc_point = auc(pos, neg)?;
    let gap_point = mean_gap(pos, neg)?;
    let auc_ci = stratified_bootstrap_ci(
        pos,
        neg,
        |p, n| auc(p, n).expect("resampled groups stay nonempty"),
        seed,
        &config.bootstrap,
    )?;
    let gap_ci = stratified_bootstrap_ci(
        pos,
        neg,
        |p, n| mean_gap(p, n).expect("resampled groups stay nonempty"),
        seed,
        &config.bootstrap,
    )?;
    let perm = permutation_p(
        pos,
        neg,
        |p, n| mean_gap(p, n).expect("permuted groups stay nonempty"),
        seed,
        &config.permutation,
    )?;
    Ok(CouplingReport {
        n_pos: pos.len(),
        n_neg: neg.len(),
        auc: auc_point,
        mean_gap: gap_point,
        pos_mean: mean(pos),
        neg_mean: mean(neg),
        auc_ci: (auc_ci.lo, auc_ci.hi),
        gap_ci: (gap_ci.lo, gap_ci.hi),
        permutation_p: perm.p,
        permutation_exhaustive: perm.exhaustive,
        seed,
        n_bootstrap: config.bootstrap.replicates,
        n_permutations: perm.n_evaluated,
    })
}

/// Percentile of `observed` within a control distribution: fraction strictly
/// below plus half the ties, in [0, 1].
pub fn control_percentile(observed: f64, controls: &[f64]) -> Result<f64> {
    if controls.is_empty() {
        return Err(Error::EmptyInput {
            what: "control values for percentile".into(),
        });
    }
    let below = controls.iter().filter(|&&c| c < observed).count() as f64;
    let ties = controls.iter().filter(|&&c| c == observed).count() as f64;
    Ok((below + 0.5 * ties) / controls.len() as f64)
}
