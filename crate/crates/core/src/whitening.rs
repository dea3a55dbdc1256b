//! Domain-sensitive feature whitening.
//!
//! Channel covariances of standardized features are compared between current
//! and replayed images of the same label; entries that vary strongly across
//! the pair are grouped by 1-D k-means and suppressed with an L1 penalty.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Epsilon inside standardization.
pub const STANDARDIZE_EPS: f64 = 1e-5;

/// Span below which a variance matrix is treated as constant.
pub const DEGENERATE_SPAN: f64 = 1e-12;

/// Per-channel zero-mean, unit-variance scaling of a `[c, hw]` feature.
pub fn standardize(f: &[f64], channels: usize) -> Result<Vec<f64>> {
    let hw = spatial_len(f, channels)?;
    let mut out = Vec::with_capacity(f.len());
    for row in f.chunks(hw) {
        let mean = row.iter().sum::<f64>() / hw as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        let inv = 1.0 / (var + STANDARDIZE_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Ok(out)
}

/// `(1/hw) f_s f_sᵀ` as a row-major `c x c` matrix.
pub fn covariance(fs: &[f64], channels: usize) -> Result<Vec<f64>> {
    let hw = spatial_len(fs, channels)?;
    let mut cov = vec![0.0; channels * channels];
    for i in 0..channels {
        let a = &fs[i * hw..(i + 1) * hw];
        for j in i..channels {
            let b = &fs[j * hw..(j + 1) * hw];
            let v = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / hw as f64;
            cov[i * channels + j] = v;
            cov[j * channels + i] = v;
        }
    }
    Ok(cov)
}

fn spatial_len(f: &[f64], channels: usize) -> Result<usize> {
    if channels == 0 || f.len() % channels != 0 || f.len() / channels < 2 {
        return Err(Error::Dimension(format!(
            "feature of {} values cannot be split into {channels} channels of at least 2 positions",
            f.len()
        )));
    }
    Ok(f.len() / channels)
}

/// Standardized covariance of every sample in a `[n, c, h, w]` tap.
pub fn tap_covariances<T: Scalar>(tap: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (n, c, _, _) = tap.dims4()?;
    let per = tap.numel() / n.max(1);
    (0..n)
        .map(|s| {
            let f: Vec<f64> = tap.data()[s * per..(s + 1) * per].iter().map(|v| v.as_f64()).collect();
            covariance(&standardize(&f, c)?, c)
        })
        .collect()
}

/// Mean over pairs of the two-sample variance `¼ (Σ - Σ̂)²`, elementwise.
pub fn variance_matrix(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::Data("variance matrix needs at least one pair".into()));
    };
    let len = first.len();
    let mut v = vec![0.0; len];
    for (a, b) in pairs {
        if a.len() != len || b.len() != len {
            return Err(Error::Dimension("covariance pairs differ in size".into()));
        }
        for ((acc, x), y) in v.iter_mut().zip(a).zip(b) {
            let mid = 0.5 * (x + y);
            *acc += 0.5 * ((x - mid) * (x - mid) + (y - mid) * (y - mid));
        }
    }
    let n = pairs.len() as f64;
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Globally optimal 1-D k-means partition of `values` (minimum within-cluster
/// sum of squares), returned as the cluster index of every input, with
/// clusters numbered by ascending center.
///
/// `k` larger than the number of distinct values collapses to one cluster per
/// distinct value. When several optimal partitions exist, the one whose
/// cluster boundaries sit furthest up the sorted order is chosen, so boundary
/// points join the lower cluster.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<(Vec<usize>, usize)> {
    if k == 0 {
        return Err(Error::Validation("k-means needs k >= 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("k-means input must be finite".into()));
    }
    if values.is_empty() {
        return Ok((Vec::new(), 0));
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct: Vec<f64> = Vec::new();
    let mut weight: Vec<f64> = Vec::new();
    for &v in &sorted {
        if distinct.last() == Some(&v) {
            *weight.last_mut().unwrap() += 1.0;
        } else {
            distinct.push(v);
            weight.push(1.0);
        }
    }
    let m = distinct.len();
    let k = k.min(m);
    let starts = optimal_starts(&distinct, &weight, k);
    let cluster_of = |v: f64| {
        let pos = distinct.partition_point(|&d| d < v);
        starts.partition_point(|&s| s <= pos) - 1
    };
    Ok((values.iter().map(|&v| cluster_of(v)).collect(), k))
}

/// Start index (into the distinct values) of each of the `k` optimal clusters.
fn optimal_starts(x: &[f64], w: &[f64], k: usize) -> Vec<usize> {
    let m = x.len();
    let shift = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
    let mut s0 = vec![0.0; m + 1];
    let mut s1 = vec![0.0; m + 1];
    let mut s2 = vec![0.0; m + 1];
    for i in 0..m {
        let c = x[i] - shift;
        s0[i + 1] = s0[i] + w[i];
        s1[i + 1] = s1[i] + w[i] * c;
        s2[i + 1] = s2[i] + w[i] * c * c;
    }
    // Within-cluster sum of squares of distinct values a..=b.
    let cost = |a: usize, b: usize| {
        let n = s0[b + 1] - s0[a];
        let s = s1[b + 1] - s1[a];
        (s2[b + 1] - s2[a] - s * s / n).max(0.0)
    };
    let mut prev: Vec<f64> = (0..m).map(|i| cost(0, i)).collect();
    let mut arg = vec![vec![0usize; m]; k];
    for q in 1..k {
        let mut cur = vec![f64::INFINITY; m];
        // cur[i] = min over j in q..=i of prev[j-1] + cost(j, i); split points are monotone in i.
        fill(q, m - 1, q, m - 1, &prev, &mut cur, &mut arg[q], &cost);
        prev = cur;
    }
    let mut starts = vec![0; k];
    let mut end = m - 1;
    for q in (1..k).rev() {
        starts[q] = arg[q][end];
        end = starts[q] - 1;
    }
    starts
}

#[allow(clippy::too_many_arguments)]
fn fill(
    lo: usize,
    hi: usize,
    opt_lo: usize,
    opt_hi: usize,
    prev: &[f64],
    cur: &mut [f64],
    arg: &mut [usize],
    cost: &dyn Fn(usize, usize) -> f64,
) {
    if lo > hi {
        return;
    }
    let mid = (lo + hi) / 2;
    let mut best = f64::INFINITY;
    let mut best_j = opt_lo;
    for j in opt_lo..=opt_hi.min(mid) {
        let c = prev[j - 1] + cost(j, mid);
        if c <= best {
            best = c;
            best_j = j;
        }
    }
    cur[mid] = best;
    arg[mid] = best_j;
    if mid > lo {
        fill(lo, mid - 1, opt_lo, best_j, prev, cur, arg, cost);
    }
    fill(mid + 1, hi, best_j, opt_hi, prev, cur, arg, cost);
}

/// Binary mask of the entries of `v` falling into the top k-means cluster.
pub fn indicator(v: &[f64], k: usize) -> Result<Vec<u8>> {
    if k < 2 {
        return Err(Error::Validation(format!("indicator needs k >= 2, got {k}")));
    }
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if v.is_empty() || hi - lo < DEGENERATE_SPAN {
        return Ok(vec![0; v.len()]);
    }
    let (assign, clusters) = kmeans_1d(v, k)?;
    Ok(assign.iter().map(|&a| u8::from(a + 1 == clusters)).collect())
}

/// Fraction of entries selected by a mask.
pub fn suppression_ratio(mask: &[u8]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&m| m == 1).count() as f64 / mask.len() as f64
}

/// Batch mean of `‖Σ ⊙ I‖₁ + ‖Σ̂ ⊙ I‖₁` on plain covariance matrices.
pub fn dsfw_loss(cov: &[Vec<f64>], cov_hat: &[Vec<f64>], mask: &[u8]) -> Result<f64> {
    if cov.len() != cov_hat.len() || cov.is_empty() {
        return Err(Error::Dimension(format!("{} current and {} replayed covariances", cov.len(), cov_hat.len())));
    }
    let mut total = 0.0;
    for (a, b) in cov.iter().zip(cov_hat) {
        if a.len() != mask.len() || b.len() != mask.len() {
            return Err(Error::Dimension("covariance and mask sizes differ".into()));
        }
        for ((x, y), &m) in a.iter().zip(b).zip(mask) {
            if m != 0 {
                total += x.abs() + y.abs();
            }
        }
    }
    Ok(total / cov.len() as f64)
}

/// Differentiable whitening term for one tapped layer.
///
/// `current` and `replayed` are `[n, c, h, w]` features of paired images.
pub fn dsfw_graph<T: Scalar>(g: &mut Graph<T>, current: Var, replayed: Var, mask: &[u8]) -> Result<Var> {
    let mask: Arc<Vec<T>> = Arc::new(mask.iter().map(|&m| T::of(m as f64)).collect());
    let eps = T::of(STANDARDIZE_EPS);
    let mut terms = [current, replayed].into_iter().map(|x| {
        let s = g.instance_norm(x, eps)?;
        let cov = g.channel_gram(s)?;
        g.masked_abs_sum(cov, mask.clone())
    });
    let a = terms.next().expect("two terms")?;
    let b = terms.next().expect("two terms")?;
    g.add(a, b)
}

/// Whitening statistics of one tapped layer, as dumped per time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWhitening {
    /// 0-based pool tap index.
    pub layer: usize,
    pub channels: usize,
    pub v: Vec<Vec<f64>>,
    pub i: Vec<Vec<u8>>,
    pub n_used: usize,
    /// `|C_high| / C²`.
    pub ratio: f64,
}

impl LayerWhitening {
    pub fn new(layer: usize, channels: usize, v: &[f64], k: usize, n_used: usize) -> Result<Self> {
        if v.len() != channels * channels {
            return Err(Error::Dimension(format!("{} variance entries for {channels} channels", v.len())));
        }
        let mask = indicator(v, k)?;
        Ok(Self {
            layer,
            channels,
            v: v.chunks(channels).map(<[f64]>::to_vec).collect(),
            ratio: suppression_ratio(&mask),
            i: mask.chunks(channels).map(<[u8]>::to_vec).collect(),
            n_used,
        })
    }

    pub fn mask(&self) -> Vec<u8> {
        self.i.iter().flatten().copied().collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.v.iter().flatten().copied().collect()
    }

    /// Same variance matrix regrouped with a different cluster count.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        Self::new(self.layer, self.channels, &self.variance(), k, self.n_used)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WhiteningState {
    pub step: usize,
    pub k: usize,
    pub layers: Vec<LayerWhitening>,
}

impl WhiteningState {
    pub fn mean_ratio(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.ratio).sum::<f64>() / self.layers.len() as f64
    }
}
