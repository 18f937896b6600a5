//! Kernel two-sample distances used for cross-domain feature alignment.
//!
//! The distance between feature batches is the biased V-statistic estimate of
//! squared maximum mean discrepancy under a Gaussian multi-kernel. Three
//! variants are provided: global ([`mmd2`]), class-conditional weighted by
//! soft labels ([`lmmd2`]), and the same averaged over a stack of layer
//! activations ([`mlmmd2`]).
//!
//! Evaluation-path sums are accumulated in sorted order so that
//! `mmd2(s, t) == mmd2(t, s)` holds bit-exactly and `mmd2(s, s)` is exactly
//! zero. The tape variants (`*_node`) trade that for differentiability.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};

/// Classes whose total soft weight in either domain falls below this are
/// dropped from the class-conditional distance.
pub const CLASS_WEIGHT_FLOOR: f64 = 1e-8;

/// Default weight of the adaptation term in the detector training loss.
pub const DEFAULT_ADAPTATION_WEIGHT: f64 = 0.5;

/// Multipliers applied to the median pairwise distance when bandwidths are
/// derived from data.
pub const MEDIAN_SCALES: [f64; 3] = [0.5, 1.0, 2.0];

/// How the Gaussian kernel bandwidths are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidths {
    /// Explicit sigma list.
    Fixed(Vec<f64>),
    /// Median pairwise distance over the pooled sample, times each scale.
    Median { scales: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub bandwidths: Bandwidths,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidths: Bandwidths::Median {
                scales: MEDIAN_SCALES.to_vec(),
            },
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigmas: &[f64]) -> Self {
        Self {
            bandwidths: Bandwidths::Fixed(sigmas.to_vec()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (path, list) = match &self.bandwidths {
            Bandwidths::Fixed(sigmas) => ("bandwidths.fixed", sigmas),
            Bandwidths::Median { scales } => ("bandwidths.median.scales", scales),
        };
        if list.is_empty() {
            return Err(Error::config(path, "must be non-empty"));
        }
        if list.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::config(path, "entries must be finite and positive"));
        }
        Ok(())
    }

    /// Concrete sigma list for a pooled sample. Bandwidths are constants with
    /// respect to gradients even when derived from the data.
    pub fn resolve(&self, pooled: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let sigmas = match &self.bandwidths {
            Bandwidths::Fixed(sigmas) => sigmas.clone(),
            Bandwidths::Median { scales } => {
                let m = median_pairwise_distance(pooled);
                scales.iter().map(|s| s * m).collect()
            }
        };
        if sigmas.is_empty() {
            return Err(Error::domain("kernel: empty bandwidth list"));
        }
        if sigmas.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::domain(format!(
                "kernel: bandwidths must be finite and positive, got {sigmas:?}"
            )));
        }
        Ok(sigmas)
    }
}

/// Median Euclidean distance over all row pairs, falling back to 1.0 when the
/// sample is degenerate (fewer than two rows, or all rows identical).
pub fn median_pairwise_distance(x: ArrayView2<'_, f64>) -> f64 {
    let n = x.nrows();
    let mut dists = Vec::with_capacity(n.saturating_sub(1) * n / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for k in 0..x.ncols() {
                let d = x[[i, k]] - x[[j, k]];
                acc += d * d;
            }
            dists.push(acc.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if median.is_finite() && median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Gaussian multi-kernel: mean over bandwidths of `exp(-d2 / (2 sigma^2))`.
fn kernel_of_sqdist(d2: f64, sigmas: &[f64]) -> f64 {
    let sum: f64 = sigmas
        .iter()
        .map(|&s| (-d2 / (2.0 * s * s)).exp())
        .sum();
    sum / sigmas.len() as f64
}

/// Squared-distance matrix via row norms and a cross Gram term, clamped at
/// zero. Inner loops run in fixed index order so that the result is
/// bit-symmetric in its arguments.
fn sqdist_gram(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, d) = a.dim();
    let m = b.nrows();
    let ra: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|k| a[[i, k]] * a[[i, k]]).sum())
        .collect();
    let rb: Vec<f64> = (0..m)
        .map(|j| (0..d).map(|k| b[[j, k]] * b[[j, k]]).sum())
        .collect();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut dot = 0.0;
            for k in 0..d {
                dot += a[[i, k]] * b[[j, k]];
            }
            out[[i, j]] = (ra[i] + rb[j] - 2.0 * dot).max(0.0);
        }
    }
    out
}

/// Order-independent sum: sort by total order, then accumulate.
fn sorted_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn kernel_sum(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, sigmas: &[f64]) -> f64 {
    let d2 = sqdist_gram(a, b);
    sorted_sum(d2.iter().map(|&v| kernel_of_sqdist(v, sigmas)).collect())
}

fn check_batches(s: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>) -> Result<()> {
    if s.nrows() == 0 || t.nrows() == 0 {
        return Err(Error::domain("mmd: both batches must be non-empty"));
    }
    if s.ncols() != t.ncols() {
        return Err(Error::shape(format!(
            "mmd: feature dims differ, {} vs {}",
            s.ncols(),
            t.ncols()
        )));
    }
    if s.iter().chain(t.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric("mmd: non-finite feature value"));
    }
    Ok(())
}

fn pooled(s: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((s.nrows() + t.nrows(), s.ncols()));
    out.slice_mut(ndarray::s![..s.nrows(), ..]).assign(&s);
    out.slice_mut(ndarray::s![s.nrows().., ..]).assign(&t);
    out
}

/// Squared MMD between two batches (rows are samples), biased V-statistic:
/// mean kernel within each batch minus twice the mean cross kernel.
pub fn mmd2(s: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>, config: &KernelConfig) -> Result<f64> {
    check_batches(s, t)?;
    let sigmas = config.resolve(pooled(s, t).view())?;
    let (n, m) = (s.nrows() as f64, t.nrows() as f64);
    let term_ss = kernel_sum(s, s, &sigmas) / (n * n);
    let term_tt = kernel_sum(t, t, &sigmas) / (m * m);
    let term_st = kernel_sum(s, t, &sigmas) / (n * m);
    Ok(term_ss + term_tt - 2.0 * term_st)
}

/// Soft class-membership weights: rows are samples, columns are classes.
/// Entries must be finite and nonnegative; rows need not be normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabels(Array2<f64>);

impl SoftLabels {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::domain("soft labels: empty matrix"));
        }
        if weights.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::domain(
                "soft labels: entries must be finite and nonnegative",
            ));
        }
        Ok(Self(weights))
    }

    /// One-hot rows from hard class indices.
    pub fn from_hard(labels: &[usize], n_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::domain(format!(
                "soft labels: class index {bad} out of range for {n_classes} classes"
            )));
        }
        let mut w = Array2::zeros((labels.len(), n_classes));
        for (i, &l) in labels.iter().enumerate() {
            w[[i, l]] = 1.0;
        }
        Self::new(w)
    }

    pub fn n_samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    /// Per-class column sums (total weight mass per class in this domain).
    pub fn class_mass(&self) -> Array1<f64> {
        self.0.sum_axis(Axis(0))
    }
}

/// Classes retained by the class-conditional distance, and the per-domain
/// column-normalized weights for each.
fn included_class_columns(
    w_s: &SoftLabels,
    w_t: &SoftLabels,
) -> Result<Vec<(usize, Array1<f64>, Array1<f64>)>> {
    if w_s.n_classes() != w_t.n_classes() {
        return Err(Error::shape(format!(
            "soft labels: class counts differ, {} vs {}",
            w_s.n_classes(),
            w_t.n_classes()
        )));
    }
    let mass_s = w_s.class_mass();
    let mass_t = w_t.class_mass();
    let mut out = Vec::new();
    for c in 0..w_s.n_classes() {
        if mass_s[c] < CLASS_WEIGHT_FLOOR || mass_t[c] < CLASS_WEIGHT_FLOOR {
            continue;
        }
        let col_s = w_s.matrix().column(c).mapv(|v| v / mass_s[c]);
        let col_t = w_t.matrix().column(c).mapv(|v| v / mass_t[c]);
        out.push((c, col_s, col_t));
    }
    Ok(out)
}

fn weighted_kernel_sum(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    wa: &Array1<f64>,
    wb: &Array1<f64>,
    sigmas: &[f64],
) -> f64 {
    let d2 = sqdist_gram(a, b);
    let mut vals = Vec::with_capacity(d2.len());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            vals.push(wa[i] * wb[j] * kernel_of_sqdist(d2[[i, j]], sigmas));
        }
    }
    sorted_sum(vals)
}

/// Class-conditional squared MMD: per class, samples are weighted by their
/// column-normalized soft membership; the result is the mean over classes
/// with enough mass in both domains. Returns 0 when no class qualifies.
pub fn lmmd2(
    s: ArrayView2<'_, f64>,
    t: ArrayView2<'_, f64>,
    w_s: &SoftLabels,
    w_t: &SoftLabels,
    config: &KernelConfig,
) -> Result<f64> {
    check_batches(s, t)?;
    if w_s.n_samples() != s.nrows() || w_t.n_samples() != t.nrows() {
        return Err(Error::shape(format!(
            "lmmd: weight rows ({}, {}) must match batch sizes ({}, {})",
            w_s.n_samples(),
            w_t.n_samples(),
            s.nrows(),
            t.nrows()
        )));
    }
    let sigmas = config.resolve(pooled(s, t).view())?;
    let classes = included_class_columns(w_s, w_t)?;
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (_, col_s, col_t) in &classes {
        let term_ss = weighted_kernel_sum(s, s, col_s, col_s, &sigmas);
        let term_tt = weighted_kernel_sum(t, t, col_t, col_t, &sigmas);
        let term_st = weighted_kernel_sum(s, t, col_s, col_t, &sigmas);
        total += term_ss + term_tt - 2.0 * term_st;
    }
    Ok(total / classes.len() as f64)
}

fn check_layer_stacks(s_layers: &[Array2<f64>], t_layers: &[Array2<f64>]) -> Result<()> {
    if s_layers.is_empty() {
        return Err(Error::domain("multi-layer distance: no layers given"));
    }
    if s_layers.len() != t_layers.len() {
        return Err(Error::shape(format!(
            "multi-layer distance: layer counts differ, {} vs {}",
            s_layers.len(),
            t_layers.len()
        )));
    }
    Ok(())
}

/// Mean of [`mmd2`] over aligned layer-activation stacks.
pub fn multi_layer_mmd2(
    s_layers: &[Array2<f64>],
    t_layers: &[Array2<f64>],
    config: &KernelConfig,
) -> Result<f64> {
    check_layer_stacks(s_layers, t_layers)?;
    let mut total = 0.0;
    for (s, t) in s_layers.iter().zip(t_layers) {
        total += mmd2(s.view(), t.view(), config)?;
    }
    Ok(total / s_layers.len() as f64)
}

/// Mean of [`lmmd2`] over aligned layer-activation stacks; one weight matrix
/// per domain is shared across layers.
pub fn mlmmd2(
    s_layers: &[Array2<f64>],
    t_layers: &[Array2<f64>],
    w_s: &SoftLabels,
    w_t: &SoftLabels,
    config: &KernelConfig,
) -> Result<f64> {
    check_layer_stacks(s_layers, t_layers)?;
    let mut total = 0.0;
    for (s, t) in s_layers.iter().zip(t_layers) {
        total += lmmd2(s.view(), t.view(), w_s, w_t, config)?;
    }
    Ok(total / s_layers.len() as f64)
}

/// Detector training objective: classification loss plus weighted adaptation
/// distance.
pub fn sed_total_loss(classification: f64, adaptation: f64, weight: f64) -> f64 {
    classification + weight * adaptation
}

/// Tape node for the squared-distance matrix between row batches `a` and `b`.
pub fn pairwise_sqdist_node(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    let (na, _) = tape.dim(a);
    let (nb, _) = tape.dim(b);
    let sa = tape.square(a);
    let ra = tape.sum_cols(sa);
    let sb = tape.square(b);
    let rb = tape.sum_cols(sb);
    let ones_row = tape.leaf(Array2::ones((1, nb)));
    let ones_col = tape.leaf(Array2::ones((na, 1)));
    let left = tape.matmul(ra, ones_row);
    let rbt = tape.transpose(rb);
    let right = tape.matmul(ones_col, rbt);
    let bt = tape.transpose(b);
    let cross = tape.matmul(a, bt);
    let cross2 = tape.scale(cross, -2.0);
    let partial = tape.add(left, right);
    tape.add(partial, cross2)
}

/// Tape node for the Gaussian multi-kernel matrix between `a` and `b`.
pub fn kernel_node(tape: &mut Tape, a: NodeId, b: NodeId, sigmas: &[f64]) -> NodeId {
    assert!(!sigmas.is_empty(), "kernel_node: empty bandwidth list");
    let d2 = pairwise_sqdist_node(tape, a, b);
    let mut acc: Option<NodeId> = None;
    for &sigma in sigmas {
        let scaled = tape.scale(d2, -1.0 / (2.0 * sigma * sigma));
        let k = tape.exp(scaled);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, k),
            None => k,
        });
    }
    tape.scale(acc.unwrap(), 1.0 / sigmas.len() as f64)
}

/// Differentiable squared MMD with fixed bandwidths.
pub fn mmd2_node(tape: &mut Tape, s: NodeId, t: NodeId, sigmas: &[f64]) -> NodeId {
    let (n, _) = tape.dim(s);
    let (m, _) = tape.dim(t);
    let k_ss = kernel_node(tape, s, s, sigmas);
    let k_tt = kernel_node(tape, t, t, sigmas);
    let k_st = kernel_node(tape, s, t, sigmas);
    let m_ss = tape.mean_all(k_ss);
    let m_tt = tape.mean_all(k_tt);
    let m_st = tape.mean_all(k_st);
    let _ = (n, m);
    let sum_in = tape.add(m_ss, m_tt);
    let cross = tape.scale(m_st, 2.0);
    tape.sub(sum_in, cross)
}

/// Differentiable class-conditional squared MMD. Weights are treated as
/// constants; columns must already be the per-domain normalized columns of
/// the included classes (see [`SoftLabels`] and the eval-path skip rule).
pub fn lmmd2_node(
    tape: &mut Tape,
    s: NodeId,
    t: NodeId,
    class_columns: &[(Array1<f64>, Array1<f64>)],
    sigmas: &[f64],
) -> NodeId {
    assert!(
        !class_columns.is_empty(),
        "lmmd2_node: at least one class column required"
    );
    let k_ss = kernel_node(tape, s, s, sigmas);
    let k_tt = kernel_node(tape, t, t, sigmas);
    let k_st = kernel_node(tape, s, t, sigmas);
    let mut acc: Option<NodeId> = None;
    for (col_s, col_t) in class_columns {
        let ws = tape.leaf(col_s.clone().insert_axis(Axis(1)).to_owned());
        let wt = tape.leaf(col_t.clone().insert_axis(Axis(1)).to_owned());
        let wst = tape.transpose(ws);
        let wtt = tape.transpose(wt);

        let ss_left = tape.matmul(wst, k_ss);
        let term_ss = tape.matmul(ss_left, ws);
        let tt_left = tape.matmul(wtt, k_tt);
        let term_tt = tape.matmul(tt_left, wt);
        let st_left = tape.matmul(wst, k_st);
        let term_st = tape.matmul(st_left, wt);

        let within = tape.add(term_ss, term_tt);
        let cross = tape.scale(term_st, 2.0);
        let class_term = tape.sub(within, cross);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, class_term),
            None => class_term,
        });
    }
    tape.scale(acc.unwrap(), 1.0 / class_columns.len() as f64)
}

/// Normalized per-class weight columns shared by the eval and tape routes.
pub fn normalized_class_columns(
    w_s: &SoftLabels,
    w_t: &SoftLabels,
) -> Result<Vec<(Array1<f64>, Array1<f64>)>> {
    Ok(included_class_columns(w_s, w_t)?
        .into_iter()
        .map(|(_, a, b)| (a, b))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::selftest::{naive_lmmd2, naive_mmd2};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng as _;

    fn random(shape: (usize, usize), rng: &mut crate::rng::Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn two_point_hand_value() {
        let s = array![[0.0]];
        let t = array![[1.0]];
        let config = KernelConfig::fixed(&[1.0]);
        let got = mmd2(s.view(), t.view(), &config).unwrap();
        let expected = 2.0 - 2.0 * (-0.5f64).exp();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn identical_batches_give_zero() {
        let mut rng = rng_from_seed(21);
        let s = random((7, 4), &mut rng);
        let config = KernelConfig::default();
        let got = mmd2(s.view(), s.view(), &config).unwrap();
        assert!(got.abs() < 1e-12, "mmd2(S, S) = {got}");
    }

    #[test]
    fn argument_order_is_bit_exact() {
        let mut rng = rng_from_seed(22);
        let s = random((9, 5), &mut rng);
        let t = random((6, 5), &mut rng);
        let config = KernelConfig::default();
        let ab = mmd2(s.view(), t.view(), &config).unwrap();
        let ba = mmd2(t.view(), s.view(), &config).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn matches_naive_double_loop() {
        let mut rng = rng_from_seed(23);
        for _ in 0..20 {
            let n = rng.gen_range(2..10);
            let m = rng.gen_range(2..10);
            let d = rng.gen_range(1..6);
            let s = random((n, d), &mut rng);
            let t = random((m, d), &mut rng);
            let sigmas = vec![0.7, 1.3];
            let fast = mmd2(s.view(), t.view(), &KernelConfig::fixed(&sigmas)).unwrap();
            let slow = naive_mmd2(s.view(), t.view(), &sigmas);
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-10);
        }
    }

    #[test]
    fn separated_batches_give_larger_distance() {
        let mut rng = rng_from_seed(24);
        let s = random((12, 3), &mut rng);
        let near = &s + 0.05;
        let far = &s + 3.0;
        let config = KernelConfig::fixed(&[1.0]);
        let d_near = mmd2(s.view(), near.view(), &config).unwrap();
        let d_far = mmd2(s.view(), far.view(), &config).unwrap();
        assert!(d_near < d_far);
        assert!(d_near >= 0.0);
    }

    #[test]
    fn median_heuristic_fallback_on_degenerate_sample() {
        let x = Array2::zeros((4, 3));
        assert_eq!(median_pairwise_distance(x.view()), 1.0);
        let single = Array2::zeros((1, 3));
        assert_eq!(median_pairwise_distance(single.view()), 1.0);
    }

    #[test]
    fn median_heuristic_hand_value() {
        // Points 0, 1, 3 on a line: distances {1, 2, 3}, median 2.
        let x = array![[0.0], [1.0], [3.0]];
        assert_abs_diff_eq!(median_pairwise_distance(x.view()), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let s = Array2::<f64>::zeros((0, 3));
        let t = Array2::<f64>::zeros((4, 3));
        assert!(mmd2(s.view(), t.view(), &KernelConfig::default()).is_err());
    }

    #[test]
    fn feature_dim_mismatch_rejected() {
        let s = Array2::<f64>::zeros((4, 3));
        let t = Array2::<f64>::zeros((4, 2));
        assert!(mmd2(s.view(), t.view(), &KernelConfig::default()).is_err());
    }

    #[test]
    fn single_class_uniform_weights_reduce_to_global() {
        let mut rng = rng_from_seed(25);
        let s = random((6, 3), &mut rng);
        let t = random((8, 3), &mut rng);
        let w_s = SoftLabels::new(Array2::ones((6, 1))).unwrap();
        let w_t = SoftLabels::new(Array2::ones((8, 1))).unwrap();
        let config = KernelConfig::fixed(&[0.9]);
        let local = lmmd2(s.view(), t.view(), &w_s, &w_t, &config).unwrap();
        let global = mmd2(s.view(), t.view(), &config).unwrap();
        assert_abs_diff_eq!(local, global, epsilon = 1e-12);
    }

    #[test]
    fn hard_labels_match_brute_force() {
        let mut rng = rng_from_seed(26);
        let s = random((10, 4), &mut rng);
        let t = random((9, 4), &mut rng);
        let labels_s: Vec<usize> = (0..10).map(|_| rng.gen_range(0..2)).collect();
        let labels_t: Vec<usize> = (0..9).map(|_| rng.gen_range(0..2)).collect();
        let w_s = SoftLabels::from_hard(&labels_s, 2).unwrap();
        let w_t = SoftLabels::from_hard(&labels_t, 2).unwrap();
        let sigmas = vec![1.0];
        let got = lmmd2(
            s.view(),
            t.view(),
            &w_s,
            &w_t,
            &KernelConfig::fixed(&sigmas),
        )
        .unwrap();
        let want = naive_lmmd2(
            s.view(),
            t.view(),
            w_s.matrix().view(),
            w_t.matrix().view(),
            &sigmas,
        );
        assert_abs_diff_eq!(got, want, epsilon = 1e-10);
    }

    #[test]
    fn soft_labels_match_brute_force() {
        let mut rng = rng_from_seed(27);
        let s = random((8, 3), &mut rng);
        let t = random((7, 3), &mut rng);
        let raw_s = random((8, 3), &mut rng).mapv(|v| v.abs() + 0.01);
        let raw_t = random((7, 3), &mut rng).mapv(|v| v.abs() + 0.01);
        let w_s = SoftLabels::new(raw_s.clone()).unwrap();
        let w_t = SoftLabels::new(raw_t.clone()).unwrap();
        let sigmas = vec![0.8, 1.6];
        let got = lmmd2(
            s.view(),
            t.view(),
            &w_s,
            &w_t,
            &KernelConfig::fixed(&sigmas),
        )
        .unwrap();
        let want = naive_lmmd2(s.view(), t.view(), raw_s.view(), raw_t.view(), &sigmas);
        assert_abs_diff_eq!(got, want, epsilon = 1e-10);
    }

    #[test]
    fn absent_class_is_skipped() {
        let mut rng = rng_from_seed(28);
        let s = random((6, 3), &mut rng);
        let t = random((5, 3), &mut rng);
        // Class 1 has no mass in the target; result must equal the
        // one-class distance over class 0 alone.
        let w_s = SoftLabels::from_hard(&[0, 0, 1, 0, 1, 0], 2).unwrap();
        let w_t = SoftLabels::from_hard(&[0, 0, 0, 0, 0], 2).unwrap();
        let config = KernelConfig::fixed(&[1.0]);
        let got = lmmd2(s.view(), t.view(), &w_s, &w_t, &config).unwrap();

        let w_s0 = SoftLabels::new(w_s.matrix().column(0).to_owned().insert_axis(Axis(1)))
            .unwrap();
        let w_t0 = SoftLabels::new(w_t.matrix().column(0).to_owned().insert_axis(Axis(1)))
            .unwrap();
        let only_class0 = lmmd2(s.view(), t.view(), &w_s0, &w_t0, &config).unwrap();
        assert_abs_diff_eq!(got, only_class0, epsilon = 1e-12);
    }

    #[test]
    fn all_classes_absent_gives_zero() {
        let s = array![[0.0, 1.0], [1.0, 0.0]];
        let t = array![[2.0, 2.0]];
        let w_s = SoftLabels::new(Array2::zeros((2, 2)).mapv(|_: f64| 0.0)).unwrap();
        let w_t = SoftLabels::new(Array2::zeros((1, 2)).mapv(|_: f64| 0.0)).unwrap();
        let got = lmmd2(
            s.view(),
            t.view(),
            &w_s,
            &w_t,
            &KernelConfig::fixed(&[1.0]),
        )
        .unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn single_layer_stack_reduces_to_lmmd() {
        let mut rng = rng_from_seed(29);
        let s = random((6, 4), &mut rng);
        let t = random((5, 4), &mut rng);
        let w_s = SoftLabels::from_hard(&[0, 1, 0, 1, 0, 1], 2).unwrap();
        let w_t = SoftLabels::from_hard(&[1, 0, 1, 0, 1], 2).unwrap();
        let config = KernelConfig::fixed(&[1.1]);
        let stacked = mlmmd2(
            &[s.clone()],
            &[t.clone()],
            &w_s,
            &w_t,
            &config,
        )
        .unwrap();
        let flat = lmmd2(s.view(), t.view(), &w_s, &w_t, &config).unwrap();
        assert_abs_diff_eq!(stacked, flat, epsilon = 1e-12);
    }

    #[test]
    fn layer_mean_is_average_of_per_layer_values() {
        let mut rng = rng_from_seed(30);
        let s1 = random((5, 3), &mut rng);
        let s2 = random((5, 2), &mut rng);
        let t1 = random((6, 3), &mut rng);
        let t2 = random((6, 2), &mut rng);
        let w_s = SoftLabels::from_hard(&[0, 0, 1, 1, 0], 2).unwrap();
        let w_t = SoftLabels::from_hard(&[1, 1, 0, 0, 1, 0], 2).unwrap();
        let config = KernelConfig::fixed(&[1.0]);
        let both = mlmmd2(
            &[s1.clone(), s2.clone()],
            &[t1.clone(), t2.clone()],
            &w_s,
            &w_t,
            &config,
        )
        .unwrap();
        let l1 = lmmd2(s1.view(), t1.view(), &w_s, &w_t, &config).unwrap();
        let l2 = lmmd2(s2.view(), t2.view(), &w_s, &w_t, &config).unwrap();
        assert_abs_diff_eq!(both, 0.5 * (l1 + l2), epsilon = 1e-12);

        let global = multi_layer_mmd2(&[s1.clone(), s2.clone()], &[t1.clone(), t2.clone()], &config)
            .unwrap();
        let g1 = mmd2(s1.view(), t1.view(), &config).unwrap();
        let g2 = mmd2(s2.view(), t2.view(), &config).unwrap();
        assert_abs_diff_eq!(global, 0.5 * (g1 + g2), epsilon = 1e-12);
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        assert_abs_diff_eq!(sed_total_loss(1.25, 0.5, 0.5), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(sed_total_loss(2.0, 3.0, 0.0), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn tape_mmd_matches_eval_route() {
        let mut rng = rng_from_seed(31);
        let s = random((6, 3), &mut rng);
        let t = random((7, 3), &mut rng);
        let sigmas = vec![0.9, 1.8];
        let eval = mmd2(s.view(), t.view(), &KernelConfig::fixed(&sigmas)).unwrap();
        let mut tape = Tape::new();
        let sid = tape.leaf(s);
        let tid = tape.leaf(t);
        let node = mmd2_node(&mut tape, sid, tid, &sigmas);
        assert_abs_diff_eq!(tape.value(node)[[0, 0]], eval, epsilon = 1e-10);
    }

    #[test]
    fn tape_mmd_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(32);
        let s = random((4, 2), &mut rng);
        let t = random((5, 2), &mut rng);
        let sigmas = vec![1.0];

        let eval = |sv: &Array2<f64>| {
            mmd2(sv.view(), t.view(), &KernelConfig::fixed(&sigmas)).unwrap()
        };
        let mut tape = Tape::new();
        let sid = tape.leaf(s.clone());
        let tid = tape.leaf(t.clone());
        let node = mmd2_node(&mut tape, sid, tid, &sigmas);
        let grads = tape.backward(node);
        let g = grads.get(sid).unwrap();

        let step = 1e-6;
        for i in 0..s.nrows() {
            for j in 0..s.ncols() {
                let mut plus = s.clone();
                plus[[i, j]] += step;
                let mut minus = s.clone();
                minus[[i, j]] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                assert_abs_diff_eq!(g[[i, j]], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn tape_lmmd_matches_eval_route() {
        let mut rng = rng_from_seed(33);
        let s = random((6, 3), &mut rng);
        let t = random((5, 3), &mut rng);
        let w_s = SoftLabels::from_hard(&[0, 1, 0, 1, 1, 0], 2).unwrap();
        let w_t = SoftLabels::from_hard(&[1, 0, 0, 1, 0], 2).unwrap();
        let sigmas = vec![1.2];
        let eval = lmmd2(
            s.view(),
            t.view(),
            &w_s,
            &w_t,
            &KernelConfig::fixed(&sigmas),
        )
        .unwrap();
        let cols = normalized_class_columns(&w_s, &w_t).unwrap();
        let mut tape = Tape::new();
        let sid = tape.leaf(s);
        let tid = tape.leaf(t);
        let node = lmmd2_node(&mut tape, sid, tid, &cols, &sigmas);
        assert_abs_diff_eq!(tape.value(node)[[0, 0]], eval, epsilon = 1e-10);
    }
}
