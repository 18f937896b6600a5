//! Built-in verification suite.
//!
//! The oracles here recompute quantities by deliberately slow, independent
//! routes (double loops, quadrature, sampling) so the fast implementations
//! can be checked against them both in tests and at runtime via the CLI.

use ndarray::{Array2, ArrayView2};

use crate::corpus::{generate_corpus, CorpusSpec};
use crate::diarization::{eder, EmotionId, Segment, SegmentList};
use crate::diffusion::{
    forward_sample, gaussian_data_score, reverse_sample, NoiseSchedule, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::mmd::{KernelConfig, SoftLabels};
use crate::models::{
    grad_check, grads_for, GradCheckReport, ParamSet, ScoreNetConfig, ToyScoreNet,
    GRAD_CHECK_STEP,
};
use crate::rng::{subrng, subseed};
use crate::style::{attention_weights, cross_attention_align, AttentionParams, ContentSequence};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn multi_kernel(d2: f64, sigmas: &[f64]) -> f64 {
    sigmas
        .iter()
        .map(|&s| (-d2 / (2.0 * s * s)).exp())
        .sum::<f64>()
        / sigmas.len() as f64
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Squared MMD by direct double loops, no shared code with the fast path.
pub fn naive_mmd2(s: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>, sigmas: &[f64]) -> f64 {
    let (n, m) = (s.nrows(), t.nrows());
    let mut ss = 0.0;
    for i in 0..n {
        for j in 0..n {
            ss += multi_kernel(sq_dist(s.row(i), s.row(j)), sigmas);
        }
    }
    let mut tt = 0.0;
    for i in 0..m {
        for j in 0..m {
            tt += multi_kernel(sq_dist(t.row(i), t.row(j)), sigmas);
        }
    }
    let mut st = 0.0;
    for i in 0..n {
        for j in 0..m {
            st += multi_kernel(sq_dist(s.row(i), t.row(j)), sigmas);
        }
    }
    ss / (n * n) as f64 + tt / (m * m) as f64 - 2.0 * st / (n * m) as f64
}

/// Class-conditional squared MMD by direct loops over raw soft weights:
/// per class, normalize columns within each domain, form the weighted kernel
/// sums, average over classes with mass in both domains.
pub fn naive_lmmd2(
    s: ArrayView2<'_, f64>,
    t: ArrayView2<'_, f64>,
    w_s: ArrayView2<'_, f64>,
    w_t: ArrayView2<'_, f64>,
    sigmas: &[f64],
) -> f64 {
    let (n, m) = (s.nrows(), t.nrows());
    let n_classes = w_s.ncols();
    let mut total = 0.0;
    let mut used = 0usize;
    for c in 0..n_classes {
        let mass_s: f64 = (0..n).map(|i| w_s[[i, c]]).sum();
        let mass_t: f64 = (0..m).map(|j| w_t[[j, c]]).sum();
        if mass_s < crate::mmd::CLASS_WEIGHT_FLOOR || mass_t < crate::mmd::CLASS_WEIGHT_FLOOR {
            continue;
        }
        let mut ss = 0.0;
        for i in 0..n {
            for j in 0..n {
                ss += (w_s[[i, c]] / mass_s)
                    * (w_s[[j, c]] / mass_s)
                    * multi_kernel(sq_dist(s.row(i), s.row(j)), sigmas);
            }
        }
        let mut tt = 0.0;
        for i in 0..m {
            for j in 0..m {
                tt += (w_t[[i, c]] / mass_t)
                    * (w_t[[j, c]] / mass_t)
                    * multi_kernel(sq_dist(t.row(i), t.row(j)), sigmas);
            }
        }
        let mut st = 0.0;
        for i in 0..n {
            for j in 0..m {
                st += (w_s[[i, c]] / mass_s)
                    * (w_t[[j, c]] / mass_t)
                    * multi_kernel(sq_dist(s.row(i), t.row(j)), sigmas);
            }
        }
        total += ss + tt - 2.0 * st;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}

/// Integrated noise rate by composite Simpson quadrature over the linear
/// rate, an independent route to the closed form.
pub fn quadrature_cum_beta(schedule: &NoiseSchedule, t: f64, panels: usize) -> f64 {
    let h = t / panels as f64;
    let mut acc = schedule.beta(0.0) + schedule.beta(t);
    for i in 1..panels {
        let x = i as f64 * h;
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * schedule.beta(x);
    }
    acc * h / 3.0
}

/// Statistics of scalars drawn by running the reverse sampler with the exact
/// marginal score of N(data_mean, data_std^2) data.
pub struct SamplerStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Draw `n_scalars` values (as 1-dim samples) with the analytic-score
/// sampler and report their mean and standard deviation.
pub fn sampler_statistics(
    data_mean: f64,
    data_std: f64,
    n_scalars: usize,
    n_steps: usize,
    seed: u64,
) -> Result<SamplerStats> {
    let schedule = NoiseSchedule::default();
    let config = SamplerConfig {
        n_steps,
        stochastic: true,
    };
    let mut rng = subrng(seed, 0x5a317e);
    let batch = 100usize;
    let mut values = Vec::with_capacity(n_scalars);
    let data_var = data_std * data_std;
    while values.len() < n_scalars {
        let take = batch.min(n_scalars - values.len());
        let x = reverse_sample(
            |xt: &Array2<f64>, t: f64, _c: &()| {
                gaussian_data_score(xt, data_mean, data_var, t, &schedule)
                    .expect("marginal score is defined for t in (0, 1]")
            },
            (take, 1),
            &(),
            &schedule,
            &config,
            &mut rng,
        )?;
        values.extend(x.iter().copied());
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(SamplerStats {
        mean,
        std: var.sqrt(),
        n,
    })
}

const SAMPLER_TARGET_MEAN: f64 = 1.0;
const SAMPLER_TARGET_STD: f64 = 0.5;
const SAMPLER_TOLERANCE: f64 = 0.05;

/// Analytic-score sampler check: 10^4 scalars from N(1, 0.25) must land
/// within 0.05 of the target mean and standard deviation.
pub fn check_sampler(seed: u64) -> CheckResult {
    match sampler_statistics(SAMPLER_TARGET_MEAN, SAMPLER_TARGET_STD, 10_000, 100, seed) {
        Ok(stats) => {
            let mean_err = (stats.mean - SAMPLER_TARGET_MEAN).abs();
            let std_err = (stats.std - SAMPLER_TARGET_STD).abs();
            CheckResult::new(
                "sampler_gaussian_moments",
                mean_err < SAMPLER_TOLERANCE && std_err < SAMPLER_TOLERANCE,
                format!(
                    "mean {:.6} (target {:.1} +/- {:.2}), std {:.6} (target {:.1} +/- {:.2}), n {}",
                    stats.mean,
                    SAMPLER_TARGET_MEAN,
                    SAMPLER_TOLERANCE,
                    stats.std,
                    SAMPLER_TARGET_STD,
                    SAMPLER_TOLERANCE,
                    stats.n
                ),
            )
        }
        Err(e) => CheckResult::new("sampler_gaussian_moments", false, format!("error: {e}")),
    }
}

/// Closed-form noise schedule against Simpson quadrature.
pub fn check_schedule_quadrature() -> CheckResult {
    let schedule = NoiseSchedule::default();
    let mut worst = 0.0f64;
    for &t in &[0.1, 0.25, 0.5, 0.75, 1.0] {
        let closed = schedule.cum_beta(t).unwrap();
        let quad = quadrature_cum_beta(&schedule, t, 1000);
        worst = worst.max((closed - quad).abs());
    }
    CheckResult::new(
        "schedule_vs_quadrature",
        worst < 1e-10,
        format!("max |closed - quadrature| = {worst:.3e} over 5 times"),
    )
}

/// Fast kernel distances against the double-loop oracles on random batches.
pub fn check_mmd_oracles(seed: u64) -> CheckResult {
    use rand::Rng as _;
    let mut rng = subrng(seed, 0x0_2ac1e);
    let sigmas = vec![0.8, 1.6];
    let mut worst = 0.0f64;
    let mut worst_local = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(2..9);
        let m = rng.gen_range(2..9);
        let d = rng.gen_range(1..5);
        let s = Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.5..1.5));
        let t = Array2::from_shape_simple_fn((m, d), || rng.gen_range(-1.5..1.5));
        let fast = match crate::mmd::mmd2(s.view(), t.view(), &KernelConfig::fixed(&sigmas)) {
            Ok(v) => v,
            Err(e) => {
                return CheckResult::new("mmd_vs_naive", false, format!("error: {e}"));
            }
        };
        let slow = naive_mmd2(s.view(), t.view(), &sigmas);
        worst = worst.max((fast - slow).abs());

        let labels_s: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let labels_t: Vec<usize> = (0..m).map(|_| rng.gen_range(0..2)).collect();
        let w_s = SoftLabels::from_hard(&labels_s, 2).unwrap();
        let w_t = SoftLabels::from_hard(&labels_t, 2).unwrap();
        let fast_local = match crate::mmd::lmmd2(
            s.view(),
            t.view(),
            &w_s,
            &w_t,
            &KernelConfig::fixed(&sigmas),
        ) {
            Ok(v) => v,
            Err(e) => {
                return CheckResult::new("mmd_vs_naive", false, format!("error: {e}"));
            }
        };
        let slow_local = naive_lmmd2(
            s.view(),
            t.view(),
            w_s.matrix().view(),
            w_t.matrix().view(),
            &sigmas,
        );
        worst_local = worst_local.max((fast_local - slow_local).abs());
    }
    CheckResult::new(
        "mmd_vs_naive",
        worst < 1e-12 && worst_local < 1e-10,
        format!(
            "max |fast - naive|: global {worst:.3e} (< 1e-12), class-conditional {worst_local:.3e} (< 1e-10) over 20 instances"
        ),
    )
}

/// Degeneracy guards: identical batches give zero, separated batches do not.
pub fn check_mmd_separation(seed: u64) -> CheckResult {
    use rand::Rng as _;
    let mut rng = subrng(seed, 0x5e9a2a7e);
    let s = Array2::from_shape_simple_fn((10, 3), || rng.gen_range(-1.0..1.0));
    let shifted = &s + 2.5;
    let config = KernelConfig::default();
    let zero = match crate::mmd::mmd2(s.view(), s.view(), &config) {
        Ok(v) => v,
        Err(e) => return CheckResult::new("mmd_separation", false, format!("error: {e}")),
    };
    let far = match crate::mmd::mmd2(s.view(), shifted.view(), &config) {
        Ok(v) => v,
        Err(e) => return CheckResult::new("mmd_separation", false, format!("error: {e}")),
    };
    CheckResult::new(
        "mmd_separation",
        zero.abs() < 1e-12 && far > 1e-3,
        format!("mmd2(S,S) = {zero:.3e}, mmd2(S, S+2.5) = {far:.6}"),
    )
}

/// Analytic gradients of the denoising training loss for the score network
/// against central finite differences on a random parameter subsample.
pub fn score_net_grad_report(seed: u64, subsample: f64) -> Result<GradCheckReport> {
    use crate::autodiff::Tape;

    let mut rng = subrng(seed, 0x9c07e);
    let cfg = ScoreNetConfig::default();
    let net = ToyScoreNet::new(cfg, &mut rng);
    let schedule = NoiseSchedule::default();
    let n = 6usize;
    let t = 0.35;
    let x0 = crate::diffusion::standard_normal((n, cfg.n_mel), &mut rng);
    let (x_t, eps) = forward_sample(&x0, t, &schedule, &mut rng)?;
    let lambda = schedule.marginal_params(t)?.variance;
    let target = &eps / lambda;
    let mu = crate::diffusion::standard_normal((n, cfg.n_mel), &mut rng);
    let z_s = crate::diffusion::standard_normal((n, cfg.d_style), &mut rng);

    // mean((score + eps/lambda)^2), the per-step training objective, with
    // every random draw frozen so the loss is a pure function of the
    // parameters.
    let build = |model: &ToyScoreNet| {
        let mut tape = Tape::new();
        let x_id = tape.leaf(x_t.clone());
        let mu_id = tape.leaf(mu.clone());
        let z_id = tape.leaf(z_s.clone());
        let nodes = model.insert_params(&mut tape);
        let score = model.forward_nodes(&mut tape, x_id, mu_id, t, z_id, &nodes);
        let tgt = tape.leaf(target.clone());
        let resid = tape.add(score, tgt);
        let sq = tape.square(resid);
        let loss = tape.mean_all(sq);
        (tape, loss, nodes.params)
    };

    let (tape, loss, param_nodes) = build(&net);
    let grads = tape.backward(loss);
    let analytic = grads_for(&tape, &grads, &param_nodes);
    let params: Vec<Array2<f64>> = net.param_refs().into_iter().cloned().collect();
    let loss_fn = |vals: &[Array2<f64>]| {
        let mut m = net.clone();
        for (dst, src) in m.param_refs_mut().into_iter().zip(vals) {
            dst.assign(src);
        }
        let (t, l, _) = build(&m);
        t.value(l)[[0, 0]]
    };
    grad_check(
        &params,
        &analytic,
        loss_fn,
        subsample,
        GRAD_CHECK_STEP,
        &mut subrng(seed, 0x9c07f),
    )
}

pub fn check_score_gradients(seed: u64) -> CheckResult {
    match score_net_grad_report(seed, 0.05) {
        Ok(report) => CheckResult::new(
            "score_net_gradients",
            report.max_rel_err < 1e-4,
            format!(
                "max rel err {:.3e} (< 1e-4) over {} parameter entries",
                report.max_rel_err, report.n_checked
            ),
        ),
        Err(e) => CheckResult::new("score_net_gradients", false, format!("error: {e}")),
    }
}

fn timeline(parts: &[(f64, f64, usize)]) -> Result<SegmentList> {
    let segments: Vec<Segment> = parts
        .iter()
        .map(|&(start, end, label)| Segment {
            start,
            end,
            label: EmotionId(label),
        })
        .collect();
    let total = parts.last().map(|p| p.1).unwrap_or(0.0);
    SegmentList::new(segments, total)
}

/// Detection error rate on its worked examples: a 1 s boundary shift over a
/// 10 s timeline costs exactly 0.2 (1 s missed + 1 s false alarm), and a
/// mislabeled 4 s segment costs exactly 0.4.
pub fn check_eder_hand_values() -> CheckResult {
    let run = || -> Result<(f64, f64, f64)> {
        let reference = timeline(&[(0.0, 2.0, 0), (2.0, 6.0, 1), (6.0, 10.0, 0)])?;
        let shifted = timeline(&[(0.0, 3.0, 0), (3.0, 7.0, 1), (7.0, 10.0, 0)])?;
        let confused = timeline(&[(0.0, 2.0, 0), (2.0, 6.0, 2), (6.0, 10.0, 0)])?;
        Ok((
            eder(&reference, &reference)?,
            eder(&reference, &shifted)?,
            eder(&reference, &confused)?,
        ))
    };
    match run() {
        Ok((perfect, shifted, confused)) => CheckResult::new(
            "eder_hand_values",
            perfect == 0.0 && (shifted - 0.2).abs() < 1e-12 && (confused - 0.4).abs() < 1e-12,
            format!(
                "identical {perfect:.6}, shifted {shifted:.6} (want 0.200000), mislabeled {confused:.6} (want 0.400000)"
            ),
        ),
        Err(e) => CheckResult::new("eder_hand_values", false, format!("error: {e}")),
    }
}

/// Structural contracts of the aligner: attention rows are probability
/// distributions, and without positional key terms the output is invariant
/// to reordering the (key, value) pairs.
pub fn check_attention_contract(seed: u64) -> CheckResult {
    use rand::seq::SliceRandom as _;
    use rand::Rng as _;

    let run = || -> Result<(f64, f64)> {
        let mut rng = subrng(seed, 0xa77e);
        let d = 16usize;
        let params = AttentionParams::new(d, 2, &mut rng)?;
        let content = ContentSequence::new(Array2::from_shape_simple_fn((5, d), || {
            rng.gen_range(-1.0..1.0)
        }))?;
        let styles = Array2::from_shape_simple_fn((9, d), || rng.gen_range(-1.0..1.0));

        let weights = attention_weights(&content, &styles, &params)?;
        let mut worst_row = 0.0f64;
        for head in &weights {
            for row in head.rows() {
                worst_row = worst_row.max((row.sum() - 1.0).abs());
            }
        }

        let mut order: Vec<usize> = (0..styles.nrows()).collect();
        order.shuffle(&mut rng);
        let permuted = ndarray::stack(
            ndarray::Axis(0),
            &order.iter().map(|&i| styles.row(i)).collect::<Vec<_>>(),
        )
        .map_err(|e| Error::shape(e.to_string()))?;
        let a = cross_attention_align(&content, &styles, &params)?;
        let b = cross_attention_align(&content, &permuted, &params)?;
        let worst_perm = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        Ok((worst_row, worst_perm))
    };
    match run() {
        Ok((worst_row, worst_perm)) => CheckResult::new(
            "attention_contract",
            worst_row < 1e-6 && worst_perm < 1e-10,
            format!(
                "max |row sum - 1| = {worst_row:.3e} (< 1e-6), max permutation deviation = {worst_perm:.3e} (< 1e-10)"
            ),
        ),
        Err(e) => CheckResult::new("attention_contract", false, format!("error: {e}")),
    }
}

/// Gaussian elimination with partial pivoting; adequate for the small
/// normal-equation systems below.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Frame labels of the default corpus must be recoverable by a model-free
/// baseline: one-vs-all ridge regression on raw source frames, fit on half
/// the utterances and scored on the other half. Guards against a corpus too
/// hard (or too degenerate) for the learned pipeline to say anything.
pub fn check_corpus_separability(seed: u64) -> CheckResult {
    let run = || -> Result<f64> {
        let spec = CorpusSpec {
            seed: subseed(seed, 0xc0_55),
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec)?;
        let source: Vec<_> = corpus.source().collect();
        let split = source.len() / 2;
        let dim = spec.n_mel_channels + 1;
        let n_classes = spec.n_classes;

        let rows = |utts: &[&crate::corpus::SyntheticUtterance]| {
            let mut xs: Vec<Vec<f64>> = Vec::new();
            let mut ys: Vec<usize> = Vec::new();
            for u in utts {
                for (i, &label) in u.frame_labels.labels.iter().enumerate() {
                    let mut row: Vec<f64> = u.mel.row(i).to_vec();
                    row.push(1.0);
                    xs.push(row);
                    ys.push(label.0);
                }
            }
            (xs, ys)
        };
        let (train_x, train_y) = rows(&source[..split]);
        let (test_x, test_y) = rows(&source[split..]);

        // Normal equations with a small ridge term, one weight vector per
        // class against a one-hot target.
        let mut gram = vec![vec![0.0; dim]; dim];
        for row in &train_x {
            for i in 0..dim {
                for j in 0..dim {
                    gram[i][j] += row[i] * row[j];
                }
            }
        }
        for (i, row) in gram.iter_mut().enumerate() {
            row[i] += 1e-6;
        }
        let mut weights = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            let mut rhs = vec![0.0; dim];
            for (row, &y) in train_x.iter().zip(&train_y) {
                if y == c {
                    for i in 0..dim {
                        rhs[i] += row[i];
                    }
                }
            }
            let w = solve_linear(gram.clone(), rhs)
                .ok_or_else(|| Error::numeric("separability probe: singular normal equations"))?;
            weights.push(w);
        }

        let correct = test_x
            .iter()
            .zip(&test_y)
            .filter(|(row, &y)| {
                let pred = (0..n_classes)
                    .map(|c| weights[c].iter().zip(*row).map(|(w, x)| w * x).sum::<f64>())
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(c, _)| c)
                    .unwrap();
                pred == y
            })
            .count();
        Ok(correct as f64 / test_y.len() as f64)
    };
    match run() {
        Ok(accuracy) => CheckResult::new(
            "corpus_separability",
            accuracy >= 0.95,
            format!("held-out frame accuracy {accuracy:.4} (>= 0.95) for a linear baseline"),
        ),
        Err(e) => CheckResult::new("corpus_separability", false, format!("error: {e}")),
    }
}

/// The configured domain shift must be visible to the kernel distance:
/// cross-domain frames sit further apart than two halves of the source
/// domain.
pub fn check_domain_shift(seed: u64) -> CheckResult {
    let run = || -> Result<(f64, f64)> {
        let spec = CorpusSpec {
            seed: subseed(seed, 0xc0_56),
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec)?;
        let pool = |utts: Vec<&crate::corpus::SyntheticUtterance>, cap: usize| {
            let mut rows = Vec::new();
            'outer: for u in utts {
                for row in u.mel.rows() {
                    if rows.len() >= cap {
                        break 'outer;
                    }
                    rows.push(row.to_vec());
                }
            }
            let dim = rows[0].len();
            Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j])
        };
        let source: Vec<_> = corpus.source().collect();
        let split = source.len() / 2;
        let cap = 300;
        let s_a = pool(source[..split].to_vec(), cap);
        let s_b = pool(source[split..].to_vec(), cap);
        let t = pool(corpus.target().collect(), cap);
        let config = KernelConfig::default();
        let within = crate::mmd::mmd2(s_a.view(), s_b.view(), &config)?;
        let across = crate::mmd::mmd2(s_a.view(), t.view(), &config)?;
        Ok((within, across))
    };
    match run() {
        Ok((within, across)) => CheckResult::new(
            "domain_shift_visible",
            across > within && across > 1e-3,
            format!("mmd2 within source {within:.6}, source vs target {across:.6}"),
        ),
        Err(e) => CheckResult::new("domain_shift_visible", false, format!("error: {e}")),
    }
}

/// Every check, in a stable order. The CLI prints one line per entry.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check_schedule_quadrature(),
        check_sampler(seed),
        check_score_gradients(seed),
        check_mmd_oracles(seed),
        check_mmd_separation(seed),
        check_eder_hand_values(),
        check_attention_contract(seed),
        check_corpus_separability(seed),
        check_domain_shift(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solver_inverts_a_known_system() {
        // A = [[2, 1], [1, 3]], b = [5, 10] has solution [1, 3].
        let x = solve_linear(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![5.0, 10.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
        assert!(solve_linear(vec![vec![1.0, 1.0], vec![1.0, 1.0]], vec![1.0, 2.0]).is_none());
    }

    #[test]
    fn quadrature_matches_closed_form_tightly() {
        let schedule = NoiseSchedule::default();
        for &t in &[0.25, 0.5, 1.0] {
            let closed = schedule.cum_beta(t).unwrap();
            let quad = quadrature_cum_beta(&schedule, t, 1000);
            assert!((closed - quad).abs() < 1e-10, "t={t}: {closed} vs {quad}");
        }
    }

    #[test]
    fn fast_checks_pass() {
        for check in [
            check_schedule_quadrature(),
            check_score_gradients(0),
            check_mmd_oracles(0),
            check_mmd_separation(0),
            check_eder_hand_values(),
            check_attention_contract(0),
            check_domain_shift(0),
        ] {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }

    #[test]
    fn corpus_is_linearly_separable() {
        let check = check_corpus_separability(0);
        assert!(check.passed, "{}", check.detail);
    }
}

