//! Multi-scale style conditioning: frame-level style is aligned onto the
//! phoneme-rate content sequence with multi-head cross-attention, then summed
//! with utterance-level and speaker embeddings.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Embedding width shared by content, style, and speaker vectors.
pub const DEFAULT_STYLE_WIDTH: usize = 32;
pub const DEFAULT_N_HEADS: usize = 2;

/// Phoneme-rate content representation, one row per phoneme.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentSequence {
    pub z_c: Array2<f64>,
}

impl ContentSequence {
    pub fn new(z_c: Array2<f64>) -> Result<Self> {
        if z_c.nrows() == 0 {
            return Err(Error::domain("content sequence: needs at least one phoneme"));
        }
        if z_c.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("content sequence: non-finite entry"));
        }
        Ok(Self { z_c })
    }

    pub fn n_phonemes(&self) -> usize {
        self.z_c.nrows()
    }

    pub fn width(&self) -> usize {
        self.z_c.ncols()
    }
}

/// Style inputs at the three scales feeding the conditioning stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleBundle {
    pub utterance_emb: Array1<f64>,
    pub frame_emb: Array2<f64>,
    pub speaker_emb: Array1<f64>,
}

impl StyleBundle {
    pub fn new(
        utterance_emb: Array1<f64>,
        frame_emb: Array2<f64>,
        speaker_emb: Array1<f64>,
    ) -> Result<Self> {
        let d = utterance_emb.len();
        if frame_emb.ncols() != d || speaker_emb.len() != d {
            return Err(Error::shape(format!(
                "style bundle: widths differ (utterance {d}, frames {}, speaker {})",
                frame_emb.ncols(),
                speaker_emb.len()
            )));
        }
        if frame_emb.nrows() == 0 {
            return Err(Error::domain("style bundle: no style frames"));
        }
        let finite = utterance_emb.iter().all(|v| v.is_finite())
            && frame_emb.iter().all(|v| v.is_finite())
            && speaker_emb.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::numeric("style bundle: non-finite entry"));
        }
        Ok(Self {
            utterance_emb,
            frame_emb,
            speaker_emb,
        })
    }

    pub fn width(&self) -> usize {
        self.utterance_emb.len()
    }
}

/// Per-head projection matrices for query/key/value plus an output
/// projection back to the model width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub wq: Vec<Array2<f64>>,
    pub wk: Vec<Array2<f64>>,
    pub wv: Vec<Array2<f64>>,
    pub wo: Vec<Array2<f64>>,
    /// Add sinusoidal positions to style frames before the key projection.
    /// Off by default: alignment is driven by content-style similarity alone.
    pub positional_keys: bool,
}

fn uniform_init(shape: (usize, usize), rng: &mut Rng) -> Array2<f64> {
    let bound = 1.0 / (shape.0 as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

impl AttentionParams {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 {
            return Err(Error::domain("attention: need at least one head"));
        }
        if d_model == 0 || d_model % n_heads != 0 {
            return Err(Error::domain(format!(
                "attention: width {d_model} not divisible by {n_heads} heads"
            )));
        }
        let d_head = d_model / n_heads;
        let make = |rows, cols, rng: &mut Rng| uniform_init((rows, cols), rng);
        Ok(Self {
            n_heads,
            wq: (0..n_heads).map(|_| make(d_model, d_head, rng)).collect(),
            wk: (0..n_heads).map(|_| make(d_model, d_head, rng)).collect(),
            wv: (0..n_heads).map(|_| make(d_model, d_head, rng)).collect(),
            wo: (0..n_heads).map(|_| make(d_head, d_model, rng)).collect(),
            positional_keys: false,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq[0].nrows()
    }

    pub fn d_head(&self) -> usize {
        self.wq[0].ncols()
    }

    pub fn n_params(&self) -> usize {
        self.param_refs().iter().map(|m| m.len()).sum()
    }

    pub fn param_refs(&self) -> Vec<&Array2<f64>> {
        self.wq
            .iter()
            .chain(&self.wk)
            .chain(&self.wv)
            .chain(&self.wo)
            .collect()
    }

    pub fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.wq
            .iter_mut()
            .chain(self.wk.iter_mut())
            .chain(self.wv.iter_mut())
            .chain(self.wo.iter_mut())
            .collect()
    }

    fn validate_inputs(&self, content: &ContentSequence, style_frames: &Array2<f64>) -> Result<()> {
        let d = self.d_model();
        if content.width() != d {
            return Err(Error::shape(format!(
                "attention: content width {} vs model width {d}",
                content.width()
            )));
        }
        if style_frames.ncols() != d {
            return Err(Error::shape(format!(
                "attention: style width {} vs model width {d}",
                style_frames.ncols()
            )));
        }
        if style_frames.nrows() == 0 {
            return Err(Error::domain("attention: no style frames"));
        }
        Ok(())
    }
}

/// Sinusoidal position table, one row per frame.
pub fn sinusoidal_positions(n: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, d));
    for pos in 0..n {
        for i in 0..d {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            out[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

fn row_softmax(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Per-head attention weight matrices (n_phonemes x n_frames), rows summing
/// to one.
pub fn attention_weights(
    content: &ContentSequence,
    style_frames: &Array2<f64>,
    params: &AttentionParams,
) -> Result<Vec<Array2<f64>>> {
    params.validate_inputs(content, style_frames)?;
    let scale = 1.0 / (params.d_head() as f64).sqrt();
    let keys_input = if params.positional_keys {
        style_frames + &sinusoidal_positions(style_frames.nrows(), style_frames.ncols())
    } else {
        style_frames.clone()
    };
    let mut out = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let q = content.z_c.dot(&params.wq[h]);
        let k = keys_input.dot(&params.wk[h]);
        let mut logits = q.dot(&k.t());
        logits.mapv_inplace(|v| v * scale);
        row_softmax(&mut logits);
        out.push(logits);
    }
    Ok(out)
}

/// Align frame-level style onto the phoneme grid: multi-head scaled
/// dot-product attention with content as query and style frames as key and
/// value. Output is (n_phonemes x d_model) for any frame count.
pub fn cross_attention_align(
    content: &ContentSequence,
    style_frames: &Array2<f64>,
    params: &AttentionParams,
) -> Result<Array2<f64>> {
    let weights = attention_weights(content, style_frames, params)?;
    let mut out = Array2::zeros((content.n_phonemes(), params.d_model()));
    for h in 0..params.n_heads {
        let v = style_frames.dot(&params.wv[h]);
        let ctx = weights[h].dot(&v);
        out += &ctx.dot(&params.wo[h]);
    }
    Ok(out)
}

/// Tape handles for one attention block's parameters.
#[derive(Debug, Clone)]
pub struct AttentionNodes {
    pub wq: Vec<NodeId>,
    pub wk: Vec<NodeId>,
    pub wv: Vec<NodeId>,
    pub wo: Vec<NodeId>,
}

impl AttentionNodes {
    pub fn insert(tape: &mut Tape, params: &AttentionParams) -> Self {
        Self {
            wq: params.wq.iter().map(|m| tape.leaf(m.clone())).collect(),
            wk: params.wk.iter().map(|m| tape.leaf(m.clone())).collect(),
            wv: params.wv.iter().map(|m| tape.leaf(m.clone())).collect(),
            wo: params.wo.iter().map(|m| tape.leaf(m.clone())).collect(),
        }
    }

    pub fn all(&self) -> Vec<NodeId> {
        self.wq
            .iter()
            .chain(&self.wk)
            .chain(&self.wv)
            .chain(&self.wo)
            .copied()
            .collect()
    }
}

/// Differentiable cross-attention with the same semantics as
/// [`cross_attention_align`]. `content` and `style` are tape nodes; the
/// positional flag is taken from `params`.
pub fn cross_attention_node(
    tape: &mut Tape,
    content: NodeId,
    style: NodeId,
    nodes: &AttentionNodes,
    params: &AttentionParams,
) -> NodeId {
    let scale = 1.0 / (params.d_head() as f64).sqrt();
    let keys_input = if params.positional_keys {
        let (n, d) = tape.dim(style);
        let pe = tape.leaf(sinusoidal_positions(n, d));
        tape.add(style, pe)
    } else {
        style
    };
    let mut out: Option<NodeId> = None;
    for h in 0..params.n_heads {
        let q = tape.matmul(content, nodes.wq[h]);
        let k = tape.matmul(keys_input, nodes.wk[h]);
        let kt = tape.transpose(k);
        let logits_raw = tape.matmul(q, kt);
        let logits = tape.scale(logits_raw, scale);
        let weights = tape.softmax(logits);
        let v = tape.matmul(style, nodes.wv[h]);
        let ctx = tape.matmul(weights, v);
        let head_out = tape.matmul(ctx, nodes.wo[h]);
        out = Some(match out {
            Some(prev) => tape.add(prev, head_out),
            None => head_out,
        });
    }
    out.expect("attention params have at least one head")
}

/// Multi-scale combination: aligned frame-level style plus utterance and
/// speaker embeddings broadcast over phonemes.
pub fn combine_multi_scale(aligned: &Array2<f64>, bundle: &StyleBundle) -> Result<Array2<f64>> {
    if aligned.ncols() != bundle.width() {
        return Err(Error::shape(format!(
            "combine: aligned width {} vs bundle width {}",
            aligned.ncols(),
            bundle.width()
        )));
    }
    let shift = &bundle.utterance_emb + &bundle.speaker_emb;
    Ok(aligned + &shift.view().insert_axis(Axis(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use rand::seq::SliceRandom as _;

    fn random(shape: (usize, usize), rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    fn setup(d: usize, heads: usize, seed: u64) -> (AttentionParams, Rng) {
        let mut rng = rng_from_seed(seed);
        let params = AttentionParams::new(d, heads, &mut rng).unwrap();
        (params, rng)
    }

    #[test]
    fn width_must_divide_heads() {
        let mut rng = rng_from_seed(0);
        assert!(AttentionParams::new(10, 3, &mut rng).is_err());
        assert!(AttentionParams::new(8, 0, &mut rng).is_err());
        assert!(AttentionParams::new(8, 2, &mut rng).is_ok());
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let (params, mut rng) = setup(8, 2, 41);
        let content = ContentSequence::new(random((5, 8), &mut rng)).unwrap();
        let style = random((9, 8), &mut rng);
        let weights = attention_weights(&content, &style, &params).unwrap();
        assert_eq!(weights.len(), 2);
        for w in &weights {
            assert_eq!(w.dim(), (5, 9));
            for row in w.rows() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn single_frame_output_is_projected_value() {
        let (params, mut rng) = setup(8, 2, 42);
        let content = ContentSequence::new(random((4, 8), &mut rng)).unwrap();
        let style = random((1, 8), &mut rng);
        let out = cross_attention_align(&content, &style, &params).unwrap();
        let mut expected = Array2::zeros((1, 8));
        for h in 0..params.n_heads {
            expected += &style.dot(&params.wv[h]).dot(&params.wo[h]);
        }
        for i in 0..content.n_phonemes() {
            for j in 0..8 {
                assert_abs_diff_eq!(out[[i, j]], expected[[0, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_average_distinct_values() {
        // With one head and an identity value/output path, equal keys mean
        // uniform weights, so the output is the plain average of the values.
        let mut rng = rng_from_seed(43);
        let d = 4;
        let mut params = AttentionParams::new(d, 1, &mut rng).unwrap();
        params.wv[0] = Array2::eye(d);
        params.wo[0] = Array2::eye(d);
        // Make all style rows project to the same key by zeroing the key map.
        params.wk[0] = Array2::zeros((d, d));
        let content = ContentSequence::new(random((3, d), &mut rng)).unwrap();
        let style = random((6, d), &mut rng);
        let out = cross_attention_align(&content, &style, &params).unwrap();
        let mean = style.mean_axis(Axis(0)).unwrap();
        for i in 0..3 {
            for j in 0..d {
                assert_abs_diff_eq!(out[[i, j]], mean[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn permuting_style_frames_leaves_output_unchanged() {
        let (params, mut rng) = setup(8, 2, 44);
        let content = ContentSequence::new(random((4, 8), &mut rng)).unwrap();
        let style = random((7, 8), &mut rng);
        let base = cross_attention_align(&content, &style, &params).unwrap();

        let mut order: Vec<usize> = (0..7).collect();
        order.shuffle(&mut rng);
        let mut permuted = Array2::zeros(style.dim());
        for (dst, &src) in order.iter().enumerate() {
            permuted.row_mut(dst).assign(&style.row(src));
        }
        let shuffled = cross_attention_align(&content, &permuted, &params).unwrap();
        for (a, b) in base.iter().zip(shuffled.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn positional_keys_break_permutation_invariance() {
        let mut rng = rng_from_seed(45);
        let mut params = AttentionParams::new(8, 2, &mut rng).unwrap();
        params.positional_keys = true;
        let content = ContentSequence::new(random((4, 8), &mut rng)).unwrap();
        let style = random((6, 8), &mut rng);
        let base = cross_attention_align(&content, &style, &params).unwrap();
        let mut reversed = Array2::zeros(style.dim());
        for i in 0..6 {
            reversed.row_mut(i).assign(&style.row(5 - i));
        }
        let flipped = cross_attention_align(&content, &reversed, &params).unwrap();
        let diff: f64 = base
            .iter()
            .zip(flipped.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "positional keys should be order-sensitive");
    }

    #[test]
    fn output_shape_independent_of_frame_count() {
        let (params, mut rng) = setup(8, 2, 46);
        let content = ContentSequence::new(random((5, 8), &mut rng)).unwrap();
        for n_frames in [1, 3, 17] {
            let style = random((n_frames, 8), &mut rng);
            let out = cross_attention_align(&content, &style, &params).unwrap();
            assert_eq!(out.dim(), (5, 8));
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let (params, mut rng) = setup(8, 2, 47);
        let content = ContentSequence::new(random((3, 8), &mut rng)).unwrap();
        let bad_style = random((4, 6), &mut rng);
        assert!(cross_attention_align(&content, &bad_style, &params).is_err());
        let bad_content = ContentSequence::new(random((3, 6), &mut rng)).unwrap();
        let style = random((4, 8), &mut rng);
        assert!(cross_attention_align(&bad_content, &style, &params).is_err());
    }

    #[test]
    fn tape_route_matches_eval_route() {
        let (params, mut rng) = setup(8, 2, 48);
        let content = ContentSequence::new(random((4, 8), &mut rng)).unwrap();
        let style = random((6, 8), &mut rng);
        let eval = cross_attention_align(&content, &style, &params).unwrap();

        let mut tape = Tape::new();
        let cid = tape.leaf(content.z_c.clone());
        let sid = tape.leaf(style.clone());
        let nodes = AttentionNodes::insert(&mut tape, &params);
        let out = cross_attention_node(&mut tape, cid, sid, &nodes, &params);
        for (a, b) in tape.value(out).iter().zip(eval.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let (params, mut rng) = setup(4, 2, 49);
        let content = ContentSequence::new(random((3, 4), &mut rng)).unwrap();
        let style = random((5, 4), &mut rng);
        let target = random((3, 4), &mut rng);

        let loss_value = |p: &AttentionParams| -> f64 {
            let out = cross_attention_align(&content, &style, p).unwrap();
            let diff = &out - &target;
            diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64
        };

        let mut tape = Tape::new();
        let cid = tape.leaf(content.z_c.clone());
        let sid = tape.leaf(style.clone());
        let nodes = AttentionNodes::insert(&mut tape, &params);
        let out = cross_attention_node(&mut tape, cid, sid, &nodes, &params);
        let tgt = tape.leaf(target.clone());
        let diff = tape.sub(out, tgt);
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);

        let step = 1e-5;
        let node_ids = nodes.all();
        let matrices: Vec<(usize, usize, usize)> = {
            let refs = params.param_refs();
            refs.iter()
                .enumerate()
                .map(|(i, m)| (i, m.nrows(), m.ncols()))
                .collect()
        };
        for (mi, rows, cols) in matrices {
            let g = grads.get(node_ids[mi]).unwrap().clone();
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = params.clone();
                    plus.param_refs_mut()[mi][[r, c]] += step;
                    let mut minus = params.clone();
                    minus.param_refs_mut()[mi][[r, c]] -= step;
                    let fd = (loss_value(&plus) - loss_value(&minus)) / (2.0 * step);
                    let denom = (fd.abs() + g[[r, c]].abs()).max(1e-7);
                    assert!(
                        (fd - g[[r, c]]).abs() / denom < 1e-4,
                        "matrix {mi} entry ({r},{c}): analytic {} vs fd {fd}",
                        g[[r, c]]
                    );
                }
            }
        }
    }

    #[test]
    fn combine_adds_broadcast_embeddings() {
        let mut rng = rng_from_seed(50);
        let aligned = random((4, 6), &mut rng);
        let utterance = Array1::from_shape_simple_fn(6, || rng.gen_range(-1.0..1.0));
        let speaker = Array1::from_shape_simple_fn(6, || rng.gen_range(-1.0..1.0));
        let frames = random((3, 6), &mut rng);
        let bundle = StyleBundle::new(utterance.clone(), frames, speaker.clone()).unwrap();
        let z = combine_multi_scale(&aligned, &bundle).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                assert_abs_diff_eq!(
                    z[[i, j]],
                    aligned[[i, j]] + utterance[j] + speaker[j],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn combine_zero_embeddings_is_identity() {
        let mut rng = rng_from_seed(51);
        let aligned = random((3, 5), &mut rng);
        let bundle = StyleBundle::new(
            Array1::zeros(5),
            random((2, 5), &mut rng),
            Array1::zeros(5),
        )
        .unwrap();
        let z = combine_multi_scale(&aligned, &bundle).unwrap();
        assert_eq!(z, aligned);
    }

    #[test]
    fn combine_zero_aligned_broadcasts_sums() {
        let mut rng = rng_from_seed(52);
        let utterance = Array1::from_shape_simple_fn(4, || rng.gen_range(-1.0..1.0));
        let speaker = Array1::from_shape_simple_fn(4, || rng.gen_range(-1.0..1.0));
        let bundle =
            StyleBundle::new(utterance.clone(), random((2, 4), &mut rng), speaker.clone())
                .unwrap();
        let z = combine_multi_scale(&Array2::zeros((3, 4)), &bundle).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_abs_diff_eq!(z[[i, j]], utterance[j] + speaker[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn combine_is_additive_in_utterance_embedding() {
        let mut rng = rng_from_seed(53);
        let aligned = random((3, 4), &mut rng);
        let frames = random((2, 4), &mut rng);
        let u1 = Array1::from_shape_simple_fn(4, || rng.gen_range(-1.0..1.0));
        let u2 = Array1::from_shape_simple_fn(4, || rng.gen_range(-1.0..1.0));
        let zero = Array1::zeros(4);
        let sum_bundle =
            StyleBundle::new(&u1 + &u2, frames.clone(), zero.clone()).unwrap();
        let once = combine_multi_scale(&aligned, &sum_bundle).unwrap();
        let b1 = StyleBundle::new(u1, frames.clone(), zero.clone()).unwrap();
        let b2 = StyleBundle::new(u2, frames, zero).unwrap();
        let twice =
            combine_multi_scale(&combine_multi_scale(&aligned, &b1).unwrap(), &b2).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn bundle_width_mismatch_rejected() {
        let frames = Array2::zeros((2, 4));
        assert!(StyleBundle::new(Array1::zeros(4), frames.clone(), Array1::zeros(3)).is_err());
        assert!(StyleBundle::new(Array1::zeros(3), frames, Array1::zeros(3)).is_err());
    }
}
