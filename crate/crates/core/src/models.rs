//! Small trainable networks: an utterance-level emotion encoder, a
//! convolutional frame classifier exposing per-layer activations, and the
//! conditional score network. Every forward pass is built on the tape engine
//! so analytic gradients come from one code path, verified against finite
//! differences by [`grad_check`].

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Desk-scale guard: every toy model must stay under this many parameters.
pub const MAX_TOY_PARAMS: usize = 50_000;

/// Ordered, named access to a model's parameter matrices.
pub trait ParamSet {
    fn param_names(&self) -> Vec<String>;
    fn param_refs(&self) -> Vec<&Array2<f64>>;
    fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn n_params(&self) -> usize {
        self.param_refs().iter().map(|m| m.len()).sum()
    }
}

pub fn uniform_init(shape: (usize, usize), rng: &mut Rng) -> Array2<f64> {
    let bound = 1.0 / (shape.0 as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

/// Row-wise softmax for evaluation outputs.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean cross-entropy between logit rows and target distribution rows.
pub fn cross_entropy_node(tape: &mut Tape, logits: NodeId, targets: NodeId) -> NodeId {
    let lsm = tape.log_softmax(logits);
    let weighted = tape.mul(lsm, targets);
    let per_row = tape.sum_cols(weighted);
    let mean = tape.mean_all(per_row);
    tape.scale(mean, -1.0)
}

// ---------------------------------------------------------------------------
// Utterance-level emotion encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SerConfig {
    pub n_mel: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub d_style: usize,
}

impl Default for SerConfig {
    fn default() -> Self {
        Self {
            n_mel: 16,
            hidden: 32,
            n_classes: 4,
            d_style: 32,
        }
    }
}

/// Per-frame linear map, tanh, mean-pool over frames, then two heads:
/// emotion logits and a fixed-size style embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySer {
    pub cfg: SerConfig,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w_logits: Array2<f64>,
    pub b_logits: Array2<f64>,
    pub w_emb: Array2<f64>,
    pub b_emb: Array2<f64>,
}

/// Tape handles for a [`ToySer`] forward pass.
pub struct SerNodes {
    pub params: Vec<NodeId>,
}

pub struct SerOutputNodes {
    pub logits: NodeId,
    pub embedding: NodeId,
}

impl ToySer {
    pub fn new(cfg: SerConfig, rng: &mut Rng) -> Self {
        Self {
            cfg,
            w1: uniform_init((cfg.n_mel, cfg.hidden), rng),
            b1: Array2::zeros((1, cfg.hidden)),
            w_logits: uniform_init((cfg.hidden, cfg.n_classes), rng),
            b_logits: Array2::zeros((1, cfg.n_classes)),
            w_emb: uniform_init((cfg.hidden, cfg.d_style), rng),
            b_emb: Array2::zeros((1, cfg.d_style)),
        }
    }

    pub fn insert_params(&self, tape: &mut Tape) -> SerNodes {
        SerNodes {
            params: self
                .param_refs()
                .into_iter()
                .map(|m| tape.leaf(m.clone()))
                .collect(),
        }
    }

    pub fn forward_nodes(&self, tape: &mut Tape, mel: NodeId, nodes: &SerNodes) -> SerOutputNodes {
        let [w1, b1, w_logits, b_logits, w_emb, b_emb]: [NodeId; 6] =
            nodes.params.as_slice().try_into().expect("six parameters");
        let pre = tape.linear(mel, w1, b1);
        let h = tape.tanh(pre);
        let pooled = tape.mean_rows(h);
        let logits = tape.linear(pooled, w_logits, b_logits);
        let embedding = tape.linear(pooled, w_emb, b_emb);
        SerOutputNodes { logits, embedding }
    }

    /// Evaluation forward: (logits 1xC, embedding 1xd_style).
    pub fn forward(&self, mel: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if mel.nrows() == 0 {
            return Err(Error::domain("ser: empty input"));
        }
        if mel.ncols() != self.cfg.n_mel {
            return Err(Error::shape(format!(
                "ser: input width {} vs configured {}",
                mel.ncols(),
                self.cfg.n_mel
            )));
        }
        let mut tape = Tape::new();
        let mel_id = tape.leaf(mel.clone());
        let nodes = self.insert_params(&mut tape);
        let out = self.forward_nodes(&mut tape, mel_id, &nodes);
        Ok((
            tape.value(out.logits).clone(),
            tape.value(out.embedding).clone(),
        ))
    }

    /// Softmax class probabilities for one utterance.
    pub fn class_probs(&self, mel: &Array2<f64>) -> Result<Array1<f64>> {
        let (logits, _) = self.forward(mel)?;
        Ok(softmax_rows(&logits).row(0).to_owned())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model("ser", serde_json::to_value(self.cfg).unwrap(), self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("ser")?;
        let cfg: SerConfig = serde_json::from_value(ck.meta.clone())?;
        let mut rng = crate::rng::rng_from_seed(0);
        let mut model = Self::new(cfg, &mut rng);
        ck.load_into(&mut model)?;
        Ok(model)
    }
}

impl ParamSet for ToySer {
    fn param_names(&self) -> Vec<String> {
        ["w1", "b1", "w_logits", "b_logits", "w_emb", "b_emb"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn param_refs(&self) -> Vec<&Array2<f64>> {
        vec![
            &self.w1,
            &self.b1,
            &self.w_logits,
            &self.b_logits,
            &self.w_emb,
            &self.b_emb,
        ]
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w_logits,
            &mut self.b_logits,
            &mut self.w_emb,
            &mut self.b_emb,
        ]
    }
}

// ---------------------------------------------------------------------------
// Frame-level classifier with exposed layer activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SedConfig {
    pub n_mel: usize,
    /// Output channels of each stride-1 conv layer.
    pub conv_channels: Vec<usize>,
    pub kernel_width: usize,
    pub d_style: usize,
    pub n_classes: usize,
}

impl Default for SedConfig {
    fn default() -> Self {
        Self {
            n_mel: 16,
            conv_channels: vec![24, 24],
            kernel_width: 3,
            d_style: 32,
            n_classes: 4,
        }
    }
}

impl SedConfig {
    pub fn n_layers(&self) -> usize {
        self.conv_channels.len()
    }
}

/// Stack of same-length convolutions (edge-clamped padding), a linear
/// bottleneck producing the frame-level style embedding, and a per-frame
/// classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySed {
    pub cfg: SedConfig,
    pub conv_w: Vec<Array2<f64>>,
    pub conv_b: Vec<Array2<f64>>,
    pub w_bottleneck: Array2<f64>,
    pub b_bottleneck: Array2<f64>,
    pub w_cls: Array2<f64>,
    pub b_cls: Array2<f64>,
}

pub struct SedNodes {
    pub params: Vec<NodeId>,
}

pub struct SedOutputNodes {
    pub frame_logits: NodeId,
    pub frame_style: NodeId,
    /// Frame-level activation per layer: L conv entries then the bottleneck,
    /// each (n_frames x layer width).
    pub layer_frames: Vec<NodeId>,
    /// Mean-pooled activation per layer: L conv entries then the bottleneck.
    pub layer_pooled: Vec<NodeId>,
}

/// Per-utterance pooled activations, one row vector per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations(pub Vec<Array1<f64>>);

impl LayerActivations {
    pub fn n_layers(&self) -> usize {
        self.0.len()
    }
}

/// Stack per-utterance pooled activations into one matrix per layer
/// (n_utterances x layer width), the batch shape the adaptation losses take.
pub fn stack_layer_activations(acts: &[LayerActivations]) -> Result<Vec<Array2<f64>>> {
    let first = acts
        .first()
        .ok_or_else(|| Error::domain("stack_layer_activations: empty batch"))?;
    let n_layers = first.n_layers();
    let mut out = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let width = first.0[l].len();
        let mut m = Array2::zeros((acts.len(), width));
        for (i, a) in acts.iter().enumerate() {
            if a.n_layers() != n_layers || a.0[l].len() != width {
                return Err(Error::shape(
                    "stack_layer_activations: inconsistent layer shapes",
                ));
            }
            m.row_mut(i).assign(&a.0[l]);
        }
        out.push(m);
    }
    Ok(out)
}

/// Evaluation outputs of one [`ToySed`] forward pass.
pub struct SedForward {
    pub frame_logits: Array2<f64>,
    pub frame_style: Array2<f64>,
    pub activations: LayerActivations,
}

impl ToySed {
    pub fn new(cfg: SedConfig, rng: &mut Rng) -> Self {
        assert!(
            cfg.kernel_width % 2 == 1,
            "sed: kernel width must be odd for same-length output"
        );
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut c_in = cfg.n_mel;
        for &c_out in &cfg.conv_channels {
            conv_w.push(uniform_init((cfg.kernel_width * c_in, c_out), rng));
            conv_b.push(Array2::zeros((1, c_out)));
            c_in = c_out;
        }
        Self {
            conv_w,
            conv_b,
            w_bottleneck: uniform_init((c_in, cfg.d_style), rng),
            b_bottleneck: Array2::zeros((1, cfg.d_style)),
            w_cls: uniform_init((cfg.d_style, cfg.n_classes), rng),
            b_cls: Array2::zeros((1, cfg.n_classes)),
            cfg,
        }
    }

    pub fn insert_params(&self, tape: &mut Tape) -> SedNodes {
        SedNodes {
            params: self
                .param_refs()
                .into_iter()
                .map(|m| tape.leaf(m.clone()))
                .collect(),
        }
    }

    pub fn forward_nodes(&self, tape: &mut Tape, mel: NodeId, nodes: &SedNodes) -> SedOutputNodes {
        let n_layers = self.cfg.n_layers();
        let mut layer_frames = Vec::with_capacity(n_layers + 1);
        let mut layer_pooled = Vec::with_capacity(n_layers + 1);
        let mut x = mel;
        for l in 0..n_layers {
            let col = tape.im2col_same(x, self.cfg.kernel_width);
            let w = nodes.params[2 * l];
            let b = nodes.params[2 * l + 1];
            let pre = tape.linear(col, w, b);
            x = tape.tanh(pre);
            layer_frames.push(x);
            layer_pooled.push(tape.mean_rows(x));
        }
        let wb = nodes.params[2 * n_layers];
        let bb = nodes.params[2 * n_layers + 1];
        let frame_style = tape.linear(x, wb, bb);
        layer_frames.push(frame_style);
        layer_pooled.push(tape.mean_rows(frame_style));
        let wc = nodes.params[2 * n_layers + 2];
        let bc = nodes.params[2 * n_layers + 3];
        let frame_logits = tape.linear(frame_style, wc, bc);
        SedOutputNodes {
            frame_logits,
            frame_style,
            layer_frames,
            layer_pooled,
        }
    }

    pub fn forward(&self, mel: &Array2<f64>) -> Result<SedForward> {
        if mel.nrows() == 0 {
            return Err(Error::domain("sed: empty input"));
        }
        if mel.ncols() != self.cfg.n_mel {
            return Err(Error::shape(format!(
                "sed: input width {} vs configured {}",
                mel.ncols(),
                self.cfg.n_mel
            )));
        }
        let mut tape = Tape::new();
        let mel_id = tape.leaf(mel.clone());
        let nodes = self.insert_params(&mut tape);
        let out = self.forward_nodes(&mut tape, mel_id, &nodes);
        Ok(SedForward {
            frame_logits: tape.value(out.frame_logits).clone(),
            frame_style: tape.value(out.frame_style).clone(),
            activations: LayerActivations(
                out.layer_pooled
                    .iter()
                    .map(|&id| tape.value(id).row(0).to_owned())
                    .collect(),
            ),
        })
    }

    /// Per-frame class probabilities (frame soft labels).
    pub fn frame_probs(&self, mel: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.forward(mel)?.frame_logits))
    }

    /// Hard frame labels by per-frame argmax.
    pub fn frame_argmax(&self, mel: &Array2<f64>) -> Result<Vec<usize>> {
        let logits = self.forward(mel)?.frame_logits;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model("sed", serde_json::to_value(&self.cfg).unwrap(), self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("sed")?;
        let cfg: SedConfig = serde_json::from_value(ck.meta.clone())?;
        let mut rng = crate::rng::rng_from_seed(0);
        let mut model = Self::new(cfg, &mut rng);
        ck.load_into(&mut model)?;
        Ok(model)
    }
}

impl ParamSet for ToySed {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.cfg.n_layers() {
            names.push(format!("conv{l}.w"));
            names.push(format!("conv{l}.b"));
        }
        names.extend(
            ["bottleneck.w", "bottleneck.b", "cls.w", "cls.b"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    fn param_refs(&self) -> Vec<&Array2<f64>> {
        let mut refs = Vec::new();
        for l in 0..self.cfg.n_layers() {
            refs.push(&self.conv_w[l]);
            refs.push(&self.conv_b[l]);
        }
        refs.push(&self.w_bottleneck);
        refs.push(&self.b_bottleneck);
        refs.push(&self.w_cls);
        refs.push(&self.b_cls);
        refs
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut refs: Vec<&mut Array2<f64>> = Vec::new();
        for (w, b) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            refs.push(w);
            refs.push(b);
        }
        refs.push(&mut self.w_bottleneck);
        refs.push(&mut self.b_bottleneck);
        refs.push(&mut self.w_cls);
        refs.push(&mut self.b_cls);
        refs
    }
}

// ---------------------------------------------------------------------------
// Conditional score network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreNetConfig {
    pub n_mel: usize,
    pub d_style: usize,
    pub d_time: usize,
    pub hidden: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self {
            n_mel: 16,
            d_style: 32,
            d_time: 8,
            hidden: 64,
        }
    }
}

impl ScoreNetConfig {
    pub fn input_width(&self) -> usize {
        2 * self.n_mel + self.d_time + self.d_style
    }
}

/// Sinusoidal features of the diffusion time at geometric frequencies.
pub fn time_embedding(t: f64, d_time: usize) -> Array1<f64> {
    assert!(d_time % 2 == 0, "time embedding width must be even");
    let mut out = Array1::zeros(d_time);
    for i in 0..d_time / 2 {
        let freq = 4f64.powi(i as i32);
        out[2 * i] = (freq * t).sin();
        out[2 * i + 1] = (freq * t).cos();
    }
    out
}

/// Per-frame residual MLP predicting the score from
/// (noisy frame, time embedding, conditional mean frame, style frame).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScoreNet {
    pub cfg: ScoreNetConfig,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
}

pub struct ScoreNetNodes {
    pub params: Vec<NodeId>,
}

impl ToyScoreNet {
    pub fn new(cfg: ScoreNetConfig, rng: &mut Rng) -> Self {
        Self {
            cfg,
            w1: uniform_init((cfg.input_width(), cfg.hidden), rng),
            b1: Array2::zeros((1, cfg.hidden)),
            w2: uniform_init((cfg.hidden, cfg.hidden), rng),
            b2: Array2::zeros((1, cfg.hidden)),
            w_out: uniform_init((cfg.hidden, cfg.n_mel), rng),
            b_out: Array2::zeros((1, cfg.n_mel)),
        }
    }

    pub fn insert_params(&self, tape: &mut Tape) -> ScoreNetNodes {
        ScoreNetNodes {
            params: self
                .param_refs()
                .into_iter()
                .map(|m| tape.leaf(m.clone()))
                .collect(),
        }
    }

    /// Differentiable forward. `x_t`, `mu`, `z_s` are (n_frames x width)
    /// nodes; the time embedding enters as a constant row tiled over frames.
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        x_t: NodeId,
        mu: NodeId,
        t: f64,
        z_s: NodeId,
        nodes: &ScoreNetNodes,
    ) -> NodeId {
        let [w1, b1, w2, b2, w_out, b_out]: [NodeId; 6] =
            nodes.params.as_slice().try_into().expect("six parameters");
        let n = tape.dim(x_t).0;
        let temb_row = time_embedding(t, self.cfg.d_time);
        let mut temb = Array2::zeros((n, self.cfg.d_time));
        for mut row in temb.rows_mut() {
            row.assign(&temb_row);
        }
        let temb_id = tape.leaf(temb);
        let input = tape.concat_cols(&[x_t, temb_id, mu, z_s]);
        let pre1 = tape.linear(input, w1, b1);
        let h1 = tape.tanh(pre1);
        let pre2 = tape.linear(h1, w2, b2);
        let h2_raw = tape.tanh(pre2);
        let h2 = tape.add(h2_raw, h1);
        tape.linear(h2, w_out, b_out)
    }

    /// Evaluation forward with input validation.
    pub fn forward(
        &self,
        x_t: &Array2<f64>,
        mu: &Array2<f64>,
        t: f64,
        z_s: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let n = x_t.nrows();
        if mu.dim() != x_t.dim() {
            return Err(Error::shape(format!(
                "score net: mu shape {:?} vs x_t {:?}",
                mu.dim(),
                x_t.dim()
            )));
        }
        if z_s.nrows() != n || z_s.ncols() != self.cfg.d_style {
            return Err(Error::shape(format!(
                "score net: z_s shape {:?}, expected ({n}, {})",
                z_s.dim(),
                self.cfg.d_style
            )));
        }
        if x_t.ncols() != self.cfg.n_mel {
            return Err(Error::shape(format!(
                "score net: x_t width {} vs configured {}",
                x_t.ncols(),
                self.cfg.n_mel
            )));
        }
        let any_nan = x_t.iter().chain(mu.iter()).chain(z_s.iter()).any(|v| !v.is_finite());
        if any_nan || !t.is_finite() {
            return Err(Error::numeric("score net: non-finite input"));
        }
        let mut tape = Tape::new();
        let x_id = tape.leaf(x_t.clone());
        let mu_id = tape.leaf(mu.clone());
        let z_id = tape.leaf(z_s.clone());
        let nodes = self.insert_params(&mut tape);
        let out = self.forward_nodes(&mut tape, x_id, mu_id, t, z_id, &nodes);
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model("score_net", serde_json::to_value(self.cfg).unwrap(), self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("score_net")?;
        let cfg: ScoreNetConfig = serde_json::from_value(ck.meta.clone())?;
        let mut rng = crate::rng::rng_from_seed(0);
        let mut model = Self::new(cfg, &mut rng);
        ck.load_into(&mut model)?;
        Ok(model)
    }
}

impl ParamSet for ToyScoreNet {
    fn param_names(&self) -> Vec<String> {
        ["w1", "b1", "w2", "b2", "w_out", "b_out"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn param_refs(&self) -> Vec<&Array2<f64>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.w_out, &self.b_out]
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Stochastic gradient descent with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Array2<f64>>,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.9,
            velocity: Vec::new(),
        }
    }

    /// `v <- momentum v + g; p <- p - lr v` per parameter.
    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "sgd: param/grad count mismatch");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
        }
        assert_eq!(
            self.velocity.len(),
            grads.len(),
            "sgd: optimizer reused across models"
        );
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.dim(), g.dim(), "sgd: grad shape mismatch");
            v.zip_mut_with(g, |vv, &gv| *vv = self.momentum * *vv + gv);
            p.zip_mut_with(v, |pv, &vv| *pv -= self.lr * vv);
        }
    }
}

/// Read gradients for a parameter node list, zeros where a parameter did not
/// influence the loss.
pub fn grads_for(tape: &Tape, grads: &Grads, nodes: &[NodeId]) -> Vec<Array2<f64>> {
    nodes
        .iter()
        .map(|&id| grads.get_or_zeros(id, tape.dim(id)))
        .collect()
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_SUBSAMPLE: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
}

/// Compare analytic parameter gradients against central finite differences
/// on a random subsample of entries.
///
/// `loss` must be a deterministic function of the parameter values (any
/// randomness pre-drawn and captured), evaluated at `params` for the
/// analytic pass and at perturbed copies for the differences.
pub fn grad_check<F>(
    params: &[Array2<f64>],
    analytic: &[Array2<f64>],
    loss: F,
    subsample: f64,
    step: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&[Array2<f64>]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let base = loss(params);
    if !base.is_finite() {
        return Err(Error::numeric(format!("grad check: loss {base} not finite")));
    }
    let mut max_rel_err = 0.0f64;
    let mut n_checked = 0usize;
    for (pi, p) in params.iter().enumerate() {
        assert_eq!(p.dim(), analytic[pi].dim());
        for idx in 0..p.len() {
            if rng.gen_range(0.0..1.0) >= subsample {
                continue;
            }
            let (r, c) = (idx / p.ncols(), idx % p.ncols());
            let mut plus = params.to_vec();
            plus[pi][[r, c]] += step;
            let mut minus = params.to_vec();
            minus[pi][[r, c]] -= step;
            let f_plus = loss(&plus);
            let f_minus = loss(&minus);
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::numeric(
                    "grad check: non-finite loss at perturbed point",
                ));
            }
            let fd = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[pi][[r, c]];
            let rel = (fd - a).abs() / (fd.abs() + a.abs()).max(1e-8);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            n_checked += 1;
        }
    }
    if n_checked == 0 {
        return Err(Error::domain(
            "grad check: subsample selected no parameters",
        ));
    }
    Ok(GradCheckReport {
        max_rel_err,
        n_checked,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorData {
    rows: usize,
    cols: usize,
    /// Row-major values.
    data: Vec<f64>,
}

/// On-disk model snapshot: versioned, self-describing, shape-checked on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn from_model<M: ParamSet>(kind: &str, meta: serde_json::Value, model: &M) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, m) in model.param_names().into_iter().zip(model.param_refs()) {
            tensors.insert(
                name,
                TensorData {
                    rows: m.nrows(),
                    cols: m.ncols(),
                    data: m.iter().copied().collect(),
                },
            );
        }
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: kind.to_string(),
            meta,
            tensors,
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint: format version {} unsupported (expected {})",
                self.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        if self.kind != kind {
            return Err(Error::Parse(format!(
                "checkpoint: kind {:?} where {kind:?} expected",
                self.kind
            )));
        }
        Ok(())
    }

    /// Copy stored tensors into a freshly constructed model, validating
    /// names and shapes.
    pub fn load_into<M: ParamSet>(&self, model: &mut M) -> Result<()> {
        let names = model.param_names();
        if self.tensors.len() != names.len() {
            return Err(Error::Parse(format!(
                "checkpoint: {} tensors stored, model has {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for (name, target) in names.iter().zip(model.param_refs_mut()) {
            let tensor = self.tensors.get(name).ok_or_else(|| {
                Error::Parse(format!("checkpoint: missing tensor {name:?}"))
            })?;
            if (tensor.rows, tensor.cols) != target.dim() {
                return Err(Error::Parse(format!(
                    "checkpoint: tensor {name:?} has shape ({}, {}), expected {:?}",
                    tensor.rows,
                    tensor.cols,
                    target.dim()
                )));
            }
            if tensor.data.len() != tensor.rows * tensor.cols {
                return Err(Error::Parse(format!(
                    "checkpoint: tensor {name:?} has {} values for shape ({}, {})",
                    tensor.data.len(),
                    tensor.rows,
                    tensor.cols
                )));
            }
            for (dst, &src) in target.iter_mut().zip(&tensor.data) {
                *dst = src;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingInput(format!("checkpoint {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}
