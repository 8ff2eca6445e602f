//! Network parameters, forward pass, and explicit reverse-mode
//! gradients.
//!
//! Parameters live in one flat `Vec<f64>` with a layout map giving each
//! tensor's offset. The optimizer, the finite-difference oracle, and the
//! checkpoint format all operate on the flat vector; the forward and
//! backward passes slice tensors out of it by layout.
//!
//! Activations use channel-major `[channel][time]` buffers so the inner
//! convolution loops run over contiguous slices in both directions.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::data::{extract_window, InputWindow, Sequence, TargetWindowEstimate, WalkingMode};
use crate::error::{Error, Result};
use crate::tcn::{receptive_field, TcnConfig};

/// Offsets of every parameter tensor inside the flat parameter vector.
/// The order is fixed (it is also the checkpoint serialization order):
/// per block, each conv's weights then bias, then the projection weights
/// and bias when the block changes channel count; finally the head.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub conv_w: Vec<Vec<usize>>,
    pub conv_b: Vec<Vec<usize>>,
    pub proj_w: Vec<Option<usize>>,
    pub proj_b: Vec<Option<usize>>,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

/// Input channel count of block `b`.
fn block_in(config: &TcnConfig, b: usize) -> usize {
    if b == 0 {
        config.input_channels
    } else {
        config.channels[b - 1]
    }
}

/// Input channel count of conv `j` inside block `b`.
fn conv_in(config: &TcnConfig, b: usize, j: usize) -> usize {
    if j == 0 {
        block_in(config, b)
    } else {
        config.channels[b]
    }
}

impl Layout {
    pub fn new(config: &TcnConfig) -> Layout {
        let mut off = 0;
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut proj_w = Vec::new();
        let mut proj_b = Vec::new();
        for b in 0..config.n_blocks {
            let c_out = config.channels[b];
            let mut ws = Vec::new();
            let mut bs = Vec::new();
            for j in 0..config.convs_per_block {
                ws.push(off);
                off += c_out * conv_in(config, b, j) * config.kernel_size;
                bs.push(off);
                off += c_out;
            }
            conv_w.push(ws);
            conv_b.push(bs);
            if block_in(config, b) != c_out {
                proj_w.push(Some(off));
                off += c_out * block_in(config, b);
                proj_b.push(Some(off));
                off += c_out;
            } else {
                proj_w.push(None);
                proj_b.push(None);
            }
        }
        let head_w = off;
        let c_last = *config.channels.last().expect("validated non-empty");
        off += config.target_rows() * 3 * c_last;
        let head_b = off;
        off += config.target_rows() * 3;
        Layout {
            conv_w,
            conv_b,
            proj_w,
            proj_b,
            head_w,
            head_b,
            total: off,
        }
    }
}

/// The trained classifier: configuration, per-channel normalization
/// statistics (stored with the model so they travel in checkpoints), and
/// the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnModel {
    config: TcnConfig,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    params: Vec<f64>,
    layout: Layout,
}

// Layout is derived from config, so equality on config covers it.
impl PartialEq for Layout {
    fn eq(&self, _: &Layout) -> bool {
        true
    }
}

impl TcnModel {
    /// Fresh model with He-initialized weights, zero biases, and
    /// identity normalization. Deterministic in `seed`.
    pub fn init(config: &TcnConfig, seed: u64) -> Result<TcnModel> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for b in 0..config.n_blocks {
            let c_out = config.channels[b];
            for j in 0..config.convs_per_block {
                let fan_in = conv_in(config, b, j) * config.kernel_size;
                fill_he(&mut rng, &mut params[layout.conv_w[b][j]..], c_out * fan_in, fan_in);
            }
            if let Some(off) = layout.proj_w[b] {
                let fan_in = block_in(config, b);
                fill_he(&mut rng, &mut params[off..], c_out * fan_in, fan_in);
            }
        }
        let c_last = *config.channels.last().expect("non-empty");
        fill_he(
            &mut rng,
            &mut params[layout.head_w..],
            config.target_rows() * 3 * c_last,
            c_last,
        );
        Ok(TcnModel {
            norm_mean: vec![0.0; config.input_channels],
            norm_std: vec![1.0; config.input_channels],
            params,
            layout,
            config: config.clone(),
        })
    }

    pub(crate) fn from_parts(
        config: TcnConfig,
        norm_mean: Vec<f64>,
        norm_std: Vec<f64>,
        params: Vec<f64>,
    ) -> Result<TcnModel> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::ModelFile(format!(
                "parameter vector length {} does not match config ({} expected)",
                params.len(),
                layout.total
            )));
        }
        if norm_mean.len() != config.input_channels || norm_std.len() != config.input_channels {
            return Err(Error::ModelFile("normalization statistics have wrong length".into()));
        }
        if params.iter().chain(&norm_mean).chain(&norm_std).any(|v| !v.is_finite()) {
            return Err(Error::ModelFile("non-finite value in model file".into()));
        }
        Ok(TcnModel {
            config,
            norm_mean,
            norm_std,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &TcnConfig {
        &self.config
    }

    /// Per-channel (mean, std) applied to inputs before the network.
    pub fn normalization(&self) -> (&[f64], &[f64]) {
        (&self.norm_mean, &self.norm_std)
    }

    pub(crate) fn set_normalization(&mut self, mean: Vec<f64>, std: Vec<f64>) {
        debug_assert_eq!(mean.len(), self.config.input_channels);
        debug_assert_eq!(std.len(), self.config.input_channels);
        self.norm_mean = mean;
        self.norm_std = std;
    }

    pub(crate) fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    #[cfg(test)]
    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// First valid anchor index: predictions need this many past samples.
    pub fn warm_up(&self) -> usize {
        self.config.warm_up()
    }

    /// Normalizes a whole sequence into a channel-major buffer.
    pub(crate) fn normalize_sequence(&self, seq: &Sequence) -> Vec<f64> {
        let t_len = seq.len();
        let mut out = vec![0.0; self.config.input_channels * t_len];
        for c in 0..self.config.input_channels {
            let inv = 1.0 / self.norm_std[c];
            let mean = self.norm_mean[c];
            let row = &mut out[c * t_len..(c + 1) * t_len];
            for (t, v) in row.iter_mut().enumerate() {
                *v = (seq.frame(t).channel(c) - mean) * inv;
            }
        }
        out
    }

    fn normalize_window(&self, x: &InputWindow) -> Vec<f64> {
        let t_len = x.len();
        let m = x.matrix();
        let mut out = vec![0.0; self.config.input_channels * t_len];
        for c in 0..self.config.input_channels {
            let inv = 1.0 / self.norm_std[c];
            for t in 0..t_len {
                out[c * t_len + t] = (m[[c, t]] - self.norm_mean[c]) * inv;
            }
        }
        out
    }

    /// Runs the conv stack over a normalized span, recording every
    /// intermediate needed for the backward pass.
    pub(crate) fn forward_span(
        &self,
        input: Vec<f64>,
        t_len: usize,
        mut dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> SpanRecord {
        let cfg = &self.config;
        let nb = cfg.n_blocks;
        let nj = cfg.convs_per_block;
        let mut rec = SpanRecord {
            t_len,
            block_inputs: Vec::with_capacity(nb),
            conv_pre: vec![Vec::with_capacity(nj); nb],
            drop_mask: vec![Vec::new(); nb],
            block_sum: Vec::with_capacity(nb),
            output: Vec::new(),
        };
        let mut x = input;
        for b in 0..nb {
            let c_out = cfg.channels[b];
            let dil = cfg.dilations[b];
            let mut h = x.clone();
            let mut h_channels = block_in(cfg, b);
            for j in 0..nj {
                let c_in = conv_in(cfg, b, j);
                debug_assert_eq!(c_in, h_channels);
                let mut a = vec![0.0; c_out * t_len];
                conv_forward(
                    &self.params[self.layout.conv_w[b][j]..],
                    &self.params[self.layout.conv_b[b][j]..],
                    c_in,
                    c_out,
                    cfg.kernel_size,
                    dil,
                    &h,
                    t_len,
                    &mut a,
                );
                if j < nj - 1 {
                    h = a.iter().map(|&v| v.max(0.0)).collect();
                    if cfg.dropout > 0.0 {
                        if let Some(rng) = dropout_rng.as_deref_mut() {
                            let keep = 1.0 - cfg.dropout;
                            let mask: Vec<f64> = (0..h.len())
                                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                                .collect();
                            for (hv, &mv) in h.iter_mut().zip(&mask) {
                                *hv *= mv;
                            }
                            rec.drop_mask[b].push(mask);
                        }
                    }
                    rec.conv_pre[b].push(a);
                    h_channels = c_out;
                } else {
                    // last conv: its pre-activation becomes the residual sum
                    let mut s = a;
                    match self.layout.proj_w[b] {
                        Some(off) => conv_accumulate(
                            &self.params[off..],
                            &self.params[self.layout.proj_b[b].expect("paired")..],
                            block_in(cfg, b),
                            c_out,
                            1,
                            1,
                            &x,
                            t_len,
                            &mut s,
                        ),
                        None => {
                            for (sv, &xv) in s.iter_mut().zip(&x) {
                                *sv += xv;
                            }
                        }
                    }
                    rec.block_sum.push(s);
                }
            }
            rec.block_inputs.push(x);
            x = rec.block_sum[b].iter().map(|&v| v.max(0.0)).collect();
        }
        rec.output = x;
        rec
    }

    /// Class logits of the target head at one span position.
    pub(crate) fn head_logits(&self, span_out: &[f64], t_len: usize, pos: usize, out: &mut [f64]) {
        let c_last = *self.config.channels.last().expect("non-empty");
        let rows3 = self.config.target_rows() * 3;
        debug_assert_eq!(out.len(), rows3);
        let mut col = vec![0.0; c_last];
        for (c, v) in col.iter_mut().enumerate() {
            *v = span_out[c * t_len + pos];
        }
        let w = &self.params[self.layout.head_w..self.layout.head_w + rows3 * c_last];
        let bias = &self.params[self.layout.head_b..self.layout.head_b + rows3];
        for j in 0..rows3 {
            let wrow = &w[j * c_last..(j + 1) * c_last];
            out[j] = bias[j] + dot(wrow, &col);
        }
    }

    /// Head backward at one position: accumulates parameter gradients and
    /// scatters the hidden-state gradient into `d_out`.
    pub(crate) fn head_backward(
        &self,
        span_out: &[f64],
        t_len: usize,
        pos: usize,
        d_logits: &[f64],
        grad: &mut [f64],
        d_out: &mut [f64],
    ) {
        let c_last = *self.config.channels.last().expect("non-empty");
        let rows3 = self.config.target_rows() * 3;
        let w = self.layout.head_w;
        for j in 0..rows3 {
            let g = d_logits[j];
            if g == 0.0 {
                continue;
            }
            grad[self.layout.head_b + j] += g;
            let wrow = &self.params[w + j * c_last..w + (j + 1) * c_last];
            let grow = &mut grad[w + j * c_last..w + (j + 1) * c_last];
            for c in 0..c_last {
                grow[c] += g * span_out[c * t_len + pos];
                d_out[c * t_len + pos] += g * wrow[c];
            }
        }
    }

    /// Backpropagates `d_out` (gradient w.r.t. the final block output)
    /// through the conv stack, accumulating parameter gradients.
    pub(crate) fn backward_span(&self, rec: &SpanRecord, d_out: Vec<f64>, grad: &mut [f64]) {
        let cfg = &self.config;
        let t_len = rec.t_len;
        let nj = cfg.convs_per_block;
        let mut d_up = d_out;
        for b in (0..cfg.n_blocks).rev() {
            let c_out = cfg.channels[b];
            let dil = cfg.dilations[b];
            let x = &rec.block_inputs[b];
            // through the block's final ReLU
            let mut ds = d_up;
            for (dv, &sv) in ds.iter_mut().zip(&rec.block_sum[b]) {
                if sv <= 0.0 {
                    *dv = 0.0;
                }
            }
            let mut dx = vec![0.0; block_in(cfg, b) * t_len];
            // residual branch
            match self.layout.proj_w[b] {
                Some(woff) => {
                    let boff = self.layout.proj_b[b].expect("paired");
                    conv_backward_params(x, &ds, block_in(cfg, b), c_out, 1, 1, t_len, grad, woff, boff);
                    conv_backward_input(
                        &self.params[woff..],
                        block_in(cfg, b),
                        c_out,
                        1,
                        1,
                        &ds,
                        t_len,
                        &mut dx,
                    );
                }
                None => {
                    for (dv, &gv) in dx.iter_mut().zip(&ds) {
                        *dv += gv;
                    }
                }
            }
            // conv chain, last to first
            let mut d = ds;
            for j in (0..nj).rev() {
                let c_in = conv_in(cfg, b, j);
                let input_j: Vec<f64> = if j == 0 {
                    x.clone()
                } else {
                    self.conv_chain_input(rec, b, j - 1)
                };
                conv_backward_params(
                    &input_j,
                    &d,
                    c_in,
                    c_out,
                    cfg.kernel_size,
                    dil,
                    t_len,
                    grad,
                    self.layout.conv_w[b][j],
                    self.layout.conv_b[b][j],
                );
                let mut d_in = vec![0.0; c_in * t_len];
                conv_backward_input(
                    &self.params[self.layout.conv_w[b][j]..],
                    c_in,
                    c_out,
                    cfg.kernel_size,
                    dil,
                    &d,
                    t_len,
                    &mut d_in,
                );
                if j == 0 {
                    for (dv, &gv) in dx.iter_mut().zip(&d_in) {
                        *dv += gv;
                    }
                } else {
                    // through dropout and the inner ReLU
                    let pre = &rec.conv_pre[b][j - 1];
                    if let Some(mask) = rec.drop_mask[b].get(j - 1) {
                        for ((dv, &mv), &av) in d_in.iter_mut().zip(mask).zip(pre) {
                            *dv *= mv * if av > 0.0 { 1.0 } else { 0.0 };
                        }
                    } else {
                        for (dv, &av) in d_in.iter_mut().zip(pre) {
                            if av <= 0.0 {
                                *dv = 0.0;
                            }
                        }
                    }
                    d = d_in;
                }
            }
            d_up = dx;
        }
    }

    /// Recomputes the input to conv `j+1` of block `b`: ReLU (and
    /// dropout mask, when recorded) applied to conv `j`'s pre-activation.
    fn conv_chain_input(&self, rec: &SpanRecord, b: usize, j: usize) -> Vec<f64> {
        let pre = &rec.conv_pre[b][j];
        let mut h: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        if let Some(mask) = rec.drop_mask[b].get(j) {
            for (hv, &mv) in h.iter_mut().zip(mask) {
                *hv *= mv;
            }
        }
        h
    }
}

/// Intermediates of one span forward pass, kept for backprop.
pub(crate) struct SpanRecord {
    pub t_len: usize,
    /// Input of each block (the first is the normalized network input).
    pub block_inputs: Vec<Vec<f64>>,
    /// Pre-activations of every inner conv (all but each block's last).
    pub conv_pre: Vec<Vec<Vec<f64>>>,
    /// Inverted-dropout scale factors per inner conv, when training with
    /// dropout; empty otherwise.
    pub drop_mask: Vec<Vec<Vec<f64>>>,
    /// Residual sum of each block before its final ReLU.
    pub block_sum: Vec<Vec<f64>>,
    /// Final block output after ReLU.
    pub output: Vec<f64>,
}

fn fill_he(rng: &mut ChaCha12Rng, dst: &mut [f64], count: usize, fan_in: usize) {
    let std = (2.0 / fan_in as f64).sqrt();
    for v in dst[..count].iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * std;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Causal convolution over a span: `out[co][t] = b[co] + sum w*x` with
/// zero left-padding. Kernel tap `k = kernel-1` is the current sample;
/// tap `k` looks back `(kernel-1-k)*dilation` steps.
#[allow(clippy::too_many_arguments)]
fn conv_forward(
    w: &[f64],
    bias: &[f64],
    c_in: usize,
    c_out: usize,
    kernel: usize,
    dilation: usize,
    x: &[f64],
    t_len: usize,
    out: &mut [f64],
) {
    for co in 0..c_out {
        out[co * t_len..(co + 1) * t_len].fill(bias[co]);
    }
    accumulate_conv(w, c_in, c_out, kernel, dilation, x, t_len, out);
}

/// Like `conv_forward` but adds onto an existing buffer (used for the
/// residual projection).
#[allow(clippy::too_many_arguments)]
fn conv_accumulate(
    w: &[f64],
    bias: &[f64],
    c_in: usize,
    c_out: usize,
    kernel: usize,
    dilation: usize,
    x: &[f64],
    t_len: usize,
    out: &mut [f64],
) {
    for co in 0..c_out {
        let row = &mut out[co * t_len..(co + 1) * t_len];
        let bv = bias[co];
        for v in row.iter_mut() {
            *v += bv;
        }
    }
    accumulate_conv(w, c_in, c_out, kernel, dilation, x, t_len, out);
}

#[allow(clippy::too_many_arguments)]
fn accumulate_conv(
    w: &[f64],
    c_in: usize,
    c_out: usize,
    kernel: usize,
    dilation: usize,
    x: &[f64],
    t_len: usize,
    out: &mut [f64],
) {
    for co in 0..c_out {
        let row = &mut out[co * t_len..(co + 1) * t_len];
        for ci in 0..c_in {
            let xrow = &x[ci * t_len..(ci + 1) * t_len];
            for k in 0..kernel {
                let off = (kernel - 1 - k) * dilation;
                if off >= t_len {
                    continue;
                }
                let wv = w[(co * c_in + ci) * kernel + k];
                for (y, &xv) in row[off..].iter_mut().zip(&xrow[..t_len - off]) {
                    *y += wv * xv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_params(
    x: &[f64],
    dy: &[f64],
    c_in: usize,
    c_out: usize,
    kernel: usize,
    dilation: usize,
    t_len: usize,
    grad: &mut [f64],
    woff: usize,
    boff: usize,
) {
    let (dw, db) = (woff, boff);
    for co in 0..c_out {
        let dyrow = &dy[co * t_len..(co + 1) * t_len];
        grad[db + co] += dyrow.iter().sum::<f64>();
        for ci in 0..c_in {
            let xrow = &x[ci * t_len..(ci + 1) * t_len];
            for k in 0..kernel {
                let off = (kernel - 1 - k) * dilation;
                if off >= t_len {
                    continue;
                }
                grad[dw + (co * c_in + ci) * kernel + k] += dot(&dyrow[off..], &xrow[..t_len - off]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_input(
    w: &[f64],
    c_in: usize,
    c_out: usize,
    kernel: usize,
    dilation: usize,
    dy: &[f64],
    t_len: usize,
    dx: &mut [f64],
) {
    for co in 0..c_out {
        let dyrow = &dy[co * t_len..(co + 1) * t_len];
        for ci in 0..c_in {
            let dxrow = &mut dx[ci * t_len..(ci + 1) * t_len];
            for k in 0..kernel {
                let off = (kernel - 1 - k) * dilation;
                if off >= t_len {
                    continue;
                }
                let wv = w[(co * c_in + ci) * kernel + k];
                for (dv, &gv) in dxrow[..t_len - off].iter_mut().zip(&dyrow[off..]) {
                    *dv += wv * gv;
                }
            }
        }
    }
}

/// Gradients of the window loss with respect to every parameter, in the
/// same flat order as the model's parameter vector.
#[derive(Debug, Clone)]
pub struct Gradients {
    values: Vec<f64>,
}

impl Gradients {
    pub(crate) fn zeros(len: usize) -> Gradients {
        Gradients { values: vec![0.0; len] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Euclidean norm, handy for convergence diagnostics.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Unnormalized class scores for the full target window, computed from
/// one input window of exactly `receptive_field` columns. The estimate
/// is anchored at the window's newest column.
pub fn forward(model: &TcnModel, x: &InputWindow) -> Result<TargetWindowEstimate> {
    let rf = receptive_field(model.config());
    if x.len() != rf {
        return Err(Error::Shape(format!(
            "input window has {} columns, the receptive field needs exactly {rf}",
            x.len()
        )));
    }
    let scores = model_scores(model, model.normalize_window(x), rf);
    TargetWindowEstimate::new(scores, false, rf - 1)
}

fn model_scores(model: &TcnModel, input: Vec<f64>, t_len: usize) -> Array2<f64> {
    let rec = model.forward_span(input, t_len, None);
    let rows = model.config().target_rows();
    let mut logits = vec![0.0; rows * 3];
    model.head_logits(&rec.output, t_len, t_len - 1, &mut logits);
    Array2::from_shape_vec((rows, 3), logits).expect("head size")
}

/// Row-wise softmax with max subtraction; marks the estimate as
/// probabilities.
pub fn softmax_rows(est: &TargetWindowEstimate) -> TargetWindowEstimate {
    let mut probs = est.scores().clone();
    for mut row in probs.rows_mut() {
        let p = softmax3([row[0], row[1], row[2]]);
        row[0] = p[0];
        row[1] = p[1];
        row[2] = p[2];
    }
    TargetWindowEstimate::new(probs, true, est.anchor()).expect("softmax rows normalize")
}

pub(crate) fn softmax3(v: [f64; 3]) -> [f64; 3] {
    let m = v[0].max(v[1]).max(v[2]);
    let e = [(v[0] - m).exp(), (v[1] - m).exp(), (v[2] - m).exp()];
    let sum = e[0] + e[1] + e[2];
    [e[0] / sum, e[1] / sum, e[2] / sum]
}

fn log_sum_exp3(v: [f64; 3]) -> f64 {
    let m = v[0].max(v[1]).max(v[2]);
    m + ((v[0] - m).exp() + (v[1] - m).exp() + (v[2] - m).exp()).ln()
}

/// Mean over the 2N+1 target offsets of the cross-entropy between the
/// softmaxed score row and the true mode at that offset.
pub fn window_cross_entropy(est: &TargetWindowEstimate, target: &[WalkingMode]) -> Result<f64> {
    let rows = est.scores().nrows();
    if target.len() != rows {
        return Err(Error::Shape(format!(
            "target has {} entries for {rows} score rows",
            target.len()
        )));
    }
    let mut total = 0.0;
    for (r, &mode) in target.iter().enumerate() {
        let row = [est.scores()[[r, 0]], est.scores()[[r, 1]], est.scores()[[r, 2]]];
        total += log_sum_exp3(row) - row[mode.index()];
    }
    Ok(total / rows as f64)
}

/// Gradients of `window_cross_entropy(softmax(forward(x)), target)` with
/// respect to every model parameter, by explicit reverse accumulation.
pub fn backward(model: &TcnModel, x: &InputWindow, target: &[WalkingMode]) -> Result<Gradients> {
    backward_scaled(model, x, target, 1.0)
}

/// Backward with the loss multiplied by `scale` (used by tests to check
/// linearity and by the trainer for minibatch averaging).
pub(crate) fn backward_scaled(
    model: &TcnModel,
    x: &InputWindow,
    target: &[WalkingMode],
    scale: f64,
) -> Result<Gradients> {
    let rf = receptive_field(model.config());
    if x.len() != rf {
        return Err(Error::Shape(format!(
            "input window has {} columns, the receptive field needs exactly {rf}",
            x.len()
        )));
    }
    let rows = model.config().target_rows();
    if target.len() != rows {
        return Err(Error::Shape(format!(
            "target has {} entries for {rows} offsets",
            target.len()
        )));
    }
    let rec = model.forward_span(model.normalize_window(x), rf, None);
    let mut logits = vec![0.0; rows * 3];
    model.head_logits(&rec.output, rf, rf - 1, &mut logits);

    // dL/dlogits = (softmax - onehot) / rows, per target row
    let mut d_logits = vec![0.0; rows * 3];
    for (r, &mode) in target.iter().enumerate() {
        let row = [logits[r * 3], logits[r * 3 + 1], logits[r * 3 + 2]];
        let p = softmax3(row);
        for c in 0..3 {
            let y = if c == mode.index() { 1.0 } else { 0.0 };
            d_logits[r * 3 + c] = scale * (p[c] - y) / rows as f64;
        }
    }

    let mut grad = Gradients::zeros(model.params().len());
    let mut d_out = vec![0.0; rec.output.len()];
    model.head_backward(&rec.output, rf, rf - 1, &d_logits, grad.as_mut_slice(), &mut d_out);
    model.backward_span(&rec, d_out, grad.as_mut_slice());
    Ok(grad)
}

/// Class probabilities for the target window around timestep `k`.
pub fn predict(model: &TcnModel, seq: &Sequence, k: usize) -> Result<TargetWindowEstimate> {
    let m = model.warm_up();
    if k < m {
        return Err(Error::OutOfRange(format!(
            "prediction at k={k} is inside the {m}-sample warm-up"
        )));
    }
    let window = extract_window(seq, k, m)?;
    let scores = model_scores(model, model.normalize_window(&window), m + 1);
    let est = TargetWindowEstimate::new(scores, false, k)?;
    Ok(softmax_rows(&est))
}

/// Probabilities for every valid anchor `k >= warm_up` of a sequence,
/// sharing one convolution pass over the whole span. Identical to
/// per-window `predict` at each anchor.
pub fn predict_sequence(model: &TcnModel, seq: &Sequence) -> Result<Vec<TargetWindowEstimate>> {
    let m = model.warm_up();
    if seq.len() <= m {
        return Err(Error::OutOfRange(format!(
            "sequence of length {} has no anchors after the {m}-sample warm-up",
            seq.len()
        )));
    }
    let t_len = seq.len();
    let rec = model.forward_span(model.normalize_sequence(seq), t_len, None);
    let rows = model.config().target_rows();
    let mut out = Vec::with_capacity(t_len - m);
    let mut logits = vec![0.0; rows * 3];
    for k in m..t_len {
        model.head_logits(&rec.output, t_len, k, &mut logits);
        let scores = Array2::from_shape_vec((rows, 3), logits.clone()).expect("head size");
        let est = TargetWindowEstimate::new(scores, false, k)?;
        out.push(softmax_rows(&est));
    }
    Ok(out)
}

#[cfg(test)]
mod dims {
    //! Shared downsized configurations for fast tests.
    use super::*;

    pub fn tiny() -> TcnConfig {
        TcnConfig {
            n_blocks: 1,
            convs_per_block: 2,
            kernel_size: 5,
            dilations: vec![1],
            channels: vec![4],
            target_half_width: 1,
            ..TcnConfig::default()
        }
    }

    pub fn random_window(rng: &mut ChaCha12Rng, cols: usize) -> InputWindow {
        let values = Array2::from_shape_fn((2, cols), |_| rng.gen_range(-30.0..60.0));
        InputWindow::from_matrix(values).unwrap()
    }

    pub fn random_target(rng: &mut ChaCha12Rng, rows: usize) -> Vec<WalkingMode> {
        (0..rows)
            .map(|_| WalkingMode::from_index(rng.gen_range(0..3)).unwrap())
            .collect()
    }
}

/// Compares analytic gradients against central finite differences on
/// freshly drawn models, windows, and targets. Returns the largest
/// relative error seen across every parameter of every draw.
///
/// The error is `|a-b| / max(|a|+|b|, 0.01)`: relative for gradients of
/// ordinary size, absolute (scaled) near zero where the quotient would
/// amplify finite-difference roundoff.
pub fn finite_difference_check(
    config: &TcnConfig,
    draws: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    use crate::derive_seed;
    config.validate()?;
    let rf = receptive_field(config);
    let rows = config.target_rows();
    let mut worst = 0.0_f64;
    for draw in 0..draws {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, draw as u64));
        let mut model = TcnModel::init(config, derive_seed(seed, 10_000 + draw as u64))?;
        let values = Array2::from_shape_fn((2, rf), |_| rng.gen_range(-2.0..2.0));
        let window = InputWindow::from_matrix(values)?;
        let target: Vec<WalkingMode> = (0..rows)
            .map(|_| WalkingMode::from_index(rng.gen_range(0..3)).unwrap())
            .collect();
        let analytic = backward(&model, &window, &target)?;
        for i in 0..model.params().len() {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + eps;
            let up = window_cross_entropy(&forward(&model, &window)?, &target)?;
            model.params_mut()[i] = orig - eps;
            let down = window_cross_entropy(&forward(&model, &window)?, &target)?;
            model.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic.as_slice()[i];
            let rel = (fd - a).abs() / (fd.abs() + a.abs()).max(1e-2);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::dims::{random_target, random_window, tiny};
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::data::FeatureFrame;

    fn zero_model(config: &TcnConfig) -> TcnModel {
        let mut m = TcnModel::init(config, 0).unwrap();
        m.params_mut().fill(0.0);
        m
    }

    #[test]
    fn zero_parameters_give_zero_scores() {
        let config = tiny();
        let model = zero_model(&config);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let window = random_window(&mut rng, receptive_field(&config));
        let est = forward(&model, &window).unwrap();
        assert!(est.scores().iter().all(|&v| v == 0.0));
        assert!(!est.is_probabilities());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let config = tiny();
        let model = TcnModel::init(&config, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let window = random_window(&mut rng, receptive_field(&config) + 1);
        assert!(matches!(forward(&model, &window), Err(Error::Shape(_))));
    }

    #[test]
    fn output_depends_on_newest_sample() {
        let config = tiny();
        let model = TcnModel::init(&config, 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let rf = receptive_field(&config);
        let buf = Array2::from_shape_fn((2, rf + 1), |_| rng.gen_range(-1.0..1.0));
        let w1 = InputWindow::from_matrix(buf.slice(ndarray::s![.., ..rf]).to_owned()).unwrap();
        let w2 = InputWindow::from_matrix(buf.slice(ndarray::s![.., 1..]).to_owned()).unwrap();
        let y1 = forward(&model, &w1).unwrap();
        let y2 = forward(&model, &w2).unwrap();
        let diff: f64 = y1
            .scores()
            .iter()
            .zip(y2.scores().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "sliding the window did not change the output");
    }

    #[test]
    fn window_forward_matches_full_span_prediction() {
        // Zero left-padding means out-of-field samples cannot influence
        // the anchor output: predicting from a bare window equals
        // predicting at the same position of a longer span, bit-exact.
        let config = tiny();
        let model = TcnModel::init(&config, 6).unwrap();
        let m = model.warm_up();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let frames: Vec<FeatureFrame> = (0..m + 21)
            .map(|_| FeatureFrame::new(rng.gen_range(-45.0..45.0), rng.gen_range(-45.0..45.0)).unwrap())
            .collect();
        let labels = vec![WalkingMode::LevelGround; frames.len()];
        let seq = Sequence::new(0, frames, labels, false).unwrap();

        let spans = predict_sequence(&model, &seq).unwrap();
        for k in [m, m + 5, seq.len() - 1] {
            let windowed = predict(&model, &seq, k).unwrap();
            let spanned = &spans[k - m];
            assert_eq!(spanned.anchor(), k);
            assert_eq!(windowed.scores(), spanned.scores());
        }
    }

    #[test]
    fn softmax_rows_examples() {
        let scores = Array2::from_shape_vec(
            (3, 3),
            vec![0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 1.0, 2.0, 3.0],
        )
        .unwrap();
        let est = TargetWindowEstimate::new(scores, false, 0).unwrap();
        let p = softmax_rows(&est);
        assert_abs_diff_eq!(p.at_offset(-1)[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.at_offset(-1)[1], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.at_offset(0)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.at_offset(0)[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.at_offset(1)[0], 0.09003, epsilon = 1e-5);
        assert_abs_diff_eq!(p.at_offset(1)[1], 0.24473, epsilon = 1e-5);
        assert_abs_diff_eq!(p.at_offset(1)[2], 0.66524, epsilon = 1e-5);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        use WalkingMode::*;
        let zeros = TargetWindowEstimate::new(Array2::zeros((5, 3)), false, 0).unwrap();
        let loss = window_cross_entropy(&zeros, &[StairAscent, LevelGround, StairDescent, LevelGround, StairAscent])
            .unwrap();
        assert_abs_diff_eq!(loss, 3f64.ln(), epsilon = 1e-12);

        let mut sat = Array2::zeros((5, 3));
        for r in 0..5 {
            sat[[r, 1]] = 1000.0;
        }
        let sat = TargetWindowEstimate::new(sat, false, 0).unwrap();
        let loss = window_cross_entropy(&sat, &[LevelGround; 5]).unwrap();
        assert!(loss.abs() < 1e-9, "saturated correct prediction should cost ~0, got {loss}");
    }

    #[test]
    fn cross_entropy_single_offset_example() {
        let scores = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let est = TargetWindowEstimate::new(scores, false, 0).unwrap();
        let loss = window_cross_entropy(&est, &[WalkingMode::StairDescent]).unwrap();
        assert_abs_diff_eq!(loss, 0.40761, epsilon = 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_mismatched_target() {
        let est = TargetWindowEstimate::new(Array2::zeros((3, 3)), false, 0).unwrap();
        assert!(window_cross_entropy(&est, &[WalkingMode::StairAscent]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        // the acceptance suite runs 100+ draws; keep the unit test quick
        let worst = finite_difference_check(&tiny(), 8, 1e-4, 11).unwrap();
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_multi_block() {
        let config = TcnConfig {
            n_blocks: 2,
            convs_per_block: 2,
            kernel_size: 3,
            dilations: vec![1, 2],
            channels: vec![3, 3],
            target_half_width: 2,
            ..TcnConfig::default()
        };
        let worst = finite_difference_check(&config, 4, 1e-4, 13).unwrap();
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn saturated_correct_prediction_has_vanishing_gradient() {
        let config = tiny();
        let mut model = zero_model(&config);
        // zero convs leave the head input at zero, so logits equal the
        // head bias: make the correct class overwhelmingly likely
        let rows = config.target_rows();
        let head_b = model.layout().head_b;
        for r in 0..rows {
            model.params_mut()[head_b + r * 3 + 1] = 1000.0;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let window = random_window(&mut rng, receptive_field(&config));
        let grad = backward(&model, &window, &vec![WalkingMode::LevelGround; rows]).unwrap();
        assert!(grad.norm() < 1e-8, "gradient norm {}", grad.norm());
    }

    #[test]
    fn doubling_the_loss_doubles_every_gradient() {
        let config = tiny();
        let model = TcnModel::init(&config, 19).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let window = random_window(&mut rng, receptive_field(&config));
        let target = random_target(&mut rng, config.target_rows());
        let g1 = backward(&model, &window, &target).unwrap();
        let g2 = backward_scaled(&model, &window, &target, 2.0).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn predict_enforces_warm_up() {
        let config = tiny();
        let model = TcnModel::init(&config, 29).unwrap();
        let frames = vec![FeatureFrame::new(0.0, 0.0).unwrap(); 40];
        let labels = vec![WalkingMode::LevelGround; 40];
        let seq = Sequence::new(0, frames, labels, false).unwrap();
        assert!(matches!(
            predict(&model, &seq, model.warm_up() - 1),
            Err(Error::OutOfRange(_))
        ));
        let est = predict(&model, &seq, model.warm_up()).unwrap();
        assert!(est.is_probabilities());
        for off in -(est.half_width() as i64)..=est.half_width() as i64 {
            let p = est.at_offset(off);
            assert_abs_diff_eq!(p[0] + p[1] + p[2], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn dropout_masks_are_recorded_and_scale_activations() {
        let config = TcnConfig {
            dropout: 0.5,
            ..tiny()
        };
        let model = TcnModel::init(&config, 31).unwrap();
        let t_len = receptive_field(&config);
        let input = vec![0.5; 2 * t_len];
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let rec = model.forward_span(input.clone(), t_len, Some(&mut rng));
        assert_eq!(rec.drop_mask[0].len(), 1);
        assert!(rec.drop_mask[0][0].iter().all(|&m| m == 0.0 || m == 2.0));
        // same rng stream reproduces the same masks
        let mut rng2 = ChaCha12Rng::seed_from_u64(1);
        let rec2 = model.forward_span(input, t_len, Some(&mut rng2));
        assert_eq!(rec.drop_mask, rec2.drop_mask);
    }
}
