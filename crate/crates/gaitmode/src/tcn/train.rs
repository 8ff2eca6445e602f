//! Minibatch trainer.
//!
//! A minibatch is a chunk of consecutive anchors from one sequence. All
//! windows in a chunk share a single convolution pass over the span that
//! covers them: because the anchors' receptive fields never touch the
//! zero padding, the per-window gradients are exactly the ones the
//! window-at-a-time `backward` would produce, at a fraction of the
//! arithmetic (neighboring windows overlap in all but one column).
//!
//! Targets are per-index and optional. Ordinary supervised training has
//! a label everywhere and replicates edge labels for offsets past the
//! sequence ends; pseudo-labeled training leaves most indices `None`,
//! and those target rows are masked out of the loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{Dataset, Sequence, WalkingMode};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::tcn::net::{softmax3, Gradients, TcnModel};
use crate::tcn::TcnConfig;

/// Adam constants; documented rather than configurable.
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-epoch mean training loss and the run's bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Weighted mean window cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    /// Loss on the held-out validation split after the final epoch, when
    /// the config requested one.
    pub val_loss: Option<f64>,
    /// Wall-clock seconds. Diagnostic only: deterministic outputs must
    /// never include it.
    pub wall_clock_s: f64,
    pub seed: u64,
}

/// One sequence prepared for the trainer: normalized channel-major data
/// plus optional per-index targets.
#[derive(Debug, Clone)]
pub(crate) struct SupervisedSeq {
    data: Vec<f64>,
    len: usize,
    targets: Vec<Option<WalkingMode>>,
    pad_edges: bool,
    /// Fraction of this sequence's chunks visited per epoch; fine-tuning
    /// replays only a sample of the base corpus per epoch.
    replay_fraction: f64,
    /// Prefix counts of labeled indices, for skipping empty chunks.
    labeled_prefix: Vec<u32>,
}

impl SupervisedSeq {
    /// Fully supervised: every index labeled, edges replicated.
    pub fn full(seq: &Sequence, model: &TcnModel) -> SupervisedSeq {
        let targets: Vec<Option<WalkingMode>> = seq.labels().iter().map(|&l| Some(l)).collect();
        SupervisedSeq::build(model.normalize_sequence(seq), seq.len(), targets, true)
    }

    /// Sparsely labeled: targets only at the given (index, label) pairs;
    /// everything else is masked out of the loss.
    pub fn masked(
        seq: &Sequence,
        pairs: &[(usize, WalkingMode)],
        model: &TcnModel,
    ) -> Result<SupervisedSeq> {
        let mut targets = vec![None; seq.len()];
        for &(idx, label) in pairs {
            if idx >= seq.len() {
                return Err(Error::OutOfRange(format!(
                    "pseudo-label index {idx} outside sequence of length {}",
                    seq.len()
                )));
            }
            targets[idx] = Some(label);
        }
        Ok(SupervisedSeq::build(
            model.normalize_sequence(seq),
            seq.len(),
            targets,
            false,
        ))
    }

    fn build(
        data: Vec<f64>,
        len: usize,
        targets: Vec<Option<WalkingMode>>,
        pad_edges: bool,
    ) -> SupervisedSeq {
        let mut labeled_prefix = Vec::with_capacity(len + 1);
        labeled_prefix.push(0u32);
        let mut acc = 0u32;
        for t in &targets {
            acc += t.is_some() as u32;
            labeled_prefix.push(acc);
        }
        SupervisedSeq {
            data,
            len,
            targets,
            pad_edges,
            replay_fraction: 1.0,
            labeled_prefix,
        }
    }

    pub fn with_replay_fraction(mut self, fraction: f64) -> SupervisedSeq {
        self.replay_fraction = fraction.clamp(0.0, 1.0);
        self
    }

    fn labeled_in(&self, lo: usize, hi: usize) -> u32 {
        // labels in [lo, hi), both clamped
        let lo = lo.min(self.len);
        let hi = hi.min(self.len);
        if lo >= hi {
            return 0;
        }
        self.labeled_prefix[hi] - self.labeled_prefix[lo]
    }

    /// Target at a signed index, honoring the edge policy.
    fn target_at(&self, idx: i64) -> Option<WalkingMode> {
        if idx >= 0 && (idx as usize) < self.len {
            return self.targets[idx as usize];
        }
        if self.pad_edges {
            let clamped = idx.clamp(0, self.len as i64 - 1) as usize;
            return self.targets[clamped];
        }
        None
    }
}

/// Per-class loss weights; all ones when balancing is off.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ClassWeights(pub [f64; 3]);

impl ClassWeights {
    pub fn uniform() -> ClassWeights {
        ClassWeights([1.0; 3])
    }

    /// Inverse-frequency weights over the given sequences' labels,
    /// normalized so a balanced dataset gets all ones. Absent classes
    /// get weight zero.
    pub fn inverse_frequency(seqs: &[SupervisedSeq]) -> ClassWeights {
        let mut counts = [0usize; 3];
        for s in seqs {
            for t in s.targets.iter().flatten() {
                counts[t.index()] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let mut w = [0.0; 3];
        for c in 0..3 {
            if counts[c] > 0 {
                w[c] = total as f64 / (3.0 * counts[c] as f64);
            }
        }
        ClassWeights(w)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2_weight: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(config: &TcnConfig) -> TrainOptions {
        TrainOptions {
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            l2_weight: config.l2_weight,
            dropout: config.dropout,
            seed: derive_seed(config.seed, 1),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Chunk {
    seq: usize,
    k0: usize,
    n_anchors: usize,
}

/// Trains the network on a dataset: z-score normalization fitted on the
/// training split, He init, Adam over chunked minibatches, fixed epoch
/// count, deterministic under the config seed.
pub fn train(dataset: &Dataset, config: &TcnConfig) -> Result<(TcnModel, TrainReport)> {
    config.validate()?;
    let start = Instant::now();

    let seqs = dataset.sequences();
    let n_val = if config.val_fraction > 0.0 {
        ((config.val_fraction * seqs.len() as f64).ceil() as usize).min(seqs.len() - 1)
    } else {
        0
    };
    let (train_seqs, val_seqs) = seqs.split_at(seqs.len() - n_val);

    let mut model = TcnModel::init(config, config.seed)?;
    let m = config.warm_up();
    let usable: Vec<&Sequence> = train_seqs.iter().filter(|s| s.len() > m).collect();
    if usable.is_empty() {
        return Err(Error::Invalid(format!(
            "no training sequence is longer than the {m}-sample warm-up"
        )));
    }
    let (mean, std) = normalization_stats(&usable, config.input_channels);
    model.set_normalization(mean, std);

    let corpus: Vec<SupervisedSeq> = usable.iter().map(|s| SupervisedSeq::full(s, &model)).collect();
    let weights = if config.class_balanced {
        ClassWeights::inverse_frequency(&corpus)
    } else {
        ClassWeights::uniform()
    };

    let epoch_loss = fit(&mut model, &corpus, &weights, &TrainOptions::from_config(config))?;

    let val_loss = if n_val > 0 {
        let val_corpus: Vec<SupervisedSeq> = val_seqs
            .iter()
            .filter(|s| s.len() > m)
            .map(|s| SupervisedSeq::full(s, &model))
            .collect();
        if val_corpus.is_empty() {
            None
        } else {
            Some(evaluate_loss(&model, &val_corpus, &weights)?)
        }
    } else {
        None
    };

    let report = TrainReport {
        epoch_loss,
        val_loss,
        wall_clock_s: start.elapsed().as_secs_f64(),
        seed: config.seed,
    };
    Ok((model, report))
}

/// Per-channel mean and population std over every sample of the given
/// sequences; constant channels fall back to unit scale.
fn normalization_stats(seqs: &[&Sequence], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; channels];
    let mut count = 0usize;
    for s in seqs {
        for f in s.frames() {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += f.channel(c);
            }
        }
        count += s.len();
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; channels];
    for s in seqs {
        for f in s.frames() {
            for (c, v) in var.iter_mut().enumerate() {
                let d = f.channel(c) - mean[c];
                *v += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let s = (v / count as f64).sqrt();
            if s > 1e-9 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Runs the optimization loop on an already-initialized model. Returns
/// the weighted mean loss of each epoch.
pub(crate) fn fit(
    model: &mut TcnModel,
    corpus: &[SupervisedSeq],
    weights: &ClassWeights,
    opts: &TrainOptions,
) -> Result<Vec<f64>> {
    let m = model.config().warm_up();
    let n = model.config().target_half_width;
    let all_chunks = build_chunks(corpus, m, n, opts.batch_size);
    if all_chunks.is_empty() {
        return Err(Error::Invalid("no trainable windows: every sequence is shorter than the warm-up or fully masked".into()));
    }

    let mut adam_m = vec![0.0; model.params().len()];
    let mut adam_v = vec![0.0; model.params().len()];
    let mut step = 0u64;
    let mut epoch_loss = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(opts.seed, 0x0e70c000 + epoch as u64));
        let mut chunks: Vec<Chunk> = all_chunks
            .iter()
            .filter(|c| {
                let f = corpus[c.seq].replay_fraction;
                f >= 1.0 || rng.gen::<f64>() < f
            })
            .copied()
            .collect();
        if chunks.is_empty() {
            // replay subsampling can empty an epoch on tiny corpora
            chunks.push(all_chunks[0]);
        }
        chunks.shuffle(&mut rng);

        let mut dropout_rng = if opts.dropout > 0.0 {
            Some(ChaCha12Rng::seed_from_u64(derive_seed(opts.seed, 0xd207 + epoch as u64)))
        } else {
            None
        };

        let mut loss_sum = 0.0;
        let mut weight_sum = 0.0;
        for chunk in &chunks {
            let (l, w, grad) =
                chunk_gradient(model, &corpus[chunk.seq], *chunk, weights, dropout_rng.as_mut(), opts.dropout)?;
            if w == 0.0 {
                continue;
            }
            loss_sum += l;
            weight_sum += w;

            step += 1;
            adam_step(
                model.params_mut(),
                grad.as_slice(),
                &mut adam_m,
                &mut adam_v,
                step,
                opts.learning_rate,
                opts.l2_weight,
            );
        }
        let mean = if weight_sum > 0.0 { loss_sum / weight_sum } else { 0.0 };
        if !mean.is_finite() {
            return Err(Error::Invalid(format!(
                "training diverged at epoch {epoch}: loss {mean}"
            )));
        }
        epoch_loss.push(mean);
    }
    Ok(epoch_loss)
}

fn build_chunks(corpus: &[SupervisedSeq], m: usize, n: usize, batch: usize) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    for (si, seq) in corpus.iter().enumerate() {
        if seq.len <= m {
            continue;
        }
        let mut k = m;
        while k < seq.len {
            let n_anchors = batch.min(seq.len - k);
            // a chunk is worth visiting if any anchor can resolve a target
            let lo = k.saturating_sub(n);
            let hi = k + n_anchors - 1 + n + 1;
            let any_labels = if seq.pad_edges {
                true
            } else {
                seq.labeled_in(lo, hi) > 0
            };
            if any_labels {
                chunks.push(Chunk {
                    seq: si,
                    k0: k,
                    n_anchors,
                });
            }
            k += n_anchors;
        }
    }
    chunks
}

/// Loss numerator/denominator and parameter gradients of one chunk.
///
/// The loss is the weighted mean cross-entropy over every resolvable
/// target row of every anchor in the chunk; with uniform weights and
/// full supervision this equals the mean of the per-window losses, and
/// the gradient equals the mean of the per-window `backward` gradients.
pub(crate) fn chunk_gradient(
    model: &TcnModel,
    seq: &SupervisedSeq,
    chunk: Chunk,
    weights: &ClassWeights,
    dropout_rng: Option<&mut ChaCha12Rng>,
    dropout: f64,
) -> Result<(f64, f64, Gradients)> {
    let m = model.config().warm_up();
    let n = model.config().target_half_width as i64;
    let rows = model.config().target_rows();
    let t_len = m + chunk.n_anchors;
    let span_start = chunk.k0 - m;

    // copy the span into its own channel-major buffer
    let mut input = vec![0.0; model.config().input_channels * t_len];
    for c in 0..model.config().input_channels {
        let src = &seq.data[c * seq.len + span_start..c * seq.len + span_start + t_len];
        input[c * t_len..(c + 1) * t_len].copy_from_slice(src);
    }
    let rec = model.forward_span(input, t_len, if dropout > 0.0 { dropout_rng } else { None });

    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    let mut logits = vec![0.0; rows * 3];
    let mut d_rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(chunk.n_anchors);
    for i in 0..chunk.n_anchors {
        let k = chunk.k0 + i;
        let pos = m + i;
        let mut d_logits = vec![0.0; rows * 3];
        let mut any = false;
        model.head_logits(&rec.output, t_len, pos, &mut logits);
        for r in 0..rows {
            let idx = k as i64 + r as i64 - n;
            let Some(mode) = seq.target_at(idx) else { continue };
            let w = weights.0[mode.index()];
            if w == 0.0 {
                continue;
            }
            let row = [logits[r * 3], logits[r * 3 + 1], logits[r * 3 + 2]];
            let p = softmax3(row);
            let max = row[0].max(row[1]).max(row[2]);
            let lse = max + ((row[0] - max).exp() + (row[1] - max).exp() + (row[2] - max).exp()).ln();
            loss_sum += w * (lse - row[mode.index()]);
            weight_sum += w;
            for c in 0..3 {
                let y = if c == mode.index() { 1.0 } else { 0.0 };
                d_logits[r * 3 + c] = w * (p[c] - y);
            }
            any = true;
        }
        if any {
            d_rows.push((pos, d_logits));
        }
    }

    let mut grad = Gradients::zeros(model.params().len());
    if weight_sum > 0.0 {
        let scale = 1.0 / weight_sum;
        let mut d_out = vec![0.0; rec.output.len()];
        for (pos, mut d_logits) in d_rows {
            for v in d_logits.iter_mut() {
                *v *= scale;
            }
            model.head_backward(&rec.output, t_len, pos, &d_logits, grad.as_mut_slice(), &mut d_out);
        }
        model.backward_span(&rec, d_out, grad.as_mut_slice());
    }
    Ok((loss_sum, weight_sum, grad))
}

fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    l2: f64,
) {
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    for i in 0..params.len() {
        let g = grad[i] + l2 * params[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

/// Weighted mean window cross-entropy of a model over prepared
/// sequences, without touching parameters.
pub(crate) fn evaluate_loss(
    model: &TcnModel,
    corpus: &[SupervisedSeq],
    weights: &ClassWeights,
) -> Result<f64> {
    let m = model.config().warm_up();
    let n = model.config().target_half_width as i64;
    let rows = model.config().target_rows();
    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    let mut logits = vec![0.0; rows * 3];
    for seq in corpus {
        if seq.len <= m {
            continue;
        }
        let rec = model.forward_span(seq.data.clone(), seq.len, None);
        for k in m..seq.len {
            model.head_logits(&rec.output, seq.len, k, &mut logits);
            for r in 0..rows {
                let idx = k as i64 + r as i64 - n;
                let Some(mode) = seq.target_at(idx) else { continue };
                let w = weights.0[mode.index()];
                let row = [logits[r * 3], logits[r * 3 + 1], logits[r * 3 + 2]];
                let max = row[0].max(row[1]).max(row[2]);
                let lse = max + ((row[0] - max).exp() + (row[1] - max).exp() + (row[2] - max).exp()).ln();
                loss_sum += w * (lse - row[mode.index()]);
                weight_sum += w;
            }
        }
    }
    if weight_sum == 0.0 {
        return Err(Error::Invalid("no labeled rows to evaluate".into()));
    }
    Ok(loss_sum / weight_sum)
}
