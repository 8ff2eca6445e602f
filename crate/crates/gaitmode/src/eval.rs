//! Metrics and experimental protocols.
//!
//! AUROC is computed as the Mann–Whitney rank statistic — the exact
//! probability that a positive outranks a negative, counting ties as
//! half — rather than by integrating an ROC polygon. That choice gives
//! every metric here a brute-force pair-counting oracle to test
//! against, and makes AUROC invariant under strictly increasing score
//! transformations by construction.
//!
//! The protocols mirror how the models are meant to be compared:
//! leave-one-user-out cross-validation, per-offset window curves with a
//! repeat-prediction baseline, and an exact one-sided Wilcoxon
//! signed-rank test for paired fold results.

use ndarray::Array2;
use rayon::prelude::*;

use crate::data::{Dataset, Sequence, TargetWindowEstimate, WalkingMode};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::rf::{rf_predict_sequence, RfModel};
use crate::tcn::{predict_sequence, TcnModel};

/// One evaluation instance: the hidden class and a model's probability
/// vector for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub true_class: WalkingMode,
    pub probs: [f64; 3],
}

impl ScoredSample {
    /// Validates that probabilities are in range and sum to 1 ± 1e-6.
    pub fn new(true_class: WalkingMode, probs: [f64; 3]) -> Result<ScoredSample> {
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p)) {
            return Err(Error::Invalid(format!(
                "probability vector {probs:?} does not sum to 1"
            )));
        }
        Ok(ScoredSample { true_class, probs })
    }
}

/// Per-offset multiclass AUROC across a target window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowCurve {
    first_offset: i64,
    auroc: Vec<f64>,
}

impl WindowCurve {
    pub fn new(first_offset: i64, auroc: Vec<f64>) -> Result<WindowCurve> {
        if auroc.is_empty() {
            return Err(Error::Invalid("empty window curve".into()));
        }
        if auroc.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("AUROC values must lie in [0,1]".into()));
        }
        Ok(WindowCurve { first_offset, auroc })
    }

    pub fn first_offset(&self) -> i64 {
        self.first_offset
    }

    pub fn last_offset(&self) -> i64 {
        self.first_offset + self.auroc.len() as i64 - 1
    }

    /// (offset, AUROC) pairs in ascending offset order.
    pub fn points(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.auroc
            .iter()
            .enumerate()
            .map(move |(i, &v)| (self.first_offset + i as i64, v))
    }

    pub fn value_at(&self, offset: i64) -> Option<f64> {
        if offset < self.first_offset || offset > self.last_offset() {
            return None;
        }
        Some(self.auroc[(offset - self.first_offset) as usize])
    }

    pub fn min_value(&self) -> f64 {
        self.auroc.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// 3×3 counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn count(&self, truth: WalkingMode, predicted: WalkingMode) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, truth: WalkingMode) -> u64 {
        self.counts[truth.index()].iter().sum()
    }

    /// Fraction of samples on the diagonal.
    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..3).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total() as f64
    }
}

impl std::fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "truth\\pred      SA      LG      SD")?;
        for mode in WalkingMode::ALL {
            write!(f, "{:<10}", mode.tag())?;
            for p in self.counts[mode.index()] {
                write!(f, "{p:>8}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Anything that can predict a target window at every post-warm-up
/// anchor of a sequence. Implemented by the network, the forest
/// (with a zero-width window), and test oracles.
pub trait WindowPredictor {
    /// Samples needed before the first prediction.
    fn warm_up(&self) -> usize;
    /// Half-width N of the produced estimates.
    fn half_width(&self) -> usize;
    /// Probability estimates anchored at k = warm_up()..len, in order.
    fn predict_sequence(&self, seq: &Sequence) -> Result<Vec<TargetWindowEstimate>>;
}

impl WindowPredictor for TcnModel {
    fn warm_up(&self) -> usize {
        TcnModel::warm_up(self)
    }

    fn half_width(&self) -> usize {
        self.config().target_half_width
    }

    fn predict_sequence(&self, seq: &Sequence) -> Result<Vec<TargetWindowEstimate>> {
        predict_sequence(self, seq)
    }
}

impl WindowPredictor for RfModel {
    fn warm_up(&self) -> usize {
        RfModel::warm_up(self)
    }

    fn half_width(&self) -> usize {
        0
    }

    fn predict_sequence(&self, seq: &Sequence) -> Result<Vec<TargetWindowEstimate>> {
        let warm = RfModel::warm_up(self);
        rf_predict_sequence(self, seq)?
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let arr = Array2::from_shape_vec((1, 3), p.to_vec()).expect("1x3");
                TargetWindowEstimate::new(arr, true, warm + i)
            })
            .collect()
    }
}

/// Binary AUROC of scores against binary labels, as the Mann–Whitney
/// statistic `P(score_pos > score_neg) + ½ P(equal)` computed with
/// average ranks.
pub fn auroc_binary(scores: &[(f64, bool)]) -> Result<f64> {
    if scores.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::Invalid("scores must be finite".into()));
    }
    let n_pos = scores.iter().filter(|(_, y)| *y).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.partial_cmp(&scores[b].0).expect("finite"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]].0 == scores[order[i]].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share the average rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if scores[idx].1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Unweighted mean of the three one-vs-rest binary AUROCs.
pub fn auroc_multiclass(samples: &[ScoredSample]) -> Result<f64> {
    let mut total = 0.0;
    for mode in WalkingMode::ALL {
        if !samples.iter().any(|s| s.true_class == mode) {
            return Err(Error::UndefinedMetric(format!(
                "class {mode} absent from evaluation samples"
            )));
        }
        let scores: Vec<(f64, bool)> = samples
            .iter()
            .map(|s| (s.probs[mode.index()], s.true_class == mode))
            .collect();
        total += auroc_binary(&scores)?;
    }
    Ok(total / 3.0)
}

/// Multiclass AUROC at every offset of the model's target window.
///
/// At offset δ, an anchor k contributes only when k+δ lies inside the
/// sequence: edge-replicated targets would bias the outer offsets.
pub fn window_curve<P: WindowPredictor>(model: &P, dataset: &Dataset) -> Result<WindowCurve> {
    let n = model.half_width() as i64;
    let per_offset = collect_offset_samples(model, dataset, -n..=n)?;
    let auroc = per_offset
        .iter()
        .map(|s| auroc_multiclass(s))
        .collect::<Result<Vec<f64>>>()?;
    WindowCurve::new(-n, auroc)
}

/// The trivial forecaster: the model's offset-0 probabilities scored
/// against the labels δ steps ahead, for δ = 0..=N.
pub fn repeat_baseline_curve<P: WindowPredictor>(
    model: &P,
    dataset: &Dataset,
) -> Result<WindowCurve> {
    let n = model.half_width() as i64;
    let mut per_offset: Vec<Vec<ScoredSample>> = vec![Vec::new(); n as usize + 1];
    for seq in dataset.sequences() {
        if seq.len() <= model.warm_up() {
            continue;
        }
        let ests = model.predict_sequence(seq)?;
        for est in &ests {
            let probs = est.at_offset(0);
            for delta in 0..=n {
                let idx = est.anchor() as i64 + delta;
                if idx < seq.len() as i64 {
                    per_offset[delta as usize].push(ScoredSample {
                        true_class: seq.label(idx as usize),
                        probs,
                    });
                }
            }
        }
    }
    let auroc = per_offset
        .iter()
        .map(|s| auroc_multiclass(s))
        .collect::<Result<Vec<f64>>>()?;
    WindowCurve::new(0, auroc)
}

fn collect_offset_samples<P: WindowPredictor>(
    model: &P,
    dataset: &Dataset,
    offsets: std::ops::RangeInclusive<i64>,
) -> Result<Vec<Vec<ScoredSample>>> {
    let count = (offsets.end() - offsets.start() + 1) as usize;
    let mut per_offset: Vec<Vec<ScoredSample>> = vec![Vec::new(); count];
    let mut any = false;
    for seq in dataset.sequences() {
        if seq.len() <= model.warm_up() {
            continue;
        }
        any = true;
        let ests = model.predict_sequence(seq)?;
        for est in &ests {
            for (slot, delta) in offsets.clone().enumerate() {
                let idx = est.anchor() as i64 + delta;
                if idx >= 0 && idx < seq.len() as i64 {
                    per_offset[slot].push(ScoredSample {
                        true_class: seq.label(idx as usize),
                        probs: est.at_offset(delta),
                    });
                }
            }
        }
    }
    if !any {
        return Err(Error::Invalid(
            "no sequence is longer than the model warm-up".into(),
        ));
    }
    Ok(per_offset)
}

/// The offset with the highest AUROC; ties break toward the offset
/// closest to zero, then toward the past.
pub fn pick_delta(curve: &WindowCurve) -> i64 {
    let mut best: Option<(f64, i64)> = None;
    for (offset, value) in curve.points() {
        let better = match best {
            None => true,
            Some((bv, bo)) => {
                value > bv
                    || (value == bv
                        && (offset.abs() < bo.abs() || (offset.abs() == bo.abs() && offset < bo)))
            }
        };
        if better {
            best = Some((value, offset));
        }
    }
    best.expect("curves are non-empty").1
}

/// Confusion matrix of argmax predictions; ties toward the lowest
/// class index.
pub fn confusion(samples: &[ScoredSample]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for s in samples {
        let mut pred = 0;
        for c in 1..3 {
            if s.probs[c] > s.probs[pred] {
                pred = c;
            }
        }
        m.counts[s.true_class.index()][pred] += 1;
    }
    m
}

/// One cross-validation fold: the held-out user and the model's
/// offset-0 multiclass AUROC on that user's sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldResult {
    pub user_id: u32,
    pub auroc: f64,
}

/// All folds plus their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossValReport {
    pub folds: Vec<FoldResult>,
    pub mean_auroc: f64,
}

/// Leave-one-user-out cross-validation.
///
/// For each user (ascending id): the trainer builds a model from every
/// other user's sequences and a fold seed derived from `base_seed`,
/// and the model is scored at offset 0 on the held-out user. Folds run
/// in parallel; the derived seeds keep the result independent of
/// scheduling.
pub fn leave_one_user_out<P, F>(dataset: &Dataset, base_seed: u64, trainer: F) -> Result<CrossValReport>
where
    P: WindowPredictor,
    F: Fn(&Dataset, u64) -> Result<P> + Sync,
{
    let users = dataset.user_ids();
    if users.len() < 2 {
        return Err(Error::Protocol(
            "leave-one-user-out needs at least two users".into(),
        ));
    }
    let folds: Vec<FoldResult> = users
        .par_iter()
        .enumerate()
        .map(|(fold, &user)| {
            let (held, rest) = dataset.split_user(user);
            let train_set = Dataset::new(rest)?;
            assert!(
                !train_set.user_ids().contains(&user),
                "fold leakage: user {user} present in its own training split"
            );
            let model = trainer(&train_set, derive_seed(base_seed, 1000 + fold as u64))?;
            let mut samples = Vec::new();
            for seq in &held {
                if seq.len() <= model.warm_up() {
                    continue;
                }
                for est in model.predict_sequence(seq)? {
                    samples.push(ScoredSample {
                        true_class: seq.label(est.anchor()),
                        probs: est.at_offset(0),
                    });
                }
            }
            if samples.is_empty() {
                return Err(Error::Protocol(format!(
                    "held-out user {user} has no sequences longer than the warm-up"
                )));
            }
            Ok(FoldResult {
                user_id: user,
                auroc: auroc_multiclass(&samples)?,
            })
        })
        .collect::<Result<Vec<FoldResult>>>()?;
    let mean = folds.iter().map(|f| f.auroc).sum::<f64>() / folds.len() as f64;
    Ok(CrossValReport {
        folds,
        mean_auroc: mean,
    })
}

/// Exact one-sided Wilcoxon signed-rank test.
///
/// Tests whether the paired differences are positive: zero differences
/// are dropped, tied magnitudes get average ranks, and the p-value is
/// the exact probability, over all 2ⁿ equally likely sign assignments,
/// of a positive-rank sum at least as large as the observed one.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<f64> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Invalid("differences must be finite".into()));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Err(Error::UndefinedMetric(
            "every paired difference is zero".into(),
        ));
    }
    if n > 20 {
        return Err(Error::Invalid(format!(
            "exact enumeration supports at most 20 non-zero differences, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| nonzero[a].abs().partial_cmp(&nonzero[b].abs()).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && nonzero[order[j]].abs() == nonzero[order[i]].abs() {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    let w_obs: f64 = (0..n).filter(|&i| nonzero[i] > 0.0).map(|i| ranks[i]).sum();

    // ranks are multiples of ½, so sums are exact in f64; the epsilon
    // only guards the comparison of equal sums
    let mut at_least = 0u64;
    for mask in 0u32..(1u32 << n) {
        let w: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w >= w_obs - 1e-9 {
            at_least += 1;
        }
    }
    Ok(at_least as f64 / (1u64 << n) as f64)
}
