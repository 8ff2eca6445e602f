//! Hindsight self-labeling and user-tailored fine-tuning.
//!
//! Once a window has slid past a timestep, the model's backward-looking
//! estimate of that timestep is better than its original real-time
//! guess. Self-labeling exploits this: a deployed model labels newly
//! collected, unlabeled sequences at a past offset δ ≤ 0 and then
//! fine-tunes on its own pseudo-labels. Everything needed to simulate
//! a multi-day deployment of that loop is here:
//!
//! - [`self_label`]: pseudo-label a stripped sequence at offset δ.
//! - [`fine_tune`] / [`fine_tune_supervised`]: warm-start training on
//!   the base corpus plus new sequences, masked to the labels that
//!   actually exist.
//! - [`three_day_protocol`]: the day-0/1/2 simulation comparing
//!   self-labeled against ground-truth-labeled adaptation.

use rayon::prelude::*;

use crate::data::{Dataset, Sequence, WalkingMode};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{auroc_multiclass, ScoredSample};
use crate::tcn::{
    fit, predict_sequence, train, ClassWeights, SupervisedSeq, TcnConfig, TcnModel, TrainOptions,
};

/// Pseudo-labels attached to a label-stripped sequence.
///
/// Holds the sequence itself (ground truth already removed), the
/// (index, label) pairs produced by hindsight labeling, and the offset
/// δ they were produced at.
#[derive(Debug, Clone)]
pub struct PseudoDataset {
    sequence: Sequence,
    pairs: Vec<(usize, WalkingMode)>,
    delta: i64,
}

impl PseudoDataset {
    /// Validates that indices are strictly increasing, within range,
    /// and at or after the given warm-up.
    pub fn new(
        sequence: Sequence,
        pairs: Vec<(usize, WalkingMode)>,
        delta: i64,
        warm_up: usize,
    ) -> Result<PseudoDataset> {
        if pairs.is_empty() {
            return Err(Error::Invalid("pseudo-label set is empty".into()));
        }
        let mut prev: Option<usize> = None;
        for &(idx, _) in &pairs {
            if idx < warm_up || idx >= sequence.len() {
                return Err(Error::OutOfRange(format!(
                    "pseudo-label index {idx} outside [{warm_up}, {})",
                    sequence.len()
                )));
            }
            if let Some(p) = prev {
                if idx <= p {
                    return Err(Error::Invalid(format!(
                        "pseudo-label indices must be strictly increasing, got {p} then {idx}"
                    )));
                }
            }
            prev = Some(idx);
        }
        Ok(PseudoDataset {
            sequence,
            pairs,
            delta,
        })
    }

    pub fn sequence(&self) -> &Sequence {
        &self.sequence
    }

    pub fn pairs(&self) -> &[(usize, WalkingMode)] {
        &self.pairs
    }

    pub fn delta(&self) -> i64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Labels a sequence with the model's own hindsight estimates.
///
/// For every anchor k whose offset-δ row lands at or after the warm-up,
/// the row's argmax becomes the pseudo-label of index k+δ, so the
/// labeled indices are exactly warm_up..=(len−1)+δ with stride 1. The
/// sequence is re-stripped internally: this function never sees ground
/// truth.
pub fn self_label(model: &TcnModel, seq: &Sequence, delta: i64) -> Result<PseudoDataset> {
    let n = model.config().target_half_width as i64;
    if delta > 0 {
        return Err(Error::Invalid(format!(
            "self-labeling offset must be ≤ 0 (future estimates are never used as labels), got {delta}"
        )));
    }
    if delta < -n {
        return Err(Error::OutOfRange(format!(
            "offset {delta} outside the target window ±{n}"
        )));
    }
    let m = model.warm_up();
    let needed = m + delta.unsigned_abs() as usize;
    if seq.len() <= needed {
        return Err(Error::OutOfRange(format!(
            "sequence of length {} cannot be self-labeled at offset {delta}: needs more than {needed} samples",
            seq.len()
        )));
    }
    let stripped = seq.without_labels();
    let estimates = predict_sequence(model, &stripped)?;
    let mut pairs = Vec::new();
    for est in &estimates {
        let idx = est.anchor() as i64 + delta;
        if idx >= m as i64 {
            pairs.push((idx as usize, est.argmax_at(delta)));
        }
    }
    PseudoDataset::new(stripped, pairs, delta, m)
}

/// Fraction of pseudo-labels matching the hidden ground truth of the
/// original sequence. Diagnostic only: the labeling itself never sees
/// the truth.
pub fn pseudo_accuracy(pseudo: &PseudoDataset, original: &Sequence) -> Result<f64> {
    if original.len() != pseudo.sequence().len() {
        return Err(Error::Shape(format!(
            "original sequence has length {}, pseudo-labeled one {}",
            original.len(),
            pseudo.sequence().len()
        )));
    }
    let hits = pseudo
        .pairs()
        .iter()
        .filter(|&&(idx, label)| original.label(idx) == label)
        .count();
    Ok(hits as f64 / pseudo.len() as f64)
}

/// Fine-tuning schedule.
#[derive(Debug, Clone)]
pub struct FineTuneConfig {
    /// Warm-start epochs over base ∪ additions.
    pub epochs: usize,
    /// Multiplier on the model's original learning rate.
    pub lr_scale: f64,
    /// Fraction of the base corpus's chunks replayed per epoch; the
    /// added sequences are always fully visited.
    pub base_replay_fraction: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> FineTuneConfig {
        FineTuneConfig {
            epochs: 5,
            lr_scale: 0.3,
            base_replay_fraction: 1.0,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Invalid("fine-tuning needs at least one epoch".into()));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::Invalid("lr_scale must be positive and finite".into()));
        }
        if !(0.0..=1.0).contains(&self.base_replay_fraction) {
            return Err(Error::Invalid("base_replay_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }

    fn options_for(&self, model: &TcnModel) -> TrainOptions {
        let c = model.config();
        TrainOptions {
            epochs: self.epochs,
            learning_rate: c.learning_rate * self.lr_scale,
            batch_size: c.batch_size,
            l2_weight: c.l2_weight,
            dropout: c.dropout,
            seed: derive_seed(self.seed, 0xf17e),
        }
    }
}

/// Continues training from the model's current parameters on the base
/// corpus plus pseudo-labeled sequences.
///
/// Pseudo-labeled windows contribute to the loss only at offsets whose
/// true index carries a pseudo-label; every other row is masked out.
/// Normalization statistics are kept from the base training.
pub fn fine_tune(
    model: &TcnModel,
    base: &Dataset,
    pseudo: &[PseudoDataset],
    config: &FineTuneConfig,
) -> Result<TcnModel> {
    if pseudo.is_empty() || pseudo.iter().all(|p| p.is_empty()) {
        return Err(Error::Invalid("fine-tuning needs a non-empty pseudo-label set".into()));
    }
    let additions = pseudo
        .iter()
        .map(|p| SupervisedSeq::masked(p.sequence(), p.pairs(), model))
        .collect::<Result<Vec<SupervisedSeq>>>()?;
    fine_tune_corpus(model, base, additions, config)
}

/// Ground-truth variant: the added sequences keep their labels and
/// supervise every offset, exactly like base training data.
pub fn fine_tune_supervised(
    model: &TcnModel,
    base: &Dataset,
    labeled: &[Sequence],
    config: &FineTuneConfig,
) -> Result<TcnModel> {
    if labeled.is_empty() {
        return Err(Error::Invalid("fine-tuning needs at least one added sequence".into()));
    }
    let additions: Vec<SupervisedSeq> = labeled
        .iter()
        .filter(|s| s.len() > model.warm_up())
        .map(|s| SupervisedSeq::full(s, model))
        .collect();
    if additions.is_empty() {
        return Err(Error::Invalid("every added sequence is shorter than the warm-up".into()));
    }
    fine_tune_corpus(model, base, additions, config)
}

fn fine_tune_corpus(
    model: &TcnModel,
    base: &Dataset,
    additions: Vec<SupervisedSeq>,
    config: &FineTuneConfig,
) -> Result<TcnModel> {
    config.validate()?;
    let mut corpus: Vec<SupervisedSeq> = base
        .sequences()
        .iter()
        .filter(|s| s.len() > model.warm_up())
        .map(|s| SupervisedSeq::full(s, model).with_replay_fraction(config.base_replay_fraction))
        .collect();
    corpus.extend(additions);
    let mut tuned = model.clone();
    fit(&mut tuned, &corpus, &ClassWeights::uniform(), &config.options_for(model))?;
    Ok(tuned)
}

/// How newly collected sequences get their labels in the day protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelingMode {
    /// An expert labels the new sequences (upper bound).
    GroundTruth,
    /// The deployed model labels them in hindsight.
    SelfLabel,
}

impl std::fmt::Display for LabelingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelingMode::GroundTruth => "ground_truth",
            LabelingMode::SelfLabel => "self_label",
        })
    }
}

/// The six orders in which the three day-pairs can be visited.
pub const PAIR_ORDERINGS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Everything the day protocol needs besides the data.
#[derive(Debug, Clone)]
pub struct ProtocolOptions {
    /// Architecture and base-training hyperparameters.
    pub config: TcnConfig,
    pub fine_tune: FineTuneConfig,
    /// Self-labeling offset, ≤ 0.
    pub delta: i64,
    /// How many of the six pair orderings to simulate.
    pub n_permutations: usize,
    /// Reuse an already-trained day-0 model (must match `config`);
    /// `None` trains one from the other users' sequences.
    pub day0_model: Option<TcnModel>,
}

/// Aggregated outcome of one protocol day across permutation runs.
#[derive(Debug, Clone)]
pub struct DayReport {
    /// 0 (no adaptation), 1 (one pair added), or 2 (both pairs added).
    pub day: usize,
    pub mode: LabelingMode,
    /// Mean of `run_aurocs`.
    pub mean_auroc: f64,
    /// Offset-0 multiclass AUROC of each permutation run, in run order.
    pub run_aurocs: Vec<f64>,
    /// Mean accuracy of the labels added this day against hidden ground
    /// truth; `None` on day 0 and in ground-truth mode.
    pub pseudo_accuracy: Option<f64>,
}

/// Offset-0 multiclass AUROC of a model over a set of sequences.
fn offset_zero_auroc(model: &TcnModel, seqs: &[&Sequence]) -> Result<f64> {
    let mut samples = Vec::new();
    for seq in seqs {
        for est in predict_sequence(model, seq)? {
            samples.push(ScoredSample {
                true_class: seq.label(est.anchor()),
                probs: est.at_offset(0),
            });
        }
    }
    auroc_multiclass(&samples)
}

/// Simulates a three-day deployment for one new user.
///
/// The user's six sequences are shuffled into three fixed pairs by
/// `permutation_seed`; each simulated run visits the pairs in one of
/// the [`PAIR_ORDERINGS`]. Per run: day 0 evaluates the base model
/// (trained on everyone else) on the first pair; day 1 adapts to that
/// pair — labeled per `mode` — and evaluates on the second; day 2
/// additionally adapts to the second pair and evaluates on the third.
/// Adaptation warm-starts from the previous day's model and always
/// carries the accumulated added pairs. Returns one report per day
/// aggregating all runs.
pub fn three_day_protocol(
    cohort: &Dataset,
    new_user: u32,
    mode: LabelingMode,
    permutation_seed: u64,
    options: &ProtocolOptions,
) -> Result<Vec<DayReport>> {
    use rand::seq::SliceRandom;

    options.config.validate()?;
    options.fine_tune.validate()?;
    let n = options.config.target_half_width as i64;
    if options.delta > 0 || options.delta < -n {
        return Err(Error::Invalid(format!(
            "protocol labeling offset must lie in [-{n}, 0], got {}",
            options.delta
        )));
    }
    if options.n_permutations == 0 || options.n_permutations > PAIR_ORDERINGS.len() {
        return Err(Error::Invalid(format!(
            "n_permutations must lie in 1..={}",
            PAIR_ORDERINGS.len()
        )));
    }

    let (user_seqs, rest) = cohort.split_user(new_user);
    if user_seqs.len() != 6 {
        return Err(Error::Protocol(format!(
            "the new user must contribute exactly 6 sequences, found {}",
            user_seqs.len()
        )));
    }
    let base = Dataset::new(rest)?;
    if base.user_ids().len() < 2 {
        return Err(Error::Protocol(
            "the day protocol needs at least two base users".into(),
        ));
    }

    let day0 = match &options.day0_model {
        Some(m) => {
            if m.config() != &options.config {
                return Err(Error::Protocol(
                    "provided day-0 model was trained with a different configuration".into(),
                ));
            }
            m.clone()
        }
        None => train(&base, &options.config)?.0,
    };

    let mut order: Vec<usize> = (0..6).collect();
    let mut rng = ChaChaSeeder::seed(permutation_seed);
    order.shuffle(&mut rng);
    let pair_at = |p: usize| -> [&Sequence; 2] {
        [&user_seqs[order[2 * p]], &user_seqs[order[2 * p + 1]]]
    };

    struct RunOutcome {
        aurocs: [f64; 3],
        label_acc: [Option<f64>; 3],
    }

    let outcomes: Vec<RunOutcome> = PAIR_ORDERINGS[..options.n_permutations]
        .par_iter()
        .enumerate()
        .map(|(run, ordering)| -> Result<RunOutcome> {
            let tested: Vec<[&Sequence; 2]> = ordering.iter().map(|&p| pair_at(p)).collect();
            let auroc0 = offset_zero_auroc(&day0, &tested[0])?;

            let mut aurocs = [auroc0, 0.0, 0.0];
            let mut label_acc: [Option<f64>; 3] = [None, None, None];
            let mut current = day0.clone();
            // labels accumulate across days
            let mut pseudo_sets: Vec<PseudoDataset> = Vec::new();
            let mut labeled_seqs: Vec<Sequence> = Vec::new();
            for day in 1..=2usize {
                let added = &tested[day - 1];
                let ft = FineTuneConfig {
                    seed: derive_seed(options.fine_tune.seed, (run * 8 + day) as u64),
                    ..options.fine_tune.clone()
                };
                current = match mode {
                    LabelingMode::SelfLabel => {
                        let mut acc = 0.0;
                        for seq in added {
                            let pseudo = self_label(&current, seq, options.delta)?;
                            acc += pseudo_accuracy(&pseudo, seq)?;
                            pseudo_sets.push(pseudo);
                        }
                        label_acc[day] = Some(acc / added.len() as f64);
                        fine_tune(&current, &base, &pseudo_sets, &ft)?
                    }
                    LabelingMode::GroundTruth => {
                        labeled_seqs.extend(added.iter().map(|s| (*s).clone()));
                        fine_tune_supervised(&current, &base, &labeled_seqs, &ft)?
                    }
                };
                aurocs[day] = offset_zero_auroc(&current, &tested[day])?;
            }
            Ok(RunOutcome { aurocs, label_acc })
        })
        .collect::<Result<Vec<RunOutcome>>>()?;

    let reports = (0..3)
        .map(|day| {
            let run_aurocs: Vec<f64> = outcomes.iter().map(|o| o.aurocs[day]).collect();
            let mean_auroc = run_aurocs.iter().sum::<f64>() / run_aurocs.len() as f64;
            let accs: Vec<f64> = outcomes.iter().filter_map(|o| o.label_acc[day]).collect();
            let pseudo_accuracy = if accs.is_empty() {
                None
            } else {
                Some(accs.iter().sum::<f64>() / accs.len() as f64)
            };
            DayReport {
                day,
                mode,
                mean_auroc,
                run_aurocs,
                pseudo_accuracy,
            }
        })
        .collect();
    Ok(reports)
}

/// Seeding shim: keeps the protocol's permutation stream independent of
/// the training and fine-tuning streams.
struct ChaChaSeeder;

impl ChaChaSeeder {
    fn seed(permutation_seed: u64) -> rand_chacha::ChaCha12Rng {
        use rand_chacha::rand_core::SeedableRng;
        rand_chacha::ChaCha12Rng::seed_from_u64(derive_seed(permutation_seed, 0x3da7))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureFrame;
    use crate::tcn::evaluate_loss;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_config() -> TcnConfig {
        TcnConfig {
            n_blocks: 1,
            convs_per_block: 2,
            kernel_size: 3,
            dilations: vec![1],
            channels: vec![6],
            target_half_width: 2,
            learning_rate: 1e-2,
            batch_size: 16,
            epochs: 4,
            ..TcnConfig::default()
        }
    }

    fn random_labeled_seq(user: u32, seed: u64, len: usize) -> Sequence {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let frames: Vec<FeatureFrame> = (0..len)
            .map(|_| FeatureFrame::new(rng.gen_range(-30.0..60.0), rng.gen_range(-30.0..60.0)).unwrap())
            .collect();
        let labels: Vec<WalkingMode> = (0..len)
            .map(|i| {
                [
                    WalkingMode::StairAscent,
                    WalkingMode::LevelGround,
                    WalkingMode::StairDescent,
                ][(i / 7) % 3]
            })
            .collect();
        Sequence::new(user, frames, labels, false).unwrap()
    }

    #[test]
    fn self_label_at_offset_zero_is_the_current_argmax() {
        let config = tiny_config();
        let model = TcnModel::init(&config, 5).unwrap();
        let seq = random_labeled_seq(1, 2, 40);
        let pseudo = self_label(&model, &seq, 0).unwrap();
        let m = model.warm_up();
        let stripped = seq.without_labels();
        assert_eq!(pseudo.delta(), 0);
        let indices: Vec<usize> = pseudo.pairs().iter().map(|&(i, _)| i).collect();
        let expect: Vec<usize> = (m..seq.len()).collect();
        assert_eq!(indices, expect);
        for &(idx, label) in pseudo.pairs() {
            let est = crate::tcn::predict(&model, &stripped, idx).unwrap();
            assert_eq!(label, est.argmax_at(0));
        }
    }

    #[test]
    fn self_label_covers_exactly_the_offset_range() {
        let config = tiny_config();
        let model = TcnModel::init(&config, 6).unwrap();
        let seq = random_labeled_seq(1, 3, 30);
        let m = model.warm_up();
        for delta in [-2i64, -1, 0] {
            let pseudo = self_label(&model, &seq, delta).unwrap();
            let indices: Vec<usize> = pseudo.pairs().iter().map(|&(i, _)| i).collect();
            let last = (seq.len() as i64 - 1 + delta) as usize;
            let expect: Vec<usize> = (m..=last).collect();
            assert_eq!(indices, expect, "delta {delta}");
        }
    }

    #[test]
    fn self_label_never_reads_ground_truth() {
        let config = tiny_config();
        let model = TcnModel::init(&config, 7).unwrap();
        let seq = random_labeled_seq(1, 4, 35);
        let relabeled = Sequence::new(
            seq.user_id(),
            seq.frames().to_vec(),
            vec![WalkingMode::StairAscent; seq.len()],
            seq.assist_on(),
        )
        .unwrap();
        let a = self_label(&model, &seq, -1).unwrap();
        let b = self_label(&model, &relabeled, -1).unwrap();
        assert_eq!(a.pairs(), b.pairs());
    }

    #[test]
    fn self_label_rejects_bad_offsets_and_short_sequences() {
        let config = tiny_config();
        let model = TcnModel::init(&config, 8).unwrap();
        let seq = random_labeled_seq(1, 5, 30);
        assert!(self_label(&model, &seq, 1).is_err());
        assert!(self_label(&model, &seq, -3).is_err()); // beyond ±N=2
        let short = random_labeled_seq(1, 6, model.warm_up() + 1);
        assert!(self_label(&model, &short, -1).is_err());
        assert!(self_label(&model, &short, 0).is_ok());
    }

    #[test]
    fn saturated_model_labels_match_hidden_truth() {
        // train on one class until saturated: its pseudo-labels then
        // equal the (constant) hidden ground truth everywhere
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut make = |len: usize| {
            let frames: Vec<FeatureFrame> = (0..len)
                .map(|_| FeatureFrame::new(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)).unwrap())
                .collect();
            Sequence::new(3, frames, vec![WalkingMode::StairDescent; len], false).unwrap()
        };
        let dataset = Dataset::new(vec![make(100), make(100)]).unwrap();
        let config = TcnConfig {
            epochs: 25,
            learning_rate: 2e-2,
            seed: 11,
            ..tiny_config()
        };
        let (model, _) = train(&dataset, &config).unwrap();
        let held_out = make(60);
        let pseudo = self_label(&model, &held_out, 0).unwrap();
        assert!(pseudo.pairs().iter().all(|&(_, l)| l == WalkingMode::StairDescent));
        assert_eq!(pseudo_accuracy(&pseudo, &held_out).unwrap(), 1.0);
    }

    fn base_and_new() -> (Dataset, Sequence, TcnModel) {
        let base = Dataset::new(vec![
            random_labeled_seq(1, 21, 80),
            random_labeled_seq(2, 22, 80),
        ])
        .unwrap();
        let config = TcnConfig { seed: 31, ..tiny_config() };
        let (model, _) = train(&base, &config).unwrap();
        let new_seq = random_labeled_seq(9, 23, 60);
        (base, new_seq, model)
    }

    #[test]
    fn fine_tune_requires_labels() {
        let (base, _, model) = base_and_new();
        let cfg = FineTuneConfig::default();
        assert!(fine_tune(&model, &base, &[], &cfg).is_err());
        assert!(fine_tune_supervised(&model, &base, &[], &cfg).is_err());
    }

    #[test]
    fn fine_tune_is_deterministic_and_reduces_combined_loss() {
        let (base, new_seq, model) = base_and_new();
        let pseudo = self_label(&model, &new_seq, -1).unwrap();
        let cfg = FineTuneConfig {
            epochs: 3,
            seed: 17,
            ..FineTuneConfig::default()
        };
        let tuned_a = fine_tune(&model, &base, std::slice::from_ref(&pseudo), &cfg).unwrap();
        let tuned_b = fine_tune(&model, &base, std::slice::from_ref(&pseudo), &cfg).unwrap();
        let bits = |m: &TcnModel| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&tuned_a), bits(&tuned_b));
        assert_ne!(bits(&tuned_a), bits(&model), "parameters actually moved");

        // loss over base ∪ pseudo decreases from the warm start
        let mut corpus: Vec<SupervisedSeq> = base
            .sequences()
            .iter()
            .map(|s| SupervisedSeq::full(s, &model))
            .collect();
        corpus.push(SupervisedSeq::masked(pseudo.sequence(), pseudo.pairs(), &model).unwrap());
        let before = evaluate_loss(&model, &corpus, &ClassWeights::uniform()).unwrap();
        let after = evaluate_loss(&tuned_a, &corpus, &ClassWeights::uniform()).unwrap();
        assert!(
            after < before,
            "fine-tuning should reduce combined training loss: {after} vs {before}"
        );
    }

    fn protocol_cohort() -> Dataset {
        let mut seqs = Vec::new();
        for user in 1..=3u32 {
            for s in 0..6 {
                seqs.push(random_labeled_seq(user, 100 + user as u64 * 10 + s, 70));
            }
        }
        Dataset::new(seqs).unwrap()
    }

    #[test]
    fn pair_orderings_are_the_six_permutations() {
        let mut seen: Vec<[usize; 3]> = PAIR_ORDERINGS.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 6);
        for o in PAIR_ORDERINGS {
            let mut s = o;
            s.sort();
            assert_eq!(s, [0, 1, 2]);
        }
        // five users at the full six orderings: thirty runs per mode
        assert_eq!(5 * PAIR_ORDERINGS.len(), 30);
    }

    #[test]
    fn protocol_shape_and_determinism() {
        let cohort = protocol_cohort();
        let config = TcnConfig { epochs: 2, seed: 41, ..tiny_config() };
        let (day0, _) = {
            let (_, rest) = cohort.split_user(1);
            train(&Dataset::new(rest).unwrap(), &config).unwrap()
        };
        let options = ProtocolOptions {
            config,
            fine_tune: FineTuneConfig {
                epochs: 1,
                base_replay_fraction: 0.5,
                seed: 3,
                ..FineTuneConfig::default()
            },
            delta: -1,
            n_permutations: 2,
            day0_model: Some(day0),
        };
        let reports = three_day_protocol(&cohort, 1, LabelingMode::SelfLabel, 7, &options).unwrap();
        assert_eq!(reports.len(), 3);
        for (day, r) in reports.iter().enumerate() {
            assert_eq!(r.day, day);
            assert_eq!(r.mode, LabelingMode::SelfLabel);
            assert_eq!(r.run_aurocs.len(), 2);
            for a in &r.run_aurocs {
                assert!((0.0..=1.0).contains(a));
            }
            let mean = r.run_aurocs.iter().sum::<f64>() / 2.0;
            assert_eq!(r.mean_auroc, mean);
            if day == 0 {
                assert!(r.pseudo_accuracy.is_none());
            } else {
                let acc = r.pseudo_accuracy.expect("self-label days report accuracy");
                assert!((0.0..=1.0).contains(&acc));
            }
        }

        let again = three_day_protocol(&cohort, 1, LabelingMode::SelfLabel, 7, &options).unwrap();
        for (a, b) in reports.iter().zip(&again) {
            assert_eq!(a.run_aurocs, b.run_aurocs);
        }

        let gt = three_day_protocol(&cohort, 1, LabelingMode::GroundTruth, 7, &options).unwrap();
        assert!(gt.iter().all(|r| r.pseudo_accuracy.is_none()));
        // day 0 shares the same model and test pairs in both modes
        assert_eq!(gt[0].run_aurocs, reports[0].run_aurocs);
    }

    #[test]
    fn protocol_rejects_malformed_cohorts() {
        let cohort = protocol_cohort();
        let config = tiny_config();
        let options = ProtocolOptions {
            config: config.clone(),
            fine_tune: FineTuneConfig::default(),
            delta: 0,
            n_permutations: 1,
            day0_model: None,
        };
        // user 9 does not exist -> zero sequences
        assert!(matches!(
            three_day_protocol(&cohort, 9, LabelingMode::SelfLabel, 0, &options),
            Err(Error::Protocol(_))
        ));

        // a user with five sequences
        let mut seqs: Vec<Sequence> = cohort.sequences().to_vec();
        seqs.pop();
        let short = Dataset::new(seqs).unwrap();
        assert!(matches!(
            three_day_protocol(&short, 3, LabelingMode::SelfLabel, 0, &options),
            Err(Error::Protocol(_))
        ));

        // positive delta is a contract violation
        let bad = ProtocolOptions {
            delta: 1,
            ..options
        };
        assert!(three_day_protocol(&cohort, 1, LabelingMode::SelfLabel, 0, &bad).is_err());
    }
}
