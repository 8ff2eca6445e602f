//! Random-forest baseline.
//!
//! Handcrafted statistics over a fixed 60-sample window feed a forest
//! of CART-style trees that predicts only the current-time class — no
//! past or future offsets. It exists to be compared against the
//! network, so its leaves store class frequencies (soft voting) rather
//! than hard votes: AUROC needs scores.
//!
//! Everything is deterministic under the config seed: trees draw their
//! bootstrap samples and feature subsets from per-tree derived RNG
//! streams, so parallel training yields the same forest as sequential.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::binio;
use crate::data::{Dataset, Sequence};
use crate::derive_seed;
use crate::error::{Error, Result};

/// Number of window statistics: 6 per input signal.
pub const N_FEATURES: usize = 12;

/// Feature names in vector order, for report files.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "left_first",
    "left_last",
    "left_min",
    "left_max",
    "left_mean",
    "left_std",
    "right_first",
    "right_last",
    "right_min",
    "right_max",
    "right_mean",
    "right_std",
];

/// Per-window statistics: first, last, min, max, mean, population std
/// for each of the two signals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfFeatures {
    pub values: [f64; N_FEATURES],
}

/// Forest hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RfConfig {
    /// Input window length in samples; the classifier sees k−window+1…k.
    pub window: usize,
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features drawn per split; default ⌈√12⌉.
    pub features_per_split: usize,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> RfConfig {
        RfConfig {
            window: 60,
            n_trees: 100,
            max_depth: 12,
            min_samples_leaf: 5,
            features_per_split: 4,
            seed: 0,
        }
    }
}

impl RfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Invalid("window must be at least 2 samples".into()));
        }
        if self.n_trees == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(Error::Invalid("tree counts and limits must be positive".into()));
        }
        if self.features_per_split == 0 || self.features_per_split > N_FEATURES {
            return Err(Error::Invalid(format!(
                "features_per_split must be in 1..={N_FEATURES}"
            )));
        }
        Ok(())
    }

    /// Samples needed before the first prediction: `window − 1`.
    pub fn warm_up(&self) -> usize {
        self.window - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        probs: [f64; 3],
    },
}

/// One CART-style tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    fn predict(&self, x: &[f64; N_FEATURES]) -> [f64; 3] {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Leaf { probs } => return *probs,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

/// A trained forest.
#[derive(Debug, Clone, PartialEq)]
pub struct RfModel {
    config: RfConfig,
    trees: Vec<DecisionTree>,
}

impl RfModel {
    pub fn config(&self) -> &RfConfig {
        &self.config
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Samples needed before the first prediction.
    pub fn warm_up(&self) -> usize {
        self.config.warm_up()
    }
}

/// Window statistics at anchor `k` over the fixed 60-sample window.
///
/// `k` is the newest sample of the window, matching the network's
/// anchoring convention.
pub fn rf_features(seq: &Sequence, k: usize) -> Result<RfFeatures> {
    rf_features_with(seq, k, RfConfig::default().window)
}

/// Window statistics over a configurable window length.
pub fn rf_features_with(seq: &Sequence, k: usize, window: usize) -> Result<RfFeatures> {
    if k + 1 < window {
        return Err(Error::OutOfRange(format!(
            "anchor {k} is inside the {}-sample warm-up",
            window - 1
        )));
    }
    if k >= seq.len() {
        return Err(Error::OutOfRange(format!(
            "anchor {k} outside sequence of length {}",
            seq.len()
        )));
    }
    let start = k + 1 - window;
    let mut values = [0.0; N_FEATURES];
    for c in 0..2 {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for i in start..=k {
            let v = seq.frame(i).channel(c);
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        let mean = sum / window as f64;
        let mut var = 0.0;
        for i in start..=k {
            let d = seq.frame(i).channel(c) - mean;
            var += d * d;
        }
        let std = (var / window as f64).sqrt();
        let base = c * 6;
        values[base] = seq.frame(start).channel(c);
        values[base + 1] = seq.frame(k).channel(c);
        values[base + 2] = min;
        values[base + 3] = max;
        values[base + 4] = mean;
        values[base + 5] = std;
    }
    Ok(RfFeatures { values })
}

/// Trains a forest on every post-warm-up window of the dataset, labeled
/// with the current-time class.
pub fn rf_train(dataset: &Dataset, config: &RfConfig) -> Result<RfModel> {
    config.validate()?;
    let mut features: Vec<[f64; N_FEATURES]> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for seq in dataset.sequences() {
        if seq.len() < config.window {
            continue;
        }
        for k in config.warm_up()..seq.len() {
            features.push(rf_features_with(seq, k, config.window)?.values);
            labels.push(seq.label(k).index() as u8);
        }
    }
    if features.is_empty() {
        return Err(Error::Invalid(format!(
            "no training windows: every sequence is shorter than {} samples",
            config.window
        )));
    }
    train_on_features(&features, &labels, config)
}

/// Forest training over an explicit feature matrix; `rf_train` is this
/// plus window-feature extraction.
fn train_on_features(
    features: &[[f64; N_FEATURES]],
    labels: &[u8],
    config: &RfConfig,
) -> Result<RfModel> {
    let trees: Vec<DecisionTree> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 0x4f00_0000 + t as u64));
            grow_tree(features, labels, config, &mut rng)
        })
        .collect();
    Ok(RfModel {
        config: config.clone(),
        trees,
    })
}

/// Mean of the leaf class-probability vectors across all trees.
pub fn rf_predict(model: &RfModel, features: &RfFeatures) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for tree in &model.trees {
        let p = tree.predict(&features.values);
        for c in 0..3 {
            acc[c] += p[c];
        }
    }
    for v in acc.iter_mut() {
        *v /= model.trees.len() as f64;
    }
    acc
}

/// Current-time class probabilities at every valid anchor of a
/// sequence, in anchor order starting at the warm-up index.
pub fn rf_predict_sequence(model: &RfModel, seq: &Sequence) -> Result<Vec<[f64; 3]>> {
    if seq.len() < model.config.window {
        return Err(Error::OutOfRange(format!(
            "sequence of length {} is shorter than the {}-sample window",
            seq.len(),
            model.config.window
        )));
    }
    (model.config.warm_up()..seq.len())
        .map(|k| Ok(rf_predict(model, &rf_features_with(seq, k, model.config.window)?)))
        .collect()
}

/// The bootstrap draw of one tree: n indices sampled with replacement.
fn bootstrap_indices(n: usize, rng: &mut ChaCha12Rng) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..n) as u32).collect()
}

fn grow_tree(
    features: &[[f64; N_FEATURES]],
    labels: &[u8],
    config: &RfConfig,
    rng: &mut ChaCha12Rng,
) -> DecisionTree {
    let idx = bootstrap_indices(features.len(), rng);
    let mut nodes = Vec::new();
    build_node(features, labels, idx, 0, config, rng, &mut nodes);
    DecisionTree { nodes }
}

fn class_counts(labels: &[u8], idx: &[u32]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    for &i in idx {
        counts[labels[i as usize] as usize] += 1;
    }
    counts
}

fn leaf_from_counts(counts: [usize; 3]) -> Node {
    let total: usize = counts.iter().sum();
    let mut probs = [0.0; 3];
    for c in 0..3 {
        probs[c] = counts[c] as f64 / total as f64;
    }
    Node::Leaf { probs }
}

/// Gini-weighted split score `n − Σ_left c²/n_left − Σ_right c²/n_right`;
/// lower is better, and subtracting it from the node's own score gives
/// the impurity decrease.
fn split_score(left: &[usize; 3], n_left: f64, right: &[usize; 3], n_right: f64) -> f64 {
    let sq = |c: &[usize; 3]| c.iter().map(|&v| (v * v) as f64).sum::<f64>();
    (n_left + n_right) - sq(left) / n_left - sq(right) / n_right
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SplitCand {
    feature: usize,
    threshold: f64,
    score: f64,
}

/// Best split over the given feature subset, or `None` when no split
/// leaves `min_samples_leaf` on both sides. Ties are broken toward the
/// lowest feature index, then the lowest threshold, by scanning
/// features and thresholds in ascending order and only accepting strict
/// improvements.
fn best_split(
    features: &[[f64; N_FEATURES]],
    labels: &[u8],
    idx: &[u32],
    feats: &[usize],
    min_leaf: usize,
) -> Option<SplitCand> {
    let n = idx.len();
    let mut best: Option<SplitCand> = None;
    let mut pairs: Vec<(f64, u8)> = Vec::with_capacity(n);
    for &f in feats {
        pairs.clear();
        pairs.extend(idx.iter().map(|&i| (features[i as usize][f], labels[i as usize])));
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
        let mut left = [0usize; 3];
        let mut right = class_counts(labels, idx);
        for i in 1..n {
            let (prev_v, prev_c) = pairs[i - 1];
            left[prev_c as usize] += 1;
            right[prev_c as usize] -= 1;
            if pairs[i].0 <= prev_v {
                continue;
            }
            if i < min_leaf || n - i < min_leaf {
                continue;
            }
            let score = split_score(&left, i as f64, &right, (n - i) as f64);
            if best.is_none_or(|b| score < b.score) {
                best = Some(SplitCand {
                    feature: f,
                    threshold: (prev_v + pairs[i].0) / 2.0,
                    score,
                });
            }
        }
    }
    best
}

/// Draws `count` distinct feature indices, returned in ascending order
/// so the tie-break scan is well-defined.
fn sample_features(count: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..N_FEATURES).collect();
    for i in 0..count {
        let j = rng.gen_range(i..N_FEATURES);
        all.swap(i, j);
    }
    let mut picked = all[..count].to_vec();
    picked.sort_unstable();
    picked
}

fn build_node(
    features: &[[f64; N_FEATURES]],
    labels: &[u8],
    idx: Vec<u32>,
    depth: usize,
    config: &RfConfig,
    rng: &mut ChaCha12Rng,
    nodes: &mut Vec<Node>,
) -> u32 {
    let slot = nodes.len() as u32;
    nodes.push(Node::Leaf { probs: [0.0; 3] });

    let counts = class_counts(labels, &idx);
    let n = idx.len();
    let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
    let mut chosen = None;
    if !pure && depth < config.max_depth && n >= 2 * config.min_samples_leaf {
        let feats = sample_features(config.features_per_split, rng);
        if let Some(cand) = best_split(features, labels, &idx, &feats, config.min_samples_leaf) {
            let parent_score =
                n as f64 - counts.iter().map(|&v| (v * v) as f64).sum::<f64>() / n as f64;
            if cand.score < parent_score {
                chosen = Some(cand);
            }
        }
    }

    match chosen {
        None => {
            nodes[slot as usize] = leaf_from_counts(counts);
        }
        Some(cand) => {
            let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = idx
                .into_iter()
                .partition(|&i| features[i as usize][cand.feature] <= cand.threshold);
            let left = build_node(features, labels, left_idx, depth + 1, config, rng, nodes);
            let right = build_node(features, labels, right_idx, depth + 1, config, rng, nodes);
            nodes[slot as usize] = Node::Split {
                feature: cand.feature,
                threshold: cand.threshold,
                left,
                right,
            };
        }
    }
    slot
}

const MAGIC: &[u8; 4] = b"GMRF";
const VERSION: u32 = 1;

/// Writes a forest to a versioned, little-endian binary file.
pub fn save_forest(model: &RfModel, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    binio::write_u32(&mut w, VERSION)?;
    let c = &model.config;
    binio::write_u64(&mut w, c.window as u64)?;
    binio::write_u64(&mut w, c.n_trees as u64)?;
    binio::write_u64(&mut w, c.max_depth as u64)?;
    binio::write_u64(&mut w, c.min_samples_leaf as u64)?;
    binio::write_u64(&mut w, c.features_per_split as u64)?;
    binio::write_u64(&mut w, c.seed)?;
    binio::write_u64(&mut w, model.trees.len() as u64)?;
    for tree in &model.trees {
        binio::write_u64(&mut w, tree.nodes.len() as u64)?;
        for node in &tree.nodes {
            match node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    binio::write_u32(&mut w, 0)?;
                    binio::write_u32(&mut w, *feature as u32)?;
                    binio::write_f64(&mut w, *threshold)?;
                    binio::write_u32(&mut w, *left)?;
                    binio::write_u32(&mut w, *right)?;
                }
                Node::Leaf { probs } => {
                    binio::write_u32(&mut w, 1)?;
                    for p in probs {
                        binio::write_f64(&mut w, *p)?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a forest back, validating structure and leaf probabilities.
pub fn load_forest(path: &Path) -> Result<RfModel> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    binio::expect_magic(&mut r, MAGIC)?;
    let version = binio::read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::ModelFile(format!(
            "unsupported forest file version {version}, expected {VERSION}"
        )));
    }
    let config = RfConfig {
        window: binio::read_u64(&mut r)? as usize,
        n_trees: binio::read_u64(&mut r)? as usize,
        max_depth: binio::read_u64(&mut r)? as usize,
        min_samples_leaf: binio::read_u64(&mut r)? as usize,
        features_per_split: binio::read_u64(&mut r)? as usize,
        seed: binio::read_u64(&mut r)?,
    };
    config
        .validate()
        .map_err(|e| Error::ModelFile(format!("stored config invalid: {e}")))?;
    let n_trees = binio::read_u64(&mut r)? as usize;
    if n_trees > 1 << 20 {
        return Err(Error::ModelFile(format!("implausible tree count {n_trees}")));
    }
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let n_nodes = binio::read_u64(&mut r)? as usize;
        if n_nodes == 0 || n_nodes > 1 << 28 {
            return Err(Error::ModelFile(format!("implausible node count {n_nodes}")));
        }
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            match binio::read_u32(&mut r)? {
                0 => {
                    let feature = binio::read_u32(&mut r)? as usize;
                    let threshold = binio::read_f64(&mut r)?;
                    let left = binio::read_u32(&mut r)?;
                    let right = binio::read_u32(&mut r)?;
                    if feature >= N_FEATURES
                        || left as usize >= n_nodes
                        || right as usize >= n_nodes
                        || !threshold.is_finite()
                    {
                        return Err(Error::ModelFile("corrupt split node".into()));
                    }
                    nodes.push(Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    });
                }
                1 => {
                    let mut probs = [0.0; 3];
                    for p in probs.iter_mut() {
                        *p = binio::read_f64(&mut r)?;
                    }
                    let sum: f64 = probs.iter().sum();
                    if !(sum - 1.0).abs().le(&1e-9) || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                        return Err(Error::ModelFile("corrupt leaf probabilities".into()));
                    }
                    nodes.push(Node::Leaf { probs });
                }
                tag => {
                    return Err(Error::ModelFile(format!("unknown node tag {tag}")));
                }
            }
        }
        trees.push(DecisionTree { nodes });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::ModelFile("trailing bytes after trees".into()));
    }
    Ok(RfModel { config, trees })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureFrame, WalkingMode};

    fn seq_from_channels(left: Vec<f64>, right: Vec<f64>, label: WalkingMode) -> Sequence {
        let frames: Vec<FeatureFrame> = left
            .into_iter()
            .zip(right)
            .map(|(l, r)| FeatureFrame::new(l, r).unwrap())
            .collect();
        let n = frames.len();
        Sequence::new(0, frames, vec![label; n], false).unwrap()
    }

    #[test]
    fn features_of_constant_signal() {
        let seq = seq_from_channels(vec![7.0; 80], vec![7.0; 80], WalkingMode::LevelGround);
        let f = rf_features(&seq, 70).unwrap();
        for c in 0..2 {
            let b = c * 6;
            assert_eq!(&f.values[b..b + 5], &[7.0; 5]);
            assert_eq!(f.values[b + 5], 0.0);
        }
    }

    #[test]
    fn features_of_linear_ramp() {
        let left: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let seq = seq_from_channels(left, vec![1.0; 60], WalkingMode::LevelGround);
        let f = rf_features(&seq, 59).unwrap();
        assert_eq!(f.values[0], 0.0); // first
        assert_eq!(f.values[1], 59.0); // last
        assert_eq!(f.values[2], 0.0); // min
        assert_eq!(f.values[3], 59.0); // max
        assert!((f.values[4] - 29.5).abs() < 1e-12); // mean
        // population std of 0..=59: sqrt((60^2 - 1)/12)
        assert!((f.values[5] - 17.3181).abs() < 1e-4);
        assert!((f.values[5] - (3599.0f64 / 12.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn features_respect_window_order_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let left: Vec<f64> = (0..200).map(|_| rng.gen_range(-50.0..90.0)).collect();
        let right: Vec<f64> = (0..200).map(|_| rng.gen_range(-50.0..90.0)).collect();
        let seq = seq_from_channels(left, right, WalkingMode::StairAscent);
        for k in [59, 100, 199] {
            let f = rf_features(&seq, k).unwrap();
            for c in 0..2 {
                let b = c * 6;
                let (min, max, mean, std) =
                    (f.values[b + 2], f.values[b + 3], f.values[b + 4], f.values[b + 5]);
                assert!(min <= mean && mean <= max);
                assert!(std >= 0.0);
                assert!(f.values[b] >= min && f.values[b] <= max);
                assert!(f.values[b + 1] >= min && f.values[b + 1] <= max);
            }
        }
    }

    #[test]
    fn features_enforce_warm_up_and_range() {
        let seq = seq_from_channels(vec![0.0; 70], vec![0.0; 70], WalkingMode::LevelGround);
        assert!(matches!(rf_features(&seq, 58), Err(Error::OutOfRange(_))));
        assert!(rf_features(&seq, 59).is_ok());
        assert!(matches!(rf_features(&seq, 70), Err(Error::OutOfRange(_))));
    }

    /// Labeled feature vectors shaped into a dataset the trainer accepts:
    /// each sample becomes one constant-valued window so the window mean
    /// carries the cluster.
    fn cluster_dataset(centers: &[(f64, WalkingMode)], per_cluster: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut seqs = Vec::new();
        for &(center, label) in centers {
            for _ in 0..per_cluster {
                let v = center + rng.gen_range(-0.5..0.5);
                seqs.push(seq_from_channels(vec![v; 60], vec![-v; 60], label));
            }
        }
        Dataset::new(seqs).unwrap()
    }

    #[test]
    fn single_class_data_trains_a_constant_forest() {
        let data = cluster_dataset(&[(10.0, WalkingMode::StairDescent)], 12, 5);
        let config = RfConfig {
            n_trees: 10,
            ..RfConfig::default()
        };
        let model = rf_train(&data, &config).unwrap();
        for tree in &model.trees {
            for node in &tree.nodes {
                match node {
                    Node::Leaf { probs } => assert_eq!(*probs, [0.0, 0.0, 1.0]),
                    Node::Split { .. } => panic!("pure data should not split"),
                }
            }
        }
        let f = rf_features(&data.sequences()[0], 59).unwrap();
        assert_eq!(rf_predict(&model, &f), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn separable_clusters_reach_full_training_accuracy() {
        let data = cluster_dataset(
            &[
                (40.0, WalkingMode::StairAscent),
                (0.0, WalkingMode::LevelGround),
                (-40.0, WalkingMode::StairDescent),
            ],
            10,
            6,
        );
        let config = RfConfig {
            n_trees: 15,
            min_samples_leaf: 1,
            ..RfConfig::default()
        };
        let model = rf_train(&data, &config).unwrap();
        for seq in data.sequences() {
            let f = rf_features(seq, 59).unwrap();
            let p = rf_predict(&model, &f);
            let pred = (0..3).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
            assert_eq!(pred, seq.label(59).index());
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let data = cluster_dataset(
            &[
                (10.0, WalkingMode::StairAscent),
                (-10.0, WalkingMode::LevelGround),
            ],
            8,
            7,
        );
        let config = RfConfig {
            n_trees: 8,
            seed: 99,
            ..RfConfig::default()
        };
        let a = rf_train(&data, &config).unwrap();
        let b = rf_train(&data, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prediction_averages_leaf_vectors() {
        let tree = |probs: [f64; 3]| DecisionTree {
            nodes: vec![Node::Leaf { probs }],
        };
        let model = RfModel {
            config: RfConfig::default(),
            trees: vec![tree([1.0, 0.0, 0.0])],
        };
        let f = RfFeatures { values: [0.0; 12] };
        assert_eq!(rf_predict(&model, &f), [1.0, 0.0, 0.0]);

        let model = RfModel {
            config: RfConfig::default(),
            trees: vec![tree([1.0, 0.0, 0.0]), tree([0.0, 1.0, 0.0])],
        };
        assert_eq!(rf_predict(&model, &f), [0.5, 0.5, 0.0]);
    }

    /// Exhaustive O(n²) split search used as an oracle: every feature,
    /// every boundary between distinct sorted values, counts rebuilt
    /// from scratch per candidate.
    fn oracle_split(
        features: &[[f64; N_FEATURES]],
        labels: &[u8],
        idx: &[u32],
        feats: &[usize],
        min_leaf: usize,
    ) -> Option<SplitCand> {
        let mut best: Option<SplitCand> = None;
        for &f in feats {
            let mut values: Vec<f64> = idx.iter().map(|&i| features[i as usize][f]).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            values.dedup();
            for w in values.windows(2) {
                let threshold = (w[0] + w[1]) / 2.0;
                let mut left = [0usize; 3];
                let mut right = [0usize; 3];
                for &i in idx {
                    if features[i as usize][f] <= threshold {
                        left[labels[i as usize] as usize] += 1;
                    } else {
                        right[labels[i as usize] as usize] += 1;
                    }
                }
                let nl: usize = left.iter().sum();
                let nr: usize = right.iter().sum();
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let score = split_score(&left, nl as f64, &right, nr as f64);
                if best.is_none_or(|b| score < b.score) {
                    best = Some(SplitCand {
                        feature: f,
                        threshold,
                        score,
                    });
                }
            }
        }
        best
    }

    #[test]
    fn split_search_matches_exhaustive_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let feats: Vec<usize> = (0..N_FEATURES).collect();
        for trial in 0..60 {
            let n = rng.gen_range(2..=200usize);
            let features: Vec<[f64; N_FEATURES]> = (0..n)
                .map(|_| {
                    let mut row = [0.0; N_FEATURES];
                    for v in row.iter_mut() {
                        // coarse grid to force plenty of ties
                        *v = rng.gen_range(-3..=3i32) as f64;
                    }
                    row
                })
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3) as u8).collect();
            let idx: Vec<u32> = (0..n as u32).collect();
            let min_leaf = rng.gen_range(1..=3usize);
            let fast = best_split(&features, &labels, &idx, &feats, min_leaf);
            let slow = oracle_split(&features, &labels, &idx, &feats, min_leaf);
            match (fast, slow) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert_eq!(a.feature, b.feature, "trial {trial}");
                    assert_eq!(a.threshold, b.threshold, "trial {trial}");
                    assert_eq!(a.score, b.score, "trial {trial}");
                }
                other => panic!("trial {trial}: mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn monotone_feature_transform_preserves_per_tree_predictions() {
        // map every feature column through x³ + 5x: strictly increasing
        // and exact on the integer grid, so sample order and ties within
        // each feature are unchanged and every refit split partitions
        // the node's samples identically. Points from a tree's own
        // bootstrap sample never fall strictly inside a split's value
        // gap on their path, so each tree's predictions on its own
        // sample are invariant. (Out-of-bag points can land inside a
        // gap, where the two midpoint thresholds may legitimately
        // disagree, so the forest average is only invariant per tree.)
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let n = 90;
        let features: Vec<[f64; N_FEATURES]> = (0..n)
            .map(|_| {
                let mut row = [0.0; N_FEATURES];
                for v in row.iter_mut() {
                    *v = rng.gen_range(-4..=4i32) as f64;
                }
                row
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3) as u8).collect();
        let transformed: Vec<[f64; N_FEATURES]> = features
            .iter()
            .map(|row| {
                let mut out = [0.0; N_FEATURES];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = v * v * v + 5.0 * v;
                }
                out
            })
            .collect();
        let config = RfConfig {
            n_trees: 12,
            seed: 4,
            min_samples_leaf: 2,
            ..RfConfig::default()
        };
        let raw = train_on_features(&features, &labels, &config).unwrap();
        let tf = train_on_features(&transformed, &labels, &config).unwrap();
        for (t, (tree_raw, tree_tf)) in raw.trees.iter().zip(&tf.trees).enumerate() {
            // regenerate this tree's bootstrap draw from its derived seed
            let mut tree_rng =
                ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 0x4f00_0000 + t as u64));
            let idx = bootstrap_indices(n, &mut tree_rng);
            for &i in &idx {
                let p_raw = tree_raw.predict(&features[i as usize]);
                let p_tf = tree_tf.predict(&transformed[i as usize]);
                assert_eq!(p_raw, p_tf, "tree {t}, sample {i}");
            }
        }
    }

    #[test]
    fn forest_round_trips_through_file() {
        let data = cluster_dataset(
            &[
                (5.0, WalkingMode::StairAscent),
                (-5.0, WalkingMode::StairDescent),
            ],
            8,
            9,
        );
        let config = RfConfig {
            n_trees: 6,
            ..RfConfig::default()
        };
        let model = rf_train(&data, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest.gmrf");
        save_forest(&model, &path).unwrap();
        let loaded = load_forest(&path).unwrap();
        assert_eq!(loaded, model);

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.gmrf");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_forest(&cut), Err(Error::ModelFile(_))));
    }
}
