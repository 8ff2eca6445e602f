//! Domain types shared by every other module: walking modes, feature
//! frames, labeled sequences, and the sliding input/target windows the
//! classifier consumes and produces.
//!
//! All types here are immutable after construction and safe to share
//! across threads; window extraction is a pure function.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::SAMPLE_RATE_HZ;

/// Number of input channels: left and right thigh sagittal angles.
pub const INPUT_CHANNELS: usize = 2;

/// The three walking modes the classifier distinguishes.
///
/// The integer encoding (SA=0, LG=1, SD=2) is stable and used everywhere:
/// one-hot vectors, probability rows, confusion matrices, file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WalkingMode {
    /// Stair ascent.
    StairAscent,
    /// Level ground.
    LevelGround,
    /// Stair descent.
    StairDescent,
}

impl WalkingMode {
    pub const ALL: [WalkingMode; 3] = [
        WalkingMode::StairAscent,
        WalkingMode::LevelGround,
        WalkingMode::StairDescent,
    ];

    /// Stable class index: SA=0, LG=1, SD=2.
    pub fn index(self) -> usize {
        match self {
            WalkingMode::StairAscent => 0,
            WalkingMode::LevelGround => 1,
            WalkingMode::StairDescent => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(WalkingMode::StairAscent),
            1 => Ok(WalkingMode::LevelGround),
            2 => Ok(WalkingMode::StairDescent),
            _ => Err(Error::Invalid(format!("class index {i} not in 0..3"))),
        }
    }

    /// Two-letter tag used in CSV files and printed tables.
    pub fn tag(self) -> &'static str {
        match self {
            WalkingMode::StairAscent => "SA",
            WalkingMode::LevelGround => "LG",
            WalkingMode::StairDescent => "SD",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "SA" => Ok(WalkingMode::StairAscent),
            "LG" => Ok(WalkingMode::LevelGround),
            "SD" => Ok(WalkingMode::StairDescent),
            _ => Err(Error::Invalid(format!("unknown walking-mode label {tag:?}"))),
        }
    }
}

impl std::fmt::Display for WalkingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// One-hot encoding under the SA=0 / LG=1 / SD=2 convention.
pub fn one_hot(mode: WalkingMode) -> [f64; 3] {
    let mut v = [0.0; 3];
    v[mode.index()] = 1.0;
    v
}

/// A single timestep of sensor features: the two thigh sagittal-plane
/// angles in degrees, as delivered by the orientation sensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureFrame {
    pub left_deg: f64,
    pub right_deg: f64,
}

impl FeatureFrame {
    pub fn new(left_deg: f64, right_deg: f64) -> Result<Self> {
        if !left_deg.is_finite() || !right_deg.is_finite() {
            return Err(Error::Invalid(format!(
                "feature frame must be finite, got ({left_deg}, {right_deg})"
            )));
        }
        Ok(FeatureFrame { left_deg, right_deg })
    }

    pub fn channel(&self, c: usize) -> f64 {
        match c {
            0 => self.left_deg,
            1 => self.right_deg,
            _ => panic!("channel {c} out of range for 2-channel frame"),
        }
    }
}

/// One walking session: per-timestep feature frames plus ground-truth
/// labels at 30 Hz, tagged with the user it came from and whether the
/// device was actively assisting.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    user_id: u32,
    frames: Vec<FeatureFrame>,
    labels: Vec<WalkingMode>,
    assist_on: bool,
}

impl Sequence {
    pub fn new(
        user_id: u32,
        frames: Vec<FeatureFrame>,
        labels: Vec<WalkingMode>,
        assist_on: bool,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Invalid("sequence must be non-empty".into()));
        }
        if frames.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "frames ({}) and labels ({}) must have equal length",
                frames.len(),
                labels.len()
            )));
        }
        Ok(Sequence {
            user_id,
            frames,
            labels,
            assist_on,
        })
    }

    pub fn user_id(&self) -> u32 {
        self.user_id
    }

    pub fn assist_on(&self) -> bool {
        self.assist_on
    }

    /// Sequence length in timesteps.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        SAMPLE_RATE_HZ
    }

    pub fn frames(&self) -> &[FeatureFrame] {
        &self.frames
    }

    pub fn labels(&self) -> &[WalkingMode] {
        &self.labels
    }

    pub fn frame(&self, k: usize) -> FeatureFrame {
        self.frames[k]
    }

    pub fn label(&self, k: usize) -> WalkingMode {
        self.labels[k]
    }

    /// Copy of this sequence with ground truth removed (all labels
    /// replaced by a fixed placeholder). Self-labeling operates on
    /// stripped sequences so it cannot read the truth by construction.
    pub fn without_labels(&self) -> Sequence {
        Sequence {
            user_id: self.user_id,
            frames: self.frames.clone(),
            labels: vec![WalkingMode::LevelGround; self.frames.len()],
            assist_on: self.assist_on,
        }
    }
}

/// A collection of sequences used for training or evaluation.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn new(sequences: Vec<Sequence>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Invalid("dataset must contain at least one sequence".into()));
        }
        Ok(Dataset { sequences })
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn sequence_count(&self) -> usize {
        self.sequences.len()
    }

    /// Distinct user ids, ascending.
    pub fn user_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.sequences.iter().map(|s| s.user_id()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Splits into (sequences of `user`, sequences of everyone else).
    pub fn split_user(&self, user: u32) -> (Vec<Sequence>, Vec<Sequence>) {
        let (held, rest): (Vec<_>, Vec<_>) =
            self.sequences.iter().cloned().partition(|s| s.user_id() == user);
        (held, rest)
    }
}

/// The `f x (M+1)` matrix of the most recent feature frames consumed by
/// the network, columns ordered oldest to newest.
#[derive(Debug, Clone, PartialEq)]
pub struct InputWindow {
    values: Array2<f64>,
}

impl InputWindow {
    pub fn from_matrix(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "input window must have {INPUT_CHANNELS} channel rows, got {}",
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::Shape("input window must have at least one column".into()));
        }
        Ok(InputWindow { values })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.values
    }

    /// Window length M+1 in timesteps.
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// How target labels are filled for offsets that fall outside a
/// sequence. The nearest in-range label is replicated, which keeps every
/// timestep usable and is consistent at steady state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadPolicy {
    #[default]
    ReplicateNearest,
}

/// Per-class scores or probabilities for the 2N+1 offsets around an
/// anchor timestep. Row 0 is offset -N, row N is the anchor itself, row
/// 2N is offset +N.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetWindowEstimate {
    scores: Array2<f64>,
    is_probabilities: bool,
    anchor: usize,
}

impl TargetWindowEstimate {
    pub fn new(scores: Array2<f64>, is_probabilities: bool, anchor: usize) -> Result<Self> {
        if scores.ncols() != 3 {
            return Err(Error::Shape(format!(
                "target window estimate needs 3 class columns, got {}",
                scores.ncols()
            )));
        }
        if scores.nrows().is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "target window estimate needs an odd number of rows (2N+1), got {}",
                scores.nrows()
            )));
        }
        let est = TargetWindowEstimate {
            scores,
            is_probabilities,
            anchor,
        };
        if is_probabilities {
            est.check_probability_rows()?;
        }
        Ok(est)
    }

    fn check_probability_rows(&self) -> Result<()> {
        for (i, row) in self.scores.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Invalid(format!(
                    "probability row {i} does not normalize: {row}"
                )));
            }
        }
        Ok(())
    }

    /// Half-width N of the target window.
    pub fn half_width(&self) -> usize {
        (self.scores.nrows() - 1) / 2
    }

    pub fn is_probabilities(&self) -> bool {
        self.is_probabilities
    }

    /// Timestep this estimate is anchored at (offset 0).
    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    /// The three class values at a signed offset in [-N, N].
    pub fn at_offset(&self, offset: i64) -> [f64; 3] {
        let n = self.half_width() as i64;
        assert!(
            (-n..=n).contains(&offset),
            "offset {offset} outside target window +/-{n}"
        );
        let r = (offset + n) as usize;
        [self.scores[[r, 0]], self.scores[[r, 1]], self.scores[[r, 2]]]
    }

    /// Highest-scoring class at an offset, ties toward the lowest index.
    pub fn argmax_at(&self, offset: i64) -> WalkingMode {
        let probs = self.at_offset(offset);
        let mut best = 0;
        for c in 1..3 {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        WalkingMode::from_index(best).expect("index under 3")
    }
}

/// Extracts the input window of frames `k-M ..= k` as an `f x (M+1)`
/// matrix, oldest column first.
pub fn extract_window(seq: &Sequence, k: usize, m: usize) -> Result<InputWindow> {
    if k >= seq.len() || k < m {
        return Err(Error::OutOfRange(format!(
            "window anchor k={k} with history M={m} invalid for sequence of length {}",
            seq.len()
        )));
    }
    let mut values = Array2::zeros((INPUT_CHANNELS, m + 1));
    for (col, frame) in seq.frames()[k - m..=k].iter().enumerate() {
        values[[0, col]] = frame.left_deg;
        values[[1, col]] = frame.right_deg;
    }
    InputWindow::from_matrix(values)
}

/// Ground-truth labels at offsets `-N ..= +N` around `k`; offsets that
/// fall outside the sequence are filled per the pad policy.
pub fn extract_target(
    seq: &Sequence,
    k: usize,
    n: usize,
    pad: PadPolicy,
) -> Result<Vec<WalkingMode>> {
    if k >= seq.len() {
        return Err(Error::OutOfRange(format!(
            "target anchor k={k} invalid for sequence of length {}",
            seq.len()
        )));
    }
    let last = seq.len() as i64 - 1;
    let target = (-(n as i64)..=n as i64)
        .map(|offset| {
            let idx = k as i64 + offset;
            let idx = match pad {
                PadPolicy::ReplicateNearest => idx.clamp(0, last),
            };
            seq.label(idx as usize)
        })
        .collect();
    Ok(target)
}
