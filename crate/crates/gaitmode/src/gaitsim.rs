//! Closed-loop controller simulation: streaming gait-event detection,
//! per-step class aggregation, and motor-reference amplitude modulation.
//!
//! The pipeline mirrors the device's control chain. A streaming
//! detector finds the stride events from the hip angle — T1 (start of
//! stance, peak flexion), T2 (stance→swing transition, peak extension),
//! T3 (end of swing) — while the classifier keeps a per-sample estimate
//! history. Each completed stride is classified by averaging the
//! probability rows of the estimate anchored at its T2 over the span
//! [T1, T3]; the resulting class switches the swing-assist gain at the
//! next stance→swing transition. [`run_closed_loop`] wires all of it
//! together over one replayed sequence and produces a per-sample trace
//! plus a summary.

use std::collections::VecDeque;
use std::time::Instant;

use ndarray::Array2;

use crate::data::{FeatureFrame, Sequence, TargetWindowEstimate, WalkingMode};
use crate::error::{Error, Result};
use crate::tcn::{forward, softmax_rows, TcnModel};
use crate::{data::InputWindow, SAMPLE_RATE_HZ};

/// Accepted strides must spend between these fractions of their
/// duration in swing; the nominal split is 60% stance / 40% swing.
pub const SWING_FRACTION_BAND: (f64, f64) = (0.25, 0.55);

/// The stride-event triple of one accepted step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaitEvents {
    t1: usize,
    t2: usize,
    t3: usize,
}

impl GaitEvents {
    /// Validates the temporal ordering t1 < t2 < t3.
    pub fn new(t1: usize, t2: usize, t3: usize) -> Result<GaitEvents> {
        if !(t1 < t2 && t2 < t3) {
            return Err(Error::Invalid(format!(
                "stride events must be ordered t1 < t2 < t3, got {t1}, {t2}, {t3}"
            )));
        }
        Ok(GaitEvents { t1, t2, t3 })
    }

    /// Start of stance (local maximum of the hip angle).
    pub fn t1(&self) -> usize {
        self.t1
    }

    /// Stance→swing transition (local minimum, maximum extension).
    pub fn t2(&self) -> usize {
        self.t2
    }

    /// End of swing (the next local maximum).
    pub fn t3(&self) -> usize {
        self.t3
    }

    /// Fraction of the stride spent in swing, (t3−t2)/(t3−t1).
    pub fn swing_fraction(&self) -> f64 {
        (self.t3 - self.t2) as f64 / (self.t3 - self.t1) as f64
    }
}

/// Outcome of aggregating one stride's class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct StepClassification {
    pub step_index: usize,
    pub mode: WalkingMode,
    /// Mean class probabilities over the aggregation span.
    pub mean_probs: [f64; 3],
    /// Timestep span actually averaged, inclusive on both ends.
    pub span: (usize, usize),
}

/// Swing-assist amplitude modulation per walking mode.
///
/// The reference is slack during stance and a half-sine pull during
/// swing, scaled by the gain of the current step class. Ascending
/// stairs demands more flexion assistance than level ground, which in
/// turn demands more than descending; the validator enforces that
/// ordering for any configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceProfile {
    /// Dimensionless amplitude gains indexed SA=0 / LG=1 / SD=2.
    pub gains: [f64; 3],
    /// Cable position during stance, radians (slightly released).
    pub slack_rad: f64,
    /// Base swing waveform amplitude in radians before gain scaling.
    pub swing_amplitude_rad: f64,
}

impl Default for ReferenceProfile {
    fn default() -> ReferenceProfile {
        ReferenceProfile {
            gains: [1.3, 1.0, 0.6],
            slack_rad: -0.05,
            swing_amplitude_rad: 0.35,
        }
    }
}

impl ReferenceProfile {
    pub fn validate(&self) -> Result<()> {
        let [sa, lg, sd] = self.gains;
        if !(sa.is_finite() && lg.is_finite() && sd.is_finite() && sa > lg && lg > sd && sd > 0.0) {
            return Err(Error::Invalid(format!(
                "assist gains must satisfy SA > LG > SD > 0, got {sa}, {lg}, {sd}"
            )));
        }
        if !self.slack_rad.is_finite() {
            return Err(Error::Invalid("slack level must be finite".into()));
        }
        if !(self.swing_amplitude_rad > 0.0 && self.swing_amplitude_rad.is_finite()) {
            return Err(Error::Invalid("swing amplitude must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Stride fraction at which stance hands over to swing.
const STANCE_END_PHASE: f64 = 0.6;

/// Motor position reference at a gait phase in [0, 1].
///
/// Stance (phase < 0.6) holds the slack level; swing adds a half-sine
/// pull scaled by the step class's gain. The waveform is continuous at
/// the stance/swing boundary and at the stride wrap, since the sine
/// vanishes at both ends of the swing window.
pub fn generate_reference(phase: f64, step_mode: WalkingMode, profile: &ReferenceProfile) -> f64 {
    let p = phase.clamp(0.0, 1.0);
    if p < STANCE_END_PHASE {
        profile.slack_rad
    } else {
        let s = (p - STANCE_END_PHASE) / (1.0 - STANCE_END_PHASE);
        profile.slack_rad
            + profile.gains[step_mode.index()]
                * profile.swing_amplitude_rad
                * (std::f64::consts::PI * s).sin()
    }
}

/// Knobs of the streaming event detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub sample_rate_hz: f64,
    /// Trailing samples averaged when smoothing the velocity.
    pub smoothing: usize,
    /// Velocity magnitude (deg/s) that must be crossed before the
    /// detector commits to a new rising or falling half-cycle.
    pub hysteresis_deg_s: f64,
    /// An extremum closer than this fraction of the expected stride to
    /// the previous extremum of the same kind is dropped as noise.
    pub refractory_fraction: f64,
    /// Expected stride duration before any has been measured, samples.
    pub initial_stride_samples: f64,
    /// Measured strides are clamped into this range (samples) before
    /// updating the expectation, so one bad stride cannot wedge the
    /// refractory window.
    pub stride_clamp: (f64, f64),
}

impl Default for DetectorConfig {
    fn default() -> DetectorConfig {
        DetectorConfig {
            sample_rate_hz: SAMPLE_RATE_HZ,
            smoothing: 7,
            hysteresis_deg_s: 15.0,
            refractory_fraction: 0.3,
            initial_stride_samples: 30.0,
            stride_clamp: (20.0, 60.0),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if self.smoothing == 0 {
            return Err(Error::Invalid("smoothing window must be at least one sample".into()));
        }
        if !(self.hysteresis_deg_s > 0.0) {
            return Err(Error::Invalid("hysteresis must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.refractory_fraction) {
            return Err(Error::Invalid("refractory fraction must lie in [0, 1)".into()));
        }
        let (lo, hi) = self.stride_clamp;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Invalid("stride clamp must satisfy 0 < lo <= hi".into()));
        }
        if !(lo..=hi).contains(&self.initial_stride_samples) {
            return Err(Error::Invalid("initial stride must lie inside the clamp range".into()));
        }
        Ok(())
    }
}

/// Something the detector confirmed at the current sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectorEvent {
    /// A local maximum of the hip angle (stride boundary) at `t`.
    Max { t: usize },
    /// A local minimum (stance→swing transition) at `t`.
    Min { t: usize },
    /// A max–min–max triple completed a stride; `accepted` tells
    /// whether its swing fraction fell inside [`SWING_FRACTION_BAND`].
    Stride { events: GaitEvents, accepted: bool },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slope {
    Unknown,
    Rising,
    Falling,
}

/// Streaming stride-event detector.
///
/// Velocity (derived by first differences when not supplied) is
/// smoothed by a trailing moving average; a hysteresis state machine on
/// its sign confirms alternating extrema, each back-dated to the
/// argmax/argmin of the raw angle since the previous extremum. Strides
/// outside the swing-fraction band are reported but flagged rejected.
#[derive(Debug, Clone)]
pub struct GaitEventDetector {
    config: DetectorConfig,
    t: usize,
    prev_angle: f64,
    /// Raw per-sample velocities awaiting smoothing, newest last.
    vel_window: VecDeque<f64>,
    /// Recent raw angles (t, angle) for extremum back-dating.
    history: VecDeque<(usize, f64)>,
    slope: Slope,
    /// Time of the last confirmed extremum of each kind (max, min).
    last_max: Option<usize>,
    last_min: Option<usize>,
    /// Pending stride under assembly: (t1, t2) awaiting its t3.
    open_stride: Option<(usize, usize)>,
    expected_stride: f64,
    accepted: usize,
    rejected: usize,
}

impl GaitEventDetector {
    pub fn new(config: DetectorConfig) -> Result<GaitEventDetector> {
        config.validate()?;
        let expected_stride = config.initial_stride_samples;
        Ok(GaitEventDetector {
            config,
            t: 0,
            prev_angle: 0.0,
            vel_window: VecDeque::new(),
            history: VecDeque::new(),
            slope: Slope::Unknown,
            last_max: None,
            last_min: None,
            open_stride: None,
            expected_stride,
            accepted: 0,
            rejected: 0,
        })
    }

    /// Accepted and rejected stride counts so far.
    pub fn stride_counts(&self) -> (usize, usize) {
        (self.accepted, self.rejected)
    }

    /// Feeds one sample; `velocity` may carry an externally measured
    /// angular velocity in deg/s, otherwise a first difference is used.
    /// Returns whatever was confirmed at this sample.
    pub fn push(&mut self, angle: f64, velocity: Option<f64>) -> Vec<DetectorEvent> {
        let t = self.t;
        let raw_vel = match velocity {
            Some(v) => v,
            None if t == 0 => 0.0,
            None => (angle - self.prev_angle) * self.config.sample_rate_hz,
        };
        self.prev_angle = angle;
        self.t += 1;

        self.vel_window.push_back(raw_vel);
        if self.vel_window.len() > self.config.smoothing {
            self.vel_window.pop_front();
        }
        self.history.push_back((t, angle));
        let keep = (4.0 * self.config.stride_clamp.1) as usize;
        if self.history.len() > keep {
            self.history.pop_front();
        }

        if self.vel_window.len() < self.config.smoothing {
            return Vec::new(); // smoother still filling
        }
        let vel = self.vel_window.iter().sum::<f64>() / self.vel_window.len() as f64;
        let h = self.config.hysteresis_deg_s;

        let mut out = Vec::new();
        match self.slope {
            Slope::Unknown => {
                if vel >= h {
                    self.slope = Slope::Rising;
                } else if vel <= -h {
                    self.slope = Slope::Falling;
                }
            }
            Slope::Rising if vel <= -h => {
                self.slope = Slope::Falling;
                if let Some(tm) = self.backdated_extremum(true) {
                    self.confirm_max(tm, &mut out);
                }
            }
            Slope::Falling if vel >= h => {
                self.slope = Slope::Rising;
                if let Some(tm) = self.backdated_extremum(false) {
                    self.confirm_min(tm, &mut out);
                }
            }
            _ => {}
        }
        out
    }

    /// Argmax (or argmin) of the raw angle strictly after the previous
    /// extremum of either kind; earliest sample wins ties.
    fn backdated_extremum(&self, maximum: bool) -> Option<usize> {
        let floor = match (self.last_max, self.last_min) {
            (Some(a), Some(b)) => a.max(b) + 1,
            (Some(a), None) => a + 1,
            (None, Some(b)) => b + 1,
            (None, None) => 0,
        };
        let mut best: Option<(usize, f64)> = None;
        for &(t, a) in self.history.iter().filter(|&&(t, _)| t >= floor) {
            let better = match best {
                None => true,
                Some((_, b)) => {
                    if maximum {
                        a > b
                    } else {
                        a < b
                    }
                }
            };
            if better {
                best = Some((t, a));
            }
        }
        best.map(|(t, _)| t)
    }

    fn refractory(&self) -> f64 {
        self.config.refractory_fraction * self.expected_stride
    }

    fn confirm_max(&mut self, tm: usize, out: &mut Vec<DetectorEvent>) {
        if let Some(prev) = self.last_max {
            if ((tm - prev) as f64) < self.refractory() {
                return; // same-kind extremum inside the refractory window
            }
        }
        self.last_max = Some(tm);
        out.push(DetectorEvent::Max { t: tm });
        if let Some((t1, t2)) = self.open_stride.take() {
            if t1 < t2 && t2 < tm {
                let events = GaitEvents::new(t1, t2, tm).expect("ordered by construction");
                let f = events.swing_fraction();
                let accepted = (SWING_FRACTION_BAND.0..=SWING_FRACTION_BAND.1).contains(&f);
                if accepted {
                    self.accepted += 1;
                    let (lo, hi) = self.config.stride_clamp;
                    self.expected_stride = ((tm - t1) as f64).clamp(lo, hi);
                } else {
                    self.rejected += 1;
                }
                out.push(DetectorEvent::Stride { events, accepted });
            }
        }
    }

    fn confirm_min(&mut self, tm: usize, out: &mut Vec<DetectorEvent>) {
        if let Some(prev) = self.last_min {
            if ((tm - prev) as f64) < self.refractory() {
                return;
            }
        }
        self.last_min = Some(tm);
        out.push(DetectorEvent::Min { t: tm });
        if let Some(t1) = self.last_max {
            if t1 < tm {
                // a min without its stride resolved yet starts a new one;
                // an unresolved previous min is abandoned (no max between)
                self.open_stride = Some((t1, tm));
            }
        }
    }
}

/// Batch result of [`detect_gait_events`].
#[derive(Debug, Clone, PartialEq)]
pub struct EventDetection {
    /// Accepted strides in temporal order.
    pub events: Vec<GaitEvents>,
    /// Strides whose swing fraction fell outside the band.
    pub rejected: usize,
}

/// Runs the streaming detector over whole signals with the default
/// configuration. `hip_velocity`, when given, must match the angle
/// stream in length; otherwise velocity is derived by first
/// differences.
pub fn detect_gait_events(hip_angle: &[f64], hip_velocity: Option<&[f64]>) -> Result<EventDetection> {
    detect_gait_events_with(hip_angle, hip_velocity, DetectorConfig::default())
}

/// [`detect_gait_events`] with an explicit detector configuration.
pub fn detect_gait_events_with(
    hip_angle: &[f64],
    hip_velocity: Option<&[f64]>,
    config: DetectorConfig,
) -> Result<EventDetection> {
    if let Some(v) = hip_velocity {
        if v.len() != hip_angle.len() {
            return Err(Error::Shape(format!(
                "velocity stream has {} samples for {} angle samples",
                v.len(),
                hip_angle.len()
            )));
        }
    }
    let mut detector = GaitEventDetector::new(config)?;
    let mut events = Vec::new();
    for (i, &a) in hip_angle.iter().enumerate() {
        for ev in detector.push(a, hip_velocity.map(|v| v[i])) {
            if let DetectorEvent::Stride { events: e, accepted: true } = ev {
                events.push(e);
            }
        }
    }
    let (_, rejected) = detector.stride_counts();
    Ok(EventDetection { events, rejected })
}

/// Classifies one stride from the estimate anchored at its T2.
///
/// Probability rows are averaged over the offsets covering [T1, T3]
/// clipped to the estimate's target window [T2−N, T2+N]; the argmax of
/// the mean is the step class, ties toward the lowest class index. The
/// history must contain an estimate anchored exactly at T2.
pub fn classify_step(
    history: &[TargetWindowEstimate],
    events: &GaitEvents,
    step_index: usize,
) -> Result<StepClassification> {
    let k = events.t2();
    let est = history
        .iter()
        .rev()
        .find(|e| e.anchor() == k)
        .ok_or_else(|| {
            Error::StaleEstimate(format!("no estimate anchored at the stride's T2 = {k}"))
        })?;
    let n = est.half_width();
    let lo = events.t1().max(k.saturating_sub(n));
    let hi = events.t3().min(k + n);
    let mut mean = [0.0; 3];
    let mut count = 0.0;
    for t in lo..=hi {
        let row = est.at_offset(t as i64 - k as i64);
        for c in 0..3 {
            mean[c] += row[c];
        }
        count += 1.0;
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut best = 0;
    for c in 1..3 {
        if mean[c] > mean[best] {
            best = c;
        }
    }
    Ok(StepClassification {
        step_index,
        mode: WalkingMode::from_index(best)?,
        mean_probs: mean,
        span: (lo, hi),
    })
}

/// One per-sample record of the closed-loop trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub left_deg: f64,
    pub right_deg: f64,
    /// Hidden ground-truth mode at `t` (never fed to the pipeline).
    pub truth: WalkingMode,
    /// Real-time offset-0 argmax at anchor `t`; empty during warm-up.
    pub pred: Option<WalkingMode>,
    /// Step class currently driving the reference; empty until the
    /// first stride has been classified and applied.
    pub step_class: Option<WalkingMode>,
    /// Time-normalized gait phase estimate in [0, 1].
    pub phase: f64,
    /// Motor position reference, radians.
    pub reference: f64,
}

/// Per-sample wall-clock processing times of one run, milliseconds.
/// Excluded from any deterministic file output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

/// Aggregates of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopSummary {
    pub samples: usize,
    /// Strides passing the swing-fraction band.
    pub strides_accepted: usize,
    pub strides_rejected: usize,
    /// Accepted strides whose T2 predates the model warm-up.
    pub strides_skipped_warm_up: usize,
    pub steps_classified: usize,
    /// Steps whose class matches the majority ground-truth label over
    /// [T1, T3].
    pub steps_correct: usize,
    /// `steps_correct / steps_classified`; `None` with no steps.
    pub step_accuracy: Option<f64>,
    pub latency: LatencyStats,
}

/// Everything produced by one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub trace: Vec<TraceRow>,
    /// Classifications in the order they were computed.
    pub steps: Vec<StepClassification>,
    /// Accepted strides in temporal order (including any whose T2
    /// predates the warm-up and therefore produced no classification).
    pub strides: Vec<GaitEvents>,
    /// Streaming per-sample estimates, anchored warm_up..len.
    pub estimates: Vec<TargetWindowEstimate>,
    /// Samples at which the applied step class changed.
    pub switch_times: Vec<usize>,
    pub summary: ClosedLoopSummary,
}

/// Reference gain used before the first stride has been classified.
const NEUTRAL_MODE: WalkingMode = WalkingMode::LevelGround;

/// Streaming pipeline state shared by the plain and accelerated runs.
struct ClosedLoop<'a> {
    model: &'a TcnModel,
    profile: &'a ReferenceProfile,
    seq: &'a Sequence,
    warm_up: usize,
    ring: VecDeque<FeatureFrame>,
    detector: GaitEventDetector,
    estimates: Vec<TargetWindowEstimate>,
    trace: Vec<TraceRow>,
    steps: Vec<StepClassification>,
    strides: Vec<GaitEvents>,
    switch_times: Vec<usize>,
    /// Classified but not yet applied (waiting for the next T2).
    pending: Option<WalkingMode>,
    applied: Option<WalkingMode>,
    /// Last confirmed extremum: (sample time, was it a minimum).
    phase_anchor: Option<(usize, bool)>,
    skipped_warm_up: usize,
    correct: usize,
    sample_ms: Vec<f64>,
}

impl<'a> ClosedLoop<'a> {
    fn new(model: &'a TcnModel, seq: &'a Sequence, profile: &'a ReferenceProfile) -> Result<Self> {
        profile.validate()?;
        let warm_up = model.warm_up();
        if seq.len() <= warm_up {
            return Err(Error::OutOfRange(format!(
                "sequence of length {} never leaves the {warm_up}-sample warm-up",
                seq.len()
            )));
        }
        Ok(ClosedLoop {
            model,
            profile,
            seq,
            warm_up,
            ring: VecDeque::with_capacity(warm_up + 1),
            detector: GaitEventDetector::new(DetectorConfig::default())?,
            estimates: Vec::with_capacity(seq.len() - warm_up),
            trace: Vec::with_capacity(seq.len()),
            steps: Vec::new(),
            strides: Vec::new(),
            switch_times: Vec::new(),
            pending: None,
            applied: None,
            phase_anchor: None,
            skipped_warm_up: 0,
            correct: 0,
            sample_ms: Vec::with_capacity(seq.len()),
        })
    }

    /// Majority ground-truth label over the stride span, ties toward
    /// the lowest class index.
    fn stride_truth(&self, events: &GaitEvents) -> WalkingMode {
        let mut counts = [0usize; 3];
        for t in events.t1()..=events.t3().min(self.seq.len() - 1) {
            counts[self.seq.label(t).index()] += 1;
        }
        let mut best = 0;
        for c in 1..3 {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        WalkingMode::from_index(best).expect("index under 3")
    }

    /// Estimate from the ring buffer only — the streaming counterpart
    /// of the batch per-anchor prediction.
    fn streaming_estimate(&self, t: usize) -> Result<TargetWindowEstimate> {
        let w = self.warm_up + 1;
        debug_assert_eq!(self.ring.len(), w);
        let mut values = Array2::zeros((2, w));
        for (col, frame) in self.ring.iter().enumerate() {
            values[[0, col]] = frame.left_deg;
            values[[1, col]] = frame.right_deg;
        }
        let window = InputWindow::from_matrix(values)?;
        let local = softmax_rows(&forward(self.model, &window)?);
        TargetWindowEstimate::new(local.scores().clone(), true, t)
    }

    /// Time-normalized phase: 0 at the last stride boundary, 0.6 at the
    /// stance→swing transition, approaching 1 at the next boundary.
    /// Within each segment, time is normalized by the expected segment
    /// duration and held at the segment end until the next event.
    fn phase_at(&self, t: usize) -> f64 {
        let expected = self.detector.expected_stride;
        match self.phase_anchor {
            None => 0.0,
            Some((tm, false)) => {
                let stance = STANCE_END_PHASE * expected;
                STANCE_END_PHASE * (((t - tm) as f64 / stance).min(1.0))
            }
            Some((tm, true)) => {
                let swing = (1.0 - STANCE_END_PHASE) * expected;
                STANCE_END_PHASE
                    + (1.0 - STANCE_END_PHASE) * (((t - tm) as f64 / swing).min(1.0))
            }
        }
    }

    fn step(&mut self, t: usize, frame: FeatureFrame) -> Result<()> {
        let started = Instant::now();

        self.ring.push_back(frame);
        if self.ring.len() > self.warm_up + 1 {
            self.ring.pop_front();
        }
        let pred = if t >= self.warm_up {
            let est = self.streaming_estimate(t)?;
            let p = est.argmax_at(0);
            self.estimates.push(est);
            Some(p)
        } else {
            None
        };

        for event in self.detector.push(frame.left_deg, None) {
            match event {
                DetectorEvent::Max { t: tm } => self.phase_anchor = Some((tm, false)),
                DetectorEvent::Min { t: tm } => {
                    self.phase_anchor = Some((tm, true));
                    // swing begins: apply the most recent classification
                    if let Some(mode) = self.pending.take() {
                        if self.applied != Some(mode) {
                            self.switch_times.push(t);
                        }
                        self.applied = Some(mode);
                    }
                }
                DetectorEvent::Stride { events, accepted } => {
                    if !accepted {
                        continue;
                    }
                    self.strides.push(events);
                    if events.t2() < self.warm_up {
                        self.skipped_warm_up += 1;
                        continue;
                    }
                    let step = classify_step(&self.estimates, &events, self.steps.len())?;
                    if step.mode == self.stride_truth(&events) {
                        self.correct += 1;
                    }
                    self.pending = Some(step.mode);
                    self.steps.push(step);
                }
            }
        }

        let phase = self.phase_at(t);
        let reference = generate_reference(phase, self.applied.unwrap_or(NEUTRAL_MODE), self.profile);
        self.trace.push(TraceRow {
            t,
            left_deg: frame.left_deg,
            right_deg: frame.right_deg,
            truth: self.seq.label(t),
            pred,
            step_class: self.applied,
            phase,
            reference,
        });
        self.sample_ms.push(started.elapsed().as_secs_f64() * 1e3);
        Ok(())
    }

    fn finish(mut self) -> ClosedLoopRun {
        let (accepted, rejected) = self.detector.stride_counts();
        let steps_classified = self.steps.len();
        self.sample_ms.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        let pct = |q: f64| -> f64 {
            if self.sample_ms.is_empty() {
                return 0.0;
            }
            let i = ((self.sample_ms.len() - 1) as f64 * q).round() as usize;
            self.sample_ms[i]
        };
        let latency = LatencyStats {
            mean_ms: self.sample_ms.iter().sum::<f64>() / self.sample_ms.len().max(1) as f64,
            p50_ms: pct(0.50),
            p95_ms: pct(0.95),
            max_ms: self.sample_ms.last().copied().unwrap_or(0.0),
        };
        ClosedLoopRun {
            trace: self.trace,
            steps: self.steps,
            strides: self.strides,
            estimates: self.estimates,
            switch_times: self.switch_times,
            summary: ClosedLoopSummary {
                samples: self.seq.len(),
                strides_accepted: accepted,
                strides_rejected: rejected,
                strides_skipped_warm_up: self.skipped_warm_up,
                steps_classified,
                steps_correct: self.correct,
                step_accuracy: if steps_classified > 0 {
                    Some(self.correct as f64 / steps_classified as f64)
                } else {
                    None
                },
                latency,
            },
        }
    }
}

/// Replays one sequence through the full pipeline in a single pass.
///
/// Each sample updates the input ring buffer, produces the streaming
/// estimate (identical to batch prediction at the same anchor), and
/// advances event detection; completed strides are classified and the
/// class is applied — switching the assist gain — at the next
/// stance→swing transition. The left leg drives event detection; a
/// two-leg setup runs one pipeline per leg.
pub fn run_closed_loop(
    model: &TcnModel,
    seq: &Sequence,
    profile: &ReferenceProfile,
) -> Result<ClosedLoopRun> {
    let mut sim = ClosedLoop::new(model, seq, profile)?;
    for (t, &frame) in seq.frames().iter().enumerate() {
        sim.step(t, frame)?;
    }
    Ok(sim.finish())
}

/// Accelerated variant: a producer thread replays the sequence through
/// a bounded channel while the consumer runs the identical pipeline.
/// The channel blocks the producer when full, so no sample is ever
/// dropped and the result matches [`run_closed_loop`] exactly.
pub fn run_closed_loop_accelerated(
    model: &TcnModel,
    seq: &Sequence,
    profile: &ReferenceProfile,
    queue_capacity: usize,
) -> Result<ClosedLoopRun> {
    if queue_capacity == 0 {
        return Err(Error::Invalid("queue capacity must be at least 1".into()));
    }
    let mut sim = ClosedLoop::new(model, seq, profile)?;
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = std::sync::mpsc::sync_channel::<(usize, FeatureFrame)>(queue_capacity);
        scope.spawn(move || {
            for (t, &frame) in seq.frames().iter().enumerate() {
                if tx.send((t, frame)).is_err() {
                    return; // consumer hit an error and hung up
                }
            }
        });
        for (t, frame) in rx {
            sim.step(t, frame)?;
        }
        Ok(())
    })?;
    Ok(sim.finish())
}

const TRACE_HEADER: &str = "t,left_deg,right_deg,truth,pred_k,step_class,phase,reference";

fn mode_cell(m: Option<WalkingMode>) -> &'static str {
    m.map(WalkingMode::tag).unwrap_or("-")
}

/// Renders trace rows in the stable column layout
/// `t,left_deg,right_deg,truth,pred_k,step_class,phase,reference`.
/// Floats print in shortest round-trip form, so parsing the text back
/// reproduces the rows bit for bit.
pub fn format_trace(rows: &[TraceRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 48 + TRACE_HEADER.len() + 1);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.t,
            r.left_deg,
            r.right_deg,
            r.truth.tag(),
            mode_cell(r.pred),
            mode_cell(r.step_class),
            r.phase,
            r.reference
        ));
    }
    out
}

/// Parses text produced by [`format_trace`].
pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>> {
    let err = |row: usize, msg: String| Error::parse("trace", Some(row), msg);
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRACE_HEADER => {}
        other => {
            return Err(err(1, format!("expected header {TRACE_HEADER:?}, got {other:?}")));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(err(row, format!("expected 8 fields, got {}", fields.len())));
        }
        let float = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| err(row, format!("bad {what} {s:?}: {e}")))
        };
        let opt_mode = |s: &str| -> Result<Option<WalkingMode>> {
            if s == "-" {
                Ok(None)
            } else {
                WalkingMode::from_tag(s).map(Some).map_err(|e| err(row, e.to_string()))
            }
        };
        rows.push(TraceRow {
            t: fields[0]
                .parse::<usize>()
                .map_err(|e| err(row, format!("bad timestep {:?}: {e}", fields[0])))?,
            left_deg: float(fields[1], "left angle")?,
            right_deg: float(fields[2], "right angle")?,
            truth: WalkingMode::from_tag(fields[3]).map_err(|e| err(row, e.to_string()))?,
            pred: opt_mode(fields[4])?,
            step_class: opt_mode(fields[5])?,
            phase: float(fields[6], "phase")?,
            reference: float(fields[7], "reference")?,
        });
    }
    Ok(rows)
}
