//! Deterministic parametric generator of per-user synthetic gait
//! sequences, plus the CSV on-disk format.
//!
//! Thigh sagittal angles in steady gait are near-periodic, so each mode
//! is modeled as a duty-cycle-warped sinusoid with mode-dependent mean,
//! amplitude, and cadence, plus linear sensor drift and i.i.d. Gaussian
//! noise. The warp spends 60% of each stride on the falling (stance)
//! half and 40% on the rising (swing) half, matching the physiological
//! stance/swing split the event detector assumes.
//!
//! Before every mode switch the mean and amplitude ramp linearly toward
//! the next mode's values for `anticipation_s` seconds while the labels
//! keep the current mode. This reproduces the adjustment motions that
//! make future walking modes predictable at all; without it, forecasting
//! beyond label persistence would be impossible by construction. The
//! ramp is deliberately partial ([`ANTICIPATION_DEPTH`]): the cue must
//! be visible without making the end of one mode kinematically
//! indistinguishable from the steady state of the next.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, FeatureFrame, Sequence, WalkingMode};
use crate::error::{Error, Result};
use crate::{derive_seed, SAMPLE_RATE_HZ};

/// Fraction of each stride spent in stance (falling half of the
/// waveform). The remaining 40% is swing.
pub const STANCE_FRACTION: f64 = 0.6;

/// Amplitude multiplier applied when the device is actively assisting.
pub const ASSIST_AMPLITUDE_GAIN: f64 = 1.05;

/// Fraction of the gap to the next mode's mean and amplitude that the
/// pre-transition ramp covers by the moment the labels switch. Subtle
/// adjustment motions announce the upcoming mode without masking the
/// current one.
pub const ANTICIPATION_DEPTH: f64 = 0.5;

/// Per-user generator parameters. Mode-indexed arrays follow the
/// SA=0 / LG=1 / SD=2 encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user_id: u32,
    /// Strides per second for each mode.
    pub cadence_hz: [f64; 3],
    /// Mean thigh angle in degrees for each mode.
    pub mean_angle_deg: [f64; 3],
    /// Waveform amplitude in degrees for each mode.
    pub amplitude_deg: [f64; 3],
    /// Right-leg phase offset relative to the left leg, close to pi.
    pub leg_phase_offset_rad: f64,
    /// Standard deviation of the per-sample Gaussian sensor noise.
    pub noise_std_deg: f64,
    /// Linear sensor drift applied to both channels.
    pub drift_deg_per_s: f64,
    /// Duration of the pre-transition adjustment ramp, in [0, 2] s.
    pub anticipation_s: f64,
    pub rng_seed: u64,
}

impl UserProfile {
    pub fn validate(&self) -> Result<()> {
        if self.cadence_hz.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::Invalid("cadence must be positive for every mode".into()));
        }
        if self.amplitude_deg.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Invalid("amplitude must be positive for every mode".into()));
        }
        if !(self.noise_std_deg >= 0.0) {
            return Err(Error::Invalid("noise std must be non-negative".into()));
        }
        if !(0.0..=2.0).contains(&self.anticipation_s) {
            return Err(Error::Invalid("anticipation must lie in [0, 2] s".into()));
        }
        let sa = self.mean_angle_deg[WalkingMode::StairAscent.index()];
        let sd = self.mean_angle_deg[WalkingMode::StairDescent.index()];
        if (sa - sd).abs() < 2.0 * self.noise_std_deg {
            return Err(Error::Invalid(format!(
                "degenerate profile: |mean(SA) - mean(SD)| = {:.3} < 2 * noise_std = {:.3}",
                (sa - sd).abs(),
                2.0 * self.noise_std_deg
            )));
        }
        Ok(())
    }
}

/// Ordered walking-mode segments with their durations in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePlan {
    segments: Vec<(WalkingMode, f64)>,
}

impl SequencePlan {
    pub fn new(segments: Vec<(WalkingMode, f64)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Invalid("plan needs at least one segment".into()));
        }
        if segments.iter().any(|&(_, d)| !(d > 0.0)) {
            return Err(Error::Invalid("segment durations must be positive".into()));
        }
        Ok(SequencePlan { segments })
    }

    pub fn segments(&self) -> &[(WalkingMode, f64)] {
        &self.segments
    }

    pub fn total_duration_s(&self) -> f64 {
        self.segments.iter().map(|&(_, d)| d).sum()
    }
}

/// Generates one sequence for the profile and plan with assist off.
/// Identical inputs always produce the identical sequence.
pub fn generate_sequence(profile: &UserProfile, plan: &SequencePlan) -> Result<Sequence> {
    generate_sequence_with(profile, plan, false, 0)
}

/// Generator variant selecting the assist condition and an RNG stream id
/// so one profile can produce several distinct sequences.
pub fn generate_sequence_with(
    profile: &UserProfile,
    plan: &SequencePlan,
    assist_on: bool,
    stream: u64,
) -> Result<Sequence> {
    profile.validate()?;

    let dt = 1.0 / SAMPLE_RATE_HZ;
    let n_samples = (plan.total_duration_s() * SAMPLE_RATE_HZ).round() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(profile.rng_seed, stream));
    let noise = if profile.noise_std_deg > 0.0 {
        Some(Normal::new(0.0, profile.noise_std_deg).expect("validated std"))
    } else {
        None
    };

    // segment end times, cumulative
    let mut ends = Vec::with_capacity(plan.segments.len());
    let mut acc = 0.0;
    for &(_, d) in &plan.segments {
        acc += d;
        ends.push(acc);
    }

    let amp_gain = if assist_on { ASSIST_AMPLITUDE_GAIN } else { 1.0 };
    let mut frames = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    let mut phase = 0.0_f64; // accumulated stride fraction, shared by both legs
    let mut seg = 0usize;

    for i in 0..n_samples {
        let t = i as f64 * dt;
        while seg + 1 < plan.segments.len() && t >= ends[seg] {
            seg += 1;
        }
        let mode = plan.segments[seg].0;
        let (mut mean, mut amp) = (
            profile.mean_angle_deg[mode.index()],
            profile.amplitude_deg[mode.index()],
        );

        // anticipation ramp toward the next segment's mean/amplitude
        if seg + 1 < plan.segments.len() && profile.anticipation_s > 0.0 {
            let seg_start = if seg == 0 { 0.0 } else { ends[seg - 1] };
            let ramp_start = (ends[seg] - profile.anticipation_s).max(seg_start);
            if t >= ramp_start && ends[seg] > ramp_start {
                let alpha = ANTICIPATION_DEPTH * (t - ramp_start) / (ends[seg] - ramp_start);
                let next = plan.segments[seg + 1].0;
                let next_mean = profile.mean_angle_deg[next.index()];
                let next_amp = profile.amplitude_deg[next.index()];
                mean += alpha * (next_mean - mean);
                amp += alpha * (next_amp - amp);
            }
        }
        amp *= amp_gain;

        let drift = profile.drift_deg_per_s * t;
        let phase_right = phase + profile.leg_phase_offset_rad / (2.0 * std::f64::consts::PI);
        let (nl, nr) = match &noise {
            Some(n) => (n.sample(&mut rng), n.sample(&mut rng)),
            None => (0.0, 0.0),
        };
        let left = mean + amp * stride_wave(phase) + drift + nl;
        let right = mean + amp * stride_wave(phase_right) + drift + nr;

        frames.push(FeatureFrame::new(left, right)?);
        labels.push(mode);
        phase += profile.cadence_hz[mode.index()] * dt;
    }

    Sequence::new(profile.user_id, frames, labels, assist_on)
}

/// Base stride waveform at accumulated stride fraction `u`.
///
/// One cycle starts at peak flexion (+1), falls to peak extension (-1)
/// over the stance fraction, and rises back to +1 over the swing
/// fraction. The derivative is continuous at both extrema.
fn stride_wave(u: f64) -> f64 {
    let v = u.rem_euclid(1.0);
    let theta = if v < STANCE_FRACTION {
        std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * (v / STANCE_FRACTION)
    } else {
        1.5 * std::f64::consts::PI
            + std::f64::consts::PI * ((v - STANCE_FRACTION) / (1.0 - STANCE_FRACTION))
    };
    theta.sin()
}

/// Documented cohort parameter ranges. Mode-base values give stair
/// ascent the highest mean flexion and slowest cadence; each user gets a
/// global angle offset, a global amplitude scale, and a tempo factor so
/// absolute angle statistics do not transfer perfectly between users
/// while relative temporal structure does. Anticipation ramps sit near
/// the top of their allowed band so that pre-transition cues span the
/// full ±2 s forecast horizon of the default target window.
pub fn default_cohort(n_users: usize, seed: u64) -> Result<Vec<UserProfile>> {
    if n_users == 0 {
        return Err(Error::Invalid("cohort needs at least one user".into()));
    }
    const BASE_CADENCE: [f64; 3] = [0.62, 0.95, 0.78];
    const BASE_MEAN: [f64; 3] = [34.0, 20.0, 9.0];
    const BASE_AMP: [f64; 3] = [26.0, 20.0, 14.0];

    let mut cohort = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, u as u64));
        let tempo: f64 = rng.gen_range(0.92..1.08);
        let angle_offset: f64 = rng.gen_range(-4.0..4.0);
        let amp_scale: f64 = rng.gen_range(0.80..1.25);

        let mut cadence = [0.0; 3];
        let mut mean = [0.0; 3];
        let mut amp = [0.0; 3];
        for m in 0..3 {
            cadence[m] = BASE_CADENCE[m] * tempo + rng.gen_range(-0.02..0.02);
            mean[m] = BASE_MEAN[m] + angle_offset + rng.gen_range(-1.5..1.5);
            amp[m] = BASE_AMP[m] * amp_scale * rng.gen_range(0.95..1.05);
        }

        let profile = UserProfile {
            user_id: u as u32,
            cadence_hz: cadence,
            mean_angle_deg: mean,
            amplitude_deg: amp,
            leg_phase_offset_rad: std::f64::consts::PI + rng.gen_range(-0.15..0.15),
            noise_std_deg: rng.gen_range(1.0..2.0),
            drift_deg_per_s: rng.gen_range(-0.04..0.04),
            anticipation_s: rng.gen_range(1.8..2.0),
            rng_seed: derive_seed(seed, 1000 + u as u64),
        };
        profile.validate()?;
        cohort.push(profile);
    }
    Ok(cohort)
}

/// The three per-condition walking structures, scaled to desk durations.
/// Structure 3 includes a short level-ground landing between the middle
/// stair bouts, giving it six mode switches.
pub fn standard_plans() -> [SequencePlan; 3] {
    use WalkingMode::*;
    [
        SequencePlan::new(vec![(StairAscent, 25.0), (LevelGround, 30.0), (StairDescent, 25.0)])
            .expect("static plan"),
        SequencePlan::new(vec![(StairDescent, 25.0), (LevelGround, 12.0), (StairAscent, 25.0)])
            .expect("static plan"),
        SequencePlan::new(vec![
            (StairDescent, 18.0),
            (LevelGround, 14.0),
            (StairAscent, 6.0),
            (LevelGround, 3.0),
            (StairDescent, 6.0),
            (LevelGround, 14.0),
            (StairAscent, 18.0),
        ])
        .expect("static plan"),
    ]
}

/// Stretches each nominal segment to the next stride boundary so that
/// every mode switch lands exactly where a new stride begins.
///
/// People change walking mode at foot placement, not mid-swing, so a
/// realistic evaluation sequence should never split a stride across two
/// labels. The returned plan replays the generator's phase accumulation
/// (each segment advances the shared stride fraction at that mode's
/// cadence) and extends every segment except the last until the sample
/// where the stride fraction crosses the next whole stride.
pub fn stride_aligned_plan(
    profile: &UserProfile,
    nominal: &[(WalkingMode, f64)],
) -> Result<SequencePlan> {
    profile.validate()?;
    let dt = 1.0 / SAMPLE_RATE_HZ;
    let mut segments = Vec::with_capacity(nominal.len());
    let mut phase = 0.0_f64;
    let mut sample = 0usize;
    for (k, &(mode, duration)) in nominal.iter().enumerate() {
        if !(duration > 0.0) {
            return Err(Error::Invalid("segment durations must be positive".into()));
        }
        if k + 1 == nominal.len() {
            segments.push((mode, duration));
            break;
        }
        let cadence = profile.cadence_hz[mode.index()];
        let end = sample as f64 * dt + duration;
        let start = sample;
        loop {
            let before = phase.floor();
            phase += cadence * dt;
            sample += 1;
            if sample as f64 * dt >= end && phase.floor() > before {
                break;
            }
        }
        segments.push((mode, (sample - start) as f64 * dt));
    }
    SequencePlan::new(segments)
}

/// Six sequences for one user: the three standard structures with assist
/// off, then the same three with assist on.
pub fn standard_protocol(profile: &UserProfile) -> Result<Vec<Sequence>> {
    let plans = standard_plans();
    let mut sequences = Vec::with_capacity(6);
    for (cond, assist_on) in [(0u64, false), (1u64, true)] {
        for (p, plan) in plans.iter().enumerate() {
            sequences.push(generate_sequence_with(
                profile,
                plan,
                assist_on,
                cond * 3 + p as u64,
            )?);
        }
    }
    Ok(sequences)
}

/// Generates the full cohort dataset: `standard_protocol` for every user
/// of `default_cohort(n_users, seed)`.
pub fn standard_cohort_dataset(n_users: usize, seed: u64) -> Result<Dataset> {
    let mut sequences = Vec::with_capacity(n_users * 6);
    for profile in default_cohort(n_users, seed)? {
        sequences.extend(standard_protocol(&profile)?);
    }
    Dataset::new(sequences)
}

const CSV_HEADER: &str = "t,left_deg,right_deg,label";

/// Canonical file name for a sequence: `user<id>_seq<n>_<on|off>.csv`.
pub fn sequence_filename(seq: &Sequence, seq_index: usize) -> String {
    format!(
        "user{}_seq{}_{}.csv",
        seq.user_id(),
        seq_index,
        if seq.assist_on() { "on" } else { "off" }
    )
}

/// Renders a sequence in the fixed CSV contract: header
/// `t,left_deg,right_deg,label`, one row per sample at 30 Hz, angles and
/// times with six decimal digits.
pub fn csv_string(seq: &Sequence) -> String {
    let mut out = String::with_capacity(seq.len() * 40 + 32);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for k in 0..seq.len() {
        let f = seq.frame(k);
        out.push_str(&format!(
            "{:.6},{:.6},{:.6},{}\n",
            k as f64 / SAMPLE_RATE_HZ,
            f.left_deg,
            f.right_deg,
            seq.label(k).tag()
        ));
    }
    out
}

/// Writes [`csv_string`] to a file.
pub fn save_csv(seq: &Sequence, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(csv_string(seq).as_bytes())?;
    Ok(())
}

/// Reads a sequence back from the CSV contract. The user id and assist
/// flag come from the `user<id>_seq<n>_<on|off>.csv` file name. Leading
/// lines starting with `#` are treated as comments and skipped.
pub fn load_csv(path: &Path) -> Result<Sequence> {
    let (user_id, assist_on) = parse_filename(path)?;
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();

    let header = loop {
        match lines.next() {
            Some(line) => {
                let line = line?;
                if !line.starts_with('#') {
                    break line;
                }
            }
            None => return Err(Error::parse(path, None, "empty file")),
        }
    };
    if header.trim_end() != CSV_HEADER {
        return Err(Error::parse(
            path,
            Some(1),
            format!("bad header {header:?}, expected {CSV_HEADER:?}"),
        ));
    }

    let mut frames = Vec::new();
    let mut labels = Vec::new();
    let mut prev_t = f64::NEG_INFINITY;
    for (i, line) in lines.enumerate() {
        let row = i + 2; // 1-based, header is row 1
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 4 {
            return Err(Error::parse(path, Some(row), format!("expected 4 fields, got {}", fields.len())));
        }
        let t: f64 = fields[0]
            .parse()
            .map_err(|_| Error::parse(path, Some(row), format!("bad timestamp {:?}", fields[0])))?;
        if t <= prev_t {
            return Err(Error::parse(path, Some(row), format!("non-monotone timestamp {t}")));
        }
        prev_t = t;
        let left: f64 = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, Some(row), format!("bad angle {:?}", fields[1])))?;
        let right: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, Some(row), format!("bad angle {:?}", fields[2])))?;
        let label = WalkingMode::from_tag(fields[3])
            .map_err(|_| Error::parse(path, Some(row), format!("unknown label {:?}", fields[3])))?;
        frames.push(FeatureFrame::new(left, right).map_err(|e| {
            Error::parse(path, Some(row), e.to_string())
        })?);
        labels.push(label);
    }
    if frames.is_empty() {
        return Err(Error::parse(path, None, "no data rows"));
    }
    Sequence::new(user_id, frames, labels, assist_on)
}

/// Loads every `user*_seq*_{on,off}.csv` under a directory, sorted by
/// file name for a deterministic sequence order.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map(|x| x == "csv").unwrap_or(false) && parse_filename(p).is_ok()
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Invalid(format!("no sequence CSV files in {}", dir.display())));
    }
    let sequences = paths.iter().map(|p| load_csv(p)).collect::<Result<Vec<_>>>()?;
    Dataset::new(sequences)
}

fn parse_filename(path: &Path) -> Result<(u32, bool)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::parse(path, None, "file name is not valid UTF-8"))?;
    let bad = || {
        Error::parse(
            path,
            None,
            format!("file name {stem:?} does not match user<id>_seq<n>_<on|off>"),
        )
    };
    let mut parts = stem.split('_');
    let user = parts.next().ok_or_else(bad)?;
    let seq = parts.next().ok_or_else(bad)?;
    let cond = parts.next().ok_or_else(bad)?;
    if parts.next().is_some() || !user.starts_with("user") || !seq.starts_with("seq") {
        return Err(bad());
    }
    let user_id: u32 = user["user".len()..].parse().map_err(|_| bad())?;
    seq["seq".len()..].parse::<u32>().map_err(|_| bad())?;
    let assist_on = match cond {
        "on" => true,
        "off" => false,
        _ => return Err(bad()),
    };
    Ok((user_id, assist_on))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WalkingMode::*;

    fn quiet_profile() -> UserProfile {
        UserProfile {
            user_id: 3,
            cadence_hz: [0.6, 0.9, 0.75],
            mean_angle_deg: [35.0, 20.0, 10.0],
            amplitude_deg: [26.0, 20.0, 14.0],
            leg_phase_offset_rad: std::f64::consts::PI,
            noise_std_deg: 0.0,
            drift_deg_per_s: 0.0,
            anticipation_s: 1.0,
            rng_seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let profile = default_cohort(2, 5).unwrap().remove(1);
        let plan = SequencePlan::new(vec![(LevelGround, 4.0), (StairAscent, 4.0)]).unwrap();
        let a = generate_sequence(&profile, &plan).unwrap();
        let b = generate_sequence(&profile, &plan).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_single_mode_wave_spans_twice_the_amplitude() {
        let profile = quiet_profile();
        let plan = SequencePlan::new(vec![(LevelGround, 10.0)]).unwrap();
        let seq = generate_sequence(&profile, &plan).unwrap();
        // per-stride extrema: stride period = 1/0.9 s = 33.3 samples
        let period = (SAMPLE_RATE_HZ / profile.cadence_hz[LevelGround.index()]).round() as usize;
        for start in (0..seq.len() - period).step_by(period).take(5) {
            let window: Vec<f64> = (start..start + period).map(|k| seq.frame(k).left_deg).collect();
            let max = window.iter().cloned().fold(f64::MIN, f64::max);
            let min = window.iter().cloned().fold(f64::MAX, f64::min);
            let span = max - min;
            // sampling at 30 Hz misses the exact extrema by at most the
            // local curvature over half a sample step
            assert!(
                (span - 2.0 * profile.amplitude_deg[LevelGround.index()]).abs() < 0.3,
                "stride span {span} far from 2A"
            );
        }
    }

    #[test]
    fn exact_amplitude_at_dense_sampling() {
        // analytic check of the waveform itself
        let peak = (0..10_000)
            .map(|i| stride_wave(i as f64 / 10_000.0))
            .fold(f64::MIN, f64::max);
        let trough = (0..10_000)
            .map(|i| stride_wave(i as f64 / 10_000.0))
            .fold(f64::MAX, f64::min);
        assert!((peak - 1.0).abs() < 1e-9);
        assert!((trough + 1.0).abs() < 1e-9);
    }

    #[test]
    fn anticipation_ramp_shifts_mean_before_switch() {
        let mut profile = quiet_profile();
        // small amplitude so the stride waveform cannot mask the ramp
        profile.amplitude_deg = [2.0, 2.0, 2.0];
        let plan = SequencePlan::new(vec![(LevelGround, 10.0), (StairAscent, 10.0)]).unwrap();
        let seq = generate_sequence(&profile, &plan).unwrap();

        // oracle: mean of generated samples over the last 0.5 s of LG
        let lo = (9.5 * SAMPLE_RATE_HZ) as usize;
        let hi = (10.0 * SAMPLE_RATE_HZ) as usize;
        let mean: f64 =
            (lo..hi).map(|k| seq.frame(k).left_deg).sum::<f64>() / (hi - lo) as f64;
        let lg = profile.mean_angle_deg[LevelGround.index()];
        let sa = profile.mean_angle_deg[StairAscent.index()];
        assert!(mean > lg.min(sa) && mean < lg.max(sa), "ramp mean {mean} not between modes");
        // labels still LG right up to the boundary
        assert_eq!(seq.label(hi - 1), LevelGround);
        assert_eq!(seq.label(hi), StairAscent);
    }

    #[test]
    fn default_cohort_is_deterministic_and_distinct() {
        let a = default_cohort(5, 99).unwrap();
        let b = default_cohort(5, 99).unwrap();
        let c = default_cohort(5, 100).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        for (pa, pc) in a.iter().zip(&c) {
            assert_ne!(pa.mean_angle_deg, pc.mean_angle_deg);
        }
        for p in &a {
            p.validate().unwrap();
        }
    }

    #[test]
    fn standard_protocol_structure() {
        let profile = default_cohort(1, 7).unwrap().remove(0);
        let seqs = standard_protocol(&profile).unwrap();
        assert_eq!(seqs.len(), 6);
        assert_eq!(seqs.iter().filter(|s| s.assist_on()).count(), 3);
        for s in &seqs {
            let mut present: Vec<WalkingMode> = s.labels().to_vec();
            present.sort();
            present.dedup();
            assert_eq!(present.len(), 3, "every sequence contains all three modes");
            let dur = s.len() as f64 / SAMPLE_RATE_HZ;
            assert!((60.0..=120.0).contains(&dur), "duration {dur} outside 60-120 s");
        }
        // third structure has at least 6 mode switches
        let switches = seqs[2]
            .labels()
            .windows(2)
            .filter(|w| w[0] != w[1])
            .count();
        assert!(switches >= 6, "structure 3 has {switches} switches");
    }

    #[test]
    fn cohort_dataset_counts_and_balance() {
        let ds = standard_cohort_dataset(5, 42).unwrap();
        assert_eq!(ds.sequence_count(), 30);
        for user in ds.user_ids() {
            let (mine, _) = ds.split_user(user);
            let mut counts = [0usize; 3];
            let mut total = 0usize;
            for s in &mine {
                for &l in s.labels() {
                    counts[l.index()] += 1;
                    total += 1;
                }
            }
            for (c, count) in counts.iter().enumerate() {
                let frac = *count as f64 / total as f64;
                assert!(frac >= 0.15, "class {c} holds only {frac:.3} of user {user}'s samples");
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let profile = default_cohort(1, 3).unwrap().remove(0);
        let plan = SequencePlan::new(vec![(StairDescent, 3.0), (LevelGround, 2.0)]).unwrap();
        let seq = generate_sequence_with(&profile, &plan, true, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(sequence_filename(&seq, 0));
        save_csv(&seq, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.user_id(), seq.user_id());
        assert!(back.assist_on());
        assert_eq!(back.len(), seq.len());
        assert_eq!(back.labels(), seq.labels());
        for k in 0..seq.len() {
            assert!((back.frame(k).left_deg - seq.frame(k).left_deg).abs() < 1e-6);
            assert!((back.frame(k).right_deg - seq.frame(k).right_deg).abs() < 1e-6);
        }
    }

    #[test]
    fn csv_rejects_unknown_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("user0_seq0_off.csv");
        fs::write(&path, "t,left_deg,right_deg,label\n0.000000,1.0,2.0,UP\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        assert!(err.to_string().contains("row 2"), "error should name the row: {err}");
    }

    #[test]
    fn csv_rejects_empty_and_non_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("user0_seq0_off.csv");
        fs::write(&empty, "").unwrap();
        assert!(load_csv(&empty).is_err());

        let bad_t = dir.path().join("user0_seq1_off.csv");
        fs::write(
            &bad_t,
            "t,left_deg,right_deg,label\n0.0,1.0,2.0,LG\n0.0,1.0,2.0,LG\n",
        )
        .unwrap();
        let err = load_csv(&bad_t).unwrap_err();
        assert!(err.to_string().contains("non-monotone"), "{err}");
    }

    #[test]
    fn degenerate_profile_is_refused() {
        let mut p = quiet_profile();
        p.noise_std_deg = 20.0; // 2*20 > |35-10|
        let plan = SequencePlan::new(vec![(LevelGround, 1.0)]).unwrap();
        assert!(generate_sequence(&p, &plan).is_err());
    }
}
