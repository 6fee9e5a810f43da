//! Trial ingestion, annotation rescaling, windowing, the four evaluation
//! splits, and a seeded synthetic dataset generator.
//!
//! A trial is one subject watching one video: an 8-channel signal track at
//! 1000 Hz plus a 2-channel (valence, arousal) annotation track at 20 Hz.
//! On disk a dataset directory holds one physiology CSV and one annotation
//! CSV per trial plus a `metadata.csv` mapping trials to their eliciting
//! quadrant; annotation files carry raw units in [-26225, 26225] and are
//! rescaled to the [0.5, 9.5] affect scale at load time.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::CHANNELS;
use crate::tensor::Tensor;

pub const SIGNAL_HZ: u64 = 1000;
pub const ANNOTATION_HZ: u64 = 20;
pub const MS_PER_ANNOTATION: u64 = 50;
/// Raw annotation units span [-RAW_ANNOTATION_LIMIT, RAW_ANNOTATION_LIMIT].
pub const RAW_ANNOTATION_LIMIT: f64 = 26225.0;

pub const CHANNEL_NAMES: [&str; CHANNELS] = [
    "ecg", "bvp", "emg_coru", "emg_trap", "emg_zygo", "gsr", "rsp", "skt",
];

const PHYSIO_HEADER: &str = "time_ms,ecg,bvp,emg_coru,emg_trap,emg_zygo,gsr,rsp,skt";
const ANNOTATION_HEADER: &str = "time_ms,valence,arousal";
const METADATA_HEADER: &str = "subject_id,video_id,quadrant";

/// Arousal-valence quadrant of the eliciting video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    Hvha,
    Hvla,
    Lvha,
    Lvla,
}

/// Fixed quadrant ordering used for fold numbering and round-robin
/// assignment.
pub const QUADRANTS: [Quadrant; 4] = [
    Quadrant::Hvha,
    Quadrant::Hvla,
    Quadrant::Lvha,
    Quadrant::Lvla,
];

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Quadrant::Hvha => "HVHA",
            Quadrant::Hvla => "HVLA",
            Quadrant::Lvha => "LVHA",
            Quadrant::Lvla => "LVLA",
        };
        f.write_str(s)
    }
}

impl FromStr for Quadrant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HVHA" => Ok(Quadrant::Hvha),
            "HVLA" => Ok(Quadrant::Hvla),
            "LVHA" => Ok(Quadrant::Lvha),
            "LVLA" => Ok(Quadrant::Lvla),
            other => Err(Error::Input(format!("unknown quadrant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrialKey {
    pub subject_id: u32,
    pub video_id: u32,
}

impl fmt::Display for TrialKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sub{}_vid{}", self.subject_id, self.video_id)
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub subject_id: u32,
    pub video_id: u32,
    pub quadrant: Quadrant,
    /// `[n_signal, 8]` at 1000 Hz, channel order as in [`CHANNEL_NAMES`].
    pub signals: Tensor,
    /// `[n_annotation, 2]` (valence, arousal), already on the affect scale.
    pub annotations: Tensor,
    /// Millisecond timestamp of each annotation row.
    pub ann_times_ms: Vec<u64>,
}

impl Trial {
    pub fn key(&self) -> TrialKey {
        TrialKey {
            subject_id: self.subject_id,
            video_id: self.video_id,
        }
    }

    pub fn n_signal_samples(&self) -> usize {
        self.signals.shape()[0]
    }
}

/// One training example: a fixed-length standardized window and the
/// annotation aligned to its final sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub window: Tensor,
    /// (valence, arousal)
    pub target: [f64; 2],
    pub origin: SampleOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOrigin {
    pub subject_id: u32,
    pub video_id: u32,
    pub end_ms: u64,
}

/// Linear map from raw annotation units onto [0.5, 9.5].
pub fn scale_annotation(raw: f64) -> Result<f64> {
    if !(-RAW_ANNOTATION_LIMIT..=RAW_ANNOTATION_LIMIT).contains(&raw) {
        return Err(Error::Range(format!(
            "annotation value {raw} outside [-{RAW_ANNOTATION_LIMIT}, {RAW_ANNOTATION_LIMIT}]"
        )));
    }
    Ok(0.5 + 9.0 * (raw + RAW_ANNOTATION_LIMIT) / (2.0 * RAW_ANNOTATION_LIMIT))
}

/// Inverse of [`scale_annotation`], used when writing annotation files.
pub fn unscale_annotation(scaled: f64) -> f64 {
    (scaled - 0.5) / 9.0 * (2.0 * RAW_ANNOTATION_LIMIT) - RAW_ANNOTATION_LIMIT
}

/// Per-channel mean and standard deviation computed from training folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

/// Population statistics over the given sample ranges of the given trials.
pub fn channel_stats(regions: &[(&Trial, Range<usize>)]) -> Result<ChannelStats> {
    let mut count = 0u64;
    let mut sum = [0.0; CHANNELS];
    let mut sumsq = [0.0; CHANNELS];
    for (trial, range) in regions {
        let n = trial.n_signal_samples();
        if range.start >= range.end || range.end > n {
            return Err(Error::Input(format!(
                "region {range:?} invalid for trial {} with {n} samples",
                trial.key()
            )));
        }
        let data = trial.signals.data();
        for t in range.clone() {
            for c in 0..CHANNELS {
                let v = data[t * CHANNELS + c];
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
        count += (range.end - range.start) as u64;
    }
    if count == 0 {
        return Err(Error::Input("channel_stats over zero samples".into()));
    }
    let mut mean = [0.0; CHANNELS];
    let mut std = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        mean[c] = sum[c] / count as f64;
        let var = (sumsq[c] / count as f64 - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt();
    }
    Ok(ChannelStats { mean, std })
}

/// `(x - mean) / std` per channel; channels with zero spread are centered
/// only.
pub fn standardize(trial: &Trial, stats: &ChannelStats) -> Trial {
    let mut data = trial.signals.data().to_vec();
    for row in data.chunks_mut(CHANNELS) {
        for c in 0..CHANNELS {
            row[c] -= stats.mean[c];
            if stats.std[c] > 0.0 {
                row[c] /= stats.std[c];
            }
        }
    }
    Trial {
        signals: Tensor::from_vec(trial.signals.shape().to_vec(), data).expect("shape unchanged"),
        ..trial.clone()
    }
}

/// Number of windows a trial yields: `floor((n - seq_len) / hop) + 1`,
/// or zero when the trial is shorter than one window.
pub fn window_count(n_samples: usize, seq_len: usize, hop: usize) -> usize {
    if n_samples < seq_len {
        0
    } else {
        (n_samples - seq_len) / hop + 1
    }
}

/// Cuts a trial into hop-strided windows. Each window's target is the
/// annotation nearest to, and not after, the window's final sample. Trials
/// shorter than `seq_len` yield an empty list; callers that care record the
/// skip.
pub fn make_windows(trial: &Trial, seq_len: usize, hop: usize) -> Result<Vec<Sample>> {
    if seq_len == 0 || hop == 0 {
        return Err(Error::Param(format!(
            "seq_len {seq_len} and hop {hop} must be >= 1"
        )));
    }
    let n = trial.n_signal_samples();
    let count = window_count(n, seq_len, hop);
    let mut out = Vec::with_capacity(count);
    let data = trial.signals.data();
    for w in 0..count {
        let start = w * hop;
        let end_ms = (start + seq_len - 1) as u64;
        let ann_idx = match trial.ann_times_ms.partition_point(|&t| t <= end_ms) {
            0 => continue, // no annotation at or before the window end
            p => p - 1,
        };
        let window = Tensor::from_vec(
            vec![seq_len, CHANNELS],
            data[start * CHANNELS..(start + seq_len) * CHANNELS].to_vec(),
        )?;
        let target = [
            trial.annotations.at(ann_idx, 0),
            trial.annotations.at(ann_idx, 1),
        ];
        out.push(Sample {
            window,
            target,
            origin: SampleOrigin {
                subject_id: trial.subject_id,
                video_id: trial.video_id,
                end_ms,
            },
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// scenario splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    AcrossTime,
    AcrossSubject,
    AcrossElicitor,
    AcrossVersion,
}

pub const SCENARIOS: [Scenario; 4] = [
    Scenario::AcrossTime,
    Scenario::AcrossSubject,
    Scenario::AcrossElicitor,
    Scenario::AcrossVersion,
];

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::AcrossTime => "across_time",
            Scenario::AcrossSubject => "across_subject",
            Scenario::AcrossElicitor => "across_elicitor",
            Scenario::AcrossVersion => "across_version",
        };
        f.write_str(s)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "across_time" => Ok(Scenario::AcrossTime),
            "across_subject" => Ok(Scenario::AcrossSubject),
            "across_elicitor" => Ok(Scenario::AcrossElicitor),
            "across_version" => Ok(Scenario::AcrossVersion),
            other => Err(Error::Input(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Windowing geometry the splitter needs for the within-trial time split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub seq_len: usize,
    pub hop: usize,
}

/// Reference to a trial, optionally restricted to a half-open range of
/// window indices under some [`WindowSpec`]. `None` means every window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentRef {
    pub key: TrialKey,
    pub windows: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub scenario: Scenario,
    pub fold_index: usize,
    pub train: Vec<SegmentRef>,
    pub test: Vec<SegmentRef>,
}

const SUBJECT_GROUPS: usize = 5;
const TIME_TRAIN_FRACTION_NUM: usize = 7;
const TIME_TRAIN_FRACTION_DEN: usize = 10;

/// Number of folds a scenario defines for a given trial roster.
pub fn fold_count(scenario: Scenario, trials: &[Trial]) -> usize {
    match scenario {
        Scenario::AcrossTime => 1,
        Scenario::AcrossSubject => {
            let mut subjects: Vec<u32> = trials.iter().map(|t| t.subject_id).collect();
            subjects.sort_unstable();
            subjects.dedup();
            subjects.len().min(SUBJECT_GROUPS)
        }
        Scenario::AcrossElicitor => 4,
        Scenario::AcrossVersion => 2,
    }
}

/// Builds the train/test partition for one fold of one scenario.
///
/// - across_time: per trial, the first 70% of windows train and the tail
///   windows test, with a gap of one `seq_len` between them so no sample is
///   shared.
/// - across_subject: subjects are shuffled by `seed` into up to five groups;
///   the fold's group is the test set.
/// - across_elicitor: fold `i` tests every trial of the `i`-th quadrant.
/// - across_version: per subject and quadrant, alternate videos form two
///   versions; fold 0 tests the second version, fold 1 the first.
pub fn scenario_split(
    trials: &[Trial],
    scenario: Scenario,
    fold_index: usize,
    seed: u64,
    win: &WindowSpec,
) -> Result<FoldPlan> {
    if trials.is_empty() {
        return Err(Error::Input(
            "scenario_split over an empty trial list".into(),
        ));
    }
    let folds = fold_count(scenario, trials);
    if fold_index >= folds {
        return Err(Error::Param(format!(
            "fold_index {fold_index} invalid: {scenario} has {folds} fold(s) for this roster"
        )));
    }
    let mut plan = FoldPlan {
        scenario,
        fold_index,
        train: Vec::new(),
        test: Vec::new(),
    };
    match scenario {
        Scenario::AcrossTime => {
            if win.seq_len == 0 || win.hop == 0 {
                return Err(Error::Param(
                    "across_time needs seq_len and hop >= 1".into(),
                ));
            }
            for t in trials {
                let n = window_count(t.n_signal_samples(), win.seq_len, win.hop);
                if n == 0 {
                    continue;
                }
                let train_end = ((n * TIME_TRAIN_FRACTION_NUM) / TIME_TRAIN_FRACTION_DEN).max(1);
                plan.train.push(SegmentRef {
                    key: t.key(),
                    windows: Some((0, train_end)),
                });
                let gap = win.seq_len.div_ceil(win.hop);
                let test_start = (train_end - 1 + gap).max(train_end);
                if test_start < n {
                    plan.test.push(SegmentRef {
                        key: t.key(),
                        windows: Some((test_start, n)),
                    });
                }
            }
        }
        Scenario::AcrossSubject => {
            let mut subjects: Vec<u32> = trials.iter().map(|t| t.subject_id).collect();
            subjects.sort_unstable();
            subjects.dedup();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..subjects.len()).rev() {
                let j = rng.gen_range(0..=i);
                subjects.swap(i, j);
            }
            let k = folds;
            let test_subjects: Vec<u32> = subjects
                .iter()
                .enumerate()
                .filter(|(i, _)| i % k == fold_index)
                .map(|(_, s)| *s)
                .collect();
            for t in trials {
                let r = SegmentRef {
                    key: t.key(),
                    windows: None,
                };
                if test_subjects.contains(&t.subject_id) {
                    plan.test.push(r);
                } else {
                    plan.train.push(r);
                }
            }
        }
        Scenario::AcrossElicitor => {
            let held_out = QUADRANTS[fold_index];
            for t in trials {
                let r = SegmentRef {
                    key: t.key(),
                    windows: None,
                };
                if t.quadrant == held_out {
                    plan.test.push(r);
                } else {
                    plan.train.push(r);
                }
            }
        }
        Scenario::AcrossVersion => {
            let mut groups: BTreeMap<(u32, Quadrant), Vec<TrialKey>> = BTreeMap::new();
            for t in trials {
                groups
                    .entry((t.subject_id, t.quadrant))
                    .or_default()
                    .push(t.key());
            }
            for keys in groups.values_mut() {
                keys.sort();
                for (pos, key) in keys.iter().enumerate() {
                    let first_version = pos % 2 == 0;
                    let r = SegmentRef {
                        key: *key,
                        windows: None,
                    };
                    let test = if fold_index == 0 {
                        !first_version
                    } else {
                        first_version
                    };
                    if test {
                        plan.test.push(r);
                    } else {
                        plan.train.push(r);
                    }
                }
            }
        }
    }
    Ok(plan)
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

const QUADRANT_CENTERS: [(f64, f64); 4] = [(7.0, 7.0), (7.0, 3.0), (3.0, 7.0), (3.0, 3.0)];
const LATENT_SWING: f64 = 1.8;

const CARRIER_HZ: [f64; CHANNELS] = [1.2, 1.1, 25.0, 30.0, 20.0, 0.05, 0.25, 0.01];
const CARRIER_AMP: [f64; CHANNELS] = [0.8, 1.0, 0.3, 0.3, 0.3, 0.6, 0.9, 0.4];
const BASELINE: [f64; CHANNELS] = [0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 31.0];
// coupling of each channel's DC level to the centered latent scores
const VALENCE_COUPLING: [f64; CHANNELS] = [0.9, -0.6, 0.3, 0.0, 0.7, 1.1, -0.5, 0.25];
const AROUSAL_COUPLING: [f64; CHANNELS] = [-0.35, 0.8, 0.95, 0.55, -0.6, 0.45, 0.85, -0.2];
const NOISE_STD: f64 = 0.05;

/// Deterministic synthetic stand-in for a recorded dataset.
///
/// Each trial carries a latent (valence, arousal) trajectory
/// `score(t) = center + 1.8 sin(2 pi f t + phase)` whose center comes from
/// the video's quadrant (round-robin over [`QUADRANTS`]) and whose slow
/// frequency and phase are seeded per trial. Channel `c` of the signal is
///
/// `baseline_c + vc_c * v~(t) + ac_c * a~(t)
///    + amp_c * (1 + 0.3 a~(t)) * sin(2 pi f_c t + theta_c) + 0.05 eps`
///
/// where `v~, a~` are the latent scores centered to [-1, 1]. The DC coupling
/// makes the targets recoverable from windowed channel means, so a model
/// with any usable capacity can learn this data.
pub fn synth_dataset(seed: u64, n_subjects: u32, n_videos: u32, duration_s: u32) -> Vec<Trial> {
    let n_sig = (duration_s as u64 * SIGNAL_HZ) as usize;
    let n_ann = (duration_s as u64 * ANNOTATION_HZ) as usize;
    let mut trials = Vec::with_capacity((n_subjects * n_videos) as usize);
    for subject_id in 1..=n_subjects {
        for video_id in 1..=n_videos {
            let quadrant = QUADRANTS[((video_id - 1) % 4) as usize];
            let (v_center, a_center) = QUADRANT_CENTERS[((video_id - 1) % 4) as usize];

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((subject_id as u64) << 32) | video_id as u64);
            let f_v = rng.gen_range(0.01..0.05);
            let f_a = rng.gen_range(0.01..0.05);
            let ph_v = rng.gen_range(0.0..std::f64::consts::TAU);
            let ph_a = rng.gen_range(0.0..std::f64::consts::TAU);
            let carrier_phase: Vec<f64> = (0..CHANNELS)
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            let carrier_freq: Vec<f64> = CARRIER_HZ
                .iter()
                .map(|&f| f * rng.gen_range(0.9..1.1))
                .collect();
            let noise = Normal::new(0.0, NOISE_STD).expect("fixed std");

            let valence =
                |t: f64| v_center + LATENT_SWING * (std::f64::consts::TAU * f_v * t + ph_v).sin();
            let arousal =
                |t: f64| a_center + LATENT_SWING * (std::f64::consts::TAU * f_a * t + ph_a).sin();

            let mut signals = Vec::with_capacity(n_sig * CHANNELS);
            for i in 0..n_sig {
                let t = i as f64 / SIGNAL_HZ as f64;
                let vt = (valence(t) - 5.0) / 4.5;
                let at = (arousal(t) - 5.0) / 4.5;
                for c in 0..CHANNELS {
                    let carrier = CARRIER_AMP[c]
                        * (1.0 + 0.3 * at)
                        * (std::f64::consts::TAU * carrier_freq[c] * t + carrier_phase[c]).sin();
                    let v = BASELINE[c]
                        + VALENCE_COUPLING[c] * vt
                        + AROUSAL_COUPLING[c] * at
                        + carrier
                        + noise.sample(&mut rng);
                    signals.push(v);
                }
            }

            let mut annotations = Vec::with_capacity(n_ann * 2);
            let mut ann_times_ms = Vec::with_capacity(n_ann);
            for j in 0..n_ann {
                let ms = j as u64 * MS_PER_ANNOTATION;
                let t = ms as f64 / 1000.0;
                annotations.push(valence(t));
                annotations.push(arousal(t));
                ann_times_ms.push(ms);
            }

            trials.push(Trial {
                subject_id,
                video_id,
                quadrant,
                signals: Tensor::from_vec(vec![n_sig, CHANNELS], signals)
                    .expect("consistent shape"),
                annotations: Tensor::from_vec(vec![n_ann, 2], annotations)
                    .expect("consistent shape"),
                ann_times_ms,
            });
        }
    }
    trials
}

// ---------------------------------------------------------------------------
// file I/O
// ---------------------------------------------------------------------------

fn physio_file(key: TrialKey) -> String {
    format!("{key}_physiology.csv")
}

fn annotation_file(key: TrialKey) -> String {
    format!("{key}_annotations.csv")
}

/// Parses one physiology/annotation file pair into a trial. Annotation
/// values are rescaled onto the affect scale; timestamps must sit on the
/// 1 ms / 50 ms grids and the two rates must agree to within one sample per
/// annotation.
pub fn load_trial(
    physio_path: &Path,
    annotation_path: &Path,
    key: TrialKey,
    quadrant: Quadrant,
) -> Result<Trial> {
    let (sig_rows, _) = parse_csv(physio_path, PHYSIO_HEADER, 1)?;
    let (ann_rows_raw, ann_times) =
        parse_csv(annotation_path, ANNOTATION_HEADER, MS_PER_ANNOTATION)?;

    if sig_rows.is_empty() || ann_rows_raw.is_empty() {
        return Err(Error::Parse {
            path: physio_path.display().to_string(),
            row: 1,
            msg: "trial has no data rows".into(),
        });
    }
    let ratio = sig_rows.len() as f64 / ann_rows_raw.len() as f64;
    if (ratio - 50.0).abs() > 1.0 {
        return Err(Error::Parse {
            path: annotation_path.display().to_string(),
            row: 1,
            msg: format!(
                "rate mismatch: {} signal rows vs {} annotation rows (ratio {ratio:.2}, expected 50 +- 1)",
                sig_rows.len(),
                ann_rows_raw.len()
            ),
        });
    }

    let mut annotations = Vec::with_capacity(ann_rows_raw.len() * 2);
    for (row_idx, row) in ann_rows_raw.iter().enumerate() {
        for &raw in row {
            annotations.push(scale_annotation(raw).map_err(|e| match e {
                Error::Range(msg) => Error::Range(format!(
                    "{msg} ({} row {})",
                    annotation_path.display(),
                    row_idx + 2
                )),
                other => other,
            })?);
        }
    }

    let n_sig = sig_rows.len();
    Ok(Trial {
        subject_id: key.subject_id,
        video_id: key.video_id,
        quadrant,
        signals: Tensor::from_vec(
            vec![n_sig, CHANNELS],
            sig_rows.into_iter().flatten().collect(),
        )?,
        annotations: Tensor::from_vec(vec![ann_times.len(), 2], annotations)?,
        ann_times_ms: ann_times,
    })
}

/// Shared CSV reader: checks the header, the fixed timestamp grid and the
/// column count, returning data rows plus timestamps.
fn parse_csv(path: &Path, header: &str, step_ms: u64) -> Result<(Vec<Vec<f64>>, Vec<u64>)> {
    let file =
        fs::File::open(path).map_err(|e| Error::Io(format!("opening {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let expected_cols = header.split(',').count();
    let mut rows = Vec::new();
    let mut times = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
        let row = i + 1;
        if i == 0 {
            if line.trim() != header {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    row,
                    msg: format!("expected header '{header}', got '{}'", line.trim()),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(Error::Parse {
                path: path.display().to_string(),
                row,
                msg: format!("expected {expected_cols} columns, got {}", fields.len()),
            });
        }
        let t: u64 = fields[0].trim().parse().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            row,
            msg: format!("column time_ms: {e}"),
        })?;
        let expected_t = times.len() as u64 * step_ms;
        if t != expected_t {
            return Err(Error::Parse {
                path: path.display().to_string(),
                row,
                msg: format!(
                    "column time_ms: timestamp {t} breaks the {step_ms} ms grid (expected {expected_t})"
                ),
            });
        }
        let mut values = Vec::with_capacity(expected_cols - 1);
        for (ci, field) in fields[1..].iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|e| Error::Parse {
                path: path.display().to_string(),
                row,
                msg: format!(
                    "column {}: {e}",
                    header.split(',').nth(ci + 1).unwrap_or("?")
                ),
            })?;
            values.push(v);
        }
        times.push(t);
        rows.push(values);
    }
    Ok((rows, times))
}

/// Writes a dataset directory: metadata plus one physiology and one
/// annotation file per trial. Floats are written in shortest round-trip
/// decimal; annotations are written back in raw units.
pub fn write_dataset(trials: &[Trial], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("creating {}: {e}", dir.display())))?;
    let mut sorted: Vec<&Trial> = trials.iter().collect();
    sorted.sort_by_key(|t| t.key());

    let mut meta = BufWriter::new(
        fs::File::create(dir.join("metadata.csv"))
            .map_err(|e| Error::Io(format!("creating metadata.csv: {e}")))?,
    );
    writeln!(meta, "{METADATA_HEADER}")?;
    for t in &sorted {
        writeln!(meta, "{},{},{}", t.subject_id, t.video_id, t.quadrant)?;
    }
    meta.flush()?;

    for t in sorted {
        let mut phys = BufWriter::new(fs::File::create(dir.join(physio_file(t.key())))?);
        writeln!(phys, "{PHYSIO_HEADER}")?;
        let data = t.signals.data();
        for (i, row) in data.chunks(CHANNELS).enumerate() {
            write!(phys, "{i}")?;
            for v in row {
                write!(phys, ",{v}")?;
            }
            writeln!(phys)?;
        }
        phys.flush()?;

        let mut ann = BufWriter::new(fs::File::create(dir.join(annotation_file(t.key())))?);
        writeln!(ann, "{ANNOTATION_HEADER}")?;
        for (j, &ms) in t.ann_times_ms.iter().enumerate() {
            writeln!(
                ann,
                "{ms},{},{}",
                unscale_annotation(t.annotations.at(j, 0)),
                unscale_annotation(t.annotations.at(j, 1))
            )?;
        }
        ann.flush()?;
    }
    Ok(())
}

/// Loads every trial listed in a dataset directory's metadata, in
/// (subject, video) order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Trial>> {
    let meta_path = dir.join("metadata.csv");
    let file = fs::File::open(&meta_path)
        .map_err(|e| Error::Io(format!("opening {}: {e}", meta_path.display())))?;
    let reader = BufReader::new(file);
    let mut entries: Vec<(TrialKey, Quadrant)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Io(e.to_string()))?;
        let row = i + 1;
        if i == 0 {
            if line.trim() != METADATA_HEADER {
                return Err(Error::Parse {
                    path: meta_path.display().to_string(),
                    row,
                    msg: format!("expected header '{METADATA_HEADER}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: meta_path.display().to_string(),
                row,
                msg: format!("expected 3 columns, got {}", fields.len()),
            });
        }
        let parse_id = |s: &str, col: &str| -> Result<u32> {
            s.trim().parse().map_err(|e| Error::Parse {
                path: meta_path.display().to_string(),
                row,
                msg: format!("column {col}: {e}"),
            })
        };
        entries.push((
            TrialKey {
                subject_id: parse_id(fields[0], "subject_id")?,
                video_id: parse_id(fields[1], "video_id")?,
            },
            fields[2].trim().parse()?,
        ));
    }
    entries.sort_by_key(|(k, _)| *k);
    let mut trials = Vec::with_capacity(entries.len());
    for (key, quadrant) in entries {
        trials.push(load_trial(
            &dir.join(physio_file(key)),
            &dir.join(annotation_file(key)),
            key,
            quadrant,
        )?);
    }
    Ok(trials)
}
