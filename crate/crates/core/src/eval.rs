//! RMSE metric, per-scenario fold evaluation of a trained model, and the
//! scenario-level report (one row per split with RMSE and STD for each
//! affect dimension, plus the mean scenario RMSE over both dimensions).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    channel_stats, fold_count, make_windows, scenario_split, standardize, ChannelStats, FoldPlan,
    Sample, Scenario, SegmentRef, Trial, TrialKey, WindowSpec, SCENARIOS,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::train::ScheduleConfig;

/// `sqrt(mean((p - t)^2))` over paired slices.
pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Input("rmse of empty slices".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::Input(format!(
            "rmse length mismatch: {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let sq: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sq / preds.len() as f64).sqrt())
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Scores of one fold (or one test sequence, for the within-trial split).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldScores {
    pub label: String,
    pub arousal_rmse: f64,
    pub valence_rmse: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: Scenario,
    pub arousal_rmse: f64,
    pub arousal_std: f64,
    pub valence_rmse: f64,
    pub valence_std: f64,
    pub folds: Vec<FoldScores>,
    /// Folds or sequences that produced no test windows.
    pub skipped: Vec<String>,
}

/// Flat per-scenario, per-dimension view with fixed key names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricEntry {
    pub scenario: Scenario,
    pub dimension: String,
    pub rmse: f64,
    pub std: f64,
    pub folds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Documents what the STD column aggregates.
    pub note: String,
    pub rows: Vec<ScenarioRow>,
    pub entries: Vec<MetricEntry>,
    /// Mean of all scenario RMSE values across both dimensions.
    pub overall_rmse: f64,
}

const STD_NOTE: &str = "rmse is the mean over folds; std is the population standard deviation \
over per-fold rmse values (per test sequence for across_time); overall_rmse is the mean \
scenario rmse over both dimensions";

/// Windows of one segment reference, standardized with the fold's training
/// statistics.
fn segment_samples(
    standardized: &mut BTreeMap<TrialKey, Trial>,
    by_key: &BTreeMap<TrialKey, &Trial>,
    stats: &ChannelStats,
    seg: &SegmentRef,
    win: &WindowSpec,
) -> Result<Vec<Sample>> {
    let trial = standardized
        .entry(seg.key)
        .or_insert_with(|| standardize(by_key[&seg.key], stats));
    let all = make_windows(trial, win.seq_len, win.hop)?;
    Ok(match seg.windows {
        None => all,
        Some((lo, hi)) => all[lo.min(all.len())..hi.min(all.len())].to_vec(),
    })
}

fn train_stat_regions<'a>(
    plan: &FoldPlan,
    by_key: &BTreeMap<TrialKey, &'a Trial>,
    win: &WindowSpec,
) -> Vec<(&'a Trial, std::ops::Range<usize>)> {
    let mut regions = Vec::new();
    for seg in &plan.train {
        let trial = by_key[&seg.key];
        let range = match seg.windows {
            None => 0..trial.n_signal_samples(),
            Some((lo, hi)) => {
                if hi == 0 || lo >= hi {
                    continue;
                }
                (lo * win.hop)..(((hi - 1) * win.hop + win.seq_len).min(trial.n_signal_samples()))
            }
        };
        if range.start < range.end {
            regions.push((trial, range));
        }
    }
    regions
}

/// Standardized train/test samples for one fold, used by the training CLI.
/// Returns the per-channel statistics alongside so the caller can persist
/// them, and the keys of trials that were too short to window.
pub fn fold_samples(
    trials: &[Trial],
    plan: &FoldPlan,
    win: &WindowSpec,
) -> Result<(Vec<Sample>, Vec<Sample>, ChannelStats, Vec<String>)> {
    let by_key: BTreeMap<TrialKey, &Trial> = trials.iter().map(|t| (t.key(), t)).collect();
    let stats = channel_stats(&train_stat_regions(plan, &by_key, win))?;
    let mut standardized = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut collect = |segs: &[SegmentRef], warnings: &mut Vec<String>| -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for seg in segs {
            let samples = segment_samples(&mut standardized, &by_key, &stats, seg, win)?;
            if samples.is_empty() {
                warnings.push(format!("{} yields no windows", seg.key));
            }
            out.extend(samples);
        }
        Ok(out)
    };
    let train = collect(&plan.train, &mut warnings)?;
    let test = collect(&plan.test, &mut warnings)?;
    Ok((train, test, stats, warnings))
}

/// Evaluates a trained model on every fold of one scenario: standardization
/// statistics come from the fold's training side, inference is clamped, and
/// RMSE is computed per dimension. The within-trial split is scored per
/// test sequence; the other scenarios pool each fold's test windows.
pub fn evaluate_scenario(
    model: &Model,
    trials: &[Trial],
    scenario: Scenario,
    seed: u64,
    hop: usize,
) -> Result<ScenarioRow> {
    let win = WindowSpec {
        seq_len: model.config.seq_len,
        hop,
    };
    let by_key: BTreeMap<TrialKey, &Trial> = trials.iter().map(|t| (t.key(), t)).collect();
    let mut folds = Vec::new();
    let mut skipped = Vec::new();

    for fold_index in 0..fold_count(scenario, trials) {
        let plan = scenario_split(trials, scenario, fold_index, seed, &win)?;
        if plan.train.is_empty() {
            skipped.push(format!("fold{fold_index} (no training segments)"));
            continue;
        }
        let stats = channel_stats(&train_stat_regions(&plan, &by_key, &win))?;
        let mut standardized = BTreeMap::new();

        if scenario == Scenario::AcrossTime {
            // one logical fold per trial: score each test sequence separately
            for seg in &plan.test {
                let samples = segment_samples(&mut standardized, &by_key, &stats, seg, &win)?;
                match score_samples(model, &samples, seg.key.to_string())? {
                    Some(f) => folds.push(f),
                    None => skipped.push(format!("{} (no test windows)", seg.key)),
                }
            }
            let tested: Vec<TrialKey> = plan.test.iter().map(|s| s.key).collect();
            for t in trials {
                if !tested.contains(&t.key()) {
                    skipped.push(format!("{} (no test windows)", t.key()));
                }
            }
        } else {
            let mut samples = Vec::new();
            for seg in &plan.test {
                samples.extend(segment_samples(
                    &mut standardized,
                    &by_key,
                    &stats,
                    seg,
                    &win,
                )?);
            }
            let label = match scenario {
                Scenario::AcrossElicitor => {
                    format!("fold{fold_index}:{}", crate::data::QUADRANTS[fold_index])
                }
                _ => format!("fold{fold_index}"),
            };
            match score_samples(model, &samples, label.clone())? {
                Some(f) => folds.push(f),
                None => skipped.push(format!("{label} (no test windows)")),
            }
        }
    }

    if folds.is_empty() {
        return Err(Error::Input(format!(
            "{scenario}: every fold was empty; nothing to evaluate"
        )));
    }
    let arousal: Vec<f64> = folds.iter().map(|f| f.arousal_rmse).collect();
    let valence: Vec<f64> = folds.iter().map(|f| f.valence_rmse).collect();
    Ok(ScenarioRow {
        scenario,
        arousal_rmse: arousal.iter().sum::<f64>() / arousal.len() as f64,
        arousal_std: population_std(&arousal),
        valence_rmse: valence.iter().sum::<f64>() / valence.len() as f64,
        valence_std: population_std(&valence),
        folds,
        skipped,
    })
}

fn score_samples(model: &Model, samples: &[Sample], label: String) -> Result<Option<FoldScores>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut pv = Vec::with_capacity(samples.len());
    let mut pa = Vec::with_capacity(samples.len());
    let mut tv = Vec::with_capacity(samples.len());
    let mut ta = Vec::with_capacity(samples.len());
    for s in samples {
        let p = model.predict(&s.window)?;
        pv.push(p.valence);
        pa.push(p.arousal);
        tv.push(s.target[0]);
        ta.push(s.target[1]);
    }
    Ok(Some(FoldScores {
        label,
        arousal_rmse: rmse(&pa, &ta)?,
        valence_rmse: rmse(&pv, &tv)?,
        windows: samples.len(),
    }))
}

/// Runs all four scenarios and assembles the report.
pub fn evaluate_all(model: &Model, trials: &[Trial], seed: u64, hop: usize) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(SCENARIOS.len());
    for scenario in SCENARIOS {
        rows.push(evaluate_scenario(model, trials, scenario, seed, hop)?);
    }
    let overall: f64 = rows
        .iter()
        .flat_map(|r| [r.arousal_rmse, r.valence_rmse])
        .sum::<f64>()
        / (2 * rows.len()) as f64;
    let entries = rows
        .iter()
        .flat_map(|r| {
            [
                MetricEntry {
                    scenario: r.scenario,
                    dimension: "arousal".into(),
                    rmse: r.arousal_rmse,
                    std: r.arousal_std,
                    folds: r.folds.len(),
                },
                MetricEntry {
                    scenario: r.scenario,
                    dimension: "valence".into(),
                    rmse: r.valence_rmse,
                    std: r.valence_std,
                    folds: r.folds.len(),
                },
            ]
        })
        .collect();
    Ok(EvalReport {
        note: STD_NOTE.to_string(),
        rows,
        entries,
        overall_rmse: overall,
    })
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Io(format!("report serialization failed: {e}")))?;
        fs::write(path, body).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&body).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            row: 0,
            msg: e.to_string(),
        })
    }

    /// Plain-text table with one row per scenario, arousal columns before
    /// valence columns.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("# ");
        out.push_str(&self.note);
        out.push('\n');
        out.push_str(&format!(
            "{:<26} {:>12} {:>10} {:>12} {:>10}\n",
            "Scenario", "Arousal RMSE", "STD", "Valence RMSE", "STD"
        ));
        for r in &self.rows {
            let name = match r.scenario {
                Scenario::AcrossTime => "Across-time scenario",
                Scenario::AcrossSubject => "Across-subject scenario",
                Scenario::AcrossElicitor => "Across-elicitor scenario",
                Scenario::AcrossVersion => "Across-version scenario",
            };
            out.push_str(&format!(
                "{:<26} {:>12.4} {:>10.4} {:>12.4} {:>10.4}\n",
                name, r.arousal_rmse, r.arousal_std, r.valence_rmse, r.valence_std
            ));
            for s in &r.skipped {
                out.push_str(&format!("    skipped: {s}\n"));
            }
        }
        out.push_str(&format!(
            "Overall (mean scenario RMSE): {:.4}\n",
            self.overall_rmse
        ));
        out
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hop: usize,
    pub train_scenario: Scenario,
    pub train_fold: usize,
    pub split_seed: u64,
    pub data_dir: String,
    pub n_trials: usize,
    pub checkpoint: String,
    pub created_unix_s: u64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Io(format!("manifest serialization failed: {e}")))?;
        fs::write(path, body).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))?;
        Ok(())
    }
}
