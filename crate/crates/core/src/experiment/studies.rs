//! The study runners. Each works over `(replicate seed, subject)` units in
//! parallel, collects results in unit order and writes CSV tables plus SVG
//! plots whose first line carries the config hash and seed list.
//!
//! A failed training run is logged, listed in the result and left out of
//! every aggregate; the study carries on.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use super::plot::{Chart, Series};
use super::workbench::{PoolKind, Workbench};
use crate::array::SensorFrame;
use crate::dataset::{split_random, split_shift_binned, subset_training, BuildStats, Dataset, SplitSpec, Splits};
use crate::metrics::{accuracy_map, relative_change, spatial_accuracy, SpatialAccuracyMap};
use crate::seed::tag;
use crate::shift::{ShiftBin, ShiftDistribution, MAX_SHIFT_MM};
use crate::synth_eye::GazeSample;
use crate::trainer::{fine_tune, train_fs, Regimen, TrainConfig, TrainedModel};
use crate::{Error, Result, SubjectId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Study {
    DataScale,
    ShiftBins,
    ExtendedRange,
    EpochCurves,
    ShiftRobustness,
}

impl Study {
    pub const ALL: [Study; 5] = [
        Study::DataScale,
        Study::ShiftBins,
        Study::ExtendedRange,
        Study::EpochCurves,
        Study::ShiftRobustness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::DataScale => "data-scale",
            Study::ShiftBins => "shift-bins",
            Study::ExtendedRange => "extended-range",
            Study::EpochCurves => "epoch-curves",
            Study::ShiftRobustness => "shift-robustness",
        }
    }

    /// Seed coordinate of the study's split and training streams. Epoch
    /// curves and the robustness check reuse the data-scale partition.
    fn code(self) -> u64 {
        match self {
            Study::DataScale => 1,
            Study::ShiftBins => 2,
            Study::ExtendedRange => 3,
            Study::EpochCurves => 4,
            Study::ShiftRobustness => 5,
        }
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Study> {
        Study::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown experiment {s:?}")))
    }
}

/// A training run that was excluded from the aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub study: Study,
    pub seed: u64,
    pub subject: SubjectId,
    pub what: String,
    pub error: String,
}

/// Aggregate over all runs of one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub runs: usize,
    pub mean: f64,
    /// Population standard deviation across runs.
    pub std: f64,
    /// Median over seeds of the per-seed cohort mean.
    pub median_of_seed_means: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Summary of `(seed, value)` pairs; `None` when there are none.
pub fn summarize(values: &[(u64, f64)]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.1).sum::<f64>() / n;
    let var = values.iter().map(|v| (v.1 - mean).powi(2)).sum::<f64>() / n;
    let mut per_seed: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for &(s, v) in values {
        let e = per_seed.entry(s).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let seed_means: Vec<f64> = per_seed.values().map(|(s, k)| s / *k as f64).collect();
    Some(Summary {
        runs: values.len(),
        mean,
        std: var.sqrt(),
        median_of_seed_means: median(&seed_means)?,
    })
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f).unwrap_or_else(|| "NA".to_string())
}

fn summary_cols(s: &Option<Summary>) -> String {
    match s {
        Some(s) => format!("{},{},{},{}", s.runs, f(s.mean), f(s.std), f(s.median_of_seed_means)),
        None => "0,NA,NA,NA".to_string(),
    }
}

const SUMMARY_HEADER: &str = "runs,mean_deg,std_deg,median_seed_mean_deg";

/// Writes `header_comment`, the column line and `rows` to `dir/name`.
pub fn write_table(dir: &Path, name: &str, header_comment: &str, columns: &str, rows: &[String]) -> Result<PathBuf> {
    let mut text = String::with_capacity(64 * (rows.len() + 2));
    text.push_str(header_comment);
    text.push('\n');
    text.push_str(columns);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_file(dir, name, &text)
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, text)?;
    Ok(path)
}

fn write_svg(dir: &Path, name: &str, header_comment: &str, chart: &Chart) -> Result<PathBuf> {
    let comment = header_comment.trim_start_matches('#').trim();
    write_file(dir, name, &format!("<!-- {comment} -->\n{}", chart.to_svg()))
}

/// Parallel map over `(replicate, subject index)`, results in unit order.
fn over_units<T: Send>(
    wb: &Workbench,
    unit: impl Fn(u64, usize) -> (Vec<T>, Vec<Failure>) + Sync,
) -> (Vec<T>, Vec<Failure>) {
    let units: Vec<(u64, usize)> = wb
        .config()
        .seeds
        .iter()
        .flat_map(|&s| (0..wb.sessions().len()).map(move |i| (s, i)))
        .collect();
    let parts: Vec<(Vec<T>, Vec<Failure>)> = units.par_iter().map(|&(s, i)| unit(s, i)).collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, fl) in parts {
        rows.extend(r);
        failures.extend(fl);
    }
    for fl in &failures {
        log::warn!(
            "{} seed {} subject {} {}: {} (excluded)",
            fl.study.name(),
            fl.seed,
            fl.subject,
            fl.what,
            fl.error
        );
    }
    (rows, failures)
}

struct UnitCtx<'a> {
    wb: &'a Workbench,
    study: Study,
    seed: u64,
    subject: SubjectId,
    failures: Vec<Failure>,
}

impl UnitCtx<'_> {
    fn attempt<T>(&mut self, what: impl FnOnce() -> String, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.failures.push(Failure {
                    study: self.study,
                    seed: self.seed,
                    subject: self.subject,
                    what: what(),
                    error: e.to_string(),
                });
                None
            }
        }
    }

    fn split_seed(&self) -> u64 {
        self.wb.seed(&[tag::SPLIT, self.study.code(), self.subject as u64, self.seed])
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.wb.seed(&[tag::TRAIN, self.study.code(), self.subject as u64, self.seed]),
            ..self.wb.config().train
        }
    }

    /// FS from random weights or FT from this subject's pre-trained weights.
    fn train(
        &self,
        regimen: Regimen,
        pool: (ShiftDistribution, PoolKind),
        dataset: &Dataset,
        splits: &Splits,
        config: &TrainConfig,
    ) -> Result<TrainedModel> {
        match regimen {
            Regimen::FromScratch => train_fs(dataset, splits, config),
            Regimen::FineTune => {
                let start = self.wb.pretrained(&pool.0, pool.1, self.seed, self.subject)?;
                let mut model = fine_tune(&start, dataset, splits, config)?;
                model.provenance.pretrain_subjects = self.wb.pool_subjects(&pool.0, pool.1, self.seed, self.subject);
                Ok(model)
            }
        }
    }
}

/// Predictions and truths of `model` on `indices`.
fn predict(model: &TrainedModel, dataset: &Dataset, indices: &[usize]) -> Result<(Vec<GazeSample>, Vec<GazeSample>)> {
    let frames: Vec<SensorFrame> = indices.iter().map(|&i| dataset.records()[i]).collect();
    let preds = model.predict(&frames)?;
    Ok((preds, frames.iter().map(|r| r.gaze_truth).collect()))
}

fn evaluate(model: &TrainedModel, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    let (p, t) = predict(model, dataset, indices)?;
    spatial_accuracy(&p, &t)
}

fn with_unit<T>(
    wb: &Workbench,
    study: Study,
    seed: u64,
    idx: usize,
    body: impl FnOnce(&mut UnitCtx) -> Vec<T>,
) -> (Vec<T>, Vec<Failure>) {
    let mut ctx = UnitCtx {
        wb,
        study,
        seed,
        subject: wb.sessions()[idx].subject_id(),
        failures: Vec::new(),
    };
    let rows = body(&mut ctx);
    (rows, ctx.failures)
}

fn needs_ft(wb: &Workbench) -> bool {
    wb.config().regimens.contains(&Regimen::FineTune)
}

// ---------------------------------------------------------------- data scale

#[derive(Debug, Clone, PartialEq)]
pub struct DataScaleRow {
    pub fraction: f64,
    pub regimen: Regimen,
    pub seed: u64,
    pub subject: SubjectId,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy_deg: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeChange {
    pub regimen: Regimen,
    pub full_deg: f64,
    pub reduced_deg: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataScaleResult {
    pub rows: Vec<DataScaleRow>,
    pub summary: Vec<(f64, Regimen, Option<Summary>)>,
    /// FS predictions at the map fraction, pooled over subjects and seeds.
    pub map: Option<SpatialAccuracyMap>,
    pub relative: Vec<RelativeChange>,
    pub failures: Vec<Failure>,
}

impl DataScaleResult {
    pub fn summary_for(&self, fraction: f64, regimen: Regimen) -> Option<Summary> {
        self.summary
            .iter()
            .find(|(fr, r, _)| *fr == fraction && *r == regimen)
            .and_then(|s| s.2)
    }
}

pub fn run_data_scale_sweep(wb: &Workbench) -> Result<DataScaleResult> {
    let cfg = wb.config();
    let ds_cfg = &cfg.data_scale;
    let dist = ds_cfg.shift;
    wb.prepare(&[dist])?;
    if needs_ft(wb) {
        wb.ensure_pretrained(&dist, PoolKind::All)?;
    }
    type Unit = (DataScaleRow, Option<(Vec<GazeSample>, Vec<GazeSample>)>);
    let (units, failures): (Vec<Unit>, _) = over_units(wb, |seed, idx| {
        with_unit(wb, Study::DataScale, seed, idx, |ctx| {
            let mut out = Vec::new();
            let Some(sets) = ctx.attempt(|| "dataset".into(), wb.datasets(&dist, seed)) else {
                return out;
            };
            let data = &sets[idx];
            let Some(full) = ctx.attempt(|| "split".into(), split_random(data, &cfg.data_scale_split(ctx.split_seed())))
            else {
                return out;
            };
            let subset_seed = wb.seed(&[tag::SUBSET, ctx.subject as u64, seed]);
            let tc = ctx.train_config();
            for &fraction in &ds_cfg.fractions {
                let Some(splits) = ctx.attempt(
                    || format!("fraction {fraction}"),
                    subset_training(&full, fraction, subset_seed),
                ) else {
                    continue;
                };
                for &regimen in &cfg.regimens {
                    let what = || format!("{regimen} fraction {fraction}");
                    let Some(mut model) = ctx.attempt(what, ctx.train(regimen, (dist, PoolKind::All), data, &splits, &tc))
                    else {
                        continue;
                    };
                    model.provenance.data_fraction = fraction;
                    let Some((p, t)) = ctx.attempt(what, predict(&model, data, &splits.test)) else {
                        continue;
                    };
                    let Some(acc) = ctx.attempt(what, spatial_accuracy(&p, &t)) else {
                        continue;
                    };
                    let keep = (regimen == Regimen::FromScratch && fraction == ds_cfg.map_fraction).then_some((p, t));
                    out.push((
                        DataScaleRow {
                            fraction,
                            regimen,
                            seed,
                            subject: ctx.subject,
                            n_train: splits.train.len(),
                            n_test: splits.test.len(),
                            accuracy_deg: acc,
                            best_epoch: model.history.best_epoch,
                        },
                        keep,
                    ));
                }
            }
            out
        })
    });
    let mut map_preds = Vec::new();
    let mut map_truths = Vec::new();
    let mut rows = Vec::with_capacity(units.len());
    for (row, keep) in units {
        if let Some((p, t)) = keep {
            map_preds.extend(p);
            map_truths.extend(t);
        }
        rows.push(row);
    }
    let mut summary = Vec::new();
    for &fraction in &ds_cfg.fractions {
        for &regimen in &cfg.regimens {
            let vals: Vec<(u64, f64)> = rows
                .iter()
                .filter(|r| r.fraction == fraction && r.regimen == regimen)
                .map(|r| (r.seed, r.accuracy_deg))
                .collect();
            summary.push((fraction, regimen, summarize(&vals)));
        }
    }
    let map = if map_preds.is_empty() {
        None
    } else {
        Some(accuracy_map(&map_preds, &map_truths, &cfg.accuracy_grid)?)
    };
    let mut result = DataScaleResult {
        rows,
        summary,
        map,
        relative: Vec::new(),
        failures,
    };
    for &regimen in &cfg.regimens {
        let full = result.summary_for(1.0, regimen);
        let reduced = result.summary_for(ds_cfg.reduced_fraction, regimen);
        if let (Some(a), Some(b)) = (full, reduced) {
            result.relative.push(RelativeChange {
                regimen,
                full_deg: a.mean,
                reduced_deg: b.mean,
                percent: relative_change(a.mean, b.mean)?,
            });
        }
    }
    Ok(result)
}

impl DataScaleResult {
    pub fn write(&self, wb: &Workbench, dir: &Path) -> Result<Vec<PathBuf>> {
        let head = wb.config().header_comment();
        let mut files = vec![write_table(
            dir,
            "data_scale_runs.csv",
            &head,
            "fraction,regimen,seed,subject,n_train,n_test,accuracy_deg,best_epoch",
            &self
                .rows
                .iter()
                .map(|r| {
                    format!(
                        "{},{},{},{},{},{},{},{}",
                        r.fraction,
                        r.regimen,
                        r.seed,
                        r.subject,
                        r.n_train,
                        r.n_test,
                        f(r.accuracy_deg),
                        r.best_epoch
                    )
                })
                .collect::<Vec<_>>(),
        )?];
        files.push(write_table(
            dir,
            "data_scale_summary.csv",
            &head,
            &format!("fraction,regimen,{SUMMARY_HEADER}"),
            &self
                .summary
                .iter()
                .map(|(fr, r, s)| format!("{fr},{r},{}", summary_cols(s)))
                .collect::<Vec<_>>(),
        )?);
        files.push(write_table(
            dir,
            "data_scale_relative.csv",
            &head,
            "regimen,full_deg,reduced_deg,percent_change",
            &self
                .relative
                .iter()
                .map(|c| format!("{},{},{},{}", c.regimen, f(c.full_deg), f(c.reduced_deg), f(c.percent)))
                .collect::<Vec<_>>(),
        )?);
        if let Some(map) = &self.map {
            files.push(write_file(dir, "accuracy_map.csv", &format!("{head}\n{}", map.to_csv()))?);
            files.push(write_file(dir, "accuracy_map.txt", &format!("{head}\n{}", map.to_text()))?);
        }
        let series = wb
            .config()
            .regimens
            .iter()
            .map(|&reg| {
                Series::new(
                    reg.label(),
                    self.summary
                        .iter()
                        .filter(|(_, r, _)| *r == reg)
                        .filter_map(|(fr, _, s)| s.map(|s| (100.0 * fr, s.mean, Some(s.std)))),
                )
            })
            .collect();
        files.push(write_svg(
            dir,
            "data_scale.svg",
            &head,
            &Chart {
                title: "Spatial accuracy versus training data".into(),
                x_label: "training data used (%)".into(),
                y_label: "spatial accuracy (deg)".into(),
                series,
                x_ticks: None,
            },
        )?);
        Ok(files)
    }
}

// ---------------------------------------------------------------- shift bins

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftBinRow {
    pub seed: u64,
    pub subject: SubjectId,
    pub regimen: Regimen,
    pub bin: ShiftBin,
    /// B1 lies inside the training shift range and serves as benchmark.
    pub in_training: bool,
    pub n_test: usize,
    pub accuracy_deg: Option<f64>,
    /// Accuracy minus the same model's B1 accuracy.
    pub delta_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftBinResult {
    pub rows: Vec<ShiftBinRow>,
    /// `(regimen, bin, accuracy summary, delta summary)`.
    pub summary: Vec<(Regimen, ShiftBin, Option<Summary>, Option<Summary>)>,
    pub warnings: Vec<String>,
    pub failures: Vec<Failure>,
}

impl ShiftBinResult {
    pub fn accuracy(&self, regimen: Regimen, bin: ShiftBin) -> Option<Summary> {
        self.summary.iter().find(|s| s.0 == regimen && s.1 == bin).and_then(|s| s.2)
    }

    pub fn delta(&self, regimen: Regimen, bin: ShiftBin) -> Option<Summary> {
        self.summary.iter().find(|s| s.0 == regimen && s.1 == bin).and_then(|s| s.3)
    }
}

pub fn run_shift_bin_study(wb: &Workbench) -> Result<ShiftBinResult> {
    let cfg = wb.config();
    let sb = &cfg.shift_bins;
    let dist = sb.shift;
    wb.prepare(&[dist])?;
    if needs_ft(wb) {
        wb.ensure_pretrained(&dist, PoolKind::InRange)?;
    }
    let (units, failures): (Vec<(Vec<ShiftBinRow>, Vec<String>)>, _) = over_units(wb, |seed, idx| {
        with_unit(wb, Study::ShiftBins, seed, idx, |ctx| {
            let Some(sets) = ctx.attempt(|| "dataset".into(), wb.datasets(&dist, seed)) else {
                return Vec::new();
            };
            let data = &sets[idx];
            let spec = SplitSpec {
                bin_norm: sb.bin_norm,
                ..SplitSpec::shift_binned(sb.split, ctx.split_seed())
            };
            let Some(splits) = ctx.attempt(|| "split".into(), split_shift_binned(data, &spec)) else {
                return Vec::new();
            };
            let tc = ctx.train_config();
            let mut rows = Vec::new();
            for &regimen in &cfg.regimens {
                let what = || regimen.to_string();
                let Some(model) = ctx.attempt(what, ctx.train(regimen, (dist, PoolKind::InRange), data, &splits, &tc))
                else {
                    continue;
                };
                let mut per_bin = BTreeMap::new();
                for bin in ShiftBin::ALL {
                    let idx = splits.bin_tests.get(&bin).map(Vec::as_slice).unwrap_or(&[]);
                    let acc = if idx.is_empty() {
                        None
                    } else {
                        ctx.attempt(|| format!("{regimen} {bin}"), evaluate(&model, data, idx))
                    };
                    per_bin.insert(bin, (idx.len(), acc));
                }
                let base = per_bin[&ShiftBin::B1].1;
                for (bin, (n, acc)) in per_bin {
                    rows.push(ShiftBinRow {
                        seed,
                        subject: ctx.subject,
                        regimen,
                        bin,
                        in_training: bin == ShiftBin::B1,
                        n_test: n,
                        accuracy_deg: acc,
                        delta_deg: base.and_then(|b| acc.map(|a| a - b)),
                    });
                }
            }
            let warnings = splits
                .warnings
                .iter()
                .map(|w| format!("seed {seed} subject {}: {w}", ctx.subject))
                .collect();
            vec![(rows, warnings)]
        })
    });
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (r, w) in units {
        rows.extend(r);
        warnings.extend(w);
    }
    let mut summary = Vec::new();
    for &regimen in &cfg.regimens {
        for bin in ShiftBin::ALL {
            let sel = rows.iter().filter(|r| r.regimen == regimen && r.bin == bin);
            let acc: Vec<(u64, f64)> = sel.clone().filter_map(|r| r.accuracy_deg.map(|a| (r.seed, a))).collect();
            let delta: Vec<(u64, f64)> = sel.filter_map(|r| r.delta_deg.map(|a| (r.seed, a))).collect();
            summary.push((regimen, bin, summarize(&acc), summarize(&delta)));
        }
    }
    Ok(ShiftBinResult {
        rows,
        summary,
        warnings,
        failures,
    })
}

impl ShiftBinResult {
    pub fn write(&self, wb: &Workbench, dir: &Path) -> Result<Vec<PathBuf>> {
        let head = wb.config().header_comment();
        let mut files = vec![write_table(
            dir,
            "shift_bins_runs.csv",
            &head,
            "seed,subject,regimen,bin,shift_range_mm,in_training,n_test,accuracy_deg,delta_vs_b1_deg",
            &self
                .rows
                .iter()
                .map(|r| {
                    format!(
                        "{},{},{},{},{},{},{},{},{}",
                        r.seed,
                        r.subject,
                        r.regimen,
                        r.bin,
                        r.bin.range_label(),
                        r.in_training,
                        r.n_test,
                        opt(r.accuracy_deg),
                        opt(r.delta_deg)
                    )
                })
                .collect::<Vec<_>>(),
        )?];
        files.push(write_table(
            dir,
            "shift_bins_summary.csv",
            &head,
            &format!("regimen,bin,in_training,{SUMMARY_HEADER},mean_delta_deg,median_seed_mean_delta_deg"),
            &self
                .summary
                .iter()
                .map(|(r, b, s, d)| {
                    format!(
                        "{r},{b},{},{},{},{}",
                        *b == ShiftBin::B1,
                        summary_cols(s),
                        opt(d.map(|d| d.mean)),
                        opt(d.map(|d| d.median_of_seed_means))
                    )
                })
                .collect::<Vec<_>>(),
        )?);
        let ticks: Vec<(f64, String)> = ShiftBin::ALL
            .iter()
            .enumerate()
            .map(|(i, b)| (i as f64 + 1.0, format!("{b} {}", b.range_label())))
            .collect();
        let series = wb
            .config()
            .regimens
            .iter()
            .map(|&reg| {
                Series::new(
                    reg.label(),
                    ShiftBin::ALL
                        .iter()
                        .enumerate()
                        .filter_map(|(i, b)| self.accuracy(reg, *b).map(|s| (i as f64 + 1.0, s.mean, Some(s.std)))),
                )
            })
            .collect();
        files.push(write_svg(
            dir,
            "shift_bins.svg",
            &head,
            &Chart {
                title: "Spatial accuracy per shift range".into(),
                x_label: "test shift range (mm)".into(),
                y_label: "spatial accuracy (deg)".into(),
                series,
                x_ticks: Some(ticks),
            },
        )?);
        Ok(files)
    }
}

// ------------------------------------------------------------ extended range

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedRangeRow {
    pub seed: u64,
    pub subject: SubjectId,
    pub regimen: Regimen,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionRow {
    pub seed: u64,
    pub stats: BuildStats,
    /// Fraction of Gaussian draws beyond the 5 mm limit.
    pub limit_rate: f64,
    pub expected_limit_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedRangeResult {
    pub rows: Vec<ExtendedRangeRow>,
    pub summary: Vec<(Regimen, Option<Summary>)>,
    pub rejections: Vec<RejectionRow>,
    pub failures: Vec<Failure>,
}

impl ExtendedRangeResult {
    pub fn accuracy(&self, regimen: Regimen) -> Option<Summary> {
        self.summary.iter().find(|s| s.0 == regimen).and_then(|s| s.1)
    }

    /// Rejection counts pooled over every seed.
    pub fn pooled_rejections(&self) -> RejectionRow {
        let mut stats = BuildStats::default();
        for r in &self.rejections {
            stats += r.stats;
        }
        RejectionRow {
            seed: u64::MAX,
            stats,
            limit_rate: limit_rate(&stats),
            expected_limit_rate: self.rejections.first().and_then(|r| r.expected_limit_rate),
        }
    }
}

fn limit_rate(s: &BuildStats) -> f64 {
    // Boundary rejections are resampled draws that had passed the limit.
    let draws = s.shift_rejections + s.accepted + s.boundary_rejections;
    if draws == 0 {
        0.0
    } else {
        s.shift_rejections as f64 / draws as f64
    }
}

/// Probability that an isotropic Gaussian shift falls outside the per-axis
/// limit.
pub fn expected_limit_rate(dist: &ShiftDistribution) -> Option<f64> {
    match *dist {
        ShiftDistribution::Gaussian { sigma_mm } => {
            let n = Normal::new(0.0, 1.0).expect("standard normal");
            let inside_axis = 2.0 * n.cdf(MAX_SHIFT_MM / sigma_mm) - 1.0;
            Some(1.0 - inside_axis * inside_axis)
        }
        ShiftDistribution::Grid { .. } => None,
    }
}

pub fn run_extended_range_study(wb: &Workbench) -> Result<ExtendedRangeResult> {
    let cfg = wb.config();
    let dist = cfg.extended_range.shift;
    wb.prepare(&[dist])?;
    if needs_ft(wb) {
        wb.ensure_pretrained(&dist, PoolKind::All)?;
    }
    let (rows, failures) = over_units(wb, |seed, idx| {
        with_unit(wb, Study::ExtendedRange, seed, idx, |ctx| {
            let Some(sets) = ctx.attempt(|| "dataset".into(), wb.datasets(&dist, seed)) else {
                return Vec::new();
            };
            let data = &sets[idx];
            let spec = SplitSpec::random(cfg.extended_range.split, ctx.split_seed());
            let Some(splits) = ctx.attempt(|| "split".into(), split_random(data, &spec)) else {
                return Vec::new();
            };
            let tc = ctx.train_config();
            let mut rows = Vec::new();
            for &regimen in &cfg.regimens {
                let what = || regimen.to_string();
                let acc = ctx
                    .train(regimen, (dist, PoolKind::All), data, &splits, &tc)
                    .and_then(|m| evaluate(&m, data, &splits.test));
                if let Some(acc) = ctx.attempt(what, acc) {
                    rows.push(ExtendedRangeRow {
                        seed,
                        subject: ctx.subject,
                        regimen,
                        n_train: splits.train.len(),
                        n_test: splits.test.len(),
                        accuracy_deg: acc,
                    });
                }
            }
            rows
        })
    });
    let summary = cfg
        .regimens
        .iter()
        .map(|&r| {
            let v: Vec<(u64, f64)> = rows.iter().filter(|x| x.regimen == r).map(|x| (x.seed, x.accuracy_deg)).collect();
            (r, summarize(&v))
        })
        .collect();
    let expected = expected_limit_rate(&dist);
    let rejections = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let mut stats = BuildStats::default();
            for d in wb.datasets(&dist, seed)?.iter() {
                stats += d.build_stats();
            }
            Ok(RejectionRow {
                seed,
                stats,
                limit_rate: limit_rate(&stats),
                expected_limit_rate: expected,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExtendedRangeResult {
        rows,
        summary,
        rejections,
        failures,
    })
}

impl ExtendedRangeResult {
    pub fn write(&self, wb: &Workbench, dir: &Path) -> Result<Vec<PathBuf>> {
        let head = wb.config().header_comment();
        let mut files = vec![write_table(
            dir,
            "extended_range_runs.csv",
            &head,
            "seed,subject,regimen,n_train,n_test,accuracy_deg",
            &self
                .rows
                .iter()
                .map(|r| {
                    format!(
                        "{},{},{},{},{},{}",
                        r.seed,
                        r.subject,
                        r.regimen,
                        r.n_train,
                        r.n_test,
                        f(r.accuracy_deg)
                    )
                })
                .collect::<Vec<_>>(),
        )?];
        files.push(write_table(
            dir,
            "extended_range_summary.csv",
            &head,
            &format!("regimen,{SUMMARY_HEADER}"),
            &self
                .summary
                .iter()
                .map(|(r, s)| format!("{r},{}", summary_cols(s)))
                .collect::<Vec<_>>(),
        )?);
        let pooled = self.pooled_rejections();
        files.push(write_table(
            dir,
            "extended_range_rejections.csv",
            &head,
            "seed,accepted,limit_rejections,boundary_rejections,limit_rate,expected_limit_rate",
            &self
                .rejections
                .iter()
                .chain(std::iter::once(&pooled))
                .map(|r| {
                    let seed = if r.seed == u64::MAX { "all".to_string() } else { r.seed.to_string() };
                    format!(
                        "{seed},{},{},{},{},{}",
                        r.stats.accepted,
                        r.stats.shift_rejections,
                        r.stats.boundary_rejections,
                        f(r.limit_rate),
                        opt(r.expected_limit_rate)
                    )
                })
                .collect::<Vec<_>>(),
        )?);
        Ok(files)
    }
}

// -------------------------------------------------------------- epoch curves

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub seed: u64,
    pub subject: SubjectId,
    pub regimen: Regimen,
    pub epoch: usize,
    pub val_accuracy_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochCurveResult {
    pub rows: Vec<EpochRow>,
    pub summary: Vec<(Regimen, usize, Option<Summary>)>,
    pub failures: Vec<Failure>,
}

impl EpochCurveResult {
    pub fn accuracy(&self, regimen: Regimen, epoch: usize) -> Option<Summary> {
        self.summary
            .iter()
            .find(|s| s.0 == regimen && s.1 == epoch)
            .and_then(|s| s.2)
    }

    /// Per-subject FT accuracy at `epoch`, averaged over seeds.
    pub fn subject_means(&self, regimen: Regimen, epoch: usize) -> BTreeMap<SubjectId, f64> {
        let mut acc: BTreeMap<SubjectId, (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.regimen == regimen && r.epoch == epoch) {
            let e = acc.entry(r.subject).or_default();
            e.0 += r.val_accuracy_deg;
            e.1 += 1;
        }
        acc.into_iter().map(|(s, (t, n))| (s, t / n as f64)).collect()
    }
}

pub fn run_epoch_curves(wb: &Workbench) -> Result<EpochCurveResult> {
    let cfg = wb.config();
    let grid = &cfg.epoch_curves.epochs;
    let last = grid.iter().copied().max().unwrap_or(0);
    let dist = cfg.data_scale.shift;
    wb.prepare(&[dist])?;
    if needs_ft(wb) {
        wb.ensure_pretrained(&dist, PoolKind::All)?;
    }
    let (rows, failures) = over_units(wb, |seed, idx| {
        with_unit(wb, Study::EpochCurves, seed, idx, |ctx| {
            let Some(sets) = ctx.attempt(|| "dataset".into(), wb.datasets(&dist, seed)) else {
                return Vec::new();
            };
            let data = &sets[idx];
            // Same partition as the data-scale sweep.
            let split_seed = wb.seed(&[tag::SPLIT, Study::DataScale.code(), ctx.subject as u64, seed]);
            let Some(splits) = ctx.attempt(|| "split".into(), split_random(data, &cfg.data_scale_split(split_seed)))
            else {
                return Vec::new();
            };
            let tc = TrainConfig {
                max_epochs: last,
                patience: None,
                ..ctx.train_config()
            };
            let mut rows = Vec::new();
            for &regimen in &cfg.regimens {
                let what = || regimen.to_string();
                let Some(model) = ctx.attempt(what, ctx.train(regimen, (dist, PoolKind::All), data, &splits, &tc))
                else {
                    continue;
                };
                for &epoch in grid {
                    if let Some(a) = model.history.val_accuracy_at(epoch) {
                        rows.push(EpochRow {
                            seed,
                            subject: ctx.subject,
                            regimen,
                            epoch,
                            val_accuracy_deg: a,
                        });
                    }
                }
            }
            rows
        })
    });
    let mut summary = Vec::new();
    for &regimen in &cfg.regimens {
        for &epoch in grid {
            let v: Vec<(u64, f64)> = rows
                .iter()
                .filter(|r| r.regimen == regimen && r.epoch == epoch)
                .map(|r| (r.seed, r.val_accuracy_deg))
                .collect();
            summary.push((regimen, epoch, summarize(&v)));
        }
    }
    Ok(EpochCurveResult { rows, summary, failures })
}

impl EpochCurveResult {
    pub fn write(&self, wb: &Workbench, dir: &Path) -> Result<Vec<PathBuf>> {
        let head = wb.config().header_comment();
        let grid = &wb.config().epoch_curves.epochs;
        let mut files = vec![write_table(
            dir,
            "epoch_curves_runs.csv",
            &head,
            "seed,subject,regimen,epoch,val_accuracy_deg",
            &self
                .rows
                .iter()
                .map(|r| format!("{},{},{},{},{}", r.seed, r.subject, r.regimen, r.epoch, f(r.val_accuracy_deg)))
                .collect::<Vec<_>>(),
        )?];
        files.push(write_table(
            dir,
            "epoch_curves_summary.csv",
            &head,
            &format!("regimen,epoch,{SUMMARY_HEADER}"),
            &self
                .summary
                .iter()
                .map(|(r, e, s)| format!("{r},{e},{}", summary_cols(s)))
                .collect::<Vec<_>>(),
        )?);
        let mut subject_rows = Vec::new();
        for &epoch in grid {
            for (s, a) in self.subject_means(Regimen::FineTune, epoch) {
                subject_rows.push((s, epoch, a));
            }
        }
        subject_rows.sort_by_key(|r| (r.0, r.1));
        files.push(write_table(
            dir,
            "epoch_curves_subjects_ft.csv",
            &head,
            "subject,epoch,mean_val_accuracy_deg",
            &subject_rows
                .iter()
                .map(|(s, e, a)| format!("{s},{e},{}", f(*a)))
                .collect::<Vec<_>>(),
        )?);

        // Epochs are spaced by grid position so early checkpoints stay legible.
        let ticks: Vec<(f64, String)> = grid.iter().enumerate().map(|(i, e)| (i as f64, e.to_string())).collect();
        let pos = |epoch: usize| grid.iter().position(|&e| e == epoch).unwrap_or(0) as f64;
        let series = wb
            .config()
            .regimens
            .iter()
            .map(|&reg| {
                Series::new(
                    reg.label(),
                    grid.iter()
                        .filter_map(|&e| self.accuracy(reg, e).map(|s| (pos(e), s.mean, Some(s.std)))),
                )
            })
            .collect();
        files.push(write_svg(
            dir,
            "epoch_curves.svg",
            &head,
            &Chart {
                title: "Validation accuracy versus training epochs".into(),
                x_label: "epoch".into(),
                y_label: "spatial accuracy (deg)".into(),
                series,
                x_ticks: Some(ticks.clone()),
            },
        )?);
        let mut per_subject: BTreeMap<SubjectId, Vec<(f64, f64, Option<f64>)>> = BTreeMap::new();
        for (s, e, a) in subject_rows {
            per_subject.entry(s).or_default().push((pos(e), a, None));
        }
        files.push(write_svg(
            dir,
            "epoch_curves_subjects_ft.svg",
            &head,
            &Chart {
                title: "Per-subject FT validation accuracy".into(),
                x_label: "epoch".into(),
                y_label: "spatial accuracy (deg)".into(),
                series: per_subject
                    .into_iter()
                    .map(|(s, pts)| Series::new(format!("subject {s}"), pts))
                    .collect(),
                x_ticks: Some(ticks),
            },
        )?);
        Ok(files)
    }
}

// ---------------------------------------------------------- shift robustness

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub seed: u64,
    pub subject: SubjectId,
    /// Accuracy on the shifted test set of the model trained with shifts.
    pub shifted_deg: f64,
    /// Same, for the model trained without shifts.
    pub unshifted_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessResult {
    pub rows: Vec<RobustnessRow>,
    /// `(seed, shifted mean, unshifted mean, unshifted / shifted)`.
    pub per_seed: Vec<(u64, f64, f64, f64)>,
    pub median_ratio: Option<f64>,
    pub failures: Vec<Failure>,
}

/// FS models trained with and without sensor shifts, both tested on the
/// shifted test partition.
pub fn run_shift_robustness(wb: &Workbench) -> Result<RobustnessResult> {
    let cfg = wb.config();
    let shifted = cfg.data_scale.shift;
    let unshifted = ShiftDistribution::Gaussian {
        sigma_mm: cfg.shift_robustness.baseline_sigma_mm,
    };
    wb.prepare(&[shifted, unshifted])?;
    let (rows, failures) = over_units(wb, |seed, idx| {
        with_unit(wb, Study::ShiftRobustness, seed, idx, |ctx| {
            let sets = wb.datasets(&shifted, seed).and_then(|a| Ok((a, wb.datasets(&unshifted, seed)?)));
            let Some((a, b)) = ctx.attempt(|| "dataset".into(), sets) else {
                return Vec::new();
            };
            let (with, without) = (&a[idx], &b[idx]);
            let split_seed = wb.seed(&[tag::SPLIT, Study::DataScale.code(), ctx.subject as u64, seed]);
            let spec = cfg.data_scale_split(split_seed);
            let splits = split_random(with, &spec).and_then(|s| {
                let t = split_random(without, &spec)?;
                if s.test != t.test || with.len() != without.len() {
                    return Err(Error::ShapeMismatch("shifted and unshifted partitions differ".into()));
                }
                Ok((s, t))
            });
            let Some((s_with, s_without)) = ctx.attempt(|| "split".into(), splits) else {
                return Vec::new();
            };
            let tc = ctx.train_config();
            let acc_with = train_fs(with, &s_with, &tc).and_then(|m| evaluate(&m, with, &s_with.test));
            let acc_without = train_fs(without, &s_without, &tc).and_then(|m| evaluate(&m, with, &s_with.test));
            let (Some(x), Some(y)) = (
                ctx.attempt(|| "shifted model".into(), acc_with),
                ctx.attempt(|| "unshifted model".into(), acc_without),
            ) else {
                return Vec::new();
            };
            vec![RobustnessRow {
                seed,
                subject: ctx.subject,
                shifted_deg: x,
                unshifted_deg: y,
            }]
        })
    });
    let per_seed: Vec<(u64, f64, f64, f64)> = cfg
        .seeds
        .iter()
        .filter_map(|&seed| {
            let sel: Vec<&RobustnessRow> = rows.iter().filter(|r| r.seed == seed).collect();
            if sel.is_empty() {
                return None;
            }
            let n = sel.len() as f64;
            let a = sel.iter().map(|r| r.shifted_deg).sum::<f64>() / n;
            let b = sel.iter().map(|r| r.unshifted_deg).sum::<f64>() / n;
            Some((seed, a, b, b / a))
        })
        .collect();
    let ratios: Vec<f64> = per_seed.iter().map(|p| p.3).collect();
    Ok(RobustnessResult {
        median_ratio: median(&ratios),
        rows,
        per_seed,
        failures,
    })
}

impl RobustnessResult {
    pub fn write(&self, wb: &Workbench, dir: &Path) -> Result<Vec<PathBuf>> {
        let head = wb.config().header_comment();
        Ok(vec![
            write_table(
                dir,
                "shift_robustness_runs.csv",
                &head,
                "seed,subject,shifted_train_deg,unshifted_train_deg",
                &self
                    .rows
                    .iter()
                    .map(|r| format!("{},{},{},{}", r.seed, r.subject, f(r.shifted_deg), f(r.unshifted_deg)))
                    .collect::<Vec<_>>(),
            )?,
            write_table(
                dir,
                "shift_robustness_summary.csv",
                &head,
                "seed,shifted_train_deg,unshifted_train_deg,ratio",
                &self
                    .per_seed
                    .iter()
                    .map(|(s, a, b, r)| format!("{s},{},{},{}", f(*a), f(*b), f(*r)))
                    .chain(std::iter::once(format!("median,NA,NA,{}", opt(self.median_ratio))))
                    .collect::<Vec<_>>(),
            )?,
        ])
    }
}

// ---------------------------------------------------------------- all studies

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutputs {
    pub data_scale: Option<DataScaleResult>,
    pub shift_bins: Option<ShiftBinResult>,
    pub extended_range: Option<ExtendedRangeResult>,
    pub epoch_curves: Option<EpochCurveResult>,
    pub shift_robustness: Option<RobustnessResult>,
    pub files: Vec<PathBuf>,
}

impl RunOutputs {
    pub fn failures(&self) -> Vec<&Failure> {
        let mut v: Vec<&Failure> = Vec::new();
        v.extend(self.data_scale.iter().flat_map(|r| &r.failures));
        v.extend(self.shift_bins.iter().flat_map(|r| &r.failures));
        v.extend(self.extended_range.iter().flat_map(|r| &r.failures));
        v.extend(self.epoch_curves.iter().flat_map(|r| &r.failures));
        v.extend(self.shift_robustness.iter().flat_map(|r| &r.failures));
        v
    }

    /// Plain-text digest of the headline numbers.
    pub fn report(&self) -> String {
        let mut out = String::new();
        if let Some(r) = &self.data_scale {
            let _ = writeln!(out, "data scale (test accuracy, deg):");
            for (fr, reg, s) in &r.summary {
                if let Some(s) = s {
                    let _ = writeln!(out, "  {reg} {:>5.0}%  {:.3} ± {:.3}", 100.0 * fr, s.mean, s.std);
                }
            }
            for c in &r.relative {
                let _ = writeln!(out, "  {} change from full to reduced data: {:+.1}%", c.regimen, c.percent);
            }
        }
        if let Some(r) = &self.shift_bins {
            let _ = writeln!(out, "shift bins (test accuracy, deg; delta vs B1):");
            for (reg, bin, s, d) in &r.summary {
                if let Some(s) = s {
                    let _ = writeln!(
                        out,
                        "  {reg} {bin} {:<10} {:.3} ± {:.3}  delta {}",
                        bin.range_label(),
                        s.mean,
                        s.std,
                        d.map(|d| format!("{:+.3}", d.mean)).unwrap_or_else(|| "NA".into())
                    );
                }
            }
        }
        if let Some(r) = &self.extended_range {
            let _ = writeln!(out, "extended range (test accuracy, deg):");
            for (reg, s) in &r.summary {
                if let Some(s) = s {
                    let _ = writeln!(out, "  {reg} {:.3} ± {:.3}", s.mean, s.std);
                }
            }
            let p = r.pooled_rejections();
            let _ = writeln!(
                out,
                "  limit rejection rate {:.4} (expected {}), boundary rejections {}",
                p.limit_rate,
                opt(p.expected_limit_rate),
                p.stats.boundary_rejections
            );
        }
        if let Some(r) = &self.epoch_curves {
            let _ = writeln!(out, "epoch curves (validation accuracy, deg):");
            for (reg, e, s) in &r.summary {
                if let Some(s) = s {
                    let _ = writeln!(out, "  {reg} epoch {e:>4}  {:.3} ± {:.3}", s.mean, s.std);
                }
            }
        }
        if let Some(r) = &self.shift_robustness {
            let _ = writeln!(out, "shift robustness: median unshifted/shifted ratio {}", opt(r.median_ratio));
        }
        let failures = self.failures();
        if !failures.is_empty() {
            let _ = writeln!(out, "{} runs failed and were excluded", failures.len());
        }
        out
    }
}

/// Runs `studies` on `wb`, writing outputs under `dir`.
pub fn run_studies(wb: &Workbench, studies: &[Study], dir: &Path) -> Result<RunOutputs> {
    let mut out = RunOutputs::default();
    for &study in studies {
        log::info!("running {}", study.name());
        match study {
            Study::DataScale => {
                let r = run_data_scale_sweep(wb)?;
                out.files.extend(r.write(wb, dir)?);
                out.data_scale = Some(r);
            }
            Study::ShiftBins => {
                let r = run_shift_bin_study(wb)?;
                out.files.extend(r.write(wb, dir)?);
                out.shift_bins = Some(r);
            }
            Study::ExtendedRange => {
                let r = run_extended_range_study(wb)?;
                out.files.extend(r.write(wb, dir)?);
                out.extended_range = Some(r);
            }
            Study::EpochCurves => {
                let r = run_epoch_curves(wb)?;
                out.files.extend(r.write(wb, dir)?);
                out.epoch_curves = Some(r);
            }
            Study::ShiftRobustness => {
                let r = run_shift_robustness(wb)?;
                out.files.extend(r.write(wb, dir)?);
                out.shift_robustness = Some(r);
            }
        }
    }
    let head = wb.config().header_comment();
    let audits = wb.audits();
    if !audits.is_empty() {
        out.files.push(write_table(
            dir,
            "pretrain_pools.csv",
            &head,
            "shift,pool,seed,target,pool_subjects,records,target_in_pool",
            &audits
                .iter()
                .map(|a| {
                    let subjects: Vec<String> = a.pool_subjects.iter().map(|s| s.to_string()).collect();
                    format!(
                        "\"{}\",{},{},{},{},{},{}",
                        a.key.shift,
                        a.key.pool.label(),
                        a.key.replicate,
                        a.key.target,
                        subjects.join(" "),
                        a.records,
                        a.leaks()
                    )
                })
                .collect::<Vec<_>>(),
        )?);
    }
    out.files.push(write_file(dir, "report.txt", &format!("{head}\n{}", out.report()))?);
    Ok(out)
}

/// Builds the cohort and runs `studies` in a pool of `config.jobs` workers
/// (0 means one per core).
pub fn run_experiments(config: super::config::ExperimentConfig, studies: &[Study], dir: &Path) -> Result<(Workbench, RunOutputs)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    pool.install(|| {
        let wb = Workbench::new(config)?;
        let out = run_studies(&wb, studies, dir)?;
        Ok((wb, out))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = summarize(&[(0, 1.0), (0, 3.0), (1, 5.0), (2, 7.0)]).unwrap();
        assert_eq!(s.runs, 4);
        assert!((s.mean - 4.0).abs() < 1e-12);
        assert!((s.std - 5f64.sqrt()).abs() < 1e-12);
        // seed means 2, 5, 7
        assert!((s.median_of_seed_means - 5.0).abs() < 1e-12);
        assert!(summarize(&[]).is_none());
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn expected_rejection_rate_matches_normal_tail() {
        // 2Φ(2) - 1 = erf(√2) = 0.954499736...
        let inside = 0.954_499_736_103_642;
        let e = expected_limit_rate(&ShiftDistribution::Gaussian { sigma_mm: 2.5 }).unwrap();
        assert!((e - (1.0 - inside * inside)).abs() < 1e-9);
        let tiny = expected_limit_rate(&ShiftDistribution::Gaussian { sigma_mm: 1e-9 }).unwrap();
        assert_eq!(tiny, 0.0);
    }

    #[test]
    fn study_names_round_trip() {
        for s in Study::ALL {
            assert_eq!(s.name().parse::<Study>().unwrap(), s);
        }
        assert!("nope".parse::<Study>().is_err());
    }

    #[test]
    fn limit_rate_counts_boundary_resamples_as_draws() {
        let s = BuildStats {
            shift_rejections: 1,
            boundary_rejections: 1,
            accepted: 2,
        };
        assert!((limit_rate(&s) - 0.25).abs() < 1e-15);
    }
}
