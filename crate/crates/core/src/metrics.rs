//! Spatial accuracy and its breakdowns.
//!
//! Angular error is the Euclidean distance between predicted and true gaze
//! points on the (x_deg, y_deg) plane. Everything here goes through
//! [`angular_error`], so a different convention only needs to change it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::array::SensorFrame;
use crate::shift::{bin_shift, Shift2D, ShiftBin};
use crate::synth_eye::{GazeSample, RANGE_X_DEG, RANGE_Y_DEG};
use crate::{Error, Result, SubjectId};

pub fn angular_error(prediction: &GazeSample, truth: &GazeSample) -> f64 {
    prediction.distance(truth)
}

fn check_lengths(predictions: &[GazeSample], truths: &[GazeSample]) -> Result<()> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    Ok(())
}

/// Mean angular error in degrees.
pub fn spatial_accuracy(predictions: &[GazeSample], truths: &[GazeSample]) -> Result<f64> {
    check_lengths(predictions, truths)?;
    if predictions.is_empty() {
        return Err(Error::Empty("spatial accuracy of no samples"));
    }
    let sum: f64 = predictions.iter().zip(truths).map(|(p, t)| angular_error(p, t)).sum();
    Ok(sum / predictions.len() as f64)
}

/// Rectangular grid over the gaze operating range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub range_x_deg: f64,
    pub range_y_deg: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            range_x_deg: RANGE_X_DEG,
            range_y_deg: RANGE_Y_DEG,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || !(self.range_x_deg > 0.0) || !(self.range_y_deg > 0.0) {
            return Err(Error::config(format!("invalid accuracy grid {self:?}")));
        }
        Ok(())
    }

    /// Cell of a gaze point; row 0 is the top (largest y). Points outside the
    /// range fall into the nearest edge cell.
    pub fn cell(&self, gaze: &GazeSample) -> (usize, usize) {
        let frac_x = (gaze.x_deg + self.range_x_deg) / (2.0 * self.range_x_deg);
        let frac_y = (self.range_y_deg - gaze.y_deg) / (2.0 * self.range_y_deg);
        let idx = |f: f64, n: usize| ((f * n as f64).floor().max(0.0) as usize).min(n - 1);
        (idx(frac_y, self.rows), idx(frac_x, self.cols))
    }

    /// `(x_lo, x_hi, y_lo, y_hi)` of a cell.
    pub fn bounds(&self, row: usize, col: usize) -> (f64, f64, f64, f64) {
        let wx = 2.0 * self.range_x_deg / self.cols as f64;
        let wy = 2.0 * self.range_y_deg / self.rows as f64;
        let x_lo = -self.range_x_deg + col as f64 * wx;
        let y_hi = self.range_y_deg - row as f64 * wy;
        (x_lo, x_lo + wx, y_hi - wy, y_hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MapCell {
    pub count: usize,
    /// `None` for empty cells.
    pub mean: Option<f64>,
    /// Population standard deviation; `None` for empty cells.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAccuracyMap {
    pub grid: GridSpec,
    /// Row-major, row 0 at the top.
    pub cells: Vec<MapCell>,
}

impl SpatialAccuracyMap {
    pub fn cell(&self, row: usize, col: usize) -> &MapCell {
        &self.cells[row * self.grid.cols + col]
    }

    pub fn total_count(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }

    /// Count-weighted mean of the cell means.
    pub fn overall(&self) -> Option<f64> {
        let n = self.total_count();
        (n > 0).then(|| {
            self.cells
                .iter()
                .filter_map(|c| c.mean.map(|m| m * c.count as f64))
                .sum::<f64>()
                / n as f64
        })
    }

    /// Text grid with `mean±std` per cell, top row first.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "spatial accuracy map (deg), {}x{} over ±{}° x ±{}°",
            self.grid.rows, self.grid.cols, self.grid.range_x_deg, self.grid.range_y_deg
        )
        .unwrap();
        for r in 0..self.grid.rows {
            let cells: Vec<String> = (0..self.grid.cols)
                .map(|c| match *self.cell(r, c) {
                    MapCell {
                        mean: Some(m),
                        std: Some(sd),
                        ..
                    } => format!("{m:>6.2}±{sd:<5.2}"),
                    _ => format!("{:^12}", "-"),
                })
                .collect();
            writeln!(s, "{}", cells.join(" ")).unwrap();
        }
        s
    }

    /// CSV with header `row,col,x_lo,x_hi,y_lo,y_hi,count,mean_deg,std_deg`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,x_lo,x_hi,y_lo,y_hi,count,mean_deg,std_deg\n");
        for r in 0..self.grid.rows {
            for c in 0..self.grid.cols {
                let (x0, x1, y0, y1) = self.grid.bounds(r, c);
                let cell = self.cell(r, c);
                let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
                writeln!(
                    s,
                    "{r},{c},{x0},{x1},{y0},{y1},{},{},{}",
                    cell.count,
                    opt(cell.mean),
                    opt(cell.std)
                )
                .unwrap();
            }
        }
        s
    }
}

/// Mean ± std of angular error per gaze cell, keyed by true gaze.
pub fn accuracy_map(predictions: &[GazeSample], truths: &[GazeSample], grid: &GridSpec) -> Result<SpatialAccuracyMap> {
    grid.validate()?;
    check_lengths(predictions, truths)?;
    let mut errors: Vec<Vec<f64>> = vec![Vec::new(); grid.rows * grid.cols];
    for (p, t) in predictions.iter().zip(truths) {
        let (r, c) = grid.cell(t);
        errors[r * grid.cols + c].push(angular_error(p, t));
    }
    let cells = errors
        .iter()
        .map(|e| {
            if e.is_empty() {
                return MapCell::default();
            }
            let n = e.len() as f64;
            let mean = e.iter().sum::<f64>() / n;
            let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            MapCell {
                count: e.len(),
                mean: Some(mean),
                std: Some(var.sqrt()),
            }
        })
        .collect();
    Ok(SpatialAccuracyMap { grid: *grid, cells })
}

/// Spatial accuracy restricted to each shift bin; empty bins are `None`.
pub fn accuracy_by_shift_bin(
    predictions: &[GazeSample],
    truths: &[GazeSample],
    shifts: &[Shift2D],
) -> Result<BTreeMap<ShiftBin, Option<f64>>> {
    check_lengths(predictions, truths)?;
    if shifts.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: shifts.len(),
        });
    }
    let mut sums: BTreeMap<ShiftBin, (f64, usize)> = BTreeMap::new();
    for ((p, t), s) in predictions.iter().zip(truths).zip(shifts) {
        let e = sums.entry(bin_shift(s)).or_default();
        e.0 += angular_error(p, t);
        e.1 += 1;
    }
    Ok(ShiftBin::ALL
        .iter()
        .map(|b| (*b, sums.get(b).map(|(s, n)| s / *n as f64)))
        .collect())
}

/// Accuracy of each bin minus the B1 benchmark, in degrees.
pub fn degradations(per_bin: &BTreeMap<ShiftBin, Option<f64>>) -> BTreeMap<ShiftBin, Option<f64>> {
    let base = per_bin.get(&ShiftBin::B1).copied().flatten();
    per_bin
        .iter()
        .map(|(b, v)| (*b, base.and_then(|base| v.map(|v| v - base))))
        .collect()
}

/// Percent change from `baseline` to `comparison`.
pub fn relative_change(baseline_deg: f64, comparison_deg: f64) -> Result<f64> {
    if !(baseline_deg > 0.0) {
        return Err(Error::config(format!("relative change needs a positive baseline, got {baseline_deg}")));
    }
    Ok(100.0 * (comparison_deg - baseline_deg) / baseline_deg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub overall: f64,
    pub per_shift_bin: BTreeMap<ShiftBin, Option<f64>>,
    pub degradations: BTreeMap<ShiftBin, Option<f64>>,
    pub per_subject: BTreeMap<SubjectId, f64>,
}

impl AccuracyReport {
    pub fn compute(predictions: &[GazeSample], frames: &[SensorFrame]) -> Result<AccuracyReport> {
        let truths: Vec<GazeSample> = frames.iter().map(|f| f.gaze_truth).collect();
        let shifts: Vec<Shift2D> = frames.iter().map(|f| f.shift).collect();
        let overall = spatial_accuracy(predictions, &truths)?;
        let per_shift_bin = accuracy_by_shift_bin(predictions, &truths, &shifts)?;
        let mut subj: BTreeMap<SubjectId, (f64, usize)> = BTreeMap::new();
        for (p, f) in predictions.iter().zip(frames) {
            let e = subj.entry(f.subject_id).or_default();
            e.0 += angular_error(p, &f.gaze_truth);
            e.1 += 1;
        }
        Ok(AccuracyReport {
            overall,
            degradations: degradations(&per_shift_bin),
            per_shift_bin,
            per_subject: subj.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        })
    }

    /// CSV with header `scope,key,accuracy_deg,delta_vs_b1_deg`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,key,accuracy_deg,delta_vs_b1_deg\n");
        writeln!(s, "overall,all,{},", self.overall).unwrap();
        for (b, v) in &self.per_shift_bin {
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            writeln!(s, "shift_bin,{b},{},{}", opt(*v), opt(self.degradations[b])).unwrap();
        }
        for (id, v) in &self.per_subject {
            writeln!(s, "subject,{id},{v},").unwrap();
        }
        s
    }
}
