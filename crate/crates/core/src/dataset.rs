//! Supervised datasets of sensor frames and the split protocols.
//!
//! A dataset pairs each image with one (or more) sampled sensor shifts and
//! stores the resulting array readings with their gaze labels. Splits are
//! index sets into the record list; records are never copied or reordered
//! after a build.
//!
//! # File formats
//!
//! Dataset CSV: a `# psog-dataset v1 scale_px_per_mm=<f64>` line, then the
//! header `subject,x_deg,y_deg,dx_mm,dy_mm,bin,s00,...,s04,s10,...,s24`
//! (sensor columns row-major over the 3×5 array). Floats use the shortest
//! representation that parses back to the same bits.
//!
//! Split CSV: header `part,index`, parts `train`, `validation`, `test`, and
//! `test_B1`..`test_B4` for shift-binned splits.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::{simulate_frame, ArrayLayout, ReceptiveKernel, SensorFrame, COLS, N_SENSORS, ROWS};
use crate::seed;
use crate::shift::{
    bin_shift_with, grid_shifts, mm_to_px, sample_gaussian_shift_counted, sample_grid_shift, BinNorm, Shift2D,
    ShiftBin, ShiftDistribution,
};
use crate::synth_eye::{GazeSample, ImageSource};
use crate::{Error, Result, SubjectId};

/// Minimum standard deviation used when normalising a sensor channel.
pub const STD_FLOOR: f64 = 1e-8;

/// How many shifts each image receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftPairing {
    /// One independently sampled shift per image.
    #[default]
    Single,
    /// `n` independently sampled shifts per image.
    Repeat(usize),
    /// Every grid shift for every image (grid distributions only).
    Exhaustive,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    /// Gaussian draws rejected for exceeding the 5 mm limit.
    pub shift_rejections: u64,
    /// Draws (Gaussian: resampled, grid: dropped) whose sampling region left
    /// the image once the head offset was added.
    pub boundary_rejections: u64,
    /// Accepted shift draws.
    pub accepted: u64,
}

impl std::ops::AddAssign for BuildStats {
    fn add_assign(&mut self, rhs: Self) {
        self.shift_rejections += rhs.shift_rejections;
        self.boundary_rejections += rhs.boundary_rejections;
        self.accepted += rhs.accepted;
    }
}

/// Shifts assigned to images, decided before any pixel is rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftPlan {
    /// `(source, image, shift)` in record order.
    pub assignments: Vec<(usize, usize, Shift2D)>,
    pub stats: BuildStats,
}

const MAX_BOUNDARY_RETRIES: u32 = 10_000;

/// Draws shifts for every image of `sources`. Boundary checks only need
/// image metadata, so nothing is rendered here.
pub fn plan_shifts<S: ImageSource>(
    sources: &[S],
    distribution: &ShiftDistribution,
    layout: &ArrayLayout,
    pairing: ShiftPairing,
    seed: u64,
) -> Result<ShiftPlan> {
    distribution.validate()?;
    let grid = match *distribution {
        ShiftDistribution::Grid {
            range_mm,
            n_per_axis,
        } => Some(grid_shifts(range_mm, n_per_axis)?),
        ShiftDistribution::Gaussian { .. } => None,
    };
    let per_image = match (pairing, &grid) {
        (ShiftPairing::Single, _) => 1,
        (ShiftPairing::Repeat(n), _) => n,
        (ShiftPairing::Exhaustive, Some(g)) => g.len(),
        (ShiftPairing::Exhaustive, None) => {
            return Err(Error::config("exhaustive pairing needs a grid distribution"));
        }
    };
    let mut rng = seed::rng(seed);
    let mut stats = BuildStats::default();
    let mut assignments = Vec::new();
    for (si, source) in sources.iter().enumerate() {
        for ii in 0..source.len() {
            let meta = source.meta(ii);
            for k in 0..per_image {
                match (distribution, &grid) {
                    (&ShiftDistribution::Gaussian { sigma_mm }, _) => {
                        let mut tries = 0;
                        loop {
                            let (s, rejected) = sample_gaussian_shift_counted(sigma_mm, &mut rng);
                            stats.shift_rejections += rejected as u64;
                            let s = mm_to_px(s, meta.scale_px_per_mm);
                            match layout.crop_offset(&meta, &s, layout.compensate_head) {
                                Ok(_) => {
                                    assignments.push((si, ii, s));
                                    stats.accepted += 1;
                                    break;
                                }
                                Err(Error::Boundary { .. }) if tries < MAX_BOUNDARY_RETRIES => {
                                    stats.boundary_rejections += 1;
                                    tries += 1;
                                }
                                Err(e) => return Err(e),
                            }
                        }
                    }
                    (_, Some(g)) => {
                        let s = if pairing == ShiftPairing::Exhaustive {
                            g[k]
                        } else {
                            sample_grid_shift(g, &mut rng)
                        };
                        let s = mm_to_px(s, meta.scale_px_per_mm);
                        match layout.crop_offset(&meta, &s, layout.compensate_head) {
                            Ok(_) => {
                                assignments.push((si, ii, s));
                                stats.accepted += 1;
                            }
                            Err(Error::Boundary { .. }) => stats.boundary_rejections += 1,
                            Err(e) => return Err(e),
                        }
                    }
                    _ => unreachable!("grid is Some exactly for grid distributions"),
                }
            }
        }
    }
    Ok(ShiftPlan { assignments, stats })
}

/// Immutable collection of sensor frames with their labels and shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SensorFrame>,
    scale_px_per_mm: f64,
    stats: BuildStats,
}

impl Dataset {
    pub fn new(records: Vec<SensorFrame>, scale_px_per_mm: f64) -> Self {
        Self {
            records,
            scale_px_per_mm,
            stats: BuildStats::default(),
        }
    }

    pub fn records(&self) -> &[SensorFrame] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scale_px_per_mm(&self) -> f64 {
        self.scale_px_per_mm
    }

    pub fn build_stats(&self) -> BuildStats {
        self.stats
    }

    /// Distinct subject ids in ascending order.
    pub fn subject_ids(&self) -> Vec<SubjectId> {
        let mut ids: Vec<SubjectId> = self.records.iter().map(|r| r.subject_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i]).collect(),
            scale_px_per_mm: self.scale_px_per_mm,
            stats: BuildStats::default(),
        }
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        let mut records = Vec::new();
        let mut scale = 0.0;
        let mut stats = BuildStats::default();
        for d in parts {
            records.extend_from_slice(&d.records);
            scale = d.scale_px_per_mm;
            stats += d.stats;
        }
        Dataset {
            records,
            scale_px_per_mm: scale,
            stats,
        }
    }

    pub fn bins(&self, norm: BinNorm) -> Vec<ShiftBin> {
        self.records.iter().map(|r| bin_shift_with(&r.shift, norm)).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "# psog-dataset v1 scale_px_per_mm={}", self.scale_px_per_mm)?;
        write!(out, "subject,x_deg,y_deg,dx_mm,dy_mm,bin")?;
        for r in 0..ROWS {
            for c in 0..COLS {
                write!(out, ",s{r}{c}")?;
            }
        }
        writeln!(out)?;
        for f in &self.records {
            write!(
                out,
                "{},{},{},{},{},{}",
                f.subject_id,
                f.gaze_truth.x_deg,
                f.gaze_truth.y_deg,
                f.shift.dx_mm,
                f.shift.dy_mm,
                bin_shift_with(&f.shift, BinNorm::Euclidean)
            )?;
            for v in &f.values {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let first = text.lines().next().unwrap_or_default();
        let scale = first
            .strip_prefix("# psog-dataset v1 scale_px_per_mm=")
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::parse(path, "missing psog-dataset v1 header"))?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row?;
            if row.len() != 6 + N_SENSORS {
                return Err(Error::parse(path, format!("expected {} columns, got {}", 6 + N_SENSORS, row.len())));
            }
            let num = |i: usize| -> Result<f64> {
                row[i]
                    .parse::<f64>()
                    .map_err(|_| Error::parse(path, format!("bad number {:?}", &row[i])))
            };
            let subject_id = row[0]
                .parse::<SubjectId>()
                .map_err(|_| Error::parse(path, "bad subject id"))?;
            let mut values = [0.0; N_SENSORS];
            for (k, v) in values.iter_mut().enumerate() {
                *v = num(6 + k)?;
            }
            records.push(SensorFrame {
                values,
                shift: mm_to_px(Shift2D::new(num(3)?, num(4)?), scale),
                gaze_truth: GazeSample::new(num(1)?, num(2)?),
                subject_id,
            });
        }
        Ok(Dataset::new(records, scale))
    }

    /// SHA-256 of the CSV serialisation, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        hex_digest(&buf)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders each image referenced by any plan exactly once and produces one
/// dataset per plan.
pub fn build_from_plans<S: ImageSource>(
    sources: &[S],
    plans: &[ShiftPlan],
    layout: &ArrayLayout,
    kernel: &ReceptiveKernel,
) -> Result<Vec<Dataset>> {
    layout.validate()?;
    // (source, image) -> [(plan, position)]
    let mut uses: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for (pi, plan) in plans.iter().enumerate() {
        for (pos, &(si, ii, _)) in plan.assignments.iter().enumerate() {
            uses.entry((si, ii)).or_default().push((pi, pos));
        }
    }
    let work: Vec<_> = uses.into_iter().collect();
    let frames: Vec<Vec<(usize, usize, SensorFrame)>> = work
        .par_iter()
        .map(|&((si, ii), ref targets)| {
            let image = sources[si].load(ii)?;
            targets
                .iter()
                .map(|&(pi, pos)| {
                    let shift = plans[pi].assignments[pos].2;
                    Ok((pi, pos, simulate_frame(&image, layout, kernel, shift)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = sources
        .iter()
        .find(|s| !s.is_empty())
        .map(|s| s.meta(0).scale_px_per_mm)
        .unwrap_or(1.0);
    let mut slots: Vec<Vec<Option<SensorFrame>>> =
        plans.iter().map(|p| vec![None; p.assignments.len()]).collect();
    for (pi, pos, f) in frames.into_iter().flatten() {
        slots[pi][pos] = Some(f);
    }
    Ok(slots
        .into_iter()
        .zip(plans)
        .map(|(s, plan)| Dataset {
            records: s.into_iter().map(|f| f.expect("every assignment rendered")).collect(),
            scale_px_per_mm: scale,
            stats: plan.stats,
        })
        .collect())
}

/// One record per image of `sessions`, each with an independently sampled
/// shift. All sources must share pixel scale.
pub fn build_dataset<S: ImageSource>(
    sessions: &[S],
    distribution: &ShiftDistribution,
    layout: &ArrayLayout,
    kernel: &ReceptiveKernel,
    seed: u64,
) -> Result<Dataset> {
    build_dataset_with(sessions, distribution, layout, kernel, ShiftPairing::Single, seed)
}

pub fn build_dataset_with<S: ImageSource>(
    sessions: &[S],
    distribution: &ShiftDistribution,
    layout: &ArrayLayout,
    kernel: &ReceptiveKernel,
    pairing: ShiftPairing,
    seed: u64,
) -> Result<Dataset> {
    let scales: Vec<f64> = sessions
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.meta(0).scale_px_per_mm)
        .collect();
    if scales.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::config("all sessions must share the pixel scale"));
    }
    let plan = plan_shifts(sessions, distribution, layout, pairing, seed)?;
    Ok(build_from_plans(sessions, std::slice::from_ref(&plan), layout, kernel)?
        .pop()
        .expect("one plan in, one dataset out"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    Random,
    ShiftBinned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// train / validation / test
    pub fractions: [f64; 3],
    pub seed: u64,
    pub mode: SplitMode,
    pub bin_norm: BinNorm,
}

impl SplitSpec {
    pub fn random(fractions: [f64; 3], seed: u64) -> Self {
        Self {
            fractions,
            seed,
            mode: SplitMode::Random,
            bin_norm: BinNorm::Euclidean,
        }
    }

    pub fn shift_binned(fractions: [f64; 3], seed: u64) -> Self {
        Self {
            mode: SplitMode::ShiftBinned,
            ..Self::random(fractions, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions {:?} must be non-negative and sum to 1",
                self.fractions
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// Shift-binned protocol only: dedicated test set per bin. `B1` is the
    /// in-training-range benchmark and equals `test`.
    pub bin_tests: BTreeMap<ShiftBin, Vec<usize>>,
    pub warnings: Vec<String>,
}

impl Splits {
    pub fn parts(&self) -> Vec<(String, &[usize])> {
        let mut v = vec![
            ("train".to_string(), self.train.as_slice()),
            ("validation".to_string(), self.validation.as_slice()),
            ("test".to_string(), self.test.as_slice()),
        ];
        for (bin, idx) in &self.bin_tests {
            v.push((format!("test_{bin}"), idx.as_slice()));
        }
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "part,index")?;
        for (name, idx) in self.parts() {
            for i in idx {
                writeln!(out, "{name},{i}")?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Splits> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut s = Splits::default();
        for row in reader.records() {
            let row = row?;
            let idx: usize = row[1].parse().map_err(|_| Error::parse(path, "bad index"))?;
            match &row[0] {
                "train" => s.train.push(idx),
                "validation" => s.validation.push(idx),
                "test" => s.test.push(idx),
                other => {
                    let bin: ShiftBin = other
                        .strip_prefix("test_")
                        .ok_or_else(|| Error::parse(path, format!("unknown part {other:?}")))?
                        .parse()?;
                    s.bin_tests.entry(bin).or_default().push(idx);
                }
            }
        }
        Ok(s)
    }
}

/// Part sizes by largest-remainder rounding. Ties go to the earlier part.
pub fn largest_remainder(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, q) in sizes.iter_mut().zip(&quotas) {
        *s = q.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

fn partition(mut indices: Vec<usize>, fractions: &[f64; 3], seed: u64) -> [Vec<usize>; 3] {
    indices.shuffle(&mut seed::rng(seed));
    let [a, b, _] = largest_remainder(indices.len(), fractions);
    let mut test = indices.split_off(a + b);
    let mut val = indices.split_off(a);
    let mut train = indices;
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    [train, val, test]
}

/// Uniform random partition of all records.
pub fn split_random(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let [train, validation, test] = partition((0..dataset.len()).collect(), &spec.fractions, spec.seed);
    for (name, part, f) in [
        ("train", &train, spec.fractions[0]),
        ("validation", &validation, spec.fractions[1]),
        ("test", &test, spec.fractions[2]),
    ] {
        if part.is_empty() && f > 0.0 {
            return Err(Error::config(format!(
                "{name} partition is empty ({} records, fractions {:?})",
                dataset.len(),
                spec.fractions
            )));
        }
    }
    Ok(Splits {
        train,
        validation,
        test,
        ..Splits::default()
    })
}

/// Splits in-range (B1) records into train/validation/test and sends every
/// out-of-range record to the test set of its bin.
pub fn split_shift_binned(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut by_bin: BTreeMap<ShiftBin, Vec<usize>> = ShiftBin::ALL.iter().map(|&b| (b, Vec::new())).collect();
    for (i, bin) in dataset.bins(spec.bin_norm).into_iter().enumerate() {
        by_bin.get_mut(&bin).expect("all bins present").push(i);
    }
    let in_range = by_bin.remove(&ShiftBin::B1).unwrap_or_default();
    let [train, validation, test] = partition(in_range, &spec.fractions, spec.seed);
    let mut warnings = Vec::new();
    for (bin, idx) in &by_bin {
        if idx.is_empty() {
            let msg = format!("shift bin {bin} {} has no records", bin.range_label());
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    if train.is_empty() {
        let msg = "no in-range (B1) records for training".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    by_bin.insert(ShiftBin::B1, test.clone());
    Ok(Splits {
        train,
        validation,
        test,
        bin_tests: by_bin,
        warnings,
    })
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    match spec.mode {
        SplitMode::Random => split_random(dataset, spec),
        SplitMode::ShiftBinned => split_shift_binned(dataset, spec),
    }
}

/// Keeps a uniformly drawn `fraction` of the training indices. For a fixed
/// seed, smaller fractions yield subsets of larger ones.
pub fn subset_training(splits: &Splits, fraction: f64, seed: u64) -> Result<Splits> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("training fraction must be in (0, 1], got {fraction}")));
    }
    let mut order = splits.train.clone();
    order.shuffle(&mut seed::rng(seed));
    let keep = (fraction * order.len() as f64).round() as usize;
    if keep == 0 {
        return Err(Error::config(format!(
            "fraction {fraction} of {} training records is empty",
            order.len()
        )));
    }
    order.truncate(keep);
    order.sort_unstable();
    Ok(Splits {
        train: order,
        ..splits.clone()
    })
}

/// Per-sensor z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; N_SENSORS],
    /// Population standard deviation, floored at [`STD_FLOOR`].
    pub std: [f64; N_SENSORS],
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; N_SENSORS],
            std: [1.0; N_SENSORS],
        }
    }

    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a [f64; N_SENSORS]>) -> Result<NormStats> {
        let mut n = 0usize;
        let mut sum = [0.0; N_SENSORS];
        let mut sq = [0.0; N_SENSORS];
        let frames: Vec<&[f64; N_SENSORS]> = frames.into_iter().collect();
        for f in &frames {
            n += 1;
            for k in 0..N_SENSORS {
                sum[k] += f[k];
            }
        }
        if n == 0 {
            return Err(Error::Empty("normalisation needs training records"));
        }
        let mut mean = [0.0; N_SENSORS];
        for k in 0..N_SENSORS {
            // constant channels take their value exactly so they map to 0
            let first = frames[0][k];
            mean[k] = if frames.iter().all(|f| f[k] == first) {
                first
            } else {
                sum[k] / n as f64
            };
        }
        for f in &frames {
            for k in 0..N_SENSORS {
                let d = f[k] - mean[k];
                sq[k] += d * d;
            }
        }
        let mut std = [0.0; N_SENSORS];
        for k in 0..N_SENSORS {
            std[k] = (sq[k] / n as f64).sqrt().max(STD_FLOOR);
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, values: &[f64; N_SENSORS]) -> [f64; N_SENSORS] {
        let mut out = [0.0; N_SENSORS];
        for k in 0..N_SENSORS {
            out[k] = (values[k] - self.mean[k]) / self.std[k];
        }
        out
    }
}

/// Network-ready view of a dataset: z-scored inputs and gaze targets.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDataset {
    pub inputs: Vec<[f64; N_SENSORS]>,
    pub targets: Vec<GazeSample>,
    pub stats: NormStats,
}

impl NormalizedDataset {
    pub fn with_stats(dataset: &Dataset, stats: NormStats) -> Self {
        Self {
            inputs: dataset.records.iter().map(|r| stats.apply(&r.values)).collect(),
            targets: dataset.records.iter().map(|r| r.gaze_truth).collect(),
            stats,
        }
    }

    pub fn gather(&self, indices: &[usize]) -> (Vec<[f64; N_SENSORS]>, Vec<GazeSample>) {
        (
            indices.iter().map(|&i| self.inputs[i]).collect(),
            indices.iter().map(|&i| self.targets[i]).collect(),
        )
    }
}

/// Fits statistics on the training records only and applies them to every
/// record.
pub fn normalize(dataset: &Dataset, train: &[usize]) -> Result<NormalizedDataset> {
    let stats = NormStats::fit(train.iter().map(|&i| &dataset.records[i].values))?;
    Ok(NormalizedDataset::with_stats(dataset, stats))
}
