//! Sensor-shift generation, quantisation and binning.
//!
//! Shifts model a planar repositioning of the headset: the photosensor array
//! moves by `(dx, dy)` millimetres relative to the eye. Two generators are
//! provided: independent zero-mean Gaussians per axis (the realistic manual
//! repositioning model) and the evenly spaced rectangular grid used by older
//! simulation studies.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest admissible shift component, in mm. Beyond this the crop starts
/// pushing eye features out of the simulated image.
pub const MAX_SHIFT_MM: f64 = 5.0;

/// Integer pixel displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub struct PixelOffset {
    pub dx: i64,
    pub dy: i64,
}

impl PixelOffset {
    pub fn new(dx: i64, dy: i64) -> Self {
        Self { dx, dy }
    }
}

impl std::ops::Add for PixelOffset {
    type Output = PixelOffset;

    fn add(self, rhs: Self) -> Self {
        PixelOffset::new(self.dx + rhs.dx, self.dy + rhs.dy)
    }
}

/// Planar displacement in mm, plus its pixel quantisation once known.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Shift2D {
    pub dx_mm: f64,
    pub dy_mm: f64,
    /// Set by [`mm_to_px`].
    pub realized_px: Option<PixelOffset>,
}

impl Shift2D {
    pub const ZERO: Shift2D = Shift2D {
        dx_mm: 0.0,
        dy_mm: 0.0,
        realized_px: None,
    };

    pub fn new(dx_mm: f64, dy_mm: f64) -> Self {
        Self {
            dx_mm,
            dy_mm,
            realized_px: None,
        }
    }

    /// Euclidean magnitude in mm.
    pub fn magnitude_mm(&self) -> f64 {
        self.dx_mm.hypot(self.dy_mm)
    }

    pub fn within_limit(&self) -> bool {
        self.dx_mm.abs() <= MAX_SHIFT_MM && self.dy_mm.abs() <= MAX_SHIFT_MM
    }
}

/// How shift values are generated for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftDistribution {
    Gaussian { sigma_mm: f64 },
    Grid { range_mm: f64, n_per_axis: usize },
}

impl ShiftDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ShiftDistribution::Gaussian { sigma_mm } => {
                if !(sigma_mm > 0.0 && sigma_mm.is_finite()) {
                    return Err(Error::config(format!("sigma_mm must be > 0, got {sigma_mm}")));
                }
            }
            ShiftDistribution::Grid {
                range_mm,
                n_per_axis,
            } => {
                grid_shifts(range_mm, n_per_axis)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for ShiftDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShiftDistribution::Gaussian { sigma_mm } => write!(f, "gaussian(sigma={sigma_mm}mm)"),
            ShiftDistribution::Grid {
                range_mm,
                n_per_axis,
            } => write!(f, "grid(range={range_mm}mm, n={n_per_axis})"),
        }
    }
}

/// Evaluation bins over shift magnitude (mm).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ShiftBin {
    /// [0.0, 1.0]
    B1,
    /// (1.0, 1.5]
    B2,
    /// (1.5, 2.0]
    B3,
    /// > 2.0
    B4,
}

impl ShiftBin {
    pub const ALL: [ShiftBin; 4] = [ShiftBin::B1, ShiftBin::B2, ShiftBin::B3, ShiftBin::B4];

    pub fn label(self) -> &'static str {
        match self {
            ShiftBin::B1 => "B1",
            ShiftBin::B2 => "B2",
            ShiftBin::B3 => "B3",
            ShiftBin::B4 => "B4",
        }
    }

    pub fn range_label(self) -> &'static str {
        match self {
            ShiftBin::B1 => "[0.0,1.0]",
            ShiftBin::B2 => "(1.0,1.5]",
            ShiftBin::B3 => "(1.5,2.0]",
            ShiftBin::B4 => ">2.0",
        }
    }

    /// Bin for a magnitude in mm.
    pub fn from_magnitude(magnitude_mm: f64) -> ShiftBin {
        if magnitude_mm <= 1.0 {
            ShiftBin::B1
        } else if magnitude_mm <= 1.5 {
            ShiftBin::B2
        } else if magnitude_mm <= 2.0 {
            ShiftBin::B3
        } else {
            ShiftBin::B4
        }
    }
}

impl fmt::Display for ShiftBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for ShiftBin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B1" => Ok(ShiftBin::B1),
            "B2" => Ok(ShiftBin::B2),
            "B3" => Ok(ShiftBin::B3),
            "B4" => Ok(ShiftBin::B4),
            other => Err(Error::config(format!("unknown shift bin {other:?}"))),
        }
    }
}

/// Norm used to turn a 2-D shift into a magnitude for binning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinNorm {
    #[default]
    Euclidean,
    MaxAxis,
}

/// Draws one shift with independent `N(0, sigma²)` components, redrawing the
/// pair whenever a component exceeds [`MAX_SHIFT_MM`].
pub fn sample_gaussian_shift<R: rand::Rng + ?Sized>(sigma_mm: f64, rng: &mut R) -> Shift2D {
    sample_gaussian_shift_counted(sigma_mm, rng).0
}

/// As [`sample_gaussian_shift`], also returning how many pairs were rejected.
pub fn sample_gaussian_shift_counted<R: rand::Rng + ?Sized>(
    sigma_mm: f64,
    rng: &mut R,
) -> (Shift2D, u32) {
    let normal = Normal::new(0.0, sigma_mm).expect("sigma must be finite and positive");
    let mut rejected = 0;
    loop {
        let shift = Shift2D::new(normal.sample(rng), normal.sample(rng));
        if shift.within_limit() {
            return (shift, rejected);
        }
        rejected += 1;
    }
}

/// Cartesian product of `n_per_axis` evenly spaced values over
/// `[-range_mm, range_mm]`, endpoints included. Row-major in `dy`, then `dx`.
pub fn grid_shifts(range_mm: f64, n_per_axis: usize) -> Result<Vec<Shift2D>> {
    if n_per_axis < 2 {
        return Err(Error::config(format!("grid needs n_per_axis >= 2, got {n_per_axis}")));
    }
    if !(range_mm >= 0.0) || range_mm > MAX_SHIFT_MM {
        return Err(Error::config(format!(
            "grid range {range_mm} mm outside [0, {MAX_SHIFT_MM}] mm"
        )));
    }
    let step = 2.0 * range_mm / (n_per_axis - 1) as f64;
    let value = |i: usize| {
        // exact zero at the centre of odd grids and exact endpoints
        if 2 * i + 1 == n_per_axis {
            0.0
        } else if i + 1 == n_per_axis {
            range_mm
        } else {
            -range_mm + step * i as f64
        }
    };
    let mut out = Vec::with_capacity(n_per_axis * n_per_axis);
    for iy in 0..n_per_axis {
        for ix in 0..n_per_axis {
            out.push(Shift2D::new(value(ix), value(iy)));
        }
    }
    Ok(out)
}

/// Quantises a shift to whole pixels, rounding half away from zero.
pub fn mm_to_px(shift: Shift2D, scale_px_per_mm: f64) -> Shift2D {
    assert!(scale_px_per_mm > 0.0, "scale must be positive");
    Shift2D {
        realized_px: Some(PixelOffset::new(
            (shift.dx_mm * scale_px_per_mm).round() as i64,
            (shift.dy_mm * scale_px_per_mm).round() as i64,
        )),
        ..shift
    }
}

pub fn bin_shift(shift: &Shift2D) -> ShiftBin {
    bin_shift_with(shift, BinNorm::Euclidean)
}

pub fn bin_shift_with(shift: &Shift2D, norm: BinNorm) -> ShiftBin {
    let magnitude = match norm {
        BinNorm::Euclidean => shift.magnitude_mm(),
        BinNorm::MaxAxis => shift.dx_mm.abs().max(shift.dy_mm.abs()),
    };
    ShiftBin::from_magnitude(magnitude)
}

/// Picks one grid shift uniformly at random.
pub fn sample_grid_shift<R: rand::Rng + ?Sized>(grid: &[Shift2D], rng: &mut R) -> Shift2D {
    grid[rng.random_range(0..grid.len())]
}

/// Writes `dx_mm,dy_mm,dx_px,dy_px,bin` rows. Unquantised shifts leave the
/// pixel columns empty.
pub fn write_shift_manifest(path: &Path, shifts: &[Shift2D]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "dx_mm,dy_mm,dx_px,dy_px,bin")?;
    for s in shifts {
        let (px, py) = match s.realized_px {
            Some(p) => (p.dx.to_string(), p.dy.to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(out, "{},{},{},{},{}", s.dx_mm, s.dy_mm, px, py, bin_shift(s))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn tiny_sigma_gives_zero_shift() {
        let mut rng = seed::rng(3);
        for _ in 0..100 {
            let s = sample_gaussian_shift(1e-9, &mut rng);
            assert!(s.dx_mm.abs() < 1e-7 && s.dy_mm.abs() < 1e-7);
            let q = mm_to_px(s, 20.0).realized_px.unwrap();
            assert_eq!(q, PixelOffset::new(0, 0));
        }
    }

    #[test]
    fn samples_respect_limit() {
        let mut rng = seed::rng(11);
        for _ in 0..20_000 {
            assert!(sample_gaussian_shift(2.5, &mut rng).within_limit());
        }
    }

    #[test]
    fn grid_five_by_five() {
        let g = grid_shifts(2.0, 5).unwrap();
        assert_eq!(g.len(), 25);
        let xs: Vec<f64> = g[..5].iter().map(|s| s.dx_mm).collect();
        assert_eq!(xs, vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn grid_corners_only() {
        let g = grid_shifts(2.0, 2).unwrap();
        assert_eq!(g.len(), 4);
        for s in &g {
            assert_eq!(s.dx_mm.abs(), 2.0);
            assert_eq!(s.dy_mm.abs(), 2.0);
        }
    }

    #[test]
    fn grid_contains_origin_iff_odd() {
        for n in 2..12 {
            let g = grid_shifts(3.0, n).unwrap();
            let has_zero = g.iter().any(|s| s.dx_mm == 0.0 && s.dy_mm == 0.0);
            assert_eq!(has_zero, n % 2 == 1, "n = {n}");
        }
    }

    #[test]
    fn grid_rejects_bad_config() {
        assert!(matches!(grid_shifts(5.5, 5), Err(Error::Config(_))));
        assert!(matches!(grid_shifts(2.0, 1), Err(Error::Config(_))));
        assert!(grid_shifts(5.0, 3).is_ok());
    }

    #[test]
    fn pixel_quantisation() {
        let q = |dx, dy| mm_to_px(Shift2D::new(dx, dy), 20.0).realized_px.unwrap();
        assert_eq!(q(2.0, -1.5), PixelOffset::new(40, -30));
        assert_eq!(q(0.024, 0.0), PixelOffset::new(0, 0));
        assert_eq!(q(0.025, 0.0), PixelOffset::new(1, 0));
        assert_eq!(q(-0.025, 0.0), PixelOffset::new(-1, 0));
        let s = mm_to_px(Shift2D::new(2.0, -1.5), 20.0);
        assert_eq!((s.dx_mm, s.dy_mm), (2.0, -1.5));
    }

    #[test]
    fn binning_examples() {
        assert_eq!(bin_shift(&Shift2D::new(0.6, 0.8)), ShiftBin::B1);
        assert_eq!(bin_shift(&Shift2D::new(1.2, 0.0)), ShiftBin::B2);
        assert_eq!(bin_shift(&Shift2D::new(1.7, 0.0)), ShiftBin::B3);
        assert_eq!(bin_shift(&Shift2D::new(2.0, 2.0)), ShiftBin::B4);
        assert_eq!(bin_shift(&Shift2D::ZERO), ShiftBin::B1);
        // 1.4 on the larger axis lands in B2 under the max norm, B3 in Euclidean
        let s = Shift2D::new(1.4, 0.8);
        assert_eq!(bin_shift_with(&s, BinNorm::MaxAxis), ShiftBin::B2);
        assert_eq!(bin_shift(&s), ShiftBin::B3);
    }

    #[test]
    fn bin_boundaries_are_closed_above() {
        assert_eq!(ShiftBin::from_magnitude(1.0), ShiftBin::B1);
        assert_eq!(ShiftBin::from_magnitude(1.5), ShiftBin::B2);
        assert_eq!(ShiftBin::from_magnitude(2.0), ShiftBin::B3);
        assert_eq!(ShiftBin::from_magnitude(2.0 + 1e-12), ShiftBin::B4);
    }

    #[test]
    fn distribution_validation() {
        assert!(ShiftDistribution::Gaussian { sigma_mm: 0.0 }.validate().is_err());
        assert!(ShiftDistribution::Gaussian { sigma_mm: 1.0 }.validate().is_ok());
        assert!(ShiftDistribution::Grid {
            range_mm: 2.0,
            n_per_axis: 5
        }
        .validate()
        .is_ok());
    }

    proptest::proptest! {
        #[test]
        fn px_round_trip_within_half_pixel(dx in -5.0f64..5.0, dy in -5.0f64..5.0, scale in 1.0f64..50.0) {
            let q = mm_to_px(Shift2D::new(dx, dy), scale).realized_px.unwrap();
            proptest::prop_assert!((q.dx as f64 / scale - dx).abs() <= 0.5 / scale + 1e-12);
            proptest::prop_assert!((q.dy as f64 / scale - dy).abs() <= 0.5 / scale + 1e-12);
        }

        #[test]
        fn binning_total_and_exclusive(m in 0.0f64..10.0) {
            let hits = [
                m <= 1.0,
                m > 1.0 && m <= 1.5,
                m > 1.5 && m <= 2.0,
                m > 2.0,
            ];
            proptest::prop_assert_eq!(hits.iter().filter(|&&h| h).count(), 1);
            let idx = hits.iter().position(|&h| h).unwrap();
            proptest::prop_assert_eq!(ShiftBin::from_magnitude(m), ShiftBin::ALL[idx]);
        }
    }
}
