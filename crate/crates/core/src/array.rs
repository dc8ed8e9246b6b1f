//! The 3×5 photosensor array.
//!
//! Each sensor integrates a square window of the eye image weighted by an
//! isotropic Gaussian receptive field (σ = window side / 4). A sensor shift
//! is simulated by translating every window by the shift's pixel offset; the
//! per-frame head offset is added on top so the windows track the eye the way
//! a head-referenced crop would.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::shift::{bin_shift, mm_to_px, PixelOffset, Shift2D, MAX_SHIFT_MM};
use crate::synth_eye::{EyeImage, GazeSample, ImageMeta};
use crate::{Error, Result, SubjectId};

pub const ROWS: usize = 3;
pub const COLS: usize = 5;
pub const N_SENSORS: usize = ROWS * COLS;

/// How a nominal "N pixel window" is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowConvention {
    /// N is the side length of a square window.
    #[default]
    Side,
    /// N is the pixel count; side = √N.
    Area,
}

impl WindowConvention {
    pub fn side_for(self, window_px: usize) -> Result<usize> {
        let side = match self {
            WindowConvention::Side => window_px,
            WindowConvention::Area => {
                let s = (window_px as f64).sqrt().round() as usize;
                if s * s != window_px {
                    return Err(Error::config(format!("window area {window_px} is not a square")));
                }
                s
            }
        };
        if side % 2 == 0 {
            return Err(Error::config(format!("window side must be odd, got {side}")));
        }
        Ok(side)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayLayout {
    pub window_side_px: usize,
    /// Centre-to-centre spacing between neighbouring sensors.
    pub pitch_px: usize,
    /// (x, y) of the middle sensor at zero offset.
    pub array_center_px: (i64, i64),
    /// Crop margin: the largest total offset the windows may take.
    pub max_shift_mm: f64,
    pub compensate_head: bool,
}

impl Default for ArrayLayout {
    fn default() -> Self {
        Self {
            window_side_px: 121,
            pitch_px: 60,
            array_center_px: (320, 240),
            max_shift_mm: MAX_SHIFT_MM,
            compensate_head: true,
        }
    }
}

impl ArrayLayout {
    /// (width, height) covered by all windows at zero offset.
    pub fn footprint_px(&self) -> (usize, usize) {
        (
            (COLS - 1) * self.pitch_px + self.window_side_px,
            (ROWS - 1) * self.pitch_px + self.window_side_px,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.pitch_px == 0 {
            return Err(Error::config("pitch_px must be positive"));
        }
        if self.window_side_px % 2 == 0 {
            return Err(Error::config("window_side_px must be odd"));
        }
        Ok(())
    }

    /// Centre of sensor `(row, col)` at zero offset.
    pub fn sensor_center(&self, row: usize, col: usize) -> (i64, i64) {
        let p = self.pitch_px as i64;
        (
            self.array_center_px.0 + (col as i64 - (COLS / 2) as i64) * p,
            self.array_center_px.1 + (row as i64 - (ROWS / 2) as i64) * p,
        )
    }

    pub fn margin_px(&self, scale_px_per_mm: f64) -> i64 {
        (self.max_shift_mm * scale_px_per_mm).round() as i64
    }

    /// Total pixel offset applied to every window: the quantised shift plus,
    /// when compensating, the independently quantised head offset.
    pub fn crop_offset(&self, meta: &ImageMeta, shift: &Shift2D, compensate_head: bool) -> Result<PixelOffset> {
        let scale = meta.scale_px_per_mm;
        let shift_px = match shift.realized_px {
            Some(p) => p,
            None => mm_to_px(*shift, scale).realized_px.expect("just quantised"),
        };
        let total = if compensate_head {
            shift_px + mm_to_px(meta.head_offset_mm, scale).realized_px.expect("just quantised")
        } else {
            shift_px
        };
        let limit = self.margin_px(scale);
        let boundary = Error::Boundary {
            dx: total.dx,
            dy: total.dy,
            limit,
        };
        if total.dx.abs() > limit || total.dy.abs() > limit {
            return Err(boundary);
        }
        let half = (self.window_side_px / 2) as i64;
        let (x0, y0) = self.sensor_center(0, 0);
        let (x1, y1) = self.sensor_center(ROWS - 1, COLS - 1);
        let inside = x0 + total.dx - half >= 0
            && y0 + total.dy - half >= 0
            && x1 + total.dx + half < meta.width as i64
            && y1 + total.dy + half < meta.height as i64;
        if !inside {
            return Err(boundary);
        }
        Ok(total)
    }
}

/// Normalised Gaussian receptive field over a square window.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceptiveKernel {
    pub side: usize,
    pub sigma_px: f64,
    /// Row-major, sums to one.
    pub weights: Vec<f64>,
}

impl ReceptiveKernel {
    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.side + col]
    }

    pub fn half(&self) -> usize {
        self.side / 2
    }
}

pub fn receptive_kernel(window_side_px: usize) -> Result<ReceptiveKernel> {
    if window_side_px % 2 == 0 {
        return Err(Error::config(format!("window side must be odd, got {window_side_px}")));
    }
    let side = window_side_px;
    let sigma = side as f64 / 4.0;
    let h = (side / 2) as f64;
    let mut weights = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let (di, dj) = (i as f64 - h, j as f64 - h);
            weights.push((-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(ReceptiveKernel {
        side,
        sigma_px: sigma,
        weights,
    })
}

/// One reading of the whole array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorFrame {
    /// Row-major 3×5 sensor outputs.
    pub values: [f64; N_SENSORS],
    pub shift: Shift2D,
    pub gaze_truth: GazeSample,
    pub subject_id: SubjectId,
}

impl SensorFrame {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * COLS + col]
    }
}

/// Kernel-weighted sum of the window centred at `(cx, cy)`. The caller has
/// already checked bounds.
fn window_response(image: &EyeImage, kernel: &ReceptiveKernel, cx: i64, cy: i64) -> f64 {
    let half = kernel.half() as i64;
    let x0 = (cx - half) as usize;
    let y0 = (cy - half) as usize;
    kernel
        .weights
        .chunks_exact(kernel.side)
        .enumerate()
        .map(|(i, krow)| {
            let irow = &image.row(y0 + i)[x0..x0 + kernel.side];
            krow.iter().zip(irow).map(|(w, p)| w * p).sum::<f64>()
        })
        .sum()
}

/// Simulates the array over `image` with the windows displaced by `shift`
/// (and by the head offset when `layout.compensate_head` is set).
pub fn simulate_frame(
    image: &EyeImage,
    layout: &ArrayLayout,
    kernel: &ReceptiveKernel,
    shift: Shift2D,
) -> Result<SensorFrame> {
    if kernel.side != layout.window_side_px {
        return Err(Error::config("kernel side does not match layout window"));
    }
    let shift = mm_to_px(shift, image.scale_px_per_mm);
    let offset = layout.crop_offset(&image.meta(), &shift, layout.compensate_head)?;
    let mut values = [0.0; N_SENSORS];
    for r in 0..ROWS {
        for c in 0..COLS {
            let (x, y) = layout.sensor_center(r, c);
            values[r * COLS + c] = window_response(image, kernel, x + offset.dx, y + offset.dy);
        }
    }
    Ok(SensorFrame {
        values,
        shift,
        gaze_truth: image.gaze_truth,
        subject_id: image.subject_id,
    })
}

/// `subject,x_deg,y_deg,dx_mm,dy_mm,s00..s24,bin` rows.
pub fn write_frames_csv(path: &Path, frames: &[SensorFrame]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "subject,x_deg,y_deg,dx_mm,dy_mm")?;
    for r in 0..ROWS {
        for c in 0..COLS {
            write!(out, ",s{r}{c}")?;
        }
    }
    writeln!(out, ",bin")?;
    for f in frames {
        write!(
            out,
            "{},{},{},{},{}",
            f.subject_id, f.gaze_truth.x_deg, f.gaze_truth.y_deg, f.shift.dx_mm, f.shift.dy_mm
        )?;
        for v in &f.values {
            write!(out, ",{v}")?;
        }
        writeln!(out, ",{}", bin_shift(&f.shift))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta_for(img: &EyeImage) -> ImageMeta {
        img.meta()
    }

    #[test]
    fn kernel_shape() {
        let k = receptive_kernel(121).unwrap();
        assert_eq!(k.sigma_px, 30.25);
        let sum: f64 = k.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let c = k.weight(60, 60);
        assert!(k.weights.iter().all(|&w| w <= c));
        // exp(-30² / (2·30.25²))
        let ratio = k.weight(60, 90) / c;
        assert!((ratio - 0.611_543_2).abs() < 1e-6, "ratio {ratio}");
        assert_eq!(k.weight(60, 90), k.weight(90, 60));
        assert_eq!(k.weight(60, 90), k.weight(30, 60));
    }

    #[test]
    fn even_window_rejected() {
        assert!(matches!(receptive_kernel(120), Err(Error::Config(_))));
        assert_eq!(WindowConvention::Area.side_for(121).unwrap(), 11);
        assert_eq!(WindowConvention::Side.side_for(121).unwrap(), 121);
        assert!(WindowConvention::Area.side_for(100).is_err());
    }

    #[test]
    fn default_footprint() {
        assert_eq!(ArrayLayout::default().footprint_px(), (361, 241));
    }

    #[test]
    fn crop_offsets() {
        let layout = ArrayLayout::default();
        let mut img = EyeImage::uniform(640, 480, 0.5, 20.0);
        let m = meta_for(&img);
        assert_eq!(layout.crop_offset(&m, &Shift2D::ZERO, true).unwrap(), PixelOffset::new(0, 0));

        img.head_offset_mm = Shift2D::new(-0.5, 0.0);
        let m = meta_for(&img);
        assert_eq!(
            layout.crop_offset(&m, &Shift2D::new(2.0, 0.0), true).unwrap(),
            PixelOffset::new(30, 0)
        );
        assert_eq!(
            layout.crop_offset(&m, &Shift2D::new(2.0, 0.0), false).unwrap(),
            PixelOffset::new(40, 0)
        );

        // 5.1 mm = 102 px exceeds the 100 px crop margin of the default layout
        let m = meta_for(&EyeImage::uniform(640, 480, 0.5, 20.0));
        assert!(matches!(
            layout.crop_offset(&m, &Shift2D::new(5.1, 0.0), true),
            Err(Error::Boundary { dx: 102, dy: 0, limit: 100 })
        ));
        assert!(layout.crop_offset(&m, &Shift2D::new(5.0, -5.0), true).is_ok());
    }

    #[test]
    fn small_image_hits_bounds() {
        let layout = ArrayLayout::default();
        let img = EyeImage::uniform(400, 300, 0.5, 20.0);
        assert!(matches!(
            layout.crop_offset(&img.meta(), &Shift2D::ZERO, true),
            Err(Error::Boundary { .. })
        ));
    }

    #[test]
    fn uniform_image_reads_uniform() {
        let layout = ArrayLayout::default();
        let k = receptive_kernel(121).unwrap();
        let img = EyeImage::uniform(640, 480, 0.7, 20.0);
        for s in [Shift2D::ZERO, Shift2D::new(4.9, -3.3), Shift2D::new(-5.0, 5.0)] {
            let f = simulate_frame(&img, &layout, &k, s).unwrap();
            assert!(f.values.iter().all(|v| (v - 0.7).abs() < 1e-9));
        }
    }

    #[test]
    fn impulse_reads_kernel_weights() {
        let layout = ArrayLayout::default();
        let k = receptive_kernel(121).unwrap();
        let mut img = EyeImage::uniform(640, 480, 0.0, 20.0);
        let (x, y) = layout.sensor_center(1, 2);
        img.pixels[y as usize * 640 + x as usize] = 1.0;
        let f = simulate_frame(&img, &layout, &k, Shift2D::ZERO).unwrap();
        assert_eq!(f.get(1, 2), k.weight(60, 60));
        // the neighbour one pitch (60 px) to the right sees the impulse at its
        // window column 0, row 60
        assert_eq!(f.get(1, 3), k.weight(60, 0));
        assert_eq!(f.get(1, 1), k.weight(60, 120));
        assert_eq!(f.get(0, 2), k.weight(120, 60));
        assert_eq!(f.get(1, 0), 0.0);
        assert_eq!(f.get(0, 0), 0.0);
    }

    #[test]
    fn metadata_propagates() {
        let layout = ArrayLayout::default();
        let k = receptive_kernel(121).unwrap();
        let mut img = EyeImage::uniform(640, 480, 0.3, 20.0);
        img.gaze_truth = GazeSample::new(1.5, -2.0);
        img.subject_id = 7;
        let f = simulate_frame(&img, &layout, &k, Shift2D::new(1.0, 0.5)).unwrap();
        assert_eq!(f.gaze_truth, img.gaze_truth);
        assert_eq!(f.subject_id, 7);
        assert_eq!(f.shift.realized_px, Some(PixelOffset::new(20, 10)));
    }
}
