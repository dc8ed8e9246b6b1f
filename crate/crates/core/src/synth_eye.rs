//! Parametric periocular images standing in for recorded eye-camera frames.
//!
//! The scene is flat: a skin background, a scleral ellipse fixed to the
//! head, and concentric iris and pupil discs that translate linearly with
//! gaze. Iris and pupil are only visible inside the scleral ellipse. Head
//! movement translates the whole eye region. Optional additive Gaussian pixel
//! noise is clipped back into `[0, 1]`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed::{self, tag};
use crate::shift::Shift2D;
use crate::{Error, Result, SubjectId};

/// Horizontal half-extent of the stimulus operating range, degrees.
pub const RANGE_X_DEG: f64 = 20.51;
/// Vertical half-extent of the stimulus operating range, degrees.
pub const RANGE_Y_DEG: f64 = 16.7;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GazeSample {
    pub x_deg: f64,
    pub y_deg: f64,
}

impl GazeSample {
    pub fn new(x_deg: f64, y_deg: f64) -> Self {
        Self { x_deg, y_deg }
    }

    pub fn distance(&self, other: &GazeSample) -> f64 {
        (self.x_deg - other.x_deg).hypot(self.y_deg - other.y_deg)
    }

    pub fn in_range(&self, range_x: f64, range_y: f64) -> bool {
        self.x_deg.abs() <= range_x && self.y_deg.abs() <= range_y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Reflectivity {
    pub skin: f64,
    pub sclera: f64,
    pub iris: f64,
    pub pupil: f64,
}

impl Default for Reflectivity {
    fn default() -> Self {
        Self {
            skin: 0.55,
            sclera: 0.85,
            iris: 0.35,
            pupil: 0.05,
        }
    }
}

impl Reflectivity {
    fn all(&self) -> [f64; 4] {
        [self.skin, self.sclera, self.iris, self.pupil]
    }
}

/// Anatomy and appearance of one simulated eye.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EyeModelParams {
    pub iris_radius_mm: f64,
    pub pupil_radius_mm: f64,
    /// Horizontal and vertical semi-axes of the visible sclera.
    pub sclera_semi_axes_mm: (f64, f64),
    /// (x, y) = (column, row) of the eye centre at zero gaze and head offset.
    pub eye_center_px: (f64, f64),
    pub reflectivity: Reflectivity,
    /// Pupil-centre displacement per degree of gaze, (horizontal, vertical).
    pub gaze_gain_px_per_deg: (f64, f64),
    pub noise_std: f64,
    pub subject_id: SubjectId,
}

impl Default for EyeModelParams {
    fn default() -> Self {
        Self {
            iris_radius_mm: 3.5,
            pupil_radius_mm: 1.5,
            sclera_semi_axes_mm: (8.0, 6.0),
            eye_center_px: (320.0, 240.0),
            reflectivity: Reflectivity::default(),
            gaze_gain_px_per_deg: (4.0, 4.0),
            noise_std: 0.02,
            subject_id: 0,
        }
    }
}

impl EyeModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.reflectivity.all().iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config("reflectivities must lie in [0, 1]"));
        }
        if !(self.pupil_radius_mm > 0.0 && self.pupil_radius_mm < self.iris_radius_mm) {
            return Err(Error::config("need 0 < pupil_radius_mm < iris_radius_mm"));
        }
        let (gx, gy) = self.gaze_gain_px_per_deg;
        if !(gx > 0.0 && gy > 0.0) {
            return Err(Error::config("gaze gains must be strictly positive"));
        }
        let (a, b) = self.sclera_semi_axes_mm;
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::config("sclera semi-axes must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be finite and >= 0"));
        }
        Ok(())
    }

    /// Smallest distance (px) between any eye feature's bounding box and the
    /// image border, for the given gaze and head offset. Negative means the
    /// feature leaves the image.
    pub fn feature_clearance_px(&self, spec: &ImageSpec, gaze: GazeSample, head_mm: (f64, f64)) -> f64 {
        let s = spec.scale_px_per_mm;
        let (hx, hy) = (head_mm.0 * s, head_mm.1 * s);
        let (ex, ey) = self.eye_center_px;
        let (px, py) = self.pupil_center(gaze, head_mm, s);
        let iris = self.iris_radius_mm * s;
        let (a, b) = (self.sclera_semi_axes_mm.0 * s, self.sclera_semi_axes_mm.1 * s);
        let boxes = [
            (px - iris, px + iris, py - iris, py + iris),
            (ex + hx - a, ex + hx + a, ey + hy - b, ey + hy + b),
        ];
        let (w, h) = ((spec.width_px - 1) as f64, (spec.height_px - 1) as f64);
        boxes
            .iter()
            .map(|&(x0, x1, y0, y1)| x0.min(w - x1).min(y0).min(h - y1))
            .fold(f64::INFINITY, f64::min)
    }

    /// Minimum clearance over the corners of the operating range with the
    /// head pushed to `±max_head_mm` on both axes.
    pub fn worst_case_clearance_px(&self, spec: &ImageSpec, max_head_mm: f64) -> f64 {
        let mut worst = f64::INFINITY;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                let gaze = GazeSample::new(sx * RANGE_X_DEG, sy * RANGE_Y_DEG);
                let head = (sx * max_head_mm, sy * max_head_mm);
                worst = worst.min(self.feature_clearance_px(spec, gaze, head));
            }
        }
        worst
    }

    fn pupil_center(&self, gaze: GazeSample, head_mm: (f64, f64), scale: f64) -> (f64, f64) {
        let (ex, ey) = self.eye_center_px;
        let (gx, gy) = self.gaze_gain_px_per_deg;
        (
            ex + gaze.x_deg * gx + head_mm.0 * scale,
            ey + gaze.y_deg * gy + head_mm.1 * scale,
        )
    }
}

/// Image geometry shared by every frame of a session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSpec {
    pub width_px: usize,
    pub height_px: usize,
    pub scale_px_per_mm: f64,
    /// Largest sensor shift the image must accommodate.
    pub max_shift_mm: f64,
    /// (width, height) of the photosensor array's pixel footprint.
    pub footprint_px: (usize, usize),
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            width_px: 640,
            height_px: 480,
            scale_px_per_mm: 20.0,
            max_shift_mm: crate::shift::MAX_SHIFT_MM,
            footprint_px: (361, 241),
        }
    }
}

impl ImageSpec {
    pub fn margin_px(&self) -> usize {
        (self.max_shift_mm * self.scale_px_per_mm).round() as usize
    }

    /// Checks that the array footprint plus the shift margin on both sides
    /// fits in the image.
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_px_per_mm > 0.0) {
            return Err(Error::config("scale_px_per_mm must be positive"));
        }
        let m = 2 * self.margin_px();
        let (fw, fh) = self.footprint_px;
        if self.width_px < fw + m || self.height_px < fh + m {
            return Err(Error::config(format!(
                "image {}x{} px too small for a {}x{} px array with {} mm shift margin",
                self.width_px, self.height_px, fw, fh, self.max_shift_mm
            )));
        }
        Ok(())
    }
}

/// A grayscale frame with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EyeImage {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub scale_px_per_mm: f64,
    pub gaze_truth: GazeSample,
    pub head_offset_mm: Shift2D,
    pub subject_id: SubjectId,
}

impl EyeImage {
    pub fn uniform(width: usize, height: usize, value: f64, scale_px_per_mm: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
            scale_px_per_mm,
            gaze_truth: GazeSample::default(),
            head_offset_mm: Shift2D::ZERO,
            subject_id: 0,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn meta(&self) -> ImageMeta {
        ImageMeta {
            subject_id: self.subject_id,
            gaze: self.gaze_truth,
            head_offset_mm: self.head_offset_mm,
            scale_px_per_mm: self.scale_px_per_mm,
            width: self.width,
            height: self.height,
        }
    }
}

/// What is known about an image without decoding its pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMeta {
    pub subject_id: SubjectId,
    pub gaze: GazeSample,
    pub head_offset_mm: Shift2D,
    pub scale_px_per_mm: f64,
    pub width: usize,
    pub height: usize,
}

/// Random-access collection of eye images, rendered or loaded on demand.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn meta(&self, index: usize) -> ImageMeta;

    fn load(&self, index: usize) -> Result<EyeImage>;
}

/// Inclusive span of integer columns covered by `|x - c| <= half`.
fn span(c: f64, half: f64, width: usize) -> Option<(usize, usize)> {
    let lo = (c - half).ceil().max(0.0);
    let hi = (c + half).floor().min(width as f64 - 1.0);
    (lo <= hi).then(|| (lo as usize, hi as usize))
}

fn intersect(a: Option<(usize, usize)>, b: Option<(usize, usize)>) -> Option<(usize, usize)> {
    let (a, b) = (a?, b?);
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    (lo <= hi).then_some((lo, hi))
}

/// Renders one frame. `noise_seed` only matters when `params.noise_std > 0`.
pub fn render_eye(
    params: &EyeModelParams,
    gaze: GazeSample,
    head_offset_mm: Shift2D,
    spec: &ImageSpec,
    noise_seed: u64,
) -> Result<EyeImage> {
    spec.validate()?;
    let (w, h) = (spec.width_px, spec.height_px);
    let s = spec.scale_px_per_mm;
    let refl = params.reflectivity;
    let head = (head_offset_mm.dx_mm, head_offset_mm.dy_mm);
    let (cx, cy) = params.pupil_center(gaze, head, s);
    let (sx, sy) = (params.eye_center_px.0 + head.0 * s, params.eye_center_px.1 + head.1 * s);
    let (a, b) = (params.sclera_semi_axes_mm.0 * s, params.sclera_semi_axes_mm.1 * s);
    let r_iris = params.iris_radius_mm * s;
    let r_pupil = params.pupil_radius_mm * s;

    let mut pixels = vec![refl.skin; w * h];
    for (y, row) in pixels.chunks_exact_mut(w).enumerate() {
        let yf = y as f64;
        let ey = (yf - sy) / b;
        if ey.abs() > 1.0 {
            continue;
        }
        let sclera = span(sx, a * (1.0 - ey * ey).sqrt(), w);
        let disc = |r: f64| {
            let dy = yf - cy;
            (dy.abs() <= r).then(|| span(cx, (r * r - dy * dy).sqrt(), w)).flatten()
        };
        let iris = intersect(disc(r_iris), sclera);
        let pupil = intersect(disc(r_pupil), sclera);
        for (span, value) in [(sclera, refl.sclera), (iris, refl.iris), (pupil, refl.pupil)] {
            if let Some((lo, hi)) = span {
                row[lo..=hi].fill(value);
            }
        }
    }

    if params.noise_std > 0.0 {
        let mut rng = seed::rng(noise_seed);
        for p in &mut pixels {
            let n: f64 = StandardNormal.sample(&mut rng);
            *p = (*p + params.noise_std * n).clamp(0.0, 1.0);
        }
    }

    Ok(EyeImage {
        width: w,
        height: h,
        pixels,
        scale_px_per_mm: s,
        gaze_truth: gaze,
        head_offset_mm,
        subject_id: params.subject_id,
    })
}

/// Fixation stimulus layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StimulusSpec {
    /// Perfect square; laid out as a `k × k` lattice.
    pub n_fixations: usize,
    pub range_x_deg: f64,
    pub range_y_deg: f64,
    /// Inclusive range of samples recorded per fixation.
    pub samples_per_fixation: (usize, usize),
    pub jitter_std_deg: f64,
}

impl Default for StimulusSpec {
    fn default() -> Self {
        Self {
            n_fixations: 25,
            range_x_deg: RANGE_X_DEG,
            range_y_deg: RANGE_Y_DEG,
            samples_per_fixation: (16, 32),
            jitter_std_deg: 0.25,
        }
    }
}

/// Corner-inclusive lattice of fixation targets, row-major from the
/// bottom-left (most negative) corner.
pub fn stimulus_targets(spec: &StimulusSpec) -> Result<Vec<GazeSample>> {
    let k = (spec.n_fixations as f64).sqrt().round() as usize;
    if spec.n_fixations == 0 || k * k != spec.n_fixations {
        return Err(Error::config(format!(
            "n_fixations must be a perfect square, got {}",
            spec.n_fixations
        )));
    }
    if k == 1 {
        return Ok(vec![GazeSample::default()]);
    }
    let axis = |i: usize, range: f64| {
        let num = 2 * i as i64 - (k as i64 - 1);
        range * (num as f64 / (k - 1) as f64)
    };
    let mut out = Vec::with_capacity(spec.n_fixations);
    for iy in 0..k {
        for ix in 0..k {
            out.push(GazeSample::new(axis(ix, spec.range_x_deg), axis(iy, spec.range_y_deg)));
        }
    }
    Ok(out)
}

/// Head movement during a session: a per-sample Gaussian random walk,
/// clamped to `±clamp_mm` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadWalk {
    pub step_std_mm: f64,
    pub clamp_mm: f64,
}

impl Default for HeadWalk {
    fn default() -> Self {
        Self {
            step_std_mm: 0.05,
            clamp_mm: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionSample {
    pub gaze: GazeSample,
    pub head_offset_mm: Shift2D,
    pub noise_seed: u64,
}

/// A recording session whose frames are rendered on demand.
#[derive(Debug, Clone)]
pub struct Session {
    pub params: EyeModelParams,
    pub image_spec: ImageSpec,
    pub samples: Vec<SessionSample>,
}

impl Session {
    pub fn subject_id(&self) -> SubjectId {
        self.params.subject_id
    }

    pub fn render(&self, index: usize) -> Result<EyeImage> {
        let s = &self.samples[index];
        render_eye(&self.params, s.gaze, s.head_offset_mm, &self.image_spec, s.noise_seed)
    }

    pub fn images(&self) -> impl Iterator<Item = Result<EyeImage>> + '_ {
        (0..self.samples.len()).map(|i| self.render(i))
    }
}

impl ImageSource for Session {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn meta(&self, index: usize) -> ImageMeta {
        let s = &self.samples[index];
        ImageMeta {
            subject_id: self.params.subject_id,
            gaze: s.gaze,
            head_offset_mm: s.head_offset_mm,
            scale_px_per_mm: self.image_spec.scale_px_per_mm,
            width: self.image_spec.width_px,
            height: self.image_spec.height_px,
        }
    }

    fn load(&self, index: usize) -> Result<EyeImage> {
        self.render(index)
    }
}

/// Plans a session: fixation order, per-fixation sample counts, gaze jitter
/// and head walk are all drawn from `seed`. Nothing is rendered yet.
pub fn plan_session(
    stimulus: &StimulusSpec,
    params: &EyeModelParams,
    image_spec: &ImageSpec,
    head: HeadWalk,
    seed: u64,
) -> Result<Session> {
    params.validate()?;
    image_spec.validate()?;
    let (lo, hi) = stimulus.samples_per_fixation;
    if lo == 0 || lo > hi {
        return Err(Error::config("samples_per_fixation must be a non-empty range of positive counts"));
    }
    let mut targets = stimulus_targets(stimulus)?;
    let mut rng = seed::rng(seed);
    targets.shuffle(&mut rng);

    let jitter = (stimulus.jitter_std_deg > 0.0)
        .then(|| Normal::new(0.0, stimulus.jitter_std_deg).expect("finite jitter"));
    let step = (head.step_std_mm > 0.0).then(|| Normal::new(0.0, head.step_std_mm).expect("finite step"));
    let clip = 3.0 * stimulus.jitter_std_deg;
    let mut head_pos = (0.0f64, 0.0f64);
    let mut samples = Vec::new();
    for target in targets {
        let count = rng.random_range(lo..=hi);
        for _ in 0..count {
            let mut gaze = target;
            if let Some(j) = &jitter {
                gaze.x_deg += j.sample(&mut rng).clamp(-clip, clip);
                gaze.y_deg += j.sample(&mut rng).clamp(-clip, clip);
            }
            if let Some(st) = &step {
                head_pos.0 = (head_pos.0 + st.sample(&mut rng)).clamp(-head.clamp_mm, head.clamp_mm);
                head_pos.1 = (head_pos.1 + st.sample(&mut rng)).clamp(-head.clamp_mm, head.clamp_mm);
            }
            let index = samples.len() as u64;
            samples.push(SessionSample {
                gaze,
                head_offset_mm: Shift2D::new(head_pos.0, head_pos.1),
                noise_seed: seed::derive(seed, &[tag::NOISE, index]),
            });
        }
    }
    Ok(Session {
        params: params.clone(),
        image_spec: *image_spec,
        samples,
    })
}

/// Plans and renders a whole session.
pub fn generate_session(
    stimulus: &StimulusSpec,
    params: &EyeModelParams,
    image_spec: &ImageSpec,
    head_walk_std_mm: f64,
    seed: u64,
) -> Result<Vec<EyeImage>> {
    let head = HeadWalk {
        step_std_mm: head_walk_std_mm,
        ..HeadWalk::default()
    };
    plan_session(stimulus, params, image_spec, head, seed)?.images().collect()
}

/// Per-subject anatomy ranges; every value is drawn uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnatomyRanges {
    pub iris_radius_mm: (f64, f64),
    pub pupil_radius_mm: (f64, f64),
    pub sclera_semi_axis_x_mm: (f64, f64),
    pub sclera_semi_axis_y_mm: (f64, f64),
    pub gaze_gain_x_px_per_deg: (f64, f64),
    pub gaze_gain_y_px_per_deg: (f64, f64),
    /// Maximum absolute displacement of the eye centre, (x, y) px.
    pub eye_center_jitter_px: (f64, f64),
    /// Maximum absolute perturbation of each reflectivity.
    pub reflectivity_jitter: f64,
}

impl Default for AnatomyRanges {
    fn default() -> Self {
        Self {
            iris_radius_mm: (3.1, 3.6),
            pupil_radius_mm: (1.1, 1.8),
            sclera_semi_axis_x_mm: (7.4, 8.4),
            sclera_semi_axis_y_mm: (5.4, 6.2),
            gaze_gain_x_px_per_deg: (3.0, 5.0),
            gaze_gain_y_px_per_deg: (2.8, 4.6),
            eye_center_jitter_px: (30.0, 20.0),
            reflectivity_jitter: 0.1,
        }
    }
}

/// Draws a subject's eye from `ranges`, starting from `base` for anything
/// not covered by a range (noise level, nominal centre, reflectivities).
pub fn sample_subject(
    ranges: &AnatomyRanges,
    base: &EyeModelParams,
    subject_id: SubjectId,
    seed: u64,
) -> EyeModelParams {
    let mut rng = seed::rng(seed::derive(seed, &[tag::ANATOMY, subject_id as u64]));
    let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let iris = draw(ranges.iris_radius_mm);
    let pupil = draw(ranges.pupil_radius_mm).min(0.9 * iris);
    let sa = draw(ranges.sclera_semi_axis_x_mm);
    let sb = draw(ranges.sclera_semi_axis_y_mm);
    let gx = draw(ranges.gaze_gain_x_px_per_deg);
    let gy = draw(ranges.gaze_gain_y_px_per_deg);
    let jx = ranges.eye_center_jitter_px.0;
    let jy = ranges.eye_center_jitter_px.1;
    let ex = base.eye_center_px.0 + draw((-jx, jx));
    let ey = base.eye_center_px.1 + draw((-jy, jy));
    let rj = ranges.reflectivity_jitter;
    let mut jit = |v: f64| (v + draw((-rj, rj))).clamp(0.0, 1.0);
    let reflectivity = Reflectivity {
        skin: jit(base.reflectivity.skin),
        sclera: jit(base.reflectivity.sclera),
        iris: jit(base.reflectivity.iris),
        pupil: jit(base.reflectivity.pupil),
    };
    EyeModelParams {
        iris_radius_mm: iris,
        pupil_radius_mm: pupil,
        sclera_semi_axes_mm: (sa, sb),
        eye_center_px: (ex, ey),
        reflectivity,
        gaze_gain_px_per_deg: (gx, gy),
        noise_std: base.noise_std,
        subject_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> EyeModelParams {
        EyeModelParams {
            noise_std: 0.0,
            ..EyeModelParams::default()
        }
    }

    /// Centroid of pixels at the pupil reflectivity.
    fn pupil_centroid(img: &EyeImage, pupil: f64) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..img.height {
            for x in 0..img.width {
                if img.get(x, y) == pupil {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        assert!(n > 0.0, "no pupil pixels");
        (sx / n, sy / n)
    }

    #[test]
    fn zero_gaze_pupil_at_eye_center() {
        let p = noiseless();
        let img = render_eye(&p, GazeSample::default(), Shift2D::ZERO, &ImageSpec::default(), 0).unwrap();
        assert_eq!(pupil_centroid(&img, p.reflectivity.pupil), (320.0, 240.0));
    }

    #[test]
    fn gaze_displacement_is_linear() {
        let p = EyeModelParams {
            gaze_gain_px_per_deg: (4.0, 4.0),
            ..noiseless()
        };
        let spec = ImageSpec::default();
        let a = render_eye(&p, GazeSample::default(), Shift2D::ZERO, &spec, 0).unwrap();
        let b = render_eye(&p, GazeSample::new(10.0, 0.0), Shift2D::ZERO, &spec, 0).unwrap();
        let ca = pupil_centroid(&a, p.reflectivity.pupil);
        let cb = pupil_centroid(&b, p.reflectivity.pupil);
        assert_eq!(cb.0 - ca.0, 40.0);
        assert_eq!(cb.1, ca.1);
    }

    #[test]
    fn extreme_gaze_and_head_stay_inside() {
        // Hand geometry for the defaults: pupil centre at 240 + 16.7*4 + 5*20
        // = 406.8 px, iris radius 70 px, so the iris box ends at 476.8 and
        // the last row is 479: 2.2 px clearance. The mirrored corner gives
        // 3.2 px at the top edge.
        let p = noiseless();
        let spec = ImageSpec::default();
        let c = p.feature_clearance_px(&spec, GazeSample::new(RANGE_X_DEG, RANGE_Y_DEG), (5.0, 5.0));
        assert!((c - 2.2).abs() < 1e-9, "clearance {c}");
        assert!((p.worst_case_clearance_px(&spec, 5.0) - 2.2).abs() < 1e-9);

        // The image border is untouched skin.
        let img = render_eye(
            &p,
            GazeSample::new(RANGE_X_DEG, RANGE_Y_DEG),
            Shift2D::new(5.0, 5.0),
            &spec,
            0,
        )
        .unwrap();
        let skin = p.reflectivity.skin;
        for x in 0..img.width {
            assert_eq!(img.get(x, 0), skin);
            assert_eq!(img.get(x, img.height - 1), skin);
        }
        for y in 0..img.height {
            assert_eq!(img.get(0, y), skin);
            assert_eq!(img.get(img.width - 1, y), skin);
        }
    }

    #[test]
    fn margin_violation_is_config_error() {
        let spec = ImageSpec {
            width_px: 500,
            ..ImageSpec::default()
        };
        let err = render_eye(&noiseless(), GazeSample::default(), Shift2D::ZERO, &spec, 0);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn intensities_within_unit_interval() {
        let p = EyeModelParams {
            noise_std: 0.3,
            ..EyeModelParams::default()
        };
        let img = render_eye(&p, GazeSample::new(3.0, -2.0), Shift2D::ZERO, &ImageSpec::default(), 9).unwrap();
        assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn param_validation() {
        let mut p = EyeModelParams::default();
        assert!(p.validate().is_ok());
        p.pupil_radius_mm = 4.0;
        assert!(p.validate().is_err());
        let mut p = EyeModelParams::default();
        p.reflectivity.sclera = 1.2;
        assert!(p.validate().is_err());
        let mut p = EyeModelParams::default();
        p.gaze_gain_px_per_deg.1 = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn targets_for_25_fixations() {
        let t = stimulus_targets(&StimulusSpec::default()).unwrap();
        assert_eq!(t.len(), 25);
        let xs: Vec<f64> = t[..5].iter().map(|g| g.x_deg).collect();
        assert_eq!(xs, vec![-20.51, -10.255, 0.0, 10.255, 20.51]);
        let ys: Vec<f64> = t.iter().map(|g| g.y_deg).collect();
        assert_eq!(ys.iter().cloned().fold(f64::INFINITY, f64::min), -16.7);
        assert_eq!(ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 16.7);
    }

    #[test]
    fn targets_degenerate_and_invalid() {
        let one = StimulusSpec {
            n_fixations: 1,
            ..StimulusSpec::default()
        };
        assert_eq!(stimulus_targets(&one).unwrap(), vec![GazeSample::new(0.0, 0.0)]);
        let bad = StimulusSpec {
            n_fixations: 24,
            ..StimulusSpec::default()
        };
        assert!(matches!(stimulus_targets(&bad), Err(Error::Config(_))));
    }

    fn small_spec() -> StimulusSpec {
        StimulusSpec {
            samples_per_fixation: (4, 4),
            ..StimulusSpec::default()
        }
    }

    #[test]
    fn session_counts_and_static_head() {
        let s = plan_session(
            &small_spec(),
            &EyeModelParams::default(),
            &ImageSpec::default(),
            HeadWalk {
                step_std_mm: 0.0,
                clamp_mm: 1.0,
            },
            5,
        )
        .unwrap();
        assert_eq!(s.len(), 100);
        assert!(s.samples.iter().all(|x| x.head_offset_mm == Shift2D::ZERO));
    }

    #[test]
    fn head_walk_is_clamped_and_labels_in_range() {
        let stim = StimulusSpec::default();
        let s = plan_session(
            &stim,
            &EyeModelParams::default(),
            &ImageSpec::default(),
            HeadWalk {
                step_std_mm: 0.5,
                clamp_mm: 1.0,
            },
            8,
        )
        .unwrap();
        let lo = stim.samples_per_fixation.0 * 25;
        let hi = stim.samples_per_fixation.1 * 25;
        assert!((lo..=hi).contains(&s.len()));
        let slack = 3.0 * stim.jitter_std_deg;
        for x in &s.samples {
            assert!(x.head_offset_mm.dx_mm.abs() <= 1.0 && x.head_offset_mm.dy_mm.abs() <= 1.0);
            assert!(x.gaze.in_range(RANGE_X_DEG + slack, RANGE_Y_DEG + slack));
        }
    }

    #[test]
    fn sessions_are_deterministic() {
        let stim = StimulusSpec {
            n_fixations: 4,
            samples_per_fixation: (1, 2),
            ..StimulusSpec::default()
        };
        let p = EyeModelParams::default();
        let a = generate_session(&stim, &p, &ImageSpec::default(), 0.05, 42).unwrap();
        let b = generate_session(&stim, &p, &ImageSpec::default(), 0.05, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_session(&stim, &p, &ImageSpec::default(), 0.05, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_subjects_fit_image() {
        let spec = ImageSpec::default();
        let ranges = AnatomyRanges::default();
        for id in 0..64 {
            let p = sample_subject(&ranges, &EyeModelParams::default(), id, 1234);
            p.validate().unwrap();
            assert!(p.worst_case_clearance_px(&spec, 1.0) >= 0.0, "subject {id}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        /// Pupil centre moves by gaze*gain + head*scale; integer pixel
        /// displacements keep the disc centroid exact.
        #[test]
        fn pupil_center_is_affine(gx in -8i32..=8, gy in -6i32..=6, hx in -4i32..=4, hy in -4i32..=4) {
            let p = noiseless();
            let spec = ImageSpec::default();
            // gain 4 px/deg: quarter degrees give whole pixels
            let gaze = GazeSample::new(gx as f64 * 0.25, gy as f64 * 0.25);
            // quarter millimetres are exact in binary: 5 px each at 20 px/mm
            let head = Shift2D::new(hx as f64 * 0.25, hy as f64 * 0.25);
            let img = render_eye(&p, gaze, head, &spec, 0).unwrap();
            let (cx, cy) = pupil_centroid(&img, p.reflectivity.pupil);
            proptest::prop_assert!((cx - (320.0 + gx as f64 + 5.0 * hx as f64)).abs() < 1e-9);
            proptest::prop_assert!((cy - (240.0 + gy as f64 + 5.0 * hy as f64)).abs() < 1e-9);
        }
    }
}
