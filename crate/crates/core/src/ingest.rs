//! Session manifests and the adapter for externally supplied eye images.
//!
//! A manifest is a CSV file with the header
//! `index,subject_id,x_deg,y_deg,head_dx_mm,head_dy_mm,image_path`.
//! `image_path` is relative to the manifest's directory and points at a PGM
//! file. The pixel scale is not stored per image; it is supplied when the
//! directory is opened, mirroring a ruler measurement taken once per
//! recording.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::synth_eye::{EyeImage, GazeSample, ImageMeta, ImageSource, Session};
use crate::shift::Shift2D;
use crate::{pgm, Error, Result, SubjectId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub subject_id: SubjectId,
    pub x_deg: f64,
    pub y_deg: f64,
    pub head_dx_mm: f64,
    pub head_dy_mm: f64,
    pub image_path: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    Ok(rows)
}

/// Renders every frame of `session` into `dir` as PGM files and returns the
/// manifest rows. `image_path` is left empty when `write_images` is false.
pub fn export_session(session: &Session, dir: &Path, write_images: bool) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::with_capacity(session.len());
    for i in 0..session.len() {
        let meta = session.meta(i);
        let image_path = if write_images {
            let name = format!("s{:03}_{:05}.pgm", meta.subject_id, i);
            let img = session.render(i)?;
            pgm::write(&dir.join(&name), img.width, img.height, &img.pixels)?;
            name
        } else {
            String::new()
        };
        rows.push(ManifestRow {
            index: i,
            subject_id: meta.subject_id,
            x_deg: meta.gaze.x_deg,
            y_deg: meta.gaze.y_deg,
            head_dx_mm: meta.head_offset_mm.dx_mm,
            head_dy_mm: meta.head_offset_mm.dy_mm,
            image_path,
        });
    }
    Ok(rows)
}

/// Images listed in a manifest, decoded on demand.
pub struct ImageDirectory {
    root: PathBuf,
    rows: Vec<ManifestRow>,
    dims: Vec<(usize, usize)>,
    scale_px_per_mm: f64,
}

impl ImageDirectory {
    pub fn open(manifest: &Path, scale_px_per_mm: f64) -> Result<Self> {
        if !(scale_px_per_mm > 0.0) {
            return Err(Error::config("scale_px_per_mm must be positive"));
        }
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let rows = read_manifest(manifest)?;
        let dims = rows
            .iter()
            .map(|r| pgm::read_dimensions(&root.join(&r.image_path)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root,
            rows,
            dims,
            scale_px_per_mm,
        })
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    /// Splits into one source per subject, preserving manifest order.
    pub fn by_subject(self) -> Vec<ImageDirectory> {
        let mut ids: Vec<SubjectId> = self.rows.iter().map(|r| r.subject_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .map(|id| {
                let (rows, dims): (Vec<_>, Vec<_>) = self
                    .rows
                    .iter()
                    .zip(&self.dims)
                    .filter(|(r, _)| r.subject_id == id)
                    .map(|(r, d)| (r.clone(), *d))
                    .unzip();
                ImageDirectory {
                    root: self.root.clone(),
                    rows,
                    dims,
                    scale_px_per_mm: self.scale_px_per_mm,
                }
            })
            .collect()
    }
}

impl ImageSource for ImageDirectory {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn meta(&self, index: usize) -> ImageMeta {
        let r = &self.rows[index];
        let (width, height) = self.dims[index];
        ImageMeta {
            subject_id: r.subject_id,
            gaze: GazeSample::new(r.x_deg, r.y_deg),
            head_offset_mm: Shift2D::new(r.head_dx_mm, r.head_dy_mm),
            scale_px_per_mm: self.scale_px_per_mm,
            width,
            height,
        }
    }

    fn load(&self, index: usize) -> Result<EyeImage> {
        let meta = self.meta(index);
        let g = pgm::read(&self.root.join(&self.rows[index].image_path))?;
        Ok(EyeImage {
            width: g.width,
            height: g.height,
            pixels: g.pixels,
            scale_px_per_mm: meta.scale_px_per_mm,
            gaze_truth: meta.gaze,
            head_offset_mm: meta.head_offset_mm,
            subject_id: meta.subject_id,
        })
    }
}
