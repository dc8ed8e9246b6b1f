//! Portable graymap (PGM) reading and writing.
//!
//! Images are written as binary `P5` with `maxval = 65535` (big-endian
//! samples). The reader also accepts ASCII `P2` and 8-bit `P5`.

use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

pub struct Graymap {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities scaled to `[0, 1]`.
    pub pixels: Vec<f64>,
}

pub fn write(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{width} {height}\n65535\n")?;
    for &v in pixels {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.write_all(&q.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let bad = |msg: &str| Error::parse(path, msg);
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'2' || bytes[1] == b'5') {
        return Err(bad("not a P2/P5 graymap"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    // exactly one whitespace byte before the raster
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width: width as usize,
        height: height as usize,
        maxval,
        data_start: pos,
    })
}

/// Image dimensions without decoding the raster.
pub fn read_dimensions(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut head = Vec::with_capacity(512);
    std::fs::File::open(path)?.take(512).read_to_end(&mut head)?;
    let h = parse_header(path, &head)?;
    Ok((h.width, h.height))
}

pub fn read(path: &Path) -> Result<Graymap> {
    let bytes = std::fs::read(path)?;
    let h = parse_header(path, &bytes)?;
    let n = h.width * h.height;
    let scale = 1.0 / h.maxval as f64;
    let pixels: Vec<f64> = if h.magic[1] == b'2' {
        let text = std::str::from_utf8(&bytes[h.data_start.min(bytes.len())..])
            .map_err(|_| Error::parse(path, "non-ASCII raster"))?;
        text.split_ascii_whitespace()
            .take(n)
            .map(|t| t.parse::<u32>().map(|v| v as f64 * scale))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, "bad sample"))?
    } else {
        let raster = &bytes[h.data_start.min(bytes.len())..];
        if h.maxval < 256 {
            raster.iter().take(n).map(|&b| b as f64 * scale).collect()
        } else {
            raster
                .chunks_exact(2)
                .take(n)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
                .collect()
        }
    };
    if pixels.len() != n {
        return Err(Error::parse(path, "truncated raster"));
    }
    Ok(Graymap {
        width: h.width,
        height: h.height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let px: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        write(&path, 4, 3, &px).unwrap();
        let g = read(&path).unwrap();
        assert_eq!((g.width, g.height), (4, 3));
        for (a, b) in px.iter().zip(&g.pixels) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
        assert_eq!(read_dimensions(&path).unwrap(), (4, 3));
    }

    #[test]
    fn ascii_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pgm");
        std::fs::write(&path, "P2\n# made by hand\n2 2\n255\n0 255\n51 102\n").unwrap();
        let g = read(&path).unwrap();
        assert_eq!(g.pixels, vec![0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn rejects_other_formats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, "P6\n1 1\n255\n\0\0\0").unwrap();
        assert!(matches!(read(&path), Err(Error::Parse { .. })));
    }
}
