//! Plain-text parameter checkpoints.
//!
//! ```text
//! psog-checkpoint 1
//! layer <name> <dim> <dim> ...      one line per layer, in flat order
//! norm_mean <15 values>
//! norm_std <15 values>
//! params <count>
//! <value>                            one per line, flat order
//! ```
//!
//! Values are written in shortest round-trip form, so a save/load cycle
//! reproduces every bit.

use std::fmt::Write as _;
use std::path::Path;

use super::{NetworkParams, LAYERS, N_PARAMS};
use crate::array::N_SENSORS;
use crate::dataset::NormStats;
use crate::{Error, Result};

const MAGIC: &str = "psog-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub norm: NormStats,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MAGIC}").unwrap();
        for l in &LAYERS {
            let dims: Vec<String> = l.shape.iter().map(|d| d.to_string()).collect();
            writeln!(s, "layer {} {}", l.name, dims.join(" ")).unwrap();
        }
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(s, "norm_mean {}", join(&self.norm.mean)).unwrap();
        writeln!(s, "norm_std {}", join(&self.norm.std)).unwrap();
        writeln!(s, "params {}", self.params.len()).unwrap();
        for v in self.params.as_slice() {
            writeln!(s, "{v}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Checkpoint> {
        let bad = |msg: String| Error::parse(origin, msg);
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad(format!("missing {MAGIC:?} header")));
        }
        for l in &LAYERS {
            let line = lines.next().unwrap_or_default();
            let mut parts = line.split_whitespace();
            let ok = parts.next() == Some("layer") && parts.next() == Some(l.name);
            let dims: Vec<usize> = parts.filter_map(|d| d.parse().ok()).collect();
            if !ok || dims != l.shape {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint layer {line:?} does not match {} {:?}",
                    l.name, l.shape
                )));
            }
        }
        let mut vector = |key: &str| -> Result<[f64; N_SENSORS]> {
            let line = lines.next().unwrap_or_default();
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| bad(format!("expected {key} line")))?;
            let vals: Vec<f64> = rest
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad {key} value {v:?}"))))
                .collect::<Result<_>>()?;
            vals.try_into()
                .map_err(|_| bad(format!("{key} needs {N_SENSORS} values")))
        };
        let mean = vector("norm_mean")?;
        let std = vector("norm_std")?;
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("params "))
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| bad("expected params line".into()))?;
        if count != N_PARAMS {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {count} parameters, network needs {N_PARAMS}"
            )));
        }
        let values: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| bad(format!("bad parameter {l:?}"))))
            .collect::<Result<_>>()?;
        let params = NetworkParams::from_vec(values)?;
        if let Some(layer) = params.first_non_finite_layer() {
            return Err(Error::NonFinite(format!("checkpoint layer {layer}")));
        }
        Ok(Checkpoint {
            params,
            norm: NormStats { mean, std },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_text(&std::fs::read_to_string(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn sample() -> Checkpoint {
        let mut norm = NormStats::identity();
        norm.mean[3] = 0.1 + 0.2;
        norm.std[14] = 1.0 / 3.0;
        Checkpoint {
            params: init_params(42),
            norm,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let text = sample().to_text().replace("layer fc1_w 20 60", "layer fc1_w 20 61");
        assert!(matches!(
            Checkpoint::from_text(&text, Path::new("x")),
            Err(Error::ShapeMismatch(_))
        ));
        let text = sample().to_text().replace("params 2710", "params 2709");
        assert!(matches!(
            Checkpoint::from_text(&text, Path::new("x")),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
