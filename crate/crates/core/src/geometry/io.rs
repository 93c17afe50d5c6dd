use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalize, GeometryError, LabeledCloud, PointCloud, Result};
use crate::par;

/// Formats `v` with `sig` significant digits, `%g` style.
pub fn fmt_sig(v: f64, sig: usize) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.*e}", sig - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= sig as i32 {
        format!("{}e{}", trim_zeros(mantissa), exp)
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Reads one point per line, three whitespace-separated reals.
pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let file = fs::File::open(path)?;
    let mut points = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(GeometryError::Parse {
                line: lineno,
                msg: format!("expected 3 values, found {}", fields.len()),
            });
        }
        let mut p = [0.0f64; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|e| GeometryError::Parse {
                line: lineno,
                msg: format!("{f:?}: {e}"),
            })?;
            if !slot.is_finite() {
                return Err(GeometryError::Parse {
                    line: lineno,
                    msg: format!("non-finite value {f:?}"),
                });
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(GeometryError::Parse {
            line: 0,
            msg: "file contains no points".into(),
        });
    }
    PointCloud::new(points)
}

pub fn write_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in cloud.points() {
        writeln!(
            w,
            "{} {} {}",
            fmt_sig(p[0], 9),
            fmt_sig(p[1], 9),
            fmt_sig(p[2], 9)
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub categories: Vec<String>,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if e.label >= self.categories.len() {
                return Err(GeometryError::Manifest(format!(
                    "label {} of {} has no category",
                    e.label, e.path
                )));
            }
            if !seen.insert(e.path.as_str()) {
                return Err(GeometryError::Manifest(format!("duplicate path {}", e.path)));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: Self =
            serde_json::from_str(&text).map_err(|e| GeometryError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| GeometryError::Manifest(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Loads `dir/manifest.json` and every cloud it lists, normalised.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<LabeledCloud>)> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest::read(dir.join("manifest.json"))?;
    let clouds = par::map(&manifest.entries, |_, e| -> Result<LabeledCloud> {
        let cloud = normalize(&read_xyz(dir.join(&e.path))?)?;
        Ok(LabeledCloud {
            cloud,
            label: e.label,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clouds))
}
