//! Transform files and on-disk pair sets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use bhreg_core::cloud::{read_xyz, write_xyz, PerturbationKind, PerturbationSpec, TrainSample};
use bhreg_core::rigid::RigidTransform;
use nalgebra::{Matrix3, Vector3};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.csv";
pub const TRANSFORM_COLUMNS: &str = "r00,r01,r02,tx,r10,r11,r12,ty,r20,r21,r22,tz";

/// Twelve numbers, the top three rows of the homogeneous matrix.
pub fn transform_fields(t: &RigidTransform) -> [f64; 12] {
    let r = &t.rotation;
    let v = &t.translation;
    [
        r[(0, 0)], r[(0, 1)], r[(0, 2)], v[0],
        r[(1, 0)], r[(1, 1)], r[(1, 2)], v[1],
        r[(2, 0)], r[(2, 1)], r[(2, 2)], v[2],
    ]
}

pub fn transform_from_fields(f: &[f64]) -> RigidTransform {
    let rotation = Matrix3::new(f[0], f[1], f[2], f[4], f[5], f[6], f[8], f[9], f[10]);
    RigidTransform::new(rotation, Vector3::new(f[3], f[7], f[11]))
}

pub fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// One transform per line, twelve whitespace or comma separated numbers;
/// `#` starts a comment.
pub fn parse_transforms(path: &Path, text: &str) -> Result<Vec<RigidTransform>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_error(path, i + 1, e.to_string()))?;
        if fields.len() != 12 {
            return Err(parse_error(path, i + 1, format!("expected 12 numbers, found {}", fields.len())));
        }
        let t = transform_from_fields(&fields);
        if !t.is_valid() {
            return Err(parse_error(path, i + 1, "rotation block is not a proper rotation".into()));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn read_transforms(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_transforms(path, &text)
}

pub fn read_transform(path: &Path) -> Result<RigidTransform> {
    let all = read_transforms(path)?;
    match all.as_slice() {
        [t] => Ok(*t),
        _ => Err(parse_error(path, 1, format!("expected one transform, found {}", all.len()))),
    }
}

pub fn format_transforms(ts: &[RigidTransform]) -> String {
    let mut s = String::new();
    for t in ts {
        let f = transform_fields(t);
        let _ = writeln!(s, "{}", f.map(|v| v.to_string()).join(" "));
    }
    s
}

fn parse_error(path: &Path, line: usize, message: String) -> CliError {
    CliError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

/// Writes `NNNN_source.xyz`, `NNNN_target.xyz`, `NNNN_gt.txt` and a
/// manifest with the perturbation and ground-truth motion of every pair.
pub fn write_pairs(dir: &Path, samples: &[TrainSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut manifest = format!("index,source,target,perturbation,level,{TRANSFORM_COLUMNS}\n");
    for (i, s) in samples.iter().enumerate() {
        let (src, tgt) = (format!("{i:04}_source.xyz"), format!("{i:04}_target.xyz"));
        write_xyz(&dir.join(&src), &s.source)?;
        write_xyz(&dir.join(&tgt), &s.target)?;
        let gt = dir.join(format!("{i:04}_gt.txt"));
        fs::write(&gt, format_transforms(&[s.gt])).map_err(|e| CliError::io(&gt, e))?;
        let _ = writeln!(
            manifest,
            "{i},{src},{tgt},{},{},{}",
            s.perturbation.kind.name(),
            s.perturbation.level,
            join(&transform_fields(&s.gt))
        );
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| CliError::io(&path, e))
}

pub fn read_pairs(dir: &Path) -> Result<Vec<TrainSample>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 17 {
            return Err(parse_error(&path, i + 1, format!("expected 17 columns, found {}", cols.len())));
        }
        let kind = PerturbationKind::from_name(cols[3])
            .ok_or_else(|| parse_error(&path, i + 1, format!("unknown perturbation {}", cols[3])))?;
        let nums = cols[4..]
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_error(&path, i + 1, e.to_string()))?;
        out.push(TrainSample {
            source: read_xyz(&dir.join(cols[1]))?,
            target: read_xyz(&dir.join(cols[2]))?,
            gt: transform_from_fields(&nums[1..]),
            perturbation: PerturbationSpec::new(kind, nums[0]),
            crop_plane: None,
            removed: Vec::new(),
        });
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{} lists no pairs", path.display())));
    }
    Ok(out)
}
