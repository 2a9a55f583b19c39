//! On-disk formats: `x y z` text clouds, little-endian f32 feature blobs
//! with an `(N, d)` u32 header, and a JSON ground-truth record.
//!
//! A scene directory holds `source.xyz`, `target.xyz`,
//! `source_features.bin`, `target_features.bin` and `gt.json`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{PointCloud, RigidTransform};
use crate::matmath::MatchingMatrix;
use crate::synth::ScenePair;

pub const SOURCE_XYZ: &str = "source.xyz";
pub const TARGET_XYZ: &str = "target.xyz";
pub const SOURCE_FEATURES: &str = "source_features.bin";
pub const TARGET_FEATURES: &str = "target_features.bin";
pub const GT_JSON: &str = "gt.json";

/// Writes one `x y z` line per point using shortest round-trip formatting.
pub fn write_xyz(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_xyz(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = trimmed
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if vals.len() != 3 {
            return Err(invalid(format!(
                "{}:{}: expected 3 coordinates, got {}",
                path.display(),
                lineno + 1,
                vals.len()
            )));
        }
        out.push(Vector3::new(vals[0], vals[1], vals[2]));
    }
    Ok(out)
}

/// `N` and `d` as little-endian u32, then `N * d` little-endian f32 values
/// in row-major order.
pub fn write_matrix_f32(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let (n, d) = m.shape();
    let n32 = u32::try_from(n).map_err(|_| invalid("row count exceeds u32"))?;
    let d32 = u32::try_from(d).map_err(|_| invalid("column count exceeds u32"))?;
    let mut buf = Vec::with_capacity(8 + 4 * n * d);
    buf.extend_from_slice(&n32.to_le_bytes());
    buf.extend_from_slice(&d32.to_le_bytes());
    for i in 0..n {
        for c in 0..d {
            buf.extend_from_slice(&(m[(i, c)] as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_matrix_f32(path: &Path) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(invalid(format!("{}: truncated header", path.display())));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes"));
    let (n, d) = (word(0) as usize, word(4) as usize);
    if bytes.len() != 8 + 4 * n * d {
        return Err(invalid(format!(
            "{}: expected {} bytes for {n}x{d}, found {}",
            path.display(),
            8 + 4 * n * d,
            bytes.len()
        )));
    }
    Ok(DMatrix::from_fn(n, d, |i, c| {
        let k = 8 + 4 * (i * d + c);
        f32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as f64
    }))
}

/// Rounds every entry through f32, matching what a write/read cycle of a
/// feature blob produces.
pub fn quantize_f32(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|x| x as f32 as f64)
}

/// JSON ground truth of a scene pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub rows: usize,
    pub cols: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transform: Option<RigidTransform>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flow: Option<Vec<[f64; 3]>>,
    /// Matched `(source, target)` index pairs.
    pub pairs: Vec<(usize, usize)>,
    pub overlap: f64,
    pub seed: u64,
}

pub fn write_scene(dir: &Path, pair: &ScenePair) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_xyz(&dir.join(SOURCE_XYZ), pair.source.points())?;
    write_xyz(&dir.join(TARGET_XYZ), pair.target.points())?;
    if let Some(f) = pair.source.features() {
        write_matrix_f32(&dir.join(SOURCE_FEATURES), f)?;
    }
    if let Some(f) = pair.target.features() {
        write_matrix_f32(&dir.join(TARGET_FEATURES), f)?;
    }
    let (rows, cols) = pair.gt_matrix.shape();
    let record = GroundTruthRecord {
        rows,
        cols,
        transform: pair.gt_transform,
        flow: pair
            .gt_flow
            .as_ref()
            .map(|f| f.iter().map(|v| [v.x, v.y, v.z]).collect()),
        pairs: pair.gt_pairs(),
        overlap: pair.overlap_ratio,
        seed: pair.seed,
    };
    fs::write(dir.join(GT_JSON), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}

fn load_cloud(dir: &Path, xyz: &str, features: &str) -> Result<PointCloud> {
    let cloud = PointCloud::new(read_xyz(&dir.join(xyz))?)?;
    let fpath = dir.join(features);
    if fpath.exists() {
        cloud.with_features(read_matrix_f32(&fpath)?)
    } else {
        Ok(cloud)
    }
}

pub fn read_scene(dir: &Path) -> Result<ScenePair> {
    let source = load_cloud(dir, SOURCE_XYZ, SOURCE_FEATURES)?;
    let target = load_cloud(dir, TARGET_XYZ, TARGET_FEATURES)?;
    let record: GroundTruthRecord = serde_json::from_str(&fs::read_to_string(dir.join(GT_JSON))?)?;
    if record.rows != source.len() || record.cols != target.len() {
        return Err(invalid(format!(
            "{}: ground truth is {}x{} but clouds have {} and {} points",
            dir.display(),
            record.rows,
            record.cols,
            source.len(),
            target.len()
        )));
    }
    if record.transform.is_some() == record.flow.is_some() {
        return Err(invalid(format!(
            "{}: need exactly one of transform and flow",
            dir.display()
        )));
    }
    let flow = match record.flow {
        Some(f) if f.len() != source.len() => {
            return Err(invalid(format!("{}: flow length mismatch", dir.display())));
        }
        Some(f) => Some(f.into_iter().map(Vector3::from).collect()),
        None => None,
    };
    Ok(ScenePair {
        source,
        target,
        gt_transform: record.transform,
        gt_flow: flow,
        gt_matrix: MatchingMatrix::from_pairs(record.rows, record.cols, &record.pairs)?,
        overlap_ratio: record.overlap,
        seed: record.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_deformable_pair, make_features, make_rigid_pair};

    #[test]
    fn scene_round_trip_is_lossless_up_to_f32_features() {
        let dir = tempfile::tempdir().unwrap();
        let pair = make_features(&make_rigid_pair(25, 0.01, 0.6, 1).unwrap(), 0.8, 12, 1).unwrap();
        write_scene(dir.path(), &pair).unwrap();
        let back = read_scene(dir.path()).unwrap();
        assert_eq!(back.source.points(), pair.source.points());
        assert_eq!(back.target.points(), pair.target.points());
        assert_eq!(back.gt_transform, pair.gt_transform);
        assert_eq!(back.gt_matrix, pair.gt_matrix);
        assert_eq!(
            back.source.features().unwrap(),
            &quantize_f32(pair.source.features().unwrap())
        );

        let flow_dir = dir.path().join("flow");
        let def = make_deformable_pair(10, 0.1, 2.0, 2).unwrap();
        write_scene(&flow_dir, &def).unwrap();
        let back = read_scene(&flow_dir).unwrap();
        assert_eq!(back.gt_flow, def.gt_flow);
        assert!(back.source.features().is_none());
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let xyz = dir.path().join("bad.xyz");
        fs::write(&xyz, "1 2\n").unwrap();
        assert!(read_xyz(&xyz).is_err());
        fs::write(&xyz, "1 2 x\n").unwrap();
        assert!(read_xyz(&xyz).is_err());
        let bin = dir.path().join("bad.bin");
        fs::write(&bin, [2u8, 0, 0, 0, 2, 0, 0, 0, 1]).unwrap();
        assert!(read_matrix_f32(&bin).is_err());
        assert!(read_scene(dir.path()).is_err());
    }

    #[test]
    fn feature_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        write_matrix_f32(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &1.0f32.to_le_bytes());
        assert_eq!(read_matrix_f32(&path).unwrap(), m);
    }
}
