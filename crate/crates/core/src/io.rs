//! File formats: label grids (JSON header plus little-endian `u32` sidecar),
//! voxel sets, rigid motions in chart coordinates, and piecewise rigid
//! function files. All writes are atomic.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::grid::{GridDomain, LabelPartition, VoxelSet};
use crate::pr::PiecewiseRigidFunction;
use crate::rigid::{MatrixKind, RigidMotion, Vec3};
use crate::{Error, Result};

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub dim: usize,
    pub extent: Vec<usize>,
    pub cell_size: f64,
    pub origin: Vec<f64>,
    /// Sidecar file name, relative to the header.
    pub data: String,
}

impl GridHeader {
    pub fn domain(&self) -> Result<GridDomain> {
        GridDomain::new(self.dim, &self.extent, self.cell_size, &self.origin)
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

fn relative(from: &Path, to: &Path) -> PathBuf {
    match from.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.join(to),
        _ => to.to_path_buf(),
    }
}

/// Writes the header at `path` and labels (x fastest) to `path.bin`.
pub fn write_label_grid(path: &Path, domain: &GridDomain, labels: &[u32]) -> Result<()> {
    if labels.len() != domain.len() {
        return Err(Error::Format(format!(
            "{} labels for {} cells",
            labels.len(),
            domain.len()
        )));
    }
    let bin = sidecar(path);
    let mut bytes = Vec::with_capacity(4 * labels.len());
    for l in labels {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    write_atomic(&bin, &bytes)?;
    let header = GridHeader {
        dim: domain.dim,
        extent: domain.extent[..domain.dim].to_vec(),
        cell_size: domain.cell_size,
        origin: domain.origin[..domain.dim].to_vec(),
        data: bin
            .file_name()
            .expect("sidecar has a file name")
            .to_string_lossy()
            .into_owned(),
    };
    write_json(path, &header)
}

pub fn read_label_grid(path: &Path) -> Result<(GridDomain, Vec<u32>)> {
    let header: GridHeader = read_json(path)?;
    let domain = header.domain()?;
    let bytes = std::fs::read(relative(path, Path::new(&header.data)))?;
    if bytes.len() != 4 * domain.len() {
        return Err(Error::Format(format!(
            "sidecar holds {} bytes, expected {}",
            bytes.len(),
            4 * domain.len()
        )));
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((domain, labels))
}

pub fn write_voxel_set(path: &Path, set: &VoxelSet) -> Result<()> {
    let labels: Vec<u32> = set.members.iter().map(|&m| m as u32).collect();
    write_label_grid(path, &set.domain, &labels)
}

pub fn read_voxel_set(path: &Path) -> Result<VoxelSet> {
    let (domain, labels) = read_label_grid(path)?;
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Format(format!("voxel set label {l} is not 0 or 1")));
    }
    Ok(VoxelSet::from_fn(&domain, |i| labels[i] == 1))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MotionRecord {
    pub kind: MatrixKind,
    pub gamma: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn encode_motion(kind: MatrixKind, m: &RigidMotion) -> Result<MotionRecord> {
    Ok(MotionRecord {
        kind,
        gamma: kind.xi(&m.q, None)?,
        b: m.b.iter().take(kind.dim()).copied().collect(),
    })
}

pub fn decode_motion(rec: &MotionRecord) -> Result<RigidMotion> {
    let d = rec.kind.dim();
    if rec.b.len() != d {
        return Err(Error::Format(format!("translation needs {d} entries")));
    }
    let mut b = Vec3::zeros();
    for k in 0..d {
        b[k] = rec.b[k];
    }
    Ok(RigidMotion::new(rec.kind.psi(&rec.gamma)?, b))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FunctionFile {
    pub kind: MatrixKind,
    /// Label grid header, relative to this file.
    pub partition: String,
    /// Motions keyed by label.
    pub motions: BTreeMap<u32, MotionRecord>,
}

/// Writes `path` and the partition grid `<stem>.partition.json/.bin`.
pub fn write_function(path: &Path, u: &PiecewiseRigidFunction) -> Result<()> {
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::Format("function path needs a file name".into()))?
        .to_string_lossy()
        .into_owned();
    let grid_name = format!("{stem}.partition.json");
    write_label_grid(&relative(path, Path::new(&grid_name)), u.domain(), &u.partition.labels)?;
    let motions = u
        .motions
        .iter()
        .enumerate()
        .map(|(k, m)| Ok((k as u32, encode_motion(u.kind, m)?)))
        .collect::<Result<_>>()?;
    write_json(
        path,
        &FunctionFile {
            kind: u.kind,
            partition: grid_name,
            motions,
        },
    )
}

pub fn read_function(path: &Path) -> Result<PiecewiseRigidFunction> {
    let file: FunctionFile = read_json(path)?;
    let (domain, labels) = read_label_grid(&relative(path, Path::new(&file.partition)))?;
    let count = file.motions.keys().next_back().map_or(0, |&k| k as usize + 1);
    if file.motions.len() != count {
        return Err(Error::Format("motion labels must be 0..n without gaps".into()));
    }
    let motions = file
        .motions
        .values()
        .map(|r| {
            if r.kind != file.kind {
                return Err(Error::Format("motion kind differs from the function kind".into()));
            }
            decode_motion(r)
        })
        .collect::<Result<Vec<_>>>()?;
    PiecewiseRigidFunction::new(LabelPartition::new(&domain, labels)?, motions, file.kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigid::{rodrigues, rotation2};

    #[test]
    fn label_grid_round_trip_is_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let dom = GridDomain::new(2, &[3, 2], 0.5, &[-1.0, 0.0]).unwrap();
        let labels = vec![0, 1, 2, 3, 258, 7];
        let p = dir.path().join("g.json");
        write_label_grid(&p, &dom, &labels).unwrap();
        let raw = std::fs::read(dir.path().join("g.bin")).unwrap();
        assert_eq!(&raw[16..20], &[2, 1, 0, 0]);
        assert_eq!(read_label_grid(&p).unwrap(), (dom.clone(), labels));
        let set = VoxelSet::from_fn(&dom, |i| i % 2 == 0);
        write_voxel_set(&p, &set).unwrap();
        assert_eq!(read_voxel_set(&p).unwrap(), set);
        write_label_grid(&p, &dom, &[0, 2, 0, 0, 0, 0]).unwrap();
        assert!(read_voxel_set(&p).is_err());
    }

    #[test]
    fn function_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dom3 = GridDomain::centered(3, 4, 0.5).unwrap();
        let dom2 = GridDomain::centered(2, 4, 0.5).unwrap();
        let cases = [
            (dom2.clone(), MatrixKind::So2, vec![rotation2(0.3), rotation2(-3.0)]),
            (dom3.clone(), MatrixKind::So3, vec![rodrigues(&Vec3::new(0.1, 0.2, 3.1)), rodrigues(&Vec3::zeros())]),
            (dom3, MatrixKind::Skew3, vec![crate::rigid::hat(&Vec3::new(1.0, -2.0, 0.5)), crate::rigid::hat(&Vec3::zeros())]),
        ];
        for (dom, kind, qs) in cases {
            let labels = (0..dom.len()).map(|i| (i % 2) as u32).collect();
            let motions = qs
                .iter()
                .map(|q| RigidMotion::new(*q, Vec3::new(0.25, -1.5, if dom.dim == 3 { 2.0 } else { 0.0 })))
                .collect();
            let u = PiecewiseRigidFunction::new(LabelPartition::new(&dom, labels).unwrap(), motions, kind).unwrap();
            let p = dir.path().join("u.json");
            write_function(&p, &u).unwrap();
            let back = read_function(&p).unwrap();
            assert_eq!(back.partition, u.partition);
            for (a, b) in back.motions.iter().zip(&u.motions) {
                assert!(a.approx_eq(b, 1e-12));
            }
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.json");
        std::fs::write(&p, r#"{"dim":2,"extent":[2,2],"cell_size":1,"origin":[0,0],"data":"h.bin","extra":1}"#).unwrap();
        assert!(matches!(read_label_grid(&p), Err(Error::Format(_))));
        std::fs::write(&p, r#"{"dim":2,"extent":[2,2],"cell_size":1,"origin":[0,0],"data":"h.bin"}"#).unwrap();
        std::fs::write(dir.path().join("h.bin"), [0u8; 12]).unwrap();
        assert!(matches!(read_label_grid(&p), Err(Error::Format(_))));
    }
}
