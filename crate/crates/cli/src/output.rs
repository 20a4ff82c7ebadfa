use std::path::{Path, PathBuf};

use serde::Serialize;

use prcalc::grid::{GridDomain, VoxelSet};
use prcalc::io;
use prcalc::pr::PiecewiseRigidFunction;
use prcalc::{Error, Result};

/// Output directory that records every file it writes.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        io::write_json(&p, value)
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(header).map_err(fail)?;
        for r in rows {
            w.write_record(r).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        let p = self.path(name);
        io::write_atomic(&p, &bytes)
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        io::write_atomic(&p, body.as_bytes())
    }

    pub fn function(&mut self, name: &str, u: &PiecewiseRigidFunction) -> Result<()> {
        let stem = name.trim_end_matches(".json");
        self.written.push(format!("{stem}.partition.json"));
        self.written.push(format!("{stem}.partition.bin"));
        let p = self.path(name);
        io::write_function(&p, u)
    }

    pub fn set(&mut self, name: &str, s: &VoxelSet) -> Result<()> {
        self.written.push(name.trim_end_matches(".json").to_string() + ".bin");
        let p = self.path(name);
        io::write_voxel_set(&p, s)
    }

    pub fn grid(&mut self, name: &str, dom: &GridDomain, labels: &[u32]) -> Result<()> {
        self.written.push(name.trim_end_matches(".json").to_string() + ".bin");
        let p = self.path(name);
        io::write_label_grid(&p, dom, labels)
    }

    pub fn files(&self) -> Vec<String> {
        let mut f = self.written.clone();
        f.sort();
        f.dedup();
        f
    }
}

/// Shortest round-trip decimal form; non-finite values as `inf`, `-inf`, `nan`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x}")
    }
}
