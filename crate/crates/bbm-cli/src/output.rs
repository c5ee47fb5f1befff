//! Output rows, JSON mirrors, and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// One estimates row; the CSV column order is fixed:
/// quantity, x, a, t, y, z_lo, z_hi, estimate, stderr, n, method, seed.
#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub quantity: String,
    pub x: Option<f64>,
    pub a: Option<f64>,
    pub t: Option<f64>,
    pub y: Option<f64>,
    pub z_lo: Option<f64>,
    pub z_hi: Option<f64>,
    pub estimate: f64,
    pub stderr: f64,
    pub n: u64,
    pub method: String,
    pub seed: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn rows_to_csv(rows: &[Row]) -> String {
    let mut out =
        String::from("quantity,x,a,t,y,z_lo,z_hi,estimate,stderr,n,method,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.quantity,
            opt(r.x),
            opt(r.a),
            opt(r.t),
            opt(r.y),
            opt(r.z_lo),
            opt(r.z_hi),
            r.estimate,
            r.stderr,
            r.n,
            r.method,
            r.seed
        ));
    }
    out
}

/// Collects output files for one run, then writes the manifest last.
pub struct RunWriter {
    dir: PathBuf,
    digests: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub replica_counts: BTreeMap<String, u64>,
}

impl RunWriter {
    pub fn new(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            digests: BTreeMap::new(),
            warnings: Vec::new(),
            replica_counts: BTreeMap::new(),
        })
    }

    /// Write a file atomically (temp + rename) and record its digest.
    pub fn write(&mut self, name: &str, contents: &str) -> io::Result<()> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!("{name}.tmp"));
        fs::write(&tmp, contents)?;
        fs::rename(&tmp, &path)?;
        let mut hasher = Sha256::new();
        hasher.update(contents.as_bytes());
        self.digests
            .insert(name.to_string(), format!("{:x}", hasher.finalize()));
        Ok(())
    }

    pub fn write_rows(&mut self, rows: &[Row]) -> io::Result<()> {
        self.write("estimates.csv", &rows_to_csv(rows))?;
        let json = serde_json::to_string_pretty(rows).expect("row serialization");
        self.write("estimates.json", &format!("{json}\n"))
    }

    /// Write the manifest; call after all other outputs.
    pub fn finish(
        &mut self,
        command: &str,
        config: serde_json::Value,
        seed: u64,
        workers: usize,
        wall_time_secs: f64,
    ) -> io::Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            tool_version: &'a str,
            command: &'a str,
            config: serde_json::Value,
            seed: u64,
            workers: usize,
            wall_time_secs: f64,
            replica_counts: &'a BTreeMap<String, u64>,
            warnings: &'a [String],
            output_digests: &'a BTreeMap<String, String>,
        }
        let manifest = Manifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            seed,
            workers,
            wall_time_secs,
            replica_counts: &self.replica_counts,
            warnings: &self.warnings,
            output_digests: &self.digests,
        };
        let body =
            serde_json::to_string_pretty(&manifest).expect("manifest serialization");
        // Bypass `write` so the manifest does not digest itself.
        let path = self.dir.join("manifest.json");
        let tmp = self.dir.join("manifest.json.tmp");
        fs::write(&tmp, format!("{body}\n"))?;
        fs::rename(&tmp, &path)
    }
}
