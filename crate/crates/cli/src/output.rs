//! Artifact writing: versioned CSV tables, atomic file replacement and the
//! run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

pub const CSV_VERSION: u32 = 1;

/// A CSV table whose first line is `# tumor-ocp <kind> v<version>`.
pub struct Table {
    text: String,
}

impl Table {
    pub fn new(kind: &str, columns: &[&str]) -> Self {
        let mut text = format!("# tumor-ocp {kind} v{CSV_VERSION}\n");
        text.push_str(&columns.join(","));
        text.push('\n');
        Self { text }
    }

    /// Appends a row; every float is written with 17 significant digits.
    pub fn row(&mut self, values: &[f64]) {
        let cells: Vec<String> = values.iter().map(|v| format!("{v:.16e}")).collect();
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

/// Reads the named columns of a CSV file; `#` lines are comments and the
/// first other line is the header.
pub fn read_csv_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| anyhow!("{}: missing header", path.display()))?
        .split(',')
        .map(str::trim)
        .collect();
    let index: Vec<usize> = names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| anyhow!("{}: no column {n:?}", path.display()))
        })
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for (lineno, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            bail!("{}: data row {} has {} cells, header has {}", path.display(), lineno + 1, cells.len(), header.len());
        }
        for (col, &i) in cols.iter_mut().zip(&index) {
            let v: f64 = cells[i]
                .parse()
                .with_context(|| format!("{}: data row {}: bad number {:?}", path.display(), lineno + 1, cells[i]))?;
            col.push(v);
        }
    }
    Ok(cols)
}

/// Output directory that records every file written through it.
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Writes to a temporary file in the directory, then renames it.
    fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        let target = self.dir.join(name);
        tmp.persist(&target)
            .map_err(|e| anyhow!("writing {}: {}", target.display(), e.error))?;
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.write_atomic(name, bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn table(&mut self, name: &str, table: Table) -> Result<()> {
        self.write(name, &table.into_bytes())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `manifest.json` listing every earlier file.
    pub fn finish(self, mut manifest: RunManifest) -> Result<()> {
        manifest.outputs = self.files.clone();
        manifest.finished = chrono::Utc::now().to_rfc3339();
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        self.write_atomic("manifest.json", text.as_bytes())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub subcommand: String,
    pub started: String,
    pub finished: String,
    pub exit_code: i32,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn start(subcommand: &str, config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            started: chrono::Utc::now().to_rfc3339(),
            finished: String::new(),
            exit_code: 0,
            outputs: Vec::new(),
        }
    }
}
