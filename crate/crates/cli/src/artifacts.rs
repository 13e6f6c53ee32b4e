//! On-disk layout of a study directory.
//!
//! ```text
//! <out>/config.json              resolved config with its hash
//! <out>/data/*.jsonl             header line, then one row per line
//! <out>/checkpoints/*.ckpt       parameter checkpoints (hash in metadata)
//! <out>/runs/*.json              one result document per run
//! <out>/report/                  tables and figure data
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mmrec_tensor::{checkpoint, ParamSet};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: usize,
}

/// Paths inside one study directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    pub fn checkpoint(&self, stem: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stem}.ckpt"))
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn run(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(format!("{name}.json"))
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        write_file(&self.root.join("config.json"), cfg.echo().as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_rows<T: Serialize>(path: &Path, kind: &str, cfg: &ExperimentConfig, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        kind: kind.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        rows: rows.len(),
    };
    serde_json::to_writer(&mut w, &header).expect("header serializes");
    w.write_all(b"\n")?;
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| CliError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(Header, Vec<T>)> {
    let file = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |line: usize, msg: String| CliError::Input(format!("{}:{line}: {msg}", path.display()));
    let first = lines.next().transpose()?.ok_or_else(|| bad(1, "empty file".into()))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| bad(1, e.to_string()))?;
    if header.kind != kind {
        return Err(bad(1, format!("expected {kind} rows, found {}", header.kind)));
    }
    let mut rows = Vec::with_capacity(header.rows);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, e.to_string()))?);
    }
    if rows.len() != header.rows {
        return Err(bad(1, format!("header promises {} rows, found {}", header.rows, rows.len())));
    }
    Ok((header, rows))
}

/// Run documents always carry `kind`, `config_hash` and `seed` next to the
/// payload fields.
pub fn write_run<T: Serialize>(path: &Path, kind: &str, cfg: &ExperimentConfig, payload: &T) -> Result<()> {
    let mut v = serde_json::to_value(payload).expect("run serializes");
    let obj = v.as_object_mut().expect("run payload is an object");
    obj.insert("kind".into(), kind.into());
    obj.insert("config_hash".into(), cfg.hash().into());
    obj.insert("seed".into(), cfg.seed.into());
    let text = serde_json::to_string_pretty(&v).expect("run serializes") + "\n";
    write_file(path, text.as_bytes())
}

pub fn read_run(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn save_params(path: &Path, params: &ParamSet, cfg: &ExperimentConfig, tag: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let meta = BTreeMap::from([
        ("config_hash".to_string(), cfg.hash()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("tag".to_string(), tag.to_string()),
    ]);
    checkpoint::save(path, params, &meta)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(ParamSet, BTreeMap<String, String>)> {
    checkpoint::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}
