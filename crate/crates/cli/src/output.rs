use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use relcap::io::{config_hash, sha256_hex};
use relcap::numerics::bundle::write_json;
use relcap::{Error, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

/// Files a command writes, refusing to clobber existing ones without `--force`.
/// On completion a run record lists the resolved config and the hash of every file.
pub struct Outputs {
    base: PathBuf,
    record: PathBuf,
    force: bool,
    files: Vec<(String, PathBuf)>,
}

fn collides(path: &Path) -> bool {
    match fs::read_dir(path) {
        Ok(mut entries) => entries.next().is_some(),
        Err(_) => path.exists(),
    }
}

impl Outputs {
    /// Outputs inside directory `dir`, recorded in `dir/run.json`.
    pub fn dir(dir: &Path, force: bool) -> Result<Self> {
        if collides(dir) && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            base: dir.to_path_buf(),
            record: dir.join("run.json"),
            force,
            files: Vec::new(),
        })
    }

    /// A single output file, recorded in `<file>.run.json` next to it.
    pub fn file(path: &Path, force: bool) -> Result<Self> {
        let name = path
            .file_name()
            .ok_or_else(|| Error::Config(format!("output path {} has no file name", path.display())))?
            .to_string_lossy()
            .into_owned();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut out = Self {
            record: base.join(format!("{name}.run.json")),
            base,
            force,
            files: Vec::new(),
        };
        out.check(path)?;
        if !out.base.as_os_str().is_empty() {
            fs::create_dir_all(&out.base).map_err(|e| Error::io(&out.base, e))?;
        }
        out.files.push((name, path.to_path_buf()));
        Ok(out)
    }

    fn check(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        Ok(())
    }

    /// Registers `name` (relative to the output base) and returns its path.
    pub fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.base.join(name);
        self.check(&p)?;
        if !self.files.iter().any(|(f, _)| f == name) {
            self.files.push((name.to_string(), p.clone()));
        }
        Ok(p)
    }

    /// Registers a tensor manifest and its `.bin` payload.
    pub fn bundle(&mut self, stem: &str) -> Result<PathBuf> {
        self.path(&format!("{stem}.bin"))?;
        self.path(&format!("{stem}.json"))
    }

    /// Registers a file outside the base directory, keyed by its file name.
    pub fn extra(&mut self, path: &Path) -> Result<PathBuf> {
        self.check(path)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.files.push((name, path.to_path_buf()));
        Ok(path.to_path_buf())
    }

    pub fn finish(self, run: &RunInfo<'_>) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for (name, p) in &self.files {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            outputs.insert(name.clone(), sha256_hex(&bytes));
        }
        write_json(
            &self.record,
            &RunRecord {
                program: "relcap",
                version: env!("CARGO_PKG_VERSION"),
                command: run.command,
                config_hash: run.hash()?,
                config: run.config,
                options: run.options,
                outputs,
            },
        )
    }
}

/// What a run depends on: the subcommand, the resolved config and its own flags.
pub struct RunInfo<'a> {
    pub command: &'a str,
    pub config: &'a ExperimentConfig,
    pub options: &'a serde_json::Value,
}

impl RunInfo<'_> {
    pub fn hash(&self) -> Result<String> {
        config_hash(&(self.command, self.config, self.options))
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    program: &'a str,
    version: &'a str,
    command: &'a str,
    config_hash: String,
    config: &'a ExperimentConfig,
    options: &'a serde_json::Value,
    outputs: BTreeMap<String, String>,
}
