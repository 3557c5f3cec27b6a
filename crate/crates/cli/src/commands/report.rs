use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::Args;
use relcap::numerics::bundle::read_json;
use relcap::{Error, Result};
use serde::Serialize;
use serde_json::Value;

use crate::output::{Outputs, RunInfo};
use crate::Context;

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// Run directories containing metrics.json (eval, ablate) or summary.json (train).
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Output CSV: one row per run, one column per numeric metric.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

/// Numeric leaves of `v` keyed by their dotted path.
fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Number(n) => {
            out.insert(prefix.to_string(), n.to_string());
        }
        Value::Bool(b) => {
            out.insert(prefix.to_string(), u8::from(*b).to_string());
        }
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&key(k), x, out);
            }
        }
        Value::Array(xs) => {
            for (i, x) in xs.iter().enumerate() {
                let name = x
                    .get("category")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .unwrap_or_else(|| i.to_string());
                flatten(&key(&name), x, out);
            }
        }
        Value::String(_) | Value::Null => {}
    }
}

fn metrics_of(dir: &Path) -> Result<Value> {
    for name in ["metrics.json", "summary.json"] {
        let p = dir.join(name);
        if p.exists() {
            return read_json(&p);
        }
    }
    Err(Error::Config(format!(
        "--runs: {} has neither metrics.json nor summary.json",
        dir.display()
    )))
}

pub fn run(ctx: &Context, args: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    let mut columns = BTreeSet::new();
    for dir in &args.runs {
        let mut flat = BTreeMap::new();
        flatten("", &metrics_of(dir)?, &mut flat);
        columns.extend(flat.keys().cloned());
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push((name, flat));
    }
    let out = Outputs::file(&args.out, ctx.force)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(std::iter::once("run").chain(columns.iter().map(String::as_str)))?;
    for (name, flat) in &rows {
        let cells = columns.iter().map(|c| flat.get(c).map(String::as_str).unwrap_or(""));
        w.write_record(std::iter::once(name.as_str()).chain(cells))?;
    }
    w.flush().map_err(|e| Error::io(&args.out, e))?;
    let options = super::options(&args)?;
    out.finish(&RunInfo {
        command: "report",
        config: &ctx.config,
        options: &options,
    })
}
