//! Helpers for checking the files the `ttclab` commands write.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use ttclab_cli::args::Cli;
use ttclab_cli::Status;

/// Parses `args` as a `ttclab` command line and runs it in-process.
pub fn run_cli(args: &[&str]) -> anyhow::Result<Status> {
    let cli = Cli::try_parse_from(std::iter::once("ttclab").chain(args.iter().copied()))?;
    ttclab_cli::run(cli.command)
}

/// One map per data row, keyed by header name. Only handles the unquoted CSV the commands emit.
pub fn read_csv(path: &Path) -> anyhow::Result<Vec<BTreeMap<String, String>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    Ok(lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect())
        .collect())
}

/// Numeric field of a CSV row, NaN when absent or unparsable.
pub fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row.get(key).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

/// Every file under `dir`, keyed by relative path.
pub fn file_tree(dir: &Path) -> anyhow::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir)?.to_path_buf(), fs::read(&p)?);
            }
        }
    }
    Ok(out)
}
