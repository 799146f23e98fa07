use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use qme_core::baselines::Methodology;
use qme_core::rl::{Algo, EvalTrace};

/// Config label used when the trace tree has no config level.
pub const DEFAULT_CONFIG: &str = "default";

/// All runs of one (config, methodology, algorithm) cell.
#[derive(Debug)]
pub struct TraceGroup {
    pub config: String,
    pub methodology: Methodology,
    pub algo: Algo,
    pub traces: Vec<EvalTrace>,
    pub files: Vec<PathBuf>,
}

pub fn trace_path(dir: &Path, run: usize) -> PathBuf {
    dir.join(format!("run_{run}.csv"))
}

fn subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push((
                entry.file_name().to_string_lossy().into_owned(),
                entry.path(),
            ));
        }
    }
    out.sort();
    Ok(out)
}

fn run_index(name: &str) -> Option<usize> {
    name.strip_prefix("run_")?
        .strip_suffix(".csv")?
        .parse()
        .ok()
}

fn load_cell(
    config: &str,
    methodology: Methodology,
    algo: Algo,
    dir: &Path,
) -> Result<Option<TraceGroup>> {
    let mut runs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if let Some(k) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(run_index)
        {
            runs.push((k, path));
        }
    }
    if runs.is_empty() {
        return Ok(None);
    }
    runs.sort();
    let mut traces = Vec::new();
    let mut files = Vec::new();
    for (k, path) in runs {
        let text = fs::read_to_string(&path)?;
        let parsed = EvalTrace::read_csv(text.as_bytes())
            .with_context(|| format!("parsing {}", path.display()))?;
        for mut t in parsed {
            t.run = k;
            traces.push(t);
        }
        files.push(path);
    }
    Ok(Some(TraceGroup {
        config: config.to_string(),
        methodology,
        algo,
        traces,
        files,
    }))
}

fn load_methods(config: &str, dir: &Path, out: &mut Vec<TraceGroup>) -> Result<()> {
    for (name, path) in subdirs(dir)? {
        let Ok(methodology) = name.parse::<Methodology>() else {
            continue;
        };
        for (algo_name, algo_dir) in subdirs(&path)? {
            let Ok(algo) = algo_name.parse::<Algo>() else {
                continue;
            };
            if let Some(g) = load_cell(config, methodology, algo, &algo_dir)? {
                out.push(g);
            }
        }
    }
    Ok(())
}

/// Reads `[config/]METHOD/algo/run_k.csv`. Directories whose names are not
/// methodologies are treated as config levels.
pub fn load_trace_tree(root: &Path) -> Result<Vec<TraceGroup>> {
    let mut out = Vec::new();
    load_methods(DEFAULT_CONFIG, root, &mut out)?;
    for (name, path) in subdirs(root)? {
        if name.parse::<Methodology>().is_err() {
            load_methods(&name, &path, &mut out)?;
        }
    }
    Ok(out)
}
