use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qatten_core::envs::EnvSpec;
use qatten_core::mixers::MixRecord;
use qatten_core::trainer::{eval_seeds, greedy_mix_records, Learner};

use crate::error::{CliError, Result};

pub const LAMBDA_HEADER: &str = "step,head,agent,lambda";
pub const WEIGHT_HEADER: &str = "step,head,w";
pub const CONSTANT_HEADER: &str = "step,c";

/// Mixer records of one greedy episode.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub seed: u64,
    pub records: Vec<MixRecord>,
}

/// Rolls out `episodes` greedy episodes with seeds derived from `seed` and
/// keeps the mixer record of every step.
pub fn export_attention(learner: &Learner, env: &EnvSpec, episodes: usize, seed: u64) -> Result<Vec<AttentionExport>> {
    eval_seeds(seed, 0, episodes)
        .into_iter()
        .map(|s| {
            Ok(AttentionExport {
                seed: s,
                records: greedy_mix_records(learner, env, s)?,
            })
        })
        .collect()
}

/// Long-format CSV with three sections separated by blank lines.
pub fn render_attention(records: &[MixRecord]) -> String {
    let mut out = String::new();
    out.push_str(LAMBDA_HEADER);
    out.push('\n');
    for (t, r) in records.iter().enumerate() {
        for (h, row) in r.lambda.iter().enumerate() {
            for (i, l) in row.iter().enumerate() {
                let _ = writeln!(out, "{t},{h},{i},{l}");
            }
        }
    }
    out.push('\n');
    out.push_str(WEIGHT_HEADER);
    out.push('\n');
    for (t, r) in records.iter().enumerate() {
        for (h, w) in r.head_weights.iter().enumerate() {
            let _ = writeln!(out, "{t},{h},{w}");
        }
    }
    out.push('\n');
    out.push_str(CONSTANT_HEADER);
    out.push('\n');
    for (t, r) in records.iter().enumerate() {
        let _ = writeln!(out, "{t},{}", r.constant);
    }
    out
}

pub fn write_attention(path: &Path, records: &[MixRecord]) -> Result<()> {
    std::fs::write(path, render_attention(records)).map_err(CliError::io(path))
}

/// Writes one CSV per episode into `dir`; returns the file paths.
pub fn write_exports(dir: &Path, exports: &[AttentionExport]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    exports
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let path = dir.join(format!("episode_{k:03}.csv"));
            write_attention(&path, &e.records)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTable {
    /// `(step, head, agent, lambda)`.
    pub lambda: Vec<(usize, usize, usize, f64)>,
    /// `(step, head, w)`.
    pub weights: Vec<(usize, usize, f64)>,
    /// `(step, c)`.
    pub constants: Vec<(usize, f64)>,
}

impl AttentionTable {
    /// Sum of λ over agents for every `(step, head)` group.
    pub fn group_sums(&self) -> BTreeMap<(usize, usize), f64> {
        let mut sums = BTreeMap::new();
        for &(t, h, _, l) in &self.lambda {
            *sums.entry((t, h)).or_insert(0.0) += l;
        }
        sums
    }
}

pub fn read_attention(path: &Path) -> Result<AttentionTable> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_attention(path, &text)
}

pub fn parse_attention(path: &Path, text: &str) -> Result<AttentionTable> {
    let err = |line: usize, reason: String| CliError::Format {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut table = AttentionTable::default();
    let mut section = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.is_empty() {
            section = None;
            continue;
        }
        if section.is_none() {
            section = Some(match line {
                LAMBDA_HEADER => 0,
                WEIGHT_HEADER => 1,
                CONSTANT_HEADER => 2,
                _ => return Err(err(n, format!("unknown section header `{line}`"))),
            });
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let int = |k: usize| {
            cells
                .get(k)
                .and_then(|c| c.parse::<usize>().ok())
                .ok_or_else(|| err(n, format!("field {k} is not an index")))
        };
        let float = |k: usize| {
            cells
                .get(k)
                .and_then(|c| c.parse::<f64>().ok())
                .ok_or_else(|| err(n, format!("field {k} is not a number")))
        };
        let width = [4, 3, 2][section.expect("section set")];
        if cells.len() != width {
            return Err(err(n, format!("expected {width} fields, found {}", cells.len())));
        }
        match section {
            Some(0) => table.lambda.push((int(0)?, int(1)?, int(2)?, float(3)?)),
            Some(1) => table.weights.push((int(0)?, int(1)?, float(2)?)),
            _ => table.constants.push((int(0)?, float(1)?)),
        }
    }
    Ok(table)
}
