use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use qatten_core::trainer::MetricsRow;

use crate::error::{CliError, Result};

pub const HEADER: &str = "step,median_return,mean_return,win_rate,loss,epsilon";

/// Append-only metric log. Each row goes out in a single write followed by
/// a flush, so an interrupted run leaves only whole rows behind.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

pub fn format_row(row: &MetricsRow) -> String {
    let loss = row.loss.map_or_else(|| "nan".to_string(), |l| l.to_string());
    format!(
        "{},{},{},{},{},{}\n",
        row.step, row.median_return, row.mean_return, row.win_rate, loss, row.epsilon
    )
}

impl MetricsLog {
    /// Starts a fresh log with its header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(CliError::io(path))?;
        file.write_all(format!("{HEADER}\n").as_bytes())
            .and_then(|_| file.flush())
            .map_err(CliError::io(path))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Reopens a log for a resumed run, dropping rows logged after
    /// `last_step` (they will be produced again).
    pub fn resume(path: &Path, last_step: usize) -> Result<Self> {
        let kept: Vec<MetricsRow> = read_metrics(path)?
            .into_iter()
            .filter(|r| r.step <= last_step)
            .collect();
        let tmp = path.with_extension("csv.tmp");
        {
            let mut out = MetricsLog::create(&tmp)?;
            for r in &kept {
                out.append(r)?;
            }
        }
        std::fs::rename(&tmp, path).map_err(CliError::io(path))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(CliError::io(path))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.file
            .write_all(format_row(row).as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(CliError::io(&self.path))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_metrics(path, &text)
}

pub fn parse_metrics(path: &Path, text: &str) -> Result<Vec<MetricsRow>> {
    let err = |line: usize, reason: String| CliError::Format {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => return Err(err(1, format!("expected header `{HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(err(i + 1, format!("expected 6 fields, found {}", cells.len())));
        }
        let float = |k: usize| {
            cells[k]
                .parse::<f64>()
                .map_err(|e| err(i + 1, format!("field {k}: {e}")))
        };
        let step = cells[0]
            .parse::<usize>()
            .map_err(|e| err(i + 1, format!("step: {e}")))?;
        let loss = float(4)?;
        rows.push(MetricsRow {
            step,
            median_return: float(1)?,
            mean_return: float(2)?,
            win_rate: float(3)?,
            loss: (!loss.is_nan()).then_some(loss),
            epsilon: float(5)?,
        });
    }
    Ok(rows)
}
