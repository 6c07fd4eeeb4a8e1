use std::path::{Path, PathBuf};

use qatten_core::trainer::{MetricsRow, RunSink, Trainer};
use qatten_core::LabError;

use crate::attention::{export_attention, write_exports};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::metrics::MetricsLog;

/// Run directory layout.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths { dir: dir.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn checkpoint_at(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step_{step:09}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn attention(&self) -> PathBuf {
        self.dir.join("attention")
    }
}

fn to_lab(e: CliError) -> LabError {
    match e {
        CliError::Lab(e) => e,
        CliError::Io { path, source } => {
            LabError::Io(std::io::Error::new(source.kind(), format!("{}: {source}", path.display())))
        }
        other => LabError::Io(std::io::Error::other(other.to_string())),
    }
}

/// Writes metric rows to the run's CSV and periodic checkpoints next to it.
pub struct FileSink {
    log: MetricsLog,
    paths: RunPaths,
    pub rows: Vec<MetricsRow>,
}

impl RunSink for FileSink {
    fn metrics(&mut self, row: &MetricsRow) -> qatten_core::Result<()> {
        self.log.append(row).map_err(to_lab)?;
        self.rows.push(row.clone());
        Ok(())
    }

    fn checkpoint(&mut self, trainer: &Trainer) -> qatten_core::Result<()> {
        save_checkpoint(&self.paths.checkpoint_at(trainer.t_env), &trainer.snapshot()).map_err(to_lab)
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub last: Option<MetricsRow>,
    pub attention_files: Vec<PathBuf>,
}

/// Trains per `config`, optionally continuing from a checkpoint, and leaves
/// the config snapshot, metric log, checkpoints and (if requested) attention
/// exports in the run directory.
pub fn train_run(config: &RunConfig, resume: Option<&Path>) -> Result<RunSummary> {
    let env = config.load_env()?;
    let paths = RunPaths::new(&config.output_dir);
    std::fs::create_dir_all(paths.checkpoints()).map_err(CliError::io(&paths.checkpoints()))?;
    let config_text = serde_json::to_string_pretty(&config.to_value()).expect("config serializes");
    std::fs::write(paths.config(), config_text).map_err(CliError::io(&paths.config()))?;

    let (mut trainer, log) = match resume {
        Some(ckpt) => {
            let snapshot = load_checkpoint(ckpt)?;
            if snapshot.config != config.train {
                return Err(LabError::Config {
                    key: "<train>".into(),
                    reason: format!("{} was written with a different training config", ckpt.display()),
                }
                .into());
            }
            let log = MetricsLog::resume(&paths.metrics(), snapshot.t_env)?;
            (Trainer::restore(snapshot, env.clone())?, log)
        }
        None => (
            Trainer::new(config.train.clone(), env.clone())?,
            MetricsLog::create(&paths.metrics())?,
        ),
    };
    let mut sink = FileSink {
        log,
        paths,
        rows: Vec::new(),
    };
    trainer.run(&mut sink)?;
    let final_checkpoint = sink.paths.final_checkpoint();
    save_checkpoint(&final_checkpoint, &trainer.snapshot())?;

    let attention_files = if config.export_attention && trainer.learner.mixer.is_qatten() {
        let exports = export_attention(&trainer.learner, &env, config.attention_episodes, config.train.seed)?;
        write_exports(&sink.paths.attention(), &exports)?
    } else {
        Vec::new()
    };
    Ok(RunSummary {
        dir: sink.paths.dir.clone(),
        final_checkpoint,
        last: sink.rows.last().cloned(),
        attention_files,
    })
}
