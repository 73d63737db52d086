use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::info;
use volimpute::train::{LogRow, Trainer};
use volimpute::vae::{Checkpoint, NoiseModel};

use crate::config::{json_diff, to_json, to_toml, RunConfig};
use crate::data::{load, Loaded};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const CONFIG_FILE: &str = "config.toml";
const LOG_HEADER: &str = "step,total,recon,kl,lr";

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub final_row: Option<LogRow>,
    pub loaded: Loaded,
}

fn check_layout(cfg: &RunConfig, loaded: &Loaded) -> CliResult<()> {
    if cfg.model.feature_dim != loaded.feature_dim() {
        return Err(CliError::Config(format!(
            "model.feature_dim = {} but the data has {} features",
            cfg.model.feature_dim,
            loaded.feature_dim()
        )));
    }
    Ok(())
}

/// Keeps loss-log rows up to `step` (dropping any written after the last
/// checkpoint) and reopens the file for appending.
fn open_log(path: &Path, keep_until: Option<u64>) -> CliResult<File> {
    match keep_until {
        Some(step) if path.exists() => {
            let kept: Vec<String> = BufReader::new(File::open(path)?)
                .lines()
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
                .collect();
            let mut f = File::create(path)?;
            writeln!(f, "{LOG_HEADER}")?;
            for l in kept {
                writeln!(f, "{l}")?;
            }
            Ok(OpenOptions::new().append(true).open(path)?)
        }
        _ => {
            let mut f = File::create(path)?;
            writeln!(f, "{LOG_HEADER}")?;
            Ok(f)
        }
    }
}

fn save(trainer: &Trainer, cfg: &RunConfig, loaded: &Loaded, path: &Path) -> CliResult<()> {
    let mut ck = trainer.checkpoint();
    ck.standardizer = loaded.standardizer().cloned();
    ck.run_config = Some(to_json(cfg)?);
    ck.save(path)?;
    Ok(())
}

pub fn run(cfg: &RunConfig, resume: bool) -> CliResult<TrainOutcome> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let loaded = load(&cfg.data)?;
    check_layout(cfg, &loaded)?;
    let data = loaded.train()?;

    let mut trainer = if ck_path.exists() {
        if !resume {
            return Err(CliError::Config(format!(
                "{} exists; pass --resume or choose a fresh output_dir",
                ck_path.display()
            )));
        }
        let ck = Checkpoint::load(&ck_path)?;
        let stored = ck.run_config.clone().unwrap_or(serde_json::Value::Null);
        let diff = json_diff(&stored, &to_json(cfg)?, &["training.steps"]);
        if !diff.is_empty() {
            return Err(CliError::ResumeMismatch(diff.join("\n")));
        }
        info!("resuming from step {}", ck.step);
        Trainer::resume(&ck, cfg.training.clone())?
    } else {
        Trainer::from_seed(&cfg.model, cfg.training.clone())?
    };
    std::fs::write(dir.join(CONFIG_FILE), to_toml(cfg)?)?;
    let mut log = open_log(&dir.join(LOSS_LOG_FILE), resume.then_some(trainer.step))?;

    let log_every = cfg.log_every.max(1);
    let ck_every = cfg.checkpoint_every;
    let steps = cfg.training.steps;
    let mut last = None;
    let mut io_err = None;
    trainer.run(&data, |t, r| {
        last = Some(*r);
        if r.step % log_every == 0 || r.step == steps {
            if let Err(e) = writeln!(log, "{},{},{},{},{}", r.step, r.total, r.recon, r.kl, r.lr) {
                io_err = Some(e);
            }
            info!("step {:>7}  loss {:>12.5}  recon {:>12.5}  kl {:>9.4}  lr {:.3e}", r.step, r.total, r.recon, r.kl, r.lr);
        }
        if ck_every > 0 && r.step % ck_every == 0 && r.step < steps {
            save(t, cfg, &loaded, &ck_path).map_err(|e| volimpute::Error::Io(std::io::Error::other(e.to_string())))?;
        }
        Ok(())
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    save(&trainer, cfg, &loaded, &ck_path)?;
    if let NoiseModel::LearnableScalar = cfg.model.noise_model {
        let s = trainer.params.get("noise.s")?.item();
        info!("learned sigma_x = {:.5}", volimpute::nd::func::softplus(s));
    }
    Ok(TrainOutcome { checkpoint: ck_path, final_row: last, loaded })
}
