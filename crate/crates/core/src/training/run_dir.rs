use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::TrainOutcome;
use crate::dataset::PreprocessConfig;
use crate::error::{Error, Result};
use crate::protonet::save_checkpoint;

pub const RUN_FILES: [&str; 6] = [
    "config.json",
    "history.csv",
    "schedule.csv",
    "val.csv",
    "best.ckpt",
    "final.ckpt",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Writes the resolved config, per-episode losses and granularities,
/// validation curve and both checkpoints into `dir`.
pub fn write_run_dir(
    dir: &Path,
    config: &impl Serialize,
    outcome: &mut TrainOutcome,
    preprocess: &PreprocessConfig,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = serde_json::to_vec_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join("config.json"), &json)?;

    let h = &outcome.history;
    let mut history = String::from("episode_index,loss\n");
    for (i, loss) in h.losses.iter().enumerate() {
        let _ = writeln!(history, "{i},{loss}");
    }
    write_atomic(&dir.join("history.csv"), history.as_bytes())?;

    let mut schedule = String::from("episode_index,granularity\n");
    for (i, g) in outcome.plan.schedule.iter().enumerate() {
        let _ = writeln!(schedule, "{i},{}", g.as_str());
    }
    write_atomic(&dir.join("schedule.csv"), schedule.as_bytes())?;

    let mut val = String::from("episode,accuracy\n");
    for p in &h.validations {
        let _ = writeln!(val, "{},{}", p.episode, p.accuracy);
    }
    write_atomic(&dir.join("val.csv"), val.as_bytes())?;

    let meta = serde_json::json!({
        "best_episode": h.best_episode,
        "best_val_accuracy": h.best_accuracy,
        "episodes": h.losses.len(),
    });
    save_checkpoint(
        &dir.join("best.ckpt"),
        &mut outcome.best,
        preprocess,
        meta.clone(),
    )?;
    save_checkpoint(&dir.join("final.ckpt"), &mut outcome.last, preprocess, meta)?;
    Ok(())
}
