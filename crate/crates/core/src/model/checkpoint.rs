//! Checkpoint directory layout:
//!
//! ```text
//! manifest.txt        one `name path shape` line per tensor
//! state.txt           run config (key = value) plus step and optimizer count
//! params/<name>.mct1  parameter values
//! adam_m/<name>.mct1  first moments
//! adam_v/<name>.mct1  second moments
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{RunConfig, TrainState};
use crate::error::{Error, Result};
use crate::tensor::{read_mct1, write_mct1, Tensor};

const GROUPS: [&str; 3] = ["params", "adam_m", "adam_v"];

fn shape_str(t: &Tensor) -> String {
    if t.shape().is_empty() {
        "scalar".to_string()
    } else {
        t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    for g in GROUPS {
        fs::create_dir_all(dir.join(g))?;
    }
    let mut manifest = String::new();
    for (i, (name, value)) in state.model.store.iter().enumerate() {
        let tensors = [value, &state.opt.m[i], &state.opt.v[i]];
        for (g, t) in GROUPS.iter().zip(tensors) {
            let rel = format!("{g}/{name}.mct1");
            let mut w = BufWriter::new(File::create(dir.join(&rel))?);
            write_mct1(t, &mut w)?;
            w.flush()?;
            manifest.push_str(&format!("{g}:{name} {rel} {}\n", shape_str(t)));
        }
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    let state_txt = format!(
        "{}step = {}\nadam_t = {}\n",
        cfg.to_text(),
        state.step,
        state.opt.t
    );
    fs::write(dir.join("state.txt"), state_txt)?;
    Ok(())
}

/// Restores the run config and training state written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(RunConfig, TrainState)> {
    let state_txt = fs::read_to_string(dir.join("state.txt"))?;
    let (mut step, mut adam_t) = (None, None);
    let mut cfg_lines = String::new();
    for line in state_txt.lines() {
        match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
            Some(("step", v)) => step = v.parse::<usize>().ok(),
            Some(("adam_t", v)) => adam_t = v.parse::<u64>().ok(),
            _ => {
                cfg_lines.push_str(line);
                cfg_lines.push('\n');
            }
        }
    }
    let (Some(step), Some(adam_t)) = (step, adam_t) else {
        return format_err("state.txt lacks step or adam_t");
    };
    let cfg = RunConfig::parse(&cfg_lines)?;
    cfg.validate()?;
    let mut state = TrainState::new(cfg.spec.clone(), &cfg.train)?;
    state.step = step;
    state.opt.t = adam_t;

    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut entries = HashMap::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [key, path, shape] = parts[..] else {
            return format_err(format!("bad manifest line {line:?}"));
        };
        entries.insert(key.to_string(), (path.to_string(), shape.to_string()));
    }
    let names: Vec<String> = state.model.store.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        for g in GROUPS {
            let key = format!("{g}:{name}");
            let Some((path, shape)) = entries.get(&key) else {
                return format_err(format!("manifest has no entry for {key}"));
            };
            let t = read_mct1(BufReader::new(File::open(dir.join(path))?))?;
            if &shape_str(&t) != shape {
                return format_err(format!("{key}: manifest shape {shape} but file holds {}", shape_str(&t)));
            }
            match g {
                "params" => state.model.store.set(name, t)?,
                "adam_m" => state.opt.m[i] = check_shape(&state.opt.m[i], t, &key)?,
                _ => state.opt.v[i] = check_shape(&state.opt.v[i], t, &key)?,
            }
        }
    }
    Ok((cfg, state))
}

fn check_shape(like: &Tensor, t: Tensor, key: &str) -> Result<Tensor> {
    if like.shape() != t.shape() {
        return format_err(format!("{key}: expected shape {}, found {}", shape_str(like), shape_str(&t)));
    }
    Ok(t)
}
