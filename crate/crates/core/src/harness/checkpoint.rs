//! Checkpoint directories.
//!
//! ```text
//! config.txt          run configuration
//! state.json          step counter and optimizer step
//! log.csv             one row per completed step
//! params/<name>.pdco  every named parameter, f64
//! adam_m/<name>.pdco  first moments
//! adam_v/<name>.pdco  second moments
//! ```
//!
//! All randomness is addressed by `(seed, step)`, so the step counter is the
//! whole RNG state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::train::CSV_HEADER;
use super::{HarnessError, RunConfig};
use crate::data::{read_tensor, write_tensor, DataError, Dtype};
use crate::tensorcore::{Array, ParamStore};

pub const LOG_FILE: &str = "log.csv";
pub(crate) const STATE_FILE: &str = "state.json";
const CONFIG_FILE: &str = "config.txt";
const FORMAT: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub opt: AdamW,
    pub step: usize,
    pub log: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct State {
    format: u32,
    step: usize,
    adam_t: u64,
}

fn write_tensors<'a>(dir: &Path, items: impl Iterator<Item = (&'a str, &'a Array)>) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for (name, a) in items {
        write_tensor(&dir.join(format!("{name}.pdco")), a, Dtype::F64)?;
    }
    Ok(())
}

fn read_tensors(dir: &Path) -> Result<BTreeMap<String, Array>, HarnessError> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))? {
        let path = entry.map_err(|e| HarnessError::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".pdco")) else {
            continue;
        };
        out.insert(name.to_string(), read_tensor(&path)?);
    }
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), &ck.config.to_text())?;
    write_tensors(&dir.join("params"), ck.params.iter())?;
    write_tensors(&dir.join("adam_m"), ck.opt.m.iter().map(|(k, v)| (k.as_str(), v)))?;
    write_tensors(&dir.join("adam_v"), ck.opt.v.iter().map(|(k, v)| (k.as_str(), v)))?;
    let mut log = String::from(CSV_HEADER);
    log.push('\n');
    for row in &ck.log {
        log.push_str(row);
        log.push('\n');
    }
    write_file(&dir.join(LOG_FILE), &log)?;
    let state = State { format: FORMAT, step: ck.step, adam_t: ck.opt.t };
    let json = serde_json::to_string_pretty(&state).map_err(|e| HarnessError::Data(DataError::Io(e.to_string())))?;
    write_file(&dir.join(STATE_FILE), &(json + "\n"))
}

/// Data rows of `log.csv` (header excluded).
pub fn read_log(dir: &Path) -> Result<Vec<String>, HarnessError> {
    let path = dir.join(LOG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(HarnessError::Data(DataError::Parse(format!("{}: unexpected header", path.display()))));
    }
    Ok(lines.map(str::to_string).collect())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, HarnessError> {
    let state_path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&state_path).map_err(|e| HarnessError::io(&state_path, e))?;
    let state: State = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Data(DataError::Parse(format!("{}: {e}", state_path.display()))))?;
    if state.format != FORMAT {
        return Err(HarnessError::Data(DataError::Parse(format!("unsupported checkpoint format {}", state.format))));
    }
    let cfg_path = dir.join(CONFIG_FILE);
    let config = RunConfig::parse(&fs::read_to_string(&cfg_path).map_err(|e| HarnessError::io(&cfg_path, e))?)?;

    let mut params = ParamStore::new();
    for (name, a) in read_tensors(&dir.join("params"))? {
        params.insert(&name, a);
    }
    if params.is_empty() {
        return Err(HarnessError::Data(DataError::Parse(format!("{}: no parameters", dir.display()))));
    }
    let tc = &config.train;
    let mut opt = AdamW::new(tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
    opt.t = state.adam_t;
    opt.m = read_tensors(&dir.join("adam_m"))?;
    opt.v = read_tensors(&dir.join("adam_v"))?;

    let mut log = read_log(dir)?;
    if log.len() < state.step {
        return Err(HarnessError::Data(DataError::Parse(format!(
            "log has {} rows for step {}",
            log.len(),
            state.step
        ))));
    }
    log.truncate(state.step);
    Ok(Checkpoint { config, params, opt, step: state.step, log })
}
