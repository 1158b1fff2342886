//! Checkpoint directories.
//!
//! ```text
//! ckpt/
//!   manifest.txt         key=value: format, config_hash, seed, step, epoch, params
//!   config.toml          resolved run configuration
//!   params/<path>.ltnsr  one f64 dump per parameter, e.g. layers.0.spatial.qkv.w
//!   momentum/<path>.ltnsr
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use linvid_core::model::Model;
use linvid_core::train::TrainState;
use linvid_core::Tensor;

use crate::config::{ConfigError, RunConfig};
use crate::dump::{self, DumpError, Precision};

pub const FORMAT: &str = "linvid-checkpoint/1";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("no checkpoint at {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{path}: {source}")]
    Dump { path: PathBuf, source: DumpError },
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn config_hash(toml: &str) -> String {
    Sha256::digest(toml.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn save(dir: &Path, cfg: &RunConfig, state: &TrainState) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir.join("params"))?;
    fs::create_dir_all(dir.join("momentum"))?;
    let toml = cfg.to_toml();
    fs::write(dir.join("config.toml"), &toml)?;
    for ((name, p), m) in state.params.iter().zip(&state.momentum) {
        dump::save(&dir.join("params").join(format!("{name}.ltnsr")), p, Precision::F64)?;
        dump::save(&dir.join("momentum").join(format!("{name}.ltnsr")), m, Precision::F64)?;
    }
    let manifest = format!(
        "format={FORMAT}\nconfig_hash={}\nseed={}\nstep={}\nepoch={}\nparams={}\n",
        config_hash(&toml),
        state.seed,
        state.step,
        state.epoch,
        state.params.len()
    );
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>, CheckpointError> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(CheckpointError::Missing(dir.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Corrupt(format!("manifest line `{line}`")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T, CheckpointError> {
    m.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::Corrupt(format!("manifest key `{key}` missing or malformed")))
}

fn load_dump(path: PathBuf) -> Result<Tensor, CheckpointError> {
    dump::load(&path).map_err(|source| CheckpointError::Dump { path, source })
}

/// Configuration and training state stored in `dir`.
pub fn load(dir: &Path) -> Result<(RunConfig, TrainState), CheckpointError> {
    let manifest = read_manifest(dir)?;
    if manifest.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(CheckpointError::Corrupt(format!("format is not {FORMAT}")));
    }
    let toml = fs::read_to_string(dir.join("config.toml"))?;
    if manifest.get("config_hash") != Some(&config_hash(&toml)) {
        return Err(CheckpointError::Corrupt(
            "config.toml does not match config_hash".into(),
        ));
    }
    let cfg = RunConfig::from_toml(&toml)?;
    let mut model = Model::new(cfg.model, 0).map_err(ConfigError::from)?;
    let count: usize = field(&manifest, "params")?;
    if count != model.params.len() {
        return Err(CheckpointError::Corrupt(format!(
            "manifest lists {count} parameters, config builds {}",
            model.params.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    let mut momentum = Vec::with_capacity(count);
    for name in model.params.names() {
        params.push((
            name.clone(),
            load_dump(dir.join("params").join(format!("{name}.ltnsr")))?,
        ));
        momentum.push(load_dump(dir.join("momentum").join(format!("{name}.ltnsr")))?);
    }
    model
        .params
        .replace_all(params)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    for (m, p) in momentum.iter().zip(model.params.tensors()) {
        if m.shape() != p.shape() {
            return Err(CheckpointError::Corrupt(
                "momentum shape differs from its parameter".into(),
            ));
        }
    }
    let state = TrainState {
        params: model.params,
        momentum,
        step: field(&manifest, "step")?,
        epoch: field(&manifest, "epoch")?,
        seed: field(&manifest, "seed")?,
    };
    Ok((cfg, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Env;

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let cfg = RunConfig::load(
            None,
            &["schema=linvid/1".into(), "model.variant=toy".into()],
            &Env::default(),
        )
        .unwrap();
        let mut state = TrainState::fresh(&cfg.model, 9).unwrap();
        state.step = 17;
        state.epoch = 2;
        state.momentum[3].data_mut()[0] = -1.0 / 3.0;
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &cfg, &state).unwrap();
        let (cfg2, state2) = load(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(state2, state);
        assert!(dir.path().join("params/layers.1.temporal.fix.phi.w.ltnsr").is_file());
    }

    #[test]
    fn missing_and_tampered_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::Missing(_))));
        let cfg = RunConfig::load(
            None,
            &["schema=linvid/1".into(), "model.variant=toy".into()],
            &Env::default(),
        )
        .unwrap();
        save(dir.path(), &cfg, &TrainState::fresh(&cfg.model, 0).unwrap()).unwrap();
        let p = dir.path().join("config.toml");
        let text = fs::read_to_string(&p).unwrap().replace("epochs = 16", "epochs = 17");
        fs::write(&p, text).unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::Corrupt(_))));
    }
}
