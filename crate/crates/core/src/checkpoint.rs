//! Checkpoint directories: `manifest.json` plus one raw little-endian f32
//! file per array.
//!
//! Parameters are stored under `generator.<name>` and `disc<i>.<name>`;
//! optimizer moments under `adam.<owner>.m|v.<name>`; image-buffer contents
//! under `pool<d>.<j>`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::model::{ArchConfig, DiscriminatorSet, Generator};
use crate::objective::{Adam, ImagePool, TrainConfig, Trainer};
use crate::params::ParamStore;
use crate::seq::SequenceSpec;
use crate::tensor::{Float, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const TRAINER_KIND: &str = "loopgan";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub kind: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step counts: generator first, then one per discriminator.
    pub steps: Vec<u64>,
    /// Names of the arrays holding moments and buffered images.
    pub arrays: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub sequence: SequenceSpec,
    pub arch: serde_json::Value,
    pub epoch: usize,
    pub iteration: u64,
    pub seed: u64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn entry(&self, name: &str) -> Result<&ArrayEntry> {
        self.arrays
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("array {name:?} missing from manifest")))
    }
}

fn file_name(name: &str) -> String {
    format!("{name}.f32")
}

/// Write arrays into `dir` (created if needed).
pub fn write_arrays(dir: &Path, arrays: &[(String, Tensor<f32>)]) -> Result<Vec<ArrayEntry>> {
    fs::create_dir_all(dir).at(dir)?;
    arrays
        .iter()
        .map(|(name, t)| {
            if name.contains(['/', '\\']) || name.starts_with('.') {
                return Err(Error::Checkpoint(format!("invalid array name {name:?}")));
            }
            let file = file_name(name);
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).at(&path)?;
            Ok(ArrayEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            })
        })
        .collect()
}

/// Read one array, checking its byte length against the manifest shape.
pub fn read_array(dir: &Path, entry: &ArrayEntry) -> Result<Tensor<f32>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::Checkpoint(format!("array {:?}: {}: {e}", entry.name, path.display())))?;
    let expected: usize = entry.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "array {:?} ({}) has {} bytes, expected {expected} for shape {:?}",
            entry.name,
            entry.file,
            bytes.len(),
            entry.shape
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(&entry.shape, data)
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(m)?).at(&path)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            m.schema_version
        )));
    }
    Ok(m)
}

/// Write into a sibling temp directory, then move it over `dir`.
pub(crate) fn write_atomically(dir: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = PathBuf::from(format!("{}.partial", dir.display()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    fs::create_dir_all(&tmp).at(&tmp)?;
    f(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    fs::rename(&tmp, dir).at(dir)
}

fn store_arrays<T: Float>(prefix: &str, store: &ParamStore<T>, out: &mut Vec<(String, Tensor<f32>)>) {
    for (name, t) in store.iter() {
        out.push((format!("{prefix}.{name}"), t.cast()));
    }
}

fn load_store<T: Float>(dir: &Path, m: &Manifest, prefix: &str, layout: &ParamStore<T>) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for name in layout.names() {
        let entry = m.entry(&format!("{prefix}.{name}"))?;
        store.add(name.clone(), read_array(dir, entry)?.cast());
    }
    Ok(store)
}

fn moment_arrays<T: Float>(owner: &str, store: &ParamStore<T>, opt: &Adam<T>, out: &mut Vec<(String, Tensor<f32>)>) {
    for (i, name) in store.names().iter().enumerate() {
        out.push((format!("adam.{owner}.m.{name}"), opt.m[i].cast()));
        out.push((format!("adam.{owner}.v.{name}"), opt.v[i].cast()));
    }
}

fn load_moments<T: Float>(dir: &Path, m: &Manifest, owner: &str, store: &ParamStore<T>, steps: u64, cfg: &OptimizerState) -> Result<Adam<T>> {
    let mut opt = Adam::new(store, cfg.beta1, cfg.beta2);
    opt.eps = cfg.eps;
    opt.steps = steps;
    for (i, name) in store.names().iter().enumerate() {
        opt.m[i] = read_array(dir, m.entry(&format!("adam.{owner}.m.{name}"))?)?.cast();
        opt.v[i] = read_array(dir, m.entry(&format!("adam.{owner}.v.{name}"))?)?.cast();
    }
    Ok(opt)
}

/// Save parameters (and optionally optimizer moments and image buffers).
pub fn save_trainer<T: Float>(trainer: &Trainer<T>, dir: &Path, include_optimizer: bool) -> Result<()> {
    save_trainer_with(trainer, dir, include_optimizer, serde_json::Value::Null)
}

pub fn save_trainer_with<T: Float>(trainer: &Trainer<T>, dir: &Path, include_optimizer: bool, extra: serde_json::Value) -> Result<()> {
    let mut arrays = Vec::new();
    store_arrays("generator", trainer.gen.store(), &mut arrays);
    for (i, m) in trainer.dset.members().iter().enumerate() {
        store_arrays(&format!("disc{i}"), m.store(), &mut arrays);
    }
    let param_count = arrays.len();
    let optimizer = include_optimizer.then(|| {
        moment_arrays("generator", trainer.gen.store(), &trainer.gen_opt, &mut arrays);
        for (i, (m, opt)) in trainer.dset.members().iter().zip(&trainer.disc_opts).enumerate() {
            moment_arrays(&format!("disc{i}"), m.store(), opt, &mut arrays);
        }
        for (d, pool) in trainer.pools.iter().enumerate() {
            for (j, img) in pool.images().iter().enumerate() {
                arrays.push((format!("pool{d}.{j}"), img.cast()));
            }
        }
        OptimizerState {
            kind: "adam".into(),
            beta1: trainer.gen_opt.beta1,
            beta2: trainer.gen_opt.beta2,
            eps: trainer.gen_opt.eps,
            steps: std::iter::once(trainer.gen_opt.steps)
                .chain(trainer.disc_opts.iter().map(|o| o.steps))
                .collect(),
            arrays: arrays[param_count..].iter().map(|(n, _)| n.clone()).collect(),
        }
    });
    write_atomically(dir, |tmp| {
        let entries = write_arrays(tmp, &arrays)?;
        write_manifest(
            tmp,
            &Manifest {
                schema_version: SCHEMA_VERSION,
                kind: TRAINER_KIND.into(),
                sequence: trainer.spec.clone(),
                arch: serde_json::to_value(&trainer.arch)?,
                epoch: trainer.epoch,
                iteration: trainer.iteration,
                seed: trainer.cfg.seed,
                train: Some(trainer.cfg.clone()),
                optimizer,
                arrays: entries,
                extra,
            },
        )
    })
}

fn expect_trainer_manifest(dir: &Path) -> Result<(Manifest, ArchConfig)> {
    let m = read_manifest(dir)?;
    if m.kind != TRAINER_KIND {
        return Err(Error::Checkpoint(format!("{} holds a {:?} checkpoint, not {TRAINER_KIND:?}", dir.display(), m.kind)));
    }
    let arch: ArchConfig = serde_json::from_value(m.arch.clone()).map_err(|e| Error::Checkpoint(format!("arch: {e}")))?;
    Ok((m, arch))
}

/// Generator and sequence from a checkpoint.
pub fn load_generator<T: Float>(dir: &Path) -> Result<(Generator<T>, SequenceSpec, Manifest)> {
    let (m, arch) = expect_trainer_manifest(dir)?;
    let n = m.sequence.n();
    let skeleton = Generator::<T>::new(&arch, &m.sequence, &mut crate::rng::stream(0, "layout", 0))?;
    let store = load_store(dir, &m, "generator", skeleton.store())?;
    let gen = Generator::from_store(&arch, n, &store)?;
    Ok((gen, m.sequence.clone(), m))
}

/// Restore a full trainer. Optimizer state and image buffers come back when
/// present; otherwise they start fresh.
pub fn load_trainer<T: Float>(dir: &Path) -> Result<Trainer<T>> {
    let (gen, spec, m) = load_generator::<T>(dir)?;
    let arch = gen.arch().clone();
    let cfg = m.train.clone().unwrap_or_default();
    let skeleton = DiscriminatorSet::<T>::new(&arch, &spec, 0)?;
    let stores = skeleton
        .members()
        .iter()
        .enumerate()
        .map(|(i, d)| load_store(dir, &m, &format!("disc{i}"), d.store()))
        .collect::<Result<Vec<_>>>()?;
    let dset = DiscriminatorSet::from_stores(&arch, &stores)?;
    let mut t = Trainer::assemble(&spec, &arch, &cfg, gen, dset);
    t.epoch = m.epoch;
    t.iteration = m.iteration;
    if let Some(opt) = &m.optimizer {
        if opt.steps.len() != spec.n() + 1 {
            return Err(Error::Checkpoint(format!("optimizer has {} step counts for {} domains", opt.steps.len(), spec.n())));
        }
        t.gen_opt = load_moments(dir, &m, "generator", t.gen.store(), opt.steps[0], opt)?;
        for i in 0..spec.n() {
            t.disc_opts[i] = load_moments(dir, &m, &format!("disc{i}"), t.dset.members()[i].store(), opt.steps[i + 1], opt)?;
        }
        for d in 0..spec.n() {
            let prefix = format!("pool{d}.");
            let mut imgs: Vec<(usize, Tensor<T>)> = m
                .arrays
                .iter()
                .filter_map(|e| e.name.strip_prefix(&prefix).and_then(|j| j.parse().ok()).map(|j| (j, e)))
                .map(|(j, e)| Ok((j, read_array(dir, e)?.cast())))
                .collect::<Result<_>>()?;
            imgs.sort_by_key(|(j, _)| *j);
            t.pools[d] = ImagePool::restore(cfg.image_buffer, imgs.into_iter().map(|(_, img)| img).collect());
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_vec(&[2, 3], vec![1.0f32, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, 7.0]).unwrap();
        let entries = write_arrays(dir.path(), &[("w.x".into(), t.clone())]).unwrap();
        assert_eq!(read_array(dir.path(), &entries[0]).unwrap(), t);
        let path = dir.path().join(&entries[0].file);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_array(dir.path(), &entries[0]).unwrap_err().to_string();
        assert!(err.contains("\"w.x\""), "{err}");
    }
}
