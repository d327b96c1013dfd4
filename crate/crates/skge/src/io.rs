//! Checkpoints, resumable training state and dataset directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skge_core::data::{Sample, CLASS_TABLE_VERSION};
use skge_core::nn::ParamStore;
use skge_core::record;
use skge_core::tensor::Tensor;
use skge_core::training::{TaskWeights, TrainState, Trainer, NUM_TASKS};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# skge-dataset v1";

pub fn read_records(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let buf = fs::read(path).map_err(CliError::io(path))?;
    record::decode(&buf).map_err(|source| CliError::Corrupt {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_records(path: &Path, records: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::write(path, record::encode(records)).map_err(CliError::io(path))
}

pub fn save_params(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    write_records(path, &store.to_records())
}

/// Loads a checkpoint into a store built from the run config; any name or
/// shape disagreement is a configuration error.
pub fn load_params(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    let records = read_records(path)?;
    store
        .load_records(&records)
        .map_err(|e| CliError::usage(format!("{}: checkpoint does not match the model config: {e}", path.display())))
}

/// Scalar schedule state saved next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResumeMeta {
    epoch: usize,
    lr: f64,
    best_val: Option<f64>,
    since_improvement: usize,
    since_halving: usize,
    stopped: bool,
    adam_t: u64,
    alpha: Vec<f64>,
}

pub fn resume_paths(ckpt: &Path) -> (PathBuf, PathBuf) {
    let s = ckpt.as_os_str().to_owned();
    let mut tensors = s.clone();
    tensors.push(".resume");
    let mut meta = s;
    meta.push(".resume.json");
    (tensors.into(), meta.into())
}

/// Writes everything needed to continue training after `store`'s last
/// update: current weights, optimizer moments and the schedule.
pub fn save_resume(ckpt: &Path, store: &ParamStore<f32>, trainer: &Trainer) -> Result<()> {
    let (tpath, mpath) = resume_paths(ckpt);
    let mut records = Vec::with_capacity(3 * store.len());
    for (name, t) in store.to_records() {
        records.push((format!("last/{name}"), t));
    }
    for (prefix, moments) in [("adam.m", &trainer.opt.m), ("adam.v", &trainer.opt.v)] {
        for id in store.ids() {
            let t = Tensor::new(store.get(id).shape(), moments[id.index()].clone())?;
            records.push((format!("{prefix}/{}", store.name(id)), t));
        }
    }
    write_records(&tpath, &records)?;
    let st = &trainer.state;
    let meta = ResumeMeta {
        epoch: st.epoch,
        lr: st.lr,
        best_val: st.best_val.is_finite().then_some(st.best_val),
        since_improvement: st.since_improvement,
        since_halving: st.since_halving,
        stopped: st.stopped,
        adam_t: trainer.opt.t,
        alpha: trainer.weights.0.to_vec(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("plain struct serializes");
    fs::write(&mpath, json).map_err(CliError::io(&mpath))
}

/// Restores a run saved by [`save_resume`]: `store` receives the last
/// weights and `trainer` the optimizer and schedule. The best weights so
/// far are read from `ckpt` itself.
pub fn load_resume(ckpt: &Path, store: &mut ParamStore<f32>, trainer: &mut Trainer) -> Result<()> {
    let (tpath, mpath) = resume_paths(ckpt);
    let text = fs::read_to_string(&mpath).map_err(CliError::io(&mpath))?;
    let meta: ResumeMeta =
        serde_json::from_str(&text).map_err(|e| CliError::corrupt(&mpath, format!("resume state: {e}")))?;
    let alpha: [f64; NUM_TASKS] = meta
        .alpha
        .clone()
        .try_into()
        .map_err(|_| CliError::corrupt(&mpath, format!("expected {NUM_TASKS} task weights")))?;

    let records = read_records(&tpath)?;
    let mut split: [Vec<(String, Tensor<f32>)>; 3] = Default::default();
    for (name, t) in records {
        let (slot, rest) = if let Some(r) = name.strip_prefix("last/") {
            (0, r)
        } else if let Some(r) = name.strip_prefix("adam.m/") {
            (1, r)
        } else if let Some(r) = name.strip_prefix("adam.v/") {
            (2, r)
        } else {
            return Err(CliError::corrupt(&tpath, format!("unexpected record {name}")));
        };
        split[slot].push((rest.to_string(), t));
    }
    let mismatch = |e: skge_core::Error| {
        CliError::usage(format!("{}: resume state does not match the model config: {e}", tpath.display()))
    };
    store.load_records(&split[0]).map_err(mismatch)?;
    for (slot, moments) in [(1, &mut trainer.opt.m), (2, &mut trainer.opt.v)] {
        let mut scratch = store.clone();
        scratch.load_records(&split[slot]).map_err(mismatch)?;
        for id in scratch.ids() {
            moments[id.index()] = scratch.get(id).data().to_vec();
        }
    }
    let mut best = store.clone();
    load_params(ckpt, &mut best)?;

    trainer.opt.t = meta.adam_t;
    trainer.weights = TaskWeights(alpha);
    trainer.state = TrainState {
        epoch: meta.epoch,
        best_val: meta.best_val.unwrap_or(f64::INFINITY),
        since_improvement: meta.since_improvement,
        since_halving: meta.since_halving,
        lr: meta.lr,
        stopped: meta.stopped,
    };
    trainer.best = meta.best_val.map(|_| best);
    Ok(())
}

pub fn sample_file_name(index: usize) -> String {
    format!("{index:06}.rec")
}

/// Writes `samples` with their generator seeds and a manifest.
pub fn store_dataset(dir: &Path, samples: &[(u64, Sample)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n# classes {CLASS_TABLE_VERSION}\n# count {}\n", samples.len());
    for (i, (seed, s)) in samples.iter().enumerate() {
        let name = sample_file_name(i);
        write_records(&dir.join(&name), &s.to_records())?;
        manifest.push_str(&format!("{i} {name} {seed}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(CliError::io(&path))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub file: String,
    pub seed: u64,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let bad = |m: String| CliError::corrupt(&path, m);
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(bad("missing manifest header".into()));
    }
    let classes = lines.next().and_then(|l| l.strip_prefix("# classes "));
    if classes != Some(CLASS_TABLE_VERSION) {
        return Err(bad(format!("class table {classes:?}, expected {CLASS_TABLE_VERSION}")));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("# count "))
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| bad("missing count line".into()))?;
    let mut entries = Vec::with_capacity(count);
    for (n, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [index, file, seed] = parts[..] else {
            return Err(bad(format!("malformed entry {line:?}")));
        };
        let index: usize = index.parse().map_err(|_| bad(format!("bad index in {line:?}")))?;
        let seed: u64 = seed.parse().map_err(|_| bad(format!("bad seed in {line:?}")))?;
        if index != n {
            return Err(bad(format!("entry {n} has index {index}")));
        }
        if file.contains('/') || file.contains('\\') || file == MANIFEST {
            return Err(bad(format!("illegal file name {file:?}")));
        }
        entries.push(ManifestEntry {
            index,
            file: file.to_string(),
            seed,
        });
    }
    if entries.len() != count {
        return Err(bad(format!("count line says {count}, manifest lists {}", entries.len())));
    }
    Ok(entries)
}

/// Every sample in manifest order, each checked against the sample invariants.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let entries = read_manifest(dir)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in &entries {
        let path = dir.join(&e.file);
        if !path.is_file() {
            return Err(CliError::corrupt(&dir.join(MANIFEST), format!("listed file {} is missing", e.file)));
        }
        let records = read_records(&path)?;
        let s = Sample::from_records(&records).map_err(|source| CliError::Corrupt { path, source })?;
        out.push(s);
    }
    Ok(out)
}
