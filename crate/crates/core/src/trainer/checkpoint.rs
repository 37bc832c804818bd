//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.txt        header, then one "<name> <d0xd1x..>" line per parameter
//! <dir>/state.txt           step, optimiser counters, noise-rng position
//! <dir>/config.toml         full model config
//! <dir>/params/<name>.m3dt
//! <dir>/adam/{d,g}.{m,v}.<name>.m3dt
//! ```
//!
//! The directory is assembled under a temporary sibling and renamed into
//! place, so readers never observe a half-written checkpoint.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainState;
use crate::datamodel::archive::{self, ArchiveTensor};
use crate::datamodel::{config_file, find_task};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

fn shape_str(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    let mut out = [0u8; 32];
    if s.len() != 64 {
        return None;
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(format!("create {}", p.display()), e))
}

pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    mkdir(parent)?;
    let name = dir.file_name().unwrap_or_default().to_string_lossy();
    let tmp = parent.join(format!(".{name}.tmp{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(format!("remove {}", tmp.display()), e))?;
    }
    mkdir(&tmp.join("params"))?;
    mkdir(&tmp.join("adam"))?;

    let mut manifest = format!(
        "m3d-checkpoint {CHECKPOINT_VERSION}\ntask {}\nparams {}\n",
        state.task().name,
        state.params.len()
    );
    for (_, pname, v) in state.params.iter() {
        manifest.push_str(&format!("{pname} {}\n", shape_str(v.shape())));
        archive::write_tensor(&tmp.join("params").join(format!("{pname}.m3dt")), &ArchiveTensor::from_array(v))?;
    }
    for (tag, adam) in [("d", &state.adam_d), ("g", &state.adam_g)] {
        for (k, &id) in adam.ids.iter().enumerate() {
            let pname = state.params.name(id);
            let dir = tmp.join("adam");
            archive::write_tensor(&dir.join(format!("{tag}.m.{pname}.m3dt")), &ArchiveTensor::from_array(&adam.m[k]))?;
            archive::write_tensor(&dir.join(format!("{tag}.v.{pname}.m3dt")), &ArchiveTensor::from_array(&adam.v[k]))?;
        }
    }
    archive::write_atomic(&tmp.join("manifest.txt"), manifest.as_bytes())?;
    let state_txt = format!(
        "step {}\nadam_d_t {}\nadam_g_t {}\nconsecutive_diverged {}\nrng_seed {}\nrng_stream {}\nrng_word_pos {}\n",
        state.step,
        state.adam_d.t,
        state.adam_g.t,
        state.consecutive_diverged,
        hex(&state.rng.get_seed()),
        state.rng.get_stream(),
        state.rng.get_word_pos(),
    );
    archive::write_atomic(&tmp.join("state.txt"), state_txt.as_bytes())?;
    config_file::save(&tmp.join("config.toml"), state.cfg())?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(format!("remove {}", dir.display()), e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(format!("rename to {}", dir.display()), e))
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::io(format!("read {}", p.display()), e))
}

fn corrupt(path: PathBuf, reason: impl Into<String>) -> Error {
    Error::CorruptArchive {
        path,
        reason: reason.into(),
    }
}

fn key_values(text: &str) -> HashMap<&str, &str> {
    text.lines().filter_map(|l| l.split_once(' ')).collect()
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let mpath = dir.join("manifest.txt");
    let manifest = read_text(&mpath)?;
    let mut lines = manifest.lines();
    let header = lines.next().unwrap_or_default();
    let version: u32 = header
        .strip_prefix("m3d-checkpoint ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt(mpath.clone(), "missing checkpoint header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let task_name = lines
        .next()
        .and_then(|l| l.strip_prefix("task "))
        .ok_or_else(|| corrupt(mpath.clone(), "missing task line"))?;
    let task = find_task(task_name)?;
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("params "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| corrupt(mpath.clone(), "missing params line"))?;
    let shapes: HashMap<&str, &str> = lines.filter_map(|l| l.rsplit_once(' ')).collect();

    let cfg = config_file::load(&dir.join("config.toml"))?;
    let mut state = TrainState::new(&cfg, &task)?;
    if count != state.params.len() || shapes.len() != count {
        return Err(corrupt(
            mpath,
            format!("lists {count} parameters, the model has {}", state.params.len()),
        ));
    }
    let ids: Vec<_> = state.params.ids().collect();
    for id in ids {
        let name = state.params.name(id).to_string();
        let expected = shape_str(state.params.get(id).shape());
        if shapes.get(name.as_str()) != Some(&expected.as_str()) {
            return Err(corrupt(mpath.clone(), format!("parameter {name} missing or not of shape {expected}")));
        }
        let path = dir.join("params").join(format!("{name}.m3dt"));
        *state.params.get_mut(id) = load_shaped(&path, state.params.get(id).shape())?;
    }
    for (tag, adam) in [("d", &mut state.adam_d), ("g", &mut state.adam_g)] {
        for (k, &id) in adam.ids.iter().enumerate() {
            let pname = state.params.name(id);
            let shape = state.params.get(id).shape();
            adam.m[k] = load_shaped(&dir.join("adam").join(format!("{tag}.m.{pname}.m3dt")), shape)?;
            adam.v[k] = load_shaped(&dir.join("adam").join(format!("{tag}.v.{pname}.m3dt")), shape)?;
        }
    }

    let spath = dir.join("state.txt");
    let text = read_text(&spath)?;
    let kv = key_values(&text);
    let field = |k: &str| kv.get(k).copied().ok_or_else(|| corrupt(spath.clone(), format!("missing {k}")));
    let num = |k: &str| -> Result<u128> {
        field(k)?.parse().map_err(|_| corrupt(spath.clone(), format!("bad {k}")))
    };
    state.step = num("step")? as u64;
    state.adam_d.t = num("adam_d_t")? as u64;
    state.adam_g.t = num("adam_g_t")? as u64;
    state.consecutive_diverged = num("consecutive_diverged")? as usize;
    let seed = unhex(field("rng_seed")?).ok_or_else(|| corrupt(spath.clone(), "bad rng_seed"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(num("rng_stream")? as u64);
    rng.set_word_pos(num("rng_word_pos")?);
    state.rng = rng;
    Ok(state)
}

fn load_shaped(path: &Path, shape: &[usize]) -> Result<ndarray::ArrayD<f32>> {
    let a = archive::read_tensor(path)?.into_array()?;
    if a.shape() != shape {
        return Err(corrupt(
            path.to_path_buf(),
            format!("shape {:?}, expected {:?}", a.shape(), shape),
        ));
    }
    Ok(a)
}
