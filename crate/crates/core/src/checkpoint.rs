//! Versioned single-file archive of a [`TrainState`].
//!
//! Layout: the magic line `FALCON-CKPT-1\n`, a little-endian `u64` header
//! length, a JSON header (configurations, counters, random-stream state,
//! history and a tensor index), then every tensor's `f32` values in
//! little-endian order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Discriminator, NetworkConfig, SegmentationNet};
use crate::nn::{Adam, ParamKind, ParamStore, Tensor};
use crate::training::{LogRecord, TrainConfig, TrainState, ValRecord};

pub const MAGIC: &str = "FALCON-CKPT-1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: [usize; 4],
    kind: ParamKind,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    network: NetworkConfig,
    train: TrainConfig,
    counter: u64,
    data_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    net_adam_steps: u64,
    disc_adam_steps: Option<u64>,
    history: Vec<LogRecord>,
    val_history: Vec<ValRecord>,
    best: Option<(u64, f64)>,
    stale_epochs: usize,
    stopped_early: bool,
    tensors: Vec<TensorEntry>,
}

fn push_store(entries: &mut Vec<TensorEntry>, data: &mut Vec<u8>, group: &str, store: &ParamStore) {
    for (name, t, kind) in store.iter() {
        push_tensor(entries, data, group, name, t.shape(), kind, t.data());
    }
}

fn push_tensor(
    entries: &mut Vec<TensorEntry>,
    data: &mut Vec<u8>,
    group: &str,
    name: &str,
    shape: [usize; 4],
    kind: ParamKind,
    values: &[f32],
) {
    entries.push(TensorEntry {
        group: group.into(),
        name: name.into(),
        shape,
        kind,
    });
    for v in values {
        data.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_moments(entries: &mut Vec<TensorEntry>, data: &mut Vec<u8>, group: &str, store: &ParamStore, opt: &Adam) {
    let (m, v) = opt.moments();
    for (i, (name, t, kind)) in store.iter().enumerate() {
        push_tensor(entries, data, &format!("{group}_adam_m"), name, t.shape(), kind, &m[i]);
        push_tensor(entries, data, &format!("{group}_adam_v"), name, t.shape(), kind, &v[i]);
    }
}

/// Serialises `state` to bytes.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    push_store(&mut entries, &mut data, "net", state.net.params());
    push_moments(&mut entries, &mut data, "net", state.net.params(), &state.net_opt);
    if let (Some(d), Some(o)) = (&state.disc, &state.disc_opt) {
        push_store(&mut entries, &mut data, "disc", d.params());
        push_moments(&mut entries, &mut data, "disc", d.params(), o);
    }
    if let Some(best) = &state.best_params {
        push_store(&mut entries, &mut data, "best", best);
    }
    let header = Header {
        format: MAGIC.into(),
        network: state.net.config().clone(),
        train: state.cfg.clone(),
        counter: state.counter,
        data_rng: state.data_rng.clone(),
        dropout_rng: state.dropout_rng.clone(),
        net_adam_steps: state.net_opt.steps(),
        disc_adam_steps: state.disc_opt.as_ref().map(Adam::steps),
        history: state.history.clone(),
        val_history: state.val_history.clone(),
        best: state.best,
        stale_epochs: state.stale_epochs,
        stopped_early: state.stopped_early,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 9 + json.len() + data.len());
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::IncompatibleVersion("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn tensor(&mut self, shape: [usize; 4]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Tensor::from_vec(shape, data)
    }
}

/// Parses a checkpoint produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let magic = format!("{MAGIC}\n");
    if !bytes.starts_with(magic.as_bytes()) {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(16)]).into_owned();
        return Err(Error::IncompatibleVersion(format!("expected {MAGIC}, found {found:?}")));
    }
    let mut r = Reader {
        bytes,
        pos: magic.len(),
    };
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::IncompatibleVersion(format!("bad header: {e}")))?;
    if header.format != MAGIC {
        return Err(Error::IncompatibleVersion(format!("header format {}", header.format)));
    }
    let mut groups: std::collections::BTreeMap<String, (ParamStore, Vec<Vec<f32>>)> = Default::default();
    for e in &header.tensors {
        let t = r.tensor(e.shape)?;
        let entry = groups.entry(e.group.clone()).or_default();
        entry.1.push(t.data().to_vec());
        entry.0.insert(e.name.clone(), t, e.kind);
    }
    if r.pos != bytes.len() {
        return Err(Error::IncompatibleVersion("trailing bytes after tensor data".into()));
    }
    let mut take = |g: &str| groups.remove(g);
    let (net_params, _) = take("net").ok_or_else(|| Error::IncompatibleVersion("no network weights".into()))?;
    let net = SegmentationNet::from_params(header.network.clone(), net_params)?;
    let moments = |m: Option<(ParamStore, Vec<Vec<f32>>)>| m.map(|(_, v)| v).unwrap_or_default();
    let net_opt = Adam::from_parts(
        header.train.optimizer,
        header.net_adam_steps,
        moments(take("net_adam_m")),
        moments(take("net_adam_v")),
    );
    let (disc, disc_opt) = match take("disc") {
        Some((p, _)) => {
            let d = Discriminator::from_params(header.train.disc.clone(), p)?;
            let o = Adam::from_parts(
                header.train.optimizer,
                header.disc_adam_steps.unwrap_or(0),
                moments(take("disc_adam_m")),
                moments(take("disc_adam_v")),
            );
            (Some(d), Some(o))
        }
        None => (None, None),
    };
    let best_params = take("best").map(|(p, _)| p);
    Ok(TrainState {
        cfg: header.train,
        net,
        net_opt,
        disc,
        disc_opt,
        counter: header.counter,
        data_rng: header.data_rng,
        dropout_rng: header.dropout_rng,
        history: header.history,
        val_history: header.val_history,
        best: header.best,
        best_params,
        stale_epochs: header.stale_epochs,
        stopped_early: header.stopped_early,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks that it was built for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &NetworkConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if state.net.config() != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint network {:?} differs from configured {:?}",
            state.net.config(),
            expected
        )));
    }
    Ok(state)
}
