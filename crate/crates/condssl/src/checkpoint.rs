//! Single-file checkpoints: a JSON manifest followed by the raw little-endian
//! f32 payload of every tensor, in walk order.
//!
//! Layout: 8-byte magic, u64 manifest length, manifest JSON, payload. The
//! manifest lists each tensor's name and length (offsets are cumulative) plus
//! a SHA-256 of the payload, so corruption and architecture drift are both
//! detected at load time. Writes go to a sibling temp file and are renamed
//! into place.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augpipe::AugmentationPolicy;
use crate::condproj::ConditioningSpec;
use crate::error::{Error, Result};
use crate::nn::{BackboneSpec, Tensors, Trainable};
use crate::model::SslModel;
use crate::optim::Sgd;
use crate::sslcore::{FeatureQueue, MethodConfig};

const MAGIC: &[u8; 8] = b"CNDSSL\x01\0";
const FORMAT_VERSION: u32 = 1;

/// Everything about a run that is not a tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub method: MethodConfig,
    pub conditioning: ConditioningSpec,
    pub backbone: BackboneSpec,
    pub augment: AugmentationPolicy,
    pub omega_layout_version: u32,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Global optimizer steps taken.
    pub step: u64,
    pub loss_history: Vec<f64>,
    /// Base stream of the producing run; sampling streams themselves are
    /// derived statelessly from (seed, purpose, coordinates).
    pub rng_state: ChaCha8Rng,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    meta: RunMeta,
    optimizer_momentum: f64,
    optimizer_weight_decay: f64,
    queue_head: Option<usize>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_f32s(payload: &mut Vec<u8>, data: &[f32]) {
    payload.reserve(data.len() * 4);
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes model, optimizer velocity, and queue; writes atomically.
pub fn save_checkpoint(
    path: &Path,
    model: &SslModel<f32>,
    optimizer: &Sgd<f32>,
    meta: &RunMeta,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    model.tensors(&mut |name, data| {
        entries.push(TensorEntry { name: name.to_string(), len: data.len() });
        push_f32s(&mut payload, data);
    });
    entries.push(TensorEntry { name: "optim.velocity".into(), len: optimizer.velocity().len() });
    push_f32s(&mut payload, optimizer.velocity());
    let queue_head = match &model.queue {
        Some(q) => {
            let (data, head) = q.state();
            entries.push(TensorEntry { name: "queue.data".into(), len: data.len() });
            push_f32s(&mut payload, data.as_slice().expect("standard layout"));
            Some(head)
        }
        None => None,
    };

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        optimizer_momentum: optimizer.momentum,
        optimizer_weight_decay: optimizer.weight_decay,
        queue_head,
        tensors: entries,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;

    let file_name = path
        .file_name()
        .ok_or_else(|| Error::checkpoint("checkpoint path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!("{file_name}.tmp"));
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
        w.write_all(&manifest_json)?;
        w.write_all(&payload)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_manifest_and_payload(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let mut r = std::io::BufReader::new(
        fs::File::open(path).map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::checkpoint("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(Error::checkpoint("not a checkpoint file (bad magic)"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::checkpoint("file too short for manifest length"))?;
    let mlen = u64::from_le_bytes(len) as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes)
        .map_err(|_| Error::checkpoint("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&mbytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if hex(&Sha256::digest(&payload)) != manifest.payload_sha256 {
        return Err(Error::checkpoint("payload hash mismatch (corrupt checkpoint)"));
    }
    let expect: usize = manifest.tensors.iter().map(|t| t.len * 4).sum();
    if payload.len() != expect {
        return Err(Error::checkpoint(format!(
            "payload is {} bytes, manifest expects {expect}",
            payload.len()
        )));
    }
    Ok((manifest, payload))
}

fn take_f32s(payload: &[u8], offset_f32: usize, len: usize) -> Vec<f32> {
    payload[offset_f32 * 4..(offset_f32 + len) * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

/// Reads only the non-tensor metadata.
pub fn load_meta(path: &Path) -> Result<RunMeta> {
    let (manifest, _) = read_manifest_and_payload(path)?;
    Ok(manifest.meta)
}

/// Rebuilds the model and optimizer exactly as saved.
pub fn load_checkpoint(path: &Path) -> Result<(SslModel<f32>, Sgd<f32>, RunMeta)> {
    let (manifest, payload) = read_manifest_and_payload(path)?;
    let meta = manifest.meta.clone();
    if meta.omega_layout_version != crate::augpipe::OMEGA_LAYOUT_VERSION {
        return Err(Error::checkpoint(format!(
            "checkpoint uses omega layout {}, this build expects {}",
            meta.omega_layout_version,
            crate::augpipe::OMEGA_LAYOUT_VERSION
        )));
    }

    // Structure comes from the specs; every tensor is then overwritten.
    let mut rebuild_rng = crate::rng::stream(meta.seed, "checkpoint-rebuild", &[]);
    let mut model: SslModel<f32> =
        SslModel::new(&meta.method, &meta.backbone, &meta.conditioning, &mut rebuild_rng)?;

    let mut idx = 0usize;
    let mut offset = 0usize;
    let mut walk_err: Option<Error> = None;
    model.tensors_mut(&mut |name, data| {
        if walk_err.is_some() {
            return;
        }
        let Some(entry) = manifest.tensors.get(idx) else {
            walk_err = Some(Error::checkpoint("more tensors in model than in manifest"));
            return;
        };
        if entry.name != name || entry.len != data.len() {
            walk_err = Some(Error::checkpoint(format!(
                "tensor mismatch at {idx}: manifest has {} ({}), model has {} ({})",
                entry.name,
                entry.len,
                name,
                data.len()
            )));
            return;
        }
        data.copy_from_slice(&take_f32s(&payload, offset, entry.len));
        offset += entry.len;
        idx += 1;
    });
    if let Some(e) = walk_err {
        return Err(e);
    }

    let velocity_entry = manifest
        .tensors
        .get(idx)
        .filter(|e| e.name == "optim.velocity")
        .ok_or_else(|| Error::checkpoint("missing optimizer velocity section"))?;
    let velocity = take_f32s(&payload, offset, velocity_entry.len);
    offset += velocity_entry.len;
    idx += 1;

    let mut optimizer = Sgd::new(manifest.optimizer_momentum, manifest.optimizer_weight_decay);
    optimizer.set_velocity(velocity, model.param_len())?;

    if let Some(head) = manifest.queue_head {
        let entry = manifest
            .tensors
            .get(idx)
            .filter(|e| e.name == "queue.data")
            .ok_or_else(|| Error::checkpoint("missing queue section"))?;
        let dim = model.online.out_dim();
        if entry.len % dim != 0 {
            return Err(Error::checkpoint("queue payload does not tile its width"));
        }
        let rows = entry.len / dim;
        let data = ndarray::Array2::from_shape_vec((rows, dim), take_f32s(&payload, offset, entry.len))
            .expect("shape just computed");
        model.queue = Some(FeatureQueue::from_state(data, head)?);
        offset += entry.len;
        idx += 1;
    }
    if idx != manifest.tensors.len() {
        return Err(Error::checkpoint("unread tensor sections in manifest"));
    }
    debug_assert_eq!(offset * 4, payload.len());
    Ok((model, optimizer, meta))
}

/// SHA-256 of a whole file, hex-encoded; used to key embedding caches to the
/// producing checkpoint.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}
